"""Smoke test for the tamperloc_py extension.

Build first:  cargo build --release -p tamperloc-py
Then run:     python3 python/smoke_test.py
"""

import os
import shutil
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def import_extension():
    try:
        import tamperloc_py
        return tamperloc_py
    except ImportError:
        pass
    built = os.path.join(ROOT, "target", "release", "libtamperloc_py.so")
    if not os.path.exists(built):
        sys.exit("extension not built; run `cargo build --release -p tamperloc-py`")
    stage = tempfile.mkdtemp()
    shutil.copy(built, os.path.join(stage, "tamperloc_py.so"))
    sys.path.insert(0, stage)
    import tamperloc_py
    return tamperloc_py


def main():
    tl = import_extension()

    cells = tl.hilbert_curve(3)
    assert len(cells) == 64 and len(set(cells)) == 64
    for (r0, c0), (r1, c1) in zip(cells, cells[1:]):
        assert abs(r0 - r1) + abs(c0 - c1) == 1

    assert tl.roc_auc([0.1, 0.4, 0.35, 0.8], [False, False, True, True]) == 0.75

    truth = [(0, 0, 9, 9, 1.0)]
    assert tl.average_precision([(0, 0, 9, 9, 0.9)], truth) == 1.0
    assert tl.average_precision([(50, 50, 59, 59, 0.9)], truth) == 0.0

    (image, mask), = tl.desk_samples(1, 128, 5)
    assert image.shape == [128, 128, 3] and mask.shape == [128, 128]
    feats = tl.image_features(image)
    assert len(feats) == 64 and all(len(f) == 80 for f in feats)

    model = tl.Model("desk", 1)
    try:
        model.predict(image)
        raise AssertionError("infer before training should fail")
    except RuntimeError:
        pass
    losses = model.fit([(image, mask)], 2)
    assert len(losses) == 2 and all(l > 0 for l in losses)
    probs = model.predict(image)
    assert probs.shape == [128, 128, 2]
    flat = probs.tolist()
    assert all(abs(flat[i] + flat[i + 1] - 1.0) < 1e-9 for i in range(0, len(flat), 2))

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "m.floc")
        model.save(path)
        again = tl.Model.load(path).predict(image).tolist()
        assert again == flat

    try:
        tl.Model("huge")
        raise AssertionError("unknown profile should fail")
    except ValueError:
        pass

    print("tamperloc_py smoke test passed")


if __name__ == "__main__":
    main()
