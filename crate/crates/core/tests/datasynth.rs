use std::collections::HashSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tamperloc::datasynth::{
    corner_crops, footprint, generate_corpus, procedural_canvas, procedural_object, splice, transform_object,
    CorpusConfig, SegmentedObject, Source, MANIFEST_NAME,
};
use tamperloc::imaging::{load_mask, load_rgb};
use tamperloc::Tensor;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn ramp(h: usize, w: usize) -> Tensor {
    Tensor::from_fn(&[h, w, 3], |i| ((i * 7919) % 256) as f64 / 255.0)
}

#[test]
fn corner_crops_of_a_wide_image() {
    let image = ramp(30, 20);
    let crops = corner_crops(&image, 10).unwrap();
    assert_eq!(crops.len(), 4);
    let distinct: HashSet<Vec<u64>> = crops.iter().map(|c| c.data().iter().map(|v| v.to_bits()).collect()).collect();
    assert_eq!(distinct.len(), 4);
    for (crop, (t, l)) in crops.iter().zip([(0, 0), (0, 10), (20, 0), (20, 10)]) {
        for y in 0..10 {
            for x in 0..10 {
                for c in 0..3 {
                    assert_eq!(crop.at3(y, x, c), image.at3(t + y, l + x, c));
                }
            }
        }
    }
}

#[test]
fn exact_size_crops_are_identical_and_small_images_skip() {
    let image = ramp(16, 16);
    let crops = corner_crops(&image, 16).unwrap();
    assert_eq!(crops.len(), 4);
    assert!(crops.iter().all(|c| c == &image));
    assert!(corner_crops(&ramp(15, 40), 16).unwrap().is_empty());
}

#[test]
fn identity_splice_is_a_translation() {
    let mut r = rng(1);
    let object = procedural_object("o", 9, &mut r).unwrap();
    let t = transform_object(&object, 1.0, 0.0).unwrap();
    let alpha: Vec<f64> = object.rgba.data().chunks_exact(4).map(|p| p[3]).collect();
    assert_eq!(t.alpha.data(), &alpha[..]);
    let canvas = procedural_canvas(24, 24, &mut r);
    let s = splice(&canvas, &Tensor::zeros(&[24, 24]), &object, 1.0, 0.0, Some((5, 7)), &mut r).unwrap();
    for y in 0..24 {
        for x in 0..24 {
            let inside = (5..5 + object.height()).contains(&y)
                && (7..7 + object.width()).contains(&x)
                && object.rgba.at3(y - 5, x - 7, 3) == 1.0;
            assert_eq!(s.mask.at2(y, x), inside as u8 as f64);
            for c in 0..3 {
                let want = if inside { object.rgba.at3(y - 5, x - 7, c) } else { canvas.at3(y, x, c) };
                assert_eq!(s.image.at3(y, x, c).to_bits(), want.to_bits());
            }
        }
    }
}

#[test]
fn placement_failures_are_reported() {
    let mut r = rng(2);
    let object = procedural_object("o", 12, &mut r).unwrap();
    let canvas = procedural_canvas(10, 10, &mut r);
    assert!(splice(&canvas, &Tensor::zeros(&[10, 10]), &object, 1.0, 0.0, None, &mut r).is_err());
    let full = Tensor::filled(&[40, 40], 1.0);
    let canvas = procedural_canvas(40, 40, &mut r);
    assert!(splice(&canvas, &full, &object, 1.0, 0.0, None, &mut r).is_err());
    assert!(transform_object(&object, 0.0, 0.0).is_err());
}

fn sources(count: usize, h: usize, w: usize, seed: u64) -> Vec<Source> {
    let mut r = rng(seed);
    (0..count)
        .map(|i| Source::Memory {
            id: format!("src{i:02}"),
            image: procedural_canvas(h, w, &mut r),
        })
        .collect()
}

fn objects(count: usize, size: usize, seed: u64) -> Vec<SegmentedObject> {
    let mut r = rng(seed);
    (0..count)
        .map(|i| procedural_object(format!("obj{i}"), size, &mut r).unwrap())
        .collect()
}

#[test]
fn corpus_counts_masks_and_replay() {
    let config = CorpusConfig {
        crop_side: 64,
        ..CorpusConfig::default()
    };
    let srcs = sources(10, 70, 90, 3);
    let objs = objects(8, 8, 4);
    let mut srcs_with_small = srcs.clone();
    srcs_with_small.push(Source::Memory {
        id: "tiny".into(),
        image: Tensor::zeros(&[32, 32, 3]),
    });
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let report = generate_corpus(&srcs_with_small, &objs, &config, a.path()).unwrap();
    assert_eq!(report.records.len(), 240);
    assert_eq!(report.skipped, vec!["tiny".to_string()]);
    for rec in &report.records {
        let mask = load_mask(a.path().join(&rec.mask)).unwrap();
        assert_eq!(mask.shape(), &[64, 64]);
        assert!(mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        let pasted: usize = rec.splices.iter().map(|s| s.pixels).sum();
        assert!(pasted > 0);
        assert_eq!(mask.sum() as usize, pasted);
        assert_eq!(load_rgb(a.path().join(&rec.image)).unwrap().shape(), &[64, 64, 3]);
        let again = footprint((64, 64), &rec.splices, &objs).unwrap();
        assert_eq!(again, mask);
    }
    let names: HashSet<_> = report.records.iter().map(|r| r.image.clone()).collect();
    assert_eq!(names.len(), 240);

    generate_corpus(&srcs_with_small, &objs, &config, b.path()).unwrap();
    let ma = std::fs::read(a.path().join(MANIFEST_NAME)).unwrap();
    let mb = std::fs::read(b.path().join(MANIFEST_NAME)).unwrap();
    assert_eq!(ma, mb);
    let first = &report.records[0];
    assert_eq!(
        std::fs::read(a.path().join(&first.image)).unwrap(),
        std::fs::read(b.path().join(&first.image)).unwrap()
    );

    let c = tempfile::tempdir().unwrap();
    let other = CorpusConfig { seed: 1, ..config };
    generate_corpus(&srcs, &objs, &other, c.path()).unwrap();
    assert_ne!(std::fs::read(c.path().join(MANIFEST_NAME)).unwrap(), ma);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn pastes_are_disjoint_and_leave_the_rest_untouched(
        seed in any::<u64>(),
        scale in 0.5f64..1.5,
        rot in -30.0f64..30.0,
    ) {
        let mut r = rng(seed);
        let object = procedural_object("o", 10, &mut r).unwrap();
        let canvas = procedural_canvas(48, 48, &mut r);
        let first = splice(&canvas, &Tensor::zeros(&[48, 48]), &object, scale, rot, None, &mut r).unwrap();
        let scale2 = r.gen_range(0.5..1.5);
        let second = splice(&first.image, &first.mask, &object, scale2, -rot, None, &mut r).unwrap();
        let only_second = footprint((48, 48), std::slice::from_ref(&second.record), std::slice::from_ref(&object)).unwrap();
        let both = footprint((48, 48), &[first.record.clone(), second.record.clone()], std::slice::from_ref(&object)).unwrap();
        prop_assert_eq!(&both, &second.mask);
        prop_assert_eq!(second.mask.sum() as usize, first.record.pixels + second.record.pixels);
        for y in 0..48 {
            for x in 0..48 {
                if only_second.at2(y, x) == 1.0 {
                    // No pasted pixel sits next to the earlier paste.
                    for ny in y.saturating_sub(1)..=(y + 1).min(47) {
                        for nx in x.saturating_sub(1)..=(x + 1).min(47) {
                            prop_assert_eq!(first.mask.at2(ny, nx), 0.0);
                        }
                    }
                }
                if both.at2(y, x) == 0.0 {
                    for c in 0..3 {
                        prop_assert_eq!(second.image.at3(y, x, c).to_bits(), canvas.at3(y, x, c).to_bits());
                    }
                }
            }
        }
    }
}
