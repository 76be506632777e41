use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tamperloc::gradsuite::{check_desk_network, check_toy_network, toy_config};
use tamperloc::network::{fuse, Model, NetworkConfig};
use tamperloc::nn::Mode;
use tamperloc::{Error, Tensor};

fn random_image(side: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[side, side, 3], |_| rng.gen_range(0.0..1.0))
}

fn trained_stats(model: &mut Model, seed: u64) {
    let inputs: Vec<_> = (0..2)
        .map(|i| model.prepare(random_image(model.config.input_side, seed + i)).unwrap())
        .collect();
    let pass = model.forward(&inputs, Mode::Train).unwrap();
    model.absorb_stats(&pass);
}

#[test]
fn desk_shapes_follow_config() {
    let model = Model::new(NetworkConfig::desk(), 1).unwrap();
    let input = model.prepare(random_image(128, 2)).unwrap();
    let t = Instant::now();
    let pass = model.forward(&[input], Mode::Train).unwrap();
    eprintln!("desk forward: {:?}", t.elapsed());
    assert_eq!(pass.shapes, model.config.stage_shapes());
}

#[test]
fn full_shapes_follow_config() {
    let model = Model::new(NetworkConfig::full(), 1).unwrap();
    let input = model.prepare(random_image(256, 3)).unwrap();
    let pass = model.forward(&[input], Mode::Train).unwrap();
    assert_eq!(pass.shapes, model.config.stage_shapes());
    let probs = &pass.probs[0];
    assert_eq!(probs.shape(), &[256, 256, 2]);
}

#[test]
fn probabilities_sum_to_one() {
    let mut model = Model::new(NetworkConfig::desk(), 4).unwrap();
    trained_stats(&mut model, 10);
    let p = model.predict(&random_image(128, 5), Mode::Infer).unwrap();
    for px in p.data().chunks_exact(2) {
        assert!((px[0] + px[1] - 1.0).abs() < 1e-12);
    }
}

#[test]
fn infer_mode_is_deterministic() {
    let mut model = Model::new(NetworkConfig::desk(), 6).unwrap();
    trained_stats(&mut model, 20);
    let img = random_image(128, 7);
    let a = model.predict(&img, Mode::Infer).unwrap();
    let b = model.predict(&img, Mode::Infer).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn infer_without_running_stats_is_a_state_error() {
    let model = Model::new(NetworkConfig::desk(), 8).unwrap();
    let err = model.predict(&random_image(128, 9), Mode::Infer).unwrap_err();
    let mut e: &Error = &err;
    while let Error::Stage { source, .. } = e {
        e = source;
    }
    assert!(matches!(e, Error::State(_)), "{err}");
}

#[test]
fn zero_parameters_give_even_odds() {
    let mut model = Model::new(toy_config(), 0).unwrap();
    model.params = model.params.zeros_like();
    let p = model.predict(&random_image(16, 1), Mode::Train).unwrap();
    assert!(p.data().iter().all(|&v| v == 0.5));
}

#[test]
fn wrong_input_side_names_the_stage() {
    let model = Model::new(NetworkConfig::desk(), 0).unwrap();
    let err = model.prepare(random_image(64, 0)).unwrap_err();
    assert!(matches!(err, Error::Stage { stage: "input", .. }), "{err}");
}

#[test]
fn fusion_channel_arithmetic() {
    let out = fuse(&Tensor::zeros(&[16, 16, 256]), &Tensor::filled(&[8, 8, 64], 1.0)).unwrap();
    assert_eq!(out.shape(), &[16, 16, 320]);
    let zero = fuse(&Tensor::filled(&[8, 8, 4], 1.0), &Tensor::zeros(&[8, 8, 2])).unwrap();
    for px in zero.data().chunks_exact(6) {
        assert_eq!(&px[4..], &[0.0, 0.0]);
    }
    assert!(fuse(&Tensor::zeros(&[12, 12, 1]), &Tensor::zeros(&[8, 8, 1])).is_err());
}

#[test]
fn lstm_placement_ignores_feature_values() {
    let model = Model::new(NetworkConfig::desk(), 3).unwrap();
    let a = model.prepare(random_image(128, 11)).unwrap();
    let (map, _) =
        tamperloc::network::lstm_branch(&a.sequence, &model.params, &model.config, model.ordering()).unwrap();
    // Each cell must equal the projection of the output at the step the
    // curve assigns to it; perturbing the last step only touches its cell.
    let mut b = a.clone();
    let last = b.sequence.len() - 1;
    b.sequence[last] = b.sequence[last].map(|v| v + 1.0);
    let (map_b, _) =
        tamperloc::network::lstm_branch(&b.sequence, &model.params, &model.config, model.ordering()).unwrap();
    let (r, c) = model.ordering().cell(last);
    let nf = model.config.projection_width;
    for cell in 0..64 {
        let same = map.data()[cell * nf..][..nf] == map_b.data()[cell * nf..][..nf];
        assert_eq!(same, cell != r * 8 + c, "cell {cell}");
    }
}

#[test]
fn toy_network_gradients() {
    let report = check_toy_network(5).unwrap();
    eprintln!("{report}");
    assert!(report.passed, "{report}");
}

#[test]
fn desk_network_gradients() {
    let t = Instant::now();
    let report = check_desk_network(9, 3).unwrap();
    eprintln!("{report} in {:?}", t.elapsed());
    assert!(report.passed, "{report}");
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let mut model = Model::new(NetworkConfig::desk(), 12).unwrap();
    trained_stats(&mut model, 30);
    let path = dir.path().join("m.floc");
    model.save(&path).unwrap();
    let loaded = Model::load(&path).unwrap();
    assert_eq!(loaded, model);
    let img = random_image(128, 13);
    let a = model.predict(&img, Mode::Infer).unwrap();
    let b = loaded.predict(&img, Mode::Infer).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}
