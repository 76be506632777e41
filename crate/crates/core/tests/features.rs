use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tamperloc::features::{
    extract_patches, fft_magnitude, image_features, laplacian_error, patch_features, radon, FeatureConfig,
};
use tamperloc::Tensor;

/// O(R²) DFT magnitudes of bins `0 .. R/2`.
fn naive_dft(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    (0..n / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, v) in x.iter().enumerate() {
                let phase = -2.0 * std::f64::consts::PI * ((k * t) % n) as f64 / n as f64;
                re += v * phase.cos();
                im += v * phase.sin();
            }
            re.hypot(im)
        })
        .collect()
}

fn random_patch(side: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(&[side, side, 3], |_| rng.gen_range(0.0..1.0))
}

#[test]
fn fft_matches_naive_dft_up_to_1024() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for log in 1..=10 {
        let n = 1usize << log;
        for _ in 0..3 {
            let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let fast = fft_magnitude(&Tensor::vector(x.clone())).unwrap();
            for (a, b) in fast.data().iter().zip(naive_dft(&x)) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    assert!(worst < 1e-9, "max abs deviation {worst:e}");
}

#[test]
fn fft_closed_forms() {
    let c = fft_magnitude(&Tensor::filled(&[16], 0.25)).unwrap();
    assert!((c.data()[0] - 4.0).abs() < 1e-12);
    assert!(c.data()[1..].iter().all(|v| v.abs() < 1e-12));
    let mut impulse = Tensor::zeros(&[32]);
    impulse.data_mut()[0] = 1.0;
    let m = fft_magnitude(&impulse).unwrap();
    assert_eq!(m.len(), 16);
    assert!(m.data().iter().all(|v| (v - 1.0).abs() < 1e-12));
    assert!(fft_magnitude(&Tensor::zeros(&[12])).is_err());
}

#[test]
fn radon_conserves_mass_per_angle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (side, angles, bins) in [(16, 10, 16), (32, 10, 32), (9, 7, 4)] {
        let map = Tensor::from_fn(&[side, side], |_| rng.gen_range(0.0..2.0));
        let total = map.sum();
        let sino = radon(&map, angles, bins).unwrap();
        for row in sino.data().chunks_exact(bins) {
            let s: f64 = row.iter().sum();
            assert!(((s - total) / total).abs() < 1e-9);
        }
    }
}

#[test]
fn radon_single_pixel_oracle() {
    // Each angle puts the pixel's value into the bin of its centre offset.
    let (side, angles, bins) = (16usize, 10usize, 16usize);
    let c = (side as f64 - 1.0) / 2.0;
    let half = side as f64 * std::f64::consts::SQRT_2 / 2.0;
    for (y, x) in [(0, 0), (3, 11), (15, 15), (8, 7)] {
        let mut map = Tensor::zeros(&[side, side]);
        map.data_mut()[y * side + x] = 2.5;
        let sino = radon(&map, angles, bins).unwrap();
        for a in 0..angles {
            let theta = a as f64 * std::f64::consts::PI / angles as f64;
            // Offset along the projection direction, y pointing up.
            let s = (x as f64 - c) * theta.cos() + (c - y as f64) * theta.sin();
            let width = 2.0 * half / bins as f64;
            let b = (0..bins)
                .min_by(|&i, &j| {
                    let ci = -half + (i as f64 + 0.5) * width;
                    let cj = -half + (j as f64 + 0.5) * width;
                    (s - ci).abs().total_cmp(&(s - cj).abs())
                })
                .unwrap();
            let row = &sino.data()[a * bins..][..bins];
            assert_eq!(row.iter().filter(|v| **v != 0.0).count(), 1);
            assert_eq!(row[b], 2.5, "angle {a} pixel ({y}, {x})");
        }
    }
    assert!(radon(&Tensor::zeros(&[8, 8]), 4, 8).unwrap().data().iter().all(|v| *v == 0.0));
}

#[test]
fn laplacian_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let side = 12;
    let patch = random_patch(side, &mut rng);
    let lum: Vec<f64> = patch
        .data()
        .chunks_exact(3)
        .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
        .collect();
    // Edge-replicated neighbours.
    let at = |y: isize, x: isize| {
        let y = y.clamp(0, side as isize - 1) as usize;
        let x = x.clamp(0, side as isize - 1) as usize;
        lum[y * side + x]
    };
    let got = laplacian_error(&patch).unwrap();
    for y in 0..side as isize {
        for x in 0..side as isize {
            let r = at(y - 1, x) + at(y + 1, x) + at(y, x - 1) + at(y, x + 1) - 4.0 * at(y, x);
            let v = got.data()[y as usize * side + x as usize];
            assert!((v - r.abs().sqrt()).abs() < 1e-12);
        }
    }
}

#[test]
fn upsampled_patch_changes_the_descriptor() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let side = 16;
    let patch = random_patch(side, &mut rng);
    let up = Tensor::from_fn(&[side, side, 3], |i| {
        let (y, x, c) = (i / (3 * side), (i / 3) % side, i % 3);
        patch.data()[((y / 2) * side + x / 2) * 3 + c]
    });
    let cfg = FeatureConfig::DESK;
    let a = patch_features(&patch, &cfg).unwrap();
    let b = patch_features(&up, &cfg).unwrap();
    let d: f64 = a.values().iter().zip(b.values()).map(|(x, y)| (x - y).powi(2)).sum();
    assert!(d.sqrt() > 0.0);
}

#[test]
fn image_features_cover_the_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let image = random_patch(128, &mut rng);
    let feats = image_features(&image, &FeatureConfig::DESK).unwrap();
    assert_eq!(feats.len(), 64);
    let grid = extract_patches(&image).unwrap();
    for (i, f) in feats.iter().enumerate() {
        assert_eq!(f, &patch_features(grid.patch(i / 8, i % 8), &FeatureConfig::DESK).unwrap());
    }
    assert_eq!(grid.reassemble(), image);
    assert_eq!(FeatureConfig::FULL.dim(), 160);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn features_are_shift_invariant_and_fixed_length(seed in any::<u64>(), shift in -0.5f64..0.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let patch = random_patch(16, &mut rng);
        let shifted = patch.map(|v| v + shift);
        let cfg = FeatureConfig::DESK;
        let a = patch_features(&patch, &cfg).unwrap();
        let b = patch_features(&shifted, &cfg).unwrap();
        prop_assert_eq!(a.len(), cfg.dim());
        prop_assert!(a.values().iter().all(|v| *v >= 0.0));
        for (x, y) in a.values().iter().zip(b.values()) {
            prop_assert!((x - y).abs() < 1e-6 * (1.0 + x.abs()));
        }
        let again = patch_features(&patch, &cfg).unwrap();
        prop_assert!(a.values().iter().zip(again.values()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn radon_mass_is_conserved(seed in any::<u64>(), angles in 1usize..16, log_bins in 1u32..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bins = 1usize << log_bins;
        let map = Tensor::from_fn(&[10, 10], |_| rng.gen_range(0.0..1.0));
        let total = map.sum();
        let sino = radon(&map, angles, bins).unwrap();
        for row in sino.data().chunks_exact(bins) {
            prop_assert!(((row.iter().sum::<f64>() - total) / total).abs() < 1e-9);
        }
    }
}
