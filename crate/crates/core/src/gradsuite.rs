//! Finite-difference checks of every layer and of the assembled network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datasynth::desk_samples;
use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::network::{fuse, Model, NetworkConfig};
use crate::nn::gradcheck::{ConvRelu, Probe};
use crate::nn::{
    all_indices, batchnorm, batchnorm_backward, check_slots, grad_check, lstm_sequence,
    lstm_sequence_backward, maxpool2, maxpool2_backward, softmax2, softmax2_backward,
    upsample_nearest, upsample_nearest_backward, BatchNormParams, Conv2d, Dense, GradReport,
    LstmParams, Mode, RunningStats,
};
use crate::tensor::Tensor;
use crate::training::{
    batch_gradients, weighted_cross_entropy, weighted_cross_entropy_grad, LabeledSample,
    PreparedSample, Split,
};

pub const LAYER_TOLERANCE: f64 = 1e-4;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;
/// Settings of the desk-network check. A ±1e-5 nudge of an early
/// parameter moves every downstream activation, enough for some to cross a
/// ReLU or max-pool switch point, so the step is smaller. With compensated
/// loss and batch-norm sums the quotient carries ~3e-10 of rounding noise;
/// the floor keeps that from dominating components whose true gradient is
/// zero (conv biases feeding train-mode batch norm).
pub const END_TO_END_PROBE: Probe = Probe {
    step: 1e-7,
    floor: 1e-5,
    tolerance: END_TO_END_TOLERANCE,
};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn slot(name: &str, t: Tensor) -> (String, Tensor) {
    (name.to_string(), t)
}

/// `Σ r ⊙ out` for a fixed random `r`.
fn probe_for(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random(shape, &mut rng)
}

pub fn check_conv(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let layer = Conv2d {
        kernel: random(&[3, 3, 2, 3], rng),
        bias: random(&[3], rng),
    };
    grad_check(&layer, &random(&[5, 6, 2], rng), LAYER_TOLERANCE)
}

pub fn check_pointwise_conv(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let layer = Conv2d {
        kernel: random(&[1, 1, 3, 2], rng),
        bias: random(&[2], rng),
    };
    grad_check(&layer, &random(&[4, 4, 3], rng), LAYER_TOLERANCE)
}

pub fn check_dense(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let layer = Dense {
        weight: random(&[7, 4], rng),
        bias: random(&[4], rng),
    };
    grad_check(&layer, &random(&[7], rng), LAYER_TOLERANCE)
}

pub fn check_relu(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let layer = ConvRelu(Conv2d {
        kernel: random(&[3, 3, 2, 2], rng),
        bias: random(&[2], rng),
    });
    grad_check(&layer, &random(&[5, 5, 2], rng), LAYER_TOLERANCE)
}

pub fn check_maxpool(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let x = random(&[6, 4, 3], rng);
    let (out, idx) = maxpool2(&x)?;
    let probe = probe_for(out.shape(), 11);
    let analytic = maxpool2_backward(&idx, &probe)?;
    let mut slots = vec![slot("input", x)];
    let indices = all_indices(&slots);
    check_slots(
        &mut slots,
        &[analytic],
        &indices,
        |s| maxpool2(&s[0].1)?.0.dot(&probe),
        Probe::layer(LAYER_TOLERANCE),
    )
}

pub fn check_upsample(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let x = random(&[3, 2, 2], rng);
    let probe = probe_for(&[9, 6, 2], 12);
    let analytic = upsample_nearest_backward(&probe, 3)?;
    let mut slots = vec![slot("input", x)];
    let indices = all_indices(&slots);
    check_slots(
        &mut slots,
        &[analytic],
        &indices,
        |s| upsample_nearest(&s[0].1, 3)?.dot(&probe),
        Probe::layer(LAYER_TOLERANCE),
    )
}

pub fn check_softmax(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let x = random(&[3, 4, 2], rng);
    let probe = probe_for(x.shape(), 13);
    let analytic = softmax2_backward(&softmax2(&x)?, &probe)?;
    let mut slots = vec![slot("logits", x)];
    let indices = all_indices(&slots);
    check_slots(
        &mut slots,
        &[analytic],
        &indices,
        |s| softmax2(&s[0].1)?.dot(&probe),
        Probe::layer(LAYER_TOLERANCE),
    )
}

pub fn check_batchnorm_train(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let c = 3;
    let batch = vec![random(&[3, 3, c], rng), random(&[3, 3, c], rng)];
    let params = BatchNormParams {
        gamma: random(&[c], rng),
        beta: random(&[c], rng),
    };
    let probes = [probe_for(&[3, 3, c], 14), probe_for(&[3, 3, c], 15)];
    let stats = RunningStats::default();
    let (_, cache) = batchnorm(&batch, &params, Mode::Train, &stats)?;
    let (dx, dgamma, dbeta) = batchnorm_backward(&cache, &params, &probes)?;
    let mut slots = vec![
        slot("x0", batch[0].clone()),
        slot("x1", batch[1].clone()),
        slot("gamma", params.gamma.clone()),
        slot("beta", params.beta.clone()),
    ];
    let indices = all_indices(&slots);
    check_slots(
        &mut slots,
        &[dx[0].clone(), dx[1].clone(), dgamma, dbeta],
        &indices,
        |s| {
            let p = BatchNormParams {
                gamma: s[2].1.clone(),
                beta: s[3].1.clone(),
            };
            let (out, _) = batchnorm(&[s[0].1.clone(), s[1].1.clone()], &p, Mode::Train, &stats)?;
            Ok(out[0].dot(&probes[0])? + out[1].dot(&probes[1])?)
        },
        Probe::layer(LAYER_TOLERANCE),
    )
}

pub fn check_batchnorm_infer(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let c = 2;
    let x = random(&[4, 3, c], rng);
    let params = BatchNormParams {
        gamma: random(&[c], rng),
        beta: random(&[c], rng),
    };
    let stats = RunningStats {
        mean: Some(random(&[c], rng)),
        var: Some(Tensor::from_fn(&[c], |_| rng.gen_range(0.5..2.0))),
    };
    let probe = probe_for(x.shape(), 16);
    let (_, cache) = batchnorm(std::slice::from_ref(&x), &params, Mode::Infer, &stats)?;
    let (dx, dgamma, dbeta) = batchnorm_backward(&cache, &params, std::slice::from_ref(&probe))?;
    let mut slots = vec![slot("x", x), slot("gamma", params.gamma.clone()), slot("beta", params.beta.clone())];
    let indices = all_indices(&slots);
    check_slots(
        &mut slots,
        &[dx[0].clone(), dgamma, dbeta],
        &indices,
        |s| {
            let p = BatchNormParams {
                gamma: s[1].1.clone(),
                beta: s[2].1.clone(),
            };
            batchnorm(&[s[0].1.clone()], &p, Mode::Infer, &stats)?.0[0].dot(&probe)
        },
        Probe::layer(LAYER_TOLERANCE),
    )
}

pub fn check_lstm(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let (din, h, steps) = (3, 4, 5);
    let mut params = LstmParams::zeros(din, h);
    for (_, t) in params.named_mut() {
        *t = random(t.shape(), rng).map(|v| 0.6 * v);
    }
    let inputs: Vec<Tensor> = (0..steps).map(|_| random(&[din], rng)).collect();
    let probes: Vec<Tensor> = (0..steps).map(|i| probe_for(&[h], 20 + i as u64)).collect();
    let (_, cache) = lstm_sequence(&inputs, &params)?;
    let (grads, d_inputs) = lstm_sequence_backward(&cache, &params, &probes)?;

    let mut slots: Vec<(String, Tensor)> = params
        .named()
        .iter()
        .map(|(n, t)| slot(n, (*t).clone()))
        .collect();
    let mut analytic: Vec<Tensor> = grads.named().iter().map(|(_, t)| (*t).clone()).collect();
    for (i, (x, d)) in inputs.iter().zip(d_inputs).enumerate() {
        slots.push(slot(&format!("x{i}"), x.clone()));
        analytic.push(d);
    }
    let indices = all_indices(&slots);
    check_slots(
        &mut slots,
        &analytic,
        &indices,
        |s| {
            let mut p = LstmParams::zeros(din, h);
            for ((_, t), (_, src)) in p.named_mut().into_iter().zip(s) {
                *t = src.clone();
            }
            let xs: Vec<Tensor> = s[8..].iter().map(|(_, t)| t.clone()).collect();
            let (out, _) = lstm_sequence(&xs, &p)?;
            out.iter().zip(&probes).map(|(o, r)| o.dot(r)).sum()
        },
        Probe::layer(LAYER_TOLERANCE),
    )
}

pub fn check_fuse(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let enc = random(&[16, 16, 2], rng);
    let lstm = random(&[8, 8, 3], rng);
    let probe = probe_for(&[16, 16, 5], 30);
    let (d_enc, d_up) = probe.split_channels(2)?;
    let d_lstm = upsample_nearest_backward(&d_up, 2)?;
    let mut slots = vec![slot("encoder_map", enc), slot("lstm_map", lstm)];
    let indices = all_indices(&slots);
    check_slots(
        &mut slots,
        &[d_enc, d_lstm],
        &indices,
        |s| fuse(&s[0].1, &s[1].1)?.dot(&probe),
        Probe::layer(LAYER_TOLERANCE),
    )
}

pub fn check_cross_entropy(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let logits = random(&[4, 4, 2], rng).map(|v| 2.0 * v);
    let mask = Tensor::from_fn(&[4, 4], |_| rng.gen_bool(0.4) as u8 as f64);
    let weights = Tensor::vector(vec![0.35, 0.65]);
    let analytic = weighted_cross_entropy_grad(&softmax2(&logits)?, &mask, &weights)?;
    let mut slots = vec![slot("logits", logits)];
    let indices = all_indices(&slots);
    check_slots(
        &mut slots,
        &[analytic],
        &indices,
        |s| weighted_cross_entropy(&softmax2(&s[0].1)?, &mask, &weights),
        Probe::layer(LAYER_TOLERANCE),
    )
}

/// 16×16 inputs with one encoder stage: small enough to probe every
/// parameter.
pub fn toy_config() -> NetworkConfig {
    NetworkConfig {
        input_side: 16,
        patch_grid: 8,
        lstm_hidden: 3,
        lstm_layers: 2,
        timesteps: 64,
        projection_width: 2,
        encoder_channels: vec![3],
        decoder_channels: vec![3],
        decoder_upsample_factors: vec![2],
        features: FeatureConfig { angles: 2, bins: 2 },
    }
}

/// Samples whose masks hold both classes.
fn check_batch(model: &Model, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<PreparedSample>> {
    let side = model.config.input_side;
    let samples: Vec<LabeledSample> = if side >= 32 {
        desk_samples(count, side, rng.gen())?
    } else {
        (0..count)
            .map(|i| {
                let image = Tensor::from_fn(&[side, side, 3], |_| rng.gen_range(0.0..1.0));
                let mask = Tensor::from_fn(&[side, side], |j| {
                    let (y, x) = (j / side, j % side);
                    ((y + 2 * i) % side < side / 2 && x > side / 4) as u8 as f64
                });
                LabeledSample::new(image, mask, format!("toy{i}"), Split::Train)
            })
            .collect::<Result<_>>()?
    };
    PreparedSample::prepare_all(model, &samples)
}

/// Loss gradient of a whole model against central differences, probing
/// `picks` as `(parameter name, flat index)` pairs.
pub fn check_model(
    model: &Model,
    batch: &[PreparedSample],
    weights: &Tensor,
    picks: &[(String, usize)],
    probe: Probe,
) -> Result<GradReport> {
    let refs: Vec<&PreparedSample> = batch.iter().collect();
    let (_, grads, _) = batch_gradients(model, &refs, weights)?;
    let mut names: Vec<String> = Vec::new();
    for (n, _) in picks {
        if !names.contains(n) {
            names.push(n.clone());
        }
    }
    let lookup = |p: &crate::network::ModelParams, name: &str| -> Result<Tensor> {
        let mut found = None;
        p.for_each(|n, t| {
            if n == name {
                found = Some(t.clone());
            }
        });
        found.ok_or_else(|| Error::arg(format!("no parameter named {name}")))
    };
    let mut slots = Vec::new();
    let mut analytic = Vec::new();
    let mut indices = Vec::new();
    for n in &names {
        slots.push((n.clone(), lookup(&model.params, n)?));
        analytic.push(lookup(&grads, n)?);
        indices.push(picks.iter().filter(|(m, _)| m == n).map(|(_, i)| *i).collect());
    }
    check_slots(
        &mut slots,
        &analytic,
        &indices,
        |s| {
            let mut candidate = model.clone();
            for (name, t) in candidate.params.named_tensors_mut() {
                if let Some((_, src)) = s.iter().find(|(n, _)| *n == name) {
                    *t = src.clone();
                }
            }
            let refs: Vec<&PreparedSample> = batch.iter().collect();
            batch_loss(&candidate, &refs, weights)
        },
        probe,
    )
}

fn batch_loss(model: &Model, batch: &[&PreparedSample], weights: &Tensor) -> Result<f64> {
    let inputs: Vec<_> = batch.iter().map(|s| s.input.clone()).collect();
    let pass = model.forward(&inputs, Mode::Train)?;
    let mut loss = 0.0;
    for (p, s) in pass.probs.iter().zip(batch) {
        loss += weighted_cross_entropy(p, &s.mask, weights)?;
    }
    Ok(loss / batch.len() as f64)
}

/// Every component of every parameter of the 16×16 toy network.
pub fn check_toy_network(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::new(toy_config(), seed)?;
    let batch = check_batch(&model, 2, &mut rng)?;
    let mut picks = Vec::new();
    model.params.for_each(|n, t| picks.extend((0..t.len()).map(|i| (n.to_string(), i))));
    check_model(&model, &batch, &Tensor::vector(vec![0.4, 0.6]), &picks, Probe::layer(LAYER_TOLERANCE))
}

/// `count` random components of the desk network, drawn across all
/// parameter tensors.
pub fn check_desk_network(seed: u64, count: usize) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::new(NetworkConfig::desk(), seed)?;
    let batch = check_batch(&model, 2, &mut rng)?;
    let mut all = Vec::new();
    model.params.for_each(|n, t| all.push((n.to_string(), t.len())));
    let picks: Vec<(String, usize)> = (0..count)
        .map(|_| {
            let (n, len) = &all[rng.gen_range(0..all.len())];
            (n.clone(), rng.gen_range(0..*len))
        })
        .collect();
    check_model(
        &model,
        &batch,
        &Tensor::vector(vec![0.3, 0.7]),
        &picks,
        END_TO_END_PROBE,
    )
}

/// Components probed by the end-to-end desk check.
pub const DESK_PROBES: usize = 24;

/// Every layer check, the toy network and the desk network.
pub fn run_suite(seed: u64) -> Result<Vec<(&'static str, GradReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layer_checks: [(&'static str, fn(&mut ChaCha8Rng) -> Result<GradReport>); 12] = [
        ("conv2d 3x3", check_conv),
        ("conv2d 1x1", check_pointwise_conv),
        ("dense", check_dense),
        ("relu", check_relu),
        ("maxpool", check_maxpool),
        ("upsample", check_upsample),
        ("softmax", check_softmax),
        ("batchnorm train", check_batchnorm_train),
        ("batchnorm infer", check_batchnorm_infer),
        ("lstm sequence", check_lstm),
        ("fuse", check_fuse),
        ("weighted cross-entropy", check_cross_entropy),
    ];
    let mut out = Vec::new();
    for (name, f) in layer_checks {
        out.push((name, f(&mut rng)?));
    }
    out.push(("toy network", check_toy_network(seed)?));
    out.push(("desk network", check_desk_network(seed, DESK_PROBES)?));
    Ok(out)
}
