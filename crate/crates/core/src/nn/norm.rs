use crate::error::{Error, Result};
use crate::tensor::{Neumaier, Tensor};

pub const BN_EPSILON: f64 = 1e-5;
/// Weight of the old running statistic in each update.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl BatchNormParams {
    pub fn identity(channels: usize) -> Self {
        BatchNormParams {
            gamma: Tensor::filled(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Per-channel running mean and variance. Uninitialized until the first
/// training-mode batch has been absorbed.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunningStats {
    pub mean: Option<Tensor>,
    pub var: Option<Tensor>,
}

impl RunningStats {
    pub fn is_initialized(&self) -> bool {
        self.mean.is_some() && self.var.is_some()
    }

    /// Folds the batch statistics of a training-mode pass into the running
    /// estimate. The first batch initializes the estimate directly.
    pub fn absorb(&mut self, cache: &BatchNormCache) {
        if cache.mode != Mode::Train {
            return;
        }
        let batch_mean = Tensor::vector(cache.mean.clone());
        let batch_var = Tensor::vector(cache.var.clone());
        match (&mut self.mean, &mut self.var) {
            (Some(m), Some(v)) => {
                for (r, b) in m.data_mut().iter_mut().zip(batch_mean.data()) {
                    *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
                }
                for (r, b) in v.data_mut().iter_mut().zip(batch_var.data()) {
                    *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
                }
            }
            _ => {
                self.mean = Some(batch_mean);
                self.var = Some(batch_var);
            }
        }
    }
}

/// State saved by [`batchnorm`] for the backward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    pub mode: Mode,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    inv_std: Vec<f64>,
    normalized: Vec<Tensor>,
}

/// Per-channel batch normalization over a batch of tensors whose last
/// axis is the channel axis. Statistics pool the batch and every spatial
/// position.
pub fn batchnorm(
    batch: &[Tensor],
    params: &BatchNormParams,
    mode: Mode,
    running: &RunningStats,
) -> Result<(Vec<Tensor>, BatchNormCache)> {
    let c = params.channels();
    params.beta.expect_shape(&[c])?;
    let Some(first) = batch.first() else {
        return Err(Error::arg("batch normalization of an empty batch"));
    };
    for t in batch {
        if t.shape() != first.shape() || t.shape().last() != Some(&c) {
            return Err(Error::shape(format!(
                "batch-norm over {c} channels got input {:?}",
                t.shape()
            )));
        }
    }

    let (mean, var) = match mode {
        Mode::Train => {
            let count = (batch.len() * first.len() / c) as f64;
            let mut sums = vec![Neumaier::default(); c];
            for t in batch {
                for px in t.data().chunks_exact(c) {
                    sums.iter_mut().zip(px).for_each(|(s, &v)| s.add(v));
                }
            }
            let mean: Vec<f64> = sums.iter().map(|s| s.total() / count).collect();
            let mut sums = vec![Neumaier::default(); c];
            for t in batch {
                for px in t.data().chunks_exact(c) {
                    for ((s, v), m) in sums.iter_mut().zip(px).zip(&mean) {
                        s.add((v - m) * (v - m));
                    }
                }
            }
            let var = sums.iter().map(|s| s.total() / count).collect();
            (mean, var)
        }
        Mode::Infer => match (&running.mean, &running.var) {
            (Some(m), Some(v)) => {
                m.expect_shape(&[c])?;
                v.expect_shape(&[c])?;
                (m.data().to_vec(), v.data().to_vec())
            }
            _ => {
                return Err(Error::State(
                    "batch norm in infer mode before running statistics were initialized".into(),
                ))
            }
        },
    };

    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
    let gamma = params.gamma.data();
    let beta = params.beta.data();
    let mut normalized = Vec::with_capacity(batch.len());
    let mut outputs = Vec::with_capacity(batch.len());
    for t in batch {
        let mut xhat = t.clone();
        let mut out = t.clone();
        for (xh, o) in xhat
            .data_mut()
            .chunks_exact_mut(c)
            .zip(out.data_mut().chunks_exact_mut(c))
        {
            for ch in 0..c {
                let n = (xh[ch] - mean[ch]) * inv_std[ch];
                xh[ch] = n;
                o[ch] = gamma[ch] * n + beta[ch];
            }
        }
        normalized.push(xhat);
        outputs.push(out);
    }
    Ok((
        outputs,
        BatchNormCache {
            mode,
            mean,
            var,
            inv_std,
            normalized,
        },
    ))
}

/// Returns `(input gradients, d gamma, d beta)`.
pub fn batchnorm_backward(
    cache: &BatchNormCache,
    params: &BatchNormParams,
    upstream: &[Tensor],
) -> Result<(Vec<Tensor>, Tensor, Tensor)> {
    let c = params.channels();
    if upstream.len() != cache.normalized.len() {
        return Err(Error::shape(format!(
            "batch-norm backward got {} upstream tensors for a batch of {}",
            upstream.len(),
            cache.normalized.len()
        )));
    }
    let gamma = params.gamma.data();
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for (u, xhat) in upstream.iter().zip(&cache.normalized) {
        u.expect_same_shape(xhat)?;
        for (gp, xp) in u.data().chunks_exact(c).zip(xhat.data().chunks_exact(c)) {
            for ch in 0..c {
                dgamma[ch] += gp[ch] * xp[ch];
                dbeta[ch] += gp[ch];
            }
        }
    }

    let mut grads = Vec::with_capacity(upstream.len());
    match cache.mode {
        Mode::Infer => {
            for u in upstream {
                let mut g = u.clone();
                for gp in g.data_mut().chunks_exact_mut(c) {
                    for ch in 0..c {
                        gp[ch] *= gamma[ch] * cache.inv_std[ch];
                    }
                }
                grads.push(g);
            }
        }
        Mode::Train => {
            let count = (upstream.len() * upstream[0].len() / c) as f64;
            // With dxhat = g * gamma: sum(dxhat) = gamma * dbeta and
            // sum(dxhat * xhat) = gamma * dgamma.
            for (u, xhat) in upstream.iter().zip(&cache.normalized) {
                let mut g = u.clone();
                for (gp, xp) in g.data_mut().chunks_exact_mut(c).zip(xhat.data().chunks_exact(c)) {
                    for ch in 0..c {
                        let dxhat = gp[ch] * gamma[ch];
                        gp[ch] = cache.inv_std[ch] / count
                            * (count * dxhat - gamma[ch] * dbeta[ch] - xp[ch] * gamma[ch] * dgamma[ch]);
                    }
                }
                grads.push(g);
            }
        }
    }
    Ok((grads, Tensor::vector(dgamma), Tensor::vector(dbeta)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_batch(n: usize, shape: &[usize], seed: u64) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Tensor::from_fn(shape, |_| rng.gen_range(-3.0..5.0)))
            .collect()
    }

    #[test]
    fn train_mode_standardizes_each_channel() {
        let batch = random_batch(2, &[4, 5, 3], 1);
        let (out, _) = batchnorm(
            &batch,
            &BatchNormParams::identity(3),
            Mode::Train,
            &RunningStats::default(),
        )
        .unwrap();
        for ch in 0..3 {
            let vals: Vec<f64> = out
                .iter()
                .flat_map(|t| t.data().chunks_exact(3).map(move |p| p[ch]))
                .collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-9);
            // eps in the denominator shrinks variance slightly below one
            let batch_var = {
                let raw: Vec<f64> = batch
                    .iter()
                    .flat_map(|t| t.data().chunks_exact(3).map(move |p| p[ch]))
                    .collect();
                let m = raw.iter().sum::<f64>() / n;
                raw.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n
            };
            assert!((var - batch_var / (batch_var + BN_EPSILON)).abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn zero_gamma_outputs_beta() {
        let batch = random_batch(1, &[3, 3, 2], 2);
        let params = BatchNormParams {
            gamma: Tensor::zeros(&[2]),
            beta: Tensor::vector(vec![0.25, -1.0]),
        };
        let (out, _) = batchnorm(&batch, &params, Mode::Train, &RunningStats::default()).unwrap();
        for px in out[0].data().chunks_exact(2) {
            assert_eq!(px, &[0.25, -1.0]);
        }
    }

    #[test]
    fn infer_without_stats_is_state_error() {
        let batch = random_batch(1, &[2, 2, 1], 3);
        let r = batchnorm(
            &batch,
            &BatchNormParams::identity(1),
            Mode::Infer,
            &RunningStats::default(),
        );
        assert!(matches!(r, Err(Error::State(_))));
    }

    #[test]
    fn running_stats_use_momentum() {
        let params = BatchNormParams::identity(1);
        let mut running = RunningStats::default();
        let a = vec![Tensor::new(vec![2, 1], vec![0.0, 2.0]).unwrap()];
        let (_, ca) = batchnorm(&a, &params, Mode::Train, &running).unwrap();
        running.absorb(&ca);
        assert_eq!(running.mean.as_ref().unwrap().data(), &[1.0]);
        let b = vec![Tensor::new(vec![2, 1], vec![11.0, 11.0]).unwrap()];
        let (_, cb) = batchnorm(&b, &params, Mode::Train, &running).unwrap();
        running.absorb(&cb);
        assert!((running.mean.as_ref().unwrap().data()[0] - 2.0).abs() < 1e-12);
        assert!((running.var.as_ref().unwrap().data()[0] - 0.9).abs() < 1e-12);
    }
}
