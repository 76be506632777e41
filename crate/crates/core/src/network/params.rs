use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::NetworkConfig;
use crate::error::{Error, Result};
use crate::nn::{glorot_uniform, BatchNormParams, Conv2d, Dense, LstmParams};
use crate::tensor::Tensor;

/// conv-BN-ReLU → conv-BN, plus a shortcut (1×1 projection when the
/// channel count changes), then ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualUnit {
    pub conv1: Conv2d,
    pub bn1: BatchNormParams,
    pub conv2: Conv2d,
    pub bn2: BatchNormParams,
    pub shortcut: Option<Conv2d>,
}

/// upsample → 3×3 conv → BN → ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderStage {
    pub conv: Conv2d,
    pub bn: BatchNormParams,
}

/// Every learnable tensor of the network. The same type carries gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub lstm: Vec<LstmParams>,
    /// Shared per-timestep projection `W_l [N_h, N_f]`, `B_l [N_f]`.
    pub projection: Dense,
    pub encoder: Vec<ResidualUnit>,
    pub decoder: Vec<DecoderStage>,
    /// 1×1 convolution to the two class logits.
    pub head: Conv2d,
}

fn conv_init(k: usize, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Conv2d {
    Conv2d {
        kernel: glorot_uniform(&[k, k, cin, cout], k * k * cin, k * k * cout, rng),
        bias: Tensor::zeros(&[cout]),
    }
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases, unit BN scale and a forget-gate
    /// bias of one.
    pub fn init(config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.lstm_hidden;
        let lstm = (0..config.lstm_layers)
            .map(|layer| {
                let din = if layer == 0 { config.feature_dim() } else { h };
                let mut p = LstmParams::zeros(din, h);
                for (name, t) in p.named_mut() {
                    if name.starts_with('w') {
                        *t = glorot_uniform(&[din + h, h], din + h, h, &mut rng);
                    }
                }
                p.b_forget = Tensor::filled(&[h], 1.0);
                p
            })
            .collect();
        let projection = Dense {
            weight: glorot_uniform(
                &[h, config.projection_width],
                h,
                config.projection_width,
                &mut rng,
            ),
            bias: Tensor::zeros(&[config.projection_width]),
        };
        let mut cin = 3;
        let encoder = config
            .encoder_channels
            .iter()
            .map(|&c| {
                let unit = ResidualUnit {
                    conv1: conv_init(3, cin, c, &mut rng),
                    bn1: BatchNormParams::identity(c),
                    conv2: conv_init(3, c, c, &mut rng),
                    bn2: BatchNormParams::identity(c),
                    shortcut: (cin != c).then(|| conv_init(1, cin, c, &mut rng)),
                };
                cin = c;
                unit
            })
            .collect();
        let mut cin = config.fused_channels();
        let decoder = config
            .decoder_channels
            .iter()
            .map(|&c| {
                let stage = DecoderStage {
                    conv: conv_init(3, cin, c, &mut rng),
                    bn: BatchNormParams::identity(c),
                };
                cin = c;
                stage
            })
            .collect();
        let head = conv_init(1, cin, 2, &mut rng);
        Ok(ModelParams {
            lstm,
            projection,
            encoder,
            decoder,
            head,
        })
    }

    /// Same structure with every tensor zeroed.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_mut(|_, t| t.data_mut().fill(0.0));
        z
    }

    /// Visits every tensor with its slot name, in a fixed order.
    pub fn for_each(&self, mut f: impl FnMut(&str, &Tensor)) {
        for (i, l) in self.lstm.iter().enumerate() {
            for (n, t) in l.named() {
                f(&format!("lstm.{i}.{n}"), t);
            }
        }
        f("projection.weight", &self.projection.weight);
        f("projection.bias", &self.projection.bias);
        for (i, u) in self.encoder.iter().enumerate() {
            f(&format!("encoder.{i}.conv1.kernel"), &u.conv1.kernel);
            f(&format!("encoder.{i}.conv1.bias"), &u.conv1.bias);
            f(&format!("encoder.{i}.bn1.gamma"), &u.bn1.gamma);
            f(&format!("encoder.{i}.bn1.beta"), &u.bn1.beta);
            f(&format!("encoder.{i}.conv2.kernel"), &u.conv2.kernel);
            f(&format!("encoder.{i}.conv2.bias"), &u.conv2.bias);
            f(&format!("encoder.{i}.bn2.gamma"), &u.bn2.gamma);
            f(&format!("encoder.{i}.bn2.beta"), &u.bn2.beta);
            if let Some(s) = &u.shortcut {
                f(&format!("encoder.{i}.shortcut.kernel"), &s.kernel);
                f(&format!("encoder.{i}.shortcut.bias"), &s.bias);
            }
        }
        for (i, d) in self.decoder.iter().enumerate() {
            f(&format!("decoder.{i}.conv.kernel"), &d.conv.kernel);
            f(&format!("decoder.{i}.conv.bias"), &d.conv.bias);
            f(&format!("decoder.{i}.bn.gamma"), &d.bn.gamma);
            f(&format!("decoder.{i}.bn.beta"), &d.bn.beta);
        }
        f("head.kernel", &self.head.kernel);
        f("head.bias", &self.head.bias);
    }

    /// Mutable counterpart of [`ModelParams::for_each`], same order.
    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor)) {
        for (name, t) in self.named_tensors_mut() {
            f(&name, t);
        }
    }

    /// Every tensor with its slot name, in [`ModelParams::for_each`] order.
    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v: Vec<(String, &mut Tensor)> = Vec::new();
        for (i, l) in self.lstm.iter_mut().enumerate() {
            for (n, t) in l.named_mut() {
                v.push((format!("lstm.{i}.{n}"), t));
            }
        }
        v.push(("projection.weight".into(), &mut self.projection.weight));
        v.push(("projection.bias".into(), &mut self.projection.bias));
        for (i, u) in self.encoder.iter_mut().enumerate() {
            v.push((format!("encoder.{i}.conv1.kernel"), &mut u.conv1.kernel));
            v.push((format!("encoder.{i}.conv1.bias"), &mut u.conv1.bias));
            v.push((format!("encoder.{i}.bn1.gamma"), &mut u.bn1.gamma));
            v.push((format!("encoder.{i}.bn1.beta"), &mut u.bn1.beta));
            v.push((format!("encoder.{i}.conv2.kernel"), &mut u.conv2.kernel));
            v.push((format!("encoder.{i}.conv2.bias"), &mut u.conv2.bias));
            v.push((format!("encoder.{i}.bn2.gamma"), &mut u.bn2.gamma));
            v.push((format!("encoder.{i}.bn2.beta"), &mut u.bn2.beta));
            if let Some(s) = &mut u.shortcut {
                v.push((format!("encoder.{i}.shortcut.kernel"), &mut s.kernel));
                v.push((format!("encoder.{i}.shortcut.bias"), &mut s.bias));
            }
        }
        for (i, d) in self.decoder.iter_mut().enumerate() {
            v.push((format!("decoder.{i}.conv.kernel"), &mut d.conv.kernel));
            v.push((format!("decoder.{i}.conv.bias"), &mut d.conv.bias));
            v.push((format!("decoder.{i}.bn.gamma"), &mut d.bn.gamma));
            v.push((format!("decoder.{i}.bn.beta"), &mut d.bn.beta));
        }
        v.push(("head.kernel".into(), &mut self.head.kernel));
        v.push(("head.bias".into(), &mut self.head.bias));
        v
    }

    pub fn names(&self) -> Vec<String> {
        let mut v = Vec::new();
        self.for_each(|n, _| v.push(n.to_string()));
        v
    }

    pub fn count(&self) -> usize {
        let mut n = 0;
        self.for_each(|_, t| n += t.len());
        n
    }

    /// Elementwise `self += other`; both must share the same structure.
    pub fn accumulate(&mut self, other: &ModelParams) -> Result<()> {
        let mut others = Vec::new();
        other.for_each(|_, t| others.push(t.clone()));
        let mut it = others.into_iter();
        let mut result = Ok(());
        self.for_each_mut(|name, t| {
            if result.is_err() {
                return;
            }
            match it.next() {
                Some(o) => {
                    if let Err(e) = t.add_assign(&o) {
                        result = Err(Error::shape(format!("{name}: {e}")));
                    }
                }
                None => result = Err(Error::shape("parameter structures differ")),
            }
        });
        result
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.for_each(|_, t| ok &= t.is_finite());
        ok
    }

    /// Overwrites the tensors from `(name, tensor)` pairs; every slot must be
    /// present exactly once with a matching shape.
    pub fn assign_named(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        let mut result = Ok(());
        self.for_each_mut(|name, t| {
            if result.is_err() {
                return;
            }
            let matches: Vec<_> = tensors.iter().filter(|(n, _)| n == name).collect();
            match matches.as_slice() {
                [(_, src)] if src.shape() == t.shape() => {
                    *t = src.clone();
                }
                [(_, src)] => {
                    result = Err(Error::Format(format!(
                        "checkpoint tensor `{name}` has shape {:?}, model expects {:?}",
                        src.shape(),
                        t.shape()
                    )))
                }
                [] => result = Err(Error::Format(format!("checkpoint lacks `{name}`"))),
                _ => result = Err(Error::Format(format!("checkpoint repeats `{name}`"))),
            }
        });
        result
    }
}
