//! The two-branch localization network.
//!
//! ```text
//! image ─┬─ 64 patches → resampling features → Hilbert order → LSTM ×L → projection → 8×8×N_f ─┐
//!        └─ residual encoder (conv-BN-ReLU, conv-BN, shortcut, ReLU, max-pool) ×4 ──────────────┴─ concat
//!           → decoder (upsample, conv, BN, ReLU) ×2 → 1×1 conv → softmax
//! ```

mod config;
mod params;

use std::path::{Path, PathBuf};

pub use config::{NetworkConfig, Profile};
pub use params::{DecoderStage, ModelParams, ResidualUnit};

use crate::checkpoint;
use crate::error::{Error, Result, StageContext};
use crate::features::{image_features, PATCH_COUNT};
use crate::hilbert::{patch_ordering, reorder_features, HilbertOrdering};
use crate::nn::conv2d_backward_parts;
use crate::nn::{
    batchnorm, batchnorm_backward, dense, lstm_sequence, lstm_sequence_backward, maxpool2,
    maxpool2_backward, relu, relu_backward, softmax2, upsample_nearest, upsample_nearest_backward,
    BatchNormCache, LstmSequenceCache, Mode, PoolIndices, RunningStats,
};
use crate::tensor::Tensor;

/// An image together with its Hilbert-ordered patch descriptors.
#[derive(Debug, Clone)]
pub struct ModelInput {
    pub image: Tensor,
    pub sequence: Vec<Tensor>,
}

impl ModelInput {
    /// Computes the resampling-feature sequence of an `[S, S, 3]` image.
    pub fn new(image: Tensor, config: &NetworkConfig, ordering: &HilbertOrdering) -> Result<Self> {
        image
            .expect_shape(&[config.input_side, config.input_side, 3])
            .stage("input")?;
        let grid = image_features(&image, &config.features).stage("resampling features")?;
        let grid: Vec<Tensor> = grid.into_iter().map(|f| f.0).collect();
        let sequence = reorder_features(&grid, ordering).stage("hilbert ordering")?;
        Ok(ModelInput { image, sequence })
    }
}

/// Activations of the LSTM branch for one sample.
#[derive(Debug, Clone)]
pub struct LstmBranchCache {
    layers: Vec<LstmSequenceCache>,
    top_outputs: Vec<Tensor>,
}

/// Runs the stacked LSTM over a curve-ordered sequence and scatters the
/// projected step outputs onto the patch grid: step `l` lands on
/// `ordering.cell(l)`.
pub fn lstm_branch(
    sequence: &[Tensor],
    params: &ModelParams,
    config: &NetworkConfig,
    ordering: &HilbertOrdering,
) -> Result<(Tensor, LstmBranchCache)> {
    if sequence.len() != config.timesteps || ordering.len() != config.timesteps {
        return Err(Error::shape(format!(
            "LSTM branch needs {} timesteps, got {} features and a {}-cell ordering",
            config.timesteps,
            sequence.len(),
            ordering.len()
        )));
    }
    let mut layers = Vec::with_capacity(params.lstm.len());
    let mut current: Vec<Tensor> = sequence.to_vec();
    for layer in &params.lstm {
        let (outputs, cache) = lstm_sequence(&current, layer)?;
        layers.push(cache);
        current = outputs;
    }
    let g = config.patch_grid;
    let nf = config.projection_width;
    let mut map = Tensor::zeros(&[g, g, nf]);
    for (step, z) in current.iter().enumerate() {
        let projected = dense(z, &params.projection.weight, &params.projection.bias)?;
        let (r, c) = ordering.cell(step);
        map.data_mut()[(r * g + c) * nf..][..nf].copy_from_slice(projected.data());
    }
    Ok((
        map,
        LstmBranchCache {
            layers,
            top_outputs: current,
        },
    ))
}

fn lstm_branch_backward(
    cache: &LstmBranchCache,
    params: &ModelParams,
    config: &NetworkConfig,
    ordering: &HilbertOrdering,
    d_map: &Tensor,
    grads: &mut ModelParams,
) -> Result<()> {
    let g = config.patch_grid;
    let nf = config.projection_width;
    let h = config.lstm_hidden;
    let w = params.projection.weight.data();
    let mut d_top = Vec::with_capacity(cache.top_outputs.len());
    for (step, z) in cache.top_outputs.iter().enumerate() {
        let (r, c) = ordering.cell(step);
        let d_proj = &d_map.data()[(r * g + c) * nf..][..nf];
        grads
            .projection
            .bias
            .data_mut()
            .iter_mut()
            .zip(d_proj)
            .for_each(|(b, d)| *b += d);
        let gw = grads.projection.weight.data_mut();
        let mut dz = vec![0.0; h];
        for k in 0..h {
            let zk = z.data()[k];
            let row = &w[k * nf..][..nf];
            let grow = &mut gw[k * nf..][..nf];
            let mut acc = 0.0;
            for j in 0..nf {
                grow[j] += zk * d_proj[j];
                acc += row[j] * d_proj[j];
            }
            dz[k] = acc;
        }
        d_top.push(Tensor::vector(dz));
    }
    let mut d_outputs = d_top;
    for (layer_idx, layer_cache) in cache.layers.iter().enumerate().rev() {
        let (layer_grads, d_inputs) =
            lstm_sequence_backward(layer_cache, &params.lstm[layer_idx], &d_outputs)?;
        let dst = &mut grads.lstm[layer_idx];
        for ((_, acc), (_, g)) in dst.named_mut().into_iter().zip(layer_grads.named()) {
            acc.add_assign(g)?;
        }
        d_outputs = d_inputs;
    }
    Ok(())
}

#[derive(Debug, Clone)]
struct EncoderStageCache {
    input: Vec<Tensor>,
    bn1: BatchNormCache,
    normed1: Vec<Tensor>,
    act1: Vec<Tensor>,
    bn2: BatchNormCache,
    sum: Vec<Tensor>,
    pool: Vec<PoolIndices>,
}

#[derive(Debug, Clone)]
struct DecoderStageCache {
    upsampled: Vec<Tensor>,
    bn: BatchNormCache,
    normed: Vec<Tensor>,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub mode: Mode,
    pub probs: Vec<Tensor>,
    /// Actual `(stage, shape)` trace of the first sample.
    pub shapes: Vec<(String, Vec<usize>)>,
    lstm: Vec<LstmBranchCache>,
    encoder: Vec<EncoderStageCache>,
    decoder: Vec<DecoderStageCache>,
    head_input: Vec<Tensor>,
}

impl ForwardPass {
    /// Batch-norm caches in running-statistics slot order.
    fn bn_caches(&self) -> Vec<&BatchNormCache> {
        let mut v = Vec::new();
        for s in &self.encoder {
            v.push(&s.bn1);
            v.push(&s.bn2);
        }
        v.extend(self.decoder.iter().map(|s| &s.bn));
        v
    }
}

fn map_batch(batch: &[Tensor], f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<Vec<Tensor>> {
    batch.iter().map(f).collect()
}

fn add_batches(a: &mut [Tensor], b: &[Tensor]) -> Result<()> {
    for (x, y) in a.iter_mut().zip(b) {
        x.add_assign(y)?;
    }
    Ok(())
}

/// Parameters, running batch-norm statistics and the configuration they
/// were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: NetworkConfig,
    pub params: ModelParams,
    /// Running statistics in order: `encoder.i.bn1`, `encoder.i.bn2` for
    /// each stage, then `decoder.i.bn`.
    pub stats: Vec<RunningStats>,
    ordering: HilbertOrdering,
}

impl Model {
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, seed)?;
        let slots = 2 * config.encoder_channels.len() + config.decoder_channels.len();
        Ok(Model {
            config,
            params,
            stats: vec![RunningStats::default(); slots],
            ordering: patch_ordering(),
        })
    }

    pub fn ordering(&self) -> &HilbertOrdering {
        &self.ordering
    }

    pub fn stat_names(&self) -> Vec<String> {
        let mut v = Vec::new();
        for i in 0..self.config.encoder_channels.len() {
            v.push(format!("encoder.{i}.bn1"));
            v.push(format!("encoder.{i}.bn2"));
        }
        for i in 0..self.config.decoder_channels.len() {
            v.push(format!("decoder.{i}.bn"));
        }
        v
    }

    pub fn prepare(&self, image: Tensor) -> Result<ModelInput> {
        ModelInput::new(image, &self.config, &self.ordering)
    }

    /// Batch forward pass. In train mode batch norm uses the statistics of
    /// this batch; running statistics are left untouched (see
    /// [`Model::absorb_stats`]).
    pub fn forward(&self, batch: &[ModelInput], mode: Mode) -> Result<ForwardPass> {
        if batch.is_empty() {
            return Err(Error::arg("empty batch"));
        }
        let cfg = &self.config;
        let p = &self.params;
        let mut shapes = vec![("input".to_string(), batch[0].image.shape().to_vec())];

        let mut lstm_caches = Vec::with_capacity(batch.len());
        let mut lstm_maps = Vec::with_capacity(batch.len());
        for input in batch {
            let (map, cache) =
                lstm_branch(&input.sequence, p, cfg, &self.ordering).stage("lstm branch")?;
            lstm_maps.push(map);
            lstm_caches.push(cache);
        }

        let mut x: Vec<Tensor> = batch.iter().map(|b| b.image.clone()).collect();
        let mut encoder = Vec::with_capacity(p.encoder.len());
        for (i, unit) in p.encoder.iter().enumerate() {
            let (out, cache) = (|| -> Result<(Vec<Tensor>, EncoderStageCache)> {
                let c1 = map_batch(&x, |t| unit.conv1.forward(t))?;
                let (normed1, bn1) = batchnorm(&c1, &unit.bn1, mode, &self.stats[2 * i])?;
                let act1: Vec<Tensor> = normed1.iter().map(relu).collect();
                let c2 = map_batch(&act1, |t| unit.conv2.forward(t))?;
                let (mut sum, bn2) = batchnorm(&c2, &unit.bn2, mode, &self.stats[2 * i + 1])?;
                match &unit.shortcut {
                    Some(sc) => add_batches(&mut sum, &map_batch(&x, |t| sc.forward(t))?)?,
                    None => add_batches(&mut sum, &x)?,
                }
                let mut out = Vec::with_capacity(x.len());
                let mut pool = Vec::with_capacity(x.len());
                for s in &sum {
                    let (o, idx) = maxpool2(&relu(s))?;
                    out.push(o);
                    pool.push(idx);
                }
                Ok((
                    out,
                    EncoderStageCache {
                        input: std::mem::take(&mut x),
                        bn1,
                        normed1,
                        act1,
                        bn2,
                        sum,
                        pool,
                    },
                ))
            })()
            .stage("encoder")?;
            shapes.push((format!("encoder.{i}"), out[0].shape().to_vec()));
            encoder.push(cache);
            x = out;
        }

        shapes.push(("lstm_map".to_string(), lstm_maps[0].shape().to_vec()));
        let fused: Vec<Tensor> = x
            .iter()
            .zip(&lstm_maps)
            .map(|(e, l)| fuse(e, l))
            .collect::<Result<_>>()
            .stage("fusion")?;
        shapes.push(("fused".to_string(), fused[0].shape().to_vec()));

        let mut x = fused;
        let mut decoder = Vec::with_capacity(p.decoder.len());
        let stat_base = 2 * p.encoder.len();
        for (i, stage) in p.decoder.iter().enumerate() {
            let factor = cfg.decoder_upsample_factors[i];
            let (out, cache) = (|| -> Result<(Vec<Tensor>, DecoderStageCache)> {
                let upsampled = map_batch(&x, |t| upsample_nearest(t, factor))?;
                let conv = map_batch(&upsampled, |t| stage.conv.forward(t))?;
                let (normed, bn) = batchnorm(&conv, &stage.bn, mode, &self.stats[stat_base + i])?;
                let out = normed.iter().map(relu).collect();
                Ok((
                    out,
                    DecoderStageCache {
                        upsampled,
                        bn,
                        normed,
                    },
                ))
            })()
            .stage("decoder")?;
            shapes.push((format!("decoder.{i}"), out[0].shape().to_vec()));
            decoder.push(cache);
            x = out;
        }

        let logits = map_batch(&x, |t| p.head.forward(t)).stage("classifier head")?;
        shapes.push(("logits".to_string(), logits[0].shape().to_vec()));
        let probs = map_batch(&logits, softmax2).stage("softmax")?;
        Ok(ForwardPass {
            mode,
            probs,
            shapes,
            lstm: lstm_caches,
            encoder,
            decoder,
            head_input: x,
        })
    }

    /// Gradients of the loss with respect to every parameter, given the
    /// loss gradient with respect to each sample's logits.
    pub fn backward(&self, pass: &ForwardPass, d_logits: &[Tensor]) -> Result<ModelParams> {
        if d_logits.len() != pass.probs.len() {
            return Err(Error::shape(format!(
                "{} logit gradients for a batch of {}",
                d_logits.len(),
                pass.probs.len()
            )));
        }
        let cfg = &self.config;
        let p = &self.params;
        let mut grads = p.zeros_like();

        let mut d_x = Vec::with_capacity(d_logits.len());
        for (inp, dl) in pass.head_input.iter().zip(d_logits) {
            let (gk, gb, gi) = conv2d_backward_parts(inp, &p.head.kernel, dl, true)?;
            grads.head.kernel.add_assign(&gk)?;
            grads.head.bias.add_assign(&gb)?;
            d_x.push(gi.expect("requested"));
        }

        for (i, cache) in pass.decoder.iter().enumerate().rev() {
            let stage = &p.decoder[i];
            let d_normed: Vec<Tensor> = cache
                .normed
                .iter()
                .zip(&d_x)
                .map(|(n, d)| relu_backward(n, d))
                .collect::<Result<_>>()?;
            let (d_conv, dgamma, dbeta) = batchnorm_backward(&cache.bn, &stage.bn, &d_normed)?;
            grads.decoder[i].bn.gamma.add_assign(&dgamma)?;
            grads.decoder[i].bn.beta.add_assign(&dbeta)?;
            let factor = cfg.decoder_upsample_factors[i];
            let mut next = Vec::with_capacity(d_conv.len());
            for (up, dc) in cache.upsampled.iter().zip(&d_conv) {
                let (gk, gb, gi) = conv2d_backward_parts(up, &stage.conv.kernel, dc, true)?;
                grads.decoder[i].conv.kernel.add_assign(&gk)?;
                grads.decoder[i].conv.bias.add_assign(&gb)?;
                next.push(upsample_nearest_backward(&gi.expect("requested"), factor)?);
            }
            d_x = next;
        }

        let enc_channels = *cfg.encoder_channels.last().expect("validated");
        let mut d_enc = Vec::with_capacity(d_x.len());
        for (b, d_fused) in d_x.iter().enumerate() {
            let (de, dl_up) = d_fused.split_channels(enc_channels)?;
            let d_map = upsample_nearest_backward(&dl_up, cfg.lstm_upsample())?;
            lstm_branch_backward(&pass.lstm[b], p, cfg, &self.ordering, &d_map, &mut grads)?;
            d_enc.push(de);
        }

        let mut d_x = d_enc;
        for (i, cache) in pass.encoder.iter().enumerate().rev() {
            let unit = &p.encoder[i];
            let g = &mut grads.encoder[i];
            let want_input = i > 0;
            let d_sum: Vec<Tensor> = cache
                .pool
                .iter()
                .zip(&cache.sum)
                .zip(&d_x)
                .map(|((idx, s), d)| relu_backward(s, &maxpool2_backward(idx, d)?))
                .collect::<Result<_>>()?;

            let mut d_input: Vec<Tensor> = match &unit.shortcut {
                Some(sc) => {
                    let mut v = Vec::with_capacity(d_sum.len());
                    for (inp, ds) in cache.input.iter().zip(&d_sum) {
                        let (gk, gb, gi) = conv2d_backward_parts(inp, &sc.kernel, ds, want_input)?;
                        let gs = g.shortcut.as_mut().expect("same structure");
                        gs.kernel.add_assign(&gk)?;
                        gs.bias.add_assign(&gb)?;
                        v.push(gi.unwrap_or_else(|| Tensor::zeros(inp.shape())));
                    }
                    v
                }
                None => d_sum.clone(),
            };

            let (d_c2, dg2, db2) = batchnorm_backward(&cache.bn2, &unit.bn2, &d_sum)?;
            g.bn2.gamma.add_assign(&dg2)?;
            g.bn2.beta.add_assign(&db2)?;
            let mut d_act1 = Vec::with_capacity(d_c2.len());
            for (a, dc) in cache.act1.iter().zip(&d_c2) {
                let (gk, gb, gi) = conv2d_backward_parts(a, &unit.conv2.kernel, dc, true)?;
                g.conv2.kernel.add_assign(&gk)?;
                g.conv2.bias.add_assign(&gb)?;
                d_act1.push(gi.expect("requested"));
            }
            let d_normed1: Vec<Tensor> = cache
                .normed1
                .iter()
                .zip(&d_act1)
                .map(|(n, d)| relu_backward(n, d))
                .collect::<Result<_>>()?;
            let (d_c1, dg1, db1) = batchnorm_backward(&cache.bn1, &unit.bn1, &d_normed1)?;
            g.bn1.gamma.add_assign(&dg1)?;
            g.bn1.beta.add_assign(&db1)?;
            for (b, (inp, dc)) in cache.input.iter().zip(&d_c1).enumerate() {
                let (gk, gb, gi) = conv2d_backward_parts(inp, &unit.conv1.kernel, dc, want_input)?;
                g.conv1.kernel.add_assign(&gk)?;
                g.conv1.bias.add_assign(&gb)?;
                if let Some(gi) = gi {
                    d_input[b].add_assign(&gi)?;
                }
            }
            d_x = d_input;
        }
        Ok(grads)
    }

    /// Folds a training-mode pass's batch statistics into the running ones.
    pub fn absorb_stats(&mut self, pass: &ForwardPass) {
        if pass.mode != Mode::Train {
            return;
        }
        for (stats, cache) in self.stats.iter_mut().zip(pass.bn_caches()) {
            stats.absorb(cache);
        }
    }

    pub fn stats_initialized(&self) -> bool {
        self.stats.iter().all(|s| s.is_initialized())
    }

    /// Per-pixel `{non-manipulated, manipulated}` probabilities of one
    /// image.
    pub fn predict(&self, image: &Tensor, mode: Mode) -> Result<Tensor> {
        let input = self.prepare(image.clone())?;
        Ok(self.predict_prepared(&input, mode)?)
    }

    pub fn predict_prepared(&self, input: &ModelInput, mode: Mode) -> Result<Tensor> {
        let mut pass = self.forward(std::slice::from_ref(input), mode)?;
        Ok(pass.probs.remove(0))
    }

    /// Every stored tensor: parameters, then running statistics that have
    /// been initialized.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.params.for_each(|n, t| out.push((n.to_string(), t.clone())));
        for (name, s) in self.stat_names().into_iter().zip(&self.stats) {
            if let (Some(m), Some(v)) = (&s.mean, &s.var) {
                out.push((format!("{name}.running_mean"), m.clone()));
                out.push((format!("{name}.running_var"), v.clone()));
            }
        }
        out
    }

    /// Writes the tensors to `path` and the configuration to
    /// [`config_path`]`(path)`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tensors = self.named_tensors();
        checkpoint::save(path, tensors.iter().map(|(n, t)| (n.as_str(), t)))?;
        std::fs::write(config_path(path), serde_json::to_string_pretty(&self.config)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let config: NetworkConfig = serde_json::from_slice(&std::fs::read(config_path(path))?)?;
        let tensors = checkpoint::load(path)?;
        Self::from_tensors(config, &tensors)
    }

    pub fn from_tensors(config: NetworkConfig, tensors: &[(String, Tensor)]) -> Result<Self> {
        let mut model = Model::new(config, 0)?;
        let expected = model.params.names().len();
        model.params.assign_named(tensors)?;
        let names = model.stat_names();
        let mut known = expected;
        for (name, slot) in names.iter().zip(model.stats.iter_mut()) {
            let find = |suffix: &str| {
                tensors
                    .iter()
                    .find(|(n, _)| *n == format!("{name}.{suffix}"))
                    .map(|(_, t)| t.clone())
            };
            if let (Some(m), Some(v)) = (find("running_mean"), find("running_var")) {
                slot.mean = Some(m);
                slot.var = Some(v);
                known += 2;
            }
        }
        if known != tensors.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, {known} recognised",
                tensors.len()
            )));
        }
        Ok(model)
    }
}

/// JSON sidecar holding the network configuration of a checkpoint.
pub fn config_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Upsamples the 8×8 LSTM map to the encoder's side and concatenates it
/// after the encoder channels.
pub fn fuse(encoder_map: &Tensor, lstm_map: &Tensor) -> Result<Tensor> {
    let (f, fw, _) = encoder_map.dims3()?;
    let (g, gw, _) = lstm_map.dims3()?;
    if f != fw || g != gw || f % g != 0 {
        return Err(Error::shape(format!(
            "cannot fuse encoder map {:?} with LSTM map {:?}",
            encoder_map.shape(),
            lstm_map.shape()
        )));
    }
    Tensor::concat_channels(encoder_map, &upsample_nearest(lstm_map, f / g)?)
}

/// Number of patches the LSTM consumes.
pub const SEQUENCE_LEN: usize = PATCH_COUNT;
