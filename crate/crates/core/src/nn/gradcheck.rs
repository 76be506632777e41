//! Central finite-difference gradient checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{conv2d, conv2d_backward, dense, dense_backward, relu, relu_backward, LayerGradients};
use super::{Conv2d, Dense};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Below this magnitude the relative error is measured against the floor
/// instead of the gradient itself.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// A differentiable single-input layer.
pub trait Layer {
    fn forward(&self, input: &Tensor) -> Result<Tensor>;
    fn backward(&self, input: &Tensor, upstream: &Tensor) -> Result<LayerGradients>;
    fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)>;
}

impl Layer for Conv2d {
    fn forward(&self, input: &Tensor) -> Result<Tensor> {
        conv2d(input, &self.kernel, &self.bias)
    }
    fn backward(&self, input: &Tensor, upstream: &Tensor) -> Result<LayerGradients> {
        conv2d_backward(input, &self.kernel, upstream)
    }
    fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![("kernel", &mut self.kernel), ("bias", &mut self.bias)]
    }
}

impl Layer for Dense {
    fn forward(&self, input: &Tensor) -> Result<Tensor> {
        dense(input, &self.weight, &self.bias)
    }
    fn backward(&self, input: &Tensor, upstream: &Tensor) -> Result<LayerGradients> {
        dense_backward(input, &self.weight, upstream)
    }
    fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![("weight", &mut self.weight), ("bias", &mut self.bias)]
    }
}

/// Convolution followed by ReLU.
#[derive(Debug, Clone)]
pub struct ConvRelu(pub Conv2d);

impl Layer for ConvRelu {
    fn forward(&self, input: &Tensor) -> Result<Tensor> {
        Ok(relu(&self.0.forward(input)?))
    }
    fn backward(&self, input: &Tensor, upstream: &Tensor) -> Result<LayerGradients> {
        let pre = self.0.forward(input)?;
        let g = relu_backward(&pre, upstream)?;
        self.0.backward(input, &g)
    }
    fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        self.0.params_mut()
    }
}

/// Outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_relative_error: f64,
    /// Slot name and flat index of the worst component.
    pub worst: String,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

impl std::fmt::Display for GradReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} components, max relative error {:.3e} at {} (tolerance {:.0e}): {}",
            self.checked,
            self.max_relative_error,
            self.worst,
            self.tolerance,
            if self.passed { "pass" } else { "FAIL" }
        )
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_with_floor(analytic, numeric, RELATIVE_FLOOR)
}

pub fn relative_error_with_floor(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Accumulates comparisons into a [`GradReport`].
#[derive(Debug, Clone)]
pub struct GradAccumulator {
    max: f64,
    worst: String,
    checked: usize,
    floor: f64,
}

impl Default for GradAccumulator {
    fn default() -> Self {
        Self::with_floor(RELATIVE_FLOOR)
    }
}

impl GradAccumulator {
    pub fn with_floor(floor: f64) -> Self {
        GradAccumulator {
            max: 0.0,
            worst: "-".into(),
            checked: 0,
            floor,
        }
    }

    pub fn record(&mut self, slot: &str, index: usize, analytic: f64, numeric: f64) -> Result<()> {
        if !analytic.is_finite() {
            return Err(Error::NonFinite(format!("analytic gradient {slot}[{index}]")));
        }
        let e = relative_error_with_floor(analytic, numeric, self.floor);
        if e > self.max || !e.is_finite() {
            self.max = if e.is_finite() { e } else { f64::INFINITY };
            self.worst = format!("{slot}[{index}]");
        }
        self.checked += 1;
        Ok(())
    }

    pub fn finish(self, tolerance: f64) -> GradReport {
        GradReport {
            passed: self.max < tolerance,
            max_relative_error: self.max,
            worst: self.worst,
            checked: self.checked,
            tolerance,
        }
    }
}

/// Checks `layer`'s backward pass against central differences of the
/// scalar loss `Σ r ⊙ layer(input)` with a fixed random `r`, over every
/// input and parameter component.
pub fn grad_check<L: Layer + Clone>(layer: &L, input: &Tensor, tolerance: f64) -> Result<GradReport> {
    if !(tolerance > 0.0) {
        return Err(Error::arg("gradient-check tolerance must be positive"));
    }
    let out = layer.forward(input)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let probe = Tensor::from_fn(out.shape(), |_| rng.gen_range(-1.0..1.0));
    let grads = layer.backward(input, &probe)?;
    let loss = |l: &L, x: &Tensor| -> Result<f64> { l.forward(x)?.dot(&probe) };

    let mut acc = GradAccumulator::default();
    let mut x = input.clone();
    for i in 0..x.len() {
        let analytic = grads.input.data()[i];
        let orig = x.data()[i];
        let mut eval = |v: f64| {
            x.data_mut()[i] = v;
            loss(layer, &x)
        };
        let numeric = (eval(orig + FD_STEP)? - eval(orig - FD_STEP)?) / (2.0 * FD_STEP);
        x.data_mut()[i] = orig;
        acc.record("input", i, analytic, numeric)?;
    }

    let mut probe_layer = layer.clone();
    let slot_count = probe_layer.params_mut().len();
    for s in 0..slot_count {
        let name = probe_layer.params_mut()[s].0;
        let analytic_slot = grads
            .param(name)
            .ok_or_else(|| Error::State(format!("backward produced no gradient for {name}")))?
            .clone();
        for i in 0..analytic_slot.len() {
            let orig = probe_layer.params_mut()[s].1.data()[i];
            let mut eval = |v: f64| -> Result<f64> {
                probe_layer.params_mut()[s].1.data_mut()[i] = v;
                loss(&probe_layer, input)
            };
            let numeric = (eval(orig + FD_STEP)? - eval(orig - FD_STEP)?) / (2.0 * FD_STEP);
            probe_layer.params_mut()[s].1.data_mut()[i] = orig;
            acc.record(name, i, analytic_slot.data()[i], numeric)?;
        }
    }
    Ok(acc.finish(tolerance))
}

/// Finite-difference settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probe {
    pub step: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub tolerance: f64,
}

impl Probe {
    /// Step [`FD_STEP`], floor [`RELATIVE_FLOOR`].
    pub fn layer(tolerance: f64) -> Self {
        Probe {
            step: FD_STEP,
            floor: RELATIVE_FLOOR,
            tolerance,
        }
    }
}

/// Central-difference check of an arbitrary scalar function of several
/// named tensors. `indices[s]` lists the components of slot `s` to probe;
/// `analytic[s]` holds the claimed gradient of slot `s`.
pub fn check_slots(
    slots: &mut [(String, Tensor)],
    analytic: &[Tensor],
    indices: &[Vec<usize>],
    loss: impl Fn(&[(String, Tensor)]) -> Result<f64>,
    probe: Probe,
) -> Result<GradReport> {
    let Probe {
        step,
        floor,
        tolerance,
    } = probe;
    if !(tolerance > 0.0 && step > 0.0 && floor > 0.0) {
        return Err(Error::arg("gradient-check step, floor and tolerance must be positive"));
    }
    if analytic.len() != slots.len() || indices.len() != slots.len() {
        return Err(Error::shape("one analytic gradient and index list per slot"));
    }
    let mut acc = GradAccumulator::with_floor(floor);
    for s in 0..slots.len() {
        slots[s].1.expect_same_shape(&analytic[s])?;
        for &i in &indices[s] {
            let orig = slots[s].1.data()[i];
            slots[s].1.data_mut()[i] = orig + step;
            let plus = loss(slots);
            slots[s].1.data_mut()[i] = orig - step;
            let minus = loss(slots);
            slots[s].1.data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * step);
            acc.record(&slots[s].0, i, analytic[s].data()[i], numeric)?;
        }
    }
    Ok(acc.finish(tolerance))
}

/// Every component of every slot.
pub fn all_indices(slots: &[(String, Tensor)]) -> Vec<Vec<usize>> {
    slots.iter().map(|(_, t)| (0..t.len()).collect()).collect()
}
