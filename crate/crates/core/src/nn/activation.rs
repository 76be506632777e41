use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Passes `upstream` where the forward input was strictly positive.
pub fn relu_backward(input: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    input.zip_map(upstream, |x, g| if x > 0.0 { g } else { 0.0 })
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Two-class softmax over the channel axis of an `[H, W, 2]` tensor.
pub fn softmax2(logits: &Tensor) -> Result<Tensor> {
    let (_, _, c) = logits.dims3()?;
    if c != 2 {
        return Err(Error::shape(format!("softmax2 needs 2 channels, got {c}")));
    }
    let mut out = logits.clone();
    for px in out.data_mut().chunks_exact_mut(2) {
        let m = px[0].max(px[1]);
        let e0 = (px[0] - m).exp();
        let e1 = (px[1] - m).exp();
        let s = e0 + e1;
        px[0] = e0 / s;
        px[1] = e1 / s;
    }
    Ok(out)
}

/// Gradient with respect to the logits given the softmax output and the
/// gradient with respect to the probabilities.
pub fn softmax2_backward(probs: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    probs.expect_same_shape(upstream)?;
    let mut out = upstream.clone();
    for (g, p) in out.data_mut().chunks_exact_mut(2).zip(probs.data().chunks_exact(2)) {
        let dot = g[0] * p[0] + g[1] * p[1];
        g[0] = p[0] * (g[0] - dot);
        g[1] = p[1] * (g[1] - dot);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn relu_values() {
        let x = Tensor::vector(vec![-1.0, 0.0, 2.0]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let g = relu_backward(&x, &Tensor::vector(vec![1.0, 1.0, 1.0])).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
        assert_eq!(relu(&Tensor::filled(&[4], -0.3)).max_abs(), 0.0);
    }

    #[test]
    fn softmax_cases() {
        let t = Tensor::new(vec![1, 2, 2], vec![0.0, 0.0, 1000.0, 0.0]).unwrap();
        let p = softmax2(&t).unwrap();
        assert_eq!(&p.data()[..2], &[0.5, 0.5]);
        assert!((p.data()[2] - 1.0).abs() < 1e-12 && p.data()[3] < 1e-300 + 1e-12);
        assert!(p.is_finite());
    }

    #[test]
    fn softmax_matches_naive_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = Tensor::from_fn(&[4, 4, 2], |_| rng.gen_range(-20.0..20.0));
        let p = softmax2(&t).unwrap();
        for (l, q) in t.data().chunks_exact(2).zip(p.data().chunks_exact(2)) {
            let s = l[0].exp() + l[1].exp();
            assert!((q[0] - l[0].exp() / s).abs() < 1e-12);
            assert!((q[1] - l[1].exp() / s).abs() < 1e-12);
            assert!((q[0] + q[1] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0).is_finite());
        assert!((sigmoid(800.0) - 1.0).abs() < 1e-15);
    }
}
