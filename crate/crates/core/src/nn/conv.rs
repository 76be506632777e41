use super::LayerGradients;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Kernel `[k, k, Cin, Cout]` and bias `[Cout]` of a same-padded, stride-1
/// convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub kernel: Tensor,
    pub bias: Tensor,
}

impl Conv2d {
    pub fn zeros(k: usize, cin: usize, cout: usize) -> Self {
        Conv2d {
            kernel: Tensor::zeros(&[k, k, cin, cout]),
            bias: Tensor::zeros(&[cout]),
        }
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        conv2d(input, &self.kernel, &self.bias)
    }

    pub fn backward(&self, input: &Tensor, upstream: &Tensor) -> Result<LayerGradients> {
        conv2d_backward(input, &self.kernel, upstream)
    }
}

struct Geometry {
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    k: usize,
}

fn geometry(input: &Tensor, kernel: &Tensor) -> Result<Geometry> {
    let (h, w, cin) = input.dims3()?;
    let (k, cin_k, cout) = match kernel.shape()[..] {
        [k1, k2, ci, co] if k1 == k2 => (k1, ci, co),
        _ => {
            return Err(Error::shape(format!(
                "kernel must be [k, k, Cin, Cout], got {:?}",
                kernel.shape()
            )))
        }
    };
    if k % 2 == 0 {
        return Err(Error::shape(format!("kernel side {k} must be odd")));
    }
    if cin != cin_k {
        return Err(Error::shape(format!(
            "input has {cin} channels but kernel expects {cin_k}"
        )));
    }
    Ok(Geometry { h, w, cin, cout, k })
}

/// Same-size 2-D convolution with zero padding `(k - 1) / 2` and stride 1.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let g = geometry(input, kernel)?;
    bias.expect_shape(&[g.cout])?;
    let pad = g.k / 2;
    let x = input.data();
    let kern = kernel.data();
    let mut out = vec![0.0; g.h * g.w * g.cout];

    for y in 0..g.h {
        for xo in 0..g.w {
            let o = &mut out[(y * g.w + xo) * g.cout..][..g.cout];
            o.copy_from_slice(bias.data());
            for dy in 0..g.k {
                let Some(iy) = (y + dy).checked_sub(pad).filter(|&v| v < g.h) else {
                    continue;
                };
                for dx in 0..g.k {
                    let Some(ix) = (xo + dx).checked_sub(pad).filter(|&v| v < g.w) else {
                        continue;
                    };
                    let px = &x[(iy * g.w + ix) * g.cin..][..g.cin];
                    let taps = &kern[(dy * g.k + dx) * g.cin * g.cout..][..g.cin * g.cout];
                    for (&v, row) in px.iter().zip(taps.chunks_exact(g.cout)) {
                        for (acc, &kv) in o.iter_mut().zip(row) {
                            *acc += v * kv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.h, g.w, g.cout], out)
}

/// Gradients of [`conv2d`] with respect to kernel, bias and input.
pub fn conv2d_backward(input: &Tensor, kernel: &Tensor, upstream: &Tensor) -> Result<LayerGradients> {
    let (gk, gb, gi) = conv2d_backward_parts(input, kernel, upstream, true)?;
    Ok(LayerGradients {
        params: vec![("kernel", gk), ("bias", gb)],
        input: gi.expect("input gradient requested"),
    })
}

/// Like [`conv2d_backward`], optionally skipping the input gradient
/// (first layer of a network).
pub(crate) fn conv2d_backward_parts(
    input: &Tensor,
    kernel: &Tensor,
    upstream: &Tensor,
    want_input: bool,
) -> Result<(Tensor, Tensor, Option<Tensor>)> {
    let g = geometry(input, kernel)?;
    upstream.expect_shape(&[g.h, g.w, g.cout])?;
    let pad = g.k / 2;
    let x = input.data();
    let kern = kernel.data();
    let up = upstream.data();
    let mut gk = vec![0.0; kern.len()];
    let mut gb = vec![0.0; g.cout];
    let mut gi = if want_input { vec![0.0; x.len()] } else { Vec::new() };

    for y in 0..g.h {
        for xo in 0..g.w {
            let u = &up[(y * g.w + xo) * g.cout..][..g.cout];
            for (b, &uv) in gb.iter_mut().zip(u) {
                *b += uv;
            }
            for dy in 0..g.k {
                let Some(iy) = (y + dy).checked_sub(pad).filter(|&v| v < g.h) else {
                    continue;
                };
                for dx in 0..g.k {
                    let Some(ix) = (xo + dx).checked_sub(pad).filter(|&v| v < g.w) else {
                        continue;
                    };
                    let base = (iy * g.w + ix) * g.cin;
                    let tap = (dy * g.k + dx) * g.cin * g.cout;
                    for ci in 0..g.cin {
                        let v = x[base + ci];
                        let krow = &kern[tap + ci * g.cout..][..g.cout];
                        let grow = &mut gk[tap + ci * g.cout..][..g.cout];
                        let mut acc = 0.0;
                        for ((gkv, &kv), &uv) in grow.iter_mut().zip(krow).zip(u) {
                            *gkv += v * uv;
                            acc += kv * uv;
                        }
                        if want_input {
                            gi[base + ci] += acc;
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(kernel.shape().to_vec(), gk)?,
        Tensor::new(vec![g.cout], gb)?,
        if want_input {
            Some(Tensor::new(input.shape().to_vec(), gi)?)
        } else {
            None
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Direct six-loop accumulation with explicit bounds checks.
    fn conv_oracle(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Tensor {
        let (h, w, cin) = input.dims3().unwrap();
        let k = kernel.shape()[0];
        let cout = kernel.shape()[3];
        let p = (k as isize - 1) / 2;
        let mut out = Tensor::zeros(&[h, w, cout]);
        for y in 0..h as isize {
            for x in 0..w as isize {
                for co in 0..cout {
                    let mut s = bias.data()[co];
                    for dy in 0..k as isize {
                        for dx in 0..k as isize {
                            for ci in 0..cin {
                                let (iy, ix) = (y + dy - p, x + dx - p);
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let kv = kernel.data()
                                    [((dy as usize * k + dx as usize) * cin + ci) * cout + co];
                                s += input.at3(iy as usize, ix as usize, ci) * kv;
                            }
                        }
                    }
                    out.set3(y as usize, x as usize, co, s);
                }
            }
        }
        out
    }

    #[test]
    fn scalar_multiply() {
        let x = Tensor::new(vec![1, 1, 1], vec![5.0]).unwrap();
        let k = Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap();
        let b = Tensor::zeros(&[1]);
        assert_eq!(conv2d(&x, &k, &b).unwrap().data(), &[10.0]);
    }

    #[test]
    fn zero_sum_kernel_annihilates_constant_interior() {
        let x = Tensor::filled(&[6, 6, 1], 3.5);
        let k = Tensor::new(
            vec![3, 3, 1, 1],
            vec![0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0],
        )
        .unwrap();
        let out = conv2d(&x, &k, &Tensor::zeros(&[1])).unwrap();
        for y in 1..5 {
            for xx in 1..5 {
                assert_eq!(out.at3(y, xx, 0), 0.0);
            }
        }
    }

    #[test]
    fn matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&[5, 5, 2], &mut rng);
        let k = random(&[3, 3, 2, 3], &mut rng);
        let b = random(&[3], &mut rng);
        let fast = conv2d(&x, &k, &b).unwrap();
        let slow = conv_oracle(&x, &k, &b);
        for (a, e) in fast.data().iter().zip(slow.data()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_kernel_maps_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[4, 3, 2], &mut rng);
        let out = Conv2d::zeros(3, 2, 5).forward(&x).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let x = Tensor::zeros(&[4, 4, 2]);
        let k = Tensor::zeros(&[3, 3, 3, 1]);
        assert!(matches!(
            conv2d(&x, &k, &Tensor::zeros(&[1])),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            conv2d_backward(&x, &k, &Tensor::zeros(&[4, 4, 1])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[4, 4, 2], &mut rng);
        let k = random(&[3, 3, 2, 2], &mut rng);
        let g = conv2d_backward(&x, &k, &Tensor::zeros(&[4, 4, 2])).unwrap();
        assert_eq!(g.input.max_abs(), 0.0);
        assert_eq!(g.param("kernel").unwrap().max_abs(), 0.0);
        assert_eq!(g.param("bias").unwrap().max_abs(), 0.0);
    }

    #[test]
    fn scalar_backward_is_product_rule() {
        let x = Tensor::new(vec![1, 1, 1], vec![3.0]).unwrap();
        let k = Tensor::new(vec![1, 1, 1, 1], vec![-2.0]).unwrap();
        let up = Tensor::new(vec![1, 1, 1], vec![0.5]).unwrap();
        let g = conv2d_backward(&x, &k, &up).unwrap();
        assert_eq!(g.param("kernel").unwrap().data(), &[1.5]);
        assert_eq!(g.param("bias").unwrap().data(), &[0.5]);
        assert_eq!(g.input.data(), &[-1.0]);
    }
}
