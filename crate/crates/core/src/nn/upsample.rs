use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Replicates every pixel into a `factor × factor` block.
pub fn upsample_nearest(input: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 0 {
        return Err(Error::arg("upsampling factor must be at least 1"));
    }
    let (h, w, c) = input.dims3()?;
    if factor == 1 {
        return Ok(input.clone());
    }
    let (oh, ow) = (h * factor, w * factor);
    let x = input.data();
    let mut out = Vec::with_capacity(oh * ow * c);
    for oy in 0..oh {
        let row = &x[(oy / factor) * w * c..][..w * c];
        for px in row.chunks_exact(c) {
            for _ in 0..factor {
                out.extend_from_slice(px);
            }
        }
    }
    Tensor::new(vec![oh, ow, c], out)
}

/// Sums upstream gradients over each replicated block.
pub fn upsample_nearest_backward(upstream: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 0 {
        return Err(Error::arg("upsampling factor must be at least 1"));
    }
    let (oh, ow, c) = upstream.dims3()?;
    if oh % factor != 0 || ow % factor != 0 {
        return Err(Error::shape(format!(
            "gradient {oh}x{ow} is not a multiple of factor {factor}"
        )));
    }
    let (h, w) = (oh / factor, ow / factor);
    let mut grad = Tensor::zeros(&[h, w, c]);
    let g = grad.data_mut();
    for (oy, row) in upstream.data().chunks_exact(ow * c).enumerate() {
        let dst = &mut g[(oy / factor) * w * c..][..w * c];
        for (ox, px) in row.chunks_exact(c).enumerate() {
            let cell = &mut dst[(ox / factor) * c..][..c];
            cell.iter_mut().zip(px).for_each(|(d, s)| *d += s);
        }
    }
    Ok(grad)
}
