use super::LayerGradients;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Affine map `input · weight + bias` with weight `[Din, Dout]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        dense(input, &self.weight, &self.bias)
    }

    pub fn backward(&self, input: &Tensor, upstream: &Tensor) -> Result<LayerGradients> {
        dense_backward(input, &self.weight, upstream)
    }
}

fn dims(input: &Tensor, weight: &Tensor) -> Result<(usize, usize)> {
    let (din, dout) = weight.dims2()?;
    if input.shape() != [din] {
        return Err(Error::shape(format!(
            "dense layer expects input [{din}], got {:?}",
            input.shape()
        )));
    }
    Ok((din, dout))
}

pub fn dense(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (_, dout) = dims(input, weight)?;
    bias.expect_shape(&[dout])?;
    let mut out = bias.data().to_vec();
    for (&x, row) in input.data().iter().zip(weight.data().chunks_exact(dout)) {
        out.iter_mut().zip(row).for_each(|(o, w)| *o += x * w);
    }
    Tensor::new(vec![dout], out)
}

pub fn dense_backward(input: &Tensor, weight: &Tensor, upstream: &Tensor) -> Result<LayerGradients> {
    let (din, dout) = dims(input, weight)?;
    upstream.expect_shape(&[dout])?;
    let u = upstream.data();
    let mut gw = Vec::with_capacity(din * dout);
    let mut gi = Vec::with_capacity(din);
    for (&x, row) in input.data().iter().zip(weight.data().chunks_exact(dout)) {
        gw.extend(u.iter().map(|g| x * g));
        gi.push(row.iter().zip(u).map(|(w, g)| w * g).sum());
    }
    Ok(LayerGradients {
        params: vec![
            ("weight", Tensor::new(vec![din, dout], gw)?),
            ("bias", upstream.clone()),
        ],
        input: Tensor::new(vec![din], gi)?,
    })
}
