use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Infer,
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn relu_backward(grad_out: &Tensor, x: &Tensor) -> Result<Tensor> {
    if grad_out.shape() != x.shape() {
        return Err(Error::ShapeMismatch(format!("relu grad {} vs input {}", grad_out.shape(), x.shape())));
    }
    let data = grad_out.data().iter().zip(x.data()).map(|(&g, &v)| if v > 0.0 { g } else { 0.0 }).collect();
    Tensor::from_vec(x.shape(), data)
}

/// Softmax over the channel axis at every `(n, h, w)` position.
pub fn softmax_channels(x: &Tensor) -> Tensor {
    let s = x.shape();
    let plane = s.plane();
    let mut out = vec![0.0f32; x.len()];
    let mut buf = vec![0.0f64; s.c];
    for n in 0..s.n {
        let base = n * s.c * plane;
        for p in 0..plane {
            let at = |c: usize| base + c * plane + p;
            let max = (0..s.c).map(|c| x.data()[at(c)]).fold(f32::NEG_INFINITY, f32::max) as f64;
            let mut sum = 0.0f64;
            for (c, e) in buf.iter_mut().enumerate() {
                *e = (x.data()[at(c)] as f64 - max).exp();
                sum += *e;
            }
            for (c, e) in buf.iter().enumerate() {
                out[at(c)] = (e / sum) as f32;
            }
        }
    }
    Tensor::from_parts(s, out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropoutSpec {
    pub ratio: f32,
    pub mode: Mode,
    pub seed: u64,
}

impl DropoutSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.ratio) {
            return Err(Error::Config(format!("dropout ratio {} not in [0, 1)", self.ratio)));
        }
        Ok(())
    }
}

/// Inverted dropout: survivors are scaled by `1 / (1 - ratio)` at train time,
/// so inference is the identity.
pub fn dropout(x: &Tensor, spec: &DropoutSpec) -> Result<Tensor> {
    spec.validate()?;
    if spec.mode == Mode::Infer || spec.ratio == 0.0 {
        return Ok(x.clone());
    }
    let keep_scale = 1.0 / (1.0 - spec.ratio);
    let mut rng = seeded(spec.seed);
    let data = x.data().iter().map(|&v| if rng.gen::<f32>() < spec.ratio { 0.0 } else { v * keep_scale }).collect();
    Tensor::from_vec(x.shape(), data)
}
