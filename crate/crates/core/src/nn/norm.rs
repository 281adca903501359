use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::tensor::Tensor;

pub const BN_EPSILON: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;
pub const L2NORM_EPSILON: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub epsilon: f32,
    pub momentum: f32,
}

impl BnParams {
    /// γ = 1, β = 0, running mean 0, running variance 1.
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            epsilon: BN_EPSILON,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        let c = self.channels();
        if self.beta.len() != c || self.running_mean.len() != c || self.running_var.len() != c {
            return Err(Error::Config("batchnorm parameter vectors differ in length".into()));
        }
        if x.shape().c != c {
            return Err(Error::ShapeMismatch(format!("batchnorm over {c} channels given {}", x.shape())));
        }
        Ok(())
    }
}

/// Per-channel statistics of one training batch (biased variance).
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

fn channel_values(x: &Tensor, c: usize) -> impl Iterator<Item = f64> + '_ {
    (0..x.shape().n).flat_map(move |n| x.plane(n, c).iter().map(|&v| v as f64))
}

fn batch_stats(x: &Tensor) -> BatchStats {
    let s = x.shape();
    let count = (s.n * s.plane()) as f64;
    let mut mean = Vec::with_capacity(s.c);
    let mut var = Vec::with_capacity(s.c);
    for c in 0..s.c {
        let m = channel_values(x, c).sum::<f64>() / count;
        let v = channel_values(x, c).map(|v| (v - m) * (v - m)).sum::<f64>() / count;
        mean.push(m);
        var.push(v);
    }
    BatchStats { mean, var }
}

fn normalize_f64(x: &Tensor, params: &BnParams, mean: &[f64], var: &[f64]) -> Vec<f64> {
    let s = x.shape();
    let mut out = Vec::with_capacity(x.len());
    for n in 0..s.n {
        for c in 0..s.c {
            let inv = 1.0 / (var[c] + params.epsilon as f64).sqrt();
            let (g, b) = (params.gamma[c] as f64, params.beta[c] as f64);
            out.extend(x.plane(n, c).iter().map(|&v| g * (v as f64 - mean[c]) * inv + b));
        }
    }
    out
}

fn normalize(x: &Tensor, params: &BnParams, mean: &[f64], var: &[f64]) -> Tensor {
    let out = normalize_f64(x, params, mean, var).into_iter().map(|v| v as f32).collect();
    Tensor::from_parts(x.shape(), out)
}

/// Training-mode output before the final rounding to `f32`. Running statistics are not touched.
pub(crate) fn batchnorm_train_f64(x: &Tensor, params: &BnParams) -> Result<Vec<f64>> {
    params.check(x)?;
    let stats = batch_stats(x);
    Ok(normalize_f64(x, params, &stats.mean, &stats.var))
}

/// Inference-mode batch normalization with the running statistics.
pub fn batchnorm(x: &Tensor, params: &BnParams) -> Result<Tensor> {
    params.check(x)?;
    let mean: Vec<f64> = params.running_mean.iter().map(|&v| v as f64).collect();
    let var: Vec<f64> = params.running_var.iter().map(|&v| v as f64).collect();
    Ok(normalize(x, params, &mean, &var))
}

/// Training-mode batch normalization. Normalizes with the batch statistics,
/// folds them into the running statistics, and returns them for the backward pass.
pub fn batchnorm_train(x: &Tensor, params: &mut BnParams) -> Result<(Tensor, BatchStats)> {
    params.check(x)?;
    let stats = batch_stats(x);
    let y = normalize(x, params, &stats.mean, &stats.var);
    let m = params.momentum as f64;
    for c in 0..params.channels() {
        params.running_mean[c] = ((1.0 - m) * params.running_mean[c] as f64 + m * stats.mean[c]) as f32;
        params.running_var[c] = ((1.0 - m) * params.running_var[c] as f64 + m * stats.var[c]) as f32;
    }
    Ok((y, stats))
}

pub fn batchnorm_forward(x: &Tensor, params: &mut BnParams, mode: Mode) -> Result<(Tensor, Option<BatchStats>)> {
    match mode {
        Mode::Infer => Ok((batchnorm(x, params)?, None)),
        Mode::Train => batchnorm_train(x, params).map(|(y, s)| (y, Some(s))),
    }
}

pub struct BnGrads {
    pub grad_x: Tensor,
    pub grad_gamma: Vec<f32>,
    pub grad_beta: Vec<f32>,
}

/// Backward pass. With `batch_stats` the statistics are treated as functions of
/// `x` (training mode); without them the running statistics are constants.
pub fn batchnorm_backward(
    grad_out: &Tensor,
    x: &Tensor,
    params: &BnParams,
    batch_stats: Option<&BatchStats>,
) -> Result<BnGrads> {
    params.check(x)?;
    if grad_out.shape() != x.shape() {
        return Err(Error::ShapeMismatch(format!("batchnorm grad {} vs input {}", grad_out.shape(), x.shape())));
    }
    let s = x.shape();
    let count = (s.n * s.plane()) as f64;
    let mut gx = vec![0.0f32; x.len()];
    let mut grad_gamma = Vec::with_capacity(s.c);
    let mut grad_beta = Vec::with_capacity(s.c);

    for c in 0..s.c {
        let (mean, var) = match batch_stats {
            Some(b) => (b.mean[c], b.var[c]),
            None => (params.running_mean[c] as f64, params.running_var[c] as f64),
        };
        let inv = 1.0 / (var + params.epsilon as f64).sqrt();
        let gamma = params.gamma[c] as f64;
        let (mut sum_g, mut sum_gx) = (0.0f64, 0.0f64);
        for n in 0..s.n {
            for (&g, &v) in grad_out.plane(n, c).iter().zip(x.plane(n, c)) {
                let xhat = (v as f64 - mean) * inv;
                sum_g += g as f64;
                sum_gx += g as f64 * xhat;
            }
        }
        grad_beta.push(sum_g as f32);
        grad_gamma.push(sum_gx as f32);
        for n in 0..s.n {
            let base = (n * s.c + c) * s.plane();
            for (i, (&g, &v)) in grad_out.plane(n, c).iter().zip(x.plane(n, c)).enumerate() {
                let d = match batch_stats {
                    Some(_) => {
                        let xhat = (v as f64 - mean) * inv;
                        gamma * inv / count * (count * g as f64 - sum_g - xhat * sum_gx)
                    }
                    None => gamma * inv * g as f64,
                };
                gx[base + i] = d as f32;
            }
        }
    }
    Ok(BnGrads { grad_x: Tensor::from_parts(s, gx), grad_gamma, grad_beta })
}

/// Normalizes each position's channel vector to unit L2 norm, then scales per channel.
pub fn l2norm(x: &Tensor, scale: &[f32]) -> Result<Tensor> {
    let s = x.shape();
    if scale.len() != s.c {
        return Err(Error::ShapeMismatch(format!("l2norm scale has {} values for {}", scale.len(), s)));
    }
    let plane = s.plane();
    let mut out = vec![0.0f32; x.len()];
    for n in 0..s.n {
        let base = n * s.c * plane;
        for p in 0..plane {
            let norm = (0..s.c)
                .map(|c| {
                    let v = x.data()[base + c * plane + p] as f64;
                    v * v
                })
                .sum::<f64>()
                .sqrt()
                + L2NORM_EPSILON;
            for c in 0..s.c {
                let i = base + c * plane + p;
                out[i] = (x.data()[i] as f64 / norm * scale[c] as f64) as f32;
            }
        }
    }
    Ok(Tensor::from_parts(s, out))
}
