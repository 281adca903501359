//! Standalone forms of the per-branch detector modules.

use super::BranchConfig;
use crate::error::{Error, Result};
use crate::fire::{block_forward, ConvParams, FireParams, WfmConfig};
use crate::nn::{batchnorm_forward, conv2d_slices, dropout, BatchStats, BnParams, ConvSpec, DropoutSpec, Mode};
use crate::tensor::Tensor;

pub const NDM_CHANNELS: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NdmConfig {
    pub dropout_ratio: f32,
    pub mode: Mode,
    pub seed: u64,
}

/// Batch normalization followed by dropout on a 512-channel tap.
/// In training mode the running statistics in `bn` are updated.
pub fn ndm_forward(x: &Tensor, cfg: &NdmConfig, bn: &mut BnParams) -> Result<(Tensor, Option<BatchStats>)> {
    if x.shape().c != NDM_CHANNELS {
        return Err(Error::Config(format!("NDM expects {NDM_CHANNELS} channels, got {}", x.shape())));
    }
    let (y, stats) = batchnorm_forward(x, bn, cfg.mode)?;
    let spec = DropoutSpec { ratio: cfg.dropout_ratio, mode: cfg.mode, seed: cfg.seed };
    Ok((dropout(&y, &spec)?, stats))
}

/// Weights of one detection branch. Each stem entry carries its block layout.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchParams {
    pub stem: Vec<(WfmConfig, FireParams)>,
    pub loc: ConvParams,
    pub conf: ConvParams,
}

impl BranchParams {
    /// Zero weights for `branch`, with every stem block shaped like `stem_block`.
    pub fn zeros(branch: &BranchConfig, stem_block: WfmConfig) -> Self {
        let stem = (0..branch.wfm_count)
            .map(|i| {
                let mut cfg = stem_block;
                cfg.fire.residual = branch.residual && i + 1 == branch.wfm_count;
                (cfg, FireParams::zeros(&cfg))
            })
            .collect();
        Self { stem, loc: ConvParams::zeros(&loc_spec(branch)), conf: ConvParams::zeros(&conf_spec(branch)) }
    }
}

pub fn loc_spec(branch: &BranchConfig) -> ConvSpec {
    ConvSpec::new(NDM_CHANNELS, branch.loc_channels(), 3).pad(1)
}

pub fn conf_spec(branch: &BranchConfig) -> ConvSpec {
    ConvSpec::new(NDM_CHANNELS, branch.conf_channels(), 3).pad(1)
}

/// Runs the WFM stem and the two head convolutions. On residual branches the
/// stem input is added to the last stem block's expand output.
pub fn drmd_branch_forward(x: &Tensor, branch: &BranchConfig, params: &BranchParams) -> Result<(Tensor, Tensor)> {
    branch.validate()?;
    if x.shape().c != NDM_CHANNELS {
        return Err(Error::Config(format!("branch expects {NDM_CHANNELS} channels, got {}", x.shape())));
    }
    if params.stem.len() != branch.wfm_count {
        return Err(Error::Config(format!("branch needs {} stem blocks, got {}", branch.wfm_count, params.stem.len())));
    }
    let mut h = x.clone();
    for (i, (cfg, p)) in params.stem.iter().enumerate() {
        let last = i + 1 == params.stem.len();
        if cfg.fire.residual != (branch.residual && last) {
            return Err(Error::Config(format!("stem block {} has the wrong residual setting", i + 1)));
        }
        let bypass = if cfg.fire.residual { Some(x) } else { None };
        h = block_forward(&h, bypass, cfg, p.views())?;
    }
    let loc = conv2d_slices(&h, &loc_spec(branch), params.loc.weight.data(), &params.loc.bias)?;
    let conf = conv2d_slices(&h, &conf_spec(branch), params.conf.weight.data(), &params.conf.bias)?;
    Ok((loc, conf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fire::FireConfig;
    use crate::nn::{batchnorm, relu};
    use crate::rng::random_tensor;
    use crate::tensor::Shape4;

    fn stem_block() -> WfmConfig {
        WfmConfig::new(FireConfig::new(512, 48, 256, 256))
    }

    fn randomize(p: &mut ConvParams, seed: u64) {
        p.weight = random_tensor(p.weight.shape(), seed).scale(0.05);
    }

    fn bn(seed: u64) -> BnParams {
        let mut p = BnParams::identity(512);
        p.running_mean = random_tensor(Shape4::new(1, 512, 1, 1), seed).into_data();
        p.gamma = random_tensor(Shape4::new(1, 512, 1, 1), seed + 1).into_data();
        p
    }

    #[test]
    fn ndm_inference_is_batchnorm() {
        let x = random_tensor(Shape4::new(1, 512, 3, 3), 1);
        let mut p = bn(2);
        let expect = batchnorm(&x, &p).unwrap();
        let cfg = NdmConfig { dropout_ratio: 0.3, mode: Mode::Infer, seed: 9 };
        let (y, stats) = ndm_forward(&x, &cfg, &mut p).unwrap();
        assert_eq!(y, expect);
        assert!(stats.is_none());
    }

    #[test]
    fn ndm_train_ratio_zero_is_batchnorm() {
        let x = random_tensor(Shape4::new(2, 512, 2, 2), 3);
        let mut a = bn(4);
        let mut b = a.clone();
        let (expect, _) = batchnorm_forward(&x, &mut a, Mode::Train).unwrap();
        let cfg = NdmConfig { dropout_ratio: 0.0, mode: Mode::Train, seed: 5 };
        let (y, stats) = ndm_forward(&x, &cfg, &mut b).unwrap();
        assert_eq!(y, expect);
        assert!(stats.is_some());
        assert_eq!(a, b);
    }

    #[test]
    fn ndm_rejects_other_widths() {
        let x = random_tensor(Shape4::new(1, 256, 2, 2), 1);
        let cfg = NdmConfig { dropout_ratio: 0.1, mode: Mode::Infer, seed: 0 };
        let err = ndm_forward(&x, &cfg, &mut BnParams::identity(256)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn large_branch_head_shapes() {
        let branch = BranchConfig::drmd(38, 4, 21, 0.3).unwrap();
        let params = BranchParams::zeros(&branch, stem_block());
        let x = random_tensor(Shape4::new(1, 512, 38, 38), 7);
        let (loc, conf) = drmd_branch_forward(&x, &branch, &params).unwrap();
        assert_eq!(loc.shape(), Shape4::new(1, 16, 38, 38));
        assert_eq!(conf.shape(), Shape4::new(1, 84, 38, 38));
    }

    #[test]
    fn small_branch_has_no_stem() {
        let branch = BranchConfig::drmd(3, 4, 21, 0.1).unwrap();
        let mut params = BranchParams::zeros(&branch, stem_block());
        assert!(params.stem.is_empty());
        randomize(&mut params.loc, 1);
        randomize(&mut params.conf, 2);
        let x = random_tensor(Shape4::new(1, 512, 3, 3), 3);
        let (loc, conf) = drmd_branch_forward(&x, &branch, &params).unwrap();
        let direct = conv2d_slices(&x, &loc_spec(&branch), params.loc.weight.data(), &params.loc.bias).unwrap();
        assert_eq!(loc, direct);
        assert_eq!(conf.shape(), Shape4::new(1, 84, 3, 3));
    }

    #[test]
    fn zero_expands_pass_bypass_through_relu() {
        let branch = BranchConfig::drmd(19, 6, 21, 0.25).unwrap();
        let mut params = BranchParams::zeros(&branch, stem_block());
        for (i, (_, p)) in params.stem.iter_mut().enumerate() {
            randomize(&mut p.squeeze, 10 + i as u64);
        }
        // identity-like heads: the loc conv reads channel 0 at the kernel centre
        let mut w = vec![0.0f32; params.loc.weight.len()];
        w[4] = 1.0;
        params.loc.weight = Tensor::from_vec(params.loc.weight.shape(), w).unwrap();
        let x = random_tensor(Shape4::new(1, 512, 19, 19), 11);
        let (loc, _) = drmd_branch_forward(&x, &branch, &params).unwrap();
        let expect = relu(&x.slice_channels(0, 1).unwrap());
        assert!(loc.slice_channels(0, 1).unwrap().max_abs_diff(&expect) < 1e-6);
    }

    #[test]
    fn invalid_branch_is_config_error() {
        let mut branch = BranchConfig::drmd(10, 6, 21, 0.2).unwrap();
        branch.residual = true;
        let params = BranchParams::zeros(&BranchConfig::drmd(10, 6, 21, 0.2).unwrap(), stem_block());
        let x = random_tensor(Shape4::new(1, 512, 10, 10), 1);
        assert!(matches!(drmd_branch_forward(&x, &branch, &params), Err(Error::Config(_))));
    }
}
