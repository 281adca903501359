//! Fire modules and Wide Fire Modules.
//!
//! A fire block squeezes its input with a 1×1 convolution, runs a 1×1 and a
//! 3×3 expand convolution in parallel and concatenates them along channels.
//! The wide variant groups both expand convolutions. With a residual bypass the
//! bypass tensor is added to the concatenated expand output before the final
//! ReLU.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{conv2d_slices, relu, ConvSpec};
use crate::tensor::Tensor;

pub const DEFAULT_GROUPS_1X1: usize = 2;
pub const DEFAULT_GROUPS_3X3: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FireConfig {
    pub in_channels: usize,
    pub squeeze: usize,
    pub expand1x1: usize,
    pub expand3x3: usize,
    pub stride: usize,
    pub residual: bool,
}

impl FireConfig {
    pub const fn new(in_channels: usize, squeeze: usize, expand1x1: usize, expand3x3: usize) -> Self {
        Self { in_channels, squeeze, expand1x1, expand3x3, stride: 1, residual: false }
    }

    pub const fn residual(mut self) -> Self {
        self.residual = true;
        self
    }

    pub const fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub const fn out_channels(&self) -> usize {
        self.expand1x1 + self.expand3x3
    }

    pub const fn wide(self, groups1x1: usize, groups3x3: usize) -> WfmConfig {
        WfmConfig { fire: self, groups1x1, groups3x3 }
    }

    pub const fn plain(self) -> WfmConfig {
        self.wide(1, 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WfmConfig {
    #[serde(flatten)]
    pub fire: FireConfig,
    pub groups1x1: usize,
    pub groups3x3: usize,
}

impl WfmConfig {
    /// Wide fire module with the default cardinalities (2 for 1×1, 16 for 3×3).
    pub const fn new(fire: FireConfig) -> Self {
        fire.wide(DEFAULT_GROUPS_1X1, DEFAULT_GROUPS_3X3)
    }

    pub fn squeeze_spec(&self) -> ConvSpec {
        ConvSpec::new(self.fire.in_channels, self.fire.squeeze, 1)
    }

    /// The strided 1×1 path samples the same grid as the padded 3×3 path.
    pub fn expand1x1_spec(&self) -> ConvSpec {
        ConvSpec::new(self.fire.squeeze, self.fire.expand1x1, 1).stride(self.fire.stride).groups(self.groups1x1)
    }

    pub fn expand3x3_spec(&self) -> ConvSpec {
        ConvSpec::new(self.fire.squeeze, self.fire.expand3x3, 3).pad(1).stride(self.fire.stride).groups(self.groups3x3)
    }

    /// `(suffix, spec)` for the three convolutions, in execution order.
    pub fn convs(&self) -> [(&'static str, ConvSpec); 3] {
        [("squeeze", self.squeeze_spec()), ("expand1x1", self.expand1x1_spec()), ("expand3x3", self.expand3x3_spec())]
    }

    pub fn param_count(&self) -> usize {
        self.convs().iter().map(|(_, s)| s.param_count()).sum()
    }

    pub fn weight_count(&self) -> usize {
        self.convs().iter().map(|(_, s)| s.weight_count()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let f = &self.fire;
        if f.stride == 0 {
            return Err(Error::Config("fire stride must be >= 1".into()));
        }
        for (name, spec) in self.convs() {
            spec.validate().map_err(|e| Error::Config(format!("{name}: {e}")))?;
        }
        if f.residual && (f.in_channels != f.out_channels() || f.stride != 1) {
            return Err(Error::Config(format!(
                "residual fire block needs in_channels == e1 + e3 and stride 1, got {} -> {} stride {}",
                f.in_channels,
                f.out_channels(),
                f.stride
            )));
        }
        Ok(())
    }
}

/// Borrowed weights and bias of one convolution.
#[derive(Clone, Copy, Debug)]
pub struct ConvWeights<'a> {
    pub weight: &'a [f32],
    pub bias: &'a [f32],
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Vec<f32>,
}

impl ConvParams {
    pub fn zeros(spec: &ConvSpec) -> Self {
        Self {
            weight: Tensor::zeros(spec.weight_shape()).expect("valid conv spec"),
            bias: vec![0.0; if spec.has_bias { spec.out_channels } else { 0 }],
        }
    }

    pub fn view(&self) -> ConvWeights<'_> {
        ConvWeights { weight: self.weight.data(), bias: &self.bias }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FireParams {
    pub squeeze: ConvParams,
    pub expand1x1: ConvParams,
    pub expand3x3: ConvParams,
}

impl FireParams {
    pub fn zeros(cfg: &WfmConfig) -> Self {
        Self {
            squeeze: ConvParams::zeros(&cfg.squeeze_spec()),
            expand1x1: ConvParams::zeros(&cfg.expand1x1_spec()),
            expand3x3: ConvParams::zeros(&cfg.expand3x3_spec()),
        }
    }

    pub(crate) fn views(&self) -> [ConvWeights<'_>; 3] {
        [self.squeeze.view(), self.expand1x1.view(), self.expand3x3.view()]
    }
}

fn conv_with(x: &Tensor, spec: &ConvSpec, w: ConvWeights<'_>) -> Result<Tensor> {
    conv2d_slices(x, spec, w.weight, w.bias)
}

/// Runs a fire or wide fire block. `bypass` overrides the residual source,
/// which otherwise is the block input.
pub fn block_forward(
    x: &Tensor,
    bypass: Option<&Tensor>,
    cfg: &WfmConfig,
    weights: [ConvWeights<'_>; 3],
) -> Result<Tensor> {
    cfg.validate()?;
    if x.shape().c != cfg.fire.in_channels {
        return Err(Error::ShapeMismatch(format!(
            "fire block expects {} channels, got {}",
            cfg.fire.in_channels,
            x.shape()
        )));
    }
    let [sq, e1, e3] = weights;
    let squeezed = relu(&conv_with(x, &cfg.squeeze_spec(), sq)?);
    let a = conv_with(&squeezed, &cfg.expand1x1_spec(), e1)?;
    let b = conv_with(&squeezed, &cfg.expand3x3_spec(), e3)?;
    let mut out = a.concat_channels(&b)?;
    if cfg.fire.residual {
        out = out.add(bypass.unwrap_or(x))?;
    } else if bypass.is_some() {
        return Err(Error::Config("bypass given to a non-residual fire block".into()));
    }
    Ok(relu(&out))
}

pub fn fire_forward(x: &Tensor, cfg: &FireConfig, params: &FireParams) -> Result<Tensor> {
    block_forward(x, None, &cfg.plain(), params.views())
}

pub fn wfm_forward(x: &Tensor, cfg: &WfmConfig, params: &FireParams) -> Result<Tensor> {
    block_forward(x, None, cfg, params.views())
}

/// Both sides of the feature-balance condition `C₁ₓ₁·K₁ₓ₁ ≈ C₃ₓ₃·K₃ₓ₃` for one
/// reading of the filter size `K`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalanceTerms {
    pub term1x1: f64,
    pub term3x3: f64,
    pub ratio: f64,
    pub balanced: bool,
}

impl BalanceTerms {
    fn new(term1x1: f64, term3x3: f64) -> Self {
        let ratio = term1x1 / term3x3;
        Self { term1x1, term3x3, ratio, balanced: (0.5..=2.0).contains(&ratio) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CardinalityReport {
    /// Output channels per group of the 1×1 expand convolution.
    pub channels_per_group1x1: usize,
    pub channels_per_group3x3: usize,
    /// `K` read as the filter area (1 and 9). This is the reading that decides `balanced`.
    pub area: BalanceTerms,
    /// `K` read as the filter side length (1 and 3).
    pub side: BalanceTerms,
    pub balanced: bool,
}

pub fn validate_cardinality(cfg: &WfmConfig) -> CardinalityReport {
    let c1 = cfg.fire.expand1x1 / cfg.groups1x1.max(1);
    let c3 = cfg.fire.expand3x3 / cfg.groups3x3.max(1);
    let area = BalanceTerms::new(c1 as f64, (c3 * 9) as f64);
    let side = BalanceTerms::new(c1 as f64, (c3 * 3) as f64);
    CardinalityReport { channels_per_group1x1: c1, channels_per_group3x3: c3, area, side, balanced: area.balanced }
}
