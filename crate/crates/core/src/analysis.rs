//! Parameter and multiply-accumulate accounting over a model graph.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::graph::{LayerKind, LayerSpec, ModelGraph};
use crate::nn::ConvSpec;
use crate::tensor::Shape4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub kind: String,
    pub out_shape: [usize; 4],
    /// Learned parameters: weights, biases, BN scale and shift, L2 scale.
    pub params: usize,
    /// BN running mean and variance, kept out of `params`.
    pub running_stats: usize,
    pub macs: u64,
    /// Elementwise work (activations, pooling compares, normalization) not counted as MACs.
    pub non_mac_ops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub layers: Vec<LayerCost>,
    pub total_params: usize,
    pub total_macs: u64,
    pub total_running_stats: usize,
    pub total_non_mac_ops: u64,
    pub input_hw: usize,
}

fn conv_macs(spec: &ConvSpec, input: Shape4) -> Result<u64> {
    let out = spec.output_shape(input)?;
    Ok((spec.weight_count() * out.h * out.w * out.n) as u64)
}

fn layer_macs(layer: &LayerSpec, input: Shape4) -> Result<u64> {
    match &layer.kind {
        LayerKind::Conv { spec, .. } => conv_macs(spec, input),
        LayerKind::Fire(_) | LayerKind::Wfm(_) => {
            let cfg = layer.kind.block_config().expect("block layer");
            let squeezed = cfg.squeeze_spec().output_shape(input)?;
            Ok(conv_macs(&cfg.squeeze_spec(), input)?
                + conv_macs(&cfg.expand1x1_spec(), squeezed)?
                + conv_macs(&cfg.expand3x3_spec(), squeezed)?)
        }
        _ => Ok(0),
    }
}

fn layer_non_mac_ops(layer: &LayerSpec, input: Shape4, out: Shape4) -> Result<u64> {
    let n = out.numel() as u64;
    Ok(match &layer.kind {
        LayerKind::Conv { relu, .. } => {
            if *relu {
                n
            } else {
                0
            }
        }
        LayerKind::Pool(p) => n * (p.kernel * p.kernel) as u64,
        LayerKind::Fire(_) | LayerKind::Wfm(_) => {
            let cfg = layer.kind.block_config().expect("block layer");
            let squeezed = cfg.squeeze_spec().output_shape(input)?.numel() as u64;
            let residual = if cfg.fire.residual { n } else { 0 };
            squeezed + n + residual
        }
        LayerKind::BatchNorm { .. } => 2 * n,
        LayerKind::Dropout { .. } => n,
        LayerKind::L2Norm { .. } => 3 * n,
        LayerKind::Add => n * (layer.inputs.len().saturating_sub(1)) as u64,
        LayerKind::Input { .. } | LayerKind::Concat => 0,
    })
}

impl CostReport {
    /// Costs of every layer for one `input_hw × input_hw` image.
    pub fn build(graph: &ModelGraph, input_hw: usize) -> Result<Self> {
        let shapes = graph.infer_shapes(input_hw)?;
        let by_name: HashMap<&str, Shape4> = shapes.iter().map(|(n, s)| (n.as_str(), *s)).collect();
        let image = Shape4::new(1, graph.input_channels(), input_hw, input_hw);
        let mut layers = Vec::with_capacity(shapes.len());
        for (layer, (_, out)) in graph.layers().iter().zip(&shapes) {
            let input = layer.inputs.first().map(|n| by_name[n.as_str()]).unwrap_or(image);
            let specs = layer.param_specs();
            layers.push(LayerCost {
                name: layer.name.clone(),
                kind: layer.kind.name().to_string(),
                out_shape: out.to_array(),
                params: specs.iter().filter(|s| s.role.is_learned()).map(|s| s.numel()).sum(),
                running_stats: specs.iter().filter(|s| !s.role.is_learned()).map(|s| s.numel()).sum(),
                macs: layer_macs(layer, input)?,
                non_mac_ops: layer_non_mac_ops(layer, input, *out)?,
            });
        }
        Ok(Self::from_rows(layers, input_hw))
    }

    pub fn from_rows(layers: Vec<LayerCost>, input_hw: usize) -> Self {
        Self {
            total_params: layers.iter().map(|l| l.params).sum(),
            total_macs: layers.iter().map(|l| l.macs).sum(),
            total_running_stats: layers.iter().map(|l| l.running_stats).sum(),
            total_non_mac_ops: layers.iter().map(|l| l.non_mac_ops).sum(),
            layers,
            input_hw,
        }
    }

    pub fn layer(&self, name: &str) -> Option<&LayerCost> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<24} {:<8} {:<20} {:>12} {:>16} {:>14}",
            "layer", "kind", "output", "params", "macs", "non-mac ops"
        );
        for l in &self.layers {
            let [n, c, h, w] = l.out_shape;
            let _ = writeln!(
                s,
                "{:<24} {:<8} {:<20} {:>12} {:>16} {:>14}",
                l.name,
                l.kind,
                format!("{n}x{c}x{h}x{w}"),
                l.params,
                l.macs,
                l.non_mac_ops
            );
        }
        let _ = writeln!(
            s,
            "total params {} ({:.3}M), total MACs {} ({:.1}M) at {}x{}; BN running stats {} (excluded)",
            self.total_params,
            self.total_params as f64 / 1e6,
            self.total_macs,
            self.total_macs as f64 / 1e6,
            self.input_hw,
            self.input_hw,
            self.total_running_stats
        );
        s
    }
}

pub fn count_params(graph: &ModelGraph) -> Result<CostReport> {
    CostReport::build(graph, graph.input_hw())
}

pub fn count_macs(graph: &ModelGraph, input_hw: usize) -> Result<CostReport> {
    CostReport::build(graph, input_hw)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    pub from: f64,
    pub to: f64,
    pub abs: f64,
    /// Relative change in percent of `from`; 0 when `from` is 0.
    pub pct: f64,
}

impl Delta {
    pub fn new(from: f64, to: f64) -> Self {
        let abs = to - from;
        Self { from, to, abs, pct: if from == 0.0 { 0.0 } else { 100.0 * abs / from } }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDelta {
    pub name: String,
    pub params: Delta,
    pub macs: Delta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostComparison {
    pub params: Delta,
    pub macs: Delta,
    /// Layers present in both reports, in the order of the first.
    pub layers: Vec<LayerDelta>,
}

/// Deltas going from `a` to `b`.
pub fn compare_reports(a: &CostReport, b: &CostReport) -> CostComparison {
    let layers = a
        .layers
        .iter()
        .filter_map(|la| {
            b.layer(&la.name).map(|lb| LayerDelta {
                name: la.name.clone(),
                params: Delta::new(la.params as f64, lb.params as f64),
                macs: Delta::new(la.macs as f64, lb.macs as f64),
            })
        })
        .collect();
    CostComparison {
        params: Delta::new(a.total_params as f64, b.total_params as f64),
        macs: Delta::new(a.total_macs as f64, b.total_macs as f64),
        layers,
    }
}
