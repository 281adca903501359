//! Declarative layer graph and its executor.

mod branch;
mod build;

use std::collections::HashMap;

use serde::Serialize;

pub use branch::{conf_spec, drmd_branch_forward, loc_spec, ndm_forward, BranchParams, NdmConfig, NDM_CHANNELS};
pub use build::{
    build_backend, build_fire_ssd, check_appended_layers, AblationFlags, AppendedRow, FireSsdConfig, RowCheck,
    APPENDED_ROWS, BRANCH_SIZES,
};

use crate::error::{Error, Result};
use crate::fire::{block_forward, ConvWeights, FireConfig, WfmConfig};
use crate::nn::{
    batchnorm, batchnorm_train, conv2d_slices, dropout, l2norm, maxpool2d, relu, BatchStats, BnParams, ConvSpec,
    DropoutSpec, Mode, PoolSpec, BN_EPSILON, BN_MOMENTUM,
};
use crate::params::{Param, ParamRole, ParamSpec, ParamStore};
use crate::tensor::{Shape4, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Input {
        channels: usize,
    },
    Conv {
        #[serde(flatten)]
        spec: ConvSpec,
        relu: bool,
    },
    Pool(PoolSpec),
    Fire(FireConfig),
    Wfm(WfmConfig),
    #[serde(rename = "bn")]
    BatchNorm {
        channels: usize,
    },
    Dropout {
        ratio: f32,
    },
    L2Norm {
        channels: usize,
        initial_scale: f32,
    },
    Add,
    Concat,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Input { .. } => "input",
            LayerKind::Conv { .. } => "conv",
            LayerKind::Pool(_) => "pool",
            LayerKind::Fire(_) => "fire",
            LayerKind::Wfm(_) => "wfm",
            LayerKind::BatchNorm { .. } => "bn",
            LayerKind::Dropout { .. } => "dropout",
            LayerKind::L2Norm { .. } => "l2norm",
            LayerKind::Add => "add",
            LayerKind::Concat => "concat",
        }
    }

    /// Fire layers run through the wide-module code path with cardinality 1.
    pub fn block_config(&self) -> Option<WfmConfig> {
        match self {
            LayerKind::Fire(f) => Some(f.plain()),
            LayerKind::Wfm(w) => Some(*w),
            _ => None,
        }
    }

    /// Every convolution this layer owns, as `(parameter prefix suffix, spec)`.
    pub fn convs(&self) -> Vec<(Option<&'static str>, ConvSpec)> {
        match self {
            LayerKind::Conv { spec, .. } => vec![(None, *spec)],
            _ => self
                .block_config()
                .map(|c| c.convs().into_iter().map(|(s, spec)| (Some(s), spec)).collect())
                .unwrap_or_default(),
        }
    }

    pub fn stride(&self) -> usize {
        match self {
            LayerKind::Conv { spec, .. } => spec.stride,
            LayerKind::Pool(p) => p.stride,
            LayerKind::Fire(f) => f.stride,
            LayerKind::Wfm(w) => w.fire.stride,
            _ => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    pub inputs: Vec<String>,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind, inputs: &[&str]) -> Self {
        Self { name: name.into(), kind, inputs: inputs.iter().map(|s| s.to_string()).collect() }
    }

    fn conv_param_name(&self, suffix: Option<&str>, field: &str) -> String {
        match suffix {
            Some(s) => format!("{}.{s}.{field}", self.name),
            None => format!("{}.{field}", self.name),
        }
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        for (suffix, spec) in self.kind.convs() {
            let k2 = spec.kernel * spec.kernel;
            out.push(ParamSpec {
                name: self.conv_param_name(suffix, "weight"),
                dims: spec.weight_shape().to_array().to_vec(),
                role: ParamRole::ConvWeight { fan_in: spec.in_per_group() * k2, fan_out: spec.out_per_group() * k2 },
            });
            if spec.has_bias {
                out.push(ParamSpec {
                    name: self.conv_param_name(suffix, "bias"),
                    dims: vec![spec.out_channels],
                    role: ParamRole::ConvBias,
                });
            }
        }
        match self.kind {
            LayerKind::BatchNorm { channels } => {
                for (field, role) in [
                    ("gamma", ParamRole::BnGamma),
                    ("beta", ParamRole::BnBeta),
                    ("running_mean", ParamRole::BnRunningMean),
                    ("running_var", ParamRole::BnRunningVar),
                ] {
                    out.push(ParamSpec { name: format!("{}.{field}", self.name), dims: vec![channels], role });
                }
            }
            LayerKind::L2Norm { channels, .. } => out.push(ParamSpec {
                name: format!("{}.scale", self.name),
                dims: vec![channels],
                role: ParamRole::L2Scale,
            }),
            _ => {}
        }
        out
    }

    fn output_shape(&self, inputs: &[Shape4]) -> Result<Shape4> {
        let first = *inputs.first().ok_or_else(|| Error::Build(format!("layer {} has no input", self.name)))?;
        let ctx = |e: Error| Error::Build(format!("layer {}: {e}", self.name));
        let same_channels = |c: usize| {
            if first.c == c {
                Ok(first)
            } else {
                Err(ctx(Error::ShapeMismatch(format!("expects {c} channels, got {first}"))))
            }
        };
        match &self.kind {
            LayerKind::Input { channels } => same_channels(*channels),
            LayerKind::Conv { spec, .. } => spec.output_shape(first).map_err(ctx),
            LayerKind::Pool(p) => p.output_shape(first).map_err(ctx),
            LayerKind::Fire(_) | LayerKind::Wfm(_) => {
                let cfg = self.kind.block_config().expect("block layer");
                cfg.validate().map_err(ctx)?;
                let s = cfg.squeeze_spec().output_shape(first).map_err(ctx)?;
                let a = cfg.expand1x1_spec().output_shape(s).map_err(ctx)?;
                let b = cfg.expand3x3_spec().output_shape(s).map_err(ctx)?;
                if (a.h, a.w) != (b.h, b.w) {
                    return Err(ctx(Error::Config(format!("expand paths disagree: {a} vs {b}"))));
                }
                let out = a.with_channels(cfg.fire.out_channels());
                if let Some(bypass) = inputs.get(1) {
                    if !cfg.fire.residual || *bypass != out {
                        return Err(ctx(Error::Config(format!("bypass {bypass} cannot join output {out}"))));
                    }
                }
                Ok(out)
            }
            LayerKind::BatchNorm { channels } | LayerKind::L2Norm { channels, .. } => same_channels(*channels),
            LayerKind::Dropout { ratio } => {
                if !(0.0..1.0).contains(ratio) {
                    return Err(ctx(Error::Config(format!("dropout ratio {ratio}"))));
                }
                Ok(first)
            }
            LayerKind::Add => {
                if inputs.iter().any(|s| *s != first) {
                    return Err(ctx(Error::ShapeMismatch(format!("add over {inputs:?}"))));
                }
                Ok(first)
            }
            LayerKind::Concat => {
                if inputs.iter().any(|s| (s.n, s.h, s.w) != (first.n, first.h, first.w)) {
                    return Err(ctx(Error::ShapeMismatch(format!("concat over {inputs:?}"))));
                }
                Ok(first.with_channels(inputs.iter().map(|s| s.c).sum()))
            }
        }
    }
}

/// One detection branch: a tap feature map, its optional stem, and the two head convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BranchConfig {
    pub source_size: usize,
    pub wfm_count: usize,
    pub residual: bool,
    pub dropout_ratio: f32,
    pub anchors_per_cell: usize,
    pub num_classes: usize,
}

impl BranchConfig {
    /// Stem depth for a feature map of the given side length.
    pub fn stem_depth(source_size: usize) -> Option<usize> {
        match source_size {
            38 | 19 => Some(2),
            10 | 5 => Some(1),
            3 | 1 => Some(0),
            _ => None,
        }
    }

    /// Branch with the stem depth and residual rule for its map size.
    pub fn drmd(source_size: usize, anchors_per_cell: usize, num_classes: usize, dropout_ratio: f32) -> Result<Self> {
        let wfm_count = Self::stem_depth(source_size)
            .ok_or_else(|| Error::Config(format!("no branch layout for {source_size}x{source_size} maps")))?;
        Ok(Self {
            source_size,
            wfm_count,
            residual: matches!(source_size, 38 | 19),
            dropout_ratio,
            anchors_per_cell,
            num_classes,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let depth = Self::stem_depth(self.source_size)
            .ok_or_else(|| Error::Config(format!("no branch layout for {0}x{0} maps", self.source_size)))?;
        if self.wfm_count != depth {
            return Err(Error::Config(format!(
                "{0}x{0} branch needs {depth} stem WFMs, got {1}",
                self.source_size, self.wfm_count
            )));
        }
        if self.residual && !matches!(self.source_size, 38 | 19) {
            return Err(Error::Config(format!("residual stem on a {0}x{0} branch", self.source_size)));
        }
        if self.anchors_per_cell == 0 || self.num_classes < 2 {
            return Err(Error::Config("branch needs anchors and at least two classes".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_ratio) {
            return Err(Error::Config(format!("dropout ratio {}", self.dropout_ratio)));
        }
        Ok(())
    }

    pub fn loc_channels(&self) -> usize {
        4 * self.anchors_per_cell
    }

    pub fn conf_channels(&self) -> usize {
        self.num_classes * self.anchors_per_cell
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Branch {
    pub config: BranchConfig,
    /// Backbone layer the branch reads from.
    pub tap: String,
    /// Stem layers between the tap and the heads, empty without DRMD.
    pub stem: Vec<String>,
    pub loc: String,
    pub conf: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput {
    pub loc: Tensor,
    pub conf: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph {
    layers: Vec<LayerSpec>,
    branches: Vec<Branch>,
    input_hw: usize,
    params: ParamStore,
}

#[derive(Serialize)]
struct GraphDocument<'a> {
    input_hw: usize,
    layers: &'a [LayerSpec],
    branches: &'a [Branch],
    taps: Vec<&'a str>,
}

impl ModelGraph {
    /// Validates names, wiring, and shapes at `input_hw`; parameters start at zero.
    pub fn new(layers: Vec<LayerSpec>, branches: Vec<Branch>, input_hw: usize) -> Result<Self> {
        let graph = Self { layers, branches, input_hw, params: ParamStore::new() };
        graph.check_wiring()?;
        graph.infer_shapes(input_hw)?;
        let params = ParamStore::zeros(&graph.param_specs());
        Ok(Self { params, ..graph })
    }

    fn check_wiring(&self) -> Result<()> {
        let mut seen: HashMap<&str, usize> = HashMap::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let is_input = matches!(layer.kind, LayerKind::Input { .. });
            if is_input != (i == 0) {
                return Err(Error::Build("exactly the first layer must be the input".into()));
            }
            if !is_input && layer.inputs.is_empty() {
                return Err(Error::Build(format!("layer {} has no inputs", layer.name)));
            }
            for inp in &layer.inputs {
                if !seen.contains_key(inp.as_str()) {
                    return Err(Error::Build(format!("layer {} reads {inp} before it exists", layer.name)));
                }
            }
            if seen.insert(&layer.name, i).is_some() {
                return Err(Error::Build(format!("duplicate layer name {}", layer.name)));
            }
        }
        for b in &self.branches {
            for name in [&b.tap, &b.loc, &b.conf].into_iter().chain(&b.stem) {
                if !seen.contains_key(name.as_str()) {
                    return Err(Error::Build(format!("branch refers to missing layer {name}")));
                }
            }
        }
        Ok(())
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn input_hw(&self) -> usize {
        self.input_hw
    }

    pub fn input_channels(&self) -> usize {
        match self.layers.first().map(|l| &l.kind) {
            Some(LayerKind::Input { channels }) => *channels,
            _ => unreachable!("validated at construction"),
        }
    }

    pub fn taps(&self) -> Vec<&str> {
        self.branches.iter().map(|b| b.tap.as_str()).collect()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        self.layers.iter().flat_map(|l| l.param_specs()).collect()
    }

    /// Replaces the parameter store after checking it against the graph.
    pub fn set_params(&mut self, store: ParamStore) -> Result<()> {
        store.check_against(&self.param_specs())?;
        self.params = store;
        Ok(())
    }

    pub fn with_params(mut self, store: ParamStore) -> Result<Self> {
        self.set_params(store)?;
        Ok(self)
    }

    pub fn count_layers(&self, kind: &str) -> usize {
        self.layers.iter().filter(|l| l.kind.name() == kind).count()
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = GraphDocument {
            input_hw: self.input_hw,
            layers: &self.layers,
            branches: &self.branches,
            taps: self.taps(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    /// Output shape of every layer for a batch of one `hw × hw` image.
    pub fn infer_shapes(&self, hw: usize) -> Result<Vec<(String, Shape4)>> {
        let input = Shape4::new(1, self.input_channels(), hw, hw);
        let mut shapes: HashMap<&str, Shape4> = HashMap::new();
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let ins: Vec<Shape4> = if layer.inputs.is_empty() {
                vec![input]
            } else {
                layer.inputs.iter().map(|n| shapes[n.as_str()]).collect()
            };
            let s = layer.output_shape(&ins)?;
            shapes.insert(&layer.name, s);
            out.push((layer.name.clone(), s));
        }
        Ok(out)
    }

    /// Expected `(loc, conf)` head shapes for one image at `input_hw`.
    pub fn head_shapes(&self) -> Result<Vec<(Shape4, Shape4)>> {
        let shapes: HashMap<String, Shape4> = self.infer_shapes(self.input_hw)?.into_iter().collect();
        Ok(self.branches.iter().map(|b| (shapes[&b.loc], shapes[&b.conf])).collect())
    }

    fn bn_params(&self, name: &str) -> Result<BnParams> {
        let get = |f: &str| self.params.data(&format!("{name}.{f}")).map(<[f32]>::to_vec);
        Ok(BnParams {
            gamma: get("gamma")?,
            beta: get("beta")?,
            running_mean: get("running_mean")?,
            running_var: get("running_var")?,
            epsilon: BN_EPSILON,
            momentum: BN_MOMENTUM,
        })
    }

    fn conv_weights(&self, layer: &LayerSpec, suffix: Option<&str>) -> Result<ConvWeights<'_>> {
        Ok(ConvWeights {
            weight: self.params.data(&layer.conv_param_name(suffix, "weight"))?,
            bias: self.params.data(&layer.conv_param_name(suffix, "bias"))?,
        })
    }

    fn run_layer(&self, index: usize, layer: &LayerSpec, ins: &[&Tensor], run: &mut RunState) -> Result<Tensor> {
        let x = ins[0];
        match &layer.kind {
            LayerKind::Input { .. } => Ok(x.clone()),
            LayerKind::Conv { spec, relu: act } => {
                let w = self.conv_weights(layer, None)?;
                let y = conv2d_slices(x, spec, w.weight, w.bias)?;
                Ok(if *act { relu(&y) } else { y })
            }
            LayerKind::Pool(p) => maxpool2d(x, p),
            LayerKind::Fire(_) | LayerKind::Wfm(_) => {
                let cfg = layer.kind.block_config().expect("block layer");
                let weights = [
                    self.conv_weights(layer, Some("squeeze"))?,
                    self.conv_weights(layer, Some("expand1x1"))?,
                    self.conv_weights(layer, Some("expand3x3"))?,
                ];
                block_forward(x, ins.get(1).copied(), &cfg, weights)
            }
            LayerKind::BatchNorm { .. } => {
                let mut p = self.bn_params(&layer.name)?;
                match run.mode {
                    Mode::Infer => batchnorm(x, &p),
                    Mode::Train => {
                        let (y, stats) = batchnorm_train(x, &mut p)?;
                        run.bn_updates.push((layer.name.clone(), p, stats));
                        Ok(y)
                    }
                }
            }
            LayerKind::Dropout { ratio } => {
                let spec = DropoutSpec {
                    ratio: *ratio,
                    mode: run.mode,
                    seed: run.seed.wrapping_add((index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
                };
                dropout(x, &spec)
            }
            LayerKind::L2Norm { .. } => l2norm(x, self.params.data(&format!("{}.scale", layer.name))?),
            LayerKind::Add => ins[1..].iter().try_fold(x.clone(), |acc, t| acc.add(t)),
            LayerKind::Concat => Tensor::concat_many(ins),
        }
    }

    fn run(&self, image: &Tensor, run: &mut RunState) -> Result<Vec<HeadOutput>> {
        let expect = Shape4::new(image.shape().n, self.input_channels(), self.input_hw, self.input_hw);
        if image.shape() != expect {
            return Err(Error::ShapeMismatch(format!("model input must be {expect}, got {}", image.shape())));
        }
        // index of the last layer reading each activation
        let mut last_use: HashMap<&str, usize> = HashMap::new();
        for (i, l) in self.layers.iter().enumerate() {
            for inp in &l.inputs {
                last_use.insert(inp, i);
            }
        }
        let outputs: Vec<&str> = self.branches.iter().flat_map(|b| [b.loc.as_str(), b.conf.as_str()]).collect();

        let mut acts: HashMap<&str, Tensor> = HashMap::new();
        let mut kept: HashMap<&str, Tensor> = HashMap::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let y = {
                let ins: Vec<&Tensor> = if layer.inputs.is_empty() {
                    vec![image]
                } else {
                    layer.inputs.iter().map(|n| &acts[n.as_str()]).collect()
                };
                self.run_layer(i, layer, &ins, run)?
            };
            if let Some(trace) = run.trace.as_mut() {
                trace.push((layer.name.clone(), y.shape()));
            }
            for inp in &layer.inputs {
                if last_use[inp.as_str()] == i {
                    acts.remove(inp.as_str());
                }
            }
            if outputs.contains(&layer.name.as_str()) {
                kept.insert(&layer.name, y.clone());
            }
            if last_use.contains_key(layer.name.as_str()) {
                acts.insert(&layer.name, y);
            }
        }
        let mut take =
            |name: &str| kept.remove(name).ok_or_else(|| Error::Build(format!("head {name} produced no output")));
        self.branches.iter().map(|b| Ok(HeadOutput { loc: take(&b.loc)?, conf: take(&b.conf)? })).collect()
    }

    /// Inference-mode forward pass: BN uses running statistics, dropout is the identity.
    pub fn forward(&self, image: &Tensor) -> Result<Vec<HeadOutput>> {
        self.run(image, &mut RunState::new(Mode::Infer, 0))
    }

    /// Forward pass that also records every layer's output shape in execution order.
    pub fn forward_traced(&self, image: &Tensor) -> Result<(Vec<HeadOutput>, Vec<(String, Shape4)>)> {
        let mut run = RunState::new(Mode::Infer, 0);
        run.trace = Some(Vec::new());
        let heads = self.run(image, &mut run)?;
        Ok((heads, run.trace.unwrap_or_default()))
    }

    /// Training-mode forward pass. BN normalizes with batch statistics and
    /// updates the running statistics in the store; dropout masks derive from `seed`.
    pub fn forward_train(&mut self, image: &Tensor, seed: u64) -> Result<(Vec<HeadOutput>, Vec<(String, BatchStats)>)> {
        let mut run = RunState::new(Mode::Train, seed);
        let heads = self.run(image, &mut run)?;
        let mut stats = Vec::new();
        for (name, p, s) in run.bn_updates {
            let set = |store: &mut ParamStore, field: &str, v: Vec<f32>| {
                let dims = vec![v.len()];
                store.insert(format!("{name}.{field}"), Param { dims, data: v });
            };
            set(&mut self.params, "running_mean", p.running_mean);
            set(&mut self.params, "running_var", p.running_var);
            stats.push((name, s));
        }
        Ok((heads, stats))
    }
}

struct RunState {
    mode: Mode,
    seed: u64,
    bn_updates: Vec<(String, BnParams, BatchStats)>,
    trace: Option<Vec<(String, Shape4)>>,
}

impl RunState {
    fn new(mode: Mode, seed: u64) -> Self {
        Self { mode, seed, bn_updates: Vec::new(), trace: None }
    }
}
