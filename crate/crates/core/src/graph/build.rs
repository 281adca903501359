//! Fire SSD graph construction and its ablation variants.

use serde::{Deserialize, Serialize};

use super::{Branch, BranchConfig, LayerKind, LayerSpec, ModelGraph};
use crate::error::{Error, Result};
use crate::fire::{FireConfig, WfmConfig};
use crate::nn::{ConvSpec, PoolSpec};
use crate::ssd::PriorConfig;

/// One row of the appended-layer table: `(layer, label, output side, stride, channels)`.
/// Stride `None` marks the input row.
pub type AppendedRow = (&'static str, &'static str, usize, Option<usize>, usize);

pub const APPENDED_ROWS: [AppendedRow; 13] = [
    ("fire8", "Input (From Fire8)", 38, None, 512),
    ("pool8", "Pool8", 19, Some(2), 512),
    ("fire9", "Fire9", 19, Some(1), 512),
    ("fire10", "Fire10", 19, Some(1), 512),
    ("pool10", "Pool10", 10, Some(2), 512),
    ("fire11", "Fire11", 10, Some(1), 512),
    ("fire12", "Fire12", 10, Some(1), 512),
    ("pool12", "Pool12", 5, Some(2), 512),
    ("fire13", "Fire13", 5, Some(1), 512),
    ("fire14", "Fire14", 5, Some(1), 512),
    ("fire15", "Fire15", 3, Some(2), 512),
    ("fire16", "Fire16", 3, Some(1), 512),
    ("conv17", "Conv17", 1, Some(1), 512),
];

/// A table row next to what the graph actually produces at 300×300.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RowCheck {
    pub layer: &'static str,
    pub label: &'static str,
    pub expected: (usize, Option<usize>, usize),
    pub actual: Option<(usize, Option<usize>, usize)>,
}

impl RowCheck {
    pub fn ok(&self) -> bool {
        self.actual == Some(self.expected)
    }
}

/// Compares every appended-layer row against `graph`'s inferred shapes and strides.
/// Non-square outputs and missing layers never match.
pub fn check_appended_layers(graph: &ModelGraph) -> Result<Vec<RowCheck>> {
    let shapes = graph.infer_shapes(300)?;
    Ok(APPENDED_ROWS
        .iter()
        .map(|&(layer, label, side, stride, ch)| {
            let actual = shapes.iter().find(|(k, _)| k == layer).and_then(|(_, s)| {
                let st = stride.and(graph.layer(layer).map(|l| l.kind.stride()));
                (s.h == s.w).then_some((s.h, st, s.c))
            });
            RowCheck { layer, label, expected: (side, stride, ch), actual }
        })
        .collect())
}

/// Which of the three detector additions are enabled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub use_wfm: bool,
    pub use_drmd: bool,
    pub use_ndm: bool,
}

impl AblationFlags {
    pub const BASELINE: Self = Self { use_wfm: false, use_drmd: false, use_ndm: false };
    pub const WFM: Self = Self { use_wfm: true, use_drmd: false, use_ndm: false };
    pub const WFM_DRMD: Self = Self { use_wfm: true, use_drmd: true, use_ndm: false };
    pub const FULL: Self = Self { use_wfm: true, use_drmd: true, use_ndm: true };

    pub fn all() -> impl Iterator<Item = Self> {
        (0..8u8).map(|b| Self { use_wfm: b & 1 != 0, use_drmd: b & 2 != 0, use_ndm: b & 4 != 0 })
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "baseline" => Some(Self::BASELINE),
            "wfm" => Some(Self::WFM),
            "wfm-drmd" => Some(Self::WFM_DRMD),
            "full" => Some(Self::FULL),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FireSsdConfig {
    pub input_hw: usize,
    pub num_classes: usize,
    /// Anchors per cell on the 38, 19, 10, 5, 3 and 1 maps.
    pub anchors_per_cell: [usize; 6],
    pub dropout_ratios: [f32; 6],
    /// Squeeze width of every 512-channel appended and stem block.
    pub appended_squeeze: usize,
    pub groups1x1: usize,
    pub groups3x3: usize,
    pub l2norm_scale: f32,
}

impl Default for FireSsdConfig {
    fn default() -> Self {
        Self {
            input_hw: 300,
            num_classes: 21,
            anchors_per_cell: [4, 6, 6, 6, 4, 4],
            dropout_ratios: [0.3, 0.25, 0.2, 0.15, 0.1, 0.1],
            appended_squeeze: 48,
            groups1x1: 2,
            groups3x3: 16,
            l2norm_scale: 20.0,
        }
    }
}

impl FireSsdConfig {
    /// Anchor layout matching the six detection branches.
    pub fn prior_config(&self) -> PriorConfig {
        PriorConfig {
            map_sizes: BRANCH_SIZES.to_vec(),
            anchors_per_cell: self.anchors_per_cell.to_vec(),
            ..PriorConfig::default()
        }
    }
}

pub const BRANCH_SIZES: [usize; 6] = [38, 19, 10, 5, 3, 1];
const TAPS: [&str; 6] = ["fire8", "fire10", "fire12", "fire14", "fire16", "conv17"];
const WIDTH: usize = 512;

struct Builder {
    layers: Vec<LayerSpec>,
}

impl Builder {
    fn new(channels: usize) -> Self {
        Self { layers: vec![LayerSpec::new("data", LayerKind::Input { channels }, &[])] }
    }

    fn push(&mut self, name: &str, kind: LayerKind, inputs: &[&str]) -> String {
        self.layers.push(LayerSpec::new(name, kind, inputs));
        name.to_string()
    }

    fn last(&self) -> String {
        self.layers.last().expect("input layer").name.clone()
    }

    /// Appends to the end of the chain.
    fn then(&mut self, name: &str, kind: LayerKind) -> String {
        let prev = self.last();
        self.push(name, kind, &[&prev])
    }
}

fn fire(cfg: FireConfig) -> LayerKind {
    LayerKind::Fire(cfg)
}

fn backend(b: &mut Builder) {
    b.then("conv1", LayerKind::Conv { spec: ConvSpec::new(3, 64, 3).stride(2).pad(1), relu: true });
    b.then("pool1", LayerKind::Pool(PoolSpec::new(3, 2)));
    b.then("fire2", fire(FireConfig::new(64, 16, 64, 64)));
    b.then("fire3", fire(FireConfig::new(128, 16, 64, 64).residual()));
    b.then("fire4", fire(FireConfig::new(128, 32, 128, 128)));
    b.then("pool4", LayerKind::Pool(PoolSpec::new(2, 2)));
    b.then("fire5", fire(FireConfig::new(256, 32, 128, 128).residual()));
    b.then("fire6", fire(FireConfig::new(256, 48, 192, 192)));
    b.then("fire7", fire(FireConfig::new(384, 48, 192, 192).residual()));
    b.then("fire8", fire(FireConfig::new(384, 64, 256, 256)));
}

/// The residual SqueezeNet backbone alone: 300×300×3 in, Fire8 at 38×38×512 out.
pub fn build_backend() -> Result<ModelGraph> {
    let mut b = Builder::new(3);
    backend(&mut b);
    ModelGraph::new(b.layers, Vec::new(), 300)
}

fn wide(cfg: &FireSsdConfig, fire: FireConfig) -> WfmConfig {
    fire.wide(cfg.groups1x1, cfg.groups3x3)
}

pub fn build_fire_ssd(cfg: &FireSsdConfig, flags: AblationFlags) -> Result<ModelGraph> {
    if cfg.anchors_per_cell.contains(&0) {
        return Err(Error::Config("every branch needs at least one anchor".into()));
    }
    let s = cfg.appended_squeeze;
    let half = WIDTH / 2;
    let block = |stride: usize| {
        let f = FireConfig::new(WIDTH, s, half, half).stride(stride);
        if flags.use_wfm {
            LayerKind::Wfm(wide(cfg, f))
        } else {
            LayerKind::Fire(f)
        }
    };

    let mut b = Builder::new(3);
    backend(&mut b);
    let pool = || LayerKind::Pool(PoolSpec::new(2, 2));
    b.then("pool8", pool());
    b.then("fire9", block(1));
    b.then("fire10", block(1));
    b.then("pool10", pool());
    b.then("fire11", block(1));
    b.then("fire12", block(1));
    b.then("pool12", pool());
    b.then("fire13", block(1));
    b.then("fire14", block(1));
    b.then("fire15", block(2));
    b.then("fire16", block(1));
    b.then("conv17", LayerKind::Conv { spec: ConvSpec::new(WIDTH, WIDTH, 3), relu: true });

    let mut branches = Vec::with_capacity(6);
    for (i, (&size, &tap)) in BRANCH_SIZES.iter().zip(&TAPS).enumerate() {
        let anchors = cfg.anchors_per_cell[i];
        let ratio = cfg.dropout_ratios[i];
        let config = BranchConfig::drmd(size, anchors, cfg.num_classes, ratio)?;
        config.validate()?;
        let depth = if flags.use_drmd { config.wfm_count } else { 0 };
        let mut x = tap.to_string();
        if flags.use_ndm {
            x = b.push(&format!("{tap}_ndm_bn"), LayerKind::BatchNorm { channels: WIDTH }, &[&x]);
            x = b.push(&format!("{tap}_ndm_dropout"), LayerKind::Dropout { ratio }, &[&x]);
        } else if i == 0 {
            let kind = LayerKind::L2Norm { channels: WIDTH, initial_scale: cfg.l2norm_scale };
            x = b.push(&format!("{tap}_l2norm"), kind, &[&x]);
        }
        let stem_in = x.clone();
        let mut stem = Vec::with_capacity(depth);
        for k in 0..depth {
            let last = k + 1 == depth;
            let mut f = FireConfig::new(WIDTH, s, half, half);
            let name = format!("{tap}_stem_wfm{}", k + 1);
            x = if last && config.residual {
                f = f.residual();
                b.push(&name, LayerKind::Wfm(wide(cfg, f)), &[&x, &stem_in])
            } else {
                b.push(&name, LayerKind::Wfm(wide(cfg, f)), &[&x])
            };
            stem.push(x.clone());
        }
        let head = |c| LayerKind::Conv { spec: ConvSpec::new(WIDTH, c, 3).pad(1), relu: false };
        let loc = b.push(&format!("{tap}_mbox_loc"), head(config.loc_channels()), &[&x]);
        let conf = b.push(&format!("{tap}_mbox_conf"), head(config.conf_channels()), &[&x]);
        branches.push(Branch { config, tap: tap.to_string(), stem, loc, conf });
    }

    ModelGraph::new(b.layers, branches, cfg.input_hw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape4;

    #[test]
    fn backend_reaches_38() {
        let g = build_backend().unwrap();
        let shapes = g.infer_shapes(300).unwrap();
        let get = |n: &str| shapes.iter().find(|(k, _)| k == n).unwrap().1;
        assert_eq!(get("conv1"), Shape4::new(1, 64, 150, 150));
        assert_eq!(get("pool1"), Shape4::new(1, 64, 75, 75));
        assert_eq!(get("fire4"), Shape4::new(1, 256, 75, 75));
        assert_eq!(get("pool4"), Shape4::new(1, 256, 38, 38));
        assert_eq!(get("fire8"), Shape4::new(1, 512, 38, 38));
        let fires: Vec<usize> = g
            .layers()
            .iter()
            .filter_map(|l| match &l.kind {
                LayerKind::Fire(f) => Some(f.out_channels()),
                _ => None,
            })
            .collect();
        assert_eq!(fires, vec![128, 128, 256, 256, 384, 384, 512]);
    }

    #[test]
    fn appended_rows_match_inferred_shapes() {
        let g = build_fire_ssd(&FireSsdConfig::default(), AblationFlags::FULL).unwrap();
        let shapes = g.infer_shapes(300).unwrap();
        for (layer, _, side, stride, ch) in APPENDED_ROWS {
            let s = shapes.iter().find(|(k, _)| k == layer).unwrap().1;
            assert_eq!((s.c, s.h, s.w), (ch, side, side), "{layer}");
            if let Some(st) = stride {
                assert_eq!(g.layer(layer).unwrap().kind.stride(), st, "{layer}");
            }
        }
    }

    #[test]
    fn appended_check_flags_a_wrong_graph() {
        assert!(check_appended_layers(&build_backend().unwrap()).unwrap().iter().skip(1).all(|r| !r.ok()));
        let full = build_fire_ssd(&FireSsdConfig::default(), AblationFlags::FULL).unwrap();
        assert!(check_appended_layers(&full).unwrap().iter().all(RowCheck::ok));
    }

    #[test]
    fn prior_layout_matches_heads() {
        let cfg = FireSsdConfig::default();
        let g = build_fire_ssd(&cfg, AblationFlags::FULL).unwrap();
        let per_branch: usize = g.head_shapes().unwrap().iter().map(|(l, _)| l.c / 4 * l.h * l.w).sum();
        assert_eq!(cfg.prior_config().prior_count(), per_branch);
        assert_eq!(per_branch, 8732);
    }

    #[test]
    fn all_flag_combinations_build() {
        for flags in AblationFlags::all() {
            let g = build_fire_ssd(&FireSsdConfig::default(), flags).unwrap();
            assert_eq!(g.branches().len(), 6);
            let bn = g.count_layers("bn");
            let drop = g.count_layers("dropout");
            let l2 = g.count_layers("l2norm");
            if flags.use_ndm {
                assert_eq!((bn, drop, l2), (6, 6, 0));
            } else {
                assert_eq!((bn, drop, l2), (0, 0, 1));
            }
            let stems = g.layers().iter().filter(|l| l.name.contains("_stem_")).count();
            assert_eq!(stems, if flags.use_drmd { 6 } else { 0 });
            let appended_wfm = (9..=16).filter(|i| g.layer(&format!("fire{i}")).unwrap().kind.name() == "wfm").count();
            assert_eq!(appended_wfm, if flags.use_wfm { 8 } else { 0 });
        }
    }

    #[test]
    fn heads_have_expected_channels() {
        let g = build_fire_ssd(&FireSsdConfig::default(), AblationFlags::FULL).unwrap();
        let heads = g.head_shapes().unwrap();
        assert_eq!(heads[0], (Shape4::new(1, 16, 38, 38), Shape4::new(1, 84, 38, 38)));
        assert_eq!(heads[5], (Shape4::new(1, 16, 1, 1), Shape4::new(1, 84, 1, 1)));
        let ratios: Vec<f32> = g.branches().iter().map(|b| b.config.dropout_ratio).collect();
        assert!(ratios.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn build_is_idempotent() {
        let a = build_fire_ssd(&FireSsdConfig::default(), AblationFlags::FULL).unwrap();
        let b = build_fire_ssd(&FireSsdConfig::default(), AblationFlags::FULL).unwrap();
        assert_eq!(a.param_specs(), b.param_specs());
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_squeeze_is_a_build_error() {
        let cfg = FireSsdConfig { appended_squeeze: 40, ..Default::default() };
        assert!(build_fire_ssd(&cfg, AblationFlags::FULL).is_err());
    }
}
