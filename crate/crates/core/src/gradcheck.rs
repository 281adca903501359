//! Central finite-difference checks of every analytic backward pass.
//!
//! Each case draws a random problem, reduces the op output to a scalar with a
//! random projection, and compares sampled gradient coordinates against
//! `(L(v + eps) − L(v − eps)) / (2·eps)`. The scalar is formed from each op's
//! double-precision result before its final rounding to `f32`, so the
//! difference quotient is not swamped by output rounding. Coordinates whose
//! stencil crosses a ReLU kink or changes the hard-negative selection are
//! skipped and counted.

use std::fmt::Write as _;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::graph::HeadOutput;
use crate::nn::{
    batchnorm_backward, batchnorm_train, batchnorm_train_f64, conv2d_backward, conv2d_f64, relu, relu_backward,
    BnParams, ConvSpec,
};
use crate::rng::{random_tensor, seeded};
use crate::ssd::{
    flatten_values, generate_priors, match_priors, multibox_loss, unflatten_heads, BBox, GroundTruth, MatchResult,
    MultiboxLoss, PriorBox, PriorConfig, MATCH_IOU, NEG_POS_RATIO,
};
use crate::tensor::{Shape4, Tensor};

/// Gradients smaller than this are compared in absolute rather than relative terms.
pub const REL_ERR_FLOOR: f64 = 1e-2;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub eps: f64,
    pub tol: f64,
    /// Random problems per suite.
    pub cases: usize,
    /// Sampled coordinates per checked tensor and case.
    pub coords: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { seed: 0, eps: 1e-3, tol: 1e-2, cases: 12, coords: 6 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub name: String,
    pub cases: usize,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

impl SuiteReport {
    fn new(name: impl Into<String>) -> Self {
        Self { name: name.into(), cases: 0, checked: 0, skipped: 0, max_rel_err: 0.0, worst: String::new() }
    }

    fn record(&mut self, analytic: f64, numeric: f64, what: impl FnOnce() -> String) {
        let e = rel_error(analytic, numeric);
        self.checked += 1;
        if e > self.max_rel_err || !e.is_finite() {
            self.max_rel_err = if e.is_finite() { e } else { f64::INFINITY };
            self.worst = format!("{} analytic {analytic:.6e} numeric {numeric:.6e}", what());
        }
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err < tol
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub eps: f64,
    pub tol: f64,
    pub suites: Vec<SuiteReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed(self.tol))
    }

    pub fn total_cases(&self) -> usize {
        self.suites.iter().map(|s| s.cases).sum()
    }

    pub fn max_rel_err(&self) -> f64 {
        self.suites.iter().map(|s| s.max_rel_err).fold(0.0, f64::max)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.suites {
            let _ = writeln!(
                s,
                "{:<5} {:<14} cases {:>3}  checked {:>5}  skipped {:>3}  max rel err {:.3e}",
                if r.passed(self.tol) { "ok" } else { "FAIL" },
                r.name,
                r.cases,
                r.checked,
                r.skipped,
                r.max_rel_err
            );
            if !r.passed(self.tol) && !r.worst.is_empty() {
                let _ = writeln!(s, "      worst: {}", r.worst);
            }
        }
        let _ = writeln!(s, "eps {:e}, tolerance {:e}, {} cases", self.eps, self.tol, self.total_cases());
        s
    }
}

/// `Σ r ⊙ y` in double precision.
fn project(y: &[f64], r: &Tensor) -> f64 {
    y.iter().zip(r.data()).map(|(&a, &b)| a * b as f64).sum()
}

fn widen(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn with_value(t: &Tensor, i: usize, v: f32) -> Tensor {
    let mut d = t.data().to_vec();
    d[i] = v;
    Tensor::from_vec(t.shape(), d).expect("same shape")
}

/// Perturbed copies of `t` at index `i` and the exact step between them.
fn stencil(t: &Tensor, i: usize, eps: f64) -> (Tensor, Tensor, f64) {
    let v = t.data()[i] as f64;
    let (hi, lo) = ((v + eps) as f32, (v - eps) as f32);
    (with_value(t, i, hi), with_value(t, i, lo), hi as f64 - lo as f64)
}

fn sample(rng: &mut ChaCha8Rng, len: usize, count: usize) -> Vec<usize> {
    if len <= count {
        (0..len).collect()
    } else {
        (0..count).map(|_| rng.gen_range(0..len)).collect()
    }
}

fn vec_tensor(v: &[f32]) -> Tensor {
    Tensor::from_vec(Shape4::new(1, v.len(), 1, 1), v.to_vec()).expect("non-empty")
}

pub fn check_conv(cfg: &GradcheckConfig, groups: usize) -> Result<SuiteReport> {
    let mut rng = seeded(cfg.seed ^ (0xC0 + groups as u64));
    let mut rep = SuiteReport::new(format!("conv g={groups}"));
    for case in 0..cfg.cases {
        let k = if rng.gen_bool(0.5) { 3 } else { 1 };
        let pad = if k == 3 { rng.gen_range(0..=1) } else { 0 };
        let spec = ConvSpec::new(groups * rng.gen_range(1..=2), groups * rng.gen_range(1..=2), k)
            .stride(rng.gen_range(1..=2))
            .pad(pad)
            .groups(groups);
        let shape = Shape4::new(rng.gen_range(1..=2), spec.in_channels, rng.gen_range(3..=6), rng.gen_range(3..=6));
        let seed = rng.gen();
        let x = random_tensor(shape, seed);
        let w = random_tensor(spec.weight_shape(), seed + 1);
        let b = random_tensor(Shape4::new(1, spec.out_channels, 1, 1), seed + 2);
        let r = random_tensor(spec.output_shape(shape)?, seed + 3);
        let loss = |x: &Tensor, w: &Tensor, b: &Tensor| -> Result<f64> {
            Ok(project(&conv2d_f64(x, &spec, w.data(), b.data())?.1, &r))
        };
        let g = conv2d_backward(&r, &x, &spec, &w)?;
        let grad_b = vec_tensor(&g.grad_b);
        rep.cases += 1;
        for (name, which, grad) in [("x", 0, &g.grad_x), ("w", 1, &g.grad_w), ("b", 2, &grad_b)] {
            let base = [&x, &w, &b][which];
            for i in sample(&mut rng, base.len(), cfg.coords) {
                let (hi, lo, step) = stencil(base, i, cfg.eps);
                let eval = |t: &Tensor| match which {
                    0 => loss(t, &w, &b),
                    1 => loss(&x, t, &b),
                    _ => loss(&x, &w, t),
                };
                let numeric = (eval(&hi)? - eval(&lo)?) / step;
                rep.record(grad.data()[i] as f64, numeric, || format!("case {case} {name}[{i}] {spec:?}"));
            }
        }
    }
    Ok(rep)
}

/// Training-mode batch normalization, whose statistics depend on the input.
pub fn check_batchnorm(cfg: &GradcheckConfig) -> Result<SuiteReport> {
    let mut rng = seeded(cfg.seed ^ 0xB0);
    let mut rep = SuiteReport::new("batchnorm");
    for case in 0..cfg.cases {
        let shape = Shape4::new(rng.gen_range(2..=3), rng.gen_range(1..=4), rng.gen_range(2..=4), rng.gen_range(2..=4));
        let seed = rng.gen();
        let x = random_tensor(shape, seed).scale(2.0);
        let c = Shape4::new(1, shape.c, 1, 1);
        let gamma = random_tensor(c, seed + 1);
        let beta = random_tensor(c, seed + 2);
        let r = random_tensor(shape, seed + 3);
        let params = |g: &Tensor, b: &Tensor| BnParams {
            gamma: g.data().to_vec(),
            beta: b.data().to_vec(),
            ..BnParams::identity(shape.c)
        };
        let loss = |x: &Tensor, g: &Tensor, b: &Tensor| -> Result<f64> {
            Ok(project(&batchnorm_train_f64(x, &params(g, b))?, &r))
        };
        let p = params(&gamma, &beta);
        let (_, stats) = batchnorm_train(&x, &mut p.clone())?;
        let g = batchnorm_backward(&r, &x, &p, Some(&stats))?;
        let (gg, gb) = (vec_tensor(&g.grad_gamma), vec_tensor(&g.grad_beta));
        rep.cases += 1;
        for (name, which, grad) in [("x", 0, &g.grad_x), ("gamma", 1, &gg), ("beta", 2, &gb)] {
            let base = [&x, &gamma, &beta][which];
            for i in sample(&mut rng, base.len(), cfg.coords) {
                let (hi, lo, step) = stencil(base, i, cfg.eps);
                let eval = |t: &Tensor| match which {
                    0 => loss(t, &gamma, &beta),
                    1 => loss(&x, t, &beta),
                    _ => loss(&x, &gamma, t),
                };
                let numeric = (eval(&hi)? - eval(&lo)?) / step;
                rep.record(grad.data()[i] as f64, numeric, || format!("case {case} {name}[{i}] {shape}"));
            }
        }
    }
    Ok(rep)
}

pub fn check_relu(cfg: &GradcheckConfig) -> Result<SuiteReport> {
    let mut rng = seeded(cfg.seed ^ 0xA0);
    let mut rep = SuiteReport::new("relu");
    for case in 0..cfg.cases {
        let shape = Shape4::new(1, rng.gen_range(1..=4), rng.gen_range(2..=5), rng.gen_range(2..=5));
        let seed = rng.gen();
        let x = random_tensor(shape, seed);
        let r = random_tensor(shape, seed + 1);
        let g = relu_backward(&r, &x)?;
        rep.cases += 1;
        for i in sample(&mut rng, x.len(), cfg.coords) {
            if (x.data()[i] as f64).abs() <= cfg.eps {
                rep.skipped += 1;
                continue;
            }
            let (hi, lo, step) = stencil(&x, i, cfg.eps);
            let numeric = (project(&widen(&relu(&hi)), &r) - project(&widen(&relu(&lo)), &r)) / step;
            rep.record(g.data()[i] as f64, numeric, || format!("case {case} x[{i}]"));
        }
    }
    Ok(rep)
}

/// Two-branch miniature detector: feature maps of 3×3 and 2×2 cells, each
/// with a 3×3 loc conv and a 3×3 conf conv, scored by the multibox loss.
struct MiniDetector {
    specs: [ConvSpec; 4],
    priors: Vec<PriorBox>,
}

const MINI_CHANNELS: usize = 8;
const MINI_CLASSES: usize = 3;
const MINI_MAPS: [usize; 2] = [3, 2];

impl MiniDetector {
    fn new() -> Result<Self> {
        let head = |out| ConvSpec::new(MINI_CHANNELS, out, 3).pad(1);
        let priors = generate_priors(&PriorConfig {
            map_sizes: MINI_MAPS.to_vec(),
            anchors_per_cell: vec![4, 4],
            ..Default::default()
        })?;
        Ok(Self { specs: [head(16), head(4 * MINI_CLASSES), head(16), head(4 * MINI_CLASSES)], priors })
    }

    /// Loss and gradients for tensors ordered as: feature 0, feature 1, then
    /// weight and bias of loc0, conf0, loc1, conf1. Head gradients come back
    /// shaped like the heads.
    fn loss(&self, t: &[Tensor], matches: &[MatchResult]) -> Result<(MultiboxLoss, Vec<HeadOutput>)> {
        let mut outs = Vec::with_capacity(4);
        for (k, spec) in self.specs.iter().enumerate() {
            outs.push(conv2d_f64(&t[k / 2], spec, t[2 + 2 * k].data(), t[3 + 2 * k].data())?);
        }
        let shapes = [(outs[0].0, outs[1].0), (outs[2].0, outs[3].0)];
        let values = [(outs[0].1.as_slice(), outs[1].1.as_slice()), (outs[2].1.as_slice(), outs[3].1.as_slice())];
        let loss = multibox_loss(&flatten_values(&shapes, &values)?, matches, NEG_POS_RATIO)?;
        let like: Vec<HeadOutput> = shapes
            .iter()
            .map(|&(l, c)| Ok(HeadOutput { loc: Tensor::zeros(l)?, conf: Tensor::zeros(c)? }))
            .collect::<Result<_>>()?;
        let grads = unflatten_heads(&like, &loss.grad_loc, &loss.grad_conf)?;
        Ok((loss, grads))
    }
}

pub fn check_multibox(cfg: &GradcheckConfig) -> Result<SuiteReport> {
    let mut rng = seeded(cfg.seed ^ 0xD0);
    let mut rep = SuiteReport::new("multibox loss");
    let det = MiniDetector::new()?;
    for case in 0..cfg.cases {
        let seed: u64 = rng.gen();
        let mut t = vec![
            random_tensor(Shape4::new(1, MINI_CHANNELS, MINI_MAPS[0], MINI_MAPS[0]), seed),
            random_tensor(Shape4::new(1, MINI_CHANNELS, MINI_MAPS[1], MINI_MAPS[1]), seed + 1),
        ];
        for (k, spec) in det.specs.iter().enumerate() {
            t.push(random_tensor(spec.weight_shape(), seed + 10 + k as u64).scale(0.3));
            t.push(random_tensor(Shape4::new(1, spec.out_channels, 1, 1), seed + 20 + k as u64).scale(0.1));
        }
        let gts: Vec<GroundTruth> = (0..rng.gen_range(1..=2))
            .map(|_| {
                let (w, h) = (rng.gen_range(0.2..0.6), rng.gen_range(0.2..0.6));
                let (x, y) = (rng.gen_range(0.0..1.0 - w), rng.gen_range(0.0..1.0 - h));
                GroundTruth { class_id: rng.gen_range(1..MINI_CLASSES), bbox: BBox::new(x, y, x + w, y + h) }
            })
            .collect();
        let matches = vec![match_priors(&gts, &det.priors, MATCH_IOU)?];
        let eval = |t: &[Tensor]| -> Result<(f64, Vec<Vec<usize>>)> {
            let (l, _) = det.loss(t, &matches)?;
            Ok((l.loss, l.negatives))
        };

        let (base, head_grads) = det.loss(&t, &matches)?;
        let mut grads: Vec<Tensor> = vec![Tensor::zeros(t[0].shape())?, Tensor::zeros(t[1].shape())?];
        for (k, spec) in det.specs.iter().enumerate() {
            let (branch, out) = (k / 2, &head_grads[k / 2]);
            let g_out = if k % 2 == 0 { &out.loc } else { &out.conf };
            let g = conv2d_backward(g_out, &t[branch], spec, &t[2 + 2 * k])?;
            grads[branch] = grads[branch].add(&g.grad_x)?;
            grads.push(g.grad_w);
            grads.push(vec_tensor(&g.grad_b));
        }
        rep.cases += 1;
        for which in 0..t.len() {
            for i in sample(&mut rng, t[which].len(), cfg.coords) {
                let (hi, lo, step) = stencil(&t[which], i, cfg.eps);
                let mut plus = t.clone();
                plus[which] = hi;
                let mut minus = t.clone();
                minus[which] = lo;
                let ((lp, np), (lm, nm)) = (eval(&plus)?, eval(&minus)?);
                if np != base.negatives || nm != base.negatives {
                    rep.skipped += 1;
                    continue;
                }
                let numeric = (lp - lm) / step;
                rep.record(grads[which].data()[i] as f64, numeric, || format!("case {case} tensor {which}[{i}]"));
            }
        }
    }
    Ok(rep)
}

/// Conv with 1, 2 and 16 groups, batch norm, ReLU and the multibox loss.
pub fn run_all(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let suites = vec![
        check_conv(cfg, 1)?,
        check_conv(cfg, 2)?,
        check_conv(cfg, 16)?,
        check_batchnorm(cfg)?,
        check_relu(cfg)?,
        check_multibox(cfg)?,
    ];
    Ok(GradcheckReport { eps: cfg.eps, tol: cfg.tol, suites })
}
