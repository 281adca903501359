use serde::{Deserialize, Serialize};

use super::bbox::{decode_box, BBox, PriorBox};
use super::nms::{nms, rank_by_score};
use crate::error::{Error, Result};
use crate::graph::HeadOutput;
use crate::tensor::{Shape4, Tensor};

/// Head outputs gathered into prior-major order: `loc[(n·P + p)·4 + k]` and
/// `conf[(n·P + p)·C + c]`. Prior `p` of a branch at cell `(i, j)` and anchor
/// `a` reads channel `a·4 + k` (loc) or `a·C + c` (conf).
#[derive(Clone, Debug, PartialEq)]
pub struct FlatHeads {
    pub batch: usize,
    pub priors: usize,
    pub num_classes: usize,
    pub loc: Vec<f64>,
    pub conf: Vec<f64>,
}

impl FlatHeads {
    pub fn loc_at(&self, n: usize, p: usize) -> [f64; 4] {
        let o = (n * self.priors + p) * 4;
        [0, 1, 2, 3].map(|k| self.loc[o + k])
    }

    pub fn conf_at(&self, n: usize, p: usize) -> &[f64] {
        let o = (n * self.priors + p) * self.num_classes;
        &self.conf[o..o + self.num_classes]
    }
}

struct BranchLayout {
    anchors: usize,
    h: usize,
    w: usize,
    base: usize,
}

fn layout(shapes: &[(Shape4, Shape4)]) -> Result<(usize, usize, usize, Vec<BranchLayout>)> {
    let first = shapes.first().ok_or_else(|| Error::ShapeMismatch("no head outputs".into()))?;
    let batch = first.0.n;
    let mut num_classes = None;
    let mut base = 0;
    let mut out = Vec::with_capacity(shapes.len());
    for (b, &(l, c)) in shapes.iter().enumerate() {
        if l.c % 4 != 0 || (l.n, l.h, l.w) != (c.n, c.h, c.w) || l.n != batch {
            return Err(Error::ShapeMismatch(format!("branch {b}: loc {l} and conf {c} do not pair")));
        }
        let anchors = l.c / 4;
        if c.c % anchors != 0 {
            return Err(Error::ShapeMismatch(format!("branch {b}: conf {c} is not a multiple of {anchors} anchors")));
        }
        let classes = c.c / anchors;
        if *num_classes.get_or_insert(classes) != classes {
            return Err(Error::ShapeMismatch(format!("branch {b} predicts {classes} classes")));
        }
        out.push(BranchLayout { anchors, h: l.h, w: l.w, base });
        base += l.h * l.w * anchors;
    }
    Ok((batch, base, num_classes.unwrap_or(0), out))
}

fn head_shapes(heads: &[HeadOutput]) -> Vec<(Shape4, Shape4)> {
    heads.iter().map(|h| (h.loc.shape(), h.conf.shape())).collect()
}

/// Calls `f(branch, n, prior, anchor, cell)` for every prediction in head order.
fn for_each_cell(lay: &[BranchLayout], batch: usize, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
    for (b, br) in lay.iter().enumerate() {
        for n in 0..batch {
            for i in 0..br.h {
                for j in 0..br.w {
                    for a in 0..br.anchors {
                        let p = br.base + (i * br.w + j) * br.anchors + a;
                        f(b, n, p, a, i * br.w + j);
                    }
                }
            }
        }
    }
}

pub fn flatten_heads(heads: &[HeadOutput]) -> Result<FlatHeads> {
    let values: Vec<(Vec<f64>, Vec<f64>)> = heads
        .iter()
        .map(|h| (h.loc.data().iter().map(|&v| v as f64).collect(), h.conf.data().iter().map(|&v| v as f64).collect()))
        .collect();
    let refs: Vec<(&[f64], &[f64])> = values.iter().map(|(l, c)| (l.as_slice(), c.as_slice())).collect();
    flatten_values(&head_shapes(heads), &refs)
}

/// [`flatten_heads`] over raw NCHW buffers of the given `(loc, conf)` shapes.
pub fn flatten_values(shapes: &[(Shape4, Shape4)], values: &[(&[f64], &[f64])]) -> Result<FlatHeads> {
    let (batch, priors, num_classes, lay) = layout(shapes)?;
    if values.len() != shapes.len()
        || values.iter().zip(shapes).any(|((l, c), (ls, cs))| l.len() != ls.numel() || c.len() != cs.numel())
    {
        return Err(Error::ShapeMismatch("head buffers do not match their shapes".into()));
    }
    let mut loc = vec![0.0f64; batch * priors * 4];
    let mut conf = vec![0.0f64; batch * priors * num_classes];
    for_each_cell(&lay, batch, |b, n, p, a, cell| {
        let (ls, cs) = shapes[b];
        let (lv, cv) = values[b];
        for k in 0..4 {
            loc[(n * priors + p) * 4 + k] = lv[ls.offset(n, a * 4 + k, 0, 0) + cell];
        }
        for c in 0..num_classes {
            conf[(n * priors + p) * num_classes + c] = cv[cs.offset(n, a * num_classes + c, 0, 0) + cell];
        }
    });
    Ok(FlatHeads { batch, priors, num_classes, loc, conf })
}

/// Scatters prior-major gradients back into tensors shaped like `heads`.
pub fn unflatten_heads(heads: &[HeadOutput], loc: &[f32], conf: &[f32]) -> Result<Vec<HeadOutput>> {
    let (batch, priors, num_classes, lay) = layout(&head_shapes(heads))?;
    if loc.len() != batch * priors * 4 || conf.len() != batch * priors * num_classes {
        return Err(Error::ShapeMismatch("flat gradient length does not match heads".into()));
    }
    let mut bufs: Vec<(Vec<f32>, Vec<f32>)> =
        heads.iter().map(|h| (vec![0.0; h.loc.len()], vec![0.0; h.conf.len()])).collect();
    for_each_cell(&lay, batch, |b, n, p, a, cell| {
        let (ls, cs) = (heads[b].loc.shape(), heads[b].conf.shape());
        for k in 0..4 {
            bufs[b].0[ls.offset(n, a * 4 + k, 0, 0) + cell] = loc[(n * priors + p) * 4 + k];
        }
        for c in 0..num_classes {
            bufs[b].1[cs.offset(n, a * num_classes + c, 0, 0) + cell] = conf[(n * priors + p) * num_classes + c];
        }
    });
    heads
        .iter()
        .zip(bufs)
        .map(|(h, (l, c))| {
            Ok(HeadOutput { loc: Tensor::from_vec(h.loc.shape(), l)?, conf: Tensor::from_vec(h.conf.shape(), c)? })
        })
        .collect()
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let e: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.into_iter().map(|v| v / sum).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_id: usize,
    pub score: f64,
    pub bbox: BBox,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectConfig {
    pub conf_thresh: f64,
    pub nms_thresh: f64,
    pub top_k: usize,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self { conf_thresh: 0.01, nms_thresh: 0.45, top_k: 200 }
    }
}

/// Detections per image. Class 0 is background and never reported.
pub fn detect(heads: &[HeadOutput], priors: &[PriorBox], cfg: &DetectConfig) -> Result<Vec<Vec<Detection>>> {
    let flat = flatten_heads(heads)?;
    if flat.priors != priors.len() {
        return Err(Error::ShapeMismatch(format!(
            "heads imply {} priors but {} were generated",
            flat.priors,
            priors.len()
        )));
    }
    Ok((0..flat.batch).map(|n| detect_image(&flat, n, priors, cfg)).collect())
}

fn detect_image(flat: &FlatHeads, n: usize, priors: &[PriorBox], cfg: &DetectConfig) -> Vec<Detection> {
    let probs: Vec<Vec<f64>> = (0..flat.priors).map(|p| softmax(flat.conf_at(n, p))).collect();
    let mut boxes: Vec<Option<BBox>> = vec![None; flat.priors];
    let mut all = Vec::new();
    for class in 1..flat.num_classes {
        let cand: Vec<usize> = (0..flat.priors).filter(|&p| probs[p][class] > cfg.conf_thresh).collect();
        let dets: Vec<(BBox, f64)> = cand
            .iter()
            .map(|&p| {
                let b = *boxes[p].get_or_insert_with(|| decode_box(flat.loc_at(n, p), &priors[p]).clip());
                (b, probs[p][class])
            })
            .collect();
        for k in nms(&dets, cfg.nms_thresh, cfg.top_k) {
            all.push(Detection { class_id: class, score: dets[k].1, bbox: dets[k].0 });
        }
    }
    let scores: Vec<f64> = all.iter().map(|d| d.score).collect();
    rank_by_score(&scores).into_iter().take(cfg.top_k).map(|i| all[i]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::random_tensor;
    use crate::ssd::bbox::encode_box;

    fn unit_priors(n: usize) -> Vec<PriorBox> {
        (0..n).map(|i| PriorBox { cx: 0.5, cy: 0.5, w: 0.1 + 0.01 * (i % 10) as f64, h: 0.2 }).collect()
    }

    #[test]
    fn flatten_roundtrip() {
        let hs: Vec<HeadOutput> = [(3usize, 4usize), (2, 6)]
            .iter()
            .enumerate()
            .map(|(s, &(size, a))| HeadOutput {
                loc: random_tensor(Shape4::new(2, 4 * a, size, size), s as u64),
                conf: random_tensor(Shape4::new(2, 5 * a, size, size), 10 + s as u64),
            })
            .collect();
        let flat = flatten_heads(&hs).unwrap();
        assert_eq!(flat.priors, 9 * 4 + 4 * 6);
        assert_eq!(flat.num_classes, 5);
        // prior (i=1, j=2, a=3) on the first map, image 1
        let p = (3 + 2) * 4 + 3;
        assert_eq!(flat.loc_at(1, p)[2] as f32, hs[0].loc.get(1, 3 * 4 + 2, 1, 2));
        assert_eq!(flat.conf_at(1, p)[4] as f32, hs[0].conf.get(1, 3 * 5 + 4, 1, 2));
        let narrow = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
        let back = unflatten_heads(&hs, &narrow(&flat.loc), &narrow(&flat.conf)).unwrap();
        assert_eq!(back, hs);
    }

    #[test]
    fn background_logits_give_nothing() {
        let hs = vec![HeadOutput {
            loc: random_tensor(Shape4::new(1, 16, 2, 2), 3),
            conf: Tensor::from_fn(Shape4::new(1, 84, 2, 2), |_, c, _, _| if c % 21 == 0 { 10.0 } else { 0.0 }).unwrap(),
        }];
        let dets = detect(&hs, &unit_priors(16), &DetectConfig::default()).unwrap();
        assert!(dets[0].is_empty());
    }

    #[test]
    fn single_dominant_prior() {
        let priors: Vec<PriorBox> =
            (0..4).map(|a| PriorBox { cx: 0.5, cy: 0.5, w: 0.2 + 0.1 * a as f64, h: 0.3 }).collect();
        let target = BBox::new(0.3, 0.35, 0.6, 0.7);
        let enc = encode_box(&target, &priors[2]).unwrap();
        let ls = Shape4::new(1, 16, 1, 1);
        let cs = Shape4::new(1, 84, 1, 1);
        let loc = Tensor::from_fn(ls, |_, c, _, _| if c / 4 == 2 { enc[c % 4] as f32 } else { 0.0 }).unwrap();
        let conf = Tensor::from_fn(cs, |_, c, _, _| {
            let (a, k) = (c / 21, c % 21);
            if a == 2 && k == 7 {
                20.0
            } else if k == 0 {
                10.0
            } else {
                0.0
            }
        })
        .unwrap();
        let dets =
            detect(&[HeadOutput { loc, conf }], &priors, &DetectConfig { conf_thresh: 0.5, ..Default::default() })
                .unwrap();
        assert_eq!(dets[0].len(), 1);
        let d = dets[0][0];
        assert_eq!(d.class_id, 7);
        assert!(d.score > 0.99);
        for (a, b) in [(d.bbox.xmin, 0.3), (d.bbox.ymin, 0.35), (d.bbox.xmax, 0.6), (d.bbox.ymax, 0.7)] {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn output_capped_and_count_checked() {
        let hs = vec![HeadOutput {
            loc: random_tensor(Shape4::new(1, 16, 4, 4), 1),
            conf: random_tensor(Shape4::new(1, 84, 4, 4), 2),
        }];
        let priors: Vec<PriorBox> = (0..64)
            .map(|i| PriorBox { cx: (i % 8) as f64 / 8.0 + 0.06, cy: (i / 8) as f64 / 8.0 + 0.06, w: 0.1, h: 0.1 })
            .collect();
        let cfg = DetectConfig { conf_thresh: 0.0, nms_thresh: 0.45, top_k: 7 };
        let dets = detect(&hs, &priors, &cfg).unwrap();
        assert_eq!(dets[0].len(), 7);
        assert!(dets[0].windows(2).all(|w| w[0].score >= w[1].score));
        assert!(matches!(detect(&hs, &priors[..10], &cfg), Err(Error::ShapeMismatch(_))));
    }
}
