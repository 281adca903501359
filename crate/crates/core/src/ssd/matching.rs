use serde::{Deserialize, Serialize};

use super::bbox::{encode_box, iou, BBox, PriorBox};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub class_id: usize,
    pub bbox: BBox,
}

/// Per-prior assignment for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// Matched ground-truth index, `None` for background.
    pub matched: Vec<Option<usize>>,
    /// Class label per prior, 0 for background.
    pub labels: Vec<usize>,
    /// Encoded offsets of the matched ground truth, zero for background.
    pub targets: Vec<[f64; 4]>,
}

impl MatchResult {
    pub fn num_positive(&self) -> usize {
        self.matched.iter().filter(|m| m.is_some()).count()
    }

    pub fn background(priors: usize) -> Self {
        Self { matched: vec![None; priors], labels: vec![0; priors], targets: vec![[0.0; 4]; priors] }
    }
}

/// Two-stage matching. First, ground truths and priors are paired greedily by
/// the highest remaining IoU so every ground truth owns a distinct prior.
/// Then each unassigned prior takes its best ground truth if that IoU reaches
/// `iou_match`. Ties go to the lower ground-truth, then prior, index.
pub fn match_priors(gts: &[GroundTruth], priors: &[PriorBox], iou_match: f64) -> Result<MatchResult> {
    let mut result = MatchResult::background(priors.len());
    if gts.is_empty() || priors.is_empty() {
        return Ok(result);
    }
    let boxes: Vec<BBox> = priors.iter().map(PriorBox::to_bbox).collect();
    let overlaps: Vec<Vec<f64>> = gts.iter().map(|g| boxes.iter().map(|p| iou(&g.bbox, p)).collect()).collect();

    let mut gt_done = vec![false; gts.len()];
    for _ in 0..gts.len().min(priors.len()) {
        let mut best: Option<(usize, usize, f64)> = None;
        for (g, row) in overlaps.iter().enumerate() {
            if gt_done[g] {
                continue;
            }
            for (p, &v) in row.iter().enumerate() {
                if result.matched[p].is_none() && best.is_none_or(|(_, _, b)| v > b) {
                    best = Some((g, p, v));
                }
            }
        }
        let Some((g, p, _)) = best else { break };
        gt_done[g] = true;
        result.matched[p] = Some(g);
    }

    for p in 0..priors.len() {
        if result.matched[p].is_some() {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for (g, row) in overlaps.iter().enumerate() {
            if best.is_none_or(|(_, b)| row[p] > b) {
                best = Some((g, row[p]));
            }
        }
        if let Some((g, v)) = best {
            if v >= iou_match {
                result.matched[p] = Some(g);
            }
        }
    }

    for p in 0..priors.len() {
        if let Some(g) = result.matched[p] {
            result.labels[p] = gts[g].class_id;
            result.targets[p] = encode_box(&gts[g].bbox, &priors[p])?;
        }
    }
    Ok(result)
}
