use std::cmp::Ordering;

use super::bbox::{iou, BBox};

/// Indices sorted by descending score; equal scores keep the lower index first.
pub fn rank_by_score(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    order
}

/// Greedy non-maximum suppression. A candidate is dropped when its IoU with an
/// already kept box exceeds `iou_thresh`. Returns kept indices in score order.
pub fn nms(dets: &[(BBox, f64)], iou_thresh: f64, top_k: usize) -> Vec<usize> {
    let scores: Vec<f64> = dets.iter().map(|d| d.1).collect();
    let mut kept: Vec<usize> = Vec::new();
    for i in rank_by_score(&scores) {
        if kept.len() >= top_k {
            break;
        }
        if kept.iter().all(|&k| iou(&dets[k].0, &dets[i].0) <= iou_thresh) {
            kept.push(i);
        }
    }
    kept
}
