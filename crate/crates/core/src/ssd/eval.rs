use std::collections::BTreeMap;

use serde::Serialize;

use super::bbox::iou;
use super::detect::Detection;
use super::matching::GroundTruth;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ApMethod {
    /// Area under the monotone precision envelope.
    AllPoints,
    /// Mean of the envelope sampled at recall 0, 0.1, ..., 1.
    ElevenPoint,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassAp {
    pub class_id: usize,
    pub ap: f64,
    pub num_gt: usize,
    pub num_det: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MapReport {
    pub per_class: Vec<ClassAp>,
    pub map: f64,
    pub iou_thresh: f64,
    pub method: ApMethod,
}

/// Precision and recall after each detection of one class, ranked by score.
/// A detection is a true positive when its best-overlapping ground truth in
/// the same image reaches `iou_thresh` and has not been claimed yet.
pub fn pr_curve(
    dets: &[(usize, Detection)],
    gts: &[Vec<GroundTruth>],
    class_id: usize,
    iou_thresh: f64,
) -> (Vec<f64>, Vec<f64>) {
    let num_gt: usize = gts.iter().map(|g| g.iter().filter(|t| t.class_id == class_id).count()).sum();
    let mut ranked: Vec<&(usize, Detection)> = dets.iter().filter(|(_, d)| d.class_id == class_id).collect();
    ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut precision = Vec::with_capacity(ranked.len());
    let mut recall = Vec::with_capacity(ranked.len());
    for (img, det) in ranked {
        let mut best: Option<(usize, f64)> = None;
        if let Some(image_gts) = gts.get(*img) {
            for (g, t) in image_gts.iter().enumerate() {
                if t.class_id != class_id {
                    continue;
                }
                let v = iou(&det.bbox, &t.bbox);
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
        }
        match best {
            Some((g, v)) if v >= iou_thresh && !used[*img][g] => {
                used[*img][g] = true;
                tp += 1;
            }
            _ => fp += 1,
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(if num_gt == 0 { 0.0 } else { tp as f64 / num_gt as f64 });
    }
    (precision, recall)
}

pub fn average_precision(precision: &[f64], recall: &[f64], method: ApMethod) -> f64 {
    match method {
        ApMethod::AllPoints => {
            let mut mrec = vec![0.0];
            mrec.extend_from_slice(recall);
            mrec.push(1.0);
            let mut mpre = vec![0.0];
            mpre.extend_from_slice(precision);
            mpre.push(0.0);
            for i in (0..mpre.len() - 1).rev() {
                mpre[i] = mpre[i].max(mpre[i + 1]);
            }
            (1..mrec.len()).map(|i| (mrec[i] - mrec[i - 1]) * mpre[i]).sum()
        }
        ApMethod::ElevenPoint => {
            (0..=10)
                .map(|t| {
                    let t = t as f64 / 10.0;
                    recall.iter().zip(precision).filter(|(r, _)| **r >= t).map(|(_, p)| *p).fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
    }
}

/// VOC-style mean AP over classes that have at least one ground truth.
/// `dets[i]` and `gts[i]` belong to image `i`; class 0 is ignored.
pub fn evaluate_map(dets: &[Vec<Detection>], gts: &[Vec<GroundTruth>], iou_thresh: f64, method: ApMethod) -> MapReport {
    let flat: Vec<(usize, Detection)> =
        dets.iter().enumerate().flat_map(|(i, ds)| ds.iter().map(move |d| (i, *d))).collect();
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for t in gts.iter().flatten().filter(|t| t.class_id != 0) {
        *counts.entry(t.class_id).or_default() += 1;
    }
    let per_class: Vec<ClassAp> = counts
        .iter()
        .map(|(&class_id, &num_gt)| {
            let (p, r) = pr_curve(&flat, gts, class_id, iou_thresh);
            ClassAp { class_id, ap: average_precision(&p, &r, method), num_gt, num_det: p.len() }
        })
        .collect();
    let map =
        if per_class.is_empty() { 0.0 } else { per_class.iter().map(|c| c.ap).sum::<f64>() / per_class.len() as f64 };
    MapReport { per_class, map, iou_thresh, method }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssd::bbox::BBox;
    use proptest::prelude::*;

    fn gt(c: usize, b: BBox) -> GroundTruth {
        GroundTruth { class_id: c, bbox: b }
    }

    fn det(c: usize, score: f64, b: BBox) -> Detection {
        Detection { class_id: c, score, bbox: b }
    }

    fn b(x: f64, y: f64) -> BBox {
        BBox::new(x, y, x + 0.2, y + 0.2)
    }

    #[test]
    fn perfect_and_empty() {
        let gts = vec![vec![gt(1, b(0.1, 0.1)), gt(2, b(0.5, 0.5))], vec![gt(1, b(0.3, 0.3))]];
        let dets: Vec<Vec<Detection>> =
            gts.iter().map(|g| g.iter().map(|t| det(t.class_id, 1.0, t.bbox)).collect()).collect();
        for method in [ApMethod::AllPoints, ApMethod::ElevenPoint] {
            assert!((evaluate_map(&dets, &gts, 0.5, method).map - 1.0).abs() < 1e-12);
            assert_eq!(evaluate_map(&[vec![], vec![]], &gts, 0.5, method).map, 0.0);
        }
    }

    #[test]
    fn three_image_hand_case() {
        // class 1: three ground truths over three images
        let gts = vec![vec![gt(1, b(0.1, 0.1))], vec![gt(1, b(0.5, 0.5))], vec![gt(1, b(0.2, 0.6))]];
        let dets = vec![
            vec![det(1, 0.9, b(0.1, 0.1)), det(1, 0.6, b(0.1, 0.1))],
            vec![det(1, 0.8, b(0.0, 0.7))],
            vec![det(1, 0.7, b(0.2, 0.6))],
        ];
        // ranked: 0.9 TP, 0.8 FP, 0.7 TP, 0.6 FP (duplicate)
        // precision 1, 1/2, 2/3, 2/4; recall 1/3, 1/3, 2/3, 2/3
        let r = evaluate_map(&dets, &gts, 0.5, ApMethod::AllPoints);
        let expect = (1.0 / 3.0) * 1.0 + (1.0 / 3.0) * (2.0 / 3.0);
        assert!((r.map - expect).abs() < 1e-9);
        let r11 = evaluate_map(&dets, &gts, 0.5, ApMethod::ElevenPoint);
        let expect11 = (4.0 * 1.0 + 3.0 * (2.0 / 3.0)) / 11.0;
        assert!((r11.map - expect11).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn adding_a_true_positive_never_lowers_ap(
            n_gt in 1usize..6,
            fps in prop::collection::vec((0.0f64..1.0, 0.0f64..0.7, 0.0f64..0.7), 0..8),
            tps in prop::collection::vec(0.0f64..1.0, 0..6),
            extra in 0.0f64..1.0,
        ) {
            let gts: Vec<GroundTruth> = (0..n_gt).map(|i| gt(1, b(0.15 * i as f64, 0.8))).collect();
            let mut dets: Vec<Detection> = fps.iter().map(|&(s, x, y)| det(1, s, BBox::new(x, y, x + 0.05, y + 0.05))).collect();
            let claimed = tps.len().min(n_gt - 1);
            for (i, &s) in tps.iter().take(claimed).enumerate() {
                dets.push(det(1, s, gts[i].bbox));
            }
            let before = evaluate_map(&[dets.clone()], std::slice::from_ref(&gts), 0.5, ApMethod::AllPoints).map;
            dets.push(det(1, extra, gts[claimed].bbox));
            let after = evaluate_map(&[dets], &[gts], 0.5, ApMethod::AllPoints).map;
            prop_assert!(after >= before - 1e-12);
        }
    }
}
