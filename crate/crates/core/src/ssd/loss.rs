use super::detect::{flatten_heads, softmax, unflatten_heads, FlatHeads};
use super::matching::MatchResult;
use crate::error::{Error, Result};
use crate::graph::HeadOutput;

pub const NEG_POS_RATIO: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct MultiboxLoss {
    pub loss: f64,
    pub loc_loss: f64,
    pub conf_loss: f64,
    pub num_positive: usize,
    /// Hard negatives chosen per image, in prior order.
    pub negatives: Vec<Vec<usize>>,
    /// Gradients in the prior-major layout of [`FlatHeads`].
    pub grad_loc: Vec<f32>,
    pub grad_conf: Vec<f32>,
}

pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// Cross-entropy of `label` under the softmax of `logits`.
fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = max + logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

/// Smooth-L1 over positive priors plus softmax cross-entropy over positives
/// and the hardest background priors, divided by the total positive count.
///
/// Each image mines `neg_pos_ratio · max(positives, 1)` negatives ranked by
/// background cross-entropy (ties to the lower prior). With no positives in
/// the batch the divisor is 1.
pub fn multibox_loss(flat: &FlatHeads, matches: &[MatchResult], neg_pos_ratio: usize) -> Result<MultiboxLoss> {
    if matches.len() != flat.batch {
        return Err(Error::ShapeMismatch(format!("{} match results for a batch of {}", matches.len(), flat.batch)));
    }
    if let Some(m) = matches.iter().find(|m| m.labels.len() != flat.priors) {
        return Err(Error::ShapeMismatch(format!(
            "match covers {} priors, heads have {}",
            m.labels.len(),
            flat.priors
        )));
    }
    let classes = flat.num_classes;
    let num_positive: usize = matches.iter().map(MatchResult::num_positive).sum();
    let norm = num_positive.max(1) as f64;

    let mut loc_loss = 0.0;
    let mut conf_loss = 0.0;
    let mut grad_loc = vec![0.0f32; flat.loc.len()];
    let mut grad_conf = vec![0.0f32; flat.conf.len()];
    let mut negatives = Vec::with_capacity(flat.batch);

    for (n, m) in matches.iter().enumerate() {
        let mut background: Vec<(usize, f64)> = (0..flat.priors)
            .filter(|&p| m.matched[p].is_none())
            .map(|p| (p, cross_entropy(flat.conf_at(n, p), 0)))
            .collect();
        background.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let want = neg_pos_ratio * m.num_positive().max(1);
        let mut hard: Vec<usize> = background.iter().take(want).map(|&(p, _)| p).collect();
        hard.sort_unstable();

        let positives = (0..flat.priors).filter(|&p| m.matched[p].is_some());
        for p in positives.clone() {
            let pred = flat.loc_at(n, p);
            for k in 0..4 {
                let d = pred[k] - m.targets[p][k];
                loc_loss += smooth_l1(d);
                grad_loc[(n * flat.priors + p) * 4 + k] = (smooth_l1_grad(d) / norm) as f32;
            }
        }
        for p in positives.chain(hard.iter().copied()) {
            let logits = flat.conf_at(n, p);
            let label = m.labels[p];
            if label >= classes {
                return Err(Error::Index(format!("label {label} with {classes} classes")));
            }
            conf_loss += cross_entropy(logits, label);
            let probs = softmax(logits);
            let base = (n * flat.priors + p) * classes;
            for (c, q) in probs.into_iter().enumerate() {
                let onehot = if c == label { 1.0 } else { 0.0 };
                grad_conf[base + c] = ((q - onehot) / norm) as f32;
            }
        }
        negatives.push(hard);
    }

    loc_loss /= norm;
    conf_loss /= norm;
    Ok(MultiboxLoss { loss: loc_loss + conf_loss, loc_loss, conf_loss, num_positive, negatives, grad_loc, grad_conf })
}

/// [`multibox_loss`] on head tensors, with gradients shaped like the heads.
pub fn multibox_loss_heads(
    heads: &[HeadOutput],
    matches: &[MatchResult],
    neg_pos_ratio: usize,
) -> Result<(MultiboxLoss, Vec<HeadOutput>)> {
    let flat = flatten_heads(heads)?;
    let loss = multibox_loss(&flat, matches, neg_pos_ratio)?;
    let grads = unflatten_heads(heads, &loss.grad_loc, &loss.grad_conf)?;
    Ok((loss, grads))
}
