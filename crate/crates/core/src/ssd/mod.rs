//! Priors, box coding, suppression, detection, training loss and mAP.

mod bbox;
mod detect;
mod eval;
mod loss;
mod matching;
mod nms;
mod prior;
pub mod records;

pub use bbox::{decode_box, encode_box, iou, BBox, PriorBox, VARIANCES};
pub use detect::{detect, flatten_heads, flatten_values, unflatten_heads, DetectConfig, Detection, FlatHeads};
pub use eval::{average_precision, evaluate_map, pr_curve, ApMethod, ClassAp, MapReport};
pub use loss::{multibox_loss, multibox_loss_heads, smooth_l1, MultiboxLoss, NEG_POS_RATIO};
pub use matching::{match_priors, GroundTruth, MatchResult};
pub use nms::{nms, rank_by_score};
pub use prior::{generate_priors, PriorConfig};

pub const MATCH_IOU: f64 = 0.5;
