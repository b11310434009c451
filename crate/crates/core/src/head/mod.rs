//! Center prediction head, box decoding and the training losses.

pub mod boxes;
pub mod loss;
pub mod net;

pub use boxes::{decode_box, encode_box, BBox, CellTarget, ScoreMaps};
pub use loss::{focal_loss, giou_loss, l1_loss, similarity_loss, total_loss, LossTerms, LossWeights};
pub use net::{Branch, CenterHead, HeadConfig, HeadOutput};
