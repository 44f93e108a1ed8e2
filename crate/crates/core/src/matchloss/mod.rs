//! Tube-level set supervision: matching cost, assignment and losses.

mod hungarian;
mod losses;

pub use hungarian::{hungarian, Assignment};
pub use losses::{
    classification_loss, downsample_annotations, downsample_majority, matching_cost, segmentation_loss,
    stage_loss, total_loss, tube_bce_loss, tube_dice_loss, LossWeights, SegmentationLoss,
};
