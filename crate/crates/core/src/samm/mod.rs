//! Spatial alignment and masking: flow/mask prediction per level, the
//! iterative alignment loop, bilinear warping and mask gathering.

mod align;
mod masks;
mod warp;

pub use align::{iterative_align_var, warp_blend, Aligned, PinnedMask, Samm, SammConfig, SammLevel, StepPredictor};
pub use masks::{
    accumulate_mask, accumulate_mask_var, gather_masks, gather_masks_var, upsample_mask, GatheredMask, MaskLevel,
    RANGE_TOLERANCE,
};
pub use warp::{grid_sample, grid_sample_var, FlowField};
