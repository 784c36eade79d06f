//! Anchor lifecycle: voxel initialization, decoding into neural Gaussians,
//! and ID-preserving grow/prune.

mod grid;
mod heads;

pub use grid::{
    grow_anchors, offset_pattern, prune_anchors, prune_mask, voxelize_init, AnchorGrid,
    GrowFeatureInit, GrowPruneStats, VoxelKey,
};
pub use heads::{
    decode_anchor, decode_anchor_cached, heads_backward, AnchorGrad, DecodeCache, HeadParameters,
    Mlp, PrimitiveGrad, COV_OUTPUTS, HIDDEN_WIDTH,
};
