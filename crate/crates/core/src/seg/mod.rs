//! Coarse-to-fine segmentation decoder: a level-4 regressor predicts an
//! occupancy grid, then a residual regressor corrects it at each level on
//! the way up to full resolution.

mod decoder;
pub mod grid;
pub mod roi;

pub use decoder::{
    crop_mask, predict_levels, predict_mask, predict_slice, slice_features, train_initial, train_residual,
    train_seg, uncrop, CropBox, InitialAudit, LevelAudit, SegAudit, SegConfig, SegModel, SegTrainSlice, SliceFeatures,
    LEVELS,
};
pub use grid::{patch_average_downsample, upsample, LevelGrid};
pub use roi::{partition_roi, sample_roi, RoiLabel, RoiPartition};
