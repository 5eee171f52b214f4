//! Comparison operators: filters predicted by an MLP of the offset, and the
//! voxelize / extend / restrict pipeline.

mod pcc;
mod voxel;

pub use pcc::{pcc_forward, pcc_forward_features, Dense, DEFAULT_HIDDEN, MlpFilter, PccGrads, PccLayer};
pub use voxel::{
    restrict, subvoxel_discrimination, voxel_translation_defect, voxelize_extend, voxelize_to_cloud,
    DiscriminationReport, GridSpec, VoxelGrid, VoxelizedCloud,
};
