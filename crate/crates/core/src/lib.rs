//! Deformable-filter convolution for 3D point clouds.
//!
//! Learnable filters live at the anchors of a small 3D lattice and are
//! deformed to each neighbor's offset by trilinear interpolation. The crate
//! provides the operator (full and depthwise-separable) with analytic
//! gradients, radius neighborhood search, a toy layer stack with Adam, and
//! comparison baselines (MLP-predicted filters and voxelize/restrict).
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`). The aliases
//! below fix the scalar to `f64`, which the equivariance and gradient
//! tolerances are stated for; `*32` aliases exist for the single-precision
//! instantiation.


pub mod baselines;
pub mod deform;
pub mod error;
pub mod matrix;
pub mod nn;
pub mod pointcloud;
pub mod rng;
pub mod scalar;
pub mod spatial;

pub use error::{Error, Result};
pub use scalar::{Scalar, Vec3};

pub type Matrix = matrix::Matrix<f64>;
pub type PointCloud = pointcloud::PointCloud<f64>;
pub type Dataset = pointcloud::Dataset<f64>;
pub type NeighborTable = spatial::NeighborTable<f64>;
pub type AnchorGrid = deform::AnchorGrid<f64>;
pub type DeformableFilter = deform::DeformableFilter<f64>;
pub type SeparableFilter = deform::SeparableFilter<f64>;
pub type ConvLayerSpec = deform::ConvLayerSpec<f64>;
pub type LayerStack = nn::LayerStack<f64>;
pub type OptimizerState = nn::OptimizerState<f64>;
pub type MlpFilter = baselines::MlpFilter<f64>;
pub type VoxelGrid = baselines::VoxelGrid<f64>;

pub type Matrix32 = matrix::Matrix<f32>;
pub type PointCloud32 = pointcloud::PointCloud<f32>;
pub type NeighborTable32 = spatial::NeighborTable<f32>;
pub type AnchorGrid32 = deform::AnchorGrid<f32>;
pub type DeformableFilter32 = deform::DeformableFilter<f32>;
pub type SeparableFilter32 = deform::SeparableFilter<f32>;
pub type LayerStack32 = nn::LayerStack<f32>;
