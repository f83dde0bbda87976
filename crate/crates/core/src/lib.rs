//! Point cloud reconstruction library.
//!
//! The pipeline converts a sparse, noisy point cloud into a dense, accurate
//! one in two stages. Stage 1 voxelizes the input and runs a sparse stacked
//! hourglass network that generates and prunes voxels (densification plus
//! outlier removal). Stage 2 converts the surviving discrete voxels back
//! into continuous points: for each voxel it gathers its nearest neighbors
//! through the voxel hash index, encodes relative positions with a
//! distance-amplified sinusoidal encoding, runs self- and cross-attention,
//! and regresses a bounded sub-cell offset.
//!
//! Everything is built on a small f64 reverse-mode tape ([`tensor`]) so the
//! whole pipeline is differentiable end to end and cheap to verify with
//! finite-difference gradient checks.

pub mod cloud;
pub mod data;
pub mod metrics;
pub mod reloc;
pub mod tensor;
pub mod train;
pub mod voxel;
