//! Voxel re-localization network.
//!
//! Converts the discrete voxels surviving stage 1 back into continuous
//! points: for every voxel it gathers the K nearest voxels through the
//! hash index, encodes features plus amplified positional encodings, runs
//! two self-attention blocks over the neighbor tokens and one
//! cross-attention block against the query token, and regresses a bounded
//! per-voxel offset Δv with `|Δv| < l_vox/2` per axis.

mod attention;
mod knn;
mod pe;
mod relocalize;

pub use attention::{attention_block, AttnBlockBound, AttnBlockParams};
pub use knn::{knn_brute_force, knn_shell, NeighborSet};
pub use pe::{amplified_pe, plain_pe, AmpPeConfig, PeMode};
pub use relocalize::{neighbor_sets, relocalize, relocalize_sets, RelocBound, RelocParams};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RelocError {
    #[error("cannot relocalize an empty voxel set")]
    EmptyVoxels,
}
