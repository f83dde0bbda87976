//! Sparse voxel representation with hash-based coordinate indexing,
//! sparse convolution, generative transposed convolution, pruning, and the
//! stacked hourglass generator.
//!
//! A [`VoxelGrid`] stores the occupied integer coordinates of one scale
//! level together with a coordinate→row hash index; empty space is
//! implicit. Per-voxel features live on the autodiff tape as an `[N×C]`
//! node aligned with the grid's row order, so all voxel network layers are
//! differentiable through both features and weights.

mod conv;
mod hourglass;
mod index;

pub use conv::{
    gen_transposed_conv, neighbor_rows, prune, sparse_conv, voxelize, PruneMode, Pruned,
    Stride, CHILD_OFFSETS, KERNEL_OFFSETS,
};
pub use hourglass::{
    sparse_interpolate, stacked_forward, GtOccupancy, HourglassBound, HourglassOut,
    HourglassParams, LevelGroup, PrunePolicy, StackedOut, DECODER_LEVELS, ENC_WIDTHS,
    OUT_WIDTH,
};
pub use index::CoordIndex;

use thiserror::Error;

/// Integer voxel coordinate in units of cells at some scale level.
/// Lexicographic ordering on (x, y, z) is the tie rule used everywhere.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VoxelCoord {
    pub x: i64,
    pub y: i64,
    pub z: i64,
}

impl VoxelCoord {
    pub fn new(x: i64, y: i64, z: i64) -> Self {
        Self { x, y, z }
    }

    pub fn offset(self, dx: i64, dy: i64, dz: i64) -> Self {
        Self::new(self.x + dx, self.y + dy, self.z + dz)
    }

    /// Parent coordinate one scale up (floor division toward −∞).
    pub fn parent(self) -> Self {
        Self::new(
            self.x.div_euclid(2),
            self.y.div_euclid(2),
            self.z.div_euclid(2),
        )
    }

    /// World position of the cell center at the given scale:
    /// `(coord + 0.5) · l_vox · 2^scale` per axis.
    pub fn center(self, scale: u32, l_vox: f64) -> [f64; 3] {
        let cell = l_vox * f64::from(1u32 << scale);
        [
            (self.x as f64 + 0.5) * cell,
            (self.y as f64 + 0.5) * cell,
            (self.z as f64 + 0.5) * cell,
        ]
    }
}

/// Occupied coordinates of one scale level plus the row index.
#[derive(Clone, Debug)]
pub struct VoxelGrid {
    coords: Vec<VoxelCoord>,
    scale: u32,
    index: CoordIndex,
}

impl VoxelGrid {
    /// Builds a grid from unique coordinates. Panics on duplicates; callers
    /// deduplicate first because the dedup policy (first-seen order) is
    /// theirs.
    pub fn new(coords: Vec<VoxelCoord>, scale: u32) -> Self {
        let index = CoordIndex::build(&coords, scale);
        assert_eq!(
            index.len(),
            coords.len(),
            "voxel grid coordinates must be unique"
        );
        Self {
            coords,
            scale,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[VoxelCoord] {
        &self.coords
    }

    pub fn scale(&self) -> u32 {
        self.scale
    }

    /// Row of a coordinate, if occupied.
    pub fn row_of(&self, c: VoxelCoord) -> Option<usize> {
        self.index.get(c)
    }

    /// World center of the voxel stored at `row`.
    pub fn center(&self, row: usize, l_vox: f64) -> [f64; 3] {
        self.coords[row].center(self.scale, l_vox)
    }
}

#[derive(Debug, Error)]
pub enum VoxelError {
    #[error("cannot voxelize an empty point cloud")]
    EmptyInput,
    #[error("voxel length must be positive, got {0}")]
    BadVoxelLength(f64),
    #[error("pruning removed every voxel")]
    EmptyPrune,
    #[error("cannot upsample below the finest scale level")]
    ScaleZero,
}
