//! Synthetic dataset generation: analytic primitive surfaces, Poisson-disk
//! ground truth, augmentation into degraded inputs, and PLY I/O.
//!
//! Every sample is reproducible from `(shape kind, seed)` plus the dataset
//! configuration; the manifest stores exactly that.

mod augment;
mod ply;
mod poisson;
mod shapes;

pub use augment::{augment, AugmentConfig, AugmentRecord, Sample};
pub use ply::{read_ply, write_ply};
pub use poisson::poisson_disk;
pub use shapes::{ShapeKind, ShapeSpec};

use std::io::{self, BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::cloud::PointCloud;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("ground truth has {have} points, need at least {need}")]
    TooFewPoints { have: usize, need: usize },
    #[error("cannot write an empty point cloud")]
    EmptyCloud,
    #[error("malformed ply: {0}")]
    MalformedPly(String),
    #[error("ply body truncated: header declares {expected} vertices, found {got}")]
    TruncatedPly { expected: usize, got: usize },
    #[error("ply contains a non-finite coordinate")]
    NonFiniteValue,
    #[error("malformed manifest line: {0}")]
    MalformedManifest(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            _ => None,
        }
    }
}

/// One dataset row: everything needed to regenerate the sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleEntry {
    pub kind: ShapeKind,
    pub seed: u64,
    pub split: Split,
}

#[derive(Clone, Debug)]
pub struct DatasetConfig {
    pub n_shapes: usize,
    /// Dense ground-truth target size (the Poisson radius is chosen for
    /// roughly this count).
    pub gt_points: usize,
    pub augment: AugmentConfig,
    pub train_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_shapes: 200,
            gt_points: 10_000,
            augment: AugmentConfig::default(),
            train_fraction: 0.8,
        }
    }
}

fn derive_seed(base: u64, index: u64) -> u64 {
    // splitmix64 step keeps per-sample streams decorrelated
    let mut z = base
        .wrapping_add(0x9e37_79b9_7f4a_7c15_u64.wrapping_mul(index + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Plans the dataset rows: shape kinds cycle, per-sample seeds derive from
/// the base seed, and the train/val split is a seed-stable 80/20 shuffle.
pub fn plan_dataset(cfg: &DatasetConfig, seed: u64) -> Vec<SampleEntry> {
    const SPLIT_SALT: u64 = 0x73_70_6c_69_74_00_00_01;
    let mut order: Vec<usize> = (0..cfg.n_shapes).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ SPLIT_SALT);
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let n_train = ((cfg.n_shapes as f64) * cfg.train_fraction).round() as usize;
    let mut split = vec![Split::Val; cfg.n_shapes];
    for &i in order.iter().take(n_train) {
        split[i] = Split::Train;
    }
    (0..cfg.n_shapes)
        .map(|i| SampleEntry {
            kind: ShapeKind::ALL[i % ShapeKind::ALL.len()],
            seed: derive_seed(seed, i as u64),
            split: split[i],
        })
        .collect()
}

/// Regenerates the full sample for a manifest row: analytic surface →
/// oversampled candidates → Poisson-disk ground truth → augmented input.
pub fn build_sample(entry: &SampleEntry, cfg: &DatasetConfig) -> Result<(ShapeSpec, Sample), DataError> {
    let spec = ShapeSpec::from_seed(entry.kind, entry.seed);
    let candidates = spec.sample_surface(cfg.gt_points * 4, 1);
    // Greedy elimination saturates near 0.7·A/ρ² retained points.
    let rho = (0.7 * spec.area() / cfg.gt_points as f64).sqrt();
    let gt = poisson_disk(&candidates, rho);
    let sample = augment(&gt, &cfg.augment, derive_seed(entry.seed, 0xA06))?;
    Ok((spec, sample))
}

pub fn write_manifest(path: &Path, entries: &[SampleEntry]) -> Result<(), DataError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for e in entries {
        writeln!(w, "{} {} {}", e.kind.name(), e.seed, e.split.name())?;
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<SampleEntry>, DataError> {
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut entries = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let kind = parts
            .next()
            .and_then(ShapeKind::parse)
            .ok_or_else(|| DataError::MalformedManifest(line.clone()))?;
        let seed: u64 = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| DataError::MalformedManifest(line.clone()))?;
        let split = parts
            .next()
            .and_then(Split::parse)
            .ok_or_else(|| DataError::MalformedManifest(line.clone()))?;
        entries.push(SampleEntry { kind, seed, split });
    }
    Ok(entries)
}

/// Ground truth for evaluation only: the same cloud `build_sample` uses,
/// without the augmented input.
pub fn build_gt(entry: &SampleEntry, cfg: &DatasetConfig) -> (ShapeSpec, PointCloud) {
    let spec = ShapeSpec::from_seed(entry.kind, entry.seed);
    let candidates = spec.sample_surface(cfg.gt_points * 4, 1);
    let rho = (0.7 * spec.area() / cfg.gt_points as f64).sqrt();
    (spec, poisson_disk(&candidates, rho))
}
