//! Training-sample augmentation: subsampling, noise, rescaling, and
//! bounded outlier injection, all reproducible from a single seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use super::shapes::gaussian;
use super::DataError;
use crate::cloud::PointCloud;

#[derive(Clone, Debug)]
pub struct AugmentConfig {
    /// Points in the network input.
    pub input_points: usize,
    /// Per-sample noise σ is uniform in [0, this].
    pub noise_sigma_max: f64,
    /// Global uniform rescale range (applied to ground truth and input
    /// together, about the unit-cube center).
    pub scale_min: f64,
    pub scale_max: f64,
    /// Outlier count is uniform in [0, frac·input_points].
    pub outlier_frac_max: f64,
    /// Outliers are drawn uniformly in the bounding box inflated by this
    /// factor.
    pub bbox_inflate: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            input_points: 2048,
            noise_sigma_max: 0.01,
            scale_min: 0.8,
            scale_max: 1.25,
            outlier_frac_max: 0.05,
            bbox_inflate: 1.2,
        }
    }
}

/// What `augment` actually did, for reproducibility records.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentRecord {
    pub sigma: f64,
    pub scale: f64,
    pub outlier_indices: Vec<usize>,
}

/// One training sample: ground truth (scaled), degraded input, and the
/// augmentation record.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub gt: PointCloud,
    pub input: PointCloud,
    pub record: AugmentRecord,
}

const CUBE_CENTER: [f64; 3] = [0.5, 0.5, 0.5];

/// Builds a degraded input from dense ground truth: global rescale,
/// subsample without replacement, isotropic Gaussian noise, and uniform
/// outliers in the inflated bounding box.
pub fn augment(gt: &PointCloud, cfg: &AugmentConfig, seed: u64) -> Result<Sample, DataError> {
    if gt.len() < cfg.input_points {
        return Err(DataError::TooFewPoints {
            have: gt.len(),
            need: cfg.input_points,
        });
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);

    // 1. global rescale of the whole sample
    let scale = if cfg.scale_max > cfg.scale_min {
        rng.gen_range(cfg.scale_min..cfg.scale_max)
    } else {
        cfg.scale_min
    };
    let scaled_gt: PointCloud = gt
        .iter()
        .map(|p| {
            [
                CUBE_CENTER[0] + scale * (p[0] - CUBE_CENTER[0]),
                CUBE_CENTER[1] + scale * (p[1] - CUBE_CENTER[1]),
                CUBE_CENTER[2] + scale * (p[2] - CUBE_CENTER[2]),
            ]
        })
        .collect();

    // 2. subsample without replacement (partial Fisher–Yates)
    let mut indices: Vec<usize> = (0..scaled_gt.len()).collect();
    for i in 0..cfg.input_points {
        let j = rng.gen_range(i..indices.len());
        indices.swap(i, j);
    }
    let mut input: PointCloud = indices[..cfg.input_points]
        .iter()
        .map(|&i| *scaled_gt.points().get(i).unwrap())
        .collect();

    // 3. isotropic Gaussian noise
    let sigma = if cfg.noise_sigma_max > 0.0 {
        rng.gen_range(0.0..cfg.noise_sigma_max)
    } else {
        0.0
    };
    if sigma > 0.0 {
        for p in input.points_mut() {
            for a in p.iter_mut() {
                *a += sigma * gaussian(&mut rng);
            }
        }
    }

    // 4. outliers in the inflated bounding box
    let max_outliers = (cfg.outlier_frac_max * cfg.input_points as f64).floor() as usize;
    let n_outliers = if max_outliers > 0 {
        rng.gen_range(0..=max_outliers)
    } else {
        0
    };
    let mut outlier_indices = Vec::with_capacity(n_outliers);
    if n_outliers > 0 {
        let (lo, hi) = scaled_gt.bbox();
        let center = [
            (lo[0] + hi[0]) / 2.0,
            (lo[1] + hi[1]) / 2.0,
            (lo[2] + hi[2]) / 2.0,
        ];
        let mut slots: Vec<usize> = (0..cfg.input_points).collect();
        for i in 0..n_outliers {
            let j = rng.gen_range(i..slots.len());
            slots.swap(i, j);
        }
        outlier_indices.extend_from_slice(&slots[..n_outliers]);
        outlier_indices.sort_unstable();
        for &idx in &outlier_indices {
            let mut p = [0.0; 3];
            for a in 0..3 {
                let half = (hi[a] - lo[a]) / 2.0 * cfg.bbox_inflate;
                p[a] = center[a] + rng.gen_range(-1.0..1.0) * half;
            }
            input.points_mut()[idx] = p;
        }
    }

    Ok(Sample {
        gt: scaled_gt,
        input,
        record: AugmentRecord {
            sigma,
            scale,
            outlier_indices,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::shapes::{ShapeKind, ShapeSpec};

    fn dense_gt() -> PointCloud {
        ShapeSpec::from_seed(ShapeKind::Sphere, 42).sample_surface(4096, 0)
    }

    #[test]
    fn clean_config_yields_exact_subset() {
        let gt = dense_gt();
        let cfg = AugmentConfig {
            noise_sigma_max: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
            outlier_frac_max: 0.0,
            ..AugmentConfig::default()
        };
        let sample = augment(&gt, &cfg, 7).unwrap();
        assert_eq!(sample.record.sigma, 0.0);
        assert_eq!(sample.record.scale, 1.0);
        assert!(sample.record.outlier_indices.is_empty());
        assert_eq!(sample.gt, gt);
        for p in sample.input.iter() {
            assert!(
                gt.iter().any(|g| g == p),
                "clean input must be a subset of the ground truth"
            );
        }
    }

    #[test]
    fn outlier_count_is_bounded() {
        let gt = dense_gt();
        let cfg = AugmentConfig::default();
        let cap = (0.05_f64 * 2048.0).floor() as usize;
        assert_eq!(cap, 102);
        for seed in 0..30 {
            let sample = augment(&gt, &cfg, seed).unwrap();
            assert!(sample.record.outlier_indices.len() <= cap);
            assert_eq!(sample.input.len(), 2048);
        }
    }

    #[test]
    fn same_seed_is_identical() {
        let gt = dense_gt();
        let cfg = AugmentConfig::default();
        let a = augment(&gt, &cfg, 99).unwrap();
        let b = augment(&gt, &cfg, 99).unwrap();
        assert_eq!(a, b);
        let c = augment(&gt, &cfg, 100).unwrap();
        assert_ne!(a.input, c.input);
    }

    #[test]
    fn rejects_small_ground_truth() {
        let gt = PointCloud::new(vec![[0.5; 3]; 100]);
        assert!(matches!(
            augment(&gt, &AugmentConfig::default(), 1),
            Err(DataError::TooFewPoints { .. })
        ));
    }
}
