//! Poisson-disk thinning by greedy dart-throwing elimination.

use std::collections::HashMap;

use crate::cloud::{dist_sq, Point3, PointCloud};

/// Greedy elimination over the input order: a point is retained iff it is
/// at least `radius` away from every previously retained point. The result
/// is maximal — every rejected point lies within `radius` of some retained
/// one.
pub fn poisson_disk(points: &PointCloud, radius: f64) -> PointCloud {
    assert!(radius > 0.0, "poisson radius must be positive");
    let r_sq = radius * radius;
    let key = |p: Point3| -> (i64, i64, i64) {
        (
            (p[0] / radius).floor() as i64,
            (p[1] / radius).floor() as i64,
            (p[2] / radius).floor() as i64,
        )
    };
    let mut bins: HashMap<(i64, i64, i64), Vec<Point3>> = HashMap::new();
    let mut kept = PointCloud::default();
    'candidates: for &p in points.iter() {
        let (kx, ky, kz) = key(p);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(bin) = bins.get(&(kx + dx, ky + dy, kz + dz)) {
                        if bin.iter().any(|q| dist_sq(p, *q) < r_sq) {
                            continue 'candidates;
                        }
                    }
                }
            }
        }
        bins.entry((kx, ky, kz)).or_default().push(p);
        kept.push(p);
    }
    kept
}
