//! Exact K-nearest-neighbor search over the voxel hash index.
//!
//! Chebyshev shells of increasing radius are probed through the hash index
//! until the next shell can no longer beat (or tie) the current K-th best
//! Euclidean distance. Distances are measured between voxel centers, which
//! at a single scale reduces to integer coordinate distances; ties break
//! by lexicographic coordinate order.

use crate::voxel::{VoxelCoord, VoxelGrid};

/// The K neighborhood of one query voxel.
#[derive(Clone, Debug)]
pub struct NeighborSet {
    pub query: VoxelCoord,
    /// Grid rows of the K neighbors, nearest first.
    pub rows: Vec<usize>,
    pub coords: Vec<VoxelCoord>,
    /// World-frame displacement of each neighbor center from the query
    /// center.
    pub displacements: Vec<[f64; 3]>,
    /// True for slots filled by repeating the nearest neighbor because the
    /// grid holds fewer than K voxels.
    pub pad: Vec<bool>,
}

fn int_dist_sq(a: VoxelCoord, b: VoxelCoord) -> i64 {
    let (dx, dy, dz) = (a.x - b.x, a.y - b.y, a.z - b.z);
    dx * dx + dy * dy + dz * dz
}

/// Exact K-NN around `q` under the Euclidean metric on voxel centers.
/// When the grid holds fewer than K voxels the set is padded by repeating
/// the nearest neighbor, with the pad mask recording the copies.
pub fn knn_shell(grid: &VoxelGrid, q: VoxelCoord, k: usize, l_vox: f64) -> NeighborSet {
    assert!(k >= 1, "k must be at least 1");
    assert!(!grid.is_empty(), "knn over an empty grid");

    let mut candidates: Vec<(i64, VoxelCoord, usize)> = Vec::new();
    let mut radius: i64 = 0;
    loop {
        for c in shell_coords(q, radius) {
            if let Some(row) = grid.row_of(c) {
                candidates.push((int_dist_sq(q, c), c, row));
            }
        }
        let exhausted = candidates.len() == grid.len();
        if candidates.len() >= k || exhausted {
            // The next shell starts at Chebyshev radius r+1, i.e. at
            // squared Euclidean distance ≥ (r+1)²; once that exceeds the
            // current K-th best we are done. A tie ((r+1)² equal) could
            // still win lexicographically, so keep expanding on equality.
            candidates.sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
            let kth = candidates[(k.min(candidates.len())) - 1].0;
            let next_min = (radius + 1) * (radius + 1);
            if exhausted || (candidates.len() >= k && next_min > kth) {
                break;
            }
        }
        radius += 1;
    }

    candidates.truncate(k);
    let found = candidates.len();
    let mut rows: Vec<usize> = candidates.iter().map(|c| c.2).collect();
    let mut coords: Vec<VoxelCoord> = candidates.iter().map(|c| c.1).collect();
    let mut pad = vec![false; found];
    while rows.len() < k {
        rows.push(rows[0]);
        coords.push(coords[0]);
        pad.push(true);
    }

    let cell = l_vox * f64::from(1u32 << grid.scale());
    let displacements = coords
        .iter()
        .map(|c| {
            [
                (c.x - q.x) as f64 * cell,
                (c.y - q.y) as f64 * cell,
                (c.z - q.z) as f64 * cell,
            ]
        })
        .collect();

    NeighborSet {
        query: q,
        rows,
        coords,
        displacements,
        pad,
    }
}

/// All coordinates at exactly Chebyshev distance `r` from `q`, in
/// lexicographic offset order.
fn shell_coords(q: VoxelCoord, r: i64) -> Vec<VoxelCoord> {
    if r == 0 {
        return vec![q];
    }
    let mut out = Vec::new();
    for dx in -r..=r {
        for dy in -r..=r {
            for dz in -r..=r {
                if dx.abs().max(dy.abs()).max(dz.abs()) == r {
                    out.push(q.offset(dx, dy, dz));
                }
            }
        }
    }
    out
}

/// Exhaustive scan with the same distance/tie rule; the oracle twin of
/// [`knn_shell`].
pub fn knn_brute_force(grid: &VoxelGrid, q: VoxelCoord, k: usize) -> Vec<VoxelCoord> {
    let mut all: Vec<(i64, VoxelCoord)> = grid
        .coords()
        .iter()
        .map(|&c| (int_dist_sq(q, c), c))
        .collect();
    all.sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    all.truncate(k);
    let mut coords: Vec<VoxelCoord> = all.into_iter().map(|(_, c)| c).collect();
    while coords.len() < k && !coords.is_empty() {
        coords.push(coords[0]);
    }
    coords
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn lone_voxel_pads_with_itself() {
        let q = VoxelCoord::new(2, -1, 0);
        let grid = VoxelGrid::new(vec![q], 0);
        let set = knn_shell(&grid, q, 8, 0.05);
        assert_eq!(set.coords, vec![q; 8]);
        assert_eq!(set.pad.iter().filter(|&&p| p).count(), 7);
        assert!(!set.pad[0]);
        assert!(set.displacements.iter().all(|d| d == &[0.0; 3]));
    }

    #[test]
    fn full_block_center_picks_faces_then_first_edge() {
        let mut coords = Vec::new();
        for x in 0..3 {
            for y in 0..3 {
                for z in 0..3 {
                    coords.push(VoxelCoord::new(x, y, z));
                }
            }
        }
        let grid = VoxelGrid::new(coords, 0);
        let q = VoxelCoord::new(1, 1, 1);
        let set = knn_shell(&grid, q, 8, 0.05);
        // the query, its 6 face neighbors, then the lexicographically first
        // of the 12 edge neighbors (distance² = 2): (0,0,1)
        assert_eq!(set.coords[0], q);
        let faces: Vec<VoxelCoord> = set.coords[1..7].to_vec();
        for f in &faces {
            assert_eq!(super::int_dist_sq(q, *f), 1);
        }
        assert_eq!(set.coords[7], VoxelCoord::new(0, 0, 1));
        // identical to the brute-force oracle
        assert_eq!(set.coords, knn_brute_force(&grid, q, 8));
    }

    #[test]
    fn random_grids_match_brute_force() {
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        for _ in 0..50 {
            let mut coords = Vec::new();
            for _ in 0..rng.gen_range(1..500) {
                let c = VoxelCoord::new(
                    rng.gen_range(-10..10),
                    rng.gen_range(-10..10),
                    rng.gen_range(-10..10),
                );
                if !coords.contains(&c) {
                    coords.push(c);
                }
            }
            let grid = VoxelGrid::new(coords.clone(), 0);
            for _ in 0..20 {
                let q = coords[rng.gen_range(0..coords.len())];
                let k = rng.gen_range(1..=8);
                let fast = knn_shell(&grid, q, k, 0.02);
                let slow = knn_brute_force(&grid, q, k);
                assert_eq!(fast.coords, slow, "query {q:?} k {k}");
            }
        }
    }
}
