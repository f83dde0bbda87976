//! Voxelization and the sparse convolution layers.

use super::{VoxelCoord, VoxelError, VoxelGrid};
use crate::cloud::PointCloud;
use crate::tensor::{NodeId, Tape, Tensor};

/// 3³ kernel offsets in lexicographic order; weight row block `o` of a
/// `[27·C_in × C_out]` kernel belongs to `KERNEL_OFFSETS[o]`.
pub const KERNEL_OFFSETS: [(i64, i64, i64); 27] = {
    let mut offs = [(0, 0, 0); 27];
    let mut i = 0;
    let mut dx = -1;
    while dx <= 1 {
        let mut dy = -1;
        while dy <= 1 {
            let mut dz = -1;
            while dz <= 1 {
                offs[i] = (dx, dy, dz);
                i += 1;
                dz += 1;
            }
            dy += 1;
        }
        dx += 1;
    }
    offs
};

/// 2³ child offsets in lexicographic order; weight row block `j` of an
/// `[8·C_in × C_out]` kernel emits the child at `2·coord + CHILD_OFFSETS[j]`.
pub const CHILD_OFFSETS: [(i64, i64, i64); 8] = [
    (0, 0, 0),
    (0, 0, 1),
    (0, 1, 0),
    (0, 1, 1),
    (1, 0, 0),
    (1, 0, 1),
    (1, 1, 0),
    (1, 1, 1),
];

/// Convolution stride. Stride two moves one scale level up.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stride {
    One,
    Two,
}

/// Quantizes a point cloud to the finest scale level.
///
/// Returns the grid (coordinates in first-seen order), the initial `[N×4]`
/// features — a ones column concatenated with the mean offset of the
/// assigned points from the cell center, in cell units so the range is
/// ±0.5 regardless of voxel length — and the point→voxel row assignment.
pub fn voxelize(
    points: &PointCloud,
    l_vox: f64,
) -> Result<(VoxelGrid, Tensor, Vec<usize>), VoxelError> {
    if points.is_empty() {
        return Err(VoxelError::EmptyInput);
    }
    if !(l_vox > 0.0) {
        return Err(VoxelError::BadVoxelLength(l_vox));
    }

    let mut coords: Vec<VoxelCoord> = Vec::new();
    let mut assignment = Vec::with_capacity(points.len());
    // Dedup map is lookup-only; coordinate order stays first-seen.
    let mut lookup: std::collections::HashMap<VoxelCoord, usize> = std::collections::HashMap::new();

    for p in points.iter() {
        let c = VoxelCoord::new(
            (p[0] / l_vox).floor() as i64,
            (p[1] / l_vox).floor() as i64,
            (p[2] / l_vox).floor() as i64,
        );
        let row = *lookup.entry(c).or_insert_with(|| {
            coords.push(c);
            coords.len() - 1
        });
        assignment.push(row);
    }

    let grid = VoxelGrid::new(coords, 0);
    let n = grid.len();
    let mut feats = vec![0.0; n * 4];
    let mut counts = vec![0usize; n];
    for (p, &row) in points.iter().zip(&assignment) {
        let center = grid.center(row, l_vox);
        counts[row] += 1;
        for a in 0..3 {
            feats[row * 4 + 1 + a] += p[a] - center[a];
        }
    }
    for row in 0..n {
        feats[row * 4] = 1.0;
        for a in 0..3 {
            feats[row * 4 + 1 + a] /= counts[row] as f64 * l_vox;
        }
    }
    Ok((grid, Tensor::new(vec![n, 4], feats), assignment))
}

/// Pure hash lookups of `center + offset` for each kernel offset; absent
/// neighbors are reported as `None`.
pub fn neighbor_rows(
    grid: &VoxelGrid,
    center: VoxelCoord,
    offsets: &[(i64, i64, i64)],
) -> Vec<((i64, i64, i64), Option<usize>)> {
    assert!(!offsets.is_empty(), "neighbor_rows needs at least one offset");
    offsets
        .iter()
        .map(|&(dx, dy, dz)| ((dx, dy, dz), grid.row_of(center.offset(dx, dy, dz))))
        .collect()
}

/// Sparse 3³ convolution.
///
/// Stride one keeps the coordinate set; each output row sums
/// `featᵀ·W[o]` over present neighbors. Stride two emits the distinct
/// `floor(coord/2)` set one scale up; each output position gathers the
/// present inputs in its 3³ window at doubled stride. Differentiable
/// through features and weights.
pub fn sparse_conv(
    tape: &mut Tape,
    grid: &VoxelGrid,
    feats: NodeId,
    weights: NodeId,
    stride: Stride,
) -> (VoxelGrid, NodeId) {
    let c_in = {
        let ws = tape.shape(weights);
        assert_eq!(ws.len(), 2, "conv weights must be [27·C_in × C_out]");
        assert_eq!(ws[0] % 27, 0, "conv weights must pack 27 kernel taps");
        ws[0] / 27
    };
    let c_out = tape.shape(weights)[1];
    assert_eq!(
        tape.shape(feats),
        &[grid.len(), c_in],
        "dimension error: feature rows must match the grid"
    );

    let out_grid = match stride {
        Stride::One => grid.clone(),
        Stride::Two => {
            let mut coords = Vec::new();
            let mut seen = std::collections::HashSet::new();
            for &c in grid.coords() {
                let p = c.parent();
                if seen.insert(p) {
                    coords.push(p);
                }
            }
            VoxelGrid::new(coords, grid.scale() + 1)
        }
    };

    let zeros = Tensor::zeros(vec![out_grid.len(), c_out]);
    let mut acc = tape.constant(&zeros);
    for (o, &(dx, dy, dz)) in KERNEL_OFFSETS.iter().enumerate() {
        let mut in_rows = Vec::new();
        let mut out_rows = Vec::new();
        for (i, &oc) in out_grid.coords().iter().enumerate() {
            let probe = match stride {
                Stride::One => oc.offset(dx, dy, dz),
                Stride::Two => VoxelCoord::new(2 * oc.x + dx, 2 * oc.y + dy, 2 * oc.z + dz),
            };
            if let Some(j) = grid.row_of(probe) {
                in_rows.push(j);
                out_rows.push(i);
            }
        }
        if in_rows.is_empty() {
            continue;
        }
        let gathered = tape.gather_rows(feats, &in_rows);
        let w_o = tape.slice_rows(weights, o * c_in, c_in);
        let contrib = tape.matmul(gathered, w_o);
        let scattered = tape.scatter_add_rows(contrib, &out_rows, out_grid.len());
        acc = tape.add(acc, scattered);
    }
    (out_grid, acc)
}

/// Generative transposed convolution, kernel 2 stride 2: every voxel at
/// scale s ≥ 1 emits all 8 children at scale s−1. Child sets of distinct
/// parents are disjoint, so the output has exactly 8·N rows (parent-major,
/// child offsets in lexicographic order).
pub fn gen_transposed_conv(
    tape: &mut Tape,
    grid: &VoxelGrid,
    feats: NodeId,
    weights: NodeId,
) -> Result<(VoxelGrid, NodeId), VoxelError> {
    if grid.scale() == 0 {
        return Err(VoxelError::ScaleZero);
    }
    let c_in = {
        let ws = tape.shape(weights);
        assert_eq!(ws.len(), 2, "kernel must be [8·C_in × C_out]");
        assert_eq!(ws[0] % 8, 0, "kernel must pack 8 child taps");
        ws[0] / 8
    };
    let c_out = tape.shape(weights)[1];
    assert_eq!(tape.shape(feats), &[grid.len(), c_in]);

    let n = grid.len();
    let mut coords = Vec::with_capacity(n * 8);
    for &c in grid.coords() {
        for &(dx, dy, dz) in &CHILD_OFFSETS {
            coords.push(VoxelCoord::new(2 * c.x + dx, 2 * c.y + dy, 2 * c.z + dz));
        }
    }
    let out_grid = VoxelGrid::new(coords, grid.scale() - 1);

    let zeros = Tensor::zeros(vec![n * 8, c_out]);
    let mut acc = tape.constant(&zeros);
    for (j, _) in CHILD_OFFSETS.iter().enumerate() {
        let w_j = tape.slice_rows(weights, j * c_in, c_in);
        let contrib = tape.matmul(feats, w_j);
        let rows: Vec<usize> = (0..n).map(|p| p * 8 + j).collect();
        let scattered = tape.scatter_add_rows(contrib, &rows, n * 8);
        acc = tape.add(acc, scattered);
    }
    Ok((out_grid, acc))
}

/// How `prune` treats an all-dropped level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PruneMode {
    /// Empty output is an error (inference: reconstruction failure).
    Strict,
    /// Keep the single best-scoring voxel so training never produces a
    /// dead graph.
    RescueBest,
}

/// Keeps exactly the listed rows (already decided by the caller), in their
/// given order, rebuilding the hash index.
pub(crate) fn prune_to(
    tape: &mut Tape,
    grid: &VoxelGrid,
    feats: NodeId,
    kept: Vec<usize>,
) -> Pruned {
    assert!(!kept.is_empty(), "prune_to requires at least one row");
    let coords: Vec<VoxelCoord> = kept.iter().map(|&i| grid.coords()[i]).collect();
    let out_grid = VoxelGrid::new(coords, grid.scale());
    let out_feats = tape.gather_rows(feats, &kept);
    Pruned {
        grid: out_grid,
        feats: out_feats,
        kept,
    }
}

/// Result of a pruning step. `kept` holds the surviving input rows in
/// their original order.
pub struct Pruned {
    pub grid: VoxelGrid,
    pub feats: NodeId,
    pub kept: Vec<usize>,
}

/// Keeps exactly the voxels with `σ(logit) ≥ τ`, comparing in logit space
/// (`logit ≥ ln(τ/(1−τ))`) so the τ=0.5 boundary is exactly `logit ≥ 0`.
/// Gradients flow to surviving rows only.
pub fn prune(
    tape: &mut Tape,
    grid: &VoxelGrid,
    feats: NodeId,
    logits: &[f64],
    tau: f64,
    mode: PruneMode,
) -> Result<Pruned, VoxelError> {
    assert_eq!(logits.len(), grid.len(), "one logit per voxel");
    assert!(tau > 0.0 && tau < 1.0, "threshold must lie in (0,1)");
    let logit_threshold = (tau / (1.0 - tau)).ln();

    let mut kept: Vec<usize> = (0..grid.len())
        .filter(|&i| logits[i] >= logit_threshold)
        .collect();
    if kept.is_empty() {
        match mode {
            PruneMode::Strict => return Err(VoxelError::EmptyPrune),
            PruneMode::RescueBest => {
                let best = logits
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .expect("non-empty grid");
                kept.push(best);
            }
        }
    }
    Ok(prune_to(tape, grid, feats, kept))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn cloud_of(points: &[[f64; 3]]) -> PointCloud {
        PointCloud::new(points.to_vec())
    }

    #[test]
    fn voxelize_single_point() {
        let (grid, feats, assign) =
            voxelize(&cloud_of(&[[0.01, 0.01, 0.01]]), 0.02).unwrap();
        assert_eq!(grid.coords(), &[VoxelCoord::new(0, 0, 0)]);
        assert_eq!(assign, vec![0]);
        // ones column plus offset of the point from the cell center (0.01,..)
        assert_eq!(feats.data()[0], 1.0);
        for a in 0..3 {
            assert!(feats.data()[1 + a].abs() < 1e-15);
        }
    }

    #[test]
    fn voxelize_two_cells_on_x() {
        let (grid, _, assign) =
            voxelize(&cloud_of(&[[0.01, 0.01, 0.01], [0.03, 0.01, 0.01]]), 0.02).unwrap();
        assert_eq!(
            grid.coords(),
            &[VoxelCoord::new(0, 0, 0), VoxelCoord::new(1, 0, 0)]
        );
        assert_eq!(assign, vec![0, 1]);
    }

    #[test]
    fn voxelize_matches_sort_dedup_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(100);
        let points: Vec<[f64; 3]> = (0..2048)
            .map(|_| [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()])
            .collect();
        let l_vox = 0.02;
        let (grid, _, assignment) = voxelize(&cloud_of(&points), l_vox).unwrap();

        let mut expected: Vec<(i64, i64, i64)> = points
            .iter()
            .map(|p| {
                (
                    (p[0] / l_vox).floor() as i64,
                    (p[1] / l_vox).floor() as i64,
                    (p[2] / l_vox).floor() as i64,
                )
            })
            .collect();
        expected.sort_unstable();
        expected.dedup();
        assert_eq!(grid.len(), expected.len());
        assert_eq!(assignment.len(), points.len());
        // every point maps to the voxel containing it
        for (p, &row) in points.iter().zip(&assignment) {
            let c = grid.coords()[row];
            assert_eq!((p[0] / l_vox).floor() as i64, c.x);
        }
    }

    #[test]
    fn voxelize_rejects_bad_inputs() {
        assert!(matches!(
            voxelize(&PointCloud::default(), 0.02),
            Err(VoxelError::EmptyInput)
        ));
        assert!(matches!(
            voxelize(&cloud_of(&[[0.0; 3]]), 0.0),
            Err(VoxelError::BadVoxelLength(_))
        ));
    }

    #[test]
    fn voxelize_jitter_within_cells_is_stable() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let l_vox = 0.05;
        let points: Vec<[f64; 3]> = (0..256)
            .map(|_| [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()])
            .collect();
        let (grid, _, assign) = voxelize(&cloud_of(&points), l_vox).unwrap();
        // jitter each point inside its own cell
        let jittered: Vec<[f64; 3]> = points
            .iter()
            .map(|p| {
                let mut q = *p;
                for a in 0..3 {
                    let lo = (p[a] / l_vox).floor() * l_vox;
                    q[a] = lo + rng.gen_range(0.0..1.0) * (l_vox * 0.999);
                }
                q
            })
            .collect();
        let (grid2, _, assign2) = voxelize(&cloud_of(&jittered), l_vox).unwrap();
        assert_eq!(grid.coords(), grid2.coords());
        assert_eq!(assign, assign2);
    }

    #[test]
    fn neighbor_rows_lone_voxel() {
        let grid = VoxelGrid::new(vec![VoxelCoord::new(3, 3, 3)], 0);
        let found = neighbor_rows(&grid, VoxelCoord::new(3, 3, 3), &KERNEL_OFFSETS);
        let present: Vec<_> = found.iter().filter(|(_, r)| r.is_some()).collect();
        assert_eq!(present.len(), 1);
        assert_eq!(present[0].0, (0, 0, 0));
    }

    #[test]
    fn neighbor_rows_full_block() {
        let mut coords = Vec::new();
        for x in 0..3 {
            for y in 0..3 {
                for z in 0..3 {
                    coords.push(VoxelCoord::new(x, y, z));
                }
            }
        }
        let grid = VoxelGrid::new(coords, 0);
        let found = neighbor_rows(&grid, VoxelCoord::new(1, 1, 1), &KERNEL_OFFSETS);
        assert!(found.iter().all(|(_, r)| r.is_some()));
    }

    #[test]
    fn neighbor_rows_matches_linear_scan() {
        let mut rng = ChaCha12Rng::seed_from_u64(classic_seed());
        let mut coords = Vec::new();
        for _ in 0..300 {
            let c = VoxelCoord::new(
                rng.gen_range(-6..6),
                rng.gen_range(-6..6),
                rng.gen_range(-6..6),
            );
            if !coords.contains(&c) {
                coords.push(c);
            }
        }
        let grid = VoxelGrid::new(coords.clone(), 0);
        for _ in 0..1000 {
            let q = VoxelCoord::new(
                rng.gen_range(-7..7),
                rng.gen_range(-7..7),
                rng.gen_range(-7..7),
            );
            let fast = neighbor_rows(&grid, q, &KERNEL_OFFSETS);
            for ((dx, dy, dz), row) in fast {
                let target = q.offset(dx, dy, dz);
                let slow = coords.iter().position(|&c| c == target);
                assert_eq!(row, slow);
            }
        }
    }

    fn classic_seed() -> u64 {
        0xC0FFEE
    }

    #[test]
    fn sparse_conv_identity_kernel() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let coords = vec![
            VoxelCoord::new(0, 0, 0),
            VoxelCoord::new(1, 0, 0),
            VoxelCoord::new(0, 2, 1),
        ];
        let grid = VoxelGrid::new(coords, 0);
        let c = 3;
        let feats = Tensor::new(
            vec![3, c],
            (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        // identity at the center tap, zero elsewhere
        let mut w = vec![0.0; 27 * c * c];
        let center = 13;
        for i in 0..c {
            w[(center * c + i) * c + i] = 1.0;
        }
        let mut tape = Tape::new();
        let f = tape.constant(&feats);
        let wn = tape.constant(&Tensor::new(vec![27 * c, c], w));
        let (og, out) = sparse_conv(&mut tape, &grid, f, wn, Stride::One);
        assert_eq!(og.coords(), grid.coords());
        assert_eq!(tape.value(out), feats.data());
    }

    #[test]
    fn sparse_conv_stride_two_single_voxel() {
        let grid = VoxelGrid::new(vec![VoxelCoord::new(5, -3, 2)], 0);
        let mut tape = Tape::new();
        let f = tape.constant(&Tensor::new(vec![1, 2], vec![1.0, 2.0]));
        let w = tape.constant(&Tensor::full(vec![27 * 2, 2], 0.1));
        let (og, _) = sparse_conv(&mut tape, &grid, f, w, Stride::Two);
        assert_eq!(og.scale(), 1);
        assert_eq!(og.coords(), &[VoxelCoord::new(2, -2, 1)]);
    }

    /// Dense 3D convolution over a bounded grid; the independent oracle for
    /// both strides.
    fn dense_conv_oracle(
        coords: &[VoxelCoord],
        feats: &[f64],
        c_in: usize,
        weights: &[f64],
        c_out: usize,
        stride: usize,
        out_coords: &[VoxelCoord],
    ) -> Vec<f64> {
        let mut out = vec![0.0; out_coords.len() * c_out];
        for (i, oc) in out_coords.iter().enumerate() {
            for (o, &(dx, dy, dz)) in KERNEL_OFFSETS.iter().enumerate() {
                let probe = VoxelCoord::new(
                    oc.x * stride as i64 + dx,
                    oc.y * stride as i64 + dy,
                    oc.z * stride as i64 + dz,
                );
                if let Some(j) = coords.iter().position(|&c| c == probe) {
                    for ci in 0..c_in {
                        for co in 0..c_out {
                            out[i * c_out + co] +=
                                feats[j * c_in + ci] * weights[(o * c_in + ci) * c_out + co];
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn sparse_conv_matches_dense_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        for trial in 0..20 {
            let mut coords = Vec::new();
            for _ in 0..rng.gen_range(5..60) {
                let c = VoxelCoord::new(
                    rng.gen_range(0..8),
                    rng.gen_range(0..8),
                    rng.gen_range(0..8),
                );
                if !coords.contains(&c) {
                    coords.push(c);
                }
            }
            let (c_in, c_out) = (2, 3);
            let n = coords.len();
            let feats: Vec<f64> = (0..n * c_in).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let weights: Vec<f64> = (0..27 * c_in * c_out)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let grid = VoxelGrid::new(coords.clone(), 0);

            for stride in [Stride::One, Stride::Two] {
                let mut tape = Tape::new();
                let f = tape.constant(&Tensor::new(vec![n, c_in], feats.clone()));
                let w = tape.constant(&Tensor::new(vec![27 * c_in, c_out], weights.clone()));
                let (og, out) = sparse_conv(&mut tape, &grid, f, w, stride);
                let s = if stride == Stride::One { 1 } else { 2 };
                let expected = dense_conv_oracle(
                    &coords,
                    &feats,
                    c_in,
                    &weights,
                    c_out,
                    s,
                    og.coords(),
                );
                let diff = tape
                    .value(out)
                    .iter()
                    .zip(&expected)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                assert!(diff < 1e-10, "trial {trial} stride {s}: diff {diff}");
            }
        }
    }

    #[test]
    fn sparse_conv_isolated_voxels_reduce_to_linear_layer() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        // far apart: no neighbors except the center tap
        let coords = vec![
            VoxelCoord::new(0, 0, 0),
            VoxelCoord::new(10, 0, 0),
            VoxelCoord::new(0, 10, 10),
        ];
        let grid = VoxelGrid::new(coords, 0);
        let (c_in, c_out) = (3, 2);
        let feats = Tensor::new(
            vec![3, c_in],
            (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let weights = Tensor::new(
            vec![27 * c_in, c_out],
            (0..27 * c_in * c_out).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let mut tape = Tape::new();
        let f = tape.constant(&feats);
        let w = tape.constant(&weights);
        let (_, out) = sparse_conv(&mut tape, &grid, f, w, Stride::One);

        // center-tap-only linear layer
        let center = 13;
        let mut expected = vec![0.0; 3 * c_out];
        for i in 0..3 {
            for ci in 0..c_in {
                for co in 0..c_out {
                    expected[i * c_out + co] += feats.data()[i * c_in + ci]
                        * weights.data()[(center * c_in + ci) * c_out + co];
                }
            }
        }
        let diff = tape
            .value(out)
            .iter()
            .zip(&expected)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }

    #[test]
    fn gen_transposed_full_child_set() {
        let grid = VoxelGrid::new(vec![VoxelCoord::new(0, 0, 0)], 1);
        let mut tape = Tape::new();
        let f = tape.constant(&Tensor::new(vec![1, 1], vec![2.0]));
        let w = tape.constant(&Tensor::full(vec![8, 1], 1.0));
        let (og, out) = gen_transposed_conv(&mut tape, &grid, f, w).unwrap();
        assert_eq!(og.scale(), 0);
        assert_eq!(og.len(), 8);
        let mut expected: Vec<VoxelCoord> = CHILD_OFFSETS
            .iter()
            .map(|&(x, y, z)| VoxelCoord::new(x, y, z))
            .collect();
        let mut got = og.coords().to_vec();
        expected.sort();
        got.sort();
        assert_eq!(got, expected);
        assert!(tape.value(out).iter().all(|&v| v == 2.0));
    }

    #[test]
    fn gen_transposed_child_sets_are_disjoint() {
        // adjacent parents still emit 16 distinct children
        for parents in [
            vec![VoxelCoord::new(0, 0, 0), VoxelCoord::new(5, 5, 5)],
            vec![VoxelCoord::new(0, 0, 0), VoxelCoord::new(1, 0, 0)],
        ] {
            let grid = VoxelGrid::new(parents.clone(), 2);
            let mut tape = Tape::new();
            let f = tape.constant(&Tensor::full(vec![2, 1], 1.0));
            let w = tape.constant(&Tensor::full(vec![8, 1], 1.0));
            let (og, _) = gen_transposed_conv(&mut tape, &grid, f, w).unwrap();
            assert_eq!(og.len(), 16, "child sets must not overlap");
            assert_eq!(og.scale(), 1);
            // oracle: enumerate child coordinates directly
            let mut expected: Vec<VoxelCoord> = parents
                .iter()
                .flat_map(|p| {
                    CHILD_OFFSETS.iter().map(move |&(x, y, z)| {
                        VoxelCoord::new(2 * p.x + x, 2 * p.y + y, 2 * p.z + z)
                    })
                })
                .collect();
            let mut got = og.coords().to_vec();
            expected.sort();
            got.sort();
            assert_eq!(got, expected);
        }
    }

    #[test]
    fn gen_transposed_rejects_scale_zero() {
        let grid = VoxelGrid::new(vec![VoxelCoord::new(0, 0, 0)], 0);
        let mut tape = Tape::new();
        let f = tape.constant(&Tensor::new(vec![1, 1], vec![1.0]));
        let w = tape.constant(&Tensor::full(vec![8, 1], 1.0));
        assert!(matches!(
            gen_transposed_conv(&mut tape, &grid, f, w),
            Err(VoxelError::ScaleZero)
        ));
    }

    #[test]
    fn prune_keep_all_and_drop_all() {
        let grid = VoxelGrid::new(
            vec![VoxelCoord::new(0, 0, 0), VoxelCoord::new(1, 1, 1)],
            0,
        );
        let mut tape = Tape::new();
        let f = tape.constant(&Tensor::new(vec![2, 2], vec![1., 2., 3., 4.]));

        let kept = prune(&mut tape, &grid, f, &[10.0, 10.0], 0.5, PruneMode::Strict).unwrap();
        assert_eq!(kept.grid.coords(), grid.coords());
        assert_eq!(kept.kept, vec![0, 1]);

        assert!(matches!(
            prune(&mut tape, &grid, f, &[-10.0, -10.0], 0.5, PruneMode::Strict),
            Err(VoxelError::EmptyPrune)
        ));

        let rescued = prune(
            &mut tape,
            &grid,
            f,
            &[-10.0, -5.0],
            0.5,
            PruneMode::RescueBest,
        )
        .unwrap();
        assert_eq!(rescued.kept, vec![1]);
    }

    #[test]
    fn prune_matches_filter_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        for _ in 0..50 {
            let n = rng.gen_range(1..40);
            let coords: Vec<VoxelCoord> =
                (0..n as i64).map(|i| VoxelCoord::new(i, 0, 0)).collect();
            let grid = VoxelGrid::new(coords, 0);
            let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let mut tape = Tape::new();
            let f = tape.constant(&Tensor::new(
                vec![n, 1],
                (0..n).map(|i| i as f64).collect(),
            ));
            match prune(&mut tape, &grid, f, &logits, 0.5, PruneMode::Strict) {
                Ok(p) => {
                    let expected: Vec<usize> =
                        (0..n).filter(|&i| logits[i] >= 0.0).collect();
                    assert_eq!(p.kept, expected);
                }
                Err(VoxelError::EmptyPrune) => {
                    assert!(logits.iter().all(|&l| l < 0.0));
                }
                Err(e) => panic!("unexpected error {e}"),
            }
        }
    }
}
