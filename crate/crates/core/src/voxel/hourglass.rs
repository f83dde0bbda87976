//! Stacked hourglass voxel generation network.
//!
//! Each hourglass encodes the input grid through three stride-2 sparse
//! convolutions (scale 0 → 3), refines the bottleneck with a stride-1
//! block, then decodes back to scale 0 with generative transposed
//! convolutions. Every decoder level adds encoder features at coinciding
//! coordinates, classifies occupancy, and prunes. Two hourglasses run in
//! sequence; all decoder-level logits except the final level of the last
//! stack are the intermediate supervision groups.

use std::collections::HashSet;

use rand::Rng;

use super::conv::{gen_transposed_conv, prune_to, sparse_conv, Stride};
use super::{VoxelCoord, VoxelError, VoxelGrid};
use crate::cloud::PointCloud;
use crate::tensor::{NodeId, Tape, Tensor};

/// Encoder channel widths after each stride-2 level.
pub const ENC_WIDTHS: [usize; 3] = [16, 32, 64];
/// Decoder levels per hourglass (equal to encoder levels).
pub const DECODER_LEVELS: usize = 3;
/// Feature width of the hourglass output at scale 0.
pub const OUT_WIDTH: usize = 16;

fn uniform_init(rng: &mut impl Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = (1.0 / fan_in as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data)
}

/// Surface grids occupy roughly 9 of the 27 kernel taps, so kernel init
/// uses that effective fan-in with a relu gain; the plain ±√(1/fan_in)
/// rule starves the deep encoder path on sparse inputs.
const EFFECTIVE_TAPS: usize = 9;

fn conv_init(rng: &mut impl Rng, shape: Vec<usize>, c_in: usize, taps: usize) -> Tensor {
    let fan_eff = (c_in * taps.min(EFFECTIVE_TAPS)) as f64;
    let bound = (6.0 / fan_eff).sqrt();
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data)
}

/// Learnable parameters of one hourglass.
#[derive(Clone, Debug)]
pub struct HourglassParams {
    pub in_channels: usize,
    /// Width-preserving stride-1 stem at scale 0; its output feeds both
    /// the first downsample and the scale-0 skip.
    pub stem: Tensor,
    /// Stride-2 encoder kernels `[27·C_in × C_out]`, scales 0→1, 1→2, 2→3.
    pub enc: [Tensor; 3],
    /// Width-preserving stride-1 blocks after the first two downsamples.
    pub refine: [Tensor; 2],
    /// Stride-1 bottleneck kernel at scale 3.
    pub bottleneck: Tensor,
    /// Generative transposed kernels `[8·C_in × C_out]`, scales 3→2, 2→1, 1→0.
    pub dec: [Tensor; 3],
    /// Stride-1 blocks over each decoder level's candidate grid, applied
    /// after the skip join so candidates see their neighbors' evidence.
    pub dec_refine: [Tensor; 3],
    /// Projection of the stem features for the scale-0 skip join.
    pub skip_proj: Tensor,
    /// Occupancy classifier heads per decoder level (C→1).
    pub head_w: [Tensor; 3],
    pub head_b: [Tensor; 3],
}

impl HourglassParams {
    pub fn init(in_channels: usize, rng: &mut impl Rng) -> Self {
        let [w1, w2, w3] = ENC_WIDTHS;
        let stem = conv_init(rng, vec![27 * in_channels, in_channels], in_channels, 27);
        let enc = [
            conv_init(rng, vec![27 * in_channels, w1], in_channels, 27),
            conv_init(rng, vec![27 * w1, w2], w1, 27),
            conv_init(rng, vec![27 * w2, w3], w2, 27),
        ];
        let refine = [
            conv_init(rng, vec![27 * w1, w1], w1, 27),
            conv_init(rng, vec![27 * w2, w2], w2, 27),
        ];
        let bottleneck = conv_init(rng, vec![27 * w3, w3], w3, 27);
        let dec = [
            conv_init(rng, vec![8 * w3, w2], w3, 1),
            conv_init(rng, vec![8 * w2, w1], w2, 1),
            conv_init(rng, vec![8 * w1, OUT_WIDTH], w1, 1),
        ];
        let dec_refine = [
            conv_init(rng, vec![27 * w2, w2], w2, 27),
            conv_init(rng, vec![27 * w1, w1], w1, 27),
            conv_init(rng, vec![27 * OUT_WIDTH, OUT_WIDTH], OUT_WIDTH, 27),
        ];
        let skip_proj = uniform_init(rng, vec![in_channels, OUT_WIDTH], in_channels);
        let head_w = [
            uniform_init(rng, vec![w2, 1], w2),
            uniform_init(rng, vec![w1, 1], w1),
            uniform_init(rng, vec![OUT_WIDTH, 1], OUT_WIDTH),
        ];
        let head_b = [
            Tensor::zeros(vec![1]),
            Tensor::zeros(vec![1]),
            Tensor::zeros(vec![1]),
        ];
        Self {
            in_channels,
            stem,
            enc,
            refine,
            bottleneck,
            dec,
            dec_refine,
            skip_proj,
            head_w,
            head_b,
        }
    }

    /// Stable name/tensor enumeration used by the optimizer and the
    /// checkpoint format.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        out.push(("stem".to_string(), &self.stem));
        for (i, t) in self.enc.iter().enumerate() {
            out.push((format!("enc{i}"), t));
        }
        for (i, t) in self.refine.iter().enumerate() {
            out.push((format!("refine{i}"), t));
        }
        out.push(("bottleneck".to_string(), &self.bottleneck));
        for (i, t) in self.dec.iter().enumerate() {
            out.push((format!("dec{i}"), t));
        }
        for (i, t) in self.dec_refine.iter().enumerate() {
            out.push((format!("dec_refine{i}"), t));
        }
        out.push(("skip_proj".to_string(), &self.skip_proj));
        for (i, t) in self.head_w.iter().enumerate() {
            out.push((format!("head{i}.w"), t));
        }
        for (i, t) in self.head_b.iter().enumerate() {
            out.push((format!("head{i}.b"), t));
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        out.push(("stem".to_string(), &mut self.stem));
        for (i, t) in self.enc.iter_mut().enumerate() {
            out.push((format!("enc{i}"), t));
        }
        for (i, t) in self.refine.iter_mut().enumerate() {
            out.push((format!("refine{i}"), t));
        }
        out.push(("bottleneck".to_string(), &mut self.bottleneck));
        for (i, t) in self.dec.iter_mut().enumerate() {
            out.push((format!("dec{i}"), t));
        }
        for (i, t) in self.dec_refine.iter_mut().enumerate() {
            out.push((format!("dec_refine{i}"), t));
        }
        out.push(("skip_proj".to_string(), &mut self.skip_proj));
        for (i, t) in self.head_w.iter_mut().enumerate() {
            out.push((format!("head{i}.w"), t));
        }
        for (i, t) in self.head_b.iter_mut().enumerate() {
            out.push((format!("head{i}.b"), t));
        }
        out
    }

    /// Places every parameter on the tape. Trainable bindings accumulate
    /// gradients; frozen ones are constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> HourglassBound {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.param(t)
            } else {
                tape.constant(t)
            }
        };
        HourglassBound {
            stem: put(&self.stem),
            enc: [put(&self.enc[0]), put(&self.enc[1]), put(&self.enc[2])],
            refine: [put(&self.refine[0]), put(&self.refine[1])],
            bottleneck: put(&self.bottleneck),
            dec: [put(&self.dec[0]), put(&self.dec[1]), put(&self.dec[2])],
            dec_refine: [
                put(&self.dec_refine[0]),
                put(&self.dec_refine[1]),
                put(&self.dec_refine[2]),
            ],
            skip_proj: put(&self.skip_proj),
            head_w: [put(&self.head_w[0]), put(&self.head_w[1]), put(&self.head_w[2])],
            head_b: [put(&self.head_b[0]), put(&self.head_b[1]), put(&self.head_b[2])],
        }
    }
}

/// Tape-bound hourglass parameters.
#[derive(Clone, Copy, Debug)]
pub struct HourglassBound {
    pub stem: NodeId,
    pub enc: [NodeId; 3],
    pub refine: [NodeId; 2],
    pub bottleneck: NodeId,
    pub dec: [NodeId; 3],
    pub dec_refine: [NodeId; 3],
    pub skip_proj: NodeId,
    pub head_w: [NodeId; 3],
    pub head_b: [NodeId; 3],
}

impl HourglassBound {
    /// Node ids in the same order as [`HourglassParams::named_params`].
    pub fn ids(&self) -> Vec<NodeId> {
        let mut out = Vec::with_capacity(17);
        out.push(self.stem);
        out.extend(self.enc);
        out.extend(self.refine);
        out.push(self.bottleneck);
        out.extend(self.dec);
        out.extend(self.dec_refine);
        out.push(self.skip_proj);
        out.extend(self.head_w);
        out.extend(self.head_b);
        out
    }
}

/// One decoder level's pre-prune candidates and their occupancy logits.
#[derive(Clone, Debug)]
pub struct LevelGroup {
    pub coords: Vec<VoxelCoord>,
    pub scale: u32,
    pub logits: NodeId,
}

/// Result of one hourglass pass.
pub struct HourglassOut {
    /// Final pruned grid at scale 0.
    pub grid: VoxelGrid,
    /// `[N × OUT_WIDTH]` features aligned to `grid`.
    pub feats: NodeId,
    /// Pre-prune logit groups per decoder level (coarse to fine; the last
    /// entry is this hourglass's final scale-0 group).
    pub levels: Vec<LevelGroup>,
    /// Pruned scale-1 decoder tensor, the parent level for sparse
    /// interpolation.
    pub dec_scale1: (VoxelGrid, NodeId),
}

/// Adds `src` features into `dst` rows wherever coordinates coincide.
fn skip_join(
    tape: &mut Tape,
    dst_grid: &VoxelGrid,
    dst: NodeId,
    src_grid: &VoxelGrid,
    src: NodeId,
) -> NodeId {
    let mut src_rows = Vec::new();
    let mut dst_rows = Vec::new();
    for (i, &c) in dst_grid.coords().iter().enumerate() {
        if let Some(j) = src_grid.row_of(c) {
            src_rows.push(j);
            dst_rows.push(i);
        }
    }
    if src_rows.is_empty() {
        return dst;
    }
    let gathered = tape.gather_rows(src, &src_rows);
    let scattered = tape.scatter_add_rows(gathered, &dst_rows, dst_grid.len());
    tape.add(dst, scattered)
}

fn classify(tape: &mut Tape, feats: NodeId, w: NodeId, b: NodeId) -> NodeId {
    let scores = tape.matmul(feats, w);
    let biased = tape.add_row_bias(scores, b);
    let n = tape.shape(biased)[0];
    tape.reshape(biased, vec![n])
}

/// Pruning policy for a network pass.
#[derive(Clone, Copy, Debug)]
pub enum PrunePolicy<'a> {
    /// Prediction only; empty levels are an error (inference).
    Strict,
    /// Prediction with single-best rescue on empty levels.
    RescueBest,
    /// Teacher forcing for training: prediction-kept voxels plus every
    /// label-positive voxel, so true surface branches stay alive while the
    /// classifiers are still learning. Falls back to the best-scoring
    /// voxel if both sets are empty.
    TeacherForce(&'a GtOccupancy),
}

/// One hourglass pass over a scale-0 grid. `tau` is the pruning threshold
/// on occupancy probability.
pub fn hourglass_forward(
    tape: &mut Tape,
    grid: &VoxelGrid,
    feats: NodeId,
    p: &HourglassBound,
    tau: f64,
    policy: PrunePolicy,
) -> Result<HourglassOut, VoxelError> {
    assert_eq!(grid.scale(), 0, "hourglass input must be at the finest scale");

    // Encoder: a stride-1 stem, three stride-2 levels with stride-1
    // refinement blocks, then a stride-1 bottleneck block.
    let (_, stem) = sparse_conv(tape, grid, feats, p.stem, Stride::One);
    let stem = tape.relu(stem);
    let (g1, f1) = sparse_conv(tape, grid, stem, p.enc[0], Stride::Two);
    let f1 = tape.relu(f1);
    let (_, f1) = sparse_conv(tape, &g1, f1, p.refine[0], Stride::One);
    let f1 = tape.relu(f1);
    let (g2, f2) = sparse_conv(tape, &g1, f1, p.enc[1], Stride::Two);
    let f2 = tape.relu(f2);
    let (_, f2) = sparse_conv(tape, &g2, f2, p.refine[1], Stride::One);
    let f2 = tape.relu(f2);
    let (g3, f3) = sparse_conv(tape, &g2, f2, p.enc[2], Stride::Two);
    let f3 = tape.relu(f3);
    let (g3b, f3b) = sparse_conv(tape, &g3, f3, p.bottleneck, Stride::One);
    let f3b = tape.relu(f3b);

    // Scale-0 skip source: projected stem features.
    let skip0 = tape.matmul(stem, p.skip_proj);

    let mut levels = Vec::with_capacity(DECODER_LEVELS);
    let mut dec_scale1 = None;

    let (mut cur_grid, mut cur_feats) = (g3b, f3b);
    let skips: [(&VoxelGrid, NodeId); 3] = [(&g2, f2), (&g1, f1), (grid, skip0)];
    for level in 0..DECODER_LEVELS {
        let (cand_grid, cand) = gen_transposed_conv(tape, &cur_grid, cur_feats, p.dec[level])?;
        let (skip_grid, skip_feats) = skips[level];
        let joined = skip_join(tape, &cand_grid, cand, skip_grid, skip_feats);
        let joined = tape.relu(joined);
        let (_, mixed) = sparse_conv(tape, &cand_grid, joined, p.dec_refine[level], Stride::One);
        let activated = tape.relu(mixed);
        let logits = classify(tape, activated, p.head_w[level], p.head_b[level]);
        levels.push(LevelGroup {
            coords: cand_grid.coords().to_vec(),
            scale: cand_grid.scale(),
            logits,
        });
        let logit_values = tape.value(logits).to_vec();
        let pruned = prune_with_policy(tape, &cand_grid, activated, &logit_values, tau, policy)?;
        if pruned.grid.scale() == 1 {
            dec_scale1 = Some((pruned.grid.clone(), pruned.feats));
        }
        cur_grid = pruned.grid;
        cur_feats = pruned.feats;
    }

    Ok(HourglassOut {
        grid: cur_grid,
        feats: cur_feats,
        levels,
        dec_scale1: dec_scale1.expect("decoder passes through scale 1"),
    })
}

/// Prediction-based keep set, optionally widened by the teacher labels.
fn prune_with_policy(
    tape: &mut Tape,
    grid: &VoxelGrid,
    feats: NodeId,
    logits: &[f64],
    tau: f64,
    policy: PrunePolicy,
) -> Result<super::conv::Pruned, VoxelError> {
    let logit_threshold = (tau / (1.0 - tau)).ln();
    let mut kept: Vec<usize> = match policy {
        PrunePolicy::Strict | PrunePolicy::RescueBest => (0..grid.len())
            .filter(|&i| logits[i] >= logit_threshold)
            .collect(),
        PrunePolicy::TeacherForce(occ) => (0..grid.len())
            .filter(|&i| {
                logits[i] >= logit_threshold
                    || occ.is_occupied(grid.coords()[i], grid.scale())
            })
            .collect(),
    };
    if kept.is_empty() {
        match policy {
            PrunePolicy::Strict => return Err(VoxelError::EmptyPrune),
            PrunePolicy::RescueBest | PrunePolicy::TeacherForce(_) => {
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

/// Trilinear gather of scale-1 parent features for each scale-0 output
/// voxel, weights renormalized over present parents, concatenated with the
/// voxel's own scale-0 feature.
pub fn sparse_interpolate(
    tape: &mut Tape,
    parent_grid: &VoxelGrid,
    parent_feats: NodeId,
    out_grid: &VoxelGrid,
    own_feats: NodeId,
    c: usize,
) -> NodeId {
    assert_eq!(parent_grid.scale(), out_grid.scale() + 1);
    let n = out_grid.len();

    // Weight of each of the 8 surrounding parents, before renormalization.
    // The scale-0 center sits at (coord − 0.5)/2 in parent index space.
    let mut per_corner: Vec<(Vec<usize>, Vec<usize>, Vec<f64>)> =
        vec![(Vec::new(), Vec::new(), Vec::new()); 8];
    let mut total_weight = vec![0.0_f64; n];
    for (i, &oc) in out_grid.coords().iter().enumerate() {
        let idx = [
            (oc.x as f64 - 0.5) / 2.0,
            (oc.y as f64 - 0.5) / 2.0,
            (oc.z as f64 - 0.5) / 2.0,
        ];
        let base = [
            idx[0].floor() as i64,
            idx[1].floor() as i64,
            idx[2].floor() as i64,
        ];
        let frac = [
            idx[0] - base[0] as f64,
            idx[1] - base[1] as f64,
            idx[2] - base[2] as f64,
        ];
        for (corner, &(cx, cy, cz)) in super::conv::CHILD_OFFSETS.iter().enumerate() {
            let parent = VoxelCoord::new(base[0] + cx, base[1] + cy, base[2] + cz);
            let Some(row) = parent_grid.row_of(parent) else {
                continue;
            };
            let w = [cx, cy, cz]
                .iter()
                .zip(&frac)
                .map(|(&o, &f)| if o == 0 { 1.0 - f } else { f })
                .product::<f64>();
            if w == 0.0 {
                continue;
            }
            per_corner[corner].0.push(row);
            per_corner[corner].1.push(i);
            per_corner[corner].2.push(w);
            total_weight[i] += w;
        }
    }

    let zeros = Tensor::zeros(vec![n, c]);
    let mut acc = tape.constant(&zeros);
    for (rows, outs, weights) in &per_corner {
        if rows.is_empty() {
            continue;
        }
        let gathered = tape.gather_rows(parent_feats, rows);
        let mut scale_rows = vec![0.0; rows.len() * c];
        for (r, &w) in weights.iter().enumerate() {
            scale_rows[r * c..(r + 1) * c].fill(w);
        }
        let scaler = tape.constant(&Tensor::new(vec![rows.len(), c], scale_rows));
        let weighted = tape.mul(gathered, scaler);
        let scattered = tape.scatter_add_rows(weighted, outs, n);
        acc = tape.add(acc, scattered);
    }

    // Renormalize over present parents; rows without any parent stay zero.
    let mut norm = vec![0.0; n * c];
    for i in 0..n {
        let inv = if total_weight[i] > 0.0 {
            1.0 / total_weight[i]
        } else {
            0.0
        };
        norm[i * c..(i + 1) * c].fill(inv);
    }
    let norm_node = tape.constant(&Tensor::new(vec![n, c], norm));
    let interp = tape.mul(acc, norm_node);

    tape.concat_cols(interp, own_feats)
}

/// Output of the full stage-1 stack.
pub struct StackedOut {
    /// Final predicted voxel set (scale 0, post-prune).
    pub v_out: VoxelGrid,
    /// `[N × 2·OUT_WIDTH]` per-voxel features of `v_out` (sparse
    /// interpolation from scale 1 concatenated with the own scale-0
    /// feature).
    pub f_v: NodeId,
    /// Final-level logit group of the last stack (pre-prune candidates).
    pub final_group: LevelGroup,
    /// Intermediate supervision groups: every decoder level of the earlier
    /// stacks plus the non-final levels of the last stack.
    pub mid_groups: Vec<LevelGroup>,
}

/// Runs the hourglass stacks in sequence; the output grid of one stack is
/// the input grid of the next.
pub fn stacked_forward(
    tape: &mut Tape,
    grid: &VoxelGrid,
    feats: NodeId,
    stacks: &[&HourglassBound],
    tau: f64,
    policy: PrunePolicy,
) -> Result<StackedOut, VoxelError> {
    assert!(!stacks.is_empty(), "at least one hourglass stack");

    let mut mid_groups = Vec::new();
    let mut cur_grid = grid.clone();
    let mut cur_feats = feats;
    let mut last: Option<HourglassOut> = None;
    for (s, bound) in stacks.iter().enumerate() {
        let out = hourglass_forward(tape, &cur_grid, cur_feats, bound, tau, policy)?;
        cur_grid = out.grid.clone();
        cur_feats = out.feats;
        let is_last = s + 1 == stacks.len();
        for (l, group) in out.levels.iter().enumerate() {
            if !(is_last && l + 1 == DECODER_LEVELS) {
                mid_groups.push(group.clone());
            }
        }
        last = Some(out);
    }
    let last = last.expect("at least one stack ran");
    let final_group = last.levels.last().expect("decoder levels").clone();

    let f_v = sparse_interpolate(
        tape,
        &last.dec_scale1.0,
        last.dec_scale1.1,
        &last.grid,
        last.feats,
        OUT_WIDTH,
    );

    Ok(StackedOut {
        v_out: last.grid,
        f_v,
        final_group,
        mid_groups,
    })
}

/// Ground-truth cell occupancy per scale level, the label source for
/// occupancy classification: a candidate voxel is positive iff any
/// ground-truth point falls inside its cell.
#[derive(Debug)]
pub struct GtOccupancy {
    sets: Vec<HashSet<VoxelCoord>>,
    l_vox: f64,
}

impl GtOccupancy {
    pub fn build(gt: &PointCloud, l_vox: f64, max_scale: u32) -> Self {
        let mut sets = Vec::with_capacity(max_scale as usize + 1);
        for s in 0..=max_scale {
            let cell = l_vox * f64::from(1u32 << s);
            let set: HashSet<VoxelCoord> = gt
                .iter()
                .map(|p| {
                    VoxelCoord::new(
                        (p[0] / cell).floor() as i64,
                        (p[1] / cell).floor() as i64,
                        (p[2] / cell).floor() as i64,
                    )
                })
                .collect();
            sets.push(set);
        }
        Self { sets, l_vox }
    }

    pub fn l_vox(&self) -> f64 {
        self.l_vox
    }

    pub fn is_occupied(&self, c: VoxelCoord, scale: u32) -> bool {
        self.sets[scale as usize].contains(&c)
    }

    /// Binary targets for a candidate group.
    pub fn labels(&self, coords: &[VoxelCoord], scale: u32) -> Vec<f64> {
        coords
            .iter()
            .map(|&c| f64::from(u8::from(self.is_occupied(c, scale))))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, DEFAULT_FD_STEP};
    use crate::voxel::voxelize;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn sphere_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                // Box–Muller pairs normalized to the sphere surface
                let mut v = [0.0; 3];
                loop {
                    for a in &mut v {
                        let (u1, u2): (f64, f64) = (rng.gen(), rng.gen());
                        *a = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                    }
                    let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                    if norm > 1e-9 {
                        for a in &mut v {
                            *a = 0.5 + 0.35 * *a / norm;
                        }
                        break;
                    }
                }
                v
            })
            .collect()
    }

    #[test]
    fn hourglass_output_is_subset_of_candidates() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let cloud = sphere_cloud(512, 9);
        let (grid, feats, _) = voxelize(&cloud, 0.05).unwrap();
        let params = HourglassParams::init(4, &mut rng);
        let mut tape = Tape::new();
        let f = tape.constant(&feats);
        let bound = params.bind(&mut tape, false);
        let out = hourglass_forward(
            &mut tape,
            &grid,
            f,
            &bound,
            0.5,
            PrunePolicy::RescueBest,
        )
        .unwrap();
        let final_candidates: HashSet<VoxelCoord> =
            out.levels.last().unwrap().coords.iter().copied().collect();
        assert!(out
            .grid
            .coords()
            .iter()
            .all(|c| final_candidates.contains(c)));
        assert_eq!(out.levels.len(), DECODER_LEVELS);
    }

    #[test]
    fn forced_positive_bias_disables_pruning() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let cloud = sphere_cloud(256, 10);
        let (grid, feats, _) = voxelize(&cloud, 0.05).unwrap();
        let mut params = HourglassParams::init(4, &mut rng);
        for b in &mut params.head_b {
            *b = Tensor::new(vec![1], vec![10.0]);
        }
        // small weights keep the +10 bias dominant at every level
        for w in &mut params.head_w {
            let scaled: Vec<f64> = w.data().iter().map(|v| v * 1e-3).collect();
            *w = Tensor::new(w.shape().to_vec(), scaled);
        }
        let mut tape = Tape::new();
        let f = tape.constant(&feats);
        let bound = params.bind(&mut tape, false);
        let out =
            hourglass_forward(&mut tape, &grid, f, &bound, 0.5, PrunePolicy::Strict).unwrap();
        // no pruning anywhere: final output equals the full candidate set
        assert_eq!(out.grid.len(), out.levels.last().unwrap().coords.len());
    }

    #[test]
    fn candidate_coordinates_match_arithmetic_replay() {
        // Replays the floor/child coordinate arithmetic level by level and
        // compares against the network's candidate sets (pruning disabled
        // via +10 bias so the sets stay maximal).
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let cloud = sphere_cloud(200, 11);
        let (grid, feats, _) = voxelize(&cloud, 0.05).unwrap();
        let mut params = HourglassParams::init(4, &mut rng);
        for b in &mut params.head_b {
            *b = Tensor::new(vec![1], vec![10.0]);
        }
        for w in &mut params.head_w {
            let scaled: Vec<f64> = w.data().iter().map(|v| v * 1e-3).collect();
            *w = Tensor::new(w.shape().to_vec(), scaled);
        }
        let mut tape = Tape::new();
        let f = tape.constant(&feats);
        let bound = params.bind(&mut tape, false);
        let out =
            hourglass_forward(&mut tape, &grid, f, &bound, 0.5, PrunePolicy::Strict).unwrap();

        // encoder replay: three rounds of dedup(floor(c/2))
        let mut level_coords: Vec<HashSet<VoxelCoord>> = Vec::new();
        let mut cur: HashSet<VoxelCoord> = grid.coords().iter().copied().collect();
        for _ in 0..3 {
            cur = cur.iter().map(|c| c.parent()).collect();
            level_coords.push(cur.clone());
        }
        // decoder replay: all children of the (unpruned) previous level
        let mut expect = Vec::new();
        let mut parents = level_coords[2].clone();
        for _ in 0..3 {
            let children: HashSet<VoxelCoord> = parents
                .iter()
                .flat_map(|p| {
                    super::super::conv::CHILD_OFFSETS.iter().map(move |&(x, y, z)| {
                        VoxelCoord::new(2 * p.x + x, 2 * p.y + y, 2 * p.z + z)
                    })
                })
                .collect();
            expect.push(children.clone());
            parents = children;
        }
        for (lvl, exp) in out.levels.iter().zip(&expect) {
            let got: HashSet<VoxelCoord> = lvl.coords.iter().copied().collect();
            assert_eq!(&got, exp);
        }
    }

    #[test]
    fn stacked_single_stack_reduces_to_hourglass() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let cloud = sphere_cloud(300, 12);
        let (grid, feats, _) = voxelize(&cloud, 0.05).unwrap();
        let params = HourglassParams::init(4, &mut rng);

        let mut tape = Tape::new();
        let f = tape.constant(&feats);
        let bound = params.bind(&mut tape, false);
        let direct =
            hourglass_forward(&mut tape, &grid, f, &bound, 0.5, PrunePolicy::RescueBest).unwrap();

        let mut tape2 = Tape::new();
        let f2 = tape2.constant(&feats);
        let bound2 = params.bind(&mut tape2, false);
        let stacked = stacked_forward(
            &mut tape2,
            &grid,
            f2,
            &[&bound2],
            0.5,
            PrunePolicy::RescueBest,
        )
        .unwrap();

        assert_eq!(stacked.v_out.coords(), direct.grid.coords());
        assert_eq!(stacked.mid_groups.len(), DECODER_LEVELS - 1);
        assert_eq!(
            tape2.value(stacked.final_group.logits),
            tape.value(direct.levels.last().unwrap().logits)
        );
    }

    #[test]
    fn stacked_two_stacks_group_count() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let cloud = sphere_cloud(300, 13);
        let (grid, feats, _) = voxelize(&cloud, 0.05).unwrap();
        let p1 = HourglassParams::init(4, &mut rng);
        let p2 = HourglassParams::init(OUT_WIDTH, &mut rng);
        let mut tape = Tape::new();
        let f = tape.constant(&feats);
        let b1 = p1.bind(&mut tape, false);
        let b2 = p2.bind(&mut tape, false);
        let out = stacked_forward(
            &mut tape,
            &grid,
            f,
            &[&b1, &b2],
            0.5,
            PrunePolicy::RescueBest,
        )
        .unwrap();
        // (levels−1 intermediates × 2 stacks) + stack-1 final group
        assert_eq!(out.mid_groups.len(), 2 * (DECODER_LEVELS - 1) + 1);
        assert_eq!(tape.shape(out.f_v), &[out.v_out.len(), 2 * OUT_WIDTH]);
    }

    #[test]
    fn interpolate_single_parent_renormalizes_to_identity() {
        // one parent voxel; an output voxel in its support takes exactly
        // that parent's feature
        let parent_grid = VoxelGrid::new(vec![VoxelCoord::new(0, 0, 0)], 1);
        let out_grid = VoxelGrid::new(vec![VoxelCoord::new(0, 0, 0)], 0);
        let mut tape = Tape::new();
        let pf = tape.constant(&Tensor::new(vec![1, 2], vec![3.0, -1.5]));
        let own = tape.constant(&Tensor::new(vec![1, 2], vec![9.0, 9.5]));
        let out = sparse_interpolate(&mut tape, &parent_grid, pf, &out_grid, own, 2);
        assert_eq!(tape.value(out), &[3.0, -1.5, 9.0, 9.5]);
    }

    #[test]
    fn interpolate_no_parent_leaves_zero_half() {
        let parent_grid = VoxelGrid::new(vec![VoxelCoord::new(50, 50, 50)], 1);
        let out_grid = VoxelGrid::new(vec![VoxelCoord::new(0, 0, 0)], 0);
        let mut tape = Tape::new();
        let pf = tape.constant(&Tensor::new(vec![1, 2], vec![3.0, -1.5]));
        let own = tape.constant(&Tensor::new(vec![1, 2], vec![9.0, 9.5]));
        let out = sparse_interpolate(&mut tape, &parent_grid, pf, &out_grid, own, 2);
        assert_eq!(tape.value(out), &[0.0, 0.0, 9.0, 9.5]);
    }

    #[test]
    fn interpolate_matches_direct_weighted_sum() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        for _ in 0..10 {
            // random parent set around the origin
            let mut parents = Vec::new();
            for _ in 0..rng.gen_range(2..10) {
                let c = VoxelCoord::new(
                    rng.gen_range(-2..3),
                    rng.gen_range(-2..3),
                    rng.gen_range(-2..3),
                );
                if !parents.contains(&c) {
                    parents.push(c);
                }
            }
            let parent_grid = VoxelGrid::new(parents.clone(), 1);
            let c = 3;
            let pf_data: Vec<f64> = (0..parents.len() * c)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let mut out_coords = vec![VoxelCoord::new(
                rng.gen_range(-4..5),
                rng.gen_range(-4..5),
                rng.gen_range(-4..5),
            )];
            loop {
                let c = VoxelCoord::new(
                    rng.gen_range(-4..5),
                    rng.gen_range(-4..5),
                    rng.gen_range(-4..5),
                );
                if c != out_coords[0] {
                    out_coords.push(c);
                    break;
                }
            }
            let out_grid = VoxelGrid::new(out_coords, 0);
            let n = out_grid.len();
            let own: Vec<f64> = (0..n * c).map(|_| rng.gen_range(-1.0..1.0)).collect();

            let mut tape = Tape::new();
            let pf = tape.constant(&Tensor::new(vec![parents.len(), c], pf_data.clone()));
            let ow = tape.constant(&Tensor::new(vec![n, c], own.clone()));
            let got = sparse_interpolate(&mut tape, &parent_grid, pf, &out_grid, ow, c);

            // direct oracle
            for (i, &oc) in out_grid.coords().iter().enumerate() {
                let idx = [
                    (oc.x as f64 - 0.5) / 2.0,
                    (oc.y as f64 - 0.5) / 2.0,
                    (oc.z as f64 - 0.5) / 2.0,
                ];
                let mut acc = vec![0.0; c];
                let mut total = 0.0;
                for bx in 0..2_i64 {
                    for by in 0..2_i64 {
                        for bz in 0..2_i64 {
                            let q = VoxelCoord::new(
                                idx[0].floor() as i64 + bx,
                                idx[1].floor() as i64 + by,
                                idx[2].floor() as i64 + bz,
                            );
                            let Some(row) = parents.iter().position(|&p| p == q) else {
                                continue;
                            };
                            let fr = [
                                idx[0] - idx[0].floor(),
                                idx[1] - idx[1].floor(),
                                idx[2] - idx[2].floor(),
                            ];
                            let w = (if bx == 0 { 1.0 - fr[0] } else { fr[0] })
                                * (if by == 0 { 1.0 - fr[1] } else { fr[1] })
                                * (if bz == 0 { 1.0 - fr[2] } else { fr[2] });
                            total += w;
                            for ch in 0..c {
                                acc[ch] += w * pf_data[row * c + ch];
                            }
                        }
                    }
                }
                let row = tape.value(got);
                for ch in 0..c {
                    let expect = if total > 0.0 { acc[ch] / total } else { 0.0 };
                    assert!(
                        (row[i * 2 * c + ch] - expect).abs() < 1e-12,
                        "interp mismatch"
                    );
                    assert_eq!(row[i * 2 * c + c + ch], own[i * c + ch]);
                }
            }
        }
    }

    #[test]
    fn stacked_forward_is_differentiable() {
        // gradient check through both stacks w.r.t. the input features on
        // a ~20-voxel toy input
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let cloud = sphere_cloud(40, 14);
        let (grid, feats, _) = voxelize(&cloud, 0.12).unwrap();
        assert!(grid.len() >= 15 && grid.len() <= 40, "toy size {}", grid.len());
        let p1 = HourglassParams::init(4, &mut rng);
        let p2 = HourglassParams::init(OUT_WIDTH, &mut rng);
        let occ = GtOccupancy::build(&cloud, 0.12, 3);

        let err = grad_check(
            |tape, fid| {
                let b1 = p1.bind(tape, false);
                let b2 = p2.bind(tape, false);
                let out = stacked_forward(
                    tape,
                    &grid,
                    fid,
                    &[&b1, &b2],
                    0.5,
                    PrunePolicy::RescueBest,
                )
                .unwrap();
                let labels = occ.labels(&out.final_group.coords, out.final_group.scale);
                let mut loss = tape.bce_with_logits(out.final_group.logits, &labels);
                for g in &out.mid_groups {
                    let l = occ.labels(&g.coords, g.scale);
                    let lb = tape.bce_with_logits(g.logits, &l);
                    let half = tape.scale(lb, 0.5 / out.mid_groups.len() as f64);
                    loss = tape.add(loss, half);
                }
                // fold the interpolated features in so their path is
                // exercised too
                let fv_sq = tape.mul(out.f_v, out.f_v);
                let fv_term = tape.mean_all(fv_sq);
                let fv_scaled = tape.scale(fv_term, 0.1);
                tape.add(loss, fv_scaled)
            },
            &feats,
            DEFAULT_FD_STEP,
        );
        assert!(err < 1e-4, "stacked forward grad error {err}");
    }
}
