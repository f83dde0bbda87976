//! Offset regression: neighbor gathering, token assembly, attention, and
//! the bounded per-voxel displacement.

use rand::Rng;

use super::attention::{attention_block, AttnBlockBound, AttnBlockParams};
use super::knn::{knn_shell, NeighborSet};
use super::pe::{amplified_pe, plain_pe, AmpPeConfig, PeMode};
use super::RelocError;
use crate::cloud::PointCloud;
use crate::tensor::{NodeId, Tape, Tensor};
use crate::voxel::VoxelGrid;

fn uniform_init(rng: &mut impl Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = (1.0 / fan_in as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data)
}

/// Learnable parameters of the re-localization network: input projection,
/// two self-attention blocks, one cross-attention block, and the offset
/// head (zero-initialized so the untrained network maps voxels to their
/// centers).
#[derive(Clone, Debug)]
pub struct RelocParams {
    pub c_feat: usize,
    pub c: usize,
    pub heads: usize,
    pub k: usize,
    pub proj_w: Tensor,
    pub proj_b: Tensor,
    pub self_blocks: [AttnBlockParams; 2],
    pub cross_block: AttnBlockParams,
    pub offset_w: Tensor,
    pub offset_b: Tensor,
}

impl RelocParams {
    pub fn init(c_feat: usize, c: usize, heads: usize, k: usize, rng: &mut impl Rng) -> Self {
        assert!(k >= 1);
        Self {
            c_feat,
            c,
            heads,
            k,
            proj_w: uniform_init(rng, vec![c_feat, c], c_feat),
            proj_b: Tensor::zeros(vec![c]),
            self_blocks: [
                AttnBlockParams::init(c, heads, rng),
                AttnBlockParams::init(c, heads, rng),
            ],
            cross_block: AttnBlockParams::init(c, heads, rng),
            offset_w: Tensor::zeros(vec![c, 3]),
            offset_b: Tensor::zeros(vec![3]),
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("proj.w".to_string(), &self.proj_w),
            ("proj.b".to_string(), &self.proj_b),
        ];
        for (i, b) in self.self_blocks.iter().enumerate() {
            out.extend(b.named_params(&format!("self{i}")));
        }
        out.extend(self.cross_block.named_params("cross"));
        out.push(("offset.w".to_string(), &self.offset_w));
        out.push(("offset.b".to_string(), &self.offset_b));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("proj.w".to_string(), &mut self.proj_w),
            ("proj.b".to_string(), &mut self.proj_b),
        ];
        for (i, b) in self.self_blocks.iter_mut().enumerate() {
            out.extend(b.named_params_mut(&format!("self{i}")));
        }
        out.extend(self.cross_block.named_params_mut("cross"));
        out.push(("offset.w".to_string(), &mut self.offset_w));
        out.push(("offset.b".to_string(), &mut self.offset_b));
        out
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> RelocBound {
        fn place(tape: &mut Tape, t: &Tensor, trainable: bool) -> NodeId {
            if trainable {
                tape.param(t)
            } else {
                tape.constant(t)
            }
        }
        RelocBound {
            c: self.c,
            k: self.k,
            proj_w: place(tape, &self.proj_w, trainable),
            proj_b: place(tape, &self.proj_b, trainable),
            self_blocks: [
                self.self_blocks[0].bind(tape, trainable),
                self.self_blocks[1].bind(tape, trainable),
            ],
            cross_block: self.cross_block.bind(tape, trainable),
            offset_w: place(tape, &self.offset_w, trainable),
            offset_b: place(tape, &self.offset_b, trainable),
        }
    }
}

/// Tape-bound re-localization parameters.
#[derive(Clone, Debug)]
pub struct RelocBound {
    pub c: usize,
    pub k: usize,
    pub proj_w: NodeId,
    pub proj_b: NodeId,
    pub self_blocks: [AttnBlockBound; 2],
    pub cross_block: AttnBlockBound,
    pub offset_w: NodeId,
    pub offset_b: NodeId,
}

impl RelocBound {
    /// Node ids in the same order as [`RelocParams::named_params`].
    pub fn ids(&self) -> Vec<NodeId> {
        let mut out = vec![self.proj_w, self.proj_b];
        for b in &self.self_blocks {
            out.extend(b.ids());
        }
        out.extend(self.cross_block.ids());
        out.push(self.offset_w);
        out.push(self.offset_b);
        out
    }
}

/// K neighborhoods for the listed query rows.
pub fn neighbor_sets(grid: &VoxelGrid, rows: &[usize], k: usize, l_vox: f64) -> Vec<NeighborSet> {
    rows.iter()
        .map(|&r| knn_shell(grid, grid.coords()[r], k, l_vox))
        .collect()
}

/// Positional encoding for the given displacement under the chosen mode,
/// zero-padded from the largest multiple of 6 up to `c` channels.
fn pe_vector(d: [f64; 3], mode: PeMode, c: usize, l_vox: f64) -> Vec<f64> {
    let pe_dim = (c / 6) * 6;
    let mut v = match mode {
        PeMode::None => vec![0.0; pe_dim],
        PeMode::Plain => plain_pe(d, &AmpPeConfig::new(pe_dim, l_vox)),
        PeMode::Amplified => amplified_pe(d, &AmpPeConfig::new(pe_dim, l_vox)),
    };
    v.resize(c, 0.0);
    v
}

/// Token assembly plus attention for the given neighbor sets; returns the
/// `[Q×3]` relocated points, one per query voxel, each inside the open
/// half-cell box around its voxel center.
pub fn relocalize_sets(
    tape: &mut Tape,
    grid: &VoxelGrid,
    feats: NodeId,
    sets: &[NeighborSet],
    bound: &RelocBound,
    l_vox: f64,
    mode: PeMode,
) -> NodeId {
    assert!(!sets.is_empty(), "relocalize over no queries");
    let k = bound.k;
    let c = bound.c;
    let nq = sets.len();

    // Project every voxel feature once, then gather tokens per neighborhood.
    let projected = tape.matmul(feats, bound.proj_w);
    let projected = tape.add_row_bias(projected, bound.proj_b);

    let mut neighbor_rows = Vec::with_capacity(nq * k);
    let mut query_rows = Vec::with_capacity(nq);
    let mut pe_data = Vec::with_capacity(nq * k * c);
    let mut mask = Vec::with_capacity(nq * k);
    for set in sets {
        assert_eq!(set.rows.len(), k, "neighbor sets must be padded to K");
        let query_row = grid
            .row_of(set.query)
            .expect("query voxel must belong to the grid");
        query_rows.push(query_row);
        for (i, &row) in set.rows.iter().enumerate() {
            neighbor_rows.push(row);
            pe_data.extend(pe_vector(set.displacements[i], mode, c, l_vox));
            mask.push(set.pad[i]);
        }
    }

    let gathered = tape.gather_rows(projected, &neighbor_rows);
    let pe_node = tape.constant(&Tensor::new(vec![nq * k, c], pe_data));
    let mut tokens = tape.add(gathered, pe_node);

    for block in &bound.self_blocks {
        tokens = attention_block(tape, tokens, tokens, nq, block, Some(&mask));
    }

    let query_feats = tape.gather_rows(projected, &query_rows);
    let query_pe: Vec<f64> = pe_vector([0.0; 3], mode, c, l_vox)
        .into_iter()
        .cycle()
        .take(nq * c)
        .collect();
    let query_pe_node = tape.constant(&Tensor::new(vec![nq, c], query_pe));
    let query_tokens = tape.add(query_feats, query_pe_node);

    let fused = attention_block(tape, query_tokens, tokens, nq, &bound.cross_block, Some(&mask));

    let raw = tape.matmul(fused, bound.offset_w);
    let raw = tape.add_row_bias(raw, bound.offset_b);
    let squashed = tape.tanh(raw);
    // tanh rounds to exactly 1.0 beyond |raw| ≈ 19 in f64; shave the
    // half-cell factor so the open-box bound |Δv| < l_vox/2 holds even
    // under saturation.
    let delta = tape.scale(squashed, (l_vox / 2.0) * (1.0 - 1e-12));

    let centers: Vec<f64> = query_rows
        .iter()
        .flat_map(|&r| grid.center(r, l_vox))
        .collect();
    let centers_node = tape.constant(&Tensor::new(vec![nq, 3], centers));
    tape.add(centers_node, delta)
}

const INFERENCE_CHUNK: usize = 512;

/// Full inference over every voxel of the grid: exactly one output point
/// per voxel, in row order. Queries run in chunks on throwaway tapes to
/// bound memory.
pub fn relocalize(
    grid: &VoxelGrid,
    feats: &Tensor,
    params: &RelocParams,
    l_vox: f64,
    mode: PeMode,
) -> Result<PointCloud, RelocError> {
    if grid.is_empty() {
        return Err(RelocError::EmptyVoxels);
    }
    assert_eq!(feats.shape(), &[grid.len(), params.c_feat]);

    let mut out = PointCloud::default();
    let rows: Vec<usize> = (0..grid.len()).collect();
    for chunk in rows.chunks(INFERENCE_CHUNK) {
        let mut tape = Tape::new();
        let f = tape.constant(feats);
        let bound = params.bind(&mut tape, false);
        let sets = neighbor_sets(grid, chunk, params.k, l_vox);
        let points = relocalize_sets(&mut tape, grid, f, &sets, &bound, l_vox, mode);
        for p in tape.value(points).chunks(3) {
            out.push([p[0], p[1], p[2]]);
        }
    }
    Ok(out)
}
