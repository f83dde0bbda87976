//! Two-phase training protocol, reconstruction, and evaluation.
//!
//! Stage 1 optimizes the voxel generation loss over all candidate voxels
//! (labels from ground-truth cell membership, supervision applied
//! pre-pruning). Stage 2 freezes the voxel network — its parameters leave
//! the optimizer and gradients stop at the extracted voxel features — and
//! optimizes the chamfer loss of the relocated points. Both stages share
//! hyperparameters: Adam, the halving learning-rate schedule, and the
//! batch size.

mod checkpoint;

pub use checkpoint::{NetworkCheckpoint, CHECKPOINT_VERSION};

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::cloud::{Point3, PointCloud};
use crate::data::{
    read_manifest, AugmentConfig, DataError, DatasetConfig, SampleEntry, Split,
};
use crate::metrics::{voxel_loss, MetricError};
use crate::reloc::{
    neighbor_sets, relocalize, relocalize_sets, PeMode, RelocError, RelocParams,
};
use crate::tensor::{AdamState, NodeId, Tape, Tensor};
use crate::voxel::{
    stacked_forward, voxelize, GtOccupancy, HourglassParams, PrunePolicy, StackedOut,
    VoxelError, VoxelGrid,
};

/// Pruning threshold on occupancy probability: the BCE decision boundary.
pub const PRUNE_TAU: f64 = 0.5;
/// Attention heads in the re-localization network.
pub const RELOC_HEADS: usize = 4;
/// Feature width handed from stage 1 to stage 2 (interpolated ++ own).
pub const STAGE1_FEATURE_WIDTH: usize = 2 * crate::voxel::OUT_WIDTH;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("stage 1 has not been trained")]
    MissingStage1,
    #[error("checkpoint lacks a trained stage (need both stages for reconstruction)")]
    MissingStages,
    #[error("reconstruction failure: pruning removed every voxel")]
    ReconstructionFailure,
    #[error(transparent)]
    Metric(#[from] MetricError),
}

impl From<VoxelError> for TrainError {
    fn from(e: VoxelError) -> Self {
        match e {
            VoxelError::EmptyPrune => TrainError::ReconstructionFailure,
            other => TrainError::InvalidInput(other.to_string()),
        }
    }
}

impl From<RelocError> for TrainError {
    fn from(e: RelocError) -> Self {
        TrainError::InvalidInput(e.to_string())
    }
}

/// Run hyperparameters. Desk-scale defaults; the published voxel length
/// (0.02) stays selectable through the config file.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub l_vox: f64,
    pub epochs: usize,
    pub lr: f64,
    pub lr_halve_every: usize,
    pub batch: usize,
    pub k: usize,
    pub c: usize,
    pub seed: u64,
    pub n_shapes: usize,
    pub gt_points: usize,
    pub input_points: usize,
    /// Query voxels per sample per stage-2 step (stochastic minibatch over
    /// queries; full inference always relocates every voxel).
    pub stage2_queries: usize,
    /// Ground-truth subsample cap for the stage-2 training loss.
    pub stage2_gt_cap: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            l_vox: 0.05,
            epochs: 10,
            lr: 1e-3,
            lr_halve_every: 2,
            batch: 4,
            k: 8,
            c: 32,
            seed: 0,
            n_shapes: 200,
            gt_points: 10_000,
            input_points: 2048,
            stage2_queries: 256,
            stage2_gt_cap: 4096,
        }
    }
}

impl RunConfig {
    /// Learning rate halves every `lr_halve_every` epochs (0-indexed):
    /// epochs 0,1 run at `lr`, 2,3 at `lr/2`, and so on.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.lr_halve_every == 0 {
            return self.lr;
        }
        self.lr * 0.5_f64.powi((epoch / self.lr_halve_every) as i32)
    }

    pub fn to_kv_lines(&self) -> Vec<String> {
        vec![
            format!("l_vox={:?}", self.l_vox),
            format!("epochs={}", self.epochs),
            format!("lr={:?}", self.lr),
            format!("lr_halve_every={}", self.lr_halve_every),
            format!("batch={}", self.batch),
            format!("k={}", self.k),
            format!("c={}", self.c),
            format!("seed={}", self.seed),
            format!("n_shapes={}", self.n_shapes),
            format!("gt_points={}", self.gt_points),
            format!("input_points={}", self.input_points),
            format!("stage2_queries={}", self.stage2_queries),
            format!("stage2_gt_cap={}", self.stage2_gt_cap),
        ]
    }

    pub fn from_kv_lines(lines: &[String]) -> Result<Self, TrainError> {
        let mut cfg = Self::default();
        for line in lines {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| TrainError::BadConfig(format!("expected key=value: {line}")))?;
            let bad = |what: &str| TrainError::BadConfig(format!("bad {what}: {value}"));
            match key.trim() {
                "l_vox" => cfg.l_vox = value.parse().map_err(|_| bad("l_vox"))?,
                "epochs" => cfg.epochs = value.parse().map_err(|_| bad("epochs"))?,
                "lr" => cfg.lr = value.parse().map_err(|_| bad("lr"))?,
                "lr_halve_every" => {
                    cfg.lr_halve_every = value.parse().map_err(|_| bad("lr_halve_every"))?
                }
                "batch" => cfg.batch = value.parse().map_err(|_| bad("batch"))?,
                "k" => cfg.k = value.parse().map_err(|_| bad("k"))?,
                "c" => cfg.c = value.parse().map_err(|_| bad("c"))?,
                "seed" => cfg.seed = value.parse().map_err(|_| bad("seed"))?,
                "n_shapes" => cfg.n_shapes = value.parse().map_err(|_| bad("n_shapes"))?,
                "gt_points" => cfg.gt_points = value.parse().map_err(|_| bad("gt_points"))?,
                "input_points" => {
                    cfg.input_points = value.parse().map_err(|_| bad("input_points"))?
                }
                "stage2_queries" => {
                    cfg.stage2_queries = value.parse().map_err(|_| bad("stage2_queries"))?
                }
                "stage2_gt_cap" => {
                    cfg.stage2_gt_cap = value.parse().map_err(|_| bad("stage2_gt_cap"))?
                }
                other => {
                    return Err(TrainError::BadConfig(format!("unknown key: {other}")));
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path)?;
        let lines: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        Self::from_kv_lines(&lines)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let positive = [
            ("l_vox", self.l_vox),
            ("lr", self.lr),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(TrainError::BadConfig(format!("{name} must be positive")));
            }
        }
        if self.batch == 0 || self.k == 0 || self.n_shapes == 0 {
            return Err(TrainError::BadConfig(
                "batch, k, and n_shapes must be positive".into(),
            ));
        }
        if self.c % RELOC_HEADS != 0 {
            return Err(TrainError::BadConfig(format!(
                "c must be divisible by {RELOC_HEADS} heads"
            )));
        }
        if self.c < 6 {
            return Err(TrainError::BadConfig("c too small for the encoding".into()));
        }
        Ok(())
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            n_shapes: self.n_shapes,
            gt_points: self.gt_points,
            augment: AugmentConfig {
                input_points: self.input_points,
                ..AugmentConfig::default()
            },
            train_fraction: 0.8,
        }
    }
}

fn sub_seed(base: u64, tag: u64, index: u64) -> u64 {
    let mut z = base ^ tag.rotate_left(17) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Both hourglass stacks of the voxel generation network.
#[derive(Clone, Debug)]
pub struct Stage1Net {
    pub hg1: HourglassParams,
    pub hg2: HourglassParams,
}

impl Stage1Net {
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(sub_seed(seed, 0x5731, 0));
        let hg1 = HourglassParams::init(4, &mut rng);
        let hg2 = HourglassParams::init(crate::voxel::OUT_WIDTH, &mut rng);
        Self { hg1, hg2 }
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        for (n, t) in self.hg1.named_params() {
            out.push((format!("s1.hg1.{n}"), t));
        }
        for (n, t) in self.hg2.named_params() {
            out.push((format!("s1.hg2.{n}"), t));
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        for (n, t) in self.hg1.named_params_mut() {
            out.push((format!("s1.hg1.{n}"), t));
        }
        for (n, t) in self.hg2.named_params_mut() {
            out.push((format!("s1.hg2.{n}"), t));
        }
        out
    }

    pub fn from_tensors(tensors: &[(String, Tensor)]) -> Result<Self, TrainError> {
        let mut net = Self::init(0);
        fill_params(net.named_params_mut(), tensors)?;
        Ok(net)
    }
}

fn reloc_init(cfg: &RunConfig) -> RelocParams {
    let mut rng = ChaCha12Rng::seed_from_u64(sub_seed(cfg.seed, 0x5732, 0));
    RelocParams::init(STAGE1_FEATURE_WIDTH, cfg.c, RELOC_HEADS, cfg.k, &mut rng)
}

fn reloc_named(params: &RelocParams) -> Vec<(String, &Tensor)> {
    params
        .named_params()
        .into_iter()
        .map(|(n, t)| (format!("s2.{n}"), t))
        .collect()
}

fn reloc_from_tensors(cfg: &RunConfig, tensors: &[(String, Tensor)]) -> Result<RelocParams, TrainError> {
    let mut params = reloc_init(cfg);
    let named: Vec<(String, &mut Tensor)> = params
        .named_params_mut()
        .into_iter()
        .map(|(n, t)| (format!("s2.{n}"), t))
        .collect();
    fill_params(named, tensors)?;
    Ok(params)
}

fn fill_params(
    slots: Vec<(String, &mut Tensor)>,
    tensors: &[(String, Tensor)],
) -> Result<(), TrainError> {
    let by_name: HashMap<&str, &Tensor> =
        tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
    for (name, slot) in slots {
        let src = by_name
            .get(name.as_str())
            .ok_or_else(|| TrainError::BadCheckpoint(format!("missing tensor {name}")))?;
        if src.shape() != slot.shape() {
            return Err(TrainError::BadCheckpoint(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                src.shape(),
                slot.shape()
            )));
        }
        *slot = (*src).clone();
    }
    Ok(())
}

/// Per-sample training state shared by both stages.
struct Prepared {
    grid: VoxelGrid,
    feats: Tensor,
    occ: GtOccupancy,
    gt: PointCloud,
    split: Split,
}

fn prepare_samples(cfg: &RunConfig, entries: &[SampleEntry]) -> Result<Vec<Prepared>, TrainError> {
    let dcfg = cfg.dataset_config();
    let mut out = Vec::with_capacity(entries.len());
    for entry in entries {
        let (_, sample) = crate::data::build_sample(entry, &dcfg)?;
        let (grid, feats, _) = voxelize(&sample.input, cfg.l_vox)?;
        let occ = GtOccupancy::build(&sample.gt, cfg.l_vox, 3);
        out.push(Prepared {
            grid,
            feats,
            occ,
            gt: sample.gt,
            split: entry.split,
        });
    }
    Ok(out)
}

fn shuffled(indices: &[usize], seed: u64) -> Vec<usize> {
    let mut order = indices.to_vec();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

fn stage1_losses(
    tape: &mut Tape,
    out: &StackedOut,
    occ: &GtOccupancy,
) -> NodeId {
    let final_labels = occ.labels(&out.final_group.coords, out.final_group.scale);
    let mids: Vec<(NodeId, Vec<f64>)> = out
        .mid_groups
        .iter()
        .map(|g| (g.logits, occ.labels(&g.coords, g.scale)))
        .collect();
    voxel_loss(tape, out.final_group.logits, &final_labels, &mids)
}

/// Per-epoch stage-1 log record.
#[derive(Clone, Copy, Debug)]
pub struct Stage1Epoch {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_precision: f64,
    pub val_recall: f64,
}

/// Trains the voxel generation network and returns the checkpoint
/// (stage-1 flag set iff at least one epoch ran).
pub fn train_stage1(
    cfg: &RunConfig,
    data_dir: &Path,
    mut on_epoch: impl FnMut(&Stage1Epoch),
) -> Result<NetworkCheckpoint, TrainError> {
    cfg.validate()?;
    let entries = read_manifest(&data_dir.join("manifest.txt"))?;
    let prepared = prepare_samples(cfg, &entries)?;
    let train_idx: Vec<usize> = indices_of(&prepared, Split::Train);
    let val_idx: Vec<usize> = indices_of(&prepared, Split::Val);
    if train_idx.is_empty() {
        return Err(TrainError::InvalidInput("no training samples".into()));
    }

    let mut net = Stage1Net::init(cfg.seed);
    let mut adam = AdamState::new(cfg.lr);

    for epoch in 0..cfg.epochs {
        adam.lr = cfg.lr_at(epoch);
        let order = shuffled(&train_idx, sub_seed(cfg.seed, 0xE0C1, epoch as u64));
        let mut epoch_loss = 0.0;
        let mut n_batches = 0usize;

        for batch in order.chunks(cfg.batch) {
            let mut grad_acc: Vec<Vec<f64>> = net
                .named_params()
                .iter()
                .map(|(_, t)| vec![0.0; t.numel()])
                .collect();
            let mut batch_loss = 0.0;
            for &si in batch {
                let s = &prepared[si];
                let mut tape = Tape::new();
                let feats = tape.constant(&s.feats);
                let b1 = net.hg1.bind(&mut tape, true);
                let b2 = net.hg2.bind(&mut tape, true);
                let out = stacked_forward(
                    &mut tape,
                    &s.grid,
                    feats,
                    &[&b1, &b2],
                    PRUNE_TAU,
                    PrunePolicy::TeacherForce(&s.occ),
                )?;
                let loss = stage1_losses(&mut tape, &out, &s.occ);
                batch_loss += tape.value(loss)[0];
                let grads = tape.backward(loss);
                let ids: Vec<NodeId> = b1.ids().into_iter().chain(b2.ids()).collect();
                for (acc, id) in grad_acc.iter_mut().zip(&ids) {
                    if let Some(g) = grads.wrt(*id) {
                        for (a, v) in acc.iter_mut().zip(g) {
                            *a += v;
                        }
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for acc in &mut grad_acc {
                for v in acc.iter_mut() {
                    *v *= inv;
                }
            }
            apply_step(&mut adam, net.named_params_mut(), &grad_acc);
            epoch_loss += batch_loss * inv;
            n_batches += 1;
        }

        let (val_precision, val_recall) = stage1_val_stats(&net, &prepared, &val_idx)?;
        on_epoch(&Stage1Epoch {
            epoch,
            lr: adam.lr,
            train_loss: epoch_loss / n_batches.max(1) as f64,
            val_precision,
            val_recall,
        });
    }

    Ok(NetworkCheckpoint {
        version: CHECKPOINT_VERSION,
        config: cfg.clone(),
        stage1_done: cfg.epochs > 0,
        stage2_done: false,
        tensors: net
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect(),
    })
}

fn indices_of(prepared: &[Prepared], split: Split) -> Vec<usize> {
    prepared
        .iter()
        .enumerate()
        .filter(|(_, p)| p.split == split)
        .map(|(i, _)| i)
        .collect()
}

fn apply_step(adam: &mut AdamState, params: Vec<(String, &mut Tensor)>, grads: &[Vec<f64>]) {
    let mut tensors: Vec<&mut Tensor> = params.into_iter().map(|(_, t)| t).collect();
    let grad_refs: Vec<Option<&[f64]>> = grads.iter().map(|g| Some(g.as_slice())).collect();
    adam.apply(&mut tensors, &grad_refs);
}

/// Precision/recall of the final-level occupancy classification on the
/// held-out split, thresholded at probability 0.5.
fn stage1_val_stats(
    net: &Stage1Net,
    prepared: &[Prepared],
    val_idx: &[usize],
) -> Result<(f64, f64), TrainError> {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for &si in val_idx {
        let s = &prepared[si];
        let mut tape = Tape::new();
        let feats = tape.constant(&s.feats);
        let b1 = net.hg1.bind(&mut tape, false);
        let b2 = net.hg2.bind(&mut tape, false);
        let out = stacked_forward(
            &mut tape,
            &s.grid,
            feats,
            &[&b1, &b2],
            PRUNE_TAU,
            PrunePolicy::RescueBest,
        )?;
        let labels = s.occ.labels(&out.final_group.coords, out.final_group.scale);
        let logits = tape.value(out.final_group.logits);
        for (&z, &y) in logits.iter().zip(&labels) {
            let pred = z >= 0.0;
            let pos = y == 1.0;
            match (pred, pos) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
    }
    let precision = if tp + fp > 0 {
        tp as f64 / (tp + fp) as f64
    } else {
        0.0
    };
    let recall = if tp + fn_ > 0 {
        tp as f64 / (tp + fn_) as f64
    } else {
        0.0
    };
    Ok((precision, recall))
}

/// Frozen stage-1 inference: voxelize, run both stacks, extract the voxel
/// features. Gradients never flow back through the result.
pub fn stage1_infer(
    net: &Stage1Net,
    cfg: &RunConfig,
    input: &PointCloud,
    policy: PrunePolicy,
) -> Result<(VoxelGrid, Tensor), TrainError> {
    let (grid, feats, _) = voxelize(input, cfg.l_vox).map_err(|e| match e {
        VoxelError::EmptyInput => TrainError::InvalidInput("empty input point cloud".into()),
        other => TrainError::from(other),
    })?;
    let mut tape = Tape::new();
    let f = tape.constant(&feats);
    let b1 = net.hg1.bind(&mut tape, false);
    let b2 = net.hg2.bind(&mut tape, false);
    let out = stacked_forward(&mut tape, &grid, f, &[&b1, &b2], PRUNE_TAU, policy)?;
    let fv = tape.value_tensor(out.f_v);
    Ok((out.v_out, fv))
}

/// Per-epoch stage-2 log record. The epoch-0 entry reports the untrained
/// validation loss (no training step has run yet).
#[derive(Clone, Copy, Debug)]
pub struct Stage2Epoch {
    pub epoch: usize,
    pub lr: f64,
    /// None for the initial (pre-training) validation entry.
    pub train_loss: Option<f64>,
    pub val_loss: f64,
}

struct FrozenSample {
    grid: VoxelGrid,
    f_v: Tensor,
    gt_sub: Vec<Point3>,
    split: Split,
}

/// Trains the re-localization network on the inferred voxels of a frozen
/// stage 1, with identical hyperparameters.
pub fn train_stage2(
    cfg: &RunConfig,
    data_dir: &Path,
    stage1: &NetworkCheckpoint,
    mut on_epoch: impl FnMut(&Stage2Epoch),
) -> Result<NetworkCheckpoint, TrainError> {
    cfg.validate()?;
    if !stage1.stage1_done {
        return Err(TrainError::MissingStage1);
    }
    let s1 = Stage1Net::from_tensors(&stage1.tensors)?;

    let entries = read_manifest(&data_dir.join("manifest.txt"))?;
    let prepared = prepare_samples(cfg, &entries)?;

    // Stage 1 is frozen, so its outputs per sample are fixed: compute them
    // once up front.
    let mut frozen = Vec::with_capacity(prepared.len());
    for (i, p) in prepared.iter().enumerate() {
        let mut tape = Tape::new();
        let feats = tape.constant(&p.feats);
        let b1 = s1.hg1.bind(&mut tape, false);
        let b2 = s1.hg2.bind(&mut tape, false);
        let out = stacked_forward(
            &mut tape,
            &p.grid,
            feats,
            &[&b1, &b2],
            PRUNE_TAU,
            PrunePolicy::RescueBest,
        )?;
        let f_v = tape.value_tensor(out.f_v);
        let gt_sub = subsample_points(&p.gt, cfg.stage2_gt_cap, sub_seed(cfg.seed, 0x67CA, i as u64));
        frozen.push(FrozenSample {
            grid: out.v_out,
            f_v,
            gt_sub,
            split: p.split,
        });
    }

    let train_idx: Vec<usize> = frozen
        .iter()
        .enumerate()
        .filter(|(_, f)| f.split == Split::Train)
        .map(|(i, _)| i)
        .collect();
    let val_idx: Vec<usize> = frozen
        .iter()
        .enumerate()
        .filter(|(_, f)| f.split == Split::Val)
        .map(|(i, _)| i)
        .collect();
    if train_idx.is_empty() {
        return Err(TrainError::InvalidInput("no training samples".into()));
    }

    let mut params = reloc_init(cfg);
    let mut adam = AdamState::new(cfg.lr);

    let initial_val = stage2_val_loss(cfg, &params, &frozen, &val_idx);
    on_epoch(&Stage2Epoch {
        epoch: 0,
        lr: cfg.lr_at(0),
        train_loss: None,
        val_loss: initial_val,
    });

    for epoch in 0..cfg.epochs {
        adam.lr = cfg.lr_at(epoch);
        let order = shuffled(&train_idx, sub_seed(cfg.seed, 0xE0C2, epoch as u64));
        let mut epoch_loss = 0.0;
        let mut n_batches = 0usize;

        for batch in order.chunks(cfg.batch) {
            let mut grad_acc: Vec<Vec<f64>> = params
                .named_params()
                .iter()
                .map(|(_, t)| vec![0.0; t.numel()])
                .collect();
            let mut batch_loss = 0.0;
            for &si in batch {
                let f = &frozen[si];
                let rows = subsample_rows(
                    f.grid.len(),
                    cfg.stage2_queries,
                    sub_seed(cfg.seed, 0x9E11 ^ epoch as u64, si as u64),
                );
                let mut tape = Tape::new();
                let fv = tape.constant(&f.f_v);
                let bound = params.bind(&mut tape, true);
                let sets = neighbor_sets(&f.grid, &rows, cfg.k, cfg.l_vox);
                let pts = relocalize_sets(
                    &mut tape,
                    &f.grid,
                    fv,
                    &sets,
                    &bound,
                    cfg.l_vox,
                    PeMode::Amplified,
                );
                let loss = tape.chamfer_to_fixed(pts, &f.gt_sub);
                batch_loss += tape.value(loss)[0];
                let grads = tape.backward(loss);
                for (acc, id) in grad_acc.iter_mut().zip(bound.ids()) {
                    if let Some(g) = grads.wrt(id) {
                        for (a, v) in acc.iter_mut().zip(g) {
                            *a += v;
                        }
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for acc in &mut grad_acc {
                for v in acc.iter_mut() {
                    *v *= inv;
                }
            }
            apply_step(&mut adam, params.named_params_mut(), &grad_acc);
            epoch_loss += batch_loss * inv;
            n_batches += 1;
        }

        let val_loss = stage2_val_loss(cfg, &params, &frozen, &val_idx);
        on_epoch(&Stage2Epoch {
            epoch: epoch + 1,
            lr: adam.lr,
            train_loss: Some(epoch_loss / n_batches.max(1) as f64),
            val_loss,
        });
    }

    let mut tensors: Vec<(String, Tensor)> = s1
        .named_params()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();
    tensors.extend(
        reloc_named(&params)
            .into_iter()
            .map(|(n, t)| (n, t.clone())),
    );
    Ok(NetworkCheckpoint {
        version: CHECKPOINT_VERSION,
        config: cfg.clone(),
        stage1_done: true,
        stage2_done: cfg.epochs > 0,
        tensors,
    })
}

fn stage2_val_loss(
    cfg: &RunConfig,
    params: &RelocParams,
    frozen: &[FrozenSample],
    val_idx: &[usize],
) -> f64 {
    if val_idx.is_empty() {
        return f64::NAN;
    }
    let mut total = 0.0;
    for &si in val_idx {
        let f = &frozen[si];
        let rows = subsample_rows(
            f.grid.len(),
            cfg.stage2_queries,
            sub_seed(cfg.seed, 0x7A1, si as u64),
        );
        let mut tape = Tape::new();
        let fv = tape.constant(&f.f_v);
        let bound = params.bind(&mut tape, false);
        let sets = neighbor_sets(&f.grid, &rows, cfg.k, cfg.l_vox);
        let pts = relocalize_sets(
            &mut tape,
            &f.grid,
            fv,
            &sets,
            &bound,
            cfg.l_vox,
            PeMode::Amplified,
        );
        let loss = tape.chamfer_to_fixed(pts, &f.gt_sub);
        total += tape.value(loss)[0];
    }
    total / val_idx.len() as f64
}

fn subsample_rows(n: usize, cap: usize, seed: u64) -> Vec<usize> {
    let mut rows: Vec<usize> = (0..n).collect();
    if n <= cap {
        return rows;
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    for i in 0..cap {
        let j = rng.gen_range(i..rows.len());
        rows.swap(i, j);
    }
    rows.truncate(cap);
    rows
}

fn subsample_points(cloud: &PointCloud, cap: usize, seed: u64) -> Vec<Point3> {
    let rows = subsample_rows(cloud.len(), cap, seed);
    rows.iter().map(|&i| cloud.points()[i]).collect()
}

/// Counts reported by `reconstruct`.
#[derive(Clone, Copy, Debug)]
pub struct ReconstructSummary {
    pub n_in: usize,
    pub n_voxels: usize,
    pub n_out: usize,
}

/// Full two-stage inference: voxelize → generate/prune → relocalize.
/// Exactly one output point per surviving voxel.
pub fn reconstruct(
    ck: &NetworkCheckpoint,
    input: &PointCloud,
) -> Result<(PointCloud, ReconstructSummary), TrainError> {
    if !(ck.stage1_done && ck.stage2_done) {
        return Err(TrainError::MissingStages);
    }
    let cfg = &ck.config;
    let s1 = Stage1Net::from_tensors(&ck.tensors)?;
    let s2 = reloc_from_tensors(cfg, &ck.tensors)?;
    let (v_out, f_v) = stage1_infer(&s1, cfg, input, PrunePolicy::Strict)?;
    let points = relocalize(&v_out, &f_v, &s2, cfg.l_vox, PeMode::Amplified)?;
    let summary = ReconstructSummary {
        n_in: input.len(),
        n_voxels: v_out.len(),
        n_out: points.len(),
    };
    Ok((points, summary))
}
