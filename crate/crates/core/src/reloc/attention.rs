//! Multi-head attention block: scaled dot-product attention with residual
//! connections, layer normalization, and a two-layer feed-forward.
//!
//! The block runs batched over many independent token groups at once:
//! queries and contexts are stacked block-major and the blocked matmul ops
//! keep attention confined to each group.

use rand::Rng;

use crate::tensor::{NodeId, Tape, Tensor};

fn uniform_init(rng: &mut impl Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = (1.0 / fan_in as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data)
}

/// Learnable parameters of one attention block with per-head Q/K/V/O
/// projections, two layer norms, and the feed-forward (hidden 2C, relu).
#[derive(Clone, Debug)]
pub struct AttnBlockParams {
    pub wq: Vec<Tensor>,
    pub wk: Vec<Tensor>,
    pub wv: Vec<Tensor>,
    pub wo: Vec<Tensor>,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    pub ffn_w2: Tensor,
    pub ffn_b2: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

impl AttnBlockParams {
    pub fn init(c: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert!(c % heads == 0, "channels must split evenly across heads");
        let dh = c / heads;
        let mut gen = |shape: Vec<usize>, fan: usize| uniform_init(rng, shape, fan);
        let wq = (0..heads).map(|_| gen(vec![c, dh], c)).collect();
        let wk = (0..heads).map(|_| gen(vec![c, dh], c)).collect();
        let wv = (0..heads).map(|_| gen(vec![c, dh], c)).collect();
        let wo = (0..heads).map(|_| gen(vec![dh, c], dh)).collect();
        let ffn_w1 = gen(vec![c, 2 * c], c);
        let ffn_w2 = gen(vec![2 * c, c], 2 * c);
        Self {
            wq,
            wk,
            wv,
            wo,
            ln1_gain: Tensor::full(vec![c], 1.0),
            ln1_bias: Tensor::zeros(vec![c]),
            ffn_w1,
            ffn_b1: Tensor::zeros(vec![2 * c]),
            ffn_w2,
            ffn_b2: Tensor::zeros(vec![c]),
            ln2_gain: Tensor::full(vec![c], 1.0),
            ln2_bias: Tensor::zeros(vec![c]),
        }
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, t) in self.wq.iter().enumerate() {
            out.push((format!("{prefix}.wq{i}"), t));
        }
        for (i, t) in self.wk.iter().enumerate() {
            out.push((format!("{prefix}.wk{i}"), t));
        }
        for (i, t) in self.wv.iter().enumerate() {
            out.push((format!("{prefix}.wv{i}"), t));
        }
        for (i, t) in self.wo.iter().enumerate() {
            out.push((format!("{prefix}.wo{i}"), t));
        }
        out.push((format!("{prefix}.ln1.gain"), &self.ln1_gain));
        out.push((format!("{prefix}.ln1.bias"), &self.ln1_bias));
        out.push((format!("{prefix}.ffn.w1"), &self.ffn_w1));
        out.push((format!("{prefix}.ffn.b1"), &self.ffn_b1));
        out.push((format!("{prefix}.ffn.w2"), &self.ffn_w2));
        out.push((format!("{prefix}.ffn.b2"), &self.ffn_b2));
        out.push((format!("{prefix}.ln2.gain"), &self.ln2_gain));
        out.push((format!("{prefix}.ln2.bias"), &self.ln2_bias));
        out
    }

    pub fn named_params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        for (i, t) in self.wq.iter_mut().enumerate() {
            out.push((format!("{prefix}.wq{i}"), t));
        }
        for (i, t) in self.wk.iter_mut().enumerate() {
            out.push((format!("{prefix}.wk{i}"), t));
        }
        for (i, t) in self.wv.iter_mut().enumerate() {
            out.push((format!("{prefix}.wv{i}"), t));
        }
        for (i, t) in self.wo.iter_mut().enumerate() {
            out.push((format!("{prefix}.wo{i}"), t));
        }
        out.push((format!("{prefix}.ln1.gain"), &mut self.ln1_gain));
        out.push((format!("{prefix}.ln1.bias"), &mut self.ln1_bias));
        out.push((format!("{prefix}.ffn.w1"), &mut self.ffn_w1));
        out.push((format!("{prefix}.ffn.b1"), &mut self.ffn_b1));
        out.push((format!("{prefix}.ffn.w2"), &mut self.ffn_w2));
        out.push((format!("{prefix}.ffn.b2"), &mut self.ffn_b2));
        out.push((format!("{prefix}.ln2.gain"), &mut self.ln2_gain));
        out.push((format!("{prefix}.ln2.bias"), &mut self.ln2_bias));
        out
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> AttnBlockBound {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.param(t)
            } else {
                tape.constant(t)
            }
        };
        AttnBlockBound {
            wq: self.wq.iter().map(&mut put).collect(),
            wk: self.wk.iter().map(&mut put).collect(),
            wv: self.wv.iter().map(&mut put).collect(),
            wo: self.wo.iter().map(&mut put).collect(),
            ln1_gain: put(&self.ln1_gain),
            ln1_bias: put(&self.ln1_bias),
            ffn_w1: put(&self.ffn_w1),
            ffn_b1: put(&self.ffn_b1),
            ffn_w2: put(&self.ffn_w2),
            ffn_b2: put(&self.ffn_b2),
            ln2_gain: put(&self.ln2_gain),
            ln2_bias: put(&self.ln2_bias),
        }
    }
}

/// Tape-bound attention block parameters.
#[derive(Clone, Debug)]
pub struct AttnBlockBound {
    pub wq: Vec<NodeId>,
    pub wk: Vec<NodeId>,
    pub wv: Vec<NodeId>,
    pub wo: Vec<NodeId>,
    pub ln1_gain: NodeId,
    pub ln1_bias: NodeId,
    pub ffn_w1: NodeId,
    pub ffn_b1: NodeId,
    pub ffn_w2: NodeId,
    pub ffn_b2: NodeId,
    pub ln2_gain: NodeId,
    pub ln2_bias: NodeId,
}

impl AttnBlockBound {
    /// Node ids in the same order as [`AttnBlockParams::named_params`].
    pub fn ids(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        out.extend(&self.wq);
        out.extend(&self.wk);
        out.extend(&self.wv);
        out.extend(&self.wo);
        out.extend([
            self.ln1_gain,
            self.ln1_bias,
            self.ffn_w1,
            self.ffn_b1,
            self.ffn_w2,
            self.ffn_b2,
            self.ln2_gain,
            self.ln2_bias,
        ]);
        out
    }
}

const MASK_NEG: f64 = -1e9;

/// One attention block over `blocks` independent groups.
///
/// `queries` stacks `blocks` groups of `p` tokens, `context` stacks groups
/// of `q` tokens, both `[·×C]`. Self-attention passes the same node for
/// both. `key_mask[t·q + j] == true` removes context token j of group t
/// from attention (score forced to −∞ before softmax).
pub fn attention_block(
    tape: &mut Tape,
    queries: NodeId,
    context: NodeId,
    blocks: usize,
    params: &AttnBlockBound,
    key_mask: Option<&[bool]>,
) -> NodeId {
    let c = tape.shape(queries)[1];
    assert_eq!(
        tape.shape(context)[1],
        c,
        "dimension error: query/context channels differ"
    );
    let heads = params.wq.len();
    let dh = c / heads;
    let p = tape.shape(queries)[0] / blocks;
    let q = tape.shape(context)[0] / blocks;
    let scale = 1.0 / (dh as f64).sqrt();

    let mask_node = key_mask.map(|mask| {
        assert_eq!(mask.len(), blocks * q, "one mask bit per context token");
        let mut data = vec![0.0; blocks * p * q];
        for t in 0..blocks {
            for j in 0..q {
                if mask[t * q + j] {
                    for i in 0..p {
                        data[(t * p + i) * q + j] = MASK_NEG;
                    }
                }
            }
        }
        let m = Tensor::new(vec![blocks * p, q], data);
        tape.constant(&m)
    });

    let mut attn_sum: Option<NodeId> = None;
    for h in 0..heads {
        let qh = tape.matmul(queries, params.wq[h]);
        let kh = tape.matmul(context, params.wk[h]);
        let vh = tape.matmul(context, params.wv[h]);
        let scores = tape.bmm_nt(qh, kh, blocks);
        let mut scaled = tape.scale(scores, scale);
        if let Some(m) = mask_node {
            scaled = tape.add(scaled, m);
        }
        let weights = tape.softmax_lastdim(scaled);
        let mixed = tape.bmm_nn(weights, vh, blocks);
        let projected = tape.matmul(mixed, params.wo[h]);
        attn_sum = Some(match attn_sum {
            None => projected,
            Some(acc) => tape.add(acc, projected),
        });
    }
    let attn_out = attn_sum.expect("at least one head");

    let res1 = tape.add(queries, attn_out);
    let norm1 = tape.layer_norm(res1, params.ln1_gain, params.ln1_bias);

    let hidden = tape.matmul(norm1, params.ffn_w1);
    let hidden = tape.add_row_bias(hidden, params.ffn_b1);
    let hidden = tape.relu(hidden);
    let ffn = tape.matmul(hidden, params.ffn_w2);
    let ffn = tape.add_row_bias(ffn, params.ffn_b2);

    let res2 = tape.add(norm1, ffn);
    tape.layer_norm(res2, params.ln2_gain, params.ln2_bias)
}
