//! Batched message passing over a masked graph.
//!
//! One pass computes node messages for every entity at once as a short
//! sequence of matrix ops on `[num_edges, d]` tensors, recorded on the tape
//! when gradients are needed. Neighbor selection is a discrete choice — the
//! loss never differentiates through which edges were picked — so scoring
//! and Top-K run on plain values outside the tape, and only the selected
//! index lists enter the recorded graph.

use std::sync::Arc;

use crate::kg::{incident_csr_masked, EdgeMask, EdgeNeighborIndex, KnowledgeGraph};
use crate::scalar::Scalar;
use crate::tensor::kernels;
use crate::tensor::{Tape, Tensor, TensorResult, Var};

use super::ops::{select_topk, SelectionSeed};
use super::{Aggregator, HyperParams, ModelParams, Selector};

/// Tape handles for every parameter group, in [`ModelParams::groups`] order.
pub struct ParamVars {
    pub relation_embed: Var,
    pub proj_w: Var,
    pub proj_b: Var,
    pub attention: Option<AttentionVars>,
    pub concat_mlp: Option<ConcatMlpVars>,
    pub edge_mlp_w1: Var,
    pub edge_mlp_b1: Var,
    pub edge_mlp_w2: Var,
    pub edge_mlp_b2: Var,
    pub edge_update_w: Var,
    pub edge_update_b: Var,
    pub score_w: Var,
    pub score_b: Var,
    ordered: Vec<Var>,
}

pub struct AttentionVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

pub struct ConcatMlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl ParamVars {
    /// Record every parameter on the tape, as differentiable leaves when
    /// `trainable`, in the same order as [`ModelParams::groups`].
    pub fn bind<S: Scalar>(tape: &mut Tape<S>, params: &ModelParams<S>, trainable: bool) -> Self {
        let mut ordered = Vec::new();
        let mut bind = |tape: &mut Tape<S>, t: &Tensor<S>| {
            let v = if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            };
            ordered.push(v);
            v
        };
        let relation_embed = bind(tape, &params.relation_embed);
        let proj_w = bind(tape, &params.proj_w);
        let proj_b = bind(tape, &params.proj_b);
        let attention = params.attention.as_ref().map(|a| AttentionVars {
            wq: bind(tape, &a.wq),
            bq: bind(tape, &a.bq),
            wk: bind(tape, &a.wk),
            bk: bind(tape, &a.bk),
            wv: bind(tape, &a.wv),
            bv: bind(tape, &a.bv),
            wo: bind(tape, &a.wo),
            bo: bind(tape, &a.bo),
        });
        let concat_mlp = params.concat_mlp.as_ref().map(|c| ConcatMlpVars {
            w1: bind(tape, &c.w1),
            b1: bind(tape, &c.b1),
            w2: bind(tape, &c.w2),
            b2: bind(tape, &c.b2),
        });
        let edge_mlp_w1 = bind(tape, &params.edge_mlp_w1);
        let edge_mlp_b1 = bind(tape, &params.edge_mlp_b1);
        let edge_mlp_w2 = bind(tape, &params.edge_mlp_w2);
        let edge_mlp_b2 = bind(tape, &params.edge_mlp_b2);
        let edge_update_w = bind(tape, &params.edge_update_w);
        let edge_update_b = bind(tape, &params.edge_update_b);
        let score_w = bind(tape, &params.score_w);
        let score_b = bind(tape, &params.score_b);
        Self {
            relation_embed,
            proj_w,
            proj_b,
            attention,
            concat_mlp,
            edge_mlp_w1,
            edge_mlp_b1,
            edge_mlp_w2,
            edge_mlp_b2,
            edge_update_w,
            edge_update_b,
            score_w,
            score_b,
            ordered,
        }
    }

    /// Vars aligned with [`ModelParams::groups`].
    pub fn ordered(&self) -> &[Var] {
        &self.ordered
    }

    /// Assemble a view over vars already on a tape, in
    /// [`ModelParams::groups`] order (mirror of [`ParamVars::bind`]).
    pub fn from_ordered<S: Scalar>(params: &ModelParams<S>, vars: &[Var]) -> Self {
        assert_eq!(vars.len(), params.groups().len(), "var list mismatch");
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("length checked");
        let relation_embed = next();
        let proj_w = next();
        let proj_b = next();
        let attention = params.attention.as_ref().map(|_| AttentionVars {
            wq: next(),
            bq: next(),
            wk: next(),
            bk: next(),
            wv: next(),
            bv: next(),
            wo: next(),
            bo: next(),
        });
        let concat_mlp = params.concat_mlp.as_ref().map(|_| ConcatMlpVars {
            w1: next(),
            b1: next(),
            w2: next(),
            b2: next(),
        });
        Self {
            relation_embed,
            proj_w,
            proj_b,
            attention,
            concat_mlp,
            edge_mlp_w1: next(),
            edge_mlp_b1: next(),
            edge_mlp_w2: next(),
            edge_mlp_b2: next(),
            edge_update_w: next(),
            edge_update_b: next(),
            score_w: next(),
            score_b: next(),
            ordered: vars.to_vec(),
        }
    }
}

/// Index arrays shared by every layer of one pass.
struct GraphIndexes {
    edge_rel_rows: Arc<Vec<u32>>,
    edge_heads: Arc<Vec<u32>>,
    edge_tails: Arc<Vec<u32>>,
    incident_flat: Arc<Vec<u32>>,
    incident_offsets: Arc<Vec<usize>>,
}

impl GraphIndexes {
    fn build(kg: &KnowledgeGraph, mask: &EdgeMask) -> Self {
        let edges = kg.edges();
        let edge_rel_rows = Arc::new(edges.iter().map(|e| e.relation).collect());
        let edge_heads = Arc::new(edges.iter().map(|e| e.head).collect());
        let edge_tails = Arc::new(edges.iter().map(|e| e.tail).collect());
        let (flat, offsets) = incident_csr_masked(kg, mask);
        Self {
            edge_rel_rows,
            edge_heads,
            edge_tails,
            incident_flat: Arc::new(flat),
            incident_offsets: Arc::new(offsets),
        }
    }
}

/// One full pass: tape, bound parameters and the node-message matrix `[V, d]`.
pub struct ForwardPass<S> {
    pub tape: Tape<S>,
    pub vars: ParamVars,
    pub messages: Var,
}

/// Run `hops` message-passing rounds over the graph with `mask` removed.
/// With `trainable` the tape supports a later `backward`.
pub fn run_forward<S: Scalar>(
    kg: &KnowledgeGraph,
    nbrs: &EdgeNeighborIndex,
    mask: &EdgeMask,
    params: &ModelParams<S>,
    hyper: &HyperParams,
    trainable: bool,
    pass_seed: u64,
) -> TensorResult<ForwardPass<S>> {
    let mut tape = Tape::new();
    let vars = ParamVars::bind(&mut tape, params, trainable);
    let messages = node_messages(&mut tape, &vars, kg, nbrs, mask, hyper, pass_seed)?;
    Ok(ForwardPass {
        tape,
        vars,
        messages,
    })
}

/// Node messages after all rounds, as a tape variable `[V, d]`.
pub fn node_messages<S: Scalar>(
    tape: &mut Tape<S>,
    vars: &ParamVars,
    kg: &KnowledgeGraph,
    nbrs: &EdgeNeighborIndex,
    mask: &EdgeMask,
    hyper: &HyperParams,
    pass_seed: u64,
) -> TensorResult<Var> {
    let gi = GraphIndexes::build(kg, mask);
    // s^(0): one relation-embedding row per edge.
    let mut states = tape.gather_rows(vars.relation_embed, gi.edge_rel_rows.clone())?;
    let mut messages = None;
    for layer in 0..hyper.hops {
        let out = message_passing_round(
            tape,
            vars,
            &gi,
            nbrs,
            mask,
            hyper,
            states,
            SelectionSeed {
                base: pass_seed,
                layer: layer as u64,
            },
            layer + 1 < hyper.hops,
        )?;
        messages = Some(out.node_messages);
        if let Some(next) = out.next_states {
            states = next;
        }
    }
    Ok(messages.expect("hops >= 1"))
}

/// Output of one round. `node_messages` depends only on the enriched edge
/// states of this round — the round function takes no node messages in, so
/// nothing from a previous round can leak past the edge states.
pub struct RoundOutput {
    pub enriched: Var,
    pub node_messages: Var,
    pub next_states: Option<Var>,
}

/// One message-passing round over current edge `states`: enrich every edge
/// from its selected neighbors, pool incident enriched states into node
/// messages, and (optionally) refresh edge states from the endpoint
/// messages. The only cross-round inputs are the edge states.
#[allow(clippy::too_many_arguments)]
pub fn run_round<S: Scalar>(
    tape: &mut Tape<S>,
    vars: &ParamVars,
    kg: &KnowledgeGraph,
    nbrs: &EdgeNeighborIndex,
    mask: &EdgeMask,
    hyper: &HyperParams,
    states: Var,
    seed: SelectionSeed,
    compute_next: bool,
) -> TensorResult<RoundOutput> {
    let gi = GraphIndexes::build(kg, mask);
    message_passing_round(tape, vars, &gi, nbrs, mask, hyper, states, seed, compute_next)
}

#[allow(clippy::too_many_arguments)]
fn message_passing_round<S: Scalar>(
    tape: &mut Tape<S>,
    vars: &ParamVars,
    gi: &GraphIndexes,
    nbrs: &EdgeNeighborIndex,
    mask: &EdgeMask,
    hyper: &HyperParams,
    states: Var,
    seed: SelectionSeed,
    compute_next: bool,
) -> TensorResult<RoundOutput> {
    let num_edges = gi.edge_rel_rows.len();

    // --- neighbor selection on values (discrete, not differentiated) ---
    let (sel_flat, sel_offsets) = {
        let state_vals = tape.value(states);
        let projected = matches!(hyper.selector, Selector::SemanticTopK)
            .then(|| project_states(state_vals, tape.value(vars.proj_w), tape.value(vars.proj_b)));
        let mut flat = Vec::new();
        let mut offsets = Vec::with_capacity(num_edges + 1);
        offsets.push(0usize);
        let mut candidates = Vec::new();
        for e in 0..num_edges as u32 {
            if !mask.is_masked(e) {
                candidates.clear();
                candidates.extend(nbrs.neighbors(e).iter().copied().filter(|&n| !mask.is_masked(n)));
                flat.extend(select_topk(
                    e,
                    &candidates,
                    state_vals,
                    projected.as_ref(),
                    hyper,
                    seed,
                ));
            }
            offsets.push(flat.len());
        }
        (Arc::new(flat), Arc::new(offsets))
    };

    // --- differentiable part of the round ---
    let nbhd = tape.segment_mean_rows(states, sel_flat, sel_offsets)?;
    let enriched = aggregate(tape, vars, hyper, states, nbhd)?;
    let node_messages = tape.segment_mean_rows(
        enriched,
        gi.incident_flat.clone(),
        gi.incident_offsets.clone(),
    )?;

    let next_states = if compute_next {
        let h_u = tape.gather_rows(node_messages, gi.edge_heads.clone())?;
        let h_v = tape.gather_rows(node_messages, gi.edge_tails.clone())?;
        let cat = tape.concat(&[h_u, h_v], 1)?;
        let hidden_pre = tape.affine(cat, vars.edge_mlp_w1, vars.edge_mlp_b1)?;
        let hidden = tape.relu(hidden_pre);
        let msg = tape.affine(hidden, vars.edge_mlp_w2, vars.edge_mlp_b2)?;
        let cat2 = tape.concat(&[states, msg], 1)?;
        let pre = tape.affine(cat2, vars.edge_update_w, vars.edge_update_b)?;
        Some(tape.relu(pre))
    } else {
        None
    };

    Ok(RoundOutput {
        enriched,
        node_messages,
        next_states,
    })
}

fn aggregate<S: Scalar>(
    tape: &mut Tape<S>,
    vars: &ParamVars,
    hyper: &HyperParams,
    center: Var,
    nbhd: Var,
) -> TensorResult<Var> {
    match hyper.aggregator {
        Aggregator::Mean => {
            let sum = tape.add(center, nbhd)?;
            Ok(tape.scale(sum, S::of(0.5)))
        }
        Aggregator::ConcatMlp => {
            let cm = vars.concat_mlp.as_ref().expect("concat_mlp params bound");
            let cat = tape.concat(&[center, nbhd], 1)?;
            let pre = tape.affine(cat, cm.w1, cm.b1)?;
            let hidden = tape.relu(pre);
            tape.affine(hidden, cm.w2, cm.b2)
        }
        Aggregator::MultiHeadAttention => {
            let a = vars.attention.as_ref().expect("attention params bound");
            let heads = hyper.heads;
            let d = hyper.d_e;
            let dh = d / heads;
            let rows = tape.value(center).shape()[0];
            let scale = S::of(1.0 / (dh as f64).sqrt());

            let q = tape.affine(center, a.wq, a.bq)?;
            let kc = tape.affine(center, a.wk, a.bk)?;
            let kn = tape.affine(nbhd, a.wk, a.bk)?;
            let vc = tape.affine(center, a.wv, a.bv)?;
            let vn = tape.affine(nbhd, a.wv, a.bv)?;

            let lc_raw = tape.head_dot(q, kc, heads)?;
            let ln_raw = tape.head_dot(q, kn, heads)?;
            let lc = tape.scale(lc_raw, scale);
            let ln = tape.scale(ln_raw, scale);

            // Per-(edge, head) softmax over the two keys.
            let lc_col = tape.reshape(lc, vec![rows * heads, 1])?;
            let ln_col = tape.reshape(ln, vec![rows * heads, 1])?;
            let logits = tape.concat(&[lc_col, ln_col], 1)?;
            let weights = tape.softmax_axis(logits, 1)?;
            let ac_col = tape.narrow_cols(weights, 0, 1)?;
            let an_col = tape.narrow_cols(weights, 1, 1)?;
            let ac = tape.reshape(ac_col, vec![rows, heads])?;
            let an = tape.reshape(an_col, vec![rows, heads])?;

            let wc = tape.mul_head_scalars(vc, ac, heads)?;
            let wn = tape.mul_head_scalars(vn, an, heads)?;
            let mixed = tape.add(wc, wn)?;

            let o = tape.affine(mixed, a.wo, a.bo)?;
            let res = tape.add(o, center)?;
            Ok(tape.relu(res))
        }
    }
}

fn project_states<S: Scalar>(states: &Tensor<S>, w: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (m, k, n) = (states.shape()[0], states.shape()[1], w.shape()[1]);
    let mut out = Tensor::zeros(vec![m, n]);
    kernels::matmul_nn_acc(states.data(), w.data(), out.data_mut(), m, k, n);
    for row in out.data_mut().chunks_mut(n) {
        for (o, &bj) in row.iter_mut().zip(b.data()) {
            *o += bj;
        }
    }
    out
}

/// Logits for a batch of (source, relation, target) queries against computed
/// node messages: rows of `[m_src, x_rel, m_dst]` through the scorer.
pub fn batch_logits<S: Scalar>(
    tape: &mut Tape<S>,
    vars: &ParamVars,
    messages: Var,
    sources: Arc<Vec<u32>>,
    relations: Arc<Vec<u32>>,
    targets: Arc<Vec<u32>>,
) -> TensorResult<Var> {
    let m_src = tape.gather_rows(messages, sources)?;
    let x_rel = tape.gather_rows(vars.relation_embed, relations)?;
    let m_dst = tape.gather_rows(messages, targets)?;
    let cat = tape.concat(&[m_src, x_rel, m_dst], 1)?;
    let lin = tape.matmul(cat, vars.score_w)?;
    tape.add_row(lin, vars.score_b)
}

/// Node messages for a single query with its own fact (and twin) removed
/// from the graph — the per-query view of the forward pass.
pub fn query_node_messages<S: Scalar>(
    kg: &KnowledgeGraph,
    nbrs: &EdgeNeighborIndex,
    params: &ModelParams<S>,
    hyper: &HyperParams,
    masked_edge: Option<u32>,
    pass_seed: u64,
) -> TensorResult<Tensor<S>> {
    let mask = match masked_edge {
        Some(e) => EdgeMask::for_edges(kg, [e]),
        None => EdgeMask::none(kg.num_edges()),
    };
    let pass = run_forward(kg, nbrs, &mask, params, hyper, false, pass_seed)?;
    Ok(pass.tape.value(pass.messages).clone())
}

/// Scores every entity as the target of `(source, relation, ?)` without
/// rebuilding per-candidate inputs: the target-side projection is one
/// matrix-vector product shared across queries.
pub struct CandidateScorer<'a, S> {
    messages: &'a Tensor<S>,
    params: &'a ModelParams<S>,
    target_proj: Vec<S>,
}

impl<'a, S: Scalar> CandidateScorer<'a, S> {
    pub fn new(messages: &'a Tensor<S>, params: &'a ModelParams<S>) -> Self {
        let d = params.d_e();
        let w_t = &params.score_w.data()[2 * d..3 * d];
        let target_proj = (0..messages.shape()[0])
            .map(|v| {
                let row = messages.row(v);
                let mut acc = S::zero();
                for j in 0..d {
                    acc += row[j] * w_t[j];
                }
                acc
            })
            .collect();
        Self {
            messages,
            params,
            target_proj,
        }
    }

    fn base(&self, source: u32, relation: u32) -> S {
        let d = self.params.d_e();
        let w = self.params.score_w.data();
        let m_src = self.messages.row(source as usize);
        let x_rel = self.params.relation_embed.row(relation as usize);
        let mut acc = self.params.score_b.data()[0];
        for j in 0..d {
            acc += m_src[j] * w[j];
        }
        for j in 0..d {
            acc += x_rel[j] * w[d + j];
        }
        acc
    }

    /// Logit per candidate entity.
    pub fn logits(&self, source: u32, relation: u32) -> Vec<S> {
        let base = self.base(source, relation);
        self.target_proj.iter().map(|&t| base + t).collect()
    }

    pub fn logit_of(&self, source: u32, relation: u32, target: u32) -> S {
        self.base(source, relation) + self.target_proj[target as usize]
    }
}
