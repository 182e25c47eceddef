//! Per-edge reference operations.
//!
//! Straightforward loop implementations of each message-passing step. They
//! define the semantics; the batched pass in [`super::forward`] must match
//! them, and tests hold it to that. `reference_node_messages` composes them
//! into a full (slow) forward pass over a masked graph.

use crate::kg::{EdgeMask, EdgeNeighborIndex, KnowledgeGraph};
use crate::rng;
use crate::scalar::{sigmoid, Scalar};
use crate::tensor::Tensor;

use super::{Aggregator, AttentionParams, HyperParams, ModelParams, Selector};

fn affine_vec<S: Scalar>(x: &[S], w: &Tensor<S>, b: &Tensor<S>) -> Vec<S> {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    debug_assert_eq!(x.len(), rows);
    let mut out: Vec<S> = b.data().to_vec();
    debug_assert_eq!(out.len(), cols);
    for (i, &xi) in x.iter().enumerate() {
        let wr = w.row(i);
        for j in 0..cols {
            out[j] += xi * wr[j];
        }
    }
    out
}

fn sq_dist<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = S::zero();
    for (&x, &y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = S::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Latent similarity between two edge states:
/// `exp(-||f(s_center) - f(s_neighbor)||^2 / tau)` with `f` the learnable
/// affine projection. Always in `(0, 1]`.
pub fn semantic_score<S: Scalar>(
    s_center: &[S],
    s_neighbor: &[S],
    proj_w: &Tensor<S>,
    proj_b: &Tensor<S>,
    tau: S,
) -> S {
    let fc = affine_vec(s_center, proj_w, proj_b);
    let fn_ = affine_vec(s_neighbor, proj_w, proj_b);
    (-sq_dist(&fc, &fn_) / tau).exp()
}

/// Seed context for the random selector so picks are reproducible per
/// (pass, layer, edge).
#[derive(Debug, Clone, Copy)]
pub struct SelectionSeed {
    pub base: u64,
    pub layer: u64,
}

/// Choose up to `k` of `candidates` for a center edge.
///
/// The semantic selector ranks by projected squared distance ascending,
/// which orders identically to the exponential score descending and keeps
/// the selected set independent of `tau` by construction. The dot-product
/// selector ranks raw state dot products descending. Ties break toward the
/// smaller edge id. The random selector ignores scores entirely and keeps a
/// seeded uniform sample.
pub fn select_topk<S: Scalar>(
    center: u32,
    candidates: &[u32],
    states: &Tensor<S>,
    projected: Option<&Tensor<S>>,
    hyper: &HyperParams,
    seed: SelectionSeed,
) -> Vec<u32> {
    if candidates.is_empty() {
        return Vec::new();
    }
    let k = hyper.k.min(candidates.len());
    match hyper.selector {
        Selector::RandomK => {
            let mut rng = rng::stream(seed.base, "random-k", &[seed.layer, u64::from(center)]);
            let picked = rand::seq::index::sample(&mut rng, candidates.len(), k);
            picked.into_iter().map(|i| candidates[i]).collect()
        }
        Selector::SemanticTopK => {
            let f = projected.expect("semantic selection needs projected states");
            let c_row = f.row(center as usize);
            rank_candidates(candidates, k, |cand| {
                sq_dist(c_row, f.row(cand as usize)).widen()
            })
        }
        Selector::DotProductTopK => {
            let c_row = states.row(center as usize);
            rank_candidates(candidates, k, |cand| {
                -dot(c_row, states.row(cand as usize)).widen()
            })
        }
    }
}

/// Smallest-key-first ranking with ascending-id tie break.
fn rank_candidates(candidates: &[u32], k: usize, key: impl Fn(u32) -> f64) -> Vec<u32> {
    let mut scored: Vec<(f64, u32)> = candidates.iter().map(|&c| (key(c), c)).collect();
    scored.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored.truncate(k);
    scored.into_iter().map(|(_, c)| c).collect()
}

/// Coordinate-wise mean of the selected neighbor states.
pub fn aggregate_neighbors<S: Scalar>(states: &[&[S]]) -> Vec<S> {
    assert!(!states.is_empty(), "caller substitutes zero for empty sets");
    let width = states[0].len();
    let mut out = vec![S::zero(); width];
    for s in states {
        for j in 0..width {
            out[j] += s[j];
        }
    }
    let inv = S::one() / S::of_usize(states.len());
    for v in &mut out {
        *v *= inv;
    }
    out
}

/// Fuse the center state with the neighborhood mean into the enriched state.
pub fn attention_aggregate<S: Scalar>(
    s_center: &[S],
    s_nbhd_mean: &[S],
    params: &ModelParams<S>,
    aggregator: Aggregator,
    heads: usize,
) -> Vec<S> {
    attention_aggregate_with_weights(s_center, s_nbhd_mean, params, aggregator, heads).0
}

/// As [`attention_aggregate`], also returning the per-head attention weights
/// `(center, neighborhood)` when the aggregator is attention.
pub fn attention_aggregate_with_weights<S: Scalar>(
    s_center: &[S],
    s_nbhd_mean: &[S],
    params: &ModelParams<S>,
    aggregator: Aggregator,
    heads: usize,
) -> (Vec<S>, Vec<(S, S)>) {
    match aggregator {
        Aggregator::Mean => {
            let half = S::of(0.5);
            let out = s_center
                .iter()
                .zip(s_nbhd_mean)
                .map(|(&a, &b)| (a + b) * half)
                .collect();
            (out, Vec::new())
        }
        Aggregator::ConcatMlp => {
            let mlp = params.concat_mlp.as_ref().expect("concat_mlp params");
            let mut cat = s_center.to_vec();
            cat.extend_from_slice(s_nbhd_mean);
            let h: Vec<S> = affine_vec(&cat, &mlp.w1, &mlp.b1)
                .into_iter()
                .map(|v| v.max(S::zero()))
                .collect();
            (affine_vec(&h, &mlp.w2, &mlp.b2), Vec::new())
        }
        Aggregator::MultiHeadAttention => {
            let attn = params.attention.as_ref().expect("attention params");
            two_token_attention(s_center, s_nbhd_mean, attn, heads)
        }
    }
}

/// Two-token attention: queries from the center; keys/values from the center
/// and the neighborhood mean; softmax over the two keys per head; concatenated
/// head outputs through the output map, residual to the center, ReLU.
fn two_token_attention<S: Scalar>(
    s_center: &[S],
    s_nbhd: &[S],
    attn: &AttentionParams<S>,
    heads: usize,
) -> (Vec<S>, Vec<(S, S)>) {
    let d = s_center.len();
    let dh = d / heads;
    let scale = S::one() / S::of((dh as f64).sqrt());

    let q = affine_vec(s_center, &attn.wq, &attn.bq);
    let kc = affine_vec(s_center, &attn.wk, &attn.bk);
    let kn = affine_vec(s_nbhd, &attn.wk, &attn.bk);
    let vc = affine_vec(s_center, &attn.wv, &attn.bv);
    let vn = affine_vec(s_nbhd, &attn.wv, &attn.bv);

    let mut mixed = vec![S::zero(); d];
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let r = h * dh..(h + 1) * dh;
        let lc = dot(&q[r.clone()], &kc[r.clone()]) * scale;
        let ln = dot(&q[r.clone()], &kn[r.clone()]) * scale;
        // Stable two-way softmax.
        let m = lc.max(ln);
        let ec = (lc - m).exp();
        let en = (ln - m).exp();
        let ac = ec / (ec + en);
        let an = en / (ec + en);
        weights.push((ac, an));
        for j in r {
            mixed[j] = ac * vc[j] + an * vn[j];
        }
    }

    let o = affine_vec(&mixed, &attn.wo, &attn.bo);
    let out = o
        .iter()
        .zip(s_center)
        .map(|(&oj, &cj)| (oj + cj).max(S::zero()))
        .collect();
    (out, weights)
}

/// Node message: mean of the enriched incident edge states; the zero vector
/// for a node with no surviving incident edges. Never looks at any previous
/// node message.
pub fn update_node<S: Scalar>(incident_states: &[&[S]], d_e: usize) -> Vec<S> {
    if incident_states.is_empty() {
        vec![S::zero(); d_e]
    } else {
        aggregate_neighbors(incident_states)
    }
}

/// Edge message from the endpoint node messages, head side first.
pub fn edge_message<S: Scalar>(h_u: &[S], h_v: &[S], params: &ModelParams<S>) -> Vec<S> {
    let mut cat = h_u.to_vec();
    cat.extend_from_slice(h_v);
    let hidden: Vec<S> = affine_vec(&cat, &params.edge_mlp_w1, &params.edge_mlp_b1)
        .into_iter()
        .map(|v| v.max(S::zero()))
        .collect();
    affine_vec(&hidden, &params.edge_mlp_w2, &params.edge_mlp_b2)
}

/// Edge-state refresh: `relu(Linear([s_prev, m_edge]))`.
pub fn update_edge_state<S: Scalar>(s_prev: &[S], m_edge: &[S], params: &ModelParams<S>) -> Vec<S> {
    let mut cat = s_prev.to_vec();
    cat.extend_from_slice(m_edge);
    affine_vec(&cat, &params.edge_update_w, &params.edge_update_b)
        .into_iter()
        .map(|v| v.max(S::zero()))
        .collect()
}

/// Pre-sigmoid score of `[m_head, x_relation, m_tail]`.
pub fn score_logit<S: Scalar>(m_h: &[S], x_r: &[S], m_t: &[S], params: &ModelParams<S>) -> S {
    let d = m_h.len();
    let w = &params.score_w;
    let mut acc = params.score_b.data()[0];
    for j in 0..d {
        acc += m_h[j] * w.data()[j];
    }
    for j in 0..d {
        acc += x_r[j] * w.data()[d + j];
    }
    for j in 0..d {
        acc += m_t[j] * w.data()[2 * d + j];
    }
    acc
}

/// Plausibility in `(0,1)`: the sigmoid of [`score_logit`]. Ranks identically
/// to the logit.
pub fn score_triplet<S: Scalar>(m_h: &[S], x_r: &[S], m_t: &[S], params: &ModelParams<S>) -> S {
    sigmoid(score_logit(m_h, x_r, m_t, params))
}

/// Slow reference forward pass: runs `hops` full rounds over the masked
/// graph with plain loops and returns the node messages `[V, d_e]`.
pub fn reference_node_messages<S: Scalar>(
    kg: &KnowledgeGraph,
    nbrs: &EdgeNeighborIndex,
    mask: &EdgeMask,
    params: &ModelParams<S>,
    hyper: &HyperParams,
    pass_seed: u64,
) -> Tensor<S> {
    let d = hyper.d_e;
    let num_edges = kg.num_edges();
    let num_nodes = kg.num_entities();

    // s^(0): relation embedding per edge.
    let mut states = Tensor::zeros(vec![num_edges, d]);
    for e in 0..num_edges {
        let r = kg.edge(e as u32).relation as usize;
        states.data_mut()[e * d..(e + 1) * d].copy_from_slice(params.relation_embed.row(r));
    }

    let mut node_msgs = Tensor::zeros(vec![num_nodes, d]);
    for layer in 0..hyper.hops {
        let projected = matches!(hyper.selector, Selector::SemanticTopK).then(|| {
            let mut f = Tensor::zeros(vec![num_edges, hyper.d_p]);
            for e in 0..num_edges {
                let row = affine_vec(states.row(e), &params.proj_w, &params.proj_b);
                f.data_mut()[e * hyper.d_p..(e + 1) * hyper.d_p].copy_from_slice(&row);
            }
            f
        });
        let seed = SelectionSeed {
            base: pass_seed,
            layer: layer as u64,
        };

        // (a) enrich every surviving edge.
        let mut enriched = Tensor::zeros(vec![num_edges, d]);
        for e in 0..num_edges as u32 {
            if mask.is_masked(e) {
                continue;
            }
            let candidates: Vec<u32> = nbrs
                .neighbors(e)
                .iter()
                .copied()
                .filter(|&n| !mask.is_masked(n))
                .collect();
            let selected = select_topk(e, &candidates, &states, projected.as_ref(), hyper, seed);
            let nbhd = if selected.is_empty() {
                vec![S::zero(); d]
            } else {
                let rows: Vec<&[S]> = selected.iter().map(|&n| states.row(n as usize)).collect();
                aggregate_neighbors(&rows)
            };
            let out = attention_aggregate(
                states.row(e as usize),
                &nbhd,
                params,
                hyper.aggregator,
                hyper.heads,
            );
            enriched.data_mut()[e as usize * d..(e as usize + 1) * d].copy_from_slice(&out);
        }

        // (b) node messages from enriched incident states.
        for v in 0..num_nodes as u32 {
            let rows: Vec<&[S]> = kg
                .incident_edges(v)
                .iter()
                .filter(|&&e| !mask.is_masked(e))
                .map(|&e| enriched.row(e as usize))
                .collect();
            let msg = update_node(&rows, d);
            node_msgs.data_mut()[v as usize * d..(v as usize + 1) * d].copy_from_slice(&msg);
        }

        // (c) refresh edge states for the next round; the last round's
        // states feed nothing.
        if layer + 1 < hyper.hops {
            let mut next = Tensor::zeros(vec![num_edges, d]);
            for e in 0..num_edges {
                let t = kg.edge(e as u32);
                let m = edge_message(
                    node_msgs.row(t.head as usize),
                    node_msgs.row(t.tail as usize),
                    params,
                );
                let s = update_edge_state(states.row(e), &m, params);
                next.data_mut()[e * d..(e + 1) * d].copy_from_slice(&s);
            }
            states = next;
        }
    }
    node_msgs
}
