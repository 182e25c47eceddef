//! The semantic-aware relational message-passing network.
//!
//! Edges carry hidden states initialized from relation-type embeddings. Each
//! round, every edge scores its line-graph neighbors in a shared latent
//! space, keeps the Top-K most similar, folds their mean into its own state
//! through an attention aggregator, nodes average their enriched incident
//! edges, and edge states refresh from the endpoint messages. Triplets are
//! scored from the final head/tail node messages plus the relation embedding.
//!
//! Two implementations of the same semantics live here: [`ops`] holds the
//! per-edge reference functions (simple, loop-based, used as test oracles),
//! and [`forward`] the batched tape-recorded pass used for training and
//! inference.

pub mod forward;
pub mod ops;


use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::Rng;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid hyperparameter: {0}")]
    InvalidHyper(String),
}

/// How the center edge state and the neighborhood mean are fused.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregator {
    MultiHeadAttention,
    Mean,
    ConcatMlp,
}

impl std::str::FromStr for Aggregator {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "multi_head_attention" => Ok(Self::MultiHeadAttention),
            "mean" => Ok(Self::Mean),
            "concat_mlp" => Ok(Self::ConcatMlp),
            other => Err(format!(
                "unknown aggregator {other:?} (expected multi_head_attention|mean|concat_mlp)"
            )),
        }
    }
}

impl std::fmt::Display for Aggregator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::MultiHeadAttention => "multi_head_attention",
            Self::Mean => "mean",
            Self::ConcatMlp => "concat_mlp",
        })
    }
}

/// How neighbor edges are chosen before aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    /// Top-K by latent-space similarity (the full method).
    SemanticTopK,
    /// K uniform picks, ignoring scores (the "no Top-K" ablation).
    RandomK,
    /// Top-K by raw dot product of unprojected states (the "no score" ablation).
    DotProductTopK,
}

impl std::str::FromStr for Selector {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "semantic_topk" => Ok(Self::SemanticTopK),
            "random_k" => Ok(Self::RandomK),
            "dot_product_topk" => Ok(Self::DotProductTopK),
            other => Err(format!(
                "unknown selector {other:?} (expected semantic_topk|random_k|dot_product_topk)"
            )),
        }
    }
}

impl std::fmt::Display for Selector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::SemanticTopK => "semantic_topk",
            Self::RandomK => "random_k",
            Self::DotProductTopK => "dot_product_topk",
        })
    }
}

/// Architecture and selection hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    /// Neighbors kept per edge after scoring.
    pub k: usize,
    /// Similarity temperature; rescales scores, never changes the selection.
    pub tau: f64,
    /// Message-passing rounds.
    pub hops: usize,
    /// Edge-state width.
    pub d_e: usize,
    /// Latent width of the similarity projection.
    pub d_p: usize,
    /// Attention heads; must divide `d_e`.
    pub heads: usize,
    pub aggregator: Aggregator,
    pub selector: Selector,
    /// Cap on stored line-graph neighbor lists (sampled when exceeded).
    pub max_neighbors: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            k: 10,
            tau: 1.0,
            hops: 2,
            d_e: 64,
            d_p: 64,
            heads: 4,
            aggregator: Aggregator::MultiHeadAttention,
            selector: Selector::SemanticTopK,
            max_neighbors: 64,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.k < 1 {
            return Err(ModelError::InvalidHyper("k must be >= 1".into()));
        }
        if !(self.tau > 0.0) {
            return Err(ModelError::InvalidHyper("tau must be > 0".into()));
        }
        if self.hops < 1 {
            return Err(ModelError::InvalidHyper("hops must be >= 1".into()));
        }
        if self.d_e == 0 || self.d_p == 0 {
            return Err(ModelError::InvalidHyper("dims must be >= 1".into()));
        }
        if self.heads == 0 || self.d_e % self.heads != 0 {
            return Err(ModelError::InvalidHyper(format!(
                "heads ({}) must divide d_e ({})",
                self.heads, self.d_e
            )));
        }
        if self.max_neighbors < 1 {
            return Err(ModelError::InvalidHyper("max_neighbors must be >= 1".into()));
        }
        Ok(())
    }
}

/// Attention maps: query/key/value and the output projection, each `[d,d]`
/// with a bias.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<S> {
    pub wq: Tensor<S>,
    pub bq: Tensor<S>,
    pub wk: Tensor<S>,
    pub bk: Tensor<S>,
    pub wv: Tensor<S>,
    pub bv: Tensor<S>,
    pub wo: Tensor<S>,
    pub bo: Tensor<S>,
}

/// Two-layer perceptron used by the concat aggregator ablation.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcatMlpParams<S> {
    pub w1: Tensor<S>,
    pub b1: Tensor<S>,
    pub w2: Tensor<S>,
    pub b2: Tensor<S>,
}

/// Every learnable tensor. Nothing here scales with the entity count — the
/// model stores relation embeddings only.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<S> {
    /// Initial edge features, one row per relation type (inverses included):
    /// `[num_relations, d_e]`.
    pub relation_embed: Tensor<S>,
    /// Latent similarity projection `d_e -> d_p`.
    pub proj_w: Tensor<S>,
    pub proj_b: Tensor<S>,
    /// Present iff the aggregator is multi-head attention.
    pub attention: Option<AttentionParams<S>>,
    /// Present iff the aggregator is the concat MLP ablation.
    pub concat_mlp: Option<ConcatMlpParams<S>>,
    /// Edge-message perceptron over concatenated endpoint messages:
    /// `[2*d_e, d_e]` then `[d_e, d_e]`.
    pub edge_mlp_w1: Tensor<S>,
    pub edge_mlp_b1: Tensor<S>,
    pub edge_mlp_w2: Tensor<S>,
    pub edge_mlp_b2: Tensor<S>,
    /// Edge-state refresh over `[state, message]`: `[2*d_e, d_e]`.
    pub edge_update_w: Tensor<S>,
    pub edge_update_b: Tensor<S>,
    /// Triplet scorer over `[m_head, x_relation, m_tail]`: `[3*d_e, 1]` + bias.
    pub score_w: Tensor<S>,
    pub score_b: Tensor<S>,
}

fn xavier<S: Scalar>(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor<S> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| S::of(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches data")
}

impl<S: Scalar> ModelParams<S> {
    /// Xavier-uniform matrices, zero biases, seeded.
    pub fn init(num_relations: usize, hyper: &HyperParams, seed: u64) -> Self {
        let d = hyper.d_e;
        let mut r = rng::stream(seed, "param-init", &[]);
        let attention = matches!(hyper.aggregator, Aggregator::MultiHeadAttention).then(|| {
            AttentionParams {
                wq: xavier(d, d, &mut r),
                bq: Tensor::zeros(vec![d]),
                wk: xavier(d, d, &mut r),
                bk: Tensor::zeros(vec![d]),
                wv: xavier(d, d, &mut r),
                bv: Tensor::zeros(vec![d]),
                wo: xavier(d, d, &mut r),
                bo: Tensor::zeros(vec![d]),
            }
        });
        let concat_mlp = matches!(hyper.aggregator, Aggregator::ConcatMlp).then(|| ConcatMlpParams {
            w1: xavier(2 * d, d, &mut r),
            b1: Tensor::zeros(vec![d]),
            w2: xavier(d, d, &mut r),
            b2: Tensor::zeros(vec![d]),
        });
        Self {
            relation_embed: xavier(num_relations, d, &mut r),
            proj_w: xavier(d, hyper.d_p, &mut r),
            proj_b: Tensor::zeros(vec![hyper.d_p]),
            attention,
            concat_mlp,
            edge_mlp_w1: xavier(2 * d, d, &mut r),
            edge_mlp_b1: Tensor::zeros(vec![d]),
            edge_mlp_w2: xavier(d, d, &mut r),
            edge_mlp_b2: Tensor::zeros(vec![d]),
            edge_update_w: xavier(2 * d, d, &mut r),
            edge_update_b: Tensor::zeros(vec![d]),
            score_w: xavier(3 * d, 1, &mut r),
            score_b: Tensor::zeros(vec![1]),
        }
    }

    pub fn num_relations(&self) -> usize {
        self.relation_embed.shape()[0]
    }

    pub fn d_e(&self) -> usize {
        self.relation_embed.shape()[1]
    }

    /// Named parameter groups in the fixed order used by the optimizer,
    /// checkpoints and gradient checks.
    pub fn groups(&self) -> Vec<(&'static str, &Tensor<S>)> {
        let mut g: Vec<(&'static str, &Tensor<S>)> = vec![
            ("relation_embed", &self.relation_embed),
            ("proj_w", &self.proj_w),
            ("proj_b", &self.proj_b),
        ];
        if let Some(a) = &self.attention {
            g.extend([
                ("attn_wq", &a.wq),
                ("attn_bq", &a.bq),
                ("attn_wk", &a.wk),
                ("attn_bk", &a.bk),
                ("attn_wv", &a.wv),
                ("attn_bv", &a.bv),
                ("attn_wo", &a.wo),
                ("attn_bo", &a.bo),
            ]);
        }
        if let Some(c) = &self.concat_mlp {
            g.extend([
                ("concat_mlp_w1", &c.w1),
                ("concat_mlp_b1", &c.b1),
                ("concat_mlp_w2", &c.w2),
                ("concat_mlp_b2", &c.b2),
            ]);
        }
        g.extend([
            ("edge_mlp_w1", &self.edge_mlp_w1),
            ("edge_mlp_b1", &self.edge_mlp_b1),
            ("edge_mlp_w2", &self.edge_mlp_w2),
            ("edge_mlp_b2", &self.edge_mlp_b2),
            ("edge_update_w", &self.edge_update_w),
            ("edge_update_b", &self.edge_update_b),
            ("score_w", &self.score_w),
            ("score_b", &self.score_b),
        ]);
        g
    }

    pub fn groups_mut(&mut self) -> Vec<(&'static str, &mut Tensor<S>)> {
        let mut g: Vec<(&'static str, &mut Tensor<S>)> = vec![
            ("relation_embed", &mut self.relation_embed),
            ("proj_w", &mut self.proj_w),
            ("proj_b", &mut self.proj_b),
        ];
        if let Some(a) = &mut self.attention {
            g.extend([
                ("attn_wq", &mut a.wq),
                ("attn_bq", &mut a.bq),
                ("attn_wk", &mut a.wk),
                ("attn_bk", &mut a.bk),
                ("attn_wv", &mut a.wv),
                ("attn_bv", &mut a.bv),
                ("attn_wo", &mut a.wo),
                ("attn_bo", &mut a.bo),
            ]);
        }
        if let Some(c) = &mut self.concat_mlp {
            g.extend([
                ("concat_mlp_w1", &mut c.w1),
                ("concat_mlp_b1", &mut c.b1),
                ("concat_mlp_w2", &mut c.w2),
                ("concat_mlp_b2", &mut c.b2),
            ]);
        }
        g.extend([
            ("edge_mlp_w1", &mut self.edge_mlp_w1),
            ("edge_mlp_b1", &mut self.edge_mlp_b1),
            ("edge_mlp_w2", &mut self.edge_mlp_w2),
            ("edge_mlp_b2", &mut self.edge_mlp_b2),
            ("edge_update_w", &mut self.edge_update_w),
            ("edge_update_b", &mut self.edge_update_b),
            ("score_w", &mut self.score_w),
            ("score_b", &mut self.score_b),
        ]);
        g
    }

    /// Total trainable parameter count. Depends on the relation count and
    /// widths only — never on the entity count.
    pub fn param_count(&self) -> usize {
        self.groups().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn to_f64(&self) -> ModelParams<f64> {
        ModelParams {
            relation_embed: self.relation_embed.to_f64(),
            proj_w: self.proj_w.to_f64(),
            proj_b: self.proj_b.to_f64(),
            attention: self.attention.as_ref().map(|a| AttentionParams {
                wq: a.wq.to_f64(),
                bq: a.bq.to_f64(),
                wk: a.wk.to_f64(),
                bk: a.bk.to_f64(),
                wv: a.wv.to_f64(),
                bv: a.bv.to_f64(),
                wo: a.wo.to_f64(),
                bo: a.bo.to_f64(),
            }),
            concat_mlp: self.concat_mlp.as_ref().map(|c| ConcatMlpParams {
                w1: c.w1.to_f64(),
                b1: c.b1.to_f64(),
                w2: c.w2.to_f64(),
                b2: c.b2.to_f64(),
            }),
            edge_mlp_w1: self.edge_mlp_w1.to_f64(),
            edge_mlp_b1: self.edge_mlp_b1.to_f64(),
            edge_mlp_w2: self.edge_mlp_w2.to_f64(),
            edge_mlp_b2: self.edge_mlp_b2.to_f64(),
            edge_update_w: self.edge_update_w.to_f64(),
            edge_update_b: self.edge_update_b.to_f64(),
            score_w: self.score_w.to_f64(),
            score_b: self.score_b.to_f64(),
        }
    }
}
