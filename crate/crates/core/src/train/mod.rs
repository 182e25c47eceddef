//! Margin negative-log-likelihood training with negative sampling,
//! bidirectional queries, early stopping and checkpoints.

mod checkpoint;
mod optim;


pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
pub use optim::{OptState, OptimizerKind};

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::{
    sample_negatives, CorruptionSide, DataError, EdgeMask, EdgeNeighborIndex, KnowledgeGraph,
    Split, Triple,
};
use crate::model::forward::{batch_logits, run_forward};
use crate::model::{HyperParams, ModelError, ModelParams};
use crate::rng;
use crate::scalar::{softplus, Scalar};
use crate::tensor::{Tape, TensorError, TensorResult, Var};

use rand::seq::SliceRandom;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("loss became non-finite at epoch {epoch}, batch {batch}")]
    NumericAbort { epoch: usize, batch: usize },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
}

pub type TrainResult<T> = Result<T, TrainError>;

/// Optimization schedule; architecture lives in [`HyperParams`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Margin separating positive and negative logits.
    pub gamma: f64,
    /// Negatives per positive, per query direction.
    pub n_neg: usize,
    pub seed: u64,
    /// Epochs between validation passes.
    pub eval_every: usize,
    /// Non-improving evaluations tolerated before stopping.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 128,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            gamma: 5.0,
            n_neg: 16,
            seed: 42,
            eval_every: 1,
            patience: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> TrainResult<()> {
        let bad = |msg: &str| Err(TrainError::InvalidConfig(msg.into()));
        if self.epochs < 1 {
            return bad("epochs must be >= 1");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be > 0");
        }
        if !self.gamma.is_finite() {
            return bad("gamma must be finite");
        }
        if self.n_neg < 1 {
            return bad("n_neg must be >= 1");
        }
        if self.eval_every < 1 {
            return bad("eval_every must be >= 1");
        }
        if self.patience < 1 {
            return bad("patience must be >= 1");
        }
        Ok(())
    }
}

/// Mutable training state: parameters, optimizer moments and progress.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<S> {
    pub params: ModelParams<S>,
    pub opt: OptState<S>,
    pub epoch: usize,
    pub best_valid_mrr: f64,
    pub best_epoch: usize,
}

/// One JSON record per evaluation round.
#[derive(Debug, Clone, Serialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_mrr: f64,
    pub valid_hits1: f64,
    pub valid_hits3: f64,
    pub valid_hits10: f64,
}

#[derive(Debug)]
pub struct TrainOutcome<S> {
    /// State at the end of training (after the last step taken).
    pub state: TrainState<S>,
    /// Parameters of the best validation round.
    pub best_params: ModelParams<S>,
    pub best_valid_mrr: f64,
    pub best_epoch: usize,
    /// Per-epoch per-batch losses, for convergence diagnostics.
    pub epoch_losses: Vec<Vec<f64>>,
    pub log: Vec<LogRecord>,
    pub stopped_early: bool,
    pub evaluations: usize,
}

/// Per-positive loss on logits:
/// `softplus(gamma - pos) + mean_i softplus(neg_i - gamma)`,
/// the negative log-likelihood of the positive clearing the margin and each
/// negative staying under it.
pub fn loss_reference(pos_logit: f64, neg_logits: &[f64], gamma: f64) -> f64 {
    assert!(!neg_logits.is_empty());
    let pos_term = softplus(gamma - pos_logit);
    let neg_term: f64 = neg_logits.iter().map(|&s| softplus(s - gamma)).sum();
    pos_term + neg_term / neg_logits.len() as f64
}

/// Tape version of the loss, averaged over a batch of positives.
/// `neg_logits` holds `n_neg` consecutive rows per positive.
pub fn batch_loss<S: Scalar>(
    tape: &mut Tape<S>,
    pos_logits: Var,
    neg_logits: Var,
    n_neg: usize,
    gamma: f64,
) -> TensorResult<Var> {
    let num_pos = tape.value(pos_logits).shape()[0];
    debug_assert_eq!(tape.value(neg_logits).shape()[0], num_pos * n_neg);
    let g = S::of(gamma);

    let neg_pos = tape.scale(pos_logits, -S::one());
    let pos_term = {
        let shifted = tape.add_scalar(neg_pos, g);
        tape.softplus(shifted)
    };
    let neg_term = {
        let shifted = tape.add_scalar(neg_logits, -g);
        tape.softplus(shifted)
    };
    // Mean of each positive's n_neg negatives.
    let indices = Arc::new((0..(num_pos * n_neg) as u32).collect::<Vec<_>>());
    let offsets = Arc::new((0..=num_pos).map(|i| i * n_neg).collect::<Vec<_>>());
    let neg_mean = tape.segment_mean_rows(neg_term, indices, offsets)?;
    let per_positive = tape.add(pos_term, neg_mean)?;
    Ok(tape.mean_all(per_positive))
}

/// Full training loop. Each batch removes its own facts (and their inverse
/// twins) from the message-passing graph, runs one shared pass, scores both
/// query directions for every positive against sampled corruptions, and
/// takes one optimizer step. Validation runs every `eval_every` epochs with
/// early stopping on filtered MRR; the best state goes to `save_best_to`
/// when given.
pub fn train<S: Scalar>(
    kg: &KnowledgeGraph,
    nbrs: &EdgeNeighborIndex,
    hyper: &HyperParams,
    cfg: &TrainConfig,
    save_best_to: Option<&Path>,
    on_eval: impl FnMut(&LogRecord),
) -> TrainResult<TrainOutcome<S>> {
    let params = ModelParams::<S>::init(kg.num_relations(), hyper, cfg.seed);
    let opt = OptState::new(cfg.optimizer, &params);
    train_from_state(kg, nbrs, hyper, cfg, params, opt, save_best_to, on_eval)
}

/// [`train`] with caller-provided parameters and optimizer state.
#[allow(clippy::too_many_arguments)]
pub fn train_from_state<S: Scalar>(
    kg: &KnowledgeGraph,
    nbrs: &EdgeNeighborIndex,
    hyper: &HyperParams,
    cfg: &TrainConfig,
    mut params: ModelParams<S>,
    mut opt: OptState<S>,
    save_best_to: Option<&Path>,
    mut on_eval: impl FnMut(&LogRecord),
) -> TrainResult<TrainOutcome<S>> {
    cfg.validate()?;
    hyper.validate()?;
    assert!(
        kg.has_inverses(),
        "training requires a graph with inverse relations"
    );
    let num_train = kg.triples(Split::Train).len();

    let mut best_params = params.clone();
    let mut best_mrr = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut non_improving = 0usize;
    let mut stopped_early = false;
    let mut epoch_losses = Vec::new();
    let mut log = Vec::new();
    let mut evaluations = 0usize;
    let mut final_epoch = 0usize;

    for epoch in 1..=cfg.epochs {
        final_epoch = epoch;
        let mut order: Vec<usize> = (0..num_train).collect();
        order.shuffle(&mut rng::stream(cfg.seed, "epoch-shuffle", &[epoch as u64]));

        let mut batch_losses = Vec::new();
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let loss = train_step(kg, nbrs, hyper, cfg, &mut params, &mut opt, chunk, epoch, step)?;
            if !loss.is_finite() {
                return Err(TrainError::NumericAbort { epoch, batch: step });
            }
            batch_losses.push(loss);
        }
        epoch_losses.push(batch_losses);

        if epoch % cfg.eval_every == 0 {
            let report =
                crate::eval::evaluate(kg, nbrs, &params, hyper, Split::Valid, 1)?;
            evaluations += 1;
            let record = LogRecord {
                epoch,
                train_loss: mean(&epoch_losses[epoch - 1]),
                valid_mrr: report.overall.mrr,
                valid_hits1: report.overall.hits1,
                valid_hits3: report.overall.hits3,
                valid_hits10: report.overall.hits10,
            };
            on_eval(&record);
            log.push(record);

            if report.overall.mrr > best_mrr {
                best_mrr = report.overall.mrr;
                best_epoch = epoch;
                best_params = params.clone();
                non_improving = 0;
                if let Some(path) = save_best_to {
                    let ckpt = Checkpoint {
                        hyper: hyper.clone(),
                        num_relations: kg.num_relations(),
                        entity_fingerprint: kg.entities().fingerprint(),
                        relation_fingerprint: kg.relations().fingerprint(),
                        state: TrainState {
                            params: params.clone(),
                            opt: opt.clone(),
                            epoch,
                            best_valid_mrr: best_mrr,
                            best_epoch,
                        },
                    };
                    save_checkpoint(path, &ckpt)?;
                }
            } else {
                non_improving += 1;
                if non_improving >= cfg.patience {
                    stopped_early = true;
                    break;
                }
            }
        }
    }

    Ok(TrainOutcome {
        state: TrainState {
            params: params.clone(),
            opt,
            epoch: final_epoch,
            best_valid_mrr: best_mrr,
            best_epoch,
        },
        best_params,
        best_valid_mrr: best_mrr,
        best_epoch,
        epoch_losses,
        log,
        stopped_early,
        evaluations,
    })
}

/// One optimizer step over a batch of training-triple indices: mask the
/// batch facts out of the graph, run one shared tape pass, score tail
/// queries `(h, r, ?)` and head queries `(t, r_inv, ?)` with their sampled
/// corruptions, backpropagate the margin loss, and update in place.
#[allow(clippy::too_many_arguments)]
fn train_step<S: Scalar>(
    kg: &KnowledgeGraph,
    nbrs: &EdgeNeighborIndex,
    hyper: &HyperParams,
    cfg: &TrainConfig,
    params: &mut ModelParams<S>,
    opt: &mut OptState<S>,
    chunk: &[usize],
    epoch: usize,
    step: usize,
) -> TrainResult<f64> {
    let positives: Vec<Triple> = chunk
        .iter()
        .map(|&i| kg.triples(Split::Train)[i])
        .collect();
    let mask = EdgeMask::for_edges(
        kg,
        chunk.iter().map(|&i| kg.edge_ids_of_train(i).0),
    );

    let step_ids = [epoch as u64, step as u64];
    let tail_negs = sample_negatives(
        kg,
        &positives,
        cfg.n_neg,
        CorruptionSide::Tail,
        rng::derive(cfg.seed, "neg-tail", &step_ids),
    )?;
    let head_negs = sample_negatives(
        kg,
        &positives,
        cfg.n_neg,
        CorruptionSide::Head,
        rng::derive(cfg.seed, "neg-head", &step_ids),
    )?;

    // Queries: one tail-direction and one head-direction (via the inverse
    // relation) per positive.
    let p = positives.len();
    let mut pos_src = Vec::with_capacity(2 * p);
    let mut pos_rel = Vec::with_capacity(2 * p);
    let mut pos_dst = Vec::with_capacity(2 * p);
    for t in &positives {
        pos_src.push(t.head);
        pos_rel.push(t.relation);
        pos_dst.push(t.tail);
    }
    for t in &positives {
        pos_src.push(t.tail);
        pos_rel.push(kg.inverse_relation(t.relation));
        pos_dst.push(t.head);
    }
    let n = cfg.n_neg;
    let mut neg_src = Vec::with_capacity(2 * p * n);
    let mut neg_rel = Vec::with_capacity(2 * p * n);
    let mut neg_dst = Vec::with_capacity(2 * p * n);
    for (i, t) in positives.iter().enumerate() {
        for j in 0..n {
            neg_src.push(t.head);
            neg_rel.push(t.relation);
            neg_dst.push(tail_negs.corrupted[i * n + j].tail);
        }
    }
    for (i, t) in positives.iter().enumerate() {
        for j in 0..n {
            neg_src.push(t.tail);
            neg_rel.push(kg.inverse_relation(t.relation));
            neg_dst.push(head_negs.corrupted[i * n + j].head);
        }
    }

    let pass_seed = rng::derive(cfg.seed, "pass", &step_ids);
    let mut pass = run_forward(kg, nbrs, &mask, params, hyper, true, pass_seed)?;
    let pos_logits = batch_logits(
        &mut pass.tape,
        &pass.vars,
        pass.messages,
        Arc::new(pos_src),
        Arc::new(pos_rel),
        Arc::new(pos_dst),
    )?;
    let neg_logits = batch_logits(
        &mut pass.tape,
        &pass.vars,
        pass.messages,
        Arc::new(neg_src),
        Arc::new(neg_rel),
        Arc::new(neg_dst),
    )?;
    let loss = batch_loss(&mut pass.tape, pos_logits, neg_logits, n, cfg.gamma)?;
    let loss_value = pass.tape.value(loss).item().widen();
    if !loss_value.is_finite() {
        return Ok(loss_value); // caller reports epoch/batch
    }

    let grads = pass.tape.backward(loss)?;
    let grad_tensors: Vec<_> = pass.vars.ordered().iter().map(|&v| grads.get(v)).collect();
    opt.step(params, &grad_tensors, cfg.learning_rate);
    Ok(loss_value)
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

pub fn median(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty());
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    if sorted.len() % 2 == 0 {
        (sorted[mid - 1] + sorted[mid]) / 2.0
    } else {
        sorted[mid]
    }
}
