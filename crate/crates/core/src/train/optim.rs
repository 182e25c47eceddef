//! SGD and Adam over named parameter groups.

use serde::{Deserialize, Serialize};

use crate::model::ModelParams;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "adam" => Ok(Self::Adam),
            "sgd" => Ok(Self::Sgd),
            other => Err(format!("unknown optimizer {other:?} (expected adam|sgd)")),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Adam => "adam",
            Self::Sgd => "sgd",
        })
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Optimizer state aligned with [`ModelParams::groups`] order.
///
/// A step with all-zero gradients leaves parameters bitwise unchanged for
/// both optimizers; Adam still advances its step counter (the only
/// bookkeeping that moves).
#[derive(Debug, Clone, PartialEq)]
pub struct OptState<S> {
    pub kind: OptimizerKind,
    pub t: u64,
    pub first_moment: Vec<Tensor<S>>,
    pub second_moment: Vec<Tensor<S>>,
}

impl<S: Scalar> OptState<S> {
    pub fn new(kind: OptimizerKind, params: &ModelParams<S>) -> Self {
        let zeros: Vec<Tensor<S>> = params
            .groups()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
            .collect();
        Self {
            kind,
            t: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    /// Apply one update. `grads` must align with [`ModelParams::groups`].
    pub fn step(&mut self, params: &mut ModelParams<S>, grads: &[Tensor<S>], lr: f64) {
        let lr = S::of(lr);
        match self.kind {
            OptimizerKind::Sgd => {
                for ((_, p), g) in params.groups_mut().into_iter().zip(grads) {
                    for (pv, &gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *pv = *pv - lr * gv;
                    }
                }
            }
            OptimizerKind::Adam => {
                self.t += 1;
                let b1 = S::of(BETA1);
                let b2 = S::of(BETA2);
                let eps = S::of(EPS);
                let corr1 = S::of(1.0 - BETA1.powi(self.t as i32));
                let corr2 = S::of(1.0 - BETA2.powi(self.t as i32));
                for (gi, ((_, p), g)) in params.groups_mut().into_iter().zip(grads).enumerate() {
                    let m = self.first_moment[gi].data_mut();
                    let v = self.second_moment[gi].data_mut();
                    for (j, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[j] = b1 * m[j] + (S::one() - b1) * gv;
                        v[j] = b2 * v[j] + (S::one() - b2) * gv * gv;
                        let m_hat = m[j] / corr1;
                        let v_hat = v[j] / corr2;
                        *pv = *pv - lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::HyperParams;

    fn toy_params() -> ModelParams<f64> {
        ModelParams::init(4, &HyperParams { d_e: 4, d_p: 4, heads: 2, ..Default::default() }, 1)
    }

    fn zero_grads(params: &ModelParams<f64>) -> Vec<Tensor<f64>> {
        params
            .groups()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
            .collect()
    }

    #[test]
    fn sgd_with_zero_gradients_changes_nothing() {
        let mut params = toy_params();
        let before = params.clone();
        let mut opt = OptState::new(OptimizerKind::Sgd, &params);
        let grads = zero_grads(&params);
        opt.step(&mut params, &grads, 0.1);
        assert_eq!(params, before);
        assert_eq!(opt.t, 0);
    }

    #[test]
    fn adam_with_zero_gradients_only_advances_the_counter() {
        let mut params = toy_params();
        let before = params.clone();
        let mut opt = OptState::new(OptimizerKind::Adam, &params);
        let moments_before = (opt.first_moment.clone(), opt.second_moment.clone());
        let grads = zero_grads(&params);
        opt.step(&mut params, &grads, 0.1);
        assert_eq!(params, before, "zero gradient must not move parameters");
        assert_eq!(opt.t, 1, "bias-correction counter advances");
        assert_eq!(opt.first_moment, moments_before.0);
        assert_eq!(opt.second_moment, moments_before.1);
    }

    #[test]
    fn sgd_moves_against_the_gradient() {
        let mut params = toy_params();
        let mut grads = zero_grads(&params);
        grads[0].data_mut()[0] = 2.0;
        let before = params.relation_embed.data()[0];
        let mut opt = OptState::new(OptimizerKind::Sgd, &params);
        opt.step(&mut params, &grads, 0.5);
        assert_eq!(params.relation_embed.data()[0], before - 1.0);
    }

    #[test]
    fn adam_first_step_size_is_learning_rate() {
        // With a constant gradient the bias-corrected first step is
        // lr * g/ (|g| + eps') ~ lr.
        let mut params = toy_params();
        let mut grads = zero_grads(&params);
        grads[0].data_mut()[0] = 3.0;
        let before = params.relation_embed.data()[0];
        let mut opt = OptState::new(OptimizerKind::Adam, &params);
        opt.step(&mut params, &grads, 0.01);
        let step = before - params.relation_embed.data()[0];
        assert!((step - 0.01).abs() < 1e-6, "step was {step}");
    }
}
