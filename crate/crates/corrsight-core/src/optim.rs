//! Reconstruction losses and the optimizers the random search draws from.
//!
//! Optimizer state lives in the optimizer, keyed by parameter name, so a
//! checkpointed model can resume against a fresh optimizer without the
//! tensors carrying moment buffers around. Every step first verifies all
//! gradients are finite, then applies global max-norm clipping, then the
//! per-parameter rule.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::collections::BTreeMap;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const RMSPROP_RHO: f64 = 0.9;
pub const RMSPROP_EPS: f64 = 1e-8;
pub const ADADELTA_RHO: f64 = 0.95;
pub const ADADELTA_EPS: f64 = 1e-6;
pub const GRAD_CLIP_MAX_NORM: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Mae,
    Mse,
    Rmse,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::Mae, LossKind::Mse, LossKind::Rmse];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Mae => "mae",
            LossKind::Mse => "mse",
            LossKind::Rmse => "rmse",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mae" => Ok(LossKind::Mae),
            "mse" => Ok(LossKind::Mse),
            "rmse" => Ok(LossKind::Rmse),
            other => Err(Error::invalid(
                "loss",
                format!("unknown loss {other:?} (mae, mse, rmse)"),
            )),
        }
    }
}

/// Scalar reconstruction loss between two same-shape tensors.
pub fn loss(prediction: &Tensor, target: &Tensor, kind: LossKind) -> Result<Tensor> {
    let diff = prediction.sub(target)?;
    match kind {
        LossKind::Mae => diff.abs()?.mean(),
        LossKind::Mse => diff.mul(&diff)?.mean(),
        LossKind::Rmse => diff.mul(&diff)?.mean()?.sqrt(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
    RmsProp,
    AdaDelta,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 4] = [
        OptimizerKind::Sgd,
        OptimizerKind::Adam,
        OptimizerKind::RmsProp,
        OptimizerKind::AdaDelta,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
            OptimizerKind::RmsProp => "rmsprop",
            OptimizerKind::AdaDelta => "adadelta",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            "rmsprop" => Ok(OptimizerKind::RmsProp),
            "adadelta" => Ok(OptimizerKind::AdaDelta),
            other => Err(Error::invalid(
                "optimizer",
                format!("unknown optimizer {other:?} (sgd, adam, rmsprop, adadelta)"),
            )),
        }
    }
}

#[derive(Default)]
struct Slots {
    a: Vec<f64>,
    b: Vec<f64>,
}

pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub clip_max_norm: Option<f64>,
    steps: u64,
    state: BTreeMap<String, Slots>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer {
            kind,
            lr,
            clip_max_norm: Some(GRAD_CLIP_MAX_NORM),
            steps: 0,
            state: BTreeMap::new(),
        }
    }

    /// Applies one update to every parameter that received a gradient.
    /// Fails without touching anything if any gradient is non-finite.
    pub fn step(&mut self, params: &[(String, Tensor)]) -> Result<()> {
        let mut sq_norm = 0.0;
        for (name, p) in params {
            if let Some(g) = p.grad() {
                for v in g {
                    if !v.is_finite() {
                        return Err(Error::NonFiniteGradient {
                            param: name.clone(),
                        });
                    }
                    sq_norm += v * v;
                }
            }
        }
        if let Some(max) = self.clip_max_norm {
            let norm = sq_norm.sqrt();
            if norm > max {
                let factor = max / norm;
                for (_, p) in params {
                    p.scale_grad(factor);
                }
            }
        }

        self.steps += 1;
        let t = self.steps;
        for (name, p) in params {
            let kind = self.kind;
            let lr = self.lr;
            let slots = self.state.entry(name.clone()).or_default();
            p.apply_update(|data, grad| {
                let Some(grad) = grad else { return };
                if slots.a.len() != data.len() {
                    slots.a = vec![0.0; data.len()];
                    slots.b = vec![0.0; data.len()];
                }
                match kind {
                    OptimizerKind::Sgd => {
                        for (x, g) in data.iter_mut().zip(grad) {
                            *x -= lr * g;
                        }
                    }
                    OptimizerKind::Adam => {
                        let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
                        let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
                        for i in 0..data.len() {
                            let g = grad[i];
                            slots.a[i] = ADAM_BETA1 * slots.a[i] + (1.0 - ADAM_BETA1) * g;
                            slots.b[i] = ADAM_BETA2 * slots.b[i] + (1.0 - ADAM_BETA2) * g * g;
                            let m_hat = slots.a[i] / bc1;
                            let v_hat = slots.b[i] / bc2;
                            data[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                        }
                    }
                    OptimizerKind::RmsProp => {
                        for i in 0..data.len() {
                            let g = grad[i];
                            slots.a[i] = RMSPROP_RHO * slots.a[i] + (1.0 - RMSPROP_RHO) * g * g;
                            data[i] -= lr * g / (slots.a[i] + RMSPROP_EPS).sqrt();
                        }
                    }
                    OptimizerKind::AdaDelta => {
                        for i in 0..data.len() {
                            let g = grad[i];
                            slots.a[i] = ADADELTA_RHO * slots.a[i] + (1.0 - ADADELTA_RHO) * g * g;
                            let delta = -(slots.b[i] + ADADELTA_EPS).sqrt()
                                / (slots.a[i] + ADADELTA_EPS).sqrt()
                                * g;
                            slots.b[i] =
                                ADADELTA_RHO * slots.b[i] + (1.0 - ADADELTA_RHO) * delta * delta;
                            data[i] += lr * delta;
                        }
                    }
                }
            })?;
        }
        Ok(())
    }
}
