//! Random search over the published hyperparameter grid.
//!
//! The grid is the cartesian product of four activations, five learning
//! rates, five batch sizes, four optimizers, and three losses: 1200
//! cells. A search plan is a seeded shuffle of the whole grid truncated
//! to the trial budget, so sampling is uniform and without replacement.
//! Trials are independent and run in parallel; a trial that dies (for
//! instance from a diverged gradient) is recorded and skipped at
//! selection time.

use crate::error::{Error, Result};
use crate::optim::{LossKind, OptimizerKind};
use crate::rng::seeded_stream;
use crate::tensor::Activation;
use crate::train::TrainReport;
use rand::seq::SliceRandom;
use rayon::prelude::*;

pub const GRID_ACTIVATIONS: [Activation; 4] = [
    Activation::Relu,
    Activation::LeakyRelu,
    Activation::Elu,
    Activation::Selu,
];
pub const GRID_LEARNING_RATES: [f64; 5] = [1e-2, 1e-3, 1e-4, 1e-5, 1e-6];
pub const GRID_BATCH_SIZES: [usize; 5] = [16, 32, 64, 128, 256];

pub const DEFAULT_TRIALS: usize = 20;
pub const DEFAULT_TRIAL_EPOCHS: usize = 30;
pub const DEFAULT_RETRAIN_EPOCHS: usize = 250;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperparamConfig {
    pub activation: Activation,
    pub lr: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub loss: LossKind,
}

impl HyperparamConfig {
    pub fn describe(&self) -> String {
        format!(
            "{} lr={:e} batch={} {} {}",
            self.activation.op_name(),
            self.lr,
            self.batch_size,
            self.optimizer.name(),
            self.loss.name()
        )
    }
}

/// Every grid cell in a fixed nested order.
pub fn grid() -> Vec<HyperparamConfig> {
    let mut cells = Vec::with_capacity(grid_size());
    for &activation in &GRID_ACTIVATIONS {
        for &lr in &GRID_LEARNING_RATES {
            for &batch_size in &GRID_BATCH_SIZES {
                for &optimizer in &OptimizerKind::ALL {
                    for &loss in &LossKind::ALL {
                        cells.push(HyperparamConfig {
                            activation,
                            lr,
                            batch_size,
                            optimizer,
                            loss,
                        });
                    }
                }
            }
        }
    }
    cells
}

pub fn grid_size() -> usize {
    GRID_ACTIVATIONS.len()
        * GRID_LEARNING_RATES.len()
        * GRID_BATCH_SIZES.len()
        * OptimizerKind::ALL.len()
        * LossKind::ALL.len()
}

/// The seeded without-replacement draw: a shuffled grid truncated to
/// `trials` entries.
pub fn sample_plan(trials: usize, seed: u64) -> Result<Vec<HyperparamConfig>> {
    let size = grid_size();
    if trials == 0 {
        return Err(Error::invalid("random_search", "need at least one trial"));
    }
    if trials > size {
        return Err(Error::invalid(
            "random_search",
            format!("{trials} trials exceed the {size}-cell grid"),
        ));
    }
    let mut cells = grid();
    cells.shuffle(&mut seeded_stream(seed, 2));
    cells.truncate(trials);
    Ok(cells)
}

/// One finished trial: either a training report with a validation loss,
/// or the reason it failed.
#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub index: usize,
    pub config: HyperparamConfig,
    pub report: Option<TrainReport>,
    pub error: Option<String>,
}

impl TrialOutcome {
    pub fn val_loss(&self) -> Option<f64> {
        self.report.as_ref().and_then(|r| r.final_val_loss)
    }
}

/// Index of the trial with the lowest validation loss; ties keep the
/// earlier trial.
pub fn select_best(trials: &[TrialOutcome]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for t in trials {
        let Some(v) = t.val_loss() else { continue };
        if !v.is_finite() {
            continue;
        }
        if best.map_or(true, |(_, bv)| v < bv) {
            best = Some((t.index, v));
        }
    }
    best.map(|(i, _)| i).ok_or_else(|| {
        Error::invalid(
            "random_search",
            "no trial produced a finite validation loss",
        )
    })
}

#[derive(Debug)]
pub struct SearchOutcome {
    pub best: usize,
    pub trials: Vec<TrialOutcome>,
}

impl SearchOutcome {
    pub fn best_config(&self) -> &HyperparamConfig {
        &self.trials[self.best].config
    }
}

/// Plans `trials` configs from `seed` and runs them in parallel through
/// `run`, which receives the trial index and its config and returns the
/// finished training report.
pub fn random_search<F>(trials: usize, seed: u64, run: F) -> Result<SearchOutcome>
where
    F: Fn(usize, &HyperparamConfig) -> Result<TrainReport> + Sync,
{
    let plan = sample_plan(trials, seed)?;
    let outcomes: Vec<TrialOutcome> = plan
        .par_iter()
        .enumerate()
        .map(|(i, config)| match run(i, config) {
            Ok(report) => TrialOutcome {
                index: i,
                config: *config,
                report: Some(report),
                error: None,
            },
            Err(e) => TrialOutcome {
                index: i,
                config: *config,
                report: None,
                error: Some(e.to_string()),
            },
        })
        .collect();
    let best = select_best(&outcomes)?;
    Ok(SearchOutcome {
        best,
        trials: outcomes,
    })
}
