//! Minibatch training loop for the autoencoder.
//!
//! Samples are produced on demand so that window groups can be
//! reassembled against the current embedding weights every time they are
//! visited; fully constant inputs just hand back a stored tensor. The
//! reconstruction target is always a detached copy of the input, reduced
//! to the final image when the model decodes only the last step.
//!
//! Epoch order is a seeded shuffle, gradients reset before every batch,
//! and the whole run is reproducible from (model seed, train seed).

use crate::error::{Error, Result};
use crate::model::{assemble_sample, ModelState};
use crate::optim::{loss, LossKind, Optimizer, OptimizerKind};
use crate::preprocess::{TimeSeriesSet, Window};
use crate::rng::{seeded_stream, SeededRng};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use std::time::Instant;

/// Anything that can hand the trainer sample `i` as a `[h,1,S,S]` tensor.
pub trait SampleSource {
    fn len(&self) -> usize;
    fn sample(&self, i: usize, model: &ModelState) -> Result<Tensor>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Pre-built constant samples.
pub struct FixedSamples(pub Vec<Tensor>);

impl SampleSource for FixedSamples {
    fn len(&self) -> usize {
        self.0.len()
    }

    fn sample(&self, i: usize, _model: &ModelState) -> Result<Tensor> {
        Ok(self.0[i].clone())
    }
}

/// Window groups assembled against the model's current embedding tables.
pub struct WindowSamples<'a> {
    pub sensors: &'a TimeSeriesSet,
    pub groups: Vec<Vec<Window>>,
    pub d: usize,
}

impl SampleSource for WindowSamples<'_> {
    fn len(&self) -> usize {
        self.groups.len()
    }

    fn sample(&self, i: usize, model: &ModelState) -> Result<Tensor> {
        assemble_sample(self.sensors, &model.embeddings, &self.groups[i], self.d)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub loss: LossKind,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(epochs: usize, seed: u64) -> Self {
        TrainConfig {
            epochs,
            batch_size: 16,
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            loss: LossKind::Mse,
            seed,
        }
    }
}

/// What a training run leaves behind.
#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub epoch_train_loss: Vec<f64>,
    pub epoch_val_loss: Vec<f64>,
    pub final_val_loss: Option<f64>,
    pub epochs_run: usize,
    pub wall_secs: f64,
    pub seed: u64,
}

pub struct Trainer<'a> {
    model: &'a ModelState,
    train: &'a dyn SampleSource,
    val: Option<&'a dyn SampleSource>,
    config: TrainConfig,
    optimizer: Optimizer,
    rng: SeededRng,
    params: Vec<(String, Tensor)>,
    pub report: TrainReport,
}

impl<'a> Trainer<'a> {
    pub fn new(
        model: &'a ModelState,
        train: &'a dyn SampleSource,
        val: Option<&'a dyn SampleSource>,
        config: TrainConfig,
    ) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::invalid("train", "empty training set"));
        }
        if config.batch_size == 0 {
            return Err(Error::invalid("train", "batch size must be at least 1"));
        }
        Ok(Trainer {
            model,
            train,
            val,
            optimizer: Optimizer::new(config.optimizer, config.lr),
            rng: seeded_stream(config.seed, 1),
            params: model.named_params(),
            report: TrainReport {
                seed: config.seed,
                ..TrainReport::default()
            },
            config,
        })
    }

    fn sample_loss(&self, source: &dyn SampleSource, i: usize) -> Result<Tensor> {
        let input = source.sample(i, self.model)?;
        let target = if self.model.spec.decode_full_sequence {
            input.detach()
        } else {
            let shape = input.shape();
            let (h, rest) = (shape[0], shape[1] * shape[2] * shape[3]);
            let data = input.to_vec()[(h - 1) * rest..].to_vec();
            Tensor::constant(&[1, shape[1], shape[2], shape[3]], data)?
        };
        let out = self.model.forward(&input)?;
        loss(&out.reconstruction, &target, self.config.loss)
    }

    /// Mean loss over a sample set, without touching any weights.
    pub fn evaluate(&self, source: &dyn SampleSource) -> Result<f64> {
        if source.is_empty() {
            return Err(Error::invalid("train", "empty evaluation set"));
        }
        let mut total = 0.0;
        for i in 0..source.len() {
            total += self.sample_loss(source, i)?.item()?;
        }
        Ok(total / source.len() as f64)
    }

    /// Runs `n` more epochs, extending the report.
    pub fn run_epochs(&mut self, n: usize) -> Result<()> {
        let started = Instant::now();
        for _ in 0..n {
            let mut order: Vec<usize> = (0..self.train.len()).collect();
            order.shuffle(&mut self.rng);

            let mut epoch_total = 0.0;
            for batch in order.chunks(self.config.batch_size) {
                for (_, p) in &self.params {
                    p.zero_grad();
                }
                let mut batch_loss: Option<Tensor> = None;
                for &i in batch {
                    let l = self.sample_loss(self.train, i)?;
                    batch_loss = Some(match batch_loss {
                        Some(acc) => acc.add(&l)?,
                        None => l,
                    });
                }
                let batch_loss = batch_loss
                    .expect("chunks never yields empty slices")
                    .scale(1.0 / batch.len() as f64)?;
                epoch_total += batch_loss.item()? * batch.len() as f64;
                batch_loss.backward()?;
                self.optimizer.step(&self.params)?;
            }
            self.report
                .epoch_train_loss
                .push(epoch_total / self.train.len() as f64);
            if let Some(val) = self.val {
                let v = self.evaluate(val)?;
                self.report.epoch_val_loss.push(v);
                self.report.final_val_loss = Some(v);
            }
            self.report.epochs_run += 1;
        }
        self.report.wall_secs += started.elapsed().as_secs_f64();
        Ok(())
    }
}

/// Builds a trainer, runs the configured number of epochs, and returns the
/// report. Zero epochs still evaluates the untrained model on the
/// validation set.
pub fn fit(
    model: &ModelState,
    train: &dyn SampleSource,
    val: Option<&dyn SampleSource>,
    config: TrainConfig,
) -> Result<TrainReport> {
    let mut trainer = Trainer::new(model, train, val, config)?;
    trainer.run_epochs(config.epochs)?;
    if trainer.report.final_val_loss.is_none() {
        if let Some(val) = val {
            trainer.report.final_val_loss = Some(trainer.evaluate(val)?);
        }
    }
    Ok(trainer.report)
}

/// Splits sample indices into train and validation, validation taking the
/// last `val_fraction` in the given (time) order.
pub fn time_ordered_split(count: usize, val_fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let val_len = ((count as f64) * val_fraction).round() as usize;
    let val_len = val_len.min(count);
    let cut = count - val_len;
    ((0..cut).collect(), (cut..count).collect())
}
