//! Run configuration: defaults, command-line overrides, config file,
//! experiment presets, and the hash that stamps every artifact.
//!
//! Precedence is defaults, then command-line flags, then the config
//! file: a key present in the file wins over the matching flag. A preset
//! (`exp1`, `exp2`, `exp3`) pins the window size and step.

use crate::fail::{CliResult, Failure};
use corrsight_core::model::{ModelSpec, ModelVariant};
use corrsight_core::layers::CellUpdate;
use corrsight_core::optim::{LossKind, OptimizerKind};
use corrsight_core::tensor::Activation;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub preset: Option<String>,
    pub d: usize,
    pub step: usize,
    pub h: usize,
    pub z: f64,
    pub epochs: usize,
    pub variant: String,
    pub cell_update: String,
    pub activation: String,
    pub optimizer: String,
    pub loss: String,
    pub lr: f64,
    pub batch_size: usize,
    pub kernel: usize,
    pub encoder_filters: Vec<usize>,
    pub decoder_filters: Vec<usize>,
    pub align_dim: usize,
    pub decode_full_sequence: bool,
    pub error_reduction: String,
    pub embed_dim: usize,
    pub hpo_trials: usize,
    pub hpo_epochs: usize,
    pub retrain_epochs: usize,
    pub rolling: usize,
    pub val_fraction: f64,
    pub test_normal_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 17,
            preset: None,
            d: 30,
            step: 5,
            h: 5,
            z: 3.0,
            epochs: 100,
            variant: "full".into(),
            cell_update: "printed".into(),
            activation: "tanh".into(),
            optimizer: "adam".into(),
            loss: "mse".into(),
            lr: 1e-3,
            batch_size: 16,
            kernel: 3,
            encoder_filters: vec![64, 64, 32],
            decoder_filters: vec![32, 64, 64],
            align_dim: 32,
            decode_full_sequence: true,
            error_reduction: "last".into(),
            embed_dim: 0,
            hpo_trials: corrsight_core::hpo::DEFAULT_TRIALS,
            hpo_epochs: corrsight_core::hpo::DEFAULT_TRIAL_EPOCHS,
            retrain_epochs: corrsight_core::hpo::DEFAULT_RETRAIN_EPOCHS,
            rolling: 0,
            val_fraction: 0.2,
            test_normal_fraction: 0.25,
        }
    }
}

/// A partial config: every key optional, applied on top of another
/// config. Both the command line and the config file produce one.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigPatch {
    pub seed: Option<u64>,
    pub preset: Option<String>,
    pub d: Option<usize>,
    pub step: Option<usize>,
    pub h: Option<usize>,
    pub z: Option<f64>,
    pub epochs: Option<usize>,
    pub variant: Option<String>,
    pub cell_update: Option<String>,
    pub activation: Option<String>,
    pub optimizer: Option<String>,
    pub loss: Option<String>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub kernel: Option<usize>,
    pub encoder_filters: Option<Vec<usize>>,
    pub decoder_filters: Option<Vec<usize>>,
    pub align_dim: Option<usize>,
    pub decode_full_sequence: Option<bool>,
    pub error_reduction: Option<String>,
    pub embed_dim: Option<usize>,
    pub hpo_trials: Option<usize>,
    pub hpo_epochs: Option<usize>,
    pub retrain_epochs: Option<usize>,
    pub rolling: Option<usize>,
    pub val_fraction: Option<f64>,
    pub test_normal_fraction: Option<f64>,
}

macro_rules! apply_fields {
    ($cfg:ident, $patch:ident: $($field:ident),+ $(,)?) => {
        $(if let Some(v) = &$patch.$field {
            $cfg.$field = v.clone();
        })+
    };
}

impl RunConfig {
    pub fn apply(&mut self, patch: &ConfigPatch) {
        apply_fields!(
            self, patch: seed, d, step, h, z, epochs, variant, cell_update,
            activation, optimizer, loss, lr, batch_size, kernel,
            encoder_filters, decoder_filters, align_dim,
            decode_full_sequence, error_reduction, embed_dim, hpo_trials,
            hpo_epochs, retrain_epochs, rolling, val_fraction,
            test_normal_fraction,
        );
        if patch.preset.is_some() {
            self.preset = patch.preset.clone();
        }
    }

    /// Resolves the preset into d/step and checks every field.
    pub fn finalize(&mut self) -> CliResult<()> {
        if let Some(p) = &self.preset {
            let (d, step) = match p.as_str() {
                "exp1" => (10, 2),
                "exp2" => (30, 5),
                "exp3" => (60, 10),
                other => {
                    return Err(Failure::config(format!(
                        "unknown preset {other:?} (exp1, exp2, exp3)"
                    )))
                }
            };
            self.d = d;
            self.step = step;
        }
        if self.d == 0 || self.step == 0 || self.h == 0 {
            return Err(Failure::config("d, step, and h must all be at least 1"));
        }
        if !(self.z > 0.0) {
            return Err(Failure::config("z must be positive"));
        }
        if !(0.0..1.0).contains(&self.val_fraction)
            || !(0.0..1.0).contains(&self.test_normal_fraction)
        {
            return Err(Failure::config(
                "val_fraction and test_normal_fraction must lie in [0, 1)",
            ));
        }
        self.parse_variant()?;
        self.parse_cell_update()?;
        self.parse_activation()?;
        self.parse_optimizer()?;
        self.parse_loss()?;
        self.parse_error_reduction()?;
        Ok(())
    }

    pub fn parse_variant(&self) -> CliResult<ModelVariant> {
        ModelVariant::parse(&self.variant).map_err(|e| Failure::config(e.to_string()))
    }

    pub fn parse_cell_update(&self) -> CliResult<CellUpdate> {
        match self.cell_update.as_str() {
            "printed" => Ok(CellUpdate::Coupled),
            "standard" => Ok(CellUpdate::Uncoupled),
            other => Err(Failure::config(format!(
                "unknown cell_update {other:?} (printed, standard)"
            ))),
        }
    }

    pub fn parse_activation(&self) -> CliResult<Activation> {
        Activation::parse(&self.activation).map_err(|e| Failure::config(e.to_string()))
    }

    pub fn parse_optimizer(&self) -> CliResult<OptimizerKind> {
        OptimizerKind::parse(&self.optimizer).map_err(|e| Failure::config(e.to_string()))
    }

    pub fn parse_loss(&self) -> CliResult<LossKind> {
        LossKind::parse(&self.loss).map_err(|e| Failure::config(e.to_string()))
    }

    pub fn parse_error_reduction(&self) -> CliResult<corrsight_core::detect::ErrorReduction> {
        match self.error_reduction.as_str() {
            "last" => Ok(corrsight_core::detect::ErrorReduction::LastImage),
            "mean" => Ok(corrsight_core::detect::ErrorReduction::SequenceMean),
            other => Err(Failure::config(format!(
                "unknown error_reduction {other:?} (last, mean)"
            ))),
        }
    }

    /// The model spec for a given image side.
    pub fn model_spec(&self, input_side: usize) -> CliResult<ModelSpec> {
        let spec = ModelSpec {
            input_side,
            h: self.h,
            encoder_filters: self.encoder_filters.clone(),
            decoder_filters: self.decoder_filters.clone(),
            kernel: self.kernel,
            activation: self.parse_activation()?,
            update: self.parse_cell_update()?,
            variant: self.parse_variant()?,
            align_dim: self.align_dim,
            decode_full_sequence: self.decode_full_sequence,
        };
        spec.validate().map_err(|e| Failure::config(e.to_string()))?;
        Ok(spec)
    }

    /// Stable hash of the effective configuration.
    pub fn hash(&self) -> String {
        let text = toml::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(text.as_bytes());
        let digest = hasher.finalize();
        let mut out = String::with_capacity(64);
        for b in digest {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

pub fn patch_from_file(path: &Path) -> CliResult<ConfigPatch> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::config(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text)
        .map_err(|e| Failure::config(format!("bad config {}: {e}", path.display())))
}

/// Defaults, then flags, then the file (the file wins), then validation.
pub fn resolve(flags: &ConfigPatch, file: Option<&Path>) -> CliResult<RunConfig> {
    let mut config = RunConfig::default();
    config.apply(flags);
    if let Some(path) = file {
        let patch = patch_from_file(path)?;
        config.apply(&patch);
    }
    config.finalize()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_pin_window_and_step() {
        for (name, d, step) in [("exp1", 10, 2), ("exp2", 30, 5), ("exp3", 60, 10)] {
            let mut c = RunConfig::default();
            c.preset = Some(name.into());
            c.finalize().unwrap();
            assert_eq!((c.d, c.step), (d, step), "{name}");
        }
        let mut bad = RunConfig::default();
        bad.preset = Some("exp9".into());
        assert!(bad.finalize().is_err());
    }

    #[test]
    fn file_beats_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "seed = 99\nd = 12\n").unwrap();
        let flags = ConfigPatch {
            seed: Some(5),
            step: Some(4),
            ..ConfigPatch::default()
        };
        let c = resolve(&flags, Some(&path)).unwrap();
        assert_eq!(c.seed, 99, "file value wins");
        assert_eq!(c.d, 12);
        assert_eq!(c.step, 4, "flag survives when the file is silent");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<ConfigPatch>("windowsize = 10\n").unwrap_err();
        assert!(err.to_string().contains("windowsize"));
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.hash(), b.hash());
        b.seed = 18;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn enum_fields_are_validated() {
        for (field, value) in [
            ("variant", "fancy"),
            ("cell_update", "coupled"),
            ("activation", "swish"),
            ("optimizer", "lion"),
            ("loss", "huber"),
            ("error_reduction", "median"),
        ] {
            let mut c = RunConfig::default();
            match field {
                "variant" => c.variant = value.into(),
                "cell_update" => c.cell_update = value.into(),
                "activation" => c.activation = value.into(),
                "optimizer" => c.optimizer = value.into(),
                "loss" => c.loss = value.into(),
                _ => c.error_reduction = value.into(),
            }
            assert!(c.finalize().is_err(), "{field}={value} accepted");
        }
    }

    #[test]
    fn printed_update_maps_to_coupled() {
        let c = RunConfig::default();
        assert_eq!(c.parse_cell_update().unwrap(), CellUpdate::Coupled);
        let mut s = RunConfig::default();
        s.cell_update = "standard".into();
        assert_eq!(s.parse_cell_update().unwrap(), CellUpdate::Uncoupled);
    }

    #[test]
    fn model_spec_carries_config_choices() {
        let mut c = RunConfig::default();
        c.encoder_filters = vec![4, 4, 2];
        c.decoder_filters = vec![2, 4, 4];
        c.activation = "elu".into();
        c.variant = "shallow".into();
        let spec = c.model_spec(10).unwrap();
        assert_eq!(spec.input_side, 10);
        assert_eq!(spec.activation, Activation::Elu);
        assert_eq!(spec.variant, ModelVariant::Shallow);
        assert!(c.model_spec(3).is_err(), "too small for the pools");
    }

    #[test]
    fn toml_round_trip_preserves_the_config() {
        let mut c = RunConfig::default();
        c.preset = Some("exp2".into());
        c.finalize().unwrap();
        let text = c.to_toml();
        let patch: ConfigPatch = toml::from_str(&text).unwrap();
        let mut back = RunConfig::default();
        back.apply(&patch);
        back.finalize().unwrap();
        assert_eq!(c, back);
    }
}
