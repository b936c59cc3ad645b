use clap::{Args, Parser, Subcommand};
use corrsight_cli::artifacts::load_train_report;
use corrsight_cli::config::{resolve, ConfigPatch, RunConfig};
use corrsight_cli::fail::CliResult;
use corrsight_cli::pipeline::{
    self, dataset_summary, load_dataset, run_detect, run_plot_data, run_search, run_synth,
    run_training, OutPaths,
};
use corrsight_core::detect::{Metrics, RankEntry};
use corrsight_core::synth::SynthSpec;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "corrsight",
    version,
    about = "Correlation-image anomaly detection for multivariate sensor recordings"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Configuration file (TOML); its settings override the flags
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Window preset: exp1 (10/2), exp2 (30/5), exp3 (60/10)
    #[arg(long)]
    preset: Option<String>,
    /// Window length in timestamps
    #[arg(long)]
    d: Option<usize>,
    /// Window stride in timestamps
    #[arg(long)]
    step: Option<usize>,
    /// Windows per model sample
    #[arg(long)]
    h: Option<usize>,
    /// Threshold width in standard deviations
    #[arg(long)]
    z: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Model flavor: full, no-attention, shallow
    #[arg(long)]
    variant: Option<String>,
    /// Cell state update rule: printed, standard
    #[arg(long)]
    cell_update: Option<String>,
    /// Candidate/output activation: sigmoid, tanh, relu, leaky_relu, elu, selu
    #[arg(long)]
    activation: Option<String>,
    /// Optimizer: sgd, adam, rmsprop, adadelta
    #[arg(long)]
    optimizer: Option<String>,
    /// Training loss: mae, mse, rmse
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Convolution kernel side (odd)
    #[arg(long)]
    kernel: Option<usize>,
    /// Encoder filter counts, comma separated
    #[arg(long, value_delimiter = ',')]
    encoder_filters: Option<Vec<usize>>,
    /// Decoder filter counts, comma separated
    #[arg(long, value_delimiter = ',')]
    decoder_filters: Option<Vec<usize>>,
    /// Attention alignment width
    #[arg(long)]
    align_dim: Option<usize>,
    /// Reconstruct the whole sequence (true) or only the last image
    #[arg(long)]
    decode_full_sequence: Option<bool>,
    /// Error matrix source: last, mean
    #[arg(long)]
    error_reduction: Option<String>,
    /// Embedding width per context variable; 0 derives it from the category count
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    hpo_trials: Option<usize>,
    #[arg(long)]
    hpo_epochs: Option<usize>,
    #[arg(long)]
    retrain_epochs: Option<usize>,
    /// Rolling threshold buffer capacity; 0 keeps thresholds fixed
    #[arg(long)]
    rolling: Option<usize>,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    test_normal_fraction: Option<f64>,
}

impl ConfigArgs {
    fn resolve(&self) -> CliResult<RunConfig> {
        let patch = ConfigPatch {
            seed: self.seed,
            preset: self.preset.clone(),
            d: self.d,
            step: self.step,
            h: self.h,
            z: self.z,
            epochs: self.epochs,
            variant: self.variant.clone(),
            cell_update: self.cell_update.clone(),
            activation: self.activation.clone(),
            optimizer: self.optimizer.clone(),
            loss: self.loss.clone(),
            lr: self.lr,
            batch_size: self.batch_size,
            kernel: self.kernel,
            encoder_filters: self.encoder_filters.clone(),
            decoder_filters: self.decoder_filters.clone(),
            align_dim: self.align_dim,
            decode_full_sequence: self.decode_full_sequence,
            error_reduction: self.error_reduction.clone(),
            embed_dim: self.embed_dim,
            hpo_trials: self.hpo_trials,
            hpo_epochs: self.hpo_epochs,
            retrain_epochs: self.retrain_epochs,
            rolling: self.rolling,
            val_fraction: self.val_fraction,
            test_normal_fraction: self.test_normal_fraction,
        };
        resolve(&patch, self.config.as_deref())
    }
}

#[derive(Subcommand)]
enum Command {
    /// Validate a dataset directory and summarize its experiments
    Ingest {
        /// Directory holding schema.toml and the experiment CSVs
        #[arg(long)]
        data: PathBuf,
    },
    /// Generate a labeled synthetic dataset
    Synth {
        /// Directory to write the CSVs, schema, and ground truth into
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        series: usize,
        /// Timestamps per experiment
        #[arg(long, default_value_t = 2000)]
        timesteps: usize,
        #[arg(long, default_value_t = 6)]
        experiments: usize,
        /// How many experiments carry an injected anomaly
        #[arg(long, default_value_t = 2)]
        anomalous: usize,
        /// Categories of the generated context variable; 0 omits it
        #[arg(long, default_value_t = 3)]
        categories: usize,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train a model and evaluate it on the held-out experiments
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Directory for the checkpoint, thresholds, and reports
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Random hyperparameter search, then retrain the best setting
    Hpo {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run a saved model against a dataset
    Detect {
        #[arg(long)]
        data: PathBuf,
        /// Directory holding model.ckpt and thresholds.txt; receives report.txt
        #[arg(long)]
        artifacts: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Print the saved detection report
    Report {
        #[arg(long)]
        artifacts: PathBuf,
    },
    /// Write plottable curves recomputed from a checkpoint
    PlotData {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        artifacts: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(failure) = run(cli.command) {
        eprintln!("{failure}");
        std::process::exit(failure.stage.exit_code());
    }
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Ingest { data } => {
            let (set, _) = load_dataset(&data)?;
            println!(
                "{} series, {} timestamps, {} experiments",
                set.n_series(),
                set.len(),
                set.experiments().len()
            );
            for (id, label, len) in dataset_summary(&set) {
                println!("experiment {id}: {label:?}, {len} timestamps");
            }
            Ok(())
        }
        Command::Synth {
            out,
            series,
            timesteps,
            experiments,
            anomalous,
            categories,
            cfg,
        } => {
            let config = cfg.resolve()?;
            let mut spec = SynthSpec::new(series, timesteps, experiments, anomalous);
            spec.context_categories = categories;
            let files = run_synth(&config, spec, &out)?;
            println!("wrote {} experiments to {}", files.len(), out.display());
            Ok(())
        }
        Command::Train { data, out, cfg } => {
            let config = cfg.resolve()?;
            let (set, _) = load_dataset(&data)?;
            let paths = OutPaths::new(out);
            let result = run_training(&config, &set, &paths)?;
            println!(
                "test windows {} (flagged {})",
                result.test_windows, result.anomalous_windows
            );
            print_metrics(&result.metrics, Some(result.report.wall_secs));
            print_ranking(&result.ranking, Some(&result.feature_names));
            println!("artifacts in {}", paths.dir.display());
            Ok(())
        }
        Command::Hpo { data, out, cfg } => {
            let config = cfg.resolve()?;
            let (set, _) = load_dataset(&data)?;
            let paths = OutPaths::new(out);
            let (outcome, result) = run_search(&config, &set, &paths)?;
            let failed = outcome.trials.iter().filter(|t| t.error.is_some()).count();
            println!(
                "searched {} settings ({} failed), best: {}",
                outcome.trials.len(),
                failed,
                outcome.best_config().describe()
            );
            println!(
                "test windows {} (flagged {})",
                result.test_windows, result.anomalous_windows
            );
            print_metrics(&result.metrics, Some(result.report.wall_secs));
            print_ranking(&result.ranking, Some(&result.feature_names));
            println!("artifacts in {}", paths.dir.display());
            Ok(())
        }
        Command::Detect {
            data,
            artifacts,
            cfg,
        } => {
            let config = cfg.resolve()?;
            let paths = OutPaths::new(artifacts);
            let outcome = run_detect(&config, &data, &paths)?;
            if let Some(note) = &outcome.geometry_note {
                eprintln!("{note}");
            }
            println!(
                "windows {} (flagged {})",
                outcome.test_windows, outcome.anomalous_windows
            );
            print_metrics(&outcome.metrics, None);
            print_ranking(&outcome.ranking, Some(&outcome.feature_names));
            println!("report written to {}", paths.report().display());
            Ok(())
        }
        Command::Report { artifacts } => {
            let paths = OutPaths::new(artifacts);
            let file = corrsight_cli::artifacts::load_report(&paths.report())?;
            println!(
                "windows {} (flagged {})",
                file.report.verdicts.len(),
                file.report.anomalous_count()
            );
            let train_secs = load_train_report(&paths.train_report())
                .ok()
                .map(|(r, _)| r.wall_secs);
            print_metrics(&file.metrics, train_secs);
            let names = pipeline::report_feature_names(&paths);
            print_ranking(&file.ranking, names.as_deref());
            Ok(())
        }
        Command::PlotData {
            data,
            artifacts,
            cfg,
        } => {
            let config = cfg.resolve()?;
            let paths = OutPaths::new(artifacts);
            let path = run_plot_data(&config, &data, &paths)?;
            println!("plot data written to {}", path.display());
            Ok(())
        }
    }
}

fn print_metrics(m: &Metrics, train_secs: Option<f64>) {
    println!(
        "{:<12} {:<12} {:<12} {:<12}",
        "precision", "recall", "f1", "train_secs"
    );
    let secs = train_secs
        .map(|s| format!("{s:.1}"))
        .unwrap_or_else(|| "-".to_string());
    println!(
        "{:<12.4} {:<12.4} {:<12.4} {:<12}",
        m.precision, m.recall, m.f1, secs
    );
    if !m.degenerate.is_empty() {
        println!("zero denominator for: {}", m.degenerate.join(", "));
    }
}

fn print_ranking(ranking: &[RankEntry], names: Option<&[String]>) {
    if ranking.is_empty() {
        return;
    }
    let shown: Vec<String> = ranking
        .iter()
        .take(5)
        .map(|r| {
            let name = names
                .and_then(|n| n.get(r.feature).cloned())
                .unwrap_or_else(|| format!("feature {}", r.feature));
            format!("{name} {:.1}%", r.percentage)
        })
        .collect();
    println!("root causes: {}", shown.join(", "));
}
