//! End-to-end orchestration behind the subcommands: dataset preparation
//! and splitting, training, hyperparameter search, detection against a
//! saved checkpoint, and the artifact files each run leaves behind.
//!
//! Split policy: every anomalous or unlabeled experiment goes to the test
//! set, the last `test_normal_fraction` of normal experiments (by id) are
//! held out as normal test data, and the rest train the model. The
//! validation slice is the time-ordered tail of the training samples.
//! Normalization is fitted on the training experiments only, and
//! thresholds on the training plus validation reconstruction errors.

use crate::artifacts::{
    load_checkpoint, load_thresholds, save_checkpoint, save_plot_data, save_report, save_search,
    save_thresholds, save_train_report, CheckpointMeta, PlotSection, ReportFile,
};
use crate::config::RunConfig;
use crate::fail::{CliResult, Failure};
use crate::ingest::{self, Schema};
use corrsight_core::detect::{
    detect, detect_rolling, fit_thresholds, reconstruction_errors, root_cause_ranking, score,
    AnomalyReport, ErrorRecord, Metrics, RankEntry, SampleMeta, ThresholdMatrix,
};
use corrsight_core::hpo::{random_search, HyperparamConfig, SearchOutcome};
use corrsight_core::model::{ModelState, ModelVariant};
use corrsight_core::preprocess::{
    make_windows, minmax_normalize, normalize_with, EmbeddingTable, Label, TimeSeriesSet, Window,
};
use corrsight_core::rng::seeded_stream;
use corrsight_core::synth::{generate, SynthSpec};
use corrsight_core::train::{fit, time_ordered_split, TrainConfig, TrainReport, WindowSamples};
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

const MODEL_RNG_STREAM: u64 = 3;
const TRIAL_RNG_STREAM_BASE: u64 = 1000;

/// Artifact locations inside one run directory.
pub struct OutPaths {
    pub dir: PathBuf,
}

impl OutPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        OutPaths { dir: dir.into() }
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("model.ckpt")
    }

    pub fn thresholds(&self) -> PathBuf {
        self.dir.join("thresholds.txt")
    }

    pub fn report(&self) -> PathBuf {
        self.dir.join("report.txt")
    }

    pub fn train_report(&self) -> PathBuf {
        self.dir.join("train.txt")
    }

    pub fn search(&self) -> PathBuf {
        self.dir.join("search.txt")
    }

    pub fn plot(&self) -> PathBuf {
        self.dir.join("plot.txt")
    }
}

fn runtime(e: corrsight_core::Error) -> Failure {
    Failure::runtime(e.to_string())
}

pub fn load_dataset(dir: &Path) -> CliResult<(TimeSeriesSet, Schema)> {
    let schema = ingest::load_schema(&dir.join("schema.toml"))?;
    let files = ingest::dataset_files(dir)?;
    let data = ingest::ingest(&files, &schema)?;
    Ok((data, schema))
}

pub struct ExperimentSplit {
    pub train: BTreeSet<usize>,
    pub test: BTreeSet<usize>,
}

pub fn split_experiments(
    data: &TimeSeriesSet,
    test_normal_fraction: f64,
) -> CliResult<ExperimentSplit> {
    let mut normal = Vec::new();
    let mut test = BTreeSet::new();
    for span in data.experiments() {
        match data.label_of(span.id) {
            Label::Normal => normal.push(span.id),
            Label::Anomalous | Label::Unknown => {
                test.insert(span.id);
            }
        }
    }
    if normal.is_empty() {
        return Err(Failure::ingest(
            "no experiments labeled normal; nothing to train on",
        ));
    }
    normal.sort_unstable();
    let held_out = (((normal.len() as f64) * test_normal_fraction).round() as usize)
        .min(normal.len() - 1);
    let cut = normal.len() - held_out;
    let train: BTreeSet<usize> = normal[..cut].iter().copied().collect();
    test.extend(&normal[cut..]);
    Ok(ExperimentSplit { train, test })
}

/// Overlapping runs of `h` consecutive windows that stay inside one
/// experiment, matching how images are grouped into model samples.
/// Returns the groups and the experiments too short to produce any,
/// as (id, window count).
pub fn window_groups(windows: &[Window], h: usize) -> (Vec<Vec<Window>>, Vec<(usize, usize)>) {
    let mut groups = Vec::new();
    let mut skipped = Vec::new();
    let mut run_start = 0usize;
    for end in 1..=windows.len() {
        let run_done =
            end == windows.len() || windows[end].experiment != windows[run_start].experiment;
        if !run_done {
            continue;
        }
        let run = &windows[run_start..end];
        if run.len() < h {
            skipped.push((run[0].experiment, run.len()));
        } else {
            for first in 0..=run.len() - h {
                groups.push(run[first..first + h].to_vec());
            }
        }
        run_start = end;
    }
    (groups, skipped)
}

fn group_meta(group: &[Window]) -> SampleMeta {
    let last = group.last().expect("groups are never empty");
    SampleMeta {
        window_start: last.start,
        experiment: last.experiment,
        label: last.label,
    }
}

pub struct Prepared {
    pub normalized: TimeSeriesSet,
    pub ranges: Vec<corrsight_core::preprocess::SeriesRange>,
    pub side: usize,
    pub context_dims: Vec<(String, usize, usize)>,
    pub train_groups: Vec<Vec<Window>>,
    pub val_groups: Vec<Vec<Window>>,
    pub test_groups: Vec<Vec<Window>>,
    /// Experiments that produced no samples, as (id, window count).
    pub skipped: Vec<(usize, usize)>,
}

pub fn prepare(config: &RunConfig, data: &TimeSeriesSet) -> CliResult<Prepared> {
    let split = split_experiments(data, config.test_normal_fraction)?;
    let (normalized, ranges) =
        minmax_normalize(data, &split.train).map_err(|e| Failure::ingest(e.to_string()))?;
    let index = make_windows(&normalized, config.d, config.step)
        .map_err(|e| Failure::ingest(e.to_string()))?;
    let (groups, mut skipped) = window_groups(&index.windows, config.h);
    skipped.extend(index.skipped_experiments);

    let mut train_pool = Vec::new();
    let mut test_groups = Vec::new();
    for group in groups {
        if split.train.contains(&group[0].experiment) {
            train_pool.push(group);
        } else {
            test_groups.push(group);
        }
    }
    if train_pool.is_empty() {
        return Err(Failure::ingest(format!(
            "no training samples: need {} windows of {} timestamps in a normal experiment",
            config.h, config.d
        )));
    }
    let (train_idx, val_idx) = time_ordered_split(train_pool.len(), config.val_fraction);
    let val_groups: Vec<Vec<Window>> = val_idx.iter().map(|&i| train_pool[i].clone()).collect();
    let train_groups: Vec<Vec<Window>> = train_idx.iter().map(|&i| train_pool[i].clone()).collect();

    let context_dims: Vec<(String, usize, usize)> = data
        .context
        .iter()
        .map(|c| {
            let dim = if config.embed_dim > 0 {
                config.embed_dim
            } else {
                EmbeddingTable::default_dim(c.num_categories)
            };
            (c.name.clone(), c.num_categories, dim)
        })
        .collect();
    let side = data.n_series() + context_dims.iter().map(|d| d.2).sum::<usize>();

    Ok(Prepared {
        normalized,
        ranges,
        side,
        context_dims,
        train_groups,
        val_groups,
        test_groups,
        skipped,
    })
}

/// Names for feature-image rows: the series themselves, then one entry
/// per embedding dimension.
pub fn feature_names(data: &TimeSeriesSet, context_dims: &[(String, usize, usize)]) -> Vec<String> {
    let mut names = data.names.clone();
    for (name, _, dim) in context_dims {
        for k in 0..*dim {
            names.push(format!("{name}#{k}"));
        }
    }
    names
}

pub struct TrainArtifacts {
    pub report: TrainReport,
    pub metrics: Metrics,
    pub ranking: Vec<RankEntry>,
    pub test_windows: usize,
    pub anomalous_windows: usize,
    pub feature_names: Vec<String>,
}

pub fn run_training(
    config: &RunConfig,
    data: &TimeSeriesSet,
    out: &OutPaths,
) -> CliResult<TrainArtifacts> {
    let prepared = prepare(config, data)?;
    let spec = config.model_spec(prepared.side)?;
    let model = ModelState::new(
        spec,
        &prepared.context_dims,
        &mut seeded_stream(config.seed, MODEL_RNG_STREAM),
    )
    .map_err(|e| Failure::config(e.to_string()))?;

    let train_src = WindowSamples {
        sensors: &prepared.normalized,
        groups: prepared.train_groups.clone(),
        d: config.d,
    };
    let val_src = WindowSamples {
        sensors: &prepared.normalized,
        groups: prepared.val_groups.clone(),
        d: config.d,
    };
    let train_config = TrainConfig {
        epochs: config.epochs,
        batch_size: config.batch_size,
        optimizer: config.parse_optimizer()?,
        lr: config.lr,
        loss: config.parse_loss()?,
        seed: config.seed,
    };
    let val: Option<&dyn corrsight_core::train::SampleSource> = if prepared.val_groups.is_empty() {
        None
    } else {
        Some(&val_src)
    };
    let report = fit(&model, &train_src, val, train_config).map_err(runtime)?;

    evaluate_and_save(config, data, &prepared, &model, report, out)
}

/// The post-training tail shared by `train` and the search retrain:
/// thresholds from the training-side errors, detection on the test split,
/// scoring over the windows whose truth is known, and every artifact file.
fn evaluate_and_save(
    config: &RunConfig,
    data: &TimeSeriesSet,
    prepared: &Prepared,
    model: &ModelState,
    report: TrainReport,
    out: &OutPaths,
) -> CliResult<TrainArtifacts> {
    let hash = config.hash();
    let reduction = config.parse_error_reduction()?;

    let mut fit_groups = prepared.train_groups.clone();
    fit_groups.extend(prepared.val_groups.iter().cloned());
    let fit_metas: Vec<SampleMeta> = fit_groups.iter().map(|g| group_meta(g)).collect();
    let fit_src = WindowSamples {
        sensors: &prepared.normalized,
        groups: fit_groups,
        d: config.d,
    };
    let fit_errors =
        reconstruction_errors(model, &fit_src, &fit_metas, reduction).map_err(runtime)?;
    let thresholds = fit_thresholds(&fit_errors, config.z).map_err(runtime)?;

    let test_metas: Vec<SampleMeta> = prepared.test_groups.iter().map(|g| group_meta(g)).collect();
    let test_src = WindowSamples {
        sensors: &prepared.normalized,
        groups: prepared.test_groups.clone(),
        d: config.d,
    };
    let test_errors =
        reconstruction_errors(model, &test_src, &test_metas, reduction).map_err(runtime)?;
    let anomaly_report = run_detection(config, &test_errors, &thresholds)?;

    let metrics = score_known(&anomaly_report)?;
    let ranking = root_cause_ranking(&anomaly_report);
    let truth: Vec<Label> = anomaly_report.verdicts.iter().map(|v| v.meta.label).collect();

    save_checkpoint(
        &out.checkpoint(),
        model,
        &CheckpointMeta {
            seed: config.seed,
            config_hash: hash.clone(),
            d: config.d,
            step: config.step,
            series: data.names.clone(),
            ranges: prepared.ranges.clone(),
        },
    )?;
    save_thresholds(&out.thresholds(), &thresholds, &hash, config.seed)?;
    save_train_report(&out.train_report(), &report, &hash)?;
    let test_windows = anomaly_report.verdicts.len();
    let anomalous_windows = anomaly_report.anomalous_count();
    let report_file = ReportFile {
        report: anomaly_report,
        truth,
        metrics: metrics.clone(),
        ranking: ranking.clone(),
        config_hash: hash,
        seed: config.seed,
    };
    save_report(&out.report(), &report_file)?;

    Ok(TrainArtifacts {
        report,
        metrics,
        ranking,
        test_windows,
        anomalous_windows,
        feature_names: feature_names(data, &prepared.context_dims),
    })
}

fn run_detection(
    config: &RunConfig,
    errors: &[ErrorRecord],
    thresholds: &ThresholdMatrix,
) -> CliResult<AnomalyReport> {
    if config.rolling > 0 {
        detect_rolling(errors, thresholds, config.rolling).map_err(runtime)
    } else {
        detect(errors, thresholds).map_err(runtime)
    }
}

/// Scores the verdicts whose ground truth is known; windows without a
/// label stay in the report but cannot be judged.
fn score_known(report: &AnomalyReport) -> CliResult<Metrics> {
    let known: Vec<_> = report
        .verdicts
        .iter()
        .filter(|v| v.meta.label != Label::Unknown)
        .cloned()
        .collect();
    let truth: Vec<Label> = known.iter().map(|v| v.meta.label).collect();
    let sub = AnomalyReport {
        side: report.side,
        z: report.z,
        verdicts: known,
    };
    score(&sub, &truth).map_err(runtime)
}

pub fn run_search(
    config: &RunConfig,
    data: &TimeSeriesSet,
    out: &OutPaths,
) -> CliResult<(SearchOutcome, TrainArtifacts)> {
    let prepared = prepare(config, data)?;
    if prepared.val_groups.is_empty() {
        return Err(Failure::config(
            "the search compares validation losses; raise val_fraction above zero",
        ));
    }
    let base_spec = config.model_spec(prepared.side)?;
    let train_src = WindowSamples {
        sensors: &prepared.normalized,
        groups: prepared.train_groups.clone(),
        d: config.d,
    };
    let val_src = WindowSamples {
        sensors: &prepared.normalized,
        groups: prepared.val_groups.clone(),
        d: config.d,
    };

    let runner = |index: usize, hp: &HyperparamConfig| -> corrsight_core::Result<TrainReport> {
        let mut spec = base_spec.clone();
        spec.activation = hp.activation;
        let model = ModelState::new(
            spec,
            &prepared.context_dims,
            &mut seeded_stream(config.seed, TRIAL_RNG_STREAM_BASE + index as u64),
        )?;
        let trial_config = TrainConfig {
            epochs: config.hpo_epochs,
            batch_size: hp.batch_size,
            optimizer: hp.optimizer,
            lr: hp.lr,
            loss: hp.loss,
            seed: config.seed.wrapping_add(index as u64),
        };
        fit(&model, &train_src, Some(&val_src), trial_config)
    };
    let outcome = random_search(config.hpo_trials, config.seed, runner).map_err(runtime)?;
    save_search(&out.search(), &outcome, &config.hash(), config.seed)?;

    let best = outcome.best_config();
    let mut retrain = config.clone();
    retrain.activation = best.activation.name().to_string();
    retrain.optimizer = best.optimizer.name().to_string();
    retrain.loss = best.loss.name().to_string();
    retrain.lr = best.lr;
    retrain.batch_size = best.batch_size;
    retrain.epochs = config.retrain_epochs;
    let artifacts = run_training(&retrain, data, out)?;
    Ok((outcome, artifacts))
}

pub fn run_synth(config: &RunConfig, spec: SynthSpec, dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut spec = spec;
    spec.seed = config.seed;
    let output = generate(&spec).map_err(|e| Failure::config(e.to_string()))?;
    ingest::write_dataset(dir, &output)
}

pub struct DetectOutcome {
    pub metrics: Metrics,
    pub ranking: Vec<RankEntry>,
    pub test_windows: usize,
    pub anomalous_windows: usize,
    pub feature_names: Vec<String>,
    /// Window geometry taken from the checkpoint, when it disagrees with
    /// the requested configuration.
    pub geometry_note: Option<String>,
}

/// Runs a saved model against a dataset directory: the checkpoint decides
/// the window geometry and normalization, the configuration decides z,
/// the error reduction, and rolling updates.
pub fn run_detect(
    config: &RunConfig,
    data_dir: &Path,
    artifacts: &OutPaths,
) -> CliResult<DetectOutcome> {
    let (model, meta) = load_checkpoint(&artifacts.checkpoint())?;
    let (stored, _, _) = load_thresholds(&artifacts.thresholds())?;
    if stored.side != model.spec.input_side {
        return Err(Failure::runtime(format!(
            "thresholds are {}x{} but the model reconstructs {}x{} images",
            stored.side, stored.side, model.spec.input_side, model.spec.input_side
        )));
    }
    let (raw, _) = load_dataset(data_dir)?;
    if raw.names != meta.series {
        return Err(Failure::ingest(format!(
            "dataset series {:?} do not match the checkpoint's {:?}",
            raw.names, meta.series
        )));
    }
    let mut context_dims = Vec::new();
    for table in &model.embeddings {
        let column = raw
            .context
            .iter()
            .find(|c| c.name == table.name)
            .ok_or_else(|| {
                Failure::ingest(format!(
                    "dataset lacks context column {:?} the model was trained with",
                    table.name
                ))
            })?;
        if column.num_categories != table.num_categories {
            return Err(Failure::ingest(format!(
                "context {:?} has {} categories, the model was trained with {}",
                table.name, column.num_categories, table.num_categories
            )));
        }
        context_dims.push((table.name.clone(), table.num_categories, table.dim));
    }

    let geometry_note = if config.d != meta.d || config.step != meta.step {
        Some(format!(
            "using window {}x{} from the checkpoint instead of the configured {}x{}",
            meta.d, meta.step, config.d, config.step
        ))
    } else {
        None
    };

    let normalized = normalize_with(&raw, &meta.ranges).map_err(runtime)?;
    let index = make_windows(&normalized, meta.d, meta.step)
        .map_err(|e| Failure::ingest(e.to_string()))?;
    let (groups, _) = window_groups(&index.windows, model.spec.h);
    if groups.is_empty() {
        return Err(Failure::ingest(format!(
            "dataset too short for any sample ({} windows of {} timestamps needed)",
            model.spec.h, meta.d
        )));
    }
    let metas: Vec<SampleMeta> = groups.iter().map(|g| group_meta(g)).collect();
    let src = WindowSamples {
        sensors: &normalized,
        groups,
        d: meta.d,
    };
    let errors = reconstruction_errors(&model, &src, &metas, config.parse_error_reduction()?)
        .map_err(runtime)?;

    let thresholds = ThresholdMatrix {
        side: stored.side,
        z: config.z,
        epsilon: stored
            .mu
            .iter()
            .zip(&stored.sigma)
            .map(|(m, s)| m + config.z * s)
            .collect(),
        mu: stored.mu,
        sigma: stored.sigma,
    };
    let report = run_detection(config, &errors, &thresholds)?;
    let metrics = score_known(&report)?;
    let ranking = root_cause_ranking(&report);
    let truth: Vec<Label> = report.verdicts.iter().map(|v| v.meta.label).collect();
    let test_windows = report.verdicts.len();
    let anomalous_windows = report.anomalous_count();

    save_report(
        &artifacts.report(),
        &ReportFile {
            report,
            truth,
            metrics: metrics.clone(),
            ranking: ranking.clone(),
            config_hash: meta.config_hash.clone(),
            seed: meta.seed,
        },
    )?;

    Ok(DetectOutcome {
        metrics,
        ranking,
        test_windows,
        anomalous_windows,
        feature_names: feature_names(&raw, &context_dims),
        geometry_note,
    })
}

/// Recomputes reconstructions from a checkpoint and writes plottable
/// series: original versus reconstructed values of the most violated
/// pair, the per-window error against its threshold, and the root-cause
/// ranking.
pub fn run_plot_data(
    config: &RunConfig,
    data_dir: &Path,
    artifacts: &OutPaths,
) -> CliResult<PathBuf> {
    let (model, meta) = load_checkpoint(&artifacts.checkpoint())?;
    let (stored, _, _) = load_thresholds(&artifacts.thresholds())?;
    let (raw, _) = load_dataset(data_dir)?;
    if raw.names != meta.series {
        return Err(Failure::ingest(format!(
            "dataset series {:?} do not match the checkpoint's {:?}",
            raw.names, meta.series
        )));
    }
    let normalized = normalize_with(&raw, &meta.ranges).map_err(runtime)?;
    let index = make_windows(&normalized, meta.d, meta.step)
        .map_err(|e| Failure::ingest(e.to_string()))?;
    let (groups, _) = window_groups(&index.windows, model.spec.h);
    if groups.is_empty() {
        return Err(Failure::ingest("dataset too short for any sample"));
    }
    let metas: Vec<SampleMeta> = groups.iter().map(|g| group_meta(g)).collect();
    let src = WindowSamples {
        sensors: &normalized,
        groups: groups.clone(),
        d: meta.d,
    };
    let reduction = config.parse_error_reduction()?;
    let errors = reconstruction_errors(&model, &src, &metas, reduction).map_err(runtime)?;
    let report = detect(&errors, &stored).map_err(runtime)?;
    let ranking = root_cause_ranking(&report);

    let side = model.spec.input_side;
    let (ci, cj) = hottest_cell(&report, side);
    let cell = ci * side + cj;
    let last_block = |values: &[f64]| -> f64 {
        let cells = side * side;
        values[values.len() - cells + cell]
    };

    let mut normal_rows = Vec::new();
    let mut anomalous_rows = Vec::new();
    let mut curve_rows = Vec::new();
    for (k, (group, m)) in groups.iter().zip(&metas).enumerate() {
        let sample = corrsight_core::model::assemble_sample(
            &normalized,
            &model.embeddings,
            group,
            meta.d,
        )
        .map_err(runtime)?;
        let output = model.forward(&sample).map_err(runtime)?;
        let original = last_block(&sample.to_vec());
        let reconstructed = last_block(&output.reconstruction.to_vec());
        let row = vec![m.window_start as f64, original, reconstructed];
        match m.label {
            Label::Normal => normal_rows.push(row),
            Label::Anomalous => anomalous_rows.push(row),
            Label::Unknown => {}
        }
        curve_rows.push(vec![
            m.window_start as f64,
            errors[k].matrix[cell],
            stored.epsilon[cell],
        ]);
    }

    let pair_columns = || {
        vec![
            "window_start".to_string(),
            format!("original_{ci}_{cj}"),
            format!("reconstructed_{ci}_{cj}"),
        ]
    };
    let mut sections = Vec::new();
    if !normal_rows.is_empty() {
        sections.push(PlotSection {
            name: "pair_normal".into(),
            columns: pair_columns(),
            rows: normal_rows,
        });
    }
    if !anomalous_rows.is_empty() {
        sections.push(PlotSection {
            name: "pair_anomalous".into(),
            columns: pair_columns(),
            rows: anomalous_rows,
        });
    }
    sections.push(PlotSection {
        name: "error_curve".into(),
        columns: vec![
            "window_start".into(),
            format!("error_{ci}_{cj}"),
            format!("threshold_{ci}_{cj}"),
        ],
        rows: curve_rows,
    });
    sections.push(PlotSection {
        name: "ranking".into(),
        columns: vec!["feature".into(), "percentage".into()],
        rows: ranking
            .iter()
            .map(|r| vec![r.feature as f64, r.percentage])
            .collect(),
    });

    let path = artifacts.plot();
    save_plot_data(&path, &sections)?;
    Ok(path)
}

/// The upper-triangle cell violated most often, falling back to (0, 1).
fn hottest_cell(report: &AnomalyReport, side: usize) -> (usize, usize) {
    let mut counts = vec![0usize; side * side];
    for verdict in &report.verdicts {
        for v in &verdict.violations {
            counts[v.i * side + v.j] += 1;
        }
    }
    match counts.iter().enumerate().max_by_key(|(_, &c)| c) {
        Some((idx, &c)) if c > 0 => (idx / side, idx % side),
        _ => (0, 1.min(side.saturating_sub(1))),
    }
}

/// One row per experiment: id, label, timestamps.
pub fn dataset_summary(data: &TimeSeriesSet) -> Vec<(usize, Label, usize)> {
    data.experiments()
        .iter()
        .map(|span| (span.id, data.label_of(span.id), span.end - span.start))
        .collect()
}

/// The variant actually requested, for log lines.
pub fn variant_of(config: &RunConfig) -> CliResult<ModelVariant> {
    config.parse_variant()
}

/// Feature names recovered from a checkpoint, if one sits next to the
/// report.
pub fn report_feature_names(artifacts: &OutPaths) -> Option<Vec<String>> {
    let (model, meta) = load_checkpoint(&artifacts.checkpoint()).ok()?;
    let mut names = meta.series;
    for table in &model.embeddings {
        for k in 0..table.dim {
            names.push(format!("{}#{k}", table.name));
        }
    }
    Some(names)
}
