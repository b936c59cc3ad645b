//! Run artifacts as line-oriented plain text, each file opening with a
//! one-line format version. Floats are written with the shortest decimal
//! representation that parses back to the same bits, so save, load, save
//! produces byte-identical files.

use crate::fail::{CliResult, Failure};
use corrsight_core::detect::{
    AnomalyReport, Metrics, RankEntry, SampleMeta, ThresholdMatrix, Violation, WindowVerdict,
};
use corrsight_core::layers::CellUpdate;
use corrsight_core::model::{ModelSpec, ModelState, ModelVariant};
use corrsight_core::preprocess::{Label, SeriesRange};
use corrsight_core::rng::seeded;
use corrsight_core::tensor::Activation;
use corrsight_core::train::TrainReport;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

pub const CHECKPOINT_HEADER: &str = "corrsight-checkpoint v1";
pub const THRESHOLDS_HEADER: &str = "corrsight-thresholds v1";
pub const REPORT_HEADER: &str = "corrsight-report v1";
pub const TRAIN_HEADER: &str = "corrsight-train v1";
pub const SEARCH_HEADER: &str = "corrsight-search v1";
pub const PLOT_HEADER: &str = "corrsight-plot v1";

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| {
                Failure::runtime(format!("cannot create {}: {e}", dir.display()))
            })?;
        }
    }
    std::fs::write(path, text)
        .map_err(|e| Failure::runtime(format!("cannot write {}: {e}", path.display())))
}

fn read_file(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path)
        .map_err(|e| Failure::runtime(format!("cannot read {}: {e}", path.display())))
}

struct Reader<'a> {
    path: &'a Path,
    lines: Vec<&'a str>,
    at: usize,
}

impl<'a> Reader<'a> {
    fn open(path: &'a Path, text: &'a str, header: &str) -> CliResult<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.first().copied() != Some(header) {
            return Err(Failure::runtime(format!(
                "{}: expected a {header:?} file",
                path.display()
            )));
        }
        Ok(Reader { path, lines, at: 1 })
    }

    fn fail(&self, msg: impl std::fmt::Display) -> Failure {
        Failure::runtime(format!("{}:{}: {msg}", self.path.display(), self.at))
    }

    fn next(&mut self) -> CliResult<&'a str> {
        match self.lines.get(self.at) {
            Some(line) => {
                self.at += 1;
                Ok(line)
            }
            None => Err(Failure::runtime(format!(
                "{}:{}: unexpected end of file",
                self.path.display(),
                self.at + 1
            ))),
        }
    }

    fn take(&mut self, key: &str) -> CliResult<&'a str> {
        let line = self.next()?;
        line.strip_prefix(key)
            .map(|rest| rest.trim_start())
            .filter(|_| line == key || line.as_bytes().get(key.len()) == Some(&b' '))
            .ok_or_else(|| self.fail(format!("expected {key:?}, found {line:?}")))
    }

    fn num<T: FromStr>(&self, token: &str) -> CliResult<T> {
        token
            .parse::<T>()
            .map_err(|_| self.fail(format!("bad number {token:?}")))
    }

    fn nums<T: FromStr>(&self, rest: &str) -> CliResult<Vec<T>> {
        rest.split_whitespace().map(|t| self.num(t)).collect()
    }

    fn take_num<T: FromStr>(&mut self, key: &str) -> CliResult<T> {
        let rest = self.take(key)?;
        self.num(rest)
    }

    fn take_nums<T: FromStr>(&mut self, key: &str) -> CliResult<Vec<T>> {
        let rest = self.take(key)?;
        self.nums(rest)
    }

    fn end(&mut self) -> CliResult<()> {
        let line = self.next()?;
        if line != "end" {
            return Err(self.fail(format!("expected \"end\", found {line:?}")));
        }
        Ok(())
    }
}

fn floats(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| format!("{v}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn no_whitespace(kind: &str, name: &str) -> CliResult<()> {
    if name.contains(char::is_whitespace) || name.is_empty() {
        return Err(Failure::runtime(format!(
            "{kind} name {name:?} cannot be stored; use a single non-empty token"
        )));
    }
    Ok(())
}

fn update_word(update: CellUpdate) -> &'static str {
    match update {
        CellUpdate::Coupled => "coupled",
        CellUpdate::Uncoupled => "uncoupled",
    }
}

fn label_word(label: Label) -> &'static str {
    match label {
        Label::Normal => "normal",
        Label::Anomalous => "anomalous",
        Label::Unknown => "unknown",
    }
}

fn parse_label(reader: &Reader, word: &str) -> CliResult<Label> {
    match word {
        "normal" => Ok(Label::Normal),
        "anomalous" => Ok(Label::Anomalous),
        "unknown" => Ok(Label::Unknown),
        other => Err(reader.fail(format!("bad label {other:?}"))),
    }
}

/// Everything a checkpoint carries besides the weights: provenance and
/// the preprocessing the weights were trained against.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub config_hash: String,
    pub d: usize,
    pub step: usize,
    pub series: Vec<String>,
    pub ranges: Vec<SeriesRange>,
}

pub fn save_checkpoint(path: &Path, model: &ModelState, meta: &CheckpointMeta) -> CliResult<()> {
    let spec = &model.spec;
    let mut out = format!("{CHECKPOINT_HEADER}\n");
    let _ = writeln!(out, "seed {}", meta.seed);
    let _ = writeln!(out, "config_hash {}", meta.config_hash);
    let _ = writeln!(out, "window {} {}", meta.d, meta.step);
    let _ = writeln!(out, "input_side {}", spec.input_side);
    let _ = writeln!(out, "h {}", spec.h);
    let _ = writeln!(out, "kernel {}", spec.kernel);
    let _ = writeln!(out, "activation {}", spec.activation.name());
    let _ = writeln!(out, "update {}", update_word(spec.update));
    let _ = writeln!(out, "variant {}", spec.variant.name());
    let _ = writeln!(out, "align_dim {}", spec.align_dim);
    let _ = writeln!(out, "decode_full_sequence {}", spec.decode_full_sequence);
    let join = |f: &[usize]| {
        f.iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(" ")
    };
    let _ = writeln!(out, "encoder_filters {}", join(&spec.encoder_filters));
    let _ = writeln!(out, "decoder_filters {}", join(&spec.decoder_filters));

    if meta.series.len() != meta.ranges.len() {
        return Err(Failure::runtime(format!(
            "{} series but {} normalization ranges",
            meta.series.len(),
            meta.ranges.len()
        )));
    }
    let _ = writeln!(out, "series {}", meta.series.len());
    for (name, r) in meta.series.iter().zip(&meta.ranges) {
        no_whitespace("series", name)?;
        let _ = writeln!(out, "range {name} {} {}", r.min, r.max);
    }

    let _ = writeln!(out, "embeddings {}", model.embeddings.len());
    for table in &model.embeddings {
        no_whitespace("context", &table.name)?;
        let _ = writeln!(
            out,
            "embedding {} {} {}",
            table.name, table.num_categories, table.dim
        );
    }

    let params = model.named_params();
    let _ = writeln!(out, "params {}", params.len());
    for (name, tensor) in &params {
        let shape = tensor
            .shape()
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let _ = writeln!(out, "param {name} {shape} {}", floats(&tensor.to_vec()));
    }
    out.push_str("end\n");
    write_file(path, &out)
}

pub fn load_checkpoint(path: &Path) -> CliResult<(ModelState, CheckpointMeta)> {
    let text = read_file(path)?;
    let mut r = Reader::open(path, &text, CHECKPOINT_HEADER)?;

    let seed: u64 = r.take_num("seed")?;
    let config_hash = r.take("config_hash")?.to_string();
    let window = r.take_nums::<usize>("window")?;
    let [d, step] = window[..] else {
        return Err(r.fail("window wants length and stride"));
    };
    let input_side: usize = r.take_num("input_side")?;
    let h: usize = r.take_num("h")?;
    let kernel: usize = r.take_num("kernel")?;
    let activation_raw = r.take("activation")?;
    let activation = Activation::parse(activation_raw).map_err(|e| r.fail(e.to_string()))?;
    let update = match r.take("update")? {
        "coupled" => CellUpdate::Coupled,
        "uncoupled" => CellUpdate::Uncoupled,
        other => return Err(r.fail(format!("bad update {other:?}"))),
    };
    let variant_raw = r.take("variant")?;
    let variant = ModelVariant::parse(variant_raw).map_err(|e| r.fail(e.to_string()))?;
    let align_dim: usize = r.take_num("align_dim")?;
    let decode_full_sequence = match r.take("decode_full_sequence")? {
        "true" => true,
        "false" => false,
        other => return Err(r.fail(format!("bad flag {other:?}"))),
    };
    let encoder_filters = r.take_nums::<usize>("encoder_filters")?;
    let decoder_filters = r.take_nums::<usize>("decoder_filters")?;

    let n_series: usize = r.take_num("series")?;
    let mut series = Vec::with_capacity(n_series);
    let mut ranges = Vec::with_capacity(n_series);
    for _ in 0..n_series {
        let rest = r.take("range")?;
        let mut tokens = rest.split_whitespace();
        let name = tokens.next().ok_or_else(|| r.fail("empty range line"))?;
        let min: f64 = r.num(tokens.next().ok_or_else(|| r.fail("range wants min"))?)?;
        let max: f64 = r.num(tokens.next().ok_or_else(|| r.fail("range wants max"))?)?;
        if tokens.next().is_some() {
            return Err(r.fail("trailing tokens on range line"));
        }
        series.push(name.to_string());
        ranges.push(SeriesRange { min, max });
    }

    let n_tables: usize = r.take_num("embeddings")?;
    let mut context_dims = Vec::with_capacity(n_tables);
    for _ in 0..n_tables {
        let rest = r.take("embedding")?;
        let mut tokens = rest.split_whitespace();
        let name = tokens
            .next()
            .ok_or_else(|| r.fail("empty embedding line"))?
            .to_string();
        let q: usize = r.num(tokens.next().ok_or_else(|| r.fail("embedding wants q"))?)?;
        let p: usize = r.num(tokens.next().ok_or_else(|| r.fail("embedding wants dim"))?)?;
        context_dims.push((name, q, p));
    }

    let n_params: usize = r.take_num("params")?;
    let mut stored: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
    for _ in 0..n_params {
        let rest = r.take("param")?;
        let mut tokens = rest.split_whitespace();
        let name = tokens
            .next()
            .ok_or_else(|| r.fail("empty param line"))?
            .to_string();
        let shape: Vec<usize> = tokens
            .next()
            .ok_or_else(|| r.fail("param wants a shape"))?
            .split(',')
            .map(|t| r.num(t))
            .collect::<CliResult<_>>()?;
        let values: Vec<f64> = tokens.map(|t| r.num(t)).collect::<CliResult<_>>()?;
        if values.len() != shape.iter().product::<usize>() {
            return Err(r.fail(format!(
                "param {name} has {} values for shape {shape:?}",
                values.len()
            )));
        }
        if stored.insert(name.clone(), (shape, values)).is_some() {
            return Err(r.fail(format!("duplicate param {name}")));
        }
    }
    r.end()?;

    let spec = ModelSpec {
        input_side,
        h,
        encoder_filters,
        decoder_filters,
        kernel,
        activation,
        update,
        variant,
        align_dim,
        decode_full_sequence,
    };
    let model = ModelState::new(spec, &context_dims, &mut seeded(0))
        .map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))?;
    for (name, tensor) in model.named_params() {
        let (shape, values) = stored.remove(&name).ok_or_else(|| {
            Failure::runtime(format!("{}: missing param {name}", path.display()))
        })?;
        if shape != tensor.shape() {
            return Err(Failure::runtime(format!(
                "{}: param {name} stored as {shape:?}, model wants {:?}",
                path.display(),
                tensor.shape()
            )));
        }
        tensor
            .set_data(values)
            .map_err(|e| Failure::runtime(format!("{}: param {name}: {e}", path.display())))?;
    }
    if let Some(name) = stored.keys().next() {
        return Err(Failure::runtime(format!(
            "{}: param {name} does not exist in this model",
            path.display()
        )));
    }

    let meta = CheckpointMeta {
        seed,
        config_hash,
        d,
        step,
        series,
        ranges,
    };
    Ok((model, meta))
}

pub fn save_thresholds(
    path: &Path,
    thresholds: &ThresholdMatrix,
    config_hash: &str,
    seed: u64,
) -> CliResult<()> {
    let mut out = format!("{THRESHOLDS_HEADER}\n");
    let _ = writeln!(out, "seed {seed}");
    let _ = writeln!(out, "config_hash {config_hash}");
    let _ = writeln!(out, "side {}", thresholds.side);
    let _ = writeln!(out, "z {}", thresholds.z);
    let _ = writeln!(out, "mu {}", floats(&thresholds.mu));
    let _ = writeln!(out, "sigma {}", floats(&thresholds.sigma));
    let _ = writeln!(out, "epsilon {}", floats(&thresholds.epsilon));
    out.push_str("end\n");
    write_file(path, &out)
}

pub fn load_thresholds(path: &Path) -> CliResult<(ThresholdMatrix, String, u64)> {
    let text = read_file(path)?;
    let mut r = Reader::open(path, &text, THRESHOLDS_HEADER)?;
    let seed: u64 = r.take_num("seed")?;
    let config_hash = r.take("config_hash")?.to_string();
    let side: usize = r.take_num("side")?;
    let z: f64 = r.take_num("z")?;
    let mu = r.take_nums::<f64>("mu")?;
    let sigma = r.take_nums::<f64>("sigma")?;
    let epsilon = r.take_nums::<f64>("epsilon")?;
    for (what, v) in [("mu", &mu), ("sigma", &sigma), ("epsilon", &epsilon)] {
        if v.len() != side * side {
            return Err(r.fail(format!(
                "{what} has {} entries for side {side}",
                v.len()
            )));
        }
    }
    r.end()?;
    Ok((
        ThresholdMatrix {
            side,
            z,
            mu,
            sigma,
            epsilon,
        },
        config_hash,
        seed,
    ))
}

/// A detection report bundled with everything needed to recompute its
/// summary numbers from the per-window records.
#[derive(Debug, Clone)]
pub struct ReportFile {
    pub report: AnomalyReport,
    pub truth: Vec<Label>,
    pub metrics: Metrics,
    pub ranking: Vec<RankEntry>,
    pub config_hash: String,
    pub seed: u64,
}

pub fn save_report(path: &Path, file: &ReportFile) -> CliResult<()> {
    let report = &file.report;
    if file.truth.len() != report.verdicts.len() {
        return Err(Failure::runtime(format!(
            "{} truth labels for {} verdicts",
            file.truth.len(),
            report.verdicts.len()
        )));
    }
    let mut out = format!("{REPORT_HEADER}\n");
    let _ = writeln!(out, "seed {}", file.seed);
    let _ = writeln!(out, "config_hash {}", file.config_hash);
    let _ = writeln!(out, "side {}", report.side);
    let _ = writeln!(out, "z {}", report.z);
    let _ = writeln!(out, "windows {}", report.verdicts.len());
    for (v, truth) in report.verdicts.iter().zip(&file.truth) {
        let _ = write!(
            out,
            "window {} {} {} {}",
            v.meta.window_start,
            v.meta.experiment,
            label_word(*truth),
            if v.anomalous { "anomalous" } else { "normal" }
        );
        for viol in &v.violations {
            let _ = write!(out, " {}:{}:{}", viol.i, viol.j, viol.margin);
        }
        out.push('\n');
    }
    let m = &file.metrics;
    let _ = writeln!(
        out,
        "summary tp {} fp {} tn {} fn {}",
        m.true_positives, m.false_positives, m.true_negatives, m.false_negatives
    );
    let _ = writeln!(out, "precision {}", m.precision);
    let _ = writeln!(out, "recall {}", m.recall);
    let _ = writeln!(out, "f1 {}", m.f1);
    let degenerate = if m.degenerate.is_empty() {
        "none".to_string()
    } else {
        m.degenerate.join(",")
    };
    let _ = writeln!(out, "degenerate {degenerate}");
    let _ = writeln!(out, "ranking {}", file.ranking.len());
    for entry in &file.ranking {
        let _ = writeln!(out, "rank {} {}", entry.feature, entry.percentage);
    }
    out.push_str("end\n");
    write_file(path, &out)
}

pub fn load_report(path: &Path) -> CliResult<ReportFile> {
    let text = read_file(path)?;
    let mut r = Reader::open(path, &text, REPORT_HEADER)?;
    let seed: u64 = r.take_num("seed")?;
    let config_hash = r.take("config_hash")?.to_string();
    let side: usize = r.take_num("side")?;
    let z: f64 = r.take_num("z")?;
    let n_windows: usize = r.take_num("windows")?;

    let mut verdicts = Vec::with_capacity(n_windows);
    let mut truth = Vec::with_capacity(n_windows);
    for _ in 0..n_windows {
        let rest = r.take("window")?;
        let mut tokens = rest.split_whitespace();
        let mut next = |what: &str| {
            tokens
                .next()
                .ok_or_else(|| r.fail(format!("window line wants {what}")))
        };
        let window_start: usize = r.num(next("a start")?)?;
        let experiment: usize = r.num(next("an experiment")?)?;
        let truth_label = parse_label(&r, next("a truth label")?)?;
        let anomalous = match next("a verdict")? {
            "anomalous" => true,
            "normal" => false,
            other => return Err(r.fail(format!("bad verdict {other:?}"))),
        };
        let mut violations = Vec::new();
        for token in tokens {
            let parts: Vec<&str> = token.split(':').collect();
            let [i, j, margin] = parts[..] else {
                return Err(r.fail(format!("bad violation {token:?}")));
            };
            violations.push(Violation {
                i: r.num(i)?,
                j: r.num(j)?,
                margin: r.num(margin)?,
            });
        }
        verdicts.push(WindowVerdict {
            meta: SampleMeta {
                window_start,
                experiment,
                label: truth_label,
            },
            anomalous,
            violations,
        });
        truth.push(truth_label);
    }

    let summary = r.take("summary")?;
    let counts = r.nums::<usize>(
        &summary
            .split_whitespace()
            .filter(|t| t.chars().all(|c| c.is_ascii_digit()))
            .collect::<Vec<_>>()
            .join(" "),
    )?;
    let [tp, fp, tn, fn_] = counts[..] else {
        return Err(r.fail("summary wants tp fp tn fn"));
    };
    let precision: f64 = r.take_num("precision")?;
    let recall: f64 = r.take_num("recall")?;
    let f1: f64 = r.take_num("f1")?;
    let degenerate_raw = r.take("degenerate")?;
    let degenerate = if degenerate_raw == "none" {
        Vec::new()
    } else {
        degenerate_raw
            .split(',')
            .map(|t| match t {
                "precision" => Ok("precision"),
                "recall" => Ok("recall"),
                "f1" => Ok("f1"),
                other => Err(r.fail(format!("bad degenerate entry {other:?}"))),
            })
            .collect::<CliResult<_>>()?
    };

    let n_ranks: usize = r.take_num("ranking")?;
    let mut ranking = Vec::with_capacity(n_ranks);
    for _ in 0..n_ranks {
        let rest = r.take("rank")?;
        let mut tokens = rest.split_whitespace();
        let feature: usize =
            r.num(tokens.next().ok_or_else(|| r.fail("rank wants a feature"))?)?;
        let percentage: f64 =
            r.num(tokens.next().ok_or_else(|| r.fail("rank wants a percentage"))?)?;
        ranking.push(RankEntry {
            feature,
            percentage,
        });
    }
    r.end()?;

    Ok(ReportFile {
        report: AnomalyReport {
            side,
            z,
            verdicts,
        },
        truth,
        metrics: Metrics {
            true_positives: tp,
            false_positives: fp,
            true_negatives: tn,
            false_negatives: fn_,
            precision,
            recall,
            f1,
            degenerate,
        },
        ranking,
        config_hash,
        seed,
    })
}

pub fn save_train_report(
    path: &Path,
    report: &TrainReport,
    config_hash: &str,
) -> CliResult<()> {
    let mut out = format!("{TRAIN_HEADER}\n");
    let _ = writeln!(out, "seed {}", report.seed);
    let _ = writeln!(out, "config_hash {config_hash}");
    let _ = writeln!(out, "epochs_run {}", report.epochs_run);
    let _ = writeln!(out, "wall_secs {}", report.wall_secs);
    match report.final_val_loss {
        Some(v) => {
            let _ = writeln!(out, "final_val_loss {v}");
        }
        None => {
            let _ = writeln!(out, "final_val_loss none");
        }
    }
    let _ = writeln!(out, "train_loss {}", floats(&report.epoch_train_loss));
    let _ = writeln!(out, "val_loss {}", floats(&report.epoch_val_loss));
    out.push_str("end\n");
    write_file(path, &out)
}

pub fn load_train_report(path: &Path) -> CliResult<(TrainReport, String)> {
    let text = read_file(path)?;
    let mut r = Reader::open(path, &text, TRAIN_HEADER)?;
    let seed: u64 = r.take_num("seed")?;
    let config_hash = r.take("config_hash")?.to_string();
    let epochs_run: usize = r.take_num("epochs_run")?;
    let wall_secs: f64 = r.take_num("wall_secs")?;
    let final_raw = r.take("final_val_loss")?;
    let final_val_loss = if final_raw == "none" {
        None
    } else {
        Some(r.num::<f64>(final_raw)?)
    };
    let epoch_train_loss = r.take_nums::<f64>("train_loss")?;
    let epoch_val_loss = r.take_nums::<f64>("val_loss")?;
    r.end()?;
    Ok((
        TrainReport {
            epoch_train_loss,
            epoch_val_loss,
            final_val_loss,
            epochs_run,
            wall_secs,
            seed,
        },
        config_hash,
    ))
}

pub fn save_search(
    path: &Path,
    outcome: &corrsight_core::hpo::SearchOutcome,
    config_hash: &str,
    seed: u64,
) -> CliResult<()> {
    let mut out = format!("{SEARCH_HEADER}\n");
    let _ = writeln!(out, "seed {seed}");
    let _ = writeln!(out, "config_hash {config_hash}");
    let _ = writeln!(out, "trials {}", outcome.trials.len());
    for t in &outcome.trials {
        let c = &t.config;
        match (&t.report, &t.error) {
            (Some(report), _) => {
                let _ = writeln!(
                    out,
                    "trial {} ok {} {} {} {} {} {}",
                    t.index,
                    report.final_val_loss.unwrap_or(f64::NAN),
                    c.activation.name(),
                    c.lr,
                    c.batch_size,
                    c.optimizer.name(),
                    c.loss.name()
                );
            }
            (None, Some(err)) => {
                let one_line = err.replace('\n', " ");
                let _ = writeln!(out, "trial {} failed {one_line}", t.index);
            }
            (None, None) => {
                let _ = writeln!(out, "trial {} failed unknown", t.index);
            }
        }
    }
    let best = &outcome.trials[outcome.best];
    let _ = writeln!(out, "best {}", best.index);
    let _ = writeln!(out, "best_config {}", best.config.describe());
    out.push_str("end\n");
    write_file(path, &out)
}

pub struct PlotSection {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

pub fn save_plot_data(path: &Path, sections: &[PlotSection]) -> CliResult<()> {
    let mut out = format!("{PLOT_HEADER}\n");
    for section in sections {
        no_whitespace("section", &section.name)?;
        let _ = writeln!(out, "section {}", section.name);
        let _ = writeln!(out, "columns {}", section.columns.join(" "));
        for row in &section.rows {
            if row.len() != section.columns.len() {
                return Err(Failure::runtime(format!(
                    "plot section {} row has {} values for {} columns",
                    section.name,
                    row.len(),
                    section.columns.len()
                )));
            }
            let _ = writeln!(out, "row {}", floats(row));
        }
    }
    out.push_str("end\n");
    write_file(path, &out)
}
