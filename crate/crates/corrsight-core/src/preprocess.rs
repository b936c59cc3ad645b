//! Raw series in, model-ready series out.
//!
//! A [`TimeSeriesSet`] holds every sensor series of a recording campaign
//! plus the bookkeeping the rest of the pipeline needs: which timestamps
//! belong to which experiment, how each experiment is labeled, and any
//! categorical context columns (recipe, clamp pressure bucket, tool id).
//!
//! Processing order: fit min-max ranges on the training experiments and
//! rescale everything with them, cut sliding windows that never straddle an
//! experiment boundary, and turn categorical columns into learnable
//! embedding pseudo-series appended after the sensor rows.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Health verdict attached to an experiment or a window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Normal,
    Anomalous,
    /// No ground truth; excluded from metric computation.
    Unknown,
}

/// One categorical context column, a category id per timestamp.
#[derive(Debug, Clone)]
pub struct ContextColumn {
    pub name: String,
    /// Number of distinct categories `q`; ids are `0..q`.
    pub num_categories: usize,
    pub values: Vec<usize>,
}

/// Contiguous run of timestamps belonging to one experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExperimentSpan {
    pub id: usize,
    /// First timestamp (inclusive).
    pub start: usize,
    /// One past the last timestamp.
    pub end: usize,
}

impl ExperimentSpan {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

/// A multivariate recording: `n` series over `T` timestamps, partitioned
/// into experiments.
#[derive(Debug, Clone)]
pub struct TimeSeriesSet {
    pub names: Vec<String>,
    /// `n` rows of length `T` each.
    pub values: Vec<Vec<f64>>,
    pub context: Vec<ContextColumn>,
    /// Experiment id per timestamp; equal ids must form one contiguous run.
    pub experiment_ids: Vec<usize>,
    pub experiment_labels: BTreeMap<usize, Label>,
    pub sample_rate_hz: f64,
}

impl TimeSeriesSet {
    pub fn new(
        names: Vec<String>,
        values: Vec<Vec<f64>>,
        context: Vec<ContextColumn>,
        experiment_ids: Vec<usize>,
        experiment_labels: BTreeMap<usize, Label>,
        sample_rate_hz: f64,
    ) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("timeseries", "no series"));
        }
        if names.len() != values.len() {
            return Err(Error::invalid(
                "timeseries",
                format!("{} names for {} series", names.len(), values.len()),
            ));
        }
        let t = values[0].len();
        if t == 0 {
            return Err(Error::invalid("timeseries", "empty series"));
        }
        if let Some(bad) = values.iter().position(|v| v.len() != t) {
            return Err(Error::invalid(
                "timeseries",
                format!("series {bad} has {} values, expected {t}", values[bad].len()),
            ));
        }
        if experiment_ids.len() != t {
            return Err(Error::invalid(
                "timeseries",
                format!("{} experiment ids for {t} timestamps", experiment_ids.len()),
            ));
        }
        for col in &context {
            if col.values.len() != t {
                return Err(Error::invalid(
                    "timeseries",
                    format!("context column {} has {} values, expected {t}", col.name, col.values.len()),
                ));
            }
            if let Some(&v) = col.values.iter().find(|&&v| v >= col.num_categories) {
                return Err(Error::invalid(
                    "timeseries",
                    format!("context column {} has category id {v} >= q={}", col.name, col.num_categories),
                ));
            }
        }
        // contiguity: an id may not reappear after a different id interrupted it
        let mut seen = BTreeSet::new();
        let mut prev: Option<usize> = None;
        for &id in &experiment_ids {
            if prev != Some(id) {
                if !seen.insert(id) {
                    return Err(Error::invalid(
                        "timeseries",
                        format!("experiment {id} appears in two separate runs"),
                    ));
                }
                prev = Some(id);
            }
        }
        Ok(TimeSeriesSet {
            names,
            values,
            context,
            experiment_ids,
            experiment_labels,
            sample_rate_hz,
        })
    }

    /// Number of series.
    pub fn n_series(&self) -> usize {
        self.values.len()
    }

    /// Number of timestamps.
    pub fn len(&self) -> usize {
        self.values[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The contiguous experiment runs, in time order.
    pub fn experiments(&self) -> Vec<ExperimentSpan> {
        let mut spans = Vec::new();
        let mut start = 0usize;
        for t in 1..=self.experiment_ids.len() {
            if t == self.experiment_ids.len() || self.experiment_ids[t] != self.experiment_ids[start] {
                spans.push(ExperimentSpan {
                    id: self.experiment_ids[start],
                    start,
                    end: t,
                });
                start = t;
            }
        }
        spans
    }

    pub fn label_of(&self, experiment: usize) -> Label {
        self.experiment_labels
            .get(&experiment)
            .copied()
            .unwrap_or(Label::Unknown)
    }
}

/// Fitted per-series scaling range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeriesRange {
    pub min: f64,
    pub max: f64,
}

impl SeriesRange {
    /// `(x - min) / (max - min)`; a collapsed range maps everything to 0.
    pub fn apply(&self, x: f64) -> f64 {
        let span = self.max - self.min;
        if span == 0.0 {
            0.0
        } else {
            (x - self.min) / span
        }
    }
}

/// Min-max rescaling fitted on the given experiments only and applied to
/// every timestamp. Values outside the fitted range land outside [0, 1],
/// which is exactly what should happen to unseen test data.
pub fn minmax_normalize(
    x: &TimeSeriesSet,
    fit_experiments: &BTreeSet<usize>,
) -> Result<(TimeSeriesSet, Vec<SeriesRange>)> {
    if fit_experiments.is_empty() {
        return Err(Error::invalid("minmax_normalize", "no experiments to fit on"));
    }
    let known: BTreeSet<usize> = x.experiment_ids.iter().copied().collect();
    if let Some(missing) = fit_experiments.iter().find(|id| !known.contains(id)) {
        return Err(Error::invalid(
            "minmax_normalize",
            format!("fit experiment {missing} not present in the data"),
        ));
    }
    let fit_mask: Vec<bool> = x
        .experiment_ids
        .iter()
        .map(|id| fit_experiments.contains(id))
        .collect();
    let ranges: Vec<SeriesRange> = x
        .values
        .iter()
        .map(|series| {
            let mut min = f64::INFINITY;
            let mut max = f64::NEG_INFINITY;
            for (v, keep) in series.iter().zip(&fit_mask) {
                if *keep {
                    min = min.min(*v);
                    max = max.max(*v);
                }
            }
            SeriesRange { min, max }
        })
        .collect();
    let normalized = normalize_with(x, &ranges)?;
    Ok((normalized, ranges))
}

/// Applies previously fitted ranges, e.g. the ones stored in a checkpoint.
pub fn normalize_with(x: &TimeSeriesSet, ranges: &[SeriesRange]) -> Result<TimeSeriesSet> {
    if ranges.len() != x.n_series() {
        return Err(Error::invalid(
            "normalize_with",
            format!("{} ranges for {} series", ranges.len(), x.n_series()),
        ));
    }
    let mut out = x.clone();
    for (series, range) in out.values.iter_mut().zip(ranges) {
        for v in series.iter_mut() {
            *v = range.apply(*v);
        }
    }
    Ok(out)
}

/// One sliding window: `d` timestamps starting at `start`, fully inside
/// one experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub start: usize,
    pub experiment: usize,
    pub label: Label,
}

/// All windows of a recording at one (d, step) setting.
#[derive(Debug, Clone)]
pub struct WindowIndex {
    pub d: usize,
    pub step: usize,
    pub windows: Vec<Window>,
    /// Experiments shorter than `d`, as (experiment id, length). They
    /// produce no windows; the caller decides whether to warn.
    pub skipped_experiments: Vec<(usize, usize)>,
}

/// Cuts sliding windows per experiment. A window's label is its
/// experiment's label: any timestamp inside a failed experiment makes the
/// whole window anomalous.
pub fn make_windows(x: &TimeSeriesSet, d: usize, step: usize) -> Result<WindowIndex> {
    if d == 0 || step == 0 {
        return Err(Error::invalid("make_windows", "d and step must be at least 1"));
    }
    if d > x.len() {
        return Err(Error::invalid(
            "make_windows",
            format!("window size {d} exceeds series length {}", x.len()),
        ));
    }
    let mut windows = Vec::new();
    let mut skipped = Vec::new();
    for span in x.experiments() {
        if span.len() < d {
            skipped.push((span.id, span.len()));
            continue;
        }
        let label = x.label_of(span.id);
        let mut start = span.start;
        while start + d <= span.end {
            windows.push(Window {
                start,
                experiment: span.id,
                label,
            });
            start += step;
        }
    }
    Ok(WindowIndex {
        d,
        step,
        windows,
        skipped_experiments: skipped,
    })
}

/// Learnable q-by-p embedding for one categorical variable.
pub struct EmbeddingTable {
    pub name: String,
    pub num_categories: usize,
    pub dim: usize,
    pub weights: Tensor,
}

impl EmbeddingTable {
    /// Default embedding width for `q` categories: `min(ceil(q/2), 8)`,
    /// at least 1.
    pub fn default_dim(q: usize) -> usize {
        q.div_ceil(2).clamp(1, 8)
    }

    pub fn new(name: &str, q: usize, p: usize, rng: &mut SeededRng) -> Result<Self> {
        if q == 0 || p == 0 {
            return Err(Error::invalid("embedding", "q and p must be at least 1"));
        }
        if q > 1 && p >= q {
            return Err(Error::invalid(
                "embedding",
                format!("embedding dim {p} must stay below category count {q}"),
            ));
        }
        Ok(EmbeddingTable {
            name: name.to_string(),
            num_categories: q,
            dim: p,
            weights: crate::layers::xavier_uniform(&[q, p], q, p, rng)?,
        })
    }

    /// Differentiable lookup of category `v`, shape `[p]`.
    pub fn embed(&self, v: usize) -> Result<Tensor> {
        embed_context(self, v)
    }
}

/// Row `v` of the table as a `[p]` tensor on the graph, so losses reach the
/// table.
pub fn embed_context(table: &EmbeddingTable, v: usize) -> Result<Tensor> {
    if v >= table.num_categories {
        return Err(Error::invalid(
            "embed_context",
            format!(
                "category id {v} out of range for {} ({} categories)",
                table.name, table.num_categories
            ),
        ));
    }
    table.weights.select_row(v)?.reshape(&[table.dim])
}

/// Appends each embedding component as a pseudo-series after the sensor
/// rows, valued by the current table weights at each timestamp's category.
/// No context columns means the input comes back unchanged.
pub fn enrich(x: &TimeSeriesSet, tables: &[EmbeddingTable]) -> Result<TimeSeriesSet> {
    if tables.len() != x.context.len() {
        return Err(Error::invalid(
            "enrich",
            format!("{} tables for {} context columns", tables.len(), x.context.len()),
        ));
    }
    let mut out = x.clone();
    for (col, table) in x.context.iter().zip(tables) {
        if table.num_categories != col.num_categories {
            return Err(Error::invalid(
                "enrich",
                format!(
                    "table {} has {} categories, column {} has {}",
                    table.name, table.num_categories, col.name, col.num_categories
                ),
            ));
        }
        let weights = table.weights.to_vec();
        for k in 0..table.dim {
            let series: Vec<f64> = col
                .values
                .iter()
                .map(|&v| weights[v * table.dim + k])
                .collect();
            out.names.push(format!("{}.e{k}", col.name));
            out.values.push(series);
        }
    }
    Ok(out)
}
