//! Reconstruction errors, per-pair thresholds, anomaly verdicts, root
//! cause ranking, and precision/recall/F1 scoring.
//!
//! Each model sample yields one error matrix: the absolute elementwise
//! difference between the reconstruction and the input, taken on the
//! sample's final image so every window gets exactly one verdict (a
//! sequence-mean reduction is available as an alternative). Thresholds
//! are fitted per pair from normal errors as mean plus `z` population
//! standard deviations, and a pair violates only on a strict exceedance,
//! so a window is anomalous exactly when its violation set is nonempty.

use crate::error::{Error, Result};
use crate::feature_image::FeatureImageSequence;
use crate::model::ModelState;
use crate::preprocess::Label;
use crate::train::SampleSource;
use std::collections::VecDeque;

/// Identifies the window a verdict talks about.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleMeta {
    pub window_start: usize,
    pub experiment: usize,
    pub label: Label,
}

/// Reads per-sample metadata off a feature-image sequence, pinned to each
/// sample's final image.
pub fn metas_from_sequence(seq: &FeatureImageSequence) -> Vec<SampleMeta> {
    seq.samples
        .iter()
        .map(|s| {
            let last = &seq.images[s.first + seq.h - 1];
            SampleMeta {
                window_start: last.window_start,
                experiment: last.experiment,
                label: last.label,
            }
        })
        .collect()
}

/// One error matrix with its provenance.
#[derive(Debug, Clone)]
pub struct ErrorRecord {
    pub matrix: Vec<f64>,
    pub side: usize,
    pub meta: SampleMeta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorReduction {
    /// Error of the sample's final image (default).
    LastImage,
    /// Mean absolute error across the whole reconstructed sequence.
    SequenceMean,
}

/// Runs every sample through the frozen model and collects its error
/// matrix.
pub fn reconstruction_errors(
    model: &ModelState,
    source: &dyn SampleSource,
    metas: &[SampleMeta],
    reduction: ErrorReduction,
) -> Result<Vec<ErrorRecord>> {
    if source.len() != metas.len() {
        return Err(Error::invalid(
            "reconstruction_errors",
            format!("{} samples but {} metadata rows", source.len(), metas.len()),
        ));
    }
    let side = model.spec.input_side;
    let cells = side * side;
    let mut records = Vec::with_capacity(source.len());
    for (i, meta) in metas.iter().enumerate() {
        let input = source.sample(i, model)?;
        let target = input.to_vec();
        let recon = model.forward(&input)?.reconstruction;
        let out = recon.to_vec();
        let steps = recon.shape()[0];

        let matrix = match reduction {
            ErrorReduction::LastImage => {
                let r = &out[(steps - 1) * cells..steps * cells];
                let t = &target[target.len() - cells..];
                r.iter().zip(t).map(|(a, b)| (a - b).abs()).collect()
            }
            ErrorReduction::SequenceMean => {
                let mut acc = vec![0.0; cells];
                let offset = target.len() - steps * cells;
                for s in 0..steps {
                    let r = &out[s * cells..(s + 1) * cells];
                    let t = &target[offset + s * cells..offset + (s + 1) * cells];
                    for (a, (x, y)) in acc.iter_mut().zip(r.iter().zip(t)) {
                        *a += (x - y).abs();
                    }
                }
                acc.iter().map(|v| v / steps as f64).collect()
            }
        };
        records.push(ErrorRecord {
            matrix,
            side,
            meta: *meta,
        });
    }
    Ok(records)
}

/// Per-pair detection thresholds with the statistics they came from.
#[derive(Debug, Clone)]
pub struct ThresholdMatrix {
    pub side: usize,
    pub z: f64,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub epsilon: Vec<f64>,
}

/// Fits per-pair mean and population standard deviation over normal error
/// matrices; the threshold is `mu + z * sigma`.
pub fn fit_thresholds(normal: &[ErrorRecord], z: f64) -> Result<ThresholdMatrix> {
    if normal.len() < 2 {
        return Err(Error::invalid(
            "fit_thresholds",
            format!("need at least 2 normal error matrices, got {}", normal.len()),
        ));
    }
    if !(z > 0.0) {
        return Err(Error::invalid("fit_thresholds", "z must be positive"));
    }
    let side = normal[0].side;
    let cells = side * side;
    for r in normal {
        if r.side != side {
            return Err(Error::invalid("fit_thresholds", "mixed matrix sizes"));
        }
    }
    let count = normal.len() as f64;
    let mut mu = vec![0.0; cells];
    for r in normal {
        for (m, v) in mu.iter_mut().zip(&r.matrix) {
            *m += v;
        }
    }
    for m in mu.iter_mut() {
        *m /= count;
    }
    let mut sigma = vec![0.0; cells];
    for r in normal {
        for ((s, v), m) in sigma.iter_mut().zip(&r.matrix).zip(&mu) {
            let d = v - m;
            *s += d * d;
        }
    }
    for s in sigma.iter_mut() {
        *s = (*s / count).sqrt();
    }
    let epsilon = mu
        .iter()
        .zip(&sigma)
        .map(|(m, s)| m + z * s)
        .collect();
    Ok(ThresholdMatrix {
        side,
        z,
        mu,
        sigma,
        epsilon,
    })
}

/// A pair whose error exceeded its threshold, with how far over it went.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Violation {
    pub i: usize,
    pub j: usize,
    pub margin: f64,
}

#[derive(Debug, Clone)]
pub struct WindowVerdict {
    pub meta: SampleMeta,
    pub anomalous: bool,
    pub violations: Vec<Violation>,
}

#[derive(Debug, Clone)]
pub struct AnomalyReport {
    pub side: usize,
    pub z: f64,
    pub verdicts: Vec<WindowVerdict>,
}

impl AnomalyReport {
    pub fn anomalous_count(&self) -> usize {
        self.verdicts.iter().filter(|v| v.anomalous).count()
    }
}

fn verdict_for(record: &ErrorRecord, thresholds: &ThresholdMatrix) -> WindowVerdict {
    let side = record.side;
    let mut violations = Vec::new();
    for i in 0..side {
        for j in i..side {
            let e = record.matrix[i * side + j];
            let eps = thresholds.epsilon[i * side + j];
            if e > eps {
                violations.push(Violation {
                    i,
                    j,
                    margin: e - eps,
                });
            }
        }
    }
    WindowVerdict {
        meta: record.meta,
        anomalous: !violations.is_empty(),
        violations,
    }
}

/// Flags every window whose error matrix strictly exceeds the thresholds
/// anywhere. Violations are reported over the upper triangle (i <= j)
/// since both matrices are symmetric.
pub fn detect(errors: &[ErrorRecord], thresholds: &ThresholdMatrix) -> Result<AnomalyReport> {
    for r in errors {
        if r.side != thresholds.side {
            return Err(Error::ShapeMismatch {
                op: "detect",
                lhs: vec![r.side, r.side],
                rhs: vec![thresholds.side, thresholds.side],
            });
        }
    }
    Ok(AnomalyReport {
        side: thresholds.side,
        z: thresholds.z,
        verdicts: errors.iter().map(|r| verdict_for(r, thresholds)).collect(),
    })
}

/// Streaming variant: windows judged normal join a bounded buffer, and
/// once the buffer holds `capacity` of them the thresholds are refitted
/// from that buffer after every further normal window, so the baseline
/// tracks slow drift. Windows are processed in order.
pub fn detect_rolling(
    errors: &[ErrorRecord],
    initial: &ThresholdMatrix,
    capacity: usize,
) -> Result<AnomalyReport> {
    if capacity < 2 {
        return Err(Error::invalid(
            "detect_rolling",
            "rolling buffer needs capacity of at least 2",
        ));
    }
    let mut thresholds = initial.clone();
    let mut buffer: VecDeque<ErrorRecord> = VecDeque::new();
    let mut verdicts = Vec::with_capacity(errors.len());
    for r in errors {
        if r.side != thresholds.side {
            return Err(Error::ShapeMismatch {
                op: "detect_rolling",
                lhs: vec![r.side, r.side],
                rhs: vec![thresholds.side, thresholds.side],
            });
        }
        let v = verdict_for(r, &thresholds);
        if !v.anomalous {
            buffer.push_back(r.clone());
            if buffer.len() > capacity {
                buffer.pop_front();
            }
            if buffer.len() == capacity {
                let snapshot: Vec<ErrorRecord> = buffer.iter().cloned().collect();
                thresholds = fit_thresholds(&snapshot, initial.z)?;
            }
        }
        verdicts.push(v);
    }
    Ok(AnomalyReport {
        side: initial.side,
        z: initial.z,
        verdicts,
    })
}

/// A feature and the share of anomalous windows it helped flag.
#[derive(Debug, Clone, PartialEq)]
pub struct RankEntry {
    pub feature: usize,
    pub percentage: f64,
}

/// Features ordered by how often they appear in anomalous windows'
/// violations, descending, ties by feature index. Empty when nothing was
/// flagged.
pub fn root_cause_ranking(report: &AnomalyReport) -> Vec<RankEntry> {
    let anomalous: Vec<&WindowVerdict> =
        report.verdicts.iter().filter(|v| v.anomalous).collect();
    if anomalous.is_empty() {
        return Vec::new();
    }
    let mut counts = vec![0usize; report.side];
    for v in &anomalous {
        let mut seen = vec![false; report.side];
        for viol in &v.violations {
            seen[viol.i] = true;
            seen[viol.j] = true;
        }
        for (c, s) in counts.iter_mut().zip(&seen) {
            if *s {
                *c += 1;
            }
        }
    }
    let total = anomalous.len() as f64;
    let mut ranking: Vec<RankEntry> = counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .map(|(feature, &c)| RankEntry {
            feature,
            percentage: 100.0 * c as f64 / total,
        })
        .collect();
    ranking.sort_by(|a, b| {
        b.percentage
            .partial_cmp(&a.percentage)
            .unwrap()
            .then(a.feature.cmp(&b.feature))
    });
    ranking
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub true_positives: usize,
    pub false_positives: usize,
    pub true_negatives: usize,
    pub false_negatives: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Names any metric whose denominator was zero (reported as 0).
    pub degenerate: Vec<&'static str>,
}

/// Confusion counts and P/R/F1 against per-window ground truth, where
/// anomalous is the positive class.
pub fn score(report: &AnomalyReport, truth: &[Label]) -> Result<Metrics> {
    if truth.len() != report.verdicts.len() {
        return Err(Error::invalid(
            "score",
            format!(
                "{} ground-truth labels for {} windows",
                truth.len(),
                report.verdicts.len()
            ),
        ));
    }
    let (mut tp, mut fp, mut tn, mut fne) = (0usize, 0usize, 0usize, 0usize);
    for (v, label) in report.verdicts.iter().zip(truth) {
        let actual = match label {
            Label::Anomalous => true,
            Label::Normal => false,
            Label::Unknown => {
                return Err(Error::invalid("score", "window without ground-truth label"))
            }
        };
        match (v.anomalous, actual) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fne += 1,
            (false, false) => tn += 1,
        }
    }
    let mut degenerate = Vec::new();
    let precision = if tp + fp == 0 {
        degenerate.push("precision");
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fne == 0 {
        degenerate.push("recall");
        0.0
    } else {
        tp as f64 / (tp + fne) as f64
    };
    let f1 = if precision + recall == 0.0 {
        degenerate.push("f1");
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(Metrics {
        true_positives: tp,
        false_positives: fp,
        true_negatives: tn,
        false_negatives: fne,
        precision,
        recall,
        f1,
        degenerate,
    })
}
