//! Dataset ingestion: a TOML schema manifest describing the CSV layout,
//! strict header validation, per-experiment assembly with forward-fill
//! imputation, and the matching writer used to emit synthetic datasets.
//!
//! Sensor cells may be empty or one of the not-a-value markers; those are
//! forward-filled within their experiment, and a leading gap copies the
//! first real value backward. Context cells are categorical and must
//! always be present. A row whose label maps to the anomalous set marks
//! its whole experiment anomalous.

use crate::fail::{CliResult, Failure};
use corrsight_core::preprocess::{ContextColumn, Label, TimeSeriesSet};
use corrsight_core::synth::{AnomalyDescriptor, AnomalyKind, SynthOutput};
use serde::Deserialize;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const TRUTH_HEADER: &str = "corrsight-truth v1";

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextSpec {
    pub name: String,
    pub categories: usize,
}

fn default_delimiter() -> String {
    ",".to_string()
}

fn default_sample_rate() -> f64 {
    1.0
}

fn default_anomalous_values() -> Vec<String> {
    vec!["anomalous".into(), "fail".into(), "1".into()]
}

fn default_normal_values() -> Vec<String> {
    vec!["normal".into(), "pass".into(), "0".into()]
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schema {
    pub series: Vec<String>,
    #[serde(default)]
    pub context: Vec<ContextSpec>,
    #[serde(default)]
    pub experiment_column: Option<String>,
    #[serde(default)]
    pub label_column: Option<String>,
    #[serde(default = "default_delimiter")]
    pub delimiter: String,
    #[serde(default = "default_sample_rate")]
    pub sample_rate_hz: f64,
    #[serde(default = "default_anomalous_values")]
    pub anomalous_values: Vec<String>,
    #[serde(default = "default_normal_values")]
    pub normal_values: Vec<String>,
}

impl Schema {
    fn delimiter_byte(&self) -> CliResult<u8> {
        let bytes = self.delimiter.as_bytes();
        if bytes.len() != 1 {
            return Err(Failure::config(format!(
                "delimiter must be a single byte, got {:?}",
                self.delimiter
            )));
        }
        Ok(bytes[0])
    }
}

pub fn load_schema(path: &Path) -> CliResult<Schema> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::ingest(format!("cannot read {}: {e}", path.display())))?;
    let schema: Schema = toml::from_str(&text)
        .map_err(|e| Failure::ingest(format!("bad schema {}: {e}", path.display())))?;
    if schema.series.is_empty() {
        return Err(Failure::ingest(format!(
            "{}: schema lists no series columns",
            path.display()
        )));
    }
    Ok(schema)
}

const MISSING_MARKERS: [&str; 4] = ["", "nan", "na", "null"];

fn is_missing(cell: &str) -> bool {
    MISSING_MARKERS.contains(&cell.trim().to_ascii_lowercase().as_str())
}

struct RawRow {
    experiment: usize,
    sensors: Vec<Option<f64>>,
    context: Vec<usize>,
    label: Option<Label>,
}

/// Reads every file against the schema and assembles one concatenated
/// set. Files without an experiment column get one experiment per file,
/// numbered by position in `paths`.
pub fn ingest(paths: &[PathBuf], schema: &Schema) -> CliResult<TimeSeriesSet> {
    if paths.is_empty() {
        return Err(Failure::ingest("no input files"));
    }
    let delimiter = schema.delimiter_byte().map_err(|f| Failure::ingest(f.msg))?;
    let mut rows: Vec<RawRow> = Vec::new();

    for (file_index, path) in paths.iter().enumerate() {
        let mut reader = csv::ReaderBuilder::new()
            .delimiter(delimiter)
            .has_headers(true)
            .flexible(true)
            .from_path(path)
            .map_err(|e| Failure::ingest(format!("cannot open {}: {e}", path.display())))?;

        let headers = reader
            .headers()
            .map_err(|e| Failure::ingest(format!("{}: {e}", path.display())))?
            .clone();
        let position = |name: &str| -> CliResult<usize> {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| {
                    Failure::ingest(format!("{}: missing column {name:?}", path.display()))
                })
        };

        let mut known = schema.series.clone();
        known.extend(schema.context.iter().map(|c| c.name.clone()));
        known.extend(schema.experiment_column.clone());
        known.extend(schema.label_column.clone());
        for h in headers.iter() {
            if !known.iter().any(|k| k == h) {
                return Err(Failure::ingest(format!(
                    "{}: unknown column {h:?} not in the schema",
                    path.display()
                )));
            }
        }

        let series_at: Vec<usize> = schema
            .series
            .iter()
            .map(|n| position(n))
            .collect::<CliResult<_>>()?;
        let context_at: Vec<usize> = schema
            .context
            .iter()
            .map(|c| position(&c.name))
            .collect::<CliResult<_>>()?;
        let experiment_at = match &schema.experiment_column {
            Some(name) => Some(position(name)?),
            None => None,
        };
        let label_at = match &schema.label_column {
            Some(name) => Some(position(name)?),
            None => None,
        };

        for record in reader.records() {
            let record =
                record.map_err(|e| Failure::ingest(format!("{}: {e}", path.display())))?;
            let line = record
                .position()
                .map(|p| p.line())
                .unwrap_or_default();
            let at = |idx: usize| -> CliResult<&str> {
                record.get(idx).ok_or_else(|| {
                    Failure::ingest(format!(
                        "{}:{line}: row has {} fields, expected at least {}",
                        path.display(),
                        record.len(),
                        idx + 1
                    ))
                })
            };

            let experiment = match experiment_at {
                Some(idx) => {
                    let cell = at(idx)?;
                    cell.trim().parse::<usize>().map_err(|_| {
                        Failure::ingest(format!(
                            "{}:{line}: bad experiment id {cell:?}",
                            path.display()
                        ))
                    })?
                }
                None => file_index,
            };

            let mut sensors = Vec::with_capacity(series_at.len());
            for (&idx, name) in series_at.iter().zip(&schema.series) {
                let cell = at(idx)?;
                if is_missing(cell) {
                    sensors.push(None);
                } else {
                    let v = cell.trim().parse::<f64>().map_err(|_| {
                        Failure::ingest(format!(
                            "{}:{line}: bad value {cell:?} in column {name:?}",
                            path.display()
                        ))
                    })?;
                    sensors.push(Some(v));
                }
            }

            let mut context = Vec::with_capacity(context_at.len());
            for (&idx, spec) in context_at.iter().zip(&schema.context) {
                let cell = at(idx)?;
                let v = cell.trim().parse::<usize>().map_err(|_| {
                    Failure::ingest(format!(
                        "{}:{line}: bad category {cell:?} in column {:?}",
                        path.display(),
                        spec.name
                    ))
                })?;
                if v >= spec.categories {
                    return Err(Failure::ingest(format!(
                        "{}:{line}: category {v} out of range for {:?} ({} categories)",
                        path.display(),
                        spec.name,
                        spec.categories
                    )));
                }
                context.push(v);
            }

            let label = match label_at {
                Some(idx) => {
                    let cell = at(idx)?.trim();
                    if schema.anomalous_values.iter().any(|v| v == cell) {
                        Some(Label::Anomalous)
                    } else if schema.normal_values.iter().any(|v| v == cell) {
                        Some(Label::Normal)
                    } else {
                        return Err(Failure::ingest(format!(
                            "{}:{line}: unrecognized label {cell:?}",
                            path.display()
                        )));
                    }
                }
                None => None,
            };

            rows.push(RawRow {
                experiment,
                sensors,
                context,
                label,
            });
        }
    }
    assemble(rows, schema)
}

fn assemble(rows: Vec<RawRow>, schema: &Schema) -> CliResult<TimeSeriesSet> {
    if rows.is_empty() {
        return Err(Failure::ingest("input contained no data rows"));
    }
    let n = schema.series.len();
    let total = rows.len();

    let mut values: Vec<Vec<f64>> = vec![Vec::with_capacity(total); n];
    let mut experiment_ids = Vec::with_capacity(total);
    let mut context_values: Vec<Vec<usize>> = vec![Vec::with_capacity(total); schema.context.len()];
    let mut experiment_labels: BTreeMap<usize, Label> = BTreeMap::new();

    // fill per experiment run so values never leak across experiments
    let mut start = 0;
    while start < rows.len() {
        let experiment = rows[start].experiment;
        let mut end = start + 1;
        while end < rows.len() && rows[end].experiment == experiment {
            end += 1;
        }
        let run = &rows[start..end];

        for i in 0..n {
            let mut filled = Vec::with_capacity(run.len());
            let mut last: Option<f64> = None;
            for row in run {
                if let Some(v) = row.sensors[i] {
                    last = Some(v);
                }
                filled.push(last);
            }
            let first_real = filled.iter().flatten().next().copied().ok_or_else(|| {
                Failure::ingest(format!(
                    "series {:?} has no values in experiment {experiment}",
                    schema.series[i]
                ))
            })?;
            for v in filled {
                values[i].push(v.unwrap_or(first_real));
            }
        }
        for row in run {
            experiment_ids.push(row.experiment);
            for (c, &v) in context_values.iter_mut().zip(&row.context) {
                c.push(v);
            }
        }

        let label = run
            .iter()
            .filter_map(|r| r.label)
            .fold(None, |acc, l| match (acc, l) {
                (Some(Label::Anomalous), _) | (_, Label::Anomalous) => Some(Label::Anomalous),
                _ => Some(Label::Normal),
            })
            .unwrap_or(Label::Unknown);
        match experiment_labels.get(&experiment) {
            Some(Label::Anomalous) => {}
            _ if label == Label::Anomalous => {
                experiment_labels.insert(experiment, label);
            }
            Some(_) => {}
            None => {
                experiment_labels.insert(experiment, label);
            }
        }
        start = end;
    }

    let context = schema
        .context
        .iter()
        .zip(context_values)
        .map(|(spec, vals)| ContextColumn {
            name: spec.name.clone(),
            num_categories: spec.categories,
            values: vals,
        })
        .collect();

    TimeSeriesSet::new(
        schema.series.clone(),
        values,
        context,
        experiment_ids,
        experiment_labels,
        schema.sample_rate_hz,
    )
    .map_err(|e| Failure::ingest(e.to_string()))
}

fn label_word(label: Label) -> &'static str {
    match label {
        Label::Normal => "normal",
        Label::Anomalous => "anomalous",
        Label::Unknown => "unknown",
    }
}

/// Writes one CSV per experiment plus a matching `schema.toml`, and the
/// ground-truth file when descriptors are given. Returns the CSV paths.
pub fn write_dataset(dir: &Path, output: &SynthOutput) -> CliResult<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Failure::ingest(format!("cannot create {}: {e}", dir.display())))?;
    let data = &output.data;

    let mut schema = String::new();
    let _ = writeln!(
        schema,
        "series = [{}]",
        data.names
            .iter()
            .map(|n| format!("{n:?}"))
            .collect::<Vec<_>>()
            .join(", ")
    );
    let _ = writeln!(schema, "experiment_column = \"experiment\"");
    let _ = writeln!(schema, "label_column = \"label\"");
    let _ = writeln!(schema, "sample_rate_hz = {:?}", data.sample_rate_hz);
    for c in &data.context {
        let _ = writeln!(schema, "\n[[context]]");
        let _ = writeln!(schema, "name = {:?}", c.name);
        let _ = writeln!(schema, "categories = {}", c.num_categories);
    }
    let schema_path = dir.join("schema.toml");
    std::fs::write(&schema_path, schema)
        .map_err(|e| Failure::ingest(format!("cannot write {}: {e}", schema_path.display())))?;

    let mut paths = Vec::new();
    for span in data.experiments() {
        let label = label_word(data.label_of(span.id));
        let mut csv_text = String::new();
        let mut header = vec!["experiment".to_string(), "label".to_string()];
        header.extend(data.context.iter().map(|c| c.name.clone()));
        header.extend(data.names.iter().cloned());
        let _ = writeln!(csv_text, "{}", header.join(","));
        for t in span.start..span.end {
            let mut row = vec![span.id.to_string(), label.to_string()];
            row.extend(data.context.iter().map(|c| c.values[t].to_string()));
            row.extend(data.values.iter().map(|s| format!("{}", s[t])));
            let _ = writeln!(csv_text, "{}", row.join(","));
        }
        let path = dir.join(format!("exp_{:03}.csv", span.id));
        std::fs::write(&path, csv_text)
            .map_err(|e| Failure::ingest(format!("cannot write {}: {e}", path.display())))?;
        paths.push(path);
    }

    if !output.descriptors.is_empty() {
        let mut truth = format!("{TRUTH_HEADER}\n");
        truth.push_str("experiment,kind,series\n");
        for d in &output.descriptors {
            let _ = writeln!(truth, "{},{},{}", d.experiment, d.kind.name(), d.series);
        }
        let path = dir.join("truth.txt");
        std::fs::write(&path, truth)
            .map_err(|e| Failure::ingest(format!("cannot write {}: {e}", path.display())))?;
    }
    Ok(paths)
}

pub fn read_truth(path: &Path) -> CliResult<Vec<AnomalyDescriptor>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::ingest(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines();
    if lines.next() != Some(TRUTH_HEADER) {
        return Err(Failure::ingest(format!(
            "{}: not a ground-truth file",
            path.display()
        )));
    }
    let mut out = Vec::new();
    for (k, line) in lines.enumerate() {
        if k == 0 && line.starts_with("experiment,") {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(Failure::ingest(format!(
                "{}: bad truth line {:?}",
                path.display(),
                line
            )));
        }
        let kind = match parts[1] {
            "amplitude-shift" => AnomalyKind::AmplitudeShift,
            "correlation-break" => AnomalyKind::CorrelationBreak,
            "spikes" => AnomalyKind::Spikes,
            other => {
                return Err(Failure::ingest(format!(
                    "{}: unknown anomaly kind {other:?}",
                    path.display()
                )))
            }
        };
        let parse = |s: &str| {
            s.parse::<usize>().map_err(|_| {
                Failure::ingest(format!("{}: bad truth line {:?}", path.display(), line))
            })
        };
        out.push(AnomalyDescriptor {
            experiment: parse(parts[0])?,
            kind,
            series: parse(parts[2])?,
        });
    }
    Ok(out)
}

/// The experiment CSVs of a dataset directory, in name order.
pub fn dataset_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    let entries = std::fs::read_dir(dir)
        .map_err(|e| Failure::ingest(format!("cannot read {}: {e}", dir.display())))?;
    for entry in entries {
        let entry = entry.map_err(|e| Failure::ingest(e.to_string()))?;
        let path = entry.path();
        if path.extension().is_some_and(|e| e == "csv") {
            out.push(path);
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(Failure::ingest(format!(
            "no .csv files in {}",
            dir.display()
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use corrsight_core::synth::{generate, SynthSpec};

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let path = dir.join(name);
        std::fs::write(&path, text).unwrap();
        path
    }

    fn plain_schema() -> Schema {
        toml::from_str(
            r#"
            series = ["a", "b"]
            experiment_column = "experiment"
            label_column = "label"
            "#,
        )
        .unwrap()
    }

    #[test]
    fn round_trips_a_synthetic_dataset() {
        let mut spec = SynthSpec::new(4, 60, 3, 1);
        spec.seed = 31;
        let out = generate(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = write_dataset(dir.path(), &out).unwrap();
        assert_eq!(files.len(), 3);

        let schema = load_schema(&dir.path().join("schema.toml")).unwrap();
        let back = ingest(&files, &schema).unwrap();
        assert_eq!(back.values, out.data.values, "bit-exact value round trip");
        assert_eq!(back.experiment_ids, out.data.experiment_ids);
        assert_eq!(back.experiment_labels, out.data.experiment_labels);
        assert_eq!(back.context[0].values, out.data.context[0].values);

        let truth = read_truth(&dir.path().join("truth.txt")).unwrap();
        assert_eq!(truth, out.descriptors);
    }

    #[test]
    fn forward_fills_gaps_and_backfills_the_head() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(
            dir.path(),
            "d.csv",
            "experiment,label,a,b\n\
             0,normal,,1.0\n\
             0,normal,2.0,\n\
             0,normal,,3.0\n\
             0,normal,4.0,nan\n",
        );
        let set = ingest(&[path], &plain_schema()).unwrap();
        assert_eq!(set.values[0], vec![2.0, 2.0, 2.0, 4.0]);
        assert_eq!(set.values[1], vec![1.0, 1.0, 3.0, 3.0]);
    }

    #[test]
    fn fill_never_crosses_experiments() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(
            dir.path(),
            "d.csv",
            "experiment,label,a,b\n\
             0,normal,5.0,1.0\n\
             0,normal,6.0,1.0\n\
             1,normal,,2.0\n\
             1,normal,9.0,2.0\n",
        );
        let set = ingest(&[path], &plain_schema()).unwrap();
        assert_eq!(set.values[0], vec![5.0, 6.0, 9.0, 9.0], "backfilled from 9, not 6");
    }

    #[test]
    fn malformed_rows_name_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(
            dir.path(),
            "bad.csv",
            "experiment,label,a,b\n0,normal,1.0,2.0\n0,normal,oops,2.0\n",
        );
        let err = ingest(&[path], &plain_schema()).unwrap_err();
        assert!(err.msg.contains("bad.csv:3"), "{}", err.msg);
        assert!(err.msg.contains("oops"));

        let short = write(
            dir.path(),
            "short.csv",
            "experiment,label,a,b\n0,normal,1.0\n",
        );
        let err = ingest(&[short], &plain_schema()).unwrap_err();
        assert!(err.msg.contains("short.csv:2"), "{}", err.msg);
    }

    #[test]
    fn unknown_and_missing_columns_are_named() {
        let dir = tempfile::tempdir().unwrap();
        let extra = write(
            dir.path(),
            "extra.csv",
            "experiment,label,a,b,mystery\n0,normal,1,2,3\n",
        );
        let err = ingest(&[extra], &plain_schema()).unwrap_err();
        assert!(err.msg.contains("mystery"), "{}", err.msg);

        let missing = write(dir.path(), "missing.csv", "experiment,label,a\n0,normal,1\n");
        let err = ingest(&[missing], &plain_schema()).unwrap_err();
        assert!(err.msg.contains("\"b\""), "{}", err.msg);
    }

    #[test]
    fn any_anomalous_row_marks_the_experiment() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(
            dir.path(),
            "d.csv",
            "experiment,label,a,b\n\
             0,normal,1,1\n\
             0,fail,1,1\n\
             1,pass,1,1\n",
        );
        let set = ingest(&[path], &plain_schema()).unwrap();
        assert_eq!(set.label_of(0), Label::Anomalous);
        assert_eq!(set.label_of(1), Label::Normal);
    }

    #[test]
    fn unlabeled_files_number_experiments_by_position() {
        let dir = tempfile::tempdir().unwrap();
        let schema: Schema = toml::from_str(r#"series = ["a", "b"]"#).unwrap();
        let f0 = write(dir.path(), "x.csv", "a,b\n1,2\n3,4\n");
        let f1 = write(dir.path(), "y.csv", "a,b\n5,6\n");
        let set = ingest(&[f0, f1], &schema).unwrap();
        assert_eq!(set.experiment_ids, vec![0, 0, 1]);
        assert_eq!(set.label_of(0), Label::Unknown);
    }

    #[test]
    fn bad_labels_and_categories_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let weird = write(
            dir.path(),
            "weird.csv",
            "experiment,label,a,b\n0,maybe,1,2\n",
        );
        let err = ingest(&[weird], &plain_schema()).unwrap_err();
        assert!(err.msg.contains("maybe"), "{}", err.msg);

        let schema: Schema = toml::from_str(
            r#"
            series = ["a"]
            [[context]]
            name = "stage"
            categories = 2
            "#,
        )
        .unwrap();
        let over = write(dir.path(), "over.csv", "a,stage\n1.0,5\n");
        let err = ingest(&[over], &schema).unwrap_err();
        assert!(err.msg.contains("stage"), "{}", err.msg);
    }
}
