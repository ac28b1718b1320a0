//! Data ingestion: CSV series, z-score normalization, sliding windows and
//! batch assembly.
//!
//! The canonical on-disk format is a CSV with a header row of feature
//! columns `f00..f{F-1}` plus a `label` column (see `docs/formats.md`).
//! Labels may be constant per file or vary per row; a per-row-labelled
//! window takes the label of its final row.

pub mod synth;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Labelling scheme of one series.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SeriesLabel {
    Constant(usize),
    PerRow(Vec<usize>),
}

/// One multivariate series in engineering units plus its label(s).
#[derive(Debug, Clone)]
pub struct RawSeries {
    pub source: String,
    num_features: usize,
    rows: usize,
    values: Vec<f64>,
    label: SeriesLabel,
}

impl RawSeries {
    pub fn from_parts(values: Vec<f64>, rows: usize, num_features: usize, label: SeriesLabel, source: &str) -> Result<Self> {
        if rows == 0 || num_features == 0 || values.len() != rows * num_features {
            return Err(Error::Contract(format!(
                "series {source}: {} values for {rows} rows x {num_features} features",
                values.len()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::numeric("raw_series", format!("non-finite value in {source}")));
        }
        if let SeriesLabel::PerRow(labels) = &label {
            if labels.len() != rows {
                return Err(Error::Contract(format!("series {source}: {} labels for {rows} rows", labels.len())));
            }
        }
        Ok(RawSeries { source: source.to_string(), num_features, rows, values, label })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.num_features..(r + 1) * self.num_features]
    }

    pub fn label(&self) -> &SeriesLabel {
        &self.label
    }

    pub fn label_of_row(&self, r: usize) -> usize {
        match &self.label {
            SeriesLabel::Constant(l) => *l,
            SeriesLabel::PerRow(ls) => ls[r],
        }
    }
}

/// How `load_csv` treats the label column.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelMode {
    /// Constant if every row agrees, per-row otherwise.
    Auto,
    /// The file declares one label; a differing row is a load error.
    Constant,
}

fn feature_name(i: usize) -> String {
    format!("f{i:02}")
}

fn load_err(path: &Path, msg: String) -> Error {
    Error::Load { path: path.to_path_buf(), msg }
}

/// Loads one CSV series. The header must contain exactly the `num_features`
/// feature columns plus `label`, in any order. Rows are 1-based in errors.
pub fn load_csv(path: &Path, num_features: usize, mode: LabelMode) -> Result<RawSeries> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| load_err(path, format!("cannot open: {e}")))?;
    let headers = reader.headers().map_err(|e| load_err(path, format!("bad header: {e}")))?.clone();

    let mut feature_cols: Vec<Option<usize>> = vec![None; num_features];
    let mut label_col: Option<usize> = None;
    for (idx, name) in headers.iter().enumerate() {
        if name == "label" {
            label_col = Some(idx);
            continue;
        }
        let known = (0..num_features).find(|&i| feature_name(i) == name);
        match known {
            Some(i) => feature_cols[i] = Some(idx),
            None => return Err(load_err(path, format!("unexpected column {name}"))),
        }
    }
    for (i, col) in feature_cols.iter().enumerate() {
        if col.is_none() {
            return Err(load_err(path, format!("missing column {}", feature_name(i))));
        }
    }
    let label_col = label_col.ok_or_else(|| load_err(path, "missing column label".to_string()))?;

    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (ri, record) in reader.records().enumerate() {
        let row = ri + 1;
        let record = record.map_err(|e| load_err(path, format!("row {row}: {e}")))?;
        for (i, col) in feature_cols.iter().enumerate() {
            let cell = record
                .get(col.expect("checked above"))
                .ok_or_else(|| load_err(path, format!("row {row}: missing cell {}", feature_name(i))))?;
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| load_err(path, format!("row {row}, column {}: non-numeric cell {cell:?}", feature_name(i))))?;
            if !v.is_finite() {
                return Err(load_err(path, format!("row {row}, column {}: non-finite cell {cell:?}", feature_name(i))));
            }
            values.push(v);
        }
        let cell = record
            .get(label_col)
            .ok_or_else(|| load_err(path, format!("row {row}: missing cell label")))?;
        let label: usize = cell
            .trim()
            .parse()
            .map_err(|_| load_err(path, format!("row {row}, column label: invalid class id {cell:?}")))?;
        if mode == LabelMode::Constant {
            if let Some(&first) = labels.first() {
                if first != label {
                    return Err(load_err(
                        path,
                        format!("row {row}, column label: {label} differs from declared constant label {first}"),
                    ));
                }
            }
        }
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(load_err(path, "no data rows".to_string()));
    }
    let rows = labels.len();
    let first = labels[0];
    let label = if labels.iter().all(|&l| l == first) {
        SeriesLabel::Constant(first)
    } else {
        SeriesLabel::PerRow(labels)
    };
    let source = path.display().to_string();
    RawSeries::from_parts(values, rows, num_features, label, &source)
}

/// Loads every `*.csv` in a directory, sorted by file name.
pub fn load_dir(dir: &Path, num_features: usize) -> Result<Vec<RawSeries>> {
    if !dir.is_dir() {
        return Err(load_err(dir, "not a directory".to_string()));
    }
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(load_err(dir, "no .csv files".to_string()));
    }
    paths.iter().map(|p| load_csv(p, num_features, LabelMode::Auto)).collect()
}

/// Writes a series in the canonical CSV layout (full float precision).
pub fn write_csv(series: &RawSeries, path: &Path) -> Result<()> {
    let mut out = String::new();
    for i in 0..series.num_features() {
        let _ = write!(out, "{},", feature_name(i));
    }
    out.push_str("label\n");
    for r in 0..series.rows() {
        for v in series.row(r) {
            let _ = write!(out, "{v},");
        }
        let _ = writeln!(out, "{}", series.label_of_row(r));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Per-feature z-score statistics fit on training data only.
///
/// Population (not sample) standard deviation; constant features get their
/// std replaced by 1 and are flagged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub constant_features: Vec<usize>,
}

impl NormStats {
    pub fn num_features(&self) -> usize {
        self.mean.len()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Contract(format!("normalizer serialization: {e}")))?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| load_err(path, format!("cannot read normalizer: {e}")))?;
        let stats: NormStats = toml::from_str(&text).map_err(|e| load_err(path, format!("normalizer parse: {e}")))?;
        if stats.mean.len() != stats.std.len() || stats.std.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
            return Err(load_err(path, "inconsistent normalizer statistics".to_string()));
        }
        Ok(stats)
    }
}

pub fn fit_normalizer(train: &[RawSeries]) -> Result<NormStats> {
    let first = train.first().ok_or_else(|| Error::Contract("fit_normalizer: empty training set".into()))?;
    let f = first.num_features();
    if train.iter().any(|s| s.num_features() != f) {
        return Err(Error::Contract("fit_normalizer: series disagree on feature count".into()));
    }
    let total_rows: usize = train.iter().map(|s| s.rows()).sum();
    let mut mean = vec![0.0; f];
    for s in train {
        for r in 0..s.rows() {
            for (m, &v) in mean.iter_mut().zip(s.row(r)) {
                *m += v;
            }
        }
    }
    for m in &mut mean {
        *m /= total_rows as f64;
    }
    let mut var = vec![0.0; f];
    for s in train {
        for r in 0..s.rows() {
            for ((vv, &v), &m) in var.iter_mut().zip(s.row(r)).zip(&mean) {
                let d = v - m;
                *vv += d * d;
            }
        }
    }
    let mut constant_features = Vec::new();
    let mut std = vec![0.0; f];
    for (i, (sd, vv)) in std.iter_mut().zip(&var).enumerate() {
        let s = (vv / total_rows as f64).sqrt();
        if s == 0.0 {
            constant_features.push(i);
            *sd = 1.0;
        } else {
            *sd = s;
        }
    }
    Ok(NormStats { mean, std, constant_features })
}

fn map_series(series: &RawSeries, stats: &NormStats, f: impl Fn(f64, f64, f64) -> f64) -> Result<RawSeries> {
    if series.num_features() != stats.num_features() {
        return Err(Error::Contract(format!(
            "normalizer fit on {} features, series {} has {}",
            stats.num_features(),
            series.source,
            series.num_features()
        )));
    }
    let nf = series.num_features();
    let values = series
        .values()
        .iter()
        .enumerate()
        .map(|(i, &v)| f(v, stats.mean[i % nf], stats.std[i % nf]))
        .collect();
    RawSeries::from_parts(values, series.rows(), nf, series.label().clone(), &series.source)
}

pub fn apply_normalizer(series: &RawSeries, stats: &NormStats) -> Result<RawSeries> {
    map_series(series, stats, |v, m, s| (v - m) / s)
}

/// Inverse of [`apply_normalizer`].
pub fn unapply_normalizer(series: &RawSeries, stats: &NormStats) -> Result<RawSeries> {
    map_series(series, stats, |v, m, s| v * s + m)
}

/// One training example: a `seq_len x num_features` window and its class.
#[derive(Debug, Clone)]
pub struct Window {
    pub values: Vec<f64>,
    pub label: usize,
    pub seq_len: usize,
    pub num_features: usize,
}

/// Slides a window of `seq_len` rows over the series with the given stride.
pub fn windowize(series: &RawSeries, seq_len: usize, stride: usize) -> Result<Vec<Window>> {
    if seq_len == 0 || stride == 0 {
        return Err(Error::Parameter("windowize: seq_len and stride must be >= 1".into()));
    }
    if series.rows() < seq_len {
        return Err(Error::Contract(format!(
            "series {} has {} rows, shorter than the window length {seq_len}",
            series.source,
            series.rows()
        )));
    }
    let count = (series.rows() - seq_len) / stride + 1;
    let nf = series.num_features();
    let mut out = Vec::with_capacity(count);
    for w in 0..count {
        let start = w * stride;
        let values = series.values()[start * nf..(start + seq_len) * nf].to_vec();
        out.push(Window {
            values,
            label: series.label_of_row(start + seq_len - 1),
            seq_len,
            num_features: nf,
        });
    }
    Ok(out)
}

/// Windows of every series, concatenated in input order.
pub fn windowize_all(series: &[RawSeries], seq_len: usize, stride: usize) -> Result<Vec<Window>> {
    let mut out = Vec::new();
    for s in series {
        out.extend(windowize(s, seq_len, stride)?);
    }
    Ok(out)
}

/// A batch ready for the model: `[B, L, F]` inputs plus class ids.
#[derive(Debug, Clone)]
pub struct SequenceBatch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl SequenceBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Splits windows into batches; order is deterministic under a fixed seed
/// and the final partial batch is kept.
pub fn make_batches<R: Rng>(windows: &[Window], batch_size: usize, shuffle: bool, rng: &mut R) -> Result<Vec<SequenceBatch>> {
    if windows.is_empty() {
        return Err(Error::Contract("make_batches: no windows".into()));
    }
    if batch_size == 0 {
        return Err(Error::Parameter("make_batches: batch_size must be >= 1".into()));
    }
    let (l, f) = (windows[0].seq_len, windows[0].num_features);
    if windows.iter().any(|w| w.seq_len != l || w.num_features != f) {
        return Err(Error::Contract("make_batches: windows disagree on shape".into()));
    }
    let mut order: Vec<usize> = (0..windows.len()).collect();
    if shuffle {
        order.shuffle(rng);
    }
    let mut out = Vec::with_capacity(windows.len().div_ceil(batch_size));
    for chunk in order.chunks(batch_size) {
        let mut values = Vec::with_capacity(chunk.len() * l * f);
        let mut labels = Vec::with_capacity(chunk.len());
        for &i in chunk {
            values.extend_from_slice(&windows[i].values);
            labels.push(windows[i].label);
        }
        out.push(SequenceBatch {
            inputs: Tensor::new(values, &[chunk.len(), l, f])?,
            labels,
        });
    }
    Ok(out)
}
