//! Variable-length sequence datasets: ingestion, min-max normalization,
//! train/test splitting, Gaussian anomaly injection and synthetic generators.
//!
//! A sequence is stored as a `p × d` matrix whose columns are time steps.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::seeded;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: expected {expected} values per time step, found {found}")]
    DimensionMismatch {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: sequence has no time steps")]
    EmptySequence { line: usize },
    #[error("input batch is empty")]
    EmptyInput,
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Sequence label: `+1` is nominal, `-1` anomalous.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "i64")]
pub enum Label {
    Normal,
    Anomalous,
}

impl Label {
    pub fn from_margin(margin: f64) -> Self {
        // sgn(0) = +1
        if margin >= 0.0 {
            Label::Normal
        } else {
            Label::Anomalous
        }
    }

    pub fn sign(self) -> f64 {
        match self {
            Label::Normal => 1.0,
            Label::Anomalous => -1.0,
        }
    }
}

impl TryFrom<i64> for Label {
    type Error = String;

    fn try_from(v: i64) -> std::result::Result<Self, Self::Error> {
        match v {
            1 => Ok(Label::Normal),
            -1 => Ok(Label::Anomalous),
            other => Err(format!("label must be -1 or 1, got {other}")),
        }
    }
}

impl From<Label> for i64 {
    fn from(l: Label) -> i64 {
        match l {
            Label::Normal => 1,
            Label::Anomalous => -1,
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", i64::from(*self))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub id: String,
    /// `p × d`, one column per time step.
    pub values: DMatrix<f64>,
    pub label: Option<Label>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.ncols() == 0
    }
}

/// A collection of sequences sharing the feature dimension `p`.
///
/// An empty batch reports `p = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch {
    p: usize,
    items: Vec<Sequence>,
}

impl SequenceBatch {
    pub fn new(p: usize, items: Vec<Sequence>) -> Result<Self> {
        for (i, s) in items.iter().enumerate() {
            if s.values.nrows() != p {
                return Err(DataError::DimensionMismatch {
                    line: i + 1,
                    expected: p,
                    found: s.values.nrows(),
                });
            }
            if s.values.ncols() == 0 {
                return Err(DataError::EmptySequence { line: i + 1 });
            }
        }
        if items.is_empty() {
            return Ok(Self::empty());
        }
        if p == 0 {
            return Err(DataError::InvalidArgument(
                "feature dimension must be positive".into(),
            ));
        }
        Ok(Self { p, items })
    }

    pub fn empty() -> Self {
        Self {
            p: 0,
            items: Vec::new(),
        }
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[Sequence] {
        &self.items
    }

    pub fn into_items(self) -> Vec<Sequence> {
        self.items
    }

    pub fn labels(&self) -> Vec<Option<Label>> {
        self.items.iter().map(|s| s.label).collect()
    }

    pub fn count_label(&self, label: Label) -> usize {
        self.items.iter().filter(|s| s.label == Some(label)).count()
    }

    /// Observed `(min, max)` sequence length; `None` when empty.
    pub fn length_range(&self) -> Option<(usize, usize)> {
        let lens = self.items.iter().map(Sequence::len);
        let min = lens.clone().min()?;
        let max = lens.max()?;
        Some((min, max))
    }

    fn from_parts(p: usize, items: Vec<Sequence>) -> Self {
        if items.is_empty() {
            Self::empty()
        } else {
            Self { p, items }
        }
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct Record {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    values: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<Label>,
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<SequenceBatch> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_jsonl(BufReader::new(file))
}

/// Parses JSONL records; blank lines are skipped and ids default to the
/// 1-based line number.
pub fn parse_jsonl(reader: impl BufRead) -> Result<SequenceBatch> {
    let mut items = Vec::new();
    let mut p: Option<usize> = None;
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| DataError::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        if rec.values.is_empty() {
            return Err(DataError::EmptySequence { line: lineno });
        }
        let width = rec.values[0].len();
        let expected = *p.get_or_insert(width);
        for row in &rec.values {
            if row.len() != expected {
                return Err(DataError::DimensionMismatch {
                    line: lineno,
                    expected,
                    found: row.len(),
                });
            }
        }
        if expected == 0 {
            return Err(DataError::Parse {
                line: lineno,
                message: "time steps must have at least one value".into(),
            });
        }
        let d = rec.values.len();
        let values = DMatrix::from_fn(expected, d, |k, j| rec.values[j][k]);
        items.push(Sequence {
            id: rec.id.unwrap_or_else(|| lineno.to_string()),
            values,
            label: rec.label,
        });
    }
    Ok(SequenceBatch::from_parts(p.unwrap_or(0), items))
}

pub fn write_jsonl(batch: &SequenceBatch, mut out: impl Write) -> std::io::Result<()> {
    for s in batch.items() {
        let rec = Record {
            id: Some(s.id.clone()),
            values: s
                .values
                .column_iter()
                .map(|c| c.iter().copied().collect())
                .collect(),
            label: s.label,
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Loads a flat CSV with columns `id`, `time`, an optional `label`, and one
/// column per feature (in header order). Rows are grouped by id in order of
/// first appearance and sorted by `time` within each group.
pub fn load_csv(path: impl AsRef<Path>) -> Result<SequenceBatch> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_csv(file)
}

pub fn parse_csv(reader: impl Read) -> Result<SequenceBatch> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| DataError::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let id_col = col("id").ok_or_else(|| DataError::Parse {
        line: 1,
        message: "missing `id` column".into(),
    })?;
    let time_col = col("time").ok_or_else(|| DataError::Parse {
        line: 1,
        message: "missing `time` column".into(),
    })?;
    let label_col = col("label");
    let feature_cols: Vec<usize> = (0..headers.len())
        .filter(|&c| c != id_col && c != time_col && Some(c) != label_col)
        .collect();
    if feature_cols.is_empty() {
        return Err(DataError::Parse {
            line: 1,
            message: "no feature columns".into(),
        });
    }

    struct Group {
        rows: Vec<(f64, Vec<f64>)>,
        label: Option<Label>,
    }
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Group> = HashMap::new();
    for (idx, rec) in rdr.records().enumerate() {
        let lineno = idx + 2;
        let rec = rec.map_err(|e| DataError::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let num = |c: usize| -> Result<f64> {
            let raw = rec.get(c).unwrap_or("").trim();
            raw.parse::<f64>().map_err(|_| DataError::Parse {
                line: lineno,
                message: format!("column `{}`: not a number: {raw:?}", &headers[c]),
            })
        };
        let id = rec.get(id_col).unwrap_or("").trim().to_string();
        let time = num(time_col)?;
        let values = feature_cols.iter().map(|&c| num(c)).collect::<Result<Vec<_>>>()?;
        let label = match label_col.map(|c| rec.get(c).unwrap_or("").trim()) {
            None | Some("") => None,
            Some(raw) => {
                let v: i64 = raw.parse().map_err(|_| DataError::Parse {
                    line: lineno,
                    message: format!("bad label {raw:?}"),
                })?;
                Some(Label::try_from(v).map_err(|message| DataError::Parse {
                    line: lineno,
                    message,
                })?)
            }
        };
        let group = groups.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            Group {
                rows: Vec::new(),
                label,
            }
        });
        if group.label != label {
            return Err(DataError::Parse {
                line: lineno,
                message: format!("inconsistent label for id {id:?}"),
            });
        }
        group.rows.push((time, values));
    }

    let p = feature_cols.len();
    let items = order
        .into_iter()
        .map(|id| {
            let mut g = groups.remove(&id).expect("group recorded in order");
            g.rows.sort_by(|a, b| a.0.total_cmp(&b.0));
            let values = DMatrix::from_fn(p, g.rows.len(), |k, j| g.rows[j].1[k]);
            Sequence {
                id,
                values,
                label: g.label,
            }
        })
        .collect();
    Ok(SequenceBatch::from_parts(p, items))
}

/// Per-dimension extrema used for min-max scaling into `[-1, 1]`.
///
/// A dimension with `min == max` is constant and maps to `0.0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl NormalizationStats {
    pub fn fit(batch: &SequenceBatch) -> Result<Self> {
        if batch.is_empty() {
            return Err(DataError::EmptyInput);
        }
        let p = batch.p();
        let mut min = vec![f64::INFINITY; p];
        let mut max = vec![f64::NEG_INFINITY; p];
        for s in batch.items() {
            for col in s.values.column_iter() {
                for k in 0..p {
                    min[k] = min[k].min(col[k]);
                    max[k] = max[k].max(col[k]);
                }
            }
        }
        Ok(Self { min, max })
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    pub fn is_constant(&self, k: usize) -> bool {
        self.max[k] <= self.min[k]
    }

    /// Affine map into `[-1, 1]` without clamping.
    pub fn scale(&self, k: usize, x: f64) -> f64 {
        if self.is_constant(k) {
            0.0
        } else {
            2.0 * (x - self.min[k]) / (self.max[k] - self.min[k]) - 1.0
        }
    }

    pub fn unscale(&self, k: usize, y: f64) -> f64 {
        if self.is_constant(k) {
            self.min[k]
        } else {
            (y + 1.0) * 0.5 * (self.max[k] - self.min[k]) + self.min[k]
        }
    }

    /// Normalizes a batch with these statistics, clamping into `[-1, 1]`.
    ///
    /// Used for held-out data so that test values outside the training range
    /// stay within the domain the bounded activations were trained on.
    pub fn apply(&self, batch: &SequenceBatch) -> Result<SequenceBatch> {
        if batch.is_empty() {
            return Ok(SequenceBatch::empty());
        }
        if batch.p() != self.dim() {
            return Err(DataError::DimensionMismatch {
                line: 0,
                expected: self.dim(),
                found: batch.p(),
            });
        }
        Ok(self.map(batch, |k, x| self.scale(k, x).clamp(-1.0, 1.0)))
    }

    pub fn invert(&self, batch: &SequenceBatch) -> SequenceBatch {
        self.map(batch, |k, y| self.unscale(k, y))
    }

    fn map(&self, batch: &SequenceBatch, f: impl Fn(usize, f64) -> f64) -> SequenceBatch {
        let items = batch
            .items()
            .iter()
            .map(|s| Sequence {
                id: s.id.clone(),
                values: DMatrix::from_fn(s.values.nrows(), s.values.ncols(), |k, j| {
                    f(k, s.values[(k, j)])
                }),
                label: s.label,
            })
            .collect();
        SequenceBatch::from_parts(batch.p(), items)
    }
}

pub fn fit_and_normalize(batch: &SequenceBatch) -> Result<(SequenceBatch, NormalizationStats)> {
    let stats = NormalizationStats::fit(batch)?;
    let normalized = stats.apply(batch)?;
    Ok((normalized, stats))
}

fn floor_count(n: usize, fraction: f64) -> usize {
    (n as f64 * fraction + 1e-9).floor() as usize
}

/// Splits a labeled batch into train/test parts that each contain
/// `floor(size * anomaly_fraction)` anomalies.
///
/// The split is an exact partition of the input, so the class counts of the
/// batch must match the counts the fractions imply; otherwise an
/// insufficient-data error names the shortfall. Items keep their input order
/// within each part.
pub fn split_train_test(
    batch: &SequenceBatch,
    train_fraction: f64,
    anomaly_fraction: f64,
    seed: u64,
) -> Result<(SequenceBatch, SequenceBatch)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DataError::InvalidArgument(format!(
            "train_fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    if !(0.0..1.0).contains(&anomaly_fraction) {
        return Err(DataError::InvalidArgument(format!(
            "anomaly_fraction must lie in [0, 1), got {anomaly_fraction}"
        )));
    }
    let mut normal = Vec::new();
    let mut anomalous = Vec::new();
    for (i, s) in batch.items().iter().enumerate() {
        match s.label {
            Some(Label::Normal) => normal.push(i),
            Some(Label::Anomalous) => anomalous.push(i),
            None => {
                return Err(DataError::InvalidArgument(format!(
                    "item {:?} has no label; splitting requires labels",
                    s.id
                )))
            }
        }
    }

    let n = batch.len();
    let n_train = (n as f64 * train_fraction).round() as usize;
    let n_test = n - n_train;
    let anom_train = floor_count(n_train, anomaly_fraction);
    let anom_test = floor_count(n_test, anomaly_fraction);
    let norm_train = n_train - anom_train;
    let norm_test = n_test - anom_test;
    if anomalous.len() < anom_train + anom_test || normal.len() < norm_train + norm_test {
        return Err(DataError::InsufficientData(format!(
            "fractions require {} normal and {} anomalous items, batch has {} and {}",
            norm_train + norm_test,
            anom_train + anom_test,
            normal.len(),
            anomalous.len()
        )));
    }

    let mut rng = seeded(seed);
    normal.shuffle(&mut rng);
    anomalous.shuffle(&mut rng);
    let mut train_idx: Vec<usize> = normal[..norm_train]
        .iter()
        .chain(&anomalous[..anom_train])
        .copied()
        .collect();
    let mut test_idx: Vec<usize> = normal[norm_train..]
        .iter()
        .chain(&anomalous[anom_train..])
        .copied()
        .collect();
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    let pick = |idx: &[usize]| {
        SequenceBatch::from_parts(
            batch.p(),
            idx.iter().map(|&i| batch.items()[i].clone()).collect(),
        )
    };
    Ok((pick(&train_idx), pick(&test_idx)))
}

/// Per-dimension mean and population variance over every time step of
/// every sequence.
pub fn sample_moments(batch: &SequenceBatch) -> Result<(Vec<f64>, Vec<f64>)> {
    if batch.is_empty() {
        return Err(DataError::EmptyInput);
    }
    let p = batch.p();
    let mut sum = vec![0.0; p];
    let mut count = 0usize;
    for s in batch.items() {
        for col in s.values.column_iter() {
            for k in 0..p {
                sum[k] += col[k];
            }
            count += 1;
        }
    }
    let mean: Vec<f64> = sum.iter().map(|v| v / count as f64).collect();
    let mut sq = vec![0.0; p];
    for s in batch.items() {
        for col in s.values.column_iter() {
            for k in 0..p {
                let d = col[k] - mean[k];
                sq[k] += d * d;
            }
        }
    }
    let var = sq.iter().map(|v| v / count as f64).collect();
    Ok((mean, var))
}

/// Appends `count` sequences of i.i.d. Gaussian samples with the batch's
/// per-dimension mean and ten times its per-dimension variance.
///
/// Injected lengths are uniform over the batch's observed length range and
/// injected items are labeled anomalous with ids `injected-<k>`.
pub fn inject_gaussian_anomalies(
    batch: &SequenceBatch,
    count: usize,
    seed: u64,
) -> Result<SequenceBatch> {
    const VARIANCE_FACTOR: f64 = 10.0;
    if batch.is_empty() {
        return Err(DataError::EmptyInput);
    }
    if count == 0 {
        return Ok(batch.clone());
    }
    let (mean, var) = sample_moments(batch)?;
    let (d_min, d_max) = batch.length_range().expect("nonempty batch");
    let dists: Vec<Normal<f64>> = mean
        .iter()
        .zip(&var)
        .map(|(&m, &v)| Normal::new(m, (VARIANCE_FACTOR * v).sqrt()).expect("finite moments"))
        .collect();
    let mut rng = seeded(seed);
    let p = batch.p();
    let mut items = batch.items().to_vec();
    for k in 0..count {
        let d = rng.random_range(d_min..=d_max);
        let mut values = DMatrix::zeros(p, d);
        for j in 0..d {
            for (r, dist) in dists.iter().enumerate() {
                values[(r, j)] = dist.sample(&mut rng);
            }
        }
        items.push(Sequence {
            id: format!("injected-{k}"),
            values,
            label: Some(Label::Anomalous),
        });
    }
    Ok(SequenceBatch::from_parts(p, items))
}

/// Stationary first-order autoregressive process applied independently per
/// dimension: `x_t = mean + phi (x_{t-1} - mean) + e_t`, started from its
/// stationary marginal `N(mean, variance)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArProcess {
    pub mean: f64,
    /// Stationary marginal variance.
    pub variance: f64,
    pub phi: f64,
}

impl ArProcess {
    fn validate(&self, which: &str) -> Result<()> {
        if !(self.variance >= 0.0 && self.variance.is_finite()) {
            return Err(DataError::InvalidSpec(format!(
                "{which}.variance must be finite and non-negative"
            )));
        }
        if self.phi.is_nan() || self.phi.abs() >= 1.0 {
            return Err(DataError::InvalidSpec(format!(
                "{which}.phi must satisfy |phi| < 1"
            )));
        }
        if !self.mean.is_finite() {
            return Err(DataError::InvalidSpec(format!("{which}.mean must be finite")));
        }
        Ok(())
    }

    fn sample(&self, p: usize, d: usize, rng: &mut impl Rng) -> DMatrix<f64> {
        let marginal = Normal::new(0.0, self.variance.sqrt()).expect("validated");
        let innovation =
            Normal::new(0.0, (self.variance * (1.0 - self.phi * self.phi)).sqrt()).expect("validated");
        let mut values = DMatrix::zeros(p, d);
        for k in 0..p {
            let mut dev = marginal.sample(rng);
            values[(k, 0)] = self.mean + dev;
            for j in 1..d {
                dev = self.phi * dev + innovation.sample(rng);
                values[(k, j)] = self.mean + dev;
            }
        }
        values
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthProfile {
    pub p: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub normal: ArProcess,
    pub anomalous: ArProcess,
}

impl SynthProfile {
    pub fn validate(&self) -> Result<()> {
        if self.p == 0 {
            return Err(DataError::InvalidSpec("p must be positive".into()));
        }
        if self.min_len == 0 {
            return Err(DataError::InvalidSpec("min_len must be at least 1".into()));
        }
        if self.min_len > self.max_len {
            return Err(DataError::InvalidSpec(format!(
                "min_len {} exceeds max_len {}",
                self.min_len, self.max_len
            )));
        }
        self.normal.validate("normal")?;
        self.anomalous.validate("anomalous")
    }
}

/// Draws `n_normal` nominal then `n_anomalous` anomalous sequences with
/// lengths uniform over the profile's range.
pub fn synth_generate(
    profile: &SynthProfile,
    n_normal: usize,
    n_anomalous: usize,
    seed: u64,
) -> Result<SequenceBatch> {
    profile.validate()?;
    let mut rng = seeded(seed);
    let mut items = Vec::with_capacity(n_normal + n_anomalous);
    for i in 0..n_normal + n_anomalous {
        let (process, label) = if i < n_normal {
            (&profile.normal, Label::Normal)
        } else {
            (&profile.anomalous, Label::Anomalous)
        };
        let d = rng.random_range(profile.min_len..=profile.max_len);
        items.push(Sequence {
            id: format!("synth-{i}"),
            values: process.sample(profile.p, d, &mut rng),
            label: Some(label),
        });
    }
    Ok(SequenceBatch::from_parts(profile.p, items))
}

/// Per-sequence time average, the fixed-length summary used by the
/// mean-feature baseline.
pub fn mean_features(batch: &SequenceBatch) -> Vec<DVector<f64>> {
    batch
        .items()
        .iter()
        .map(|s| s.values.column_mean())
        .collect()
}
