//! Daily feature tables, windowed samples, chronological splits and min-max
//! scaling.

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

pub const DATE_FORMAT: &str = "%Y-%m-%d";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing required column `{0}`")]
    MissingColumn(&'static str),
    #[error("no feature columns besides Date and Close")]
    NoFeatures,
    #[error("insufficient data: {what} needs at least {needed} rows, found {got}")]
    Insufficient { what: &'static str, needed: usize, got: usize },
    #[error("closing price must be positive, found {value} at row {index}")]
    NonPositivePrice { index: usize, value: f64 },
    #[error("invalid split fractions: {0}")]
    InvalidSplit(String),
    #[error("scaler used before fit")]
    ScalerNotFitted,
    #[error("feature count mismatch: expected {expected}, found {got}")]
    FeatureMismatch { expected: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Cleaned daily table, sorted by date.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFrame {
    pub dates: Vec<NaiveDate>,
    /// `T×N`.
    pub features: Tensor,
    pub close: Vec<f64>,
    pub feature_names: Vec<String>,
    /// Rows discarded during cleaning.
    pub dropped_rows: usize,
    /// Columns skipped because no cell in them is numeric.
    pub ignored_columns: Vec<String>,
}

impl FeatureFrame {
    pub fn days(&self) -> usize {
        self.dates.len()
    }

    pub fn feature_count(&self) -> usize {
        self.feature_names.len()
    }

    pub fn position(&self, date: NaiveDate) -> Option<usize> {
        self.dates.binary_search(&date).ok()
    }
}

/// One window `X` (`L×N`, rows `t−L..t−1`) with the return realized on day `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Tensor,
    pub target: f64,
    /// Row index of the target day in the frame.
    pub target_index: usize,
    pub target_date: NaiveDate,
}

fn parse_value(cell: &str) -> Option<f64> {
    cell.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

fn find_column(headers: &csv::StringRecord, name: &'static str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim().eq_ignore_ascii_case(name))
        .ok_or(DataError::MissingColumn(name))
}

/// Reads a `Date, Close, features…` table.
///
/// Rows with an unparseable date, a missing or non-numeric cell, a
/// nonpositive close or a repeated date are dropped and counted. Columns with
/// no numeric cell at all (ticker names and the like) are skipped. At least
/// `window + 2` clean rows are required.
pub fn load_feature_csv(path: impl AsRef<Path>, window: usize) -> Result<FeatureFrame> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_feature_csv(file, window)
}

pub fn read_feature_csv(reader: impl std::io::Read, window: usize) -> Result<FeatureFrame> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let date_col = find_column(&headers, "Date")?;
    let close_col = find_column(&headers, "Close")?;
    let records = rdr.records().collect::<std::result::Result<Vec<_>, _>>()?;

    let candidates: Vec<usize> = (0..headers.len()).filter(|&c| c != date_col && c != close_col).collect();
    let (feature_cols, ignored): (Vec<usize>, Vec<usize>) = candidates
        .into_iter()
        .partition(|&c| records.iter().any(|r| r.get(c).and_then(parse_value).is_some()));
    if feature_cols.is_empty() {
        return Err(DataError::NoFeatures);
    }

    let mut rows: Vec<(NaiveDate, f64, Vec<f64>)> = Vec::with_capacity(records.len());
    let mut dropped = 0;
    for record in &records {
        let parsed = (|| {
            let date = NaiveDate::parse_from_str(record.get(date_col)?.trim(), DATE_FORMAT).ok()?;
            let close = record.get(close_col).and_then(parse_value).filter(|&c| c > 0.0)?;
            let values = feature_cols
                .iter()
                .map(|&c| record.get(c).and_then(parse_value))
                .collect::<Option<Vec<_>>>()?;
            Some((date, close, values))
        })();
        match parsed {
            Some(row) => rows.push(row),
            None => dropped += 1,
        }
    }
    rows.sort_by_key(|r| r.0);
    let before = rows.len();
    rows.dedup_by_key(|r| r.0);
    dropped += before - rows.len();

    if rows.len() < window + 2 {
        return Err(DataError::Insufficient {
            what: "feature table",
            needed: window + 2,
            got: rows.len(),
        });
    }
    let n = feature_cols.len();
    let t = rows.len();
    let mut dates = Vec::with_capacity(t);
    let mut close = Vec::with_capacity(t);
    let mut data = Vec::with_capacity(t * n);
    for (d, c, v) in rows {
        dates.push(d);
        close.push(c);
        data.extend(v);
    }
    Ok(FeatureFrame {
        dates,
        features: Tensor::new(vec![t, n], data).expect("row width is fixed"),
        close,
        feature_names: feature_cols.iter().map(|&c| headers[c].trim().to_owned()).collect(),
        dropped_rows: dropped,
        ignored_columns: ignored.iter().map(|&c| headers[c].trim().to_owned()).collect(),
    })
}

/// Writes a frame in the layout accepted by [`load_feature_csv`]; values use
/// the shortest representation that parses back exactly.
pub fn write_feature_csv(frame: &FeatureFrame, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io_err = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["Date".to_owned(), "Close".to_owned()];
    header.extend(frame.feature_names.iter().cloned());
    w.write_record(&header)?;
    for (t, date) in frame.dates.iter().enumerate() {
        let mut row = vec![date.format(DATE_FORMAT).to_string(), frame.close[t].to_string()];
        row.extend(frame.features.row(t).iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush().map_err(io_err)
}

/// `r[t] = (close[t+1] − close[t]) / close[t]`.
pub fn compute_return_targets(close: &[f64]) -> Result<Vec<f64>> {
    if let Some((index, &value)) = close.iter().enumerate().find(|(_, &c)| !(c > 0.0)) {
        return Err(DataError::NonPositivePrice { index, value });
    }
    Ok(close.windows(2).map(|w| (w[1] - w[0]) / w[0]).collect())
}

/// One sample per target day `t ∈ [L, T)`, so `T − L` samples.
pub fn window_dataset(frame: &FeatureFrame, l: usize) -> Result<Vec<Sample>> {
    let t = frame.days();
    if l == 0 || t < l + 1 {
        return Err(DataError::Insufficient {
            what: "windowing",
            needed: l + 1,
            got: t,
        });
    }
    let returns = compute_return_targets(&frame.close)?;
    let n = frame.feature_count();
    let rows = frame.features.data();
    Ok((l..t)
        .map(|target| Sample {
            x: Tensor::new(vec![l, n], rows[(target - l) * n..target * n].to_vec()).expect("window shape"),
            target: returns[target - 1],
            target_index: target,
            target_date: frame.dates[target],
        })
        .collect())
}

/// Fractions of windowed samples assigned to train, validation and test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.05,
            test: 0.15,
        }
    }
}

impl SplitSpec {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let spec = Self { train, val, test };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !(*f >= 0.0) || !f.is_finite()) {
            return Err(DataError::InvalidSplit(format!("fractions must be nonnegative, got {parts:?}")));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(DataError::InvalidSplit(format!("fractions must sum to 1, got {sum}")));
        }
        Ok(())
    }

    /// `(⌊train·n⌋, ⌊val·n⌋, remainder)`.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        // The slack absorbs products like 0.7·10 = 6.999…
        let floor = |f: f64| ((f * n as f64 + 1e-9).floor() as usize).min(n);
        let train = floor(self.train);
        let val = floor(self.val).min(n - train);
        (train, val, n - train - val)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Contiguous prefix / middle / suffix partition, order preserved.
pub fn split_chronological(samples: Vec<Sample>, spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    if samples.is_empty() {
        return Err(DataError::Insufficient {
            what: "splitting",
            needed: 1,
            got: 0,
        });
    }
    let (n_train, n_val, _) = spec.sizes(samples.len());
    let mut train = samples;
    let mut val = train.split_off(n_train);
    let test = val.split_off(n_val);
    Ok(Split { train, val, test })
}

/// Per-feature min-max statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct MinMaxScaler {
    min: Vec<f64>,
    max: Vec<f64>,
    fitted: bool,
}

impl Default for MinMaxScaler {
    fn default() -> Self {
        Self::new()
    }
}

impl MinMaxScaler {
    /// An unfitted scaler.
    pub fn new() -> Self {
        Self {
            min: Vec::new(),
            max: Vec::new(),
            fitted: false,
        }
    }

    /// Restores fitted statistics.
    pub fn from_parts(min: Vec<f64>, max: Vec<f64>) -> Result<Self> {
        if min.len() != max.len() {
            return Err(DataError::FeatureMismatch {
                expected: min.len(),
                got: max.len(),
            });
        }
        Ok(Self { min, max, fitted: true })
    }

    /// Statistics over every row of every training window.
    pub fn fit(samples: &[Sample]) -> Result<Self> {
        let first = samples.first().ok_or(DataError::Insufficient {
            what: "scaler fit",
            needed: 1,
            got: 0,
        })?;
        let n = first.x.shape()[1];
        let mut min = vec![f64::INFINITY; n];
        let mut max = vec![f64::NEG_INFINITY; n];
        for s in samples {
            if s.x.shape()[1] != n {
                return Err(DataError::FeatureMismatch {
                    expected: n,
                    got: s.x.shape()[1],
                });
            }
            for row in s.x.data().chunks_exact(n) {
                for (j, &v) in row.iter().enumerate() {
                    min[j] = min[j].min(v);
                    max[j] = max[j].max(v);
                }
            }
        }
        Ok(Self { min, max, fitted: true })
    }

    pub fn is_fitted(&self) -> bool {
        self.fitted
    }

    pub fn min(&self) -> &[f64] {
        &self.min
    }

    pub fn max(&self) -> &[f64] {
        &self.max
    }

    /// Features whose training range is a single value; they scale to 0.
    pub fn degenerate(&self) -> Vec<bool> {
        self.min.iter().zip(&self.max).map(|(lo, hi)| lo == hi).collect()
    }

    /// `(x − min)/(max − min)` per column, unclamped.
    pub fn transform(&self, x: &Tensor) -> Result<Tensor> {
        if !self.fitted {
            return Err(DataError::ScalerNotFitted);
        }
        let n = self.min.len();
        let got = x.shape().last().copied().unwrap_or(0);
        if got != n {
            return Err(DataError::FeatureMismatch { expected: n, got });
        }
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let j = i % n;
            let range = self.max[j] - self.min[j];
            *v = if range > 0.0 { (*v - self.min[j]) / range } else { 0.0 };
        }
        Ok(out)
    }

    pub fn apply(&self, samples: &[Sample]) -> Result<Vec<Sample>> {
        samples
            .iter()
            .map(|s| {
                Ok(Sample {
                    x: self.transform(&s.x)?,
                    ..s.clone()
                })
            })
            .collect()
    }
}

/// A split whose inputs are min-max scaled with training statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub split: Split,
    pub scaler: MinMaxScaler,
}

/// Windows, splits chronologically, fits the scaler on the training part and
/// scales all three parts with it. Targets stay raw.
pub fn prepare(frame: &FeatureFrame, l: usize, spec: &SplitSpec) -> Result<Prepared> {
    let raw = split_chronological(window_dataset(frame, l)?, spec)?;
    let scaler = MinMaxScaler::fit(&raw.train)?;
    let split = Split {
        train: scaler.apply(&raw.train)?,
        val: scaler.apply(&raw.val)?,
        test: scaler.apply(&raw.test)?,
    };
    Ok(Prepared { split, scaler })
}
