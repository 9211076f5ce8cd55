//! Data ingestion, normalization, window extraction and the period
//! downsampling transforms.
//!
//! A [`RawSeries`] holds channels × time, channel-major. Dataset-level
//! z-scoring ([`NormStats`]) is fitted on the training segment only and is
//! distinct from the per-window instance normalization inside the model.

pub mod io;
mod period;
pub mod synthetic;

pub use period::{acf, detect_period, detect_period_with_threshold, DEFAULT_PERIOD_THRESHOLD};

use std::path::Path;

use crate::error::{fmt_shape, Error, Result};
use crate::tensor::Tensor;

/// A multivariate series of shape (N_c, T) with integer time indices.
#[derive(Clone)]
pub struct RawSeries {
    values: Tensor,
    channel_names: Vec<String>,
    start_index: usize,
}

impl RawSeries {
    pub fn new(values: Tensor, channel_names: Vec<String>, start_index: usize) -> Result<RawSeries> {
        if values.rank() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "series values must be (channels, time), got {}",
                fmt_shape(values.shape())
            )));
        }
        if values.shape()[0] != channel_names.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} channel names for {} channels",
                channel_names.len(),
                values.shape()[0]
            )));
        }
        if values.shape()[1] < 2 {
            return Err(Error::TooFewRows(values.shape()[1]));
        }
        Ok(RawSeries {
            values,
            channel_names,
            start_index,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], channel_names: Vec<String>) -> Result<RawSeries> {
        let n_c = channel_names.len();
        let t = rows.len();
        let mut data = vec![0.0; n_c * t];
        for (ti, row) in rows.iter().enumerate() {
            if row.len() != n_c {
                return Err(Error::ShapeMismatch(format!(
                    "row {ti} has {} values, expected {n_c}",
                    row.len()
                )));
            }
            for (c, &v) in row.iter().enumerate() {
                data[c * t + ti] = v;
            }
        }
        RawSeries::new(Tensor::from_vec(data, &[n_c, t])?, channel_names, 0)
    }

    pub fn n_channels(&self) -> usize {
        self.values.shape()[0]
    }

    /// Number of time steps (always >= 2 by construction).
    #[allow(clippy::len_without_is_empty)]
    pub fn len(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    pub fn start_index(&self) -> usize {
        self.start_index
    }

    /// One channel's full row.
    pub fn channel(&self, c: usize) -> &[f64] {
        let t = self.len();
        &self.values.data()[c * t..(c + 1) * t]
    }

    /// Chronological sub-series covering `start..start+len` time steps.
    pub fn slice_time(&self, start: usize, len: usize) -> Result<RawSeries> {
        if start + len > self.len() {
            return Err(Error::SeriesTooShort(format!(
                "slice {start}..{} of series with {} steps",
                start + len,
                self.len()
            )));
        }
        let t = self.len();
        let mut data = Vec::with_capacity(self.n_channels() * len);
        for c in 0..self.n_channels() {
            let row = &self.values.data()[c * t..(c + 1) * t];
            data.extend_from_slice(&row[start..start + len]);
        }
        RawSeries::new(
            Tensor::from_vec(data, &[self.n_channels(), len])?,
            self.channel_names.clone(),
            self.start_index + start,
        )
    }
}

/// One training instance: look-back block, target block and the absolute
/// start index `t` consumed by the temporal queries.
#[derive(Clone)]
pub struct WindowSample {
    pub x_in: Tensor,
    pub x_target: Tensor,
    pub t: usize,
}

/// Loads a CSV with a header row into a series; columns become channels.
///
/// `time_column`, when given, names a column excluded from the channels;
/// its values are only sanity-checked for chronological order.
pub fn load_csv(path: impl AsRef<Path>, time_column: Option<&str>) -> Result<RawSeries> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path.as_ref())
        .map_err(|e| Error::ParseError {
            row: 0,
            col: String::new(),
            msg: e.to_string(),
        })?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::ParseError {
            row: 0,
            col: String::new(),
            msg: e.to_string(),
        })?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();

    let time_idx = match time_column {
        Some(name) => Some(headers.iter().position(|h| h == name).ok_or_else(|| {
            Error::ParseError {
                row: 0,
                col: name.to_string(),
                msg: "time column not found in header".into(),
            }
        })?),
        None => None,
    };
    let channel_names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != time_idx)
        .map(|(_, h)| h.clone())
        .collect();
    if channel_names.is_empty() {
        return Err(Error::DataEmpty("no value columns in CSV".into()));
    }

    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); channel_names.len()];
    let mut time_values: Vec<String> = Vec::new();
    for (ri, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::ParseError {
            row: ri + 1,
            col: String::new(),
            msg: e.to_string(),
        })?;
        let mut ci = 0;
        for (fi, field) in record.iter().enumerate() {
            if Some(fi) == time_idx {
                time_values.push(field.to_string());
                continue;
            }
            let col_name = headers.get(fi).cloned().unwrap_or_default();
            let trimmed = field.trim();
            if trimmed.is_empty() {
                return Err(Error::MissingValue {
                    row: ri + 1,
                    col: col_name,
                });
            }
            let v: f64 = trimmed.parse().map_err(|_| Error::ParseError {
                row: ri + 1,
                col: col_name.clone(),
                msg: format!("cannot parse {trimmed:?} as a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::MissingValue {
                    row: ri + 1,
                    col: col_name,
                });
            }
            columns[ci].push(v);
            ci += 1;
        }
        if ci != channel_names.len() {
            return Err(Error::ParseError {
                row: ri + 1,
                col: String::new(),
                msg: format!("expected {} value fields, got {ci}", channel_names.len()),
            });
        }
    }
    let t = columns[0].len();
    if t < 2 {
        return Err(Error::TooFewRows(t));
    }
    check_time_order(&time_values)?;

    let mut data = Vec::with_capacity(channel_names.len() * t);
    for col in &columns {
        data.extend_from_slice(col);
    }
    RawSeries::new(
        Tensor::from_vec(data, &[channel_names.len(), t])?,
        channel_names,
        0,
    )
}

/// Ordering sanity check on the excluded time column. Fixed-width strings
/// (ISO timestamps) compare lexicographically; numeric values numerically.
fn check_time_order(values: &[String]) -> Result<()> {
    if values.len() < 2 {
        return Ok(());
    }
    let numeric: Option<Vec<f64>> = values.iter().map(|v| v.trim().parse().ok()).collect();
    let ordered = match numeric {
        Some(nums) => nums.windows(2).all(|w| w[0] <= w[1]),
        None => {
            let same_len = values.iter().all(|v| v.len() == values[0].len());
            !same_len || values.windows(2).all(|w| w[0] <= w[1])
        }
    };
    if !ordered {
        return Err(Error::ParseError {
            row: 0,
            col: "time".into(),
            msg: "time column is not in chronological order".into(),
        });
    }
    Ok(())
}

/// Per-channel z-scoring statistics fitted on the training segment only.
#[derive(Clone)]
pub struct NormStats {
    pub mean: Tensor,
    pub std: Tensor,
}

/// Fits per-channel mean and population std. Errors on constant channels.
pub fn fit_norm(train: &RawSeries) -> Result<NormStats> {
    let t = train.len() as f64;
    let mut means = Vec::with_capacity(train.n_channels());
    let mut stds = Vec::with_capacity(train.n_channels());
    for c in 0..train.n_channels() {
        let row = train.channel(c);
        let mean = row.iter().sum::<f64>() / t;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / t;
        let std = var.sqrt();
        if std < 1e-12 {
            return Err(Error::DegenerateChannel(train.channel_names()[c].clone()));
        }
        means.push(mean);
        stds.push(std);
    }
    let n_c = train.n_channels();
    Ok(NormStats {
        mean: Tensor::from_vec(means, &[n_c])?,
        std: Tensor::from_vec(stds, &[n_c])?,
    })
}

pub fn apply_norm(stats: &NormStats, series: &RawSeries) -> Result<RawSeries> {
    transform_norm(stats, series, true)
}

pub fn invert_norm(stats: &NormStats, series: &RawSeries) -> Result<RawSeries> {
    transform_norm(stats, series, false)
}

fn transform_norm(stats: &NormStats, series: &RawSeries, forward: bool) -> Result<RawSeries> {
    if stats.mean.numel() != series.n_channels() {
        return Err(Error::ShapeMismatch(format!(
            "stats for {} channels applied to {}",
            stats.mean.numel(),
            series.n_channels()
        )));
    }
    let t = series.len();
    let mut data = Vec::with_capacity(series.n_channels() * t);
    for c in 0..series.n_channels() {
        let (m, s) = (stats.mean.data()[c], stats.std.data()[c]);
        let row = series.channel(c);
        if forward {
            data.extend(row.iter().map(|&v| (v - m) / s));
        } else {
            data.extend(row.iter().map(|&v| v * s + m));
        }
    }
    RawSeries::new(
        Tensor::from_vec(data, &[series.n_channels(), t])?,
        series.channel_names().to_vec(),
        series.start_index(),
    )
}

/// Chronological train/val/test partition.
#[derive(Clone, Debug)]
pub enum SplitSpec {
    Fractions { train: f64, val: f64, test: f64 },
    Rows { train: usize, val: usize, test: usize },
}

impl SplitSpec {
    /// Conventional benchmark splits: fixed row counts for the ETT
    /// datasets, 70/10/20 otherwise.
    pub fn for_dataset(name: &str) -> SplitSpec {
        let lower = name.to_ascii_lowercase();
        if lower.starts_with("etth") {
            SplitSpec::Rows {
                train: 8640,
                val: 2880,
                test: 2880,
            }
        } else if lower.starts_with("ettm") {
            SplitSpec::Rows {
                train: 34560,
                val: 11520,
                test: 11520,
            }
        } else {
            SplitSpec::Fractions {
                train: 0.7,
                val: 0.1,
                test: 0.2,
            }
        }
    }

    /// Splits into non-overlapping chronological segments.
    pub fn split(&self, series: &RawSeries) -> Result<(RawSeries, RawSeries, RawSeries)> {
        let t = series.len();
        let (n_train, n_val, n_test) = match self {
            SplitSpec::Fractions { train, val, test } => {
                if *train <= 0.0 || *val < 0.0 || *test < 0.0 {
                    return Err(Error::ConfigInvalid("split fractions must be positive".into()));
                }
                if (train + val + test - 1.0).abs() > 1e-9 {
                    return Err(Error::ConfigInvalid(format!(
                        "split fractions sum to {}, expected 1",
                        train + val + test
                    )));
                }
                let n_train = (train * t as f64).floor() as usize;
                let n_val = (val * t as f64).floor() as usize;
                (n_train, n_val, t - n_train - n_val)
            }
            SplitSpec::Rows { train, val, test } => (*train, *val, *test),
        };
        if n_train + n_val + n_test > t {
            return Err(Error::SeriesTooShort(format!(
                "split needs {} rows, series has {t}",
                n_train + n_val + n_test
            )));
        }
        Ok((
            series.slice_time(0, n_train)?,
            series.slice_time(n_train, n_val)?,
            series.slice_time(n_train + n_val, n_test)?,
        ))
    }
}

/// Extracts every contiguous (look-back, target) pair at the given stride.
pub fn make_windows(
    series: &RawSeries,
    l_in: usize,
    l_out: usize,
    stride: usize,
) -> Result<Vec<WindowSample>> {
    if l_in == 0 || l_out == 0 || stride == 0 {
        return Err(Error::ConfigInvalid(
            "window sizes and stride must be positive".into(),
        ));
    }
    let t = series.len();
    if t < l_in + l_out {
        return Err(Error::SeriesTooShort(format!(
            "{t} steps cannot fit a {l_in}+{l_out} window"
        )));
    }
    let count = (t - l_in - l_out) / stride + 1;
    let n_c = series.n_channels();
    let mut windows = Vec::with_capacity(count);
    for i in 0..count {
        let start = i * stride;
        let mut x_in = Vec::with_capacity(n_c * l_in);
        let mut x_target = Vec::with_capacity(n_c * l_out);
        for c in 0..n_c {
            let row = series.channel(c);
            x_in.extend_from_slice(&row[start..start + l_in]);
            x_target.extend_from_slice(&row[start + l_in..start + l_in + l_out]);
        }
        windows.push(WindowSample {
            x_in: Tensor::from_vec(x_in, &[n_c, l_in])?,
            x_target: Tensor::from_vec(x_target, &[n_c, l_out])?,
            t: series.start_index() + start,
        });
    }
    Ok(windows)
}

/// Interleaves a length-L trailing axis into P subsequences of length L/P.
/// Subsequence p (0-based) holds the elements at offsets p, p+P, p+2P, ...
pub fn downsample(x: &Tensor, p: usize) -> Result<Tensor> {
    if p == 0 {
        return Err(Error::ConfigInvalid("downsample period must be >= 1".into()));
    }
    let l = *x
        .shape()
        .last()
        .ok_or_else(|| Error::RankTooLow("downsample needs rank >= 1".into()))?;
    if l % p != 0 {
        return Err(Error::IndivisibleLength { len: l, period: p });
    }
    let n = l / p;
    let mut grouped = x.shape().to_vec();
    grouped.pop();
    grouped.push(n);
    grouped.push(p);
    x.reshape(&grouped)?.transpose_last_two()
}

/// Exact inverse of [`downsample`]: recombines (…, P, N) into (…, P·N).
pub fn de_downsample(xs: &Tensor, p: usize) -> Result<Tensor> {
    if xs.rank() < 2 {
        return Err(Error::RankTooLow("de_downsample needs rank >= 2".into()));
    }
    let shape = xs.shape();
    if shape[shape.len() - 2] != p {
        return Err(Error::ShapeMismatch(format!(
            "de_downsample expected {p} subsequences, got {}",
            shape[shape.len() - 2]
        )));
    }
    let n = shape[shape.len() - 1];
    let flat = xs.transpose_last_two()?;
    let mut out_shape = shape[..shape.len() - 2].to_vec();
    out_shape.push(p * n);
    flat.reshape(&out_shape)
}
