//! Autocorrelation-based period detection.

use super::RawSeries;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Minimum channel-averaged peak height for a period to count as present.
pub const DEFAULT_PERIOD_THRESHOLD: f64 = 0.1;

/// Sample autocorrelation with population mean and biased denominator:
/// r_k = Σ_{i<L-k} (x_i − x̄)(x_{i+k} − x̄) / Σ_i (x_i − x̄)².
///
/// Returns lags 0..=max_lag; r_0 is exactly 1.
pub fn acf(x: &Tensor, max_lag: usize) -> Result<Tensor> {
    if x.rank() != 1 {
        return Err(Error::ShapeMismatch(format!(
            "acf expects a rank-1 series, got rank {}",
            x.rank()
        )));
    }
    let r = acf_slice(x.data(), max_lag)?;
    Tensor::from_vec(r, &[max_lag + 1])
}

pub(crate) fn acf_slice(x: &[f64], max_lag: usize) -> Result<Vec<f64>> {
    let l = x.len();
    if l < 3 {
        return Err(Error::SeriesTooShort(format!("acf needs L >= 3, got {l}")));
    }
    if max_lag >= l {
        return Err(Error::ConfigInvalid(format!(
            "max_lag {max_lag} must be below series length {l}"
        )));
    }
    let mean = x.iter().sum::<f64>() / l as f64;
    let centered: Vec<f64> = x.iter().map(|&v| v - mean).collect();
    let denom: f64 = centered.iter().map(|&v| v * v).sum();
    if denom / (l as f64) < 1e-20 {
        return Err(Error::ConstantSeries);
    }
    let mut r = Vec::with_capacity(max_lag + 1);
    r.push(1.0);
    for k in 1..=max_lag {
        let num: f64 = centered[..l - k]
            .iter()
            .zip(&centered[k..])
            .map(|(a, b)| a * b)
            .sum();
        r.push(num / denom);
    }
    Ok(r)
}

/// Picks the lag in [min_lag, max_lag] that maximizes the channel-averaged
/// ACF over strict local maxima; ties break toward the smaller lag.
pub fn detect_period(series: &RawSeries, min_lag: usize, max_lag: usize) -> Result<usize> {
    detect_period_with_threshold(series, min_lag, max_lag, DEFAULT_PERIOD_THRESHOLD)
}

pub fn detect_period_with_threshold(
    series: &RawSeries,
    min_lag: usize,
    max_lag: usize,
    threshold: f64,
) -> Result<usize> {
    if min_lag < 2 {
        return Err(Error::ConfigInvalid("min_lag must be >= 2".into()));
    }
    if max_lag < min_lag {
        return Err(Error::ConfigInvalid(format!(
            "max_lag {max_lag} below min_lag {min_lag}"
        )));
    }
    let t = series.len();
    if max_lag >= t {
        return Err(Error::ConfigInvalid(format!(
            "max_lag {max_lag} must be below series length {t}"
        )));
    }
    // one extra lag so max_lag itself can qualify as a local maximum
    let hi = (max_lag + 1).min(t - 1);

    let mut avg = vec![0.0; hi + 1];
    let mut used = 0usize;
    for c in 0..series.n_channels() {
        match acf_slice(series.channel(c), hi) {
            Ok(r) => {
                for (a, v) in avg.iter_mut().zip(&r) {
                    *a += v;
                }
                used += 1;
            }
            Err(Error::ConstantSeries) => continue,
            Err(e) => return Err(e),
        }
    }
    if used == 0 {
        return Err(Error::ConstantSeries);
    }
    for a in avg.iter_mut() {
        *a /= used as f64;
    }

    let mut best: Option<(usize, f64)> = None;
    for k in min_lag..=max_lag {
        if k + 1 > hi {
            break;
        }
        let is_peak = avg[k] > avg[k - 1] && avg[k] > avg[k + 1];
        if !is_peak {
            continue;
        }
        // strictly-greater keeps the smaller lag on ties
        if best.map_or(true, |(_, v)| avg[k] > v) {
            best = Some((k, avg[k]));
        }
    }
    match best {
        Some((k, v)) if v >= threshold => Ok(k),
        Some((_, v)) => Err(Error::NoSignificantPeriod {
            best: v,
            threshold,
        }),
        None => Err(Error::NoSignificantPeriod {
            best: f64::NEG_INFINITY,
            threshold,
        }),
    }
}
