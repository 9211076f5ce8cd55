//! Deterministic synthetic series for desk-scale experiments and tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::RawSeries;
use crate::tensor::Tensor;

/// Seasonal multichannel series: sin(2πt/period) plus a per-channel offset
/// and optional Gaussian observation noise.
pub fn seasonal_series(
    n_channels: usize,
    len: usize,
    period: f64,
    noise_std: f64,
    seed: u64,
) -> RawSeries {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_std.max(f64::MIN_POSITIVE)).unwrap();
    let tau = 2.0 * std::f64::consts::PI;
    let mut data = Vec::with_capacity(n_channels * len);
    for c in 0..n_channels {
        let offset = c as f64 * 0.5;
        for t in 0..len {
            let mut v = (tau * t as f64 / period).sin() + offset;
            if noise_std > 0.0 {
                v += noise.sample(&mut rng);
            }
            data.push(v);
        }
    }
    let names = (0..n_channels).map(|c| format!("ch{c}")).collect();
    RawSeries::new(
        Tensor::from_vec(data, &[n_channels, len]).expect("finite synthetic data"),
        names,
        0,
    )
    .expect("valid synthetic series")
}

/// Single-channel sum of two sinusoids with different periods.
pub fn two_tone_series(len: usize, period_a: f64, period_b: f64) -> RawSeries {
    let tau = 2.0 * std::f64::consts::PI;
    let data: Vec<f64> = (0..len)
        .map(|t| {
            let t = t as f64;
            (tau * t / period_a).sin() + (tau * t / period_b).sin()
        })
        .collect();
    RawSeries::new(
        Tensor::from_vec(data, &[1, len]).expect("finite synthetic data"),
        vec!["tone".into()],
        0,
    )
    .expect("valid synthetic series")
}

/// Independent standard Gaussian noise per channel.
pub fn white_noise(n_channels: usize, len: usize, seed: u64) -> RawSeries {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, 1.0).unwrap();
    let data: Vec<f64> = (0..n_channels * len).map(|_| dist.sample(&mut rng)).collect();
    let names = (0..n_channels).map(|c| format!("ch{c}")).collect();
    RawSeries::new(
        Tensor::from_vec(data, &[n_channels, len]).expect("finite synthetic data"),
        names,
        0,
    )
    .expect("valid synthetic series")
}
