//! Channel-wise representation learning: multi-head attention over
//! channels whose queries come from a learnable temporal-query bank
//! indexed by absolute time modulo its period.

use rand::Rng;

use crate::error::{fmt_shape, Error, Result};
use crate::tensor::{Parameter, Tensor};

/// Weights of the channel-attention stage. The key/value/output
/// projections are square over the look-back axis so the output keeps
/// shape (N_c, L_in); heads split that axis.
pub struct CrlWeights {
    pub theta_tq: Parameter,
    pub w_k1: Parameter,
    pub w_v1: Parameter,
    pub w_o: Parameter,
    pub heads: usize,
}

impl CrlWeights {
    pub fn new<R: Rng>(
        n_channels: usize,
        l_in: usize,
        tq_period: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<CrlWeights> {
        if heads == 0 || l_in % heads != 0 {
            return Err(Error::ConfigInvalid(format!(
                "channel-attention heads {heads} must divide look-back {l_in}"
            )));
        }
        if tq_period == 0 {
            return Err(Error::ConfigInvalid("temporal-query period must be >= 1".into()));
        }
        Ok(CrlWeights {
            theta_tq: Parameter::normal("crl.theta_tq", &[n_channels, tq_period], 0.02, rng),
            w_k1: Parameter::uniform_fan_in("crl.w_k1", &[l_in, l_in], rng),
            w_v1: Parameter::uniform_fan_in("crl.w_v1", &[l_in, l_in], rng),
            w_o: Parameter::uniform_fan_in("crl.w_o", &[l_in, l_in], rng),
            heads,
        })
    }

    pub fn tq_period(&self) -> usize {
        self.theta_tq.shape()[1]
    }

    pub fn params(&self) -> Vec<&Parameter> {
        vec![&self.theta_tq, &self.w_k1, &self.w_v1, &self.w_o]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![
            &mut self.theta_tq,
            &mut self.w_k1,
            &mut self.w_v1,
            &mut self.w_o,
        ]
    }
}

/// Wrap-around query selection: Q[:, j] = θ[:, (t + j) mod W].
pub fn tq_select_query(weights: &CrlWeights, t: usize, l_in: usize) -> Result<Tensor> {
    let n_c = weights.theta_tq.shape()[0];
    let q = tq_gather_batch(weights, &[t], l_in)?;
    q.reshape(&[n_c, l_in])
}

fn tq_gather_batch(weights: &CrlWeights, ts: &[usize], l_in: usize) -> Result<Tensor> {
    let w = weights.tq_period();
    let mut cols = Vec::with_capacity(ts.len() * l_in);
    for &t in ts {
        for j in 0..l_in {
            cols.push((t + j) % w);
        }
    }
    Tensor::gather_columns(weights.theta_tq.value(), &cols, l_in)
}

/// Single-window forward over (N_c, L_in).
pub fn crl_forward(weights: &CrlWeights, x: &Tensor, t: usize) -> Result<Tensor> {
    if x.rank() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "crl_forward expects (channels, look_back), got {}",
            fmt_shape(x.shape())
        )));
    }
    let (n_c, l_in) = (x.shape()[0], x.shape()[1]);
    let batched = x.reshape(&[1, n_c, l_in])?;
    let out = crl_forward_batch(weights, &batched, &[t])?;
    out.reshape(&[n_c, l_in])
}

/// Batched forward over (B, N_c, L_in); each window carries its own
/// absolute start index so query selection stays aligned with time.
pub fn crl_forward_batch(weights: &CrlWeights, x: &Tensor, ts: &[usize]) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "crl_forward_batch expects (batch, channels, look_back), got {}",
            fmt_shape(x.shape())
        )));
    }
    let (b, n_c, l_in) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if ts.len() != b {
        return Err(Error::ShapeMismatch(format!(
            "{} start indices for a batch of {b}",
            ts.len()
        )));
    }
    if weights.theta_tq.shape()[0] != n_c || weights.w_k1.shape()[0] != l_in {
        return Err(Error::ShapeMismatch(format!(
            "crl weights sized for ({}, {}), input is ({n_c}, {l_in})",
            weights.theta_tq.shape()[0],
            weights.w_k1.shape()[0],
        )));
    }

    let q = tq_gather_batch(weights, ts, l_in)?;
    let k = x.matmul(weights.w_k1.value())?;
    let v = x.matmul(weights.w_v1.value())?;

    // scores use the full look-back length in the scaling, not the head width
    let scale = 1.0 / (l_in as f64).sqrt();
    let h = weights.heads;
    let d_h = l_in / h;
    let mut head_outs = Vec::with_capacity(h);
    for hi in 0..h {
        let qh = q.slice_axis(2, hi * d_h, d_h)?;
        let kh = k.slice_axis(2, hi * d_h, d_h)?;
        let vh = v.slice_axis(2, hi * d_h, d_h)?;
        let scores = qh.matmul(&kh.transpose_last_two()?)?.mul_scalar(scale);
        let attn = scores.softmax_last();
        head_outs.push(attn.matmul(&vh)?);
    }
    let concat = Tensor::concat_axis(&head_outs, 2)?;
    concat.matmul(weights.w_o.value())
}
