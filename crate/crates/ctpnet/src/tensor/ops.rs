//! Forward tensor operations.
//!
//! Elementwise binary ops broadcast only over leading axes: either both
//! shapes are equal or the shorter operand's shape is a suffix of the
//! longer one (a bias of shape (F,) added to (B, N, F), etc.). Matmul
//! contracts the trailing two axes; a rank-2 operand is broadcast across
//! the other operand's leading axes.

use super::{Op, Tensor};
use crate::error::{fmt_shape, Error, Result};

/// √(2) used by the exact-erf GeLU.
const SQRT_2: f64 = std::f64::consts::SQRT_2;

fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

/// Validates elementwise operand shapes; returns the output shape.
fn ew_out_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b || is_suffix(b, a) {
        Ok(a.to_vec())
    } else if is_suffix(a, b) {
        Ok(b.to_vec())
    } else {
        Err(Error::ShapeMismatch(format!(
            "elementwise operands {} vs {}",
            fmt_shape(a),
            fmt_shape(b)
        )))
    }
}

/// out += a(m,k) · b(k,n)
pub(crate) fn mm_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &aval) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aval * bv;
            }
        }
    }
}

/// out(k,n) += aᵀ(k,m) · g(m,n), with a stored as (m,k)
pub(crate) fn mm_at_g_acc(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &aval) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += aval * gv;
            }
        }
    }
}

/// out(m,k) += g(m,n) · bᵀ(n,k), with b stored as (k,n)
pub(crate) fn mm_g_bt_acc(g: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (p, o) in orow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for (gv, bv) in grow.iter().zip(brow) {
                s += gv * bv;
            }
            *o += s;
        }
    }
}

pub(crate) struct MatMulDims {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub batch: usize,
    pub a_batched: bool,
    pub b_batched: bool,
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(MatMulDims, Vec<usize>)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::RankTooLow(format!(
            "matmul needs rank >= 2 operands, got {} and {}",
            fmt_shape(a),
            fmt_shape(b)
        )));
    }
    let (m, ka) = (a[a.len() - 2], a[a.len() - 1]);
    let (kb, n) = (b[b.len() - 2], b[b.len() - 1]);
    if ka != kb {
        return Err(Error::ShapeMismatch(format!(
            "matmul inner dims: {} vs {}",
            fmt_shape(a),
            fmt_shape(b)
        )));
    }
    let a_lead = &a[..a.len() - 2];
    let b_lead = &b[..b.len() - 2];
    let (lead, a_batched, b_batched) = if a_lead == b_lead {
        (a_lead, !a_lead.is_empty(), !b_lead.is_empty())
    } else if b_lead.is_empty() {
        (a_lead, true, false)
    } else if a_lead.is_empty() {
        (b_lead, false, true)
    } else {
        return Err(Error::ShapeMismatch(format!(
            "matmul leading dims: {} vs {}",
            fmt_shape(a),
            fmt_shape(b)
        )));
    };
    let batch = lead.iter().product::<usize>().max(1);
    let mut out_shape = lead.to_vec();
    out_shape.push(m);
    out_shape.push(n);
    Ok((
        MatMulDims {
            m,
            k: ka,
            n,
            batch,
            a_batched,
            b_batched,
        },
        out_shape,
    ))
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let out_shape = ew_out_shape(self.shape(), other.shape())?;
        let (long, short) = if self.numel() >= other.numel() {
            (self, other)
        } else {
            (other, self)
        };
        let s = short.numel();
        let data = long
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + short.data()[i % s])
            .collect();
        Ok(Tensor::from_op(
            data,
            out_shape,
            Op::Add(self.clone(), other.clone()),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        let out_shape = ew_out_shape(self.shape(), other.shape())?;
        let (an, bn) = (self.numel(), other.numel());
        let out_numel: usize = out_shape.iter().product();
        let (a, b) = (self.data(), other.data());
        let data = (0..out_numel).map(|i| a[i % an] - b[i % bn]).collect();
        Ok(Tensor::from_op(
            data,
            out_shape,
            Op::Sub(self.clone(), other.clone()),
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let out_shape = ew_out_shape(self.shape(), other.shape())?;
        let (an, bn) = (self.numel(), other.numel());
        let out_numel: usize = out_shape.iter().product();
        let (a, b) = (self.data(), other.data());
        let data = (0..out_numel).map(|i| a[i % an] * b[i % bn]).collect();
        Ok(Tensor::from_op(
            data,
            out_shape,
            Op::Mul(self.clone(), other.clone()),
        ))
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|&v| v + c).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::AddScalar(self.clone()))
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|&v| v * c).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::MulScalar(self.clone(), c))
    }

    pub fn neg(&self) -> Tensor {
        self.mul_scalar(-1.0)
    }

    /// Batched matrix product contracting the trailing two axes.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (d, out_shape) = matmul_dims(self.shape(), other.shape())?;
        let mut data = vec![0.0; d.batch * d.m * d.n];
        let (a, b) = (self.data(), other.data());
        for bi in 0..d.batch {
            let ao = if d.a_batched { bi * d.m * d.k } else { 0 };
            let bo = if d.b_batched { bi * d.k * d.n } else { 0 };
            mm_acc(
                &a[ao..ao + d.m * d.k],
                &b[bo..bo + d.k * d.n],
                d.m,
                d.k,
                d.n,
                &mut data[bi * d.m * d.n..(bi + 1) * d.m * d.n],
            );
        }
        Ok(Tensor::from_op(
            data,
            out_shape,
            Op::MatMul(self.clone(), other.clone()),
        ))
    }

    /// Swaps the final two axes.
    pub fn transpose_last_two(&self) -> Result<Tensor> {
        let shape = self.shape();
        if shape.len() < 2 {
            return Err(Error::RankTooLow(format!(
                "transpose_last_two on {}",
                fmt_shape(shape)
            )));
        }
        let (r, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let batch = self.numel() / (r * c);
        let src = self.data();
        let mut data = vec![0.0; self.numel()];
        for bi in 0..batch {
            let base = bi * r * c;
            for i in 0..r {
                for j in 0..c {
                    data[base + j * r + i] = src[base + i * c + j];
                }
            }
        }
        let mut out_shape = shape.to_vec();
        let rank = out_shape.len();
        out_shape.swap(rank - 2, rank - 1);
        Ok(Tensor::from_op(
            data,
            out_shape,
            Op::TransposeLastTwo(self.clone()),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::ShapeMismatch(format!(
                "reshape {} -> {}",
                fmt_shape(self.shape()),
                fmt_shape(shape)
            )));
        }
        Ok(Tensor::from_op(
            self.data().to_vec(),
            shape.to_vec(),
            Op::Reshape(self.clone()),
        ))
    }

    /// Contiguous slice `start..start+len` along `axis`.
    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::ShapeMismatch(format!(
                "slice axis {axis} out of range for {}",
                fmt_shape(shape)
            )));
        }
        if len == 0 || start + len > shape[axis] {
            return Err(Error::ShapeMismatch(format!(
                "slice {start}..{} out of range for axis {axis} of {}",
                start + len,
                fmt_shape(shape)
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let mid = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        let src = self.data();
        for o in 0..outer {
            let base = (o * mid + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        Ok(Tensor::from_op(
            data,
            out_shape,
            Op::SliceAxis {
                input: self.clone(),
                axis,
                start,
            },
        ))
    }

    /// Concatenates tensors that agree on every axis except `axis`.
    pub fn concat_axis(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::ShapeMismatch("concat of zero tensors".into()))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::ShapeMismatch(format!(
                "concat axis {axis} out of range for rank {rank}"
            )));
        }
        let mut total_mid = 0;
        for p in parts {
            if p.rank() != rank
                || p.shape()[..axis] != first.shape()[..axis]
                || p.shape()[axis + 1..] != first.shape()[axis + 1..]
            {
                return Err(Error::ShapeMismatch(format!(
                    "concat operands {} vs {}",
                    fmt_shape(first.shape()),
                    fmt_shape(p.shape())
                )));
            }
            total_mid += p.shape()[axis];
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total_mid * inner);
        for o in 0..outer {
            for p in parts {
                let mid = p.shape()[axis];
                let base = o * mid * inner;
                data.extend_from_slice(&p.data()[base..base + mid * inner]);
            }
        }
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = total_mid;
        Ok(Tensor::from_op(
            data,
            out_shape,
            Op::ConcatAxis {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_last(&self) -> Tensor {
        let d = *self.shape().last().expect("rank >= 1");
        let src = self.data();
        let mut data = vec![0.0; self.numel()];
        for (chunk_out, chunk_in) in data.chunks_mut(d).zip(src.chunks(d)) {
            let max = chunk_in.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, &v) in chunk_out.iter_mut().zip(chunk_in) {
                *o = (v - max).exp();
                sum += *o;
            }
            for o in chunk_out.iter_mut() {
                *o /= sum;
            }
        }
        Tensor::from_op(data, self.shape().to_vec(), Op::SoftmaxLast(self.clone()))
    }

    /// Layer normalization over the last axis with learnable affine.
    pub fn layer_norm_last(&self, scale: &Tensor, shift: &Tensor, eps: f64) -> Result<Tensor> {
        let d = *self.shape().last().expect("rank >= 1");
        if scale.shape() != [d] || shift.shape() != [d] {
            return Err(Error::ShapeMismatch(format!(
                "layer_norm affine {} / {} for feature width {d}",
                fmt_shape(scale.shape()),
                fmt_shape(shift.shape())
            )));
        }
        let src = self.data();
        let (g, b) = (scale.data(), shift.data());
        let mut data = vec![0.0; self.numel()];
        for (chunk_out, chunk_in) in data.chunks_mut(d).zip(src.chunks(d)) {
            let mean = chunk_in.iter().sum::<f64>() / d as f64;
            let var = chunk_in.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for (j, (o, &v)) in chunk_out.iter_mut().zip(chunk_in).enumerate() {
                *o = (v - mean) * inv_std * g[j] + b[j];
            }
        }
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            Op::LayerNormLast {
                input: self.clone(),
                scale: scale.clone(),
                shift: shift.clone(),
                eps,
            },
        ))
    }

    /// Exact-erf GeLU: x · Φ(x).
    pub fn gelu(&self) -> Tensor {
        let data = self.data().iter().map(|&x| x * gauss_cdf(x)).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::Gelu(self.clone()))
    }

    pub fn abs(&self) -> Tensor {
        let data = self.data().iter().map(|&x| x.abs()).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::Abs(self.clone()))
    }

    /// Mean over all elements, as a scalar tensor.
    pub fn mean_all(&self) -> Tensor {
        let m = self.data().iter().sum::<f64>() / self.numel() as f64;
        Tensor::from_op(vec![m], vec![1], Op::MeanAll(self.clone()))
    }

    /// Sum over all elements, as a scalar tensor.
    pub fn sum_all(&self) -> Tensor {
        let s = self.data().iter().sum::<f64>();
        Tensor::from_op(vec![s], vec![1], Op::SumAll(self.clone()))
    }

    /// Gathers columns of a rank-2 `table` into a batch:
    /// out[b, r, j] = table[r, cols[b * seq_len + j]].
    pub fn gather_columns(table: &Tensor, cols: &[usize], seq_len: usize) -> Result<Tensor> {
        if table.rank() != 2 {
            return Err(Error::RankTooLow(format!(
                "gather_columns table must be rank 2, got {}",
                fmt_shape(table.shape())
            )));
        }
        if seq_len == 0 || cols.len() % seq_len != 0 {
            return Err(Error::ShapeMismatch(format!(
                "gather_columns: {} indices do not split into rows of {seq_len}",
                cols.len()
            )));
        }
        let (rows, width) = (table.shape()[0], table.shape()[1]);
        if let Some(&bad) = cols.iter().find(|&&c| c >= width) {
            return Err(Error::ShapeMismatch(format!(
                "gather_columns: column {bad} out of range for width {width}"
            )));
        }
        let batch = cols.len() / seq_len;
        let src = table.data();
        let mut data = Vec::with_capacity(batch * rows * seq_len);
        for b in 0..batch {
            let idx = &cols[b * seq_len..(b + 1) * seq_len];
            for r in 0..rows {
                let row = &src[r * width..(r + 1) * width];
                data.extend(idx.iter().map(|&c| row[c]));
            }
        }
        Ok(Tensor::from_op(
            data,
            vec![batch, rows, seq_len],
            Op::GatherColumns {
                table: table.clone(),
                cols: cols.to_vec(),
                seq_len,
            },
        ))
    }
}

/// Standard normal CDF via the error function.
pub(crate) fn gauss_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2))
}

/// Standard normal density.
pub(crate) fn gauss_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}
