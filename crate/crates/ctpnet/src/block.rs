//! The shared efficient-attention transformer block, used once over
//! subsequence tokens (TRL) and once over the transposed representation
//! (PRL), plus the linear encoder/decoder that move between subsequence
//! length and the hidden width.

use rand::Rng;

use crate::error::{fmt_shape, Error, Result};
use crate::tensor::{Parameter, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Transformer block weights over feature width F. The FFN hidden width
/// is 2F; attention projections carry no biases.
pub struct BlockWeights {
    pub w_q2: Parameter,
    pub w_k2: Parameter,
    pub w_v2: Parameter,
    pub w_o2: Parameter,
    pub ffn_w1: Parameter,
    pub ffn_b1: Parameter,
    pub ffn_w2: Parameter,
    pub ffn_b2: Parameter,
    pub ln1_scale: Parameter,
    pub ln1_shift: Parameter,
    pub ln2_scale: Parameter,
    pub ln2_shift: Parameter,
    pub heads: usize,
}

impl BlockWeights {
    pub fn new<R: Rng>(prefix: &str, f: usize, heads: usize, rng: &mut R) -> Result<BlockWeights> {
        if heads == 0 || f % heads != 0 {
            return Err(Error::ConfigInvalid(format!(
                "block heads {heads} must divide feature width {f}"
            )));
        }
        let hidden = 2 * f;
        let name = |s: &str| format!("{prefix}.{s}");
        Ok(BlockWeights {
            w_q2: Parameter::uniform_fan_in(name("w_q2"), &[f, f], rng),
            w_k2: Parameter::uniform_fan_in(name("w_k2"), &[f, f], rng),
            w_v2: Parameter::uniform_fan_in(name("w_v2"), &[f, f], rng),
            w_o2: Parameter::uniform_fan_in(name("w_o2"), &[f, f], rng),
            ffn_w1: Parameter::uniform_fan_in(name("ffn_w1"), &[f, hidden], rng),
            ffn_b1: Parameter::zeros(name("ffn_b1"), &[hidden]),
            ffn_w2: Parameter::uniform_fan_in(name("ffn_w2"), &[hidden, f], rng),
            ffn_b2: Parameter::zeros(name("ffn_b2"), &[f]),
            ln1_scale: Parameter::ones(name("ln1_scale"), &[f]),
            ln1_shift: Parameter::zeros(name("ln1_shift"), &[f]),
            ln2_scale: Parameter::ones(name("ln2_scale"), &[f]),
            ln2_shift: Parameter::zeros(name("ln2_shift"), &[f]),
            heads,
        })
    }

    pub fn feature_width(&self) -> usize {
        self.w_q2.shape()[0]
    }

    pub fn params(&self) -> Vec<&Parameter> {
        vec![
            &self.w_q2,
            &self.w_k2,
            &self.w_v2,
            &self.w_o2,
            &self.ffn_w1,
            &self.ffn_b1,
            &self.ffn_w2,
            &self.ffn_b2,
            &self.ln1_scale,
            &self.ln1_shift,
            &self.ln2_scale,
            &self.ln2_shift,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![
            &mut self.w_q2,
            &mut self.w_k2,
            &mut self.w_v2,
            &mut self.w_o2,
            &mut self.ffn_w1,
            &mut self.ffn_b1,
            &mut self.ffn_w2,
            &mut self.ffn_b2,
            &mut self.ln1_scale,
            &mut self.ln1_shift,
            &mut self.ln2_scale,
            &mut self.ln2_shift,
        ]
    }
}

/// Softmax-free attention (q/√d_head) · ((kᵀ/√n_tokens) · v), evaluated
/// right-grouped so cost stays linear in the token count.
pub fn efficient_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    if q.rank() < 2 {
        return Err(Error::RankTooLow("efficient_attention needs rank >= 2".into()));
    }
    if q.shape() != k.shape() || q.shape() != v.shape() {
        return Err(Error::ShapeMismatch(format!(
            "efficient_attention operands {} / {} / {}",
            fmt_shape(q.shape()),
            fmt_shape(k.shape()),
            fmt_shape(v.shape())
        )));
    }
    let d_head = q.shape()[q.rank() - 1];
    let n_tokens = q.shape()[q.rank() - 2];
    let rho_q = q.mul_scalar(1.0 / (d_head as f64).sqrt());
    let rho_kt = k.transpose_last_two()?.mul_scalar(1.0 / (n_tokens as f64).sqrt());
    let context = rho_kt.matmul(v)?;
    rho_q.matmul(&context)
}

/// Full block: multi-head efficient attention with output projection,
/// pre-LayerNorm residual, GeLU feed-forward, post-LayerNorm residual.
pub fn block_forward(weights: &BlockWeights, z: &Tensor) -> Result<Tensor> {
    let f = weights.feature_width();
    if z.rank() < 2 || *z.shape().last().unwrap() != f {
        return Err(Error::ShapeMismatch(format!(
            "block expects trailing feature width {f}, got {}",
            fmt_shape(z.shape())
        )));
    }
    let q = z.matmul(weights.w_q2.value())?;
    let k = z.matmul(weights.w_k2.value())?;
    let v = z.matmul(weights.w_v2.value())?;

    let h = weights.heads;
    let d_h = f / h;
    let axis = z.rank() - 1;
    let mut head_outs = Vec::with_capacity(h);
    for hi in 0..h {
        let qh = q.slice_axis(axis, hi * d_h, d_h)?;
        let kh = k.slice_axis(axis, hi * d_h, d_h)?;
        let vh = v.slice_axis(axis, hi * d_h, d_h)?;
        head_outs.push(efficient_attention(&qh, &kh, &vh)?);
    }
    let e_mha = Tensor::concat_axis(&head_outs, axis)?.matmul(weights.w_o2.value())?;

    let i_mid = z.add(&e_mha)?.layer_norm_last(
        weights.ln1_scale.value(),
        weights.ln1_shift.value(),
        LAYER_NORM_EPS,
    )?;
    let hidden = i_mid
        .matmul(weights.ffn_w1.value())?
        .add(weights.ffn_b1.value())?
        .gelu();
    let ffn = hidden
        .matmul(weights.ffn_w2.value())?
        .add(weights.ffn_b2.value())?;
    i_mid.add(&ffn)?.layer_norm_last(
        weights.ln2_scale.value(),
        weights.ln2_shift.value(),
        LAYER_NORM_EPS,
    )
}

/// Intra-subsequence stage: tokens along the subsequence axis, features
/// along the hidden width. Identical code path to [`block_forward`].
pub fn trl_forward(weights: &BlockWeights, z: &Tensor) -> Result<Tensor> {
    block_forward(weights, z)
}

/// Inter-subsequence stage: transposes so the subsequence axis becomes the
/// feature axis, applies the block (F = P), and transposes back.
pub fn prl_forward(weights: &BlockWeights, u: &Tensor) -> Result<Tensor> {
    let flipped = u.transpose_last_two()?;
    let out = block_forward(weights, &flipped)?;
    out.transpose_last_two()
}

/// Affine map over the last axis, shared across all leading positions.
pub struct AffineWeights {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl AffineWeights {
    pub fn new<R: Rng>(prefix: &str, d_in: usize, d_out: usize, rng: &mut R) -> AffineWeights {
        AffineWeights {
            weight: Parameter::uniform_fan_in(format!("{prefix}.weight"), &[d_in, d_out], rng),
            bias: Parameter::zeros(format!("{prefix}.bias"), &[d_out]),
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(self.weight.value())?.add(self.bias.value())
    }

    pub fn params(&self) -> Vec<&Parameter> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Maps (…, P, N_pin) subsequences into the hidden width D.
pub fn encode(weights: &AffineWeights, x_ds: &Tensor) -> Result<Tensor> {
    weights.apply(x_ds)
}

/// Maps (…, P, D) representations onto the prediction horizon N_pout.
pub fn decode(weights: &AffineWeights, i3: &Tensor) -> Result<Tensor> {
    weights.apply(i3)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed.wrapping_mul(0x9e3779b97f4a7c15) | 1;
        (0..n)
            .map(|_| {
                s ^= s << 13;
                s ^= s >> 7;
                s ^= s << 17;
                (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
            })
            .collect()
    }

    fn block(f: usize, heads: usize, seed: u64) -> BlockWeights {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        BlockWeights::new("blk", f, heads, &mut rng).unwrap()
    }

    #[test]
    fn efficient_attention_scalar_case() {
        let q = Tensor::from_vec(vec![2.0], &[1, 1]).unwrap();
        let k = Tensor::from_vec(vec![3.0], &[1, 1]).unwrap();
        let v = Tensor::from_vec(vec![4.0], &[1, 1]).unwrap();
        let out = efficient_attention(&q, &k, &v).unwrap();
        assert_eq!(out.data(), &[24.0]);
    }

    #[test]
    fn efficient_attention_annihilates_zero_values() {
        let q = Tensor::from_vec(rand_vec(12, 1), &[3, 4]).unwrap();
        let k = Tensor::from_vec(rand_vec(12, 2), &[3, 4]).unwrap();
        let v = Tensor::zeros(&[3, 4]);
        let out = efficient_attention(&q, &k, &v).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn efficient_attention_associativity() {
        // left-grouped (ρQ · ρKᵀ) · V against the right-grouped implementation
        for seed in 0..20u64 {
            let n = 6;
            let d = 4;
            let q = Tensor::from_vec(rand_vec(n * d, 10 + seed), &[n, d]).unwrap();
            let k = Tensor::from_vec(rand_vec(n * d, 40 + seed), &[n, d]).unwrap();
            let v = Tensor::from_vec(rand_vec(n * d, 70 + seed), &[n, d]).unwrap();
            let right = efficient_attention(&q, &k, &v).unwrap();
            let rho_q = q.mul_scalar(1.0 / (d as f64).sqrt());
            let rho_kt = k
                .transpose_last_two()
                .unwrap()
                .mul_scalar(1.0 / (n as f64).sqrt());
            let left = rho_q.matmul(&rho_kt).unwrap().matmul(&v).unwrap();
            for (a, b) in right.data().iter().zip(left.data()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn block_preserves_shape() {
        let w = block(16, 4, 0);
        let z = Tensor::from_vec(rand_vec(7 * 24 * 16, 1), &[7, 24, 16]).unwrap();
        let out = block_forward(&w, &z).unwrap();
        assert_eq!(out.shape(), &[7, 24, 16]);
    }

    #[test]
    fn degenerate_weights_reduce_to_stacked_layer_norms() {
        let mut w = block(4, 2, 2);
        let f = 4;
        w.w_o2.set_data(vec![0.0; f * f]).unwrap();
        w.ffn_w1.set_data(vec![0.0; f * 2 * f]).unwrap();
        w.ffn_w2.set_data(vec![0.0; 2 * f * f]).unwrap();
        let z = Tensor::from_vec(rand_vec(2 * 3 * f, 3), &[2, 3, f]).unwrap();
        let out = block_forward(&w, &z).unwrap();

        let ones = Tensor::from_vec(vec![1.0; f], &[f]).unwrap();
        let zeros = Tensor::zeros(&[f]);
        let expect = z
            .layer_norm_last(&ones, &zeros, LAYER_NORM_EPS)
            .unwrap()
            .layer_norm_last(&ones, &zeros, LAYER_NORM_EPS)
            .unwrap();
        for (a, b) in out.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    /// Straight-line oracle for the whole block on a (n, f) input,
    /// spelled out with plain loops.
    fn block_oracle(w: &BlockWeights, z: &[f64], n: usize, f: usize) -> Vec<f64> {
        let mm = |a: &[f64], b: &[f64], m: usize, k: usize, nn: usize| {
            let mut out = vec![0.0; m * nn];
            for i in 0..m {
                for j in 0..nn {
                    for p in 0..k {
                        out[i * nn + j] += a[i * k + p] * b[p * nn + j];
                    }
                }
            }
            out
        };
        let q = mm(z, w.w_q2.value().data(), n, f, f);
        let k = mm(z, w.w_k2.value().data(), n, f, f);
        let v = mm(z, w.w_v2.value().data(), n, f, f);
        let h = w.heads;
        let d_h = f / h;
        let mut concat = vec![0.0; n * f];
        for hi in 0..h {
            // gather the head slice
            let pick = |src: &[f64]| {
                let mut out = vec![0.0; n * d_h];
                for i in 0..n {
                    for j in 0..d_h {
                        out[i * d_h + j] = src[i * f + hi * d_h + j];
                    }
                }
                out
            };
            let (qh, kh, vh) = (pick(&q), pick(&k), pick(&v));
            // ρ(Q) (d_h wide) and ρ(Kᵀ) (n wide)
            let sq = 1.0 / (d_h as f64).sqrt();
            let sk = 1.0 / (n as f64).sqrt();
            // ctx = (Kᵀ/√n) · V : (d_h, d_h)
            let mut ctx = vec![0.0; d_h * d_h];
            for a in 0..d_h {
                for b in 0..d_h {
                    for i in 0..n {
                        ctx[a * d_h + b] += kh[i * d_h + a] * sk * vh[i * d_h + b];
                    }
                }
            }
            for i in 0..n {
                for b in 0..d_h {
                    let mut acc = 0.0;
                    for a in 0..d_h {
                        acc += qh[i * d_h + a] * sq * ctx[a * d_h + b];
                    }
                    concat[i * f + hi * d_h + b] = acc;
                }
            }
        }
        let e_mha = mm(&concat, w.w_o2.value().data(), n, f, f);
        let ln = |x: &[f64], scale: &[f64], shift: &[f64]| {
            let mut out = vec![0.0; x.len()];
            for i in 0..n {
                let row = &x[i * f..(i + 1) * f];
                let mean = row.iter().sum::<f64>() / f as f64;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / f as f64;
                let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                for j in 0..f {
                    out[i * f + j] = (row[j] - mean) * inv * scale[j] + shift[j];
                }
            }
            out
        };
        let sum1: Vec<f64> = z.iter().zip(&e_mha).map(|(a, b)| a + b).collect();
        let i_mid = ln(&sum1, w.ln1_scale.value().data(), w.ln1_shift.value().data());
        let hidden_w = 2 * f;
        let mut hidden = mm(&i_mid, w.ffn_w1.value().data(), n, f, hidden_w);
        for i in 0..n {
            for j in 0..hidden_w {
                let x = hidden[i * hidden_w + j] + w.ffn_b1.value().data()[j];
                hidden[i * hidden_w + j] = x * 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
            }
        }
        let mut ffn = mm(&hidden, w.ffn_w2.value().data(), n, hidden_w, f);
        for i in 0..n {
            for j in 0..f {
                ffn[i * f + j] += w.ffn_b2.value().data()[j];
            }
        }
        let sum2: Vec<f64> = i_mid.iter().zip(&ffn).map(|(a, b)| a + b).collect();
        ln(&sum2, w.ln2_scale.value().data(), w.ln2_shift.value().data())
    }

    #[test]
    fn matches_straight_line_oracle() {
        for seed in 0..5u64 {
            let f = 4;
            let n = 2;
            let mut w = block(f, 2, 50 + seed);
            // non-trivial LN affine and FFN biases
            w.ln1_scale.set_data(rand_vec(f, 90 + seed).iter().map(|v| 1.0 + v).collect()).unwrap();
            w.ln1_shift.set_data(rand_vec(f, 91 + seed)).unwrap();
            w.ffn_b1.set_data(rand_vec(2 * f, 92 + seed)).unwrap();
            w.ffn_b2.set_data(rand_vec(f, 93 + seed)).unwrap();
            let z_data = rand_vec(n * f, 94 + seed);
            let z = Tensor::from_vec(z_data.clone(), &[n, f]).unwrap();
            let out = block_forward(&w, &z).unwrap();
            let expect = block_oracle(&w, &z_data, n, f);
            for (a, b) in out.data().iter().zip(&expect) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn oracle_covers_both_orientations() {
        // the same block logic drives tokens=P features=D and the transposed
        // orientation; exercise the oracle on both aspect ratios
        for (n, f) in [(6usize, 2usize), (2, 6)] {
            let w = block(f, 2, 77);
            let z_data = rand_vec(n * f, 78);
            let z = Tensor::from_vec(z_data.clone(), &[n, f]).unwrap();
            let out = block_forward(&w, &z).unwrap();
            let expect = block_oracle(&w, &z_data, n, f);
            for (a, b) in out.data().iter().zip(&expect) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn trl_is_block_forward() {
        let w = block(8, 2, 4);
        let z = Tensor::from_vec(rand_vec(14 * 3 * 8, 5), &[14, 3, 8]).unwrap();
        let a = trl_forward(&w, &z).unwrap();
        let b = block_forward(&w, &z).unwrap();
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn trl_single_token_stays_finite() {
        let w = block(8, 2, 6);
        let z = Tensor::from_vec(rand_vec(24, 7), &[3, 1, 8]).unwrap();
        let out = trl_forward(&w, &z).unwrap();
        assert_eq!(out.shape(), &[3, 1, 8]);
        assert!(out.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn prl_round_trips_shape_and_matches_transposed_oracle() {
        // PRL block width is the subsequence count, independent of D
        let p = 3;
        let d = 6;
        let w = block(p, 3, 8);
        assert_eq!(w.feature_width(), p);
        let u_data = rand_vec(p * d, 9);
        let u = Tensor::from_vec(u_data.clone(), &[p, d]).unwrap();
        let out = prl_forward(&w, &u).unwrap();
        assert_eq!(out.shape(), &[p, d]);

        // oracle: transpose -> block equations -> transpose
        let mut flipped = vec![0.0; p * d];
        for i in 0..p {
            for j in 0..d {
                flipped[j * p + i] = u_data[i * d + j];
            }
        }
        let blocked = block_oracle(&w, &flipped, d, p);
        for i in 0..p {
            for j in 0..d {
                let expect = blocked[j * p + i];
                assert!((out.data()[i * d + j] - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn block_is_token_permutation_equivariant() {
        let f = 4;
        let w = block(f, 2, 10);
        let n = 5;
        let z_data = rand_vec(n * f, 11);
        let z = Tensor::from_vec(z_data.clone(), &[n, f]).unwrap();
        let out = block_forward(&w, &z).unwrap();
        let perm = [3usize, 0, 4, 1, 2];
        let mut zp = vec![0.0; n * f];
        for (new_i, &old_i) in perm.iter().enumerate() {
            zp[new_i * f..(new_i + 1) * f].copy_from_slice(&z_data[old_i * f..(old_i + 1) * f]);
        }
        let out_p = block_forward(&w, &Tensor::from_vec(zp, &[n, f]).unwrap()).unwrap();
        for (new_i, &old_i) in perm.iter().enumerate() {
            for j in 0..f {
                let a = out_p.data()[new_i * f + j];
                let b = out.data()[old_i * f + j];
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn encode_identity_and_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut enc = AffineWeights::new("encoder", 2, 2, &mut rng);
        enc.weight.set_data(vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let x = Tensor::from_vec(rand_vec(6 * 2, 13), &[6, 2]).unwrap();
        let out = encode(&enc, &x).unwrap();
        for (a, b) in out.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-15);
        }

        let enc = AffineWeights::new("encoder", 4, 16, &mut rng);
        let x = Tensor::from_vec(rand_vec(7 * 24 * 4, 14), &[7, 24, 4]).unwrap();
        assert_eq!(encode(&enc, &x).unwrap().shape(), &[7, 24, 16]);
    }

    #[test]
    fn encode_commutes_with_subsequence_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let enc = AffineWeights::new("encoder", 3, 5, &mut rng);
        let p = 4;
        let x_data = rand_vec(p * 3, 16);
        let x = Tensor::from_vec(x_data.clone(), &[p, 3]).unwrap();
        let out = encode(&enc, &x).unwrap();
        let perm = [2usize, 3, 0, 1];
        let mut xp = vec![0.0; p * 3];
        for (new_i, &old_i) in perm.iter().enumerate() {
            xp[new_i * 3..(new_i + 1) * 3].copy_from_slice(&x_data[old_i * 3..(old_i + 1) * 3]);
        }
        let out_p = encode(&enc, &Tensor::from_vec(xp, &[p, 3]).unwrap()).unwrap();
        for (new_i, &old_i) in perm.iter().enumerate() {
            for j in 0..5 {
                assert_eq!(out_p.data()[new_i * 5 + j], out.data()[old_i * 5 + j]);
            }
        }
    }

    #[test]
    fn block_gradients_pass_finite_differences() {
        let f = 4;
        let n = 3;
        let w = block(f, 2, 20);
        let z = Tensor::from_vec(rand_vec(n * f, 21), &[n, f]).unwrap();
        let target = Tensor::from_vec(rand_vec(n * f, 22), &[n, f]).unwrap();

        let loss_of = |w: &BlockWeights| {
            let out = block_forward(w, &z).unwrap();
            out.sub(&target).unwrap().abs().mean_all()
        };
        loss_of(&w).backward().unwrap();

        let h = 1e-5;
        let n_params = w.params().len();
        for pi in 0..n_params {
            let base = w.params()[pi].value().data().to_vec();
            let ag = w.params()[pi].grad_or_zeros();
            let name = w.params()[pi].name().to_string();
            for i in (0..base.len()).step_by(5) {
                let mut w2 = block(f, 2, 20);
                let mut plus = base.clone();
                plus[i] += h;
                w2.params_mut()[pi].set_data(plus).unwrap();
                let lp = loss_of(&w2).item();
                let mut minus = base.clone();
                minus[i] -= h;
                w2.params_mut()[pi].set_data(minus).unwrap();
                let lm = loss_of(&w2).item();
                let fd = (lp - lm) / (2.0 * h);
                let denom = ag[i].abs().max(fd.abs()).max(1e-6);
                assert!(
                    (ag[i] - fd).abs() / denom < 1e-4,
                    "{name} elem {i}: {} vs {fd}",
                    ag[i]
                );
            }
        }
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(BlockWeights::new("b", 6, 4, &mut rng).is_err());
    }
}
