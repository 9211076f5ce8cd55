//! Reverse-mode gradient propagation.

use std::collections::HashSet;

use super::ops::{gauss_cdf, gauss_pdf, matmul_dims, mm_at_g_acc, mm_g_bt_acc};
use super::{Node, Op, Tensor};
use crate::error::{Error, Result};

impl Tensor {
    /// Propagates `d(self)/d(leaf)` into every tracked leaf reachable from
    /// this scalar. Gradients accumulate across calls until cleared.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NotScalar(self.numel()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = topo_order(self);
        self.accumulate_grad(&[1.0]);
        for node in order.iter().rev() {
            let grad = match node.node.grad.lock().expect("grad lock").as_ref() {
                Some(g) => g.clone(),
                None => continue,
            };
            propagate(node, &grad);
        }
        Ok(())
    }
}

/// Iterative post-order DFS over the op graph. Children (parents in the
/// chain-rule sense) appear before their consumers in the returned order.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited: HashSet<*const Node> = HashSet::new();
    // stack entries: (node, parents_pushed)
    let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !visited.insert(t.ptr()) {
            continue;
        }
        stack.push((t.clone(), true));
        for p in parents(&t) {
            if p.requires_grad() && !visited.contains(&p.ptr()) {
                stack.push((p, false));
            }
        }
    }
    order
}

fn parents(t: &Tensor) -> Vec<Tensor> {
    match &t.node.op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => {
            vec![a.clone(), b.clone()]
        }
        Op::AddScalar(a)
        | Op::MulScalar(a, _)
        | Op::TransposeLastTwo(a)
        | Op::Reshape(a)
        | Op::SoftmaxLast(a)
        | Op::Gelu(a)
        | Op::Abs(a)
        | Op::MeanAll(a)
        | Op::SumAll(a) => vec![a.clone()],
        Op::SliceAxis { input, .. } => vec![input.clone()],
        Op::ConcatAxis { parts, .. } => parts.clone(),
        Op::LayerNormLast {
            input,
            scale,
            shift,
            ..
        } => vec![input.clone(), scale.clone(), shift.clone()],
        Op::GatherColumns { table, .. } => vec![table.clone()],
    }
}

/// Sums `grad` over leading replications so it matches an operand that was
/// suffix-broadcast to `grad.len()` elements.
fn reduce_to(grad: &[f64], target_numel: usize) -> Vec<f64> {
    if grad.len() == target_numel {
        return grad.to_vec();
    }
    let mut out = vec![0.0; target_numel];
    for (i, g) in grad.iter().enumerate() {
        out[i % target_numel] += g;
    }
    out
}

fn propagate(t: &Tensor, grad: &[f64]) {
    match &t.node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if a.requires_grad() {
                a.accumulate_grad(&reduce_to(grad, a.numel()));
            }
            if b.requires_grad() {
                b.accumulate_grad(&reduce_to(grad, b.numel()));
            }
        }
        Op::Sub(a, b) => {
            if a.requires_grad() {
                a.accumulate_grad(&reduce_to(grad, a.numel()));
            }
            if b.requires_grad() {
                let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
                b.accumulate_grad(&reduce_to(&neg, b.numel()));
            }
        }
        Op::Mul(a, b) => {
            let (an, bn) = (a.numel(), b.numel());
            if a.requires_grad() {
                let da: Vec<f64> = grad
                    .iter()
                    .enumerate()
                    .map(|(i, g)| g * b.data()[i % bn])
                    .collect();
                a.accumulate_grad(&reduce_to(&da, an));
            }
            if b.requires_grad() {
                let db: Vec<f64> = grad
                    .iter()
                    .enumerate()
                    .map(|(i, g)| g * a.data()[i % an])
                    .collect();
                b.accumulate_grad(&reduce_to(&db, bn));
            }
        }
        Op::AddScalar(a) => {
            if a.requires_grad() {
                a.accumulate_grad(grad);
            }
        }
        Op::MulScalar(a, c) => {
            if a.requires_grad() {
                let da: Vec<f64> = grad.iter().map(|g| g * c).collect();
                a.accumulate_grad(&da);
            }
        }
        Op::MatMul(a, b) => {
            let (d, _) = matmul_dims(a.shape(), b.shape()).expect("validated at forward");
            let (mk, kn, mn) = (d.m * d.k, d.k * d.n, d.m * d.n);
            if a.requires_grad() {
                let mut da = vec![0.0; a.numel()];
                for bi in 0..d.batch {
                    let ao = if d.a_batched { bi * mk } else { 0 };
                    let bo = if d.b_batched { bi * kn } else { 0 };
                    mm_g_bt_acc(
                        &grad[bi * mn..(bi + 1) * mn],
                        &b.data()[bo..bo + kn],
                        d.m,
                        d.k,
                        d.n,
                        &mut da[ao..ao + mk],
                    );
                }
                a.accumulate_grad(&da);
            }
            if b.requires_grad() {
                let mut db = vec![0.0; b.numel()];
                for bi in 0..d.batch {
                    let ao = if d.a_batched { bi * mk } else { 0 };
                    let bo = if d.b_batched { bi * kn } else { 0 };
                    mm_at_g_acc(
                        &a.data()[ao..ao + mk],
                        &grad[bi * mn..(bi + 1) * mn],
                        d.m,
                        d.k,
                        d.n,
                        &mut db[bo..bo + kn],
                    );
                }
                b.accumulate_grad(&db);
            }
        }
        Op::TransposeLastTwo(a) => {
            if a.requires_grad() {
                // output has shape (..., c, r); transpose grad back to (..., r, c)
                let shape = t.shape();
                let (c, r) = (shape[shape.len() - 2], shape[shape.len() - 1]);
                let batch = grad.len() / (r * c);
                let mut da = vec![0.0; grad.len()];
                for bi in 0..batch {
                    let base = bi * r * c;
                    for i in 0..c {
                        for j in 0..r {
                            da[base + j * c + i] = grad[base + i * r + j];
                        }
                    }
                }
                a.accumulate_grad(&da);
            }
        }
        Op::Reshape(a) => {
            if a.requires_grad() {
                a.accumulate_grad(grad);
            }
        }
        Op::SliceAxis { input, axis, start } => {
            if input.requires_grad() {
                let shape = input.shape();
                let outer: usize = shape[..*axis].iter().product();
                let mid = shape[*axis];
                let inner: usize = shape[*axis + 1..].iter().product();
                let len = t.shape()[*axis];
                let mut da = vec![0.0; input.numel()];
                for o in 0..outer {
                    let dst = (o * mid + start) * inner;
                    let src = o * len * inner;
                    da[dst..dst + len * inner].copy_from_slice(&grad[src..src + len * inner]);
                }
                input.accumulate_grad(&da);
            }
        }
        Op::ConcatAxis { parts, axis } => {
            let outer: usize = t.shape()[..*axis].iter().product();
            let inner: usize = t.shape()[*axis + 1..].iter().product();
            let total_mid = t.shape()[*axis];
            let mut offset = 0;
            for p in parts {
                let mid = p.shape()[*axis];
                if p.requires_grad() {
                    let mut dp = vec![0.0; p.numel()];
                    for o in 0..outer {
                        let src = (o * total_mid + offset) * inner;
                        let dst = o * mid * inner;
                        dp[dst..dst + mid * inner]
                            .copy_from_slice(&grad[src..src + mid * inner]);
                    }
                    p.accumulate_grad(&dp);
                }
                offset += mid;
            }
        }
        Op::SoftmaxLast(a) => {
            if a.requires_grad() {
                let d = *t.shape().last().unwrap();
                let s = t.data();
                let mut da = vec![0.0; grad.len()];
                for ((da_c, g_c), s_c) in da.chunks_mut(d).zip(grad.chunks(d)).zip(s.chunks(d)) {
                    let dot: f64 = g_c.iter().zip(s_c).map(|(g, s)| g * s).sum();
                    for ((o, g), s) in da_c.iter_mut().zip(g_c).zip(s_c) {
                        *o = s * (g - dot);
                    }
                }
                a.accumulate_grad(&da);
            }
        }
        Op::LayerNormLast {
            input,
            scale,
            shift,
            eps,
        } => {
            let d = *t.shape().last().unwrap();
            let x = input.data();
            let g = scale.data();
            let n = x.len() / d;
            let mut dx = vec![0.0; x.len()];
            let mut dscale = vec![0.0; d];
            let mut dshift = vec![0.0; d];
            for v in 0..n {
                let xs = &x[v * d..(v + 1) * d];
                let gs = &grad[v * d..(v + 1) * d];
                let mean = xs.iter().sum::<f64>() / d as f64;
                let var = xs.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
                let inv_std = 1.0 / (var + eps).sqrt();
                let xhat: Vec<f64> = xs.iter().map(|&x| (x - mean) * inv_std).collect();
                for j in 0..d {
                    dscale[j] += gs[j] * xhat[j];
                    dshift[j] += gs[j];
                }
                if input.requires_grad() {
                    let dxhat: Vec<f64> = (0..d).map(|j| gs[j] * g[j]).collect();
                    let sum_dxhat: f64 = dxhat.iter().sum();
                    let sum_dxhat_xhat: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                    let df = d as f64;
                    for j in 0..d {
                        dx[v * d + j] =
                            inv_std / df * (df * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                    }
                }
            }
            if input.requires_grad() {
                input.accumulate_grad(&dx);
            }
            if scale.requires_grad() {
                scale.accumulate_grad(&dscale);
            }
            if shift.requires_grad() {
                shift.accumulate_grad(&dshift);
            }
        }
        Op::Gelu(a) => {
            if a.requires_grad() {
                let da: Vec<f64> = grad
                    .iter()
                    .zip(a.data())
                    .map(|(g, &x)| g * (gauss_cdf(x) + x * gauss_pdf(x)))
                    .collect();
                a.accumulate_grad(&da);
            }
        }
        Op::Abs(a) => {
            if a.requires_grad() {
                // subgradient 0 at the kink
                let da: Vec<f64> = grad
                    .iter()
                    .zip(a.data())
                    .map(|(g, &x)| {
                        if x > 0.0 {
                            *g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                a.accumulate_grad(&da);
            }
        }
        Op::MeanAll(a) => {
            if a.requires_grad() {
                let g = grad[0] / a.numel() as f64;
                a.accumulate_grad(&vec![g; a.numel()]);
            }
        }
        Op::SumAll(a) => {
            if a.requires_grad() {
                a.accumulate_grad(&vec![grad[0]; a.numel()]);
            }
        }
        Op::GatherColumns {
            table,
            cols,
            seq_len,
        } => {
            if table.requires_grad() {
                let (rows, width) = (table.shape()[0], table.shape()[1]);
                let batch = cols.len() / seq_len;
                let mut dt = vec![0.0; table.numel()];
                for b in 0..batch {
                    let idx = &cols[b * seq_len..(b + 1) * seq_len];
                    for r in 0..rows {
                        let base = (b * rows + r) * seq_len;
                        for (j, &c) in idx.iter().enumerate() {
                            dt[r * width + c] += grad[base + j];
                        }
                    }
                }
                table.accumulate_grad(&dt);
            }
        }
    }
}
