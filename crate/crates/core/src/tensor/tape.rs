//! The recording tape: forward operations and their reverse-mode rules.

use super::{check_shape_data, matmul_acc, matmul_nt_acc, matmul_tn_acc, Tensor};
use crate::{Error, Result};

/// Index of a tensor on its tape. Only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    MulScalar { a: usize, s: usize },
    Exp { a: usize },
    Ln { a: usize },
    Relu { a: usize },
    ClampMax { a: usize, max: f64 },
    LayerNorm { x: usize, gamma: usize, beta: usize, eps: f64 },
    CumsumLast { a: usize },
    SoftmaxLast { a: usize, mask: Option<Vec<bool>> },
    ConcatRows { parts: Vec<usize> },
    ConcatCols { parts: Vec<usize> },
    SliceRows { a: usize, r0: usize },
    SliceCols { a: usize, c0: usize, c1: usize },
    Transpose { a: usize },
    Sum { a: usize },
    Mean { a: usize },
    AddToRows { x: usize, v: usize, rows: Vec<usize> },
    NormalizeRows { a: usize },
    GatherRows { table: usize, ids: Vec<usize> },
    RankBias { w: usize, ranks: Vec<u8> },
    CrossEntropyRows { logits: usize, targets: Vec<usize> },
}

/// Records a forward computation; `backward` replays it in reverse creation
/// order exactly once. One tape serves one forward/backward pass; training
/// builds a fresh tape per step.
pub struct Tape {
    tensors: Vec<Tensor>,
    ops: Vec<Op>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { tensors: Vec::new(), ops: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Registers an input tensor. `requires_grad` marks trainable leaves.
    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Result<TensorId> {
        check_shape_data(&shape, data.len())?;
        Ok(self.push(data, shape, requires_grad, Op::Leaf))
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.tensors[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.tensors[id.0].shape
    }

    /// Value of a single-element tensor.
    pub fn item(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.tensors[id.0].data.len(), 1);
        self.tensors[id.0].data[0]
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.tensors[id.0].grad.as_deref()
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> TensorId {
        let id = self.tensors.len();
        self.tensors.push(Tensor { shape, data, requires_grad, grad: None });
        self.ops.push(op);
        TensorId(id)
    }

    fn push_from(&mut self, parents: &[TensorId], data: Vec<f64>, shape: Vec<usize>, op: Op) -> TensorId {
        let requires_grad = parents.iter().any(|p| self.tensors[p.0].requires_grad);
        self.push(data, shape, requires_grad, op)
    }

    fn dims2(&self, id: TensorId, op: &'static str) -> Result<(usize, usize)> {
        let s = &self.tensors[id.0].shape;
        if s.len() != 2 {
            return Err(Error::Dimension { op, lhs: s.clone(), rhs: vec![] });
        }
        Ok((s[0], s[1]))
    }

    fn last_dim(&self, id: TensorId) -> usize {
        *self.tensors[id.0].shape.last().unwrap_or(&1)
    }

    // ── Forward ops ──────────────────────────────────────────────────

    /// Standard matrix product [m,k] x [k,n] -> [m,n].
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, ka) = self.dims2(a, "matmul")?;
        let (kb, n) = self.dims2(b, "matmul")?;
        if ka != kb {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: self.tensors[a.0].shape.clone(),
                rhs: self.tensors[b.0].shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(&self.tensors[a.0].data, &self.tensors[b.0].data, m, ka, n, &mut out);
        Ok(self.push_from(&[a, b], out, vec![m, n], Op::Matmul { a: a.0, b: b.0, m, k: ka, n }))
    }

    /// Elementwise sum; shapes must match exactly.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape(a, b, "add")?;
        let data: Vec<f64> = self.tensors[a.0]
            .data
            .iter()
            .zip(&self.tensors[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.tensors[a.0].shape.clone();
        Ok(self.push_from(&[a, b], data, shape, Op::Add { a: a.0, b: b.0 }))
    }

    /// Elementwise (Hadamard) product; shapes must match exactly.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape(a, b, "mul")?;
        let data: Vec<f64> = self.tensors[a.0]
            .data
            .iter()
            .zip(&self.tensors[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.tensors[a.0].shape.clone();
        Ok(self.push_from(&[a, b], data, shape, Op::Mul { a: a.0, b: b.0 }))
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let data: Vec<f64> = self.tensors[a.0].data.iter().map(|x| x * c).collect();
        let shape = self.tensors[a.0].shape.clone();
        self.push_from(&[a], data, shape, Op::Scale { a: a.0, c })
    }

    /// Multiply every entry by a single-element tensor (differentiable in both).
    pub fn mul_scalar(&mut self, a: TensorId, s: TensorId) -> Result<TensorId> {
        if self.tensors[s.0].data.len() != 1 {
            return Err(Error::Dimension {
                op: "mul_scalar",
                lhs: self.tensors[a.0].shape.clone(),
                rhs: self.tensors[s.0].shape.clone(),
            });
        }
        let sv = self.tensors[s.0].data[0];
        let data: Vec<f64> = self.tensors[a.0].data.iter().map(|x| x * sv).collect();
        let shape = self.tensors[a.0].shape.clone();
        Ok(self.push_from(&[a, s], data, shape, Op::MulScalar { a: a.0, s: s.0 }))
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f64> = self.tensors[a.0].data.iter().map(|x| x.exp()).collect();
        let shape = self.tensors[a.0].shape.clone();
        self.push_from(&[a], data, shape, Op::Exp { a: a.0 })
    }

    pub fn ln(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f64> = self.tensors[a.0].data.iter().map(|x| x.ln()).collect();
        let shape = self.tensors[a.0].shape.clone();
        self.push_from(&[a], data, shape, Op::Ln { a: a.0 })
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f64> = self.tensors[a.0].data.iter().map(|x| x.max(0.0)).collect();
        let shape = self.tensors[a.0].shape.clone();
        self.push_from(&[a], data, shape, Op::Relu { a: a.0 })
    }

    /// min(x, max); gradient passes where x <= max. NaN stays NaN rather
    /// than being silently replaced by the bound.
    pub fn clamp_max(&mut self, a: TensorId, max: f64) -> TensorId {
        let data: Vec<f64> =
            self.tensors[a.0].data.iter().map(|&x| if x > max { max } else { x }).collect();
        let shape = self.tensors[a.0].shape.clone();
        self.push_from(&[a], data, shape, Op::ClampMax { a: a.0, max })
    }

    /// Layer normalization over the last dimension with affine params.
    /// `gamma` and `beta` are 1-D of the last-dim width.
    pub fn layer_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId, eps: f64) -> Result<TensorId> {
        let d = self.last_dim(x);
        for (p, name) in [(gamma, "layer_norm gamma"), (beta, "layer_norm beta")] {
            if self.tensors[p.0].shape != [d] {
                return Err(Error::Dimension {
                    op: if name.ends_with("gamma") { "layer_norm(gamma)" } else { "layer_norm(beta)" },
                    lhs: self.tensors[x.0].shape.clone(),
                    rhs: self.tensors[p.0].shape.clone(),
                });
            }
        }
        let xd = &self.tensors[x.0].data;
        let g = &self.tensors[gamma.0].data;
        let b = &self.tensors[beta.0].data;
        let rows = xd.len() / d;
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out[r * d + j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        let shape = self.tensors[x.0].shape.clone();
        Ok(self.push_from(&[x, gamma, beta], out, shape, Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, eps }))
    }

    /// Running prefix sum along the last dimension: out[i] == out[i-1] + in[i]
    /// holds bit-exactly by construction.
    pub fn cumsum_lastdim(&mut self, a: TensorId) -> TensorId {
        let d = self.last_dim(a);
        let ad = &self.tensors[a.0].data;
        let mut out = vec![0.0; ad.len()];
        for r in 0..ad.len() / d {
            let mut acc = 0.0;
            for j in 0..d {
                acc += ad[r * d + j];
                out[r * d + j] = acc;
            }
        }
        let shape = self.tensors[a.0].shape.clone();
        self.push_from(&[a], out, shape, Op::CumsumLast { a: a.0 })
    }

    /// Numerically-stabilized softmax over the last dimension. A mask of the
    /// last-dim width excludes entries: masked positions get exactly 0
    /// probability and receive no gradient. Errors if a row has no valid entry.
    pub fn softmax_lastdim(&mut self, a: TensorId, mask: Option<&[bool]>) -> Result<TensorId> {
        let d = self.last_dim(a);
        if let Some(m) = mask {
            if m.len() != d {
                return Err(Error::Dimension {
                    op: "softmax_lastdim(mask)",
                    lhs: self.tensors[a.0].shape.clone(),
                    rhs: vec![m.len()],
                });
            }
            if !m.iter().any(|&v| v) {
                return Err(Error::FullyMasked { op: "softmax_lastdim" });
            }
        }
        let ad = &self.tensors[a.0].data;
        let mut out = vec![0.0; ad.len()];
        for r in 0..ad.len() / d {
            let row = &ad[r * d..(r + 1) * d];
            let mut max = f64::NEG_INFINITY;
            for j in 0..d {
                if mask.map_or(true, |m| m[j]) && row[j] > max {
                    max = row[j];
                }
            }
            let mut denom = 0.0;
            for j in 0..d {
                if mask.map_or(true, |m| m[j]) {
                    let e = (row[j] - max).exp();
                    out[r * d + j] = e;
                    denom += e;
                }
            }
            for j in 0..d {
                if mask.map_or(true, |m| m[j]) {
                    out[r * d + j] /= denom;
                }
            }
        }
        let shape = self.tensors[a.0].shape.clone();
        Ok(self.push_from(&[a], out, shape, Op::SoftmaxLast { a: a.0, mask: mask.map(<[bool]>::to_vec) }))
    }

    /// Stack 2-D blocks vertically; all parts must share a column count.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Contract { op: "concat_rows", message: "no parts".into() });
        }
        let (_, cols) = self.dims2(parts[0], "concat_rows")?;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_rows")?;
            if c != cols {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    lhs: self.tensors[parts[0].0].shape.clone(),
                    rhs: self.tensors[p.0].shape.clone(),
                });
            }
            rows += r;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(&self.tensors[p.0].data);
        }
        Ok(self.push_from(parts, data, vec![rows, cols], Op::ConcatRows { parts: parts.iter().map(|p| p.0).collect() }))
    }

    /// Stack 2-D blocks side by side; all parts must share a row count.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Contract { op: "concat_cols", message: "no parts".into() });
        }
        let (rows, _) = self.dims2(parts[0], "concat_cols")?;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != rows {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: self.tensors[parts[0].0].shape.clone(),
                    rhs: self.tensors[p.0].shape.clone(),
                });
            }
            cols += c;
        }
        let mut data = vec![0.0; rows * cols];
        let mut c0 = 0;
        for &p in parts {
            let (_, c) = self.dims2(p, "concat_cols")?;
            let pd = &self.tensors[p.0].data;
            for r in 0..rows {
                data[r * cols + c0..r * cols + c0 + c].copy_from_slice(&pd[r * c..(r + 1) * c]);
            }
            c0 += c;
        }
        Ok(self.push_from(parts, data, vec![rows, cols], Op::ConcatCols { parts: parts.iter().map(|p| p.0).collect() }))
    }

    /// Rows r0..r1 of a 2-D tensor.
    pub fn slice_rows(&mut self, a: TensorId, r0: usize, r1: usize) -> Result<TensorId> {
        let (rows, cols) = self.dims2(a, "slice_rows")?;
        if r0 > r1 || r1 > rows {
            return Err(Error::Dimension { op: "slice_rows", lhs: vec![rows, cols], rhs: vec![r0, r1] });
        }
        let data = self.tensors[a.0].data[r0 * cols..r1 * cols].to_vec();
        Ok(self.push_from(&[a], data, vec![r1 - r0, cols], Op::SliceRows { a: a.0, r0 }))
    }

    /// Columns c0..c1 of a 2-D tensor.
    pub fn slice_cols(&mut self, a: TensorId, c0: usize, c1: usize) -> Result<TensorId> {
        let (rows, cols) = self.dims2(a, "slice_cols")?;
        if c0 > c1 || c1 > cols {
            return Err(Error::Dimension { op: "slice_cols", lhs: vec![rows, cols], rhs: vec![c0, c1] });
        }
        let w = c1 - c0;
        let ad = &self.tensors[a.0].data;
        let mut data = vec![0.0; rows * w];
        for r in 0..rows {
            data[r * w..(r + 1) * w].copy_from_slice(&ad[r * cols + c0..r * cols + c1]);
        }
        Ok(self.push_from(&[a], data, vec![rows, w], Op::SliceCols { a: a.0, c0, c1 }))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let (rows, cols) = self.dims2(a, "transpose")?;
        let ad = &self.tensors[a.0].data;
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c * rows + r] = ad[r * cols + c];
            }
        }
        Ok(self.push_from(&[a], data, vec![cols, rows], Op::Transpose { a: a.0 }))
    }

    /// Sum of all entries -> [1].
    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.tensors[a.0].data.iter().sum();
        self.push_from(&[a], vec![s], vec![1], Op::Sum { a: a.0 })
    }

    /// Mean of all entries -> [1].
    pub fn mean(&mut self, a: TensorId) -> TensorId {
        let n = self.tensors[a.0].data.len();
        let s: f64 = self.tensors[a.0].data.iter().sum();
        self.push_from(&[a], vec![s / n as f64], vec![1], Op::Mean { a: a.0 })
    }

    /// Adds the 1-D vector `v` to each listed row of the 2-D tensor `x`.
    pub fn add_to_rows(&mut self, x: TensorId, v: TensorId, rows: &[usize]) -> Result<TensorId> {
        let (m, n) = self.dims2(x, "add_to_rows")?;
        if self.tensors[v.0].shape != [n] {
            return Err(Error::Dimension {
                op: "add_to_rows",
                lhs: vec![m, n],
                rhs: self.tensors[v.0].shape.clone(),
            });
        }
        if let Some(&r) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::Dimension { op: "add_to_rows(rows)", lhs: vec![m, n], rhs: vec![r] });
        }
        let mut data = self.tensors[x.0].data.clone();
        let vd = &self.tensors[v.0].data;
        for &r in rows {
            for (o, &vv) in data[r * n..(r + 1) * n].iter_mut().zip(vd) {
                *o += vv;
            }
        }
        Ok(self.push_from(&[x, v], data, vec![m, n], Op::AddToRows { x: x.0, v: v.0, rows: rows.to_vec() }))
    }

    /// L2-normalizes each row of a 2-D tensor.
    pub fn normalize_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = self.dims2(a, "normalize_rows")?;
        let ad = &self.tensors[a.0].data;
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            let row = &ad[r * n..(r + 1) * n];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::NonFinite {
                    context: "normalize_rows".into(),
                    detail: format!("row {r} has norm {norm}"),
                });
            }
            for j in 0..n {
                data[r * n + j] = row[j] / norm;
            }
        }
        Ok(self.push_from(&[a], data, vec![m, n], Op::NormalizeRows { a: a.0 }))
    }

    /// Embedding lookup: out[i] = table[ids[i]]. Gradient scatters back.
    pub fn gather_rows(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let (rows, cols) = self.dims2(table, "gather_rows")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Dimension { op: "gather_rows(ids)", lhs: vec![rows, cols], rhs: vec![bad] });
        }
        let td = &self.tensors[table.0].data;
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            data.extend_from_slice(&td[i * cols..(i + 1) * cols]);
        }
        Ok(self.push_from(&[table], data, vec![ids.len(), cols], Op::GatherRows { table: table.0, ids: ids.to_vec() }))
    }

    /// Builds an [n,n] additive bias from a rank grid and the weight table
    /// `w` (length 8): cells with rank r > 0 receive w[r], rank-0 cells stay
    /// at exactly 0. Differentiable with respect to `w`.
    pub fn rank_bias(&mut self, w: TensorId, ranks: &[u8], n: usize) -> Result<TensorId> {
        if self.tensors[w.0].data.len() != 8 {
            return Err(Error::Dimension {
                op: "rank_bias",
                lhs: self.tensors[w.0].shape.clone(),
                rhs: vec![8],
            });
        }
        if ranks.len() != n * n {
            return Err(Error::Dimension { op: "rank_bias(ranks)", lhs: vec![n, n], rhs: vec![ranks.len()] });
        }
        let wd = &self.tensors[w.0].data;
        let data: Vec<f64> = ranks.iter().map(|&r| if r > 0 { wd[r as usize] } else { 0.0 }).collect();
        Ok(self.push_from(&[w], data, vec![n, n], Op::RankBias { w: w.0, ranks: ranks.to_vec() }))
    }

    /// Mean over rows of the cross-entropy between row softmax and a target
    /// class index per row -> [1].
    pub fn cross_entropy_rows(&mut self, logits: TensorId, targets: &[usize]) -> Result<TensorId> {
        let (m, n) = self.dims2(logits, "cross_entropy_rows")?;
        if targets.len() != m {
            return Err(Error::Dimension { op: "cross_entropy_rows", lhs: vec![m, n], rhs: vec![targets.len()] });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::Dimension { op: "cross_entropy_rows(target)", lhs: vec![m, n], rhs: vec![bad] });
        }
        let ld = &self.tensors[logits.0].data;
        let mut total = 0.0;
        for r in 0..m {
            let row = &ld[r * n..(r + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[targets[r]];
        }
        Ok(self.push_from(
            &[logits],
            vec![total / m as f64],
            vec![1],
            Op::CrossEntropyRows { logits: logits.0, targets: targets.to_vec() },
        ))
    }

    fn check_same_shape(&self, a: TensorId, b: TensorId, op: &'static str) -> Result<()> {
        if self.tensors[a.0].shape != self.tensors[b.0].shape {
            return Err(Error::Dimension {
                op,
                lhs: self.tensors[a.0].shape.clone(),
                rhs: self.tensors[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse pass from a scalar root. Visits nodes in reverse creation
    /// order exactly once, accumulating into `.grad` of every tensor on a
    /// path from a `requires_grad` leaf to the root.
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        if self.tensors[root.0].data.len() != 1 {
            return Err(Error::Contract {
                op: "backward",
                message: format!("root must be scalar, got shape {:?}", self.tensors[root.0].shape),
            });
        }
        for t in &mut self.tensors {
            t.grad = None;
        }
        self.tensors[root.0].grad = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            if self.tensors[i].grad.is_none() || !self.tensors[i].requires_grad {
                continue;
            }
            let grad = self.tensors[i].grad.take().unwrap();
            let op = self.ops[i].clone();
            self.apply_backward(i, &grad, &op);
            self.tensors[i].grad = Some(grad);
        }
        Ok(())
    }

    fn grad_buf(&mut self, idx: usize) -> &mut Vec<f64> {
        let len = self.tensors[idx].data.len();
        self.tensors[idx].grad.get_or_insert_with(|| vec![0.0; len])
    }

    fn accumulate(&mut self, idx: usize, contribution: &[f64]) {
        if !self.tensors[idx].requires_grad {
            return;
        }
        let buf = self.grad_buf(idx);
        for (g, &c) in buf.iter_mut().zip(contribution) {
            *g += c;
        }
    }

    fn apply_backward(&mut self, i: usize, grad: &[f64], op: &Op) {
        match op {
            Op::Leaf => {}

            Op::Matmul { a, b, m, k, n } => {
                if self.tensors[*a].requires_grad {
                    let mut da = vec![0.0; m * k];
                    matmul_nt_acc(grad, &self.tensors[*b].data, *m, *n, *k, &mut da);
                    self.accumulate(*a, &da);
                }
                if self.tensors[*b].requires_grad {
                    let mut db = vec![0.0; k * n];
                    matmul_tn_acc(&self.tensors[*a].data, grad, *m, *k, *n, &mut db);
                    self.accumulate(*b, &db);
                }
            }

            Op::Add { a, b } => {
                self.accumulate(*a, grad);
                self.accumulate(*b, grad);
            }

            Op::Mul { a, b } => {
                if self.tensors[*a].requires_grad {
                    let da: Vec<f64> = grad.iter().zip(&self.tensors[*b].data).map(|(g, v)| g * v).collect();
                    self.accumulate(*a, &da);
                }
                if self.tensors[*b].requires_grad {
                    let db: Vec<f64> = grad.iter().zip(&self.tensors[*a].data).map(|(g, v)| g * v).collect();
                    self.accumulate(*b, &db);
                }
            }

            Op::Scale { a, c } => {
                let da: Vec<f64> = grad.iter().map(|g| g * c).collect();
                self.accumulate(*a, &da);
            }

            Op::MulScalar { a, s } => {
                let sv = self.tensors[*s].data[0];
                if self.tensors[*a].requires_grad {
                    let da: Vec<f64> = grad.iter().map(|g| g * sv).collect();
                    self.accumulate(*a, &da);
                }
                if self.tensors[*s].requires_grad {
                    let ds: f64 = grad.iter().zip(&self.tensors[*a].data).map(|(g, v)| g * v).sum();
                    self.accumulate(*s, &[ds]);
                }
            }

            Op::Exp { a } => {
                let da: Vec<f64> = grad.iter().zip(&self.tensors[i].data).map(|(g, y)| g * y).collect();
                self.accumulate(*a, &da);
            }

            Op::Ln { a } => {
                let da: Vec<f64> = grad.iter().zip(&self.tensors[*a].data).map(|(g, x)| g / x).collect();
                self.accumulate(*a, &da);
            }

            Op::Relu { a } => {
                let da: Vec<f64> = grad
                    .iter()
                    .zip(&self.tensors[*a].data)
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(*a, &da);
            }

            Op::ClampMax { a, max } => {
                let da: Vec<f64> = grad
                    .iter()
                    .zip(&self.tensors[*a].data)
                    .map(|(g, &x)| if x <= *max { *g } else { 0.0 })
                    .collect();
                self.accumulate(*a, &da);
            }

            Op::LayerNorm { x, gamma, beta, eps } => {
                let d = *self.tensors[*x].shape.last().unwrap();
                let xd = &self.tensors[*x].data;
                let gd = &self.tensors[*gamma].data;
                let rows = xd.len() / d;
                let mut dx = vec![0.0; xd.len()];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for r in 0..rows {
                    let row = &xd[r * d..(r + 1) * d];
                    let grow = &grad[r * d..(r + 1) * d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let dxhat: Vec<f64> = grow.iter().zip(gd).map(|(g, gm)| g * gm).collect();
                    let sum_dxhat: f64 = dxhat.iter().sum();
                    let sum_dxhat_xhat: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                    let df = d as f64;
                    for j in 0..d {
                        dgamma[j] += grow[j] * xhat[j];
                        dbeta[j] += grow[j];
                        dx[r * d + j] = inv / df * (df * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                    }
                }
                self.accumulate(*x, &dx);
                self.accumulate(*gamma, &dgamma);
                self.accumulate(*beta, &dbeta);
            }

            Op::CumsumLast { a } => {
                let d = *self.tensors[*a].shape.last().unwrap();
                let mut da = vec![0.0; grad.len()];
                for r in 0..grad.len() / d {
                    let mut acc = 0.0;
                    for j in (0..d).rev() {
                        acc += grad[r * d + j];
                        da[r * d + j] = acc;
                    }
                }
                self.accumulate(*a, &da);
            }

            Op::SoftmaxLast { a, mask } => {
                let d = *self.tensors[i].shape.last().unwrap();
                let out = &self.tensors[i].data;
                let mut da = vec![0.0; grad.len()];
                for r in 0..grad.len() / d {
                    let orow = &out[r * d..(r + 1) * d];
                    let grow = &grad[r * d..(r + 1) * d];
                    let dot: f64 = (0..d)
                        .filter(|&j| mask.as_ref().map_or(true, |m| m[j]))
                        .map(|j| grow[j] * orow[j])
                        .sum();
                    for j in 0..d {
                        if mask.as_ref().map_or(true, |m| m[j]) {
                            da[r * d + j] = orow[j] * (grow[j] - dot);
                        }
                    }
                }
                self.accumulate(*a, &da);
            }

            Op::ConcatRows { parts } => {
                let mut r0 = 0;
                for &p in parts {
                    let len = self.tensors[p].data.len();
                    let slice = grad[r0..r0 + len].to_vec();
                    self.accumulate(p, &slice);
                    r0 += len;
                }
            }

            Op::ConcatCols { parts } => {
                let cols = self.tensors[i].shape[1];
                let rows = self.tensors[i].shape[0];
                let mut c0 = 0;
                for &p in parts {
                    let pc = self.tensors[p].shape[1];
                    let mut dp = vec![0.0; rows * pc];
                    for r in 0..rows {
                        dp[r * pc..(r + 1) * pc].copy_from_slice(&grad[r * cols + c0..r * cols + c0 + pc]);
                    }
                    self.accumulate(p, &dp);
                    c0 += pc;
                }
            }

            Op::SliceRows { a, r0 } => {
                if self.tensors[*a].requires_grad {
                    let cols = self.tensors[*a].shape[1];
                    let len = self.tensors[*a].data.len();
                    let mut da = vec![0.0; len];
                    da[r0 * cols..r0 * cols + grad.len()].copy_from_slice(grad);
                    self.accumulate(*a, &da);
                }
            }

            Op::SliceCols { a, c0, c1 } => {
                if self.tensors[*a].requires_grad {
                    let (rows, cols) = (self.tensors[*a].shape[0], self.tensors[*a].shape[1]);
                    let w = c1 - c0;
                    let mut da = vec![0.0; rows * cols];
                    for r in 0..rows {
                        da[r * cols + c0..r * cols + c1].copy_from_slice(&grad[r * w..(r + 1) * w]);
                    }
                    self.accumulate(*a, &da);
                }
            }

            Op::Transpose { a } => {
                let (rows, cols) = (self.tensors[i].shape[0], self.tensors[i].shape[1]);
                let mut da = vec![0.0; grad.len()];
                for r in 0..rows {
                    for c in 0..cols {
                        da[c * rows + r] = grad[r * cols + c];
                    }
                }
                self.accumulate(*a, &da);
            }

            Op::Sum { a } => {
                let da = vec![grad[0]; self.tensors[*a].data.len()];
                self.accumulate(*a, &da);
            }

            Op::Mean { a } => {
                let n = self.tensors[*a].data.len();
                let da = vec![grad[0] / n as f64; n];
                self.accumulate(*a, &da);
            }

            Op::AddToRows { x, v, rows } => {
                self.accumulate(*x, grad);
                if self.tensors[*v].requires_grad {
                    let n = self.tensors[*v].data.len();
                    let mut dv = vec![0.0; n];
                    for &r in rows {
                        for (d, &g) in dv.iter_mut().zip(&grad[r * n..(r + 1) * n]) {
                            *d += g;
                        }
                    }
                    self.accumulate(*v, &dv);
                }
            }

            Op::NormalizeRows { a } => {
                let (rows, cols) = (self.tensors[i].shape[0], self.tensors[i].shape[1]);
                let xd = &self.tensors[*a].data;
                let yd = &self.tensors[i].data;
                let mut da = vec![0.0; xd.len()];
                for r in 0..rows {
                    let x = &xd[r * cols..(r + 1) * cols];
                    let y = &yd[r * cols..(r + 1) * cols];
                    let g = &grad[r * cols..(r + 1) * cols];
                    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let ydotg: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        da[r * cols + j] = (g[j] - y[j] * ydotg) / norm;
                    }
                }
                self.accumulate(*a, &da);
            }

            Op::GatherRows { table, ids } => {
                if self.tensors[*table].requires_grad {
                    let cols = self.tensors[*table].shape[1];
                    let mut dt = vec![0.0; self.tensors[*table].data.len()];
                    for (r, &id) in ids.iter().enumerate() {
                        for (d, &g) in dt[id * cols..(id + 1) * cols].iter_mut().zip(&grad[r * cols..(r + 1) * cols]) {
                            *d += g;
                        }
                    }
                    self.accumulate(*table, &dt);
                }
            }

            Op::RankBias { w, ranks } => {
                if self.tensors[*w].requires_grad {
                    let mut dw = vec![0.0; 8];
                    for (&r, &g) in ranks.iter().zip(grad) {
                        if r > 0 {
                            dw[r as usize] += g;
                        }
                    }
                    self.accumulate(*w, &dw);
                }
            }

            Op::CrossEntropyRows { logits, targets } => {
                if self.tensors[*logits].requires_grad {
                    let (m, n) = (self.tensors[*logits].shape[0], self.tensors[*logits].shape[1]);
                    let ld = &self.tensors[*logits].data;
                    let g = grad[0] / m as f64;
                    let mut dl = vec![0.0; m * n];
                    for r in 0..m {
                        let row = &ld[r * n..(r + 1) * n];
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let exps: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
                        let denom: f64 = exps.iter().sum();
                        for c in 0..n {
                            let p = exps[c] / denom;
                            dl[r * n + c] = g * (p - if c == targets[r] { 1.0 } else { 0.0 });
                        }
                    }
                    self.accumulate(*logits, &dl);
                }
            }
        }
    }
}
