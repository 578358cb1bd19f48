//! Tape of recorded operations and their backward rules.
//!
//! Nodes are appended in creation order, so the node index is a valid
//! topological order: every input of a node has a smaller index. Backward
//! walks the tape once from the loss down to index 0.

use std::collections::HashMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One contribution `weight * sources[src].row(row)` to an output row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RowPick {
    pub src: usize,
    pub row: usize,
    pub weight: f64,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    ScaleRows(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Relu(Var),
    ClampMin(Var, f64),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    SumRows(Var),
    RowDot(Var, Var),
    Concat(Vec<Var>),
    SliceCols(Var, usize, usize),
    Reshape(Var),
    MaskedSoftmax(Var, Vec<bool>),
    WeightedSteps(Vec<Var>, Var),
    CombineRows(Vec<Var>, Vec<Vec<RowPick>>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode autodiff tape.
///
/// Gradients accumulate: calling [`Graph::backward`] twice on the same loss
/// doubles every stored gradient until [`Graph::zero_grad`] is called.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<(u64, usize), Var>,
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

/// `a[m,k] * b[k,n]`.
pub(crate) fn matmul_raw(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `g[m,n] * b[k,n]^T`.
fn matmul_a_bt(g: &[f64], m: usize, n: usize, b: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a[m,k]^T * g[m,n]`.
fn matmul_at_b(a: &[f64], m: usize, k: usize, g: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: &[f64]) {
    match slot {
        Some(acc) => {
            for (a, d) in acc.iter_mut().zip(delta) {
                *a += d;
            }
        }
        None => *slot = Some(delta.to_vec()),
    }
}

fn accumulate_owned(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match slot {
        Some(acc) => {
            for (a, d) in acc.iter_mut().zip(&delta) {
                *a += d;
            }
        }
        None => *slot = Some(delta),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of `v`, present only after a backward pass that
    /// reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads
            .get(v.0)
            .and_then(|g| g.as_ref())
            .map(|g| Tensor::from_parts(self.nodes[v.0].value.shape().to_vec(), g.clone()))
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives gradients.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub(crate) fn cached_param(&self, key: (u64, usize)) -> Option<Var> {
        self.params.get(&key).copied()
    }

    pub(crate) fn set_param(&mut self, key: (u64, usize), v: Var) {
        self.params.insert(key, v);
    }

    pub(crate) fn insert_param(&mut self, key: (u64, usize), t: Tensor, trainable: bool) -> Var {
        let v = if trainable {
            self.variable(t)
        } else {
            self.constant(t)
        };
        self.params.insert(key, v);
        v
    }

    // ── primitives ───────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(dim_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let out = matmul_raw(ta.data(), m, k, tb.data(), n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if let Some(i) = self.value(b).data().iter().position(|&d| d == 0.0) {
            return Err(Error::Domain {
                op: "div",
                detail: format!("zero denominator at index {i}"),
            });
        }
        self.zip_same("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Sum of several same-shape nodes.
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| Error::Contract("add_all of an empty list".into()))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    fn row_broadcast_check(&self, name: &'static str, x: Var, r: Var) -> Result<(usize, usize)> {
        let (tx, tr) = (self.value(x), self.value(r));
        if tx.rank() != 2 || tr.rank() != 1 || tx.shape()[1] != tr.shape()[0] {
            return Err(dim_err(name, tx, tr));
        }
        Ok((tx.shape()[0], tx.shape()[1]))
    }

    /// `x[b,n] + r[n]`, broadcasting over the batch axis.
    pub fn add_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let (b, n) = self.row_broadcast_check("add_row", x, r)?;
        let (tx, tr) = (self.value(x), self.value(r));
        let mut data = tx.data().to_vec();
        for i in 0..b {
            for (o, &rv) in data[i * n..(i + 1) * n].iter_mut().zip(tr.data()) {
                *o += rv;
            }
        }
        let rg = self.rg(x) || self.rg(r);
        Ok(self.push(Tensor::from_parts(vec![b, n], data), Op::AddRow(x, r), rg))
    }

    /// `x[b,n] * r[n]`, broadcasting over the batch axis.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let (b, n) = self.row_broadcast_check("mul_row", x, r)?;
        let (tx, tr) = (self.value(x), self.value(r));
        let mut data = tx.data().to_vec();
        for i in 0..b {
            for (o, &rv) in data[i * n..(i + 1) * n].iter_mut().zip(tr.data()) {
                *o *= rv;
            }
        }
        let rg = self.rg(x) || self.rg(r);
        Ok(self.push(Tensor::from_parts(vec![b, n], data), Op::MulRow(x, r), rg))
    }

    /// Scales row `i` of `x[b,n]` by `s[i]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(s));
        if tx.rank() != 2 || ts.rank() != 1 || tx.shape()[0] != ts.shape()[0] {
            return Err(dim_err("scale_rows", tx, ts));
        }
        let (b, n) = (tx.shape()[0], tx.shape()[1]);
        let mut data = tx.data().to_vec();
        for i in 0..b {
            let sv = ts.data()[i];
            data[i * n..(i + 1) * n].iter_mut().for_each(|o| *o *= sv);
        }
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(Tensor::from_parts(vec![b, n], data), Op::ScaleRows(x, s), rg))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        let rg = self.rg(x);
        self.push(out, op, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |v| v * c, Op::Scale(x, c))
    }

    /// `x + c` for a constant `c`.
    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |v| v + c, Op::Offset(x))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let n = self.neg(x);
        self.offset(n, 1.0)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(i) = self.value(x).data().iter().position(|&v| v <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                detail: format!(
                    "non-positive argument {} at index {i}",
                    self.value(x).data()[i]
                ),
            });
        }
        Ok(self.map(x, f64::ln, Op::Log(x)))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if let Some(i) = self.value(x).data().iter().position(|&v| v < 0.0) {
            return Err(Error::Domain {
                op: "sqrt",
                detail: format!("negative argument at index {i}"),
            });
        }
        Ok(self.map(x, f64::sqrt, Op::Sqrt(x)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// `max(x, floor)`; gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Var {
        self.map(x, |v| v.max(floor), Op::ClampMin(x, floor))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    fn require_matrix(&self, name: &'static str, x: Var) -> Result<(usize, usize)> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(Error::Dimension {
                op: name,
                lhs: t.shape().to_vec(),
                rhs: vec![],
            });
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    /// Per-row sums: `[b,n] -> [b]`.
    pub fn sum_cols(&mut self, x: Var) -> Result<Var> {
        let (b, _) = self.require_matrix("sum_cols", x)?;
        let t = self.value(x);
        let data = (0..b).map(|i| t.row(i).iter().sum()).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![b], data), Op::SumCols(x), rg))
    }

    /// Sum over the batch axis: `[b,n] -> [n]`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let (b, n) = self.require_matrix("sum_rows", x)?;
        let t = self.value(x);
        let mut data = vec![0.0; n];
        for i in 0..b {
            for (o, &v) in data.iter_mut().zip(t.row(i)) {
                *o += v;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![n], data), Op::SumRows(x), rg))
    }

    /// Per-row dot product of two `[b,n]` matrices, giving `[b]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || ta.shape() != tb.shape() {
            return Err(dim_err("row_dot", ta, tb));
        }
        let rows = ta.shape()[0];
        let data = (0..rows)
            .map(|i| ta.row(i).iter().zip(tb.row(i)).map(|(x, y)| x * y).sum())
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![rows], data), Op::RowDot(a, b), rg))
    }

    /// Concatenation along the last axis. All inputs share their leading
    /// extents.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of an empty list".into()))?;
        let lead = self.value(first).shape()[..self.value(first).rank() - 1].to_vec();
        let rows = self.value(first).rows();
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.shape()[..t.rank() - 1] != lead[..] {
                return Err(dim_err("concat", self.value(first), t));
            }
            total += t.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::from_parts(shape, data), Op::Concat(parts.to_vec()), rg))
    }

    /// Columns `start..end` of the last axis.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        let c = t.cols();
        if start >= end || end > c {
            return Err(Error::Dimension {
                op: "slice_cols",
                lhs: t.shape().to_vec(),
                rhs: vec![start, end],
            });
        }
        let rows = t.rows();
        let mut data = Vec::with_capacity(rows * (end - start));
        for i in 0..rows {
            data.extend_from_slice(&t.row(i)[start..end]);
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = end - start;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::SliceCols(x, start, end),
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Row-wise softmax of `x[b,T]` restricted to positions where
    /// `mask[i*T + t]` is true. Masked positions output exactly zero.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (b, t) = self.require_matrix("masked_softmax", x)?;
        if mask.len() != b * t {
            return Err(Error::Dimension {
                op: "masked_softmax",
                lhs: vec![b, t],
                rhs: vec![mask.len()],
            });
        }
        let tx = self.value(x);
        let mut data = vec![0.0; b * t];
        for i in 0..b {
            let row = tx.row(i);
            let m = &mask[i * t..(i + 1) * t];
            if row.iter().zip(m).any(|(v, &ok)| ok && !v.is_finite()) {
                return Err(Error::Numeric(format!("masked_softmax row {i} has a non-finite input")));
            }
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &ok)| ok)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::Contract(format!(
                    "masked_softmax row {i} has no valid positions"
                )));
            }
            let out = &mut data[i * t..(i + 1) * t];
            let mut z = 0.0;
            for j in 0..t {
                if m[j] {
                    out[j] = (row[j] - max).exp();
                    z += out[j];
                }
            }
            out.iter_mut().for_each(|v| *v /= z);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![b, t], data),
            Op::MaskedSoftmax(x, mask.to_vec()),
            rg,
        ))
    }

    /// Unmasked softmax over the last axis of a matrix.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        self.masked_softmax(x, &vec![true; n])
    }

    /// `out[i,:] = sum_t weights[i,t] * steps[t][i,:]` for per-step `[b,n]`
    /// matrices and a `[b,T]` weight matrix.
    pub fn weighted_steps(&mut self, steps: &[Var], weights: Var) -> Result<Var> {
        let (b, t) = self.require_matrix("weighted_steps", weights)?;
        if steps.len() != t || t == 0 {
            return Err(Error::Dimension {
                op: "weighted_steps",
                lhs: vec![steps.len()],
                rhs: vec![b, t],
            });
        }
        let (sb, n) = self.require_matrix("weighted_steps", steps[0])?;
        for &s in steps {
            if self.value(s).shape() != [sb, n] || sb != b {
                return Err(dim_err("weighted_steps", self.value(steps[0]), self.value(s)));
            }
        }
        let tw = self.value(weights);
        let mut data = vec![0.0; b * n];
        for (k, &s) in steps.iter().enumerate() {
            let ts = self.value(s);
            for i in 0..b {
                let w = tw.data()[i * t + k];
                if w == 0.0 {
                    continue;
                }
                for (o, &v) in data[i * n..(i + 1) * n].iter_mut().zip(ts.row(i)) {
                    *o += w * v;
                }
            }
        }
        let rg = self.rg(weights) || steps.iter().any(|&s| self.rg(s));
        Ok(self.push(
            Tensor::from_parts(vec![b, n], data),
            Op::WeightedSteps(steps.to_vec(), weights),
            rg,
        ))
    }

    /// Builds a `[R, n]` matrix whose rows are constant-weight combinations of
    /// rows drawn from `sources` (all `[*, n]`). An empty pick list yields a
    /// zero row.
    pub fn combine_rows(&mut self, sources: &[Var], picks: Vec<Vec<RowPick>>) -> Result<Var> {
        let first = *sources
            .first()
            .ok_or_else(|| Error::Contract("combine_rows without sources".into()))?;
        let n = self.require_matrix("combine_rows", first)?.1;
        for &s in sources {
            let (r, c) = self.require_matrix("combine_rows", s)?;
            if c != n {
                return Err(dim_err("combine_rows", self.value(first), self.value(s)));
            }
            let _ = r;
        }
        if picks.is_empty() {
            return Err(Error::Contract("combine_rows with zero output rows".into()));
        }
        let mut data = vec![0.0; picks.len() * n];
        for (r, row_picks) in picks.iter().enumerate() {
            for p in row_picks {
                let src = sources.get(p.src).ok_or_else(|| {
                    Error::Contract(format!("combine_rows source {} out of range", p.src))
                })?;
                let t = self.value(*src);
                if p.row >= t.shape()[0] {
                    return Err(Error::Contract(format!(
                        "combine_rows row {} out of range for source {}",
                        p.row, p.src
                    )));
                }
                for (o, &v) in data[r * n..(r + 1) * n].iter_mut().zip(t.row(p.row)) {
                    *o += p.weight * v;
                }
            }
        }
        let rg = sources.iter().any(|&s| self.rg(s));
        let rows = picks.len();
        Ok(self.push(
            Tensor::from_parts(vec![rows, n], data),
            Op::CombineRows(sources.to_vec(), picks),
            rg,
        ))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Propagates d(loss)/d(node) to every node that requires gradients,
    /// adding into the stored accumulators.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut fresh: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.rg(loss) {
            fresh[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = fresh[idx].take() else { continue };
            self.propagate(idx, &g, &mut fresh);
            // Keep the node's own gradient for later inspection.
            fresh[idx] = Some(g);
        }
        if self.grads.len() < fresh.len() {
            self.grads.resize(fresh.len(), None);
        }
        for (slot, g) in self.grads.iter_mut().zip(fresh) {
            if let Some(g) = g {
                accumulate_owned(slot, g);
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], fresh: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let shape = |v: Var| self.nodes[v.0].value.shape();
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        macro_rules! send {
            ($v:expr, $delta:expr) => {
                if rg($v) {
                    accumulate_owned(&mut fresh[$v.0], $delta);
                }
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (shape(*a)[0], shape(*a)[1]);
                let n = shape(*b)[1];
                if rg(*a) {
                    send!(*a, matmul_a_bt(g, m, n, val(*b), k));
                }
                if rg(*b) {
                    send!(*b, matmul_at_b(val(*a), m, k, g, n));
                }
            }
            Op::Add(a, b) => {
                if rg(*a) {
                    accumulate(&mut fresh[a.0], g);
                }
                if rg(*b) {
                    accumulate(&mut fresh[b.0], g);
                }
            }
            Op::Sub(a, b) => {
                if rg(*a) {
                    accumulate(&mut fresh[a.0], g);
                }
                send!(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    send!(*a, g.iter().zip(val(*b)).map(|(g, y)| g * y).collect());
                }
                if rg(*b) {
                    send!(*b, g.iter().zip(val(*a)).map(|(g, x)| g * x).collect());
                }
            }
            Op::Div(a, b) => {
                let (xa, xb) = (val(*a), val(*b));
                if rg(*a) {
                    send!(*a, g.iter().zip(xb).map(|(g, d)| g / d).collect());
                }
                if rg(*b) {
                    send!(
                        *b,
                        g.iter()
                            .zip(xa)
                            .zip(xb)
                            .map(|((g, n), d)| -g * n / (d * d))
                            .collect()
                    );
                }
            }
            Op::AddRow(x, r) => {
                if rg(*x) {
                    accumulate(&mut fresh[x.0], g);
                }
                if rg(*r) {
                    let n = shape(*r)[0];
                    let mut dr = vec![0.0; n];
                    for chunk in g.chunks(n) {
                        dr.iter_mut().zip(chunk).for_each(|(d, v)| *d += v);
                    }
                    send!(*r, dr);
                }
            }
            Op::MulRow(x, r) => {
                let n = shape(*r)[0];
                let (xv, rv) = (val(*x), val(*r));
                if rg(*x) {
                    let dx = g
                        .chunks(n)
                        .flat_map(|c| c.iter().zip(rv).map(|(g, r)| g * r))
                        .collect();
                    send!(*x, dx);
                }
                if rg(*r) {
                    let mut dr = vec![0.0; n];
                    for (gc, xc) in g.chunks(n).zip(xv.chunks(n)) {
                        for j in 0..n {
                            dr[j] += gc[j] * xc[j];
                        }
                    }
                    send!(*r, dr);
                }
            }
            Op::ScaleRows(x, s) => {
                let b = shape(*s)[0];
                let n = g.len() / b;
                let (xv, sv) = (val(*x), val(*s));
                if rg(*x) {
                    let dx = g
                        .chunks(n)
                        .zip(sv)
                        .flat_map(|(c, &s)| c.iter().map(move |g| g * s))
                        .collect();
                    send!(*x, dx);
                }
                if rg(*s) {
                    let ds = g
                        .chunks(n)
                        .zip(xv.chunks(n))
                        .map(|(gc, xc)| gc.iter().zip(xc).map(|(a, b)| a * b).sum())
                        .collect();
                    send!(*s, ds);
                }
            }
            Op::Scale(x, c) => send!(*x, g.iter().map(|v| v * c).collect()),
            Op::Offset(x) => {
                if rg(*x) {
                    accumulate(&mut fresh[x.0], g);
                }
            }
            Op::Tanh(x) => send!(*x, g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect()),
            Op::Sigmoid(x) => {
                send!(*x, g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect())
            }
            Op::Exp(x) => send!(*x, g.iter().zip(y).map(|(g, y)| g * y).collect()),
            Op::Log(x) => send!(*x, g.iter().zip(val(*x)).map(|(g, x)| g / x).collect()),
            Op::Sqrt(x) => send!(*x, g.iter().zip(y).map(|(g, y)| g * 0.5 / y).collect()),
            Op::Relu(x) => send!(
                *x,
                g.iter()
                    .zip(val(*x))
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect()
            ),
            Op::ClampMin(x, floor) => send!(
                *x,
                g.iter()
                    .zip(val(*x))
                    .map(|(g, &x)| if x > *floor { *g } else { 0.0 })
                    .collect()
            ),
            Op::Sum(x) => send!(*x, vec![g[0]; val(*x).len()]),
            Op::Mean(x) => {
                let n = val(*x).len();
                send!(*x, vec![g[0] / n as f64; n]);
            }
            Op::SumCols(x) => {
                let n = shape(*x)[1];
                send!(*x, g.iter().flat_map(|&v| std::iter::repeat_n(v, n)).collect());
            }
            Op::SumRows(x) => {
                let b = shape(*x)[0];
                send!(*x, g.repeat(b));
            }
            Op::RowDot(a, b) => {
                let n = shape(*a)[1];
                let (av, bv) = (val(*a), val(*b));
                if rg(*a) {
                    let da = bv
                        .chunks(n)
                        .zip(g)
                        .flat_map(|(c, &g)| c.iter().map(move |v| v * g))
                        .collect();
                    send!(*a, da);
                }
                if rg(*b) {
                    let db = av
                        .chunks(n)
                        .zip(g)
                        .flat_map(|(c, &g)| c.iter().map(move |v| v * g))
                        .collect();
                    send!(*b, db);
                }
            }
            Op::Concat(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let c = self.nodes[p.0].value.cols();
                    if rg(p) {
                        let mut d = Vec::with_capacity(rows * c);
                        for i in 0..rows {
                            d.extend_from_slice(&g[i * total + offset..i * total + offset + c]);
                        }
                        send!(p, d);
                    }
                    offset += c;
                }
            }
            Op::SliceCols(x, start, end) => {
                let c = self.nodes[x.0].value.cols();
                let w = end - start;
                let rows = g.len() / w;
                let mut d = vec![0.0; rows * c];
                for i in 0..rows {
                    d[i * c + start..i * c + end].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                send!(*x, d);
            }
            Op::Reshape(x) => {
                if rg(*x) {
                    accumulate(&mut fresh[x.0], g);
                }
            }
            Op::MaskedSoftmax(x, mask) => {
                let t = node.value.cols();
                let mut d = vec![0.0; g.len()];
                for ((dr, (gr, yr)), mr) in d
                    .chunks_mut(t)
                    .zip(g.chunks(t).zip(y.chunks(t)))
                    .zip(mask.chunks(t))
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..t {
                        if mr[j] {
                            dr[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                }
                send!(*x, d);
            }
            Op::WeightedSteps(steps, w) => {
                let (b, t) = (shape(*w)[0], shape(*w)[1]);
                let n = g.len() / b;
                let wv = val(*w);
                for (k, &s) in steps.iter().enumerate() {
                    if !rg(s) {
                        continue;
                    }
                    let mut d = vec![0.0; b * n];
                    for i in 0..b {
                        let wk = wv[i * t + k];
                        if wk == 0.0 {
                            continue;
                        }
                        for (o, &gv) in d[i * n..(i + 1) * n].iter_mut().zip(&g[i * n..(i + 1) * n])
                        {
                            *o = wk * gv;
                        }
                    }
                    send!(s, d);
                }
                if rg(*w) {
                    let mut dw = vec![0.0; b * t];
                    for (k, &s) in steps.iter().enumerate() {
                        let sv = val(s);
                        for i in 0..b {
                            dw[i * t + k] = sv[i * n..(i + 1) * n]
                                .iter()
                                .zip(&g[i * n..(i + 1) * n])
                                .map(|(a, b)| a * b)
                                .sum();
                        }
                    }
                    send!(*w, dw);
                }
            }
            Op::CombineRows(sources, picks) => {
                let n = node.value.cols();
                let mut per_src: Vec<Option<Vec<f64>>> = vec![None; sources.len()];
                for (r, row_picks) in picks.iter().enumerate() {
                    let gr = &g[r * n..(r + 1) * n];
                    for p in row_picks {
                        if !rg(sources[p.src]) {
                            continue;
                        }
                        let rows = shape(sources[p.src])[0];
                        let d = per_src[p.src].get_or_insert_with(|| vec![0.0; rows * n]);
                        for (o, &gv) in d[p.row * n..(p.row + 1) * n].iter_mut().zip(gr) {
                            *o += p.weight * gv;
                        }
                    }
                }
                for (s, d) in sources.iter().zip(per_src) {
                    if let Some(d) = d {
                        send!(*s, d);
                    }
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
