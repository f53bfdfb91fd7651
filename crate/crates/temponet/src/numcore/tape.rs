//! Reverse-mode autodiff tape.
//!
//! A tape records one forward pass as an append-only op list (define-by-run),
//! so node indices are already a topological order. [`Tape::backward`] seeds a
//! scalar output with 1 and visits nodes once in reverse, accumulating
//! adjoints that match the calculus of each op.

use std::collections::BTreeMap;

use super::array::Array2;
use super::store::GradStore;
use crate::{Error, Result};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// User-defined differentiable operation (used by the sparse attention
/// kernel). `forward` may stash whatever it needs for `backward`.
pub trait CustomOp {
    fn name(&self) -> &'static str;
    fn forward(&mut self, inputs: &[&Array2]) -> Result<Array2>;
    /// Accumulate input adjoints into `grads` (aligned with `inputs`).
    fn backward(&self, upstream: &Array2, inputs: &[&Array2], grads: &mut [Array2]);
}

enum Op {
    Leaf { name: Option<String> },
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    MulElem(usize, usize),
    Scale(usize, f64),
    Transpose(usize),
    SoftmaxRows(usize),
    Relu(usize),
    Ln(usize),
    SumAll(usize),
    AddRowBroadcast { x: usize, row: usize },
    GatherRows { x: usize, indices: Vec<usize> },
    ScatterRows { x: usize, positions: Vec<usize> },
    SliceCols { x: usize, start: usize },
    ConcatCols { parts: Vec<usize> },
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Array2, inv_std: Vec<f64> },
    Custom { inputs: Vec<usize>, op: Box<dyn CustomOp> },
}

struct Node {
    op: Op,
    value: Array2,
}

/// One forward pass worth of recorded computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2 {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Array2) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Registers a named parameter leaf; its gradient is exported by name.
    pub fn param(&mut self, name: impl Into<String>, value: Array2) -> Var {
        self.push(Op::Leaf { name: Some(name.into()) }, value)
    }

    /// Registers an unnamed constant leaf (no gradient export).
    pub fn constant(&mut self, value: Array2) -> Var {
        self.push(Op::Leaf { name: None }, value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a.0, b.0), v))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a.0, b.0), v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub(a.0, b.0), v))
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul_elem(self.value(b))?;
        Ok(self.push(Op::MulElem(a.0, b.0), v))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.push(Op::Scale(a.0, s), v)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(Op::Transpose(a.0), v)
    }

    /// Row-wise softmax, stabilized by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = Array2::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            softmax_into(x.row(r), out.row_mut(r));
        }
        self.push(Op::SoftmaxRows(a.0), out)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a.0), v)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(Op::Ln(a.0), v)
    }

    /// Sum of all entries, as a 1x1 array.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Op::SumAll(a.0), Array2::filled(1, 1, s))
    }

    /// Adds a 1xC row vector to every row of an NxC matrix.
    pub fn add_row_broadcast(&mut self, x: Var, row: Var) -> Result<Var> {
        let xv = self.value(x);
        let rv = self.value(row);
        if rv.rows() != 1 || rv.cols() != xv.cols() {
            return Err(Error::Shape {
                op: "add_row_broadcast",
                a_rows: xv.rows(),
                a_cols: xv.cols(),
                b_rows: rv.rows(),
                b_cols: rv.cols(),
            });
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(rv.row(0)) {
                *o += b;
            }
        }
        Ok(self.push(Op::AddRowBroadcast { x: x.0, row: row.0 }, out))
    }

    /// Gathers rows of `x`; the backward pass scatter-adds, so repeated
    /// indices accumulate gradient.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let mut out = Array2::zeros(indices.len(), xv.cols());
        for (i, &idx) in indices.iter().enumerate() {
            if idx >= xv.rows() {
                return Err(Error::contract(format!(
                    "gather_rows: index {idx} out of range 0..{}",
                    xv.rows()
                )));
            }
            out.row_mut(i).copy_from_slice(xv.row(idx));
        }
        Ok(self.push(Op::GatherRows { x: x.0, indices: indices.to_vec() }, out))
    }

    /// Embedding lookup: rows of the table gathered by index.
    pub fn embedding_lookup(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        self.gather_rows(table, indices)
    }

    /// Places row i of `x` at `positions[i]` in a `rows`-row output; other
    /// rows are zero. Positions must be distinct.
    pub fn scatter_rows(&mut self, x: Var, positions: &[usize], rows: usize) -> Result<Var> {
        let xv = self.value(x);
        if positions.len() != xv.rows() {
            return Err(Error::contract("scatter_rows: positions/rows mismatch"));
        }
        let mut out = Array2::zeros(rows, xv.cols());
        let mut seen = vec![false; rows];
        for (i, &pos) in positions.iter().enumerate() {
            if pos >= rows || seen[pos] {
                return Err(Error::contract(format!("scatter_rows: bad position {pos}")));
            }
            seen[pos] = true;
            out.row_mut(pos).copy_from_slice(xv.row(i));
        }
        Ok(self.push(Op::ScatterRows { x: x.0, positions: positions.to_vec() }, out))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + len > xv.cols() {
            return Err(Error::contract(format!(
                "slice_cols: [{start}, {}) out of {} cols",
                start + len,
                xv.cols()
            )));
        }
        let mut out = Array2::zeros(xv.rows(), len);
        for r in 0..xv.rows() {
            out.row_mut(r).copy_from_slice(&xv.row(r)[start..start + len]);
        }
        Ok(self.push(Op::SliceCols { x: x.0, start }, out))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat_cols: empty part list"));
        }
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Array2::zeros(rows, total);
        let mut offset = 0;
        for p in parts {
            let pv = self.value(*p);
            if pv.rows() != rows {
                return Err(Error::contract("concat_cols: row mismatch"));
            }
            for r in 0..rows {
                out.row_mut(r)[offset..offset + pv.cols()].copy_from_slice(pv.row(r));
            }
            offset += pv.cols();
        }
        Ok(self.push(Op::ConcatCols { parts: parts.iter().map(|p| p.0).collect() }, out))
    }

    /// Per-row normalization to mean 0 / variance 1 followed by the affine
    /// map `gain * xhat + bias`. Epsilon 1e-5 inside the square root.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let xv = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let cols = xv.cols();
        if cols < 2 {
            return Err(Error::contract("layer_norm: needs at least 2 columns"));
        }
        if g.shape() != (1, cols) || b.shape() != (1, cols) {
            return Err(Error::contract("layer_norm: gain/bias must be 1 x cols"));
        }
        let mut xhat = Array2::zeros(xv.rows(), cols);
        let mut inv_std = Vec::with_capacity(xv.rows());
        let mut out = Array2::zeros(xv.rows(), cols);
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let istd = 1.0 / (var + EPS).sqrt();
            inv_std.push(istd);
            for c in 0..cols {
                let xh = (row[c] - mean) * istd;
                xhat.set(r, c, xh);
                out.set(r, c, g.get(0, c) * xh + b.get(0, c));
            }
        }
        Ok(self.push(
            Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0, xhat, inv_std },
            out,
        ))
    }

    /// Records a user-defined op.
    pub fn custom(&mut self, inputs: &[Var], mut op: Box<dyn CustomOp>) -> Result<Var> {
        let values: Vec<&Array2> = inputs.iter().map(|v| self.value(*v)).collect();
        let out = op.forward(&values)?;
        Ok(self.push(Op::Custom { inputs: inputs.iter().map(|v| v.0).collect(), op }, out))
    }

    /// Returns an error naming `context` if the node holds any non-finite
    /// value.
    pub fn check_finite(&self, v: Var, context: &str) -> Result<()> {
        if self.value(v).is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    /// Reverse pass from a scalar (1x1) output. Returns per-node adjoints.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).shape() != (1, 1) {
            return Err(Error::contract("backward: output must be scalar (1x1)"));
        }
        let mut grads: Vec<Option<Array2>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Array2::filled(1, 1, 1.0));

        for idx in (0..self.nodes.len()).rev() {
            let Some(up) = grads[idx].take() else { continue };
            // Re-install: callers may query any node's adjoint afterwards.
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf { .. } => {}
                Op::MatMul(a, b) => {
                    let da = up.matmul(&self.nodes[*b].value.transpose())?;
                    let db = self.nodes[*a].value.transpose().matmul(&up)?;
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, up.clone())?;
                    accumulate(&mut grads, *b, up.clone())?;
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, up.clone())?;
                    accumulate(&mut grads, *b, up.scale(-1.0))?;
                }
                Op::MulElem(a, b) => {
                    let da = up.mul_elem(&self.nodes[*b].value)?;
                    let db = up.mul_elem(&self.nodes[*a].value)?;
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, up.scale(*s))?,
                Op::Transpose(a) => accumulate(&mut grads, *a, up.transpose())?,
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut dx = Array2::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let ur = up.row(r);
                        let dot: f64 = yr.iter().zip(ur).map(|(y, u)| y * u).sum();
                        for c in 0..y.cols() {
                            dx.set(r, c, yr[c] * (ur[c] - dot));
                        }
                    }
                    accumulate(&mut grads, *a, dx)?;
                }
                Op::Relu(a) => {
                    let x = &self.nodes[*a].value;
                    let mut dx = up.clone();
                    for (d, &xv) in dx.data_mut().iter_mut().zip(x.data()) {
                        if xv <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    accumulate(&mut grads, *a, dx)?;
                }
                Op::Ln(a) => {
                    let x = &self.nodes[*a].value;
                    let mut dx = up.clone();
                    for (d, &xv) in dx.data_mut().iter_mut().zip(x.data()) {
                        *d /= xv;
                    }
                    accumulate(&mut grads, *a, dx)?;
                }
                Op::SumAll(a) => {
                    let x = &self.nodes[*a].value;
                    let dx = Array2::filled(x.rows(), x.cols(), up.get(0, 0));
                    accumulate(&mut grads, *a, dx)?;
                }
                Op::AddRowBroadcast { x, row } => {
                    accumulate(&mut grads, *x, up.clone())?;
                    let mut drow = Array2::zeros(1, up.cols());
                    for r in 0..up.rows() {
                        for c in 0..up.cols() {
                            drow.set(0, c, drow.get(0, c) + up.get(r, c));
                        }
                    }
                    accumulate(&mut grads, *row, drow)?;
                }
                Op::GatherRows { x, indices } => {
                    let xv = &self.nodes[*x].value;
                    let mut dx = Array2::zeros(xv.rows(), xv.cols());
                    for (i, &idx) in indices.iter().enumerate() {
                        for c in 0..up.cols() {
                            dx.set(idx, c, dx.get(idx, c) + up.get(i, c));
                        }
                    }
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::ScatterRows { x, positions } => {
                    let mut dx = Array2::zeros(positions.len(), up.cols());
                    for (i, &pos) in positions.iter().enumerate() {
                        dx.row_mut(i).copy_from_slice(up.row(pos));
                    }
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::SliceCols { x, start } => {
                    let xv = &self.nodes[*x].value;
                    let mut dx = Array2::zeros(xv.rows(), xv.cols());
                    for r in 0..up.rows() {
                        dx.row_mut(r)[*start..start + up.cols()].copy_from_slice(up.row(r));
                    }
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::ConcatCols { parts } => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.nodes[*p].value.cols();
                        let mut dp = Array2::zeros(up.rows(), w);
                        for r in 0..up.rows() {
                            dp.row_mut(r).copy_from_slice(&up.row(r)[offset..offset + w]);
                        }
                        accumulate(&mut grads, *p, dp)?;
                        offset += w;
                    }
                }
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    let g = &self.nodes[*gain].value;
                    let cols = up.cols();
                    let n = cols as f64;
                    let mut dx = Array2::zeros(up.rows(), cols);
                    let mut dg = Array2::zeros(1, cols);
                    let mut db = Array2::zeros(1, cols);
                    for r in 0..up.rows() {
                        let istd = inv_std[r];
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for c in 0..cols {
                            let dxh = up.get(r, c) * g.get(0, c);
                            sum_dxhat += dxh;
                            sum_dxhat_xhat += dxh * xhat.get(r, c);
                            dg.set(0, c, dg.get(0, c) + up.get(r, c) * xhat.get(r, c));
                            db.set(0, c, db.get(0, c) + up.get(r, c));
                        }
                        for c in 0..cols {
                            let dxh = up.get(r, c) * g.get(0, c);
                            let v = istd
                                * (dxh
                                    - sum_dxhat / n
                                    - xhat.get(r, c) * sum_dxhat_xhat / n);
                            dx.set(r, c, v);
                        }
                    }
                    accumulate(&mut grads, *x, dx)?;
                    accumulate(&mut grads, *gain, dg)?;
                    accumulate(&mut grads, *bias, db)?;
                }
                Op::Custom { inputs, op } => {
                    let values: Vec<&Array2> =
                        inputs.iter().map(|i| &self.nodes[*i].value).collect();
                    let mut local: Vec<Array2> =
                        values.iter().map(|v| Array2::zeros(v.rows(), v.cols())).collect();
                    op.backward(&up, &values, &mut local);
                    for (i, d) in inputs.iter().zip(local) {
                        accumulate(&mut grads, *i, d)?;
                    }
                }
            }
            grads[idx] = Some(up);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Array2>], idx: usize, delta: Array2) -> Result<()> {
    match &mut grads[idx] {
        Some(g) => g.add_assign(&delta),
        slot @ None => {
            *slot = Some(delta);
            Ok(())
        }
    }
}

pub(crate) fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Adjoints produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Array2>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2> {
        self.grads[v.0].as_ref()
    }
}

impl Tape {
    /// Adds every named leaf's adjoint into `store` (creating entries as
    /// needed). Leaves without gradient contribute nothing.
    pub fn export_grads(&self, grads: &Gradients, store: &mut GradStore) -> Result<()> {
        let mut named: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { name: Some(n) } = &node.op {
                named.entry(n.as_str()).or_default().push(i);
            }
        }
        for (name, idxs) in named {
            for i in idxs {
                if let Some(g) = &grads.grads[i] {
                    store.accumulate(name, g)?;
                }
            }
        }
        Ok(())
    }
}
