//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in execution order, which is already a
//! topological order. [`Graph::backward`] walks the record once in reverse and
//! accumulates adjoints additively, so a node consumed by several operations
//! receives the sum of its branch gradients.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::kernels::gemm;
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a dropout mask lines up with the tensor it scales.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    /// Mask and input have the same shape.
    Elementwise,
    /// Mask is r×c; the input is (k·r)×c and every r-row block uses the same mask.
    RowTiled,
    /// Mask has one entry per input row, scaling the whole row.
    PerRow,
}

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Leaf,
    Param,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias { x: Var, bias: Var },
    Sigmoid(Var),
    Tanh(Var),
    Scale(Var, f64),
    Mask { x: Var, mask: Var, mode: MaskMode },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize, end: usize },
    SliceCols { x: Var, start: usize, end: usize },
    Gather { table: Var, indices: Vec<usize> },
    Sum(Var),
    Mean(Var),
    SoftmaxCrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Operation record for one forward/backward cycle.
pub struct Graph<'p> {
    store: Option<&'p ParamStore>,
    nodes: Vec<Node<'p>>,
    param_vars: Vec<Option<Var>>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    /// A graph without parameters; leaves are created with [`Graph::leaf`].
    pub fn new() -> Self {
        Graph {
            store: None,
            nodes: Vec::new(),
            param_vars: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    /// A graph reading parameters from `store`.
    pub fn with_params(store: &'p ParamStore) -> Self {
        Graph {
            store: Some(store),
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Adjoint of `v` after [`Graph::backward`]; `None` if no gradient reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Cow<'p, Tensor>, op: Op, requires_grad: bool) -> Result<Var> {
        if self.backward_done {
            return Err(Error::State(
                "graph already differentiated; build a new graph".into(),
            ));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push_owned(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        self.push(Cow::Owned(value), op, requires_grad)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Non-differentiable input (token data, dropout masks, carried state).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_owned(value, Op::Constant, false)
            .expect("constant on finished graph")
    }

    /// Differentiable input not backed by the parameter store.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_owned(value, Op::Leaf, true)
            .expect("leaf on finished graph")
    }

    /// The node for a stored parameter. Repeated calls return the same node,
    /// so every use of a parameter accumulates into one adjoint.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(id.0).copied().flatten() {
            return v;
        }
        let store = self.store.expect("graph has no parameter store");
        let v = self
            .push(Cow::Borrowed(store.get(id)), Op::Param, true)
            .expect("param on finished graph");
        self.param_vars[id.0] = Some(v);
        v
    }

    /// `a · b`, or `a · bᵀ` when `trans_b` is set. Both operands are matrices.
    pub fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let op_name = if trans_b { "matmul_t" } else { "matmul" };
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::Dimension {
                op: op_name,
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(Error::Dimension {
                op: op_name,
                lhs: sa,
                rhs: sb,
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            trans_b,
            0.0,
            &mut out,
        );
        let rg = self.rg(&[a, b]);
        self.push_owned(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul { a, b, trans_b },
            rg,
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`; the layout used for weights stored as (out × in).
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, bool)> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::from_parts(ta.shape().to_vec(), data)
        } else if tb.len() == 1 {
            let y = tb.data()[0];
            ta.map(|x| f(x, y))
        } else if ta.len() == 1 {
            let x = ta.data()[0];
            tb.map(|y| f(x, y))
        } else {
            return Err(Error::Dimension {
                op: name,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        };
        Ok((out, self.rg(&[a, b])))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("add", a, b, |x, y| x + y)?;
        self.push_owned(t, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("sub", a, b, |x, y| x - y)?;
        self.push_owned(t, Op::Sub(a, b), rg)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("hadamard", a, b, |x, y| x * y)?;
        self.push_owned(t, Op::Mul(a, b), rg)
    }

    /// Adds a length-`cols` vector to every row of `x`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).rows_cols();
        if self.value(bias).len() != cols || self.shape(x).len() != 2 {
            return Err(Error::Dimension {
                op: "add_row_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let xv = self.value(x).data();
        let bv = self.value(bias).data();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            out.extend(xv[r * cols..(r + 1) * cols].iter().zip(bv).map(|(a, b)| a + b));
        }
        let rg = self.rg(&[x, bias]);
        self.push_owned(
            Tensor::from_parts(vec![rows, cols], out),
            Op::AddRowBias { x, bias },
            rg,
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(sigmoid);
        let rg = self.rg(&[x]);
        self.push_owned(t, Op::Sigmoid(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(f64::tanh);
        let rg = self.rg(&[x]);
        self.push_owned(t, Op::Tanh(x), rg)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let t = self.value(x).map(|v| v * factor);
        let rg = self.rg(&[x]);
        self.push_owned(t, Op::Scale(x, factor), rg)
    }

    /// Multiplies `x` by a constant dropout mask. Gradients flow to `x` only.
    pub fn apply_mask(&mut self, x: Var, mask: Var, mode: MaskMode) -> Result<Var> {
        let (tx, tm) = (self.value(x), self.value(mask));
        let dim_err = || Error::Dimension {
            op: "mask_apply",
            lhs: tx.shape().to_vec(),
            rhs: tm.shape().to_vec(),
        };
        let xd = tx.data();
        let md = tm.data();
        let data: Vec<f64> = match mode {
            MaskMode::Elementwise => {
                if tx.shape() != tm.shape() {
                    return Err(dim_err());
                }
                xd.iter().zip(md).map(|(a, b)| a * b).collect()
            }
            MaskMode::RowTiled => {
                if tm.is_empty() || xd.len() % md.len() != 0 || tx.rows_cols().1 != tm.rows_cols().1
                {
                    return Err(dim_err());
                }
                xd.chunks(md.len())
                    .flat_map(|block| block.iter().zip(md).map(|(a, b)| a * b))
                    .collect()
            }
            MaskMode::PerRow => {
                let (rows, cols) = tx.rows_cols();
                if md.len() != rows {
                    return Err(dim_err());
                }
                xd.chunks(cols.max(1))
                    .zip(md)
                    .flat_map(|(row, &m)| row.iter().map(move |a| a * m))
                    .collect()
            }
        };
        let t = Tensor::from_parts(tx.shape().to_vec(), data);
        let rg = self.rg(&[x]);
        self.push_owned(t, Op::Mask { x, mask, mode }, rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Dimension {
            op: "concat_rows",
            lhs: vec![],
            rhs: vec![],
        })?;
        let cols = self.value(first).rows_cols().1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 2 || t.shape()[1] != cols {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    lhs: self.shape(first).to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            rows += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let rg = self.rg(parts);
        self.push_owned(
            Tensor::from_parts(vec![rows, cols], data),
            Op::ConcatRows(parts.to_vec()),
            rg,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Dimension {
            op: "concat_cols",
            lhs: vec![],
            rhs: vec![],
        })?;
        let rows = self.value(first).rows_cols().0;
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 2 || t.shape()[0] != rows {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: self.shape(first).to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            cols += t.shape()[1];
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let t = self.value(p);
                let c = t.shape()[1];
                data.extend_from_slice(&t.data()[r * c..(r + 1) * c]);
            }
        }
        let rg = self.rg(parts);
        self.push_owned(
            Tensor::from_parts(vec![rows, cols], data),
            Op::ConcatCols(parts.to_vec()),
            rg,
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || start > end || end > t.shape()[0] {
            return Err(Error::Dimension {
                op: "slice_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![start, end],
            });
        }
        let cols = t.shape()[1];
        let data = t.data()[start * cols..end * cols].to_vec();
        let rg = self.rg(&[x]);
        self.push_owned(
            Tensor::from_parts(vec![end - start, cols], data),
            Op::SliceRows { x, start, end },
            rg,
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || start > end || end > t.shape()[1] {
            return Err(Error::Dimension {
                op: "slice_cols",
                lhs: t.shape().to_vec(),
                rhs: vec![start, end],
            });
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&t.data()[r * cols + start..r * cols + end]);
        }
        let rg = self.rg(&[x]);
        self.push_owned(
            Tensor::from_parts(vec![rows, end - start], data),
            Op::SliceCols { x, start, end },
            rg,
        )
    }

    /// Row lookup: output row `i` is `table[indices[i]]`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::Dimension {
                op: "gather_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![indices.len()],
            });
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(Error::Index {
                    op: "gather_rows",
                    index: i,
                    bound: rows,
                });
            }
            data.extend_from_slice(&t.data()[i * cols..(i + 1) * cols]);
        }
        let rg = self.rg(&[table]);
        self.push_owned(
            Tensor::from_parts(vec![indices.len(), cols], data),
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            rg,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push_owned(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::Dimension {
                op: "mean",
                lhs: t.shape().to_vec(),
                rhs: vec![],
            });
        }
        let s = t.sum() / t.len() as f64;
        let rg = self.rg(&[x]);
        self.push_owned(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Mean of the squared entries.
    pub fn mean_square(&mut self, x: Var) -> Result<Var> {
        let sq = self.mul(x, x)?;
        self.mean(sq)
    }

    /// Mean over rows of `-log softmax(logits[t])[targets[t]]`, computed with
    /// max-subtraction.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 2 || t.shape()[0] != targets.len() || targets.is_empty() {
            return Err(Error::Dimension {
                op: "softmax_cross_entropy",
                lhs: t.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let (rows, v) = (t.shape()[0], t.shape()[1]);
        let mut probs = Vec::with_capacity(rows * v);
        let mut total = 0.0;
        for (r, &target) in targets.iter().enumerate() {
            if target >= v {
                return Err(Error::Index {
                    op: "softmax_cross_entropy",
                    index: target,
                    bound: v,
                });
            }
            let row = &t.data()[r * v..(r + 1) * v];
            let (lse, start) = (log_sum_exp(row), probs.len());
            probs.extend(row.iter().map(|x| (x - lse).exp()));
            debug_assert_eq!(probs.len() - start, v);
            total += lse - row[target];
        }
        let loss = total / rows as f64;
        let rg = self.rg(&[logits]);
        self.push_owned(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar. Allowed once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::State("backward called twice on one graph".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Dimension {
                op: "backward",
                lhs: self.shape(loss).to_vec(),
                rhs: vec![],
            });
        }
        self.backward_done = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut param_grads = vec![None; self.param_vars.len()];
        for (pid, var) in self.param_vars.iter().enumerate() {
            if let Some(v) = var {
                if let Some(g) = &grads[v.0] {
                    let shape = self.nodes[v.0].value.shape().to_vec();
                    param_grads[pid] = Some(Tensor::from_parts(shape, g.clone()));
                }
            }
        }
        self.grads = grads;
        Ok(Gradients::new(param_grads))
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        let out = nodes[i].value.data();

        match &nodes[i].op {
            Op::Constant | Op::Leaf | Op::Param => {}
            Op::MatMul { a, b, trans_b } => {
                let sa = nodes[a.0].value.shape();
                let sb = nodes[b.0].value.shape();
                let (m, k) = (sa[0], sa[1]);
                let n = if *trans_b { sb[0] } else { sb[1] };
                let (av, bv) = (val(*a), val(*b));
                // dA = dC · op(B)ᵀ
                acc(*a, &mut |da| gemm(m, n, k, g, false, bv, !*trans_b, 1.0, da));
                if *trans_b {
                    // B is n×k: dB = dCᵀ · A
                    acc(*b, &mut |db| gemm(n, m, k, g, true, av, false, 1.0, db));
                } else {
                    // B is k×n: dB = Aᵀ · dC
                    acc(*b, &mut |db| gemm(k, m, n, av, true, g, false, 1.0, db));
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(nodes[i].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                acc(*a, &mut |da| accumulate_broadcast(da, g, 1.0));
                acc(*b, &mut |db| accumulate_broadcast(db, g, sign));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |da| accumulate_product(da, g, bv));
                acc(*b, &mut |db| accumulate_product(db, g, av));
            }
            Op::AddRowBias { x, bias } => {
                acc(*x, &mut |dx| add_into(dx, g));
                acc(*bias, &mut |db| {
                    let cols = db.len();
                    for row in g.chunks(cols) {
                        add_into(db, row);
                    }
                });
            }
            Op::Sigmoid(x) => acc(*x, &mut |dx| {
                for ((d, &gi), &y) in dx.iter_mut().zip(g).zip(out) {
                    *d += gi * y * (1.0 - y);
                }
            }),
            Op::Tanh(x) => acc(*x, &mut |dx| {
                for ((d, &gi), &y) in dx.iter_mut().zip(g).zip(out) {
                    *d += gi * (1.0 - y * y);
                }
            }),
            Op::Scale(x, s) => acc(*x, &mut |dx| {
                for (d, &gi) in dx.iter_mut().zip(g) {
                    *d += gi * s;
                }
            }),
            Op::Mask { x, mask, mode } => {
                let md = val(*mask);
                let cols = nodes[x.0].value.rows_cols().1.max(1);
                acc(*x, &mut |dx| match mode {
                    MaskMode::Elementwise => accumulate_product(dx, g, md),
                    MaskMode::RowTiled => {
                        for (dblock, gblock) in dx.chunks_mut(md.len()).zip(g.chunks(md.len())) {
                            accumulate_product(dblock, gblock, md);
                        }
                    }
                    MaskMode::PerRow => {
                        for ((drow, grow), &m) in dx.chunks_mut(cols).zip(g.chunks(cols)).zip(md) {
                            for (d, &gi) in drow.iter_mut().zip(grow) {
                                *d += gi * m;
                            }
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = nodes[p.0].value.len();
                    acc(*p, &mut |dp| add_into(dp, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total_cols = nodes[i].value.shape()[1];
                let rows = nodes[i].value.shape()[0];
                let mut col0 = 0;
                for p in parts {
                    let c = nodes[p.0].value.shape()[1];
                    acc(*p, &mut |dp| {
                        for r in 0..rows {
                            add_into(
                                &mut dp[r * c..(r + 1) * c],
                                &g[r * total_cols + col0..r * total_cols + col0 + c],
                            );
                        }
                    });
                    col0 += c;
                }
            }
            Op::SliceRows { x, start, end } => {
                let cols = nodes[x.0].value.shape()[1];
                acc(*x, &mut |dx| add_into(&mut dx[start * cols..end * cols], g));
            }
            Op::SliceCols { x, start, end } => {
                let cols = nodes[x.0].value.shape()[1];
                let w = end - start;
                acc(*x, &mut |dx| {
                    for (r, grow) in g.chunks(w.max(1)).enumerate() {
                        add_into(&mut dx[r * cols + start..r * cols + end], grow);
                    }
                });
            }
            Op::Gather { table, indices } => {
                let cols = nodes[table.0].value.shape()[1];
                acc(*table, &mut |dt| {
                    for (r, &idx) in indices.iter().enumerate() {
                        add_into(&mut dt[idx * cols..(idx + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |dx| dx.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(x) => {
                let n = nodes[x.0].value.len() as f64;
                acc(*x, &mut |dx| dx.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = nodes[logits.0].value.shape()[1];
                let scale = g[0] / targets.len() as f64;
                acc(*logits, &mut |dl| {
                    for (r, &t) in targets.iter().enumerate() {
                        let row = &mut dl[r * v..(r + 1) * v];
                        for (d, &p) in row.iter_mut().zip(&probs[r * v..(r + 1) * v]) {
                            *d += scale * p;
                        }
                        row[t] -= scale;
                    }
                });
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

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn accumulate_product(dst: &mut [f64], g: &[f64], other: &[f64]) {
    if other.len() == 1 {
        let o = other[0];
        if dst.len() == 1 {
            dst[0] += g.iter().map(|gi| gi * o).sum::<f64>();
        } else {
            dst.iter_mut().zip(g).for_each(|(d, gi)| *d += gi * o);
        }
    } else if dst.len() == 1 {
        dst[0] += g.iter().zip(other).map(|(gi, o)| gi * o).sum::<f64>();
    } else {
        for ((d, gi), o) in dst.iter_mut().zip(g).zip(other) {
            *d += gi * o;
        }
    }
}

fn accumulate_broadcast(dst: &mut [f64], g: &[f64], sign: f64) {
    if dst.len() == g.len() {
        dst.iter_mut().zip(g).for_each(|(d, gi)| *d += sign * gi);
    } else {
        // scalar operand broadcast over g
        dst[0] += sign * g.iter().sum::<f64>();
    }
}
