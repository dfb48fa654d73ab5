//! Reverse-mode compute graph over dense arrays.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its
//! inputs, its forward value, and any cached auxiliaries its backward
//! rule needs. [`Graph::backward`] walks the tape in reverse, accumulating
//! gradients in fixed node order (deterministic down to the bit) and
//! depositing parameter gradients into the [`ParamStore`].

use std::rc::Rc;

use crate::error::{Error, Result};

use super::params::ParamStore;
use super::{DenseArray, Scalar};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VarId(usize);

/// Interpolation plan: for each output row, three source rows and weights.
#[derive(Clone, Debug)]
pub struct InterpPlan<S> {
    pub indices: Vec<[usize; 3]>,
    pub weights: Vec<[S; 3]>,
}

enum Op<S> {
    /// Trainable leaf tied to a parameter slot, or a free constant input.
    Leaf { slot: Option<usize> },
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    /// `x + b` where `b` is a `1 x d` row broadcast over the rows of `x`.
    AddRow(VarId, VarId),
    /// `x * k` for a compile-time constant `k`.
    Scale(VarId, S),
    /// `x * s` where `s` is a `1 x 1` node.
    ScaleByScalar(VarId, VarId),
    Exp(VarId),
    Relu(VarId),
    Sigmoid(VarId),
    MatMul(VarId, VarId),
    ConcatCols(Vec<VarId>),
    GatherRows(VarId, Rc<Vec<usize>>),
    /// Max over each consecutive group of `group` rows, per column.
    GroupMaxRows(VarId, usize),
    /// Max over all rows, per column; yields `1 x d`.
    ColMax(VarId),
    /// Weighted 3-row interpolation per output row.
    InterpRows(VarId, Rc<InterpPlan<S>>),
    SoftmaxRows(VarId),
    /// `-sum_i log(p[i, target_i])` over probability rows.
    NllRows(VarId, Rc<Vec<usize>>),
    SumAll(VarId),
    MeanAll(VarId),
    /// Pairwise cosine similarity between rows of two matrices.
    CosineRows(VarId, VarId),
    /// Forward-only escape hatch: a value computed outside the op set.
    /// Backward through it fails by design, naming the primitive.
    External { name: String, inputs: Vec<VarId> },
}

/// Per-node cached auxiliaries for backward rules.
enum Aux<S> {
    None,
    /// Winning source-row index per output element (row-max family).
    ArgRows(Vec<usize>),
    /// Cached row norms of both cosine inputs.
    Norms { left: Vec<S>, right: Vec<S> },
}

struct Node<S> {
    op: Op<S>,
    value: DenseArray<S>,
    aux: Aux<S>,
}

/// Tape-based compute graph.
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a node.
    pub fn value(&self, id: VarId) -> &DenseArray<S> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op<S>, value: DenseArray<S>, aux: Aux<S>) -> VarId {
        self.nodes.push(Node { op, value, aux });
        VarId(self.nodes.len() - 1)
    }

    fn check(&self, id: VarId, op: &'static str) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::shape(op, format!("unknown var {}", id.0)));
        }
        Ok(())
    }

    /// Insert a non-trainable constant.
    pub fn constant(&mut self, value: DenseArray<S>) -> VarId {
        self.push(Op::Leaf { slot: None }, value, Aux::None)
    }

    /// Insert a trainable parameter by name; its gradient accumulates in
    /// the store during [`Graph::backward`].
    pub fn param(&mut self, store: &ParamStore<S>, name: &str) -> Result<VarId> {
        let slot = store.slot(name)?;
        let value = store.value_at(slot).clone();
        Ok(self.push(Op::Leaf { slot: Some(slot) }, value, Aux::None))
    }

    fn binary_same_shape(
        &mut self,
        op_name: &'static str,
        a: VarId,
        b: VarId,
        f: impl Fn(S, S) -> S,
        make: impl Fn(VarId, VarId) -> Op<S>,
    ) -> Result<VarId> {
        self.check(a, op_name)?;
        self.check(b, op_name)?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(Error::shape(
                op_name,
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = va
            .as_slice()
            .iter()
            .zip(vb.as_slice())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = DenseArray::new(va.rows(), va.cols(), data)?;
        Ok(self.push(make(a, b), value, Aux::None))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// `x + b` with `b` a `1 x d` row broadcast across rows of `x`.
    pub fn add_row(&mut self, x: VarId, b: VarId) -> Result<VarId> {
        self.check(x, "add_row")?;
        self.check(b, "add_row")?;
        let (vx, vb) = (&self.nodes[x.0].value, &self.nodes[b.0].value);
        if vb.rows() != 1 || vb.cols() != vx.cols() {
            return Err(Error::shape(
                "add_row",
                format!("x {:?} + row {:?}", vx.shape(), vb.shape()),
            ));
        }
        let cols = vx.cols();
        let mut data = vx.as_slice().to_vec();
        for r in 0..vx.rows() {
            for c in 0..cols {
                data[r * cols + c] += vb.as_slice()[c];
            }
        }
        let value = DenseArray::new(vx.rows(), cols, data)?;
        Ok(self.push(Op::AddRow(x, b), value, Aux::None))
    }

    pub fn scale(&mut self, x: VarId, k: S) -> Result<VarId> {
        self.check(x, "scale")?;
        let vx = &self.nodes[x.0].value;
        let data = vx.as_slice().iter().map(|&v| v * k).collect();
        let value = DenseArray::new(vx.rows(), vx.cols(), data)?;
        Ok(self.push(Op::Scale(x, k), value, Aux::None))
    }

    /// `x * s` where `s` is a `1 x 1` node (differentiable in both).
    pub fn scale_by_scalar(&mut self, x: VarId, s: VarId) -> Result<VarId> {
        self.check(x, "scale_by_scalar")?;
        self.check(s, "scale_by_scalar")?;
        let sv = self.nodes[s.0].value.item()?;
        let vx = &self.nodes[x.0].value;
        let data = vx.as_slice().iter().map(|&v| v * sv).collect();
        let value = DenseArray::new(vx.rows(), vx.cols(), data)?;
        Ok(self.push(Op::ScaleByScalar(x, s), value, Aux::None))
    }

    pub fn exp(&mut self, x: VarId) -> Result<VarId> {
        self.check(x, "exp")?;
        let vx = &self.nodes[x.0].value;
        let data = vx.as_slice().iter().map(|&v| v.exp()).collect();
        let value = DenseArray::new(vx.rows(), vx.cols(), data)?;
        Ok(self.push(Op::Exp(x), value, Aux::None))
    }

    pub fn relu(&mut self, x: VarId) -> Result<VarId> {
        self.check(x, "relu")?;
        let vx = &self.nodes[x.0].value;
        let z = S::zero();
        let data = vx.as_slice().iter().map(|&v| v.max(z)).collect();
        let value = DenseArray::new(vx.rows(), vx.cols(), data)?;
        Ok(self.push(Op::Relu(x), value, Aux::None))
    }

    pub fn sigmoid(&mut self, x: VarId) -> Result<VarId> {
        self.check(x, "sigmoid")?;
        let vx = &self.nodes[x.0].value;
        let one = S::one();
        let data = vx
            .as_slice()
            .iter()
            .map(|&v| {
                // Branch on sign for numerical stability at large |v|.
                if v >= S::zero() {
                    one / (one + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (one + e)
                }
            })
            .collect();
        let value = DenseArray::new(vx.rows(), vx.cols(), data)?;
        Ok(self.push(Op::Sigmoid(x), value, Aux::None))
    }

    /// Matrix product `a (n x k) * b (k x m) -> n x m`.
    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.check(a, "matmul")?;
        self.check(b, "matmul")?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.cols() != vb.rows() {
            return Err(Error::shape(
                "matmul",
                format!("{:?} * {:?}", va.shape(), vb.shape()),
            ));
        }
        let (n, k, m) = (va.rows(), va.cols(), vb.cols());
        let mut out = vec![S::zero(); n * m];
        matmul_accum(va.as_slice(), vb.as_slice(), &mut out, n, k, m);
        let value = DenseArray::new(n, m, out)?;
        Ok(self.push(Op::MatMul(a, b), value, Aux::None))
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "no inputs"));
        }
        for &p in parts {
            self.check(p, "concat_cols")?;
        }
        let rows = self.nodes[parts[0].0].value.rows();
        let mut total = 0usize;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            if v.rows() != rows {
                return Err(Error::shape(
                    "concat_cols",
                    format!("row counts differ: {} vs {}", rows, v.rows()),
                ));
            }
            total += v.cols();
        }
        let mut data = vec![S::zero(); rows * total];
        let mut col0 = 0usize;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            let c = v.cols();
            for r in 0..rows {
                data[r * total + col0..r * total + col0 + c]
                    .copy_from_slice(v.row_slice(r));
            }
            col0 += c;
        }
        let value = DenseArray::new(rows, total, data)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), value, Aux::None))
    }

    /// Select rows of `x` by index (repeats allowed).
    pub fn gather_rows(&mut self, x: VarId, indices: Rc<Vec<usize>>) -> Result<VarId> {
        self.check(x, "gather_rows")?;
        let vx = &self.nodes[x.0].value;
        let cols = vx.cols();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices.iter() {
            if i >= vx.rows() {
                return Err(Error::shape(
                    "gather_rows",
                    format!("row {} out of {}", i, vx.rows()),
                ));
            }
            data.extend_from_slice(vx.row_slice(i));
        }
        let value = DenseArray::new(indices.len(), cols, data)?;
        Ok(self.push(Op::GatherRows(x, indices), value, Aux::None))
    }

    /// Per-column max over each consecutive group of `group` rows.
    /// Input `(g * group) x d` -> output `g x d`. Ties keep the first row.
    pub fn group_max_rows(&mut self, x: VarId, group: usize) -> Result<VarId> {
        self.check(x, "group_max_rows")?;
        let vx = &self.nodes[x.0].value;
        if group == 0 || vx.rows() % group != 0 {
            return Err(Error::shape(
                "group_max_rows",
                format!("{} rows not divisible by group {}", vx.rows(), group),
            ));
        }
        let g = vx.rows() / group;
        let d = vx.cols();
        let mut out = vec![S::zero(); g * d];
        let mut args = vec![0usize; g * d];
        for gi in 0..g {
            let base = gi * group;
            for c in 0..d {
                let mut best = vx.get(base, c);
                let mut arg = base;
                for r in base + 1..base + group {
                    let v = vx.get(r, c);
                    if v > best {
                        best = v;
                        arg = r;
                    }
                }
                out[gi * d + c] = best;
                args[gi * d + c] = arg;
            }
        }
        let value = DenseArray::new(g, d, out)?;
        Ok(self.push(Op::GroupMaxRows(x, group), value, Aux::ArgRows(args)))
    }

    /// Per-column max over all rows: `n x d -> 1 x d`. Ties keep the first row.
    pub fn col_max(&mut self, x: VarId) -> Result<VarId> {
        self.check(x, "col_max")?;
        let vx = &self.nodes[x.0].value;
        if vx.rows() == 0 {
            return Err(Error::shape("col_max", "empty input"));
        }
        let d = vx.cols();
        let mut out = vec![S::zero(); d];
        let mut args = vec![0usize; d];
        for c in 0..d {
            let mut best = vx.get(0, c);
            let mut arg = 0usize;
            for r in 1..vx.rows() {
                let v = vx.get(r, c);
                if v > best {
                    best = v;
                    arg = r;
                }
            }
            out[c] = best;
            args[c] = arg;
        }
        let value = DenseArray::new(1, d, out)?;
        Ok(self.push(Op::ColMax(x), value, Aux::ArgRows(args)))
    }

    /// Weighted 3-row interpolation: `out[r] = sum_j w[r][j] * x[idx[r][j]]`.
    pub fn interp_rows(&mut self, x: VarId, plan: Rc<InterpPlan<S>>) -> Result<VarId> {
        self.check(x, "interp_rows")?;
        if plan.indices.len() != plan.weights.len() {
            return Err(Error::shape("interp_rows", "plan length mismatch"));
        }
        let vx = &self.nodes[x.0].value;
        let d = vx.cols();
        let mut data = vec![S::zero(); plan.indices.len() * d];
        for (r, (idx, w)) in plan.indices.iter().zip(&plan.weights).enumerate() {
            for j in 0..3 {
                if idx[j] >= vx.rows() {
                    return Err(Error::shape(
                        "interp_rows",
                        format!("row {} out of {}", idx[j], vx.rows()),
                    ));
                }
                let src = vx.row_slice(idx[j]);
                let dst = &mut data[r * d..(r + 1) * d];
                for c in 0..d {
                    dst[c] += w[j] * src[c];
                }
            }
        }
        let value = DenseArray::new(plan.indices.len(), d, data)?;
        Ok(self.push(Op::InterpRows(x, plan), value, Aux::None))
    }

    /// Row-wise softmax with max-shift stabilization.
    pub fn softmax_rows(&mut self, x: VarId) -> Result<VarId> {
        self.check(x, "softmax_rows")?;
        let vx = &self.nodes[x.0].value;
        if vx.cols() == 0 {
            return Err(Error::shape("softmax_rows", "zero columns"));
        }
        let (n, d) = vx.shape();
        let mut data = vec![S::zero(); n * d];
        for r in 0..n {
            let row = vx.row_slice(r);
            let mut m = row[0];
            for &v in &row[1..] {
                if v > m {
                    m = v;
                }
            }
            let out = &mut data[r * d..(r + 1) * d];
            let mut sum = S::zero();
            for c in 0..d {
                let e = (row[c] - m).exp();
                out[c] = e;
                sum += e;
            }
            for v in out.iter_mut() {
                *v /= sum;
            }
        }
        let value = DenseArray::new(n, d, data)?;
        Ok(self.push(Op::SoftmaxRows(x), value, Aux::None))
    }

    /// Negative log-likelihood over probability rows:
    /// `-sum_i log(p[i, t_i])`, with probabilities clamped at 1e-12.
    pub fn nll_rows(&mut self, p: VarId, targets: Rc<Vec<usize>>) -> Result<VarId> {
        self.check(p, "nll_rows")?;
        let vp = &self.nodes[p.0].value;
        if targets.len() != vp.rows() {
            return Err(Error::shape(
                "nll_rows",
                format!("{} targets for {} rows", targets.len(), vp.rows()),
            ));
        }
        let floor = S::from_f64(1e-12);
        let mut total = S::zero();
        let mut clamped = 0usize;
        for (r, &t) in targets.iter().enumerate() {
            if t >= vp.cols() {
                return Err(Error::shape(
                    "nll_rows",
                    format!("target {} out of {} classes", t, vp.cols()),
                ));
            }
            let mut v = vp.get(r, t);
            if v < floor {
                v = floor;
                clamped += 1;
            }
            total -= v.ln();
        }
        if clamped > 0 {
            log::warn!("nll_rows clamped {clamped} probabilities at 1e-12");
        }
        let value = DenseArray::scalar(total);
        Ok(self.push(Op::NllRows(p, targets), value, Aux::None))
    }

    pub fn sum_all(&mut self, x: VarId) -> Result<VarId> {
        self.check(x, "sum_all")?;
        let vx = &self.nodes[x.0].value;
        let total = vx.as_slice().iter().copied().sum();
        Ok(self.push(Op::SumAll(x), DenseArray::scalar(total), Aux::None))
    }

    pub fn mean_all(&mut self, x: VarId) -> Result<VarId> {
        self.check(x, "mean_all")?;
        let vx = &self.nodes[x.0].value;
        if vx.is_empty() {
            return Err(Error::shape("mean_all", "empty input"));
        }
        let total: S = vx.as_slice().iter().copied().sum();
        let mean = total / S::from_f64(vx.len() as f64);
        Ok(self.push(Op::MeanAll(x), DenseArray::scalar(mean), Aux::None))
    }

    /// Pairwise cosine similarity between rows: `a (n x d), b (m x d) -> n x m`.
    /// Errors if any row has norm <= 1e-12, identifying the offending row.
    pub fn cosine_rows(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.check(a, "cosine_rows")?;
        self.check(b, "cosine_rows")?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.cols() != vb.cols() {
            return Err(Error::shape(
                "cosine_rows",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let min_norm = S::from_f64(1e-12);
        let norm_of = |row: &[S]| -> S {
            row.iter().map(|&v| v * v).sum::<S>().sqrt()
        };
        let mut left = Vec::with_capacity(va.rows());
        for r in 0..va.rows() {
            let n = norm_of(va.row_slice(r));
            if n <= min_norm {
                return Err(Error::NonFinite(format!(
                    "cosine_rows: left row {r} has norm {:.3e}",
                    n.into_f64()
                )));
            }
            left.push(n);
        }
        let mut right = Vec::with_capacity(vb.rows());
        for r in 0..vb.rows() {
            let n = norm_of(vb.row_slice(r));
            if n <= min_norm {
                return Err(Error::NonFinite(format!(
                    "cosine_rows: right row {r} has norm {:.3e}",
                    n.into_f64()
                )));
            }
            right.push(n);
        }
        let (n, m, d) = (va.rows(), vb.rows(), va.cols());
        let mut data = vec![S::zero(); n * m];
        for i in 0..n {
            let pa = va.row_slice(i);
            for j in 0..m {
                let pb = vb.row_slice(j);
                let mut dot = S::zero();
                for c in 0..d {
                    dot += pa[c] * pb[c];
                }
                data[i * m + j] = dot / (left[i] * right[j]);
            }
        }
        let value = DenseArray::new(n, m, data)?;
        Ok(self.push(Op::CosineRows(a, b), value, Aux::Norms { left, right }))
    }

    /// Insert a value computed outside the differentiable op set.
    ///
    /// The node carries a forward value only; if the backward pass reaches
    /// it, differentiation fails with an error naming the primitive.
    pub fn external(&mut self, name: &str, inputs: &[VarId], value: DenseArray<S>) -> Result<VarId> {
        for &i in inputs {
            self.check(i, "external")?;
        }
        Ok(self.push(
            Op::External {
                name: name.to_string(),
                inputs: inputs.to_vec(),
            },
            value,
            Aux::None,
        ))
    }

    /// Reverse pass from a `1 x 1` loss node. Parameter gradients are
    /// accumulated into `store` (scaled by `loss_scale`), in fixed node
    /// order, so repeated runs produce bit-identical results.
    pub fn backward(&mut self, loss: VarId, store: &mut ParamStore<S>, loss_scale: S) -> Result<()> {
        self.check(loss, "backward")?;
        if self.nodes[loss.0].value.shape() != (1, 1) {
            return Err(Error::shape(
                "backward",
                format!("loss must be 1x1, got {:?}", self.nodes[loss.0].value.shape()),
            ));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<DenseArray<S>>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        grads[loss.0] = Some(DenseArray::scalar(loss_scale));

        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            // Split borrows: node by shared ref, gradients by index.
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf { slot } => {
                    if let Some(s) = *slot {
                        store.accumulate_grad_at(s, &gout)?;
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, a.0, &gout);
                    accumulate(&mut grads, b.0, &gout);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, a.0, &gout);
                    accumulate_scaled(&mut grads, b.0, &gout, -S::one());
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let ga = elementwise_mul(&gout, &self.nodes[b.0].value);
                    let gb = elementwise_mul(&gout, &self.nodes[a.0].value);
                    accumulate(&mut grads, a.0, &ga);
                    accumulate(&mut grads, b.0, &gb);
                }
                Op::AddRow(x, b) => {
                    let (x, b) = (*x, *b);
                    accumulate(&mut grads, x.0, &gout);
                    // Row-broadcast bias: gradient is the column sum.
                    let cols = gout.cols();
                    let mut gb = DenseArray::zeros(1, cols);
                    for r in 0..gout.rows() {
                        let src = gout.row_slice(r);
                        let dst = gb.as_mut_slice();
                        for c in 0..cols {
                            dst[c] += src[c];
                        }
                    }
                    accumulate(&mut grads, b.0, &gb);
                }
                Op::Scale(x, k) => {
                    accumulate_scaled(&mut grads, x.0, &gout, *k);
                }
                Op::ScaleByScalar(x, s) => {
                    let (x, s) = (*x, *s);
                    let sv = self.nodes[s.0].value.as_slice()[0];
                    accumulate_scaled(&mut grads, x.0, &gout, sv);
                    let vx = &self.nodes[x.0].value;
                    let mut ds = S::zero();
                    for (g, v) in gout.as_slice().iter().zip(vx.as_slice()) {
                        ds += *g * *v;
                    }
                    accumulate(&mut grads, s.0, &DenseArray::scalar(ds));
                }
                Op::Exp(x) => {
                    let gx = elementwise_mul(&gout, &node.value);
                    accumulate(&mut grads, x.0, &gx);
                }
                Op::Relu(x) => {
                    let x = *x;
                    let vx = &self.nodes[x.0].value;
                    let mut gx = gout.clone();
                    for (g, v) in gx.as_mut_slice().iter_mut().zip(vx.as_slice()) {
                        // Subgradient 0 at exactly 0.
                        if *v <= S::zero() {
                            *g = S::zero();
                        }
                    }
                    accumulate(&mut grads, x.0, &gx);
                }
                Op::Sigmoid(x) => {
                    let y = &node.value;
                    let mut gx = gout.clone();
                    for (g, &yv) in gx.as_mut_slice().iter_mut().zip(y.as_slice()) {
                        *g *= yv * (S::one() - yv);
                    }
                    accumulate(&mut grads, x.0, &gx);
                }
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let va = &self.nodes[a.0].value;
                    let vb = &self.nodes[b.0].value;
                    let (n2, k2, m2) = (va.rows(), va.cols(), vb.cols());
                    // dA = dC * B^T: transpose B once for contiguous access.
                    let bt = transpose(vb.as_slice(), k2, m2);
                    let mut ga = vec![S::zero(); n2 * k2];
                    matmul_accum(gout.as_slice(), &bt, &mut ga, n2, m2, k2);
                    accumulate(
                        &mut grads,
                        a.0,
                        &DenseArray::new(n2, k2, ga).expect("grad shape"),
                    );
                    // dB = A^T * dC.
                    let at = transpose(va.as_slice(), n2, k2);
                    let mut gb = vec![S::zero(); k2 * m2];
                    matmul_accum(&at, gout.as_slice(), &mut gb, k2, n2, m2);
                    accumulate(
                        &mut grads,
                        b.0,
                        &DenseArray::new(k2, m2, gb).expect("grad shape"),
                    );
                }
                Op::ConcatCols(parts) => {
                    let parts = parts.clone();
                    let rows = gout.rows();
                    let total = gout.cols();
                    let mut col0 = 0usize;
                    for p in parts {
                        let c = self.nodes[p.0].value.cols();
                        let mut gp = DenseArray::zeros(rows, c);
                        for r in 0..rows {
                            let src = &gout.row_slice(r)[col0..col0 + c];
                            gp.as_mut_slice()[r * c..(r + 1) * c].copy_from_slice(src);
                        }
                        accumulate(&mut grads, p.0, &gp);
                        col0 += c;
                        debug_assert!(col0 <= total);
                    }
                }
                Op::GatherRows(x, indices) => {
                    let x = *x;
                    let indices = indices.clone();
                    let src_rows = self.nodes[x.0].value.rows();
                    let cols = gout.cols();
                    let mut gx = DenseArray::zeros(src_rows, cols);
                    for (r, &i) in indices.iter().enumerate() {
                        let src = gout.row_slice(r);
                        let dst = &mut gx.as_mut_slice()[i * cols..(i + 1) * cols];
                        for c in 0..cols {
                            dst[c] += src[c];
                        }
                    }
                    accumulate(&mut grads, x.0, &gx);
                }
                Op::GroupMaxRows(x, group) => {
                    let (x, group) = (*x, *group);
                    debug_assert_eq!(self.nodes[x.0].value.rows(), gout.rows() * group);
                    let node = &self.nodes[idx];
                    let Aux::ArgRows(args) = &node.aux else {
                        unreachable!("max ops always cache argmax rows")
                    };
                    let cols = gout.cols();
                    let src_rows = self.nodes[x.0].value.rows();
                    let mut gx = DenseArray::zeros(src_rows, cols);
                    for (flat, &arg) in args.iter().enumerate() {
                        let c = flat % cols;
                        gx.as_mut_slice()[arg * cols + c] += gout.as_slice()[flat];
                    }
                    accumulate(&mut grads, x.0, &gx);
                }
                Op::ColMax(x) => {
                    let x = *x;
                    let Aux::ArgRows(args) = &node.aux else {
                        unreachable!("max ops always cache argmax rows")
                    };
                    let cols = gout.cols();
                    let src_rows = self.nodes[x.0].value.rows();
                    let mut gx = DenseArray::zeros(src_rows, cols);
                    for (flat, &arg) in args.iter().enumerate() {
                        let c = flat % cols;
                        gx.as_mut_slice()[arg * cols + c] += gout.as_slice()[flat];
                    }
                    accumulate(&mut grads, x.0, &gx);
                }
                Op::InterpRows(x, plan) => {
                    let x = *x;
                    let plan = plan.clone();
                    let cols = gout.cols();
                    let src_rows = self.nodes[x.0].value.rows();
                    let mut gx = DenseArray::zeros(src_rows, cols);
                    for (r, (idx, w)) in plan.indices.iter().zip(&plan.weights).enumerate() {
                        let src = gout.row_slice(r);
                        for j in 0..3 {
                            let dst =
                                &mut gx.as_mut_slice()[idx[j] * cols..(idx[j] + 1) * cols];
                            for c in 0..cols {
                                dst[c] += w[j] * src[c];
                            }
                        }
                    }
                    accumulate(&mut grads, x.0, &gx);
                }
                Op::SoftmaxRows(x) => {
                    let x = *x;
                    let y = &node.value;
                    let (n2, d2) = y.shape();
                    let mut gx = DenseArray::zeros(n2, d2);
                    for r in 0..n2 {
                        let yr = y.row_slice(r);
                        let gr = gout.row_slice(r);
                        let mut dot = S::zero();
                        for c in 0..d2 {
                            dot += yr[c] * gr[c];
                        }
                        let dst = &mut gx.as_mut_slice()[r * d2..(r + 1) * d2];
                        for c in 0..d2 {
                            dst[c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    accumulate(&mut grads, x.0, &gx);
                }
                Op::NllRows(p, targets) => {
                    let p = *p;
                    let targets = targets.clone();
                    let vp = &self.nodes[p.0].value;
                    let g = gout.as_slice()[0];
                    let floor = S::from_f64(1e-12);
                    let mut gp = DenseArray::zeros(vp.rows(), vp.cols());
                    for (r, &t) in targets.iter().enumerate() {
                        let v = vp.get(r, t).max(floor);
                        gp.set(r, t, -g / v);
                    }
                    accumulate(&mut grads, p.0, &gp);
                }
                Op::SumAll(x) => {
                    let g = gout.as_slice()[0];
                    let vx = &self.nodes[x.0].value;
                    let gx = DenseArray::full(vx.rows(), vx.cols(), g);
                    accumulate(&mut grads, x.0, &gx);
                }
                Op::MeanAll(x) => {
                    let x = *x;
                    let vx = &self.nodes[x.0].value;
                    let g = gout.as_slice()[0] / S::from_f64(vx.len() as f64);
                    let gx = DenseArray::full(vx.rows(), vx.cols(), g);
                    accumulate(&mut grads, x.0, &gx);
                }
                Op::CosineRows(a, b) => {
                    let (a, b) = (*a, *b);
                    let Aux::Norms { left, right } = &node.aux else {
                        unreachable!("cosine always caches norms")
                    };
                    let va = &self.nodes[a.0].value;
                    let vb = &self.nodes[b.0].value;
                    let f = &node.value;
                    let (n2, m2, d2) = (va.rows(), vb.rows(), va.cols());
                    let mut ga = DenseArray::zeros(n2, d2);
                    let mut gb = DenseArray::zeros(m2, d2);
                    // dF/da_i = (b_j / (|a_i||b_j|)) - F_ij * a_i / |a_i|^2
                    for i in 0..n2 {
                        let ar = va.row_slice(i);
                        let na = left[i];
                        for j in 0..m2 {
                            let g = gout.get(i, j);
                            if g == S::zero() {
                                continue;
                            }
                            let br = vb.row_slice(j);
                            let nb = right[j];
                            let fij = f.get(i, j);
                            let inv = S::one() / (na * nb);
                            let ga_row = &mut ga.as_mut_slice()[i * d2..(i + 1) * d2];
                            for c in 0..d2 {
                                ga_row[c] += g * (br[c] * inv - fij * ar[c] / (na * na));
                            }
                            let gb_row = &mut gb.as_mut_slice()[j * d2..(j + 1) * d2];
                            for c in 0..d2 {
                                gb_row[c] += g * (ar[c] * inv - fij * br[c] / (nb * nb));
                            }
                        }
                    }
                    accumulate(&mut grads, a.0, &ga);
                    accumulate(&mut grads, b.0, &gb);
                }
                Op::External { name, inputs } => {
                    return Err(Error::UnsupportedPrimitive(format!(
                        "{name} ({} inputs)",
                        inputs.len()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// `out += a * b` for row-major `a (n x k)`, `b (k x m)`, `out (n x m)`.
/// i-k-j loop order keeps the inner loop contiguous in both `b` and `out`.
fn matmul_accum<S: Scalar>(a: &[S], b: &[S], out: &mut [S], n: usize, k: usize, m: usize) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    debug_assert_eq!(out.len(), n * m);
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * m..(kk + 1) * m];
            for j in 0..m {
                orow[j] += aik * brow[j];
            }
        }
    }
}

fn transpose<S: Scalar>(x: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

fn elementwise_mul<S: Scalar>(a: &DenseArray<S>, b: &DenseArray<S>) -> DenseArray<S> {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| x * y)
        .collect();
    DenseArray::new(a.rows(), a.cols(), data).expect("same shape")
}

fn accumulate<S: Scalar>(grads: &mut [Option<DenseArray<S>>], idx: usize, g: &DenseArray<S>) {
    match &mut grads[idx] {
        Some(existing) => {
            for (e, v) in existing.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *e += *v;
            }
        }
        slot => *slot = Some(g.clone()),
    }
}

fn accumulate_scaled<S: Scalar>(
    grads: &mut [Option<DenseArray<S>>],
    idx: usize,
    g: &DenseArray<S>,
    k: S,
) {
    match &mut grads[idx] {
        Some(existing) => {
            for (e, v) in existing.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *e += *v * k;
            }
        }
        slot => {
            let data = g.as_slice().iter().map(|&v| v * k).collect();
            *slot = Some(DenseArray::new(g.rows(), g.cols(), data).expect("same shape"));
        }
    }
}
