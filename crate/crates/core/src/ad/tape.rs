//! Define-by-run reverse-mode differentiation over dense tensors.
//!
//! Every primitive evaluates eagerly and appends one node to the tape, so the
//! node list is topologically ordered by construction. [`Tape::backward`]
//! walks it once in reverse and leaves the tape untouched, so several roots
//! can be differentiated from the same recording.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Tensor};

static NEXT_TAPE_ID: AtomicUsize = AtomicUsize::new(1);

/// Handle to a value recorded on one specific [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct VarId {
    tape: usize,
    idx: usize,
}

impl VarId {
    /// Position of the node on its tape.
    pub fn index(self) -> usize {
        self.idx
    }
}

/// The differentiable primitives a tape can record.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Primitive {
    MatMul,
    Add,
    Subtract,
    Hadamard,
    Divide,
    ScalarScale,
    AddScalar,
    BroadcastAddRow,
    ScaleRows,
    Relu,
    SoftmaxRows,
    LogSoftmaxRows,
    Log,
    Exp,
    Square,
    Sqrt,
    Abs,
    Transpose,
    RowSelect,
    ReduceSum,
    ReduceMean,
    MaskedFill,
    ClampMin,
    ScatterSym,
}

impl Primitive {
    pub const ALL: [Primitive; 24] = [
        Primitive::MatMul,
        Primitive::Add,
        Primitive::Subtract,
        Primitive::Hadamard,
        Primitive::Divide,
        Primitive::ScalarScale,
        Primitive::AddScalar,
        Primitive::BroadcastAddRow,
        Primitive::ScaleRows,
        Primitive::Relu,
        Primitive::SoftmaxRows,
        Primitive::LogSoftmaxRows,
        Primitive::Log,
        Primitive::Exp,
        Primitive::Square,
        Primitive::Sqrt,
        Primitive::Abs,
        Primitive::Transpose,
        Primitive::RowSelect,
        Primitive::ReduceSum,
        Primitive::ReduceMean,
        Primitive::MaskedFill,
        Primitive::ClampMin,
        Primitive::ScatterSym,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Subtract => "subtract",
            Primitive::Hadamard => "hadamard",
            Primitive::Divide => "divide",
            Primitive::ScalarScale => "scalar-scale",
            Primitive::AddScalar => "add-scalar",
            Primitive::BroadcastAddRow => "broadcast-add-row",
            Primitive::ScaleRows => "scale-rows",
            Primitive::Relu => "relu",
            Primitive::SoftmaxRows => "softmax-rows",
            Primitive::LogSoftmaxRows => "log-softmax-rows",
            Primitive::Log => "log",
            Primitive::Exp => "exp",
            Primitive::Square => "square",
            Primitive::Sqrt => "sqrt",
            Primitive::Abs => "abs",
            Primitive::Transpose => "transpose",
            Primitive::RowSelect => "row-select",
            Primitive::ReduceSum => "reduce-sum",
            Primitive::ReduceMean => "reduce-mean",
            Primitive::MaskedFill => "masked-fill",
            Primitive::ClampMin => "clamp-min",
            Primitive::ScatterSym => "scatter-sym",
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Hadamard(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    BroadcastAddRow(usize, usize),
    ScaleRows(usize, usize),
    Relu(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    Log(usize),
    Exp(usize),
    Square(usize),
    Sqrt(usize),
    Abs(usize),
    Transpose(usize),
    RowSelect(usize, Arc<[usize]>),
    ReduceSum(usize),
    ReduceMean(usize),
    MaskedFill(usize, Arc<[bool]>),
    ClampMin(usize, f64),
    ScatterSym(usize, Arc<[(usize, usize)]>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A recording of eagerly evaluated tensor operations.
#[derive(Debug)]
pub struct Tape {
    id: usize,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar root, keyed by variable.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<usize, Tensor>,
}

impl Gradients {
    /// The gradient for `id`, or `None` when the root does not depend on it.
    pub fn get(&self, id: VarId) -> Option<&Tensor> {
        self.grads.get(&id.idx)
    }

    /// The gradient for `id`, materialising zeros when the root does not
    /// depend on it.
    pub fn get_or_zeros(&self, tape: &Tape, id: VarId) -> Tensor {
        match self.grads.get(&id.idx) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = tape.nodes[id.idx].value.shape();
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, id: VarId) -> Option<Tensor> {
        self.grads.remove(&id.idx)
    }
}

fn same_shape(op: Primitive, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op.name(), format!("{}x{} vs {}x{}", a.rows(), a.cols(), b.rows(), b.cols())));
    }
    Ok(())
}

fn accumulate(grads: &mut [Option<Tensor>], idx: usize, t: Tensor) {
    match &mut grads[idx] {
        Some(g) => g.add_assign(&t),
        slot @ None => *slot = Some(t),
    }
}

fn slot(grads: &mut [Option<Tensor>], idx: usize, shape: (usize, usize)) -> &mut Tensor {
    grads[idx].get_or_insert_with(|| Tensor::zeros(shape.0, shape.1))
}

impl Tape {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, id: VarId) -> Result<usize> {
        if id.tape != self.id || id.idx >= self.nodes.len() {
            return Err(Error::contract("variable does not belong to this tape"));
        }
        Ok(id.idx)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> VarId {
        let idx = self.nodes.len();
        self.nodes.push(Node { value, op, requires_grad });
        VarId { tape: self.id, idx }
    }

    fn rg(&self, idx: usize) -> bool {
        self.nodes[idx].requires_grad
    }

    /// A leaf whose gradient is reported by [`Tape::backward`].
    pub fn var(&mut self, value: Tensor) -> VarId {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that is never differentiated.
    pub fn constant(&mut self, value: Tensor) -> VarId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        debug_assert_eq!(id.tape, self.id);
        &self.nodes[id.idx].value
    }

    pub fn requires_grad(&self, id: VarId) -> bool {
        self.nodes[id.idx].requires_grad
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let value = self.nodes[ia].value.matmul(&self.nodes[ib].value)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(value, Op::MatMul(ia, ib), rg))
    }

    fn binary(
        &mut self,
        prim: Primitive,
        a: VarId,
        b: VarId,
        f: impl Fn(f64, f64) -> f64,
        op: fn(usize, usize) -> Op,
    ) -> Result<VarId> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        same_shape(prim, &self.nodes[ia].value, &self.nodes[ib].value)?;
        let value = self.nodes[ia].value.zip_map(&self.nodes[ib].value, f);
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(value, op(ia, ib), rg))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary(Primitive::Add, a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary(Primitive::Subtract, a, b, |x, y| x - y, Op::Sub)
    }

    pub fn hadamard(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary(Primitive::Hadamard, a, b, |x, y| x * y, Op::Hadamard)
    }

    /// Entrywise quotient; every denominator entry must be non-zero.
    pub fn div(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let ib = self.check(b)?;
        if self.nodes[ib].value.data().contains(&0.0) {
            return Err(Error::contract("divide: zero denominator"));
        }
        self.binary(Primitive::Divide, a, b, |x, y| x / y, Op::Div)
    }

    pub fn scale(&mut self, a: VarId, s: f64) -> Result<VarId> {
        let ia = self.check(a)?;
        let value = self.nodes[ia].value.scale(s);
        let rg = self.rg(ia);
        Ok(self.push(value, Op::Scale(ia, s), rg))
    }

    pub fn add_scalar(&mut self, a: VarId, s: f64) -> Result<VarId> {
        let ia = self.check(a)?;
        let value = self.nodes[ia].value.map(|x| x + s);
        let rg = self.rg(ia);
        Ok(self.push(value, Op::AddScalar(ia), rg))
    }

    /// `a + 1 rowᵀ`: adds the `1 × d` row to every row of the `n × d` input.
    pub fn broadcast_add_row(&mut self, a: VarId, row: VarId) -> Result<VarId> {
        let (ia, ir) = (self.check(a)?, self.check(row)?);
        let (av, rv) = (&self.nodes[ia].value, &self.nodes[ir].value);
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(Error::dim(
                Primitive::BroadcastAddRow.name(),
                format!("row {}x{} for input {}x{}", rv.rows(), rv.cols(), av.rows(), av.cols()),
            ));
        }
        let mut value = av.clone();
        for i in 0..value.rows() {
            for (x, b) in value.row_mut(i).iter_mut().zip(rv.data()) {
                *x += b;
            }
        }
        let rg = self.rg(ia) || self.rg(ir);
        Ok(self.push(value, Op::BroadcastAddRow(ia, ir), rg))
    }

    /// `diag(v) a`: multiplies row `i` of the `n × d` input by `v[i]`.
    pub fn scale_rows(&mut self, a: VarId, v: VarId) -> Result<VarId> {
        let (ia, iv) = (self.check(a)?, self.check(v)?);
        let (av, vv) = (&self.nodes[ia].value, &self.nodes[iv].value);
        if vv.cols() != 1 || vv.rows() != av.rows() {
            return Err(Error::dim(
                Primitive::ScaleRows.name(),
                format!("scale {}x{} for input {}x{}", vv.rows(), vv.cols(), av.rows(), av.cols()),
            ));
        }
        let mut value = av.clone();
        for i in 0..value.rows() {
            let s = vv.data()[i];
            value.row_mut(i).iter_mut().for_each(|x| *x *= s);
        }
        let rg = self.rg(ia) || self.rg(iv);
        Ok(self.push(value, Op::ScaleRows(ia, iv), rg))
    }

    fn unary(&mut self, a: VarId, f: impl Fn(f64) -> f64, op: fn(usize) -> Op) -> Result<VarId> {
        let ia = self.check(a)?;
        let value = self.nodes[ia].value.map(f);
        let rg = self.rg(ia);
        Ok(self.push(value, op(ia), rg))
    }

    /// `max(x, 0)`; the subgradient at 0 is taken as 0.
    pub fn relu(&mut self, a: VarId) -> Result<VarId> {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu)
    }

    pub fn softmax_rows(&mut self, a: VarId) -> Result<VarId> {
        let ia = self.check(a)?;
        let value = softmax_rows(&self.nodes[ia].value);
        let rg = self.rg(ia);
        Ok(self.push(value, Op::SoftmaxRows(ia), rg))
    }

    pub fn log_softmax_rows(&mut self, a: VarId) -> Result<VarId> {
        let ia = self.check(a)?;
        let value = log_softmax_rows(&self.nodes[ia].value);
        let rg = self.rg(ia);
        Ok(self.push(value, Op::LogSoftmaxRows(ia), rg))
    }

    /// Natural log; every entry must be strictly positive.
    pub fn log(&mut self, a: VarId) -> Result<VarId> {
        let ia = self.check(a)?;
        if self.nodes[ia].value.data().iter().any(|&x| x <= 0.0) {
            return Err(Error::contract("log: non-positive entry"));
        }
        self.unary(a, f64::ln, Op::Log)
    }

    pub fn exp(&mut self, a: VarId) -> Result<VarId> {
        self.unary(a, f64::exp, Op::Exp)
    }

    pub fn square(&mut self, a: VarId) -> Result<VarId> {
        self.unary(a, |x| x * x, Op::Square)
    }

    /// Entrywise square root; entries must be non-negative. The derivative at
    /// an exact zero is taken as 0.
    pub fn sqrt(&mut self, a: VarId) -> Result<VarId> {
        let ia = self.check(a)?;
        if self.nodes[ia].value.data().iter().any(|&x| x < 0.0) {
            return Err(Error::contract("sqrt: negative entry"));
        }
        self.unary(a, f64::sqrt, Op::Sqrt)
    }

    pub fn abs(&mut self, a: VarId) -> Result<VarId> {
        self.unary(a, f64::abs, Op::Abs)
    }

    pub fn transpose(&mut self, a: VarId) -> Result<VarId> {
        let ia = self.check(a)?;
        let value = self.nodes[ia].value.transpose();
        let rg = self.rg(ia);
        Ok(self.push(value, Op::Transpose(ia), rg))
    }

    /// Gathers the listed rows (repetition allowed).
    pub fn row_select(&mut self, a: VarId, rows: &[usize]) -> Result<VarId> {
        let ia = self.check(a)?;
        let n = self.nodes[ia].value.rows();
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::dim(Primitive::RowSelect.name(), format!("row {bad} out of {n}")));
        }
        let value = self.nodes[ia].value.select_rows(rows);
        let rg = self.rg(ia);
        Ok(self.push(value, Op::RowSelect(ia, rows.into()), rg))
    }

    pub fn reduce_sum(&mut self, a: VarId) -> Result<VarId> {
        let ia = self.check(a)?;
        let value = Tensor::scalar(self.nodes[ia].value.sum());
        let rg = self.rg(ia);
        Ok(self.push(value, Op::ReduceSum(ia), rg))
    }

    pub fn reduce_mean(&mut self, a: VarId) -> Result<VarId> {
        let ia = self.check(a)?;
        let t = &self.nodes[ia].value;
        if t.is_empty() {
            return Err(Error::dim(Primitive::ReduceMean.name(), "empty input"));
        }
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        let rg = self.rg(ia);
        Ok(self.push(value, Op::ReduceMean(ia), rg))
    }

    /// Replaces entries where `mask` is true by `fill`; masked entries carry
    /// no gradient.
    pub fn masked_fill(&mut self, a: VarId, mask: &[bool], fill: f64) -> Result<VarId> {
        let ia = self.check(a)?;
        let t = &self.nodes[ia].value;
        if mask.len() != t.len() {
            return Err(Error::dim(
                Primitive::MaskedFill.name(),
                format!("mask of {} for {} entries", mask.len(), t.len()),
            ));
        }
        let data = t.data().iter().zip(mask).map(|(&x, &m)| if m { fill } else { x }).collect();
        let value = Tensor::from_vec(t.rows(), t.cols(), data)?;
        let rg = self.rg(ia);
        Ok(self.push(value, Op::MaskedFill(ia, mask.into()), rg))
    }

    /// `max(x, lo)`; gradient flows only where `x > lo`.
    pub fn clamp_min(&mut self, a: VarId, lo: f64) -> Result<VarId> {
        let ia = self.check(a)?;
        let value = self.nodes[ia].value.map(|x| if x > lo { x } else { lo });
        let rg = self.rg(ia);
        Ok(self.push(value, Op::ClampMin(ia, lo), rg))
    }

    /// Builds the symmetric `n × n` matrix with `A[i][j] = A[j][i] = w[k]`
    /// for the k-th pair, zeros elsewhere.
    pub fn scatter_sym(&mut self, w: VarId, pairs: Arc<[(usize, usize)]>, n: usize) -> Result<VarId> {
        let iw = self.check(w)?;
        let wv = &self.nodes[iw].value;
        if wv.cols() != 1 || wv.rows() != pairs.len() {
            return Err(Error::dim(
                Primitive::ScatterSym.name(),
                format!("{}x{} weights for {} pairs", wv.rows(), wv.cols(), pairs.len()),
            ));
        }
        let mut value = Tensor::zeros(n, n);
        for (k, &(i, j)) in pairs.iter().enumerate() {
            if i >= n || j >= n || i == j {
                return Err(Error::dim(Primitive::ScatterSym.name(), format!("pair ({i},{j}) for n={n}")));
            }
            let x = wv.data()[k];
            value.set(i, j, x);
            value.set(j, i, x);
        }
        let rg = self.rg(iw);
        Ok(self.push(value, Op::ScatterSym(iw, pairs), rg))
    }

    /// Gradients of the scalar `root` with respect to every leaf created by
    /// [`Tape::var`] that the root depends on.
    pub fn backward(&self, root: VarId) -> Result<Gradients> {
        self.backward_retaining(root, &[])
    }

    /// Like [`Tape::backward`], additionally reporting the gradient of the
    /// listed intermediate nodes.
    pub fn backward_retaining(&self, root: VarId, keep: &[VarId]) -> Result<Gradients> {
        let r = self.check(root)?;
        if self.nodes[r].value.shape() != (1, 1) {
            let (a, b) = self.nodes[r].value.shape();
            return Err(Error::contract(format!("backward root must be 1x1, got {a}x{b}")));
        }
        let mut retain = vec![false; r + 1];
        for &k in keep {
            let ik = self.check(k)?;
            if ik <= r {
                retain[ik] = true;
            }
        }
        let mut grads: Vec<Option<Tensor>> = (0..=r).map(|_| None).collect();
        let mut out = Gradients::default();
        if !self.nodes[r].requires_grad {
            return Ok(out);
        }
        grads[r] = Some(Tensor::scalar(1.0));
        for idx in (0..=r).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) || retain[idx] {
                out.grads.insert(idx, g);
            }
        }
        Ok(out)
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |i: usize| &self.nodes[i].value;
        match node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(a) {
                    let dst = slot(grads, a, val(a).shape());
                    gemm(1.0, MatRef::normal(g), MatRef::transposed(val(b)), 1.0, dst);
                }
                if self.rg(b) {
                    let dst = slot(grads, b, val(b).shape());
                    gemm(1.0, MatRef::transposed(val(a)), MatRef::normal(g), 1.0, dst);
                }
            }
            Op::Add(a, b) => {
                if self.rg(a) {
                    accumulate(grads, a, g.clone());
                }
                if self.rg(b) {
                    accumulate(grads, b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.rg(a) {
                    accumulate(grads, a, g.clone());
                }
                if self.rg(b) {
                    accumulate(grads, b, g.scale(-1.0));
                }
            }
            Op::Hadamard(a, b) => {
                if self.rg(a) {
                    accumulate(grads, a, g.hadamard(val(b)));
                }
                if self.rg(b) {
                    accumulate(grads, b, g.hadamard(val(a)));
                }
            }
            Op::Div(a, b) => {
                if self.rg(a) {
                    accumulate(grads, a, g.zip_map(val(b), |gi, bi| gi / bi));
                }
                if self.rg(b) {
                    let q = g.zip_map(&node.value, |gi, oi| gi * oi);
                    accumulate(grads, b, q.zip_map(val(b), |x, bi| -x / bi));
                }
            }
            Op::Scale(a, s) => {
                if self.rg(a) {
                    accumulate(grads, a, g.scale(s));
                }
            }
            Op::AddScalar(a) => {
                if self.rg(a) {
                    accumulate(grads, a, g.clone());
                }
            }
            Op::BroadcastAddRow(a, row) => {
                if self.rg(a) {
                    accumulate(grads, a, g.clone());
                }
                if self.rg(row) {
                    let mut col_sums = Tensor::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (s, x) in col_sums.data_mut().iter_mut().zip(g.row(i)) {
                            *s += x;
                        }
                    }
                    accumulate(grads, row, col_sums);
                }
            }
            Op::ScaleRows(a, v) => {
                let vv = val(v);
                if self.rg(a) {
                    let mut da = g.clone();
                    for i in 0..da.rows() {
                        let s = vv.data()[i];
                        da.row_mut(i).iter_mut().for_each(|x| *x *= s);
                    }
                    accumulate(grads, a, da);
                }
                if self.rg(v) {
                    let av = val(a);
                    let dv = Tensor::column(
                        (0..g.rows()).map(|i| g.row(i).iter().zip(av.row(i)).map(|(x, y)| x * y).sum()).collect(),
                    );
                    accumulate(grads, v, dv);
                }
            }
            Op::Relu(a) => {
                if self.rg(a) {
                    accumulate(grads, a, g.zip_map(val(a), |gi, x| if x > 0.0 { gi } else { 0.0 }));
                }
            }
            Op::SoftmaxRows(a) => {
                if self.rg(a) {
                    let s = &node.value;
                    let mut da = Tensor::zeros(g.rows(), g.cols());
                    for i in 0..g.rows() {
                        let dot: f64 = g.row(i).iter().zip(s.row(i)).map(|(x, y)| x * y).sum();
                        for ((d, gi), si) in da.row_mut(i).iter_mut().zip(g.row(i)).zip(s.row(i)) {
                            *d = si * (gi - dot);
                        }
                    }
                    accumulate(grads, a, da);
                }
            }
            Op::LogSoftmaxRows(a) => {
                if self.rg(a) {
                    let ls = &node.value;
                    let mut da = Tensor::zeros(g.rows(), g.cols());
                    for i in 0..g.rows() {
                        let total: f64 = g.row(i).iter().sum();
                        for ((d, gi), li) in da.row_mut(i).iter_mut().zip(g.row(i)).zip(ls.row(i)) {
                            *d = gi - li.exp() * total;
                        }
                    }
                    accumulate(grads, a, da);
                }
            }
            Op::Log(a) => {
                if self.rg(a) {
                    accumulate(grads, a, g.zip_map(val(a), |gi, x| gi / x));
                }
            }
            Op::Exp(a) => {
                if self.rg(a) {
                    accumulate(grads, a, g.hadamard(&node.value));
                }
            }
            Op::Square(a) => {
                if self.rg(a) {
                    accumulate(grads, a, g.zip_map(val(a), |gi, x| 2.0 * x * gi));
                }
            }
            Op::Sqrt(a) => {
                if self.rg(a) {
                    accumulate(grads, a, g.zip_map(&node.value, |gi, r| if r > 0.0 { gi / (2.0 * r) } else { 0.0 }));
                }
            }
            Op::Abs(a) => {
                if self.rg(a) {
                    accumulate(
                        grads,
                        a,
                        g.zip_map(val(a), |gi, x| {
                            if x > 0.0 {
                                gi
                            } else if x < 0.0 {
                                -gi
                            } else {
                                0.0
                            }
                        }),
                    );
                }
            }
            Op::Transpose(a) => {
                if self.rg(a) {
                    accumulate(grads, a, g.transpose());
                }
            }
            Op::RowSelect(a, ref rows) => {
                if self.rg(a) {
                    let dst = slot(grads, a, val(a).shape());
                    for (k, &r) in rows.iter().enumerate() {
                        for (d, x) in dst.row_mut(r).iter_mut().zip(g.row(k)) {
                            *d += x;
                        }
                    }
                }
            }
            Op::ReduceSum(a) => {
                if self.rg(a) {
                    let (r, c) = val(a).shape();
                    accumulate(grads, a, Tensor::filled(r, c, g.item()));
                }
            }
            Op::ReduceMean(a) => {
                if self.rg(a) {
                    let (r, c) = val(a).shape();
                    accumulate(grads, a, Tensor::filled(r, c, g.item() / (r * c) as f64));
                }
            }
            Op::MaskedFill(a, ref mask) => {
                if self.rg(a) {
                    let (r, c) = g.shape();
                    let data = g.data().iter().zip(mask.iter()).map(|(&x, &m)| if m { 0.0 } else { x }).collect();
                    accumulate(grads, a, Tensor::from_vec(r, c, data).expect("shape preserved"));
                }
            }
            Op::ClampMin(a, lo) => {
                if self.rg(a) {
                    accumulate(grads, a, g.zip_map(val(a), |gi, x| if x > lo { gi } else { 0.0 }));
                }
            }
            Op::ScatterSym(w, ref pairs) => {
                if self.rg(w) {
                    let dw = Tensor::column(pairs.iter().map(|&(i, j)| g.get(i, j) + g.get(j, i)).collect());
                    accumulate(grads, w, dw);
                }
            }
        }
    }
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for x in row.iter_mut() {
            *x = (*x - m).exp();
            total += *x;
        }
        row.iter_mut().for_each(|x| *x /= total);
    }
    out
}

/// Numerically stable row-wise log-softmax.
pub fn log_softmax_rows(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|x| *x -= lse);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let i2 = tape.constant(Tensor::eye(2));
        let m = Tensor::from_rows(&[vec![1.5, -2.0], vec![0.25, 4.0]]).unwrap();
        let mv = tape.constant(m.clone());
        let out = tape.matmul(i2, mv).unwrap();
        assert_eq!(tape.value(out), &m);
    }

    #[test]
    fn relu_and_softmax_values() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![-1.0, 2.0]]).unwrap());
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 2.0]);
        let z = tape.constant(Tensor::zeros(1, 2));
        let s = tape.softmax_rows(z).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn square_sum_gradient() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::scalar(3.0));
        let sq = tape.square(x).unwrap();
        let root = tape.reduce_sum(sq).unwrap();
        let g = tape.backward(root).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::zeros(2, 1));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn foreign_variable_rejected() {
        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        let x = t1.var(Tensor::scalar(1.0));
        assert!(t2.exp(x).is_err());
    }

    #[test]
    fn dimension_errors_name_primitive() {
        let mut tape = Tape::new();
        let a = tape.var(Tensor::zeros(2, 3));
        let b = tape.var(Tensor::zeros(3, 2));
        match tape.add(a, b) {
            Err(Error::Dimension { op, .. }) => assert_eq!(op, "add"),
            other => panic!("expected dimension error, got {other:?}"),
        }
        match tape.matmul(a, a) {
            Err(Error::Dimension { op, .. }) => assert_eq!(op, "matmul"),
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn tape_reusable_for_second_root() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::column(vec![1.0, 2.0]));
        let s = tape.reduce_sum(x).unwrap();
        let sq = tape.square(x).unwrap();
        let q = tape.reduce_sum(sq).unwrap();
        let len = tape.len();
        let g1 = tape.backward(s).unwrap();
        let g2 = tape.backward(q).unwrap();
        assert_eq!(tape.len(), len);
        assert_eq!(g1.get(x).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(g2.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn fused_cross_entropy_gradient_is_softmax_minus_onehot() {
        let z = Tensor::from_rows(&[vec![0.3, -1.2, 2.0]]).unwrap();
        let onehot = Tensor::from_rows(&[vec![0.0, 1.0, 0.0]]).unwrap();
        let mut tape = Tape::new();
        let zv = tape.var(z.clone());
        let y = tape.constant(onehot.clone());
        let ls = tape.log_softmax_rows(zv).unwrap();
        let prod = tape.hadamard(ls, y).unwrap();
        let s = tape.reduce_sum(prod).unwrap();
        let loss = tape.scale(s, -1.0).unwrap();
        let g = tape.backward(loss).unwrap();
        let want = softmax_rows(&z).sub(&onehot);
        for (a, b) in g.get(zv).unwrap().data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn sqrt_at_zero_has_zero_derivative() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::column(vec![0.0, 4.0]));
        let r = tape.sqrt(x).unwrap();
        let s = tape.reduce_sum(r).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.25]);
    }

    #[test]
    fn error_contracts_fire_before_non_finite_values() {
        let mut tape = Tape::new();
        let z = tape.var(Tensor::column(vec![0.0, 1.0]));
        assert!(tape.log(z).is_err());
        assert!(tape.div(z, z).is_err());
        let neg = tape.var(Tensor::scalar(-1.0));
        assert!(tape.sqrt(neg).is_err());
    }

    #[test]
    fn scatter_sym_builds_symmetric_matrix() {
        let mut tape = Tape::new();
        let w = tape.var(Tensor::column(vec![0.7]));
        let a = tape.scatter_sym(w, Arc::from(vec![(0, 1)]), 3).unwrap();
        let v = tape.value(a);
        assert_eq!(v.get(0, 1), 0.7);
        assert_eq!(v.get(1, 0), 0.7);
        assert_eq!(v.sum(), 1.4);
    }
}
