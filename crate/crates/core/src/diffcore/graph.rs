//! Tape of tensor operations with a reverse sweep.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and the backward pass walks it from the loss down.
//! Parameter leaves are read through a borrowed [`ParamSet`]; nothing is
//! copied out of it.

use super::{DiffError, Gradients, ParamId, ParamSet, SparseRows, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Handle to a constant sparse matrix registered on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SparseId(usize);

#[derive(Clone, Debug)]
enum Op {
    Param(ParamId),
    Constant,
    Affine { x: Var, w: Var, b: Option<Var> },
    SparseAffine { x: SparseId, w: Var, b: Option<Var> },
    RowWeightedSum { a: Var, weights: SparseId },
    GatherRows { a: Var, index: Vec<usize> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    ClampMin(Var, f64),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Param(_) | Op::Constant => vec![],
            Op::Affine { x, w, b } => [Some(*x), Some(*w), *b].into_iter().flatten().collect(),
            Op::SparseAffine { w, b, .. } => [Some(*w), *b].into_iter().flatten().collect(),
            Op::RowWeightedSum { a, .. } | Op::GatherRows { a, .. } => vec![*a],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::ClampMin(a, _)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sqrt(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumRows(a) => vec![*a],
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Param(_) => "param",
            Op::Constant => "constant",
            Op::Affine { .. } => "affine",
            Op::SparseAffine { .. } => "sparse_affine",
            Op::RowWeightedSum { .. } => "row_weighted_sum",
            Op::GatherRows { .. } => "gather_rows",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Tanh(_) => "tanh",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Sqrt(_) => "sqrt",
            Op::ClampMin(..) => "clamp_min",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumRows(_) => "sum_rows",
        }
    }
}

struct Node {
    op: Op,
    value: Option<Tensor>,
    needs_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    sparse: Vec<SparseRows>,
    param_nodes: Vec<Option<Var>>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            sparse: Vec::new(),
            param_nodes: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(id) => self.params.get(id),
            _ => node.value.as_ref().expect("non-parameter nodes carry a value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Leaf for a parameter tensor. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Constant,
            value: Some(t),
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn sparse(&mut self, m: SparseRows) -> SparseId {
        self.sparse.push(m);
        SparseId(self.sparse.len() - 1)
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<Var, DiffError> {
        if !value.is_finite() {
            return Err(DiffError::NonFinite { op: op.name() });
        }
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            op,
            value: Some(value),
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn check_bias(&self, op: &'static str, b: Option<Var>, out: usize) -> Result<(), DiffError> {
        if let Some(b) = b {
            let bt = self.value(b);
            if bt.len() != out {
                return Err(DiffError::shape(op, &[out], bt.shape()));
            }
        }
        Ok(())
    }

    /// `x · w + b` with `x: [n, in]`, `w: [in, out]`, `b: [out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, DiffError> {
        let (xt, wt) = (self.value(x), self.value(w));
        let (n, k) = (xt.rows(), xt.cols());
        if wt.shape().len() != 2 || wt.shape()[0] != k {
            return Err(DiffError::shape("affine", xt.shape(), wt.shape()));
        }
        let m = wt.shape()[1];
        self.check_bias("affine", b, m)?;
        let mut out = Tensor::zeros(&[n, m]);
        let wd = wt.data();
        for i in 0..n {
            let xr = xt.row(i);
            let orow = out.row_mut(i);
            if let Some(b) = b {
                orow.copy_from_slice(self.value(b).data());
            }
            for (kk, &xv) in xr.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                let wr = &wd[kk * m..(kk + 1) * m];
                for (o, &wv) in orow.iter_mut().zip(wr) {
                    *o += xv * wv;
                }
            }
        }
        self.push(Op::Affine { x, w, b }, out)
    }

    /// Same as [`Graph::affine`] with a constant sparse left operand.
    pub fn sparse_affine(
        &mut self,
        x: SparseId,
        w: Var,
        b: Option<Var>,
    ) -> Result<Var, DiffError> {
        let xs = &self.sparse[x.0];
        let wt = self.value(w);
        if wt.shape().len() != 2 || wt.shape()[0] != xs.cols() {
            return Err(DiffError::shape(
                "sparse_affine",
                &[xs.rows(), xs.cols()],
                wt.shape(),
            ));
        }
        let m = wt.shape()[1];
        self.check_bias("sparse_affine", b, m)?;
        let mut out = Tensor::zeros(&[xs.rows(), m]);
        let wd = wt.data();
        for i in 0..xs.rows() {
            let orow = out.row_mut(i);
            if let Some(b) = b {
                orow.copy_from_slice(self.value(b).data());
            }
            for (c, xv) in xs.row(i) {
                let wr = &wd[c * m..(c + 1) * m];
                for (o, &wv) in orow.iter_mut().zip(wr) {
                    *o += xv * wv;
                }
            }
        }
        self.push(Op::SparseAffine { x, w, b }, out)
    }

    /// Per-row weighted sum `out[r] = Σ_c weights[r, c] · a[r, c]`; output is `[rows, 1]`.
    pub fn row_weighted_sum(&mut self, a: Var, weights: SparseId) -> Result<Var, DiffError> {
        let at = self.value(a);
        let ws = &self.sparse[weights.0];
        if ws.rows() != at.rows() || ws.cols() != at.cols() {
            return Err(DiffError::shape(
                "row_weighted_sum",
                at.shape(),
                &[ws.rows(), ws.cols()],
            ));
        }
        let mut out = Tensor::zeros(&[at.rows(), 1]);
        for r in 0..at.rows() {
            let ar = at.row(r);
            out.data_mut()[r] = ws.row(r).map(|(c, w)| w * ar[c]).sum();
        }
        self.push(Op::RowWeightedSum { a, weights }, out)
    }

    /// Selects rows of `a` (repetition allowed).
    pub fn gather_rows(&mut self, a: Var, index: Vec<usize>) -> Result<Var, DiffError> {
        let at = self.value(a);
        let c = at.cols();
        let mut out = Tensor::zeros(&[index.len(), c]);
        for (i, &r) in index.iter().enumerate() {
            if r >= at.rows() {
                return Err(DiffError::IndexOutOfRange {
                    index: r,
                    bound: at.rows(),
                });
            }
            out.row_mut(i).copy_from_slice(at.row(r));
        }
        self.push(Op::GatherRows { a, index }, out)
    }

    fn binary(
        &mut self,
        op: Op,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var, DiffError> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() != bt.shape() {
            return Err(DiffError::shape(op.name(), at.shape(), bt.shape()));
        }
        let data = at.data().iter().zip(bt.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_vec(at.shape(), data)?;
        self.push(op, out)
    }

    fn unary(&mut self, op: Op, a: Var, f: impl Fn(f64) -> f64) -> Result<Var, DiffError> {
        let at = self.value(a);
        let data = at.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::from_vec(at.shape(), data)?;
        self.push(op, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(Op::Sub(a, b), a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(Op::Mul(a, b), a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(Op::Div(a, b), a, b, |x, y| x / y)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, DiffError> {
        self.unary(Op::Scale(a, s), a, |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var, DiffError> {
        self.unary(Op::AddScalar(a), a, |x| x + s)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(Op::Tanh(a), a, f64::tanh)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(Op::Exp(a), a, f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(Op::Log(a), a, f64::ln)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(Op::Sqrt(a), a, f64::sqrt)
    }

    /// `max(a, floor)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var, DiffError> {
        self.unary(Op::ClampMin(a, floor), a, |x| x.max(floor))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var, DiffError> {
        let at = self.value(a);
        let mut out = at.clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        self.push(Op::Softmax(a), out)
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var, DiffError> {
        let at = self.value(a);
        let mut out = at.clone();
        for r in 0..out.rows() {
            log_softmax_in_place(out.row_mut(r));
        }
        self.push(Op::LogSoftmax(a), out)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, DiffError> {
        let s = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, DiffError> {
        let at = self.value(a);
        let s = at.data().iter().sum::<f64>() / at.len() as f64;
        self.push(Op::Mean(a), Tensor::scalar(s))
    }

    /// Sum over columns, giving `[rows, 1]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var, DiffError> {
        let at = self.value(a);
        let data = (0..at.rows()).map(|r| at.row(r).iter().sum()).collect();
        let out = Tensor::from_vec(&[at.rows(), 1], data)?;
        self.push(Op::SumRows(a), out)
    }

    /// Reverse sweep from a scalar node. Gradient buffers are created fresh
    /// on every call.
    pub fn backward(&self, loss: Var) -> Result<Gradients, DiffError> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(DiffError::NonScalarLoss {
                shape: lt.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(lt.shape(), 1.0));
        let mut out = Gradients::zeros_like(self.params);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let gd = g.data();
            match &node.op {
                Op::Param(id) => out.get_mut(*id).add_assign(&g),
                Op::Constant => {}
                Op::Affine { x, w, b } => {
                    let (xt, wt) = (self.value(*x), self.value(*w));
                    let (n, k, m) = (xt.rows(), xt.cols(), wt.shape()[1]);
                    let wd = wt.data();
                    if self.nodes[x.0].needs_grad {
                        let gx = slot(&mut grads, *x, xt.shape());
                        for r in 0..n {
                            let gr = g.row(r);
                            let gxr = gx.row_mut(r);
                            for (kk, dst) in gxr.iter_mut().enumerate() {
                                let wr = &wd[kk * m..(kk + 1) * m];
                                *dst += dot(gr, wr);
                            }
                        }
                    }
                    if self.nodes[w.0].needs_grad {
                        let gw = slot(&mut grads, *w, wt.shape());
                        let gwd = gw.data_mut();
                        for r in 0..n {
                            let gr = g.row(r);
                            for (kk, &xv) in xt.row(r).iter().enumerate() {
                                if xv == 0.0 {
                                    continue;
                                }
                                axpy(xv, gr, &mut gwd[kk * m..(kk + 1) * m]);
                            }
                        }
                        debug_assert_eq!(gwd.len(), k * m);
                    }
                    if let Some(b) = b {
                        let bshape = self.value(*b).shape().to_vec();
                        let gb = slot(&mut grads, *b, &bshape);
                        for r in 0..n {
                            axpy(1.0, g.row(r), gb.data_mut());
                        }
                    }
                }
                Op::SparseAffine { x, w, b } => {
                    let xs = &self.sparse[x.0];
                    let wt = self.value(*w);
                    let m = wt.shape()[1];
                    {
                        let gw = slot(&mut grads, *w, wt.shape());
                        let gwd = gw.data_mut();
                        for r in 0..xs.rows() {
                            let gr = g.row(r);
                            for (c, xv) in xs.row(r) {
                                axpy(xv, gr, &mut gwd[c * m..(c + 1) * m]);
                            }
                        }
                    }
                    if let Some(b) = b {
                        let bshape = self.value(*b).shape().to_vec();
                        let gb = slot(&mut grads, *b, &bshape);
                        for r in 0..xs.rows() {
                            axpy(1.0, g.row(r), gb.data_mut());
                        }
                    }
                }
                Op::RowWeightedSum { a, weights } => {
                    let ws = &self.sparse[weights.0];
                    let ga = slot(&mut grads, *a, self.value(*a).shape());
                    for r in 0..ws.rows() {
                        let gr = g.data()[r];
                        let row = ga.row_mut(r);
                        for (c, w) in ws.row(r) {
                            row[c] += w * gr;
                        }
                    }
                }
                Op::GatherRows { a, index } => {
                    let ga = slot(&mut grads, *a, self.value(*a).shape());
                    for (i, &r) in index.iter().enumerate() {
                        axpy(1.0, g.row(i), ga.row_mut(r));
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut grads, self.nodes[a.0].needs_grad, *a, self.value(*a).shape(), |j| gd[j]);
                    acc(&mut grads, self.nodes[b.0].needs_grad, *b, self.value(*b).shape(), |j| gd[j]);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, self.nodes[a.0].needs_grad, *a, self.value(*a).shape(), |j| gd[j]);
                    acc(&mut grads, self.nodes[b.0].needs_grad, *b, self.value(*b).shape(), |j| -gd[j]);
                }
                Op::Mul(a, b) => {
                    let (at, bt) = (self.value(*a).data(), self.value(*b).data());
                    acc(&mut grads, self.nodes[a.0].needs_grad, *a, self.value(*a).shape(), |j| gd[j] * bt[j]);
                    acc(&mut grads, self.nodes[b.0].needs_grad, *b, self.value(*b).shape(), |j| gd[j] * at[j]);
                }
                Op::Div(a, b) => {
                    let (at, bt) = (self.value(*a).data(), self.value(*b).data());
                    acc(&mut grads, self.nodes[a.0].needs_grad, *a, self.value(*a).shape(), |j| gd[j] / bt[j]);
                    acc(&mut grads, self.nodes[b.0].needs_grad, *b, self.value(*b).shape(), |j| -gd[j] * at[j] / (bt[j] * bt[j]));
                }
                Op::Scale(a, s) => acc(&mut grads, self.nodes[a.0].needs_grad, *a, self.value(*a).shape(), |j| gd[j] * s),
                Op::AddScalar(a) => acc(&mut grads, self.nodes[a.0].needs_grad, *a, self.value(*a).shape(), |j| gd[j]),
                Op::Tanh(a) => {
                    let y = node.value.as_ref().unwrap().data();
                    acc(&mut grads, self.nodes[a.0].needs_grad, *a, self.value(*a).shape(), |j| gd[j] * (1.0 - y[j] * y[j]));
                }
                Op::Exp(a) => {
                    let y = node.value.as_ref().unwrap().data();
                    acc(&mut grads, self.nodes[a.0].needs_grad, *a, self.value(*a).shape(), |j| gd[j] * y[j]);
                }
                Op::Log(a) => {
                    let x = self.value(*a).data();
                    acc(&mut grads, self.nodes[a.0].needs_grad, *a, self.value(*a).shape(), |j| gd[j] / x[j]);
                }
                Op::Sqrt(a) => {
                    let y = node.value.as_ref().unwrap().data();
                    acc(&mut grads, self.nodes[a.0].needs_grad, *a, self.value(*a).shape(), |j| 0.5 * gd[j] / y[j]);
                }
                Op::ClampMin(a, floor) => {
                    let x = self.value(*a).data();
                    acc(&mut grads, self.nodes[a.0].needs_grad, *a, self.value(*a).shape(), |j| if x[j] >= *floor { gd[j] } else { 0.0 });
                }
                Op::Softmax(a) => {
                    let y = node.value.as_ref().unwrap();
                    let ga = slot(&mut grads, *a, y.shape());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let inner = dot(yr, gr);
                        for ((dst, &yv), &gv) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *dst += yv * (gv - inner);
                        }
                    }
                }
                Op::LogSoftmax(a) => {
                    let y = node.value.as_ref().unwrap();
                    let ga = slot(&mut grads, *a, y.shape());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let total: f64 = gr.iter().sum();
                        for ((dst, &yv), &gv) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *dst += gv - yv.exp() * total;
                        }
                    }
                }
                Op::Sum(a) => {
                    let gv = g.item();
                    acc(&mut grads, self.nodes[a.0].needs_grad, *a, self.value(*a).shape(), |_j| gv);
                }
                Op::Mean(a) => {
                    let gv = g.item() / self.value(*a).len() as f64;
                    acc(&mut grads, self.nodes[a.0].needs_grad, *a, self.value(*a).shape(), |_j| gv);
                }
                Op::SumRows(a) => {
                    let at = self.value(*a);
                    let c = at.cols();
                    acc(&mut grads, self.nodes[a.0].needs_grad, *a, self.value(*a).shape(), |j| gd[j / c]);
                }
            }
        }
        Ok(out)
    }
}

fn slot<'g>(grads: &'g mut [Option<Tensor>], v: Var, shape: &[usize]) -> &'g mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
}

/// Adds `f(j)` into element `j` of the gradient slot of `v`.
fn acc(
    grads: &mut [Option<Tensor>],
    enabled: bool,
    v: Var,
    shape: &[usize],
    f: impl Fn(usize) -> f64,
) {
    if !enabled {
        return;
    }
    let t = slot(grads, v, shape);
    for (j, dst) in t.data_mut().iter_mut().enumerate() {
        *dst += f(j);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub(crate) fn log_softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for v in row.iter_mut() {
        *v -= lse;
    }
}
