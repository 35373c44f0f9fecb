use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use super::dense::{gemm, gemm_nt, gemm_tn, log_softmax_rows, softmax_rows};
use super::{Float, ParamId, ParamStore, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Layer-norm denominator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum NormDenom {
    /// σ + ε
    #[default]
    SigmaPlusEps,
    /// sqrt(σ² + ε)
    SqrtVarEps,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    DivCol(Var, Var),
    Scale(Var, T),
    MulScalar(Var, Var),
    Relu(Var),
    EluPlusOne(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        centered: Tensor<T>,
        denom: Vec<T>,
        dsig: Vec<T>,
    },
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    RowSum(Var),
    Sum(Var),
    SegmentSumRows(Var, usize),
    CrossEntropy {
        logits: Var,
        probs: Tensor<T>,
        targets: Vec<usize>,
        weights: Vec<T>,
        norm: T,
    },
    LinearScan(Var, Var),
    LinearAttn {
        q: Var,
        k: Var,
        v: Var,
        causal: bool,
        den: Vec<T>,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | MatMulNT(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) | MulRow(a, b) | MulCol(a, b)
            | DivCol(a, b) | MulScalar(a, b) | LinearScan(a, b) => vec![*a, *b],
            Transpose(a) | Scale(a, _) | Relu(a) | EluPlusOne(a) | Softmax(a) | LogSoftmax(a) | SliceRows(a, _)
            | SliceCols(a, _) | GatherRows(a, _) | Reshape(a) | RowSum(a) | Sum(a) | SegmentSumRows(a, _) => vec![*a],
            LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            ConcatRows(v) | ConcatCols(v) => v.clone(),
            CrossEntropy { logits, .. } => vec![*logits],
            LinearAttn { q, k, v, .. } => vec![*q, *k, *v],
        }
    }
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    tracked: bool,
}

/// Eager reverse-mode tape. Every operation evaluates immediately and, when
/// gradients are enabled and an input is tracked, records its adjoint rule.
pub struct Tape<T: Float = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    grad: bool,
    bound: RefCell<HashMap<ParamId, Var>>,
    floor_hits: Cell<usize>,
}

/// Result of [`Tape::backward`].
pub struct Grads<T> {
    vars: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamId, Tensor<T>>,
}

impl<T: Float> Grads<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.vars.get(v.0).and_then(|g| g.as_ref())
    }
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }
    pub fn params(&self) -> &HashMap<ParamId, Tensor<T>> {
        &self.params
    }
    pub fn into_params(self) -> HashMap<ParamId, Tensor<T>> {
        self.params
    }
}

const CE_FLOOR: f64 = 1e-9;

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    /// Tape that records gradients.
    pub fn new() -> Self {
        Self::build(true)
    }

    /// Forward-only tape; nothing is retained for backward.
    pub fn inference() -> Self {
        Self::build(false)
    }

    fn build(grad: bool) -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grad,
            bound: RefCell::new(HashMap::new()),
            floor_hits: Cell::new(0),
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of cross-entropy targets whose probability was floored.
    pub fn floor_hits(&self) -> usize {
        self.floor_hits.get()
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = self.nodes.borrow();
        (n[v.0].value.rows(), n[v.0].value.cols())
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].tracked
    }

    fn leaf(&self, value: Tensor<T>, tracked: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            tracked: tracked && self.grad,
        });
        Var(nodes.len() - 1)
    }

    fn push(&self, value: Tensor<T>, op: Op<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let tracked = self.grad && op.inputs().iter().any(|i| nodes[i.0].tracked);
        nodes.push(Node {
            value: Rc::new(value),
            op: if tracked { op } else { Op::Leaf },
            tracked,
        });
        Var(nodes.len() - 1)
    }

    /// Untracked value.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Tracked leaf whose gradient is reported by `Grads::wrt`.
    pub fn input(&self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Binds a stored parameter. Repeated binds of the same id on one tape
    /// return the same handle, so shared parameters accumulate gradient.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.borrow().get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id).clone(), true);
        self.bound.borrow_mut().insert(id, v);
        v
    }

    /// Untracked copy of a value.
    pub fn detach(&self, v: Var) -> Var {
        let t = (*self.value(v)).clone();
        self.constant(t)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(&self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = (av.rows(), av.cols(), bv.rows());
        if bv.cols() != k {
            return shape_err("matmul_nt", format!("{m}x{k} · ({n}x{})ᵀ", bv.cols()));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nt(av.data(), bv.data(), &mut out, m, k, n);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulNT(a, b)))
    }

    pub fn transpose(&self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(&self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(&self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).hadamard(&self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// `a + r` with the `1×n` row `r` broadcast over rows.
    pub fn add_row(&self, a: Var, r: Var) -> Result<Var> {
        let out = self.broadcast_row(a, r, "add_row", |x, y| x + y)?;
        Ok(self.push(out, Op::AddRow(a, r)))
    }

    /// `a ⊙ r` with the `1×n` row `r` broadcast over rows.
    pub fn mul_row(&self, a: Var, r: Var) -> Result<Var> {
        let out = self.broadcast_row(a, r, "mul_row", |x, y| x * y)?;
        Ok(self.push(out, Op::MulRow(a, r)))
    }

    fn broadcast_row(&self, a: Var, r: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (av, rv) = (self.value(a), self.value(r));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return shape_err(op, format!("row {:?} vs matrix {:?}", rv.shape(), av.shape()));
        }
        let c = av.cols();
        let r = rv.data();
        Tensor::matrix(av.rows(), c, av.data().iter().enumerate().map(|(i, &x)| f(x, r[i % c])).collect())
    }

    /// `a ⊙ c` with the `m×1` column `c` broadcast over columns.
    pub fn mul_col(&self, a: Var, c: Var) -> Result<Var> {
        let out = self.broadcast_col(a, c, "mul_col", |x, y| x * y)?;
        Ok(self.push(out, Op::MulCol(a, c)))
    }

    /// `a / c` with the `m×1` column `c` broadcast over columns.
    pub fn div_col(&self, a: Var, c: Var) -> Result<Var> {
        let out = self.broadcast_col(a, c, "div_col", |x, y| x / y)?;
        Ok(self.push(out, Op::DivCol(a, c)))
    }

    fn broadcast_col(&self, a: Var, c: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (av, cv) = (self.value(a), self.value(c));
        if cv.cols() != 1 || cv.rows() != av.rows() {
            return shape_err(op, format!("column {:?} vs matrix {:?}", cv.shape(), av.shape()));
        }
        let n = av.cols();
        let c = cv.data();
        Tensor::matrix(av.rows(), n, av.data().iter().enumerate().map(|(i, &x)| f(x, c[i / n])).collect())
    }

    pub fn scale(&self, a: Var, s: T) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s))
    }

    /// `a` times the `1×1` value `s`.
    pub fn mul_scalar(&self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.len() != 1 {
            return shape_err("mul_scalar", format!("scalar operand has shape {:?}", sv.shape()));
        }
        let out = self.value(a).scale(sv.data()[0]);
        Ok(self.push(out, Op::MulScalar(a, s)))
    }

    pub fn relu(&self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(T::zero()));
        self.push(out, Op::Relu(a))
    }

    /// elu(x) + 1: x + 1 for x > 0, exp(x) otherwise. Strictly positive.
    pub fn elu_plus_one(&self, a: Var) -> Var {
        let out = self.value(a).map(elu1);
        self.push(out, Op::EluPlusOne(a))
    }

    /// Row softmax with an optional additive mask (entries finite or −∞).
    pub fn softmax_rows(&self, a: Var, mask: Option<&Tensor<T>>) -> Result<Var> {
        let out = softmax_rows(&self.value(a), mask)?;
        Ok(self.push(out, Op::Softmax(a)))
    }

    pub fn log_softmax_rows(&self, a: Var) -> Var {
        let out = log_softmax_rows(&self.value(a));
        self.push(out, Op::LogSoftmax(a))
    }

    /// Row-wise layer normalization `gain ⊙ (x − μ)/den + bias`.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: T, denom: NormDenom) -> Result<Var> {
        let xv = self.value(x);
        let (m, d) = (xv.rows(), xv.cols());
        let (gv, bv) = (self.value(gain), self.value(bias));
        if gv.len() != d || bv.len() != d {
            return shape_err("layer_norm", format!("gain/bias length {}/{} vs width {d}", gv.len(), bv.len()));
        }
        let dt = T::of_usize(d);
        let mut centered = Tensor::zeros(m, d);
        let mut dens = Vec::with_capacity(m);
        let mut dsig = Vec::with_capacity(m);
        let mut out = Tensor::zeros(m, d);
        for i in 0..m {
            let r = xv.row(i);
            let mu = r.iter().copied().sum::<T>() / dt;
            let c = centered.row_mut(i);
            for (cj, &xj) in c.iter_mut().zip(r) {
                *cj = xj - mu;
            }
            let var = c.iter().map(|&v| v * v).sum::<T>() / dt;
            let sigma = var.sqrt();
            let (den, t) = match denom {
                NormDenom::SigmaPlusEps => (sigma + eps, sigma),
                NormDenom::SqrtVarEps => {
                    let s = (var + eps).sqrt();
                    (s, s)
                }
            };
            dens.push(den);
            dsig.push(t);
            let o = out.row_mut(i);
            for j in 0..d {
                o[j] = gv.data()[j] * (centered.at(i, j) / den) + bv.data()[j];
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                centered,
                denom: dens,
                dsig,
            },
        ))
    }

    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(a).slice_rows(start, len)?;
        Ok(self.push(out, Op::SliceRows(a, start)))
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(a).slice_cols(start, len)?;
        Ok(self.push(out, Op::SliceCols(a, start)))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let refs: Vec<&Tensor<T>> = vals.iter().map(|v| v.as_ref()).collect();
        let out = Tensor::concat_rows(&refs)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let refs: Vec<&Tensor<T>> = vals.iter().map(|v| v.as_ref()).collect();
        let out = Tensor::concat_cols(&refs)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    /// Row `r` of the output is row `idx[r]` of `a`.
    pub fn gather_rows(&self, a: Var, idx: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let c = av.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= av.rows() {
                return shape_err("gather_rows", format!("row {i} of {}", av.rows()));
            }
            data.extend_from_slice(av.row(i));
        }
        let out = Tensor::matrix(idx.len(), c, data)?;
        Ok(self.push(out, Op::GatherRows(a, idx.to_vec())))
    }

    pub fn reshape(&self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let out = self.value(a).reshape(&[rows, cols])?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    /// `m×1` column of row sums.
    pub fn row_sum(&self, a: Var) -> Var {
        let av = self.value(a);
        let data = (0..av.rows()).map(|i| av.row(i).iter().copied().sum()).collect();
        let out = Tensor::matrix(av.rows(), 1, data).expect("sized");
        self.push(out, Op::RowSum(a))
    }

    pub fn sum(&self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, T::one() / T::of_usize(n.max(1)))
    }

    /// Sums consecutive groups of `group` rows.
    pub fn segment_sum_rows(&self, a: Var, group: usize) -> Result<Var> {
        let av = self.value(a);
        if group == 0 || !av.rows().is_multiple_of(group) {
            return shape_err("segment_sum_rows", format!("{} rows in groups of {group}", av.rows()));
        }
        let (m, c) = (av.rows() / group, av.cols());
        let mut out = Tensor::zeros(m, c);
        for r in 0..av.rows() {
            let src = av.row(r);
            for (o, &s) in out.row_mut(r / group).iter_mut().zip(src) {
                *o += s;
            }
        }
        Ok(self.push(out, Op::SegmentSumRows(a, group)))
    }

    /// Weighted mean negative log-likelihood of `targets` under row-softmax
    /// of `logits`. Rows with weight 0 (padding) contribute nothing.
    /// Probabilities below 1e-9 are floored in the loss value and counted.
    pub fn cross_entropy(&self, logits: Var, targets: &[usize], weights: &[T]) -> Result<Var> {
        let lv = self.value(logits);
        let (m, v) = (lv.rows(), lv.cols());
        if targets.len() != m || weights.len() != m {
            return shape_err("cross_entropy", format!("{m} rows, {} targets, {} weights", targets.len(), weights.len()));
        }
        let logp = log_softmax_rows(&lv);
        let floor = T::of(CE_FLOOR.ln());
        let mut total = T::zero();
        let mut norm = T::zero();
        for i in 0..m {
            if targets[i] >= v {
                return Err(Error::Vocab { id: targets[i], size: v });
            }
            if weights[i] == T::zero() {
                continue;
            }
            let mut lp = logp.at(i, targets[i]);
            if lp < floor {
                self.floor_hits.set(self.floor_hits.get() + 1);
                lp = floor;
            }
            total -= weights[i] * lp;
            norm += weights[i];
        }
        let norm = if norm > T::zero() { norm } else { T::one() };
        let probs = logp.map(|x| x.exp());
        Ok(self.push(
            Tensor::scalar(total / norm),
            Op::CrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                norm,
            },
        ))
    }

    /// Linear recurrence `Z_t = Z_{t−1}·A + U_t`, `Z_{−1} = 0`, over rows.
    pub fn linear_scan(&self, u: Var, a: Var) -> Result<Var> {
        let (uv, av) = (self.value(u), self.value(a));
        let (n, k) = (uv.rows(), uv.cols());
        if av.rows() != k || av.cols() != k {
            return shape_err("linear_scan", format!("state width {k} vs transition {:?}", av.shape()));
        }
        let mut z = Tensor::zeros(n, k);
        for t in 0..n {
            let mut row = uv.row(t).to_vec();
            if t > 0 {
                let prev = z.row(t - 1).to_vec();
                gemm(&prev, av.data(), &mut row, 1, k, k);
            }
            z.row_mut(t).copy_from_slice(&row);
        }
        Ok(self.push(z, Op::LinearScan(u, a)))
    }

    /// Kernelized attention on already feature-mapped queries and keys:
    /// row i is `q_i·S / q_i·z` with `S = Σ k_jᵀ v_j`, `z = Σ k_j`, the sums
    /// running over `j ≤ i` when causal and over all j otherwise.
    pub fn linear_attention(&self, q: Var, k: Var, v: Var, causal: bool) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, dp) = (qv.rows(), qv.cols());
        let (nk, dv) = (vv.rows(), vv.cols());
        if kv.cols() != dp || kv.rows() != nk || (causal && nk != n) {
            return shape_err(
                "linear_attention",
                format!("q {:?} k {:?} v {:?}", qv.shape(), kv.shape(), vv.shape()),
            );
        }
        let mut s = vec![T::zero(); dp * dv];
        let mut z = vec![T::zero(); dp];
        let absorb = |s: &mut [T], z: &mut [T], j: usize| {
            let kr = kv.row(j);
            gemm_tn(kr, vv.row(j), s, dp, 1, dv);
            for (zz, &kk) in z.iter_mut().zip(kr) {
                *zz += kk;
            }
        };
        if !causal {
            for j in 0..nk {
                absorb(&mut s, &mut z, j);
            }
        }
        let mut out = Tensor::zeros(n, dv);
        let mut den = Vec::with_capacity(n);
        for i in 0..n {
            if causal {
                absorb(&mut s, &mut z, i);
            }
            let qr = qv.row(i);
            let d: T = qr.iter().zip(&z).map(|(&a, &b)| a * b).sum();
            if !(d > T::zero()) {
                return Err(Error::DegenerateQuery { row: i });
            }
            let o = out.row_mut(i);
            gemm(qr, &s, o, 1, dp, dv);
            for x in o.iter_mut() {
                *x /= d;
            }
            den.push(d);
        }
        Ok(self.push(out, Op::LinearAttn { q, k, v, causal, den }))
    }

    /// Reverse sweep from a `1×1` loss.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        let nodes = self.nodes.borrow();
        let lv = &nodes[loss.0];
        if lv.value.len() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", lv.value.shape())));
        }
        if !self.grad {
            return Err(Error::Contract("backward on an inference tape".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(lv.value.shape(), vec![T::one()])?);
        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            backprop(&nodes, &node.op, &node.value, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let mut params = HashMap::new();
        for (&id, &v) in self.bound.borrow().iter() {
            let g = grads[v.0].clone().unwrap_or_else(|| {
                let val = &nodes[v.0].value;
                Tensor::new(val.shape(), vec![T::zero(); val.len()]).expect("sized")
            });
            params.insert(id, g);
        }
        Ok(Grads { vars: grads, params })
    }
}

#[inline]
fn elu1<T: Float>(x: T) -> T {
    if x > T::zero() {
        x + T::one()
    } else {
        x.exp()
    }
}

fn accumulate<T: Float>(nodes: &[Node<T>], grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
    if !nodes[v.0].tracked {
        return Ok(());
    }
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn zeros_like<T: Float>(t: &Tensor<T>) -> Tensor<T> {
    Tensor::new(t.shape(), vec![T::zero(); t.len()]).expect("sized")
}

fn col_sum<T: Float>(t: &Tensor<T>) -> Tensor<T> {
    let mut out = vec![T::zero(); t.cols()];
    for i in 0..t.rows() {
        for (o, &x) in out.iter_mut().zip(t.row(i)) {
            *o += x;
        }
    }
    Tensor::row_vector(out)
}

fn backprop<T: Float>(
    nodes: &[Node<T>],
    op: &Op<T>,
    out: &Tensor<T>,
    g: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) -> Result<()> {
    let val = |v: &Var| nodes[v.0].value.clone();
    let want = |v: &Var| nodes[v.0].tracked;
    match op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (val(a), val(b));
            let (m, k, n) = (av.rows(), av.cols(), bv.cols());
            if want(a) {
                let mut da = vec![T::zero(); m * k];
                gemm_nt(g.data(), bv.data(), &mut da, m, n, k);
                accumulate(nodes, grads, *a, Tensor::matrix(m, k, da)?)?;
            }
            if want(b) {
                let mut db = vec![T::zero(); k * n];
                gemm_tn(av.data(), g.data(), &mut db, k, m, n);
                accumulate(nodes, grads, *b, Tensor::matrix(k, n, db)?)?;
            }
        }
        Op::MatMulNT(a, b) => {
            let (av, bv) = (val(a), val(b));
            let (m, k, n) = (av.rows(), av.cols(), bv.rows());
            if want(a) {
                let mut da = vec![T::zero(); m * k];
                gemm(g.data(), bv.data(), &mut da, m, n, k);
                accumulate(nodes, grads, *a, Tensor::matrix(m, k, da)?)?;
            }
            if want(b) {
                let mut db = vec![T::zero(); n * k];
                gemm_tn(g.data(), av.data(), &mut db, n, m, k);
                accumulate(nodes, grads, *b, Tensor::matrix(n, k, db)?)?;
            }
        }
        Op::Transpose(a) => accumulate(nodes, grads, *a, g.transpose())?,
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.clone())?;
            accumulate(nodes, grads, *b, g.clone())?;
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.clone())?;
            accumulate(nodes, grads, *b, g.scale(-T::one()))?;
        }
        Op::Mul(a, b) => {
            if want(a) {
                accumulate(nodes, grads, *a, g.hadamard(&val(b))?)?;
            }
            if want(b) {
                accumulate(nodes, grads, *b, g.hadamard(&val(a))?)?;
            }
        }
        Op::AddRow(a, r) => {
            accumulate(nodes, grads, *a, g.clone())?;
            if want(r) {
                accumulate(nodes, grads, *r, col_sum(g))?;
            }
        }
        Op::MulRow(a, r) => {
            let (av, rv) = (val(a), val(r));
            let c = av.cols();
            if want(a) {
                let da = Tensor::matrix(av.rows(), c, g.data().iter().enumerate().map(|(i, &x)| x * rv.data()[i % c]).collect())?;
                accumulate(nodes, grads, *a, da)?;
            }
            if want(r) {
                accumulate(nodes, grads, *r, col_sum(&g.hadamard(&av)?))?;
            }
        }
        Op::MulCol(a, c) | Op::DivCol(a, c) => {
            let (av, cv) = (val(a), val(c));
            let n = av.cols();
            let div = matches!(op, Op::DivCol(..));
            if want(a) {
                let da = Tensor::matrix(
                    av.rows(),
                    n,
                    g.data()
                        .iter()
                        .enumerate()
                        .map(|(i, &x)| if div { x / cv.data()[i / n] } else { x * cv.data()[i / n] })
                        .collect(),
                )?;
                accumulate(nodes, grads, *a, da)?;
            }
            if want(c) {
                let mut dc = vec![T::zero(); av.rows()];
                for (i, dci) in dc.iter_mut().enumerate() {
                    let s: T = g.row(i).iter().zip(av.row(i)).map(|(&x, &y)| x * y).sum();
                    let ci = cv.data()[i];
                    *dci = if div { -s / (ci * ci) } else { s };
                }
                accumulate(nodes, grads, *c, Tensor::matrix(av.rows(), 1, dc)?)?;
            }
        }
        Op::Scale(a, s) => accumulate(nodes, grads, *a, g.scale(*s))?,
        Op::MulScalar(a, s) => {
            let sv = val(s).data()[0];
            if want(a) {
                accumulate(nodes, grads, *a, g.scale(sv))?;
            }
            if want(s) {
                let ds = g.hadamard(&val(a))?.sum();
                accumulate(nodes, grads, *s, Tensor::new(val(s).shape(), vec![ds])?)?;
            }
        }
        Op::Relu(a) => {
            let av = val(a);
            let da = g.zip_map(&av, "relu", |gv, x| if x > T::zero() { gv } else { T::zero() })?;
            accumulate(nodes, grads, *a, da)?;
        }
        Op::EluPlusOne(a) => {
            let av = val(a);
            let da = g.zip_map(&av, "elu", |gv, x| if x > T::zero() { gv } else { gv * x.exp() })?;
            accumulate(nodes, grads, *a, da)?;
        }
        Op::Softmax(a) => {
            let mut da = zeros_like(out);
            for i in 0..out.rows() {
                let (y, gr) = (out.row(i), g.row(i));
                let dot: T = y.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                for (j, d) in da.row_mut(i).iter_mut().enumerate() {
                    *d = y[j] * (gr[j] - dot);
                }
            }
            accumulate(nodes, grads, *a, da)?;
        }
        Op::LogSoftmax(a) => {
            let mut da = zeros_like(out);
            for i in 0..out.rows() {
                let (y, gr) = (out.row(i), g.row(i));
                let gs: T = gr.iter().copied().sum();
                for (j, d) in da.row_mut(i).iter_mut().enumerate() {
                    *d = gr[j] - y[j].exp() * gs;
                }
            }
            accumulate(nodes, grads, *a, da)?;
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            centered,
            denom,
            dsig,
        } => {
            let gv = val(gain);
            let (m, d) = (centered.rows(), centered.cols());
            let dt = T::of_usize(d);
            if want(x) {
                let mut dx = Tensor::zeros(m, d);
                for i in 0..m {
                    let c = centered.row(i);
                    let gr = g.row(i);
                    let dxh: Vec<T> = (0..d).map(|j| gr[j] * gv.data()[j]).collect();
                    let mean = dxh.iter().copied().sum::<T>() / dt;
                    let proj: T = dxh.iter().zip(c).map(|(&a, &b)| a * b).sum();
                    let s = denom[i];
                    let t = dsig[i];
                    let k2 = if t > T::zero() { proj / (dt * s * s * t) } else { T::zero() };
                    for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                        *o = (dxh[j] - mean) / s - k2 * c[j];
                    }
                }
                accumulate(nodes, grads, *x, dx)?;
            }
            if want(gain) {
                let mut dg = vec![T::zero(); d];
                for i in 0..m {
                    for j in 0..d {
                        dg[j] += g.at(i, j) * centered.at(i, j) / denom[i];
                    }
                }
                accumulate(nodes, grads, *gain, Tensor::new(gv.shape(), dg)?)?;
            }
            if want(bias) {
                let db = col_sum(g);
                accumulate(nodes, grads, *bias, Tensor::new(val(bias).shape(), db.into_data())?)?;
            }
        }
        Op::SliceRows(a, start) => {
            let mut da = zeros_like(&val(a));
            let c = da.cols();
            da.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
            accumulate(nodes, grads, *a, da)?;
        }
        Op::SliceCols(a, start) => {
            let mut da = zeros_like(&val(a));
            let w = g.cols();
            for i in 0..g.rows() {
                da.row_mut(i)[*start..start + w].copy_from_slice(g.row(i));
            }
            accumulate(nodes, grads, *a, da)?;
        }
        Op::ConcatRows(parts) => {
            let mut at = 0;
            for p in parts {
                let r = val(p).rows();
                if want(p) {
                    accumulate(nodes, grads, *p, g.slice_rows(at, r)?)?;
                }
                at += r;
            }
        }
        Op::ConcatCols(parts) => {
            let mut at = 0;
            for p in parts {
                let c = val(p).cols();
                if want(p) {
                    accumulate(nodes, grads, *p, g.slice_cols(at, c)?)?;
                }
                at += c;
            }
        }
        Op::GatherRows(a, idx) => {
            let mut da = zeros_like(&val(a));
            for (r, &i) in idx.iter().enumerate() {
                for (d, &x) in da.row_mut(i).iter_mut().zip(g.row(r)) {
                    *d += x;
                }
            }
            accumulate(nodes, grads, *a, da)?;
        }
        Op::Reshape(a) => accumulate(nodes, grads, *a, g.reshape(val(a).shape())?)?,
        Op::RowSum(a) => {
            let av = val(a);
            let c = av.cols();
            let da = Tensor::new(av.shape(), (0..av.len()).map(|i| g.data()[i / c]).collect())?;
            accumulate(nodes, grads, *a, da)?;
        }
        Op::Sum(a) => {
            let av = val(a);
            accumulate(nodes, grads, *a, Tensor::new(av.shape(), vec![g.data()[0]; av.len()])?)?;
        }
        Op::SegmentSumRows(a, group) => {
            let av = val(a);
            let mut da = zeros_like(&av);
            for r in 0..av.rows() {
                da.row_mut(r).copy_from_slice(g.row(r / group));
            }
            accumulate(nodes, grads, *a, da)?;
        }
        Op::CrossEntropy {
            logits,
            probs,
            targets,
            weights,
            norm,
        } => {
            let g0 = g.data()[0];
            let mut dl = zeros_like(probs);
            for i in 0..probs.rows() {
                if weights[i] == T::zero() {
                    continue;
                }
                let w = g0 * weights[i] / *norm;
                for (j, d) in dl.row_mut(i).iter_mut().enumerate() {
                    *d = w * probs.at(i, j);
                }
                let t = targets[i];
                dl.row_mut(i)[t] -= w;
            }
            accumulate(nodes, grads, *logits, dl)?;
        }
        Op::LinearScan(u, a) => {
            let av = val(a);
            let k = av.rows();
            let n = out.rows();
            let mut lam = zeros_like(out);
            let mut carry = vec![T::zero(); k];
            for t in (0..n).rev() {
                let row = lam.row_mut(t);
                for (j, r) in row.iter_mut().enumerate() {
                    *r = g.at(t, j) + carry[j];
                }
                let cur = row.to_vec();
                carry.iter_mut().for_each(|c| *c = T::zero());
                gemm_nt(&cur, av.data(), &mut carry, 1, k, k);
            }
            if want(a) {
                let mut da = vec![T::zero(); k * k];
                for t in 1..n {
                    gemm_tn(out.row(t - 1), lam.row(t), &mut da, k, 1, k);
                }
                accumulate(nodes, grads, *a, Tensor::matrix(k, k, da)?)?;
            }
            accumulate(nodes, grads, *u, lam)?;
        }
        Op::LinearAttn { q, k, v, causal, den } => {
            let (qv, kv, vv) = (val(q), val(k), val(v));
            let (n, dp) = (qv.rows(), qv.cols());
            let (nk, dv) = (vv.rows(), vv.cols());
            // dnum_i = g_i / den_i, dden_i = −g_i·o_i / den_i
            let mut dnum = zeros_like(g);
            let mut dden = vec![T::zero(); n];
            for i in 0..n {
                let gi = g.row(i);
                let oi = out.row(i);
                for (d, &x) in dnum.row_mut(i).iter_mut().zip(gi) {
                    *d = x / den[i];
                }
                dden[i] = -gi.iter().zip(oi).map(|(&a, &b)| a * b).sum::<T>() / den[i];
            }
            if want(q) {
                let mut dq = Tensor::zeros(n, dp);
                let mut s = vec![T::zero(); dp * dv];
                let mut z = vec![T::zero(); dp];
                let absorb = |s: &mut [T], z: &mut [T], j: usize| {
                    gemm_tn(kv.row(j), vv.row(j), s, dp, 1, dv);
                    for (zz, &kk) in z.iter_mut().zip(kv.row(j)) {
                        *zz += kk;
                    }
                };
                if !causal {
                    for j in 0..nk {
                        absorb(&mut s, &mut z, j);
                    }
                }
                for i in 0..n {
                    if *causal {
                        absorb(&mut s, &mut z, i);
                    }
                    let row = dq.row_mut(i);
                    gemm_nt(dnum.row(i), &s, row, 1, dv, dp);
                    for (r, &zz) in row.iter_mut().zip(&z) {
                        *r += dden[i] * zz;
                    }
                }
                accumulate(nodes, grads, *q, dq)?;
            }
            if want(k) || want(v) {
                // R = Σ_i q_iᵀ dnum_i and r = Σ_i dden_i q_i, over i ≥ j when causal.
                let mut rm = vec![T::zero(); dp * dv];
                let mut rv = vec![T::zero(); dp];
                let absorb = |rm: &mut [T], rv: &mut [T], i: usize| {
                    gemm_tn(qv.row(i), dnum.row(i), rm, dp, 1, dv);
                    for (r, &qq) in rv.iter_mut().zip(qv.row(i)) {
                        *r += dden[i] * qq;
                    }
                };
                if !causal {
                    for i in 0..n {
                        absorb(&mut rm, &mut rv, i);
                    }
                }
                let mut dk = Tensor::zeros(nk, dp);
                let mut dvt = Tensor::zeros(nk, dv);
                for j in (0..nk).rev() {
                    if *causal {
                        absorb(&mut rm, &mut rv, j);
                    }
                    let dkr = dk.row_mut(j);
                    gemm_nt(&rm, vv.row(j), dkr, dp, dv, 1);
                    for (d, &r) in dkr.iter_mut().zip(&rv) {
                        *d += r;
                    }
                    gemm(kv.row(j), &rm, dvt.row_mut(j), 1, dp, dv);
                }
                accumulate(nodes, grads, *k, dk)?;
                accumulate(nodes, grads, *v, dvt)?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn rand_t(rng: &mut Rng, r: usize, c: usize) -> Tensor<f64> {
        Tensor::uniform(r, c, -1.0, 1.0, rng)
    }

    fn rand_pos(rng: &mut Rng, r: usize, c: usize) -> Tensor<f64> {
        Tensor::uniform(r, c, 0.2, 1.5, rng)
    }

    /// Compares the tape gradient of `f` at each input against central
    /// differences.
    fn check(inputs: Vec<Tensor<f64>>, f: impl Fn(&Tape<f64>, &[Var]) -> Result<Var>) {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
        let loss = f(&tape, &vars).unwrap();
        let grads = tape.backward(loss).unwrap();
        let eval = |xs: &[Tensor<f64>]| {
            let t = Tape::<f64>::inference();
            let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
            t.value(f(&t, &vs).unwrap()).data()[0]
        };
        let h = 1e-6;
        for (n, x) in inputs.iter().enumerate() {
            let g = grads.wrt(vars[n]).cloned().unwrap_or_else(|| zeros_like(x));
            for e in 0..x.len() {
                let mut xs = inputs.clone();
                xs[n].data_mut()[e] = x.data()[e] + h;
                let up = eval(&xs);
                xs[n].data_mut()[e] = x.data()[e] - h;
                let dn = eval(&xs);
                let fd = (up - dn) / (2.0 * h);
                let an = g.data()[e];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-4);
                assert!(err < 1e-5, "input {n} elem {e}: fd {fd} analytic {an}");
            }
        }
    }

    /// Random projection to a scalar so every output entry is exercised.
    fn project(t: &Tape<f64>, v: Var, seed: u64) -> Result<Var> {
        let (r, c) = t.shape(v);
        let w = rand_t(&mut Rng::new(seed), r, c);
        let w = t.constant(w);
        Ok(t.sum(t.mul(v, w)?))
    }

    #[test]
    fn square_derivative() {
        let t = Tape::<f64>::new();
        let x = t.input(Tensor::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let t = Tape::<f64>::new();
        let x = t.input(Tensor::zeros(2, 2));
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn softmax_cross_entropy_gradient_is_p_minus_y() {
        let t = Tape::<f64>::new();
        let logits = Tensor::from_rows(&[&[0.5, -1.0, 2.0]]).unwrap();
        let x = t.input(logits.clone());
        let l = t.cross_entropy(x, &[1], &[1.0]).unwrap();
        let g = t.backward(l).unwrap();
        let p = softmax_rows(&logits, None).unwrap();
        let want = [p.at(0, 0), p.at(0, 1) - 1.0, p.at(0, 2)];
        for j in 0..3 {
            assert!((g.wrt(x).unwrap().at(0, j) - want[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn shared_param_gradients_sum() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::scalar(2.0));
        let t = Tape::new();
        let a = t.param(&store, w);
        let b = t.param(&store, w);
        assert_eq!(a, b);
        let x = t.constant(Tensor::scalar(5.0));
        let y1 = t.mul(a, x).unwrap();
        let y2 = t.mul(b, b).unwrap();
        let l = t.add(y1, y2).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.param(w).unwrap().data(), &[9.0]);
    }

    #[test]
    fn unused_param_gets_zero_gradient() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::zeros(2, 3));
        let u = store.add("u", Tensor::scalar(1.0));
        let t = Tape::new();
        let _ = t.param(&store, w);
        let uv = t.param(&store, u);
        let l = t.scale(uv, 2.0);
        let g = t.backward(l).unwrap();
        assert_eq!(g.param(w).unwrap(), &Tensor::zeros(2, 3));
    }

    #[test]
    fn fd_elementwise_and_broadcast() {
        let mut r = Rng::new(1);
        check(vec![rand_t(&mut r, 3, 4), rand_t(&mut r, 4, 2)], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y, 9)
        });
        check(vec![rand_t(&mut r, 3, 4), rand_t(&mut r, 5, 4)], |t, v| {
            let y = t.matmul_nt(v[0], v[1])?;
            project(t, y, 1)
        });
        check(vec![rand_t(&mut r, 3, 4), rand_t(&mut r, 1, 4), rand_t(&mut r, 1, 4)], |t, v| {
            let y = t.add_row(v[0], v[1])?;
            let y = t.mul_row(y, v[2])?;
            let y = t.transpose(y);
            project(t, y, 2)
        });
        check(vec![rand_t(&mut r, 3, 4), rand_pos(&mut r, 3, 1), rand_t(&mut r, 3, 1)], |t, v| {
            let y = t.div_col(v[0], v[1])?;
            let y = t.mul_col(y, v[2])?;
            project(t, y, 3)
        });
        check(vec![rand_t(&mut r, 3, 4), rand_t(&mut r, 3, 4), rand_t(&mut r, 1, 1)], |t, v| {
            let y = t.sub(v[0], v[1])?;
            let y = t.mul(y, v[0])?;
            let y = t.mul_scalar(y, v[2])?;
            let y = t.scale(y, 0.7);
            project(t, y, 4)
        });
    }

    #[test]
    fn fd_nonlinearities() {
        let mut r = Rng::new(2);
        check(vec![rand_t(&mut r, 3, 5)], |t, v| {
            let y = t.elu_plus_one(v[0]);
            let z = t.relu(v[0]);
            let y = t.add(y, z)?;
            project(t, y, 5)
        });
        let mask = Tensor::from_rows(&[&[0., f64::NEG_INFINITY, 0.], &[0., 0., -0.5]]).unwrap();
        check(vec![rand_t(&mut r, 2, 3)], move |t, v| {
            let y = t.softmax_rows(v[0], Some(&mask))?;
            project(t, y, 6)
        });
        check(vec![rand_t(&mut r, 2, 5)], |t, v| {
            let y = t.log_softmax_rows(v[0]);
            project(t, y, 7)
        });
        check(vec![rand_t(&mut r, 4, 5)], |t, v| t.cross_entropy(v[0], &[0, 4, 2, 1], &[1.0, 0.0, 1.0, 0.5]));
    }

    #[test]
    fn fd_layer_norm_both_denominators() {
        let mut r = Rng::new(3);
        for denom in [NormDenom::SigmaPlusEps, NormDenom::SqrtVarEps] {
            check(vec![rand_t(&mut r, 3, 6), rand_t(&mut r, 1, 6), rand_t(&mut r, 1, 6)], move |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 0.1, denom)?;
                project(t, y, 8)
            });
        }
    }

    #[test]
    fn fd_shape_ops() {
        let mut r = Rng::new(4);
        check(vec![rand_t(&mut r, 4, 6), rand_t(&mut r, 2, 6)], |t, v| {
            let a = t.slice_rows(v[0], 1, 2)?;
            let b = t.slice_cols(v[0], 2, 3)?;
            let c = t.concat_rows(&[a, v[1]])?;
            let d = t.concat_cols(&[b, b])?;
            let e = t.gather_rows(c, &[3, 0, 0, 2])?;
            let f = t.reshape(d, 8, 3)?;
            let s = t.segment_sum_rows(f, 2)?;
            let rs = t.row_sum(e);
            let x = project(t, s, 10)?;
            let y = project(t, rs, 11)?;
            let m = t.mean(e);
            let xy = t.add(x, y)?;
            t.add(xy, m)
        });
    }

    #[test]
    fn fd_linear_scan() {
        let mut r = Rng::new(5);
        check(vec![rand_t(&mut r, 6, 3), rand_t(&mut r, 3, 3).scale(0.5)], |t, v| {
            let z = t.linear_scan(v[0], v[1])?;
            project(t, z, 12)
        });
    }

    #[test]
    fn fd_linear_attention() {
        let mut r = Rng::new(6);
        for causal in [true, false] {
            check(vec![rand_pos(&mut r, 5, 3), rand_pos(&mut r, 5, 3), rand_t(&mut r, 5, 4)], move |t, v| {
                let y = t.linear_attention(v[0], v[1], v[2], causal)?;
                project(t, y, 13)
            });
        }
    }

    #[test]
    fn inference_tape_records_nothing_backward() {
        let t = Tape::<f32>::inference();
        let x = t.input(Tensor::scalar(1.0));
        assert!(!t.is_tracked(x));
        assert!(t.backward(x).is_err());
    }
}
