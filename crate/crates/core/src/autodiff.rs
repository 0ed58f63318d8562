//! Reverse-mode automatic differentiation over a fixed set of matrix ops.
//!
//! A [`Tape`] records every op applied during one forward pass. Parameters
//! from a [`ParamStore`] are bound lazily as leaves; calling
//! [`Tape::backward`] on a scalar returns the gradient of every bound,
//! trainable parameter. Tapes are single-use and single-threaded.
//!
//! Shape mismatches inside the tape are programming errors and panic;
//! data-dependent failures (zero-norm cosine inputs, bad class indices,
//! non-finite values) are reported as [`Error`]s.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    AddBias(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Tanh(usize),
    Exp(usize),
    Abs(usize),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize),
    Reshape(usize),
    GatherRows(usize, Vec<usize>),
    StraightThrough(usize),
    Sum(usize),
    Mean(usize),
    RowSum(usize),
    CosineRows(usize, usize),
    SoftmaxCrossEntropy(usize, Vec<usize>),
    GmmNll {
        logits: usize,
        means: usize,
        log_std: usize,
        target: Tensor,
    },
    MaskedSoftmax(usize, Vec<bool>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Tape<'s> {
    store: Option<&'s ParamStore>,
    frozen: Vec<String>,
    trainable: Option<Vec<String>>,
    nodes: RefCell<Vec<Node>>,
    bound: RefCell<HashMap<ParamId, usize>>,
    non_finite: Cell<bool>,
    detached: Option<RefCell<Vec<Tensor>>>,
    replay: Option<Vec<Tensor>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'s> Tape<'s> {
    pub fn new() -> Self {
        Self {
            store: None,
            frozen: Vec::new(),
            trainable: None,
            nodes: RefCell::new(Vec::new()),
            bound: RefCell::new(HashMap::new()),
            non_finite: Cell::new(false),
            detached: None,
            replay: None,
        }
    }

    pub fn with_params(store: &'s ParamStore) -> Self {
        Self {
            store: Some(store),
            ..Self::new()
        }
    }

    /// Parameters whose names start with any of `prefixes` are bound as
    /// constants and never receive gradients.
    pub fn freeze(mut self, prefixes: &[&str]) -> Self {
        self.frozen.extend(prefixes.iter().map(|p| p.to_string()));
        self
    }

    /// Only parameters under one of `prefixes` receive gradients.
    pub fn train_only(mut self, prefixes: &[&str]) -> Self {
        self.trainable = Some(prefixes.iter().map(|p| p.to_string()).collect());
        self
    }

    /// Keeps a copy of every `stop_gradient` output, in call order.
    pub fn record_detached(mut self) -> Self {
        self.detached = Some(RefCell::new(Vec::new()));
        self
    }

    /// The `i`-th `stop_gradient` call returns `values[i]` instead of its
    /// input. Evaluated this way, the loss is a function whose true
    /// derivative is the one `backward` computes.
    pub fn replay_detached(mut self, values: Vec<Tensor>) -> Self {
        self.replay = Some(values);
        self.record_detached()
    }

    pub fn detached_values(&self) -> Vec<Tensor> {
        self.detached.as_ref().map(|d| d.borrow().clone()).unwrap_or_default()
    }

    /// Every parameter is bound as a constant; for inference.
    pub fn inference(store: &'s ParamStore) -> Self {
        Self::with_params(store).freeze(&[""])
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store.expect("tape has no parameter store")
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        if !value.is_finite() {
            self.non_finite.set(true);
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, v: usize) -> bool {
        self.nodes.borrow()[v].needs_grad
    }

    fn with_value<R>(&self, v: Var, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.with_value(v, Tensor::clone)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.with_value(v, |t| t.item())
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.with_value(v, |t| (t.rows(), t.cols()))
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A free leaf that receives gradients, independent of any store.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&self, id: ParamId) -> Var {
        if let Some(&idx) = self.bound.borrow().get(&id) {
            return Var(idx);
        }
        let p = self.store().get(id);
        let trainable = !self.frozen.iter().any(|f| p.name.starts_with(f.as_str()))
            && self
                .trainable
                .as_ref()
                .is_none_or(|t| t.iter().any(|f| p.name.starts_with(f.as_str())));
        let v = self.push(p.value.clone(), Op::Leaf, trainable);
        self.bound.borrow_mut().insert(id, v.0);
        v
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.matmul(&nodes[b.0].value)
        };
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push(value, Op::MatMul(a.0, b.0), ng)
    }

    fn binary(&self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            assert_eq!(
                (x.rows(), x.cols()),
                (y.rows(), y.cols()),
                "elementwise shape mismatch"
            );
            x.zip_map(y, f)
        };
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push(value, op, ng)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a.0, b.0), |x, y| x + y)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a.0, b.0), |x, y| x - y)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a.0, b.0), |x, y| x * y)
    }

    /// `a (n×m) + bias (1×m)` broadcast over rows.
    pub fn add_bias(&self, a: Var, bias: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (x, b) = (&nodes[a.0].value, &nodes[bias.0].value);
            assert_eq!(b.rows(), 1, "bias must be a row");
            assert_eq!(x.cols(), b.cols(), "bias width");
            let mut out = x.clone();
            for r in 0..x.rows() {
                for (o, &bv) in out.row_slice_mut(r).iter_mut().zip(b.data()) {
                    *o += bv;
                }
            }
            out
        };
        let ng = self.needs(a.0) || self.needs(bias.0);
        self.push(value, Op::AddBias(a.0, bias.0), ng)
    }

    fn unary(&self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.with_value(a, |t| t.map(f));
        let ng = self.needs(a.0);
        self.push(value, op, ng)
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a.0, s), |x| x * s)
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, Op::Relu(a.0), |x| x.max(0.0))
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a.0), f64::tanh)
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, Op::Exp(a.0), f64::exp)
    }

    pub fn abs(&self, a: Var) -> Var {
        self.unary(a, Op::Abs(a.0), f64::abs)
    }

    /// Identity in the forward pass; blocks all gradient flow.
    pub fn stop_gradient(&self, a: Var) -> Var {
        let mut value = self.value(a);
        if let Some(log) = &self.detached {
            let mut log = log.borrow_mut();
            if let Some(r) = self.replay.as_ref().and_then(|r| r.get(log.len())) {
                assert_eq!(r.shape(), value.shape(), "replayed value has the wrong shape");
                value = r.clone();
            }
            log.push(value.clone());
        }
        self.push(value, Op::Leaf, false)
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let value = {
            let nodes = self.nodes.borrow();
            let rows = nodes[parts[0].0].value.rows();
            let width: usize = parts.iter().map(|p| nodes[p.0].value.cols()).sum();
            let mut data = Vec::with_capacity(rows * width);
            for r in 0..rows {
                for p in parts {
                    let t = &nodes[p.0].value;
                    assert_eq!(t.rows(), rows, "concat row mismatch");
                    data.extend_from_slice(t.row_slice(r));
                }
            }
            Tensor::from_parts(rows, width, data)
        };
        let ng = parts.iter().any(|p| self.needs(p.0));
        self.push(value, Op::ConcatCols(parts.iter().map(|p| p.0).collect()), ng)
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&self, a: Var, start: usize, end: usize) -> Var {
        let value = self.with_value(a, |t| {
            assert!(start < end && end <= t.cols(), "slice out of range");
            let mut data = Vec::with_capacity(t.rows() * (end - start));
            for r in 0..t.rows() {
                data.extend_from_slice(&t.row_slice(r)[start..end]);
            }
            Tensor::from_parts(t.rows(), end - start, data)
        });
        let ng = self.needs(a.0);
        self.push(value, Op::SliceCols(a.0, start), ng)
    }

    /// Reinterprets the row-major data of `a` as `rows × cols`.
    pub fn reshape(&self, a: Var, rows: usize, cols: usize) -> Var {
        let value = self.with_value(a, |t| {
            assert_eq!(t.len(), rows * cols, "reshape changes the element count");
            Tensor::from_parts(rows, cols, t.data().to_vec())
        });
        let ng = self.needs(a.0);
        self.push(value, Op::Reshape(a.0), ng)
    }

    pub fn gather_rows(&self, table: Var, indices: &[usize]) -> Var {
        let value = self.with_value(table, |t| {
            assert!(indices.iter().all(|&i| i < t.rows()), "gather out of range");
            t.gather_rows(indices)
        });
        let ng = self.needs(table.0);
        self.push(value, Op::GatherRows(table.0, indices.to_vec()), ng)
    }

    /// Forward value is `code`; the backward pass sends the incoming
    /// gradient to `query` unchanged and nothing to `code`.
    pub fn straight_through(&self, query: Var, code: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (q, e) = (&nodes[query.0].value, &nodes[code.0].value);
            assert_eq!((q.rows(), q.cols()), (e.rows(), e.cols()), "straight-through shapes");
            e.clone()
        };
        let ng = self.needs(query.0);
        self.push(value, Op::StraightThrough(query.0), ng)
    }

    /// Straight-through surrogate with a fixed offset: `query + offset`.
    /// At the point where `offset = code - query` this equals the code and
    /// has the same gradient as [`Tape::straight_through`].
    pub fn shifted(&self, query: Var, offset: &Tensor) -> Var {
        let off = self.constant(offset.clone());
        self.add(query, off)
    }

    pub fn sum(&self, a: Var) -> Var {
        let value = Tensor::scalar(self.with_value(a, |t| t.data().iter().sum()));
        let ng = self.needs(a.0);
        self.push(value, Op::Sum(a.0), ng)
    }

    pub fn mean(&self, a: Var) -> Var {
        let value = Tensor::scalar(self.with_value(a, |t| {
            t.data().iter().sum::<f64>() / t.len() as f64
        }));
        let ng = self.needs(a.0);
        self.push(value, Op::Mean(a.0), ng)
    }

    /// Per-row sums, `n×m -> n×1`.
    pub fn row_sum(&self, a: Var) -> Var {
        let value = self.with_value(a, |t| {
            let data = (0..t.rows()).map(|r| t.row_slice(r).iter().sum()).collect();
            Tensor::from_parts(t.rows(), 1, data)
        });
        let ng = self.needs(a.0);
        self.push(value, Op::RowSum(a.0), ng)
    }

    /// Row-wise cosine similarity, `n×m, n×m -> n×1`.
    pub fn cosine_rows(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            assert_eq!((x.rows(), x.cols()), (y.rows(), y.cols()), "cosine shapes");
            let mut out = Vec::with_capacity(x.rows());
            for r in 0..x.rows() {
                out.push(cosine_parts(x.row_slice(r), y.row_slice(r))?.0);
            }
            Tensor::from_parts(x.rows(), 1, out)
        };
        let ng = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(value, Op::CosineRows(a.0, b.0), ng))
    }

    /// Row-wise `-log softmax(logits)[target]`, `n×V -> n×1`.
    pub fn softmax_cross_entropy(&self, logits: Var, targets: &[usize]) -> Result<Var> {
        let value = self.with_value(logits, |t| -> Result<Tensor> {
            if targets.len() != t.rows() {
                return Err(Error::Shape(format!(
                    "{} targets for {} rows",
                    targets.len(),
                    t.rows()
                )));
            }
            let mut out = Vec::with_capacity(t.rows());
            for (r, &target) in targets.iter().enumerate() {
                let row = t.row_slice(r);
                if target >= row.len() {
                    return Err(Error::Index {
                        index: target,
                        bound: row.len(),
                    });
                }
                out.push(log_sum_exp(row) - row[target]);
            }
            Ok(Tensor::from_parts(t.rows(), 1, out))
        })?;
        let ng = self.needs(logits.0);
        Ok(self.push(value, Op::SoftmaxCrossEntropy(logits.0, targets.to_vec()), ng))
    }

    /// Row-wise diagonal-Gaussian mixture negative log likelihood.
    ///
    /// `logits` is `n×M` (unnormalized log mixture weights), `means` and
    /// `log_std` are `n×(M·A)` laid out component-major, `target` is `n×A`.
    pub fn gmm_nll(&self, logits: Var, means: Var, log_std: Var, target: &Tensor) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (w, mu, ls) = (
                &nodes[logits.0].value,
                &nodes[means.0].value,
                &nodes[log_std.0].value,
            );
            let (n, m) = (w.rows(), w.cols());
            let a = target.cols();
            if target.rows() != n || mu.rows() != n || ls.rows() != n {
                return Err(Error::Shape("gmm rows disagree".into()));
            }
            if mu.cols() != m * a || ls.cols() != m * a {
                return Err(Error::Shape(format!(
                    "gmm expects {} mean columns, got {}",
                    m * a,
                    mu.cols()
                )));
            }
            let mut out = Vec::with_capacity(n);
            for r in 0..n {
                let joint = gmm_joint_log(
                    w.row_slice(r),
                    mu.row_slice(r),
                    ls.row_slice(r),
                    target.row_slice(r),
                );
                out.push(-log_sum_exp(&joint));
            }
            Tensor::from_parts(n, 1, out)
        };
        let ng = self.needs(logits.0) || self.needs(means.0) || self.needs(log_std.0);
        Ok(self.push(
            value,
            Op::GmmNll {
                logits: logits.0,
                means: means.0,
                log_std: log_std.0,
                target: target.clone(),
            },
            ng,
        ))
    }

    /// Row-wise softmax restricted to entries where `mask` is true; masked
    /// entries are exactly zero. Every row needs at least one open entry.
    pub fn masked_softmax(&self, logits: Var, mask: &[bool]) -> Result<Var> {
        let value = self.with_value(logits, |t| -> Result<Tensor> {
            if mask.len() != t.len() {
                return Err(Error::Shape("mask size".into()));
            }
            let c = t.cols();
            let mut out = vec![0.0; t.len()];
            for r in 0..t.rows() {
                let row = t.row_slice(r);
                let m = &mask[r * c..(r + 1) * c];
                let max = row
                    .iter()
                    .zip(m)
                    .filter(|(_, &open)| open)
                    .map(|(&v, _)| v)
                    .fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    return Err(Error::Degenerate(format!("row {r} has an empty support")));
                }
                let mut total = 0.0;
                for j in 0..c {
                    if m[j] {
                        let e = (row[j] - max).exp();
                        out[r * c + j] = e;
                        total += e;
                    }
                }
                out[r * c..(r + 1) * c].iter_mut().for_each(|v| *v /= total);
            }
            Ok(Tensor::from_parts(t.rows(), c, out))
        })?;
        let ng = self.needs(logits.0);
        Ok(self.push(value, Op::MaskedSoftmax(logits.0, mask.to_vec()), ng))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.non_finite.get() {
            return Err(Error::NonFinite("forward pass produced NaN or Inf".into()));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::Shape("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let out = &node.value;
            let mut send = |to: usize, delta: Tensor| {
                if !nodes[to].needs_grad {
                    return;
                }
                match &mut grads[to] {
                    Some(acc) => acc.add_assign(&delta),
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    if nodes[*a].needs_grad {
                        send(*a, g.matmul_t(bv));
                    }
                    if nodes[*b].needs_grad {
                        send(*b, av.t_matmul(&g));
                    }
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    send(*b, g.map(|v| -v));
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    send(*a, g.zip_map(bv, |gv, y| gv * y));
                    send(*b, g.zip_map(av, |gv, x| gv * x));
                }
                Op::AddBias(a, b) => {
                    let mut db = vec![0.0; g.cols()];
                    for r in 0..g.rows() {
                        for (d, &v) in db.iter_mut().zip(g.row_slice(r)) {
                            *d += v;
                        }
                    }
                    send(*b, Tensor::row(&db));
                    send(*a, g);
                }
                Op::Scale(a, s) => send(*a, g.map(|v| v * s)),
                Op::Relu(a) => {
                    let x = &nodes[*a].value;
                    send(*a, g.zip_map(x, |gv, xv| if xv > 0.0 { gv } else { 0.0 }));
                }
                Op::Tanh(a) => send(*a, g.zip_map(out, |gv, y| gv * (1.0 - y * y))),
                Op::Exp(a) => send(*a, g.zip_map(out, |gv, y| gv * y)),
                Op::Abs(a) => {
                    let x = &nodes[*a].value;
                    send(*a, g.zip_map(x, |gv, xv| gv * sign(xv)));
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = nodes[p].value.cols();
                        if nodes[p].needs_grad {
                            let mut data = Vec::with_capacity(g.rows() * w);
                            for r in 0..g.rows() {
                                data.extend_from_slice(&g.row_slice(r)[offset..offset + w]);
                            }
                            send(p, Tensor::from_parts(g.rows(), w, data));
                        }
                        offset += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let src = &nodes[*a].value;
                    let mut d = Tensor::zeros(src.rows(), src.cols());
                    for r in 0..g.rows() {
                        d.row_slice_mut(r)[*start..*start + g.cols()]
                            .copy_from_slice(g.row_slice(r));
                    }
                    send(*a, d);
                }
                Op::Reshape(a) => {
                    let src = &nodes[*a].value;
                    send(*a, Tensor::from_parts(src.rows(), src.cols(), g.into_data()));
                }
                Op::GatherRows(table, indices) => {
                    let src = &nodes[*table].value;
                    let mut d = Tensor::zeros(src.rows(), src.cols());
                    for (r, &i) in indices.iter().enumerate() {
                        for (dv, &gv) in d.row_slice_mut(i).iter_mut().zip(g.row_slice(r)) {
                            *dv += gv;
                        }
                    }
                    send(*table, d);
                }
                Op::StraightThrough(q) => send(*q, g),
                Op::Sum(a) => {
                    let src = &nodes[*a].value;
                    send(*a, Tensor::filled(src.rows(), src.cols(), g.item()));
                }
                Op::Mean(a) => {
                    let src = &nodes[*a].value;
                    let v = g.item() / src.len() as f64;
                    send(*a, Tensor::filled(src.rows(), src.cols(), v));
                }
                Op::RowSum(a) => {
                    let src = &nodes[*a].value;
                    let mut d = Tensor::zeros(src.rows(), src.cols());
                    for r in 0..src.rows() {
                        let gv = g.get(r, 0);
                        d.row_slice_mut(r).iter_mut().for_each(|v| *v = gv);
                    }
                    send(*a, d);
                }
                Op::CosineRows(a, b) => {
                    let (x, y) = (&nodes[*a].value, &nodes[*b].value);
                    let mut dx = Tensor::zeros(x.rows(), x.cols());
                    let mut dy = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..x.rows() {
                        let (xr, yr) = (x.row_slice(r), y.row_slice(r));
                        let (c, nx, ny) =
                            cosine_parts(xr, yr).expect("validated in forward pass");
                        let gv = g.get(r, 0);
                        let dxr = dx.row_slice_mut(r);
                        for j in 0..xr.len() {
                            dxr[j] = gv * (yr[j] / (nx * ny) - c * xr[j] / (nx * nx));
                        }
                        let dyr = dy.row_slice_mut(r);
                        for j in 0..yr.len() {
                            dyr[j] = gv * (xr[j] / (nx * ny) - c * yr[j] / (ny * ny));
                        }
                    }
                    send(*a, dx);
                    send(*b, dy);
                }
                Op::SoftmaxCrossEntropy(a, targets) => {
                    let x = &nodes[*a].value;
                    let mut d = Tensor::zeros(x.rows(), x.cols());
                    for (r, &t) in targets.iter().enumerate() {
                        let row = x.row_slice(r);
                        let lse = log_sum_exp(row);
                        let gv = g.get(r, 0);
                        let dr = d.row_slice_mut(r);
                        for j in 0..row.len() {
                            let p = (row[j] - lse).exp();
                            dr[j] = gv * (p - if j == t { 1.0 } else { 0.0 });
                        }
                    }
                    send(*a, d);
                }
                Op::GmmNll {
                    logits,
                    means,
                    log_std,
                    target,
                } => {
                    let (w, mu, ls) = (
                        &nodes[*logits].value,
                        &nodes[*means].value,
                        &nodes[*log_std].value,
                    );
                    let (n, m) = (w.rows(), w.cols());
                    let a = target.cols();
                    let mut dw = Tensor::zeros(n, m);
                    let mut dmu = Tensor::zeros(n, m * a);
                    let mut dls = Tensor::zeros(n, m * a);
                    for r in 0..n {
                        let (wr, mr, lr, xr) = (
                            w.row_slice(r),
                            mu.row_slice(r),
                            ls.row_slice(r),
                            target.row_slice(r),
                        );
                        let joint = gmm_joint_log(wr, mr, lr, xr);
                        let lse_joint = log_sum_exp(&joint);
                        let lse_w = log_sum_exp(wr);
                        let gv = g.get(r, 0);
                        for k in 0..m {
                            let post = (joint[k] - lse_joint).exp();
                            let prior = (wr[k] - lse_w).exp();
                            dw.row_slice_mut(r)[k] = gv * (prior - post);
                            for d in 0..a {
                                let j = k * a + d;
                                let inv_var = (-2.0 * lr[j]).exp();
                                let diff = xr[d] - mr[j];
                                dmu.row_slice_mut(r)[j] = -gv * post * diff * inv_var;
                                dls.row_slice_mut(r)[j] =
                                    -gv * post * (diff * diff * inv_var - 1.0);
                            }
                        }
                    }
                    send(*logits, dw);
                    send(*means, dmu);
                    send(*log_std, dls);
                }
                Op::MaskedSoftmax(a, mask) => {
                    let c = out.cols();
                    let mut d = Tensor::zeros(out.rows(), c);
                    for r in 0..out.rows() {
                        let y = out.row_slice(r);
                        let gr = g.row_slice(r);
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        let dr = d.row_slice_mut(r);
                        for j in 0..c {
                            if mask[r * c + j] {
                                dr[j] = y[j] * (gr[j] - dot);
                            }
                        }
                    }
                    send(*a, d);
                }
            }
        }

        let mut by_param = Vec::new();
        for (&id, &idx) in self.bound.borrow().iter() {
            if let Some(g) = grads[idx].take() {
                by_param.push((id, g));
            }
        }
        by_param.sort_by_key(|(id, _)| *id);
        Ok(Gradients {
            params: by_param,
            leaves: grads,
        })
    }
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    params: Vec<(ParamId, Tensor)>,
    leaves: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    pub fn params(&self) -> &[(ParamId, Tensor)] {
        &self.params
    }

    /// Gradient of a free leaf created by [`Tape::leaf`].
    pub fn leaf(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(v.0).and_then(Option::as_ref)
    }

    /// Overwrite `store` gradients: zero everywhere, then the computed ones.
    pub fn write_to(&self, store: &mut ParamStore) {
        store.zero_grad();
        for (id, g) in &self.params {
            store.get_mut(*id).grad = g.clone();
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `(cos, |a|, |b|)` or a degenerate-input error when either norm is zero.
pub(crate) fn cosine_parts(a: &[f64], b: &[f64]) -> Result<(f64, f64, f64)> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("cosine similarity of a zero vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb), na, nb))
}

/// Per-component `log w_k + log N(x; mu_k, sigma_k)` with `w` from logits.
pub(crate) fn gmm_joint_log(logits: &[f64], means: &[f64], log_std: &[f64], x: &[f64]) -> Vec<f64> {
    let a = x.len();
    let lse = log_sum_exp(logits);
    logits
        .iter()
        .enumerate()
        .map(|(k, &w)| {
            let mut lp = w - lse;
            for d in 0..a {
                let j = k * a + d;
                let z = (x[d] - means[j]) * (-log_std[j]).exp();
                lp += -0.5 * z * z - log_std[j] - 0.5 * LN_2PI;
            }
            lp
        })
        .collect()
}
