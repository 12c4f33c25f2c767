//! Reverse-mode automatic differentiation over dense row-major `f64` tensors.
//!
//! Nodes are reference-counted; each op output stores its parents and a
//! closure that routes the output gradient into them. A graph record is
//! created only when gradients are enabled and some input requires them, so
//! evaluation inside [`no_grad`] runs with zero bookkeeping.
//!
//! Invariants enforced here:
//! - every op validates shapes before touching data and reports both shapes
//!   on mismatch;
//! - op outputs and accumulated gradients are scanned for non-finite values,
//!   which are hard errors rather than silent propagation;
//! - gradients accumulate across backward calls until explicitly zeroed;
//! - backward closures capture parent tensors and plain buffers, never the
//!   output node, so graphs are acyclic and free with the loss.

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("l2_normalize_rows: row {row} has norm below 1e-12")]
    ZeroNorm { row: usize },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward: tensor with shape {shape:?} is not a scalar")]
    NotScalar { shape: Vec<usize> },
    #[error("backward: no computation graph is attached to this tensor")]
    NoGraph,
}

pub type Result<T> = std::result::Result<T, TensorError>;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with graph recording disabled on this thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

type BackwardFn = Box<dyn Fn(&[f64])>;

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// Shared handle to one node of the computation graph.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<Inner>>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("id", &inner.id)
            .field("shape", &inner.shape)
            .field("requires_grad", &inner.requires_grad)
            .finish()
    }
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn ensure_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

impl Tensor {
    fn make(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Tensor {
        Tensor {
            inner: Rc::new(RefCell::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                grad: None,
                requires_grad,
                parents: Vec::new(),
                backward: None,
            })),
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if numel_of(shape) != data.len() {
            return Err(TensorError::Invalid {
                op: "from_vec",
                msg: format!("shape {:?} wants {} values, got {}", shape, numel_of(shape), data.len()),
            });
        }
        ensure_finite("from_vec", &data)?;
        Ok(Tensor::make(shape.to_vec(), data, false))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::make(shape.to_vec(), vec![0.0; numel_of(shape)], false)
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        Tensor::make(shape.to_vec(), vec![v; numel_of(shape)], false)
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(v: f64) -> Tensor {
        Tensor::make(Vec::new(), vec![v], false)
    }

    /// Trainable leaf: participates in every gradient computation.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let t = Tensor::from_vec(shape, data)?;
        t.inner.borrow_mut().requires_grad = true;
        Ok(t)
    }

    fn op_output(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: impl Fn(&[f64]) + 'static,
    ) -> Result<Tensor> {
        ensure_finite(op, &data)?;
        let track = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        let out = Tensor::make(shape, data, track);
        if track {
            let mut inner = out.inner.borrow_mut();
            inner.parents = parents;
            inner.backward = Some(Box::new(backward));
        }
        Ok(out)
    }

    pub fn id(&self) -> u64 {
        self.inner.borrow().id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn ndim(&self) -> usize {
        self.inner.borrow().shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    /// Borrowed view of the raw values; hold it briefly.
    pub fn data(&self) -> Ref<'_, [f64]> {
        Ref::map(self.inner.borrow(), |i| i.data.as_slice())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        let inner = self.inner.borrow();
        assert_eq!(inner.data.len(), 1, "item() on tensor with shape {:?}", inner.shape);
        inner.data[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// In-place update of a leaf's values (optimizer steps, checkpoint load).
    pub fn modify_data(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.inner.borrow_mut().data);
    }

    fn accumulate(&self, g: &[f64]) {
        let mut inner = self.inner.borrow_mut();
        if !inner.requires_grad {
            return;
        }
        let grad = inner.grad.get_or_insert_with(|| vec![0.0; g.len()]);
        debug_assert_eq!(grad.len(), g.len());
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }

    fn topo_order(&self) -> Vec<Tensor> {
        enum Frame {
            Enter(Tensor),
            Exit(Tensor),
        }
        let mut order = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack = vec![Frame::Enter(self.clone())];
        while let Some(frame) = stack.pop() {
            match frame {
                Frame::Enter(t) => {
                    if !visited.insert(t.id()) {
                        continue;
                    }
                    stack.push(Frame::Exit(t.clone()));
                    for p in t.inner.borrow().parents.iter() {
                        if p.requires_grad() && !visited.contains(&p.id()) {
                            stack.push(Frame::Enter(p.clone()));
                        }
                    }
                }
                Frame::Exit(t) => order.push(t),
            }
        }
        order
    }

    /// Reverse-mode sweep from a scalar. Gradients add onto whatever is
    /// already stored, so callers zero parameters between steps.
    pub fn backward(&self) -> Result<()> {
        {
            let inner = self.inner.borrow();
            if inner.data.len() != 1 {
                return Err(TensorError::NotScalar { shape: inner.shape.clone() });
            }
            if inner.backward.is_none() {
                return Err(TensorError::NoGraph);
            }
        }
        let order = self.topo_order();
        self.accumulate(&[1.0]);
        for node in order.iter().rev() {
            let grad = node.inner.borrow().grad.clone();
            if let Some(g) = grad {
                let inner = node.inner.borrow();
                if let Some(f) = inner.backward.as_ref() {
                    f(&g);
                }
            }
        }
        for node in &order {
            if let Some(g) = node.inner.borrow().grad.as_deref() {
                ensure_finite("backward", g)?;
            }
        }
        Ok(())
    }
}

// ── elementwise binary ops with limited broadcasting ──

#[derive(Clone, Copy)]
enum Bcast {
    /// Identical shapes.
    Same,
    /// Right side has one element.
    RScalar,
    /// Left side has one element.
    LScalar,
    /// Right shape is a suffix of the left shape (bias over rows).
    RSuffix { suf: usize },
}

fn classify(op: &'static str, l: &[usize], r: &[usize]) -> Result<Bcast> {
    if l == r {
        return Ok(Bcast::Same);
    }
    let (ln, rn) = (numel_of(l), numel_of(r));
    if rn == 1 {
        return Ok(Bcast::RScalar);
    }
    if ln == 1 {
        return Ok(Bcast::LScalar);
    }
    if r.len() < l.len() && l[l.len() - r.len()..] == *r {
        return Ok(Bcast::RSuffix { suf: rn });
    }
    Err(TensorError::ShapeMismatch { op, lhs: l.to_vec(), rhs: r.to_vec() })
}

fn binary_forward(kind: Bcast, l: &[f64], r: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    match kind {
        Bcast::Same => l.iter().zip(r).map(|(&a, &b)| f(a, b)).collect(),
        Bcast::RScalar => l.iter().map(|&a| f(a, r[0])).collect(),
        Bcast::LScalar => r.iter().map(|&b| f(l[0], b)).collect(),
        Bcast::RSuffix { suf, .. } => l
            .iter()
            .enumerate()
            .map(|(i, &a)| f(a, r[i % suf]))
            .collect(),
    }
}

/// Folds a full-size gradient back to the broadcast operand's size.
fn reduce_to_operand(kind: Bcast, full: &[f64], operand_len: usize, left: bool) -> Vec<f64> {
    let shrink = match kind {
        Bcast::Same => false,
        Bcast::RScalar => !left,
        Bcast::LScalar => left,
        Bcast::RSuffix { .. } => !left,
    };
    if !shrink {
        return full.to_vec();
    }
    let mut out = vec![0.0; operand_len];
    for (i, &g) in full.iter().enumerate() {
        out[i % operand_len] += g;
    }
    out
}

impl Tensor {
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        let (ls, rs) = (self.shape(), rhs.shape());
        let kind = classify("add", &ls, &rs)?;
        let out_shape = if matches!(kind, Bcast::LScalar) { rs } else { ls };
        let data = binary_forward(kind, &self.data(), &rhs.data(), |a, b| a + b);
        let (lt, rt) = (self.clone(), rhs.clone());
        let (ln, rn) = (self.numel(), rhs.numel());
        Tensor::op_output("add", out_shape, data, vec![lt.clone(), rt.clone()], move |g| {
            lt.accumulate(&reduce_to_operand(kind, g, ln, true));
            rt.accumulate(&reduce_to_operand(kind, g, rn, false));
        })
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        let (ls, rs) = (self.shape(), rhs.shape());
        let kind = classify("sub", &ls, &rs)?;
        let out_shape = if matches!(kind, Bcast::LScalar) { rs } else { ls };
        let data = binary_forward(kind, &self.data(), &rhs.data(), |a, b| a - b);
        let (lt, rt) = (self.clone(), rhs.clone());
        let (ln, rn) = (self.numel(), rhs.numel());
        Tensor::op_output("sub", out_shape, data, vec![lt.clone(), rt.clone()], move |g| {
            lt.accumulate(&reduce_to_operand(kind, g, ln, true));
            let mut gr = reduce_to_operand(kind, g, rn, false);
            for v in &mut gr {
                *v = -*v;
            }
            rt.accumulate(&gr);
        })
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (ls, rs) = (self.shape(), rhs.shape());
        let kind = classify("mul", &ls, &rs)?;
        let out_shape = if matches!(kind, Bcast::LScalar) { rs } else { ls };
        let data = binary_forward(kind, &self.data(), &rhs.data(), |a, b| a * b);
        let (lt, rt) = (self.clone(), rhs.clone());
        let (ln, rn) = (self.numel(), rhs.numel());
        Tensor::op_output("mul", out_shape, data, vec![lt.clone(), rt.clone()], move |g| {
            let gl_full: Vec<f64> = {
                let rd = rt.data();
                match kind {
                    Bcast::Same => g.iter().zip(rd.iter()).map(|(&gv, &b)| gv * b).collect(),
                    Bcast::RScalar => g.iter().map(|&gv| gv * rd[0]).collect(),
                    Bcast::LScalar => g.iter().zip(rd.iter()).map(|(&gv, &b)| gv * b).collect(),
                    Bcast::RSuffix { suf, .. } => {
                        g.iter().enumerate().map(|(i, &gv)| gv * rd[i % suf]).collect()
                    }
                }
            };
            lt.accumulate(&reduce_to_operand(kind, &gl_full, ln, true));
            let gr_full: Vec<f64> = {
                let ld = lt.data();
                match kind {
                    Bcast::LScalar => g.iter().map(|&gv| gv * ld[0]).collect(),
                    _ => g
                        .iter()
                        .enumerate()
                        .map(|(i, &gv)| gv * ld[if ld.len() == 1 { 0 } else { i }])
                        .collect(),
                }
            };
            rt.accumulate(&reduce_to_operand(kind, &gr_full, rn, false));
        })
    }

    /// `scale * x + shift` in one node.
    pub fn affine(&self, scale: f64, shift: f64) -> Result<Tensor> {
        let data: Vec<f64> = self.data().iter().map(|&v| scale * v + shift).collect();
        let parent = self.clone();
        Tensor::op_output("affine", self.shape(), data, vec![parent.clone()], move |g| {
            let gp: Vec<f64> = g.iter().map(|&v| v * scale).collect();
            parent.accumulate(&gp);
        })
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        self.affine(c, 0.0)
    }

    pub fn exp(&self) -> Result<Tensor> {
        let data: Vec<f64> = self.data().iter().map(|v| v.exp()).collect();
        let parent = self.clone();
        let saved = data.clone();
        Tensor::op_output("exp", self.shape(), data, vec![parent.clone()], move |g| {
            let gp: Vec<f64> = g.iter().zip(&saved).map(|(&gv, &y)| gv * y).collect();
            parent.accumulate(&gp);
        })
    }

    /// Elementwise `min(x, cap)`; the gradient is zero where the cap binds.
    pub fn clamp_max(&self, cap: f64) -> Result<Tensor> {
        let data: Vec<f64> = self.data().iter().map(|&v| v.min(cap)).collect();
        let parent = self.clone();
        Tensor::op_output("clamp_max", self.shape(), data, vec![parent.clone()], move |g| {
            let gp: Vec<f64> = {
                let pd = parent.data();
                g.iter().zip(pd.iter()).map(|(&gv, &x)| if x < cap { gv } else { 0.0 }).collect()
            };
            parent.accumulate(&gp);
        })
    }

    /// Gaussian error linear unit, tanh approximation.
    pub fn gelu(&self) -> Result<Tensor> {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const A: f64 = 0.044_715;
        let data: Vec<f64> = self
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh()))
            .collect();
        let parent = self.clone();
        Tensor::op_output("gelu", self.shape(), data, vec![parent.clone()], move |g| {
            let gp: Vec<f64> = {
                let pd = parent.data();
                g.iter()
                    .zip(pd.iter())
                    .map(|(&gv, &x)| {
                        let t = (C * (x + A * x * x * x)).tanh();
                        let d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
                        gv * d
                    })
                    .collect()
            };
            parent.accumulate(&gp);
        })
    }

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (ls, rs) = (self.shape(), rhs.shape());
        if ls.len() != 2 || rs.len() != 2 || ls[1] != rs[0] {
            return Err(TensorError::ShapeMismatch { op: "matmul", lhs: ls, rhs: rs });
        }
        let (m, k, n) = (ls[0], ls[1], rs[1]);
        let mut data = vec![0.0; m * n];
        {
            let a = self.data();
            let b = rhs.data();
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                let orow = &mut data[i * n..(i + 1) * n];
                for (p, &av) in arow.iter().enumerate() {
                    let brow = &b[p * n..(p + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
        let (lt, rt) = (self.clone(), rhs.clone());
        Tensor::op_output("matmul", vec![m, n], data, vec![lt.clone(), rt.clone()], move |g| {
            let gl: Vec<f64> = {
                let b = rt.data();
                let mut gl = vec![0.0; m * k];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &b[p * n..(p + 1) * n];
                        gl[i * k + p] += grow.iter().zip(brow).map(|(&x, &y)| x * y).sum::<f64>();
                    }
                }
                gl
            };
            lt.accumulate(&gl);
            let gr: Vec<f64> = {
                let a = lt.data();
                let mut gr = vec![0.0; k * n];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    let arow = &a[i * k..(i + 1) * k];
                    for (p, &av) in arow.iter().enumerate() {
                        let out = &mut gr[p * n..(p + 1) * n];
                        for (o, &gv) in out.iter_mut().zip(grow) {
                            *o += av * gv;
                        }
                    }
                }
                gr
            };
            rt.accumulate(&gr);
        })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(TensorError::Invalid {
                op: "transpose",
                msg: format!("expects a matrix, got shape {s:?}"),
            });
        }
        let (m, n) = (s[0], s[1]);
        let src = self.data().to_vec();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let parent = self.clone();
        Tensor::op_output("transpose", vec![n, m], data, vec![parent.clone()], move |g| {
            let mut gp = vec![0.0; m * n];
            for j in 0..n {
                for i in 0..m {
                    gp[i * n + j] = g[j * m + i];
                }
            }
            parent.accumulate(&gp);
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.to_vec();
        let parent = self.clone();
        Tensor::op_output("reshape", shape.to_vec(), data, vec![parent.clone()], move |g| {
            parent.accumulate(g);
        })
    }

    pub fn sum_all(&self) -> Result<Tensor> {
        let s: f64 = self.data().iter().sum();
        let parent = self.clone();
        let n = self.numel();
        Tensor::op_output("sum_all", Vec::new(), vec![s], vec![parent.clone()], move |g| {
            parent.accumulate(&vec![g[0]; n]);
        })
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        let n = self.numel();
        if n == 0 {
            return Err(TensorError::Invalid { op: "mean_all", msg: "empty tensor".into() });
        }
        let s: f64 = self.data().iter().sum::<f64>() / n as f64;
        let parent = self.clone();
        Tensor::op_output("mean_all", Vec::new(), vec![s], vec![parent.clone()], move |g| {
            parent.accumulate(&vec![g[0] / n as f64; n]);
        })
    }

    /// Mean over one axis; the axis disappears from the shape.
    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        let s = self.shape();
        if axis >= s.len() {
            return Err(TensorError::Invalid {
                op: "mean_axis",
                msg: format!("axis {axis} out of range for shape {s:?}"),
            });
        }
        let pre: usize = s[..axis].iter().product();
        let mid = s[axis];
        let post: usize = s[axis + 1..].iter().product();
        let mut out_shape = s.clone();
        out_shape.remove(axis);
        let mut data = vec![0.0; pre * post];
        {
            let x = self.data();
            for p in 0..pre {
                for m in 0..mid {
                    let base = (p * mid + m) * post;
                    let orow = &mut data[p * post..(p + 1) * post];
                    for (o, &v) in orow.iter_mut().zip(&x[base..base + post]) {
                        *o += v;
                    }
                }
            }
            for v in &mut data {
                *v /= mid as f64;
            }
        }
        let parent = self.clone();
        Tensor::op_output("mean_axis", out_shape, data, vec![parent.clone()], move |g| {
            let mut gp = vec![0.0; pre * mid * post];
            for p in 0..pre {
                let grow = &g[p * post..(p + 1) * post];
                for m in 0..mid {
                    let base = (p * mid + m) * post;
                    for (o, &gv) in gp[base..base + post].iter_mut().zip(grow) {
                        *o = gv / mid as f64;
                    }
                }
            }
            parent.accumulate(&gp);
        })
    }

    fn rows_last(&self, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape();
        match s.last() {
            Some(&d) if d > 0 => Ok((self.numel() / d, d)),
            _ => Err(TensorError::Invalid { op, msg: format!("needs a nonempty last axis, shape {s:?}") }),
        }
    }

    /// Softmax over the last axis, numerically stabilized by row max.
    pub fn softmax_last(&self) -> Result<Tensor> {
        let (rows, d) = self.rows_last("softmax_last")?;
        let mut data = vec![0.0; rows * d];
        {
            let x = self.data();
            for r in 0..rows {
                let row = &x[r * d..(r + 1) * d];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let out = &mut data[r * d..(r + 1) * d];
                let mut sum = 0.0;
                for (o, &v) in out.iter_mut().zip(row) {
                    *o = (v - m).exp();
                    sum += *o;
                }
                for o in out.iter_mut() {
                    *o /= sum;
                }
            }
        }
        let parent = self.clone();
        let y = data.clone();
        Tensor::op_output("softmax_last", self.shape(), data, vec![parent.clone()], move |g| {
            let mut gp = vec![0.0; y.len()];
            for r in 0..rows {
                let yr = &y[r * d..(r + 1) * d];
                let gr = &g[r * d..(r + 1) * d];
                let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for ((o, &yv), &gv) in gp[r * d..(r + 1) * d].iter_mut().zip(yr).zip(gr) {
                    *o = yv * (gv - dot);
                }
            }
            parent.accumulate(&gp);
        })
    }

    /// Log-softmax over the last axis via the log-sum-exp identity.
    pub fn log_softmax_last(&self) -> Result<Tensor> {
        let (rows, d) = self.rows_last("log_softmax_last")?;
        let mut data = vec![0.0; rows * d];
        {
            let x = self.data();
            for r in 0..rows {
                let row = &x[r * d..(r + 1) * d];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
                for (o, &v) in data[r * d..(r + 1) * d].iter_mut().zip(row) {
                    *o = v - lse;
                }
            }
        }
        let parent = self.clone();
        let logp = data.clone();
        Tensor::op_output("log_softmax_last", self.shape(), data, vec![parent.clone()], move |g| {
            let mut gp = vec![0.0; logp.len()];
            for r in 0..rows {
                let lr = &logp[r * d..(r + 1) * d];
                let gr = &g[r * d..(r + 1) * d];
                let gsum: f64 = gr.iter().sum();
                for ((o, &lv), &gv) in gp[r * d..(r + 1) * d].iter_mut().zip(lr).zip(gr) {
                    *o = gv - lv.exp() * gsum;
                }
            }
            parent.accumulate(&gp);
        })
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
        const EPS: f64 = 1e-5;
        let (rows, d) = self.rows_last("layer_norm")?;
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape(),
                rhs: gain.shape(),
            });
        }
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut data = vec![0.0; rows * d];
        {
            let x = self.data();
            let g = gain.data();
            let b = bias.data();
            for r in 0..rows {
                let row = &x[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let is = 1.0 / (var + EPS).sqrt();
                inv_std[r] = is;
                for j in 0..d {
                    let xh = (row[j] - mean) * is;
                    xhat[r * d + j] = xh;
                    data[r * d + j] = xh * g[j] + b[j];
                }
            }
        }
        let (xt, gt, bt) = (self.clone(), gain.clone(), bias.clone());
        Tensor::op_output(
            "layer_norm",
            self.shape(),
            data,
            vec![xt.clone(), gt.clone(), bt.clone()],
            move |g| {
                let mut gx = vec![0.0; rows * d];
                let mut ggain = vec![0.0; d];
                let mut gbias = vec![0.0; d];
                {
                    let gainv = gt.data();
                    for r in 0..rows {
                        let xh = &xhat[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xh = 0.0;
                        for j in 0..d {
                            let dxh = gr[j] * gainv[j];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xh[j];
                            ggain[j] += gr[j] * xh[j];
                            gbias[j] += gr[j];
                        }
                        let is = inv_std[r];
                        for j in 0..d {
                            let dxh = gr[j] * gainv[j];
                            gx[r * d + j] =
                                is * (dxh - sum_dxh / d as f64 - xh[j] * sum_dxh_xh / d as f64);
                        }
                    }
                }
                xt.accumulate(&gx);
                gt.accumulate(&ggain);
                bt.accumulate(&gbias);
            },
        )
    }

    /// Scales every row (last axis) to unit Euclidean norm.
    pub fn l2_normalize_rows(&self) -> Result<Tensor> {
        let (rows, d) = self.rows_last("l2_normalize_rows")?;
        let mut data = vec![0.0; rows * d];
        let mut norms = vec![0.0; rows];
        {
            let x = self.data();
            for r in 0..rows {
                let row = &x[r * d..(r + 1) * d];
                let n = row.iter().map(|&v| v * v).sum::<f64>().sqrt();
                if n < 1e-12 {
                    return Err(TensorError::ZeroNorm { row: r });
                }
                norms[r] = n;
                for (o, &v) in data[r * d..(r + 1) * d].iter_mut().zip(row) {
                    *o = v / n;
                }
            }
        }
        let parent = self.clone();
        let y = data.clone();
        Tensor::op_output("l2_normalize_rows", self.shape(), data, vec![parent.clone()], move |g| {
            let mut gp = vec![0.0; y.len()];
            for r in 0..rows {
                let yr = &y[r * d..(r + 1) * d];
                let gr = &g[r * d..(r + 1) * d];
                let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for ((o, &yv), &gv) in gp[r * d..(r + 1) * d].iter_mut().zip(yr).zip(gr) {
                    *o = (gv - yv * dot) / norms[r];
                }
            }
            parent.accumulate(&gp);
        })
    }

    /// Row lookup into an embedding table; `self` is the `[vocab, d]` table.
    pub fn embed(&self, ids: &[usize]) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(TensorError::Invalid {
                op: "embed",
                msg: format!("table must be a matrix, got {s:?}"),
            });
        }
        let (vocab, d) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(TensorError::Invalid {
                op: "embed",
                msg: format!("id {bad} out of range for table with {vocab} rows"),
            });
        }
        let mut data = vec![0.0; ids.len() * d];
        {
            let t = self.data();
            for (r, &id) in ids.iter().enumerate() {
                data[r * d..(r + 1) * d].copy_from_slice(&t[id * d..(id + 1) * d]);
            }
        }
        let parent = self.clone();
        let ids: Rc<Vec<usize>> = Rc::new(ids.to_vec());
        let n = ids.len();
        Tensor::op_output("embed", vec![n, d], data, vec![parent.clone()], move |g| {
            let mut gp = vec![0.0; vocab * d];
            for (r, &id) in ids.iter().enumerate() {
                for (o, &gv) in gp[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                    *o += gv;
                }
            }
            parent.accumulate(&gp);
        })
    }

    /// `out[i] = x[map[i]]`; backward scatter-adds. The primitive behind
    /// row gathering and patch extraction.
    pub fn gather(&self, map: Rc<Vec<usize>>, out_shape: &[usize]) -> Result<Tensor> {
        if map.len() != numel_of(out_shape) {
            return Err(TensorError::Invalid {
                op: "gather",
                msg: format!("map has {} entries but out shape {:?} wants {}", map.len(), out_shape, numel_of(out_shape)),
            });
        }
        let n = self.numel();
        if let Some(&bad) = map.iter().find(|&&i| i >= n) {
            return Err(TensorError::Invalid {
                op: "gather",
                msg: format!("index {bad} out of range for {n} elements"),
            });
        }
        let data: Vec<f64> = {
            let x = self.data();
            map.iter().map(|&i| x[i]).collect()
        };
        let parent = self.clone();
        let map2 = Rc::clone(&map);
        Tensor::op_output("gather", out_shape.to_vec(), data, vec![parent.clone()], move |g| {
            let mut gp = vec![0.0; n];
            for (&i, &gv) in map2.iter().zip(g) {
                gp[i] += gv;
            }
            parent.accumulate(&gp);
        })
    }

    /// Selects whole rows of a matrix by index (duplicates allowed).
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                msg: format!("expects a matrix, got {s:?}"),
            });
        }
        let d = s[1];
        let mut map = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= s[0] {
                return Err(TensorError::Invalid {
                    op: "gather_rows",
                    msg: format!("row {r} out of range for {} rows", s[0]),
                });
            }
            map.extend((r * d)..(r * d + d));
        }
        self.gather(Rc::new(map), &[rows.len(), d])
    }
}

// ── fused multi-head scaled-dot-product attention ──

/// Geometry and masking for one fused attention call over a padded batch.
#[derive(Clone)]
pub struct AttnMeta {
    pub batch: usize,
    /// Padded sequence length; inputs are `[batch * len, d_model]`.
    pub len: usize,
    pub heads: usize,
    pub causal: bool,
    /// Valid (non-PAD) prefix length per sequence, each in `1..=len`.
    pub valid: Vec<usize>,
}

/// Softmax attention with padding and optional causal masking. Returns the
/// output and the attention weights laid out `[batch, heads, len, len]`;
/// masked entries stay exactly zero and every valid row sums to one.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, meta: &AttnMeta) -> Result<(Tensor, Rc<Vec<f64>>)> {
    let (b, l, h) = (meta.batch, meta.len, meta.heads);
    let qs = q.shape();
    if qs.len() != 2 || qs[0] != b * l || k.shape() != qs || v.shape() != qs {
        return Err(TensorError::ShapeMismatch { op: "attention", lhs: qs, rhs: k.shape() });
    }
    let dm = qs[1];
    if h == 0 || dm % h != 0 {
        return Err(TensorError::Invalid {
            op: "attention",
            msg: format!("d_model {dm} not divisible by {h} heads"),
        });
    }
    if meta.valid.len() != b || meta.valid.iter().any(|&x| x == 0 || x > l) {
        return Err(TensorError::Invalid {
            op: "attention",
            msg: format!("valid lengths {:?} inconsistent with batch {b} and len {l}", meta.valid),
        });
    }
    let dh = dm / h;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut weights = vec![0.0; b * h * l * l];
    let mut out = vec![0.0; b * l * dm];
    {
        let qd = q.data();
        let kd = k.data();
        let vd = v.data();
        let mut scores = vec![0.0; l];
        for bi in 0..b {
            let valid = meta.valid[bi];
            for hi in 0..h {
                let off = hi * dh;
                for i in 0..l {
                    let allowed = if meta.causal { valid.min(i + 1) } else { valid };
                    let qrow = &qd[(bi * l + i) * dm + off..(bi * l + i) * dm + off + dh];
                    let mut maxs = f64::NEG_INFINITY;
                    for j in 0..allowed {
                        let krow = &kd[(bi * l + j) * dm + off..(bi * l + j) * dm + off + dh];
                        let s = scale * qrow.iter().zip(krow).map(|(&a, &c)| a * c).sum::<f64>();
                        scores[j] = s;
                        maxs = maxs.max(s);
                    }
                    let mut sum = 0.0;
                    for s in scores[..allowed].iter_mut() {
                        *s = (*s - maxs).exp();
                        sum += *s;
                    }
                    let wrow = &mut weights[((bi * h + hi) * l + i) * l..((bi * h + hi) * l + i) * l + l];
                    let orow = &mut out[(bi * l + i) * dm + off..(bi * l + i) * dm + off + dh];
                    for j in 0..allowed {
                        let w = scores[j] / sum;
                        wrow[j] = w;
                        let vrow = &vd[(bi * l + j) * dm + off..(bi * l + j) * dm + off + dh];
                        for (o, &vv) in orow.iter_mut().zip(vrow) {
                            *o += w * vv;
                        }
                    }
                }
            }
        }
    }
    let weights = Rc::new(weights);
    let (qt, kt, vt) = (q.clone(), k.clone(), v.clone());
    let wsaved = Rc::clone(&weights);
    let meta2 = meta.clone();
    let out = Tensor::op_output(
        "attention",
        vec![b * l, dm],
        out,
        vec![qt.clone(), kt.clone(), vt.clone()],
        move |g| {
            let mut gq = vec![0.0; b * l * dm];
            let mut gk = vec![0.0; b * l * dm];
            let mut gv = vec![0.0; b * l * dm];
            {
                let qd = qt.data();
                let kd = kt.data();
                let vd = vt.data();
                let mut dw = vec![0.0; l];
                for bi in 0..b {
                    let valid = meta2.valid[bi];
                    for hi in 0..h {
                        let off = hi * dh;
                        for i in 0..l {
                            let allowed = if meta2.causal { valid.min(i + 1) } else { valid };
                            let grow = &g[(bi * l + i) * dm + off..(bi * l + i) * dm + off + dh];
                            let wrow = &wsaved
                                [((bi * h + hi) * l + i) * l..((bi * h + hi) * l + i) * l + l];
                            // dV and the raw weight gradient
                            let mut wdot = 0.0;
                            for j in 0..allowed {
                                let vrow = &vd[(bi * l + j) * dm + off..(bi * l + j) * dm + off + dh];
                                let d: f64 = grow.iter().zip(vrow).map(|(&a, &c)| a * c).sum();
                                dw[j] = d;
                                wdot += wrow[j] * d;
                                let gvrow =
                                    &mut gv[(bi * l + j) * dm + off..(bi * l + j) * dm + off + dh];
                                for (o, &gg) in gvrow.iter_mut().zip(grow) {
                                    *o += wrow[j] * gg;
                                }
                            }
                            // softmax backward, then into Q and K
                            let qrow_base = (bi * l + i) * dm + off;
                            for j in 0..allowed {
                                let ds = wrow[j] * (dw[j] - wdot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let krow = &kd[(bi * l + j) * dm + off..(bi * l + j) * dm + off + dh];
                                let qrow = &qd[qrow_base..qrow_base + dh];
                                let gqrow = &mut gq[qrow_base..qrow_base + dh];
                                for (o, &kv) in gqrow.iter_mut().zip(krow) {
                                    *o += ds * kv;
                                }
                                let gkrow =
                                    &mut gk[(bi * l + j) * dm + off..(bi * l + j) * dm + off + dh];
                                for (o, &qv) in gkrow.iter_mut().zip(qrow) {
                                    *o += ds * qv;
                                }
                            }
                        }
                    }
                }
            }
            qt.accumulate(&gq);
            kt.accumulate(&gk);
            vt.accumulate(&gv);
        },
    )?;
    Ok((out, weights))
}

/// Builds the gather map that splits `[batch, side, side, chans]` images into
/// non-overlapping `patch x patch` tiles, flattened per tile.
pub fn patch_map(batch: usize, side: usize, chans: usize, patch: usize) -> Result<Rc<Vec<usize>>> {
    if patch == 0 || side % patch != 0 {
        return Err(TensorError::Invalid {
            op: "patch_map",
            msg: format!("patch {patch} does not divide image side {side}"),
        });
    }
    let grid = side / patch;
    let mut map = Vec::with_capacity(batch * side * side * chans);
    for b in 0..batch {
        for py in 0..grid {
            for px in 0..grid {
                for dy in 0..patch {
                    for dx in 0..patch {
                        for c in 0..chans {
                            let y = py * patch + dy;
                            let x = px * patch + dx;
                            map.push(((b * side + y) * side + x) * chans + c);
                        }
                    }
                }
            }
        }
    }
    Ok(Rc::new(map))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn assert_vec_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (i, (&x, &y)) in a.iter().zip(b).enumerate() {
            assert!(close(x, y, tol), "index {i}: {x} vs {y}");
        }
    }

    #[test]
    fn from_vec_validates_numel() {
        assert!(Tensor::from_vec(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::from_vec(&[2, 2], vec![1.0; 4]).is_ok());
    }

    #[test]
    fn from_vec_rejects_non_finite() {
        assert!(Tensor::from_vec(&[2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::from_vec(&[2], vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn sum_of_squares_gradient() {
        let w = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let loss = w.mul(&w).unwrap().sum_all().unwrap();
        assert!(close(loss.item(), 5.0, 1e-12));
        loss.backward().unwrap();
        assert_vec_close(&w.grad().unwrap(), &[2.0, 4.0], 1e-12);
    }

    #[test]
    fn gradients_accumulate_until_zeroed() {
        let w = Tensor::param(&[1], vec![3.0]).unwrap();
        for _ in 0..2 {
            let loss = w.mul(&w).unwrap().sum_all().unwrap();
            loss.backward().unwrap();
        }
        assert_vec_close(&w.grad().unwrap(), &[12.0], 1e-12);
        w.zero_grad();
        assert!(w.grad().is_none());
    }

    #[test]
    fn backward_requires_scalar_and_graph() {
        let w = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        match w.mul(&w).unwrap().backward() {
            Err(TensorError::NotScalar { shape }) => assert_eq!(shape, vec![2]),
            other => panic!("expected NotScalar, got {other:?}"),
        }
        let leaf = Tensor::scalar(1.0);
        assert!(matches!(leaf.backward(), Err(TensorError::NoGraph)));
    }

    #[test]
    fn matmul_matches_hand_value() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_vec_close(&c.to_vec(), &[19.0, 22.0, 43.0, 50.0], 1e-12);
    }

    #[test]
    fn matmul_rejects_bad_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn add_broadcasts_bias_over_rows() {
        let x = Tensor::param(&[2, 3], vec![0.0; 6]).unwrap();
        let b = Tensor::param(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = x.add(&b).unwrap();
        assert_vec_close(&y.to_vec(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0], 1e-12);
        let loss = y.sum_all().unwrap();
        loss.backward().unwrap();
        assert_vec_close(&b.grad().unwrap(), &[2.0, 2.0, 2.0], 1e-12);
    }

    #[test]
    fn mismatched_shapes_error_names_both() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4]);
        match a.add(&b) {
            Err(TensorError::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4]);
            }
            other => panic!("expected ShapeMismatch, got {other:?}"),
        }
    }

    #[test]
    fn softmax_matches_hand_value() {
        let x = Tensor::from_vec(&[2], vec![2.0f64.ln(), 0.0]).unwrap();
        let y = x.softmax_last().unwrap();
        assert_vec_close(&y.to_vec(), &[2.0 / 3.0, 1.0 / 3.0], 1e-12);
    }

    #[test]
    fn log_softmax_consistent_with_softmax() {
        let x = Tensor::from_vec(&[2, 3], vec![0.3, -1.2, 2.0, 5.0, 5.0, 5.0]).unwrap();
        let a = x.softmax_last().unwrap().to_vec();
        let b: Vec<f64> = x.log_softmax_last().unwrap().to_vec().iter().map(|v| v.exp()).collect();
        assert_vec_close(&a, &b, 1e-12);
    }

    #[test]
    fn normalize_matches_hand_value_and_unit_norm() {
        let x = Tensor::from_vec(&[1, 2], vec![3.0, 4.0]).unwrap();
        let y = x.l2_normalize_rows().unwrap();
        assert_vec_close(&y.to_vec(), &[0.6, 0.8], 1e-12);
    }

    #[test]
    fn normalize_rejects_zero_rows() {
        let x = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        match x.l2_normalize_rows() {
            Err(TensorError::ZeroNorm { row }) => assert_eq!(row, 1),
            other => panic!("expected ZeroNorm, got {other:?}"),
        }
    }

    #[test]
    fn gelu_fixed_points() {
        let x = Tensor::from_vec(&[2], vec![0.0, 1.0]).unwrap();
        let y = x.gelu().unwrap().to_vec();
        assert!(close(y[0], 0.0, 1e-15));
        assert!(close(y[1], 0.841192, 1e-5), "gelu(1) = {}", y[1]);
    }

    #[test]
    fn clamp_max_zeroes_gradient_past_cap() {
        let x = Tensor::param(&[2], vec![1.0, 3.0]).unwrap();
        let y = x.clamp_max(2.0).unwrap();
        assert_vec_close(&y.to_vec(), &[1.0, 2.0], 1e-12);
        y.sum_all().unwrap().backward().unwrap();
        assert_vec_close(&x.grad().unwrap(), &[1.0, 0.0], 1e-12);
    }

    #[test]
    fn embed_looks_up_and_scatters() {
        let table = Tensor::param(&[3, 2], vec![0.0, 1.0, 10.0, 11.0, 20.0, 21.0]).unwrap();
        let out = table.embed(&[2, 0, 2]).unwrap();
        assert_vec_close(&out.to_vec(), &[20.0, 21.0, 0.0, 1.0, 20.0, 21.0], 1e-12);
        out.sum_all().unwrap().backward().unwrap();
        assert_vec_close(&table.grad().unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0], 1e-12);
        assert!(table.embed(&[3]).is_err());
    }

    #[test]
    fn gather_rows_duplicates_and_scatters() {
        let x = Tensor::param(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let y = x.gather_rows(&[1, 1]).unwrap();
        assert_vec_close(&y.to_vec(), &[3.0, 4.0, 3.0, 4.0], 1e-12);
        y.sum_all().unwrap().backward().unwrap();
        assert_vec_close(&x.grad().unwrap(), &[0.0, 0.0, 2.0, 2.0, 0.0, 0.0], 1e-12);
    }

    #[test]
    fn mean_axis_hand_value() {
        let x = Tensor::from_vec(&[2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let y = x.mean_axis(1).unwrap();
        assert_eq!(y.shape(), vec![2, 2]);
        assert_vec_close(&y.to_vec(), &[2.0, 3.0, 6.0, 7.0], 1e-12);
    }

    #[test]
    fn transpose_round_trips() {
        let x = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let y = x.transpose().unwrap();
        assert_eq!(y.shape(), vec![3, 2]);
        assert_vec_close(&y.transpose().unwrap().to_vec(), &x.to_vec(), 1e-15);
    }

    #[test]
    fn attention_causal_first_row_is_delta() {
        let q = Tensor::param(&[2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let k = q.clone();
        let v = Tensor::param(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let meta = AttnMeta { batch: 1, len: 2, heads: 1, causal: true, valid: vec![2] };
        let (out, w) = attention(&q, &k, &v, &meta).unwrap();
        // row 0 sees only token 0; row 1 has equal scores -> 0.5/0.5
        assert_vec_close(&w[..4], &[1.0, 0.0, 0.5, 0.5], 1e-12);
        assert_vec_close(&out.to_vec(), &[1.0, 2.0, 2.0, 3.0], 1e-12);
    }

    #[test]
    fn attention_masks_padded_keys() {
        let q = Tensor::param(&[2, 2], vec![0.3, -0.1, 0.7, 0.2]).unwrap();
        let k = Tensor::param(&[2, 2], vec![0.5, 0.5, -0.4, 0.9]).unwrap();
        let v = Tensor::param(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let meta = AttnMeta { batch: 1, len: 2, heads: 1, causal: false, valid: vec![1] };
        let (out, w) = attention(&q, &k, &v, &meta).unwrap();
        assert_vec_close(&w[..4], &[1.0, 0.0, 1.0, 0.0], 1e-12);
        assert_vec_close(&out.to_vec(), &[1.0, 2.0, 1.0, 2.0], 1e-12);
        // padded keys receive no gradient through attention
        out.gather_rows(&[0]).unwrap().sum_all().unwrap().backward().unwrap();
        let gv = v.grad().unwrap();
        assert_vec_close(&gv[2..], &[0.0, 0.0], 1e-15);
    }

    #[test]
    fn attention_rows_sum_to_one_over_valid() {
        let n = 3 * 4;
        let data: Vec<f64> = (0..n * 8).map(|i| ((i * 37 % 23) as f64 - 11.0) / 7.0).collect();
        let q = Tensor::from_vec(&[n, 8], data.clone()).unwrap();
        let k = Tensor::from_vec(&[n, 8], data.iter().map(|v| v * 0.7 + 0.1).collect()).unwrap();
        let v = Tensor::from_vec(&[n, 8], data.iter().map(|v| v - 0.2).collect()).unwrap();
        let meta = AttnMeta { batch: 3, len: 4, heads: 2, causal: true, valid: vec![4, 2, 3] };
        let (_, w) = attention(&q, &k, &v, &meta).unwrap();
        for b in 0..3 {
            for h in 0..2 {
                for i in 0..4 {
                    let row = &w[((b * 2 + h) * 4 + i) * 4..((b * 2 + h) * 4 + i) * 4 + 4];
                    let sum: f64 = row.iter().sum();
                    assert!(close(sum, 1.0, 1e-12), "row sum {sum}");
                    for (j, &wv) in row.iter().enumerate() {
                        let allowed = meta.valid[b].min(i + 1);
                        if j >= allowed {
                            assert_eq!(wv, 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn patch_map_covers_image_once() {
        let map = patch_map(1, 4, 1, 2).unwrap();
        let mut seen = vec![0usize; 16];
        for &i in map.iter() {
            seen[i] += 1;
        }
        assert!(seen.iter().all(|&c| c == 1));
        // first tile is the top-left 2x2 block
        assert_eq!(&map[..4], &[0, 1, 4, 5]);
    }

    #[test]
    fn no_grad_suppresses_graph() {
        let w = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let y = no_grad(|| w.mul(&w).unwrap());
        assert!(!y.requires_grad());
        assert!(matches!(y.sum_all().unwrap().backward(), Err(TensorError::NoGraph)));
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let x = Tensor::from_vec(&[1], vec![800.0]).unwrap();
        // exp(800) overflows f64
        assert!(matches!(x.exp(), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn self_multiplication_aliases_safely() {
        let x = Tensor::param(&[2], vec![2.0, 3.0]).unwrap();
        let y = x.mul(&x).unwrap();
        y.sum_all().unwrap().backward().unwrap();
        assert_vec_close(&x.grad().unwrap(), &[4.0, 6.0], 1e-12);
    }
}
