//! Dense N-dimensional float tensors with reverse-mode automatic
//! differentiation on a Wengert tape.
//!
//! Every differentiable value lives as a node on a [`Tape`]; operations
//! record a backward rule as they run, and [`Tape::backward`] replays the
//! rules in reverse. A node's element type is generic: `f32` for training
//! and inference, `f64` for gradient checks.

use std::fmt;

use num_traits::Float;
use thiserror::Error;

/// Element type of a tensor: `f32` for training, `f64` for gradient checks.
pub trait Scalar: Float + Default + fmt::Debug + fmt::Display + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> f32 {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> f64 {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {expected}, got shape {shape:?}")]
    Contract {
        op: &'static str,
        expected: &'static str,
        shape: Vec<usize>,
    },
    #[error("shape {shape:?} holds {expected} elements but data has {len}")]
    ShapeDataMismatch {
        shape: Vec<usize>,
        expected: usize,
        len: usize,
    },
}

/// A dense row-major tensor value. Immutable once placed on a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                expected,
                len: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![S::zero(); n],
        }
    }

    pub fn scalar(v: S) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_fn(shape: Vec<usize>, f: impl FnMut(usize) -> S) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: (0..n).map(f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Scalar tensors are shape [] or [1]; anything of one element counts.
    pub fn item(&self) -> S {
        debug_assert!(self.is_scalar());
        self.data[0]
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

type BackwardFn<S> = Box<dyn Fn(&mut BackwardCtx<'_, S>)>;

struct OpRecord<S> {
    #[allow(dead_code)]
    inputs: Vec<NodeId>,
    output: NodeId,
    backward: BackwardFn<S>,
}

/// Context handed to backward rules: read any node value, read the
/// upstream gradient of the op's output, accumulate into input gradients.
pub struct BackwardCtx<'a, S> {
    values: &'a [Tensor<S>],
    needs: &'a [bool],
    grads: &'a mut [Option<Vec<S>>],
    dout: &'a [S],
}

impl<'a, S: Scalar> BackwardCtx<'a, S> {
    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.values[id.0]
    }

    pub fn dout(&self) -> &[S] {
        self.dout
    }

    /// Whether gradient for this node is wanted at all (it is a leaf with
    /// `requires_grad` or feeds one). Backward rules may skip dead branches.
    pub fn needs(&self, id: NodeId) -> bool {
        self.needs[id.0]
    }

    /// Add `delta` into the gradient accumulator of `id`.
    pub fn accumulate(&mut self, id: NodeId, delta: &[S]) {
        let n = self.values[id.0].numel();
        debug_assert_eq!(delta.len(), n, "gradient length mismatch");
        let slot = &mut self.grads[id.0];
        match slot {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi = *gi + *di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }
}

/// The recording tape. Single-threaded per training step; tensors are
/// immutable once created.
pub struct Tape<S> {
    values: Vec<Tensor<S>>,
    requires_grad: Vec<bool>,
    needs_grad: Vec<bool>,
    grads: Vec<Option<Vec<S>>>,
    ops: Vec<OpRecord<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            requires_grad: Vec::new(),
            needs_grad: Vec::new(),
            grads: Vec::new(),
            ops: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Place a leaf tensor on the tape.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> NodeId {
        let id = NodeId(self.values.len());
        self.values.push(value);
        self.requires_grad.push(requires_grad);
        self.needs_grad.push(requires_grad);
        self.grads.push(None);
        id
    }

    pub fn constant(&mut self, value: Tensor<S>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn scalar_const(&mut self, v: S) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.values[id.0]
    }

    /// Gradient of a node; `None` until `backward` has run and only for
    /// nodes the loss actually reaches.
    pub fn grad(&self, id: NodeId) -> Option<&[S]> {
        self.grads[id.0].as_deref()
    }

    /// Record an op: output value plus its backward rule. Topological order
    /// holds by construction because inputs must already exist.
    pub fn push_op(
        &mut self,
        inputs: Vec<NodeId>,
        value: Tensor<S>,
        backward: BackwardFn<S>,
    ) -> NodeId {
        debug_assert!(
            value.data.iter().all(|v| v.is_finite()),
            "non-finite output from forward op"
        );
        let needs = inputs.iter().any(|i| self.needs_grad[i.0]);
        let id = NodeId(self.values.len());
        self.values.push(value);
        self.requires_grad.push(false);
        self.needs_grad.push(needs);
        self.grads.push(None);
        self.ops.push(OpRecord {
            inputs,
            output: id,
            backward,
        });
        id
    }

    /// Reverse pass from a scalar loss. Existing gradients are zeroed at
    /// call start, so repeated calls are idempotent.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TensorError> {
        if !self.values[loss.0].is_scalar() {
            return Err(TensorError::Contract {
                op: "backward",
                expected: "a scalar loss",
                shape: self.values[loss.0].shape.clone(),
            });
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![S::one()]);
        for i in (0..self.ops.len()).rev() {
            let out = self.ops[i].output;
            let dout = match &self.grads[out.0] {
                Some(g) => g.clone(),
                None => continue,
            };
            let mut ctx = BackwardCtx {
                values: &self.values,
                needs: &self.needs_grad,
                grads: &mut self.grads,
                dout: &dout,
            };
            (self.ops[i].backward)(&mut ctx);
        }
        Ok(())
    }

    // ---- ops -----------------------------------------------------------

    /// C = A @ B with A: [m,k], B: [k,n].
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(vec![m, n], out).unwrap();
        Ok(self.push_op(
            vec![a, b],
            value,
            Box::new(move |ctx| {
                let dout = ctx.dout().to_vec();
                if ctx.needs(a) {
                    // dA = dC @ B^T
                    let bv = ctx.value(b).data().to_vec();
                    let mut da = vec![S::zero(); m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let d = dout[i * n + j];
                            for kk in 0..k {
                                da[i * k + kk] = da[i * k + kk] + d * bv[kk * n + j];
                            }
                        }
                    }
                    ctx.accumulate(a, &da);
                }
                if ctx.needs(b) {
                    // dB = A^T @ dC
                    let av = ctx.value(a).data().to_vec();
                    let mut db = vec![S::zero(); k * n];
                    for i in 0..m {
                        for kk in 0..k {
                            let aik = av[i * k + kk];
                            for j in 0..n {
                                db[kk * n + j] = db[kk * n + j] + aik * dout[i * n + j];
                            }
                        }
                    }
                    ctx.accumulate(b, &db);
                }
            }),
        ))
    }

    /// C = A^T @ B with A: [k,m], B: [k,n].
    pub fn matmul_tn(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_tn",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (k, m, n) = (sa[0], sa[1], sb[1]);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![S::zero(); m * n];
        for kk in 0..k {
            for i in 0..m {
                let aki = av[kk * m + i];
                for j in 0..n {
                    out[i * n + j] = out[i * n + j] + aki * bv[kk * n + j];
                }
            }
        }
        let value = Tensor::new(vec![m, n], out).unwrap();
        Ok(self.push_op(
            vec![a, b],
            value,
            Box::new(move |ctx| {
                let dout = ctx.dout().to_vec();
                if ctx.needs(a) {
                    // dA = B @ dC^T : [k,n]x[n,m] -> [k,m]
                    let bv = ctx.value(b).data().to_vec();
                    let mut da = vec![S::zero(); k * m];
                    for kk in 0..k {
                        for j in 0..n {
                            let bkj = bv[kk * n + j];
                            for i in 0..m {
                                da[kk * m + i] = da[kk * m + i] + bkj * dout[i * n + j];
                            }
                        }
                    }
                    ctx.accumulate(a, &da);
                }
                if ctx.needs(b) {
                    // dB = A @ dC : [k,m]x[m,n] -> [k,n]
                    let av = ctx.value(a).data().to_vec();
                    let db = matmul_raw(&av, &dout, k, m, n);
                    ctx.accumulate(b, &db);
                }
            }),
        ))
    }

    /// C = A @ B^T with A: [m,k], B: [n,k].
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = S::zero();
                for kk in 0..k {
                    acc = acc + av[i * k + kk] * bv[j * k + kk];
                }
                out[i * n + j] = acc;
            }
        }
        let value = Tensor::new(vec![m, n], out).unwrap();
        Ok(self.push_op(
            vec![a, b],
            value,
            Box::new(move |ctx| {
                let dout = ctx.dout().to_vec();
                if ctx.needs(a) {
                    // dA = dC @ B : [m,n]x[n,k] -> [m,k]
                    let bv = ctx.value(b).data().to_vec();
                    let da = matmul_raw(&dout, &bv, m, n, k);
                    ctx.accumulate(a, &da);
                }
                if ctx.needs(b) {
                    // dB = dC^T @ A : [n,m]x[m,k] -> [n,k]
                    let av = ctx.value(a).data().to_vec();
                    let mut db = vec![S::zero(); n * k];
                    for i in 0..m {
                        for j in 0..n {
                            let d = dout[i * n + j];
                            for kk in 0..k {
                                db[j * k + kk] = db[j * k + kk] + d * av[i * k + kk];
                            }
                        }
                    }
                    ctx.accumulate(b, &db);
                }
            }),
        ))
    }

    /// Row-wise softmax over a 2-D tensor, max-subtracted for stability.
    pub fn softmax_rows(&mut self, s: NodeId) -> Result<NodeId, TensorError> {
        let shape = self.value(s).shape().to_vec();
        if shape.len() != 2 {
            return Err(TensorError::Contract {
                op: "softmax_rows",
                expected: "a 2-D tensor",
                shape,
            });
        }
        let (rows, cols) = (shape[0], shape[1]);
        let sv = self.value(s).data();
        let mut out = vec![S::zero(); rows * cols];
        for r in 0..rows {
            let row = &sv[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut sum = S::zero();
            for c in 0..cols {
                let e = (row[c] - max).exp();
                out[r * cols + c] = e;
                sum = sum + e;
            }
            for c in 0..cols {
                out[r * cols + c] = out[r * cols + c] / sum;
            }
        }
        // Save the output for the backward rule: ds = y * (dout - <dout, y>).
        let y_saved = out.clone();
        let value = Tensor::new(shape, out).unwrap();
        Ok(self.push_op(
            vec![s],
            value,
            Box::new(move |ctx| {
                if !ctx.needs(s) {
                    return;
                }
                let dout = ctx.dout();
                let mut ds = vec![S::zero(); rows * cols];
                for r in 0..rows {
                    let base = r * cols;
                    let mut dot = S::zero();
                    for c in 0..cols {
                        dot = dot + dout[base + c] * y_saved[base + c];
                    }
                    for c in 0..cols {
                        ds[base + c] = y_saved[base + c] * (dout[base + c] - dot);
                    }
                }
                ctx.accumulate(s, &ds);
            }),
        ))
    }

    /// Elementwise a + b; `b` may be a scalar broadcast over `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary_ew("add", a, b, |x, y| x + y, |_, _| (S::one(), S::one()))
    }

    /// Elementwise a - b; `b` may be a scalar broadcast over `a`.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary_ew(
            "sub",
            a,
            b,
            |x, y| x - y,
            |_, _| (S::one(), S::zero() - S::one()),
        )
    }

    /// Elementwise a * b; `b` may be a scalar broadcast over `a`.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary_ew("mul", a, b, |x, y| x * y, |x, y| (y, x))
    }

    /// Shared skeleton for the elementwise binaries. The derivative
    /// callback returns (d out/d a, d out/d b) at each element.
    fn binary_ew(
        &mut self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(S, S) -> S + Copy + 'static,
        df: impl Fn(S, S) -> (S, S) + Copy + 'static,
    ) -> Result<NodeId, TensorError> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        let b_scalar = self.value(b).is_scalar() && !shapes_equal(&sa, &sb);
        if !shapes_equal(&sa, &sb) && !b_scalar {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa,
                rhs: sb,
            });
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let out: Vec<S> = if b_scalar {
            let s = bv[0];
            av.iter().map(|&x| f(x, s)).collect()
        } else {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        };
        let value = Tensor::new(sa, out).unwrap();
        Ok(self.push_op(
            vec![a, b],
            value,
            Box::new(move |ctx| {
                let dout = ctx.dout().to_vec();
                let av = ctx.value(a).data().to_vec();
                let bv = ctx.value(b).data().to_vec();
                if ctx.needs(a) {
                    let da: Vec<S> = if b_scalar {
                        let s = bv[0];
                        av.iter()
                            .zip(&dout)
                            .map(|(&x, &d)| d * df(x, s).0)
                            .collect()
                    } else {
                        av.iter()
                            .zip(&bv)
                            .zip(&dout)
                            .map(|((&x, &y), &d)| d * df(x, y).0)
                            .collect()
                    };
                    ctx.accumulate(a, &da);
                }
                if ctx.needs(b) {
                    if b_scalar {
                        let s = bv[0];
                        let mut acc = S::zero();
                        for (&x, &d) in av.iter().zip(&dout) {
                            acc = acc + d * df(x, s).1;
                        }
                        ctx.accumulate(b, &[acc]);
                    } else {
                        let db: Vec<S> = av
                            .iter()
                            .zip(&bv)
                            .zip(&dout)
                            .map(|((&x, &y), &d)| d * df(x, y).1)
                            .collect();
                        ctx.accumulate(b, &db);
                    }
                }
            }),
        ))
    }

    /// max(x, 0). Subgradient 1 at exactly zero.
    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::new(
            self.value(x).shape().to_vec(),
            self.value(x)
                .data()
                .iter()
                .map(|&v| if v > S::zero() { v } else { S::zero() })
                .collect(),
        )
        .unwrap();
        self.push_op(
            vec![x],
            value,
            Box::new(move |ctx| {
                if !ctx.needs(x) {
                    return;
                }
                let dout = ctx.dout();
                let xv = ctx.value(x).data();
                let dx: Vec<S> = xv
                    .iter()
                    .zip(dout)
                    .map(|(&v, &d)| if v >= S::zero() { d } else { S::zero() })
                    .collect();
                ctx.accumulate(x, &dx);
            }),
        )
    }

    /// ELU: x for x >= 0, exp(x) - 1 otherwise.
    pub fn elu(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::new(
            self.value(x).shape().to_vec(),
            self.value(x)
                .data()
                .iter()
                .map(|&v| if v >= S::zero() { v } else { v.exp() - S::one() })
                .collect(),
        )
        .unwrap();
        self.push_op(
            vec![x],
            value,
            Box::new(move |ctx| {
                if !ctx.needs(x) {
                    return;
                }
                let dout = ctx.dout();
                let xv = ctx.value(x).data();
                let dx: Vec<S> = xv
                    .iter()
                    .zip(dout)
                    .map(|(&v, &d)| if v >= S::zero() { d } else { d * v.exp() })
                    .collect();
                ctx.accumulate(x, &dx);
            }),
        )
    }

    /// Scalar sum of absolute values.
    pub fn l1(&mut self, x: NodeId) -> NodeId {
        let total = self
            .value(x)
            .data()
            .iter()
            .fold(S::zero(), |acc, &v| acc + v.abs());
        self.push_op(
            vec![x],
            Tensor::scalar(total),
            Box::new(move |ctx| {
                if !ctx.needs(x) {
                    return;
                }
                let d = ctx.dout()[0];
                let xv = ctx.value(x).data();
                let dx: Vec<S> = xv
                    .iter()
                    .map(|&v| {
                        if v > S::zero() {
                            d
                        } else if v < S::zero() {
                            S::zero() - d
                        } else {
                            S::zero()
                        }
                    })
                    .collect();
                ctx.accumulate(x, &dx);
            }),
        )
    }

    /// Scalar sum of all elements.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total = self
            .value(x)
            .data()
            .iter()
            .fold(S::zero(), |acc, &v| acc + v);
        let n = self.value(x).numel();
        self.push_op(
            vec![x],
            Tensor::scalar(total),
            Box::new(move |ctx| {
                if !ctx.needs(x) {
                    return;
                }
                let d = ctx.dout()[0];
                ctx.accumulate(x, &vec![d; n]);
            }),
        )
    }

    /// Multiply every element by a fixed constant.
    pub fn scale(&mut self, x: NodeId, c: S) -> NodeId {
        let value = Tensor::new(
            self.value(x).shape().to_vec(),
            self.value(x).data().iter().map(|&v| v * c).collect(),
        )
        .unwrap();
        self.push_op(
            vec![x],
            value,
            Box::new(move |ctx| {
                if !ctx.needs(x) {
                    return;
                }
                let dx: Vec<S> = ctx.dout().iter().map(|&d| d * c).collect();
                ctx.accumulate(x, &dx);
            }),
        )
    }

    /// Reinterpret the shape; element count must match. Data is row-major
    /// in both views so this is a metadata change.
    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId, TensorError> {
        let n: usize = shape.iter().product();
        if n != self.value(x).numel() {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                expected: n,
                len: self.value(x).numel(),
            });
        }
        let value = Tensor::new(shape, self.value(x).data().to_vec()).unwrap();
        Ok(self.push_op(
            vec![x],
            value,
            Box::new(move |ctx| {
                if !ctx.needs(x) {
                    return;
                }
                let dx = ctx.dout().to_vec();
                ctx.accumulate(x, &dx);
            }),
        ))
    }

    /// Keep the top-left `[..,:h,:w]` corner of a [C,H,W] tensor. Backward
    /// scatters the gradient back into the padded region as zeros.
    pub fn crop2d(&mut self, x: NodeId, h: usize, w: usize) -> Result<NodeId, TensorError> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() != 3 || shape[1] < h || shape[2] < w {
            return Err(TensorError::Contract {
                op: "crop2d",
                expected: "a [C,H,W] tensor at least as large as the crop",
                shape,
            });
        }
        let (ch, hh, ww) = (shape[0], shape[1], shape[2]);
        let xv = self.value(x).data();
        let mut out = vec![S::zero(); ch * h * w];
        for c in 0..ch {
            for i in 0..h {
                let src = c * hh * ww + i * ww;
                let dst = c * h * w + i * w;
                out[dst..dst + w].copy_from_slice(&xv[src..src + w]);
            }
        }
        let value = Tensor::new(vec![ch, h, w], out).unwrap();
        Ok(self.push_op(
            vec![x],
            value,
            Box::new(move |ctx| {
                if !ctx.needs(x) {
                    return;
                }
                let dout = ctx.dout();
                let mut dx = vec![S::zero(); ch * hh * ww];
                for c in 0..ch {
                    for i in 0..h {
                        let dst = c * hh * ww + i * ww;
                        let src = c * h * w + i * w;
                        dx[dst..dst + w].copy_from_slice(&dout[src..src + w]);
                    }
                }
                ctx.accumulate(x, &dx);
            }),
        ))
    }
}

fn shapes_equal(a: &[usize], b: &[usize]) -> bool {
    a == b
}

/// Compare analytic gradients against central finite differences.
///
/// `f` builds a scalar-valued graph from the single leaf it is handed.
/// Returns the max over coordinates of
/// `|analytic - cd| / max(|analytic|, |cd|, 1e-8)`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> f64
where
    F: Fn(&mut Tape<f64>, NodeId) -> NodeId,
{
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone(), true);
    let out = f(&mut tape, leaf);
    assert!(
        tape.value(out).is_scalar(),
        "grad_check needs a scalar-valued function"
    );
    tape.backward(out).expect("backward on scalar");
    let analytic: Vec<f64> = match tape.grad(leaf) {
        Some(g) => g.to_vec(),
        None => vec![0.0; x.numel()],
    };

    let eval = |pt: &Tensor<f64>| -> f64 {
        let mut t = Tape::new();
        let l = t.leaf(pt.clone(), false);
        let o = f(&mut t, l);
        t.value(o).item()
    };

    let mut max_err = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data[i] += h;
        let mut minus = x.clone();
        minus.data[i] -= h;
        let cd = (eval(&plus) - eval(&minus)) / (2.0 * h);
        let denom = analytic[i].abs().max(cd.abs()).max(1e-8);
        let err = (analytic[i] - cd).abs() / denom;
        if err > max_err {
            max_err = err;
        }
    }
    max_err
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Xoshiro;
    use proptest::prelude::*;

    fn t32(shape: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn rand_t64(shape: &[usize], rng: &mut Xoshiro) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.uniform(-1.0, 1.0))
    }

    /// Independent index-triple-loop product used as the matmul oracle.
    fn matmul_oracle(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                for kk in 0..k {
                    out[i * n + j] += a[i * k + kk] * b[kk * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn matmul_identity_passthrough() {
        let mut tape = Tape::new();
        let eye = tape.constant(t32(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let b = tape.constant(t32(&[3, 2], &[1., 2., 3., 4., 5., 6.]));
        let c = tape.matmul(eye, b).unwrap();
        assert_eq!(tape.value(c).data(), tape.value(b).data());
    }

    #[test]
    fn matmul_matches_loop_oracle() {
        let a = [1.0f32, 2.0, 3.0, 4.0];
        let b = [5.0f32, 6.0];
        let expect = matmul_oracle(&a, &b, 2, 2, 1);
        assert_eq!(expect, vec![17.0, 39.0]);

        let mut tape = Tape::new();
        let an = tape.constant(t32(&[2, 2], &a));
        let bn = tape.constant(t32(&[2, 1], &b));
        let c = tape.matmul(an, bn).unwrap();
        assert_eq!(tape.value(c).data(), &expect[..]);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(vec![2, 2]));
        let b = tape.constant(t32(&[2, 2], &[1., 2., 3., 4.]));
        let c = tape.matmul(z, b).unwrap();
        assert!(tape.value(c).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::<f32>::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::<f32>::zeros(vec![2, 2]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn matmul_variants_agree() {
        let mut rng = Xoshiro::seeded(7);
        let a = rand_t64(&[4, 3], &mut rng);
        let b = rand_t64(&[3, 5], &mut rng);
        let mut tape = Tape::new();
        let an = tape.constant(a.clone());
        let bn = tape.constant(b.clone());
        let c = tape.matmul(an, bn).unwrap();
        // a^T fed to matmul_tn and b^T fed to matmul_nt must reproduce c.
        let at = Tensor::from_fn(vec![3, 4], |i| a.data()[(i % 4) * 3 + i / 4]);
        let bt = Tensor::from_fn(vec![5, 3], |i| b.data()[(i % 3) * 5 + i / 3]);
        let atn = tape.constant(at);
        let btn = tape.constant(bt);
        let c_tn = tape.matmul_tn(atn, bn).unwrap();
        let c_nt = tape.matmul_nt(an, btn).unwrap();
        for i in 0..20 {
            assert!((tape.value(c).data()[i] - tape.value(c_tn).data()[i]).abs() < 1e-12);
            assert!((tape.value(c).data()[i] - tape.value(c_nt).data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_constant_row_is_uniform() {
        let mut tape = Tape::new();
        let s = tape.constant(t32(&[1, 4], &[3.0; 4]));
        let y = tape.softmax_rows(s).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 0.25).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_direct_evaluation() {
        // row [0, ln 3]: exp -> [1, 3], normalized -> [0.25, 0.75]
        let mut tape = Tape::new();
        let s = tape.constant(t64(&[1, 2], &[0.0, 3.0f64.ln()]));
        let y = tape.softmax_rows(s).unwrap();
        assert!((tape.value(y).data()[0] - 0.25).abs() < 1e-12);
        assert!((tape.value(y).data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_large_entries_stay_finite() {
        let mut tape = Tape::new();
        let s = tape.constant(t32(&[1, 2], &[1000.0, 0.0]));
        let y = tape.softmax_rows(s).unwrap();
        let d = tape.value(y).data();
        assert!(d.iter().all(|v| v.is_finite()));
        assert!(d[0] > 0.999 && d[1] < 1e-6);
    }

    #[test]
    fn relu_elu_l1_definitions() {
        let mut tape = Tape::new();
        let x = tape.constant(t32(&[3], &[-1.0, 0.0, 2.0]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);

        let z = tape.constant(t32(&[1], &[0.0]));
        let e = tape.elu(z);
        assert_eq!(tape.value(e).data(), &[0.0]);

        let a = tape.constant(t32(&[3], &[1.0, -2.0, 3.0]));
        let b = tape.constant(Tensor::zeros(vec![3]));
        let d = tape.sub(a, b).unwrap();
        let l = tape.l1(d);
        assert_eq!(tape.value(l).item(), 6.0);
    }

    #[test]
    fn scalar_broadcast_add_mul() {
        let mut tape = Tape::new();
        let a = tape.constant(t32(&[3], &[1.0, 2.0, 3.0]));
        let s = tape.scalar_const(2.0);
        let sum = tape.add(a, s).unwrap();
        assert_eq!(tape.value(sum).data(), &[3.0, 4.0, 5.0]);
        let prod = tape.mul(a, s).unwrap();
        assert_eq!(tape.value(prod).data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn incompatible_elementwise_shapes_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::<f32>::zeros(vec![3]));
        let b = tape.constant(Tensor::<f32>::zeros(vec![4]));
        assert!(tape.add(a, b).is_err());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t32(&[4], &[1.0, -2.0, 0.5, 7.0]), true);
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(t32(&[2], &[1.0, 2.0]), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn backward_matches_central_differences_on_l1_chain() {
        // loss = l1(a*b - c) at fixed points, f64, h = 1e-5
        let a0 = t64(&[4], &[0.3, -0.7, 1.2, 0.05]);
        let b0 = t64(&[4], &[1.1, 0.4, -0.6, 2.0]);
        let c0 = t64(&[4], &[0.2, 0.2, 0.2, 0.2]);

        let loss_at = |av: &Tensor<f64>| -> f64 {
            let mut tape = Tape::new();
            let a = tape.constant(av.clone());
            let b = tape.constant(b0.clone());
            let c = tape.constant(c0.clone());
            let p = tape.mul(a, b).unwrap();
            let d = tape.sub(p, c).unwrap();
            let l = tape.l1(d);
            tape.value(l).item()
        };

        let mut tape = Tape::new();
        let a = tape.leaf(a0.clone(), true);
        let b = tape.constant(b0.clone());
        let c = tape.constant(c0.clone());
        let p = tape.mul(a, b).unwrap();
        let d = tape.sub(p, c).unwrap();
        let l = tape.l1(d);
        tape.backward(l).unwrap();
        let g = tape.grad(a).unwrap();

        let h = 1e-5;
        for i in 0..4 {
            let mut plus = a0.clone();
            plus.data[i] += h;
            let mut minus = a0.clone();
            minus.data[i] -= h;
            let cd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
            let rel = (g[i] - cd).abs() / g[i].abs().max(cd.abs()).max(1e-8);
            assert!(rel <= 1e-4, "coord {i}: analytic {} vs cd {cd}", g[i]);
        }
    }

    #[test]
    fn repeated_backward_zeroes_first() {
        let mut tape = Tape::new();
        let x = tape.leaf(t32(&[3], &[1.0, 2.0, 3.0]), true);
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        let first = tape.grad(x).unwrap().to_vec();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &first[..]);
    }

    #[test]
    fn backward_is_linear_over_summed_losses() {
        let mut rng = Xoshiro::seeded(11);
        let x0 = rand_t64(&[5], &mut rng);

        let grad_of = |which: u8| -> Vec<f64> {
            let mut tape = Tape::new();
            let x = tape.leaf(x0.clone(), true);
            let r = tape.relu(x);
            let l1 = tape.sum(r);
            let sq = tape.mul(x, x).unwrap();
            let l2 = tape.sum(sq);
            let loss = match which {
                0 => l1,
                1 => l2,
                _ => tape.add(l1, l2).unwrap(),
            };
            tape.backward(loss).unwrap();
            tape.grad(x).unwrap().to_vec()
        };

        let ga = grad_of(0);
        let gb = grad_of(1);
        let gsum = grad_of(2);
        for i in 0..5 {
            assert!((ga[i] + gb[i] - gsum[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn grad_check_identity_is_exact() {
        let x = t64(&[3], &[0.4, -0.2, 1.0]);
        let err = grad_check(|tape, x| tape.sum(x), &x, 1e-5);
        assert!(err < 1e-9, "identity-chain error {err}");
    }

    #[test]
    fn grad_check_matmul_chain() {
        let mut rng = Xoshiro::seeded(3);
        let x = rand_t64(&[3, 3], &mut rng);
        let w = rand_t64(&[3, 3], &mut rng);
        let err = grad_check(
            move |tape, x| {
                let w = tape.constant(w.clone());
                let p = tape.matmul(x, w).unwrap();
                let q = tape.matmul(p, x).unwrap();
                tape.sum(q)
            },
            &x,
            1e-5,
        );
        assert!(err < 1e-6, "matmul chain error {err}");
    }

    #[test]
    fn grad_check_relu_away_from_kinks() {
        let mut rng = Xoshiro::seeded(5);
        // keep every coordinate away from 0 so the kink is never straddled
        let x = Tensor::from_fn(vec![6], |_| {
            let v: f64 = rng.uniform(0.1, 1.0);
            if rng.uniform(0.0, 1.0) < 0.5 {
                -v
            } else {
                v
            }
        });
        let err = grad_check(
            |tape, x| {
                let r = tape.relu(x);
                tape.sum(r)
            },
            &x,
            1e-5,
        );
        assert!(err < 1e-6, "relu error {err}");
    }

    #[test]
    fn grad_check_softmax_elu() {
        let mut rng = Xoshiro::seeded(9);
        let x = rand_t64(&[2, 4], &mut rng);
        let err = grad_check(
            |tape, x| {
                let e = tape.elu(x);
                let y = tape.softmax_rows(e).unwrap();
                let w = tape.mul(y, y).unwrap();
                tape.sum(w)
            },
            &x,
            1e-5,
        );
        assert!(err < 1e-6, "softmax/elu error {err}");
    }

    #[test]
    fn crop_and_reshape_roundtrip_grads() {
        let mut rng = Xoshiro::seeded(13);
        let x = rand_t64(&[2, 4, 4], &mut rng);
        let err = grad_check(
            |tape, x| {
                let c = tape.crop2d(x, 3, 2).unwrap();
                let r = tape.reshape(c, vec![6, 2]).unwrap();
                let l = tape.l1(r);
                tape.scale(l, 0.5)
            },
            &x,
            1e-5,
        );
        assert!(err < 1e-6, "crop/reshape error {err}");
    }

    proptest! {
        #[test]
        fn softmax_rows_are_stochastic(rows in 1usize..5, cols in 1usize..8, seed in 0u64..1000) {
            let mut rng = Xoshiro::seeded(seed);
            let s = Tensor::from_fn(vec![rows, cols], |_| rng.uniform(-5.0f64, 5.0));
            let mut tape = Tape::new();
            let sn = tape.constant(s);
            let y = tape.softmax_rows(sn).unwrap();
            let d = tape.value(y).data();
            for r in 0..rows {
                let sum: f64 = d[r * cols..(r + 1) * cols].iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-6);
            }
            prop_assert!(d.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }

        #[test]
        fn matmul_associativity(seed in 0u64..200) {
            let mut rng = Xoshiro::seeded(seed);
            let a = Tensor::from_fn(vec![3, 4], |_| rng.uniform(-1.0f32, 1.0));
            let b = Tensor::from_fn(vec![4, 2], |_| rng.uniform(-1.0f32, 1.0));
            let c = Tensor::from_fn(vec![2, 5], |_| rng.uniform(-1.0f32, 1.0));
            let mut tape = Tape::new();
            let an = tape.constant(a);
            let bn = tape.constant(b);
            let cn = tape.constant(c);
            let ab = tape.matmul(an, bn).unwrap();
            let ab_c = tape.matmul(ab, cn).unwrap();
            let bc = tape.matmul(bn, cn).unwrap();
            let a_bc = tape.matmul(an, bc).unwrap();
            for (x, y) in tape.value(ab_c).data().iter().zip(tape.value(a_bc).data()) {
                prop_assert!((x - y).abs() < 1e-4);
            }
        }
    }
}

/// Plain triple-loop matrix product, row-major.
pub(crate) fn matmul_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == S::zero() {
                continue;
            }
            for j in 0..n {
                out[i * n + j] = out[i * n + j] + aik * b[kk * n + j];
            }
        }
    }
    out
}
