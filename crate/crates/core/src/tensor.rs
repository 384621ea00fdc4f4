//! Dense f32 tensors with reverse-mode automatic differentiation.
//!
//! Storage is row-major and contiguous; ops copy rather than view. Only
//! rank-0 (scalar) broadcasting is supported. Every op records its inputs,
//! so the executed ops form a DAG through parent links; `backward` walks a
//! deterministic topological order of that graph and accumulates adjoints
//! into shared inputs. Graphs and their tensors are confined to one worker
//! (`Tensor` is intentionally `!Send`); plain `Vec<f32>` snapshots are the
//! currency between workers.

use std::cell::{Cell, RefCell};
use std::collections::{HashMap, HashSet};
use std::rc::Rc;

use crate::error::{Error, Result};

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(1) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Recorded operation kinds. Saved scalars are the attributes needed to
/// replay the adjoint; operand values are read from the recorded inputs.
#[derive(Debug, Clone)]
enum Op {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Scale(f32),
    Matmul,
    Transpose,
    Softmax { axis: usize },
    LogSoftmax { axis: usize },
    Conv2d { stride: usize, pad: usize },
    SumAll,
    MeanAll,
    SqL2Norm,
    LayerNorm { eps: f32 },
    Silu,
    Sigmoid,
    Tanh,
    Upsample2x,
    Patchify { p: usize },
    TokensToMap { gh: usize, gw: usize },
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    Reshape,
    AddRowBias,
    AddChanBias,
}

struct Record {
    op: Op,
    inputs: Vec<Tensor>,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f32>>,
    grad: RefCell<Option<Vec<f32>>>,
    requires_grad: bool,
    /// True when this node or any ancestor requires a gradient; branches
    /// with `track == false` are skipped entirely during backward.
    track: bool,
    record: Option<Record>,
}

/// Handle to one tensor node. Cloning is cheap (shared node).
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor(id={}, shape={:?}, requires_grad={})",
            self.inner.id, self.inner.shape, self.inner.requires_grad
        )
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f32>, requires_grad: bool) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                track: requires_grad,
                record: None,
            }),
        })
    }

    pub fn zeros(shape: Vec<usize>, requires_grad: bool) -> Self {
        let n = numel(&shape);
        Tensor::from_vec(shape, vec![0.0; n], requires_grad).expect("zeros")
    }

    /// Rank-0 constant.
    pub fn scalar(v: f32) -> Self {
        Tensor::from_vec(vec![], vec![v], false).expect("scalar")
    }

    fn from_op(op: Op, inputs: Vec<Tensor>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        let track = inputs.iter().any(|t| t.inner.track);
        Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: false,
                track,
                record: if track { Some(Record { op, inputs }) } else { None },
            }),
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.inner.shape)
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.record.is_none()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.inner.data.borrow().clone()
    }

    /// Value of a rank-0 (or single-element) tensor.
    pub fn item(&self) -> f32 {
        self.inner.data.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Overwrite a leaf's values bitwise. Panics if called on an op output,
    /// which would silently corrupt a recorded graph.
    pub fn set_data(&self, data: &[f32]) {
        assert!(self.is_leaf(), "set_data on non-leaf tensor");
        let mut d = self.inner.data.borrow_mut();
        assert_eq!(d.len(), data.len(), "set_data length mismatch");
        d.copy_from_slice(data);
    }

    /// In-place SGD step on a leaf: `data -= lr * grad_override_or_own`.
    pub fn apply_step(&self, lr: f32, grad: &[f32]) {
        assert!(self.is_leaf(), "apply_step on non-leaf tensor");
        let mut d = self.inner.data.borrow_mut();
        assert_eq!(d.len(), grad.len());
        for (v, g) in d.iter_mut().zip(grad) {
            *v -= lr * g;
        }
    }

    fn accumulate_grad(&self, g: &[f32]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }
}

// ---------------------------------------------------------------------------
// Elementwise ops (rank-0 broadcast only)
// ---------------------------------------------------------------------------

enum Pair {
    Same,
    LeftScalar,
    RightScalar,
}

fn pair_mode(a: &Tensor, b: &Tensor) -> Result<(Pair, Vec<usize>)> {
    if a.shape() == b.shape() {
        Ok((Pair::Same, a.shape().to_vec()))
    } else if a.shape().is_empty() {
        Ok((Pair::LeftScalar, b.shape().to_vec()))
    } else if b.shape().is_empty() {
        Ok((Pair::RightScalar, a.shape().to_vec()))
    } else {
        Err(Error::Shape(format!(
            "elementwise operands {:?} vs {:?}",
            a.shape(),
            b.shape()
        )))
    }
}

fn zip_ew(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<(Vec<usize>, Vec<f32>)> {
    let (mode, shape) = pair_mode(a, b)?;
    let ad = a.inner.data.borrow();
    let bd = b.inner.data.borrow();
    let out = match mode {
        Pair::Same => ad.iter().zip(bd.iter()).map(|(&x, &y)| f(x, y)).collect(),
        Pair::LeftScalar => bd.iter().map(|&y| f(ad[0], y)).collect(),
        Pair::RightScalar => ad.iter().map(|&x| f(x, bd[0])).collect(),
    };
    Ok((shape, out))
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let (shape, out) = zip_ew(self, other, |x, y| x + y)?;
        Ok(Tensor::from_op(Op::Add, vec![self.clone(), other.clone()], shape, out))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        let (shape, out) = zip_ew(self, other, |x, y| x - y)?;
        Ok(Tensor::from_op(Op::Sub, vec![self.clone(), other.clone()], shape, out))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let (shape, out) = zip_ew(self, other, |x, y| x * y)?;
        Ok(Tensor::from_op(Op::Mul, vec![self.clone(), other.clone()], shape, out))
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        let (shape, out) = zip_ew(self, other, |x, y| x / y)?;
        Ok(Tensor::from_op(Op::Div, vec![self.clone(), other.clone()], shape, out))
    }

    pub fn neg(&self) -> Tensor {
        let out = self.inner.data.borrow().iter().map(|&x| -x).collect();
        Tensor::from_op(Op::Neg, vec![self.clone()], self.shape().to_vec(), out)
    }

    pub fn exp(&self) -> Tensor {
        let out = self.inner.data.borrow().iter().map(|&x| x.exp()).collect();
        Tensor::from_op(Op::Exp, vec![self.clone()], self.shape().to_vec(), out)
    }

    /// Multiply by a compile-time constant (not a graph operand).
    pub fn scale(&self, c: f32) -> Tensor {
        let out = self.inner.data.borrow().iter().map(|&x| c * x).collect();
        Tensor::from_op(Op::Scale(c), vec![self.clone()], self.shape().to_vec(), out)
    }

    /// `x * sigmoid(x)`, the smooth gate used by the model's MLPs and
    /// decoder.
    pub fn silu(&self) -> Tensor {
        let out = self.inner.data.borrow().iter().map(|&x| silu_f(x)).collect();
        Tensor::from_op(Op::Silu, vec![self.clone()], self.shape().to_vec(), out)
    }

    pub fn sigmoid(&self) -> Tensor {
        let out = self
            .inner
            .data
            .borrow()
            .iter()
            .map(|&x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        Tensor::from_op(Op::Sigmoid, vec![self.clone()], self.shape().to_vec(), out)
    }

    pub fn tanh(&self) -> Tensor {
        let out = self.inner.data.borrow().iter().map(|&x| x.tanh()).collect();
        Tensor::from_op(Op::Tanh, vec![self.clone()], self.shape().to_vec(), out)
    }
}

fn silu_f(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

fn silu_df(x: f32) -> f32 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

/// c[n x m] += a[n x k] * b[k x m]
fn gemm_acc(a: &[f32], b: &[f32], c: &mut [f32], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * m..(i + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * m..(p + 1) * m];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// c[n x k] += a[n x m] * b^T where b is [k x m]
fn gemm_nt_acc(a: &[f32], b: &[f32], c: &mut [f32], n: usize, m: usize, k: usize) {
    for i in 0..n {
        let arow = &a[i * m..(i + 1) * m];
        let crow = &mut c[i * k..(i + 1) * k];
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = &b[j * m..(j + 1) * m];
            let mut acc = 0.0f32;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *cv += acc;
        }
    }
}

/// c[k x m] += a^T * b where a is [n x k], b is [n x m]
fn gemm_tn_acc(a: &[f32], b: &[f32], c: &mut [f32], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * m..(i + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            let crow = &mut c[p * m..(p + 1) * m];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

impl Tensor {
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = (self.shape(), other.shape());
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return Err(Error::Shape(format!("matmul operands {:?} x {:?}", a, b)));
        }
        let (n, k, m) = (a[0], a[1], b[1]);
        let mut out = vec![0.0f32; n * m];
        gemm_acc(
            &self.inner.data.borrow(),
            &other.inner.data.borrow(),
            &mut out,
            n,
            k,
            m,
        );
        Ok(Tensor::from_op(
            Op::Matmul,
            vec![self.clone(), other.clone()],
            vec![n, m],
            out,
        ))
    }

    pub fn transpose2(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::Shape(format!("transpose needs rank 2, got {:?}", s)));
        }
        let (n, m) = (s[0], s[1]);
        let d = self.inner.data.borrow();
        let mut out = vec![0.0f32; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = d[i * m + j];
            }
        }
        Ok(Tensor::from_op(Op::Transpose, vec![self.clone()], vec![m, n], out))
    }
}

// ---------------------------------------------------------------------------
// Axis helpers: iterate independent lanes along `axis`
// ---------------------------------------------------------------------------

fn lane_geometry(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Shape(format!("axis {} out of range for {:?}", axis, shape)));
    }
    let outer: usize = shape[..axis].iter().product();
    let lane = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    Ok((outer, lane, inner))
}

fn for_each_lane(
    shape: &[usize],
    axis: usize,
    mut f: impl FnMut(usize, usize), // (lane base offset, stride)
) -> Result<()> {
    let (outer, lane, inner) = lane_geometry(shape, axis)?;
    for o in 0..outer {
        for i in 0..inner {
            f(o * lane * inner + i, inner);
        }
    }
    Ok(())
}

impl Tensor {
    /// Numerically-stabilized softmax along `axis`; slices sum to 1.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let shape = self.shape().to_vec();
        let d = self.inner.data.borrow();
        let mut out = vec![0.0f32; d.len()];
        let lane = shape[axis.min(shape.len().saturating_sub(1))];
        let _ = lane;
        for_each_lane(&shape, axis, |base, stride| {
            let n = shape[axis];
            let mut mx = f32::NEG_INFINITY;
            for j in 0..n {
                mx = mx.max(d[base + j * stride]);
            }
            let mut sum = 0.0f32;
            for j in 0..n {
                let e = (d[base + j * stride] - mx).exp();
                out[base + j * stride] = e;
                sum += e;
            }
            for j in 0..n {
                out[base + j * stride] /= sum;
            }
        })?;
        drop(d);
        Ok(Tensor::from_op(Op::Softmax { axis }, vec![self.clone()], shape, out))
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Tensor> {
        let shape = self.shape().to_vec();
        let d = self.inner.data.borrow();
        let mut out = vec![0.0f32; d.len()];
        for_each_lane(&shape, axis, |base, stride| {
            let n = shape[axis];
            let mut mx = f32::NEG_INFINITY;
            for j in 0..n {
                mx = mx.max(d[base + j * stride]);
            }
            let mut sum = 0.0f32;
            for j in 0..n {
                sum += (d[base + j * stride] - mx).exp();
            }
            let lse = mx + sum.ln();
            for j in 0..n {
                out[base + j * stride] = d[base + j * stride] - lse;
            }
        })?;
        drop(d);
        Ok(Tensor::from_op(Op::LogSoftmax { axis }, vec![self.clone()], shape, out))
    }
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

impl Tensor {
    pub fn sum_all(&self) -> Tensor {
        let s: f32 = self.inner.data.borrow().iter().sum();
        Tensor::from_op(Op::SumAll, vec![self.clone()], vec![], vec![s])
    }

    pub fn mean_all(&self) -> Tensor {
        let d = self.inner.data.borrow();
        let s: f32 = d.iter().sum();
        let m = s / d.len() as f32;
        drop(d);
        Tensor::from_op(Op::MeanAll, vec![self.clone()], vec![], vec![m])
    }

    /// Squared L2 norm (sum of squares), returned as a scalar.
    pub fn sq_l2_norm(&self) -> Tensor {
        let s: f32 = self.inner.data.borrow().iter().map(|&x| x * x).sum();
        Tensor::from_op(Op::SqL2Norm, vec![self.clone()], vec![], vec![s])
    }
}

// ---------------------------------------------------------------------------
// Normalization, convolution, resampling, layout
// ---------------------------------------------------------------------------

impl Tensor {
    /// Per-row layer normalization of a `[rows, cols]` tensor.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 || gamma.shape() != [s[1]] || beta.shape() != [s[1]] {
            return Err(Error::Shape(format!(
                "layer_norm x {:?}, gamma {:?}, beta {:?}",
                s,
                gamma.shape(),
                beta.shape()
            )));
        }
        let (rows, cols) = (s[0], s[1]);
        let d = self.inner.data.borrow();
        let g = gamma.inner.data.borrow();
        let b = beta.inner.data.borrow();
        let mut out = vec![0.0f32; rows * cols];
        for r in 0..rows {
            let row = &d[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f32>() / cols as f32;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f32>() / cols as f32;
            let inv = 1.0 / (var + eps).sqrt();
            for c in 0..cols {
                out[r * cols + c] = (row[c] - mean) * inv * g[c] + b[c];
            }
        }
        drop(d);
        drop(g);
        drop(b);
        Ok(Tensor::from_op(
            Op::LayerNorm { eps },
            vec![self.clone(), gamma.clone(), beta.clone()],
            vec![rows, cols],
            out,
        ))
    }

    /// 2-D cross-correlation of `[c_in, h, w]` with `[c_out, c_in, k, k]`.
    pub fn conv2d(&self, weight: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        let xs = self.shape();
        let ws = weight.shape();
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || ws[2] != ws[3] {
            return Err(Error::Shape(format!("conv2d x {:?}, w {:?}", xs, ws)));
        }
        let k = ws[2];
        if k % 2 == 0 || stride == 0 {
            return Err(Error::Shape(format!("conv2d kernel {} must be odd, stride > 0", k)));
        }
        let (ci, h, w) = (xs[0], xs[1], xs[2]);
        let co = ws[0];
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::Shape("conv2d output extents not positive".into()));
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let x = self.inner.data.borrow();
        let wt = weight.inner.data.borrow();
        let mut out = vec![0.0f32; co * oh * ow];
        conv2d_forward(&x, &wt, &mut out, ci, h, w, co, k, stride, pad, oh, ow);
        drop(x);
        drop(wt);
        Ok(Tensor::from_op(
            Op::Conv2d { stride, pad },
            vec![self.clone(), weight.clone()],
            vec![co, oh, ow],
            out,
        ))
    }

    /// Nearest-neighbor 2x upsampling of `[c, h, w]`.
    pub fn upsample2x(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 3 {
            return Err(Error::Shape(format!("upsample2x needs rank 3, got {:?}", s)));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let d = self.inner.data.borrow();
        let mut out = vec![0.0f32; c * 4 * h * w];
        let (oh, ow) = (2 * h, 2 * w);
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    out[(ch * oh + y) * ow + x] = d[(ch * h + y / 2) * w + x / 2];
                }
            }
        }
        drop(d);
        Ok(Tensor::from_op(Op::Upsample2x, vec![self.clone()], vec![c, oh, ow], out))
    }

    /// Rearrange `[c, h, w]` into `[t, c*p*p]` non-overlapping patch rows,
    /// tokens in row-major patch order.
    pub fn patchify(&self, p: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 3 || p == 0 || s[1] % p != 0 || s[2] % p != 0 {
            return Err(Error::Shape(format!("patchify {:?} with patch {}", s, p)));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (gh, gw) = (h / p, w / p);
        let t = gh * gw;
        let cols = c * p * p;
        let d = self.inner.data.borrow();
        let mut out = vec![0.0f32; t * cols];
        for py in 0..gh {
            for px in 0..gw {
                let ti = py * gw + px;
                for ch in 0..c {
                    for dy in 0..p {
                        for dx in 0..p {
                            let col = (ch * p + dy) * p + dx;
                            out[ti * cols + col] = d[(ch * h + py * p + dy) * w + px * p + dx];
                        }
                    }
                }
            }
        }
        drop(d);
        Ok(Tensor::from_op(Op::Patchify { p }, vec![self.clone()], vec![t, cols], out))
    }

    /// Rearrange `[t, c]` tokens (t = gh*gw, row-major) into a `[c, gh, gw]` map.
    pub fn tokens_to_map(&self, gh: usize, gw: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 || s[0] != gh * gw {
            return Err(Error::Shape(format!("tokens_to_map {:?} into {}x{}", s, gh, gw)));
        }
        let c = s[1];
        let d = self.inner.data.borrow();
        let mut out = vec![0.0f32; c * gh * gw];
        for y in 0..gh {
            for x in 0..gw {
                let t = y * gw + x;
                for ch in 0..c {
                    out[(ch * gh + y) * gw + x] = d[t * c + ch];
                }
            }
        }
        drop(d);
        Ok(Tensor::from_op(
            Op::TokensToMap { gh, gw },
            vec![self.clone()],
            vec![c, gh, gw],
            out,
        ))
    }

    /// Concatenate two tensors of equal rank along `axis`.
    pub fn concat(&self, other: &Tensor, axis: usize) -> Result<Tensor> {
        let (a, b) = (self.shape(), other.shape());
        if a.len() != b.len() || axis >= a.len() {
            return Err(Error::Shape(format!("concat {:?} + {:?} on axis {}", a, b, axis)));
        }
        for (i, (&x, &y)) in a.iter().zip(b.iter()).enumerate() {
            if i != axis && x != y {
                return Err(Error::Shape(format!("concat {:?} + {:?} on axis {}", a, b, axis)));
            }
        }
        let mut shape = a.to_vec();
        shape[axis] += b[axis];
        let (outer, _, inner) = lane_geometry(a, axis)?;
        let (da, db) = (self.inner.data.borrow(), other.inner.data.borrow());
        let ablk = a[axis] * inner;
        let bblk = b[axis] * inner;
        let mut out = vec![0.0f32; numel(&shape)];
        for o in 0..outer {
            out[o * (ablk + bblk)..o * (ablk + bblk) + ablk]
                .copy_from_slice(&da[o * ablk..(o + 1) * ablk]);
            out[o * (ablk + bblk) + ablk..(o + 1) * (ablk + bblk)]
                .copy_from_slice(&db[o * bblk..(o + 1) * bblk]);
        }
        drop(da);
        drop(db);
        Ok(Tensor::from_op(
            Op::Concat { axis },
            vec![self.clone(), other.clone()],
            shape,
            out,
        ))
    }

    /// Same data, new extents (row-major order preserved).
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        if numel(&shape) != self.numel() {
            return Err(Error::Shape(format!(
                "reshape {:?} into {:?}",
                self.shape(),
                shape
            )));
        }
        let data = self.inner.data.borrow().clone();
        Ok(Tensor::from_op(Op::Reshape, vec![self.clone()], shape, data))
    }

    /// Copy `len` indices starting at `start` along `axis`.
    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let s = self.shape();
        if axis >= s.len() || start + len > s[axis] || len == 0 {
            return Err(Error::Shape(format!(
                "slice {:?} axis {} range {}..{}",
                s,
                axis,
                start,
                start + len
            )));
        }
        let (outer, lane, inner) = lane_geometry(s, axis)?;
        let d = self.inner.data.borrow();
        let mut shape = s.to_vec();
        shape[axis] = len;
        let mut out = vec![0.0f32; outer * len * inner];
        for o in 0..outer {
            let src = o * lane * inner + start * inner;
            let dst = o * len * inner;
            out[dst..dst + len * inner].copy_from_slice(&d[src..src + len * inner]);
        }
        drop(d);
        Ok(Tensor::from_op(
            Op::Slice { axis, start, len },
            vec![self.clone()],
            shape,
            out,
        ))
    }

    /// `[rows, cols] + [cols]`, bias added to every row.
    pub fn add_row_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 || bias.shape() != [s[1]] {
            return Err(Error::Shape(format!(
                "add_row_bias x {:?}, b {:?}",
                s,
                bias.shape()
            )));
        }
        let (rows, cols) = (s[0], s[1]);
        let d = self.inner.data.borrow();
        let b = bias.inner.data.borrow();
        let mut out = vec![0.0f32; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[r * cols + c] = d[r * cols + c] + b[c];
            }
        }
        drop(d);
        drop(b);
        Ok(Tensor::from_op(
            Op::AddRowBias,
            vec![self.clone(), bias.clone()],
            vec![rows, cols],
            out,
        ))
    }

    /// `[c, h, w] + [c]`, bias added per channel.
    pub fn add_chan_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 3 || bias.shape() != [s[0]] {
            return Err(Error::Shape(format!(
                "add_chan_bias x {:?}, b {:?}",
                s,
                bias.shape()
            )));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let d = self.inner.data.borrow();
        let b = bias.inner.data.borrow();
        let mut out = vec![0.0f32; c * h * w];
        for ch in 0..c {
            let bv = b[ch];
            for i in 0..h * w {
                out[ch * h * w + i] = d[ch * h * w + i] + bv;
            }
        }
        drop(d);
        drop(b);
        Ok(Tensor::from_op(
            Op::AddChanBias,
            vec![self.clone(), bias.clone()],
            vec![c, h, w],
            out,
        ))
    }
}

/// Output coordinates along one axis whose input coordinate
/// `o*stride + k_off - pad` is in `[0, in_len)`, as a half-open range.
fn conv_valid_range(k_off: usize, pad: usize, in_len: usize, stride: usize, out_len: usize) -> (usize, usize) {
    let lo = if pad > k_off {
        (pad - k_off).div_ceil(stride)
    } else {
        0
    };
    if in_len + pad <= k_off {
        return (0, 0);
    }
    let hi = ((in_len - 1 + pad - k_off) / stride + 1).min(out_len);
    (lo, hi.max(lo))
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    x: &[f32],
    wt: &[f32],
    out: &mut [f32],
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    for oc in 0..co {
        for ic in 0..ci {
            for ky in 0..k {
                let (oy_lo, oy_hi) = conv_valid_range(ky, pad, h, stride, oh);
                for kx in 0..k {
                    let wv = wt[((oc * ci + ic) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox_lo, ox_hi) = conv_valid_range(kx, pad, w, stride, ow);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - pad;
                        let orow = (oc * oh + oy) * ow;
                        let irow = (ic * h + iy) * w;
                        if stride == 1 {
                            let ib = irow + ox_lo + kx - pad;
                            let len = ox_hi - ox_lo;
                            let xs = &x[ib..ib + len];
                            let os = &mut out[orow + ox_lo..orow + ox_lo + len];
                            for (o, &xv) in os.iter_mut().zip(xs) {
                                *o += wv * xv;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                let ix = ox * stride + kx - pad;
                                out[orow + ox] += wv * x[irow + ix];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    x: &[f32],
    wt: &[f32],
    g: &[f32],
    dx: Option<&mut Vec<f32>>,
    dw: Option<&mut Vec<f32>>,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    if let Some(dx) = dx {
        for oc in 0..co {
            for ic in 0..ci {
                for ky in 0..k {
                    let (oy_lo, oy_hi) = conv_valid_range(ky, pad, h, stride, oh);
                    for kx in 0..k {
                        let wv = wt[((oc * ci + ic) * k + ky) * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox_lo, ox_hi) = conv_valid_range(kx, pad, w, stride, ow);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pad;
                            let orow = (oc * oh + oy) * ow;
                            let irow = (ic * h + iy) * w;
                            if stride == 1 {
                                let ib = irow + ox_lo + kx - pad;
                                let len = ox_hi - ox_lo;
                                let gs = &g[orow + ox_lo..orow + ox_lo + len];
                                let ds = &mut dx[ib..ib + len];
                                for (d, &gv) in ds.iter_mut().zip(gs) {
                                    *d += wv * gv;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ix = ox * stride + kx - pad;
                                    dx[irow + ix] += wv * g[orow + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(dw) = dw {
        for oc in 0..co {
            for ic in 0..ci {
                for ky in 0..k {
                    let (oy_lo, oy_hi) = conv_valid_range(ky, pad, h, stride, oh);
                    for kx in 0..k {
                        let (ox_lo, ox_hi) = conv_valid_range(kx, pad, w, stride, ow);
                        let mut acc = 0.0f32;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pad;
                            let orow = (oc * oh + oy) * ow;
                            let irow = (ic * h + iy) * w;
                            if stride == 1 {
                                let ib = irow + ox_lo + kx - pad;
                                let len = ox_hi - ox_lo;
                                let gs = &g[orow + ox_lo..orow + ox_lo + len];
                                let xs = &x[ib..ib + len];
                                for (&gv, &xv) in gs.iter().zip(xs) {
                                    acc += gv * xv;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ix = ox * stride + kx - pad;
                                    acc += x[irow + ix] * g[orow + ox];
                                }
                            }
                        }
                        dw[((oc * ci + ic) * k + ky) * k + kx] += acc;
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

/// Reverse-mode differentiation from a rank-0 root. Gradients accumulate
/// into every `requires_grad` leaf (sum across repeated calls until
/// `zero_grad`); intermediate adjoints live only for the duration of the
/// call. Branches that contain no gradient-requiring leaves are skipped.
pub fn backward(root: &Tensor) -> Result<()> {
    if !root.shape().is_empty() {
        return Err(Error::NonScalarRoot(root.shape().to_vec()));
    }
    if !root.inner.track {
        return Ok(());
    }
    let order = topo_order(root);
    let mut grads: HashMap<u64, Vec<f32>> = HashMap::new();
    grads.insert(root.id(), vec![1.0]);
    for t in order.iter().rev() {
        let g = match grads.remove(&t.id()) {
            Some(g) => g,
            None => continue,
        };
        if t.inner.requires_grad {
            t.accumulate_grad(&g);
        }
        if let Some(rec) = &t.inner.record {
            propagate(rec, t, &g, &mut grads)?;
        }
    }
    Ok(())
}

/// Deterministic topological order: iterative DFS following recorded input
/// order, so the reverse walk visits consumers before producers.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    visited.insert(root.id());
    let mut stack: Vec<(Tensor, usize)> = vec![(root.clone(), 0)];
    while let Some((t, i)) = stack.pop() {
        let n_inputs = t.inner.record.as_ref().map_or(0, |r| r.inputs.len());
        if i < n_inputs {
            stack.push((t.clone(), i + 1));
            let child = t.inner.record.as_ref().unwrap().inputs[i].clone();
            if child.inner.track && visited.insert(child.id()) {
                stack.push((child, 0));
            }
        } else {
            order.push(t);
        }
    }
    order
}

fn add_into(grads: &mut HashMap<u64, Vec<f32>>, t: &Tensor, g: Vec<f32>) {
    match grads.entry(t.id()) {
        std::collections::hash_map::Entry::Occupied(mut e) => {
            for (a, b) in e.get_mut().iter_mut().zip(&g) {
                *a += b;
            }
        }
        std::collections::hash_map::Entry::Vacant(e) => {
            e.insert(g);
        }
    }
}

fn wants(t: &Tensor) -> bool {
    t.inner.track
}

fn reduce_to_scalar(g: &[f32]) -> Vec<f32> {
    vec![g.iter().sum()]
}

fn propagate(
    rec: &Record,
    node: &Tensor,
    g: &[f32],
    grads: &mut HashMap<u64, Vec<f32>>,
) -> Result<()> {
    let ins = &rec.inputs;
    match &rec.op {
        Op::Add | Op::Sub => {
            let sign = if matches!(rec.op, Op::Sub) { -1.0f32 } else { 1.0 };
            if wants(&ins[0]) {
                let da = if ins[0].shape().is_empty() && !node.shape().is_empty() {
                    reduce_to_scalar(g)
                } else {
                    g.to_vec()
                };
                add_into(grads, &ins[0], da);
            }
            if wants(&ins[1]) {
                let db: Vec<f32> = if ins[1].shape().is_empty() && !node.shape().is_empty() {
                    vec![sign * g.iter().sum::<f32>()]
                } else {
                    g.iter().map(|&v| sign * v).collect()
                };
                add_into(grads, &ins[1], db);
            }
        }
        Op::Mul => {
            let (ad, bd) = (ins[0].inner.data.borrow(), ins[1].inner.data.borrow());
            if wants(&ins[0]) {
                let da = scaled_partner(g, &bd, ins[0].shape().is_empty(), ins[1].shape().is_empty());
                add_into(grads, &ins[0], da);
            }
            if wants(&ins[1]) {
                let db = scaled_partner(g, &ad, ins[1].shape().is_empty(), ins[0].shape().is_empty());
                add_into(grads, &ins[1], db);
            }
        }
        Op::Div => {
            let (ad, bd) = (ins[0].inner.data.borrow(), ins[1].inner.data.borrow());
            let a_scalar = ins[0].shape().is_empty();
            let b_scalar = ins[1].shape().is_empty();
            if wants(&ins[0]) {
                // da = g / b
                let da: Vec<f32> = if a_scalar && !b_scalar {
                    vec![g.iter().zip(bd.iter()).map(|(&gv, &bv)| gv / bv).sum()]
                } else if b_scalar {
                    let inv = 1.0 / bd[0];
                    g.iter().map(|&gv| gv * inv).collect()
                } else {
                    g.iter().zip(bd.iter()).map(|(&gv, &bv)| gv / bv).collect()
                };
                add_into(grads, &ins[0], da);
            }
            if wants(&ins[1]) {
                // db = -g * a / b^2
                let db: Vec<f32> = if b_scalar {
                    let b2 = bd[0] * bd[0];
                    let s: f32 = if a_scalar {
                        g.iter().map(|&gv| gv * ad[0]).sum()
                    } else {
                        g.iter().zip(ad.iter()).map(|(&gv, &av)| gv * av).sum()
                    };
                    vec![-s / b2]
                } else if a_scalar {
                    g.iter()
                        .zip(bd.iter())
                        .map(|(&gv, &bv)| -gv * ad[0] / (bv * bv))
                        .collect()
                } else {
                    g.iter()
                        .zip(ad.iter())
                        .zip(bd.iter())
                        .map(|((&gv, &av), &bv)| -gv * av / (bv * bv))
                        .collect()
                };
                add_into(grads, &ins[1], db);
            }
        }
        Op::Neg => {
            if wants(&ins[0]) {
                add_into(grads, &ins[0], g.iter().map(|&v| -v).collect());
            }
        }
        Op::Exp => {
            if wants(&ins[0]) {
                let y = node.inner.data.borrow();
                add_into(
                    grads,
                    &ins[0],
                    g.iter().zip(y.iter()).map(|(&gv, &yv)| gv * yv).collect(),
                );
            }
        }
        Op::Scale(c) => {
            if wants(&ins[0]) {
                add_into(grads, &ins[0], g.iter().map(|&v| c * v).collect());
            }
        }
        Op::Silu => {
            if wants(&ins[0]) {
                let x = ins[0].inner.data.borrow();
                add_into(
                    grads,
                    &ins[0],
                    g.iter().zip(x.iter()).map(|(&gv, &xv)| gv * silu_df(xv)).collect(),
                );
            }
        }
        Op::Sigmoid => {
            if wants(&ins[0]) {
                let y = node.inner.data.borrow();
                add_into(
                    grads,
                    &ins[0],
                    g.iter()
                        .zip(y.iter())
                        .map(|(&gv, &yv)| gv * yv * (1.0 - yv))
                        .collect(),
                );
            }
        }
        Op::Tanh => {
            if wants(&ins[0]) {
                let y = node.inner.data.borrow();
                add_into(
                    grads,
                    &ins[0],
                    g.iter()
                        .zip(y.iter())
                        .map(|(&gv, &yv)| gv * (1.0 - yv * yv))
                        .collect(),
                );
            }
        }
        Op::Matmul => {
            let (a, b) = (&ins[0], &ins[1]);
            let (n, k) = (a.shape()[0], a.shape()[1]);
            let m = b.shape()[1];
            if wants(a) {
                let mut da = vec![0.0f32; n * k];
                gemm_nt_acc(g, &b.inner.data.borrow(), &mut da, n, m, k);
                add_into(grads, a, da);
            }
            if wants(b) {
                let mut db = vec![0.0f32; k * m];
                gemm_tn_acc(&a.inner.data.borrow(), g, &mut db, n, k, m);
                add_into(grads, b, db);
            }
        }
        Op::Transpose => {
            if wants(&ins[0]) {
                let (m, n) = (node.shape()[0], node.shape()[1]);
                let mut da = vec![0.0f32; n * m];
                for i in 0..m {
                    for j in 0..n {
                        da[j * m + i] = g[i * n + j];
                    }
                }
                add_into(grads, &ins[0], da);
            }
        }
        Op::Softmax { axis } => {
            if wants(&ins[0]) {
                let y = node.inner.data.borrow();
                let shape = node.shape().to_vec();
                let mut dx = vec![0.0f32; y.len()];
                for_each_lane(&shape, *axis, |base, stride| {
                    let n = shape[*axis];
                    let mut dot = 0.0f32;
                    for j in 0..n {
                        dot += g[base + j * stride] * y[base + j * stride];
                    }
                    for j in 0..n {
                        let idx = base + j * stride;
                        dx[idx] = y[idx] * (g[idx] - dot);
                    }
                })?;
                drop(y);
                add_into(grads, &ins[0], dx);
            }
        }
        Op::LogSoftmax { axis } => {
            if wants(&ins[0]) {
                let y = node.inner.data.borrow();
                let shape = node.shape().to_vec();
                let mut dx = vec![0.0f32; y.len()];
                for_each_lane(&shape, *axis, |base, stride| {
                    let n = shape[*axis];
                    let mut gsum = 0.0f32;
                    for j in 0..n {
                        gsum += g[base + j * stride];
                    }
                    for j in 0..n {
                        let idx = base + j * stride;
                        dx[idx] = g[idx] - y[idx].exp() * gsum;
                    }
                })?;
                drop(y);
                add_into(grads, &ins[0], dx);
            }
        }
        Op::Conv2d { stride, pad } => {
            let (x, wt) = (&ins[0], &ins[1]);
            let xs = x.shape();
            let ws = wt.shape();
            let (ci, h, w) = (xs[0], xs[1], xs[2]);
            let (co, k) = (ws[0], ws[2]);
            let (oh, ow) = (node.shape()[1], node.shape()[2]);
            let mut dx = wants(x).then(|| vec![0.0f32; ci * h * w]);
            let mut dw = wants(wt).then(|| vec![0.0f32; co * ci * k * k]);
            conv2d_backward(
                &x.inner.data.borrow(),
                &wt.inner.data.borrow(),
                g,
                dx.as_mut(),
                dw.as_mut(),
                ci,
                h,
                w,
                co,
                k,
                *stride,
                *pad,
                oh,
                ow,
            );
            if let Some(dx) = dx {
                add_into(grads, x, dx);
            }
            if let Some(dw) = dw {
                add_into(grads, wt, dw);
            }
        }
        Op::SumAll => {
            if wants(&ins[0]) {
                add_into(grads, &ins[0], vec![g[0]; ins[0].numel()]);
            }
        }
        Op::MeanAll => {
            if wants(&ins[0]) {
                let n = ins[0].numel();
                add_into(grads, &ins[0], vec![g[0] / n as f32; n]);
            }
        }
        Op::SqL2Norm => {
            if wants(&ins[0]) {
                let x = ins[0].inner.data.borrow();
                add_into(grads, &ins[0], x.iter().map(|&v| 2.0 * g[0] * v).collect());
            }
        }
        Op::LayerNorm { eps } => {
            let (x, gamma) = (&ins[0], &ins[1]);
            let (rows, cols) = (x.shape()[0], x.shape()[1]);
            let xd = x.inner.data.borrow();
            let gd = gamma.inner.data.borrow();
            let mut dx = wants(x).then(|| vec![0.0f32; rows * cols]);
            let mut dgamma = wants(gamma).then(|| vec![0.0f32; cols]);
            let mut dbeta = wants(&ins[2]).then(|| vec![0.0f32; cols]);
            for r in 0..rows {
                let row = &xd[r * cols..(r + 1) * cols];
                let grow = &g[r * cols..(r + 1) * cols];
                let mean = row.iter().sum::<f32>() / cols as f32;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / cols as f32;
                let inv = 1.0 / (var + eps).sqrt();
                if let Some(dgamma) = dgamma.as_mut() {
                    for c in 0..cols {
                        dgamma[c] += grow[c] * (row[c] - mean) * inv;
                    }
                }
                if let Some(dbeta) = dbeta.as_mut() {
                    for c in 0..cols {
                        dbeta[c] += grow[c];
                    }
                }
                if let Some(dx) = dx.as_mut() {
                    let mut m1 = 0.0f32;
                    let mut m2 = 0.0f32;
                    for c in 0..cols {
                        let a = grow[c] * gd[c];
                        let xh = (row[c] - mean) * inv;
                        m1 += a;
                        m2 += a * xh;
                    }
                    m1 /= cols as f32;
                    m2 /= cols as f32;
                    for c in 0..cols {
                        let a = grow[c] * gd[c];
                        let xh = (row[c] - mean) * inv;
                        dx[r * cols + c] = (a - m1 - xh * m2) * inv;
                    }
                }
            }
            drop(xd);
            drop(gd);
            if let Some(dx) = dx {
                add_into(grads, x, dx);
            }
            if let Some(dgamma) = dgamma {
                add_into(grads, gamma, dgamma);
            }
            if let Some(dbeta) = dbeta {
                add_into(grads, &ins[2], dbeta);
            }
        }
        Op::Upsample2x => {
            if wants(&ins[0]) {
                let s = ins[0].shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (2 * h, 2 * w);
                let mut dx = vec![0.0f32; c * h * w];
                for ch in 0..c {
                    for y in 0..oh {
                        for x in 0..ow {
                            dx[(ch * h + y / 2) * w + x / 2] += g[(ch * oh + y) * ow + x];
                        }
                    }
                }
                add_into(grads, &ins[0], dx);
            }
        }
        Op::Patchify { p } => {
            if wants(&ins[0]) {
                let s = ins[0].shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                let (gh, gw) = (h / p, w / p);
                let cols = c * p * p;
                let mut dx = vec![0.0f32; c * h * w];
                for py in 0..gh {
                    for px in 0..gw {
                        let ti = py * gw + px;
                        for ch in 0..c {
                            for dy in 0..*p {
                                for dxx in 0..*p {
                                    let col = (ch * p + dy) * p + dxx;
                                    dx[(ch * h + py * p + dy) * w + px * p + dxx] +=
                                        g[ti * cols + col];
                                }
                            }
                        }
                    }
                }
                add_into(grads, &ins[0], dx);
            }
        }
        Op::TokensToMap { gh, gw } => {
            if wants(&ins[0]) {
                let c = ins[0].shape()[1];
                let mut dz = vec![0.0f32; gh * gw * c];
                for y in 0..*gh {
                    for x in 0..*gw {
                        let t = y * gw + x;
                        for ch in 0..c {
                            dz[t * c + ch] += g[(ch * gh + y) * gw + x];
                        }
                    }
                }
                add_into(grads, &ins[0], dz);
            }
        }
        Op::Concat { axis } => {
            let (a, b) = (&ins[0], &ins[1]);
            let (outer, _, inner) = lane_geometry(a.shape(), *axis)?;
            let ablk = a.shape()[*axis] * inner;
            let bblk = b.shape()[*axis] * inner;
            if wants(a) {
                let mut da = vec![0.0f32; a.numel()];
                for o in 0..outer {
                    da[o * ablk..(o + 1) * ablk]
                        .copy_from_slice(&g[o * (ablk + bblk)..o * (ablk + bblk) + ablk]);
                }
                add_into(grads, a, da);
            }
            if wants(b) {
                let mut db = vec![0.0f32; b.numel()];
                for o in 0..outer {
                    db[o * bblk..(o + 1) * bblk]
                        .copy_from_slice(&g[o * (ablk + bblk) + ablk..(o + 1) * (ablk + bblk)]);
                }
                add_into(grads, b, db);
            }
        }
        Op::Reshape => {
            if wants(&ins[0]) {
                add_into(grads, &ins[0], g.to_vec());
            }
        }
        Op::Slice { axis, start, len } => {
            if wants(&ins[0]) {
                let s = ins[0].shape();
                let (outer, lane, inner) = lane_geometry(s, *axis)?;
                let mut dx = vec![0.0f32; ins[0].numel()];
                for o in 0..outer {
                    let dst = o * lane * inner + start * inner;
                    let src = o * len * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                add_into(grads, &ins[0], dx);
            }
        }
        Op::AddRowBias => {
            let (rows, cols) = (node.shape()[0], node.shape()[1]);
            if wants(&ins[0]) {
                add_into(grads, &ins[0], g.to_vec());
            }
            if wants(&ins[1]) {
                let mut db = vec![0.0f32; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        db[c] += g[r * cols + c];
                    }
                }
                add_into(grads, &ins[1], db);
            }
        }
        Op::AddChanBias => {
            let (c, h, w) = (node.shape()[0], node.shape()[1], node.shape()[2]);
            if wants(&ins[0]) {
                add_into(grads, &ins[0], g.to_vec());
            }
            if wants(&ins[1]) {
                let mut db = vec![0.0f32; c];
                for ch in 0..c {
                    db[ch] = g[ch * h * w..(ch + 1) * h * w].iter().sum();
                }
                add_into(grads, &ins[1], db);
            }
        }
    }
    Ok(())
}

/// Adjoint of one side of `Mul`: grad times the partner operand, reduced
/// to a scalar when the receiving side is rank-0.
fn scaled_partner(g: &[f32], partner: &[f32], self_scalar: bool, partner_scalar: bool) -> Vec<f32> {
    if self_scalar && !partner_scalar {
        vec![g.iter().zip(partner.iter()).map(|(&gv, &pv)| gv * pv).sum()]
    } else if partner_scalar && !self_scalar {
        let p = partner[0];
        g.iter().map(|&gv| gv * p).collect()
    } else {
        g.iter().zip(partner.iter()).map(|(&gv, &pv)| gv * pv).collect()
    }
}
