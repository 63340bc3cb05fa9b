//! Dense `f64` tensors with reverse-mode automatic differentiation.
//!
//! The engine is deliberately small: enough ops for a compact CNN
//! (matmul, conv2d, relu, maxpool2d, flatten, bias) plus the elementwise
//! pieces the loss functions need. Tensors are immutable after
//! construction except for gradient accumulation; every op that creates
//! new values checks them for NaN/Inf and fails hard instead of
//! propagating silently.
//!
//! [`finite_difference_grad`] is the independent numerical oracle used to
//! validate every backward rule; it never touches the tape.

pub mod kernels;

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// True when ops on tracked tensors record tape nodes (the default).
pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Run `f` with gradient recording disabled (pure inference).
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

/// Closure mapping the upstream gradient to per-input gradients
/// (`None` for inputs that do not track).
pub(crate) type BackwardRule = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>>>;

/// Tape entry: the op that produced a tensor, its parents, and its backward rule.
struct TapeNode {
    op: &'static str,
    inputs: Vec<Tensor>,
    rule: BackwardRule,
}

struct TensorInner {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    node: Option<TapeNode>,
}

/// An n-dimensional array of `f64` with an optional autodiff tape node.
///
/// Cloning is cheap (reference-counted handle). The value buffer is frozen
/// at construction; only the gradient buffer mutates, via accumulation
/// during [`Tensor::backward`].
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<TensorInner>,
}

fn check_shape(data_len: usize, shape: &[usize]) -> Result<()> {
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::Invalid(format!("zero dimension in shape {shape:?}")));
    }
    let expect: usize = shape.iter().product();
    if expect != data_len {
        return Err(Error::Invalid(format!(
            "shape {shape:?} wants {expect} values, got {data_len}"
        )));
    }
    Ok(())
}

fn check_finite(op: &str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op.to_string()))
    }
}

impl Tensor {
    /// Untracked leaf tensor. Rejects non-finite values and shape/data disagreement.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        check_shape(data.len(), shape)?;
        check_finite("new", &data)?;
        Ok(Self::leaf(data, shape.to_vec(), false))
    }

    /// Tracked leaf (a parameter or an input under gradient test).
    pub fn tracked(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        check_shape(data.len(), shape)?;
        check_finite("tracked", &data)?;
        Ok(Self::leaf(data, shape.to_vec(), true))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Self::leaf(vec![0.0; shape.iter().product()], shape.to_vec(), false)
    }

    pub fn scalar(v: f64) -> Result<Tensor> {
        Tensor::new(vec![v], &[1])
    }

    fn leaf(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Tensor {
        Tensor {
            inner: Rc::new(TensorInner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                grad: RefCell::new(None),
                node: None,
            }),
        }
    }

    fn from_op(
        op: &'static str,
        inputs: Vec<Tensor>,
        data: Vec<f64>,
        shape: Vec<usize>,
        rule: impl FnOnce() -> BackwardRule,
    ) -> Tensor {
        let track = grad_enabled() && inputs.iter().any(Tensor::tracks);
        let node = track.then(|| TapeNode {
            op,
            inputs,
            rule: rule(),
        });
        Tensor {
            inner: Rc::new(TensorInner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad: false,
                grad: RefCell::new(None),
                node,
            }),
        }
    }

    /// Scalar-valued custom op; lets the loss modules attach their own
    /// analytic backward rules to the tape.
    pub(crate) fn scalar_op(
        op: &'static str,
        inputs: Vec<Tensor>,
        value: f64,
        rule: impl FnOnce() -> BackwardRule,
    ) -> Tensor {
        Tensor::from_op(op, inputs, vec![value], vec![1], rule)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    pub fn len(&self) -> usize {
        self.inner.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false // zero dimensions are rejected at construction
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.len() == 1 {
            Ok(self.inner.data[0])
        } else {
            Err(Error::Invalid(format!(
                "item() on tensor of shape {:?}",
                self.shape()
            )))
        }
    }

    /// Leaf flag: gradients are wanted here.
    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// True if a backward pass can reach or flow through this tensor.
    pub fn tracks(&self) -> bool {
        self.inner.requires_grad || self.inner.node.is_some()
    }

    /// Copy of the accumulated gradient, if any backward pass has reached this tensor.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Untracked leaf copy of the values.
    pub fn detach(&self) -> Tensor {
        Self::leaf(self.inner.data.clone(), self.inner.shape.clone(), false)
    }

    fn accumulate_grad(&self, g: &[f64]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, &v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    // ---- ops -------------------------------------------------------------

    /// Matrix product `[m×p] · [p×q] -> [m×q]`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (a, b) = (self.shape(), rhs.shape());
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return Err(Error::Invalid(format!("matmul shapes {a:?} x {b:?}")));
        }
        let (m, p, q) = (a[0], a[1], b[1]);
        let mut out = vec![0.0; m * q];
        kernels::matmul_into(self.data(), m, p, rhs.data(), q, &mut out);
        check_finite("matmul", &out)?;
        let (lhs_t, rhs_t) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op(
            "matmul",
            vec![self.clone(), rhs.clone()],
            out,
            vec![m, q],
            move || {
                Box::new(move |g: &[f64]| {
                    let da = lhs_t.tracks().then(|| {
                        let mut da = vec![0.0; m * p];
                        kernels::matmul_nt_into(g, m, q, rhs_t.data(), p, &mut da);
                        da
                    });
                    let db = rhs_t.tracks().then(|| {
                        let mut db = vec![0.0; p * q];
                        kernels::matmul_tn_into(lhs_t.data(), m, p, g, q, &mut db);
                        db
                    });
                    vec![da, db]
                })
            },
        ))
    }

    /// 2-D cross-correlation with zero padding.
    ///
    /// Input `[n×c×h×w]`, kernel `[f×c×kh×kw]`; output
    /// `[n×f×h'×w']` with `h' = (h + 2·padding − kh)/stride + 1` (floor).
    pub fn conv2d(&self, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
        let (xs, ks) = (self.shape(), kernel.shape());
        if xs.len() != 4 || ks.len() != 4 {
            return Err(Error::Invalid(format!("conv2d shapes {xs:?} * {ks:?}")));
        }
        if stride == 0 {
            return Err(Error::Invalid("conv2d stride must be positive".into()));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (f, kc, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if kc != c {
            return Err(Error::Invalid(format!(
                "conv2d channel mismatch: input {c}, kernel {kc}"
            )));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::Invalid(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let oh = kernels::conv_out_dim(h, kh, stride, padding);
        let ow = kernels::conv_out_dim(w, kw, stride, padding);
        let (ckk, owoh) = (c * kh * kw, oh * ow);
        let mut out = vec![0.0; n * f * owoh];
        for i in 0..n {
            let cols = kernels::im2col(
                &self.data()[i * c * h * w..(i + 1) * c * h * w],
                c,
                h,
                w,
                kh,
                kw,
                stride,
                padding,
            );
            kernels::matmul_into(
                kernel.data(),
                f,
                ckk,
                &cols,
                owoh,
                &mut out[i * f * owoh..(i + 1) * f * owoh],
            );
        }
        check_finite("conv2d", &out)?;
        let (x_t, k_t) = (self.clone(), kernel.clone());
        Ok(Tensor::from_op(
            "conv2d",
            vec![self.clone(), kernel.clone()],
            out,
            vec![n, f, oh, ow],
            move || {
                Box::new(move |g: &[f64]| {
                    let mut dk = k_t.tracks().then(|| vec![0.0; f * ckk]);
                    let mut dx = x_t.tracks().then(|| vec![0.0; n * c * h * w]);
                    for i in 0..n {
                        let g_i = &g[i * f * owoh..(i + 1) * f * owoh];
                        if let Some(dk) = dk.as_mut() {
                            let cols = kernels::im2col(
                                &x_t.data()[i * c * h * w..(i + 1) * c * h * w],
                                c,
                                h,
                                w,
                                kh,
                                kw,
                                stride,
                                padding,
                            );
                            kernels::matmul_nt_into(g_i, f, owoh, &cols, ckk, dk);
                        }
                        if let Some(dx) = dx.as_mut() {
                            let mut dcols = vec![0.0; ckk * owoh];
                            kernels::matmul_tn_into(k_t.data(), f, ckk, g_i, owoh, &mut dcols);
                            kernels::col2im_into(
                                &dcols,
                                c,
                                h,
                                w,
                                kh,
                                kw,
                                stride,
                                padding,
                                &mut dx[i * c * h * w..(i + 1) * c * h * w],
                            );
                        }
                    }
                    vec![dx, dk]
                })
            },
        ))
    }

    /// Elementwise max(x, 0). Subgradient at 0 is 0.
    pub fn relu(&self) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|&v| v.max(0.0)).collect();
        let x_t = self.clone();
        Tensor::from_op(
            "relu",
            vec![self.clone()],
            out,
            self.inner.shape.clone(),
            move || {
                Box::new(move |g: &[f64]| {
                    let dx = x_t.tracks().then(|| {
                        g.iter()
                            .zip(x_t.data())
                            .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                            .collect()
                    });
                    vec![dx]
                })
            },
        )
    }

    /// Max pooling over `size×size` windows. Upstream gradient routes only
    /// to each window's argmax (first index in row-major order on ties).
    pub fn maxpool2d(&self, size: usize, stride: usize) -> Result<Tensor> {
        let xs = self.shape();
        if xs.len() != 4 {
            return Err(Error::Invalid(format!("maxpool2d on shape {xs:?}")));
        }
        if size == 0 || stride == 0 {
            return Err(Error::Invalid("maxpool2d size/stride must be positive".into()));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if size > h || size > w {
            return Err(Error::Invalid(format!(
                "maxpool2d window {size} larger than input {h}x{w}"
            )));
        }
        let oh = (h - size) / stride + 1;
        let ow = (w - size) / stride + 1;
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane_idx in 0..n * c {
            let base = plane_idx * h * w;
            let before = argmax.len();
            kernels::maxpool_plane(
                &self.data()[base..base + h * w],
                h,
                w,
                size,
                stride,
                &mut out,
                &mut argmax,
            );
            for a in &mut argmax[before..] {
                *a += base;
            }
        }
        let in_len = self.len();
        let x_t = self.clone();
        Ok(Tensor::from_op(
            "maxpool2d",
            vec![self.clone()],
            out,
            vec![n, c, oh, ow],
            move || {
                Box::new(move |g: &[f64]| {
                    let dx = x_t.tracks().then(|| {
                        let mut dx = vec![0.0; in_len];
                        for (&gv, &src) in g.iter().zip(&argmax) {
                            dx[src] += gv;
                        }
                        dx
                    });
                    vec![dx]
                })
            },
        ))
    }

    /// Collapse all trailing dimensions: `[n×…] -> [n×rest]`.
    pub fn flatten(&self) -> Result<Tensor> {
        let xs = self.shape();
        if xs.len() < 2 {
            return Err(Error::Invalid(format!("flatten on shape {xs:?}")));
        }
        let n = xs[0];
        let rest = self.len() / n;
        let x_t = self.clone();
        Ok(Tensor::from_op(
            "flatten",
            vec![self.clone()],
            self.inner.data.clone(),
            vec![n, rest],
            move || Box::new(move |g: &[f64]| vec![x_t.tracks().then(|| g.to_vec())]),
        ))
    }

    /// Broadcast-add a bias vector: `[n×d] + [d]`, or `[n×f×h×w] + [f]`
    /// across every spatial position.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let (xs, bs) = (self.shape(), bias.shape());
        if bs.len() != 1 {
            return Err(Error::Invalid(format!("bias must be 1-d, got {bs:?}")));
        }
        let d = bs[0];
        let (matches, plane) = match xs.len() {
            2 => (xs[1] == d, 1),
            4 => (xs[1] == d, xs[2] * xs[3]),
            _ => (false, 0),
        };
        if !matches {
            return Err(Error::Invalid(format!("add_bias shapes {xs:?} + {bs:?}")));
        }
        let mut out = self.inner.data.clone();
        for chunk in out.chunks_exact_mut(d * plane) {
            for (j, lane) in chunk.chunks_exact_mut(plane).enumerate() {
                let b = bias.data()[j];
                for v in lane {
                    *v += b;
                }
            }
        }
        check_finite("add_bias", &out)?;
        let (x_t, b_t) = (self.clone(), bias.clone());
        Ok(Tensor::from_op(
            "add_bias",
            vec![self.clone(), bias.clone()],
            out,
            xs.to_vec(),
            move || {
                Box::new(move |g: &[f64]| {
                    let dx = x_t.tracks().then(|| g.to_vec());
                    let db = b_t.tracks().then(|| {
                        let mut db = vec![0.0; d];
                        for chunk in g.chunks_exact(d * plane) {
                            for (j, lane) in chunk.chunks_exact(plane).enumerate() {
                                db[j] += lane.iter().sum::<f64>();
                            }
                        }
                        db
                    });
                    vec![dx, db]
                })
            },
        ))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape() != rhs.shape() {
            return Err(Error::Invalid(format!(
                "add shapes {:?} + {:?}",
                self.shape(),
                rhs.shape()
            )));
        }
        let out: Vec<f64> = self
            .data()
            .iter()
            .zip(rhs.data())
            .map(|(&a, &b)| a + b)
            .collect();
        check_finite("add", &out)?;
        let (a_t, b_t) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op(
            "add",
            vec![self.clone(), rhs.clone()],
            out,
            self.inner.shape.clone(),
            move || {
                Box::new(move |g: &[f64]| {
                    vec![
                        a_t.tracks().then(|| g.to_vec()),
                        b_t.tracks().then(|| g.to_vec()),
                    ]
                })
            },
        ))
    }

    /// Hadamard product of two same-shape tensors.
    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape() != rhs.shape() {
            return Err(Error::Invalid(format!(
                "mul shapes {:?} * {:?}",
                self.shape(),
                rhs.shape()
            )));
        }
        let out: Vec<f64> = self
            .data()
            .iter()
            .zip(rhs.data())
            .map(|(&a, &b)| a * b)
            .collect();
        check_finite("mul", &out)?;
        let (a_t, b_t) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op(
            "mul",
            vec![self.clone(), rhs.clone()],
            out,
            self.inner.shape.clone(),
            move || {
                Box::new(move |g: &[f64]| {
                    let da = a_t
                        .tracks()
                        .then(|| g.iter().zip(b_t.data()).map(|(&gv, &b)| gv * b).collect());
                    let db = b_t
                        .tracks()
                        .then(|| g.iter().zip(a_t.data()).map(|(&gv, &a)| gv * a).collect());
                    vec![da, db]
                })
            },
        ))
    }

    /// Multiply every element by a finite constant.
    pub fn scale(&self, c: f64) -> Result<Tensor> {
        if !c.is_finite() {
            return Err(Error::NonFinite("scale factor".into()));
        }
        let out: Vec<f64> = self.data().iter().map(|&v| v * c).collect();
        check_finite("scale", &out)?;
        let x_t = self.clone();
        Ok(Tensor::from_op(
            "scale",
            vec![self.clone()],
            out,
            self.inner.shape.clone(),
            move || {
                Box::new(move |g: &[f64]| {
                    vec![x_t
                        .tracks()
                        .then(|| g.iter().map(|&gv| gv * c).collect())]
                })
            },
        ))
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&self) -> Result<Tensor> {
        let total: f64 = self.data().iter().sum();
        check_finite("sum", &[total])?;
        let in_len = self.len();
        let x_t = self.clone();
        Ok(Tensor::from_op(
            "sum",
            vec![self.clone()],
            vec![total],
            vec![1],
            move || {
                Box::new(move |g: &[f64]| vec![x_t.tracks().then(|| vec![g[0]; in_len])])
            },
        ))
    }

    /// Reverse-mode pass from a scalar loss.
    ///
    /// Populates `grad` on every tracked tensor reachable from this one;
    /// gradients accumulate additively across uses and across calls.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::Invalid(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        let order = topo_order(self)?;
        self.accumulate_grad(&[1.0]);
        for t in order.iter().rev() {
            let Some(node) = &t.inner.node else { continue };
            let upstream = t
                .inner
                .grad
                .borrow()
                .clone()
                .expect("topological order guarantees an upstream gradient");
            let grads = (node.rule)(&upstream);
            debug_assert_eq!(grads.len(), node.inputs.len());
            for (input, g) in node.inputs.iter().zip(grads) {
                if let Some(g) = g {
                    check_finite(node.op, &g)?;
                    input.accumulate_grad(&g);
                }
            }
        }
        Ok(())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor(shape={:?}, tracks={})",
            self.inner.shape,
            self.tracks()
        )
    }
}

/// Dependencies-first ordering of the tape reachable from `root`.
fn topo_order(root: &Tensor) -> Result<Vec<Tensor>> {
    const IN_PROGRESS: u8 = 1;
    const DONE: u8 = 2;
    let mut state: HashMap<u64, u8> = HashMap::new();
    let mut order = Vec::new();
    let mut stack: Vec<(Tensor, usize)> = vec![(root.clone(), 0)];
    state.insert(root.inner.id, IN_PROGRESS);
    while let Some((t, child)) = stack.pop() {
        let inputs = t.inner.node.as_ref().map(|n| &n.inputs);
        let n_children = inputs.map_or(0, |i| i.len());
        if child < n_children {
            let next = inputs.unwrap()[child].clone();
            stack.push((t, child + 1));
            match state.get(&next.inner.id) {
                Some(&IN_PROGRESS) => {
                    return Err(Error::Invalid("cycle detected in autodiff tape".into()))
                }
                Some(&DONE) => {}
                _ => {
                    state.insert(next.inner.id, IN_PROGRESS);
                    stack.push((next, 0));
                }
            }
        } else {
            state.insert(t.inner.id, DONE);
            order.push(t);
        }
    }
    Ok(order)
}

/// Central-difference gradient of a scalar-valued function, the numerical
/// oracle for every analytic backward rule in this crate:
/// `(f(x+εe_i) − f(x−εe_i)) / 2ε` per coordinate. Runs with the tape off.
pub fn finite_difference_grad(
    f: &dyn Fn(&Tensor) -> Result<f64>,
    x: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    if !(eps > 0.0) {
        return Err(Error::Invalid("finite differences need eps > 0".into()));
    }
    no_grad(|| {
        let mut grad = vec![0.0; x.len()];
        let mut probe = x.data().to_vec();
        for i in 0..probe.len() {
            let orig = probe[i];
            probe[i] = orig + eps;
            let hi = f(&Tensor::new(probe.clone(), x.shape())?)?;
            probe[i] = orig - eps;
            let lo = f(&Tensor::new(probe.clone(), x.shape())?)?;
            probe[i] = orig;
            grad[i] = (hi - lo) / (2.0 * eps);
        }
        Tensor::new(grad, x.shape())
    })
}

/// Largest relative discrepancy between two same-length gradient vectors,
/// with `floor` guarding the denominator for near-zero entries.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
