//! Minimal reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Tape`] records every primitive operation performed during forward
//! evaluation as a dynamic trace; [`Tape::backward`] replays the trace in
//! reverse topological order (which is simply reverse insertion order) and
//! accumulates gradients additively, so using a tensor twice yields the sum
//! of per-use gradients.
//!
//! Gradients are only materialized for nodes with `requires_grad`, which
//! propagates forward from leaves: a subtree rooted in frozen leaves is
//! skipped entirely during backward. No broadcasting beyond scalar-tensor
//! ops; every shape is explicit so each backward rule stays auditable.

mod kernels;

use crate::error::{PgeError, Result};
use std::rc::Rc;

pub(crate) use kernels::{matmul_a_bt_acc, matmul_acc, matmul_at_b_acc};

/// Row-major dense f64 array. Plain value type: tensors become
/// differentiable only once placed on a [`Tape`].
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor, checking that `product(shape) == data.len()`.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || expect != data.len() {
            return Err(PgeError::Shape(format!(
                "shape {:?} requires {} elements, got {}",
                shape,
                expect,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    /// Rank-1 scalar wrapper (shape `[1]`); losses and reductions use it.
    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Scalar payload of a shape-`[1]` tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(PgeError::Contract(format!(
                "item() needs a scalar tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Element of a rank-2 tensor by (row, col).
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

/// Primitive operations; each variant stores its operand handles plus any
/// non-tensor attributes its backward rule needs.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(TensorId, TensorId),
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Neg(TensorId),
    Relu(TensorId),
    Sigmoid(TensorId),
    Tanh(TensorId),
    Exp(TensorId),
    Log(TensorId),
    Scale(TensorId, f64),
    AddScalar(TensorId),
    Sum(TensorId),
    Mean(TensorId),
    Transpose(TensorId),
    Reshape(TensorId),
    L2NormalizeRows(TensorId),
    CrossEntropyDiag(TensorId),
    ScaleRows(TensorId, TensorId),
    GatherRows(TensorId, Rc<Vec<usize>>),
    RowBias(TensorId, TensorId),
    ChannelBias(TensorId, TensorId),
    Conv2d {
        input: TensorId,
        kernel: TensorId,
        stride: usize,
        pad: usize,
    },
    Upsample2x(TensorId),
    AvgPool2x(TensorId),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation trace: ordered list of nodes where every operand precedes its
/// consumer. Rebuilt each training step.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

/// Row-wise L2 norms are clamped below by this before dividing, so
/// zero rows normalize to zero instead of NaN.
pub const NORM_EPS: f64 = 1e-12;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> TensorId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn rg(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Record an input tensor. Gradients flow into it iff `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> TensorId {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Record a value that never receives gradient (detached constant).
    pub fn constant(&mut self, value: Tensor) -> TensorId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.rg(id)
    }

    /// Gradient of the last `backward` root w.r.t. `id`, if one was
    /// accumulated. Always `None` for `requires_grad == false` nodes.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    // ---- binary elementwise -------------------------------------------------

    fn check_same_shape(&self, a: TensorId, b: TensorId, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(PgeError::Shape(format!(
                "{what} needs equal shapes, got {sa:?} vs {sb:?}"
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape(a, b, "add")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(data, Op::Add(a, b), self.rg(a) || self.rg(b)))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape(a, b, "sub")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(data, Op::Sub(a, b), self.rg(a) || self.rg(b)))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape(a, b, "mul")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(data, Op::Mul(a, b), self.rg(a) || self.rg(b)))
    }

    // ---- unary elementwise --------------------------------------------------

    fn unary(&mut self, x: TensorId, op: Op, f: impl Fn(f64) -> f64) -> TensorId {
        let v = self.value(x);
        let out = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&e| f(e)).collect(),
        };
        let rg = self.rg(x);
        self.push(out, op, rg)
    }

    pub fn neg(&mut self, x: TensorId) -> TensorId {
        self.unary(x, Op::Neg(x), |e| -e)
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        self.unary(x, Op::Relu(x), |e| if e > 0.0 { e } else { 0.0 })
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn exp(&mut self, x: TensorId) -> TensorId {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: TensorId) -> Result<TensorId> {
        if let Some(&bad) = self.value(x).data().iter().find(|&&e| e <= 0.0) {
            return Err(PgeError::Domain(format!(
                "log of non-positive value {bad}"
            )));
        }
        Ok(self.unary(x, Op::Log(x), f64::ln))
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        self.unary(x, Op::Scale(x, c), |e| c * e)
    }

    pub fn add_scalar(&mut self, x: TensorId, c: f64) -> TensorId {
        self.unary(x, Op::AddScalar(x), |e| e + c)
    }

    // ---- reductions ----------------------------------------------------------

    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: TensorId) -> TensorId {
        let v = self.value(x);
        let s: f64 = v.data().iter().sum();
        let m = s / v.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    // ---- structure -----------------------------------------------------------

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 2 || va.shape[1] != vb.shape[0] {
            return Err(PgeError::Shape(format!(
                "matmul dimension mismatch: {:?} x {:?}",
                va.shape, vb.shape
            )));
        }
        let (m, k, n) = (va.shape[0], va.shape[1], vb.shape[1]);
        let mut out = vec![0.0; m * n];
        matmul_acc(&va.data, &vb.data, m, k, n, &mut out);
        let t = Tensor {
            shape: vec![m, n],
            data: out,
        };
        Ok(self.push(t, Op::Matmul(a, b), self.rg(a) || self.rg(b)))
    }

    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        let v = self.value(x);
        if v.rank() != 2 {
            return Err(PgeError::Shape(format!(
                "transpose needs rank 2, got {:?}",
                v.shape
            )));
        }
        let (m, n) = (v.shape[0], v.shape[1]);
        let mut out = vec![0.0; m * n];
        transpose_into(&v.data, m, n, &mut out);
        let t = Tensor {
            shape: vec![n, m],
            data: out,
        };
        let rg = self.rg(x);
        Ok(self.push(t, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let v = self.value(x);
        let n: usize = shape.iter().product();
        if n != v.len() || shape.iter().any(|&d| d == 0) {
            return Err(PgeError::Shape(format!(
                "cannot reshape {:?} into {:?}",
                v.shape, shape
            )));
        }
        let t = Tensor {
            shape,
            data: v.data.clone(),
        };
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Divide each row of a rank-2 tensor by `max(‖row‖₂, NORM_EPS)`.
    pub fn l2_normalize_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let v = self.value(x);
        if v.rank() != 2 {
            return Err(PgeError::Shape(format!(
                "l2_normalize_rows needs rank 2, got {:?}",
                v.shape
            )));
        }
        let (n, d) = (v.shape[0], v.shape[1]);
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = &v.data[i * d..(i + 1) * d];
            let m = row_norm(row).max(NORM_EPS);
            for (o, &e) in out[i * d..(i + 1) * d].iter_mut().zip(row) {
                *o = e / m;
            }
        }
        let t = Tensor {
            shape: vec![n, d],
            data: out,
        };
        let rg = self.rg(x);
        Ok(self.push(t, Op::L2NormalizeRows(x), rg))
    }

    /// Fused infoNCE core: given a square logit matrix S[M,M] whose diagonal
    /// holds the positive-pair logits, return the scalar
    /// `-(1/M)·Σ_i log softmax(S_i)_{i}`, stabilized by subtracting each
    /// row's max inside the softmax. Backward is `(softmax(S) − I)/M`.
    pub fn cross_entropy_diag(&mut self, logits: TensorId) -> Result<TensorId> {
        let v = self.value(logits);
        if v.rank() != 2 || v.shape[0] != v.shape[1] {
            return Err(PgeError::Shape(format!(
                "cross_entropy_diag needs a square matrix, got {:?}",
                v.shape
            )));
        }
        let m = v.shape[0];
        let mut loss = 0.0;
        for i in 0..m {
            let row = &v.data[i * m..(i + 1) * m];
            let mx = row_max(row);
            let lse: f64 = row.iter().map(|&e| (e - mx).exp()).sum();
            loss += lse.ln() - (row[i] - mx);
        }
        loss /= m as f64;
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropyDiag(logits), rg))
    }

    /// Multiply row i of `x[N,D]` by `s[i]`; `s` has shape `[N]` or `[N,1]`.
    pub fn scale_rows(&mut self, x: TensorId, s: TensorId) -> Result<TensorId> {
        let (vx, vs) = (self.value(x), self.value(s));
        let n = vx.shape[0];
        let s_ok = vs.shape.as_slice() == [n] || vs.shape.as_slice() == [n, 1];
        if vx.rank() != 2 || !s_ok {
            return Err(PgeError::Shape(format!(
                "scale_rows needs x[N,D] and s[N], got {:?} and {:?}",
                vx.shape, vs.shape
            )));
        }
        let d = vx.shape[1];
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let si = vs.data[i];
            for (o, &e) in out[i * d..(i + 1) * d]
                .iter_mut()
                .zip(&vx.data[i * d..(i + 1) * d])
            {
                *o = si * e;
            }
        }
        let t = Tensor {
            shape: vec![n, d],
            data: out,
        };
        Ok(self.push(t, Op::ScaleRows(x, s), self.rg(x) || self.rg(s)))
    }

    /// Select rows of `x[N,D]` by index; backward scatter-adds, so duplicate
    /// indices accumulate.
    pub fn gather_rows(&mut self, x: TensorId, indices: Rc<Vec<usize>>) -> Result<TensorId> {
        let v = self.value(x);
        if v.rank() != 2 {
            return Err(PgeError::Shape(format!(
                "gather_rows needs rank 2, got {:?}",
                v.shape
            )));
        }
        let (n, d) = (v.shape[0], v.shape[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(PgeError::Bounds(format!(
                "gather_rows index {bad} out of range for {n} rows"
            )));
        }
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices.iter() {
            out.extend_from_slice(&v.data[i * d..(i + 1) * d]);
        }
        let t = Tensor {
            shape: vec![indices.len(), d],
            data: out,
        };
        let rg = self.rg(x);
        Ok(self.push(t, Op::GatherRows(x, indices), rg))
    }

    /// Add bias vector `b[D]` to every row of `x[N,D]`.
    pub fn row_bias(&mut self, x: TensorId, b: TensorId) -> Result<TensorId> {
        let (vx, vb) = (self.value(x), self.value(b));
        if vx.rank() != 2 || vb.shape.as_slice() != [vx.shape[1]] {
            return Err(PgeError::Shape(format!(
                "row_bias needs x[N,D] and b[D], got {:?} and {:?}",
                vx.shape, vb.shape
            )));
        }
        let (n, d) = (vx.shape[0], vx.shape[1]);
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for ((o, &e), &bv) in out[i * d..(i + 1) * d]
                .iter_mut()
                .zip(&vx.data[i * d..(i + 1) * d])
                .zip(&vb.data)
            {
                *o = e + bv;
            }
        }
        let t = Tensor {
            shape: vec![n, d],
            data: out,
        };
        Ok(self.push(t, Op::RowBias(x, b), self.rg(x) || self.rg(b)))
    }

    /// Add bias `b[C]` to every spatial position of `x[C,H,W]`.
    pub fn channel_bias(&mut self, x: TensorId, b: TensorId) -> Result<TensorId> {
        let (vx, vb) = (self.value(x), self.value(b));
        if vx.rank() != 3 || vb.shape.as_slice() != [vx.shape[0]] {
            return Err(PgeError::Shape(format!(
                "channel_bias needs x[C,H,W] and b[C], got {:?} and {:?}",
                vx.shape, vb.shape
            )));
        }
        let (c, hw) = (vx.shape[0], vx.shape[1] * vx.shape[2]);
        let mut out = vec![0.0; c * hw];
        for ch in 0..c {
            let bv = vb.data[ch];
            for (o, &e) in out[ch * hw..(ch + 1) * hw]
                .iter_mut()
                .zip(&vx.data[ch * hw..(ch + 1) * hw])
            {
                *o = e + bv;
            }
        }
        let t = Tensor {
            shape: vx.shape.clone(),
            data: out,
        };
        Ok(self.push(t, Op::ChannelBias(x, b), self.rg(x) || self.rg(b)))
    }

    /// 2-D cross-correlation of `input[C_in,H,W]` with `kernel[C_out,C_in,k,k]`
    /// under zero padding, realized as im2col + matmul.
    pub fn conv2d(
        &mut self,
        input: TensorId,
        kernel: TensorId,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId> {
        let (vi, vk) = (self.value(input), self.value(kernel));
        if vi.rank() != 3 || vk.rank() != 4 {
            return Err(PgeError::Shape(format!(
                "conv2d needs input[C,H,W] and kernel[O,C,k,k], got {:?} and {:?}",
                vi.shape, vk.shape
            )));
        }
        let (c, h, w) = (vi.shape[0], vi.shape[1], vi.shape[2]);
        let (oc, kc, kh, kw) = (vk.shape[0], vk.shape[1], vk.shape[2], vk.shape[3]);
        if kc != c || kh != kw || kh % 2 == 0 || stride == 0 {
            return Err(PgeError::Shape(format!(
                "conv2d kernel {:?} incompatible with input {:?} (need odd square kernel, matching channels, stride ≥ 1)",
                vk.shape, vi.shape
            )));
        }
        let k = kh;
        let (oh, ow) = match (
            kernels::conv_out_extent(h, k, stride, pad),
            kernels::conv_out_extent(w, k, stride, pad),
        ) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(PgeError::Shape(format!(
                    "conv2d output size not integral for input {:?}, kernel {k}, stride {stride}, pad {pad}",
                    vi.shape
                )))
            }
        };
        let mut cols = vec![0.0; c * k * k * oh * ow];
        kernels::im2col(&vi.data, c, h, w, k, stride, pad, oh, ow, &mut cols);
        let mut out = vec![0.0; oc * oh * ow];
        matmul_acc(&vk.data, &cols, oc, c * k * k, oh * ow, &mut out);
        let t = Tensor {
            shape: vec![oc, oh, ow],
            data: out,
        };
        Ok(self.push(
            t,
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad,
            },
            self.rg(input) || self.rg(kernel),
        ))
    }

    /// Nearest-neighbor 2× spatial upsampling of `x[C,H,W]`.
    pub fn upsample2x(&mut self, x: TensorId) -> Result<TensorId> {
        let v = self.value(x);
        if v.rank() != 3 {
            return Err(PgeError::Shape(format!(
                "upsample2x needs rank 3, got {:?}",
                v.shape
            )));
        }
        let (c, h, w) = (v.shape[0], v.shape[1], v.shape[2]);
        let mut out = vec![0.0; c * 4 * h * w];
        for ch in 0..c {
            for i in 0..h {
                let src = &v.data[(ch * h + i) * w..(ch * h + i + 1) * w];
                for di in 0..2 {
                    let base = (ch * 2 * h + 2 * i + di) * 2 * w;
                    for (j, &e) in src.iter().enumerate() {
                        out[base + 2 * j] = e;
                        out[base + 2 * j + 1] = e;
                    }
                }
            }
        }
        let t = Tensor {
            shape: vec![c, 2 * h, 2 * w],
            data: out,
        };
        let rg = self.rg(x);
        Ok(self.push(t, Op::Upsample2x(x), rg))
    }

    /// 2×2 average pooling with stride 2 on `x[C,H,W]`; H and W must be even.
    pub fn avgpool2x(&mut self, x: TensorId) -> Result<TensorId> {
        let v = self.value(x);
        if v.rank() != 3 {
            return Err(PgeError::Shape(format!(
                "avgpool2x needs rank 3, got {:?}",
                v.shape
            )));
        }
        let (c, h, w) = (v.shape[0], v.shape[1], v.shape[2]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(PgeError::Shape(format!(
                "avgpool2x needs even spatial dims, got {:?}",
                v.shape
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let base = (ch * h + 2 * i) * w + 2 * j;
                    out[(ch * oh + i) * ow + j] =
                        0.25 * (v.data[base] + v.data[base + 1] + v.data[base + w] + v.data[base + w + 1]);
                }
            }
        }
        let t = Tensor {
            shape: vec![c, oh, ow],
            data: out,
        };
        let rg = self.rg(x);
        Ok(self.push(t, Op::AvgPool2x(x), rg))
    }

    // ---- backward ------------------------------------------------------------

    /// Reverse sweep from a scalar root. Every `requires_grad` node reachable
    /// from `loss` ends up with `dloss/dnode` retrievable via [`Tape::grad`];
    /// gradients of earlier `backward` calls on this tape are discarded.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(PgeError::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(loss).shape
            )));
        }
        let n = self.nodes.len();
        self.grads = (0..n).map(|_| None).collect();
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || self.grads[i].is_none() {
                continue;
            }
            let g = self.grads[i].take().expect("checked above");
            self.step_backward(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Apply node `i`'s backward rule, scattering `g` into operand gradients.
    fn step_backward(&mut self, i: usize, g: &[f64]) {
        // Split borrows: rules read `nodes` immutably and write `grads`.
        let Tape { nodes, grads } = self;
        let acc = |grads: &mut Vec<Option<Vec<f64>>>, id: TensorId, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[id.0].requires_grad {
                return;
            }
            let buf = grads[id.0].get_or_insert_with(|| vec![0.0; nodes[id.0].value.len()]);
            f(buf);
        };
        let val = |id: TensorId| -> &Tensor { &nodes[id.0].value };
        match nodes[i].op.clone() {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (va, vb) = (val(a), val(b));
                let (m, k, n2) = (va.shape[0], va.shape[1], vb.shape[1]);
                acc(grads, a, &mut |ga| {
                    matmul_a_bt_acc(g, &vb.data, m, n2, k, ga);
                });
                acc(grads, b, &mut |gb| {
                    matmul_at_b_acc(&va.data, g, m, k, n2, gb);
                });
            }
            Op::Add(a, b) => {
                acc(grads, a, &mut |ga| axpy(1.0, g, ga));
                acc(grads, b, &mut |gb| axpy(1.0, g, gb));
            }
            Op::Sub(a, b) => {
                acc(grads, a, &mut |ga| axpy(1.0, g, ga));
                acc(grads, b, &mut |gb| axpy(-1.0, g, gb));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(a), val(b));
                acc(grads, a, &mut |ga| {
                    for ((o, &gv), &bv) in ga.iter_mut().zip(g).zip(&vb.data) {
                        *o += gv * bv;
                    }
                });
                acc(grads, b, &mut |gb| {
                    for ((o, &gv), &av) in gb.iter_mut().zip(g).zip(&va.data) {
                        *o += gv * av;
                    }
                });
            }
            Op::Neg(x) => acc(grads, x, &mut |gx| axpy(-1.0, g, gx)),
            Op::Relu(x) => {
                let vx = val(x);
                acc(grads, x, &mut |gx| {
                    for ((o, &gv), &e) in gx.iter_mut().zip(g).zip(&vx.data) {
                        if e > 0.0 {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = &nodes[i].value;
                acc(grads, x, &mut |gx| {
                    for ((o, &gv), &yv) in gx.iter_mut().zip(g).zip(&y.data) {
                        *o += gv * yv * (1.0 - yv);
                    }
                });
            }
            Op::Tanh(x) => {
                let y = &nodes[i].value;
                acc(grads, x, &mut |gx| {
                    for ((o, &gv), &yv) in gx.iter_mut().zip(g).zip(&y.data) {
                        *o += gv * (1.0 - yv * yv);
                    }
                });
            }
            Op::Exp(x) => {
                let y = &nodes[i].value;
                acc(grads, x, &mut |gx| {
                    for ((o, &gv), &yv) in gx.iter_mut().zip(g).zip(&y.data) {
                        *o += gv * yv;
                    }
                });
            }
            Op::Log(x) => {
                let vx = val(x);
                acc(grads, x, &mut |gx| {
                    for ((o, &gv), &e) in gx.iter_mut().zip(g).zip(&vx.data) {
                        *o += gv / e;
                    }
                });
            }
            Op::Scale(x, c) => acc(grads, x, &mut |gx| axpy(c, g, gx)),
            Op::AddScalar(x) => acc(grads, x, &mut |gx| axpy(1.0, g, gx)),
            Op::Sum(x) => {
                let gv = g[0];
                acc(grads, x, &mut |gx| {
                    for o in gx.iter_mut() {
                        *o += gv;
                    }
                });
            }
            Op::Mean(x) => {
                let gv = g[0] / val(x).len() as f64;
                acc(grads, x, &mut |gx| {
                    for o in gx.iter_mut() {
                        *o += gv;
                    }
                });
            }
            Op::Transpose(x) => {
                let vx = val(x);
                let (m, n2) = (vx.shape[0], vx.shape[1]);
                acc(grads, x, &mut |gx| {
                    // g has shape [n2, m]; scatter gᵀ into gx[m, n2].
                    for r in 0..n2 {
                        for c2 in 0..m {
                            gx[c2 * n2 + r] += g[r * m + c2];
                        }
                    }
                });
            }
            Op::Reshape(x) => acc(grads, x, &mut |gx| axpy(1.0, g, gx)),
            Op::L2NormalizeRows(x) => {
                let vx = val(x);
                let y = &nodes[i].value;
                let (n2, d) = (vx.shape[0], vx.shape[1]);
                acc(grads, x, &mut |gx| {
                    for r in 0..n2 {
                        let xr = &vx.data[r * d..(r + 1) * d];
                        let yr = &y.data[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let norm = row_norm(xr);
                        let m = norm.max(NORM_EPS);
                        let out = &mut gx[r * d..(r + 1) * d];
                        if norm < NORM_EPS {
                            // Clamped branch: y = x / NORM_EPS is linear.
                            for (o, &gv) in out.iter_mut().zip(gr) {
                                *o += gv / m;
                            }
                        } else {
                            let gy: f64 = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                            for ((o, &gv), &yv) in out.iter_mut().zip(gr).zip(yr) {
                                *o += (gv - yv * gy) / m;
                            }
                        }
                    }
                });
            }
            Op::CrossEntropyDiag(x) => {
                let vx = val(x);
                let m = vx.shape[0];
                let gv = g[0] / m as f64;
                acc(grads, x, &mut |gx| {
                    for r in 0..m {
                        let row = &vx.data[r * m..(r + 1) * m];
                        let mx = row_max(row);
                        let mut denom = 0.0;
                        for &e in row {
                            denom += (e - mx).exp();
                        }
                        let out = &mut gx[r * m..(r + 1) * m];
                        for (c2, (o, &e)) in out.iter_mut().zip(row).enumerate() {
                            let p = (e - mx).exp() / denom;
                            let delta = if c2 == r { 1.0 } else { 0.0 };
                            *o += gv * (p - delta);
                        }
                    }
                });
            }
            Op::ScaleRows(x, s) => {
                let (vx, vs) = (val(x), val(s));
                let (n2, d) = (vx.shape[0], vx.shape[1]);
                acc(grads, x, &mut |gx| {
                    for r in 0..n2 {
                        let sv = vs.data[r];
                        for (o, &gv) in gx[r * d..(r + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *o += sv * gv;
                        }
                    }
                });
                acc(grads, s, &mut |gs| {
                    for r in 0..n2 {
                        let mut dot = 0.0;
                        for (&gv, &e) in g[r * d..(r + 1) * d].iter().zip(&vx.data[r * d..(r + 1) * d]) {
                            dot += gv * e;
                        }
                        gs[r] += dot;
                    }
                });
            }
            Op::GatherRows(x, idx) => {
                let d = val(x).shape[1];
                acc(grads, x, &mut |gx| {
                    for (j, &src) in idx.iter().enumerate() {
                        for (o, &gv) in gx[src * d..(src + 1) * d].iter_mut().zip(&g[j * d..(j + 1) * d]) {
                            *o += gv;
                        }
                    }
                });
            }
            Op::RowBias(x, b) => {
                let (n2, d) = (val(x).shape[0], val(x).shape[1]);
                acc(grads, x, &mut |gx| axpy(1.0, g, gx));
                acc(grads, b, &mut |gb| {
                    for r in 0..n2 {
                        for (o, &gv) in gb.iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *o += gv;
                        }
                    }
                });
            }
            Op::ChannelBias(x, b) => {
                let vx = val(x);
                let (c, hw) = (vx.shape[0], vx.shape[1] * vx.shape[2]);
                acc(grads, x, &mut |gx| axpy(1.0, g, gx));
                acc(grads, b, &mut |gb| {
                    for ch in 0..c {
                        let mut s = 0.0;
                        for &gv in &g[ch * hw..(ch + 1) * hw] {
                            s += gv;
                        }
                        gb[ch] += s;
                    }
                });
            }
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad,
            } => {
                let (vi, vk) = (val(input), val(kernel));
                let (c, h, w) = (vi.shape[0], vi.shape[1], vi.shape[2]);
                let (oc, k) = (vk.shape[0], vk.shape[2]);
                let (oh, ow) = (nodes[i].value.shape[1], nodes[i].value.shape[2]);
                let need_input = nodes[input.0].requires_grad;
                let need_kernel = nodes[kernel.0].requires_grad;
                if !need_input && !need_kernel {
                    return;
                }
                // The unfolded input is recomputed rather than cached on the
                // tape: trading one im2col pass for not holding every conv's
                // column matrix alive until backward.
                let mut cols = vec![0.0; c * k * k * oh * ow];
                kernels::im2col(&vi.data, c, h, w, k, stride, pad, oh, ow, &mut cols);
                if need_kernel {
                    acc(grads, kernel, &mut |gk| {
                        matmul_a_bt_acc(g, &cols, oc, oh * ow, c * k * k, gk);
                    });
                }
                if need_input {
                    let mut gcols = vec![0.0; c * k * k * oh * ow];
                    matmul_at_b_acc(&vk.data, g, oc, c * k * k, oh * ow, &mut gcols);
                    acc(grads, input, &mut |gx| {
                        kernels::col2im_acc(&gcols, c, h, w, k, stride, pad, oh, ow, gx);
                    });
                }
            }
            Op::Upsample2x(x) => {
                let vx = val(x);
                let (c, h, w) = (vx.shape[0], vx.shape[1], vx.shape[2]);
                acc(grads, x, &mut |gx| {
                    for ch in 0..c {
                        for r in 0..h {
                            for c2 in 0..w {
                                let mut s = 0.0;
                                for di in 0..2 {
                                    let base = (ch * 2 * h + 2 * r + di) * 2 * w + 2 * c2;
                                    s += g[base] + g[base + 1];
                                }
                                gx[(ch * h + r) * w + c2] += s;
                            }
                        }
                    }
                });
            }
            Op::AvgPool2x(x) => {
                let vx = val(x);
                let (c, h, w) = (vx.shape[0], vx.shape[1], vx.shape[2]);
                let (oh, ow) = (h / 2, w / 2);
                acc(grads, x, &mut |gx| {
                    for ch in 0..c {
                        for i in 0..oh {
                            for j in 0..ow {
                                let share = 0.25 * g[(ch * oh + i) * ow + j];
                                let base = (ch * h + 2 * i) * w + 2 * j;
                                gx[base] += share;
                                gx[base + 1] += share;
                                gx[base + w] += share;
                                gx[base + w + 1] += share;
                            }
                        }
                    }
                });
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

fn transpose_into(a: &[f64], m: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
}

fn row_norm(row: &[f64]) -> f64 {
    row.iter().map(|&e| e * e).sum::<f64>().sqrt()
}

fn row_max(row: &[f64]) -> f64 {
    row.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// y += a·x
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (o, &e) in y.iter_mut().zip(x) {
        *o += a * e;
    }
}
