//! Dense tensors and a reverse-mode differentiation tape.
//!
//! Tensors are row-major with at most four axes, laid out as
//! batch × channel × height × width. The [`Tape`] records every primitive
//! applied to a value that requires a gradient, and [`Tape::backward`]
//! replays the record in reverse exactly once per node.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value at flat index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("{op}: invalid attribute: {detail}")]
    Attr { op: &'static str, detail: String },
    #[error("unknown variable index {0}")]
    UnknownVar(usize),
}

pub type Result<T> = std::result::Result<T, TensorError>;

fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(TensorError::Shape {
        op,
        detail: detail.into(),
    })
}

/// Dense row-major array of finite `f64` values.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 4 {
            return shape_err("tensor", format!("order must be 1..=4, got {}", shape.len()));
        }
        if shape.contains(&0) {
            return shape_err("tensor", format!("extents must be positive, got {shape:?}"));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return shape_err(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            );
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "tensor", index });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self::new(shape, vec![value; numel]).expect("valid shape")
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(&[1], vec![value]).expect("finite scalar")
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let numel: usize = shape.iter().product();
        Self::new(shape, (0..numel).map(&mut f).collect()).expect("valid shape and finite values")
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Shape padded on the left to four axes.
    pub fn dims4(&self) -> [usize; 4] {
        let mut out = [1; 4];
        let off = 4 - self.shape.len();
        out[off..].copy_from_slice(&self.shape);
        out
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.is_empty() || shape.len() > 4 {
            return shape_err(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            );
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Copy of item `n` along the leading (batch) axis, keeping a batch axis of 1.
    pub fn batch_item(&self, n: usize) -> Tensor {
        let [b, c, h, w] = self.dims4();
        assert!(n < b, "batch index {n} out of range {b}");
        let len = c * h * w;
        Tensor {
            shape: vec![1, c, h, w],
            data: self.data[n * len..(n + 1) * len].to_vec(),
        }
    }

    /// Stacks four-axis tensors with equal trailing extents along the batch axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let Some(first) = items.first() else {
            return shape_err("stack", "no tensors to stack");
        };
        let [_, c, h, w] = first.dims4();
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        let mut batch = 0;
        for t in items {
            let [b, c2, h2, w2] = t.dims4();
            if (c2, h2, w2) != (c, h, w) {
                return shape_err(
                    "stack",
                    format!("expected trailing extents {:?}, got {:?}", [c, h, w], [c2, h2, w2]),
                );
            }
            batch += b;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            shape: vec![batch, c, h, w],
            data,
        })
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The primitive set understood by the tape.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Primitive {
    /// Inputs: image `(N,Cin,H,W)`, kernel `(Cout,Cin,KH,KW)` and an optional bias `(Cout)`.
    Conv2d { stride: usize, padding: usize },
    /// Non-overlapping square max-pool.
    MaxPool2d { window: usize },
    Relu,
    /// `min(max(x, 0), 1)`.
    ClampUnit,
    Sigmoid,
    Softplus,
    /// Softmax across the channel axis at every (batch, row, col).
    Softmax,
    GlobalAvgPool,
    UpsampleNearest { factor: usize },
    Add,
    Sub,
    Mul,
    AddScalar(f64),
    MulScalar(f64),
    /// `ln(max(x, floor))`; no gradient where the floor is active.
    Log { floor: f64 },
    SumAll,
    MeanAll,
    /// Sum across the channel axis, keeping it with extent 1.
    ChannelSum,
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Conv2d { .. } => "conv2d",
            Primitive::MaxPool2d { .. } => "max_pool2d",
            Primitive::Relu => "relu",
            Primitive::ClampUnit => "clamp_unit",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Softplus => "softplus",
            Primitive::Softmax => "softmax",
            Primitive::GlobalAvgPool => "global_avg_pool",
            Primitive::UpsampleNearest { .. } => "upsample_nearest",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::AddScalar(_) => "add_scalar",
            Primitive::MulScalar(_) => "mul_scalar",
            Primitive::Log { .. } => "log",
            Primitive::SumAll => "sum_all",
            Primitive::MeanAll => "mean_all",
            Primitive::ChannelSum => "channel_sum",
        }
    }
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Option<(Primitive, Vec<Var>)>,
    // argmax positions for max-pool
    saved: Vec<usize>,
}

/// Ordered record of primitive applications.
///
/// Every operand precedes its consumer, so reverse index order is a valid
/// topological order for the backward sweep. `backward` may be called more
/// than once; gradients accumulate until [`Tape::zero_grad`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

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

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Option<(Primitive, Vec<Var>)>, saved: Vec<usize>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
            saved,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, None, Vec::new())
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, None, Vec::new())
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of `v`, or `None` if no backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad.as_ref().map(|g| Tensor {
            shape: node.value.shape.clone(),
            data: g.clone(),
        })
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Applies `prim` to `inputs`, recording it when any input requires a gradient.
    pub fn apply(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var> {
        for v in inputs {
            if v.0 >= self.nodes.len() {
                return Err(TensorError::UnknownVar(v.0));
            }
        }
        let vals: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let (value, saved) = forward(prim, &vals)?;
        if let Some(index) = value.data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite {
                op: prim.name(),
                index,
            });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = requires_grad.then(|| (prim, inputs.to_vec()));
        Ok(self.push(value, requires_grad, op, saved))
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let prim = Primitive::Conv2d { stride, padding };
        match bias {
            Some(b) => self.apply(prim, &[x, kernel, b]),
            None => self.apply(prim, &[x, kernel]),
        }
    }

    pub fn max_pool2d(&mut self, x: Var, window: usize) -> Result<Var> {
        self.apply(Primitive::MaxPool2d { window }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[x])
    }

    pub fn clamp_unit(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::ClampUnit, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Sigmoid, &[x])
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Softplus, &[x])
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Softmax, &[x])
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::GlobalAvgPool, &[x])
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        self.apply(Primitive::UpsampleNearest { factor }, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.apply(Primitive::AddScalar(s), &[a])
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.apply(Primitive::MulScalar(s), &[a])
    }

    pub fn log(&mut self, a: Var, floor: f64) -> Result<Var> {
        self.apply(Primitive::Log { floor }, &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::SumAll, &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::MeanAll, &[a])
    }

    pub fn channel_sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::ChannelSum, &[a])
    }

    /// Propagates d`loss`/d(node) to every node that requires a gradient,
    /// adding into the stored accumulators.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(TensorError::UnknownVar(loss.0));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(TensorError::NotScalar(self.nodes[loss.0].value.shape.clone()));
        }
        let mut local: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        local[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = local[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Some((prim, inputs)) = &node.op {
                let in_vals: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                let in_grads = backward_prim(*prim, &in_vals, &node.value, &node.saved, &g);
                for (v, ig) in inputs.iter().zip(in_grads) {
                    let Some(ig) = ig else { continue };
                    if !self.nodes[v.0].requires_grad {
                        continue;
                    }
                    match &mut local[v.0] {
                        Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                        slot @ None => *slot = Some(ig),
                    }
                }
            }
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }
}

fn expect_arity(prim: Primitive, inputs: &[&Tensor], allowed: &[usize]) -> Result<()> {
    if allowed.contains(&inputs.len()) {
        Ok(())
    } else {
        shape_err(
            prim.name(),
            format!("expected {allowed:?} operands, got {}", inputs.len()),
        )
    }
}

fn same_shape(prim: Primitive, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape == b.shape {
        Ok(())
    } else {
        shape_err(
            prim.name(),
            format!("operands differ: {:?} vs {:?}", a.shape, b.shape),
        )
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor {
        shape: t.shape.clone(),
        data: t.data.iter().map(|&v| f(v)).collect(),
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

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Output spatial extent of a convolution or pooling window.
pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < kernel {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Result<Self> {
        let op = "conv2d";
        if x.shape.len() != 4 || k.shape.len() != 4 {
            return shape_err(op, format!("input {:?} and kernel {:?} must both be 4-D", x.shape, k.shape));
        }
        let [n, cin, h, w] = x.dims4();
        let [cout, kcin, kh, kw] = k.dims4();
        if kcin != cin {
            return shape_err(op, format!("input has {cin} channels but kernel expects {kcin}"));
        }
        if stride == 0 {
            return Err(TensorError::Attr { op, detail: "stride must be positive".into() });
        }
        let (Some(ho), Some(wo)) = (
            conv_output_extent(h, kh, stride, pad),
            conv_output_extent(w, kw, stride, pad),
        ) else {
            return shape_err(op, format!("kernel {kh}x{kw} larger than padded input {h}x{w} (padding {pad})"));
        };
        Ok(Self { n, cin, h, w, cout, kh, kw, stride, pad, ho, wo })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    fn im2col(&self, img: &[f64], cols: &mut [f64]) {
        let p = self.p();
        for c in 0..self.cin {
            let plane = &img[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let out_row = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            out_row.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, o) in out_row.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *o = if ix < 0 || ix >= self.w as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        let p = self.p();
        for c in 0..self.cin {
            let plane = &mut img[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `c (m×n) = a (m×k) · b (k×n) + beta · c`, all row-major unless strides say otherwise.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], rsa: isize, csa: isize, b: &[f64], rsb: isize, csb: isize, beta: f64, c: &mut [f64]) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides describe matrices that lie within the given slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn conv_forward(x: &Tensor, k: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
    let g = ConvGeom::new(x, k, stride, pad)?;
    if let Some(b) = bias {
        if b.numel() != g.cout {
            return shape_err("conv2d", format!("bias has {} values for {} output channels", b.numel(), g.cout));
        }
    }
    let (kk, p) = (g.k(), g.p());
    let mut out = vec![0.0; g.n * g.cout * p];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; kk * p] };
    for n in 0..g.n {
        let img = &x.data[n * g.cin * g.h * g.w..(n + 1) * g.cin * g.h * g.w];
        let cols_ref: &[f64] = if g.is_pointwise() {
            img
        } else {
            g.im2col(img, &mut cols);
            &cols
        };
        let dst = &mut out[n * g.cout * p..(n + 1) * g.cout * p];
        gemm(g.cout, kk, p, &k.data, kk as isize, 1, cols_ref, p as isize, 1, 0.0, dst);
        if let Some(b) = bias {
            for (co, row) in dst.chunks_mut(p).enumerate() {
                let bv = b.data[co];
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Tensor::new(&[g.n, g.cout, g.ho, g.wo], out).map_err(|_| TensorError::NonFinite { op: "conv2d", index: 0 })
}

fn conv_backward(x: &Tensor, k: &Tensor, has_bias: bool, stride: usize, pad: usize, gout: &[f64]) -> Vec<Option<Vec<f64>>> {
    let g = ConvGeom::new(x, k, stride, pad).expect("validated in forward");
    let (kk, p) = (g.k(), g.p());
    let mut dx = vec![0.0; x.numel()];
    let mut dk = vec![0.0; k.numel()];
    let mut db = vec![0.0; g.cout];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; kk * p] };
    let mut dcols = vec![0.0; kk * p];
    for n in 0..g.n {
        let img = &x.data[n * g.cin * g.h * g.w..(n + 1) * g.cin * g.h * g.w];
        let go = &gout[n * g.cout * p..(n + 1) * g.cout * p];
        let cols_ref: &[f64] = if g.is_pointwise() {
            img
        } else {
            g.im2col(img, &mut cols);
            &cols
        };
        // dK += dOut · colsᵀ
        gemm(g.cout, p, kk, go, p as isize, 1, cols_ref, 1, p as isize, 1.0, &mut dk);
        // dcols = Kᵀ · dOut
        gemm(kk, g.cout, p, &k.data, 1, kk as isize, go, p as isize, 1, 0.0, &mut dcols);
        let dimg = &mut dx[n * g.cin * g.h * g.w..(n + 1) * g.cin * g.h * g.w];
        if g.is_pointwise() {
            dimg.iter_mut().zip(&dcols).for_each(|(a, b)| *a += b);
        } else {
            g.col2im(&dcols, dimg);
        }
        if has_bias {
            for (co, row) in go.chunks(p).enumerate() {
                db[co] += row.iter().sum::<f64>();
            }
        }
    }
    let mut res = vec![Some(dx), Some(dk)];
    if has_bias {
        res.push(Some(db));
    }
    res
}

fn forward(prim: Primitive, inputs: &[&Tensor]) -> Result<(Tensor, Vec<usize>)> {
    let op = prim.name();
    let unary = |inputs: &[&Tensor]| -> Result<()> { expect_arity(prim, inputs, &[1]) };
    let out = match prim {
        Primitive::Conv2d { stride, padding } => {
            expect_arity(prim, inputs, &[2, 3])?;
            conv_forward(inputs[0], inputs[1], inputs.get(2).copied(), stride, padding)?
        }
        Primitive::MaxPool2d { window } => {
            unary(inputs)?;
            let x = inputs[0];
            if window == 0 {
                return Err(TensorError::Attr { op, detail: "window must be positive".into() });
            }
            if x.shape.len() != 4 {
                return shape_err(op, format!("input {:?} must be 4-D", x.shape));
            }
            let [n, c, h, w] = x.dims4();
            if h < window || w < window {
                return shape_err(op, format!("spatial extent {h}x{w} smaller than window {window}"));
            }
            let (ho, wo) = (h / window, w / window);
            let mut out = Vec::with_capacity(n * c * ho * wo);
            let mut idx = Vec::with_capacity(n * c * ho * wo);
            for plane in 0..n * c {
                let base = plane * h * w;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut best = base + oy * window * w + ox * window;
                        for dy in 0..window {
                            for dx in 0..window {
                                let i = base + (oy * window + dy) * w + ox * window + dx;
                                if x.data[i] > x.data[best] {
                                    best = i;
                                }
                            }
                        }
                        out.push(x.data[best]);
                        idx.push(best);
                    }
                }
            }
            return Ok((Tensor { shape: vec![n, c, ho, wo], data: out }, idx));
        }
        Primitive::Relu => {
            unary(inputs)?;
            map(inputs[0], |v| v.max(0.0))
        }
        Primitive::ClampUnit => {
            unary(inputs)?;
            map(inputs[0], |v| v.clamp(0.0, 1.0))
        }
        Primitive::Sigmoid => {
            unary(inputs)?;
            map(inputs[0], sigmoid)
        }
        Primitive::Softplus => {
            unary(inputs)?;
            map(inputs[0], softplus)
        }
        Primitive::Softmax => {
            unary(inputs)?;
            let x = inputs[0];
            let [n, c, h, w] = x.dims4();
            let hw = h * w;
            let mut out = vec![0.0; x.numel()];
            for b in 0..n {
                for s in 0..hw {
                    let at = |ch: usize| b * c * hw + ch * hw + s;
                    let max = (0..c).map(|ch| x.data[at(ch)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for ch in 0..c {
                        let e = (x.data[at(ch)] - max).exp();
                        out[at(ch)] = e;
                        total += e;
                    }
                    for ch in 0..c {
                        out[at(ch)] /= total;
                    }
                }
            }
            Tensor { shape: x.shape.clone(), data: out }
        }
        Primitive::GlobalAvgPool => {
            unary(inputs)?;
            let x = inputs[0];
            if x.shape.len() != 4 {
                return shape_err(op, format!("input {:?} must be 4-D", x.shape));
            }
            let [n, c, h, w] = x.dims4();
            let hw = (h * w) as f64;
            let data = x.data.chunks(h * w).map(|p| p.iter().sum::<f64>() / hw).collect();
            Tensor { shape: vec![n, c, 1, 1], data }
        }
        Primitive::UpsampleNearest { factor } => {
            unary(inputs)?;
            let x = inputs[0];
            if factor == 0 {
                return Err(TensorError::Attr { op, detail: "factor must be positive".into() });
            }
            if x.shape.len() != 4 {
                return shape_err(op, format!("input {:?} must be 4-D", x.shape));
            }
            let [n, c, h, w] = x.dims4();
            let (ho, wo) = (h * factor, w * factor);
            let mut data = Vec::with_capacity(n * c * ho * wo);
            for plane in x.data.chunks(h * w) {
                for oy in 0..ho {
                    let row = &plane[(oy / factor) * w..(oy / factor + 1) * w];
                    for ox in 0..wo {
                        data.push(row[ox / factor]);
                    }
                }
            }
            Tensor { shape: vec![n, c, ho, wo], data }
        }
        Primitive::Add | Primitive::Sub | Primitive::Mul => {
            expect_arity(prim, inputs, &[2])?;
            let (a, b) = (inputs[0], inputs[1]);
            same_shape(prim, a, b)?;
            let f = match prim {
                Primitive::Add => |x: f64, y: f64| x + y,
                Primitive::Sub => |x: f64, y: f64| x - y,
                _ => |x: f64, y: f64| x * y,
            };
            Tensor {
                shape: a.shape.clone(),
                data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
            }
        }
        Primitive::AddScalar(s) => {
            unary(inputs)?;
            map(inputs[0], |v| v + s)
        }
        Primitive::MulScalar(s) => {
            unary(inputs)?;
            map(inputs[0], |v| v * s)
        }
        Primitive::Log { floor } => {
            unary(inputs)?;
            if !(floor > 0.0) || !floor.is_finite() {
                return Err(TensorError::Attr { op, detail: format!("floor must be positive, got {floor}") });
            }
            map(inputs[0], |v| v.max(floor).ln())
        }
        Primitive::SumAll => {
            unary(inputs)?;
            Tensor::scalar(inputs[0].data.iter().sum())
        }
        Primitive::MeanAll => {
            unary(inputs)?;
            let x = inputs[0];
            Tensor::scalar(x.data.iter().sum::<f64>() / x.numel() as f64)
        }
        Primitive::ChannelSum => {
            unary(inputs)?;
            let x = inputs[0];
            let [n, c, h, w] = x.dims4();
            let hw = h * w;
            let mut data = vec![0.0; n * hw];
            for b in 0..n {
                for ch in 0..c {
                    let src = &x.data[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                    data[b * hw..(b + 1) * hw].iter_mut().zip(src).for_each(|(d, s)| *d += s);
                }
            }
            Tensor { shape: vec![n, 1, h, w], data }
        }
    };
    Ok((out, Vec::new()))
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// Vector-Jacobian products: gradient for each operand given the output gradient `g`.
fn backward_prim(prim: Primitive, inputs: &[&Tensor], out: &Tensor, saved: &[usize], g: &[f64]) -> Vec<Option<Vec<f64>>> {
    match prim {
        Primitive::Conv2d { stride, padding } => conv_backward(inputs[0], inputs[1], inputs.len() == 3, stride, padding, g),
        Primitive::MaxPool2d { .. } => {
            let mut dx = vec![0.0; inputs[0].numel()];
            for (&i, &gv) in saved.iter().zip(g) {
                dx[i] += gv;
            }
            vec![Some(dx)]
        }
        Primitive::Relu => vec![Some(zip_map(&inputs[0].data, g, |x, g| if x > 0.0 { g } else { 0.0 }))],
        Primitive::ClampUnit => vec![Some(zip_map(&inputs[0].data, g, |x, g| if x > 0.0 && x < 1.0 { g } else { 0.0 }))],
        Primitive::Sigmoid => vec![Some(zip_map(&out.data, g, |y, g| g * y * (1.0 - y)))],
        Primitive::Softplus => vec![Some(zip_map(&inputs[0].data, g, |x, g| g * sigmoid(x)))],
        Primitive::Softmax => {
            let [n, c, h, w] = out.dims4();
            let hw = h * w;
            let mut dx = vec![0.0; out.numel()];
            for b in 0..n {
                for s in 0..hw {
                    let at = |ch: usize| b * c * hw + ch * hw + s;
                    let dot: f64 = (0..c).map(|ch| out.data[at(ch)] * g[at(ch)]).sum();
                    for ch in 0..c {
                        dx[at(ch)] = out.data[at(ch)] * (g[at(ch)] - dot);
                    }
                }
            }
            vec![Some(dx)]
        }
        Primitive::GlobalAvgPool => {
            let [_, _, h, w] = inputs[0].dims4();
            let hw = h * w;
            let mut dx = vec![0.0; inputs[0].numel()];
            for (plane, &gv) in dx.chunks_mut(hw).zip(g) {
                plane.fill(gv / hw as f64);
            }
            vec![Some(dx)]
        }
        Primitive::UpsampleNearest { factor } => {
            let [_, _, h, w] = inputs[0].dims4();
            let wo = w * factor;
            let mut dx = vec![0.0; inputs[0].numel()];
            for (plane, gp) in dx.chunks_mut(h * w).zip(g.chunks(h * w * factor * factor)) {
                for (oy, grow) in gp.chunks(wo).enumerate() {
                    let row = &mut plane[(oy / factor) * w..(oy / factor + 1) * w];
                    for (ox, &gv) in grow.iter().enumerate() {
                        row[ox / factor] += gv;
                    }
                }
            }
            vec![Some(dx)]
        }
        Primitive::Add => vec![Some(g.to_vec()), Some(g.to_vec())],
        Primitive::Sub => vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())],
        Primitive::Mul => vec![
            Some(zip_map(g, &inputs[1].data, |g, b| g * b)),
            Some(zip_map(g, &inputs[0].data, |g, a| g * a)),
        ],
        Primitive::AddScalar(_) => vec![Some(g.to_vec())],
        Primitive::MulScalar(s) => vec![Some(g.iter().map(|v| v * s).collect())],
        Primitive::Log { floor } => vec![Some(zip_map(&inputs[0].data, g, |x, g| if x > floor { g / x } else { 0.0 }))],
        Primitive::SumAll => vec![Some(vec![g[0]; inputs[0].numel()])],
        Primitive::MeanAll => {
            let n = inputs[0].numel();
            vec![Some(vec![g[0] / n as f64; n])]
        }
        Primitive::ChannelSum => {
            let [n, c, h, w] = inputs[0].dims4();
            let hw = h * w;
            let mut dx = vec![0.0; inputs[0].numel()];
            for b in 0..n {
                for ch in 0..c {
                    dx[(b * c + ch) * hw..(b * c + ch + 1) * hw].copy_from_slice(&g[b * hw..(b + 1) * hw]);
                }
            }
            vec![Some(dx)]
        }
    }
}

/// Compares the tape gradient of a scalar function against central differences.
///
/// Returns the largest `|analytic - numeric| / max(1, |analytic|, |numeric|)`
/// over all coordinates of `point`.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..point.numel()).collect();
    grad_check_coords(&f, point, step, &coords)
}

/// [`grad_check`] restricted to the listed flat coordinates.
pub fn grad_check_coords<F>(f: &F, point: &Tensor, step: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(TensorError::Attr { op: "grad_check", detail: format!("step must be positive, got {step}") });
    }
    let mut tape = Tape::new();
    let x = tape.param(point.clone());
    let y = f(&mut tape, x)?;
    tape.backward(y)?;
    let analytic = tape.grad(x).unwrap_or_else(|| Tensor::zeros(point.shape()));
    let eval = |p: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(p);
        let out = f(&mut t, v)?;
        let val = t.value(out);
        if !val.is_scalar() {
            return Err(TensorError::NotScalar(val.shape.clone()));
        }
        Ok(val.data[0])
    };
    let mut worst: f64 = 0.0;
    for &i in coords {
        let mut plus = point.clone();
        plus.data[i] += step;
        let mut minus = point.clone();
        minus.data[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        if !numeric.is_finite() {
            return Err(TensorError::NonFinite { op: "grad_check", index: i });
        }
        let a = analytic.data[i];
        worst = worst.max((a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs()));
    }
    Ok(worst)
}
