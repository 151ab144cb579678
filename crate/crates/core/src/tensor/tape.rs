use std::fmt;
use std::rc::Rc;

use super::{numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    AddBias,
    MatMul,
    Transpose,
    Relu,
    SoftmaxRows,
    LayerNorm,
    Conv2d,
    Upsample2x,
    Gather,
    Reshape,
    SliceCols,
    ConcatCols,
    Stack,
    Sum,
    Mean,
    ColMean,
    ColStd,
    Mse,
    Softplus,
}

impl OpKind {
    pub const ALL: [OpKind; 24] = [
        OpKind::Leaf,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::AddBias,
        OpKind::MatMul,
        OpKind::Transpose,
        OpKind::Relu,
        OpKind::SoftmaxRows,
        OpKind::LayerNorm,
        OpKind::Conv2d,
        OpKind::Upsample2x,
        OpKind::Gather,
        OpKind::Reshape,
        OpKind::SliceCols,
        OpKind::ConcatCols,
        OpKind::Stack,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::ColMean,
        OpKind::ColStd,
        OpKind::Mse,
        OpKind::Softplus,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::AddBias => "add_bias",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Relu => "relu",
            OpKind::SoftmaxRows => "softmax_rows",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Conv2d => "conv2d",
            OpKind::Upsample2x => "upsample_nearest_2x",
            OpKind::Gather => "gather",
            OpKind::Reshape => "reshape",
            OpKind::SliceCols => "slice_cols",
            OpKind::ConcatCols => "concat_cols",
            OpKind::Stack => "stack",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::ColMean => "col_mean",
            OpKind::ColStd => "col_std",
            OpKind::Mse => "mse",
            OpKind::Softplus => "softplus",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Border rule for convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Zero,
    /// Mirror about the edge pixel without repeating it.
    Reflect,
}

/// Storage precision of forward values.
///
/// `Single` rounds every recorded value to the nearest `f32`; arithmetic
/// itself stays in `f64`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    #[default]
    Double,
    Single,
}

/// Mirror an out-of-range coordinate back into `0..n`.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv2d {
        x: Var,
        kernel: Var,
        stride: usize,
        padding: Padding,
    },
    Upsample2x(Var),
    Gather {
        x: Var,
        index: Rc<[usize]>,
    },
    Reshape(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Stack(Vec<Var>),
    Sum(Var),
    Mean(Var),
    ColMean(Var),
    ColStd(Var),
    Mse(Var, Var),
    Softplus(Var),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddBias(..) => OpKind::AddBias,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Relu(..) => OpKind::Relu,
            Op::SoftmaxRows(..) => OpKind::SoftmaxRows,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Upsample2x(..) => OpKind::Upsample2x,
            Op::Gather { .. } => OpKind::Gather,
            Op::Reshape(..) => OpKind::Reshape,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::Stack(..) => OpKind::Stack,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::ColMean(..) => OpKind::ColMean,
            Op::ColStd(..) => OpKind::ColStd,
            Op::Mse(..) => OpKind::Mse,
            Op::Softplus(..) => OpKind::Softplus,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::Mse(a, b) => {
                vec![*a, *b]
            }
            Op::AddBias(x, b) => vec![*x, *b],
            Op::Scale(x, _)
            | Op::Transpose(x)
            | Op::Relu(x)
            | Op::SoftmaxRows(x)
            | Op::Upsample2x(x)
            | Op::Reshape(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::ColMean(x)
            | Op::Softplus(x) => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Conv2d { x, kernel, .. } => vec![*x, *kernel],
            Op::Gather { x, .. } | Op::SliceCols { x, .. } | Op::ColStd(x) => vec![*x],
            Op::ConcatCols(vs) | Op::Stack(vs) => vs.clone(),
        }
    }
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Record of executed operations, in execution order.
///
/// Every operation appends one node after its inputs, so insertion order is
/// a topological order and the backward sweep is a single reverse scan.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
    fault: Option<OpKind>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    slots: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does not
    /// influence the loss (or does not require gradients).
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.slots.get(v.0).and_then(|s| s.as_deref())
    }
}

/// Matrix view `[rows, last-axis]` of a shape.
fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.split_last() {
        Some((&c, rest)) => (numel(rest), c),
        None => (1, 1),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_precision(precision: Precision) -> Self {
        Tape {
            precision,
            ..Self::default()
        }
    }

    /// Test hook: the adjoint of every `kind` node is deliberately scaled
    /// wrong during backward, so gradient checks must flag it.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn item(&self, v: Var) -> Result<f64> {
        match self.value(v) {
            [x] => Ok(*x),
            _ => Err(Error::Contract(format!(
                "item() on value of shape {:?}",
                self.shape(v)
            ))),
        }
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("tape node is well formed")
    }

    /// First node (in execution order) holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<(Var, OpKind)> {
        self.nodes
            .iter()
            .position(|n| n.data.iter().any(|v| !v.is_finite()))
            .map(|i| (Var(i), self.nodes[i].op.kind()))
    }

    /// Record a tensor as an input; it is differentiated iff the tensor's
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push_leaf(t.shape().to_vec(), t.data().to_vec(), t.requires_grad())
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push_leaf(t.shape().to_vec(), t.data().to_vec(), false)
    }

    pub fn variable(&mut self, t: &Tensor) -> Var {
        self.push_leaf(t.shape().to_vec(), t.data().to_vec(), true)
    }

    fn push_leaf(&mut self, shape: Vec<usize>, mut data: Vec<f64>, requires_grad: bool) -> Var {
        self.round(&mut data);
        self.nodes.push(Node {
            shape,
            data,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn round(&self, data: &mut [f64]) {
        if self.precision == Precision::Single {
            for v in data {
                *v = *v as f32 as f64;
            }
        }
    }

    fn push(&mut self, shape: Vec<usize>, mut data: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.round(&mut data);
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> (Vec<usize>, Vec<f64>) {
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        (self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (shape, data) = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(shape, data, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let (shape, data) = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(shape, data, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (shape, data) = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(shape, data, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let data = self.value(x).iter().map(|v| v * c).collect();
        self.push(self.shape(x).to_vec(), data, Op::Scale(x, c))
    }

    /// `x[.., j] + b[j]`: broadcast a vector over every row of the last axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, cols) = rows_cols(self.shape(x));
        if self.shape(b) != [cols] {
            return Err(Error::dim("add_bias", self.shape(x), self.shape(b)));
        }
        let bias = self.value(b);
        let data = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + bias[i % cols])
            .collect();
        Ok(self.push(self.shape(x).to_vec(), data, Op::AddBias(x, b)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                for (o, w) in row.iter_mut().zip(&bv[p * n..(p + 1) * n]) {
                    *o += x * w;
                }
            }
        }
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::dim("transpose", s, &[]));
        }
        let (m, n) = (s[0], s[1]);
        let xv = self.value(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = xv[i * n + j];
            }
        }
        Ok(self.push(vec![n, m], out, Op::Transpose(x)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        self.push(self.shape(x).to_vec(), data, Op::Relu(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let data = self.value(x).iter().map(|&v| softplus(v)).collect();
        self.push(self.shape(x).to_vec(), data, Op::Softplus(x))
    }

    /// Row-wise softmax of a matrix (max-shifted).
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::dim("softmax_rows", s, &[]));
        }
        let n = s[1];
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(n) {
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
        Ok(self.push(self.shape(x).to_vec(), out, Op::SoftmaxRows(x)))
    }

    /// Normalize over the last axis, then apply per-feature gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (rows, d) = rows_cols(self.shape(x));
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gain)));
        }
        let (xv, g, b) = (self.value(x), self.value(gain), self.value(bias));
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Cross-correlation of `x: [H, W, Cin]` with `kernel: [k, k, Cin, Cout]`
    /// at the given stride, padded by `k / 2` so stride 1 preserves size.
    /// Output extents are `ceil(H / stride) × ceil(W / stride)`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, padding: Padding) -> Result<Var> {
        let (sx, sk) = (self.shape(x), self.shape(kernel));
        if sx.len() != 3 || sk.len() != 4 || sk[0] != sk[1] || sk[2] != sx[2] {
            return Err(Error::dim("conv2d", sx, sk));
        }
        let k = sk[0];
        if k % 2 == 0 {
            return Err(Error::Config(format!(
                "conv2d kernel size must be odd, got {k}"
            )));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        let geo = ConvGeometry::new(sx, sk, stride, padding);
        let (xv, kv) = (self.value(x), self.value(kernel));
        let mut out = vec![0.0; geo.ho * geo.wo * geo.cout];
        geo.for_each_tap(|o, i, kbase| {
            let orow = &mut out[o..o + geo.cout];
            for ci in 0..geo.cin {
                let xval = xv[i + ci];
                let krow = &kv[kbase + ci * geo.cout..kbase + (ci + 1) * geo.cout];
                for (acc, w) in orow.iter_mut().zip(krow) {
                    *acc += xval * w;
                }
            }
        });
        Ok(self.push(
            vec![geo.ho, geo.wo, geo.cout],
            out,
            Op::Conv2d {
                x,
                kernel,
                stride,
                padding,
            },
        ))
    }

    /// Nearest-neighbour 2× upsampling of `[H, W, C]`.
    pub fn upsample_nearest_2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 {
            return Err(Error::dim("upsample_nearest_2x", s, &[]));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let xv = self.value(x);
        let mut out = vec![0.0; 4 * h * w * c];
        for y in 0..2 * h {
            for xx in 0..2 * w {
                let src = ((y / 2) * w + xx / 2) * c;
                let dst = (y * 2 * w + xx) * c;
                out[dst..dst + c].copy_from_slice(&xv[src..src + c]);
            }
        }
        Ok(self.push(vec![2 * h, 2 * w, c], out, Op::Upsample2x(x)))
    }

    /// `out.flat[i] = x.flat[index[i]]`.
    pub fn gather(&mut self, x: Var, index: Rc<[usize]>, shape: &[usize]) -> Result<Var> {
        let n = self.value(x).len();
        if numel(shape) != index.len() {
            return Err(Error::dim("gather", shape, &[index.len()]));
        }
        if let Some(bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::Contract(format!(
                "gather index {bad} out of range for {n} elements"
            )));
        }
        let xv = self.value(x);
        let data = index.iter().map(|&i| xv[i]).collect();
        Ok(self.push(shape.to_vec(), data, Op::Gather { x, index }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() {
            return Err(Error::dim("reshape", self.shape(x), shape));
        }
        let data = self.value(x).to_vec();
        Ok(self.push(shape.to_vec(), data, Op::Reshape(x)))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || start >= end || end > s[1] {
            return Err(Error::dim("slice_cols", s, &[start, end]));
        }
        let (m, n) = (s[0], s[1]);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(m * (end - start));
        for i in 0..m {
            out.extend_from_slice(&xv[i * n + start..i * n + end]);
        }
        Ok(self.push(vec![m, end - start], out, Op::SliceCols { x, start }))
    }

    /// Concatenate matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let m = self.shape(first)[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != m {
                return Err(Error::dim("concat_cols", self.shape(first), s));
            }
            widths.push(s[1]);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(vec![m, n], out, Op::ConcatCols(parts.to_vec())))
    }

    /// Stack equally shaped values along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("stack of nothing".into()))?;
        let inner = self.shape(first).to_vec();
        let mut out = Vec::with_capacity(parts.len() * numel(&inner));
        for &p in parts {
            if self.shape(p) != inner.as_slice() {
                return Err(Error::dim("stack", &inner, self.shape(p)));
            }
            out.extend_from_slice(self.value(p));
        }
        let mut shape = vec![parts.len()];
        shape.extend(inner);
        Ok(self.push(shape, out, Op::Stack(parts.to_vec())))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(Vec::new(), vec![s], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        self.push(Vec::new(), vec![m], Op::Mean(x))
    }

    /// Per-channel mean over all leading axes: `[.., C] -> [C]`.
    pub fn col_mean(&mut self, x: Var) -> Var {
        let (rows, c) = rows_cols(self.shape(x));
        let out = column_means(self.value(x), rows, c);
        self.push(vec![c], out, Op::ColMean(x))
    }

    /// Per-channel `sqrt(population variance + eps)` over all leading axes.
    pub fn col_std(&mut self, x: Var, eps: f64) -> Var {
        let (rows, c) = rows_cols(self.shape(x));
        let xv = self.value(x);
        let mu = column_means(xv, rows, c);
        let mut var = vec![0.0; c];
        for r in 0..rows {
            for j in 0..c {
                var[j] += (xv[r * c + j] - mu[j]).powi(2);
            }
        }
        let out = var.iter().map(|v| (v / rows as f64 + eps).sqrt()).collect();
        self.push(vec![c], out, Op::ColStd(x))
    }

    /// Mean of squared element differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let total: f64 = av.iter().zip(bv).map(|(x, y)| (x - y).powi(2)).sum();
        let v = total / av.len() as f64;
        Ok(self.push(Vec::new(), vec![v], Op::Mse(a, b)))
    }

    /// Σ x ⊙ w for a constant weight tensor `w`.
    pub fn weighted_sum(&mut self, x: Var, w: &Tensor) -> Result<Var> {
        let c = self.constant(w);
        let shape = self.shape(x).to_vec();
        let c = self.reshape(c, &shape)?;
        let prod = self.mul(x, c)?;
        Ok(self.sum(prod))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut slots: Vec<Option<Vec<f64>>> = Vec::new();
        slots.resize_with(loss.0 + 1, || None);
        slots[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(mut g) = slots[i].take() else {
                continue;
            };
            if self.fault == Some(node.op.kind()) {
                for v in &mut g {
                    *v *= 1.5;
                }
            }
            self.propagate(node, &g, &mut slots[..i]);
            slots[i] = Some(g);
        }
        Ok(Gradients { slots })
    }

    fn propagate(&self, node: &Node, g: &[f64], slots: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let n = &self.nodes[v.0];
            if !n.requires_grad {
                return;
            }
            let slot = slots[v.0].get_or_insert_with(|| vec![0.0; n.data.len()]);
            f(slot);
        };
        let out = &node.data;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(v, &mut |ga| add_into(ga, g));
                }
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| {
                    for (d, u) in gb.iter_mut().zip(g) {
                        *d -= u;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |ga| {
                    for ((d, u), y) in ga.iter_mut().zip(g).zip(bv) {
                        *d += u * y;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((d, u), x) in gb.iter_mut().zip(g).zip(av) {
                        *d += u * x;
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |gx| {
                for (d, u) in gx.iter_mut().zip(g) {
                    *d += c * u;
                }
            }),
            Op::AddBias(x, b) => {
                acc(*x, &mut |gx| add_into(gx, g));
                let cols = self.value(*b).len();
                acc(*b, &mut |gb| {
                    for row in g.chunks(cols) {
                        add_into(gb, row);
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |ga| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            ga[i * k + p] += grow.iter().zip(brow).map(|(u, w)| u * w).sum::<f64>();
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let x = av[i * k + p];
                            for (d, u) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += x * u;
                            }
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let s = self.shape(*x);
                let (m, n) = (s[0], s[1]);
                acc(*x, &mut |gx| {
                    for i in 0..m {
                        for j in 0..n {
                            gx[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Relu(x) => acc(*x, &mut |gx| {
                for ((d, u), y) in gx.iter_mut().zip(g).zip(out) {
                    if *y > 0.0 {
                        *d += u;
                    }
                }
            }),
            Op::Softplus(x) => {
                let xv = self.value(*x);
                acc(*x, &mut |gx| {
                    for ((d, u), v) in gx.iter_mut().zip(g).zip(xv) {
                        *d += u * sigmoid(*v);
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let n = node.shape[1];
                acc(*x, &mut |gx| {
                    for ((dr, ur), yr) in gx.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                        let dot: f64 = ur.iter().zip(yr).map(|(u, y)| u * y).sum();
                        for ((d, u), y) in dr.iter_mut().zip(ur).zip(yr) {
                            *d += y * (u - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = self.value(*gain).len();
                let gv = self.value(*gain);
                acc(*gain, &mut |gg| {
                    for (ur, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += ur[j] * hr[j];
                        }
                    }
                });
                acc(*bias, &mut |gb| {
                    for ur in g.chunks(d) {
                        add_into(gb, ur);
                    }
                });
                acc(*x, &mut |gx| {
                    for (r, ((dr, ur), hr)) in gx
                        .chunks_mut(d)
                        .zip(g.chunks(d))
                        .zip(xhat.chunks(d))
                        .enumerate()
                    {
                        let dh: Vec<f64> = ur.iter().zip(gv).map(|(u, w)| u * w).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                        let scale = inv_std[r] / d as f64;
                        for j in 0..d {
                            dr[j] += scale * (d as f64 * dh[j] - sum_dh - hr[j] * sum_dh_h);
                        }
                    }
                });
            }
            Op::Conv2d {
                x,
                kernel,
                stride,
                padding,
            } => {
                let geo = ConvGeometry::new(self.shape(*x), self.shape(*kernel), *stride, *padding);
                let (xv, kv) = (self.value(*x), self.value(*kernel));
                acc(*x, &mut |gx| {
                    geo.for_each_tap(|o, i, kbase| {
                        let grow = &g[o..o + geo.cout];
                        for ci in 0..geo.cin {
                            let krow = &kv[kbase + ci * geo.cout..kbase + (ci + 1) * geo.cout];
                            gx[i + ci] += grow.iter().zip(krow).map(|(u, w)| u * w).sum::<f64>();
                        }
                    })
                });
                acc(*kernel, &mut |gk| {
                    geo.for_each_tap(|o, i, kbase| {
                        let grow = &g[o..o + geo.cout];
                        for ci in 0..geo.cin {
                            let xval = xv[i + ci];
                            let krow = &mut gk[kbase + ci * geo.cout..kbase + (ci + 1) * geo.cout];
                            for (d, u) in krow.iter_mut().zip(grow) {
                                *d += xval * u;
                            }
                        }
                    })
                });
            }
            Op::Upsample2x(x) => {
                let s = self.shape(*x);
                let (w, c) = (s[1], s[2]);
                let (ho, wo) = (node.shape[0], node.shape[1]);
                acc(*x, &mut |gx| {
                    for y in 0..ho {
                        for xx in 0..wo {
                            let src = ((y / 2) * w + xx / 2) * c;
                            let dst = (y * wo + xx) * c;
                            add_into(&mut gx[src..src + c], &g[dst..dst + c]);
                        }
                    }
                });
            }
            Op::Gather { x, index } => acc(*x, &mut |gx| {
                for (&i, u) in index.iter().zip(g) {
                    gx[i] += u;
                }
            }),
            Op::Reshape(x) => acc(*x, &mut |gx| add_into(gx, g)),
            Op::SliceCols { x, start } => {
                let n = self.shape(*x)[1];
                let w = node.shape[1];
                acc(*x, &mut |gx| {
                    for (i, ur) in g.chunks(w).enumerate() {
                        add_into(&mut gx[i * n + start..i * n + start + w], ur);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let n = node.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    acc(p, &mut |gp| {
                        for (i, dr) in gp.chunks_mut(w).enumerate() {
                            add_into(dr, &g[i * n + offset..i * n + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::Stack(parts) => {
                let inner = numel(&node.shape[1..]);
                for (j, &p) in parts.iter().enumerate() {
                    acc(p, &mut |gp| add_into(gp, &g[j * inner..(j + 1) * inner]));
                }
            }
            Op::Sum(x) => acc(*x, &mut |gx| {
                for d in gx.iter_mut() {
                    *d += g[0];
                }
            }),
            Op::Mean(x) => acc(*x, &mut |gx| {
                let u = g[0] / gx.len() as f64;
                for d in gx.iter_mut() {
                    *d += u;
                }
            }),
            Op::ColMean(x) => {
                let c = node.shape[0];
                acc(*x, &mut |gx| {
                    let rows = gx.len() / c;
                    for dr in gx.chunks_mut(c) {
                        for (d, u) in dr.iter_mut().zip(g) {
                            *d += u / rows as f64;
                        }
                    }
                });
            }
            Op::ColStd(x) => {
                let c = node.shape[0];
                let xv = self.value(*x);
                let rows = xv.len() / c;
                let mu = column_means(xv, rows, c);
                acc(*x, &mut |gx| {
                    for (dr, xr) in gx.chunks_mut(c).zip(xv.chunks(c)) {
                        for j in 0..c {
                            dr[j] += g[j] * (xr[j] - mu[j]) / (rows as f64 * out[j]);
                        }
                    }
                });
            }
            Op::Mse(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let s = 2.0 * g[0] / av.len() as f64;
                acc(*a, &mut |ga| {
                    for ((d, x), y) in ga.iter_mut().zip(av).zip(bv) {
                        *d += s * (x - y);
                    }
                });
                acc(*b, &mut |gb| {
                    for ((d, x), y) in gb.iter_mut().zip(av).zip(bv) {
                        *d -= s * (x - y);
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn column_means(xv: &[f64], rows: usize, c: usize) -> Vec<f64> {
    let mut mu = vec![0.0; c];
    for r in xv.chunks(c) {
        add_into(&mut mu, r);
    }
    for m in &mut mu {
        *m /= rows as f64;
    }
    mu
}

struct ConvGeometry {
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    padding: Padding,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    fn new(sx: &[usize], sk: &[usize], stride: usize, padding: Padding) -> Self {
        let (h, w, cin) = (sx[0], sx[1], sx[2]);
        ConvGeometry {
            h,
            w,
            cin,
            cout: sk[3],
            k: sk[0],
            stride,
            padding,
            ho: h.div_ceil(stride),
            wo: w.div_ceil(stride),
        }
    }

    fn resolve(&self, i: isize, n: usize) -> Option<usize> {
        if (0..n as isize).contains(&i) {
            return Some(i as usize);
        }
        match self.padding {
            Padding::Zero => None,
            Padding::Reflect => Some(reflect_index(i, n)),
        }
    }

    /// Visit every (output offset, input offset, kernel offset) triple that
    /// contributes to the output, in a fixed order.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let pad = (self.k / 2) as isize;
        let rows: Vec<Vec<Option<usize>>> = (0..self.ho)
            .map(|oy| {
                (0..self.k)
                    .map(|ky| self.resolve((oy * self.stride) as isize + ky as isize - pad, self.h))
                    .collect()
            })
            .collect();
        let cols: Vec<Vec<Option<usize>>> = (0..self.wo)
            .map(|ox| {
                (0..self.k)
                    .map(|kx| self.resolve((ox * self.stride) as isize + kx as isize - pad, self.w))
                    .collect()
            })
            .collect();
        for (oy, row_taps) in rows.iter().enumerate() {
            for (ox, col_taps) in cols.iter().enumerate() {
                let o = (oy * self.wo + ox) * self.cout;
                for (ky, iy) in row_taps.iter().enumerate() {
                    let Some(iy) = iy else { continue };
                    for (kx, ix) in col_taps.iter().enumerate() {
                        let Some(ix) = ix else { continue };
                        let i = (iy * self.w + ix) * self.cin;
                        let kbase = (ky * self.k + kx) * self.cin * self.cout;
                        f(o, i, kbase);
                    }
                }
            }
        }
    }
}
