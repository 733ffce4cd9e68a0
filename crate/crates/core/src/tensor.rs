//! Dense 2-D tensors with a reverse-mode tape.
//!
//! Every quantity in the model is a row-major `f64` matrix; vectors are `1 × n`
//! rows and scalars are `1 × 1`. A [`Graph`] records primitive applications in
//! execution order and [`Graph::backward`] replays them once, newest first.
//!
//! Binary element-wise ops broadcast their right operand when it is a full
//! match, a `1 × cols` row, a `rows × 1` column, or a `1 × 1` scalar. Nothing
//! else broadcasts.

use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: [usize; 2],
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::contract(
                "tensor",
                format!("extents must be positive, got {rows}x{cols}"),
            ));
        }
        if data.len() != rows * cols {
            return Err(Error::contract(
                "tensor",
                format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            ));
        }
        Ok(Tensor {
            shape: [rows, cols],
            data,
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::full(rows, cols, 0.0)
    }

    pub fn full(rows: usize, cols: usize, value: f64) -> Self {
        Tensor {
            shape: [rows, cols],
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(1, 1, value)
    }

    pub fn row(values: Vec<f64>) -> Self {
        Tensor {
            shape: [1, values.len()],
            data: values,
        }
    }

    pub fn column(values: Vec<f64>) -> Self {
        Tensor {
            shape: [values.len(), 1],
            data: values,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(rows.len(), cols, data)
    }

    #[inline]
    pub fn shape(&self) -> [usize; 2] {
        self.shape
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.shape[1];
        self.data[r * cols + c] = v;
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    /// The single value of a `1 × 1` tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn transpose(&self) -> Tensor {
        let [r, c] = self.shape;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: [c, r],
            data: out,
        }
    }

    /// Plain matrix product; panics on mismatched inner extents.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let [m, k] = self.shape;
        let [k2, n] = other.shape;
        assert_eq!(k, k2, "matmul inner extents");
        let mut out = vec![0.0; m * n];
        matmul_into(&self.data, &other.data, &mut out, m, k, n);
        Tensor {
            shape: [m, n],
            data: out,
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

// out[m×n] += a[m×k] · b[k×n]
fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

// out[m×n] += a[m×k] · b[n×k]ᵀ
fn matmul_bt_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let dot: f64 = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            out[i * n + j] += dot;
        }
    }
}

// out[k×n] += a[m×k]ᵀ · b[m×n]
fn matmul_at_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// How the right operand of a binary element-wise op is broadcast.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Full,
    Row,
    Column,
    Scalar,
}

impl Broadcast {
    fn resolve(op: &'static str, a: [usize; 2], b: [usize; 2]) -> Result<Self> {
        if a == b {
            Ok(Broadcast::Full)
        } else if b == [1, 1] {
            Ok(Broadcast::Scalar)
        } else if b == [1, a[1]] {
            Ok(Broadcast::Row)
        } else if b == [a[0], 1] {
            Ok(Broadcast::Column)
        } else {
            Err(Error::contract(
                op,
                format!("cannot broadcast {}x{} onto {}x{}", b[0], b[1], a[0], a[1]),
            ))
        }
    }

    #[inline]
    fn index(self, r: usize, c: usize, cols: usize) -> usize {
        match self {
            Broadcast::Full => r * cols + c,
            Broadcast::Row => c,
            Broadcast::Column => r,
            Broadcast::Scalar => 0,
        }
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Element-wise map with a caller-supplied derivative `df(x, y)`.
pub type ElementFn = fn(f64) -> f64;
pub type ElementDeriv = fn(f64, f64) -> f64;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    ConcatCols(Var, Var),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Transpose(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Abs(Var),
    Log { input: Var, floor: f64 },
    Affine { input: Var, scale: f64 },
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather { table: Var, ids: Vec<usize> },
    GatherElements { input: Var, at: Vec<(usize, usize)> },
    GruCell(Box<GruSaved>),
    L2Distance(Var, Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        smoothing: f64,
        probs: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    Map { input: Var, deriv: ElementDeriv },
}

#[derive(Clone, Debug)]
struct GruSaved {
    x: Var,
    h: Var,
    w_ih: Var,
    w_hh: Var,
    b_ih: Var,
    b_hh: Var,
    r: Vec<f64>,
    z: Vec<f64>,
    n: Vec<f64>,
    hn: Vec<f64>,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulBt(..) => "matmul_bt",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::Transpose(..) => "transpose",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Abs(..) => "abs",
            Op::Log { .. } => "log",
            Op::Affine { .. } => "affine",
            Op::SoftmaxRows(..) => "softmax",
            Op::LogSoftmaxRows(..) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gather { .. } => "gather",
            Op::GatherElements { .. } => "gather_elements",
            Op::GruCell(..) => "gru_cell",
            Op::L2Distance(..) => "l2_distance",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Map { .. } => "map",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Computation tape: nodes are appended in execution order, so the node list
/// is already topologically sorted.
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
    bound: Vec<Option<Var>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: true,
            bound: Vec::new(),
        }
    }

    /// A graph that never records ops; used for inference.
    pub fn no_grad() -> Self {
        Graph {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of nodes that carry a backward rule.
    pub fn recorded_ops(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .count()
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// A leaf that accumulates a gradient during [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let rg = self.grad_enabled;
        self.push_leaf(value, rg)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Looks up a previously bound external slot (e.g. a model parameter).
    pub fn bound(&self, slot: usize) -> Option<Var> {
        self.bound.get(slot).copied().flatten()
    }

    pub fn bind(&mut self, slot: usize, var: Var) {
        if self.bound.len() <= slot {
            self.bound.resize(slot + 1, None);
        }
        self.bound[slot] = Some(var);
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass, for leaves that require it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad =
            self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let [m, k] = self.shape(a);
        let [k2, n] = self.shape(b);
        if k != k2 {
            return Err(Error::contract(
                "matmul",
                format!("{m}x{k} · {k2}x{n}: inner extents differ"),
            ));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&self.value(a).data, &self.value(b).data, &mut out, m, k, n);
        let value = Tensor {
            shape: [m, n],
            data: out,
        };
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let [m, k] = self.shape(a);
        let [n, k2] = self.shape(b);
        if k != k2 {
            return Err(Error::contract(
                "matmul_bt",
                format!("{m}x{k} · ({n}x{k2})ᵀ: inner extents differ"),
            ));
        }
        let mut out = vec![0.0; m * n];
        matmul_bt_into(&self.value(a).data, &self.value(b).data, &mut out, m, k, n);
        let value = Tensor {
            shape: [m, n],
            data: out,
        };
        Ok(self.push(value, Op::MatMulBt(a, b), &[a, b]))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, Broadcast)> {
        let sa = self.shape(a);
        let bc = Broadcast::resolve(name, sa, self.shape(b))?;
        let (av, bv) = (&self.value(a).data, &self.value(b).data);
        let cols = sa[1];
        let mut out = Vec::with_capacity(av.len());
        for r in 0..sa[0] {
            for c in 0..cols {
                out.push(f(av[r * cols + c], bv[bc.index(r, c, cols)]));
            }
        }
        Ok((
            Tensor {
                shape: sa,
                data: out,
            },
            bc,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, bc) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b, bc), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, bc) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b, bc), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, bc) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b, bc), &[a, b]))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let [ra, ca] = self.shape(a);
        let [rb, cb] = self.shape(b);
        if ra != rb {
            return Err(Error::contract(
                "concat_cols",
                format!("row counts differ: {ra}x{ca} vs {rb}x{cb}"),
            ));
        }
        let (av, bv) = (&self.value(a).data, &self.value(b).data);
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            out.extend_from_slice(&av[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&bv[r * cb..(r + 1) * cb]);
        }
        let t = Tensor {
            shape: [ra, ca + cb],
            data: out,
        };
        Ok(self.push(t, Op::ConcatCols(a, b), &[a, b]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::contract("concat_rows", "no inputs"));
        };
        let cols = self.shape(first)[1];
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let [r, c] = self.shape(p);
            if c != cols {
                return Err(Error::contract(
                    "concat_rows",
                    format!("column counts differ: {cols} vs {c}"),
                ));
            }
            rows += r;
            out.extend_from_slice(&self.value(p).data);
        }
        let t = Tensor {
            shape: [rows, cols],
            data: out,
        };
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let [r, c] = self.shape(a);
        if len == 0 || start + len > c {
            return Err(Error::contract(
                "slice_cols",
                format!("columns {start}..{} out of 0..{c}", start + len),
            ));
        }
        let av = &self.value(a).data;
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&av[i * c + start..i * c + start + len]);
        }
        let t = Tensor {
            shape: [r, len],
            data: out,
        };
        Ok(self.push(t, Op::SliceCols(a, start), &[a]))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let [r, c] = self.shape(a);
        if len == 0 || start + len > r {
            return Err(Error::contract(
                "slice_rows",
                format!("rows {start}..{} out of 0..{r}", start + len),
            ));
        }
        let data = self.value(a).data[start * c..(start + len) * c].to_vec();
        let t = Tensor {
            shape: [len, c],
            data,
        };
        Ok(self.push(t, Op::SliceRows(a, start), &[a]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a).transpose();
        self.push(t, Op::Transpose(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        self.push(t, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::tanh);
        self.push(t, Op::Tanh(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.max(0.0));
        self.push(t, Op::Relu(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::abs);
        self.push(t, Op::Abs(a), &[a])
    }

    /// Natural log of `max(x, floor)`; the gradient is zero where the floor is active.
    pub fn log_floor(&mut self, a: Var, floor: f64) -> Var {
        let t = self.value(a).map(|x| x.max(floor).ln());
        self.push(t, Op::Log { input: a, floor }, &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.log_floor(a, f64::MIN_POSITIVE)
    }

    /// `scale · x + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let t = self.value(a).map(|x| scale * x + shift);
        self.push(t, Op::Affine { input: a, scale }, &[a])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    /// `1 − x`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        self.affine(a, -1.0, 1.0)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = softmax_rows(self.value(a));
        self.push(t, Op::SoftmaxRows(a), &[a])
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let [r, c] = src.shape;
        let mut out = src.data.clone();
        for i in 0..r {
            let row = &mut out[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let t = Tensor {
            shape: [r, c],
            data: out,
        };
        self.push(t, Op::LogSoftmaxRows(a), &[a])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let [r, c] = self.shape(x);
        if self.shape(gamma) != [1, c] || self.shape(beta) != [1, c] {
            return Err(Error::contract(
                "layer_norm",
                format!("gain/bias must be 1x{c}"),
            ));
        }
        let xv = &self.value(x).data;
        let g = &self.value(gamma).data;
        let b = &self.value(beta).data;
        let mut normalized = Vec::with_capacity(r * c);
        let mut inv_std = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                let n = (v - mean) * is;
                normalized.push(n);
                out.push(n * g[j] + b[j]);
            }
        }
        let t = Tensor {
            shape: [r, c],
            data: out,
        };
        Ok(self.push(
            t,
            Op::LayerNorm {
                input: x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let [r, c] = self.shape(table);
        if ids.is_empty() {
            return Err(Error::contract("gather", "empty id list"));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= r) {
            return Err(Error::contract(
                "gather",
                format!("id {bad} out of range for {r}x{c} table"),
            ));
        }
        let tv = &self.value(table).data;
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            out.extend_from_slice(&tv[i * c..(i + 1) * c]);
        }
        let t = Tensor {
            shape: [ids.len(), c],
            data: out,
        };
        Ok(self.push(
            t,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Individual entries `(row, col)` collected into an `n × 1` column.
    pub fn gather_elements(&mut self, a: Var, at: &[(usize, usize)]) -> Result<Var> {
        let [r, c] = self.shape(a);
        if at.is_empty() {
            return Err(Error::contract("gather_elements", "empty index list"));
        }
        if let Some(bad) = at.iter().find(|(i, j)| *i >= r || *j >= c) {
            return Err(Error::contract(
                "gather_elements",
                format!("index {bad:?} out of range for {r}x{c}"),
            ));
        }
        let av = self.value(a);
        let data = at.iter().map(|&(i, j)| av.get(i, j)).collect();
        let t = Tensor {
            shape: [at.len(), 1],
            data,
        };
        Ok(self.push(
            t,
            Op::GatherElements {
                input: a,
                at: at.to_vec(),
            },
            &[a],
        ))
    }

    /// One step of a gated recurrent unit over a batch of rows.
    ///
    /// Gate blocks in the packed weights are ordered reset, update, candidate:
    /// `r = σ(x·W_r + h·U_r)`, `z = σ(x·W_z + h·U_z)`,
    /// `n = tanh(x·W_n + r ⊙ (h·U_n))`, `h' = (1 − z) ⊙ n + z ⊙ h` (biases omitted).
    pub fn gru_cell(
        &mut self,
        x: Var,
        h: Var,
        w_ih: Var,
        w_hh: Var,
        b_ih: Var,
        b_hh: Var,
    ) -> Result<Var> {
        let [bsz, din] = self.shape(x);
        let [bh, hid] = self.shape(h);
        let ok = bh == bsz
            && self.shape(w_ih) == [din, 3 * hid]
            && self.shape(w_hh) == [hid, 3 * hid]
            && self.shape(b_ih) == [1, 3 * hid]
            && self.shape(b_hh) == [1, 3 * hid];
        if !ok {
            return Err(Error::contract(
                "gru_cell",
                format!(
                    "x {:?}, h {:?}, w_ih {:?}, w_hh {:?}, b_ih {:?}, b_hh {:?}",
                    self.shape(x),
                    self.shape(h),
                    self.shape(w_ih),
                    self.shape(w_hh),
                    self.shape(b_ih),
                    self.shape(b_hh)
                ),
            ));
        }
        let h3 = 3 * hid;
        let mut gi = vec![0.0; bsz * h3];
        let mut gh = vec![0.0; bsz * h3];
        matmul_into(&self.value(x).data, &self.value(w_ih).data, &mut gi, bsz, din, h3);
        matmul_into(&self.value(h).data, &self.value(w_hh).data, &mut gh, bsz, hid, h3);
        let bi = &self.value(b_ih).data;
        let bhh = &self.value(b_hh).data;
        let hv = &self.value(h).data;
        let mut r = vec![0.0; bsz * hid];
        let mut z = vec![0.0; bsz * hid];
        let mut n = vec![0.0; bsz * hid];
        let mut hn = vec![0.0; bsz * hid];
        let mut out = vec![0.0; bsz * hid];
        for b in 0..bsz {
            for j in 0..hid {
                let o = b * h3;
                let k = b * hid + j;
                let rv = sigmoid(gi[o + j] + bi[j] + gh[o + j] + bhh[j]);
                let zv = sigmoid(gi[o + hid + j] + bi[hid + j] + gh[o + hid + j] + bhh[hid + j]);
                let hnv = gh[o + 2 * hid + j] + bhh[2 * hid + j];
                let nv = (gi[o + 2 * hid + j] + bi[2 * hid + j] + rv * hnv).tanh();
                r[k] = rv;
                z[k] = zv;
                hn[k] = hnv;
                n[k] = nv;
                out[k] = (1.0 - zv) * nv + zv * hv[k];
            }
        }
        let t = Tensor {
            shape: [bsz, hid],
            data: out,
        };
        let saved = GruSaved {
            x,
            h,
            w_ih,
            w_hh,
            b_ih,
            b_hh,
            r,
            z,
            n,
            hn,
        };
        Ok(self.push(
            t,
            Op::GruCell(Box::new(saved)),
            &[x, h, w_ih, w_hh, b_ih, b_hh],
        ))
    }

    /// Euclidean distance between two same-shape tensors, as a scalar.
    pub fn l2_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::contract(
                "l2_distance",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let d = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        Ok(self.push(Tensor::scalar(d), Op::L2Distance(a, b), &[a, b]))
    }

    /// Mean over rows of the cross-entropy between `softmax(logits)` and the
    /// target distribution `(1 − ε)·onehot + ε/V`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], smoothing: f64) -> Result<Var> {
        let [t, v] = self.shape(logits);
        if targets.len() != t {
            return Err(Error::contract(
                "cross_entropy",
                format!("{t} logit rows but {} targets", targets.len()),
            ));
        }
        if let Some(bad) = targets.iter().find(|&&y| y >= v) {
            return Err(Error::contract(
                "cross_entropy",
                format!("target {bad} outside vocabulary of {v}"),
            ));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::contract(
                "cross_entropy",
                format!("smoothing {smoothing} outside [0,1)"),
            ));
        }
        let lv = &self.value(logits).data;
        let mut probs = vec![0.0; t * v];
        let mut total = 0.0;
        let off = smoothing / v as f64;
        for (i, &y) in targets.iter().enumerate() {
            let row = &lv[i * v..(i + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            let mut loss = 0.0;
            for (j, &x) in row.iter().enumerate() {
                let logp = x - lse;
                probs[i * v + j] = logp.exp();
                let q = if j == y { 1.0 - smoothing + off } else { off };
                if q > 0.0 {
                    loss -= q * logp;
                }
            }
            total += loss;
        }
        let value = Tensor::scalar(total / t as f64);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                smoothing,
                probs,
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data.iter().sum::<f64>() / v.data.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Element-wise `f` with derivative `df(x, f(x))`.
    pub fn map(&mut self, a: Var, f: ElementFn, df: ElementDeriv) -> Var {
        let t = self.value(a).map(f);
        self.push(t, Op::Map { input: a, deriv: df }, &[a])
    }

    // ----------------------------------------------------------- backward

    /// Populates gradients of `loss` with respect to every grad-requiring leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.shape(loss) != [1, 1] {
            return Err(Error::contract(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for node in &mut self.nodes {
            node.grad = None;
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                self.nodes[idx].grad = Some(g);
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
        }
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let elementwise = |input: Var, f: &dyn Fn(f64, f64, f64) -> f64| -> Tensor {
            let x = &self.nodes[input.0].value;
            let data = g
                .data
                .iter()
                .zip(&x.data)
                .zip(&y.data)
                .map(|((&gv, &xv), &yv)| f(gv, xv, yv))
                .collect();
            Tensor {
                shape: x.shape,
                data,
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let [m, k] = self.shape(*a);
                let n = self.shape(*b)[1];
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; m * k];
                    matmul_bt_into(&g.data, &self.value(*b).data, &mut da, m, n, k);
                    acc(*a, Tensor { shape: [m, k], data: da });
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; k * n];
                    matmul_at_into(&self.value(*a).data, &g.data, &mut db, m, k, n);
                    acc(*b, Tensor { shape: [k, n], data: db });
                }
            }
            Op::MatMulBt(a, b) => {
                let [m, k] = self.shape(*a);
                let n = self.shape(*b)[0];
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; m * k];
                    matmul_into(&g.data, &self.value(*b).data, &mut da, m, n, k);
                    acc(*a, Tensor { shape: [m, k], data: da });
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; n * k];
                    matmul_at_into(&g.data, &self.value(*a).data, &mut db, m, n, k);
                    acc(*b, Tensor { shape: [n, k], data: db });
                }
            }
            Op::Add(a, b, bc) | Op::Sub(a, b, bc) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                acc(*a, g.clone());
                if self.requires_grad(*b) {
                    let mut db = reduce_broadcast(g, *bc, self.shape(*b));
                    if sign < 0.0 {
                        db.scale_assign(-1.0);
                    }
                    acc(*b, db);
                }
            }
            Op::Mul(a, b, bc) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let cols = av.shape[1];
                if self.requires_grad(*a) {
                    let mut da = g.clone();
                    for r in 0..av.shape[0] {
                        for c in 0..cols {
                            da.data[r * cols + c] *= bv.data[bc.index(r, c, cols)];
                        }
                    }
                    acc(*a, da);
                }
                if self.requires_grad(*b) {
                    let mut prod = g.clone();
                    for (p, x) in prod.data.iter_mut().zip(&av.data) {
                        *p *= x;
                    }
                    acc(*b, reduce_broadcast(&prod, *bc, bv.shape));
                }
            }
            Op::ConcatCols(a, b) => {
                let [r, ca] = self.shape(*a);
                let cb = self.shape(*b)[1];
                let w = ca + cb;
                let mut da = Vec::with_capacity(r * ca);
                let mut db = Vec::with_capacity(r * cb);
                for i in 0..r {
                    da.extend_from_slice(&g.data[i * w..i * w + ca]);
                    db.extend_from_slice(&g.data[i * w + ca..(i + 1) * w]);
                }
                acc(*a, Tensor { shape: [r, ca], data: da });
                acc(*b, Tensor { shape: [r, cb], data: db });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let shape = self.shape(p);
                    let n = shape[0] * shape[1];
                    acc(
                        p,
                        Tensor {
                            shape,
                            data: g.data[offset..offset + n].to_vec(),
                        },
                    );
                    offset += n;
                }
            }
            Op::SliceCols(a, start) => {
                let [r, c] = self.shape(*a);
                let len = y.shape[1];
                let mut da = Tensor::zeros(r, c);
                for i in 0..r {
                    da.data[i * c + start..i * c + start + len]
                        .copy_from_slice(&g.data[i * len..(i + 1) * len]);
                }
                acc(*a, da);
            }
            Op::SliceRows(a, start) => {
                let [r, c] = self.shape(*a);
                let mut da = Tensor::zeros(r, c);
                da.data[start * c..start * c + g.data.len()].copy_from_slice(&g.data);
                acc(*a, da);
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Sigmoid(a) => acc(*a, elementwise(*a, &|g, _, y| g * y * (1.0 - y))),
            Op::Tanh(a) => acc(*a, elementwise(*a, &|g, _, y| g * (1.0 - y * y))),
            Op::Relu(a) => acc(*a, elementwise(*a, &|g, x, _| if x > 0.0 { g } else { 0.0 })),
            Op::Abs(a) => acc(*a, elementwise(*a, &|g, x, _| g * sign(x))),
            Op::Log { input, floor } => {
                let floor = *floor;
                acc(
                    *input,
                    elementwise(*input, &|g, x, _| if x > floor { g / x } else { 0.0 }),
                )
            }
            Op::Affine { input, scale } => {
                let s = *scale;
                acc(*input, g.map(|v| v * s))
            }
            Op::Map { input, deriv } => {
                let d = *deriv;
                acc(*input, elementwise(*input, &|g, x, y| g * d(x, y)))
            }
            Op::SoftmaxRows(a) => {
                let [r, c] = y.shape;
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    let yr = &y.data[i * c..(i + 1) * c];
                    let gr = &g.data[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        da[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*a, Tensor { shape: [r, c], data: da });
            }
            Op::LogSoftmaxRows(a) => {
                let [r, c] = y.shape;
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    let yr = &y.data[i * c..(i + 1) * c];
                    let gr = &g.data[i * c..(i + 1) * c];
                    let gs: f64 = gr.iter().sum();
                    for j in 0..c {
                        da[i * c + j] = gr[j] - yr[j].exp() * gs;
                    }
                }
                acc(*a, Tensor { shape: [r, c], data: da });
            }
            Op::LayerNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let [r, c] = y.shape;
                let gam = &self.value(*gamma).data;
                let mut dx = vec![0.0; r * c];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for i in 0..r {
                    let gr = &g.data[i * c..(i + 1) * c];
                    let nr = &normalized[i * c..(i + 1) * c];
                    let mut sum_gh = 0.0;
                    let mut sum_gh_n = 0.0;
                    for j in 0..c {
                        let gh = gr[j] * gam[j];
                        sum_gh += gh;
                        sum_gh_n += gh * nr[j];
                        dgamma[j] += gr[j] * nr[j];
                        dbeta[j] += gr[j];
                    }
                    let k = inv_std[i] / c as f64;
                    for j in 0..c {
                        let gh = gr[j] * gam[j];
                        dx[i * c + j] = k * (c as f64 * gh - sum_gh - nr[j] * sum_gh_n);
                    }
                }
                acc(*input, Tensor { shape: [r, c], data: dx });
                acc(*gamma, Tensor::row(dgamma));
                acc(*beta, Tensor::row(dbeta));
            }
            Op::Gather { table, ids } => {
                if self.requires_grad(*table) {
                    let [r, c] = self.shape(*table);
                    let mut dt = Tensor::zeros(r, c);
                    for (k, &id) in ids.iter().enumerate() {
                        for j in 0..c {
                            dt.data[id * c + j] += g.data[k * c + j];
                        }
                    }
                    acc(*table, dt);
                }
            }
            Op::GatherElements { input, at } => {
                let [r, c] = self.shape(*input);
                let mut da = Tensor::zeros(r, c);
                for (k, &(i, j)) in at.iter().enumerate() {
                    da.data[i * c + j] += g.data[k];
                }
                acc(*input, da);
            }
            Op::GruCell(s) => self.backprop_gru(s, g, &mut acc),
            Op::L2Distance(a, b) => {
                let d = y.data[0];
                let scale = if d > 0.0 { g.data[0] / d } else { 0.0 };
                let av = self.value(*a);
                let bv = self.value(*b);
                let diff: Vec<f64> = av
                    .data
                    .iter()
                    .zip(&bv.data)
                    .map(|(x, y)| scale * (x - y))
                    .collect();
                let shape = av.shape;
                if self.requires_grad(*b) {
                    acc(
                        *b,
                        Tensor {
                            shape,
                            data: diff.iter().map(|v| -v).collect(),
                        },
                    );
                }
                acc(*a, Tensor { shape, data: diff });
            }
            Op::CrossEntropy {
                logits,
                targets,
                smoothing,
                probs,
            } => {
                let [t, v] = self.shape(*logits);
                let k = g.data[0] / t as f64;
                let off = smoothing / v as f64;
                let mut dl = probs.clone();
                for (i, &y) in targets.iter().enumerate() {
                    for j in 0..v {
                        let q = if j == y { 1.0 - smoothing + off } else { off };
                        dl[i * v + j] = k * (dl[i * v + j] - q);
                    }
                }
                acc(*logits, Tensor { shape: [t, v], data: dl });
            }
            Op::Sum(a) => {
                let shape = self.shape(*a);
                acc(*a, Tensor::full(shape[0], shape[1], g.data[0]));
            }
            Op::Mean(a) => {
                let shape = self.shape(*a);
                let n = (shape[0] * shape[1]) as f64;
                acc(*a, Tensor::full(shape[0], shape[1], g.data[0] / n));
            }
        }
    }

    fn backprop_gru(&self, s: &GruSaved, g: &Tensor, acc: &mut impl FnMut(Var, Tensor)) {
        let [bsz, din] = self.shape(s.x);
        let hid = self.shape(s.h)[1];
        let h3 = 3 * hid;
        let hv = &self.value(s.h).data;
        let mut dgi = vec![0.0; bsz * h3];
        let mut dgh = vec![0.0; bsz * h3];
        let mut dh = vec![0.0; bsz * hid];
        for b in 0..bsz {
            for j in 0..hid {
                let k = b * hid + j;
                let (r, z, n, hn) = (s.r[k], s.z[k], s.n[k], s.hn[k]);
                let go = g.data[k];
                let dn = go * (1.0 - z);
                let dz = go * (hv[k] - n);
                dh[k] = go * z;
                let dan = dn * (1.0 - n * n);
                let dr = dan * hn;
                let dar = dr * r * (1.0 - r);
                let daz = dz * z * (1.0 - z);
                let o = b * h3;
                dgi[o + j] = dar;
                dgi[o + hid + j] = daz;
                dgi[o + 2 * hid + j] = dan;
                dgh[o + j] = dar;
                dgh[o + hid + j] = daz;
                dgh[o + 2 * hid + j] = dan * r;
            }
        }
        if self.requires_grad(s.x) {
            let mut dx = vec![0.0; bsz * din];
            matmul_bt_into(&dgi, &self.value(s.w_ih).data, &mut dx, bsz, h3, din);
            acc(s.x, Tensor { shape: [bsz, din], data: dx });
        }
        if self.requires_grad(s.h) {
            matmul_bt_into(&dgh, &self.value(s.w_hh).data, &mut dh, bsz, h3, hid);
            acc(s.h, Tensor { shape: [bsz, hid], data: dh });
        }
        if self.requires_grad(s.w_ih) {
            let mut dw = vec![0.0; din * h3];
            matmul_at_into(&self.value(s.x).data, &dgi, &mut dw, bsz, din, h3);
            acc(s.w_ih, Tensor { shape: [din, h3], data: dw });
        }
        if self.requires_grad(s.w_hh) {
            let mut dw = vec![0.0; hid * h3];
            matmul_at_into(hv, &dgh, &mut dw, bsz, hid, h3);
            acc(s.w_hh, Tensor { shape: [hid, h3], data: dw });
        }
        let col_sum = |m: &[f64]| -> Tensor {
            let mut out = vec![0.0; h3];
            for b in 0..bsz {
                for (o, v) in out.iter_mut().zip(&m[b * h3..(b + 1) * h3]) {
                    *o += v;
                }
            }
            Tensor::row(out)
        };
        acc(s.b_ih, col_sum(&dgi));
        acc(s.b_hh, col_sum(&dgh));
    }

    /// Name of the primitive that produced `v`; `"leaf"` for unrecorded nodes.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
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

fn reduce_broadcast(g: &Tensor, bc: Broadcast, shape: [usize; 2]) -> Tensor {
    match bc {
        Broadcast::Full => g.clone(),
        _ => {
            let cols = g.shape[1];
            let mut out = Tensor::zeros(shape[0], shape[1]);
            for r in 0..g.shape[0] {
                for c in 0..cols {
                    out.data[bc.index(r, c, cols)] += g.data[r * cols + c];
                }
            }
            out
        }
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(t: &Tensor) -> Tensor {
    let [r, c] = t.shape;
    let mut out = t.data.clone();
    for i in 0..r {
        let row = &mut out[i * c..(i + 1) * c];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            total += *x;
        }
        for x in row.iter_mut() {
            *x /= total;
        }
    }
    Tensor {
        shape: [r, c],
        data: out,
    }
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    sigmoid(x)
}

/// Largest `|analytic − numeric| / max(1, |analytic|)` over all coordinates of
/// `point`, with `numeric` from central differences of step `step`.
pub fn finite_difference_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.leaf(point.clone());
    let loss = f(&mut g, x)?;
    g.backward(loss)?;
    let analytic = g
        .grad(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(point.rows(), point.cols()));
    let eval = |p: &Tensor| -> Result<f64> {
        let mut g = Graph::no_grad();
        let x = g.constant(p.clone());
        let out = f(&mut g, x)?;
        Ok(g.value(out).item())
    };
    let numeric = central_differences(point.data(), step, |v| {
        let t = Tensor {
            shape: point.shape,
            data: v.to_vec(),
        };
        eval(&t)
    })?;
    Ok(max_relative_error(analytic.data(), &numeric))
}

/// Central-difference gradient of a scalar function of a flat vector.
pub fn central_differences(
    point: &[f64],
    step: f64,
    mut f: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<Vec<f64>> {
    let mut work = point.to_vec();
    let mut out = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let orig = work[i];
        work[i] = orig + step;
        let plus = f(&work)?;
        work[i] = orig - step;
        let minus = f(&work)?;
        work[i] = orig;
        out.push((plus - minus) / (2.0 * step));
    }
    Ok(out)
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max)
}
