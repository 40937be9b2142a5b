use std::cell::RefCell;
use std::sync::Arc;

use super::Tensor;
use crate::error::{shape_err, Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    AddScalar(usize, usize),
    MulScalar(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Softplus(usize),
    Gelu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Square(usize),
    Cumsum(usize),
    Softmax(usize),
    LayerNorm { x: usize, inv_std: Vec<f64> },
    SliceRows { x: usize, start: usize },
    Slice { x: usize, start: usize },
    ConcatRows(Vec<usize>),
    Concat(Vec<usize>),
    Reshape(usize),
    Sum(usize),
    Mean(usize),
    MeanRows(usize),
    SqErrMean { x: usize, target: Vec<f64>, weight: Vec<f64>, denom: f64 },
    Interp { x: usize, slopes: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for reverse-mode differentiation.
///
/// A tape is single-threaded. Leaf gradients accumulate across
/// [`Tape::backward`] calls until [`Tape::zero_grad`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        self.push_arc(Arc::new(value), op, requires_grad)
    }

    fn push_arc(&self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf whose gradient is tracked.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    pub fn leaf_shared(&self, value: Arc<Tensor>, requires_grad: bool) -> Var<'_> {
        self.push_arc(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn value(&self, id: usize) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Accumulated gradient of a leaf, or `None` if it never received one.
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        let grads = self.grads.borrow();
        let g = grads.get(var.id)?.as_ref()?;
        let shape = self.nodes.borrow()[var.id].value.shape().to_vec();
        Some(Tensor::new(shape, g.clone()).expect("gradient shape matches value"))
    }

    pub fn zero_grad(&self) {
        self.grads.borrow_mut().iter_mut().for_each(|g| *g = None);
    }

    /// Propagates d(loss)/d(node) back to every reachable leaf that tracks
    /// gradients, adding into the leaf accumulators.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut local: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        local[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let Some(g) = local[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                local[id] = Some(g);
                continue;
            }
            propagate(&nodes, node, &g, &mut local);
        }

        let mut grads = self.grads.borrow_mut();
        if grads.len() < nodes.len() {
            grads.resize(nodes.len(), None);
        }
        for (id, g) in local.into_iter().enumerate() {
            if let Some(g) = g {
                if matches!(nodes[id].op, Op::Leaf) {
                    match &mut grads[id] {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        slot => *slot = Some(g),
                    }
                }
            }
        }
        Ok(())
    }
}

fn slot<'a>(local: &'a mut [Option<Vec<f64>>], nodes: &[Node], id: usize) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let n = nodes[id].value.len();
    Some(local[id].get_or_insert_with(|| vec![0.0; n]))
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], local: &mut [Option<Vec<f64>>]) {
    let out = &node.value;
    let val = |id: usize| -> &Tensor { &nodes[id].value };
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for id in [*a, *b] {
                if let Some(s) = slot(local, nodes, id) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(s) = slot(local, nodes, *a) {
                s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
            }
            if let Some(s) = slot(local, nodes, *b) {
                s.iter_mut().zip(g).for_each(|(s, g)| *s -= g);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            if let Some(s) = slot(local, nodes, *a) {
                for i in 0..s.len() {
                    s[i] += g[i] * bv[i];
                }
            }
            if let Some(s) = slot(local, nodes, *b) {
                for i in 0..s.len() {
                    s[i] += g[i] * av[i];
                }
            }
        }
        Op::Div(a, b) => {
            let bv = val(*b).data();
            let o = out.data();
            if let Some(s) = slot(local, nodes, *a) {
                for i in 0..s.len() {
                    s[i] += g[i] / bv[i];
                }
            }
            if let Some(s) = slot(local, nodes, *b) {
                for i in 0..s.len() {
                    s[i] -= g[i] * o[i] / bv[i];
                }
            }
        }
        Op::AddRow(x, b) => {
            let cols = out.cols();
            if let Some(s) = slot(local, nodes, *x) {
                s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
            }
            if let Some(s) = slot(local, nodes, *b) {
                for row in g.chunks(cols) {
                    s.iter_mut().zip(row).for_each(|(s, g)| *s += g);
                }
            }
        }
        Op::MulRow(x, b) => {
            let cols = out.cols();
            let xv = val(*x).data();
            let bv = val(*b).data();
            if let Some(s) = slot(local, nodes, *x) {
                for (i, s) in s.iter_mut().enumerate() {
                    *s += g[i] * bv[i % cols];
                }
            }
            if let Some(s) = slot(local, nodes, *b) {
                for (i, gi) in g.iter().enumerate() {
                    s[i % cols] += gi * xv[i];
                }
            }
        }
        Op::AddScalar(x, c) => {
            if let Some(s) = slot(local, nodes, *x) {
                s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
            }
            if let Some(s) = slot(local, nodes, *c) {
                s[0] += g.iter().sum::<f64>();
            }
        }
        Op::MulScalar(x, c) => {
            let cv = val(*c).data()[0];
            let xv = val(*x).data();
            if let Some(s) = slot(local, nodes, *x) {
                s.iter_mut().zip(g).for_each(|(s, g)| *s += g * cv);
            }
            if let Some(s) = slot(local, nodes, *c) {
                s[0] += g.iter().zip(xv).map(|(g, x)| g * x).sum::<f64>();
            }
        }
        Op::Scale(x, k) => {
            if let Some(s) = slot(local, nodes, *x) {
                s.iter_mut().zip(g).for_each(|(s, g)| *s += g * k);
            }
        }
        Op::Offset(x) | Op::Reshape(x) => {
            if let Some(s) = slot(local, nodes, *x) {
                s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
            }
        }
        Op::MatMul(a, b) => {
            let (at, bt) = (val(*a), val(*b));
            let (m, k, n) = (at.shape()[0], at.shape()[1], bt.shape()[1]);
            if let Some(s) = slot(local, nodes, *a) {
                // dA = dC . B^T
                let bd = bt.data();
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &bd[p * n..(p + 1) * n];
                        s[i * k + p] += dot(grow, brow);
                    }
                }
            }
            if let Some(s) = slot(local, nodes, *b) {
                // dB = A^T . dC
                let ad = at.data();
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let av = ad[i * k + p];
                        let srow = &mut s[p * n..(p + 1) * n];
                        srow.iter_mut().zip(grow).for_each(|(s, g)| *s += av * g);
                    }
                }
            }
        }
        Op::Transpose(x) => {
            let (r, c) = (out.shape()[0], out.shape()[1]);
            if let Some(s) = slot(local, nodes, *x) {
                // out is r x c, input is c x r
                for i in 0..r {
                    for j in 0..c {
                        s[j * r + i] += g[i * c + j];
                    }
                }
            }
        }
        Op::Softplus(x) => {
            let xv = val(*x).data();
            if let Some(s) = slot(local, nodes, *x) {
                for i in 0..s.len() {
                    s[i] += g[i] * sigmoid(xv[i]);
                }
            }
        }
        Op::Gelu(x) => {
            let xv = val(*x).data();
            if let Some(s) = slot(local, nodes, *x) {
                for i in 0..s.len() {
                    s[i] += g[i] * gelu_grad(xv[i]);
                }
            }
        }
        Op::Tanh(x) => {
            let o = out.data();
            if let Some(s) = slot(local, nodes, *x) {
                for i in 0..s.len() {
                    s[i] += g[i] * (1.0 - o[i] * o[i]);
                }
            }
        }
        Op::Sigmoid(x) => {
            let o = out.data();
            if let Some(s) = slot(local, nodes, *x) {
                for i in 0..s.len() {
                    s[i] += g[i] * o[i] * (1.0 - o[i]);
                }
            }
        }
        Op::Exp(x) => {
            let o = out.data();
            if let Some(s) = slot(local, nodes, *x) {
                for i in 0..s.len() {
                    s[i] += g[i] * o[i];
                }
            }
        }
        Op::Square(x) => {
            let xv = val(*x).data();
            if let Some(s) = slot(local, nodes, *x) {
                for i in 0..s.len() {
                    s[i] += 2.0 * g[i] * xv[i];
                }
            }
        }
        Op::Cumsum(x) => {
            let cols = out.cols();
            if let Some(s) = slot(local, nodes, *x) {
                for (srow, grow) in s.chunks_mut(cols).zip(g.chunks(cols)) {
                    let mut acc = 0.0;
                    for j in (0..cols).rev() {
                        acc += grow[j];
                        srow[j] += acc;
                    }
                }
            }
        }
        Op::Softmax(x) => {
            let cols = out.cols();
            let o = out.data();
            if let Some(s) = slot(local, nodes, *x) {
                for ((srow, grow), orow) in s.chunks_mut(cols).zip(g.chunks(cols)).zip(o.chunks(cols)) {
                    let inner = dot(grow, orow);
                    for j in 0..cols {
                        srow[j] += orow[j] * (grow[j] - inner);
                    }
                }
            }
        }
        Op::LayerNorm { x, inv_std } => {
            let cols = out.cols();
            let o = out.data();
            if let Some(s) = slot(local, nodes, *x) {
                for (r, ((srow, grow), orow)) in
                    s.chunks_mut(cols).zip(g.chunks(cols)).zip(o.chunks(cols)).enumerate()
                {
                    let n = cols as f64;
                    let mean_g = grow.iter().sum::<f64>() / n;
                    let mean_gy = dot(grow, orow) / n;
                    for j in 0..cols {
                        srow[j] += inv_std[r] * (grow[j] - mean_g - orow[j] * mean_gy);
                    }
                }
            }
        }
        Op::SliceRows { x, start } => {
            let cols = out.cols();
            if let Some(s) = slot(local, nodes, *x) {
                let off = start * cols;
                s[off..off + g.len()].iter_mut().zip(g).for_each(|(s, g)| *s += g);
            }
        }
        Op::Slice { x, start } => {
            let width = out.cols();
            let in_cols = val(*x).cols();
            if let Some(s) = slot(local, nodes, *x) {
                for (r, grow) in g.chunks(width).enumerate() {
                    let off = r * in_cols + start;
                    s[off..off + width].iter_mut().zip(grow).for_each(|(s, g)| *s += g);
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let n = val(p).len();
                if let Some(s) = slot(local, nodes, p) {
                    s.iter_mut().zip(&g[off..off + n]).for_each(|(s, g)| *s += g);
                }
                off += n;
            }
        }
        Op::Concat(parts) => {
            let out_cols = out.cols();
            let mut col_off = 0;
            for &p in parts {
                let w = val(p).cols();
                if let Some(s) = slot(local, nodes, p) {
                    for (r, srow) in s.chunks_mut(w).enumerate() {
                        let off = r * out_cols + col_off;
                        srow.iter_mut().zip(&g[off..off + w]).for_each(|(s, g)| *s += g);
                    }
                }
                col_off += w;
            }
        }
        Op::Sum(x) => {
            if let Some(s) = slot(local, nodes, *x) {
                s.iter_mut().for_each(|s| *s += g[0]);
            }
        }
        Op::Mean(x) => {
            if let Some(s) = slot(local, nodes, *x) {
                let k = g[0] / s.len() as f64;
                s.iter_mut().for_each(|s| *s += k);
            }
        }
        Op::MeanRows(x) => {
            let cols = out.cols();
            if let Some(s) = slot(local, nodes, *x) {
                let rows = s.len() / cols;
                for srow in s.chunks_mut(cols) {
                    for j in 0..cols {
                        srow[j] += g[j] / rows as f64;
                    }
                }
            }
        }
        Op::SqErrMean {
            x,
            target,
            weight,
            denom,
        } => {
            let xv = val(*x).data();
            if let Some(s) = slot(local, nodes, *x) {
                for i in 0..s.len() {
                    s[i] += g[0] * 2.0 * weight[i] * (xv[i] - target[i]) / denom;
                }
            }
        }
        Op::Interp { x, slopes } => {
            if let Some(s) = slot(local, nodes, *x) {
                for i in 0..s.len() {
                    s[i] += g[i] * slopes[i];
                }
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(a, b)| a * b).sum()
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

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Piecewise-linear interpolation of `(xs, ys)` at `x`, clamped to the end
/// values outside the table. Returns the value and the local slope (the
/// right-hand segment at a breakpoint, zero outside the table).
pub(crate) fn interp_with_slope(xs: &[f64], ys: &[f64], x: f64) -> (f64, f64) {
    let n = xs.len();
    if x <= xs[0] {
        return (ys[0], if x == xs[0] { (ys[1] - ys[0]) / (xs[1] - xs[0]) } else { 0.0 });
    }
    if x >= xs[n - 1] {
        return (ys[n - 1], 0.0);
    }
    let seg = match xs.partition_point(|&v| v <= x) {
        0 => 0,
        k => k - 1,
    };
    let slope = (ys[seg + 1] - ys[seg]) / (xs[seg + 1] - xs[seg]);
    (ys[seg] + slope * (x - xs[seg]), slope)
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.value().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Scalar value; panics if the node holds more than one element.
    pub fn item(&self) -> f64 {
        self.value().item().expect("item() on a non-scalar Var")
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    fn unary(&self, data: Vec<f64>, op: Op) -> Var<'t> {
        let shape = self.shape();
        let t = Tensor::new(shape, data).expect("unary op preserves shape");
        self.tape.push(t, op, self.requires_grad())
    }

    fn map(&self, f: impl Fn(f64) -> f64, op: Op) -> Var<'t> {
        let data = self.value().data().iter().map(|&v| f(v)).collect();
        self.unary(data, op)
    }

    fn same_shape(&self, other: &Var<'t>, op: &'static str) -> Result<()> {
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return shape_err(op, format!("{a:?} vs {b:?}"));
        }
        Ok(())
    }

    fn zip_with(&self, other: &Var<'t>, op_name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var<'t>> {
        self.same_shape(other, op_name)?;
        let (a, b) = (self.value(), other.value());
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        let rg = self.requires_grad() || other.requires_grad();
        let t = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.tape.push(t, op, rg))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.zip_with(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.zip_with(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.zip_with(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn div(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.zip_with(other, "div", |a, b| a / b, Op::Div(self.id, other.id))
    }

    fn row_op(&self, row: &Var<'t>, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var<'t>> {
        let (x, b) = (self.value(), row.value());
        if b.rank() != 1 || b.len() != x.cols() {
            return shape_err(name, format!("row {:?} against {:?}", b.shape(), x.shape()));
        }
        let cols = x.cols();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| f(v, b.data()[i % cols]))
            .collect();
        let rg = self.requires_grad() || row.requires_grad();
        Ok(self.tape.push(Tensor::new(x.shape().to_vec(), data)?, op, rg))
    }

    /// Adds a vector to every row (last-axis broadcast).
    pub fn add_row(&self, row: &Var<'t>) -> Result<Var<'t>> {
        self.row_op(row, "add_row", |a, b| a + b, Op::AddRow(self.id, row.id))
    }

    /// Multiplies every row elementwise by a vector.
    pub fn mul_row(&self, row: &Var<'t>) -> Result<Var<'t>> {
        self.row_op(row, "mul_row", |a, b| a * b, Op::MulRow(self.id, row.id))
    }

    fn scalar_op(&self, c: &Var<'t>, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var<'t>> {
        let cv = c.value();
        if cv.len() != 1 {
            return shape_err(name, format!("expected one-element operand, got {:?}", cv.shape()));
        }
        let k = cv.data()[0];
        let x = self.value();
        let data = x.data().iter().map(|&v| f(v, k)).collect();
        let rg = self.requires_grad() || c.requires_grad();
        Ok(self.tape.push(Tensor::new(x.shape().to_vec(), data)?, op, rg))
    }

    /// Adds a one-element Var to every element.
    pub fn add_scalar(&self, c: &Var<'t>) -> Result<Var<'t>> {
        self.scalar_op(c, "add_scalar", |a, b| a + b, Op::AddScalar(self.id, c.id))
    }

    /// Multiplies every element by a one-element Var.
    pub fn mul_scalar(&self, c: &Var<'t>) -> Result<Var<'t>> {
        self.scalar_op(c, "mul_scalar", |a, b| a * b, Op::MulScalar(self.id, c.id))
    }

    /// Multiplication by a constant.
    pub fn scale(&self, k: f64) -> Var<'t> {
        self.map(|v| v * k, Op::Scale(self.id, k))
    }

    /// Addition of a constant.
    pub fn offset(&self, k: f64) -> Var<'t> {
        self.map(|v| v + k, Op::Offset(self.id))
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return shape_err("matmul", format!("{:?} x {:?}", a.shape(), b.shape()));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut c = vec![0.0; m * n];
        let (ad, bd) = (a.data(), b.data());
        for i in 0..m {
            let crow = &mut c[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ad[i * k + p];
                let brow = &bd[p * n..(p + 1) * n];
                crow.iter_mut().zip(brow).for_each(|(c, b)| *c += av * b);
            }
        }
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(Tensor::matrix(m, n, c)?, Op::MatMul(self.id, other.id), rg))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() != 2 {
            return shape_err("transpose", format!("needs rank 2, got {:?}", x.shape()));
        }
        let (r, c) = (x.shape()[0], x.shape()[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = x.data()[i * c + j];
            }
        }
        Ok(self.tape.push(Tensor::matrix(c, r, data)?, Op::Transpose(self.id), self.requires_grad()))
    }

    pub fn softplus(&self) -> Var<'t> {
        self.map(softplus, Op::Softplus(self.id))
    }

    pub fn gelu(&self) -> Var<'t> {
        self.map(gelu, Op::Gelu(self.id))
    }

    pub fn tanh(&self) -> Var<'t> {
        self.map(f64::tanh, Op::Tanh(self.id))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.map(sigmoid, Op::Sigmoid(self.id))
    }

    pub fn exp(&self) -> Var<'t> {
        self.map(f64::exp, Op::Exp(self.id))
    }

    pub fn square(&self) -> Var<'t> {
        self.map(|v| v * v, Op::Square(self.id))
    }

    /// Inclusive cumulative sum along the last axis.
    pub fn cumsum(&self) -> Var<'t> {
        let x = self.value();
        let cols = x.cols();
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(cols) {
            let mut acc = 0.0;
            for v in row {
                acc += *v;
                *v = acc;
            }
        }
        self.unary(data, Op::Cumsum(self.id))
    }

    /// Softmax along the last axis.
    pub fn softmax(&self) -> Var<'t> {
        let x = self.value();
        let cols = x.cols();
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(cols) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        self.unary(data, Op::Softmax(self.id))
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&self) -> Var<'t> {
        let x = self.value();
        let cols = x.cols();
        let mut data = x.data().to_vec();
        let mut inv_std = Vec::with_capacity(x.rows());
        for row in data.chunks_mut(cols) {
            let n = cols as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        self.unary(data, Op::LayerNorm { x: self.id, inv_std })
    }

    /// Rows `start..start + len` of a rank-2 tensor.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() != 2 || start + len > x.shape()[0] {
            return shape_err("slice_rows", format!("rows {start}..{} of {:?}", start + len, x.shape()));
        }
        let cols = x.cols();
        let data = x.data()[start * cols..(start + len) * cols].to_vec();
        Ok(self
            .tape
            .push(Tensor::matrix(len, cols, data)?, Op::SliceRows { x: self.id, start }, self.requires_grad()))
    }

    /// Range `start..start + len` of the last axis.
    pub fn slice(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        let cols = x.cols();
        if x.rank() == 0 || start + len > cols {
            return shape_err("slice", format!("{start}..{} of {:?}", start + len, x.shape()));
        }
        let mut data = Vec::with_capacity(x.rows() * len);
        for row in x.data().chunks(cols) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        Ok(self
            .tape
            .push(Tensor::new(shape, data)?, Op::Slice { x: self.id, start }, self.requires_grad()))
    }

    /// Stacks rank-2 tensors with equal column counts along the first axis.
    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape { op: "concat_rows", detail: "no inputs".into() })?;
        let cols = first.value().cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let v = p.value();
            if v.rank() != 2 || v.cols() != cols {
                return shape_err("concat_rows", format!("{:?} against {cols} columns", v.shape()));
            }
            rows += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let rg = parts.iter().any(|p| p.requires_grad());
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(first.tape.push(Tensor::matrix(rows, cols, data)?, Op::ConcatRows(ids), rg))
    }

    /// Joins tensors with equal leading shape along the last axis.
    pub fn concat(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape { op: "concat", detail: "no inputs".into() })?;
        let lead = first.shape()[..first.shape().len().saturating_sub(1)].to_vec();
        let rows = first.value().rows();
        let values: Vec<Arc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        for v in &values {
            if v.rank() == 0 || v.shape()[..v.rank() - 1] != lead[..] {
                return shape_err("concat", format!("{:?} against leading {lead:?}", v.shape()));
            }
        }
        let total: usize = values.iter().map(|v| v.cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &values {
                let c = v.cols();
                data.extend_from_slice(&v.data()[r * c..(r + 1) * c]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = parts.iter().any(|p| p.requires_grad());
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(first.tape.push(Tensor::new(shape, data)?, Op::Concat(ids), rg))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Var<'t>> {
        let t = self.value().reshaped(shape)?;
        Ok(self.tape.push(t, Op::Reshape(self.id), self.requires_grad()))
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.value().data().iter().sum();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id), self.requires_grad())
    }

    pub fn mean(&self) -> Var<'t> {
        let x = self.value();
        let s = x.data().iter().sum::<f64>() / x.len() as f64;
        self.tape.push(Tensor::scalar(s), Op::Mean(self.id), self.requires_grad())
    }

    /// Mean over the first axis of a rank-2 tensor, giving a vector.
    pub fn mean_rows(&self) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() != 2 || x.shape()[0] == 0 {
            return shape_err("mean_rows", format!("needs non-empty rank 2, got {:?}", x.shape()));
        }
        let (rows, cols) = (x.shape()[0], x.cols());
        let mut data = vec![0.0; cols];
        for row in x.data().chunks(cols) {
            data.iter_mut().zip(row).for_each(|(d, v)| *d += v);
        }
        data.iter_mut().for_each(|d| *d /= rows as f64);
        Ok(self.tape.push(Tensor::vector(data), Op::MeanRows(self.id), self.requires_grad()))
    }

    /// Weighted mean squared error against a constant target:
    /// `sum_i w_i (x_i - y_i)^2 / sum_i w_i`.
    pub fn sq_err_mean(&self, target: &[f64], weight: &[f64]) -> Result<Var<'t>> {
        let x = self.value();
        if target.len() != x.len() || weight.len() != x.len() {
            return shape_err(
                "sq_err_mean",
                format!("{} values, {} targets, {} weights", x.len(), target.len(), weight.len()),
            );
        }
        let denom: f64 = weight.iter().sum();
        if denom <= 0.0 {
            return Err(Error::Contract("sq_err_mean with zero total weight".into()));
        }
        let s = x
            .data()
            .iter()
            .zip(target)
            .zip(weight)
            .map(|((x, y), w)| w * (x - y) * (x - y))
            .sum::<f64>()
            / denom;
        Ok(self.tape.push(
            Tensor::scalar(s),
            Op::SqErrMean {
                x: self.id,
                target: target.to_vec(),
                weight: weight.to_vec(),
                denom,
            },
            self.requires_grad(),
        ))
    }

    /// Elementwise piecewise-linear lookup in the table `(xs, ys)`; `xs` must
    /// be strictly increasing.
    pub fn interp(&self, xs: &[f64], ys: &[f64]) -> Result<Var<'t>> {
        if xs.len() < 2 || xs.len() != ys.len() || xs.windows(2).any(|w| w[1] <= w[0]) {
            return shape_err("interp", "table needs >= 2 strictly increasing abscissae");
        }
        let x = self.value();
        let (vals, slopes): (Vec<f64>, Vec<f64>) =
            x.data().iter().map(|&v| interp_with_slope(xs, ys, v)).unzip();
        Ok(self.unary(vals, Op::Interp { x: self.id, slopes }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn square_derivative() {
        let tape = Tape::new();
        let w = tape.leaf(Tensor::scalar(3.0));
        let loss = w.mul(&w).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap().item(), Some(6.0));
    }

    #[test]
    fn cumsum_forward() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert_eq!(x.cumsum().value().data(), &[1.0, 3.0, 6.0]);
    }

    #[test]
    fn softmax_rows_normalize() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::matrix(2, 3, vec![1.0, -2.0, 30.0, 0.5, 0.5, 0.5]).unwrap());
        let y = x.softmax().value();
        for row in y.data().chunks(3) {
            assert!(close(row.iter().sum::<f64>(), 1.0, 1e-12));
        }
    }

    #[test]
    fn independent_leaf_gets_no_gradient() {
        let tape = Tape::new();
        let p = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let q = tape.leaf(Tensor::vector(vec![0.5, 0.5]));
        let loss = q.square().sum();
        tape.backward(loss).unwrap();
        assert!(tape.grad(p).is_none());
        assert_eq!(tape.grad(q).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_twice_doubles() {
        let tape = Tape::new();
        let w = tape.leaf(Tensor::vector(vec![1.5, -0.25]));
        let loss = w.square().sum().scale(0.7);
        tape.backward(loss).unwrap();
        let once = tape.grad(w).unwrap();
        tape.backward(loss).unwrap();
        let twice = tape.grad(w).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert_eq!(2.0 * a, *b);
        }
        tape.zero_grad();
        assert!(tape.grad(w).is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let w = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert!(matches!(a.add(&b), Err(Error::Shape { .. })));
        let m = tape.constant(Tensor::matrix(2, 2, vec![1.0; 4]).unwrap());
        let n = tape.constant(Tensor::matrix(3, 1, vec![1.0; 3]).unwrap());
        assert!(matches!(m.matmul(&n), Err(Error::Shape { .. })));
        assert!(a.add_scalar(&b).is_err());
    }

    #[test]
    fn inputs_are_not_mutated() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(2, 2, vec![0.1, -0.3, 2.0, 1.0]).unwrap());
        let before = x.value().as_ref().clone();
        let y = x.layer_norm().softmax().cumsum().gelu().sum();
        tape.backward(y).unwrap();
        assert_eq!(*x.value(), before);
    }

    #[test]
    fn interp_matches_table() {
        let xs = [0.0, 0.5, 1.0];
        let ys = [3.0, 3.5, 4.2];
        assert_eq!(interp_with_slope(&xs, &ys, 0.0).0, 3.0);
        assert!(close(interp_with_slope(&xs, &ys, 0.75).0, 3.85, 1e-12));
        assert_eq!(interp_with_slope(&xs, &ys, 1.0).0, 4.2);
        assert_eq!(interp_with_slope(&xs, &ys, 2.0), (4.2, 0.0));
    }
}
