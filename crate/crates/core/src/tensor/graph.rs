use std::cell::RefCell;
use std::fmt;

use super::gemm::gemm;
use super::{strides, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Relu,
    Sigmoid,
    Exp,
    Log,
    Neg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Hadamard,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    cin: usize,
    rows: usize,
    cols: usize,
    cout: usize,
    kr: usize,
    kc: usize,
    out_rows: usize,
    out_cols: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.cin * self.kr * self.kc
    }

    fn out_len(&self) -> usize {
        self.out_rows * self.out_cols
    }
}

enum Op {
    Leaf,
    Unary { kind: UnaryKind, x: usize },
    /// `y` is broadcast into the shape of `x`; `ymap` maps each output
    /// element to its `y` element, `None` when the shapes agree.
    Binary { kind: BinaryKind, x: usize, y: usize, ymap: Option<Vec<usize>> },
    Scale { x: usize, factor: f64 },
    Offset { x: usize },
    MatMul { x: usize, y: usize, m: usize, k: usize, n: usize },
    Conv2d { x: usize, k: usize, geom: ConvGeom, cols: Vec<f64> },
    MaxPool { x: usize, argmax: Vec<usize> },
    Reduce { x: usize, kind: ReduceKind, map: Vec<usize>, count: usize },
    Softmax { x: usize, outer: usize, len: usize, inner: usize },
    Reshape { x: usize },
    Select { x: usize, index: usize },
    Elementwise { x: usize, deriv: Vec<f64> },
}

impl Op {
    fn parents(&self) -> [Option<usize>; 2] {
        match *self {
            Op::Leaf => [None, None],
            Op::Binary { x, y, .. } | Op::MatMul { x, y, .. } => [Some(x), Some(y)],
            Op::Conv2d { x, k, .. } => [Some(x), Some(k)],
            Op::Unary { x, .. }
            | Op::Scale { x, .. }
            | Op::Offset { x }
            | Op::MaxPool { x, .. }
            | Op::Reduce { x, .. }
            | Op::Softmax { x, .. }
            | Op::Reshape { x }
            | Op::Select { x, .. }
            | Op::Elementwise { x, .. } => [Some(x), None],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Recording tape. Node ids are assigned in creation order, which is a
/// topological order of the computation.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.nodes.borrow().len()).finish()
    }
}

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a copy of `t` as a leaf, honoring its `requires_grad` flag.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        let mut value = t.clone();
        let rg = value.requires_grad();
        value.set_requires_grad(false);
        self.push(value, Op::Leaf, rg)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&self, mut t: Tensor) -> Var<'_> {
        t.set_requires_grad(false);
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that accumulates gradient.
    pub fn variable(&self, mut t: Tensor) -> Var<'_> {
        t.set_requires_grad(false);
        self.push(t, Op::Leaf, true)
    }

    /// Clears every gradient accumulated on this graph.
    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad, grad: None });
        Var { graph: self, id: nodes.len() - 1 }
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from `root`, ignoring every node below `floor`.
    fn backward_impl(&self, root: usize, floor: usize) -> Result<()> {
        let contributions = {
            let nodes = self.nodes.borrow();
            if nodes[root].value.numel() != 1 {
                return Err(Error::contract(format!(
                    "backward from non-scalar root of shape {:?}",
                    nodes[root].value.shape()
                )));
            }
            let mut grads: Vec<Option<Vec<f64>>> = (0..=root).map(|_| None).collect();
            grads[root] = Some(vec![1.0]);
            for id in (floor..=root).rev() {
                let Some(g) = grads[id].take() else { continue };
                let node = &nodes[id];
                if node.requires_grad {
                    let [p0, p1] = node.op.parents();
                    let want = |p: Option<usize>| p.is_some_and(|p| p >= floor && nodes[p].requires_grad);
                    let (want0, want1) = (want(p0), want(p1));
                    if want0 || want1 {
                        let (g0, g1) = local_grads(&nodes, node, &g, want0, want1);
                        for (p, pg) in [(p0, g0), (p1, g1)] {
                            if let (Some(p), Some(pg)) = (p, pg) {
                                add_into(&mut grads[p], pg);
                            }
                        }
                    }
                }
                grads[id] = Some(g);
            }
            grads
        };
        let mut nodes = self.nodes.borrow_mut();
        for (id, g) in contributions.into_iter().enumerate() {
            let node = &mut nodes[id];
            if let (Some(g), true) = (g, node.requires_grad) {
                match &mut node.grad {
                    Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, v)| *b += v),
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }
}

fn add_into(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, v)| *b += v),
        None => *slot = Some(g),
    }
}

fn local_grads(
    nodes: &[Node],
    node: &Node,
    g: &[f64],
    want0: bool,
    want1: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let out = node.value.data();
    match &node.op {
        Op::Leaf => (None, None),
        Op::Unary { kind, x } => {
            let xv = nodes[*x].value.data();
            let dx: Vec<f64> = match kind {
                UnaryKind::Relu => g.iter().zip(xv).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect(),
                UnaryKind::Sigmoid => g.iter().zip(out).map(|(g, s)| g * s * (1.0 - s)).collect(),
                UnaryKind::Exp => g.iter().zip(out).map(|(g, e)| g * e).collect(),
                UnaryKind::Log => g.iter().zip(xv).map(|(g, x)| g / x).collect(),
                UnaryKind::Neg => g.iter().map(|g| -g).collect(),
            };
            (Some(dx), None)
        }
        Op::Binary { kind, x, y, ymap } => {
            let xv = nodes[*x].value.data();
            let yv = nodes[*y].value.data();
            let yat = |i: usize| match ymap {
                Some(m) => yv[m[i]],
                None => yv[i],
            };
            let dx = want0.then(|| match kind {
                BinaryKind::Add | BinaryKind::Sub => g.to_vec(),
                BinaryKind::Hadamard => g.iter().enumerate().map(|(i, g)| g * yat(i)).collect(),
                BinaryKind::Div => g.iter().enumerate().map(|(i, g)| g / yat(i)).collect(),
            });
            let dy = want1.then(|| {
                let mut dy = vec![0.0; yv.len()];
                for (i, gi) in g.iter().enumerate() {
                    let j = ymap.as_ref().map_or(i, |m| m[i]);
                    dy[j] += match kind {
                        BinaryKind::Add => *gi,
                        BinaryKind::Sub => -gi,
                        BinaryKind::Hadamard => gi * xv[i],
                        BinaryKind::Div => -gi * xv[i] / (yv[j] * yv[j]),
                    };
                }
                dy
            });
            (dx, dy)
        }
        Op::Scale { factor, .. } => (Some(g.iter().map(|g| g * factor).collect()), None),
        Op::Offset { .. } | Op::Reshape { .. } => (Some(g.to_vec()), None),
        Op::MatMul { x, y, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            let dx = want0.then(|| {
                let mut dx = vec![0.0; m * k];
                gemm(m, n, k, g, false, nodes[*y].value.data(), true, &mut dx, false);
                dx
            });
            let dy = want1.then(|| {
                let mut dy = vec![0.0; k * n];
                gemm(k, m, n, nodes[*x].value.data(), true, g, false, &mut dy, false);
                dy
            });
            (dx, dy)
        }
        Op::Conv2d { k, geom, cols, .. } => {
            let (pl, ol) = (geom.patch_len(), geom.out_len());
            let dx = want0.then(|| {
                let mut dcols = vec![0.0; pl * ol];
                gemm(pl, geom.cout, ol, nodes[*k].value.data(), true, g, false, &mut dcols, false);
                col2im(geom, &dcols)
            });
            let dk = want1.then(|| {
                let mut dk = vec![0.0; geom.cout * pl];
                gemm(geom.cout, ol, pl, g, false, cols, true, &mut dk, false);
                dk
            });
            (dx, dk)
        }
        Op::MaxPool { x, argmax } => {
            let mut dx = vec![0.0; nodes[*x].value.numel()];
            for (gi, &src) in g.iter().zip(argmax) {
                dx[src] += gi;
            }
            (Some(dx), None)
        }
        Op::Reduce { x, kind, map, count } => {
            let scale = match kind {
                ReduceKind::Sum => 1.0,
                ReduceKind::Mean => 1.0 / *count as f64,
            };
            let n = nodes[*x].value.numel();
            (Some((0..n).map(|i| g[map[i]] * scale).collect()), None)
        }
        Op::Softmax { outer, len, inner, .. } => {
            let mut dx = vec![0.0; out.len()];
            for o in 0..*outer {
                for i in 0..*inner {
                    let at = |j: usize| (o * len + j) * inner + i;
                    let dot: f64 = (0..*len).map(|j| g[at(j)] * out[at(j)]).sum();
                    for j in 0..*len {
                        dx[at(j)] = out[at(j)] * (g[at(j)] - dot);
                    }
                }
            }
            (Some(dx), None)
        }
        Op::Select { x, index } => {
            let mut dx = vec![0.0; nodes[*x].value.numel()];
            dx[*index] = g[0];
            (Some(dx), None)
        }
        Op::Elementwise { deriv, .. } => (Some(g.iter().zip(deriv).map(|(g, d)| g * d).collect()), None),
    }
}

fn im2col(geom: &ConvGeom, x: &[f64]) -> Vec<f64> {
    let ol = geom.out_len();
    let mut cols = vec![0.0; geom.patch_len() * ol];
    for c in 0..geom.cin {
        for kr in 0..geom.kr {
            for kc in 0..geom.kc {
                let row = (c * geom.kr + kr) * geom.kc + kc;
                let dst = &mut cols[row * ol..(row + 1) * ol];
                for orow in 0..geom.out_rows {
                    let r = (orow * geom.stride + kr) as isize - geom.pad as isize;
                    if r < 0 || r >= geom.rows as isize {
                        continue;
                    }
                    let src = &x[(c * geom.rows + r as usize) * geom.cols..][..geom.cols];
                    for ocol in 0..geom.out_cols {
                        let cc = (ocol * geom.stride + kc) as isize - geom.pad as isize;
                        if cc >= 0 && cc < geom.cols as isize {
                            dst[orow * geom.out_cols + ocol] = src[cc as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(geom: &ConvGeom, dcols: &[f64]) -> Vec<f64> {
    let ol = geom.out_len();
    let mut dx = vec![0.0; geom.cin * geom.rows * geom.cols];
    for c in 0..geom.cin {
        for kr in 0..geom.kr {
            for kc in 0..geom.kc {
                let row = (c * geom.kr + kr) * geom.kc + kc;
                let src = &dcols[row * ol..(row + 1) * ol];
                for orow in 0..geom.out_rows {
                    let r = (orow * geom.stride + kr) as isize - geom.pad as isize;
                    if r < 0 || r >= geom.rows as isize {
                        continue;
                    }
                    let base = (c * geom.rows + r as usize) * geom.cols;
                    for ocol in 0..geom.out_cols {
                        let cc = (ocol * geom.stride + kc) as isize - geom.pad as isize;
                        if cc >= 0 && cc < geom.cols as isize {
                            dx[base + cc as usize] += src[orow * geom.out_cols + ocol];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// For each element of `x`, the flat index of the `y` element broadcast onto
/// it. Shapes are right-aligned; size-1 axes of `y` stretch.
fn broadcast_map(x: &[usize], y: &[usize]) -> Result<Option<Vec<usize>>> {
    if x == y {
        return Ok(None);
    }
    let incompatible = || Error::shape(format!("cannot broadcast {y:?} onto {x:?}"));
    if y.len() > x.len() {
        return Err(incompatible());
    }
    let off = x.len() - y.len();
    if y.iter().enumerate().any(|(i, &d)| d != 1 && d != x[off + i]) {
        return Err(incompatible());
    }
    let xs = strides(x);
    let ys = strides(y);
    let n: usize = x.iter().product();
    let map = (0..n)
        .map(|flat| {
            let mut rem = flat;
            let mut yi = 0;
            for a in 0..x.len() {
                let idx = rem / xs[a];
                rem %= xs[a];
                if a >= off && y[a - off] != 1 {
                    yi += idx * ys[a - off];
                }
            }
            yi
        })
        .collect();
    Ok(Some(map))
}

fn check_finite(op: &str, t: &[f64]) -> Result<()> {
    match t.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::Numeric(format!("{op}: non-finite input at element {i}"))),
        None => Ok(()),
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    /// Borrows the value without copying it.
    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.graph.nodes.borrow()[self.id].value)
    }

    pub fn value(&self) -> Tensor {
        self.with_value(Tensor::clone)
    }

    pub fn data(&self) -> Vec<f64> {
        self.with_value(|t| t.data().to_vec())
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|t| t.shape().to_vec())
    }

    pub fn numel(&self) -> usize {
        self.with_value(Tensor::numel)
    }

    pub fn item(&self) -> Result<f64> {
        self.with_value(Tensor::item)
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.rg(self.id)
    }

    /// Gradient accumulated by previous `backward` calls, if any.
    pub fn grad(&self) -> Option<Tensor> {
        let nodes = self.graph.nodes.borrow();
        let node = &nodes[self.id];
        node.grad.as_ref().map(|g| Tensor::from_vec(node.value.shape(), g.clone()).expect("grad shape"))
    }

    /// Reverse-mode sweep from this scalar. Gradients are added to whatever
    /// is already accumulated; call [`Graph::zero_grad`] to reset.
    pub fn backward(&self) -> Result<()> {
        self.graph.backward_impl(self.id, 0)
    }

    /// Like [`Var::backward`] but only propagates through nodes recorded at
    /// or after `boundary`, so nothing upstream of `boundary` is visited.
    /// Used to get the gradient with respect to an intermediate value.
    pub fn backward_to(&self, boundary: Var<'g>) -> Result<()> {
        self.same_graph(&boundary)?;
        if boundary.id > self.id {
            return Err(Error::contract("backward boundary recorded after the root"));
        }
        self.graph.backward_impl(self.id, boundary.id)
    }

    fn same_graph(&self, other: &Var<'g>) -> Result<()> {
        if std::ptr::eq(self.graph, other.graph) {
            Ok(())
        } else {
            Err(Error::contract("operands recorded on different graphs"))
        }
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'g> {
        self.graph.push(value, op, requires_grad)
    }

    pub fn unary(&self, kind: UnaryKind) -> Result<Var<'g>> {
        let (shape, data) = self.with_value(|t| (t.shape().to_vec(), t.data().to_vec()));
        if kind == UnaryKind::Log {
            if let Some(i) = data.iter().position(|&v| v <= 0.0 || v.is_nan()) {
                return Err(Error::Domain { op: "log", index: i, value: data[i] });
            }
        }
        let f: fn(f64) -> f64 = match kind {
            UnaryKind::Relu => |v| if v > 0.0 { v } else { 0.0 },
            UnaryKind::Sigmoid => sigmoid,
            UnaryKind::Exp => f64::exp,
            UnaryKind::Log => f64::ln,
            UnaryKind::Neg => |v| -v,
        };
        let out = Tensor::from_vec(&shape, data.into_iter().map(f).collect())?;
        Ok(self.push(out, Op::Unary { kind, x: self.id }, self.requires_grad()))
    }

    pub fn relu(&self) -> Var<'g> {
        self.unary(UnaryKind::Relu).expect("relu is total")
    }

    pub fn sigmoid(&self) -> Var<'g> {
        self.unary(UnaryKind::Sigmoid).expect("sigmoid is total")
    }

    pub fn exp(&self) -> Var<'g> {
        self.unary(UnaryKind::Exp).expect("exp is total")
    }

    pub fn log(&self) -> Result<Var<'g>> {
        self.unary(UnaryKind::Log)
    }

    pub fn neg(&self) -> Var<'g> {
        self.unary(UnaryKind::Neg).expect("neg is total")
    }

    /// Elementwise `self ∘ other`, with `other` broadcast into `self`'s shape.
    pub fn binary(&self, kind: BinaryKind, other: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&other)?;
        let nodes = self.graph.nodes.borrow();
        let (x, y) = (&nodes[self.id].value, &nodes[other.id].value);
        let ymap = broadcast_map(x.shape(), y.shape())?;
        let yv = y.data();
        if kind == BinaryKind::Div {
            if let Some(i) = yv.iter().position(|&v| v == 0.0) {
                return Err(Error::Numeric(format!("division by zero at divisor element {i}")));
            }
        }
        let data: Vec<f64> = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &a)| {
                let b = match &ymap {
                    Some(m) => yv[m[i]],
                    None => yv[i],
                };
                match kind {
                    BinaryKind::Add => a + b,
                    BinaryKind::Sub => a - b,
                    BinaryKind::Hadamard => a * b,
                    BinaryKind::Div => a / b,
                }
            })
            .collect();
        let out = Tensor::from_vec(x.shape(), data)?;
        let rg = nodes[self.id].requires_grad || nodes[other.id].requires_grad;
        drop(nodes);
        Ok(self.push(out, Op::Binary { kind, x: self.id, y: other.id, ymap }, rg))
    }

    pub fn add(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(BinaryKind::Add, other)
    }

    pub fn sub(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(BinaryKind::Sub, other)
    }

    pub fn mul(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(BinaryKind::Hadamard, other)
    }

    pub fn div(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(BinaryKind::Div, other)
    }

    pub fn scale(&self, factor: f64) -> Var<'g> {
        let out = self.with_value(|t| {
            Tensor::from_vec(t.shape(), t.data().iter().map(|v| v * factor).collect()).expect("same shape")
        });
        self.push(out, Op::Scale { x: self.id, factor }, self.requires_grad())
    }

    pub fn add_scalar(&self, c: f64) -> Var<'g> {
        let out = self.with_value(|t| {
            Tensor::from_vec(t.shape(), t.data().iter().map(|v| v + c).collect()).expect("same shape")
        });
        self.push(out, Op::Offset { x: self.id }, self.requires_grad())
    }

    /// `[m×k] · [k×n] → [m×n]`.
    pub fn matmul(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&other)?;
        let nodes = self.graph.nodes.borrow();
        let (x, y) = (&nodes[self.id].value, &nodes[other.id].value);
        let (xs, ys) = (x.shape(), y.shape());
        if xs.len() != 2 || ys.len() != 2 || xs[1] != ys[0] {
            return Err(Error::shape(format!("matmul of {xs:?} by {ys:?}")));
        }
        let (m, k, n) = (xs[0], xs[1], ys[1]);
        let mut data = vec![0.0; m * n];
        gemm(m, k, n, x.data(), false, y.data(), false, &mut data, false);
        let rg = nodes[self.id].requires_grad || nodes[other.id].requires_grad;
        drop(nodes);
        let out = Tensor::from_vec(&[m, n], data)?;
        Ok(self.push(out, Op::MatMul { x: self.id, y: other.id, m, k, n }, rg))
    }

    /// Cross-correlation of a `[Cin, rows, cols]` input with a
    /// `[Cout, Cin, kr, kc]` kernel bank.
    pub fn conv2d(&self, kernel: Var<'g>, stride: usize, pad: usize) -> Result<Var<'g>> {
        self.same_graph(&kernel)?;
        if stride == 0 {
            return Err(Error::shape("conv2d stride must be at least 1"));
        }
        let nodes = self.graph.nodes.borrow();
        let (x, k) = (&nodes[self.id].value, &nodes[kernel.id].value);
        let (xs, ks) = (x.shape(), k.shape());
        if xs.len() != 3 || ks.len() != 4 || ks[1] != xs[0] {
            return Err(Error::shape(format!("conv2d of input {xs:?} with kernel {ks:?}")));
        }
        let (pr, pc) = (xs[1] + 2 * pad, xs[2] + 2 * pad);
        if ks[2] > pr || ks[3] > pc {
            return Err(Error::shape(format!(
                "kernel {}x{} larger than padded input {pr}x{pc}",
                ks[2], ks[3]
            )));
        }
        let geom = ConvGeom {
            cin: xs[0],
            rows: xs[1],
            cols: xs[2],
            cout: ks[0],
            kr: ks[2],
            kc: ks[3],
            out_rows: (pr - ks[2]) / stride + 1,
            out_cols: (pc - ks[3]) / stride + 1,
            stride,
            pad,
        };
        let cols = im2col(&geom, x.data());
        let mut data = vec![0.0; geom.cout * geom.out_len()];
        gemm(geom.cout, geom.patch_len(), geom.out_len(), k.data(), false, &cols, false, &mut data, false);
        let rg = nodes[self.id].requires_grad || nodes[kernel.id].requires_grad;
        let keep_cols = nodes[kernel.id].requires_grad;
        drop(nodes);
        let out = Tensor::from_vec(&[geom.cout, geom.out_rows, geom.out_cols], data)?;
        let cols = if keep_cols { cols } else { Vec::new() };
        Ok(self.push(out, Op::Conv2d { x: self.id, k: kernel.id, geom, cols }, rg))
    }

    /// Non-overlapping `size×size` max pooling of a `[C, rows, cols]` tensor.
    /// Backward routes to the first maximum in row-major window order.
    pub fn maxpool2d(&self, size: usize) -> Result<Var<'g>> {
        let nodes = self.graph.nodes.borrow();
        let x = &nodes[self.id].value;
        let xs = x.shape();
        if xs.len() != 3 || size == 0 || !xs[1].is_multiple_of(size) || !xs[2].is_multiple_of(size) {
            return Err(Error::shape(format!("maxpool2d size {size} on {xs:?}")));
        }
        let (c, rows, cols) = (xs[0], xs[1], xs[2]);
        let (orows, ocols) = (rows / size, cols / size);
        let xv = x.data();
        let mut data = Vec::with_capacity(c * orows * ocols);
        let mut argmax = Vec::with_capacity(c * orows * ocols);
        for ch in 0..c {
            for or in 0..orows {
                for oc in 0..ocols {
                    let mut best = (ch * rows + or * size) * cols + oc * size;
                    for r in 0..size {
                        for cc in 0..size {
                            let i = (ch * rows + or * size + r) * cols + oc * size + cc;
                            if xv[i] > xv[best] {
                                best = i;
                            }
                        }
                    }
                    data.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = nodes[self.id].requires_grad;
        drop(nodes);
        let out = Tensor::from_vec(&[c, orows, ocols], data)?;
        Ok(self.push(out, Op::MaxPool { x: self.id, argmax }, rg))
    }

    /// Sum or mean over `axes`; reduced axes are dropped from the shape.
    pub fn reduce(&self, kind: ReduceKind, axes: &[usize]) -> Result<Var<'g>> {
        let shape = self.shape();
        let mut reduced = vec![false; shape.len()];
        for &a in axes {
            if a >= shape.len() {
                return Err(Error::shape(format!("reduce axis {a} on tensor of rank {}", shape.len())));
            }
            reduced[a] = true;
        }
        let out_shape: Vec<usize> =
            shape.iter().zip(&reduced).filter(|(_, &r)| !r).map(|(&d, _)| d).collect();
        let count: usize = shape.iter().zip(&reduced).filter(|(_, &r)| r).map(|(&d, _)| d).product();
        let in_strides = strides(&shape);
        let out_strides = strides(&out_shape);
        let n: usize = shape.iter().product();
        let map: Vec<usize> = (0..n)
            .map(|flat| {
                let mut rem = flat;
                let mut oi = 0;
                let mut oa = 0;
                for a in 0..shape.len() {
                    let idx = rem / in_strides[a];
                    rem %= in_strides[a];
                    if !reduced[a] {
                        oi += idx * out_strides[oa];
                        oa += 1;
                    }
                }
                oi
            })
            .collect();
        let mut data = vec![0.0; out_shape.iter().product()];
        self.with_value(|t| {
            for (v, &o) in t.data().iter().zip(&map) {
                data[o] += v;
            }
        });
        if kind == ReduceKind::Mean {
            data.iter_mut().for_each(|v| *v /= count as f64);
        }
        let out = Tensor::from_vec(&out_shape, data)?;
        Ok(self.push(out, Op::Reduce { x: self.id, kind, map, count }, self.requires_grad()))
    }

    pub fn sum(&self) -> Var<'g> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.reduce(ReduceKind::Sum, &axes).expect("all axes valid")
    }

    pub fn mean(&self) -> Var<'g> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.reduce(ReduceKind::Mean, &axes).expect("all axes valid")
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var<'g>> {
        let (shape, xv) = self.with_value(|t| (t.shape().to_vec(), t.data().to_vec()));
        if axis >= shape.len() {
            return Err(Error::shape(format!("softmax axis {axis} on tensor of rank {}", shape.len())));
        }
        check_finite("softmax", &xv)?;
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| xv[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (xv[at(j)] - max).exp();
                    data[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    data[at(j)] /= total;
                }
            }
        }
        let out = Tensor::from_vec(&shape, data)?;
        Ok(self.push(out, Op::Softmax { x: self.id, outer, len, inner }, self.requires_grad()))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g>> {
        let out = self.with_value(|t| Tensor::from_vec(shape, t.data().to_vec()))?;
        Ok(self.push(out, Op::Reshape { x: self.id }, self.requires_grad()))
    }

    /// Scalar holding the element at flat index `index`.
    pub fn select(&self, index: usize) -> Result<Var<'g>> {
        let n = self.numel();
        if index >= n {
            return Err(Error::Index { what: "tensor", index, len: n });
        }
        let v = self.with_value(|t| t.data()[index]);
        Ok(self.push(Tensor::scalar(v), Op::Select { x: self.id, index }, self.requires_grad()))
    }

    /// Elementwise `f` with caller-supplied derivative `df`.
    pub fn map(&self, f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64) -> Var<'g> {
        let (out, deriv) = self.with_value(|t| {
            let out = Tensor::from_vec(t.shape(), t.data().iter().map(|&v| f(v)).collect()).expect("same shape");
            (out, t.data().iter().map(|&v| df(v)).collect())
        });
        self.push(out, Op::Elementwise { x: self.id, deriv }, self.requires_grad())
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn unary_values() {
        let g = Graph::new();
        let x = g.constant(t(&[3], &[-3.0, 0.0, 3.0]));
        assert_eq!(x.relu().data(), vec![0.0, 0.0, 3.0]);
        assert_eq!(x.sigmoid().data()[1], 0.5);
        let e = g.constant(t(&[2], &[0.0, 1.0])).exp().data();
        assert_eq!(e[0], 1.0);
        assert!((e[1] - std::f64::consts::E).abs() < 1e-15);
        assert_eq!(x.neg().data(), vec![3.0, -0.0, -3.0]);
    }

    #[test]
    fn log_names_offending_index() {
        let g = Graph::new();
        let x = g.constant(t(&[3], &[1.0, 2.0, 0.0]));
        match x.log() {
            Err(Error::Domain { index, .. }) => assert_eq!(index, 2),
            other => panic!("expected domain error, got {other:?}"),
        }
    }

    #[test]
    fn binary_values_and_errors() {
        let g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.constant(t(&[2], &[3.0, 4.0]));
        assert_eq!(a.mul(b).unwrap().data(), vec![3.0, 8.0]);
        let z = g.constant(Tensor::zeros(&[2]));
        assert_eq!(a.add(z).unwrap().data(), a.data());
        let ones = g.constant(t(&[2], &[1.0, 1.0]));
        let den = g.constant(t(&[2], &[0.0, 1.0]));
        assert!(matches!(ones.div(den), Err(Error::Numeric(_))));
        let c = g.constant(Tensor::zeros(&[3]));
        assert!(matches!(a.add(c), Err(Error::Shape(_))));
    }

    #[test]
    fn broadcast_leading_and_size_one_axes() {
        let g = Graph::new();
        let x = g.constant(t(&[2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]));
        let plane = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        assert_eq!(x.mul(plane).unwrap().data(), vec![1.0, 0.0, 0.0, 4.0, 5.0, 0.0, 0.0, 8.0]);
        let per_channel = g.constant(t(&[2, 1, 1], &[10.0, 100.0]));
        assert_eq!(
            x.mul(per_channel).unwrap().data(),
            vec![10.0, 20.0, 30.0, 40.0, 500.0, 600.0, 700.0, 800.0]
        );
        let s = g.constant(Tensor::scalar(2.0));
        assert_eq!(x.div(s).unwrap().data()[7], 4.0);
    }

    #[test]
    fn broadcast_gradient_sums_over_stretched_axes() {
        let g = Graph::new();
        let x = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let w = g.variable(t(&[3], &[1.0, 1.0, 1.0]));
        x.mul(w).unwrap().sum().backward().unwrap();
        assert_eq!(w.grad().unwrap().data(), &[5.0, 7.0, 9.0]);
    }

    #[test]
    fn matmul_hand_cases() {
        let g = Graph::new();
        let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = g.constant(t(&[2, 1], &[3.0, 4.0]));
        assert_eq!(a.matmul(b).unwrap().data(), vec![11.0]);
        let id = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let x = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        assert_eq!(id.matmul(x).unwrap().data(), x.data());
        assert!(matches!(x.matmul(x), Err(Error::Shape(_))));
    }

    #[test]
    fn conv_hand_cases() {
        let g = Graph::new();
        let x = g.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let ones = g.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let y = x.conv2d(ones, 1, 0).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 1]);
        assert_eq!(y.data(), vec![10.0]);
        let ident = g.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
        assert_eq!(x.conv2d(ident, 1, 0).unwrap().data(), x.data());
        let big = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        assert!(matches!(x.conv2d(big, 1, 0), Err(Error::Shape(_))));
        assert_eq!(x.conv2d(big, 1, 1).unwrap().data(), vec![10.0; 4]);
        let strided = g.constant(Tensor::full(&[1, 1, 1, 1], 2.0));
        assert_eq!(x.conv2d(strided, 2, 0).unwrap().data(), vec![2.0]);
    }

    #[test]
    fn maxpool_hand_cases_and_tie_rule() {
        let g = Graph::new();
        let x = g.variable(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(x.maxpool2d(2).unwrap().data(), vec![4.0]);
        assert_eq!(x.maxpool2d(1).unwrap().data(), x.data());
        let odd = g.constant(Tensor::zeros(&[1, 3, 2]));
        assert!(matches!(odd.maxpool2d(2), Err(Error::Shape(_))));

        let ties = g.variable(t(&[1, 2, 2], &[5.0, 5.0, 5.0, 5.0]));
        ties.maxpool2d(2).unwrap().sum().backward().unwrap();
        assert_eq!(ties.grad().unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn reduce_cases() {
        let g = Graph::new();
        let x = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(x.reduce(ReduceKind::Sum, &[0]).unwrap().data(), vec![4.0, 6.0]);
        assert_eq!(x.reduce(ReduceKind::Sum, &[1]).unwrap().data(), vec![3.0, 7.0]);
        let c = g.constant(Tensor::full(&[3, 4, 5], 2.5));
        assert_eq!(c.mean().item().unwrap(), 2.5);
        assert!(matches!(x.reduce(ReduceKind::Sum, &[2]), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_cases() {
        let g = Graph::new();
        let u = g.constant(Tensor::full(&[4], 1.7)).softmax(0).unwrap().data();
        assert!(u.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let s = g.constant(t(&[2], &[0.0, 3f64.ln()])).softmax(0).unwrap().data();
        assert!((s[0] - 0.25).abs() < 1e-12 && (s[1] - 0.75).abs() < 1e-12);
        let bad = g.constant(t(&[2], &[0.0, f64::INFINITY]));
        assert!(matches!(bad.softmax(0), Err(Error::Numeric(_))));
    }

    #[test]
    fn backward_square_and_sum() {
        let g = Graph::new();
        let x = g.variable(t(&[1], &[3.0]));
        x.mul(x).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[6.0]);

        let y = g.variable(Tensor::full(&[2, 3], 0.3));
        y.sum().backward().unwrap();
        assert_eq!(y.grad().unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn backward_accumulates_until_zeroed() {
        let g = Graph::new();
        let x = g.variable(t(&[2], &[1.0, 2.0]));
        let root = x.scale(3.0).sum();
        root.backward().unwrap();
        root.backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[6.0, 6.0]);
        g.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let g = Graph::new();
        let x = g.variable(t(&[2], &[1.0, 2.0]));
        assert!(matches!(x.backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_never_accumulate() {
        let g = Graph::new();
        let c = g.constant(t(&[2], &[1.0, 2.0]));
        let w = g.variable(t(&[2], &[3.0, 4.0]));
        c.mul(w).unwrap().sum().backward().unwrap();
        assert!(c.grad().is_none());
        assert_eq!(w.grad().unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn backward_to_stops_at_boundary() {
        let g = Graph::new();
        let w = g.variable(t(&[2], &[1.0, 2.0]));
        let a = w.scale(2.0);
        let y = a.mul(a).unwrap().sum();
        y.backward_to(a).unwrap();
        assert_eq!(a.grad().unwrap().data(), &[4.0, 8.0]);
        assert!(w.grad().is_none());
    }

    #[test]
    fn sigmoid_is_stable_for_large_magnitudes() {
        assert_eq!(sigmoid(-800.0), 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
    }
}
