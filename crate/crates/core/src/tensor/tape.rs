use std::cell::RefCell;
use std::rc::Rc;

use super::conv::{self, ConvGeom};
use super::{strides, Tensor};
use crate::error::{Error, Result};

/// How a binary op pairs its operands.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Pairing {
    Same,
    /// Left operand is a one-element tensor.
    LeftScalar,
    /// Right operand is a one-element tensor.
    RightScalar,
}

#[derive(Clone, Copy, Debug)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
    Min,
    Max,
}

#[derive(Clone, Copy, Debug)]
enum UnaryKind {
    Exp,
    Log,
    Relu,
    Sigmoid,
    Abs,
    Softplus,
    Neg,
    Scale(f64),
    AddConst(f64),
    Clamp(f64, f64),
}

/// Fixed sparse linear map `out[r] = Σ w · in[c]`, used for resampling.
#[derive(Clone, Debug, Default)]
pub struct SparseMap {
    out_len: usize,
    in_len: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    weights: Vec<f64>,
}

impl SparseMap {
    pub fn new(in_len: usize, out_len: usize) -> Self {
        Self {
            out_len,
            in_len,
            row_ptr: vec![0; out_len + 1],
            cols: Vec::new(),
            weights: Vec::new(),
        }
    }

    /// Builds from `(out, in, weight)` triplets; duplicate pairs are summed.
    pub fn from_triplets(
        in_len: usize,
        out_len: usize,
        mut triplets: Vec<(usize, usize, f64)>,
    ) -> Result<Self> {
        if let Some(&(r, c, _)) = triplets.iter().find(|&&(r, c, _)| r >= out_len || c >= in_len) {
            return Err(Error::arg(format!(
                "sparse entry ({r}, {c}) outside {out_len}x{in_len}"
            )));
        }
        triplets.sort_by_key(|a| (a.0, a.1));
        let mut map = Self::new(in_len, out_len);
        let mut counts = vec![0usize; out_len];
        let mut last: Option<(usize, usize)> = None;
        for (r, c, w) in triplets {
            if last == Some((r, c)) {
                *map.weights.last_mut().unwrap() += w;
                continue;
            }
            map.cols.push(c);
            map.weights.push(w);
            counts[r] += 1;
            last = Some((r, c));
        }
        for r in 0..out_len {
            map.row_ptr[r + 1] = map.row_ptr[r] + counts[r];
        }
        Ok(map)
    }

    pub fn in_len(&self) -> usize {
        self.in_len
    }

    pub fn out_len(&self) -> usize {
        self.out_len
    }

    pub fn apply(&self, input: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.out_len];
        for (r, o) in out.iter_mut().enumerate() {
            let (a, b) = (self.row_ptr[r], self.row_ptr[r + 1]);
            *o = self.cols[a..b]
                .iter()
                .zip(&self.weights[a..b])
                .map(|(&c, &w)| w * input[c])
                .sum();
        }
        out
    }

    fn apply_transpose(&self, grad: &[f64]) -> Vec<f64> {
        let mut gin = vec![0.0; self.in_len];
        for (r, &g) in grad.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                gin[self.cols[k]] += self.weights[k] * g;
            }
        }
        gin
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Binary(BinaryKind, Pairing, usize, usize),
    Unary(UnaryKind, usize),
    Softmax { input: usize, axis: usize },
    Sum { input: usize, map: Option<Rc<Vec<usize>>> },
    Mean { input: usize, map: Option<Rc<Vec<usize>>>, count: usize },
    L2Norm { input: usize, map: Option<Rc<Vec<usize>>> },
    Reshape(usize),
    Narrow { input: usize, axis: usize, start: usize },
    Concat { inputs: Vec<usize>, axis: usize },
    Gather { input: usize, indices: Rc<Vec<usize>> },
    Sparse { input: usize, map: Rc<SparseMap> },
    MatMul(usize, usize),
    Conv2d { input: usize, kernel: usize, geom: ConvGeom },
    ChannelBias { input: usize, bias: usize },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
///
/// Every node's inputs were pushed before it, so the node list is a
/// topological order by construction.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.value().shape())
            .finish()
    }
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros when no path reaches it.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(v.value().shape()),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A value that takes part in differentiation.
    pub fn leaf(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, true)
    }

    /// A value treated as constant by `backward`.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, false)
    }

    pub fn scalar(&self, x: f64) -> Var<'_> {
        self.constant(Tensor::scalar(x))
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        assert!(std::ptr::eq(loss.tape, self), "loss belongs to another tape");
        let nodes = self.nodes.borrow();
        let lv = &nodes[loss.id].value;
        if lv.numel() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if nodes[loss.id].requires_grad {
            grads[loss.id] = Some(vec![1.0]);
        }
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            propagate(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("grad shape")))
            .collect();
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, delta: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(delta) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn accumulate_scalar(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, delta: f64) {
    accumulate(grads, nodes, id, vec![delta; nodes[id].value.numel()]);
}

fn propagate(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Binary(kind, pairing, a, b) => {
            let (a, b) = (*a, *b);
            let av = &nodes[a].value;
            let bv = &nodes[b].value;
            let n = g.len();
            let ai = |i: usize| if *pairing == Pairing::LeftScalar { av.data[0] } else { av.data[i] };
            let bi = |i: usize| if *pairing == Pairing::RightScalar { bv.data[0] } else { bv.data[i] };
            let (da, db): (Vec<f64>, Vec<f64>) = match kind {
                BinaryKind::Add => (g.to_vec(), g.to_vec()),
                BinaryKind::Sub => (g.to_vec(), g.iter().map(|x| -x).collect()),
                BinaryKind::Mul => (
                    (0..n).map(|i| g[i] * bi(i)).collect(),
                    (0..n).map(|i| g[i] * ai(i)).collect(),
                ),
                BinaryKind::Div => (
                    (0..n).map(|i| g[i] / bi(i)).collect(),
                    (0..n).map(|i| -g[i] * ai(i) / (bi(i) * bi(i))).collect(),
                ),
                // ties route the gradient to the left operand
                BinaryKind::Min => (
                    (0..n).map(|i| if ai(i) <= bi(i) { g[i] } else { 0.0 }).collect(),
                    (0..n).map(|i| if ai(i) <= bi(i) { 0.0 } else { g[i] }).collect(),
                ),
                BinaryKind::Max => (
                    (0..n).map(|i| if ai(i) >= bi(i) { g[i] } else { 0.0 }).collect(),
                    (0..n).map(|i| if ai(i) >= bi(i) { 0.0 } else { g[i] }).collect(),
                ),
            };
            match pairing {
                Pairing::LeftScalar => accumulate_scalar(grads, nodes, a, da.iter().sum()),
                _ => accumulate(grads, nodes, a, da),
            }
            match pairing {
                Pairing::RightScalar => accumulate_scalar(grads, nodes, b, db.iter().sum()),
                _ => accumulate(grads, nodes, b, db),
            }
        }
        Op::Unary(kind, a) => {
            let x = &nodes[*a].value.data;
            let y = &out.data;
            let d: Vec<f64> = match *kind {
                UnaryKind::Exp => g.iter().zip(y).map(|(g, y)| g * y).collect(),
                UnaryKind::Log => g.iter().zip(x).map(|(g, x)| g / x).collect(),
                UnaryKind::Relu => g
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect(),
                UnaryKind::Sigmoid => g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect(),
                UnaryKind::Abs => g
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| if x > 0.0 { *g } else if x < 0.0 { -g } else { 0.0 })
                    .collect(),
                UnaryKind::Softplus => g.iter().zip(x).map(|(g, &x)| g * sigmoid(x)).collect(),
                UnaryKind::Neg => g.iter().map(|g| -g).collect(),
                UnaryKind::Scale(c) => g.iter().map(|g| g * c).collect(),
                UnaryKind::AddConst(_) => g.to_vec(),
                UnaryKind::Clamp(lo, hi) => g
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| if x > lo && x < hi { *g } else { 0.0 })
                    .collect(),
            };
            accumulate(grads, nodes, *a, d);
        }
        Op::Softmax { input, axis } => {
            let (outer, len, inner) = split_axis(out.shape(), *axis);
            let y = &out.data;
            let mut d = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let dot: f64 = (0..len).map(|k| g[base + k * inner] * y[base + k * inner]).sum();
                    for k in 0..len {
                        let j = base + k * inner;
                        d[j] = y[j] * (g[j] - dot);
                    }
                }
            }
            accumulate(grads, nodes, *input, d);
        }
        Op::Sum { input, map } => {
            let n = nodes[*input].value.numel();
            let d = match map {
                None => vec![g[0]; n],
                Some(m) => m.iter().map(|&o| g[o]).collect(),
            };
            accumulate(grads, nodes, *input, d);
        }
        Op::Mean { input, map, count } => {
            let n = nodes[*input].value.numel();
            let c = *count as f64;
            let d = match map {
                None => vec![g[0] / c; n],
                Some(m) => m.iter().map(|&o| g[o] / c).collect(),
            };
            accumulate(grads, nodes, *input, d);
        }
        Op::L2Norm { input, map } => {
            let x = &nodes[*input].value.data;
            let norms = &out.data;
            let d = x
                .iter()
                .enumerate()
                .map(|(i, &xi)| {
                    let o = map.as_ref().map_or(0, |m| m[i]);
                    if norms[o] > 0.0 {
                        g[o] * xi / norms[o]
                    } else {
                        0.0
                    }
                })
                .collect();
            accumulate(grads, nodes, *input, d);
        }
        Op::Reshape(a) => accumulate(grads, nodes, *a, g.to_vec()),
        Op::Narrow { input, axis, start } => {
            let ishape = nodes[*input].value.shape();
            let (outer, len, inner) = split_axis(ishape, *axis);
            let olen = out.shape()[*axis];
            let mut d = vec![0.0; nodes[*input].value.numel()];
            for o in 0..outer {
                let src = &g[o * olen * inner..][..olen * inner];
                d[(o * len + start) * inner..][..olen * inner].copy_from_slice(src);
            }
            accumulate(grads, nodes, *input, d);
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = split_axis(out.shape(), *axis);
            let mut offset = 0;
            for &inp in inputs {
                let len = nodes[inp].value.shape()[*axis];
                let mut d = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    d[o * len * inner..][..len * inner]
                        .copy_from_slice(&g[(o * total + offset) * inner..][..len * inner]);
                }
                accumulate(grads, nodes, inp, d);
                offset += len;
            }
        }
        Op::Gather { input, indices } => {
            let mut d = vec![0.0; nodes[*input].value.numel()];
            for (&ix, &gv) in indices.iter().zip(g) {
                d[ix] += gv;
            }
            accumulate(grads, nodes, *input, d);
        }
        Op::Sparse { input, map } => accumulate(grads, nodes, *input, map.apply_transpose(g)),
        Op::MatMul(a, b) => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let (m, k) = (av.shape[0], av.shape[1]);
            let n = bv.shape[1];
            if nodes[*a].requires_grad {
                // dA = G · Bᵀ
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let brow = &bv.data[p * n..][..n];
                        let grow = &g[i * n..][..n];
                        da[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                    }
                }
                accumulate(grads, nodes, *a, da);
            }
            if nodes[*b].requires_grad {
                // dB = Aᵀ · G
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let aval = av.data[i * k + p];
                        let grow = &g[i * n..][..n];
                        for (dst, gv) in db[p * n..][..n].iter_mut().zip(grow) {
                            *dst += aval * gv;
                        }
                    }
                }
                accumulate(grads, nodes, *b, db);
            }
        }
        Op::Conv2d { input, kernel, geom } => {
            if nodes[*input].requires_grad {
                let d = conv::backward_input(geom, g, &nodes[*kernel].value.data);
                accumulate(grads, nodes, *input, d);
            }
            if nodes[*kernel].requires_grad {
                let d = conv::backward_kernel(geom, g, &nodes[*input].value.data);
                accumulate(grads, nodes, *kernel, d);
            }
        }
        Op::ChannelBias { input, bias } => {
            accumulate(grads, nodes, *input, g.to_vec());
            if nodes[*bias].requires_grad {
                let s = out.shape();
                let (n, c) = (s[0], s[1]);
                let plane: usize = s[2..].iter().product();
                let mut db = vec![0.0; c];
                for ni in 0..n {
                    for (ci, dst) in db.iter_mut().enumerate() {
                        *dst += g[(ni * c + ci) * plane..][..plane].iter().sum::<f64>();
                    }
                }
                accumulate(grads, nodes, *bias, db);
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

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `(outer, len, inner)` sizes around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// For each input element, the flat index of the output element it reduces into.
fn reduce_map(shape: &[usize], axes: &[usize]) -> Result<(Vec<usize>, Rc<Vec<usize>>)> {
    for (i, &a) in axes.iter().enumerate() {
        if a >= shape.len() {
            return Err(Error::InvalidAxis {
                axis: a,
                shape: shape.to_vec(),
            });
        }
        if axes[..i].contains(&a) {
            return Err(Error::arg(format!("axis {a} listed twice")));
        }
    }
    let out_shape: Vec<usize> = (0..shape.len())
        .filter(|d| !axes.contains(d))
        .map(|d| shape[d])
        .collect();
    let out_strides = strides(&out_shape);
    // stride of each input dim in the output (0 for reduced dims)
    let mut dim_stride = vec![0; shape.len()];
    let mut k = 0;
    for (d, s) in dim_stride.iter_mut().enumerate() {
        if !axes.contains(&d) {
            *s = out_strides[k];
            k += 1;
        }
    }
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..n {
        map.push(idx.iter().zip(&dim_stride).map(|(i, s)| i * s).sum());
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok((out_shape, Rc::new(map)))
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    /// A constant copy of this value, cut off from the gradient.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'t> {
        self.tape.push(value, op, requires_grad)
    }

    fn binary(&self, other: Var<'t>, kind: BinaryKind, name: &'static str) -> Result<Var<'t>> {
        assert!(std::ptr::eq(self.tape, other.tape), "operands on different tapes");
        let a = self.value();
        let b = other.value();
        let pairing = if a.shape == b.shape {
            Pairing::Same
        } else if b.is_scalar() {
            Pairing::RightScalar
        } else if a.is_scalar() {
            Pairing::LeftScalar
        } else {
            return Err(Error::ShapeMismatch {
                op: name,
                left: a.shape.clone(),
                right: b.shape.clone(),
            });
        };
        if let BinaryKind::Div = kind {
            if b.data.contains(&0.0) {
                return Err(Error::Domain {
                    op: "div",
                    detail: "division by zero".into(),
                });
            }
        }
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
            BinaryKind::Min => x.min(y),
            BinaryKind::Max => x.max(y),
        };
        let (shape, data): (Vec<usize>, Vec<f64>) = match pairing {
            Pairing::Same => (
                a.shape.clone(),
                a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
            ),
            Pairing::RightScalar => (a.shape.clone(), a.data.iter().map(|&x| f(x, b.data[0])).collect()),
            Pairing::LeftScalar => (b.shape.clone(), b.data.iter().map(|&y| f(a.data[0], y)).collect()),
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.push(
            Tensor { shape, data },
            Op::Binary(kind, pairing, self.id, other.id),
            rg,
        ))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Add, "add")
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Sub, "sub")
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Mul, "mul")
    }

    pub fn div(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Div, "div")
    }

    /// Elementwise minimum; on ties the gradient goes to `self`.
    pub fn minimum(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Min, "minimum")
    }

    /// Elementwise maximum; on ties the gradient goes to `self`.
    pub fn maximum(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Max, "maximum")
    }

    fn unary(&self, kind: UnaryKind) -> Var<'t> {
        let v = self.value();
        let f = |x: f64| match kind {
            UnaryKind::Exp => x.exp(),
            UnaryKind::Log => x.ln(),
            UnaryKind::Relu => x.max(0.0),
            UnaryKind::Sigmoid => sigmoid(x),
            UnaryKind::Abs => x.abs(),
            UnaryKind::Softplus => softplus(x),
            UnaryKind::Neg => -x,
            UnaryKind::Scale(c) => c * x,
            UnaryKind::AddConst(c) => x + c,
            UnaryKind::Clamp(lo, hi) => x.clamp(lo, hi),
        };
        self.push(v.map(f), Op::Unary(kind, self.id), self.requires_grad())
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(UnaryKind::Exp)
    }

    /// Natural log; every element must be positive.
    pub fn log(&self) -> Result<Var<'t>> {
        if self.value().data.iter().any(|&v| v <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                detail: "non-positive argument".into(),
            });
        }
        Ok(self.unary(UnaryKind::Log))
    }

    /// `max(x, 0)`; the derivative at 0 is taken as 0.
    pub fn relu(&self) -> Var<'t> {
        self.unary(UnaryKind::Relu)
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(UnaryKind::Sigmoid)
    }

    /// `|x|`; the derivative at 0 is taken as 0.
    pub fn abs(&self) -> Var<'t> {
        self.unary(UnaryKind::Abs)
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&self) -> Var<'t> {
        self.unary(UnaryKind::Softplus)
    }

    pub fn neg(&self) -> Var<'t> {
        self.unary(UnaryKind::Neg)
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(UnaryKind::Scale(c))
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary(UnaryKind::AddConst(c))
    }

    /// Clamp into `[lo, hi]`; the gradient is zero wherever clamping applied.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(UnaryKind::Clamp(lo, hi))
    }

    pub fn square(&self) -> Var<'t> {
        self.mul(*self).expect("same shape")
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        let v = self.value();
        if axis >= v.shape.len() {
            return Err(Error::InvalidAxis {
                axis,
                shape: v.shape.clone(),
            });
        }
        let (outer, len, inner) = split_axis(&v.shape, axis);
        let mut y = vec![0.0; v.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mx = (0..len)
                    .map(|k| v.data[base + k * inner])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..len {
                    let e = (v.data[base + k * inner] - mx).exp();
                    y[base + k * inner] = e;
                    total += e;
                }
                for k in 0..len {
                    y[base + k * inner] /= total;
                }
            }
        }
        Ok(self.push(
            Tensor {
                shape: v.shape.clone(),
                data: y,
            },
            Op::Softmax {
                input: self.id,
                axis,
            },
            self.requires_grad(),
        ))
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum_all(&self) -> Var<'t> {
        let v = self.value();
        let s = v.data.iter().sum();
        self.push(
            Tensor::scalar(s),
            Op::Sum {
                input: self.id,
                map: None,
            },
            self.requires_grad(),
        )
    }

    /// Sum over `axes` (all axes when `None`); reduced axes are dropped.
    pub fn sum(&self, axes: Option<&[usize]>) -> Result<Var<'t>> {
        let Some(axes) = axes else {
            return Ok(self.sum_all());
        };
        let v = self.value();
        let (shape, map) = reduce_map(&v.shape, axes)?;
        if shape.is_empty() {
            return Ok(self.sum_all());
        }
        let mut data = vec![0.0; shape.iter().product()];
        for (x, &o) in v.data.iter().zip(map.iter()) {
            data[o] += x;
        }
        Ok(self.push(
            Tensor { shape, data },
            Op::Sum {
                input: self.id,
                map: Some(map),
            },
            self.requires_grad(),
        ))
    }

    pub fn mean(&self, axes: Option<&[usize]>) -> Result<Var<'t>> {
        let v = self.value();
        let (shape, map) = match axes {
            None => (Vec::new(), None),
            Some(axes) => {
                let (s, m) = reduce_map(&v.shape, axes)?;
                if s.is_empty() {
                    (s, None)
                } else {
                    (s, Some(m))
                }
            }
        };
        let out_n: usize = shape.iter().product();
        let count = v.numel() / out_n;
        let mut data = vec![0.0; out_n];
        match &map {
            None => data[0] = v.data.iter().sum(),
            Some(m) => {
                for (x, &o) in v.data.iter().zip(m.iter()) {
                    data[o] += x;
                }
            }
        }
        for d in &mut data {
            *d /= count as f64;
        }
        Ok(self.push(
            Tensor { shape, data },
            Op::Mean {
                input: self.id,
                map,
                count,
            },
            self.requires_grad(),
        ))
    }

    /// Euclidean norm over `axes` (all when `None`). The gradient at a zero
    /// norm is defined as zero.
    pub fn l2_norm(&self, axes: Option<&[usize]>) -> Result<Var<'t>> {
        let v = self.value();
        let (shape, map) = match axes {
            None => (Vec::new(), None),
            Some(axes) => {
                let (s, m) = reduce_map(&v.shape, axes)?;
                if s.is_empty() {
                    (s, None)
                } else {
                    (s, Some(m))
                }
            }
        };
        let mut data = vec![0.0; shape.iter().product()];
        for (i, x) in v.data.iter().enumerate() {
            let o = map.as_ref().map_or(0, |m| m[i]);
            data[o] += x * x;
        }
        for d in &mut data {
            *d = d.sqrt();
        }
        Ok(self.push(
            Tensor { shape, data },
            Op::L2Norm {
                input: self.id,
                map,
            },
            self.requires_grad(),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let t = self.value().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(self.id), self.requires_grad()))
    }

    /// Slice `len` entries of `axis` starting at `start`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let v = self.value();
        if axis >= v.shape.len() {
            return Err(Error::InvalidAxis {
                axis,
                shape: v.shape.clone(),
            });
        }
        if len == 0 || start + len > v.shape[axis] {
            return Err(Error::arg(format!(
                "narrow [{start}, {}) outside axis {axis} of {:?}",
                start + len,
                v.shape
            )));
        }
        let (outer, full, inner) = split_axis(&v.shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&v.data[(o * full + start) * inner..][..len * inner]);
        }
        let mut shape = v.shape.clone();
        shape[axis] = len;
        Ok(self.push(
            Tensor { shape, data },
            Op::Narrow {
                input: self.id,
                axis,
                start,
            },
            self.requires_grad(),
        ))
    }

    /// Flat elements at `indices`, as a 1-D tensor.
    pub fn gather(&self, indices: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        if indices.is_empty() {
            return Err(Error::arg("gather with no indices"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= v.numel()) {
            return Err(Error::arg(format!("gather index {bad} >= {}", v.numel())));
        }
        let data = indices.iter().map(|&i| v.data[i]).collect();
        Ok(self.push(
            Tensor {
                shape: vec![indices.len()],
                data,
            },
            Op::Gather {
                input: self.id,
                indices: Rc::new(indices.to_vec()),
            },
            self.requires_grad(),
        ))
    }

    /// Applies a fixed sparse linear map to the flattened value.
    pub fn sparse_apply(&self, map: Rc<SparseMap>, out_shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        if map.in_len != v.numel() || map.out_len != out_shape.iter().product::<usize>() {
            return Err(Error::arg(format!(
                "sparse map {}->{} does not fit {:?} -> {:?}",
                map.in_len,
                map.out_len,
                v.shape,
                out_shape
            )));
        }
        let data = map.apply(&v.data);
        Ok(self.push(
            Tensor::new(out_shape.to_vec(), data)?,
            Op::Sparse { input: self.id, map },
            self.requires_grad(),
        ))
    }

    /// `[m, k] × [k, n] → [m, n]`.
    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: a.shape.clone(),
                right: b.shape.clone(),
            });
        }
        let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut data[i * n..][..n];
            for p in 0..k {
                let av = a.data[i * k + p];
                for (dst, bv) in row.iter_mut().zip(&b.data[p * n..][..n]) {
                    *dst += av * bv;
                }
            }
        }
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data,
            },
            Op::MatMul(self.id, other.id),
            rg,
        ))
    }

    /// Cross-correlation of `[N, C, H, W]` with `[O, C, kh, kw]`.
    pub fn conv2d(&self, kernel: Var<'t>, stride: usize, padding: usize) -> Result<Var<'t>> {
        let x = self.value();
        let k = kernel.value();
        if x.shape.len() != 4 || k.shape.len() != 4 {
            return Err(Error::arg(format!(
                "conv2d expects 4-D input and kernel, got {:?} and {:?}",
                x.shape, k.shape
            )));
        }
        if x.shape[1] != k.shape[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d (channels)",
                left: x.shape.clone(),
                right: k.shape.clone(),
            });
        }
        if stride == 0 {
            return Err(Error::arg("conv2d stride must be positive"));
        }
        let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
        let (o, kh, kw) = (k.shape[0], k.shape[2], k.shape[3]);
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::ShapeMismatch {
                op: "conv2d (kernel larger than padded input)",
                left: x.shape.clone(),
                right: k.shape.clone(),
            });
        }
        let geom = ConvGeom {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            stride,
            pad: padding,
            ho: (h + 2 * padding - kh) / stride + 1,
            wo: (w + 2 * padding - kw) / stride + 1,
        };
        let data = conv::forward(&geom, &x.data, &k.data);
        let rg = self.requires_grad() || kernel.requires_grad();
        Ok(self.push(
            Tensor {
                shape: vec![n, o, geom.ho, geom.wo],
                data,
            },
            Op::Conv2d {
                input: self.id,
                kernel: kernel.id,
                geom,
            },
            rg,
        ))
    }

    /// Adds `bias[c]` to every element of channel `c` of an `[N, C, ...]` tensor.
    pub fn add_channel_bias(&self, bias: Var<'t>) -> Result<Var<'t>> {
        let x = self.value();
        let b = bias.value();
        if x.shape.len() < 2 || b.shape != [x.shape[1]] {
            return Err(Error::ShapeMismatch {
                op: "add_channel_bias",
                left: x.shape.clone(),
                right: b.shape.clone(),
            });
        }
        let c = x.shape[1];
        let plane: usize = x.shape[2..].iter().product();
        let mut data = x.data.clone();
        for (i, chunk) in data.chunks_mut(plane).enumerate() {
            let bv = b.data[i % c];
            for v in chunk {
                *v += bv;
            }
        }
        let rg = self.requires_grad() || bias.requires_grad();
        Ok(self.push(
            Tensor {
                shape: x.shape.clone(),
                data,
            },
            Op::ChannelBias {
                input: self.id,
                bias: bias.id,
            },
            rg,
        ))
    }
}

/// Concatenate along `axis`; all other dimensions must agree.
pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::arg("concat of zero tensors"))?;
    let tape = first.tape;
    let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
    let s0 = values[0].shape.clone();
    if axis >= s0.len() {
        return Err(Error::InvalidAxis { axis, shape: s0 });
    }
    for v in &values[1..] {
        let ok = v.shape.len() == s0.len()
            && v.shape.iter().zip(&s0).enumerate().all(|(d, (a, b))| d == axis || a == b);
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "concat",
                left: s0.clone(),
                right: v.shape.clone(),
            });
        }
    }
    let total: usize = values.iter().map(|v| v.shape[axis]).sum();
    let (outer, _, inner) = split_axis(&s0, axis);
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for v in &values {
            let len = v.shape[axis];
            data.extend_from_slice(&v.data[o * len * inner..][..len * inner]);
        }
    }
    let mut shape = s0;
    shape[axis] = total;
    let rg = parts.iter().any(|p| p.requires_grad());
    Ok(tape.push(
        Tensor { shape, data },
        Op::Concat {
            inputs: parts.iter().map(|p| p.id).collect(),
            axis,
        },
        rg,
    ))
}

impl Tape {
    /// See [`concat`].
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        concat(parts, axis)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_vec(v.to_vec())
    }

    #[test]
    fn add_and_scalar_pairing() {
        let tape = Tape::new();
        let a = tape.constant(t(&[1.0, 2.0]));
        let b = tape.constant(t(&[3.0, 4.0]));
        assert_eq!(a.add(b).unwrap().value().data(), &[4.0, 6.0]);
        let s = tape.scalar(10.0);
        assert_eq!(s.sub(a).unwrap().value().data(), &[9.0, 8.0]);
        let c = tape.constant(t(&[1.0, 2.0, 3.0]));
        let err = a.add(c).unwrap_err().to_string();
        assert!(err.contains("[2]") && err.contains("[3]"), "{err}");
    }

    #[test]
    fn mul_by_zero_has_zero_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[1.5, -2.0, 3.0]));
        let y = x.mul(tape.scalar(0.0)).unwrap();
        assert_eq!(y.value().data(), &[0.0, 0.0, 0.0]);
        let g = tape.backward(y.sum_all()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let y = x.sigmoid();
        assert_eq!(y.value().item(), 0.5);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 0.25);
    }

    #[test]
    fn domain_errors() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1.0, 0.0]));
        assert!(matches!(x.log(), Err(Error::Domain { op: "log", .. })));
        let one = tape.constant(t(&[1.0, 1.0]));
        assert!(matches!(one.div(x), Err(Error::Domain { op: "div", .. })));
    }

    #[test]
    fn softmax_basic() {
        let tape = Tape::new();
        let x = tape.constant(t(&[0.0, 0.0]));
        assert_eq!(x.softmax(0).unwrap().value().data(), &[0.5, 0.5]);
        let big = tape.constant(t(&[1000.0, 0.0]));
        let y = big.softmax(0).unwrap().value();
        assert!(y.all_finite());
        assert_eq!(y.data()[0], 1.0);
        assert!(y.data()[1] < 1e-300);
        assert!(x.softmax(1).is_err());
    }

    #[test]
    fn reductions() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1.0, 2.0, 3.0]));
        assert_eq!(x.sum_all().value().item(), 6.0);
        let v = tape.constant(t(&[3.0, 4.0]));
        assert_eq!(v.l2_norm(None).unwrap().value().item(), 5.0);
        let m = tape.constant(Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        assert_eq!(m.sum(Some(&[0])).unwrap().value().data(), &[5., 7., 9.]);
        assert_eq!(m.mean(Some(&[1])).unwrap().value().data(), &[2., 5.]);
        assert!(m.sum(Some(&[2])).is_err());
        assert!(m.sum(Some(&[0, 0])).is_err());
    }

    #[test]
    fn l2_norm_gradient_at_zero_is_zero() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[0.0, 0.0]));
        let g = tape.backward(x.l2_norm(None).unwrap()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_examples() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[1.0, 2.0, 3.0]));
        let g = tape.backward(x.sum_all()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let tape = Tape::new();
        let x = tape.leaf(t(&[1.0, -2.0]));
        let g = tape.backward(x.square().sum_all()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, -4.0]);

        assert!(matches!(tape.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn backward_twice_overwrites() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[0.3, -0.7]));
        let loss = x.exp().sum_all();
        let g1 = tape.backward(loss).unwrap().get_or_zeros(x);
        let g2 = tape.backward(loss).unwrap().get_or_zeros(x);
        assert_eq!(g1, g2);
    }

    #[test]
    fn conv_sum_and_identity() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let k = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = x.conv2d(k, 1, 0).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 1, 1]);
        assert_eq!(y.value().item(), 9.0);

        let img = Tensor::new(vec![1, 1, 4, 5], (0..20).map(|v| v as f64 * 0.5).collect()).unwrap();
        let x = tape.constant(img.clone());
        let mut kd = vec![0.0; 9];
        kd[4] = 1.0;
        let k = tape.constant(Tensor::new(vec![1, 1, 3, 3], kd).unwrap());
        assert_eq!(*x.conv2d(k, 1, 1).unwrap().value(), img);

        let bad = tape.constant(Tensor::zeros(&[1, 2, 3, 3]));
        assert!(matches!(x.conv2d(bad, 1, 1), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn narrow_concat_gather() {
        let tape = Tape::new();
        let m = tape.leaf(Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let cols = m.narrow(1, 1, 2).unwrap();
        assert_eq!(cols.value().data(), &[2., 3., 5., 6.]);
        let back = concat(&[m.narrow(1, 0, 1).unwrap(), cols], 1).unwrap();
        assert_eq!(back.value().data(), m.value().data());
        let picked = m.gather(&[5, 0, 5]).unwrap();
        assert_eq!(picked.value().data(), &[6., 1., 6.]);
        let g = tape.backward(picked.sum_all()).unwrap();
        assert_eq!(g.get(m).unwrap().data(), &[1., 0., 0., 0., 0., 2.]);
    }

    #[test]
    fn sparse_map_sums_duplicates() {
        let map = SparseMap::from_triplets(3, 2, vec![(0, 0, 0.5), (0, 0, 0.25), (1, 2, 2.0)]).unwrap();
        assert_eq!(map.apply(&[4.0, 9.0, 1.0]), vec![3.0, 2.0]);
        assert!(SparseMap::from_triplets(3, 2, vec![(2, 0, 1.0)]).is_err());
    }
}
