//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles in
//! topological (creation) order. [`Graph::backward`] walks the tape once in
//! reverse, so each node is visited exactly once and fan-out contributions are
//! summed. Graphs are single-threaded and short-lived: build one per training
//! step or per sampler step and drop it afterwards.

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Geometry of an NHWC patch extraction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn cols(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        trans_b: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: usize,
        b: usize,
        trans_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBcast(usize, usize),
    MulBcast(usize, usize),
    AddMid {
        x: usize,
        y: usize,
        inner: usize,
    },
    Scale(usize, f64),
    AddScalar(usize),
    MulConst(usize, Vec<f64>),
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(usize),
    Silu(usize),
    Tanh(usize),
    Sum(usize),
    Mean(usize),
    SumLast(usize),
    MeanAxis1 {
        x: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Reshape(usize),
    Permute {
        x: usize,
        axes: Vec<usize>,
    },
    ConcatLast {
        a: usize,
        b: usize,
        wa: usize,
        wb: usize,
    },
    Diag(usize),
    SetDiag(usize, usize),
    SliceLast {
        x: usize,
        start: usize,
        width: usize,
    },
    L2Normalize {
        x: usize,
        norms: Vec<f64>,
    },
    Im2Col {
        x: usize,
        geom: ConvGeom,
    },
    Upsample2x {
        x: usize,
        batch: usize,
        height: usize,
        width: usize,
        channels: usize,
    },
    Gather {
        x: usize,
        index: Vec<Vec<usize>>,
        len: usize,
        width: usize,
    },
    Scatter {
        visible: usize,
        fill: usize,
        index: Vec<Vec<usize>>,
        len: usize,
        width: usize,
    },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    needs_grad: bool,
    param: Option<ParamId>,
}

#[derive(Default)]
struct Tape {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, usize>,
    ops: u64,
}

/// A recorded computation.
pub struct Graph {
    tape: RefCell<Tape>,
    recording: bool,
    frozen: HashSet<ParamId>,
}

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    id: usize,
    g: &'g Graph,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients of a scalar with respect to every node of its graph.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var<'_>) -> Option<&[f64]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            tape: RefCell::new(Tape::default()),
            recording: true,
            frozen: HashSet::new(),
        }
    }

    /// A graph that evaluates values only; `backward` is unavailable.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    /// Parameters in `frozen` are bound as constants: no gradient flows to
    /// them and no backward work is spent on their producers.
    pub fn with_frozen(mut self, frozen: impl IntoIterator<Item = ParamId>) -> Self {
        self.frozen.extend(frozen);
        self
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.tape.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, data: Vec<f64>, op: Op, needs_grad: bool) -> Result<Var<'_>> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let mut tape = self.tape.borrow_mut();
        tape.ops += 1;
        // every op is scanned in debug builds; release builds sample
        if (cfg!(debug_assertions) || tape.ops.is_multiple_of(8)) && data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: op_name(&op).to_string(),
            });
        }
        let needs_grad = needs_grad && self.recording;
        let op = if needs_grad { op } else { Op::Leaf };
        let id = tape.nodes.len();
        tape.nodes.push(Node {
            shape,
            data,
            op,
            needs_grad,
            param: None,
        });
        Ok(Var { id, g: self })
    }

    /// Records a constant (no gradient).
    pub fn constant(&self, t: &Tensor) -> Var<'_> {
        self.leaf(t.shape().to_vec(), t.data().to_vec(), false)
    }

    pub fn constant_vec(&self, shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Var<'_>> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape {
                op: "constant_vec",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(self.leaf(shape, data, false))
    }

    /// Records a differentiable input that is not a stored parameter.
    pub fn input(&self, t: &Tensor) -> Var<'_> {
        self.leaf(t.shape().to_vec(), t.data().to_vec(), true)
    }

    fn leaf(&self, shape: Vec<usize>, data: Vec<f64>, needs_grad: bool) -> Var<'_> {
        let mut tape = self.tape.borrow_mut();
        let id = tape.nodes.len();
        tape.nodes.push(Node {
            shape,
            data,
            op: Op::Leaf,
            needs_grad: needs_grad && self.recording,
            param: None,
        });
        Var { id, g: self }
    }

    /// Binds a stored parameter. Repeated binds of the same id return the
    /// same node, so weight sharing accumulates into one gradient.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        if let Some(&node) = self.tape.borrow().bound.get(&id) {
            return Var { id: node, g: self };
        }
        let t = store.get(id);
        let trainable = !self.frozen.contains(&id);
        let v = self.leaf(t.shape().to_vec(), t.data().to_vec(), trainable);
        let mut tape = self.tape.borrow_mut();
        tape.nodes[v.id].param = Some(id);
        tape.bound.insert(id, v.id);
        v
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !self.recording {
            return Err(Error::contract("backward on an inference graph"));
        }
        let tape = self.tape.borrow();
        let nodes = &tape.nodes;
        if nodes[loss.id].data.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(gy) = grads[id].take() else { continue };
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(gy);
                continue;
            }
            backprop(nodes, node, &gy, &mut grads);
            // intermediate gradients are not retained
        }
        Ok(Gradients { grads })
    }

    /// Runs `backward` and adds every bound parameter's gradient into `store`.
    pub fn backward_into(&self, loss: Var<'_>, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward(loss)?;
        let tape = self.tape.borrow();
        for (&pid, &node) in tape.bound.iter() {
            if let Some(g) = grads.grads.get(node).and_then(|g| g.as_deref()) {
                store.get_mut(pid).accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    fn with_node<T>(&self, id: usize, f: impl FnOnce(&Node) -> T) -> T {
        f(&self.tape.borrow().nodes[id])
    }

    fn with_nodes<T>(&self, a: usize, b: usize, f: impl FnOnce(&Node, &Node) -> T) -> T {
        let tape = self.tape.borrow();
        f(&tape.nodes[a], &tape.nodes[b])
    }

    fn needs(&self, id: usize) -> bool {
        self.tape.borrow().nodes[id].needs_grad
    }
}

fn acc(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, g: Vec<f64>) {
    if !nodes[id].needs_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => existing.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul { .. } => "matmul",
        Op::BatchMatMul { .. } => "bmm",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AddBcast(..) => "add_bcast",
        Op::MulBcast(..) => "mul_bcast",
        Op::AddMid { .. } => "add_mid",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::MulConst(..) => "mul_const",
        Op::Softmax(..) => "softmax",
        Op::LogSoftmax(..) => "log_softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Gelu(..) => "gelu",
        Op::Silu(..) => "silu",
        Op::Tanh(..) => "tanh",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::SumLast(..) => "sum_last",
        Op::MeanAxis1 { .. } => "mean_axis1",
        Op::Reshape(..) => "reshape",
        Op::Permute { .. } => "permute",
        Op::ConcatLast { .. } => "concat_last",
        Op::Diag(..) => "diag",
        Op::SetDiag(..) => "set_diag",
        Op::SliceLast { .. } => "slice_last",
        Op::L2Normalize { .. } => "l2_normalize",
        Op::Im2Col { .. } => "im2col",
        Op::Upsample2x { .. } => "upsample2x",
        Op::Gather { .. } => "gather",
        Op::Scatter { .. } => "scatter",
    }
}

/// `C = A·B (+ C when accumulate)`, with `A` logically `[m, k]` and `B`
/// logically `[k, n]`; the transpose flags describe the stored layout.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths match the logical dimensions and strides above.
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

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn permute_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Copies `src` (shape `shape`) into the layout given by `axes`; returns the
/// mapping as a flat vector where `out[o] = src[map[o]]`.
fn permute_map(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let in_strides = permute_strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..n {
        let src: usize = idx
            .iter()
            .zip(axes)
            .map(|(&i, &a)| i * in_strides[a])
            .sum();
        map.push(src);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}

fn im2col_index(geom: &ConvGeom) -> Vec<Option<usize>> {
    let (ho, wo) = (geom.out_height(), geom.out_width());
    let cols = geom.cols();
    let mut map = Vec::with_capacity(geom.batch * ho * wo * cols);
    for b in 0..geom.batch {
        for oy in 0..ho {
            for ox in 0..wo {
                for ky in 0..geom.kernel {
                    for kx in 0..geom.kernel {
                        let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                        let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                        let inside = iy >= 0
                            && ix >= 0
                            && (iy as usize) < geom.height
                            && (ix as usize) < geom.width;
                        for c in 0..geom.channels {
                            map.push(inside.then(|| {
                                ((b * geom.height + iy as usize) * geom.width + ix as usize)
                                    * geom.channels
                                    + c
                            }));
                        }
                    }
                }
            }
        }
    }
    map
}

fn backprop(nodes: &[Node], node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |id: usize| nodes[id].data.as_slice();
    let needs = |id: usize| nodes[id].needs_grad;
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul {
            a,
            b,
            trans_b,
            m,
            k,
            n,
        } => {
            if needs(a) {
                let mut ga = vec![0.0; m * k];
                // dA = dC · Bᵀ
                gemm(m, n, k, gy, false, val(b), !trans_b, &mut ga, false);
                acc(nodes, grads, a, ga);
            }
            if needs(b) {
                let mut gb = vec![0.0; k * n];
                if trans_b {
                    // B stored [n, k]: dB = dCᵀ · A
                    gemm(n, m, k, gy, true, val(a), false, &mut gb, false);
                } else {
                    gemm(k, m, n, val(a), true, gy, false, &mut gb, false);
                }
                acc(nodes, grads, b, gb);
            }
        }
        &Op::BatchMatMul {
            a,
            b,
            trans_b,
            batch,
            m,
            k,
            n,
        } => {
            let (av, bv) = (val(a), val(b));
            if needs(a) {
                let mut ga = vec![0.0; batch * m * k];
                for i in 0..batch {
                    gemm(
                        m,
                        n,
                        k,
                        &gy[i * m * n..(i + 1) * m * n],
                        false,
                        &bv[i * k * n..(i + 1) * k * n],
                        !trans_b,
                        &mut ga[i * m * k..(i + 1) * m * k],
                        false,
                    );
                }
                acc(nodes, grads, a, ga);
            }
            if needs(b) {
                let mut gb = vec![0.0; batch * k * n];
                for i in 0..batch {
                    let gyi = &gy[i * m * n..(i + 1) * m * n];
                    let ai = &av[i * m * k..(i + 1) * m * k];
                    let gbi = &mut gb[i * k * n..(i + 1) * k * n];
                    if trans_b {
                        gemm(n, m, k, gyi, true, ai, false, gbi, false);
                    } else {
                        gemm(k, m, n, ai, true, gyi, false, gbi, false);
                    }
                }
                acc(nodes, grads, b, gb);
            }
        }
        &Op::Add(a, b) => {
            acc(nodes, grads, a, gy.to_vec());
            acc(nodes, grads, b, gy.to_vec());
        }
        &Op::Sub(a, b) => {
            acc(nodes, grads, a, gy.to_vec());
            acc(nodes, grads, b, gy.iter().map(|g| -g).collect());
        }
        &Op::Mul(a, b) => {
            let (av, bv) = (val(a), val(b));
            if needs(a) {
                acc(nodes, grads, a, gy.iter().zip(bv).map(|(g, y)| g * y).collect());
            }
            if needs(b) {
                acc(nodes, grads, b, gy.iter().zip(av).map(|(g, x)| g * x).collect());
            }
        }
        &Op::AddBcast(x, b) => {
            acc(nodes, grads, x, gy.to_vec());
            if needs(b) {
                let w = nodes[b].data.len();
                let mut gb = vec![0.0; w];
                for chunk in gy.chunks_exact(w) {
                    gb.iter_mut().zip(chunk).for_each(|(a, g)| *a += g);
                }
                acc(nodes, grads, b, gb);
            }
        }
        &Op::MulBcast(x, b) => {
            let (xv, bv) = (val(x), val(b));
            let w = bv.len();
            if needs(x) {
                let gx = gy
                    .chunks_exact(w)
                    .flat_map(|c| c.iter().zip(bv).map(|(g, s)| g * s))
                    .collect();
                acc(nodes, grads, x, gx);
            }
            if needs(b) {
                let mut gb = vec![0.0; w];
                for (gc, xc) in gy.chunks_exact(w).zip(xv.chunks_exact(w)) {
                    for j in 0..w {
                        gb[j] += gc[j] * xc[j];
                    }
                }
                acc(nodes, grads, b, gb);
            }
        }
        &Op::AddMid { x, y, inner } => {
            acc(nodes, grads, x, gy.to_vec());
            if needs(y) {
                let ylen = nodes[y].data.len();
                let outer = ylen / inner;
                let mid = gy.len() / ylen;
                let mut g = vec![0.0; ylen];
                for o in 0..outer {
                    for m in 0..mid {
                        let base = (o * mid + m) * inner;
                        for c in 0..inner {
                            g[o * inner + c] += gy[base + c];
                        }
                    }
                }
                acc(nodes, grads, y, g);
            }
        }
        &Op::Scale(x, s) => acc(nodes, grads, x, gy.iter().map(|g| g * s).collect()),
        &Op::AddScalar(x) => acc(nodes, grads, x, gy.to_vec()),
        Op::MulConst(x, c) => acc(nodes, grads, *x, gy.iter().zip(c).map(|(g, c)| g * c).collect()),
        &Op::Softmax(x) => {
            let w = *node.shape.last().unwrap_or(&1);
            let mut gx = Vec::with_capacity(gy.len());
            for (gc, yc) in gy.chunks_exact(w).zip(node.data.chunks_exact(w)) {
                let dot: f64 = gc.iter().zip(yc).map(|(g, y)| g * y).sum();
                gx.extend(gc.iter().zip(yc).map(|(g, y)| y * (g - dot)));
            }
            acc(nodes, grads, x, gx);
        }
        &Op::LogSoftmax(x) => {
            let w = *node.shape.last().unwrap_or(&1);
            let mut gx = Vec::with_capacity(gy.len());
            for (gc, yc) in gy.chunks_exact(w).zip(node.data.chunks_exact(w)) {
                let total: f64 = gc.iter().sum();
                gx.extend(gc.iter().zip(yc).map(|(g, y)| g - y.exp() * total));
            }
            acc(nodes, grads, x, gx);
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let w = nodes[*gamma].data.len();
            let gv = val(*gamma);
            let mut gx = Vec::with_capacity(gy.len());
            let mut ggamma = vec![0.0; w];
            let mut gbeta = vec![0.0; w];
            for (r, (gc, hc)) in gy.chunks_exact(w).zip(xhat.chunks_exact(w)).enumerate() {
                let mut mean_d = 0.0;
                let mut mean_dh = 0.0;
                for j in 0..w {
                    ggamma[j] += gc[j] * hc[j];
                    gbeta[j] += gc[j];
                    let d = gc[j] * gv[j];
                    mean_d += d;
                    mean_dh += d * hc[j];
                }
                mean_d /= w as f64;
                mean_dh /= w as f64;
                let s = rstd[r];
                gx.extend((0..w).map(|j| s * (gc[j] * gv[j] - mean_d - hc[j] * mean_dh)));
            }
            acc(nodes, grads, *x, gx);
            acc(nodes, grads, *gamma, ggamma);
            acc(nodes, grads, *beta, gbeta);
        }
        &Op::Gelu(x) => {
            let g = gy.iter().zip(val(x)).map(|(g, &v)| g * gelu_grad(v)).collect();
            acc(nodes, grads, x, g);
        }
        &Op::Silu(x) => {
            let g = gy
                .iter()
                .zip(val(x))
                .map(|(g, &v)| {
                    let s = sigmoid(v);
                    g * (s + v * s * (1.0 - s))
                })
                .collect();
            acc(nodes, grads, x, g);
        }
        &Op::Tanh(x) => {
            let g = gy.iter().zip(&node.data).map(|(g, y)| g * (1.0 - y * y)).collect();
            acc(nodes, grads, x, g);
        }
        &Op::Sum(x) => acc(nodes, grads, x, vec![gy[0]; nodes[x].data.len()]),
        &Op::Mean(x) => {
            let n = nodes[x].data.len();
            acc(nodes, grads, x, vec![gy[0] / n as f64; n]);
        }
        &Op::SumLast(x) => {
            let w = *nodes[x].shape.last().unwrap_or(&1);
            let g = gy.iter().flat_map(|&g| std::iter::repeat_n(g, w)).collect();
            acc(nodes, grads, x, g);
        }
        &Op::MeanAxis1 {
            x,
            outer,
            len,
            inner,
        } => {
            let mut g = vec![0.0; outer * len * inner];
            let s = 1.0 / len as f64;
            for o in 0..outer {
                for t in 0..len {
                    for c in 0..inner {
                        g[(o * len + t) * inner + c] = gy[o * inner + c] * s;
                    }
                }
            }
            acc(nodes, grads, x, g);
        }
        &Op::Reshape(x) => acc(nodes, grads, x, gy.to_vec()),
        Op::Permute { x, axes } => {
            let map = permute_map(&nodes[*x].shape, axes);
            let mut g = vec![0.0; gy.len()];
            for (o, &src) in map.iter().enumerate() {
                g[src] = gy[o];
            }
            acc(nodes, grads, *x, g);
        }
        &Op::ConcatLast { a, b, wa, wb } => {
            let w = wa + wb;
            if needs(a) {
                let g = gy.chunks_exact(w).flat_map(|c| c[..wa].iter().copied()).collect();
                acc(nodes, grads, a, g);
            }
            if needs(b) {
                let g = gy.chunks_exact(w).flat_map(|c| c[wa..].iter().copied()).collect();
                acc(nodes, grads, b, g);
            }
        }
        &Op::Diag(x) => {
            let n = gy.len();
            let mut g = vec![0.0; n * n];
            for i in 0..n {
                g[i * n + i] = gy[i];
            }
            acc(nodes, grads, x, g);
        }
        &Op::SetDiag(s, d) => {
            let n = nodes[d].data.len();
            if needs(s) {
                let mut g = gy.to_vec();
                for i in 0..n {
                    g[i * n + i] = 0.0;
                }
                acc(nodes, grads, s, g);
            }
            if needs(d) {
                acc(nodes, grads, d, (0..n).map(|i| gy[i * n + i]).collect());
            }
        }
        &Op::SliceLast { x, start, width } => {
            let w = *nodes[x].shape.last().unwrap_or(&1);
            let mut g = vec![0.0; nodes[x].data.len()];
            for (dst, src) in g.chunks_exact_mut(w).zip(gy.chunks_exact(width)) {
                dst[start..start + width].copy_from_slice(src);
            }
            acc(nodes, grads, x, g);
        }
        Op::L2Normalize { x, norms } => {
            let w = *node.shape.last().unwrap_or(&1);
            let mut g = Vec::with_capacity(gy.len());
            for ((gc, yc), n) in gy.chunks_exact(w).zip(node.data.chunks_exact(w)).zip(norms) {
                let dot: f64 = gc.iter().zip(yc).map(|(a, b)| a * b).sum();
                g.extend(gc.iter().zip(yc).map(|(a, y)| (a - y * dot) / n));
            }
            acc(nodes, grads, *x, g);
        }
        Op::Im2Col { x, geom } => {
            let map = im2col_index(geom);
            let mut g = vec![0.0; nodes[*x].data.len()];
            for (o, src) in map.iter().enumerate() {
                if let Some(s) = src {
                    g[*s] += gy[o];
                }
            }
            acc(nodes, grads, *x, g);
        }
        &Op::Upsample2x {
            x,
            batch,
            height,
            width,
            channels,
        } => {
            let mut g = vec![0.0; batch * height * width * channels];
            let (oh, ow) = (2 * height, 2 * width);
            for b in 0..batch {
                for y in 0..oh {
                    for xx in 0..ow {
                        let src = ((b * height + y / 2) * width + xx / 2) * channels;
                        let dst = ((b * oh + y) * ow + xx) * channels;
                        for c in 0..channels {
                            g[src + c] += gy[dst + c];
                        }
                    }
                }
            }
            acc(nodes, grads, x, g);
        }
        Op::Gather {
            x,
            index,
            len,
            width,
        } => {
            let mut g = vec![0.0; nodes[*x].data.len()];
            let kept = index.first().map_or(0, |r| r.len());
            for (b, row) in index.iter().enumerate() {
                for (j, &t) in row.iter().enumerate() {
                    let src = (b * len + t) * width;
                    let dst = (b * kept + j) * width;
                    for c in 0..*width {
                        g[src + c] += gy[dst + c];
                    }
                }
            }
            acc(nodes, grads, *x, g);
        }
        Op::Scatter {
            visible,
            fill,
            index,
            len,
            width,
        } => {
            let kept = index.first().map_or(0, |r| r.len());
            let mut gv = vec![0.0; index.len() * kept * width];
            let mut gf = vec![0.0; *width];
            for (b, row) in index.iter().enumerate() {
                let mut is_visible = vec![false; *len];
                for (j, &t) in row.iter().enumerate() {
                    is_visible[t] = true;
                    let src = (b * len + t) * width;
                    let dst = (b * kept + j) * width;
                    gv[dst..dst + width].copy_from_slice(&gy[src..src + width]);
                }
                for (t, vis) in is_visible.iter().enumerate() {
                    if !vis {
                        let src = (b * len + t) * width;
                        for c in 0..*width {
                            gf[c] += gy[src + c];
                        }
                    }
                }
            }
            acc(nodes, grads, *visible, gv);
            acc(nodes, grads, *fill, gf);
        }
    }
}

// Fallible ops return `Result`, so the std operator traits do not fit.
#[allow(clippy::should_implement_trait)]
impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.g
    }

    pub fn shape(&self) -> Vec<usize> {
        self.g.with_node(self.id, |n| n.shape.clone())
    }

    pub fn numel(&self) -> usize {
        self.g.with_node(self.id, |n| n.data.len())
    }

    pub fn value(&self) -> Tensor {
        self.g.with_node(self.id, |n| {
            Tensor::new(n.shape.clone(), n.data.clone()).expect("node shape is consistent")
        })
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.g.with_node(self.id, |n| n.data.clone())
    }

    pub fn item(&self) -> Result<f64> {
        self.g.with_node(self.id, |n| {
            if n.data.len() == 1 {
                Ok(n.data[0])
            } else {
                Err(Error::contract(format!("item() on shape {:?}", n.shape)))
            }
        })
    }

    fn unary(
        self,
        f: impl FnOnce(&Node) -> Result<(Vec<usize>, Vec<f64>, Op)>,
    ) -> Result<Var<'g>> {
        let (shape, data, op) = self.g.with_node(self.id, f)?;
        self.g.push(shape, data, op, self.g.needs(self.id))
    }

    fn same_shape(self, other: Var<'g>, op: &'static str) -> Result<()> {
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(Error::Shape { op, lhs: a, rhs: b });
        }
        Ok(())
    }

    fn binary(
        self,
        other: Var<'g>,
        f: impl FnOnce(&Node, &Node) -> Result<(Vec<usize>, Vec<f64>, Op)>,
    ) -> Result<Var<'g>> {
        let (shape, data, op) = self.g.with_nodes(self.id, other.id, f)?;
        let needs = self.g.needs(self.id) || self.g.needs(other.id);
        self.g.push(shape, data, op, needs)
    }

    /// `self · other` where `self` is `[.., k]` and `other` is `[k, n]`.
    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.matmul_impl(other, false)
    }

    /// `self · otherᵀ` where `self` is `[.., k]` and `other` is `[n, k]`.
    pub fn matmul_t(self, other: Var<'g>) -> Result<Var<'g>> {
        self.matmul_impl(other, true)
    }

    fn matmul_impl(self, other: Var<'g>, trans_b: bool) -> Result<Var<'g>> {
        let (a, b) = (self.id, other.id);
        self.binary(other, |na, nb| {
            let err = || Error::Shape {
                op: "matmul",
                lhs: na.shape.clone(),
                rhs: nb.shape.clone(),
            };
            if na.shape.is_empty() || nb.shape.len() != 2 {
                return Err(err());
            }
            let k = *na.shape.last().unwrap();
            let (kb, n) = if trans_b {
                (nb.shape[1], nb.shape[0])
            } else {
                (nb.shape[0], nb.shape[1])
            };
            if k != kb {
                return Err(err());
            }
            let m = na.data.len() / k.max(1);
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, &na.data, false, &nb.data, trans_b, &mut out, false);
            let mut shape = na.shape.clone();
            *shape.last_mut().unwrap() = n;
            Ok((
                shape,
                out,
                Op::MatMul {
                    a,
                    b,
                    trans_b,
                    m,
                    k,
                    n,
                },
            ))
        })
    }

    /// Batched product over the leading axis: `[B, m, k] · [B, k, n]`, or
    /// `[B, m, k] · [B, n, k]ᵀ` when `trans_b`.
    pub fn bmm(self, other: Var<'g>, trans_b: bool) -> Result<Var<'g>> {
        let (a, b) = (self.id, other.id);
        self.binary(other, |na, nb| {
            let err = || Error::Shape {
                op: "bmm",
                lhs: na.shape.clone(),
                rhs: nb.shape.clone(),
            };
            if na.shape.len() != 3 || nb.shape.len() != 3 || na.shape[0] != nb.shape[0] {
                return Err(err());
            }
            let (batch, m, k) = (na.shape[0], na.shape[1], na.shape[2]);
            let (kb, n) = if trans_b {
                (nb.shape[2], nb.shape[1])
            } else {
                (nb.shape[1], nb.shape[2])
            };
            if k != kb {
                return Err(err());
            }
            let mut out = vec![0.0; batch * m * n];
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &na.data[i * m * k..(i + 1) * m * k],
                    false,
                    &nb.data[i * k * n..(i + 1) * k * n],
                    trans_b,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
            Ok((
                vec![batch, m, n],
                out,
                Op::BatchMatMul {
                    a,
                    b,
                    trans_b,
                    batch,
                    m,
                    k,
                    n,
                },
            ))
        })
    }

    fn zip_with(
        self,
        other: Var<'g>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'g>> {
        self.same_shape(other, name)?;
        self.binary(other, |na, nb| {
            let out = na.data.iter().zip(&nb.data).map(|(&x, &y)| f(x, y)).collect();
            Ok((na.shape.clone(), out, op))
        })
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.zip_with(other, "add", |x, y| x + y, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.zip_with(other, "sub", |x, y| x - y, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.zip_with(other, "mul", |x, y| x * y, Op::Mul(self.id, other.id))
    }

    fn check_trailing(self, b: Var<'g>, op: &'static str) -> Result<usize> {
        let (xs, bs) = (self.shape(), b.shape());
        if bs.len() > xs.len() || xs[xs.len() - bs.len()..] != bs[..] || bs.is_empty() {
            return Err(Error::Shape {
                op,
                lhs: xs,
                rhs: bs,
            });
        }
        Ok(bs.iter().product())
    }

    /// Adds `b` broadcast over the leading axes; `b.shape()` must equal the
    /// trailing axes of `self`.
    pub fn add_bcast(self, b: Var<'g>) -> Result<Var<'g>> {
        let w = self.check_trailing(b, "add_bcast")?;
        let op = Op::AddBcast(self.id, b.id);
        self.binary(b, |nx, nb| {
            let out = nx
                .data
                .chunks_exact(w)
                .flat_map(|c| c.iter().zip(&nb.data).map(|(x, y)| x + y))
                .collect();
            Ok((nx.shape.clone(), out, op))
        })
    }

    /// Multiplies by `b` broadcast over the leading axes.
    pub fn mul_bcast(self, b: Var<'g>) -> Result<Var<'g>> {
        let w = self.check_trailing(b, "mul_bcast")?;
        let op = Op::MulBcast(self.id, b.id);
        self.binary(b, |nx, nb| {
            let out = nx
                .data
                .chunks_exact(w)
                .flat_map(|c| c.iter().zip(&nb.data).map(|(x, y)| x * y))
                .collect();
            Ok((nx.shape.clone(), out, op))
        })
    }

    /// `self[b, .., c] + y[b, c]`: adds a per-batch vector to every position.
    pub fn add_per_batch(self, y: Var<'g>) -> Result<Var<'g>> {
        let (xs, ys) = (self.shape(), y.shape());
        if xs.len() < 2 || ys.len() != 2 || xs[0] != ys[0] || xs[xs.len() - 1] != ys[1] {
            return Err(Error::Shape {
                op: "add_per_batch",
                lhs: xs,
                rhs: ys,
            });
        }
        let inner = ys[1];
        let mid = xs[1..xs.len() - 1].iter().product::<usize>();
        let op = Op::AddMid {
            x: self.id,
            y: y.id,
            inner,
        };
        self.binary(y, |nx, ny| {
            let mut out = nx.data.clone();
            for (o, yrow) in ny.data.chunks_exact(inner).enumerate() {
                for m in 0..mid {
                    let base = (o * mid + m) * inner;
                    for c in 0..inner {
                        out[base + c] += yrow[c];
                    }
                }
            }
            Ok((nx.shape.clone(), out, op))
        })
    }

    pub fn scale(self, s: f64) -> Result<Var<'g>> {
        let id = self.id;
        self.unary(|n| {
            Ok((
                n.shape.clone(),
                n.data.iter().map(|v| v * s).collect(),
                Op::Scale(id, s),
            ))
        })
    }

    pub fn add_scalar(self, s: f64) -> Result<Var<'g>> {
        let id = self.id;
        self.unary(|n| {
            Ok((
                n.shape.clone(),
                n.data.iter().map(|v| v + s).collect(),
                Op::AddScalar(id),
            ))
        })
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(self, c: &Tensor) -> Result<Var<'g>> {
        let id = self.id;
        if c.shape() != self.shape().as_slice() {
            return Err(Error::Shape {
                op: "mul_const",
                lhs: self.shape(),
                rhs: c.shape().to_vec(),
            });
        }
        self.unary(|n| {
            let out = n.data.iter().zip(c.data()).map(|(x, y)| x * y).collect();
            Ok((n.shape.clone(), out, Op::MulConst(id, c.data().to_vec())))
        })
    }

    pub fn neg(self) -> Result<Var<'g>> {
        self.scale(-1.0)
    }

    pub fn square(self) -> Result<Var<'g>> {
        self.mul(self)
    }

    fn last_width(&self, op: &'static str) -> Result<usize> {
        match self.shape().last() {
            Some(&w) if w > 0 => Ok(w),
            _ => Err(Error::Shape {
                op,
                lhs: self.shape(),
                rhs: vec![],
            }),
        }
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(self) -> Result<Var<'g>> {
        let w = self.last_width("softmax")?;
        let id = self.id;
        self.unary(|n| {
            let mut out = Vec::with_capacity(n.data.len());
            for row in n.data.chunks_exact(w) {
                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let start = out.len();
                let mut total = 0.0;
                for &v in row {
                    let e = (v - mx).exp();
                    total += e;
                    out.push(e);
                }
                out[start..].iter_mut().for_each(|e| *e /= total);
            }
            Ok((n.shape.clone(), out, Op::Softmax(id)))
        })
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(self) -> Result<Var<'g>> {
        let w = self.last_width("log_softmax")?;
        let id = self.id;
        self.unary(|n| {
            let mut out = Vec::with_capacity(n.data.len());
            for row in n.data.chunks_exact(w) {
                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
                out.extend(row.iter().map(|v| v - lse));
            }
            Ok((n.shape.clone(), out, Op::LogSoftmax(id)))
        })
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(self, gamma: Var<'g>, beta: Var<'g>, eps: f64) -> Result<Var<'g>> {
        let w = self.last_width("layer_norm")?;
        if gamma.shape() != [w] || beta.shape() != [w] {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: self.shape(),
                rhs: gamma.shape(),
            });
        }
        let g = self.g;
        let (shape, out, xhat, rstd) = {
            let tape = g.tape.borrow();
            let (nx, ng, nb) = (
                &tape.nodes[self.id],
                &tape.nodes[gamma.id],
                &tape.nodes[beta.id],
            );
            let rows = nx.data.len() / w;
            let mut out = Vec::with_capacity(nx.data.len());
            let mut xhat = Vec::with_capacity(nx.data.len());
            let mut rstd = Vec::with_capacity(rows);
            for row in nx.data.chunks_exact(w) {
                let mean = row.iter().sum::<f64>() / w as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
                let r = 1.0 / (var + eps).sqrt();
                rstd.push(r);
                for ((x, gamma), beta) in row.iter().zip(&ng.data).zip(&nb.data) {
                    let h = (x - mean) * r;
                    xhat.push(h);
                    out.push(h * gamma + beta);
                }
            }
            (nx.shape.clone(), out, xhat, rstd)
        };
        let needs = g.needs(self.id) || g.needs(gamma.id) || g.needs(beta.id);
        g.push(
            shape,
            out,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            },
            needs,
        )
    }

    pub fn gelu(self) -> Result<Var<'g>> {
        let id = self.id;
        self.unary(|n| {
            Ok((
                n.shape.clone(),
                n.data.iter().map(|&v| gelu(v)).collect(),
                Op::Gelu(id),
            ))
        })
    }

    pub fn silu(self) -> Result<Var<'g>> {
        let id = self.id;
        self.unary(|n| {
            Ok((
                n.shape.clone(),
                n.data.iter().map(|&v| v * sigmoid(v)).collect(),
                Op::Silu(id),
            ))
        })
    }

    pub fn tanh(self) -> Result<Var<'g>> {
        let id = self.id;
        self.unary(|n| {
            Ok((
                n.shape.clone(),
                n.data.iter().map(|v| v.tanh()).collect(),
                Op::Tanh(id),
            ))
        })
    }

    pub fn sum(self) -> Result<Var<'g>> {
        let id = self.id;
        self.unary(|n| Ok((vec![], vec![n.data.iter().sum()], Op::Sum(id))))
    }

    pub fn mean(self) -> Result<Var<'g>> {
        let id = self.id;
        self.unary(|n| {
            if n.data.is_empty() {
                return Err(Error::contract("mean of an empty tensor"));
            }
            let m = n.data.iter().sum::<f64>() / n.data.len() as f64;
            Ok((vec![], vec![m], Op::Mean(id)))
        })
    }

    /// Sums over the last axis, dropping it.
    pub fn sum_last(self) -> Result<Var<'g>> {
        let w = self.last_width("sum_last")?;
        let id = self.id;
        self.unary(|n| {
            let out = n.data.chunks_exact(w).map(|c| c.iter().sum()).collect();
            let shape = n.shape[..n.shape.len() - 1].to_vec();
            Ok((shape, out, Op::SumLast(id)))
        })
    }

    /// Mean over axis 1 of a `[B, T, ..]` tensor, giving `[B, ..]`.
    pub fn mean_axis1(self) -> Result<Var<'g>> {
        let shape = self.shape();
        if shape.len() < 2 || shape[1] == 0 {
            return Err(Error::Shape {
                op: "mean_axis1",
                lhs: shape,
                rhs: vec![],
            });
        }
        let (outer, len) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let id = self.id;
        self.unary(|n| {
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for t in 0..len {
                    let base = (o * len + t) * inner;
                    for c in 0..inner {
                        out[o * inner + c] += n.data[base + c];
                    }
                }
            }
            out.iter_mut().for_each(|v| *v /= len as f64);
            let mut s = vec![outer];
            s.extend_from_slice(&n.shape[2..]);
            Ok((
                s,
                out,
                Op::MeanAxis1 {
                    x: id,
                    outer,
                    len,
                    inner,
                },
            ))
        })
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'g>> {
        let shape = shape.into();
        let id = self.id;
        self.unary(|n| {
            if shape.iter().product::<usize>() != n.data.len() {
                return Err(Error::Shape {
                    op: "reshape",
                    lhs: n.shape.clone(),
                    rhs: shape,
                });
            }
            Ok((shape, n.data.clone(), Op::Reshape(id)))
        })
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(self, axes: &[usize]) -> Result<Var<'g>> {
        let id = self.id;
        let axes = axes.to_vec();
        self.unary(|n| {
            let mut seen = vec![false; n.shape.len()];
            if axes.len() != n.shape.len()
                || axes.iter().any(|&a| a >= seen.len() || std::mem::replace(&mut seen[a], true))
            {
                return Err(Error::Shape {
                    op: "permute",
                    lhs: n.shape.clone(),
                    rhs: axes,
                });
            }
            let map = permute_map(&n.shape, &axes);
            let out = map.iter().map(|&s| n.data[s]).collect();
            let shape = axes.iter().map(|&a| n.shape[a]).collect();
            Ok((shape, out, Op::Permute { x: id, axes }))
        })
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat_last(self, other: Var<'g>) -> Result<Var<'g>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::Shape {
                op: "concat_last",
                lhs: sa,
                rhs: sb,
            });
        }
        let (wa, wb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let op = Op::ConcatLast {
            a: self.id,
            b: other.id,
            wa,
            wb,
        };
        self.binary(other, |na, nb| {
            let mut out = Vec::with_capacity(na.data.len() + nb.data.len());
            for (ca, cb) in na.data.chunks_exact(wa).zip(nb.data.chunks_exact(wb)) {
                out.extend_from_slice(ca);
                out.extend_from_slice(cb);
            }
            let mut shape = sa.clone();
            *shape.last_mut().unwrap() = wa + wb;
            Ok((shape, out, op))
        })
    }

    /// Diagonal of a square matrix.
    pub fn diag(self) -> Result<Var<'g>> {
        let id = self.id;
        self.unary(|n| {
            if n.shape.len() != 2 || n.shape[0] != n.shape[1] {
                return Err(Error::Shape {
                    op: "diag",
                    lhs: n.shape.clone(),
                    rhs: vec![],
                });
            }
            let k = n.shape[0];
            Ok((vec![k], (0..k).map(|i| n.data[i * k + i]).collect(), Op::Diag(id)))
        })
    }

    /// Square matrix `self` with its diagonal replaced by `d`.
    pub fn set_diag(self, d: Var<'g>) -> Result<Var<'g>> {
        let (ss, ds) = (self.shape(), d.shape());
        if ss.len() != 2 || ss[0] != ss[1] || ds != [ss[0]] {
            return Err(Error::Shape {
                op: "set_diag",
                lhs: ss,
                rhs: ds,
            });
        }
        let op = Op::SetDiag(self.id, d.id);
        self.binary(d, |ns, nd| {
            let k = nd.data.len();
            let mut out = ns.data.clone();
            for i in 0..k {
                out[i * k + i] = nd.data[i];
            }
            Ok((ns.shape.clone(), out, op))
        })
    }

    /// Columns `start..start + width` of the last axis.
    pub fn slice_last(self, start: usize, width: usize) -> Result<Var<'g>> {
        let w = self.last_width("slice_last")?;
        if start + width > w || width == 0 {
            return Err(Error::Shape {
                op: "slice_last",
                lhs: self.shape(),
                rhs: vec![start, width],
            });
        }
        let id = self.id;
        self.unary(|n| {
            let out = n
                .data
                .chunks_exact(w)
                .flat_map(|c| c[start..start + width].iter().copied())
                .collect();
            let mut shape = n.shape.clone();
            *shape.last_mut().unwrap() = width;
            Ok((shape, out, Op::SliceLast { x: id, start, width }))
        })
    }

    /// Scales every slice along the last axis to unit Euclidean norm.
    pub fn l2_normalize(self) -> Result<Var<'g>> {
        let w = self.last_width("l2_normalize")?;
        let id = self.id;
        self.unary(|n| {
            let mut norms = Vec::with_capacity(n.data.len() / w);
            let mut out = Vec::with_capacity(n.data.len());
            for row in n.data.chunks_exact(w) {
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                norms.push(norm);
                out.extend(row.iter().map(|v| v / norm));
            }
            Ok((n.shape.clone(), out, Op::L2Normalize { x: id, norms }))
        })
    }

    /// Extracts `kernel × kernel` patches from an NHWC tensor; the result is
    /// `[B·Ho·Wo, kernel·kernel·C]` with columns ordered `(ky, kx, c)`.
    pub fn im2col(self, kernel: usize, stride: usize, pad: usize) -> Result<Var<'g>> {
        let shape = self.shape();
        if shape.len() != 4 || kernel == 0 || stride == 0 || shape[1] + 2 * pad < kernel || shape[2] + 2 * pad < kernel {
            return Err(Error::Shape {
                op: "im2col",
                lhs: shape,
                rhs: vec![kernel, stride, pad],
            });
        }
        let geom = ConvGeom {
            batch: shape[0],
            height: shape[1],
            width: shape[2],
            channels: shape[3],
            kernel,
            stride,
            pad,
        };
        let id = self.id;
        self.unary(|n| {
            let map = im2col_index(&geom);
            let out = map.iter().map(|s| s.map_or(0.0, |i| n.data[i])).collect();
            let rows = geom.batch * geom.out_height() * geom.out_width();
            Ok((vec![rows, geom.cols()], out, Op::Im2Col { x: id, geom }))
        })
    }

    /// Nearest-neighbour 2× upsampling of an NHWC tensor.
    pub fn upsample2x(self) -> Result<Var<'g>> {
        let shape = self.shape();
        if shape.len() != 4 {
            return Err(Error::Shape {
                op: "upsample2x",
                lhs: shape,
                rhs: vec![],
            });
        }
        let (batch, height, width, channels) = (shape[0], shape[1], shape[2], shape[3]);
        let id = self.id;
        self.unary(|n| {
            let (oh, ow) = (2 * height, 2 * width);
            let mut out = vec![0.0; batch * oh * ow * channels];
            for b in 0..batch {
                for y in 0..oh {
                    for x in 0..ow {
                        let src = ((b * height + y / 2) * width + x / 2) * channels;
                        let dst = ((b * oh + y) * ow + x) * channels;
                        out[dst..dst + channels].copy_from_slice(&n.data[src..src + channels]);
                    }
                }
            }
            Ok((
                vec![batch, oh, ow, channels],
                out,
                Op::Upsample2x {
                    x: id,
                    batch,
                    height,
                    width,
                    channels,
                },
            ))
        })
    }

    /// Selects tokens: `self` is `[B, T, D]`, `index[b]` lists the positions
    /// kept for batch item `b` (equal counts per item).
    pub fn gather_tokens(self, index: &[Vec<usize>]) -> Result<Var<'g>> {
        let shape = self.shape();
        let kept = index.first().map_or(0, |r| r.len());
        if shape.len() != 3
            || index.len() != shape[0]
            || index.iter().any(|r| r.len() != kept || r.iter().any(|&t| t >= shape[1]))
        {
            return Err(Error::Shape {
                op: "gather_tokens",
                lhs: shape,
                rhs: vec![index.len(), kept],
            });
        }
        let (len, width) = (shape[1], shape[2]);
        let id = self.id;
        let index = index.to_vec();
        self.unary(|n| {
            let mut out = Vec::with_capacity(index.len() * kept * width);
            for (b, row) in index.iter().enumerate() {
                for &t in row {
                    let src = (b * len + t) * width;
                    out.extend_from_slice(&n.data[src..src + width]);
                }
            }
            Ok((
                vec![index.len(), kept, width],
                out,
                Op::Gather {
                    x: id,
                    index,
                    len,
                    width,
                },
            ))
        })
    }

    /// Inverse of [`Var::gather_tokens`]: places the visible tokens `self`
    /// (`[B, K, D]`) at `index` in a length-`len` sequence and fills every
    /// other position with the vector `fill` (`[D]`).
    pub fn scatter_tokens(self, fill: Var<'g>, index: &[Vec<usize>], len: usize) -> Result<Var<'g>> {
        let shape = self.shape();
        let kept = index.first().map_or(0, |r| r.len());
        if shape.len() != 3
            || shape[0] != index.len()
            || shape[1] != kept
            || fill.shape() != [shape[2]]
            || index.iter().any(|r| r.len() != kept || r.iter().any(|&t| t >= len))
        {
            return Err(Error::Shape {
                op: "scatter_tokens",
                lhs: shape,
                rhs: fill.shape(),
            });
        }
        let width = shape[2];
        let op = Op::Scatter {
            visible: self.id,
            fill: fill.id,
            index: index.to_vec(),
            len,
            width,
        };
        self.binary(fill, |nv, nf| {
            let batch = index.len();
            let mut out: Vec<f64> = Vec::with_capacity(batch * len * width);
            for _ in 0..batch * len {
                out.extend_from_slice(&nf.data);
            }
            for (b, row) in index.iter().enumerate() {
                for (j, &t) in row.iter().enumerate() {
                    let dst = (b * len + t) * width;
                    let src = (b * kept + j) * width;
                    out[dst..dst + width].copy_from_slice(&nv.data[src..src + width]);
                }
            }
            Ok((vec![batch, len, width], out, op))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// Centered differences of `f` with respect to every entry of `x`.
    fn numeric_grad(x: &Tensor, f: impl Fn(&Tensor) -> f64) -> Vec<f64> {
        let h = 1e-5;
        (0..x.numel())
            .map(|i| {
                let mut p = x.clone();
                p.data_mut()[i] += h;
                let mut m = x.clone();
                m.data_mut()[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(a: &[f64], b: &[f64], rel: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            let scale = x.abs().max(y.abs()).max(1e-6);
            assert!((x - y).abs() / scale <= rel, "{x} vs {y}");
        }
    }

    #[test]
    fn matmul_hand_example() {
        let g = Graph::new();
        let a = g.constant(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(&t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        assert_eq!(a.matmul(b).unwrap().to_vec(), vec![19.0, 22.0, 43.0, 50.0]);
        assert_eq!(a.matmul_t(b).unwrap().to_vec(), vec![17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn matmul_identity_and_shape_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = Graph::new();
        let a = Tensor::randn([3, 4], 1.0, &mut rng);
        let av = g.constant(&a);
        let i = g.constant(&Tensor::identity(4));
        assert_eq!(av.matmul(i).unwrap().to_vec(), a.data());
        let bad = g.constant(&Tensor::zeros([3, 2]));
        match av.matmul(bad) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![3, 4]);
                assert_eq!(rhs, vec![3, 2]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::randn([5, 7], 1.0, &mut rng);
        let b = Tensor::randn([7, 3], 1.0, &mut rng);
        let g = Graph::new();
        let (av, bv) = (g.input(&a), g.input(&b));
        let loss = av.matmul(bv).unwrap().sum().unwrap();
        let grads = g.backward(loss).unwrap();
        let f = |x: &Tensor| {
            let g = Graph::inference();
            g.constant(x).matmul(g.constant(&b)).unwrap().sum().unwrap().item().unwrap()
        };
        assert_close(grads.wrt(av).unwrap(), &numeric_grad(&a, f), 1e-6);
        let fb = |x: &Tensor| {
            let g = Graph::inference();
            g.constant(&a).matmul(g.constant(x)).unwrap().sum().unwrap().item().unwrap()
        };
        assert_close(grads.wrt(bv).unwrap(), &numeric_grad(&b, fb), 1e-6);
    }

    #[test]
    fn softmax_examples() {
        let g = Graph::new();
        let s = g.constant(&t(&[2], &[0.0, 0.0])).softmax().unwrap().to_vec();
        assert_eq!(s, vec![0.5, 0.5]);
        let s = g.constant(&t(&[3], &[1000.0; 3])).softmax().unwrap().to_vec();
        for v in s {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let g = Graph::new();
        let x = g.input(&Tensor::ones([3]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_linear_and_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Tensor::randn([2, 3, 4], 1.0, &mut rng);
        let g = Graph::new();
        let wv = g.input(&w);
        let grads = g.backward(wv.sum().unwrap()).unwrap();
        assert!(grads.wrt(wv).unwrap().iter().all(|&v| v == 1.0));

        let g = Graph::new();
        let wv = g.input(&w);
        let grads = g.backward(wv.mul(wv).unwrap().sum().unwrap()).unwrap();
        let expected: Vec<f64> = w.data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(grads.wrt(wv).unwrap(), expected.as_slice());
    }

    #[test]
    fn fan_out_is_additive() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn([6], 1.0, &mut rng);
        let grad_of = |which: u8| {
            let g = Graph::new();
            let xv = g.input(&x);
            let f = xv.tanh().unwrap().sum().unwrap();
            let h = xv.square().unwrap().scale(0.5).unwrap().sum().unwrap();
            let loss = match which {
                0 => f,
                1 => h,
                _ => f.add(h).unwrap(),
            };
            g.backward(loss).unwrap().wrt(xv).unwrap().to_vec()
        };
        let (a, b, both) = (grad_of(0), grad_of(1), grad_of(2));
        for i in 0..x.numel() {
            assert_eq!(both[i], a[i] + b[i]);
        }
    }

    #[test]
    fn elementwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn([3, 4], 1.0, &mut rng);
        let w = Tensor::randn([3, 4], 1.0, &mut rng);
        type F = fn(Var<'_>) -> Result<Var<'_>>;
        let cases: Vec<(&str, F)> = vec![
            ("gelu", |v| v.gelu()),
            ("silu", |v| v.silu()),
            ("tanh", |v| v.tanh()),
            ("softmax", |v| v.softmax()),
            ("log_softmax", |v| v.log_softmax()),
            ("sum_last", |v| v.sum_last()),
            ("permute", |v| v.permute(&[1, 0])),
            ("slice_last", |v| v.slice_last(1, 2)),
            ("l2_normalize", |v| v.l2_normalize()),
            ("diag_set", |v| {
                let sq = v.reshape([2, 6])?.matmul_t(v.reshape([2, 6])?)?;
                let d = sq.diag()?.scale(3.0)?;
                sq.set_diag(d)
            }),
        ];
        for (name, f) in cases {
            let g = Graph::new();
            let xv = g.input(&x);
            let out = f(xv).unwrap();
            let wv = g.constant(&Tensor::from_fn(out.shape(), |i| w.data()[i % w.numel()]));
            let loss = out.mul(wv).unwrap().sum().unwrap();
            let grads = g.backward(loss).unwrap();
            let eval = |p: &Tensor| {
                let g = Graph::inference();
                let out = f(g.constant(p)).unwrap();
                let wv = g.constant(&Tensor::from_fn(out.shape(), |i| w.data()[i % w.numel()]));
                out.mul(wv).unwrap().sum().unwrap().item().unwrap()
            };
            let numeric = numeric_grad(&x, eval);
            let analytic = grads.wrt(xv).unwrap();
            for (a, n) in analytic.iter().zip(&numeric) {
                let scale = a.abs().max(n.abs()).max(1e-6);
                assert!((a - n).abs() / scale < 1e-6, "{name}: {a} vs {n}");
            }
        }
    }

    #[test]
    fn layer_norm_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::randn([4, 5], 1.0, &mut rng);
        let gamma = Tensor::randn([5], 1.0, &mut rng);
        let beta = Tensor::randn([5], 1.0, &mut rng);
        let w = Tensor::randn([4, 5], 1.0, &mut rng);
        let run = |g: &Graph, xv: Var<'_>, gv: Var<'_>, bv: Var<'_>| -> f64 {
            let _ = g;
            xv.layer_norm(gv, bv, 1e-5)
                .unwrap()
                .mul_const(&w)
                .unwrap()
                .sum()
                .unwrap()
                .item()
                .unwrap()
        };
        let g = Graph::new();
        let (xv, gv, bv) = (g.input(&x), g.input(&gamma), g.input(&beta));
        let loss = xv.layer_norm(gv, bv, 1e-5).unwrap().mul_const(&w).unwrap().sum().unwrap();
        let grads = g.backward(loss).unwrap();
        let nx = numeric_grad(&x, |p| {
            let g = Graph::inference();
            run(&g, g.constant(p), g.constant(&gamma), g.constant(&beta))
        });
        let ng = numeric_grad(&gamma, |p| {
            let g = Graph::inference();
            run(&g, g.constant(&x), g.constant(p), g.constant(&beta))
        });
        assert_close(grads.wrt(xv).unwrap(), &nx, 1e-5);
        assert_close(grads.wrt(gv).unwrap(), &ng, 1e-6);
        assert!(grads.wrt(bv).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn im2col_and_upsample_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::randn([2, 5, 4, 3], 1.0, &mut rng);
        let f = |v: Var<'_>| -> Result<f64> {
            let cols = v.im2col(3, 2, 1)?;
            let w = Tensor::from_fn(cols.shape(), |i| ((i * 7919) % 13) as f64 - 6.0);
            let up = v.upsample2x()?;
            let w2 = Tensor::from_fn(up.shape(), |i| ((i * 31) % 5) as f64);
            cols.mul_const(&w)?.sum()?.add(up.mul_const(&w2)?.sum()?)?.item()
        };
        let g = Graph::new();
        let xv = g.input(&x);
        let cols = xv.im2col(3, 2, 1).unwrap();
        assert_eq!(cols.shape(), vec![2 * 3 * 2, 27]);
        let w = Tensor::from_fn(cols.shape(), |i| ((i * 7919) % 13) as f64 - 6.0);
        let up = xv.upsample2x().unwrap();
        let w2 = Tensor::from_fn(up.shape(), |i| ((i * 31) % 5) as f64);
        let loss = cols
            .mul_const(&w)
            .unwrap()
            .sum()
            .unwrap()
            .add(up.mul_const(&w2).unwrap().sum().unwrap())
            .unwrap();
        let grads = g.backward(loss).unwrap();
        let numeric = numeric_grad(&x, |p| {
            let g = Graph::inference();
            f(g.constant(p)).unwrap()
        });
        assert_close(grads.wrt(xv).unwrap(), &numeric, 1e-6);
    }

    #[test]
    fn gather_scatter_round_trip() {
        let x = Tensor::from_fn([2, 4, 3], |i| i as f64);
        let idx = vec![vec![0, 2], vec![3, 1]];
        let g = Graph::new();
        let xv = g.input(&x);
        let fill = g.input(&Tensor::full([3], -1.0));
        let kept = xv.gather_tokens(&idx).unwrap();
        assert_eq!(kept.to_vec()[..3], [0.0, 1.0, 2.0]);
        let full = kept.scatter_tokens(fill, &idx, 4).unwrap();
        let v = full.to_vec();
        assert_eq!(&v[0..3], &[0.0, 1.0, 2.0]);
        assert_eq!(&v[3..6], &[-1.0, -1.0, -1.0]);
        assert_eq!(&v[21..24], &[21.0, 22.0, 23.0]);
        let grads = g.backward(full.sum().unwrap()).unwrap();
        let gx = grads.wrt(xv).unwrap();
        assert_eq!(gx[0], 1.0);
        assert_eq!(gx[3], 0.0);
        assert_eq!(grads.wrt(fill).unwrap(), &[4.0, 4.0, 4.0]);
    }

    #[test]
    fn bmm_and_broadcast_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = Tensor::randn([2, 3, 4], 1.0, &mut rng);
        let b = Tensor::randn([2, 5, 4], 1.0, &mut rng);
        let bias = Tensor::randn([5], 1.0, &mut rng);
        let y = Tensor::randn([2, 5], 1.0, &mut rng);
        let eval = |g: &Graph, av: Var<'_>, bv: Var<'_>| -> Result<f64> {
            let prod = av.bmm(bv, true)?;
            let prod = prod.add_bcast(g.constant(&bias))?;
            let prod = prod.mul_bcast(g.constant(&bias))?;
            let prod = prod.add_per_batch(g.constant(&y))?;
            let w = Tensor::from_fn(prod.shape(), |i| (i % 7) as f64 - 3.0);
            prod.tanh()?.mul_const(&w)?.mean_axis1()?.sum()?.item()
        };
        let g = Graph::new();
        let (av, bv) = (g.input(&a), g.input(&b));
        let prod = av.bmm(bv, true).unwrap();
        let prod = prod.add_bcast(g.constant(&bias)).unwrap();
        let prod = prod.mul_bcast(g.constant(&bias)).unwrap();
        let prod = prod.add_per_batch(g.constant(&y)).unwrap();
        let w = Tensor::from_fn(prod.shape(), |i| (i % 7) as f64 - 3.0);
        let loss = prod.tanh().unwrap().mul_const(&w).unwrap().mean_axis1().unwrap().sum().unwrap();
        let grads = g.backward(loss).unwrap();
        let na = numeric_grad(&a, |p| {
            let g = Graph::inference();
            eval(&g, g.constant(p), g.constant(&b)).unwrap()
        });
        let nb = numeric_grad(&b, |p| {
            let g = Graph::inference();
            eval(&g, g.constant(&a), g.constant(p)).unwrap()
        });
        assert_close(grads.wrt(av).unwrap(), &na, 1e-6);
        assert_close(grads.wrt(bv).unwrap(), &nb, 1e-6);
    }

    #[test]
    fn non_finite_is_reported() {
        let g = Graph::new();
        let x = g.constant(&t(&[2], &[1.0, 0.0]));
        let big = x.scale(f64::MAX).unwrap();
        assert!(matches!(big.scale(10.0), Err(Error::NonFinite { .. })));
    }
}
