use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::kernels::{self, AxisTaps, ConvGeom, MatmulGeom};
use super::value::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Recorded primitive. Input ids refer to earlier tape nodes; the node's own
/// output value is stored alongside.
pub(crate) enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize),
    Scale(usize, T),
    Square(usize),
    Sqrt(usize),
    Clamp(usize, T, T),
    Relu(usize),
    Sigmoid(usize),
    Gelu(usize),
    /// Straight-through rounding onto a fixed-point grid.
    Snap(usize),
    Matmul(usize, usize, MatmulGeom),
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    Resize {
        x: usize,
        planes: usize,
        taps: Box<(AxisTaps, AxisTaps)>,
    },
    Softmax(usize, (usize, usize, usize)),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Concat(Vec<usize>, (usize, usize)),
    Slice(usize, (usize, usize, usize), usize, usize),
    Pad(usize, [usize; 4]),
    Sum(usize),
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of a forward pass. Rebuilt for every forward.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
    value: Rc<Tensor<T>>,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.value.shape())
            .finish()
    }
}

impl<T: Scalar> Tape<T> {
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

    /// Gradient-tracking leaf (parameters, inputs under test).
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push(Rc::new(value), Op::Leaf, requires_grad)
    }

    fn push(&self, value: Rc<Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value: Rc::clone(&value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id,
            value,
        }
    }

    pub(crate) fn record(&self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var<'_, T> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].requires_grad)
        };
        self.push(Rc::new(value), op, requires_grad)
    }

    /// Reverse sweep from a single-element root. Returns gradients of every
    /// gradient-tracking leaf the root depends on.
    pub fn backward(&self, root: &Var<'_, T>) -> Result<Grads<T>> {
        if root.value.numel() != 1 {
            return Err(Error::NonScalarRoot(root.value.shape().to_vec()));
        }
        let nodes = self.nodes.borrow();
        if !nodes[root.id].requires_grad {
            return Err(Error::OffTape);
        }
        let mut pending: Vec<Option<Vec<T>>> = (0..=root.id).map(|_| None).collect();
        pending[root.id] = Some(vec![T::one()]);
        let mut leaves = HashMap::new();

        for id in (0..=root.id).rev() {
            let Some(grad) = pending[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let needs = |i: usize| nodes[i].requires_grad;
            let val = |i: usize| nodes[i].value.data();
            let mut acc = |i: usize, g: Vec<T>| accumulate(&mut pending, i, g);
            match &node.op {
                Op::Leaf => {
                    leaves.insert(id, Tensor::new(node.value.shape().to_vec(), grad)?);
                }
                &Op::Add(a, b) | &Op::Sub(a, b) => {
                    let negate = matches!(node.op, Op::Sub(..));
                    for (i, neg) in [(a, false), (b, negate)] {
                        if needs(i) {
                            let mut g = reduce_to(&grad, node.value.shape(), nodes[i].value.shape());
                            if neg {
                                g.iter_mut().for_each(|v| *v = -*v);
                            }
                            acc(i, g);
                        }
                    }
                }
                &Op::Mul(a, b) => {
                    let (sa, sb) = (nodes[a].value.shape(), nodes[b].value.shape());
                    if needs(a) {
                        acc(a, binary_grad(&grad, node.value.shape(), val(b), sb, sa, |g, y| g * y));
                    }
                    if needs(b) {
                        acc(b, binary_grad(&grad, node.value.shape(), val(a), sa, sb, |g, x| g * x));
                    }
                }
                &Op::Div(a, b) => {
                    let (sa, sb) = (nodes[a].value.shape(), nodes[b].value.shape());
                    if needs(a) {
                        acc(a, binary_grad(&grad, node.value.shape(), val(b), sb, sa, |g, y| g / y));
                    }
                    if needs(b) {
                        // d(a/b)/db = -out / b
                        let out = node.value.data();
                        let q: Vec<T> = grad.iter().zip(out).map(|(&g, &o)| -g * o).collect();
                        acc(b, binary_grad(&q, node.value.shape(), val(b), sb, sb, |g, y| g / y));
                    }
                }
                &Op::AddScalar(a) | &Op::Reshape(a) | &Op::Snap(a) => acc(a, grad),
                &Op::Scale(a, s) => acc(a, grad.iter().map(|&g| g * s).collect()),
                &Op::Square(a) => acc(a, zip_map(&grad, val(a), |g, x| T::lit(2.0) * g * x)),
                &Op::Sqrt(a) => {
                    acc(a, zip_map(&grad, node.value.data(), |g, y| g / (y + y)));
                }
                &Op::Clamp(a, lo, hi) => {
                    acc(a, zip_map(&grad, val(a), |g, x| if x < lo || x > hi { T::zero() } else { g }));
                }
                &Op::Relu(a) => {
                    acc(a, zip_map(&grad, val(a), |g, x| if x > T::zero() { g } else { T::zero() }));
                }
                &Op::Sigmoid(a) => {
                    acc(a, zip_map(&grad, node.value.data(), |g, y| g * y * (T::one() - y)));
                }
                &Op::Gelu(a) => acc(a, zip_map(&grad, val(a), |g, x| g * kernels::gelu_grad(x))),
                Op::Matmul(a, b, geom) => {
                    let (ga, gb) =
                        kernels::matmul_backward(val(*a), val(*b), &grad, geom, needs(*a), needs(*b));
                    if let Some(ga) = ga {
                        acc(*a, ga);
                    }
                    if let Some(gb) = gb {
                        acc(*b, gb);
                    }
                }
                Op::Conv2d { x, w, b, geom } => {
                    let need_b = b.is_some_and(|b| needs(b));
                    let g = kernels::conv2d_backward(
                        val(*x),
                        val(*w),
                        &grad,
                        geom,
                        (needs(*x), needs(*w), need_b),
                    );
                    if let Some(gx) = g.x {
                        acc(*x, gx);
                    }
                    if let Some(gw) = g.w {
                        acc(*w, gw);
                    }
                    if let (Some(b), Some(gb)) = (b, g.b) {
                        acc(*b, gb);
                    }
                }
                Op::Resize { x, planes, taps } => {
                    let s = nodes[*x].value.shape();
                    let hw = (s[s.len() - 2], s[s.len() - 1]);
                    acc(*x, kernels::resize_backward(&grad, *planes, hw, &taps.0, &taps.1));
                }
                Op::Softmax(a, split) => {
                    acc(*a, kernels::softmax_backward(node.value.data(), &grad, *split));
                }
                Op::Permute(a, perm) => {
                    let inv = kernels::inverse_permutation(perm);
                    acc(*a, kernels::permute(&grad, node.value.shape(), &inv));
                }
                Op::Concat(parts, (outer, inner_total)) => {
                    let mut off = 0;
                    for &p in parts {
                        let chunk = nodes[p].value.numel() / outer;
                        if needs(p) {
                            let mut g = Vec::with_capacity(nodes[p].value.numel());
                            for o in 0..*outer {
                                let base = o * inner_total + off;
                                g.extend_from_slice(&grad[base..base + chunk]);
                            }
                            acc(p, g);
                        }
                        off += chunk;
                    }
                }
                &Op::Slice(a, (outer, len, inner), start, count) => {
                    let mut g = vec![T::zero(); outer * len * inner];
                    for o in 0..outer {
                        let src = &grad[o * count * inner..(o + 1) * count * inner];
                        g[(o * len + start) * inner..(o * len + start + count) * inner]
                            .copy_from_slice(src);
                    }
                    acc(a, g);
                }
                &Op::Pad(a, [top, bottom, left, right]) => {
                    let s = nodes[a].value.shape();
                    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                    let planes = nodes[a].value.numel() / (h * w);
                    let pw = w + left + right;
                    let ph = h + top + bottom;
                    let mut g = Vec::with_capacity(planes * h * w);
                    for p in 0..planes {
                        for y in 0..h {
                            let row = p * ph * pw + (y + top) * pw + left;
                            g.extend_from_slice(&grad[row..row + w]);
                        }
                    }
                    acc(a, g);
                }
                &Op::Sum(a) => {
                    let in_shape = nodes[a].value.shape();
                    let out_shape = node.value.shape();
                    let so = kernels::broadcast_strides(out_shape, in_shape);
                    let si = kernels::contiguous_strides(in_shape);
                    let mut g = vec![T::zero(); nodes[a].value.numel()];
                    kernels::for_each_strided(in_shape, &si, &so, |_, i, o| g[i] = grad[o]);
                    acc(a, g);
                }
            }
        }
        Ok(Grads { leaves })
    }
}

fn accumulate<T: Scalar>(pending: &mut [Option<Vec<T>>], id: usize, g: Vec<T>) {
    match &mut pending[id] {
        Some(existing) => existing.iter_mut().zip(g).for_each(|(e, v)| *e += v),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map<T: Scalar>(grad: &[T], other: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    grad.iter().zip(other).map(|(&g, &x)| f(g, x)).collect()
}

/// Sums a broadcast gradient back down to `target` shape.
fn reduce_to<T: Scalar>(grad: &[T], out_shape: &[usize], target: &[usize]) -> Vec<T> {
    if out_shape == target {
        return grad.to_vec();
    }
    let mut g = vec![T::zero(); target.iter().product()];
    let st = kernels::broadcast_strides(target, out_shape);
    let so = kernels::contiguous_strides(out_shape);
    kernels::for_each_strided(out_shape, &so, &st, |_, o, t| g[t] += grad[o]);
    g
}

/// `reduce_to(f(grad, other))` where `other` is broadcast to the output.
fn binary_grad<T: Scalar>(
    grad: &[T],
    out_shape: &[usize],
    other: &[T],
    other_shape: &[usize],
    target: &[usize],
    f: impl Fn(T, T) -> T,
) -> Vec<T> {
    let mut g = vec![T::zero(); target.iter().product()];
    let s_other = kernels::broadcast_strides(other_shape, out_shape);
    let s_target = kernels::broadcast_strides(target, out_shape);
    kernels::for_each_strided(out_shape, &s_other, &s_target, |o, y, t| {
        g[t] += f(grad[o], other[y]);
    });
    g
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Detached copy of the value.
    pub fn to_tensor(&self) -> Tensor<T> {
        (*self.value).clone()
    }
}

/// Gradients of leaves reached by a backward sweep.
#[derive(Debug)]
pub struct Grads<T> {
    leaves: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, var: &Var<'_, T>) -> Option<&Tensor<T>> {
        self.leaves.get(&var.id)
    }

    pub(crate) fn by_id(&self, id: usize) -> Option<&Tensor<T>> {
        self.leaves.get(&id)
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }
}
