//! Reverse-mode automatic differentiation over a recorded graph.
//!
//! Every op appends a node holding its forward value and the handles of its
//! inputs. Inputs always precede the node, so append order is a topological
//! order and [`Graph::backward`] is a single reverse sweep.

use crate::error::{Error, Result};
use crate::kernels::conv::{self, ConvGeom};
use crate::kernels::{matmul, resize};
use crate::tensor::{strides, Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Relu,
    Gelu,
    Sigmoid,
    Sqrt,
    Square,
}

impl UnaryKind {
    fn name(self) -> &'static str {
        match self {
            UnaryKind::Relu => "relu",
            UnaryKind::Gelu => "gelu",
            UnaryKind::Sigmoid => "sigmoid",
            UnaryKind::Sqrt => "sqrt",
            UnaryKind::Square => "square",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryKind {
    fn name(self) -> &'static str {
        match self {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

enum Op<T> {
    Leaf,
    Unary(UnaryKind, Var),
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
        a_view: Vec<usize>,
        b_view: Vec<usize>,
    },
    Scale(Var, T),
    Shift(Var),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        p: usize,
    },
    TransposeLast2(Var),
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    Depthwise {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    Resize {
        x: Var,
        planes: usize,
        from: (usize, usize),
        to: (usize, usize),
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Sum {
        x: Var,
        view: Vec<usize>,
        scale: T,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    L2Normalize {
        x: Var,
        eps: T,
        norms: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    name: Option<String>,
}

/// An append-only computation record. One forward/backward pass owns it.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    consumed: bool,
    check_finite: bool,
}

impl<T: Real> std::fmt::Debug for Graph<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.len())
            .field("consumed", &self.consumed)
            .finish()
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every grad-tracked leaf.
#[derive(Debug, Clone)]
pub struct Gradients<T: Real> {
    leaves: Vec<(Var, Option<String>, Tensor<T>)>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.leaves.iter().find(|(v, _, _)| *v == var).map(|(_, _, g)| g)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.leaves
            .iter()
            .find(|(_, n, _)| n.as_deref() == Some(name))
            .map(|(_, _, g)| g)
    }

    /// Named leaves in creation order.
    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.leaves
            .iter()
            .filter_map(|(_, n, g)| n.as_deref().map(|n| (n, g)))
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
            check_finite: true,
        }
    }

    /// Disables the per-op NaN/Inf check. Only meant for benchmarks.
    pub fn without_finite_checks(mut self) -> Self {
        self.check_finite = false;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Signs of every relu input recorded so far. Finite-difference probes
    /// compare this between the two perturbed evaluations to detect kinks.
    pub fn relu_signature(&self) -> Vec<bool> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            if let Op::Unary(UnaryKind::Relu, x) = node.op {
                sig.extend(self.nodes[x.0].value.data().iter().map(|&v| v > T::zero()));
            }
        }
        sig
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            name: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool, name: Option<String>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            name,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true, None)
    }

    /// A named, grad-tracked leaf.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor<T>) -> Var {
        self.push_leaf(value, true, Some(name.into()))
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false, None)
    }

    // ---- elementwise ----------------------------------------------------

    pub fn unary(&mut self, kind: UnaryKind, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let out = match kind {
            UnaryKind::Relu => xv.map(|v| v.max(T::zero())),
            UnaryKind::Gelu => xv.map(gelu),
            UnaryKind::Sigmoid => xv.map(sigmoid),
            UnaryKind::Sqrt => {
                if xv.data().iter().any(|&v| v < T::zero()) {
                    return Err(Error::Domain { op: "sqrt" });
                }
                xv.map(|v| v.sqrt())
            }
            UnaryKind::Square => xv.map(|v| v * v),
        };
        self.push(kind.name(), out, Op::Unary(kind, x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Gelu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sqrt, x)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Square, x)
    }

    /// Binary op with broadcasting. Allowed forms: equal shapes, a
    /// single-element operand, a rank-1 `[C]` vector against the channel
    /// axis of an `[N, C, ...]` tensor, or equal-rank shapes whose differing
    /// dimensions are 1 on one side.
    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let (out_shape, a_view, b_view) = broadcast_shapes(av.shape(), bv.shape())
            .ok_or_else(|| Error::shape(kind.name(), av.shape(), bv.shape()))?;
        let f = |x: T, y: T| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let data = if av.shape() == bv.shape() {
            av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ao = broadcast_offsets(&out_shape, &a_view);
            let bo = broadcast_offsets(&out_shape, &b_view);
            let (ad, bd) = (av.data(), bv.data());
            ao.iter().zip(&bo).map(|(&i, &j)| f(ad[i], bd[j])).collect()
        };
        let out = Tensor::from_vec(out_shape, data)?;
        self.push(
            kind.name(),
            out,
            Op::Binary {
                kind,
                a,
                b,
                a_view,
                b_view,
            },
            &[a, b],
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    /// `c · x` for a constant `c`.
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        let out = self.value(x).map(|v| v * c);
        self.push("scale", out, Op::Scale(x, c), &[x])
    }

    /// `x + c` for a constant `c`.
    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        let out = self.value(x).map(|v| v + c);
        self.push("add_scalar", out, Op::Shift(x), &[x])
    }

    // ---- linear algebra and shape ---------------------------------------

    /// Batched matrix product over matching leading dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let r = sa.len();
        let (m, k, k2, p) = (sa[r - 2], sa[r - 1], sb[r - 2], sb[r - 1]);
        if k != k2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let batch: usize = sa[..r - 2].iter().product();
        let data = matmul::matmul(self.value(a).data(), self.value(b).data(), batch, m, k, p);
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, p]);
        let out = Tensor::from_vec(shape, data)?;
        self.push("matmul", out, Op::MatMul { a, b, batch, m, k, p }, &[a, b])
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() < 2 {
            return Err(Error::invalid("transpose", format!("rank {} < 2", s.len())));
        }
        let r = s.len();
        let (m, n) = (s[r - 2], s[r - 1]);
        let data = transpose_batched(xv.data(), m, n);
        let mut shape = s.to_vec();
        shape.swap(r - 2, r - 1);
        let out = Tensor::from_vec(shape, data)?;
        self.push("transpose", out, Op::TransposeLast2(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        self.push("reshape", out, Op::Reshape(x), &[x])
    }

    // ---- convolution and resampling -------------------------------------

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let dims = self.value(x).dims4()?;
        let ws = self.shape(w).to_vec();
        let [cout, cin, k, k2] = ws[..] else {
            return Err(Error::invalid("conv2d", format!("weight shape {ws:?} is not [Cout, Cin, k, k]")));
        };
        if cin != dims.1 || k != k2 {
            return Err(Error::shape("conv2d", self.shape(x), &ws));
        }
        if self.shape(b) != [cout] {
            return Err(Error::shape("conv2d", &ws, self.shape(b)));
        }
        let geom = ConvGeom::new("conv2d", dims, cout, k, stride, pad)?;
        let data = conv::conv2d_forward(&geom, self.value(x).data(), self.value(w).data(), self.value(b).data());
        let out = Tensor::from_vec(vec![geom.n, cout, geom.oh, geom.ow], data)?;
        self.push("conv2d", out, Op::Conv2d { x, w, b, geom }, &[x, w, b])
    }

    /// One `k × k` filter per channel; weights `[C, 1, k, k]`.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let dims = self.value(x).dims4()?;
        let ws = self.shape(w).to_vec();
        let [c, one, k, k2] = ws[..] else {
            return Err(Error::invalid("depthwise_conv2d", format!("weight shape {ws:?} is not [C, 1, k, k]")));
        };
        if c != dims.1 || one != 1 || k != k2 {
            return Err(Error::shape("depthwise_conv2d", self.shape(x), &ws));
        }
        if self.shape(b) != [c] {
            return Err(Error::shape("depthwise_conv2d", &ws, self.shape(b)));
        }
        let geom = ConvGeom::new("depthwise_conv2d", dims, c, k, stride, pad)?;
        let data = conv::depthwise_forward(&geom, self.value(x).data(), self.value(w).data(), self.value(b).data());
        let out = Tensor::from_vec(vec![geom.n, c, geom.oh, geom.ow], data)?;
        self.push("depthwise_conv2d", out, Op::Depthwise { x, w, b, geom }, &[x, w, b])
    }

    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid("bilinear_resize", "output size must be at least 1x1"));
        }
        if (h, w) == (out_h, out_w) {
            return Ok(x);
        }
        let data = resize::resize_forward(self.value(x).data(), n * c, (h, w), (out_h, out_w));
        let out = Tensor::from_vec(vec![n, c, out_h, out_w], data)?;
        self.push(
            "bilinear_resize",
            out,
            Op::Resize {
                x,
                planes: n * c,
                from: (h, w),
                to: (out_h, out_w),
            },
            &[x],
        )
    }

    // ---- normalization ---------------------------------------------------

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if axis >= s.len() {
            return Err(Error::invalid("softmax", format!("axis {axis} out of range for {s:?}")));
        }
        let (outer, len, inner) = split_axis(s, axis);
        let src = xv.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total = total + e;
                }
                for j in 0..len {
                    out[at(j)] = out[at(j)] / total;
                }
            }
        }
        let out = Tensor::from_vec(s.to_vec(), out)?;
        self.push("softmax", out, Op::Softmax { x, axis }, &[x])
    }

    /// Normalizes over the channel axis (axis 1) at every other position,
    /// then applies per-channel `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape().to_vec();
        if s.len() < 2 {
            return Err(Error::invalid("layer_norm", format!("rank {} < 2", s.len())));
        }
        let c = s[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("layer_norm", &s, self.shape(gamma)));
        }
        if eps <= 0.0 {
            return Err(Error::invalid("layer_norm", "eps must be positive"));
        }
        let eps = T::of(eps);
        let (n, inner) = (s[0], s[2..].iter().product::<usize>());
        let src = xv.data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); n * inner];
        let mut out = vec![T::zero(); src.len()];
        let cf = T::of_usize(c);
        for ni in 0..n {
            for p in 0..inner {
                let at = |ch: usize| (ni * c + ch) * inner + p;
                let mean = (0..c).map(|ch| src[at(ch)]).sum::<T>() / cf;
                let var = (0..c).map(|ch| (src[at(ch)] - mean).powi(2)).sum::<T>() / cf;
                let r = (var + eps).sqrt().recip();
                rstd[ni * inner + p] = r;
                for ch in 0..c {
                    let xh = (src[at(ch)] - mean) * r;
                    xhat[at(ch)] = xh;
                    out[at(ch)] = g[ch] * xh + b[ch];
                }
            }
        }
        let out = Tensor::from_vec(s, out)?;
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// `x / max(‖x‖₂, eps)` along the last axis.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape().to_vec();
        let len = *s.last().ok_or_else(|| Error::invalid("l2_normalize", "scalar input"))?;
        let eps = T::of(eps);
        let mut norms = Vec::with_capacity(xv.numel() / len.max(1));
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(len.max(1)) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            norms.push(n);
            let d = n.max(eps);
            out.extend(row.iter().map(|&v| v / d));
        }
        let out = Tensor::from_vec(s, out)?;
        self.push("l2_normalize", out, Op::L2Normalize { x, eps, norms }, &[x])
    }

    // ---- reductions ------------------------------------------------------

    fn reduce(&mut self, op_name: &'static str, x: Var, axes: &[usize], mean: bool) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        let mut view = s.to_vec();
        for &a in axes {
            if a >= s.len() {
                return Err(Error::invalid(op_name, format!("axis {a} out of range for {s:?}")));
            }
            view[a] = 1;
        }
        let count: usize = axes.iter().map(|&a| s[a]).product::<usize>().max(1);
        let scale = if mean { T::of_usize(count).recip() } else { T::one() };
        let offs = broadcast_offsets(s, &view);
        let mut acc = vec![T::zero(); view.iter().product()];
        for (&o, &v) in offs.iter().zip(xv.data()) {
            acc[o] = acc[o] + v;
        }
        if mean {
            acc.iter_mut().for_each(|v| *v = *v * scale);
        }
        let out = Tensor::from_vec(view.clone(), acc)?;
        self.push(op_name, out, Op::Sum { x, view, scale }, &[x])
    }

    /// Sum over `axes`, keeping them as size-1 dimensions.
    pub fn sum(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce("sum", x, axes, false)
    }

    /// Mean over `axes`, keeping them as size-1 dimensions.
    pub fn mean(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce("mean", x, axes, true)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        let s = self.sum(x, &axes)?;
        self.reshape(s, Vec::<usize>::new())
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        let s = self.mean(x, &axes)?;
        self.reshape(s, Vec::<usize>::new())
    }

    /// `[N, C, H, W] → [N, C, 1, 1]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.value(x).dims4()?;
        self.mean(x, &[2, 3])
    }

    // ---- joining ---------------------------------------------------------

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        if inputs.len() == 1 {
            return Ok(first);
        }
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::from_vec(shape, data)?;
        self.push(
            "concat",
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).narrow(axis, start, len)?;
        self.push("narrow", out, Op::Narrow { x, axis, start }, &[x])
    }

    // ---- backward --------------------------------------------------------

    /// Gradient of scalar `loss` with respect to every grad-tracked leaf.
    /// Leaves the loss does not depend on get zeros.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let ls = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(Error::NotScalar(ls.to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backprop_node(i, &dy, &mut grads)?;
        }

        let leaves = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf) && n.requires_grad)
            .map(|(i, n)| {
                let shape = n.value.shape().to_vec();
                let g = match grads[i].take() {
                    Some(g) => Tensor::from_vec(shape, g),
                    None => Ok(Tensor::zeros(shape)),
                }?;
                Ok((Var(i), n.name.clone(), g))
            })
            .collect::<Result<_>>()?;
        Ok(Gradients { leaves })
    }

    fn backprop_node(&self, i: usize, dy: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = node.value.data();
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let want = |v: Var| nodes[v.0].requires_grad;

        match &node.op {
            Op::Leaf => {}
            Op::Unary(kind, x) => {
                if want(*x) {
                    let xs = val(*x);
                    let dx: Vec<T> = match kind {
                        UnaryKind::Relu => xs
                            .iter()
                            .zip(dy)
                            .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                            .collect(),
                        UnaryKind::Gelu => xs.iter().zip(dy).map(|(&v, &g)| g * gelu_grad(v)).collect(),
                        UnaryKind::Sigmoid => y.iter().zip(dy).map(|(&s, &g)| g * s * (T::one() - s)).collect(),
                        UnaryKind::Sqrt => {
                            let half = T::of(0.5);
                            y.iter().zip(dy).map(|(&r, &g)| g * half / r).collect()
                        }
                        UnaryKind::Square => {
                            let two = T::of(2.0);
                            xs.iter().zip(dy).map(|(&v, &g)| g * two * v).collect()
                        }
                    };
                    accumulate(grads, *x, dx);
                }
            }
            Op::Binary {
                kind,
                a,
                b,
                a_view,
                b_view,
            } => {
                let out_shape = node.value.shape();
                let same = a_view == out_shape && b_view == out_shape;
                let (ao, bo) = if same {
                    (Vec::new(), Vec::new())
                } else {
                    (broadcast_offsets(out_shape, a_view), broadcast_offsets(out_shape, b_view))
                };
                let (ad, bd) = (val(*a), val(*b));
                let at = |k: usize| if same { ad[k] } else { ad[ao[k]] };
                let bt = |k: usize| if same { bd[k] } else { bd[bo[k]] };
                if want(*a) {
                    let full: Vec<T> = match kind {
                        BinaryKind::Add | BinaryKind::Sub => dy.to_vec(),
                        BinaryKind::Mul => (0..dy.len()).map(|k| dy[k] * bt(k)).collect(),
                        BinaryKind::Div => (0..dy.len()).map(|k| dy[k] / bt(k)).collect(),
                    };
                    accumulate(grads, *a, reduce_to(full, &ao, a_view));
                }
                if want(*b) {
                    let full: Vec<T> = match kind {
                        BinaryKind::Add => dy.to_vec(),
                        BinaryKind::Sub => dy.iter().map(|&g| -g).collect(),
                        BinaryKind::Mul => (0..dy.len()).map(|k| dy[k] * at(k)).collect(),
                        BinaryKind::Div => (0..dy.len())
                            .map(|k| {
                                let d = bt(k);
                                -dy[k] * at(k) / (d * d)
                            })
                            .collect(),
                    };
                    accumulate(grads, *b, reduce_to(full, &bo, b_view));
                }
            }
            Op::Scale(x, c) => {
                if want(*x) {
                    accumulate(grads, *x, dy.iter().map(|&g| g * *c).collect());
                }
            }
            Op::Shift(x) | Op::Reshape(x) => {
                if want(*x) {
                    accumulate(grads, *x, dy.to_vec());
                }
            }
            Op::MatMul { a, b, batch, m, k, p } => {
                if want(*a) {
                    // dA = dY · Bᵀ
                    accumulate(grads, *a, matmul::matmul_nt(dy, val(*b), *batch, *m, *p, *k));
                }
                if want(*b) {
                    // dB = Aᵀ · dY
                    accumulate(grads, *b, matmul::matmul_tn(val(*a), dy, *batch, *k, *m, *p));
                }
            }
            Op::TransposeLast2(x) => {
                if want(*x) {
                    let s = node.value.shape();
                    let r = s.len();
                    accumulate(grads, *x, transpose_batched(dy, s[r - 2], s[r - 1]));
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) = conv::conv2d_backward(geom, val(*x), val(*w), dy);
                if want(*x) {
                    accumulate(grads, *x, dx);
                }
                if want(*w) {
                    accumulate(grads, *w, dw);
                }
                if want(*b) {
                    accumulate(grads, *b, db);
                }
            }
            Op::Depthwise { x, w, b, geom } => {
                let (dx, dw, db) = conv::depthwise_backward(geom, val(*x), val(*w), dy);
                if want(*x) {
                    accumulate(grads, *x, dx);
                }
                if want(*w) {
                    accumulate(grads, *w, dw);
                }
                if want(*b) {
                    accumulate(grads, *b, db);
                }
            }
            Op::Resize { x, planes, from, to } => {
                if want(*x) {
                    accumulate(grads, *x, resize::resize_backward(dy, *planes, *from, *to));
                }
            }
            Op::Softmax { x, axis } => {
                if want(*x) {
                    let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                    let mut dx = vec![T::zero(); dy.len()];
                    for o in 0..outer {
                        for ii in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + ii;
                            let dot = (0..len).map(|j| dy[at(j)] * y[at(j)]).sum::<T>();
                            for j in 0..len {
                                dx[at(j)] = y[at(j)] * (dy[at(j)] - dot);
                            }
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let s = node.value.shape();
                let (n, c, inner) = (s[0], s[1], s[2..].iter().product::<usize>());
                let g = val(*gamma);
                let cf = T::of_usize(c);
                if want(*x) {
                    let mut dx = vec![T::zero(); dy.len()];
                    for ni in 0..n {
                        for p in 0..inner {
                            let at = |ch: usize| (ni * c + ch) * inner + p;
                            let mut m1 = T::zero();
                            let mut m2 = T::zero();
                            for ch in 0..c {
                                let dxh = dy[at(ch)] * g[ch];
                                m1 = m1 + dxh;
                                m2 = m2 + dxh * xhat[at(ch)];
                            }
                            m1 = m1 / cf;
                            m2 = m2 / cf;
                            let r = rstd[ni * inner + p];
                            for ch in 0..c {
                                let dxh = dy[at(ch)] * g[ch];
                                dx[at(ch)] = r * (dxh - m1 - xhat[at(ch)] * m2);
                            }
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                if want(*gamma) || want(*beta) {
                    let mut dg = vec![T::zero(); c];
                    let mut dbeta = vec![T::zero(); c];
                    for ni in 0..n {
                        for ch in 0..c {
                            for p in 0..inner {
                                let k = (ni * c + ch) * inner + p;
                                dg[ch] = dg[ch] + dy[k] * xhat[k];
                                dbeta[ch] = dbeta[ch] + dy[k];
                            }
                        }
                    }
                    if want(*gamma) {
                        accumulate(grads, *gamma, dg);
                    }
                    if want(*beta) {
                        accumulate(grads, *beta, dbeta);
                    }
                }
            }
            Op::Sum { x, view, scale } => {
                if want(*x) {
                    let xs = nodes[x.0].value.shape();
                    let offs = broadcast_offsets(xs, view);
                    accumulate(grads, *x, offs.iter().map(|&o| dy[o] * *scale).collect());
                }
            }
            Op::Concat { inputs, axis } => {
                let s = node.value.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let total = s[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let len = nodes[v.0].value.shape()[*axis] * inner;
                    if want(v) {
                        let mut part = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            part.extend_from_slice(&dy[o * total + offset..o * total + offset + len]);
                        }
                        accumulate(grads, v, part);
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                if want(*x) {
                    let xs = nodes[x.0].value.shape();
                    let outer: usize = xs[..*axis].iter().product();
                    let inner: usize = xs[axis + 1..].iter().product();
                    let len = node.value.shape()[*axis] * inner;
                    let full = xs[*axis] * inner;
                    let mut dx = vec![T::zero(); nodes[x.0].value.numel()];
                    for o in 0..outer {
                        let dst = o * full + start * inner;
                        dx[dst..dst + len].copy_from_slice(&dy[o * len..(o + 1) * len]);
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::L2Normalize { x, eps, norms } => {
                if want(*x) {
                    let len = *node.value.shape().last().unwrap_or(&1);
                    let mut dx = Vec::with_capacity(dy.len());
                    for ((yr, gr), &n) in y.chunks(len).zip(dy.chunks(len)).zip(norms) {
                        if n > *eps {
                            let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                            dx.extend(yr.iter().zip(gr).map(|(&yv, &g)| (g - yv * dot) / n));
                        } else {
                            dx.extend(gr.iter().map(|&g| g / *eps));
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
        }
        Ok(())
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a = *a + b),
        slot @ None => *slot = Some(g),
    }
}

fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        (T::one() + (-v).exp()).recip()
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn gelu<T: Real>(v: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    half * v * (T::one() + (c * (v + a * v * v * v)).tanh())
}

fn gelu_grad<T: Real>(v: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let three = T::of(3.0);
    let t = (c * (v + a * v * v * v)).tanh();
    half * (T::one() + t) + half * v * (T::one() - t * t) * c * (T::one() + three * a * v * v)
}

/// `(outer, axis_len, inner)` decomposition of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

fn transpose_batched<T: Real>(src: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    if m * n == 0 {
        return out;
    }
    for (sb, ob) in src.chunks(m * n).zip(out.chunks_mut(m * n)) {
        for i in 0..m {
            for j in 0..n {
                ob[j * m + i] = sb[i * n + j];
            }
        }
    }
    out
}

/// Output shape and each operand's equal-rank view for a broadcasting
/// binary op, or `None` if the shapes are incompatible.
pub(crate) fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    if a == b {
        return Some((a.to_vec(), a.to_vec(), b.to_vec()));
    }
    let an: usize = a.iter().product();
    let bn: usize = b.iter().product();
    if bn == 1 && b.len() <= a.len() {
        return Some((a.to_vec(), a.to_vec(), vec![1; a.len()]));
    }
    if an == 1 && a.len() <= b.len() {
        return Some((b.to_vec(), vec![1; b.len()], b.to_vec()));
    }
    let channel_view = |v: &[usize], t: &[usize]| -> Option<Vec<usize>> {
        (v.len() == 1 && t.len() >= 2 && t[1] == v[0]).then(|| {
            let mut view = vec![1; t.len()];
            view[1] = v[0];
            view
        })
    };
    if let Some(view) = channel_view(b, a) {
        return Some((a.to_vec(), a.to_vec(), view));
    }
    if let Some(view) = channel_view(a, b) {
        return Some((b.to_vec(), view, b.to_vec()));
    }
    if a.len() != b.len() {
        return None;
    }
    let mut out = Vec::with_capacity(a.len());
    for (&x, &y) in a.iter().zip(b) {
        match (x, y) {
            _ if x == y => out.push(x),
            (1, _) => out.push(y),
            (_, 1) => out.push(x),
            _ => return None,
        }
    }
    Some((out, a.to_vec(), b.to_vec()))
}

/// For every element of `out_shape` (row-major), the flat offset of the
/// element of the broadcast operand with shape `view` that feeds it.
pub(crate) fn broadcast_offsets(out_shape: &[usize], view: &[usize]) -> Vec<usize> {
    let total: usize = out_shape.iter().product();
    let vs = strides(view);
    let eff: Vec<usize> = view.iter().zip(&vs).map(|(&d, &s)| if d == 1 { 0 } else { s }).collect();
    let mut offs = Vec::with_capacity(total);
    let mut idx = vec![0usize; out_shape.len()];
    let mut cur = 0usize;
    for _ in 0..total {
        offs.push(cur);
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            cur += eff[d];
            if idx[d] < out_shape[d] {
                break;
            }
            cur -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    offs
}

/// Sums a full-shape gradient down to a broadcast operand's shape.
fn reduce_to<T: Real>(full: Vec<T>, offsets: &[usize], view: &[usize]) -> Vec<T> {
    if offsets.is_empty() {
        return full;
    }
    let mut out = vec![T::zero(); view.iter().product()];
    for (&o, g) in offsets.iter().zip(full) {
        out[o] = out[o] + g;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64_slice(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn add_is_componentwise() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.constant(t(&[2], &[3.0, 4.0]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn relu_and_sigmoid_definitions() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = g.constant(Tensor::scalar(0.0));
        let s = g.sigmoid(z).unwrap();
        assert_eq!(g.value(s).item(), 0.5);
    }

    #[test]
    fn sqrt_of_negative_is_a_domain_error() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2], &[1.0, -1.0]));
        assert!(matches!(g.sqrt(x), Err(Error::Domain { op: "sqrt" })));
    }

    #[test]
    fn incompatible_broadcast_is_rejected() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![3, 2]));
        assert!(matches!(g.add(a, b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn per_channel_vector_broadcasts_over_n_h_w() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(vec![2, 3, 2, 2]));
        let v = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let y = g.add(x, v).unwrap();
        let yv = g.value(y);
        assert_eq!(yv.shape(), &[2, 3, 2, 2]);
        assert_eq!(&yv.data()[4..8], &[2.0; 4]);
        assert_eq!(&yv.data()[20..24], &[3.0; 4]);
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::<f64>::new();
        let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let x = g.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let y = g.matmul(i, x).unwrap();
        assert_eq!(g.value(y).data(), &[5.0, 6.0, 7.0, 8.0]);

        let r = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let c = g.constant(t(&[2, 1], &[3.0, 4.0]));
        let d = g.matmul(r, c).unwrap();
        assert_eq!(g.value(d).data(), &[11.0]);

        let z = g.constant(Tensor::zeros(vec![2, 3]));
        let m = g.constant(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let zz = g.matmul(z, m).unwrap();
        assert_eq!(g.value(zz).shape(), &[2, 2]);
        assert!(g.value(zz).data().iter().all(|&v| v == 0.0));

        let bad = g.constant(Tensor::zeros(vec![2, 2]));
        assert!(g.matmul(m, m).is_err());
        assert!(g.matmul(bad, r).is_err());
    }

    #[test]
    fn conv_hand_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let w = g.constant(t(&[1, 1, 1, 1], &[2.0]));
        let b = g.constant(t(&[1], &[0.0]));
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 4.0, 6.0, 8.0]);

        let c = 0.7;
        let img = g.constant(Tensor::full(vec![1, 1, 5, 5], c));
        let ones = g.constant(Tensor::ones(vec![1, 1, 3, 3]));
        let y = g.conv2d(img, ones, b, 1, 1).unwrap();
        let v = g.value(y);
        for yy in 1..4 {
            for xx in 1..4 {
                assert!((v.data()[yy * 5 + xx] - 9.0 * c).abs() < 1e-12);
            }
        }
        // corner sees a 2x2 window
        assert!((v.data()[0] - 4.0 * c).abs() < 1e-12);
    }

    #[test]
    fn delta_kernels_are_identity() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..2 * 3 * 4 * 5).map(|v| (v as f64).sin()).collect();
        let x = g.constant(t(&[2, 3, 4, 5], &data));
        let mut wd = vec![0.0; 3 * 3 * 9];
        for c in 0..3 {
            wd[(c * 3 + c) * 9 + 4] = 1.0;
        }
        let w = g.constant(t(&[3, 3, 3, 3], &wd));
        let b = g.constant(Tensor::zeros(vec![3]));
        let y = g.conv2d(x, w, b, 1, 1).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);

        let mut dd = vec![0.0; 27];
        for c in 0..3 {
            dd[c * 9 + 4] = 1.0;
        }
        let dw = g.constant(t(&[3, 1, 3, 3], &dd));
        let y = g.depthwise_conv2d(x, dw, b, 1, 1).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);
    }

    #[test]
    fn zeroed_depthwise_filter_zeroes_only_its_channel() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..3 * 16).map(|v| 1.0 + (v as f64).cos()).collect();
        let x = g.constant(t(&[1, 3, 4, 4], &data));
        let mut wd = vec![0.25; 27];
        wd[9..18].fill(0.0);
        let w = g.constant(t(&[3, 1, 3, 3], &wd));
        let b = g.constant(Tensor::zeros(vec![3]));
        let y = g.depthwise_conv2d(x, w, b, 1, 1).unwrap();
        let v = g.value(y).data();
        assert!(v[16..32].iter().all(|&e| e == 0.0));
        assert!(v[..16].iter().all(|&e| e > 0.0));
        assert!(v[32..].iter().all(|&e| e > 0.0));
    }

    #[test]
    fn resize_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 6.0]));
        let y = g.bilinear_resize(x, 1, 1).unwrap();
        assert_eq!(g.value(y).data(), &[3.0]);

        let c = g.constant(Tensor::full(vec![1, 2, 4, 6], 0.3));
        let up = g.bilinear_resize(c, 8, 12).unwrap();
        let down = g.bilinear_resize(up, 4, 6).unwrap();
        assert!(g.value(up).data().iter().all(|&v| v == 0.3));
        assert_eq!(g.value(down), g.value(c));
        let odd = g.bilinear_resize(c, 3, 7).unwrap();
        assert!(g.value(odd).data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
        assert!(g.bilinear_resize(c, 0, 2).is_err());
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2], &[2.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        let v = g.value(y).data();
        assert!((v[0] - 0.8808).abs() < 1e-4 && (v[1] - 0.1192).abs() < 1e-4);

        let u = g.constant(Tensor::full(vec![4], 3.0));
        let y = g.softmax(u, 0).unwrap();
        assert!(g.value(y).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::<f64>::new();
        let gamma = g.constant(Tensor::ones(vec![2]));
        let beta = g.constant(Tensor::zeros(vec![2]));
        let x = g.constant(t(&[1, 2, 1, 1], &[1.0, -1.0]));
        let y = g.layer_norm(x, gamma, beta, 1e-12).unwrap();
        let v = g.value(y).data();
        assert!((v[0] - 1.0).abs() < 1e-9 && (v[1] + 1.0).abs() < 1e-9);

        let k = g.constant(Tensor::full(vec![1, 2, 1, 1], 5.0));
        let y = g.layer_norm(k, gamma, beta, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let shift = g.constant(t(&[2], &[0.25, -0.5]));
        let y = g.layer_norm(k, gamma, shift, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.25, -0.5]);
    }

    #[test]
    fn reductions() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let m = g.mean_all(x).unwrap();
        assert_eq!(g.value(m).item(), 2.0);
        let grads = g.backward(m).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));

        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::full(vec![2, 3, 4, 4], 0.4));
        let p = g.global_avg_pool(c).unwrap();
        assert_eq!(g.shape(p), &[2, 3, 1, 1]);
        assert!(g.value(p).data().iter().all(|&v| (v - 0.4).abs() < 1e-15));
    }

    #[test]
    fn concat_and_narrow_round_trip() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::full(vec![1, 2, 2, 2], 1.0));
        let b = g.constant(Tensor::full(vec![1, 3, 2, 2], 2.0));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(c), &[1, 5, 2, 2]);
        let a2 = g.narrow(c, 1, 0, 2).unwrap();
        let b2 = g.narrow(c, 1, 2, 3).unwrap();
        assert_eq!(g.value(a2), g.value(a));
        assert_eq!(g.value(b2), g.value(b));
        assert_eq!(g.concat(&[a], 1).unwrap(), a);
        let bad = g.constant(Tensor::zeros(vec![1, 2, 3, 2]));
        assert!(g.concat(&[a, bad], 1).is_err());
    }

    #[test]
    fn backward_of_sum_of_squares_is_two_x() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[3], &[1.0, -2.0, 0.5]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum_all(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn repeated_use_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], &[3.0, 4.0]));
        let y = g.add(x, x).unwrap();
        let loss = g.sum_all(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], &[3.0, 4.0]));
        let y = g.param("unused", t(&[3], &[1.0, 1.0, 1.0]));
        let loss = g.sum_all(x).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(y).unwrap().data(), &[0.0; 3]);
        assert_eq!(grads.by_name("unused").unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], &[3.0, 4.0]));
        assert!(matches!(g.backward(x), Err(Error::NotScalar(_))));
        let s = g.sum_all(x).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::GraphConsumed)));
    }

    #[test]
    fn non_finite_output_is_rejected() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[1], &[1.0]));
        let z = g.constant(t(&[1], &[0.0]));
        assert!(matches!(g.div(a, z), Err(Error::NonFinite { op: "div" })));
    }

    #[test]
    fn broadcast_offsets_cover_channel_view() {
        let offs = broadcast_offsets(&[2, 3, 1, 2], &[1, 3, 1, 1]);
        assert_eq!(offs, vec![0, 0, 1, 1, 2, 2, 0, 0, 1, 1, 2, 2]);
    }
}
