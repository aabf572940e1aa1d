//! Dynamically recorded reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only tape: every op evaluates eagerly, stores
//! its output, and remembers what it needs for the backward pass. Node
//! indices are already a topological order, so `backward` walks the tape in
//! reverse.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use crate::error::{dim_err, Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::param::{ParamId, ParamStore};
use crate::ssm::{self, Evaluator};
use crate::tensor::{numel, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a user-supplied op: `(inputs, output, grad_output) -> grads`.
pub type CustomBackward<T> = Arc<dyn Fn(&[&Tensor<T>], &Tensor<T>, &Tensor<T>) -> Vec<Tensor<T>> + Send + Sync>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Sigmoid,
    Softplus,
    Softmax,
}

enum Op<T: Real> {
    Leaf,
    Add,
    Sub,
    Mul,
    AddBcast(Vec<usize>),
    MulBcast(Vec<usize>),
    Scale(T),
    AddScalar,
    Exp,
    Abs,
    Sum,
    Mean,
    Act(Activation),
    Reshape,
    Permute(Vec<usize>),
    Flip(usize),
    Concat(usize),
    Narrow { axis: usize, start: usize },
    Linear { has_bias: bool },
    Conv2d { geom: ConvGeom, has_bias: bool },
    LayerNorm { xhat: Vec<T>, rstd: Vec<T> },
    GlobalAvgPool,
    Down2,
    Up2,
    ZohA,
    ZohB,
    Scan { states: Vec<T> },
    Custom { name: String, backward: CustomBackward<T> },
}

impl<T: Real> Op<T> {
    fn name(&self) -> &str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::AddBcast(_) => "add_broadcast",
            Op::MulBcast(_) => "mul_broadcast",
            Op::Scale(_) => "scale",
            Op::AddScalar => "add_scalar",
            Op::Exp => "exp",
            Op::Abs => "abs",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Act(Activation::Silu) => "silu",
            Op::Act(Activation::Sigmoid) => "sigmoid",
            Op::Act(Activation::Softplus) => "softplus",
            Op::Act(Activation::Softmax) => "softmax",
            Op::Reshape => "reshape",
            Op::Permute(_) => "permute",
            Op::Flip(_) => "flip",
            Op::Concat(_) => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Linear { .. } => "linear",
            Op::Conv2d { .. } => "conv2d",
            Op::LayerNorm { .. } => "layer_norm",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::Down2 => "down2_area",
            Op::Up2 => "up2_nearest",
            Op::ZohA => "zoh_a",
            Op::ZohB => "zoh_b",
            Op::Scan { .. } => "selective_scan",
            Op::Custom { name, .. } => name,
        }
    }
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    inputs: Vec<Var>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    check_finite: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> fmt::Debug for Graph<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.nodes.len()).finish()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            check_finite: true,
        }
    }

    /// Disables the per-op finiteness check.
    pub fn unchecked(mut self) -> Self {
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

    /// A differentiable leaf.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            inputs: Vec::new(),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a parameter as a leaf (once per graph) and returns its variable.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.leaf(p.value.clone(), p.trainable);
        self.params.insert(id, v);
        v
    }

    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.params.get(&id).copied()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: Vec<Var>) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite { op: op.name().to_string() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            inputs,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(dim_err(op, sa, sb));
        }
        Ok(())
    }

    // ── elementwise ──────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push(v, Op::Add, vec![a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push(v, Op::Sub, vec![a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(v, Op::Mul, vec![a, b])
    }

    fn broadcast_map(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() || sa.iter().zip(sb).any(|(&x, &y)| y != x && y != 1) {
            return Err(dim_err(op, sa, sb));
        }
        Ok(kernels::broadcast_index(sa, sb))
    }

    /// `a + b` where `b` broadcasts to the shape of `a` (same rank, unit or equal extents).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let map = self.broadcast_map("add_broadcast", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(&map).map(|(&x, &j)| x + bv.data()[j]).collect();
        let v = Tensor::new(av.shape().to_vec(), data)?;
        self.push(v, Op::AddBcast(map), vec![a, b])
    }

    /// `a * b` where `b` broadcasts to the shape of `a`.
    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let map = self.broadcast_map("mul_broadcast", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(&map).map(|(&x, &j)| x * bv.data()[j]).collect();
        let v = Tensor::new(av.shape().to_vec(), data)?;
        self.push(v, Op::MulBcast(map), vec![a, b])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(c), vec![a])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -T::one())
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar, vec![a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(T::exp);
        self.push(v, Op::Exp, vec![a])
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(T::abs);
        self.push(v, Op::Abs, vec![a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum, vec![a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / T::of(t.numel() as f64));
        self.push(v, Op::Mean, vec![a])
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Result<Var> {
        let t = self.value(a);
        let v = match kind {
            Activation::Silu => t.map(kernels::silu),
            Activation::Sigmoid => t.map(kernels::sigmoid),
            Activation::Softplus => t.map(kernels::softplus),
            Activation::Softmax => {
                let d = *t.shape().last().ok_or(Error::Config("softmax on a scalar".into()))?;
                Tensor::new(t.shape().to_vec(), kernels::softmax_rows(t.data(), d))?
            }
        };
        self.push(v, Op::Act(kind), vec![a])
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Silu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Softplus)
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Softmax)
    }

    // ── layout ───────────────────────────────────────────────────────

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape.to_vec())?;
        self.push(v, Op::Reshape, vec![a])
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&x| x >= shape.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(dim_err("permute", &shape, axes));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&x| shape[x]).collect();
        let data = kernels::permute(self.value(a).data(), &shape, axes);
        let v = Tensor::new(out_shape, data)?;
        self.push(v, Op::Permute(axes.to_vec()), vec![a])
    }

    pub fn flip(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(dim_err("flip", &shape, &[axis]));
        }
        let data = kernels::flip(self.value(a).data(), &shape, axis);
        let v = Tensor::new(shape, data)?;
        self.push(v, Op::Flip(axis), vec![a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or(Error::Config("concat of nothing".into()))?).to_vec();
        if axis >= first.len() {
            return Err(dim_err("concat", &first, &[axis]));
        }
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || (0..s.len()).any(|i| i != axis && s[i] != first[i]) {
                return Err(dim_err("concat", &first, s));
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..][..chunk]);
            }
        }
        let v = Tensor::new(out_shape, data)?;
        self.push(v, Op::Concat(axis), parts.to_vec())
    }

    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(dim_err("narrow", &shape, &[axis, start, len]));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let t = self.value(a);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&t.data()[(o * shape[axis] + start) * inner..][..len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let v = Tensor::new(out_shape, data)?;
        self.push(v, Op::Narrow { axis, start }, vec![a])
    }

    // ── layers ───────────────────────────────────────────────────────

    /// `y[.., j] = Σ_i x[.., i]·w[i, j] + b[j]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let d_in = *xs.last().ok_or_else(|| dim_err("linear", &xs, &ws))?;
        if ws.len() != 2 || ws[0] != d_in {
            return Err(dim_err("linear", &xs, &ws));
        }
        let d_out = ws[1];
        if let Some(b) = b {
            if self.shape(b) != [d_out] {
                return Err(dim_err("linear", &ws, self.shape(b)));
            }
        }
        let m = numel(&xs) / d_in.max(1);
        let data = kernels::linear_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            m,
            d_in,
            d_out,
        );
        let mut out_shape = xs;
        *out_shape.last_mut().unwrap() = d_out;
        let v = Tensor::new(out_shape, data)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(v, Op::Linear { has_bias: b.is_some() }, inputs)
    }

    /// Cross-correlation with zero padding. `kernel` is `[C_out, C_in/groups, k, k]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>, stride: usize, padding: usize, groups: usize) -> Result<Var> {
        let (xs, ks) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if xs.len() != 4 || ks.len() != 4 || ks[2] != ks[3] || groups == 0 || stride == 0 {
            return Err(dim_err("conv2d", &xs, &ks));
        }
        let (batch, c_in, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (c_out, k) = (ks[0], ks[2]);
        if c_in % groups != 0 || c_out % groups != 0 || ks[1] != c_in / groups {
            return Err(dim_err("conv2d", &xs, &ks));
        }
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return Err(dim_err("conv2d", &ks, self.shape(b)));
            }
        }
        let span_h = (h + 2 * padding).checked_sub(k);
        let span_w = (w + 2 * padding).checked_sub(k);
        let (span_h, span_w) = match (span_h, span_w) {
            (Some(a), Some(b)) if a % stride == 0 && b % stride == 0 => (a, b),
            _ => {
                return Err(Error::Config(format!(
                    "conv2d output extent is not an integer for input {h}x{w}, kernel {k}, stride {stride}, padding {padding}"
                )))
            }
        };
        let geom = ConvGeom {
            batch,
            c_in,
            c_out,
            h,
            w,
            k,
            stride,
            padding,
            groups,
            h_out: span_h / stride + 1,
            w_out: span_w / stride + 1,
        };
        let data = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let v = Tensor::new(vec![batch, c_out, geom.h_out, geom.w_out], data)?;
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        self.push(
            v,
            Op::Conv2d {
                geom,
                has_bias: bias.is_some(),
            },
            inputs,
        )
    }

    /// Normalizes over the last extent.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().ok_or_else(|| dim_err("layer_norm", &xs, &[]))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(dim_err("layer_norm", &xs, self.shape(gamma)));
        }
        let (y, xhat, rstd) = kernels::layer_norm_forward(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            d,
            eps,
        );
        let v = Tensor::new(xs, y)?;
        self.push(v, Op::LayerNorm { xhat, rstd }, vec![x, gamma, beta])
    }

    fn image_dims(&self, op: &'static str, x: Var) -> Result<(usize, usize, usize, usize)> {
        match *self.shape(x) {
            [b, c, h, w] => Ok((b, c, h, w)),
            ref s => Err(dim_err(op, s, &[0, 0, 0, 0])),
        }
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.image_dims("global_avg_pool", x)?;
        let inv = T::one() / T::of((h * w) as f64);
        let data = self
            .value(x)
            .data()
            .chunks_exact(h * w)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let v = Tensor::new(vec![b, c, 1, 1], data)?;
        self.push(v, Op::GlobalAvgPool, vec![x])
    }

    /// 2×2 block mean.
    pub fn down2(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.image_dims("down2", x)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Config(format!("down2 requires even extents, got {h}x{w}")));
        }
        let data = kernels::down2_area(self.value(x).data(), b * c, h, w);
        let v = Tensor::new(vec![b, c, h / 2, w / 2], data)?;
        self.push(v, Op::Down2, vec![x])
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn up2(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.image_dims("up2", x)?;
        let data = kernels::up2_nearest(self.value(x).data(), b * c, h, w);
        let v = Tensor::new(vec![b, c, 2 * h, 2 * w], data)?;
        self.push(v, Op::Up2, vec![x])
    }

    // ── state space ──────────────────────────────────────────────────

    /// `Ā[b,l,d,n] = exp(Δ[b,l,d]·A[n])`.
    pub fn zoh_a(&mut self, a_diag: Var, delta: Var) -> Result<Var> {
        let (sa, sd) = (self.shape(a_diag).to_vec(), self.shape(delta).to_vec());
        if sa.len() != 1 || sd.len() != 3 {
            return Err(dim_err("zoh_a", &sa, &sd));
        }
        ssm::check_positive_delta(self.value(delta).data())?;
        let data = ssm::zoh_a(self.value(a_diag).data(), self.value(delta).data());
        let v = Tensor::new(vec![sd[0], sd[1], sd[2], sa[0]], data)?;
        self.push(v, Op::ZohA, vec![a_diag, delta])
    }

    /// `B̄[b,l,d,n] = (ΔA)⁻¹(exp(ΔA) − 1)·Δ·B[b,l,n]`.
    pub fn zoh_b(&mut self, a_diag: Var, b_in: Var, delta: Var) -> Result<Var> {
        let (sa, sb, sd) = (
            self.shape(a_diag).to_vec(),
            self.shape(b_in).to_vec(),
            self.shape(delta).to_vec(),
        );
        if sa.len() != 1 || sd.len() != 3 || sb != [sd[0], sd[1], sa[0]] {
            return Err(dim_err("zoh_b", &sb, &sd));
        }
        ssm::check_positive_delta(self.value(delta).data())?;
        let data = ssm::zoh_b(
            self.value(a_diag).data(),
            self.value(b_in).data(),
            self.value(delta).data(),
            sd[2],
        );
        let v = Tensor::new(vec![sd[0], sd[1], sd[2], sa[0]], data)?;
        self.push(v, Op::ZohB, vec![a_diag, b_in, delta])
    }

    /// Selective scan `h_t = Ā_t ⊙ h_{t−1} + B̄_t x_t`, `y_t = ⟨C_t, h_t⟩ + D ⊙ x_t`.
    pub fn selective_scan(
        &mut self,
        a_bar: Var,
        b_bar: Var,
        c_out: Var,
        d_skip: Var,
        x: Var,
        evaluator: Evaluator,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(dim_err("selective_scan", &xs, &[]));
        }
        let ab = self.shape(a_bar).to_vec();
        if ab.len() != 4 || ab[..3] != xs[..] || self.shape(b_bar) != ab.as_slice() {
            return Err(dim_err("selective_scan", &xs, &ab));
        }
        let n = ab[3];
        if self.shape(c_out) != [xs[0], xs[1], n] || self.shape(d_skip) != [xs[2]] {
            return Err(dim_err("selective_scan", &xs, self.shape(c_out)));
        }
        let dims = ssm::ScanDims {
            batch: xs[0],
            len: xs[1],
            dim: xs[2],
            state: n,
        };
        let (y, states) = ssm::scan_with_states(
            &dims,
            self.value(a_bar).data(),
            self.value(b_bar).data(),
            self.value(c_out).data(),
            self.value(d_skip).data(),
            self.value(x).data(),
            evaluator,
        );
        let v = Tensor::new(xs, y)?;
        self.push(v, Op::Scan { states }, vec![a_bar, b_bar, c_out, d_skip, x])
    }

    /// Records an op with a caller-supplied backward rule.
    pub fn custom(&mut self, name: &str, inputs: &[Var], output: Tensor<T>, backward: CustomBackward<T>) -> Result<Var> {
        self.push(
            output,
            Op::Custom {
                name: name.to_string(),
                backward,
            },
            inputs.to_vec(),
        )
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse pass from a single-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let root_val = self.value(root);
        if root_val.numel() != 1 {
            return Err(dim_err("backward", root_val.shape(), &[]));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(root_val.shape().to_vec(), T::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || node.inputs.is_empty() {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            let input_grads = self.node_backward(node, &gy)?;
            grads[i] = Some(gy);
            for (&inp, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[inp.0].requires_grad {
                    continue;
                }
                match &mut grads[inp.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Copies accumulated parameter gradients from `grads` into `store`.
    pub fn accumulate_param_grads(&self, grads: &Gradients<T>, store: &mut ParamStore<T>) {
        for (&id, &v) in &self.params {
            if let Some(g) = grads.get(v) {
                store.accumulate_grad(id, g);
            }
        }
    }

    fn node_backward(&self, node: &Node<T>, gy: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let inp = |k: usize| self.value(node.inputs[k]);
        let out = &node.value;
        let like = |t: &Tensor<T>, data: Vec<T>| Tensor::new(t.shape().to_vec(), data);
        let g = gy.data();
        let grads = match &node.op {
            Op::Leaf => vec![],
            Op::Add => vec![Some(gy.clone()), Some(gy.clone())],
            Op::Sub => vec![Some(gy.clone()), Some(gy.map(|v| -v))],
            Op::Mul => vec![
                Some(gy.zip_map(inp(1), |a, b| a * b)?),
                Some(gy.zip_map(inp(0), |a, b| a * b)?),
            ],
            Op::AddBcast(map) => {
                let mut gb = vec![T::zero(); inp(1).numel()];
                for (&gv, &j) in g.iter().zip(map) {
                    gb[j] += gv;
                }
                vec![Some(gy.clone()), Some(like(inp(1), gb)?)]
            }
            Op::MulBcast(map) => {
                let (a, b) = (inp(0).data(), inp(1).data());
                let mut gb = vec![T::zero(); b.len()];
                let mut ga = vec![T::zero(); a.len()];
                for (k, (&gv, &j)) in g.iter().zip(map).enumerate() {
                    ga[k] = gv * b[j];
                    gb[j] += gv * a[k];
                }
                vec![Some(like(inp(0), ga)?), Some(like(inp(1), gb)?)]
            }
            Op::Scale(c) => {
                let c = *c;
                vec![Some(gy.map(|v| v * c))]
            }
            Op::AddScalar => vec![Some(gy.clone())],
            Op::Exp => vec![Some(gy.zip_map(out, |a, y| a * y)?)],
            Op::Abs => vec![Some(gy.zip_map(inp(0), |a, x| {
                if x > T::zero() {
                    a
                } else if x < T::zero() {
                    -a
                } else {
                    T::zero()
                }
            })?)],
            Op::Sum => vec![Some(Tensor::full(inp(0).shape().to_vec(), g[0]))],
            Op::Mean => {
                let n = T::of(inp(0).numel() as f64);
                vec![Some(Tensor::full(inp(0).shape().to_vec(), g[0] / n))]
            }
            Op::Act(kind) => {
                let x = inp(0);
                let gx = match kind {
                    Activation::Silu => gy.zip_map(x, |a, v| a * kernels::silu_grad(v))?,
                    Activation::Sigmoid => gy.zip_map(out, |a, y| a * y * (T::one() - y))?,
                    Activation::Softplus => gy.zip_map(x, |a, v| a * kernels::sigmoid(v))?,
                    Activation::Softmax => {
                        let d = *x.shape().last().unwrap();
                        like(x, kernels::softmax_rows_backward(out.data(), g, d))?
                    }
                };
                vec![Some(gx)]
            }
            Op::Reshape => vec![Some(gy.reshape(inp(0).shape().to_vec())?)],
            Op::Permute(axes) => {
                let data = kernels::permute(g, out.shape(), &kernels::inverse_axes(axes));
                vec![Some(like(inp(0), data)?)]
            }
            Op::Flip(axis) => vec![Some(like(inp(0), kernels::flip(g, out.shape(), *axis))?)],
            Op::Concat(axis) => {
                let axis = *axis;
                let outer: usize = out.shape()[..axis].iter().product();
                let inner: usize = out.shape()[axis + 1..].iter().product();
                let row = out.shape()[axis] * inner;
                let mut offset = 0;
                let mut res = Vec::with_capacity(node.inputs.len());
                for k in 0..node.inputs.len() {
                    let t = inp(k);
                    let chunk = t.shape()[axis] * inner;
                    let mut data = Vec::with_capacity(t.numel());
                    for o in 0..outer {
                        data.extend_from_slice(&g[o * row + offset..][..chunk]);
                    }
                    offset += chunk;
                    res.push(Some(like(t, data)?));
                }
                res
            }
            Op::Narrow { axis, start } => {
                let (axis, start) = (*axis, *start);
                let x = inp(0);
                let outer: usize = x.shape()[..axis].iter().product();
                let inner: usize = x.shape()[axis + 1..].iter().product();
                let len = out.shape()[axis];
                let mut data = vec![T::zero(); x.numel()];
                for o in 0..outer {
                    data[(o * x.shape()[axis] + start) * inner..][..len * inner]
                        .copy_from_slice(&g[o * len * inner..][..len * inner]);
                }
                vec![Some(like(x, data)?)]
            }
            Op::Linear { has_bias } => {
                let (x, w) = (inp(0), inp(1));
                let (k, n) = (w.shape()[0], w.shape()[1]);
                let m = x.numel() / k.max(1);
                let (gx, gw, gb) = kernels::linear_backward(x.data(), w.data(), g, m, k, n);
                let mut res = vec![Some(like(x, gx)?), Some(like(w, gw)?)];
                if *has_bias {
                    res.push(Some(like(inp(2), gb)?));
                }
                res
            }
            Op::Conv2d { geom, has_bias } => {
                let (x, k) = (inp(0), inp(1));
                let (gx, gk, gb) = kernels::conv2d_backward(x.data(), k.data(), g, geom);
                let mut res = vec![Some(like(x, gx)?), Some(like(k, gk)?)];
                if *has_bias {
                    res.push(Some(like(inp(2), gb)?));
                }
                res
            }
            Op::LayerNorm { xhat, rstd } => {
                let gamma = inp(1);
                let d = gamma.numel();
                let (gx, gg, gb) = kernels::layer_norm_backward(g, xhat, rstd, gamma.data(), d);
                vec![Some(like(inp(0), gx)?), Some(like(gamma, gg)?), Some(like(inp(2), gb)?)]
            }
            Op::GlobalAvgPool => {
                let x = inp(0);
                let hw = x.shape()[2] * x.shape()[3];
                let inv = T::one() / T::of(hw as f64);
                let data = g.iter().flat_map(|&v| std::iter::repeat_n(v * inv, hw)).collect();
                vec![Some(like(x, data)?)]
            }
            Op::Down2 => {
                let s = inp(0).shape();
                vec![Some(like(inp(0), kernels::down2_area_backward(g, s[0] * s[1], s[2], s[3]))?)]
            }
            Op::Up2 => {
                let s = inp(0).shape();
                vec![Some(like(inp(0), kernels::up2_nearest_backward(g, s[0] * s[1], s[2], s[3]))?)]
            }
            Op::ZohA => {
                let (a, delta) = (inp(0), inp(1));
                let (ga, gd) = ssm::zoh_a_backward(a.data(), delta.data(), out.data(), g);
                vec![Some(like(a, ga)?), Some(like(delta, gd)?)]
            }
            Op::ZohB => {
                let (a, b, delta) = (inp(0), inp(1), inp(2));
                let d = delta.shape()[2];
                let (ga, gb, gd) = ssm::zoh_b_backward(a.data(), b.data(), delta.data(), d, g);
                vec![Some(like(a, ga)?), Some(like(b, gb)?), Some(like(delta, gd)?)]
            }
            Op::Scan { states } => {
                let x = inp(4);
                let xs = x.shape();
                let dims = ssm::ScanDims {
                    batch: xs[0],
                    len: xs[1],
                    dim: xs[2],
                    state: inp(0).shape()[3],
                };
                let sg = ssm::scan_backward(
                    &dims,
                    inp(0).data(),
                    inp(1).data(),
                    inp(2).data(),
                    inp(3).data(),
                    x.data(),
                    states,
                    g,
                );
                vec![
                    Some(like(inp(0), sg.a_bar)?),
                    Some(like(inp(1), sg.b_bar)?),
                    Some(like(inp(2), sg.c)?),
                    Some(like(inp(3), sg.d_skip)?),
                    Some(like(x, sg.x)?),
                ]
            }
            Op::Custom { backward, .. } => {
                let ins: Vec<&Tensor<T>> = node.inputs.iter().map(|&v| self.value(v)).collect();
                backward(&ins, out, gy).into_iter().map(Some).collect()
            }
        };
        Ok(grads)
    }
}
