//! Selective state-space primitive.
//!
//! Continuous system `h' = A h + B x`, `y = C h + D x` with diagonal `A`,
//! discretized by zero-order hold over an input-dependent step `Δ`:
//!
//! ```text
//! Ā = exp(Δ·A)
//! B̄ = (Δ·A)⁻¹ (exp(Δ·A) − 1) · Δ·B
//! h_t = Ā_t ⊙ h_{t−1} + B̄_t x_t,   h_0 = 0
//! y_t = ⟨C_t, h_t⟩ + D ⊙ x_t
//! ```
//!
//! Two evaluators compute the same recurrence: a left-to-right loop and a
//! work-efficient (up-sweep / down-sweep) prefix scan over the affine pairs
//! `(a, b)` with `(a₂, b₂) ∘ (a₁, b₁) = (a₂a₁, a₂b₁ + b₂)`.

use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::param::{ParamBuilder, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Below this `|Δ·A|`, `B̄` takes its limit value `Δ·B`.
pub const ZOH_LIMIT: f64 = 1e-8;
/// Below this `|Δ·A|`, the derivative of `(eˣ − 1)/x` uses its Taylor series.
const SERIES_LIMIT: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Evaluator {
    #[default]
    Sequential,
    Parallel,
}

impl FromStr for Evaluator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequential" => Ok(Evaluator::Sequential),
            "parallel" => Ok(Evaluator::Parallel),
            other => Err(Error::Config(format!(
                "unknown evaluator `{other}` (expected sequential or parallel)"
            ))),
        }
    }
}

impl std::fmt::Display for Evaluator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Evaluator::Sequential => "sequential",
            Evaluator::Parallel => "parallel",
        })
    }
}

// ── discretization kernels ───────────────────────────────────────────

/// `(eᶻ − 1)/z`, exactly 1 inside the limit branch.
#[inline]
fn phi<T: Real>(z: T) -> T {
    if z.abs() <= T::of(ZOH_LIMIT) {
        T::one()
    } else {
        z.exp_m1() / z
    }
}

/// d/dz of `(eᶻ − 1)/z`.
#[inline]
fn phi_prime<T: Real>(z: T) -> T {
    if z.abs() < T::of(SERIES_LIMIT) {
        let z2 = z * z;
        T::of(0.5) + z / T::of(3.0) + z2 / T::of(8.0) + z2 * z / T::of(30.0) + z2 * z2 / T::of(144.0)
    } else {
        (z.exp() - z.exp_m1() / z) / z
    }
}

/// `(eᶻ, φ(z), φ'(z))` from one `exp` and one `exp_m1`.
#[inline]
fn phi_with_derivative<T: Real>(z: T) -> (T, T, T) {
    let e = z.exp();
    let ph = phi(z);
    let dph = if z.abs() < T::of(SERIES_LIMIT) {
        phi_prime(z)
    } else {
        (e - ph) / z
    };
    (e, ph, dph)
}

pub(crate) fn check_positive_delta<T: Real>(delta: &[T]) -> Result<()> {
    match delta.iter().find(|&&d| d <= T::zero() || d.is_nan()) {
        Some(d) => Err(Error::Precondition {
            op: "discretize",
            msg: format!("step size must be positive, got {d}"),
        }),
        None => Ok(()),
    }
}

/// `Ā[b,l,d,n] = exp(Δ[b,l,d]·A[n])`, laid out `(B, L, D, N)`.
pub(crate) fn zoh_a<T: Real>(a: &[T], delta: &[T]) -> Vec<T> {
    let n = a.len();
    let mut out = Vec::with_capacity(delta.len() * n);
    for &dt in delta {
        out.extend(a.iter().map(|&av| (dt * av).exp()));
    }
    out
}

pub(crate) fn zoh_a_backward<T: Real>(a: &[T], delta: &[T], a_bar: &[T], g: &[T]) -> (Vec<T>, Vec<T>) {
    let n = a.len();
    let mut ga = vec![T::zero(); n];
    let mut gd = vec![T::zero(); delta.len()];
    for (p, &dt) in delta.iter().enumerate() {
        let mut acc = T::zero();
        for k in 0..n {
            let t = g[p * n + k] * a_bar[p * n + k];
            acc += t * a[k];
            ga[k] += t * dt;
        }
        gd[p] = acc;
    }
    (ga, gd)
}

/// `B̄[b,l,d,n] = φ(Δ·A[n])·Δ·B[b,l,n]` with `φ(z) = (eᶻ − 1)/z`.
pub(crate) fn zoh_b<T: Real>(a: &[T], b_in: &[T], delta: &[T], dim: usize) -> Vec<T> {
    let n = a.len();
    let mut out = Vec::with_capacity(delta.len() * n);
    for (p, &dt) in delta.iter().enumerate() {
        let pos = p / dim;
        let brow = &b_in[pos * n..][..n];
        out.extend(a.iter().zip(brow).map(|(&av, &bv)| phi(dt * av) * dt * bv));
    }
    out
}

/// Returns `(g_a, g_b, g_delta)`. Uses `∂B̄/∂Δ = exp(Δ·A)·B`.
pub(crate) fn zoh_b_backward<T: Real>(a: &[T], b_in: &[T], delta: &[T], dim: usize, g: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let n = a.len();
    let mut ga = vec![T::zero(); n];
    let mut gb = vec![T::zero(); b_in.len()];
    let mut gd = vec![T::zero(); delta.len()];
    for (p, &dt) in delta.iter().enumerate() {
        let pos = p / dim;
        let mut acc = T::zero();
        for k in 0..n {
            let gv = g[p * n + k];
            let bv = b_in[pos * n + k];
            let z = dt * a[k];
            let (e, ph, dph) = phi_with_derivative(z);
            acc += gv * e * bv;
            ga[k] += gv * dph * dt * dt * bv;
            gb[pos * n + k] += gv * ph * dt;
        }
        gd[p] = acc;
    }
    (ga, gb, gd)
}

// ── scan kernels ─────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScanDims {
    pub batch: usize,
    pub len: usize,
    pub dim: usize,
    pub state: usize,
}

/// `(a₂, b₂) ∘ (a₁, b₁) = (a₂a₁, a₂b₁ + b₂)`: apply `inner` first, then `outer`.
#[inline]
pub fn compose<T: Real>(outer: (T, T), inner: (T, T)) -> (T, T) {
    (outer.0 * inner.0, outer.0 * inner.1 + outer.1)
}

/// Inclusive prefix of affine pairs via an up-sweep / down-sweep scan.
/// Returns the `b` component of every prefix (the hidden state with `h₀ = 0`).
pub fn prefix_scan_affine<T: Real>(a: &[T], u: &[T]) -> Vec<T> {
    let len = a.len();
    if len == 0 {
        return Vec::new();
    }
    let size = len.next_power_of_two();
    let identity = (T::one(), T::zero());
    let mut tree: Vec<(T, T)> = a.iter().copied().zip(u.iter().copied()).collect();
    tree.resize(size, identity);

    let mut stride = 1;
    while stride < size {
        let mut i = 2 * stride - 1;
        while i < size {
            tree[i] = compose(tree[i], tree[i - stride]);
            i += 2 * stride;
        }
        stride *= 2;
    }

    tree[size - 1] = identity;
    stride = size / 2;
    while stride >= 1 {
        let mut i = 2 * stride - 1;
        while i < size {
            let left = tree[i - stride];
            tree[i - stride] = tree[i];
            tree[i] = compose(left, tree[i]);
            i += 2 * stride;
        }
        stride /= 2;
    }

    // tree now holds exclusive prefixes; fold in each element.
    (0..len).map(|t| a[t] * tree[t].1 + u[t]).collect()
}

fn readout<T: Real>(dims: &ScanDims, c: &[T], d_skip: &[T], x: &[T], states: &[T]) -> Vec<T> {
    let (dd, nn) = (dims.dim, dims.state);
    let mut y = vec![T::zero(); x.len()];
    for pos in 0..dims.batch * dims.len {
        let crow = &c[pos * nn..][..nn];
        for d in 0..dd {
            let h = &states[(pos * dd + d) * nn..][..nn];
            let mut acc = d_skip[d] * x[pos * dd + d];
            for k in 0..nn {
                acc += crow[k] * h[k];
            }
            y[pos * dd + d] = acc;
        }
    }
    y
}

fn states_sequential<T: Real>(dims: &ScanDims, a_bar: &[T], b_bar: &[T], x: &[T]) -> Vec<T> {
    let (ll, dd, nn) = (dims.len, dims.dim, dims.state);
    let mut states = vec![T::zero(); a_bar.len()];
    for b in 0..dims.batch {
        let mut h = vec![T::zero(); dd * nn];
        for l in 0..ll {
            let pos = b * ll + l;
            let base = pos * dd * nn;
            for d in 0..dd {
                let xv = x[pos * dd + d];
                for k in 0..nn {
                    let i = d * nn + k;
                    h[i] = a_bar[base + i] * h[i] + b_bar[base + i] * xv;
                }
            }
            states[base..base + dd * nn].copy_from_slice(&h);
        }
    }
    states
}

fn states_parallel<T: Real>(dims: &ScanDims, a_bar: &[T], b_bar: &[T], x: &[T]) -> Vec<T> {
    let (ll, dd, nn) = (dims.len, dims.dim, dims.state);
    let chains: Vec<Vec<T>> = (0..dims.batch * dd * nn)
        .into_par_iter()
        .map(|chain| {
            let b = chain / (dd * nn);
            let d = (chain / nn) % dd;
            let k = chain % nn;
            let idx = |l: usize| ((b * ll + l) * dd + d) * nn + k;
            let a: Vec<T> = (0..ll).map(|l| a_bar[idx(l)]).collect();
            let u: Vec<T> = (0..ll).map(|l| b_bar[idx(l)] * x[(b * ll + l) * dd + d]).collect();
            prefix_scan_affine(&a, &u)
        })
        .collect();
    let mut states = vec![T::zero(); a_bar.len()];
    for (chain, h) in chains.iter().enumerate() {
        let b = chain / (dd * nn);
        let d = (chain / nn) % dd;
        let k = chain % nn;
        for (l, &v) in h.iter().enumerate() {
            states[((b * ll + l) * dd + d) * nn + k] = v;
        }
    }
    states
}

/// Runs the scan and returns `(y, hidden states)`; states are laid out like `Ā`.
pub(crate) fn scan_with_states<T: Real>(
    dims: &ScanDims,
    a_bar: &[T],
    b_bar: &[T],
    c: &[T],
    d_skip: &[T],
    x: &[T],
    evaluator: Evaluator,
) -> (Vec<T>, Vec<T>) {
    let states = match evaluator {
        Evaluator::Sequential => states_sequential(dims, a_bar, b_bar, x),
        Evaluator::Parallel => states_parallel(dims, a_bar, b_bar, x),
    };
    (readout(dims, c, d_skip, x, &states), states)
}

pub(crate) struct ScanGrads<T> {
    pub a_bar: Vec<T>,
    pub b_bar: Vec<T>,
    pub c: Vec<T>,
    pub d_skip: Vec<T>,
    pub x: Vec<T>,
}

/// Adjoint recurrence `λ_t = C_t·ḡ_t + Ā_{t+1} ⊙ λ_{t+1}` run right-to-left.
#[allow(clippy::too_many_arguments)]
pub(crate) fn scan_backward<T: Real>(
    dims: &ScanDims,
    a_bar: &[T],
    b_bar: &[T],
    c: &[T],
    d_skip: &[T],
    x: &[T],
    states: &[T],
    gy: &[T],
) -> ScanGrads<T> {
    let (ll, dd, nn) = (dims.len, dims.dim, dims.state);
    let mut ga = vec![T::zero(); a_bar.len()];
    let mut gb = vec![T::zero(); b_bar.len()];
    let mut gc = vec![T::zero(); c.len()];
    let mut gd = vec![T::zero(); dd];
    let mut gx = vec![T::zero(); x.len()];
    for b in 0..dims.batch {
        let mut carry = vec![T::zero(); dd * nn];
        for l in (0..ll).rev() {
            let pos = b * ll + l;
            let base = pos * dd * nn;
            for d in 0..dd {
                let g = gy[pos * dd + d];
                let xv = x[pos * dd + d];
                gd[d] += g * xv;
                let mut gxv = d_skip[d] * g;
                for k in 0..nn {
                    let i = d * nn + k;
                    gc[pos * nn + k] += g * states[base + i];
                    let lam = carry[i] + c[pos * nn + k] * g;
                    gxv += lam * b_bar[base + i];
                    gb[base + i] = lam * xv;
                    if l > 0 {
                        ga[base + i] = lam * states[base - dd * nn + i];
                    }
                    carry[i] = a_bar[base + i] * lam;
                }
                gx[pos * dd + d] = gxv;
            }
        }
    }
    ScanGrads {
        a_bar: ga,
        b_bar: gb,
        c: gc,
        d_skip: gd,
        x: gx,
    }
}

// ── tensor-level API ─────────────────────────────────────────────────

/// Discretized parameters, both shaped `(B, L, D, N)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretizedParams<T: Real> {
    pub a_bar: Tensor<T>,
    pub b_bar: Tensor<T>,
}

/// Zero-order-hold discretization of a diagonal system.
///
/// `a_diag: [N]`, `b: [B, L, N]`, `delta: [B, L, D]`.
pub fn discretize<T: Real>(a_diag: &Tensor<T>, b: &Tensor<T>, delta: &Tensor<T>) -> Result<DiscretizedParams<T>> {
    let mut g = Graph::new().unchecked();
    let (a, bv, dv) = (g.constant(a_diag.clone()), g.constant(b.clone()), g.constant(delta.clone()));
    let a_bar = g.zoh_a(a, dv)?;
    let b_bar = g.zoh_b(a, bv, dv)?;
    Ok(DiscretizedParams {
        a_bar: g.value(a_bar).clone(),
        b_bar: g.value(b_bar).clone(),
    })
}

fn scan_tensors<T: Real>(
    disc: &DiscretizedParams<T>,
    c_out: &Tensor<T>,
    d_skip: &Tensor<T>,
    x: &Tensor<T>,
    evaluator: Evaluator,
) -> Result<Tensor<T>> {
    let mut g = Graph::new().unchecked();
    let vars = [
        g.constant(disc.a_bar.clone()),
        g.constant(disc.b_bar.clone()),
        g.constant(c_out.clone()),
        g.constant(d_skip.clone()),
        g.constant(x.clone()),
    ];
    let y = g.selective_scan(vars[0], vars[1], vars[2], vars[3], vars[4], evaluator)?;
    Ok(g.value(y).clone())
}

/// Left-to-right evaluation of the recurrence.
pub fn scan_sequential<T: Real>(disc: &DiscretizedParams<T>, c_out: &Tensor<T>, d_skip: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    scan_tensors(disc, c_out, d_skip, x, Evaluator::Sequential)
}

/// Prefix-scan evaluation of the recurrence.
pub fn scan_parallel<T: Real>(disc: &DiscretizedParams<T>, c_out: &Tensor<T>, d_skip: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    scan_tensors(disc, c_out, d_skip, x, Evaluator::Parallel)
}

// ── learned layer ────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsmConfig {
    /// Feature dimension `D` of the input sequence.
    pub dim: usize,
    /// State size `N`.
    pub state: usize,
    pub evaluator: Evaluator,
}

/// Learned quantities of one selective SSM: `A = −exp(log_a)`, rank-1 step
/// projection with bias, full `B`/`C` projections, and the `D` skip.
#[derive(Debug, Clone)]
pub struct SsmParams {
    pub cfg: SsmConfig,
    pub log_a: ParamId,
    pub b_proj: ParamId,
    pub c_proj: ParamId,
    pub dt_down: ParamId,
    pub dt_up: ParamId,
    pub dt_bias: ParamId,
    pub d_skip: ParamId,
}

/// Per-position selective quantities.
#[derive(Debug, Clone, Copy)]
pub struct Selective {
    pub delta: Var,
    pub b_in: Var,
    pub c_out: Var,
}

const DT_MIN: f64 = 1e-3;
const DT_MAX: f64 = 1e-1;

impl SsmParams {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, cfg: SsmConfig) -> Result<Self> {
        if cfg.dim == 0 || cfg.state == 0 {
            return Err(Error::Config(format!("ssm extents must be positive, got D={} N={}", cfg.dim, cfg.state)));
        }
        let (d, n) = (cfg.dim, cfg.state);
        // A spans [-1, -N] geometrically.
        let log_a = Tensor::from_fn(vec![n], |k| {
            let frac = if n > 1 { k as f64 / (n - 1) as f64 } else { 0.0 };
            T::of(frac * (n as f64).ln())
        });
        let log_a = pb.tensor("log_a", log_a)?;
        let b_proj = pb.fan_in_uniform("b_proj", &[d, n], d)?;
        let c_proj = pb.fan_in_uniform("c_proj", &[d, n], d)?;
        let dt_down = pb.fan_in_uniform("dt_down", &[d, 1], d)?;
        let dt_up = pb.fan_in_uniform("dt_up", &[1, d], 1)?;
        // softplus(bias) lands log-uniformly in [DT_MIN, DT_MAX].
        let bias: Vec<T> = (0..d)
            .map(|_| {
                let u = pb.rng().uniform(0.0, 1.0);
                let dt = (DT_MIN.ln() + u * (DT_MAX.ln() - DT_MIN.ln())).exp();
                T::of(dt + (-(-dt).exp_m1()).ln())
            })
            .collect();
        let dt_bias = pb.tensor("dt_bias", Tensor::new(vec![d], bias)?)?;
        let d_skip = pb.ones("d_skip", &[d])?;
        Ok(Self {
            cfg,
            log_a,
            b_proj,
            c_proj,
            dt_down,
            dt_up,
            dt_bias,
            d_skip,
        })
    }

    pub fn param_count(cfg: &SsmConfig) -> usize {
        let (d, n) = (cfg.dim, cfg.state);
        n + 2 * d * n + d + d + d + d
    }

    /// `A = −exp(log_a)`, strictly negative.
    pub fn a_diag<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>) -> Result<Var> {
        let log_a = g.param(ps, self.log_a);
        let e = g.exp(log_a)?;
        g.neg(e)
    }

    /// `Δ = softplus(W_up(W_down x) + bias)`, `B = W_B x`, `C = W_C x`.
    pub fn selective<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Selective> {
        let s = g.shape(x);
        if s.len() != 3 || s[2] != self.cfg.dim {
            return Err(dim_err("selective_params", s, &[self.cfg.dim]));
        }
        let (dd, du, db) = (g.param(ps, self.dt_down), g.param(ps, self.dt_up), g.param(ps, self.dt_bias));
        let r = g.linear(x, dd, None)?;
        let pre = g.linear(r, du, Some(db))?;
        let delta = g.softplus(pre)?;
        let wb = g.param(ps, self.b_proj);
        let wc = g.param(ps, self.c_proj);
        let b_in = g.linear(x, wb, None)?;
        let c_out = g.linear(x, wc, None)?;
        Ok(Selective { delta, b_in, c_out })
    }

    /// Full layer on `x: [B, L, D]`: selective parameters → ZOH → scan.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        self.forward_with(g, ps, x, self.cfg.evaluator)
    }

    pub fn forward_with<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var, evaluator: Evaluator) -> Result<Var> {
        let sel = self.selective(g, ps, x)?;
        let a = self.a_diag(g, ps)?;
        let a_bar = g.zoh_a(a, sel.delta)?;
        let b_bar = g.zoh_b(a, sel.b_in, sel.delta)?;
        let d_skip = g.param(ps, self.d_skip);
        g.selective_scan(a_bar, b_bar, sel.c_out, d_skip, x, evaluator)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::RngState;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn discretize_half_life_step() {
        let d = discretize(&t(&[1], &[-1.0]), &t(&[1, 1, 1], &[1.0]), &t(&[1, 1, 1], &[2f64.ln()])).unwrap();
        assert!((d.a_bar.item() - 0.5).abs() <= 1e-12);
        assert!((d.b_bar.item() - 0.5).abs() <= 1e-12);
    }

    #[test]
    fn discretize_a_minus_two() {
        let d = discretize(&t(&[1], &[-2.0]), &t(&[1, 1, 1], &[3.0]), &t(&[1, 1, 1], &[1.0])).unwrap();
        let want_b = (-0.5) * ((-2f64).exp() - 1.0) * 3.0;
        assert!((d.a_bar.item() - (-2f64).exp()).abs() < 1e-15);
        assert!((d.b_bar.item() - want_b).abs() < 1e-14);
        assert!((d.b_bar.item() - 1.29699).abs() < 1e-5);
    }

    #[test]
    fn discretize_limit_branch() {
        let d = discretize(&t(&[1], &[-1.0]), &t(&[1, 1, 1], &[2.0]), &t(&[1, 1, 1], &[1e-10])).unwrap();
        assert!((d.a_bar.item() - 1.0).abs() < 1e-9);
        assert!((d.b_bar.item() - 2e-10).abs() <= 1e-12);
        // |ΔA| exactly at the threshold with Δ = 1.
        let d = discretize(&t(&[1], &[-1e-8]), &t(&[1, 1, 1], &[1.0]), &t(&[1, 1, 1], &[1.0])).unwrap();
        assert!((d.b_bar.item() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn discretize_rejects_nonpositive_step() {
        let err = discretize(&t(&[1], &[-1.0]), &t(&[1, 1, 1], &[1.0]), &t(&[1, 1, 1], &[0.0]));
        assert!(matches!(err, Err(Error::Precondition { .. })));
    }

    #[test]
    fn phi_prime_matches_central_difference_on_both_sides_of_the_switch() {
        let h = 1e-5;
        for &z in &[-0.5f64, -2e-3, -1.0001e-3, -0.9999e-3, -1e-4, 1e-4, 0.9999e-3, 1.0001e-3, 0.3] {
            let fd = (phi(z + h) - phi(z - h)) / (2.0 * h);
            assert!((phi_prime(z) - fd).abs() < 1e-8, "z={z}: {} vs {fd}", phi_prime(z));
        }
    }

    fn disc(a: &[f64], b: &[f64], shape: &[usize]) -> DiscretizedParams<f64> {
        DiscretizedParams {
            a_bar: t(shape, a),
            b_bar: t(shape, b),
        }
    }

    #[test]
    fn hand_unrolled_scalar_recurrence() {
        let p = disc(&[0.5; 3], &[1.0; 3], &[1, 3, 1, 1]);
        let c = t(&[1, 3, 1], &[1.0; 3]);
        let dskip = t(&[1], &[0.0]);
        let x = t(&[1, 3, 1], &[1.0; 3]);
        let y = scan_sequential(&p, &c, &dskip, &x).unwrap();
        assert_eq!(y.data(), &[1.0, 1.5, 1.75]);
        let yp = scan_parallel(&p, &c, &dskip, &x).unwrap();
        assert_eq!(yp.data(), &[1.0, 1.5, 1.75]);
    }

    #[test]
    fn zero_carry_is_memoryless_and_single_step_matches() {
        let mut rng = RngState::new(3);
        let (l, d, n) = (5, 2, 3);
        let a = Tensor::zeros(vec![1, l, d, n]);
        let b: Tensor<f64> = rng.uniform_tensor(vec![1, l, d, n], -1.0, 1.0);
        let c: Tensor<f64> = rng.uniform_tensor(vec![1, l, n], -1.0, 1.0);
        let ds: Tensor<f64> = rng.uniform_tensor(vec![d], -1.0, 1.0);
        let x: Tensor<f64> = rng.uniform_tensor(vec![1, l, d], -1.0, 1.0);
        let y = scan_sequential(&DiscretizedParams { a_bar: a, b_bar: b.clone() }, &c, &ds, &x).unwrap();
        for li in 0..l {
            for di in 0..d {
                let xv = x.data()[li * d + di];
                let cb: f64 = (0..n).map(|k| c.data()[li * n + k] * b.data()[(li * d + di) * n + k]).sum();
                let want = cb * xv + ds.data()[di] * xv;
                assert!((y.data()[li * d + di] - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn prefix_scan_on_non_power_of_two_lengths() {
        let mut rng = RngState::new(11);
        for len in 1..40 {
            let a: Vec<f64> = (0..len).map(|_| rng.uniform(0.0, 1.0)).collect();
            let u: Vec<f64> = (0..len).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let got = prefix_scan_affine(&a, &u);
            let mut h = 0.0;
            for i in 0..len {
                h = a[i] * h + u[i];
                assert!((got[i] - h).abs() < 1e-12);
            }
        }
    }
}
