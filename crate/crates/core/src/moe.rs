//! Mixture-of-experts sites: the feed-forward MoE inside every block, the
//! multi-scale MoE over encoder features, and the convolutional MoEs that
//! redistribute fused features to the decoder skips.
//!
//! Every site uses a dense soft mixture `y(b) = Σ_i w_i(b)·Expert_i(x(b))`
//! with `w = softmax(Linear(GAP(x)))`, accumulated in expert-index order.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Conv2d, Linear, Module};
use crate::param::{ParamBuilder, ParamStore};
use crate::tensor::{Real, Tensor};

/// Logit offset applied to experts dropped by top-k routing.
const DROPPED_LOGIT: f64 = -1e4;

/// `GAP → Linear → softmax`, one weight vector per sample.
#[derive(Debug, Clone)]
pub struct GateNet {
    pub proj: Linear,
    pub n_experts: usize,
    /// 0 keeps every expert (dense mixture).
    pub top_k: usize,
}

impl GateNet {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, channels: usize, n_experts: usize, top_k: usize) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(&mut pb.sub("proj"), channels, n_experts, true)?,
            n_experts,
            top_k,
        })
    }

    pub fn param_count(channels: usize, n_experts: usize) -> usize {
        Linear::param_count(channels, n_experts, true)
    }

    /// Gate weights `[B, n_experts]`.
    pub fn weights<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let pooled = g.global_avg_pool(x)?;
        let (b, c) = (g.shape(x)[0], g.shape(x)[1]);
        let flat = g.reshape(pooled, &[b, c])?;
        let mut logits = self.proj.forward(g, ps, flat)?;
        if self.top_k > 0 && self.top_k < self.n_experts {
            let mask = top_k_mask(g.value(logits), self.n_experts, self.top_k);
            let m = g.constant(mask);
            logits = g.add(logits, m)?;
        }
        g.softmax(logits)
    }
}

fn top_k_mask<T: Real>(logits: &Tensor<T>, n: usize, k: usize) -> Tensor<T> {
    let mut mask = Tensor::zeros(logits.shape().to_vec());
    for (row, out) in logits.data().chunks_exact(n).zip(mask.data_mut().chunks_exact_mut(n)) {
        let mut order: Vec<usize> = (0..n).collect();
        // stable: ties keep the lower expert index
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal));
        for &dropped in &order[k..] {
            out[dropped] = T::of(DROPPED_LOGIT);
        }
    }
    mask
}

/// `Σ_i w[:, i] · outputs[i]`, summed in index order.
pub fn mix<T: Real>(g: &mut Graph<T>, weights: Var, outputs: &[Var]) -> Result<Var> {
    let (b, n) = match *g.shape(weights) {
        [b, n] => (b, n),
        ref s => return Err(crate::error::dim_err("mix", s, &[outputs.len()])),
    };
    if n != outputs.len() || n == 0 {
        return Err(Error::Config(format!("mix: {n} gate weights for {} experts", outputs.len())));
    }
    let mut acc: Option<Var> = None;
    for (i, &out) in outputs.iter().enumerate() {
        let rank = g.shape(out).len();
        let mut wshape = vec![1; rank];
        wshape[0] = b;
        let wi = g.narrow(weights, 1, i, 1)?;
        let wi = g.reshape(wi, &wshape)?;
        let term = g.mul_broadcast(out, wi)?;
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term)?,
        });
    }
    Ok(acc.expect("at least one expert"))
}

/// Gated soft mixture over a set of identically shaped experts.
#[derive(Debug, Clone)]
pub struct Moe<E> {
    pub experts: Vec<E>,
    pub gate: GateNet,
}

/// Intermediate values of one mixture evaluation.
#[derive(Debug, Clone)]
pub struct MoeTrace {
    pub weights: Var,
    pub expert_outputs: Vec<Var>,
    pub output: Var,
}

impl<E: Module> Moe<E> {
    pub fn new<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        gate_channels: usize,
        n_experts: usize,
        top_k: usize,
        mut build: impl FnMut(&mut ParamBuilder<'_, T>) -> Result<E>,
    ) -> Result<Self> {
        if n_experts == 0 {
            return Err(Error::Config("mixture of experts needs at least one expert".into()));
        }
        let experts = (0..n_experts)
            .map(|i| build(&mut pb.sub(&format!("expert{i}"))))
            .collect::<Result<Vec<_>>>()?;
        let gate = GateNet::new(&mut pb.sub("gate"), gate_channels, n_experts, top_k)?;
        Ok(Self { experts, gate })
    }

    pub fn trace<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<MoeTrace> {
        if self.experts.is_empty() {
            return Err(Error::Config("mixture of experts needs at least one expert".into()));
        }
        let weights = self.gate.weights(g, ps, x)?;
        let expert_outputs = self
            .experts
            .iter()
            .map(|e| e.forward(g, ps, x))
            .collect::<Result<Vec<_>>>()?;
        let output = mix(g, weights, &expert_outputs)?;
        Ok(MoeTrace {
            weights,
            expert_outputs,
            output,
        })
    }
}

impl<E: Module> Module for Moe<E> {
    fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        Ok(self.trace(g, ps, x)?.output)
    }
}

// ── feed-forward experts ─────────────────────────────────────────────

/// Pointwise expand ×2 → SiLU → pointwise contract.
#[derive(Debug, Clone)]
pub struct FfExpert {
    pub expand: Conv2d,
    pub contract: Conv2d,
}

impl FfExpert {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, channels: usize) -> Result<Self> {
        Ok(Self {
            expand: Conv2d::same(&mut pb.sub("expand"), channels, 2 * channels, 1)?,
            contract: Conv2d::same(&mut pb.sub("contract"), 2 * channels, channels, 1)?,
        })
    }

    pub fn param_count(channels: usize) -> usize {
        Conv2d::param_count(channels, 2 * channels, 1, 1) + Conv2d::param_count(2 * channels, channels, 1, 1)
    }
}

impl Module for FfExpert {
    fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.expand.forward(g, ps, x)?;
        let h = g.silu(h)?;
        self.contract.forward(g, ps, h)
    }
}

pub type FfMoe = Moe<FfExpert>;

impl FfMoe {
    pub fn feed_forward<T: Real>(pb: &mut ParamBuilder<'_, T>, channels: usize, n_experts: usize, top_k: usize) -> Result<Self> {
        Moe::new(pb, channels, n_experts, top_k, |pb| FfExpert::new(pb, channels))
    }

    pub fn feed_forward_param_count(channels: usize, n_experts: usize) -> usize {
        n_experts * FfExpert::param_count(channels) + GateNet::param_count(channels, n_experts)
    }
}

// ── multi-scale MoE ──────────────────────────────────────────────────

/// Unifies three encoder scales at the middle resolution, concatenates them
/// over channels, and mixes scan experts over the result.
#[derive(Debug, Clone)]
pub struct MsMoe<E> {
    pub reduce: [Conv2d; 3],
    pub common: usize,
    pub moe: Moe<E>,
}

impl<E: Module> MsMoe<E> {
    pub fn new<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        widths: [usize; 3],
        common: usize,
        n_experts: usize,
        top_k: usize,
        build: impl FnMut(&mut ParamBuilder<'_, T>) -> Result<E>,
    ) -> Result<Self> {
        let reduce = [
            Conv2d::same(&mut pb.sub("reduce1"), widths[0], common, 1)?,
            Conv2d::same(&mut pb.sub("reduce2"), widths[1], common, 1)?,
            Conv2d::same(&mut pb.sub("reduce3"), widths[2], common, 1)?,
        ];
        let moe = Moe::new(&mut pb.sub("moe"), 3 * common, n_experts, top_k, build)?;
        Ok(Self { reduce, common, moe })
    }

    /// `Y_cat = concat(down(conv Y1), conv Y2, up(conv Y3))` at the middle scale.
    pub fn concat<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, ys: [Var; 3]) -> Result<Var> {
        let r1 = self.reduce[0].forward(g, ps, ys[0])?;
        let r1 = g.down2(r1)?;
        let r2 = self.reduce[1].forward(g, ps, ys[1])?;
        let r3 = self.reduce[2].forward(g, ps, ys[2])?;
        let r3 = g.up2(r3)?;
        g.concat(&[r1, r2, r3], 1)
    }

    pub fn trace<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, ys: [Var; 3]) -> Result<MoeTrace> {
        let cat = self.concat(g, ps, ys)?;
        self.moe.trace(g, ps, cat)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, ys: [Var; 3]) -> Result<Var> {
        Ok(self.trace(g, ps, ys)?.output)
    }
}

// ── convolutional resampling MoE ─────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resample {
    Up2,
    Keep,
    Down2,
}

impl Resample {
    /// Resampling from the middle scale to scale `index` (1 = full, 2 = half, 3 = quarter).
    pub fn from_middle(index: usize) -> Result<Self> {
        match index {
            1 => Ok(Resample::Up2),
            2 => Ok(Resample::Keep),
            3 => Ok(Resample::Down2),
            other => Err(Error::Config(format!(
                "scale index {other} is unreachable from the middle scale by a factor-2 resample"
            ))),
        }
    }
}

/// 3×3 conv to the target width plus a factor-2 resample to the target size.
#[derive(Debug, Clone)]
pub struct ConvResampler {
    pub conv: Conv2d,
    pub resample: Resample,
}

impl ConvResampler {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, c_in: usize, c_out: usize, resample: Resample) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::same(&mut pb.sub("conv"), c_in, c_out, 3)?,
            resample,
        })
    }
}

impl Module for ConvResampler {
    fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        match self.resample {
            Resample::Up2 => {
                let y = self.conv.forward(g, ps, x)?;
                g.up2(y)
            }
            Resample::Keep => self.conv.forward(g, ps, x),
            Resample::Down2 => {
                let y = g.down2(x)?;
                self.conv.forward(g, ps, y)
            }
        }
    }
}

pub type ConvMoe = Moe<ConvResampler>;

impl ConvMoe {
    /// MoE mapping the fused middle-scale feature to scale `index`.
    pub fn resampling<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        c_in: usize,
        c_out: usize,
        index: usize,
        n_experts: usize,
        top_k: usize,
    ) -> Result<Self> {
        let resample = Resample::from_middle(index)?;
        Moe::new(pb, c_in, n_experts, top_k, |pb| ConvResampler::new(pb, c_in, c_out, resample))
    }

    pub fn resampling_param_count(c_in: usize, c_out: usize, n_experts: usize) -> usize {
        n_experts * Conv2d::param_count(c_in, c_out, 3, 1) + GateNet::param_count(c_in, n_experts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::RngState;

    struct Scaled(f64);

    impl Module for Scaled {
        fn forward<T: Real>(&self, g: &mut Graph<T>, _ps: &ParamStore<T>, x: Var) -> Result<Var> {
            g.scale(x, T::of(self.0))
        }
    }

    #[test]
    fn identity_and_negation_cancel_under_equal_weights() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_fn(vec![2, 3, 2, 2], |i| i as f64 - 5.0));
        let w = g.constant(Tensor::full(vec![2, 2], 0.5));
        let ps = ParamStore::new();
        let a = Scaled(1.0).forward(&mut g, &ps, x).unwrap();
        let b = Scaled(-1.0).forward(&mut g, &ps, x).unwrap();
        let y = mix(&mut g, w, &[a, b]).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_expert_set_is_config_error() {
        let mut ps = ParamStore::<f64>::new();
        let mut rng = RngState::new(0);
        let mut pb = ParamBuilder::new(&mut ps, &mut rng);
        assert!(matches!(FfMoe::feed_forward(&mut pb, 4, 0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn top_k_keeps_only_k_experts() {
        let mut ps = ParamStore::<f64>::new();
        let mut rng = RngState::new(1);
        let gate = GateNet::new(&mut ParamBuilder::new(&mut ps, &mut rng), 3, 4, 2).unwrap();
        let mut g = Graph::new();
        let x = g.input(rng.uniform_tensor(vec![5, 3, 2, 2], -1.0, 1.0));
        let w = gate.weights(&mut g, &ps, x).unwrap();
        for row in g.value(w).data().chunks(4) {
            assert_eq!(row.iter().filter(|&&v| v > 1e-12).count(), 2);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    fn weighted_sum_oracle(g: &Graph<f64>, trace: &MoeTrace) -> Vec<f64> {
        let w = g.value(trace.weights);
        let n = trace.expert_outputs.len();
        let out0 = g.value(trace.expert_outputs[0]);
        let per_sample = out0.numel() / out0.shape()[0];
        let mut acc = vec![0.0; out0.numel()];
        for (i, &e) in trace.expert_outputs.iter().enumerate() {
            for (j, v) in g.value(e).data().iter().enumerate() {
                acc[j] += w.data()[(j / per_sample) * n + i] * v;
            }
        }
        acc
    }

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn feed_forward_mixture_matches_oracle() {
        for n in [1, 2, 4] {
            let mut ps = ParamStore::<f64>::new();
            let mut rng = RngState::new(20 + n as u64);
            let moe = FfMoe::feed_forward(&mut ParamBuilder::new(&mut ps, &mut rng), 3, n, 0).unwrap();
            let mut g = Graph::new();
            let x = g.input(rng.uniform_tensor(vec![3, 3, 4, 4], -1.0, 1.0));
            let t = moe.trace(&mut g, &ps, x).unwrap();
            for row in g.value(t.weights).data().chunks(n) {
                assert!(row.iter().all(|&v| v >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            }
            assert!(max_diff(g.value(t.output).data(), &weighted_sum_oracle(&g, &t)) <= 1e-7);
            if n == 1 {
                let single = moe.experts[0].forward(&mut g, &ps, x).unwrap();
                assert!(g.value(t.output).max_abs_diff(g.value(single)) <= 1e-7);
            }
        }
    }

    #[test]
    fn every_expert_receives_gradient() {
        let mut ps = ParamStore::<f64>::new();
        let mut rng = RngState::new(31);
        let moe = FfMoe::feed_forward(&mut ParamBuilder::new(&mut ps, &mut rng), 3, 4, 0).unwrap();
        let mut g = Graph::new();
        let x = g.input(rng.uniform_tensor(vec![2, 3, 4, 4], -1.0, 1.0));
        let y = moe.forward(&mut g, &ps, x).unwrap();
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        for e in &moe.experts {
            let gk = grads.get(g.param_var(e.contract.kernel).unwrap()).unwrap();
            assert!(gk.data().iter().any(|&v| v != 0.0));
            let ge = grads.get(g.param_var(e.expand.kernel).unwrap()).unwrap();
            assert!(ge.data().iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn mixture_is_linear_in_expert_outputs_for_fixed_gate() {
        let mut rng = RngState::new(3);
        let mut g = Graph::<f64>::new();
        let w = g.constant(Tensor::new(vec![2, 3], vec![0.2, 0.5, 0.3, 0.6, 0.1, 0.3]).unwrap());
        let a: Vec<Var> = (0..3).map(|_| g.input(rng.uniform_tensor(vec![2, 2, 3, 3], -1.0, 1.0))).collect();
        let b: Vec<Var> = (0..3).map(|_| g.input(rng.uniform_tensor(vec![2, 2, 3, 3], -1.0, 1.0))).collect();
        let ab: Vec<Var> = a.iter().zip(&b).map(|(&x, &y)| g.add(x, y).unwrap()).collect();
        let ya = mix(&mut g, w, &a).unwrap();
        let yb = mix(&mut g, w, &b).unwrap();
        let yab = mix(&mut g, w, &ab).unwrap();
        let sum = g.add(ya, yb).unwrap();
        assert!(g.value(yab).max_abs_diff(g.value(sum)) <= 1e-12);
    }

    #[test]
    fn conv_moe_shapes_and_oracle() {
        for n in [1, 2, 4] {
            let mut ps = ParamStore::<f64>::new();
            let mut rng = RngState::new(40 + n as u64);
            let mut pb = ParamBuilder::new(&mut ps, &mut rng);
            let moes: Vec<ConvMoe> = (1..=3)
                .map(|i| ConvMoe::resampling(&mut pb.sub(&format!("m{i}")), 6, 4 << (i - 1), i, n, 0).unwrap())
                .collect();
            let mut g = Graph::new();
            let f = g.input(rng.uniform_tensor(vec![2, 6, 4, 4], -1.0, 1.0));
            for (i, m) in moes.iter().enumerate() {
                let t = m.trace(&mut g, &ps, f).unwrap();
                let side = 8 >> i;
                assert_eq!(g.shape(t.output), &[2, 4 << i, side, side]);
                assert!(max_diff(g.value(t.output).data(), &weighted_sum_oracle(&g, &t)) <= 1e-7);
                if n == 1 {
                    let single = m.experts[0].forward(&mut g, &ps, f).unwrap();
                    assert!(g.value(t.output).max_abs_diff(g.value(single)) <= 1e-7);
                }
            }
        }
    }

    #[test]
    fn ms_moe_concat_width_and_oracle() {
        use crate::spatial::{SSsm, SSsmConfig};
        let mut ps = ParamStore::<f64>::new();
        let mut rng = RngState::new(50);
        let cfg = SSsmConfig {
            channels: 12,
            expansion: 2.0,
            state: 2,
            evaluator: Default::default(),
        };
        let ms = MsMoe::new(&mut ParamBuilder::new(&mut ps, &mut rng), [2, 4, 8], 4, 2, 0, |pb| SSsm::new(pb, cfg)).unwrap();
        let mut g = Graph::new();
        let ys = [
            g.input(rng.uniform_tensor(vec![1, 2, 8, 8], -1.0, 1.0)),
            g.input(rng.uniform_tensor(vec![1, 4, 4, 4], -1.0, 1.0)),
            g.input(rng.uniform_tensor(vec![1, 8, 2, 2], -1.0, 1.0)),
        ];
        let cat = ms.concat(&mut g, &ps, ys).unwrap();
        assert_eq!(g.shape(cat), &[1, 12, 4, 4]);
        let t = ms.trace(&mut g, &ps, ys).unwrap();
        assert!(max_diff(g.value(t.output).data(), &weighted_sum_oracle(&g, &t)) <= 1e-7);

        // zero inputs: concat is the reduce-conv biases
        let zs = [
            g.constant(Tensor::zeros(vec![1, 2, 8, 8])),
            g.constant(Tensor::zeros(vec![1, 4, 4, 4])),
            g.constant(Tensor::zeros(vec![1, 8, 2, 2])),
        ];
        let zc = ms.concat(&mut g, &ps, zs).unwrap();
        for (k, conv) in ms.reduce.iter().enumerate() {
            let bias = ps.get(conv.bias.unwrap()).value.data();
            for c in 0..4 {
                let plane = &g.value(zc).data()[(k * 4 + c) * 16..(k * 4 + c + 1) * 16];
                assert!(plane.iter().all(|&v| v == bias[c]));
            }
        }
    }

    #[test]
    fn gate_weights_form_distribution_under_extreme_inputs() {
        let mut ps = ParamStore::<f64>::new();
        let mut rng = RngState::new(60);
        let gate = GateNet::new(&mut ParamBuilder::new(&mut ps, &mut rng), 2, 4, 0).unwrap();
        let mut g = Graph::new();
        let x = g.input(rng.uniform_tensor(vec![4, 2, 2, 2], -300.0, 300.0));
        let w = gate.weights(&mut g, &ps, x).unwrap();
        for row in g.value(w).data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn unreachable_scale_index_is_config_error() {
        assert!(Resample::from_middle(4).is_err());
        assert!(Resample::from_middle(0).is_err());
    }
}
