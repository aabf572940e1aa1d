//! Channel selective scan: pooled channel descriptors are scanned in both
//! directions along the channel axis and turned into sigmoid attention.

use crate::block::MambaBlock;
use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Conv2d, Module};
use crate::param::{ParamBuilder, ParamStore};
use crate::ssm::{Evaluator, SsmConfig, SsmParams};
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CSsmConfig {
    pub channels: usize,
    pub state: usize,
    pub evaluator: Evaluator,
}

impl CSsmConfig {
    fn scan(&self) -> SsmConfig {
        SsmConfig {
            dim: 1,
            state: self.state,
            evaluator: self.evaluator,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CSsm {
    pub cfg: CSsmConfig,
    pub squeeze: Conv2d,
    pub forward_scan: SsmParams,
    pub backward_scan: SsmParams,
}

impl CSsm {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, cfg: CSsmConfig) -> Result<Self> {
        if cfg.channels == 0 || cfg.state == 0 {
            return Err(Error::Config(format!(
                "c_ssm extents must be positive, got C={} N={}",
                cfg.channels, cfg.state
            )));
        }
        Ok(Self {
            cfg,
            squeeze: Conv2d::same(&mut pb.sub("squeeze"), cfg.channels, cfg.channels, 1)?,
            forward_scan: SsmParams::new(&mut pb.sub("fwd"), cfg.scan())?,
            backward_scan: SsmParams::new(&mut pb.sub("bwd"), cfg.scan())?,
        })
    }

    pub fn param_count(cfg: &CSsmConfig) -> usize {
        Conv2d::param_count(cfg.channels, cfg.channels, 1, 1) + 2 * SsmParams::param_count(&cfg.scan())
    }

    /// Pre-sigmoid attention logits `[B, C, 1]`.
    pub fn logits<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let (b, c) = match *g.shape(x) {
            [b, c, _, _] if c == self.cfg.channels => (b, c),
            ref s => return Err(dim_err("c_ssm", s, &[0, self.cfg.channels, 0, 0])),
        };
        let p = g.global_avg_pool(x)?;
        let q = self.squeeze.forward(g, ps, p)?;
        let q = g.silu(q)?;
        let seq = g.reshape(q, &[b, c, 1])?;
        let fwd = self.forward_scan.forward(g, ps, seq)?;
        let rev = g.flip(seq, 1)?;
        let bwd = self.backward_scan.forward(g, ps, rev)?;
        let bwd = g.flip(bwd, 1)?;
        g.add(fwd, bwd)
    }

    /// `x ⊙ σ(logits)` broadcast over the spatial extents.
    pub fn apply_attention<T: Real>(&self, g: &mut Graph<T>, x: Var, logits: Var) -> Result<Var> {
        let a = self.attention_from(g, x, logits)?;
        g.mul_broadcast(x, a)
    }

    fn attention_from<T: Real>(&self, g: &mut Graph<T>, x: Var, logits: Var) -> Result<Var> {
        let (b, c) = (g.shape(x)[0], g.shape(x)[1]);
        let a = g.sigmoid(logits)?;
        g.reshape(a, &[b, c, 1, 1])
    }

    /// Attention map `[B, C, 1, 1]` with values in (0, 1).
    pub fn attention<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let l = self.logits(g, ps, x)?;
        self.attention_from(g, x, l)
    }
}

impl Module for CSsm {
    fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let l = self.logits(g, ps, x)?;
        self.apply_attention(g, x, l)
    }
}

pub type CmBlock = MambaBlock<CSsm>;

impl CmBlock {
    pub fn channel<T: Real>(pb: &mut ParamBuilder<'_, T>, cfg: CSsmConfig, n_experts: usize, top_k: usize) -> Result<Self> {
        MambaBlock::new(pb, cfg.channels, n_experts, top_k, |pb| CSsm::new(pb, cfg))
    }
}
