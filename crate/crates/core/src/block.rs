//! Residual Mamba block shared by both branches:
//! `X_in = X_n + Y_prev`, `X_mid = mixer(LN(X_in)) + X_in`,
//! `Y = ff_moe(LN(X_mid)) + X_mid`.

use crate::error::{dim_err, Result};
use crate::graph::{Graph, Var};
use crate::moe::FfMoe;
use crate::nn::{LayerNorm, Module};
use crate::param::{ParamBuilder, ParamStore};
use crate::tensor::Real;

#[derive(Debug, Clone)]
pub struct MambaBlock<M> {
    pub ln1: LayerNorm,
    pub mixer: M,
    pub ln2: LayerNorm,
    pub ffn: FfMoe,
    pub channels: usize,
}

/// Intermediate values of one block evaluation.
#[derive(Debug, Clone, Copy)]
pub struct BlockTrace {
    pub x_in: Var,
    pub x_mid: Var,
    pub y: Var,
}

impl<M: Module> MambaBlock<M> {
    pub fn new<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        channels: usize,
        n_experts: usize,
        top_k: usize,
        mixer: impl FnOnce(&mut ParamBuilder<'_, T>) -> Result<M>,
    ) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(&mut pb.sub("ln1"), channels)?,
            mixer: mixer(&mut pb.sub("mixer"))?,
            ln2: LayerNorm::new(&mut pb.sub("ln2"), channels)?,
            ffn: FfMoe::feed_forward(&mut pb.sub("ffn"), channels, n_experts, top_k)?,
            channels,
        })
    }

    pub fn trace<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x_n: Var, y_prev: Option<Var>) -> Result<BlockTrace> {
        let x_in = match y_prev {
            Some(y) => {
                if g.shape(x_n) != g.shape(y) {
                    return Err(dim_err("mamba_block", g.shape(x_n), g.shape(y)));
                }
                g.add(x_n, y)?
            }
            None => x_n,
        };
        let h = self.ln1.forward_channels(g, ps, x_in)?;
        let h = self.mixer.forward(g, ps, h)?;
        let x_mid = g.add(h, x_in)?;
        let h = self.ln2.forward_channels(g, ps, x_mid)?;
        let h = self.ffn.forward(g, ps, h)?;
        let y = g.add(h, x_mid)?;
        Ok(BlockTrace { x_in, x_mid, y })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x_n: Var, y_prev: Option<Var>) -> Result<Var> {
        Ok(self.trace(g, ps, x_n, y_prev)?.y)
    }
}
