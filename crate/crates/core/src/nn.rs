//! Parameterized building blocks shared by every branch.

use crate::error::{dim_err, Result};
use crate::graph::{Graph, Var};
use crate::param::{ParamBuilder, ParamId, ParamStore};
use crate::tensor::Real;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Dense map over the last extent.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let weight = pb.fan_in_uniform("weight", &[d_in, d_out], d_in)?;
        let bias = if bias { Some(pb.fan_in_uniform("bias", &[d_out], d_in)?) } else { None };
        Ok(Self { weight, bias, d_in, d_out })
    }

    pub fn param_count(d_in: usize, d_out: usize, bias: bool) -> usize {
        d_in * d_out + if bias { d_out } else { 0 }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(ps, self.weight);
        let b = self.bias.map(|b| g.param(ps, b));
        g.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub kernel: ParamId,
    pub bias: Option<ParamId>,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2d {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, c_in: usize, c_out: usize, k: usize, groups: usize) -> Result<Self> {
        let fan_in = c_in / groups * k * k;
        let kernel = pb.fan_in_uniform("kernel", &[c_out, c_in / groups, k, k], fan_in)?;
        let bias = Some(pb.fan_in_uniform("bias", &[c_out], fan_in)?);
        Ok(Self {
            kernel,
            bias,
            c_in,
            c_out,
            k,
            stride: 1,
            padding: k / 2,
            groups,
        })
    }

    /// Same-size convolution with bias.
    pub fn same<T: Real>(pb: &mut ParamBuilder<'_, T>, c_in: usize, c_out: usize, k: usize) -> Result<Self> {
        Self::new(pb, c_in, c_out, k, 1)
    }

    /// Kernel and bias start at zero.
    pub fn zeroed<T: Real>(pb: &mut ParamBuilder<'_, T>, c_in: usize, c_out: usize, k: usize) -> Result<Self> {
        let kernel = pb.zeros("kernel", &[c_out, c_in, k, k])?;
        let bias = Some(pb.zeros("bias", &[c_out])?);
        Ok(Self {
            kernel,
            bias,
            c_in,
            c_out,
            k,
            stride: 1,
            padding: k / 2,
            groups: 1,
        })
    }

    pub fn param_count(c_in: usize, c_out: usize, k: usize, groups: usize) -> usize {
        c_out * (c_in / groups) * k * k + c_out
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let k = g.param(ps, self.kernel);
        let b = self.bias.map(|b| g.param(ps, b));
        g.conv2d(x, k, b, self.stride, self.padding, self.groups)
    }
}

/// Layer norm over the last extent.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: pb.ones("gamma", &[dim])?,
            beta: pb.zeros("beta", &[dim])?,
            dim,
        })
    }

    pub fn param_count(dim: usize) -> usize {
        2 * dim
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(ps, self.gamma);
        let beta = g.param(ps, self.beta);
        g.layer_norm(x, gamma, beta, T::of(LAYER_NORM_EPS))
    }

    /// Normalizes a `(B, C, H, W)` map over `C` at every spatial position.
    pub fn forward_channels<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 4 || s[1] != self.dim {
            return Err(dim_err("channel_layer_norm", s, &[self.dim]));
        }
        let nhwc = g.permute(x, &[0, 2, 3, 1])?;
        let y = self.forward(g, ps, nhwc)?;
        g.permute(y, &[0, 3, 1, 2])
    }
}

/// A parameterized map from one feature tensor to another.
pub trait Module {
    fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var>;
}
