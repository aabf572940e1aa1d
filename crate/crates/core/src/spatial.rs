//! Spatial selective scan: four directional scans over the flattened grid,
//! merged by sum, normalized, and gated by a parallel SiLU branch.

use std::fmt;
use std::str::FromStr;

use crate::block::MambaBlock;
use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Conv2d, LayerNorm, Module};
use crate::param::{ParamBuilder, ParamStore};
use crate::ssm::{Evaluator, SsmConfig, SsmParams};
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScanOrder {
    RowForward,
    RowBackward,
    ColForward,
    ColBackward,
}

impl ScanOrder {
    /// Merge order of the directional outputs.
    pub const ALL: [ScanOrder; 4] = [
        ScanOrder::RowForward,
        ScanOrder::RowBackward,
        ScanOrder::ColForward,
        ScanOrder::ColBackward,
    ];

    fn column_major(self) -> bool {
        matches!(self, ScanOrder::ColForward | ScanOrder::ColBackward)
    }

    fn reversed(self) -> bool {
        matches!(self, ScanOrder::RowBackward | ScanOrder::ColBackward)
    }

    pub fn tag(self) -> &'static str {
        match self {
            ScanOrder::RowForward => "row_fwd",
            ScanOrder::RowBackward => "row_bwd",
            ScanOrder::ColForward => "col_fwd",
            ScanOrder::ColBackward => "col_bwd",
        }
    }
}

impl fmt::Display for ScanOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for ScanOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScanOrder::ALL
            .into_iter()
            .find(|o| o.tag() == s)
            .ok_or_else(|| Error::Config(format!("unknown scan order `{s}`")))
    }
}

fn grid_dims(op: &'static str, g: &Graph<impl Real>, x: Var) -> Result<(usize, usize, usize, usize)> {
    match *g.shape(x) {
        [b, c, h, w] if h >= 1 && w >= 1 => Ok((b, c, h, w)),
        ref s => Err(dim_err(op, s, &[0, 0, 0, 0])),
    }
}

/// `[B, C, H, W]` → `[B, H·W, C]` in the given traversal order.
pub fn flatten_2d<T: Real>(g: &mut Graph<T>, x: Var, order: ScanOrder) -> Result<Var> {
    let (b, c, h, w) = grid_dims("flatten_2d", g, x)?;
    let seq = if order.column_major() {
        let t = g.permute(x, &[0, 3, 2, 1])?;
        g.reshape(t, &[b, w * h, c])?
    } else {
        let t = g.permute(x, &[0, 2, 3, 1])?;
        g.reshape(t, &[b, h * w, c])?
    };
    if order.reversed() {
        g.flip(seq, 1)
    } else {
        Ok(seq)
    }
}

/// Inverse of [`flatten_2d`] for a grid of extent `h × w`.
pub fn unflatten_2d<T: Real>(g: &mut Graph<T>, seq: Var, order: ScanOrder, h: usize, w: usize) -> Result<Var> {
    let (b, l, c) = match *g.shape(seq) {
        [b, l, c] => (b, l, c),
        ref s => return Err(dim_err("unflatten_2d", s, &[0, h * w, 0])),
    };
    if l != h * w {
        return Err(dim_err("unflatten_2d", g.shape(seq), &[b, h * w, c]));
    }
    let seq = if order.reversed() { g.flip(seq, 1)? } else { seq };
    if order.column_major() {
        let t = g.reshape(seq, &[b, w, h, c])?;
        g.permute(t, &[0, 3, 2, 1])
    } else {
        let t = g.reshape(seq, &[b, h, w, c])?;
        g.permute(t, &[0, 3, 1, 2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SSsmConfig {
    pub channels: usize,
    /// Channel expansion factor λ.
    pub expansion: f64,
    pub state: usize,
    pub evaluator: Evaluator,
}

impl SSsmConfig {
    pub fn expanded(&self) -> usize {
        (self.expansion * self.channels as f64).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.state == 0 {
            return Err(Error::Config(format!(
                "s_ssm extents must be positive, got C={} N={}",
                self.channels, self.state
            )));
        }
        if !(self.expansion >= 1.0) || self.expanded() < self.channels {
            return Err(Error::Config(format!("s_ssm expansion must be >= 1, got {}", self.expansion)));
        }
        Ok(())
    }
}

const DW_KERNEL: usize = 3;

#[derive(Debug, Clone)]
pub struct SSsm {
    pub cfg: SSsmConfig,
    pub in_a: Conv2d,
    pub dw: Conv2d,
    /// One SSM per direction, in [`ScanOrder::ALL`] order.
    pub scans: [SsmParams; 4],
    pub norm: LayerNorm,
    pub in_b: Conv2d,
    pub out: Conv2d,
}

/// Intermediate values of one S-SSM evaluation.
#[derive(Debug, Clone)]
pub struct SSsmTrace {
    /// Scan outputs per direction, in sequence layout `[B, H·W, E]`.
    pub direction_seqs: [Var; 4],
    pub x_a: Var,
    pub x_b: Var,
    pub output: Var,
}

impl SSsm {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, cfg: SSsmConfig) -> Result<Self> {
        cfg.validate()?;
        let (c, e) = (cfg.channels, cfg.expanded());
        let in_a = Conv2d::same(&mut pb.sub("in_a"), c, e, 1)?;
        let dw = Conv2d::new(&mut pb.sub("dw"), e, e, DW_KERNEL, e)?;
        let ssm_cfg = SsmConfig {
            dim: e,
            state: cfg.state,
            evaluator: cfg.evaluator,
        };
        let scans = [
            SsmParams::new(&mut pb.sub(ScanOrder::ALL[0].tag()), ssm_cfg)?,
            SsmParams::new(&mut pb.sub(ScanOrder::ALL[1].tag()), ssm_cfg)?,
            SsmParams::new(&mut pb.sub(ScanOrder::ALL[2].tag()), ssm_cfg)?,
            SsmParams::new(&mut pb.sub(ScanOrder::ALL[3].tag()), ssm_cfg)?,
        ];
        Ok(Self {
            cfg,
            in_a,
            dw,
            scans,
            norm: LayerNorm::new(&mut pb.sub("norm"), e)?,
            in_b: Conv2d::same(&mut pb.sub("in_b"), c, e, 1)?,
            out: Conv2d::same(&mut pb.sub("out"), e, c, 1)?,
        })
    }

    pub fn param_count(cfg: &SSsmConfig) -> usize {
        let (c, e) = (cfg.channels, cfg.expanded());
        let ssm = SsmParams::param_count(&SsmConfig {
            dim: e,
            state: cfg.state,
            evaluator: cfg.evaluator,
        });
        2 * Conv2d::param_count(c, e, 1, 1)
            + Conv2d::param_count(e, e, DW_KERNEL, e)
            + 4 * ssm
            + LayerNorm::param_count(e)
            + Conv2d::param_count(e, c, 1, 1)
    }

    /// Expanded, convolved, activated features fed to the directional scans.
    pub fn scan_input<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.in_a.forward(g, ps, x)?;
        let h = self.dw.forward(g, ps, h)?;
        g.silu(h)
    }

    pub fn trace<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<SSsmTrace> {
        let (_, c, h, w) = grid_dims("s_ssm", g, x)?;
        if c != self.cfg.channels {
            return Err(dim_err("s_ssm", g.shape(x), &[0, self.cfg.channels, h, w]));
        }
        let u = self.scan_input(g, ps, x)?;
        let mut seqs = Vec::with_capacity(4);
        let mut merged: Option<Var> = None;
        for (order, ssm) in ScanOrder::ALL.into_iter().zip(&self.scans) {
            let seq = flatten_2d(g, u, order)?;
            let y = ssm.forward(g, ps, seq)?;
            seqs.push(y);
            let grid = unflatten_2d(g, y, order, h, w)?;
            merged = Some(match merged {
                None => grid,
                Some(m) => g.add(m, grid)?,
            });
        }
        let merged = merged.expect("four directions");
        let x_a = self.norm.forward_channels(g, ps, merged)?;
        let b = self.in_b.forward(g, ps, x)?;
        let x_b = g.silu(b)?;
        let gated = g.mul(x_a, x_b)?;
        let output = self.out.forward(g, ps, gated)?;
        Ok(SSsmTrace {
            direction_seqs: [seqs[0], seqs[1], seqs[2], seqs[3]],
            x_a,
            x_b,
            output,
        })
    }
}

impl Module for SSsm {
    fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        Ok(self.trace(g, ps, x)?.output)
    }
}

pub type SmBlock = MambaBlock<SSsm>;

impl SmBlock {
    pub fn spatial<T: Real>(pb: &mut ParamBuilder<'_, T>, cfg: SSsmConfig, n_experts: usize, top_k: usize) -> Result<Self> {
        MambaBlock::new(pb, cfg.channels, n_experts, top_k, |pb| SSsm::new(pb, cfg))
    }
}
