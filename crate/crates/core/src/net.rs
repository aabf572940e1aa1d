//! The O-shaped dual-branch network.
//!
//! Each branch is a three-scale U-shape: an encoder of Mamba blocks with
//! factor-2 downsampling and a decoder with factor-2 upsampling and additive
//! skips. The branches meet at the middle scale, where each branch's
//! multi-scale MoE summarizes its encoder features; the sum of the two
//! summaries is redistributed by per-scale convolutional MoEs into both
//! branches' skips. Per-scale 1×1 heads emit residual images.

use serde::{Deserialize, Serialize};

use crate::block::MambaBlock;
use crate::channel::{CSsm, CSsmConfig};
use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::moe::{ConvMoe, GateNet, MsMoe};
use crate::nn::{Conv2d, Module};
use crate::param::{ParamBuilder, ParamStore, RngState};
use crate::spatial::{SSsm, SSsmConfig};
use crate::ssm::Evaluator;
use crate::tensor::{DType, Real, Tensor};

pub const SCALES: usize = 3;
const IMAGE_CHANNELS: usize = 3;
const EMBED_KERNEL: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    /// Always 3.
    pub scales: usize,
    /// Width at full resolution; doubles per scale step.
    pub base_channels: usize,
    pub blocks_per_scale: usize,
    /// S-SSM channel expansion λ.
    pub expansion: f64,
    pub d_state: usize,
    pub n_experts: usize,
    /// 0 keeps every expert.
    pub moe_top_k: usize,
    pub evaluator: Evaluator,
    pub dtype: DType,
    pub spatial_branch: bool,
    pub channel_branch: bool,
    pub mutual_promotion: bool,
    pub zero_init_heads: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            scales: SCALES,
            base_channels: 16,
            blocks_per_scale: 1,
            expansion: 2.0,
            d_state: 8,
            n_experts: 4,
            moe_top_k: 0,
            evaluator: Evaluator::Sequential,
            dtype: DType::F32,
            spatial_branch: true,
            channel_branch: true,
            mutual_promotion: true,
            zero_init_heads: true,
        }
    }
}

impl NetConfig {
    /// Reference tiny configuration used by the tests.
    pub fn tiny() -> Self {
        Self {
            base_channels: 8,
            blocks_per_scale: 1,
            n_experts: 2,
            d_state: 4,
            ..Self::default()
        }
    }

    pub fn widths(&self) -> [usize; SCALES] {
        [self.base_channels, 2 * self.base_channels, 4 * self.base_channels]
    }

    /// Channel count of the middle-scale fused feature.
    pub fn fused_width(&self) -> usize {
        3 * self.widths()[1]
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.scales != SCALES {
            return fail(format!("net.scales must be {SCALES}, got {}", self.scales));
        }
        if self.base_channels == 0 || self.blocks_per_scale == 0 || self.d_state == 0 {
            return fail("net.base_channels, net.blocks_per_scale and net.d_state must be positive".into());
        }
        if self.n_experts == 0 {
            return fail("net.n_experts must be at least 1".into());
        }
        if self.moe_top_k > self.n_experts {
            return fail(format!(
                "net.moe_top_k ({}) exceeds net.n_experts ({})",
                self.moe_top_k, self.n_experts
            ));
        }
        if !(self.expansion >= 1.0) {
            return fail(format!("net.expansion must be >= 1, got {}", self.expansion));
        }
        if !self.spatial_branch && !self.channel_branch {
            return fail("at least one of net.spatial_branch and net.channel_branch must be enabled".into());
        }
        Ok(())
    }

    fn s_ssm(&self, channels: usize) -> SSsmConfig {
        SSsmConfig {
            channels,
            expansion: self.expansion,
            state: self.d_state,
            evaluator: self.evaluator,
        }
    }

    fn c_ssm(&self, channels: usize) -> CSsmConfig {
        CSsmConfig {
            channels,
            state: self.d_state,
            evaluator: self.evaluator,
        }
    }
}

/// Builds the scan module of a branch at a given width.
pub trait BranchKind: Module + Sized {
    fn build<T: Real>(pb: &mut ParamBuilder<'_, T>, cfg: &NetConfig, channels: usize) -> Result<Self>;
}

impl BranchKind for SSsm {
    fn build<T: Real>(pb: &mut ParamBuilder<'_, T>, cfg: &NetConfig, channels: usize) -> Result<Self> {
        SSsm::new(pb, cfg.s_ssm(channels))
    }
}

impl BranchKind for CSsm {
    fn build<T: Real>(pb: &mut ParamBuilder<'_, T>, cfg: &NetConfig, channels: usize) -> Result<Self> {
        CSsm::new(pb, cfg.c_ssm(channels))
    }
}

/// One U-shaped branch.
#[derive(Debug, Clone)]
pub struct Branch<M> {
    pub encoder: [Vec<MambaBlock<M>>; SCALES],
    /// `down2` then 1×1 `w_i → w_{i+1}`.
    pub down: [Conv2d; SCALES - 1],
    pub decoder: [Vec<MambaBlock<M>>; SCALES],
    /// `up2` then 1×1 `w_{i+1} → w_i`.
    pub up: [Conv2d; SCALES - 1],
    pub heads: [Conv2d; SCALES],
    pub ms_moe: Option<MsMoe<M>>,
}

/// Per-branch encoder features retained for the decoder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SkipSet {
    pub spatial: Option<[Var; SCALES]>,
    pub channel: Option<[Var; SCALES]>,
}

fn stage<T: Real, M: BranchKind>(
    pb: &mut ParamBuilder<'_, T>,
    cfg: &NetConfig,
    width: usize,
) -> Result<Vec<MambaBlock<M>>> {
    (0..cfg.blocks_per_scale)
        .map(|b| {
            MambaBlock::new(&mut pb.sub(&format!("block{b}")), width, cfg.n_experts, cfg.moe_top_k, |pb| {
                M::build(pb, cfg, width)
            })
        })
        .collect()
}

fn run_stage<T: Real, M: Module>(
    g: &mut Graph<T>,
    ps: &ParamStore<T>,
    blocks: &[MambaBlock<M>],
    x: Var,
    y_prev: Option<Var>,
) -> Result<Var> {
    let (first, rest) = blocks.split_first().expect("stages have at least one block");
    let mut y = first.forward(g, ps, x, y_prev)?;
    for b in rest {
        y = b.forward(g, ps, y, None)?;
    }
    Ok(y)
}

impl<M: BranchKind> Branch<M> {
    fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, cfg: &NetConfig) -> Result<Self> {
        let w = cfg.widths();
        let encoder = [
            stage(&mut pb.sub("enc1"), cfg, w[0])?,
            stage(&mut pb.sub("enc2"), cfg, w[1])?,
            stage(&mut pb.sub("enc3"), cfg, w[2])?,
        ];
        let down = [
            Conv2d::same(&mut pb.sub("down1"), w[0], w[1], 1)?,
            Conv2d::same(&mut pb.sub("down2"), w[1], w[2], 1)?,
        ];
        let ms_moe = if cfg.mutual_promotion {
            let fused = cfg.fused_width();
            Some(MsMoe::new(&mut pb.sub("ms_moe"), w, w[1], cfg.n_experts, cfg.moe_top_k, |pb| {
                M::build(pb, cfg, fused)
            })?)
        } else {
            None
        };
        let decoder = [
            stage(&mut pb.sub("dec1"), cfg, w[0])?,
            stage(&mut pb.sub("dec2"), cfg, w[1])?,
            stage(&mut pb.sub("dec3"), cfg, w[2])?,
        ];
        let up = [
            Conv2d::same(&mut pb.sub("up1"), w[1], w[0], 1)?,
            Conv2d::same(&mut pb.sub("up2"), w[2], w[1], 1)?,
        ];
        let head = |pb: &mut ParamBuilder<'_, T>, i: usize| {
            let mut sub = pb.sub(&format!("head{}", i + 1));
            if cfg.zero_init_heads {
                Conv2d::zeroed(&mut sub, w[i], IMAGE_CHANNELS, 1)
            } else {
                Conv2d::same(&mut sub, w[i], IMAGE_CHANNELS, 1)
            }
        };
        let heads = [head(pb, 0)?, head(pb, 1)?, head(pb, 2)?];
        Ok(Self {
            encoder,
            down,
            decoder,
            up,
            heads,
            ms_moe,
        })
    }

    /// Encoder features `E_1, E_2, E_3`.
    pub fn encode<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, xs: [Var; SCALES]) -> Result<[Var; SCALES]> {
        let e1 = run_stage(g, ps, &self.encoder[0], xs[0], None)?;
        let d = g.down2(e1)?;
        let d = self.down[0].forward(g, ps, d)?;
        let e2 = run_stage(g, ps, &self.encoder[1], xs[1], Some(d))?;
        let d = g.down2(e2)?;
        let d = self.down[1].forward(g, ps, d)?;
        let e3 = run_stage(g, ps, &self.encoder[2], xs[2], Some(d))?;
        Ok([e1, e2, e3])
    }

    /// Decoder features `D_1, D_2, D_3` from skips `Z_1, Z_2, Z_3`.
    pub fn decode<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, z: [Var; SCALES]) -> Result<[Var; SCALES]> {
        let d3 = run_stage(g, ps, &self.decoder[2], z[2], None)?;
        let u = g.up2(d3)?;
        let u = self.up[1].forward(g, ps, u)?;
        let d2 = run_stage(g, ps, &self.decoder[1], z[1], Some(u))?;
        let u = g.up2(d2)?;
        let u = self.up[0].forward(g, ps, u)?;
        let d1 = run_stage(g, ps, &self.decoder[0], z[0], Some(u))?;
        Ok([d1, d2, d3])
    }

    /// Residual images per scale.
    pub fn residuals<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, d: [Var; SCALES]) -> Result<[Var; SCALES]> {
        Ok([
            self.heads[0].forward(g, ps, d[0])?,
            self.heads[1].forward(g, ps, d[1])?,
            self.heads[2].forward(g, ps, d[2])?,
        ])
    }
}

/// Per-scale convolutional MoEs that inject the fused feature into the skips.
#[derive(Debug, Clone)]
pub struct MutualPromotion {
    pub moes: [ConvMoe; SCALES],
}

impl MutualPromotion {
    fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, cfg: &NetConfig) -> Result<Self> {
        let (w, f) = (cfg.widths(), cfg.fused_width());
        let m = |pb: &mut ParamBuilder<'_, T>, i: usize| {
            ConvMoe::resampling(&mut pb.sub(&format!("moe{i}")), f, w[i - 1], i, cfg.n_experts, cfg.moe_top_k)
        };
        Ok(Self {
            moes: [m(pb, 1)?, m(pb, 2)?, m(pb, 3)?],
        })
    }

    /// `F = Y_s + Y_c`; every present skip `i` becomes `Skip_i + MoE_i(F)`.
    pub fn fuse<T: Real>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        y_s: Option<Var>,
        y_c: Option<Var>,
        skips: SkipSet,
    ) -> Result<SkipSet> {
        let f = match (y_s, y_c) {
            (Some(s), Some(c)) => {
                if g.shape(s) != g.shape(c) {
                    return Err(dim_err("mp_fuse", g.shape(s), g.shape(c)));
                }
                g.add(s, c)?
            }
            (Some(v), None) | (None, Some(v)) => v,
            (None, None) => return Err(Error::Config("mp_fuse needs at least one branch feature".into())),
        };
        let mut m = [f; SCALES];
        for (i, moe) in self.moes.iter().enumerate() {
            m[i] = moe.forward(g, ps, f)?;
        }
        let inject = |g: &mut Graph<T>, skips: Option<[Var; SCALES]>| -> Result<Option<[Var; SCALES]>> {
            let Some(s) = skips else { return Ok(None) };
            Ok(Some([g.add(s[0], m[0])?, g.add(s[1], m[1])?, g.add(s[2], m[2])?]))
        };
        Ok(SkipSet {
            spatial: inject(g, skips.spatial)?,
            channel: inject(g, skips.channel)?,
        })
    }
}

/// Outputs at scales 1, 1/2, 1/4.
#[derive(Debug, Clone, Copy)]
pub struct MultiScaleOutput {
    pub s: [Var; SCALES],
    pub c: [Var; SCALES],
    pub fused: [Var; SCALES],
}

#[derive(Debug, Clone)]
pub struct Network {
    pub cfg: NetConfig,
    /// Patch embedding `3 → w_i` per scale, shared by both branches.
    pub embed: [Conv2d; SCALES],
    pub spatial: Option<Branch<SSsm>>,
    pub channel: Option<Branch<CSsm>>,
    pub mp: Option<MutualPromotion>,
}

impl Network {
    /// Registers every parameter in `ps` under unique hierarchical names.
    pub fn build<T: Real>(cfg: &NetConfig, ps: &mut ParamStore<T>, rng: &mut RngState) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.widths();
        let mut pb = ParamBuilder::new(ps, rng);
        let embed = [
            Conv2d::same(&mut pb.sub("embed1"), IMAGE_CHANNELS, w[0], EMBED_KERNEL)?,
            Conv2d::same(&mut pb.sub("embed2"), IMAGE_CHANNELS, w[1], EMBED_KERNEL)?,
            Conv2d::same(&mut pb.sub("embed3"), IMAGE_CHANNELS, w[2], EMBED_KERNEL)?,
        ];
        let spatial = match cfg.spatial_branch {
            true => Some(Branch::new(&mut pb.sub("spatial"), cfg)?),
            false => None,
        };
        let channel = match cfg.channel_branch {
            true => Some(Branch::new(&mut pb.sub("channel"), cfg)?),
            false => None,
        };
        let mp = match cfg.mutual_promotion {
            true => Some(MutualPromotion::new(&mut pb.sub("mp"), cfg)?),
            false => None,
        };
        Ok(Self {
            cfg: cfg.clone(),
            embed,
            spatial,
            channel,
            mp,
        })
    }

    /// Images at scales 1, 1/2, 1/4 by area-mean downsampling.
    pub fn image_pyramid<T: Real>(g: &mut Graph<T>, image: Var) -> Result<[Var; SCALES]> {
        match *g.shape(image) {
            [_, IMAGE_CHANNELS, h, w] if h % 4 == 0 && w % 4 == 0 && h > 0 && w > 0 => {}
            [_, IMAGE_CHANNELS, h, w] => {
                return Err(Error::Config(format!(
                    "input extents must be positive and divisible by 4, got {h}x{w}"
                )))
            }
            ref s => return Err(dim_err("network_input", s, &[0, IMAGE_CHANNELS, 0, 0])),
        }
        let half = g.down2(image)?;
        let quarter = g.down2(half)?;
        Ok([image, half, quarter])
    }

    /// Patch-embedded inputs `X_1, X_{1/2}, X_{1/4}` and the image pyramid.
    pub fn multi_scale_inputs<T: Real>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        image: Var,
    ) -> Result<([Var; SCALES], [Var; SCALES])> {
        let imgs = Self::image_pyramid(g, image)?;
        let xs = [
            self.embed[0].forward(g, ps, imgs[0])?,
            self.embed[1].forward(g, ps, imgs[1])?,
            self.embed[2].forward(g, ps, imgs[2])?,
        ];
        Ok((xs, imgs))
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, image: Var) -> Result<MultiScaleOutput> {
        let (xs, imgs) = self.multi_scale_inputs(g, ps, image)?;
        let enc_s = self.spatial.as_ref().map(|b| b.encode(g, ps, xs)).transpose()?;
        let enc_c = self.channel.as_ref().map(|b| b.encode(g, ps, xs)).transpose()?;
        let mut skips = SkipSet {
            spatial: enc_s,
            channel: enc_c,
        };
        if let Some(mp) = &self.mp {
            let y_s = match (&self.spatial, enc_s) {
                (Some(b), Some(e)) => Some(b.ms_moe.as_ref().expect("built with mp").forward(g, ps, e)?),
                _ => None,
            };
            let y_c = match (&self.channel, enc_c) {
                (Some(b), Some(e)) => Some(b.ms_moe.as_ref().expect("built with mp").forward(g, ps, e)?),
                _ => None,
            };
            skips = mp.fuse(g, ps, y_s, y_c, skips)?;
        }

        let s = match (&self.spatial, skips.spatial) {
            (Some(b), Some(z)) => {
                let d = b.decode(g, ps, z)?;
                let r = b.residuals(g, ps, d)?;
                [g.add(imgs[0], r[0])?, g.add(imgs[1], r[1])?, g.add(imgs[2], r[2])?]
            }
            _ => imgs,
        };
        let c = match (&self.channel, skips.channel) {
            (Some(b), Some(z)) => {
                let d = b.decode(g, ps, z)?;
                b.residuals(g, ps, d)?
            }
            _ => {
                let zero = |g: &mut Graph<T>, v: Var| g.constant(Tensor::zeros(g.shape(v).to_vec()));
                [zero(g, imgs[0]), zero(g, imgs[1]), zero(g, imgs[2])]
            }
        };
        let fused = [g.add(s[0], c[0])?, g.add(s[1], c[1])?, g.add(s[2], c[2])?];
        Ok(MultiScaleOutput { s, c, fused })
    }

    /// Every gating network with a path-like site label.
    pub fn gates(&self) -> Vec<(String, &GateNet)> {
        fn branch<'a, M>(name: &str, b: &'a Branch<M>, out: &mut Vec<(String, &'a GateNet)>) {
            for (half, stages) in [("encoder", &b.encoder), ("decoder", &b.decoder)] {
                for (i, blocks) in stages.iter().enumerate() {
                    for (j, blk) in blocks.iter().enumerate() {
                        out.push((format!("{name}.{half}{}.block{j}.ffn", i + 1), &blk.ffn.gate));
                    }
                }
            }
            if let Some(m) = &b.ms_moe {
                out.push((format!("{name}.ms_moe"), &m.moe.gate));
            }
        }
        let mut out = Vec::new();
        if let Some(b) = &self.spatial {
            branch("spatial", b, &mut out);
        }
        if let Some(b) = &self.channel {
            branch("channel", b, &mut out);
        }
        if let Some(mp) = &self.mp {
            for (i, m) in mp.moes.iter().enumerate() {
                out.push((format!("mp.moe{}", i + 1), &m.gate));
            }
        }
        out
    }

    /// Evaluates the network on a value and returns the fused outputs per scale.
    pub fn predict<T: Real>(&self, ps: &ParamStore<T>, image: &Tensor<T>) -> Result<[Tensor<T>; SCALES]> {
        let mut g = Graph::new();
        let x = g.constant(image.clone());
        let out = self.forward(&mut g, ps, x)?;
        Ok(out.fused.map(|v| g.value(v).clone()))
    }
}
