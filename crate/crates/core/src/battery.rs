//! Fixed gradient-check battery: every primitive op, each composed module,
//! and the tiny network end to end, each with its own tolerance.
//!
//! Composed items are checked with respect to their input tensors; the
//! primitives cover weight gradients since weights are op inputs there.

use std::sync::Arc;

use crate::block::MambaBlock;
use crate::channel::{CSsm, CSsmConfig, CmBlock};
use crate::error::Result;
use crate::gradcheck::{grad_check, grad_check_params, GradCheckOptions};
use crate::graph::{Graph, Var};
use crate::moe::FfMoe;
use crate::net::{NetConfig, Network};
use crate::nn::Module;
use crate::param::{ParamBuilder, ParamStore, RngState};
use crate::spatial::{SSsm, SSsmConfig, SmBlock};
use crate::ssm::Evaluator;
use crate::tensor::Tensor;

pub const PRIMITIVE_TOL: f64 = 1e-6;
pub const BLOCK_TOL: f64 = 1e-5;
pub const NETWORK_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tier {
    Primitive,
    Block,
    Network,
}

impl Tier {
    pub fn tolerance(self) -> f64 {
        match self {
            Tier::Primitive => PRIMITIVE_TOL,
            Tier::Block => BLOCK_TOL,
            Tier::Network => NETWORK_TOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatteryResult {
    pub name: String,
    pub tier: Tier,
    pub tolerance: f64,
    /// `Err` holds the oracle failure message.
    pub max_rel_error: std::result::Result<f64, String>,
}

impl BatteryResult {
    pub fn passed(&self) -> bool {
        matches!(self.max_rel_error, Ok(e) if e <= self.tolerance)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct BatteryOptions {
    pub evaluator: Evaluator,
    pub seed: u64,
    /// Appends an op whose backward rule is deliberately wrong.
    pub inject_fault: bool,
}

type Check = Box<dyn Fn(&mut RngState) -> Result<f64>>;

fn check_inputs(
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    inputs: Vec<Tensor<f64>>,
) -> Result<f64> {
    Ok(grad_check(f, &inputs, &GradCheckOptions::default())?.max_rel_error)
}

fn check_module(
    ps: &ParamStore<f64>,
    f: impl Fn(&mut Graph<f64>, &ParamStore<f64>, &[Var]) -> Result<Var>,
    inputs: Vec<Tensor<f64>>,
) -> Result<f64> {
    let opts = GradCheckOptions {
        check_params: false,
        ..Default::default()
    };
    Ok(grad_check_params(ps, f, &inputs, &opts)?.max_rel_error)
}

fn u(rng: &mut RngState, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    rng.uniform_tensor(shape.to_vec(), lo, hi)
}

fn primitives(ev: Evaluator) -> Vec<(&'static str, Check)> {
    let mut v: Vec<(&'static str, Check)> = Vec::new();
    v.push(("add", Box::new(|r| check_inputs(|g, x| g.add(x[0], x[1]), vec![u(r, &[2, 3], -1.0, 1.0), u(r, &[2, 3], -1.0, 1.0)]))));
    v.push(("sub", Box::new(|r| check_inputs(|g, x| g.sub(x[0], x[1]), vec![u(r, &[2, 3], -1.0, 1.0), u(r, &[2, 3], -1.0, 1.0)]))));
    v.push(("mul", Box::new(|r| check_inputs(|g, x| g.mul(x[0], x[1]), vec![u(r, &[2, 3], -1.0, 1.0), u(r, &[2, 3], -1.0, 1.0)]))));
    v.push((
        "add_broadcast",
        Box::new(|r| check_inputs(|g, x| g.add_broadcast(x[0], x[1]), vec![u(r, &[2, 3, 4], -1.0, 1.0), u(r, &[1, 3, 1], -1.0, 1.0)])),
    ));
    v.push((
        "mul_broadcast",
        Box::new(|r| check_inputs(|g, x| g.mul_broadcast(x[0], x[1]), vec![u(r, &[2, 3, 4], -1.0, 1.0), u(r, &[2, 3, 1], -1.0, 1.0)])),
    ));
    v.push(("scale", Box::new(|r| check_inputs(|g, x| g.scale(x[0], -1.7), vec![u(r, &[5], -1.0, 1.0)]))));
    v.push(("add_scalar", Box::new(|r| check_inputs(|g, x| g.add_scalar(x[0], 0.3), vec![u(r, &[5], -1.0, 1.0)]))));
    v.push(("exp", Box::new(|r| check_inputs(|g, x| g.exp(x[0]), vec![u(r, &[6], -2.0, 2.0)]))));
    v.push(("abs", Box::new(|r| check_inputs(|g, x| g.abs(x[0]), vec![u(r, &[6], 0.1, 1.0).map(|v| if v > 0.55 { v } else { -v })]))));
    v.push(("sum", Box::new(|r| check_inputs(|g, x| g.sum(x[0]), vec![u(r, &[3, 4], -1.0, 1.0)]))));
    v.push(("mean", Box::new(|r| check_inputs(|g, x| g.mean(x[0]), vec![u(r, &[3, 4], -1.0, 1.0)]))));
    v.push(("silu", Box::new(|r| check_inputs(|g, x| g.silu(x[0]), vec![u(r, &[8], -4.0, 4.0)]))));
    v.push(("sigmoid", Box::new(|r| check_inputs(|g, x| g.sigmoid(x[0]), vec![u(r, &[8], -4.0, 4.0)]))));
    v.push(("softplus", Box::new(|r| check_inputs(|g, x| g.softplus(x[0]), vec![u(r, &[8], -4.0, 4.0)]))));
    v.push(("softmax", Box::new(|r| check_inputs(|g, x| g.softmax(x[0]), vec![u(r, &[3, 5], -2.0, 2.0)]))));
    v.push(("reshape", Box::new(|r| check_inputs(|g, x| g.reshape(x[0], &[6, 2]), vec![u(r, &[3, 4], -1.0, 1.0)]))));
    v.push(("permute", Box::new(|r| check_inputs(|g, x| g.permute(x[0], &[2, 0, 1]), vec![u(r, &[2, 3, 4], -1.0, 1.0)]))));
    v.push(("flip", Box::new(|r| check_inputs(|g, x| g.flip(x[0], 1), vec![u(r, &[2, 3, 4], -1.0, 1.0)]))));
    v.push((
        "concat",
        Box::new(|r| check_inputs(|g, x| g.concat(&[x[0], x[1]], 1), vec![u(r, &[2, 3, 2], -1.0, 1.0), u(r, &[2, 1, 2], -1.0, 1.0)])),
    ));
    v.push(("narrow", Box::new(|r| check_inputs(|g, x| g.narrow(x[0], 1, 1, 2), vec![u(r, &[2, 4, 3], -1.0, 1.0)]))));
    v.push((
        "linear",
        Box::new(|r| {
            check_inputs(
                |g, x| g.linear(x[0], x[1], Some(x[2])),
                vec![u(r, &[2, 3, 4], -1.0, 1.0), u(r, &[4, 5], -1.0, 1.0), u(r, &[5], -1.0, 1.0)],
            )
        }),
    ));
    v.push((
        "conv2d_3x3",
        Box::new(|r| {
            check_inputs(
                |g, x| g.conv2d(x[0], x[1], Some(x[2]), 1, 1, 1),
                vec![u(r, &[2, 2, 5, 4], -1.0, 1.0), u(r, &[3, 2, 3, 3], -1.0, 1.0), u(r, &[3], -1.0, 1.0)],
            )
        }),
    ));
    v.push((
        "conv2d_1x1",
        Box::new(|r| {
            check_inputs(
                |g, x| g.conv2d(x[0], x[1], Some(x[2]), 1, 0, 1),
                vec![u(r, &[1, 3, 3, 3], -1.0, 1.0), u(r, &[2, 3, 1, 1], -1.0, 1.0), u(r, &[2], -1.0, 1.0)],
            )
        }),
    ));
    v.push((
        "conv2d_depthwise_strided",
        Box::new(|r| {
            check_inputs(
                |g, x| g.conv2d(x[0], x[1], None, 2, 1, 4),
                vec![u(r, &[1, 4, 7, 7], -1.0, 1.0), u(r, &[4, 1, 3, 3], -1.0, 1.0)],
            )
        }),
    ));
    v.push((
        "layer_norm",
        Box::new(|r| {
            check_inputs(
                |g, x| g.layer_norm(x[0], x[1], x[2], 1e-5),
                vec![u(r, &[3, 6], -2.0, 2.0), u(r, &[6], 0.5, 1.5), u(r, &[6], -0.5, 0.5)],
            )
        }),
    ));
    v.push(("global_avg_pool", Box::new(|r| check_inputs(|g, x| g.global_avg_pool(x[0]), vec![u(r, &[2, 3, 4, 5], -1.0, 1.0)]))));
    v.push(("down2", Box::new(|r| check_inputs(|g, x| g.down2(x[0]), vec![u(r, &[1, 2, 4, 6], -1.0, 1.0)]))));
    v.push(("up2", Box::new(|r| check_inputs(|g, x| g.up2(x[0]), vec![u(r, &[1, 2, 3, 2], -1.0, 1.0)]))));
    v.push((
        "zoh_a",
        Box::new(|r| check_inputs(|g, x| g.zoh_a(x[0], x[1]), vec![u(r, &[3], -2.0, -0.5), u(r, &[2, 4, 2], 0.1, 1.0)])),
    ));
    v.push((
        "zoh_b",
        Box::new(|r| {
            check_inputs(
                |g, x| g.zoh_b(x[0], x[1], x[2]),
                vec![u(r, &[3], -2.0, -0.5), u(r, &[2, 4, 3], -1.0, 1.0), u(r, &[2, 4, 2], 0.1, 1.0)],
            )
        }),
    ));
    v.push((
        "selective_scan",
        Box::new(move |r| {
            let (b, l, d, n) = (2, 5, 3, 2);
            check_inputs(
                |g, x| g.selective_scan(x[0], x[1], x[2], x[3], x[4], ev),
                vec![
                    u(r, &[b, l, d, n], 0.2, 0.95),
                    u(r, &[b, l, d, n], -1.0, 1.0),
                    u(r, &[b, l, n], -1.0, 1.0),
                    u(r, &[d], -1.0, 1.0),
                    u(r, &[b, l, d], -1.0, 1.0),
                ],
            )
        }),
    ));
    v
}

fn blocks(ev: Evaluator) -> Vec<(&'static str, Check)> {
    let s_cfg = SSsmConfig {
        channels: 4,
        expansion: 2.0,
        state: 3,
        evaluator: ev,
    };
    let c_cfg = CSsmConfig {
        channels: 4,
        state: 3,
        evaluator: ev,
    };
    let x_shape = [1, 4, 4, 4];
    let mut v: Vec<(&'static str, Check)> = Vec::new();
    v.push((
        "s_ssm",
        Box::new(move |r| {
            let mut ps = ParamStore::new();
            let m = SSsm::new(&mut ParamBuilder::new(&mut ps, r), s_cfg)?;
            let x = u(r, &x_shape, -1.0, 1.0);
            check_module(&ps, |g, ps, xs| m.forward(g, ps, xs[0]), vec![x])
        }),
    ));
    v.push((
        "c_ssm",
        Box::new(move |r| {
            let mut ps = ParamStore::new();
            let m = CSsm::new(&mut ParamBuilder::new(&mut ps, r), c_cfg)?;
            let x = u(r, &x_shape, -1.0, 1.0);
            check_module(&ps, |g, ps, xs| m.forward(g, ps, xs[0]), vec![x])
        }),
    ));
    v.push((
        "ff_moe",
        Box::new(move |r| {
            let mut ps = ParamStore::new();
            let m = FfMoe::feed_forward(&mut ParamBuilder::new(&mut ps, r), 4, 3, 0)?;
            let x = u(r, &x_shape, -1.0, 1.0);
            check_module(&ps, |g, ps, xs| m.forward(g, ps, xs[0]), vec![x])
        }),
    ));
    v.push((
        "sm_block",
        Box::new(move |r| {
            let mut ps = ParamStore::new();
            let m: MambaBlock<SSsm> = SmBlock::spatial(&mut ParamBuilder::new(&mut ps, r), s_cfg, 2, 0)?;
            let xs = vec![u(r, &x_shape, -1.0, 1.0), u(r, &x_shape, -1.0, 1.0)];
            check_module(&ps, |g, ps, xs| m.forward(g, ps, xs[0], Some(xs[1])), xs)
        }),
    ));
    v.push((
        "cm_block",
        Box::new(move |r| {
            let mut ps = ParamStore::new();
            let m = CmBlock::channel(&mut ParamBuilder::new(&mut ps, r), c_cfg, 2, 0)?;
            let xs = vec![u(r, &x_shape, -1.0, 1.0), u(r, &x_shape, -1.0, 1.0)];
            check_module(&ps, |g, ps, xs| m.forward(g, ps, xs[0], Some(xs[1])), xs)
        }),
    ));
    v
}

/// The tiny network with non-zero heads, so every branch contributes.
fn network(ev: Evaluator) -> Check {
    Box::new(move |r| {
        let cfg = NetConfig {
            zero_init_heads: false,
            evaluator: ev,
            ..NetConfig::tiny()
        };
        let mut ps = ParamStore::new();
        let net = Network::build(&cfg, &mut ps, r)?;
        let x = u(r, &[1, 3, 8, 8], 0.0, 1.0);
        check_module(
            &ps,
            |g, ps, xs| {
                let out = net.forward(g, ps, xs[0])?;
                let parts: Vec<Var> = out
                    .fused
                    .iter()
                    .map(|&v| {
                        let n = g.value(v).numel();
                        g.reshape(v, &[n])
                    })
                    .collect::<Result<_>>()?;
                g.concat(&parts, 0)
            },
            vec![x],
        )
    })
}

/// Forward `x²` with a backward rule claiming `3x`.
fn corrupted() -> Check {
    Box::new(|r| {
        check_inputs(
            |g, xs| {
                let out = g.value(xs[0]).map(|v| v * v);
                g.custom(
                    "corrupted_square",
                    xs,
                    out,
                    Arc::new(|ins: &[&Tensor<f64>], _: &Tensor<f64>, gy: &Tensor<f64>| {
                        vec![gy.zip_map(ins[0], |gv, x| 3.0 * gv * x).expect("same shape")]
                    }),
                )
            },
            vec![u(r, &[4], 0.5, 1.5)],
        )
    })
}

/// Item names in run order.
pub fn battery_names(opts: &BatteryOptions) -> Vec<String> {
    items(opts).into_iter().map(|(n, _, _)| n).collect()
}

fn items(opts: &BatteryOptions) -> Vec<(String, Tier, Check)> {
    let ev = opts.evaluator;
    let mut out: Vec<(String, Tier, Check)> = Vec::new();
    for (n, c) in primitives(ev) {
        out.push((n.to_string(), Tier::Primitive, c));
    }
    for (n, c) in blocks(ev) {
        out.push((n.to_string(), Tier::Block, c));
    }
    out.push(("tiny_net_8x8".into(), Tier::Network, network(ev)));
    if opts.inject_fault {
        out.push(("corrupted_fixture".into(), Tier::Primitive, corrupted()));
    }
    out
}

/// Runs every item with its own generator derived from `opts.seed` and the
/// item's position, so results do not depend on which items ran before.
pub fn run_battery(opts: &BatteryOptions, mut on_result: impl FnMut(&BatteryResult)) -> Vec<BatteryResult> {
    items(opts)
        .into_iter()
        .enumerate()
        .map(|(i, (name, tier, check))| {
            let mut rng = RngState::new(opts.seed.wrapping_mul(1000).wrapping_add(i as u64));
            let res = BatteryResult {
                name,
                tier,
                tolerance: tier.tolerance(),
                max_rel_error: check(&mut rng).map_err(|e| e.to_string()),
            };
            on_result(&res);
            res
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_stable_and_unique() {
        let names = battery_names(&BatteryOptions::default());
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        assert_eq!(names, battery_names(&BatteryOptions::default()));
        assert_eq!(names.last().unwrap(), "tiny_net_8x8");
    }

    #[test]
    fn fault_fixture_fails() {
        let opts = BatteryOptions {
            inject_fault: true,
            ..Default::default()
        };
        let check = items(&opts).pop().unwrap().2;
        let e = check(&mut RngState::new(0)).unwrap();
        assert!(e > PRIMITIVE_TOL, "{e}");
    }

    #[test]
    fn primitives_pass() {
        for (i, (name, check)) in primitives(Evaluator::Sequential).into_iter().enumerate() {
            let e = check(&mut RngState::new(i as u64)).unwrap();
            assert!(e <= PRIMITIVE_TOL, "{name}: {e}");
        }
    }
}
