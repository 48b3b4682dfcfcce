//! The op, module and end-to-end gradient-check suites.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check, project, CaseReport, CheckOptions};
use crate::caf::Caf;
use crate::config::ModelConfig;
use crate::decoder::Decoder;
use crate::encoder::{to_tokens, Attention, Branch, FeatureEnhance, MitBlock, MixFfn, PatchEmbed};
use crate::error::{Error, Result};
use crate::graph::{BatchNormMode, ConvOpts, Graph, PoolKind, Var};
use crate::loss::{dice_loss, focal_loss, total_loss, LossConfig};
use crate::model::Network;
use crate::nn::{BatchNorm2d, Conv2d, Ctx, ParamStore};
use crate::tensor::Tensor;

/// Random instances per primitive op.
const INSTANCES: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Ops,
    Modules,
    End2end,
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ops" => Ok(Self::Ops),
            "modules" => Ok(Self::Modules),
            "end2end" => Ok(Self::End2end),
            _ => Err(Error::InvalidArgument(format!(
                "unknown gradcheck scope {s:?} (expected ops, modules or end2end)"
            ))),
        }
    }
}

pub fn run_scope(scope: Scope, seed: u64) -> Result<Vec<CaseReport>> {
    match scope {
        Scope::Ops => op_suite(seed),
        Scope::Modules => module_suite(seed),
        Scope::End2end => end2end_suite(seed),
    }
}

fn merge(name: &str, reports: Vec<CaseReport>) -> CaseReport {
    let mut out = CaseReport {
        name: name.to_string(),
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
        passed: true,
    };
    for r in reports {
        out.checked += r.checked;
        out.passed &= r.passed;
        if r.max_rel_err >= out.max_rel_err || out.worst.is_none() {
            out.max_rel_err = r.max_rel_err.max(out.max_rel_err);
            out.worst = r.worst;
        }
    }
    out
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::uniform(shape, 0.5, 2.0, rng)
}

/// Values at least `gap` away from `kink`.
fn avoiding(rng: &mut ChaCha8Rng, shape: &[usize], kink: f64, gap: f64) -> Tensor {
    Tensor::randn(shape, 1.0, rng).map(|v| {
        if (v - kink).abs() < gap {
            kink + gap.copysign(v - kink)
        } else {
            v
        }
    })
}

fn binary(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 }).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

type OpFn = fn(&Graph, &[Var]) -> Result<Var>;
type InputFn = fn(&mut ChaCha8Rng) -> Vec<(&'static str, Tensor)>;

fn op_case(name: &str, seed: u64, inputs: InputFn, f: OpFn) -> Result<CaseReport> {
    let mut reports = Vec::new();
    for k in 0..INSTANCES {
        let s = seed.wrapping_mul(1_000_003).wrapping_add(k);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let ins = inputs(&mut rng);
        let opts = CheckOptions {
            seed: s,
            ..CheckOptions::default()
        };
        reports.push(check(name, &ins, |g, v| project(g, f(g, v)?, s), &opts)?);
    }
    Ok(merge(name, reports))
}

fn conv_case(name: &str, seed: u64, x: [usize; 4], w: [usize; 4], opts: ConvOpts) -> Result<CaseReport> {
    let mut reports = Vec::new();
    for k in 0..INSTANCES {
        let s = seed.wrapping_mul(1_000_003).wrapping_add(k);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let ins = vec![
            ("x", rand_t(&mut rng, &x)),
            ("weight", rand_t(&mut rng, &w)),
            ("bias", rand_t(&mut rng, &[w[0]])),
        ];
        let copts = CheckOptions {
            seed: s,
            ..CheckOptions::default()
        };
        reports.push(check(
            name,
            &ins,
            |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), opts)?;
                project(g, y, s)
            },
            &copts,
        )?);
    }
    Ok(merge(name, reports))
}

pub fn op_suite(seed: u64) -> Result<Vec<CaseReport>> {
    let mut out = Vec::new();
    out.push(op_case(
        "add(broadcast)",
        seed,
        |r| vec![("a", rand_t(r, &[2, 3, 4])), ("b", rand_t(r, &[1, 3, 1]))],
        |g, v| g.add(v[0], v[1]),
    )?);
    out.push(op_case(
        "sub(broadcast)",
        seed,
        |r| vec![("a", rand_t(r, &[2, 3])), ("b", rand_t(r, &[3]))],
        |g, v| g.sub(v[0], v[1]),
    )?);
    out.push(op_case(
        "mul(broadcast)",
        seed,
        |r| vec![("a", rand_t(r, &[2, 3, 4, 5])), ("b", rand_t(r, &[2, 1, 4, 1]))],
        |g, v| g.mul(v[0], v[1]),
    )?);
    out.push(op_case(
        "div",
        seed,
        |r| vec![("a", rand_t(r, &[3, 4])), ("b", positive(r, &[3, 1]))],
        |g, v| g.div(v[0], v[1]),
    )?);
    out.push(op_case(
        "sigmoid",
        seed,
        |r| vec![("x", rand_t(r, &[16]).map(|v| 3.0 * v))],
        |g, v| Ok(g.sigmoid(v[0])),
    )?);
    out.push(op_case(
        "relu",
        seed,
        |r| vec![("x", avoiding(r, &[16], 0.0, 0.05))],
        |g, v| Ok(g.relu(v[0])),
    )?);
    out.push(op_case(
        "gelu",
        seed,
        |r| vec![("x", rand_t(r, &[16]).map(|v| 2.0 * v))],
        |g, v| Ok(g.gelu(v[0])),
    )?);
    out.push(op_case(
        "ln",
        seed,
        |r| vec![("x", positive(r, &[12]))],
        |g, v| Ok(g.ln(v[0])),
    )?);
    out.push(op_case(
        "exp",
        seed,
        |r| vec![("x", rand_t(r, &[12]))],
        |g, v| Ok(g.exp(v[0])),
    )?);
    out.push(op_case(
        "sqrt",
        seed,
        |r| vec![("x", positive(r, &[12]))],
        |g, v| Ok(g.sqrt(v[0])),
    )?);
    out.push(op_case(
        "powf",
        seed,
        |r| vec![("x", positive(r, &[12]))],
        |g, v| Ok(g.powf(v[0], 2.5)),
    )?);
    out.push(op_case(
        "affine",
        seed,
        |r| vec![("x", rand_t(r, &[12]))],
        |g, v| Ok(g.affine(v[0], -1.5, 0.25)),
    )?);
    out.push(op_case(
        "clamp",
        seed,
        |r| {
            let x = avoiding(r, &[16], 0.5, 0.05);
            vec![("x", x.map(|v| if (v + 0.5).abs() < 0.05 { -0.6 } else { v }))]
        },
        |g, v| Ok(g.clamp(v[0], -0.5, 0.5)),
    )?);
    out.push(op_case(
        "sum_all",
        seed,
        |r| vec![("x", rand_t(r, &[3, 4]))],
        |g, v| Ok(g.sum_all(v[0])),
    )?);
    out.push(op_case(
        "mean_axes",
        seed,
        |r| vec![("x", rand_t(r, &[2, 3, 4, 5]))],
        |g, v| g.mean_axes(v[0], &[1, 3]),
    )?);
    out.push(op_case(
        "pool(global_avg)",
        seed,
        |r| vec![("x", rand_t(r, &[2, 3, 4, 5]))],
        |g, v| g.pool(v[0], PoolKind::GlobalAvg),
    )?);
    out.push(op_case(
        "pool(horizontal_avg)",
        seed,
        |r| vec![("x", rand_t(r, &[2, 3, 4, 5]))],
        |g, v| g.pool(v[0], PoolKind::HorizontalAvg),
    )?);
    out.push(op_case(
        "pool(vertical_avg)",
        seed,
        |r| vec![("x", rand_t(r, &[2, 3, 4, 5]))],
        |g, v| g.pool(v[0], PoolKind::VerticalAvg),
    )?);
    out.push(op_case(
        "reshape+permute",
        seed,
        |r| vec![("x", rand_t(r, &[2, 3, 4]))],
        |g, v| {
            let p = g.permute(v[0], &[2, 0, 1])?;
            let t = g.transpose(p, 1, 2)?;
            g.reshape(t, &[4, 6])
        },
    )?);
    out.push(op_case(
        "concat+split",
        seed,
        |r| vec![("a", rand_t(r, &[2, 3, 4])), ("b", rand_t(r, &[2, 2, 4]))],
        |g, v| {
            let cat = g.concat(&[v[0], v[1]], 1)?;
            let parts = g.split(cat, &[1, 4], 1)?;
            let sq = g.mul(parts[0], parts[0])?;
            g.concat(&[parts[1], sq], 1)
        },
    )?);
    out.push(op_case(
        "narrow",
        seed,
        |r| vec![("x", rand_t(r, &[3, 6]))],
        |g, v| g.narrow(v[0], 1, 2, 3),
    )?);
    out.push(op_case(
        "linear",
        seed,
        |r| {
            vec![
                ("x", rand_t(r, &[2, 3, 4])),
                ("weight", rand_t(r, &[5, 4])),
                ("bias", rand_t(r, &[5])),
            ]
        },
        |g, v| g.linear(v[0], v[1], Some(v[2])),
    )?);
    out.push(op_case(
        "matmul",
        seed,
        |r| vec![("a", rand_t(r, &[2, 3, 4])), ("b", rand_t(r, &[2, 4, 5]))],
        |g, v| g.matmul(v[0], v[1]),
    )?);
    out.push(op_case(
        "softmax",
        seed,
        |r| vec![("x", rand_t(r, &[3, 6]))],
        |g, v| Ok(g.softmax_lastdim(v[0])),
    )?);
    out.push(op_case(
        "layer_norm",
        seed,
        |r| {
            vec![
                ("x", rand_t(r, &[2, 5, 6])),
                ("gamma", rand_t(r, &[6])),
                ("beta", rand_t(r, &[6])),
            ]
        },
        |g, v| g.layer_norm(v[0], v[1], v[2], 1e-6),
    )?);
    out.push(conv_case(
        "conv2d",
        seed,
        [2, 3, 6, 6],
        [4, 3, 3, 3],
        ConvOpts::new(1, 1),
    )?);
    out.push(conv_case(
        "conv2d(stride)",
        seed,
        [1, 3, 12, 12],
        [4, 3, 7, 7],
        ConvOpts::new(4, 3),
    )?);
    out.push(conv_case(
        "conv2d(dilation)",
        seed,
        [2, 3, 6, 6],
        [4, 3, 3, 3],
        ConvOpts::dilated(2, 2),
    )?);
    out.push(conv_case(
        "conv2d(depthwise)",
        seed,
        [1, 4, 5, 5],
        [4, 1, 3, 3],
        ConvOpts::new(1, 1).with_groups(4),
    )?);
    out.push(op_case(
        "batchnorm(train)",
        seed,
        |r| {
            vec![
                ("x", rand_t(r, &[2, 3, 4, 4])),
                ("gamma", rand_t(r, &[3])),
                ("beta", rand_t(r, &[3])),
            ]
        },
        |g, v| Ok(g.batch_norm(v[0], v[1], v[2], 1e-5, BatchNormMode::Train)?.0),
    )?);
    out.push(op_case(
        "batchnorm(eval)",
        seed,
        |r| {
            vec![
                ("x", rand_t(r, &[2, 3, 4, 4])),
                ("gamma", rand_t(r, &[3])),
                ("beta", rand_t(r, &[3])),
            ]
        },
        |g, v| {
            let mode = BatchNormMode::Eval {
                running_mean: &[0.3, -0.2, 0.1],
                running_var: &[1.5, 0.7, 2.0],
            };
            Ok(g.batch_norm(v[0], v[1], v[2], 1e-5, mode)?.0)
        },
    )?);
    out.push(op_case(
        "upsample_bilinear",
        seed,
        |r| vec![("x", rand_t(r, &[1, 2, 3, 3]))],
        |g, v| g.upsample_bilinear(v[0], 7, 5),
    )?);
    Ok(out)
}

/// Checks `f` with respect to `inputs` and every trainable entry of `store`.
fn check_params<F>(
    name: &str,
    store: &ParamStore,
    inputs: Vec<(&'static str, Tensor)>,
    training: bool,
    opts: &CheckOptions,
    mut f: F,
) -> Result<CaseReport>
where
    F: FnMut(&mut Ctx<'_>, &[Var]) -> Result<Var>,
{
    let ids = store.trainable_ids();
    let n_in = inputs.len();
    let mut all: Vec<(&str, Tensor)> = inputs;
    for &id in &ids {
        all.push((store.get(id).name.as_str(), store.value(id).clone()));
    }
    let mut local = store.clone();
    let seed = opts.seed;
    check(
        name,
        &all,
        |g, vars| {
            let mut ctx = Ctx::new(g, &mut local, training);
            for (k, &id) in ids.iter().enumerate() {
                ctx.bind(id, vars[n_in + k]);
            }
            let out = f(&mut ctx, &vars[..n_in])?;
            project(g, out, seed)
        },
        opts,
    )
}

/// Perturbs every parameter away from its init so that zero biases and unit
/// norms do not hide errors.
fn jitter(store: &mut ParamStore, rng: &mut ChaCha8Rng, std: f64) {
    for id in store.trainable_ids() {
        let v = store.value_mut(id);
        let noise = Tensor::randn(v.shape(), std, rng);
        for (a, b) in v.data_mut().iter_mut().zip(noise.data()) {
            *a += b;
        }
    }
}

fn fe_config() -> ModelConfig {
    ModelConfig {
        embed_dims: [4, 8, 32, 32],
        fe_spatial_reduction: 8,
        fe_channel_reduction: 8,
        ..ModelConfig::tiny()
    }
}

pub fn module_suite(seed: u64) -> Result<Vec<CaseReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d6f_6475_6c65);
    let opts = CheckOptions {
        seed,
        ..CheckOptions::default()
    };
    let mut out = Vec::new();

    {
        let mut store = ParamStore::new();
        let conv = Conv2d::new(&mut store, "conv", 3, 2, 3, ConvOpts::new(1, 1), true, &mut rng);
        let bn = BatchNorm2d::new(&mut store, "bn", 2);
        jitter(&mut store, &mut rng, 0.1);
        let x = rand_t(&mut rng, &[1, 3, 8, 8]);
        let gt = binary(&mut rng, &[1, 1, 8, 8]);
        out.push(check_params(
            "conv->bn->sigmoid->dice",
            &store,
            vec![("x", x)],
            true,
            &opts,
            |ctx, v| {
                let g = ctx.graph;
                let y = conv.forward(ctx, v[0])?;
                let y = bn.forward(ctx, y)?;
                let p = g.sigmoid(y);
                let p = g.mean_axes(p, &[1])?;
                dice_loss(g, p, &gt, &LossConfig::default())
            },
        )?);
    }

    {
        let mut store = ParamStore::new();
        let pe = PatchEmbed::new(&mut store, "patch_embed", 3, 8, true, &mut rng);
        jitter(&mut store, &mut rng, 0.1);
        let x = rand_t(&mut rng, &[1, 3, 16, 16]);
        out.push(check_params(
            "patch_embed",
            &store,
            vec![("x", x)],
            true,
            &opts,
            |ctx, v| Ok(pe.forward(ctx, v[0])?.0),
        )?);
    }

    {
        let mut store = ParamStore::new();
        let attn = Attention::new(&mut store, "attn", 8, 2, 2, &mut rng);
        jitter(&mut store, &mut rng, 0.3);
        let x = rand_t(&mut rng, &[1, 16, 8]);
        out.push(check_params(
            "attention(sr=2)",
            &store,
            vec![("x", x)],
            true,
            &opts,
            |ctx, v| attn.forward(ctx, v[0], 4, 4),
        )?);
    }

    {
        let mut store = ParamStore::new();
        let ffn = MixFfn::new(&mut store, "mlp", 8, 16, &mut rng);
        jitter(&mut store, &mut rng, 0.3);
        let x = rand_t(&mut rng, &[1, 16, 8]);
        out.push(check_params(
            "mix_ffn",
            &store,
            vec![("x", x)],
            true,
            &opts,
            |ctx, v| ffn.forward(ctx, v[0], 4, 4),
        )?);
    }

    {
        let mut store = ParamStore::new();
        let block = MitBlock::new(&mut store, "block", 8, 2, 2, 2, &mut rng);
        jitter(&mut store, &mut rng, 0.3);
        let x = rand_t(&mut rng, &[1, 8, 4, 4]);
        out.push(check_params(
            "mit_block",
            &store,
            vec![("x", x)],
            true,
            &opts,
            |ctx, v| {
                let t = to_tokens(ctx.graph, v[0])?;
                block.forward(ctx, t, 4, 4)
            },
        )?);
    }

    {
        let cfg = fe_config();
        let mut store = ParamStore::new();
        let fe = FeatureEnhance::new(&mut store, "fe", &cfg, &mut rng);
        jitter(&mut store, &mut rng, 0.2);
        let x = rand_t(&mut rng, &[3, 32, 4, 4]);
        out.push(check_params(
            "fe_spatial",
            &store,
            vec![("x", x.clone())],
            true,
            &opts,
            |ctx, v| fe.spatial(ctx, v[0]),
        )?);
        out.push(check_params(
            "fe_channel",
            &store,
            vec![("x", x.clone())],
            true,
            &opts,
            |ctx, v| fe.channel(ctx, v[0]),
        )?);
        out.push(check_params(
            "fe_enhance",
            &store,
            vec![("x", x)],
            true,
            &opts,
            |ctx, v| fe.forward(ctx, v[0]),
        )?);
    }

    {
        let mut store = ParamStore::new();
        let caf = Caf::new(&mut store, "caf", 8, 8, &mut rng);
        jitter(&mut store, &mut rng, 0.2);
        let a = rand_t(&mut rng, &[2, 4, 3, 5]);
        let b = rand_t(&mut rng, &[2, 4, 3, 5]);
        out.push(check_params(
            "caf_fuse",
            &store,
            vec![("z_rgb", a), ("z_noise", b)],
            true,
            &opts,
            |ctx, v| caf.forward(ctx, v[0], v[1]),
        )?);
    }

    {
        let mut store = ParamStore::new();
        let chans = [8, 16, 32, 64];
        let dec = Decoder::new(&mut store, "decoder", chans, 8, &mut rng);
        jitter(&mut store, &mut rng, 0.3);
        let feats: Vec<(&'static str, Tensor)> = ["z1", "z2", "z3", "z4"]
            .iter()
            .enumerate()
            .map(|(s, &n)| (n, rand_t(&mut rng, &[1, chans[s], 8 >> s, 8 >> s])))
            .collect();
        out.push(check_params("decoder", &store, feats, true, &opts, |ctx, v| {
            dec.forward(ctx, v, 32, 32)
        })?);
    }

    let cfg = LossConfig::default();
    let pred = Tensor::uniform(&[2, 1, 4, 4], 0.05, 0.95, &mut rng);
    let gt = binary(&mut rng, &[2, 1, 4, 4]);
    type LossFn = fn(&Graph, Var, &Tensor, &LossConfig) -> Result<Var>;
    let losses: [(&str, LossFn); 3] = [("dice", dice_loss), ("focal", focal_loss), ("dice+focal", total_loss)];
    for (name, f) in losses {
        out.push(check(
            name,
            &[("pred", pred.clone())],
            |g, v| f(g, v[0], &gt, &cfg),
            &opts,
        )?);
    }
    Ok(out)
}

/// Coordinates sampled per parameter tensor in the end-to-end checks.
const E2E_COORDS: usize = 3;

pub fn end2end_suite(seed: u64) -> Result<Vec<CaseReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6532_6500);
    let cfg = ModelConfig::tiny();
    let opts = CheckOptions::sampled(E2E_COORDS, seed);
    let mut out = Vec::new();
    let x = Tensor::uniform(&[2, 3, 32, 32], 0.0, 1.0, &mut rng);

    {
        let mut store = ParamStore::new();
        let branch = Branch::new(&mut store, "rgb", 3, &cfg, &mut rng);
        jitter(&mut store, &mut rng, 0.05);
        out.push(check_params(
            "encode_branch(rgb)",
            &store,
            vec![("x", x.clone())],
            true,
            &opts,
            |ctx, v| {
                let feats = branch.forward(ctx, v[0])?;
                let flat: Vec<Var> = feats
                    .iter()
                    .map(|&z| {
                        let n = ctx.graph.value(z).numel();
                        ctx.graph.reshape(z, &[n])
                    })
                    .collect::<Result<_>>()?;
                ctx.graph.concat(&flat, 0)
            },
        )?);
    }

    {
        let mut store = ParamStore::new();
        let net = Network::new(&cfg, &mut store, &mut rng)?;
        jitter(&mut store, &mut rng, 0.05);
        let gt = binary(&mut rng, &[2, 1, 32, 32]);
        let loss_cfg = LossConfig::default();
        out.push(check_params(
            "forward_full+loss",
            &store,
            Vec::new(),
            true,
            &opts,
            |ctx, _| {
                let xv = ctx.graph.constant(x.clone());
                let trace = net.forward(ctx, xv)?;
                total_loss(ctx.graph, trace.mask, &gt, &loss_cfg)
            },
        )?);
    }
    Ok(out)
}
