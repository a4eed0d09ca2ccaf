//! Named finite-difference verification suites.
//!
//! Each suite builds a small deterministic computation in f64, checks the
//! reverse-mode gradients of every input against central differences and
//! reports the worst relative error. The command-line tool exposes these
//! as the `gradcheck` subcommand; the same list backs the acceptance
//! tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conv::Conv2dSpec;
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
use crate::kan::{tok_forward, KanLayer, SplineGrid, TokBlock, TokenMixer};
use crate::model::{downsample, register_downsample, register_upsample, upsample, KmUnet, ModelConfig};
use crate::params::{ParamVars, Params};
use crate::s6::{s6_forward, S6Config, S6Params};
use crate::scan::ScanDirection;
use crate::sem::{multiscale_attention, sem_forward, SemModule, SemSettings};
use crate::tensor::Tensor;
use crate::train::bce_dice_loss;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VerifyModule {
    All,
    S6,
    Kan,
    Sem,
    Model,
}

impl VerifyModule {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "all" => Ok(VerifyModule::All),
            "s6" => Ok(VerifyModule::S6),
            "kan" => Ok(VerifyModule::Kan),
            "sem" => Ok(VerifyModule::Sem),
            "model" => Ok(VerifyModule::Model),
            other => Err(Error::config(format!(
                "unknown gradcheck module {other:?}; expected all, s6, kan, sem or model"
            ))),
        }
    }
}

pub struct SuiteResult {
    pub name: &'static str,
    pub report: GradCheckReport,
}

fn cfg_full() -> GradCheckConfig {
    GradCheckConfig::default()
}

fn cfg_sampled(coords: usize) -> GradCheckConfig {
    GradCheckConfig { max_coords_per_tensor: Some(coords), ..GradCheckConfig::default() }
}

fn suite_matmul() -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let a = Tensor::rand_uniform(vec![3, 4], -1.0, 1.0, &mut rng);
    let b = Tensor::rand_uniform(vec![4, 2], -1.0, 1.0, &mut rng);
    grad_check(
        &[("a", a), ("b", b)],
        &|tape, vars| {
            let y = tape.matmul(vars[0], vars[1])?;
            let s = tape.sigmoid(y);
            Ok(tape.mean_all(s))
        },
        &cfg_full(),
    )
}

fn suite_conv2d() -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let x = Tensor::rand_uniform(vec![2, 3, 5, 5], -1.0, 1.0, &mut rng);
    let w = Tensor::rand_uniform(vec![4, 3, 3, 3], -0.5, 0.5, &mut rng);
    let b = Tensor::rand_uniform(vec![4], -0.2, 0.2, &mut rng);
    grad_check(
        &[("x", x), ("w", w), ("b", b)],
        &|tape, vars| {
            let y = tape.conv2d(vars[0], vars[1], Some(vars[2]), Conv2dSpec::new(2, 1, 1))?;
            let sq = tape.mul(y, y)?;
            Ok(tape.mean_all(sq))
        },
        &cfg_full(),
    )
}

fn suite_layer_norm() -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let x = Tensor::rand_uniform(vec![2, 3, 6], -2.0, 2.0, &mut rng);
    let gamma = Tensor::rand_uniform(vec![6], 0.5, 1.5, &mut rng);
    let beta = Tensor::rand_uniform(vec![6], -0.5, 0.5, &mut rng);
    grad_check(
        &[("x", x), ("gamma", gamma), ("beta", beta)],
        &|tape, vars| {
            let y = tape.layer_norm(vars[0], vars[1], vars[2], 1e-5)?;
            let s = tape.silu(y);
            Ok(tape.mean_all(s))
        },
        &cfg_full(),
    )
}

fn suite_pointwise() -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    // keep values away from the relu kink at zero
    let x = Tensor::from_fn(vec![12], |i| {
        let v: f64 = rng.random_range(0.2..1.5);
        if i % 2 == 0 {
            v
        } else {
            -v
        }
    });
    let y = Tensor::rand_uniform(vec![12], -1.0, 1.0, &mut rng);
    grad_check(
        &[("x", x), ("y", y)],
        &|tape, vars| {
            let e = tape.exp(vars[0]);
            let sp = tape.softplus(e);
            let si = tape.silu(sp);
            let r = tape.relu(vars[0]);
            let m = tape.mul(si, r)?;
            let sg = tape.sigmoid(vars[1]);
            let sum = tape.add(m, sg)?;
            let sc = tape.scale(sum, 0.7);
            Ok(tape.mean_all(sc))
        },
        &cfg_full(),
    )
}

/// Ordered leaf tensors plus a forward closure for a registered module.
fn registry_inputs(params: &Params<f64>) -> Vec<(String, Tensor<f64>)> {
    params.snapshot()
}

fn suite_s6() -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let mut params = Params::<f64>::new();
    let p = S6Params::register(&mut params, "s6", S6Config { d_model: 3, n_state: 2 }, &mut rng)?;
    let x = Tensor::rand_uniform(vec![2, 4, 3], -1.0, 1.0, &mut rng);
    let mut inputs = vec![("x".to_string(), x)];
    inputs.extend(registry_inputs(&params));
    let named: Vec<(&str, Tensor<f64>)> =
        inputs.iter().map(|(n, t)| (n.as_str(), t.clone())).collect();
    grad_check(
        &named,
        &|tape, vars| {
            let pv = ParamVars::from_vars(vars[1..].to_vec());
            let y = s6_forward(tape, &p.vars(&pv), vars[0])?;
            let sq = tape.mul(y, y)?;
            Ok(tape.mean_all(sq))
        },
        &cfg_full(),
    )
}

fn suite_kan_layer() -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let grid = SplineGrid::new(5, 3, 1.0)?;
    let mut params = Params::<f64>::new();
    let layer = KanLayer::register(&mut params, "kan", 3, 2, grid, &mut rng)?;
    let z = Tensor::rand_uniform(vec![6, 3], -0.9, 0.9, &mut rng);
    let mut inputs = vec![("z".to_string(), z)];
    inputs.extend(registry_inputs(&params));
    let named: Vec<(&str, Tensor<f64>)> =
        inputs.iter().map(|(n, t)| (n.as_str(), t.clone())).collect();
    grad_check(
        &named,
        &|tape, vars| {
            let pv = ParamVars::from_vars(vars[1..].to_vec());
            let y =
                tape.kan_layer(vars[0], pv.get(layer.base_w), pv.get(layer.coeffs), &layer.grid)?;
            let sq = tape.mul(y, y)?;
            Ok(tape.mean_all(sq))
        },
        &cfg_full(),
    )
}

fn suite_tok_block() -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    let grid = SplineGrid::new(4, 2, 1.0)?;
    let mut params = Params::<f64>::new();
    let block = TokBlock::register(&mut params, "tok", 3, TokenMixer::Kan, &grid, &mut rng)?;
    let z = Tensor::rand_uniform(vec![1, 6, 3], -0.8, 0.8, &mut rng);
    let mut inputs = vec![("z".to_string(), z)];
    inputs.extend(registry_inputs(&params));
    let named: Vec<(&str, Tensor<f64>)> =
        inputs.iter().map(|(n, t)| (n.as_str(), t.clone())).collect();
    grad_check(
        &named,
        &|tape, vars| {
            let pv = ParamVars::from_vars(vars[1..].to_vec());
            let y = tok_forward(tape, &pv, &block, vars[0], 2, 3)?;
            let sq = tape.mul(y, y)?;
            Ok(tape.mean_all(sq))
        },
        &cfg_full(),
    )
}

fn suite_attention() -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(108);
    let settings = SemSettings {
        channels: 4,
        n_state: 2,
        directions: vec![ScanDirection::TlBr],
        attention_groups: 2,
    };
    let mut params = Params::<f64>::new();
    let sem = SemModule::register(&mut params, "sem", &settings, &mut rng)?;
    let x = Tensor::rand_uniform(vec![1, 4, 3, 3], -1.0, 1.0, &mut rng);
    let mut inputs = vec![("x".to_string(), x)];
    inputs.extend(registry_inputs(&params));
    let named: Vec<(&str, Tensor<f64>)> =
        inputs.iter().map(|(n, t)| (n.as_str(), t.clone())).collect();
    grad_check(
        &named,
        &|tape, vars| {
            let pv = ParamVars::from_vars(vars[1..].to_vec());
            let y = multiscale_attention(tape, &pv, &sem, vars[0])?;
            let sq = tape.mul(y, y)?;
            Ok(tape.mean_all(sq))
        },
        &cfg_full(),
    )
}

fn suite_sem_block() -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(109);
    let settings = SemSettings {
        channels: 2,
        n_state: 2,
        directions: vec![ScanDirection::TlBr, ScanDirection::SpiralIn],
        attention_groups: 1,
    };
    let mut params = Params::<f64>::new();
    let sem = SemModule::register(&mut params, "sem", &settings, &mut rng)?;
    let x = Tensor::rand_uniform(vec![1, 2, 3, 4], -1.0, 1.0, &mut rng);
    let mut inputs = vec![("x".to_string(), x)];
    inputs.extend(registry_inputs(&params));
    let named: Vec<(&str, Tensor<f64>)> =
        inputs.iter().map(|(n, t)| (n.as_str(), t.clone())).collect();
    grad_check(
        &named,
        &|tape, vars| {
            let pv = ParamVars::from_vars(vars[1..].to_vec());
            let y = sem_forward(tape, &pv, &sem, vars[0])?;
            let sq = tape.mul(y, y)?;
            Ok(tape.mean_all(sq))
        },
        &cfg_sampled(24),
    )
}

fn suite_down_up() -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(110);
    let mut params = Params::<f64>::new();
    let (dw, db) = register_downsample(&mut params, "down", 2, 3, &mut rng)?;
    let (uw, ub) = register_upsample(&mut params, "up", 3, 2, &mut rng)?;
    let x = Tensor::rand_uniform(vec![1, 2, 4, 4], -1.0, 1.0, &mut rng);
    let mut inputs = vec![("x".to_string(), x)];
    inputs.extend(registry_inputs(&params));
    let named: Vec<(&str, Tensor<f64>)> =
        inputs.iter().map(|(n, t)| (n.as_str(), t.clone())).collect();
    grad_check(
        &named,
        &|tape, vars| {
            let pv = ParamVars::from_vars(vars[1..].to_vec());
            let d = downsample(tape, pv.get(dw), pv.get(db), vars[0])?;
            let u = upsample(tape, pv.get(uw), pv.get(ub), d)?;
            let sq = tape.mul(u, u)?;
            Ok(tape.mean_all(sq))
        },
        &cfg_full(),
    )
}

fn suite_model_loss() -> Result<GradCheckReport> {
    let cfg = ModelConfig {
        in_channels: 3,
        out_channels: 1,
        conv_channels: [2, 3, 4],
        token_dims: [6, 8],
        n_state: 2,
        directions: vec![ScanDirection::TlBr, ScanDirection::SpiralIn],
        attention_groups: 1,
        token_mixer: TokenMixer::Kan,
        kan_grid: 4,
        kan_order: 2,
        kan_range: 1.0,
    };
    let model = KmUnet::<f64>::build(cfg, 42)?;
    let mut rng = ChaCha8Rng::seed_from_u64(111);
    let x = Tensor::rand_uniform(vec![1, 3, 32, 32], 0.0, 1.0, &mut rng);
    let target = Tensor::from_fn(vec![1, 1, 32, 32], |i| {
        let (y, x) = (i / 32 % 32, i % 32);
        if (y as i64 - 16).pow(2) + (x as i64 - 16).pow(2) < 81 {
            1.0
        } else {
            0.0
        }
    });
    let mut inputs = vec![("input".to_string(), x)];
    inputs.extend(registry_inputs(&model.params));
    let named: Vec<(&str, Tensor<f64>)> =
        inputs.iter().map(|(n, t)| (n.as_str(), t.clone())).collect();
    grad_check(
        &named,
        &|tape, vars| {
            let pv = ParamVars::from_vars(vars[1..].to_vec());
            let t = tape.constant(target.clone());
            let logits = model.forward(tape, &pv, vars[0])?;
            bce_dice_loss(tape, logits, t, 1.0, 1.0)
        },
        &cfg_sampled(2),
    )
}

type Suite = (&'static str, fn() -> Result<GradCheckReport>);

const SUITES: &[Suite] = &[
    ("matmul", suite_matmul),
    ("conv2d", suite_conv2d),
    ("layer_norm", suite_layer_norm),
    ("pointwise", suite_pointwise),
    ("s6_block", suite_s6),
    ("kan_layer", suite_kan_layer),
    ("tok_block", suite_tok_block),
    ("attention", suite_attention),
    ("sem_block", suite_sem_block),
    ("down_up", suite_down_up),
    ("model_loss", suite_model_loss),
];

fn selected(which: VerifyModule) -> Vec<&'static str> {
    match which {
        VerifyModule::All => SUITES.iter().map(|(n, _)| *n).collect(),
        VerifyModule::S6 => vec!["s6_block"],
        VerifyModule::Kan => vec!["kan_layer", "tok_block"],
        VerifyModule::Sem => vec!["attention", "sem_block"],
        VerifyModule::Model => vec!["down_up", "model_loss"],
    }
}

/// Runs the chosen suites in order; failures are reported, not short-circuited.
pub fn run_suites(which: VerifyModule) -> Result<Vec<SuiteResult>> {
    let wanted = selected(which);
    let mut out = Vec::with_capacity(wanted.len());
    for (name, f) in SUITES {
        if wanted.contains(name) {
            out.push(SuiteResult { name, report: f()? });
        }
    }
    Ok(out)
}
