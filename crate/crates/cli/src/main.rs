//! `kmunet` — one binary for the whole workflow: synthetic data
//! generation, training, evaluation, inference, gradient verification,
//! activation-map export and scan benchmarking.
//!
//! Exit codes: 0 success, 1 validation error, 2 verification failure,
//! 3 I/O error. Every subcommand is deterministic given its flags except
//! `bench` timings.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use kmunet_core::bench::time_selective_scan;
use kmunet_core::checkpoint;
use kmunet_core::config::RunConfig;
use kmunet_core::data::{gen_synthetic, load_dataset, save_mask, split, write_dataset};
use kmunet_core::model::KmUnet;
use kmunet_core::pnm::{self, PnmImage};
use kmunet_core::train::{binarize_logits, evaluate, train_loop, write_history_csv};
use kmunet_core::verify::{run_suites, VerifyModule};
use kmunet_core::{Error, Result, Scalar, Tensor};

#[derive(Parser)]
#[command(
    name = "kmunet",
    version,
    about = "Selective-state-space / KAN U-Net segmentation workflow"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic shape-segmentation dataset.
    GenData {
        /// Output directory (images/, masks/, index.txt).
        #[arg(long)]
        out: PathBuf,
        /// Number of image/mask pairs.
        #[arg(long)]
        n: usize,
        /// Image size as HxW; both must be divisible by 32.
        #[arg(long)]
        size: String,
        /// Dataset seed; falls back to $KM_SEED, then 42.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model from a key=value config file.
    Train {
        /// Config file; unknown keys are rejected.
        #[arg(long)]
        config: PathBuf,
        /// Override a config key, e.g. --set epochs=10. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        /// Independent runs (seed, seed+1, ...); reports mean and spread.
        #[arg(long, default_value_t = 1)]
        runs: usize,
    },
    /// Evaluate a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Segment one image and write the binary mask as P5.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the 64-bit finite-difference gradient suites.
    Gradcheck {
        /// all, s6, kan, sem or model.
        #[arg(long, default_value = "all")]
        module: String,
    },
    /// Write per-stage mean-activation maps for one image.
    Explain {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Output directory for the P5 maps.
        #[arg(long)]
        out: PathBuf,
    },
    /// Time a kernel and report analytic model cost figures.
    Bench {
        /// Kernel to time; only selective_scan exists.
        #[arg(long, default_value = "selective_scan")]
        op: String,
        /// Comma-separated sequence lengths.
        #[arg(long, default_value = "1024,2048,4096")]
        sizes: String,
        /// Model width for the timed scan.
        #[arg(long, default_value_t = 64)]
        d_model: usize,
        /// State count for the timed scan.
        #[arg(long, default_value_t = 8)]
        n_state: usize,
        /// Timed repetitions per size; the median is reported.
        #[arg(long, default_value_t = 5)]
        iters: usize,
        /// Config whose parameter count / MAC estimate to report
        /// (defaults to the built-in tiny config).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Input size HxW for the MAC estimate.
        #[arg(long, default_value = "64x64")]
        mac_size: String,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                ExitCode::SUCCESS
            } else {
                // Bad flags are validation errors, same as bad config values.
                ExitCode::from(1)
            };
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Dim(_) | Error::Config(_) | Error::Contract(_) => 1,
                Error::Verify(_) => 2,
                Error::Io(_) => 3,
            })
        }
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData { out, n, size, seed } => cmd_gen_data(&out, n, &size, seed),
        Cmd::Train { config, sets, runs } => cmd_train(&config, &sets, runs),
        Cmd::Eval { ckpt, data } => cmd_eval(&ckpt, &data),
        Cmd::Infer { ckpt, image, out } => cmd_infer(&ckpt, &image, &out),
        Cmd::Gradcheck { module } => cmd_gradcheck(&module),
        Cmd::Explain { ckpt, image, out } => cmd_explain(&ckpt, &image, &out),
        Cmd::Bench { op, sizes, d_model, n_state, iters, config, mac_size } => {
            cmd_bench(&op, &sizes, d_model, n_state, iters, config.as_deref(), &mac_size)
        }
    }
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let parts = s
        .split_once(['x', 'X'])
        .ok_or_else(|| Error::config(format!("size must look like 64x64, got {s:?}")))?;
    let h = parts.0.trim().parse::<usize>();
    let w = parts.1.trim().parse::<usize>();
    match (h, w) {
        (Ok(h), Ok(w)) if h > 0 && w > 0 => Ok((h, w)),
        _ => Err(Error::config(format!("size must look like 64x64, got {s:?}"))),
    }
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var("KM_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::config(format!("KM_SEED must be an unsigned integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

fn cmd_gen_data(out: &Path, n: usize, size: &str, seed: Option<u64>) -> Result<()> {
    let (h, w) = parse_size(size)?;
    if h % 32 != 0 || w % 32 != 0 {
        return Err(Error::config(format!(
            "size {h}x{w}: dimensions must be divisible by 32"
        )));
    }
    if n == 0 {
        return Err(Error::config("--n must be at least 1"));
    }
    let seed = match seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(42),
    };
    let samples = gen_synthetic::<f32>(n, h, w, seed)?;
    write_dataset(out, &samples)?;
    println!("wrote {} samples to {}", samples.len(), out.display());
    Ok(())
}

/// True if any non-comment line assigns `key`.
fn text_sets_key(text: &str, key: &str) -> bool {
    text.lines()
        .filter_map(|l| l.split('#').next())
        .filter_map(|l| l.split_once('='))
        .any(|(k, _)| k.trim() == key)
}

/// Config file, then --set overrides; $KM_SEED fills the seed only when
/// neither mentions it.
fn resolve_config(path: &Path, sets: &[String]) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cfg = RunConfig::parse(&text)?;
    let mut seed_given = text_sets_key(&text, "seed");
    for kv in sets {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        let k = k.trim();
        cfg.apply(k, v.trim())?;
        if k == "seed" {
            seed_given = true;
        }
    }
    if !seed_given {
        if let Some(s) = env_seed()? {
            cfg.train.seed = s;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn mean_spread(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn cmd_train(config: &Path, sets: &[String], runs: usize) -> Result<()> {
    if runs == 0 {
        return Err(Error::config("--runs must be at least 1"));
    }
    let base = resolve_config(config, sets)?;
    let data_dir = base
        .data_dir
        .clone()
        .ok_or_else(|| Error::config("config must set data_dir"))?;
    let out_dir = base
        .out_dir
        .clone()
        .ok_or_else(|| Error::config("config must set out_dir"))?;
    let samples = load_dataset::<f32>(Path::new(&data_dir), None)?;
    let out_dir = Path::new(&out_dir);
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut final_train_ious = Vec::with_capacity(runs);
    let mut best_val_ious = Vec::with_capacity(runs);
    for run in 0..runs {
        let mut cfg = base.clone();
        cfg.train.seed = base.train.seed + run as u64;
        println!("run {run} config:");
        print!("{}", cfg.serialize());
        let (train_set, val_set) = split(samples.clone(), cfg.split, cfg.train.seed)?;
        println!("dataset: {} train / {} val", train_set.len(), val_set.len());
        let mut model = KmUnet::<f32>::build(cfg.model.clone(), cfg.train.seed)?;
        println!("parameters: {}", model.param_count());

        let outcome = train_loop(&mut model, &train_set, &val_set, &cfg.train, |s| {
            println!(
                "epoch {} lr {:.4e} loss {:.6} val_iou {:.4} val_f1 {:.4}",
                s.epoch, s.lr, s.train_loss, s.val_iou, s.val_f1
            );
        })?;

        let suffix = if runs == 1 { String::new() } else { format!("_run{run}") };
        let hist_path = out_dir.join(format!("history{suffix}.csv"));
        write_history_csv(&hist_path, &outcome.history)?;
        let best_values: Vec<_> = outcome.best_params.iter().map(|(_, t)| t.clone()).collect();
        model.params.set_all(&best_values)?;
        let ckpt_path = out_dir.join(format!("best{suffix}.ckpt"));
        checkpoint::save(&ckpt_path, &cfg.serialize(), &model.params)?;

        println!(
            "run {run}: best val IoU {} at epoch {}",
            outcome.best_val_iou, outcome.best_epoch
        );
        println!("final train IoU {}", outcome.final_train_iou);
        println!("final train F1 {}", outcome.final_train_f1);
        println!("wrote {} and {}", hist_path.display(), ckpt_path.display());
        final_train_ious.push(outcome.final_train_iou);
        best_val_ious.push(outcome.best_val_iou);
    }
    if runs > 1 {
        let (m, s) = mean_spread(&final_train_ious);
        println!("final train IoU over {runs} runs: {m:.4} +- {s:.4}");
        let (m, s) = mean_spread(&best_val_ious);
        println!("best val IoU over {runs} runs: {m:.4} +- {s:.4}");
    }
    Ok(())
}

/// Rebuilds the model a checkpoint was saved from and loads its weights.
fn load_model(path: &Path) -> Result<(KmUnet<f32>, RunConfig)> {
    let (text, tensors) = checkpoint::load(path)?;
    let cfg = RunConfig::parse(&text).map_err(|e| {
        Error::io_msg(format!("{}: embedded config: {e}", path.display()))
    })?;
    let mut model = KmUnet::<f32>::build(cfg.model.clone(), cfg.train.seed)?;
    checkpoint::apply(&mut model.params, &tensors)?;
    Ok((model, cfg))
}

/// Reads a PGM/PPM image into a `[1, 3, h, w]` tensor in [0, 1];
/// grayscale input is replicated across the three channels.
fn load_image_tensor(path: &Path) -> Result<Tensor<f32>> {
    let (data, h, w, chan) = match pnm::read_pnm(path)? {
        PnmImage::Rgb { width, height, data } => (data, height, width, 3),
        PnmImage::Gray { width, height, data } => (data, height, width, 1),
    };
    Ok(Tensor::from_fn(vec![1, 3, h, w], |i| {
        let (c, rest) = ((i / (h * w)) % 3, i % (h * w));
        let src_c = if chan == 3 { c } else { 0 };
        data[rest * chan + src_c] as f32 / 255.0
    }))
}

fn cmd_eval(ckpt: &Path, data: &Path) -> Result<()> {
    let (model, _) = load_model(ckpt)?;
    let samples = load_dataset::<f32>(data, None)?;
    let report = evaluate(&model, &samples)?;
    for r in &report.rows {
        println!("{} iou {:.4} f1 {:.4}", r.id, r.iou, r.f1);
    }
    println!("mean iou {} f1 {}", report.mean_iou, report.mean_f1);
    Ok(())
}

fn cmd_infer(ckpt: &Path, image: &Path, out: &Path) -> Result<()> {
    let (model, _) = load_model(ckpt)?;
    let x = load_image_tensor(image)?;
    let logits = model.infer(&x)?;
    let pred = binarize_logits(&logits);
    let (_, c, h, w) = pred.dims4()?;
    if c != 1 {
        return Err(Error::contract(format!("expected single-channel logits, got {c}")));
    }
    save_mask(out, &Tensor::new(vec![1, h, w], pred.data().to_vec())?)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_gradcheck(module: &str) -> Result<()> {
    let which = VerifyModule::parse(module)?;
    let results = run_suites(which)?;
    let mut worst = 0f64;
    let mut failed = Vec::new();
    for r in &results {
        println!(
            "{:<12} {}  worst rel err {:.3e} at {} ({} coords)",
            r.name,
            if r.report.pass { "pass" } else { "FAIL" },
            r.report.worst_rel_err,
            r.report.worst_site,
            r.report.coords_checked
        );
        worst = worst.max(r.report.worst_rel_err);
        if !r.report.pass {
            failed.push(r.name);
        }
    }
    println!("worst relative error: {worst:.3e}");
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::verify(format!("gradient check failed for: {}", failed.join(", "))))
    }
}

fn cmd_explain(ckpt: &Path, image: &Path, out: &Path) -> Result<()> {
    let (model, _) = load_model(ckpt)?;
    let x = load_image_tensor(image)?;
    let (_, trace) = model.infer_trace(&x)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for (i, (name, map)) in trace.iter().enumerate() {
        let (_, c, h, w) = map.dims4()?;
        let hw = h * w;
        let mut mean = vec![0f64; hw];
        for ci in 0..c {
            for (p, m) in mean.iter_mut().enumerate() {
                *m += map.data()[ci * hw + p].as_f64();
            }
        }
        for m in &mut mean {
            *m /= c as f64;
        }
        let lo = mean.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = mean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let bytes: Vec<u8> = if hi - lo > 0.0 {
            mean.iter().map(|m| (255.0 * (m - lo) / (hi - lo)).round() as u8).collect()
        } else {
            vec![0u8; hw]
        };
        pnm::write_pgm(&out.join(format!("{}_{name}.pgm", i + 1)), w, h, &bytes)?;
    }
    println!("wrote {} activation maps to {}", trace.len(), out.display());
    Ok(())
}

fn cmd_bench(
    op: &str,
    sizes: &str,
    d_model: usize,
    n_state: usize,
    iters: usize,
    config: Option<&Path>,
    mac_size: &str,
) -> Result<()> {
    if op != "selective_scan" {
        return Err(Error::config(format!(
            "unknown bench op {op:?}; only selective_scan is available"
        )));
    }
    let lens: Vec<usize> = sizes
        .split(',')
        .map(|s| {
            s.trim().parse().map_err(|_| {
                Error::config(format!("--sizes must be comma-separated integers, got {s:?}"))
            })
        })
        .collect::<Result<_>>()?;
    if lens.is_empty() || lens.contains(&0) {
        return Err(Error::config("--sizes needs at least one positive length"));
    }
    for &l in &lens {
        let t = time_selective_scan(l, d_model, n_state, iters)?;
        println!(
            "selective_scan L={l} D={d_model} N={n_state}: {:.6} s  {:.0} tokens/s",
            t.seconds, t.tokens_per_sec
        );
    }
    let cfg = match config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    cfg.model.validate()?;
    let model = KmUnet::<f32>::build(cfg.model.clone(), cfg.train.seed)?;
    let (mh, mw) = parse_size(mac_size)?;
    println!("model parameters: {}", model.param_count());
    println!(
        "estimated multiply-accumulates at {mh}x{mw} input: {} (analytic estimate)",
        model.mac_estimate(mh, mw)
    );
    Ok(())
}
