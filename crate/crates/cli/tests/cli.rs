//! End-to-end checks of the `kmunet` binary: flag handling, exit codes,
//! on-disk artifacts and determinism of every subcommand.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kmunet_core::config::RunConfig;
use kmunet_core::model::{KmUnet, ModelConfig};
use kmunet_core::{checkpoint, pnm};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_kmunet")
}

/// Runs the binary with a scrubbed environment so an ambient KM_SEED
/// cannot leak into the tests.
fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .env_remove("KM_SEED")
        .output()
        .expect("binary runs")
}

fn run_with_seed_env(args: &[&str], seed: &str) -> Output {
    Command::new(bin())
        .args(args)
        .env("KM_SEED", seed)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_code(out: &Output, want: i32) {
    let got = out.status.code().expect("no signal");
    assert_eq!(
        got,
        want,
        "expected exit {want}, got {got}\nstdout:\n{}\nstderr:\n{}",
        stdout(out),
        stderr(out)
    );
}

fn fresh_dir(tag: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("kmunet-cli-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

/// All regular files under `dir`, relative paths sorted.
fn file_listing(dir: &Path) -> Vec<PathBuf> {
    fn walk(dir: &Path, base: &Path, out: &mut Vec<PathBuf>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(&p, base, out);
            } else {
                out.push(p.strip_prefix(base).unwrap().to_path_buf());
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}

fn assert_dirs_identical(a: &Path, b: &Path) {
    let fa = file_listing(a);
    assert_eq!(fa, file_listing(b), "different file sets");
    for rel in fa {
        let ba = std::fs::read(a.join(&rel)).unwrap();
        let bb = std::fs::read(b.join(&rel)).unwrap();
        assert_eq!(ba, bb, "bytes differ for {}", rel.display());
    }
}

/// A model small enough that training in a test takes well under a second.
fn micro_config(data_dir: &Path, out_dir: &Path) -> String {
    format!(
        "conv_channels = 2,3,4\n\
         token_dims = 6,8\n\
         n_state = 2\n\
         sem.attention_groups = 1\n\
         epochs = 2\n\
         batch_size = 4\n\
         lr_max = 1e-3\n\
         lr_min = 1e-4\n\
         seed = 11\n\
         split = 0.75\n\
         augment = false\n\
         data_dir = {}\n\
         out_dir = {}\n",
        data_dir.display(),
        out_dir.display()
    )
}

/// Writes an untrained checkpoint for the micro config and returns its path.
fn init_checkpoint(dir: &Path, data_dir: &Path) -> PathBuf {
    let text = micro_config(data_dir, dir);
    let cfg = RunConfig::parse(&text).unwrap();
    let model = KmUnet::<f32>::build(cfg.model.clone(), cfg.train.seed).unwrap();
    let path = dir.join("init.ckpt");
    checkpoint::save(&path, &text, &model.params).unwrap();
    path
}

fn gen_micro_data(dir: &Path, n: usize) {
    let out = run(&[
        "gen-data",
        "--out",
        dir.to_str().unwrap(),
        "--n",
        &n.to_string(),
        "--size",
        "32x32",
        "--seed",
        "5",
    ]);
    assert_code(&out, 0);
}

#[test]
fn gen_data_writes_count_and_layout() {
    let dir = fresh_dir("gen-layout");
    let out = run(&[
        "gen-data", "--out", dir.to_str().unwrap(), "--n", "3", "--size", "64x64", "--seed", "5",
    ]);
    assert_code(&out, 0);
    assert!(stdout(&out).contains("wrote 3 samples"));
    let index = std::fs::read_to_string(dir.join("index.txt")).unwrap();
    assert_eq!(index.lines().count(), 3);
    assert!(dir.join("images/0000.ppm").is_file());
    assert!(dir.join("images/0002.ppm").is_file());
    assert!(dir.join("masks/0002.pgm").is_file());
}

#[test]
fn gen_data_is_byte_deterministic() {
    let a = fresh_dir("gen-det-a");
    let b = fresh_dir("gen-det-b");
    for d in [&a, &b] {
        let out = run(&[
            "gen-data", "--out", d.to_str().unwrap(), "--n", "4", "--size", "64x32", "--seed",
            "17",
        ]);
        assert_code(&out, 0);
    }
    assert_dirs_identical(&a, &b);

    let c = fresh_dir("gen-det-c");
    let out = run(&[
        "gen-data", "--out", c.to_str().unwrap(), "--n", "4", "--size", "64x32", "--seed", "18",
    ]);
    assert_code(&out, 0);
    let differs = file_listing(&a).iter().any(|rel| {
        std::fs::read(a.join(rel)).unwrap() != std::fs::read(c.join(rel)).unwrap()
    });
    assert!(differs, "different seeds produced identical datasets");
}

#[test]
fn gen_data_rejects_indivisible_size() {
    let dir = fresh_dir("gen-bad-size");
    let out = run(&[
        "gen-data", "--out", dir.to_str().unwrap(), "--n", "4", "--size", "60x60", "--seed", "7",
    ]);
    assert_code(&out, 1);
    assert!(stderr(&out).contains("divisible by 32"));
}

#[test]
fn km_seed_env_is_the_fallback_seed() {
    let flag = fresh_dir("seed-flag");
    let env = fresh_dir("seed-env");
    let default = fresh_dir("seed-default");
    let out = run(&[
        "gen-data", "--out", flag.to_str().unwrap(), "--n", "2", "--size", "32x32", "--seed", "9",
    ]);
    assert_code(&out, 0);
    let out = run_with_seed_env(
        &["gen-data", "--out", env.to_str().unwrap(), "--n", "2", "--size", "32x32"],
        "9",
    );
    assert_code(&out, 0);
    assert_dirs_identical(&flag, &env);

    // Without flag or env the documented default is 42.
    let out = run(&["gen-data", "--out", default.to_str().unwrap(), "--n", "2", "--size", "32x32"]);
    assert_code(&out, 0);
    let forty_two = fresh_dir("seed-42");
    let out = run(&[
        "gen-data", "--out", forty_two.to_str().unwrap(), "--n", "2", "--size", "32x32", "--seed",
        "42",
    ]);
    assert_code(&out, 0);
    assert_dirs_identical(&default, &forty_two);

    let out = run_with_seed_env(
        &["gen-data", "--out", env.to_str().unwrap(), "--n", "2", "--size", "32x32"],
        "not-a-number",
    );
    assert_code(&out, 1);
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = fresh_dir("bad-key");
    let cfg = dir.join("run.cfg");
    std::fs::write(&cfg, "bogus = 1\n").unwrap();
    let out = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_code(&out, 1);
    assert!(stderr(&out).contains("unknown config key: bogus"));
}

#[test]
fn missing_config_file_is_an_io_error() {
    let out = run(&["train", "--config", "/nonexistent/run.cfg"]);
    assert_code(&out, 3);
}

#[test]
fn bad_cli_flags_exit_with_validation_code() {
    let out = run(&["gen-data", "--no-such-flag"]);
    assert_code(&out, 1);
    let out = run(&["no-such-command"]);
    assert_code(&out, 1);
}

#[test]
fn train_writes_artifacts_and_respects_set_overrides() {
    let data = fresh_dir("train-data");
    gen_micro_data(&data, 4);
    let out_dir = fresh_dir("train-out");
    let cfg = out_dir.join("run.cfg");
    std::fs::write(&cfg, micro_config(&data, &out_dir)).unwrap();

    let out = run(&["train", "--config", cfg.to_str().unwrap(), "--set", "epochs=1"]);
    assert_code(&out, 0);
    let text = stdout(&out);
    // The run logs the fully resolved config, override included.
    assert!(text.contains("epochs = 1"));
    assert!(text.contains("conv_channels = 2,3,4"));
    assert!(text.contains("final train IoU"));

    let history = std::fs::read_to_string(out_dir.join("history.csv")).unwrap();
    let lines: Vec<&str> = history.lines().collect();
    assert_eq!(lines[0], "epoch,lr,train_loss,val_iou,val_f1");
    assert_eq!(lines.len(), 2, "one epoch, one data row");
    assert!(out_dir.join("best.ckpt").is_file());

    // The checkpoint embeds the resolved config.
    let (embedded, _) = checkpoint::load(&out_dir.join("best.ckpt")).unwrap();
    assert!(embedded.contains("epochs = 1"));
}

#[test]
fn train_multiple_runs_report_mean_and_spread() {
    let data = fresh_dir("runs-data");
    gen_micro_data(&data, 4);
    let out_dir = fresh_dir("runs-out");
    let cfg = out_dir.join("run.cfg");
    std::fs::write(&cfg, micro_config(&data, &out_dir)).unwrap();

    let out = run(&[
        "train", "--config", cfg.to_str().unwrap(), "--set", "epochs=1", "--runs", "2",
    ]);
    assert_code(&out, 0);
    let text = stdout(&out);
    assert!(text.contains("final train IoU over 2 runs:"));
    assert!(text.contains("best val IoU over 2 runs:"));
    // Per-run seeds are seed, seed+1.
    assert!(text.contains("seed = 11"));
    assert!(text.contains("seed = 12"));
    assert!(out_dir.join("history_run0.csv").is_file());
    assert!(out_dir.join("history_run1.csv").is_file());
    assert!(out_dir.join("best_run0.ckpt").is_file());
    assert!(out_dir.join("best_run1.ckpt").is_file());
}

fn mean_iou_from_eval(out: &Output) -> f64 {
    let text = stdout(out);
    let line = text.lines().find(|l| l.starts_with("mean iou ")).expect("mean line");
    line.split_whitespace().nth(2).unwrap().parse().unwrap()
}

#[test]
fn eval_of_trained_checkpoint_beats_initial_weights() {
    let data = fresh_dir("eval-data");
    gen_micro_data(&data, 4);
    let work = fresh_dir("eval-work");
    let init = init_checkpoint(&work, &data);

    let out = run(&["eval", "--ckpt", init.to_str().unwrap(), "--data", data.to_str().unwrap()]);
    assert_code(&out, 0);
    let per_image =
        stdout(&out).lines().filter(|l| l.contains(" iou ") && !l.starts_with("mean")).count();
    assert_eq!(per_image, 4);
    let init_iou = mean_iou_from_eval(&out);

    let cfg = work.join("run.cfg");
    std::fs::write(&cfg, micro_config(&data, &work)).unwrap();
    let out = run(&[
        "train", "--config", cfg.to_str().unwrap(), "--set", "epochs=12", "--set", "lr_max=3e-3",
    ]);
    assert_code(&out, 0);

    let best = work.join("best.ckpt");
    let out = run(&["eval", "--ckpt", best.to_str().unwrap(), "--data", data.to_str().unwrap()]);
    assert_code(&out, 0);
    let trained_iou = mean_iou_from_eval(&out);
    assert!(
        trained_iou >= init_iou,
        "training made things worse: {trained_iou} < {init_iou}"
    );
}

#[test]
fn infer_writes_binary_p5_with_input_dimensions() {
    let data = fresh_dir("infer-data");
    gen_micro_data(&data, 2);
    let work = fresh_dir("infer-work");
    let ckpt = init_checkpoint(&work, &data);
    let mask = work.join("mask.pgm");

    let out = run(&[
        "infer",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--image",
        data.join("images/0000.ppm").to_str().unwrap(),
        "--out",
        mask.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let bytes = std::fs::read(&mask).unwrap();
    let header = b"P5\n32 32\n255\n";
    assert_eq!(&bytes[..header.len()], header);
    let pixels = &bytes[header.len()..];
    assert_eq!(pixels.len(), 32 * 32);
    assert!(pixels.iter().all(|&b| b == 0 || b == 255), "mask is not binary");
}

#[test]
fn explain_writes_one_map_per_stage_reproducibly() {
    let data = fresh_dir("explain-data");
    gen_micro_data(&data, 2);
    let work = fresh_dir("explain-work");
    let ckpt = init_checkpoint(&work, &data);
    let image = data.join("images/0001.ppm");

    let out_a = fresh_dir("explain-a");
    let out_b = fresh_dir("explain-b");
    for d in [&out_a, &out_b] {
        let out = run(&[
            "explain",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--image",
            image.to_str().unwrap(),
            "--out",
            d.to_str().unwrap(),
        ]);
        assert_code(&out, 0);
    }
    let names = file_listing(&out_a);
    // Five encoder stages plus the bottleneck.
    assert_eq!(names.len(), 6);
    assert_eq!(
        names,
        ["1_enc1.pgm", "2_enc2.pgm", "3_enc3.pgm", "4_tok1.pgm", "5_tok2.pgm", "6_neck.pgm"]
            .map(PathBuf::from)
    );
    assert_dirs_identical(&out_a, &out_b);
}

#[test]
fn explain_accepts_grayscale_input_and_sizes_maps_by_stage() {
    let data = fresh_dir("explain-gray-data");
    gen_micro_data(&data, 1);
    let work = fresh_dir("explain-gray");
    let ckpt = init_checkpoint(&work, &data);
    let image = work.join("flat.pgm");
    pnm::write_pgm(&image, 32, 32, &[128u8; 32 * 32]).unwrap();

    let maps = fresh_dir("explain-gray-maps");
    let out = run(&[
        "explain",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--image",
        image.to_str().unwrap(),
        "--out",
        maps.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let files = file_listing(&maps);
    assert_eq!(files.len(), 6);
    for rel in files {
        let bytes = std::fs::read(maps.join(&rel)).unwrap();
        let pixels = &bytes[bytes.len() - bytes_per_map(&rel)..];
        // Min-max normalized: both extremes occur, except that a flat
        // map (e.g. the single-pixel bottleneck) renders as all black.
        if pixels.iter().all(|&p| p == pixels[0]) {
            assert!(pixels[0] == 0, "{}: flat map must be black", rel.display());
        } else {
            assert!(pixels.contains(&0) && pixels.contains(&255), "{}", rel.display());
        }
    }
}

fn bytes_per_map(rel: &Path) -> usize {
    // Stage i halves 32x32 i-1 times; file names are 1-based.
    let stage: u32 = rel.file_name().unwrap().to_str().unwrap()[..1].parse().unwrap();
    let side = 32usize >> (stage - 1);
    side * side
}

#[test]
fn gradcheck_module_flag_selects_suites() {
    let out = run(&["gradcheck", "--module", "s6"]);
    assert_code(&out, 0);
    let text = stdout(&out);
    assert!(text.contains("s6_block"));
    assert!(text.contains("pass"));
    assert!(text.contains("worst relative error:"));

    let out = run(&["gradcheck", "--module", "conv"]);
    assert_code(&out, 1);
    assert!(stderr(&out).contains("unknown gradcheck module"));
}

#[test]
fn bench_prints_timings_and_analytic_costs() {
    let out = run(&["bench", "--op", "selective_scan", "--sizes", "128,256", "--iters", "2"]);
    assert_code(&out, 0);
    let text = stdout(&out);
    assert!(text.contains("selective_scan L=128"));
    assert!(text.contains("selective_scan L=256"));
    assert!(text.contains("tokens/s"));

    let expected = KmUnet::<f32>::build(ModelConfig::default(), 42).unwrap().param_count();
    assert!(
        text.contains(&format!("model parameters: {expected}")),
        "parameter count in output does not match the built model:\n{text}"
    );
    assert!(text.contains("estimate"));

    let out = run(&["bench", "--op", "fft", "--sizes", "8"]);
    assert_code(&out, 1);
    assert!(stderr(&out).contains("unknown bench op"));
}

#[test]
fn corrupted_checkpoint_magic_is_an_io_error() {
    let data = fresh_dir("corrupt-data");
    gen_micro_data(&data, 1);
    let work = fresh_dir("corrupt-work");
    let ckpt = init_checkpoint(&work, &data);
    let mut bytes = std::fs::read(&ckpt).unwrap();
    bytes[0] ^= 0xFF;
    let bad = work.join("bad.ckpt");
    std::fs::write(&bad, bytes).unwrap();

    let out = run(&["eval", "--ckpt", bad.to_str().unwrap(), "--data", data.to_str().unwrap()]);
    assert_code(&out, 3);
}
