use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use splitsr_core::image_io::{read_png, write_png};
use splitsr_core::network::{Network, NetworkConfig};
use splitsr_core::weights::{encode, load_weights_file, save_weights_file};
use splitsr_core::Tensor;

const MICRO: &str = "preset = latency\nscale = 2\nfeature_maps = 8\ngroups = 2\nblocks_per_group = 2\n\
                     hybrid_index = 2\nmean_shift = true\n";

fn splitsr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_splitsr")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn fails_with(o: &Output, needle: &str) {
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains(needle), "stderr `{err}` lacks `{needle}`");
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn fixture(h: usize, w: usize, seed: f32) -> Tensor<f32> {
    Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| {
        (128.0 + 100.0 * ((x as f32 * 0.37 + seed).sin() * (y as f32 * 0.23 + c as f32).cos())).round()
    })
}

#[test]
fn upscale_bilinear_by_four() {
    let dir = tempfile::tempdir().unwrap();
    let (input, output) = (dir.path().join("in.png"), dir.path().join("out.png"));
    write_png(&fixture(12, 20, 0.0), &input).unwrap();
    let o = splitsr(&["upscale", "--input", p(&input), "--output", p(&output), "--model", "bilinear", "--scale", "4"]);
    assert!(stdout(&o).contains("bilinear x4"));
    assert_eq!(read_png(&output).unwrap().shape().dims(), [1, 3, 48, 80]);
}

#[test]
fn upscale_reports_quality_against_a_reference() {
    let dir = tempfile::tempdir().unwrap();
    let (input, output, reference) = (dir.path().join("in.png"), dir.path().join("out.png"), dir.path().join("hr.png"));
    let lr = Tensor::<f32>::full([1, 3, 8, 8], 90.0);
    write_png(&lr, &input).unwrap();
    write_png(&Tensor::<f32>::full([1, 3, 16, 16], 90.0), &reference).unwrap();
    let o = splitsr(&[
        "upscale", "--input", p(&input), "--output", p(&output), "--model", "bicubic", "--scale", "2",
        "--reference", p(&reference),
    ]);
    assert!(stdout(&o).contains("psnr inf dB  ssim 1.0000"));
}

#[test]
fn upscale_failures() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.png");
    let out = dir.path().join("out.png");
    fails_with(&splitsr(&["upscale", "--input", p(&input), "--output", p(&out)]), "in.png");

    write_png(&fixture(8, 8, 0.0), &input).unwrap();
    let bogus = dir.path().join("bogus.ssrw");
    std::fs::write(&bogus, b"XXXX\x01\x00").unwrap();
    fails_with(&splitsr(&["upscale", "--input", p(&input), "--output", p(&out), "--model", p(&bogus)]), "magic");
    fails_with(&splitsr(&["upscale", "--input", p(&input), "--output", p(&out), "--model", "lanczos"]), "lanczos");
    assert!(!out.exists());
}

#[test]
fn upscale_with_a_weight_file() {
    let dir = tempfile::tempdir().unwrap();
    let (input, output, weights) = (dir.path().join("in.png"), dir.path().join("out.png"), dir.path().join("m.ssrw"));
    let lr = fixture(10, 6, 1.0);
    write_png(&lr, &input).unwrap();
    let net = Network::<f32>::build(&NetworkConfig::parse(MICRO).unwrap(), 3).unwrap();
    save_weights_file(&net, &weights).unwrap();
    stdout(&splitsr(&["upscale", "--input", p(&input), "--output", p(&output), "--model", p(&weights)]));
    let want = net.forward(&lr).unwrap().map(|v| v.clamp(0.0, 255.0).round());
    assert_eq!(read_png(&output).unwrap(), want);
    fails_with(
        &splitsr(&["upscale", "--input", p(&input), "--output", p(&output), "--model", p(&weights), "--scale", "4"]),
        "upscales by 2",
    );
}

#[test]
fn cost_of_the_latency_preset() {
    let text = stdout(&splitsr(&["cost", "--preset", "latency"]));
    let params = Network::<f32>::build(&NetworkConfig::latency(), 0).unwrap().param_count();
    let total = text.lines().find(|l| l.starts_with("total")).unwrap();
    assert_eq!(total.split_whitespace().nth(1).unwrap(), params.to_string());
    assert!((92_000..=96_000).contains(&params));

    let json: Value = serde_json::from_str(&stdout(&splitsr(&["cost", "--json", "--input-size", "32x48"]))).unwrap();
    assert_eq!(json["params"].as_u64(), Some(params as u64));
    assert_eq!(json["input"], serde_json::json!([32, 48]));
    assert!(json["macs"].as_u64().unwrap() > 0);
    let stages = json["per_stage"].as_array().unwrap();
    assert_eq!(stages.iter().map(|s| s["params"].as_u64().unwrap()).sum::<u64>(), params as u64);
    assert!(json["reductions"].is_object());
}

#[test]
fn cost_table_lists_the_sweeps() {
    let text = stdout(&splitsr(&["cost", "--table"]));
    for heading in ["channel-split ratio", "hybrid index", "hybrid mode", "replacement location"] {
        assert!(text.contains(heading), "{heading}");
    }
    let row = |setting: &str| {
        text.lines()
            .find(|l| l.starts_with(setting))
            .unwrap_or_else(|| panic!("no row {setting}"))
            .split_whitespace()
            .rev()
            .nth(1)
            .unwrap()
            .to_string()
    };
    for (alpha, k) in [("0.125", "90k"), ("0.250", "94k"), ("0.500", "110k"), ("1.000", "172k")] {
        let got: f64 = row(&format!("alpha = {alpha}")).trim_end_matches('k').parse().unwrap();
        let want: f64 = k.trim_end_matches('k').parse().unwrap();
        assert!((got - want).abs() / want <= 0.02, "alpha {alpha}: {got}k");
    }
}

#[test]
fn cost_rejects_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.cfg");
    std::fs::write(&empty, "  \n# nothing\n").unwrap();
    fails_with(&splitsr(&["cost", "--config", p(&empty)]), "empty network config");
    fails_with(&splitsr(&["cost", "--input-size", "12by4"]), "HxW");
    fails_with(&splitsr(&["cost", "--preset", "fastest"]), "fastest");
    fails_with(&splitsr(&["cost", "--config", p(&dir.path().join("absent.cfg"))]), "absent.cfg");
}

#[test]
fn eval_passthrough_is_inf() {
    let dir = tempfile::tempdir().unwrap();
    for (i, name) in ["one.png", "two.png"].iter().enumerate() {
        write_png(&fixture(24, 24, i as f32), dir.path().join(name)).unwrap();
    }
    let table = stdout(&splitsr(&["eval", "--model", "passthrough", "--dataset", p(dir.path()), "--scale", "2"]));
    assert!(table.lines().any(|l| l.starts_with("mean") && l.contains("inf")));
    let json: Value = serde_json::from_str(&stdout(&splitsr(&[
        "eval", "--model", "passthrough", "--dataset", p(dir.path()), "--scale", "2", "--json",
    ])))
    .unwrap();
    assert_eq!(json["mean_psnr"], "inf");
    assert_eq!(json["shave"], 2);
    assert_eq!(json["images"].as_array().unwrap().len(), 2);

    let json: Value = serde_json::from_str(&stdout(&splitsr(&[
        "eval", "--model", "bilinear", "--dataset", p(dir.path()), "--scale", "2", "--shave", "0", "--json",
    ])))
    .unwrap();
    assert!(json["mean_psnr"].as_f64().unwrap().is_finite());
    assert_eq!(json["shave"], 0);
}

#[test]
fn eval_rejects_a_bad_directory() {
    let dir = tempfile::tempdir().unwrap();
    fails_with(&splitsr(&["eval", "--model", "bilinear", "--dataset", p(&dir.path().join("missing"))]), "missing");
    fails_with(&splitsr(&["eval", "--model", "bilinear", "--dataset", p(dir.path())]), "no images");
}

fn micro_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("micro.cfg");
    std::fs::write(&path, MICRO).unwrap();
    path
}

fn train_args<'a>(cfg: &'a str, out: &'a str, steps: &'a str) -> Vec<&'a str> {
    vec![
        "train", "--config", cfg, "--synthetic", "--synthetic-count", "8", "--synthetic-size", "32", "--out", out,
        "--steps", steps, "--lr", "3e-3", "--batch", "4", "--patch", "16", "--seed", "7", "--log-every", "0",
    ]
}

fn losses(csv: &Path) -> Vec<f64> {
    let text = std::fs::read_to_string(csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("step,lr,loss"));
    lines.map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect()
}

#[test]
fn synthetic_training_reduces_the_loss_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = micro_config(dir.path());
    let (a, b) = (dir.path().join("a.ssrw"), dir.path().join("b.ssrw"));
    stdout(&splitsr(&train_args(p(&cfg), p(&a), "60")));
    stdout(&splitsr(&train_args(p(&cfg), p(&b), "60")));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let trace = losses(&dir.path().join("a.csv"));
    assert_eq!(trace.len(), 60);
    let head = trace[..10].iter().sum::<f64>() / 10.0;
    let tail = trace[50..].iter().sum::<f64>() / 10.0;
    assert!(tail < head, "{head} -> {tail}");
    assert_eq!(load_weights_file(&a).unwrap().config(), &NetworkConfig::parse(MICRO).unwrap());
}

#[test]
fn zero_steps_writes_the_initialisation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = micro_config(dir.path());
    let out = dir.path().join("init.ssrw");
    let csv = dir.path().join("trace.csv");
    let mut args = train_args(p(&cfg), p(&out), "0");
    args.extend(["--loss-csv", p(&csv)]);
    stdout(&splitsr(&args));
    let init = Network::<f32>::build(&NetworkConfig::parse(MICRO).unwrap(), 7).unwrap();
    assert_eq!(std::fs::read(&out).unwrap(), encode(&init).unwrap());
    assert_eq!(std::fs::read_to_string(&csv).unwrap(), "step,lr,loss\n");
}

#[test]
fn divergence_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = micro_config(dir.path());
    let out = dir.path().join("blown.ssrw");
    let mut args = train_args(p(&cfg), p(&out), "20");
    let lr = args.iter().position(|a| *a == "3e-3").unwrap();
    args[lr] = "1e30";
    fails_with(&splitsr(&args), "diverged");
    assert!(!out.exists());
}

#[test]
fn train_rejects_bad_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = micro_config(dir.path());
    let out = dir.path().join("w.ssrw");
    let mut args = train_args(p(&cfg), p(&out), "5");
    let patch = args.iter().position(|a| *a == "16").unwrap();
    args[patch] = "15";
    fails_with(&splitsr(&args), "not divisible");
    let o = splitsr(&["train", "--out", p(&out)]);
    assert!(!o.status.success());
}

#[test]
fn serve_requires_a_x4_network() {
    let dir = tempfile::tempdir().unwrap();
    let weights = dir.path().join("x2.ssrw");
    save_weights_file(&Network::<f32>::build(&NetworkConfig::parse(MICRO).unwrap(), 0).unwrap(), &weights).unwrap();
    write_png(&fixture(8, 8, 0.0), dir.path().join("a.png")).unwrap();
    fails_with(&splitsr(&["serve", "--model", p(&weights), "--images", p(dir.path())]), "x4");
    let empty = tempfile::tempdir().unwrap();
    fails_with(&splitsr(&["serve", "--model", "bicubic", "--images", p(empty.path())]), "no readable PNG");
}
