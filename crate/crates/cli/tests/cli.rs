use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"
data = "synthetic"
synthetic_train = 60
synthetic_test = 20
synthetic_side = 16
noise_kind = "symmetric"
noise_rate = 0.3
width = 4
decoder_channels = 8
epochs = 3
warmup_epochs = 1
batch_size = 16
lr = 0.05
checkpoint_every = 2
"#;

fn sanm(args: &[&str]) -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_sanm"));
    c.args(args).env_remove("SANM_DEVICE").env_remove("SANM_CIFAR10_DIR");
    c
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("spawn sanm")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn ok(o: Output) -> String {
    assert_eq!(
        code(&o),
        0,
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.cfg");
    fs::write(&p, TINY).unwrap();
    p
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Log lines with the timestamp field removed.
fn log_body(run: &Path) -> Vec<Value> {
    fs::read_to_string(run.join("log.jsonl"))
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("timestamp");
            v
        })
        .collect()
}

fn train_tiny(dir: &Path, extra: &[&str]) -> PathBuf {
    let cfg = tiny_config(dir);
    let out = dir.join("runs");
    let mut args = vec!["train", "--config", p(&cfg), "--out", p(&out)];
    args.extend_from_slice(extra);
    PathBuf::from(ok(run(&mut sanm(&args))).trim())
}

#[test]
fn inject_writes_a_noisy_dataset_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("noisy");
    let stdout = ok(run(&mut sanm(&[
        "inject", "--synthetic", "2000,100,8", "--kind", "symmetric", "--rate", "0.5", "--seed", "1", "--out", p(&out),
    ])));
    assert!(stdout.contains("flipped"));
    for f in ["index.jsonl", "images.bin", "test_index.jsonl", "noise.json", "report.json"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let frac = report["flip_fraction"].as_f64().unwrap();
    // Binomial(2000, 0.5): 3 sigma is about 0.034.
    assert!((frac - 0.5).abs() < 0.034, "flip fraction {frac}");

    // Never overwrites.
    let again = run(&mut sanm(&["inject", "--rate", "0.5", "--out", p(&out)]));
    assert_eq!(code(&again), 2);
}

#[test]
fn inject_rejects_bad_rates_and_keeps_labels_at_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = run(&mut sanm(&["inject", "--rate", "1.5", "--out", p(&tmp.path().join("x"))]));
    assert_eq!(code(&bad), 2);
    assert!(!tmp.path().join("x").exists());

    let out = tmp.path().join("clean");
    ok(run(&mut sanm(&["inject", "--synthetic", "200,20,8", "--rate", "0", "--out", p(&out)])));
    let index = fs::read_to_string(out.join("index.jsonl")).unwrap();
    for line in index.lines().skip(1) {
        let v: Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["true_label"], v["noisy_label"]);
    }
}

#[test]
fn invalid_toggles_fail_before_any_compute() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("runs");
    let o = run(&mut sanm(&["train", "--config", p(&cfg), "--out", p(&out), "--toggles", "amg=off,nlr=on"]));
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("nlr"));
    assert!(!out.exists());

    let o = run(&mut sanm(&["train", "--config", p(&cfg), "--set", "mu=2"]));
    assert_eq!(code(&o), 2);
    let o = run(&mut sanm(&["train", "--config", "/nonexistent.cfg"]));
    assert_eq!(code(&o), 2);
}

#[test]
fn unknown_device_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let o = run(sanm(&["train", "--config", p(&cfg), "--out", p(&tmp.path().join("r"))]).env("SANM_DEVICE", "cuda"));
    assert_eq!(code(&o), 2);
}

#[test]
fn desk_config_parses_and_needs_the_dataset() {
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk_cifar10_sym50.cfg");
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&mut sanm(&["train", "--config", p(&cfg), "--out", p(&tmp.path().join("r"))]));
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("SANM_CIFAR10_DIR"));
    assert!(!tmp.path().join("r").exists());
}

#[test]
fn training_is_reproducible_and_leaves_a_complete_run() {
    let tmp = tempfile::tempdir().unwrap();
    let a = train_tiny(tmp.path(), &["--seed", "7"]);
    let b = train_tiny(tmp.path(), &["--seed", "7"]);
    assert_ne!(a, b, "reruns get fresh directories");
    assert_eq!(log_body(&a), log_body(&b));
    for f in ["manifest.json", "config.toml", "experiment.toml", "log.jsonl", "gmm.jsonl", "summary.json"] {
        assert!(a.join(f).is_file(), "{f} missing");
    }
    let cks: Vec<_> = fs::read_dir(a.join("checkpoints"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert!(cks.contains(&"final.bin".to_string()) && cks.contains(&"epoch_002.bin".to_string()), "{cks:?}");
    let manifest: Value = serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["noise"]["rate"], 0.3);

    let c = train_tiny(tmp.path(), &["--seed", "8"]);
    assert_ne!(log_body(&a), log_body(&c));

    let ev: Value = serde_json::from_str(&ok(run(&mut sanm(&["evaluate", "--run", p(&a)])))).unwrap();
    assert_eq!(ev["total"], 20);
    let summary: Value = serde_json::from_str(&fs::read_to_string(a.join("summary.json")).unwrap()).unwrap();
    assert_eq!(ev["accuracy"], summary["last_acc"]);
}

#[test]
fn training_dumps_figures() {
    let tmp = tempfile::tempdir().unwrap();
    let run_dir = train_tiny(
        tmp.path(),
        &["--dump-cams", "2", "--dump-masks", "5,9", "--dump-triptychs", "1"],
    );
    let fig = run_dir.join("figures");
    let mut names: Vec<String> = fs::read_dir(&fig)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names.iter().filter(|n| n.starts_with("cam_")).count(), 2);
    assert_eq!(names.iter().filter(|n| n.starts_with("mask_")).count(), 2);
    assert_eq!(names.iter().filter(|n| n.starts_with("triptych_")).count(), 1);
    assert!(names.contains(&"samples.json".to_string()));
    let trip = image::open(fig.join(names.iter().find(|n| n.starts_with("triptych_")).unwrap())).unwrap();
    assert_eq!(trip.width(), 3 * 96 + 2 * 4);
}

#[test]
fn plot_draws_traces_and_galleries_and_skips_missing_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let run_dir = train_tiny(tmp.path(), &[]);
    let plots = tmp.path().join("plots");
    let missing = tmp.path().join("nope");
    let o = run(&mut sanm(&["plot", p(&run_dir), p(&missing), "--out", p(&plots), "--gallery", "4"]));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("skipping"));
    let name = run_dir.file_name().unwrap().to_str().unwrap();
    let svg = fs::read_to_string(plots.join(format!("{name}-loss.svg"))).unwrap();
    assert!(svg.contains("L_c") && svg.contains("L_r"));
    let g = image::open(plots.join(format!("{name}-gallery.png"))).unwrap();
    assert_eq!((g.width(), g.height()), (4 * 96 + 3 * 4, 4 * 96 + 3 * 4));

    let o = run(&mut sanm(&["plot", p(&missing), "--out", p(&plots)]));
    assert_eq!(code(&o), 2);
}

#[test]
fn mu_grid_in_a_process_pool() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("grid");
    let stdout = ok(run(&mut sanm(&[
        "ablate", "--config", p(&cfg), "--grid", "mu", "--mus", "0,0.2", "--seeds", "1,2", "--noise", "sym-20,sym-40",
        "--parallel", "3", "--out", p(&out),
    ])));
    assert!(stdout.contains("mu=0.2") && stdout.contains("sym-40"));
    let dir = out.join("ablation-mu");
    let rec: Value = serde_json::from_str(&fs::read_to_string(dir.join("ablation.json")).unwrap()).unwrap();
    let cells = rec["table"]["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 4);
    assert!(cells.iter().all(|c| c["runs"].as_array().unwrap().iter().all(|r| r["error"].is_null())));
    assert_eq!(fs::read_dir(dir.join("runs")).unwrap().count(), 8);

    let plots = tmp.path().join("plots");
    ok(run(&mut sanm(&["plot", p(&dir), "--out", p(&plots)])));
    assert!(plots.join("ablation-mu-bars.svg").is_file());
    let mu = fs::read_to_string(plots.join("ablation-mu-mu.svg")).unwrap();
    assert!(mu.contains("sym-20") && mu.contains("sym-40"));

    // The same grid in-process lands in a fresh directory with the same numbers.
    ok(run(&mut sanm(&[
        "ablate", "--config", p(&cfg), "--grid", "mu", "--mus", "0,0.2", "--seeds", "1,2", "--noise", "sym-20,sym-40",
        "--out", p(&out),
    ])));
    let rec2: Value =
        serde_json::from_str(&fs::read_to_string(out.join("ablation-mu-1").join("ablation.json")).unwrap()).unwrap();
    assert_eq!(rec["table"], rec2["table"]);
}

#[test]
fn component_grid_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("grid");
    let stdout = ok(run(&mut sanm(&[
        "ablate", "--config", p(&cfg), "--grid", "components", "--seeds", "3", "--out", p(&out),
    ])));
    for row in ["ce", "amg", "amg+nlr", "amg+nlr+smr"] {
        assert!(stdout.contains(row), "{row} missing from\n{stdout}");
    }
}
