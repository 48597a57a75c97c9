use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &[&str] = &[
    "data.factors=\"posX=4,posY=4\"",
    "data.image_size=16",
    "arch.widths=[16]",
    "arch.d_z=2",
    "arch.d_y=2",
    "arch.disc_width=8",
    "arch.pred_width=8",
    "trainer.batch_size=8",
    "trainer.steps=10",
    "trainer.log_every=5",
    "trainer.checkpoint_every=5",
];

const SUPERVISED: &[&str] = &["data.mode=supervised", "data.test_fraction=0.25"];

fn icp_lab(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_icp-lab"))
        .current_dir(cwd)
        .args(args)
        .output()
        .expect("binary runs")
}

fn with_sets(base: &[&str], sets: &[&str]) -> Vec<String> {
    let mut v: Vec<String> = base.iter().map(|s| s.to_string()).collect();
    for s in TINY.iter().chain(sets) {
        v.push("--set".into());
        v.push(s.to_string());
    }
    v
}

fn run_ok(cwd: &Path, args: &[String]) -> String {
    let a: Vec<&str> = args.iter().map(String::as_str).collect();
    let out = icp_lab(cwd, &a);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn run_code(cwd: &Path, args: &[String]) -> (i32, String) {
    let a: Vec<&str> = args.iter().map(String::as_str).collect();
    let out = icp_lab(cwd, &a);
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn train(cwd: &Path, name: &str, sets: &[&str]) -> PathBuf {
    run_ok(cwd, &with_sets(&["train", "--output-dir", name], sets));
    cwd.join(name)
}

fn manifest(run: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(run.join("experiment.json")).unwrap()).unwrap()
}

#[test]
fn train_with_override_writes_manifest_and_stays_in_output_dir() {
    let dir = tempfile::tempdir().unwrap();
    let run = train(dir.path(), "run", &["hp.variant=VIB"]);
    let m = manifest(&run);
    assert_eq!(m["status"], "completed");
    assert_eq!(m["config"]["hp"]["variant"], "VIB");
    assert_eq!(m["steps_completed"], 10);
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(m["artifacts"]["final_checkpoint"], "checkpoints/step_00000010");
    assert_eq!(fs::read_to_string(run.join("metrics.jsonl")).unwrap().lines().count(), 2);
    let entries: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(entries, vec!["run"]);
}

#[test]
fn config_file_sections_are_applied() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("exp.toml"), "[hp]\nvariant = \"ICP_ALL\"\n[trainer]\nsteps = 0\n").unwrap();
    run_ok(
        dir.path(),
        &with_sets(&["train", "--config", "exp.toml", "--output-dir", "run", "--seed", "3"], &["trainer.steps=0"]),
    );
    let m = manifest(&dir.path().join("run"));
    assert_eq!((m["config"]["hp"]["variant"].as_str(), m["config"]["trainer"]["seed"].as_u64()), (Some("ICP_ALL"), Some(3)));
    assert_eq!(fs::read_to_string(dir.path().join("run/metrics.jsonl")).unwrap(), "");
    let ckpts: Vec<_> = fs::read_dir(dir.path().join("run/checkpoints")).unwrap().collect();
    assert_eq!(ckpts.len(), 1);
}

#[test]
fn error_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (code, err) = run_code(dir.path(), &with_sets(&["train", "--config", "missing.toml", "--output-dir", "o"], &[]));
    assert_eq!(code, 4);
    assert!(err.contains("missing.toml"), "{err}");

    let (code, err) = run_code(dir.path(), &with_sets(&["train", "--output-dir", "o"], &["hp.delta=1"]));
    assert_eq!(code, 2);
    assert!(err.contains("valid keys") && err.contains("hp.gamma"), "{err}");

    let (code, _) = run_code(dir.path(), &with_sets(&["train", "--output-dir", "o"], &["trainer.batch_size=1"]));
    assert_eq!(code, 2);

    let (code, err) = run_code(dir.path(), &with_sets(&["train", "--output-dir", "div"], &["trainer.lr_main=1e30"]));
    assert_eq!(code, 3, "{err}");
    assert!(err.contains("diverged"), "{err}");
    assert_eq!(manifest(&dir.path().join("div"))["status"], "diverged");
}

#[test]
fn resume_checks_config_hash() {
    let dir = tempfile::tempdir().unwrap();
    let run = train(dir.path(), "run", &[]);
    let full = fs::read(run.join("metrics.jsonl")).unwrap();
    let ckpt = run.join("checkpoints/step_00000005");
    let args = |extra: &[&str]| {
        with_sets(&["train", "--output-dir", "run", "--resume", ckpt.to_str().unwrap()], extra)
    };
    run_ok(dir.path(), &args(&[]));
    assert_eq!(fs::read(run.join("metrics.jsonl")).unwrap(), full);
    let (code, err) = run_code(dir.path(), &args(&["hp.gamma=1.0"]));
    assert_eq!(code, 2);
    assert!(err.contains("config hash"), "{err}");
}

#[test]
fn eval_reports_per_head_blocks() {
    let dir = tempfile::tempdir().unwrap();
    let sup = train(dir.path(), "sup", SUPERVISED);
    let ckpt = sup.join("checkpoints/step_00000010");
    let c = ckpt.to_str().unwrap();
    let out = run_ok(dir.path(), &["eval", "--checkpoint", c, "--metrics", "error", "--output-dir", "sup/eval"].map(String::from));
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["split"], "test");
    assert_eq!(v["n_samples"], 4);
    for head in ["z", "y", "r"] {
        let e = v["error"][head].as_f64().unwrap();
        assert!((0.0..=100.0).contains(&e));
    }
    assert!(sup.join("eval/eval_step_00000010.json").exists());
    let (code, err) = run_code(dir.path(), &["eval", "--checkpoint", c, "--metrics", "mse"].map(String::from));
    assert_eq!(code, 2, "{err}");

    let selfsup = train(dir.path(), "self", &[]);
    let c2 = selfsup.join("checkpoints/step_00000010");
    let out = run_ok(dir.path(), &["eval", "--checkpoint", c2.to_str().unwrap(), "--metrics", "mig,mse,ssim"].map(String::from));
    let v: Value = serde_json::from_str(&out).unwrap();
    assert!(v["mig"]["r"]["score"].as_f64().unwrap() >= 0.0);
    assert!(v["mse"]["z"].as_f64().is_some() && v["ssim"]["r"].as_f64().is_some());
    let (code, _) = run_code(dir.path(), &["eval", "--checkpoint", c2.to_str().unwrap(), "--metrics", "error"].map(String::from));
    assert_eq!(code, 2);

    fs::write(c2.join("manifest.json"), "{ not json").unwrap();
    let (code, _) = run_code(dir.path(), &["eval", "--checkpoint", c2.to_str().unwrap(), "--metrics", "mig"].map(String::from));
    assert_eq!(code, 4);
}

#[test]
fn figures_by_mode() {
    let dir = tempfile::tempdir().unwrap();
    let sup = train(dir.path(), "sup", SUPERVISED);
    let c = sup.join("checkpoints/step_00000010");
    let c = c.to_str().unwrap();
    run_ok(dir.path(), &["figures", "--checkpoint", c, "--kind", "heatmap"].map(String::from));
    let csv = fs::read_to_string(sup.join("figures/heatmap_step_00000010.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "class,z0,z1,y0,y1");
    assert_eq!(lines.len(), 1 + 4);
    let png = image::open(sup.join("figures/heatmap_step_00000010.png")).unwrap();
    assert_eq!((png.width(), png.height()), (4 * 16, 4 * 16));
    let (code, _) = run_code(dir.path(), &["figures", "--checkpoint", c, "--kind", "traversal"].map(String::from));
    assert_eq!(code, 2);

    let selfsup = train(dir.path(), "self", &[]);
    let c2 = selfsup.join("checkpoints/step_00000010");
    let out = run_ok(
        dir.path(),
        &["figures", "--checkpoint", c2.to_str().unwrap(), "--kind", "traversal", "--dims", "all", "--steps", "10"]
            .map(String::from),
    );
    let pngs: Vec<&str> = out.lines().filter(|l| l.ends_with(".png")).collect();
    assert_eq!(pngs.len(), 4);
    for p in pngs {
        let img = image::open(p).unwrap();
        assert_eq!((img.width(), img.height()), (11 * 16 + 10 * 2, 16));
    }
    let (code, _) = run_code(dir.path(), &["figures", "--checkpoint", c2.to_str().unwrap(), "--kind", "heatmap"].map(String::from));
    assert_eq!(code, 2);
}

#[test]
fn ablation_table_is_complete_and_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out: &str| with_sets(&["ablation", "--output-dir", out], &["trainer.steps=4", "data.mode=supervised"]);
    let text = run_ok(dir.path(), &args("a"));
    assert_eq!(text.lines().count(), 1 + 7);
    let runs: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("a/ablation_runs.json")).unwrap()).unwrap();
    assert_eq!(runs.as_array().unwrap().len(), 21);
    let csv = fs::read_to_string(dir.path().join("a/ablation.csv")).unwrap();
    let base = csv.lines().find(|l| l.starts_with("ICP_ALL,")).unwrap();
    assert!(base.ends_with(",0.000000,ok"), "{base}");
    run_ok(dir.path(), &args("b"));
    assert_eq!(csv, fs::read_to_string(dir.path().join("b/ablation.csv")).unwrap());
    assert_eq!(manifest(&dir.path().join("a"))["status"], "completed");
}
