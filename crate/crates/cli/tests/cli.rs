use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use probsam_core::data::load_dataset;
use probsam_core::model::{checkpoint, ModelConfig, ModelParams, ParamGroup};
use tempfile::TempDir;

fn probsam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_probsam")).args(args).output().expect("run probsam")
}

fn ok(args: &[&str]) -> String {
    let out = probsam(args);
    assert!(
        out.status.success(),
        "probsam {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_data(dir: &Path) -> PathBuf {
    let d = dir.join("data");
    ok(&["gen-data", "--seed", "3", "--n", "20", "--height", "32", "--width", "32", "--out", s(&d)]);
    d
}

fn quick_train(data: &Path, out: &Path, extra: &[&str]) {
    let mut args = vec!["train", "--data", s(data), "--seed", "5", "--steps", "3", "--batch-size", "2", "--out", s(out)];
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn gen_data_writes_manifest_deterministically() {
    let tmp = TempDir::new().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for d in [&a, &b] {
        ok(&["gen-data", "--seed", "11", "--n", "200", "--out", s(d)]);
    }
    let ma = fs::read(a.join("manifest.json")).unwrap();
    assert_eq!(ma, fs::read(b.join("manifest.json")).unwrap());
    let corpus = load_dataset(&a).unwrap();
    assert_eq!(corpus.samples.len(), 200);
    assert_eq!(corpus.splits.train.len() + corpus.splits.val.len() + corpus.splits.test.len(), 200);
    assert!(a.join("config.toml").exists());
}

#[test]
fn gen_data_rejects_zero_samples() {
    let tmp = TempDir::new().unwrap();
    let out = probsam(&["gen-data", "--n", "0", "--out", s(&tmp.path().join("x"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_samples"));
}

#[test]
fn missing_out_is_an_error() {
    let out = probsam(&["gen-data", "--n", "3"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--out"));
}

#[test]
fn train_writes_outputs_and_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let data = small_data(tmp.path());
    let r1 = tmp.path().join("r1");
    let r2 = tmp.path().join("r2");
    quick_train(&data, &r1, &["--checkpoint-every", "2", "--eval-every", "2"]);
    quick_train(&data, &r2, &[]);
    for f in ["model.ckpt", "history.csv", "loss_curve.png", "config.toml", "evals.csv", "checkpoints/step_000002.ckpt"] {
        assert!(r1.join(f).exists(), "{f} missing");
    }
    assert_eq!(fs::read(r1.join("model.ckpt")).unwrap(), fs::read(r2.join("model.ckpt")).unwrap());
    assert_eq!(fs::read(r1.join("history.csv")).unwrap(), fs::read(r2.join("history.csv")).unwrap());
    let hist = fs::read_to_string(r1.join("history.csv")).unwrap();
    assert_eq!(hist.lines().next().unwrap(), "step,bce,dice,kl,total");
    assert_eq!(hist.lines().count(), 4);
}

#[test]
fn freeze_decoder_keeps_decoder_tensors() {
    let tmp = TempDir::new().unwrap();
    let data = small_data(tmp.path());
    let run = tmp.path().join("run");
    quick_train(&data, &run, &["--freeze-decoder", "--lr", "1e-2"]);
    let trained = checkpoint::load(&run.join("model.ckpt")).unwrap();
    let init = ModelParams::init(ModelConfig { height: 32, width: 32, init_seed: 5, ..ModelConfig::default() }).unwrap();
    let mut moved = 0;
    for (a, b) in trained.params().iter().zip(init.params()) {
        assert_eq!(a.name, b.name);
        if ParamGroup::of(&a.name) == Some(ParamGroup::Decoder) {
            assert_eq!(a.tensor, b.tensor, "{} changed", a.name);
        } else if a.tensor != b.tensor {
            moved += 1;
        }
    }
    assert!(moved > 0);
}

#[test]
fn sample_writes_masks_and_grid() {
    let tmp = TempDir::new().unwrap();
    let data = small_data(tmp.path());
    let run = tmp.path().join("run");
    quick_train(&data, &run, &[]);
    let ckpt = run.join("model.ckpt");
    let a = tmp.path().join("sa");
    let b = tmp.path().join("sb");
    for d in [&a, &b] {
        ok(&["sample", "--checkpoint", s(&ckpt), "--data", s(&data), "--id", "s00001", "--m", "4", "--seed", "2", "--out", s(d)]);
    }
    for i in 0..4 {
        let f = format!("sample_{i:02}.png");
        assert_eq!(fs::read(a.join(&f)).unwrap(), fs::read(b.join(&f)).unwrap());
    }
    assert!(!a.join("sample_04.png").exists());
    assert!(a.join("grid.png").exists());

    let img = tmp.path().join("img.png");
    fs::copy(data.join("images/s00001.png"), &img).unwrap();
    let c = tmp.path().join("sc");
    ok(&["sample", "--checkpoint", s(&ckpt), "--image", s(&img), "--box", "4,4,20,20", "--m", "2", "--out", s(&c)]);
    assert!(c.join("sample_01.png").exists());

    let bad = probsam(&["sample", "--checkpoint", s(&ckpt), "--image", s(&img), "--box", "0,0,33,10", "--out", s(&c)]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("exceeds"));
    let no_box = probsam(&["sample", "--checkpoint", s(&ckpt), "--image", s(&img), "--out", s(&c)]);
    assert!(!no_box.status.success());
}

#[test]
fn eval_reports_per_sample_rows_and_comparison() {
    let tmp = TempDir::new().unwrap();
    let data = small_data(tmp.path());
    let run = tmp.path().join("run");
    quick_train(&data, &run, &[]);
    let drop = tmp.path().join("drop");
    quick_train(&data, &drop, &["--mode", "dropout"]);
    let ckpt = run.join("model.ckpt");
    let a = tmp.path().join("ea");
    let b = tmp.path().join("eb");
    for d in [&a, &b] {
        ok(&[
            "eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--m", "3", "--baseline", "dropout",
            "--baseline-checkpoint", s(&drop.join("model.ckpt")), "--out", s(d),
        ]);
    }
    let report = fs::read(a.join("report.json")).unwrap();
    assert_eq!(report, fs::read(b.join("report.json")).unwrap());
    let v: serde_json::Value = serde_json::from_slice(&report).unwrap();
    let n_test = load_dataset(&data).unwrap().splits.test.len();
    assert_eq!(v["samples"].as_array().unwrap().len(), n_test);
    assert_eq!(v["M"], 3);
    let p = v["comparison"]["ged2"]["p_value"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&p));
    let rows = fs::read_to_string(a.join("per_sample.csv")).unwrap();
    assert_eq!(rows.lines().count(), n_test + 1);

    let bad = probsam(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--m", "1", "--out", s(&a)]);
    assert!(!bad.status.success());
}

#[test]
fn gradcheck_exit_codes() {
    let out = probsam(&["gradcheck"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("threshold 1e-4"));

    let single = probsam(&["gradcheck", "--single-precision"]);
    assert!(single.status.success());
    assert!(String::from_utf8_lossy(&single.stdout).contains("threshold 5e-2"));

    let faulty = probsam(&["gradcheck", "--inject-dice-grad-fault"]);
    assert!(!faulty.status.success());
}

#[test]
fn config_file_supplies_defaults_and_flags_override() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("c.toml");
    fs::write(&cfg, "seed = 4\n[data]\nn_samples = 7\nheight = 16\nwidth = 16\n").unwrap();
    let d = tmp.path().join("d");
    ok(&["gen-data", "--config", s(&cfg), "--n", "9", "--out", s(&d)]);
    let corpus = load_dataset(&d).unwrap();
    assert_eq!(corpus.samples.len(), 9);
    assert_eq!(corpus.height, 16);
    assert_eq!(corpus.seed, Some(4));
    let resolved = fs::read_to_string(d.join("config.toml")).unwrap();
    assert!(resolved.contains("n_samples = 9"));

    fs::write(&cfg, "[data]\nn_sample = 7\n").unwrap();
    assert!(!probsam(&["gen-data", "--config", s(&cfg), "--out", s(&d)]).status.success());
}
