use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn guidir(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_guidir"))
        .args(args)
        .env_remove("GUIDIR_CACHE")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = guidir(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn pngs(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    v.sort();
    v
}

/// 8 gray 16x16 textures, degraded with sr4, plus a 2-step checkpoint.
struct Fixture {
    _tmp: tempfile::TempDir,
    corpus: PathBuf,
    lq: PathBuf,
    ckpt: PathBuf,
    root: PathBuf,
}

fn fixture() -> Fixture {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_path_buf();
    let corpus = root.join("corpus");
    let lq = root.join("lq");
    let model = root.join("model");
    ok(&["synth", "--n", "8", "--size", "16", "--seed", "3", "--negative-ratio", "0", "--out", s(&corpus)]);
    ok(&["degrade", "--manifest", s(&corpus.join("manifest.jsonl")), "--preset", "sr4", "--out", s(&lq), "--seed", "1"]);
    ok(&[
        "train", "--corpus", s(&corpus), "--out", s(&model), "--steps", "2", "--batch-size", "2",
        "--base-channels", "8", "--blocks-per-stage", "1", "--negative-ratio", "0", "--target", "joint",
    ]);
    Fixture {
        _tmp: tmp,
        corpus,
        lq,
        ckpt: model.join("model.ckpt"),
        root,
    }
}

#[test]
fn synth_is_reproducible_and_validates() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&["synth", "--n", "64", "--seed", "7", "--size", "16", "--out", s(&a)]);
    ok(&["synth", "--n", "64", "--seed", "7", "--size", "16", "--out", s(&b)]);
    assert_eq!(
        fs::read(a.join("manifest.jsonl")).unwrap(),
        fs::read(b.join("manifest.jsonl")).unwrap()
    );
    assert!(a.join("effective-config.json").exists());
    assert!(a.join("vocab.txt").exists());

    let bad = guidir(&["synth", "--negative-ratio", "1.5", "--out", s(&tmp.path().join("c"))]);
    assert_eq!(bad.status.code(), Some(2));

    let empty = tmp.path().join("empty");
    ok(&["synth", "--n", "0", "--out", s(&empty)]);
    assert_eq!(fs::read_to_string(empty.join("manifest.jsonl")).unwrap(), "");
}

#[test]
fn synth_uses_cache_env_and_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("synth.toml");
    fs::write(&cfg, "n = 3\nsize = 16\nseed = 2\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_guidir"))
        .args(["synth", "--config", s(&cfg), "--n", "4"])
        .env("GUIDIR_CACHE", tmp.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    let corpus = tmp.path().join("corpus");
    assert_eq!(pngs(&corpus).len(), 4);
    let eff: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(corpus.join("effective-config.json")).unwrap()).unwrap();
    assert_eq!(eff["n"], 4);
    assert_eq!(eff["seed"], 2);
    assert_eq!(eff["command"], "synth");

    // Re-running from the effective config reproduces the manifest.
    let again = tmp.path().join("again");
    ok(&["synth", "--config", s(&corpus.join("effective-config.json")), "--out", s(&again)]);
    assert_eq!(
        fs::read(corpus.join("manifest.jsonl")).unwrap(),
        fs::read(again.join("manifest.jsonl")).unwrap()
    );
}

#[test]
fn degrade_presets_and_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    ok(&["synth", "--n", "4", "--size", "16", "--out", s(&corpus), "--negative-ratio", "0"]);
    let manifest = corpus.join("manifest.jsonl");
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&["degrade", "--manifest", s(&manifest), "--preset", "sr4", "--out", s(&a), "--seed", "5", "--jobs", "2"]);
    ok(&["degrade", "--manifest", s(&manifest), "--preset", "sr4", "--out", s(&b), "--seed", "5", "--jobs", "1"]);
    for (x, y) in pngs(&a).iter().zip(pngs(&b)) {
        assert_eq!(fs::read(x).unwrap(), fs::read(&y).unwrap());
    }
    let lq = fs::read_to_string(a.join("manifest.jsonl")).unwrap();
    assert!(lq.contains("\"resize\""));
    assert!(lq.contains("0.25"));

    let bad = guidir(&["degrade", "--manifest", s(&manifest), "--preset", "sr3", "--out", s(&tmp.path().join("c"))]);
    assert_eq!(bad.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&bad.stderr);
    for name in ["sr4", "sr8", "blur2-sr4", "sr4-noise40", "mix-full"] {
        assert!(msg.contains(name), "{msg}");
    }

    let spec = tmp.path().join("spec.json");
    fs::write(&spec, r#"{"ops": [{"blur": {"sigma": 1.0}}], "seed": 0}"#).unwrap();
    ok(&["degrade", "--manifest", s(&manifest), "--spec", s(&spec), "--out", s(&tmp.path().join("d"))]);
}

#[test]
fn restore_tau_zero_returns_the_input() {
    let f = fixture();
    let out = f.root.join("restored");
    ok(&[
        "restore", "--checkpoint", s(&f.ckpt), "--input", s(&f.lq), "--out", s(&out), "--tau-r", "0",
        "--steps", "4", "--trace",
    ]);
    let inputs = pngs(&f.lq);
    assert_eq!(pngs(&out).len(), inputs.len());
    for p in &inputs {
        let name = p.file_name().unwrap();
        assert_eq!(fs::read(p).unwrap(), fs::read(out.join(name)).unwrap());
        let stem = p.file_stem().unwrap().to_str().unwrap();
        let trace = fs::read_to_string(out.join(format!("{stem}.trace.csv"))).unwrap();
        assert!(trace.starts_with("step,sigma,k_t,mean_abs_z\n"));
        assert_eq!(trace.lines().count(), 5);
    }
    assert!(out.join("effective-config.json").exists());
}

#[test]
fn restore_lambda_zero_ignores_negative_tokens() {
    let f = fixture();
    let a = f.root.join("a");
    let b = f.root.join("b");
    let common = ["--checkpoint", s(&f.ckpt), "--input", s(&f.lq), "--steps", "3", "--lambda-cfg", "0", "--seed", "4"];
    let mut args = vec!["restore", "--out", s(&a)];
    args.extend(common);
    ok(&args);
    let mut args = vec!["restore", "--out", s(&b), "--negative-prompt", "stripes"];
    args.extend(common);
    ok(&args);
    for p in pngs(&a) {
        assert_eq!(fs::read(&p).unwrap(), fs::read(b.join(p.file_name().unwrap())).unwrap());
    }
}

#[test]
fn restore_is_independent_of_job_count_and_evaluates() {
    let f = fixture();
    let a = f.root.join("a");
    let b = f.root.join("b");
    ok(&["restore", "--checkpoint", s(&f.ckpt), "--input", s(&f.lq), "--out", s(&a), "--steps", "3", "--jobs", "1"]);
    ok(&["restore", "--checkpoint", s(&f.ckpt), "--input", s(&f.lq), "--out", s(&b), "--steps", "3", "--jobs", "3"]);
    for p in pngs(&a) {
        assert_eq!(fs::read(&p).unwrap(), fs::read(b.join(p.file_name().unwrap())).unwrap());
    }

    ok(&["evaluate", "--restored", s(&a), "--gt", s(&f.corpus)]);
    let csv = fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("path,psnr_db,ssim\n"));
    let rows: Vec<f64> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join("summary.json")).unwrap()).unwrap();
    let mean = rows.iter().sum::<f64>() / rows.len() as f64;
    assert!((summary["mean_psnr_db"].as_f64().unwrap() - mean).abs() < 1e-9);
}

#[test]
fn evaluate_identity_and_mismatch() {
    let f = fixture();
    let out = f.root.join("eval");
    ok(&["evaluate", "--restored", s(&f.corpus), "--gt", s(&f.corpus), "--out", s(&out)]);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["mean_psnr_db"].as_f64().unwrap(), 99.0);
    assert!((summary["mean_ssim"].as_f64().unwrap() - 1.0).abs() < 1e-12);

    let odd = f.root.join("odd");
    fs::create_dir_all(&odd).unwrap();
    fs::copy(&pngs(&f.lq)[0], odd.join("stray_name.png")).unwrap();
    let bad = guidir(&["evaluate", "--restored", s(&odd), "--gt", s(&f.corpus)]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("stray_name"));
}

#[test]
fn sweep_writes_one_row_per_tau() {
    let f = fixture();
    let out = f.root.join("sweep");
    ok(&[
        "sweep-tau", "--checkpoint", s(&f.ckpt), "--input", s(&f.lq), "--gt", s(&f.corpus), "--out", s(&out),
        "--steps", "3", "--seed", "9",
    ]);
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "tau_r,seed,mean_psnr_lq_db,mean_psnr_gt_db,mean_ssim_gt");
    assert_eq!(lines.len(), 6);
    let taus: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(taus, ["0.0", "1.0", "2.0", "4.0", "6.0"]);
    assert!(lines[1..].iter().all(|l| l.split(',').nth(1) == Some("9")));
    // tau_r = 0 reproduces the LQ input exactly.
    assert!(lines[1].split(',').nth(2) == Some("99.0"));
    assert!(fs::read_to_string(out.join("sweep.dat")).unwrap().starts_with("# tau_r"));
}

#[test]
fn encoder_training_needs_enough_images() {
    let f = fixture();
    let bad = guidir(&["train-encoder", "--corpus", s(&f.corpus), "--out", s(&f.root.join("enc"))]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn encoder_training_and_preview() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    ok(&["synth", "--n", "256", "--size", "8", "--out", s(&corpus), "--negative-ratio", "0"]);
    let enc = tmp.path().join("enc");
    ok(&[
        "train-encoder", "--corpus", s(&corpus), "--out", s(&enc), "--epochs", "1", "--finetune-epochs", "1",
        "--hidden", "4", "--batch-size", "64",
    ]);
    for f in ["encoder.ckpt", "pretrained.ckpt", "pretrain_loss.csv", "finetune_loss.csv", "effective-config.json"] {
        assert!(enc.join(f).exists(), "{f}");
    }
    let previews = tmp.path().join("previews");
    ok(&["preview", "--encoder", s(&enc.join("encoder.ckpt")), "--input", s(&corpus), "--out", s(&previews)]);
    assert_eq!(pngs(&previews).len(), 256);
}

#[test]
fn unknown_sampler_and_corrupt_checkpoint_fail() {
    let f = fixture();
    let bad = guidir(&[
        "restore", "--checkpoint", s(&f.ckpt), "--input", s(&f.lq), "--out", s(&f.root.join("x")), "--sampler", "ddim",
    ]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("restoration-guided"));

    let broken = f.root.join("broken.ckpt");
    let mut bytes = fs::read(&f.ckpt).unwrap();
    bytes[6] = b'9';
    fs::write(&broken, bytes).unwrap();
    let bad = guidir(&["restore", "--checkpoint", s(&broken), "--input", s(&f.lq), "--out", s(&f.root.join("y"))]);
    assert_eq!(bad.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("version"));
}
