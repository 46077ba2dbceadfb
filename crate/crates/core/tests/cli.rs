mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use avfusion::data::DatasetManifest;

use common::{sha256_hex, sine, tree_hashes, write_wav};

fn avfusion(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_avfusion"))
        .args(args)
        .env_remove("AVFUSION_OUT_DIR")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_synth(dir: &Path, seed: &str) -> Output {
    avfusion(&[
        "synth", "--seed", seed, "--train-sequences", "8", "--val-sequences", "3", "--test-sequences", "3",
        "--out-dir", s(dir),
    ])
}

fn small_train(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let train = data.join("train.toml");
    let val = data.join("val.toml");
    let mut args = vec![
        "train", "--max-epochs", "2", "--train-manifest", s(&train), "--val-manifest", s(&val), "--out-dir", s(out),
    ];
    args.extend_from_slice(extra);
    avfusion(&args)
}

#[test]
fn synth_default_config_writes_valid_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let o = avfusion(&["synth", "--out-dir", s(dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    for split in ["train", "val", "test"] {
        let path = dir.path().join(format!("{split}.toml"));
        let m = DatasetManifest::read(&path).unwrap();
        m.validate(dir.path()).unwrap();
    }
    assert!(dir.path().join("synth_report.txt").is_file());
    assert!(dir.path().join("resolved_config.txt").is_file());
}

#[test]
fn synth_same_seed_same_hashes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert!(small_synth(a.path(), "7").status.success());
    assert!(small_synth(b.path(), "7").status.success());
    let mut ha = tree_hashes(a.path());
    let mut hb = tree_hashes(b.path());
    // the echoed config names its own output directory
    ha.remove("resolved_config.txt");
    hb.remove("resolved_config.txt");
    assert_eq!(ha, hb);
}

#[test]
fn synth_rejects_mask_prob_above_half() {
    let dir = tempfile::tempdir().unwrap();
    let o = avfusion(&["synth", "--mask-prob", "0.6", "--out-dir", s(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("mask_prob"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(avfusion(&["train", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(avfusion(&["synth", "--lr", "fast"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "learning_rate = 0.1\n").unwrap();
    let o = avfusion(&["synth", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learning_rate"));
}

#[test]
fn train_smoke_writes_artifacts_and_eval_reproduces_val_ccc() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = dir.path().join("train");
    assert!(small_synth(&data, "3").status.success());
    let o = small_train(&data, &out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["best.jcap", "train_log.txt", "train_summary.txt", "resolved_config.txt"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    assert!(out.join("checkpoints").join("epoch-001.jcap").is_file());
    assert_eq!(fs::read_to_string(out.join("train_log.txt")).unwrap().lines().count(), 2);

    let eval = dir.path().join("eval");
    let o = avfusion(&[
        "eval", "--checkpoint", s(&out.join("best.jcap")), "--eval-manifest", s(&data.join("val.toml")),
        "--out-dir", s(&eval),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = fs::read_to_string(eval.join("eval_report.txt")).unwrap();
    let summary = fs::read_to_string(out.join("train_summary.txt")).unwrap();
    let val_block = summary.split("[val]\n").nth(1).unwrap();
    assert_eq!(report, val_block);
    let best: f64 = summary
        .lines()
        .find_map(|l| l.strip_prefix("best_val_ccc="))
        .unwrap()
        .parse()
        .unwrap();
    let rho: f64 = report.split("rho_c=").nth(1).unwrap().split(' ').next().unwrap().parse().unwrap();
    assert_eq!(best.to_bits(), rho.to_bits());
}

#[test]
fn resolved_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(small_synth(&data, "4").status.success());
    let first = dir.path().join("first");
    assert!(small_train(&data, &first, &["--model", "vanilla-ca", "--lr", "0.002"]).status.success());
    let echoed = first.join("resolved_config.txt");
    let second = dir.path().join("second");
    let o = avfusion(&["train", "--config", s(&echoed), "--out-dir", s(&second)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["best.vcap", "train_log.txt", "train_summary.txt"] {
        assert_eq!(
            sha256_hex(&fs::read(first.join(f)).unwrap()),
            sha256_hex(&fs::read(second.join(f)).unwrap()),
            "{f}"
        );
    }
}

#[test]
fn out_dir_env_override() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_avfusion"))
        .args(["synth", "--train-sequences", "2", "--val-sequences", "1", "--test-sequences", "1"])
        .env("AVFUSION_OUT_DIR", dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("train.toml").is_file());
}

#[test]
fn train_missing_manifest_fails_clearly() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.toml");
    let o = avfusion(&[
        "train", "--train-manifest", s(&missing), "--val-manifest", s(&missing), "--out-dir", s(dir.path()),
    ]);
    assert_ne!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("nope.toml"), "{}", stderr(&o));
    let o = avfusion(&["train", "--out-dir", s(dir.path())]);
    assert_ne!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("train-manifest"), "{}", stderr(&o));
}

#[test]
fn eval_rejects_corrupt_checkpoint_and_dim_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = dir.path().join("train");
    assert!(small_synth(&data, "5").status.success());
    assert!(small_train(&data, &out, &[]).status.success());
    let val = data.join("val.toml");

    let mut bytes = fs::read(out.join("best.jcap")).unwrap();
    bytes[..4].copy_from_slice(b"XXXX");
    let bad = dir.path().join("bad.jcap");
    fs::write(&bad, &bytes).unwrap();
    let o = avfusion(&["eval", "--checkpoint", s(&bad), "--eval-manifest", s(&val), "--out-dir", s(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("magic"), "{}", stderr(&o));

    let other = dir.path().join("other");
    let o = avfusion(&["synth", "--d-a", "5", "--train-sequences", "2", "--val-sequences", "1", "--test-sequences", "1", "--out-dir", s(&other)]);
    assert!(o.status.success());
    let o = avfusion(&[
        "eval", "--checkpoint", s(&out.join("best.jcap")), "--eval-manifest", s(&other.join("val.toml")),
        "--out-dir", s(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let e = stderr(&o);
    assert!(e.contains("d_a=16") && e.contains("d_a=5"), "{e}");
}

#[test]
fn gradcheck_passes_and_injected_fault_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = avfusion(&["gradcheck", "--out-dir", s(dir.path())]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let report = fs::read_to_string(dir.path().join("gradcheck_report.txt")).unwrap();
    let names: Vec<&str> = report.lines().map(|l| l.split_whitespace().next().unwrap()).collect();
    let expected = [
        "W_ja", "W_jv", "W_a", "W_v", "W_ca", "W_cv", "W_ha", "W_hv", "head.0.weight", "head.0.bias",
    ];
    assert_eq!(names, expected.iter().map(|n| format!("param={n}")).collect::<Vec<_>>());

    let o = avfusion(&["gradcheck", "--inject-fault", "--out-dir", s(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn spectrogram_command() {
    let dir = tempfile::tempdir().unwrap();
    let wav = dir.path().join("clip.wav");
    write_wav(&wav, &sine(300.0, 22050, 23594), 22050);
    let out = dir.path().join("spec.avf");
    let o = avfusion(&["spectrogram", s(&wav), "--output", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("64 x 107"), "{}", stdout(&o));
    let first = sha256_hex(&fs::read(&out).unwrap());
    assert!(avfusion(&["spectrogram", s(&wav), "--output", s(&out)]).status.success());
    assert_eq!(first, sha256_hex(&fs::read(&out).unwrap()));
    let m = avfusion::data::read_features(&out).unwrap();
    assert_eq!(m.shape(), (64, 107));

    let short = dir.path().join("short.wav");
    write_wav(&short, &sine(300.0, 44100, 220), 44100);
    let o = avfusion(&["spectrogram", s(&short), "--out-dir", s(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("signal too short"), "{}", stderr(&o));

    let text = dir.path().join("not.wav");
    fs::write(&text, "hello").unwrap();
    let o = avfusion(&["spectrogram", s(&text), "--out-dir", s(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("unsupported audio"), "{}", stderr(&o));
}
