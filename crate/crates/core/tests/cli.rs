use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL_CONFIG: &str = r#"{
  "seed": 4,
  "model": { "dan_hidden": [32, 16] },
  "data": { "source": "synthetic", "vocab_size": 101, "sentences_per_class": 60 },
  "embedding": { "source": "synthetic_pretrained", "dim": 16, "signal": 0.08, "noise": 0.1 },
  "train": { "epochs": 2 },
  "compression": { "r": 0.9, "r_list": [0.5, 0.9] },
  "timing_repeats": 1
}"#;

fn run<S: AsRef<std::ffi::OsStr> + std::fmt::Debug>(dir: &Path, args: &[S]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_embsqueeze"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect()
}

/// Runs every subcommand once into `work/<out>`.
fn full_run(work: &Path, out: &str) {
    fs::write(work.join("cfg.json"), SMALL_CONFIG).unwrap();
    let c = ["--config", "cfg.json", "--out", out];
    let model = format!("{out}/model.emsq");
    let with = |cmd: &[&'static str]| -> Vec<String> {
        cmd.iter().chain(&c).map(|s| s.to_string()).collect()
    };
    run(work, &with(&["train"]));
    let mut cmd = with(&["compress-retrain", "--epochs", "1"]);
    cmd.push(model.clone());
    run(work, &cmd);
    let mut cmd = with(&["quantize", "--bits", "8"]);
    cmd.push(model.clone());
    run(work, &cmd);
    let mut cmd = with(&["eval", "--split", "dev"]);
    cmd.push(model);
    run(work, &cmd);
    run(work, &with(&["analyze", "--m", "1000", "--n", "50"]));
    run(work, &with(&["baseline-offline", "--rank", "3"]));
}

#[test]
fn repeated_commands_write_identical_files() {
    let work = tempfile::tempdir().unwrap();
    full_run(work.path(), "a");
    full_run(work.path(), "b");
    let (a, b) = (files(&work.path().join("a")), files(&work.path().join("b")));
    assert!(a.len() >= 8, "only {:?}", a.keys().collect::<Vec<_>>());
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    for (name, bytes) in &a {
        assert!(bytes == &b[name], "{name} differs between runs");
    }
}

#[test]
fn quantizing_twice_is_idempotent() {
    let work = tempfile::tempdir().unwrap();
    fs::write(work.path().join("cfg.json"), SMALL_CONFIG).unwrap();
    run(work.path(), &["train", "--config", "cfg.json", "--out", "t"]);
    run(work.path(), &["quantize", "t/model.emsq", "--config", "cfg.json", "--out", "q1"]);
    fs::copy(work.path().join("t/vocab.txt"), work.path().join("q1/vocab.txt")).ok();
    run(
        work.path(),
        &["quantize", "q1/quantized_q8.emsq", "--config", "cfg.json", "--out", "q2"],
    );
    let a = fs::read(work.path().join("q1/quantized_q8.emsq")).unwrap();
    let b = fs::read(work.path().join("q2/quantized_q8.emsq")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn sweep_reports_every_method() {
    let work = tempfile::tempdir().unwrap();
    fs::write(work.path().join("cfg.json"), SMALL_CONFIG).unwrap();
    let out = run(work.path(), &["sweep", "--config", "cfg.json", "--out", "s"]);
    let csv = fs::read_to_string(work.path().join("s/sweep.csv")).unwrap();
    assert_eq!(String::from_utf8(out.stdout).unwrap().trim_end(), csv.trim_end());
    let methods: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(
        methods,
        ["uncompressed", "quantized_16bit", "quantized_8bit", "proposed", "offline", "proposed", "offline"]
    );
}

#[test]
fn bad_inputs_exit_nonzero() {
    let work = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_embsqueeze");
    let cases: [&[&str]; 4] = [
        &["eval", "missing.emsq"],
        &["train", "--config", "nope.json"],
        &["analyze", "--p", "1.5"],
        &["quantize", "missing.emsq", "--bits", "4"],
    ];
    for args in cases {
        let out = Command::new(bin).current_dir(work.path()).args(args).output().unwrap();
        assert!(!out.status.success(), "{args:?} succeeded");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.starts_with("error"), "{args:?}: {err}");
    }
}
