use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sonanza::tensor_file::{read_f32, read_i32};

const TINY: &str = "\
synthetic.clips_per_class = 6
synthetic.num_folds = 2
contrastive.encoder = reduced
contrastive.epochs = 1
contrastive.batch = 6
ae.hidden_dim = 64
ae.hidden_layers = 1
ae.epochs = 1
ae.max_patches = 300
codebook.k = 8
gen.epochs = 1
probe.epochs = 5
baseline.epochs = 1
";

fn sonanza(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sonanza"));
    cmd.args(args).env_remove("SONANZA_THREADS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = sonanza(args, &[]);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn code(args: &[&str], env: &[(&str, &str)]) -> i32 {
    sonanza(args, env).status.code().unwrap()
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.clone(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_and_validation_errors_exit_1() {
    assert_eq!(code(&["frobnicate"], &[]), 1);
    assert_eq!(code(&["prep", "--synthetic", "--bogus-flag"], &[]), 1);
    assert_eq!(code(&["--help"], &[]), 0);
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "contrastive.tau = 0.5\ncontrastive.temperature = 0.5\n").unwrap();
    let out = sonanza(&["--config", s(&cfg), "selftest"], &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("contrastive.temperature"));
    assert_eq!(code(&["--threads", "0", "selftest"], &[]), 1);
    assert_eq!(code(&["selftest"], &[("SONANZA_THREADS", "many")]), 1);
    assert_eq!(code(&["prep", "--synthetic"], &[]), 1, "no output path");
}

#[test]
fn runtime_failures_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, b"not a directory").unwrap();
    let out = blocker.join("specs");
    assert_eq!(code(&["--set", "synthetic.clips_per_class=1", "prep", "--synthetic", "--out", s(&out)], &[]), 2);
}

#[test]
fn selftest_prints_pass_lines() {
    let out = ok(&["selftest"]);
    assert!(out.lines().count() >= 8);
    assert!(out.lines().all(|l| l.starts_with("PASS ")), "{out}");
}

#[test]
fn tiny_pipeline_is_deterministic_and_leaves_inputs_alone() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let c = s(&cfg);
    let (specs, specs3) = (root.join("specs"), root.join("specs3"));
    ok(&["--config", c, "prep", "--synthetic", "--export-audio", "--out", s(&specs)]);
    ok(&["--config", c, "--threads", "3", "prep", "--synthetic", "--out", s(&specs3)]);
    let (a, b) = (snapshot(&specs), snapshot(&specs3));
    for (p, bytes) in &a {
        let name = p.strip_prefix(&specs).unwrap();
        if name.extension().is_some_and(|e| e == "tnsr") {
            assert_eq!(Some(bytes), b.get(&specs3.join(name)), "{name:?} differs across thread counts");
        }
    }
    let echoed = fs::read_to_string(specs.join("config.txt")).unwrap();
    assert!(echoed.contains("seed = 7") && echoed.contains("synthetic.clips_per_class = 6"));

    // real-audio path over the exported WAVs
    let from_wav = root.join("from_wav");
    let out = ok(&["--config", c, "prep", "--manifest", s(&specs.join("metadata.csv")), "--audio-root", s(&specs.join("audio")), "--out", s(&from_wav)]);
    assert!(out.contains("18 clips of 64x200"), "{out}");
    assert_eq!(read_f32(&from_wav.join("clip_00004.tnsr")).unwrap().shape(), &[64, 200]);

    let before = snapshot(&specs);
    let con = root.join("con");
    ok(&["--config", c, "train-contrastive", "--specs", s(&specs), "--out", s(&con)]);
    let loss = fs::read_to_string(con.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().next(), Some("step,epoch,lr,loss"));
    assert_eq!(read_f32(&con.join("features.tnsr")).unwrap().shape(), &[18, 512]);

    // the echoed config reproduces the run bit for bit, with more threads
    let con2 = root.join("con2");
    ok(&["--config", s(&con.join("config.txt")), "--threads", "2", "train-contrastive", "--specs", s(&specs), "--out", s(&con2)]);
    assert_eq!(fs::read(con.join("features.tnsr")).unwrap(), fs::read(con2.join("features.tnsr")).unwrap());
    assert_eq!(loss, fs::read_to_string(con2.join("loss.csv")).unwrap());

    let cb = root.join("cb");
    ok(&["--config", c, "build-codebook", "--specs", s(&specs), "--out", s(&cb)]);
    let tokens = root.join("tok").join("tokens.tnsr");
    ok(&["--config", c, "tokenize", "--codebook", s(&cb), "--specs", s(&specs), "--out", s(&tokens)]);
    let (shape, data) = read_i32(&tokens).unwrap();
    assert_eq!(shape, vec![18, 50]);
    assert!(data.iter().all(|&t| (0..8).contains(&t)));
    assert_eq!(
        fs::read_to_string(root.join("tok").join("tokens.csv")).unwrap().lines().next(),
        Some("clip_id,fold,classID")
    );
    let gen = root.join("gen");
    ok(&["--config", c, "train-generative", "--tokens", s(&tokens), "--out", s(&gen)]);
    assert_eq!(
        fs::read_to_string(gen.join("train_log.csv")).unwrap().lines().next(),
        Some("epoch,lr,loss,top1_acc")
    );
    // vocabulary smaller than the codebook is a validation error
    assert_eq!(code(&["--config", c, "--set", "codebook.k=2", "train-generative", "--tokens", s(&tokens), "--out", s(&root.join("g2"))], &[]), 1);

    let probe = root.join("probe");
    let feats = s(&con.join("features.tnsr")).to_string();
    let labels = s(&con.join("features.csv")).to_string();
    ok(&["--config", c, "probe", "--features", &feats, "--manifest", &labels, "--folds", "2", "--checkpoint", s(&con.join("checkpoint")), "--out", s(&probe)]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(probe.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["per_fold"].as_array().unwrap().len(), 2);
    assert_eq!(report["source"], "contrastive");
    assert_eq!(code(&["--config", c, "probe", "--features", &feats, "--manifest", &labels, "--folds", "10", "--out", s(&probe)], &[]), 1);

    let base = root.join("base");
    ok(&["--config", c, "baseline", "--specs", s(&specs), "--out", s(&base)]);
    let rep = root.join("rep");
    let text = ok(&["report", "--probe", s(&probe.join("report.json")), "--baseline", s(&base.join("report.json")), "--loss", &format!("contrastive={}", s(&con.join("loss.csv"))), "--out", s(&rep)]);
    assert!(text.contains("gap = supervised baseline - best unsupervised"));
    for f in ["comparison.json", "comparison.txt", "comparison.csv", "loss_curves.png", "loss_curves.csv", "config.txt"] {
        assert!(rep.join(f).is_file(), "{f}");
    }
    let preview = root.join("preview");
    ok(&["--config", c, "augment-preview", "--specs", s(&specs), "--clip", "2", "--out", s(&preview)]);
    let png = image::open(preview.join("preview.png")).unwrap();
    assert_eq!((png.width(), png.height()), (3 * 200 + 4, 3 * 64 + 4));

    assert_eq!(before, snapshot(&specs), "an input directory was modified");
}
