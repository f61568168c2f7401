use std::path::Path;
use std::process::{Command, Output};

fn xdlm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xdlm"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = xdlm(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(dir: &Path, args: &[&str]) -> String {
    let out = xdlm(dir, args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("error: "), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    err
}

/// Copy corpus, tokenizer, and a few fine-tuning steps on a narrow model.
fn pipeline(dir: &Path) {
    ok(dir, &["prepare", "--synth", "copy", "--n-pairs", "120", "--held-out", "12", "--max-len", "5", "--out", "data"]);
    ok(dir, &["bpe-train", "--data", "data/train", "--merges", "0", "--out", "tok"]);
    ok(
        dir,
        &[
            "finetune", "--data", "data/train", "--tokenizer", "tok", "--from-scratch", "--steps", "6",
            "--set", "model.hidden=16", "--set", "model.ffn_dim=32", "--set", "model.n_heads=2",
            "--set", "train.diffusion_steps=6", "--set", "decode.n_iterations=6", "--out", "run",
        ],
    );
}

#[test]
fn full_pipeline_and_reproduction() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    pipeline(d);
    for f in ["data/train.src", "data/test.tgt", "tok/vocab.txt", "run/final.safetensors", "run/trace.csv", "run/config.toml"] {
        assert!(d.join(f).exists(), "{f}");
    }

    let hyps = ok(d, &["generate", "--config", "run/config.toml", "--checkpoint", "run/final.safetensors", "--input", "data/test.src", "--iterations", "1"]);
    assert_eq!(hyps.lines().count(), 12);
    assert!(hyps.lines().all(|l| !l.trim().is_empty() && !l.contains("<mask>")));

    ok(d, &["generate", "--config", "run/config.toml", "--checkpoint", "run/final.safetensors", "--input", "data/test.src", "--output", "hyp.txt", "--trace", "trace.txt"]);
    assert!(d.join("hyp.txt.config.toml").exists());
    let trace = std::fs::read_to_string(d.join("trace.txt")).unwrap();
    assert!(trace.starts_with("# 1 "));
    assert_eq!(trace.lines().filter(|l| l.starts_with("t=")).count(), 12 * 7);

    let report = ok(d, &["evaluate", "--hyp", "hyp.txt", "--ref", "data/test.tgt", "--tokenizer", "tok", "--mode", "both"]);
    assert!(report.contains("BLEU(word)=") && report.contains("BLEU(bpe)=") && !report.contains("n/a"), "{report}");

    let sweep = ok(d, &["sweep", "--config", "run/config.toml", "--checkpoint", "run/final.safetensors", "--test", "data/test", "--iterations", "1,2,6", "--out", "sw"]);
    assert_eq!(sweep.lines().count(), 4);
    assert!(d.join("sw/schedule.csv").exists());

    // Re-running from the snapshot reproduces the run bit for bit.
    ok(d, &["finetune", "--config", "run/config.toml", "--log-every", "0", "--out", "again"]);
    let hash = |p: &str| {
        let meta = std::fs::read_to_string(d.join(p)).unwrap();
        meta.lines().find(|l| l.contains("param_hash")).unwrap().to_string()
    };
    assert_eq!(hash("run/final.json"), hash("again/final.json"));
    assert_eq!(
        std::fs::read(d.join("run/trace.csv")).unwrap(),
        std::fs::read(d.join("again/trace.csv")).unwrap()
    );
}

#[test]
fn guards_and_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    pipeline(d);
    let e = fails(d, &["finetune", "--data", "data/train", "--tokenizer", "tok", "--out", "x"]);
    assert!(e.contains("--from-scratch"), "{e}");
    fails(d, &["generate", "--no-such-flag"]);
    let e = fails(d, &["evaluate", "--hyp", "missing.txt", "--ref", "data/test.tgt", "--mode", "word"]);
    assert!(e.contains("missing.txt"));
    fails(d, &["pretrain", "--data", "nowhere/train", "--tokenizer", "tok", "--out", "x"]);
    fails(d, &["finetune", "--config", "run/config.toml", "--set", "train.seed=4", "--out", "x"]);

    ok(d, &["prepare", "--synth", "mapping", "--n-pairs", "40", "--held-out", "0", "--out", "map"]);
    ok(d, &["bpe-train", "--data", "map/train", "--out", "tok2"]);
    let e = fails(d, &["generate", "--checkpoint", "run/final.safetensors", "--tokenizer", "tok2", "--input", "map/train.src"]);
    assert!(e.contains("vocabulary hash mismatch"), "{e}");
}

#[test]
fn pretrain_then_finetune_from_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    pipeline(d);
    ok(d, &["prepare", "--synth", "copy", "--seed", "3", "--n-pairs", "60", "--held-out", "0", "--max-len", "5", "--out", "mix"]);
    ok(d, &["pretrain", "--config", "run/config.toml", "--data", "mix/train", "--reversed-data", "data/train", "--steps", "3", "--out", "pre"]);
    ok(d, &["finetune", "--config", "run/config.toml", "--set", "data.from_scratch=false", "--init-checkpoint", "pre/final.safetensors", "--steps", "2", "--out", "ft"]);
    assert!(d.join("ft/final.safetensors").exists());
}

#[test]
fn oracle_check_default_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(tmp.path(), &["oracle-check"]);
    assert!(out.contains("violations=0"), "{out}");
    let out = xdlm(tmp.path(), &["oracle-check", "--tolerance", "0", "--max-vocab", "2", "--max-len", "1", "--max-steps", "1"]);
    assert!(!out.status.success());
}
