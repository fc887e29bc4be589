use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use moldiff_cli::config::RunConfig;

const BIN: &str = env!("CARGO_BIN_EXE_moldiff");

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name)
}

/// A small, fast configuration writing into `dir/out`.
fn tiny_config(dir: &Path) -> PathBuf {
    let mut cfg = RunConfig::default();
    cfg.output_dir = PathBuf::from("out");
    cfg.progress_every = 0;
    cfg.data.pretrain = fixture("overfit16.csv");
    cfg.data.finetune = fixture("corpus100.csv");
    cfg.train.steps = 6;
    cfg.finetune.steps = 6;
    cfg.model.encoder.n_layers = 1;
    cfg.model.encoder.d_model = 16;
    cfg.model.encoder.ff_width = 16;
    cfg.model.decoder = cfg.model.encoder.clone();
    cfg.model.denoiser.hidden = 16;
    cfg.model.denoiser.time_embed_dim = 8;
    cfg.model.latent_dim = 4;
    cfg.model.schedule.steps = 10;
    let path = dir.join("run.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    path
}

fn moldiff(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("MOLDIFF_OUT_DIR")
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn printed_default_parses_to_default() {
    let text = ok(&moldiff(&["config", "--print-default"]));
    assert_eq!(RunConfig::from_toml(&text).unwrap(), RunConfig::default());
    assert!(text.contains("# Weight of the squared-error term."));
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(moldiff(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(moldiff(&["pretrain"]).status.code(), Some(2));
}

#[test]
fn missing_dataset_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = tiny_config(dir.path());
    let mut cfg = RunConfig::load(&cfg_path).unwrap();
    cfg.data.pretrain = dir.path().join("nowhere.csv");
    std::fs::write(&cfg_path, cfg.to_toml()).unwrap();
    let out = moldiff(&["pretrain", "-c", s(&cfg_path)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere.csv"));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn check_passes_and_detects_a_corrupted_table() {
    let out = moldiff(&["check"]);
    let report = ok(&out);
    assert!(
        report.lines().skip(1).all(|l| l.starts_with("PASS,")),
        "{report}"
    );
    assert!(report.contains("finite differences (encoder)"));
    let out = moldiff(&["check", "--corrupt-alpha-bar", "7"]);
    assert_eq!(out.status.code(), Some(1));
    let report = String::from_utf8_lossy(&out.stdout);
    assert!(
        report
            .lines()
            .any(|l| l.starts_with("FAIL,") && l.contains("product")),
        "{report}"
    );
    assert!(String::from_utf8_lossy(&out.stderr).contains("failed checks"));
}

#[test]
fn full_pipeline_round() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out_dir = dir.path().join("out");
    ok(&moldiff(&["pretrain", "-c", s(&cfg)]));
    for f in [
        "pretrain.ckpt",
        "pretrain_metrics.csv",
        "pretrain_meta.toml",
        "pretrain_rejects.csv",
    ] {
        assert!(out_dir.join(f).is_file(), "{f}");
    }
    let metrics = std::fs::read_to_string(out_dir.join("pretrain_metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,recon,prior_kl,denoise,elbo,grad_norm\n1,"));
    assert_eq!(metrics.lines().count(), 7);

    // Rerun: identical metrics and checkpoint; metadata carries timestamps.
    let ckpt = std::fs::read(out_dir.join("pretrain.ckpt")).unwrap();
    ok(&moldiff(&["pretrain", "-c", s(&cfg)]));
    assert_eq!(
        std::fs::read_to_string(out_dir.join("pretrain_metrics.csv")).unwrap(),
        metrics
    );
    assert_eq!(std::fs::read(out_dir.join("pretrain.ckpt")).unwrap(), ckpt);
    let meta = std::fs::read_to_string(out_dir.join("pretrain_meta.toml")).unwrap();
    assert!(meta.contains("started_unix") && meta.contains("sha256 = "));

    // Sequential execution reproduces the same log.
    let seq = dir.path().join("seq");
    let out = Command::new(BIN)
        .args(["--sequential", "pretrain", "-c", s(&cfg)])
        .env("MOLDIFF_OUT_DIR", &seq)
        .output()
        .unwrap();
    ok(&out);
    assert_eq!(
        std::fs::read_to_string(seq.join("pretrain_metrics.csv")).unwrap(),
        metrics
    );

    let table = ok(&moldiff(&["finetune", "-c", s(&cfg)]));
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "dataset,split,model,mse");
    assert_eq!(lines.len(), 5);
    assert!(lines[2].starts_with("corpus100,test,finetuned,"));
    assert_eq!(
        std::fs::read_to_string(out_dir.join("eval.csv")).unwrap(),
        table
    );
    let eval = ok(&moldiff(&["eval", "-c", s(&cfg)]));
    assert_eq!(
        eval.lines().take(3).collect::<Vec<_>>(),
        lines[..3].to_vec()
    );

    // Encoding: one row per molecule, 1 + d columns, stable across runs.
    let input = dir.path().join("in.csv");
    std::fs::write(&input, "smiles\nCCO\nc1ccccc1\nCCO\nC1CC\n").unwrap();
    let latents = out_dir.join("latents.csv");
    ok(&moldiff(&["encode", "-c", s(&cfg), "-i", s(&input)]));
    let first = std::fs::read_to_string(&latents).unwrap();
    ok(&moldiff(&["encode", "-c", s(&cfg), "-i", s(&input)]));
    assert_eq!(std::fs::read_to_string(&latents).unwrap(), first);
    let rows: Vec<&str> = first.lines().collect();
    assert_eq!(rows[0], "smiles,z1_1,z1_2,z1_3,z1_4");
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[1].split(',').count(), 5);
    assert_eq!(rows[1], rows[3]);
    let rejects = std::fs::read_to_string(out_dir.join("encode_rejects.csv")).unwrap();
    assert!(rejects.contains("5,C1CC,"));

    // Sampling.
    let empty = ok(&moldiff(&["sample", "-c", s(&cfg), "-n", "0", "-o", "-"]));
    assert_eq!(empty, "smiles\n");
    let a = ok(&moldiff(&[
        "sample",
        "-c",
        s(&cfg),
        "-n",
        "30",
        "--seed",
        "3",
        "-o",
        "-",
    ]));
    let b = ok(&moldiff(&[
        "sample",
        "-c",
        s(&cfg),
        "-n",
        "30",
        "--seed",
        "3",
        "-o",
        "-",
    ]));
    assert_eq!(a, b);
    let codec = moldiff::smiles::SmilesCodec::default();
    assert_eq!(a.lines().count(), 31);
    for line in a.lines().skip(1) {
        codec.parse(line.trim_matches('"')).unwrap();
    }
}

#[test]
fn bad_checkpoints_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out_dir = dir.path().join("out");
    ok(&moldiff(&["pretrain", "-c", s(&cfg)]));

    let ckpt = out_dir.join("pretrain.ckpt");
    let mut bytes = std::fs::read(&ckpt).unwrap();
    let cut = dir.path().join("cut.ckpt");
    std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    let out = moldiff(&["finetune", "-c", s(&cfg), "--checkpoint", s(&cut)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checksum"));
    let n = bytes.len();
    bytes[n - 40] ^= 1;
    std::fs::write(&cut, &bytes).unwrap();
    assert_eq!(
        moldiff(&["finetune", "-c", s(&cfg), "--checkpoint", s(&cut)])
            .status
            .code(),
        Some(2)
    );
    assert!(!out_dir.join("finetune.ckpt").exists());
    assert!(!out_dir.join("eval.csv").exists());

    // Same file, different architecture.
    let mut other = RunConfig::load(&cfg).unwrap();
    other.model.latent_dim = 5;
    other.output_dir = out_dir.clone();
    let other_path = dir.path().join("other.toml");
    std::fs::write(&other_path, other.to_toml()).unwrap();
    let out = moldiff(&["sample", "-c", s(&other_path), "-n", "1", "-o", "-"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("incompatible checkpoint"));
}

#[test]
fn output_dir_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let elsewhere = dir.path().join("elsewhere");
    let out = Command::new(BIN)
        .args(["pretrain", "-c", s(&cfg)])
        .env("MOLDIFF_OUT_DIR", &elsewhere)
        .output()
        .unwrap();
    ok(&out);
    assert!(elsewhere.join("pretrain.ckpt").is_file());
    assert!(!dir.path().join("out").exists());
}
