use std::fs;
use std::path::Path;
use std::process::Command;

use apnlab::augment::{PatchifyConfig, Pipeline, Stage};
use apnlab::data::{make_synthetic, Dataset};
use apnlab::harness::{
    dataset_for, parse_config, pretrain, probe, probe_features, read_steps, HarnessError, PretrainOptions, Preset,
    ProbeConfig, RunConfig,
};

fn small(preset: Preset) -> RunConfig {
    let mut cfg = RunConfig::preset(preset);
    cfg.data.n = 64;
    cfg.epochs = 2;
    cfg
}

fn quick_probe() -> ProbeConfig {
    ProbeConfig { hidden: 32, epochs: 5, ..ProbeConfig::default() }
}

fn run(cfg: &RunConfig, data: &Dataset, out: &Path) -> apnlab::harness::PretrainReport {
    pretrain(cfg, data.unlabeled(), out, &PretrainOptions::default()).unwrap()
}

#[test]
fn presets_match_golden_file() {
    let text = fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../docs/presets.golden")).unwrap();
    let mut seen = Vec::new();
    for block in text.split("### preset: ").skip(1) {
        let (name, body) = block.split_once('\n').unwrap();
        let preset = Preset::parse(name.trim()).unwrap();
        let expected: String = body
            .lines()
            .filter(|l| !l.starts_with('#'))
            .map(|l| format!("{l}\n"))
            .collect();
        let live = RunConfig::preset(preset);
        assert_eq!(live.to_text().trim_end(), expected.trim_end(), "preset {name}");
        assert_eq!(parse_config(body).unwrap(), live, "golden block of {name} parses back to the preset");
        seen.push(preset);
    }
    for p in [Preset::Amdim, Preset::Cpc, Preset::Simclr, Preset::Yadim] {
        assert!(seen.contains(&p), "{} missing from golden file", p.name());
    }
}

#[test]
fn every_preset_trains_a_step() {
    for p in [Preset::Amdim, Preset::Cpc, Preset::Simclr, Preset::Yadim] {
        let mut cfg = small(p);
        cfg.epochs = 1;
        cfg.data.n = 16;
        cfg.batch_size = 8;
        let dir = tempfile::tempdir().unwrap();
        let r = run(&cfg, &dataset_for(&cfg).unwrap(), dir.path());
        assert_eq!(r.step_losses.len(), 2, "{}", p.name());
        assert!(r.step_losses.iter().all(|v| v.is_finite()));
        assert!(dir.path().join("ckpt.bin").exists() && dir.path().join("ckpt_best.bin").exists());
        assert!(dir.path().join("resolved.cfg").exists());
    }
}

#[test]
fn zero_learning_rate_keeps_loss_constant() {
    let mut cfg = small(Preset::Yadim);
    cfg.data.n = 32;
    cfg.batch_size = 32;
    cfg.epochs = 4;
    cfg.optimizer.lr = 0.0;
    cfg.pipeline = Pipeline::new(vec![Stage::ZNormalize, Stage::Patchify(PatchifyConfig::new(8, 0).unwrap())]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let r = run(&cfg, &dataset_for(&cfg).unwrap(), dir.path());
    let first = r.step_losses[0];
    for v in &r.step_losses {
        assert!((v - first).abs() <= 1e-5 * first.abs(), "{:?}", r.step_losses);
    }
}

#[test]
fn resume_reproduces_losses_bit_for_bit() {
    let mut cfg = small(Preset::Yadim);
    cfg.epochs = 4;
    let data = dataset_for(&cfg).unwrap();
    let (full, split) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run(&cfg, &data, full.path());
    let mut first = cfg.clone();
    first.epochs = 2;
    run(&first, &data, split.path());
    let opts = PretrainOptions { resume: Some(split.path().join("ckpt.bin")), verbose: false };
    let resumed = pretrain(&cfg, data.unlabeled(), split.path(), &opts).unwrap();
    assert_eq!(resumed.epoch_losses.len(), 2);
    let (a, b) = (read_steps(full.path()).unwrap(), read_steps(split.path()).unwrap());
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
    for f in ["metrics.csv", "steps.csv", "ckpt.bin"] {
        assert_eq!(fs::read(full.path().join(f)).unwrap(), fs::read(split.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn two_shards_match_one_shard() {
    for p in [Preset::Yadim, Preset::Cpc, Preset::Simclr] {
        let cfg = small(p);
        let data = dataset_for(&cfg).unwrap();
        let (one, two) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let a = run(&cfg, &data, one.path());
        let b = run(&RunConfig { shards: 2, ..cfg.clone() }, &data, two.path());
        for (x, y) in a.step_losses.iter().zip(&b.step_losses) {
            assert!((x - y).abs() <= 1e-5, "{}: {x} vs {y}", p.name());
        }
    }
}

#[test]
fn metrics_are_reproducible_and_labels_unreachable() {
    let cfg = small(Preset::Yadim);
    let data = dataset_for(&cfg).unwrap();
    let mut labels = data.labels().unwrap().to_vec();
    labels.rotate_left(5);
    let permuted = data.with_labels(labels).unwrap();
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run(&cfg, &data, a.path());
    run(&cfg, &data, b.path());
    run(&cfg, &permuted, c.path());
    let read = |d: &tempfile::TempDir, f: &str| fs::read(d.path().join(f)).unwrap();
    assert_eq!(read(&a, "metrics.csv"), read(&b, "metrics.csv"));
    assert_eq!(read(&a, "ckpt.bin"), read(&c, "ckpt.bin"));
    let metrics = String::from_utf8(read(&a, "metrics.csv")).unwrap();
    assert!(metrics.starts_with("run_id,epoch,step,loss,wall_ms,shard_count\n"));
    assert_eq!(metrics.lines().count(), 1 + cfg.epochs);
}

#[test]
fn divergence_is_reported_with_position() {
    let mut cfg = small(Preset::Yadim);
    cfg.optimizer.lr = 1e6;
    cfg.epochs = 5;
    let dir = tempfile::tempdir().unwrap();
    match pretrain(&cfg, dataset_for(&cfg).unwrap().unlabeled(), dir.path(), &PretrainOptions::default()) {
        Err(HarnessError::Diverged { epoch, .. }) => {
            assert!(epoch >= 1);
            assert!(dir.path().join("diverged.txt").exists());
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn one_hot_features_probe_perfectly() {
    let labels: Vec<usize> = (0..120).map(|i| i % 3).collect();
    let features: Vec<Vec<f64>> = labels.iter().map(|&y| (0..3).map(|c| f64::from(u8::from(c == y))).collect()).collect();
    let r = probe_features(&features, &labels, &ProbeConfig { epochs: 20, ..ProbeConfig::default() }).unwrap();
    assert_eq!(r.accuracy, 1.0);
}

#[test]
fn single_class_probe_is_trivially_perfect() {
    let mut cfg = small(Preset::Yadim);
    cfg.data.classes = 1;
    let data = dataset_for(&cfg).unwrap();
    assert_eq!(probe(&cfg, None, &data, &quick_probe()).unwrap().accuracy, 1.0);
}

#[test]
fn probe_needs_labels_and_leaves_encoder_untouched() {
    let cfg = small(Preset::Yadim);
    let data = dataset_for(&cfg).unwrap();
    let images = (0..data.len()).map(|i| data.image(i).to_vec()).collect();
    let unlabeled = Dataset::new("bare", data.shape, images, None).unwrap();
    assert!(probe(&cfg, None, &unlabeled, &quick_probe()).is_err());

    let dir = tempfile::tempdir().unwrap();
    run(&cfg, &data, dir.path());
    let ckpt = dir.path().join("ckpt.bin");
    let before = fs::read(&ckpt).unwrap();
    let a = probe(&cfg, Some(&ckpt), &data, &quick_probe()).unwrap();
    let b = probe(&cfg, Some(&ckpt), &data, &quick_probe()).unwrap();
    assert_eq!(a, b);
    assert_eq!(before, fs::read(&ckpt).unwrap());
    assert!((0.0..=1.0).contains(&a.accuracy));
}

#[test]
fn synthetic_data_is_deterministic() {
    let a = make_synthetic(40, 2, 3, 16, 16, 0.7, 3).unwrap();
    let b = make_synthetic(40, 2, 3, 16, 16, 0.7, 3).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
    assert!(make_synthetic(3, 2, 3, 16, 16, 0.7, 3).is_err());
}

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_apnlab"))
}

fn write_small_config(dir: &Path, preset: &str) -> std::path::PathBuf {
    let path = dir.join("run.cfg");
    fs::write(&path, format!("[run]\npreset = {preset}\nepochs = 1\n\n[data]\nn = 32\n")).unwrap();
    path
}

#[test]
fn cli_rejects_unknown_flags_with_usage() {
    let out = cli().args(["pretrain", "--no-such-flag"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    let out = cli().arg("frobnicate").output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn cli_pretrain_writes_metrics_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_small_config(dir.path(), "yadim");
    let out_dir = dir.path().join("out");
    let out = cli()
        .args(["pretrain", "--preset", "yadim", "--config"])
        .arg(&cfg)
        .arg("--quiet")
        .env("APN_LAB_OUT", &out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("metrics.csv").exists() && out_dir.join("ckpt.bin").exists());

    let out = cli().args(["probe", "--config"]).arg(&cfg).args(["--quiet"]).env("APN_LAB_OUT", &out_dir).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("test accuracy"));
}

#[test]
fn cli_ablate_emits_one_row_per_strategy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_small_config(dir.path(), "amdim");
    let out = cli()
        .args(["ablate", "--strategies", "last_only;amdim;-1:-2,-2:-2", "--quiet", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("abl"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("abl/ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4, "{csv}");
}

#[test]
fn cli_grad_check_and_oracle_pass() {
    for cmd in ["grad-check", "oracle"] {
        let out = cli().arg(cmd).output().unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    }
}
