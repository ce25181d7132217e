use std::fs;

use sbuf_cli::{cmd_enhance, cmd_sweep, cmd_synth, cmd_train, cmd_verify, CSV_FILE, MANIFEST_FILE};
use sbuf_core::metrics::si_sdr;
use sbuf_core::nets::GeneratorConfig;
use sbuf_core::signal::io::{read_wav, write_wav};
use sbuf_core::train::data::{DataConfig, SynthDataConfig};
use sbuf_core::verify::VerifyOptions;
use sbuf_core::{ExperimentConfig, SamplerMode};

fn small(out: &std::path::Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        seed: 5,
        out_dir: out.to_path_buf(),
        generator: GeneratorConfig { base_channels: 4, depth: 2, time_embed_dim: 8, ..Default::default() },
        data: DataConfig::Synth(SynthDataConfig { segment: 512, test_items: 4, test_len: 1024, ..Default::default() }),
        ..Default::default()
    };
    cfg.discriminator.channels = 4;
    cfg.train.batch_size = 2;
    cfg.train.total_steps = 3;
    cfg.train.checkpoint_every = 2;
    cfg.train.log_every = 1;
    cfg.eval.steps = vec![1, 2];
    cfg
}

#[test]
fn verify_report_is_stable_and_negative_control_fails() {
    let mut a = Vec::new();
    let mut b = Vec::new();
    assert!(cmd_verify(&VerifyOptions::default(), &mut a).unwrap());
    assert!(cmd_verify(&VerifyOptions::default(), &mut b).unwrap());
    assert_eq!(a, b);
    let mut c = Vec::new();
    assert!(!cmd_verify(&VerifyOptions { seed: 0, corrupt_w_y: true }, &mut c).unwrap());
    let text = String::from_utf8(c).unwrap();
    assert!(text.contains("FAIL schedule.transition_of_marginal"));
}

#[test]
fn synth_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = small(&dir.path().join("a"));
    let b = small(&dir.path().join("b"));
    cmd_synth(&a).unwrap();
    cmd_synth(&b).unwrap();
    let read = |p: &std::path::Path| fs::read(p).unwrap();
    assert_eq!(read(&a.out_dir.join(MANIFEST_FILE)), read(&b.out_dir.join(MANIFEST_FILE)));
    for i in 0..4 {
        for sub in ["clean", "degraded"] {
            let rel = format!("{sub}/item{i:04}.wav");
            assert_eq!(read(&a.out_dir.join(&rel)), read(&b.out_dir.join(&rel)));
        }
    }
}

#[test]
fn identity_debug_checkpoint_returns_input() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let ck = cmd_train(&cfg, true).unwrap();
    let input = dir.path().join("in.wav");
    let samples: Vec<f64> = (0..3000).map(|i| 0.25 * (i as f64 * 0.03).sin()).collect();
    write_wav(&input, &samples, 8000).unwrap();
    let output = dir.path().join("out/enhanced.wav");
    let calls = cmd_enhance(&ck, &input, &output, 1, SamplerMode::Marginal, 0).unwrap();
    assert_eq!(calls, 1);
    let (y, _) = read_wav(&input).unwrap();
    let (out, sr) = read_wav(&output).unwrap();
    assert_eq!(sr, 8000);
    // Equal up to the f32 rounding of the output file.
    let err = out.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-6, "max error {err}");
}

#[test]
fn enhance_rejects_bad_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let ck = cmd_train(&cfg, true).unwrap();
    let input = dir.path().join("in.wav");
    write_wav(&input, &[0.1; 800], 16000).unwrap();
    let out = dir.path().join("out.wav");
    let err = cmd_enhance(&ck, &input, &out, 1, SamplerMode::Marginal, 0).unwrap_err();
    assert!(err.to_string().contains("16000"), "{err}");
    write_wav(&input, &[0.1; 800], 8000).unwrap();
    assert!(cmd_enhance(&ck, &input, &out, 9, SamplerMode::Marginal, 0).is_err());
    assert!(cmd_enhance(&dir.path().join("missing.sbuf"), &input, &out, 1, SamplerMode::Marginal, 0).is_err());
}

#[test]
fn train_then_sweep_writes_complete_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(&dir.path().join("run"));
    let mut data_cfg = cfg.clone();
    data_cfg.out_dir = dir.path().join("test");
    let manifest = cmd_synth(&data_cfg).unwrap();
    let ck = cmd_train(&cfg, false).unwrap();
    assert!(cfg.out_dir.join("checkpoint_0000002.sbuf").exists());
    let log = fs::read_to_string(cfg.out_dir.join(sbuf_cli::LOG_FILE)).unwrap();
    assert_eq!(log.lines().count(), 3);

    cfg.eval.plot = true;
    let out = cmd_sweep(&ck, &data_cfg.out_dir.join(MANIFEST_FILE), Some(&cfg), &dir.path().join("sweep"), 1).unwrap();
    assert_eq!(out.records.len(), 4 * 2 * 2);
    let csv = fs::read_to_string(&out.csv_path).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "item,task,snr_db,n_steps,mode,si_sdr_db,lsd_db,proc_per_sec");
    assert_eq!(csv.lines().count(), 1 + 16);
    assert!(dir.path().join("sweep/summary.json").exists());
    assert!(dir.path().join("sweep/sweep.svg").exists());

    let again = cmd_sweep(&ck, &data_cfg.out_dir.join(MANIFEST_FILE), Some(&cfg), &dir.path().join("sweep2"), 2).unwrap();
    assert_eq!(csv, fs::read_to_string(dir.path().join("sweep2").join(CSV_FILE)).unwrap());
    assert_eq!(again.records, out.records);

    // One-step outputs of a barely trained model stay close to the input.
    let first = &manifest.entries[0];
    let (clean, _) = read_wav(manifest.resolve(&first.clean)).unwrap();
    let (noisy, _) = read_wav(manifest.resolve(&first.degraded)).unwrap();
    let input_sdr = si_sdr(&noisy, &clean).unwrap();
    assert!(out.records[0].si_sdr_db.is_finite() && input_sdr.is_finite());
}

#[test]
fn sweep_requires_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let ck = cmd_train(&cfg, true).unwrap();
    assert!(cmd_sweep(&ck, &dir.path().join("nope.jsonl"), None, dir.path(), 1).is_err());
    assert!(cmd_sweep(&dir.path().join("nope.sbuf"), &dir.path().join("nope.jsonl"), None, dir.path(), 1).is_err());
}

#[test]
fn binary_reports_errors_with_nonzero_exit() {
    let bin = env!("CARGO_BIN_EXE_sbuf");
    let status = std::process::Command::new(bin)
        .args(["verify", "--corrupt-w-y"])
        .env("SBF_LOG_LEVEL", "off")
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(1));
    let bad = std::process::Command::new(bin)
        .args(["train", "--config", "/nonexistent/config.toml"])
        .env("SBF_LOG_LEVEL", "off")
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("cannot read"));
}
