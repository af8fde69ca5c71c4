use std::path::Path;

use reachsteer::harness::{self, exit_code, RunConfig};
use reachsteer::Error;

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.agent.hidden = vec![16, 16];
    cfg.agent.epochs = 2;
    cfg.agent.eval_every = 1;
    cfg.agent.eval_rollouts = 4;
    cfg.agent.rollouts_per_epoch = 4;
    cfg.target.calibration_samples = 200;
    cfg.eval.max_captions = 3;
    cfg.eval.n_seeds = 2;
    cfg
}

#[test]
fn shipped_default_config_matches_builtin_defaults() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml");
    assert_eq!(RunConfig::load(&path, &[]).unwrap(), RunConfig::default());
}

#[test]
fn missing_config_is_a_config_error_without_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let err = RunConfig::load(&dir.path().join("absent.toml"), &[]).unwrap_err();
    assert_eq!(exit_code(&err), 2);
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn bad_value_reports_line_and_override_is_applied() {
    let err = RunConfig::from_toml_str("schema_version = 1\n\n[eval]\nn_seeds = -3\n", "run.toml", &[]).unwrap_err();
    assert!(err.to_string().contains("run.toml:4:"), "{err}");
    assert_eq!(exit_code(&err), 2);
    let cfg = RunConfig::from_toml_str("schema_version = 1\n", "run.toml", &["agent.epochs=3".into()]).unwrap();
    assert_eq!(cfg.agent.epochs, 3);
    assert!(RunConfig::from_toml_str("schema_version = 1\n", "r", &["agent.gamma=1.5".into()]).is_err());
}

#[test]
fn zero_epochs_writes_the_initial_checkpoint_only() {
    let mut cfg = small_config();
    cfg.agent.epochs = 0;
    let dir = tempfile::tempdir().unwrap();
    let s = harness::cmd_train(&cfg, 3, dir.path()).unwrap();
    assert_eq!(s.epochs_run, 0);
    assert!(s.best_epoch.is_none());
    assert!(dir.path().join(harness::FINAL_CHECKPOINT).exists());
    assert!(!dir.path().join(harness::BEST_CHECKPOINT).exists());
    let log = std::fs::read_to_string(dir.path().join(harness::TRAIN_LOG)).unwrap();
    assert_eq!(log.lines().count(), 1);
}

#[test]
fn training_artifacts_and_log_records() {
    let cfg = small_config();
    let dir = tempfile::tempdir().unwrap();
    let s = harness::cmd_train(&cfg, 1, dir.path()).unwrap();
    assert_eq!(s.epochs_run, 2);
    assert_eq!(s.lambda_history.len(), 2);
    assert!(s.lambda_history.iter().all(|l| *l >= 0.0));
    for f in [
        harness::FINAL_CHECKPOINT,
        harness::BEST_CHECKPOINT,
        harness::BEST_MARKER,
        harness::RESOLVED_CONFIG,
        harness::CODEC_FILE,
    ] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let log = std::fs::read_to_string(dir.path().join(harness::TRAIN_LOG)).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0]["version"].is_number());
    for (i, rec) in lines[1..].iter().enumerate() {
        assert_eq!(rec["epoch"], i);
        assert!(rec["lambda"].as_f64().unwrap() >= 0.0);
        assert!(rec["alpha"].as_f64().unwrap() > 0.0);
        assert!(rec["eval"]["failure_rate"].is_number());
    }
    // The resolved config reloads and pins the threshold.
    let resolved = RunConfig::load(&dir.path().join(harness::RESOLVED_CONFIG), &[]).unwrap();
    assert!(resolved.target.beta.is_some());
    assert_eq!(resolved.seeds, vec![1]);

    let eval_dir = dir.path().join("eval");
    let ev = harness::cmd_eval(&cfg, Some(&dir.path().join(harness::BEST_CHECKPOINT)), Some(1), &eval_dir).unwrap();
    assert!(ev.report.diversity_seeds.is_none());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval_dir.join(harness::EVAL_REPORT)).unwrap()).unwrap();
    assert!(report["diversity_seeds"].is_null());
    let csv = std::fs::read_to_string(eval_dir.join(harness::TRACE_FILE)).unwrap();
    let rows = harness::io::parse_trace_csv(&csv).unwrap();
    assert_eq!(rows.len(), 3 * (cfg.scenario.horizon + 1));
}

#[test]
fn unsteered_baseline_fails_on_triggered_captions() {
    let cfg = small_config();
    let dir = tempfile::tempdir().unwrap();
    let ev = harness::cmd_eval(&cfg, None, None, dir.path()).unwrap();
    assert!(ev.report.failure_rate > 0.95);
    assert!(ev.report.diversity_seeds.is_some());
}

#[test]
fn mismatched_checkpoint_is_rejected() {
    let cfg = small_config();
    let dir = tempfile::tempdir().unwrap();
    let mut zero = cfg.clone();
    zero.agent.epochs = 0;
    harness::cmd_train(&zero, 0, dir.path()).unwrap();
    let mut other = cfg.clone();
    other.scenario.embed_dim = 6;
    let err = harness::cmd_eval(&other, Some(&dir.path().join(harness::FINAL_CHECKPOINT)), None, &dir.path().join("e"))
        .unwrap_err();
    assert!(matches!(err, Error::Checkpoint(_)), "{err}");
    assert_eq!(exit_code(&err), 4);

    std::fs::write(dir.path().join("junk.ckpt"), b"not a checkpoint").unwrap();
    let err = harness::cmd_eval(&cfg, Some(&dir.path().join("junk.ckpt")), None, &dir.path().join("e")).unwrap_err();
    assert_eq!(exit_code(&err), 4);
}

#[test]
fn oracle_refuses_the_stochastic_sampler() {
    let mut cfg = small_config();
    let mut env = cfg.env_config().unwrap();
    env.noise_mode = reachsteer::dynamics::NoiseMode::Ddpm;
    cfg.env = Some(env);
    cfg.oracle.points_per_axis = 9;
    let dir = tempfile::tempdir().unwrap();
    let err = harness::cmd_oracle(&cfg, None, dir.path()).unwrap_err();
    assert!(matches!(err, Error::Unsupported(_)));
    assert!(!dir.path().join("brt.bin").exists());
}

#[test]
fn oracle_writes_grid_and_report() {
    let mut cfg = small_config();
    cfg.oracle.points_per_axis = 11;
    cfg.oracle.refine_levels = 1;
    let dir = tempfile::tempdir().unwrap();
    let rep = harness::cmd_oracle(&cfg, None, dir.path()).unwrap();
    assert_eq!(rep.actions, 9);
    assert_eq!(rep.brt_fraction.len(), cfg.scenario.horizon + 1);
    assert!(rep.agreement.is_none());
    assert_eq!(rep.refinement.as_ref().unwrap().len(), 2);
    let back = reachsteer::reachability::BrtGrid::load(&dir.path().join("brt")).unwrap();
    assert_eq!(back.brt_fraction(), rep.brt_fraction);
}

#[test]
fn ablation_arms_share_initialization() {
    let mut cfg = small_config();
    cfg.agent.epochs = 1;
    let dir = tempfile::tempdir().unwrap();
    let rep = harness::cmd_ablate(&cfg, 4, dir.path()).unwrap();
    assert!(rep.ablation.train.lambda_history.iter().all(|&l| l == 0.0));
    assert!(dir.path().join("ablation_report.json").exists());
    assert!(dir.path().join("baseline").join(harness::TRACE_FILE).exists());

    // With no epochs, both arms' checkpoints hold the same weights.
    let mut zero = cfg.clone();
    zero.agent.epochs = 0;
    let a = tempfile::tempdir().unwrap();
    harness::cmd_train(&zero, 4, a.path()).unwrap();
    zero.agent.freeze_lambda = true;
    let b = tempfile::tempdir().unwrap();
    harness::cmd_train(&zero, 4, b.path()).unwrap();
    let load = |d: &Path| {
        let ck = reachsteer::approximator::Checkpoint::load(&d.join(harness::FINAL_CHECKPOINT)).unwrap();
        reachsteer::agent::AgentBundle::from_checkpoint(&ck).unwrap()
    };
    let (ia, ib) = (load(a.path()), load(b.path()));
    assert_eq!(ia.actor, ib.actor);
    assert_eq!(ia.q1, ib.q1);
    assert_eq!(ia.q_safe, ib.q_safe);
}
