use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::{RunConfig, Setup};
use super::io::{self, jsonl, trace_csv, versioned_json, LOG_FORMAT, REPORT_VERSION};
use crate::agent::{train, ActionMode, AgentBundle, EpochRecord, PolicyActor, TrainStatus};
use crate::approximator::Checkpoint;
use crate::dynamics::{ActionSource, CaptionEmbedding, SystemState, ZeroAction};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, mean_guidance_by_step, EvalReport, Evaluation};
use crate::reachability::{
    compute_brt_oracle, refinement_study, sign_agreement, BrtGrid, GridSpec, OracleOptions,
    RefinementStep,
};

pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const BEST_MARKER: &str = "best_epoch.json";
pub const RESOLVED_CONFIG: &str = "config.resolved.toml";
pub const CODEC_FILE: &str = "codec.json";
pub const EVAL_REPORT: &str = "eval_report.json";
pub const TRACE_FILE: &str = "trace.csv";
pub const ROLLOUT_FILE: &str = "rollouts.csv";

/// Process exit status for an error: 2 configuration, 3 numeric divergence,
/// 4 incompatible checkpoint, 1 anything else.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Divergence(_) | Error::NonFinite(_) => 3,
        Error::Checkpoint(_) => 4,
        _ => 1,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub seed: u64,
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub best_score: Option<f64>,
    #[serde(flatten)]
    pub status: TrainStatus,
    pub lambda_history: Vec<f64>,
}

#[derive(Serialize)]
struct LogHeader<'a> {
    format: &'a str,
    version: u32,
    seed: u64,
    epochs: usize,
    freeze_lambda: bool,
}

fn prepare_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    Ok(())
}

/// Config as it was actually used: fixed seed, threshold and codec source.
fn resolved_config(cfg: &RunConfig, setup: &Setup, seed: u64) -> RunConfig {
    let mut r = cfg.clone();
    r.seeds = vec![seed];
    r.target.beta = Some(setup.target.beta);
    r
}

/// Trains one agent and writes its artifacts into `out`.
///
/// Writes the resolved config, the codec, the final checkpoint, the JSON-lines
/// training log and, once an evaluation has run, the best-epoch checkpoint and
/// marker. A diverged run still writes everything it has and then reports
/// `Error::Divergence`.
pub fn cmd_train(cfg: &RunConfig, seed: u64, out: &Path) -> Result<TrainSummary> {
    let setup = Setup::from_config(cfg)?;
    let captions = setup.captions(cfg.train.captions);
    prepare_out(out)?;
    io::write(&out.join(RESOLVED_CONFIG), resolved_config(cfg, &setup, seed).to_toml_string()?)?;
    io::write(&out.join(CODEC_FILE), setup.codec.to_json()?)?;

    let outcome = train(&setup.env, &setup.codec, &setup.target, &cfg.agent, &captions, seed)?;
    outcome.bundle.to_checkpoint().save(&out.join(FINAL_CHECKPOINT))?;
    let header = LogHeader {
        format: LOG_FORMAT,
        version: REPORT_VERSION,
        seed,
        epochs: cfg.agent.epochs,
        freeze_lambda: cfg.agent.freeze_lambda,
    };
    io::write(&out.join(TRAIN_LOG), jsonl(&header, &outcome.log)?)?;
    let summary = TrainSummary {
        seed,
        epochs_run: outcome.log.len(),
        best_epoch: outcome.best_epoch,
        best_score: outcome.best_score,
        status: outcome.status.clone(),
        lambda_history: outcome.log.iter().map(|r: &EpochRecord| r.lambda).collect(),
    };
    if outcome.best_epoch.is_some() {
        outcome.best.to_checkpoint().save(&out.join(BEST_CHECKPOINT))?;
        io::write(&out.join(BEST_MARKER), versioned_json("reachsteer-best-epoch", &summary)?)?;
    }
    match &outcome.status {
        TrainStatus::Completed => Ok(summary),
        TrainStatus::Diverged { epoch, message } => Err(Error::Divergence(format!(
            "training diverged in epoch {epoch}: {message} (checkpoint written to {})",
            out.join(FINAL_CHECKPOINT).display()
        ))),
    }
}

/// Loads an agent checkpoint and checks it against the environment.
pub fn load_agent(path: &Path, setup: &Setup) -> Result<AgentBundle> {
    let ck = Checkpoint::load(path).map_err(|e| match e {
        Error::Io(io) => Error::Checkpoint(format!("{}: {io}", path.display())),
        other => other,
    })?;
    let bundle = AgentBundle::from_checkpoint(&ck)?;
    let (obs, act) = (setup.env.observation_dim(), setup.env.config().action_dim);
    if bundle.obs_dim != obs || bundle.action_dim != act {
        return Err(Error::Checkpoint(format!(
            "checkpoint expects observation/action dims {}/{}, environment has {obs}/{act}",
            bundle.obs_dim, bundle.action_dim
        )));
    }
    Ok(bundle)
}

fn eval_captions(cfg: &RunConfig, setup: &Setup) -> Vec<CaptionEmbedding> {
    let mut caps = setup.captions(cfg.eval.captions);
    if cfg.eval.max_captions > 0 {
        caps.truncate(cfg.eval.max_captions);
    }
    caps
}

fn write_evaluation(ev: &Evaluation, out: &Path) -> Result<()> {
    prepare_out(out)?;
    io::write(&out.join(EVAL_REPORT), versioned_json("reachsteer-eval", &ev.report)?)?;
    io::write(&out.join(ROLLOUT_FILE), io::rollout_csv(&ev.rollouts))?;
    io::write(&out.join(TRACE_FILE), trace_csv(&ev.traces))?;
    Ok(())
}

/// Evaluates a checkpoint (or the unsteered sampler when `checkpoint` is
/// `None`) with `n_seeds` initializations per caption.
pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    n_seeds: Option<usize>,
    out: &Path,
) -> Result<Evaluation> {
    let setup = Setup::from_config(cfg)?;
    let bundle = checkpoint.map(|p| load_agent(p, &setup)).transpose()?;
    let ev = run_eval(cfg, &setup, bundle.as_ref(), n_seeds.unwrap_or(cfg.eval.n_seeds), cfg.eval.base_seed)?;
    write_evaluation(&ev, out)?;
    Ok(ev)
}

/// Evaluation without writing files.
pub fn run_eval(
    cfg: &RunConfig,
    setup: &Setup,
    bundle: Option<&AgentBundle>,
    n_seeds: usize,
    base_seed: u64,
) -> Result<Evaluation> {
    let caps = eval_captions(cfg, setup);
    let zero = ZeroAction {
        dim: setup.env.config().action_dim,
    };
    let actor;
    let policy: &(dyn ActionSource + Sync) = match bundle {
        Some(b) => {
            actor = PolicyActor {
                net: &b.actor,
                mode: ActionMode::Deterministic,
            };
            &actor
        }
        None => &zero,
    };
    evaluate(policy, &setup.env, &setup.codec, &setup.target, &caps, n_seeds, base_seed)
}

#[derive(Debug, Clone, Serialize)]
pub struct ArmReport {
    pub train: TrainSummary,
    pub eval: EvalReport,
    pub mean_guidance_by_step: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub seed: u64,
    pub constrained: ArmReport,
    pub ablation: ArmReport,
    pub baseline: EvalReport,
    pub baseline_mean_guidance_by_step: Vec<f64>,
}

/// Trains the constrained agent and the multiplier-frozen ablation from the
/// same seed, evaluates both best checkpoints and the unsteered baseline, and
/// writes a side-by-side report.
pub fn cmd_ablate(cfg: &RunConfig, seed: u64, out: &Path) -> Result<AblationReport> {
    let setup = Setup::from_config(cfg)?;
    prepare_out(out)?;
    let mut arms = Vec::new();
    for (name, frozen) in [("constrained", false), ("ablation", true)] {
        let mut arm_cfg = cfg.clone();
        if frozen {
            arm_cfg.agent.freeze_lambda = true;
            arm_cfg.agent.init_lambda = 0.0;
        }
        let dir = out.join(name);
        let train = cmd_train(&arm_cfg, seed, &dir)?;
        let ckpt = if dir.join(BEST_CHECKPOINT).exists() {
            dir.join(BEST_CHECKPOINT)
        } else {
            dir.join(FINAL_CHECKPOINT)
        };
        let bundle = load_agent(&ckpt, &setup)?;
        let ev = run_eval(cfg, &setup, Some(&bundle), cfg.eval.n_seeds, cfg.eval.base_seed)?;
        write_evaluation(&ev, &dir.join("eval"))?;
        arms.push(ArmReport {
            train,
            mean_guidance_by_step: mean_guidance_by_step(&ev.traces),
            eval: ev.report,
        });
    }
    let base = run_eval(cfg, &setup, None, cfg.eval.n_seeds, cfg.eval.base_seed)?;
    write_evaluation(&base, &out.join("baseline"))?;
    let ablation = arms.pop().expect("two arms");
    let constrained = arms.pop().expect("two arms");
    let report = AblationReport {
        seed,
        constrained,
        ablation,
        baseline_mean_guidance_by_step: mean_guidance_by_step(&base.traces),
        baseline: base.report,
    };
    io::write(&out.join("ablation_report.json"), versioned_json("reachsteer-ablation", &report)?)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleReport {
    pub caption_id: String,
    pub points_per_axis: usize,
    pub actions: usize,
    pub brt_fraction: Vec<f64>,
    pub interpolation_error: f64,
    /// Sign agreement of the checkpoint's safety critic with the mask over
    /// steps `0..T`.
    pub agreement: Option<f64>,
    pub refinement: Option<Vec<RefinementStep>>,
}

pub fn oracle_caption(cfg: &RunConfig, setup: &Setup) -> Result<CaptionEmbedding> {
    match &cfg.oracle.caption {
        Some(id) => setup
            .env
            .config()
            .captions
            .iter()
            .find(|c| &c.id == id)
            .cloned()
            .ok_or_else(|| Error::Config(format!("oracle.caption `{id}` not found"))),
        None => setup
            .env
            .triggered_captions()
            .into_iter()
            .next()
            .or_else(|| setup.env.config().captions.first().cloned())
            .ok_or_else(|| Error::Config("environment has no captions".into())),
    }
}

/// Builds the oracle grid described by the config.
pub fn oracle_grid(cfg: &RunConfig, setup: &Setup) -> Result<BrtGrid> {
    let caption = oracle_caption(cfg, setup)?;
    let spec = GridSpec::auto(&setup.env, &setup.codec, cfg.oracle.points_per_axis, cfg.oracle.action_levels)?;
    compute_brt_oracle(
        &setup.env,
        &setup.codec,
        &caption,
        &setup.target,
        &spec,
        &OracleOptions {
            warn_interpolation_error: cfg.oracle.warn_interpolation_error,
        },
    )
}

/// Fraction of grid points `(x, t)`, `t < T`, where
/// `Q_safe(s, π_det(s)) ≤ 0` matches oracle membership.
pub fn critic_agreement(setup: &Setup, bundle: &AgentBundle, brt: &BrtGrid, caption: &CaptionEmbedding) -> Result<f64> {
    sign_agreement(brt, 0..brt.horizon, |x, t| {
        let obs = setup.env.observation(&SystemState::new(x.to_vec(), t), &caption.e);
        let u = bundle.greedy_action(&obs)?;
        bundle.safety_value(&obs, &u)
    })
}

pub fn cmd_oracle(cfg: &RunConfig, checkpoint: Option<&Path>, out: &Path) -> Result<OracleReport> {
    let setup = Setup::from_config(cfg)?;
    let bundle = checkpoint.map(|p| load_agent(p, &setup)).transpose()?;
    let caption = oracle_caption(cfg, &setup)?;
    let brt = oracle_grid(cfg, &setup)?;
    let agreement = bundle
        .as_ref()
        .map(|b| critic_agreement(&setup, b, &brt, &caption))
        .transpose()?;
    let refinement = if cfg.oracle.refine_levels > 0 {
        let spec = GridSpec::auto(&setup.env, &setup.codec, cfg.oracle.points_per_axis, cfg.oracle.action_levels)?;
        Some(refinement_study(
            &setup.env,
            &setup.codec,
            &caption,
            &setup.target,
            &spec,
            cfg.oracle.refine_levels + 1,
        )?)
    } else {
        None
    };
    prepare_out(out)?;
    brt.save(&out.join("brt"))?;
    let report = OracleReport {
        caption_id: caption.id.clone(),
        points_per_axis: cfg.oracle.points_per_axis,
        actions: brt.action_grid.len(),
        brt_fraction: brt.brt_fraction(),
        interpolation_error: brt.interpolation_error,
        agreement,
        refinement,
    };
    io::write(&out.join("oracle_report.json"), versioned_json("reachsteer-oracle", &report)?)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct CodecReport {
    pub captions: usize,
    pub min_reconstruction_cosine: f64,
    pub mean_reconstruction_cosine: f64,
    pub path: PathBuf,
}

pub fn cmd_fit_codec(cfg: &RunConfig, out: &Path) -> Result<CodecReport> {
    let setup = Setup::from_config(cfg)?;
    let cos = setup.codec.reconstruction_cosines(&setup.env.config().captions)?;
    prepare_out(out)?;
    let path = out.join(CODEC_FILE);
    io::write(&path, setup.codec.to_json()?)?;
    let report = CodecReport {
        captions: cos.len(),
        min_reconstruction_cosine: cos.iter().cloned().fold(f64::INFINITY, f64::min),
        mean_reconstruction_cosine: cos.iter().sum::<f64>() / cos.len().max(1) as f64,
        path,
    };
    io::write(&out.join("codec_report.json"), versioned_json("reachsteer-codec-report", &report)?)?;
    Ok(report)
}
