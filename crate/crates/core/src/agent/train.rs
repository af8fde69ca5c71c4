use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::buffer::ReplayBuffer;
use super::policy::{ActionMode, PolicyActor};
use super::sac::{sample_batch, AgentBundle, AgentConfig, UpdateStats};
use crate::codec::ActionCodec;
use crate::dynamics::{ActionSource, CaptionEmbedding, Episode, ToyDenoiser};
use crate::error::{Error, Result};
use crate::reachability::TargetFnParams;
use crate::rng::{self, derive_seed, tag};

/// Mean statistics of a set of rollouts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RolloutSummary {
    pub episodes: usize,
    pub mean_reward: f64,
    pub mean_terminal_ell: f64,
    /// `mean_reward + mean_terminal_ell`, the model-selection score.
    pub score: f64,
    pub failure_rate: f64,
}

impl RolloutSummary {
    pub fn from_episodes(eps: &[Episode]) -> Self {
        let n = eps.len().max(1) as f64;
        let mean_reward = eps.iter().map(|e| e.reward).sum::<f64>() / n;
        let mean_terminal_ell = eps.iter().map(|e| e.terminal_ell).sum::<f64>() / n;
        Self {
            episodes: eps.len(),
            mean_reward,
            mean_terminal_ell,
            score: mean_reward + mean_terminal_ell,
            failure_rate: eps.iter().filter(|e| e.entered_failure_set()).count() as f64 / n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub updates: usize,
    pub task_loss: f64,
    pub safety_loss: f64,
    pub policy_loss: f64,
    pub mean_q_safe: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub train: RolloutSummary,
    pub eval: Option<RolloutSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TrainStatus {
    Completed,
    Diverged { epoch: usize, message: String },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub bundle: AgentBundle,
    /// Snapshot with the highest evaluation score; the initial bundle when no
    /// evaluation ran.
    pub best: AgentBundle,
    pub best_epoch: Option<usize>,
    pub best_score: Option<f64>,
    pub log: Vec<EpochRecord>,
    pub status: TrainStatus,
}

/// Runs `seeds.len()` rollouts in parallel and returns them in input order.
pub fn collect_rollouts<P, C>(
    env: &ToyDenoiser,
    codec: &C,
    target: &TargetFnParams,
    policy: &P,
    jobs: &[(CaptionEmbedding, u64)],
) -> Result<Vec<Episode>>
where
    P: ActionSource + Sync + ?Sized,
    C: ActionCodec + Sync + ?Sized,
{
    jobs.par_iter()
        .map(|(cap, seed)| env.rollout(codec, target, cap, policy, *seed))
        .collect()
}

/// Deterministic-policy evaluation on a fixed set of caption/seed pairs.
pub fn evaluate_policy<C: ActionCodec + Sync + ?Sized>(
    env: &ToyDenoiser,
    codec: &C,
    target: &TargetFnParams,
    bundle: &AgentBundle,
    captions: &[CaptionEmbedding],
    rollouts: usize,
    seed: u64,
) -> Result<RolloutSummary> {
    let jobs: Vec<_> = (0..rollouts)
        .map(|i| {
            (
                captions[i % captions.len()].clone(),
                derive_seed(seed, &[tag::EVAL, i as u64]),
            )
        })
        .collect();
    let actor = PolicyActor {
        net: &bundle.actor,
        mode: ActionMode::Deterministic,
    };
    Ok(RolloutSummary::from_episodes(&collect_rollouts(env, codec, target, &actor, &jobs)?))
}

#[derive(Default)]
struct Running {
    n: usize,
    task: f64,
    safety: f64,
    policy: f64,
    q_safe: f64,
}

impl Running {
    fn add(&mut self, s: &UpdateStats) {
        self.n += 1;
        self.task += s.task_loss;
        self.safety += s.safety_loss;
        self.policy += s.policy_loss;
        self.q_safe += s.mean_q_safe;
    }

    fn mean(&self, v: f64) -> f64 {
        if self.n == 0 {
            f64::NAN
        } else {
            v / self.n as f64
        }
    }
}

/// Trains a constrained soft actor-critic on `captions`.
///
/// Each epoch collects `rollouts_per_epoch` stochastic rollouts (captions
/// drawn uniformly), then performs `updates_per_step` gradient updates per
/// collected transition once the buffer holds a full batch. Every
/// `eval_every` epochs, and after the last one, the deterministic policy is
/// scored by mean terminal reward plus terminal margin and the best snapshot
/// is kept. Divergence stops training early with `TrainStatus::Diverged`.
pub fn train<C: ActionCodec + Sync + ?Sized>(
    env: &ToyDenoiser,
    codec: &C,
    target: &TargetFnParams,
    cfg: &AgentConfig,
    captions: &[CaptionEmbedding],
    seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if captions.is_empty() {
        return Err(Error::Config("no training captions".into()));
    }
    let mut bundle = AgentBundle::new(env.observation_dim(), env.config().action_dim, cfg, seed)?;
    let mut best = bundle.clone();
    let mut best_epoch = None;
    let mut best_score: Option<f64> = None;
    let mut buffer = ReplayBuffer::new(cfg.replay_capacity)?;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut carry = 0.0;

    for epoch in 0..cfg.epochs {
        let mut pick = rng::stream(seed, &[tag::CAPTIONS, epoch as u64]);
        let jobs: Vec<_> = (0..cfg.rollouts_per_epoch)
            .map(|i| {
                (
                    captions[pick.random_range(0..captions.len())].clone(),
                    derive_seed(seed, &[tag::ROLLOUT_STATE, epoch as u64, i as u64]),
                )
            })
            .collect();
        let actor = PolicyActor {
            net: &bundle.actor,
            mode: ActionMode::Stochastic,
        };
        let episodes = collect_rollouts(env, codec, target, &actor, &jobs)?;
        let train_summary = RolloutSummary::from_episodes(&episodes);
        let collected: usize = episodes.iter().map(|e| e.transitions.len()).sum();
        for ep in episodes {
            buffer.extend(ep.transitions);
        }

        carry += cfg.updates_per_step * collected as f64;
        let n_updates = carry.floor() as usize;
        carry -= n_updates as f64;
        let mut urng = rng::stream(seed, &[tag::UPDATE, epoch as u64]);
        let mut run = Running::default();
        let mut diverged = None;
        if buffer.len() >= cfg.batch_size {
            for _ in 0..n_updates {
                let batch = sample_batch(&buffer, cfg.batch_size, &mut urng)?;
                match bundle.train_step(&batch, &mut urng, cfg.divergence_threshold) {
                    Ok(s) => run.add(&s),
                    Err(Error::Divergence(m)) => {
                        diverged = Some(m);
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
        }

        let is_eval = (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs;
        let eval = if is_eval && diverged.is_none() {
            let s = evaluate_policy(env, codec, target, &bundle, captions, cfg.eval_rollouts, seed)?;
            if best_score.is_none_or(|b| s.score > b) {
                best_score = Some(s.score);
                best_epoch = Some(epoch);
                best = bundle.clone();
            }
            Some(s)
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            updates: run.n,
            task_loss: run.mean(run.task),
            safety_loss: run.mean(run.safety),
            policy_loss: run.mean(run.policy),
            mean_q_safe: run.mean(run.q_safe),
            alpha: bundle.alpha(),
            lambda: bundle.lambda,
            train: train_summary,
            eval,
        };
        log::info!(
            "epoch {epoch}: lambda {:.4} alpha {:.4} q_safe {:.3} train score {:.3} failure {:.2}{}",
            record.lambda,
            record.alpha,
            record.mean_q_safe,
            record.train.score,
            record.train.failure_rate,
            record
                .eval
                .map(|e| format!(" | eval score {:.3} failure {:.2}", e.score, e.failure_rate))
                .unwrap_or_default()
        );
        log.push(record);
        if let Some(message) = diverged {
            return Ok(TrainOutcome {
                bundle,
                best,
                best_epoch,
                best_score,
                log,
                status: TrainStatus::Diverged { epoch, message },
            });
        }
    }
    Ok(TrainOutcome {
        bundle,
        best,
        best_epoch,
        best_score,
        log,
        status: TrainStatus::Completed,
    })
}
