//! Replication, diversity, alignment and failure statistics over a
//! caption × seed grid of rollouts.

use serde::{Deserialize, Serialize};

use crate::agent::collect_rollouts;
use crate::codec::ActionCodec;
use crate::dynamics::{ActionSource, CaptionEmbedding, StepTrace, ToyDenoiser};
use crate::error::{check_len, Error, Result};
use crate::reachability::TargetFnParams;
use crate::rng::{derive_seed, tag};
use crate::vecops::{dot, norm};

/// Cosine similarity.
pub fn similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len("similarity operands", a.len(), b.len())?;
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Config("similarity of a zero vector is undefined".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rollouts: usize,
    pub replication_target: f64,
    /// `None` with fewer than two seeds per caption.
    pub diversity_seeds: Option<f64>,
    /// `None` with fewer than two captions.
    pub diversity_prompts: Option<f64>,
    pub alignment: f64,
    pub failure_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RolloutRecord {
    pub caption_id: String,
    pub seed_index: usize,
    pub reward: f64,
    pub terminal_ell: f64,
    pub min_ell: f64,
    pub failed: bool,
    pub replication: f64,
    pub final_x: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: EvalReport,
    /// Caption-major: rollout `i·n_seeds + j` is caption `i`, seed `j`.
    pub rollouts: Vec<RolloutRecord>,
    pub traces: Vec<Vec<StepTrace>>,
}

fn mean_pairwise(xs: &[&Vec<f64>]) -> Result<f64> {
    let mut acc = 0.0;
    let mut n = 0usize;
    for i in 0..xs.len() {
        for j in i + 1..xs.len() {
            acc += similarity(xs[i], xs[j])?;
            n += 1;
        }
    }
    Ok(acc / n as f64)
}

/// Runs `captions × n_seeds` rollouts and aggregates them.
///
/// Seed `j` uses stream `(base_seed, j)` for every caption, so all captions
/// start from the same latents and results do not depend on thread count.
pub fn evaluate<P, C>(
    policy: &P,
    env: &ToyDenoiser,
    codec: &C,
    target: &TargetFnParams,
    captions: &[CaptionEmbedding],
    n_seeds: usize,
    base_seed: u64,
) -> Result<Evaluation>
where
    P: ActionSource + Sync + ?Sized,
    C: ActionCodec + Sync + ?Sized,
{
    if captions.is_empty() || n_seeds == 0 {
        return Err(Error::Config("evaluation needs at least one caption and one seed".into()));
    }
    let mut jobs = Vec::with_capacity(captions.len() * n_seeds);
    for c in captions {
        for j in 0..n_seeds {
            jobs.push((c.clone(), derive_seed(base_seed, &[tag::EVAL, j as u64])));
        }
    }
    let episodes = collect_rollouts(env, codec, target, policy, &jobs)?;
    let targets: Vec<&Vec<f64>> = env.config().memorized_targets.iter().map(|m| &m.target).collect();

    let mut rollouts = Vec::with_capacity(episodes.len());
    for (k, ep) in episodes.iter().enumerate() {
        let replication = if targets.is_empty() {
            0.0
        } else {
            targets
                .iter()
                .map(|m| similarity(&ep.final_x, m))
                .collect::<Result<Vec<f64>>>()?
                .into_iter()
                .fold(f64::NEG_INFINITY, f64::max)
        };
        rollouts.push(RolloutRecord {
            caption_id: captions[k / n_seeds].id.clone(),
            seed_index: k % n_seeds,
            reward: ep.reward,
            terminal_ell: ep.terminal_ell,
            min_ell: ep.min_ell(),
            failed: ep.entered_failure_set(),
            replication,
            final_x: ep.final_x.clone(),
        });
    }
    let n = rollouts.len() as f64;
    let finals: Vec<&Vec<f64>> = rollouts.iter().map(|r| &r.final_x).collect();

    let diversity_seeds = if n_seeds >= 2 {
        let mut acc = 0.0;
        for i in 0..captions.len() {
            acc += mean_pairwise(&finals[i * n_seeds..(i + 1) * n_seeds])?;
        }
        Some(acc / captions.len() as f64)
    } else {
        None
    };
    let diversity_prompts = if captions.len() >= 2 {
        let mut acc = 0.0;
        for j in 0..n_seeds {
            let col: Vec<&Vec<f64>> = (0..captions.len()).map(|i| finals[i * n_seeds + j]).collect();
            acc += mean_pairwise(&col)?;
        }
        Some(acc / n_seeds as f64)
    } else {
        None
    };

    let report = EvalReport {
        rollouts: rollouts.len(),
        replication_target: rollouts.iter().map(|r| r.replication).sum::<f64>() / n,
        diversity_seeds,
        diversity_prompts,
        alignment: rollouts.iter().map(|r| r.reward).sum::<f64>() / n,
        failure_rate: rollouts.iter().filter(|r| r.failed).count() as f64 / n,
    };
    Ok(Evaluation {
        report,
        rollouts,
        traces: episodes.into_iter().map(|e| e.trace).collect(),
    })
}

/// Mean guidance norm per step index across traces.
pub fn mean_guidance_by_step(traces: &[Vec<StepTrace>]) -> Vec<f64> {
    let len = traces.iter().map(|t| t.len()).max().unwrap_or(0);
    (0..len)
        .map(|s| {
            let vals: Vec<f64> = traces
                .iter()
                .filter_map(|t| t.get(s).map(|r| r.guidance_norm))
                .collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        })
        .collect()
}
