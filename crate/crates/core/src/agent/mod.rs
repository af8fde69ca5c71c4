//! Lagrangian-constrained soft actor-critic.

mod buffer;
mod policy;
mod sac;
mod train;

pub use crate::dynamics::Transition;
pub use buffer::ReplayBuffer;
pub use policy::{
    log_one_minus_tanh_sq, sample_action, squash_head_gradient, squash_sample, ActionMode,
    PolicyActor, SquashedSample, LOG_STD_MAX, LOG_STD_MIN,
};
pub use sac::{
    dual_step, sample_batch, temperature_gradient, AgentBundle, AgentConfig, Batch, PolicyStats,
    UpdateStats,
};
pub use train::{
    collect_rollouts, evaluate_policy, train, EpochRecord, RolloutSummary, TrainOutcome,
    TrainStatus,
};

use crate::dynamics::{SystemState, ToyDenoiser};
use crate::error::{check_len, Result};
use crate::vecops::{dot, mat_vec, norm};

/// Sparse alignment reward: zero before the last step, then the cosine
/// similarity between the image feature `F·x₀` and the base caption.
pub fn compute_reward(s: &SystemState, e_base: &[f64], env: &ToyDenoiser) -> Result<f64> {
    if !s.is_terminal(env.horizon()) {
        return Ok(0.0);
    }
    let cfg = env.config();
    check_len("latent", cfg.latent_dim, s.x.len())?;
    check_len("caption embedding", cfg.embed_dim, e_base.len())?;
    let feature = mat_vec(&cfg.feature_map, &s.x);
    let denom = norm(&feature) * norm(e_base);
    if denom == 0.0 {
        log::debug!("reward undefined for a zero feature or caption vector; returning 0");
        return Ok(0.0);
    }
    Ok((dot(&feature, e_base) / denom).clamp(-1.0, 1.0))
}
