use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::approximator::Net;
use crate::dynamics::ActionSource;
use crate::error::{check_len, Result};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionMode {
    Stochastic,
    Deterministic,
}

/// `log(1 − tanh²(p))`, stable for large `|p|`.
pub fn log_one_minus_tanh_sq(p: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - p - softplus(-2.0 * p))
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// One squashed-Gaussian draw with everything needed for reparameterized
/// gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct SquashedSample {
    pub action: Vec<f64>,
    pub log_prob: f64,
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
    /// Standard normal noise `ξ`.
    pub noise: Vec<f64>,
    /// Whether `log_std` was clamped (gradient is blocked there).
    pub clamped: Vec<bool>,
}

/// Splits the raw head into mean and clamped log-std and draws `u = tanh(μ + σξ)`.
pub fn squash_sample(head: &[f64], noise: &[f64]) -> SquashedSample {
    let d = noise.len();
    let mean = head[..d].to_vec();
    let raw = &head[d..2 * d];
    let log_std: Vec<f64> = raw.iter().map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect();
    let clamped = raw
        .iter()
        .map(|v| !(LOG_STD_MIN..=LOG_STD_MAX).contains(v))
        .collect();
    let mut action = Vec::with_capacity(d);
    let mut log_prob = 0.0;
    for i in 0..d {
        let pre = mean[i] + log_std[i].exp() * noise[i];
        action.push(pre.tanh());
        log_prob += -0.5 * noise[i] * noise[i] - HALF_LOG_2PI - log_std[i] - log_one_minus_tanh_sq(pre);
    }
    SquashedSample {
        action,
        log_prob,
        mean,
        log_std,
        noise: noise.to_vec(),
        clamped,
    }
}

/// Gradient of `c_logp·log π(u) + ⟨du, u⟩` with respect to the raw head
/// (mean then log-std), holding `ξ` fixed.
pub fn squash_head_gradient(s: &SquashedSample, c_logp: f64, du: &[f64]) -> Vec<f64> {
    let d = s.action.len();
    let mut g = vec![0.0; 2 * d];
    for i in 0..d {
        let u = s.action[i];
        let sigma = s.log_std[i].exp();
        let dpre = c_logp * 2.0 * u + du[i] * (1.0 - u * u);
        g[i] = dpre;
        g[d + i] = if s.clamped[i] {
            0.0
        } else {
            dpre * sigma * s.noise[i] - c_logp
        };
    }
    g
}

/// Samples an action from the policy head; deterministic mode returns
/// `tanh(μ)` with the log-density of the zero-noise point.
pub fn sample_action(
    policy: &Net,
    observation: &[f64],
    mode: ActionMode,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, f64)> {
    check_len("policy observation", policy.input_dim(), observation.len())?;
    let d = policy.output_dim() / 2;
    let head = policy.forward(observation)?;
    let noise: Vec<f64> = match mode {
        ActionMode::Stochastic => (0..d).map(|_| rng.sample(StandardNormal)).collect(),
        ActionMode::Deterministic => vec![0.0; d],
    };
    let s = squash_sample(&head, &noise);
    Ok((s.action, s.log_prob))
}

/// Rollout adapter around a policy snapshot.
#[derive(Debug, Clone, Copy)]
pub struct PolicyActor<'a> {
    pub net: &'a Net,
    pub mode: ActionMode,
}

impl ActionSource for PolicyActor<'_> {
    fn action_dim(&self) -> usize {
        self.net.output_dim() / 2
    }

    fn act(&self, observation: &[f64], rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let (u, _) = sample_action(self.net, observation, self.mode, rng)?;
        // tanh saturates to exactly ±1 in floating point for large inputs,
        // which is still inside the closed action box.
        Ok(u)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn stable_log_jacobian() {
        for p in [-40.0, -3.0, -0.2, 0.0, 0.7, 5.0, 40.0] {
            let direct = (1.0 - (p as f64).tanh().powi(2)).ln();
            let stable = log_one_minus_tanh_sq(p);
            if direct.is_finite() && direct > -30.0 {
                assert!((direct - stable).abs() < 1e-9, "{p}: {direct} vs {stable}");
            }
            assert!(stable.is_finite());
        }
    }

    #[test]
    fn deterministic_zero_mean_is_zero() {
        let net = Net::zeros(&[3, 4]).unwrap();
        let mut r = rng::stream(0, &[]);
        let (u, _) = sample_action(&net, &[1.0, 2.0, 3.0], ActionMode::Deterministic, &mut r).unwrap();
        assert_eq!(u, vec![0.0, 0.0]);
    }

    #[test]
    fn head_gradient_matches_finite_differences() {
        let head = [0.3, -0.8, -0.4, 0.2];
        let noise = [0.7, -1.3];
        let du = [0.9, -0.25];
        let c = 0.37;
        let f = |h: &[f64]| {
            let s = squash_sample(h, &noise);
            c * s.log_prob + s.action.iter().zip(&du).map(|(a, b)| a * b).sum::<f64>()
        };
        let g = squash_head_gradient(&squash_sample(&head, &noise), c, &du);
        for i in 0..4 {
            let mut hp = head;
            let mut hm = head;
            hp[i] += 1e-6;
            hm[i] -= 1e-6;
            let fd = (f(&hp) - f(&hm)) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-7, "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn clamped_log_std_blocks_gradient() {
        let s = squash_sample(&[0.0, 7.0], &[0.5]);
        assert_eq!(s.log_std, vec![LOG_STD_MAX]);
        assert_eq!(squash_head_gradient(&s, 1.0, &[1.0])[1], 0.0);
    }
}
