use serde::{Deserialize, Serialize};

use crate::dynamics::{CaptionEmbedding, NoiseDraw, SystemState, ToyDenoiser};
use crate::error::{Error, Result};
use crate::rng::{self, tag};

/// Slope and threshold of the guidance-norm margin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetFnParams {
    pub eta: f64,
    pub beta: f64,
}

impl TargetFnParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta must be > 0, got {}", self.eta)));
        }
        if !self.beta.is_finite() {
            return Err(Error::Config("beta must be finite".into()));
        }
        Ok(())
    }
}

/// `−tanh(η·(norm − β))`: positive below the threshold, negative above.
pub fn target_ell_from_norm(norm: f64, p: &TargetFnParams) -> f64 {
    -(p.eta * (norm - p.beta)).tanh()
}

/// Safety margin of state `s` when the denoiser is conditioned on `e_steered`.
pub fn target_ell(
    env: &ToyDenoiser,
    s: &SystemState,
    e_steered: &[f64],
    p: &TargetFnParams,
) -> Result<f64> {
    let tau = env.horizon().saturating_sub(s.step);
    Ok(target_ell_from_norm(env.guidance_norm(&s.x, e_steered, tau)?, p))
}

/// Result of the threshold sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Calibration {
    pub beta: f64,
    pub accuracy: f64,
    /// Width of the empty interval around `beta` in the sorted norm sample.
    pub gap: f64,
    pub triggered_norms: Vec<f64>,
    pub untriggered_norms: Vec<f64>,
}

/// Recalibrates `β` for an environment.
///
/// Guidance norms are collected along unsteered trajectories of triggered and
/// ordinary captions (`samples_per_class` states each); the returned threshold
/// maximizes the classification accuracy of "norm > β ⇔ triggered". Among
/// equally accurate thresholds the one in the widest gap wins, and the
/// threshold sits at the midpoint of that gap.
pub fn calibrate_beta(env: &ToyDenoiser, samples_per_class: usize, seed: u64) -> Result<Calibration> {
    let trig = env.triggered_captions();
    let plain = env.untriggered_captions();
    if trig.is_empty() || plain.is_empty() {
        return Err(Error::InsufficientData {
            available: trig.len().min(plain.len()),
            requested: 1,
        });
    }
    let triggered_norms = collect_norms(env, &trig, samples_per_class, seed, 0)?;
    let untriggered_norms = collect_norms(env, &plain, samples_per_class, seed, 1)?;

    let mut all: Vec<(f64, bool)> = triggered_norms
        .iter()
        .map(|&n| (n, true))
        .chain(untriggered_norms.iter().map(|&n| (n, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total = all.len() as f64;
    let n_trig = triggered_norms.len();

    // Threshold below everything: everything classified as triggered.
    let mut correct = n_trig as f64;
    let mut best = (correct / total, 0.0, all[0].0 - 1.0);
    for i in 0..all.len() {
        // Moving the threshold past all[i] reclassifies it as untriggered.
        correct += if all[i].1 { -1.0 } else { 1.0 };
        let (thr, gap) = match all.get(i + 1) {
            Some(next) if next.0 > all[i].0 => (0.5 * (all[i].0 + next.0), next.0 - all[i].0),
            Some(_) => continue,
            None => (all[i].0 + 1.0, 0.0),
        };
        let acc = correct / total;
        if acc > best.0 + 1e-12 || ((acc - best.0).abs() <= 1e-12 && gap > best.1) {
            best = (acc, gap, thr);
        }
    }
    Ok(Calibration {
        beta: best.2,
        accuracy: best.0,
        gap: best.1,
        triggered_norms,
        untriggered_norms,
    })
}

fn collect_norms(
    env: &ToyDenoiser,
    captions: &[CaptionEmbedding],
    n: usize,
    seed: u64,
    class: u64,
) -> Result<Vec<f64>> {
    let t_max = env.horizon();
    let mut out = Vec::with_capacity(n);
    let mut episode = 0u64;
    while out.len() < n {
        let cap = &captions[episode as usize % captions.len()];
        let mut r = rng::stream(seed, &[tag::CALIBRATION, class, episode]);
        let mut s = SystemState::new(env.sample_initial_latent(&mut r), 0);
        loop {
            out.push(env.guidance_norm(&s.x, &cap.e, t_max - s.step)?);
            if out.len() == n || s.step == t_max {
                break;
            }
            let noise = NoiseDraw::draw(env.config().noise_mode, env.latent_dim(), &mut r);
            s = env.step(&s, &cap.e, &noise)?;
        }
        episode += 1;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::EnvConfig;

    const REFERENCE: TargetFnParams = TargetFnParams { eta: 0.1, beta: 9.0 };

    #[test]
    fn zero_at_threshold() {
        assert_eq!(target_ell_from_norm(9.0, &REFERENCE), 0.0);
    }

    #[test]
    fn ten_above_threshold() {
        let v = target_ell_from_norm(19.0, &REFERENCE);
        assert!((v + 0.761_594_155_955_764_9).abs() < 1e-12, "{v}");
    }

    #[test]
    fn saturates_far_above() {
        assert!((target_ell_from_norm(1009.0, &REFERENCE) + 1.0).abs() < 1e-9);
    }

    #[test]
    fn calibration_separates_default_env() {
        let env = ToyDenoiser::new(EnvConfig::default()).unwrap();
        let cal = calibrate_beta(&env, 500, 0).unwrap();
        assert!(cal.accuracy >= 0.85, "{}", cal.accuracy);
        let max_plain = cal.untriggered_norms.iter().cloned().fold(f64::MIN, f64::max);
        let min_trig = cal.triggered_norms.iter().cloned().fold(f64::MAX, f64::min);
        assert!(max_plain < cal.beta && cal.beta < min_trig);
    }

    #[test]
    fn rejects_bad_eta() {
        assert!(TargetFnParams { eta: 0.0, beta: 1.0 }.validate().is_err());
    }
}
