//! Controlled denoising dynamics.
//!
//! The toy denoiser replaces a trained noise predictor with an analytic
//! attractor field. The unconditional branch pulls every latent towards a base
//! attractor `b`; the conditional branch pulls towards `A·e` for ordinary
//! captions and towards a planted memorized latent `M_k` when the caption
//! embedding falls inside the trigger ball of `κ_k`. The trigger ball widens
//! as the latent approaches `M_k` (controlled by `guidance_gain`), so once a
//! trajectory sits deep in the basin no bounded caption perturbation can
//! release it.
//!
//! One guided step is
//!
//! ```text
//! x' = x − α_τ · (ε_u + g · (ε_c − ε_u)) + σ · ω
//! ```
//!
//! with `σ = 0` in DDIM mode.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::codec::ActionCodec;
use crate::error::{check_finite, check_len, Error, Result};
use crate::reachability::{target_ell_from_norm, TargetFnParams};
use crate::rng::{self, tag};
use crate::vecops::{dist, dot, mat_vec, norm, sub};

/// Latent vector paired with the number of denoising steps already taken.
///
/// `step = t` corresponds to the latent `x_{T−t}`; `step = T` is terminal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemState {
    pub x: Vec<f64>,
    pub step: usize,
}

impl SystemState {
    pub fn new(x: Vec<f64>, step: usize) -> Self {
        Self { x, step }
    }

    pub fn is_terminal(&self, horizon: usize) -> bool {
        self.step >= horizon
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionEmbedding {
    pub id: String,
    pub e: Vec<f64>,
}

impl CaptionEmbedding {
    pub fn new(id: impl Into<String>, e: Vec<f64>) -> Self {
        Self { id: id.into(), e }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseMode {
    Ddim,
    Ddpm,
}

/// Per-step sampler noise `ω`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub omega: Vec<f64>,
}

impl NoiseDraw {
    pub fn zero(n: usize) -> Self {
        Self {
            omega: vec![0.0; n],
        }
    }

    /// Zero in DDIM mode, a standard normal sample in DDPM mode.
    pub fn draw(mode: NoiseMode, n: usize, rng: &mut ChaCha8Rng) -> Self {
        match mode {
            NoiseMode::Ddim => Self::zero(n),
            NoiseMode::Ddpm => Self {
                omega: (0..n).map(|_| rng.sample(StandardNormal)).collect(),
            },
        }
    }
}

/// A planted memorization basin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemorizedTarget {
    /// Trigger embedding `κ`.
    pub trigger: Vec<f64>,
    /// Memorized latent `M`.
    pub target: Vec<f64>,
    /// Trigger radius `ρ` far from the basin.
    pub radius: f64,
}

fn default_observation_scale() -> f64 {
    24.0
}

fn default_noise_std() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    /// Number of denoising steps `T`.
    pub horizon: usize,
    /// Classifier-free guidance scale `g`.
    pub guidance_scale: f64,
    pub noise_mode: NoiseMode,
    /// `σ` used in DDPM mode.
    #[serde(default = "default_noise_std")]
    pub noise_std: f64,
    pub latent_dim: usize,
    pub embed_dim: usize,
    pub action_dim: usize,
    /// `α_τ` indexed by `τ − 1`, one entry per denoising step.
    pub step_sizes: Vec<f64>,
    pub base_attractor: Vec<f64>,
    /// `A`, `latent_dim` rows of length `embed_dim`.
    pub cond_map: Vec<Vec<f64>>,
    /// Linear "image feature" map used by the alignment reward, `embed_dim`
    /// rows of length `latent_dim`.
    pub feature_map: Vec<Vec<f64>>,
    #[serde(default)]
    pub memorized_targets: Vec<MemorizedTarget>,
    /// Relative widening of a trigger ball at the centre of its basin.
    pub guidance_gain: f64,
    /// Length scale of the trigger widening around `M_k`.
    pub capture_width: f64,
    /// Standard deviation of the initial latent `x_T`.
    pub init_std: f64,
    #[serde(default = "default_observation_scale")]
    pub observation_scale: f64,
    #[serde(default)]
    pub captions: Vec<CaptionEmbedding>,
    pub rng_seed: u64,
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.horizon < 1 {
            return bad("horizon must be at least 1".into());
        }
        if !(self.guidance_scale >= 0.0) {
            return bad(format!("guidance_scale must be >= 0, got {}", self.guidance_scale));
        }
        if self.latent_dim == 0 || self.embed_dim == 0 || self.action_dim == 0 {
            return bad("dimensions must be positive".into());
        }
        if self.step_sizes.len() != self.horizon {
            return bad(format!(
                "step_sizes has {} entries, horizon is {}",
                self.step_sizes.len(),
                self.horizon
            ));
        }
        if self.step_sizes.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
            return bad("step_sizes must all be positive and finite".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std must be finite and >= 0".into());
        }
        check_len("base_attractor", self.latent_dim, self.base_attractor.len())?;
        check_finite("base_attractor", &self.base_attractor)?;
        check_len("cond_map rows", self.latent_dim, self.cond_map.len())?;
        for row in &self.cond_map {
            check_len("cond_map columns", self.embed_dim, row.len())?;
            check_finite("cond_map", row)?;
        }
        check_len("feature_map rows", self.embed_dim, self.feature_map.len())?;
        for row in &self.feature_map {
            check_len("feature_map columns", self.latent_dim, row.len())?;
            check_finite("feature_map", row)?;
        }
        for (k, m) in self.memorized_targets.iter().enumerate() {
            check_len("memorized trigger", self.embed_dim, m.trigger.len())?;
            check_len("memorized target", self.latent_dim, m.target.len())?;
            check_finite("memorized trigger", &m.trigger)?;
            check_finite("memorized target", &m.target)?;
            if !(m.radius > 0.0 && m.radius.is_finite()) {
                return bad(format!("memorized target {k}: radius must be > 0"));
            }
        }
        if !(self.guidance_gain >= 0.0 && self.guidance_gain.is_finite()) {
            return bad("guidance_gain must be finite and >= 0".into());
        }
        if !(self.capture_width > 0.0 && self.capture_width.is_finite()) {
            return bad("capture_width must be > 0".into());
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return bad("init_std must be finite and >= 0".into());
        }
        if !(self.observation_scale > 0.0) {
            return bad("observation_scale must be > 0".into());
        }
        for c in &self.captions {
            check_len("caption embedding", self.embed_dim, c.e.len())?;
            check_finite("caption embedding", &c.e)?;
        }
        Ok(())
    }
}

/// Generator for the default toy scenario.
///
/// Captions live (up to a small off-plane jitter) in a two-dimensional plane
/// of the embedding space. Triggers sit on a circle in that plane; the
/// memorized latents point along the trigger directions, while `A` rotates
/// ordinary captions by `cond_rotation_deg`. The rotation makes memorized
/// outputs align better with their captions than anything reachable by
/// escaping the trigger, mirroring the alignment bias of memorized samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioParams {
    pub horizon: usize,
    pub embed_dim: usize,
    pub n_triggers: usize,
    pub captions_per_trigger: usize,
    pub background_captions: usize,
    pub trigger_code_radius: f64,
    pub trigger_radius: f64,
    pub target_distance: f64,
    pub cond_gain: f64,
    pub cond_rotation_deg: f64,
    pub guidance_gain: f64,
    pub capture_width: f64,
    pub init_std: f64,
    pub step_size: f64,
    pub off_plane_jitter: f64,
    pub seed: u64,
}

impl Default for ScenarioParams {
    fn default() -> Self {
        Self {
            horizon: 20,
            embed_dim: 8,
            n_triggers: 3,
            captions_per_trigger: 20,
            background_captions: 20,
            trigger_code_radius: 2.0,
            trigger_radius: 0.3,
            target_distance: 24.0,
            cond_gain: 2.5,
            cond_rotation_deg: 45.0,
            guidance_gain: 2.5,
            capture_width: 5.0,
            init_std: 4.0,
            step_size: 0.15,
            off_plane_jitter: 0.01,
            seed: 0,
        }
    }
}

impl ScenarioParams {
    pub fn build(&self) -> Result<EnvConfig> {
        let n_e = self.embed_dim;
        if n_e < 2 {
            return Err(Error::Config("embed_dim must be >= 2".into()));
        }
        let mut rng = rng::stream(self.seed, &[tag::SCENARIO]);
        let plane = orthonormal_columns(n_e, n_e.min(8).max(2), &mut rng);
        // First two columns span the caption plane; the rest carry jitter.
        let p0 = &plane[0];
        let p1 = &plane[1];
        let embed = |z: [f64; 2], jitter: &[f64]| -> Vec<f64> {
            (0..n_e)
                .map(|i| z[0] * p0[i] + z[1] * p1[i] + jitter[i])
                .collect()
        };
        let jitter = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            let mut j = vec![0.0; n_e];
            for col in plane.iter().skip(2) {
                let w: f64 = rng.sample::<f64, _>(StandardNormal) * self.off_plane_jitter;
                for i in 0..n_e {
                    j[i] += w * col[i];
                }
            }
            j
        };

        let (c, s) = {
            let th = self.cond_rotation_deg.to_radians();
            (th.cos(), th.sin())
        };
        // A = gain · R(θ) · Pᵀ   (latent_dim = 2)
        let cond_map = vec![
            (0..n_e)
                .map(|i| self.cond_gain * (c * p0[i] - s * p1[i]))
                .collect::<Vec<_>>(),
            (0..n_e)
                .map(|i| self.cond_gain * (s * p0[i] + c * p1[i]))
                .collect::<Vec<_>>(),
        ];
        let feature_map = (0..n_e).map(|i| vec![p0[i], p1[i]]).collect();

        let mut targets = Vec::new();
        let mut codes = Vec::new();
        for k in 0..self.n_triggers {
            let phi = std::f64::consts::FRAC_PI_2
                + 2.0 * std::f64::consts::PI * k as f64 / self.n_triggers as f64;
            let dir = [phi.cos(), phi.sin()];
            let z = [dir[0] * self.trigger_code_radius, dir[1] * self.trigger_code_radius];
            codes.push(z);
            targets.push(MemorizedTarget {
                trigger: embed(z, &vec![0.0; n_e]),
                target: vec![dir[0] * self.target_distance, dir[1] * self.target_distance],
                radius: self.trigger_radius,
            });
        }

        let mut captions = Vec::new();
        for (k, z) in codes.iter().enumerate() {
            for j in 0..self.captions_per_trigger {
                // Uniform in a disc of half the trigger radius.
                let r = 0.5 * self.trigger_radius * rng.random::<f64>().sqrt();
                let a = 2.0 * std::f64::consts::PI * rng.random::<f64>();
                let zz = [z[0] + r * a.cos(), z[1] + r * a.sin()];
                let jit = jitter(&mut rng);
                captions.push(CaptionEmbedding::new(format!("mem{k}-{j:02}"), embed(zz, &jit)));
            }
        }
        let keep_out = self.trigger_radius * (1.0 + self.guidance_gain) + 0.2;
        let mut made = 0;
        let mut attempts = 0;
        while made < self.background_captions {
            attempts += 1;
            if attempts > 100_000 {
                return Err(Error::Config(
                    "could not place background captions outside trigger regions".into(),
                ));
            }
            let r = 1.5 + rng.random::<f64>();
            let a = 2.0 * std::f64::consts::PI * rng.random::<f64>();
            let zz = [r * a.cos(), r * a.sin()];
            if codes
                .iter()
                .any(|z| ((z[0] - zz[0]).powi(2) + (z[1] - zz[1]).powi(2)).sqrt() < keep_out)
            {
                continue;
            }
            let jit = jitter(&mut rng);
            captions.push(CaptionEmbedding::new(format!("bg-{made:02}"), embed(zz, &jit)));
            made += 1;
        }

        let cfg = EnvConfig {
            horizon: self.horizon,
            guidance_scale: 1.0,
            noise_mode: NoiseMode::Ddim,
            noise_std: default_noise_std(),
            latent_dim: 2,
            embed_dim: n_e,
            action_dim: 2,
            step_sizes: vec![self.step_size; self.horizon],
            base_attractor: vec![0.0, 0.0],
            cond_map,
            feature_map,
            memorized_targets: targets,
            guidance_gain: self.guidance_gain,
            capture_width: self.capture_width,
            init_std: self.init_std,
            observation_scale: self.target_distance.max(1.0),
            captions,
            rng_seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Gram–Schmidt on Gaussian columns; returns `k` orthonormal vectors of length `n`.
fn orthonormal_columns(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(k);
    while cols.len() < k {
        let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        for c in &cols {
            let p = dot(&v, c);
            for i in 0..n {
                v[i] -= p * c[i];
            }
        }
        let nv = norm(&v);
        if nv > 1e-6 {
            cols.push(v.into_iter().map(|x| x / nv).collect());
        }
    }
    cols
}

impl Default for EnvConfig {
    fn default() -> Self {
        ScenarioParams::default()
            .build()
            .expect("default scenario is valid")
    }
}

/// Source of latent actions for rollouts.
pub trait ActionSource {
    fn action_dim(&self) -> usize;
    fn act(&self, observation: &[f64], rng: &mut ChaCha8Rng) -> Result<Vec<f64>>;
}

/// The unmitigated sampler: never steers.
#[derive(Debug, Clone, Copy)]
pub struct ZeroAction {
    pub dim: usize,
}

impl ActionSource for ZeroAction {
    fn action_dim(&self) -> usize {
        self.dim
    }

    fn act(&self, _observation: &[f64], _rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        Ok(vec![0.0; self.dim])
    }
}

/// Block-constant action schedule, mostly for tests.
#[derive(Debug, Clone)]
pub struct ConstantAction(pub Vec<f64>);

impl ActionSource for ConstantAction {
    fn action_dim(&self) -> usize {
        self.0.len()
    }

    fn act(&self, _observation: &[f64], _rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        Ok(self.0.clone())
    }
}

/// One step of experience.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: SystemState,
    /// Policy input at `state` (latent, step and base embedding).
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    /// `ℓ(s_t)` under the steered embedding applied at this step.
    pub ell: f64,
    pub next_state: SystemState,
    pub next_obs: Vec<f64>,
    pub terminal: bool,
    /// `ℓ(s_T)` for the terminal transition.
    pub terminal_ell: Option<f64>,
}

/// Per-step diagnostics, including the terminal state.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepTrace {
    pub step: usize,
    pub guidance_norm: f64,
    pub ell: f64,
    pub reward: f64,
    pub distance_to_nearest_target: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Episode {
    pub transitions: Vec<Transition>,
    pub trace: Vec<StepTrace>,
    pub final_x: Vec<f64>,
    pub reward: f64,
    pub terminal_ell: f64,
}

impl Episode {
    /// Smallest safety margin seen along the trajectory, terminal state included.
    pub fn min_ell(&self) -> f64 {
        self.trace.iter().map(|s| s.ell).fold(f64::INFINITY, f64::min)
    }

    pub fn entered_failure_set(&self) -> bool {
        self.min_ell() <= 0.0
    }
}

/// The analytic toy denoiser. Immutable after construction.
#[derive(Debug, Clone)]
pub struct ToyDenoiser {
    cfg: EnvConfig,
}

impl ToyDenoiser {
    pub fn new(cfg: EnvConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn horizon(&self) -> usize {
        self.cfg.horizon
    }

    pub fn latent_dim(&self) -> usize {
        self.cfg.latent_dim
    }

    pub fn observation_dim(&self) -> usize {
        self.cfg.latent_dim + 1 + self.cfg.embed_dim
    }

    fn basin_weight(&self, x: &[f64], target: &MemorizedTarget) -> f64 {
        let d = dist(x, &target.target);
        (-(d * d) / (2.0 * self.cfg.capture_width * self.cfg.capture_width)).exp()
    }

    /// Radius of the trigger ball of `target` seen from latent `x`.
    pub fn effective_radius(&self, x: &[f64], target: &MemorizedTarget) -> f64 {
        target.radius * (1.0 + self.cfg.guidance_gain * self.basin_weight(x, target))
    }

    /// Index of the memorized target whose trigger ball contains `e`, if any.
    /// The nearest trigger wins, ties go to the lowest index.
    pub fn active_trigger(&self, x: &[f64], e: &[f64]) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (k, m) in self.cfg.memorized_targets.iter().enumerate() {
            let d = dist(e, &m.trigger);
            if d < self.effective_radius(x, m) && best.is_none_or(|(_, bd)| d < bd) {
                best = Some((k, d));
            }
        }
        best.map(|(k, _)| k)
    }

    /// Whether `e` lies in a trigger ball at its base radius.
    pub fn is_triggered_caption(&self, e: &[f64]) -> bool {
        self.cfg
            .memorized_targets
            .iter()
            .any(|m| dist(e, &m.trigger) < m.radius)
    }

    /// Memorized target associated with a caption: the nearest trigger whose
    /// base ball contains it.
    pub fn caption_target(&self, e: &[f64]) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (k, m) in self.cfg.memorized_targets.iter().enumerate() {
            let d = dist(e, &m.trigger);
            if d < m.radius && best.is_none_or(|(_, bd)| d < bd) {
                best = Some((k, d));
            }
        }
        best.map(|(k, _)| k)
    }

    pub fn triggered_captions(&self) -> Vec<CaptionEmbedding> {
        self.cfg
            .captions
            .iter()
            .filter(|c| self.is_triggered_caption(&c.e))
            .cloned()
            .collect()
    }

    pub fn untriggered_captions(&self) -> Vec<CaptionEmbedding> {
        self.cfg
            .captions
            .iter()
            .filter(|c| !self.is_triggered_caption(&c.e))
            .cloned()
            .collect()
    }

    fn conditional_target(&self, x: &[f64], e: &[f64]) -> Vec<f64> {
        match self.active_trigger(x, e) {
            Some(k) => self.cfg.memorized_targets[k].target.clone(),
            None => mat_vec(&self.cfg.cond_map, e),
        }
    }

    fn check_query(&self, x: &[f64], e: Option<&[f64]>, step: usize) -> Result<()> {
        check_len("latent", self.cfg.latent_dim, x.len())?;
        check_finite("latent", x)?;
        if let Some(e) = e {
            check_len("caption embedding", self.cfg.embed_dim, e.len())?;
            check_finite("caption embedding", e)?;
        }
        if step > self.cfg.horizon {
            return Err(Error::Config(format!(
                "denoising step {step} outside [0, {}]",
                self.cfg.horizon
            )));
        }
        Ok(())
    }

    /// Noise prediction `ε̂(x, e)`; `e = None` is the unconditional branch.
    ///
    /// `step` is the denoising index `τ = T − t`; the toy field does not
    /// depend on it but it is validated.
    pub fn predict_noise(&self, x: &[f64], e: Option<&[f64]>, step: usize) -> Result<Vec<f64>> {
        self.check_query(x, e, step)?;
        let pull = match e {
            None => self.cfg.base_attractor.clone(),
            Some(e) => self.conditional_target(x, e),
        };
        Ok(sub(x, &pull))
    }

    /// `ε(x, e) − ε(x, ∅)`.
    pub fn guidance_vector(&self, x: &[f64], e: &[f64], step: usize) -> Result<Vec<f64>> {
        let cond = self.predict_noise(x, Some(e), step)?;
        let uncond = self.predict_noise(x, None, step)?;
        Ok(sub(&cond, &uncond))
    }

    pub fn guidance_norm(&self, x: &[f64], e: &[f64], step: usize) -> Result<f64> {
        Ok(norm(&self.guidance_vector(x, e, step)?))
    }

    /// Advances the system by one denoising step under the steered embedding.
    pub fn step(&self, s: &SystemState, e_steered: &[f64], noise: &NoiseDraw) -> Result<SystemState> {
        let t_max = self.cfg.horizon;
        if s.step >= t_max {
            return Err(Error::TerminalState {
                step: s.step,
                horizon: t_max,
            });
        }
        check_len("noise", self.cfg.latent_dim, noise.omega.len())?;
        let tau = t_max - s.step;
        let eps_c = self.predict_noise(&s.x, Some(e_steered), tau)?;
        let eps_u = self.predict_noise(&s.x, None, tau)?;
        let alpha = self.cfg.step_sizes[tau - 1];
        let g = self.cfg.guidance_scale;
        let sigma = match self.cfg.noise_mode {
            NoiseMode::Ddim => 0.0,
            NoiseMode::Ddpm => self.cfg.noise_std,
        };
        let x = (0..s.x.len())
            .map(|i| {
                let guided = eps_u[i] + g * (eps_c[i] - eps_u[i]);
                s.x[i] - alpha * guided + sigma * noise.omega[i]
            })
            .collect();
        Ok(SystemState::new(x, s.step + 1))
    }

    /// Policy input: scaled latent, normalized step and the base embedding.
    pub fn observation(&self, s: &SystemState, e_base: &[f64]) -> Vec<f64> {
        let mut obs = Vec::with_capacity(self.observation_dim());
        obs.extend(s.x.iter().map(|v| v / self.cfg.observation_scale));
        obs.push(s.step as f64 / self.cfg.horizon as f64);
        obs.extend_from_slice(e_base);
        obs
    }

    pub fn sample_initial_latent(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..self.cfg.latent_dim)
            .map(|_| self.cfg.init_std * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    pub fn distance_to_nearest_target(&self, x: &[f64]) -> Option<f64> {
        self.cfg
            .memorized_targets
            .iter()
            .map(|m| dist(x, &m.target))
            .min_by(|a, b| a.total_cmp(b))
    }

    /// Runs one episode of `T` steps for `caption` under `policy`.
    ///
    /// The initial latent and the policy's sampling noise come from
    /// independent streams derived from `seed`, so DDIM rollouts are a pure
    /// function of `(seed, policy)`. At the terminal state the policy is asked
    /// for one more action; it only selects the embedding used to evaluate
    /// `ℓ(s_T)` and is never applied to the dynamics.
    pub fn rollout<P, C>(
        &self,
        codec: &C,
        target: &TargetFnParams,
        caption: &CaptionEmbedding,
        policy: &P,
        seed: u64,
    ) -> Result<Episode>
    where
        P: ActionSource + ?Sized,
        C: ActionCodec + ?Sized,
    {
        let mut state_rng = rng::stream(seed, &[tag::ROLLOUT_STATE]);
        let mut policy_rng = rng::stream(seed, &[tag::ROLLOUT_POLICY]);
        let x_init = self.sample_initial_latent(&mut state_rng);
        self.rollout_from(codec, target, caption, policy, x_init, &mut state_rng, &mut policy_rng)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn rollout_from<P, C>(
        &self,
        codec: &C,
        target: &TargetFnParams,
        caption: &CaptionEmbedding,
        policy: &P,
        x_init: Vec<f64>,
        state_rng: &mut ChaCha8Rng,
        policy_rng: &mut ChaCha8Rng,
    ) -> Result<Episode>
    where
        P: ActionSource + ?Sized,
        C: ActionCodec + ?Sized,
    {
        check_len("policy action dim", self.cfg.action_dim, policy.action_dim())?;
        let t_max = self.cfg.horizon;
        let e_base = &caption.e;
        let mut s = SystemState::new(x_init, 0);
        let mut transitions = Vec::with_capacity(t_max);
        let mut trace = Vec::with_capacity(t_max + 1);

        let mut obs = self.observation(&s, e_base);
        for t in 0..t_max {
            let u = checked_action(policy.act(&obs, policy_rng)?, self.cfg.action_dim)?;
            let e_steered = codec.steer(e_base, &u)?;
            let g_norm = self.guidance_norm(&s.x, &e_steered, t_max - t)?;
            let ell = target_ell_from_norm(g_norm, target);
            trace.push(StepTrace {
                step: t,
                guidance_norm: g_norm,
                ell,
                reward: 0.0,
                distance_to_nearest_target: self.distance_to_nearest_target(&s.x),
            });

            let noise = NoiseDraw::draw(self.cfg.noise_mode, self.cfg.latent_dim, state_rng);
            let next = self.step(&s, &e_steered, &noise)?;
            check_finite("latent after step", &next.x)?;
            let next_obs = self.observation(&next, e_base);
            let terminal = next.step == t_max;

            let (reward, terminal_ell) = if terminal {
                let u_t = checked_action(policy.act(&next_obs, policy_rng)?, self.cfg.action_dim)?;
                let e_t = codec.steer(e_base, &u_t)?;
                let g_t = self.guidance_norm(&next.x, &e_t, 0)?;
                let ell_t = target_ell_from_norm(g_t, target);
                let r = crate::agent::compute_reward(&next, e_base, self)?;
                trace.push(StepTrace {
                    step: t_max,
                    guidance_norm: g_t,
                    ell: ell_t,
                    reward: r,
                    distance_to_nearest_target: self.distance_to_nearest_target(&next.x),
                });
                (r, Some(ell_t))
            } else {
                (0.0, None)
            };

            transitions.push(Transition {
                state: s.clone(),
                obs: std::mem::take(&mut obs),
                action: u,
                reward,
                ell,
                next_state: next.clone(),
                next_obs: next_obs.clone(),
                terminal,
                terminal_ell,
            });
            obs = next_obs;
            s = next;
        }

        let last = transitions.last().expect("horizon >= 1");
        Ok(Episode {
            reward: last.reward,
            terminal_ell: last.terminal_ell.expect("last transition is terminal"),
            final_x: s.x,
            transitions,
            trace,
        })
    }
}

fn checked_action(u: Vec<f64>, dim: usize) -> Result<Vec<f64>> {
    check_len("action", dim, u.len())?;
    check_finite("action", &u)?;
    if u.iter().any(|v| v.abs() > 1.0) {
        return Err(Error::Config("policy produced an action outside [-1, 1]".into()));
    }
    Ok(u)
}
