use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::policy::{squash_head_gradient, squash_sample, SquashedSample};
use crate::approximator::{AdamConfig, BatchCache, Checkpoint, Net, OptimState, Tensor};
use crate::dynamics::Transition;
use crate::error::{check_len, Error, Result};
use crate::reachability::safety_backup;
use crate::rng::{self, tag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    /// Hidden layer widths shared by the policy and all critics.
    pub hidden: Vec<usize>,
    pub gamma: f64,
    pub polyak_tau: f64,
    /// Lower bound on the expected safety value.
    pub delta: f64,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub lr_alpha: f64,
    pub lr_lambda: f64,
    pub init_alpha: f64,
    pub init_lambda: f64,
    /// Defaults to `−action_dim`.
    pub target_entropy: Option<f64>,
    /// Keep the multiplier fixed at `init_lambda` (the unconstrained ablation).
    pub freeze_lambda: bool,
    pub batch_size: usize,
    pub replay_capacity: usize,
    pub rollouts_per_epoch: usize,
    /// Gradient updates per collected transition.
    pub updates_per_step: f64,
    pub epochs: usize,
    pub eval_every: usize,
    pub eval_rollouts: usize,
    pub divergence_threshold: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64, 64],
            gamma: 0.99,
            polyak_tau: 0.005,
            delta: 0.0,
            lr_actor: 1e-4,
            lr_critic: 3e-5,
            lr_alpha: 3e-5,
            lr_lambda: 3e-5,
            init_alpha: 0.05,
            init_lambda: 1.0,
            target_entropy: None,
            freeze_lambda: false,
            batch_size: 64,
            replay_capacity: 50_000,
            rollouts_per_epoch: 32,
            updates_per_step: 1.0,
            epochs: 90,
            eval_every: 5,
            eval_rollouts: 32,
            divergence_threshold: 1e6,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("agent.hidden must list positive widths");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("agent.gamma must be in (0, 1]");
        }
        if !(self.polyak_tau > 0.0 && self.polyak_tau <= 1.0) {
            return bad("agent.polyak_tau must be in (0, 1]");
        }
        for (name, v) in [
            ("lr_actor", self.lr_actor),
            ("lr_critic", self.lr_critic),
            ("lr_alpha", self.lr_alpha),
            ("lr_lambda", self.lr_lambda),
            ("init_alpha", self.init_alpha),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("agent.{name} must be positive")));
            }
        }
        if !(self.init_lambda >= 0.0) {
            return bad("agent.init_lambda must be >= 0");
        }
        if self.batch_size == 0 || self.replay_capacity < self.batch_size {
            return bad("agent.batch_size must be positive and fit in the replay buffer");
        }
        if self.rollouts_per_epoch == 0 || self.eval_every == 0 || self.eval_rollouts == 0 {
            return bad("agent.rollouts_per_epoch, eval_every and eval_rollouts must be positive");
        }
        if !(self.updates_per_step >= 0.0) {
            return bad("agent.updates_per_step must be >= 0");
        }
        if !(self.divergence_threshold > 0.0) {
            return bad("agent.divergence_threshold must be positive");
        }
        Ok(())
    }
}

/// Minibatch in row-major arrays.
#[derive(Debug, Clone)]
pub struct Batch {
    pub size: usize,
    pub obs_dim: usize,
    pub action_dim: usize,
    pub obs: Vec<f64>,
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub ell: Vec<f64>,
    pub next_obs: Vec<f64>,
    pub terminal: Vec<bool>,
    pub terminal_ell: Vec<f64>,
}

impl Batch {
    pub fn from_transitions(ts: &[&Transition]) -> Result<Self> {
        if ts.is_empty() {
            return Err(Error::InsufficientData {
                available: 0,
                requested: 1,
            });
        }
        let obs_dim = ts[0].obs.len();
        let action_dim = ts[0].action.len();
        let mut b = Batch {
            size: ts.len(),
            obs_dim,
            action_dim,
            obs: Vec::with_capacity(ts.len() * obs_dim),
            actions: Vec::with_capacity(ts.len() * action_dim),
            rewards: Vec::with_capacity(ts.len()),
            ell: Vec::with_capacity(ts.len()),
            next_obs: Vec::with_capacity(ts.len() * obs_dim),
            terminal: Vec::with_capacity(ts.len()),
            terminal_ell: Vec::with_capacity(ts.len()),
        };
        for t in ts {
            check_len("transition observation", obs_dim, t.obs.len())?;
            check_len("transition next observation", obs_dim, t.next_obs.len())?;
            check_len("transition action", action_dim, t.action.len())?;
            b.obs.extend_from_slice(&t.obs);
            b.actions.extend_from_slice(&t.action);
            b.rewards.push(t.reward);
            b.ell.push(t.ell);
            b.next_obs.extend_from_slice(&t.next_obs);
            b.terminal.push(t.terminal);
            b.terminal_ell.push(match (t.terminal, t.terminal_ell) {
                (true, Some(v)) => v,
                (true, None) => {
                    return Err(Error::Config("terminal transition without a terminal margin".into()))
                }
                (false, _) => 0.0,
            });
        }
        Ok(b)
    }
}

fn concat_rows(a: &[f64], a_dim: usize, b: &[f64], b_dim: usize, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * (a_dim + b_dim));
    for i in 0..n {
        out.extend_from_slice(&a[i * a_dim..(i + 1) * a_dim]);
        out.extend_from_slice(&b[i * b_dim..(i + 1) * b_dim]);
    }
    out
}

/// Statistics of one policy step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyStats {
    pub loss: f64,
    /// `E[Q_safe(s, u)]` with `u` drawn from the policy before its update.
    pub mean_q_safe: f64,
    pub mean_log_prob: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UpdateStats {
    pub task_loss: f64,
    pub safety_loss: f64,
    pub policy_loss: f64,
    pub mean_q_safe: f64,
    pub mean_log_prob: f64,
    pub alpha: f64,
    pub lambda: f64,
}

/// `∂/∂ log α` of `E[−α·(log π + target_entropy)]`.
pub fn temperature_gradient(alpha: f64, mean_log_prob: f64, target_entropy: f64) -> f64 {
    -alpha * (mean_log_prob + target_entropy)
}

/// Projected dual step: the multiplier grows while the expected safety value
/// is below `delta`.
pub fn dual_step(lambda: f64, mean_q_safe: f64, delta: f64, lr: f64) -> f64 {
    (lambda - lr * (mean_q_safe - delta)).max(0.0)
}

/// Policy, twin task critics, safety critic, their targets and the two
/// adaptive coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentBundle {
    pub obs_dim: usize,
    pub action_dim: usize,
    pub gamma: f64,
    pub polyak_tau: f64,
    pub delta: f64,
    pub target_entropy: f64,
    pub lr_lambda: f64,
    pub freeze_lambda: bool,
    pub actor: Net,
    pub q1: Net,
    pub q2: Net,
    pub q1_target: Net,
    pub q2_target: Net,
    pub q_safe: Net,
    pub q_safe_target: Net,
    pub actor_opt: OptimState,
    pub q1_opt: OptimState,
    pub q2_opt: OptimState,
    pub q_safe_opt: OptimState,
    pub log_alpha: f64,
    pub alpha_opt: OptimState,
    pub lambda: f64,
}

impl AgentBundle {
    pub fn new(obs_dim: usize, action_dim: usize, cfg: &AgentConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::stream(seed, &[tag::INIT]);
        let layers = |input: usize, output: usize| -> Vec<usize> {
            let mut s = vec![input];
            s.extend_from_slice(&cfg.hidden);
            s.push(output);
            s
        };
        let actor = Net::new(&layers(obs_dim, 2 * action_dim), &mut r)?;
        let critic_sizes = layers(obs_dim + action_dim, 1);
        let q1 = Net::new(&critic_sizes, &mut r)?;
        let q2 = Net::new(&critic_sizes, &mut r)?;
        let q_safe = Net::new(&critic_sizes, &mut r)?;
        let critic_opt = |n: &Net| OptimState::new(n.num_params(), AdamConfig::with_lr(cfg.lr_critic));
        Ok(Self {
            obs_dim,
            action_dim,
            gamma: cfg.gamma,
            polyak_tau: cfg.polyak_tau,
            delta: cfg.delta,
            target_entropy: cfg.target_entropy.unwrap_or(-(action_dim as f64)),
            lr_lambda: cfg.lr_lambda,
            freeze_lambda: cfg.freeze_lambda,
            actor_opt: OptimState::new(actor.num_params(), AdamConfig::with_lr(cfg.lr_actor)),
            q1_opt: critic_opt(&q1),
            q2_opt: critic_opt(&q2),
            q_safe_opt: critic_opt(&q_safe),
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            q_safe_target: q_safe.clone(),
            actor,
            q1,
            q2,
            q_safe,
            log_alpha: cfg.init_alpha.ln(),
            alpha_opt: OptimState::new(1, AdamConfig::with_lr(cfg.lr_alpha)),
            lambda: cfg.init_lambda,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    fn draw_noise(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..self.action_dim).map(|_| rng.sample(StandardNormal)).collect())
            .collect()
    }

    fn policy_samples(&self, obs: &[f64], noise: &[Vec<f64>]) -> Result<(BatchCache, Vec<SquashedSample>)> {
        let n = noise.len();
        let cache = self.actor.forward_batch(obs, n)?;
        let h = 2 * self.action_dim;
        let samples = cache
            .output()
            .chunks_exact(h)
            .zip(noise)
            .map(|(head, xi)| squash_sample(head, xi))
            .collect();
        Ok((cache, samples))
    }

    fn flat_actions(samples: &[SquashedSample]) -> Vec<f64> {
        samples.iter().flat_map(|s| s.action.iter().copied()).collect()
    }

    /// `Q_safe(s, u)` for one observation and action.
    pub fn safety_value(&self, obs: &[f64], action: &[f64]) -> Result<f64> {
        let mut x = obs.to_vec();
        x.extend_from_slice(action);
        Ok(self.q_safe.forward(&x)?[0])
    }

    /// Deterministic policy action `tanh(μ(s))`.
    pub fn greedy_action(&self, obs: &[f64]) -> Result<Vec<f64>> {
        let head = self.actor.forward(obs)?;
        Ok(squash_sample(&head, &vec![0.0; self.action_dim]).action)
    }

    fn regress(net: &mut Net, opt: &mut OptimState, input: &[f64], targets: &[f64]) -> Result<f64> {
        let n = targets.len();
        let cache = net.forward_batch(input, n)?;
        let pred = cache.output();
        let mut loss = 0.0;
        let mut up = Vec::with_capacity(n);
        for i in 0..n {
            let r = pred[i] - targets[i];
            loss += r * r;
            up.push(2.0 * r / n as f64);
        }
        loss /= n as f64;
        if !loss.is_finite() {
            return Err(Error::Divergence("critic loss is not finite".into()));
        }
        let g = net.backward_batch(&cache, &up)?;
        opt.step(net.params_mut(), &g.params)?;
        Ok(loss)
    }

    fn task_targets(&self, b: &Batch, next: &[SquashedSample]) -> Result<Vec<f64>> {
        let n = b.size;
        let input = concat_rows(&b.next_obs, self.obs_dim, &Self::flat_actions(next), self.action_dim, n);
        let t1 = self.q1_target.forward_batch(&input, n)?;
        let t2 = self.q2_target.forward_batch(&input, n)?;
        let alpha = self.alpha();
        Ok((0..n)
            .map(|i| {
                if b.terminal[i] {
                    b.rewards[i]
                } else {
                    let soft = t1.output()[i].min(t2.output()[i]) - alpha * next[i].log_prob;
                    b.rewards[i] + self.gamma * soft
                }
            })
            .collect())
    }

    fn safety_targets(&self, b: &Batch, next: &[SquashedSample]) -> Result<Vec<f64>> {
        let n = b.size;
        let input = concat_rows(&b.next_obs, self.obs_dim, &Self::flat_actions(next), self.action_dim, n);
        let q = self.q_safe_target.forward_batch(&input, n)?;
        Ok((0..n)
            .map(|i| safety_backup(b.ell[i], q.output()[i], self.gamma, b.terminal[i], b.terminal_ell[i]))
            .collect())
    }

    fn check_batch(&self, b: &Batch) -> Result<()> {
        if b.size == 0 {
            return Err(Error::InsufficientData {
                available: 0,
                requested: 1,
            });
        }
        check_len("batch observation dim", self.obs_dim, b.obs_dim)?;
        check_len("batch action dim", self.action_dim, b.action_dim)
    }

    /// Regresses both task critics to soft Bellman targets; returns the summed
    /// mean squared error before the step.
    pub fn update_task_critics(&mut self, b: &Batch, rng: &mut ChaCha8Rng) -> Result<f64> {
        self.check_batch(b)?;
        let noise = self.draw_noise(b.size, rng);
        let (_, next) = self.policy_samples(&b.next_obs, &noise)?;
        self.update_task_critics_with(b, &next)
    }

    fn update_task_critics_with(&mut self, b: &Batch, next: &[SquashedSample]) -> Result<f64> {
        let y = self.task_targets(b, next)?;
        let input = concat_rows(&b.obs, self.obs_dim, &b.actions, self.action_dim, b.size);
        let l1 = Self::regress(&mut self.q1, &mut self.q1_opt, &input, &y)?;
        let l2 = Self::regress(&mut self.q2, &mut self.q2_opt, &input, &y)?;
        Ok(l1 + l2)
    }

    /// Regresses the safety critic to discounted reach-avoid targets; returns
    /// the mean squared error before the step.
    pub fn update_safety_critic(&mut self, b: &Batch, rng: &mut ChaCha8Rng) -> Result<f64> {
        self.check_batch(b)?;
        let noise = self.draw_noise(b.size, rng);
        let (_, next) = self.policy_samples(&b.next_obs, &noise)?;
        self.update_safety_critic_with(b, &next)
    }

    fn update_safety_critic_with(&mut self, b: &Batch, next: &[SquashedSample]) -> Result<f64> {
        let y = self.safety_targets(b, next)?;
        let input = concat_rows(&b.obs, self.obs_dim, &b.actions, self.action_dim, b.size);
        Self::regress(&mut self.q_safe, &mut self.q_safe_opt, &input, &y)
    }

    /// Policy loss `E[α·log π − min(Q₁, Q₂) − λ·Q_safe]` at fixed noise, its
    /// gradient with respect to the actor parameters, and batch statistics.
    pub fn policy_objective(&self, obs: &[f64], noise: &[Vec<f64>]) -> Result<(PolicyStats, Vec<f64>)> {
        let n = noise.len();
        check_len("policy batch observations", n * self.obs_dim, obs.len())?;
        let (cache, samples) = self.policy_samples(obs, noise)?;
        let input = concat_rows(obs, self.obs_dim, &Self::flat_actions(&samples), self.action_dim, n);
        let c1 = self.q1.forward_batch(&input, n)?;
        let c2 = self.q2.forward_batch(&input, n)?;
        let cs = self.q_safe.forward_batch(&input, n)?;
        let alpha = self.alpha();
        let inv = 1.0 / n as f64;

        let mut loss = 0.0;
        let mut mean_qs = 0.0;
        let mut mean_lp = 0.0;
        let mut up1 = vec![0.0; n];
        let mut up2 = vec![0.0; n];
        for i in 0..n {
            let (a, b) = (c1.output()[i], c2.output()[i]);
            let qs = cs.output()[i];
            loss += alpha * samples[i].log_prob - a.min(b) - self.lambda * qs;
            mean_qs += qs;
            mean_lp += samples[i].log_prob;
            if a <= b {
                up1[i] = -inv;
            } else {
                up2[i] = -inv;
            }
        }
        let up_s = vec![-self.lambda * inv; n];
        let g1 = self.q1.backward_batch(&c1, &up1)?;
        let g2 = self.q2.backward_batch(&c2, &up2)?;
        let gs = self.q_safe.backward_batch(&cs, &up_s)?;

        let w = self.obs_dim + self.action_dim;
        let mut head_grad = Vec::with_capacity(n * 2 * self.action_dim);
        for (i, s) in samples.iter().enumerate() {
            let du: Vec<f64> = (0..self.action_dim)
                .map(|j| {
                    let k = i * w + self.obs_dim + j;
                    g1.input[k] + g2.input[k] + gs.input[k]
                })
                .collect();
            head_grad.extend(squash_head_gradient(s, alpha * inv, &du));
        }
        let g = self.actor.backward_batch(&cache, &head_grad)?;
        Ok((
            PolicyStats {
                loss: loss * inv,
                mean_q_safe: mean_qs * inv,
                mean_log_prob: mean_lp * inv,
            },
            g.params,
        ))
    }

    pub fn update_policy(&mut self, b: &Batch, rng: &mut ChaCha8Rng) -> Result<PolicyStats> {
        self.check_batch(b)?;
        let noise = self.draw_noise(b.size, rng);
        let (stats, grad) = self.policy_objective(&b.obs, &noise)?;
        if !stats.loss.is_finite() {
            return Err(Error::Divergence("policy loss is not finite".into()));
        }
        self.actor_opt.step(self.actor.params_mut(), &grad)?;
        Ok(stats)
    }

    /// Temperature step from a batch mean of `log π`; returns the new `α`.
    pub fn temperature_step(&mut self, mean_log_prob: f64) -> Result<f64> {
        let g = temperature_gradient(self.alpha(), mean_log_prob, self.target_entropy);
        let mut p = [self.log_alpha];
        self.alpha_opt.step(&mut p, &[g])?;
        // Keep α inside a range where exp stays finite and positive.
        self.log_alpha = p[0].clamp(-30.0, 10.0);
        Ok(self.alpha())
    }

    pub fn update_temperature(&mut self, b: &Batch, rng: &mut ChaCha8Rng) -> Result<f64> {
        self.check_batch(b)?;
        let noise = self.draw_noise(b.size, rng);
        let (_, samples) = self.policy_samples(&b.obs, &noise)?;
        let mean = samples.iter().map(|s| s.log_prob).sum::<f64>() / b.size as f64;
        self.temperature_step(mean)
    }

    /// Dual step from a batch mean of `Q_safe(s, u ∼ π)`; returns the new `λ`.
    pub fn lambda_step(&mut self, mean_q_safe: f64) -> f64 {
        if !self.freeze_lambda {
            self.lambda = dual_step(self.lambda, mean_q_safe, self.delta, self.lr_lambda);
        }
        self.lambda
    }

    pub fn update_lambda(&mut self, b: &Batch, rng: &mut ChaCha8Rng) -> Result<f64> {
        self.check_batch(b)?;
        let noise = self.draw_noise(b.size, rng);
        let (_, samples) = self.policy_samples(&b.obs, &noise)?;
        let input = concat_rows(&b.obs, self.obs_dim, &Self::flat_actions(&samples), self.action_dim, b.size);
        let qs = self.q_safe.forward_batch(&input, b.size)?;
        let mean = qs.output().iter().sum::<f64>() / b.size as f64;
        Ok(self.lambda_step(mean))
    }

    pub fn polyak_update_targets(&mut self) -> Result<()> {
        self.q1_target.polyak_from(&self.q1, self.polyak_tau)?;
        self.q2_target.polyak_from(&self.q2, self.polyak_tau)?;
        self.q_safe_target.polyak_from(&self.q_safe, self.polyak_tau)
    }

    /// One full update: critics, policy, temperature, multiplier, targets.
    pub fn train_step(&mut self, b: &Batch, rng: &mut ChaCha8Rng, divergence_threshold: f64) -> Result<UpdateStats> {
        self.check_batch(b)?;
        let noise = self.draw_noise(b.size, rng);
        let (_, next) = self.policy_samples(&b.next_obs, &noise)?;
        let task_loss = self.update_task_critics_with(b, &next)?;
        let safety_loss = self.update_safety_critic_with(b, &next)?;
        let p = self.update_policy(b, rng)?;
        let alpha = self.temperature_step(p.mean_log_prob)?;
        let lambda = self.lambda_step(p.mean_q_safe);
        self.polyak_update_targets()?;
        for (name, v) in [("task critic", task_loss), ("safety critic", safety_loss), ("policy", p.loss)] {
            if !v.is_finite() || v.abs() > divergence_threshold {
                return Err(Error::Divergence(format!("{name} loss {v:e}")));
            }
        }
        Ok(UpdateStats {
            task_loss,
            safety_loss,
            policy_loss: p.loss,
            mean_q_safe: p.mean_q_safe,
            mean_log_prob: p.mean_log_prob,
            alpha,
            lambda,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.insert(
            "meta.dims",
            Tensor::vector(vec![self.obs_dim as f64, self.action_dim as f64]),
        );
        ck.insert(
            "meta.coefficients",
            Tensor::vector(vec![
                self.gamma,
                self.polyak_tau,
                self.delta,
                self.target_entropy,
                self.lr_lambda,
                self.freeze_lambda as u8 as f64,
            ]),
        );
        for (name, net) in [
            ("actor", &self.actor),
            ("q1", &self.q1),
            ("q2", &self.q2),
            ("q1_target", &self.q1_target),
            ("q2_target", &self.q2_target),
            ("q_safe", &self.q_safe),
            ("q_safe_target", &self.q_safe_target),
        ] {
            ck.put_net(name, net);
        }
        for (name, opt) in [
            ("actor_opt", &self.actor_opt),
            ("q1_opt", &self.q1_opt),
            ("q2_opt", &self.q2_opt),
            ("q_safe_opt", &self.q_safe_opt),
            ("alpha_opt", &self.alpha_opt),
        ] {
            ck.put_optim(name, opt);
        }
        ck.insert("log_alpha", Tensor::scalar(self.log_alpha));
        ck.insert("lambda", Tensor::scalar(self.lambda));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let dims = &ck.get("meta.dims")?.data;
        let coef = &ck.get("meta.coefficients")?.data;
        if dims.len() != 2 || coef.len() != 6 {
            return Err(Error::Checkpoint("malformed agent metadata".into()));
        }
        let (obs_dim, action_dim) = (dims[0] as usize, dims[1] as usize);
        let bundle = Self {
            obs_dim,
            action_dim,
            gamma: coef[0],
            polyak_tau: coef[1],
            delta: coef[2],
            target_entropy: coef[3],
            lr_lambda: coef[4],
            freeze_lambda: coef[5] != 0.0,
            actor: ck.get_net("actor")?,
            q1: ck.get_net("q1")?,
            q2: ck.get_net("q2")?,
            q1_target: ck.get_net("q1_target")?,
            q2_target: ck.get_net("q2_target")?,
            q_safe: ck.get_net("q_safe")?,
            q_safe_target: ck.get_net("q_safe_target")?,
            actor_opt: ck.get_optim("actor_opt")?,
            q1_opt: ck.get_optim("q1_opt")?,
            q2_opt: ck.get_optim("q2_opt")?,
            q_safe_opt: ck.get_optim("q_safe_opt")?,
            alpha_opt: ck.get_optim("alpha_opt")?,
            log_alpha: ck.scalar("log_alpha")?,
            lambda: ck.scalar("lambda")?,
        };
        let critic_in = obs_dim + action_dim;
        let shapes_ok = bundle.actor.input_dim() == obs_dim
            && bundle.actor.output_dim() == 2 * action_dim
            && [&bundle.q1, &bundle.q2, &bundle.q1_target, &bundle.q2_target, &bundle.q_safe, &bundle.q_safe_target]
                .iter()
                .all(|n| n.input_dim() == critic_in && n.output_dim() == 1)
            && bundle.q1.sizes() == bundle.q1_target.sizes()
            && bundle.q2.sizes() == bundle.q2_target.sizes()
            && bundle.q_safe.sizes() == bundle.q_safe_target.sizes()
            && bundle.actor_opt.m.len() == bundle.actor.num_params()
            && bundle.q1_opt.m.len() == bundle.q1.num_params()
            && bundle.q2_opt.m.len() == bundle.q2.num_params()
            && bundle.q_safe_opt.m.len() == bundle.q_safe.num_params()
            && bundle.alpha_opt.m.len() == 1;
        if !shapes_ok {
            return Err(Error::Checkpoint("network shapes are inconsistent".into()));
        }
        if !(bundle.lambda >= 0.0) {
            return Err(Error::Checkpoint("negative Lagrange multiplier".into()));
        }
        Ok(bundle)
    }
}

/// Draws a minibatch for one update.
pub fn sample_batch(buffer: &super::ReplayBuffer, size: usize, rng: &mut ChaCha8Rng) -> Result<Batch> {
    Batch::from_transitions(&buffer.sample(size, rng)?)
}
