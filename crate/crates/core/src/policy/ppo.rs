//! Clipped-surrogate policy optimisation: advantage estimation, the loss and
//! its gradient with respect to the network outputs, and the optimiser.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dist::{entropy, log_prob};
use super::net::{PolicyNet, ACTION_DIM};
use super::real::Real;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub clip_ratio: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub learning_rate: f64,
    pub rollout_horizon: usize,
    pub minibatch_size: usize,
    pub epochs_per_update: usize,
    pub total_steps: usize,
    pub seed: u64,
    pub vf_coef: f64,
    pub ent_coef: f64,
    pub max_grad_norm: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            clip_ratio: 0.2,
            gamma: 0.99,
            gae_lambda: 0.95,
            learning_rate: 3e-4,
            rollout_horizon: 2048,
            minibatch_size: 64,
            epochs_per_update: 10,
            total_steps: 200_000,
            seed: 0,
            vf_coef: 0.5,
            ent_coef: 0.0,
            max_grad_norm: 0.5,
            adam_eps: 1e-5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.clip_ratio > 0.0 && self.clip_ratio < 1.0) {
            return bad("train.clip_ratio must be in (0, 1)");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0 && self.gae_lambda > 0.0 && self.gae_lambda <= 1.0) {
            return bad("train.gamma and train.gae_lambda must be in (0, 1]");
        }
        if !(self.learning_rate > 0.0) || self.rollout_horizon == 0 || self.minibatch_size == 0 || self.epochs_per_update == 0 {
            return bad("train.learning_rate, rollout_horizon, minibatch_size and epochs_per_update must be positive");
        }
        if !(self.max_grad_norm > 0.0 && self.adam_eps > 0.0 && self.vf_coef >= 0.0 && self.ent_coef >= 0.0) {
            return bad("train.max_grad_norm and adam_eps must be positive, coefficients non-negative");
        }
        Ok(())
    }
}

/// Aligned per-step rollout arrays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RolloutBatch {
    /// `len × obs_len` network inputs.
    pub observations: Vec<f32>,
    pub obs_len: usize,
    /// Pre-clamp actions.
    pub actions: Vec<[f64; ACTION_DIM]>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    /// The episode ended with this step.
    pub terminals: Vec<bool>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn is_aligned(&self) -> bool {
        let n = self.len();
        self.observations.len() == n * self.obs_len
            && [self.actions.len(), self.log_probs.len(), self.values.len(), self.terminals.len()]
                .iter()
                .all(|&l| l == n)
            && (self.advantages.is_empty() || (self.advantages.len() == n && self.returns.len() == n))
    }

    /// Fill advantages and returns; `last_value` bootstraps a rollout that
    /// stops mid-episode.
    pub fn finish(&mut self, last_value: f64, gamma: f64, lambda: f64) {
        let (a, r) = gae(&self.rewards, &self.values, &self.terminals, last_value, gamma, lambda);
        self.advantages = a;
        self.returns = r;
    }
}

/// Generalized advantage estimation with resets at episode ends.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    terminals: &[bool],
    last_value: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let next_value = if t + 1 < n { values[t + 1] } else { last_value };
        let live = if terminals[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        running = delta + gamma * lambda * live * running;
        adv[t] = running;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// `min(r·A, clip(r, 1−ε, 1+ε)·A)`.
pub fn surrogate_term(ratio: f64, advantage: f64, eps: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - eps, 1.0 + eps) * advantage)
}

pub fn normalize(values: &mut [f64]) {
    if values.is_empty() {
        return;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt() + 1e-8;
    for v in values {
        *v = (*v - mean) / std;
    }
}

/// One minibatch worth of training targets.
#[derive(Debug, Clone, Copy)]
pub struct Minibatch<'a, T> {
    pub observations: &'a [T],
    pub actions: &'a [[f64; ACTION_DIM]],
    pub old_log_probs: &'a [f64],
    pub advantages: &'a [f64],
    pub returns: &'a [f64],
}

impl<T> Minibatch<'_, T> {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub total: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

/// Loss and (optionally) its parameter gradient for one minibatch.
pub fn ppo_loss_grad<T: Real>(
    net: &PolicyNet<T>,
    mb: &Minibatch<'_, T>,
    cfg: &TrainConfig,
    want_grad: bool,
) -> Result<(LossParts, Option<Vec<T>>)> {
    let b = mb.len();
    let cache = net.forward_batch(mb.observations, b)?;
    let ls = net.log_std();
    let log_std = [ls[0].to_f64(), ls[1].to_f64()];
    let inv_var = [(-2.0 * log_std[0]).exp(), (-2.0 * log_std[1]).exp()];
    let eps = cfg.clip_ratio;
    let bf = b as f64;

    let mut parts = LossParts::default();
    let mut d_means = vec![T::ZERO; b * ACTION_DIM];
    let mut d_values = vec![T::ZERO; b];
    let mut d_log_std = [0.0; ACTION_DIM];
    for i in 0..b {
        let mean = [cache.means[2 * i].to_f64(), cache.means[2 * i + 1].to_f64()];
        let a = &mb.actions[i];
        let lp = log_prob(a, &mean, &log_std);
        let log_ratio = lp - mb.old_log_probs[i];
        let ratio = log_ratio.exp();
        let adv = mb.advantages[i];
        parts.policy -= surrogate_term(ratio, adv, eps) / bf;
        parts.approx_kl += ((ratio - 1.0) - log_ratio) / bf;
        if (ratio - 1.0).abs() > eps {
            parts.clip_fraction += 1.0 / bf;
        }
        // The unclipped branch carries the gradient whenever it is the minimum.
        if ratio * adv <= ratio.clamp(1.0 - eps, 1.0 + eps) * adv {
            let dlp = -ratio * adv / bf;
            for k in 0..ACTION_DIM {
                let diff = a[k] - mean[k];
                d_means[2 * i + k] = T::from_f64(dlp * diff * inv_var[k]);
                d_log_std[k] += dlp * (diff * diff * inv_var[k] - 1.0);
            }
        }
        let v = cache.values[i].to_f64();
        let err = v - mb.returns[i];
        parts.value += err * err / bf;
        d_values[i] = T::from_f64(cfg.vf_coef * 2.0 * err / bf);
    }
    parts.entropy = entropy(&log_std);
    for d in &mut d_log_std {
        *d -= cfg.ent_coef;
    }
    parts.total = parts.policy + cfg.vf_coef * parts.value - cfg.ent_coef * parts.entropy;
    if !parts.total.is_finite() {
        return Err(Error::NonFiniteLoss(format!(
            "policy {} value {} entropy {} (log_std {:?})",
            parts.policy, parts.value, parts.entropy, log_std
        )));
    }
    let grad = want_grad.then(|| {
        net.backward(
            mb.observations,
            &cache,
            &d_means,
            &d_values,
            [T::from_f64(d_log_std[0]), T::from_f64(d_log_std[1])],
        )
    });
    Ok((parts, grad))
}

/// Adam with bias correction; `eps` is added after the square root.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f32>,
    v: Vec<f32>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize, lr: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32]) {
        self.t += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = (self.lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let eps = self.eps as f32;
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            params[i] -= step * self.m[i] / (self.v[i].sqrt() / bc2_sqrt + eps);
        }
    }
}

/// Scale `grads` so their global L2 norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut [f32], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| (*g as f64) * (*g as f64)).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = (max_norm / (norm + 1e-6)) as f32;
        for g in grads {
            *g *= scale;
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub minibatches: usize,
}

/// Several epochs of shuffled minibatch steps over one rollout. On a
/// non-finite loss the parameters are restored and the error returned.
pub fn ppo_update(
    net: &mut PolicyNet<f32>,
    adam: &mut Adam,
    batch: &RolloutBatch,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<UpdateStats> {
    if !batch.is_aligned() || batch.advantages.len() != batch.len() {
        return Err(Error::Protocol("rollout batch arrays are not aligned".into()));
    }
    let n = batch.len();
    let mut adv = batch.advantages.clone();
    normalize(&mut adv);
    let snapshot = net.params.clone();
    let adam_snapshot = adam.clone();
    let mut stats = UpdateStats::default();
    let mut idx: Vec<usize> = (0..n).collect();
    let ol = batch.obs_len;
    let mut obs = Vec::with_capacity(cfg.minibatch_size * ol);
    for _ in 0..cfg.epochs_per_update {
        idx.shuffle(rng);
        for chunk in idx.chunks(cfg.minibatch_size) {
            obs.clear();
            for &i in chunk {
                obs.extend_from_slice(&batch.observations[i * ol..(i + 1) * ol]);
            }
            let actions: Vec<_> = chunk.iter().map(|&i| batch.actions[i]).collect();
            let old: Vec<_> = chunk.iter().map(|&i| batch.log_probs[i]).collect();
            let a: Vec<_> = chunk.iter().map(|&i| adv[i]).collect();
            let r: Vec<_> = chunk.iter().map(|&i| batch.returns[i]).collect();
            let mb = Minibatch {
                observations: &obs,
                actions: &actions,
                old_log_probs: &old,
                advantages: &a,
                returns: &r,
            };
            let (parts, grad) = match ppo_loss_grad(net, &mb, cfg, true) {
                Ok(v) => v,
                Err(e) => {
                    net.params = snapshot;
                    *adam = adam_snapshot;
                    return Err(e);
                }
            };
            let mut grad = grad.expect("gradient requested");
            if grad.iter().any(|g| !g.is_finite()) {
                net.params = snapshot;
                *adam = adam_snapshot;
                return Err(Error::NonFiniteLoss("non-finite gradient".into()));
            }
            clip_grad_norm(&mut grad, cfg.max_grad_norm);
            adam.step(&mut net.params, &grad);
            stats.policy_loss += parts.policy;
            stats.value_loss += parts.value;
            stats.entropy += parts.entropy;
            stats.approx_kl += parts.approx_kl;
            stats.clip_fraction += parts.clip_fraction;
            stats.minibatches += 1;
        }
    }
    let m = stats.minibatches.max(1) as f64;
    stats.policy_loss /= m;
    stats.value_loss /= m;
    stats.entropy /= m;
    stats.approx_kl /= m;
    stats.clip_fraction /= m;
    Ok(stats)
}
