//! Rollout collection, the update loop, and policy evaluation.

use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dist::{mean_action, sample_action};
use super::net::{NetSpec, PolicyNet};
use super::ppo::{ppo_update, Adam, RolloutBatch, TrainConfig};
use crate::camera::{OBS_HEIGHT, OBS_WIDTH};
use crate::env::{Env, EnvConfig, PolicyAction, Terminal};
use crate::error::{Error, Result};
use crate::scene::{build_scene, SceneConfig};
use crate::seed::derive;

/// Scene and environment settings that episodes are drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeSetup {
    pub scene: SceneConfig,
    pub env: EnvConfig,
}

impl Default for EpisodeSetup {
    fn default() -> Self {
        EpisodeSetup::training()
    }
}

impl EpisodeSetup {
    /// Desk-scale training: four spindle models, 80×40 observations and a
    /// wider lateral start spread than the environment default.
    pub fn training() -> Self {
        let scene = SceneConfig {
            model_pool: vec![0, 1, 2, 3],
            ..SceneConfig::default()
        };
        let env = EnvConfig {
            obs_scale: 2,
            start_lateral_jitter: 0.03,
            ..EnvConfig::default()
        };
        EpisodeSetup { scene, env }
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.env.validate()
    }

    pub fn net_spec(&self) -> NetSpec {
        NetSpec::nature(OBS_HEIGHT / self.env.obs_scale, OBS_WIDTH / self.env.obs_scale)
    }

    /// A fresh scene and target drawn from `rng`.
    pub fn sample_env(&self, rng: &mut ChaCha8Rng) -> Result<Env> {
        let scene = build_scene(&self.scene, rng.next_u64())?;
        let target = rng.random_range(0..scene.targets.len());
        Env::new(self.env.clone(), scene, target)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub update: usize,
    pub env_steps: usize,
    pub episodes: usize,
    pub mean_episode_reward: f64,
    pub success_rate: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

fn observe_f32(env: &Env) -> Result<Vec<f32>> {
    Ok(env.observe()?.to_normalized::<f32>())
}

/// Train `net` in place. `factory` draws a new episode environment from the
/// training RNG whenever the previous episode ends.
pub fn train<F>(
    mut factory: F,
    net: &mut PolicyNet<f32>,
    cfg: &TrainConfig,
    mut on_update: impl FnMut(&CurvePoint),
) -> Result<Vec<CurvePoint>>
where
    F: FnMut(&mut ChaCha8Rng) -> Result<Env>,
{
    cfg.validate()?;
    let mut curve = Vec::new();
    if cfg.total_steps == 0 {
        return Ok(curve);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(net.n_params(), cfg.learning_rate, cfg.adam_eps);
    let obs_len = net.spec.input_len();

    let mut env = factory(&mut rng)?;
    env.reset(rng.next_u64())?;
    let mut obs = observe_f32(&env)?;
    let mut ep_reward = 0.0;
    let mut steps_done = 0;
    while steps_done < cfg.total_steps {
        let horizon = cfg.rollout_horizon.min(cfg.total_steps - steps_done);
        let mut batch = RolloutBatch {
            obs_len,
            ..Default::default()
        };
        batch.observations.reserve(horizon * obs_len);
        let (mut episodes, mut successes, mut reward_sum) = (0usize, 0usize, 0.0);
        for _ in 0..horizon {
            let (mean, value) = net.forward(&obs)?;
            let ls = net.log_std();
            let s = sample_action(
                &[mean[0] as f64, mean[1] as f64],
                &[ls[0] as f64, ls[1] as f64],
                &mut rng,
            );
            let out = env.step(s.action)?;
            ep_reward += out.reward;
            batch.observations.extend_from_slice(&obs);
            batch.actions.push(s.raw);
            batch.log_probs.push(s.log_prob);
            batch.rewards.push(out.reward);
            batch.values.push(value as f64);
            let done = out.terminal != Terminal::Running;
            batch.terminals.push(done);
            if done {
                episodes += 1;
                successes += usize::from(out.terminal == Terminal::Success);
                reward_sum += ep_reward;
                ep_reward = 0.0;
                env = factory(&mut rng)?;
                env.reset(rng.next_u64())?;
                obs = observe_f32(&env)?;
            } else {
                obs = out.observation.to_normalized::<f32>();
            }
        }
        steps_done += horizon;
        let last_value = if batch.terminals.last() == Some(&true) {
            0.0
        } else {
            net.forward(&obs)?.1 as f64
        };
        batch.finish(last_value, cfg.gamma, cfg.gae_lambda);
        let stats = ppo_update(net, &mut adam, &batch, cfg, &mut rng)?;
        let point = CurvePoint {
            update: curve.len() + 1,
            env_steps: steps_done,
            episodes,
            mean_episode_reward: if episodes > 0 { reward_sum / episodes as f64 } else { f64::NAN },
            success_rate: if episodes > 0 { successes as f64 / episodes as f64 } else { f64::NAN },
            policy_loss: stats.policy_loss,
            value_loss: stats.value_loss,
            entropy: stats.entropy,
            approx_kl: stats.approx_kl,
            clip_fraction: stats.clip_fraction,
        };
        on_update(&point);
        curve.push(point);
    }
    Ok(curve)
}

pub fn write_curve_csv(path: &Path, curve: &[CurvePoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    for p in curve {
        w.serialize(p).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Action source for evaluation episodes.
#[derive(Debug, Clone, Copy)]
pub enum EvalPolicy<'a> {
    /// Deterministic mean action of a trained network.
    Net(&'a PolicyNet<f32>),
    /// Independent uniform draws in `[-1, 1]²`.
    Random,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalStats {
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub mean_reward: f64,
}

/// Run one evaluation episode from an episode seed.
pub fn run_eval_episode(setup: &EpisodeSetup, policy: EvalPolicy<'_>, episode_seed: u64) -> Result<(Terminal, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(episode_seed);
    let mut env = setup.sample_env(&mut rng)?;
    env.reset(rng.next_u64())?;
    let mut total = 0.0;
    loop {
        let action = match policy {
            EvalPolicy::Net(net) => {
                let (m, _) = net.forward(&observe_f32(&env)?)?;
                mean_action(&[m[0] as f64, m[1] as f64])
            }
            EvalPolicy::Random => PolicyAction::new(rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)),
            EvalPolicy::Zero => PolicyAction::default(),
        };
        let (r, t) = env.step_state(action)?;
        total += r;
        if t != Terminal::Running {
            return Ok((t, total));
        }
    }
}

/// Success rate over `episodes` episodes whose seeds derive from `seed`.
/// Episodes run in parallel; the result does not depend on scheduling.
pub fn evaluate(setup: &EpisodeSetup, policy: EvalPolicy<'_>, episodes: usize, seed: u64) -> Result<EvalStats> {
    setup.validate()?;
    let results: Vec<(Terminal, f64)> = (0..episodes)
        .into_par_iter()
        .map(|i| run_eval_episode(setup, policy, derive(seed, &[i as u64])))
        .collect::<Result<_>>()?;
    let successes = results.iter().filter(|(t, _)| *t == Terminal::Success).count();
    let n = episodes.max(1) as f64;
    Ok(EvalStats {
        episodes,
        successes,
        success_rate: successes as f64 / n,
        mean_reward: results.iter().map(|(_, r)| r).sum::<f64>() / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_setup() -> EpisodeSetup {
        EpisodeSetup::training()
    }

    fn tiny_cfg(total: usize) -> TrainConfig {
        TrainConfig {
            total_steps: total,
            rollout_horizon: 64,
            minibatch_size: 32,
            epochs_per_update: 2,
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn zero_steps_leaves_parameters_unchanged() {
        let setup = tiny_setup();
        let mut net = PolicyNet::<f32>::init(setup.net_spec(), 1).unwrap();
        let before = net.clone();
        let curve = train(|r| setup.sample_env(r), &mut net, &tiny_cfg(0), |_| {}).unwrap();
        assert!(curve.is_empty());
        assert_eq!(net, before);
    }

    #[test]
    fn same_seed_same_curve() {
        let setup = tiny_setup();
        let run = || {
            let mut net = PolicyNet::<f32>::init(setup.net_spec(), 1).unwrap();
            let curve = train(|r| setup.sample_env(r), &mut net, &tiny_cfg(128), |_| {}).unwrap();
            (curve, net)
        };
        let (c1, n1) = run();
        let (c2, n2) = run();
        assert_eq!(c1.len(), 2);
        assert_eq!(c1, c2);
        assert_eq!(n1, n2);
        assert_ne!(n1, PolicyNet::<f32>::init(setup.net_spec(), 1).unwrap());
    }

    #[test]
    fn evaluation_is_deterministic() {
        let setup = tiny_setup();
        let a = evaluate(&setup, EvalPolicy::Random, 20, 3).unwrap();
        let b = evaluate(&setup, EvalPolicy::Random, 20, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.episodes, 20);
    }
}
