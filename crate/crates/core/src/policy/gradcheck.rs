//! Finite-difference verification of the hand-written backward pass.

use super::net::PolicyNet;
use super::ppo::{ppo_loss_grad, Minibatch, TrainConfig};
use crate::error::Result;

/// Step for central differences.
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradSubset {
    All,
    /// Action head, value head and log-std only.
    Heads,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compare the analytic gradient of the training loss against central
/// differences. `inject_fault` corrupts the analytic gradient of the first
/// checked block to prove the check can fail.
pub fn grad_check(
    net: &PolicyNet<f64>,
    mb: &Minibatch<'_, f64>,
    cfg: &TrainConfig,
    subset: GradSubset,
    inject_fault: bool,
) -> Result<GradCheckReport> {
    let (_, grad) = ppo_loss_grad(net, mb, cfg, true)?;
    let mut analytic = grad.expect("gradient requested");
    let range = match subset {
        GradSubset::All => 0..net.n_params(),
        GradSubset::Heads => net.head_range(),
    };
    if inject_fault {
        let faulty = match subset {
            GradSubset::All => net.first_conv_range(),
            GradSubset::Heads => range.clone(),
        };
        for g in &mut analytic[faulty] {
            *g *= 1.1;
        }
    }
    let mut probe = net.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_index: 0,
        checked: 0,
    };
    for i in range {
        let orig = probe.params[i];
        probe.params[i] = orig + FD_STEP;
        let plus = ppo_loss_grad(&probe, mb, cfg, false)?.0.total;
        probe.params[i] = orig - FD_STEP;
        let minus = ppo_loss_grad(&probe, mb, cfg, false)?.0.total;
        probe.params[i] = orig;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let err = relative_error(analytic[i], numeric);
        if err > report.max_relative_error {
            report.max_relative_error = err;
            report.worst_index = i;
        }
        report.checked += 1;
    }
    Ok(report)
}

/// A deterministic probe minibatch for the reduced network: random inputs,
/// ratios kept away from the clip boundaries.
pub fn probe_minibatch(net: &PolicyNet<f64>, n: usize, seed: u64) -> Result<ProbeData> {
    use super::dist::log_prob;
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let observations: Vec<f64> = (0..n * net.spec.input_len()).map(|_| rng.random()).collect();
    let cache = net.forward_batch(&observations, n)?;
    let ls = net.log_std();
    let mut actions = Vec::with_capacity(n);
    let mut old_log_probs = Vec::with_capacity(n);
    let offsets = [-0.5, -0.1, -0.03, 0.04, 0.12, 0.45];
    for i in 0..n {
        let a = [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)];
        let lp = log_prob(&a, &[cache.means[2 * i], cache.means[2 * i + 1]], &ls);
        actions.push(a);
        old_log_probs.push(lp + offsets[i % offsets.len()]);
    }
    let advantages = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let returns = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Ok(ProbeData {
        observations,
        actions,
        old_log_probs,
        advantages,
        returns,
    })
}

#[derive(Debug, Clone)]
pub struct ProbeData {
    pub observations: Vec<f64>,
    pub actions: Vec<[f64; 2]>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl ProbeData {
    pub fn minibatch(&self) -> Minibatch<'_, f64> {
        Minibatch {
            observations: &self.observations,
            actions: &self.actions,
            old_log_probs: &self.old_log_probs,
            advantages: &self.advantages,
            returns: &self.returns,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::net::NetSpec;

    fn setup_with_head_scale(scale: f64) -> (PolicyNet<f64>, ProbeData, TrainConfig) {
        let mut net = PolicyNet::<f64>::init(NetSpec::reduced(), 11).unwrap();
        let heads = net.head_range();
        for p in &mut net.params[heads] {
            *p *= scale;
        }
        let n = net.n_params();
        net.params[n - 2] = -0.3;
        net.params[n - 1] = 0.2;
        let data = probe_minibatch(&net, 6, 4).unwrap();
        let cfg = TrainConfig {
            ent_coef: 0.01,
            ..Default::default()
        };
        (net, data, cfg)
    }

    /// Enlarged heads so every term of the loss is exercised.
    fn setup() -> (PolicyNet<f64>, ProbeData, TrainConfig) {
        setup_with_head_scale(30.0)
    }

    #[test]
    fn heads_only_is_near_exact() {
        let (net, data, cfg) = setup_with_head_scale(1.0);
        let r = grad_check(&net, &data.minibatch(), &cfg, GradSubset::Heads, false).unwrap();
        assert!(r.max_relative_error <= 1e-8, "{r:?}");
    }

    #[test]
    fn full_reduced_net_within_tolerance() {
        let (net, data, cfg) = setup();
        let r = grad_check(&net, &data.minibatch(), &cfg, GradSubset::All, false).unwrap();
        assert_eq!(r.checked, net.n_params());
        assert!(r.max_relative_error <= 1e-4, "{r:?}");
    }

    #[test]
    fn injected_fault_is_detected() {
        let (net, data, cfg) = setup();
        let r = grad_check(&net, &data.minibatch(), &cfg, GradSubset::All, true).unwrap();
        assert!(r.max_relative_error > 1e-2, "{r:?}");
    }
}
