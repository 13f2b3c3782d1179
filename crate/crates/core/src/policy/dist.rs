//! Diagonal Gaussian action distribution with state-independent log-std.

use rand::Rng;
use rand_distr::StandardNormal;

use super::net::ACTION_DIM;
use crate::env::PolicyAction;

/// `ln √(2π)`.
pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

pub fn log_prob(action: &[f64; ACTION_DIM], mean: &[f64; ACTION_DIM], log_std: &[f64; ACTION_DIM]) -> f64 {
    (0..ACTION_DIM)
        .map(|i| {
            let z = (action[i] - mean[i]) / log_std[i].exp();
            -0.5 * z * z - log_std[i] - LN_SQRT_2PI
        })
        .sum()
}

pub fn entropy(log_std: &[f64; ACTION_DIM]) -> f64 {
    log_std.iter().map(|s| 0.5 + LN_SQRT_2PI + s).sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampledAction {
    /// Clamped action sent to the environment.
    pub action: PolicyAction,
    /// Pre-clamp draw; the log-probability refers to this value.
    pub raw: [f64; ACTION_DIM],
    pub log_prob: f64,
}

pub fn sample_action<R: Rng>(mean: &[f64; ACTION_DIM], log_std: &[f64; ACTION_DIM], rng: &mut R) -> SampledAction {
    let mut raw = [0.0; ACTION_DIM];
    for i in 0..ACTION_DIM {
        let z: f64 = rng.sample(StandardNormal);
        raw[i] = mean[i] + log_std[i].exp() * z;
    }
    SampledAction {
        action: PolicyAction::new(raw[0], raw[1]),
        raw,
        log_prob: log_prob(&raw, mean, log_std),
    }
}

/// Mean action, clamped: the deterministic policy used for evaluation.
pub fn mean_action(mean: &[f64; ACTION_DIM]) -> PolicyAction {
    PolicyAction::new(mean[0], mean[1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn degenerate_std_returns_clamped_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ls = [1e-9f64.ln(); 2];
        let s = sample_action(&[0.3, -0.7], &ls, &mut rng);
        assert!((s.action.a_x - 0.3).abs() < 1e-7 && (s.action.a_y + 0.7).abs() < 1e-7);
        let s = sample_action(&[5.0, 5.0], &[0.0; 2], &mut rng);
        let s2 = sample_action(&[5.0, 5.0], &ls, &mut rng);
        assert!(s.action.a_x <= 1.0);
        assert_eq!((s2.action.a_x, s2.action.a_y), (1.0, 1.0));
    }

    #[test]
    fn seeded_samples_repeat() {
        let draw = || sample_action(&[0.1, 0.2], &[-0.5, 0.0], &mut ChaCha8Rng::seed_from_u64(42));
        assert_eq!(draw(), draw());
    }

    #[test]
    fn log_prob_of_mean_and_entropy() {
        let lp = log_prob(&[0.0, 0.0], &[0.0, 0.0], &[0.0, 0.0]);
        assert!((lp + 2.0 * LN_SQRT_2PI).abs() < 1e-15);
        // Entropy of a unit normal: ½ ln(2πe) per dimension.
        let h = entropy(&[0.0, 0.0]);
        assert!((h - (2.0 * std::f64::consts::PI * std::f64::consts::E).ln()).abs() < 1e-12);
    }
}
