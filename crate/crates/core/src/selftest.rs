//! Invariant suites shared by the `selftest` command and the acceptance run.
//!
//! Each suite returns a [`Check`] with a one-line human summary; none of
//! them panic on a violated property.

use nalgebra::{UnitQuaternion, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::admittance::{
    admittance_step, check_termination, deadzone, force_magnitude, select, AdmittanceController, AdmittanceGains,
    FilterState, TerminationWindow, FY, FZ, TX,
};
use crate::camera::{render_segmented, CameraModel};
use crate::env::{PolicyAction, Terminal};
use crate::error::Result;
use crate::geometry::{ToolPose, Vec3, P2, P3};
use crate::plant::{straight_branch, ContactPlant, ContactScene, PlantParams};
use crate::policy::gradcheck::probe_minibatch;
use crate::policy::{grad_check, EpisodeSetup, GradSubset, NetSpec, PolicyNet, TrainConfig};
use crate::scene::{build_scene, CutterGeometry, CutterProfile, SceneConfig};
use crate::seed::derive;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &'static str, pass: bool, detail: impl Into<String>) -> Self {
        Check {
            name,
            pass,
            detail: detail.into(),
        }
    }
}

/// Deadzone, moving-average filter, selection and admittance arithmetic
/// against hand-computed values (tolerance 1e-12).
pub fn signal_chain() -> Check {
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
    let mut checks = vec![
        close(deadzone(0.5, 0.2), 0.3),
        close(deadzone(-0.5, 0.2), -0.3),
        deadzone(0.1, 0.2) == 0.0,
    ];

    let mut f = FilterState::default();
    let mut out = [0.0; 6];
    for i in 0..26 {
        out = f.push([0.0, 0.0, 0.0, 0.0, 0.0, i as f64]);
    }
    checks.push(close(out[FZ], 12.5));
    for i in 26..80 {
        out = f.push([0.0, 0.0, 0.0, 0.0, 0.0, i as f64]);
    }
    // The last 51 values are 29..=79.
    checks.push(close(out[FZ], 54.0));

    let g = AdmittanceGains::default();
    checks.push(select(&g.selection, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]) == [0.0, 0.0, 0.0, 0.0, 5.0, 6.0]);

    let (a, v) = admittance_step(&g, &[0.0; 6], &[0.0; 6]);
    checks.push(close(a[FZ], 0.18) && close(v[FZ], 0.18 * g.inner_dt) && a[FY] == 0.0 && a[..4] == [0.0; 4]);
    let mut at_des = [0.0; 6];
    at_des[FZ] = g.f_des[FZ];
    let mut twist = [0.0; 6];
    twist[FZ] = 0.01;
    checks.push(close(admittance_step(&g, &at_des, &twist).0[FZ], -0.25));

    let ok = checks.iter().filter(|c| **c).count();
    Check::new(
        "signal chain",
        ok == checks.len(),
        format!("{ok}/{} hand-computed values match", checks.len()),
    )
}

/// A full window with constant `τx` and a linear ramp of `disp` in y and z.
pub fn ramp_window(g: &AdmittanceGains, tau: f64, disp: f64) -> TerminationWindow {
    let mut w = TerminationWindow::from_gains(g);
    let n = g.window_steps() + 1;
    for i in 0..n {
        let d = disp * i as f64 / (n - 1) as f64;
        w.push(tau, d, d);
    }
    w
}

pub fn termination_table() -> Check {
    let g = AdmittanceGains::default();
    let cases = [
        (check_termination(&ramp_window(&g, 0.001, 0.0002), 0.0), true),
        (check_termination(&ramp_window(&g, 0.01, 0.0002), 0.0), false),
        (check_termination(&ramp_window(&g, 0.001, 0.002), 0.0), false),
    ];
    let ok = cases.iter().filter(|(got, want)| got == want).count();
    Check::new("termination table", ok == cases.len(), format!("{ok}/3 cases as specified"))
}

/// Finite-difference check on the reduced network, plus a corrupted
/// gradient that must be caught.
pub fn gradients() -> Result<Check> {
    let mut net = PolicyNet::<f64>::init(NetSpec::reduced(), 11)?;
    let heads = net.head_range();
    // Enlarged heads so every term of the loss is exercised.
    for p in &mut net.params[heads] {
        *p *= 30.0;
    }
    let data = probe_minibatch(&net, 6, 4)?;
    let cfg = TrainConfig {
        ent_coef: 0.01,
        ..Default::default()
    };
    let clean = grad_check(&net, &data.minibatch(), &cfg, GradSubset::All, false)?;
    let faulty = grad_check(&net, &data.minibatch(), &cfg, GradSubset::All, true)?;
    Ok(Check::new(
        "gradient check",
        clean.max_relative_error <= 1e-4 && faulty.max_relative_error > 1e-2,
        format!(
            "{} params, max relative error {:.2e}; injected fault {:.2e}",
            clean.checked, clean.max_relative_error, faulty.max_relative_error
        ),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FunnelOutcome {
    pub pivot_offset: f64,
    pub terminated: bool,
    /// Simulated seconds until termination (or the timeout).
    pub time: f64,
    pub max_sensed: f64,
}

impl FunnelOutcome {
    pub fn centred(&self) -> bool {
        self.terminated && self.pivot_offset < 0.005
    }
}

/// Branch centre lightly touching the inner funnel edge. `side` is ±1 and
/// `u` runs from the pocket mouth (0) to the opening (1).
pub fn funnel_contact(geo: &CutterGeometry, side: f64, u: f64, radius: f64) -> P2 {
    let a = P2::new(geo.pocket_half_width, geo.pocket_depth);
    let b = P2::new(geo.opening_width / 2.0, geo.mouth_depth);
    let e = (b - a).normalize();
    let inward = Vector2::new(-e.y, e.x);
    let c = a + (b - a) * u + inward * (radius - 0.0002);
    P2::new(side * c.x, c.y)
}

/// Admittance control against the contact plant from contact `i` of `n`
/// spread over both funnel edges.
pub fn funnel_trial(master: u64, i: usize, n: usize, timeout: f64) -> Result<FunnelOutcome> {
    let geo = CutterGeometry::default();
    let profile = CutterProfile::new(&geo)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive(master, &[i as u64]));
    let side = if i % 2 == 0 { 1.0 } else { -1.0 };
    let per_side = n.div_ceil(2).max(2);
    let u = 0.05 + 0.9 * (i / 2) as f64 / (per_side - 1) as f64;
    let radius = rng.random_range(0.0035..=0.005);
    let start = funnel_contact(&geo, side, u, radius);

    let origin = ToolPose::facing_trellis(P3::new(rng.random_range(-0.1..0.1), 1.0, -0.2));
    let chain = straight_branch(origin.to_world(&P3::new(0.0, start.x, start.y)), radius);
    let world = ContactScene {
        branch: &chain,
        near_arclength: 0.1,
        leaders: &[],
    };

    let gains = AdmittanceGains::default();
    let mut plant = ContactPlant::new(PlantParams::default(), profile, derive(master, &[i as u64, 1]))?;
    let mut ctl = AdmittanceController::new(gains.clone())?;
    let (ay, az) = (origin.y_axis(), origin.z_axis());
    let mut pose = origin;
    let mut out = FunnelOutcome {
        pivot_offset: f64::INFINITY,
        terminated: false,
        time: 0.0,
        max_sensed: 0.0,
    };
    let ticks = (timeout / gains.inner_dt).round() as usize;
    for k in 0..ticks {
        let v = Vec3::new(0.0, ctl.twist[FY], ctl.twist[FZ]);
        pose = pose.translated_local(&(v * gains.inner_dt));
        let s = plant.tick(&pose, &world);
        out.max_sensed = out.max_sensed.max(force_magnitude(&s.sensed));
        out.pivot_offset = s.branch_center.map_or(f64::INFINITY, |c| c.coords.norm());
        out.time = (k + 1) as f64 * gains.inner_dt;
        let f = ctl.update(s.sensed);
        let d = pose.pivot() - origin.pivot();
        if ctl.observe(f[TX], d.dot(&ay), d.dot(&az)) {
            out.terminated = true;
            break;
        }
    }
    Ok(out)
}

pub fn funnel_suite(master: u64, n: usize) -> Result<Vec<FunnelOutcome>> {
    (0..n).map(|i| funnel_trial(master, i, n, 30.0)).collect()
}

/// At least 95% centred and terminated, every run under 10 N sensed.
pub fn funnel(master: u64, n: usize) -> Result<Check> {
    let runs = funnel_suite(master, n)?;
    let centred = runs.iter().filter(|r| r.centred()).count();
    let under = runs.iter().filter(|r| r.max_sensed < 10.0).count();
    let peak = runs.iter().map(|r| r.max_sensed).fold(0.0, f64::max);
    let slowest = runs.iter().filter(|r| r.terminated).map(|r| r.time).fold(0.0, f64::max);
    Ok(Check::new(
        "closed-loop funnel",
        n > 0 && centred * 100 >= 95 * n && under == n,
        format!("{centred}/{n} centred and terminated (slowest {slowest:.1} s simulated), {under}/{n} below 10 N (peak {peak:.2} N)"),
    ))
}

/// Observed extremes of the reward signal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardBounds {
    pub episodes: usize,
    pub steps: usize,
    pub step_min: f64,
    pub step_max: f64,
    pub total_min: f64,
    pub total_max: f64,
    pub dt: f64,
    pub horizon: f64,
}

impl RewardBounds {
    pub fn holds(&self) -> bool {
        self.step_min >= 0.0 && self.step_max <= self.dt && self.total_min >= -self.horizon && self.total_max <= self.horizon
    }
}

pub fn random_policy_reward_bounds(setup: &EpisodeSetup, master: u64, episodes: usize) -> Result<RewardBounds> {
    let mut b = RewardBounds {
        episodes,
        steps: 0,
        step_min: f64::INFINITY,
        step_max: f64::NEG_INFINITY,
        total_min: f64::INFINITY,
        total_max: f64::NEG_INFINITY,
        dt: setup.env.dt,
        horizon: setup.env.episode_time,
    };
    for e in 0..episodes {
        let mut rng = ChaCha8Rng::seed_from_u64(derive(master, &[e as u64]));
        let mut env = setup.sample_env(&mut rng)?;
        let pose = env.sample_start(&mut rng)?;
        env.reset_at(pose)?;
        let mut total = 0.0;
        loop {
            let a = PolicyAction::new(rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0));
            let (r, t) = env.step_state(a)?;
            b.steps += 1;
            total += r;
            if t != Terminal::Running {
                break;
            }
            b.step_min = b.step_min.min(r);
            b.step_max = b.step_max.max(r);
        }
        b.total_min = b.total_min.min(total);
        b.total_max = b.total_max.max(total);
    }
    Ok(b)
}

pub fn mdp_bounds(master: u64, episodes: usize) -> Result<Check> {
    let b = random_policy_reward_bounds(&EpisodeSetup::training(), master, episodes)?;
    Ok(Check::new(
        "MDP reward bounds",
        b.holds(),
        format!(
            "{} episodes / {} steps: step reward in [{:.4}, {:.4}] (dt {}), totals in [{:.3}, {:.3}] (T {})",
            b.episodes, b.steps, b.step_min, b.step_max, b.dt, b.total_min, b.total_max, b.horizon
        ),
    ))
}

/// Full-resolution renders from randomised scenes and poses; returns how
/// many satisfy the class/mask partition.
pub fn consistent_random_renders(master: u64, n: usize) -> Result<usize> {
    let cam = CameraModel::default();
    let cfg = SceneConfig::default();
    let mut ok = 0;
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(derive(master, &[i as u64]));
        let scene = build_scene(&cfg, rng.random())?;
        let t = scene.targets[rng.random_range(0..scene.targets.len())];
        let yaw = rng.random_range(-0.3..0.3);
        let offset = Vec3::new(
            rng.random_range(-0.08..0.08),
            rng.random_range(-0.08..0.08),
            -rng.random_range(0.0..0.35),
        );
        let pose = ToolPose::new(t.point + offset, UnitQuaternion::from_axis_angle(&Vec3::y_axis(), yaw));
        if render_segmented(&scene, &pose, &cam).is_consistent() {
            ok += 1;
        }
    }
    Ok(ok)
}

pub fn mask_consistency(master: u64, n: usize) -> Result<Check> {
    let ok = consistent_random_renders(master, n)?;
    Ok(Check::new(
        "mask consistency",
        ok == n,
        format!("{ok}/{n} random renders mask-consistent"),
    ))
}

/// Every suite at full size (`quick` shrinks the sampled ones).
pub fn run_all(seed: u64, quick: bool) -> Result<Vec<Check>> {
    let (mdp_n, render_n) = if quick { (500, 50) } else { (10_000, 1000) };
    Ok(vec![
        signal_chain(),
        termination_table(),
        gradients()?,
        funnel(seed, 50)?,
        mdp_bounds(seed, mdp_n)?,
        mask_consistency(seed, render_n)?,
    ])
}
