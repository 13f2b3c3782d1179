//! Approach MDP: the cutter flies towards a cut point at constant forward
//! speed while the policy modulates the lateral velocity.

use std::path::Path;

use nalgebra::UnitQuaternion;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{render_observation, CameraModel, SegmentedImage};
use crate::error::{Error, Result};
use crate::geometry::{ToolPose, Vec3, P3};
use crate::scene::{distance_to_target, query_zone, PruneTarget, SceneGraph, ZoneStatus};

/// Attempts at finding a collision-free start pose before giving up.
pub const PLACEMENT_ATTEMPTS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    /// Episode time budget `T` (s).
    pub episode_time: f64,
    pub dt: f64,
    /// Distance at which the shaping reward starts (m).
    pub d_min: f64,
    /// Forward speed `s` (m/s).
    pub s_forward: f64,
    pub start_distance_range: [f64; 2],
    /// Uniform lateral start jitter, tool x and y (m).
    pub start_lateral_jitter: f64,
    pub start_yaw_jitter_deg: f64,
    /// Zone checks per control step; keeps the per-check travel well below the mouth depth.
    pub substeps: usize,
    /// Observation downsampling: 1 gives 160×80, 2 gives 80×40.
    pub obs_scale: usize,
    pub camera: CameraModel,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            episode_time: 1.0,
            dt: 0.10,
            d_min: 0.10,
            s_forward: 0.30,
            start_distance_range: [0.15, 0.20],
            start_lateral_jitter: 0.01,
            start_yaw_jitter_deg: 3.0,
            substeps: 10,
            obs_scale: 1,
            camera: CameraModel::default(),
        }
    }
}

impl EnvConfig {
    /// Real-robot speed with the time budget stretched so the travel stays 0.30 m.
    pub fn slow() -> Self {
        EnvConfig::default().with_speed(0.03)
    }

    pub fn with_speed(mut self, s_forward: f64) -> Self {
        let travel = self.episode_time * self.s_forward;
        self.s_forward = s_forward;
        self.episode_time = travel / s_forward;
        self
    }

    /// Number of control steps `N_t`.
    pub fn max_steps(&self) -> usize {
        (self.episode_time / self.dt).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.dt > 0.0 && self.episode_time > 0.0) {
            return bad("env.dt and env.episode_time must be positive".into());
        }
        let n = self.max_steps();
        if n == 0 || (n as f64 * self.dt - self.episode_time).abs() > 1e-9 * self.episode_time.max(1.0) {
            return bad(format!(
                "env.episode_time {} is not a whole number of dt {} steps",
                self.episode_time, self.dt
            ));
        }
        if !(self.d_min > 0.0) {
            return bad(format!("env.d_min must be positive, got {}", self.d_min));
        }
        if !(self.s_forward > 0.0) {
            return bad(format!("env.s_forward must be positive, got {}", self.s_forward));
        }
        let [lo, hi] = self.start_distance_range;
        if !(lo > 0.0 && hi >= lo) {
            return bad(format!("env.start_distance_range invalid: [{lo}, {hi}]"));
        }
        if !(self.start_lateral_jitter >= 0.0 && self.start_lateral_jitter * std::f64::consts::SQRT_2 < lo) {
            return bad("env.start_lateral_jitter must be non-negative and smaller than the start distance".into());
        }
        if self.substeps == 0 || !matches!(self.obs_scale, 1 | 2 | 4) {
            return bad("env.substeps must be positive and env.obs_scale one of 1, 2, 4".into());
        }
        self.camera.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PolicyAction {
    pub a_x: f64,
    pub a_y: f64,
}

impl PolicyAction {
    /// Clamped to `[-1, 1]`; non-finite components become zero.
    pub fn new(a_x: f64, a_y: f64) -> Self {
        let c = |v: f64| if v.is_finite() { v.clamp(-1.0, 1.0) } else { 0.0 };
        PolicyAction { a_x: c(a_x), a_y: c(a_y) }
    }
}

/// Tool-frame velocity (m/s).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VelocityCommand {
    pub v: Vec3,
}

pub fn compose_velocity(a: PolicyAction, s_forward: f64) -> VelocityCommand {
    let a = PolicyAction::new(a.a_x, a.a_y);
    VelocityCommand {
        v: Vec3::new(a.a_x * s_forward, a.a_y * s_forward, s_forward),
    }
}

/// Shaping reward: `dt · max(1 − d/d_min, 0)`.
pub fn reward(d_next: f64, cfg: &EnvConfig) -> f64 {
    cfg.dt * (1.0 - d_next / cfg.d_min).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Terminal {
    Running,
    Success,
    FailureZone,
    Timeout,
}

impl Terminal {
    pub fn as_str(self) -> &'static str {
        match self {
            Terminal::Running => "running",
            Terminal::Success => "success",
            Terminal::FailureZone => "failure_zone",
            Terminal::Timeout => "timeout",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observation: SegmentedImage,
    pub reward: f64,
    pub terminal: Terminal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub step: usize,
    pub a_x: f64,
    pub a_y: f64,
    pub reward: f64,
    pub distance: f64,
    pub terminal: &'static str,
}

/// True when any cutter part overlaps a scene primitive.
pub fn tool_collides(scene: &SceneGraph, pose: &ToolPose) -> bool {
    let hx = scene.cutter.blade_half_thickness_x;
    let mut probes = Vec::new();
    for solid in &scene.cutter.solids {
        for (a, b) in solid.edges() {
            for k in 0..4 {
                let f = k as f64 / 4.0;
                let p = a + (b - a) * f;
                for x in [-hx, 0.0, hx] {
                    probes.push(pose.to_world(&P3::new(x, p.x, p.y)));
                }
            }
        }
    }
    probes.iter().any(|p| {
        scene.frame_boxes.iter().any(|b| b.contains(p))
            || scene.wires.iter().any(|w| w.signed_distance(p) < 0.0)
            || scene.spindles.iter().any(|s| {
                std::iter::once(&s.leader)
                    .chain(&s.side_branches)
                    .flat_map(|c| &c.segments)
                    .any(|c| c.signed_distance(p) < 0.0)
            })
    })
}

/// One approach episode against one target.
#[derive(Debug, Clone)]
pub struct Env {
    pub cfg: EnvConfig,
    scene: SceneGraph,
    target: PruneTarget,
    pose: ToolPose,
    step: usize,
    terminal: Terminal,
    trace: Vec<TraceRow>,
}

impl Env {
    pub fn new(cfg: EnvConfig, scene: SceneGraph, target: usize) -> Result<Self> {
        cfg.validate()?;
        let t = *scene
            .targets
            .get(target)
            .ok_or_else(|| Error::Config(format!("target {target} not in scene ({} targets)", scene.targets.len())))?;
        Ok(Env {
            cfg,
            pose: ToolPose::facing_trellis(t.point),
            scene,
            target: t,
            step: 0,
            terminal: Terminal::Timeout,
            trace: Vec::new(),
        })
    }

    pub fn scene(&self) -> &SceneGraph {
        &self.scene
    }

    pub fn target(&self) -> &PruneTarget {
        &self.target
    }

    pub fn pose(&self) -> &ToolPose {
        &self.pose
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn terminal(&self) -> Terminal {
        self.terminal
    }

    pub fn trace(&self) -> &[TraceRow] {
        &self.trace
    }

    pub fn distance(&self) -> f64 {
        distance_to_target(&self.pose, &self.target)
    }

    /// Swap in a new scene and target without re-validating the config.
    pub fn set_scene(&mut self, scene: SceneGraph, target: usize) -> Result<()> {
        self.target = *scene
            .targets
            .get(target)
            .ok_or_else(|| Error::Config(format!("target {target} not in scene")))?;
        self.scene = scene;
        Ok(())
    }

    /// Seeded start pose in front of the target.
    pub fn sample_start(&self, rng: &mut ChaCha8Rng) -> Result<ToolPose> {
        let cfg = &self.cfg;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let [lo, hi] = cfg.start_distance_range;
            let d = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            let j = cfg.start_lateral_jitter;
            let (lx, ly) = if j > 0.0 {
                (rng.random_range(-j..=j), rng.random_range(-j..=j))
            } else {
                (0.0, 0.0)
            };
            let yj = cfg.start_yaw_jitter_deg.to_radians();
            let yaw = if yj > 0.0 { rng.random_range(-yj..=yj) } else { 0.0 };
            let rot = UnitQuaternion::from_axis_angle(&Vec3::y_axis(), yaw);
            // Offset (lx, ly, -lz) in the tool frame with the total distance exactly d.
            let lz = (d * d - lx * lx - ly * ly).sqrt();
            let offset = rot * Vec3::new(lx, ly, -lz);
            let pose = ToolPose::new(self.target.point + offset, rot);
            if !tool_collides(&self.scene, &pose) {
                return Ok(pose);
            }
        }
        Err(Error::Placement {
            attempts: PLACEMENT_ATTEMPTS,
            reason: "every sampled start pose intersects the scene".into(),
        })
    }

    pub fn reset(&mut self, seed: u64) -> Result<SegmentedImage> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pose = self.sample_start(&mut rng)?;
        self.reset_at(pose)
    }

    /// Start an episode from an explicit pose.
    pub fn reset_at(&mut self, pose: ToolPose) -> Result<SegmentedImage> {
        self.pose = pose;
        self.step = 0;
        self.terminal = Terminal::Running;
        self.trace.clear();
        self.observe()
    }

    pub fn observe(&self) -> Result<SegmentedImage> {
        render_observation(&self.scene, &self.pose, &self.cfg.camera, self.cfg.obs_scale)
    }

    /// Advance the tool pose without zone checks (used after hand-over).
    pub fn advance(pose: &ToolPose, v: &VelocityCommand, dt: f64) -> ToolPose {
        pose.translated_local(&(v.v * dt))
    }

    /// Advance one control step without rendering.
    pub fn step_state(&mut self, a: PolicyAction) -> Result<(f64, Terminal)> {
        if self.terminal != Terminal::Running {
            return Err(Error::Protocol(format!(
                "step called after the episode ended ({})",
                self.terminal.as_str()
            )));
        }
        let a = PolicyAction::new(a.a_x, a.a_y);
        let v = compose_velocity(a, self.cfg.s_forward);
        self.step += 1;
        let sub_dt = self.cfg.dt / self.cfg.substeps as f64;
        let mut zone = ZoneStatus::None;
        for _ in 0..self.cfg.substeps {
            self.pose = Self::advance(&self.pose, &v, sub_dt);
            zone = query_zone(&self.scene, &self.pose, &self.target);
            if zone != ZoneStatus::None {
                break;
            }
        }
        let t_budget = self.cfg.episode_time;
        let (reward_value, terminal) = match zone {
            ZoneStatus::Success => (t_budget - self.cfg.dt * self.step as f64, Terminal::Success),
            ZoneStatus::Failure => (-t_budget, Terminal::FailureZone),
            ZoneStatus::None if self.step >= self.cfg.max_steps() => (-t_budget, Terminal::Timeout),
            ZoneStatus::None => (reward(self.distance(), &self.cfg), Terminal::Running),
        };
        self.terminal = terminal;
        self.trace.push(TraceRow {
            step: self.step,
            a_x: a.a_x,
            a_y: a.a_y,
            reward: reward_value,
            distance: self.distance(),
            terminal: terminal.as_str(),
        });
        Ok((reward_value, terminal))
    }

    pub fn step(&mut self, a: PolicyAction) -> Result<StepOutcome> {
        let (reward, terminal) = self.step_state(a)?;
        Ok(StepOutcome {
            observation: self.observe()?,
            reward,
            terminal,
        })
    }
}

pub fn write_trace_csv(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
