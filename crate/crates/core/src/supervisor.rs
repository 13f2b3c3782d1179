//! Hybrid vision/contact supervisor and the position-control baselines.
//!
//! Every controller runs at the 500 Hz inner rate against the same contact
//! plant, so forces are recorded even when a controller ignores them.

use std::path::Path;

use nalgebra::{Isometry3, Translation3, Unit, UnitQuaternion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::admittance::{force_magnitude, AdmittanceController, AdmittanceGains, ControllerTraceRow, FilterState, Wrench, FY, FZ, TX};
use crate::camera::render_observation;
use crate::env::{compose_velocity, EnvConfig, PolicyAction};
use crate::error::{Error, Result};
use crate::geometry::{ToolPose, Vec3, P3};
use crate::plant::{ContactPlant, ContactScene, PlantParams};
use crate::policy::{mean_action, PolicyNet};
use crate::scene::{branch_remnant_length, CapsuleChain, PruneTarget, SceneGraph, ZoneRule, ZoneStatus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerId {
    Hybrid,
    ClosedLoop,
    OpenLoop,
    #[serde(rename = "open_loop_miscal")]
    OpenLoopMiscalibrated,
}

impl ControllerId {
    pub const ALL: [ControllerId; 4] = [
        ControllerId::Hybrid,
        ControllerId::ClosedLoop,
        ControllerId::OpenLoop,
        ControllerId::OpenLoopMiscalibrated,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ControllerId::Hybrid => "hybrid",
            ControllerId::ClosedLoop => "closed_loop",
            ControllerId::OpenLoop => "open_loop",
            ControllerId::OpenLoopMiscalibrated => "open_loop_miscal",
        }
    }

    pub fn index(self) -> u64 {
        self as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HybridState {
    Approach,
    Interact,
    Done,
    Failed,
}

impl HybridState {
    /// Allowed moves: Approach→{Interact, Failed}, Interact→{Done, Failed}.
    pub fn transition(self, to: HybridState) -> Result<HybridState> {
        use HybridState::*;
        match (self, to) {
            (Approach, Interact) | (Approach, Failed) | (Interact, Done) | (Interact, Failed) => Ok(to),
            _ => Err(Error::Protocol(format!("illegal supervisor transition {self:?} -> {to:?}"))),
        }
    }
}

/// Why an episode stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EpisodeTerminal {
    /// Termination detector fired during contact.
    Done,
    /// Vision phase put the branch in a failure zone.
    FailureZone,
    /// No contact within the approach budget.
    ApproachTimeout,
    /// Closed-loop goal reached without contact.
    Missed,
    InteractTimeout,
    /// Open-loop controller reached its goal.
    Stopped,
}

impl EpisodeTerminal {
    pub fn as_str(self) -> &'static str {
        match self {
            EpisodeTerminal::Done => "done",
            EpisodeTerminal::FailureZone => "failure_zone",
            EpisodeTerminal::ApproachTimeout => "approach_timeout",
            EpisodeTerminal::Missed => "missed",
            EpisodeTerminal::InteractTimeout => "interact_timeout",
            EpisodeTerminal::Stopped => "stopped",
        }
    }
}

/// Perception error on the cut point: a bias along the viewing ray plus
/// isotropic noise, seen from one of four home views.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DepthErrorModel {
    /// Signed offset along the unit camera ray; negative falls short (m).
    pub bias: f64,
    pub sigma: f64,
    /// Home-view distance in front of the target (m).
    pub home_standoff: f64,
    /// Lateral and vertical offset of the home views (m).
    pub home_offset: f64,
}

impl Default for DepthErrorModel {
    fn default() -> Self {
        DepthErrorModel {
            bias: -0.015,
            sigma: 0.005,
            home_standoff: 0.35,
            home_offset: 0.10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Miscalibration {
    pub translation: f64,
    pub rotation_deg: f64,
}

impl Default for Miscalibration {
    fn default() -> Self {
        Miscalibration {
            translation: 0.01,
            rotation_deg: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SupervisorConfig {
    pub contact_threshold: f64,
    pub interact_timeout: f64,
    /// Start pose distance behind the estimate along the approach axis (m).
    pub start_standoff: f64,
    /// Forward speed of the vision phase (m/s).
    pub vision_speed: f64,
    /// Extra vision steps allowed after the branch enters the success zone.
    pub hold_grace_steps: usize,
    pub position_gain: f64,
    pub max_speed: f64,
    pub stop_tolerance: f64,
    pub closed_loop_overshoot: f64,
    pub position_timeout: f64,
    pub depth: DepthErrorModel,
    pub miscalibration: Miscalibration,
}

impl Default for SupervisorConfig {
    fn default() -> Self {
        SupervisorConfig {
            contact_threshold: 0.75,
            interact_timeout: 30.0,
            start_standoff: 0.15,
            vision_speed: 0.03,
            hold_grace_steps: 10,
            position_gain: 2.0,
            max_speed: 0.03,
            stop_tolerance: 0.001,
            closed_loop_overshoot: 0.10,
            position_timeout: 30.0,
            depth: DepthErrorModel::default(),
            miscalibration: Miscalibration::default(),
        }
    }
}

impl SupervisorConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("contact_threshold", self.contact_threshold),
            ("interact_timeout", self.interact_timeout),
            ("start_standoff", self.start_standoff),
            ("vision_speed", self.vision_speed),
            ("position_gain", self.position_gain),
            ("max_speed", self.max_speed),
            ("stop_tolerance", self.stop_tolerance),
            ("position_timeout", self.position_timeout),
            ("depth.home_standoff", self.depth.home_standoff),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("supervisor.{name} must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("closed_loop_overshoot", self.closed_loop_overshoot),
            ("depth.sigma", self.depth.sigma),
            ("depth.home_offset", self.depth.home_offset),
            ("miscalibration.translation", self.miscalibration.translation),
            ("miscalibration.rotation_deg", self.miscalibration.rotation_deg),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("supervisor.{name} must be non-negative, got {v}")));
            }
        }
        if !self.depth.bias.is_finite() {
            return Err(Error::Config("supervisor.depth.bias must be finite".into()));
        }
        Ok(())
    }
}

/// Everything a controller episode needs besides the scene.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ControlConfig {
    pub supervisor: SupervisorConfig,
    pub gains: AdmittanceGains,
    pub plant: PlantParams,
    /// Vision environment; the hybrid runs it at `supervisor.vision_speed`.
    pub env: EnvConfig,
}

impl ControlConfig {
    pub fn validate(&self) -> Result<()> {
        self.supervisor.validate()?;
        self.gains.validate()?;
        self.plant.validate()?;
        self.env.validate()?;
        let ratio = 1.0 / (self.plant.sensor_rate_hz * self.gains.inner_dt);
        if (ratio - 1.0).abs() > 1e-9 {
            return Err(Error::Config("gains.inner_dt must equal the sensor period".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EstimateSource {
    Exact,
    DepthModel,
    Miscalibrated,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetEstimate {
    pub point: P3,
    pub source: EstimateSource,
    /// Camera pose (camera to world) the estimate was taken from.
    pub camera: Isometry3<f64>,
}

/// Camera pose looking along `dir` from `eye`, camera z forward.
fn look_along(eye: P3, dir: &Vec3) -> Isometry3<f64> {
    let rot = UnitQuaternion::rotation_between(&Vec3::z(), dir).unwrap_or_else(UnitQuaternion::identity);
    Isometry3::from_parts(Translation3::from(eye.coords), rot)
}

/// One of four home views in front of the target, chosen by `rng`.
pub fn home_view(target: &P3, model: &DepthErrorModel, rng: &mut ChaCha8Rng) -> Isometry3<f64> {
    use rand::Rng;
    let k: u8 = rng.random_range(0..4);
    let sx = if k & 1 == 0 { -1.0 } else { 1.0 };
    let sy = if k & 2 == 0 { -1.0 } else { 1.0 };
    let eye = target + Vec3::new(sx * model.home_offset, sy * model.home_offset, -model.home_standoff);
    look_along(eye, &(target - eye))
}

pub fn estimate_target(
    true_point: &P3,
    camera: &Isometry3<f64>,
    model: &DepthErrorModel,
    rng: &mut ChaCha8Rng,
) -> TargetEstimate {
    let eye = P3::from(camera.translation.vector);
    let ray = (true_point - eye).try_normalize(0.0).unwrap_or_else(Vec3::z);
    let mut point = true_point + ray * model.bias;
    if model.sigma > 0.0 {
        let n = Normal::new(0.0, model.sigma).expect("finite sigma");
        point += Vec3::new(n.sample(rng), n.sample(rng), n.sample(rng));
    }
    let exact = model.bias == 0.0 && model.sigma == 0.0;
    TargetEstimate {
        point,
        source: if exact { EstimateSource::Exact } else { EstimateSource::DepthModel },
        camera: *camera,
    }
}

fn random_unit(rng: &mut ChaCha8Rng) -> Unit<Vec3> {
    loop {
        let v = Vec3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        if let Some(u) = Unit::try_new(v, 1e-9) {
            return u;
        }
    }
}

/// Shift the believed camera pose by exactly `translation` along a random
/// direction and rotate it by exactly `rotation_deg` about a random axis
/// through the camera centre.
pub fn perturb_calibration(camera: &Isometry3<f64>, m: &Miscalibration, rng: &mut ChaCha8Rng) -> Isometry3<f64> {
    let dir = random_unit(rng);
    let axis = random_unit(rng);
    let r = UnitQuaternion::from_axis_angle(&axis, m.rotation_deg.to_radians());
    Isometry3::from_parts(
        Translation3::from(camera.translation.vector + dir.into_inner() * m.translation),
        r * camera.rotation,
    )
}

/// Re-express an estimate through a wrong camera calibration.
pub fn miscalibrated_estimate(est: &TargetEstimate, believed: &Isometry3<f64>) -> TargetEstimate {
    let in_camera = est.camera.inverse_transform_point(&est.point);
    TargetEstimate {
        point: believed.transform_point(&in_camera),
        source: EstimateSource::Miscalibrated,
        camera: *believed,
    }
}

/// All controllers start facing the trellis, behind the estimate.
pub fn start_pose(estimate: &P3, standoff: f64) -> ToolPose {
    ToolPose::facing_trellis(estimate - Vec3::new(0.0, 0.0, standoff))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepTraceRow {
    pub tick: usize,
    pub time: f64,
    pub phase: &'static str,
    pub policy_query: bool,
    pub pivot_x: f64,
    pub pivot_y: f64,
    pub pivot_z: f64,
    pub force_true: f64,
    pub force_filtered: f64,
}

pub fn write_step_trace(path: &Path, rows: &[StepTraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub controller: ControllerId,
    pub target_id: usize,
    pub seed: u64,
    pub state: HybridState,
    pub terminal: EpisodeTerminal,
    pub zone: ZoneStatus,
    pub success: bool,
    pub pivot_offset: Option<f64>,
    pub remnant_length: Option<f64>,
    pub max_force: f64,
    /// Inner-rate control ticks executed.
    pub steps: usize,
    pub policy_queries: usize,
    pub final_pose: ToolPose,
    pub trace: Vec<StepTraceRow>,
    /// Admittance controller rows from hand-over on (traced episodes only).
    pub controller_trace: Vec<ControllerTraceRow>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialMetrics {
    pub zone: ZoneStatus,
    pub success: bool,
    pub pivot_offset: Option<f64>,
    pub remnant_length: Option<f64>,
    pub max_force: f64,
}

/// Shared per-episode simulation state.
struct Episode<'a> {
    scene: &'a SceneGraph,
    target: &'a PruneTarget,
    world: ContactScene<'a>,
    pose: ToolPose,
    plant: ContactPlant,
    filter: FilterState,
    max_force: f64,
    ticks: usize,
    policy_queries: usize,
    record: bool,
    trace: Vec<StepTraceRow>,
    controller_trace: Vec<ControllerTraceRow>,
    inner_dt: f64,
}

impl<'a> Episode<'a> {
    fn new(
        scene: &'a SceneGraph,
        target: &'a PruneTarget,
        leaders: &'a [&'a CapsuleChain],
        pose: ToolPose,
        cfg: &ControlConfig,
        seed: u64,
        record: bool,
    ) -> Result<Self> {
        Ok(Episode {
            world: ContactScene::new(scene, target, leaders),
            scene,
            target,
            pose,
            plant: ContactPlant::new(cfg.plant.clone(), scene.cutter.clone(), seed)?,
            filter: FilterState::default(),
            max_force: 0.0,
            ticks: 0,
            policy_queries: 0,
            record,
            trace: Vec::new(),
            controller_trace: Vec::new(),
            inner_dt: cfg.gains.inner_dt,
        })
    }

    /// Advance the plant one sensor period at the current pose. Returns the
    /// raw sensed wrench.
    fn tick(&mut self) -> Wrench {
        let s = self.plant.tick(&self.pose, &self.world);
        self.max_force = self.max_force.max(force_magnitude(&s.true_wrench));
        self.ticks += 1;
        s.sensed
    }

    fn log(&mut self, phase: &'static str, policy_query: bool, filtered: &Wrench) {
        if !self.record {
            return;
        }
        let p = self.pose.pivot();
        let truth = self
            .plant
            .trace
            .as_ref()
            .and_then(|t| t.last())
            .map_or(0.0, |r| force_magnitude(&r.true_wrench));
        self.trace.push(StepTraceRow {
            tick: self.ticks,
            time: self.ticks as f64 * self.inner_dt,
            phase,
            policy_query,
            pivot_x: p.x,
            pivot_y: p.y,
            pivot_z: p.z,
            force_true: truth,
            force_filtered: force_magnitude(filtered),
        });
    }

    fn target_x(&self) -> f64 {
        self.pose.to_tool(&self.target.point).x
    }

    fn zone(&self, rule: ZoneRule) -> ZoneStatus {
        match &self.plant.branch {
            Some(b) => self.scene.cutter.classify(&b.position, self.target_x(), rule),
            None => ZoneStatus::None,
        }
    }

    /// Admittance phase from the current pose; the running filter carries over.
    fn interact(&mut self, gains: &AdmittanceGains, timeout: f64) -> Result<(HybridState, EpisodeTerminal)> {
        let mut ctl = AdmittanceController::new(gains.clone())?.with_filter(self.filter.clone());
        if self.record {
            ctl = ctl.record_trace();
        }
        let origin = self.pose;
        let (ay, az) = (origin.y_axis(), origin.z_axis());
        let max_ticks = (timeout / gains.inner_dt).round() as usize;
        for _ in 0..max_ticks {
            let v = Vec3::new(0.0, ctl.twist[FY], ctl.twist[FZ]);
            self.pose = self.pose.translated_local(&(v * gains.inner_dt));
            let raw = self.tick();
            let filtered = ctl.update(raw);
            self.log("interact", false, &filtered);
            let d = self.pose.pivot() - origin.pivot();
            if ctl.observe(filtered[TX], d.dot(&ay), d.dot(&az)) {
                self.controller_trace = ctl.trace.take().unwrap_or_default();
                return Ok((HybridState::Interact.transition(HybridState::Done)?, EpisodeTerminal::Done));
            }
        }
        self.controller_trace = ctl.trace.take().unwrap_or_default();
        Ok((HybridState::Interact.transition(HybridState::Failed)?, EpisodeTerminal::InteractTimeout))
    }

    fn finish(self, controller: ControllerId, target_id: usize, seed: u64, state: HybridState, terminal: EpisodeTerminal) -> EpisodeRecord {
        let m = self.metrics();
        EpisodeRecord {
            controller,
            target_id,
            seed,
            state,
            terminal,
            zone: m.zone,
            success: m.success,
            pivot_offset: m.pivot_offset,
            remnant_length: m.remnant_length,
            max_force: m.max_force,
            steps: self.ticks,
            policy_queries: self.policy_queries,
            final_pose: self.pose,
            trace: self.trace,
            controller_trace: self.controller_trace,
        }
    }

    fn metrics(&self) -> TrialMetrics {
        compute_metrics(
            self.scene,
            self.target,
            &self.pose,
            self.plant.branch.map(|b| b.position),
            self.max_force,
        )
    }
}

/// Metrics for a finished episode. `branch_center` is the deformed branch
/// position in tool `(y, z)`; contact is inferred from a non-zero force.
pub fn compute_metrics(
    scene: &SceneGraph,
    target: &PruneTarget,
    pose: &ToolPose,
    branch_center: Option<crate::geometry::P2>,
    max_force: f64,
) -> TrialMetrics {
    let target_x = pose.to_tool(&target.point).x;
    let zone = branch_center.map_or(ZoneStatus::None, |c| scene.cutter.classify(&c, target_x, ZoneRule::Mouth));
    let contacted = max_force > 0.0;
    TrialMetrics {
        zone,
        success: zone == ZoneStatus::Success,
        pivot_offset: branch_center.filter(|_| contacted).map(|c| c.coords.norm()),
        remnant_length: branch_remnant_length(scene, pose, target).ok(),
        max_force,
    }
}

fn leader_refs(scene: &SceneGraph) -> Vec<&CapsuleChain> {
    ContactScene::leader_refs(scene)
}

/// Which episode is being run.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeSpec<'a> {
    pub scene: &'a SceneGraph,
    pub target: &'a PruneTarget,
    pub target_id: usize,
    pub seed: u64,
    pub record_trace: bool,
}

pub fn run_hybrid(
    spec: &EpisodeSpec<'_>,
    policy: &PolicyNet<f32>,
    estimate: &TargetEstimate,
    cfg: &ControlConfig,
) -> Result<EpisodeRecord> {
    cfg.validate()?;
    let venv = cfg.env.clone().with_speed(cfg.supervisor.vision_speed);
    let ticks_per_step = (venv.dt / cfg.gains.inner_dt).round() as usize;
    let leaders = leader_refs(spec.scene);
    let start = start_pose(&estimate.point, cfg.supervisor.start_standoff);
    let mut ep = Episode::new(spec.scene, spec.target, &leaders, start, cfg, spec.seed, spec.record_trace)?;
    if spec.record_trace {
        ep.plant = ep.plant.record_trace();
    }
    let mut state = HybridState::Approach;
    let mut hold = false;
    let mut step = 0;
    let mut terminal = EpisodeTerminal::ApproachTimeout;
    'vision: loop {
        let limit = venv.max_steps() + if hold { cfg.supervisor.hold_grace_steps } else { 0 };
        if step >= limit {
            state = state.transition(HybridState::Failed)?;
            break;
        }
        step += 1;
        let mut queried = false;
        let action = if hold {
            PolicyAction::default()
        } else {
            let obs = render_observation(spec.scene, &ep.pose, &venv.camera, venv.obs_scale)?;
            let (m, _) = policy.forward(&obs.to_normalized::<f32>())?;
            ep.policy_queries += 1;
            queried = true;
            mean_action(&[m[0] as f64, m[1] as f64])
        };
        let mut v = compose_velocity(action, venv.s_forward).v;
        for k in 0..ticks_per_step {
            ep.pose = ep.pose.translated_local(&(v * cfg.gains.inner_dt));
            let raw = ep.tick();
            let filtered = ep.filter.push(raw);
            ep.log("approach", queried && k == 0, &filtered);
            if force_magnitude(&filtered) > cfg.supervisor.contact_threshold {
                state = state.transition(HybridState::Interact)?;
                break 'vision;
            }
            match ep.zone(ZoneRule::Extended) {
                ZoneStatus::Failure => {
                    state = state.transition(HybridState::Failed)?;
                    terminal = EpisodeTerminal::FailureZone;
                    break 'vision;
                }
                ZoneStatus::Success if !hold => {
                    hold = true;
                    v = compose_velocity(PolicyAction::default(), venv.s_forward).v;
                }
                _ => {}
            }
        }
    }
    if state == HybridState::Interact {
        (state, terminal) = ep.interact(&cfg.gains, cfg.supervisor.interact_timeout)?;
    }
    Ok(ep.finish(ControllerId::Hybrid, spec.target_id, spec.seed, state, terminal))
}

/// World-frame proportional velocity toward `goal`, clamped in magnitude.
pub fn proportional_velocity(pivot: &P3, goal: &P3, gain: f64, max_speed: f64) -> Vec3 {
    let v = (goal - pivot) * gain;
    let n = v.norm();
    if n > max_speed {
        v * (max_speed / n)
    } else {
        v
    }
}

pub fn run_closed_loop(spec: &EpisodeSpec<'_>, estimate: &TargetEstimate, cfg: &ControlConfig) -> Result<EpisodeRecord> {
    cfg.validate()?;
    let s = &cfg.supervisor;
    let leaders = leader_refs(spec.scene);
    let start = start_pose(&estimate.point, s.start_standoff);
    let goal = estimate.point + start.z_axis() * s.closed_loop_overshoot;
    let mut ep = Episode::new(spec.scene, spec.target, &leaders, start, cfg, spec.seed, spec.record_trace)?;
    if spec.record_trace {
        ep.plant = ep.plant.record_trace();
    }
    let mut state = HybridState::Approach;
    let mut terminal = EpisodeTerminal::ApproachTimeout;
    let max_ticks = (s.position_timeout / cfg.gains.inner_dt).round() as usize;
    for _ in 0..max_ticks {
        if (goal - ep.pose.pivot()).norm() <= s.stop_tolerance {
            terminal = EpisodeTerminal::Missed;
            break;
        }
        let v = proportional_velocity(&ep.pose.pivot(), &goal, s.position_gain, s.max_speed);
        ep.pose = ep.pose.translated_world(&(v * cfg.gains.inner_dt));
        let raw = ep.tick();
        let filtered = ep.filter.push(raw);
        ep.log("approach", false, &filtered);
        if force_magnitude(&filtered) > s.contact_threshold {
            state = state.transition(HybridState::Interact)?;
            break;
        }
    }
    if state == HybridState::Interact {
        (state, terminal) = ep.interact(&cfg.gains, s.interact_timeout)?;
    } else {
        state = state.transition(HybridState::Failed)?;
    }
    Ok(ep.finish(ControllerId::ClosedLoop, spec.target_id, spec.seed, state, terminal))
}

/// Open-loop position control to the estimate; forces are recorded only.
pub fn run_open_loop(
    spec: &EpisodeSpec<'_>,
    estimate: &TargetEstimate,
    cfg: &ControlConfig,
    controller: ControllerId,
) -> Result<EpisodeRecord> {
    cfg.validate()?;
    let s = &cfg.supervisor;
    let leaders = leader_refs(spec.scene);
    // Start and goal both come from the estimate this controller believes.
    let start = start_pose(&estimate.point, s.start_standoff);
    run_open_loop_from(spec, start, &estimate.point, cfg, controller, &leaders)
}

pub fn run_open_loop_from(
    spec: &EpisodeSpec<'_>,
    start: ToolPose,
    goal: &P3,
    cfg: &ControlConfig,
    controller: ControllerId,
    leaders: &[&CapsuleChain],
) -> Result<EpisodeRecord> {
    let s = &cfg.supervisor;
    let mut ep = Episode::new(spec.scene, spec.target, leaders, start, cfg, spec.seed, spec.record_trace)?;
    if spec.record_trace {
        ep.plant = ep.plant.record_trace();
    }
    let mut terminal = EpisodeTerminal::ApproachTimeout;
    let max_ticks = (s.position_timeout / cfg.gains.inner_dt).round() as usize;
    for _ in 0..max_ticks {
        if (goal - ep.pose.pivot()).norm() <= s.stop_tolerance {
            terminal = EpisodeTerminal::Stopped;
            break;
        }
        let v = proportional_velocity(&ep.pose.pivot(), goal, s.position_gain, s.max_speed);
        ep.pose = ep.pose.translated_world(&(v * cfg.gains.inner_dt));
        let raw = ep.tick();
        let filtered = ep.filter.push(raw);
        ep.log("position", false, &filtered);
    }
    let state = if terminal == EpisodeTerminal::Stopped { HybridState::Done } else { HybridState::Failed };
    Ok(ep.finish(controller, spec.target_id, spec.seed, state, terminal))
}

/// Shared estimate draw for one trial and the miscalibrated variant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialEstimates {
    pub nominal: TargetEstimate,
    pub miscalibrated: TargetEstimate,
}

pub fn draw_estimates(target: &P3, s: &SupervisorConfig, seed: u64) -> TrialEstimates {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let camera = home_view(target, &s.depth, &mut rng);
    let nominal = estimate_target(target, &camera, &s.depth, &mut rng);
    let believed = perturb_calibration(&camera, &s.miscalibration, &mut rng);
    TrialEstimates {
        nominal,
        miscalibrated: miscalibrated_estimate(&nominal, &believed),
    }
}

/// Run one controller on one trial.
pub fn run_controller(
    controller: ControllerId,
    spec: &EpisodeSpec<'_>,
    estimates: &TrialEstimates,
    policy: Option<&PolicyNet<f32>>,
    cfg: &ControlConfig,
) -> Result<EpisodeRecord> {
    match controller {
        ControllerId::Hybrid => {
            let net = policy.ok_or_else(|| Error::Config("the hybrid controller needs a policy checkpoint".into()))?;
            run_hybrid(spec, net, &estimates.nominal, cfg)
        }
        ControllerId::ClosedLoop => run_closed_loop(spec, &estimates.nominal, cfg),
        ControllerId::OpenLoop => run_open_loop(spec, &estimates.nominal, cfg, controller),
        ControllerId::OpenLoopMiscalibrated => run_open_loop(spec, &estimates.miscalibrated, cfg, controller),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{build_scene, SceneConfig};

    fn scene() -> SceneGraph {
        build_scene(&SceneConfig::default(), 3).unwrap()
    }

    fn exact(point: P3) -> TargetEstimate {
        TargetEstimate {
            point,
            source: EstimateSource::Exact,
            camera: Isometry3::identity(),
        }
    }

    #[test]
    fn transitions() {
        use HybridState::*;
        assert!(Approach.transition(Interact).is_ok());
        assert!(Approach.transition(Failed).is_ok());
        assert!(Interact.transition(Done).is_ok());
        assert!(Interact.transition(Failed).is_ok());
        assert!(Interact.transition(Approach).is_err());
        assert!(Done.transition(Interact).is_err());
        assert!(Approach.transition(Done).is_err());
    }

    #[test]
    fn estimate_model_examples() {
        let t = P3::new(0.1, 1.0, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cam = home_view(&t, &DepthErrorModel::default(), &mut rng);
        let none = DepthErrorModel {
            bias: 0.0,
            sigma: 0.0,
            ..Default::default()
        };
        let e = estimate_target(&t, &cam, &none, &mut rng);
        assert_eq!(e.point, t);
        assert_eq!(e.source, EstimateSource::Exact);
        let biased = DepthErrorModel {
            sigma: 0.0,
            ..Default::default()
        };
        let e = estimate_target(&t, &cam, &biased, &mut rng);
        assert!(((e.point - t).norm() - 0.015).abs() < 1e-12);
        let eye = P3::from(cam.translation.vector);
        assert!((e.point - eye).norm() < (t - eye).norm());
        let a = draw_estimates(&t, &SupervisorConfig::default(), 9);
        let b = draw_estimates(&t, &SupervisorConfig::default(), 9);
        assert_eq!(a, b);
    }

    #[test]
    fn perturbation_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cam = look_along(P3::new(0.0, 1.0, -0.4), &Vec3::new(0.1, 0.0, 1.0));
        for _ in 0..100 {
            let p = perturb_calibration(&cam, &Miscalibration::default(), &mut rng);
            let dt = (p.translation.vector - cam.translation.vector).norm();
            assert!((dt - 0.01).abs() < 1e-12);
            let rel = p.rotation * cam.rotation.inverse();
            assert!((rel.angle().to_degrees() - 5.0).abs() < 1e-9);
            let m = p.rotation.to_rotation_matrix().into_inner();
            assert!((m.transpose() * m - nalgebra::Matrix3::identity()).norm() < 1e-12);
        }
        let zero = Miscalibration {
            translation: 0.0,
            rotation_deg: 0.0,
        };
        let p = perturb_calibration(&cam, &zero, &mut rng);
        assert!((p.translation.vector - cam.translation.vector).norm() < 1e-15);
        assert!(p.rotation.angle_to(&cam.rotation) < 1e-12);
    }

    #[test]
    fn open_loop_speed_is_clamped_and_monotone() {
        let goal = P3::new(0.0, 1.0, 0.0);
        let mut last = f64::INFINITY;
        for k in (0..200).rev() {
            let d = k as f64 * 0.001;
            let v = proportional_velocity(&P3::new(0.0, 1.0, -d), &goal, 2.0, 0.03);
            assert!(v.norm() <= 0.03 + 1e-15);
            assert!(v.norm() <= last + 1e-15);
            last = v.norm();
        }
    }

    #[test]
    fn open_loop_immediate_stop() {
        let s = scene();
        let t = s.targets[0];
        let cfg = ControlConfig::default();
        let spec = EpisodeSpec {
            scene: &s,
            target: &t,
            target_id: 0,
            seed: 1,
            record_trace: false,
        };
        let goal = t.point - Vec3::new(0.0, 0.0, 0.05);
        let start = ToolPose::facing_trellis(goal - Vec3::new(0.0, 0.0, 0.0009));
        let leaders = leader_refs(&s);
        let r = run_open_loop_from(&spec, start, &goal, &cfg, ControllerId::OpenLoop, &leaders).unwrap();
        assert_eq!(r.steps, 0);
        assert_eq!(r.final_pose, start);
        assert_eq!(r.terminal, EpisodeTerminal::Stopped);
    }

    #[test]
    fn open_loop_short_estimate_stops_in_front() {
        let s = scene();
        let t = s.targets[0];
        let cfg = ControlConfig::default();
        let spec = EpisodeSpec {
            scene: &s,
            target: &t,
            target_id: 0,
            seed: 1,
            record_trace: false,
        };
        let est = exact(t.point - Vec3::new(0.0, 0.0, 0.025));
        let r = run_open_loop(&spec, &est, &cfg, ControllerId::OpenLoop).unwrap();
        assert_eq!(r.terminal, EpisodeTerminal::Stopped);
        assert_eq!(r.zone, ZoneStatus::None);
        assert!(!r.success);
        assert_eq!(r.max_force, 0.0);
        assert_eq!(r.pivot_offset, None);
        assert!(r.remnant_length.is_some());
    }

    #[test]
    fn open_loop_behind_leader_exceeds_ten_newtons() {
        let s = scene();
        let t = s.targets[0];
        let cfg = ControlConfig::default();
        let spec = EpisodeSpec {
            scene: &s,
            target: &t,
            target_id: 0,
            seed: 1,
            record_trace: false,
        };
        // Estimate placed on the leader axis, 2 cm behind its front surface.
        let leader = &s.spindles[t.spindle].leader;
        let y = t.point.y;
        let axis = leader.point_at_height(y).unwrap();
        let est = exact(axis + Vec3::new(0.0, 0.0, 0.01));
        let r = run_open_loop(&spec, &est, &cfg, ControllerId::OpenLoop).unwrap();
        assert!(r.max_force > 10.0, "{}", r.max_force);
    }

    #[test]
    fn closed_loop_exact_estimate_reaches_pivot() {
        let s = scene();
        let cfg = ControlConfig::default();
        for (i, t) in s.targets.iter().enumerate().take(3) {
            let spec = EpisodeSpec {
                scene: &s,
                target: t,
                target_id: i,
                seed: 4,
                record_trace: false,
            };
            let r = run_closed_loop(&spec, &exact(t.point), &cfg).unwrap();
            assert_eq!(r.terminal, EpisodeTerminal::Done, "target {i}: {r:?}");
            assert!(r.success);
            assert!(r.pivot_offset.unwrap() < 0.005);
            assert!(r.max_force < 10.0);
            let again = run_closed_loop(&spec, &exact(t.point), &cfg).unwrap();
            assert_eq!(r, again);
        }
    }

    #[test]
    fn closed_loop_misses_when_nothing_on_ray() {
        let s = scene();
        let t = s.targets[0];
        let cfg = ControlConfig::default();
        let spec = EpisodeSpec {
            scene: &s,
            target: &t,
            target_id: 0,
            seed: 4,
            record_trace: false,
        };
        // Far above the branch, clear of wires.
        let est = exact(t.point + Vec3::new(0.0, 0.06, 0.0));
        let r = run_closed_loop(&spec, &est, &cfg).unwrap();
        assert_eq!(r.state, HybridState::Failed);
        assert_eq!(r.terminal, EpisodeTerminal::Missed);
    }

    #[test]
    fn metrics_at_pivot() {
        let s = scene();
        let t = s.targets[0];
        let pose = ToolPose::facing_trellis(t.point);
        let m = compute_metrics(&s, &t, &pose, Some(crate::geometry::P2::origin()), 1.0);
        assert!(m.success);
        assert_eq!(m.pivot_offset, Some(0.0));
        assert!((m.remnant_length.unwrap() - 0.03).abs() < 1e-9);
        let m = compute_metrics(&s, &t, &pose, Some(crate::geometry::P2::origin()), 0.0);
        assert_eq!(m.pivot_offset, None);
    }
}
