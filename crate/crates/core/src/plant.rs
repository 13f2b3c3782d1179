//! Compliant-branch contact plant.
//!
//! The target branch is modelled as a disc in the cutter's yz-plane, held by
//! a damped spring at the point where the undeformed branch crosses the plane.
//! The cutter is kinematic; its jaws and hinge push the disc through a
//! penalty spring. Leaders are rigid obstacles that resist the jaw tips.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::admittance::{force_magnitude, Wrench, FY, FZ, TX, TY};
use crate::error::{Error, Result};
use crate::geometry::{ToolPose, Vec2, Vec3, P2, P3};
use crate::scene::{chain_crossing, CapsuleChain, CutterProfile, PruneTarget, SceneGraph};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantParams {
    pub k_branch: f64,
    pub c_branch: f64,
    pub branch_mass: f64,
    pub k_contact: f64,
    pub k_leader: f64,
    /// Integration substeps per sensor period.
    pub substeps: usize,
    pub sensor_rate_hz: f64,
    pub force_noise_std: f64,
    pub torque_noise_std: f64,
}

impl Default for PlantParams {
    fn default() -> Self {
        PlantParams {
            k_branch: 200.0,
            c_branch: 2.0,
            branch_mass: 0.05,
            k_contact: 2000.0,
            k_leader: 1500.0,
            substeps: 4,
            sensor_rate_hz: 500.0,
            force_noise_std: 0.05,
            torque_noise_std: 0.0005,
        }
    }
}

impl PlantParams {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("k_branch", self.k_branch),
            ("branch_mass", self.branch_mass),
            ("k_contact", self.k_contact),
            ("k_leader", self.k_leader),
            ("sensor_rate_hz", self.sensor_rate_hz),
        ];
        for (name, v) in pos {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("plant.{name} must be positive, got {v}")));
            }
        }
        if !(self.c_branch >= 0.0 && self.force_noise_std >= 0.0 && self.torque_noise_std >= 0.0) {
            return Err(Error::Config("plant damping and noise levels must be non-negative".into()));
        }
        if self.substeps == 0 {
            return Err(Error::Config("plant.substeps must be at least 1".into()));
        }
        Ok(())
    }

    pub fn sensor_dt(&self) -> f64 {
        1.0 / self.sensor_rate_hz
    }

    pub fn noiseless(mut self) -> Self {
        self.force_noise_std = 0.0;
        self.torque_noise_std = 0.0;
        self
    }
}

/// Branch cross-section in tool `(y, z)` coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchState {
    pub rest_position: P2,
    pub position: P2,
    pub velocity: Vec2,
    pub radius: f64,
    pub k_b: f64,
    pub c_b: f64,
    pub mass: f64,
}

impl BranchState {
    pub fn at_rest(rest: P2, radius: f64, p: &PlantParams) -> Self {
        BranchState {
            rest_position: rest,
            position: rest,
            velocity: Vec2::zeros(),
            radius,
            k_b: p.k_branch,
            c_b: p.c_branch,
            mass: p.branch_mass,
        }
    }

    pub fn deflection(&self) -> Vec2 {
        self.position - self.rest_position
    }

    /// Move the rest point (the tool moved); the deflection is carried along.
    pub fn set_rest(&mut self, rest: P2) {
        let d = self.deflection();
        self.rest_position = rest;
        self.position = rest + d;
    }

    pub fn kinetic_energy(&self) -> f64 {
        0.5 * self.mass * self.velocity.norm_squared()
    }

    pub fn spring_energy(&self) -> f64 {
        0.5 * self.k_b * self.deflection().norm_squared()
    }
}

/// Penalty contact between the disc and each solid part of the cutter.
/// Returns the force on the branch (yz) and the wrench the tool exerts,
/// taken about the pivot.
pub fn contact_wrench(profile: &CutterProfile, center: &P2, radius: f64, k_contact: f64) -> (Vec2, Wrench) {
    let mut force = Vec2::zeros();
    let mut w = [0.0; 6];
    for solid in &profile.solids {
        let (q, d) = solid.closest_boundary_point(center);
        let inside = solid.contains(center);
        let (pen, normal) = if inside {
            (radius + d, if d > 0.0 { (q - center) / d } else { Vec2::zeros() })
        } else {
            (radius - d, if d > 0.0 { (center - q) / d } else { Vec2::zeros() })
        };
        if pen <= 0.0 {
            continue;
        }
        let f = normal * (k_contact * pen);
        force += f;
        // r × f with r = (0, q.y, q.z), f = (0, f.y, f.z).
        w[TX] += q.x * f.y - q.y * f.x;
        w[FY] += f.x;
        w[FZ] += f.y;
    }
    (force, w)
}

/// Semi-implicit Euler step of the branch under an external yz force.
pub fn branch_dynamics_step(b: &mut BranchState, applied: &Vec2, dt: f64) {
    let spring = -b.deflection() * b.k_b - b.velocity * b.c_b;
    let acc = (applied + spring) / b.mass;
    b.velocity += acc * dt;
    b.position += b.velocity * dt;
}

/// A leader near the cut plane, in tool coordinates at pivot height.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeaderContact {
    pub x: f64,
    pub z: f64,
    pub radius: f64,
}

pub fn leaders_in_tool(leaders: &[&CapsuleChain], pose: &ToolPose) -> Vec<LeaderContact> {
    let y = pose.pivot().y;
    leaders
        .iter()
        .filter_map(|l| {
            let p = l.point_at_height(y)?;
            let r = l.radius_at_height(y)?;
            let t = pose.to_tool(&p);
            Some(LeaderContact { x: t.x, z: t.z, radius: r })
        })
        .collect()
}

/// Rigid leader resisting the jaw tips. The reaction acts along tool z at
/// the nearest point of the blade's x extent.
pub fn leader_wrench(profile: &CutterProfile, leader: &LeaderContact, k_leader: f64) -> Wrench {
    let hx = profile.blade_half_thickness_x;
    let gap = (leader.x.abs() - hx).max(0.0);
    if gap >= leader.radius {
        return [0.0; 6];
    }
    let r_eff = (leader.radius * leader.radius - gap * gap).sqrt();
    let front = profile.front_z();
    let pen = front - (leader.z - r_eff);
    if pen <= 0.0 || leader.z + r_eff < profile.back_z() {
        return [0.0; 6];
    }
    let fz = k_leader * pen;
    let cx = leader.x.clamp(-hx, hx);
    let mut w = [0.0; 6];
    w[FZ] = fz;
    w[TY] = -cx * fz;
    w
}

/// Additive Gaussian noise on each wrench component.
#[derive(Debug, Clone)]
pub struct SensorModel {
    rng: ChaCha8Rng,
    force: Option<Normal<f64>>,
    torque: Option<Normal<f64>>,
}

impl SensorModel {
    pub fn new(force_std: f64, torque_std: f64, seed: u64) -> Self {
        let dist = |s: f64| (s > 0.0).then(|| Normal::new(0.0, s).expect("finite std"));
        SensorModel {
            rng: ChaCha8Rng::seed_from_u64(seed),
            force: dist(force_std),
            torque: dist(torque_std),
        }
    }

    pub fn sample(&mut self, truth: &Wrench) -> Wrench {
        let mut out = *truth;
        for (i, v) in out.iter_mut().enumerate() {
            let d = if i < 3 { &self.torque } else { &self.force };
            if let Some(d) = d {
                *v += d.sample(&mut self.rng);
            }
        }
        out
    }
}

/// Geometry the plant reads each tick: the target branch and nearby leaders.
#[derive(Debug, Clone, Copy)]
pub struct ContactScene<'a> {
    pub branch: &'a CapsuleChain,
    pub near_arclength: f64,
    pub leaders: &'a [&'a CapsuleChain],
}

impl<'a> ContactScene<'a> {
    pub fn leader_refs(scene: &'a SceneGraph) -> Vec<&'a CapsuleChain> {
        scene.spindles.iter().map(|s| &s.leader).collect()
    }

    pub fn new(scene: &'a SceneGraph, target: &PruneTarget, leaders: &'a [&'a CapsuleChain]) -> Self {
        ContactScene {
            branch: scene.branch(target),
            near_arclength: target.arclength,
            leaders,
        }
    }

    /// Undeformed crossing and branch radius at that point.
    pub fn rest(&self, pose: &ToolPose) -> Option<(P2, f64)> {
        let c = chain_crossing(self.branch, pose, self.near_arclength)?;
        Some((c.yz, radius_at_arclength(self.branch, c.arclength)))
    }
}

pub fn radius_at_arclength(chain: &CapsuleChain, s: f64) -> f64 {
    let mut acc = 0.0;
    for seg in &chain.segments {
        acc += seg.length();
        if s <= acc {
            return seg.radius;
        }
    }
    chain.segments.last().map_or(0.0, |s| s.radius)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantSample {
    pub true_wrench: Wrench,
    pub sensed: Wrench,
    /// Deformed branch centre, when the cut plane meets the branch.
    pub branch_center: Option<P2>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PlantTraceRow {
    pub time: f64,
    pub true_wrench: Wrench,
    pub sensed: Wrench,
    pub branch_y: Option<f64>,
    pub branch_z: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ContactPlant {
    pub params: PlantParams,
    pub profile: CutterProfile,
    pub branch: Option<BranchState>,
    sensor: SensorModel,
    pub time: f64,
    pub trace: Option<Vec<PlantTraceRow>>,
}

impl ContactPlant {
    pub fn new(params: PlantParams, profile: CutterProfile, sensor_seed: u64) -> Result<Self> {
        params.validate()?;
        Ok(ContactPlant {
            sensor: SensorModel::new(params.force_noise_std, params.torque_noise_std, sensor_seed),
            params,
            profile,
            branch: None,
            time: 0.0,
            trace: None,
        })
    }

    pub fn record_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    /// Advance one sensor period with the tool held at `pose`.
    pub fn tick(&mut self, pose: &ToolPose, world: &ContactScene<'_>) -> PlantSample {
        let dt = self.params.sensor_dt() / self.params.substeps as f64;
        match world.rest(pose) {
            Some((rest, radius)) => match &mut self.branch {
                Some(b) => {
                    b.set_rest(rest);
                    b.radius = radius;
                }
                None => self.branch = Some(BranchState::at_rest(rest, radius, &self.params)),
            },
            None => self.branch = None,
        }
        let k = self.params.k_contact;
        let mut w = [0.0; 6];
        if let Some(b) = &mut self.branch {
            for _ in 0..self.params.substeps {
                let (f, _) = contact_wrench(&self.profile, &b.position, b.radius, k);
                branch_dynamics_step(b, &f, dt);
            }
            w = contact_wrench(&self.profile, &b.position, b.radius, k).1;
        }
        for l in leaders_in_tool(world.leaders, pose) {
            let lw = leader_wrench(&self.profile, &l, self.params.k_leader);
            for i in 0..6 {
                w[i] += lw[i];
            }
        }
        let sensed = self.sensor.sample(&w);
        self.time += self.params.sensor_dt();
        let center = self.branch.map(|b| b.position);
        if let Some(t) = &mut self.trace {
            t.push(PlantTraceRow {
                time: self.time,
                true_wrench: w,
                sensed,
                branch_y: center.map(|c| c.x),
                branch_z: center.map(|c| c.y),
            });
        }
        PlantSample {
            true_wrench: w,
            sensed,
            branch_center: center,
        }
    }
}

pub fn true_force(sample: &PlantSample) -> f64 {
    force_magnitude(&sample.true_wrench)
}

pub fn write_plant_trace(path: &Path, rows: &[PlantTraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let names = ["tx", "ty", "tz", "fx", "fy", "fz"];
    let mut header = vec!["time".to_string()];
    header.extend(names.iter().map(|n| format!("true_{n}")));
    header.extend(names.iter().map(|n| format!("sensed_{n}")));
    header.extend(["branch_y".into(), "branch_z".into()]);
    w.write_record(&header).map_err(|e| Error::io(path, e.into()))?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        let mut rec = vec![r.time.to_string()];
        rec.extend(r.true_wrench.iter().map(f64::to_string));
        rec.extend(r.sensed.iter().map(f64::to_string));
        rec.extend([opt(r.branch_y), opt(r.branch_z)]);
        w.write_record(&rec).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Straight branch along world x through `point`, for isolated contact studies.
pub fn straight_branch(point: P3, radius: f64) -> CapsuleChain {
    let a = point - Vec3::new(0.1, 0.0, 0.0);
    let b = point + Vec3::new(0.1, 0.0, 0.0);
    CapsuleChain::from_points(&[a, b], &[radius])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::CutterGeometry;
    use nalgebra::Vector3;

    fn profile() -> CutterProfile {
        CutterProfile::new(&CutterGeometry::default()).unwrap()
    }

    #[test]
    fn one_millimetre_press_gives_two_newtons() {
        let c = profile();
        // Against the flat front face of the upper jaw.
        let (f, w) = contact_wrench(&c, &P2::new(0.019, 0.014), 0.005, 2000.0);
        assert!((f.y - 2.0).abs() < 1e-9 && f.x.abs() < 1e-12);
        assert!((w[FZ] - 2.0).abs() < 1e-9);
        assert!((w[TX] - 0.019 * 2.0).abs() < 1e-9);
    }

    #[test]
    fn centred_branch_in_pocket_has_no_moment() {
        let c = profile();
        let (f, w) = contact_wrench(&c, &P2::new(0.0, 0.004), 0.005, 2000.0);
        assert!(f.y > 0.0 && f.x.abs() < 1e-12);
        assert!(w[FY].abs() < 1e-12 && w[TX].abs() < 1e-12);
        // Off-centre, the floor pushes the branch back towards the pivot.
        let (f, _) = contact_wrench(&c, &P2::new(0.001, 0.004), 0.005, 2000.0);
        assert!(f.x < 0.0);
    }

    #[test]
    fn torque_matches_cross_product() {
        let c = profile();
        for (y, z) in [(0.002, 0.004), (-0.003, 0.0042), (0.0, 0.0041)] {
            let center = P2::new(y, z);
            let (f, w) = contact_wrench(&c, &center, 0.005, 2000.0);
            // Sum r × f over every solid the disc overlaps.
            let mut tau = Vector3::zeros();
            let mut total = Vector3::zeros();
            for solid in &c.solids {
                let (q, d) = solid.closest_boundary_point(&center);
                if d < 0.005 && !solid.contains(&center) {
                    let fi = (center - q) / d * (2000.0 * (0.005 - d));
                    let fi = Vector3::new(0.0, fi.x, fi.y);
                    tau += Vector3::new(0.0, q.x, q.y).cross(&fi);
                    total += fi;
                }
            }
            assert!((total - Vector3::new(0.0, f.x, f.y)).norm() < 1e-12);
            assert!((w[TX] - tau.x).abs() < 1e-12);
        }
    }

    #[test]
    fn funnel_edge_pushes_towards_centre() {
        let c = profile();
        // Touching the upper funnel edge from inside the mouth.
        let center = P2::new(0.010, 0.0085);
        let (f, w) = contact_wrench(&c, &center, 0.004, 2000.0);
        assert!(f.norm() > 0.0);
        assert!(f.x < 0.0 && f.y > 0.0, "{f:?}");
        assert!(w[FY] < 0.0 && w[FZ] > 0.0);
    }

    #[test]
    fn static_deflection() {
        let p = PlantParams::default();
        let mut b = BranchState::at_rest(P2::origin(), 0.005, &p);
        for _ in 0..20_000 {
            branch_dynamics_step(&mut b, &Vec2::new(0.0, 2.0), 0.0005);
        }
        assert!((b.deflection().y - 0.01).abs() < 1e-6);
    }

    #[test]
    fn rest_shift_keeps_deflection() {
        let p = PlantParams::default();
        let mut b = BranchState::at_rest(P2::new(0.0, 0.01), 0.005, &p);
        b.position = P2::new(0.001, 0.012);
        b.set_rest(P2::new(0.005, 0.0));
        assert!((b.deflection() - Vec2::new(0.001, 0.002)).norm() < 1e-15);
    }

    #[test]
    fn pressed_branch_settles() {
        let p = PlantParams::default();
        let c = profile();
        // Rest point 2 mm into the hinge face.
        let mut b = BranchState::at_rest(P2::new(0.0, 0.003), 0.005, &p);
        let mut peaks = Vec::new();
        let mut window_max: f64 = 0.0;
        for step in 1..=40_000 {
            let (f, _) = contact_wrench(&c, &b.position, b.radius, p.k_contact);
            branch_dynamics_step(&mut b, &f, 0.0005);
            window_max = window_max.max(b.kinetic_energy());
            if step % 2000 == 0 {
                peaks.push(window_max);
                window_max = 0.0;
            }
        }
        for w in peaks.windows(2) {
            assert!(w[1] <= w[0] + 1e-15, "{peaks:?}");
        }
        assert!(*peaks.last().unwrap() < 1e-12);
        // Equilibrium: spring and contact balance along z.
        let (f, _) = contact_wrench(&c, &b.position, b.radius, p.k_contact);
        assert!((f.y - p.k_branch * b.deflection().y).abs() < 1e-6);
    }

    #[test]
    fn sensor_noise_is_zero_mean() {
        let mut s = SensorModel::new(0.05, 0.0005, 3);
        let n = 10_000;
        let mut sum = [0.0; 6];
        for _ in 0..n {
            let w = s.sample(&[0.0; 6]);
            for i in 0..6 {
                sum[i] += w[i];
            }
        }
        for (i, v) in sum.iter().enumerate() {
            let std = if i < 3 { 0.0005 } else { 0.05 };
            assert!((v / n as f64).abs() < 4.0 * std / (n as f64).sqrt(), "component {i}");
        }
        let mut quiet = SensorModel::new(0.0, 0.0, 3);
        assert_eq!(quiet.sample(&[1.0; 6]), [1.0; 6]);
    }

    #[test]
    fn leader_resists_jaw_tips() {
        let c = profile();
        let far = LeaderContact { x: 0.0, z: 0.03, radius: 0.01 };
        assert_eq!(leader_wrench(&c, &far, 1500.0), [0.0; 6]);
        let near = LeaderContact { x: 0.002, z: 0.018, radius: 0.01 };
        let w = leader_wrench(&c, &near, 1500.0);
        assert!((w[FZ] - 1500.0 * 0.002).abs() < 1e-9);
        assert!((w[TY] + 0.002 * w[FZ]).abs() < 1e-12);
        let aside = LeaderContact { x: 0.02, z: 0.0, radius: 0.01 };
        assert_eq!(leader_wrench(&c, &aside, 1500.0), [0.0; 6]);
        assert_eq!(w[crate::admittance::FX], 0.0);
    }

    #[test]
    fn plant_tick_follows_tool() {
        let c = profile();
        let point = P3::new(0.0, 1.0, 0.0);
        let chain = straight_branch(point, 0.005);
        let world = ContactScene {
            branch: &chain,
            near_arclength: 0.1,
            leaders: &[],
        };
        let mut plant = ContactPlant::new(PlantParams::default().noiseless(), c, 1).unwrap();
        let away = ToolPose::facing_trellis(point - Vec3::new(0.0, 0.0, 0.1));
        let s = plant.tick(&away, &world);
        assert_eq!(s.true_wrench, [0.0; 6]);
        assert!((s.branch_center.unwrap() - P2::new(0.0, 0.1)).norm() < 1e-12);
        let pressed = ToolPose::facing_trellis(point - Vec3::new(0.0, 0.0, 0.004));
        let s = plant.tick(&pressed, &world);
        assert!(s.true_wrench[FZ] > 0.0);
    }
}
