//! Procedural spindle trees built from capsule chains.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{Aabb, Capsule, Vec3, P3};

pub const MODEL_COUNT: u8 = 8;

/// Connected sequence of capsules: segment `i` ends where segment `i + 1` starts.
#[derive(Debug, Clone, PartialEq)]
pub struct CapsuleChain {
    pub segments: Vec<Capsule>,
}

impl CapsuleChain {
    pub fn from_points(points: &[P3], radii: &[f64]) -> Self {
        assert_eq!(points.len(), radii.len() + 1);
        CapsuleChain {
            segments: points
                .windows(2)
                .zip(radii)
                .map(|(w, &r)| Capsule::new(w[0], w[1], r))
                .collect(),
        }
    }

    pub fn root(&self) -> P3 {
        self.segments[0].a
    }

    pub fn length(&self) -> f64 {
        self.segments.iter().map(Capsule::length).sum()
    }

    /// Point at the given arclength from the root (clamped to the chain).
    pub fn point_at(&self, arclength: f64) -> P3 {
        let mut remaining = arclength.max(0.0);
        for seg in &self.segments {
            let len = seg.length();
            if remaining <= len {
                return seg.a + (seg.b - seg.a) * (remaining / len);
            }
            remaining -= len;
        }
        self.segments.last().map(|s| s.b).unwrap_or_else(P3::origin)
    }

    /// Axis point at height `y`, assuming the chain is monotone in y.
    pub fn point_at_height(&self, y: f64) -> Option<P3> {
        self.segments.iter().find_map(|s| {
            let (lo, hi) = if s.a.y <= s.b.y { (s.a, s.b) } else { (s.b, s.a) };
            (y >= lo.y && y <= hi.y && hi.y > lo.y).then(|| lo + (hi - lo) * ((y - lo.y) / (hi.y - lo.y)))
        })
    }

    pub fn radius_at_height(&self, y: f64) -> Option<f64> {
        self.segments
            .iter()
            .find(|s| y >= s.a.y.min(s.b.y) && y <= s.a.y.max(s.b.y))
            .map(|s| s.radius)
    }

    pub fn min_radius(&self) -> f64 {
        self.segments.iter().map(|s| s.radius).fold(f64::INFINITY, f64::min)
    }

    pub fn aabb(&self) -> Aabb {
        self.segments
            .iter()
            .fold(Aabb::empty(), |acc, s| acc.union(&s.aabb()))
    }

    pub fn is_connected(&self) -> bool {
        self.segments.windows(2).all(|w| w[0].b == w[1].a)
    }

    pub fn translated(&self, offset: &Vec3) -> Self {
        CapsuleChain {
            segments: self
                .segments
                .iter()
                .map(|s| Capsule::new(s.a + offset, s.b + offset, s.radius))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeSpindle {
    pub leader: CapsuleChain,
    pub side_branches: Vec<CapsuleChain>,
    pub model_id: u8,
}

impl TreeSpindle {
    pub fn translated(&self, offset: &Vec3) -> Self {
        TreeSpindle {
            leader: self.leader.translated(offset),
            side_branches: self.side_branches.iter().map(|b| b.translated(offset)).collect(),
            model_id: self.model_id,
        }
    }

    pub fn aabb(&self) -> Aabb {
        self.side_branches
            .iter()
            .fold(self.leader.aabb(), |acc, b| acc.union(&b.aabb()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpindleParams {
    pub leader_height: f64,
    pub leader_segments: usize,
    pub leader_base_radius: f64,
    pub leader_top_radius: f64,
    /// Maximum horizontal wander of leader joints (m).
    pub leader_wobble: f64,
    pub branch_count: [usize; 2],
    /// Side branch attachment heights above the spindle base (m).
    pub branch_height: [f64; 2],
    pub branch_min_spacing: f64,
    pub branch_length: [f64; 2],
    pub branch_radius: [f64; 2],
    pub branch_segments: usize,
    /// Swing of branches towards the viewer (degrees).
    pub branch_azimuth_deg: [f64; 2],
    pub branch_elevation_deg: [f64; 2],
    /// Sag at the branch tip (m).
    pub branch_droop: f64,
}

impl Default for SpindleParams {
    fn default() -> Self {
        SpindleParams {
            leader_height: 1.6,
            leader_segments: 8,
            leader_base_radius: 0.012,
            leader_top_radius: 0.007,
            leader_wobble: 0.010,
            branch_count: [3, 8],
            branch_height: [0.45, 1.35],
            branch_min_spacing: 0.07,
            branch_length: [0.15, 0.30],
            branch_radius: [0.0035, 0.0055],
            branch_segments: 3,
            branch_azimuth_deg: [0.0, 25.0],
            branch_elevation_deg: [-10.0, 30.0],
            branch_droop: 0.02,
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    if range[1] > range[0] {
        rng.random_range(range[0]..range[1])
    } else {
        range[0]
    }
}

/// Generate one spindle with its base at the origin. The result depends only
/// on `(params, model_id, seed)`.
pub fn generate_spindle(params: &SpindleParams, model_id: u8, seed: u64) -> TreeSpindle {
    assert!(model_id < MODEL_COUNT, "model_id {model_id} out of range");
    let mixed = seed ^ (u64::from(model_id) + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut rng = ChaCha8Rng::seed_from_u64(mixed);

    let n = params.leader_segments.max(1);
    let mut points = Vec::with_capacity(n + 1);
    let mut radii = Vec::with_capacity(n);
    for i in 0..=n {
        let f = i as f64 / n as f64;
        let (dx, dz) = if i == 0 {
            (0.0, 0.0)
        } else {
            (
                rng.random_range(-1.0..1.0) * params.leader_wobble,
                rng.random_range(-1.0..1.0) * params.leader_wobble,
            )
        };
        points.push(P3::new(dx, f * params.leader_height, dz));
        if i < n {
            let fm = (i as f64 + 0.5) / n as f64;
            radii.push(
                params.leader_base_radius + (params.leader_top_radius - params.leader_base_radius) * fm,
            );
        }
    }
    let leader = CapsuleChain::from_points(&points, &radii);

    let count = rng.random_range(params.branch_count[0]..=params.branch_count[1].max(params.branch_count[0]));
    let mut heights: Vec<f64> = Vec::with_capacity(count);
    let mut attempts = 0;
    while heights.len() < count && attempts < 200 {
        attempts += 1;
        let h = uniform(&mut rng, params.branch_height);
        if heights.iter().all(|&o| (o - h).abs() >= params.branch_min_spacing) {
            heights.push(h);
        }
    }
    heights.sort_by(f64::total_cmp);

    let mut side_branches = Vec::with_capacity(heights.len());
    for h in heights {
        let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let az = uniform(&mut rng, params.branch_azimuth_deg).to_radians();
        let el = uniform(&mut rng, params.branch_elevation_deg).to_radians();
        let length = uniform(&mut rng, params.branch_length);
        let radius = uniform(&mut rng, params.branch_radius);
        let dir = Vec3::new(
            side * libm::cos(el) * libm::cos(az),
            libm::sin(el),
            -libm::cos(el) * libm::sin(az),
        );
        let root = leader
            .point_at_height(h)
            .unwrap_or_else(|| P3::new(0.0, h, 0.0));
        let segs = params.branch_segments.max(1);
        let pts: Vec<P3> = (0..=segs)
            .map(|k| {
                let f = k as f64 / segs as f64;
                root + dir * (length * f) - Vec3::y() * (params.branch_droop * f * f)
            })
            .collect();
        side_branches.push(CapsuleChain::from_points(&pts, &vec![radius; segs]));
    }

    TreeSpindle {
        leader,
        side_branches,
        model_id,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_model_and_seed() {
        let p = SpindleParams::default();
        assert_eq!(generate_spindle(&p, 3, 11), generate_spindle(&p, 3, 11));
        assert_ne!(generate_spindle(&p, 3, 11), generate_spindle(&p, 3, 12));
    }

    #[test]
    fn chains_connected_and_radii_positive() {
        let p = SpindleParams::default();
        for seed in 0..50 {
            let s = generate_spindle(&p, (seed % 8) as u8, seed);
            assert!(s.leader.is_connected());
            assert!(s.side_branches.iter().all(CapsuleChain::is_connected));
            assert!(s.leader.segments.iter().all(|c| c.radius > 0.0));
            assert!((3..=8).contains(&s.side_branches.len()));
        }
    }

    #[test]
    fn side_branches_thinner_than_leader_over_many_seeds() {
        let p = SpindleParams::default();
        for seed in 0..1000u64 {
            let s = generate_spindle(&p, (seed % 8) as u8, seed);
            let leader_min = s.leader.min_radius();
            for b in &s.side_branches {
                for seg in &b.segments {
                    assert!(seg.radius < leader_min, "seed {seed}");
                }
            }
        }
    }

    #[test]
    fn eight_models_pairwise_distinct() {
        let p = SpindleParams::default();
        let models: Vec<TreeSpindle> = (0..MODEL_COUNT).map(|m| generate_spindle(&p, m, 0)).collect();
        let vertices = |s: &TreeSpindle| -> Vec<P3> {
            s.leader
                .segments
                .iter()
                .chain(s.side_branches.iter().flat_map(|b| b.segments.iter()))
                .flat_map(|c| [c.a, c.b])
                .collect()
        };
        for i in 0..models.len() {
            for j in i + 1..models.len() {
                assert_ne!(vertices(&models[i]), vertices(&models[j]), "models {i} and {j}");
            }
        }
    }

    #[test]
    fn point_at_walks_the_chain() {
        let c = CapsuleChain::from_points(
            &[P3::origin(), P3::new(1.0, 0.0, 0.0), P3::new(1.0, 1.0, 0.0)],
            &[0.1, 0.1],
        );
        assert_eq!(c.point_at(0.5), P3::new(0.5, 0.0, 0.0));
        assert_eq!(c.point_at(1.5), P3::new(1.0, 0.5, 0.0));
        assert_eq!(c.point_at(9.0), P3::new(1.0, 1.0, 0.0));
        assert!((c.length() - 2.0).abs() < 1e-15);
    }
}
