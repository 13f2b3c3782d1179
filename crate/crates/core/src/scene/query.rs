use crate::error::{Error, Result};
use crate::geometry::{segment_plane, ToolPose, P2, P3};

use super::{CapsuleChain, PruneTarget, SceneGraph, ZoneRule, ZoneStatus};

/// Where a branch chain crosses the cutter's yz-plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchCrossing {
    pub world: P3,
    /// Crossing point in tool `(y, z)` coordinates.
    pub yz: P2,
    /// Arclength from the leader attachment (m).
    pub arclength: f64,
}

/// Crossing of `chain` with the cut plane nearest (in arclength) to `near_arclength`.
pub fn chain_crossing(chain: &CapsuleChain, pose: &ToolPose, near_arclength: f64) -> Option<BranchCrossing> {
    let n = pose.x_axis();
    let d = n.dot(&pose.pivot().coords);
    let mut acc = 0.0;
    let mut best: Option<BranchCrossing> = None;
    for seg in &chain.segments {
        let len = seg.length();
        if let Some(s) = segment_plane(&seg.a, &seg.b, &n, d) {
            let world = seg.a + (seg.b - seg.a) * s;
            let local = pose.to_tool(&world);
            let c = BranchCrossing {
                world,
                yz: P2::new(local.y, local.z),
                arclength: acc + s * len,
            };
            let better = best.is_none_or(|b| {
                (c.arclength - near_arclength).abs() < (b.arclength - near_arclength).abs()
            });
            if better {
                best = Some(c);
            }
        }
        acc += len;
    }
    best
}

pub fn branch_crossing(scene: &SceneGraph, pose: &ToolPose, target: &PruneTarget) -> Option<BranchCrossing> {
    chain_crossing(scene.branch(target), pose, target.arclength)
}

/// Zone of the target branch under the rigid-tree rule.
pub fn query_zone(scene: &SceneGraph, pose: &ToolPose, target: &PruneTarget) -> ZoneStatus {
    query_zone_with(scene, pose, target, ZoneRule::Extended)
}

pub fn query_zone_with(
    scene: &SceneGraph,
    pose: &ToolPose,
    target: &PruneTarget,
    rule: ZoneRule,
) -> ZoneStatus {
    match branch_crossing(scene, pose, target) {
        Some(c) => {
            let target_x = pose.to_tool(&target.point).x;
            scene.cutter.classify(&c.yz, target_x, rule)
        }
        None => ZoneStatus::None,
    }
}

/// Euclidean distance from the cutter pivot to the cut point.
pub fn distance_to_target(pose: &ToolPose, target: &PruneTarget) -> f64 {
    (pose.pivot() - target.point).norm()
}

/// Branch length left between the leader and the cut plane.
pub fn branch_remnant_length(scene: &SceneGraph, pose: &ToolPose, target: &PruneTarget) -> Result<f64> {
    branch_crossing(scene, pose, target)
        .map(|c| c.arclength)
        .ok_or(Error::NotCuttable)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;
    use crate::scene::{build_scene, SceneConfig};
    use nalgebra::UnitQuaternion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scene() -> SceneGraph {
        build_scene(&SceneConfig::default(), 7).unwrap()
    }

    #[test]
    fn pivot_on_target_is_success() {
        let s = scene();
        for t in &s.targets {
            let pose = ToolPose::facing_trellis(t.point);
            assert_eq!(query_zone(&s, &pose, t), ZoneStatus::Success);
        }
    }

    #[test]
    fn far_cutter_is_none() {
        let s = scene();
        let t = &s.targets[0];
        let pose = ToolPose::facing_trellis(t.point - Vec3::new(0.0, 0.0, 0.5));
        assert_eq!(query_zone(&s, &pose, t), ZoneStatus::None);
    }

    #[test]
    fn branch_in_outer_band_is_failure() {
        let s = scene();
        let t = &s.targets[0];
        // Put the pivot below the branch so the crossing lands in the upper band.
        let mut found = false;
        for k in 0..400 {
            let dy = 0.010 + k as f64 * 0.0001;
            let pose = ToolPose::facing_trellis(t.point - Vec3::new(0.0, dy, 0.004));
            let c = branch_crossing(&s, &pose, t).unwrap();
            let oracle = s.cutter.failure_regions[0].contains(&c.yz);
            let zone = query_zone(&s, &pose, t);
            assert_eq!(zone == ZoneStatus::Failure, oracle);
            found |= oracle;
        }
        assert!(found);
    }

    #[test]
    fn distance_examples() {
        let s = scene();
        let t = &s.targets[0];
        assert_eq!(distance_to_target(&ToolPose::facing_trellis(t.point), t), 0.0);
        let pose = ToolPose::facing_trellis(t.point + Vec3::new(0.0, 0.0, 0.15));
        assert!((distance_to_target(&pose, t) - 0.15).abs() < 1e-12);
    }

    #[test]
    fn distance_matches_brute_force_and_is_rigid_invariant() {
        let s = scene();
        let t = s.targets[1];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let p = P3::new(rng.random_range(-1.0..1.0), rng.random_range(0.0..2.0), rng.random_range(-1.0..0.0));
            let rot = UnitQuaternion::from_euler_angles(rng.random(), rng.random(), rng.random());
            let pose = ToolPose::new(p, rot);
            let diff = [p.x - t.point.x, p.y - t.point.y, p.z - t.point.z];
            let brute = (diff[0] * diff[0] + diff[1] * diff[1] + diff[2] * diff[2]).sqrt();
            let d = distance_to_target(&pose, &t);
            assert!((d - brute).abs() < 1e-12);
            // Move both by a rigid motion.
            let motion = nalgebra::Isometry3::new(
                Vec3::new(rng.random(), rng.random(), rng.random()),
                Vec3::new(rng.random(), rng.random(), rng.random()),
            );
            let moved_pose = ToolPose(motion * pose.0);
            let mut moved_t = t;
            moved_t.point = motion.transform_point(&t.point);
            assert!((distance_to_target(&moved_pose, &moved_t) - d).abs() < 1e-12);
        }
    }

    #[test]
    fn remnant_at_target_and_attachment() {
        let s = scene();
        for t in &s.targets {
            let at_target = branch_remnant_length(&s, &ToolPose::facing_trellis(t.point), t).unwrap();
            assert!((at_target - 0.03).abs() < 1e-9);
            let at_root = branch_remnant_length(&s, &ToolPose::facing_trellis(t.leader_attach), t).unwrap();
            assert!(at_root.abs() < 1e-12);
        }
    }

    #[test]
    fn remnant_on_straight_branch_midpoint() {
        let chain = CapsuleChain::from_points(&[P3::new(0.0, 1.0, 0.0), P3::new(0.2, 1.1, -0.05)], &[0.005]);
        let mid = P3::new(0.1, 1.05, -0.025);
        let c = chain_crossing(&chain, &ToolPose::facing_trellis(mid), 0.0).unwrap();
        // Analytic: the plane x = 0.1 bisects the segment.
        assert!((c.arclength - chain.length() / 2.0).abs() < 1e-12);
    }

    #[test]
    fn not_cuttable_when_plane_misses() {
        let s = scene();
        let t = &s.targets[0];
        let pose = ToolPose::facing_trellis(t.point + Vec3::new(5.0, 0.0, 0.0));
        assert!(matches!(branch_remnant_length(&s, &pose, t), Err(Error::NotCuttable)));
    }
}
