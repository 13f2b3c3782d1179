//! Bypass-cutter profile in the tool yz-plane and the zone classification.
//!
//! Coordinates are `(y, z)` in metres with the pivot at the origin; the mouth
//! opens towards `+z`. The mouth is a funnel that narrows into a small pocket
//! whose shallow V-shaped floor has the pivot at its apex.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Polygon2, P2};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CutterGeometry {
    /// Full width of the mouth opening (m).
    pub opening_width: f64,
    /// Distance from the pivot to the opening plane (m).
    pub mouth_depth: f64,
    pub pocket_half_width: f64,
    pub pocket_depth: f64,
    /// Slope of the V-shaped pocket floor; its apex is the pivot (degrees).
    pub pocket_floor_deg: f64,
    /// Success region reach beyond the opening plane (m).
    pub success_extension: f64,
    /// Width of the failure band along the outer jaw edges (m).
    pub failure_band: f64,
    /// Jaw thickness measured in y (m).
    pub jaw_thickness: f64,
    pub hinge_depth: f64,
    pub mouth_half_width_x: f64,
    /// Physical half thickness of the jaws along tool x (m).
    pub blade_half_thickness_x: f64,
}

impl Default for CutterGeometry {
    fn default() -> Self {
        CutterGeometry {
            opening_width: 0.030,
            mouth_depth: 0.010,
            pocket_half_width: 0.006,
            pocket_depth: 0.004,
            pocket_floor_deg: 20.0,
            success_extension: 0.010,
            failure_band: 0.010,
            jaw_thickness: 0.008,
            hinge_depth: 0.030,
            mouth_half_width_x: 0.015,
            blade_half_thickness_x: 0.004,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ZoneStatus {
    None,
    Success,
    Failure,
}

/// Which success test to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZoneRule {
    /// Rigid-tree simulation: the success region reaches past the opening and
    /// the target must lie within the mouth's x extent.
    Extended,
    /// Physical evaluation: the branch must be inside the mouth itself, with
    /// the same lateral tolerance on the target.
    Mouth,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CutterProfile {
    pub pivot: P2,
    pub mouth_polygon: Polygon2,
    pub success_region: Polygon2,
    /// Upper and lower bands along the outer jaw edges.
    pub failure_regions: Vec<Polygon2>,
    pub mouth_half_width_x: f64,
    /// Convex solid parts (upper jaw, lower jaw, two hinge halves) for contact and rendering.
    pub solids: Vec<Polygon2>,
    pub blade_half_thickness_x: f64,
}

impl CutterProfile {
    pub fn new(g: &CutterGeometry) -> Result<Self> {
        let positive = [
            ("opening_width", g.opening_width),
            ("mouth_depth", g.mouth_depth),
            ("pocket_half_width", g.pocket_half_width),
            ("pocket_depth", g.pocket_depth),
            ("success_extension", g.success_extension),
            ("failure_band", g.failure_band),
            ("jaw_thickness", g.jaw_thickness),
            ("hinge_depth", g.hinge_depth),
            ("mouth_half_width_x", g.mouth_half_width_x),
            ("blade_half_thickness_x", g.blade_half_thickness_x),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("cutter.{name} must be positive, got {v}")));
            }
        }
        let w = g.opening_width / 2.0;
        let (pw, pd, d, t) = (g.pocket_half_width, g.pocket_depth, g.mouth_depth, g.jaw_thickness);
        if pw >= w || pd >= d {
            return Err(Error::Config(
                "cutter pocket must be narrower and shallower than the mouth".into(),
            ));
        }
        if !(g.pocket_floor_deg >= 0.0 && g.pocket_floor_deg < 45.0) {
            return Err(Error::Config("cutter.pocket_floor_deg must be in [0, 45)".into()));
        }
        let h = pw * g.pocket_floor_deg.to_radians().tan();
        if h >= pd {
            return Err(Error::Config("cutter pocket floor rises above the pocket depth".into()));
        }
        let p = |y: f64, z: f64| P2::new(y, z);

        let mouth = Polygon2::new(vec![
            p(0.0, 0.0),
            p(pw, h),
            p(pw, pd),
            p(w, d),
            p(-w, d),
            p(-pw, pd),
            p(-pw, h),
        ]);
        let ext = d + g.success_extension;
        let success = Polygon2::new(vec![
            p(0.0, 0.0),
            p(pw, h),
            p(pw, pd),
            p(w, d),
            p(w, ext),
            p(-w, ext),
            p(-w, d),
            p(-pw, pd),
            p(-pw, h),
        ]);

        // Upper jaw: inner edge follows the mouth, outer edge is offset by the
        // jaw thickness in y.
        let upper = Polygon2::new(vec![
            p(pw, h),
            p(pw, pd),
            p(w, d),
            p(w + t, d),
            p(pw + t, h),
        ]);
        let lower = mirror(&upper);
        // The V floor makes the hinge non-convex, so it is split at the pivot.
        let hinge_upper = Polygon2::new(vec![
            p(0.0, -g.hinge_depth),
            p(pw + t, -g.hinge_depth),
            p(pw + t, h),
            p(pw, h),
            p(0.0, 0.0),
        ]);
        let hinge_lower = mirror(&hinge_upper);

        let band = g.failure_band;
        let upper_band = Polygon2::new(vec![
            p(pw + t, h),
            p(w + t, d),
            p(w + t + band, d),
            p(pw + t + band, h),
        ]);
        let lower_band = mirror(&upper_band);

        let profile = CutterProfile {
            pivot: P2::origin(),
            mouth_polygon: mouth,
            success_region: success,
            failure_regions: vec![upper_band, lower_band],
            mouth_half_width_x: g.mouth_half_width_x,
            solids: vec![upper, lower, hinge_upper, hinge_lower],
            blade_half_thickness_x: g.blade_half_thickness_x,
        };
        for f in &profile.failure_regions {
            if !profile.success_region.disjoint(f) {
                return Err(Error::Config(
                    "cutter success and failure regions overlap".into(),
                ));
            }
        }
        if !profile.solids.iter().all(Polygon2::is_convex) {
            return Err(Error::Config("cutter jaw parts must be convex".into()));
        }
        Ok(profile)
    }

    /// Classify a branch cross-section centre `(y, z)`. `target_x` is the
    /// target's lateral offset in the tool frame.
    pub fn classify(&self, center: &P2, target_x: f64, rule: ZoneRule) -> ZoneStatus {
        let success = match rule {
            ZoneRule::Extended => {
                target_x.abs() <= self.mouth_half_width_x && self.success_region.contains(center)
            }
            ZoneRule::Mouth => {
                target_x.abs() <= self.mouth_half_width_x && self.mouth_polygon.contains(center)
            }
        };
        if success {
            ZoneStatus::Success
        } else if self.failure_regions.iter().any(|f| f.contains(center)) {
            ZoneStatus::Failure
        } else {
            ZoneStatus::None
        }
    }

    /// Front-most z reached by the jaws (the tip plane).
    pub fn front_z(&self) -> f64 {
        self.solids
            .iter()
            .flat_map(|s| s.vertices.iter().map(|v| v.y))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

impl CutterProfile {
    /// Rear-most z of the cutter body.
    pub fn back_z(&self) -> f64 {
        self.solids
            .iter()
            .flat_map(|s| s.vertices.iter().map(|v| v.y))
            .fold(f64::INFINITY, f64::min)
    }
}

fn mirror(poly: &Polygon2) -> Polygon2 {
    // Mirroring flips orientation; reverse to keep the winding consistent.
    Polygon2::new(poly.vertices.iter().rev().map(|v| P2::new(-v.x, v.y)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile() -> CutterProfile {
        CutterProfile::new(&CutterGeometry::default()).unwrap()
    }

    #[test]
    fn pivot_is_mouth_vertex_and_success() {
        let c = profile();
        assert!(c.mouth_polygon.vertices.contains(&c.pivot));
        assert_eq!(c.classify(&c.pivot, 0.0, ZoneRule::Extended), ZoneStatus::Success);
        assert_eq!(c.classify(&c.pivot, 0.0, ZoneRule::Mouth), ZoneStatus::Success);
    }

    #[test]
    fn success_extends_past_opening() {
        let c = profile();
        let beyond = P2::new(0.0, 0.015);
        assert!(!c.mouth_polygon.contains(&beyond));
        assert!(c.success_region.contains(&beyond));
        assert_eq!(c.classify(&beyond, 0.0, ZoneRule::Mouth), ZoneStatus::None);
        // Lateral tolerance on the target.
        assert_eq!(c.classify(&beyond, 0.02, ZoneRule::Extended), ZoneStatus::None);
    }

    #[test]
    fn outer_band_is_failure() {
        let c = profile();
        // Middle of the upper band: between outer jaw edge and band edge.
        let pt = P2::new(0.0185 + 0.005, 0.005);
        assert!(c.failure_regions[0].contains(&pt));
        assert_eq!(c.classify(&pt, 0.0, ZoneRule::Extended), ZoneStatus::Failure);
        let mirrored = P2::new(-pt.x, pt.y);
        assert_eq!(c.classify(&mirrored, 0.0, ZoneRule::Mouth), ZoneStatus::Failure);
    }

    #[test]
    fn far_point_is_none() {
        let c = profile();
        assert_eq!(c.classify(&P2::new(0.0, 0.5), 0.0, ZoneRule::Extended), ZoneStatus::None);
    }

    #[test]
    fn invalid_geometry_rejected() {
        let g = CutterGeometry {
            mouth_depth: -1.0,
            ..Default::default()
        };
        assert!(matches!(CutterProfile::new(&g), Err(Error::Config(_))));
        let g = CutterGeometry {
            pocket_half_width: 0.02,
            ..Default::default()
        };
        assert!(CutterProfile::new(&g).is_err());
    }

    #[test]
    fn jaws_and_hinge_are_convex() {
        let c = profile();
        assert!(c.solids.iter().all(Polygon2::is_convex));
        assert!((c.front_z() - 0.010).abs() < 1e-15);
    }
}
