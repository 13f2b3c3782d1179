//! Primitive geometry shared by the scene, the renderer and the contact plant.
//!
//! World frame: `y` is up, the trellis plane sits near `z = 0`, and the tool
//! approaches from negative `z`. Tool frame: `x` lateral, `y` vertical, `z`
//! forward (the approach direction). The cutter pivot is the tool origin.

use nalgebra::{Isometry3, Point2, Point3, Translation3, UnitQuaternion, Vector2, Vector3};

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;
pub type P2 = Point2<f64>;
pub type P3 = Point3<f64>;

/// Rigid pose of the cutter; the translation is the pivot in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToolPose(pub Isometry3<f64>);

impl ToolPose {
    pub fn new(pivot: P3, rotation: UnitQuaternion<f64>) -> Self {
        ToolPose(Isometry3::from_parts(Translation3::from(pivot.coords), rotation))
    }

    /// Tool frame aligned with the world frame (facing the trellis).
    pub fn facing_trellis(pivot: P3) -> Self {
        Self::new(pivot, UnitQuaternion::identity())
    }

    pub fn pivot(&self) -> P3 {
        P3::from(self.0.translation.vector)
    }

    pub fn rotation(&self) -> UnitQuaternion<f64> {
        self.0.rotation
    }

    pub fn x_axis(&self) -> Vec3 {
        self.0.rotation * Vec3::x()
    }

    pub fn y_axis(&self) -> Vec3 {
        self.0.rotation * Vec3::y()
    }

    pub fn z_axis(&self) -> Vec3 {
        self.0.rotation * Vec3::z()
    }

    /// World point expressed in tool coordinates.
    pub fn to_tool(&self, p: &P3) -> P3 {
        self.0.inverse_transform_point(p)
    }

    pub fn to_world(&self, p: &P3) -> P3 {
        self.0.transform_point(p)
    }

    /// Translate by a tool-frame vector.
    pub fn translated_local(&self, v: &Vec3) -> Self {
        let world = self.0.rotation * v;
        let mut iso = self.0;
        iso.translation.vector += world;
        ToolPose(iso)
    }

    pub fn translated_world(&self, v: &Vec3) -> Self {
        let mut iso = self.0;
        iso.translation.vector += v;
        ToolPose(iso)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: P3,
    /// Unit direction.
    pub dir: Vec3,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub normal: Vec3,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Capsule {
    pub a: P3,
    pub b: P3,
    pub radius: f64,
}

impl Capsule {
    pub fn new(a: P3, b: P3, radius: f64) -> Self {
        Capsule { a, b, radius }
    }

    pub fn length(&self) -> f64 {
        (self.b - self.a).norm()
    }

    /// Closest point on the axis segment to `p`.
    pub fn closest_axis_point(&self, p: &P3) -> P3 {
        let ab = self.b - self.a;
        let denom = ab.norm_squared();
        if denom == 0.0 {
            return self.a;
        }
        let s = ((p - self.a).dot(&ab) / denom).clamp(0.0, 1.0);
        self.a + ab * s
    }

    pub fn signed_distance(&self, p: &P3) -> f64 {
        (p - self.closest_axis_point(p)).norm() - self.radius
    }

    pub fn aabb(&self) -> Aabb {
        let r = Vec3::repeat(self.radius);
        Aabb {
            min: P3::from(self.a.coords.inf(&self.b.coords) - r),
            max: P3::from(self.a.coords.sup(&self.b.coords) + r),
        }
    }

    /// Nearest forward intersection (t > 0) of the ray with the capsule surface.
    pub fn intersect(&self, ray: &Ray) -> Option<Hit> {
        let ba = self.b - self.a;
        let oa = ray.origin - self.a;
        let baba = ba.dot(&ba);
        let bard = ba.dot(&ray.dir);
        let baoa = ba.dot(&oa);
        let rdoa = ray.dir.dot(&oa);
        let oaoa = oa.dot(&oa);
        let r2 = self.radius * self.radius;

        let a = baba - bard * bard;
        let mut cap_origin = None;
        if a > 1e-14 * baba.max(1e-300) {
            let b = baba * rdoa - baoa * bard;
            let c = baba * oaoa - baoa * baoa - r2 * baba;
            let h = b * b - a * c;
            if h < 0.0 {
                return None;
            }
            let t = (-b - h.sqrt()) / a;
            let y = baoa + t * bard;
            if y > 0.0 && y < baba {
                if t <= 0.0 {
                    return None;
                }
                return Some(self.hit_at(ray, t));
            }
            cap_origin = Some(if y <= 0.0 { self.a } else { self.b });
        }
        // Caps (or the degenerate axis-parallel case): test both spheres.
        let spheres: &[P3] = match cap_origin {
            Some(ref c) => std::slice::from_ref(c),
            None => &[],
        };
        let both = [self.a, self.b];
        let candidates = if spheres.is_empty() { &both[..] } else { spheres };
        let mut best: Option<f64> = None;
        for c in candidates {
            if let Some(t) = ray_sphere(ray, c, self.radius) {
                best = Some(best.map_or(t, |b: f64| b.min(t)));
            }
        }
        best.map(|t| self.hit_at(ray, t))
    }

    fn hit_at(&self, ray: &Ray, t: f64) -> Hit {
        let p = ray.origin + ray.dir * t;
        let c = self.closest_axis_point(&p);
        let n = p - c;
        let len = n.norm();
        let normal = if len > 0.0 { n / len } else { -ray.dir };
        Hit { t, normal }
    }
}

fn ray_sphere(ray: &Ray, center: &P3, radius: f64) -> Option<f64> {
    let oc = ray.origin - center;
    let b = oc.dot(&ray.dir);
    let c = oc.dot(&oc) - radius * radius;
    let h = b * b - c;
    if h < 0.0 {
        return None;
    }
    let t = -b - h.sqrt();
    (t > 0.0).then_some(t)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: P3,
    pub max: P3,
}

impl Aabb {
    pub fn empty() -> Self {
        Aabb {
            min: P3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY),
            max: P3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
        }
    }

    pub fn union(&self, other: &Aabb) -> Aabb {
        Aabb {
            min: P3::from(self.min.coords.inf(&other.min.coords)),
            max: P3::from(self.max.coords.sup(&other.max.coords)),
        }
    }

    pub fn contains(&self, p: &P3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    /// Slab test returning the entry distance and the face normal.
    pub fn intersect(&self, ray: &Ray) -> Option<Hit> {
        let mut t_enter = f64::NEG_INFINITY;
        let mut t_exit = f64::INFINITY;
        let mut normal = Vec3::zeros();
        for i in 0..3 {
            let o = ray.origin[i];
            let d = ray.dir[i];
            if d == 0.0 {
                if o < self.min[i] || o > self.max[i] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d;
            let (t0, t1) = ((self.min[i] - o) * inv, (self.max[i] - o) * inv);
            let (near, far, sign) = if t0 < t1 { (t0, t1, -1.0) } else { (t1, t0, 1.0) };
            if near > t_enter {
                t_enter = near;
                normal = Vec3::zeros();
                normal[i] = sign;
            }
            t_exit = t_exit.min(far);
            if t_enter > t_exit {
                return None;
            }
        }
        (t_enter > 0.0).then_some(Hit { t: t_enter, normal })
    }

    /// Cheap rejection test: does the ray pass through the box at all (t ≥ 0)?
    pub fn hit_by(&self, ray: &Ray) -> bool {
        let mut t_enter = 0.0f64;
        let mut t_exit = f64::INFINITY;
        for i in 0..3 {
            let o = ray.origin[i];
            let d = ray.dir[i];
            if d == 0.0 {
                if o < self.min[i] || o > self.max[i] {
                    return false;
                }
                continue;
            }
            let inv = 1.0 / d;
            let (t0, t1) = ((self.min[i] - o) * inv, (self.max[i] - o) * inv);
            t_enter = t_enter.max(t0.min(t1));
            t_exit = t_exit.min(t0.max(t1));
            if t_enter > t_exit {
                return false;
            }
        }
        true
    }
}

/// Convex solid given as an intersection of half-spaces `n · p <= d`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexSolid {
    pub planes: Vec<(Vec3, f64)>,
}

impl ConvexSolid {
    /// Extrude a convex polygon in the tool yz-plane over `x ∈ [-half_x, half_x]`,
    /// then place it in the world with `pose`.
    pub fn extruded_yz(polygon: &Polygon2, half_x: f64, pose: &ToolPose) -> Self {
        let mut local: Vec<(Vec3, f64)> = vec![(Vec3::x(), half_x), (-Vec3::x(), half_x)];
        let orient = polygon.orientation_sign();
        let n = polygon.vertices.len();
        for i in 0..n {
            let p = polygon.vertices[i];
            let q = polygon.vertices[(i + 1) % n];
            let e = q - p;
            // Outward normal in (y, z).
            let out = if orient > 0.0 {
                Vec2::new(e.y, -e.x)
            } else {
                Vec2::new(-e.y, e.x)
            };
            let len = out.norm();
            if len == 0.0 {
                continue;
            }
            let out = out / len;
            let n3 = Vec3::new(0.0, out.x, out.y);
            local.push((n3, out.dot(&p.coords)));
        }
        let planes = local
            .into_iter()
            .map(|(n, d)| {
                let nw = pose.rotation() * n;
                let dw = d + nw.dot(&pose.pivot().coords);
                (nw, dw)
            })
            .collect();
        ConvexSolid { planes }
    }

    pub fn contains(&self, p: &P3) -> bool {
        self.planes.iter().all(|(n, d)| n.dot(&p.coords) <= *d + 1e-12)
    }

    pub fn intersect(&self, ray: &Ray) -> Option<Hit> {
        let mut t_enter = f64::NEG_INFINITY;
        let mut t_exit = f64::INFINITY;
        let mut normal = Vec3::zeros();
        for (n, d) in &self.planes {
            let denom = n.dot(&ray.dir);
            let dist = d - n.dot(&ray.origin.coords);
            if denom == 0.0 {
                if dist < 0.0 {
                    return None;
                }
                continue;
            }
            let t = dist / denom;
            if denom < 0.0 {
                if t > t_enter {
                    t_enter = t;
                    normal = *n;
                }
            } else {
                t_exit = t_exit.min(t);
            }
            if t_enter > t_exit {
                return None;
            }
        }
        (t_enter > 0.0 && t_enter.is_finite()).then_some(Hit { t: t_enter, normal })
    }
}

/// Simple polygon in a 2D plane; for the cutter these are `(y, z)` tool coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Polygon2 {
    pub vertices: Vec<P2>,
}

impl Polygon2 {
    pub fn new(vertices: Vec<P2>) -> Self {
        Polygon2 { vertices }
    }

    pub fn from_mm(coords: &[(f64, f64)]) -> Self {
        Polygon2 {
            vertices: coords
                .iter()
                .map(|&(y, z)| P2::new(y * 1e-3, z * 1e-3))
                .collect(),
        }
    }

    pub fn edges(&self) -> impl Iterator<Item = (P2, P2)> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    pub fn signed_area(&self) -> f64 {
        self.edges()
            .map(|(p, q)| p.x * q.y - q.x * p.y)
            .sum::<f64>()
            * 0.5
    }

    /// +1 for counter-clockwise, -1 for clockwise.
    pub fn orientation_sign(&self) -> f64 {
        self.signed_area().signum()
    }

    pub fn is_convex(&self) -> bool {
        let n = self.vertices.len();
        let mut sign = 0.0;
        for i in 0..n {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            let c = self.vertices[(i + 2) % n];
            let cross = (b - a).perp(&(c - b));
            if cross.abs() < 1e-15 {
                continue;
            }
            if sign == 0.0 {
                sign = cross.signum();
            } else if cross.signum() != sign {
                return false;
            }
        }
        true
    }

    /// Closed point-in-polygon test: boundary points count as inside.
    pub fn contains(&self, p: &P2) -> bool {
        let mut inside = false;
        for (a, b) in self.edges() {
            if point_segment_distance(p, &a, &b) <= 1e-12 {
                return true;
            }
            if (a.y > p.y) != (b.y > p.y) {
                let x = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
                if p.x < x {
                    inside = !inside;
                }
            }
        }
        inside
    }

    /// Closest boundary point to `p` and its distance.
    pub fn closest_boundary_point(&self, p: &P2) -> (P2, f64) {
        let mut best = (self.vertices[0], f64::INFINITY);
        for (a, b) in self.edges() {
            let c = closest_on_segment(p, &a, &b);
            let d = (p - c).norm();
            if d < best.1 {
                best = (c, d);
            }
        }
        best
    }

    /// True when the two closed polygons share no point.
    pub fn disjoint(&self, other: &Polygon2) -> bool {
        if self.vertices.iter().any(|v| other.contains(v)) {
            return false;
        }
        if other.vertices.iter().any(|v| self.contains(v)) {
            return false;
        }
        for (a, b) in self.edges() {
            for (c, d) in other.edges() {
                if segments_intersect(&a, &b, &c, &d) {
                    return false;
                }
            }
        }
        true
    }
}

pub fn closest_on_segment(p: &P2, a: &P2, b: &P2) -> P2 {
    let ab = b - a;
    let denom = ab.norm_squared();
    if denom == 0.0 {
        return *a;
    }
    let s = ((p - a).dot(&ab) / denom).clamp(0.0, 1.0);
    a + ab * s
}

pub fn point_segment_distance(p: &P2, a: &P2, b: &P2) -> f64 {
    (p - closest_on_segment(p, a, b)).norm()
}

fn segments_intersect(a: &P2, b: &P2, c: &P2, d: &P2) -> bool {
    let d1 = (b - a).perp(&(c - a));
    let d2 = (b - a).perp(&(d - a));
    let d3 = (d - c).perp(&(a - c));
    let d4 = (d - c).perp(&(b - c));
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    point_segment_distance(c, a, b) <= 1e-12
        || point_segment_distance(d, a, b) <= 1e-12
        || point_segment_distance(a, c, d) <= 1e-12
        || point_segment_distance(b, c, d) <= 1e-12
}

/// Intersection parameter `s ∈ [0, 1]` of segment `a→b` with the plane `n · p = d`.
pub fn segment_plane(a: &P3, b: &P3, n: &Vec3, d: f64) -> Option<f64> {
    let da = n.dot(&a.coords) - d;
    let db = n.dot(&b.coords) - d;
    if da == 0.0 {
        return Some(0.0);
    }
    if (da > 0.0) == (db > 0.0) || da == db {
        if db == 0.0 {
            return Some(1.0);
        }
        return None;
    }
    Some(da / (da - db))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ray(o: [f64; 3], d: [f64; 3]) -> Ray {
        Ray {
            origin: P3::new(o[0], o[1], o[2]),
            dir: Vec3::new(d[0], d[1], d[2]).normalize(),
        }
    }

    #[test]
    fn capsule_body_hit_distance() {
        let c = Capsule::new(P3::new(-1.0, 0.0, 0.0), P3::new(1.0, 0.0, 0.0), 0.1);
        let h = c.intersect(&ray([0.0, 0.0, -2.0], [0.0, 0.0, 1.0])).unwrap();
        assert!((h.t - 1.9).abs() < 1e-12);
        assert!((h.normal - Vec3::new(0.0, 0.0, -1.0)).norm() < 1e-12);
    }

    #[test]
    fn capsule_cap_and_parallel_hits() {
        let c = Capsule::new(P3::new(0.0, 0.0, 0.0), P3::new(0.0, 0.0, 1.0), 0.2);
        let h = c.intersect(&ray([0.0, 0.0, -1.0], [0.0, 0.0, 1.0])).unwrap();
        assert!((h.t - 0.8).abs() < 1e-12);
        let h = c.intersect(&ray([0.0, 0.0, 3.0], [0.0, 0.0, -1.0])).unwrap();
        assert!((h.t - 1.8).abs() < 1e-12);
        assert!(c.intersect(&ray([0.5, 0.0, -1.0], [0.0, 0.0, 1.0])).is_none());
    }

    #[test]
    fn capsule_behind_ray_is_missed() {
        let c = Capsule::new(P3::new(-1.0, 0.0, 0.0), P3::new(1.0, 0.0, 0.0), 0.1);
        assert!(c.intersect(&ray([0.0, 0.0, 2.0], [0.0, 0.0, 1.0])).is_none());
    }

    #[test]
    fn aabb_slab() {
        let b = Aabb {
            min: P3::new(-1.0, -1.0, 1.0),
            max: P3::new(1.0, 1.0, 2.0),
        };
        let h = b.intersect(&ray([0.0, 0.0, 0.0], [0.0, 0.0, 1.0])).unwrap();
        assert_eq!(h.t, 1.0);
        assert_eq!(h.normal, Vec3::new(0.0, 0.0, -1.0));
        assert!(b.hit_by(&ray([0.0, 0.0, 0.0], [0.0, 0.0, 1.0])));
        assert!(!b.hit_by(&ray([0.0, 3.0, 0.0], [0.0, 0.0, 1.0])));
    }

    #[test]
    fn polygon_closed_containment() {
        let sq = Polygon2::new(vec![
            P2::new(0.0, 0.0),
            P2::new(1.0, 0.0),
            P2::new(1.0, 1.0),
            P2::new(0.0, 1.0),
        ]);
        assert!(sq.contains(&P2::new(0.5, 0.5)));
        assert!(sq.contains(&P2::new(1.0, 0.5)));
        assert!(sq.contains(&P2::new(0.0, 0.0)));
        assert!(!sq.contains(&P2::new(1.0 + 1e-9, 0.5)));
        assert!(sq.is_convex());
    }

    #[test]
    fn extruded_prism_matches_polygon() {
        let tri = Polygon2::new(vec![P2::new(0.0, 0.0), P2::new(1.0, 0.0), P2::new(0.0, 1.0)]);
        let solid = ConvexSolid::extruded_yz(&tri, 0.5, &ToolPose::facing_trellis(P3::origin()));
        assert!(solid.contains(&P3::new(0.0, 0.2, 0.2)));
        assert!(!solid.contains(&P3::new(0.0, 0.8, 0.8)));
        assert!(!solid.contains(&P3::new(0.6, 0.2, 0.2)));
        let h = solid.intersect(&ray([0.0, 0.2, -1.0], [0.0, 0.0, 1.0])).unwrap();
        assert!((h.t - 1.0).abs() < 1e-12);
    }

    #[test]
    fn plane_crossing() {
        let s = segment_plane(
            &P3::new(-1.0, 0.0, 0.0),
            &P3::new(1.0, 0.0, 0.0),
            &Vec3::x(),
            0.5,
        )
        .unwrap();
        assert!((s - 0.75).abs() < 1e-15);
        assert!(segment_plane(&P3::new(1.0, 0.0, 0.0), &P3::new(2.0, 0.0, 0.0), &Vec3::x(), 0.0).is_none());
    }
}
