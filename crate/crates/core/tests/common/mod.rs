#![allow(dead_code)]

use prune_core::camera::{ppm_bytes, render_segmented, CameraModel};
use prune_core::geometry::{ToolPose, Vec3};
use prune_core::scene::{build_scene, SceneConfig};

/// The fixed golden (scene seed, target, stand-off) cases.
pub const GOLDEN_CASES: [(u64, usize, f64); 3] = [(11, 0, 0.15), (42, 1, 0.25), (2024, 2, 0.08)];

pub const GOLDEN_DIGESTS: [&str; 3] = [
    "b139b763a5b16e9743e0bb7cddb96c1eb963376bebaf83150ebbca548eb632ee",
    "3f11606557bb47b4573903ee4f039bd91afbfd950bce985f8627ef3d9b7483d5",
    "d9fe26e935f6ad37e2ae48eb4678508c62155abe0f61dbf530989e6494d73332",
];

pub fn golden_ppm(case: (u64, usize, f64)) -> Vec<u8> {
    let (seed, target, standoff) = case;
    let scene = build_scene(&SceneConfig::default(), seed).unwrap();
    let t = scene.targets[target % scene.targets.len()];
    let pose = ToolPose::facing_trellis(t.point - Vec3::new(0.0, 0.0, standoff));
    ppm_bytes(&render_segmented(&scene, &pose, &CameraModel::default()))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// How many golden cases still render to their recorded digest.
pub fn matching_goldens() -> usize {
    GOLDEN_CASES
        .iter()
        .zip(GOLDEN_DIGESTS)
        .filter(|(c, d)| sha256_hex(&golden_ppm(**c)) == *d)
        .count()
}
