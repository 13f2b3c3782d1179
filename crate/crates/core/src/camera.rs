//! Segmented-image camera mounted on the cutter.
//!
//! Every pixel carries a class hue code (H plane), a tree mask (S plane) and
//! a Lambertian shade (V plane). Rendering is a per-pixel ray cast against
//! the analytic scene primitives.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ConvexSolid, Ray, ToolPose, Vec3, P3};
use crate::scene::SceneGraph;

pub const HUE_CUTTER: u8 = 200;
pub const HUE_TREE: u8 = 90;
pub const HUE_FRAME: u8 = 30;
pub const HUE_WIRE: u8 = 150;
pub const HUE_BACKGROUND: u8 = 0;
pub const CLASS_CODES: [u8; 5] = [HUE_CUTTER, HUE_TREE, HUE_FRAME, HUE_WIRE, HUE_BACKGROUND];

pub const TREE_MASK: u8 = 255;
pub const BACKGROUND_VALUE: u8 = 40;

pub const FULL_WIDTH: usize = 424;
pub const FULL_HEIGHT: usize = 240;
pub const CROP_LEFT: usize = 64;
pub const CROP_TOP: usize = 60;
pub const OBS_WIDTH: usize = 160;
pub const OBS_HEIGHT: usize = 80;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SceneClass {
    Cutter,
    Tree,
    Frame,
    Wire,
    Background,
}

impl SceneClass {
    pub fn hue(self) -> u8 {
        match self {
            SceneClass::Cutter => HUE_CUTTER,
            SceneClass::Tree => HUE_TREE,
            SceneClass::Frame => HUE_FRAME,
            SceneClass::Wire => HUE_WIRE,
            SceneClass::Background => HUE_BACKGROUND,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraModel {
    pub width: usize,
    pub height: usize,
    pub horizontal_fov_deg: f64,
    /// Camera centre in tool coordinates (m). The optical axis is tool +z.
    pub mount_offset: [f64; 3],
    /// Whether the cutter jaws are drawn.
    pub draw_cutter: bool,
}

impl Default for CameraModel {
    fn default() -> Self {
        CameraModel {
            width: FULL_WIDTH,
            height: FULL_HEIGHT,
            horizontal_fov_deg: 69.0,
            mount_offset: [0.0, 0.05, -0.20],
            draw_cutter: true,
        }
    }
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("camera dimensions must be positive".into()));
        }
        if !(self.horizontal_fov_deg > 0.0 && self.horizontal_fov_deg < 180.0) {
            return Err(Error::Config(format!(
                "camera horizontal_fov_deg must be in (0, 180), got {}",
                self.horizontal_fov_deg
            )));
        }
        Ok(())
    }

    /// Focal length in pixels.
    pub fn focal_px(&self) -> f64 {
        (self.width as f64 / 2.0) / libm::tan(self.horizontal_fov_deg.to_radians() / 2.0)
    }

    /// Camera axes in tool coordinates: image right is tool -x, image down is tool -y.
    fn camera_to_tool() -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vec3::new(-1.0, -1.0, 1.0))
    }

    /// World-frame pose of the camera centre for a given tool pose.
    pub fn center(&self, tool: &ToolPose) -> P3 {
        let m = self.mount_offset;
        tool.to_world(&P3::new(m[0], m[1], m[2]))
    }

    /// Ray through the centre of pixel `(col, row)`.
    pub fn pixel_ray(&self, tool: &ToolPose, col: usize, row: usize) -> Ray {
        let f = self.focal_px();
        let d_cam = Vec3::new(
            (col as f64 + 0.5 - self.width as f64 / 2.0) / f,
            (row as f64 + 0.5 - self.height as f64 / 2.0) / f,
            1.0,
        );
        let d_tool = Self::camera_to_tool() * d_cam;
        let dir = (tool.rotation() * d_tool).normalize();
        Ray {
            origin: self.center(tool),
            dir,
        }
    }

    /// Pinhole projection of a world point to continuous pixel coordinates.
    pub fn project(&self, tool: &ToolPose, p: &P3) -> Option<(f64, f64)> {
        let local = tool.to_tool(p) - P3::from(self.mount_offset).coords;
        let cam = Self::camera_to_tool().transpose() * local.coords;
        if cam.z <= 0.0 {
            return None;
        }
        let f = self.focal_px();
        Some((
            cam.x / cam.z * f + self.width as f64 / 2.0,
            cam.y / cam.z * f + self.height as f64 / 2.0,
        ))
    }
}

/// Three 8-bit planes: class hue, tree mask, shading value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentedImage {
    pub width: usize,
    pub height: usize,
    pub h: Vec<u8>,
    pub s: Vec<u8>,
    pub v: Vec<u8>,
}

impl SegmentedImage {
    pub fn filled(width: usize, height: usize, class: SceneClass, value: u8) -> Self {
        let n = width * height;
        let s = if class == SceneClass::Tree { TREE_MASK } else { 0 };
        SegmentedImage {
            width,
            height,
            h: vec![class.hue(); n],
            s: vec![s; n],
            v: vec![value; n],
        }
    }

    pub fn pixel(&self, col: usize, row: usize) -> (u8, u8, u8) {
        let i = row * self.width + col;
        (self.h[i], self.s[i], self.v[i])
    }

    fn set(&mut self, i: usize, class: SceneClass, value: u8) {
        self.h[i] = class.hue();
        self.s[i] = if class == SceneClass::Tree { TREE_MASK } else { 0 };
        self.v[i] = value;
    }

    /// Class-partition and mask-consistency check over all pixels.
    pub fn is_consistent(&self) -> bool {
        self.h
            .iter()
            .zip(&self.s)
            .all(|(&h, &s)| CLASS_CODES.contains(&h) && ((s == TREE_MASK) == (h == HUE_TREE)) && (s == 0 || s == TREE_MASK))
    }

    /// Interleaved HSV bytes, row-major.
    pub fn interleaved(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.h.len() * 3);
        for i in 0..self.h.len() {
            out.extend_from_slice(&[self.h[i], self.s[i], self.v[i]]);
        }
        out
    }

    /// Channel-last floats in `[0, 1]`, the network input layout.
    pub fn to_normalized<T: From<f32>>(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.h.len() * 3);
        for i in 0..self.h.len() {
            for c in [self.h[i], self.s[i], self.v[i]] {
                out.push(T::from(c as f32 / 255.0));
            }
        }
        out
    }
}

/// Light direction (towards the light), world frame.
fn light_dir() -> Vec3 {
    Vec3::new(-0.3, 0.8, -0.5).normalize()
}

fn shade(normal: &Vec3) -> u8 {
    let lambert = normal.dot(&light_dir()).max(0.0);
    let v = 255.0 * (0.2 + 0.8 * lambert);
    v.floor().clamp(0.0, 255.0) as u8
}

/// Scene primitives gathered for one render, with culling boxes.
struct RenderList<'a> {
    scene: &'a SceneGraph,
    cutter: Vec<ConvexSolid>,
    spindle_boxes: Vec<crate::geometry::Aabb>,
    chain_boxes: Vec<Vec<crate::geometry::Aabb>>,
}

impl<'a> RenderList<'a> {
    fn new(scene: &'a SceneGraph, tool: &ToolPose, cam: &CameraModel) -> Self {
        let cutter = if cam.draw_cutter {
            scene
                .cutter
                .solids
                .iter()
                .map(|p| ConvexSolid::extruded_yz(p, scene.cutter.blade_half_thickness_x, tool))
                .collect()
        } else {
            Vec::new()
        };
        let spindle_boxes = scene.spindles.iter().map(|s| s.aabb()).collect();
        let chain_boxes = scene
            .spindles
            .iter()
            .map(|s| {
                std::iter::once(s.leader.aabb())
                    .chain(s.side_branches.iter().map(|b| b.aabb()))
                    .collect()
            })
            .collect();
        RenderList {
            scene,
            cutter,
            spindle_boxes,
            chain_boxes,
        }
    }

    fn trace(&self, ray: &Ray) -> (SceneClass, u8) {
        let mut best_t = f64::INFINITY;
        let mut best: Option<(SceneClass, Vec3)> = None;
        let mut consider = |class: SceneClass, hit: Option<crate::geometry::Hit>| {
            if let Some(h) = hit {
                if h.t < best_t {
                    best_t = h.t;
                    best = Some((class, h.normal));
                }
            }
        };
        for solid in &self.cutter {
            consider(SceneClass::Cutter, solid.intersect(ray));
        }
        for (si, s) in self.scene.spindles.iter().enumerate() {
            if !self.spindle_boxes[si].hit_by(ray) {
                continue;
            }
            let chains = std::iter::once(&s.leader).chain(s.side_branches.iter());
            for (ci, chain) in chains.enumerate() {
                if !self.chain_boxes[si][ci].hit_by(ray) {
                    continue;
                }
                for cap in &chain.segments {
                    consider(SceneClass::Tree, cap.intersect(ray));
                }
            }
        }
        for w in &self.scene.wires {
            consider(SceneClass::Wire, w.intersect(ray));
        }
        for b in &self.scene.frame_boxes {
            consider(SceneClass::Frame, b.intersect(ray));
        }
        match best {
            Some((class, n)) => (class, shade(&n)),
            None => (SceneClass::Background, BACKGROUND_VALUE),
        }
    }
}

/// Full-resolution segmented render.
pub fn render_segmented(scene: &SceneGraph, tool: &ToolPose, cam: &CameraModel) -> SegmentedImage {
    let list = RenderList::new(scene, tool, cam);
    let mut img = SegmentedImage::filled(cam.width, cam.height, SceneClass::Background, BACKGROUND_VALUE);
    for row in 0..cam.height {
        for col in 0..cam.width {
            let (class, v) = list.trace(&cam.pixel_ray(tool, col, row));
            img.set(row * cam.width + col, class, v);
        }
    }
    img
}

/// Source coordinate sampled for output index `o` of the 4/9 nearest-neighbour rescale.
pub fn rescale_source(o: usize) -> usize {
    9 * (2 * o + 1) / 8
}

/// Output index that an input pixel of the full image lands in after crop and rescale.
pub fn crop_rescale_index(col: usize, row: usize) -> Option<(usize, usize)> {
    if col < CROP_LEFT || row < CROP_TOP || col >= FULL_WIDTH || row >= FULL_HEIGHT {
        return None;
    }
    Some(((col - CROP_LEFT) * 4 / 9, (row - CROP_TOP) * 4 / 9))
}

/// Crop the bottom-right 360×180 window and rescale it to 160×80.
pub fn crop_rescale(img: &SegmentedImage) -> Result<SegmentedImage> {
    if img.width != FULL_WIDTH || img.height != FULL_HEIGHT {
        return Err(Error::Dimension {
            expected: format!("{FULL_WIDTH}x{FULL_HEIGHT}"),
            got: format!("{}x{}", img.width, img.height),
        });
    }
    let mut out = SegmentedImage::filled(OBS_WIDTH, OBS_HEIGHT, SceneClass::Background, 0);
    for oy in 0..OBS_HEIGHT {
        let sy = CROP_TOP + rescale_source(oy);
        for ox in 0..OBS_WIDTH {
            let sx = CROP_LEFT + rescale_source(ox);
            let si = sy * img.width + sx;
            let oi = oy * OBS_WIDTH + ox;
            out.h[oi] = img.h[si];
            out.s[oi] = img.s[si];
            out.v[oi] = img.v[si];
        }
    }
    Ok(out)
}

/// Keep every `factor`-th pixel in each axis.
pub fn downsample(img: &SegmentedImage, factor: usize) -> SegmentedImage {
    let factor = factor.max(1);
    let (w, h) = (img.width / factor, img.height / factor);
    let mut out = SegmentedImage::filled(w, h, SceneClass::Background, 0);
    for y in 0..h {
        for x in 0..w {
            let si = (y * factor) * img.width + x * factor;
            let oi = y * w + x;
            out.h[oi] = img.h[si];
            out.s[oi] = img.s[si];
            out.v[oi] = img.v[si];
        }
    }
    out
}

/// Render only the pixels the observation pipeline keeps. Bit-identical to
/// `downsample(crop_rescale(render_segmented(..)), factor)` at the default
/// camera resolution, at a fraction of the cost.
pub fn render_observation(
    scene: &SceneGraph,
    tool: &ToolPose,
    cam: &CameraModel,
    factor: usize,
) -> Result<SegmentedImage> {
    if cam.width != FULL_WIDTH || cam.height != FULL_HEIGHT {
        return Err(Error::Dimension {
            expected: format!("{FULL_WIDTH}x{FULL_HEIGHT}"),
            got: format!("{}x{}", cam.width, cam.height),
        });
    }
    let factor = factor.max(1);
    let (w, h) = (OBS_WIDTH / factor, OBS_HEIGHT / factor);
    let list = RenderList::new(scene, tool, cam);
    let mut out = SegmentedImage::filled(w, h, SceneClass::Background, BACKGROUND_VALUE);
    for y in 0..h {
        let row = CROP_TOP + rescale_source(y * factor);
        for x in 0..w {
            let col = CROP_LEFT + rescale_source(x * factor);
            let (class, v) = list.trace(&cam.pixel_ray(tool, col, row));
            out.set(y * w + x, class, v);
        }
    }
    Ok(out)
}

pub fn ppm_bytes(img: &SegmentedImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.interleaved());
    out
}

/// Write a binary portable pixmap with the H, S, V planes as the three channels.
pub fn export_ppm(img: &SegmentedImage, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&ppm_bytes(img)).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<SegmentedImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |why: &str| Error::io(path, std::io::Error::new(std::io::ErrorKind::InvalidData, why.to_string()));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(bad("not an 8-bit P6 file"));
    }
    let width: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let height: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let payload = &bytes[pos.min(bytes.len())..];
    if payload.len() != width * height * 3 {
        return Err(bad("payload size mismatch"));
    }
    let mut img = SegmentedImage::filled(width, height, SceneClass::Background, 0);
    for i in 0..width * height {
        img.h[i] = payload[3 * i];
        img.s[i] = payload[3 * i + 1];
        img.v[i] = payload[3 * i + 2];
    }
    Ok(img)
}

/// Dataset layout for dumped frames: `frames/ep{N}/step{M}.ppm`.
pub fn frame_path(root: &Path, episode: usize, step: usize) -> PathBuf {
    root.join("frames").join(format!("ep{episode}")).join(format!("step{step}.ppm"))
}
