//! Synthetic two-view scenes with exact ground truth.
//!
//! A scene is a textured room (or open ground when the background is left
//! invalid) populated with boxes. Both views are ray cast against the same
//! primitives, which yields depth, pointmaps and co-visible pixel pairs.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{axis_angle, pointmap_from_depth, Intrinsics, Pointmap, Pose};

/// Relative tolerance of the mutual depth test used to accept a pixel pair.
pub const COVISIBILITY_REL_TOL: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Overlap {
    High,
    Low,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub patch_size: usize,
    /// Focal length in pixels; `None` means `0.9 · width`.
    pub focal: Option<f64>,
    /// Camera baseline range in scene units.
    pub baseline: (f64, f64),
    pub overlap: Overlap,
    /// Number of boxes placed in the room.
    pub primitives: usize,
    /// Drop walls and ceiling so rays that miss the ground and boxes are invalid.
    pub background_invalid: bool,
    /// Minimum fraction of valid second-view pixels that must be co-visible for
    /// the high-overlap regime.
    pub min_covisible_fraction: f64,
    pub max_retries: usize,
    /// Place both cameras at the same pose.
    pub zero_baseline: bool,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            patch_size: 8,
            focal: None,
            baseline: (0.2, 0.8),
            overlap: Overlap::High,
            primitives: 4,
            background_invalid: false,
            min_covisible_fraction: 0.3,
            max_retries: 16,
            zero_baseline: false,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.patch_size == 0 {
            return Err(Error::Config("image and patch sizes must be positive".into()));
        }
        if !self.height.is_multiple_of(self.patch_size) || !self.width.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "patch size {} does not divide {}x{}",
                self.patch_size, self.height, self.width
            )));
        }
        if !(self.baseline.0 >= 0.0 && self.baseline.1 >= self.baseline.0) {
            return Err(Error::Config("baseline range must satisfy 0 <= min <= max".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch_size, self.width / self.patch_size)
    }

    pub fn intrinsics(&self) -> Result<Intrinsics> {
        Intrinsics::centered(self.focal.unwrap_or(0.9 * self.width as f64), self.width, self.height)
    }
}

/// Integer pixel pair `((u2, v2), (u1, v1))`: a second-view pixel and the first-view pixel
/// observing the same surface point.
pub type PixelPair = ((usize, usize), (usize, usize));

#[derive(Debug, Clone, PartialEq)]
pub struct ScenePair {
    /// Two `H × W × 3` color images in `[0, 1]`.
    pub images: [Array3<f32>; 2],
    pub depths: [Array2<f64>; 2],
    pub intrinsics: [Intrinsics; 2],
    /// Maps view-2 camera coordinates into view-1 camera coordinates.
    pub relative_pose: Pose,
    /// Both expressed in the view-1 frame.
    pub gt_pointmaps: [Pointmap; 2],
    pub pixel_correspondences: Vec<PixelPair>,
    pub seed: u64,
    pub config: SceneConfig,
}

impl ScenePair {
    pub fn id(&self) -> String {
        pair_id(self.seed)
    }

    pub fn height(&self) -> usize {
        self.config.height
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    pub fn grid(&self) -> (usize, usize) {
        self.config.grid()
    }

    /// Patch-level correspondences from second-view patches to first-view patches.
    pub fn patch_correspondences(&self) -> Result<PatchCorrespondences> {
        patchify_correspondences(&self.pixel_correspondences, self.config.patch_size, (self.height(), self.width()))
    }

    /// Patch-level correspondences from first-view patches to second-view patches.
    pub fn reverse_patch_correspondences(&self) -> Result<PatchCorrespondences> {
        let swapped: Vec<PixelPair> = self.pixel_correspondences.iter().map(|&(a, b)| (b, a)).collect();
        patchify_correspondences(&swapped, self.config.patch_size, (self.height(), self.width()))
    }

    pub fn valid(&self, view: usize) -> &Array2<bool> {
        &self.gt_pointmaps[view].valid
    }
}

/// Canonical identifier of the pair generated from `seed`.
pub fn pair_id(seed: u64) -> String {
    format!("pair{seed:06}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchMatch {
    /// First-view patch index (row-major).
    pub first: usize,
    /// Number of pixel correspondences that voted for `first`.
    pub support: usize,
}

/// Second-view patch index → first-view patch match.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchCorrespondences {
    pub patch_size: usize,
    /// `(rows, cols)` of the patch grid.
    pub grid: (usize, usize),
    pub pairs: BTreeMap<usize, PatchMatch>,
}

impl PatchCorrespondences {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn get(&self, second: usize) -> Option<usize> {
        self.pairs.get(&second).map(|m| m.first)
    }

    /// Pixel coordinates of the center of a patch.
    pub fn patch_center(&self, index: usize) -> (f64, f64) {
        patch_center(index, self.grid.1, self.patch_size)
    }
}

pub fn patch_center(index: usize, cols: usize, patch_size: usize) -> (f64, f64) {
    let (r, c) = (index / cols, index % cols);
    ((c as f64 + 0.5) * patch_size as f64, (r as f64 + 0.5) * patch_size as f64)
}

/// Downsample pixel correspondences to patch level by majority vote.
///
/// Each second-view patch is matched to the first-view patch that receives the most of
/// its pixel correspondences; ties go to the lowest flattened index.
pub fn patchify_correspondences(
    pc: &[PixelPair],
    patch_size: usize,
    (height, width): (usize, usize),
) -> Result<PatchCorrespondences> {
    if patch_size == 0 || height % patch_size != 0 || width % patch_size != 0 {
        return Err(Error::InvalidInput(format!("patch size {patch_size} does not divide {height}x{width}")));
    }
    let grid = (height / patch_size, width / patch_size);
    let index = |(u, v): (usize, usize)| (v / patch_size) * grid.1 + u / patch_size;
    let mut votes: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
    for &(p2, p1) in pc {
        if p2.0 >= width || p2.1 >= height || p1.0 >= width || p1.1 >= height {
            return Err(Error::InvalidInput(format!("pixel pair {p2:?} -> {p1:?} outside {width}x{height}")));
        }
        *votes.entry(index(p2)).or_default().entry(index(p1)).or_default() += 1;
    }
    let pairs = votes
        .into_iter()
        .map(|(second, counts)| {
            // BTreeMap iterates ascending, so strict `>` keeps the lowest index on ties.
            let mut best = PatchMatch { first: usize::MAX, support: 0 };
            for (first, n) in counts {
                if n > best.support {
                    best = PatchMatch { first, support: n };
                }
            }
            (second, best)
        })
        .collect();
    Ok(PatchCorrespondences { patch_size, grid, pairs })
}

// ---------------------------------------------------------------------------
// Scene primitives
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct Material {
    base: [f32; 3],
    alt: [f32; 3],
    tile: f64,
}

#[derive(Debug, Clone)]
struct OrientedBox {
    center: Vector3<f64>,
    half: Vector3<f64>,
    /// Local-to-world rotation.
    rot: Matrix3<f64>,
    material: Material,
}

#[derive(Debug, Clone)]
struct Room {
    min: Vector3<f64>,
    max: Vector3<f64>,
    /// Only the floor (`y = max.y`) exists when the background is invalid.
    floor_only: bool,
    materials: [Material; 6],
}

#[derive(Debug, Clone)]
struct Scene {
    room: Room,
    boxes: Vec<OrientedBox>,
}

struct Hit {
    t: f64,
    color: [f32; 3],
}

fn slab(origin: &Vector3<f64>, dir: &Vector3<f64>, min: &Vector3<f64>, max: &Vector3<f64>) -> Option<(f64, f64, usize, usize)> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let (mut near_axis, mut far_axis) = (0, 0);
    for a in 0..3 {
        if dir[a].abs() < 1e-15 {
            if origin[a] < min[a] || origin[a] > max[a] {
                return None;
            }
            continue;
        }
        let t0 = (min[a] - origin[a]) / dir[a];
        let t1 = (max[a] - origin[a]) / dir[a];
        let (lo, hi) = if t0 < t1 { (t0, t1) } else { (t1, t0) };
        if lo > t_near {
            t_near = lo;
            near_axis = a;
        }
        if hi < t_far {
            t_far = hi;
            far_axis = a;
        }
    }
    (t_near <= t_far).then_some((t_near, t_far, near_axis, far_axis))
}

fn shade(material: &Material, a: f64, b: f64, face: usize) -> [f32; 3] {
    let checker = ((a / material.tile).floor() + (b / material.tile).floor()) as i64 & 1 == 1;
    let ripple = 0.5 + 0.5 * ((a * 3.1 + face as f64).sin() * (b * 2.3).cos());
    let c = if checker { material.alt } else { material.base };
    let k = 0.75 + 0.25 * ripple as f32;
    [c[0] * k, c[1] * k, c[2] * k]
}

fn face_coords(p: &Vector3<f64>, axis: usize) -> (f64, f64) {
    match axis {
        0 => (p.y, p.z),
        1 => (p.x, p.z),
        _ => (p.x, p.y),
    }
}

impl Scene {
    fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        let eps = 1e-9;
        for b in &self.boxes {
            let o = b.rot.transpose() * (origin - b.center);
            let d = b.rot.transpose() * dir;
            if let Some((t0, _, axis, _)) = slab(&o, &d, &(-b.half), &b.half) {
                if t0 > eps && best.as_ref().is_none_or(|h| t0 < h.t) {
                    let local = o + d * t0;
                    let (u, v) = face_coords(&local, axis);
                    best = Some(Hit { t: t0, color: shade(&b.material, u, v, axis) });
                }
            }
        }
        let room = &self.room;
        if room.floor_only {
            if dir.y > 1e-12 {
                let t = (room.max.y - origin.y) / dir.y;
                if t > eps && best.as_ref().is_none_or(|h| t < h.t) {
                    let p = origin + dir * t;
                    best = Some(Hit { t, color: shade(&room.materials[3], p.x, p.z, 1) });
                }
            }
        } else if let Some((_, t1, _, axis)) = slab(origin, dir, &room.min, &room.max) {
            if t1 > eps && best.as_ref().is_none_or(|h| t1 < h.t) {
                let p = origin + dir * t1;
                let side = usize::from(dir[axis] > 0.0);
                let (u, v) = face_coords(&p, axis);
                best = Some(Hit { t: t1, color: shade(&room.materials[axis * 2 + side], u, v, axis) });
            }
        }
        best
    }
}

fn random_material(rng: &mut ChaCha8Rng) -> Material {
    let mut color = || [rng.random_range(0.1..0.95f32), rng.random_range(0.1..0.95f32), rng.random_range(0.1..0.95f32)];
    let base = color();
    let alt = color();
    Material { base, alt, tile: rng.random_range(0.25..0.9) }
}

fn random_scene(rng: &mut ChaCha8Rng, cfg: &SceneConfig) -> Scene {
    // World frame: x right, y down, z forward. The floor is at y = +1.5.
    let half_w = rng.random_range(3.0..4.5);
    let depth = rng.random_range(7.0..10.0);
    let room = Room {
        min: Vector3::new(-half_w, -2.0, -1.0),
        max: Vector3::new(half_w, 1.5, depth),
        floor_only: cfg.background_invalid,
        materials: std::array::from_fn(|_| random_material(rng)),
    };
    let boxes = (0..cfg.primitives)
        .map(|_| {
            let half = Vector3::new(rng.random_range(0.2..0.8), rng.random_range(0.2..0.9), rng.random_range(0.2..0.8));
            let center = Vector3::new(
                rng.random_range(-half_w + 0.8..half_w - 0.8),
                1.5 - half.y,
                rng.random_range(2.5..depth - 1.0),
            );
            OrientedBox {
                center,
                half,
                rot: axis_angle(Vector3::y(), rng.random_range(0.0..std::f64::consts::PI)),
                material: random_material(rng),
            }
        })
        .collect();
    Scene { room, boxes }
}

/// Camera-to-world rotation looking from `eye` toward `target` (camera y axis points down).
fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>) -> Matrix3<f64> {
    let z = (target - eye).normalize();
    let down = Vector3::y();
    let x = down.cross(&z).normalize();
    let y = z.cross(&x);
    Matrix3::from_columns(&[x, y, z])
}

struct Rendered {
    image: Array3<f32>,
    depth: Array2<f64>,
    valid: Array2<bool>,
}

fn render(scene: &Scene, cam_to_world: &Pose, intr: &Intrinsics) -> Rendered {
    let (h, w) = (intr.height, intr.width);
    let mut image = Array3::zeros((h, w, 3));
    let mut depth = Array2::zeros((h, w));
    let mut valid = Array2::from_elem((h, w), false);
    for v in 0..h {
        for u in 0..w {
            let ray_cam = intr.ray(u as f64 + 0.5, v as f64 + 0.5);
            let dir = cam_to_world.rotation * ray_cam;
            if let Some(hit) = scene.intersect(&cam_to_world.translation, &dir) {
                // The camera ray has unit z, so the ray parameter equals depth.
                depth[[v, u]] = hit.t as f32 as f64;
                valid[[v, u]] = true;
                for k in 0..3 {
                    image[[v, u, k]] = hit.color[k];
                }
            }
        }
    }
    Rendered { image, depth, valid }
}

fn round_to_f32(pm: &mut Pointmap) {
    pm.points.mapv_inplace(|x| x as f32 as f64);
}

/// Co-visible pixel pairs by forward projection plus a mutual depth test.
pub fn covisible_pixels(
    gt: &[Pointmap; 2],
    depths: &[Array2<f64>; 2],
    intrinsics: &[Intrinsics; 2],
    relative_pose: &Pose,
) -> Vec<PixelPair> {
    let to_cam2 = relative_pose.inverse();
    let lookup = |x: f64, y: f64, intr: &Intrinsics| -> Option<(usize, usize)> {
        (x >= 0.0 && y >= 0.0 && x < intr.width as f64 && y < intr.height as f64).then_some((x as usize, y as usize))
    };
    let agrees = |d: f64, z: f64| (d - z).abs() <= COVISIBILITY_REL_TOL * z;
    let mut out = Vec::new();
    for ((v2, u2), &ok) in gt[1].valid.indexed_iter() {
        if !ok {
            continue;
        }
        let x = gt[1].point(v2, u2);
        if x.z <= 0.0 {
            continue;
        }
        let (px, py) = intrinsics[0].project(&x);
        let Some((u1, v1)) = lookup(px, py, &intrinsics[0]) else { continue };
        if !gt[0].valid[[v1, u1]] || !agrees(depths[0][[v1, u1]], x.z) {
            continue;
        }
        let y = to_cam2.apply(&gt[0].point(v1, u1));
        if y.z <= 0.0 {
            continue;
        }
        let (qx, qy) = intrinsics[1].project(&y);
        let Some((qu, qv)) = lookup(qx, qy, &intrinsics[1]) else { continue };
        if gt[1].valid[[qv, qu]] && agrees(depths[1][[qv, qu]], y.z) {
            out.push(((u2, v2), (u1, v1)));
        }
    }
    out
}

/// Generate a deterministic synthetic scene pair.
pub fn generate_scene_pair(seed: u64, cfg: &SceneConfig) -> Result<ScenePair> {
    cfg.validate()?;
    let intr = cfg.intrinsics()?;
    for attempt in 0..=cfg.max_retries {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ attempt as u64);
        let scene = random_scene(&mut rng, cfg);

        let eye1 = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-0.6..0.3), rng.random_range(-0.5..0.5));
        let target = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(0.3..1.2), rng.random_range(4.5..7.0));
        let cam1 = Pose { rotation: look_at(&eye1, &target), translation: eye1 };

        let cam2 = if cfg.zero_baseline {
            cam1
        } else {
            let (lo, hi) = cfg.baseline;
            let scale = match cfg.overlap {
                Overlap::High => 1.0,
                Overlap::Low => 3.0,
            };
            let b = rng.random_range(lo..=hi) * scale;
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let offset = cam1.rotation * Vector3::new(theta.cos(), 0.3 * theta.sin(), 0.2 * rng.random_range(-1.0..1.0));
            let eye2 = eye1 + offset.normalize() * b;
            let target2 = match cfg.overlap {
                Overlap::High => target + Vector3::new(rng.random_range(-0.2..0.2), 0.0, rng.random_range(-0.2..0.2)),
                Overlap::Low => {
                    let yaw = rng.random_range(0.45..0.8) * if rng.random::<bool>() { 1.0 } else { -1.0 };
                    eye2 + axis_angle(Vector3::y(), yaw) * (target - eye1)
                }
            };
            Pose { rotation: look_at(&eye2, &target2), translation: eye2 }
        };

        let r1 = render(&scene, &cam1, &intr);
        let r2 = render(&scene, &cam2, &intr);
        let relative_pose = cam1.inverse().compose(&cam2);

        let mut gt1 = pointmap_from_depth(&r1.depth, &r1.valid, &intr, &Pose::identity())?;
        let mut gt2 = pointmap_from_depth(&r2.depth, &r2.valid, &intr, &relative_pose)?;
        round_to_f32(&mut gt1);
        round_to_f32(&mut gt2);
        let gt = [gt1, gt2];
        let depths = [r1.depth, r2.depth];
        let intrinsics = [intr, intr];
        let pixel_correspondences = covisible_pixels(&gt, &depths, &intrinsics, &relative_pose);

        let valid2 = gt[1].valid_count();
        let enough = match cfg.overlap {
            Overlap::High => {
                !pixel_correspondences.is_empty()
                    && pixel_correspondences.len() as f64 >= cfg.min_covisible_fraction * valid2 as f64
            }
            Overlap::Low => true,
        };
        if valid2 == 0 || gt[0].valid_count() == 0 || !enough {
            continue;
        }
        return Ok(ScenePair {
            images: [r1.image, r2.image],
            depths,
            intrinsics,
            relative_pose,
            gt_pointmaps: gt,
            pixel_correspondences,
            seed,
            config: cfg.clone(),
        });
    }
    Err(Error::Generation(format!(
        "seed {seed}: no acceptable co-visibility after {} attempts",
        cfg.max_retries + 1
    )))
}

/// Generate `count` pairs with seeds `first_seed, first_seed + 1, …`.
pub fn generate_dataset(first_seed: u64, count: usize, cfg: &SceneConfig) -> Result<Vec<ScenePair>> {
    (0..count as u64).map(|i| generate_scene_pair(first_seed + i, cfg)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SceneConfig {
        SceneConfig { height: 32, width: 32, patch_size: 8, ..Default::default() }
    }

    #[test]
    fn deterministic() {
        let a = generate_scene_pair(11, &small()).unwrap();
        let b = generate_scene_pair(11, &small()).unwrap();
        assert_eq!(a, b);
        let c = generate_scene_pair(12, &small()).unwrap();
        assert_ne!(a.images[0], c.images[0]);
    }

    #[test]
    fn zero_baseline_maps_every_pixel_to_itself() {
        let cfg = SceneConfig { zero_baseline: true, ..small() };
        let pair = generate_scene_pair(3, &cfg).unwrap();
        let valid = pair.gt_pointmaps[1].valid_count();
        assert_eq!(pair.pixel_correspondences.len(), valid);
        for &(p2, p1) in &pair.pixel_correspondences {
            assert_eq!(p2, p1);
            let d = pair.gt_pointmaps[1].point(p2.1, p2.0) - pair.gt_pointmaps[0].point(p1.1, p1.0);
            assert!(d.norm() <= 1e-3);
        }
    }

    #[test]
    fn pointmaps_consistent_with_depth() {
        let pair = generate_scene_pair(5, &small()).unwrap();
        let poses = [Pose::identity(), pair.relative_pose];
        for v in 0..2 {
            let re = pointmap_from_depth(&pair.depths[v], pair.valid(v), &pair.intrinsics[v], &poses[v]).unwrap();
            let diff = (&re.points - &pair.gt_pointmaps[v].points).mapv(f64::abs);
            assert!(diff.iter().all(|&d| d <= 1e-5));
        }
        pair.relative_pose.validate().unwrap();
    }

    #[test]
    fn background_invalid_produces_invalid_pixels() {
        let cfg = SceneConfig { background_invalid: true, primitives: 1, ..small() };
        let pair = generate_scene_pair(2, &cfg).unwrap();
        let total = cfg.height * cfg.width;
        assert!(pair.gt_pointmaps[0].valid_count() < total);
        for &((u, v), _) in &pair.pixel_correspondences {
            assert!(pair.valid(1)[[v, u]]);
        }
    }

    #[test]
    fn retries_exhaust_to_error() {
        let cfg = SceneConfig { min_covisible_fraction: 1.01, max_retries: 2, ..small() };
        assert!(matches!(generate_scene_pair(1, &cfg), Err(Error::Generation(_))));
    }

    #[test]
    fn patchify_unanimous_vote() {
        // Patch 0 of a 4x4 image with 2-pixel patches maps wholesale into patch 3.
        let pc: Vec<PixelPair> =
            [(0, 0), (1, 0), (0, 1), (1, 1)].iter().map(|&(u, v)| ((u, v), (u + 2, v + 2))).collect();
        let out = patchify_correspondences(&pc, 2, (4, 4)).unwrap();
        assert_eq!(out.pairs[&0], PatchMatch { first: 3, support: 4 });
        assert_eq!(out.len(), 1);
    }

    #[test]
    fn patchify_majority_and_ties() {
        // Patch A (index 0): three pixels into B (index 1), two into C (index 2).
        let b = (2, 0);
        let c = (0, 2);
        let pc = vec![((0, 0), b), ((1, 0), b), ((0, 1), b), ((1, 1), c), ((1, 1), c)];
        let out = patchify_correspondences(&pc, 2, (4, 4)).unwrap();
        assert_eq!(out.get(0), Some(1));
        assert_eq!(out.pairs[&0].support, 3);

        let tie = vec![((0, 0), (0, 2)), ((1, 0), (2, 0))];
        let out = patchify_correspondences(&tie, 2, (4, 4)).unwrap();
        assert_eq!(out.get(0), Some(1));
    }

    #[test]
    fn patchify_empty_and_bad_size() {
        assert!(patchify_correspondences(&[], 2, (4, 4)).unwrap().is_empty());
        assert!(patchify_correspondences(&[], 3, (4, 4)).is_err());
    }

    #[test]
    fn grid_of_224px_images_at_16px_patches() {
        let pc = vec![((0, 0), (0, 0))];
        let out = patchify_correspondences(&pc, 16, (224, 224)).unwrap();
        assert_eq!(out.grid, (14, 14));
    }
}
