//! Seeded synthetic multi-view scenes: labeled 3D point clusters with
//! class-specific geometry, a forward-facing camera trajectory, rendered
//! per-frame feature/label maps, and the grouping of points into
//! fixed-size observation tensors.
//!
//! The generator lays objects out so that no two objects ever overlap on any
//! image plane (verified and repaired at generation time). With zero pose
//! noise and zero label corruption the center pixel of every projected point
//! then carries that point's own class exactly, which pins the whole
//! projection / bag-of-frames / patch-extraction chain in tests.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::attention::HiFANetConfig;
use crate::geometry::{
    extract_patch, filter_void_points, perturb_pose, project_point, round_half_up,
    select_bag_of_frames, CameraIntrinsics, Mat3, Pose, Raster, Vec3,
};
use crate::rng::Rng;

/// Gaussian pose-noise magnitudes for the camera extrinsics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseNoise {
    pub sigma_rot_deg: f64,
    pub sigma_trans_m: f64,
}

impl PoseNoise {
    pub const NONE: PoseNoise = PoseNoise { sigma_rot_deg: 0.0, sigma_trans_m: 0.0 };

    pub fn new(sigma_rot_deg: f64, sigma_trans_m: f64) -> Self {
        PoseNoise { sigma_rot_deg, sigma_trans_m }
    }
}

/// Scene-generation parameters. World axes: x forward along the camera
/// trajectory, y lateral, z up; cameras look along +x.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneConfig {
    pub class_count: usize,
    pub points_per_class: usize,
    /// Depth span (meters) of the band the objects occupy.
    pub world_extent: f64,
    pub camera_count: usize,
    pub camera_spacing: f64,
    /// Feature width of the rendered maps.
    pub feature_dim: usize,
    /// Std of the Gaussian noise added to every pixel feature.
    pub feature_noise_sigma: f64,
    /// Probability that a pixel's label flips to a random wrong class.
    pub label_corruption_rate: f64,
    /// Calibration noise applied (once per camera) when observations are built.
    pub pose_noise: PoseNoise,
    pub seed: u64,
    pub image_width: usize,
    pub image_height: usize,
    pub focal_px: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            class_count: 13,
            points_per_class: 385,
            world_extent: 14.0,
            camera_count: 8,
            camera_spacing: 0.5,
            feature_dim: 32,
            feature_noise_sigma: 0.8,
            label_corruption_rate: 0.15,
            pose_noise: PoseNoise::new(0.5, 0.05),
            seed: 1,
            image_width: 288,
            image_height: 96,
            focal_px: 230.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), DatagenError> {
        let ok = self.class_count >= 2
            && self.points_per_class > 0
            && self.world_extent > 0.0
            && self.camera_count > 0
            && self.camera_spacing > 0.0
            && self.feature_dim > 0
            && self.feature_noise_sigma >= 0.0
            && (0.0..=1.0).contains(&self.label_corruption_rate)
            && self.pose_noise.sigma_rot_deg >= 0.0
            && self.pose_noise.sigma_trans_m >= 0.0
            && self.image_width > 0
            && self.image_height > 0
            && self.focal_px > 0.0;
        if ok {
            Ok(())
        } else {
            Err(DatagenError::ConfigInvalid("scene config out of range".into()))
        }
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics::new(
            self.focal_px,
            self.focal_px,
            self.image_width as f64 / 2.0,
            self.image_height as f64 / 2.0,
            self.image_width,
            self.image_height,
        )
        .expect("scene config validated before use")
    }
}

/// A generated world: labeled points, camera trajectory, rendered maps.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneDataset {
    pub points: Vec<Vec3>,
    pub labels: Vec<u16>,
    pub camera_poses: Vec<Pose>,
    pub intrinsics: CameraIntrinsics,
    /// Per-frame H x W x d feature maps.
    pub feature_maps: Vec<Raster<f32>>,
    /// Per-frame H x W label maps (possibly corrupted).
    pub label_maps: Vec<Raster<u16>>,
    pub class_count: usize,
    pub seed: u64,
}

/// One group of `m` points with `n` patch observations each; the unit the
/// network consumes.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationTensor {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub d: usize,
    /// `[m, n, k, k, d]` patch features, row-major.
    pub features: Vec<f32>,
    /// `[m, n, k, k]` per-pixel 2D predicted labels.
    pub patch_labels: Vec<u16>,
    /// `[m, 3]` world coordinates.
    pub coords: Vec<[f64; 3]>,
    /// `[m]` ground-truth labels.
    pub labels: Vec<u16>,
    /// `[m, n]` source frame of each observation.
    pub frame_ids: Vec<u32>,
}

impl ObservationTensor {
    /// All patch pixels as a `[m*n*k*k, d]` f64 matrix.
    pub fn feature_matrix(&self) -> (usize, usize, Vec<f64>) {
        let rows = self.m * self.n * self.k * self.k;
        let data = self.features.iter().map(|&v| v as f64).collect();
        (rows, self.d, data)
    }

    /// Principal-pixel features only, as a `[m*n, d]` f64 matrix.
    pub fn principal_matrix(&self) -> (usize, usize, Vec<f64>) {
        let k2 = self.k * self.k;
        let pidx = (self.k / 2) * self.k + self.k / 2;
        let mut data = Vec::with_capacity(self.m * self.n * self.d);
        for seq in 0..self.m * self.n {
            let base = (seq * k2 + pidx) * self.d;
            data.extend(self.features[base..base + self.d].iter().map(|&v| v as f64));
        }
        (self.m * self.n, self.d, data)
    }

    pub fn coords(&self) -> &[[f64; 3]] {
        &self.coords
    }

    /// Copy with the frame axis reordered by `perm` (a permutation of 0..n),
    /// applied to every point.
    pub fn permuted_frames(&self, perm: &[usize]) -> ObservationTensor {
        assert_eq!(perm.len(), self.n);
        let k2 = self.k * self.k;
        let mut out = self.clone();
        for p in 0..self.m {
            for (dst, &src) in perm.iter().enumerate() {
                let src_base = (p * self.n + src) * k2;
                let dst_base = (p * self.n + dst) * k2;
                out.features[dst_base * self.d..(dst_base + k2) * self.d]
                    .copy_from_slice(&self.features[src_base * self.d..(src_base + k2) * self.d]);
                out.patch_labels[dst_base..dst_base + k2]
                    .copy_from_slice(&self.patch_labels[src_base..src_base + k2]);
                out.frame_ids[p * self.n + dst] = self.frame_ids[p * self.n + src];
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DatagenError {
    ConfigInvalid(String),
    /// The layout repair loop could not separate all object footprints.
    LayoutFailed,
}

impl core::fmt::Display for DatagenError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            DatagenError::ConfigInvalid(msg) => write!(f, "invalid scene config: {msg}"),
            DatagenError::LayoutFailed => write!(f, "could not lay out non-overlapping objects"),
        }
    }
}

const CAMERA_HEIGHT: f64 = 1.6;
/// Grid pitch (pixels) of the feature-noise field. Noise is drawn on a
/// coarse grid and interpolated, giving it a correlation length of about a
/// patch, the texture a downsampled 2D backbone produces; the marginal
/// distribution at every pixel stays exactly N(0, sigma).
const NOISE_GRID_PX: usize = 6;
/// Target angular half-width of an object as seen from the trajectory middle.
const OBJECT_HALF_ANGLE_TAN: f64 = 0.009;
/// Nearest object depth beyond the last camera.
const DEPTH_MIN: f64 = 22.0;
/// World-space splat radius used when rendering points.
const SPLAT_WORLD: f64 = 0.18;
const SPLAT_MAX_PX: i64 = 3;
/// Image-plane padding (pixels) applied around object footprints when
/// checking for overlap; covers splat spill and rounding.
const FOOTPRINT_PAD_PX: f64 = 1.5;
/// Fraction of the half image width usable for object slots.
const FOV_MARGIN: f64 = 0.85;

/// Camera at `center` looking along world +x, z up.
fn forward_camera(center: Vec3) -> Pose {
    let rotation = Mat3::from_rows([0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]);
    let translation = rotation.mul_vec(center).scale(-1.0);
    Pose { rotation, translation }
}

#[derive(Clone, Copy, Debug)]
struct SceneObject {
    class: u16,
    center: Vec3,
    half: Vec3,
    /// Rotation about z; ground strips align with their view ray so their
    /// depth extent does not smear laterally across the image.
    yaw: f64,
}

impl SceneObject {
    fn local_to_world(&self, local: Vec3) -> Vec3 {
        let (s, c) = (libm::sin(self.yaw), libm::cos(self.yaw));
        Vec3::new(
            self.center.x + c * local.x - s * local.y,
            self.center.y + s * local.x + c * local.y,
            self.center.z + local.z,
        )
    }

    fn corners(&self) -> [Vec3; 8] {
        let h = self.half;
        let mut out = [Vec3::ZERO; 8];
        let mut i = 0;
        for &sx in &[-1.0, 1.0] {
            for &sy in &[-1.0, 1.0] {
                for &sz in &[-1.0, 1.0] {
                    out[i] = self.local_to_world(Vec3::new(sx * h.x, sy * h.y, sz * h.z));
                    i += 1;
                }
            }
        }
        out
    }
}

/// Padded image-plane bounding rectangle of an object, clipped to the
/// visible image (overlap outside the image cannot mislabel a pixel).
/// `None` when the object is behind the camera or fully off-screen.
fn footprint(
    obj: &SceneObject,
    pose: &Pose,
    intr: &CameraIntrinsics,
) -> Option<(f64, f64, f64, f64)> {
    let mut min_u = f64::INFINITY;
    let mut max_u = f64::NEG_INFINITY;
    let mut min_v = f64::INFINITY;
    let mut max_v = f64::NEG_INFINITY;
    for corner in obj.corners() {
        let pix = project_point(corner, pose, intr).ok()?;
        min_u = min_u.min(pix.u);
        max_u = max_u.max(pix.u);
        min_v = min_v.min(pix.v);
        max_v = max_v.max(pix.v);
    }
    let rect = (
        (min_u - FOOTPRINT_PAD_PX).max(0.0),
        (max_u + FOOTPRINT_PAD_PX).min(intr.width as f64 - 1.0),
        (min_v - FOOTPRINT_PAD_PX).max(0.0),
        (max_v + FOOTPRINT_PAD_PX).min(intr.height as f64 - 1.0),
    );
    if rect.0 > rect.1 || rect.2 > rect.3 {
        return None;
    }
    Some(rect)
}

fn rects_overlap(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> bool {
    a.0 <= b.1 && b.0 <= a.1 && a.2 <= b.3 && b.2 <= a.3
}

/// First pair of objects whose padded footprints overlap in any frame.
fn find_collision(
    objects: &[SceneObject],
    poses: &[Pose],
    intr: &CameraIntrinsics,
) -> Option<(usize, usize)> {
    for pose in poses {
        let rects: Vec<Option<(f64, f64, f64, f64)>> =
            objects.iter().map(|o| footprint(o, pose, intr)).collect();
        for i in 0..objects.len() {
            for j in i + 1..objects.len() {
                if let (Some(a), Some(b)) = (rects[i], rects[j]) {
                    if rects_overlap(a, b) {
                        return Some((i, j));
                    }
                }
            }
        }
    }
    None
}

/// Class prototype features: seeded random unit vectors, shared across all
/// scenes with the same (class_count, feature_dim) so separately generated
/// scenes look like the output of one 2D backbone.
pub fn class_prototypes(class_count: usize, feature_dim: usize) -> Vec<Vec<f64>> {
    let mut rng = Rng::new(0x70726f746f ^ ((class_count as u64) << 32) ^ feature_dim as u64);
    (0..class_count)
        .map(|_| {
            let mut v: Vec<f64> = (0..feature_dim).map(|_| rng.normal(1.0)).collect();
            let norm = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>()).max(1e-12);
            for x in v.iter_mut() {
                *x /= norm;
            }
            v
        })
        .collect()
}

/// Object half-extents by geometry family (class % 3): ground strips, poles,
/// boxes. Within each family the proportions vary by class, so a class's 3D
/// shape is a stable fingerprint across scenes; lateral sizes scale with
/// depth so image footprints stay comparable. The local x axis points along
/// the view ray.
fn object_half_extents(class: usize, depth: f64) -> Vec3 {
    let w = OBJECT_HALF_ANGLE_TAN * depth;
    // 0, 1, 2, ... within the family.
    let step = (class / 3) as f64;
    match class % 3 {
        0 => Vec3::new(1.0 + 0.5 * step, w * (0.7 + 0.2 * step), 0.02),
        1 => {
            let radius = (w * (0.3 + 0.1 * step)).max(0.05);
            Vec3::new(radius, radius, 0.8 + 0.45 * step)
        }
        _ => Vec3::new(w * (0.7 + 0.15 * step), w * (1.3 - 0.15 * step), w * (0.8 + 0.4 * step)),
    }
}

/// Generates a full synthetic scene. Deterministic per `cfg.seed`; different
/// seeds produce different label layouts.
pub fn generate_scene(cfg: &SceneConfig) -> Result<SceneDataset, DatagenError> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed);
    let intr = cfg.intrinsics();

    let camera_poses: Vec<Pose> = (0..cfg.camera_count)
        .map(|i| forward_camera(Vec3::new(i as f64 * cfg.camera_spacing, 0.0, CAMERA_HEIGHT)))
        .collect();
    let trajectory_end = (cfg.camera_count - 1) as f64 * cfg.camera_spacing;
    let mid_x = trajectory_end / 2.0;

    // Angular slots, measured from the trajectory middle. An object at
    // image offset u (pixels) drifts by roughly ±u * delta across the
    // trajectory, so successive slots follow a geometric recurrence that
    // keeps the swept intervals (plus object widths and splat padding)
    // disjoint. The slot list is shuffled so the class layout changes
    // with the seed.
    let half_span = trajectory_end / 2.0;
    let drift = half_span / (DEPTH_MIN + half_span);
    let usable_px = FOV_MARGIN * cfg.image_width as f64 / 2.0;
    let margin_px = 2.8 * OBJECT_HALF_ANGLE_TAN * cfg.focal_px + 2.0 * FOOTPRINT_PAD_PX + 1.0;
    let c = cfg.class_count;
    let mut slots: Vec<f64> = Vec::with_capacity(c);
    slots.push(0.0);
    let mut offset_px = 0.0;
    while slots.len() < c {
        offset_px = ((1.0 + drift) * offset_px + margin_px) / (1.0 - drift);
        if offset_px > usable_px {
            return Err(DatagenError::ConfigInvalid(format!(
                "cannot fit {c} classes into a {} px wide image; fewer classes, a wider \
                 image or a shorter trajectory needed",
                cfg.image_width
            )));
        }
        slots.push(offset_px / cfg.focal_px);
        if slots.len() < c {
            slots.push(-offset_px / cfg.focal_px);
        }
    }
    rng.shuffle(&mut slots);

    let mut objects: Vec<SceneObject> = Vec::with_capacity(c);
    for (class, &slot) in slots.iter().enumerate() {
        let depth = rng.uniform(DEPTH_MIN, DEPTH_MIN + cfg.world_extent);
        let x = trajectory_end + depth;
        let y = slot * (x - mid_x);
        let dist_mid = libm::sqrt((x - mid_x) * (x - mid_x) + y * y);
        let half = object_half_extents(class, dist_mid);
        let center = Vec3::new(x, y, half.z);
        let yaw = libm::atan2(y, x - mid_x);
        objects.push(SceneObject { class: class as u16, center, half, yaw });
    }

    // Repair pass: push the farther member of any colliding pair deeper
    // (along its ray from the trajectory middle) until all image footprints
    // are disjoint in every frame.
    let mut iterations = 0;
    while let Some((i, j)) = find_collision(&objects, &camera_poses, &intr) {
        iterations += 1;
        if iterations > 500 {
            return Err(DatagenError::LayoutFailed);
        }
        let di = objects[i].center.sub(Vec3::new(mid_x, 0.0, 0.0)).norm();
        let dj = objects[j].center.sub(Vec3::new(mid_x, 0.0, 0.0)).norm();
        let far = if di >= dj { i } else { j };
        let obj = &mut objects[far];
        let dist = libm::sqrt(
            (obj.center.x - mid_x) * (obj.center.x - mid_x) + obj.center.y * obj.center.y,
        );
        let scale = (dist + 1.5) / dist;
        obj.center.x = mid_x + (obj.center.x - mid_x) * scale;
        obj.center.y *= scale;
    }

    // Sample labeled points inside each object volume.
    let mut points = Vec::with_capacity(c * cfg.points_per_class);
    let mut labels = Vec::with_capacity(c * cfg.points_per_class);
    for obj in &objects {
        for _ in 0..cfg.points_per_class {
            let local = Vec3::new(
                rng.uniform(-obj.half.x, obj.half.x),
                rng.uniform(-obj.half.y, obj.half.y),
                rng.uniform(-obj.half.z, obj.half.z),
            );
            points.push(obj.local_to_world(local));
            labels.push(obj.class);
        }
    }

    // Render each frame: nearest splat wins the pixel, features are the
    // pixel label's prototype plus Gaussian noise, then the label map is
    // corrupted to simulate 2D segmenter errors (features keep reflecting
    // the true class).
    let prototypes = class_prototypes(c, cfg.feature_dim);
    let (w, h, d) = (cfg.image_width, cfg.image_height, cfg.feature_dim);
    let mut feature_maps = Vec::with_capacity(camera_poses.len());
    let mut label_maps = Vec::with_capacity(camera_poses.len());
    for pose in &camera_poses {
        let mut render_rng = rng.fork();
        let mut zbuf = vec![f64::INFINITY; w * h];
        let mut label_map = Raster::<u16>::filled(h, w, 1, 0);
        for (point, &label) in points.iter().zip(&labels) {
            let Ok(pix) = project_point(*point, pose, &intr) else { continue };
            let cu = round_half_up(pix.u);
            let cv = round_half_up(pix.v);
            if cu < 0 || cu >= w as i64 || cv < 0 || cv >= h as i64 {
                continue;
            }
            let side = (libm::round(cfg.focal_px * SPLAT_WORLD / pix.depth) as i64)
                .clamp(1, SPLAT_MAX_PX);
            let half_lo = side / 2;
            let half_hi = side - half_lo - 1;
            for r in (cv - half_lo).max(0)..=(cv + half_hi).min(h as i64 - 1) {
                for col in (cu - half_lo).max(0)..=(cu + half_hi).min(w as i64 - 1) {
                    let px = r as usize * w + col as usize;
                    if pix.depth < zbuf[px] {
                        zbuf[px] = pix.depth;
                        label_map.data[px] = label;
                    }
                }
            }
        }

        // Smooth per-channel noise field: unit Gaussians on a coarse grid,
        // bilinearly interpolated and renormalized so every pixel's noise is
        // exactly N(0, feature_noise_sigma).
        let gw = w / NOISE_GRID_PX + 2;
        let gh = h / NOISE_GRID_PX + 2;
        let coarse: Vec<f64> = (0..gw * gh * d).map(|_| render_rng.normal(1.0)).collect();
        let mut feature_map = Raster::<f32>::filled(h, w, d, 0.0);
        for row in 0..h {
            let fy = row as f64 / NOISE_GRID_PX as f64;
            let gy = fy as usize;
            let ty = fy - gy as f64;
            for col in 0..w {
                let fx = col as f64 / NOISE_GRID_PX as f64;
                let gx = fx as usize;
                let tx = fx - gx as f64;
                let w00 = (1.0 - tx) * (1.0 - ty);
                let w10 = tx * (1.0 - ty);
                let w01 = (1.0 - tx) * ty;
                let w11 = tx * ty;
                let norm = libm::sqrt(w00 * w00 + w10 * w10 + w01 * w01 + w11 * w11);
                let scale = cfg.feature_noise_sigma / norm;
                let px = row * w + col;
                let proto = &prototypes[label_map.data[px] as usize];
                let c00 = ((gy * gw) + gx) * d;
                let c10 = c00 + d;
                let c01 = c00 + gw * d;
                let c11 = c01 + d;
                let dst = &mut feature_map.data[px * d..(px + 1) * d];
                for (ch, (out, &p)) in dst.iter_mut().zip(proto).enumerate() {
                    let noise = w00 * coarse[c00 + ch]
                        + w10 * coarse[c10 + ch]
                        + w01 * coarse[c01 + ch]
                        + w11 * coarse[c11 + ch];
                    *out = (p + scale * noise) as f32;
                }
            }
        }
        for px in 0..w * h {
            if render_rng.next_f64() < cfg.label_corruption_rate {
                let wrong =
                    (label_map.data[px] as usize + 1 + render_rng.below(c - 1)) % c;
                label_map.data[px] = wrong as u16;
            }
        }
        feature_maps.push(feature_map);
        label_maps.push(label_map);
    }

    Ok(SceneDataset {
        points,
        labels,
        camera_poses,
        intrinsics: intr,
        feature_maps,
        label_maps,
        class_count: c,
        seed: cfg.seed,
    })
}

/// Coverage statistics from observation building.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BuildStats {
    pub total_points: usize,
    pub retained_points: usize,
    pub groups: usize,
}

/// How retained points are chained into groups of `m`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GroupingMode {
    /// Greedy nearest-neighbor chains (spatially close points).
    #[default]
    Spatial,
    /// Generation order, standing in for temporally close scan points.
    Sequential,
}

/// Builds observation tensors from a scene: perturbs each camera's
/// extrinsics once (calibration error model), keeps points with exactly `n`
/// valid observations under the noisy poses, extracts k x k feature and
/// label patches, and chains retained points into groups of `m` spatial
/// nearest neighbors. Deterministic per seed.
pub fn build_observation_tensors(
    scene: &SceneDataset,
    model: &HiFANetConfig,
    noise: &PoseNoise,
    seed: u64,
) -> Result<(Vec<ObservationTensor>, BuildStats), DatagenError> {
    build_observation_tensors_grouped(scene, model, noise, seed, GroupingMode::Spatial)
}

/// [`build_observation_tensors`] with an explicit grouping mode.
pub fn build_observation_tensors_grouped(
    scene: &SceneDataset,
    model: &HiFANetConfig,
    noise: &PoseNoise,
    seed: u64,
    grouping: GroupingMode,
) -> Result<(Vec<ObservationTensor>, BuildStats), DatagenError> {
    if model.d != scene.feature_maps.first().map(|m| m.channels).unwrap_or(model.d) {
        return Err(DatagenError::ConfigInvalid(format!(
            "model feature width {} does not match scene feature maps",
            model.d
        )));
    }
    let mut rng = Rng::new(seed);
    let noisy_poses: Vec<Pose> = scene
        .camera_poses
        .iter()
        .map(|pose| perturb_pose(pose, noise.sigma_rot_deg, noise.sigma_trans_m, rng.next_u64()))
        .collect();

    let retained = filter_void_points(&scene.points, &noisy_poses, &scene.intrinsics, model.n);

    let chains: Vec<Vec<usize>> = match grouping {
        GroupingMode::Sequential => {
            // Chains hold slot indices into `retained`, like the spatial mode.
            (0..retained.len() / model.m)
                .map(|g| (g * model.m..(g + 1) * model.m).collect())
                .collect()
        }
        GroupingMode::Spatial => {
            // Greedy nearest-neighbor chaining into groups of m.
            let mut used = vec![false; retained.len()];
            let mut chains: Vec<Vec<usize>> = Vec::new();
            let mut remaining = retained.len();
            while remaining >= model.m {
                let start = used.iter().position(|&u| !u).unwrap();
                used[start] = true;
                remaining -= 1;
                let mut chain = vec![start];
                let mut cur = start;
                while chain.len() < model.m {
                    let cur_pt = scene.points[retained[cur]];
                    let mut best: Option<(f64, usize)> = None;
                    for (slot, &flag) in used.iter().enumerate() {
                        if flag {
                            continue;
                        }
                        let dist = cur_pt.dist(scene.points[retained[slot]]);
                        if best.map(|(b, _)| dist < b).unwrap_or(true) {
                            best = Some((dist, slot));
                        }
                    }
                    match best {
                        Some((_, slot)) => {
                            used[slot] = true;
                            remaining -= 1;
                            chain.push(slot);
                            cur = slot;
                        }
                        None => break,
                    }
                }
                if chain.len() == model.m {
                    chains.push(chain);
                }
            }
            chains
        }
    };

    let k2 = model.k * model.k;
    let mut tensors = Vec::with_capacity(chains.len());
    for chain in &chains {
        let mut obs = ObservationTensor {
            m: model.m,
            n: model.n,
            k: model.k,
            d: model.d,
            features: Vec::with_capacity(model.m * model.n * k2 * model.d),
            patch_labels: Vec::with_capacity(model.m * model.n * k2),
            coords: Vec::with_capacity(model.m),
            labels: Vec::with_capacity(model.m),
            frame_ids: Vec::with_capacity(model.m * model.n),
        };
        for &slot in chain {
            let point_idx = retained[slot];
            let point = scene.points[point_idx];
            obs.coords.push([point.x, point.y, point.z]);
            obs.labels.push(scene.labels[point_idx]);
            let bag = select_bag_of_frames(point, &noisy_poses, &scene.intrinsics, model.n);
            debug_assert_eq!(bag.len(), model.n, "retained points have full bags");
            for &frame in &bag {
                let pix = project_point(point, &noisy_poses[frame], &scene.intrinsics)
                    .expect("selected frames project successfully");
                let feat = extract_patch(&scene.feature_maps[frame], &pix, model.k)
                    .expect("selected frames land inside the image");
                let labels = extract_patch(&scene.label_maps[frame], &pix, model.k)
                    .expect("selected frames land inside the image");
                obs.features.extend_from_slice(&feat);
                obs.patch_labels.extend_from_slice(&labels);
                obs.frame_ids.push(frame as u32);
            }
        }
        tensors.push(obs);
    }

    let stats = BuildStats {
        total_points: scene.points.len(),
        retained_points: retained.len(),
        groups: tensors.len(),
    };
    Ok((tensors, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines;

    fn small_cfg() -> SceneConfig {
        SceneConfig {
            class_count: 5,
            points_per_class: 60,
            world_extent: 10.0,
            camera_count: 6,
            camera_spacing: 0.5,
            feature_dim: 8,
            feature_noise_sigma: 0.0,
            label_corruption_rate: 0.0,
            pose_noise: PoseNoise::NONE,
            seed: 1,
            image_width: 192,
            image_height: 96,
            focal_px: 170.0,
        }
    }

    fn small_model() -> HiFANetConfig {
        let mut cfg = HiFANetConfig::tiny(4, 3, 3, 8, 2, 5);
        cfg.n = 3;
        cfg
    }

    #[test]
    fn generation_is_deterministic_and_seed_sensitive() {
        let cfg = small_cfg();
        let a = generate_scene(&cfg).unwrap();
        let b = generate_scene(&cfg).unwrap();
        assert_eq!(a, b);

        let mut other = cfg;
        other.seed = 2;
        let c = generate_scene(&other).unwrap();
        assert_ne!(a.label_maps, c.label_maps, "different seeds must change the layout");
    }

    #[test]
    fn noise_free_pixels_equal_their_prototype() {
        let cfg = small_cfg();
        let scene = generate_scene(&cfg).unwrap();
        let protos = class_prototypes(cfg.class_count, cfg.feature_dim);
        for (fmap, lmap) in scene.feature_maps.iter().zip(&scene.label_maps) {
            for px in 0..cfg.image_width * cfg.image_height {
                let label = lmap.data[px] as usize;
                let feat = &fmap.data[px * cfg.feature_dim..(px + 1) * cfg.feature_dim];
                for (f, p) in feat.iter().zip(&protos[label]) {
                    assert_eq!(*f, *p as f32);
                }
            }
        }
    }

    #[test]
    fn full_corruption_flips_every_pixel_with_two_classes() {
        let mut cfg = small_cfg();
        cfg.class_count = 2;
        cfg.label_corruption_rate = 1.0;
        let corrupted = generate_scene(&cfg).unwrap();
        cfg.label_corruption_rate = 0.0;
        let clean = generate_scene(&cfg).unwrap();
        for (a, b) in corrupted.label_maps.iter().zip(&clean.label_maps) {
            for (&x, &y) in a.data.iter().zip(&b.data) {
                assert_eq!(x, 1 - y);
            }
        }
    }

    #[test]
    fn corruption_rate_matches_monte_carlo_count() {
        let mut cfg = small_cfg();
        cfg.label_corruption_rate = 0.1;
        let corrupted = generate_scene(&cfg).unwrap();
        cfg.label_corruption_rate = 0.0;
        let clean = generate_scene(&cfg).unwrap();
        let mut differing = 0usize;
        let mut total = 0usize;
        for (a, b) in corrupted.label_maps.iter().zip(&clean.label_maps) {
            for (&x, &y) in a.data.iter().zip(&b.data) {
                total += 1;
                if x != y {
                    differing += 1;
                }
            }
        }
        assert!(total >= 100_000, "need at least 1e5 pixels, got {total}");
        let rate = differing as f64 / total as f64;
        assert!((rate - 0.1).abs() < 0.01, "measured corruption rate {rate}");
    }

    #[test]
    fn object_footprints_never_overlap() {
        for seed in 1..=5 {
            let cfg = SceneConfig {
                seed,
                points_per_class: 10,
                feature_dim: 4,
                feature_noise_sigma: 0.0,
                label_corruption_rate: 0.0,
                ..SceneConfig::default()
            };
            let scene = generate_scene(&cfg).unwrap();
            // Rendered pixels of different classes must never be adjacent
            // within the splat padding; a cheap proxy: with zero corruption,
            // every projected point's center pixel carries its own label.
            let intr = scene.intrinsics;
            for (point, &label) in scene.points.iter().zip(&scene.labels) {
                for (pose, lmap) in scene.camera_poses.iter().zip(&scene.label_maps) {
                    if let Ok(pix) = project_point(*point, pose, &intr) {
                        let cu = round_half_up(pix.u);
                        let cv = round_half_up(pix.v);
                        if cu >= 0
                            && (cu as usize) < intr.width
                            && cv >= 0
                            && (cv as usize) < intr.height
                        {
                            let got = lmap.pixel(cv as usize, cu as usize)[0];
                            assert_eq!(got, label, "seed {seed}: center pixel mislabeled");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn oversized_bag_empties_the_dataset() {
        let cfg = small_cfg();
        let scene = generate_scene(&cfg).unwrap();
        let mut model = small_model();
        model.n = cfg.camera_count + 1;
        let (tensors, stats) =
            build_observation_tensors(&scene, &model, &PoseNoise::NONE, 3).unwrap();
        assert!(tensors.is_empty());
        assert_eq!(stats.retained_points, 0);
    }

    #[test]
    fn coverage_matches_bruteforce_visibility() {
        let cfg = small_cfg();
        let scene = generate_scene(&cfg).unwrap();
        let model = small_model();
        let (_, stats) = build_observation_tensors(&scene, &model, &PoseNoise::NONE, 3).unwrap();

        let mut visible = 0usize;
        for p in &scene.points {
            let bags = select_bag_of_frames(*p, &scene.camera_poses, &scene.intrinsics, model.n);
            if bags.len() == model.n {
                visible += 1;
            }
        }
        assert_eq!(stats.retained_points, visible);
        assert_eq!(stats.groups, visible / model.m);
    }

    #[test]
    fn observation_dimensions_are_consistent() {
        let cfg = small_cfg();
        let scene = generate_scene(&cfg).unwrap();
        let model = small_model();
        let (tensors, stats) =
            build_observation_tensors(&scene, &model, &cfg.pose_noise, 3).unwrap();
        assert!(stats.groups > 0, "scene must produce at least one group");
        for t in &tensors {
            assert_eq!(t.features.len(), model.m * model.n * model.k * model.k * model.d);
            assert_eq!(t.patch_labels.len(), model.m * model.n * model.k * model.k);
            assert_eq!(t.coords.len(), model.m);
            assert_eq!(t.labels.len(), model.m);
            assert_eq!(t.frame_ids.len(), model.m * model.n);
            assert!(t.labels.iter().all(|&l| (l as usize) < cfg.class_count));
        }
    }

    #[test]
    fn zero_noise_majority_vote_is_exact() {
        // Pins the projection -> bag-of-frames -> patch chain end to end.
        let cfg = small_cfg();
        let scene = generate_scene(&cfg).unwrap();
        let model = small_model();
        let (tensors, stats) =
            build_observation_tensors(&scene, &model, &PoseNoise::NONE, 7).unwrap();
        assert!(stats.groups >= 10);
        let mut correct = 0usize;
        let mut total = 0usize;
        for obs in &tensors {
            let votes = baselines::majority_vote(obs, 1, model.n);
            for (&pred, &truth) in votes.iter().zip(&obs.labels) {
                total += 1;
                if pred == truth {
                    correct += 1;
                }
            }
        }
        assert_eq!(correct, total, "majority vote must be exact on a noise-free scene");
    }

    #[test]
    fn pose_noise_never_helps_majority_vote() {
        // Monotone trend of mean accuracy across noise levels, five seeds.
        let levels = [PoseNoise::NONE, PoseNoise::new(0.5, 0.05), PoseNoise::new(2.0, 0.2)];
        let mut means = [0.0f64; 3];
        for seed in 1..=5u64 {
            let mut cfg = small_cfg();
            cfg.seed = seed;
            let scene = generate_scene(&cfg).unwrap();
            let model = small_model();
            for (slot, noise) in levels.iter().enumerate() {
                let (tensors, _) =
                    build_observation_tensors(&scene, &model, noise, seed * 31).unwrap();
                let mut correct = 0usize;
                let mut total = 0usize;
                for obs in &tensors {
                    let votes = baselines::majority_vote(obs, 1, model.n);
                    for (&pred, &truth) in votes.iter().zip(&obs.labels) {
                        total += 1;
                        if pred == truth {
                            correct += 1;
                        }
                    }
                }
                means[slot] += correct as f64 / total.max(1) as f64 / 5.0;
            }
        }
        assert!(means[0] >= means[1] && means[1] >= means[2], "means {means:?}");
    }

    #[test]
    fn sequential_grouping_follows_generation_order() {
        let cfg = small_cfg();
        let scene = generate_scene(&cfg).unwrap();
        let model = small_model();
        let (tensors, _) = build_observation_tensors_grouped(
            &scene,
            &model,
            &PoseNoise::NONE,
            3,
            GroupingMode::Sequential,
        )
        .unwrap();
        // Generation order clusters points by object, so sequential groups
        // are single-class except at object boundaries.
        let single = tensors
            .iter()
            .filter(|t| t.labels.iter().all(|&l| l == t.labels[0]))
            .count();
        assert!(single * 2 > tensors.len());
        // Coordinates within a group follow ascending retained order: the
        // first group's points are the first retained points.
        let retained =
            filter_void_points(&scene.points, &scene.camera_poses, &scene.intrinsics, model.n);
        for (i, &ridx) in retained.iter().take(model.m).enumerate() {
            let p = scene.points[ridx];
            assert_eq!(tensors[0].coords[i], [p.x, p.y, p.z]);
        }
    }

    #[test]
    fn grouping_chains_are_spatially_tight() {
        let cfg = small_cfg();
        let scene = generate_scene(&cfg).unwrap();
        let model = small_model();
        let (tensors, _) = build_observation_tensors(&scene, &model, &PoseNoise::NONE, 3).unwrap();
        // Chained groups should be dominated by a single class: the objects
        // are far apart relative to intra-object distances.
        let mut single_class = 0usize;
        for t in &tensors {
            let first = t.labels[0];
            if t.labels.iter().all(|&l| l == first) {
                single_class += 1;
            }
        }
        assert!(
            single_class * 2 > tensors.len(),
            "{single_class} of {} groups single-class",
            tensors.len()
        );
    }
}
