//! Rigid-body poses, pinhole projection under pose noise, bag-of-frames
//! selection and patch extraction from per-frame feature maps.
//!
//! Conventions: a [`Pose`] maps world coordinates into the camera frame
//! (`p_cam = R * p_world + t`), the camera looks along its +z axis, and
//! pixel `u` grows to the right, `v` downward. All operations are pure
//! functions of their inputs plus an explicit seed.

use alloc::vec;
use alloc::vec::Vec;

use crate::rng::Rng;

/// 3-vector of f64, in meters unless stated otherwise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }

    pub fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }

    pub fn scale(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn norm(self) -> f64 {
        libm::sqrt(self.dot(self))
    }

    pub fn dist(self, o: Vec3) -> f64 {
        self.sub(o).norm()
    }
}

/// Row-major 3x3 matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mat3 {
    pub m: [[f64; 3]; 3],
}

impl Mat3 {
    pub fn identity() -> Self {
        Mat3 { m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]] }
    }

    pub fn from_rows(r0: [f64; 3], r1: [f64; 3], r2: [f64; 3]) -> Self {
        Mat3 { m: [r0, r1, r2] }
    }

    pub fn mul_vec(&self, v: Vec3) -> Vec3 {
        Vec3::new(
            self.m[0][0] * v.x + self.m[0][1] * v.y + self.m[0][2] * v.z,
            self.m[1][0] * v.x + self.m[1][1] * v.y + self.m[1][2] * v.z,
            self.m[2][0] * v.x + self.m[2][1] * v.y + self.m[2][2] * v.z,
        )
    }

    pub fn mul_mat(&self, o: &Mat3) -> Mat3 {
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    out[i][j] += self.m[i][k] * o.m[k][j];
                }
            }
        }
        Mat3 { m: out }
    }

    pub fn transpose(&self) -> Mat3 {
        let m = &self.m;
        Mat3::from_rows(
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        )
    }

    pub fn det(&self) -> f64 {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Max-norm of `R^T R - I`; zero for a perfectly orthonormal matrix.
    pub fn orthonormality_residual(&self) -> f64 {
        let gram = self.transpose().mul_mat(self);
        let mut worst = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((gram.m[i][j] - target).abs());
            }
        }
        worst
    }

    pub fn rot_x(a: f64) -> Mat3 {
        let (s, c) = (libm::sin(a), libm::cos(a));
        Mat3::from_rows([1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c])
    }

    pub fn rot_y(a: f64) -> Mat3 {
        let (s, c) = (libm::sin(a), libm::cos(a));
        Mat3::from_rows([c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c])
    }

    pub fn rot_z(a: f64) -> Mat3 {
        let (s, c) = (libm::sin(a), libm::cos(a));
        Mat3::from_rows([c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0])
    }
}

/// Rigid transform from world coordinates into a camera frame.
///
/// Invariants: `rotation` is orthonormal with determinant +1 (checked by
/// [`Pose::new`]; compositions of valid poses preserve this).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

/// Residual tolerance for the rotation-matrix invariants.
pub const ROTATION_TOL: f64 = 1e-9;

impl Pose {
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self, GeometryError> {
        if rotation.orthonormality_residual() >= ROTATION_TOL
            || (rotation.det() - 1.0).abs() >= ROTATION_TOL
        {
            return Err(GeometryError::InvalidRotation);
        }
        Ok(Pose { rotation, translation })
    }

    pub fn identity() -> Self {
        Pose { rotation: Mat3::identity(), translation: Vec3::ZERO }
    }

    /// World point into the camera frame.
    pub fn transform(&self, p: Vec3) -> Vec3 {
        self.rotation.mul_vec(p).add(self.translation)
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose { rotation: rt, translation: rt.mul_vec(self.translation).scale(-1.0) }
    }

    /// Camera center expressed in world coordinates (`-R^T t`).
    pub fn camera_center(&self) -> Vec3 {
        self.rotation.transpose().mul_vec(self.translation).scale(-1.0)
    }
}

/// Pinhole intrinsics. `width`/`height` are the image (or feature-map) size
/// in pixels; projections land in `[0, width) x [0, height)` when visible.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        let ok = fx > 0.0
            && fy > 0.0
            && cx >= 0.0
            && cx < width as f64
            && cy >= 0.0
            && cy < height as f64;
        if !ok {
            return Err(GeometryError::InvalidIntrinsics);
        }
        Ok(CameraIntrinsics { fx, fy, cx, cy, width, height })
    }
}

/// Real-valued projection result. `depth` is camera-frame z and is recorded
/// even when `(u, v)` falls outside the image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelCoord {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum GeometryError {
    /// Camera-frame depth was at or behind the image plane.
    BehindCamera,
    /// Paired inputs had different lengths.
    MismatchedLengths { left: usize, right: usize },
    /// Rounded patch center fell outside the image.
    CenterOutsideImage { u: i64, v: i64 },
    InvalidRotation,
    InvalidIntrinsics,
}

impl core::fmt::Display for GeometryError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            GeometryError::BehindCamera => write!(f, "point is behind the camera"),
            GeometryError::MismatchedLengths { left, right } => {
                write!(f, "mismatched lengths: {left} vs {right}")
            }
            GeometryError::CenterOutsideImage { u, v } => {
                write!(f, "patch center ({u}, {v}) outside the image")
            }
            GeometryError::InvalidRotation => write!(f, "rotation is not orthonormal"),
            GeometryError::InvalidIntrinsics => write!(f, "invalid camera intrinsics"),
        }
    }
}

/// Minimum camera-frame depth treated as "in front of" the camera.
pub const MIN_DEPTH: f64 = 1e-9;

/// Projects a world point through `pose` and `intr` with perspective
/// division by camera-frame depth.
pub fn project_point(
    point: Vec3,
    pose: &Pose,
    intr: &CameraIntrinsics,
) -> Result<PixelCoord, GeometryError> {
    let cam = pose.transform(point);
    if cam.z <= MIN_DEPTH {
        return Err(GeometryError::BehindCamera);
    }
    Ok(PixelCoord {
        u: intr.fx * cam.x / cam.z + intr.cx,
        v: intr.fy * cam.y / cam.z + intr.cy,
        depth: cam.z,
    })
}

/// Round-half-up to the nearest integer pixel index.
pub fn round_half_up(x: f64) -> i64 {
    libm::floor(x + 0.5) as i64
}

/// Draws i.i.d. zero-mean Gaussian noise per Euler angle (std `sigma_rot_deg`
/// degrees, x-y-z order) and per translation axis (std `sigma_trans_m`),
/// composing the noise rotation on the left: `R' = R_noise * R`,
/// `t' = t + dt`. Deterministic for a fixed seed.
pub fn perturb_pose(pose: &Pose, sigma_rot_deg: f64, sigma_trans_m: f64, seed: u64) -> Pose {
    let mut rng = Rng::new(seed);
    let deg = core::f64::consts::PI / 180.0;
    let ax = rng.normal(sigma_rot_deg * deg);
    let ay = rng.normal(sigma_rot_deg * deg);
    let az = rng.normal(sigma_rot_deg * deg);
    let dt = Vec3::new(
        rng.normal(sigma_trans_m),
        rng.normal(sigma_trans_m),
        rng.normal(sigma_trans_m),
    );
    let noise = Mat3::rot_x(ax).mul_mat(&Mat3::rot_y(ay)).mul_mat(&Mat3::rot_z(az));
    Pose {
        rotation: noise.mul_mat(&pose.rotation),
        translation: pose.translation.add(dt),
    }
}

/// One row of a projection-error study.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ErrorStudyRow {
    pub distance_m: f64,
    pub mean_error_px: f64,
    pub p95_error_px: f64,
}

/// Lateral offset of the study's test point, as a fraction of its distance.
/// Keeps the clean projection at the same image location for every distance.
pub const STUDY_LATERAL_RATIO: f64 = 0.1;

/// Monte-Carlo study of pixel displacement induced by pose noise.
///
/// For each distance a test point at `(STUDY_LATERAL_RATIO * z, 0, z)` is
/// projected through the clean identity pose and through `trials` perturbed
/// poses; the reported errors are the mean and the 95th-percentile
/// (nearest-rank) displacement in pixels. Deterministic per seed.
pub fn projection_error_study(
    distances: &[f64],
    sigma_rot_deg: f64,
    sigma_trans_m: f64,
    intr: &CameraIntrinsics,
    trials: usize,
    seed: u64,
) -> Vec<ErrorStudyRow> {
    assert!(trials >= 100, "study needs at least 100 trials");
    let base = Pose::identity();
    let mut rows = Vec::with_capacity(distances.len());
    let mut rng = Rng::new(seed);
    for &z in distances {
        let point = Vec3::new(STUDY_LATERAL_RATIO * z, 0.0, z);
        let clean = project_point(point, &base, intr)
            .expect("study point must be in front of the clean camera");
        let mut errs = Vec::with_capacity(trials);
        for _ in 0..trials {
            let noisy_pose = perturb_pose(&base, sigma_rot_deg, sigma_trans_m, rng.next_u64());
            // A draw that pushes the point behind the camera carries no pixel
            // displacement; skip it. Cannot happen at the sigmas studied here.
            if let Ok(noisy) = project_point(point, &noisy_pose, intr) {
                let du = noisy.u - clean.u;
                let dv = noisy.v - clean.v;
                errs.push(libm::sqrt(du * du + dv * dv));
            }
        }
        let mean = if errs.is_empty() { 0.0 } else { errs.iter().sum::<f64>() / errs.len() as f64 };
        errs.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
        let p95 = if errs.is_empty() {
            0.0
        } else {
            let rank = (libm::ceil(0.95 * errs.len() as f64) as usize).clamp(1, errs.len());
            errs[rank - 1]
        };
        rows.push(ErrorStudyRow { distance_m: z, mean_error_px: mean, p95_error_px: p95 });
    }
    rows
}

/// A point registered into the common world frame, tagged with the frame it
/// came from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegisteredPoint {
    pub position: Vec3,
    pub frame: usize,
}

/// Transforms every per-frame point into the common world frame using the
/// frame-to-world odometry pose of its frame. Point count is preserved.
pub fn register_frames(
    frames: &[Vec<Vec3>],
    odometry: &[Pose],
) -> Result<Vec<RegisteredPoint>, GeometryError> {
    if frames.len() != odometry.len() {
        return Err(GeometryError::MismatchedLengths {
            left: frames.len(),
            right: odometry.len(),
        });
    }
    let total: usize = frames.iter().map(|f| f.len()).sum();
    let mut out = Vec::with_capacity(total);
    for (frame, (points, pose)) in frames.iter().zip(odometry.iter()).enumerate() {
        for &p in points {
            out.push(RegisteredPoint { position: pose.transform(p), frame });
        }
    }
    Ok(out)
}

/// True when the rounded projection lands on a valid pixel of the image.
fn lands_in_image(pix: &PixelCoord, intr: &CameraIntrinsics) -> bool {
    if !pix.u.is_finite() || !pix.v.is_finite() {
        return false;
    }
    let u = round_half_up(pix.u);
    let v = round_half_up(pix.v);
    u >= 0 && (u as usize) < intr.width && v >= 0 && (v as usize) < intr.height
}

/// Returns up to `n` frame indices observing `point`, sorted by camera-center
/// distance ascending (ties by index). Frames where projection fails or the
/// rounded pixel falls outside the image are dropped; an empty result marks
/// a void point.
pub fn select_bag_of_frames(
    point: Vec3,
    camera_poses: &[Pose],
    intr: &CameraIntrinsics,
    n: usize,
) -> Vec<usize> {
    assert!(n >= 1, "bag size must be at least 1");
    let mut candidates: Vec<(f64, usize)> = Vec::new();
    for (idx, pose) in camera_poses.iter().enumerate() {
        if let Ok(pix) = project_point(point, pose, intr) {
            if lands_in_image(&pix, intr) {
                candidates.push((point.dist(pose.camera_center()), idx));
            }
        }
    }
    candidates.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    candidates.into_iter().take(n).map(|(_, idx)| idx).collect()
}

/// Dense H x W raster with `channels` values per pixel, row-major.
/// Used for per-frame feature maps (`f32`) and label maps (`u16`).
#[derive(Clone, Debug, PartialEq)]
pub struct Raster<T> {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<T>,
}

impl<T: Copy + Default> Raster<T> {
    pub fn filled(height: usize, width: usize, channels: usize, value: T) -> Self {
        Raster { height, width, channels, data: vec![value; height * width * channels] }
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> &[T] {
        let base = (row * self.width + col) * self.channels;
        &self.data[base..base + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [T] {
        let base = (row * self.width + col) * self.channels;
        &mut self.data[base..base + self.channels]
    }
}

/// Extracts the k x k patch centered at the rounded projection of `center`.
/// Out-of-bounds cells clamp to the nearest valid pixel; the returned buffer
/// is `k * k * channels`, row-major over (patch row, patch col, channel).
pub fn extract_patch<T: Copy + Default>(
    map: &Raster<T>,
    center: &PixelCoord,
    k: usize,
) -> Result<Vec<T>, GeometryError> {
    assert!(k % 2 == 1, "patch side must be odd");
    assert!(map.width > 0 && map.height > 0, "feature map must be non-empty");
    let cu = round_half_up(center.u);
    let cv = round_half_up(center.v);
    if cu < 0 || cu as usize >= map.width || cv < 0 || cv as usize >= map.height {
        return Err(GeometryError::CenterOutsideImage { u: cu, v: cv });
    }
    let half = (k / 2) as i64;
    let mut out = Vec::with_capacity(k * k * map.channels);
    for dr in -half..=half {
        let row = (cv + dr).clamp(0, map.height as i64 - 1) as usize;
        for dc in -half..=half {
            let col = (cu + dc).clamp(0, map.width as i64 - 1) as usize;
            out.extend_from_slice(map.pixel(row, col));
        }
    }
    Ok(out)
}

/// Indices of points whose bag-of-frames selection yields exactly `n`
/// observations.
pub fn filter_void_points(
    points: &[Vec3],
    camera_poses: &[Pose],
    intr: &CameraIntrinsics,
    n: usize,
) -> Vec<usize> {
    points
        .iter()
        .enumerate()
        .filter(|(_, &p)| select_bag_of_frames(p, camera_poses, intr, n).len() == n)
        .map(|(idx, _)| idx)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::format;

    fn intr_1024x512() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 512.0, 256.0, 1024, 512).unwrap()
    }

    #[test]
    fn optical_axis_maps_to_principal_point() {
        let pix =
            project_point(Vec3::new(0.0, 0.0, 5.0), &Pose::identity(), &intr_1024x512()).unwrap();
        assert_eq!((pix.u, pix.v), (512.0, 256.0));
        assert_eq!(pix.depth, 5.0);
    }

    #[test]
    fn lateral_offset_scales_by_focal_over_depth() {
        let pix =
            project_point(Vec3::new(1.0, 0.0, 5.0), &Pose::identity(), &intr_1024x512()).unwrap();
        assert_eq!((pix.u, pix.v), (612.0, 256.0));
    }

    #[test]
    fn behind_camera_is_rejected() {
        let err = project_point(Vec3::new(0.0, 0.0, -1.0), &Pose::identity(), &intr_1024x512());
        assert_eq!(err, Err(GeometryError::BehindCamera));
    }

    #[test]
    fn projection_scale_consistency_along_ray() {
        // Points along one camera-frame ray share (u, v); depth scales.
        let intr = intr_1024x512();
        let dir = Vec3::new(0.3, -0.2, 1.0);
        let a = project_point(dir.scale(2.0), &Pose::identity(), &intr).unwrap();
        let b = project_point(dir.scale(7.5), &Pose::identity(), &intr).unwrap();
        assert!((a.u - b.u).abs() < 1e-9 && (a.v - b.v).abs() < 1e-9);
        assert!((b.depth / a.depth - 7.5 / 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_sigma_perturbation_is_identity() {
        let pose = Pose::new(Mat3::rot_z(0.3), Vec3::new(1.0, 2.0, 3.0)).unwrap();
        let out = perturb_pose(&pose, 0.0, 0.0, 99);
        assert_eq!(out.translation, pose.translation);
        for i in 0..3 {
            for j in 0..3 {
                assert!((out.rotation.m[i][j] - pose.rotation.m[i][j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn perturbation_preserves_rotation_group() {
        let pose = Pose::new(
            Mat3::rot_x(0.5).mul_mat(&Mat3::rot_y(-0.2)),
            Vec3::new(0.0, 1.0, -2.0),
        )
        .unwrap();
        for seed in 0..64u64 {
            for &(sr, st) in &[(0.1, 0.01), (1.0, 0.1), (5.0, 1.0), (30.0, 10.0)] {
                let p = perturb_pose(&pose, sr, st, seed);
                assert!(
                    p.rotation.orthonormality_residual() < 1e-9,
                    "residual too large at seed {seed} sigma ({sr}, {st})"
                );
                assert!((p.rotation.det() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn perturbation_deterministic_per_seed() {
        let pose = Pose::identity();
        let a = perturb_pose(&pose, 1.0, 0.1, 7);
        let b = perturb_pose(&pose, 1.0, 0.1, 7);
        assert_eq!(a, b);
    }

    // Straight-line re-implementation of the projection/perturbation math,
    // written without the library types, used as the Monte-Carlo oracle.
    mod oracle {
        pub fn euler_xyz(ax: f64, ay: f64, az: f64) -> [[f64; 3]; 3] {
            let (sx, cx) = (libm::sin(ax), libm::cos(ax));
            let (sy, cy) = (libm::sin(ay), libm::cos(ay));
            let (sz, cz) = (libm::sin(az), libm::cos(az));
            let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
            let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
            let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
            mat_mul(&mat_mul(&rx, &ry), &rz)
        }

        pub fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
            let mut out = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    for k in 0..3 {
                        out[i][j] += a[i][k] * b[k][j];
                    }
                }
            }
            out
        }

        /// Pixel coordinates of `p` seen through rotation `r`, translation `t`.
        pub fn project(
            r: &[[f64; 3]; 3],
            t: [f64; 3],
            p: [f64; 3],
            fx: f64,
            fy: f64,
            cx: f64,
            cy: f64,
        ) -> (f64, f64) {
            let x = r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + t[0];
            let y = r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + t[1];
            let z = r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + t[2];
            (fx * x / z + cx, fy * y / z + cy)
        }
    }

    /// Oracle mean displacement for the same seeds the study consumes.
    fn oracle_mean_displacement(
        distance: f64,
        sigma_rot_deg: f64,
        sigma_trans_m: f64,
        trials: usize,
        seed: u64,
    ) -> f64 {
        let deg = core::f64::consts::PI / 180.0;
        let p = [STUDY_LATERAL_RATIO * distance, 0.0, distance];
        let identity = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let (cu, cv) = oracle::project(&identity, [0.0; 3], p, 500.0, 500.0, 512.0, 256.0);
        let mut rng = Rng::new(seed);
        let mut sum = 0.0;
        for _ in 0..trials {
            let mut draw = Rng::new(rng.next_u64());
            let ax = draw.normal(sigma_rot_deg * deg);
            let ay = draw.normal(sigma_rot_deg * deg);
            let az = draw.normal(sigma_rot_deg * deg);
            let t = [
                draw.normal(sigma_trans_m),
                draw.normal(sigma_trans_m),
                draw.normal(sigma_trans_m),
            ];
            let r = oracle::euler_xyz(ax, ay, az);
            let (u, v) = oracle::project(&r, t, p, 500.0, 500.0, 512.0, 256.0);
            sum += libm::sqrt((u - cu) * (u - cu) + (v - cv) * (v - cv));
        }
        sum / trials as f64
    }

    #[test]
    fn perturbed_projection_matches_monte_carlo_oracle() {
        let intr = intr_1024x512();
        let rows = projection_error_study(&[5.0], 1.0, 0.1, &intr, 10_000, 7);
        let oracle_mean = oracle_mean_displacement(5.0, 1.0, 0.1, 10_000, 7);
        let rel = (rows[0].mean_error_px - oracle_mean).abs() / oracle_mean;
        assert!(rel < 0.02, "study {} vs oracle {}", rows[0].mean_error_px, oracle_mean);
    }

    #[test]
    fn study_zero_noise_is_exactly_zero() {
        let rows = projection_error_study(&[5.0, 10.0, 20.0], 0.0, 0.0, &intr_1024x512(), 200, 1);
        for row in rows {
            assert_eq!(row.mean_error_px, 0.0);
            assert_eq!(row.p95_error_px, 0.0);
        }
    }

    #[test]
    fn translation_noise_error_decreases_with_distance() {
        let rows =
            projection_error_study(&[5.0, 10.0, 20.0], 0.0, 0.1, &intr_1024x512(), 2_000, 3);
        assert!(rows[0].mean_error_px > rows[1].mean_error_px);
        assert!(rows[1].mean_error_px > rows[2].mean_error_px);
    }

    #[test]
    fn mixed_noise_study_matches_oracle_at_all_distances() {
        let intr = intr_1024x512();
        let rows = projection_error_study(&[5.0, 10.0, 20.0], 1.0, 0.1, &intr, 5_000, 11);
        let mut rng = Rng::new(11);
        for row in &rows {
            // The study consumes one seed per trial per distance, in order.
            let mut seeds = Vec::with_capacity(5_000);
            for _ in 0..5_000 {
                seeds.push(rng.next_u64());
            }
            let deg = core::f64::consts::PI / 180.0;
            let p = [STUDY_LATERAL_RATIO * row.distance_m, 0.0, row.distance_m];
            let identity = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
            let (cu, cv) = oracle::project(&identity, [0.0; 3], p, 500.0, 500.0, 512.0, 256.0);
            let mut sum = 0.0;
            for &s in &seeds {
                let mut draw = Rng::new(s);
                let ax = draw.normal(deg);
                let ay = draw.normal(deg);
                let az = draw.normal(deg);
                let t = [draw.normal(0.1), draw.normal(0.1), draw.normal(0.1)];
                let r = oracle::euler_xyz(ax, ay, az);
                let (u, v) = oracle::project(&r, t, p, 500.0, 500.0, 512.0, 256.0);
                sum += libm::sqrt((u - cu) * (u - cu) + (v - cv) * (v - cv));
            }
            let oracle_mean = sum / seeds.len() as f64;
            let rel = (row.mean_error_px - oracle_mean).abs() / oracle_mean;
            assert!(rel < 0.02, "distance {}: {} vs {}", row.distance_m, row.mean_error_px, oracle_mean);
        }
    }

    #[test]
    fn register_identity_concatenates() {
        let frames = vec![
            vec![Vec3::new(1.0, 0.0, 0.0), Vec3::new(2.0, 0.0, 0.0)],
            vec![Vec3::new(0.0, 3.0, 0.0)],
        ];
        let odo = vec![Pose::identity(), Pose::identity()];
        let out = register_frames(&frames, &odo).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(out[0].position, frames[0][0]);
        assert_eq!(out[2].position, frames[1][0]);
        assert_eq!(out[2].frame, 1);
    }

    #[test]
    fn register_pure_translation_shifts_points() {
        let t = Vec3::new(-1.0, 2.0, 0.5);
        let frames = vec![vec![Vec3::new(1.0, 1.0, 1.0), Vec3::new(0.0, 0.0, 0.0)]];
        let odo = vec![Pose { rotation: Mat3::identity(), translation: t }];
        let out = register_frames(&frames, &odo).unwrap();
        for (reg, &orig) in out.iter().zip(&frames[0]) {
            assert_eq!(reg.position, orig.add(t));
        }
    }

    #[test]
    fn register_round_trip_recovers_source() {
        let pose = Pose::new(
            Mat3::rot_z(0.7).mul_mat(&Mat3::rot_x(-0.1)),
            Vec3::new(4.0, -2.0, 1.0),
        )
        .unwrap();
        let pts = vec![Vec3::new(1.0, 2.0, 3.0), Vec3::new(-0.5, 0.25, 8.0)];
        let registered = register_frames(&[pts.clone()], &[pose]).unwrap();
        let inv = pose.inverse();
        for (reg, &orig) in registered.iter().zip(&pts) {
            let back = inv.transform(reg.position);
            assert!(back.dist(orig) < 1e-9);
        }
    }

    #[test]
    fn register_length_mismatch_errors() {
        let err = register_frames(&[vec![]], &[]);
        assert_eq!(err, Err(GeometryError::MismatchedLengths { left: 1, right: 0 }));
    }

    /// Camera at `center` looking along +x (world z up).
    fn forward_camera(center: Vec3) -> Pose {
        let rotation = Mat3::from_rows([0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]);
        let translation = rotation.mul_vec(center).scale(-1.0);
        Pose { rotation, translation }
    }

    #[test]
    fn single_camera_bag() {
        let intr = CameraIntrinsics::new(100.0, 100.0, 64.0, 48.0, 128, 96).unwrap();
        let cam = forward_camera(Vec3::ZERO);
        let bag = select_bag_of_frames(Vec3::new(10.0, 0.0, 0.0), &[cam], &intr, 3);
        assert_eq!(bag, vec![0]);
    }

    #[test]
    fn cameras_facing_away_yield_void() {
        let intr = CameraIntrinsics::new(100.0, 100.0, 64.0, 48.0, 128, 96).unwrap();
        // Point sits behind every camera.
        let cams = vec![forward_camera(Vec3::new(5.0, 0.0, 0.0)), forward_camera(Vec3::new(9.0, 0.0, 0.0))];
        let bag = select_bag_of_frames(Vec3::new(1.0, 0.0, 0.0), &cams, &intr, 2);
        assert!(bag.is_empty());
    }

    #[test]
    fn bag_selection_matches_bruteforce() {
        let intr = CameraIntrinsics::new(120.0, 120.0, 80.0, 60.0, 160, 120).unwrap();
        let mut rng = Rng::new(21);
        let mut cams = Vec::new();
        for _ in 0..20 {
            let c = Vec3::new(rng.uniform(-10.0, 10.0), rng.uniform(-10.0, 10.0), rng.uniform(-2.0, 2.0));
            cams.push(forward_camera(c));
        }
        for _ in 0..50 {
            let p = Vec3::new(rng.uniform(-20.0, 30.0), rng.uniform(-15.0, 15.0), rng.uniform(-3.0, 3.0));
            let got = select_bag_of_frames(p, &cams, &intr, 5);

            // Brute force: score all frames, filter, sort, truncate.
            let mut scored: Vec<(f64, usize)> = Vec::new();
            for (i, cam) in cams.iter().enumerate() {
                if let Ok(pix) = project_point(p, cam, &intr) {
                    let u = round_half_up(pix.u);
                    let v = round_half_up(pix.v);
                    if u >= 0 && (u as usize) < intr.width && v >= 0 && (v as usize) < intr.height {
                        scored.push((p.dist(cam.camera_center()), i));
                    }
                }
            }
            scored.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let want: Vec<usize> = scored.into_iter().take(5).map(|(_, i)| i).collect();
            assert_eq!(got, want, "point {p:?}");
        }
    }

    #[test]
    fn single_pixel_patch_reads_the_pixel() {
        let mut map = Raster::<f32>::filled(4, 6, 3, 0.0);
        map.pixel_mut(2, 3).copy_from_slice(&[1.0, 2.0, 3.0]);
        let got = extract_patch(&map, &PixelCoord { u: 3.2, v: 1.8, depth: 1.0 }, 1).unwrap();
        assert_eq!(got, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn corner_patch_matches_naive_clamped_loop() {
        let mut map = Raster::<f32>::filled(5, 7, 2, 0.0);
        let mut rng = Rng::new(5);
        for px in map.data.iter_mut() {
            *px = rng.next_f64() as f32;
        }
        let center = PixelCoord { u: 0.2, v: 4.4, depth: 1.0 };
        let got = extract_patch(&map, &center, 5).unwrap();

        // Naive double loop with manual clamping.
        let (cu, cv) = (0i64, 4i64);
        let mut want = Vec::new();
        for dr in -2i64..=2 {
            for dc in -2i64..=2 {
                let row = (cv + dr).clamp(0, 4) as usize;
                let col = (cu + dc).clamp(0, 6) as usize;
                want.extend_from_slice(map.pixel(row, col));
            }
        }
        assert_eq!(got, want);
    }

    #[test]
    fn constant_map_yields_constant_patch() {
        let map = Raster::<f32>::filled(8, 8, 4, 2.5);
        let got = extract_patch(&map, &PixelCoord { u: 4.0, v: 4.0, depth: 1.0 }, 3).unwrap();
        assert!(got.iter().all(|&x| x == 2.5));
        assert_eq!(got.len(), 3 * 3 * 4);
    }

    #[test]
    fn patch_center_outside_errors() {
        let map = Raster::<f32>::filled(4, 4, 1, 0.0);
        let err = extract_patch(&map, &PixelCoord { u: 3.6, v: 1.0, depth: 1.0 }, 3);
        assert_eq!(err, Err(GeometryError::CenterOutsideImage { u: 4, v: 1 }));
    }

    #[test]
    fn void_filter_keeps_fully_observed_points() {
        let intr = CameraIntrinsics::new(100.0, 100.0, 64.0, 48.0, 128, 96).unwrap();
        let cams: Vec<Pose> =
            (0..4).map(|i| forward_camera(Vec3::new(i as f64, 0.0, 0.0))).collect();
        let points = vec![Vec3::new(20.0, 0.0, 0.0), Vec3::new(20.0, 1.0, 0.5)];
        let kept = filter_void_points(&points, &cams, &intr, 4);
        assert_eq!(kept, vec![0, 1]);
        assert!(filter_void_points(&points, &[], &intr, 1).is_empty());
    }

    #[test]
    fn void_filter_matches_bruteforce_on_mixed_scene() {
        let intr = CameraIntrinsics::new(90.0, 90.0, 64.0, 48.0, 128, 96).unwrap();
        let cams: Vec<Pose> =
            (0..6).map(|i| forward_camera(Vec3::new(i as f64 * 1.5, 0.0, 0.0))).collect();
        let mut rng = Rng::new(17);
        let points: Vec<Vec3> = (0..200)
            .map(|_| {
                Vec3::new(rng.uniform(-5.0, 40.0), rng.uniform(-25.0, 25.0), rng.uniform(-2.0, 6.0))
            })
            .collect();
        let kept = filter_void_points(&points, &cams, &intr, 4);
        for (idx, &p) in points.iter().enumerate() {
            let visible = cams
                .iter()
                .filter(|cam| {
                    project_point(p, cam, &intr)
                        .map(|pix| lands_in_image(&pix, &intr))
                        .unwrap_or(false)
                })
                .count();
            assert_eq!(kept.contains(&idx), visible >= 4, "point {idx}: visible {visible}");
        }
    }

    #[test]
    fn bag_order_independent_of_camera_ordering() {
        let intr = CameraIntrinsics::new(100.0, 100.0, 64.0, 48.0, 128, 96).unwrap();
        let mut rng = Rng::new(31);
        let cams: Vec<Pose> = (0..10)
            .map(|_| forward_camera(Vec3::new(rng.uniform(0.0, 5.0), rng.uniform(-1.0, 1.0), 0.0)))
            .collect();
        let p = Vec3::new(25.0, 2.0, 1.0);
        let bag = select_bag_of_frames(p, &cams, &intr, 4);
        let dist = |i: usize| p.dist(cams[i].camera_center());

        // Reversed camera list selects the same cameras, identified by their
        // distances rather than their indices.
        let reversed: Vec<Pose> = cams.iter().rev().copied().collect();
        let bag_rev = select_bag_of_frames(p, &reversed, &intr, 4);
        let dist_rev = |i: usize| p.dist(reversed[i].camera_center());
        let got: Vec<f64> = bag.iter().map(|&i| dist(i)).collect();
        let want: Vec<f64> = bag_rev.iter().map(|&i| dist_rev(i)).collect();
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{got:?} vs {want:?}");
        }
    }

    #[test]
    fn error_display_is_informative() {
        let msg = format!("{}", GeometryError::CenterOutsideImage { u: -3, v: 9 });
        assert!(msg.contains("-3"));
    }
}
