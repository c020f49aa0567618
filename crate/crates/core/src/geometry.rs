//! SE(3) rigid transforms, timestamped transform chains, pinhole projection,
//! and z-buffered rasterization of projected points.
//!
//! The LiDAR-to-camera mapping is `[u, v, 1]^T = (1/z) K T [x, y, z, 1]^T`
//! where `T` is built from four timestamped factors:
//! `T = T_{cam <- ego(t_c)} * T_{ego(t_c) <- global} * T_{global <- ego(t_l)} * T_{ego(t_l) <- lidar}`.

use rayon::prelude::*;
use thiserror::Error;

use crate::calib_io::{CalibrationRecord, EgoPoseRecord, PointCloud};

/// Camera-frame depths at or below this are classified `BehindCamera`,
/// keeping the 1/z division away from the singularity.
pub const DEPTH_EPSILON: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("unknown sensor `{0}` in calibration set")]
    UnknownSensor(String),
    #[error("timestamp {query} outside pose log range [{first}, {last}]")]
    TimestampOutOfRange { query: i64, first: i64, last: i64 },
    #[error("pose log is empty")]
    EmptyPoseLog,
}

/// 3-vector of f64 with the handful of operations the pipeline needs.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 {
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scale(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn normalized(self) -> Vec3 {
        let n = self.norm();
        self.scale(1.0 / n)
    }
}

impl std::ops::Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl std::ops::Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl std::ops::Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// Unit quaternion stored w-first.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quaternion { w, x, y, z }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Quaternion::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn from_axis_angle(axis: Vec3, angle_rad: f64) -> Self {
        let half = angle_rad * 0.5;
        let a = axis.normalized().scale(half.sin());
        Quaternion::new(half.cos(), a.x, a.y, a.z).normalized()
    }

    /// Recover the (axis * angle) rotation vector; zero for identity.
    pub fn to_axis_angle(self) -> Vec3 {
        let q = if self.w < 0.0 { self.neg() } else { self };
        let v = Vec3::new(q.x, q.y, q.z);
        let s = v.norm();
        if s < 1e-12 {
            return Vec3::ZERO;
        }
        let angle = 2.0 * s.atan2(q.w);
        v.scale(angle / s)
    }

    fn neg(self) -> Quaternion {
        Quaternion::new(-self.w, -self.x, -self.y, -self.z)
    }

    pub fn norm(self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalized(self) -> Quaternion {
        let n = self.norm();
        Quaternion::new(self.w / n, self.x / n, self.y / n, self.z / n)
    }

    pub fn conjugate(self) -> Quaternion {
        Quaternion::new(self.w, -self.x, -self.y, -self.z)
    }

    pub fn dot(self, o: Quaternion) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    /// Hamilton product.
    pub fn mul(self, o: Quaternion) -> Quaternion {
        Quaternion::new(
            self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        )
    }

    /// Rotate a vector: q v q*.
    pub fn rotate(self, v: Vec3) -> Vec3 {
        // expanded form: v + 2 u x (u x v + w v), u = (x, y, z)
        let u = Vec3::new(self.x, self.y, self.z);
        let t = u.cross(v).scale(2.0);
        v + t.scale(self.w) + u.cross(t)
    }

    /// Row-major 3x3 rotation matrix.
    pub fn to_matrix(self) -> [[f64; 3]; 3] {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ]
    }

    /// Shepperd's method; assumes a proper rotation matrix.
    pub fn from_matrix(m: &[[f64; 3]; 3]) -> Self {
        let trace = m[0][0] + m[1][1] + m[2][2];
        let q = if trace > 0.0 {
            let s = (trace + 1.0).sqrt() * 2.0;
            Quaternion::new(
                0.25 * s,
                (m[2][1] - m[1][2]) / s,
                (m[0][2] - m[2][0]) / s,
                (m[1][0] - m[0][1]) / s,
            )
        } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
            let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
            Quaternion::new(
                (m[2][1] - m[1][2]) / s,
                0.25 * s,
                (m[0][1] + m[1][0]) / s,
                (m[0][2] + m[2][0]) / s,
            )
        } else if m[1][1] > m[2][2] {
            let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt() * 2.0;
            Quaternion::new(
                (m[0][2] - m[2][0]) / s,
                (m[0][1] + m[1][0]) / s,
                0.25 * s,
                (m[1][2] + m[2][1]) / s,
            )
        } else {
            let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt() * 2.0;
            Quaternion::new(
                (m[1][0] - m[0][1]) / s,
                (m[0][2] + m[2][0]) / s,
                (m[1][2] + m[2][1]) / s,
                0.25 * s,
            )
        };
        q.normalized()
    }

    /// Spherical linear interpolation along the shortest arc; `t` in [0, 1].
    pub fn slerp(self, other: Quaternion, t: f64) -> Quaternion {
        let mut b = other;
        let mut dot = self.dot(other);
        if dot < 0.0 {
            b = b.neg();
            dot = -dot;
        }
        // Nearly parallel: fall back to normalized lerp.
        if dot > 1.0 - 1e-12 {
            return Quaternion::new(
                self.w + (b.w - self.w) * t,
                self.x + (b.x - self.x) * t,
                self.y + (b.y - self.y) * t,
                self.z + (b.z - self.z) * t,
            )
            .normalized();
        }
        let theta = dot.clamp(-1.0, 1.0).acos();
        let sin_theta = theta.sin();
        let wa = ((1.0 - t) * theta).sin() / sin_theta;
        let wb = (t * theta).sin() / sin_theta;
        Quaternion::new(
            wa * self.w + wb * b.w,
            wa * self.x + wb * b.x,
            wa * self.y + wb * b.y,
            wa * self.z + wb * b.z,
        )
        .normalized()
    }
}

/// A member of SE(3): rotation followed by translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Quaternion,
    pub translation: Vec3,
}

impl RigidTransform {
    pub const IDENTITY: RigidTransform = RigidTransform {
        rotation: Quaternion::IDENTITY,
        translation: Vec3::ZERO,
    };

    pub fn new(rotation: Quaternion, translation: Vec3) -> Self {
        RigidTransform {
            rotation: rotation.normalized(),
            translation,
        }
    }

    pub fn from_parts(rotation: [f64; 4], translation: [f64; 3]) -> Self {
        RigidTransform::new(
            Quaternion::from_array(rotation),
            Vec3::from_array(translation),
        )
    }

    pub fn from_translation(translation: Vec3) -> Self {
        RigidTransform {
            rotation: Quaternion::IDENTITY,
            translation,
        }
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        self.rotation.rotate(p) + self.translation
    }

    /// `self.compose(other)` applies `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation.mul(other.rotation).normalized(),
            translation: self.rotation.rotate(other.translation) + self.translation,
        }
    }

    pub fn invert(&self) -> RigidTransform {
        let inv_rot = self.rotation.conjugate();
        RigidTransform {
            rotation: inv_rot,
            translation: -inv_rot.rotate(self.translation),
        }
    }

    /// Row-major 4x4 homogeneous matrix.
    pub fn to_matrix4(&self) -> [[f64; 4]; 4] {
        let r = self.rotation.to_matrix();
        let t = self.translation;
        [
            [r[0][0], r[0][1], r[0][2], t.x],
            [r[1][0], r[1][1], r[1][2], t.y],
            [r[2][0], r[2][1], r[2][2], t.z],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }
}

impl From<&EgoPoseRecord> for RigidTransform {
    fn from(pose: &EgoPoseRecord) -> Self {
        RigidTransform::from_parts(pose.rotation, pose.translation)
    }
}

impl From<&CalibrationRecord> for RigidTransform {
    fn from(rec: &CalibrationRecord) -> Self {
        RigidTransform::from_parts(rec.rotation, rec.translation)
    }
}

/// Pinhole camera parameters with the image size the projection is bounded by.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Self {
        assert!(fx > 0.0 && fy > 0.0, "focal lengths must be positive");
        assert!(width >= 1 && height >= 1, "image size must be at least 1x1");
        CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        }
    }

    /// Build from a calibration record's 3x3 matrix plus an image size.
    pub fn from_matrix(k: &[[f64; 3]; 3], width: u32, height: u32) -> Self {
        CameraIntrinsics::new(k[0][0], k[1][1], k[0][2], k[1][2], width, height)
    }

    pub fn to_matrix(&self) -> [[f64; 3]; 3] {
        [
            [self.fx, 0.0, self.cx],
            [0.0, self.fy, self.cy],
            [0.0, 0.0, 1.0],
        ]
    }

    /// The 3x4 projection matrix `[K | 0]`.
    pub fn to_matrix3x4(&self) -> [[f64; 4]; 3] {
        [
            [self.fx, 0.0, self.cx, 0.0],
            [0.0, self.fy, self.cy, 0.0],
            [0.0, 0.0, 1.0, 0.0],
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectionStatus {
    Valid,
    BehindCamera,
    OutOfBounds,
}

impl std::fmt::Display for ProjectionStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ProjectionStatus::Valid => write!(f, "Valid"),
            ProjectionStatus::BehindCamera => write!(f, "BehindCamera"),
            ProjectionStatus::OutOfBounds => write!(f, "OutOfBounds"),
        }
    }
}

/// A point mapped to continuous pixel coordinates.
///
/// `u`, `v` are NaN for `BehindCamera` points (no meaningful pixel exists);
/// `depth` is the camera-frame z in every case.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedPoint {
    pub source_index: usize,
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    pub status: ProjectionStatus,
}

/// Z-buffered pixel grid; each occupied pixel keeps the nearest point.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: u32,
    pub height: u32,
    pixels: Vec<Option<(usize, f64)>>,
}

impl DepthImage {
    pub fn new(width: u32, height: u32) -> Self {
        DepthImage {
            width,
            height,
            pixels: vec![None; width as usize * height as usize],
        }
    }

    pub fn get(&self, x: u32, y: u32) -> Option<(usize, f64)> {
        self.pixels[y as usize * self.width as usize + x as usize]
    }

    /// Insert with the z-buffer rule: keep the smaller depth, breaking exact
    /// depth ties by the smaller source index.
    pub fn insert(&mut self, x: u32, y: u32, source_index: usize, depth: f64) {
        let slot = &mut self.pixels[y as usize * self.width as usize + x as usize];
        let replace = match slot {
            None => true,
            Some((idx, d)) => depth < *d || (depth == *d && source_index < *idx),
        };
        if replace {
            *slot = Some((source_index, depth));
        }
    }

    /// Merge another depth image by applying the same min-depth rule per pixel,
    /// so partitioned rasterization reproduces the serial result.
    pub fn merge(&mut self, other: &DepthImage) {
        assert_eq!(self.width, other.width);
        assert_eq!(self.height, other.height);
        for (slot, incoming) in self.pixels.iter_mut().zip(&other.pixels) {
            if let Some((idx, d)) = incoming {
                let replace = match slot {
                    None => true,
                    Some((sidx, sd)) => *d < *sd || (*d == *sd && *idx < *sidx),
                };
                if replace {
                    *slot = Some((*idx, *d));
                }
            }
        }
    }

    pub fn occupied(&self) -> impl Iterator<Item = (u32, u32, usize, f64)> + '_ {
        self.pixels.iter().enumerate().filter_map(move |(i, slot)| {
            slot.map(|(idx, d)| {
                let x = (i % self.width as usize) as u32;
                let y = (i / self.width as usize) as u32;
                (x, y, idx, d)
            })
        })
    }
}

/// Interpolate an ego pose at time `t_us`.
///
/// Translation is interpolated linearly and rotation by shortest-arc slerp
/// between the two bracketing records; an exact timestamp match returns that
/// record's transform bit-for-bit.
pub fn interpolate_pose(
    poses: &[EgoPoseRecord],
    t_us: i64,
) -> Result<RigidTransform, GeometryError> {
    let (first, last) = match (poses.first(), poses.last()) {
        (Some(f), Some(l)) => (f.timestamp, l.timestamp),
        _ => return Err(GeometryError::EmptyPoseLog),
    };
    if t_us < first || t_us > last {
        return Err(GeometryError::TimestampOutOfRange {
            query: t_us,
            first,
            last,
        });
    }
    match poses.binary_search_by_key(&t_us, |p| p.timestamp) {
        Ok(i) => Ok(RigidTransform::from(&poses[i])),
        Err(i) => {
            // i is the insertion point; bracketing records are i-1 and i.
            let lo = &poses[i - 1];
            let hi = &poses[i];
            let alpha = (t_us - lo.timestamp) as f64 / (hi.timestamp - lo.timestamp) as f64;
            let t_lo = Vec3::from_array(lo.translation);
            let t_hi = Vec3::from_array(hi.translation);
            let translation = t_lo + (t_hi - t_lo).scale(alpha);
            let rotation = Quaternion::from_array(lo.rotation)
                .slerp(Quaternion::from_array(hi.rotation), alpha);
            Ok(RigidTransform {
                rotation,
                translation,
            })
        }
    }
}

fn find_sensor<'a>(
    calib: &'a [CalibrationRecord],
    name: &str,
) -> Result<&'a CalibrationRecord, GeometryError> {
    calib
        .iter()
        .find(|r| r.sensor_name == name)
        .ok_or_else(|| GeometryError::UnknownSensor(name.to_owned()))
}

/// Build the four-factor LiDAR-to-camera transform for a sweep at `t_l`
/// matched to a camera exposure at `t_c`.
///
/// Calibration records store `ego <- sensor`, so the camera factor is
/// inverted and the LiDAR factor used directly; the middle factors come from
/// interpolated `global <- ego` poses at the two timestamps.
pub fn build_chain(
    calib: &[CalibrationRecord],
    poses: &[EgoPoseRecord],
    t_l: i64,
    t_c: i64,
    camera: &str,
    lidar: &str,
) -> Result<RigidTransform, GeometryError> {
    let cam_rec = find_sensor(calib, camera)?;
    let lidar_rec = find_sensor(calib, lidar)?;
    let cam_from_ego = RigidTransform::from(cam_rec).invert();
    let ego_from_lidar = RigidTransform::from(lidar_rec);
    let ego_tc_from_global = interpolate_pose(poses, t_c)?.invert();
    let global_from_ego_tl = interpolate_pose(poses, t_l)?;
    Ok(cam_from_ego
        .compose(&ego_tc_from_global)
        .compose(&global_from_ego_tl)
        .compose(&ego_from_lidar))
}

fn project_one(
    source_index: usize,
    p: Vec3,
    t: &RigidTransform,
    k: &CameraIntrinsics,
) -> ProjectedPoint {
    let cam = t.apply(p);
    if cam.z <= DEPTH_EPSILON {
        return ProjectedPoint {
            source_index,
            u: f64::NAN,
            v: f64::NAN,
            depth: cam.z,
            status: ProjectionStatus::BehindCamera,
        };
    }
    let u = k.fx * cam.x / cam.z + k.cx;
    let v = k.fy * cam.y / cam.z + k.cy;
    let in_bounds = u >= 0.0 && u < k.width as f64 && v >= 0.0 && v < k.height as f64;
    ProjectedPoint {
        source_index,
        u,
        v,
        depth: cam.z,
        status: if in_bounds {
            ProjectionStatus::Valid
        } else {
            ProjectionStatus::OutOfBounds
        },
    }
}

/// Project every point of a cloud through `T` and `K`, preserving order.
///
/// Runs on the current rayon pool; results are identical for any worker count
/// because outputs are collected in input order.
pub fn project(
    points: &PointCloud,
    t: &RigidTransform,
    k: &CameraIntrinsics,
) -> Vec<ProjectedPoint> {
    points
        .points
        .par_iter()
        .enumerate()
        .map(|(i, p)| project_one(i, Vec3::new(p.x as f64, p.y as f64, p.z as f64), t, k))
        .collect()
}

/// Project raw f64 positions (used for ground-truth pixels, which must go
/// through the same code path as the pipeline projection).
pub fn project_positions(
    positions: &[Vec3],
    t: &RigidTransform,
    k: &CameraIntrinsics,
) -> Vec<ProjectedPoint> {
    positions
        .par_iter()
        .enumerate()
        .map(|(i, p)| project_one(i, *p, t, k))
        .collect()
}

/// Rasterize valid points into a z-buffered depth image.
///
/// Pixel index is `(floor(u), floor(v))`; collisions keep the minimum depth,
/// with exact ties broken by the smaller source index. The fold is a total
/// order minimum per pixel, so any partitioning of the input merges to the
/// same image.
pub fn rasterize(projected: &[ProjectedPoint], width: u32, height: u32) -> DepthImage {
    let mut image = DepthImage::new(width, height);
    for p in projected {
        if p.status != ProjectionStatus::Valid {
            continue;
        }
        let x = p.u.floor() as i64;
        let y = p.v.floor() as i64;
        if x < 0 || y < 0 || x >= width as i64 || y >= height as i64 {
            continue;
        }
        image.insert(x as u32, y as u32, p.source_index, p.depth);
    }
    image
}
