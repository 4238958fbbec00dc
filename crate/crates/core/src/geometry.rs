//! Coordinate frames and pinhole projection of end-effector traces.
//!
//! Conventions: the camera frame has z pointing forward, x to the right and
//! y downward. Pixel coordinates are continuous with the origin at the
//! top-left of the image, `u` growing rightward and `v` downward. Cell
//! `(i, j)` of a raster has its center at `(u, v) = (i, j)`.

use std::ops::{Add, Mul, Sub};

use thiserror::Error;

/// Depth below which a camera-frame point counts as behind the camera.
pub const MIN_DEPTH: f64 = 1e-9;

const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point at depth {0} is behind the camera")]
    BehindCamera(f64),
    #[error("rotation is not orthonormal with det +1 (max deviation {0:e})")]
    NotOrthonormal(f64),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("trace timesteps must be strictly increasing ({prev} then {next})")]
    NonIncreasingTimestep { prev: u64, next: u64 },
}

/// A point in 3-D space, in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn dot(self, other: Point3) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn cross(self, other: Point3) -> Point3 {
        Point3::new(
            self.y * other.z - self.z * other.y,
            self.z * other.x - self.x * other.z,
            self.x * other.y - self.y * other.x,
        )
    }

    pub fn distance(self, other: Point3) -> f64 {
        (self - other).norm()
    }

    /// Distance measured in the horizontal (x, y) plane only.
    pub fn planar_distance(self, other: Point3) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl Add for Point3 {
    type Output = Point3;
    fn add(self, rhs: Point3) -> Point3 {
        Point3::new(self.x + rhs.x, self.y + rhs.y, self.z + rhs.z)
    }
}

impl Sub for Point3 {
    type Output = Point3;
    fn sub(self, rhs: Point3) -> Point3 {
        Point3::new(self.x - rhs.x, self.y - rhs.y, self.z - rhs.z)
    }
}

impl Mul<f64> for Point3 {
    type Output = Point3;
    fn mul(self, s: f64) -> Point3 {
        Point3::new(self.x * s, self.y * s, self.z * s)
    }
}

/// A proper rigid motion `p ↦ R·p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl RigidTransform {
    /// Builds a transform, rejecting rotations that are not orthonormal with
    /// determinant +1.
    pub fn new(rotation: [[f64; 3]; 3], translation: [f64; 3]) -> Result<Self, GeometryError> {
        if rotation.iter().flatten().chain(translation.iter()).any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite("rigid transform"));
        }
        // ‖RᵀR − I‖∞
        let mut dev: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| rotation[k][i] * rotation[k][j]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                dev = dev.max((dot - expect).abs());
            }
        }
        let det = det3(&rotation);
        dev = dev.max((det - 1.0).abs());
        if dev >= ORTHONORMAL_TOL {
            return Err(GeometryError::NotOrthonormal(dev));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    /// Rotation about the z axis by `angle` radians, then translation.
    pub fn from_rotation_z(angle: f64, translation: [f64; 3]) -> Result<Self, GeometryError> {
        let (s, c) = angle.sin_cos();
        Self::new([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]], translation)
    }

    /// Parses the 12-number row-major `[R | t]` block used in scene files.
    pub fn from_row_major(block: &[f64; 12]) -> Result<Self, GeometryError> {
        let r = |i: usize| [block[4 * i], block[4 * i + 1], block[4 * i + 2]];
        Self::new([r(0), r(1), r(2)], [block[3], block[7], block[11]])
    }

    pub fn to_row_major(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for i in 0..3 {
            out[4 * i..4 * i + 3].copy_from_slice(&self.rotation[i]);
            out[4 * i + 3] = self.translation[i];
        }
        out
    }

    /// World→camera transform for a camera at `eye` looking at `target`.
    /// `up` is the world direction that should appear toward the top of the
    /// image.
    pub fn look_at(eye: Point3, target: Point3, up: Point3) -> Result<Self, GeometryError> {
        let forward = target - eye;
        let z = forward * (1.0 / forward.norm());
        let x_raw = z.cross(up);
        if x_raw.norm() < 1e-12 {
            return Err(GeometryError::InvalidCamera("up is parallel to the view direction".into()));
        }
        let x = x_raw * (1.0 / x_raw.norm());
        let y = z.cross(x);
        let rotation = [x.to_array(), y.to_array(), z.to_array()];
        let t = [-x.dot(eye), -y.dot(eye), -z.dot(eye)];
        Self::new(rotation, t)
    }

    pub fn rotation(&self) -> &[[f64; 3]; 3] {
        &self.rotation
    }

    pub fn translation(&self) -> [f64; 3] {
        self.translation
    }

    pub fn apply(&self, p: Point3) -> Point3 {
        let r = &self.rotation;
        let t = &self.translation;
        Point3::new(
            r[0][0] * p.x + r[0][1] * p.y + r[0][2] * p.z + t[0],
            r[1][0] * p.x + r[1][1] * p.y + r[1][2] * p.z + t[1],
            r[2][0] * p.x + r[2][1] * p.y + r[2][2] * p.z + t[2],
        )
    }

    /// Inverse motion, `q ↦ Rᵀ(q − t)`.
    pub fn inverse(&self) -> RigidTransform {
        let r = &self.rotation;
        let mut rt = [[0.0; 3]; 3];
        for (i, row) in rt.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = r[j][i];
            }
        }
        let t = self.translation;
        let ti = [
            -(rt[0][0] * t[0] + rt[0][1] * t[1] + rt[0][2] * t[2]),
            -(rt[1][0] * t[0] + rt[1][1] * t[1] + rt[1][2] * t[2]),
            -(rt[2][0] * t[0] + rt[2][1] * t[1] + rt[2][2] * t[2]),
        ];
        RigidTransform { rotation: rt, translation: ti }
    }
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Pinhole intrinsics plus the world→camera extrinsics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub world_to_camera: RigidTransform,
    pub width: usize,
    pub height: usize,
}

impl CameraModel {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        world_to_camera: RigidTransform,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidCamera("image dimensions must be positive".into()));
        }
        if !(fx > 0.0 && fy > 0.0) || !fx.is_finite() || !fy.is_finite() {
            return Err(GeometryError::InvalidCamera(format!("focal lengths must be positive, got {fx}, {fy}")));
        }
        if !(0.0..width as f64).contains(&cx) || !(0.0..height as f64).contains(&cy) {
            return Err(GeometryError::InvalidCamera(format!(
                "principal point ({cx}, {cy}) outside {width}x{height}"
            )));
        }
        Ok(Self { fx, fy, cx, cy, world_to_camera, width, height })
    }

    /// World point straight to pixel.
    pub fn project_world(&self, p: Point3) -> Result<Pixel, GeometryError> {
        project(self, world_to_camera(&self.world_to_camera, p))
    }

    /// Camera center expressed in the world frame.
    pub fn center(&self) -> Point3 {
        let t = self.world_to_camera.inverse().translation();
        Point3::from_array(t)
    }

    /// Meters per pixel for a point at the given camera depth.
    pub fn meters_per_pixel(&self, depth: f64) -> f64 {
        depth / self.fx.min(self.fy)
    }
}

/// Continuous image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pixel {
    pub u: f64,
    pub v: f64,
}

impl Pixel {
    pub const fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn in_frame(&self, width: usize, height: usize) -> bool {
        self.u >= 0.0 && self.v >= 0.0 && self.u < width as f64 && self.v < height as f64
    }
}

/// Ordered end-effector history in the world frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MotionTrace {
    points: Vec<(u64, Point3)>,
}

impl MotionTrace {
    pub fn new() -> Self {
        Self::default()
    }

    /// Trace with timesteps `0..positions.len()`.
    pub fn from_positions(positions: impl IntoIterator<Item = Point3>) -> Self {
        Self { points: positions.into_iter().enumerate().map(|(i, p)| (i as u64, p)).collect() }
    }

    pub fn push(&mut self, timestep: u64, p: Point3) -> Result<(), GeometryError> {
        if !p.is_finite() {
            return Err(GeometryError::NonFinite("trace point"));
        }
        if let Some(&(prev, _)) = self.points.last() {
            if timestep <= prev {
                return Err(GeometryError::NonIncreasingTimestep { prev, next: timestep });
            }
        }
        self.points.push((timestep, p));
        Ok(())
    }

    /// Appends at the next timestep after the current last one.
    pub fn push_next(&mut self, p: Point3) -> Result<(), GeometryError> {
        let t = self.points.last().map_or(0, |&(t, _)| t + 1);
        self.push(t, p)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[(u64, Point3)] {
        &self.points
    }

    pub fn positions(&self) -> impl Iterator<Item = Point3> + '_ {
        self.points.iter().map(|&(_, p)| p)
    }

    pub fn last(&self) -> Option<Point3> {
        self.points.last().map(|&(_, p)| p)
    }

    /// The first `n` points.
    pub fn prefix(&self, n: usize) -> MotionTrace {
        MotionTrace { points: self.points[..n.min(self.points.len())].to_vec() }
    }
}

pub fn world_to_camera(transform: &RigidTransform, p: Point3) -> Point3 {
    transform.apply(p)
}

/// Perspective projection of a camera-frame point.
pub fn project(cam: &CameraModel, p_cam: Point3) -> Result<Pixel, GeometryError> {
    if p_cam.z <= MIN_DEPTH {
        return Err(GeometryError::BehindCamera(p_cam.z));
    }
    Ok(Pixel::new(cam.fx * p_cam.x / p_cam.z + cam.cx, cam.fy * p_cam.y / p_cam.z + cam.cy))
}

/// Camera-frame point at depth `z` along the ray through `px`.
pub fn unproject(cam: &CameraModel, px: Pixel, z: f64) -> Point3 {
    Point3::new((px.u - cam.cx) / cam.fx * z, (px.v - cam.cy) / cam.fy * z, z)
}

/// Result of projecting a whole trace; points behind the camera are dropped.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProjectedTrace {
    pub pixels: Vec<Pixel>,
    pub dropped: usize,
}

pub fn project_trace(cam: &CameraModel, trace: &MotionTrace) -> ProjectedTrace {
    let mut out = ProjectedTrace { pixels: Vec::with_capacity(trace.len()), dropped: 0 };
    for p in trace.positions() {
        match project(cam, world_to_camera(&cam.world_to_camera, p)) {
            Ok(px) => out.pixels.push(px),
            Err(_) => out.dropped += 1,
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam(f: f64, c: f64) -> CameraModel {
        CameraModel::new(f, f, c, c, RigidTransform::identity(), 128, 128).unwrap()
    }

    #[test]
    fn identity_transform() {
        let p = Point3::new(1.0, 2.0, 3.0);
        assert_eq!(world_to_camera(&RigidTransform::identity(), p), p);
    }

    #[test]
    fn half_turn_about_z() {
        let t = RigidTransform::from_rotation_z(std::f64::consts::PI, [0.0; 3]).unwrap();
        let q = world_to_camera(&t, Point3::new(1.0, 0.0, 0.0));
        assert!((q.x + 1.0).abs() < 1e-15 && q.y.abs() < 1e-15 && q.z == 0.0);
    }

    #[test]
    fn rejects_reflection_and_shear() {
        let reflect = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]];
        assert!(matches!(RigidTransform::new(reflect, [0.0; 3]), Err(GeometryError::NotOrthonormal(_))));
        let shear = [[1.0, 1e-6, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(RigidTransform::new(shear, [0.0; 3]).is_err());
    }

    #[test]
    fn optical_axis_hits_principal_point() {
        let px = project(&cam(100.0, 64.0), Point3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(px, Pixel::new(64.0, 64.0));
    }

    #[test]
    fn hand_evaluated_projection() {
        let px = project(&cam(200.0, 64.0), Point3::new(0.1, -0.05, 2.0)).unwrap();
        assert!((px.u - 74.0).abs() < 1e-12);
        assert!((px.v - 59.0).abs() < 1e-12);
    }

    #[test]
    fn behind_camera_is_an_error() {
        let c = cam(100.0, 64.0);
        assert!(matches!(project(&c, Point3::new(0.0, 0.0, 0.0)), Err(GeometryError::BehindCamera(_))));
        assert!(project(&c, Point3::new(0.0, 0.0, -1.0)).is_err());
    }

    #[test]
    fn drops_points_behind_camera() {
        let c = cam(100.0, 64.0);
        let trace = MotionTrace::from_positions([
            Point3::new(0.0, 0.0, 1.0),
            Point3::new(0.0, 0.0, -1.0),
            Point3::new(0.1, 0.0, 1.0),
        ]);
        let out = project_trace(&c, &trace);
        assert_eq!(out.pixels.len(), 2);
        assert_eq!(out.dropped, 1);
        assert_eq!(out.pixels[1], Pixel::new(74.0, 64.0));
    }

    #[test]
    fn single_point_trace_is_composition() {
        let t = RigidTransform::from_rotation_z(0.3, [0.1, -0.2, 1.5]).unwrap();
        let c = CameraModel::new(90.0, 80.0, 60.0, 50.0, t, 128, 100).unwrap();
        let p = Point3::new(0.2, 0.1, 0.3);
        let out = project_trace(&c, &MotionTrace::from_positions([p]));
        assert_eq!(out.pixels, vec![project(&c, world_to_camera(&t, p)).unwrap()]);
    }

    #[test]
    fn trace_timesteps_must_increase() {
        let mut t = MotionTrace::new();
        t.push(3, Point3::default()).unwrap();
        assert!(t.push(3, Point3::default()).is_err());
        assert!(t.push(2, Point3::default()).is_err());
        t.push(4, Point3::default()).unwrap();
        t.push_next(Point3::default()).unwrap();
        assert_eq!(t.points().last().unwrap().0, 5);
    }

    #[test]
    fn invalid_intrinsics_rejected() {
        let id = RigidTransform::identity();
        assert!(CameraModel::new(0.0, 1.0, 1.0, 1.0, id, 4, 4).is_err());
        assert!(CameraModel::new(1.0, 1.0, 4.0, 1.0, id, 4, 4).is_err());
        assert!(CameraModel::new(1.0, 1.0, 1.0, 1.0, id, 0, 4).is_err());
    }

    #[test]
    fn look_at_puts_target_on_axis() {
        let eye = Point3::new(0.25, -0.3, 0.45);
        let target = Point3::new(0.25, 0.125, 0.05);
        let t = RigidTransform::look_at(eye, target, Point3::new(0.0, 0.0, 1.0)).unwrap();
        let q = t.apply(target);
        assert!(q.x.abs() < 1e-12 && q.y.abs() < 1e-12 && q.z > 0.0);
        // world up appears toward the top of the image (negative camera y)
        let above = t.apply(target + Point3::new(0.0, 0.0, 0.1));
        assert!(above.y < 0.0);
        let inv = t.inverse();
        let back = inv.apply(t.apply(Point3::new(0.3, 0.2, 0.1)));
        assert!(back.distance(Point3::new(0.3, 0.2, 0.1)) < 1e-12);
    }

    #[test]
    fn row_major_round_trip() {
        let t = RigidTransform::from_rotation_z(1.1, [0.5, 0.25, -2.0]).unwrap();
        assert_eq!(RigidTransform::from_row_major(&t.to_row_major()).unwrap(), t);
    }
}
