//! Pinhole cameras, rays, and pose interpolation.
//!
//! Conventions: right-handed world with +z up; the camera frame looks down
//! +z with +x right and +y down, so pixel `v` grows downward. Pixel `(i, j)`
//! covers `[i, i+1) × [j, j+1)` and its centre is `(i + 0.5, j + 0.5)`.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};

use crate::error::{Error, Result};

const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    /// Square pixels, principal point at the image centre.
    pub fn centered(focal: f64, width: usize, height: usize) -> Self {
        Intrinsics {
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
        }
    }

    /// Same field of view at a different image size.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Intrinsics {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width,
            height,
        }
    }
}

/// Intrinsics plus a world-to-camera rigid transform `x_cam = R·x + t`.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraPose {
    pub intrinsics: Intrinsics,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }

    /// Parametric interval where the ray is inside the axis-aligned cube
    /// `[−half, half]³`, clipped to `[t_near, t_far]`.
    pub fn intersect_cube(&self, half: f64) -> Option<(f64, f64)> {
        let mut t0 = self.t_near;
        let mut t1 = self.t_far;
        for axis in 0..3 {
            let o = self.origin[axis];
            let d = self.direction[axis];
            if d.abs() < 1e-15 {
                if o < -half || o > half {
                    return None;
                }
                continue;
            }
            let (mut a, mut b) = ((-half - o) / d, (half - o) / d);
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            t0 = t0.max(a);
            t1 = t1.min(b);
        }
        (t0 < t1).then_some((t0, t1))
    }
}

impl CameraPose {
    pub fn new(
        intrinsics: Intrinsics,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self> {
        if !(intrinsics.fx > 0.0 && intrinsics.fy > 0.0) {
            return Err(Error::invalid("camera", "focal lengths must be positive"));
        }
        if intrinsics.width == 0 || intrinsics.height == 0 {
            return Err(Error::invalid("camera", "image size must be at least 1×1"));
        }
        let gram = rotation * rotation.transpose();
        if (gram - Matrix3::identity()).abs().max() > ORTHONORMAL_TOL
            || (rotation.determinant() - 1.0).abs() > ORTHONORMAL_TOL
        {
            return Err(Error::invalid("camera", "rotation is not a proper rotation"));
        }
        Ok(CameraPose {
            intrinsics,
            rotation,
            translation,
        })
    }

    /// Camera at `eye` looking at `target` with `up` as the world up hint.
    pub fn look_at(
        intrinsics: Intrinsics,
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
    ) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::invalid("look_at", "eye coincides with target"))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::invalid("look_at", "view direction parallel to up"))?;
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        Self::new(intrinsics, rotation, translation)
    }

    /// Camera on a sphere about the origin, looking at the origin.
    /// Angles in radians; elevation is measured from the xy-plane.
    pub fn orbit(intrinsics: Intrinsics, azimuth: f64, elevation: f64, radius: f64) -> Result<Self> {
        let eye = Vector3::new(
            radius * elevation.cos() * azimuth.cos(),
            radius * elevation.cos() * azimuth.sin(),
            radius * elevation.sin(),
        );
        Self::look_at(intrinsics, eye, Vector3::zeros(), Vector3::z())
    }

    /// Identity extrinsics.
    pub fn identity(intrinsics: Intrinsics) -> Self {
        CameraPose {
            intrinsics,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn with_intrinsics(&self, intrinsics: Intrinsics) -> Self {
        CameraPose {
            intrinsics,
            ..self.clone()
        }
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Continuous pixel coordinates of a world point in front of the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Result<(f64, f64)> {
        let c = self.world_to_camera(p);
        if c.z <= 1e-9 {
            return Err(Error::BehindCamera([p.x, p.y, p.z]));
        }
        let k = &self.intrinsics;
        Ok((k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy))
    }

    /// Ray through continuous pixel coordinates `(u, v)`.
    pub fn pixel_to_ray(&self, u: f64, v: f64) -> Ray {
        let k = &self.intrinsics;
        let d_cam = Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
        let direction = (self.rotation.transpose() * d_cam).normalize();
        Ray {
            origin: self.center(),
            direction,
            t_near: 1e-3,
            t_far: 1e3,
        }
    }

    /// Rays through every pixel centre, row-major.
    pub fn pixel_rays(&self) -> Vec<Ray> {
        let (w, h) = (self.width(), self.height());
        (0..h)
            .flat_map(|j| (0..w).map(move |i| (i, j)))
            .map(|(i, j)| self.pixel_to_ray(i as f64 + 0.5, j as f64 + 0.5))
            .collect()
    }

    /// Spherical coordinates `(azimuth, elevation, radius)` of the centre.
    pub fn spherical(&self) -> (f64, f64, f64) {
        let c = self.center();
        let r = c.norm();
        let el = if r > 0.0 { (c.z / r).clamp(-1.0, 1.0).asin() } else { 0.0 };
        (c.y.atan2(c.x), el, r)
    }

    /// True when the optical axis points at the world origin.
    fn looks_at_origin(&self, tol: f64) -> bool {
        let c = self.center();
        let r = c.norm();
        if r < 1e-9 {
            return false;
        }
        let forward = self.rotation.row(2).transpose();
        (forward + c / r).norm() < tol
    }

    /// One line of the pose text format:
    /// `fx fy cx cy w h r00 r01 r02 r10 r11 r12 r20 r21 r22 t0 t1 t2`.
    pub fn to_line(&self) -> String {
        let k = &self.intrinsics;
        let mut s = format!("{} {} {} {} {} {}", k.fx, k.fy, k.cx, k.cy, k.width, k.height);
        for r in 0..3 {
            for c in 0..3 {
                write!(s, " {}", self.rotation[(r, c)]).unwrap();
            }
        }
        for i in 0..3 {
            write!(s, " {}", self.translation[i]).unwrap();
        }
        s
    }

    pub fn from_line(line: &str) -> Result<Self> {
        let err = |reason: String| Error::Parse {
            what: "pose line".into(),
            reason,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 18 {
            return Err(err(format!("expected 18 fields, found {}", fields.len())));
        }
        let num = |i: usize| -> Result<f64> {
            fields[i]
                .parse::<f64>()
                .map_err(|e| err(format!("field {i} `{}`: {e}", fields[i])))
        };
        let count = |i: usize| -> Result<usize> {
            fields[i]
                .parse::<usize>()
                .map_err(|e| err(format!("field {i} `{}`: {e}", fields[i])))
        };
        let intrinsics = Intrinsics {
            fx: num(0)?,
            fy: num(1)?,
            cx: num(2)?,
            cy: num(3)?,
            width: count(4)?,
            height: count(5)?,
        };
        let mut rot = Matrix3::zeros();
        for r in 0..3 {
            for c in 0..3 {
                rot[(r, c)] = num(6 + 3 * r + c)?;
            }
        }
        let t = Vector3::new(num(15)?, num(16)?, num(17)?);
        Self::new(intrinsics, rot, t)
    }
}

pub fn write_pose_file(path: &Path, poses: &[CameraPose]) -> Result<()> {
    let mut text = String::new();
    for p in poses {
        text.push_str(&p.to_line());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_pose_file(path: &Path) -> Result<Vec<CameraPose>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(CameraPose::from_line)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InterpolationMode {
    /// Azimuth/elevation on a sphere about the origin, look-at orientation.
    Spherical,
    /// Translation lerp plus rotation slerp.
    Linear,
}

/// Signed azimuth step from `a` to `b` along the shorter arc, in `(−π, π]`.
/// A step of exactly π goes in the positive direction.
fn shorter_arc(a: f64, b: f64) -> f64 {
    let d = (b - a).rem_euclid(2.0 * PI);
    if d > PI {
        d - 2.0 * PI
    } else {
        d
    }
}

/// `n` poses strictly between `start` and `end`, at fractions `i / (n + 1)`.
pub fn interpolate_poses(
    start: &CameraPose,
    end: &CameraPose,
    n: usize,
    mode: InterpolationMode,
) -> Result<Vec<CameraPose>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let denom = (n + 1) as f64;
    // Integer-derived weights keep the sequence exactly reversible.
    let weights = (1..=n).map(move |i| ((n + 1 - i) as f64 / denom, i as f64 / denom));
    match mode {
        InterpolationMode::Spherical => {
            for p in [start, end] {
                if !p.looks_at_origin(1e-6) {
                    return Err(Error::invalid(
                        "interpolate_poses",
                        "spherical mode needs cameras looking at the origin",
                    ));
                }
            }
            let (az0, el0, r0) = start.spherical();
            let (az1, el1, r1) = end.spherical();
            if (r0 - r1).abs() >= 0.01 * r0.max(r1) {
                return Err(Error::invalid(
                    "interpolate_poses",
                    format!("orbit radii differ: {r0} vs {r1}"),
                ));
            }
            // Keep `az1` untouched when no unwrap is needed so that swapping
            // the endpoints reverses the sequence exactly.
            let az_end = if (az1 - az0).abs() < PI {
                az1
            } else {
                az0 + shorter_arc(az0, az1)
            };
            let radius = 0.5 * (r0 + r1);
            weights
                .map(|(wa, wb)| {
                    let az = wa * az0 + wb * az_end;
                    let el = wa * el0 + wb * el1;
                    CameraPose::orbit(start.intrinsics, az, el, radius)
                })
                .collect()
        }
        InterpolationMode::Linear => {
            let q0 = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(start.rotation));
            let q1 = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(end.rotation));
            weights
                .map(|(wa, wb)| {
                    let q = q0.slerp(&q1, wb);
                    let t = start.translation * wa + end.translation * wb;
                    CameraPose::new(start.intrinsics, *q.to_rotation_matrix().matrix(), t)
                })
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k() -> Intrinsics {
        Intrinsics {
            fx: 100.0,
            fy: 100.0,
            cx: 64.0,
            cy: 64.0,
            width: 128,
            height: 128,
        }
    }

    #[test]
    fn projection_examples() {
        let cam = CameraPose::identity(k());
        assert_eq!(cam.project(&Vector3::new(0.0, 0.0, 2.0)).unwrap(), (64.0, 64.0));
        assert_eq!(cam.project(&Vector3::new(1.0, 0.0, 2.0)).unwrap(), (114.0, 64.0));
        assert!(matches!(
            cam.project(&Vector3::new(0.0, 0.0, -1.0)),
            Err(Error::BehindCamera(_))
        ));
    }

    #[test]
    fn principal_ray_and_round_trip() {
        let cam = CameraPose::identity(k());
        let ray = cam.pixel_to_ray(64.0, 64.0);
        assert!((ray.direction - Vector3::z()).norm() < 1e-15);
        let mid = ray.at(0.5 * (ray.t_near + ray.t_far));
        let (u, v) = cam.project(&mid).unwrap();
        assert!((u - 64.0).abs() < 1e-9 && (v - 64.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_improper_rotation() {
        let mut r = Matrix3::identity();
        r[(0, 0)] = -1.0;
        assert!(CameraPose::new(k(), r, Vector3::zeros()).is_err());
        let mut bad = k();
        bad.fx = 0.0;
        assert!(CameraPose::new(bad, Matrix3::identity(), Vector3::zeros()).is_err());
    }

    #[test]
    fn spherical_examples() {
        let deg = PI / 180.0;
        let a = CameraPose::orbit(k(), 0.0, 20.0 * deg, 1.3).unwrap();
        let b = CameraPose::orbit(k(), 90.0 * deg, 20.0 * deg, 1.3).unwrap();
        let mid = interpolate_poses(&a, &b, 1, InterpolationMode::Spherical).unwrap();
        assert_eq!(mid.len(), 1);
        let (az, el, r) = mid[0].spherical();
        assert!((az - 45.0 * deg).abs() < 1e-12);
        assert!((el - 20.0 * deg).abs() < 1e-12);
        assert!((r - 1.3).abs() < 1e-12);

        assert!(interpolate_poses(&a, &b, 0, InterpolationMode::Spherical)
            .unwrap()
            .is_empty());

        let lo = CameraPose::orbit(k(), 0.3, 10.0 * deg, 1.3).unwrap();
        let hi = CameraPose::orbit(k(), 0.3, 30.0 * deg, 1.3).unwrap();
        let els: Vec<f64> = interpolate_poses(&lo, &hi, 3, InterpolationMode::Spherical)
            .unwrap()
            .iter()
            .map(|p| p.spherical().1 / deg)
            .collect();
        for (got, want) in els.iter().zip([15.0, 20.0, 25.0]) {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn spherical_takes_the_shorter_arc() {
        let deg = PI / 180.0;
        let a = CameraPose::orbit(k(), 170.0 * deg, 0.0, 1.3).unwrap();
        let b = CameraPose::orbit(k(), -170.0 * deg, 0.0, 1.3).unwrap();
        let mid = interpolate_poses(&a, &b, 1, InterpolationMode::Spherical).unwrap();
        let az = mid[0].spherical().0;
        assert!((az.abs() - PI).abs() < 1e-9, "{az}");
        assert!((shorter_arc(0.0, PI) - PI).abs() < 1e-15);
        assert!((shorter_arc(PI, 0.0) - PI).abs() < 1e-15);
    }

    #[test]
    fn spherical_rejects_non_orbit_poses() {
        let a = CameraPose::identity(k());
        let b = CameraPose::orbit(k(), 0.0, 0.0, 1.3).unwrap();
        assert!(interpolate_poses(&a, &b, 2, InterpolationMode::Spherical).is_err());
        let far = CameraPose::orbit(k(), 1.0, 0.0, 1.5).unwrap();
        assert!(interpolate_poses(&b, &far, 2, InterpolationMode::Spherical).is_err());
    }

    #[test]
    fn linear_mode_hits_midpoint() {
        let a = CameraPose::orbit(k(), 0.0, 0.0, 1.3).unwrap();
        let b = CameraPose::orbit(k(), 0.5, 0.2, 1.3).unwrap();
        let mid = &interpolate_poses(&a, &b, 1, InterpolationMode::Linear).unwrap()[0];
        let t = (a.translation() + b.translation()) * 0.5;
        assert!((mid.translation() - t).norm() < 1e-12);
    }

    #[test]
    fn pose_line_round_trip() {
        let p = CameraPose::orbit(k(), 0.7, -0.3, 1.3).unwrap();
        assert_eq!(CameraPose::from_line(&p.to_line()).unwrap(), p);
        assert!(CameraPose::from_line("1 2 3").is_err());
    }

    #[test]
    fn cube_intersection() {
        let cam = CameraPose::orbit(k(), 0.0, 0.0, 1.3).unwrap();
        let ray = cam.pixel_to_ray(64.0, 64.0);
        let (t0, t1) = ray.intersect_cube(0.5).unwrap();
        assert!((t0 - 0.8).abs() < 1e-12 && (t1 - 1.8).abs() < 1e-12);
        let away = Ray {
            direction: -ray.direction,
            ..ray
        };
        assert!(away.intersect_cube(0.5).is_none());
    }
}
