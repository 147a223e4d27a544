//! Pinhole cameras and pixel rays.
//!
//! Conventions: `R` maps world to camera coordinates (`x_c = R x_w + t`), the
//! camera looks along its `+z` axis with `+x` right and `+y` down, and pixel
//! coordinates are continuous with integer pixel `(i, j)` sampled at its
//! center `(i + 0.5, j + 0.5)`. Ray directions are unit length, so every depth
//! in this crate is a Euclidean distance from the camera center.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: Vec3) -> Vec3 {
    scale(a, 1.0 / norm(a))
}

fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

fn mat_t_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

fn det(m: &Mat3) -> f64 {
    dot(m[0], cross(m[1], m[2]))
}

const ORTHO_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    /// Intrinsics; upper triangular with `K[2] = [0, 0, 1]`.
    pub k: Mat3,
    /// World-to-camera rotation.
    pub r: Mat3,
    pub t: Vec3,
    pub width: usize,
    pub height: usize,
}

/// A ray `origin + d * dir` restricted to depths in `[near, far]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    /// Unit direction.
    pub dir: Vec3,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn new(origin: Vec3, dir: Vec3, near: f64, far: f64) -> Result<Self> {
        let n = norm(dir);
        if !(n > 0.0) || !origin.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("ray needs a finite origin and non-zero direction"));
        }
        if !(near > 0.0 && near < far) {
            return Err(Error::invalid(format!("ray interval must satisfy 0 < near < far, got [{near}, {far}]")));
        }
        Ok(Ray { origin, dir: scale(dir, 1.0 / n), near, far })
    }

    pub fn at(&self, d: f64) -> Vec3 {
        add(self.origin, scale(self.dir, d))
    }

    /// Restricts the interval to the part inside a sphere. `None` when the
    /// ray does not pass through the sphere within its current interval.
    pub fn clip_to_sphere(&self, center: Vec3, radius: f64) -> Option<Ray> {
        let oc = sub(self.origin, center);
        let b = dot(oc, self.dir);
        let c = dot(oc, oc) - radius * radius;
        let disc = b * b - c;
        if disc <= 0.0 {
            return None;
        }
        let root = disc.sqrt();
        let near = (-b - root).max(self.near);
        let far = (-b + root).min(self.far);
        (near < far && far > 0.0).then(|| Ray { near: near.max(f64::MIN_POSITIVE), far, ..*self })
    }
}

/// Pixel position and camera-frame depth of a projected point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: [f64; 2],
    pub z: f64,
}

/// Near bound used for rays produced by [`Camera::pixel_to_ray`].
pub const DEFAULT_NEAR: f64 = 1e-6;

impl Camera {
    pub fn new(k: Mat3, r: Mat3, t: Vec3, width: usize, height: usize) -> Result<Self> {
        let cam = Camera { k, r, t, width, height };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        let (fx, fy, cx, cy) = (self.k[0][0], self.k[1][1], self.k[0][2], self.k[1][2]);
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::invalid(format!("focal lengths must be positive, got fx={fx} fy={fy}")));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("image size must be positive"));
        }
        if !(0.0..self.width as f64).contains(&cx) || !(0.0..self.height as f64).contains(&cy) {
            return Err(Error::invalid(format!(
                "principal point ({cx}, {cy}) outside {}x{} image",
                self.width, self.height
            )));
        }
        if self.k[1][0] != 0.0 || self.k[2] != [0.0, 0.0, 1.0] {
            return Err(Error::invalid("intrinsics must be upper triangular with last row [0 0 1]"));
        }
        for i in 0..3 {
            for j in 0..3 {
                let d = dot(self.r[i], self.r[j]) - if i == j { 1.0 } else { 0.0 };
                if d.abs() > ORTHO_TOL {
                    return Err(Error::invalid("rotation is not orthonormal"));
                }
            }
        }
        if (det(&self.r) - 1.0).abs() > ORTHO_TOL {
            return Err(Error::invalid("rotation has determinant -1"));
        }
        if !self.t.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("camera translation".into()));
        }
        Ok(())
    }

    /// Camera looking from `eye` at `target`; `up` fixes the roll.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, focal: f64, width: usize, height: usize) -> Result<Self> {
        let forward = normalize(sub(target, eye));
        let mut right = cross(forward, up);
        if norm(right) < 1e-9 {
            right = cross(forward, [0.0, 1.0, 0.0]);
        }
        let right = normalize(right);
        let down = cross(forward, right);
        let r = [right, down, forward];
        let t = scale(mat_vec(&r, eye), -1.0);
        let k = [[focal, 0.0, width as f64 / 2.0], [0.0, focal, height as f64 / 2.0], [0.0, 0.0, 1.0]];
        Camera::new(k, r, t, width, height)
    }

    /// Camera center in world coordinates, `-R^T t`.
    pub fn center(&self) -> Vec3 {
        scale(mat_t_vec(&self.r, self.t), -1.0)
    }

    /// World-space unit direction of the optical axis.
    pub fn axis(&self) -> Vec3 {
        self.r[2]
    }

    /// Center of integer pixel `(i, j)` (column, row).
    pub fn pixel_center(i: usize, j: usize) -> [f64; 2] {
        [i as f64 + 0.5, j as f64 + 0.5]
    }

    fn direction(&self, u: [f64; 2]) -> Vec3 {
        let (fx, s, cx) = (self.k[0][0], self.k[0][1], self.k[0][2]);
        let (fy, cy) = (self.k[1][1], self.k[1][2]);
        let y = (u[1] - cy) / fy;
        let x = (u[0] - cx - s * y) / fx;
        normalize(mat_t_vec(&self.r, [x, y, 1.0]))
    }

    fn check_pixel(&self, u: [f64; 2]) -> Result<()> {
        let inside = (0.0..=self.width as f64).contains(&u[0]) && (0.0..=self.height as f64).contains(&u[1]);
        if inside {
            Ok(())
        } else {
            Err(Error::invalid(format!("pixel ({}, {}) outside {}x{} image", u[0], u[1], self.width, self.height)))
        }
    }

    /// Ray from the camera center through pixel `u`, with interval
    /// `[DEFAULT_NEAR, inf)`.
    pub fn pixel_to_ray(&self, u: [f64; 2]) -> Result<Ray> {
        self.check_pixel(u)?;
        Ok(Ray { origin: self.center(), dir: self.direction(u), near: DEFAULT_NEAR, far: f64::INFINITY })
    }

    /// Point at Euclidean distance `d` from the camera center along the ray
    /// through `u`.
    pub fn unproject_depth(&self, u: [f64; 2], d: f64) -> Result<Vec3> {
        if !(d > 0.0) {
            return Err(Error::invalid(format!("depth must be positive, got {d}")));
        }
        Ok(self.pixel_to_ray(u)?.at(d))
    }

    /// Perspective projection `K (R p + t)`. `None` when the point is not in
    /// front of the camera.
    pub fn project(&self, p: Vec3) -> Option<Projection> {
        let c = add(mat_vec(&self.r, p), self.t);
        if c[2] <= 0.0 {
            return None;
        }
        let h = mat_vec(&self.k, c);
        Some(Projection { u: [h[0] / h[2], h[1] / h[2]], z: c[2] })
    }

    fn record_line(&self, id: usize, out: &mut String) {
        write!(out, "{id} {} {}", self.width, self.height).unwrap();
        for v in self.k.iter().chain(self.r.iter()).flatten().chain(self.t.iter()) {
            write!(out, " {v}").unwrap();
        }
        out.push('\n');
    }
}

const CAMERA_FILE_HEADER: &str = "# view_id width height K[9] R[9] t[3] (row-major; R maps world to camera)\n";

/// Serializes cameras, one line per view.
pub fn format_cameras(cameras: &[Camera]) -> String {
    let mut s = String::from(CAMERA_FILE_HEADER);
    for (id, c) in cameras.iter().enumerate() {
        c.record_line(id, &mut s);
    }
    s
}

/// Parses the text produced by [`format_cameras`]. Views must be listed
/// with ids `0..n` in order.
pub fn parse_cameras(text: &str, path: &Path) -> Result<Vec<Camera>> {
    let mut cams = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let at = |msg: String| Error::format(path, format!("line {}: {msg}", lineno + 1));
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != 24 {
            return Err(at(format!("expected 24 fields, found {}", tokens.len())));
        }
        let int = |i: usize, name: &str| tokens[i].parse::<usize>().map_err(|_| at(format!("bad {name} `{}`", tokens[i])));
        let id = int(0, "view id")?;
        if id != cams.len() {
            return Err(at(format!("view id {id} out of order, expected {}", cams.len())));
        }
        let (width, height) = (int(1, "width")?, int(2, "height")?);
        let mut f = [0.0; 21];
        for (i, v) in f.iter_mut().enumerate() {
            *v = tokens[3 + i].parse().map_err(|_| at(format!("bad float in field {} `{}`", 4 + i, tokens[3 + i])))?;
        }
        let m = |o: usize| [[f[o], f[o + 1], f[o + 2]], [f[o + 3], f[o + 4], f[o + 5]], [f[o + 6], f[o + 7], f[o + 8]]];
        let cam = Camera::new(m(0), m(9), [f[18], f[19], f[20]], width, height).map_err(|e| at(e.to_string()))?;
        cams.push(cam);
    }
    Ok(cams)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const I3: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

    fn unit_cam() -> Camera {
        // cx = cy = 0 is allowed; the image spans [0, 1) x [0, 1).
        Camera::new(I3, I3, [0.0; 3], 1, 1).unwrap()
    }

    #[test]
    fn principal_ray() {
        let ray = unit_cam().pixel_to_ray([0.0, 0.0]).unwrap();
        assert_eq!(ray.origin, [0.0, 0.0, 0.0]);
        assert_eq!(ray.dir, [0.0, 0.0, 1.0]);
        let p = unit_cam().unproject_depth([0.0, 0.0], 1.5).unwrap();
        assert_eq!(p, [0.0, 0.0, 1.5]);
    }

    #[test]
    fn center_pixel_ray() {
        let k = [[100.0, 0.0, 50.0], [0.0, 100.0, 50.0], [0.0, 0.0, 1.0]];
        let cam = Camera::new(k, I3, [0.0; 3], 100, 100).unwrap();
        assert_eq!(cam.pixel_to_ray([50.0, 50.0]).unwrap().dir, [0.0, 0.0, 1.0]);
        assert!(cam.pixel_to_ray([100.5, 3.0]).is_err());
        assert!(cam.unproject_depth([3.0, 3.0], 0.0).is_err());
    }

    #[test]
    fn project_examples() {
        let pr = unit_cam().project([0.0, 0.0, 2.0]).unwrap();
        assert_eq!(pr.u, [0.0, 0.0]);
        assert_eq!(pr.z, 2.0);
        assert!(unit_cam().project([0.0, 0.0, -1.0]).is_none());
    }

    #[test]
    fn rejects_invalid_cameras() {
        let k = [[10.0, 0.0, 5.0], [0.0, 10.0, 5.0], [0.0, 0.0, 1.0]];
        let mut r = I3;
        r[2][2] = -1.0;
        assert!(Camera::new(k, r, [0.0; 3], 10, 10).is_err());
        let skewed = [[1.0, 0.1, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(Camera::new(k, skewed, [0.0; 3], 10, 10).is_err());
        let bad_k = [[-10.0, 0.0, 5.0], [0.0, 10.0, 5.0], [0.0, 0.0, 1.0]];
        assert!(Camera::new(bad_k, I3, [0.0; 3], 10, 10).is_err());
        let off = [[10.0, 0.0, 15.0], [0.0, 10.0, 5.0], [0.0, 0.0, 1.0]];
        assert!(Camera::new(off, I3, [0.0; 3], 10, 10).is_err());
    }

    #[test]
    fn look_at_axis_hits_target() {
        let cam = Camera::look_at([1.0, -2.0, 1.5], [0.0; 3], [0.0, 0.0, 1.0], 60.0, 64, 48).unwrap();
        let c = cam.center();
        assert!(norm(sub(c, [1.0, -2.0, 1.5])) < 1e-12);
        let pr = cam.project([0.0; 3]).unwrap();
        assert!((pr.u[0] - 32.0).abs() < 1e-9 && (pr.u[1] - 24.0).abs() < 1e-9);
        // World up projects upward in the image.
        let above = cam.project([0.0, 0.0, 0.2]).unwrap();
        assert!(above.u[1] < 24.0);
        // Straight down from the zenith still yields a valid camera.
        assert!(Camera::look_at([0.0, 0.0, 3.0], [0.0; 3], [0.0, 0.0, 1.0], 60.0, 64, 64).is_ok());
    }

    #[test]
    fn clip_to_sphere_interval() {
        let ray = unit_cam().pixel_to_ray([0.0, 0.0]).unwrap();
        let clipped = Ray { origin: [0.0, 0.0, -2.0], ..ray }.clip_to_sphere([0.0; 3], 0.5).unwrap();
        assert!((clipped.near - 1.5).abs() < 1e-12 && (clipped.far - 2.5).abs() < 1e-12);
        let miss = Ray { origin: [0.0, 1.0, -2.0], ..ray };
        assert!(miss.clip_to_sphere([0.0; 3], 0.5).is_none());
    }

    #[test]
    fn camera_file_roundtrip_and_errors() {
        let cams = vec![
            Camera::look_at([1.0, 2.0, 0.5], [0.0; 3], [0.0, 0.0, 1.0], 90.0, 32, 32).unwrap(),
            Camera::look_at([-1.3, 0.2, 2.0], [0.0; 3], [0.0, 0.0, 1.0], 70.5, 32, 32).unwrap(),
        ];
        let text = format_cameras(&cams);
        let back = parse_cameras(&text, Path::new("cameras.txt")).unwrap();
        assert_eq!(cams, back);
        let broken = text.replacen(" 32 32 ", " 32 x ", 1);
        let err = parse_cameras(&broken, Path::new("cameras.txt")).unwrap_err().to_string();
        assert!(err.contains("cameras.txt") && err.contains("height"), "{err}");
        assert!(parse_cameras("0 1 2 3\n", Path::new("c")).is_err());
    }

    fn arb_camera() -> impl Strategy<Value = Camera> {
        (0.3f64..3.0, 0.0f64..std::f64::consts::TAU, 0.0f64..1.4, 20.0f64..200.0).prop_map(|(dist, az, el, f)| {
            let eye = [dist * el.cos() * az.cos(), dist * el.cos() * az.sin(), dist * el.sin() + 0.1];
            Camera::look_at(eye, [0.05, -0.02, 0.0], [0.0, 0.0, 1.0], f, 64, 48).unwrap()
        })
    }

    proptest! {
        #[test]
        fn project_unproject_roundtrip(cam in arb_camera(), ux in 0.0f64..64.0, uy in 0.0f64..48.0, d in 0.01f64..10.0) {
            let p = cam.unproject_depth([ux, uy], d).unwrap();
            prop_assert!((norm(sub(p, cam.center())) - d).abs() < 1e-12 * d.max(1.0));
            let pr = cam.project(p).unwrap();
            prop_assert!((pr.u[0] - ux).abs() < 1e-9 && (pr.u[1] - uy).abs() < 1e-9);
            let back = cam.unproject_depth(pr.u, d).unwrap();
            prop_assert!(norm(sub(back, p)) < 1e-9);
            let ray = cam.pixel_to_ray([ux, uy]).unwrap();
            prop_assert!((norm(ray.dir) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn points_on_a_ray_project_to_its_pixel(cam in arb_camera(), ux in 0.0f64..64.0, uy in 0.0f64..48.0, ds in proptest::collection::vec(0.05f64..5.0, 1..5)) {
            let ray = cam.pixel_to_ray([ux, uy]).unwrap();
            for d in ds {
                let pr = cam.project(ray.at(d)).unwrap();
                prop_assert!((pr.u[0] - ux).abs() < 1e-9 && (pr.u[1] - uy).abs() < 1e-9);
            }
        }
    }
}
