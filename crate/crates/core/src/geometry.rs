//! Pinhole cameras, pixel/world conversions, rays and the stratified and
//! importance samplers that place points along them.
//!
//! Pixel coordinates are continuous with integer values at pixel centers:
//! pixel `(i, j)` is hit by the ray through `(u, v) = (i, j)`.

use alloc::{format, vec, vec::Vec};
use core::ops::{Add, Mul, Neg, Sub};

use crate::error::{Error, Result};
use crate::math;
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Vec3(pub [f64; 3]);

impl Vec3 {
    pub const ZERO: Vec3 = Vec3([0.0; 3]);

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3([x, y, z])
    }

    pub fn x(self) -> f64 {
        self.0[0]
    }
    pub fn y(self) -> f64 {
        self.0[1]
    }
    pub fn z(self) -> f64 {
        self.0[2]
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.0[0] * o.0[0] + self.0[1] * o.0[1] + self.0[2] * o.0[2]
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        let [a, b, c] = self.0;
        let [x, y, z] = o.0;
        Vec3([b * z - c * y, c * x - a * z, a * y - b * x])
    }

    pub fn norm(self) -> f64 {
        math::sqrt(self.dot(self))
    }

    pub fn normalized(self) -> Vec3 {
        self * (1.0 / self.norm())
    }

    pub fn map(self, f: impl Fn(f64) -> f64) -> Vec3 {
        Vec3(self.0.map(f))
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3([self.0[0] + o.0[0], self.0[1] + o.0[1], self.0[2] + o.0[2]])
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3([self.0[0] - o.0[0], self.0[1] - o.0[1], self.0[2] - o.0[2]])
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        self.map(|v| v * s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        self.map(|v| -v)
    }
}

/// Row-major 3×3 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat3(pub [[f64; 3]; 3]);

impl Mat3 {
    pub const IDENTITY: Mat3 = Mat3([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    pub fn from_rows(a: Vec3, b: Vec3, c: Vec3) -> Self {
        Mat3([a.0, b.0, c.0])
    }

    pub fn row(&self, i: usize) -> Vec3 {
        Vec3(self.0[i])
    }

    pub fn transpose(&self) -> Mat3 {
        let m = &self.0;
        Mat3([[m[0][0], m[1][0], m[2][0]], [m[0][1], m[1][1], m[2][1]], [m[0][2], m[1][2], m[2][2]]])
    }

    pub fn mul_vec(&self, v: Vec3) -> Vec3 {
        Vec3([self.row(0).dot(v), self.row(1).dot(v), self.row(2).dot(v)])
    }

    pub fn mul_mat(&self, o: &Mat3) -> Mat3 {
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.0[i][k] * o.0[k][j]).sum();
            }
        }
        Mat3(out)
    }

    pub fn determinant(&self) -> f64 {
        self.row(0).dot(self.row(1).cross(self.row(2)))
    }

    /// Largest absolute entry of `RᵀR - I`.
    pub fn orthonormality_error(&self) -> f64 {
        let p = self.transpose().mul_mat(self);
        let mut e: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                e = e.max((p.0[i][j] - target).abs());
            }
        }
        e
    }

    /// Gram-Schmidt on the rows, keeping the first row's direction.
    pub fn orthonormalized(&self) -> Mat3 {
        let a = self.row(0).normalized();
        let b = (self.row(1) - a * a.dot(self.row(1))).normalized();
        let c = a.cross(b);
        Mat3::from_rows(a, b, c)
    }

    /// Rotation about the world z axis.
    pub fn rotation_z(angle: f64) -> Mat3 {
        let (s, c) = (math::sin(angle), math::cos(angle));
        Mat3([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    }
}

const ROTATION_TOLERANCE: f64 = 1e-9;

/// Pinhole camera: `f` focal length, `dx`/`dy` pixel pitch, `(u0, v0)`
/// principal point, and the world→camera transform `p_c = R p_w + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub f: f64,
    pub dx: f64,
    pub dy: f64,
    pub u0: f64,
    pub v0: f64,
    pub rotation: Mat3,
    pub translation: Vec3,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if !(self.f > 0.0 && self.dx > 0.0 && self.dy > 0.0) {
            return Err(Error::Camera(format!(
                "focal length and pixel pitch must be positive (f={}, dx={}, dy={})",
                self.f, self.dx, self.dy
            )));
        }
        if !(self.u0 >= 0.0 && self.u0 < self.width as f64 && self.v0 >= 0.0 && self.v0 < self.height as f64) {
            return Err(Error::Camera(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.u0, self.v0, self.width, self.height
            )));
        }
        let ortho = self.rotation.orthonormality_error();
        let det = self.rotation.determinant();
        if ortho > ROTATION_TOLERANCE || (det - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(Error::Camera(format!(
                "rotation is not proper orthonormal (|RᵀR-I|={ortho:.3e}, det={det})"
            )));
        }
        Ok(())
    }

    /// Camera looking from `eye` at `target`, image `y` axis pointing away
    /// from `up`. Principal point at the image center.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, f: f64, width: usize, height: usize) -> Camera {
        let forward = (target - eye).normalized();
        let right = forward.cross(up).normalized();
        let down = forward.cross(right);
        let rotation = Mat3::from_rows(right, down, forward);
        let translation = -rotation.mul_vec(eye);
        Camera {
            f,
            dx: 1.0,
            dy: 1.0,
            u0: (width as f64 - 1.0) / 2.0,
            v0: (height as f64 - 1.0) / 2.0,
            rotation,
            translation,
            width,
            height,
        }
    }

    /// Camera center in world coordinates, `-Rᵀ t`.
    pub fn center(&self) -> Vec3 {
        -self.rotation.transpose().mul_vec(self.translation)
    }

    /// Ray from the camera center through pixel `(u, v)`.
    pub fn pixel_ray(&self, u: f64, v: f64, near: f64, far: f64) -> Result<Ray> {
        if !(u >= 0.0 && u < self.width as f64 && v >= 0.0 && v < self.height as f64) {
            return Err(Error::Domain {
                what: "pixel",
                detail: format!("({u}, {v}) outside {}x{}", self.width, self.height),
            });
        }
        // pixel -> image plane
        let x = (u - self.u0) * self.dx;
        let y = (v - self.v0) * self.dy;
        // image plane -> camera frame direction at z_c = f
        let dir_cam = Vec3::new(x, y, self.f);
        // camera -> world
        let direction = self.rotation.transpose().mul_vec(dir_cam).normalized();
        Ray::new(self.center(), direction, near, far)
    }

    /// Projects a world point to `(u, v, z_c)`.
    pub fn world_to_pixel(&self, p: Vec3) -> Result<(f64, f64, f64)> {
        let pc = self.rotation.mul_vec(p) + self.translation;
        let z_c = pc.z();
        if z_c <= 0.0 {
            return Err(Error::BehindCamera { z_c });
        }
        let x = self.f * pc.x() / z_c;
        let y = self.f * pc.y() / z_c;
        Ok((x / self.dx + self.u0, y / self.dy + self.v0, z_c))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3, near: f64, far: f64) -> Result<Ray> {
        if (direction.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::Domain { what: "ray direction", detail: format!("|d| = {}", direction.norm()) });
        }
        if !(near > 0.0 && near < far) {
            return Err(Error::Domain { what: "ray bounds", detail: format!("near={near}, far={far}") });
        }
        Ok(Ray { origin, direction, near, far })
    }

    pub fn at(&self, depth: f64) -> Vec3 {
        self.origin + self.direction * depth
    }

    /// Azimuth `theta` and elevation `beta` of the direction, in radians.
    pub fn view_angles(&self) -> (f64, f64) {
        let d = self.direction;
        (math::atan2(d.y(), d.x()), math::asin(d.z().clamp(-1.0, 1.0)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleStage {
    Coarse,
    Fine,
}

/// Ordered samples along a batch of rays, stored ray-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RaySampleBatch {
    pub rays: usize,
    pub samples: usize,
    /// `[rays * samples]` distances along each ray.
    pub depths: Vec<f64>,
    /// `[rays * samples * 3]` world positions.
    pub positions: Vec<f64>,
    /// `[rays * samples]` interval lengths.
    pub deltas: Vec<f64>,
    /// Source ray of each row.
    pub ray_index: Vec<usize>,
    pub stage: SampleStage,
}

impl RaySampleBatch {
    fn from_depths(rays: &[Ray], samples: usize, depths: Vec<f64>, deltas: Vec<f64>, stage: SampleStage) -> Self {
        let mut positions = Vec::with_capacity(depths.len() * 3);
        for (r, ray) in rays.iter().enumerate() {
            for &t in &depths[r * samples..(r + 1) * samples] {
                positions.extend_from_slice(&ray.at(t).0);
            }
        }
        RaySampleBatch {
            rays: rays.len(),
            samples,
            depths,
            positions,
            deltas,
            ray_index: (0..rays.len()).collect(),
            stage,
        }
    }

    pub fn ray_depths(&self, r: usize) -> &[f64] {
        &self.depths[r * self.samples..(r + 1) * self.samples]
    }

    pub fn ray_deltas(&self, r: usize) -> &[f64] {
        &self.deltas[r * self.samples..(r + 1) * self.samples]
    }
}

/// Floor added to every importance weight before building the CDF.
pub const PDF_EPSILON: f64 = 1e-5;

const MIN_DELTA: f64 = 1e-12;

/// Stratified samples: `n` equal bins over `[near, far]`, one point per bin,
/// at the bin center or uniformly jittered inside it.
pub fn sample_coarse(rays: &[Ray], n: usize, mut jitter: Option<&mut Rng>) -> Result<RaySampleBatch> {
    if n < 2 {
        return Err(Error::contract("sample_coarse", format!("need at least 2 samples, got {n}")));
    }
    let mut depths = Vec::with_capacity(rays.len() * n);
    let mut deltas = Vec::with_capacity(rays.len() * n);
    for ray in rays {
        let width = (ray.far - ray.near) / n as f64;
        let start = depths.len();
        for i in 0..n {
            let offset = match jitter.as_deref_mut() {
                Some(rng) => rng::uniform(rng),
                None => 0.5,
            };
            depths.push(ray.near + (i as f64 + offset) * width);
        }
        for i in 0..n {
            let d = if i + 1 < n { depths[start + i + 1] - depths[start + i] } else { width };
            deltas.push(d.max(MIN_DELTA));
        }
    }
    Ok(RaySampleBatch::from_depths(rays, n, depths, deltas, SampleStage::Coarse))
}

/// Inverse-CDF resampling of the piecewise-constant density over the coarse
/// bins, proportional to `coarse_weights + PDF_EPSILON`. Without an rng the
/// quantiles `(j + 0.5) / n` are used, which makes the result deterministic.
pub fn sample_fine(
    rays: &[Ray],
    coarse: &RaySampleBatch,
    coarse_weights: &[f64],
    n: usize,
    mut rng: Option<&mut Rng>,
) -> Result<RaySampleBatch> {
    if coarse.rays != rays.len() || coarse_weights.len() != coarse.rays * coarse.samples {
        return Err(Error::dim(
            "sample_fine",
            format!("{} rays, {} coarse rows, {} weights", rays.len(), coarse.rays, coarse_weights.len()),
        ));
    }
    if n < 1 {
        return Err(Error::contract("sample_fine", "need at least one sample"));
    }
    if coarse_weights.iter().any(|&w| !(w >= 0.0)) {
        return Err(Error::contract("sample_fine", "importance weights must be nonnegative"));
    }
    let bins = coarse.samples;
    let mut depths = Vec::with_capacity(rays.len() * n);
    let mut deltas = Vec::with_capacity(rays.len() * n);
    let mut cdf = vec![0.0; bins + 1];
    let mut quantiles = vec![0.0; n];
    for (r, ray) in rays.iter().enumerate() {
        let w = &coarse_weights[r * bins..(r + 1) * bins];
        let total: f64 = w.iter().map(|x| x + PDF_EPSILON).sum();
        for i in 0..bins {
            cdf[i + 1] = cdf[i] + (w[i] + PDF_EPSILON) / total;
        }
        cdf[bins] = 1.0;
        match rng.as_deref_mut() {
            Some(rng) => {
                for q in quantiles.iter_mut() {
                    *q = rng::uniform(rng);
                }
                quantiles.sort_by(f64::total_cmp);
            }
            None => {
                for (j, q) in quantiles.iter_mut().enumerate() {
                    *q = (j as f64 + 0.5) / n as f64;
                }
            }
        }
        let bin_width = (ray.far - ray.near) / bins as f64;
        let start = depths.len();
        let mut bin = 0;
        for &u in &quantiles {
            while bin + 1 < bins && cdf[bin + 1] <= u {
                bin += 1;
            }
            let mass = cdf[bin + 1] - cdf[bin];
            let frac = if mass > 0.0 { ((u - cdf[bin]) / mass).clamp(0.0, 1.0) } else { 0.5 };
            let mut t = ray.near + (bin as f64 + frac) * bin_width;
            if let Some(&prev) = depths[start..].last() {
                if t <= prev {
                    t = prev + MIN_DELTA;
                }
            }
            depths.push(t.min(ray.far));
        }
        let mean_width = (ray.far - ray.near) / n as f64;
        for i in 0..n {
            let d = if i + 1 < n { depths[start + i + 1] - depths[start + i] } else { mean_width };
            deltas.push(d.max(MIN_DELTA));
        }
    }
    Ok(RaySampleBatch::from_depths(rays, n, depths, deltas, SampleStage::Fine))
}

/// Axis-aligned box that maps onto `[-1, 1]³` for field inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneBox {
    pub min: Vec3,
    pub max: Vec3,
}

impl SceneBox {
    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn normalize(&self, p: Vec3) -> Vec3 {
        let c = self.center();
        Vec3([0, 1, 2].map(|i| 2.0 * (p.0[i] - c.0[i]) / (self.max.0[i] - self.min.0[i])))
    }

    pub fn bounding_radius(&self) -> f64 {
        (self.max - self.min).norm() / 2.0
    }

    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|i| p.0[i] >= self.min.0[i] && p.0[i] <= self.max.0[i])
    }
}

/// Cameras evenly spaced in azimuth on a circle around `target`.
pub fn orbit_cameras(
    target: Vec3,
    distance: f64,
    elevation: f64,
    count: usize,
    phase: f64,
    f: f64,
    width: usize,
    height: usize,
) -> Vec<Camera> {
    (0..count)
        .map(|i| {
            let az = phase + core::f64::consts::TAU * i as f64 / count as f64;
            let (ce, se) = (math::cos(elevation), math::sin(elevation));
            let eye = target + Vec3::new(distance * ce * math::cos(az), distance * ce * math::sin(az), distance * se);
            Camera::look_at(eye, target, Vec3::new(0.0, 0.0, 1.0), f, width, height)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_cam(f: f64, w: usize, h: usize) -> Camera {
        Camera {
            f,
            dx: 1.0,
            dy: 1.0,
            u0: (w / 2) as f64,
            v0: (h / 2) as f64,
            rotation: Mat3::IDENTITY,
            translation: Vec3::ZERO,
            width: w,
            height: h,
        }
    }

    #[test]
    fn principal_point_maps_to_optical_axis() {
        let cam = identity_cam(100.0, 64, 64);
        let ray = cam.pixel_ray(cam.u0, cam.v0, 0.1, 10.0).unwrap();
        assert_eq!(ray.direction, Vec3::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn origin_is_minus_rt_t() {
        let mut cam = identity_cam(100.0, 64, 64);
        cam.translation = Vec3::new(0.0, 0.0, -5.0);
        let ray = cam.pixel_ray(cam.u0, cam.v0, 0.1, 10.0).unwrap();
        assert_eq!(ray.origin, Vec3::new(0.0, 0.0, 5.0));
    }

    #[test]
    fn off_axis_pixel_direction() {
        let cam = Camera { u0: 10.0, v0: 10.0, ..identity_cam(512.0, 1024, 32) };
        let ray = cam.pixel_ray(10.0 + 512.0, 10.0, 0.1, 1.0).unwrap();
        let s = 1.0 / 2f64.sqrt();
        assert!((ray.direction - Vec3::new(s, 0.0, s)).norm() < 1e-15);
    }

    #[test]
    fn projection_by_hand() {
        let cam = Camera { u0: 8.0, v0: 8.0, ..identity_cam(2.0, 16, 16) };
        let (u, v, z) = cam.world_to_pixel(Vec3::new(1.0, 0.0, 2.0)).unwrap();
        assert_eq!((u, v, z), (9.0, 8.0, 2.0));
        let (u, v, _) = cam.world_to_pixel(Vec3::new(0.0, 0.0, 7.0)).unwrap();
        assert_eq!((u, v), (cam.u0, cam.v0));
    }

    #[test]
    fn behind_camera_and_out_of_bounds() {
        let cam = identity_cam(2.0, 16, 16);
        assert!(matches!(cam.world_to_pixel(Vec3::new(0.0, 0.0, -1.0)), Err(Error::BehindCamera { .. })));
        assert!(matches!(cam.pixel_ray(16.0, 0.0, 0.1, 1.0), Err(Error::Domain { .. })));
        assert!(cam.pixel_ray(-0.5, 0.0, 0.1, 1.0).is_err());
    }

    #[test]
    fn camera_validation() {
        let mut cam = identity_cam(2.0, 16, 16);
        assert!(cam.validate().is_ok());
        cam.rotation = Mat3([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]]);
        assert!(cam.validate().is_err());
        let mut cam = identity_cam(2.0, 16, 16);
        cam.f = 0.0;
        assert!(cam.validate().is_err());
    }

    #[test]
    fn look_at_is_proper_rotation() {
        for cam in orbit_cameras(Vec3::new(0.1, 0.2, 0.0), 4.0, 0.5, 7, 0.3, 30.0, 32, 24) {
            cam.validate().unwrap();
            let (u, v, z) = cam.world_to_pixel(Vec3::new(0.1, 0.2, 0.0)).unwrap();
            assert!((u - cam.u0).abs() < 1e-9 && (v - cam.v0).abs() < 1e-9);
            assert!((z - 4.0).abs() < 1e-9);
        }
    }

    #[test]
    fn coarse_bin_centers() {
        let ray = Ray::new(Vec3::ZERO, Vec3::new(0.0, 0.0, 1.0), 1e-9, 1.0).unwrap();
        // near must be positive; shift a unit interval to start just above zero.
        let b = sample_coarse(&[ray], 4, None).unwrap();
        let expect = [0.125, 0.375, 0.625, 0.875];
        for (d, e) in b.depths.iter().zip(expect) {
            assert!((d - e).abs() < 1e-8);
        }
        assert!((b.deltas[3] - (1.0 - 1e-9) / 4.0).abs() < 1e-15);
    }

    #[test]
    fn view_angles_of_axes() {
        let ray = Ray::new(Vec3::ZERO, Vec3::new(0.0, 1.0, 0.0), 0.1, 1.0).unwrap();
        let (theta, beta) = ray.view_angles();
        assert!((theta - core::f64::consts::FRAC_PI_2).abs() < 1e-15 && beta == 0.0);
    }
}
