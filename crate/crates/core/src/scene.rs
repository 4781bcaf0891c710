//! Analytic oracle scenes built from constant-density boxes and spheres.
//!
//! Along any ray the density is piecewise constant, so transmittance and
//! the rendered color have closed forms. These renders are the reference
//! the discretized renderer and the learned fields are checked against.

use alloc::{string::String, vec, vec::Vec};

use crate::geometry::{orbit_cameras, Camera, Mat3, Ray, SceneBox, Vec3};
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    /// Box with the given half extents, rotated by the primitive's yaw.
    Cuboid { half: Vec3 },
    Sphere { radius: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub center: Vec3,
    /// Rotation about the world z axis, radians.
    pub yaw: f64,
    pub rgb: [f64; 3],
    pub class: u8,
    pub density: f64,
}

impl Primitive {
    fn to_local(&self, p: Vec3) -> Vec3 {
        Mat3::rotation_z(-self.yaw).mul_vec(p - self.center)
    }

    pub fn contains(&self, p: Vec3) -> bool {
        match self.shape {
            Shape::Cuboid { half } => {
                let q = self.to_local(p);
                (0..3).all(|i| q.0[i].abs() <= half.0[i])
            }
            Shape::Sphere { radius } => (p - self.center).norm() <= radius,
        }
    }

    /// Entry and exit distances of the infinite line `o + t d`, if it hits.
    pub fn intersect(&self, ray: &Ray) -> Option<(f64, f64)> {
        match self.shape {
            Shape::Cuboid { half } => {
                let rot = Mat3::rotation_z(-self.yaw);
                let o = rot.mul_vec(ray.origin - self.center);
                let d = rot.mul_vec(ray.direction);
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                for i in 0..3 {
                    if d.0[i].abs() < 1e-300 {
                        if o.0[i].abs() > half.0[i] {
                            return None;
                        }
                        continue;
                    }
                    let a = (-half.0[i] - o.0[i]) / d.0[i];
                    let b = (half.0[i] - o.0[i]) / d.0[i];
                    t0 = t0.max(a.min(b));
                    t1 = t1.min(a.max(b));
                }
                (t0 < t1).then_some((t0, t1))
            }
            Shape::Sphere { radius } => {
                let oc = ray.origin - self.center;
                let b = oc.dot(ray.direction);
                let c = oc.dot(oc) - radius * radius;
                let disc = b * b - c;
                if disc <= 0.0 {
                    return None;
                }
                let s = math::sqrt(disc);
                Some((-b - s, -b + s))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassInfo {
    pub name: String,
    /// Display color of the class in label visualizations.
    pub color: [u8; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneOracle {
    pub primitives: Vec<Primitive>,
    pub background_class: u8,
    pub background_rgb: [f64; 3],
    pub bounds: SceneBox,
    pub classes: Vec<ClassInfo>,
}

/// Density, color and class at a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointSample {
    pub sigma: f64,
    pub rgb: [f64; 3],
    pub class: u8,
}

/// Closed-form render of one view.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceView {
    pub width: usize,
    pub height: usize,
    /// `[H·W·3]` in `[0, 1]`.
    pub rgb: Vec<f64>,
    /// `[H·W]` class ids.
    pub labels: Vec<u8>,
    /// `[H·W]` expected termination distance, 0 for background.
    pub depth: Vec<f64>,
}

/// Total opacity below which a pixel is labeled background.
pub const BACKGROUND_OPACITY: f64 = 0.5;

/// Radiance reaching the camera along one ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayResult {
    pub rgb: [f64; 3],
    pub class: u8,
    pub depth: f64,
    pub opacity: f64,
    /// Distance at which the ray first enters matter.
    pub hit: Option<f64>,
}

impl SceneOracle {
    /// First-listed primitive containing `p`.
    pub fn owner(&self, p: Vec3) -> Option<usize> {
        self.primitives.iter().position(|q| q.contains(p))
    }

    pub fn query(&self, p: Vec3) -> PointSample {
        match self.owner(p) {
            Some(i) => {
                let q = &self.primitives[i];
                PointSample { sigma: q.density, rgb: q.rgb, class: q.class }
            }
            None => PointSample { sigma: 0.0, rgb: self.background_rgb, class: self.background_class },
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Exact transport along `ray` (its near/far bounds are ignored; the
    /// whole half-line `t ≥ 0` is integrated).
    pub fn trace(&self, ray: &Ray) -> RayResult {
        let mut cuts: Vec<f64> = vec![0.0];
        for p in &self.primitives {
            if let Some((a, b)) = p.intersect(ray) {
                if b > 0.0 {
                    cuts.push(a.max(0.0));
                    cuts.push(b);
                }
            }
        }
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();

        let mut transmittance = 1.0;
        let mut rgb = [0.0; 3];
        let mut depth_acc = 0.0;
        // (owner, accumulated weight) of maximal runs of one owner
        let mut runs: Vec<(usize, f64)> = Vec::new();
        let mut hit = None;
        for w in cuts.windows(2) {
            let (a, b) = (w[0], w[1]);
            let len = b - a;
            if len <= 0.0 {
                continue;
            }
            let Some(owner) = self.owner(ray.at(0.5 * (a + b))) else { continue };
            let prim = &self.primitives[owner];
            hit.get_or_insert(a);
            let tau = prim.density * len;
            let alpha = -libm::expm1(-tau);
            let weight = transmittance * alpha;
            for c in 0..3 {
                rgb[c] += weight * prim.rgb[c];
            }
            let mean_t = if tau > 1e-9 { a + 1.0 / prim.density - len * math::exp(-tau) / alpha } else { 0.5 * (a + b) };
            depth_acc += weight * mean_t;
            match runs.last_mut() {
                Some((o, acc)) if *o == owner => *acc += weight,
                _ => runs.push((owner, weight)),
            }
            transmittance *= math::exp(-tau);
        }
        for c in 0..3 {
            rgb[c] += transmittance * self.background_rgb[c];
        }
        let opacity = 1.0 - transmittance;
        let class = if opacity < BACKGROUND_OPACITY {
            self.background_class
        } else {
            let mut best = runs[0];
            for &r in &runs[1..] {
                if r.1 > best.1 {
                    best = r;
                }
            }
            self.primitives[best.0].class
        };
        let depth = if opacity > 0.0 && class != self.background_class { depth_acc / opacity } else { 0.0 };
        RayResult { rgb, class, depth, opacity, hit }
    }

    /// Closed-form color, label and depth images for `cam`.
    pub fn reference_render(&self, cam: &Camera) -> ReferenceView {
        let (w, h) = (cam.width, cam.height);
        let mut view = ReferenceView {
            width: w,
            height: h,
            rgb: Vec::with_capacity(w * h * 3),
            labels: Vec::with_capacity(w * h),
            depth: Vec::with_capacity(w * h),
        };
        for y in 0..h {
            for x in 0..w {
                let ray = cam.pixel_ray(x as f64, y as f64, 1e-6, f64::MAX).expect("pixel in bounds");
                let r = self.trace(&ray);
                view.rgb.extend_from_slice(&r.rgb);
                view.labels.push(r.class);
                view.depth.push(r.depth);
            }
        }
        view
    }

    /// Numerical render of one view: `samples` stratified bin-center points
    /// per ray between the camera's near and far bounds, composited with
    /// the same weights as the learned renderer. Returns `[H·W·3]` colors.
    pub fn discretized_render(&self, cam: &Camera, samples: usize) -> crate::Result<Vec<f64>> {
        let (near, far) = self.near_far(cam);
        let mut out = Vec::with_capacity(cam.width * cam.height * 3);
        let mut sigma = vec![0.0; samples];
        let mut weights = vec![0.0; samples];
        let mut colors = vec![[0.0; 3]; samples];
        for y in 0..cam.height {
            for x in 0..cam.width {
                let ray = cam.pixel_ray(x as f64, y as f64, near, far)?;
                let batch = crate::geometry::sample_coarse(&[ray], samples, None)?;
                for (i, p) in batch.positions.chunks_exact(3).enumerate() {
                    let q = self.query(Vec3([p[0], p[1], p[2]]));
                    sigma[i] = q.sigma;
                    colors[i] = q.rgb;
                }
                let residual = crate::compositing::ray_weights(&sigma, &batch.deltas, &mut weights);
                for c in 0..3 {
                    let lit: f64 = weights.iter().zip(&colors).map(|(w, col)| w * col[c]).sum();
                    out.push(lit + residual * self.background_rgb[c]);
                }
            }
        }
        Ok(out)
    }

    /// Near/far distances for a camera: distance to the scene center minus
    /// and plus the bounding-sphere radius enlarged by 10 %.
    pub fn near_far(&self, cam: &Camera) -> (f64, f64) {
        let dist = (cam.center() - self.bounds.center()).norm();
        let r = 1.1 * self.bounds.bounding_radius();
        ((dist - r).max(1e-3), dist + r)
    }
}

/// Camera layout and labeling of a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Rig {
    pub train: Vec<Camera>,
    pub holdout: Vec<Camera>,
    /// Indices into `train` of views that carry labels.
    pub labeled: Vec<usize>,
}

pub const MICRO_TOWN_CLASSES: [&str; 5] = ["background", "road", "building", "tree", "vehicle"];

/// Small procedural town: a road slab, three buildings, a tree and a car.
pub fn micro_town() -> SceneOracle {
    let density = 8.0;
    let cuboid = |center: [f64; 3], half: [f64; 3], yaw: f64, rgb: [f64; 3], class: u8| Primitive {
        shape: Shape::Cuboid { half: Vec3(half) },
        center: Vec3(center),
        yaw,
        rgb,
        class,
        density,
    };
    let primitives = vec![
        // vehicle first: it sits on the road and wins the overlap
        cuboid([0.05, 0.0, 0.09], [0.24, 0.12, 0.09], 0.5, [0.85, 0.12, 0.1], 4),
        cuboid([-0.5, -0.45, 0.32], [0.26, 0.2, 0.32], 0.2, [0.82, 0.52, 0.3], 2),
        // flat roof with a road-like color
        cuboid([0.5, -0.4, 0.16], [0.22, 0.3, 0.16], -0.3, [0.4, 0.4, 0.44], 2),
        cuboid([0.45, 0.5, 0.36], [0.22, 0.22, 0.36], 0.0, [0.86, 0.78, 0.52], 2),
        Primitive {
            shape: Shape::Sphere { radius: 0.3 },
            center: Vec3([-0.45, 0.45, 0.3]),
            yaw: 0.0,
            rgb: [0.15, 0.6, 0.2],
            class: 3,
            density,
        },
        cuboid([0.0, 0.0, -0.15], [1.0, 1.0, 0.15], 0.0, [0.34, 0.35, 0.38], 1),
    ];
    let colors = [[0, 0, 0], [128, 64, 128], [70, 70, 70], [107, 142, 35], [0, 0, 142]];
    SceneOracle {
        primitives,
        background_class: 0,
        background_rgb: [0.0; 3],
        bounds: SceneBox { min: Vec3([-1.2, -1.2, -0.4]), max: Vec3([1.2, 1.2, 0.9]) },
        classes: MICRO_TOWN_CLASSES
            .iter()
            .zip(colors)
            .map(|(n, c)| ClassInfo { name: (*n).into(), color: c })
            .collect(),
    }
}

/// Default image size of the micro-town rig.
pub const MICRO_TOWN_SIZE: usize = 64;

/// Eight training cameras on a 30° orbit, four held-out cameras between
/// them, and two opposite training views labeled.
pub fn micro_town_rig(scene: &SceneOracle, size: usize) -> Rig {
    let target = scene.bounds.center();
    let distance = 4.0;
    let elevation = 30f64.to_radians();
    // field of view covering roughly ±1.6 units at the target
    let f = (size as f64) / 2.0 / 0.4;
    let train = orbit_cameras(target, distance, elevation, 8, 0.0, f, size, size);
    let holdout = orbit_cameras(target, distance, elevation, 4, core::f64::consts::PI / 8.0, f, size, size);
    Rig { train, holdout, labeled: vec![0, 4] }
}
