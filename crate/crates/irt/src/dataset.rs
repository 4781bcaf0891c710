//! On-disk dataset: a TOML `scene.manifest`, 8-bit RGB PNG images and
//! single-channel class-id PNG label maps.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use irt_core::cnn::PixelRef;
use irt_core::geometry::{Camera, Mat3, Ray, SceneBox, Vec3};
use irt_core::rng::{self, Rng};
use irt_core::scene::{Rig, SceneOracle};
use irt_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{IrtError, Result};
use crate::raster;

pub const MANIFEST_NAME: &str = "scene.manifest";

/// Rotations closer than this to orthonormal are kept verbatim.
const ROTATION_EXACT: f64 = 1e-9;
/// Rotations within this drift are re-orthonormalized, beyond it rejected.
const ROTATION_DRIFT: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub scene: String,
    pub bounds: Bounds,
    pub classes: Vec<ClassEntry>,
    pub views: Vec<ViewRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    pub near: f64,
    pub far: f64,
    pub min: [f64; 3],
    pub max: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassEntry {
    pub id: u32,
    pub name: String,
    pub rgb: [u8; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Holdout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewRecord {
    pub image: String,
    pub split: Split,
    /// Sparse training label, train views only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    /// Dense ground truth used for evaluation only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_label: Option<String>,
    pub camera: CameraRecord,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRecord {
    pub f: f64,
    pub dx: f64,
    pub dy: f64,
    pub u0: f64,
    pub v0: f64,
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub width: u32,
    pub height: u32,
}

impl From<&Camera> for CameraRecord {
    fn from(c: &Camera) -> Self {
        CameraRecord {
            f: c.f,
            dx: c.dx,
            dy: c.dy,
            u0: c.u0,
            v0: c.v0,
            rotation: c.rotation.0,
            translation: c.translation.0,
            width: c.width as u32,
            height: c.height as u32,
        }
    }
}

impl CameraRecord {
    pub fn camera(&self) -> Camera {
        Camera {
            f: self.f,
            dx: self.dx,
            dy: self.dy,
            u0: self.u0,
            v0: self.v0,
            rotation: Mat3(self.rotation),
            translation: Vec3(self.translation),
            width: self.width as usize,
            height: self.height as usize,
        }
    }
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let m: Manifest = toml::from_str(text).map_err(|e| IrtError::Schema(e.to_string()))?;
        m.validated()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn scene_box(&self) -> SceneBox {
        SceneBox { min: Vec3(self.bounds.min), max: Vec3(self.bounds.max) }
    }

    pub fn views_in(&self, split: Split) -> Vec<usize> {
        (0..self.views.len()).filter(|&i| self.views[i].split == split).collect()
    }

    pub fn labeled_views(&self) -> Vec<usize> {
        (0..self.views.len()).filter(|&i| self.views[i].label.is_some()).collect()
    }

    /// Structural checks that need no image files. Returns the manifest
    /// with slightly drifted rotations re-orthonormalized.
    pub fn validated(mut self) -> Result<Self> {
        let schema = |m: String| Err(IrtError::Schema(m));
        let b = self.bounds;
        if !(b.near > 0.0 && b.far > b.near && b.far.is_finite()) {
            return schema(format!("bounds need 0 < near < far, got near={} far={}", b.near, b.far));
        }
        if !(0..3).all(|i| b.min[i] < b.max[i]) {
            return schema(format!("bounding box min {:?} not below max {:?}", b.min, b.max));
        }
        self.check_palette()?;
        if self.views.is_empty() {
            return schema("no views".into());
        }
        if self.views_in(Split::Train).is_empty() {
            return schema("no train views".into());
        }
        for (i, v) in self.views.iter_mut().enumerate() {
            if v.label.is_some() && v.split != Split::Train {
                return schema(format!("view {i}: training label on a {:?} view", v.split));
            }
            let c = &mut v.camera;
            if c.width == 0 || c.height == 0 {
                return schema(format!("view {i}: empty image size"));
            }
            let r = Mat3(c.rotation);
            let det = r.determinant();
            if !det.is_finite() || det < 0.0 {
                return Err(IrtError::Rotation { view: i, detail: format!("det = {det}") });
            }
            let drift = r.orthonormality_error();
            if drift >= ROTATION_DRIFT {
                return Err(IrtError::Rotation { view: i, detail: format!("|RᵀR - I| = {drift:.3e}") });
            }
            if drift > ROTATION_EXACT {
                c.rotation = r.orthonormalized().0;
            }
            c.camera().validate().map_err(|e| IrtError::Schema(format!("view {i}: {e}")))?;
        }
        Ok(self)
    }

    fn check_palette(&self) -> Result<()> {
        let n = self.classes.len();
        if n == 0 || n > 255 {
            return Err(IrtError::Palette(format!("{n} classes, need 1..=255")));
        }
        let ids: BTreeSet<u32> = self.classes.iter().map(|c| c.id).collect();
        if ids.len() != n {
            return Err(IrtError::Palette("duplicate class id".into()));
        }
        if let Some(gap) = (0..n as u32).find(|i| !ids.contains(i)) {
            return Err(IrtError::Palette(format!("class id {gap} missing; ids must be 0..{n}")));
        }
        if self.classes.iter().enumerate().any(|(i, c)| c.id != i as u32) {
            return Err(IrtError::Palette("classes must be listed in id order".into()));
        }
        Ok(())
    }
}

/// Reads and fully validates `path` (a manifest file or a directory
/// holding one), including image dimensions and label ids.
pub fn load_manifest(path: &Path) -> Result<(Manifest, PathBuf)> {
    let file = manifest_path(path);
    let text = std::fs::read_to_string(&file).map_err(|e| IrtError::io(&file, e))?;
    let m = Manifest::parse(&text)?;
    let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
    for (i, v) in m.views.iter().enumerate() {
        let want = (v.camera.width as usize, v.camera.height as usize);
        let img = root.join(&v.image);
        let got = raster::dimensions(&img)?;
        if got != want {
            return Err(IrtError::Image { path: img, detail: format!("{got:?} but view {i} camera is {want:?}") });
        }
        for label in [&v.label, &v.reference_label].into_iter().flatten() {
            read_label(&root.join(label), want, m.num_classes())?;
        }
    }
    Ok((m, root))
}

pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_NAME)
    } else {
        path.to_path_buf()
    }
}

fn read_label(path: &Path, size: (usize, usize), classes: usize) -> Result<Vec<u8>> {
    let r = raster::read8(path)?;
    if r.channels != 1 {
        return Err(IrtError::Image { path: path.into(), detail: "label maps must be single-channel".into() });
    }
    if (r.width, r.height) != size {
        return Err(IrtError::Image {
            path: path.into(),
            detail: format!("label is {}x{} but image is {}x{}", r.width, r.height, size.0, size.1),
        });
    }
    if let Some(&bad) = r.data.iter().find(|&&id| id as usize >= classes) {
        return Err(IrtError::Palette(format!("{}: class id {bad} not in a {classes}-class palette", path.display())));
    }
    Ok(r.data)
}

/// A manifest with all rasters decoded.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub root: PathBuf,
    pub cameras: Vec<Camera>,
    /// `[H·W·3]` intensities in `[0, 1]`, per view.
    pub images: Vec<Vec<f64>>,
    pub labels: Vec<Option<Vec<u8>>>,
    pub reference_labels: Vec<Option<Vec<u8>>>,
}

impl Dataset {
    pub fn open(path: &Path) -> Result<Self> {
        let (manifest, root) = load_manifest(path)?;
        let mut images = Vec::new();
        let mut labels = Vec::new();
        let mut reference_labels = Vec::new();
        let classes = manifest.num_classes();
        for v in &manifest.views {
            let size = (v.camera.width as usize, v.camera.height as usize);
            let p = root.join(&v.image);
            let r = raster::read8(&p)?;
            if r.channels != 3 {
                return Err(IrtError::Image { path: p, detail: "images must be RGB".into() });
            }
            images.push(raster::dequantize(&r.data));
            let read = |l: &Option<String>| l.as_ref().map(|l| read_label(&root.join(l), size, classes)).transpose();
            labels.push(read(&v.label)?);
            reference_labels.push(read(&v.reference_label)?);
        }
        let cameras = manifest.views.iter().map(|v| v.camera.camera()).collect();
        Ok(Dataset { manifest, root, cameras, images, labels, reference_labels })
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.num_classes()
    }

    pub fn pixel_ray(&self, view: usize, x: usize, y: usize) -> Result<Ray> {
        let b = self.manifest.bounds;
        Ok(self.cameras[view].pixel_ray(x as f64, y as f64, b.near, b.far)?)
    }

    /// Every pixel ray of a view in row-major order.
    pub fn view_rays(&self, view: usize) -> Result<Vec<Ray>> {
        let c = &self.cameras[view];
        let mut rays = Vec::with_capacity(c.width * c.height);
        for y in 0..c.height {
            for x in 0..c.width {
                rays.push(self.pixel_ray(view, x, y)?);
            }
        }
        Ok(rays)
    }

    /// The view image as a `[H, W, 3]` tensor.
    pub fn image_tensor(&self, view: usize) -> Tensor {
        let c = &self.cameras[view];
        Tensor::new(vec![c.height, c.width, 3], self.images[view].clone()).expect("image size checked on load")
    }
}

/// Writes the oracle's renders of `rig` as a dataset under `dir`: train
/// views first, then held-out views. Every view gets a dense reference
/// label; only `rig.labeled` train views get a training label.
pub fn write_dataset(dir: &Path, name: &str, scene: &SceneOracle, rig: &Rig) -> Result<Manifest> {
    let mut views = Vec::new();
    let (mut near, mut far) = (f64::INFINITY, 0.0f64);
    let cams = rig.train.iter().map(|c| (c, Split::Train)).chain(rig.holdout.iter().map(|c| (c, Split::Holdout)));
    for (i, (cam, split)) in cams.enumerate() {
        let (n, f) = scene.near_far(cam);
        near = near.min(n);
        far = far.max(f);
        let view = scene.reference_render(cam);
        let image = format!("images/{i:04}.png");
        raster::write_rgb8(&dir.join(&image), cam.width, cam.height, &raster::quantize(&view.rgb))?;
        let reference = format!("reference/{i:04}.png");
        raster::write_gray8(&dir.join(&reference), cam.width, cam.height, &view.labels)?;
        let label = if split == Split::Train && rig.labeled.contains(&i) {
            let l = format!("labels/{i:04}.png");
            raster::write_gray8(&dir.join(&l), cam.width, cam.height, &view.labels)?;
            Some(l)
        } else {
            None
        };
        views.push(ViewRecord { image, split, label, reference_label: Some(reference), camera: cam.into() });
    }
    let manifest = Manifest {
        scene: name.into(),
        bounds: Bounds { near, far, min: scene.bounds.min.0, max: scene.bounds.max.0 },
        classes: scene
            .classes
            .iter()
            .enumerate()
            .map(|(i, c)| ClassEntry { id: i as u32, name: c.name.clone(), rgb: c.color })
            .collect(),
        views,
    };
    let manifest = manifest.validated()?;
    let path = dir.join(MANIFEST_NAME);
    std::fs::write(&path, manifest.to_toml()).map_err(|e| IrtError::io(&path, e))?;
    Ok(manifest)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleStage {
    /// Any pixel of any train view.
    Color,
    /// Pixels of labeled views only.
    Seg,
}

/// One ray batch. `pixels[i].image` is the source view id.
#[derive(Debug, Clone, PartialEq)]
pub struct RayBatch {
    pub rays: Vec<Ray>,
    pub pixels: Vec<PixelRef>,
    /// `[B·3]`, filled in the color stage.
    pub rgb: Vec<f64>,
    /// `[B]`, filled in the seg stage.
    pub labels: Vec<u8>,
}

/// Draws i.i.d. uniform pixels from the views of one stage.
#[derive(Debug, Clone)]
pub struct RaySampler<'a> {
    data: &'a Dataset,
    stage: SampleStage,
    batch: usize,
    views: Vec<usize>,
    /// Cumulative pixel counts over `views`.
    ends: Vec<usize>,
}

impl<'a> RaySampler<'a> {
    pub fn new(data: &'a Dataset, stage: SampleStage, batch: usize) -> Result<Self> {
        if batch == 0 {
            return Err(IrtError::Config("batch must be at least 1".into()));
        }
        let views = match stage {
            SampleStage::Color => data.manifest.views_in(Split::Train),
            SampleStage::Seg => data.manifest.labeled_views(),
        };
        if views.is_empty() {
            return Err(IrtError::Config(format!("{stage:?} stage has no views to sample (M = 0)")));
        }
        let mut ends = Vec::with_capacity(views.len());
        let mut total = 0;
        for &v in &views {
            total += data.cameras[v].width * data.cameras[v].height;
            ends.push(total);
        }
        Ok(Self { data, stage, batch, views, ends })
    }

    pub fn views(&self) -> &[usize] {
        &self.views
    }

    pub fn pixel_count(&self) -> usize {
        *self.ends.last().unwrap()
    }

    /// Maps a flat index over the stage's pixels to a pixel.
    pub fn pixel(&self, flat: usize) -> PixelRef {
        let slot = self.ends.partition_point(|&e| e <= flat);
        let start = if slot == 0 { 0 } else { self.ends[slot - 1] };
        let view = self.views[slot];
        let w = self.data.cameras[view].width;
        let local = flat - start;
        PixelRef { image: view, x: local % w, y: local / w }
    }

    pub fn next_batch(&self, rng: &mut Rng) -> Result<RayBatch> {
        let n = self.pixel_count();
        let pixels: Vec<PixelRef> = (0..self.batch).map(|_| self.pixel(rng::index(rng, n))).collect();
        self.batch_for(pixels)
    }

    /// Rays and targets for explicit pixels.
    pub fn batch_for(&self, pixels: Vec<PixelRef>) -> Result<RayBatch> {
        let mut out = RayBatch { rays: Vec::with_capacity(pixels.len()), pixels: vec![], rgb: vec![], labels: vec![] };
        for px in &pixels {
            out.rays.push(self.data.pixel_ray(px.image, px.x, px.y)?);
            let at = px.y * self.data.cameras[px.image].width + px.x;
            match self.stage {
                SampleStage::Color => out.rgb.extend_from_slice(&self.data.images[px.image][at * 3..at * 3 + 3]),
                SampleStage::Seg => {
                    let l = self.data.labels[px.image].as_ref().expect("seg views are labeled");
                    out.labels.push(l[at]);
                }
            }
        }
        out.pixels = pixels;
        Ok(out)
    }
}
