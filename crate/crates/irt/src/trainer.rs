//! Two-stage training, full-frame rendering and held-out evaluation.
//!
//! Every step draws its rays and jitter from RNG streams keyed on
//! `(seed, step, worker)`, so a run resumed from a checkpoint replays the
//! same steps as an uninterrupted one.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use irt_core::cnn::{stack_images, PixelRef, TextureCnn};
use irt_core::field::RadianceField;
use irt_core::geometry::{Camera, Ray};
use irt_core::metrics::{miou, psnr, ConfusionMatrix};
use irt_core::optim::Adam;
use irt_core::params::{Gradients, ParamStore};
use irt_core::pipeline::{
    argmax_rows, color_step, render_rays, segment_view, select_points, seg_step, SamplingConfig, SegModel, SelectedPoints,
};
use irt_core::rng;
use irt_core::transformer::{one_hot, RayTransformer, Variant};
use irt_core::Tensor;

use crate::checkpoint::{self, Checkpoint, Kind, Meta};
use crate::config::TrainConfig;
use crate::dataset::{Dataset, RayBatch, RaySampler, SampleStage, Split};
use crate::error::{IrtError, Result};

/// Parameters of the radiance field, frozen during stage 2.
pub const FIELD_PREFIX: &str = "field/";

const INIT_STREAM: u64 = 0;
const COLOR_TAG: u64 = 1;
const SEG_TAG: u64 = 2;
const SEG_INIT_STREAM: u64 = 3;

fn step_stream(tag: u64, step: u64, worker: u64) -> u64 {
    (tag << 56) | (step << 8) | worker
}

pub fn color_dir(out: &Path) -> PathBuf {
    out.join("color")
}

pub fn seg_dir(out: &Path, variant: Variant) -> PathBuf {
    out.join(format!("seg-{variant}"))
}

pub fn final_path(stage_dir: &Path) -> PathBuf {
    stage_dir.join("final.ckpt")
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from the newest periodic checkpoint, if one exists.
    pub resume: bool,
    /// Suppress progress lines on stderr.
    pub quiet: bool,
}

/// Final checkpoint plus the training curve of this invocation.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub checkpoint: Checkpoint,
    /// `(step, loss)` for every step run.
    pub losses: Vec<(u64, f64)>,
    /// `(step, metric)` at each held-out evaluation: PSNR for stage 1,
    /// mIoU for stage 2.
    pub evals: Vec<(u64, f64)>,
}

struct ProgressLog {
    file: File,
    path: PathBuf,
}

impl ProgressLog {
    fn open(stage_dir: &Path, append: bool) -> Result<Self> {
        std::fs::create_dir_all(stage_dir).map_err(|e| IrtError::io(stage_dir, e))?;
        let path = stage_dir.join("progress.log");
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(&path)
            .map_err(|e| IrtError::io(&path, e))?;
        Ok(Self { file, path })
    }

    fn line(&mut self, step: u64, loss: f64, metric: Option<f64>) -> Result<()> {
        let m = metric.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
        writeln!(self.file, "{step} {loss:.9e} {m}").map_err(|e| IrtError::io(&self.path, e))
    }
}

fn describe_rays(batch: &RayBatch) -> String {
    let shown: Vec<String> = batch.pixels.iter().take(6).map(|p| format!("v{}({},{})", p.image, p.x, p.y)).collect();
    let more = batch.pixels.len().saturating_sub(6);
    if more > 0 {
        format!("{} and {more} more", shown.join(" "))
    } else {
        shown.join(" ")
    }
}

fn numeric(step: u64, batch: &RayBatch, e: irt_core::Error) -> IrtError {
    match e {
        irt_core::Error::NonFinite { .. } => IrtError::Numeric { step, rays: describe_rays(batch), source: e },
        other => IrtError::Core(other),
    }
}

/// Runs `work` on `workers` contiguous slices of `0..n` and sums the
/// gradients in worker order.
fn parallel_grads<F>(n: usize, workers: usize, store: &ParamStore, work: F) -> irt_core::Result<(f64, Gradients)>
where
    F: Fn(usize, std::ops::Range<usize>) -> irt_core::Result<(f64, Gradients)> + Sync,
{
    let workers = workers.clamp(1, n.max(1));
    if workers == 1 {
        return work(0, 0..n);
    }
    let ranges: Vec<_> = (0..workers).map(|w| w * n / workers..(w + 1) * n / workers).collect();
    let results: Vec<_> = std::thread::scope(|s| {
        let handles: Vec<_> = ranges.iter().enumerate().map(|(w, r)| s.spawn({
            let work = &work;
            let r = r.clone();
            move || work(w, r)
        })).collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut total = Gradients::zeros_like(store);
    let mut loss = 0.0;
    for r in results {
        let (l, g) = r?;
        loss += l;
        total.accumulate(&g);
    }
    Ok((loss, total))
}

fn meta(kind: Kind, step: u64, variant: Option<Variant>, data: &Dataset, config: &TrainConfig) -> Meta {
    let b = data.manifest.bounds;
    Meta {
        kind,
        step,
        variant: variant.map(|v| v.name().to_string()),
        classes: data.num_classes(),
        scene_min: b.min,
        scene_max: b.max,
        config: config.clone(),
    }
}

fn check_scene(ckpt: &Checkpoint, data: &Dataset, path: &Path) -> Result<()> {
    let b = data.manifest.bounds;
    if ckpt.meta.scene_min != b.min || ckpt.meta.scene_max != b.max || ckpt.meta.classes != data.num_classes() {
        return Err(IrtError::Checkpoint {
            path: path.into(),
            detail: "checkpoint was trained on a different scene (bounds or class count differ)".into(),
        });
    }
    Ok(())
}

/// Newest periodic checkpoint of a stage directory, when resuming.
fn resume_point(stage_dir: &Path, options: &TrainOptions, iterations: u64) -> Result<Option<Checkpoint>> {
    if !options.resume {
        return Ok(None);
    }
    match checkpoint::latest(stage_dir) {
        Some((step, path)) if step <= iterations => Ok(Some(Checkpoint::load(&path)?)),
        _ => Ok(None),
    }
}

/// Stage 1: fits the radiance field to all train views.
pub fn train_color(data: &Dataset, config: &TrainConfig, out: &Path, options: &TrainOptions) -> Result<Outcome> {
    config.validate()?;
    let dir = color_dir(out);
    let stage = &config.color;
    let field = RadianceField::new(config.field_config(data.manifest.scene_box()));
    let sampling = config.sampling();

    let (mut store, mut adam, start) = match resume_point(&dir, options, stage.iterations)? {
        Some(ck) => {
            let mut adam = Adam::new(stage.adam(), &ck.store);
            if let Some(o) = &ck.optim {
                o.restore(&mut adam);
            }
            (ck.store, adam, ck.meta.step)
        }
        None => {
            let mut store = ParamStore::new();
            field.init(&mut store, &mut rng::stream(config.seed, INIT_STREAM));
            let adam = Adam::new(stage.adam(), &store);
            (store, adam, 0)
        }
    };
    let mut log = ProgressLog::open(&dir, start > 0)?;
    let sampler = RaySampler::new(data, SampleStage::Color, stage.batch)?;
    let eval_views: Vec<usize> = data.manifest.views_in(Split::Holdout).into_iter().take(stage.eval_views).collect();
    let mut outcome = Outcome { checkpoint: Checkpoint { meta: meta(Kind::Color, 0, None, data, config), store: ParamStore::new(), optim: None }, losses: vec![], evals: vec![] };

    for step in start..stage.iterations {
        let batch = sampler.next_batch(&mut rng::stream(config.seed, step_stream(COLOR_TAG, step, 0)))?;
        let (loss, grads) = parallel_grads(batch.rays.len(), config.workers, &store, |w, r| {
            let mut jitter = rng::stream(config.seed, step_stream(COLOR_TAG, step, w as u64 + 1));
            let s = color_step(&field, &store, &batch.rays[r.clone()], &batch.rgb[r.start * 3..r.end * 3], sampling, &mut jitter)?;
            Ok((s.loss(), s.grads))
        })
        .map_err(|e| numeric(step, &batch, e))?;
        if !grads.all_finite() {
            return Err(numeric(step, &batch, irt_core::Error::NonFinite { net: "gradients", layer: 0 }));
        }
        adam.update(&mut store, &grads);
        let done = step + 1;
        outcome.losses.push((done, loss));

        let metric = if stage.eval_every > 0 && done % stage.eval_every == 0 && !eval_views.is_empty() {
            let p = heldout_psnr(&field, &store, sampling, config.render_chunk, data, &eval_views)?;
            outcome.evals.push((done, p));
            Some(p)
        } else {
            None
        };
        log.line(done, loss, metric)?;
        if !options.quiet && (stage.log_every > 0 && done % stage.log_every == 0 || metric.is_some()) {
            eprintln!("[color] step {done}/{} loss {loss:.5}{}", stage.iterations, metric.map_or(String::new(), |p| format!(" psnr {p:.2} dB")));
        }
        if stage.checkpoint_every > 0 && done % stage.checkpoint_every == 0 {
            let ck = Checkpoint { meta: meta(Kind::Color, done, None, data, config), store: store.clone(), optim: Some((&adam).into()) };
            ck.save(&checkpoint::step_path(&dir, done))?;
        }
    }
    let step = stage.iterations.max(start);
    outcome.checkpoint = Checkpoint { meta: meta(Kind::Color, step, None, data, config), store, optim: Some((&adam).into()) };
    outcome.checkpoint.save(&final_path(&dir))?;
    Ok(outcome)
}

/// Mean per-view PSNR of deterministic renders against the view images.
pub fn heldout_psnr(
    field: &RadianceField,
    store: &ParamStore,
    sampling: SamplingConfig,
    chunk: usize,
    data: &Dataset,
    views: &[usize],
) -> Result<f64> {
    let mut total = 0.0;
    for &v in views {
        let r = render_rays(field, store, &data.view_rays(v)?, sampling, chunk)?;
        total += psnr(&r.rgb, &data.images[v])?;
    }
    Ok(total / views.len() as f64)
}

fn seg_model(config: &TrainConfig, variant: Variant, classes: usize) -> Result<SegModel> {
    let t = RayTransformer::new(config.transformer_config(variant, classes)?)?;
    let cnn = if variant.uses_cnn() { Some(TextureCnn::new(config.cnn_config(classes))?) } else { None };
    Ok(SegModel::new(t, cnn)?)
}

fn load_color(path: &Path, data: &Dataset) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path).map_err(|e| match e {
        IrtError::MissingFile { path } => IrtError::Checkpoint {
            detail: "color checkpoint not found; run train-color first".into(),
            path,
        },
        other => other,
    })?;
    if ck.meta.kind != Kind::Color {
        return Err(IrtError::Checkpoint { path: path.into(), detail: "expected a color checkpoint".into() });
    }
    check_scene(&ck, data, path)?;
    Ok(ck)
}

/// Stage 2: trains the segmentation networks for `variant` on the labeled
/// views, on top of the frozen field from `color_ckpt`.
pub fn train_seg(
    data: &Dataset,
    color_ckpt: &Path,
    config: &TrainConfig,
    variant: Variant,
    out: &Path,
    options: &TrainOptions,
) -> Result<Outcome> {
    let color = load_color(color_ckpt, data)?;
    // the field shape and sampling are fixed by stage 1
    let mut config = config.clone();
    config.field = color.meta.config.field.clone();
    config.sampling = color.meta.config.sampling.clone();
    config.variant = variant.name().into();
    config.validate()?;
    let stage = &config.seg;
    let dir = seg_dir(out, variant);
    let field = RadianceField::new(config.field_config(data.manifest.scene_box()));
    let sampling = config.sampling();
    let classes = data.num_classes();
    let model = seg_model(&config, variant, classes)?;

    let (mut store, mut adam, start) = match resume_point(&dir, options, stage.iterations)? {
        Some(ck) => {
            let mut adam = Adam::new(stage.adam(), &ck.store);
            if let Some(o) = &ck.optim {
                o.restore(&mut adam);
            }
            (ck.store, adam, ck.meta.step)
        }
        None => {
            let mut store = color.store.clone();
            let mut seg = ParamStore::new();
            model.init(&mut seg, &mut rng::stream(config.seed, SEG_INIT_STREAM));
            store.extend(seg);
            let adam = Adam::new(stage.adam(), &store);
            (store, adam, 0)
        }
    };
    store.set_frozen(FIELD_PREFIX, true);
    let frozen_print = color.store.fingerprint(FIELD_PREFIX);
    if store.fingerprint(FIELD_PREFIX) != frozen_print {
        return Err(IrtError::Checkpoint { path: color_ckpt.into(), detail: "resumed run holds a different field".into() });
    }

    let sampler = RaySampler::new(data, SampleStage::Seg, stage.batch)?;
    // selected points of every labeled pixel, computed once
    let mut offsets = std::collections::BTreeMap::new();
    let mut points: Option<SelectedPoints> = None;
    for &v in sampler.views() {
        let sel = select_points(&field, &store, &data.view_rays(v)?, sampling, config.transformer.k, config.render_chunk)?;
        let base = points.as_ref().map_or(0, |p| p.rays());
        offsets.insert(v, base);
        match &mut points {
            Some(p) => p.append(sel),
            None => points = Some(sel),
        }
    }
    let points = points.expect("seg stage has labeled views");
    let eval_views: Vec<usize> = data.manifest.views_in(Split::Holdout).into_iter().take(stage.eval_views).collect();
    let mut eval_cache: Vec<HeldoutInputs> = Vec::new();

    let mut log = ProgressLog::open(&dir, start > 0)?;
    let mut outcome = Outcome { checkpoint: Checkpoint { meta: meta(Kind::Seg, 0, Some(variant), data, &config), store: ParamStore::new(), optim: None }, losses: vec![], evals: vec![] };
    for step in start..stage.iterations {
        let batch = sampler.next_batch(&mut rng::stream(config.seed, step_stream(SEG_TAG, step, 0)))?;
        let (loss, grads) = parallel_grads(batch.rays.len(), config.workers, &store, |_, r| {
            let pixels = &batch.pixels[r.clone()];
            let rows: Vec<usize> =
                pixels.iter().map(|p| offsets[&p.image] + p.y * data.cameras[p.image].width + p.x).collect();
            let sub = points.subset(&rows);
            let targets = one_hot(&batch.labels[r], classes);
            let (images, local) = batch_images(data, pixels, model.cnn.is_some())?;
            let s = seg_step(&model, &store, &sub, images.as_ref(), &local, &targets)?;
            Ok((s.loss, s.grads))
        })
        .map_err(|e| numeric(step, &batch, e))?;
        if !grads.all_finite() {
            return Err(numeric(step, &batch, irt_core::Error::NonFinite { net: "gradients", layer: 0 }));
        }
        adam.update(&mut store, &grads);
        let done = step + 1;
        outcome.losses.push((done, loss));

        let metric = if stage.eval_every > 0 && done % stage.eval_every == 0 && !eval_views.is_empty() {
            if eval_cache.is_empty() {
                for &v in &eval_views {
                    eval_cache.push(HeldoutInputs::new(&field, &store, &config, data, v, model.cnn.is_some())?);
                }
            }
            let mut cm = ConfusionMatrix::new(classes);
            for h in &eval_cache {
                let logits = segment_view(&model, &store, &h.points, h.image.as_ref(), config.render_chunk)?;
                cm.add_all(&h.truth, &argmax_rows(&logits, classes))?;
            }
            let m = miou(&cm)?.0;
            outcome.evals.push((done, m));
            Some(m)
        } else {
            None
        };
        log.line(done, loss, metric)?;
        if !options.quiet && (stage.log_every > 0 && done % stage.log_every == 0 || metric.is_some()) {
            eprintln!("[seg {variant}] step {done}/{} loss {loss:.5}{}", stage.iterations, metric.map_or(String::new(), |m| format!(" miou {m:.4}")));
        }
        if stage.checkpoint_every > 0 && done % stage.checkpoint_every == 0 {
            let ck = Checkpoint { meta: meta(Kind::Seg, done, Some(variant), data, &config), store: store.clone(), optim: Some((&adam).into()) };
            ck.save(&checkpoint::step_path(&dir, done))?;
        }
    }
    if store.fingerprint(FIELD_PREFIX) != frozen_print {
        return Err(IrtError::Capability("field parameters changed during stage 2".into()));
    }
    let step = stage.iterations.max(start);
    outcome.checkpoint = Checkpoint { meta: meta(Kind::Seg, step, Some(variant), data, &config), store, optim: Some((&adam).into()) };
    outcome.checkpoint.save(&final_path(&dir))?;
    Ok(outcome)
}

/// Stacks the images of the views referenced by `pixels` (in first-use
/// order) and rewrites the pixel references to index that stack.
fn batch_images(data: &Dataset, pixels: &[PixelRef], want: bool) -> irt_core::Result<(Option<Tensor>, Vec<PixelRef>)> {
    if !want {
        return Ok((None, pixels.to_vec()));
    }
    let mut views: Vec<usize> = Vec::new();
    let mut local = Vec::with_capacity(pixels.len());
    for p in pixels {
        let slot = match views.iter().position(|&v| v == p.image) {
            Some(s) => s,
            None => {
                views.push(p.image);
                views.len() - 1
            }
        };
        local.push(PixelRef { image: slot, ..*p });
    }
    let tensors: Vec<Tensor> = views.iter().map(|&v| data.image_tensor(v)).collect();
    let refs: Vec<&Tensor> = tensors.iter().collect();
    Ok((Some(stack_images(&refs)?), local))
}

/// Per-view inputs for held-out segmentation: selected points, the view's
/// photo as CNN input, and the dense reference labels.
struct HeldoutInputs {
    points: SelectedPoints,
    image: Option<Tensor>,
    truth: Vec<u8>,
}

impl HeldoutInputs {
    fn new(field: &RadianceField, store: &ParamStore, config: &TrainConfig, data: &Dataset, view: usize, cnn: bool) -> Result<Self> {
        let rays = data.view_rays(view)?;
        let points = select_points(field, store, &rays, config.sampling(), config.transformer.k, config.render_chunk)?;
        let image = cnn.then(|| data.image_tensor(view));
        let truth = data.reference_labels[view]
            .clone()
            .ok_or_else(|| IrtError::Schema(format!("view {view} has no reference label to evaluate against")))?;
        Ok(Self { points, image, truth })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RenderMode {
    Rgb,
    Semantic,
    Depth,
}

/// Output of one rendered view. Fields not produced by the mode are empty.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Rendered {
    pub width: usize,
    pub height: usize,
    /// `[H·W·3]`
    pub rgb: Vec<f64>,
    /// `[H·W]` expected ray termination depth.
    pub depth: Vec<f64>,
    /// `[H·W]` argmax class ids.
    pub labels: Vec<u8>,
    /// `[H·W·classes]`
    pub logits: Vec<f64>,
}

/// A checkpoint prepared for deterministic inference.
pub struct Renderer {
    pub field: RadianceField,
    pub store: ParamStore,
    pub sampling: SamplingConfig,
    pub chunk: usize,
    pub k: usize,
    pub seg: Option<SegModel>,
    pub classes: usize,
    pub variant: Option<Variant>,
}

impl Renderer {
    pub fn new(ck: &Checkpoint) -> Result<Self> {
        let c = &ck.meta.config;
        let b = &ck.meta;
        let scene_box = irt_core::geometry::SceneBox { min: irt_core::geometry::Vec3(b.scene_min), max: irt_core::geometry::Vec3(b.scene_max) };
        let (seg, variant) = match (ck.meta.kind, &ck.meta.variant) {
            (Kind::Seg, Some(v)) => {
                let v: Variant = v.parse()?;
                (Some(seg_model(c, v, ck.meta.classes)?), Some(v))
            }
            (Kind::Seg, None) => return Err(IrtError::Checkpoint { path: PathBuf::new(), detail: "seg checkpoint without a variant".into() }),
            (Kind::Color, _) => (None, None),
        };
        Ok(Renderer {
            field: RadianceField::new(c.field_config(scene_box)),
            store: ck.store.clone(),
            sampling: c.sampling(),
            chunk: c.render_chunk,
            k: c.transformer.k,
            seg,
            classes: ck.meta.classes,
            variant,
        })
    }

    fn rays(cam: &Camera, near: f64, far: f64) -> Result<Vec<Ray>> {
        let mut rays = Vec::with_capacity(cam.width * cam.height);
        for y in 0..cam.height {
            for x in 0..cam.width {
                rays.push(cam.pixel_ray(x as f64, y as f64, near, far)?);
            }
        }
        Ok(rays)
    }

    pub fn render(&self, cam: &Camera, near: f64, far: f64, mode: RenderMode) -> Result<Rendered> {
        self.render_view(cam, near, far, mode, None)
    }

    /// Like [`Renderer::render`], with `photo` (`[H, W, 3]`) as the CNN input
    /// for semantic mode. Without one the CNN sees the stage-1 color render.
    pub fn render_view(&self, cam: &Camera, near: f64, far: f64, mode: RenderMode, photo: Option<&Tensor>) -> Result<Rendered> {
        let rays = Self::rays(cam, near, far)?;
        let mut out = Rendered { width: cam.width, height: cam.height, ..Default::default() };
        match mode {
            RenderMode::Rgb | RenderMode::Depth => {
                let r = render_rays(&self.field, &self.store, &rays, self.sampling, self.chunk)?;
                if mode == RenderMode::Rgb {
                    out.rgb = r.rgb;
                } else {
                    out.depth = r.depth;
                }
            }
            RenderMode::Semantic => {
                let Some(model) = &self.seg else {
                    return Err(IrtError::Capability("semantic rendering needs a stage-2 checkpoint; this one is color-only".into()));
                };
                let points = select_points(&self.field, &self.store, &rays, self.sampling, self.k, self.chunk)?;
                let image = if model.cnn.is_none() {
                    None
                } else if let Some(p) = photo {
                    Some(p.clone())
                } else {
                    let rgb = render_rays(&self.field, &self.store, &rays, self.sampling, self.chunk)?.rgb;
                    Some(Tensor::new(vec![cam.height, cam.width, 3], rgb)?)
                };
                out.logits = segment_view(model, &self.store, &points, image.as_ref(), self.chunk)?;
                out.labels = argmax_rows(&out.logits, self.classes);
            }
        }
        Ok(out)
    }
}

/// Semantic confusion of a seg checkpoint over `views` against their
/// reference labels.
pub fn evaluate_semantic(renderer: &Renderer, data: &Dataset, views: &[usize]) -> Result<ConfusionMatrix> {
    let b = data.manifest.bounds;
    let mut cm = ConfusionMatrix::new(data.num_classes());
    for &v in views {
        let truth = data.reference_labels[v]
            .as_ref()
            .ok_or_else(|| IrtError::Schema(format!("view {v} has no reference label to evaluate against")))?;
        let r = renderer.render_view(&data.cameras[v], b.near, b.far, RenderMode::Semantic, Some(&data.image_tensor(v)))?;
        cm.add_all(truth, &r.labels)?;
    }
    Ok(cm)
}

/// Per-view PSNR of color renders over `views`.
pub fn evaluate_rgb(renderer: &Renderer, data: &Dataset, views: &[usize]) -> Result<Vec<f64>> {
    let b = data.manifest.bounds;
    views
        .iter()
        .map(|&v| {
            let r = renderer.render(&data.cameras[v], b.near, b.far, RenderMode::Rgb)?;
            Ok(psnr(&r.rgb, &data.images[v])?)
        })
        .collect()
}
