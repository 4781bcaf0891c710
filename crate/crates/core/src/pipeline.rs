//! Forward/backward steps for both training stages and deterministic
//! full-frame inference.

use alloc::{format, vec, vec::Vec};

use crate::autodiff::{Tape, Var};
use crate::cnn::{gather_ray_features, PixelRef, TextureCnn};
use crate::error::{Error, Result};
use crate::field::{render_ray, render_weights, rgb_loss, RadianceField};
use crate::geometry::{sample_coarse, sample_fine, Ray, RaySampleBatch};
use crate::params::{Bound, Gradients, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::transformer::{render_semantic, seg_loss, select_valid, RayTransformer};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplingConfig {
    pub coarse: usize,
    pub fine: usize,
}

fn directions(rays: &[Ray]) -> Vec<f64> {
    rays.iter().flat_map(|r| r.direction.0).collect()
}

/// Loss values and parameter gradients of one stage-1 step.
#[derive(Debug, Clone)]
pub struct ColorStep {
    pub coarse_loss: f64,
    pub fine_loss: f64,
    pub grads: Gradients,
}

impl ColorStep {
    pub fn loss(&self) -> f64 {
        self.coarse_loss + self.fine_loss
    }
}

/// Coarse render, importance resampling and fine render of `rays`, both
/// supervised against `targets` (`[R·3]`). The same field serves both passes.
pub fn color_step(
    field: &RadianceField,
    store: &ParamStore,
    rays: &[Ray],
    targets: &[f64],
    sampling: SamplingConfig,
    rng: &mut Rng,
) -> Result<ColorStep> {
    if targets.len() != rays.len() * 3 {
        return Err(Error::dim("color_step", format!("{} targets for {} rays", targets.len(), rays.len())));
    }
    let dirs = directions(rays);
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);

    let coarse = sample_coarse(rays, sampling.coarse, Some(rng))?;
    let out_c = field.forward(&mut tape, store, &bound, &coarse.positions, &dirs, coarse.samples)?;
    let rgb_c = render_ray(&mut tape, out_c.sigma, out_c.color, &coarse.deltas)?;
    let (weights, _) = render_weights(tape.value(out_c.sigma).data(), &coarse.deltas, coarse.samples)?;

    let fine = sample_fine(rays, &coarse, &weights, sampling.fine, Some(rng))?;
    let out_f = field.forward(&mut tape, store, &bound, &fine.positions, &dirs, fine.samples)?;
    let rgb_f = render_ray(&mut tape, out_f.sigma, out_f.color, &fine.deltas)?;

    let lc = rgb_loss(&mut tape, rgb_c, targets)?;
    let lf = rgb_loss(&mut tape, rgb_f, targets)?;
    let total = tape.add(lc, lf)?;
    let (coarse_loss, fine_loss) = (tape.value(lc).data()[0], tape.value(lf).data()[0]);
    if !(coarse_loss + fine_loss).is_finite() {
        return Err(Error::NonFinite { net: "loss", layer: 0 });
    }
    tape.backward(total)?;
    Ok(ColorStep { coarse_loss, fine_loss, grads: store.gradients(&tape, &bound) })
}

/// Deterministic hierarchical samples (bin centers, then fixed quantiles).
fn deterministic_fine(
    field: &RadianceField,
    store: &ParamStore,
    tape: &mut Tape,
    bound: &Bound,
    rays: &[Ray],
    sampling: SamplingConfig,
) -> Result<RaySampleBatch> {
    let coarse = sample_coarse(rays, sampling.coarse, None)?;
    let (sigma, _) = field.trunk(tape, store, bound, &coarse.positions, coarse.samples)?;
    let (weights, _) = render_weights(tape.value(sigma).data(), &coarse.deltas, coarse.samples)?;
    sample_fine(rays, &coarse, &weights, sampling.fine, None)
}

/// Fine-pass color (`[R·3]`), expected depth (`[R]`) and opacity (`[R]`).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RayRender {
    pub rgb: Vec<f64>,
    pub depth: Vec<f64>,
    pub opacity: Vec<f64>,
}

/// Renders rays without randomness, `chunk` rays per tape.
pub fn render_rays(
    field: &RadianceField,
    store: &ParamStore,
    rays: &[Ray],
    sampling: SamplingConfig,
    chunk: usize,
) -> Result<RayRender> {
    let mut out = RayRender::default();
    for part in rays.chunks(chunk.max(1)) {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let fine = deterministic_fine(field, store, &mut tape, &bound, part, sampling)?;
        let f = field.forward(&mut tape, store, &bound, &fine.positions, &directions(part), fine.samples)?;
        let rgb = render_ray(&mut tape, f.sigma, f.color, &fine.deltas)?;
        out.rgb.extend_from_slice(tape.value(rgb).data());
        let (weights, residual) = render_weights(tape.value(f.sigma).data(), &fine.deltas, fine.samples)?;
        for r in 0..part.len() {
            let s = r * fine.samples..(r + 1) * fine.samples;
            let d: f64 = weights[s.clone()].iter().zip(&fine.depths[s]).map(|(w, t)| w * t).sum();
            out.depth.push(d);
            out.opacity.push(1.0 - residual[r]);
        }
    }
    Ok(out)
}

/// The `k` densest fine samples of each ray under a frozen trunk:
/// features, densities and interval lengths, ray-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectedPoints {
    pub k: usize,
    pub feature_dim: usize,
    /// `[R·k·F]`
    pub feats: Vec<f64>,
    /// `[R·k]`
    pub sigma: Vec<f64>,
    /// `[R·k]`
    pub deltas: Vec<f64>,
}

impl SelectedPoints {
    pub fn rays(&self) -> usize {
        self.sigma.len() / self.k
    }

    /// The listed rays, in order.
    pub fn subset(&self, rows: &[usize]) -> SelectedPoints {
        let (k, f) = (self.k, self.feature_dim);
        let mut out = SelectedPoints {
            k,
            feature_dim: f,
            feats: Vec::with_capacity(rows.len() * k * f),
            sigma: Vec::with_capacity(rows.len() * k),
            deltas: Vec::with_capacity(rows.len() * k),
        };
        for &r in rows {
            out.feats.extend_from_slice(&self.feats[r * k * f..(r + 1) * k * f]);
            out.sigma.extend_from_slice(&self.sigma[r * k..(r + 1) * k]);
            out.deltas.extend_from_slice(&self.deltas[r * k..(r + 1) * k]);
        }
        out
    }

    pub fn append(&mut self, other: SelectedPoints) {
        self.feats.extend(other.feats);
        self.sigma.extend(other.sigma);
        self.deltas.extend(other.deltas);
    }
}

/// Runs the trunk on deterministic fine samples and keeps the top-`k`
/// points per ray. The trunk is treated as frozen: nothing here is
/// differentiated.
pub fn select_points(
    field: &RadianceField,
    store: &ParamStore,
    rays: &[Ray],
    sampling: SamplingConfig,
    k: usize,
    chunk: usize,
) -> Result<SelectedPoints> {
    let fdim = field.config.feature_dim();
    let mut out = SelectedPoints { k, feature_dim: fdim, feats: vec![], sigma: vec![], deltas: vec![] };
    for part in rays.chunks(chunk.max(1)) {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let fine = deterministic_fine(field, store, &mut tape, &bound, part, sampling)?;
        let (sigma, feat) = field.trunk(&mut tape, store, &bound, &fine.positions, fine.samples)?;
        let sigma = tape.value(sigma).data();
        let sel = select_valid(sigma, fine.samples, k)?;
        let feat = tape.value(feat).data();
        for &i in &sel.index {
            out.feats.extend_from_slice(&feat[i * fdim..(i + 1) * fdim]);
            out.sigma.push(sigma[i]);
            out.deltas.push(fine.deltas[i]);
        }
    }
    Ok(out)
}

/// Stage-2 networks for one variant.
#[derive(Debug, Clone, PartialEq)]
pub struct SegModel {
    pub transformer: RayTransformer,
    pub cnn: Option<TextureCnn>,
}

/// Fused logits `[R, classes]` and, when the variant has a CNN, the
/// CNN-only logits used by the auxiliary loss.
#[derive(Debug, Clone, Copy)]
pub struct SegLogits {
    pub logits: Var,
    pub cnn_logits: Option<Var>,
}

impl SegModel {
    pub fn new(transformer: RayTransformer, cnn: Option<TextureCnn>) -> Result<Self> {
        let v = transformer.config.variant;
        if v.uses_cnn() != cnn.is_some() {
            return Err(Error::Variant { variant: v.name(), detail: format!("CNN supplied: {}", cnn.is_some()) });
        }
        if let Some(c) = &cnn {
            if c.config.feature_dim() != transformer.config.cnn_dim {
                return Err(Error::Variant {
                    variant: v.name(),
                    detail: format!("CNN width {} vs transformer {}", c.config.feature_dim(), transformer.config.cnn_dim),
                });
            }
        }
        Ok(Self { transformer, cnn })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        self.transformer.init(store, rng);
        if let Some(c) = &self.cnn {
            c.init(store, rng);
        }
    }

    /// Per-ray CNN features `[R, Fc]` gathered from feature maps of
    /// `images` (`[N, H, W, 3]`).
    pub fn cnn_features(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        bound: &Bound,
        images: &Tensor,
        pixels: &[PixelRef],
    ) -> Result<Option<Var>> {
        let Some(cnn) = &self.cnn else { return Ok(None) };
        let x = tape.constant(images.clone());
        let map = cnn.forward(tape, store, bound, x)?;
        Ok(Some(gather_ray_features(tape, map, pixels)?))
    }

    /// Logits for the rays in `points`. `cnn_feats` must be present exactly
    /// when the variant uses the CNN.
    pub fn logits(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        bound: &Bound,
        points: &SelectedPoints,
        cnn_feats: Option<Var>,
    ) -> Result<SegLogits> {
        let c = &self.transformer.config;
        let v = c.variant;
        if v.uses_cnn() != cnn_feats.is_some() {
            return Err(Error::Variant { variant: v.name(), detail: "CNN features presence".into() });
        }
        if points.k != c.k || points.feature_dim != c.feature_dim {
            return Err(Error::dim(
                "seg logits",
                format!("points k={} F={} vs model k={} F={}", points.k, points.feature_dim, c.k, c.feature_dim),
            ));
        }
        let rows = points.sigma.len();
        let feats = tape.constant(Tensor::new(vec![rows, points.feature_dim], points.feats.clone())?);
        let token = if v.texture_token() { cnn_feats } else { None };
        let sem = self.transformer.point_semantics(tape, store, bound, feats, token)?;
        let ray_sem = render_semantic(tape, sem, &points.sigma, &points.deltas, c.k)?;
        let post = if v.concat_cnn() { cnn_feats } else { None };
        let logits = self.transformer.fuse_and_classify(tape, store, bound, ray_sem, post)?;
        let cnn_logits = match (&self.cnn, cnn_feats) {
            (Some(cnn), Some(f)) => Some(cnn.classify(tape, store, bound, f)?),
            _ => None,
        };
        Ok(SegLogits { logits, cnn_logits })
    }
}

/// Loss value and gradients of one stage-2 step.
#[derive(Debug, Clone)]
pub struct SegStep {
    pub loss: f64,
    pub grads: Gradients,
}

/// One stage-2 step over labeled rays. `images` holds the views referenced
/// by `pixels`; `targets` are one-hot rows.
pub fn seg_step(
    model: &SegModel,
    store: &ParamStore,
    points: &SelectedPoints,
    images: Option<&Tensor>,
    pixels: &[PixelRef],
    targets: &[f64],
) -> Result<SegStep> {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let cnn_feats = match images {
        Some(im) => model.cnn_features(&mut tape, store, &bound, im, pixels)?,
        None => None,
    };
    let out = model.logits(&mut tape, store, &bound, points, cnn_feats)?;
    let loss = seg_loss(&mut tape, out.logits, out.cnn_logits, targets)?;
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::NonFinite { net: "loss", layer: 0 });
    }
    tape.backward(loss)?;
    Ok(SegStep { loss: value, grads: store.gradients(&tape, &bound) })
}

/// Per-pixel class logits (`[P, classes]`) for one full view whose points
/// were selected in pixel order. `image` is `[H, W, 3]`.
pub fn segment_view(
    model: &SegModel,
    store: &ParamStore,
    points: &SelectedPoints,
    image: Option<&Tensor>,
    chunk: usize,
) -> Result<Vec<f64>> {
    let rays = points.rays();
    let feat_map = match (&model.cnn, image) {
        (Some(cnn), Some(im)) => {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let mut shape = vec![1];
            shape.extend_from_slice(im.shape());
            let x = tape.constant(Tensor::new(shape, im.data().to_vec())?);
            let map = cnn.forward(&mut tape, store, &bound, x)?;
            let t = tape.value(map);
            if t.len() / cnn.config.feature_dim() != rays {
                return Err(Error::dim("segment_view", format!("{} pixels vs {rays} rays", t.len() / cnn.config.feature_dim())));
            }
            Some(t.clone())
        }
        (None, _) => None,
        (Some(_), None) => return Err(Error::Variant { variant: model.transformer.config.variant.name(), detail: "missing image".into() }),
    };
    let mut logits = Vec::new();
    let rows: Vec<usize> = (0..rays).collect();
    for part in rows.chunks(chunk.max(1)) {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let sub = points.subset(part);
        let cnn_feats = match &feat_map {
            Some(m) => {
                let fc = m.last_dim();
                let mut data = Vec::with_capacity(part.len() * fc);
                for &r in part {
                    data.extend_from_slice(&m.data()[r * fc..(r + 1) * fc]);
                }
                Some(tape.constant(Tensor::new(vec![part.len(), fc], data)?))
            }
            None => None,
        };
        let out = model.logits(&mut tape, store, &bound, &sub, cnn_feats)?;
        logits.extend_from_slice(tape.value(out.logits).data());
    }
    Ok(logits)
}

/// Row-wise argmax; ties go to the lower class id.
pub fn argmax_rows(values: &[f64], classes: usize) -> Vec<u8> {
    values
        .chunks(classes)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best as u8
        })
        .collect()
}
