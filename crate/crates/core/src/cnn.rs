//! Full-resolution texture CNN: a stack of 3×3 same-padded convolutions
//! with ReLU between stages, plus a linear classifier on its features.

use alloc::{format, vec::Vec};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const CNN: &str = "cnn/";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CnnConfig {
    /// Channel counts from input to output, e.g. `[3, 32, 32, 32, 32]`
    /// for four stages.
    pub channels: Vec<usize>,
    pub classes: usize,
}

impl CnnConfig {
    pub fn feature_dim(&self) -> usize {
        *self.channels.last().unwrap_or(&0)
    }

    pub fn stages(&self) -> usize {
        self.channels.len().saturating_sub(1)
    }

    /// Pixels of context on each side that influence one output pixel.
    pub fn receptive_radius(&self) -> usize {
        self.stages()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextureCnn {
    pub config: CnnConfig,
}

impl TextureCnn {
    pub fn new(config: CnnConfig) -> Result<Self> {
        if config.channels.len() < 2 || config.channels.contains(&0) {
            return Err(Error::contract("cnn config", format!("channels {:?}", config.channels)));
        }
        Ok(Self { config })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        for (i, pair) in self.config.channels.windows(2).enumerate() {
            store.init_weight(format!("{CNN}c{i}/w"), 9 * pair[0], pair[1], rng);
            store.init_const(format!("{CNN}c{i}/b"), pair[1], 0.0);
        }
        store.init_weight(format!("{CNN}cls/w"), self.config.feature_dim(), self.config.classes, rng);
        store.init_const(format!("{CNN}cls/b"), self.config.classes, 0.0);
    }

    /// Feature maps `[N, H, W, Fc]` for images `[N, H, W, 3]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, bound: &Bound, images: Var) -> Result<Var> {
        let mut x = images;
        let stages = self.config.stages();
        for i in 0..stages {
            let w = bound.var(store, &format!("{CNN}c{i}/w"))?;
            let b = bound.var(store, &format!("{CNN}c{i}/b"))?;
            x = tape.conv2d(x, w, b)?;
            if i + 1 < stages {
                x = tape.relu(x);
            }
        }
        if !tape.value(x).all_finite() {
            return Err(Error::NonFinite { net: "cnn", layer: stages });
        }
        Ok(x)
    }

    /// Class logits `[R, classes]` from per-ray CNN features.
    pub fn classify(&self, tape: &mut Tape, store: &ParamStore, bound: &Bound, feats: Var) -> Result<Var> {
        let w = bound.var(store, &format!("{CNN}cls/w"))?;
        let b = bound.var(store, &format!("{CNN}cls/b"))?;
        tape.affine(feats, w, Some(b))
    }
}

/// Pixel of one image in a stacked `[N, H, W, C]` batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRef {
    pub image: usize,
    pub x: usize,
    pub y: usize,
}

/// Exact per-pixel gather from `[N, H, W, C]` feature maps into `[R, C]`.
pub fn gather_ray_features(tape: &mut Tape, feat_map: Var, pixels: &[PixelRef]) -> Result<Var> {
    let shape = tape.value(feat_map).shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::dim("gather_ray_features", format!("feature map {shape:?}")));
    }
    let (n, h, w) = (shape[0], shape[1], shape[2]);
    let mut index = Vec::with_capacity(pixels.len());
    for px in pixels {
        if px.image >= n || px.x >= w || px.y >= h {
            return Err(Error::Domain {
                what: "pixel",
                detail: format!("{px:?} outside {n} maps of {w}x{h}"),
            });
        }
        index.push((px.image * h + px.y) * w + px.x);
    }
    tape.gather_rows(feat_map, &index)
}

/// Stacks `[H, W, 3]` images into one `[N, H, W, 3]` tensor.
pub fn stack_images(images: &[&Tensor]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::contract("stack_images", "no images"))?;
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(first.len() * images.len());
    for im in images {
        if im.shape() != shape.as_slice() {
            return Err(Error::dim("stack_images", format!("{:?} vs {shape:?}", im.shape())));
        }
        data.extend_from_slice(im.data());
    }
    let mut full = alloc::vec![images.len()];
    full.extend(shape);
    Tensor::new(full, data)
}
