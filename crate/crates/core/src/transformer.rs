//! Segmentation head over frozen field features: density-based point
//! selection, self-attention along each ray (optionally with an extra
//! texture token from the CNN), semantic volume rendering, fusion with CNN
//! features and the cross-entropy objective.

use alloc::{format, vec::Vec};
use core::fmt;
use core::str::FromStr;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::math;
use crate::params::{Bound, ParamStore};
use crate::rng::Rng;

pub const RAY_TRANSFORMER: &str = "rt/";
pub const SEG_HEAD: &str = "seg/";

/// Ablation ladder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Per-point MLP head on the frozen features, no attention.
    B,
    /// Ray attention over the selected points.
    RT,
    /// Ray attention with the CNN texture token.
    RTT,
    /// Ray attention, CNN features concatenated after rendering.
    RTC,
    /// Texture token and post-render concatenation.
    RTTC,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::B, Variant::RT, Variant::RTT, Variant::RTC, Variant::RTTC];

    pub fn uses_attention(self) -> bool {
        self != Variant::B
    }

    pub fn texture_token(self) -> bool {
        matches!(self, Variant::RTT | Variant::RTTC)
    }

    pub fn concat_cnn(self) -> bool {
        matches!(self, Variant::RTC | Variant::RTTC)
    }

    /// Whether the CNN participates at all (and so carries its own loss).
    pub fn uses_cnn(self) -> bool {
        self.texture_token() || self.concat_cnn()
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::B => "B",
            Variant::RT => "RT",
            Variant::RTT => "RTT",
            Variant::RTC => "RTC",
            Variant::RTTC => "RTTC",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Domain { what: "variant", detail: format!("unknown variant `{s}`") })
    }
}

/// Top-`k` samples of each ray by density, listed in depth order.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub rays: usize,
    pub k: usize,
    /// Sample-row indices into the `[R·N]` input, `[R·k]`.
    pub index: Vec<usize>,
}

/// Picks the `k` densest samples per ray. Ties go to the lower depth index;
/// the chosen samples keep their depth order.
pub fn select_valid(sigma: &[f64], samples: usize, k: usize) -> Result<Selection> {
    if k == 0 || k > samples || samples == 0 || sigma.len() % samples != 0 {
        return Err(Error::contract(
            "select_valid",
            format!("k = {k} with {samples} samples per ray ({} values)", sigma.len()),
        ));
    }
    let rays = sigma.len() / samples;
    let mut index = Vec::with_capacity(rays * k);
    let mut order: Vec<usize> = Vec::with_capacity(samples);
    for r in 0..rays {
        let s = &sigma[r * samples..(r + 1) * samples];
        order.clear();
        order.extend(0..samples);
        // stable on ties: higher density first, then lower depth index
        order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
        let mut chosen = order[..k].to_vec();
        chosen.sort_unstable();
        index.extend(chosen.into_iter().map(|i| r * samples + i));
    }
    Ok(Selection { rays, k, index })
}

impl Selection {
    pub fn gather<T: Copy>(&self, values: &[T]) -> Vec<T> {
        self.index.iter().map(|&i| values[i]).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerConfig {
    pub variant: Variant,
    /// Valid points kept per ray.
    pub k: usize,
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub mlp_ratio: usize,
    /// Width of the per-point semantic vector that gets rendered.
    pub semantic_dim: usize,
    /// Width of the incoming field features.
    pub feature_dim: usize,
    /// Width of the CNN features (0 when unused).
    pub cnn_dim: usize,
    pub classes: usize,
}

impl TransformerConfig {
    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::contract(
                "transformer config",
                format!("model_dim {} not divisible by {} heads", self.model_dim, self.heads),
            ));
        }
        if self.k == 0 || self.classes == 0 {
            return Err(Error::contract("transformer config", "k and classes must be positive"));
        }
        if self.variant.uses_cnn() && self.cnn_dim == 0 {
            return Err(Error::Variant { variant: self.variant.name(), detail: "needs CNN features".into() });
        }
        Ok(())
    }
}

/// Intermediate values of one attention layer, kept for inspection.
#[derive(Debug, Clone, Copy)]
pub struct LayerOutput {
    pub tokens: Var,
    /// `[R·heads, T, T]` softmax weights.
    pub attention: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RayTransformer {
    pub config: TransformerConfig,
}

fn p(name: &str) -> alloc::string::String {
    format!("{RAY_TRANSFORMER}{name}")
}

impl RayTransformer {
    pub fn new(config: TransformerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        let c = &self.config;
        let d = c.model_dim;
        if !c.variant.uses_attention() {
            store.init_weight(p("head1/w"), c.feature_dim, d, rng);
            store.init_const(p("head1/b"), d, 0.0);
            store.init_weight(p("head2/w"), d, c.semantic_dim, rng);
            store.init_const(p("head2/b"), c.semantic_dim, 0.0);
        } else {
            store.init_weight(p("in/w"), c.feature_dim, d, rng);
            store.init_const(p("in/b"), d, 0.0);
            if c.variant.texture_token() {
                store.init_weight(p("token/w"), c.cnn_dim, d, rng);
                store.init_const(p("token/b"), d, 0.0);
            }
            for l in 0..c.layers {
                for ln in ["ln1", "ln2"] {
                    store.init_const(p(&format!("l{l}/{ln}/g")), d, 1.0);
                    store.init_const(p(&format!("l{l}/{ln}/b")), d, 0.0);
                }
                for proj in ["q", "k", "v", "o"] {
                    store.init_weight(p(&format!("l{l}/{proj}/w")), d, d, rng);
                    store.init_const(p(&format!("l{l}/{proj}/b")), d, 0.0);
                }
                let hidden = d * c.mlp_ratio;
                store.init_weight(p(&format!("l{l}/mlp1/w")), d, hidden, rng);
                store.init_const(p(&format!("l{l}/mlp1/b")), hidden, 0.0);
                store.init_weight(p(&format!("l{l}/mlp2/w")), hidden, d, rng);
                store.init_const(p(&format!("l{l}/mlp2/b")), d, 0.0);
            }
            store.init_const(p("ln_f/g"), d, 1.0);
            store.init_const(p("ln_f/b"), d, 0.0);
            store.init_weight(p("out/w"), d, c.semantic_dim, rng);
            store.init_const(p("out/b"), c.semantic_dim, 0.0);
        }
        let fused = c.semantic_dim + if c.variant.concat_cnn() { c.cnn_dim } else { 0 };
        store.init_weight(format!("{SEG_HEAD}w"), fused, c.classes, rng);
        store.init_const(format!("{SEG_HEAD}b"), c.classes, 0.0);
    }

    fn affine(&self, tape: &mut Tape, store: &ParamStore, bound: &Bound, x: Var, name: &str) -> Result<Var> {
        let w = bound.var(store, &p(&format!("{name}/w")))?;
        let b = bound.var(store, &p(&format!("{name}/b")))?;
        tape.affine(x, w, Some(b))
    }

    fn layer_norm(&self, tape: &mut Tape, store: &ParamStore, bound: &Bound, x: Var, name: &str) -> Result<Var> {
        let g = bound.var(store, &p(&format!("{name}/g")))?;
        let b = bound.var(store, &p(&format!("{name}/b")))?;
        tape.layer_norm(x, g, b)
    }

    /// One pre-norm block: `x + MSA(LN(x))`, then `x + MLP(LN(x))`.
    /// `tokens` is `[rays·T, d]`.
    pub fn msa_layer(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        bound: &Bound,
        layer: usize,
        tokens: Var,
        rays: usize,
        per_ray: usize,
    ) -> Result<LayerOutput> {
        let c = &self.config;
        let (h, dh) = (c.heads, c.head_dim());
        let l = |s: &str| format!("l{layer}/{s}");
        let x = self.layer_norm(tape, store, bound, tokens, &l("ln1"))?;
        let split = |tape: &mut Tape, name: &str| -> Result<Var> {
            let y = self.affine(tape, store, bound, x, &l(name))?;
            let y = tape.transpose12(y, [rays, per_ray, h, dh])?;
            tape.reshape(y, &[rays * h, per_ray, dh])
        };
        let q = split(tape, "q")?;
        let k = split(tape, "k")?;
        let v = split(tape, "v")?;
        let scores = tape.batch_matmul(q, k, true)?;
        let scores = tape.scale(scores, 1.0 / math::sqrt(dh as f64));
        let attention = tape.softmax(scores)?;
        let heads = tape.batch_matmul(attention, v, false)?;
        let merged = tape.transpose12(heads, [rays, h, per_ray, dh])?;
        let merged = tape.reshape(merged, &[rays * per_ray, c.model_dim])?;
        let projected = self.affine(tape, store, bound, merged, &l("o"))?;
        let tokens = tape.add(tokens, projected)?;
        let y = self.layer_norm(tape, store, bound, tokens, &l("ln2"))?;
        let y = self.affine(tape, store, bound, y, &l("mlp1"))?;
        let y = tape.relu(y);
        let y = self.affine(tape, store, bound, y, &l("mlp2"))?;
        let tokens = tape.add(tokens, y)?;
        Ok(LayerOutput { tokens, attention })
    }

    /// Per-point semantic vectors `[R·k, S]` from selected features
    /// `[R·k, F]` and, for texture-token variants, one CNN feature per ray
    /// (`[R, Fc]`).
    pub fn point_semantics(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        bound: &Bound,
        sel_feats: Var,
        cnn_token: Option<Var>,
    ) -> Result<Var> {
        Ok(self.point_semantics_traced(tape, store, bound, sel_feats, cnn_token)?.0)
    }

    /// Like [`point_semantics`](Self::point_semantics), also returning every
    /// layer's attention weights.
    pub fn point_semantics_traced(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        bound: &Bound,
        sel_feats: Var,
        cnn_token: Option<Var>,
    ) -> Result<(Var, Vec<LayerOutput>)> {
        let c = &self.config;
        let k = c.k;
        let rows = tape.value(sel_feats).rows();
        if rows % k != 0 {
            return Err(Error::dim("ray transformer", format!("{rows} feature rows for k = {k}")));
        }
        let rays = rows / k;
        if c.variant.texture_token() != cnn_token.is_some() {
            return Err(Error::Variant {
                variant: c.variant.name(),
                detail: format!("texture token supplied: {}", cnn_token.is_some()),
            });
        }
        if !c.variant.uses_attention() {
            let h = self.affine(tape, store, bound, sel_feats, "head1")?;
            let h = tape.relu(h);
            return Ok((self.affine(tape, store, bound, h, "head2")?, Vec::new()));
        }
        let d = c.model_dim;
        let mut tokens = self.affine(tape, store, bound, sel_feats, "in")?;
        let mut per_ray = k;
        if let Some(cnn) = cnn_token {
            let t = self.affine(tape, store, bound, cnn, "token")?;
            let pts = tape.reshape(tokens, &[rays, k * d])?;
            let joined = tape.concat_cols(&[pts, t])?;
            tokens = tape.reshape(joined, &[rays * (k + 1), d])?;
            per_ray = k + 1;
        }
        let mut trace = Vec::with_capacity(c.layers);
        for l in 0..c.layers {
            let out = self.msa_layer(tape, store, bound, l, tokens, rays, per_ray)?;
            tokens = out.tokens;
            trace.push(out);
        }
        let mut y = self.layer_norm(tape, store, bound, tokens, "ln_f")?;
        if per_ray != k {
            // drop the texture token's output slot
            let flat = tape.reshape(y, &[rays, per_ray * d])?;
            let pts = tape.slice_cols(flat, 0, k * d)?;
            y = tape.reshape(pts, &[rays * k, d])?;
        }
        Ok((self.affine(tape, store, bound, y, "out")?, trace))
    }

    /// Class logits `[R, classes]` from the rendered ray semantics `[R, S]`
    /// and, for concatenating variants, the ray's CNN feature.
    pub fn fuse_and_classify(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        bound: &Bound,
        ray_semantics: Var,
        cnn_feat: Option<Var>,
    ) -> Result<Var> {
        let v = self.config.variant;
        if v.concat_cnn() != cnn_feat.is_some() {
            return Err(Error::Variant {
                variant: v.name(),
                detail: format!("post-render CNN feature supplied: {}", cnn_feat.is_some()),
            });
        }
        let x = match cnn_feat {
            Some(c) => tape.concat_cols(&[ray_semantics, c])?,
            None => ray_semantics,
        };
        let w = bound.var(store, &format!("{SEG_HEAD}w"))?;
        let b = bound.var(store, &format!("{SEG_HEAD}b"))?;
        tape.affine(x, w, Some(b))
    }
}

/// Renders per-point semantics `[R·k, S]` with the selected samples'
/// densities and interval lengths (constants from the frozen trunk).
pub fn render_semantic(tape: &mut Tape, point_semantics: Var, sel_sigma: &[f64], sel_deltas: &[f64], k: usize) -> Result<Var> {
    let rays = sel_sigma.len() / k;
    let sigma = tape.constant(crate::tensor::Tensor::new(alloc::vec![rays, k], sel_sigma.to_vec())?);
    tape.volume_render(sigma, point_semantics, sel_deltas)
}

fn check_one_hot(targets: &[f64], classes: usize) -> Result<()> {
    for row in targets.chunks(classes) {
        let ones = row.iter().filter(|&&t| t == 1.0).count();
        let zeros = row.iter().filter(|&&t| t == 0.0).count();
        if ones != 1 || zeros + 1 != classes {
            return Err(Error::contract("seg_loss", "targets must be one-hot rows"));
        }
    }
    Ok(())
}

/// `L_s + L_cnn`: cross-entropy of the fused logits plus, when present,
/// cross-entropy of the CNN-only logits. Sums over rays.
pub fn seg_loss(tape: &mut Tape, logits: Var, cnn_logits: Option<Var>, targets: &[f64]) -> Result<Var> {
    let classes = tape.value(logits).last_dim();
    check_one_hot(targets, classes)?;
    let ls = tape.softmax_cross_entropy(logits, targets)?;
    match cnn_logits {
        Some(c) => {
            let lc = tape.softmax_cross_entropy(c, targets)?;
            tape.add(ls, lc)
        }
        None => Ok(ls),
    }
}

/// One-hot rows for class ids.
pub fn one_hot(labels: &[u8], classes: usize) -> Vec<f64> {
    let mut out = alloc::vec![0.0; labels.len() * classes];
    for (r, &l) in labels.iter().enumerate() {
        out[r * classes + l as usize] = 1.0;
    }
    out
}
