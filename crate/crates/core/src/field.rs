//! Color radiance field: Fourier-feature encoding, a spatial trunk that
//! predicts density and a point feature, a direction head that predicts
//! color, and volume rendering of per-sample attributes.

use alloc::{vec, vec::Vec};

use crate::autodiff::{Tape, Var};
use crate::compositing;
use crate::error::{Error, Result};
use crate::geometry::{SceneBox, Vec3};
use crate::math;
use crate::params::{Bound, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Prefix of the spatial trunk's parameters.
pub const TRUNK: &str = "field/s/";
/// Prefix of the direction head's parameters.
pub const DIRECTION_HEAD: &str = "field/d/";

/// `x ↦ [x, sin(2^0 π x), cos(2^0 π x), …, sin(2^{L-1} π x), cos(2^{L-1} π x)]`
/// per input dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FourierEncoding {
    pub num_freqs: usize,
    pub include_input: bool,
}

impl FourierEncoding {
    pub fn output_dim(&self, in_dim: usize) -> usize {
        in_dim * (usize::from(self.include_input) + 2 * self.num_freqs)
    }

    /// Encodes rows of `x` (`[B, D]`).
    pub fn encode(&self, x: &Tensor) -> Tensor {
        let d = x.last_dim();
        let rows = x.rows();
        let mut out = Vec::with_capacity(rows * self.output_dim(d));
        for r in 0..rows {
            self.encode_row(x.row(r), &mut out);
        }
        let mut shape = x.shape()[..x.rank().saturating_sub(1)].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        shape.push(self.output_dim(d));
        Tensor::new(shape, out).expect("encoding size")
    }

    pub fn encode_row(&self, row: &[f64], out: &mut Vec<f64>) {
        for &v in row {
            if self.include_input {
                out.push(v);
            }
            let mut freq = core::f64::consts::PI;
            for _ in 0..self.num_freqs {
                out.push(math::sin(freq * v));
                out.push(math::cos(freq * v));
                freq *= 2.0;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldConfig {
    pub pos_freqs: usize,
    pub dir_freqs: usize,
    pub trunk_width: usize,
    pub trunk_depth: usize,
    /// Trunk layer whose input is re-concatenated with the encoded position.
    pub skip_layer: Option<usize>,
    pub dir_width: usize,
    pub scene_box: SceneBox,
}

impl FieldConfig {
    pub fn with_box(scene_box: SceneBox) -> Self {
        Self {
            pos_freqs: 10,
            dir_freqs: 4,
            trunk_width: 128,
            trunk_depth: 6,
            skip_layer: Some(3),
            dir_width: 64,
            scene_box,
        }
    }

    pub fn position_encoding(&self) -> FourierEncoding {
        FourierEncoding { num_freqs: self.pos_freqs, include_input: true }
    }

    pub fn direction_encoding(&self) -> FourierEncoding {
        FourierEncoding { num_freqs: self.dir_freqs, include_input: true }
    }

    /// Width of the point feature handed to the segmentation stage.
    pub fn feature_dim(&self) -> usize {
        self.trunk_width
    }
}

/// Per-sample field outputs; all tensors are sample-major `[R·N, ·]`.
#[derive(Debug, Clone, Copy)]
pub struct FieldOutput {
    /// `[R, N]`, nonnegative.
    pub sigma: Var,
    /// `[R·N, 3]` in `[0, 1]`.
    pub color: Var,
    /// `[R·N, F]`.
    pub feat: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RadianceField {
    pub config: FieldConfig,
}

impl RadianceField {
    pub fn new(config: FieldConfig) -> Self {
        Self { config }
    }

    fn trunk_in_dim(&self, layer: usize) -> usize {
        let c = &self.config;
        let enc = c.position_encoding().output_dim(3);
        match layer {
            0 => enc,
            l if Some(l) == c.skip_layer => c.trunk_width + enc,
            _ => c.trunk_width,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        let c = &self.config;
        for l in 0..c.trunk_depth {
            store.init_weight(alloc::format!("{TRUNK}l{l}/w"), self.trunk_in_dim(l), c.trunk_width, rng);
            store.init_const(alloc::format!("{TRUNK}l{l}/b"), c.trunk_width, 0.0);
        }
        store.init_weight(alloc::format!("{TRUNK}sigma/w"), c.trunk_width, 1, rng);
        store.init_const(alloc::format!("{TRUNK}sigma/b"), 1, 0.0);
        store.init_weight(alloc::format!("{TRUNK}feat/w"), c.trunk_width, c.feature_dim(), rng);
        store.init_const(alloc::format!("{TRUNK}feat/b"), c.feature_dim(), 0.0);
        let din = c.feature_dim() + c.direction_encoding().output_dim(3);
        store.init_weight(alloc::format!("{DIRECTION_HEAD}l0/w"), din, c.dir_width, rng);
        store.init_const(alloc::format!("{DIRECTION_HEAD}l0/b"), c.dir_width, 0.0);
        store.init_weight(alloc::format!("{DIRECTION_HEAD}rgb/w"), c.dir_width, 3, rng);
        store.init_const(alloc::format!("{DIRECTION_HEAD}rgb/b"), 3, 0.0);
    }

    /// Encoded, box-normalized positions `[P, enc]` for world positions `[P·3]`.
    pub fn encode_positions(&self, positions: &[f64]) -> Tensor {
        let enc = self.config.position_encoding();
        let mut out = Vec::with_capacity(positions.len() / 3 * enc.output_dim(3));
        for p in positions.chunks_exact(3) {
            let q = self.config.scene_box.normalize(Vec3([p[0], p[1], p[2]]));
            enc.encode_row(&q.0, &mut out);
        }
        let n = positions.len() / 3;
        Tensor::new(vec![n, enc.output_dim(3)], out).expect("encoding size")
    }

    /// Density and point feature for world positions `[R·N·3]`.
    /// Returns `(sigma [R, N], feat [R·N, F])`.
    pub fn trunk(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        bound: &Bound,
        positions: &[f64],
        samples_per_ray: usize,
    ) -> Result<(Var, Var)> {
        let c = &self.config;
        let points = positions.len() / 3;
        if samples_per_ray == 0 || points % samples_per_ray != 0 {
            return Err(Error::dim("field trunk", alloc::format!("{points} points, {samples_per_ray} per ray")));
        }
        let enc = tape.constant(self.encode_positions(positions));
        let mut h = enc;
        for l in 0..c.trunk_depth {
            if Some(l) == c.skip_layer && l > 0 {
                h = tape.concat_cols(&[h, enc])?;
            }
            let w = bound.var(store, &alloc::format!("{TRUNK}l{l}/w"))?;
            let b = bound.var(store, &alloc::format!("{TRUNK}l{l}/b"))?;
            let z = tape.affine(h, w, Some(b))?;
            h = tape.relu(z);
            check_finite(tape, h, "phi_s", l)?;
        }
        let sw = bound.var(store, &alloc::format!("{TRUNK}sigma/w"))?;
        let sb = bound.var(store, &alloc::format!("{TRUNK}sigma/b"))?;
        let raw = tape.affine(h, sw, Some(sb))?;
        let sigma = tape.softplus(raw);
        let sigma = tape.reshape(sigma, &[points / samples_per_ray, samples_per_ray])?;
        check_finite(tape, sigma, "phi_s", c.trunk_depth)?;
        let fw = bound.var(store, &alloc::format!("{TRUNK}feat/w"))?;
        let fb = bound.var(store, &alloc::format!("{TRUNK}feat/b"))?;
        let feat = tape.affine(h, fw, Some(fb))?;
        check_finite(tape, feat, "phi_s", c.trunk_depth + 1)?;
        Ok((sigma, feat))
    }

    /// Full field evaluation. `dirs` holds one unit direction per ray
    /// (`[R·3]`), broadcast over that ray's samples.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        bound: &Bound,
        positions: &[f64],
        dirs: &[f64],
        samples_per_ray: usize,
    ) -> Result<FieldOutput> {
        let (sigma, feat) = self.trunk(tape, store, bound, positions, samples_per_ray)?;
        let rays = positions.len() / 3 / samples_per_ray;
        if dirs.len() != rays * 3 {
            return Err(Error::dim("field forward", alloc::format!("{} direction values for {rays} rays", dirs.len())));
        }
        let enc = self.config.direction_encoding();
        let ed = enc.output_dim(3);
        let mut per_ray = Vec::with_capacity(ed);
        let mut expanded = Vec::with_capacity(rays * samples_per_ray * ed);
        for d in dirs.chunks_exact(3) {
            per_ray.clear();
            enc.encode_row(d, &mut per_ray);
            for _ in 0..samples_per_ray {
                expanded.extend_from_slice(&per_ray);
            }
        }
        let dir_enc = tape.constant(Tensor::new(vec![rays * samples_per_ray, ed], expanded)?);
        let x = tape.concat_cols(&[feat, dir_enc])?;
        let w0 = bound.var(store, &alloc::format!("{DIRECTION_HEAD}l0/w"))?;
        let b0 = bound.var(store, &alloc::format!("{DIRECTION_HEAD}l0/b"))?;
        let h = tape.affine(x, w0, Some(b0))?;
        let h = tape.relu(h);
        check_finite(tape, h, "phi_d", 0)?;
        let w1 = bound.var(store, &alloc::format!("{DIRECTION_HEAD}rgb/w"))?;
        let b1 = bound.var(store, &alloc::format!("{DIRECTION_HEAD}rgb/b"))?;
        let raw = tape.affine(h, w1, Some(b1))?;
        let color = tape.sigmoid(raw);
        check_finite(tape, color, "phi_d", 1)?;
        Ok(FieldOutput { sigma, color, feat })
    }
}

fn check_finite(tape: &Tape, v: Var, net: &'static str, layer: usize) -> Result<()> {
    if tape.value(v).all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { net, layer })
    }
}

/// Differentiable volume rendering of `attr` (`[R·N, C]`) along rays with
/// densities `sigma` (`[R, N]`).
pub fn render_ray(tape: &mut Tape, sigma: Var, attr: Var, deltas: &[f64]) -> Result<Var> {
    tape.volume_render(sigma, attr, deltas)
}

/// Compositing weights for every sample of every ray (`[R·N]`) and the
/// transmittance left behind each ray (`[R]`).
pub fn render_weights(sigma: &[f64], deltas: &[f64], samples: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if samples == 0 || sigma.len() != deltas.len() || sigma.len() % samples != 0 {
        return Err(Error::dim("render_weights", alloc::format!("{} sigma, {} deltas", sigma.len(), deltas.len())));
    }
    if sigma.iter().chain(deltas).any(|&v| v < 0.0) {
        return Err(Error::contract("render_weights", "negative density or interval"));
    }
    let rays = sigma.len() / samples;
    let mut weights = vec![0.0; sigma.len()];
    let mut residual = vec![0.0; rays];
    for r in 0..rays {
        let s = r * samples..(r + 1) * samples;
        residual[r] = compositing::ray_weights(&sigma[s.clone()], &deltas[s.clone()], &mut weights[s]);
    }
    Ok((weights, residual))
}

/// `Σ_r ||pred_r - target_r||²`.
pub fn rgb_loss(tape: &mut Tape, pred: Var, target: &[f64]) -> Result<Var> {
    tape.sum_squared_error(pred, target)
}
