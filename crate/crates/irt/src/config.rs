//! Training configuration, loadable from TOML. Missing keys take the
//! micro-town defaults.

use std::path::Path;

use irt_core::cnn::CnnConfig;
use irt_core::field::FieldConfig;
use irt_core::geometry::SceneBox;
use irt_core::optim::AdamConfig;
use irt_core::pipeline::SamplingConfig;
use irt_core::transformer::{TransformerConfig, Variant};
use serde::{Deserialize, Serialize};

use crate::error::{IrtError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    /// Threads sharing each optimizer step. Results are reproducible for a
    /// fixed worker count.
    pub workers: usize,
    /// Rays per tape when rendering full frames.
    pub render_chunk: usize,
    pub sampling: Sampling,
    pub field: Field,
    pub color: Stage,
    pub seg: Stage,
    pub variant: String,
    pub transformer: Transformer,
    pub cnn: Cnn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sampling {
    pub coarse: usize,
    pub fine: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Field {
    pub pos_freqs: usize,
    pub dir_freqs: usize,
    pub trunk_width: usize,
    pub trunk_depth: usize,
    pub skip_layer: Option<usize>,
    pub dir_width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    pub iterations: u64,
    pub batch: usize,
    pub lr: f64,
    pub decay_factor: f64,
    pub decay_steps: u64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    /// 0 disables periodic held-out evaluation.
    pub eval_every: u64,
    pub eval_views: usize,
    pub log_every: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Transformer {
    pub k: usize,
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub mlp_ratio: usize,
    pub semantic_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cnn {
    /// Output channels of each 3×3 stage.
    pub channels: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::micro_town()
    }
}

impl TrainConfig {
    /// Sizes that fit the micro-town scene on a single CPU core.
    pub fn micro_town() -> Self {
        TrainConfig {
            seed: 0,
            workers: 1,
            render_chunk: 256,
            sampling: Sampling { coarse: 32, fine: 32 },
            field: Field { pos_freqs: 10, dir_freqs: 4, trunk_width: 64, trunk_depth: 4, skip_layer: Some(2), dir_width: 32 },
            color: Stage {
                iterations: 20_000,
                batch: 32,
                lr: 5e-3,
                decay_factor: 0.1,
                decay_steps: 20_000,
                checkpoint_every: 5_000,
                eval_every: 1_000,
                eval_views: 4,
                log_every: 100,
            },
            seg: Stage {
                iterations: 5_000,
                batch: 64,
                lr: 1e-3,
                decay_factor: 0.1,
                decay_steps: 5_000,
                checkpoint_every: 0,
                eval_every: 1_000,
                eval_views: 4,
                log_every: 100,
            },
            variant: "RTTC".into(),
            transformer: Transformer { k: 8, layers: 2, heads: 4, model_dim: 32, mlp_ratio: 2, semantic_dim: 16 },
            cnn: Cnn { channels: vec![16, 16, 16, 16] },
        }
    }

    /// The nominal full-size network and sampling settings.
    pub fn reference() -> Self {
        let mut c = Self::micro_town();
        c.sampling = Sampling { coarse: 64, fine: 192 };
        c.field = Field { pos_freqs: 10, dir_freqs: 4, trunk_width: 128, trunk_depth: 6, skip_layer: Some(3), dir_width: 64 };
        c.color.batch = 1024;
        c.color.lr = 5e-4;
        c.seg.batch = 1024;
        c.seg.lr = 5e-4;
        c.transformer = Transformer { k: 16, layers: 2, heads: 4, model_dim: 64, mlp_ratio: 2, semantic_dim: 64 };
        c.cnn.channels = vec![32, 32, 32, 32];
        c
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| IrtError::io(path, e))?;
        let config: TrainConfig = toml::from_str(&text).map_err(|e| IrtError::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(IrtError::Config(m.into()));
        if self.workers == 0 || self.render_chunk == 0 {
            return bad("workers and render_chunk must be at least 1");
        }
        if self.color.batch == 0 || self.seg.batch == 0 {
            return bad("batch sizes must be at least 1");
        }
        if self.sampling.coarse < 2 || self.sampling.fine == 0 {
            return bad("need at least 2 coarse and 1 fine sample");
        }
        if self.transformer.k == 0 || self.transformer.k > self.sampling.fine {
            return bad("transformer.k must be in 1..=sampling.fine");
        }
        if self.cnn.channels.is_empty() {
            return bad("cnn.channels must list at least one stage");
        }
        self.variant()?;
        self.transformer_config(self.variant()?, 1)?;
        Ok(())
    }

    pub fn variant(&self) -> Result<Variant> {
        self.variant.parse().map_err(|e: irt_core::Error| IrtError::Config(e.to_string()))
    }

    pub fn sampling(&self) -> SamplingConfig {
        SamplingConfig { coarse: self.sampling.coarse, fine: self.sampling.fine }
    }

    pub fn field_config(&self, scene_box: SceneBox) -> FieldConfig {
        let f = &self.field;
        FieldConfig {
            pos_freqs: f.pos_freqs,
            dir_freqs: f.dir_freqs,
            trunk_width: f.trunk_width,
            trunk_depth: f.trunk_depth,
            skip_layer: f.skip_layer,
            dir_width: f.dir_width,
            scene_box,
        }
    }

    pub fn cnn_config(&self, classes: usize) -> CnnConfig {
        let mut channels = vec![3];
        channels.extend(&self.cnn.channels);
        CnnConfig { channels, classes }
    }

    pub fn transformer_config(&self, variant: Variant, classes: usize) -> Result<TransformerConfig> {
        let t = &self.transformer;
        let c = TransformerConfig {
            variant,
            k: t.k,
            layers: t.layers,
            heads: t.heads,
            model_dim: t.model_dim,
            mlp_ratio: t.mlp_ratio,
            semantic_dim: t.semantic_dim,
            feature_dim: self.field.trunk_width,
            cnn_dim: if variant.uses_cnn() { *self.cnn.channels.last().unwrap_or(&0) } else { 0 },
            classes,
        };
        c.validate().map_err(|e| IrtError::Config(e.to_string()))?;
        Ok(c)
    }
}

impl Stage {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, decay_factor: self.decay_factor, decay_steps: self.decay_steps, ..AdamConfig::default() }
    }
}
