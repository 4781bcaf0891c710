#![allow(dead_code)]

use std::path::Path;

use irt::config::TrainConfig;
use irt::dataset::{write_dataset, Dataset};
use irt_core::scene::{micro_town, micro_town_rig};

/// A micro-town dataset at `size`×`size` pixels.
pub fn micro_town_data(dir: &Path, size: usize) -> Dataset {
    let scene = micro_town();
    let rig = micro_town_rig(&scene, size);
    write_dataset(dir, "micro-town", &scene, &rig).unwrap();
    Dataset::open(dir).unwrap()
}

/// Networks and budgets small enough for a test to run in seconds.
pub fn tiny_config() -> TrainConfig {
    let mut c = TrainConfig::micro_town();
    c.render_chunk = 64;
    c.sampling.coarse = 8;
    c.sampling.fine = 8;
    c.field.pos_freqs = 3;
    c.field.dir_freqs = 1;
    c.field.trunk_width = 12;
    c.field.trunk_depth = 2;
    c.field.skip_layer = Some(1);
    c.field.dir_width = 6;
    for s in [&mut c.color, &mut c.seg] {
        s.iterations = 6;
        s.batch = 16;
        s.decay_steps = 6;
        s.checkpoint_every = 0;
        s.eval_every = 3;
        s.eval_views = 1;
        s.log_every = 0;
    }
    c.transformer.k = 4;
    c.transformer.layers = 1;
    c.transformer.heads = 2;
    c.transformer.model_dim = 8;
    c.transformer.semantic_dim = 4;
    c.cnn.channels = vec![4, 4];
    c
}
