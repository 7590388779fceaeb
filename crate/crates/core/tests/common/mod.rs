#![allow(dead_code)]

use gtpt::schema::Mode;
use gtpt::synthdata::{make_sample, Geometry};
use gtpt::training::{prepare, Example};
use gtpt::{ModelConfig, Result};

/// d = 8, two heads, 2 + 2 layers, a 16×16 image and 16 visual tokens.
pub fn micro_config(mode: Mode) -> ModelConfig {
    ModelConfig {
        mode,
        image_height: 16,
        image_width: 16,
        stem_layers: 2,
        stem_channels: 4,
        embed_dim: 8,
        heads: 2,
        coarse_layers: 2,
        h2k_layer: 1,
        fine_layers: 2,
        fine_prune_layer: 1,
        ..ModelConfig::default()
    }
}

/// One synthetic example sized for `cfg`.
pub fn example(cfg: &ModelConfig, seed: u64) -> Result<Example<f64>> {
    let s = make_sample(seed, &cfg.schema(), &Geometry::default(), cfg.image_height, cfg.image_width)?;
    prepare(&s, cfg)
}
