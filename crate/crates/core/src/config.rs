//! Model and training configuration, read from a single JSON document.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{DenseLayout, KeypointSchema, Mode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntroductionMode {
    /// Every keypoint token from the first layer.
    Dense,
    /// Sparse and part tokens from the first layer, dense at the transition.
    SparseDense,
    /// One human token, expanded mid coarse encoder, then dense at the transition.
    HumanSparseDense,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    /// Group attention with the shared sparse tokens in every key/value set.
    Mhga,
    /// Plain self-attention inside each group.
    Mhsa,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub grouping: bool,
    pub masking: bool,
    pub attention: AttentionKind,
    pub pruning: bool,
    pub gp_loss: bool,
    pub introduction_mode: IntroductionMode,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            grouping: true,
            masking: true,
            attention: AttentionKind::Mhga,
            pruning: true,
            gp_loss: true,
            introduction_mode: IntroductionMode::HumanSparseDense,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Weights of the pruned, unpruned and global-to-local terms.
    pub loss_weights: [f64; 3],
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-4,
            steps: 300,
            batch_size: 16,
            loss_weights: [1.0, 1.0, 1.0],
            checkpoint_every: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub mode: Mode,
    pub image_height: usize,
    pub image_width: usize,
    pub image_channels: usize,
    /// Number of stride-2 conv blocks; the stem downsamples by `2^stem_layers`.
    pub stem_layers: usize,
    pub stem_channels: usize,
    pub patch_height: usize,
    pub patch_width: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub coarse_layers: usize,
    /// 1-based coarse layer after which the human token is expanded.
    pub h2k_layer: usize,
    pub fine_layers: usize,
    /// 1-based fine layer after which the third pruning fires.
    pub fine_prune_layer: usize,
    /// Cumulative pruning rates of the three stages.
    pub prune_rates: [f64; 3],
    pub simcc_split: usize,
    pub target_sigma: f64,
    pub dense_layout: DenseLayout,
    pub ablation: Ablation,
    pub seed: u64,
    pub train: TrainConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Body,
            image_height: 64,
            image_width: 48,
            image_channels: 1,
            stem_layers: 2,
            stem_channels: 16,
            patch_height: 1,
            patch_width: 1,
            embed_dim: 32,
            heads: 4,
            coarse_layers: 6,
            h2k_layer: 3,
            fine_layers: 6,
            fine_prune_layer: 3,
            prune_rates: [0.3, 0.55, 0.75],
            simcc_split: 2,
            target_sigma: 2.0,
            dense_layout: DenseLayout::DESK,
            ablation: Ablation::default(),
            seed: 0,
            train: TrainConfig::default(),
        }
    }
}

/// Parses and validates a JSON config; absent keys take defaults and
/// unknown keys are rejected.
pub fn validate_config(json: &str) -> Result<ModelConfig> {
    let cfg: ModelConfig =
        serde_json::from_str(json).map_err(|e| Error::config("<document>", e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// A 1-based layer index inside `1..=layers`, or 0 for an empty stack.
fn check_layer_index(field: &str, index: usize, layers: usize) -> Result<()> {
    let ok = if layers == 0 { index == 0 } else { (1..=layers).contains(&index) };
    if ok {
        Ok(())
    } else if layers == 0 {
        Err(Error::config(field, "must be 0 when there are no layers"))
    } else {
        Err(Error::config(field, format!("must lie in 1..={layers}")))
    }
}

impl ModelConfig {
    pub fn from_file(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        validate_config(&text)
    }

    /// Whole-body model at 256×192 with a 192-wide embedding, 8 heads and
    /// 6 + 6 layers. The 192-channel stem stands in for the cost of a
    /// light CNN backbone, which pruning never touches.
    pub fn s_like() -> Self {
        Self {
            mode: Mode::Wholebody,
            image_height: 256,
            image_width: 192,
            stem_channels: 192,
            patch_height: 4,
            patch_width: 4,
            embed_dim: 192,
            heads: 8,
            dense_layout: DenseLayout::FULL,
            ..Self::default()
        }
    }

    pub fn downsample(&self) -> usize {
        1 << self.stem_layers
    }

    pub fn feature_height(&self) -> usize {
        self.image_height / self.downsample()
    }

    pub fn feature_width(&self) -> usize {
        self.image_width / self.downsample()
    }

    /// Channels of the stem output.
    pub fn feature_channels(&self) -> usize {
        if self.stem_layers == 0 {
            self.image_channels
        } else {
            self.stem_channels
        }
    }

    pub fn grid_rows(&self) -> usize {
        self.feature_height() / self.patch_height
    }

    pub fn grid_cols(&self) -> usize {
        self.feature_width() / self.patch_width
    }

    /// Number of visual tokens before any pruning.
    pub fn n_vis(&self) -> usize {
        self.grid_rows() * self.grid_cols()
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn patch_dim(&self) -> usize {
        self.feature_channels() * self.patch_height * self.patch_width
    }

    pub fn bins_x(&self) -> usize {
        self.simcc_split * self.image_width
    }

    pub fn bins_y(&self) -> usize {
        self.simcc_split * self.image_height
    }

    pub fn schema(&self) -> KeypointSchema {
        KeypointSchema::new(self.mode, self.dense_layout)
    }

    pub fn with_mode(&self, mode: Mode) -> Self {
        Self {
            mode,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_height", self.image_height),
            ("image_width", self.image_width),
            ("image_channels", self.image_channels),
            ("patch_height", self.patch_height),
            ("patch_width", self.patch_width),
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("simcc_split", self.simcc_split),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::config(
                "heads",
                format!("embed_dim {} is not divisible by heads {}", self.embed_dim, self.heads),
            ));
        }
        if self.stem_layers > 0 && self.stem_channels == 0 {
            return Err(Error::config("stem_channels", "must be positive"));
        }
        let ds = self.downsample();
        if self.image_height % ds != 0 || self.image_width % ds != 0 {
            return Err(Error::config(
                "stem_layers",
                format!(
                    "image {}x{} is not divisible by the stem downsample {ds}",
                    self.image_height, self.image_width
                ),
            ));
        }
        if self.feature_height() % self.patch_height != 0 {
            return Err(Error::config(
                "patch_height",
                format!(
                    "feature height {} is not divisible by {}",
                    self.feature_height(),
                    self.patch_height
                ),
            ));
        }
        if self.feature_width() % self.patch_width != 0 {
            return Err(Error::config(
                "patch_width",
                format!(
                    "feature width {} is not divisible by {}",
                    self.feature_width(),
                    self.patch_width
                ),
            ));
        }
        check_layer_index("h2k_layer", self.h2k_layer, self.coarse_layers)?;
        check_layer_index("fine_prune_layer", self.fine_prune_layer, self.fine_layers)?;
        let [a1, a2, a3] = self.prune_rates;
        if !(0.0..1.0).contains(&a1) || !(0.0..1.0).contains(&a2) || !(0.0..1.0).contains(&a3) {
            return Err(Error::config("prune_rates", "every rate must lie in [0, 1)"));
        }
        if a2 < a1 || a3 < a2 {
            return Err(Error::config(
                "prune_rates",
                format!("rates must be non-decreasing, got ({a1}, {a2}, {a3})"),
            ));
        }
        if !(self.target_sigma > 0.0) {
            return Err(Error::config("target_sigma", "must be positive"));
        }
        let t = &self.train;
        if !(t.lr > 0.0) || t.batch_size == 0 {
            return Err(Error::config("train", "lr and batch_size must be positive"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }
}
