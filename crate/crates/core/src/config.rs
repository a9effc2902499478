//! Structured run configuration, loaded from TOML.
//!
//! Every section has defaults, so a config file only lists what it changes:
//!
//! ```toml
//! [model]
//! cqg = false
//! num_queries = 9
//!
//! [train]
//! lr = 1e-3
//! epochs = 30
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::metrics::MetricConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    /// Patch mean-pooling plus affine projection; text embedding table.
    #[default]
    Toy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub patch: usize,
    /// Channel count of precomputed feature grids, when manifests carry them.
    pub feature_channels: Option<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            kind: BackboneKind::Toy,
            patch: 8,
            feature_channels: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionInit {
    #[default]
    Grid,
    Random,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxMode {
    #[default]
    Absolute,
    /// Offsets added to the logit of the query's region box. Regions belong
    /// to content-aware query generation, so with `cqg = false` boxes are
    /// predicted as in `Absolute`.
    Delta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub num_queries: usize,
    pub roi_bins: usize,
    /// Sampling points per bin along each axis.
    pub roi_samples: usize,
    /// Content-aware query generation; `false` uses learned content-agnostic queries.
    pub cqg: bool,
    /// Entity-aware contrastive loss.
    pub ecl: bool,
    pub region_init: RegionInit,
    pub box_mode: BoxMode,
    pub modality_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            num_queries: 25,
            roi_bins: 3,
            roi_samples: 4,
            cqg: true,
            ecl: true,
            region_init: RegionInit::Grid,
            box_mode: BoxMode::Absolute,
            modality_embeddings: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            ffn_dim: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            ffn_dim: 128,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityAnchor {
    /// Decoder output of the matched query.
    #[default]
    Decoder,
    /// Fused visual memory pooled under the matched query's region.
    MemoryRoi,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub giou: f64,
    pub l1: f64,
    pub kl: f64,
    pub entity: f64,
    pub tau: f64,
    /// No-object confidence loss on unmatched queries.
    pub background: bool,
    /// Gaussian σ (frames) applied to the one-hot temporal targets; 0 disables.
    pub time_smoothing: f64,
    pub entity_anchor: EntityAnchor,
    /// Cosine instead of raw dot-product similarities in the contrastive loss.
    pub entity_normalize: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            giou: 2.0,
            l1: 5.0,
            kl: 5.0,
            entity: 1.0,
            tau: 0.07,
            background: true,
            time_smoothing: 0.0,
            entity_anchor: EntityAnchor::Decoder,
            entity_normalize: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Manifest { path: PathBuf },
    Synth(SynthSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: DataSource,
    pub val: Option<DataSource>,
    /// Decode rate recorded in generated manifests.
    pub fps: f64,
    /// Frames per synthetic trimmed video.
    pub num_frames: usize,
    /// Frames per synthetic untrimmed video.
    pub untrimmed_num_frames: usize,
    /// Side length of synthetic frames.
    pub resolution: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: DataSource::Synth(SynthSpec::default()),
            val: None,
            fps: 5.0,
            num_frames: 20,
            untrimmed_num_frames: 200,
            resolution: 64,
        }
    }
}

impl DataConfig {
    /// `spec` with frame count, resolution and fps taken from this section.
    pub fn apply(&self, spec: &SynthSpec) -> SynthSpec {
        let mut s = spec.clone();
        s.num_frames = if s.untrimmed_window.is_some() {
            self.untrimmed_num_frames
        } else {
            self.num_frames
        };
        s.image_size = self.resolution;
        s.fps = self.fps;
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Stop after this many optimizer steps, if set.
    pub max_iterations: Option<usize>,
    /// Evaluate the train split after every epoch.
    pub eval_train: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-4,
            epochs: 10,
            batch_size: 4,
            seed: 0,
            grad_clip: 1.0,
            max_iterations: None,
            eval_train: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub data: DataConfig,
    pub backbone: BackboneConfig,
    pub model: ModelConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub loss: LossConfig,
    pub train: TrainSection,
    pub eval: MetricConfig,
}

impl TrainConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let m = &self.model;
        if m.dim == 0 || m.dim % 4 != 0 {
            return bad(format!("model.dim must be a positive multiple of 4, got {}", m.dim));
        }
        if m.num_queries == 0 || m.roi_bins == 0 || m.roi_samples == 0 {
            return bad("model.num_queries, roi_bins and roi_samples must be ≥ 1".into());
        }
        for (name, heads, layers) in [
            ("encoder", self.encoder.heads, self.encoder.layers),
            ("decoder", self.decoder.heads, self.decoder.layers),
        ] {
            if heads == 0 || m.dim % heads != 0 {
                return bad(format!("{name}.heads must divide model.dim"));
            }
            if layers == 0 {
                return bad(format!("{name}.layers must be ≥ 1"));
            }
        }
        if self.backbone.patch == 0 {
            return bad("backbone.patch must be ≥ 1".into());
        }
        let l = &self.loss;
        let weights = [("giou", l.giou), ("l1", l.l1), ("kl", l.kl), ("entity", l.entity), ("tau", l.tau)];
        for (name, w) in weights {
            if !(w.is_finite() && w >= 0.0) {
                return bad(format!("loss.{name} must be non-negative, got {w}"));
            }
        }
        if l.tau <= 0.0 {
            return bad("loss.tau must be positive".into());
        }
        let t = &self.train;
        if !(t.lr > 0.0 && t.lr.is_finite()) || t.weight_decay < 0.0 || t.batch_size == 0 {
            return bad("train.lr must be positive, weight_decay ≥ 0, batch_size ≥ 1".into());
        }
        if !(self.data.fps > 0.0) || self.data.resolution % self.backbone.patch != 0 {
            return bad("data.fps must be positive and data.resolution divisible by backbone.patch".into());
        }
        Ok(())
    }
}
