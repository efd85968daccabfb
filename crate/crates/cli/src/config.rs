//! Declarative pipeline configuration: one TOML file with a section per
//! pipeline module, plus a global seed. Unknown keys are rejected. Every
//! command writes the fully-resolved config next to its outputs.

use std::path::Path;

use grouper_core::clusterer::{KMeansConfig, KMeansInit};
use grouper_core::encoder::{FeatureConfig, TfMode};
use grouper_core::trainer::{NegativeMode, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::{CliError, CliResult};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub corpus: CorpusSection,
    pub encoder: EncoderSection,
    pub clusterer: ClustererSection,
    pub dro: DroSection,
    pub trainer: TrainerSection,
    pub analysis: AnalysisSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub num_topics: usize,
    pub docs_per_topic: Vec<usize>,
    pub intra_link_prob: f64,
    pub cross_link_prob: f64,
    pub hard_topics: Vec<usize>,
    pub vocab_size: usize,
    /// Fraction of edges held out as evaluation queries.
    pub eval_fraction: f64,
    /// Random negatives per pair for `pairs`.
    pub negatives_k: usize,
    pub min_anchor_tokens: usize,
    /// Keep only this top fraction of anchors by the heuristic quality
    /// score; absent = no cut.
    pub quality_cut: Option<f64>,
    pub stoplist_file: Option<String>,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            num_topics: 8,
            docs_per_topic: vec![250; 8],
            intra_link_prob: 0.02,
            cross_link_prob: 0.0005,
            hard_topics: vec![],
            vocab_size: 6000,
            eval_fraction: 0.1,
            negatives_k: 4,
            min_anchor_tokens: 2,
            quality_cut: None,
            stoplist_file: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub hash_dim: usize,
    pub embed_dim: usize,
    pub temperature: f64,
    pub tf_mode: TfMode,
    pub lowercase: bool,
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self {
            hash_dim: 32_768,
            embed_dim: 64,
            temperature: 0.05,
            tf_mode: TfMode::Log1p,
            lowercase: true,
        }
    }
}

impl EncoderSection {
    pub fn feature_config(&self) -> FeatureConfig {
        FeatureConfig {
            hash_dim: self.hash_dim,
            tf_mode: self.tf_mode,
            lowercase: self.lowercase,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClustererSection {
    pub k: usize,
    pub batch_size: usize,
    pub max_iters: usize,
    pub min_size: usize,
    pub init: KMeansInit,
}

impl Default for ClustererSection {
    fn default() -> Self {
        Self {
            k: 500,
            batch_size: 1024,
            max_iters: 100,
            min_size: 128,
            init: KMeansInit::KmeansPlusPlus,
        }
    }
}

impl ClustererSection {
    pub fn kmeans_config(&self, seed: u64) -> KMeansConfig {
        KMeansConfig {
            k: self.k,
            batch_size: self.batch_size,
            max_iters: self.max_iters,
            min_size: self.min_size,
            seed,
            init: self.init,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DroSection {
    pub enabled: bool,
    pub weight_lr: f64,
    pub update_interval: usize,
    /// Experimental: average each group's interval loss over the group's
    /// own example count instead of the interval size.
    pub per_group_mean: bool,
}

impl Default for DroSection {
    fn default() -> Self {
        Self {
            enabled: true,
            weight_lr: 3e-4,
            update_interval: 500,
            per_group_mean: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub model_lr: f64,
    pub negatives: NegativeMode,
    pub negatives_k: usize,
    pub negative_refresh_steps: usize,
    pub embedder_epochs: usize,
    pub embedder_batch_size: usize,
    pub embedder_model_lr: f64,
}

impl Default for TrainerSection {
    fn default() -> Self {
        Self {
            epochs: 2,
            batch_size: 768,
            model_lr: 3e-5,
            negatives: NegativeMode::Bm25,
            negatives_k: 4,
            negative_refresh_steps: 0,
            embedder_epochs: 1,
            embedder_batch_size: 384,
            embedder_model_lr: 3e-5,
        }
    }
}

impl TrainerSection {
    pub fn retriever_config(&self, seed: u64, dro_enabled: bool) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            model_lr: self.model_lr,
            negatives: self.negatives,
            negatives_k: self.negatives_k,
            negative_refresh_steps: self.negative_refresh_steps,
            shuffle_seed: seed,
            dro_enabled,
        }
    }

    pub fn embedder_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.embedder_epochs,
            batch_size: self.embedder_batch_size,
            model_lr: self.embedder_model_lr,
            negatives: NegativeMode::InBatchOnly,
            negatives_k: 0,
            negative_refresh_steps: 0,
            shuffle_seed: seed,
            dro_enabled: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    pub resolution: usize,
    pub range: f64,
    pub landscape_batch: usize,
    pub top_m: usize,
    pub flat_threshold: f64,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            resolution: 21,
            range: 0.3,
            landscape_batch: 2048,
            top_m: 30,
            flat_threshold: 1.5,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let content = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                CliError::missing_artifact(format!("config file {}: not found", path.display()))
            } else {
                CliError::runtime(format!("config file {}: {e}", path.display()))
            }
        })?;
        let cfg: PipelineConfig = toml::from_str(&content)
            .map_err(|e| CliError::config(format!("config file {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.encoder
            .feature_config()
            .validate()
            .map_err(|e| CliError::config(e.to_string()))?;
        self.clusterer
            .kmeans_config(0)
            .validate()
            .map_err(|e| CliError::config(e.to_string()))?;
        if self.encoder.embed_dim < 2 {
            return Err(CliError::config("encoder.embed_dim must be >= 2".into()));
        }
        if !(self.encoder.temperature > 0.0) {
            return Err(CliError::config(
                "encoder.temperature must be positive".into(),
            ));
        }
        if self.dro.update_interval == 0 {
            return Err(CliError::config("dro.update_interval must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.corpus.eval_fraction) {
            return Err(CliError::config(
                "corpus.eval_fraction must lie in [0,1]".into(),
            ));
        }
        if let Some(f) = self.corpus.quality_cut {
            if !(0.0..=1.0).contains(&f) {
                return Err(CliError::config(
                    "corpus.quality_cut must lie in [0,1]".into(),
                ));
            }
        }
        if self.analysis.resolution.is_multiple_of(2) {
            return Err(CliError::config("analysis.resolution must be odd".into()));
        }
        Ok(())
    }

    /// Write the fully-resolved configuration next to the run's outputs.
    pub fn write_resolved(&self, out_dir: &Path) -> CliResult<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| CliError::runtime(format!("serializing resolved config: {e}")))?;
        std::fs::write(out_dir.join("config.resolved.toml"), text)
            .map_err(|e| CliError::runtime(format!("writing resolved config: {e}")))?;
        Ok(())
    }
}
