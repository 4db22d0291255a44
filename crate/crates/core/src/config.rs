//! TOML experiment configuration: strict parsing, defaults, validation.
//!
//! Every field has a default, so a minimal config file is valid; unknown
//! keys are rejected by name. `resolved()` fills the derived fields so the
//! echoed config is fully explicit.

use crate::data::{make_synthetic_dataset, split_classes, Dataset, DatasetSplit, EpisodeSpec};
use crate::embedding::{BlockKind, EmbeddingConfig};
use crate::error::{DcnError, Result};
use crate::relation::RelationConfig;
use crate::train::{PretrainSettings, RelationSettings, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Where images come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Directory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub source: DataSource,
    /// Class-folder root; required for `directory`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    /// Synthetic generation: class and per-class image counts.
    pub classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    /// Synthetic intra-class variation in [0, 1].
    pub difficulty: f64,
    /// Meta-train / meta-val / meta-test class fractions.
    pub split_fractions: [f64; 3],
    /// Seed for synthetic generation and the class split.
    pub seed: u64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            path: None,
            classes: 20,
            per_class: 40,
            image_size: 32,
            difficulty: 0.3,
            split_fractions: [0.25, 0.25, 0.5],
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingSection {
    pub stages: usize,
    pub blocks_per_stage: Vec<usize>,
    pub channels_per_stage: Vec<usize>,
    pub block_kind: BlockKind,
    pub se_reduction: usize,
    pub stem: bool,
    pub noise: bool,
    pub noise_samples: usize,
    pub shared_epsilon: bool,
}

impl Default for EmbeddingSection {
    fn default() -> Self {
        Self {
            stages: 4,
            blocks_per_stage: vec![3, 4, 6, 3],
            channels_per_stage: vec![16, 32, 64, 128],
            block_kind: BlockKind::SqueezeExcite,
            se_reduction: 16,
            stem: false,
            noise: true,
            noise_samples: 1,
            shared_epsilon: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelationSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub blocks_per_module: Option<usize>,
    /// Aggregation weights; derived from the stage count when omitted.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score_weights: Option<Vec<f64>>,
    /// Block flavor; follows the embedding column when omitted.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub block_kind: Option<BlockKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub se_reduction: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub momentum: f64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            initial_lr: 0.1,
            lr_decay_factor: 5.0,
            lr_decay_every: 60,
            momentum: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelationPhaseSection {
    pub episodes: u64,
    pub eval_every: u64,
    pub patience: usize,
    pub val_episodes: usize,
    pub initial_lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: u64,
    pub momentum: f64,
}

impl Default for RelationPhaseSection {
    fn default() -> Self {
        Self {
            episodes: 2000,
            eval_every: 200,
            patience: 3,
            val_episodes: 40,
            initial_lr: 0.05,
            lr_decay_factor: 2.0,
            lr_decay_every: 1000,
            momentum: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub seed: u64,
    /// Training episode shape.
    pub ways: usize,
    pub shots: usize,
    pub queries_per_class: usize,
    pub deep_supervision: bool,
    pub retrain: bool,
    pub augment_pretrain: bool,
    pub augment_relation: bool,
    /// Per-level loss weights; follows the score weights when omitted.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_weights: Option<Vec<f64>>,
    pub pretrain: PretrainSection,
    pub relation: RelationPhaseSection,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            seed: 42,
            ways: 5,
            shots: 1,
            queries_per_class: 5,
            deep_supervision: true,
            retrain: true,
            augment_pretrain: true,
            augment_relation: true,
            loss_weights: None,
            pretrain: PretrainSection::default(),
            relation: RelationPhaseSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub ways: usize,
    pub shots: usize,
    pub queries_per_class: usize,
    pub episodes: usize,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            ways: 5,
            shots: 1,
            queries_per_class: 15,
            episodes: 600,
            seed: 1234,
        }
    }
}

/// One experiment, end to end.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub embedding: EmbeddingSection,
    pub relation: RelationSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl ExperimentConfig {
    /// Parse and validate; unknown keys and bad values are reported by name.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self =
            toml::from_str(text).map_err(|e| DcnError::InvalidConfig(vec![e.to_string()]))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| DcnError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    /// Copy with every derived field made explicit.
    pub fn resolved(&self) -> Self {
        let mut out = self.clone();
        let rel = self.relation_config();
        out.relation.blocks_per_module = Some(rel.blocks_per_module);
        out.relation.score_weights = Some(rel.score_weights.clone());
        out.relation.block_kind = Some(rel.block_kind);
        out.relation.se_reduction = Some(rel.se_reduction);
        out.train.loss_weights = Some(
            self.train
                .loss_weights
                .clone()
                .unwrap_or(rel.score_weights),
        );
        out
    }

    pub fn embedding_config(&self) -> EmbeddingConfig {
        EmbeddingConfig {
            stages: self.embedding.stages,
            blocks_per_stage: self.embedding.blocks_per_stage.clone(),
            channels_per_stage: self.embedding.channels_per_stage.clone(),
            block_kind: self.embedding.block_kind,
            se_reduction: self.embedding.se_reduction,
            stem: self.embedding.stem,
            noise_enabled: self.embedding.noise,
            noise_samples: self.embedding.noise_samples,
            shared_epsilon: self.embedding.shared_epsilon,
            num_pretrain_classes: None,
        }
    }

    pub fn relation_config(&self) -> RelationConfig {
        let mut rel = RelationConfig::for_embedding(&self.embedding_config());
        if let Some(b) = self.relation.blocks_per_module {
            rel.blocks_per_module = b;
        }
        if let Some(w) = &self.relation.score_weights {
            rel.score_weights = w.clone();
        }
        if let Some(k) = self.relation.block_kind {
            rel.block_kind = k;
        }
        if let Some(r) = self.relation.se_reduction {
            rel.se_reduction = r;
        }
        rel
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            pretrain: PretrainSettings {
                epochs: self.train.pretrain.epochs,
                batch_size: self.train.pretrain.batch_size,
                initial_lr: self.train.pretrain.initial_lr,
                lr_decay_factor: self.train.pretrain.lr_decay_factor,
                lr_decay_every: self.train.pretrain.lr_decay_every,
                momentum: self.train.pretrain.momentum,
            },
            relation: RelationSettings {
                episodes: self.train.relation.episodes,
                eval_every: self.train.relation.eval_every,
                patience: self.train.relation.patience,
                val_episodes: self.train.relation.val_episodes,
                initial_lr: self.train.relation.initial_lr,
                lr_decay_factor: self.train.relation.lr_decay_factor,
                lr_decay_every: self.train.relation.lr_decay_every,
                momentum: self.train.relation.momentum,
            },
            episode: EpisodeSpec::new(
                self.train.ways,
                self.train.shots,
                self.train.queries_per_class,
            ),
            loss_weights: self.train.loss_weights.clone(),
            deep_supervision: self.train.deep_supervision,
            noise: self.embedding.noise,
            retrain: self.train.retrain,
            augment_pretrain: self.train.augment_pretrain,
            augment_relation: self.train.augment_relation,
            seed: self.train.seed,
        }
    }

    pub fn eval_spec(&self) -> EpisodeSpec {
        EpisodeSpec::new(self.eval.ways, self.eval.shots, self.eval.queries_per_class)
    }

    /// Field-by-field validation; all problems are reported together.
    pub fn validate(&self) -> Result<()> {
        fn absorb(errors: &mut Vec<String>, result: Result<()>) {
            match result {
                Ok(()) => {}
                Err(DcnError::InvalidConfig(list)) => errors.extend(list),
                Err(e) => errors.push(e.to_string()),
            }
        }
        let mut errors = Vec::new();

        let d = &self.dataset;
        match d.source {
            DataSource::Directory => {
                if d.path.is_none() {
                    errors.push("dataset.path is required when dataset.source is \"directory\"".to_string());
                }
            }
            DataSource::Synthetic => {
                if d.classes < 2 {
                    errors.push("dataset.classes must be at least 2".to_string());
                }
                if d.per_class < 2 {
                    errors.push("dataset.per_class must be at least 2".to_string());
                }
                if !(0.0..=1.0).contains(&d.difficulty) {
                    errors.push("dataset.difficulty must be in [0, 1]".to_string());
                }
            }
        }
        if d.image_size == 0 {
            errors.push("dataset.image_size must be positive".to_string());
        }
        let frac_sum: f64 = d.split_fractions.iter().sum();
        if d.split_fractions.iter().any(|&f| !f.is_finite() || f < 0.0) {
            errors.push("dataset.split_fractions must be finite and non-negative".to_string());
        } else if (frac_sum - 1.0).abs() > 1e-9 {
            errors.push(format!(
                "dataset.split_fractions must sum to 1 (got {frac_sum})"
            ));
        }

        let embed = self.embedding_config();
        absorb(&mut errors, embed.validate());
        absorb(&mut errors, self.relation_config().validate());
        absorb(&mut errors, self.train_config().validate());
        if embed.validate().is_ok() && d.image_size > 0 {
            if let Err(e) = embed.stage_output_sizes(d.image_size) {
                errors.push(format!("dataset.image_size: {e}"));
            }
        }

        let eval_spec = self.eval_spec();
        if let Err(e) = eval_spec.validate() {
            errors.push(format!("eval episode shape: {e}"));
        }
        if self.eval.episodes == 0 {
            errors.push("eval.episodes must be at least 1".to_string());
        }

        if errors.is_empty() {
            Ok(())
        } else {
            Err(DcnError::InvalidConfig(errors))
        }
    }

    /// Materialize the configured dataset.
    pub fn build_dataset(&self) -> Result<Dataset> {
        match self.dataset.source {
            DataSource::Synthetic => make_synthetic_dataset(
                self.dataset.classes,
                self.dataset.per_class,
                self.dataset.image_size,
                self.dataset.difficulty,
                self.dataset.seed,
            ),
            DataSource::Directory => {
                let path = self.dataset.path.as_ref().ok_or_else(|| {
                    DcnError::InvalidConfig(vec![
                        "dataset.path is required when dataset.source is \"directory\"".to_string(),
                    ])
                })?;
                crate::data::load_directory_dataset(path, self.dataset.image_size)
            }
        }
    }

    /// Split the dataset's classes per the configured fractions.
    pub fn build_split(&self, dataset: &Dataset) -> Result<DatasetSplit> {
        let [a, b, c] = self.dataset.split_fractions;
        split_classes(dataset, (a, b, c), self.dataset.seed)
    }
}
