//! Experiment configuration: a TOML document with one table per concern.
//! Omitted keys take the reference defaults; unknown keys are rejected.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pfedpt_core::analysis::SimilarityMetric;
use pfedpt_core::data::{PartitionConfig, PartitionScheme, SyntheticConfig};
use pfedpt_core::engine::{AlgorithmTag, TrainConfig};
use pfedpt_core::nn::{Architecture, CnnWidths, ModelSpec};
use pfedpt_core::prompting::{PromptMode, PromptSpec, PromptTemplate};
use pfedpt_core::rng::derive_seed;
use serde::{Deserialize, Serialize};

/// Environment variable supplying the default dataset directory.
pub const DATA_ROOT_ENV: &str = "PFEDPT_DATA_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root seed; every unset block seed derives from it.
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetBlock,
    #[serde(default)]
    pub partition: PartitionBlock,
    #[serde(default)]
    pub model: ModelBlock,
    #[serde(default)]
    pub prompt: PromptBlock,
    #[serde(default)]
    pub train: TrainBlock,
    #[serde(default)]
    pub output: OutputBlock,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepBlock>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    Cifar10,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetBlock {
    pub source: DataSource,
    /// CIFAR directory; defaults to `$PFEDPT_DATA_ROOT`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Map bytes onto `[-1, 1]` with mean and std 0.5; off maps onto `[0, 1]`.
    #[serde(default = "yes")]
    pub normalize: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticBlock>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticBlock {
    pub classes: usize,
    pub shape: [usize; 3],
    pub n_per_class: usize,
    pub n_test_per_class: Option<usize>,
    pub noise_sigma: f64,
    pub seed: Option<u64>,
}

impl Default for SyntheticBlock {
    fn default() -> Self {
        Self {
            classes: 10,
            shape: [3, 32, 32],
            n_per_class: 100,
            n_test_per_class: None,
            noise_sigma: 1.0,
            seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionBlock {
    pub scheme: PartitionScheme,
    pub alpha: f64,
    pub classes_per_client: usize,
    /// Participating clients N.
    pub clients: usize,
    /// Extra clients partitioned alongside but never trained, used for
    /// new-client adaptation.
    pub holdout_clients: usize,
    pub min_samples: usize,
    pub max_retries: usize,
    pub seed: Option<u64>,
}

impl Default for PartitionBlock {
    fn default() -> Self {
        Self {
            scheme: PartitionScheme::Dirichlet,
            alpha: 0.3,
            classes_per_client: 5,
            clients: 50,
            holdout_clients: 0,
            min_samples: 10,
            max_retries: 100,
            seed: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchitectureName {
    CnnPaper,
    MlpTiny,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelBlock {
    pub architecture: ArchitectureName,
    /// Hidden width of mlp-tiny; 0 makes it linear.
    pub hidden: usize,
    pub widths: CnnWidths,
    /// Defaults to the dataset's class count.
    pub num_classes: Option<usize>,
}

impl Default for ModelBlock {
    fn default() -> Self {
        Self {
            architecture: ArchitectureName::CnnPaper,
            hidden: 64,
            widths: CnnWidths::default(),
            num_classes: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptBlock {
    pub template: PromptTemplate,
    /// Padding width or patch side p.
    pub size: usize,
    pub mode: PromptMode,
}

impl Default for PromptBlock {
    fn default() -> Self {
        Self {
            template: PromptTemplate::Padding,
            size: 4,
            mode: PromptMode::Add,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainBlock {
    /// More than one tag runs a comparison on the same partition.
    pub algorithms: Vec<AlgorithmTag>,
    pub rounds: usize,
    pub sample_fraction: f64,
    pub batch_size: usize,
    pub backbone_epochs: usize,
    pub prompt_epochs: usize,
    pub backbone_lr: f64,
    pub prompt_lr: f64,
    pub prox_mu: f64,
    pub head_lr: f64,
    pub head_epochs: usize,
    pub workers: usize,
    pub seed: Option<u64>,
}

impl Default for TrainBlock {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            algorithms: vec![AlgorithmTag::PFEDPT],
            rounds: t.rounds,
            sample_fraction: t.sample_fraction,
            batch_size: t.batch_size,
            backbone_epochs: t.backbone_epochs,
            prompt_epochs: t.prompt_epochs,
            backbone_lr: t.backbone_lr,
            prompt_lr: t.prompt_lr,
            prox_mu: t.prox_mu,
            head_lr: t.head_lr,
            head_epochs: t.head_epochs,
            workers: t.workers,
            seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputBlock {
    pub directory: PathBuf,
    pub checkpoints: bool,
    pub drift: bool,
    pub similarity: bool,
    pub similarity_metric: SimilarityMetric,
    pub probe_images: usize,
    /// Needs `partition.holdout_clients ≥ 1`.
    pub finetune: bool,
    pub finetune_budget: usize,
    pub finetune_epochs: usize,
    pub embeddings: bool,
    /// Test samples per client in the embeddings export.
    pub embedding_samples: usize,
    /// Record per-round wall time; off keeps round CSVs byte-reproducible.
    pub wall_time: bool,
}

impl Default for OutputBlock {
    fn default() -> Self {
        Self {
            directory: PathBuf::from("runs"),
            checkpoints: true,
            drift: true,
            similarity: true,
            similarity_metric: SimilarityMetric::Cosine,
            probe_images: 100,
            finetune: false,
            finetune_budget: 400,
            finetune_epochs: 10,
            embeddings: false,
            embedding_samples: 50,
            wall_time: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepBlock {
    pub templates: Vec<PromptTemplate>,
    pub sizes: Vec<usize>,
}

fn yes() -> bool {
    true
}

/// Reads, parses and validates a configuration file.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    parse_config_str(&text).with_context(|| format!("in config {}", path.display()))
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let de = toml::Deserializer::new(text);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        anyhow::anyhow!("{path}: {}", e.into_inner().message())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

impl ExperimentConfig {
    pub fn partition_seed(&self) -> u64 {
        self.partition.seed.unwrap_or_else(|| derive_seed(self.seed, "partition", &[]))
    }

    pub fn train_seed(&self) -> u64 {
        self.train.seed.unwrap_or_else(|| derive_seed(self.seed, "train", &[]))
    }

    pub fn synthetic_seed(&self) -> u64 {
        self.dataset
            .synthetic
            .as_ref()
            .and_then(|s| s.seed)
            .unwrap_or_else(|| derive_seed(self.seed, "synthetic", &[]))
    }

    /// `(shape, classes)` of the configured dataset.
    pub fn data_geometry(&self) -> ([usize; 3], usize) {
        match self.dataset.source {
            DataSource::Cifar10 => ([3, 32, 32], 10),
            DataSource::Synthetic => {
                let s = self.dataset.synthetic.clone().unwrap_or_default();
                (s.shape, s.classes)
            }
        }
    }

    pub fn synthetic_config(&self) -> SyntheticConfig {
        let s = self.dataset.synthetic.clone().unwrap_or_default();
        SyntheticConfig {
            classes: s.classes,
            shape: s.shape,
            n_per_class: s.n_per_class,
            n_test_per_class: s.n_test_per_class,
            noise_sigma: s.noise_sigma,
            seed: self.synthetic_seed(),
        }
    }

    pub fn data_path(&self) -> Option<PathBuf> {
        self.dataset
            .path
            .clone()
            .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
    }

    pub fn partition_config(&self) -> PartitionConfig {
        let p = &self.partition;
        PartitionConfig {
            scheme: p.scheme,
            alpha: p.alpha,
            classes_per_client: p.classes_per_client,
            num_clients: p.clients + p.holdout_clients,
            seed: self.partition_seed(),
            min_samples: p.min_samples,
            max_retries: p.max_retries,
        }
    }

    pub fn model_spec(&self) -> ModelSpec {
        let (shape, classes) = self.data_geometry();
        let architecture = match self.model.architecture {
            ArchitectureName::CnnPaper => Architecture::CnnPaper(self.model.widths.clone()),
            ArchitectureName::MlpTiny => Architecture::MlpTiny {
                hidden: self.model.hidden,
            },
        };
        ModelSpec {
            architecture,
            input_shape: shape,
            num_classes: self.model.num_classes.unwrap_or(classes),
        }
    }

    pub fn prompt_spec_for(&self, template: PromptTemplate, size: usize) -> pfedpt_core::Result<PromptSpec> {
        Ok(PromptSpec::new(template, size, self.data_geometry().0)?.with_mode(self.prompt.mode))
    }

    pub fn prompt_spec(&self) -> pfedpt_core::Result<PromptSpec> {
        self.prompt_spec_for(self.prompt.template, self.prompt.size)
    }

    pub fn train_config(&self, algorithm: AlgorithmTag) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            algorithm,
            rounds: t.rounds,
            clients: self.partition.clients,
            sample_fraction: t.sample_fraction,
            batch_size: t.batch_size,
            backbone_epochs: t.backbone_epochs,
            prompt_epochs: t.prompt_epochs,
            backbone_lr: t.backbone_lr,
            prompt_lr: t.prompt_lr,
            prox_mu: t.prox_mu,
            head_lr: t.head_lr,
            head_epochs: t.head_epochs,
            seed: self.train_seed(),
            workers: t.workers,
            record_wall_time: self.output.wall_time,
        }
    }

    /// Cross-block checks; every message starts with the offending key path.
    pub fn validate(&self) -> Result<()> {
        let (shape, classes) = self.data_geometry();
        if let Some(s) = &self.dataset.synthetic {
            if self.dataset.source != DataSource::Synthetic {
                bail!("dataset.synthetic: only valid with source = \"synthetic\"");
            }
            if s.classes < 2 {
                bail!("dataset.synthetic.classes: need at least 2 classes");
            }
            if s.shape.contains(&0) {
                bail!("dataset.synthetic.shape: dimensions must be positive");
            }
            if s.n_per_class == 0 || s.n_test_per_class == Some(0) {
                bail!("dataset.synthetic: sample counts must be positive");
            }
            if !(s.noise_sigma >= 0.0 && s.noise_sigma.is_finite()) {
                bail!("dataset.synthetic.noise_sigma: must be finite and non-negative");
            }
        }

        let p = &self.partition;
        if p.alpha.is_nan() || p.alpha <= 0.0 {
            bail!("partition.alpha: alpha must be positive");
        }
        if p.clients == 0 {
            bail!("partition.clients: must be positive");
        }
        if p.classes_per_client == 0 || p.classes_per_client > classes {
            bail!("partition.classes_per_client: must lie in [1, {classes}]");
        }
        self.partition_config()
            .validate(classes)
            .map_err(|e| anyhow::anyhow!("partition: {e}"))?;

        let m = &self.model;
        if m.num_classes.is_some_and(|k| k != classes) {
            bail!("model.num_classes: dataset has {classes} classes");
        }
        self.model_spec().validate().map_err(|e| anyhow::anyhow!("model: {e}"))?;
        pfedpt_core::nn::build_model::<f32>(&self.model_spec(), 0)
            .map(drop)
            .map_err(|e| anyhow::anyhow!("model: {e} for input {shape:?}"))?;

        self.prompt_spec().map_err(|e| anyhow::anyhow!("prompt.size: {e}"))?;

        let t = &self.train;
        if t.algorithms.is_empty() {
            bail!("train.algorithms: list at least one algorithm");
        }
        if !(t.sample_fraction > 0.0 && t.sample_fraction <= 1.0) {
            bail!("train.sample_fraction: must lie in (0, 1]");
        }
        if t.batch_size == 0 {
            bail!("train.batch_size: must be positive");
        }
        if t.workers == 0 {
            bail!("train.workers: must be positive");
        }
        for (key, v) in [
            ("backbone_lr", t.backbone_lr),
            ("prompt_lr", t.prompt_lr),
            ("prox_mu", t.prox_mu),
            ("head_lr", t.head_lr),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                bail!("train.{key}: must be finite and non-negative");
            }
        }

        let o = &self.output;
        if o.similarity && o.probe_images == 0 {
            bail!("output.probe_images: must be positive when similarity is on");
        }
        if o.finetune && p.holdout_clients == 0 {
            bail!("output.finetune: needs partition.holdout_clients >= 1");
        }
        if o.finetune && o.finetune_budget == 0 {
            bail!("output.finetune_budget: must be positive");
        }

        if let Some(s) = &self.sweep {
            if s.templates.is_empty() || s.sizes.is_empty() {
                bail!("sweep: templates and sizes must be non-empty");
            }
        }
        Ok(())
    }
}
