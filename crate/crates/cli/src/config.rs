//! Declarative run configuration: one TOML file drives the whole pipeline.
//! Unknown keys are rejected. Every section seed is derived from the single
//! global seed, so `--seed` alone re-keys the entire run.

use saft_core::attack::{AttackConfig, AttackInit, LossKind};
use saft_core::bank::{GenerationConfig, GeneratorSource};
use saft_core::data::{mix_seed, ClassDef, DatasetSpec};
use saft_core::eval::SimilarityMetric;
use saft_core::text::{fnv1a64, TextEmbedder, DEFAULT_SEED_A};
use saft_core::train::{TrainConfig, TrainMode};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

fn section_seed(global: u64, tag: &str) -> u64 {
    mix_seed(global, fnv1a64(DEFAULT_SEED_A, tag.as_bytes()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub classes: Vec<ClassDef>,
    #[serde(default)]
    pub holdout_classes: Vec<ClassDef>,
    #[serde(default = "d_image_size")]
    pub image_size: usize,
    #[serde(default = "d_samples_per_class")]
    pub samples_per_class: usize,
    #[serde(default = "d_pos_jitter")]
    pub pos_jitter: f64,
    #[serde(default = "d_scale_jitter")]
    pub scale_jitter: f64,
    #[serde(default = "d_noise")]
    pub noise: f64,
}

fn d_image_size() -> usize {
    16
}
fn d_samples_per_class() -> usize {
    100
}
fn d_pos_jitter() -> f64 {
    2.0
}
fn d_scale_jitter() -> f64 {
    0.2
}
fn d_noise() -> f64 {
    0.05
}

impl Default for DataSection {
    fn default() -> Self {
        let spec = DatasetSpec::default();
        Self {
            classes: spec.classes,
            holdout_classes: spec.holdout_classes,
            image_size: spec.image_size,
            samples_per_class: spec.samples_per_class,
            pos_jitter: spec.pos_jitter,
            scale_jitter: spec.scale_jitter,
            noise: spec.noise,
        }
    }
}

impl DataSection {
    pub fn to_spec(&self, global_seed: u64) -> DatasetSpec {
        DatasetSpec {
            classes: self.classes.clone(),
            holdout_classes: self.holdout_classes.clone(),
            image_size: self.image_size,
            samples_per_class: self.samples_per_class,
            pos_jitter: self.pos_jitter,
            scale_jitter: self.scale_jitter,
            noise: self.noise,
            seed: section_seed(global_seed, "dataset"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedderSection {
    #[serde(default = "d_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "d_ngram")]
    pub ngram_size: usize,
}

fn d_embed_dim() -> usize {
    32
}
fn d_ngram() -> usize {
    3
}

impl Default for EmbedderSection {
    fn default() -> Self {
        Self {
            embed_dim: d_embed_dim(),
            ngram_size: d_ngram(),
        }
    }
}

impl EmbedderSection {
    pub fn build(&self) -> CliResult<TextEmbedder> {
        Ok(TextEmbedder::new(self.embed_dim, self.ngram_size)?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSection {
    #[serde(default = "d_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "d_embed_dim")]
    pub embed_dim: usize,
}

fn d_hidden() -> Vec<usize> {
    vec![128, 64]
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self {
            hidden: d_hidden(),
            embed_dim: d_embed_dim(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BankSection {
    #[serde(default = "d_m")]
    pub m: usize,
    #[serde(default = "d_k")]
    pub k: usize,
    #[serde(default = "d_diversity")]
    pub diversity: f64,
    #[serde(default = "d_prompt")]
    pub prompt_template: String,
    #[serde(default)]
    pub hallucination_fraction: f64,
    /// When set, relevance scores embed this template instead of the bare
    /// label.
    #[serde(default)]
    pub relevance_template: Option<String>,
    #[serde(default = "d_source")]
    pub source: GeneratorSource,
}

fn d_m() -> usize {
    8
}
fn d_k() -> usize {
    5
}
fn d_diversity() -> f64 {
    1.0
}
fn d_prompt() -> String {
    "What does a {label} look like".to_string()
}
fn d_source() -> GeneratorSource {
    GeneratorSource::Stub
}

impl Default for BankSection {
    fn default() -> Self {
        Self {
            m: d_m(),
            k: d_k(),
            diversity: d_diversity(),
            prompt_template: d_prompt(),
            hallucination_fraction: 0.0,
            relevance_template: None,
            source: d_source(),
        }
    }
}

impl BankSection {
    pub fn to_generation(&self, global_seed: u64) -> GenerationConfig {
        GenerationConfig {
            m: self.m,
            diversity: self.diversity,
            prompt_template: self.prompt_template.clone(),
            hallucination_fraction: self.hallucination_fraction,
            seed: section_seed(global_seed, "generation"),
            source: self.source.clone(),
        }
    }
}

/// PGD settings as written in config files; seeds come from the global seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    #[serde(default = "d_epsilon")]
    pub epsilon: f64,
    pub steps: usize,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub init: AttackInit,
    #[serde(default)]
    pub loss: LossKind,
    #[serde(default = "d_logit_scale")]
    pub logit_scale: f64,
    #[serde(default = "d_restarts")]
    pub restarts: usize,
}

fn d_epsilon() -> f64 {
    1.0 / 255.0
}
fn d_logit_scale() -> f64 {
    100.0
}
fn d_restarts() -> usize {
    1
}

impl AttackSection {
    /// PGD-2, zero init, ensemble loss: the training preset.
    pub fn train_preset() -> Self {
        Self {
            epsilon: d_epsilon(),
            steps: 2,
            alpha: None,
            init: AttackInit::Zero,
            loss: LossKind::EnsembleDissimilarity,
            logit_scale: d_logit_scale(),
            restarts: d_restarts(),
        }
    }

    /// PGD-100, random init, classification loss: the evaluation preset.
    pub fn eval_preset() -> Self {
        Self {
            steps: 100,
            init: AttackInit::RandomUniform,
            loss: LossKind::ClassificationXent,
            ..Self::train_preset()
        }
    }

    /// PGD-20, zero init, template loss: the diagonal-analysis preset.
    pub fn diagonal_preset() -> Self {
        Self {
            steps: 20,
            loss: LossKind::TemplateDissimilarity,
            ..Self::train_preset()
        }
    }

    pub fn to_config(&self, global_seed: u64, tag: &str) -> AttackConfig {
        AttackConfig {
            epsilon: self.epsilon,
            steps: self.steps,
            alpha: self.alpha,
            init: self.init,
            loss_kind: self.loss,
            logit_scale: self.logit_scale,
            restarts: self.restarts,
            seed: section_seed(global_seed, tag),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default)]
    pub mode: TrainMode,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "AttackSection::train_preset")]
    pub attack: AttackSection,
}

fn d_epochs() -> usize {
    10
}
fn d_batch() -> usize {
    128
}
fn d_lr() -> f64 {
    1e-4
}
fn d_momentum() -> f64 {
    0.9
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            mode: TrainMode::default(),
            epochs: d_epochs(),
            batch_size: d_batch(),
            lr: d_lr(),
            momentum: d_momentum(),
            weight_decay: 0.0,
            attack: AttackSection::train_preset(),
        }
    }
}

impl TrainSection {
    pub fn to_config(&self, global_seed: u64, template: &str) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            attack: self.attack.to_config(global_seed, "train-attack"),
            mode: self.mode,
            template: template.to_string(),
            seed: section_seed(global_seed, "train"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskChoice {
    /// Test split of the trained classes.
    #[default]
    Source,
    /// Classes reserved entirely for evaluation.
    Holdout,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "d_metric")]
    pub metric: SimilarityMetric,
    #[serde(default)]
    pub task: TaskChoice,
    #[serde(default)]
    pub attack: Option<AttackSection>,
    /// When set, also compute retrieval recall@k over the task samples.
    #[serde(default)]
    pub retrieval_k: Option<usize>,
}

fn d_metric() -> SimilarityMetric {
    SimilarityMetric::Template
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            metric: d_metric(),
            task: TaskChoice::default(),
            attack: None,
            retrieval_k: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackCmdSection {
    #[serde(default)]
    pub task: TaskChoice,
    #[serde(default = "AttackSection::eval_preset")]
    pub pgd: AttackSection,
}

impl Default for AttackCmdSection {
    fn default() -> Self {
        Self {
            task: TaskChoice::default(),
            pgd: AttackSection::eval_preset(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagonalSection {
    #[serde(default)]
    pub task: TaskChoice,
    #[serde(default = "AttackSection::diagonal_preset")]
    pub attack: AttackSection,
}

impl Default for DiagonalSection {
    fn default() -> Self {
        Self {
            task: TaskChoice::default(),
            attack: AttackSection::diagonal_preset(),
        }
    }
}

/// The whole declarative run configuration.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<String>,
    /// Worker cap; 0 uses all cores.
    #[serde(default)]
    pub threads: usize,
    #[serde(default = "d_template")]
    pub template: String,
    #[serde(default)]
    pub dataset: DataSection,
    #[serde(default)]
    pub embedder: EmbedderSection,
    #[serde(default)]
    pub encoder: EncoderSection,
    #[serde(default)]
    pub generation: BankSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub attack: AttackCmdSection,
    #[serde(default)]
    pub diagonal: DiagonalSection,
}

fn d_template() -> String {
    "A photo of a {label}".to_string()
}

impl RunConfig {
    pub fn load(path: &std::path::Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| CliError::config(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.template.is_empty() {
            return Err(CliError::config("template must be non-empty"));
        }
        if self.embedder.embed_dim != self.encoder.embed_dim {
            return Err(CliError::config(format!(
                "embedder.embed_dim ({}) must equal encoder.embed_dim ({}): \
                 image and text embeddings share one space",
                self.embedder.embed_dim, self.encoder.embed_dim
            )));
        }
        if self.generation.k > self.generation.m || self.generation.k == 0 {
            return Err(CliError::config(format!(
                "generation.k = {} must lie in 1..={}",
                self.generation.k, self.generation.m
            )));
        }
        Ok(())
    }

    fn hash_of(parts: &[&str]) -> String {
        let mut h = DEFAULT_SEED_A;
        for p in parts {
            h = fnv1a64(h, p.as_bytes());
            h = fnv1a64(h, b"|");
        }
        format!("{h:016x}")
    }

    fn toml_of<T: Serialize>(value: &T) -> String {
        toml::to_string(value).expect("config sections serialize to TOML")
    }

    pub fn dataset_hash(&self) -> String {
        Self::hash_of(&[
            &Self::toml_of(&self.dataset),
            &self.seed.to_string(),
        ])
    }

    pub fn bank_hash(&self) -> String {
        Self::hash_of(&[
            &Self::toml_of(&self.generation),
            &Self::toml_of(&self.embedder),
            &self.seed.to_string(),
            &self.dataset_hash(),
        ])
    }

    pub fn encoder_hash(&self) -> String {
        let mut parts = vec![
            Self::toml_of(&self.train),
            Self::toml_of(&self.encoder),
            self.template.clone(),
            self.seed.to_string(),
            self.dataset_hash(),
        ];
        if self.train.mode == TrainMode::Saft {
            parts.push(self.bank_hash());
        }
        let refs: Vec<&str> = parts.iter().map(|s| s.as_str()).collect();
        Self::hash_of(&refs)
    }

    pub fn eval_hash(&self) -> String {
        Self::hash_of(&[
            &Self::toml_of(&self.eval),
            &self.template,
            &self.seed.to_string(),
            &self.dataset_hash(),
            &self.encoder_hash(),
            &self.bank_hash(),
        ])
    }

    pub fn attack_hash(&self) -> String {
        Self::hash_of(&[
            &Self::toml_of(&self.attack),
            &self.template,
            &self.seed.to_string(),
            &self.dataset_hash(),
            &self.encoder_hash(),
            &self.bank_hash(),
        ])
    }

    pub fn diagonal_hash(&self) -> String {
        Self::hash_of(&[
            &Self::toml_of(&self.diagonal),
            &self.template,
            &self.seed.to_string(),
            &self.dataset_hash(),
            &self.encoder_hash(),
            &self.bank_hash(),
        ])
    }

    pub fn encoder_init_seed(&self) -> u64 {
        section_seed(self.seed, "encoder-init")
    }

    pub fn eval_attack_config(&self) -> Option<AttackConfig> {
        self.eval
            .attack
            .as_ref()
            .map(|a| a.to_config(self.seed, "eval-attack"))
    }

    pub fn attack_cmd_config(&self) -> AttackConfig {
        self.attack.pgd.to_config(self.seed, "attack-cmd")
    }

    pub fn diagonal_attack_config(&self) -> AttackConfig {
        let mut cfg = self.diagonal.attack.to_config(self.seed, "diagonal-attack");
        cfg.loss_kind = LossKind::TemplateDissimilarity;
        cfg
    }
}
