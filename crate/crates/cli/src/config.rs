//! Run configuration: a sectioned key-value TOML file.
//!
//! Every key is optional; missing keys take the defaults below. Unknown keys
//! and sections are rejected so that typos fail loudly.

use std::fmt;
use std::path::Path;

use gnsp_core::encoder::ModelSpec;
use gnsp_core::tasks::SequenceSpec;
use gnsp_core::{Method, Optimizer, TrainerConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub trainer: TrainerSection,
    pub model: ModelSection,
    pub pretrain: PretrainSection,
    pub tasks: TasksSection,
    pub reference: ReferenceSection,
    pub probes: ProbesSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MethodName {
    GnspFull,
    GnspOnly,
    CdOnly,
    PlainFinetune,
}

impl From<MethodName> for Method {
    fn from(m: MethodName) -> Self {
        match m {
            MethodName::GnspFull => Method::GnspFull,
            MethodName::GnspOnly => Method::GnspOnly,
            MethodName::CdOnly => Method::CdOnly,
            MethodName::PlainFinetune => Method::PlainFinetune,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerName {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// Each task is an independent dataset.
    Til,
    /// One dataset with `count × classes` classes split into class-disjoint tasks.
    Cil,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerSection {
    pub iterations_per_task: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub rho: f64,
    pub lambda_cd: f64,
    pub beta_map: f64,
    pub method: MethodName,
    pub include_reference_gram: bool,
    pub seed: u64,
    pub capture_cap: usize,
    pub optimizer: OptimizerName,
    pub cd_temperature: f64,
    pub map_temperature: f64,
}

impl Default for TrainerSection {
    fn default() -> Self {
        Self {
            iterations_per_task: 500,
            batch_size: 64,
            learning_rate: 0.5,
            rho: 0.1,
            lambda_cd: 1.0,
            beta_map: 0.75,
            method: MethodName::GnspFull,
            include_reference_gram: true,
            seed: 1,
            capture_cap: 10_000,
            optimizer: OptimizerName::Sgd,
            cd_temperature: 0.5,
            map_temperature: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub image_dims: Vec<usize>,
    pub text_dims: Vec<usize>,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let spec = ModelSpec::default();
        Self {
            image_dims: spec.image_dims,
            text_dims: spec.text_dims,
            temperature: spec.temperature,
            seed: 7,
        }
    }
}

/// Contrastive alignment on a paired corpus before the first task. Uses the
/// MAP temperature so that the alignment objective matches the one preserved
/// during continual training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub iterations: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub corpus_size: usize,
    pub corpus_seed: u64,
    pub seed: u64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self {
            iterations: 2000,
            learning_rate: 0.1,
            batch_size: 64,
            corpus_size: 4000,
            corpus_seed: 13,
            seed: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TasksSection {
    pub protocol: Protocol,
    pub count: usize,
    pub classes: usize,
    pub per_class: usize,
    /// One value for all tasks or one per task.
    pub separations: Vec<f64>,
    pub base_seed: u64,
}

impl Default for TasksSection {
    fn default() -> Self {
        Self {
            protocol: Protocol::Til,
            count: 6,
            classes: 4,
            per_class: 250,
            separations: vec![8.0],
            base_seed: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReferenceSection {
    pub size: usize,
    pub seed: u64,
}

impl Default for ReferenceSection {
    fn default() -> Self {
        Self { size: 1000, seed: 11 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbesSection {
    /// Size of the held-out probe drawn like the reference set.
    pub size: usize,
    pub seed: u64,
    /// Also track the gap on each task's test pairs.
    pub include_task_tests: bool,
}

impl Default for ProbesSection {
    fn default() -> Self {
        Self {
            size: 2000,
            seed: 12,
            include_task_tests: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub spectra: bool,
    pub embeddings: bool,
    pub plots: bool,
    pub recall_k: Vec<usize>,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            spectra: true,
            embeddings: false,
            plots: false,
            recall_k: vec![1, 5, 10],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    /// Dotted key, e.g. `trainer.rho`, when one can be named.
    pub key: Option<String>,
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (&self.key, self.line) {
            (Some(k), Some(l)) => write!(f, "line {l}, key `{k}`: {}", self.message),
            (Some(k), None) => write!(f, "key `{k}`: {}", self.message),
            (None, Some(l)) => write!(f, "line {l}: {}", self.message),
            (None, None) => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            key: None,
            line: None,
            message: format!("cannot read {}: {e}", path.display()),
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError {
            key: None,
            line: e.span().map(|s| line_of(text, s.start)),
            message: e.message().trim().to_string(),
        })?;
        cfg.validate().map_err(|(key, message)| ConfigError {
            line: find_key_line(text, &key),
            key: Some(key),
            message,
        })?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    fn validate(&self) -> Result<(), (String, String)> {
        fn err<T>(key: &str, msg: impl Into<String>) -> Result<T, (String, String)> {
            Err((key.to_string(), msg.into()))
        }
        let positive = [
            ("trainer.batch_size", self.trainer.batch_size),
            ("trainer.capture_cap", self.trainer.capture_cap),
            ("pretrain.batch_size", self.pretrain.batch_size),
            ("pretrain.corpus_size", self.pretrain.corpus_size),
            ("tasks.count", self.tasks.count),
            ("tasks.classes", self.tasks.classes),
            ("tasks.per_class", self.tasks.per_class),
            ("reference.size", self.reference.size),
            ("probes.size", self.probes.size),
        ];
        for (key, v) in positive {
            if v == 0 {
                return err(key, "must be at least 1");
            }
        }
        let t = &self.trainer;
        if !(0.0..=1.0).contains(&t.rho) {
            return err("trainer.rho", format!("must lie in [0, 1], got {}", t.rho));
        }
        let non_negative = [
            ("trainer.learning_rate", t.learning_rate),
            ("trainer.lambda_cd", t.lambda_cd),
            ("trainer.beta_map", t.beta_map),
            ("pretrain.learning_rate", self.pretrain.learning_rate),
        ];
        for (key, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return err(key, format!("must be a finite non-negative number, got {v}"));
            }
        }
        let temps = [
            ("trainer.cd_temperature", t.cd_temperature),
            ("trainer.map_temperature", t.map_temperature),
            ("model.temperature", self.model.temperature),
        ];
        for (key, v) in temps {
            if !(v > 0.0 && v.is_finite()) {
                return err(key, format!("must be positive, got {v}"));
            }
        }
        for (key, dims) in [
            ("model.image_dims", &self.model.image_dims),
            ("model.text_dims", &self.model.text_dims),
        ] {
            if dims.len() < 2 || dims.contains(&0) {
                return err(key, "needs at least two positive sizes");
            }
        }
        if self.model.image_dims.last() != self.model.text_dims.last() {
            return err("model.text_dims", "final size must match model.image_dims");
        }
        let n_sep = self.tasks.separations.len();
        if n_sep != 1 && n_sep != self.tasks.count {
            return err(
                "tasks.separations",
                format!("expected 1 or {} values, got {n_sep}", self.tasks.count),
            );
        }
        if self.tasks.separations.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return err("tasks.separations", "values must be finite and non-negative");
        }
        if self.tasks.protocol == Protocol::Cil && n_sep != 1 {
            return err("tasks.separations", "the cil protocol takes a single separation");
        }
        if self.output.recall_k.iter().any(|&k| k == 0 || k > self.probes.size) {
            return err(
                "output.recall_k",
                format!("values must lie in [1, {}]", self.probes.size),
            );
        }
        Ok(())
    }

    pub fn trainer_config(&self) -> TrainerConfig {
        let t = &self.trainer;
        TrainerConfig {
            iterations_per_task: t.iterations_per_task,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            rho: t.rho,
            lambda_cd: t.lambda_cd,
            beta_map: t.beta_map,
            method: t.method.into(),
            include_reference_gram: t.include_reference_gram,
            seed: t.seed,
            capture_cap: t.capture_cap,
            optimizer: match t.optimizer {
                OptimizerName::Sgd => Optimizer::Sgd,
                OptimizerName::Adam => Optimizer::Adam,
            },
            cd_temperature: t.cd_temperature,
            map_temperature: t.map_temperature,
        }
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            image_dims: self.model.image_dims.clone(),
            text_dims: self.model.text_dims.clone(),
            temperature: self.model.temperature,
        }
    }

    pub fn d_image_in(&self) -> usize {
        self.model.image_dims[0]
    }

    pub fn d_text_in(&self) -> usize {
        self.model.text_dims[0]
    }

    pub fn sequence_spec(&self) -> SequenceSpec {
        SequenceSpec {
            n_tasks: self.tasks.count,
            n_classes: self.tasks.classes,
            n_per_class: self.tasks.per_class,
            d_image_in: self.d_image_in(),
            d_text_in: self.d_text_in(),
            separations: self.tasks.separations.clone(),
            base_seed: self.tasks.base_seed,
        }
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Line of `key = …` inside `[section]`, for a dotted `section.key`.
fn find_key_line(text: &str, dotted: &str) -> Option<usize> {
    let (section, key) = dotted.split_once('.')?;
    let mut current = "";
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = name.trim();
        } else if current == section && line.split_once('=').is_some_and(|(k, _)| k.trim() == key) {
            return Some(i + 1);
        }
    }
    None
}
