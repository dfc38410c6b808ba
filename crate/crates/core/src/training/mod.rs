//! Desk-scale training loops.
//!
//! A [`StagePlan`] is an ordered list of [`Stage`]s. Each stage draws
//! homogeneous batches from its sources with a [`ProportionalSampler`],
//! builds one objective on a fresh tape per step, and applies Adam under a
//! warmup-then-linear-decay schedule. Parameters and the Adam moments carry
//! over from one stage to the next; samplers, masking generators, and the
//! learning-rate schedule are per stage.

mod masking;
mod optim;
mod run;
mod sampler;

pub use masking::{mask_one, mask_tokens, mask_tokens_seeded, MaskAction, MaskConfig, MaskedSequence};
pub use optim::{adam_step, AdamConfig, AdamState, LinearSchedule};
pub use run::{distill_embedder, train_embedder, DistillConfig, LogRecord, TrainOutput};
pub use sampler::{Batch, ProportionalSampler};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::GradError;
use crate::encoder::EncoderError;
use crate::objectives::{ContrastiveConfig, KdConfig, ObjectiveError};

/// Peak learning rate of embedder stages.
pub const DEFAULT_EMBEDDER_LR: f64 = 2e-5;
/// Peak learning rate of embedder distillation.
pub const DEFAULT_DISTILL_LR: f64 = 7e-4;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no data sources given")]
    NoSources,
    #[error("data source `{0}` is empty")]
    EmptySource(String),
    #[error("unknown data source `{0}`")]
    UnknownSource(String),
    #[error("duplicate data source `{0}`")]
    DuplicateSource(String),
    #[error("batch size must be at least 1")]
    ZeroBatch,
    #[error("invalid stage `{stage}`: {message}")]
    InvalidStage { stage: String, message: String },
    #[error("stage `{0}` needs a teacher encoder")]
    MissingTeacher(String),
    #[error("no maskable (non-special) positions")]
    NothingToMask,
    #[error("mask probability {0} is outside [0, 1]")]
    MaskProbability(f64),
    #[error("gradient for unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("parameter `{name}` has shape {expected:?}, gradient has {found:?}")]
    ShapeMismatch {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("non-finite {what} in stage `{stage}` at step {step} (batch {fingerprint})")]
    NonFinite {
        what: &'static str,
        stage: String,
        step: usize,
        fingerprint: String,
    },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// A query with its positive passage and optional mined negatives, all as
/// token ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub query: Vec<u32>,
    pub positive: Vec<u32>,
    #[serde(default)]
    pub negatives: Vec<Vec<u32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum SourceData {
    Pairs(Vec<PairRecord>),
    Documents(Vec<Vec<u32>>),
}

/// A named, non-empty collection of training records.
#[derive(Clone, Debug, PartialEq)]
pub struct DataSource {
    name: String,
    data: SourceData,
}

impl DataSource {
    pub fn new(name: impl Into<String>, data: SourceData) -> Result<Self, TrainError> {
        let source = Self { name: name.into(), data };
        if source.size() == 0 {
            return Err(TrainError::EmptySource(source.name));
        }
        Ok(source)
    }

    pub fn pairs(name: impl Into<String>, pairs: Vec<PairRecord>) -> Result<Self, TrainError> {
        Self::new(name, SourceData::Pairs(pairs))
    }

    pub fn documents(name: impl Into<String>, docs: Vec<Vec<u32>>) -> Result<Self, TrainError> {
        Self::new(name, SourceData::Documents(docs))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn data(&self) -> &SourceData {
        &self.data
    }

    pub fn size(&self) -> usize {
        match &self.data {
            SourceData::Pairs(p) => p.len(),
            SourceData::Documents(d) => d.len(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Masked-token prediction over documents.
    Mlm,
    /// Bidirectional InfoNCE with in-batch (and mined) negatives over pairs.
    Contrastive,
    /// Similarity-distribution distillation from a teacher.
    EmbeddingKd,
    /// Last-layer self-attention relation distillation from a teacher.
    RelationKd,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Self::Mlm => "mlm",
            Self::Contrastive => "contrastive",
            Self::EmbeddingKd => "embedding_kd",
            Self::RelationKd => "relation_kd",
        }
    }

    pub fn needs_teacher(self) -> bool {
        matches!(self, Self::EmbeddingKd | Self::RelationKd)
    }
}

impl std::str::FromStr for Objective {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mlm" => Ok(Self::Mlm),
            "contrastive" => Ok(Self::Contrastive),
            "embedding_kd" => Ok(Self::EmbeddingKd),
            "relation_kd" => Ok(Self::RelationKd),
            other => Err(format!(
                "unknown objective `{other}` (expected mlm, contrastive, embedding_kd, relation_kd)"
            )),
        }
    }
}

/// One training stage. A zero-step stage is a no-op.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage {
    pub name: String,
    /// Names of the [`DataSource`]s this stage samples from.
    pub sources: Vec<String>,
    pub steps: usize,
    pub batch_size: usize,
    /// Peak learning rate.
    pub lr: f64,
    pub warmup_frac: f64,
    pub objective: Objective,
    pub seed: u64,
    pub mask_prob: f64,
    pub contrastive: ContrastiveConfig,
    pub kd: KdConfig,
    /// Weight of the relation term added to embedding distillation.
    pub relation_weight: f64,
    pub relation_heads: usize,
}

impl Default for Stage {
    fn default() -> Self {
        Self {
            name: "stage".into(),
            sources: Vec::new(),
            steps: 1000,
            batch_size: 32,
            lr: DEFAULT_EMBEDDER_LR,
            warmup_frac: LinearSchedule::DEFAULT_WARMUP_FRAC,
            objective: Objective::Contrastive,
            seed: 0,
            mask_prob: MaskConfig::DEFAULT_MASK_PROB,
            contrastive: ContrastiveConfig::default(),
            kd: KdConfig::default(),
            relation_weight: 0.0,
            relation_heads: 1,
        }
    }
}

impl Stage {
    fn invalid(&self, message: impl Into<String>) -> TrainError {
        TrainError::InvalidStage {
            stage: self.name.clone(),
            message: message.into(),
        }
    }

    /// Checks the stage on its own and against the available sources.
    pub fn validate(&self, sources: &[DataSource]) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(self.invalid("batch_size must be at least 1"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(self.invalid(format!("learning rate {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(self.invalid(format!("warmup_frac {} must be in [0, 1)", self.warmup_frac)));
        }
        if self.sources.is_empty() {
            return Err(self.invalid("no sources listed"));
        }
        for name in &self.sources {
            let source = sources
                .iter()
                .find(|s| s.name == *name)
                .ok_or_else(|| TrainError::UnknownSource(name.clone()))?;
            match (self.objective, &source.data) {
                (Objective::Mlm, SourceData::Pairs(_)) => {
                    return Err(self.invalid(format!("mlm needs documents, `{name}` holds pairs")))
                }
                (Objective::Contrastive, SourceData::Documents(_)) => {
                    return Err(self.invalid(format!("contrastive needs pairs, `{name}` holds documents")))
                }
                _ => {}
            }
        }
        match self.objective {
            Objective::Contrastive => crate::objectives::check_temperature(self.contrastive.tau)?,
            Objective::EmbeddingKd => self.kd.validate()?,
            Objective::Mlm => {
                if !(0.0..=1.0).contains(&self.mask_prob) {
                    return Err(TrainError::MaskProbability(self.mask_prob));
                }
            }
            Objective::RelationKd => {}
        }
        if self.relation_heads == 0 {
            return Err(self.invalid("relation_heads must be at least 1"));
        }
        if !(self.relation_weight.is_finite() && self.relation_weight >= 0.0) {
            return Err(self.invalid("relation_weight must be a non-negative number"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StagePlan {
    pub stages: Vec<Stage>,
    pub adam: AdamConfig,
    /// Ids below this are special tokens: 0 start, 1 end, 2 mask.
    pub num_special: usize,
}

impl StagePlan {
    pub fn new(stages: Vec<Stage>) -> Self {
        Self {
            stages,
            adam: AdamConfig::default(),
            num_special: crate::tokenizer::DEFAULT_SPECIAL_TOKENS.len(),
        }
    }

    pub fn validate(&self, sources: &[DataSource]) -> Result<(), TrainError> {
        for (i, s) in sources.iter().enumerate() {
            if sources[..i].iter().any(|o| o.name == s.name) {
                return Err(TrainError::DuplicateSource(s.name.clone()));
            }
        }
        for stage in &self.stages {
            stage.validate(sources)?;
            if stage.objective == Objective::Mlm && self.num_special < 3 {
                return Err(stage.invalid("mlm needs a mask token (at least three special tokens)"));
            }
        }
        Ok(())
    }
}
