//! The run configuration: a sectioned TOML file, optionally overridden by
//! `DENSEKIT_<SECTION>_<KEY>` environment variables, then by
//! `--set section.key=value` flags, then by dedicated command-line flags.
//! The grammar is documented in the book chapter `book/src/configuration.md`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use densekit::encoder::{EncoderConfig, Pooling};
use densekit::objectives::{ContrastiveConfig, KdConfig, DEFAULT_TAU, DEFAULT_TAU_KD};
use densekit::tokenizer::{TrainerConfig, DEFAULT_SPECIAL_TOKENS, REFERENCE_VOCAB_SIZE};
use densekit::training::{LinearSchedule, MaskConfig, Objective, Stage, DEFAULT_DISTILL_LR, DEFAULT_EMBEDDER_LR};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const ENV_PREFIX: &str = "DENSEKIT_";
pub const SECTIONS: [&str; 6] = ["tokenizer", "encoder", "train", "retrieval", "paths", "sources"];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub tokenizer: TokenizerSection,
    pub encoder: EncoderSection,
    pub train: TrainSection,
    pub retrieval: RetrievalSection,
    pub paths: PathsSection,
    /// Training data: source name → JSONL or plain-text file.
    pub sources: BTreeMap<String, PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerSection {
    pub vocab_size: usize,
    pub lowercase: bool,
    pub special_tokens: Vec<String>,
}

impl Default for TokenizerSection {
    fn default() -> Self {
        Self {
            vocab_size: REFERENCE_VOCAB_SIZE,
            lowercase: true,
            special_tokens: DEFAULT_SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl TokenizerSection {
    pub fn trainer_config(&self) -> TrainerConfig {
        TrainerConfig {
            vocab_size: self.vocab_size,
            lowercase: self.lowercase,
            special_tokens: self.special_tokens.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub max_seq_len: usize,
    pub pooling: Pooling,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let d = EncoderConfig::default();
        Self {
            num_layers: d.num_layers,
            num_heads: d.num_heads,
            model_dim: d.model_dim,
            ff_dim: d.ff_dim,
            max_seq_len: d.max_seq_len,
            pooling: d.pooling,
        }
    }
}

impl EncoderSection {
    /// The vocabulary size always comes from the tokenizer in use.
    pub fn encoder_config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            model_dim: self.model_dim,
            ff_dim: self.ff_dim,
            max_seq_len: self.max_seq_len,
            vocab_size,
            pooling: self.pooling,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// Objective of the implicit single stage used when `stages` is empty.
    pub objective: Objective,
    pub stages: Vec<StageSection>,
    pub batch_size: usize,
    pub steps: usize,
    /// Peak learning rate; unset means the per-command default.
    pub lr: Option<f64>,
    pub warmup_frac: f64,
    pub tau: f64,
    pub tau_kd: f64,
    pub dedup_positive: bool,
    pub mask_prob: f64,
    pub relation_weight: f64,
    pub relation_heads: usize,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let stage = Stage::default();
        Self {
            objective: Objective::Contrastive,
            stages: Vec::new(),
            batch_size: stage.batch_size,
            steps: stage.steps,
            lr: None,
            warmup_frac: LinearSchedule::DEFAULT_WARMUP_FRAC,
            tau: DEFAULT_TAU,
            tau_kd: DEFAULT_TAU_KD,
            dedup_positive: false,
            mask_prob: MaskConfig::DEFAULT_MASK_PROB,
            relation_weight: 0.0,
            relation_heads: 1,
            seed: 0,
        }
    }
}

/// One `[[train.stages]]` table. Unset keys fall back to `[train]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageSection {
    pub name: String,
    /// Source names; empty means every configured source.
    pub sources: Vec<String>,
    pub objective: Option<Objective>,
    pub steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub warmup_frac: Option<f64>,
    pub tau: Option<f64>,
    pub tau_kd: Option<f64>,
    pub mask_prob: Option<f64>,
    pub relation_weight: Option<f64>,
    pub relation_heads: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalSection {
    pub k: usize,
    pub workers: usize,
}

impl Default for RetrievalSection {
    fn default() -> Self {
        Self { k: 10, workers: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub corpus: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    pub qrels: Option<PathBuf>,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            corpus: None,
            queries: None,
            qrels: None,
            checkpoints: PathBuf::from("checkpoints"),
            reports: PathBuf::from("reports"),
        }
    }
}

impl PathsSection {
    pub fn checkpoint(&self, file: &str) -> PathBuf {
        self.checkpoints.join(file)
    }

    pub fn report(&self, file: &str) -> PathBuf {
        self.reports.join(file)
    }

    pub fn require(&self, key: &str) -> CliResult<&Path> {
        let value = match key {
            "corpus" => &self.corpus,
            "queries" => &self.queries,
            "qrels" => &self.qrels,
            _ => unreachable!("not an optional path key: {key}"),
        };
        value
            .as_deref()
            .ok_or_else(|| CliError::Config(format!("paths.{key} is not set (config file, DENSEKIT_PATHS_{}, or --set)", key.to_uppercase())))
    }
}

/// Parses an override value with TOML typing; anything that is not a TOML
/// literal is taken as a bare string.
pub fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_key(table: &mut toml::Table, key: &str, value: toml::Value, origin: &str) -> CliResult<()> {
    let Some((section, field)) = key.split_once('.') else {
        return Err(CliError::Config(format!("{origin}: `{key}` is not of the form section.key")));
    };
    if field.is_empty() || field.contains('.') {
        return Err(CliError::Config(format!("{origin}: `{key}` is not of the form section.key")));
    }
    if !SECTIONS.contains(&section) {
        return Err(CliError::Config(format!("{origin}: unknown section `{section}`")));
    }
    let entry = table
        .entry(section.to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    let toml::Value::Table(section_table) = entry else {
        return Err(CliError::Config(format!("{origin}: `{section}` is not a section")));
    };
    section_table.insert(field.to_string(), value);
    Ok(())
}

/// Sources of configuration, from lowest to highest precedence.
#[derive(Clone, Debug, Default)]
pub struct ConfigSources {
    pub file: Option<PathBuf>,
    pub env: Vec<(String, String)>,
    pub sets: Vec<String>,
    pub flags: Vec<(String, toml::Value)>,
}

impl ConfigSources {
    /// `DENSEKIT_*` variables of the current process, sorted by name.
    pub fn process_env() -> Vec<(String, String)> {
        let mut env: Vec<(String, String)> = std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        env.sort();
        env
    }

    pub fn resolve(&self) -> CliResult<RunConfig> {
        let mut table = match &self.file {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
                toml::from_str::<toml::Table>(&text)
                    .map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.message())))?
            }
            None => toml::Table::new(),
        };
        for (name, raw) in &self.env {
            let rest = name
                .strip_prefix(ENV_PREFIX)
                .ok_or_else(|| CliError::Config(format!("`{name}` lacks the {ENV_PREFIX} prefix")))?;
            let key = match rest.split_once('_') {
                Some((s, k)) => format!("{}.{}", s.to_lowercase(), k.to_lowercase()),
                None => rest.to_lowercase(),
            };
            set_key(&mut table, &key, parse_value(raw), name)?;
        }
        for s in &self.sets {
            let (key, raw) = s
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("--set `{s}` is not of the form section.key=value")))?;
            set_key(&mut table, key.trim(), parse_value(raw.trim()), "--set")?;
        }
        for (key, value) in &self.flags {
            set_key(&mut table, key, value.clone(), "flag")?;
        }
        let config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }
}

fn positive(name: &str, v: f64) -> CliResult<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(CliError::Validation(format!("{name} must be positive and finite, got {v}")))
    }
}

fn fraction(name: &str, v: f64, upper_inclusive: bool) -> CliResult<()> {
    let ok = v >= 0.0 && if upper_inclusive { v <= 1.0 } else { v < 1.0 };
    if ok {
        Ok(())
    } else {
        let hi = if upper_inclusive { "1]" } else { "1)" };
        Err(CliError::Validation(format!("{name} must be in [0, {hi}, got {v}")))
    }
}

impl RunConfig {
    /// Checks every value against the preconditions of the module it feeds.
    pub fn validate(&self) -> CliResult<()> {
        let v = |m: String| Err(CliError::Validation(m));
        let tok = &self.tokenizer;
        if tok.special_tokens.len() < 2 {
            return v("tokenizer.special_tokens needs at least a start and an end token".into());
        }
        for (i, s) in tok.special_tokens.iter().enumerate() {
            if s.is_empty() || tok.special_tokens[..i].contains(s) {
                return v(format!("tokenizer.special_tokens: `{s}` is empty or duplicated"));
            }
        }
        let min = tok.trainer_config().min_vocab_size();
        if tok.vocab_size < min {
            return v(format!("tokenizer.vocab_size {} is below the minimum {min}", tok.vocab_size));
        }
        self.encoder
            .encoder_config(tok.vocab_size)
            .validate()
            .map_err(|e| CliError::Validation(format!("encoder: {e}")))?;

        let t = &self.train;
        if t.batch_size == 0 {
            return v("train.batch_size must be at least 1".into());
        }
        if let Some(lr) = t.lr {
            positive("train.lr", lr)?;
        }
        fraction("train.warmup_frac", t.warmup_frac, false)?;
        positive("train.tau", t.tau)?;
        positive("train.tau_kd", t.tau_kd)?;
        fraction("train.mask_prob", t.mask_prob, true)?;
        if !(t.relation_weight.is_finite() && t.relation_weight >= 0.0) {
            return v(format!("train.relation_weight must be non-negative, got {}", t.relation_weight));
        }
        if t.relation_heads == 0 {
            return v("train.relation_heads must be at least 1".into());
        }
        for (i, s) in t.stages.iter().enumerate() {
            let label = format!("train.stages[{i}]");
            if s.name.is_empty() {
                return v(format!("{label}.name is required"));
            }
            if t.stages[..i].iter().any(|o| o.name == s.name) {
                return v(format!("{label}: duplicate stage name `{}`", s.name));
            }
            for src in &s.sources {
                if !self.sources.contains_key(src) {
                    return v(format!("{label}: source `{src}` is not defined in [sources]"));
                }
            }
            if s.batch_size == Some(0) {
                return v(format!("{label}.batch_size must be at least 1"));
            }
            for (k, x) in [("lr", s.lr), ("tau", s.tau), ("tau_kd", s.tau_kd)] {
                if let Some(x) = x {
                    positive(&format!("{label}.{k}"), x)?;
                }
            }
            if let Some(w) = s.warmup_frac {
                fraction(&format!("{label}.warmup_frac"), w, false)?;
            }
            if let Some(p) = s.mask_prob {
                fraction(&format!("{label}.mask_prob"), p, true)?;
            }
            if s.relation_heads == Some(0) {
                return v(format!("{label}.relation_heads must be at least 1"));
            }
        }
        if self.retrieval.k == 0 {
            return v("retrieval.k must be at least 1".into());
        }
        if self.retrieval.workers == 0 {
            return v("retrieval.workers must be at least 1".into());
        }
        for name in self.sources.keys() {
            if name.is_empty() {
                return v("[sources] has an empty name".into());
            }
        }
        Ok(())
    }

    fn all_sources(&self) -> Vec<String> {
        self.sources.keys().cloned().collect()
    }

    /// The configured stages as trainer stages, with `[train]` fallbacks.
    /// Without explicit stages there is one stage running `objective`
    /// (or `train.objective`) over every source.
    pub fn stages(&self, objective: Option<Objective>) -> Vec<Stage> {
        let t = &self.train;
        let lr = t.lr.unwrap_or(DEFAULT_EMBEDDER_LR);
        let build = |s: &StageSection| {
            let objective = s.objective.unwrap_or(t.objective);
            let tau = s.tau.unwrap_or(t.tau);
            Stage {
                name: s.name.clone(),
                sources: if s.sources.is_empty() { self.all_sources() } else { s.sources.clone() },
                steps: s.steps.unwrap_or(t.steps),
                batch_size: s.batch_size.unwrap_or(t.batch_size),
                lr: s.lr.unwrap_or(lr),
                warmup_frac: s.warmup_frac.unwrap_or(t.warmup_frac),
                objective,
                seed: s.seed.unwrap_or(t.seed),
                mask_prob: s.mask_prob.unwrap_or(t.mask_prob),
                contrastive: ContrastiveConfig {
                    tau,
                    dedup_positive: t.dedup_positive,
                },
                kd: KdConfig {
                    tau_kd: s.tau_kd.unwrap_or(t.tau_kd),
                    similarity_tau: tau,
                    ..KdConfig::default()
                },
                relation_weight: s.relation_weight.unwrap_or(t.relation_weight),
                relation_heads: s.relation_heads.unwrap_or(t.relation_heads),
            }
        };
        if t.stages.is_empty() {
            let objective = objective.unwrap_or(t.objective);
            vec![build(&StageSection {
                name: objective.name().to_string(),
                objective: Some(objective),
                ..StageSection::default()
            })]
        } else {
            t.stages.iter().map(build).collect()
        }
    }

    pub fn distill_lr(&self) -> f64 {
        self.train.lr.unwrap_or(DEFAULT_DISTILL_LR)
    }
}
