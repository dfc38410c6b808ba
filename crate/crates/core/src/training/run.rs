use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::encoder::{forward_graph, mlm_logits_graph, pool_graph, BatchTrace, Encoder, EncoderConfig};
use crate::objectives::{
    contrastive_loss_graph, embedding_kd_loss_graph, mlm_loss_graph, relation_kd_graph, KdConfig, ObjectiveError,
};
use crate::params::BoundParams;

use super::{
    adam_step, mask_one, mask_tokens, AdamState, DataSource, LinearSchedule, MaskConfig, MaskedSequence, Objective,
    SourceData, Stage, StagePlan, TrainError, DEFAULT_DISTILL_LR,
};

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub stage: String,
    /// Step within the stage, zero-based.
    pub step: usize,
    /// Step across all stages, zero-based.
    pub global_step: usize,
    pub objective: Objective,
    pub source: String,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub encoder: Encoder,
    pub log: Vec<LogRecord>,
}

/// Stable short identifier of a batch, reported when a step blows up.
fn fingerprint(source: &str, indices: &[usize]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let bytes = source
        .bytes()
        .chain(indices.iter().flat_map(|&i| (i as u64).to_le_bytes()));
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{source}[{}]#{h:016x}", indices.len())
}

struct StepInputs<'a> {
    plan: &'a StagePlan,
    stage: &'a Stage,
    config: &'a EncoderConfig,
    teacher: Option<&'a Encoder>,
}

/// Sequences every element-level objective sees: documents as they are,
/// pairs as their queries followed by their positives.
fn elements<'a>(source: &'a DataSource, indices: &[usize]) -> Vec<&'a [u32]> {
    match source.data() {
        SourceData::Documents(d) => indices.iter().map(|&i| d[i].as_slice()).collect(),
        SourceData::Pairs(p) => indices
            .iter()
            .map(|&i| p[i].query.as_slice())
            .chain(indices.iter().map(|&i| p[i].positive.as_slice()))
            .collect(),
    }
}

fn mlm_step(
    g: &mut Graph,
    inputs: &StepInputs,
    bound: &BoundParams,
    docs: &[&[u32]],
    rng: &mut ChaCha8Rng,
) -> Result<Var, TrainError> {
    let cfg = MaskConfig {
        mask_prob: inputs.stage.mask_prob,
        mask_id: 2,
        vocab_size: inputs.config.vocab_size,
        num_special: inputs.plan.num_special,
    };
    let mut masked = Vec::with_capacity(docs.len());
    for doc in docs {
        masked.push(match mask_tokens(doc, &cfg, rng) {
            Err(TrainError::NothingToMask) => MaskedSequence {
                ids: doc.to_vec(),
                positions: Vec::new(),
                labels: Vec::new(),
                actions: Vec::new(),
            },
            other => other?,
        });
    }
    if masked.iter().all(|m| m.positions.is_empty()) {
        // Short batches can come out empty; predict at least one token.
        let k = docs
            .iter()
            .position(|d| d.iter().any(|&id| id as usize >= cfg.num_special))
            .ok_or(TrainError::NothingToMask)?;
        masked[k] = mask_one(docs[k], &cfg, rng)?;
    }
    let corrupted: Vec<&[u32]> = masked.iter().map(|m| m.ids.as_slice()).collect();
    let trace = forward_graph(g, inputs.config, bound, &corrupted, None)?;
    let mut positions = Vec::new();
    let mut labels = Vec::new();
    for (seg, m) in trace.segments.iter().zip(&masked) {
        positions.extend(m.positions.iter().map(|p| seg.start + p));
        labels.extend_from_slice(&m.labels);
    }
    let logits = mlm_logits_graph(g, bound, trace.hidden);
    Ok(mlm_loss_graph(g, logits, &labels, &positions)?)
}

fn contrastive_step(
    g: &mut Graph,
    inputs: &StepInputs,
    bound: &BoundParams,
    source: &DataSource,
    indices: &[usize],
) -> Result<Var, TrainError> {
    let SourceData::Pairs(pairs) = source.data() else {
        unreachable!("validated: contrastive stages only see pair sources")
    };
    let n = indices.len();
    let mut seqs: Vec<&[u32]> = elements(source, indices);
    for &i in indices {
        seqs.extend(pairs[i].negatives.iter().map(Vec::as_slice));
    }
    let trace = forward_graph(g, inputs.config, bound, &seqs, None)?;
    let pooled = pool_graph(g, &trace, inputs.config.pooling)?;
    let q = g.slice_rows(pooled, 0, n);
    let p = g.slice_rows(pooled, n, n);
    let negatives = (seqs.len() > 2 * n).then(|| g.slice_rows(pooled, 2 * n, seqs.len() - 2 * n));
    Ok(contrastive_loss_graph(g, q, p, negatives, &inputs.stage.contrastive))
}

fn distill_step(
    g: &mut Graph,
    inputs: &StepInputs,
    bound: &BoundParams,
    seqs: &[&[u32]],
) -> Result<Var, TrainError> {
    let stage = inputs.stage;
    let teacher = inputs.teacher.ok_or_else(|| TrainError::MissingTeacher(stage.name.clone()))?;
    let teacher_bound = teacher.params.bind_frozen(g);
    let t: BatchTrace = forward_graph(g, &teacher.config, &teacher_bound, seqs, None)?;
    let s: BatchTrace = forward_graph(g, inputs.config, bound, seqs, None)?;

    let mut terms = Vec::new();
    if stage.objective == Objective::EmbeddingKd {
        if seqs.len() < 2 {
            return Err(ObjectiveError::TooFewElements {
                needed: 2,
                found: seqs.len(),
            }
            .into());
        }
        let tp = pool_graph(g, &t, teacher.config.pooling)?;
        let sp = pool_graph(g, &s, inputs.config.pooling)?;
        terms.push(embedding_kd_loss_graph(g, tp, sp, &stage.kd));
    }
    let weight = match stage.objective {
        Objective::RelationKd => 1.0,
        _ => stage.relation_weight,
    };
    if weight > 0.0 {
        let (Some(tl), Some(sl)) = (t.layers.last(), s.layers.last()) else {
            return Err(ObjectiveError::NoLayers.into());
        };
        let r = relation_kd_graph(g, tl, sl, &s.segments, stage.relation_heads)?;
        terms.push(g.scale(r, weight));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t);
    }
    Ok(total)
}

fn step_loss(
    g: &mut Graph,
    inputs: &StepInputs,
    bound: &BoundParams,
    source: &DataSource,
    indices: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<Var, TrainError> {
    match inputs.stage.objective {
        Objective::Mlm => mlm_step(g, inputs, bound, &elements(source, indices), rng),
        Objective::Contrastive => contrastive_step(g, inputs, bound, source, indices),
        Objective::EmbeddingKd | Objective::RelationKd => distill_step(g, inputs, bound, &elements(source, indices)),
    }
}

/// Runs every stage of `plan` in order on `encoder`.
///
/// Each step records the objective on a fresh tape, aborts on a non-finite
/// loss or gradient (reporting stage, step, and a batch fingerprint), and
/// applies one Adam update. Log records are returned and, when `log_sink`
/// is given, streamed to it as JSON Lines. Distillation stages need
/// `teacher`, which stays frozen.
pub fn train_embedder(
    plan: &StagePlan,
    encoder: Encoder,
    sources: &[DataSource],
    teacher: Option<&Encoder>,
    mut log_sink: Option<&mut dyn Write>,
) -> Result<TrainOutput, TrainError> {
    plan.validate(sources)?;
    for stage in &plan.stages {
        if stage.objective.needs_teacher() {
            let t = teacher.ok_or_else(|| TrainError::MissingTeacher(stage.name.clone()))?;
            if t.config.vocab_size != encoder.config.vocab_size {
                return Err(TrainError::InvalidStage {
                    stage: stage.name.clone(),
                    message: format!(
                        "teacher vocabulary ({}) differs from student vocabulary ({})",
                        t.config.vocab_size, encoder.config.vocab_size
                    ),
                });
            }
        }
    }

    let mut encoder = encoder;
    let mut state = AdamState::default();
    let mut log = Vec::new();
    let mut global_step = 0;
    for stage in &plan.stages {
        if stage.steps == 0 {
            continue;
        }
        let stage_sources: Vec<&DataSource> = stage
            .sources
            .iter()
            .map(|n| sources.iter().find(|s| s.name() == n).expect("validated"))
            .collect();
        let sizes: Vec<usize> = stage_sources.iter().map(|s| s.size()).collect();
        let mut sampler = super::ProportionalSampler::new(&sizes, stage.batch_size, stage.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(stage.seed);
        rng.set_stream(1);
        let schedule = LinearSchedule::new(stage.lr, stage.steps, stage.warmup_frac);

        for step in 0..stage.steps {
            let batch = sampler.next_batch();
            let source = stage_sources[batch.source];
            let non_finite = |what| TrainError::NonFinite {
                what,
                stage: stage.name.clone(),
                step,
                fingerprint: fingerprint(source.name(), &batch.indices),
            };

            let mut g = Graph::new();
            let bound = encoder.params.bind(&mut g);
            let inputs = StepInputs {
                plan,
                stage,
                config: &encoder.config,
                teacher,
            };
            let loss = step_loss(&mut g, &inputs, &bound, source, &batch.indices, &mut rng)?;
            let value = g.value(loss).get(0, 0);
            if !value.is_finite() {
                return Err(non_finite("loss"));
            }
            let grads = g.backward(loss)?.params();
            if grads.values().any(|t| !t.is_finite()) {
                return Err(non_finite("gradient"));
            }
            let lr = schedule.at(step);
            adam_step(&mut encoder.params, &grads, &mut state, lr, &plan.adam)?;

            let record = LogRecord {
                stage: stage.name.clone(),
                step,
                global_step,
                objective: stage.objective,
                source: source.name().to_string(),
                loss: value,
                lr,
            };
            if let Some(sink) = log_sink.as_deref_mut() {
                serde_json::to_writer(&mut *sink, &record)?;
                sink.write_all(b"\n")?;
            }
            log.push(record);
            global_step += 1;
        }
    }
    Ok(TrainOutput { encoder, log })
}

/// Settings of one-stage embedder distillation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub kd: KdConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub seed: u64,
    /// Weight of the auxiliary relation term; 0 disables it.
    pub relation_weight: f64,
    pub relation_heads: usize,
    pub num_special: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            kd: KdConfig::default(),
            steps: 1000,
            batch_size: 32,
            lr: DEFAULT_DISTILL_LR,
            warmup_frac: LinearSchedule::DEFAULT_WARMUP_FRAC,
            seed: 0,
            relation_weight: 0.0,
            relation_heads: 1,
            num_special: crate::tokenizer::DEFAULT_SPECIAL_TOKENS.len(),
        }
    }
}

/// Distills `teacher` into `student` in a single stage over all `sources`
/// at once, minimizing the similarity-distribution loss (plus the optional
/// relation term).
pub fn distill_embedder(
    teacher: &Encoder,
    student: Encoder,
    sources: &[DataSource],
    cfg: &DistillConfig,
    log_sink: Option<&mut dyn Write>,
) -> Result<TrainOutput, TrainError> {
    let stage = Stage {
        name: "distill".into(),
        sources: sources.iter().map(|s| s.name().to_string()).collect(),
        steps: cfg.steps,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        warmup_frac: cfg.warmup_frac,
        objective: Objective::EmbeddingKd,
        seed: cfg.seed,
        kd: cfg.kd,
        relation_weight: cfg.relation_weight,
        relation_heads: cfg.relation_heads,
        ..Stage::default()
    };
    let plan = StagePlan {
        num_special: cfg.num_special,
        ..StagePlan::new(vec![stage])
    };
    train_embedder(&plan, student, sources, Some(teacher), log_sink)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::Pooling;
    use crate::objectives::embedding_kd_loss;
    use crate::training::PairRecord;

    fn config(layers: usize) -> EncoderConfig {
        EncoderConfig {
            num_layers: layers,
            num_heads: 2,
            model_dim: 8,
            ff_dim: 16,
            max_seq_len: 12,
            vocab_size: 20,
            pooling: Pooling::Mean,
        }
    }

    fn pairs() -> DataSource {
        let recs = (0..12u32)
            .map(|i| PairRecord {
                query: vec![0, 5 + i % 6, 1],
                positive: vec![0, 5 + i % 6, 11 + i % 9, 1],
                negatives: Vec::new(),
            })
            .collect();
        DataSource::pairs("pairs", recs).unwrap()
    }

    fn docs() -> DataSource {
        DataSource::documents("docs", (0..10u32).map(|i| vec![0, 5 + i, 6 + i, 7 + i % 3, 1]).collect()).unwrap()
    }

    fn stage(objective: Objective, source: &str, steps: usize) -> Stage {
        Stage {
            name: objective.name().into(),
            sources: vec![source.into()],
            steps,
            batch_size: 4,
            lr: 1e-2,
            objective,
            seed: 3,
            ..Stage::default()
        }
    }

    #[test]
    fn zero_step_stage_keeps_parameters() {
        let enc = Encoder::new(config(1), 1).unwrap();
        let plan = StagePlan::new(vec![stage(Objective::Contrastive, "pairs", 0)]);
        let out = train_embedder(&plan, enc.clone(), &[pairs()], None, None).unwrap();
        assert_eq!(out.encoder, enc);
        assert!(out.log.is_empty());
    }

    #[test]
    fn stages_run_in_order_and_are_deterministic() {
        let plan = StagePlan::new(vec![
            stage(Objective::Mlm, "docs", 5),
            stage(Objective::Contrastive, "pairs", 7),
        ]);
        let sources = [docs(), pairs()];
        let run = || {
            let mut sink = Vec::new();
            let out = train_embedder(&plan, Encoder::new(config(1), 2).unwrap(), &sources, None, Some(&mut sink)).unwrap();
            (out, String::from_utf8(sink).unwrap())
        };
        let (a, text) = run();
        let (b, _) = run();
        assert_eq!(a.log.len(), 12);
        assert_eq!(a.log[4].objective, Objective::Mlm);
        assert_eq!(a.log[5].objective, Objective::Contrastive);
        assert_eq!(a.log[11].global_step, 11);
        assert!(a.log.iter().all(|r| r.loss.is_finite()));
        assert_eq!(a.encoder, b.encoder);
        assert_eq!(a.log.last().unwrap().loss, b.log.last().unwrap().loss);
        let lines: Vec<LogRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines, a.log);
    }

    #[test]
    fn contrastive_training_lowers_loss() {
        let mut s = stage(Objective::Contrastive, "pairs", 60);
        s.batch_size = 12;
        let out = train_embedder(&StagePlan::new(vec![s]), Encoder::new(config(1), 4).unwrap(), &[pairs()], None, None)
            .unwrap();
        let first: f64 = out.log[..5].iter().map(|r| r.loss).sum();
        let last: f64 = out.log[out.log.len() - 5..].iter().map(|r| r.loss).sum();
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn validation_errors() {
        let enc = Encoder::new(config(1), 1).unwrap();
        let bad_shape = StagePlan::new(vec![stage(Objective::Mlm, "pairs", 1)]);
        assert!(matches!(
            train_embedder(&bad_shape, enc.clone(), &[pairs()], None, None),
            Err(TrainError::InvalidStage { .. })
        ));
        let unknown = StagePlan::new(vec![stage(Objective::Contrastive, "nope", 1)]);
        assert!(matches!(
            train_embedder(&unknown, enc.clone(), &[pairs()], None, None),
            Err(TrainError::UnknownSource(_))
        ));
        let kd = StagePlan::new(vec![stage(Objective::EmbeddingKd, "pairs", 1)]);
        assert!(matches!(
            train_embedder(&kd, enc.clone(), &[pairs()], None, None),
            Err(TrainError::MissingTeacher(_))
        ));
        assert!(matches!(
            train_embedder(&bad_shape, enc, &[pairs(), pairs()], None, None),
            Err(TrainError::DuplicateSource(_))
        ));
    }

    #[test]
    fn nan_loss_aborts_with_fingerprint() {
        let mut enc = Encoder::new(config(1), 1).unwrap();
        enc.params.get_mut("embeddings.token").unwrap().data_mut()[0] = f64::NAN;
        let mut s = stage(Objective::Contrastive, "pairs", 3);
        s.batch_size = 12;
        match train_embedder(&StagePlan::new(vec![s]), enc, &[pairs()], None, None) {
            Err(TrainError::NonFinite { what, stage, step, fingerprint }) => {
                assert_eq!((what, stage.as_str(), step), ("loss", "contrastive", 0));
                assert!(fingerprint.starts_with("pairs[12]#"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn self_distillation_starts_at_teacher_entropy() {
        let teacher = Encoder::new(config(2), 5).unwrap();
        let source = docs();
        let cfg = DistillConfig {
            steps: 1,
            batch_size: 10,
            ..DistillConfig::default()
        };
        let out = distill_embedder(&teacher, teacher.clone(), &[source.clone()], &cfg, None).unwrap();
        let SourceData::Documents(d) = source.data() else { unreachable!() };
        // One batch covers the whole source, so the element set is known up to order.
        let emb = teacher.embed(d).unwrap();
        let rows: Vec<Vec<f64>> = emb.iter_rows().map(<[f64]>::to_vec).collect();
        let entropy = embedding_kd_loss(&rows, &rows, &cfg.kd).unwrap();
        assert!((out.log[0].loss - entropy).abs() < 1e-9);
    }

    #[test]
    fn relation_distillation_runs_across_widths() {
        let teacher = Encoder::new(config(2), 5).unwrap();
        let student = Encoder::new(
            EncoderConfig {
                model_dim: 4,
                ff_dim: 8,
                ..config(1)
            },
            6,
        )
        .unwrap();
        let mut s = stage(Objective::RelationKd, "docs", 20);
        s.relation_heads = 2;
        let out = train_embedder(&StagePlan::new(vec![s]), student, &[docs()], Some(&teacher), None).unwrap();
        assert!(out.log.iter().all(|r| r.loss.is_finite() && r.loss >= 0.0));
    }
}
