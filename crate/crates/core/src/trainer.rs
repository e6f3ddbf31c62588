//! Batched training with early stopping, checkpoints and multi-seed runs.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::rc::Rc;
use std::str::FromStr;
use std::time::Instant;

use jmie_autodiff::checkpoint::{load_into_store, save_store};
use jmie_autodiff::{AdamW, AdamWConfig, AutodiffError, Graph, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{split_train_dev, ConceptSpan, ConceptType, Document, RelationType};
use crate::decoders::{
    predict_documents, softmax_targets, Feed, JointConfig, JointLoss, JointModel, RelationMode, SentenceLabels,
    SentencePrediction, WordInit, NOLINK,
};
use crate::encoder::{EmbeddingTable, EncoderMode, PrecomputedEmbeddings, SentenceRef, Vocab};
use crate::error::{ModelError, TrainError};
use crate::evaluation::{average_reports, evaluate, EvalReport, Protocol};
use crate::pipeline::{map_documents, pair_candidates, GoldInjection, PipelineModels};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    #[default]
    Joint,
    Pipeline,
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Joint => "joint",
            Arch::Pipeline => "pipeline",
        })
    }
}

impl FromStr for Arch {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "joint" => Ok(Arch::Joint),
            "pipeline" => Ok(Arch::Pipeline),
            other => Err(format!("unknown architecture `{other}`")),
        }
    }
}

const WORD_LR: [f64; 3] = [1e-2, 1e-3, 1e-4];
const CONTEXT_LR: [f64; 3] = [1e-5, 2e-5, 5e-5];
const WORD_BATCH: [usize; 3] = [32, 64, 128];
const CONTEXT_BATCH: [usize; 2] = [16, 32];
const HIDDEN: [usize; 3] = [100, 300, 600];
const LABEL_DIM: [usize; 2] = [32, 64];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub arch: Arch,
    pub model: JointConfig,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub dev_fraction: f64,
    pub teacher_forcing: bool,
    /// Skip the hyperparameter grid check.
    pub unsafe_hparams: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            arch: Arch::Joint,
            model: JointConfig::default(),
            lr: 1e-2,
            weight_decay: 0.01,
            batch_size: 32,
            max_epochs: 200,
            patience: 10,
            seed: 1,
            dev_fraction: 0.1,
            teacher_forcing: true,
            unsafe_hparams: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, TrainError> {
    value
        .parse()
        .map_err(|_| TrainError::InvalidConfig(format!("bad value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, TrainError> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(TrainError::InvalidConfig(format!("bad value `{value}` for `{key}`"))),
    }
}

impl TrainConfig {
    /// Set one option by its config-file key. Returns `false` for keys this
    /// struct does not own (paths and other front-end options).
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool, TrainError> {
        let key_norm = key.replace('-', "_");
        let m = &mut self.model;
        match key_norm.as_str() {
            "arch" => self.arch = value.parse().map_err(TrainError::InvalidConfig)?,
            "encoder" => m.encoder.mode = value.parse().map_err(TrainError::InvalidConfig)?,
            "relation_mode" => m.relation_mode = value.parse().map_err(TrainError::InvalidConfig)?,
            "word_dim" => m.encoder.word_dim = parse(key, value)?,
            "hidden" => m.encoder.hidden = parse(key, value)?,
            "dropout" => m.encoder.dropout = parse(key, value)?,
            "freeze_embeddings" => m.encoder.freeze_embeddings = parse_bool(key, value)?,
            "concept_dim" => m.concept_dim = parse(key, value)?,
            "assertion_dim" => m.assertion_dim = parse(key, value)?,
            "relation_hidden" => m.relation_hidden = parse(key, value)?,
            "constrain_bio" => m.constrain_bio = parse_bool(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "batch" | "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" | "max_epochs" => self.max_epochs = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "dev_fraction" => self.dev_fraction = parse(key, value)?,
            "teacher_forcing" => self.teacher_forcing = parse_bool(key, value)?,
            "unsafe_hparams" => self.unsafe_hparams = parse_bool(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Check structural sanity, then (unless `unsafe_hparams`) the grids.
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        let m = &self.model;
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch size and epoch cap must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&m.encoder.dropout) {
            return bad("learning rate must be positive and dropout in [0, 1)".into());
        }
        if !(self.dev_fraction > 0.0 && self.dev_fraction < 1.0) {
            return bad("dev fraction must lie in (0, 1)".into());
        }
        if m.encoder.word_dim == 0 || m.encoder.hidden == 0 || m.relation_hidden == 0 {
            return bad("dimensions must be positive".into());
        }
        if self.unsafe_hparams {
            return Ok(());
        }
        let contextual = m.encoder.mode.uses_precomputed();
        let (lrs, batches): (&[f64], &[usize]) = if contextual {
            (&CONTEXT_LR, &CONTEXT_BATCH)
        } else {
            (&WORD_LR, &WORD_BATCH)
        };
        if !lrs.contains(&self.lr) {
            return bad(format!("lr {} not in {lrs:?} (use --unsafe-hparams to override)", self.lr));
        }
        if !batches.contains(&self.batch_size) {
            return bad(format!(
                "batch {} not in {batches:?} (use --unsafe-hparams to override)",
                self.batch_size
            ));
        }
        if m.encoder.mode.uses_lstm() && !HIDDEN.contains(&m.encoder.hidden) {
            return bad(format!(
                "hidden {} not in {HIDDEN:?} (use --unsafe-hparams to override)",
                m.encoder.hidden
            ));
        }
        for (name, v) in [("concept_dim", m.concept_dim), ("assertion_dim", m.assertion_dim)] {
            if !LABEL_DIM.contains(&v) {
                return bad(format!("{name} {v} not in {LABEL_DIM:?} (use --unsafe-hparams to override)"));
            }
        }
        Ok(())
    }
}

/// Parse a flat `key = value` file; `#` starts a comment.
pub fn read_config_file(text: &str) -> Result<Vec<(String, String)>, TrainError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| TrainError::InvalidConfig(format!("config line {}: expected key = value", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// External inputs a model may need besides the corpus.
#[derive(Clone, Debug, Default)]
pub struct Resources {
    pub word_vectors: Option<EmbeddingTable>,
    pub precomputed: Option<Rc<PrecomputedEmbeddings>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean stage losses over the epoch's batches. Pipeline stages fill
    /// `total` only.
    pub loss: JointLoss,
    pub dev_score: f64,
    pub dev_report: Option<EvalReport>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub arch: Arch,
    /// `joint`, or the pipeline stage name.
    pub stage: String,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_dev_score: f64,
    /// Batches where the total loss differed from the sum of its parts.
    pub additivity_violations: usize,
    pub batches: usize,
    pub wall_seconds: f64,
}

/// A training sentence with its labels.
pub struct Example<'a> {
    pub sentence: SentenceRef<'a>,
    pub labels: SentenceLabels,
    pub doc: &'a Document,
}

pub fn examples(docs: &[Document]) -> Result<Vec<Example<'_>>, ModelError> {
    let mut out = Vec::new();
    for doc in docs {
        for (s, tokens) in doc.sentences.iter().enumerate() {
            if tokens.is_empty() {
                continue;
            }
            out.push(Example {
                sentence: SentenceRef {
                    doc_id: &doc.id,
                    sent: s,
                    tokens,
                },
                labels: SentenceLabels::from_document(doc, s)?,
                doc,
            });
        }
    }
    Ok(out)
}

/// Length-sorted buckets of example indices, in a per-epoch shuffled order.
pub fn batches(examples: &[Example], batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.sort_by_key(|&i| (examples[i].sentence.tokens.len(), i));
    let mut out: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    out.shuffle(&mut rng);
    out
}

/// The loss of one batch; `parts` is set for the joint objective.
pub struct BatchLoss {
    pub total: Var,
    pub parts: Option<crate::decoders::JointLossVars>,
}

/// One trainable objective over its own parameter store.
pub trait Objective {
    fn name(&self) -> &str;

    /// `None` when the batch has nothing to supervise.
    fn batch_loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &[&Example],
        seed: u64,
        step: u64,
    ) -> Result<Option<BatchLoss>, ModelError>;

    /// Score to maximize on `dev`, with a report when meaningful.
    fn evaluate(&self, store: &ParamStore, dev: &[Document]) -> Result<(f64, Option<EvalReport>), TrainError>;
}

fn snapshot(store: &ParamStore) -> Vec<Tensor> {
    store.ids().map(|id| store.value(id).clone()).collect()
}

fn restore(store: &mut ParamStore, values: Vec<Tensor>) -> Result<(), TrainError> {
    let ids: Vec<_> = store.ids().collect();
    for (id, v) in ids.into_iter().zip(values) {
        store.set_value(id, v)?;
    }
    Ok(())
}

/// Train until `patience` epochs pass without a strictly better dev score
/// or the epoch cap is hit, then restore the best parameters.
pub fn fit<O: Objective>(
    objective: &O,
    store: &mut ParamStore,
    train: &[Example],
    dev: &[Document],
    config: &TrainConfig,
    seed: u64,
) -> Result<RunRecord, TrainError> {
    let started = Instant::now();
    let mut opt = AdamW::new(AdamWConfig {
        lr: config.lr,
        weight_decay: config.weight_decay,
        ..AdamWConfig::default()
    });
    let mut record = RunRecord {
        arch: config.arch,
        stage: objective.name().to_string(),
        seed,
        epochs: Vec::new(),
        best_epoch: 0,
        best_dev_score: f64::NEG_INFINITY,
        additivity_violations: 0,
        batches: 0,
        wall_seconds: 0.0,
    };
    let mut best = snapshot(store);
    let mut since = 0;
    let mut step = 0u64;
    for epoch in 1..=config.max_epochs {
        let t0 = Instant::now();
        let mut sums = JointLoss::default();
        let mut counted = 0usize;
        for idx in batches(train, config.batch_size, seed, epoch) {
            let batch: Vec<&Example> = idx.iter().map(|&i| &train[i]).collect();
            let mut g = Graph::new();
            let Some(loss) = objective.batch_loss(&mut g, store, &batch, seed, step)? else {
                continue;
            };
            let total = g.value(loss.total).item();
            if !total.is_finite() {
                return Err(TrainError::DivergedLoss { epoch });
            }
            if let Some(parts) = loss.parts {
                let v = parts.values(&g);
                if v.total.to_bits() != (v.concept + v.assertion + v.relation).to_bits() {
                    record.additivity_violations += 1;
                }
                sums.concept += v.concept;
                sums.assertion += v.assertion;
                sums.relation += v.relation;
            }
            sums.total += total;
            counted += 1;
            store.zero_grads();
            g.backward(loss.total, store)?;
            opt.step(store).map_err(|e| match e {
                AutodiffError::NonFiniteGradient(_) => TrainError::DivergedLoss { epoch },
                other => other.into(),
            })?;
            step += 1;
        }
        record.batches += counted;
        let n = counted.max(1) as f64;
        let mean = JointLoss {
            concept: sums.concept / n,
            assertion: sums.assertion / n,
            relation: sums.relation / n,
            total: sums.total / n,
        };
        let (score, report) = objective.evaluate(store, dev)?;
        log::info!(
            "{} seed {seed} epoch {epoch}: loss {:.4} dev {:.4}",
            objective.name(),
            mean.total,
            score
        );
        record.epochs.push(EpochRecord {
            epoch,
            loss: mean,
            dev_score: score,
            dev_report: report,
            seconds: t0.elapsed().as_secs_f64(),
        });
        if score > record.best_dev_score {
            record.best_dev_score = score;
            record.best_epoch = epoch;
            best = snapshot(store);
            since = 0;
        } else {
            since += 1;
        }
        if since >= config.patience {
            break;
        }
    }
    restore(store, best)?;
    record.wall_seconds = started.elapsed().as_secs_f64();
    Ok(record)
}

const EVAL_BATCH: usize = 64;

pub struct JointObjective<'a> {
    pub model: &'a JointModel,
    pub teacher_forcing: bool,
}

impl Objective for JointObjective<'_> {
    fn name(&self) -> &str {
        "joint"
    }

    fn batch_loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &[&Example],
        seed: u64,
        step: u64,
    ) -> Result<Option<BatchLoss>, ModelError> {
        let refs: Vec<SentenceRef> = batch.iter().map(|e| e.sentence).collect();
        let gold: Vec<SentenceLabels> = batch.iter().map(|e| e.labels.clone()).collect();
        let feed = if self.teacher_forcing { Feed::TEACHER_FORCING } else { Feed::PREDICTED };
        let out = self.model.forward(g, store, &refs, Some(&gold), feed, true, seed, step)?;
        let parts = out.loss.expect("gold supplied");
        Ok(Some(BatchLoss {
            total: parts.total,
            parts: Some(parts),
        }))
    }

    fn evaluate(&self, store: &ParamStore, dev: &[Document]) -> Result<(f64, Option<EvalReport>), TrainError> {
        let pred = predict_documents(self.model, store, dev, Feed::PREDICTED, EVAL_BATCH, |_, _, _| {})?;
        let report = evaluate(&pred, dev, Protocol::Joint)?;
        Ok((report.mean_f1(), Some(report)))
    }
}

struct ConceptObjective<'a> {
    models: &'a PipelineModels,
}

impl Objective for ConceptObjective<'_> {
    fn name(&self) -> &str {
        "concept"
    }

    fn batch_loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &[&Example],
        seed: u64,
        step: u64,
    ) -> Result<Option<BatchLoss>, ModelError> {
        let refs: Vec<SentenceRef> = batch.iter().map(|e| e.sentence).collect();
        let tags: Vec<Vec<usize>> = batch.iter().map(|e| e.labels.tags.clone()).collect();
        let total = self.models.concept.loss(g, store, &refs, &tags, true, seed, step)?;
        Ok(Some(BatchLoss { total, parts: None }))
    }

    fn evaluate(&self, store: &ParamStore, dev: &[Document]) -> Result<(f64, Option<EvalReport>), TrainError> {
        let tagger = &self.models.concept;
        let constrain = self.models.config.constrain_bio;
        let pred = map_documents(dev, EVAL_BATCH, |batch, _| {
            Ok(tagger
                .predict(store, batch, constrain)?
                .into_iter()
                .map(|c| (c, Vec::new(), Vec::new()))
                .collect())
        })?;
        let report = evaluate(&pred, dev, Protocol::Independent)?;
        Ok((report.concept.f1, None))
    }
}

struct AssertionObjective<'a> {
    models: &'a PipelineModels,
}

impl Objective for AssertionObjective<'_> {
    fn name(&self) -> &str {
        "assertion"
    }

    fn batch_loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &[&Example],
        seed: u64,
        step: u64,
    ) -> Result<Option<BatchLoss>, ModelError> {
        let mut spans = Vec::new();
        let mut targets = Vec::new();
        for (k, e) in batch.iter().enumerate() {
            for (c, a) in &e.labels.assertions {
                spans.push((k, *c));
                targets.push(Some(a.index()));
            }
        }
        if spans.is_empty() {
            return Ok(None);
        }
        let refs: Vec<SentenceRef> = batch.iter().map(|e| e.sentence).collect();
        let logits = self.models.assertion.logits(g, store, &refs, &spans, true, seed, step)?;
        let total = g.cross_entropy(logits, &targets, None)?;
        Ok(Some(BatchLoss { total, parts: None }))
    }

    fn evaluate(&self, store: &ParamStore, dev: &[Document]) -> Result<(f64, Option<EvalReport>), TrainError> {
        let model = &self.models.assertion;
        let pred = map_documents(dev, EVAL_BATCH, |batch, gold| {
            let concepts: Vec<Vec<ConceptSpan>> = gold.iter().map(|(c, _)| c.clone()).collect();
            let assertions = model.predict(store, batch, &concepts)?;
            Ok(concepts
                .into_iter()
                .zip(assertions)
                .map(|(c, a)| (c, a, Vec::new()))
                .collect())
        })?;
        let report = evaluate(&pred, dev, Protocol::Independent)?;
        Ok((report.assertion.f1, None))
    }
}

struct RelationObjective<'a> {
    models: &'a PipelineModels,
}

impl Objective for RelationObjective<'_> {
    fn name(&self) -> &str {
        "relation"
    }

    fn batch_loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &[&Example],
        seed: u64,
        step: u64,
    ) -> Result<Option<BatchLoss>, ModelError> {
        let concepts: Vec<Vec<ConceptSpan>> = batch.iter().map(|e| e.labels.spans.clone()).collect();
        let assertions: Vec<Vec<crate::corpus::Assertion>> = batch
            .iter()
            .map(|e| {
                e.labels
                    .assertions
                    .iter()
                    .map(|(c, a)| crate::corpus::Assertion { concept: *c, label: *a })
                    .collect()
            })
            .collect();
        let pairs = pair_candidates(&concepts, &assertions);
        if pairs.is_empty() {
            return Ok(None);
        }
        let targets: Vec<Option<usize>> = pairs
            .iter()
            .map(|p| {
                let doc = batch[p.sentence].doc;
                let label = doc
                    .relations
                    .iter()
                    .find(|r| r.subject == p.subject && r.object == p.object)
                    .map(|r| r.label);
                Some(label.map_or(NOLINK, RelationType::index))
            })
            .collect();
        let refs: Vec<SentenceRef> = batch.iter().map(|e| e.sentence).collect();
        let logits = self.models.relation.logits(g, store, &refs, &pairs, true, seed, step)?;
        let total = g.cross_entropy(logits, &targets, None)?;
        Ok(Some(BatchLoss { total, parts: None }))
    }

    fn evaluate(&self, store: &ParamStore, dev: &[Document]) -> Result<(f64, Option<EvalReport>), TrainError> {
        let model = &self.models.relation;
        let pred = map_documents(dev, EVAL_BATCH, |batch, gold| {
            let concepts: Vec<Vec<ConceptSpan>> = gold.iter().map(|(c, _)| c.clone()).collect();
            let assertions: Vec<_> = gold.iter().map(|(_, a)| a.clone()).collect();
            let relations = model.predict(store, batch, &concepts, &assertions)?;
            Ok(concepts
                .into_iter()
                .zip(assertions)
                .zip(relations)
                .map(|((c, a), r)| (c, a, r))
                .collect())
        })?;
        let report = evaluate(&pred, dev, Protocol::Independent)?;
        Ok((report.relation.f1, None))
    }
}

/// A trained model of either architecture.
#[derive(Clone, Debug)]
pub enum TrainedModel {
    Joint { model: JointModel, store: ParamStore },
    Pipeline(Box<PipelineModels>),
}

#[derive(Serialize, Deserialize)]
struct ModelManifest {
    config: TrainConfig,
    vocab: Option<Vec<String>>,
}

const MANIFEST: &str = "model.json";

fn stage_rng(seed: u64, stage: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (0x5eed_0000 + stage))
}

/// Sorted distinct tokens of `docs`.
pub fn corpus_words<'a>(docs: impl IntoIterator<Item = &'a Document>) -> Vec<String> {
    let set: BTreeSet<&str> = docs
        .into_iter()
        .flat_map(|d| d.sentences.iter().flatten().map(String::as_str))
        .collect();
    set.into_iter().map(str::to_string).collect()
}

impl TrainedModel {
    /// Fresh, untrained parameters.
    pub fn init(config: &TrainConfig, words: WordInit, resources: &Resources) -> Result<Self, ModelError> {
        let pre = resources.precomputed.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(match config.arch {
            Arch::Joint => {
                let mut store = ParamStore::new();
                let model = JointModel::new(&mut store, config.model.clone(), words, pre, &mut rng)?;
                TrainedModel::Joint { model, store }
            }
            Arch::Pipeline => TrainedModel::Pipeline(Box::new(PipelineModels::new(
                config.model.clone(),
                words,
                pre,
                &mut rng,
                &mut stage_rng(config.seed, 1),
                &mut stage_rng(config.seed, 2),
            )?)),
        })
    }

    pub fn arch(&self) -> Arch {
        match self {
            TrainedModel::Joint { .. } => Arch::Joint,
            TrainedModel::Pipeline(_) => Arch::Pipeline,
        }
    }

    pub fn vocab(&self) -> Option<&Vocab> {
        match self {
            TrainedModel::Joint { model, .. } => model.tagger.encoder.vocab.as_ref(),
            TrainedModel::Pipeline(p) => p.concept.encoder.vocab.as_ref(),
        }
    }

    /// Predict `docs`. `inject` replaces stage inputs with the documents'
    /// own annotations. `on_sentence` sees per-sentence scores of the joint
    /// model.
    pub fn predict(
        &self,
        docs: &[Document],
        inject: GoldInjection,
        on_sentence: impl FnMut(&Document, usize, &SentencePrediction),
    ) -> Result<Vec<Document>, ModelError> {
        match self {
            TrainedModel::Joint { model, store } => {
                let feed = match inject {
                    GoldInjection::None => Feed::PREDICTED,
                    GoldInjection::Concept => Feed::GOLD_CONCEPTS,
                    GoldInjection::Assertion => Feed::TEACHER_FORCING,
                };
                predict_documents(model, store, docs, feed, EVAL_BATCH, on_sentence)
            }
            TrainedModel::Pipeline(p) => p.predict(docs, inject, EVAL_BATCH),
        }
    }

    fn stores(&self) -> Vec<(&'static str, &ParamStore)> {
        match self {
            TrainedModel::Joint { store, .. } => vec![("model.jckp", store)],
            TrainedModel::Pipeline(p) => vec![
                ("concept.jckp", &p.concept_store),
                ("assertion.jckp", &p.assertion_store),
                ("relation.jckp", &p.relation_store),
            ],
        }
    }

    fn stores_mut(&mut self) -> Vec<(&'static str, &mut ParamStore)> {
        match self {
            TrainedModel::Joint { store, .. } => vec![("model.jckp", store)],
            TrainedModel::Pipeline(p) => vec![
                ("concept.jckp", &mut p.concept_store),
                ("assertion.jckp", &mut p.assertion_store),
                ("relation.jckp", &mut p.relation_store),
            ],
        }
    }

    /// Write the checkpoint(s) and `model.json` into `dir`.
    pub fn save(&self, dir: &Path, config: &TrainConfig) -> Result<(), TrainError> {
        fs::create_dir_all(dir)?;
        for (file, store) in self.stores() {
            let mut w = BufWriter::new(fs::File::create(dir.join(file))?);
            save_store(&mut w, store)?;
            w.flush()?;
        }
        let manifest = ModelManifest {
            config: config.clone(),
            vocab: self.vocab().map(|v| v.tokens().to_vec()),
        };
        fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path, resources: &Resources) -> Result<(Self, TrainConfig), TrainError> {
        let manifest: ModelManifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST))?)?;
        let words = match manifest.vocab {
            Some(list) => WordInit::Restored(
                Vocab::from_list(list).ok_or_else(|| ModelError::Format("stored vocabulary is malformed".into()))?,
            ),
            None => WordInit::Random(Vec::new()),
        };
        let mut model = TrainedModel::init(&manifest.config, words, resources)?;
        for (file, store) in model.stores_mut() {
            let r = BufReader::new(fs::File::open(dir.join(file))?);
            load_into_store(r, store)?;
        }
        Ok((model, manifest.config))
    }
}

/// Word table source for training on `train` (plus `dev` words when
/// pretrained vectors are given).
fn word_init(config: &TrainConfig, train: &[Document], dev: &[Document], resources: &Resources) -> WordInit {
    match &resources.word_vectors {
        Some(table) => {
            let words = corpus_words(train.iter().chain(dev));
            WordInit::Pretrained(table.restrict(words.iter().map(String::as_str)))
        }
        None if config.model.encoder.mode == EncoderMode::TrainableLstm => WordInit::Random(corpus_words(train)),
        None => WordInit::Random(Vec::new()),
    }
}

/// Check the resources fit the configuration and fix dependent settings.
fn prepare(config: &TrainConfig, resources: &Resources) -> Result<TrainConfig, TrainError> {
    config.validate()?;
    let mut config = config.clone();
    if let Some(t) = &resources.word_vectors {
        config.model.encoder.word_dim = t.dim();
    }
    if config.model.encoder.mode.uses_precomputed() && resources.precomputed.is_none() {
        return Err(TrainError::InvalidConfig(format!(
            "encoder `{}` needs a precomputed embedding file",
            config.model.encoder.mode
        )));
    }
    Ok(config)
}

/// Train on an explicit train/dev partition.
pub fn train_split(
    train: &[Document],
    dev: &[Document],
    config: &TrainConfig,
    resources: &Resources,
) -> Result<(TrainedModel, TrainConfig, Vec<RunRecord>), TrainError> {
    let config = prepare(config, resources)?;
    if let Some(p) = &resources.precomputed {
        p.check_against(train)?;
        p.check_against(dev)?;
    }
    let words = word_init(&config, train, dev, resources);
    let mut model = TrainedModel::init(&config, words, resources)?;
    let ex = examples(train)?;
    if config.model.relation_mode == RelationMode::Softmax && config.arch == Arch::Joint {
        let dropped: usize = ex
            .iter()
            .map(|e| softmax_targets(e.sentence.tokens.len(), &e.labels.relations).1)
            .sum();
        if dropped > 0 {
            log::warn!("{dropped} gold relations share an object head with another and are not trained on");
        }
    }
    let seed = config.seed;
    let records = match &mut model {
        TrainedModel::Joint { model, store } => {
            let objective = JointObjective {
                model,
                teacher_forcing: config.teacher_forcing,
            };
            vec![fit(&objective, store, &ex, dev, &config, seed)?]
        }
        TrainedModel::Pipeline(p) => {
            let mut stores = (
                std::mem::take(&mut p.concept_store),
                std::mem::take(&mut p.assertion_store),
                std::mem::take(&mut p.relation_store),
            );
            let models: &PipelineModels = p;
            let r1 = fit(&ConceptObjective { models }, &mut stores.0, &ex, dev, &config, seed)?;
            let r2 = fit(&AssertionObjective { models }, &mut stores.1, &ex, dev, &config, seed.wrapping_add(1))?;
            let r3 = fit(&RelationObjective { models }, &mut stores.2, &ex, dev, &config, seed.wrapping_add(2))?;
            p.concept_store = stores.0;
            p.assertion_store = stores.1;
            p.relation_store = stores.2;
            vec![r1, r2, r3]
        }
    };
    Ok((model, config, records))
}

/// Split `corpus` into train and dev documents, then train.
pub fn train(
    corpus: &[Document],
    config: &TrainConfig,
    resources: &Resources,
) -> Result<(TrainedModel, TrainConfig, Vec<RunRecord>), TrainError> {
    config.validate()?;
    let (tr, dev) = split_train_dev(corpus, config.dev_fraction, config.seed)?;
    train_split(&tr, &dev, config, resources)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub report: EvalReport,
    pub records: Vec<RunRecord>,
}

/// Train once per seed and score each run on `test` (or its own dev split
/// when no test set is given) under the joint protocol. Returns the
/// per-stage mean and the individual runs.
pub fn run_seeds(
    corpus: &[Document],
    test: Option<&[Document]>,
    config: &TrainConfig,
    seeds: &[u64],
    resources: &Resources,
) -> Result<(EvalReport, Vec<SeedRun>), TrainError> {
    if seeds.is_empty() {
        return Err(TrainError::InvalidConfig("need at least one seed".into()));
    }
    let mut runs = Vec::new();
    for &seed in seeds {
        let cfg = TrainConfig { seed, ..config.clone() };
        cfg.validate()?;
        let (tr, dev) = split_train_dev(corpus, cfg.dev_fraction, seed)?;
        let (model, _, records) = train_split(&tr, &dev, &cfg, resources)?;
        let target = test.unwrap_or(&dev);
        let pred = model.predict(target, GoldInjection::None, |_, _, _| {})?;
        let report = evaluate(&pred, target, Protocol::Joint)?;
        runs.push(SeedRun { seed, report, records });
    }
    let reports: Vec<EvalReport> = runs.iter().map(|r| r.report.clone()).collect();
    Ok((average_reports(&reports).expect("at least one run"), runs))
}

/// Count of problem concepts, for quick sanity logs.
pub fn count_problems(docs: &[Document]) -> usize {
    docs.iter()
        .flat_map(|d| &d.concepts)
        .filter(|c| c.ctype == ConceptType::Problem)
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_validation() {
        let mut c = TrainConfig::default();
        c.validate().unwrap();
        c.lr = 0.5;
        assert!(matches!(c.validate(), Err(TrainError::InvalidConfig(_))));
        c.unsafe_hparams = true;
        c.validate().unwrap();
        let mut c = TrainConfig::default();
        c.model.encoder.mode = EncoderMode::PrecomputedLstm;
        assert!(c.validate().is_err());
        c.lr = 2e-5;
        c.batch_size = 16;
        c.validate().unwrap();
    }

    #[test]
    fn config_file_keys() {
        let kv = read_config_file("# comment\nlr = 0.01\nbatch=64\nencoder = precomputed+lstm\nout = x\n").unwrap();
        let mut c = TrainConfig::default();
        let mut unknown = Vec::new();
        for (k, v) in &kv {
            if !c.set(k, v).unwrap() {
                unknown.push(k.clone());
            }
        }
        assert_eq!(c.lr, 0.01);
        assert_eq!(c.batch_size, 64);
        assert_eq!(c.model.encoder.mode, EncoderMode::PrecomputedLstm);
        assert_eq!(unknown, vec!["out".to_string()]);
        assert!(read_config_file("novalue").is_err());
        assert!(c.set("lr", "fast").is_err());
    }
}
