use std::rc::Rc;

use jmie_autodiff::{Axis, Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    argmax_labels, offsets, weighted_sum, xavier, AssertionHead, BioConstraint, ConceptTagger, CrfScores,
    RelationHead, RelationMode, SentenceLabels, TokenRelation, WordInit, NO_ASSERTION, NUM_ASSERTIONS,
};
use crate::corpus::{
    bio_to_spans, Assertion, ConceptSpan, ConceptType, Document, Relation, TagSequence, NUM_TAGS,
};
use crate::encoder::{EncoderConfig, PrecomputedEmbeddings, SentenceRef};
use crate::error::ModelError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointConfig {
    pub encoder: EncoderConfig,
    pub concept_dim: usize,
    pub assertion_dim: usize,
    pub relation_hidden: usize,
    pub relation_mode: RelationMode,
    pub constrain_bio: bool,
}

impl Default for JointConfig {
    fn default() -> Self {
        JointConfig {
            encoder: EncoderConfig::default(),
            concept_dim: 32,
            assertion_dim: 32,
            relation_hidden: 128,
            relation_mode: RelationMode::Softmax,
            constrain_bio: true,
        }
    }
}

/// Which labels reach the downstream decoders: gold ones (teacher forcing
/// or gold injection) or the model's own predictions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Feed {
    pub gold_concepts: bool,
    pub gold_assertions: bool,
}

impl Feed {
    pub const TEACHER_FORCING: Feed = Feed {
        gold_concepts: true,
        gold_assertions: true,
    };
    pub const PREDICTED: Feed = Feed {
        gold_concepts: false,
        gold_assertions: false,
    };
    pub const GOLD_CONCEPTS: Feed = Feed {
        gold_concepts: true,
        gold_assertions: false,
    };
}

/// Stage losses on the tape. Concept and relation are per-token means over
/// the batch (summed sentence NLL, resp. summed token cross-entropy, over the
/// token count); assertion is the mean over problem heads.
#[derive(Clone, Copy, Debug)]
pub struct JointLossVars {
    pub concept: Var,
    pub assertion: Var,
    pub relation: Var,
    pub total: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct JointLoss {
    pub concept: f64,
    pub assertion: f64,
    pub relation: f64,
    pub total: f64,
}

impl JointLossVars {
    pub fn values(&self, g: &Graph) -> JointLoss {
        JointLoss {
            concept: g.value(self.concept).item(),
            assertion: g.value(self.assertion).item(),
            relation: g.value(self.relation).item(),
            total: g.value(self.total).item(),
        }
    }
}

/// Decoded output for one sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct SentencePrediction {
    /// Viterbi tags of the concept decoder.
    pub tags: TagSequence,
    /// Concepts that fed the later stages (predicted, or gold when injected).
    pub concepts: Vec<ConceptSpan>,
    pub assertions: Vec<Assertion>,
    pub relations: Vec<Relation>,
    pub emissions: Tensor,
    /// `n x (n*K)` relation scores, see [`RelationHead::scores`].
    pub relation_scores: Tensor,
}

pub struct JointOutput {
    pub loss: Option<JointLossVars>,
    pub sentences: Vec<SentencePrediction>,
}

#[derive(Clone, Debug)]
pub struct JointModel {
    pub config: JointConfig,
    pub tagger: ConceptTagger,
    pub concept_emb: ParamId,
    pub assertion_emb: ParamId,
    pub assertion: AssertionHead,
    pub relation: RelationHead,
}

impl JointModel {
    pub fn new(
        store: &mut ParamStore,
        config: JointConfig,
        words: WordInit,
        precomputed: Option<Rc<PrecomputedEmbeddings>>,
        rng: &mut impl Rng,
    ) -> Result<Self, ModelError> {
        let tagger = ConceptTagger::new(store, "concept", &config.encoder, words, precomputed, rng)?;
        let d = tagger.encoder.output_dim();
        let concept_emb = store.add("label.concept", xavier(rng, NUM_TAGS, config.concept_dim))?;
        let assertion_emb = store.add("label.assertion", xavier(rng, NUM_ASSERTIONS + 1, config.assertion_dim))?;
        let assertion = AssertionHead::new(store, "assertion", d + config.concept_dim, rng)?;
        let relation = RelationHead::new(
            store,
            "relation",
            d + config.concept_dim + config.assertion_dim,
            config.relation_hidden,
            config.relation_mode,
            rng,
        )?;
        Ok(JointModel {
            config,
            tagger,
            concept_emb,
            assertion_emb,
            assertion,
            relation,
        })
    }

    /// Run all three stages over a batch. Losses are computed when `gold`
    /// is given; `feed` selects which labels reach the later stages.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &[SentenceRef],
        gold: Option<&[SentenceLabels]>,
        feed: Feed,
        train: bool,
        seed: u64,
        step: u64,
    ) -> Result<JointOutput, ModelError> {
        if let Some(gold) = gold {
            if gold.len() != batch.len() {
                return Err(ModelError::LengthMismatch {
                    tags: gold.len(),
                    rows: batch.len(),
                });
            }
        }
        if gold.is_none() && (feed.gold_concepts || feed.gold_assertions) {
            return Err(ModelError::Format("gold labels requested but not supplied".into()));
        }
        let offs = offsets(batch);
        let total_tokens: usize = batch.iter().map(|s| s.tokens.len()).sum();
        let x = self.tagger.encoder.encode_batch(g, store, batch, train, seed, step)?;

        // Stage 1: concepts.
        let emissions = self.tagger.crf.emissions(g, store, x)?;
        let crf_vars = self.tagger.crf.vars(g, store);
        let crf_scores = CrfScores::from_store(&self.tagger.crf, store);
        let constraint = self.config.constrain_bio.then(BioConstraint::new);
        let mut concept_terms = Vec::new();
        let mut predicted_tags = Vec::with_capacity(batch.len());
        let mut emission_values = Vec::with_capacity(batch.len());
        for (k, s) in batch.iter().enumerate() {
            let n = s.tokens.len();
            let em = g.slice(emissions, Axis::Rows, offs[k], n)?;
            if let Some(gold) = gold {
                if gold[k].tags.len() != n {
                    return Err(ModelError::LengthMismatch {
                        tags: gold[k].tags.len(),
                        rows: n,
                    });
                }
                let l = super::nll(g, em, &crf_vars, &gold[k].tags)?;
                concept_terms.push((l, 1.0 / total_tokens as f64));
            }
            let ev = g.value(em).clone();
            let (tags, _) = crf_scores.viterbi(&ev, constraint.as_ref());
            predicted_tags.push(TagSequence::from_indices(&tags).expect("tag indices in range"));
            emission_values.push(ev);
        }

        let fed_tags: Vec<Vec<usize>> = (0..batch.len())
            .map(|k| match gold {
                Some(gold) if feed.gold_concepts => gold[k].tags.clone(),
                _ => predicted_tags[k].indices(),
            })
            .collect();
        let fed_spans: Vec<Vec<ConceptSpan>> = fed_tags
            .iter()
            .zip(batch)
            .map(|(t, s)| bio_to_spans(&TagSequence::from_indices(t).expect("valid indices"), s.sent))
            .collect();
        let ce_table = g.param(store, self.concept_emb);
        let all_tags: Vec<usize> = fed_tags.iter().flatten().copied().collect();
        let ce = g.embedding_lookup(ce_table, &all_tags)?;

        // Stage 2: assertions at problem heads.
        let mut heads = Vec::new();
        let mut head_spans = Vec::new();
        for (k, spans) in fed_spans.iter().enumerate() {
            for span in spans.iter().filter(|c| c.ctype == ConceptType::Problem) {
                heads.push(offs[k] + span.head());
                head_spans.push((k, *span));
            }
        }
        let mut predicted_assertions = Vec::new();
        let mut assertion_loss = None;
        if !heads.is_empty() {
            let ce_heads = g.embedding_lookup(ce, &heads)?;
            let logits = self.assertion.logits(g, store, x, &heads, ce_heads)?;
            predicted_assertions = argmax_labels(g.value(logits));
            if let Some(gold) = gold {
                let targets: Vec<Option<usize>> = head_spans
                    .iter()
                    .map(|(k, span)| gold[*k].assertion_for(span).map(|a| a.index()))
                    .collect();
                assertion_loss = Some(g.cross_entropy(logits, &targets, None)?);
            }
        }
        let mut fed_assertions: Vec<Vec<Assertion>> = vec![Vec::new(); batch.len()];
        for (h, (k, span)) in head_spans.iter().enumerate() {
            let label = match gold {
                Some(gold) if feed.gold_assertions => gold[*k].assertion_for(span).unwrap_or(predicted_assertions[h]),
                _ => predicted_assertions[h],
            };
            fed_assertions[*k].push(Assertion { concept: *span, label });
        }

        // Stage 3: relations over [X ; CE ; AE].
        let mut ae_rows = vec![NO_ASSERTION; total_tokens];
        for (k, list) in fed_assertions.iter().enumerate() {
            for a in list {
                ae_rows[offs[k] + a.concept.head()] = a.label.index();
            }
        }
        let ae_table = g.param(store, self.assertion_emb);
        let ae = g.embedding_lookup(ae_table, &ae_rows)?;
        let features = g.concat(&[x, ce, ae], Axis::Cols)?;
        let (uf, vf) = self.relation.project(g, store, features)?;
        let squares: usize = batch.iter().map(|s| s.tokens.len().pow(2)).sum();
        let mut relation_terms = Vec::new();
        let mut sentences = Vec::with_capacity(batch.len());
        for (k, s) in batch.iter().enumerate() {
            let n = s.tokens.len();
            let u = g.slice(uf, Axis::Rows, offs[k], n)?;
            let v = g.slice(vf, Axis::Rows, offs[k], n)?;
            let scores = self.relation.scores(g, store, u, v)?;
            if let Some(gold) = gold {
                let l = self.relation.loss(g, scores, n, &gold[k].relations)?;
                let w = match self.relation.mode {
                    RelationMode::Softmax => n as f64 / total_tokens as f64,
                    RelationMode::Sigmoid => (n * n) as f64 / squares as f64,
                };
                relation_terms.push((l, w));
            }
            let score_values = g.value(scores).clone();
            let relations = spans_for_relations(&self.relation.decode(&score_values), &fed_spans[k]);
            sentences.push(SentencePrediction {
                tags: predicted_tags[k].clone(),
                concepts: fed_spans[k].clone(),
                assertions: std::mem::take(&mut fed_assertions[k]),
                relations,
                emissions: std::mem::replace(&mut emission_values[k], Tensor::zeros(1, 1)),
                relation_scores: score_values,
            });
        }

        let loss = match gold {
            None => None,
            Some(_) => {
                let concept = weighted_sum(g, &concept_terms)?;
                let assertion = match assertion_loss {
                    Some(l) => l,
                    None => g.input(Tensor::scalar(0.0)),
                };
                let relation = weighted_sum(g, &relation_terms)?;
                let ca = g.add(concept, assertion)?;
                let total = g.add(ca, relation)?;
                Some(JointLossVars {
                    concept,
                    assertion,
                    relation,
                    total,
                })
            }
        };
        Ok(JointOutput { loss, sentences })
    }
}

/// Map token-level relations to spans whose heads they connect, dropping
/// self links and labels that do not fit the span types.
pub(crate) fn spans_for_relations(decoded: &[TokenRelation], spans: &[ConceptSpan]) -> Vec<Relation> {
    let by_head = |h: usize| spans.iter().find(|c| c.head() == h);
    let mut out: Vec<Relation> = decoded
        .iter()
        .filter(|r| r.subject != r.object)
        .filter_map(|r| {
            let subject = *by_head(r.subject)?;
            let object = *by_head(r.object)?;
            r.label.admits(subject.ctype, object.ctype).then_some(Relation {
                subject,
                label: r.label,
                object,
            })
        })
        .collect();
    out.sort();
    out.dedup();
    out
}

/// Predict every document sentence by sentence, in batches of `batch_size`.
/// With a gold `feed`, the documents' own annotations are injected.
pub fn predict_documents(
    model: &JointModel,
    store: &ParamStore,
    docs: &[Document],
    feed: Feed,
    batch_size: usize,
    mut on_sentence: impl FnMut(&Document, usize, &SentencePrediction),
) -> Result<Vec<Document>, ModelError> {
    let mut out = Vec::with_capacity(docs.len());
    for doc in docs {
        let mut pred = doc.unannotated();
        let sents: Vec<usize> = (0..doc.sentences.len()).filter(|&s| !doc.sentences[s].is_empty()).collect();
        for chunk in sents.chunks(batch_size.max(1)) {
            let batch: Vec<SentenceRef> = chunk
                .iter()
                .map(|&s| SentenceRef {
                    doc_id: &doc.id,
                    sent: s,
                    tokens: &doc.sentences[s],
                })
                .collect();
            let gold = if feed.gold_concepts || feed.gold_assertions {
                Some(
                    chunk
                        .iter()
                        .map(|&s| SentenceLabels::from_document(doc, s))
                        .collect::<Result<Vec<_>, _>>()?,
                )
            } else {
                None
            };
            let mut g = Graph::new();
            let output = model.forward(&mut g, store, &batch, gold.as_deref(), feed, false, 0, 0)?;
            for (&s, p) in chunk.iter().zip(&output.sentences) {
                on_sentence(doc, s, p);
                pred.concepts.extend(&p.concepts);
                pred.assertions.extend(&p.assertions);
                pred.relations.extend(&p.relations);
            }
        }
        pred.normalize();
        out.push(pred);
    }
    Ok(out)
}
