//! Independent three-model baseline: a concept tagger, a span assertion
//! classifier and a concept-pair relation classifier, each with its own
//! encoder and parameters.

use std::rc::Rc;

use jmie_autodiff::{Axis, Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;

use crate::corpus::{
    bio_to_spans, Assertion, AssertionType, ConceptSpan, ConceptType, Document, Relation, RelationType, TagSequence,
};
use crate::decoders::{
    argmax, new_encoder, nll, offsets, weighted_sum, xavier, BioConstraint, ConceptTagger, CrfScores, JointConfig,
    WordInit, NOLINK, NO_ASSERTION, NUM_ASSERTIONS, NUM_RELATION_LABELS,
};
use crate::encoder::{Encoder, PrecomputedEmbeddings, SentenceRef};
use crate::error::ModelError;

pub const FF_HIDDEN: usize = 128;

/// Which stage inputs come from the reference annotations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GoldInjection {
    #[default]
    None,
    /// Gold concepts feed the assertion and relation stages.
    Concept,
    /// Gold concepts and assertions feed the relation stage.
    Assertion,
}

impl std::str::FromStr for GoldInjection {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(GoldInjection::None),
            "concept" => Ok(GoldInjection::Concept),
            "assertion" => Ok(GoldInjection::Assertion),
            other => Err(format!("unknown gold injection `{other}`")),
        }
    }
}

impl ConceptTagger {
    /// Summed CRF negative log-likelihood divided by the batch token count.
    #[allow(clippy::too_many_arguments)]
    pub fn loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &[SentenceRef],
        tags: &[Vec<usize>],
        train: bool,
        seed: u64,
        step: u64,
    ) -> Result<Var, ModelError> {
        let x = self.encoder.encode_batch(g, store, batch, train, seed, step)?;
        let em = self.crf.emissions(g, store, x)?;
        let vars = self.crf.vars(g, store);
        let offs = offsets(batch);
        let total: usize = batch.iter().map(|s| s.tokens.len()).sum();
        let mut terms = Vec::with_capacity(batch.len());
        for (k, s) in batch.iter().enumerate() {
            let e = g.slice(em, Axis::Rows, offs[k], s.tokens.len())?;
            terms.push((nll(g, e, &vars, &tags[k])?, 1.0 / total as f64));
        }
        weighted_sum(g, &terms)
    }

    /// Decoded concept spans per sentence.
    pub fn predict(
        &self,
        store: &ParamStore,
        batch: &[SentenceRef],
        constrain: bool,
    ) -> Result<Vec<Vec<ConceptSpan>>, ModelError> {
        Ok(self
            .decode(store, batch, constrain)?
            .iter()
            .zip(batch)
            .map(|(t, s)| bio_to_spans(t, s.sent))
            .collect())
    }

    /// Viterbi tags per sentence.
    pub fn decode(
        &self,
        store: &ParamStore,
        batch: &[SentenceRef],
        constrain: bool,
    ) -> Result<Vec<TagSequence>, ModelError> {
        let mut g = Graph::new();
        let x = self.encoder.encode_batch(&mut g, store, batch, false, 0, 0)?;
        let em = self.crf.emissions(&mut g, store, x)?;
        let scores = CrfScores::from_store(&self.crf, store);
        let constraint = constrain.then(BioConstraint::new);
        let offs = offsets(batch);
        Ok(batch
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let mut e = Tensor::zeros(s.tokens.len(), scores.start.len());
                for r in 0..s.tokens.len() {
                    e.row_mut(r).copy_from_slice(g.value(em).row(offs[k] + r));
                }
                let tags = scores.viterbi(&e, constraint.as_ref()).0;
                TagSequence::from_indices(&tags).expect("valid tag indices")
            })
            .collect())
    }
}

/// One hidden tanh layer then a linear output.
#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        output: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, ModelError> {
        Ok(FeedForward {
            w1: store.add(format!("{prefix}.w1"), xavier(rng, input, FF_HIDDEN))?,
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(1, FF_HIDDEN))?,
            w2: store.add(format!("{prefix}.w2"), xavier(rng, FF_HIDDEN, output))?,
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(1, output))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, ModelError> {
        let (w1, b1, w2, b2) = (
            g.param(store, self.w1),
            g.param(store, self.b1),
            g.param(store, self.w2),
            g.param(store, self.b2),
        );
        let h = g.matmul(x, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.tanh(h)?;
        let o = g.matmul(h, w2)?;
        Ok(g.add_row(o, b2)?)
    }
}

/// Element sums of token rows over each span: a `spans x tokens` 0/1
/// selection matrix times the packed encoding.
pub fn span_sums(g: &mut Graph, x: Var, spans: &[(usize, ConceptSpan)], offs: &[usize]) -> Result<Var, ModelError> {
    let n = g.shape(x)[0];
    let mut sel = Tensor::zeros(spans.len(), n);
    for (r, (k, c)) in spans.iter().enumerate() {
        for t in c.start..=c.end {
            sel.set(r, offs[*k] + t, 1.0);
        }
    }
    let s = g.input(sel);
    Ok(g.matmul(s, x)?)
}

/// Assertion classifier over `[span sum ; type embedding]`.
#[derive(Clone, Debug)]
pub struct SpanAssertionModel {
    pub encoder: Encoder,
    pub type_emb: ParamId,
    pub classifier: FeedForward,
}

impl SpanAssertionModel {
    pub fn new(
        store: &mut ParamStore,
        config: &JointConfig,
        words: WordInit,
        precomputed: Option<Rc<PrecomputedEmbeddings>>,
        rng: &mut impl Rng,
    ) -> Result<Self, ModelError> {
        let encoder = new_encoder(store, "assertion.encoder", &config.encoder, words, precomputed, rng)?;
        let type_emb = store.add("assertion.type_emb", xavier(rng, 3, config.concept_dim))?;
        let classifier = FeedForward::new(
            store,
            "assertion.ff",
            encoder.output_dim() + config.concept_dim,
            NUM_ASSERTIONS,
            rng,
        )?;
        Ok(SpanAssertionModel {
            encoder,
            type_emb,
            classifier,
        })
    }

    /// Logits per `(sentence index, problem span)`.
    #[allow(clippy::too_many_arguments)]
    pub fn logits(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &[SentenceRef],
        spans: &[(usize, ConceptSpan)],
        train: bool,
        seed: u64,
        step: u64,
    ) -> Result<Var, ModelError> {
        let x = self.encoder.encode_batch(g, store, batch, train, seed, step)?;
        let sums = span_sums(g, x, spans, &offsets(batch))?;
        let table = g.param(store, self.type_emb);
        let types: Vec<usize> = spans.iter().map(|(_, c)| c.ctype.index()).collect();
        let te = g.embedding_lookup(table, &types)?;
        let input = g.concat(&[sums, te], Axis::Cols)?;
        self.classifier.forward(g, store, input)
    }
}

impl SpanAssertionModel {
    /// Argmax assertion for every problem span of `concepts`.
    pub fn predict(
        &self,
        store: &ParamStore,
        batch: &[SentenceRef],
        concepts: &[Vec<ConceptSpan>],
    ) -> Result<Vec<Vec<Assertion>>, ModelError> {
        let problems: Vec<(usize, ConceptSpan)> = concepts
            .iter()
            .enumerate()
            .flat_map(|(k, cs)| cs.iter().filter(|c| c.ctype == ConceptType::Problem).map(move |c| (k, *c)))
            .collect();
        let mut out = vec![Vec::new(); batch.len()];
        if problems.is_empty() {
            return Ok(out);
        }
        let mut g = Graph::new();
        let logits = self.logits(&mut g, store, batch, &problems, false, 0, 0)?;
        for (r, (k, c)) in problems.iter().enumerate() {
            let label = AssertionType::from_index(argmax(g.value(logits).row(r))).expect("six labels");
            out[*k].push(Assertion { concept: *c, label });
        }
        Ok(out)
    }
}

/// Ordered-pair relation classifier over both spans' sums, types and
/// assertions, with a `nolink` class.
#[derive(Clone, Debug)]
pub struct PairRelationModel {
    pub encoder: Encoder,
    pub type_emb: ParamId,
    pub assertion_emb: ParamId,
    pub classifier: FeedForward,
}

/// A candidate pair: sentence index in the batch, subject and object span
/// with their assertion row (`NO_ASSERTION` for non-problems).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairCandidate {
    pub sentence: usize,
    pub subject: ConceptSpan,
    pub object: ConceptSpan,
    pub subject_assertion: usize,
    pub object_assertion: usize,
}

impl PairRelationModel {
    pub fn new(
        store: &mut ParamStore,
        config: &JointConfig,
        words: WordInit,
        precomputed: Option<Rc<PrecomputedEmbeddings>>,
        rng: &mut impl Rng,
    ) -> Result<Self, ModelError> {
        let encoder = new_encoder(store, "relation.encoder", &config.encoder, words, precomputed, rng)?;
        let type_emb = store.add("relation.type_emb", xavier(rng, 3, config.concept_dim))?;
        let assertion_emb = store.add("relation.assertion_emb", xavier(rng, NUM_ASSERTIONS + 1, config.assertion_dim))?;
        let width = 2 * (encoder.output_dim() + config.concept_dim + config.assertion_dim);
        let classifier = FeedForward::new(store, "relation.ff", width, NUM_RELATION_LABELS, rng)?;
        Ok(PairRelationModel {
            encoder,
            type_emb,
            assertion_emb,
            classifier,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn logits(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &[SentenceRef],
        pairs: &[PairCandidate],
        train: bool,
        seed: u64,
        step: u64,
    ) -> Result<Var, ModelError> {
        let x = self.encoder.encode_batch(g, store, batch, train, seed, step)?;
        let offs = offsets(batch);
        let side = |g: &mut Graph, pick: fn(&PairCandidate) -> (ConceptSpan, usize)| -> Result<Var, ModelError> {
            let spans: Vec<(usize, ConceptSpan)> = pairs.iter().map(|p| (p.sentence, pick(p).0)).collect();
            let sums = span_sums(g, x, &spans, &offs)?;
            let tt = g.param(store, self.type_emb);
            let types: Vec<usize> = pairs.iter().map(|p| pick(p).0.ctype.index()).collect();
            let te = g.embedding_lookup(tt, &types)?;
            let at = g.param(store, self.assertion_emb);
            let labels: Vec<usize> = pairs.iter().map(|p| pick(p).1).collect();
            let ae = g.embedding_lookup(at, &labels)?;
            Ok(g.concat(&[sums, te, ae], Axis::Cols)?)
        };
        let subj = side(g, |p| (p.subject, p.subject_assertion))?;
        let obj = side(g, |p| (p.object, p.object_assertion))?;
        let input = g.concat(&[subj, obj], Axis::Cols)?;
        self.classifier.forward(g, store, input)
    }
}

impl PairRelationModel {
    /// Classify every ordered concept pair; `nolink` and labels that do not
    /// fit the pair's types produce nothing.
    pub fn predict(
        &self,
        store: &ParamStore,
        batch: &[SentenceRef],
        concepts: &[Vec<ConceptSpan>],
        assertions: &[Vec<Assertion>],
    ) -> Result<Vec<Vec<Relation>>, ModelError> {
        let pairs = pair_candidates(concepts, assertions);
        let mut out = vec![Vec::new(); batch.len()];
        if pairs.is_empty() {
            return Ok(out);
        }
        let mut g = Graph::new();
        let logits = self.logits(&mut g, store, batch, &pairs, false, 0, 0)?;
        for (r, p) in pairs.iter().enumerate() {
            let k = argmax(g.value(logits).row(r));
            if k == NOLINK {
                continue;
            }
            let label = RelationType::from_index(k).expect("label below nolink");
            if label.admits(p.subject.ctype, p.object.ctype) {
                out[p.sentence].push(Relation {
                    subject: p.subject,
                    label,
                    object: p.object,
                });
            }
        }
        Ok(out)
    }
}

/// All ordered pairs of distinct concepts within each sentence.
pub fn pair_candidates(concepts: &[Vec<ConceptSpan>], assertions: &[Vec<Assertion>]) -> Vec<PairCandidate> {
    let mut out = Vec::new();
    for (k, spans) in concepts.iter().enumerate() {
        let label = |c: &ConceptSpan| {
            assertions[k]
                .iter()
                .find(|a| a.concept == *c)
                .map_or(NO_ASSERTION, |a| a.label.index())
        };
        for a in spans {
            for b in spans {
                if a != b {
                    out.push(PairCandidate {
                        sentence: k,
                        subject: *a,
                        object: *b,
                        subject_assertion: label(a),
                        object_assertion: label(b),
                    });
                }
            }
        }
    }
    out
}

/// The three independently trained models, each with its own store.
#[derive(Clone, Debug)]
pub struct PipelineModels {
    pub config: JointConfig,
    pub concept: ConceptTagger,
    pub concept_store: ParamStore,
    pub assertion: SpanAssertionModel,
    pub assertion_store: ParamStore,
    pub relation: PairRelationModel,
    pub relation_store: ParamStore,
}

impl PipelineModels {
    /// `concept_rng` should be seeded like the joint model's RNG so both
    /// concept taggers start identical.
    pub fn new(
        config: JointConfig,
        words: WordInit,
        precomputed: Option<Rc<PrecomputedEmbeddings>>,
        concept_rng: &mut impl Rng,
        assertion_rng: &mut impl Rng,
        relation_rng: &mut impl Rng,
    ) -> Result<Self, ModelError> {
        let mut concept_store = ParamStore::new();
        let concept = ConceptTagger::new(
            &mut concept_store,
            "concept",
            &config.encoder,
            words.clone(),
            precomputed.clone(),
            concept_rng,
        )?;
        let mut assertion_store = ParamStore::new();
        let assertion =
            SpanAssertionModel::new(&mut assertion_store, &config, words.clone(), precomputed.clone(), assertion_rng)?;
        let mut relation_store = ParamStore::new();
        let relation = PairRelationModel::new(&mut relation_store, &config, words, precomputed, relation_rng)?;
        Ok(PipelineModels {
            config,
            concept,
            concept_store,
            assertion,
            assertion_store,
            relation,
            relation_store,
        })
    }

    /// Predict one batch of sentences. `gold` supplies the reference
    /// annotations for injection and may be empty when `inject` is `None`.
    pub fn predict_batch(
        &self,
        batch: &[SentenceRef],
        gold: &[(Vec<ConceptSpan>, Vec<Assertion>)],
        inject: GoldInjection,
    ) -> Result<Vec<(Vec<ConceptSpan>, Vec<Assertion>, Vec<Relation>)>, ModelError> {
        let concepts: Vec<Vec<ConceptSpan>> = if inject == GoldInjection::None {
            self.concept.predict(&self.concept_store, batch, self.config.constrain_bio)?
        } else {
            gold.iter().map(|(c, _)| c.clone()).collect()
        };
        let assertions = if inject == GoldInjection::Assertion {
            gold.iter().map(|(_, a)| a.clone()).collect()
        } else {
            self.assertion.predict(&self.assertion_store, batch, &concepts)?
        };
        let relations = self.relation.predict(&self.relation_store, batch, &concepts, &assertions)?;
        Ok(concepts
            .into_iter()
            .zip(assertions)
            .zip(relations)
            .map(|((c, a), r)| (c, a, r))
            .collect())
    }

    pub fn predict(&self, docs: &[Document], inject: GoldInjection, batch_size: usize) -> Result<Vec<Document>, ModelError> {
        map_documents(docs, batch_size, |batch, gold| self.predict_batch(batch, gold, inject))
    }
}

/// Run `f` over batches of each document's non-empty sentences and collect
/// its per-sentence annotations into unannotated copies of `docs`. `f` also
/// receives each sentence's reference concepts and assertions.
#[allow(clippy::type_complexity)]
pub fn map_documents(
    docs: &[Document],
    batch_size: usize,
    mut f: impl FnMut(
        &[SentenceRef],
        &[(Vec<ConceptSpan>, Vec<Assertion>)],
    ) -> Result<Vec<(Vec<ConceptSpan>, Vec<Assertion>, Vec<Relation>)>, ModelError>,
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
            let gold: Vec<(Vec<ConceptSpan>, Vec<Assertion>)> = chunk
                .iter()
                .map(|&s| {
                    (
                        doc.concepts_in(s).copied().collect(),
                        doc.assertions.iter().filter(|a| a.concept.sent == s).copied().collect(),
                    )
                })
                .collect();
            for (c, a, r) in f(&batch, &gold)? {
                pred.concepts.extend(c);
                pred.assertions.extend(a);
                pred.relations.extend(r);
            }
        }
        pred.normalize();
        pred.relations.dedup();
        out.push(pred);
    }
    Ok(out)
}
