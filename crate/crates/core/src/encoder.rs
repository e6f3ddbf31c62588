//! Token encoders: trainable word embeddings with a BiLSTM, precomputed
//! contextual vectors, or precomputed vectors fed through a BiLSTM.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, Read, Write};
use std::path::Path;
use std::rc::Rc;
use std::str::FromStr;

use jmie_autodiff::{Axis, Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EncoderError, ModelError};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EncoderMode {
    TrainableLstm,
    Precomputed,
    PrecomputedLstm,
}

impl EncoderMode {
    pub fn uses_lstm(self) -> bool {
        !matches!(self, EncoderMode::Precomputed)
    }

    pub fn uses_precomputed(self) -> bool {
        !matches!(self, EncoderMode::TrainableLstm)
    }
}

impl fmt::Display for EncoderMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderMode::TrainableLstm => "lstm",
            EncoderMode::Precomputed => "precomputed",
            EncoderMode::PrecomputedLstm => "precomputed+lstm",
        })
    }
}

impl FromStr for EncoderMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lstm" | "trainable_lstm" => Ok(EncoderMode::TrainableLstm),
            "precomputed" => Ok(EncoderMode::Precomputed),
            "precomputed+lstm" => Ok(EncoderMode::PrecomputedLstm),
            other => Err(format!("unknown encoder mode `{other}`")),
        }
    }
}

/// Token to row mapping. Always contains [`UNK`] and [`PAD`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Build from `tokens` (deduplicated, order kept), appending `<unk>` and
    /// `<pad>` when absent.
    pub fn new(tokens: impl IntoIterator<Item = String>) -> Self {
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in tokens.into_iter().chain([UNK.to_string(), PAD.to_string()]) {
            if !v.index.contains_key(&t) {
                v.index.insert(t.clone(), v.tokens.len());
                v.tokens.push(t);
            }
        }
        v
    }

    /// Rebuild from a stored token list; fails unless the list is
    /// duplicate-free and holds both special tokens.
    pub fn from_list(tokens: Vec<String>) -> Option<Self> {
        let index: HashMap<String, usize> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        (index.len() == tokens.len() && index.contains_key(UNK) && index.contains_key(PAD))
            .then_some(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Exact match, then lowercase, then `<unk>`.
    pub fn lookup(&self, token: &str) -> usize {
        self.get(token)
            .or_else(|| self.get(&token.to_lowercase()))
            .unwrap_or_else(|| self.unk())
    }

    pub fn unk(&self) -> usize {
        self.index[UNK]
    }

    pub fn pad(&self) -> usize {
        self.index[PAD]
    }
}

/// Word vectors with their vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub vocab: Vocab,
    pub matrix: Tensor,
}

impl EmbeddingTable {
    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    /// Random rows for `tokens`; `<pad>` is zero.
    pub fn random(tokens: impl IntoIterator<Item = String>, dim: usize, rng: &mut impl Rng) -> Self {
        let vocab = Vocab::new(tokens);
        let mut matrix = Tensor::zeros(vocab.len(), dim);
        let bound = (3.0 / dim as f64).sqrt();
        for v in matrix.data_mut() {
            *v = rng.gen_range(-bound..bound);
        }
        matrix.row_mut(vocab.pad()).fill(0.0);
        EmbeddingTable { vocab, matrix }
    }

    /// Keep only the rows of `tokens` (plus `<unk>` and `<pad>`).
    pub fn restrict<'a>(&self, tokens: impl IntoIterator<Item = &'a str>) -> EmbeddingTable {
        let mut keep: Vec<String> = tokens
            .into_iter()
            .filter_map(|t| self.vocab.get(t).or_else(|| self.vocab.get(&t.to_lowercase())).map(|i| self.vocab.tokens[i].clone()))
            .filter(|t| t != UNK && t != PAD)
            .collect();
        keep.sort();
        keep.dedup();
        let vocab = Vocab::new(keep);
        let mut matrix = Tensor::zeros(vocab.len(), self.dim());
        for (i, t) in vocab.tokens.iter().enumerate() {
            let src = self.vocab.get(t).expect("restricted to known tokens");
            matrix.row_mut(i).copy_from_slice(self.matrix.row(src));
        }
        EmbeddingTable { vocab, matrix }
    }
}

/// Read whitespace-separated `token v1 ... vd` lines. Values are parsed as
/// `f32` and widened. `<unk>` becomes the mean vector and `<pad>` zero.
pub fn read_word_vectors(reader: impl BufRead) -> Result<EmbeddingTable, EncoderError> {
    let mut words = Vec::new();
    let mut rows: Vec<f64> = Vec::new();
    let mut dim = 0;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let mut parts = line.split_whitespace();
        let Some(word) = parts.next() else { continue };
        let values = parts
            .map(|v| {
                v.parse::<f32>().map(f64::from).map_err(|_| EncoderError::BadVectorLine {
                    line: i + 1,
                    reason: format!("`{v}` is not a number"),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        if words.is_empty() {
            if values.is_empty() {
                return Err(EncoderError::BadVectorLine {
                    line: i + 1,
                    reason: "no vector values".into(),
                });
            }
            dim = values.len();
        } else if values.len() != dim {
            return Err(EncoderError::RaggedLine {
                line: i + 1,
                expected: dim,
                found: values.len(),
            });
        }
        words.push(word.to_string());
        rows.extend(values);
    }
    if words.is_empty() {
        return Err(EncoderError::EmptyFile);
    }
    let n = words.len();
    let mut mean = vec![0.0; dim];
    for row in rows.chunks(dim) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let vocab = Vocab::new(words.iter().cloned());
    let mut matrix = Tensor::zeros(vocab.len(), dim);
    let mut placed = vec![false; vocab.len()];
    // duplicate words keep their first vector
    for (word, row) in words.iter().zip(rows.chunks(dim)) {
        let i = vocab.get(word).expect("word is in vocab");
        if !placed[i] {
            matrix.row_mut(i).copy_from_slice(row);
            placed[i] = true;
        }
    }
    if !placed[vocab.unk()] {
        matrix.row_mut(vocab.unk()).copy_from_slice(&mean);
    }
    if !placed[vocab.pad()] {
        matrix.row_mut(vocab.pad()).fill(0.0);
    }
    Ok(EmbeddingTable { vocab, matrix })
}

pub fn load_word_vectors(path: &Path) -> Result<EmbeddingTable, EncoderError> {
    let file = std::fs::File::open(path)?;
    read_word_vectors(std::io::BufReader::new(file))
}

/// Weights of one LSTM direction; gate blocks ordered input, forget, cell,
/// output.
#[derive(Clone, Copy, Debug)]
pub struct LstmDirection {
    pub input_weights: ParamId,
    pub hidden_weights: ParamId,
    pub bias: ParamId,
}

/// Bidirectional LSTM; output rows are `[forward ; backward]`, width `2h`.
#[derive(Clone, Copy, Debug)]
pub struct BiLstm {
    pub input_dim: usize,
    pub hidden: usize,
    pub forward: LstmDirection,
    pub backward: LstmDirection,
}

impl BiLstm {
    pub fn new(store: &mut ParamStore, prefix: &str, input_dim: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self, ModelError> {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut uniform = |r: usize, c: usize| {
            Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-bound..bound)).collect())
        };
        let mut direction = |name: &str| -> Result<LstmDirection, ModelError> {
            Ok(LstmDirection {
                input_weights: store.add(format!("{prefix}.{name}.w_input"), uniform(input_dim, 4 * hidden)?)?,
                hidden_weights: store.add(format!("{prefix}.{name}.w_hidden"), uniform(hidden, 4 * hidden)?)?,
                bias: store.add(format!("{prefix}.{name}.bias"), uniform(1, 4 * hidden)?)?,
            })
        };
        let forward = direction("fwd")?;
        let backward = direction("bwd")?;
        Ok(BiLstm {
            input_dim,
            hidden,
            forward,
            backward,
        })
    }

    pub fn output_dim(&self) -> usize {
        2 * self.hidden
    }

    /// Run over a packed batch: `inputs` stacks the sentences' rows
    /// (`sum(lengths) x input_dim`). Shorter sentences are padded inside the
    /// recurrence; padded steps never reach a real token's state.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, inputs: Var, lengths: &[usize]) -> Result<Var, ModelError> {
        let total: usize = lengths.iter().sum();
        let (rows, cols) = (g.shape(inputs)[0], g.shape(inputs)[1]);
        if rows != total || cols != self.input_dim {
            return Err(ModelError::Encoder(EncoderError::DimensionMismatch {
                expected: self.input_dim,
                found: cols,
            }));
        }
        let offsets: Vec<usize> = lengths
            .iter()
            .scan(0, |acc, &n| {
                let o = *acc;
                *acc += n;
                Some(o)
            })
            .collect();
        let fwd = self.direction(g, store, &self.forward, inputs, lengths, &offsets, false)?;
        let bwd = self.direction(g, store, &self.backward, inputs, lengths, &offsets, true)?;
        Ok(g.concat(&[fwd, bwd], Axis::Cols)?)
    }

    #[allow(clippy::too_many_arguments)]
    fn direction(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        params: &LstmDirection,
        inputs: Var,
        lengths: &[usize],
        offsets: &[usize],
        reverse: bool,
    ) -> Result<Var, ModelError> {
        let h = self.hidden;
        let batch = lengths.len();
        let max_len = lengths.iter().copied().max().unwrap_or(0);
        let min_len = lengths.iter().copied().min().unwrap_or(0);
        let wx = g.param(store, params.input_weights);
        let wh = g.param(store, params.hidden_weights);
        let b = g.param(store, params.bias);
        let projected = g.matmul(inputs, wx)?;
        let projected = g.add_row(projected, b)?;

        let mut states: Vec<Option<Var>> = vec![None; max_len];
        let mut prev: Option<(Var, Var)> = None;
        let steps: Vec<usize> = if reverse { (0..max_len).rev().collect() } else { (0..max_len).collect() };
        for t in steps {
            let rows: Vec<usize> = (0..batch)
                .map(|k| offsets[k] + if t < lengths[k] { t } else { 0 })
                .collect();
            let mut z = g.embedding_lookup(projected, &rows)?;
            if let Some((h_prev, _)) = prev {
                let rec = g.matmul(h_prev, wh)?;
                z = g.add(z, rec)?;
            }
            let i = g.slice(z, Axis::Cols, 0, h)?;
            let i = g.sigmoid(i)?;
            let f = g.slice(z, Axis::Cols, h, h)?;
            let f = g.sigmoid(f)?;
            let cand = g.slice(z, Axis::Cols, 2 * h, h)?;
            let cand = g.tanh(cand)?;
            let o = g.slice(z, Axis::Cols, 3 * h, h)?;
            let o = g.sigmoid(o)?;
            let mut c = g.mul(i, cand)?;
            if let Some((_, c_prev)) = prev {
                let keep = g.mul(f, c_prev)?;
                c = g.add(keep, c)?;
            }
            let tc = g.tanh(c)?;
            let mut hv = g.mul(o, tc)?;
            // In reverse, steps past a sentence's end come first and must
            // leave its state at zero.
            if reverse && t >= min_len {
                let mask: Vec<f64> = (0..batch)
                    .flat_map(|k| std::iter::repeat_n(if t < lengths[k] { 1.0 } else { 0.0 }, h))
                    .collect();
                let m = g.input(Tensor::matrix(batch, h, mask.clone())?);
                let inv = g.input(Tensor::matrix(batch, h, mask.iter().map(|v| 1.0 - v).collect())?);
                hv = g.mul(hv, m)?;
                c = g.mul(c, m)?;
                if let Some((h_prev, c_prev)) = prev {
                    let hk = g.mul(h_prev, inv)?;
                    hv = g.add(hv, hk)?;
                    let ck = g.mul(c_prev, inv)?;
                    c = g.add(c, ck)?;
                }
            }
            states[t] = Some(hv);
            prev = Some((hv, c));
        }
        let stacked: Vec<Var> = states.into_iter().map(|s| s.expect("every step ran")).collect();
        let all = g.concat(&stacked, Axis::Rows)?;
        let order: Vec<usize> = (0..batch)
            .flat_map(|k| (0..lengths[k]).map(move |t| t * batch + k))
            .collect();
        Ok(g.embedding_lookup(all, &order)?)
    }
}

/// Per-sentence contextual vectors keyed by document id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PrecomputedEmbeddings {
    pub dim: usize,
    /// `None` for zero-token sentences.
    pub docs: BTreeMap<String, Vec<Option<Tensor>>>,
}

pub const JEMB_MAGIC: &[u8; 5] = b"JEMB1";
pub const JEMB_VERSION: u32 = 1;

fn read_u32(r: &mut impl Read) -> Result<u32, EncoderError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| EncoderError::Format(format!("truncated: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

impl PrecomputedEmbeddings {
    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    /// Parse a `JEMB1` stream: magic, version `u32`, dim `u32`, document
    /// count `u32`; per document a `u16`-prefixed UTF-8 id and sentence
    /// count `u32`; per sentence a token count `u32` and `n x dim` `f32`
    /// values, all little-endian.
    pub fn read(mut r: impl Read) -> Result<Self, EncoderError> {
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic).map_err(|_| EncoderError::BadMagic)?;
        if &magic != JEMB_MAGIC {
            return Err(EncoderError::BadMagic);
        }
        let version = read_u32(&mut r)?;
        if version != JEMB_VERSION {
            return Err(EncoderError::Format(format!("unsupported version {version}")));
        }
        let dim = read_u32(&mut r)? as usize;
        let n_docs = read_u32(&mut r)?;
        let mut docs = BTreeMap::new();
        for _ in 0..n_docs {
            let mut len = [0u8; 2];
            r.read_exact(&mut len).map_err(|e| EncoderError::Format(format!("truncated: {e}")))?;
            let mut id = vec![0u8; u16::from_le_bytes(len) as usize];
            r.read_exact(&mut id).map_err(|e| EncoderError::Format(format!("truncated: {e}")))?;
            let id = String::from_utf8(id).map_err(|_| EncoderError::Format("document id is not UTF-8".into()))?;
            let n_sent = read_u32(&mut r)?;
            let mut sentences = Vec::with_capacity(n_sent as usize);
            for _ in 0..n_sent {
                let n = read_u32(&mut r)? as usize;
                let mut raw = vec![0u8; n * dim * 4];
                r.read_exact(&mut raw).map_err(|e| EncoderError::Format(format!("truncated: {e}")))?;
                if n == 0 || dim == 0 {
                    sentences.push(None);
                    continue;
                }
                let data = raw
                    .chunks_exact(4)
                    .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                    .collect();
                sentences.push(Some(Tensor::matrix(n, dim, data).map_err(|e| EncoderError::Format(e.to_string()))?));
            }
            if docs.insert(id.clone(), sentences).is_some() {
                return Err(EncoderError::Format(format!("document `{id}` appears twice")));
            }
        }
        Ok(PrecomputedEmbeddings { dim, docs })
    }

    pub fn write(&self, mut w: impl Write) -> Result<(), EncoderError> {
        w.write_all(JEMB_MAGIC)?;
        w.write_all(&JEMB_VERSION.to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.docs.len() as u32).to_le_bytes())?;
        for (id, sentences) in &self.docs {
            let len = u16::try_from(id.len()).map_err(|_| EncoderError::Format(format!("id too long: {id}")))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(id.as_bytes())?;
            w.write_all(&(sentences.len() as u32).to_le_bytes())?;
            for s in sentences {
                match s {
                    None => w.write_all(&0u32.to_le_bytes())?,
                    Some(t) => {
                        if t.cols() != self.dim {
                            return Err(EncoderError::DimensionMismatch {
                                expected: self.dim,
                                found: t.cols(),
                            });
                        }
                        w.write_all(&(t.rows() as u32).to_le_bytes())?;
                        for &v in t.data() {
                            w.write_all(&(v as f32).to_le_bytes())?;
                        }
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EncoderError> {
        let file = std::fs::File::open(path)?;
        Self::read(std::io::BufReader::new(file))
    }

    /// The matrix for one sentence, checked against its token count.
    pub fn sentence(&self, doc: &str, sent: usize, n_tokens: usize) -> Result<&Tensor, EncoderError> {
        let entry = self
            .docs
            .get(doc)
            .and_then(|s| s.get(sent))
            .ok_or_else(|| EncoderError::MissingEmbeddingEntry {
                doc: doc.to_string(),
                sent,
            })?;
        let found = entry.as_ref().map_or(0, Tensor::rows);
        match entry {
            Some(t) if found == n_tokens => Ok(t),
            _ => Err(EncoderError::TokenCountMismatch {
                doc: doc.to_string(),
                sent,
                expected: n_tokens,
                found,
            }),
        }
    }

    /// Check every sentence of `docs` has a matrix with matching row count.
    pub fn check_against(&self, docs: &[crate::corpus::Document]) -> Result<(), EncoderError> {
        for d in docs {
            let entry = self.docs.get(&d.id).ok_or_else(|| EncoderError::MissingEmbeddingEntry {
                doc: d.id.clone(),
                sent: 0,
            })?;
            if entry.len() != d.sentences.len() {
                return Err(EncoderError::TokenCountMismatch {
                    doc: d.id.clone(),
                    sent: entry.len().min(d.sentences.len()),
                    expected: d.sentences.len(),
                    found: entry.len(),
                });
            }
            for (i, s) in d.sentences.iter().enumerate() {
                if !s.is_empty() {
                    self.sentence(&d.id, i, s.len())?;
                } else if entry[i].is_some() {
                    return Err(EncoderError::TokenCountMismatch {
                        doc: d.id.clone(),
                        sent: i,
                        expected: 0,
                        found: entry[i].as_ref().map_or(0, Tensor::rows),
                    });
                }
            }
        }
        Ok(())
    }
}

/// One sentence to encode.
#[derive(Clone, Copy, Debug)]
pub struct SentenceRef<'a> {
    pub doc_id: &'a str,
    pub sent: usize,
    pub tokens: &'a [String],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub mode: EncoderMode,
    pub word_dim: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub freeze_embeddings: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            mode: EncoderMode::TrainableLstm,
            word_dim: 300,
            hidden: 100,
            dropout: 0.1,
            freeze_embeddings: false,
        }
    }
}

/// Produces the token representation matrix for a batch of sentences.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub vocab: Option<Vocab>,
    pub table: Option<ParamId>,
    pub lstm: Option<BiLstm>,
    pub precomputed: Option<Rc<PrecomputedEmbeddings>>,
}

impl Encoder {
    /// Register parameters. `words` seeds the table in trainable mode and is
    /// ignored otherwise; precomputed modes need `precomputed`.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        config: EncoderConfig,
        words: Option<EmbeddingTable>,
        precomputed: Option<Rc<PrecomputedEmbeddings>>,
        rng: &mut impl Rng,
    ) -> Result<Self, ModelError> {
        let (vocab, table, input_dim) = match config.mode {
            EncoderMode::TrainableLstm => {
                let table = words.ok_or_else(|| ModelError::Format("trainable encoder needs a word table".into()))?;
                let id = store.add(format!("{prefix}.embedding"), table.matrix.clone())?;
                let pad = table.vocab.pad();
                if config.freeze_embeddings {
                    store.freeze_rows(id, (0..table.vocab.len()).collect());
                } else {
                    store.freeze_rows(id, vec![pad]);
                }
                let dim = table.dim();
                (Some(table.vocab), Some(id), dim)
            }
            _ => {
                let p = precomputed
                    .as_ref()
                    .ok_or_else(|| ModelError::Format("precomputed encoder needs an embedding file".into()))?;
                (None, None, p.dim)
            }
        };
        let lstm = if config.mode.uses_lstm() {
            Some(BiLstm::new(store, &format!("{prefix}.lstm"), input_dim, config.hidden, rng)?)
        } else {
            None
        };
        Ok(Encoder {
            config,
            vocab,
            table,
            lstm,
            precomputed,
        })
    }

    pub fn output_dim(&self) -> usize {
        match (&self.lstm, &self.precomputed) {
            (Some(l), _) => l.output_dim(),
            (None, Some(p)) => p.dim,
            (None, None) => 0,
        }
    }

    /// Packed `sum(n_i) x D` representation of the batch, sentences stacked
    /// in order. Dropout applies when `train` is set.
    pub fn encode_batch(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &[SentenceRef],
        train: bool,
        seed: u64,
        step: u64,
    ) -> Result<Var, ModelError> {
        let lengths: Vec<usize> = batch.iter().map(|s| s.tokens.len()).collect();
        if lengths.contains(&0) {
            return Err(ModelError::LengthMismatch { tags: 0, rows: 0 });
        }
        let inputs = match self.config.mode {
            EncoderMode::TrainableLstm => {
                let vocab = self.vocab.as_ref().expect("trainable mode has a vocab");
                let ids: Vec<usize> = batch.iter().flat_map(|s| s.tokens.iter().map(|t| vocab.lookup(t))).collect();
                let table = g.param(store, self.table.expect("trainable mode has a table"));
                g.embedding_lookup(table, &ids)?
            }
            _ => {
                let p = self.precomputed.as_ref().expect("precomputed mode has vectors");
                let mut data = Vec::with_capacity(lengths.iter().sum::<usize>() * p.dim);
                for s in batch {
                    data.extend_from_slice(p.sentence(s.doc_id, s.sent, s.tokens.len())?.data());
                }
                g.input(Tensor::matrix(lengths.iter().sum(), p.dim, data)?)
            }
        };
        let out = match &self.lstm {
            Some(lstm) => lstm.forward(g, store, inputs, &lengths)?,
            None => inputs,
        };
        Ok(g.dropout(out, self.config.dropout, train, seed, step)?)
    }
}
