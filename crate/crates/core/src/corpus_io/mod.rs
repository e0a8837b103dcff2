//! Interchange formats: corpora, attention runs, saccade bundles, model
//! metrics and report tables.
//!
//! An attention run is a directory holding `manifest.json` plus one binary
//! `<sentence_id>.attn` file per sentence. The binary layout is
//!
//! ```text
//! b"ATTN" | u32 version = 1 | u32 layers | u32 heads | u32 n_tok | u32 n_tok | f32 payload
//! ```
//!
//! all little-endian, payload row-major in `[layer][head][from][to]` order.

mod attention;
mod ids;
mod metrics;
mod report;
mod saccade;
mod validate;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::num::Real;

pub use attention::{load_attention, read_tensor_file, write_attention, write_tensor_file, ATTN_MAGIC, ATTN_VERSION};
pub use ids::SentenceId;
pub use metrics::{load_metrics, write_metrics, MetricsSidecar, ModelMetrics};
pub use report::{read_report, write_report, Cell, ReportFormat, ReportTable};
pub use saccade::{load_saccade, saccades_from_transitions, write_saccade};
pub use validate::{validate_run, Finding, Severity, ValidationReport};

/// Instruction prefix asking for a German translation.
pub const TRANSLATE_PREFIX: &str = "Please translate this sentence into German:";
/// Instruction prefix asking for a paraphrase.
pub const PARAPHRASE_PREFIX: &str = "Please paraphrase this sentence:";
/// Control prefix of five unrelated English words.
pub const NOISE_PREFIX: &str = "Cigarette first steel convenience champion.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub name: String,
    /// Nominal parameter count, e.g. `7e9`.
    pub param_count: f64,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Per-token negative log-likelihood in nats.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ntp_loss: Option<f64>,
}

impl ModelMeta {
    pub(crate) fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.name.is_empty() {
            out.push("model name is empty".to_string());
        }
        if !(self.param_count.is_finite() && self.param_count > 0.0) {
            out.push(format!("param_count must be positive, got {}", self.param_count));
        }
        if self.n_layers == 0 {
            out.push("n_layers must be at least 1".to_string());
        }
        if self.n_heads == 0 {
            out.push("n_heads must be at least 1".to_string());
        }
        if let Some(loss) = self.ntp_loss {
            if !(loss.is_finite() && loss >= 0.0) {
                out.push(format!("ntp_loss must be non-negative, got {loss}"));
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentenceRecord {
    pub sentence_id: SentenceId,
    pub words: Vec<String>,
    pub n_words: usize,
}

impl SentenceRecord {
    pub fn new(sentence_id: SentenceId, words: Vec<String>) -> Self {
        let n_words = words.len();
        Self { sentence_id, words, n_words }
    }

    /// Length of this sentence's lower triangle, diagonal included.
    pub fn lower_tri_len(&self) -> usize {
        self.n_words * (self.n_words + 1) / 2
    }
}

/// Sentences in ascending [`SentenceId`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    records: Vec<SentenceRecord>,
}

impl Corpus {
    pub fn new(mut records: Vec<SentenceRecord>) -> Result<Self> {
        records.sort_by(|a, b| a.sentence_id.cmp(&b.sentence_id));
        for w in records.windows(2) {
            if w[0].sentence_id == w[1].sentence_id {
                return Err(Error::Invalid(format!("duplicate sentence_id {}", w[0].sentence_id)));
            }
        }
        for r in &records {
            if r.n_words == 0 || r.n_words != r.words.len() {
                return Err(Error::Invalid(format!(
                    "sentence {} declares n_words={} but has {} words",
                    r.sentence_id,
                    r.n_words,
                    r.words.len()
                )));
            }
        }
        Ok(Self { records })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let records: Vec<SentenceRecord> =
            serde_json::from_str(&text).map_err(|e| Error::Json { path: path.into(), source: e })?;
        Corpus::new(records).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(&self.records).expect("corpus serializes");
        bytes.push(b'\n');
        write_atomic(path.as_ref(), &bytes)
    }

    pub fn records(&self) -> &[SentenceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &SentenceId) -> Option<&SentenceRecord> {
        self.records
            .binary_search_by(|r| r.sentence_id.cmp(id))
            .ok()
            .map(|i| &self.records[i])
    }

    /// Total length of the concatenated lower-triangle vectors.
    pub fn lower_tri_len(&self) -> usize {
        self.records.iter().map(SentenceRecord::lower_tri_len).sum()
    }
}

/// Input condition of an attention run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Condition {
    Plain,
    InstructionPrefixed { prefix: String },
    NoisePrefixed { prefix: String },
}

impl Condition {
    pub fn prefix(&self) -> Option<&str> {
        match self {
            Condition::Plain => None,
            Condition::InstructionPrefixed { prefix } | Condition::NoisePrefixed { prefix } => Some(prefix),
        }
    }

    pub fn is_prefixed(&self) -> bool {
        !matches!(self, Condition::Plain)
    }

    /// Short label used in report tables.
    pub fn label(&self) -> &'static str {
        match self {
            Condition::Plain => "plain",
            Condition::InstructionPrefixed { .. } => "instruction_prefixed",
            Condition::NoisePrefixed { .. } => "noise_prefixed",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanRole {
    Bos,
    Prefix,
    Sentence,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSlot {
    /// Word the token belongs to; `-1` for the BOS token. Prefix tokens index
    /// the words of the prefix, sentence tokens the words of the sentence.
    pub word: i64,
    pub role: SpanRole,
}

impl TokenSlot {
    pub const BOS: TokenSlot = TokenSlot { word: -1, role: SpanRole::Bos };

    pub fn sentence(word: usize) -> Self {
        TokenSlot { word: word as i64, role: SpanRole::Sentence }
    }

    pub fn prefix(word: usize) -> Self {
        TokenSlot { word: word as i64, role: SpanRole::Prefix }
    }
}

/// One word-level slot produced by grouping consecutive tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WordSlot {
    pub word: i64,
    pub role: SpanRole,
}

/// Token-to-word map of one sentence.
///
/// Construction does not check the map; [`TokenMap::problems`] reports every
/// violated invariant and [`validate_run`] folds those into a report.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenMap {
    tokens: Vec<TokenSlot>,
}

impl TokenMap {
    pub fn new(tokens: Vec<TokenSlot>) -> Self {
        Self { tokens }
    }

    /// BOS followed by `tokens_per_word[w]` tokens for each sentence word.
    pub fn plain(tokens_per_word: &[usize]) -> Self {
        let mut tokens = vec![TokenSlot::BOS];
        for (w, &k) in tokens_per_word.iter().enumerate() {
            tokens.extend(std::iter::repeat_n(TokenSlot::sentence(w), k));
        }
        Self { tokens }
    }

    /// BOS, then the prefix words, then the sentence words.
    pub fn prefixed(prefix_tokens_per_word: &[usize], tokens_per_word: &[usize]) -> Self {
        let mut tokens = vec![TokenSlot::BOS];
        for (w, &k) in prefix_tokens_per_word.iter().enumerate() {
            tokens.extend(std::iter::repeat_n(TokenSlot::prefix(w), k));
        }
        for (w, &k) in tokens_per_word.iter().enumerate() {
            tokens.extend(std::iter::repeat_n(TokenSlot::sentence(w), k));
        }
        Self { tokens }
    }

    pub fn tokens(&self) -> &[TokenSlot] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of sentence words covered (largest sentence index + 1).
    pub fn n_sentence_words(&self) -> usize {
        self.tokens
            .iter()
            .filter(|t| t.role == SpanRole::Sentence)
            .map(|t| t.word + 1)
            .max()
            .unwrap_or(0)
            .max(0) as usize
    }

    pub fn n_prefix_tokens(&self) -> usize {
        self.tokens.iter().filter(|t| t.role == SpanRole::Prefix).count()
    }

    /// Groups consecutive tokens with the same word and role into slots.
    /// Returns the slot index of every token and the slot list.
    pub fn word_slots(&self) -> (Vec<usize>, Vec<WordSlot>) {
        let mut assignment = Vec::with_capacity(self.tokens.len());
        let mut slots: Vec<WordSlot> = Vec::new();
        for t in &self.tokens {
            let same = slots.last().is_some_and(|s| s.word == t.word && s.role == t.role && t.role != SpanRole::Bos);
            if !same {
                slots.push(WordSlot { word: t.word, role: t.role });
            }
            assignment.push(slots.len() - 1);
        }
        (assignment, slots)
    }

    /// Every violated invariant, as human-readable messages.
    pub fn problems(&self, prefixed: bool) -> Vec<String> {
        let mut out = Vec::new();
        let bos = self.tokens.iter().filter(|t| t.role == SpanRole::Bos).count();
        if bos != 1 || self.tokens.first().map(|t| t.role) != Some(SpanRole::Bos) {
            out.push(format!("expected exactly one bos token at position 0, found {bos}"));
        }
        for (i, t) in self.tokens.iter().enumerate() {
            match t.role {
                SpanRole::Bos if t.word != -1 => out.push(format!("bos token {i} has word index {}", t.word)),
                SpanRole::Prefix | SpanRole::Sentence if t.word < 0 => {
                    out.push(format!("token {i} has negative word index {}", t.word))
                }
                _ => {}
            }
        }
        let roles: Vec<SpanRole> = self.tokens.iter().map(|t| t.role).collect();
        if roles.windows(2).any(|w| w[0] > w[1] && w[1] != SpanRole::Bos) {
            out.push("token roles out of order (expected bos, prefix, sentence)".to_string());
        }
        if !prefixed && roles.contains(&SpanRole::Prefix) {
            out.push("prefix tokens in a plain-condition run".to_string());
        }
        for role in [SpanRole::Prefix, SpanRole::Sentence] {
            let words: Vec<i64> = self.tokens.iter().filter(|t| t.role == role).map(|t| t.word).collect();
            if role == SpanRole::Sentence && words.is_empty() {
                out.push("empty sentence span".to_string());
                continue;
            }
            if words.is_empty() {
                continue;
            }
            let contiguous = words[0] == 0 && words.windows(2).all(|w| w[1] == w[0] || w[1] == w[0] + 1);
            if !contiguous {
                let what = if role == SpanRole::Sentence { "" } else { "prefix " };
                out.push(format!("{what}word indices not contiguous"));
            }
        }
        out
    }
}

/// Attention of every layer and head over one sentence, stored as `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTensor {
    n_layers: usize,
    n_heads: usize,
    n_tok: usize,
    data: Vec<f32>,
}

impl AttentionTensor {
    pub fn new(n_layers: usize, n_heads: usize, n_tok: usize, data: Vec<f32>) -> Result<Self> {
        let expected = n_layers * n_heads * n_tok * n_tok;
        if data.len() != expected {
            return Err(Error::DimensionMismatch(format!(
                "payload holds {} values, dims {n_layers}x{n_heads}x{n_tok}x{n_tok} need {expected}",
                data.len()
            )));
        }
        Ok(Self { n_layers, n_heads, n_tok, data })
    }

    pub fn zeros(n_layers: usize, n_heads: usize, n_tok: usize) -> Self {
        Self { n_layers, n_heads, n_tok, data: vec![0.0; n_layers * n_heads * n_tok * n_tok] }
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn n_tok(&self) -> usize {
        self.n_tok
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    fn offset(&self, layer: usize, head: usize) -> usize {
        (layer * self.n_heads + head) * self.n_tok * self.n_tok
    }

    /// Row-major `n_tok x n_tok` block of one layer and head.
    pub fn head(&self, layer: usize, head: usize) -> &[f32] {
        let o = self.offset(layer, head);
        &self.data[o..o + self.n_tok * self.n_tok]
    }

    pub fn head_mut(&mut self, layer: usize, head: usize) -> &mut [f32] {
        let o = self.offset(layer, head);
        let n = self.n_tok * self.n_tok;
        &mut self.data[o..o + n]
    }

    pub fn head_matrix<T: Real>(&self, layer: usize, head: usize) -> Matrix<T> {
        let block = self.head(layer, head).iter().map(|&x| T::of_f32(x)).collect();
        Matrix::from_vec(self.n_tok, self.n_tok, block).expect("block is square")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SentenceAttention {
    pub token_map: TokenMap,
    pub tensor: AttentionTensor,
}

/// One model's attention over a corpus under one input condition.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRun {
    pub meta: ModelMeta,
    pub condition: Condition,
    pub sentences: BTreeMap<SentenceId, SentenceAttention>,
}

impl AttentionRun {
    pub fn sentence(&self, id: &SentenceId) -> Result<&SentenceAttention> {
        self.sentences.get(id).ok_or_else(|| Error::MissingSentence(id.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    L1,
    L2,
}

impl std::fmt::Display for Group {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Group::L1 => "L1",
            Group::L2 => "L2",
        })
    }
}

impl std::str::FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "L1" | "l1" => Ok(Group::L1),
            "L2" | "l2" => Ok(Group::L2),
            other => Err(Error::Invalid(format!("unknown group {other:?}"))),
        }
    }
}

/// Saccade counts of one subject; entry `(i, j)` counts eye movements from
/// word `i` to word `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct SaccadeBundle {
    pub subject_id: String,
    pub group: Group,
    pub sentences: BTreeMap<SentenceId, Matrix<u32>>,
}

/// Writes `bytes` to a temporary file next to `path` and renames it into place.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}
