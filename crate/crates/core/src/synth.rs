//! Seeded synthetic corpora, attention runs and saccade bundles with planted
//! structure.
//!
//! All randomness comes from [`SplitMix64`]. Every sentence draws from its
//! own stream seeded with `seed ^ sentence_index` (mixed with a purpose tag),
//! so output does not depend on how sentences are scheduled across threads.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus_io::{
    AttentionRun, AttentionTensor, Condition, Corpus, Group, ModelMeta, SaccadeBundle, SentenceAttention, SentenceId,
    SentenceRecord, SpanRole, TokenMap, TokenSlot,
};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::resemblance::{build_layer_design, SubjectVector, TrivialPatterns};

/// SplitMix64 (Steele, Lea and Flood, 2014).
///
/// The state advances by `0x9E3779B97F4A7C15`; each output is the new state
/// passed through
///
/// ```text
/// z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
/// z = (z ^ (z >> 27)) * 0x94D049BB133111EB
/// z ^ (z >> 31)
/// ```
///
/// with wrapping multiplication. Uniform doubles take the top 53 bits.
#[derive(Clone, Debug)]
pub struct SplitMix64 {
    state: u64,
}

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n` (multiply-shift, `n > 0`).
    pub fn below(&mut self, n: u64) -> u64 {
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// Standard normal via Box-Muller; the sine branch is discarded.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

const TAG_WORDS: u64 = 1;
const TAG_ATTENTION: u64 = 2;
const TAG_SACCADE: u64 = 3;
const TAG_NOISE: u64 = 4;
const TAG_PERTURB: u64 = 5;

/// Stream for one sentence (or subject) and purpose.
fn stream(seed: u64, tag: u64, index: u64) -> SplitMix64 {
    let mut mix = SplitMix64::new(tag.wrapping_mul(0xD1B5_4A32_D192_ED03));
    SplitMix64::new((seed ^ index).wrapping_add(mix.next_u64()))
}

fn subject_tag(base: u64, subject: usize) -> u64 {
    base | ((subject as u64 + 1) << 8)
}

/// Planted structure of a synthetic workspace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Structure {
    /// Saccades are `w1*first_word + w2*prev_word + w3*self + noise`, rounded
    /// and clipped at zero.
    PatternMixture { weights: [f64; 3], sigma: f64 },
    /// Subject vectors are `intercept + sum_h w_h * head_h` of one layer,
    /// plus Gaussian noise.
    LinearCombo { layer: usize, head_weights: Vec<f64>, intercept: f64, sigma: f64 },
    IndependentRandom,
}

fn default_subjects() -> usize {
    4
}

fn default_model() -> String {
    "synth".into()
}

fn default_params() -> f64 {
    1e6
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_sentences: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub max_tokens_per_word: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Subjects are split into halves: the first `ceil(n / 2)` are L1.
    #[serde(default = "default_subjects")]
    pub n_subjects: usize,
    #[serde(default = "default_model")]
    pub model_name: String,
    #[serde(default = "default_params")]
    pub param_count: f64,
    /// Seed for the attention values only, so several models can share the
    /// corpus drawn from `seed`. Defaults to `seed`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention_seed: Option<u64>,
    pub structure: Structure,
}

impl SynthSpec {
    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.n_sentences == 0 {
            return bad("n_sentences must be at least 1".into());
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            return bad(format!("word range {}..={} is empty or starts at 0", self.min_words, self.max_words));
        }
        if self.max_tokens_per_word == 0 || self.n_layers == 0 || self.n_heads == 0 {
            return bad("tokens per word, layers and heads must be at least 1".into());
        }
        if !(self.param_count.is_finite() && self.param_count > 0.0) {
            return bad(format!("param_count must be positive, got {}", self.param_count));
        }
        match &self.structure {
            Structure::PatternMixture { weights, sigma } => {
                if !(sigma.is_finite() && *sigma >= 0.0) || weights.iter().any(|w| !w.is_finite()) {
                    return bad("weights must be finite and sigma non-negative".into());
                }
            }
            Structure::LinearCombo { layer, head_weights, intercept, sigma } => {
                if !(sigma.is_finite() && *sigma >= 0.0) || !intercept.is_finite() || head_weights.iter().any(|w| !w.is_finite()) {
                    return bad("weights must be finite and sigma non-negative".into());
                }
                if *layer >= self.n_layers {
                    return Err(Error::LayerOutOfRange { layer: *layer, n_layers: self.n_layers });
                }
                if head_weights.len() != self.n_heads {
                    return bad(format!("{} head weights for {} heads", head_weights.len(), self.n_heads));
                }
            }
            Structure::IndependentRandom => {}
        }
        Ok(())
    }

    fn group_of(&self, subject: usize) -> Group {
        if subject < self.n_subjects.div_ceil(2) {
            Group::L1
        } else {
            Group::L2
        }
    }
}

fn subject_id(k: usize) -> String {
    format!("s{k:02}")
}

/// Sentence records with the tokens-per-word layout of each.
fn layout(spec: &SynthSpec) -> Vec<(SentenceRecord, Vec<usize>)> {
    (0..spec.n_sentences)
        .map(|i| {
            let mut rng = stream(spec.seed, TAG_WORDS, i as u64);
            let span = (spec.max_words - spec.min_words + 1) as u64;
            let n = spec.min_words + rng.below(span) as usize;
            let tpw: Vec<usize> = (0..n).map(|_| 1 + rng.below(spec.max_tokens_per_word as u64) as usize).collect();
            let words = (0..n).map(|w| format!("w{i}x{w}")).collect();
            let id = SentenceId::new("synth", i as u32 + 1).expect("valid id");
            (SentenceRecord::new(id, words), tpw)
        })
        .collect()
}

pub fn gen_corpus(spec: &SynthSpec) -> Result<Corpus> {
    spec.check()?;
    Corpus::new(layout(spec).into_iter().map(|(r, _)| r).collect())
}

/// Positive values on the causal support of every row, normalized to sum 1.
fn random_causal_tensor(rng: &mut SplitMix64, n_layers: usize, n_heads: usize, n_tok: usize) -> AttentionTensor {
    let mut t = AttentionTensor::zeros(n_layers, n_heads, n_tok);
    let mut row = vec![0f64; n_tok];
    for l in 0..n_layers {
        for h in 0..n_heads {
            let block = t.head_mut(l, h);
            for i in 0..n_tok {
                for v in row[..=i].iter_mut() {
                    *v = 0.05 + rng.next_f64();
                }
                let s: f64 = row[..=i].iter().sum();
                for (j, v) in row[..=i].iter().enumerate() {
                    block[i * n_tok + j] = (v / s) as f32;
                }
            }
        }
    }
    t
}

/// A synthetic run plus, for `linear_combo`, the planted subject vectors.
#[derive(Clone, Debug)]
pub struct SynthRun {
    pub corpus: Corpus,
    pub run: AttentionRun,
    pub subjects: Vec<SubjectVector<f64>>,
}

pub fn gen_attention_run(spec: &SynthSpec) -> Result<SynthRun> {
    spec.check()?;
    let lay = layout(spec);
    let sentences: BTreeMap<SentenceId, SentenceAttention> = lay
        .par_iter()
        .enumerate()
        .map(|(i, (rec, tpw))| {
            let token_map = TokenMap::plain(tpw);
            let mut rng = stream(spec.attention_seed.unwrap_or(spec.seed), TAG_ATTENTION, i as u64);
            let tensor = random_causal_tensor(&mut rng, spec.n_layers, spec.n_heads, token_map.len());
            (rec.sentence_id.clone(), SentenceAttention { token_map, tensor })
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect();
    let corpus = Corpus::new(lay.into_iter().map(|(r, _)| r).collect())?;
    let run = AttentionRun {
        meta: ModelMeta {
            name: spec.model_name.clone(),
            param_count: spec.param_count,
            n_layers: spec.n_layers,
            n_heads: spec.n_heads,
            ntp_loss: None,
        },
        condition: Condition::Plain,
        sentences,
    };
    let subjects = match &spec.structure {
        Structure::LinearCombo { layer, head_weights, intercept, sigma } => {
            planted_subjects(spec, &run, &corpus, *layer, head_weights, *intercept, *sigma)?
        }
        _ => Vec::new(),
    };
    Ok(SynthRun { corpus, run, subjects })
}

/// Planted combination of the target layer's head columns plus noise. A
/// vector that dips below zero is shifted up by its minimum, which leaves
/// every fit with an intercept unchanged.
fn planted_subjects(
    spec: &SynthSpec,
    run: &AttentionRun,
    corpus: &Corpus,
    layer: usize,
    head_weights: &[f64],
    intercept: f64,
    sigma: f64,
) -> Result<Vec<SubjectVector<f64>>> {
    let design = build_layer_design::<f64>(run, corpus, layer)?.design;
    let base: Vec<f64> = (0..design.rows())
        .map(|i| intercept + design.row(i).iter().zip(head_weights).map(|(x, w)| x * w).sum::<f64>())
        .collect();
    Ok((0..spec.n_subjects)
        .map(|k| {
            let mut rng = stream(spec.seed, subject_tag(TAG_NOISE, k), 0);
            let mut v: Vec<f64> = base.iter().map(|&b| b + sigma * rng.normal()).collect();
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            if lo < 0.0 {
                v.iter_mut().for_each(|x| *x -= lo);
            }
            SubjectVector { subject_id: subject_id(k), group: spec.group_of(k), vector: v }
        })
        .collect())
}

/// Integer saccade bundles for subject vectors: each lower-triangle entry
/// becomes `max(0, round(scale * v))`; the upper triangle is zero.
pub fn subject_bundles(subjects: &[SubjectVector<f64>], corpus: &Corpus, scale: f64) -> Result<Vec<SaccadeBundle>> {
    let need = corpus.lower_tri_len();
    subjects
        .iter()
        .map(|s| {
            if s.vector.len() != need {
                return Err(Error::DimensionMismatch(format!("subject {} has {} entries, corpus needs {need}", s.subject_id, s.vector.len())));
            }
            let mut it = s.vector.iter();
            let mut sentences = BTreeMap::new();
            for rec in corpus.records() {
                let n = rec.n_words;
                let mut m = Matrix::filled(n, n, 0u32);
                for i in 0..n {
                    for j in 0..=i {
                        let v = *it.next().expect("length checked");
                        m.row_mut(i)[j] = (scale * v).round().max(0.0) as u32;
                    }
                }
                sentences.insert(rec.sentence_id.clone(), m);
            }
            Ok(SaccadeBundle { subject_id: s.subject_id.clone(), group: s.group, sentences })
        })
        .collect()
}

/// Saccade bundles for `pattern_mixture` or `independent_random` specs.
pub fn gen_saccade(spec: &SynthSpec) -> Result<Vec<SaccadeBundle>> {
    spec.check()?;
    let corpus = gen_corpus(spec)?;
    let (weights, sigma) = match &spec.structure {
        Structure::PatternMixture { weights, sigma } => {
            if *sigma == 0.0 && weights.iter().any(|w| *w < 0.0) {
                return Err(Error::Invalid("negative pattern weights with sigma = 0 give negative counts".into()));
            }
            (Some(*weights), *sigma)
        }
        Structure::IndependentRandom => (None, 0.0),
        Structure::LinearCombo { .. } => {
            return Err(Error::Invalid("linear_combo saccades come from gen_attention_run".into()))
        }
    };
    (0..spec.n_subjects)
        .map(|k| {
            let sentences = corpus
                .records()
                .par_iter()
                .enumerate()
                .map(|(i, rec)| {
                    let mut rng = stream(spec.seed, subject_tag(TAG_SACCADE, k), i as u64);
                    let n = rec.n_words;
                    let p = TrivialPatterns::<f64>::new(n)?;
                    let mut m = Matrix::filled(n, n, 0u32);
                    for r in 0..n {
                        for c in 0..n {
                            let v = match weights {
                                Some(w) => {
                                    let mean = w[0] * p.first_word[(r, c)] + w[1] * p.prev_word[(r, c)] + w[2] * p.self_word[(r, c)];
                                    (mean + sigma * rng.normal()).round().max(0.0)
                                }
                                None => rng.below(5) as f64,
                            };
                            m.row_mut(r)[c] = v as u32;
                        }
                    }
                    Ok((rec.sentence_id.clone(), m))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(SaccadeBundle { subject_id: subject_id(k), group: spec.group_of(k), sentences: sentences.into_iter().collect() })
        })
        .collect()
}

/// Builds a prefixed counterpart of a plain run.
///
/// Every sentence row keeps its sentence-token weights bit for bit; the BOS
/// weight is halved and the other half is spread over the prefix tokens.
/// Prefix rows attend uniformly. After restricting to the sentence span and
/// renormalizing, unperturbed layers match the plain run exactly. Rows of
/// layers in `perturbed_layers` get their sentence weights reshuffled by
/// random factors in `[0.2, 3)` with the sentence mass kept.
pub fn derive_prefixed_run(plain: &AttentionRun, condition: Condition, perturbed_layers: &[usize], seed: u64) -> Result<AttentionRun> {
    if plain.condition.is_prefixed() {
        return Err(Error::Invalid("source run already has a prefix".into()));
    }
    let Some(prefix) = condition.prefix() else {
        return Err(Error::Invalid("target condition has no prefix".into()));
    };
    let n_prefix = prefix.split_whitespace().count();
    if n_prefix == 0 {
        return Err(Error::Invalid("prefix has no words".into()));
    }
    if let Some(&l) = perturbed_layers.iter().find(|&&l| l >= plain.meta.n_layers) {
        return Err(Error::LayerOutOfRange { layer: l, n_layers: plain.meta.n_layers });
    }
    let sentences = plain
        .sentences
        .iter()
        .enumerate()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(idx, (id, s))| {
            let old = &s.token_map;
            if old.tokens().first().map(|t| t.role) != Some(SpanRole::Bos) || old.n_prefix_tokens() != 0 {
                return Err(Error::Invalid(format!("sentence {id}: token map is not plain")));
            }
            let mut tokens = vec![TokenSlot::BOS];
            tokens.extend((0..n_prefix).map(TokenSlot::prefix));
            tokens.extend_from_slice(&old.tokens()[1..]);
            let n_old = old.len();
            let n_new = n_old + n_prefix;
            let mut tensor = AttentionTensor::zeros(plain.meta.n_layers, plain.meta.n_heads, n_new);
            let mut rng = stream(seed, TAG_PERTURB, idx as u64);
            for l in 0..plain.meta.n_layers {
                let perturb = perturbed_layers.contains(&l);
                for h in 0..plain.meta.n_heads {
                    let src = s.tensor.head(l, h);
                    let dst = tensor.head_mut(l, h);
                    dst[0] = 1.0;
                    for r in 1..=n_prefix {
                        let w = 1.0 / (r + 1) as f32;
                        dst[r * n_new..r * n_new + r + 1].fill(w);
                    }
                    for i in 1..n_old {
                        let row = &src[i * n_old..(i + 1) * n_old];
                        let out = &mut dst[(i + n_prefix) * n_new..(i + n_prefix + 1) * n_new];
                        let half = row[0] * 0.5;
                        out[0] = half;
                        out[1..=n_prefix].fill(half / n_prefix as f32);
                        if perturb {
                            let mass: f64 = row[1..=i].iter().map(|&x| x as f64).sum();
                            let f: Vec<f64> = row[1..=i].iter().map(|&x| x as f64 * (0.2 + 2.8 * rng.next_f64())).collect();
                            let fs: f64 = f.iter().sum();
                            for (j, v) in f.iter().enumerate() {
                                out[n_prefix + 1 + j] = (mass * v / fs) as f32;
                            }
                        } else {
                            out[n_prefix + 1..=n_prefix + i].copy_from_slice(&row[1..=i]);
                        }
                    }
                }
            }
            Ok((id.clone(), SentenceAttention { token_map: TokenMap::new(tokens), tensor }))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AttentionRun { meta: plain.meta.clone(), condition, sentences: sentences.into_iter().collect() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitmix_reference_values() {
        // first outputs for seed 1234567 from the published reference implementation
        let mut r = SplitMix64::new(1234567);
        assert_eq!(r.next_u64(), 6457827717110365317);
        assert_eq!(r.next_u64(), 3203168211198807973);
    }

    #[test]
    fn unit_interval_and_below() {
        let mut r = SplitMix64::new(7);
        for _ in 0..1000 {
            let x = r.next_f64();
            assert!((0.0..1.0).contains(&x));
            assert!(r.below(3) < 3);
        }
    }

    fn spec(structure: Structure) -> SynthSpec {
        SynthSpec {
            seed: 11,
            n_sentences: 6,
            min_words: 1,
            max_words: 5,
            max_tokens_per_word: 3,
            n_layers: 3,
            n_heads: 2,
            n_subjects: 3,
            model_name: "m".into(),
            param_count: 1e6,
            attention_seed: None,
            structure,
        }
    }

    #[test]
    fn runs_are_row_stochastic() {
        let out = gen_attention_run(&spec(Structure::IndependentRandom)).unwrap();
        for s in out.run.sentences.values() {
            let n = s.tensor.n_tok();
            for l in 0..3 {
                for h in 0..2 {
                    let b = s.tensor.head(l, h);
                    for i in 0..n {
                        let sum: f32 = b[i * n..(i + 1) * n].iter().sum();
                        assert!((sum - 1.0).abs() < 1e-5);
                        assert!(b[i * n + i + 1..(i + 1) * n].iter().all(|&x| x == 0.0));
                    }
                }
            }
        }
    }

    #[test]
    fn pure_prev_word_saccades() {
        let b = gen_saccade(&spec(Structure::PatternMixture { weights: [0.0, 3.0, 0.0], sigma: 0.0 })).unwrap();
        for bundle in &b {
            for m in bundle.sentences.values() {
                for i in 0..m.rows() {
                    for j in 0..m.cols() {
                        assert_eq!(m[(i, j)], if i >= 1 && j == i - 1 { 3 } else { 0 });
                    }
                }
            }
        }
        assert_eq!(b[0].group, Group::L1);
        assert_eq!(b[2].group, Group::L2);
        assert!(gen_saccade(&spec(Structure::PatternMixture { weights: [-1.0, 3.0, 0.0], sigma: 0.0 })).is_err());
    }

    #[test]
    fn determinism() {
        let s = spec(Structure::PatternMixture { weights: [1.0, 2.0, 0.5], sigma: 1.0 });
        assert_eq!(gen_saccade(&s).unwrap(), gen_saccade(&s).unwrap());
        let a = gen_attention_run(&spec(Structure::IndependentRandom)).unwrap();
        let b = gen_attention_run(&spec(Structure::IndependentRandom)).unwrap();
        assert_eq!(a.run, b.run);
    }

    #[test]
    fn spec_checks() {
        let mut s = spec(Structure::LinearCombo { layer: 3, head_weights: vec![1.0, 1.0], intercept: 0.0, sigma: 0.0 });
        assert!(s.check().is_err());
        s.structure = Structure::LinearCombo { layer: 1, head_weights: vec![1.0], intercept: 0.0, sigma: 0.0 };
        assert!(s.check().is_err());
        s.structure = Structure::PatternMixture { weights: [0.0; 3], sigma: -1.0 };
        assert!(s.check().is_err());
    }
}
