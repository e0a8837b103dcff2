//! Attention divergence between models, layerwise or by layer quarter, and
//! sensitivity of a model to an instruction prefix.
//!
//! The default metric sums, over the rows of two word-level matrices, the
//! average of both Kullback-Leibler directions (natural log):
//!
//! ```text
//! D(A, B) = 1/2 * sum_i [ KL(A_i || B_i) + KL(B_i || A_i) ]
//! ```
//!
//! Each row is taken over its causal support `j <= i` only. The mixture-based
//! Jensen-Shannon divergence is available as [`DivergenceMetric::JensenShannon`].

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::{layer_sentence_matrix, mean_matrices, renormalize_rows, RowRenormalized, WordAttention};
use crate::corpus_io::{AttentionRun, Cell, ReportTable, SentenceId};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::num::{mean, std_population, Real};

/// Floor applied to every support entry before taking logarithms.
pub const KL_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceMetric {
    /// Half the sum of both KL directions, per row, summed over rows.
    #[default]
    SymmetrizedKl,
    /// Canonical Jensen-Shannon against the row mixture, summed over rows.
    JensenShannon,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuarterAggregation {
    /// Average a quarter's word matrices, renormalize, then compare.
    #[default]
    MeanMatrices,
    /// Average the divergences of every layer pair across the two quarters.
    MeanDivergences,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceOptions {
    pub metric: DivergenceMetric,
    /// `None` disables flooring; a zero in `q` under positive `p` is then an error.
    pub floor: Option<f64>,
    pub quarter_aggregation: QuarterAggregation,
}

impl Default for DivergenceOptions {
    fn default() -> Self {
        Self { metric: DivergenceMetric::SymmetrizedKl, floor: Some(KL_FLOOR), quarter_aggregation: QuarterAggregation::MeanMatrices }
    }
}

/// `sum_i p_i ln(p_i / q_i)` with `0 ln 0 = 0`.
///
/// With a floor, both `p` and `q` entries are raised to at least the floor
/// first, so the result is always finite.
pub fn kl_row<T: Real>(p: &[T], q: &[T], floor: Option<T>) -> Result<T> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch(format!("rows of length {} and {}", p.len(), q.len())));
    }
    let mut acc = T::zero();
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        let (pi, qi) = match floor {
            Some(f) => (pi.max(f), qi.max(f)),
            None => (pi, qi),
        };
        if pi == T::zero() {
            continue;
        }
        if qi == T::zero() {
            return Err(Error::AbsoluteContinuity(i));
        }
        acc = acc + pi * (pi / qi).ln();
    }
    Ok(acc)
}

fn js_row<T: Real>(p: &[T], q: &[T]) -> Result<T> {
    let half = T::lit(0.5);
    let m: Vec<T> = p.iter().zip(q).map(|(&a, &b)| (a + b) * half).collect();
    Ok(half * (kl_row(p, &m, None)? + kl_row(q, &m, None)?))
}

/// Divergence of two renormalized word matrices of one sentence.
pub fn sentence_divergence<T: Real>(
    a: &WordAttention<T, RowRenormalized>,
    b: &WordAttention<T, RowRenormalized>,
    options: &DivergenceOptions,
) -> Result<T> {
    matrix_divergence(a.matrix(), b.matrix(), options)
}

fn matrix_divergence<T: Real>(a: &Matrix<T>, b: &Matrix<T>, options: &DivergenceOptions) -> Result<T> {
    if a.rows() != b.rows() || a.cols() != b.cols() || !a.is_square() {
        return Err(Error::DimensionMismatch(format!("{}x{} vs {}x{}", a.rows(), a.cols(), b.rows(), b.cols())));
    }
    let floor = options.floor.map(T::lit);
    let half = T::lit(0.5);
    let mut total = T::zero();
    for i in 0..a.rows() {
        let p = &a.row(i)[..=i];
        let q = &b.row(i)[..=i];
        let d = match options.metric {
            DivergenceMetric::SymmetrizedKl => half * (kl_row(p, q, floor)? + kl_row(q, p, floor)?),
            DivergenceMetric::JensenShannon => js_row(p, q)?,
        };
        total = total + d;
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Layer,
    Quarter,
}

impl Granularity {
    pub fn label(self) -> &'static str {
        match self {
            Granularity::Layer => "layer",
            Granularity::Quarter => "quarter",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnitStat<T> {
    pub unit: usize,
    pub mean: T,
    pub std: T,
    pub n_sentences: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DivergenceReport<T> {
    pub model_a: String,
    pub model_b: String,
    /// Conditions of the two runs, e.g. `plain` or `plain/instruction_prefixed`.
    pub condition: String,
    pub granularity: Granularity,
    pub units: Vec<UnitStat<T>>,
    pub reference: Option<Box<DivergenceReport<T>>>,
}

impl<T: Real> DivergenceReport<T> {
    /// Per-unit flag: mean strictly above the reference mean of the same unit.
    pub fn above(&self, reference: &DivergenceReport<T>) -> Result<Vec<bool>> {
        if reference.granularity != self.granularity || reference.units.len() != self.units.len() {
            return Err(Error::Invalid(format!(
                "reference has {} {} units, report has {} {} units",
                reference.units.len(),
                reference.granularity.label(),
                self.units.len(),
                self.granularity.label()
            )));
        }
        Ok(self.units.iter().zip(&reference.units).map(|(u, r)| u.mean > r.mean).collect())
    }

    pub fn with_reference(mut self, reference: DivergenceReport<T>) -> Self {
        self.reference = Some(Box::new(reference));
        self
    }

    /// Rows `(model_a, model_b, condition, granularity, unit, mean, std, n, above_reference)`.
    pub fn to_table(&self) -> Result<ReportTable> {
        let flags = match &self.reference {
            Some(r) => Some(self.above(r)?),
            None => None,
        };
        let mut t = ReportTable::new(DIVERGENCE_COLUMNS);
        for (k, u) in self.units.iter().enumerate() {
            t.push(vec![
                self.model_a.as_str().into(),
                self.model_b.as_str().into(),
                self.condition.as_str().into(),
                self.granularity.label().into(),
                u.unit.into(),
                u.mean.to_f64_lossy().into(),
                u.std.to_f64_lossy().into(),
                u.n_sentences.into(),
                flags.as_ref().map_or(Cell::Null, |f| Cell::Bool(f[k])),
            ]);
        }
        Ok(t)
    }
}

pub const DIVERGENCE_COLUMNS: [&str; 9] =
    ["model_a", "model_b", "condition", "granularity", "unit", "mean", "std", "n", "above_reference"];

/// Layer ranges of the four quarters: quarter `k` covers
/// `floor(k L / 4) .. floor((k + 1) L / 4)`.
pub fn quarter_bounds(n_layers: usize) -> Result<[Range<usize>; 4]> {
    if n_layers < 4 {
        return Err(Error::TooFewLayers(n_layers));
    }
    let b = |k: usize| k * n_layers / 4;
    Ok([b(0)..b(1), b(1)..b(2), b(2)..b(3), b(3)..b(4)])
}

/// Sentences shared by both runs, ascending; errors unless the two runs cover
/// the same sentences with the same word counts.
fn shared_sentences(a: &AttentionRun, b: &AttentionRun) -> Result<Vec<SentenceId>> {
    let ids_a: Vec<&SentenceId> = a.sentences.keys().collect();
    let ids_b: Vec<&SentenceId> = b.sentences.keys().collect();
    if ids_a != ids_b {
        return Err(Error::Invalid(format!(
            "corpus mismatch: {} covers {} sentences, {} covers {}",
            a.meta.name,
            ids_a.len(),
            b.meta.name,
            ids_b.len()
        )));
    }
    for id in &ids_a {
        let wa = a.sentences[*id].token_map.n_sentence_words();
        let wb = b.sentences[*id].token_map.n_sentence_words();
        if wa != wb {
            return Err(Error::Invalid(format!("corpus mismatch: sentence {id} has {wa} vs {wb} words")));
        }
    }
    if ids_a.is_empty() {
        return Err(Error::Invalid("no sentences to compare".into()));
    }
    Ok(ids_a.into_iter().cloned().collect())
}

fn condition_label(a: &AttentionRun, b: &AttentionRun) -> String {
    if a.condition.label() == b.condition.label() {
        a.condition.label().to_string()
    } else {
        format!("{}/{}", a.condition.label(), b.condition.label())
    }
}

fn summarize<T: Real>(per_sentence: Vec<Vec<T>>, n_units: usize) -> Vec<UnitStat<T>> {
    (0..n_units)
        .map(|u| {
            // ascending sentence order, independent of worker count
            let xs: Vec<T> = per_sentence.iter().map(|row| row[u]).collect();
            UnitStat { unit: u, mean: mean(&xs), std: std_population(&xs), n_sentences: xs.len() }
        })
        .collect()
}

/// Mean and spread over sentences of the per-layer divergence. Both runs
/// must have the same number of layers.
pub fn layerwise_divergence<T: Real>(
    a: &AttentionRun,
    b: &AttentionRun,
    options: &DivergenceOptions,
) -> Result<DivergenceReport<T>> {
    let l = a.meta.n_layers;
    if b.meta.n_layers != l {
        return Err(Error::Invalid(format!(
            "layer-count mismatch ({} vs {}); compare quarter-wise instead",
            l, b.meta.n_layers
        )));
    }
    let ids = shared_sentences(a, b)?;
    let per_sentence = ids
        .par_iter()
        .map(|id| {
            let (sa, sb) = (&a.sentences[id], &b.sentences[id]);
            (0..l)
                .map(|layer| {
                    let ma = renormalize_rows(&layer_sentence_matrix::<T>(sa, layer)?)?;
                    let mb = renormalize_rows(&layer_sentence_matrix::<T>(sb, layer)?)?;
                    matrix_divergence(&ma, &mb, options)
                })
                .collect::<Result<Vec<T>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DivergenceReport {
        model_a: a.meta.name.clone(),
        model_b: b.meta.name.clone(),
        condition: condition_label(a, b),
        granularity: Granularity::Layer,
        units: summarize(per_sentence, l),
        reference: None,
    })
}

/// Divergence per layer quarter; works for any two depths of at least 4.
pub fn quarterwise_divergence<T: Real>(
    a: &AttentionRun,
    b: &AttentionRun,
    options: &DivergenceOptions,
) -> Result<DivergenceReport<T>> {
    let qa = quarter_bounds(a.meta.n_layers)?;
    let qb = quarter_bounds(b.meta.n_layers)?;
    let ids = shared_sentences(a, b)?;
    let per_sentence = ids
        .par_iter()
        .map(|id| {
            let (sa, sb) = (&a.sentences[id], &b.sentences[id]);
            let la = qa_layers(sa, a.meta.n_layers)?;
            let lb = qa_layers(sb, b.meta.n_layers)?;
            (0..4)
                .map(|k| match options.quarter_aggregation {
                    QuarterAggregation::MeanMatrices => {
                        let ma = renormalize_rows(&mean_matrices(&la[qa[k].clone()])?)?;
                        let mb = renormalize_rows(&mean_matrices(&lb[qb[k].clone()])?)?;
                        matrix_divergence(&ma, &mb, options)
                    }
                    QuarterAggregation::MeanDivergences => {
                        let mut ds = Vec::new();
                        for x in &la[qa[k].clone()] {
                            let x = renormalize_rows(x)?;
                            for y in &lb[qb[k].clone()] {
                                ds.push(matrix_divergence(&x, &renormalize_rows(y)?, options)?);
                            }
                        }
                        Ok(mean(&ds))
                    }
                })
                .collect::<Result<Vec<T>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DivergenceReport {
        model_a: a.meta.name.clone(),
        model_b: b.meta.name.clone(),
        condition: condition_label(a, b),
        granularity: Granularity::Quarter,
        units: summarize(per_sentence, 4),
        reference: None,
    })
}

fn qa_layers<T: Real>(s: &crate::corpus_io::SentenceAttention, n_layers: usize) -> Result<Vec<Matrix<T>>> {
    (0..n_layers).map(|l| layer_sentence_matrix(s, l)).collect()
}

/// Layerwise when depths agree, quarter-wise otherwise.
pub fn compare_runs<T: Real>(a: &AttentionRun, b: &AttentionRun, options: &DivergenceOptions) -> Result<DivergenceReport<T>> {
    if a.meta.n_layers == b.meta.n_layers {
        layerwise_divergence(a, b, options)
    } else {
        quarterwise_divergence(a, b, options)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityReport<T> {
    pub report: DivergenceReport<T>,
    pub above_reference: Vec<bool>,
}

/// Divergence between a model's plain attention and its attention on the
/// same sentences behind a prefix, flagged unit by unit against `reference`.
///
/// The granularity follows the reference: layerwise when it has one unit per
/// layer of this model, quarter-wise when it is a quarter report.
pub fn instruction_sensitivity<T: Real>(
    plain: &AttentionRun,
    prefixed: &AttentionRun,
    reference: &DivergenceReport<T>,
    options: &DivergenceOptions,
) -> Result<SensitivityReport<T>> {
    if plain.condition.is_prefixed() {
        return Err(Error::Invalid(format!("run {} is not a plain-condition run", plain.meta.name)));
    }
    if !prefixed.condition.is_prefixed() {
        return Err(Error::Invalid(format!("prefix spans absent: run {} has a plain condition", prefixed.meta.name)));
    }
    let report = match reference.granularity {
        Granularity::Layer => {
            if reference.units.len() != plain.meta.n_layers {
                return Err(Error::Invalid(format!(
                    "reference has {} layers, model has {}; use a quarter-wise reference",
                    reference.units.len(),
                    plain.meta.n_layers
                )));
            }
            layerwise_divergence(plain, prefixed, options)?
        }
        Granularity::Quarter => quarterwise_divergence(plain, prefixed, options)?,
    };
    let above_reference = report.above(reference)?;
    Ok(SensitivityReport { report: report.with_reference(reference.clone()), above_reference })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ws(rows: &[&[f64]]) -> WordAttention<f64, RowRenormalized> {
        WordAttention::from_stochastic(Matrix::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn kl_examples() {
        let p = [0.5f64, 0.5];
        assert_eq!(kl_row(&p, &p, Some(KL_FLOOR)).unwrap(), 0.0);
        let expected = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((kl_row(&p, &[0.25, 0.75], Some(KL_FLOOR)).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.14384).abs() < 1e-5);
        let v = kl_row(&[1.0f64, 0.0], &[0.5, 0.5], None).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-15);
        let v = kl_row(&[1.0f64, 0.0], &[0.5, 0.5], Some(KL_FLOOR)).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn kl_continuity() {
        assert!(matches!(kl_row(&[0.5f64, 0.5], &[1.0, 0.0], None), Err(Error::AbsoluteContinuity(1))));
        assert!(kl_row(&[0.5f64, 0.5], &[1.0, 0.0], Some(KL_FLOOR)).unwrap().is_finite());
    }

    #[test]
    fn sentence_example() {
        let a = ws(&[&[1.0, 0.0], &[0.5, 0.5]]);
        let b = ws(&[&[1.0, 0.0], &[0.25, 0.75]]);
        let o = DivergenceOptions::default();
        let d = sentence_divergence(&a, &b, &o).unwrap();
        let kab = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        let kba = 0.25 * 0.5f64.ln() + 0.75 * 1.5f64.ln();
        assert!((d - 0.5 * (kab + kba)).abs() < 1e-15);
        assert!((d - 0.13733).abs() < 1e-5, "{d}");
        assert_eq!(d, sentence_divergence(&b, &a, &o).unwrap());
        assert_eq!(sentence_divergence(&a, &a, &o).unwrap(), 0.0);
    }

    #[test]
    fn shape_mismatch() {
        let a = ws(&[&[1.0]]);
        let b = ws(&[&[1.0, 0.0], &[0.5, 0.5]]);
        assert!(sentence_divergence(&a, &b, &DivergenceOptions::default()).is_err());
    }

    #[test]
    fn jensen_shannon_is_bounded() {
        let a = ws(&[&[1.0, 0.0], &[1.0, 0.0]]);
        let b = ws(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let o = DivergenceOptions { metric: DivergenceMetric::JensenShannon, ..Default::default() };
        let d = sentence_divergence(&a, &b, &o).unwrap();
        assert!((d - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn quarter_partitions() {
        let q = quarter_bounds(32).unwrap();
        assert_eq!(q, [0..8, 8..16, 16..24, 24..32]);
        // floor(k*5/4) = 0, 1, 2, 3, 5
        assert_eq!(quarter_bounds(5).unwrap(), [0..1, 1..2, 2..3, 3..5]);
        assert!(matches!(quarter_bounds(3), Err(Error::TooFewLayers(3))));
        for l in 4..100 {
            let q = quarter_bounds(l).unwrap();
            let covered: Vec<usize> = q.iter().flat_map(|r| r.clone()).collect();
            assert_eq!(covered, (0..l).collect::<Vec<_>>());
            assert!(q.iter().all(|r| !r.is_empty()));
        }
    }
}
