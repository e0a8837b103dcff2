//! Token-level to word-level attention.
//!
//! Pipeline order is fixed: heads average (divergence only) → [`word_align`]
//! → [`drop_bos`] or [`extract_sentence_span`] → optional row
//! renormalization. Resemblance features keep heads separate and skip the
//! renormalization so the mass given to BOS stays visible.

use std::marker::PhantomData;

use crate::corpus_io::{AttentionTensor, SentenceAttention, SentenceId, SpanRole, TokenMap, WordSlot};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::num::Real;

/// Tolerance on row sums of a renormalized word matrix.
pub const RENORMALIZED_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Normalization {
    RawAfterBosDrop,
    RowRenormalized,
}

/// Type-level marker for the normalization a [`WordAttention`] went through.
pub trait NormPolicy: Copy + std::fmt::Debug + Send + Sync + 'static {
    const KIND: Normalization;
}

/// BOS row and column removed, rows left as they were.
#[derive(Clone, Copy, Debug)]
pub struct RawAfterBosDrop;

/// Every row sums to one over its causal support.
#[derive(Clone, Copy, Debug)]
pub struct RowRenormalized;

impl NormPolicy for RawAfterBosDrop {
    const KIND: Normalization = Normalization::RawAfterBosDrop;
}

impl NormPolicy for RowRenormalized {
    const KIND: Normalization = Normalization::RowRenormalized;
}

/// Word-level attention of one sentence. The normalization is part of the
/// type, so a raw matrix cannot reach the divergence code and a renormalized
/// one cannot reach the resemblance regressions.
#[derive(Clone, Debug, PartialEq)]
pub struct WordAttention<T, N> {
    pub sentence_id: Option<SentenceId>,
    pub layer: Option<usize>,
    /// `None` for heads-averaged attention.
    pub head: Option<usize>,
    matrix: Matrix<T>,
    _policy: PhantomData<N>,
}

impl<T: Real, N: NormPolicy> WordAttention<T, N> {
    fn wrap(matrix: Matrix<T>) -> Self {
        Self { sentence_id: None, layer: None, head: None, matrix, _policy: PhantomData }
    }

    pub fn labeled(mut self, sentence_id: SentenceId, layer: usize, head: Option<usize>) -> Self {
        self.sentence_id = Some(sentence_id);
        self.layer = Some(layer);
        self.head = head;
        self
    }

    pub fn normalization(&self) -> Normalization {
        N::KIND
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.matrix
    }

    pub fn into_matrix(self) -> Matrix<T> {
        self.matrix
    }

    pub fn n_words(&self) -> usize {
        self.matrix.rows()
    }
}

impl<T: Real> WordAttention<T, RawAfterBosDrop> {
    pub fn renormalize(self) -> Result<WordAttention<T, RowRenormalized>> {
        let matrix = renormalize_rows(&self.matrix)?;
        Ok(WordAttention {
            sentence_id: self.sentence_id,
            layer: self.layer,
            head: self.head,
            matrix,
            _policy: PhantomData,
        })
    }
}

impl<T: Real> WordAttention<T, RowRenormalized> {
    /// Wraps a matrix that is already causal and row-stochastic, without
    /// touching its values.
    pub fn from_stochastic(matrix: Matrix<T>) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::NotSquare(format!("{}x{}", matrix.rows(), matrix.cols())));
        }
        let tol = T::lit(RENORMALIZED_TOLERANCE);
        for i in 0..matrix.rows() {
            let row = matrix.row(i);
            if row.iter().any(|&x| x < T::zero() || !x.is_finite()) {
                return Err(Error::Invalid(format!("row {i} has negative or non-finite entries")));
            }
            if row[i + 1..].iter().any(|&x| x != T::zero()) {
                return Err(Error::Invalid(format!("row {i} has mass above the diagonal")));
            }
            let s = matrix.causal_row_sum(i);
            if (s - T::one()).abs() > tol {
                return Err(Error::Invalid(format!("row {i} sums to {s}, not 1")));
            }
        }
        Ok(Self::wrap(matrix))
    }
}

/// Word-aligned matrix that still carries BOS and any prefix words.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedMatrix<T> {
    pub matrix: Matrix<T>,
    pub slots: Vec<WordSlot>,
}

/// Collapses token groups: columns of a group are summed, then rows of a
/// group are averaged. `groups[t]` is the group of token `t`, in `0..n_groups`.
pub fn aggregate_groups<T: Real>(m: &Matrix<T>, groups: &[usize], n_groups: usize) -> Result<Matrix<T>> {
    if !m.is_square() || groups.len() != m.rows() {
        return Err(Error::DimensionMismatch(format!(
            "token map has {} tokens, matrix is {}x{}",
            groups.len(),
            m.rows(),
            m.cols()
        )));
    }
    if let Some(&g) = groups.iter().find(|&&g| g >= n_groups) {
        return Err(Error::Invalid(format!("group {g} out of range for {n_groups} groups")));
    }
    let n = m.rows();
    let mut counts = vec![0usize; n_groups];
    for &g in groups {
        counts[g] += 1;
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Invalid(format!("group {empty} has no tokens")));
    }
    // sum over "to" tokens
    let mut col_summed = Matrix::zeros(n, n_groups);
    for t in 0..n {
        let src = m.row(t);
        let dst = col_summed.row_mut(t);
        for (u, &x) in src.iter().enumerate() {
            dst[groups[u]] = dst[groups[u]] + x;
        }
    }
    // average over "from" tokens
    let mut out = Matrix::zeros(n_groups, n_groups);
    for (t, &g) in groups.iter().enumerate().take(n) {
        let src = col_summed.row(t);
        let dst = out.row_mut(g);
        for (d, &x) in dst.iter_mut().zip(src) {
            *d = *d + x;
        }
    }
    for (g, &c) in counts.iter().enumerate() {
        let c = T::of_usize(c);
        for x in out.row_mut(g) {
            *x = *x / c;
        }
    }
    Ok(out)
}

/// Token attention to word attention: sum over the tokens of a target word,
/// mean over the tokens of a source word. Slot 0 is BOS when the map has one.
pub fn word_align<T: Real>(token_matrix: &Matrix<T>, token_map: &TokenMap) -> Result<AlignedMatrix<T>> {
    let (groups, slots) = token_map.word_slots();
    let matrix = aggregate_groups(token_matrix, &groups, slots.len())?;
    Ok(AlignedMatrix { matrix, slots })
}

/// Removes row and column 0 (the BOS slot) without renormalizing.
pub fn drop_bos<T: Real>(word_matrix: &Matrix<T>) -> Result<WordAttention<T, RawAfterBosDrop>> {
    let n = word_matrix.rows();
    if !word_matrix.is_square() {
        return Err(Error::NotSquare(format!("{n}x{}", word_matrix.cols())));
    }
    if n < 2 {
        return Err(Error::Shape(format!("need at least a 2x2 matrix to drop BOS, got {n}x{n}")));
    }
    let keep: Vec<usize> = (1..n).collect();
    Ok(WordAttention::wrap(word_matrix.select(&keep)))
}

impl<T: Real> AlignedMatrix<T> {
    /// [`drop_bos`] after checking that slot 0 is BOS and nothing else is
    /// outside the sentence span.
    pub fn drop_bos(&self) -> Result<WordAttention<T, RawAfterBosDrop>> {
        if self.slots.first().map(|s| s.role) != Some(SpanRole::Bos) {
            return Err(Error::Invalid("first word slot is not BOS".into()));
        }
        if self.slots[1..].iter().any(|s| s.role != SpanRole::Sentence) {
            return Err(Error::Invalid("prefix words present; use extract_sentence_span".into()));
        }
        drop_bos(&self.matrix)
    }

    fn sentence_indices(&self) -> Vec<usize> {
        self.slots.iter().enumerate().filter(|(_, s)| s.role == SpanRole::Sentence).map(|(i, _)| i).collect()
    }
}

/// Divides each row by its causal-support sum; entries above the diagonal
/// become zero.
pub fn renormalize_rows<T: Real>(word_matrix: &Matrix<T>) -> Result<Matrix<T>> {
    if !word_matrix.is_square() {
        return Err(Error::NotSquare(format!("{}x{}", word_matrix.rows(), word_matrix.cols())));
    }
    let n = word_matrix.rows();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        let s = word_matrix.causal_row_sum(i);
        if s.partial_cmp(&T::zero()) != Some(std::cmp::Ordering::Greater) || !s.is_finite() {
            return Err(Error::DegenerateRow(i));
        }
        let src = &word_matrix.row(i)[..=i];
        for (d, &x) in out.row_mut(i).iter_mut().zip(src) {
            *d = x / s;
        }
    }
    Ok(out)
}

/// Rows and columns of the sentence words only, before renormalization.
pub fn restrict_sentence_span<T: Real>(aligned: &AlignedMatrix<T>) -> Result<Matrix<T>> {
    let keep = aligned.sentence_indices();
    if keep.is_empty() {
        return Err(Error::Invalid("empty sentence span".into()));
    }
    Ok(aligned.matrix.select(&keep))
}

/// Sentence-span attention of a prefixed run, row-renormalized. BOS and
/// prefix mass is discarded.
pub fn extract_sentence_span<T: Real>(aligned: &AlignedMatrix<T>) -> Result<WordAttention<T, RowRenormalized>> {
    let restricted = restrict_sentence_span(aligned)?;
    Ok(WordAttention::wrap(renormalize_rows(&restricted)?))
}

/// Mean over heads of one layer.
pub fn heads_average<T: Real>(tensor: &AttentionTensor, layer: usize) -> Result<Matrix<T>> {
    if layer >= tensor.n_layers() {
        return Err(Error::LayerOutOfRange { layer, n_layers: tensor.n_layers() });
    }
    let n = tensor.n_tok();
    let mut acc = vec![T::zero(); n * n];
    for h in 0..tensor.n_heads() {
        for (a, &x) in acc.iter_mut().zip(tensor.head(layer, h)) {
            *a = *a + T::of_f32(x);
        }
    }
    let k = T::of_usize(tensor.n_heads());
    for a in &mut acc {
        *a = *a / k;
    }
    Matrix::from_vec(n, n, acc)
}

/// Element-wise mean of equally shaped matrices.
pub fn mean_matrices<T: Real>(ms: &[Matrix<T>]) -> Result<Matrix<T>> {
    let first = ms.first().ok_or_else(|| Error::Invalid("no matrices to average".into()))?;
    let (r, c) = (first.rows(), first.cols());
    let mut acc = Matrix::<T>::zeros(r, c);
    for m in ms {
        if m.rows() != r || m.cols() != c {
            return Err(Error::DimensionMismatch(format!("{}x{} vs {r}x{c}", m.rows(), m.cols())));
        }
        for i in 0..r {
            for (a, &x) in acc.row_mut(i).iter_mut().zip(m.row(i)) {
                *a = *a + x;
            }
        }
    }
    let k = T::of_usize(ms.len());
    Ok(acc.map(|x| x / k))
}

/// Heads-averaged, word-aligned sentence attention of one layer, before any
/// renormalization: BOS dropped for plain runs, sentence span kept for
/// prefixed runs.
pub fn layer_sentence_matrix<T: Real>(s: &SentenceAttention, layer: usize) -> Result<Matrix<T>> {
    let avg = heads_average(&s.tensor, layer)?;
    let aligned = word_align(&avg, &s.token_map)?;
    if aligned.slots.iter().any(|w| w.role == SpanRole::Prefix) {
        restrict_sentence_span(&aligned)
    } else {
        Ok(aligned.drop_bos()?.into_matrix())
    }
}

/// Heads-averaged raw word attention of one layer (plain runs).
pub fn layer_raw<T: Real>(s: &SentenceAttention, layer: usize) -> Result<WordAttention<T, RawAfterBosDrop>> {
    let avg = heads_average(&s.tensor, layer)?;
    Ok(word_align(&avg, &s.token_map)?.drop_bos()?.with_labels(layer, None))
}

/// Raw word attention of a single head (plain runs).
pub fn head_raw<T: Real>(s: &SentenceAttention, layer: usize, head: usize) -> Result<WordAttention<T, RawAfterBosDrop>> {
    if layer >= s.tensor.n_layers() {
        return Err(Error::LayerOutOfRange { layer, n_layers: s.tensor.n_layers() });
    }
    if head >= s.tensor.n_heads() {
        return Err(Error::Invalid(format!("head {head} out of range for {} heads", s.tensor.n_heads())));
    }
    let m = s.tensor.head_matrix(layer, head);
    Ok(word_align(&m, &s.token_map)?.drop_bos()?.with_labels(layer, Some(head)))
}

impl<T: Real, N: NormPolicy> WordAttention<T, N> {
    fn with_labels(mut self, layer: usize, head: Option<usize>) -> Self {
        self.layer = Some(layer);
        self.head = head;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus_io::TokenSlot;

    fn m(rows: &[&[f64]]) -> Matrix<f64> {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn identity_map_is_identity() {
        let a = m(&[&[1.0, 0.0, 0.0], &[0.3, 0.7, 0.0], &[0.2, 0.3, 0.5]]);
        let map = TokenMap::plain(&[1, 1]);
        assert_eq!(word_align(&a, &map).unwrap().matrix, a);
    }

    #[test]
    fn split_word_hand_example() {
        // t0 -> w0, t1 and t2 -> w1, no BOS
        let a = m(&[&[1.0, 0.0, 0.0], &[0.4, 0.6, 0.0], &[0.2, 0.3, 0.5]]);
        let map = TokenMap::new(vec![TokenSlot::sentence(0), TokenSlot::sentence(1), TokenSlot::sentence(1)]);
        let w = word_align(&a, &map).unwrap().matrix;
        let expected = m(&[&[1.0, 0.0], &[0.3, 0.7]]);
        assert!(w.max_abs_diff(&expected) < 1e-15, "{w:?}");
    }

    #[test]
    fn map_length_mismatch() {
        let a = m(&[&[1.0, 0.0], &[0.5, 0.5]]);
        assert!(matches!(word_align(&a, &TokenMap::plain(&[2])), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn drop_bos_examples() {
        let w = drop_bos(&m(&[&[1.0, 0.0], &[0.9, 0.1]])).unwrap();
        assert_eq!(w.matrix().to_rows(), vec![vec![0.1]]);
        assert_eq!(w.normalization(), Normalization::RawAfterBosDrop);
        assert!(drop_bos(&m(&[&[1.0]])).is_err());
    }

    #[test]
    fn renormalize_examples() {
        assert_eq!(renormalize_rows(&m(&[&[0.5]])).unwrap().to_rows(), vec![vec![1.0]]);
        let r = renormalize_rows(&m(&[&[0.2, 0.0], &[0.1, 0.3]])).unwrap();
        assert!(r.max_abs_diff(&m(&[&[1.0, 0.0], &[0.25, 0.75]])) < 1e-15);
        let s = m(&[&[1.0, 0.0], &[0.25, 0.75]]);
        assert!(renormalize_rows(&s).unwrap().max_abs_diff(&s) < 1e-12);
        assert!(matches!(renormalize_rows(&m(&[&[1.0, 0.0], &[0.0, 0.0]])), Err(Error::DegenerateRow(1))));
    }

    #[test]
    fn empty_prefix_matches_plain_pipeline() {
        let a = m(&[&[1.0, 0.0, 0.0, 0.0], &[0.6, 0.4, 0.0, 0.0], &[0.5, 0.2, 0.3, 0.0], &[0.4, 0.1, 0.1, 0.4]]);
        let plain = TokenMap::plain(&[1, 2]);
        let prefixed = TokenMap::prefixed(&[], &[1, 2]);
        let via_plain = drop_bos(&word_align(&a, &plain).unwrap().matrix).unwrap().renormalize().unwrap();
        let via_span = extract_sentence_span(&word_align(&a, &prefixed).unwrap()).unwrap();
        assert_eq!(via_plain.matrix(), via_span.matrix());
    }

    #[test]
    fn span_extraction_hand_example() {
        // BOS, prefix word (1 token), sentence words w0 (1 token), w1 (2 tokens)
        let a = m(&[
            &[1.0, 0.0, 0.0, 0.0, 0.0],
            &[0.5, 0.5, 0.0, 0.0, 0.0],
            &[0.4, 0.2, 0.4, 0.0, 0.0],
            &[0.3, 0.1, 0.2, 0.4, 0.0],
            &[0.2, 0.2, 0.2, 0.2, 0.2],
        ]);
        let map = TokenMap::prefixed(&[1], &[1, 2]);
        let w = extract_sentence_span(&word_align(&a, &map).unwrap()).unwrap();
        // w0 row: [0.4] -> [1]
        // w1 row: tokens 3,4 -> to w0: mean(0.2,0.2)=0.2, to w1: mean(0.4, 0.4)=0.4 -> [1/3, 2/3]
        let expected = m(&[&[1.0, 0.0], &[1.0 / 3.0, 2.0 / 3.0]]);
        assert!(w.matrix().max_abs_diff(&expected) < 1e-15, "{:?}", w.matrix());
    }

    #[test]
    fn empty_span_rejected() {
        let map = TokenMap::new(vec![TokenSlot::BOS, TokenSlot::prefix(0)]);
        let a = m(&[&[1.0, 0.0], &[0.5, 0.5]]);
        assert!(extract_sentence_span(&word_align(&a, &map).unwrap()).is_err());
    }

    #[test]
    fn heads_average_examples() {
        let mut t = AttentionTensor::zeros(1, 2, 2);
        t.head_mut(0, 0).copy_from_slice(&[1.0, 0.0, 1.0, 0.0]);
        t.head_mut(0, 1).copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        let avg: Matrix<f64> = heads_average(&t, 0).unwrap();
        assert_eq!(avg.to_rows(), vec![vec![1.0, 0.0], vec![0.5, 0.5]]);
        assert!(matches!(heads_average::<f64>(&t, 1), Err(Error::LayerOutOfRange { .. })));

        let mut same = AttentionTensor::zeros(1, 3, 2);
        for h in 0..3 {
            same.head_mut(0, h).copy_from_slice(&[1.0, 0.0, 0.25, 0.75]);
        }
        assert_eq!(heads_average::<f64>(&same, 0).unwrap(), same.head_matrix(0, 0));
    }

    #[test]
    fn from_stochastic_checks() {
        assert!(WordAttention::<f64, RowRenormalized>::from_stochastic(m(&[&[1.0, 0.0], &[0.5, 0.5]])).is_ok());
        assert!(WordAttention::<f64, RowRenormalized>::from_stochastic(m(&[&[0.5, 0.5], &[0.5, 0.5]])).is_err());
        assert!(WordAttention::<f64, RowRenormalized>::from_stochastic(m(&[&[1.0, 0.0], &[0.5, 0.4]])).is_err());
    }
}
