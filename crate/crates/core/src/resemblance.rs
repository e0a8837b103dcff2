//! Human resemblance of model attention, the inter-subject ceiling, and
//! reliance on trivial attention patterns.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::{head_raw, layer_raw};
use crate::corpus_io::{AttentionRun, Cell, Corpus, Group, ReportTable, SaccadeBundle};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::num::{mean, std_population, Real};
use crate::regression::{concat_sentences, lower_tri_flatten, DesignMatrix, FitResult, LeastSquares};

/// A subject's saccade counts, lower triangles flattened and concatenated in
/// ascending sentence order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectVector<T> {
    pub subject_id: String,
    pub group: Group,
    pub vector: Vec<T>,
}

impl<T: Real> SubjectVector<T> {
    fn is_constant(&self) -> bool {
        std_population(&self.vector) == T::zero()
    }
}

pub fn build_subject_vector<T: Real>(bundle: &SaccadeBundle, corpus: &Corpus) -> Result<SubjectVector<T>> {
    let mut parts = Vec::with_capacity(corpus.len());
    for rec in corpus.records() {
        let m = bundle.sentences.get(&rec.sentence_id).ok_or_else(|| {
            Error::MissingSentence(format!("{} in saccades of subject {}", rec.sentence_id, bundle.subject_id))
        })?;
        if m.rows() != rec.n_words || m.cols() != rec.n_words {
            return Err(Error::DimensionMismatch(format!(
                "subject {} sentence {}: {}x{} saccade matrix for {} words",
                bundle.subject_id,
                rec.sentence_id,
                m.rows(),
                m.cols(),
                rec.n_words
            )));
        }
        parts.push(lower_tri_flatten(&m.map(|c| T::of_usize(c as usize)))?);
    }
    Ok(SubjectVector { subject_id: bundle.subject_id.clone(), group: bundle.group, vector: concat_sentences(&parts) })
}

/// One layer's per-head attention features, one column per head.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerDesign<T> {
    pub model: String,
    pub layer: usize,
    pub design: DesignMatrix<T>,
}

fn check_layer(run: &AttentionRun, layer: usize) -> Result<()> {
    if layer >= run.meta.n_layers {
        return Err(Error::LayerOutOfRange { layer, n_layers: run.meta.n_layers });
    }
    if run.condition.is_prefixed() {
        return Err(Error::Invalid(format!("resemblance needs a plain run, got {}", run.condition.label())));
    }
    Ok(())
}

fn check_words(n: usize, corpus_words: usize, id: &impl std::fmt::Display) -> Result<()> {
    if n != corpus_words {
        return Err(Error::DimensionMismatch(format!("sentence {id}: {n} attention words vs {corpus_words} corpus words")));
    }
    Ok(())
}

/// Raw (not renormalized) per-head word attention of `layer`, flattened.
pub fn build_layer_design<T: Real>(run: &AttentionRun, corpus: &Corpus, layer: usize) -> Result<LayerDesign<T>> {
    check_layer(run, layer)?;
    let columns = (0..run.meta.n_heads)
        .into_par_iter()
        .map(|head| {
            let mut parts = Vec::with_capacity(corpus.len());
            for rec in corpus.records() {
                let wa = head_raw::<T>(run.sentence(&rec.sentence_id)?, layer, head)?;
                check_words(wa.n_words(), rec.n_words, &rec.sentence_id)?;
                parts.push(lower_tri_flatten(wa.matrix())?);
            }
            Ok(concat_sentences(&parts))
        })
        .collect::<Result<Vec<_>>>()?;
    let names = (0..run.meta.n_heads).map(|h| format!("head{h}")).collect();
    Ok(LayerDesign { model: run.meta.name.clone(), layer, design: DesignMatrix::from_columns(&columns, names)? })
}

/// Heads-averaged raw word attention of `layer`, flattened.
pub fn layer_vector<T: Real>(run: &AttentionRun, corpus: &Corpus, layer: usize) -> Result<Vec<T>> {
    check_layer(run, layer)?;
    let mut parts = Vec::with_capacity(corpus.len());
    for rec in corpus.records() {
        let wa = layer_raw::<T>(run.sentence(&rec.sentence_id)?, layer)?;
        check_words(wa.n_words(), rec.n_words, &rec.sentence_id)?;
        parts.push(lower_tri_flatten(wa.matrix())?);
    }
    Ok(concat_sentences(&parts))
}

/// Splits subjects into usable ones, sorted by id, and the ids of
/// constant-vector subjects that were dropped.
fn usable_subjects<'a, T: Real>(subjects: impl IntoIterator<Item = &'a SubjectVector<T>>) -> (Vec<&'a SubjectVector<T>>, Vec<String>) {
    let mut kept = Vec::new();
    let mut excluded = Vec::new();
    for s in subjects {
        if s.is_constant() {
            log::warn!("subject {} has a constant saccade vector; excluded", s.subject_id);
            excluded.push(s.subject_id.clone());
        } else {
            kept.push(s);
        }
    }
    kept.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));
    excluded.sort();
    (kept, excluded)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ceiling<T> {
    pub group: Group,
    pub r2_inter: T,
    /// `(subject_id, R²)` in ascending id order.
    pub per_subject: Vec<(String, T)>,
    pub excluded: Vec<String>,
}

/// Mean R² of regressing each subject on the group-mean vector.
pub fn intersubject_ceiling<T: Real>(subjects: &[SubjectVector<T>]) -> Result<Ceiling<T>> {
    let Some(first) = subjects.first() else {
        return Err(Error::Invalid("ceiling needs at least 2 subjects, got 0".into()));
    };
    let group = first.group;
    if let Some(s) = subjects.iter().find(|s| s.group != group) {
        return Err(Error::Invalid(format!("subject {} is in {}, expected {group}", s.subject_id, s.group)));
    }
    let (kept, excluded) = usable_subjects(subjects);
    if kept.len() < 2 {
        return Err(Error::Invalid(format!("ceiling needs at least 2 subjects, got {}", kept.len())));
    }
    let len = kept[0].vector.len();
    if let Some(s) = kept.iter().find(|s| s.vector.len() != len) {
        return Err(Error::DimensionMismatch(format!("subject {} has {} entries, expected {len}", s.subject_id, s.vector.len())));
    }
    let k = T::of_usize(kept.len());
    let mut group_mean = vec![T::zero(); len];
    for s in &kept {
        for (m, &v) in group_mean.iter_mut().zip(&s.vector) {
            *m = *m + v;
        }
    }
    group_mean.iter_mut().for_each(|m| *m = *m / k);
    let design = DesignMatrix::from_columns(&[group_mean], vec!["group_mean".into()])?;
    let ls = LeastSquares::new(&design)?;
    let per_subject = kept
        .par_iter()
        .map(|s| Ok((s.subject_id.clone(), ls.fit(&s.vector)?.r2)))
        .collect::<Result<Vec<_>>>()?;
    let r2: Vec<T> = per_subject.iter().map(|(_, r)| *r).collect();
    Ok(Ceiling { group, r2_inter: mean(&r2), per_subject, excluded })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResemblanceScore<T> {
    pub model: String,
    pub group: Group,
    /// Mean R² over subjects, per layer.
    pub layer_means: Vec<T>,
    /// `per_subject[layer][k]` is the R² of `subjects[k]`.
    pub per_subject: Vec<Vec<T>>,
    pub subjects: Vec<String>,
    pub excluded: Vec<String>,
    pub argmax_layer: usize,
    pub r2_model: T,
    pub r2_inter: Option<T>,
    pub ratio_percent: Option<T>,
}

impl<T: Real> ResemblanceScore<T> {
    /// Replaces the ceiling, e.g. with one computed over a larger subject pool.
    pub fn with_ceiling(mut self, r2_inter: T) -> Self {
        self.r2_inter = Some(r2_inter);
        self.ratio_percent = (r2_inter > T::zero()).then(|| T::lit(100.0) * self.r2_model / r2_inter);
        self
    }
}

/// Index of the largest value; the first one wins ties.
fn argmax<T: Real>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Regresses every subject of `group` on each layer's per-head attention.
/// The ceiling is filled in when at least two usable subjects remain.
pub fn model_resemblance<T: Real>(
    run: &AttentionRun,
    corpus: &Corpus,
    subjects: &[SubjectVector<T>],
    group: Group,
) -> Result<ResemblanceScore<T>> {
    let in_group: Vec<SubjectVector<T>> = subjects.iter().filter(|s| s.group == group).cloned().collect();
    let (kept, excluded) = usable_subjects(&in_group);
    if kept.is_empty() {
        return Err(Error::Invalid(format!("no usable subjects in group {group}")));
    }
    let expected = corpus.lower_tri_len();
    if let Some(s) = kept.iter().find(|s| s.vector.len() != expected) {
        return Err(Error::DimensionMismatch(format!(
            "subject {} has {} entries, corpus needs {expected}",
            s.subject_id,
            s.vector.len()
        )));
    }
    let per_subject = (0..run.meta.n_layers)
        .into_par_iter()
        .map(|layer| {
            let ld = build_layer_design::<T>(run, corpus, layer)?;
            let ls = LeastSquares::new(&ld.design)?;
            kept.iter().map(|s| Ok(ls.fit(&s.vector)?.r2)).collect::<Result<Vec<T>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let layer_means: Vec<T> = per_subject.iter().map(|r| mean(r)).collect();
    let argmax_layer = argmax(&layer_means);
    let score = ResemblanceScore {
        model: run.meta.name.clone(),
        group,
        r2_model: layer_means[argmax_layer],
        layer_means,
        per_subject,
        subjects: kept.iter().map(|s| s.subject_id.clone()).collect(),
        excluded,
        argmax_layer,
        r2_inter: None,
        ratio_percent: None,
    };
    if kept.len() >= 2 {
        let ceiling = intersubject_ceiling(&in_group)?;
        Ok(score.with_ceiling(ceiling.r2_inter))
    } else {
        Ok(score)
    }
}

/// Context-free binary attention patterns for an `n`-word sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct TrivialPatterns<T> {
    pub first_word: Matrix<T>,
    pub prev_word: Matrix<T>,
    pub self_word: Matrix<T>,
}

impl<T: Real> TrivialPatterns<T> {
    pub fn new(n_words: usize) -> Result<Self> {
        if n_words == 0 {
            return Err(Error::Invalid("trivial patterns need at least one word".into()));
        }
        let mut first_word = Matrix::zeros(n_words, n_words);
        let mut prev_word = Matrix::zeros(n_words, n_words);
        let mut self_word = Matrix::zeros(n_words, n_words);
        for i in 0..n_words {
            first_word.row_mut(i)[0] = T::one();
            self_word.row_mut(i)[i] = T::one();
            if i > 0 {
                prev_word.row_mut(i)[i - 1] = T::one();
            }
        }
        Ok(Self { first_word, prev_word, self_word })
    }
}

pub const TRIVIAL_FEATURES: [&str; 3] = ["first_word", "prev_word", "self"];

/// The three patterns flattened over the corpus, as regressors.
pub fn trivial_design<T: Real>(corpus: &Corpus) -> Result<DesignMatrix<T>> {
    let mut cols: [Vec<T>; 3] = Default::default();
    for rec in corpus.records() {
        let p = TrivialPatterns::<T>::new(rec.n_words)?;
        cols[0].extend(lower_tri_flatten(&p.first_word)?);
        cols[1].extend(lower_tri_flatten(&p.prev_word)?);
        cols[2].extend(lower_tri_flatten(&p.self_word)?);
    }
    DesignMatrix::from_columns(&cols, TRIVIAL_FEATURES.iter().map(|s| s.to_string()).collect())
}

/// Fits `target` on the trivial-pattern design of `corpus`.
pub fn trivial_reliance<T: Real>(target: &[T], corpus: &Corpus) -> Result<FitResult<T>> {
    let design = trivial_design(corpus)?;
    if target.len() != design.rows() {
        return Err(Error::DimensionMismatch(format!("target has {} entries, corpus needs {}", target.len(), design.rows())));
    }
    LeastSquares::new(&design)?.fit(target)
}

/// One fit per layer, on heads-averaged raw word attention.
pub fn model_trivial_reliance<T: Real>(run: &AttentionRun, corpus: &Corpus) -> Result<Vec<FitResult<T>>> {
    let ls = LeastSquares::new(&trivial_design::<T>(corpus)?)?;
    (0..run.meta.n_layers)
        .into_par_iter()
        .map(|layer| ls.fit(&layer_vector(run, corpus, layer)?))
        .collect()
}

/// One fit per subject, in ascending subject id order.
pub fn subject_trivial_reliance<T: Real>(subjects: &[SubjectVector<T>], corpus: &Corpus) -> Result<Vec<(String, FitResult<T>)>> {
    let ls = LeastSquares::new(&trivial_design::<T>(corpus)?)?;
    let mut sorted: Vec<&SubjectVector<T>> = subjects.iter().collect();
    sorted.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));
    sorted.par_iter().map(|s| Ok((s.subject_id.clone(), ls.fit(&s.vector)?))).collect()
}

pub const LAYER_COLUMNS: [&str; 5] = ["model", "group", "layer", "mean_r2", "n_subjects"];
pub const SUMMARY_COLUMNS: [&str; 6] = ["model", "group", "r2_model", "r2_inter", "ratio_percent", "argmax_layer"];
pub const CEILING_COLUMNS: [&str; 4] = ["group", "r2_inter", "n_subjects", "n_excluded"];
pub const TRIVIAL_COLUMNS: [&str; 3] = ["entity_kind", "entity_id", "r2"];

pub fn layer_table<T: Real>(scores: &[ResemblanceScore<T>]) -> ReportTable {
    let mut t = ReportTable::new(LAYER_COLUMNS);
    for s in scores {
        for (layer, m) in s.layer_means.iter().enumerate() {
            t.push(vec![
                Cell::from(s.model.as_str()),
                Cell::from(s.group.to_string()),
                Cell::from(layer),
                Cell::from(m.to_f64_lossy()),
                Cell::from(s.subjects.len()),
            ]);
        }
    }
    t
}

pub fn summary_table<T: Real>(scores: &[ResemblanceScore<T>]) -> ReportTable {
    let mut t = ReportTable::new(SUMMARY_COLUMNS);
    for s in scores {
        t.push(vec![
            Cell::from(s.model.as_str()),
            Cell::from(s.group.to_string()),
            Cell::from(s.r2_model.to_f64_lossy()),
            Cell::from(s.r2_inter.map(|x| x.to_f64_lossy())),
            Cell::from(s.ratio_percent.map(|x| x.to_f64_lossy())),
            Cell::from(s.argmax_layer),
        ]);
    }
    t
}

pub fn ceiling_table<T: Real>(ceilings: &[Ceiling<T>]) -> ReportTable {
    let mut t = ReportTable::new(CEILING_COLUMNS);
    for c in ceilings {
        t.push(vec![
            Cell::from(c.group.to_string()),
            Cell::from(c.r2_inter.to_f64_lossy()),
            Cell::from(c.per_subject.len()),
            Cell::from(c.excluded.len()),
        ]);
    }
    t
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntityKind {
    ModelLayer,
    Subject,
}

impl EntityKind {
    pub fn label(self) -> &'static str {
        match self {
            EntityKind::ModelLayer => "model_layer",
            EntityKind::Subject => "subject",
        }
    }
}

/// Rows of `(kind, id, r2)`; model layers are identified as `<model>/<layer>`.
pub fn trivial_table<T: Real>(rows: &[(EntityKind, String, T)]) -> ReportTable {
    let mut t = ReportTable::new(TRIVIAL_COLUMNS);
    for (kind, id, r2) in rows {
        t.push(vec![Cell::from(kind.label()), Cell::from(id.as_str()), Cell::from(r2.to_f64_lossy())]);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus_io::{SentenceId, SentenceRecord};
    use std::collections::BTreeMap;

    fn corpus(lens: &[(&str, usize)]) -> Corpus {
        Corpus::new(
            lens.iter()
                .map(|(id, n)| SentenceRecord::new(id.parse().unwrap(), (0..*n).map(|i| format!("w{i}")).collect()))
                .collect(),
        )
        .unwrap()
    }

    fn bundle(id: &str, group: Group, ms: Vec<(&str, Matrix<u32>)>) -> SaccadeBundle {
        SaccadeBundle {
            subject_id: id.into(),
            group,
            sentences: ms.into_iter().map(|(k, m)| (k.parse::<SentenceId>().unwrap(), m)).collect::<BTreeMap<_, _>>(),
        }
    }

    #[test]
    fn subject_vector_flattens_lower_triangle() {
        let c = corpus(&[("a:1", 2)]);
        let b = bundle("s", Group::L1, vec![("a:1", Matrix::from_rows(&[[0u32, 9], [2, 3]]).unwrap())]);
        let v = build_subject_vector::<f64>(&b, &c).unwrap();
        assert_eq!(v.vector, vec![0.0, 2.0, 3.0]);
    }

    #[test]
    fn subject_vector_follows_corpus_order() {
        let c = corpus(&[("a:2", 1), ("a:10", 1)]);
        let b = bundle(
            "s",
            Group::L1,
            vec![("a:10", Matrix::from_rows(&[[7u32]]).unwrap()), ("a:2", Matrix::from_rows(&[[5u32]]).unwrap())],
        );
        assert_eq!(build_subject_vector::<f64>(&b, &c).unwrap().vector, vec![5.0, 7.0]);
        let bad = bundle("s", Group::L1, vec![("a:2", Matrix::from_rows(&[[5u32]]).unwrap())]);
        assert!(build_subject_vector::<f64>(&bad, &c).is_err());
        let c3 = corpus(&[("a:2", 2), ("a:10", 1)]);
        assert!(build_subject_vector::<f64>(&b, &c3).is_err());
    }

    #[test]
    fn pattern_definitions() {
        let p = TrivialPatterns::<f64>::new(1).unwrap();
        assert_eq!(p.first_word.as_slice(), &[1.0]);
        assert_eq!(p.prev_word.as_slice(), &[0.0]);
        assert_eq!(p.self_word.as_slice(), &[1.0]);
        let p = TrivialPatterns::<f64>::new(3).unwrap();
        assert_eq!(lower_tri_flatten(&p.prev_word).unwrap(), vec![0.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
        for i in 0..3 {
            for j in 0..3 {
                let both = p.first_word[(i, j)] == 1.0 && p.self_word[(i, j)] == 1.0;
                assert_eq!(both, i == 0 && j == 0);
            }
        }
    }

    #[test]
    fn exact_pattern_combination() {
        let c = corpus(&[("a:1", 4), ("a:2", 3)]);
        let d = trivial_design::<f64>(&c).unwrap();
        let target: Vec<f64> = (0..d.rows()).map(|i| 2.0 * d.get(i, 1) + d.get(i, 2)).collect();
        let fit = trivial_reliance(&target, &c).unwrap();
        assert!((fit.r2 - 1.0).abs() < 1e-12);
        assert!(trivial_reliance(&target[1..], &c).is_err());
    }

    fn sv(id: &str, v: Vec<f64>) -> SubjectVector<f64> {
        SubjectVector { subject_id: id.into(), group: Group::L1, vector: v }
    }

    #[test]
    fn ceiling_of_identical_subjects() {
        let v = vec![1.0, 3.0, 2.0, 5.0];
        let c = intersubject_ceiling(&[sv("a", v.clone()), sv("b", v)]).unwrap();
        assert!((c.r2_inter - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ceiling_rejects_small_groups_and_skips_constant_subjects() {
        assert!(intersubject_ceiling(&[sv("a", vec![1.0, 2.0])]).is_err());
        let c = intersubject_ceiling(&[sv("a", vec![1.0, 2.0, 4.0]), sv("b", vec![2.0, 2.0, 2.0]), sv("c", vec![0.0, 2.0, 3.0])])
            .unwrap();
        assert_eq!(c.excluded, vec!["b".to_string()]);
        assert_eq!(c.per_subject.len(), 2);
    }

    #[test]
    fn argmax_prefers_first() {
        assert_eq!(argmax(&[0.5, 0.7, 0.7]), 1);
        assert_eq!(argmax(&[0.2f64]), 0);
    }
}
