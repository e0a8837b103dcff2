use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{write_atomic, Corpus, Group, SaccadeBundle, SentenceId};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleFile {
    subject_id: String,
    group: Group,
    sentences: Vec<SentenceEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SentenceEntry {
    sentence_id: SentenceId,
    n_words: usize,
    matrix: Vec<Vec<i64>>,
}

/// Reads one subject's saccade bundle. When `corpus` is given, every sentence
/// must exist there with the same word count.
pub fn load_saccade(path: impl AsRef<Path>, corpus: Option<&Corpus>) -> Result<SaccadeBundle> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: BundleFile = serde_json::from_str(&text).map_err(|e| Error::Json { path: path.into(), source: e })?;
    let mut sentences = BTreeMap::new();
    for entry in file.sentences {
        let id = entry.sentence_id;
        let n = entry.matrix.len();
        if entry.matrix.iter().any(|row| row.len() != n) {
            let cols = entry.matrix.first().map_or(0, Vec::len);
            return Err(Error::NotSquare(format!("sentence {id} has a {n}x{cols} matrix")));
        }
        if n != entry.n_words {
            return Err(Error::DimensionMismatch(format!(
                "sentence {id} declares n_words={} but matrix is {n}x{n}",
                entry.n_words
            )));
        }
        if let Some(corpus) = corpus {
            let record = corpus.get(&id).ok_or_else(|| Error::UnknownSentence(id.to_string()))?;
            if record.n_words != n {
                return Err(Error::DimensionMismatch(format!(
                    "sentence {id} has {} words in the corpus but a {n}x{n} saccade matrix",
                    record.n_words
                )));
            }
        }
        let mut data = Vec::with_capacity(n * n);
        for (i, row) in entry.matrix.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v < 0 {
                    return Err(Error::NegativeSaccade { sentence_id: id.to_string(), row: i, col: j });
                }
                let v = u32::try_from(v).map_err(|_| Error::Invalid(format!("saccade count {v} too large")))?;
                data.push(v);
            }
        }
        let matrix = Matrix::from_vec(n, n, data)?;
        if sentences.insert(id.clone(), matrix).is_some() {
            return Err(Error::format(path, format!("sentence {id} listed twice")));
        }
    }
    Ok(SaccadeBundle { subject_id: file.subject_id, group: file.group, sentences })
}

pub fn write_saccade(bundle: &SaccadeBundle, path: impl AsRef<Path>) -> Result<()> {
    let file = BundleFile {
        subject_id: bundle.subject_id.clone(),
        group: bundle.group,
        sentences: bundle
            .sentences
            .iter()
            .map(|(id, m)| SentenceEntry {
                sentence_id: id.clone(),
                n_words: m.rows(),
                matrix: m.to_rows().into_iter().map(|r| r.into_iter().map(i64::from).collect()).collect(),
            })
            .collect(),
    };
    let mut bytes = serde_json::to_vec(&file).expect("bundle serializes");
    bytes.push(b'\n');
    write_atomic(path.as_ref(), &bytes)
}

#[derive(Deserialize)]
struct Transition {
    subject_id: String,
    group: Group,
    sentence_id: SentenceId,
    from_word: usize,
    to_word: usize,
}

/// Builds saccade bundles from a long-format transition log.
///
/// The CSV has the header `subject_id,group,sentence_id,from_word,to_word`
/// with one row per eye movement between words (zero-based word indices).
/// Every corpus sentence gets a matrix for every subject, zero-filled where
/// no transitions were logged.
pub fn saccades_from_transitions(reader: impl Read, corpus: &Corpus) -> Result<Vec<SaccadeBundle>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut subjects: BTreeMap<String, (Group, BTreeMap<SentenceId, Matrix<u32>>)> = BTreeMap::new();
    for (line, row) in rdr.deserialize::<Transition>().enumerate() {
        let t = row?;
        let record = corpus.get(&t.sentence_id).ok_or_else(|| Error::UnknownSentence(t.sentence_id.to_string()))?;
        let n = record.n_words;
        if t.from_word >= n || t.to_word >= n {
            return Err(Error::Invalid(format!(
                "transition on data line {} leaves sentence {} ({n} words)",
                line + 1,
                t.sentence_id
            )));
        }
        let entry = subjects.entry(t.subject_id.clone()).or_insert_with(|| (t.group, BTreeMap::new()));
        if entry.0 != t.group {
            return Err(Error::Invalid(format!("subject {} listed in both groups", t.subject_id)));
        }
        let m = entry.1.entry(t.sentence_id).or_insert_with(|| Matrix::filled(n, n, 0u32));
        m[(t.from_word, t.to_word)] += 1;
    }
    Ok(subjects
        .into_iter()
        .map(|(subject_id, (group, mut sentences))| {
            for r in corpus.records() {
                sentences.entry(r.sentence_id.clone()).or_insert_with(|| Matrix::filled(r.n_words, r.n_words, 0));
            }
            SaccadeBundle { subject_id, group, sentences }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus_io::SentenceRecord;

    fn write(dir: &Path, body: &str) -> std::path::PathBuf {
        let p = dir.join("s.json");
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn parses_two_by_two() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            r#"{"subject_id":"s01","group":"L1","sentences":[{"sentence_id":"a:0","n_words":2,"matrix":[[0,1],[2,0]]}]}"#,
        );
        let b = load_saccade(&p, None).unwrap();
        assert_eq!(b.group, Group::L1);
        let m = &b.sentences[&"a:0".parse().unwrap()];
        assert_eq!(m.to_rows(), vec![vec![0, 1], vec![2, 0]]);
    }

    #[test]
    fn rejects_bad_matrices() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            r#"{"subject_id":"s","group":"L2","sentences":[{"sentence_id":"a:0","n_words":2,"matrix":[[0,-1],[2,0]]}]}"#,
        );
        assert!(load_saccade(&p, None).unwrap_err().to_string().contains("negative saccade count"));
        let p = write(
            dir.path(),
            r#"{"subject_id":"s","group":"L2","sentences":[{"sentence_id":"a:0","n_words":2,"matrix":[[0,1],[2,0],[1,1]]}]}"#,
        );
        assert!(load_saccade(&p, None).unwrap_err().to_string().contains("matrix not square"));
    }

    #[test]
    fn checks_against_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = Corpus::new(vec![SentenceRecord::new("a:0".parse().unwrap(), vec!["x".into(), "y".into(), "z".into()])]).unwrap();
        let p = write(
            dir.path(),
            r#"{"subject_id":"s","group":"L1","sentences":[{"sentence_id":"b:0","n_words":1,"matrix":[[0]]}]}"#,
        );
        assert!(matches!(load_saccade(&p, Some(&corpus)), Err(Error::UnknownSentence(_))));
        let p = write(
            dir.path(),
            r#"{"subject_id":"s","group":"L1","sentences":[{"sentence_id":"a:0","n_words":1,"matrix":[[0]]}]}"#,
        );
        assert!(matches!(load_saccade(&p, Some(&corpus)), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn transition_log_counts() {
        let corpus = Corpus::new(vec![
            SentenceRecord::new("a:0".parse().unwrap(), vec!["x".into(), "y".into()]),
            SentenceRecord::new("a:1".parse().unwrap(), vec!["z".into()]),
        ])
        .unwrap();
        let log = "subject_id,group,sentence_id,from_word,to_word\ns1,L2,a:0,1,0\ns1,L2,a:0,1,0\ns1,L2,a:0,0,1\n";
        let bundles = saccades_from_transitions(log.as_bytes(), &corpus).unwrap();
        assert_eq!(bundles.len(), 1);
        assert_eq!(bundles[0].sentences[&"a:0".parse().unwrap()].to_rows(), vec![vec![0, 1], vec![2, 0]]);
        assert_eq!(bundles[0].sentences[&"a:1".parse().unwrap()].to_rows(), vec![vec![0]]);
        let bad = "subject_id,group,sentence_id,from_word,to_word\ns1,L2,a:0,2,0\n";
        assert!(saccades_from_transitions(bad.as_bytes(), &corpus).is_err());
    }

    #[test]
    fn write_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let mut sentences = BTreeMap::new();
        sentences.insert("a:0".parse().unwrap(), Matrix::from_rows(&[[0u32, 3], [1, 0]]).unwrap());
        let b = SaccadeBundle { subject_id: "s9".into(), group: Group::L2, sentences };
        let p = dir.path().join("s9.json");
        write_saccade(&b, &p).unwrap();
        assert_eq!(load_saccade(&p, None).unwrap(), b);
    }
}
