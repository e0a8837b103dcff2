use serde::{Deserialize, Serialize};

use super::{AttentionRun, Cell, Corpus, ReportTable};

/// Row sums over the causal support must be within this of 1.
pub const ROW_SUM_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub severity: Severity,
    pub location: String,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn push(&mut self, severity: Severity, location: impl Into<String>, message: impl Into<String>) {
        self.findings.push(Finding { severity, location: location.into(), message: message.into() });
    }

    pub fn error(&mut self, location: impl Into<String>, message: impl Into<String>) {
        self.push(Severity::Error, location, message);
    }

    pub fn warning(&mut self, location: impl Into<String>, message: impl Into<String>) {
        self.push(Severity::Warning, location, message);
    }

    pub fn is_empty(&self) -> bool {
        self.findings.is_empty()
    }

    pub fn has_errors(&self) -> bool {
        self.findings.iter().any(|f| f.severity == Severity::Error)
    }

    pub fn errors(&self) -> impl Iterator<Item = &Finding> {
        self.findings.iter().filter(|f| f.severity == Severity::Error)
    }

    pub fn warnings(&self) -> impl Iterator<Item = &Finding> {
        self.findings.iter().filter(|f| f.severity == Severity::Warning)
    }

    pub fn extend(&mut self, other: ValidationReport) {
        self.findings.extend(other.findings);
    }

    pub fn to_table(&self) -> ReportTable {
        let mut t = ReportTable::new(["severity", "location", "message"]);
        for f in &self.findings {
            let sev = match f.severity {
                Severity::Error => "error",
                Severity::Warning => "warning",
            };
            t.push(vec![Cell::from(sev), Cell::from(f.location.as_str()), Cell::from(f.message.as_str())]);
        }
        t
    }
}

/// Checks every attention-run invariant plus consistency with `corpus`.
/// Problems are returned as findings, never raised.
pub fn validate_run(run: &AttentionRun, corpus: &Corpus) -> ValidationReport {
    let mut report = ValidationReport::default();
    let model = run.meta.name.as_str();
    for p in run.meta.problems() {
        report.error(format!("{model}/meta"), p);
    }
    if run.condition.is_prefixed() && run.condition.prefix().is_some_and(str::is_empty) {
        report.warning(format!("{model}/condition"), "prefixed condition with empty prefix text");
    }

    for record in corpus.records() {
        if !run.sentences.contains_key(&record.sentence_id) {
            report.error(format!("{model}/{}", record.sentence_id), format!("missing sentence {}", record.sentence_id));
        }
    }

    for (id, s) in &run.sentences {
        let loc = format!("{model}/{id}");
        let Some(record) = corpus.get(id) else {
            report.warning(&loc, format!("sentence {id} is not in the corpus"));
            continue;
        };
        let t = &s.tensor;
        if t.n_layers() != run.meta.n_layers || t.n_heads() != run.meta.n_heads {
            report.error(
                &loc,
                format!(
                    "dimension mismatch: tensor is {}x{} layers/heads, meta says {}x{}",
                    t.n_layers(),
                    t.n_heads(),
                    run.meta.n_layers,
                    run.meta.n_heads
                ),
            );
        }
        if t.n_tok() != s.token_map.len() {
            report.error(&loc, format!("dimension mismatch: {} tokens in map, {} in tensor", s.token_map.len(), t.n_tok()));
            continue;
        }
        for p in s.token_map.problems(run.condition.is_prefixed()) {
            report.error(&loc, p);
        }
        let n_words = s.token_map.n_sentence_words();
        if n_words != record.n_words {
            report.error(&loc, format!("token map covers {n_words} words, corpus sentence has {}", record.n_words));
        }
        check_payload(&mut report, &loc, t);
    }
    report
}

fn check_payload(report: &mut ValidationReport, loc: &str, t: &super::AttentionTensor) {
    let n = t.n_tok();
    for layer in 0..t.n_layers() {
        for head in 0..t.n_heads() {
            let block = t.head(layer, head);
            let mut negative = 0usize;
            let mut non_finite = 0usize;
            let mut non_causal = 0usize;
            let mut worst: Option<(usize, f64)> = None;
            for i in 0..n {
                let row = &block[i * n..(i + 1) * n];
                for (j, &x) in row.iter().enumerate() {
                    if !x.is_finite() {
                        non_finite += 1;
                    } else if x < 0.0 {
                        negative += 1;
                    } else if j > i && x != 0.0 {
                        non_causal += 1;
                    }
                }
                let sum: f64 = row[..=i].iter().map(|&x| f64::from(x)).sum();
                let dev = (sum - 1.0).abs();
                if dev > ROW_SUM_TOLERANCE && worst.is_none_or(|(_, d)| dev > d) {
                    worst = Some((i, sum));
                }
            }
            let at = format!("{loc}/layer{layer}/head{head}");
            if non_finite > 0 {
                report.error(&at, format!("{non_finite} non-finite entries"));
            }
            if negative > 0 {
                report.error(&at, format!("{negative} negative entries"));
            }
            if non_causal > 0 {
                report.error(&at, format!("{non_causal} nonzero entries above the diagonal (non-causal attention)"));
            }
            if let Some((row, sum)) = worst {
                report.warning(&at, format!("row-sum tolerance exceeded: row {row} sums to {sum}"));
            }
        }
    }
}
