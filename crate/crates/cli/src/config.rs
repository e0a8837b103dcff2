//! Analysis config: one TOML file naming every input.
//!
//! Relative paths resolve against the directory holding the config file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use gaze_attn::divergence::{DivergenceMetric, DivergenceOptions, QuarterAggregation, KL_FLOOR};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub saccade_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub runs: Vec<RunEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<Pair>,
    /// Model pairs to compare on the plain condition.
    #[serde(default)]
    pub pairs: Vec<Pair>,
    /// Prefixed runs to compare against the same model's plain run.
    #[serde(default)]
    pub sensitivity: Vec<SensitivityEntry>,
    #[serde(default)]
    pub options: Options,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunEntry {
    pub model: String,
    #[serde(default = "plain")]
    pub condition: String,
    pub path: PathBuf,
}

fn plain() -> String {
    "plain".into()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pair {
    pub a: String,
    pub b: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensitivityEntry {
    pub model: String,
    pub condition: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Options {
    pub metric: DivergenceMetric,
    pub quarter_aggregation: QuarterAggregation,
    /// Floor for KL terms; `0` disables flooring.
    pub floor: f64,
    pub alpha: f64,
    pub n_tests: usize,
    /// Models entering the scaling fit; empty means every model in the
    /// metrics sidecar with a parameter count.
    pub scaling_models: Vec<String>,
    /// Parameter counts at which the scaling fit is evaluated.
    pub extrapolate_to: Vec<f64>,
}

impl Default for Options {
    fn default() -> Self {
        Self {
            metric: DivergenceMetric::SymmetrizedKl,
            quarter_aggregation: QuarterAggregation::MeanMatrices,
            floor: KL_FLOOR,
            alpha: 0.05,
            n_tests: 1,
            scaling_models: Vec::new(),
            extrapolate_to: Vec::new(),
        }
    }
}

impl Options {
    pub fn divergence(&self) -> DivergenceOptions {
        DivergenceOptions {
            metric: self.metric,
            floor: (self.floor > 0.0).then_some(self.floor),
            quarter_aggregation: self.quarter_aggregation,
        }
    }
}

impl AnalysisConfig {
    /// Reads and checks a config; paths come back absolute.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: AnalysisConfig = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.out.get_or_insert_with(|| PathBuf::from("reports"));
        cfg.resolve(&base);
        cfg.check()?;
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.corpus.as_mut().map(fix);
        self.saccade_dir.as_mut().map(fix);
        self.metrics.as_mut().map(fix);
        self.out.as_mut().map(fix);
        for r in &mut self.runs {
            fix(&mut r.path);
        }
    }

    fn check(&self) -> anyhow::Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for r in &self.runs {
            if !seen.insert((r.model.as_str(), r.condition.as_str())) {
                bail!("model {} listed twice for condition {}", r.model, r.condition);
            }
        }
        let known = |m: &str, c: &str| self.runs.iter().any(|r| r.model == m && r.condition == c);
        for p in self.pairs.iter().chain(&self.reference) {
            for m in [&p.a, &p.b] {
                if !known(m, "plain") {
                    bail!("pair refers to model {m} without a plain run");
                }
            }
        }
        for s in &self.sensitivity {
            if !known(&s.model, "plain") || !known(&s.model, &s.condition) {
                bail!("sensitivity entry {}/{} needs both a plain and a {} run", s.model, s.condition, s.condition);
            }
        }
        if !(self.options.alpha > 0.0 && self.options.alpha <= 1.0) || self.options.n_tests == 0 {
            bail!("options.alpha must be in (0, 1] and options.n_tests at least 1");
        }
        Ok(())
    }

    pub fn run(&self, model: &str, condition: &str) -> Option<&RunEntry> {
        self.runs.iter().find(|r| r.model == model && r.condition == condition)
    }

    pub fn plain_runs(&self) -> impl Iterator<Item = &RunEntry> {
        self.runs.iter().filter(|r| r.condition == "plain")
    }

    /// Paths that must exist before any command runs.
    pub fn missing_paths(&self) -> Vec<PathBuf> {
        let mut paths: Vec<&PathBuf> = self.corpus.iter().collect();
        paths.extend(&self.saccade_dir);
        paths.extend(&self.metrics);
        paths.extend(self.runs.iter().map(|r| &r.path));
        paths.into_iter().filter(|p| !p.exists()).cloned().collect()
    }
}
