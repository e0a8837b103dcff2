//! `gaze-attn synth`: writes a complete synthetic workspace, including a
//! `config.toml` that the analysis commands can run on directly.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use gaze_attn::corpus_io::{
    write_attention, write_saccade, Condition, NOISE_PREFIX, PARAPHRASE_PREFIX, TRANSLATE_PREFIX,
};
use gaze_attn::synth::{derive_prefixed_run, gen_attention_run, gen_saccade, subject_bundles, Structure, SynthSpec};
use serde::{Deserialize, Serialize};

use crate::config::{AnalysisConfig, Options, Pair, RunEntry, SensitivityEntry};
use crate::usage;

#[derive(Clone, Debug, Deserialize, Serialize)]
pub struct SynthFile {
    #[serde(flatten)]
    pub spec: SynthSpec,
    #[serde(default)]
    pub workspace: WorkspaceOptions,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkspaceOptions {
    /// Multiplier applied to planted subject vectors before rounding to counts.
    pub saccade_scale: f64,
    /// When set, a second model `<name>-ref` shares the corpus, draws its
    /// attention from this seed and forms the reference pair with the first.
    pub reference_seed: Option<u64>,
    pub prefixed: Vec<PrefixedRun>,
}

impl Default for WorkspaceOptions {
    fn default() -> Self {
        Self { saccade_scale: 1000.0, reference_seed: None, prefixed: Vec::new() }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct PrefixedRun {
    /// `translate`, `paraphrase`, `noise` or `custom:<prefix text>`.
    pub condition: String,
    #[serde(default)]
    pub perturbed_layers: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
}

pub fn parse_condition(name: &str) -> anyhow::Result<Condition> {
    Ok(match name {
        "translate" => Condition::InstructionPrefixed { prefix: TRANSLATE_PREFIX.into() },
        "paraphrase" => Condition::InstructionPrefixed { prefix: PARAPHRASE_PREFIX.into() },
        "noise" => Condition::NoisePrefixed { prefix: NOISE_PREFIX.into() },
        other => match other.strip_prefix("custom:") {
            Some(text) if !text.trim().is_empty() => Condition::InstructionPrefixed { prefix: text.into() },
            _ => return Err(usage(format!("unknown condition {other:?}"))),
        },
    })
}

pub fn cmd_synth(spec_path: &Path, out: &Path) -> anyhow::Result<()> {
    let text = fs::read_to_string(spec_path).with_context(|| format!("reading {}", spec_path.display()))?;
    let file: SynthFile = toml::from_str(&text).map_err(|e| usage(format!("parsing {}: {e}", spec_path.display())))?;
    file.spec.check().map_err(|e| usage(e.to_string()))?;
    let spec = &file.spec;
    let ws = &file.workspace;

    let main = gen_attention_run(spec)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    main.corpus.write(out.join("corpus.json"))?;

    let run_dir = |model: &str, cond: &str| PathBuf::from("runs").join(format!("{model}__{cond}"));
    let mut runs = vec![RunEntry { model: spec.model_name.clone(), condition: "plain".into(), path: run_dir(&spec.model_name, "plain") }];
    write_attention(&main.run, out.join(&runs[0].path))?;

    let mut reference = None;
    let mut pairs = Vec::new();
    if let Some(seed) = ws.reference_seed {
        let ref_spec = SynthSpec { attention_seed: Some(seed), model_name: format!("{}-ref", spec.model_name), ..spec.clone() };
        let r = gen_attention_run(&ref_spec)?;
        let path = run_dir(&ref_spec.model_name, "plain");
        write_attention(&r.run, out.join(&path))?;
        runs.push(RunEntry { model: ref_spec.model_name.clone(), condition: "plain".into(), path });
        let pair = Pair { a: spec.model_name.clone(), b: ref_spec.model_name };
        reference = Some(pair.clone());
        pairs.push(pair);
    }

    let mut sensitivity = Vec::new();
    for p in &ws.prefixed {
        let cond = parse_condition(&p.condition)?;
        let run = derive_prefixed_run(&main.run, cond, &p.perturbed_layers, p.seed)?;
        let label = p.condition.replace(':', "_").replace(|c: char| !c.is_ascii_alphanumeric() && c != '_', "-");
        let path = run_dir(&spec.model_name, &label);
        write_attention(&run, out.join(&path))?;
        runs.push(RunEntry { model: spec.model_name.clone(), condition: p.condition.clone(), path });
        sensitivity.push(SensitivityEntry { model: spec.model_name.clone(), condition: p.condition.clone() });
    }

    let bundles = match &spec.structure {
        Structure::LinearCombo { .. } => subject_bundles(&main.subjects, &main.corpus, ws.saccade_scale)?,
        _ => gen_saccade(spec)?,
    };
    let sacc = out.join("saccades");
    fs::create_dir_all(&sacc).with_context(|| format!("creating {}", sacc.display()))?;
    for b in &bundles {
        write_saccade(b, sacc.join(format!("{}.json", b.subject_id)))?;
    }

    let cfg = AnalysisConfig {
        corpus: Some("corpus.json".into()),
        saccade_dir: Some("saccades".into()),
        metrics: None,
        out: Some("reports".into()),
        runs,
        reference,
        pairs,
        sensitivity,
        options: Options::default(),
    };
    let body = toml::to_string(&cfg).context("serializing workspace config")?;
    fs::write(out.join("config.toml"), body).context("writing config.toml")?;
    Ok(())
}
