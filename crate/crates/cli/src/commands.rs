//! One function per subcommand. Each loads its inputs, calls the library and
//! writes report tables; nothing here computes a statistic of its own.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use gaze_attn::corpus_io::{
    load_attention, load_metrics, load_saccade, read_report, saccades_from_transitions, validate_run, write_report,
    write_saccade, AttentionRun, Cell, Corpus, Group, MetricsSidecar, ReportFormat, ReportTable, SaccadeBundle,
    ValidationReport,
};
use gaze_attn::divergence::{
    compare_runs, instruction_sensitivity, layerwise_divergence, quarterwise_divergence, Granularity,
};
use gaze_attn::resemblance::{
    build_subject_vector, ceiling_table, intersubject_ceiling, layer_table, model_resemblance, model_trivial_reliance,
    subject_trivial_reliance, summary_table, trivial_table, EntityKind,
};
use gaze_attn::stats::{bonferroni, pearson, scaling_fit, scaling_predict, stats_table, t_test_paired, StatRow};
use gaze_attn::{SubjectVector64, DivergenceReport64};

use crate::config::{AnalysisConfig, Pair};
use crate::usage;

pub struct Ctx {
    pub cfg: AnalysisConfig,
    pub out: PathBuf,
    pub format: ReportFormat,
}

impl Ctx {
    pub fn load(config: &Path, out: Option<PathBuf>, format: ReportFormat) -> anyhow::Result<Self> {
        let cfg = AnalysisConfig::load(config).map_err(|e| usage(format!("{e:#}")))?;
        let missing = cfg.missing_paths();
        if !missing.is_empty() {
            let list: Vec<String> = missing.iter().map(|p| p.display().to_string()).collect();
            return Err(usage(format!("config refers to missing paths: {}", list.join(", "))));
        }
        let out = out.or_else(|| cfg.out.clone()).expect("load fills in out");
        Ok(Self { cfg, out, format })
    }

    fn write(&self, name: &str, table: &ReportTable) -> anyhow::Result<()> {
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        let path = self.out.join(format!("{name}.{}", self.format.extension()));
        write_report(table, &path, self.format)?;
        log::info!("wrote {}", path.display());
        Ok(())
    }

    fn corpus(&self) -> anyhow::Result<Corpus> {
        let path = self.cfg.corpus.as_ref().ok_or_else(|| usage("config has no corpus"))?;
        Ok(Corpus::load(path)?)
    }

    fn attention(&self, model: &str, condition: &str) -> anyhow::Result<AttentionRun> {
        let entry = self
            .cfg
            .run(model, condition)
            .ok_or_else(|| usage(format!("no {condition} run configured for model {model}")))?;
        load_attention(&entry.path).with_context(|| format!("loading run {model}/{condition}"))
    }

    fn saccade_files(&self) -> anyhow::Result<Vec<PathBuf>> {
        let Some(dir) = &self.cfg.saccade_dir else { return Ok(Vec::new()) };
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .with_context(|| format!("listing {}", dir.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        Ok(files)
    }

    fn subjects(&self, corpus: &Corpus) -> anyhow::Result<Vec<SubjectVector64>> {
        if self.cfg.saccade_dir.is_none() {
            return Err(usage("config has no saccade_dir"));
        }
        let mut out = Vec::new();
        for f in self.saccade_files()? {
            let b = load_saccade(&f, Some(corpus))?;
            out.push(build_subject_vector(&b, corpus).with_context(|| format!("saccades in {}", f.display()))?);
        }
        if out.is_empty() {
            bail!("no saccade bundles found");
        }
        Ok(out)
    }

    fn metrics(&self) -> anyhow::Result<MetricsSidecar> {
        let path = self.cfg.metrics.as_ref().ok_or_else(|| usage("config has no metrics sidecar"))?;
        Ok(load_metrics(path)?)
    }
}

pub fn cmd_validate(ctx: &Ctx) -> anyhow::Result<bool> {
    let corpus = ctx.corpus()?;
    let mut report = ValidationReport::default();
    for entry in &ctx.cfg.runs {
        match load_attention(&entry.path) {
            Ok(run) => {
                if run.condition.is_prefixed() != (entry.condition != "plain") {
                    report.error(
                        format!("{}/{}", entry.model, entry.condition),
                        format!("manifest condition is {}", run.condition.label()),
                    );
                }
                report.extend(validate_run(&run, &corpus));
            }
            Err(e) => report.error(entry.path.display().to_string(), e.to_string()),
        }
    }
    for f in ctx.saccade_files()? {
        if let Err(e) = load_saccade(&f, Some(&corpus)) {
            report.error(f.display().to_string(), e.to_string());
        }
    }
    if let Some(m) = &ctx.cfg.metrics {
        if let Err(e) = load_metrics(m) {
            report.error(m.display().to_string(), e.to_string());
        }
    }
    ctx.write("validation", &report.to_table())?;
    for f in report.errors() {
        eprintln!("error: {}: {}", f.location, f.message);
    }
    Ok(!report.has_errors())
}

/// Reference divergence at the granularity of `like`, when the shapes allow it.
fn reference_like(
    reference: &Option<(AttentionRun, AttentionRun)>,
    granularity: Granularity,
    n_layers: usize,
    ctx: &Ctx,
) -> anyhow::Result<Option<DivergenceReport64>> {
    let Some((ra, rb)) = reference else { return Ok(None) };
    let opts = ctx.cfg.options.divergence();
    Ok(match granularity {
        Granularity::Layer if ra.meta.n_layers == n_layers && rb.meta.n_layers == n_layers => {
            Some(layerwise_divergence(ra, rb, &opts)?)
        }
        Granularity::Layer => {
            log::warn!("reference depth differs from {n_layers} layers; no layerwise overlay");
            None
        }
        Granularity::Quarter => Some(quarterwise_divergence(ra, rb, &opts)?),
    })
}

fn append(dst: &mut Option<ReportTable>, src: ReportTable) {
    match dst {
        Some(t) => t.rows.extend(src.rows),
        None => *dst = Some(src),
    }
}

pub fn cmd_divergence(ctx: &Ctx, pair: Option<Pair>) -> anyhow::Result<()> {
    let opts = ctx.cfg.options.divergence();
    let pairs = match pair {
        Some(p) => vec![p],
        None => ctx.cfg.pairs.clone(),
    };
    if pairs.is_empty() && ctx.cfg.reference.is_none() && ctx.cfg.sensitivity.is_empty() {
        return Err(usage("nothing to compare: configure pairs, reference or sensitivity"));
    }
    let mut cache: BTreeMap<(String, String), AttentionRun> = BTreeMap::new();
    let mut get = |m: &str, c: &str| -> anyhow::Result<AttentionRun> {
        let key = (m.to_string(), c.to_string());
        if !cache.contains_key(&key) {
            cache.insert(key.clone(), ctx.attention(m, c)?);
        }
        Ok(cache[&key].clone())
    };
    let reference = match &ctx.cfg.reference {
        Some(r) => Some((get(&r.a, "plain")?, get(&r.b, "plain")?)),
        None => None,
    };

    let mut table = None;
    if let Some((ra, rb)) = &reference {
        append(&mut table, compare_runs::<f64>(ra, rb, &opts)?.to_table()?);
    }
    for p in &pairs {
        let (a, b) = (get(&p.a, "plain")?, get(&p.b, "plain")?);
        let mut rep = compare_runs::<f64>(&a, &b, &opts).with_context(|| format!("comparing {} and {}", p.a, p.b))?;
        if let Some(r) = reference_like(&reference, rep.granularity, a.meta.n_layers, ctx)? {
            rep = rep.with_reference(r);
        }
        append(&mut table, rep.to_table()?);
    }
    if let Some(t) = table {
        ctx.write("divergence", &t)?;
    }

    if !ctx.cfg.sensitivity.is_empty() {
        let mut sens = None;
        for s in &ctx.cfg.sensitivity {
            let plain = get(&s.model, "plain")?;
            let prefixed = get(&s.model, &s.condition)?;
            let granularity = match &reference {
                Some((ra, _)) if ra.meta.n_layers == plain.meta.n_layers => Granularity::Layer,
                Some(_) => Granularity::Quarter,
                None => return Err(usage("sensitivity needs a reference pair")),
            };
            let r = reference_like(&reference, granularity, plain.meta.n_layers, ctx)?.expect("reference present");
            let rep = instruction_sensitivity(&plain, &prefixed, &r, &opts)
                .with_context(|| format!("sensitivity of {} to {}", s.model, s.condition))?;
            let mut t = rep.report.to_table()?;
            // the condition column names the configured condition, not just its kind
            let col = t.column("condition").expect("condition column");
            for row in &mut t.rows {
                row[col] = Cell::from(s.condition.as_str());
            }
            append(&mut sens, t);
        }
        ctx.write("sensitivity", &sens.expect("at least one entry"))?;
    }
    Ok(())
}

fn groups_of(subjects: &[SubjectVector64]) -> Vec<Group> {
    let mut g: Vec<Group> = subjects.iter().map(|s| s.group).collect();
    g.sort();
    g.dedup();
    g
}

pub fn cmd_resemblance(ctx: &Ctx) -> anyhow::Result<()> {
    let corpus = ctx.corpus()?;
    let subjects = ctx.subjects(&corpus)?;
    let groups = groups_of(&subjects);
    let mut ceilings = Vec::new();
    for &g in &groups {
        let members: Vec<SubjectVector64> = subjects.iter().filter(|s| s.group == g).cloned().collect();
        match intersubject_ceiling(&members) {
            Ok(c) => ceilings.push(c),
            Err(e) => log::warn!("no ceiling for {g}: {e}"),
        }
    }
    let mut scores = Vec::new();
    for entry in ctx.cfg.plain_runs() {
        let run = ctx.attention(&entry.model, "plain")?;
        for &g in &groups {
            scores.push(model_resemblance(&run, &corpus, &subjects, g).with_context(|| format!("model {} vs {g}", entry.model))?);
        }
    }
    ctx.write("resemblance_layers", &layer_table(&scores))?;
    ctx.write("resemblance_summary", &summary_table(&scores))?;
    ctx.write("ceiling", &ceiling_table(&ceilings))?;
    Ok(())
}

pub fn cmd_trivial(ctx: &Ctx) -> anyhow::Result<()> {
    let corpus = ctx.corpus()?;
    let mut rows = Vec::new();
    for entry in ctx.cfg.plain_runs() {
        let run = ctx.attention(&entry.model, "plain")?;
        for (layer, fit) in model_trivial_reliance::<f64>(&run, &corpus)?.into_iter().enumerate() {
            rows.push((EntityKind::ModelLayer, format!("{}/{layer}", entry.model), fit.r2));
        }
    }
    if ctx.cfg.saccade_dir.is_some() {
        let subjects = ctx.subjects(&corpus)?;
        for (id, fit) in subject_trivial_reliance(&subjects, &corpus)? {
            rows.push((EntityKind::Subject, id, fit.r2));
        }
    }
    ctx.write("trivial", &trivial_table(&rows))?;
    Ok(())
}

fn group_score(m: &gaze_attn::corpus_io::ModelMetrics, g: Group) -> Option<f64> {
    match g {
        Group::L1 => m.resemblance_l1,
        Group::L2 => m.resemblance_l2,
    }
}

pub fn cmd_stats(ctx: &Ctx) -> anyhow::Result<()> {
    let metrics = ctx.metrics()?;
    let opts = &ctx.cfg.options;
    let threshold = bonferroni(opts.alpha, opts.n_tests)?;
    let mut rows = Vec::new();
    let mut scaling = ReportTable::new(["group", "slope", "intercept", "r", "p_value", "n"]);
    let mut extrapolation = ReportTable::new(["group", "param_count", "predicted"]);

    for g in [Group::L1, Group::L2] {
        let scored: Vec<(&String, f64)> = metrics.iter().filter_map(|(k, m)| group_score(m, g).map(|s| (k, s))).collect();
        if scored.is_empty() {
            continue;
        }
        let mut loss = Vec::new();
        for (name, _) in &scored {
            loss.push(metrics[*name].ntp_loss.ok_or_else(|| anyhow::anyhow!("metrics for {name} lack ntp_loss"))?);
        }
        let score: Vec<f64> = scored.iter().map(|(_, s)| *s).collect();
        let c = pearson(&loss, &score).with_context(|| format!("loss/resemblance correlation for {g}"))?;
        rows.push(StatRow {
            test_name: format!("pearson_loss_resemblance_{g}"),
            statistic: c.r,
            p_value: Some(c.p_two_sided),
            df: Some((c.n - 2) as f64),
            n: c.n,
            threshold: Some(threshold),
        });

        let names: Vec<&String> = if opts.scaling_models.is_empty() {
            scored.iter().filter(|(k, _)| metrics[*k].param_count.is_some()).map(|(k, _)| *k).collect()
        } else {
            opts.scaling_models.iter().collect()
        };
        let mut points = Vec::new();
        for name in names {
            let m = metrics.get(name).ok_or_else(|| anyhow::anyhow!("scaling model {name} is not in the metrics sidecar"))?;
            let size = m.param_count.ok_or_else(|| anyhow::anyhow!("metrics for {name} lack param_count"))?;
            let s = group_score(m, g).ok_or_else(|| anyhow::anyhow!("metrics for {name} lack resemblance_{}", g.to_string().to_lowercase()))?;
            points.push((size, s));
        }
        if points.len() >= 2 {
            let fit = scaling_fit(&points).with_context(|| format!("scaling fit for {g}"))?;
            rows.push(StatRow {
                test_name: format!("scaling_log10_params_{g}"),
                statistic: fit.r,
                p_value: fit.p_two_sided,
                df: (points.len() >= 3).then(|| (points.len() - 2) as f64),
                n: points.len(),
                threshold: Some(threshold),
            });
            scaling.push(vec![
                Cell::from(g.to_string()),
                Cell::from(fit.slope),
                Cell::from(fit.intercept),
                Cell::from(fit.r),
                Cell::from(fit.p_two_sided),
                Cell::from(points.len()),
            ]);
            for &x in &opts.extrapolate_to {
                extrapolation.push(vec![Cell::from(g.to_string()), Cell::from(x), Cell::from(scaling_predict(&fit, x))]);
            }
        }
    }
    let both: Vec<(f64, f64)> = metrics.values().filter_map(|m| Some((m.resemblance_l1?, m.resemblance_l2?))).collect();
    if both.len() >= 2 {
        let (a, b): (Vec<f64>, Vec<f64>) = both.into_iter().unzip();
        match t_test_paired(&a, &b) {
            Ok(t) => rows.push(StatRow {
                test_name: "paired_t_resemblance_L1_vs_L2".into(),
                statistic: t.t,
                p_value: Some(t.p_two_sided),
                df: Some(t.df),
                n: a.len(),
                threshold: Some(threshold),
            }),
            Err(e) => log::warn!("paired t-test skipped: {e}"),
        }
    }
    if rows.is_empty() {
        bail!("metrics sidecar has no resemblance scores");
    }
    ctx.write("stats", &stats_table(&rows))?;
    ctx.write("scaling", &scaling)?;
    if !extrapolation.is_empty() {
        ctx.write("extrapolation", &extrapolation)?;
    }
    Ok(())
}

const SUMMARY_STEM: &str = "summary";

/// Stacks every report in `out` into one table with a leading `source`
/// column; columns are the union in order of first appearance.
pub fn cmd_report(out: &Path, format: ReportFormat) -> anyhow::Result<()> {
    let mut files: Vec<PathBuf> = fs::read_dir(out)
        .with_context(|| format!("listing {}", out.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|x| x.to_str()), Some("csv" | "json")))
        .filter(|p| p.file_stem().is_some_and(|s| s != SUMMARY_STEM))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no reports in {}", out.display());
    }
    let mut tables = Vec::new();
    let mut columns: Vec<String> = vec!["source".into()];
    for f in &files {
        let t = read_report(f)?;
        for c in &t.columns {
            if !columns.contains(c) {
                columns.push(c.clone());
            }
        }
        let name = f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        tables.push((name, t));
    }
    let mut summary = ReportTable::new(columns.clone());
    for (name, t) in tables {
        for row in &t.rows {
            let mut cells = vec![Cell::Null; columns.len()];
            cells[0] = Cell::from(name.as_str());
            for (c, v) in t.columns.iter().zip(row) {
                let k = columns.iter().position(|x| x == c).expect("column collected");
                cells[k] = v.clone();
            }
            summary.push(cells);
        }
    }
    write_report(&summary, out.join(format!("{SUMMARY_STEM}.{}", format.extension())), format)?;
    Ok(())
}

pub fn cmd_convert(transitions: &Path, corpus: &Path, out: &Path) -> anyhow::Result<()> {
    let corpus = Corpus::load(corpus)?;
    let file = fs::File::open(transitions).with_context(|| format!("opening {}", transitions.display()))?;
    let bundles: Vec<SaccadeBundle> = saccades_from_transitions(file, &corpus)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for b in &bundles {
        write_saccade(b, out.join(format!("{}.json", b.subject_id)))?;
    }
    Ok(())
}
