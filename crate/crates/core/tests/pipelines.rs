use gaze_attn::corpus_io::{
    load_attention, load_saccade, validate_run, write_attention, write_saccade, Condition, Corpus, Group, NOISE_PREFIX,
    TRANSLATE_PREFIX,
};
use gaze_attn::divergence::{
    compare_runs, instruction_sensitivity, layerwise_divergence, DivergenceOptions, Granularity,
};
use gaze_attn::regression::ols_fit;
use gaze_attn::resemblance::{
    build_layer_design, build_subject_vector, intersubject_ceiling, layer_vector, model_resemblance, model_trivial_reliance,
    subject_trivial_reliance, trivial_reliance, SubjectVector,
};
use gaze_attn::synth::{derive_prefixed_run, gen_attention_run, gen_saccade, subject_bundles, Structure, SynthSpec};
use gaze_attn::DesignMatrix64;

fn spec(seed: u64, structure: Structure) -> SynthSpec {
    SynthSpec {
        seed,
        n_sentences: 12,
        min_words: 3,
        max_words: 9,
        max_tokens_per_word: 3,
        n_layers: 6,
        n_heads: 3,
        n_subjects: 4,
        model_name: format!("synth-{seed}"),
        param_count: 1e6,
        attention_seed: None,
        structure,
    }
}

fn combo(seed: u64, sigma: f64) -> SynthSpec {
    spec(seed, Structure::LinearCombo { layer: 3, head_weights: vec![2.0, -1.0, 0.5], intercept: 1.0, sigma })
}

#[test]
fn synthetic_runs_are_validator_clean() {
    let out = gen_attention_run(&spec(1, Structure::IndependentRandom)).unwrap();
    let rep = validate_run(&out.run, &out.corpus);
    assert!(rep.is_empty(), "{rep:?}");
}

#[test]
fn planted_layer_is_recovered_exactly() {
    let out = gen_attention_run(&combo(5, 0.0)).unwrap();
    let score = model_resemblance(&out.run, &out.corpus, &out.subjects, Group::L1).unwrap();
    assert_eq!(score.argmax_layer, 3);
    assert!((score.r2_model - 1.0).abs() < 1e-9);
}

#[test]
fn noise_lowers_planted_fit() {
    for seed in [1, 2, 3] {
        let r2: Vec<f64> = [0.05, 0.2, 1.0]
            .iter()
            .map(|&s| {
                let out = gen_attention_run(&combo(seed, s)).unwrap();
                model_resemblance(&out.run, &out.corpus, &out.subjects, Group::L1).unwrap().layer_means[3]
            })
            .collect();
        assert!(r2[0] > r2[1] && r2[1] > r2[2], "seed {seed}: {r2:?}");
    }
}

#[test]
fn identical_layers_tie_to_the_first() {
    let mut out = gen_attention_run(&combo(9, 0.0)).unwrap();
    for s in out.run.sentences.values_mut() {
        for h in 0..3 {
            let copy = s.tensor.head(3, h).to_vec();
            s.tensor.head_mut(1, h).copy_from_slice(&copy);
        }
    }
    let score = model_resemblance(&out.run, &out.corpus, &out.subjects, Group::L1).unwrap();
    assert_eq!(score.layer_means[1], score.layer_means[3]);
    assert_eq!(score.argmax_layer, 1);
}

#[test]
fn ratio_is_scale_invariant() {
    let out = gen_attention_run(&combo(4, 0.5)).unwrap();
    let a = model_resemblance(&out.run, &out.corpus, &out.subjects, Group::L1).unwrap();
    let scaled: Vec<SubjectVector<f64>> = out
        .subjects
        .iter()
        .map(|s| SubjectVector { vector: s.vector.iter().map(|v| v * 37.5).collect(), ..s.clone() })
        .collect();
    let b = model_resemblance(&out.run, &out.corpus, &scaled, Group::L1).unwrap();
    let (ra, rb) = (a.ratio_percent.unwrap(), b.ratio_percent.unwrap());
    assert!((ra - rb).abs() < 1e-9 * ra.abs().max(1.0));
}

#[test]
fn layer_design_shape_and_single_head() {
    let mut s = spec(2, Structure::IndependentRandom);
    s.n_heads = 1;
    let out = gen_attention_run(&s).unwrap();
    let d = build_layer_design::<f64>(&out.run, &out.corpus, 2).unwrap();
    let rows: usize = out.corpus.records().iter().map(|r| r.n_words * (r.n_words + 1) / 2).sum();
    assert_eq!(d.design.rows(), rows);
    assert_eq!(d.design.cols(), 1);
    assert_eq!(d.design.column(0), layer_vector::<f64>(&out.run, &out.corpus, 2).unwrap());
    assert!(build_layer_design::<f64>(&out.run, &out.corpus, 6).is_err());
}

#[test]
fn ceiling_matches_closed_form() {
    let m: Vec<f64> = (0..30).map(|i| ((i * 7) % 11) as f64 + 1.0).collect();
    let raw: Vec<f64> = (0..30).map(|i| ((i * 5) % 7) as f64 - 3.0).collect();
    // perturbation orthogonal to the centered mean, so both subjects sit at the same angle
    let center = |v: &[f64]| {
        let mu = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| x - mu).collect::<Vec<_>>()
    };
    let (mc, rc) = (center(&m), center(&raw));
    let k = rc.iter().zip(&mc).map(|(a, b)| a * b).sum::<f64>() / mc.iter().map(|b| b * b).sum::<f64>();
    let d: Vec<f64> = rc.iter().zip(&mc).map(|(a, b)| a - k * b).collect();
    let mk = |id: &str, sign: f64| SubjectVector {
        subject_id: id.into(),
        group: Group::L2,
        vector: m.iter().zip(&d).map(|(a, b)| a + sign * b).collect(),
    };
    let c = intersubject_ceiling(&[mk("a", 1.0), mk("b", -1.0)]).unwrap();
    let corr2 = |x: &[f64], y: &[f64]| {
        let n = x.len() as f64;
        let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
        let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
        sxy * sxy / (sxx * syy)
    };
    let want = corr2(&mk("a", 1.0).vector, &m);
    assert!((c.per_subject[0].1 - c.per_subject[1].1).abs() < 1e-12);
    assert!((c.r2_inter - want).abs() < 1e-12);
}

#[test]
fn pattern_saccades_rely_on_trivial_patterns() {
    let s = spec(3, Structure::PatternMixture { weights: [1.0, 3.0, 2.0], sigma: 0.0 });
    let out = gen_attention_run(&s).unwrap();
    let bundles = gen_saccade(&s).unwrap();
    let subjects: Vec<SubjectVector<f64>> = bundles.iter().map(|b| build_subject_vector(b, &out.corpus).unwrap()).collect();
    for (_, fit) in subject_trivial_reliance(&subjects, &out.corpus).unwrap() {
        assert!((fit.r2 - 1.0).abs() < 1e-9);
    }
    let per_layer = model_trivial_reliance::<f64>(&out.run, &out.corpus).unwrap();
    assert_eq!(per_layer.len(), 6);
    assert!(per_layer.iter().all(|f| (0.0..=1.0).contains(&f.r2)));
}

#[test]
fn noise_targets_do_not_fit_patterns() {
    for seed in 0..10 {
        let mut s = spec(seed, Structure::PatternMixture { weights: [0.0; 3], sigma: 50.0 });
        s.n_sentences = 500;
        s.n_subjects = 1;
        let b = &gen_saccade(&s).unwrap()[0];
        let corpus = gaze_attn::synth::gen_corpus(&s).unwrap();
        let v: SubjectVector<f64> = build_subject_vector(b, &corpus).unwrap();
        let fit = trivial_reliance(&v.vector, &corpus).unwrap();
        assert!(fit.r2 < 0.05, "seed {seed}: {}", fit.r2);
    }
}

#[test]
fn independent_runs_diverge_everywhere() {
    let a = gen_attention_run(&spec(10, Structure::IndependentRandom)).unwrap();
    let mut other = spec(10, Structure::IndependentRandom);
    other.attention_seed = Some(11);
    let b = gen_attention_run(&other).unwrap();
    assert_eq!(a.corpus, b.corpus);
    let rep = layerwise_divergence::<f64>(&a.run, &b.run, &DivergenceOptions::default()).unwrap();
    assert!(rep.units.iter().all(|u| u.mean > 0.0));
    let same = layerwise_divergence::<f64>(&a.run, &a.run, &DivergenceOptions::default()).unwrap();
    assert!(same.units.iter().all(|u| u.mean == 0.0));
}

#[test]
fn depth_mismatch_goes_quarterwise() {
    let a = gen_attention_run(&spec(10, Structure::IndependentRandom)).unwrap();
    let mut s = spec(10, Structure::IndependentRandom);
    s.n_layers = 8;
    let b = gen_attention_run(&s).unwrap();
    let rep = compare_runs::<f64>(&a.run, &b.run, &DivergenceOptions::default()).unwrap();
    assert_eq!(rep.granularity, Granularity::Quarter);
    assert_eq!(rep.units.len(), 4);
}

#[test]
fn prefix_sensitivity_flags_perturbed_layers() {
    let plain = gen_attention_run(&spec(21, Structure::IndependentRandom)).unwrap().run;
    let reference = layerwise_divergence::<f64>(&plain, &plain, &DivergenceOptions::default()).unwrap();
    let cond = Condition::InstructionPrefixed { prefix: TRANSLATE_PREFIX.into() };
    let same = derive_prefixed_run(&plain, cond.clone(), &[], 1).unwrap();
    let s = instruction_sensitivity(&plain, &same, &reference, &DivergenceOptions::default()).unwrap();
    assert!(s.report.units.iter().all(|u| u.mean == 0.0));
    assert!(s.above_reference.iter().all(|f| !f));

    let shifted = derive_prefixed_run(&plain, Condition::NoisePrefixed { prefix: NOISE_PREFIX.into() }, &[4, 5], 1).unwrap();
    let s = instruction_sensitivity(&plain, &shifted, &reference, &DivergenceOptions::default()).unwrap();
    assert_eq!(s.above_reference, vec![false, false, false, false, true, true]);
}

#[test]
fn runs_and_saccades_roundtrip() {
    let s = spec(8, Structure::PatternMixture { weights: [1.0, 1.0, 1.0], sigma: 2.0 });
    let out = gen_attention_run(&s).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_attention(&out.run, dir.path()).unwrap();
    assert_eq!(load_attention(dir.path()).unwrap(), out.run);
    for b in gen_saccade(&s).unwrap() {
        let p = dir.path().join(format!("{}.json", b.subject_id));
        write_saccade(&b, &p).unwrap();
        assert_eq!(load_saccade(&p, Some(&out.corpus)).unwrap(), b);
    }
    let path = dir.path().join("corpus.json");
    out.corpus.write(&path).unwrap();
    assert_eq!(Corpus::load(&path).unwrap(), out.corpus);
}

#[test]
fn integer_export_keeps_planted_layer() {
    let out = gen_attention_run(&combo(6, 0.05)).unwrap();
    let bundles = subject_bundles(&out.subjects, &out.corpus, 100.0).unwrap();
    let subjects: Vec<SubjectVector<f64>> = bundles.iter().map(|b| build_subject_vector(b, &out.corpus).unwrap()).collect();
    let score = model_resemblance(&out.run, &out.corpus, &subjects, Group::L1).unwrap();
    assert_eq!(score.argmax_layer, 3);
}

#[test]
fn ols_on_exact_plane() {
    let d = DesignMatrix64::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 1.0], vec![2.0, 3.0]]).unwrap();
    let y: Vec<f64> = (0..4).map(|i| 1.5 * d.get(i, 0) - 2.0 * d.get(i, 1) + 0.25).collect();
    let f = ols_fit(&d, &y).unwrap();
    assert!((f.weights[0] - 1.5).abs() < 1e-12 && (f.weights[1] + 2.0).abs() < 1e-12 && (f.intercept - 0.25).abs() < 1e-12);
}
