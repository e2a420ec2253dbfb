use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{decode_checkpoint, encode_checkpoint};
use super::*;
use crate::features::{extract_subject, synth_cohort, DeEntry, FEATURE_DIM};
use crate::generator::GeneratorState;
use crate::grouping::SubjectSignature;
use crate::numerics::ParamStore;
use crate::testutil::tiny_config;

fn sig(rng: &mut ChaCha8Rng, id: &str) -> SubjectSignature {
    SubjectSignature { subject_id: id.into(), vector: (0..FEATURE_DIM).map(|_| rng.random_range(-1.0..1.0)).collect() }
}

fn signatures(n: usize) -> Vec<SubjectSignature> {
    let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
    (0..n).map(|i| sig(&mut rng, &format!("S{:02}", i + 1))).collect()
}

/// Smallest generator accepting `[5, 62, 4]` inputs.
pub(crate) fn micro_generator() -> GeneratorConfig {
    GeneratorConfig {
        input_shape: [5, 62, 4],
        c1_filters: vec![2],
        c2_filters: vec![3],
        embed_dim: 4,
        depth: 1,
        heads: 2,
        mlp_units: vec![4],
        ..GeneratorConfig::default()
    }
}

fn micro_cohort(n_subjects: usize) -> Cohort {
    let synth = SynthCohortConfig { n_subjects, n_trials_per_subject: 6, trial_seconds: 8, ..Default::default() };
    let recs = synth_cohort(&synth).unwrap();
    let sets: Vec<_> = (0..n_subjects).map(|i| extract_subject(&synth.subject_id(i), &recs).unwrap().0).collect();
    prepare_cohort(sets, &FeatureConfig { normalization: Normalization::Global, window_seconds: 4 }).unwrap().0
}

#[test]
fn fifteen_subject_loso() {
    let folds = loso_folds(&signatures(15), 4).unwrap();
    assert_eq!(folds.len(), 15);
    let mut targets: Vec<&String> = folds.iter().map(|f| &f.target).collect();
    targets.dedup();
    assert_eq!(targets.len(), 15);
    for f in &folds {
        assert_eq!(f.sources.len(), 14);
        assert!(!f.sources.contains(&f.target));
        assert_eq!(f.partition.groups.iter().map(Vec::len).collect::<Vec<_>>(), [4, 4, 3, 3]);
        assert!(f.partition.group_of(&f.target).is_none());
    }
}

#[test]
fn minimal_loso() {
    let folds = loso_folds(&signatures(3), 4).unwrap();
    assert_eq!(folds.len(), 3);
    for f in &folds {
        assert_eq!(f.partition.k, 2);
        assert_eq!(f.partition.groups.iter().map(Vec::len).collect::<Vec<_>>(), [1, 1]);
    }
    assert!(matches!(loso_folds(&signatures(2), 4), Err(Error::Argument(_))));
}

#[test]
fn metric_examples() {
    let r = compute_metrics(&[0, 1, 2, 1], &[0, 1, 2, 1]).unwrap();
    assert_eq!((r.accuracy, r.macro_f1), (1.0, 1.0));
    assert_eq!(r.confusion, [[1, 0, 0], [0, 2, 0], [0, 0, 1]]);

    let r = compute_metrics(&[0, 0, 1, 2], &[0, 1, 1, 2]).unwrap();
    assert_eq!(r.accuracy, 0.75);
    for (got, want) in r.per_class_f1.iter().zip([2.0 / 3.0, 2.0 / 3.0, 1.0]) {
        assert!((got - want).abs() < 1e-15);
    }
    assert!((r.macro_f1 - 7.0 / 9.0).abs() < 1e-15);

    let truth: Vec<usize> = (0..30).map(|i| i % 3).collect();
    let r = compute_metrics(&truth, &[1; 30]).unwrap();
    assert!((r.accuracy - 1.0 / 3.0).abs() < 1e-15);

    let r = compute_metrics(&[0, 1, 0], &[0, 1, 1]).unwrap();
    assert_eq!(r.absent_classes, [2]);
    assert!(matches!(compute_metrics(&[0, 1], &[0]), Err(Error::Argument(_))));
    assert!(matches!(compute_metrics(&[0, 3], &[0, 1]), Err(Error::Index(_))));
}

#[test]
fn metrics_match_precision_recall_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..100 {
        let n = rng.random_range(1..40);
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let r = compute_metrics(&truth, &pred).unwrap();
        let mut f1s = Vec::new();
        for c in 0..3 {
            let tp = truth.iter().zip(&pred).filter(|(t, p)| **t == c && **p == c).count() as f64;
            let fp = truth.iter().zip(&pred).filter(|(t, p)| **t != c && **p == c).count() as f64;
            let fneg = truth.iter().zip(&pred).filter(|(t, p)| **t == c && **p != c).count() as f64;
            let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let recall = if tp + fneg > 0.0 { tp / (tp + fneg) } else { 0.0 };
            f1s.push(if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 });
        }
        let macro_f1 = f1s.iter().sum::<f64>() / 3.0;
        assert!((r.macro_f1 - macro_f1).abs() < 1e-12);
        let acc = truth.iter().zip(&pred).filter(|(t, p)| t == p).count() as f64 / n as f64;
        assert_eq!(r.accuracy, acc);
        assert_eq!(r.confusion.iter().flatten().sum::<usize>(), n);
        let trace: usize = (0..3).map(|c| r.confusion[c][c]).sum();
        assert_eq!(r.accuracy, trace as f64 / n as f64);
    }
}

#[test]
fn mean_std_of_folds() {
    assert_eq!(mean_std(&[0.5]), (0.5, 0.0));
    let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
    assert_eq!((m, s), (2.0, 1.0));
}

#[test]
fn baseline_modes_parse() {
    for b in Baseline::ALL {
        assert_eq!(b.to_string().parse::<Baseline>().unwrap(), b);
    }
    assert_eq!("source-only".parse::<Baseline>().unwrap(), Baseline::SourceOnly);
    assert!(matches!("oracle".parse::<Baseline>(), Err(Error::Argument(_))));
}

#[test]
fn target_split_is_seeded_stratified_and_trial_level() {
    let cohort = micro_cohort(3);
    let samples = &cohort.samples["S01"];
    let (train, test) = target_split(samples, 7).unwrap();
    assert_eq!(train.len() + test.len(), samples.len());
    for t in &test {
        assert!(train.iter().all(|s| s.trial_id != t.trial_id));
    }
    let mut labels: Vec<usize> = test.iter().map(|s| s.label).collect();
    labels.sort();
    labels.dedup();
    assert_eq!(labels, [0, 1, 2]);
    let (_, again) = target_split(samples, 7).unwrap();
    assert_eq!(test, again);
}

#[test]
fn pipeline_config_roundtrip_and_validation() {
    let c = PipelineConfig::default();
    c.validate().unwrap();
    let text = c.to_toml().unwrap();
    assert_eq!(PipelineConfig::from_toml(&text).unwrap(), c);
    let partial = PipelineConfig::from_toml("[train]\nepochs = 3\n\n[features]\nnormalization = \"global\"\n").unwrap();
    assert_eq!(partial.train.epochs, 3);
    assert_eq!(partial.features.normalization, Normalization::Global);
    assert!(matches!(PipelineConfig::from_toml("[train]\nepoch = 3\n"), Err(Error::Parse(_))));
    assert!(matches!(PipelineConfig::from_toml("[features]\nwindow_seconds = 5\n"), Err(Error::Config(_))));
}

fn trained_model() -> (MsdaModel, ParamStore, GeneratorState) {
    let model = MsdaModel::new(tiny_config(), 2).unwrap();
    let (params, mut state) = model.init(3);
    state.rng.counter = 17;
    for (i, st) in state.running.values_mut().enumerate() {
        st.updates = i as u64 + 1;
        st.mean.iter_mut().for_each(|m| *m = 0.1 * i as f64);
    }
    (model, params, state)
}

#[test]
fn checkpoint_roundtrip_is_bitwise() {
    let (model, params, state) = trained_model();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &model, &params, &state).unwrap();
    let ck = load_checkpoint(&path).unwrap();
    assert_eq!(ck.params, params);
    assert_eq!(ck.state, state);
    assert_eq!(ck.model().unwrap(), model);
    save_checkpoint(&dir.path().join("n.ckpt"), &model, &params, &state).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(dir.path().join("n.ckpt")).unwrap());
}

#[test]
fn truncated_checkpoints_fail_with_offsets() {
    let (model, params, state) = trained_model();
    let bytes = encode_checkpoint(&model, &params, &state).unwrap();
    for cut in (0..bytes.len()).step_by(97).chain([bytes.len() - 1]) {
        match decode_checkpoint(&bytes[..cut]) {
            Err(Error::Format { offset, .. }) => assert!(offset <= cut, "cut {cut}: offset {offset}"),
            other => panic!("cut {cut}: expected format error, got {other:?}"),
        }
    }
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(decode_checkpoint(&extra), Err(Error::Format { offset, .. }) if offset == bytes.len()));
    let mut bad_magic = bytes.clone();
    bad_magic[0] ^= 0xff;
    assert!(matches!(decode_checkpoint(&bad_magic), Err(Error::Format { offset: 0, .. })));
    let mut bad_version = bytes.clone();
    bad_version[8] = 9;
    assert!(matches!(decode_checkpoint(&bad_version), Err(Error::Format { offset: 8, .. })));
}

#[test]
fn checkpoint_from_other_architecture_is_a_schema_mismatch() {
    let (model, params, state) = trained_model();
    let bytes = encode_checkpoint(&model, &params, &state).unwrap();
    let ck = decode_checkpoint(&bytes).unwrap();
    let deeper = MsdaModel::new(GeneratorConfig { depth: 2, ..tiny_config() }, 3).unwrap();
    match ck.verify_against(&deeper) {
        Err(Error::SchemaMismatch { missing, extra }) => {
            assert!(missing.contains(&"gen.block1.attn.wq".to_string()));
            assert!(missing.contains(&"head.2.a.weight".to_string()));
            assert!(extra.is_empty());
        }
        other => panic!("expected schema mismatch, got {other:?}"),
    }
    let shallower = MsdaModel::new(GeneratorConfig { c1_filters: vec![3, 3], ..tiny_config() }, 2).unwrap();
    match ck.verify_against(&shallower) {
        Err(Error::SchemaMismatch { extra, .. }) => assert!(extra.contains(&"gen.c1.conv2.weight".to_string())),
        other => panic!("expected schema mismatch, got {other:?}"),
    }
}

#[test]
fn feature_csv_roundtrip() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let set = DeFeatureSet {
        subject_id: "S07".into(),
        entries: (0..3)
            .map(|s| DeEntry { trial_id: "T01".into(), second: s, label: 2, de: (0..FEATURE_DIM).map(|_| rng.random_range(-5.0..5.0)).collect() })
            .collect(),
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("features_S07.csv");
    write_feature_csv(&path, &set).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("subject_id,trial_id,second,label,de_0,de_1,"));
    assert!(text.lines().next().unwrap().ends_with(",de_309"));
    assert_eq!(read_feature_csv(&path).unwrap(), vec![set.clone()]);
    assert_eq!(read_feature_dir(dir.path()).unwrap(), vec![set]);

    std::fs::write(&path, text.replacen(",2,", ",x,", 1)).unwrap();
    match read_feature_csv(&path) {
        Err(Error::Parse(m)) => assert!(m.contains(":2:"), "{m}"),
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn eeg_csv_roundtrip() {
    let synth = SynthCohortConfig { n_subjects: 1, n_trials_per_subject: 2, trial_seconds: 1, ..Default::default() };
    let recs = synth_cohort(&synth).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("raw.csv");
    write_eeg_csv(&path, &recs).unwrap();
    assert_eq!(read_eeg_csv(&path).unwrap(), recs);
    let text = std::fs::read_to_string(&path).unwrap();
    let cut: Vec<&str> = text.lines().take(30).collect();
    std::fs::write(&path, cut.join("\n")).unwrap();
    assert!(matches!(read_eeg_csv(&path), Err(Error::Parse(_))));
}

#[test]
fn embedding_export_rows_and_determinism() {
    let cohort = micro_cohort(3);
    let model = MsdaModel::new(micro_generator(), 2).unwrap();
    let (params, mut state) = model.init(0);
    state.running.values_mut().for_each(|s| s.updates = 1);
    let rows = [
        EmbeddingRow { role: "source-0".into(), samples: cohort.samples["S01"].iter().collect() },
        EmbeddingRow { role: "target".into(), samples: cohort.samples["S03"].iter().collect() },
    ];
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    let n = export_embeddings(&a, &model, &params, &state, &rows).unwrap();
    export_embeddings(&b, &model, &params, &state, &rows).unwrap();
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(n, cohort.samples["S01"].len() + cohort.samples["S03"].len());
    assert_eq!(text.lines().count(), n + 1);
    assert_eq!(text.lines().next().unwrap(), "subject_id,role,label,emb_0,emb_1,emb_2,emb_3");
    assert!(text.lines().last().unwrap().starts_with("S03,target,-1,"));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn every_baseline_runs_on_a_micro_cohort() {
    let cohort = micro_cohort(3);
    let sigs: Vec<_> = cohort.signatures.values().cloned().collect();
    let folds = loso_folds(&sigs, 4).unwrap();
    let train = TrainConfig { epochs: 1, batch_size: 4, step3_repeats: 1, learning_rate: 1e-3, ..TrainConfig::default() };
    let mut first_gen = None;
    for mode in Baseline::ALL {
        let run = run_baseline(mode, &folds[0], &cohort, &micro_generator(), &train).unwrap();
        assert_eq!(run.history.len(), 1);
        assert_eq!(run.report.confusion.iter().flatten().sum::<usize>(), run.report.n);
        if mode != Baseline::TargetOnly {
            assert_eq!(run.report.n, cohort.samples[&folds[0].target].len());
        }
        // Same seed → same generator initialization across modes.
        let model = run.trainer.model.clone();
        let (init, _) = model.init(train.seed);
        let gen: Vec<_> = init.iter().filter(|(n, _)| n.starts_with("gen.")).map(|(n, t)| (n.clone(), t.clone())).collect();
        match &first_gen {
            None => first_gen = Some(gen),
            Some(g) => assert_eq!(g, &gen),
        }
    }
}
