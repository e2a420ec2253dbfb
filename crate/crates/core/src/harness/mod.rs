//! Leave-one-subject-out evaluation, baselines, metrics, persistence and
//! pipeline configuration.

mod checkpoint;
mod io;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::features::{extract_subject, normalize, synth_subject, window_samples, DeFeatureSet, Normalization, Sample, SynthCohortConfig, Warning, ELECTRODES, N_BANDS, N_CLASSES};
use crate::generator::GeneratorConfig;
use crate::grouping::{near_equal_sizes, partition, signature, DomainPartition, SubjectSignature};
use crate::msda::{train_msda, train_supervised, DomainData, EpochRecord, MsdaModel, TrainConfig, Trainer};
use crate::numerics::rng::stream;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, ModelSpec, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use io::{
    export_embeddings, read_eeg_csv, read_feature_csv, read_feature_dir, write_eeg_csv, write_feature_csv, write_history_csv, EmbeddingRow,
};

/// Feature preprocessing options.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub normalization: Normalization,
    /// Seconds per model input; must equal the generator's input width.
    pub window_seconds: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { normalization: Normalization::PerSubject, window_seconds: 9 }
    }
}

/// Everything a pipeline run needs, loadable from one TOML file with
/// `[generator]`, `[train]`, `[synth]` and `[features]` tables.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub generator: GeneratorConfig,
    pub train: TrainConfig,
    pub synth: SynthCohortConfig,
    pub features: FeatureConfig,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Parse(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(format!("config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        let [bands, electrodes, width] = self.generator.input_shape;
        if bands != N_BANDS || electrodes != ELECTRODES {
            return Err(Error::Config(format!("generator input must be [{N_BANDS}, {ELECTRODES}, W], got {:?}", self.generator.input_shape)));
        }
        if width != self.features.window_seconds {
            return Err(Error::Config(format!("window_seconds {} does not match generator input width {width}", self.features.window_seconds)));
        }
        Ok(())
    }
}

/// Windowed, normalized samples of every subject plus their signatures.
#[derive(Clone, Debug)]
pub struct Cohort {
    pub samples: BTreeMap<String, Vec<Sample>>,
    /// Computed on the raw (un-normalized) features.
    pub signatures: BTreeMap<String, SubjectSignature>,
}

impl Cohort {
    pub fn subject_ids(&self) -> Vec<String> {
        self.samples.keys().cloned().collect()
    }

    fn subject(&self, id: &str) -> Result<&[Sample]> {
        self.samples.get(id).map(Vec::as_slice).ok_or_else(|| arg_err!("unknown subject {id}"))
    }

    /// Samples of `ids`, as one domain.
    pub fn domain(&self, ids: &[String], labeled: bool) -> Result<DomainData> {
        let mut all = Vec::new();
        for id in ids {
            all.extend(self.subject(id)?.iter());
        }
        DomainData::from_samples(&all, labeled)
    }
}

pub fn prepare_cohort(mut sets: Vec<DeFeatureSet>, config: &FeatureConfig) -> Result<(Cohort, Vec<Warning>)> {
    let mut signatures = BTreeMap::new();
    for set in &sets {
        if signatures.insert(set.subject_id.clone(), signature(set)?).is_some() {
            return Err(arg_err!("subject {} appears twice", set.subject_id));
        }
    }
    normalize(&mut sets, config.normalization);
    let mut samples = BTreeMap::new();
    let mut warnings = Vec::new();
    for set in &sets {
        let (s, w) = window_samples(set, config.window_seconds)?;
        if s.is_empty() {
            return Err(arg_err!("subject {} has no complete {}-second window", set.subject_id, config.window_seconds));
        }
        samples.insert(set.subject_id.clone(), s);
        warnings.extend(w);
    }
    Ok((Cohort { samples, signatures }, warnings))
}

/// One leave-one-subject-out fold.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldSpec {
    pub target: String,
    pub sources: Vec<String>,
    pub partition: DomainPartition,
}

/// Group the sources of a fold into `min(k, sources)` near-equal groups.
pub fn group_sources(signatures: &[SubjectSignature], k: usize) -> Result<DomainPartition> {
    let k = k.min(signatures.len());
    partition(signatures, &near_equal_sizes(signatures.len(), k)?)
}

/// One fold per subject, in ascending id order; each fold's partition is
/// computed from its own sources only.
pub fn loso_folds(signatures: &[SubjectSignature], k: usize) -> Result<Vec<FoldSpec>> {
    if signatures.len() < 3 {
        return Err(arg_err!("leave-one-subject-out needs at least 3 subjects, got {}", signatures.len()));
    }
    let mut sorted: Vec<&SubjectSignature> = signatures.iter().collect();
    sorted.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));
    sorted
        .iter()
        .map(|t| {
            let sources: Vec<SubjectSignature> = sorted.iter().filter(|s| s.subject_id != t.subject_id).map(|s| (*s).clone()).collect();
            Ok(FoldSpec {
                target: t.subject_id.clone(),
                sources: sources.iter().map(|s| s.subject_id.clone()).collect(),
                partition: group_sources(&sources, k)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub n: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class_f1: [f64; N_CLASSES],
    /// Rows are true classes, columns predicted classes.
    pub confusion: [[usize; N_CLASSES]; N_CLASSES],
    /// Classes absent from both truth and prediction (their F1 counts as 0).
    pub absent_classes: Vec<usize>,
}

pub fn compute_metrics(truth: &[usize], pred: &[usize]) -> Result<MetricsReport> {
    if truth.len() != pred.len() {
        return Err(arg_err!("{} true labels but {} predictions", truth.len(), pred.len()));
    }
    if truth.is_empty() {
        return Err(arg_err!("no samples to score"));
    }
    let mut confusion = [[0usize; N_CLASSES]; N_CLASSES];
    for (&t, &p) in truth.iter().zip(pred) {
        if t >= N_CLASSES || p >= N_CLASSES {
            return Err(Error::Index(format!("label pair ({t}, {p}) outside 0..{N_CLASSES}")));
        }
        confusion[t][p] += 1;
    }
    let mut per_class_f1 = [0.0; N_CLASSES];
    let mut absent_classes = Vec::new();
    for c in 0..N_CLASSES {
        let tp = confusion[c][c] as f64;
        let actual: usize = confusion[c].iter().sum();
        let predicted: usize = confusion.iter().map(|row| row[c]).sum();
        if actual + predicted == 0 {
            absent_classes.push(c);
            continue;
        }
        per_class_f1[c] = 2.0 * tp / (actual + predicted) as f64;
    }
    let correct: usize = (0..N_CLASSES).map(|c| confusion[c][c]).sum();
    Ok(MetricsReport {
        n: truth.len(),
        accuracy: correct as f64 / truth.len() as f64,
        macro_f1: per_class_f1.iter().sum::<f64>() / N_CLASSES as f64,
        per_class_f1,
        confusion,
        absent_classes,
    })
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// Generator + one classifier trained on pooled sources.
    SourceOnly,
    /// The adaptation loop with all sources pooled into one domain.
    SingleSource,
    /// Supervised training on a labeled 80% split of the target.
    TargetOnly,
    /// Full multi-source adaptation over the fold's source groups.
    Msda,
}

impl Baseline {
    pub const ALL: [Baseline; 4] = [Baseline::SourceOnly, Baseline::SingleSource, Baseline::TargetOnly, Baseline::Msda];
}

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Baseline::SourceOnly => "source_only",
            Baseline::SingleSource => "single_source",
            Baseline::TargetOnly => "target_only",
            Baseline::Msda => "msda",
        })
    }
}

impl FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Baseline::ALL
            .into_iter()
            .find(|b| b.to_string() == s.replace('-', "_"))
            .ok_or_else(|| arg_err!("unknown baseline mode `{s}` (expected source_only, single_source, target_only or msda)"))
    }
}

/// Trial-level 80/20 split of one subject's samples, stratified by label
/// and seeded. Each label with ≥ 2 trials puts at least one in the test part.
pub fn target_split(samples: &[Sample], seed: u64) -> Result<(Vec<&Sample>, Vec<&Sample>)> {
    let mut by_label: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for s in samples {
        let trials = by_label.entry(s.label).or_default();
        if !trials.contains(&s.trial_id) {
            trials.push(s.trial_id.clone());
        }
    }
    let mut test_trials = Vec::new();
    for (label, mut trials) in by_label {
        trials.sort();
        trials.shuffle(&mut stream(seed, 0x7e57 + label as u64));
        let n_test = if trials.len() < 2 { 0 } else { ((trials.len() as f64 * 0.2).round() as usize).max(1) };
        test_trials.extend(trials.into_iter().take(n_test));
    }
    let (test, train): (Vec<&Sample>, Vec<&Sample>) = samples.iter().partition(|s| test_trials.contains(&s.trial_id));
    if train.is_empty() || test.is_empty() {
        return Err(arg_err!("target has too few trials for an 80/20 split"));
    }
    Ok((train, test))
}

/// Outcome of one baseline on one fold.
#[derive(Clone, Debug)]
pub struct BaselineRun {
    pub mode: Baseline,
    pub target: String,
    pub report: MetricsReport,
    pub history: Vec<EpochRecord>,
    pub trainer: Trainer,
}

fn labels_of(samples: &[&Sample]) -> Vec<usize> {
    samples.iter().map(|s| s.label).collect()
}

/// Train and score one baseline on `fold`. All modes share the generator
/// architecture, its initialization (`train.seed`), batch size and epochs.
pub fn run_baseline(mode: Baseline, fold: &FoldSpec, cohort: &Cohort, generator: &GeneratorConfig, train: &TrainConfig) -> Result<BaselineRun> {
    let target_samples: Vec<&Sample> = cohort.subject(&fold.target)?.iter().collect();
    let target = DomainData::from_samples(&target_samples, false)?;
    let target_labels = labels_of(&target_samples);
    let (outcome, eval_inputs, eval_labels) = match mode {
        Baseline::SourceOnly => {
            let pooled = cohort.domain(&fold.sources, true)?;
            let out = train_supervised(MsdaModel::single_head(generator.clone())?, &pooled, train, Some((&target.inputs, &target_labels)))?;
            (out, target.inputs, target_labels)
        }
        Baseline::SingleSource => {
            let pooled = cohort.domain(&fold.sources, true)?;
            let out = train_msda(MsdaModel::new(generator.clone(), 1)?, &[pooled], &target, train, Some(&target_labels))?;
            (out, target.inputs, target_labels)
        }
        Baseline::Msda => {
            let sources: Vec<DomainData> = fold.partition.groups.iter().map(|g| cohort.domain(g, true)).collect::<Result<_>>()?;
            let out = train_msda(MsdaModel::new(generator.clone(), sources.len())?, &sources, &target, train, Some(&target_labels))?;
            (out, target.inputs, target_labels)
        }
        Baseline::TargetOnly => {
            let (train_part, test_part) = target_split(cohort.subject(&fold.target)?, train.seed)?;
            let data = DomainData::from_samples(&train_part, true)?;
            let test = DomainData::from_samples(&test_part, false)?;
            let test_labels = labels_of(&test_part);
            let out = train_supervised(MsdaModel::single_head(generator.clone())?, &data, train, Some((&test.inputs, &test_labels)))?;
            (out, test.inputs, test_labels)
        }
    };
    let mut trainer = outcome.trainer;
    let (_, pred) = trainer.predict(&eval_inputs)?;
    Ok(BaselineRun { mode, target: fold.target.clone(), report: compute_metrics(&eval_labels, &pred)?, history: outcome.history, trainer })
}

/// One seeded run of the synthetic benchmark: a cohort drawn from
/// `config.synth` with `seed`, scored with every mode in `modes` on the fold
/// whose target is subject `seed mod n_subjects`. Training also uses `seed`.
pub fn synthetic_trial(config: &PipelineConfig, seed: u64, modes: &[Baseline]) -> Result<Vec<BaselineRun>> {
    let synth = SynthCohortConfig { seed, ..config.synth.clone() };
    let train = TrainConfig { seed, ..config.train.clone() };
    let sets = (0..synth.n_subjects)
        .map(|i| extract_subject(&synth.subject_id(i), &synth_subject(&synth, i)?).map(|(set, _)| set))
        .collect::<Result<Vec<_>>>()?;
    let (cohort, _) = prepare_cohort(sets, &config.features)?;
    let sigs: Vec<SubjectSignature> = cohort.signatures.values().cloned().collect();
    let target = synth.subject_id(seed as usize % synth.n_subjects);
    let fold = loso_folds(&sigs, train.k)?.into_iter().find(|f| f.target == target).expect("every subject has a fold");
    modes.iter().map(|&m| run_baseline(m, &fold, &cohort, &config.generator, &train)).collect()
}

#[cfg(test)]
mod tests;
