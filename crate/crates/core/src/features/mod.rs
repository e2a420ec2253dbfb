//! Differential-entropy features from multichannel EEG, model input
//! windowing, normalization and synthetic cohorts.

mod spectral;
mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::numerics::Tensor;

pub use spectral::{bandpass_subband, differential_entropy, VARIANCE_FLOOR};
pub use synth::{synth_cohort, synth_subject, SynthCohortConfig};

pub const ELECTRODES: usize = 62;
pub const N_BANDS: usize = 5;
/// Flattened length of one per-second DE matrix (electrode-major, band-minor).
pub const FEATURE_DIM: usize = ELECTRODES * N_BANDS;
pub const N_CLASSES: usize = 3;

/// Frequency subbands in feature order: delta, theta, alpha, beta, gamma.
pub const BANDS: [(&str, f64, f64); N_BANDS] = [
    ("delta", 1.0, 4.0),
    ("theta", 4.0, 8.0),
    ("alpha", 8.0, 13.0),
    ("beta", 13.0, 30.0),
    ("gamma", 30.0, 50.0),
];

/// One trial of raw multichannel EEG.
#[derive(Clone, Debug, PartialEq)]
pub struct EegRecording {
    pub subject_id: String,
    pub trial_id: String,
    /// 0 = negative, 1 = neutral, 2 = positive.
    pub label: usize,
    pub sample_rate: f64,
    /// `ELECTRODES` rows of equal length.
    pub channels: Vec<Vec<f64>>,
}

impl EegRecording {
    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate > 0.0) {
            return Err(arg_err!("sample rate must be positive, got {}", self.sample_rate));
        }
        if self.channels.len() != ELECTRODES {
            return Err(arg_err!("expected {ELECTRODES} channels, got {}", self.channels.len()));
        }
        if self.label >= N_CLASSES {
            return Err(arg_err!("label {} outside 0..{N_CLASSES}", self.label));
        }
        let len = self.channels[0].len();
        if self.channels.iter().any(|c| c.len() != len) {
            return Err(arg_err!("channels of trial {} have unequal lengths", self.trial_id));
        }
        if self.channels.iter().flatten().any(|v| !v.is_finite()) {
            return Err(arg_err!("non-finite sample in trial {}", self.trial_id));
        }
        Ok(())
    }

    pub fn len_samples(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }
}

/// DE matrix for one second of one trial.
#[derive(Clone, Debug, PartialEq)]
pub struct DeEntry {
    pub trial_id: String,
    pub second: usize,
    pub label: usize,
    /// `FEATURE_DIM` values, index `electrode * N_BANDS + band`.
    pub de: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeFeatureSet {
    pub subject_id: String,
    pub entries: Vec<DeEntry>,
}

/// Non-fatal conditions reported alongside results.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Warning {
    RecordingTooShort { trial_id: String, samples: usize },
    TrialTooShort { trial_id: String, seconds: usize, window: usize },
}

/// DE features of every full second of `recording`, each subband filtered
/// within its own window. The trailing partial second is dropped.
pub fn extract_de(recording: &EegRecording) -> Result<(Vec<DeEntry>, Vec<Warning>)> {
    recording.validate()?;
    let per_second = recording.sample_rate.floor() as usize;
    if per_second < 2 {
        return Err(arg_err!("sample rate {} too low for 1-second windows", recording.sample_rate));
    }
    let total = recording.len_samples();
    let seconds = total / per_second;
    if seconds == 0 {
        let warning = Warning::RecordingTooShort { trial_id: recording.trial_id.clone(), samples: total };
        return Ok((Vec::new(), vec![warning]));
    }
    for &(name, lo, hi) in &BANDS {
        if hi > recording.sample_rate / 2.0 {
            return Err(arg_err!("band {name} ({lo}-{hi} Hz) above Nyquist for {} Hz", recording.sample_rate));
        }
    }
    let filter = spectral::BandFilter::new(per_second, recording.sample_rate);
    let mut entries = Vec::with_capacity(seconds);
    for s in 0..seconds {
        let mut de = Vec::with_capacity(FEATURE_DIM);
        for channel in &recording.channels {
            let spectrum = filter.forward(&channel[s * per_second..(s + 1) * per_second]);
            for &(_, lo, hi) in &BANDS {
                de.push(differential_entropy(&filter.inverse_masked(&spectrum, (lo, hi)))?);
            }
        }
        entries.push(DeEntry { trial_id: recording.trial_id.clone(), second: s, label: recording.label, de });
    }
    Ok((entries, Vec::new()))
}

/// Extract every recording of one subject into a feature set, in input order.
pub fn extract_subject(subject_id: &str, recordings: &[EegRecording]) -> Result<(DeFeatureSet, Vec<Warning>)> {
    let mut entries = Vec::new();
    let mut warnings = Vec::new();
    for rec in recordings.iter().filter(|r| r.subject_id == subject_id) {
        let (e, w) = extract_de(rec)?;
        entries.extend(e);
        warnings.extend(w);
    }
    Ok((DeFeatureSet { subject_id: subject_id.to_string(), entries }, warnings))
}

/// One generator input: `[N_BANDS, ELECTRODES, window]` DE values.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub subject_id: String,
    pub trial_id: String,
    pub label: usize,
    pub input: Tensor,
}

/// Groups entries by trial (first-appearance order), sorted by second.
pub fn trials(features: &DeFeatureSet) -> Result<Vec<(String, usize, Vec<&DeEntry>)>> {
    let mut out: Vec<(String, usize, Vec<&DeEntry>)> = Vec::new();
    for e in &features.entries {
        match out.iter_mut().find(|(id, _, _)| *id == e.trial_id) {
            Some((_, label, list)) => {
                if *label != e.label {
                    return Err(arg_err!("trial {} mixes labels {} and {}", e.trial_id, label, e.label));
                }
                list.push(e);
            }
            None => out.push((e.trial_id.clone(), e.label, vec![e])),
        }
    }
    for (_, _, list) in &mut out {
        list.sort_by_key(|e| e.second);
    }
    Ok(out)
}

/// Stack consecutive non-overlapping groups of `window` seconds into model
/// inputs. Bands become input channels, electrodes rows, seconds columns.
/// Windows never cross trial boundaries; leftover seconds are dropped.
pub fn window_samples(features: &DeFeatureSet, window: usize) -> Result<(Vec<Sample>, Vec<Warning>)> {
    if window == 0 {
        return Err(arg_err!("window must be at least one second"));
    }
    let mut samples = Vec::new();
    let mut warnings = Vec::new();
    for (trial_id, label, entries) in trials(features)? {
        if entries.len() < window {
            warnings.push(Warning::TrialTooShort { trial_id, seconds: entries.len(), window });
            continue;
        }
        for group in entries.chunks_exact(window) {
            let mut data = vec![0.0; FEATURE_DIM * window];
            for (t, entry) in group.iter().enumerate() {
                if entry.de.len() != FEATURE_DIM {
                    return Err(arg_err!("entry of trial {trial_id} has {} values, expected {FEATURE_DIM}", entry.de.len()));
                }
                for e in 0..ELECTRODES {
                    for b in 0..N_BANDS {
                        data[(b * ELECTRODES + e) * window + t] = entry.de[e * N_BANDS + b];
                    }
                }
            }
            samples.push(Sample {
                subject_id: features.subject_id.clone(),
                trial_id: trial_id.clone(),
                label,
                input: Tensor::new(vec![N_BANDS, ELECTRODES, window], data)?,
            });
        }
    }
    Ok((samples, warnings))
}

/// Scope of the z-score normalization applied to DE features.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Each subject's features standardized with that subject's statistics.
    #[default]
    PerSubject,
    /// One set of statistics pooled over all subjects passed in.
    Global,
    None,
}

fn feature_stats<'a>(entries: impl Iterator<Item = &'a DeEntry> + Clone) -> (Vec<f64>, Vec<f64>) {
    let n = entries.clone().count().max(1) as f64;
    let mut mean = vec![0.0; FEATURE_DIM];
    for e in entries.clone() {
        mean.iter_mut().zip(&e.de).for_each(|(m, v)| *m += v / n);
    }
    let mut var = vec![0.0; FEATURE_DIM];
    for e in entries {
        var.iter_mut().zip(&e.de).zip(&mean).for_each(|((s, v), m)| *s += (v - m).powi(2) / n);
    }
    let std = var.into_iter().map(|v| v.sqrt().max(1e-8)).collect();
    (mean, std)
}

fn apply_stats(set: &mut DeFeatureSet, mean: &[f64], std: &[f64]) {
    for e in &mut set.entries {
        for ((v, m), s) in e.de.iter_mut().zip(mean).zip(std) {
            *v = (*v - m) / s;
        }
    }
}

/// Per-feature z-scoring of `sets` in place.
pub fn normalize(sets: &mut [DeFeatureSet], mode: Normalization) {
    match mode {
        Normalization::None => {}
        Normalization::PerSubject => {
            for set in sets.iter_mut() {
                let (mean, std) = feature_stats(set.entries.iter());
                apply_stats(set, &mean, &std);
            }
        }
        Normalization::Global => {
            let (mean, std) = feature_stats(sets.iter().flat_map(|s| s.entries.iter()));
            for set in sets.iter_mut() {
                apply_stats(set, &mean, &std);
            }
        }
    }
}
