use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::{DeEntry, DeFeatureSet, EegRecording, Sample, ELECTRODES, FEATURE_DIM};
use crate::generator::GeneratorState;
use crate::msda::{EpochRecord, MsdaModel};
use crate::numerics::{ParamStore, Tensor};

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn check_field(value: &str, what: &str) -> Result<()> {
    if value.is_empty() || value.contains([',', '\n', '\r', '"']) {
        return Err(Error::Argument(format!("{what} `{value}` must be non-empty without commas, quotes or newlines")));
    }
    Ok(())
}

fn parse_err(path: &Path, line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Parse(format!("{}:{}: {msg}", path.display(), line))
}

fn parse_num<T: std::str::FromStr>(path: &Path, line: usize, field: &str, what: &str) -> Result<T> {
    field.trim().parse().map_err(|_| parse_err(path, line, format!("invalid {what} `{field}`")))
}

fn feature_header() -> String {
    let mut h = String::from("subject_id,trial_id,second,label");
    for i in 0..FEATURE_DIM {
        let _ = write!(h, ",de_{i}");
    }
    h
}

/// One row per entry: `subject_id,trial_id,second,label,de_0..de_309`.
pub fn write_feature_csv(path: &Path, set: &DeFeatureSet) -> Result<()> {
    check_field(&set.subject_id, "subject id")?;
    let mut out = feature_header();
    out.push('\n');
    for e in &set.entries {
        check_field(&e.trial_id, "trial id")?;
        if e.de.len() != FEATURE_DIM {
            return Err(Error::Dimension(format!("entry has {} features, expected {FEATURE_DIM}", e.de.len())));
        }
        let _ = write!(out, "{},{},{},{}", set.subject_id, e.trial_id, e.second, e.label);
        for v in &e.de {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    write_file(path, &out)
}

/// Feature sets in a feature CSV, one per subject id, in order of first appearance.
pub fn read_feature_csv(path: &Path) -> Result<Vec<DeFeatureSet>> {
    let text = read_file(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == feature_header() => {}
        _ => return Err(parse_err(path, 1, "missing or malformed feature header")),
    }
    let mut sets: Vec<DeFeatureSet> = Vec::new();
    for (i, line) in lines {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 + FEATURE_DIM {
            return Err(parse_err(path, n, format!("expected {} fields, got {}", 4 + FEATURE_DIM, fields.len())));
        }
        let de = fields[4..].iter().map(|f| parse_num::<f64>(path, n, f, "DE value")).collect::<Result<Vec<_>>>()?;
        if de.iter().any(|v| !v.is_finite()) {
            return Err(parse_err(path, n, "non-finite DE value"));
        }
        let entry = DeEntry {
            trial_id: fields[1].to_string(),
            second: parse_num(path, n, fields[2], "second")?,
            label: parse_num(path, n, fields[3], "label")?,
            de,
        };
        match sets.iter_mut().find(|s| s.subject_id == fields[0]) {
            Some(s) => s.entries.push(entry),
            None => sets.push(DeFeatureSet { subject_id: fields[0].to_string(), entries: vec![entry] }),
        }
    }
    Ok(sets)
}

/// Every `*.csv` feature file in `dir`, merged per subject and sorted by id.
pub fn read_feature_dir(dir: &Path) -> Result<Vec<DeFeatureSet>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| io_err(dir, e)))
        .collect::<Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "csv"));
    paths.sort();
    let mut merged: BTreeMap<String, Vec<DeEntry>> = BTreeMap::new();
    for p in &paths {
        for set in read_feature_csv(p)? {
            merged.entry(set.subject_id).or_default().extend(set.entries);
        }
    }
    if merged.is_empty() {
        return Err(Error::Argument(format!("no feature CSV files in {}", dir.display())));
    }
    Ok(merged.into_iter().map(|(subject_id, entries)| DeFeatureSet { subject_id, entries }).collect())
}

const EEG_HEADER: &str = "subject_id,trial_id,label,sample_rate";

/// Raw EEG blocks: the header line, one metadata line, then one line of
/// samples per channel. Blocks repeat for further recordings.
pub fn write_eeg_csv(path: &Path, recordings: &[EegRecording]) -> Result<()> {
    let mut out = String::new();
    for r in recordings {
        r.validate()?;
        check_field(&r.subject_id, "subject id")?;
        check_field(&r.trial_id, "trial id")?;
        let _ = writeln!(out, "{EEG_HEADER}\n{},{},{},{}", r.subject_id, r.trial_id, r.label, r.sample_rate);
        for ch in &r.channels {
            let row: Vec<String> = ch.iter().map(|v| v.to_string()).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
    }
    write_file(path, &out)
}

pub fn read_eeg_csv(path: &Path) -> Result<Vec<EegRecording>> {
    let text = read_file(path)?;
    let lines: Vec<&str> = text.lines().collect();
    let mut recs = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        if lines[i].trim().is_empty() {
            i += 1;
            continue;
        }
        if lines[i].trim_end() != EEG_HEADER {
            return Err(parse_err(path, i + 1, format!("expected block header `{EEG_HEADER}`")));
        }
        let meta_line = i + 2;
        let meta: Vec<&str> = lines.get(i + 1).ok_or_else(|| parse_err(path, meta_line, "missing metadata line"))?.split(',').collect();
        if meta.len() != 4 {
            return Err(parse_err(path, meta_line, format!("expected 4 metadata fields, got {}", meta.len())));
        }
        let mut channels = Vec::with_capacity(ELECTRODES);
        for c in 0..ELECTRODES {
            let n = i + 3 + c;
            let line = lines.get(n - 1).ok_or_else(|| parse_err(path, n, format!("block ends after {c} of {ELECTRODES} channels")))?;
            channels.push(line.split(',').map(|f| parse_num::<f64>(path, n, f, "sample")).collect::<Result<Vec<_>>>()?);
        }
        let rec = EegRecording {
            subject_id: meta[0].to_string(),
            trial_id: meta[1].to_string(),
            label: parse_num(path, meta_line, meta[2], "label")?,
            sample_rate: parse_num(path, meta_line, meta[3], "sample rate")?,
            channels,
        };
        rec.validate().map_err(|e| parse_err(path, meta_line, e))?;
        recs.push(rec);
        i += 2 + ELECTRODES;
    }
    Ok(recs)
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut out = format!("{}\n", EpochRecord::CSV_HEADER);
    for h in history {
        out.push_str(&h.csv_row());
        out.push('\n');
    }
    write_file(path, &out)
}

/// Samples of one subject exported under one domain role.
#[derive(Clone, Debug)]
pub struct EmbeddingRow<'a> {
    /// `source-{k}` or `target`.
    pub role: String,
    pub samples: Vec<&'a Sample>,
}

/// Eval-mode embeddings, one CSV row per sample:
/// `subject_id,role,label,emb_0..emb_{D-1}`, with label −1 for the target.
pub fn export_embeddings(path: &Path, model: &MsdaModel, params: &ParamStore, state: &GeneratorState, groups: &[EmbeddingRow<'_>]) -> Result<usize> {
    let d = model.generator().config().embed_dim;
    let mut out = String::from("subject_id,role,label");
    for i in 0..d {
        let _ = write!(out, ",emb_{i}");
    }
    out.push('\n');
    let mut state = state.clone();
    let mut rows = 0;
    for g in groups {
        if g.samples.is_empty() {
            continue;
        }
        let item = g.samples[0].input.shape().to_vec();
        let data: Vec<f64> = g.samples.iter().flat_map(|s| s.input.data().iter().copied()).collect();
        let inputs = Tensor::new(std::iter::once(g.samples.len()).chain(item).collect(), data)?;
        let emb = model.generator().embed_eval(params, &mut state, &inputs, 64)?;
        for (s, row) in g.samples.iter().zip(emb.data().chunks(d)) {
            let label = if g.role == "target" { "-1".to_string() } else { s.label.to_string() };
            let _ = write!(out, "{},{},{label}", s.subject_id, g.role);
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
            rows += 1;
        }
    }
    write_file(path, &out)?;
    Ok(rows)
}
