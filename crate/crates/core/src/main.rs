use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rayon::prelude::*;

use msdatf::features::{extract_subject, synth_subject, EegRecording, Warning, N_CLASSES};
use msdatf::harness::{
    compute_metrics, export_embeddings, load_checkpoint, loso_folds, mean_std, prepare_cohort, read_eeg_csv, read_feature_dir, run_baseline,
    save_checkpoint, write_eeg_csv, write_feature_csv, write_history_csv, Baseline, BaselineRun, Cohort, EmbeddingRow, FoldSpec, MetricsReport,
    PipelineConfig,
};

#[derive(Parser)]
#[command(name = "msdatf", version, about = "Multi-source domain adaptation for EEG emotion classification")]
struct Cli {
    /// TOML file with [generator], [train], [synth] and [features] tables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides both train.seed and synth.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract DE features from raw EEG CSV files (or directories of them).
    Extract { inputs: Vec<PathBuf> },
    /// Generate a synthetic cohort as feature CSVs, or raw EEG with --raw.
    Synth {
        #[arg(long)]
        raw: bool,
    },
    /// Partition subjects into source groups by signature correlation.
    Group {
        #[arg(long)]
        features: PathBuf,
        #[arg(long, default_value_t = 4)]
        k: usize,
        /// Leave this subject out before grouping (the fold's target).
        #[arg(long)]
        exclude: Option<String>,
    },
    /// Train one model on the leave-one-out fold of `--target`.
    Train {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        target: String,
        #[arg(long, default_value = "msda")]
        mode: Baseline,
    },
    /// Score a checkpoint on one subject's samples.
    Eval {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        subject: String,
    },
    /// Leave-one-subject-out evaluation of baseline modes.
    Baseline {
        #[arg(long)]
        features: PathBuf,
        /// Comma-separated subset of source_only,single_source,target_only,msda.
        #[arg(long, value_delimiter = ',', default_value = "source_only,single_source,target_only,msda")]
        modes: Vec<Baseline>,
    },
    /// Write eval-mode embeddings of a fold's sources and target.
    ExportEmbeddings {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        target: String,
    },
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut config = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.train.seed = seed;
        config.synth.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn report_warnings(warnings: &[Warning]) {
    for w in warnings {
        eprintln!("warning: {w:?}");
    }
}

fn load_cohort(features: &Path, config: &PipelineConfig) -> Result<Cohort> {
    let sets = read_feature_dir(features)?;
    let (cohort, warnings) = prepare_cohort(sets, &config.features)?;
    report_warnings(&warnings);
    Ok(cohort)
}

fn fold_for(cohort: &Cohort, target: &str, k: usize) -> Result<FoldSpec> {
    let sigs: Vec<_> = cohort.signatures.values().cloned().collect();
    loso_folds(&sigs, k)?.into_iter().find(|f| f.target == target).with_context(|| format!("subject {target} not in cohort"))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

const METRICS_HEADER: &str = "n,accuracy,macro_f1,f1_0,f1_1,f1_2,confusion,absent_classes";

/// Confusion and absent classes are `;`-joined inside their fields.
fn metrics_fields(r: &MetricsReport) -> String {
    let f1: Vec<String> = r.per_class_f1.iter().map(f64::to_string).collect();
    let confusion: Vec<String> = r.confusion.iter().flatten().map(usize::to_string).collect();
    let absent: Vec<String> = r.absent_classes.iter().map(usize::to_string).collect();
    format!("{},{},{},{},{},{}", r.n, r.accuracy, r.macro_f1, f1.join(","), confusion.join(";"), absent.join(";"))
}

fn synth(cli: &Cli, config: &PipelineConfig, raw: bool) -> Result<()> {
    let s = &config.synth;
    for i in 0..s.n_subjects {
        let id = s.subject_id(i);
        let recs = synth_subject(s, i)?;
        if raw {
            write_eeg_csv(&cli.out_dir.join(format!("raw_{id}.csv")), &recs)?;
        } else {
            let (set, warnings) = extract_subject(&id, &recs)?;
            report_warnings(&warnings);
            write_feature_csv(&cli.out_dir.join(format!("features_{id}.csv")), &set)?;
        }
    }
    println!("wrote {} subjects to {}", s.n_subjects, cli.out_dir.display());
    Ok(())
}

fn extract(cli: &Cli, inputs: &[PathBuf]) -> Result<()> {
    let mut files = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(input)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
            found.retain(|p| p.extension().is_some_and(|e| e == "csv"));
            found.sort();
            files.extend(found);
        } else {
            files.push(input.clone());
        }
    }
    if files.is_empty() {
        bail!(msdatf::Error::Argument("no raw EEG CSV inputs".into()));
    }
    let mut recordings: Vec<EegRecording> = Vec::new();
    for f in &files {
        recordings.extend(read_eeg_csv(f)?);
    }
    let mut ids: Vec<String> = recordings.iter().map(|r| r.subject_id.clone()).collect();
    ids.sort();
    ids.dedup();
    for id in &ids {
        let recs: Vec<EegRecording> = recordings.iter().filter(|r| &r.subject_id == id).cloned().collect();
        let (set, warnings) = extract_subject(id, &recs)?;
        report_warnings(&warnings);
        write_feature_csv(&cli.out_dir.join(format!("features_{id}.csv")), &set)?;
    }
    println!("extracted {} subjects from {} files", ids.len(), files.len());
    Ok(())
}

fn group(cli: &Cli, config: &PipelineConfig, features: &Path, k: usize, exclude: Option<&str>) -> Result<()> {
    let cohort = load_cohort(features, config)?;
    let sigs: Vec<_> = cohort.signatures.values().filter(|s| Some(s.subject_id.as_str()) != exclude).cloned().collect();
    if let Some(x) = exclude {
        if sigs.len() == cohort.signatures.len() {
            bail!(msdatf::Error::Argument(format!("cannot exclude unknown subject {x}")));
        }
    }
    let part = msdatf::harness::group_sources(&sigs, k)?;
    let mut toml = format!("k = {}\n\n[groups]\n", part.k);
    for id in &part.subjects {
        let _ = writeln!(toml, "{id} = {}", part.group_of(id).expect("every subject is grouped"));
    }
    write(&cli.out_dir.join("partition.toml"), &toml)?;
    let mut csv = format!("subject_id,{}\n", part.subjects.join(","));
    for (id, row) in part.subjects.iter().zip(&part.corr) {
        let cells: Vec<String> = row.iter().map(f64::to_string).collect();
        let _ = writeln!(csv, "{id},{}", cells.join(","));
    }
    write(&cli.out_dir.join("correlation.csv"), &csv)?;
    for (g, members) in part.groups.iter().enumerate() {
        println!("group {g}: {}", members.join(" "));
    }
    Ok(())
}

fn train(cli: &Cli, config: &PipelineConfig, features: &Path, target: &str, mode: Baseline) -> Result<()> {
    let cohort = load_cohort(features, config)?;
    let fold = fold_for(&cohort, target, config.train.k)?;
    let run = run_baseline(mode, &fold, &cohort, &config.generator, &config.train)?;
    save_checkpoint(&cli.out_dir.join("model.ckpt"), &run.trainer.model, &run.trainer.params, &run.trainer.state)?;
    write_history_csv(&cli.out_dir.join("history.csv"), &run.history)?;
    println!("{mode} target={target} accuracy={} macro_f1={}", run.report.accuracy, run.report.macro_f1);
    Ok(())
}

fn eval(cli: &Cli, config: &PipelineConfig, features: &Path, checkpoint: &Path, subject: &str) -> Result<()> {
    let cohort = load_cohort(features, config)?;
    let ck = load_checkpoint(checkpoint)?;
    let model = ck.model()?;
    let data = cohort.domain(&[subject.to_string()], true)?;
    let mut state = ck.state.clone();
    let (_, pred) = model.predict(&ck.params, &mut state, &data.inputs)?;
    let report = compute_metrics(data.labels.as_deref().expect("labeled domain"), &pred)?;
    write(&cli.out_dir.join("metrics.csv"), &format!("subject_id,{METRICS_HEADER}\n{subject},{}\n", metrics_fields(&report)))?;
    println!("subject={subject} accuracy={} macro_f1={}", report.accuracy, report.macro_f1);
    for (c, row) in report.confusion.iter().enumerate().take(N_CLASSES) {
        println!("  true {c}: {row:?}");
    }
    Ok(())
}

fn baseline(cli: &Cli, config: &PipelineConfig, features: &Path, modes: &[Baseline]) -> Result<()> {
    let cohort = load_cohort(features, config)?;
    let sigs: Vec<_> = cohort.signatures.values().cloned().collect();
    let folds = loso_folds(&sigs, config.train.k)?;
    let jobs: Vec<(Baseline, &FoldSpec)> = modes.iter().flat_map(|&m| folds.iter().map(move |f| (m, f))).collect();
    let runs: Vec<BaselineRun> = jobs
        .par_iter()
        .map(|&(m, f)| run_baseline(m, f, &cohort, &config.generator, &config.train))
        .collect::<msdatf::Result<_>>()?;

    let mut folds_csv = format!("mode,target,{METRICS_HEADER}\n");
    let mut summary = String::from("mode,folds,accuracy_mean,accuracy_std,macro_f1_mean,macro_f1_std\n");
    for &mode in modes {
        let mut of_mode: Vec<&BaselineRun> = runs.iter().filter(|r| r.mode == mode).collect();
        of_mode.sort_by(|a, b| a.target.cmp(&b.target));
        for r in &of_mode {
            let _ = writeln!(folds_csv, "{mode},{},{}", r.target, metrics_fields(&r.report));
            write_history_csv(&cli.out_dir.join(format!("history_{mode}_{}.csv", r.target)), &r.history)?;
        }
        let acc: Vec<f64> = of_mode.iter().map(|r| r.report.accuracy).collect();
        let f1: Vec<f64> = of_mode.iter().map(|r| r.report.macro_f1).collect();
        let ((am, asd), (fm, fsd)) = (mean_std(&acc), mean_std(&f1));
        let _ = writeln!(summary, "{mode},{},{am},{asd},{fm},{fsd}", of_mode.len());
        println!("{mode:<14} accuracy {am:.4} ± {asd:.4}   macro-F1 {fm:.4} ± {fsd:.4}");
    }
    write(&cli.out_dir.join("baseline_folds.csv"), &folds_csv)?;
    write(&cli.out_dir.join("baseline_summary.csv"), &summary)?;
    Ok(())
}

fn embeddings(cli: &Cli, config: &PipelineConfig, features: &Path, checkpoint: &Path, target: &str) -> Result<()> {
    let cohort = load_cohort(features, config)?;
    let ck = load_checkpoint(checkpoint)?;
    let model = ck.model()?;
    let fold = fold_for(&cohort, target, config.train.k)?;
    let mut rows = Vec::new();
    for (g, members) in fold.partition.groups.iter().enumerate() {
        for id in members {
            rows.push(EmbeddingRow { role: format!("source-{g}"), samples: cohort.samples[id].iter().collect() });
        }
    }
    rows.push(EmbeddingRow { role: "target".into(), samples: cohort.samples[target].iter().collect() });
    let n = export_embeddings(&cli.out_dir.join("embeddings.csv"), &model, &ck.params, &ck.state, &rows)?;
    println!("wrote {n} embeddings");
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let config = load_config(cli)?;
    std::fs::create_dir_all(&cli.out_dir).with_context(|| format!("creating {}", cli.out_dir.display()))?;
    match &cli.command {
        Command::Synth { raw } => synth(cli, &config, *raw),
        Command::Extract { inputs } => extract(cli, inputs),
        Command::Group { features, k, exclude } => group(cli, &config, features, *k, exclude.as_deref()),
        Command::Train { features, target, mode } => train(cli, &config, features, target, *mode),
        Command::Eval { features, checkpoint, subject } => eval(cli, &config, features, checkpoint, subject),
        Command::Baseline { features, modes } => baseline(cli, &config, features, modes),
        Command::ExportEmbeddings { features, checkpoint, target } => embeddings(cli, &config, features, checkpoint, target),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.chain().find_map(|c| c.downcast_ref::<msdatf::Error>()).map_or(if e.is::<std::io::Error>() { "io" } else { "other" }, |m| m.kind());
            let message = format!("{e:#}").replace(['\n', '\r'], " ");
            eprintln!("error: kind={kind} message={message}");
            ExitCode::FAILURE
        }
    }
}
