use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use super::{is_head_param, md_loss, DomainData, MsdaModel, TrainConfig};
use crate::error::{arg_err, Error, Result};
use crate::generator::GeneratorState;
use crate::numerics::{Adam, Optimizer, ParamStore, StreamRng, Tape, Tensor, Var};

/// A model with its parameters, running state and optimizer.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: MsdaModel,
    pub params: ParamStore,
    pub state: GeneratorState,
    pub lambda: f64,
    pub moment_order: usize,
    /// One Adam state per parameter, shared by every step that updates it.
    optimizer: Adam,
}

impl Trainer {
    /// Fresh parameters from `config.seed`.
    pub fn new(model: MsdaModel, config: &TrainConfig) -> Self {
        let (params, state) = model.init(config.seed);
        Self::from_parts(model, params, state, config)
    }

    pub fn from_parts(model: MsdaModel, params: ParamStore, state: GeneratorState, config: &TrainConfig) -> Self {
        Self {
            model,
            params,
            state,
            lambda: config.lambda,
            moment_order: config.moment_order,
            optimizer: Adam::new(config.learning_rate),
        }
    }

    fn gradients(&mut self, trainable: impl Fn(&str) -> bool, build: impl FnOnce(&MsdaModel, &mut Tape, &crate::numerics::Bound, &mut GeneratorState) -> Result<Var>) -> Result<(f64, BTreeMap<String, Tensor>)> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, trainable);
        let loss = build(&self.model, &mut tape, &bound, &mut self.state)?;
        let value = tape.value(loss).item()?;
        let grads = tape.backward(loss)?;
        Ok((value, bound.collect_grads(&tape, &grads)))
    }

    /// Step-1 loss value, its parts, and gradients for every parameter.
    #[allow(clippy::type_complexity)]
    pub fn step1_gradients(&mut self, sources: &[DomainData], target: &DomainData) -> Result<(f64, f64, Option<f64>, BTreeMap<String, Tensor>)> {
        let (lambda, order) = (self.lambda, self.moment_order);
        let mut parts = (0.0, None);
        let (total, grads) = self.gradients(
            |_| true,
            |m, tape, bound, state| {
                let l = m.step1_loss(tape, bound, state, sources, target, lambda, order)?;
                parts = (tape.value(l.ce).item()?, l.md.map(|v| tape.value(v).item()).transpose()?);
                Ok(l.total)
            },
        )?;
        Ok((total, parts.0, parts.1, grads))
    }

    /// Supervised loss plus λ·MD; updates the generator and all heads.
    /// Returns `(CE, MD)` before the update.
    pub fn step1(&mut self, sources: &[DomainData], target: &DomainData) -> Result<(f64, Option<f64>)> {
        let (_, ce, md, grads) = self.step1_gradients(sources, target)?;
        self.optimizer.step(&mut self.params, &grads)?;
        Ok((ce, md))
    }

    /// Minimize source CE minus target pair discrepancy over heads only.
    /// Returns the objective before the update.
    pub fn step2(&mut self, sources: &[DomainData], target: &DomainData) -> Result<f64> {
        let (value, grads) = self.gradients(is_head_param, |m, tape, bound, state| m.step2_loss(tape, bound, state, sources, target))?;
        self.optimizer.step(&mut self.params, &grads)?;
        Ok(value)
    }

    /// `repeats` generator-only steps minimizing the target pair
    /// discrepancy. Returns the discrepancy before the last update.
    pub fn step3(&mut self, target: &DomainData, repeats: usize) -> Result<f64> {
        if repeats == 0 {
            return Err(arg_err!("step 3 needs at least one repeat"));
        }
        let mut last = 0.0;
        for _ in 0..repeats {
            let (value, grads) = self.gradients(|n| !is_head_param(n), |m, tape, bound, state| m.step3_loss(tape, bound, state, target))?;
            self.optimizer.step(&mut self.params, &grads)?;
            last = value;
        }
        Ok(last)
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.optimizer.lr = lr;
    }

    /// Averaged head probabilities and labels for `inputs`.
    pub fn predict(&mut self, inputs: &Tensor) -> Result<(Tensor, Vec<usize>)> {
        self.model.predict(&self.params, &mut self.state, inputs)
    }

    pub fn accuracy(&mut self, inputs: &Tensor, labels: &[usize]) -> Result<f64> {
        let (_, pred) = self.predict(inputs)?;
        Ok(pred.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len().max(1) as f64)
    }

    /// MD on eval-mode embeddings of each source and the target.
    pub fn eval_moment_distance(&mut self, sources: &[DomainData], target: &DomainData) -> Result<f64> {
        let g = self.model.generator();
        let embs: Vec<Tensor> = sources.iter().map(|s| g.embed_eval(&self.params, &mut self.state, &s.inputs, 64)).collect::<Result<_>>()?;
        let t = g.embed_eval(&self.params, &mut self.state, &target.inputs, 64)?;
        let mut tape = Tape::new();
        let s: Vec<Var> = embs.into_iter().map(|e| tape.constant(e)).collect();
        let t = tape.constant(t);
        let md = md_loss(&mut tape, &s, t, self.moment_order)?;
        tape.value(md).item()
    }
}

/// Per-epoch training trace.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean step-1 classification loss over the epoch's iterations.
    pub ce_loss: f64,
    /// Moment distance on eval-mode embeddings of the monitor subsets.
    pub md: f64,
    /// Mean summed target discrepancy seen by step 3 (0 for supervised runs).
    pub discrepancy: f64,
    pub target_accuracy: Option<f64>,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,ce_loss,md,discrepancy,target_accuracy";

    pub fn csv_row(&self) -> String {
        let acc = self.target_accuracy.map(|a| format!("{a}")).unwrap_or_default();
        format!("{},{},{},{},{}", self.epoch, self.ce_loss, self.md, self.discrepancy, acc)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub history: Vec<EpochRecord>,
}

/// Samples per domain used for the per-epoch MD trace.
const MONITOR_SAMPLES: usize = 64;

/// Per-epoch batch schedule: every domain is reshuffled each epoch; the
/// epoch lasts as long as the longest domain needs, shorter domains cycle.
struct Schedule {
    perms: Vec<Vec<usize>>,
    batch: usize,
    iters: usize,
}

impl Schedule {
    fn new(lens: &[usize], batch: usize, rng: &mut StreamRng) -> Self {
        let perms = lens
            .iter()
            .map(|&n| {
                let mut p: Vec<usize> = (0..n).collect();
                p.shuffle(&mut rng.next_stream());
                p
            })
            .collect();
        let iters = lens.iter().map(|&n| n.div_ceil(batch)).max().unwrap_or(0);
        Self { perms, batch, iters }
    }

    fn indices(&self, domain: usize, iter: usize) -> Vec<usize> {
        let perm = &self.perms[domain];
        let b = self.batch.min(perm.len());
        (0..b).map(|j| perm[(iter * b + j) % perm.len()]).collect()
    }
}

/// Full three-step adaptation loop. `target_labels`, when given, are used
/// only to report per-epoch target accuracy.
pub fn train_msda(model: MsdaModel, sources: &[DomainData], target: &DomainData, config: &TrainConfig, target_labels: Option<&[usize]>) -> Result<TrainOutcome> {
    if !model.is_paired() || model.n_domains() != sources.len() {
        return Err(arg_err!("model with {} domains cannot train on {} sources", model.n_domains(), sources.len()));
    }
    if sources.iter().any(|s| s.labels.is_none() || s.is_empty()) || target.is_empty() {
        return Err(arg_err!("every source needs labeled samples and the target needs samples"));
    }
    let mut trainer = Trainer::new(model, config);
    let mut rng = StreamRng::new(config.seed ^ 0x5c4e_d01e);
    let monitor_src: Vec<DomainData> = sources
        .iter()
        .enumerate()
        .map(|(i, s)| s.subsample(MONITOR_SAMPLES, config.seed, 0x3000 + i as u64))
        .collect::<Result<_>>()?;
    let monitor_tgt = target.subsample(MONITOR_SAMPLES, config.seed, 0x3fff)?;
    let unlabeled_target = DomainData { inputs: target.inputs.clone(), labels: None };

    let mut lens: Vec<usize> = sources.iter().map(DomainData::len).collect();
    lens.push(target.len());
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let sched = Schedule::new(&lens, config.batch_size, &mut rng);
        let (mut ce_sum, mut disc_sum) = (0.0, 0.0);
        for it in 0..sched.iters {
            let batches: Vec<DomainData> = sources.iter().enumerate().map(|(i, s)| s.select(&sched.indices(i, it))).collect::<Result<_>>()?;
            let tb = unlabeled_target.select(&sched.indices(sources.len(), it))?;
            let (ce, _) = trainer.step1(&batches, &tb)?;
            trainer.step2(&batches, &tb)?;
            let disc = trainer.step3(&tb, config.step3_repeats)?;
            ce_sum += ce;
            disc_sum += disc;
        }
        let md = trainer.eval_moment_distance(&monitor_src, &monitor_tgt)?;
        let target_accuracy = target_labels.map(|l| trainer.accuracy(&target.inputs, l)).transpose()?;
        history.push(EpochRecord {
            epoch,
            ce_loss: ce_sum / sched.iters as f64,
            md,
            discrepancy: disc_sum / sched.iters as f64,
            target_accuracy,
        });
    }
    Ok(TrainOutcome { trainer, history })
}

/// Plain supervised training of a single-head model on `data`, with the
/// same batch size and epoch budget as the adaptation loop. `monitor`
/// (inputs, labels) is evaluated after each epoch for the trace only.
pub fn train_supervised(model: MsdaModel, data: &DomainData, config: &TrainConfig, monitor: Option<(&Tensor, &[usize])>) -> Result<TrainOutcome> {
    if model.is_paired() || model.n_domains() != 1 {
        return Err(Error::State("supervised training expects a single-head model".into()));
    }
    if data.labels.is_none() || data.is_empty() {
        return Err(arg_err!("supervised training needs labeled samples"));
    }
    let cfg = TrainConfig { lambda: 0.0, ..config.clone() };
    let mut trainer = Trainer::new(model, &cfg);
    let mut rng = StreamRng::new(config.seed ^ 0x5c4e_d01e);
    let no_target = DomainData { inputs: data.inputs.clone(), labels: None };
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let sched = Schedule::new(&[data.len()], config.batch_size, &mut rng);
        let mut ce_sum = 0.0;
        for it in 0..sched.iters {
            let batch = data.select(&sched.indices(0, it))?;
            let (ce, _) = trainer.step1(std::slice::from_ref(&batch), &no_target)?;
            ce_sum += ce;
        }
        let target_accuracy = monitor.map(|(x, y)| trainer.accuracy(x, y)).transpose()?;
        history.push(EpochRecord { epoch, ce_loss: ce_sum / sched.iters as f64, md: 0.0, discrepancy: 0.0, target_accuracy });
    }
    Ok(TrainOutcome { trainer, history })
}
