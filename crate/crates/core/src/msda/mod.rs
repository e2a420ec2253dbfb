//! Moment-matching multi-source domain adaptation with classifier pairs.
//!
//! Each source domain `i` owns a pair of linear softmax heads `(a, b)`.
//! Training alternates three steps per iteration: supervised training of
//! everything plus moment alignment; head-only maximization of the pairs'
//! disagreement on target data; generator-only minimization of it.

mod losses;
mod train;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::features::{Sample, N_CLASSES};
use crate::generator::{he_uniform, Generator, GeneratorConfig, GeneratorState, Pass};
use crate::numerics::rng::stream;
use crate::numerics::{Bound, ParamStore, Tape, Tensor, Var};

pub use losses::{average_heads, discrepancy, discrepancy_value, md_loss, moment, moment_distance, pair_coefficient};
pub use train::{train_msda, train_supervised, EpochRecord, TrainOutcome, Trainer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the moment distance in the step-1 objective.
    pub lambda: f64,
    /// Highest moment order matched.
    pub moment_order: usize,
    /// Number of source domains (groups).
    pub k: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub step3_repeats: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lambda: 0.5, moment_order: 2, k: 4, batch_size: 32, learning_rate: 1e-4, epochs: 350, step3_repeats: 4, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad(format!("lambda must be a finite non-negative number, got {}", self.lambda));
        }
        if self.moment_order == 0 {
            return bad("moment_order must be at least 1".into());
        }
        if self.k < 2 {
            return bad(format!("k must be at least 2, got {}", self.k));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive".into());
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.step3_repeats == 0 {
            return bad("step3_repeats must be at least 1".into());
        }
        Ok(())
    }
}

/// Generator inputs `[N, bands, electrodes, window]` of one domain, with
/// labels for source domains.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainData {
    pub inputs: Tensor,
    pub labels: Option<Vec<usize>>,
}

impl DomainData {
    pub fn new(inputs: Tensor, labels: Option<Vec<usize>>) -> Result<Self> {
        if inputs.rank() != 4 {
            return Err(Error::Dimension(format!("domain inputs must be [N, C, H, W], got {:?}", inputs.shape())));
        }
        if let Some(l) = &labels {
            if l.len() != inputs.shape()[0] {
                return Err(arg_err!("{} labels for {} inputs", l.len(), inputs.shape()[0]));
            }
            if let Some(bad) = l.iter().find(|&&y| y >= N_CLASSES) {
                return Err(Error::Index(format!("label {bad} outside 0..{N_CLASSES}")));
            }
        }
        Ok(Self { inputs, labels })
    }

    /// Stack samples into one domain; labels kept only if `labeled`.
    pub fn from_samples(samples: &[&Sample], labeled: bool) -> Result<Self> {
        let first = samples.first().ok_or_else(|| arg_err!("domain has no samples"))?;
        let item = first.input.shape().to_vec();
        let mut data = Vec::with_capacity(samples.len() * first.input.numel());
        for s in samples {
            if s.input.shape() != item.as_slice() {
                return Err(Error::Dimension(format!("sample shape {:?} differs from {item:?}", s.input.shape())));
            }
            data.extend_from_slice(s.input.data());
        }
        let shape = std::iter::once(samples.len()).chain(item).collect();
        Self::new(Tensor::new(shape, data)?, labeled.then(|| samples.iter().map(|s| s.label).collect()))
    }

    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows `idx` (in that order).
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        let per = self.inputs.numel() / self.len();
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            if i >= self.len() {
                return Err(Error::Index(format!("row {i} outside domain of {}", self.len())));
            }
            data.extend_from_slice(&self.inputs.data()[i * per..(i + 1) * per]);
        }
        let mut shape = self.inputs.shape().to_vec();
        shape[0] = idx.len();
        let labels = self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect());
        Ok(Self { inputs: Tensor::new(shape, data)?, labels })
    }

    /// Up to `n` rows drawn without replacement, in a seeded order.
    pub fn subsample(&self, n: usize, seed: u64, salt: u64) -> Result<Self> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut stream(seed, salt));
        idx.truncate(n.min(self.len()));
        self.select(&idx)
    }

    /// Concatenation along the sample axis; labels kept only if all parts have them.
    pub fn concat(parts: &[&DomainData]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| arg_err!("nothing to concatenate"))?;
        let item = &first.inputs.shape()[1..];
        let mut data = Vec::new();
        let mut labels = Some(Vec::new());
        for p in parts {
            if &p.inputs.shape()[1..] != item {
                return Err(Error::Dimension(format!("cannot concatenate {:?} with {:?}", p.inputs.shape(), first.inputs.shape())));
            }
            data.extend_from_slice(p.inputs.data());
            match (&mut labels, &p.labels) {
                (Some(all), Some(l)) => all.extend_from_slice(l),
                _ => labels = None,
            }
        }
        let n = parts.iter().map(|p| p.len()).sum();
        let shape = std::iter::once(n).chain(item.iter().copied()).collect();
        Self::new(Tensor::new(shape, data)?, labels)
    }

    fn require_labels(&self, what: &str) -> Result<&[usize]> {
        self.labels.as_deref().ok_or_else(|| arg_err!("{what} batch has no labels"))
    }
}

/// Generator plus classifier heads. A paired model has heads
/// `head.{i}.a` and `head.{i}.b` for every source domain `i`; an unpaired
/// model has the single head `head.0.a` and is trained purely supervised.
#[derive(Clone, Debug, PartialEq)]
pub struct MsdaModel {
    generator: Generator,
    n_domains: usize,
    paired: bool,
}

/// Step-1 objective and its parts.
#[derive(Clone, Copy, Debug)]
pub struct Step1Loss {
    pub total: Var,
    pub ce: Var,
    /// Absent when λ = 0: the target batch is then not forwarded at all.
    pub md: Option<Var>,
}

pub fn is_head_param(name: &str) -> bool {
    name.starts_with("head.")
}

impl MsdaModel {
    pub fn new(config: GeneratorConfig, n_domains: usize) -> Result<Self> {
        if n_domains == 0 {
            return Err(arg_err!("need at least one source domain"));
        }
        Ok(Self { generator: Generator::new(config)?, n_domains, paired: true })
    }

    /// One generator and one classifier, for plain supervised training.
    pub fn single_head(config: GeneratorConfig) -> Result<Self> {
        Ok(Self { generator: Generator::new(config)?, n_domains: 1, paired: false })
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn n_domains(&self) -> usize {
        self.n_domains
    }

    pub fn is_paired(&self) -> bool {
        self.paired
    }

    /// Parameter prefixes of every head, domain-major.
    pub fn heads(&self) -> Vec<String> {
        let sides: &[&str] = if self.paired { &["a", "b"] } else { &["a"] };
        (0..self.n_domains).flat_map(|i| sides.iter().map(move |s| format!("head.{i}.{s}"))).collect()
    }

    /// Generator parameters depend on `seed` alone, so models that differ
    /// only in their heads start from the same generator.
    pub fn init(&self, seed: u64) -> (ParamStore, GeneratorState) {
        let (mut p, state) = self.generator.init(seed);
        let d = self.generator.config().embed_dim;
        let mut rng = stream(seed, 0x4ead);
        for head in self.heads() {
            p.insert(format!("{head}.weight"), he_uniform(&[d, N_CLASSES], d, &mut rng));
            p.insert(format!("{head}.bias"), Tensor::zeros(&[N_CLASSES]));
        }
        (p, state)
    }

    /// Softmax output `[N, 3]` of head `head` on embeddings `[N, D]`.
    pub fn head_probs(&self, tape: &mut Tape, params: &Bound, emb: Var, head: &str) -> Result<Var> {
        let logits = tape.matmul(emb, params.var(&format!("{head}.weight"))?)?;
        let logits = tape.add(logits, params.var(&format!("{head}.bias"))?)?;
        tape.softmax(logits, 1)
    }

    fn pair(&self, i: usize) -> [String; 2] {
        [format!("head.{i}.a"), format!("head.{i}.b")]
    }

    fn domain_heads(&self, i: usize) -> Vec<String> {
        if self.paired { self.pair(i).to_vec() } else { vec![format!("head.{i}.a")] }
    }

    fn check_sources(&self, sources: &[DomainData]) -> Result<()> {
        if sources.len() != self.n_domains {
            return Err(arg_err!("{} source batches for a model with {} domains", sources.len(), self.n_domains));
        }
        for (i, s) in sources.iter().enumerate() {
            if s.is_empty() {
                return Err(arg_err!("source batch {i} is empty"));
            }
            s.require_labels(&format!("source {i}"))?;
        }
        Ok(())
    }

    fn check_target(target: &DomainData) -> Result<()> {
        if target.is_empty() {
            return Err(arg_err!("target batch is empty"));
        }
        Ok(())
    }

    /// One generator pass over the concatenation of `parts`, split back into
    /// per-part embeddings.
    fn embed_parts(&self, tape: &mut Tape, params: &Bound, state: &mut GeneratorState, parts: &[&DomainData], pass: Pass) -> Result<Vec<Var>> {
        let all = DomainData::concat(parts)?;
        let x = tape.constant(all.inputs);
        let emb = self.generator.generate(tape, params, state, x, pass)?;
        let mut out = Vec::with_capacity(parts.len());
        let mut start = 0;
        for p in parts {
            out.push(tape.narrow(emb, 0, start, p.len())?);
            start += p.len();
        }
        Ok(out)
    }

    fn source_ce(&self, tape: &mut Tape, params: &Bound, sources: &[DomainData], embs: &[Var]) -> Result<Var> {
        let mut terms = Vec::new();
        for (i, (s, &e)) in sources.iter().zip(embs).enumerate() {
            let labels = s.require_labels(&format!("source {i}"))?;
            for head in self.domain_heads(i) {
                let probs = self.head_probs(tape, params, e, &head)?;
                terms.push(tape.cross_entropy(probs, labels)?);
            }
        }
        sum_vars(tape, &terms)
    }

    fn pair_discrepancies(&self, tape: &mut Tape, params: &Bound, target_emb: Var) -> Result<Var> {
        if !self.paired {
            return Err(Error::State("discrepancy steps need a paired model".into()));
        }
        let mut terms = Vec::new();
        for i in 0..self.n_domains {
            let [a, b] = self.pair(i);
            let pa = self.head_probs(tape, params, target_emb, &a)?;
            let pb = self.head_probs(tape, params, target_emb, &b)?;
            terms.push(discrepancy(tape, pa, pb)?);
        }
        sum_vars(tape, &terms)
    }

    /// `Σᵢ CE(heads of i on source i) + λ·MD(source embeddings, target embeddings)`,
    /// with batch statistics updated (`Pass::Train`).
    #[allow(clippy::too_many_arguments)]
    pub fn step1_loss(
        &self,
        tape: &mut Tape,
        params: &Bound,
        state: &mut GeneratorState,
        sources: &[DomainData],
        target: &DomainData,
        lambda: f64,
        order: usize,
    ) -> Result<Step1Loss> {
        self.check_sources(sources)?;
        let mut parts: Vec<&DomainData> = sources.iter().collect();
        if lambda > 0.0 {
            Self::check_target(target)?;
            parts.push(target);
        }
        let embs = self.embed_parts(tape, params, state, &parts, Pass::Train)?;
        let ce = self.source_ce(tape, params, sources, &embs[..sources.len()])?;
        if lambda == 0.0 {
            return Ok(Step1Loss { total: ce, ce, md: None });
        }
        let md = md_loss(tape, &embs[..sources.len()], embs[sources.len()], order)?;
        let weighted = tape.scale(md, lambda);
        let total = tape.add(ce, weighted)?;
        Ok(Step1Loss { total, ce, md: Some(md) })
    }

    /// `Σᵢ CE − Σᵢ disc(aᵢ(T), bᵢ(T))`; batch statistics used but not recorded.
    pub fn step2_loss(&self, tape: &mut Tape, params: &Bound, state: &mut GeneratorState, sources: &[DomainData], target: &DomainData) -> Result<Var> {
        self.check_sources(sources)?;
        Self::check_target(target)?;
        let mut parts: Vec<&DomainData> = sources.iter().collect();
        parts.push(target);
        let embs = self.embed_parts(tape, params, state, &parts, Pass::TrainFrozenStats)?;
        let ce = self.source_ce(tape, params, sources, &embs[..sources.len()])?;
        let disc = self.pair_discrepancies(tape, params, embs[sources.len()])?;
        tape.sub(ce, disc)
    }

    /// `Σᵢ disc(aᵢ(T), bᵢ(T))`; batch statistics used but not recorded.
    pub fn step3_loss(&self, tape: &mut Tape, params: &Bound, state: &mut GeneratorState, target: &DomainData) -> Result<Var> {
        Self::check_target(target)?;
        let embs = self.embed_parts(tape, params, state, &[target], Pass::TrainFrozenStats)?;
        self.pair_discrepancies(tape, params, embs[0])
    }

    /// Head outputs on eval-mode embeddings, in [`MsdaModel::heads`] order.
    pub fn head_outputs(&self, params: &ParamStore, state: &mut GeneratorState, inputs: &Tensor) -> Result<Vec<Tensor>> {
        let emb = self.generator.embed_eval(params, state, inputs, 64)?;
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, |_| false);
        let e = tape.constant(emb);
        self.heads()
            .iter()
            .map(|h| self.head_probs(&mut tape, &bound, e, h).map(|v| tape.value(v).clone()))
            .collect()
    }

    /// Averaged head probabilities `[N, 3]` and argmax labels.
    pub fn predict(&self, params: &ParamStore, state: &mut GeneratorState, inputs: &Tensor) -> Result<(Tensor, Vec<usize>)> {
        average_heads(&self.head_outputs(params, state, inputs)?)
    }

    /// Summed pair discrepancy on eval-mode embeddings of `inputs`.
    pub fn target_discrepancy(&self, params: &ParamStore, state: &mut GeneratorState, inputs: &Tensor) -> Result<f64> {
        if !self.paired {
            return Err(Error::State("discrepancy needs a paired model".into()));
        }
        let outs = self.head_outputs(params, state, inputs)?;
        outs.chunks(2).map(|p| discrepancy_value(&p[0], &p[1])).sum()
    }
}

fn sum_vars(tape: &mut Tape, vars: &[Var]) -> Result<Var> {
    let (&first, rest) = vars.split_first().ok_or_else(|| arg_err!("empty loss sum"))?;
    rest.iter().try_fold(first, |acc, &v| tape.add(acc, v))
}

#[cfg(test)]
mod tests;
