//! Little-endian binary checkpoints.
//!
//! Layout: 8-byte magic, `u32` version, `u32`-length-prefixed UTF-8 TOML
//! model spec, `u32` record count, then records of
//! (`u32` name length, name, `u32` rank, `u64` dims, `f64` payload), and
//! finally the dropout stream state as two `u64`s. Batchnorm running
//! statistics are stored as records under `running.`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{GeneratorConfig, GeneratorState};
use crate::msda::MsdaModel;
use crate::numerics::{ParamStore, RunningStats, StreamRng, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MSDATFck";
pub const CHECKPOINT_VERSION: u32 = 1;

const RUNNING: &str = "running.";

/// Enough to rebuild the model a checkpoint belongs to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub n_domains: usize,
    pub paired: bool,
    pub generator: GeneratorConfig,
}

impl ModelSpec {
    pub fn of(model: &MsdaModel) -> Self {
        Self { n_domains: model.n_domains(), paired: model.is_paired(), generator: model.generator().config().clone() }
    }

    pub fn build(&self) -> Result<MsdaModel> {
        if self.paired {
            MsdaModel::new(self.generator.clone(), self.n_domains)
        } else if self.n_domains == 1 {
            MsdaModel::single_head(self.generator.clone())
        } else {
            Err(Error::Config(format!("unpaired model with {} domains", self.n_domains)))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub params: ParamStore,
    pub state: GeneratorState,
}

impl Checkpoint {
    /// Check that this checkpoint holds exactly the parameters `model`
    /// expects, with matching shapes.
    pub fn verify_against(&self, model: &MsdaModel) -> Result<()> {
        let (expected, state) = model.init(0);
        let have: BTreeSet<&String> = self.params.names().collect();
        let want: BTreeSet<&String> = expected.names().collect();
        let mut missing: Vec<String> = want.difference(&have).map(|s| s.to_string()).collect();
        let mut extra: Vec<String> = have.difference(&want).map(|s| s.to_string()).collect();
        let have_stats: BTreeSet<&String> = self.state.running.keys().collect();
        let want_stats: BTreeSet<&String> = state.running.keys().collect();
        missing.extend(want_stats.difference(&have_stats).map(|s| format!("{RUNNING}{s}")));
        extra.extend(have_stats.difference(&want_stats).map(|s| format!("{RUNNING}{s}")));
        if !missing.is_empty() || !extra.is_empty() {
            return Err(Error::SchemaMismatch { missing, extra });
        }
        for (name, t) in expected.iter() {
            let got = self.params.get(name).expect("names checked").shape();
            if got != t.shape() {
                return Err(Error::Dimension(format!("parameter `{name}` has shape {got:?}, expected {:?}", t.shape())));
            }
        }
        for (name, st) in &state.running {
            if self.state.running[name].mean.len() != st.mean.len() {
                return Err(Error::Dimension(format!("running stats `{name}` have {} channels, expected {}", self.state.running[name].mean.len(), st.mean.len())));
            }
        }
        Ok(())
    }

    /// The model described by the spec, after checking the stored tensors fit it.
    pub fn model(&self) -> Result<MsdaModel> {
        let model = self.spec.build()?;
        self.verify_against(&model)?;
        Ok(model)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Argument(format!("value {v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_record(out: &mut Vec<u8>, name: &str, t: &Tensor) -> Result<()> {
    put_u32(out, name.len())?;
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.rank())?;
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

pub fn encode_checkpoint(model: &MsdaModel, params: &ParamStore, state: &GeneratorState) -> Result<Vec<u8>> {
    let spec = toml::to_string(&ModelSpec::of(model)).map_err(|e| Error::Parse(format!("model spec: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u32(&mut out, spec.len())?;
    out.extend_from_slice(spec.as_bytes());
    put_u32(&mut out, params.len() + 3 * state.running.len())?;
    for (name, t) in params.iter() {
        put_record(&mut out, name, t)?;
    }
    for (name, st) in &state.running {
        let c = st.mean.len();
        put_record(&mut out, &format!("{RUNNING}{name}.mean"), &Tensor::new(vec![c], st.mean.clone())?)?;
        put_record(&mut out, &format!("{RUNNING}{name}.var"), &Tensor::new(vec![c], st.var.clone())?)?;
        put_record(&mut out, &format!("{RUNNING}{name}.updates"), &Tensor::new(vec![1], vec![st.updates as f64])?)?;
    }
    out.extend_from_slice(&state.rng.seed.to_le_bytes());
    out.extend_from_slice(&state.rng.counter.to_le_bytes());
    Ok(out)
}

/// Writes to a temporary sibling first so a failed save never leaves a
/// truncated checkpoint behind.
pub fn save_checkpoint(path: &Path, model: &MsdaModel, params: &ParamStore, state: &GeneratorState) -> Result<()> {
    let bytes = encode_checkpoint(model, params, state)?;
    let tmp = path.with_extension("ckpt.tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::Io(format!("{}: {e}", tmp.display())))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Format { offset: self.pos, message: message.into() }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.fail(format!("truncated: need {n} bytes for {what}, {} left", self.buf.len() - self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self, what: &str) -> Result<&'a str> {
        let start = self.pos;
        let len = self.u32(what)?;
        let bytes = self.take(len, what)?;
        std::str::from_utf8(bytes).map_err(|_| Error::Format { offset: start, message: format!("{what} is not UTF-8") })
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format { offset: 0, message: "bad magic: not a checkpoint".into() });
    }
    let at = r.pos;
    let version = r.u32("version")? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format { offset: at, message: format!("unsupported version {version}, expected {CHECKPOINT_VERSION}") });
    }
    let at = r.pos;
    let spec: ModelSpec = toml::from_str(r.str("model spec")?).map_err(|e| Error::Format { offset: at, message: format!("model spec: {e}") })?;
    let count = r.u32("record count")?;
    let mut params = ParamStore::new();
    let mut stats: BTreeMap<String, RunningStats> = BTreeMap::new();
    for _ in 0..count {
        let at = r.pos;
        let name = r.str("record name")?.to_string();
        let rank = r.u32("rank")?;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            let d = r.u64("dimension")?;
            shape.push(usize::try_from(d).map_err(|_| r.fail("dimension overflows usize"))?);
        }
        let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| r.fail("tensor size overflows"))?;
        let payload = r.take(numel.checked_mul(8).ok_or_else(|| r.fail("tensor size overflows"))?, &format!("payload of `{name}`"))?;
        let data: Vec<f64> = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let bad = |m: String| Error::Format { offset: at, message: m };
        if let Some(rest) = name.strip_prefix(RUNNING) {
            let (layer, field) = rest.rsplit_once('.').ok_or_else(|| bad(format!("malformed running-stat record `{name}`")))?;
            let entry = stats.entry(layer.to_string()).or_insert_with(|| RunningStats { mean: Vec::new(), var: Vec::new(), updates: 0 });
            match field {
                "mean" => entry.mean = data,
                "var" => entry.var = data,
                "updates" if data.len() == 1 => entry.updates = data[0] as u64,
                _ => return Err(bad(format!("malformed running-stat record `{name}`"))),
            }
        } else {
            if params.get(&name).is_some() {
                return Err(bad(format!("duplicate record `{name}`")));
            }
            params.insert(name, Tensor::new(shape, data).map_err(|e| bad(e.to_string()))?);
        }
    }
    for (layer, st) in &stats {
        if st.mean.len() != st.var.len() || st.mean.is_empty() {
            return Err(r.fail(format!("incomplete running stats for `{layer}`")));
        }
    }
    let seed = r.u64("rng seed")?;
    let counter = r.u64("rng counter")?;
    if r.pos != bytes.len() {
        return Err(r.fail(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { spec, params, state: GeneratorState { running: stats, rng: StreamRng { seed, counter } } })
}

/// Read and validate a checkpoint, including that its tensors match its
/// own model spec.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let ck = decode_checkpoint(&bytes)?;
    ck.model()?;
    Ok(ck)
}
