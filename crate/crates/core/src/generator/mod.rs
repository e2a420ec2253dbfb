//! Feature generator: two convolutional blocks followed by a patch-embedded
//! transformer encoder, mean-pooled to one embedding per input.

mod config;

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{dim_err, Error, Result};
use crate::numerics::rng::stream;
use crate::numerics::{Bound, Mode, NormMode, ParamStore, RunningStats, StreamRng, Tape, Tensor, Var};

pub use config::GeneratorConfig;

/// How a forward pass treats batchnorm statistics and dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pass {
    /// Batch statistics, running stats updated, dropout on.
    Train,
    /// Batch statistics, running stats left untouched, dropout on.
    TrainFrozenStats,
    /// Running statistics, dropout off.
    Eval,
}

impl Pass {
    fn dropout_mode(self) -> Mode {
        match self {
            Pass::Eval => Mode::Eval,
            _ => Mode::Train,
        }
    }

    fn norm_mode(self) -> NormMode {
        match self {
            Pass::Train => NormMode::Train,
            Pass::TrainFrozenStats => NormMode::TrainFrozen,
            Pass::Eval => NormMode::Eval,
        }
    }
}

/// Non-trainable generator state: batchnorm running statistics and the
/// dropout stream.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorState {
    pub running: BTreeMap<String, RunningStats>,
    pub rng: StreamRng,
}

pub(crate) fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

fn conv_layers(config: &GeneratorConfig) -> Vec<(String, usize, usize)> {
    let mut layers = Vec::new();
    let mut cin = config.input_shape[0];
    for (block, filters) in [("c1", &config.c1_filters), ("c2", &config.c2_filters)] {
        for (j, &cout) in filters.iter().enumerate() {
            layers.push((format!("gen.{block}.conv{j}"), cin, cout));
            cin = cout;
        }
    }
    layers
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    config: GeneratorConfig,
}

impl Generator {
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    /// Fresh parameters: He-uniform conv and linear weights, zero biases,
    /// unit/zero norm affines, `0.02·N(0,1)` positional embeddings.
    pub fn init(&self, seed: u64) -> (ParamStore, GeneratorState) {
        let c = &self.config;
        let mut rng = stream(seed, 0x6e6e);
        let mut p = ParamStore::new();
        let mut running = BTreeMap::new();
        let k = c.kernel_size;
        for (name, cin, cout) in conv_layers(c) {
            p.insert(format!("{name}.weight"), he_uniform(&[cout, cin, k, k], cin * k * k, &mut rng));
            p.insert(format!("{name}.bn.gamma"), Tensor::full(&[cout], 1.0));
            p.insert(format!("{name}.bn.beta"), Tensor::zeros(&[cout]));
            running.insert(format!("{name}.bn"), RunningStats::new(cout));
        }
        let (d, n, plen) = (c.embed_dim, c.n_patches(), c.patch_len());
        p.insert("gen.patch.weight", he_uniform(&[plen, d], plen, &mut rng));
        p.insert("gen.patch.bias", Tensor::zeros(&[d]));
        if c.positional_embedding {
            p.insert("gen.pos", Tensor::from_fn(&[n, d], |_| { let z: f64 = StandardNormal.sample(&mut rng); 0.02 * z }));
        }
        for b in 0..c.depth {
            let pre = format!("gen.block{b}");
            for ln in ["ln1", "ln2"] {
                p.insert(format!("{pre}.{ln}.gamma"), Tensor::full(&[d], 1.0));
                p.insert(format!("{pre}.{ln}.beta"), Tensor::zeros(&[d]));
            }
            for w in ["wq", "wk", "wv", "wo"] {
                p.insert(format!("{pre}.attn.{w}"), he_uniform(&[d, d], d, &mut rng));
            }
            p.insert(format!("{pre}.attn.bo"), Tensor::zeros(&[d]));
            let widths: Vec<usize> = std::iter::once(d).chain(c.mlp_units.iter().copied()).chain(std::iter::once(d)).collect();
            for (j, pair) in widths.windows(2).enumerate() {
                p.insert(format!("{pre}.mlp.fc{j}.weight"), he_uniform(&[pair[0], pair[1]], pair[0], &mut rng));
                p.insert(format!("{pre}.mlp.fc{j}.bias"), Tensor::zeros(&[pair[1]]));
            }
        }
        p.insert("gen.ln_f.gamma", Tensor::full(&[d], 1.0));
        p.insert("gen.ln_f.beta", Tensor::zeros(&[d]));
        (p, GeneratorState { running, rng: StreamRng::new(seed ^ 0xd50f) })
    }

    /// Convolutional blocks: each layer is conv(k, padding) → batchnorm → ReLU;
    /// each block ends with maxpool(2, 2) and dropout.
    pub fn cnn_forward(&self, tape: &mut Tape, params: &Bound, state: &mut GeneratorState, x: Var, pass: Pass) -> Result<Var> {
        let c = &self.config;
        let expected = c.input_shape;
        let shape = tape.shape(x);
        if shape.len() != 4 || shape[1..] != expected {
            return Err(dim_err!("generator input {shape:?} does not match [N, {}, {}, {}]", expected[0], expected[1], expected[2]));
        }
        let mut h = x;
        let layers = conv_layers(c);
        let mut layer_iter = layers.iter();
        for (block, filters, rate) in [("c1", &c.c1_filters, c.dropout[0]), ("c2", &c.c2_filters, c.dropout[1])] {
            for _ in 0..filters.len() {
                let (name, _, _) = layer_iter.next().expect("layer table matches filters");
                let w = params.var(&format!("{name}.weight"))?;
                h = tape.conv2d(h, w, None, c.conv_padding)?;
                let gamma = params.var(&format!("{name}.bn.gamma"))?;
                let beta = params.var(&format!("{name}.bn.beta"))?;
                let stats = state
                    .running
                    .get_mut(&format!("{name}.bn"))
                    .ok_or_else(|| Error::Config(format!("missing running stats for {name}")))?;
                h = tape.batch_norm2d(h, gamma, beta, stats, pass.norm_mode())?;
                h = tape.relu(h);
            }
            let s = tape.shape(h);
            if s[2] < 2 || s[3] < 2 {
                return Err(dim_err!("block {block}: spatial dims {}x{} too small for 2x2 pooling", s[2], s[3]));
            }
            h = tape.maxpool2d(h, 2, 2)?;
            let mut rng = state.rng.next_stream();
            h = tape.dropout(h, rate, pass.dropout_mode(), &mut rng)?;
        }
        Ok(h)
    }

    /// Transformer blocks only (no final norm): pre-norm attention and
    /// feed-forward sublayers, each with a residual connection.
    pub fn encoder_forward(&self, tape: &mut Tape, params: &Bound, tokens: Var) -> Result<Var> {
        let c = &self.config;
        let mut x = tokens;
        for b in 0..c.depth {
            let pre = format!("gen.block{b}");
            let g1 = params.var(&format!("{pre}.ln1.gamma"))?;
            let b1 = params.var(&format!("{pre}.ln1.beta"))?;
            let normed = tape.layer_norm(x, g1, b1)?;
            let attn = mha(tape, normed, &AttentionParams::bind(params, &pre)?, c.heads)?;
            x = tape.add(x, attn)?;

            let g2 = params.var(&format!("{pre}.ln2.gamma"))?;
            let b2 = params.var(&format!("{pre}.ln2.beta"))?;
            let normed = tape.layer_norm(x, g2, b2)?;
            let ff = self.feed_forward(tape, params, &pre, normed)?;
            x = tape.add(x, ff)?;
        }
        Ok(x)
    }

    fn feed_forward(&self, tape: &mut Tape, params: &Bound, pre: &str, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let d = shape[2];
        let mut h = tape.reshape(x, &[shape[0] * shape[1], d])?;
        let layers = self.config.mlp_units.len() + 1;
        for j in 0..layers {
            let w = params.var(&format!("{pre}.mlp.fc{j}.weight"))?;
            let bias = params.var(&format!("{pre}.mlp.fc{j}.bias"))?;
            h = tape.matmul(h, w)?;
            h = tape.add(h, bias)?;
            if j + 1 < layers {
                h = tape.relu(h);
            }
        }
        tape.reshape(h, &shape)
    }

    /// Full generator: `[N, bands, electrodes, window]` → `[N, D]`.
    pub fn generate(&self, tape: &mut Tape, params: &Bound, state: &mut GeneratorState, x: Var, pass: Pass) -> Result<Var> {
        let fm = self.cnn_forward(tape, params, state, x, pass)?;
        let patches = patchify(tape, fm, self.config.patch_size)?;
        let pos = if self.config.positional_embedding { Some(params.var("gen.pos")?) } else { None };
        let tokens = embed(tape, patches, params.var("gen.patch.weight")?, params.var("gen.patch.bias")?, pos)?;
        let encoded = self.encoder_forward(tape, params, tokens)?;
        let normed = tape.layer_norm(encoded, params.var("gen.ln_f.gamma")?, params.var("gen.ln_f.beta")?)?;
        tape.mean_axis(normed, 1)
    }

    /// Eval-mode embeddings of `inputs` (`[N, bands, electrodes, window]`)
    /// computed without gradient tracking, in chunks of `chunk` samples.
    pub fn embed_eval(&self, params: &ParamStore, state: &mut GeneratorState, inputs: &Tensor, chunk: usize) -> Result<Tensor> {
        let n = inputs.shape()[0];
        let per = inputs.numel() / n;
        let mut out = Vec::with_capacity(n * self.config.embed_dim);
        for start in (0..n).step_by(chunk.max(1)) {
            let len = chunk.max(1).min(n - start);
            let mut shape = inputs.shape().to_vec();
            shape[0] = len;
            let x = Tensor::new(shape, inputs.data()[start * per..(start + len) * per].to_vec())?;
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, |_| false);
            let xv = tape.constant(x);
            let e = self.generate(&mut tape, &bound, state, xv, Pass::Eval)?;
            out.extend_from_slice(tape.value(e).data());
        }
        Tensor::new(vec![n, self.config.embed_dim], out)
    }
}

/// Split `[N,C,H,W]` into non-overlapping `p×p` spatial patches, after
/// zero-padding H and W up to multiples of `p`. Returns `[N, n, p·p·C]`
/// with patches in row-major spatial order, each flattened as (row, col, channel).
pub fn patchify(tape: &mut Tape, fm: Var, p: usize) -> Result<Var> {
    let s = tape.shape(fm).to_vec();
    if s.len() != 4 || p == 0 {
        return Err(dim_err!("patchify expects [N,C,H,W] and p ≥ 1, got {s:?} and p={p}"));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (hn, wn) = (h.div_ceil(p), w.div_ceil(p));
    let padded = tape.pad_trailing(fm, &[n, c, hn * p, wn * p])?;
    let split = tape.reshape(padded, &[n, c, hn, p, wn, p])?;
    let ordered = tape.permute(split, &[0, 2, 4, 3, 5, 1])?;
    tape.reshape(ordered, &[n, hn * wn, p * p * c])
}

/// Linear projection of each patch to D dims plus an optional learned
/// per-position embedding `[n_max, D]`.
pub fn embed(tape: &mut Tape, patches: Var, weight: Var, bias: Var, pos: Option<Var>) -> Result<Var> {
    let s = tape.shape(patches).to_vec();
    if s.len() != 3 {
        return Err(dim_err!("embed expects [N, n, L] patches, got {s:?}"));
    }
    let (n, tokens, len) = (s[0], s[1], s[2]);
    let flat = tape.reshape(patches, &[n * tokens, len])?;
    let proj = tape.matmul(flat, weight)?;
    let proj = tape.add(proj, bias)?;
    let d = tape.shape(proj)[1];
    let out = tape.reshape(proj, &[n, tokens, d])?;
    match pos {
        None => Ok(out),
        Some(pos) => {
            let rows = tape.shape(pos)[0];
            if tokens > rows {
                return Err(dim_err!("{tokens} tokens exceed positional table of {rows} rows"));
            }
            let pos = if tokens < rows { tape.narrow(pos, 0, 0, tokens)? } else { pos };
            tape.add(out, pos)
        }
    }
}

/// Scaled dot-product attention on `[B, n, d]` inputs:
/// `softmax(Q·Kᵀ/√d)·V` with the softmax taken row-wise.
pub fn attention(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var> {
    let (sq, sk, sv) = (tape.shape(q).to_vec(), tape.shape(k).to_vec(), tape.shape(v).to_vec());
    if sq.len() != 3 || sq != sk || sk[..2] != sv[..2] {
        return Err(dim_err!("attention: incompatible Q {sq:?}, K {sk:?}, V {sv:?}"));
    }
    let kt = tape.transpose(k)?;
    let scores = tape.bmm(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (sq[2] as f64).sqrt());
    let weights = tape.softmax(scores, 2)?;
    tape.bmm(weights, v)
}

/// Projection weights of one multi-head attention layer.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub bo: Var,
}

impl AttentionParams {
    pub fn bind(params: &Bound, prefix: &str) -> Result<Self> {
        Ok(Self {
            wq: params.var(&format!("{prefix}.attn.wq"))?,
            wk: params.var(&format!("{prefix}.attn.wk"))?,
            wv: params.var(&format!("{prefix}.attn.wv"))?,
            wo: params.var(&format!("{prefix}.attn.wo"))?,
            bo: params.var(&format!("{prefix}.attn.bo"))?,
        })
    }
}

/// Multi-head self-attention over `[N, n, D]` tokens: `h` heads of width
/// `D/h`, concatenated and projected back to D.
pub fn mha(tape: &mut Tape, tokens: Var, p: &AttentionParams, heads: usize) -> Result<Var> {
    let s = tape.shape(tokens).to_vec();
    if s.len() != 3 {
        return Err(dim_err!("mha expects [N, n, D] tokens, got {s:?}"));
    }
    let (n, t, d) = (s[0], s[1], s[2]);
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("embed dim {d} not divisible by {heads} heads")));
    }
    let hd = d / heads;
    let flat = tape.reshape(tokens, &[n * t, d])?;
    let mut split = |w: Var| -> Result<Var> {
        let y = tape.matmul(flat, w)?;
        let y = tape.reshape(y, &[n, t, heads, hd])?;
        let y = tape.permute(y, &[0, 2, 1, 3])?;
        tape.reshape(y, &[n * heads, t, hd])
    };
    let (q, k, v) = (split(p.wq)?, split(p.wk)?, split(p.wv)?);
    let a = attention(tape, q, k, v)?;
    let a = tape.reshape(a, &[n, heads, t, hd])?;
    let a = tape.permute(a, &[0, 2, 1, 3])?;
    let a = tape.reshape(a, &[n * t, d])?;
    let out = tape.matmul(a, p.wo)?;
    let out = tape.add(out, p.bo)?;
    tape.reshape(out, &[n, t, d])
}
