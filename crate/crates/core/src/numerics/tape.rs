use rand::Rng;
use rayon::prelude::*;

use super::kernels::{self, ConvGeom};
use super::tensor::{strides, Tensor};
use crate::error::{dim_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Train/eval switch for batchnorm and dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel running statistics of a batchnorm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Number of train-mode updates folded in so far; zero means uninitialized.
    pub updates: u64,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], var: vec![1.0; channels], updates: 0 }
    }

    pub fn is_initialized(&self) -> bool {
        self.updates > 0
    }
}

/// How a batchnorm call treats its running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics; fold them into the running stats.
    Train,
    /// Batch statistics; leave the running stats untouched.
    TrainFrozen,
    /// Running statistics only.
    Eval,
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const NORM_EPS: f64 = 1e-5;
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Powi(Var, i32),
    Abs(Var),
    Relu(Var),
    Matmul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Bmm { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize },
    Permute { x: Var, perm: Vec<usize> },
    Reshape(Var),
    SumAll(Var),
    MeanAll(Var),
    MeanAxis { x: Var, outer: usize, len: usize, inner: usize },
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    CrossEntropy { probs: Var, labels: Vec<usize>, classes: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, batch_stats: bool },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, cout: usize },
    MaxPool { x: Var, argmax: Vec<usize> },
    Dropout { x: Var, mask: Vec<f64> },
    Concat { inputs: Vec<Var>, sizes: Vec<usize>, outer: usize, inner: usize },
    Narrow { x: Var, outer: usize, len_in: usize, start: usize, len: usize, inner: usize },
    PadTrailing { x: Var },
    L2Norm(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Reverse-mode gradient tape. Nodes are appended in evaluation order, so
/// the node list is already a topological order and backward simply walks
/// it in reverse.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn suffix_inner(a: &[usize], b: &[usize]) -> Option<usize> {
    if b.len() > a.len() || a[a.len() - b.len()..] != *b {
        return None;
    }
    Some(b.iter().product())
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = shape.len();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..data.len() {
        out.push(data[src]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

/// Maps each element of `in_shape` to its flat position inside the larger
/// `out_shape` (same rank, every dim ≥).
fn embed_positions(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let out_strides = strides(out_shape);
    let numel: usize = in_shape.iter().product();
    let rank = in_shape.len();
    let mut idx = vec![0usize; rank];
    let mut pos = Vec::with_capacity(numel);
    for _ in 0..numel {
        pos.push(idx.iter().zip(&out_strides).map(|(i, s)| i * s).sum());
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < in_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    pos
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    /// Record an input. Parameters pass `requires_grad = true`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, requires_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, usize)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let inner = suffix_inner(sa, sb)
            .ok_or_else(|| dim_err!("{name}: shape {sb:?} does not broadcast onto {sa:?}"))?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let data = va.iter().enumerate().map(|(i, &x)| f(x, vb[i % inner])).collect();
        Ok((Tensor::from_parts(sa.to_vec(), data), inner))
    }

    /// `a + b`, with `b` broadcast over the leading axes of `a` when its
    /// shape is a suffix of `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a);
        let t = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|x| x * c).collect());
        self.push(t, Op::Scale(a, c), &[a])
    }

    pub fn powi(&mut self, a: Var, p: i32) -> Var {
        let v = self.value(a);
        let t = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|x| x.powi(p)).collect());
        self.push(t, Op::Powi(a, p), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let t = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|x| x.abs()).collect());
        self.push(t, Op::Abs(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let t = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|x| x.max(0.0)).collect());
        self.push(t, Op::Relu(a), &[a])
    }

    /// `[m,k] · [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err!("matmul: incompatible shapes {sa:?} and {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::gemm(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::from_parts(vec![m, n], data), Op::Matmul { a, b, m, k, n }, &[a, b]))
    }

    /// Batched `[B,m,k] · [B,k,n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(dim_err!("bmm: incompatible shapes {sa:?} and {sb:?}"));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(batch * m * n);
        for i in 0..batch {
            data.extend(kernels::gemm(&va[i * m * k..(i + 1) * m * k], &vb[i * k * n..(i + 1) * k * n], m, k, n));
        }
        Ok(self.push(Tensor::from_parts(vec![batch, m, n], data), Op::Bmm { a, b, batch, m, k, n }, &[a, b]))
    }

    /// Axis permutation; `perm[i]` names the input axis placed at output axis `i`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(dim_err!("permute: {perm:?} is not a permutation of rank {}", shape.len()));
        }
        let data = permute_data(self.value(x).data(), &shape, perm);
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Permute { x, perm: perm.to_vec() }, &[x]))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(dim_err!("transpose needs rank ≥ 2, got {r}"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push(Tensor::scalar(s), Op::MeanAll(x), &[x])
    }

    /// Mean along `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(dim_err!("mean_axis: axis {axis} out of range for {shape:?}"));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let v = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += v[base + i];
                }
            }
        }
        out.iter_mut().for_each(|s| *s /= len as f64);
        let mut out_shape = shape;
        out_shape.remove(axis);
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::MeanAxis { x, outer, len, inner }, &[x]))
    }

    /// Max-stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(dim_err!("softmax: axis {axis} out of range for {shape:?}"));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let v = self.value(x).data();
        let mut out = vec![0.0; v.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| v[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for l in 0..len {
                    let e = (v[at(l)] - max).exp();
                    out[at(l)] = e;
                    sum += e;
                }
                for l in 0..len {
                    out[at(l)] /= sum;
                }
            }
        }
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { x, outer, len, inner }, &[x]))
    }

    /// Mean of `−ln p[label]` over rows of `probs` `[N,classes]`; each
    /// probability is floored at 1e-12 before the log.
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(probs);
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(dim_err!("cross_entropy: probs {shape:?} vs {} labels", labels.len()));
        }
        let (n, classes) = (shape[0], shape[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Index(format!("label {bad} out of range for {classes} classes")));
        }
        let p = self.value(probs).data();
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -p[i * classes + l].max(PROB_FLOOR).ln())
            .sum::<f64>()
            / n as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { probs, labels: labels.to_vec(), classes },
            &[probs],
        ))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| dim_err!("layer_norm on a scalar"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(dim_err!("layer_norm: affine params must have shape [{d}]"));
        }
        let v = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = v.len() / d;
        let mut xhat = vec![0.0; v.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; v.len()];
        for r in 0..rows {
            let row = &v[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (row[j] - mean) * is;
                xhat[r * d + j] = xh;
                out[r * d + j] = g[j] * xh + b[j];
            }
        }
        Ok(self.push(Tensor::from_parts(shape, out), Op::LayerNorm { x, gamma, beta, xhat, inv_std }, &[x, gamma, beta]))
    }

    /// Per-channel batch normalization of `[N,C,H,W]`.
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        mode: NormMode,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(dim_err!("batch_norm2d expects [N,C,H,W], got {shape:?}"));
        }
        let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || stats.mean.len() != c || stats.var.len() != c {
            return Err(dim_err!("batch_norm2d: per-channel params must have length {c}"));
        }
        let v = self.value(x).data();
        let count = n * hw;
        let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
            NormMode::Eval => {
                if !stats.is_initialized() {
                    return Err(Error::State("batchnorm running stats used in eval mode before any training update".into()));
                }
                (stats.mean.clone(), stats.var.clone())
            }
            NormMode::Train | NormMode::TrainFrozen => (0..c)
                .map(|ch| {
                    let vals = (0..n).flat_map(|s| v[(s * c + ch) * hw..(s * c + ch + 1) * hw].iter());
                    let mean = vals.clone().sum::<f64>() / count as f64;
                    let var = vals.map(|x| (x - mean).powi(2)).sum::<f64>() / count as f64;
                    (mean, var)
                })
                .unzip(),
        };
        if mode == NormMode::Train {
            let unbiased = |v: f64| if count > 1 { v * count as f64 / (count - 1) as f64 } else { v };
            for ch in 0..c {
                // First update seeds the running stats with the batch stats.
                if stats.updates == 0 {
                    stats.mean[ch] = mean[ch];
                    stats.var[ch] = unbiased(var[ch]);
                } else {
                    stats.mean[ch] = (1.0 - BN_MOMENTUM) * stats.mean[ch] + BN_MOMENTUM * mean[ch];
                    stats.var[ch] = (1.0 - BN_MOMENTUM) * stats.var[ch] + BN_MOMENTUM * unbiased(var[ch]);
                }
            }
            stats.updates += 1;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; v.len()];
        let mut out = vec![0.0; v.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * hw;
                for i in base..base + hw {
                    let xh = (v[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + b[ch];
                }
            }
        }
        let batch_stats = mode != NormMode::Eval;
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats },
            &[x, gamma, beta],
        ))
    }

    /// Stride-1 2-D convolution of `[N,Cin,H,W]` with `[Cout,Cin,k,k]`,
    /// symmetric zero padding and an optional per-channel bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, padding: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 {
            return Err(dim_err!("conv2d expects 4-D input and kernel, got {sx:?} and {sw:?}"));
        }
        let (n, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, kcin, k, k2) = (sw[0], sw[1], sw[2], sw[3]);
        if kcin != cin {
            return Err(dim_err!("conv2d: input has {cin} channels, kernel expects {kcin}"));
        }
        if k != k2 || k == 0 {
            return Err(dim_err!("conv2d: kernel must be square and non-empty, got {k}x{k2}"));
        }
        if h + 2 * padding < k || wd + 2 * padding < k {
            return Err(dim_err!("conv2d: kernel {k} larger than padded input {h}x{wd} (padding {padding})"));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(dim_err!("conv2d: bias must have shape [{cout}], got {:?}", self.shape(b)));
            }
        }
        let geom = ConvGeom { cin, h, w: wd, k, pad: padding, ho: h + 2 * padding - k + 1, wo: wd + 2 * padding - k + 1 };
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        let bias = b.map(|b| self.value(b).data().to_vec());
        let in_len = cin * h * wd;
        let out_len = cout * geom.col_cols();
        let mut out = vec![0.0; n * out_len];
        out.par_chunks_mut(out_len).enumerate().for_each(|(s, o)| {
            let col = kernels::im2col(&xv[s * in_len..(s + 1) * in_len], &geom);
            let y = kernels::gemm(wv, &col, cout, geom.col_rows(), geom.col_cols());
            o.copy_from_slice(&y);
            if let Some(bias) = &bias {
                for (co, chunk) in o.chunks_mut(geom.col_cols()).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += bias[co]);
                }
            }
        });
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(
            Tensor::from_parts(vec![n, cout, geom.ho, geom.wo], out),
            Op::Conv2d { x, w, b, geom, cout },
            &parents,
        ))
    }

    /// Max pooling over `[N,C,H,W]`. Backward routes each window's gradient
    /// to the first row-major maximum.
    pub fn maxpool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(dim_err!("maxpool2d expects [N,C,H,W], got {s:?}"));
        }
        if kernel == 0 || stride == 0 || kernel > s[2] || kernel > s[3] {
            return Err(dim_err!("maxpool2d: kernel {kernel} (stride {stride}) does not fit spatial dims {}x{}", s[2], s[3]));
        }
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (ho, wo) = ((h - kernel) / stride + 1, (w - kernel) / stride + 1);
        let v = self.value(x).data();
        let mut out = Vec::with_capacity(nc * ho * wo);
        let mut argmax = Vec::with_capacity(nc * ho * wo);
        for plane in 0..nc {
            let base = plane * h * w;
            for oi in 0..ho {
                for oj in 0..wo {
                    let mut best = base + oi * stride * w + oj * stride;
                    for ki in 0..kernel {
                        for kj in 0..kernel {
                            let idx = base + (oi * stride + ki) * w + oj * stride + kj;
                            if v[idx] > v[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(v[best]);
                    argmax.push(best);
                }
            }
        }
        Ok(self.push(Tensor::from_parts(vec![s[0], s[1], ho, wo], out), Op::MaxPool { x, argmax }, &[x]))
    }

    /// Inverted dropout: in train mode each element is kept with probability
    /// `1 − rate` and scaled by `1/(1 − rate)`; in eval mode this is the identity.
    pub fn dropout<R: Rng>(&mut self, x: Var, rate: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Argument(format!("dropout rate {rate} outside [0, 1)")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let v = self.value(x);
        let mask: Vec<f64> = (0..v.numel()).map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
        let data = v.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let t = Tensor::from_parts(v.shape().to_vec(), data);
        Ok(self.push(t, Op::Dropout { x, mask }, &[x]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| dim_err!("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(dim_err!("concat: axis {axis} out of range for {base:?}"));
        }
        let mut sizes = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(dim_err!("concat: shape {s:?} incompatible with {base:?} on axis {axis}"));
            }
            sizes.push(s[axis]);
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &sz) in inputs.iter().zip(&sizes) {
                out.extend_from_slice(&self.value(v).data()[o * sz * inner..(o + 1) * sz * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(Tensor::from_parts(shape, out), Op::Concat { inputs: inputs.to_vec(), sizes, outer, inner }, inputs))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(dim_err!("narrow: [{start}, {}) out of range on axis {axis} of {shape:?}", start + len));
        }
        let (outer, len_in, inner) = axis_split(&shape, axis);
        let v = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&v[(o * len_in + start) * inner..(o * len_in + start + len) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::Narrow { x, outer, len_in, start, len, inner }, &[x]))
    }

    /// Zero-pad each axis at its end up to `shape` (same rank, every dim ≥).
    pub fn pad_trailing(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let in_shape = self.shape(x).to_vec();
        if in_shape.len() != shape.len() || in_shape.iter().zip(shape).any(|(a, b)| a > b) {
            return Err(dim_err!("pad_trailing: cannot pad {in_shape:?} to {shape:?}"));
        }
        if in_shape == shape {
            return Ok(x);
        }
        let mut out = vec![0.0; shape.iter().product()];
        for (&p, &v) in embed_positions(&in_shape, shape).iter().zip(self.value(x).data()) {
            out[p] = v;
        }
        Ok(self.push(Tensor::from_parts(shape.to_vec(), out), Op::PadTrailing { x }, &[x]))
    }

    /// Euclidean norm of all elements; the gradient at zero is taken as zero.
    pub fn l2_norm(&mut self, x: Var) -> Var {
        let n = self.value(x).data().iter().map(|v| v * v).sum::<f64>().sqrt();
        self.push(Tensor::scalar(n), Op::L2Norm(x), &[x])
    }

    /// Reverse pass from a single-element `loss`. Gradients accumulate over
    /// every use of a node; only nodes that require gradients are populated.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                g.filter(|_| node.requires_grad).map(|g| Tensor::from_parts(node.value.shape().to_vec(), g))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(contrib).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.to_vec());
                }
                if self.needs(*b) {
                    let inner = self.value(*b).numel();
                    let mut gb = vec![0.0; inner];
                    for (j, gv) in g.iter().enumerate() {
                        gb[j % inner] += sign * gv;
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let inner = vb.len();
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.iter().enumerate().map(|(j, gv)| gv * vb[j % inner]).collect());
                }
                if self.needs(*b) {
                    let mut gb = vec![0.0; inner];
                    for (j, gv) in g.iter().enumerate() {
                        gb[j % inner] += gv * va[j];
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.iter().map(|gv| gv * c).collect()),
            Op::Powi(a, p) => {
                let va = self.value(*a).data();
                let p = *p;
                let d = g.iter().zip(va).map(|(gv, x)| gv * p as f64 * x.powi(p - 1)).collect();
                self.accumulate(grads, *a, d);
            }
            Op::Abs(a) => {
                let va = self.value(*a).data();
                let d = g
                    .iter()
                    .zip(va)
                    .map(|(gv, x)| if *x > 0.0 { *gv } else if *x < 0.0 { -gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::Relu(a) => {
                let va = self.value(*a).data();
                let d = g.iter().zip(va).map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 }).collect();
                self.accumulate(grads, *a, d);
            }
            Op::Matmul { a, b, m, k, n } => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, kernels::gemm_nt(g, self.value(*b).data(), *m, *n, *k));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, kernels::gemm_tn(self.value(*a).data(), g, *m, *k, *n));
                }
            }
            Op::Bmm { a, b, batch, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    let mut ga = Vec::with_capacity(batch * m * k);
                    for bi in 0..*batch {
                        ga.extend(kernels::gemm_nt(&g[bi * m * n..(bi + 1) * m * n], &vb[bi * k * n..(bi + 1) * k * n], m, n, k));
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    let mut gb = Vec::with_capacity(batch * k * n);
                    for bi in 0..*batch {
                        gb.extend(kernels::gemm_tn(&va[bi * m * k..(bi + 1) * m * k], &g[bi * m * n..(bi + 1) * m * n], m, k, n));
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                self.accumulate(grads, *x, permute_data(g, node.value.shape(), &inverse));
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::SumAll(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::MeanAll(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![g[0] / n as f64; n]);
            }
            Op::MeanAxis { x, outer, len, inner } => {
                let mut d = vec![0.0; outer * len * inner];
                for o in 0..*outer {
                    for l in 0..*len {
                        for j in 0..*inner {
                            d[(o * len + l) * inner + j] = g[o * inner + j] / *len as f64;
                        }
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::Softmax { x, outer, len, inner } => {
                let mut d = vec![0.0; g.len()];
                for o in 0..*outer {
                    for j in 0..*inner {
                        let at = |l: usize| (o * len + l) * inner + j;
                        let dot: f64 = (0..*len).map(|l| g[at(l)] * out[at(l)]).sum();
                        for l in 0..*len {
                            d[at(l)] = out[at(l)] * (g[at(l)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::CrossEntropy { probs, labels, classes } => {
                let p = self.value(*probs).data();
                let n = labels.len() as f64;
                let mut d = vec![0.0; p.len()];
                for (r, &l) in labels.iter().enumerate() {
                    let pv = p[r * classes + l];
                    if pv > PROB_FLOOR {
                        d[r * classes + l] = -g[0] / (n * pv);
                    }
                }
                self.accumulate(grads, *probs, d);
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let gv = self.value(*gamma).data();
                let dim = gv.len();
                let rows = g.len() / dim;
                let mut dgamma = vec![0.0; dim];
                let mut dbeta = vec![0.0; dim];
                let mut dx = vec![0.0; g.len()];
                for r in 0..rows {
                    let (gr, xr) = (&g[r * dim..(r + 1) * dim], &xhat[r * dim..(r + 1) * dim]);
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for j in 0..dim {
                        dgamma[j] += gr[j] * xr[j];
                        dbeta[j] += gr[j];
                        let dxh = gr[j] * gv[j];
                        sum_d += dxh;
                        sum_dx += dxh * xr[j];
                    }
                    for j in 0..dim {
                        let dxh = gr[j] * gv[j];
                        dx[r * dim + j] = inv_std[r] / dim as f64 * (dim as f64 * dxh - sum_d - xr[j] * sum_dx);
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let shape = node.value.shape();
                let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                let gv = self.value(*gamma).data();
                let count = (n * hw) as f64;
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * hw;
                        for i in base..base + hw {
                            dgamma[ch] += g[i] * xhat[i];
                            dbeta[ch] += g[i];
                        }
                    }
                }
                let mut dx = vec![0.0; g.len()];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * hw;
                        for i in base..base + hw {
                            let dxh = g[i] * gv[ch];
                            dx[i] = if *batch_stats {
                                // dgamma/dbeta already hold Σ g·x̂ and Σ g for this channel.
                                inv_std[ch] / count * (count * dxh - gv[ch] * dbeta[ch] - xhat[i] * gv[ch] * dgamma[ch])
                            } else {
                                dxh * inv_std[ch]
                            };
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::Conv2d { x, w, b, geom, cout } => {
                let cout = *cout;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let n = self.shape(*x)[0];
                let in_len = geom.cin * geom.h * geom.w;
                let out_len = cout * geom.col_cols();
                let need_x = self.needs(*x);
                let need_w = self.needs(*w);
                let per_sample: Vec<(Option<Vec<f64>>, Option<Vec<f64>>)> = (0..n)
                    .into_par_iter()
                    .map(|s| {
                        let gy = &g[s * out_len..(s + 1) * out_len];
                        let dw = need_w.then(|| {
                            let col = kernels::im2col(&xv[s * in_len..(s + 1) * in_len], geom);
                            kernels::gemm_nt(gy, &col, cout, geom.col_cols(), geom.col_rows())
                        });
                        let dx = need_x.then(|| {
                            let dcol = kernels::gemm_tn(wv, gy, cout, geom.col_rows(), geom.col_cols());
                            kernels::col2im(&dcol, geom)
                        });
                        (dw, dx)
                    })
                    .collect();
                if need_w {
                    let mut dw = vec![0.0; wv.len()];
                    for (d, _) in &per_sample {
                        dw.iter_mut().zip(d.as_ref().unwrap()).for_each(|(a, b)| *a += b);
                    }
                    self.accumulate(grads, *w, dw);
                }
                if need_x {
                    let dx = per_sample.into_iter().flat_map(|(_, d)| d.unwrap()).collect();
                    self.accumulate(grads, *x, dx);
                }
                if let Some(b) = b {
                    let mut db = vec![0.0; cout];
                    for s in 0..n {
                        for (co, chunk) in g[s * out_len..(s + 1) * out_len].chunks(geom.col_cols()).enumerate() {
                            db[co] += chunk.iter().sum::<f64>();
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut d = vec![0.0; self.value(*x).numel()];
                for (gv, &idx) in g.iter().zip(argmax) {
                    d[idx] += gv;
                }
                self.accumulate(grads, *x, d);
            }
            Op::Dropout { x, mask } => {
                self.accumulate(grads, *x, g.iter().zip(mask).map(|(a, m)| a * m).collect());
            }
            Op::Concat { inputs, sizes, outer, inner } => {
                let total: usize = sizes.iter().sum();
                let mut offset = 0;
                for (&v, &sz) in inputs.iter().zip(sizes) {
                    if self.needs(v) {
                        let mut d = Vec::with_capacity(outer * sz * inner);
                        for o in 0..*outer {
                            let start = (o * total + offset) * inner;
                            d.extend_from_slice(&g[start..start + sz * inner]);
                        }
                        self.accumulate(grads, v, d);
                    }
                    offset += sz;
                }
            }
            Op::Narrow { x, outer, len_in, start, len, inner } => {
                let mut d = vec![0.0; outer * len_in * inner];
                for o in 0..*outer {
                    let dst = (o * len_in + start) * inner;
                    d[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *x, d);
            }
            Op::PadTrailing { x } => {
                let positions = embed_positions(self.shape(*x), node.value.shape());
                self.accumulate(grads, *x, positions.iter().map(|&p| g[p]).collect());
            }
            Op::L2Norm(x) => {
                let norm = out[0];
                let xv = self.value(*x).data();
                let d = if norm > 0.0 { xv.iter().map(|v| g[0] * v / norm).collect() } else { vec![0.0; xv.len()] };
                self.accumulate(grads, *x, d);
            }
        }
    }
}
