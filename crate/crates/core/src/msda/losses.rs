use crate::error::{arg_err, dim_err, Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Elementwise mean of `X^p` over the batch axis of `x` (`[N, D]`).
pub fn moment(x: &Tensor, p: usize) -> Result<Vec<f64>> {
    if x.rank() != 2 || p == 0 {
        return Err(dim_err!("moment expects [N, D] and p ≥ 1, got {:?} and p={p}", x.shape()));
    }
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut out = vec![0.0; d];
    for row in x.data().chunks(d) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v.powi(p as i32);
        }
    }
    Ok(out.into_iter().map(|s| s / n as f64).collect())
}

/// Weight of the source-source sum for `k` sources: `2!(k−2)!/k!`.
pub fn pair_coefficient(k: usize) -> f64 {
    if k < 2 { 0.0 } else { 2.0 / (k * (k - 1)) as f64 }
}

/// Moment distance on the tape between source embeddings and target
/// embeddings (each `[Nᵢ, D]`), summed over orders `1..=order`:
/// `(1/K)·Σᵢ‖E[Sᵢᵖ] − E[Tᵖ]‖ + c_K·Σ_{i<j}‖E[Sᵢᵖ] − E[Sⱼᵖ]‖`.
///
/// With a single source the pairwise sum is empty and only the
/// source-target term remains.
pub fn md_loss(tape: &mut Tape, sources: &[Var], target: Var, order: usize) -> Result<Var> {
    if sources.is_empty() || order == 0 {
        return Err(arg_err!("moment distance needs ≥ 1 source and order ≥ 1"));
    }
    let d = tape.shape(target).to_vec();
    for &s in sources {
        let sd = tape.shape(s);
        if sd.len() != 2 || d.len() != 2 || sd[1] != d[1] {
            return Err(dim_err!("moment distance: source {sd:?} and target {d:?} differ in feature dim"));
        }
    }
    let k = sources.len();
    let mut terms = Vec::new();
    for p in 1..=order {
        let mut moment_of = |x: Var| -> Result<Var> {
            let xp = tape.powi(x, p as i32);
            tape.mean_axis(xp, 0)
        };
        let tm = moment_of(target)?;
        let sm: Vec<Var> = sources.iter().map(|&s| moment_of(s)).collect::<Result<_>>()?;
        for &m in &sm {
            let diff = tape.sub(m, tm)?;
            let norm = tape.l2_norm(diff);
            terms.push(tape.scale(norm, 1.0 / k as f64));
        }
        for i in 0..k {
            for j in i + 1..k {
                let diff = tape.sub(sm[i], sm[j])?;
                let norm = tape.l2_norm(diff);
                terms.push(tape.scale(norm, pair_coefficient(k)));
            }
        }
    }
    let (&first, rest) = terms.split_first().expect("at least one source term");
    rest.iter().try_fold(first, |acc, &v| tape.add(acc, v))
}

/// Moment distance of `K ≥ 2` source embedding batches to a target batch.
pub fn moment_distance(sources: &[Tensor], target: &Tensor, order: usize) -> Result<f64> {
    if sources.len() < 2 {
        return Err(arg_err!("moment distance needs K ≥ 2 sources, got {}", sources.len()));
    }
    let mut tape = Tape::new();
    let s: Vec<Var> = sources.iter().map(|x| tape.constant(x.clone())).collect();
    let t = tape.constant(target.clone());
    let md = md_loss(&mut tape, &s, t, order)?;
    tape.value(md).item()
}

/// Mean absolute difference of two `[N, classes]` probability tables.
pub fn discrepancy(tape: &mut Tape, pa: Var, pb: Var) -> Result<Var> {
    if tape.shape(pa) != tape.shape(pb) {
        return Err(dim_err!("discrepancy: shapes {:?} and {:?} differ", tape.shape(pa), tape.shape(pb)));
    }
    let diff = tape.sub(pa, pb)?;
    let abs = tape.abs(diff);
    Ok(tape.mean_all(abs))
}

pub fn discrepancy_value(pa: &Tensor, pb: &Tensor) -> Result<f64> {
    if pa.shape() != pb.shape() {
        return Err(dim_err!("discrepancy: shapes {:?} and {:?} differ", pa.shape(), pb.shape()));
    }
    Ok(pa.data().iter().zip(pb.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / pa.numel() as f64)
}

/// Uniform average of head outputs and its row-wise argmax, ties going to
/// the lowest class index.
pub fn average_heads(outputs: &[Tensor]) -> Result<(Tensor, Vec<usize>)> {
    let first = outputs.first().ok_or_else(|| arg_err!("no head outputs to average"))?;
    if first.rank() != 2 {
        return Err(dim_err!("head outputs must be [N, classes], got {:?}", first.shape()));
    }
    let mut sum = vec![0.0; first.numel()];
    for o in outputs {
        if o.shape() != first.shape() {
            return Err(Error::Dimension(format!("head output {:?} differs from {:?}", o.shape(), first.shape())));
        }
        sum.iter_mut().zip(o.data()).for_each(|(s, v)| *s += v);
    }
    let h = outputs.len() as f64;
    let avg = Tensor::new(first.shape().to_vec(), sum.into_iter().map(|s| s / h).collect())?;
    let classes = first.shape()[1];
    let labels = avg
        .data()
        .chunks(classes)
        .map(|row| row.iter().enumerate().fold(0, |best, (c, &v)| if v > row[best] { c } else { best }))
        .collect();
    Ok((avg, labels))
}
