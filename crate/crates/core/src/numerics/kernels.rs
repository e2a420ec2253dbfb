//! Raw slice kernels shared by the tape ops. Every output element is
//! produced by exactly one thread with a fixed summation order, so results
//! are bit-identical regardless of the rayon pool size.

use rayon::prelude::*;

const PAR_THRESHOLD: usize = 1 << 15;

/// `out[m,n] = a[m,k] · b[k,n]`.
pub fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    let row = |(i, out_row): (usize, &mut [f64])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

/// `out[m,n] = a[m,k] · b[n,k]ᵀ`.
pub fn gemm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    let row = |(i, out_row): (usize, &mut [f64])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            *o = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

/// `out[k,n] = a[m,k]ᵀ · b[m,n]`.
pub fn gemm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let at = transpose(a, m, k);
    gemm(&at, b, k, m, n)
}

pub fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Geometry of a stride-1 square-kernel convolution on one sample.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfold one sample `[cin,h,w]` into `[cin·k·k, ho·wo]`.
pub fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols = g.col_cols();
    let mut col = vec![0.0; g.col_rows() * cols];
    for c in 0..g.cin {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let r = (c * g.k + ki) * g.k + kj;
                let dst = &mut col[r * cols..(r + 1) * cols];
                for oi in 0..g.ho {
                    let ii = oi + ki;
                    if ii < g.pad || ii - g.pad >= g.h {
                        continue;
                    }
                    let src_row = &x[(c * g.h + ii - g.pad) * g.w..(c * g.h + ii - g.pad + 1) * g.w];
                    for oj in 0..g.wo {
                        let jj = oj + kj;
                        if jj < g.pad || jj - g.pad >= g.w {
                            continue;
                        }
                        dst[oi * g.wo + oj] = src_row[jj - g.pad];
                    }
                }
            }
        }
    }
    col
}

/// Fold `[cin·k·k, ho·wo]` back into `[cin,h,w]`, summing overlaps.
pub fn col2im(col: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols = g.col_cols();
    let mut x = vec![0.0; g.cin * g.h * g.w];
    for c in 0..g.cin {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let r = (c * g.k + ki) * g.k + kj;
                let src = &col[r * cols..(r + 1) * cols];
                for oi in 0..g.ho {
                    let ii = oi + ki;
                    if ii < g.pad || ii - g.pad >= g.h {
                        continue;
                    }
                    for oj in 0..g.wo {
                        let jj = oj + kj;
                        if jj < g.pad || jj - g.pad >= g.w {
                            continue;
                        }
                        x[(c * g.h + ii - g.pad) * g.w + jj - g.pad] += src[oi * g.wo + oj];
                    }
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree() {
        let a: Vec<f64> = (0..6).map(|i| i as f64 - 2.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|i| (i as f64) * 0.5).collect(); // 3x4
        let c = gemm(&a, &b, 2, 3, 4);
        let bt = transpose(&b, 3, 4);
        assert_eq!(gemm_nt(&a, &bt, 2, 3, 4), c);
        let at = transpose(&a, 2, 3);
        assert_eq!(gemm_tn(&at, &b, 3, 2, 4), c);
        assert_eq!(c[0], -2.0 * 0.0 + -2.0 + 0.0 * 4.0);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom { cin: 2, h: 4, w: 3, k: 3, pad: 1, ho: 4, wo: 3 };
        let x: Vec<f64> = (0..24).map(|i| (i as f64).sin()).collect();
        let y: Vec<f64> = (0..g.col_rows() * g.col_cols()).map(|i| (i as f64 * 0.7).cos()).collect();
        let lhs: f64 = im2col(&x, &g).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(col2im(&y, &g)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
