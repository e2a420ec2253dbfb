use std::f64::consts::{E, PI};
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{arg_err, Result};

/// Lower bound applied to the sample variance before taking the log.
pub const VARIANCE_FLOOR: f64 = 1e-12;

fn check_band(sample_rate: f64, band: (f64, f64)) -> Result<()> {
    let (lo, hi) = band;
    if !(sample_rate > 0.0) || !(0.0 <= lo && lo < hi && hi <= sample_rate / 2.0) {
        return Err(arg_err!("band [{lo}, {hi}] Hz invalid for sample rate {sample_rate} Hz"));
    }
    Ok(())
}

fn bin_frequency(k: usize, len: usize, sample_rate: f64) -> f64 {
    k.min(len - k) as f64 * sample_rate / len as f64
}

/// Zero-phase band-pass by spectral masking: every FFT bin whose frequency
/// lies outside `[f_lo, f_hi]` is zeroed.
pub fn bandpass_subband(signal: &[f64], sample_rate: f64, band: (f64, f64)) -> Result<Vec<f64>> {
    check_band(sample_rate, band)?;
    if signal.len() < 2 {
        return Err(arg_err!("band-pass needs at least 2 samples, got {}", signal.len()));
    }
    let filter = BandFilter::new(signal.len(), sample_rate);
    let spectrum = filter.forward(signal);
    Ok(filter.inverse_masked(&spectrum, band))
}

/// Gaussian differential entropy `½·ln(2πe·σ²)` of a window, using the
/// unbiased variance floored at [`VARIANCE_FLOOR`].
pub fn differential_entropy(window: &[f64]) -> Result<f64> {
    if window.len() < 2 {
        return Err(arg_err!("differential entropy needs at least 2 samples, got {}", window.len()));
    }
    let n = window.len() as f64;
    let mean = window.iter().sum::<f64>() / n;
    let var = window.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(0.5 * (2.0 * PI * E * var.max(VARIANCE_FLOOR)).ln())
}

/// Reusable FFT plans for one window length.
pub(crate) struct BandFilter {
    len: usize,
    sample_rate: f64,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl BandFilter {
    pub(crate) fn new(len: usize, sample_rate: f64) -> Self {
        let mut planner = FftPlanner::new();
        Self { len, sample_rate, fwd: planner.plan_fft_forward(len), inv: planner.plan_fft_inverse(len) }
    }

    pub(crate) fn forward(&self, signal: &[f64]) -> Vec<Complex<f64>> {
        let mut buf: Vec<Complex<f64>> = signal.iter().map(|&x| Complex::new(x, 0.0)).collect();
        self.fwd.process(&mut buf);
        buf
    }

    pub(crate) fn inverse_masked(&self, spectrum: &[Complex<f64>], (lo, hi): (f64, f64)) -> Vec<f64> {
        let mut buf: Vec<Complex<f64>> = spectrum
            .iter()
            .enumerate()
            .map(|(k, &c)| {
                let f = bin_frequency(k, self.len, self.sample_rate);
                if f >= lo && f <= hi { c } else { Complex::new(0.0, 0.0) }
            })
            .collect();
        self.inv.process(&mut buf);
        buf.iter().map(|c| c.re / self.len as f64).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn sine(freq: f64, fs: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| (2.0 * PI * freq * i as f64 / fs).sin()).collect()
    }

    fn norm(x: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    #[test]
    fn in_band_sine_passes_through() {
        let x = sine(10.0, 200.0, 400);
        let y = bandpass_subband(&x, 200.0, (8.0, 13.0)).unwrap();
        let err: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
        assert!(norm(&err) / norm(&x) < 1e-6);
    }

    #[test]
    fn out_of_band_sine_is_rejected() {
        let x = sine(10.0, 200.0, 400);
        let y = bandpass_subband(&x, 200.0, (1.0, 4.0)).unwrap();
        assert!(norm(&y) < 1e-6 * norm(&x));
    }

    #[test]
    fn subband_variances_bounded_by_broadband() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let x: Vec<f64> = (0..2000).map(|_| normal.sample(&mut rng)).collect();
        let var = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / v.len() as f64
        };
        let total = var(&bandpass_subband(&x, 200.0, (0.5, 70.0)).unwrap());
        let bands = [(1.0, 4.0), (4.0, 8.0), (8.0, 13.0), (13.0, 30.0), (30.0, 50.0)];
        let sum: f64 = bands.iter().map(|&b| var(&bandpass_subband(&x, 200.0, b).unwrap())).sum();
        assert!(sum <= total, "{sum} > {total}");
    }

    #[test]
    fn invalid_bands_rejected() {
        let x = vec![0.0; 16];
        assert!(bandpass_subband(&x, 200.0, (5.0, 4.0)).is_err());
        assert!(bandpass_subband(&x, 200.0, (-1.0, 4.0)).is_err());
        assert!(bandpass_subband(&x, 200.0, (1.0, 101.0)).is_err());
        assert!(bandpass_subband(&[1.0], 200.0, (1.0, 4.0)).is_err());
    }

    #[test]
    fn gaussian_de_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x: Vec<f64> = Normal::new(0.0, 1.0).unwrap().sample_iter(&mut rng).take(100_000).collect();
        let de = differential_entropy(&x).unwrap();
        assert!((de - 0.5 * (2.0 * PI * E).ln()).abs() < 0.01);
        let doubled: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let de2 = differential_entropy(&doubled).unwrap();
        assert!((de2 - de - 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn constant_window_hits_floor() {
        let de = differential_entropy(&[3.0; 50]).unwrap();
        assert_eq!(de, 0.5 * (2.0 * PI * E * 1e-12).ln());
        assert!(differential_entropy(&[1.0]).is_err());
    }
}
