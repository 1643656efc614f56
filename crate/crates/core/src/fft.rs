//! Thin helpers over `rustfft` with a thread-local planner cache.

use num_complex::Complex64;
use rustfft::FftPlanner;
use std::cell::RefCell;
use std::f64::consts::PI;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// In-place forward DFT, `X[k] = Σ x[n] e^{-j2πkn/N}` (unnormalized).
pub fn fft_in_place(buf: &mut [Complex64]) {
    if buf.is_empty() {
        return;
    }
    let plan = PLANNER.with(|p| p.borrow_mut().plan_fft_forward(buf.len()));
    plan.process(buf);
}

/// In-place inverse DFT including the `1/N` normalization.
pub fn ifft_in_place(buf: &mut [Complex64]) {
    if buf.is_empty() {
        return;
    }
    let n = buf.len();
    let plan = PLANNER.with(|p| p.borrow_mut().plan_fft_inverse(n));
    plan.process(buf);
    let scale = 1.0 / n as f64;
    for v in buf.iter_mut() {
        *v *= scale;
    }
}

pub fn fft(x: &[Complex64]) -> Vec<Complex64> {
    let mut v = x.to_vec();
    fft_in_place(&mut v);
    v
}

pub fn ifft(x: &[Complex64]) -> Vec<Complex64> {
    let mut v = x.to_vec();
    ifft_in_place(&mut v);
    v
}

/// Signed bin frequency in cycles per sample, in `[-1/2, 1/2)`.
#[inline]
pub fn bin_frequency(k: usize, n: usize) -> f64 {
    let k = k as i64;
    let n_i = n as i64;
    let signed = if 2 * k >= n_i { k - n_i } else { k };
    signed as f64 / n as f64
}

/// Angular frequency of bin `k` in rad/ps for a grid sampled at `sample_rate` Hz.
#[inline]
pub fn bin_omega_rad_per_ps(k: usize, n: usize, sample_rate: f64) -> f64 {
    2.0 * PI * bin_frequency(k, n) * sample_rate * 1e-12
}

/// Multiplies the spectrum of `x` by `h(k)` for every bin and returns the time signal.
pub fn filter_freq<F>(x: &[Complex64], mut h: F) -> Vec<Complex64>
where
    F: FnMut(usize) -> Complex64,
{
    let mut spec = fft(x);
    for (k, v) in spec.iter_mut().enumerate() {
        *v *= h(k);
    }
    ifft_in_place(&mut spec);
    spec
}

/// Band-limited resampling of a periodic frame from `n_in` to `n_out` samples by
/// spectral truncation or zero-padding. The Nyquist bin of an even-length spectrum
/// is split symmetrically so real signals stay real.
pub fn resample_periodic(x: &[Complex64], n_out: usize) -> Vec<Complex64> {
    let n_in = x.len();
    if n_in == n_out {
        return x.to_vec();
    }
    let spec = fft(x);
    let mut out = vec![Complex64::new(0.0, 0.0); n_out];
    let keep = n_in.min(n_out);
    let h = keep / 2;
    let even = keep % 2 == 0;
    let n_side = if even { h } else { h + 1 };
    out[..n_side].copy_from_slice(&spec[..n_side]);
    for k in 1..n_side {
        out[n_out - k] = spec[n_in - k];
    }
    if even {
        if n_out < n_in {
            // both input bins ±h alias onto the output Nyquist bin
            out[h] = spec[h] + spec[n_in - h];
        } else {
            // split the input Nyquist bin across ±h
            out[h] = spec[h] * 0.5;
            out[n_out - h] = spec[h] * 0.5;
        }
    }
    let mut t = out;
    ifft_in_place(&mut t);
    let scale = n_out as f64 / n_in as f64;
    for v in t.iter_mut() {
        *v *= scale;
    }
    t
}
