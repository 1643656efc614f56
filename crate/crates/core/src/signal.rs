//! Sampled complex baseband signals, QAM mapping, pulse shaping and the
//! effective-SNR quality metric.

use crate::error::{arg, config, Error, Result};
use crate::fft;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Value returned by [`effective_snr`] for an exact (zero-residual) match.
pub const SNR_CAP_DB: f64 = 100.0;

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

/// Uniform time grid of a sampled waveform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingGrid {
    sample_rate: f64,
    n_samples: usize,
    samples_per_symbol: usize,
}

impl SamplingGrid {
    pub fn new(sample_rate: f64, n_samples: usize, samples_per_symbol: usize) -> Result<Self> {
        if !(sample_rate > 0.0 && sample_rate.is_finite()) {
            return arg(format!("sample rate must be positive, got {sample_rate}"));
        }
        if n_samples == 0 {
            return arg("grid must contain at least one sample");
        }
        if samples_per_symbol == 0 {
            return arg("samples per symbol must be >= 1");
        }
        if n_samples % samples_per_symbol != 0 {
            return arg(format!(
                "{n_samples} samples is not a whole number of {samples_per_symbol}-sample symbols"
            ));
        }
        Ok(Self {
            sample_rate,
            n_samples,
            samples_per_symbol,
        })
    }

    /// Grid for `n_symbols` symbols at `symbol_rate` baud.
    pub fn for_symbols(symbol_rate: f64, n_symbols: usize, sps: usize) -> Result<Self> {
        Self::new(symbol_rate * sps as f64, n_symbols * sps, sps)
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn samples_per_symbol(&self) -> usize {
        self.samples_per_symbol
    }

    pub fn symbol_rate(&self) -> f64 {
        self.sample_rate / self.samples_per_symbol as f64
    }

    pub fn n_symbols(&self) -> usize {
        self.n_samples / self.samples_per_symbol
    }

    /// Sample period in picoseconds.
    pub fn dt_ps(&self) -> f64 {
        1e12 / self.sample_rate
    }

    /// Same rate and oversampling, different length.
    pub fn with_len(&self, n_samples: usize) -> Result<Self> {
        Self::new(self.sample_rate, n_samples, self.samples_per_symbol)
    }

    /// Angular frequency (rad/ps) of every DFT bin of this grid.
    pub fn omega_bins(&self) -> Vec<f64> {
        (0..self.n_samples)
            .map(|k| fft::bin_omega_rad_per_ps(k, self.n_samples, self.sample_rate))
            .collect()
    }
}

/// One- or two-polarization complex envelope (unit: sqrt(W)).
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSignal {
    pub grid: SamplingGrid,
    pub pol_x: Vec<Complex64>,
    pub pol_y: Option<Vec<Complex64>>,
}

impl ComplexSignal {
    pub fn single(grid: SamplingGrid, pol_x: Vec<Complex64>) -> Result<Self> {
        if pol_x.len() != grid.n_samples() {
            return arg(format!(
                "signal has {} samples but grid declares {}",
                pol_x.len(),
                grid.n_samples()
            ));
        }
        Ok(Self {
            grid,
            pol_x,
            pol_y: None,
        })
    }

    pub fn dual(grid: SamplingGrid, pol_x: Vec<Complex64>, pol_y: Vec<Complex64>) -> Result<Self> {
        if pol_y.len() != pol_x.len() {
            return arg("polarizations must have equal length");
        }
        let mut s = Self::single(grid, pol_x)?;
        s.pol_y = Some(pol_y);
        Ok(s)
    }

    /// Builds a signal from a list of one or two polarizations.
    pub fn from_pols(grid: SamplingGrid, mut pols: Vec<Vec<Complex64>>) -> Result<Self> {
        match pols.len() {
            1 => Self::single(grid, pols.pop().unwrap()),
            2 => {
                let y = pols.pop().unwrap();
                let x = pols.pop().unwrap();
                Self::dual(grid, x, y)
            }
            n => arg(format!("expected 1 or 2 polarizations, got {n}")),
        }
    }

    pub fn zeros(grid: SamplingGrid, dual: bool) -> Self {
        let z = vec![ZERO; grid.n_samples()];
        Self {
            grid,
            pol_y: dual.then(|| z.clone()),
            pol_x: z,
        }
    }

    pub fn len(&self) -> usize {
        self.pol_x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pol_x.is_empty()
    }

    pub fn is_dual(&self) -> bool {
        self.pol_y.is_some()
    }

    pub fn n_pols(&self) -> usize {
        1 + self.pol_y.is_some() as usize
    }

    pub fn pols(&self) -> impl Iterator<Item = &Vec<Complex64>> {
        std::iter::once(&self.pol_x).chain(self.pol_y.iter())
    }

    pub fn pols_mut(&mut self) -> impl Iterator<Item = &mut Vec<Complex64>> {
        std::iter::once(&mut self.pol_x).chain(self.pol_y.iter_mut())
    }

    pub fn into_pols(self) -> Vec<Vec<Complex64>> {
        let mut v = vec![self.pol_x];
        v.extend(self.pol_y);
        v
    }

    pub fn energy(&self) -> f64 {
        self.pols().flatten().map(|v| v.norm_sqr()).sum()
    }

    /// Mean power per sample summed over polarizations (W).
    pub fn mean_power(&self) -> f64 {
        self.energy() / self.len() as f64
    }

    pub fn scale(&mut self, factor: f64) {
        for p in self.pols_mut() {
            for v in p.iter_mut() {
                *v *= factor;
            }
        }
    }

    /// Applies `f` to every polarization, keeping the grid.
    pub fn map_pols<F>(&self, mut f: F) -> Self
    where
        F: FnMut(&[Complex64]) -> Vec<Complex64>,
    {
        Self {
            grid: self.grid,
            pol_x: f(&self.pol_x),
            pol_y: self.pol_y.as_deref().map(f),
        }
    }
}

/// Square QAM constellation with Gray labeling and unit mean energy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Qam {
    order: usize,
}

impl Qam {
    pub fn new(order: usize) -> Result<Self> {
        match order {
            4 | 16 | 64 => Ok(Self { order }),
            _ => config(format!("unsupported modulation order {order}; use 4, 16 or 64")),
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn bits_per_symbol(&self) -> u32 {
        self.order.trailing_zeros()
    }

    fn levels_per_axis(&self) -> usize {
        1 << (self.bits_per_symbol() / 2)
    }

    /// Mean energy of the unnormalized odd-integer grid.
    fn raw_energy(&self) -> f64 {
        let m = self.levels_per_axis() as f64;
        2.0 * (m * m - 1.0) / 3.0
    }

    /// Maps a label to its point. The upper half of the label bits select the
    /// in-phase level, the lower half the quadrature level; each half is Gray
    /// decoded to a level index `i` with amplitude `(m-1) - 2i`.
    pub fn point(&self, label: usize) -> Complex64 {
        let half = self.bits_per_symbol() / 2;
        let mask = (1usize << half) - 1;
        let m = self.levels_per_axis() as f64;
        let amp = |g: usize| {
            let idx = gray_decode(g);
            (m - 1.0) - 2.0 * idx as f64
        };
        let norm = self.raw_energy().sqrt();
        Complex64::new(amp(label >> half) / norm, amp(label & mask) / norm)
    }

    pub fn points(&self) -> Vec<Complex64> {
        (0..self.order).map(|l| self.point(l)).collect()
    }

    /// Constant-modulus radius `E|s|^4 / E|s|^2` of the constellation.
    pub fn cma_radius(&self) -> f64 {
        let pts = self.points();
        let m2: f64 = pts.iter().map(|p| p.norm_sqr()).sum();
        let m4: f64 = pts.iter().map(|p| p.norm_sqr().powi(2)).sum();
        m4 / m2
    }

    pub fn contains(&self, s: Complex64) -> bool {
        self.points().iter().any(|p| (p - s).norm() < 1e-12)
    }
}

fn gray_decode(mut g: usize) -> usize {
    let mut b = g;
    while g > 0 {
        g >>= 1;
        b ^= g;
    }
    b
}

/// Symbol-spaced complex values, one row per polarization.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolFrame {
    pub symbols: Vec<Vec<Complex64>>,
    /// Constellation the symbols belong to, when they are transmitted symbols.
    pub modulation: Option<Qam>,
    pub normalized: bool,
}

impl SymbolFrame {
    pub fn received(symbols: Vec<Vec<Complex64>>) -> Self {
        Self {
            symbols,
            modulation: None,
            normalized: false,
        }
    }

    pub fn n_pols(&self) -> usize {
        self.symbols.len()
    }

    pub fn len(&self) -> usize {
        self.symbols.first().map_or(0, |p| p.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Keeps symbols `range` of every polarization.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            symbols: self.symbols.iter().map(|p| p[range.clone()].to_vec()).collect(),
            modulation: self.modulation,
            normalized: self.normalized,
        }
    }
}

/// Maps symbol labels onto a unit-energy Gray-labeled QAM constellation.
pub fn qam_map(indices: &[usize], order: usize) -> Result<SymbolFrame> {
    let qam = Qam::new(order)?;
    if let Some(bad) = indices.iter().find(|&&i| i >= order) {
        return arg(format!("symbol label {bad} out of range for order {order}"));
    }
    Ok(SymbolFrame {
        symbols: vec![indices.iter().map(|&i| qam.point(i)).collect()],
        modulation: Some(qam),
        normalized: true,
    })
}

/// Closed-form root-raised-cosine impulse response at `t` symbol periods.
pub fn rrc_impulse(t: f64, rolloff: f64) -> f64 {
    let b = rolloff;
    if t.abs() < 1e-12 {
        return 1.0 - b + 4.0 * b / PI;
    }
    if ((4.0 * b * t).abs() - 1.0).abs() < 1e-9 {
        let a = PI / (4.0 * b);
        return b / 2f64.sqrt() * ((1.0 + 2.0 / PI) * a.sin() + (1.0 - 2.0 / PI) * a.cos());
    }
    let num = (PI * t * (1.0 - b)).sin() + 4.0 * b * t * (PI * t * (1.0 + b)).cos();
    let den = PI * t * (1.0 - (4.0 * b * t).powi(2));
    num / den
}

/// Unit-energy root-raised-cosine taps, `span_symbols * sps + 1` long.
pub fn rrc_taps(rolloff: f64, span_symbols: usize, sps: usize) -> Result<Vec<f64>> {
    if !(rolloff > 0.0 && rolloff <= 1.0) {
        return config(format!("roll-off {rolloff} outside (0, 1]"));
    }
    if span_symbols == 0 || span_symbols % 2 != 0 {
        return arg("RRC span must be a positive even number of symbols");
    }
    if sps == 0 {
        return arg("samples per symbol must be >= 1");
    }
    let n = span_symbols * sps + 1;
    let c = (n / 2) as f64;
    let mut taps: Vec<f64> = (0..n)
        .map(|k| rrc_impulse((k as f64 - c) / sps as f64, rolloff))
        .collect();
    let norm = taps.iter().map(|t| t * t).sum::<f64>().sqrt();
    for t in taps.iter_mut() {
        *t /= norm;
    }
    // exact mirror symmetry regardless of rounding in the closed form
    for k in 0..n / 2 {
        taps[n - 1 - k] = taps[k];
    }
    Ok(taps)
}

/// Pulse-shaped waveform plus the sample index of symbol 0's pulse peak.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapedSignal {
    pub signal: ComplexSignal,
    pub delay: usize,
}

/// Zero-stuffs `symbols` by `sps` and linearly convolves with `taps`. The output
/// holds the full convolution, padded with zeros to a whole number of symbols.
pub fn shape(
    symbols: &SymbolFrame,
    sps: usize,
    taps: &[f64],
    symbol_rate: f64,
) -> Result<ShapedSignal> {
    if taps.is_empty() || sps == 0 {
        return arg("shaping needs at least one tap and sps >= 1");
    }
    if symbols.is_empty() {
        return arg("empty symbol frame");
    }
    let n_sym = symbols.len();
    let full = n_sym * sps + taps.len() - 1;
    let n_out = full.div_ceil(sps) * sps;
    let grid = SamplingGrid::new(symbol_rate * sps as f64, n_out, sps)?;
    let pols = symbols
        .symbols
        .iter()
        .map(|p| {
            let mut out = vec![ZERO; n_out];
            for (k, s) in p.iter().enumerate() {
                if *s == ZERO {
                    continue;
                }
                for (j, t) in taps.iter().enumerate() {
                    out[k * sps + j] += s * t;
                }
            }
            out
        })
        .collect();
    Ok(ShapedSignal {
        signal: ComplexSignal::from_pols(grid, pols)?,
        delay: (taps.len() - 1) / 2,
    })
}

/// Periodic pulse shaping of a cyclic frame: symbol `k` peaks at sample `k * sps`.
pub fn shape_periodic(
    symbols: &SymbolFrame,
    sps: usize,
    taps: &[f64],
    symbol_rate: f64,
) -> Result<ComplexSignal> {
    let n_sym = symbols.len();
    if n_sym == 0 {
        return arg("empty symbol frame");
    }
    let n = n_sym * sps;
    let grid = SamplingGrid::new(symbol_rate * sps as f64, n, sps)?;
    let c = (taps.len() / 2) as isize;
    let pols = symbols
        .symbols
        .iter()
        .map(|p| {
            let mut out = vec![ZERO; n];
            for (k, s) in p.iter().enumerate() {
                for (j, t) in taps.iter().enumerate() {
                    let idx = (k * sps) as isize + j as isize - c;
                    out[idx.rem_euclid(n as isize) as usize] += s * t;
                }
            }
            out
        })
        .collect();
    ComplexSignal::from_pols(grid, pols)
}

/// "Same"-aligned linear convolution with a real symmetric filter: output `n`
/// is centered on input `n`, samples beyond the ends are treated as zero.
pub fn filter_same_real(x: &[Complex64], taps: &[f64]) -> Vec<Complex64> {
    let n = x.len() as isize;
    let c = (taps.len() / 2) as isize;
    (0..n)
        .map(|i| {
            let mut acc = ZERO;
            for (j, t) in taps.iter().enumerate() {
                let idx = i + c - j as isize;
                if idx >= 0 && idx < n {
                    acc += x[idx as usize] * *t;
                }
            }
            acc
        })
        .collect()
}

/// Cyclic counterpart of [`filter_same_real`].
pub fn filter_periodic_real(x: &[Complex64], taps: &[f64]) -> Vec<Complex64> {
    let n = x.len() as isize;
    let c = (taps.len() / 2) as isize;
    (0..n)
        .map(|i| {
            let mut acc = ZERO;
            for (j, t) in taps.iter().enumerate() {
                let idx = (i + c - j as isize).rem_euclid(n);
                acc += x[idx as usize] * *t;
            }
            acc
        })
        .collect()
}

/// Matched filtering ("same" alignment, so it adds no delay) followed by
/// sampling at `delay + k * sps`. Symbol slots cover the samples between the
/// leading and trailing `delay`-sample margins.
pub fn matched_filter_downsample(
    sig: &ComplexSignal,
    taps: &[f64],
    delay: usize,
) -> Result<SymbolFrame> {
    let n = sig.len();
    let sps = sig.grid.samples_per_symbol();
    if 2 * delay >= n {
        return Err(Error::Bounds(format!(
            "delay {delay} leaves no symbols in a {n}-sample signal"
        )));
    }
    let n_slots = (n - 2 * delay - 1) / sps + 1;
    let symbols = sig
        .pols()
        .map(|p| {
            let y = filter_same_real(p, taps);
            (0..n_slots).map(|k| y[delay + k * sps]).collect()
        })
        .collect();
    Ok(SymbolFrame::received(symbols))
}

/// Cyclic matched filter and downsampling for periodic frames (symbol 0 at sample 0).
pub fn matched_filter_periodic(sig: &ComplexSignal, taps: &[f64]) -> SymbolFrame {
    let sps = sig.grid.samples_per_symbol();
    let symbols = sig
        .pols()
        .map(|p| filter_periodic_real(p, taps).into_iter().step_by(sps).collect())
        .collect();
    SymbolFrame::received(symbols)
}

/// Least-squares complex gain `a` minimizing `Σ|a·rx − tx|²`.
pub fn ls_alignment(rx: &[Complex64], tx: &[Complex64]) -> Complex64 {
    let num: Complex64 = rx.iter().zip(tx).map(|(r, t)| r.conj() * t).sum();
    let den: f64 = rx.iter().map(|r| r.norm_sqr()).sum();
    if den == 0.0 {
        ZERO
    } else {
        num / den
    }
}

/// Effective SNR in dB after per-polarization least-squares gain/phase alignment.
/// Signal and residual energies are summed over polarizations before the ratio.
pub fn effective_snr(rx: &SymbolFrame, tx: &SymbolFrame) -> Result<f64> {
    if rx.is_empty() || tx.is_empty() {
        return arg("effective SNR of an empty frame");
    }
    if rx.n_pols() != tx.n_pols() || rx.len() != tx.len() {
        return arg(format!(
            "frame shape mismatch: rx {}x{}, tx {}x{}",
            rx.n_pols(),
            rx.len(),
            tx.n_pols(),
            tx.len()
        ));
    }
    let mut sig = 0.0;
    let mut err = 0.0;
    for (r, t) in rx.symbols.iter().zip(&tx.symbols) {
        let a = ls_alignment(r, t);
        sig += t.iter().map(|v| v.norm_sqr()).sum::<f64>();
        err += r
            .iter()
            .zip(t)
            .map(|(r, t)| (a * r - t).norm_sqr())
            .sum::<f64>();
    }
    Ok(snr_db(sig, err))
}

pub(crate) fn snr_db(sig: f64, err: f64) -> f64 {
    if err <= 0.0 {
        return SNR_CAP_DB;
    }
    (10.0 * (sig / err).log10()).min(SNR_CAP_DB)
}
