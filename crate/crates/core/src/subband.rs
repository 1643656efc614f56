//! Subband processing: a DFT-modulated uniform filter bank and the split-step
//! receiver whose nonlinear steps couple subband intensities through MIMO filters.
//!
//! The bank works on cyclic frames in the frequency domain. Subband `i` is
//! centered at `(i − (S−1)/2)·fs/S` and shaped by a root-raised-cosine window
//! of width `fs/S`; the squared windows sum to one, so synthesis with the same
//! windows reconstructs the input exactly. Each subband keeps
//! `oversampling·N/S` bins around its center.

use crate::autodiff::{NodeId, ReverseRule, Tape, Value};
use crate::channel::{cd_response, Direction, FiberParams};
use crate::error::{arg, config, Error, Result};
use crate::fft;
use crate::kernels;
use crate::signal::ComplexSignal;
use crate::training::{ParamGroup, ParamSet};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterBankConfig {
    pub n_subbands: usize,
    /// Roll-off of the root-raised-cosine prototype window.
    pub rolloff: f64,
    pub oversampling: usize,
}

impl FilterBankConfig {
    pub fn new(n_subbands: usize) -> Self {
        Self {
            n_subbands,
            rolloff: 0.2,
            oversampling: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_subbands < 2 {
            return config("a filter bank needs at least two subbands");
        }
        if !(self.rolloff > 0.0 && self.rolloff <= 1.0) {
            return config("prototype roll-off must lie in (0, 1]");
        }
        if self.oversampling < 1 || 1.0 + self.rolloff > self.oversampling as f64 {
            return config("oversampling must cover the prototype bandwidth (1 + roll-off)");
        }
        Ok(())
    }

    /// Input lengths must be multiples of this; shorter inputs are zero padded.
    pub fn length_multiple(&self) -> usize {
        2 * self.n_subbands
    }

    /// Window amplitude at `nu` cycles per subband spacing from the center.
    pub fn window(&self, nu: f64) -> f64 {
        let r = self.rolloff;
        let a = nu.abs();
        if a <= (1.0 - r) / 2.0 {
            1.0
        } else if a >= (1.0 + r) / 2.0 {
            0.0
        } else {
            (0.5 * (1.0 + (PI / r * (a - (1.0 - r) / 2.0)).cos())).sqrt()
        }
    }

    /// Time-domain prototype sampled at the input rate over `span` subband
    /// symbols: the inverse transform of the window, symmetric about its center.
    pub fn prototype_taps(&self, span: usize) -> Vec<f64> {
        let s = self.n_subbands as f64;
        let half = (span * self.n_subbands) / 2;
        (0..=2 * half)
            .map(|i| crate::signal::rrc_impulse((i as f64 - half as f64) / s, self.rolloff) / s)
            .collect()
    }
}

/// Subband waveforms of one frame, all on a common grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SubbandFrame {
    pub subbands: Vec<Vec<Complex64>>,
    /// Center frequency of each subband relative to the carrier (Hz).
    pub centers_hz: Vec<f64>,
    /// Sample rate of the subband waveforms (Hz).
    pub sample_rate: f64,
    /// Length of the split input before padding.
    pub orig_len: usize,
    /// Padded full-rate length.
    pub full_len: usize,
    pub full_rate: f64,
}

impl SubbandFrame {
    /// Degenerate single-subband frame holding the signal itself.
    pub fn from_signal(sig: &ComplexSignal) -> Result<Self> {
        if sig.is_dual() {
            return arg("subband processing is single-polarization");
        }
        Ok(Self {
            subbands: vec![sig.pol_x.clone()],
            centers_hz: vec![0.0],
            sample_rate: sig.grid.sample_rate(),
            orig_len: sig.len(),
            full_len: sig.len(),
            full_rate: sig.grid.sample_rate(),
        })
    }

    pub fn n_subbands(&self) -> usize {
        self.subbands.len()
    }

    pub fn len(&self) -> usize {
        self.subbands.first().map_or(0, |s| s.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dt_ps(&self) -> f64 {
        1e12 / self.sample_rate
    }
}

struct BankLayout {
    n_full: usize,
    n_sub: usize,
    /// Full-rate bin index of each subband center.
    centers: Vec<usize>,
    /// Window value at each signed subband bin, per subband.
    windows: Vec<Vec<f64>>,
}

fn signed_bin(k: usize, n: usize) -> isize {
    if k < n.div_ceil(2) {
        k as isize
    } else {
        k as isize - n as isize
    }
}

fn layout(cfg: &FilterBankConfig, n_full: usize) -> BankLayout {
    let s = cfg.n_subbands;
    let n_sub = cfg.oversampling * n_full / s;
    let spacing = (n_full / s) as f64;
    let centers = (0..s)
        .map(|i| {
            let c = (2 * i as isize + 1 - s as isize) * (n_full / (2 * s)) as isize;
            c.rem_euclid(n_full as isize) as usize
        })
        .collect();
    let windows = (0..s)
        .map(|_| {
            (0..n_sub)
                .map(|k| cfg.window(signed_bin(k, n_sub) as f64 / spacing))
                .collect()
        })
        .collect();
    BankLayout {
        n_full,
        n_sub,
        centers,
        windows,
    }
}

impl BankLayout {
    fn full_bin(&self, i: usize, k: usize) -> usize {
        (self.centers[i] as isize + signed_bin(k, self.n_sub)).rem_euclid(self.n_full as isize) as usize
    }

    fn analysis(&self, x: &[Complex64]) -> Vec<Vec<Complex64>> {
        let spec = fft::fft(x);
        let gain = self.n_sub as f64 / self.n_full as f64;
        (0..self.centers.len())
            .map(|i| {
                let mut u: Vec<Complex64> = (0..self.n_sub)
                    .map(|k| spec[self.full_bin(i, k)] * (self.windows[i][k] * gain))
                    .collect();
                fft::ifft_in_place(&mut u);
                u
            })
            .collect()
    }

    fn synthesis(&self, subbands: &[Vec<Complex64>]) -> Vec<Complex64> {
        let mut spec = vec![Complex64::new(0.0, 0.0); self.n_full];
        let gain = self.n_full as f64 / self.n_sub as f64;
        for (i, u) in subbands.iter().enumerate() {
            let us = fft::fft(u);
            for (k, v) in us.iter().enumerate() {
                spec[self.full_bin(i, k)] += v * (self.windows[i][k] * gain);
            }
        }
        fft::ifft_in_place(&mut spec);
        spec
    }

    /// Adjoint of [`Self::synthesis`] under the real inner product.
    fn synthesis_adjoint(&self, g: &[Complex64]) -> Vec<Vec<Complex64>> {
        let spec = fft::fft(g);
        let gain = self.n_full as f64 / self.n_sub as f64;
        let scale = self.n_sub as f64 / self.n_full as f64;
        (0..self.centers.len())
            .map(|i| {
                let mut u: Vec<Complex64> = (0..self.n_sub)
                    .map(|k| spec[self.full_bin(i, k)] * (self.windows[i][k] * gain * scale))
                    .collect();
                fft::ifft_in_place(&mut u);
                u
            })
            .collect()
    }
}

/// Analysis bank. Inputs whose length is not a multiple of
/// [`FilterBankConfig::length_multiple`] are zero padded; the original length
/// is recorded for [`merge`].
pub fn split(sig: &ComplexSignal, cfg: &FilterBankConfig) -> Result<SubbandFrame> {
    cfg.validate()?;
    if sig.is_dual() {
        return arg("subband processing is single-polarization");
    }
    let m = cfg.length_multiple();
    let n = sig.len().div_ceil(m) * m;
    let mut x = sig.pol_x.clone();
    x.resize(n, Complex64::new(0.0, 0.0));
    let lay = layout(cfg, n);
    let fs = sig.grid.sample_rate();
    let s = cfg.n_subbands;
    Ok(SubbandFrame {
        subbands: lay.analysis(&x),
        centers_hz: (0..s)
            .map(|i| (2.0 * i as f64 + 1.0 - s as f64) * fs / (2.0 * s as f64))
            .collect(),
        sample_rate: fs * cfg.oversampling as f64 / s as f64,
        orig_len: sig.len(),
        full_len: n,
        full_rate: fs,
    })
}

fn check_frame(frame: &SubbandFrame, cfg: &FilterBankConfig) -> Result<BankLayout> {
    cfg.validate()?;
    let lay = layout(cfg, frame.full_len);
    if frame.n_subbands() != cfg.n_subbands
        || frame.full_len % cfg.length_multiple() != 0
        || frame.subbands.iter().any(|u| u.len() != lay.n_sub)
    {
        return config("subband frame does not match the filter-bank configuration");
    }
    Ok(lay)
}

/// Synthesis bank; returns the first `orig_len` samples of the reconstruction.
pub fn merge(frame: &SubbandFrame, cfg: &FilterBankConfig) -> Result<ComplexSignal> {
    let lay = check_frame(frame, cfg)?;
    let mut y = lay.synthesis(&frame.subbands);
    y.truncate(frame.orig_len);
    let grid = crate::signal::SamplingGrid::new(frame.full_rate, frame.orig_len, 1)?;
    ComplexSignal::single(grid, y)
}

/// Analysis-plus-synthesis delay in input samples; the bank is zero phase.
pub const ROUND_TRIP_DELAY: usize = 0;

/// Real `S×S×L` tensor, row-major `[output][input][tap]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MimoIntensityTensor {
    pub s: usize,
    pub len: usize,
    pub coeffs: Vec<f64>,
}

impl MimoIntensityTensor {
    pub fn new(s: usize, len: usize, coeffs: Vec<f64>) -> Result<Self> {
        if len % 2 == 0 || s == 0 || coeffs.len() != s * s * len {
            return arg(format!(
                "tensor needs odd L and S·S·L coefficients (S={s}, L={len}, {} given)",
                coeffs.len()
            ));
        }
        Ok(Self { s, len, coeffs })
    }

    pub fn zeros(s: usize, len: usize) -> Result<Self> {
        Self::new(s, len, vec![0.0; s * s * len])
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.s + j) * self.len + k
    }

    pub fn center(&self) -> usize {
        self.len / 2
    }

    /// Center-tap tensor with `self_gain` on the diagonal and `cross_gain` elsewhere.
    pub fn memoryless(s: usize, len: usize, self_gain: f64, cross_gain: f64) -> Result<Self> {
        let mut t = Self::zeros(s, len)?;
        for i in 0..s {
            for j in 0..s {
                let k = t.index(i, j, t.center());
                t.coeffs[k] = if i == j { self_gain } else { cross_gain };
            }
        }
        Ok(t)
    }
}

fn intensities(frame: &SubbandFrame) -> Vec<Vec<f64>> {
    frame
        .subbands
        .iter()
        .map(|u| u.iter().map(|v| v.norm_sqr()).collect())
        .collect()
}

/// `φᵢ[n] = Σⱼ Σₖ c[i,j,k]·|uⱼ[n−k+center]|²`.
pub fn coupled_phase(frame: &SubbandFrame, tensor: &MimoIntensityTensor) -> Result<Vec<Vec<f64>>> {
    if tensor.s != frame.n_subbands() {
        return arg("tensor and frame disagree on the number of subbands");
    }
    Ok(kernels::mimo_conv(&intensities(frame), &tensor.coeffs, tensor.s, tensor.len))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorCascade {
    pub stages: Vec<MimoIntensityTensor>,
}

impl TensorCascade {
    pub fn new(stages: Vec<MimoIntensityTensor>) -> Result<Self> {
        let Some(first) = stages.first() else {
            return arg("a cascade needs at least one stage");
        };
        if stages.iter().any(|t| t.s != first.s) {
            return arg("cascade stages disagree on the number of subbands");
        }
        Ok(Self { stages })
    }

    pub fn composed_len(&self) -> usize {
        self.stages.iter().map(|t| t.len - 1).sum::<usize>() + 1
    }

    /// Dense tensor of the composed stages, built by pushing an impulse on
    /// every input channel through the cascade.
    pub fn dense_equivalent(&self) -> MimoIntensityTensor {
        let s = self.stages[0].s;
        let l = self.composed_len();
        let c = l / 2;
        let n = 2 * l - 1;
        let mut dense = MimoIntensityTensor::zeros(s, l).expect("odd composed length");
        for j in 0..s {
            let mut x = vec![vec![0.0; n]; s];
            x[j][n / 2] = 1.0;
            for t in &self.stages {
                x = kernels::mimo_conv(&x, &t.coeffs, s, t.len);
            }
            for (i, xi) in x.iter().enumerate() {
                for k in 0..l {
                    // y[n] = Σ h[k]·δ[n − k + c − n/2]
                    let idx = dense.index(i, j, k);
                    dense.coeffs[idx] = xi[n / 2 + k - c];
                }
            }
        }
        dense
    }
}

pub fn cascade_phase(frame: &SubbandFrame, cascade: &TensorCascade) -> Result<Vec<Vec<f64>>> {
    if cascade.stages[0].s != frame.n_subbands() {
        return arg("cascade and frame disagree on the number of subbands");
    }
    let mut x = intensities(frame);
    for t in &cascade.stages {
        x = kernels::mimo_conv(&x, &t.coeffs, t.s, t.len);
    }
    Ok(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub zeros: usize,
    pub total: usize,
    pub fraction: f64,
}

pub fn sparsity_report(cascade: &TensorCascade) -> SparsityReport {
    let total: usize = cascade.stages.iter().map(|t| t.coeffs.len()).sum();
    let zeros = cascade
        .stages
        .iter()
        .flat_map(|t| t.coeffs.iter())
        .filter(|v| **v == 0.0)
        .count();
    SparsityReport {
        zeros,
        total,
        fraction: if total == 0 { 0.0 } else { zeros as f64 / total as f64 },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Coupling {
    Dense(MimoIntensityTensor),
    Cascade(TensorCascade),
}

impl Coupling {
    fn stages(&self) -> Vec<&MimoIntensityTensor> {
        match self {
            Coupling::Dense(t) => vec![t],
            Coupling::Cascade(c) => c.stages.iter().collect(),
        }
    }

    fn stages_mut(&mut self) -> Vec<&mut MimoIntensityTensor> {
        match self {
            Coupling::Dense(t) => vec![t],
            Coupling::Cascade(c) => c.stages.iter_mut().collect(),
        }
    }

    pub fn phase(&self, frame: &SubbandFrame) -> Result<Vec<Vec<f64>>> {
        match self {
            Coupling::Dense(t) => coupled_phase(frame, t),
            Coupling::Cascade(c) => cascade_phase(frame, c),
        }
    }
}

/// One step: a full complex FIR per subband, then the coupled phase rotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubbandStep {
    /// `filters[i]` are the taps of subband `i`; all filters share one length.
    pub filters: Vec<Vec<Complex64>>,
    pub coupling: Coupling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubbandDbpModel {
    pub steps: Vec<SubbandStep>,
}

impl SubbandDbpModel {
    pub fn n_subbands(&self) -> usize {
        self.steps.first().map_or(0, |s| s.filters.len())
    }

    /// Samples (subband rate) at each end affected by zero-padded edges.
    pub fn guard(&self) -> usize {
        self.steps
            .iter()
            .map(|s| {
                s.filters[0].len() / 2 + s.coupling.stages().iter().map(|t| t.len / 2).sum::<usize>()
            })
            .sum()
    }

    /// `step{i}.taps` (all subband filters, interleaved pairs) and
    /// `step{i}.coupling{k}` for every coupling stage.
    pub fn to_params(&self) -> ParamSet {
        let mut p = ParamSet::new();
        for (i, s) in self.steps.iter().enumerate() {
            let k = s.filters[0].len();
            let v: Vec<f64> = s.filters.iter().flatten().flat_map(|c| [c.re, c.im]).collect();
            p.push(format!("step{i}.taps"), ParamGroup::CdTaps, vec![s.filters.len(), k, 2], v)
                .expect("fresh names");
            for (j, t) in s.coupling.stages().iter().enumerate() {
                p.push(
                    format!("step{i}.coupling{j}"),
                    ParamGroup::Coupling,
                    vec![t.s, t.s, t.len],
                    t.coeffs.clone(),
                )
                .expect("fresh names");
            }
        }
        p
    }

    pub fn with_params(&self, p: &ParamSet) -> Result<Self> {
        let mut out = self.clone();
        for (i, s) in out.steps.iter_mut().enumerate() {
            let taps = p
                .get(&format!("step{i}.taps"))
                .ok_or_else(|| Error::Config(format!("missing step{i}.taps")))?;
            let k = s.filters[0].len();
            if taps.values.len() != 2 * k * s.filters.len() {
                return config(format!("step {i} taps do not match the model"));
            }
            for (f, chunk) in s.filters.iter_mut().zip(taps.values.chunks_exact(2 * k)) {
                *f = chunk.chunks_exact(2).map(|c| Complex64::new(c[0], c[1])).collect();
            }
            for (j, t) in s.coupling.stages_mut().into_iter().enumerate() {
                let e = p
                    .get(&format!("step{i}.coupling{j}"))
                    .ok_or_else(|| Error::Config(format!("missing step{i}.coupling{j}")))?;
                if e.values.len() != t.coeffs.len() {
                    return config(format!("step {i} coupling {j} does not match the model"));
                }
                t.coeffs.clone_from(&e.values);
            }
        }
        Ok(out)
    }

    pub fn sparsity(&self) -> SparsityReport {
        let stages: Vec<MimoIntensityTensor> = self
            .steps
            .iter()
            .flat_map(|s| s.coupling.stages().into_iter().cloned())
            .collect();
        sparsity_report(&TensorCascade { stages })
    }
}

pub fn subband_dbp_forward(frame: &SubbandFrame, model: &SubbandDbpModel) -> Result<SubbandFrame> {
    if model.n_subbands() != frame.n_subbands() {
        return arg("model and frame disagree on the number of subbands");
    }
    let mut out = frame.clone();
    for step in &model.steps {
        out.subbands = out
            .subbands
            .iter()
            .zip(&step.filters)
            .map(|(u, h)| kernels::conv_same(u, h))
            .collect();
        let phi = step.coupling.phase(&out)?;
        for (u, p) in out.subbands.iter_mut().zip(&phi) {
            for (v, f) in u.iter_mut().zip(p) {
                *v *= Complex64::from_polar(1.0, -f);
            }
        }
    }
    Ok(out)
}

/// Records the model on a tape; `params` in [`SubbandDbpModel::to_params`] order.
pub fn subband_dbp_tape(
    tape: &mut Tape,
    x: NodeId,
    model: &SubbandDbpModel,
    params: &[NodeId],
) -> Result<NodeId> {
    let mut u = x;
    let s = model.n_subbands();
    let mut it = params.iter();
    let mut next = || {
        it.next()
            .copied()
            .ok_or_else(|| Error::Contract("too few subband parameters".into()))
    };
    for step in &model.steps {
        u = tape.fir_bank(u, next()?, step.filters[0].len())?;
        let mut phi = tape.intensity(u)?;
        for t in step.coupling.stages() {
            phi = tape.mimo_conv(phi, next()?, s, t.len)?;
        }
        u = tape.phase_rotate(u, phi)?;
    }
    Ok(u)
}

struct MergeRule {
    lay: BankLayout,
}

impl ReverseRule for MergeRule {
    fn backward(&self, _inputs: &[&Value], _output: &Value, grad: &Value) -> Result<Vec<Value>> {
        let mut g = grad.as_complex()?[0].clone();
        g.resize(self.lay.n_full, Complex64::new(0.0, 0.0));
        Ok(vec![Value::Complex(self.lay.synthesis_adjoint(&g))])
    }
}

/// Synthesis bank as a tape operation (single output channel).
pub fn merge_tape(
    tape: &mut Tape,
    x: NodeId,
    cfg: &FilterBankConfig,
    full_len: usize,
    orig_len: usize,
) -> Result<NodeId> {
    cfg.validate()?;
    let lay = layout(cfg, full_len);
    let u = tape.value(x).as_complex()?;
    if u.len() != cfg.n_subbands || u.iter().any(|c| c.len() != lay.n_sub) {
        return config("subband node does not match the filter bank");
    }
    let mut y = lay.synthesis(u);
    y.truncate(orig_len);
    Ok(tape.custom(
        "subband_merge",
        &[x],
        Value::Complex(vec![y]),
        Some(Box::new(MergeRule { lay })),
    ))
}

/// Least-squares fit of `k` full complex taps ("same" alignment) to
/// `response(ω)` over `|ω| ≤ band·π` rad/sample.
pub fn ls_general_fit<F>(k: usize, band: f64, response: F) -> Result<Vec<Complex64>>
where
    F: Fn(f64) -> Complex64,
{
    if k % 2 == 0 {
        return arg(format!("filter length must be odd, got {k}"));
    }
    if !(band > 0.0 && band <= 1.0) {
        return arg("fit band must lie in (0, 1]");
    }
    let c = (k / 2) as f64;
    let n_pts = 64 * k + 256;
    let omegas: Vec<f64> = (0..n_pts)
        .map(|i| band * PI * (-1.0 + (2.0 * i as f64 + 1.0) / n_pts as f64))
        .collect();
    let a = DMatrix::from_fn(n_pts, k, |r, col| Complex64::from_polar(1.0, -omegas[r] * (col as f64 - c)));
    let b = DVector::from_iterator(n_pts, omegas.iter().map(|w| response(*w)));
    let svd = a.svd(true, true);
    let h = svd
        .solve(&b, 1e-10)
        .map_err(|e| Error::Contract(format!("least-squares fit failed: {e}")))?;
    Ok(h.iter().copied().collect())
}

/// Per-subband inverse-dispersion filters of a step of length `z` km, each
/// fitted to the response of its own band (including its group delay).
pub fn subband_cd_filters(
    frame_centers_hz: &[f64],
    subband_rate: f64,
    cfg: &FilterBankConfig,
    fiber: &FiberParams,
    z: f64,
    k: usize,
) -> Result<Vec<Vec<Complex64>>> {
    let dt_ps = 1e12 / subband_rate;
    // occupied fraction of the subband Nyquist band
    let band = ((1.0 + cfg.rolloff) / cfg.oversampling as f64).min(1.0);
    frame_centers_hz
        .iter()
        .map(|&f| {
            let big_omega = 2.0 * PI * f * 1e-12;
            ls_general_fit(k, band, |w| {
                cd_response(fiber.beta2, z, w / dt_ps + big_omega, Direction::Backward)
            })
        })
        .collect()
}

/// Initial subband model: per step the fitted per-band CD filters and a
/// memoryless coupling with self-phase `γ·L_eff` and cross-phase twice that.
/// `cascade` chooses a cascade of the given stage lengths (first stage holds
/// the coupling, later stages start as identities) instead of a dense tensor.
pub fn init_subband_model(
    fiber: &FiberParams,
    cfg: &FilterBankConfig,
    full_rate: f64,
    n_steps: usize,
    taps: usize,
    dense_len: usize,
    cascade: Option<&[usize]>,
) -> Result<SubbandDbpModel> {
    cfg.validate()?;
    let s = cfg.n_subbands;
    let centers: Vec<f64> = (0..s)
        .map(|i| (2.0 * i as f64 + 1.0 - s as f64) * full_rate / (2.0 * s as f64))
        .collect();
    let sub_rate = full_rate * cfg.oversampling as f64 / s as f64;
    let z = fiber.total_length() / n_steps as f64;
    let filters = subband_cd_filters(&centers, sub_rate, cfg, fiber, z, taps)?;
    let coupling = |nl: f64| -> Result<Coupling> {
        Ok(match cascade {
            None => Coupling::Dense(MimoIntensityTensor::memoryless(s, dense_len, nl, 2.0 * nl)?),
            Some(lens) => {
                let stages = lens
                    .iter()
                    .enumerate()
                    .map(|(i, &l)| {
                        if i == 0 {
                            MimoIntensityTensor::memoryless(s, l, nl, 2.0 * nl)
                        } else {
                            MimoIntensityTensor::memoryless(s, l, 1.0, 0.0)
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                Coupling::Cascade(TensorCascade::new(stages)?)
            }
        })
    };
    Ok(SubbandDbpModel {
        steps: (0..n_steps)
            .map(|i| {
                Ok(SubbandStep {
                    filters: filters.clone(),
                    coupling: coupling(fiber.gamma * fiber.backward_step_l_eff(n_steps, i))?,
                })
            })
            .collect::<Result<_>>()?,
    })
}
