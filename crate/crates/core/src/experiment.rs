//! Scenario presets, keyed frame generation, windowed training data, the
//! differentiable receivers used for training, and evaluation helpers.
//!
//! Frames are cyclic: the transmitter shapes a periodic symbol sequence and the
//! channel acts on it circularly. Receivers see windows cut from a received
//! frame with a cyclic guard on each side; only the interior symbols enter
//! losses and metrics.

use crate::autodiff::{NodeId, Tape, Value};
use crate::channel::{self, AmplifierConfig, FiberParams, PmdLink};
use crate::dbp::{self, DbpModel};
use crate::error::{arg, Error, Result};
use crate::fft;
use crate::kernels;
use crate::pmd::{self, MimoFirBaseline, PmdModel, StageOrder};
use crate::rng::{derive_seed, keyed_rng};
use crate::signal::{self, ComplexSignal, Qam, SamplingGrid, SymbolFrame};
use crate::subband::{self, FilterBankConfig, SubbandDbpModel};
use crate::training::{DataSource, Objective, ParamGroup, ParamSet};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

pub fn dbm_to_watts(dbm: f64) -> f64 {
    1e-3 * 10f64.powf(dbm / 10.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub fiber: FiberParams,
    pub symbol_rate: f64,
    pub modulation: usize,
    pub rolloff: f64,
    /// RRC length in symbols, transmitter and matched filter.
    pub rrc_span: usize,
    pub tx_sps: usize,
    pub rx_sps: usize,
    pub frame_symbols: usize,
    /// Forward-simulation steps per span.
    pub steps_per_span: usize,
    pub dual_pol: bool,
    pub amplifier: AmplifierConfig,
}

impl Default for Scenario {
    /// Single-channel 10 Gbaud over 25 × 80 km of SSMF, noiseless.
    fn default() -> Self {
        Self {
            fiber: FiberParams::default(),
            symbol_rate: 10e9,
            modulation: 16,
            rolloff: 0.1,
            rrc_span: 64,
            tx_sps: 8,
            rx_sps: 2,
            frame_symbols: 2048,
            steps_per_span: 50,
            dual_pol: false,
            amplifier: AmplifierConfig::noiseless(),
        }
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        self.fiber.validate()?;
        Qam::new(self.modulation)?;
        if self.tx_sps < self.rx_sps || self.rx_sps < 1 {
            return arg("need tx_sps >= rx_sps >= 1");
        }
        if self.frame_symbols < 2 * self.rrc_span {
            return arg("frame too short for the pulse-shaping filter");
        }
        if !(self.symbol_rate > 0.0) {
            return arg("symbol rate must be positive");
        }
        if self.steps_per_span < 1 {
            return arg("steps per span must be >= 1");
        }
        Ok(())
    }

    pub fn rx_taps(&self) -> Result<Vec<f64>> {
        signal::rrc_taps(self.rolloff, self.rrc_span, self.rx_sps)
    }

    pub fn rx_rate(&self) -> f64 {
        self.symbol_rate * self.rx_sps as f64
    }

    pub fn n_pols(&self) -> usize {
        if self.dual_pol {
            2
        } else {
            1
        }
    }
}

/// Transmitted symbols and the received waveform of one cyclic frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub tx: SymbolFrame,
    /// Received signal at the receiver rate.
    pub rx: ComplexSignal,
    /// Matched-filter output amplitude of a unit symbol in a back-to-back link.
    pub gain: f64,
}

fn draw_symbols(scn: &Scenario, seed: u64, index: u64) -> Result<SymbolFrame> {
    let mut rng = keyed_rng(seed, &[index, 0x5359]);
    let pols = (0..scn.n_pols())
        .map(|_| {
            let labels: Vec<usize> = (0..scn.frame_symbols)
                .map(|_| rng.gen_range(0..scn.modulation))
                .collect();
            Ok(signal::qam_map(&labels, scn.modulation)?.symbols.remove(0))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SymbolFrame {
        symbols: pols,
        modulation: Some(Qam::new(scn.modulation)?),
        normalized: true,
    })
}

fn transmit(scn: &Scenario, tx: &SymbolFrame, power_w: f64) -> Result<(ComplexSignal, f64)> {
    let taps = signal::rrc_taps(scn.rolloff, scn.rrc_span, scn.tx_sps)?;
    let mut sig = signal::shape_periodic(tx, scn.tx_sps, &taps, scn.symbol_rate)?;
    let per_pol = power_w / scn.n_pols() as f64;
    let amp = (per_pol * scn.tx_sps as f64).sqrt();
    sig.scale(amp);
    let rx_taps = scn.rx_taps()?;
    let gain = amp * taps[taps.len() / 2] / rx_taps[rx_taps.len() / 2];
    Ok((sig, gain))
}

fn to_rx_rate(scn: &Scenario, sig: &ComplexSignal) -> Result<ComplexSignal> {
    let n = scn.frame_symbols * scn.rx_sps;
    let grid = SamplingGrid::new(scn.rx_rate(), n, scn.rx_sps)?;
    let pols = sig.pols().map(|p| fft::resample_periodic(p, n)).collect();
    ComplexSignal::from_pols(grid, pols)
}

/// Frame `index` of a data set: symbols and amplifier noise keyed by
/// `(seed, index)`, propagated over the scenario link at `power_dbm`.
pub fn generate_frame(scn: &Scenario, power_dbm: f64, seed: u64, index: u64) -> Result<Frame> {
    scn.validate()?;
    let tx = draw_symbols(scn, seed, index)?;
    let (sig, gain) = transmit(scn, &tx, dbm_to_watts(power_dbm))?;
    let amp = AmplifierConfig {
        seed: derive_seed(seed, &[scn.amplifier.seed]),
        ..scn.amplifier
    };
    let out = channel::propagate(&sig, &scn.fiber, None, &amp, scn.steps_per_span, index)?;
    Ok(Frame {
        tx,
        rx: to_rx_rate(scn, &out)?,
        gain,
    })
}

/// Dual-polarization linear PMD frame: the link (if any) applied in the
/// frequency domain, then white noise giving `snr_db` per symbol after the
/// matched filter. The noise stream is keyed by `(seed, index)` only, so
/// frames with and without PMD share the same noise realization.
pub fn generate_pmd_frame(
    scn: &Scenario,
    link: Option<&PmdLink>,
    snr_db: f64,
    seed: u64,
    index: u64,
) -> Result<Frame> {
    scn.validate()?;
    if !scn.dual_pol {
        return arg("PMD frames need a dual-polarization scenario");
    }
    let tx = draw_symbols(scn, seed, index)?;
    let (sig, gain) = transmit(scn, &tx, 1e-3)?;
    let mut rx = to_rx_rate(scn, &sig)?;
    if let Some(l) = link {
        rx = l.apply(&rx)?;
    }
    // matched-filter output noise variance = per-sample variance (unit-energy taps)
    let var = gain * gain / 10f64.powf(snr_db / 10.0);
    let sd = (var / 2.0).sqrt();
    let mut rng = keyed_rng(seed, &[index, 0x4e4f]);
    for p in rx.pols_mut() {
        for v in p.iter_mut() {
            let re: f64 = StandardNormal.sample(&mut rng);
            let im: f64 = StandardNormal.sample(&mut rng);
            *v += Complex64::new(re * sd, im * sd);
        }
    }
    Ok(Frame { tx, rx, gain })
}

pub fn generate_frames(scn: &Scenario, power_dbm: f64, seed: u64, count: usize) -> Result<Vec<Frame>> {
    (0..count as u64)
        .into_par_iter()
        .map(|i| generate_frame(scn, power_dbm, seed, i))
        .collect()
}

/// A received window with its cyclic guard and the scaled interior target.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub rx: Vec<Vec<Complex64>>,
    pub target: Vec<Vec<Complex64>>,
    pub sample_rate: f64,
    pub sps: usize,
    pub guard_symbols: usize,
}

impl Window {
    pub fn n_symbols(&self) -> usize {
        self.target.first().map_or(0, |t| t.len())
    }

    pub fn signal(&self) -> Result<ComplexSignal> {
        let grid = SamplingGrid::new(self.sample_rate, self.rx[0].len(), self.sps)?;
        ComplexSignal::from_pols(grid, self.rx.clone())
    }
}

/// Symbols `start .. start + n` (cyclically) with `guard` symbols of received
/// signal on each side.
pub fn cut_window(frame: &Frame, start: usize, n: usize, guard: usize) -> Window {
    let sps = frame.rx.grid.samples_per_symbol();
    let len = frame.rx.len() as isize;
    let m = frame.tx.len();
    let first = (start as isize - guard as isize) * sps as isize;
    let rx = frame
        .rx
        .pols()
        .map(|p| {
            (0..(n + 2 * guard) * sps)
                .map(|i| p[(first + i as isize).rem_euclid(len) as usize])
                .collect()
        })
        .collect();
    let target = frame
        .tx
        .symbols
        .iter()
        .map(|s| (0..n).map(|k| s[(start + k) % m] * frame.gain).collect())
        .collect();
    Window {
        rx,
        target,
        sample_rate: frame.rx.grid.sample_rate(),
        sps,
        guard_symbols: guard,
    }
}

/// The whole frame as one window with cyclic guards.
pub fn full_window(frame: &Frame, guard: usize) -> Window {
    cut_window(frame, 0, frame.tx.len(), guard)
}

/// Random windows of the given frames; batch `t` is keyed by `(seed, t)`.
pub struct WindowSource {
    pub frames: Vec<Frame>,
    pub window_symbols: usize,
    pub guard_symbols: usize,
    pub seed: u64,
}

impl DataSource for WindowSource {
    type Example = Window;

    fn batch(&self, iteration: usize, batch_size: usize) -> Vec<Window> {
        let mut rng = keyed_rng(self.seed, &[iteration as u64]);
        (0..batch_size)
            .map(|_| {
                let f = &self.frames[rng.gen_range(0..self.frames.len())];
                let start = rng.gen_range(0..f.tx.len());
                cut_window(f, start, self.window_symbols, self.guard_symbols)
            })
            .collect()
    }
}

fn matched_filter_node(tape: &mut Tape, y: NodeId, taps: &[f64], w: &Window) -> Result<NodeId> {
    tape.fir_decimate(y, taps, w.guard_symbols * w.sps, w.sps, w.n_symbols())
}

/// Matched filter and symbol sampling of a window-shaped waveform.
pub fn symbols_of(y: &[Vec<Complex64>], taps: &[f64], w: &Window) -> SymbolFrame {
    SymbolFrame::received(
        y.iter()
            .map(|p| kernels::fir_decimate(p, taps, w.guard_symbols * w.sps, w.sps, w.n_symbols()))
            .collect(),
    )
}

/// Multi-step DBP followed by the matched filter, trained with MSE.
pub struct DbpObjective {
    pub rx_taps: Vec<f64>,
}

impl Objective for DbpObjective {
    type Example = Window;

    fn loss(&self, tape: &mut Tape, params: &[NodeId], w: &Window) -> Result<NodeId> {
        let x = tape.leaf(Value::Complex(w.rx.clone()));
        let y = dbp::dbp_tape(tape, x, params)?;
        let z = matched_filter_node(tape, y, &self.rx_taps, w)?;
        tape.mse(z, w.target.clone())
    }
}

/// Subband DBP: fixed analysis bank, learnable steps, synthesis, matched filter.
pub struct SubbandObjective {
    pub model: SubbandDbpModel,
    pub bank: FilterBankConfig,
    pub rx_taps: Vec<f64>,
}

impl Objective for SubbandObjective {
    type Example = Window;

    fn loss(&self, tape: &mut Tape, params: &[NodeId], w: &Window) -> Result<NodeId> {
        let frame = subband::split(&w.signal()?, &self.bank)?;
        let x = tape.leaf(Value::Complex(frame.subbands.clone()));
        let y = subband::subband_dbp_tape(tape, x, &self.model, params)?;
        let m = subband::merge_tape(tape, y, &self.bank, frame.full_len, frame.orig_len)?;
        let z = matched_filter_node(tape, m, &self.rx_taps, w)?;
        tape.mse(z, w.target.clone())
    }
}

/// Multi-step PMD chain followed by the matched filter, trained with MSE.
pub struct PmdObjective {
    pub order: StageOrder,
    pub rx_taps: Vec<f64>,
}

impl Objective for PmdObjective {
    type Example = Window;

    fn loss(&self, tape: &mut Tape, params: &[NodeId], w: &Window) -> Result<NodeId> {
        let x = tape.leaf(Value::Complex(w.rx.clone()));
        let y = pmd::pmd_comp_tape(tape, x, params, self.order)?;
        let z = matched_filter_node(tape, y, &self.rx_taps, w)?;
        tape.mse(z, w.target.clone())
    }
}

/// Matched filter, 4×4 MIMO filter at the receiver rate, symbol-rate
/// sampling and the constant-modulus loss.
pub struct MimoCmaObjective {
    pub len: usize,
    pub radius: f64,
    pub rx_taps: Vec<f64>,
}

impl Objective for MimoCmaObjective {
    type Example = Window;

    fn loss(&self, tape: &mut Tape, params: &[NodeId], w: &Window) -> Result<NodeId> {
        let mf: Vec<Vec<Complex64>> = w
            .rx
            .iter()
            .map(|p| kernels::conv_same_real_taps(p, &self.rx_taps))
            .collect();
        let x = tape.leaf(Value::Complex(mf));
        let y = tape.mimo4(x, params[0], self.len)?;
        let z = tape.fir_decimate(y, &[1.0], w.guard_symbols * w.sps, w.sps, w.n_symbols())?;
        tape.cma(z, self.radius)
    }
}

/// `(angles, fd taps)` entries for every stage.
pub fn pmd_params(model: &PmdModel) -> ParamSet {
    let mut p = ParamSet::new();
    for (i, s) in model.stages.iter().enumerate() {
        p.push(format!("stage{i}.rotation"), ParamGroup::Rotation, vec![3], s.rotation.angles.to_vec())
            .expect("fresh names");
        p.push(format!("stage{i}.fd"), ParamGroup::FdTaps, vec![s.fd.taps.len()], s.fd.taps.clone())
            .expect("fresh names");
    }
    p
}

pub fn pmd_with_params(model: &PmdModel, p: &ParamSet) -> Result<PmdModel> {
    let mut out = model.clone();
    for (i, s) in out.stages.iter_mut().enumerate() {
        let r = p
            .get(&format!("stage{i}.rotation"))
            .ok_or_else(|| Error::Config(format!("missing stage{i}.rotation")))?;
        let f = p
            .get(&format!("stage{i}.fd"))
            .ok_or_else(|| Error::Config(format!("missing stage{i}.fd")))?;
        if r.values.len() != 3 || f.values.len() != s.fd.taps.len() {
            return Err(Error::Config(format!("stage {i} parameters do not match")));
        }
        s.rotation.angles = [r.values[0], r.values[1], r.values[2]];
        s.fd.taps.clone_from(&f.values);
    }
    Ok(out)
}

pub fn mimo_params(w: &MimoFirBaseline) -> ParamSet {
    let mut p = ParamSet::new();
    p.push("mimo", ParamGroup::MimoTaps, vec![4, 4, w.len], w.taps.clone())
        .expect("fresh names");
    p
}

fn concat(frames: Vec<(SymbolFrame, SymbolFrame)>) -> (SymbolFrame, SymbolFrame) {
    let n_pols = frames[0].0.n_pols();
    let mut rx = vec![vec![]; n_pols];
    let mut tx = vec![vec![]; n_pols];
    for (r, t) in frames {
        for p in 0..n_pols {
            rx[p].extend(r.symbols[p].iter().copied());
            tx[p].extend(t.symbols[p].iter().copied());
        }
    }
    (SymbolFrame::received(rx), SymbolFrame::received(tx))
}

/// Effective SNR over all frames of a receiver mapping a window to its
/// interior symbols.
pub fn evaluate<F>(frames: &[Frame], guard: usize, receiver: F) -> Result<f64>
where
    F: Fn(&Window) -> Result<SymbolFrame> + Sync,
{
    if frames.is_empty() {
        return arg("no evaluation frames");
    }
    let pairs = frames
        .par_iter()
        .map(|f| {
            let w = full_window(f, guard);
            let rx = receiver(&w)?;
            Ok((rx, SymbolFrame::received(w.target.clone())))
        })
        .collect::<Result<Vec<_>>>()?;
    let (rx, tx) = concat(pairs);
    signal::effective_snr(&rx, &tx)
}

/// Like [`evaluate`] but also accepts the two polarizations swapped, as a
/// blind equalizer may converge to either assignment.
pub fn evaluate_any_pol_order<F>(frames: &[Frame], guard: usize, receiver: F) -> Result<f64>
where
    F: Fn(&Window) -> Result<SymbolFrame> + Sync,
{
    let pairs = frames
        .par_iter()
        .map(|f| {
            let w = full_window(f, guard);
            let rx = receiver(&w)?;
            Ok((rx, SymbolFrame::received(w.target.clone())))
        })
        .collect::<Result<Vec<_>>>()?;
    let (rx, tx) = concat(pairs);
    let direct = signal::effective_snr(&rx, &tx)?;
    if rx.n_pols() != 2 {
        return Ok(direct);
    }
    let swapped = SymbolFrame::received(vec![rx.symbols[1].clone(), rx.symbols[0].clone()]);
    Ok(direct.max(signal::effective_snr(&swapped, &tx)?))
}

pub fn eval_dbp(model: &DbpModel, frames: &[Frame], taps: &[f64], guard: usize) -> Result<f64> {
    evaluate(frames, guard, |w| {
        let y = dbp::dbp_forward(&w.signal()?, model)?;
        Ok(symbols_of(&y.into_pols(), taps, w))
    })
}

/// Frequency-domain-exact DBP (or linear compensation with `xi = 0`) on whole
/// cyclic frames.
pub fn eval_fd_dbp(
    fiber: &FiberParams,
    frames: &[Frame],
    taps: &[f64],
    steps_per_span: usize,
    xi: f64,
) -> Result<f64> {
    let pairs = frames
        .par_iter()
        .map(|f| {
            let y = dbp::fd_dbp(&f.rx, fiber, steps_per_span, xi)?;
            let rx = signal::matched_filter_periodic(&y, taps);
            let tx = SymbolFrame::received(
                f.tx.symbols.iter().map(|p| p.iter().map(|s| s * f.gain).collect()).collect(),
            );
            Ok((rx, tx))
        })
        .collect::<Result<Vec<_>>>()?;
    let (rx, tx) = concat(pairs);
    signal::effective_snr(&rx, &tx)
}

pub fn eval_subband(
    model: &SubbandDbpModel,
    bank: &FilterBankConfig,
    frames: &[Frame],
    taps: &[f64],
    guard: usize,
) -> Result<f64> {
    evaluate(frames, guard, |w| {
        let frame = subband::split(&w.signal()?, bank)?;
        let out = subband::subband_dbp_forward(&frame, model)?;
        let y = subband::merge(&out, bank)?;
        Ok(symbols_of(&y.into_pols(), taps, w))
    })
}

pub fn eval_pmd(model: &PmdModel, frames: &[Frame], taps: &[f64], guard: usize) -> Result<f64> {
    evaluate(frames, guard, |w| {
        let y = pmd::pmd_comp_forward(&w.signal()?, model)?;
        Ok(symbols_of(&y.into_pols(), taps, w))
    })
}

pub fn eval_mimo(w: &MimoFirBaseline, frames: &[Frame], taps: &[f64], guard: usize) -> Result<f64> {
    evaluate_any_pol_order(frames, guard, |win| {
        let sig = win.signal()?;
        let mf = sig.map_pols(|p| kernels::conv_same_real_taps(p, taps));
        let y = pmd::mimo_fir_apply(&mf, w)?;
        Ok(SymbolFrame::received(
            y.pols()
                .map(|p| {
                    (0..win.n_symbols())
                        .map(|m| p[(win.guard_symbols + m) * win.sps])
                        .collect()
                })
                .collect(),
        ))
    })
}

/// Guard (symbols) covering a receiver of `receiver_guard_samples` plus the
/// matched filter, rounded up with a small margin.
pub fn guard_symbols(receiver_guard_samples: usize, sps: usize, rrc_span: usize) -> usize {
    receiver_guard_samples.div_ceil(sps) + rrc_span / 2 + 2
}

pub fn zero_signal(n: usize) -> Vec<Complex64> {
    vec![ZERO; n]
}
