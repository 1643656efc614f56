//! Multi-step digital backpropagation with short folded FIR filters and
//! learnable nonlinear phase scalings, and its complexity accountant.

use crate::autodiff::{NodeId, Tape, TapLayout, Value};
use crate::channel::{cd_response, Direction, FiberParams};
use crate::error::{arg, config, Error, Result};
use crate::fft;
use crate::kernels;
use crate::signal::ComplexSignal;
use crate::training::{step, GradRecord, OptimizerKind, OptimizerState, ParamGroup, ParamSet};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

/// Symmetric FIR stored as its first `⌈K/2⌉` taps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldedFir {
    half: Vec<Complex64>,
}

impl FoldedFir {
    pub fn from_half(half: Vec<Complex64>) -> Result<Self> {
        if half.is_empty() {
            return arg("a filter needs at least one tap");
        }
        Ok(Self { half })
    }

    /// Folds an exactly symmetric odd-length tap sequence.
    pub fn fold(taps: &[Complex64]) -> Result<Self> {
        let k = taps.len();
        if k % 2 == 0 {
            return arg(format!("folded filters need an odd length, got {k}"));
        }
        if (0..k).any(|i| taps[i] != taps[k - 1 - i]) {
            return arg("taps are not symmetric");
        }
        Self::from_half(taps[..k.div_ceil(2)].to_vec())
    }

    pub fn expand(&self) -> Vec<Complex64> {
        kernels::expand_half(&self.half)
    }

    pub fn half(&self) -> &[Complex64] {
        &self.half
    }

    pub fn full_len(&self) -> usize {
        2 * self.half.len() - 1
    }
}

/// "Same"-aligned folded convolution of every polarization.
pub fn fir_apply(sig: &ComplexSignal, f: &FoldedFir) -> ComplexSignal {
    sig.map_pols(|p| kernels::conv_folded(p, &f.half))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DbpStep {
    pub filter: FoldedFir,
    /// Effective γ·L_eff of the step in rad/W.
    pub nl_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub sample_rate: f64,
    pub samples_per_symbol: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DbpModel {
    pub steps: Vec<DbpStep>,
    pub meta: ModelMeta,
}

impl DbpModel {
    pub fn new(steps: Vec<DbpStep>, meta: ModelMeta) -> Result<Self> {
        if steps.is_empty() {
            return arg("a DBP model needs at least one step");
        }
        Ok(Self { steps, meta })
    }

    pub fn tap_counts(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.filter.full_len()).collect()
    }

    /// Samples at each end affected by the zero-padded filter edges.
    pub fn guard(&self) -> usize {
        self.steps.iter().map(|s| s.filter.half.len() - 1).sum()
    }

    /// Parameters as `step{i}.taps` (interleaved half taps) and `step{i}.nl`.
    pub fn to_params(&self) -> ParamSet {
        let mut p = ParamSet::new();
        for (i, s) in self.steps.iter().enumerate() {
            let h = s.filter.half.len();
            let v = s.filter.half.iter().flat_map(|c| [c.re, c.im]).collect();
            p.push(format!("step{i}.taps"), ParamGroup::CdTaps, vec![h, 2], v)
                .expect("fresh names");
            p.push(format!("step{i}.nl"), ParamGroup::NlScale, vec![1], vec![s.nl_scale])
                .expect("fresh names");
        }
        p
    }

    /// Inverse of [`Self::to_params`] for a parameter set of the same structure.
    pub fn with_params(&self, p: &ParamSet) -> Result<Self> {
        let mut out = self.clone();
        for (i, s) in out.steps.iter_mut().enumerate() {
            let taps = p
                .get(&format!("step{i}.taps"))
                .ok_or_else(|| Error::Config(format!("missing step{i}.taps")))?;
            let nl = p
                .get(&format!("step{i}.nl"))
                .ok_or_else(|| Error::Config(format!("missing step{i}.nl")))?;
            if taps.values.len() != 2 * s.filter.half.len() || nl.values.len() != 1 {
                return config(format!("step {i} parameters do not match the model"));
            }
            s.filter.half = taps
                .values
                .chunks_exact(2)
                .map(|c| Complex64::new(c[0], c[1]))
                .collect();
            s.nl_scale = nl.values[0];
        }
        Ok(out)
    }
}

fn kerr_reverse(sig: &mut ComplexSignal, s: f64) {
    if s == 0.0 {
        return;
    }
    let dual = sig.is_dual();
    let n = sig.len();
    for i in 0..n {
        let p = if dual {
            crate::channel::MANAKOV
                * (sig.pol_x[i].norm_sqr() + sig.pol_y.as_ref().unwrap()[i].norm_sqr())
        } else {
            sig.pol_x[i].norm_sqr()
        };
        let rot = Complex64::from_polar(1.0, -s * p);
        for pol in sig.pols_mut() {
            pol[i] *= rot;
        }
    }
}

/// Per step: folded FIR, then `u ← u·exp(−j·nl_scale·P)`.
pub fn dbp_forward(rx: &ComplexSignal, model: &DbpModel) -> Result<ComplexSignal> {
    if (rx.grid.sample_rate() - model.meta.sample_rate).abs() > 1e-9 * model.meta.sample_rate {
        return config(format!(
            "signal sampled at {} Hz, model built for {} Hz",
            rx.grid.sample_rate(),
            model.meta.sample_rate
        ));
    }
    let mut u = rx.clone();
    for s in &model.steps {
        u = fir_apply(&u, &s.filter);
        kerr_reverse(&mut u, s.nl_scale);
    }
    Ok(u)
}

/// Records the model on a tape; `params` alternates `[taps, nl]` per step in
/// the [`DbpModel::to_params`] layout.
pub fn dbp_tape(tape: &mut Tape, x: NodeId, params: &[NodeId]) -> Result<NodeId> {
    if params.len() % 2 != 0 {
        return Err(Error::Contract("DBP parameters come in (taps, nl) pairs".into()));
    }
    let mut u = x;
    for p in params.chunks_exact(2) {
        let f = tape.fir(u, p[0], TapLayout::Folded)?;
        u = tape.kerr(f, p[1])?;
    }
    Ok(u)
}

/// Least-squares fit of a symmetric `k`-tap filter to `response(ω)` over
/// `|ω| ≤ band·π` (ω in rad/sample). A full band gives the truncated inverse DFT.
pub fn ls_symmetric_fit<F>(k: usize, band: f64, response: F) -> Result<FoldedFir>
where
    F: Fn(f64) -> Complex64,
{
    if k % 2 == 0 || k == 0 {
        return arg(format!("filter length must be odd, got {k}"));
    }
    if !(band > 0.0 && band <= 1.0) {
        return arg("fit band must lie in (0, 1]");
    }
    let h = k.div_ceil(2);
    let c = h - 1;
    // H(ω) = h_c + Σ_{d≥1} h_{c−d}·2cos(dω)
    let n_pts = 64 * k + 256;
    let omegas: Vec<f64> = (0..n_pts)
        .map(|i| band * std::f64::consts::PI * (-1.0 + (2.0 * i as f64 + 1.0) / n_pts as f64))
        .collect();
    let a = DMatrix::from_fn(n_pts, h, |r, col| {
        let d = (c - col) as f64;
        if col == c {
            1.0
        } else {
            2.0 * (d * omegas[r]).cos()
        }
    });
    let target: Vec<Complex64> = omegas.iter().map(|w| response(*w)).collect();
    let svd = a.svd(true, true);
    let solve = |b: DVector<f64>| -> Result<DVector<f64>> {
        svd.solve(&b, 1e-10)
            .map_err(|e| Error::Contract(format!("least-squares fit failed: {e}")))
    };
    let re = solve(DVector::from_iterator(n_pts, target.iter().map(|t| t.re)))?;
    let im = solve(DVector::from_iterator(n_pts, target.iter().map(|t| t.im)))?;
    FoldedFir::from_half((0..h).map(|i| Complex64::new(re[i], im[i])).collect())
}

/// Baseline model: steps of equal length `z = L·n_spans/n_steps`, each filter
/// a least-squares fit of the inverse dispersion `exp(+j(β₂/2)ω²z)` over the
/// fraction `band` of the receiver band; `nl_scale` is γ times the
/// power-weighted effective length of the link segment the step undoes.
pub fn init_model(
    fiber: &FiberParams,
    n_steps: usize,
    taps_per_step: &[usize],
    grid_sample_rate: f64,
    samples_per_symbol: usize,
    band: f64,
) -> Result<DbpModel> {
    fiber.validate()?;
    if n_steps == 0 || taps_per_step.len() != n_steps {
        return arg("need one tap count per step");
    }
    let z = fiber.total_length() / n_steps as f64;
    let dt_ps = 1e12 / grid_sample_rate;
    let steps = taps_per_step
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let nl = fiber.gamma * fiber.backward_step_l_eff(n_steps, i);
            let filter = ls_symmetric_fit(k, band, |w| {
                cd_response(fiber.beta2, z, w / dt_ps, Direction::Backward)
            })?;
            Ok(DbpStep { filter, nl_scale: nl })
        })
        .collect::<Result<Vec<_>>>()?;
    DbpModel::new(
        steps,
        ModelMeta {
            sample_rate: grid_sample_rate,
            samples_per_symbol,
            seed: 0,
        },
    )
}

/// Linear pre-fit of the filter cascade on a noiseless probe: for every `k`
/// the probe after the first `k` filters should equal the probe with the
/// inverse dispersion of `k` steps applied exactly. Nonlinear scalings are
/// left untouched. Each probe channel should be an isolated pulse well inside
/// its frame so that the cyclic targets do not wrap; a weak wideband channel
/// keeps the out-of-band gain in check.
pub fn fit_cascade(
    model: &DbpModel,
    fiber: &FiberParams,
    probe: &[Vec<Complex64>],
    iterations: usize,
    step_size: f64,
) -> Result<DbpModel> {
    fiber.validate()?;
    if probe.is_empty() || probe.iter().any(|c| c.is_empty()) {
        return arg("empty probe");
    }
    let z = fiber.total_length() / model.steps.len() as f64;
    let targets: Vec<Vec<Vec<Complex64>>> = (1..=model.steps.len())
        .map(|k| {
            probe
                .iter()
                .map(|ch| {
                    fft::filter_freq(ch, |b| {
                        let w = fft::bin_omega_rad_per_ps(b, ch.len(), model.meta.sample_rate);
                        cd_response(fiber.beta2, k as f64 * z, w, Direction::Backward)
                    })
                })
                .collect()
        })
        .collect();
    let mut taps = ParamSet::new();
    for (i, s) in model.steps.iter().enumerate() {
        let v = s.filter.half.iter().flat_map(|c| [c.re, c.im]).collect();
        taps.push(format!("step{i}.taps"), ParamGroup::CdTaps, vec![s.filter.half.len(), 2], v)?;
    }
    let mut state = OptimizerState::default();
    for it in 0..iterations {
        let mut tape = Tape::new();
        let leaves = taps.leaves(&mut tape);
        let mut u = tape.leaf(Value::Complex(probe.to_vec()));
        let mut loss = None;
        for (leaf, t) in leaves.iter().zip(&targets) {
            u = tape.fir(u, *leaf, TapLayout::Folded)?;
            let l = tape.mse(u, t.clone())?;
            loss = Some(match loss {
                None => l,
                Some(acc) => tape.add(acc, l)?,
            });
        }
        let loss = loss.ok_or_else(|| Error::Contract("model has no steps".into()))?;
        let g = GradRecord::from_tape(&tape.backward(loss)?, &leaves, &taps);
        // halve the step size over the last two thirds
        let alpha = step_size * 0.5f64.powi((3 * it / iterations.max(1)) as i32);
        step(&mut taps, &g, OptimizerKind::Adam, alpha, &mut state)?;
    }
    let mut p = model.to_params();
    for (i, e) in taps.entries().iter().enumerate() {
        let idx = p.index_of(&format!("step{i}.taps")).expect("same layout");
        p.entries_mut()[idx].values.clone_from(&e.values);
    }
    model.with_params(&p)
}

/// Alternating `[a, b, a, …]` tap counts.
pub fn alternating_taps(n_steps: usize, a: usize, b: usize) -> Vec<usize> {
    (0..n_steps).map(|i| if i % 2 == 0 { a } else { b }).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MultiplierRule {
    /// Four real multiplications per complex multiplication.
    #[default]
    FourMult,
    /// Three real multiplications per complex multiplication.
    ThreeMult,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComplexityRule {
    pub multiplier: MultiplierRule,
    /// Real multiplications of one nonlinear stage.
    pub nonlinear_cost: usize,
}

impl Default for ComplexityRule {
    fn default() -> Self {
        Self {
            multiplier: MultiplierRule::FourMult,
            nonlinear_cost: 6,
        }
    }
}

impl ComplexityRule {
    pub fn header(&self) -> String {
        let m = match self.multiplier {
            MultiplierRule::FourMult => 4,
            MultiplierRule::ThreeMult => 3,
        };
        format!(
            "real multiplications per complex output sample: {m} per folded tap pair (ceil(K/2) per K-tap filter), {} per nonlinear stage",
            self.nonlinear_cost
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepCost {
    pub taps: usize,
    pub real_mults: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub rule: String,
    pub real_mults_per_sample: usize,
    pub total_taps: usize,
    pub per_step: Vec<StepCost>,
}

/// Complexity of a model with the given per-step tap counts.
pub fn complexity_for_taps(taps: &[usize], rule: &ComplexityRule) -> ComplexityReport {
    let per_mult = match rule.multiplier {
        MultiplierRule::FourMult => 4,
        MultiplierRule::ThreeMult => 3,
    };
    let per_step: Vec<StepCost> = taps
        .iter()
        .map(|&k| StepCost {
            taps: k,
            real_mults: per_mult * k.div_ceil(2) + rule.nonlinear_cost,
        })
        .collect();
    ComplexityReport {
        rule: rule.header(),
        real_mults_per_sample: per_step.iter().map(|s| s.real_mults).sum(),
        total_taps: taps.iter().sum(),
        per_step,
    }
}

pub fn complexity_report(model: &DbpModel, rule: &ComplexityRule) -> ComplexityReport {
    complexity_for_taps(&model.tap_counts(), rule)
}

/// Frequency-domain-exact DBP on a cyclic frame: per step the inverse
/// dispersion of `z = L_span/steps_per_span` applied with the DFT, then the
/// reverse Kerr rotation with `xi·γ` times the power-weighted effective
/// length of the step.
pub fn fd_dbp(rx: &ComplexSignal, fiber: &FiberParams, steps_per_span: usize, xi: f64) -> Result<ComplexSignal> {
    fiber.validate()?;
    if steps_per_span < 1 {
        return arg("steps per span must be >= 1");
    }
    let z = fiber.span_length / steps_per_span as f64;
    let omegas = rx.grid.omega_bins();
    let h: Vec<Complex64> = omegas
        .iter()
        .map(|&w| cd_response(fiber.beta2, z, w, Direction::Backward))
        .collect();
    let n = fiber.n_spans * steps_per_span;
    let mut u = rx.clone();
    for i in 0..n {
        u = u.map_pols(|p| fft::filter_freq(p, |k| h[k]));
        kerr_reverse(&mut u, xi * fiber.gamma * fiber.backward_step_l_eff(n, i));
    }
    Ok(u)
}

/// Records the values of a model on a fresh tape layout, in `dbp_tape` order.
pub fn model_values(model: &DbpModel) -> Vec<Value> {
    model
        .to_params()
        .entries()
        .iter()
        .map(|e| Value::vector(e.values.clone()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::SamplingGrid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn random_signal(n: usize, seed: u64) -> ComplexSignal {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = (0..n).map(|_| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
        ComplexSignal::single(SamplingGrid::new(20e9, n, 2).unwrap(), v).unwrap()
    }

    #[test]
    fn fold_examples() {
        let (a, b, cc) = (c(1.0, 2.0), c(-0.5, 0.25), c(3.0, 0.0));
        let f = FoldedFir::fold(&[a, b, cc, b, a]).unwrap();
        assert_eq!(f.half(), &[a, b, cc]);
        assert_eq!(f.full_len(), 5);
        assert_eq!(FoldedFir::fold(&[cc]).unwrap().half(), &[cc]);
        assert!(FoldedFir::fold(&[a, b]).is_err());
        assert!(FoldedFir::fold(&[a, b, b]).is_err());
    }

    #[test]
    fn fold_round_trip_on_truncated_inverse() {
        let fiber = FiberParams::default();
        let f = ls_symmetric_fit(7, 1.0, |w| cd_response(fiber.beta2, 80.0, w / 50.0, Direction::Backward)).unwrap();
        let full = f.expand();
        assert_eq!(FoldedFir::fold(&full).unwrap(), f);
        for k in 0..7 {
            assert_eq!(full[k], full[6 - k]);
        }
    }

    #[test]
    fn fir_apply_examples() {
        let s = random_signal(64, 1);
        assert_eq!(fir_apply(&s, &FoldedFir::from_half(vec![c(1.0, 0.0)]).unwrap()), s);
        let (a, b) = (c(0.5, -1.0), c(2.0, 0.5));
        let mut imp = vec![c(0.0, 0.0); 9];
        imp[4] = c(1.0, 0.0);
        let s1 = ComplexSignal::single(SamplingGrid::new(1e9, 9, 1).unwrap(), imp).unwrap();
        let y = fir_apply(&s1, &FoldedFir::from_half(vec![a, b]).unwrap());
        assert_eq!(&y.pol_x[3..6], &[a, b, a]);
        let f = FoldedFir::from_half(vec![c(0.1, 0.2), c(-0.3, 0.4), c(1.0, -0.1)]).unwrap();
        let y = fir_apply(&s, &f);
        let oracle = kernels::conv_same(&s.pol_x, &f.expand());
        for (u, v) in y.pol_x.iter().zip(&oracle) {
            assert!((u - v).norm() < 1e-15);
        }
    }

    #[test]
    fn dbp_identity_and_rate_check() {
        let s = random_signal(32, 2);
        let step = DbpStep {
            filter: FoldedFir::from_half(vec![c(1.0, 0.0)]).unwrap(),
            nl_scale: 0.0,
        };
        let meta = ModelMeta {
            sample_rate: 20e9,
            samples_per_symbol: 2,
            seed: 0,
        };
        let m = DbpModel::new(vec![step.clone(), step], meta.clone()).unwrap();
        assert_eq!(dbp_forward(&s, &m).unwrap(), s);
        let wrong = DbpModel {
            meta: ModelMeta {
                sample_rate: 10e9,
                ..meta
            },
            ..m
        };
        assert!(matches!(dbp_forward(&s, &wrong), Err(Error::Config(_))));
    }

    #[test]
    fn init_model_examples() {
        let fiber = FiberParams {
            n_spans: 1,
            ..FiberParams::default()
        };
        let m = init_model(&fiber, 1, &[1], 20e9, 2, 1.0).unwrap();
        assert_eq!(m.steps.len(), 1);
        assert!(m.steps[0].filter.half()[0].norm() <= 1.0);
        assert!((m.steps[0].nl_scale - 1.3 * fiber.l_eff(80.0)).abs() < 1e-12);

        let full = FiberParams::default();
        let m = init_model(&full, 25, &alternating_taps(25, 5, 3), 20e9, 2, 0.55).unwrap();
        assert_eq!(m.tap_counts().iter().sum::<usize>(), 101);
        assert!(init_model(&full, 25, &[70; 25], 20e9, 2, 1.0).is_err());
    }

    #[test]
    fn complexity_examples() {
        let rule = ComplexityRule::default();
        let r = complexity_for_taps(&[70; 25], &rule);
        assert_eq!(r.total_taps, 1750);
        assert_eq!(r.real_mults_per_sample, 3650);
        let r = complexity_for_taps(&alternating_taps(25, 5, 3), &rule);
        assert_eq!(r.total_taps, 101);
        assert_eq!(r.real_mults_per_sample, 402);
        assert_eq!(complexity_for_taps(&[1], &rule).real_mults_per_sample, 10);
    }

    #[test]
    fn linear_dbp_is_cascaded_convolution() {
        let s = random_signal(80, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut steps = vec![];
        let mut cascade = vec![c(1.0, 0.0)];
        for k in [2usize, 3, 1, 2] {
            let half: Vec<Complex64> = (0..k).map(|_| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
            let f = FoldedFir::from_half(half).unwrap();
            cascade = full_conv(&cascade, &f.expand());
            steps.push(DbpStep { filter: f, nl_scale: 0.0 });
        }
        let meta = ModelMeta {
            sample_rate: 20e9,
            samples_per_symbol: 2,
            seed: 0,
        };
        let m = DbpModel::new(steps, meta).unwrap();
        let y = dbp_forward(&s, &m).unwrap();
        let oracle = kernels::conv_same(&s.pol_x, &cascade);
        let g = m.guard();
        let scale = oracle.iter().map(|v| v.norm()).fold(0.0, f64::max);
        for t in g..80 - g {
            assert!((y.pol_x[t] - oracle[t]).norm() <= 1e-12 * scale);
        }
    }

    fn full_conv(a: &[Complex64], b: &[Complex64]) -> Vec<Complex64> {
        let mut out = vec![c(0.0, 0.0); a.len() + b.len() - 1];
        for (i, x) in a.iter().enumerate() {
            for (j, y) in b.iter().enumerate() {
                out[i + j] += x * y;
            }
        }
        out
    }
}
