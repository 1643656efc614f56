//! Acceptance suite: one PASS/FAIL line per criterion with the measured
//! numbers. Select criteria with `LDBP_ACCEPTANCE=1,3,7`; set
//! `LDBP_ACCEPTANCE_STRICT=1` to turn any FAIL into a nonzero exit.

use std::fs;
use std::path::Path;
use std::time::Instant;

use ldbp::channel::{self, AmplifierConfig, Direction, FiberParams, Jones};
use ldbp::dbp::{self, ComplexityRule, DbpModel, DbpStep, FoldedFir, ModelMeta};
use ldbp::experiment::*;
use ldbp::gradcheck::{self, cvec, rng, C};
use ldbp::pmd::{self, MimoFirBaseline, PmdModel, StageOrder};
use ldbp::signal::{self, ComplexSignal, SamplingGrid};
use ldbp::subband::{self, FilterBankConfig, MimoIntensityTensor, SubbandFrame, TensorCascade};
use ldbp::training::*;
use ldbp_cli::commands::{self, TrainOptions, TrainOutcome};
use ldbp_cli::config::Config;
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn rel_err(a: &[C], b: &[C]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum();
    let den: f64 = b.iter().map(|y| y.norm_sqr()).sum();
    (num / den.max(1e-300)).sqrt()
}

fn brute_conv(x: &[C], h: &[C]) -> Vec<C> {
    let c = (h.len() / 2) as isize;
    (0..x.len() as isize)
        .map(|n| {
            h.iter()
                .enumerate()
                .filter_map(|(k, hk)| {
                    let i = n + c - k as isize;
                    (i >= 0 && (i as usize) < x.len()).then(|| hk * x[i as usize])
                })
                .sum()
        })
        .collect()
}

fn c1_gradients() -> Outcome {
    let results = gradcheck::run_all();
    let worst = results.iter().fold(("", 0.0f64), |w, s| if s.worst > w.1 { (s.name, s.worst) } else { w });
    let mut ops = results.len();
    // the straight-through check of fake quantization lives in the gradient tests
    let fq = fake_quant_ste();
    ops += 1;
    Outcome {
        pass: worst.1 < gradcheck::TOL && fq < gradcheck::TOL,
        detail: format!(
            "{ops} suites x {} instances, worst {:.2e} ({}), fake-quant surrogate {:.2e}, bound {:.0e}",
            gradcheck::INSTANCES,
            worst.1.max(fq),
            if fq > worst.1 { "fake quant" } else { worst.0 },
            fq,
            gradcheck::TOL
        ),
    }
}

/// Gradient through a fake-quantized filter against the float surrogate at
/// the quantized point (inside the clipping range), itself checked against
/// finite differences.
fn fake_quant_ste() -> f64 {
    use ldbp::autodiff::{Tape, TapLayout, Value};
    let mut worst: f64 = 0.0;
    for i in 0..gradcheck::INSTANCES {
        let r = &mut rng(21, i);
        let x = vec![cvec(r, 8, 1.0)];
        let t = vec![cvec(r, 8, 1.0)];
        let bits = r.gen_range(3..=8);
        let cfg = FakeQuantConfig::new(bits).unwrap();
        let taps: Vec<f64> = (0..6).map(|_| r.gen_range(-1.0..1.0)).collect();
        let scale = max_abs_scale(&taps);
        let q: Vec<f64> = taps.iter().map(|v| fake_quantize_value(*v, bits, scale).unwrap()).collect();
        let mut tp = Tape::new();
        let xi = tp.leaf(Value::Complex(x.clone()));
        let wi = tp.leaf(Value::vector(taps.clone()));
        let qi = tp.fake_quant(wi, &cfg, vec![scale], taps.len()).unwrap();
        let y = tp.fir(xi, qi, TapLayout::Folded).unwrap();
        let l = tp.mse(y, t.clone()).unwrap();
        let ste = tp.backward(l).unwrap().vector(wi, taps.len());
        let surrogate = |tp: &mut Tape, id: &[_]| {
            let y = tp.fir(id[0], id[1], TapLayout::Folded)?;
            tp.mse(y, t.clone())
        };
        let inputs = [Value::Complex(x), Value::vector(q)];
        let (_, analytic) = gradcheck::evaluate(&inputs, &surrogate).unwrap();
        let sg = &analytic[16..];
        let num: f64 = ste.iter().zip(sg).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let den: f64 = sg.iter().map(|b| b * b).sum::<f64>().sqrt();
        worst = worst.max(num / den).max(gradcheck::gradient_error(&inputs, surrogate));
    }
    worst
}

/// Criterion-2 setup shared with the quantization criterion.
struct ShortFilter {
    rx_taps: Vec<f64>,
    init: DbpModel,
    guard: usize,
    train: WindowSource,
    val: Vec<Frame>,
    learned: ParamSet,
    learned_snr: f64,
}

const C2_POWER_DBM: f64 = 0.0;
const C2_ITERATIONS: usize = 50_000;
const C2_STEP_SIZE: f64 = 0.01;

fn pulse_probe(taps: &[f64]) -> Vec<Vec<C>> {
    let mut pulse = vec![C::new(0.0, 0.0); 512];
    for (i, t) in taps.iter().enumerate() {
        pulse[256 - taps.len() / 2 + i] = C::new(*t, 0.0);
    }
    let mut wide = vec![C::new(0.0, 0.0); 512];
    wide[256] = C::new(0.1, 0.0);
    vec![pulse, wide]
}

fn c2_short_filters() -> (Outcome, ShortFilter) {
    let scn = Scenario::default();
    let rx_taps = scn.rx_taps().unwrap();
    let lens = dbp::alternating_taps(25, 5, 3);
    let val = generate_frames(&scn, C2_POWER_DBM, 2, 2).unwrap();
    let linear_scn = Scenario {
        fiber: FiberParams { gamma: 0.0, ..scn.fiber },
        ..scn.clone()
    };
    let val_linear = generate_frames(&linear_scn, C2_POWER_DBM, 2, 2).unwrap();
    let lin_ref = eval_fd_dbp(&scn.fiber, &val_linear, &rx_taps, 1, 0.0).unwrap();
    let lin = eval_fd_dbp(&scn.fiber, &val, &rx_taps, 1, 0.0).unwrap();
    let fd = eval_fd_dbp(&scn.fiber, &val, &rx_taps, 1, 1.0).unwrap();

    let truncated = dbp::init_model(&scn.fiber, 25, &lens, scn.rx_rate(), scn.rx_sps, 1.0).unwrap();
    let guard = guard_symbols(truncated.guard(), scn.rx_sps, scn.rrc_span);
    // the stronger of the full-band and signal-band least-squares fits
    let band = (1.0 + scn.rolloff) / scn.rx_sps as f64;
    let banded = dbp::init_model(&scn.fiber, 25, &lens, scn.rx_rate(), scn.rx_sps, band).unwrap();
    let baseline = eval_dbp(&truncated, &val, &rx_taps, guard)
        .unwrap()
        .max(eval_dbp(&banded, &val, &rx_taps, guard).unwrap());

    let init = dbp::fit_cascade(&truncated, &scn.fiber, &pulse_probe(&rx_taps), 3000, 0.01).unwrap();
    let train_src = WindowSource {
        frames: generate_frames(&scn, C2_POWER_DBM, 1, 4).unwrap(),
        window_symbols: 128,
        guard_symbols: guard,
        seed: 3,
    };
    let cfg = TrainConfig {
        opt: OptimizerConfig {
            step_size: C2_STEP_SIZE,
            batch_size: 8,
            max_iterations: C2_ITERATIONS,
            ..OptimizerConfig::default()
        },
        ..TrainConfig::default()
    };
    let obj = DbpObjective { rx_taps: rx_taps.clone() };
    let st = train(&obj, &train_src, init.to_params(), &cfg).unwrap();
    let learned = st.params;
    let learned_snr = eval_dbp(&init.with_params(&learned).unwrap(), &val, &rx_taps, guard).unwrap();

    let penalty = lin_ref - lin;
    let (a, b) = (learned_snr - baseline, fd - learned_snr);
    let out = Outcome {
        pass: penalty >= 4.0 && a >= 3.0 && b <= 1.0,
        detail: format!(
            "{C2_POWER_DBM} dBm, linear penalty {penalty:.2} dB; learned 5/3 {learned_snr:.2} dB after {C2_ITERATIONS} it, \
             truncated {baseline:.2} dB (gain {a:.2} >= 3), FD-DBP 1 StPS {fd:.2} dB (gap {b:.2} <= 1)"
        ),
    };
    let sf = ShortFilter {
        rx_taps,
        init,
        guard,
        train: train_src,
        val,
        learned,
        learned_snr,
    };
    (out, sf)
}

fn c3_complexity() -> Outcome {
    let rule = ComplexityRule::default();
    let long = dbp::complexity_for_taps(&[70; 25], &rule);
    let short = dbp::complexity_for_taps(&dbp::alternating_taps(25, 5, 3), &rule);
    let ratio = long.real_mults_per_sample as f64 / short.real_mults_per_sample as f64;
    Outcome {
        pass: ratio >= 9.0 && long.total_taps == 1750 && short.total_taps == 101,
        detail: format!(
            "{} / {} real mults per sample = {ratio:.2} >= 9; total taps {} vs {}",
            long.real_mults_per_sample, short.real_mults_per_sample, long.total_taps, short.total_taps
        ),
    }
}

const C4_POWER_DBM: f64 = 0.0;
const C4_TAPS: usize = 5;
const C4_DENSE_LEN: usize = 7;
const C4_CASCADE: [usize; 3] = [3, 3, 3];
const C4_ITERATIONS: usize = 5000;
const C4_L1: f64 = 1e-7;
const C4_THRESHOLD: f64 = 0.05;

fn c4_subband() -> Outcome {
    let scn = Scenario::default();
    let rx_taps = scn.rx_taps().unwrap();
    let bank = FilterBankConfig::new(3);
    let build = |cascade: Option<&[usize]>| {
        subband::init_subband_model(&scn.fiber, &bank, scn.rx_rate(), 25, C4_TAPS, C4_DENSE_LEN, cascade).unwrap()
    };
    let dense0 = build(None);
    let sparse0 = build(Some(&C4_CASCADE));
    let g = guard_symbols((dense0.guard().max(sparse0.guard()) * 3).div_ceil(2), scn.rx_sps, scn.rrc_span) + 4;
    let val = generate_frames(&scn, C4_POWER_DBM, 2, 2).unwrap();
    let src = WindowSource {
        frames: generate_frames(&scn, C4_POWER_DBM, 1, 4).unwrap(),
        window_symbols: 128,
        guard_symbols: g,
        seed: 3,
    };
    let run = |m0: &subband::SubbandDbpModel, reg: RegularizerConfig| {
        let obj = SubbandObjective {
            model: m0.clone(),
            bank,
            rx_taps: rx_taps.clone(),
        };
        let cfg = TrainConfig {
            opt: OptimizerConfig {
                step_size: 3e-3,
                batch_size: 8,
                max_iterations: C4_ITERATIONS,
                ..OptimizerConfig::default()
            },
            reg,
            ..TrainConfig::default()
        };
        let st = train(&obj, &src, m0.to_params(), &cfg).unwrap();
        let m = m0.with_params(&st.params).unwrap();
        let snr = eval_subband(&m, &bank, &val, &rx_taps, g).unwrap();
        (m, snr)
    };
    let (_, dense) = run(&dense0, RegularizerConfig::default());
    let (sparse, sparse_snr) = run(
        &sparse0,
        RegularizerConfig {
            l1_weight: C4_L1,
            prune_threshold: C4_THRESHOLD,
        },
    );
    let sp = sparse.sparsity();

    // merge∘split on a band-limited frame
    let n = 2048;
    let r = &mut rng(40, 0);
    let spec: Vec<C> = (0..n)
        .map(|k| {
            let f = if k <= n / 2 { k as f64 } else { k as f64 - n as f64 } / n as f64;
            if f.abs() < 0.4 {
                C::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0))
            } else {
                C::new(0.0, 0.0)
            }
        })
        .collect();
    let x = ldbp::fft::ifft(&spec);
    let sig = ComplexSignal::single(SamplingGrid::new(20e9, n, 1).unwrap(), x.clone()).unwrap();
    let y = subband::merge(&subband::split(&sig, &bank).unwrap(), &bank).unwrap();
    let recon_db = 20.0 * rel_err(&y.pol_x, &x).log10();

    // one-stage cascade against its dense tensor
    let t = MimoIntensityTensor::new(3, 5, (0..45).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
    let frame = SubbandFrame {
        subbands: (0..3).map(|_| cvec(r, 64, 1.0)).collect(),
        centers_hz: vec![0.0; 3],
        sample_rate: 1.0,
        orig_len: 64,
        full_len: 64,
        full_rate: 1.0,
    };
    let one = subband::cascade_phase(&frame, &TensorCascade::new(vec![t.clone()]).unwrap()).unwrap();
    let direct = subband::coupled_phase(&frame, &t).unwrap();
    let single_err = one
        .iter()
        .flatten()
        .zip(direct.iter().flatten())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs() / (1.0 + b.abs())));

    let penalty = dense - sparse_snr;
    Outcome {
        pass: sp.fraction >= 0.8 && penalty <= 0.2 && recon_db < -40.0 && single_err <= 1e-12,
        detail: format!(
            "S=3, cascade {C4_CASCADE:?}: {:.1}% zeros ({}/{}), {sparse_snr:.2} dB vs dense len {C4_DENSE_LEN} {dense:.2} dB \
             (penalty {penalty:.2} <= 0.2); merge(split) {recon_db:.1} dB; one-stage vs dense {single_err:.1e}",
            100.0 * sp.fraction,
            sp.zeros,
            sp.total
        ),
    }
}

fn c5_quantization(sf: &ShortFilter) -> Outcome {
    let groups = [ParamGroup::CdTaps];
    let snr_of = |p: &ParamSet| eval_dbp(&sf.init.with_params(p).unwrap(), &sf.val, &sf.rx_taps, sf.guard).unwrap();
    let float = sf.learned_snr;
    // smallest width such that every wider one stays within 0.5 dB
    let mut naive = 16;
    let mut sweep = vec![];
    for bits in (2..=16).rev() {
        let s = snr_of(&quantize_params(&sf.learned, &groups, bits).unwrap());
        sweep.push(format!("{bits}:{s:.1}"));
        if float - s > 0.5 {
            break;
        }
        naive = bits;
    }
    let target = naive.saturating_sub(2).max(2) as u32;
    let cfg = TrainConfig {
        opt: OptimizerConfig {
            step_size: 3e-4,
            batch_size: 8,
            max_iterations: 10_000,
            seed: 7,
            ..OptimizerConfig::default()
        },
        fq: FakeQuantConfig::new(target).unwrap(),
        quant_groups: groups.to_vec(),
        ..TrainConfig::default()
    };
    let obj = DbpObjective {
        rx_taps: sf.rx_taps.clone(),
    };
    // the quantized model jumps whenever a code flips, so snapshots are
    // selected by their quantized SNR on the training frames
    let on_train = |p: &ParamSet| eval_dbp(&sf.init.with_params(p).unwrap(), &sf.train.frames, &sf.rx_taps, sf.guard).unwrap();
    let mut st = TrainState::new(sf.learned.clone());
    let mut best = (f64::NEG_INFINITY, sf.learned.clone());
    while st.iteration < cfg.opt.max_iterations {
        let next = st.iteration + 250;
        train_until(&obj, &sf.train, &cfg, &mut st, next).unwrap();
        let q = quantize_params(&st.params, &groups, target).unwrap();
        let s = on_train(&q);
        if s > best.0 {
            best = (s, q);
        }
    }
    let fq = snr_of(&best.1);
    let naive_at_target = snr_of(&quantize_params(&sf.learned, &groups, target).unwrap());
    let reduction = naive as i64 - target as i64;
    Outcome {
        pass: reduction >= 2 && float - fq <= 0.5,
        detail: format!(
            "float {float:.2} dB; naive needs {naive} bits [{}]; fake-quant at {target} bits {fq:.2} dB \
             (naive at {target}: {naive_at_target:.2} dB); reduction {reduction} >= 2 bits; naive >= 8 bits: {}",
            sweep.join(" "),
            naive >= 8
        ),
    }
}

const C6_SEED: u64 = 5;
const C6_STAGES: usize = 10;
const C6_FD_LEN: usize = 5;
const C6_ITERATIONS: usize = 3000;
const C6_MIMO_LEN: usize = 9;
const C6_MIMO_ITERATIONS: usize = 3000;

fn c6_pmd() -> Outcome {
    let scn = Scenario {
        dual_pol: true,
        ..Scenario::default()
    };
    let taps = scn.rx_taps().unwrap();
    // mean DGD of half a symbol period, in ps
    let link = channel::draw_pmd_link(C6_SEED, 10, 0.5e12 / scn.symbol_rate).unwrap();
    let frames = |l: Option<&channel::PmdLink>, seed: u64, n: u64| -> Vec<Frame> {
        (0..n).map(|i| generate_pmd_frame(&scn, l, 20.0, seed, i).unwrap()).collect()
    };
    let train_f = frames(Some(&link), 1, 4);
    let val = frames(Some(&link), 2, 2);
    let val_ref = frames(None, 2, 2);
    let id = PmdModel::identity(C6_STAGES, C6_FD_LEN, StageOrder::RotationThenFd).unwrap();
    let g = guard_symbols(id.guard(), scn.rx_sps, scn.rrc_span);
    let reference = eval_pmd(&id, &val_ref, &taps, g).unwrap();
    let unequalized = eval_pmd(&id, &val, &taps, g).unwrap();

    let obj = PmdObjective {
        order: StageOrder::RotationThenFd,
        rx_taps: taps.clone(),
    };
    let src = WindowSource {
        frames: train_f.clone(),
        window_symbols: 128,
        guard_symbols: g,
        seed: 3,
    };
    let cfg = TrainConfig {
        opt: OptimizerConfig {
            step_size: 3e-3,
            batch_size: 8,
            max_iterations: C6_ITERATIONS,
            ..OptimizerConfig::default()
        },
        ..TrainConfig::default()
    };
    let st = train(&obj, &src, pmd_params(&id), &cfg).unwrap();
    let model = pmd_with_params(&id, &st.params).unwrap();
    let multi = eval_pmd(&model, &val, &taps, g).unwrap();

    let gm = guard_symbols(C6_MIMO_LEN, scn.rx_sps, scn.rrc_span);
    let w0 = MimoFirBaseline::identity(C6_MIMO_LEN).unwrap();
    let obj = MimoCmaObjective {
        len: C6_MIMO_LEN,
        // dispersion moment of 16-QAM times the matched-filter gain
        radius: train_f[0].gain.powi(2) * 1.32,
        rx_taps: taps.clone(),
    };
    let src = WindowSource {
        frames: train_f,
        window_symbols: 128,
        guard_symbols: gm,
        seed: 4,
    };
    let cfg = TrainConfig {
        opt: OptimizerConfig {
            step_size: 1e-3,
            batch_size: 8,
            max_iterations: C6_MIMO_ITERATIONS,
            ..OptimizerConfig::default()
        },
        ..TrainConfig::default()
    };
    let st = train(&obj, &src, mimo_params(&w0), &cfg).unwrap();
    let w = MimoFirBaseline::new(C6_MIMO_LEN, st.params.values(0).to_vec()).unwrap();
    let mimo = eval_mimo(&w, &val, &taps, gm).unwrap();

    // Jones unitarity: rotation images, link matrices and energy through the channel
    let r = &mut rng(60, 0);
    let mut jones_err: f64 = 0.0;
    let mut check = |m: Jones| jones_err = jones_err.max(m.unitarity_error()).max((m.det() - C::new(1.0, 0.0)).norm());
    for _ in 0..10_000 {
        check(pmd::rotation_from_angles([r.gen_range(-4.0..4.0), r.gen_range(-4.0..4.0), r.gen_range(-4.0..4.0)]));
    }
    for k in 0..200 {
        check(link.matrix(r.gen_range(-1.0..1.0)));
        check(channel::draw_pmd_link(k, 10, 50.0).unwrap().matrix(r.gen_range(-1.0..1.0)));
    }
    let fiber = FiberParams {
        gamma: 0.0,
        alpha_db: 0.0,
        n_spans: 2,
        ..FiberParams::default()
    };
    let x = ComplexSignal::dual(SamplingGrid::new(80e9, 1024, 8).unwrap(), cvec(r, 1024, 1.0), cvec(r, 1024, 1.0)).unwrap();
    let y = channel::propagate(&x, &fiber, Some(&link), &AmplifierConfig::noiseless(), 4, 0).unwrap();
    let energy_err = (y.energy() / x.energy() - 1.0).abs();

    let (p_multi, p_mimo) = (reference - multi, reference - mimo);
    Outcome {
        pass: p_multi < 0.5 && p_mimo < 1.0 && jones_err < 1e-12 && energy_err < 1e-12,
        detail: format!(
            "no-PMD {reference:.2} dB, unequalized {unequalized:.2} dB; {C6_STAGES}-stage {multi:.2} dB (penalty {p_multi:.2} < 0.5); \
             4x4 MIMO CMA {mimo:.2} dB (penalty {p_mimo:.2} < 1); unitarity {jones_err:.1e}, energy {energy_err:.1e}"
        ),
    }
}

fn c7_oracles() -> Outcome {
    let r = &mut rng(70, 0);
    // linear propagation against one dispersion filter
    let fiber = FiberParams {
        gamma: 0.0,
        alpha_db: 0.0,
        ..FiberParams::default()
    };
    let idx: Vec<usize> = (0..256).map(|_| r.gen_range(0..16)).collect();
    let sym = signal::qam_map(&idx, 16).unwrap();
    let taps = signal::rrc_taps(0.1, 32, 8).unwrap();
    let tx = signal::shape_periodic(&sym, 8, &taps, 10e9).unwrap();
    let out = channel::propagate(&tx, &fiber, None, &AmplifierConfig::noiseless(), 50, 0).unwrap();
    let oracle = channel::cd_operator(&tx, fiber.beta2, fiber.total_length(), Direction::Forward);
    let prop_err = rel_err(&out.pol_x, &oracle.pol_x);

    // nl_scale = 0 DBP against the cascaded convolution
    let n = 128;
    let x = cvec(r, n, 1.0);
    let mut steps = vec![];
    let mut cascade = vec![C::new(1.0, 0.0)];
    for _ in 0..5 {
        let h = 1 + r.gen_range(0..4);
        let half: Vec<C> = cvec(r, h, 1.0);
        let f = FoldedFir::from_half(half).unwrap();
        let full = f.expand();
        let mut next = vec![C::new(0.0, 0.0); cascade.len() + full.len() - 1];
        for (i, a) in cascade.iter().enumerate() {
            for (j, b) in full.iter().enumerate() {
                next[i + j] += a * b;
            }
        }
        cascade = next;
        steps.push(DbpStep { filter: f, nl_scale: 0.0 });
    }
    let model = DbpModel::new(
        steps,
        ModelMeta {
            sample_rate: 20e9,
            samples_per_symbol: 2,
            seed: 0,
        },
    )
    .unwrap();
    let sig = ComplexSignal::single(SamplingGrid::new(20e9, n, 2).unwrap(), x.clone()).unwrap();
    let y = dbp::dbp_forward(&sig, &model).unwrap();
    let want = brute_conv(&x, &cascade);
    let g = model.guard();
    let dbp_err = rel_err(&y.pol_x[g..n - g], &want[g..n - g]);

    // one subband against plain DBP
    let fiber = FiberParams {
        n_spans: 3,
        ..FiberParams::default()
    };
    let plain = dbp::init_model(&fiber, 3, &[5, 3, 5], 20e9, 2, 1.0).unwrap();
    let sub = subband::SubbandDbpModel {
        steps: plain
            .steps
            .iter()
            .map(|s| subband::SubbandStep {
                filters: vec![s.filter.expand()],
                coupling: subband::Coupling::Dense(MimoIntensityTensor::memoryless(1, 1, s.nl_scale, 0.0).unwrap()),
            })
            .collect(),
    };
    let xs: Vec<C> = cvec(r, 256, 1.0).into_iter().map(|v| v * 0.05).collect();
    let sig = ComplexSignal::single(SamplingGrid::new(20e9, 256, 2).unwrap(), xs).unwrap();
    let a = dbp::dbp_forward(&sig, &plain).unwrap();
    let b = subband::subband_dbp_forward(&SubbandFrame::from_signal(&sig).unwrap(), &sub).unwrap();
    let s1_err = rel_err(&b.subbands[0], &a.pol_x);

    // 4×4 real MIMO against brute force
    let mut mimo_exact = true;
    for l in [1usize, 3, 5] {
        let n = 24;
        let w = MimoFirBaseline::new(l, (0..16 * l).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
        let (x, y) = (cvec(r, n, 1.0), cvec(r, n, 1.0));
        let out = pmd::mimo_fir_apply(&ComplexSignal::dual(SamplingGrid::new(20e9, n, 2).unwrap(), x.clone(), y.clone()).unwrap(), &w)
            .unwrap();
        let q: [Vec<f64>; 4] = [
            x.iter().map(|v| v.re).collect(),
            x.iter().map(|v| v.im).collect(),
            y.iter().map(|v| v.re).collect(),
            y.iter().map(|v| v.im).collect(),
        ];
        let c = (l / 2) as isize;
        let oy = out.pol_y.clone().unwrap();
        for t in 0..n {
            let mut o = [0.0; 4];
            for (oi, slot) in o.iter_mut().enumerate() {
                for (ii, qi) in q.iter().enumerate() {
                    for k in 0..l {
                        let s = t as isize + c - k as isize;
                        if s >= 0 && (s as usize) < n {
                            *slot += w.taps[w.index(oi, ii, k)] * qi[s as usize];
                        }
                    }
                }
            }
            mimo_exact &= out.pol_x[t] == C::new(o[0], o[1]) && oy[t] == C::new(o[2], o[3]);
        }
    }
    Outcome {
        pass: prop_err < 1e-9 && dbp_err < 1e-12 && s1_err < 1e-12 && mimo_exact,
        detail: format!(
            "linear propagate vs CD filter {prop_err:.1e} (< 1e-9); nl=0 DBP vs convolution {dbp_err:.1e} (< 1e-12); \
             S=1 vs plain {s1_err:.1e} (< 1e-12); MIMO vs brute force exact: {mimo_exact}"
        ),
    }
}

const C8_CONFIG: &str = include_str!("../presets/quick.toml");

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = vec![];
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n != "history.csv" && n != "checkpoint.json" && n != "lock") {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn c8_reproducibility() -> Outcome {
    let cfg = Config::parse(C8_CONFIG).unwrap();
    let dirs: Vec<_> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    for (k, d) in dirs.iter().enumerate() {
        commands::simulate(&cfg, d.path()).unwrap();
        if k == 2 {
            // interrupted inside the second stage, then resumed
            let stop = TrainOptions {
                resume: false,
                stop_after: Some(83),
            };
            assert!(matches!(commands::train(&cfg, d.path(), stop).unwrap(), TrainOutcome::Stopped { .. }));
            let resume = TrainOptions {
                resume: true,
                stop_after: None,
            };
            commands::train(&cfg, d.path(), resume).unwrap();
        } else {
            commands::train(&cfg, d.path(), TrainOptions::default()).unwrap();
        }
        commands::evaluate(&cfg, d.path()).unwrap();
        commands::report(d.path()).unwrap();
    }
    let t: Vec<_> = dirs.iter().map(|d| tree(d.path())).collect();
    let files = t[0].len();
    let rerun = t[0] == t[1];
    let resumed = t[0] == t[2];
    Outcome {
        pass: rerun && resumed && files >= 8,
        detail: format!("{files} files (data, model, evaluation, report): rerun identical {rerun}, resume identical {resumed}"),
    }
}

fn main() {
    let selected: Option<Vec<u32>> = std::env::var("LDBP_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let want = |k: u32| selected.as_ref().is_none_or(|s| s.contains(&k));
    let strict = std::env::var("LDBP_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut failed = 0;
    let mut report = |k: u32, t: Instant, o: Outcome| {
        println!(
            "criterion {k}: {} [{:.0} s] {}",
            if o.pass { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64(),
            o.detail
        );
        if !o.pass {
            failed += 1;
        }
    };
    let t = Instant::now();
    if want(1) {
        report(1, t, c1_gradients());
    }
    let mut short = None;
    if want(2) || want(5) {
        let t = Instant::now();
        let (o, sf) = c2_short_filters();
        if want(2) {
            report(2, t, o);
        }
        short = Some(sf);
    }
    if want(3) {
        report(3, Instant::now(), c3_complexity());
    }
    if want(4) {
        let t = Instant::now();
        report(4, t, c4_subband());
    }
    if let (true, Some(sf)) = (want(5), short.as_ref()) {
        let t = Instant::now();
        report(5, t, c5_quantization(sf));
    }
    if want(6) {
        let t = Instant::now();
        report(6, t, c6_pmd());
    }
    if want(7) {
        let t = Instant::now();
        report(7, t, c7_oracles());
    }
    if want(8) {
        let t = Instant::now();
        report(8, t, c8_reproducibility());
    }
    println!("acceptance: {failed} criteria failed");
    if strict && failed > 0 {
        std::process::exit(1);
    }
}
