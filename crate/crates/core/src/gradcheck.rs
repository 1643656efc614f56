//! Finite-difference check of every reverse-mode rule of the tape: random
//! instances per operation, analytic gradient against central differences.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, ReverseRule, Tape, TapLayout, Value};
use crate::channel::FiberParams;
use crate::dbp;
use crate::pmd::{self, StageOrder};
use crate::subband::{self, FilterBankConfig, SubbandDbpModel};
use crate::Result;

/// Random instances per suite.
pub const INSTANCES: u64 = 20;
/// Acceptance bound on the relative L2 gradient error.
pub const TOL: f64 = 1e-4;

/// Worst relative gradient error of one suite over its instances.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub worst: f64,
}

pub type C = Complex64;

pub fn rng(test: u64, i: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(test * 1000 + i)
}

pub fn cvec(r: &mut ChaCha8Rng, n: usize, amp: f64) -> Vec<C> {
    (0..n)
        .map(|_| C::new(r.gen_range(-amp..amp), r.gen_range(-amp..amp)))
        .collect()
}

pub fn rvec(r: &mut ChaCha8Rng, n: usize, amp: f64) -> Vec<f64> {
    (0..n).map(|_| r.gen_range(-amp..amp)).collect()
}

pub fn complex(ch: Vec<Vec<C>>) -> Value {
    Value::Complex(ch)
}

fn n_coords(v: &Value) -> usize {
    match v {
        Value::Real(c) => c.iter().map(Vec::len).sum(),
        Value::Complex(c) => 2 * c.iter().map(Vec::len).sum::<usize>(),
    }
}

fn coords(v: &Value) -> Vec<f64> {
    match v {
        Value::Real(c) => c.iter().flatten().copied().collect(),
        Value::Complex(c) => c.iter().flatten().flat_map(|z| [z.re, z.im]).collect(),
    }
}

fn perturbed(v: &Value, k: usize, d: f64) -> Value {
    let mut out = v.clone();
    let idx = k;
    match &mut out {
        Value::Real(c) => {
            let mut i = idx;
            for ch in c.iter_mut() {
                if i < ch.len() {
                    ch[i] += d;
                    break;
                }
                i -= ch.len();
            }
        }
        Value::Complex(c) => {
            let (mut s, part) = (idx / 2, idx % 2);
            for ch in c.iter_mut() {
                if s < ch.len() {
                    if part == 0 {
                        ch[s].re += d;
                    } else {
                        ch[s].im += d;
                    }
                    break;
                }
                s -= ch.len();
            }
        }
    }
    out
}

pub fn evaluate<F>(inputs: &[Value], build: &F) -> Result<(f64, Vec<f64>)>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
    let loss = build(&mut tape, &ids)?;
    let l = tape.value(loss).as_scalar()?;
    let g = tape.backward(loss)?;
    let grad = ids
        .iter()
        .zip(inputs)
        .flat_map(|(id, v)| match g.get(*id) {
            Some(gv) => coords(gv),
            None => vec![0.0; n_coords(v)],
        })
        .collect();
    Ok((l, grad))
}

/// Relative L2 error between the analytic gradient and central differences
/// over every real coordinate of every input. A vanishing gradient counts as
/// a failure, since it cannot distinguish a broken rule.
pub fn gradient_error<F>(inputs: &[Value], build: F) -> f64
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let (_, analytic) = evaluate(inputs, &build).expect("analytic pass");
    let mut numeric = Vec::with_capacity(analytic.len());
    for (i, v) in inputs.iter().enumerate() {
        let base = coords(v);
        for k in 0..n_coords(v) {
            let h = 1e-6 * base[k].abs().max(1.0);
            let eval = |d: f64| {
                let mut moved = inputs.to_vec();
                moved[i] = perturbed(v, k, d);
                evaluate(&moved, &build).expect("perturbed pass").0
            };
            numeric.push((eval(h) - eval(-h)) / (2.0 * h));
        }
    }
    let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    if na.max(nn) < 1e-12 {
        return f64::INFINITY;
    }
    diff / na.max(nn)
}

fn run_suite<F>(out: &mut Vec<SuiteResult>, name: &'static str, test: u64, mut instance: F)
where
    F: FnMut(&mut ChaCha8Rng) -> f64,
{
    let worst = (0..INSTANCES).map(|i| instance(&mut rng(test, i))).fold(0.0, f64::max);
    out.push(SuiteResult { name, worst });
}

fn target_like(r: &mut ChaCha8Rng, v: &[Vec<C>]) -> Vec<Vec<C>> {
    v.iter().map(|c| cvec(r, c.len(), 1.0)).collect()
}

/// MSE against a random target: a generic scalar head for complex nodes.
fn mse_head(tape: &mut Tape, y: NodeId, target: &[Vec<C>]) -> Result<NodeId> {
    tape.mse(y, target.to_vec())
}

/// Real-node head: the node rotates a random complex carrier, then MSE.
fn real_head(tape: &mut Tape, phi: NodeId, carrier: &[Vec<C>], target: &[Vec<C>]) -> Result<NodeId> {
    let c = tape.leaf(complex(carrier.to_vec()));
    let y = tape.phase_rotate(c, phi)?;
    tape.mse(y, target.to_vec())
}

fn fir_folded(out: &mut Vec<SuiteResult>) {
    run_suite(out, "fir folded", 1, |r| {
        let pols = r.gen_range(1..=2);
        let n = r.gen_range(6..14);
        let half = r.gen_range(1..=4);
        let x: Vec<Vec<C>> = (0..pols).map(|_| cvec(r, n, 1.0)).collect();
        let taps = rvec(r, 2 * half, 1.0);
        let t = target_like(r, &x);
        gradient_error(&[complex(x), Value::vector(taps)], |tp, id| {
            let y = tp.fir(id[0], id[1], TapLayout::Folded)?;
            mse_head(tp, y, &t)
        })
    });
}

fn fir_full_and_bank(out: &mut Vec<SuiteResult>) {
    run_suite(out, "fir full", 2, |r| {
        let n = r.gen_range(6..14);
        let k = r.gen_range(1..=6);
        let x = vec![cvec(r, n, 1.0)];
        let taps = rvec(r, 2 * k, 1.0);
        let t = target_like(r, &x);
        gradient_error(&[complex(x), Value::vector(taps)], |tp, id| {
            let y = tp.fir(id[0], id[1], TapLayout::Full)?;
            mse_head(tp, y, &t)
        })
    });
    run_suite(out, "fir bank", 3, |r| {
        let s = r.gen_range(1..=3);
        let n = r.gen_range(6..12);
        let k = r.gen_range(1..=4);
        let x: Vec<Vec<C>> = (0..s).map(|_| cvec(r, n, 1.0)).collect();
        let taps = rvec(r, 2 * k * s, 1.0);
        let t = target_like(r, &x);
        gradient_error(&[complex(x), Value::vector(taps)], |tp, id| {
            let y = tp.fir_bank(id[0], id[1], k)?;
            mse_head(tp, y, &t)
        })
    });
}

fn dbp_chain_through_fir_apply(out: &mut Vec<SuiteResult>) {
    run_suite(out, "dbp chain", 4, |r| {
        let n = r.gen_range(8..14);
        let x = vec![cvec(r, n, 1.0)];
        let t = target_like(r, &x);
        let mut inputs = vec![complex(x)];
        for i in 0..3 {
            let half = if i % 2 == 0 { 3 } else { 2 };
            inputs.push(Value::vector(rvec(r, 2 * half, 0.7)));
            inputs.push(Value::scalar(r.gen_range(-0.5..0.5)));
        }
        gradient_error(&inputs, |tp, id| {
            let y = dbp::dbp_tape(tp, id[0], &id[1..])?;
            mse_head(tp, y, &t)
        })
    });
}

fn kerr_rotation(out: &mut Vec<SuiteResult>) {
    run_suite(out, "kerr", 5, |r| {
        let pols = r.gen_range(1..=2);
        let n = r.gen_range(4..12);
        let x: Vec<Vec<C>> = (0..pols).map(|_| cvec(r, n, 1.0)).collect();
        let t = target_like(r, &x);
        let s = r.gen_range(-1.0..1.0);
        gradient_error(&[complex(x), Value::scalar(s)], |tp, id| {
            let y = tp.kerr(id[0], id[1])?;
            mse_head(tp, y, &t)
        })
    });
}

fn coupled_phase(out: &mut Vec<SuiteResult>) {
    run_suite(out, "coupled phase", 6, |r| {
        let s = r.gen_range(1..=3);
        let n = r.gen_range(5..10);
        let len = [1, 3, 5][r.gen_range(0..3)];
        let x: Vec<Vec<C>> = (0..s).map(|_| cvec(r, n, 1.0)).collect();
        let w = rvec(r, s * s * len, 0.5);
        let t = target_like(r, &x);
        gradient_error(&[complex(x), Value::vector(w)], |tp, id| {
            let p = tp.intensity(id[0])?;
            let phi = tp.mimo_conv(p, id[1], s, len)?;
            let y = tp.phase_rotate(id[0], phi)?;
            mse_head(tp, y, &t)
        })
    });
}

fn cascade_phase(out: &mut Vec<SuiteResult>) {
    run_suite(out, "cascade phase", 8, |r| {
        let s = r.gen_range(1..=3);
        let n = r.gen_range(5..10);
        let stages = r.gen_range(2..=3);
        let x: Vec<Vec<C>> = (0..s).map(|_| cvec(r, n, 1.0)).collect();
        let lens: Vec<usize> = (0..stages).map(|_| [1, 3][r.gen_range(0..2)]).collect();
        let mut inputs = vec![complex(x.clone())];
        for l in &lens {
            inputs.push(Value::vector(rvec(r, s * s * l, 0.6)));
        }
        let t = target_like(r, &x);
        gradient_error(&inputs, |tp, id| {
            let mut p = tp.intensity(id[0])?;
            for (j, l) in lens.iter().enumerate() {
                p = tp.mimo_conv(p, id[1 + j], s, *l)?;
            }
            let y = tp.phase_rotate(id[0], p)?;
            mse_head(tp, y, &t)
        })
    });
}

fn subband_chain_with_merge(out: &mut Vec<SuiteResult>) {
    let fiber = FiberParams {
        n_spans: 1,
        ..FiberParams::default()
    };
    let bank = FilterBankConfig::new(2);
    let model: SubbandDbpModel =
        subband::init_subband_model(&fiber, &bank, 20e9, 1, 3, 1, Some(&[1, 1])).unwrap();
    let base = model.to_params();
    run_suite(out, "subband chain", 9, |r| {
        let full_len = 16;
        // oversampled subbands: 2·N/S samples each
        let x: Vec<Vec<C>> = (0..2).map(|_| cvec(r, full_len, 0.5)).collect();
        let t = vec![cvec(r, full_len, 1.0)];
        let mut inputs = vec![complex(x)];
        for e in base.entries() {
            let jitter = rvec(r, e.values.len(), 0.1);
            inputs.push(Value::vector(e.values.iter().zip(jitter).map(|(a, b)| a + b).collect()));
        }
        gradient_error(&inputs, |tp, id| {
            let y = subband::subband_dbp_tape(tp, id[0], &model, &id[1..])?;
            let m = subband::merge_tape(tp, y, &bank, full_len, full_len)?;
            mse_head(tp, m, &t)
        })
    });
}

fn pmd_stage_apply_both_orders(out: &mut Vec<SuiteResult>) {
    for (k, order) in [StageOrder::FdThenRotation, StageOrder::RotationThenFd].into_iter().enumerate() {
        run_suite(out, "pmd stages", 10 + k as u64, |r| {
            let n = r.gen_range(6..12);
            let x = vec![cvec(r, n, 1.0), cvec(r, n, 1.0)];
            let t = target_like(r, &x);
            let mut inputs = vec![complex(x)];
            for _ in 0..2 {
                inputs.push(Value::vector(rvec(r, 3, 3.0)));
                inputs.push(Value::vector(rvec(r, 3, 1.0)));
            }
            gradient_error(&inputs, |tp, id| {
                let y = pmd::pmd_comp_tape(tp, id[0], &id[1..], order)?;
                mse_head(tp, y, &t)
            })
        });
    }
}

fn rotation_matrix_partials(out: &mut Vec<SuiteResult>) {
    run_suite(out, "rotation partials", 12, |r| {
        let a = [r.gen_range(-4.0..4.0), r.gen_range(-4.0..4.0), r.gen_range(-4.0..4.0)];
        let d = pmd::rotation_partials(a);
        let mut diff = 0.0;
        let mut norm: f64 = 0.0;
        for k in 0..3 {
            let h = 1e-6;
            let mut ap = a;
            let mut am = a;
            ap[k] += h;
            am[k] -= h;
            let mp = pmd::rotation_from_angles(ap);
            let mm = pmd::rotation_from_angles(am);
            for i in 0..2 {
                for j in 0..2 {
                    let fd = (mp.0[i][j] - mm.0[i][j]) / (2.0 * h);
                    diff += (fd - d[k].0[i][j]).norm_sqr();
                    norm = norm.max(d[k].0[i][j].norm());
                }
            }
        }
        diff.sqrt() / norm
    });
    run_suite(out, "rotation op", 13, |r| {
        let n = r.gen_range(3..8);
        let x = vec![cvec(r, n, 1.0), cvec(r, n, 1.0)];
        let t = target_like(r, &x);
        let a = rvec(r, 3, 3.0);
        gradient_error(&[complex(x), Value::vector(a)], |tp, id| {
            let y = tp.rotation(id[0], id[1])?;
            mse_head(tp, y, &t)
        })
    });
}

fn mimo_and_decimation(out: &mut Vec<SuiteResult>) {
    run_suite(out, "mimo4", 14, |r| {
        let n = r.gen_range(5..10);
        let len = [1, 3][r.gen_range(0..2)];
        let x = vec![cvec(r, n, 1.0), cvec(r, n, 1.0)];
        let t = target_like(r, &x);
        let w = rvec(r, 16 * len, 0.5);
        gradient_error(&[complex(x), Value::vector(w)], |tp, id| {
            let y = tp.mimo4(id[0], id[1], len)?;
            mse_head(tp, y, &t)
        })
    });
    run_suite(out, "fir decimate", 15, |r| {
        let n = r.gen_range(12..20);
        let x = vec![cvec(r, n, 1.0)];
        let k = r.gen_range(1..6);
        let taps = rvec(r, k, 1.0);
        let count = (n - 2) / 2;
        let t = vec![cvec(r, count, 1.0)];
        gradient_error(&[complex(x)], |tp, id| {
            let y = tp.fir_decimate(id[0], &taps, 1, 2, count)?;
            mse_head(tp, y, &t)
        })
    });
    run_suite(out, "fd filter", 16, |r| {
        let n = r.gen_range(5..10);
        let x = vec![cvec(r, n, 1.0), cvec(r, n, 1.0)];
        let t = target_like(r, &x);
        let k = r.gen_range(1..6);
        let h = rvec(r, k, 1.0);
        gradient_error(&[complex(x), Value::vector(h)], |tp, id| {
            let y = tp.fd_filter(id[0], id[1])?;
            mse_head(tp, y, &t)
        })
    });
}

fn losses(out: &mut Vec<SuiteResult>) {
    run_suite(out, "mse", 17, |r| {
        let n = r.gen_range(1..10);
        let x = vec![cvec(r, n, 1.0)];
        let t = target_like(r, &x);
        gradient_error(&[complex(x)], |tp, id| tp.mse(id[0], t.clone()))
    });
    run_suite(out, "cma", 18, |r| {
        let pols = r.gen_range(1..=2);
        let n = r.gen_range(1..10);
        let x: Vec<Vec<C>> = (0..pols).map(|_| cvec(r, n, 1.0)).collect();
        let radius = r.gen_range(0.2..2.0);
        gradient_error(&[complex(x)], |tp, id| tp.cma(id[0], radius))
    });
    run_suite(out, "l1 + add + scale", 19, |r| {
        // keep entries away from the kink at zero
        let v: Vec<f64> = rvec(r, 6, 1.0).into_iter().map(|x| x + 0.1 * x.signum()).collect();
        let x = vec![cvec(r, 4, 1.0)];
        let t = target_like(r, &x);
        let w = r.gen_range(0.01..1.0);
        gradient_error(&[Value::vector(v), complex(x)], |tp, id| {
            let a = tp.l1(id[0], w)?;
            let b = tp.mse(id[1], t.clone())?;
            let s = tp.scale(b, 0.5)?;
            tp.add(a, s)
        })
    });
    run_suite(out, "intensity head", 20, |r| {
        let x = vec![cvec(r, 6, 1.0)];
        let carrier = vec![cvec(r, 6, 1.0)];
        let t = target_like(r, &carrier);
        gradient_error(&[complex(x)], |tp, id| {
            let p = tp.intensity(id[0])?;
            real_head(tp, p, &carrier, &t)
        })
    });
}

struct Square;

impl ReverseRule for Square {
    fn backward(&self, inputs: &[&Value], _output: &Value, grad: &Value) -> Result<Vec<Value>> {
        let x = inputs[0].as_scalar()?;
        Ok(vec![Value::scalar(2.0 * x * grad.as_scalar()?)])
    }
}

fn custom_with_rule(out: &mut Vec<SuiteResult>) {
    run_suite(out, "custom", 22, |r| {
        let v = r.gen_range(-2.0..2.0);
        gradient_error(&[Value::scalar(v)], |tp, id| {
            let x = tp.value(id[0]).as_scalar()?;
            let y = tp.custom("square", &[id[0]], Value::scalar(x * x), Some(Box::new(Square)));
            tp.scale(y, 3.0)
        })
    });
}

/// Runs every suite and reports its worst error.
pub fn run_all() -> Vec<SuiteResult> {
    let mut out = Vec::new();
    fir_folded(&mut out);
    fir_full_and_bank(&mut out);
    dbp_chain_through_fir_apply(&mut out);
    kerr_rotation(&mut out);
    coupled_phase(&mut out);
    cascade_phase(&mut out);
    subband_chain_with_merge(&mut out);
    pmd_stage_apply_both_orders(&mut out);
    rotation_matrix_partials(&mut out);
    mimo_and_decimation(&mut out);
    losses(&mut out);
    custom_with_rule(&mut out);
    out
}
