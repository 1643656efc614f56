//! The training loop on a linear toy problem with a closed-form optimum.

use ldbp::autodiff::{NodeId, Tape, TapLayout, Value};
use ldbp::gradcheck::{cvec, rng, C};
use ldbp::training::*;
use ldbp::{Error, Result};

/// A 1-tap complex filter applied to `x`, MSE against `t`.
struct OneTap;

struct Pair {
    x: Vec<C>,
    t: Vec<C>,
}

impl Objective for OneTap {
    type Example = Pair;

    fn loss(&self, tape: &mut Tape, params: &[NodeId], ex: &Pair) -> Result<NodeId> {
        let x = tape.leaf(Value::Complex(vec![ex.x.clone()]));
        let y = tape.fir(x, params[0], TapLayout::Full)?;
        tape.mse(y, vec![ex.t.clone()])
    }
}

struct Blocks(Vec<(Vec<C>, Vec<C>)>);

impl DataSource for Blocks {
    type Example = Pair;

    fn batch(&self, iteration: usize, batch_size: usize) -> Vec<Pair> {
        (0..batch_size)
            .map(|k| {
                let (x, t) = &self.0[(iteration * batch_size + k) % self.0.len()];
                Pair { x: x.clone(), t: t.clone() }
            })
            .collect()
    }
}

/// Identity channel with a known complex scaling plus a small perturbation,
/// and the least-squares tap over the whole data set.
fn toy() -> (Blocks, C) {
    let r = &mut rng(90, 0);
    let scale = C::new(0.8, -0.3);
    let blocks: Vec<(Vec<C>, Vec<C>)> = (0..4)
        .map(|_| {
            let x = cvec(r, 32, 1.0);
            let e = cvec(r, 32, 0.05);
            let t = x.iter().zip(&e).map(|(a, b)| scale * a + b).collect();
            (x, t)
        })
        .collect();
    let (mut num, mut den) = (C::new(0.0, 0.0), 0.0);
    for (x, t) in &blocks {
        for (a, b) in x.iter().zip(t) {
            num += a.conj() * b;
            den += a.norm_sqr();
        }
    }
    (Blocks(blocks), num / den)
}

fn init() -> ParamSet {
    let mut p = ParamSet::new();
    p.push("w", ParamGroup::MimoTaps, vec![2], vec![0.0, 0.0]).unwrap();
    p
}

fn config(kind: OptimizerKind, step_size: f64, iterations: usize) -> TrainConfig {
    TrainConfig {
        opt: OptimizerConfig {
            kind,
            step_size,
            decay: Decay::Constant,
            batch_size: 4,
            max_iterations: iterations,
            seed: 0,
        },
        ..TrainConfig::default()
    }
}

#[test]
fn converges_to_the_least_squares_tap() {
    let (data, w_ls) = toy();
    for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
        let st = train(&OneTap, &data, init(), &config(kind, 0.05, 5000)).unwrap();
        let w = st.params.values(0);
        let err = (C::new(w[0], w[1]) - w_ls).norm();
        assert!(err < 1e-3, "{kind:?}: |w − w_ls| = {err:.2e}");
    }
}

#[test]
fn zero_iterations_return_the_initial_parameters() {
    let (data, _) = toy();
    let st = train(&OneTap, &data, init(), &config(OptimizerKind::Adam, 0.05, 0)).unwrap();
    assert_eq!(st.params, init());
    assert_eq!(st.best_params, init());
    assert!(st.history.is_empty());
}

#[test]
fn best_loss_never_increases() {
    let (data, _) = toy();
    let cfg = config(OptimizerKind::Adam, 0.05, 400);
    let mut st = TrainState::new(init());
    let mut last = f64::INFINITY;
    while st.iteration < 400 {
        let next = st.iteration + 7;
        train_until(&OneTap, &data, &cfg, &mut st, next).unwrap();
        assert!(st.best_loss <= last);
        last = st.best_loss;
    }
    let min = st.history.iter().map(|h| h.total_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(st.best_loss, min);
}

#[test]
fn runs_are_reproducible() {
    let (data, _) = toy();
    let cfg = config(OptimizerKind::Adam, 0.05, 200);
    let a = train(&OneTap, &data, init(), &cfg).unwrap();
    let b = train(&OneTap, &data, init(), &cfg).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.best_params, b.best_params);
}

#[test]
fn divergence_is_reported() {
    let (data, _) = toy();
    match train(&OneTap, &data, init(), &config(OptimizerKind::Sgd, 1e6, 100)) {
        Err(Error::Divergence { iteration, loss }) => assert!(iteration > 0 && !loss.is_finite()),
        other => panic!("expected divergence, got {:?}", other.map(|s| s.iteration)),
    }
}
