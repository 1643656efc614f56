//! Adaptive PMD compensation: supervised multi-step stages and the blind
//! 4×4 MIMO baseline on a static link.

use ldbp::channel::{draw_pmd_link, PmdLink};
use ldbp::experiment::*;
use ldbp::pmd::{MimoFirBaseline, PmdModel, StageOrder};
use ldbp::training::*;

fn scenario(modulation: usize) -> Scenario {
    Scenario {
        dual_pol: true,
        modulation,
        frame_symbols: 1024,
        ..Scenario::default()
    }
}

fn frames(scn: &Scenario, link: Option<&PmdLink>, snr_db: f64, seed: u64, n: u64) -> Vec<Frame> {
    (0..n).map(|i| generate_pmd_frame(scn, link, snr_db, seed, i).unwrap()).collect()
}

fn cfg(kind: OptimizerKind, step_size: f64, iterations: usize) -> TrainConfig {
    TrainConfig {
        opt: OptimizerConfig {
            kind,
            step_size,
            batch_size: 8,
            max_iterations: iterations,
            ..OptimizerConfig::default()
        },
        ..TrainConfig::default()
    }
}

#[test]
fn perfect_mimo_on_clean_qpsk_does_not_move() {
    let scn = scenario(4);
    let taps = scn.rx_taps().unwrap();
    let f = frames(&scn, None, 300.0, 1, 1);
    let w0 = MimoFirBaseline::identity(5).unwrap();
    let g = guard_symbols(5, scn.rx_sps, scn.rrc_span);
    let obj = MimoCmaObjective {
        len: 5,
        radius: f[0].gain.powi(2),
        rx_taps: taps,
    };
    let src = WindowSource {
        frames: f,
        window_symbols: 64,
        guard_symbols: g,
        seed: 1,
    };
    let st = train(&obj, &src, mimo_params(&w0), &cfg(OptimizerKind::Sgd, 1e-2, 20)).unwrap();
    // residual intersymbol interference of the finite RRC pair only
    let r2 = obj.radius.powi(2);
    assert!(st.history.iter().all(|h| h.data_loss < 1e-5 * r2), "{:?}", st.history[0]);
    let moved = st
        .params
        .values(0)
        .iter()
        .zip(mimo_params(&w0).values(0))
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    assert!(moved < 1e-5, "{moved}");
}

#[test]
fn one_section_pmd_is_compensated() {
    let scn = scenario(16);
    let taps = scn.rx_taps().unwrap();
    // a single section with a DGD of half a symbol
    let link = draw_pmd_link(3, 1, 0.5e12 / scn.symbol_rate).unwrap();
    let train_f = frames(&scn, Some(&link), 20.0, 1, 4);
    let val = frames(&scn, Some(&link), 20.0, 2, 2);
    let reference_frames = frames(&scn, None, 20.0, 2, 2);

    let id = PmdModel::identity(4, 5, StageOrder::RotationThenFd).unwrap();
    let g = guard_symbols(id.guard(), scn.rx_sps, scn.rrc_span);
    let reference = eval_pmd(&id, &reference_frames, &taps, g).unwrap();
    let before = eval_pmd(&id, &val, &taps, g).unwrap();
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
    let st = train(&obj, &src, pmd_params(&id), &cfg(OptimizerKind::Adam, 3e-3, 2000)).unwrap();
    let after = eval_pmd(&pmd_with_params(&id, &st.params).unwrap(), &val, &taps, g).unwrap();
    assert!(reference - before > 3.0, "the link must hurt: {before} vs {reference}");
    assert!(reference - after < 0.5, "multi-step: {after} vs {reference}");

    // two and a half symbols cover the half-symbol DGD
    let len = 5;
    let gm = guard_symbols(len, scn.rx_sps, scn.rrc_span);
    let obj = MimoCmaObjective {
        len,
        radius: train_f[0].gain.powi(2) * 1.32,
        rx_taps: taps.clone(),
    };
    let src = WindowSource {
        frames: train_f,
        window_symbols: 128,
        guard_symbols: gm,
        seed: 4,
    };
    let w0 = MimoFirBaseline::identity(len).unwrap();
    let st = train(&obj, &src, mimo_params(&w0), &cfg(OptimizerKind::Adam, 1e-3, 6000)).unwrap();
    let w = MimoFirBaseline::new(len, st.params.values(0).to_vec()).unwrap();
    let mimo = eval_mimo(&w, &val, &taps, gm).unwrap();
    assert!(reference - mimo < 1.0, "MIMO CMA: {mimo} vs {reference}");
}
