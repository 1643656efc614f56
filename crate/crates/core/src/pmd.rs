//! Multi-step PMD compensation: alternating memoryless rotations and short
//! fractional-delay filter pairs, plus the single-stage 4×4 MIMO baseline.

use crate::autodiff::{NodeId, Tape, Value};
use crate::channel::Jones;
use crate::error::{arg, Error, Result};
use crate::kernels;
use crate::signal::ComplexSignal;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

fn cis(a: f64) -> Complex64 {
    Complex64::from_polar(1.0, a)
}

/// `[[e^{jα}cosψ, e^{jβ}sinψ], [−e^{−jβ}sinψ, e^{−jα}cosψ]]`, a determinant-one
/// unitary for every `[α, β, ψ]`.
pub fn rotation_from_angles(a: [f64; 3]) -> Jones {
    let [al, be, psi] = a;
    let (s, c) = psi.sin_cos();
    Jones([
        [cis(al) * c, cis(be) * s],
        [-cis(-be) * s, cis(-al) * c],
    ])
}

/// Entry-wise partial derivatives of [`rotation_from_angles`] with respect to
/// each of the three angles.
pub fn rotation_partials(a: [f64; 3]) -> [Jones; 3] {
    let [al, be, psi] = a;
    let (s, c) = psi.sin_cos();
    let j = Complex64::new(0.0, 1.0);
    let z = Complex64::new(0.0, 0.0);
    [
        Jones([[j * cis(al) * c, z], [z, -j * cis(-al) * c]]),
        Jones([[z, j * cis(be) * s], [j * cis(-be) * s, z]]),
        Jones([
            [-cis(al) * s, cis(be) * c],
            [-cis(-be) * c, -cis(-al) * s],
        ]),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RotationParams {
    pub angles: [f64; 3],
}

impl RotationParams {
    pub fn matrix(&self) -> Jones {
        rotation_from_angles(self.angles)
    }

    /// Angles whose matrix equals `m` (any determinant-one unitary).
    pub fn from_matrix(m: &Jones) -> Self {
        let [[a, b], _] = m.0;
        let psi = b.norm().atan2(a.norm());
        Self {
            angles: [a.arg(), b.arg(), psi],
        }
    }

    /// The inverse rotation `Mᴴ`.
    pub fn inverse(&self) -> Self {
        Self::from_matrix(&self.matrix().adjoint())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdFilter {
    pub taps: Vec<f64>,
    /// Design delay in samples, positive delays the x polarization.
    pub delta: f64,
}

/// Lagrange fractional-delay design of order `len − 1`. The ideal delay is tap
/// `⌊(len−1)/2⌋` plus `delta`, so `delta = 0` is a unit impulse.
pub fn fd_design(delta: f64, len: usize) -> Result<FdFilter> {
    if len == 0 {
        return arg("fractional-delay filter needs at least one tap");
    }
    let half = (len as f64 - 1.0) / 2.0;
    if delta.abs() > half {
        return Err(Error::Bounds(format!(
            "delay {delta} outside the {len}-tap window"
        )));
    }
    let d = ((len - 1) / 2) as f64 + delta;
    let taps = (0..len)
        .map(|k| {
            (0..len)
                .filter(|&m| m != k)
                .map(|m| (d - m as f64) / (k as f64 - m as f64))
                .product()
        })
        .collect();
    Ok(FdFilter { taps, delta })
}

/// Order of the two sub-operations inside one stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageOrder {
    #[default]
    FdThenRotation,
    RotationThenFd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PmdStage {
    pub rotation: RotationParams,
    pub fd: FdFilter,
}

impl PmdStage {
    pub fn identity(fd_len: usize) -> Result<Self> {
        Ok(Self {
            rotation: RotationParams::default(),
            fd: fd_design(0.0, fd_len)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PmdModel {
    pub stages: Vec<PmdStage>,
    #[serde(default)]
    pub order: StageOrder,
}

impl PmdModel {
    pub fn identity(n_stages: usize, fd_len: usize, order: StageOrder) -> Result<Self> {
        Ok(Self {
            stages: (0..n_stages)
                .map(|_| PmdStage::identity(fd_len))
                .collect::<Result<_>>()?,
            order,
        })
    }

    /// Samples at each end affected by the zero-padded filter edges.
    pub fn guard(&self) -> usize {
        self.stages.iter().map(|s| s.fd.taps.len() / 2).sum()
    }
}

fn require_dual(sig: &ComplexSignal) -> Result<(&[Complex64], &[Complex64])> {
    match &sig.pol_y {
        Some(y) => Ok((&sig.pol_x, y)),
        None => arg("PMD compensation needs a dual-polarization signal"),
    }
}

fn fd_apply(x: &[Complex64], y: &[Complex64], taps: &[f64]) -> (Vec<Complex64>, Vec<Complex64>) {
    let rev: Vec<f64> = taps.iter().rev().copied().collect();
    (
        kernels::conv_same_real_taps(x, taps),
        kernels::conv_same_real_taps(y, &rev),
    )
}

fn rotate(x: &[Complex64], y: &[Complex64], m: &Jones) -> (Vec<Complex64>, Vec<Complex64>) {
    x.iter().zip(y).map(|(a, b)| m.apply(*a, *b)).unzip()
}

fn stage_apply(
    x: &[Complex64],
    y: &[Complex64],
    stage: &PmdStage,
    order: StageOrder,
) -> (Vec<Complex64>, Vec<Complex64>) {
    let m = stage.rotation.matrix();
    match order {
        StageOrder::FdThenRotation => {
            let (a, b) = fd_apply(x, y, &stage.fd.taps);
            rotate(&a, &b, &m)
        }
        StageOrder::RotationThenFd => {
            let (a, b) = rotate(x, y, &m);
            fd_apply(&a, &b, &stage.fd.taps)
        }
    }
}

/// Pol x filtered by `h`, pol y by the reversed `h` (both on real and
/// imaginary parts), then the stage rotation.
pub fn pmd_stage_apply(sig: &ComplexSignal, stage: &PmdStage) -> Result<ComplexSignal> {
    let (x, y) = require_dual(sig)?;
    let (a, b) = stage_apply(x, y, stage, StageOrder::FdThenRotation);
    ComplexSignal::dual(sig.grid, a, b)
}

pub fn pmd_comp_forward(sig: &ComplexSignal, model: &PmdModel) -> Result<ComplexSignal> {
    let (x, y) = require_dual(sig)?;
    let (mut a, mut b) = (x.to_vec(), y.to_vec());
    for s in &model.stages {
        (a, b) = stage_apply(&a, &b, s, model.order);
    }
    ComplexSignal::dual(sig.grid, a, b)
}

/// Records the model on a tape. `params` holds per stage `[angles, fd taps]`.
pub fn pmd_comp_tape(
    tape: &mut Tape,
    x: NodeId,
    params: &[NodeId],
    order: StageOrder,
) -> Result<NodeId> {
    if params.len() % 2 != 0 {
        return Err(Error::Contract("PMD parameters come in (angles, taps) pairs".into()));
    }
    let mut u = x;
    for p in params.chunks_exact(2) {
        u = match order {
            StageOrder::FdThenRotation => {
                let f = tape.fd_filter(u, p[1])?;
                tape.rotation(f, p[0])?
            }
            StageOrder::RotationThenFd => {
                let r = tape.rotation(u, p[0])?;
                tape.fd_filter(r, p[1])?
            }
        };
    }
    Ok(u)
}

/// Real 4×4×L filter on `(Re x, Im x, Re y, Im y)`; `taps` is row-major
/// `[output][input][tap]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MimoFirBaseline {
    pub len: usize,
    pub taps: Vec<f64>,
}

impl MimoFirBaseline {
    pub fn new(len: usize, taps: Vec<f64>) -> Result<Self> {
        if len % 2 == 0 || taps.len() != 16 * len {
            return arg(format!("4x4 MIMO filter needs odd L and 16·L taps, got L={len}, {} taps", taps.len()));
        }
        Ok(Self { len, taps })
    }

    /// Center-tap identity.
    pub fn identity(len: usize) -> Result<Self> {
        let mut taps = vec![0.0; 16 * len];
        for i in 0..4 {
            taps[(i * 4 + i) * len + len / 2] = 1.0;
        }
        Self::new(len, taps)
    }

    pub fn index(&self, out: usize, inp: usize, k: usize) -> usize {
        (out * 4 + inp) * self.len + k
    }
}

pub fn mimo_fir_apply(sig: &ComplexSignal, w: &MimoFirBaseline) -> Result<ComplexSignal> {
    let (x, y) = require_dual(sig)?;
    if w.len % 2 == 0 || w.taps.len() != 16 * w.len {
        return arg("malformed 4x4 MIMO filter");
    }
    let quad = vec![
        x.iter().map(|v| v.re).collect(),
        x.iter().map(|v| v.im).collect(),
        y.iter().map(|v| v.re).collect(),
        y.iter().map(|v| v.im).collect::<Vec<f64>>(),
    ];
    let q = kernels::mimo_conv(&quad, &w.taps, 4, w.len);
    let px = q[0].iter().zip(&q[1]).map(|(a, b)| Complex64::new(*a, *b)).collect();
    let py = q[2].iter().zip(&q[3]).map(|(a, b)| Complex64::new(*a, *b)).collect();
    ComplexSignal::dual(sig.grid, px, py)
}

/// Builds the exact mirror of a PMD link: undoes the sections in reverse
/// order. Each section's DGD becomes a fractional delay of `−τ/(2·dt)` on pol x.
pub fn mirror_of_link(
    link: &crate::channel::PmdLink,
    dt_ps: f64,
    fd_len: usize,
) -> Result<PmdModel> {
    let stages = link
        .sections
        .iter()
        .rev()
        .map(|s| {
            Ok(PmdStage {
                rotation: RotationParams::from_matrix(&s.rotation.adjoint()),
                fd: fd_design(-s.dgd_tau / (2.0 * dt_ps), fd_len)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(PmdModel {
        stages,
        order: StageOrder::RotationThenFd,
    })
}

/// Writes `model` into a parameter vector in the `pmd_comp_tape` layout.
pub fn model_params(model: &PmdModel) -> Vec<Value> {
    model
        .stages
        .iter()
        .flat_map(|s| {
            [
                Value::vector(s.rotation.angles.to_vec()),
                Value::vector(s.fd.taps.clone()),
            ]
        })
        .collect()
}
