//! Receiver architectures driven by the runner: construction from a
//! configuration or an artifact, training objectives and evaluation.

use ldbp::dbp::{self, DbpModel, DbpStep, FoldedFir, ModelMeta};
use ldbp::experiment::{
    eval_dbp, eval_subband, guard_symbols, DbpObjective, Frame, Scenario, SubbandObjective, WindowSource,
};
use ldbp::subband::{
    init_subband_model, Coupling, FilterBankConfig, MimoIntensityTensor, SubbandDbpModel, SubbandStep,
    TensorCascade,
};
use ldbp::training::{train_until, ParamGroup, ParamSet, TrainConfig, TrainState};
use num_complex::Complex64;

use crate::artifact::Architecture;
use crate::config::{Config, ModelKind};
use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub enum Receiver {
    Dbp(DbpModel),
    Subband {
        model: SubbandDbpModel,
        bank: FilterBankConfig,
        sample_rate: f64,
        samples_per_symbol: usize,
    },
}

/// Probe for the linear cascade pre-fit: the receiver pulse in the middle of
/// an otherwise empty frame, plus a weak impulse covering the whole band.
fn prefit_probe(rx_taps: &[f64], len: usize) -> Vec<Vec<Complex64>> {
    let mut pulse = vec![Complex64::new(0.0, 0.0); len];
    let start = len / 2 - rx_taps.len() / 2;
    for (i, t) in rx_taps.iter().enumerate() {
        pulse[start + i] = Complex64::new(*t, 0.0);
    }
    let mut wide = vec![Complex64::new(0.0, 0.0); len];
    wide[len / 2] = Complex64::new(0.1, 0.0);
    vec![pulse, wide]
}

impl Receiver {
    /// The untrained model of the configuration.
    pub fn initial(cfg: &Config) -> Result<Self, CliError> {
        let scn = cfg.scenario();
        let fiber = cfg.fiber();
        let m = &cfg.model;
        match m.kind {
            ModelKind::Dbp => {
                let model = dbp::init_model(
                    &fiber,
                    m.n_steps,
                    &cfg.tap_counts(),
                    scn.rx_rate(),
                    scn.rx_sps,
                    m.fit_band,
                )?;
                if m.prefit_iterations == 0 {
                    return Ok(Receiver::Dbp(model));
                }
                let rx_taps = scn.rx_taps()?;
                let len = (4 * rx_taps.len()).next_power_of_two().max(512);
                let probe = prefit_probe(&rx_taps, len);
                Ok(Receiver::Dbp(dbp::fit_cascade(&model, &fiber, &probe, m.prefit_iterations, 0.01)?))
            }
            ModelKind::Subband => {
                let bank = FilterBankConfig::new(m.n_subbands);
                let model = init_subband_model(
                    &fiber,
                    &bank,
                    scn.rx_rate(),
                    m.n_steps,
                    m.taps[0],
                    m.coupling_len,
                    m.cascade_lengths.as_deref(),
                )?;
                Ok(Receiver::Subband {
                    model,
                    bank,
                    sample_rate: scn.rx_rate(),
                    samples_per_symbol: scn.rx_sps,
                })
            }
        }
    }

    pub fn architecture(&self) -> Architecture {
        match self {
            Receiver::Dbp(m) => Architecture::Dbp {
                sample_rate_hz: m.meta.sample_rate,
                samples_per_symbol: m.meta.samples_per_symbol,
                taps: m.tap_counts(),
            },
            Receiver::Subband {
                model,
                bank,
                sample_rate,
                samples_per_symbol,
            } => {
                let step = &model.steps[0];
                let coupling_lens = match &step.coupling {
                    Coupling::Dense(t) => vec![t.len],
                    Coupling::Cascade(c) => c.stages.iter().map(|t| t.len).collect(),
                };
                Architecture::Subband {
                    sample_rate_hz: *sample_rate,
                    samples_per_symbol: *samples_per_symbol,
                    n_subbands: bank.n_subbands,
                    bank_rolloff: bank.rolloff,
                    bank_oversampling: bank.oversampling,
                    filter_len: step.filters[0].len(),
                    coupling_lens,
                    n_steps: model.steps.len(),
                }
            }
        }
    }

    /// Zero-valued skeleton of an architecture, to be filled by [`Self::with_params`].
    pub fn skeleton(arch: &Architecture) -> Result<Self, CliError> {
        match arch {
            Architecture::Dbp {
                sample_rate_hz,
                samples_per_symbol,
                taps,
            } => {
                let steps = taps
                    .iter()
                    .map(|&k| {
                        if k % 2 == 0 {
                            return Err(CliError::Integrity(format!("even DBP filter length {k}")));
                        }
                        Ok(DbpStep {
                            filter: FoldedFir::from_half(vec![Complex64::new(0.0, 0.0); k / 2 + 1])?,
                            nl_scale: 0.0,
                        })
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                let meta = ModelMeta {
                    sample_rate: *sample_rate_hz,
                    samples_per_symbol: *samples_per_symbol,
                    seed: 0,
                };
                Ok(Receiver::Dbp(DbpModel::new(steps, meta)?))
            }
            Architecture::Subband {
                sample_rate_hz,
                samples_per_symbol,
                n_subbands,
                bank_rolloff,
                bank_oversampling,
                filter_len,
                coupling_lens,
                n_steps,
            } => {
                let s = *n_subbands;
                let bank = FilterBankConfig {
                    n_subbands: s,
                    rolloff: *bank_rolloff,
                    oversampling: *bank_oversampling,
                };
                bank.validate()?;
                let coupling = match coupling_lens.as_slice() {
                    [len] => Coupling::Dense(MimoIntensityTensor::zeros(s, *len)?),
                    lens => Coupling::Cascade(TensorCascade::new(
                        lens.iter()
                            .map(|&l| MimoIntensityTensor::zeros(s, l))
                            .collect::<ldbp::Result<Vec<_>>>()?,
                    )?),
                };
                let step = SubbandStep {
                    filters: vec![vec![Complex64::new(0.0, 0.0); *filter_len]; s],
                    coupling,
                };
                Ok(Receiver::Subband {
                    model: SubbandDbpModel {
                        steps: vec![step; *n_steps],
                    },
                    bank,
                    sample_rate: *sample_rate_hz,
                    samples_per_symbol: *samples_per_symbol,
                })
            }
        }
    }

    pub fn params(&self) -> ParamSet {
        match self {
            Receiver::Dbp(m) => m.to_params(),
            Receiver::Subband { model, .. } => model.to_params(),
        }
    }

    pub fn with_params(&self, p: &ParamSet) -> Result<Self, CliError> {
        Ok(match self {
            Receiver::Dbp(m) => Receiver::Dbp(m.with_params(p)?),
            Receiver::Subband {
                model,
                bank,
                sample_rate,
                samples_per_symbol,
            } => Receiver::Subband {
                model: model.with_params(p)?,
                bank: *bank,
                sample_rate: *sample_rate,
                samples_per_symbol: *samples_per_symbol,
            },
        })
    }

    pub fn sample_rate(&self) -> f64 {
        match self {
            Receiver::Dbp(m) => m.meta.sample_rate,
            Receiver::Subband { sample_rate, .. } => *sample_rate,
        }
    }

    pub fn samples_per_symbol(&self) -> usize {
        match self {
            Receiver::Dbp(m) => m.meta.samples_per_symbol,
            Receiver::Subband { samples_per_symbol, .. } => *samples_per_symbol,
        }
    }

    /// Parameter groups subject to L1 and pruning.
    pub fn sparse_groups(&self) -> Vec<ParamGroup> {
        match self {
            Receiver::Dbp(_) => vec![ParamGroup::CdTaps],
            Receiver::Subband { .. } => vec![ParamGroup::Coupling],
        }
    }

    /// Tap counts of every filter, for the complexity report.
    pub fn tap_counts(&self) -> Vec<usize> {
        match self {
            Receiver::Dbp(m) => m.tap_counts(),
            Receiver::Subband { model, .. } => model
                .steps
                .iter()
                .flat_map(|s| s.filters.iter().map(|f| f.len()))
                .collect(),
        }
    }

    /// Guard symbols at each window end: receiver memory, matched filter and `margin`.
    pub fn guard_symbols(&self, scn: &Scenario, margin: usize) -> usize {
        let sps = self.samples_per_symbol();
        let samples = match self {
            Receiver::Dbp(m) => m.guard(),
            Receiver::Subband { model, bank, .. } => {
                (model.guard() * bank.n_subbands).div_ceil(bank.oversampling)
            }
        };
        guard_symbols(samples, sps, scn.rrc_span) + margin
    }

    pub fn evaluate(&self, frames: &[Frame], rx_taps: &[f64], guard: usize) -> Result<f64, CliError> {
        Ok(match self {
            Receiver::Dbp(m) => eval_dbp(m, frames, rx_taps, guard)?,
            Receiver::Subband { model, bank, .. } => eval_subband(model, bank, frames, rx_taps, guard)?,
        })
    }

    /// Advances `state` to `stop_at` iterations of `cfg`.
    pub fn train(
        &self,
        data: &WindowSource,
        rx_taps: &[f64],
        cfg: &TrainConfig,
        state: &mut TrainState,
        stop_at: usize,
    ) -> Result<(), CliError> {
        match self {
            Receiver::Dbp(_) => {
                let obj = DbpObjective {
                    rx_taps: rx_taps.to_vec(),
                };
                train_until(&obj, data, cfg, state, stop_at)?;
            }
            Receiver::Subband { model, bank, .. } => {
                let obj = SubbandObjective {
                    model: model.clone(),
                    bank: *bank,
                    rx_taps: rx_taps.to_vec(),
                };
                train_until(&obj, data, cfg, state, stop_at)?;
            }
        }
        Ok(())
    }
}
