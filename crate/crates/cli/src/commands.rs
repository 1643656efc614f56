//! The runner verbs. Every verb works inside one experiment directory:
//!
//! ```text
//! DIR/data/manifest.json, DIR/data/frames/*.json   simulate
//! DIR/model.json, DIR/history.csv, DIR/checkpoint.json   train
//! DIR/evaluation.json, DIR/evaluation.csv   evaluate
//! DIR/report.txt   report
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ldbp::dbp::{complexity_for_taps, ComplexityRule};
use ldbp::experiment::WindowSource;
use ldbp::rng::derive_seed;
use ldbp::training::{
    max_abs_scale, quantize_params, FakeQuantConfig, HistoryRow, OptimizerConfig, ParamGroup, PruneReport,
    RegularizerConfig, TrainConfig, TrainState,
};
use serde::{Deserialize, Serialize};

use crate::artifact::{Architecture, ModelArtifact, Provenance, QuantScale, Quantization};
use crate::config::{stream, Config};
use crate::dataset::{self, Dataset, Split};
use crate::io::{read_json, write_atomic, write_json, DirLock};
use crate::receiver::Receiver;
use crate::CliError;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;
pub const EVALUATION_SCHEMA_VERSION: u32 = 1;

/// Parameter groups that are quantized when fake-quantized training is on.
pub const QUANT_GROUPS: [ParamGroup; 1] = [ParamGroup::CdTaps];

pub fn data_dir(out: &Path) -> PathBuf {
    out.join("data")
}

pub fn model_path(out: &Path) -> PathBuf {
    out.join("model.json")
}

fn checkpoint_path(out: &Path) -> PathBuf {
    out.join("checkpoint.json")
}

pub fn simulate(cfg: &Config, out: &Path) -> Result<dataset::Manifest, CliError> {
    let _lock = DirLock::acquire(out)?;
    dataset::simulate(cfg, &data_dir(out))
}

fn open_dataset(cfg: &Config, out: &Path) -> Result<Dataset, CliError> {
    let ds = Dataset::open(&data_dir(out))?;
    if ds.manifest.data_digest != cfg.data_digest() {
        return Err(CliError::Config(
            "the data set was generated from a different configuration; rerun simulate".into(),
        ));
    }
    Ok(ds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub config_digest: String,
    /// Stage in progress.
    pub stage: usize,
    pub state: TrainState,
    /// Iterations completed by earlier stages.
    pub offset: usize,
    /// History of earlier stages, iterations numbered globally.
    pub history: Vec<HistoryRow>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions {
    pub resume: bool,
    /// Stop (with a checkpoint) once this many iterations have run in total.
    pub stop_after: Option<usize>,
}

#[derive(Debug)]
pub enum TrainOutcome {
    Finished(Box<ModelArtifact>),
    Stopped { iterations: usize },
}

/// Optimizer, regularizer and quantizer settings of stage `k`. L1 and
/// pruning act in the last stage only.
pub fn stage_config(cfg: &Config, receiver: &Receiver, k: usize) -> TrainConfig {
    let t = &cfg.training;
    let last = k + 1 == t.stages.len();
    TrainConfig {
        opt: OptimizerConfig {
            kind: t.optimizer,
            step_size: t.stages[k].step_size.unwrap_or(t.step_size),
            decay: t.decay,
            batch_size: t.batch_size,
            max_iterations: t.stages[k].iterations,
            seed: derive_seed(cfg.seed_of(stream::TRAINING), &[k as u64]),
        },
        reg: if last {
            RegularizerConfig {
                l1_weight: t.l1_weight,
                prune_threshold: t.prune_threshold,
            }
        } else {
            RegularizerConfig::default()
        },
        fq: match t.fake_quant_bits {
            Some(b) => FakeQuantConfig { bits: b, enabled: true },
            None => FakeQuantConfig::disabled(),
        },
        l1_groups: receiver.sparse_groups(),
        quant_groups: QUANT_GROUPS.to_vec(),
        prune_at_fraction: 0.8,
    }
}

fn write_history(path: &Path, rows: &[HistoryRow]) -> Result<(), CliError> {
    let mut s = String::from("iteration,data_loss,l1_penalty,total_loss,wall_seconds\n");
    for r in rows {
        writeln!(
            s,
            "{},{:e},{:e},{:e},{:.3}",
            r.iteration, r.data_loss, r.l1_penalty, r.total_loss, r.wall_seconds
        )
        .expect("string write");
    }
    write_atomic(path, s.as_bytes())
}

fn global_rows(offset: usize, rows: &[HistoryRow]) -> impl Iterator<Item = HistoryRow> + '_ {
    rows.iter().map(move |r| HistoryRow {
        iteration: offset + r.iteration,
        ..r.clone()
    })
}

/// Runs the training stages and writes the artifact and history.
pub fn train(cfg: &Config, out: &Path, opts: TrainOptions) -> Result<TrainOutcome, CliError> {
    let _lock = DirLock::acquire(out)?;
    let ds = open_dataset(cfg, out)?;
    let scn = cfg.scenario();
    let rx_taps = scn.rx_taps()?;
    let init = Receiver::initial(cfg)?;
    let digest = cfg.digest();
    let ckpt_path = checkpoint_path(out);

    let mut ck = if opts.resume && ckpt_path.exists() {
        let ck: Checkpoint = read_json(&ckpt_path)?;
        if ck.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(CliError::Integrity(format!(
                "checkpoint schema version {} is not supported (expected {CHECKPOINT_SCHEMA_VERSION})",
                ck.schema_version
            )));
        }
        if ck.config_digest != digest {
            return Err(CliError::Config("checkpoint belongs to a different configuration".into()));
        }
        ck
    } else {
        Checkpoint {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            config_digest: digest.clone(),
            stage: 0,
            state: TrainState::new(init.params()),
            offset: 0,
            history: vec![],
        }
    };

    let guard = init.guard_symbols(&scn, cfg.evaluation.guard_margin_symbols);
    let stages = &cfg.training.stages;
    while ck.stage < stages.len() {
        let k = ck.stage;
        if ds.n_groups(Split::Train) <= k {
            return Err(CliError::Config(format!("the data set has no training frames for stage {k}")));
        }
        let tcfg = stage_config(cfg, &init, k);
        let data = WindowSource {
            frames: ds.frames(Split::Train, k)?,
            window_symbols: cfg.training.window_symbols,
            guard_symbols: guard,
            seed: tcfg.opt.seed,
        };
        let budget = stages[k].iterations;
        while ck.state.iteration < budget {
            let every = match cfg.training.checkpoint_every {
                0 => budget,
                n => n,
            };
            let mut stop = (ck.state.iteration + every).min(budget);
            let mut halt = false;
            if let Some(limit) = opts.stop_after {
                if ck.offset + stop >= limit {
                    stop = limit.saturating_sub(ck.offset).max(ck.state.iteration).min(stop);
                    halt = true;
                }
            }
            init.train(&data, &rx_taps, &tcfg, &mut ck.state, stop)?;
            if halt || cfg.training.checkpoint_every > 0 {
                write_json(&ckpt_path, &ck)?;
            }
            if halt {
                return Ok(TrainOutcome::Stopped {
                    iterations: ck.offset + ck.state.iteration,
                });
            }
        }
        let rows: Vec<HistoryRow> = global_rows(ck.offset, &ck.state.history).collect();
        ck.history.extend(rows);
        ck.offset += ck.state.iteration;
        ck.state = TrainState::new(ck.state.best_params.clone());
        ck.stage += 1;
        if cfg.training.checkpoint_every > 0 {
            write_json(&ckpt_path, &ck)?;
        }
    }

    let mut params = ck.state.params.clone();
    for e in params.entries_mut() {
        e.mask = None;
    }
    let quantization = match cfg.training.fake_quant_bits {
        Some(bits) => {
            let scales = params
                .entries()
                .iter()
                .filter(|e| QUANT_GROUPS.contains(&e.group))
                .map(|e| QuantScale {
                    name: e.name.clone(),
                    scale: max_abs_scale(&e.values),
                })
                .collect();
            params = quantize_params(&params, &QUANT_GROUPS, bits)?;
            Some(Quantization {
                bits,
                groups: QUANT_GROUPS.to_vec(),
                scales,
            })
        }
        None => None,
    };
    let artifact = ModelArtifact::new(
        init.architecture(),
        &params,
        quantization,
        Provenance {
            config_digest: digest,
            data_digest: ds.manifest.data_digest.clone(),
            seed: cfg.seed,
            training_seed: cfg.seed_of(stream::TRAINING),
            iterations: ck.offset,
        },
    );
    write_history(&out.join("history.csv"), &ck.history)?;
    artifact.save(&model_path(out))?;
    Ok(TrainOutcome::Finished(Box::new(artifact)))
}

/// Rebuilds the receiver stored in an artifact.
pub fn receiver_of(a: &ModelArtifact) -> Result<Receiver, CliError> {
    Receiver::skeleton(&a.architecture)?.with_params(&a.params()?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerPoint {
    pub power_dbm: f64,
    pub eff_snr_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Complexity {
    pub real_mults_per_sample: usize,
    pub total_taps: usize,
    pub rule: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub schema_version: u32,
    pub config_digest: String,
    pub model_digest: String,
    pub per_power: Vec<PowerPoint>,
    pub complexity: Complexity,
    pub sparsity: PruneReport,
}

/// Complexity of a receiver. Plain DBP uses the folded-filter rule; subband
/// DBP counts per subband-rate instant 4 real multiplications per complex
/// tap of every subband filter, one per nonzero coupling coefficient and two
/// per subband for the phase rotation.
pub fn complexity(receiver: &Receiver) -> Complexity {
    match receiver {
        Receiver::Dbp(m) => {
            let r = complexity_for_taps(&m.tap_counts(), &ComplexityRule::default());
            Complexity {
                real_mults_per_sample: r.real_mults_per_sample,
                total_taps: r.total_taps,
                rule: r.rule,
            }
        }
        Receiver::Subband { model, .. } => {
            let taps: usize = receiver.tap_counts().iter().sum();
            let p = model.to_params();
            let nonzero_coupling: usize = p
                .entries()
                .iter()
                .filter(|e| e.group == ParamGroup::Coupling)
                .map(|e| e.values.iter().filter(|v| **v != 0.0).count())
                .sum();
            let s = model.n_subbands();
            Complexity {
                real_mults_per_sample: 4 * taps + nonzero_coupling + 2 * s * model.steps.len(),
                total_taps: taps,
                rule: "real multiplications per subband-rate instant: 4 per complex tap, 1 per nonzero coupling coefficient, 2 per subband phase rotation".into(),
            }
        }
    }
}

fn check_grid(arch: &Architecture, cfg: &Config) -> Result<(), CliError> {
    let scn = cfg.scenario();
    let (rate, sps) = match arch {
        Architecture::Dbp {
            sample_rate_hz,
            samples_per_symbol,
            ..
        }
        | Architecture::Subband {
            sample_rate_hz,
            samples_per_symbol,
            ..
        } => (*sample_rate_hz, *samples_per_symbol),
    };
    if (rate - scn.rx_rate()).abs() > 1e-9 * rate.abs() || sps != scn.rx_sps {
        return Err(CliError::Config(format!(
            "model grid ({rate} Hz, {sps} samples/symbol) does not match the data set ({} Hz, {} samples/symbol)",
            scn.rx_rate(),
            scn.rx_sps
        )));
    }
    Ok(())
}

/// Effective SNR of the trained model at every sweep power.
pub fn evaluate(cfg: &Config, out: &Path) -> Result<EvaluationReport, CliError> {
    let _lock = DirLock::acquire(out)?;
    let ds = open_dataset(cfg, out)?;
    let artifact = ModelArtifact::load(&model_path(out))?;
    check_grid(&artifact.architecture, cfg)?;
    let receiver = receiver_of(&artifact)?;
    let scn = cfg.scenario();
    let rx_taps = scn.rx_taps()?;
    let guard = receiver.guard_symbols(&scn, cfg.evaluation.guard_margin_symbols);
    let mut per_power = vec![];
    for j in 0..ds.n_groups(Split::Eval) {
        let frames = ds.frames(Split::Eval, j)?;
        per_power.push(PowerPoint {
            power_dbm: ds.group_power(Split::Eval, j).unwrap_or(f64::NAN),
            eff_snr_db: receiver.evaluate(&frames, &rx_taps, guard)?,
        });
    }
    let report = EvaluationReport {
        schema_version: EVALUATION_SCHEMA_VERSION,
        config_digest: cfg.digest(),
        model_digest: artifact.digest.clone(),
        per_power,
        complexity: complexity(&receiver),
        sparsity: artifact.params()?.sparsity(&receiver.sparse_groups()),
    };
    write_json(&out.join("evaluation.json"), &report)?;
    let mut csv = String::from("power_dbm,eff_snr_db\n");
    for p in &report.per_power {
        writeln!(csv, "{},{}", p.power_dbm, p.eff_snr_db).expect("string write");
    }
    write_atomic(&out.join("evaluation.csv"), csv.as_bytes())?;
    Ok(report)
}

/// Copies the verified artifact of `out` to `dest`.
pub fn export(out: &Path, dest: &Path) -> Result<ModelArtifact, CliError> {
    let a = ModelArtifact::load(&model_path(out))?;
    a.save(dest)?;
    Ok(a)
}

/// Verifies `src` and installs it as the model of `out`.
pub fn import(out: &Path, src: &Path) -> Result<ModelArtifact, CliError> {
    let a = ModelArtifact::load(src)?;
    let _lock = DirLock::acquire(out)?;
    a.save(&model_path(out))?;
    Ok(a)
}

/// Human-readable summary of the model and its last evaluation.
pub fn report(out: &Path) -> Result<String, CliError> {
    let artifact = ModelArtifact::load(&model_path(out))?;
    let receiver = receiver_of(&artifact)?;
    let mut s = String::new();
    let arch = serde_json::to_string(&artifact.architecture).map_err(|e| CliError::Io(e.to_string()))?;
    writeln!(s, "model {}", artifact.digest).expect("string write");
    writeln!(s, "architecture {arch}").expect("string write");
    writeln!(s, "trained iterations {}", artifact.provenance.iterations).expect("string write");
    if let Some(q) = &artifact.quantization {
        writeln!(s, "quantized to {} bits", q.bits).expect("string write");
    }
    let c = complexity(&receiver);
    writeln!(s, "total taps {}", c.total_taps).expect("string write");
    writeln!(s, "real multiplications per sample {}", c.real_mults_per_sample).expect("string write");
    writeln!(s, "  ({})", c.rule).expect("string write");
    let sp = artifact.params()?.sparsity(&receiver.sparse_groups());
    writeln!(s, "zeros {}/{} ({:.1}%)", sp.zeros, sp.total, 100.0 * sp.fraction).expect("string write");
    let eval = out.join("evaluation.json");
    if eval.exists() {
        let r: EvaluationReport = read_json(&eval)?;
        if r.model_digest != artifact.digest {
            writeln!(s, "evaluation.json is stale (different model)").expect("string write");
        } else {
            writeln!(s, "power_dbm  eff_snr_db").expect("string write");
            for p in &r.per_power {
                writeln!(s, "{:9.2}  {:10.2}", p.power_dbm, p.eff_snr_db).expect("string write");
            }
        }
    }
    write_atomic(&out.join("report.txt"), s.as_bytes())?;
    Ok(s)
}
