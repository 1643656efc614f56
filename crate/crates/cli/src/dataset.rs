//! On-disk data sets: one JSON file per frame plus a manifest with every seed
//! and the digest of every file.

use std::path::Path;

use ldbp::experiment::{generate_frame, Frame, Scenario};
use ldbp::rng::derive_seed;
use ldbp::signal::{ComplexSignal, Qam, SamplingGrid, SymbolFrame};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{stream, Config};
use crate::io::{file_digest, read_json, write_json};
use crate::CliError;

pub const DATASET_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub file: String,
    pub split: Split,
    /// Training stage or sweep point the frame belongs to.
    pub group: usize,
    pub power_dbm: f64,
    pub seed: u64,
    pub index: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub data_digest: String,
    pub scenario: Scenario,
    pub frames: Vec<FrameEntry>,
}

/// Complex arrays are stored as interleaved `(re, im)` pairs per polarization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameFile {
    pub schema_version: u32,
    pub power_dbm: f64,
    pub seed: u64,
    pub index: u64,
    pub modulation_order: usize,
    pub sample_rate_hz: f64,
    pub samples_per_symbol: usize,
    /// Matched-filter amplitude of a unit symbol.
    pub gain: f64,
    pub tx: Vec<Vec<f64>>,
    pub rx: Vec<Vec<f64>>,
}

fn pairs(v: &[Complex64]) -> Vec<f64> {
    v.iter().flat_map(|c| [c.re, c.im]).collect()
}

fn unpairs(v: &[f64]) -> Result<Vec<Complex64>, CliError> {
    if v.len() % 2 != 0 {
        return Err(CliError::Integrity("complex array of odd length".into()));
    }
    Ok(v.chunks_exact(2).map(|c| Complex64::new(c[0], c[1])).collect())
}

impl FrameFile {
    pub fn from_frame(f: &Frame, power_dbm: f64, seed: u64, index: u64, order: usize) -> Self {
        Self {
            schema_version: DATASET_SCHEMA_VERSION,
            power_dbm,
            seed,
            index,
            modulation_order: order,
            sample_rate_hz: f.rx.grid.sample_rate(),
            samples_per_symbol: f.rx.grid.samples_per_symbol(),
            gain: f.gain,
            tx: f.tx.symbols.iter().map(|p| pairs(p)).collect(),
            rx: f.rx.pols().map(|p| pairs(p)).collect(),
        }
    }

    pub fn to_frame(&self) -> Result<Frame, CliError> {
        if self.schema_version != DATASET_SCHEMA_VERSION {
            return Err(CliError::Integrity(format!(
                "frame schema version {} is not supported (expected {DATASET_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let rx = self.rx.iter().map(|p| unpairs(p)).collect::<Result<Vec<_>, _>>()?;
        let tx = self.tx.iter().map(|p| unpairs(p)).collect::<Result<Vec<_>, _>>()?;
        let n = rx.first().map_or(0, |p| p.len());
        let grid = SamplingGrid::new(self.sample_rate_hz, n, self.samples_per_symbol)?;
        Ok(Frame {
            tx: SymbolFrame {
                symbols: tx,
                modulation: Some(Qam::new(self.modulation_order)?),
                normalized: true,
            },
            rx: ComplexSignal::from_pols(grid, rx)?,
            gain: self.gain,
        })
    }
}

struct Job {
    split: Split,
    group: usize,
    power_dbm: f64,
    seed: u64,
    index: u64,
}

fn jobs(cfg: &Config) -> Vec<Job> {
    let mut out = vec![];
    for (k, st) in cfg.training.stages.iter().enumerate() {
        let seed = derive_seed(cfg.seed_of(stream::TRAIN_DATA), &[k as u64]);
        for i in 0..cfg.dataset.train_frames {
            out.push(Job { split: Split::Train, group: k, power_dbm: st.power_dbm, seed, index: i as u64 });
        }
    }
    for (j, p) in cfg.dataset.sweep_dbm.iter().enumerate() {
        let seed = derive_seed(cfg.seed_of(stream::EVAL_DATA), &[j as u64]);
        for i in 0..cfg.dataset.eval_frames {
            out.push(Job { split: Split::Eval, group: j, power_dbm: *p, seed, index: i as u64 });
        }
    }
    out
}

fn file_name(j: &Job) -> String {
    let split = match j.split {
        Split::Train => "train",
        Split::Eval => "eval",
    };
    format!("frames/{split}_{:02}_{:04}.json", j.group, j.index)
}

/// Generates every frame of the configuration into `dir`.
pub fn simulate(cfg: &Config, dir: &Path) -> Result<Manifest, CliError> {
    let scn = cfg.scenario();
    let entries = jobs(cfg)
        .par_iter()
        .map(|j| {
            let frame = generate_frame(&scn, j.power_dbm, j.seed, j.index)?;
            let file = file_name(j);
            let path = dir.join(&file);
            write_json(&path, &FrameFile::from_frame(&frame, j.power_dbm, j.seed, j.index, scn.modulation))?;
            Ok(FrameEntry {
                sha256: file_digest(&path)?,
                file,
                split: j.split,
                group: j.group,
                power_dbm: j.power_dbm,
                seed: j.seed,
                index: j.index,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let manifest = Manifest {
        schema_version: DATASET_SCHEMA_VERSION,
        data_digest: cfg.data_digest(),
        scenario: scn,
        frames: entries,
    };
    write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

pub struct Dataset {
    pub manifest: Manifest,
    dir: std::path::PathBuf,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self, CliError> {
        let manifest: Manifest = read_json(&dir.join(MANIFEST))?;
        if manifest.schema_version != DATASET_SCHEMA_VERSION {
            return Err(CliError::Integrity(format!(
                "data set schema version {} is not supported (expected {DATASET_SCHEMA_VERSION})",
                manifest.schema_version
            )));
        }
        Ok(Self { manifest, dir: dir.to_path_buf() })
    }

    /// Loads the frames of one split and group, verifying their digests.
    pub fn frames(&self, split: Split, group: usize) -> Result<Vec<Frame>, CliError> {
        self.manifest
            .frames
            .par_iter()
            .filter(|e| e.split == split && e.group == group)
            .map(|e| {
                let path = self.dir.join(&e.file);
                let d = file_digest(&path)?;
                if d != e.sha256 {
                    return Err(CliError::Integrity(format!("{}: digest mismatch", e.file)));
                }
                read_json::<FrameFile>(&path)?.to_frame()
            })
            .collect()
    }

    pub fn group_power(&self, split: Split, group: usize) -> Option<f64> {
        self.manifest
            .frames
            .iter()
            .find(|e| e.split == split && e.group == group)
            .map(|e| e.power_dbm)
    }

    pub fn n_groups(&self, split: Split) -> usize {
        self.manifest
            .frames
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.group + 1)
            .max()
            .unwrap_or(0)
    }
}
