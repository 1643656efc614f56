//! Versioned, digest-protected model artifacts (pretty JSON).
//!
//! Complex taps are stored as `(re, im)` pairs. Tensors are row-major with the
//! axis meaning spelled out in `axes`. The `digest` field is the SHA-256 of the
//! compact JSON of every other field, so any edited byte is detected on load.

use std::path::Path;

use ldbp::training::{ParamGroup, ParamSet};
use serde::{Deserialize, Serialize};

use crate::io::{sha256_hex, write_atomic};
use crate::CliError;

pub const ARTIFACT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Architecture {
    Dbp {
        sample_rate_hz: f64,
        samples_per_symbol: usize,
        /// Full (odd) tap count of every step.
        taps: Vec<usize>,
    },
    Subband {
        sample_rate_hz: f64,
        samples_per_symbol: usize,
        n_subbands: usize,
        bank_rolloff: f64,
        bank_oversampling: usize,
        filter_len: usize,
        /// Lengths of the coupling stages of every step; one entry is a dense tensor.
        coupling_lens: Vec<usize>,
        n_steps: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactParam {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub axes: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantScale {
    pub name: String,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Quantization {
    pub bits: u32,
    pub groups: Vec<ParamGroup>,
    /// Per-filter clipping scales of the stored (already quantized) values.
    pub scales: Vec<QuantScale>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub config_digest: String,
    pub data_digest: String,
    pub seed: u64,
    pub training_seed: u64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Body {
    schema_version: u32,
    architecture: Architecture,
    parameters: Vec<ArtifactParam>,
    quantization: Option<Quantization>,
    provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelArtifact {
    pub schema_version: u32,
    pub architecture: Architecture,
    pub parameters: Vec<ArtifactParam>,
    pub quantization: Option<Quantization>,
    pub provenance: Provenance,
    pub digest: String,
}

fn axes_of(group: ParamGroup) -> &'static str {
    match group {
        ParamGroup::CdTaps => "[subband,] tap, (re, im)",
        ParamGroup::NlScale => "scalar (rad/W)",
        ParamGroup::Coupling => "out subband, in subband, tap",
        ParamGroup::Rotation => "alpha, psi, beta (rad)",
        ParamGroup::FdTaps => "tap",
        ParamGroup::MimoTaps => "out, in, tap",
    }
}

impl ModelArtifact {
    pub fn new(
        architecture: Architecture,
        params: &ParamSet,
        quantization: Option<Quantization>,
        provenance: Provenance,
    ) -> Self {
        let parameters = params
            .entries()
            .iter()
            .map(|e| ArtifactParam {
                name: e.name.clone(),
                group: e.group,
                shape: e.shape.clone(),
                axes: axes_of(e.group).to_string(),
                values: e.values.clone(),
            })
            .collect();
        let mut a = Self {
            schema_version: ARTIFACT_SCHEMA_VERSION,
            architecture,
            parameters,
            quantization,
            provenance,
            digest: String::new(),
        };
        a.digest = a.compute_digest();
        a
    }

    fn compute_digest(&self) -> String {
        let body = Body {
            schema_version: self.schema_version,
            architecture: self.architecture.clone(),
            parameters: self.parameters.clone(),
            quantization: self.quantization.clone(),
            provenance: self.provenance.clone(),
        };
        sha256_hex(&serde_json::to_vec(&body).expect("artifact serializes"))
    }

    pub fn params(&self) -> Result<ParamSet, CliError> {
        let mut p = ParamSet::new();
        for e in &self.parameters {
            p.push(e.name.clone(), e.group, e.shape.clone(), e.values.clone())
                .map_err(|err| CliError::Integrity(format!("parameter {}: {err}", e.name)))?;
        }
        Ok(p)
    }

    pub fn to_text(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("artifact serializes");
        s.push('\n');
        s
    }

    /// Checks the schema version before the full parse, then the digest.
    pub fn from_text(text: &str) -> Result<Self, CliError> {
        let raw: serde_json::Value =
            serde_json::from_str(text).map_err(|e| CliError::Integrity(format!("artifact is not JSON: {e}")))?;
        match raw.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v == ARTIFACT_SCHEMA_VERSION as u64 => {}
            Some(v) => {
                return Err(CliError::Integrity(format!(
                    "artifact schema version {v} is not supported by this build (expected {ARTIFACT_SCHEMA_VERSION})"
                )))
            }
            None => return Err(CliError::Integrity("artifact has no schema_version".into())),
        }
        let a: ModelArtifact =
            serde_json::from_value(raw).map_err(|e| CliError::Integrity(format!("malformed artifact: {e}")))?;
        let d = a.compute_digest();
        if d != a.digest {
            return Err(CliError::Integrity(format!(
                "artifact digest mismatch: recorded {}, computed {d}",
                a.digest
            )));
        }
        Ok(a)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        write_atomic(path, self.to_text().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ModelArtifact {
        let mut p = ParamSet::new();
        p.push("step0.taps", ParamGroup::CdTaps, vec![2, 2], vec![0.1, -0.2, 1.0 / 3.0, 1e-17])
            .unwrap();
        p.push("step0.nl", ParamGroup::NlScale, vec![1], vec![27.5]).unwrap();
        ModelArtifact::new(
            Architecture::Dbp {
                sample_rate_hz: 20e9,
                samples_per_symbol: 2,
                taps: vec![3],
            },
            &p,
            None,
            Provenance {
                config_digest: "c".into(),
                data_digest: "d".into(),
                seed: 1,
                training_seed: 2,
                iterations: 0,
            },
        )
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let a = sample();
        let t = a.to_text();
        let b = ModelArtifact::from_text(&t).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.to_text(), t);
    }

    #[test]
    fn tampering_is_detected() {
        let t = sample().to_text().replace("27.5", "27.6");
        assert!(matches!(ModelArtifact::from_text(&t), Err(CliError::Integrity(m)) if m.contains("digest")));
    }

    #[test]
    fn newer_schema_is_a_version_error() {
        let t = sample().to_text().replacen("\"schema_version\": 1", "\"schema_version\": 2", 1);
        match ModelArtifact::from_text(&t) {
            Err(CliError::Integrity(m)) => assert!(m.contains("version 2"), "{m}"),
            other => panic!("{other:?}"),
        }
    }
}
