//! Run manifests: a JSON record of one transfer run — resolved
//! configuration, input paths, and final per-term losses — that can be
//! saved next to the output and replayed later.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{TermReport, TransferConfig};
use crate::optim::Trace;

/// Input file paths of a transfer run, as given on the command line.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestInputs {
    pub network: PathBuf,
    pub before: PathBuf,
    pub reference: PathBuf,
    pub labels_before: PathBuf,
    pub labels_ref: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub landmarks_before: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub landmarks_ref: Option<PathBuf>,
}

/// Everything needed to reproduce and audit one transfer run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: TransferConfig,
    pub inputs: ManifestInputs,
    pub output: PathBuf,
    pub iterations_run: usize,
    pub final_total: f64,
    pub final_terms: Vec<TermReport>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl RunManifest {
    pub fn from_trace(
        config: TransferConfig,
        inputs: ManifestInputs,
        output: PathBuf,
        trace: &Trace,
    ) -> Result<Self> {
        let last = trace
            .rows
            .last()
            .ok_or_else(|| Error::Internal("empty trace in manifest".into()))?;
        let final_terms = trace
            .term_names
            .iter()
            .zip(&last.terms)
            .map(|(name, &raw)| TermReport {
                name: name.clone(),
                raw,
                weight: term_weight(&config, name),
            })
            .collect();
        Ok(RunManifest {
            config,
            inputs,
            output,
            iterations_run: trace.rows.len(),
            final_total: last.total,
            final_terms,
            warnings: trace.warnings.clone(),
        })
    }
}

/// The configured weight applied to a named objective term.
fn term_weight(cfg: &TransferConfig, name: &str) -> f64 {
    use crate::losses::{
        REGION_EYESHADOW_L, REGION_EYESHADOW_R, REGION_FOUNDATION, REGION_LIP_LOWER,
        REGION_LIP_UPPER,
    };
    match name {
        "structure" => cfg.lambda_s,
        "tv" => cfg.tv_weight,
        REGION_FOUNDATION => cfg.lambda_f,
        REGION_LIP_UPPER | REGION_LIP_LOWER => cfg.lambda_l,
        REGION_EYESHADOW_L | REGION_EYESHADOW_R => cfg.lambda_e,
        _ => 0.0,
    }
}

pub fn load_manifest(path: &Path) -> Result<RunManifest> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

pub fn save_manifest(manifest: &RunManifest, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::Internal(e.to_string()))?;
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}
