//! Run manifests written next to every command's outputs.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::Value;

use super::CliError;
use crate::glup::SolveReport;

/// Convergence summary of the solver a command ran, if any.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct SolverSummary {
    pub iterations: usize,
    pub converged: bool,
    pub primal_residual: Option<f64>,
    pub dual_residual: Option<f64>,
    pub objective: Option<f64>,
}

impl From<&SolveReport> for SolverSummary {
    fn from(r: &SolveReport) -> Self {
        Self {
            iterations: r.iterations,
            converged: r.converged,
            primal_residual: Some(r.final_primal_residual),
            dual_residual: Some(r.final_dual_residual),
            objective: Some(r.objective_value),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    /// Every flag with defaults resolved.
    pub params: Value,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub duration_seconds: f64,
    pub solver: Option<SolverSummary>,
    /// Command-specific results (counts, metrics, realized SNR, ...).
    pub results: Value,
}

/// Collects what a command produced while it runs.
pub(crate) struct ManifestBuilder {
    started: Instant,
    out_dir: PathBuf,
    manifest: RunManifest,
}

impl ManifestBuilder {
    pub fn new(command: &str, params: &impl Serialize, seed: Option<u64>, out_dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(out_dir).map_err(|source| CliError::Io {
            path: out_dir.to_path_buf(),
            source,
        })?;
        Ok(Self {
            started: Instant::now(),
            out_dir: out_dir.to_path_buf(),
            manifest: RunManifest {
                command: command.to_string(),
                params: serde_json::to_value(params).map_err(CliError::Json)?,
                seed,
                inputs: Vec::new(),
                outputs: Vec::new(),
                duration_seconds: 0.0,
                solver: None,
                results: Value::Object(Default::default()),
            },
        })
    }

    pub fn input(&mut self, path: &Path) {
        self.manifest.inputs.push(path.to_path_buf());
    }

    /// Path of an output file inside the output directory, recorded in the
    /// manifest.
    pub fn output(&mut self, name: &str) -> PathBuf {
        let path = self.out_dir.join(name);
        self.manifest.outputs.push(path.clone());
        path
    }

    pub fn solver(&mut self, summary: SolverSummary) {
        self.manifest.solver = Some(summary);
    }

    pub fn result(&mut self, key: &str, value: impl Serialize) -> Result<(), CliError> {
        let value = serde_json::to_value(value).map_err(CliError::Json)?;
        if let Value::Object(map) = &mut self.manifest.results {
            map.insert(key.to_string(), value);
        }
        Ok(())
    }

    /// Writes `manifest.json` and returns whether every solver converged.
    pub fn finish(mut self) -> Result<bool, CliError> {
        self.manifest.duration_seconds = self.started.elapsed().as_secs_f64();
        let path = self.out_dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&self.manifest).map_err(CliError::Json)?;
        fs::write(&path, text + "\n").map_err(|source| CliError::Io { path, source })?;
        Ok(self.manifest.solver.as_ref().is_none_or(|s| s.converged))
    }
}
