//! Detection-rate trials behind `bench-detect`.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::Result;
use crate::nglup::{nglup_solve, NglupConfig};
use crate::selection::detect_endmembers;
use crate::synth::{abundance_rmse, synthesize_scene, SynthConfig};

/// One synthesize / solve / count trial. The GLUP fields describe the warm
/// start NGLUP ran from, which is a full GLUP solve with the same `mu`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialOutcome {
    pub snr_db: f64,
    pub seed: u64,
    /// Rows of the NGLUP abundance matrix whose mean exceeds the threshold.
    pub m_hat: usize,
    /// Detected 0-based pixel indices in descending row-mean order.
    pub detected: Vec<usize>,
    pub rmse: f64,
    pub converged: bool,
    pub outer_iterations: usize,
    pub glup_m_hat: usize,
    pub glup_rmse: f64,
    pub glup_converged: bool,
}

/// Synthesizes the scene for `synth`, runs NGLUP on every pixel as a
/// candidate and counts rows above `threshold`.
pub fn run_detection_trial(synth: &SynthConfig, config: &NglupConfig, threshold: f64) -> Result<TrialOutcome> {
    let (scene, truth) = synthesize_scene(synth)?;
    let candidates = scene.all_candidates();
    let out = nglup_solve(&scene, &candidates, config)?;
    let reference = truth.embedded_abundances(&candidates);
    let detected = detect_endmembers(&out.report.abundance, &candidates, &scene, threshold)?;
    let glup_detected = detect_endmembers(&out.warm_start.abundance, &candidates, &scene, threshold)?;
    Ok(TrialOutcome {
        snr_db: synth.snr_db,
        seed: synth.seed,
        m_hat: detected.len(),
        detected: detected.pixel_indices,
        rmse: abundance_rmse(out.report.abundance.x(), &reference)?,
        converged: out.report.converged,
        outer_iterations: out.outer_iterations,
        glup_m_hat: glup_detected.len(),
        glup_rmse: abundance_rmse(out.warm_start.abundance.x(), &reference)?,
        glup_converged: out.warm_start.converged,
    })
}

/// One row of the detection table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectionRate {
    pub snr_db: f64,
    pub m_hat: usize,
    pub probability: f64,
    pub trials: usize,
}

/// Empirical `P(M_hat = k)` per SNR for every observed `k`. SNRs keep their
/// first-appearance order and `k` ascends within each.
pub fn tabulate(outcomes: &[TrialOutcome]) -> Vec<DetectionRate> {
    let mut snrs: Vec<f64> = Vec::new();
    for o in outcomes {
        if !snrs.iter().any(|s| s.to_bits() == o.snr_db.to_bits()) {
            snrs.push(o.snr_db);
        }
    }
    let mut rows = Vec::new();
    for snr in snrs {
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        let group: Vec<_> = outcomes.iter().filter(|o| o.snr_db.to_bits() == snr.to_bits()).collect();
        for o in &group {
            *counts.entry(o.m_hat).or_default() += 1;
        }
        for (m_hat, count) in counts {
            rows.push(DetectionRate {
                snr_db: snr,
                m_hat,
                probability: count as f64 / group.len() as f64,
                trials: group.len(),
            });
        }
    }
    rows
}
