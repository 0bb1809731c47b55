//! Turning an abundance estimate into a list of endmembers.

use nalgebra::DMatrix;

use crate::error::{ensure_dims, Result, UnmixError};
use crate::scene::{AbundanceEstimate, CandidateSet, SpectralScene};

pub const DEFAULT_DETECTION_THRESHOLD: f64 = 0.01;
pub const DEFAULT_MAX_COHERENCE: f64 = 0.95;

/// Detected endmembers, ordered by decreasing score.
#[derive(Debug, Clone, PartialEq)]
pub struct EndmemberSet {
    /// 0-based scene pixel indices.
    pub pixel_indices: Vec<usize>,
    /// `L x M_hat`, the scene columns at `pixel_indices`.
    pub spectra: DMatrix<f64>,
    /// Abundance-row mean of each detection.
    pub row_scores: Vec<f64>,
}

impl EndmemberSet {
    pub fn len(&self) -> usize {
        self.pixel_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixel_indices.is_empty()
    }

    pub(crate) fn from_pixels(scene: &SpectralScene, pixels: Vec<usize>, scores: Vec<f64>) -> Self {
        let spectra = scene.data().select_columns(pixels.iter());
        Self {
            pixel_indices: pixels,
            spectra,
            row_scores: scores,
        }
    }
}

/// Candidates whose abundance-row mean exceeds `threshold`, highest first.
pub fn detect_endmembers(
    abundance: &AbundanceEstimate,
    candidates: &CandidateSet,
    scene: &SpectralScene,
    threshold: f64,
) -> Result<EndmemberSet> {
    if !(threshold > 0.0) {
        return Err(UnmixError::InvalidParameter(format!("threshold {threshold} must be > 0")));
    }
    ensure_dims(
        abundance.x().nrows() == candidates.len() && abundance.x().ncols() == scene.pixel_count(),
        || {
            format!(
                "abundance {:?} does not match {} candidates x {} pixels",
                abundance.x().shape(),
                candidates.len(),
                scene.pixel_count()
            )
        },
    )?;
    candidates.check_against(scene)?;
    let means = abundance.row_means();
    let mut hits: Vec<(usize, f64)> = means
        .iter()
        .enumerate()
        .filter(|(_, &m)| m > threshold)
        .map(|(row, &m)| (row, m))
        .collect();
    // Stable on ties: lower candidate row first.
    hits.sort_by(|a, b| b.1.total_cmp(&a.1));
    let pixels = hits.iter().map(|&(row, _)| candidates.indices()[row]).collect();
    let scores = hits.iter().map(|&(_, m)| m).collect();
    Ok(EndmemberSet::from_pixels(scene, pixels, scores))
}

/// Cosine similarity `<a, b> / (|a| |b|)`.
pub fn mutual_coherence(a: &[f64], b: &[f64]) -> Result<f64> {
    ensure_dims(a.len() == b.len(), || format!("spectra of length {} and {}", a.len(), b.len()))?;
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(UnmixError::InvalidInput("coherence of a zero spectrum".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Greedy redundancy pruning: walking in decreasing score order, keep an
/// endmember only if its coherence with every kept one is `<= max_coherence`.
pub fn deduplicate(endmembers: &EndmemberSet, max_coherence: f64) -> Result<EndmemberSet> {
    if !(max_coherence > 0.0 && max_coherence <= 1.0) {
        return Err(UnmixError::InvalidParameter(format!(
            "max coherence {max_coherence} outside (0, 1]"
        )));
    }
    ensure_dims(
        endmembers.row_scores.len() == endmembers.len() && endmembers.spectra.ncols() == endmembers.len(),
        || "endmember set fields have different lengths".into(),
    )?;
    let mut order: Vec<usize> = (0..endmembers.len()).collect();
    order.sort_by(|&a, &b| endmembers.row_scores[b].total_cmp(&endmembers.row_scores[a]));
    let mut kept: Vec<usize> = Vec::new();
    for k in order {
        let candidate = endmembers.spectra.column(k);
        let mut redundant = false;
        for &other in &kept {
            let c = mutual_coherence(candidate.as_slice(), endmembers.spectra.column(other).as_slice())?;
            if c > max_coherence {
                redundant = true;
                break;
            }
        }
        if !redundant {
            kept.push(k);
        }
    }
    Ok(EndmemberSet {
        pixel_indices: kept.iter().map(|&k| endmembers.pixel_indices[k]).collect(),
        spectra: endmembers.spectra.select_columns(kept.iter()),
        row_scores: kept.iter().map(|&k| endmembers.row_scores[k]).collect(),
    })
}
