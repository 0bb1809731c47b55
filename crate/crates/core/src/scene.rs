//! Dense containers for scenes, candidate dictionaries and abundance estimates.
//!
//! All matrices are column-major `DMatrix<f64>`; a pixel is a column. Pixel
//! indices are 0-based throughout the library and only become 1-based at the
//! command-line boundary.

use std::collections::HashSet;

use nalgebra::DMatrix;

use crate::error::{ensure_dims, ensure_finite, Result, UnmixError};

/// Observed data `S`: `L` spectral bands by `N` pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralScene {
    data: DMatrix<f64>,
}

impl SpectralScene {
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(UnmixError::InvalidInput(format!(
                "scene must have at least one band and one pixel, got {}x{}",
                data.nrows(),
                data.ncols()
            )));
        }
        ensure_finite(data.as_slice(), "scene")?;
        Ok(Self { data })
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.data
    }

    pub fn band_count(&self) -> usize {
        self.data.nrows()
    }

    pub fn pixel_count(&self) -> usize {
        self.data.ncols()
    }

    /// Candidate set made of every pixel, i.e. `S_ω = S`.
    pub fn all_candidates(&self) -> CandidateSet {
        CandidateSet {
            indices: (0..self.pixel_count()).collect(),
            columns: self.data.clone(),
        }
    }
}

/// A column subset `ω` of the scene together with the restricted matrix `S_ω`.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    indices: Vec<usize>,
    columns: DMatrix<f64>,
}

impl CandidateSet {
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn columns(&self) -> &DMatrix<f64> {
        &self.columns
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Checks that this set could have been drawn from `scene`.
    pub(crate) fn check_against(&self, scene: &SpectralScene) -> Result<()> {
        ensure_dims(self.columns.nrows() == scene.band_count(), || {
            format!(
                "candidates have {} bands but the scene has {}",
                self.columns.nrows(),
                scene.band_count()
            )
        })?;
        if let Some(&bad) = self.indices.iter().find(|&&i| i >= scene.pixel_count()) {
            return Err(UnmixError::InvalidIndex {
                index: bad,
                pixel_count: scene.pixel_count(),
            });
        }
        Ok(())
    }
}

/// Builds `S_ω` from a list of 0-based pixel indices, preserving their order.
pub fn restrict_columns(scene: &SpectralScene, indices: &[usize]) -> Result<CandidateSet> {
    if indices.is_empty() {
        return Err(UnmixError::InvalidInput("candidate set must not be empty".into()));
    }
    let n = scene.pixel_count();
    let mut seen = HashSet::with_capacity(indices.len());
    for &i in indices {
        if i >= n {
            return Err(UnmixError::InvalidIndex { index: i, pixel_count: n });
        }
        if !seen.insert(i) {
            return Err(UnmixError::DuplicateIndex(i));
        }
    }
    let columns = scene.data().select_columns(indices.iter());
    Ok(CandidateSet {
        indices: indices.to_vec(),
        columns,
    })
}

/// Abundance matrix `X` (`N'` candidates by `N` pixels) certified against the
/// nonnegativity and sum-to-one constraints at `feasibility_tolerance`.
#[derive(Debug, Clone, PartialEq)]
pub struct AbundanceEstimate {
    x: DMatrix<f64>,
    feasibility_tolerance: f64,
}

impl AbundanceEstimate {
    /// Wraps `x` after checking every entry is `>= -tol` and every column sums
    /// to 1 within `tol`.
    pub fn certify(x: DMatrix<f64>, tol: f64) -> Result<Self> {
        let (min_entry, worst_sum) = feasibility_violation(&x);
        if min_entry < -tol || worst_sum > tol {
            return Err(UnmixError::Numerical(format!(
                "abundance matrix violates constraints: min entry {min_entry:.3e}, \
                 worst column-sum error {worst_sum:.3e}, tolerance {tol:.3e}"
            )));
        }
        Ok(Self {
            x,
            feasibility_tolerance: tol,
        })
    }

    /// Wraps `x` and records the tolerance at which it is actually feasible.
    pub fn with_measured_tolerance(x: DMatrix<f64>) -> Self {
        let (min_entry, worst_sum) = feasibility_violation(&x);
        let tol = worst_sum.max(-min_entry).max(0.0);
        Self {
            x,
            feasibility_tolerance: tol,
        }
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.x
    }

    pub fn feasibility_tolerance(&self) -> f64 {
        self.feasibility_tolerance
    }

    /// Arithmetic mean of each row, the per-candidate endmember score.
    pub fn row_means(&self) -> Vec<f64> {
        row_means(&self.x)
    }
}

pub(crate) fn row_means(x: &DMatrix<f64>) -> Vec<f64> {
    let n = x.ncols() as f64;
    x.row_iter().map(|r| r.sum() / n).collect()
}

/// Returns (smallest entry, largest |column sum - 1|).
pub fn feasibility_violation(x: &DMatrix<f64>) -> (f64, f64) {
    let min_entry = x.iter().copied().fold(f64::INFINITY, f64::min);
    let worst_sum = x
        .column_iter()
        .map(|c| (c.sum() - 1.0).abs())
        .fold(0.0, f64::max);
    (min_entry, worst_sum)
}

/// Ground truth of a synthetic scene: `S̃ = R A`.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGroundTruth {
    /// `R`, bands by endmembers.
    pub endmember_spectra: DMatrix<f64>,
    /// `A`, endmembers by pixels.
    pub true_abundances: DMatrix<f64>,
    /// 0-based pixel index of each endmember's pure pixel, in endmember order.
    pub endmember_pixel_indices: Vec<usize>,
    pub noise_sigma: f64,
    /// The noise-free scene `R A`.
    pub clean_scene: DMatrix<f64>,
}

impl SceneGroundTruth {
    /// Embeds `A` into the `N' x N` self-dictionary coordinates of `candidates`:
    /// row `i` holds the abundance map of the endmember whose pure pixel is
    /// `candidates[i]`, and is zero otherwise.
    pub fn embedded_abundances(&self, candidates: &CandidateSet) -> DMatrix<f64> {
        let n = self.true_abundances.ncols();
        let mut x = DMatrix::zeros(candidates.len(), n);
        for (row, pixel) in candidates.indices().iter().enumerate() {
            if let Some(k) = self.endmember_pixel_indices.iter().position(|p| p == pixel) {
                x.row_mut(row).copy_from(&self.true_abundances.row(k));
            }
        }
        x
    }
}
