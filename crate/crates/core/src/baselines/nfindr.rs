//! N-FINDR: pick the `m` pixels spanning the largest simplex in the
//! `(m - 1)`-dimensional principal subspace.

use nalgebra::{DMatrix, SVD};
use rand::seq::index::sample;

use crate::error::{Result, UnmixError};
use crate::scene::SpectralScene;
use crate::selection::EndmemberSet;
use crate::synth::stream_rng;

pub const DEFAULT_MAX_SWEEPS: usize = 50;

const STREAM_NFINDR_SEED: u64 = 11;

#[derive(Debug, Clone, PartialEq)]
pub struct NfindrResult {
    /// Selected pixels in vertex order. `row_scores` holds each vertex's
    /// height above the opposite face in the projected space.
    pub endmembers: EndmemberSet,
    /// Simplex volume (up to the constant `1 / (m - 1)!`) after the
    /// initialization and after every accepted swap.
    pub volume_history: Vec<f64>,
    pub sweeps: usize,
    /// True when the last sweep accepted no swap.
    pub converged: bool,
}

/// Rows are the `m - 1` leading principal components of the mean-centred
/// scene, columns are pixels.
fn project(scene: &SpectralScene, dims: usize) -> Result<DMatrix<f64>> {
    let data = scene.data();
    let mean = data.column_mean();
    let mut centred = data.clone();
    for mut col in centred.column_iter_mut() {
        col -= &mean;
    }
    if dims == 0 {
        return Ok(DMatrix::zeros(0, scene.pixel_count()));
    }
    let svd = SVD::try_new(centred.clone(), true, false, f64::EPSILON, 0)
        .ok_or_else(|| UnmixError::Numerical("SVD of the centred scene did not converge".into()))?;
    let u = svd.u.expect("left singular vectors requested");
    if u.ncols() < dims {
        return Err(UnmixError::InvalidInput(format!(
            "need {dims} principal components but the scene has rank at most {}",
            u.ncols()
        )));
    }
    Ok(u.columns(0, dims).tr_mul(&centred))
}

/// `|det [1; V]|` for the projected vertices `V` (columns).
fn simplex_volume(projected: &DMatrix<f64>, vertices: &[usize]) -> f64 {
    let m = vertices.len();
    let mut mat = DMatrix::zeros(m, m);
    for (c, &p) in vertices.iter().enumerate() {
        mat[(0, c)] = 1.0;
        for r in 1..m {
            mat[(r, c)] = projected[(r - 1, p)];
        }
    }
    mat.lu().determinant().abs()
}

/// Heights of each vertex above its opposite face: `1 / |w_k|` with
/// `(c_k, w_k)` the k-th row of `[1; V]^-1`.
fn vertex_heights(projected: &DMatrix<f64>, vertices: &[usize]) -> Vec<f64> {
    let m = vertices.len();
    let mut mat = DMatrix::zeros(m, m);
    for (c, &p) in vertices.iter().enumerate() {
        mat[(0, c)] = 1.0;
        for r in 1..m {
            mat[(r, c)] = projected[(r - 1, p)];
        }
    }
    match mat.try_inverse() {
        Some(inv) => (0..m)
            .map(|k| {
                let w = inv.row(k).columns(1, m - 1).norm();
                if w > 0.0 {
                    1.0 / w
                } else {
                    f64::INFINITY
                }
            })
            .collect(),
        None => vec![0.0; m],
    }
}

/// Runs N-FINDR with `m` vertices from a seeded random start. Swaps are taken
/// greedily in (pixel, vertex) order whenever they strictly increase the
/// volume.
pub fn nfindr(scene: &SpectralScene, m: usize, seed: u64, max_sweeps: usize) -> Result<NfindrResult> {
    let n = scene.pixel_count();
    if m < 2 {
        return Err(UnmixError::InvalidParameter(format!("N-FINDR needs m >= 2, got {m}")));
    }
    if n < m {
        return Err(UnmixError::InvalidInput(format!("{n} pixels cannot supply {m} endmembers")));
    }
    let projected = project(scene, m - 1)?;
    let mut rng = stream_rng(seed, STREAM_NFINDR_SEED);
    let mut vertices = sample(&mut rng, n, m).into_vec();
    let mut volume = simplex_volume(&projected, &vertices);
    let mut volume_history = vec![volume];

    let mut sweeps = 0;
    let mut converged = false;
    while sweeps < max_sweeps {
        sweeps += 1;
        let mut changed = false;
        for pixel in 0..n {
            if vertices.contains(&pixel) {
                continue;
            }
            for k in 0..m {
                let previous = vertices[k];
                vertices[k] = pixel;
                let trial = simplex_volume(&projected, &vertices);
                if trial > volume {
                    volume = trial;
                    volume_history.push(volume);
                    changed = true;
                    break;
                }
                vertices[k] = previous;
            }
        }
        if !changed {
            converged = true;
            break;
        }
    }

    let scores = vertex_heights(&projected, &vertices);
    let spectra = scene.data().select_columns(vertices.iter());
    Ok(NfindrResult {
        endmembers: EndmemberSet {
            pixel_indices: vertices,
            spectra,
            row_scores: scores,
        },
        volume_history,
        sweeps,
        converged,
    })
}

/// Convenience: the projected coordinates used by [`nfindr`].
pub fn principal_projection(scene: &SpectralScene, dims: usize) -> Result<DMatrix<f64>> {
    project(scene, dims)
}

/// Volume `|det [1; V]|` of the projected simplex on `vertices`.
pub fn projected_volume(projected: &DMatrix<f64>, vertices: &[usize]) -> f64 {
    simplex_volume(projected, vertices)
}
