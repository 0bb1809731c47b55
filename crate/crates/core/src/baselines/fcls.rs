//! Fully constrained least squares: per-pixel `min 0.5 |s - R a|^2` over the
//! probability simplex.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{ensure_dims, ensure_finite, Result, UnmixError};
use crate::prox::project_simplex_in_place;
use crate::scene::SpectralScene;

/// Bound on the projected-gradient residual `|a - P(a - g)|` at acceptance.
pub const FCLS_KKT_TOLERANCE: f64 = 1e-6;

const FALLBACK_ITERATIONS: usize = 50_000;

#[derive(Debug, Clone, PartialEq)]
pub struct FclsResult {
    /// `M x N`, one simplex point per pixel.
    pub abundances: DMatrix<f64>,
    /// `|s_j - R a_j|_2` per pixel.
    pub per_pixel_residual: DVector<f64>,
    /// Certified KKT residual per pixel.
    pub kkt_residual: DVector<f64>,
}

/// `|a - P(a - g)|_2`, zero exactly at the simplex-constrained minimizers of
/// a convex function with gradient `g` at `a`.
pub fn simplex_kkt_residual(a: &DVector<f64>, gradient: &DVector<f64>) -> f64 {
    let mut p: Vec<f64> = a.iter().zip(gradient.iter()).map(|(x, g)| x - g).collect();
    project_simplex_in_place(&mut p);
    a.iter().zip(&p).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Minimizer of the quadratic on the affine hull of the vertices in `support`
/// together with the multiplier `nu` of `1^T y = 1` (`G y - b = -nu 1` on the
/// support). `None` when those vertices are affinely dependent.
pub(crate) fn solve_on_support(
    gram: &DMatrix<f64>,
    b: &DVector<f64>,
    support: &[usize],
) -> Option<(DVector<f64>, f64)> {
    let k = support.len();
    let mut kkt = DMatrix::zeros(k + 1, k + 1);
    let mut rhs = DVector::zeros(k + 1);
    for (r, &i) in support.iter().enumerate() {
        for (c, &j) in support.iter().enumerate() {
            kkt[(r, c)] = gram[(i, j)];
        }
        kkt[(r, k)] = 1.0;
        kkt[(k, r)] = 1.0;
        rhs[r] = b[i];
    }
    rhs[k] = 1.0;
    let scale = kkt.amax().max(1.0);
    let sol = kkt.clone().full_piv_lu().solve(&rhs)?;
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    // Reject numerically singular systems.
    let residual = (&kkt * &sol - &rhs).amax();
    if residual > 1e-9 * scale * sol.amax().max(1.0) {
        return None;
    }
    let mut y = DVector::zeros(gram.nrows());
    for (r, &i) in support.iter().enumerate() {
        y[i] = sol[r];
    }
    Some((y, sol[k]))
}

/// Primal active-set iterations from the best vertex. Returns `None` when a
/// degenerate working set is met.
fn active_set(gram: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let m = gram.nrows();
    let start = (0..m)
        .min_by(|&i, &j| (0.5 * gram[(i, i)] - b[i]).total_cmp(&(0.5 * gram[(j, j)] - b[j])))
        .expect("at least one endmember");
    let mut a = DVector::zeros(m);
    a[start] = 1.0;
    let mut free = vec![start];
    let scale = gram.amax().max(b.amax()).max(f64::MIN_POSITIVE);

    for _ in 0..(10 * m + 20) {
        let (y, nu) = solve_on_support(gram, b, &free)?;
        if free.iter().all(|&i| y[i] >= 0.0) {
            a = y;
            let gradient = gram * &a - b;
            let entering = (0..m)
                .filter(|i| !free.contains(i))
                .map(|i| (i, gradient[i] + nu))
                .min_by(|x, y| x.1.total_cmp(&y.1));
            match entering {
                Some((i, multiplier)) if multiplier < -1e-14 * scale => free.push(i),
                _ => return Some(a),
            }
        } else {
            let mut step = 1.0f64;
            for &i in &free {
                if y[i] < 0.0 {
                    step = step.min(a[i] / (a[i] - y[i]));
                }
            }
            a += (&y - &a) * step;
            let blocking = free
                .iter()
                .copied()
                .min_by(|&i, &j| a[i].total_cmp(&a[j]))
                .expect("nonempty support");
            free.retain(|&i| i != blocking && a[i] > 0.0);
            for i in 0..m {
                if !free.contains(&i) {
                    a[i] = 0.0;
                }
            }
            let total = a.sum();
            a /= total;
        }
    }
    None
}

/// Accelerated projected gradient from `a`, for degenerate pixels.
fn projected_gradient(gram: &DMatrix<f64>, b: &DVector<f64>, mut a: DVector<f64>) -> DVector<f64> {
    let lipschitz = gram.norm().max(f64::MIN_POSITIVE);
    let mut momentum = a.clone();
    let mut t = 1.0f64;
    for _ in 0..FALLBACK_ITERATIONS {
        let gradient = gram * &momentum - b;
        let mut next: Vec<f64> = (&momentum - gradient / lipschitz).iter().copied().collect();
        project_simplex_in_place(&mut next);
        let next = DVector::from_vec(next);
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        momentum = &next + (&next - &a) * ((t - 1.0) / t_next);
        a = next;
        t = t_next;
        if simplex_kkt_residual(&a, &(gram * &a - b)) <= 0.1 * FCLS_KKT_TOLERANCE {
            break;
        }
    }
    a
}

/// Solves one pixel given `G = R^T R` and `b = R^T s`, returning the
/// abundances and their KKT residual.
pub fn fcls_pixel(gram: &DMatrix<f64>, b: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
    let m = gram.nrows();
    ensure_dims(gram.is_square() && b.len() == m && m > 0, || "FCLS operand shapes disagree".into())?;
    if m == 1 {
        return Ok((DVector::from_element(1, 1.0), 0.0));
    }
    let mut a = active_set(gram, b).unwrap_or_else(|| DVector::from_element(m, 1.0 / m as f64));
    let mut kkt = simplex_kkt_residual(&a, &(gram * &a - b));
    if kkt > FCLS_KKT_TOLERANCE {
        a = projected_gradient(gram, b, a);
        kkt = simplex_kkt_residual(&a, &(gram * &a - b));
    }
    if kkt > FCLS_KKT_TOLERANCE {
        return Err(UnmixError::Numerical(format!("FCLS pixel not certified (KKT residual {kkt:.3e})")));
    }
    Ok((a, kkt))
}

/// Fully constrained abundances of every pixel of `scene` for the
/// `L x M` endmember matrix, computed in parallel over pixels.
pub fn fcls(scene: &SpectralScene, endmembers: &DMatrix<f64>) -> Result<FclsResult> {
    let (l, m) = endmembers.shape();
    ensure_dims(l == scene.band_count(), || {
        format!("endmembers have {l} bands, scene has {}", scene.band_count())
    })?;
    if m == 0 {
        return Err(UnmixError::InvalidInput("no endmembers given".into()));
    }
    ensure_finite(endmembers.as_slice(), "endmember spectra")?;
    if endmembers.column_iter().any(|c| c.norm() == 0.0) {
        return Err(UnmixError::InvalidInput("an endmember spectrum is zero".into()));
    }
    let gram = endmembers.tr_mul(endmembers);
    let cross = endmembers.tr_mul(scene.data());
    let pixels: Vec<(DVector<f64>, f64)> = (0..scene.pixel_count())
        .into_par_iter()
        .map(|j| fcls_pixel(&gram, &cross.column(j).into_owned()))
        .collect::<Result<_>>()?;

    let n = scene.pixel_count();
    let mut abundances = DMatrix::zeros(m, n);
    let mut kkt_residual = DVector::zeros(n);
    for (j, (a, kkt)) in pixels.into_iter().enumerate() {
        abundances.set_column(j, &a);
        kkt_residual[j] = kkt;
    }
    let reconstruction = endmembers * &abundances;
    let per_pixel_residual = DVector::from_iterator(
        n,
        (scene.data() - reconstruction).column_iter().map(|c| c.norm()),
    );
    Ok(FclsResult {
        abundances,
        per_pixel_residual,
        kkt_residual,
    })
}
