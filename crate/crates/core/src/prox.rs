//! Proximal operators for the ADMM Z-step and for simplex-constrained least
//! squares.

use crate::error::{Result, UnmixError};

/// A validated argument of [`prox_positive_misto`]: the point `v` and the
/// threshold `alpha = mu / rho`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxInput {
    v: Vec<f64>,
    alpha: f64,
}

impl ProxInput {
    pub fn new(v: Vec<f64>, alpha: f64) -> Result<Self> {
        if !(alpha >= 0.0) || !alpha.is_finite() {
            return Err(UnmixError::InvalidParameter(format!(
                "threshold must be finite and >= 0, got {alpha}"
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(UnmixError::InvalidInput("prox point has non-finite entries".into()));
        }
        Ok(Self { v, alpha })
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn apply(&self) -> Vec<f64> {
        let mut z: Vec<f64> = self.v.iter().map(|&x| x.max(0.0)).collect();
        let norm = z.iter().map(|x| x * x).sum::<f64>().sqrt();
        let scale = shrink_factor(norm, self.alpha);
        z.iter_mut().for_each(|x| *x *= scale);
        z
    }
}

/// Positively constrained multidimensional shrinkage-thresholding:
/// the minimizer of `0.5 * |z - v|^2 + alpha * |z|_2` over `z >= 0`.
///
/// With `p = max(v, 0)`, the result is `0` when `|p| <= alpha` and
/// `(1 - alpha / |p|) p` otherwise.
pub fn prox_positive_misto(v: &[f64], alpha: f64) -> Result<Vec<f64>> {
    Ok(ProxInput::new(v.to_vec(), alpha)?.apply())
}

/// Block soft-threshold factor applied to a vector of Euclidean norm `norm`.
/// Returns 0 at and below the threshold.
#[inline]
pub fn shrink_factor(norm: f64, alpha: f64) -> f64 {
    if norm <= alpha || norm == 0.0 {
        0.0
    } else {
        1.0 - alpha / norm
    }
}

/// Euclidean projection onto the probability simplex `{z >= 0, sum z = 1}`,
/// by sorting and thresholding.
pub fn project_simplex(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(UnmixError::InvalidInput("cannot project an empty vector".into()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(UnmixError::InvalidInput("simplex projection of non-finite vector".into()));
    }
    let mut out = v.to_vec();
    project_simplex_in_place(&mut out);
    Ok(out)
}

pub(crate) fn project_simplex_in_place(v: &mut [f64]) {
    let mut sorted = v.to_vec();
    sorted.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (k, &u) in sorted.iter().enumerate() {
        cumulative += u;
        let t = (cumulative - 1.0) / (k + 1) as f64;
        if u - t > 0.0 {
            theta = t;
        } else {
            break;
        }
    }
    v.iter_mut().for_each(|x| *x = (*x - theta).max(0.0));
    // Renormalize the few ulps the subtraction can leave behind.
    let sum: f64 = v.iter().sum();
    if sum > 0.0 {
        v.iter_mut().for_each(|x| *x /= sum);
    }
}
