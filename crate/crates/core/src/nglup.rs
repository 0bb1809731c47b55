//! Heteroscedastic variant of GLUP.
//!
//! When the candidate columns `S_w` are themselves noisy, the residual
//! `S - S_w X = E (I - I_w X)` has column covariance `sigma^2 C(X)` with
//! `C(X) = (I - I_w X)^T (I - I_w X)`. The solver alternates between
//! estimating the weight `W = sigma^2 C(X)` and running ADMM iterations on the
//! weighted problem, whose X-step is the Sylvester equation
//!
//! ```text
//! S_w^T S_w X W^-1 + rho A^T A X = S_w^T S W^-1 - A^T [Lambda + rho (B Z - C)].
//! ```
//!
//! Right-multiplying by `W` gives `M1 X + M2 X W = D W` with `M1 = S_w^T S_w`
//! and `M2 = rho (I + 1 1^T)`. Diagonalizing `W = Q diag(w) Q^T` decouples the
//! columns of `X Q` into systems `(M1 + w_j M2) y_j = d_j`. These are solved
//! through the pencil basis `T` with `T^T M2 T = I` and `T^T M1 T = diag(s)`,
//! so `(M1 + w_j M2)^-1 = T diag(1 / (s + w_j)) T^T`.
//!
//! By default `mu` keeps the data units it has in GLUP. Expressed against the
//! likelihood-scaled term it becomes `mu / sigma^2`, so `sigma^2` cancels and
//! the X-step runs with `C(X)` as its weight. `sigma^2` is still estimated
//! and reported every outer iteration.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{ensure_dims, Result, UnmixError};
use crate::glup::{
    admm_iteration, check_problem, constraint_pullback, glup_solve, group_norm, AdmmState, GlupConfig,
    SolveReport,
};
use crate::scene::{AbundanceEstimate, CandidateSet, SpectralScene};

/// How the least-squares weight is chosen on each outer iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightPolicy {
    /// `W = sigma^2(X) C(X)` with `mu` in the data units of GLUP, so the
    /// penalty seen by the weighted term is `mu / sigma^2` and the X-step
    /// uses `C(X)` alone.
    #[default]
    Heteroscedastic,
    /// `W = sigma^2(X) C(X)` with `mu` taken as is against the
    /// likelihood-scaled term. The penalty is then negligible next to the
    /// fit and iterates drift toward `X = I`.
    LikelihoodScaled,
    /// `W = I`; the inner iterations are then plain GLUP iterations.
    Identity,
}

/// Iterate from which `C(X)` and `sigma^2(X)` are estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightSource {
    /// The feasible, row-thresholded split variable `Z`.
    #[default]
    Split,
    /// The unconstrained X-step output.
    Primal,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NglupConfig {
    /// Inner ADMM parameters.
    pub glup: GlupConfig,
    /// Parameters of the GLUP run used as warm start.
    pub warm_start: GlupConfig,
    /// Maximum inner ADMM iterations per weight update.
    pub j_max: usize,
    /// Outer stopping threshold on `|X - X_old|_F`.
    pub eps_outer: f64,
    pub max_outer_iterations: usize,
    /// Relative diagonal loading of `C(X)`, scaled by `trace(C) / N`.
    pub weight_ridge: f64,
    pub weight_policy: WeightPolicy,
    pub weight_source: WeightSource,
}

impl Default for NglupConfig {
    fn default() -> Self {
        Self {
            glup: GlupConfig::default(),
            warm_start: GlupConfig::default(),
            j_max: 1,
            eps_outer: 1e-4,
            max_outer_iterations: 200,
            weight_ridge: 1e-8,
            weight_policy: WeightPolicy::Heteroscedastic,
            weight_source: WeightSource::Split,
        }
    }
}

impl NglupConfig {
    pub fn validate(&self) -> Result<()> {
        self.glup.validate()?;
        self.warm_start.validate()?;
        if self.j_max == 0 {
            return Err(UnmixError::InvalidParameter("j_max must be >= 1".into()));
        }
        if !(self.eps_outer > 0.0) {
            return Err(UnmixError::InvalidParameter("eps_outer must be > 0".into()));
        }
        if self.max_outer_iterations == 0 {
            return Err(UnmixError::InvalidParameter("max_outer_iterations must be >= 1".into()));
        }
        if !(self.weight_ridge >= 0.0) {
            return Err(UnmixError::InvalidParameter("weight_ridge must be >= 0".into()));
        }
        Ok(())
    }
}

/// Eigendecomposition of a symmetric positive definite matrix.
#[derive(Debug, Clone)]
pub struct SymmetricFactor {
    eigenvectors: DMatrix<f64>,
    eigenvalues: DVector<f64>,
}

impl SymmetricFactor {
    pub fn new(m: &DMatrix<f64>) -> Result<Self> {
        ensure_dims(m.is_square(), || "matrix to factor must be square".into())?;
        let eig = SymmetricEigen::new(m.clone());
        let min = eig.eigenvalues.min();
        if !(min > 0.0) || !min.is_finite() {
            return Err(UnmixError::Numerical(format!(
                "matrix is not positive definite (smallest eigenvalue {min:.3e})"
            )));
        }
        Ok(Self {
            eigenvectors: eig.eigenvectors,
            eigenvalues: eig.eigenvalues,
        })
    }

    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues.min()
    }

    /// `trace(E M^-1 E^T)` for the factored `M`.
    pub fn inverse_quadratic_trace(&self, e: &DMatrix<f64>) -> f64 {
        let projected = e * &self.eigenvectors;
        projected
            .column_iter()
            .zip(self.eigenvalues.iter())
            .map(|(c, &l)| c.norm_squared() / l)
            .sum()
    }

    /// `v M^-1` for a matrix `v` with matching column count.
    pub fn solve_right(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        let mut p = v * &self.eigenvectors;
        for (mut c, &l) in p.column_iter_mut().zip(self.eigenvalues.iter()) {
            c /= l;
        }
        p * self.eigenvectors.transpose()
    }

    fn identity(n: usize) -> Self {
        Self {
            eigenvectors: DMatrix::identity(n, n),
            eigenvalues: DVector::from_element(n, 1.0),
        }
    }

    fn scaled(&self, factor: f64) -> Self {
        Self {
            eigenvectors: self.eigenvectors.clone(),
            eigenvalues: &self.eigenvalues * factor,
        }
    }
}

/// `C(X) = (I - I_w X)^T (I - I_w X)` for `X` of shape `N' x N` and the
/// 0-based candidate pixel indices `omega`.
pub fn compute_c_matrix(x: &DMatrix<f64>, omega: &[usize], n: usize) -> Result<DMatrix<f64>> {
    ensure_dims(x.nrows() == omega.len() && x.ncols() == n, || {
        format!("X is {:?} but omega has {} entries and N = {n}", x.shape(), omega.len())
    })?;
    if let Some(&bad) = omega.iter().find(|&&i| i >= n) {
        return Err(UnmixError::InvalidIndex { index: bad, pixel_count: n });
    }
    let mut d = DMatrix::<f64>::identity(n, n);
    for (row, &pixel) in omega.iter().enumerate() {
        let mut target = d.row_mut(pixel);
        target -= x.row(row);
    }
    Ok(d.tr_mul(&d))
}

/// `sigma^2(X) = trace((S - S_w X) C^-1 (S - S_w X)^T) / (N L)`.
pub fn estimate_sigma_squared(
    scene: &SpectralScene,
    candidates: &CandidateSet,
    x: &DMatrix<f64>,
    c_factor: &SymmetricFactor,
) -> Result<f64> {
    let n = scene.pixel_count();
    ensure_dims(
        x.shape() == (candidates.len(), n) && c_factor.eigenvalues.len() == n,
        || "sigma^2 operand shapes disagree".into(),
    )?;
    let residual = scene.data() - candidates.columns() * x;
    let nl = (n * scene.band_count()) as f64;
    Ok(c_factor.inverse_quadratic_trace(&residual) / nl)
}

/// Weight matrix of the heteroscedastic least-squares term.
#[derive(Debug, Clone)]
pub struct WeightModel {
    /// `C(X)` before diagonal loading.
    pub c_matrix: DMatrix<f64>,
    pub sigma_squared: f64,
    /// `sigma^2 (C(X) + ridge I)`.
    pub w_matrix: DMatrix<f64>,
    /// Diagonal loading added to `C(X)`.
    pub w_ridge_applied: f64,
    factor: SymmetricFactor,
    c_factor: SymmetricFactor,
}

impl WeightModel {
    /// Builds `W(X)`. `C` is loaded with `ridge * trace(C) / N` on its diagonal
    /// (`ridge` alone when the trace vanishes), and `sigma^2` is floored at
    /// `1e-12 |S|_F^2 / (N L)`.
    pub fn estimate(scene: &SpectralScene, candidates: &CandidateSet, x: &DMatrix<f64>, ridge: f64) -> Result<Self> {
        let n = scene.pixel_count();
        let c_matrix = compute_c_matrix(x, candidates.indices(), n)?;
        let mean_diag = c_matrix.trace() / n as f64;
        let w_ridge_applied = if mean_diag > f64::MIN_POSITIVE {
            ridge * mean_diag
        } else {
            ridge
        };
        let mut loaded = c_matrix.clone();
        for i in 0..n {
            loaded[(i, i)] += w_ridge_applied;
        }
        // Symmetrize against roundoff in the product.
        let loaded = (&loaded + loaded.transpose()) * 0.5;
        let c_factor = SymmetricFactor::new(&loaded)?;

        let sigma_raw = estimate_sigma_squared(scene, candidates, x, &c_factor)?;
        let floor = 1e-12 * scene.data().norm_squared() / (n * scene.band_count()) as f64;
        let sigma_squared = sigma_raw.max(floor);
        if !sigma_squared.is_finite() || sigma_squared <= 0.0 {
            return Err(UnmixError::Numerical(format!("noise variance estimate {sigma_raw}")));
        }
        Ok(Self {
            w_matrix: &loaded * sigma_squared,
            factor: c_factor.scaled(sigma_squared),
            c_factor,
            c_matrix,
            sigma_squared,
            w_ridge_applied,
        })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            c_matrix: DMatrix::identity(n, n),
            sigma_squared: 1.0,
            w_matrix: DMatrix::identity(n, n),
            w_ridge_applied: 0.0,
            factor: SymmetricFactor::identity(n),
            c_factor: SymmetricFactor::identity(n),
        }
    }

    /// Eigendecomposition of `w_matrix`.
    pub fn factor(&self) -> &SymmetricFactor {
        &self.factor
    }

    /// Eigendecomposition of the loaded `C(X)`, that is `w_matrix / sigma^2`.
    pub fn normalized_factor(&self) -> &SymmetricFactor {
        &self.c_factor
    }

    /// Weight used by the X-step under `policy`.
    pub fn step_factor(&self, policy: WeightPolicy) -> &SymmetricFactor {
        match policy {
            WeightPolicy::Heteroscedastic => &self.c_factor,
            WeightPolicy::LikelihoodScaled | WeightPolicy::Identity => &self.factor,
        }
    }
}

/// Simultaneous diagonalization of `M1 = S_w^T S_w` and `M2 = rho (I + 1 1^T)`.
#[derive(Debug, Clone)]
pub struct PencilBasis {
    /// `T`, with `T^T M2 T = I`.
    basis: DMatrix<f64>,
    /// Diagonal of `T^T M1 T`.
    spectrum: DVector<f64>,
    rho: f64,
    ridge: f64,
}

impl PencilBasis {
    pub fn new(candidates: &DMatrix<f64>, rho: f64) -> Result<Self> {
        if !(rho > 0.0) {
            return Err(UnmixError::InvalidParameter(format!("rho = {rho}")));
        }
        let m1 = candidates.tr_mul(candidates);
        let n = m1.nrows();
        // M2^{-1/2} = rho^{-1/2} (I + c 1 1^T), c = (1/sqrt(n+1) - 1) / n.
        let c = ((n as f64 + 1.0).sqrt().recip() - 1.0) / n as f64;
        let inv_sqrt_m2 = |m: &DMatrix<f64>| -> DMatrix<f64> {
            let mut out = m.clone();
            let col_sums = m.row_sum();
            for mut row in out.row_iter_mut() {
                row += &col_sums * c;
            }
            out / rho.sqrt()
        };
        let half = inv_sqrt_m2(&m1);
        let k = inv_sqrt_m2(&half.transpose());
        let k = (&k + k.transpose()) * 0.5;
        let eig = SymmetricEigen::new(k);
        let basis = inv_sqrt_m2(&eig.eigenvectors);
        // M1 is positive semidefinite; clip roundoff below zero.
        let spectrum = eig.eigenvalues.map(|s| s.max(0.0));
        Ok(Self {
            basis,
            spectrum,
            rho,
            ridge: 0.0,
        })
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    /// Ensures every `s_i + w_j > 0`, adding `1e-10 * mean(s)` to the spectrum
    /// once if needed.
    fn guard(&mut self, weights: &DVector<f64>) -> Result<()> {
        let floor = |me: &Self| me.spectrum.min() + weights.min();
        let scale = self.spectrum.mean().abs().max(weights.max().abs()).max(f64::MIN_POSITIVE);
        if floor(self) > 1e-300 * scale {
            return Ok(());
        }
        let ridge = 1e-10 * self.spectrum.mean().max(f64::MIN_POSITIVE);
        self.spectrum.add_scalar_mut(ridge);
        self.ridge += ridge;
        if floor(self) > 0.0 {
            Ok(())
        } else {
            Err(UnmixError::Numerical("Sylvester X-step systems are singular".into()))
        }
    }
}

/// The NGLUP X-step for a fixed weight, with the `S_w^T S Q` product cached.
pub struct SylvesterXStep<'a> {
    pencil: &'a PencilBasis,
    weight: &'a SymmetricFactor,
    /// `S_w^T S Q`.
    rotated_cross: DMatrix<f64>,
}

impl<'a> SylvesterXStep<'a> {
    pub fn new(pencil: &'a mut PencilBasis, weight: &'a SymmetricFactor, cross: &DMatrix<f64>) -> Result<Self> {
        ensure_dims(
            cross.nrows() == pencil.basis.nrows() && cross.ncols() == weight.eigenvalues.len(),
            || "Sylvester operand shapes disagree".into(),
        )?;
        pencil.guard(&weight.eigenvalues)?;
        Ok(Self {
            pencil,
            weight,
            rotated_cross: cross * &weight.eigenvectors,
        })
    }

    pub fn apply(&self, z: &DMatrix<f64>, lambda: &DMatrix<f64>) -> DMatrix<f64> {
        let q = &self.weight.eigenvectors;
        let w = &self.weight.eigenvalues;
        let t = &self.pencil.basis;
        let s = &self.pencil.spectrum;

        let h = constraint_pullback(z, lambda, self.pencil.rho);
        let mut rhs = &h * q;
        for (j, mut col) in rhs.column_iter_mut().enumerate() {
            col *= -w[j];
        }
        rhs += &self.rotated_cross;

        let mut y = t.tr_mul(&rhs);
        for (j, mut col) in y.column_iter_mut().enumerate() {
            for (i, v) in col.iter_mut().enumerate() {
                *v /= s[i] + w[j];
            }
        }
        (t * y) * q.transpose()
    }
}

/// Solves the weighted X-step for an explicit weight matrix `w`.
pub fn nglup_x_step(
    candidates: &CandidateSet,
    scene: &SpectralScene,
    w: &DMatrix<f64>,
    z: &DMatrix<f64>,
    lambda: &DMatrix<f64>,
    rho: f64,
) -> Result<DMatrix<f64>> {
    check_problem(scene, candidates)?;
    let n = scene.pixel_count();
    ensure_dims(
        w.shape() == (n, n) && z.shape() == (candidates.len(), n) && lambda.shape() == (candidates.len() + 1, n),
        || "NGLUP X-step operand shapes disagree".into(),
    )?;
    let w = (w + w.transpose()) * 0.5;
    let factor = SymmetricFactor::new(&w)?;
    let mut pencil = PencilBasis::new(candidates.columns(), rho)?;
    let cross = candidates.columns().tr_mul(scene.data());
    let step = SylvesterXStep::new(&mut pencil, &factor, &cross)?;
    Ok(step.apply(z, lambda))
}

/// Outcome of an NGLUP run.
#[derive(Debug, Clone)]
pub struct NglupReport {
    pub report: SolveReport,
    /// The GLUP warm start.
    pub warm_start: SolveReport,
    pub outer_iterations: usize,
    /// `|X - X_old|_F` after every outer iteration.
    pub outer_changes: Vec<f64>,
    /// `sigma^2` estimated on every outer iteration.
    pub sigma_history: Vec<f64>,
    /// Smallest eigenvalue of `W` on every outer iteration.
    pub min_weight_eigenvalue: Vec<f64>,
}

/// `0.5 trace((S - S_w Z) W^-1 (S - S_w Z)^T) + mu sum_k |z_k|_2`.
pub fn weighted_objective(
    scene: &DMatrix<f64>,
    candidates: &DMatrix<f64>,
    z: &DMatrix<f64>,
    weight: &SymmetricFactor,
    mu: f64,
) -> f64 {
    let residual = scene - candidates * z;
    0.5 * weight.inverse_quadratic_trace(&residual) + mu * group_norm(z)
}

/// Runs NGLUP: a GLUP warm start followed by alternating weight estimation
/// and weighted ADMM iterations.
///
/// The run counts as converged once `|X - X_old|_F < eps_outer` and the last
/// inner iteration met both ADMM tolerances.
pub fn nglup_solve(scene: &SpectralScene, candidates: &CandidateSet, config: &NglupConfig) -> Result<NglupReport> {
    config.validate()?;
    check_problem(scene, candidates)?;
    let warm = glup_solve(scene, candidates, &config.warm_start)?;
    let state = AdmmState::warm(warm.abundance.x().clone());
    nglup_solve_from(scene, candidates, config, state, warm)
}

/// NGLUP outer loop started from an explicit iterate.
pub fn nglup_solve_from(
    scene: &SpectralScene,
    candidates: &CandidateSet,
    config: &NglupConfig,
    mut state: AdmmState,
    warm_start: SolveReport,
) -> Result<NglupReport> {
    config.validate()?;
    check_problem(scene, candidates)?;
    let n = scene.pixel_count();
    ensure_dims(state.x.shape() == (candidates.len(), n), || "initial X has the wrong shape".into())?;

    let s = scene.data();
    let s_w = candidates.columns();
    let cross = s_w.tr_mul(s);
    let GlupConfig { mu, rho, eps_primal, eps_dual, .. } = config.glup;
    let mut pencil = PencilBasis::new(s_w, rho)?;

    let mut history = Vec::new();
    let mut outer_changes = Vec::new();
    let mut sigma_history = Vec::new();
    let mut min_weight_eigenvalue = Vec::new();
    let mut converged = false;
    let mut weight = WeightModel::identity(n);

    for _ in 0..config.max_outer_iterations {
        if config.weight_policy != WeightPolicy::Identity {
            let source = match config.weight_source {
                WeightSource::Split => &state.z,
                WeightSource::Primal => &state.x,
            };
            weight = WeightModel::estimate(scene, candidates, source, config.weight_ridge)?;
        }
        sigma_history.push(weight.sigma_squared);
        min_weight_eigenvalue.push(weight.factor.min_eigenvalue());

        let x_old = state.x.clone();
        let step = SylvesterXStep::new(&mut pencil, weight.step_factor(config.weight_policy), &cross)?;
        for _ in 0..config.j_max {
            admm_iteration(&mut state, mu, rho, |z, l| step.apply(z, l));
            history.push((state.primal_residual_norm, state.dual_residual_norm));
            if state.primal_residual_norm <= eps_primal && state.dual_residual_norm <= eps_dual {
                break;
            }
        }
        if state.x.iter().any(|v| !v.is_finite()) {
            return Err(UnmixError::Numerical("NGLUP iterates diverged to non-finite values".into()));
        }
        let change = (&state.x - &x_old).norm();
        outer_changes.push(change);
        let inner_done = state.primal_residual_norm <= eps_primal && state.dual_residual_norm <= eps_dual;
        if change < config.eps_outer && inner_done {
            converged = true;
            break;
        }
    }

    let objective_value = weighted_objective(s, s_w, &state.z, weight.step_factor(config.weight_policy), mu);
    let report = SolveReport {
        iterations: state.iteration,
        converged,
        final_primal_residual: state.primal_residual_norm,
        final_dual_residual: state.dual_residual_norm,
        objective_value,
        residual_history: history,
        abundance: AbundanceEstimate::with_measured_tolerance(state.z),
    };
    Ok(NglupReport {
        report,
        warm_start,
        outer_iterations: outer_changes.len(),
        outer_changes,
        sigma_history,
        min_weight_eigenvalue,
    })
}
