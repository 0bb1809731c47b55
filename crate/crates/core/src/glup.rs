//! Group lasso with unit-sum and positivity constraints, solved by ADMM.
//!
//! The solver minimizes
//!
//! ```text
//! 0.5 * |S - S_w X|_F^2 + mu * sum_k |x_k|_2   s.t.  X >= 0,  1^T X = 1^T
//! ```
//!
//! over the `N' x N` abundance matrix `X`, with the splitting `A X + B Z = C`
//! where `A = [I; 1^T]`, `B = [-I; 0^T]`, `C = [0; 1^T]`. None of `A`, `B`, `C`
//! is ever formed: the multiplier matrix `Lambda` is stored as its first `N'`
//! rows plus a trailing row, and every product with the constraint matrices is
//! expanded by hand.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{ensure_dims, ensure_finite, Result, UnmixError};
use crate::prox::shrink_factor;
use crate::scene::{AbundanceEstimate, CandidateSet, SpectralScene};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GlupConfig {
    /// Group-lasso weight `mu`.
    pub mu: f64,
    /// ADMM penalty `rho`.
    pub rho: f64,
    pub eps_primal: f64,
    pub eps_dual: f64,
    pub max_iterations: usize,
}

impl Default for GlupConfig {
    fn default() -> Self {
        Self {
            mu: 10.0,
            rho: 100.0,
            eps_primal: 1e-5,
            eps_dual: 1e-5,
            max_iterations: 5000,
        }
    }
}

impl GlupConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| {
            Err(UnmixError::InvalidParameter(format!("{what} = {v} is out of range")))
        };
        if !(self.mu >= 0.0) || !self.mu.is_finite() {
            return bad("mu", self.mu);
        }
        if !(self.rho > 0.0) || !self.rho.is_finite() {
            return bad("rho", self.rho);
        }
        if !(self.eps_primal > 0.0) {
            return bad("eps_primal", self.eps_primal);
        }
        if !(self.eps_dual > 0.0) {
            return bad("eps_dual", self.eps_dual);
        }
        if self.max_iterations == 0 {
            return Err(UnmixError::InvalidParameter("max_iterations must be >= 1".into()));
        }
        Ok(())
    }
}

/// ADMM iterate `(X, Z, Lambda)`.
///
/// `lambda` has `N' + 1` rows: the first `N'` pair with the consensus
/// constraint `X = Z`, the last with the sum-to-one constraint.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmmState {
    pub x: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub lambda: DMatrix<f64>,
    pub primal_residual_norm: f64,
    pub dual_residual_norm: f64,
    pub iteration: usize,
}

impl AdmmState {
    /// `Z = 0`, `Lambda = 0`.
    pub fn zeros(candidates: usize, pixels: usize) -> Self {
        Self {
            x: DMatrix::zeros(candidates, pixels),
            z: DMatrix::zeros(candidates, pixels),
            lambda: DMatrix::zeros(candidates + 1, pixels),
            primal_residual_norm: f64::INFINITY,
            dual_residual_norm: f64::INFINITY,
            iteration: 0,
        }
    }

    /// `X = Z = x0`, `Lambda = 0`.
    pub fn warm(x0: DMatrix<f64>) -> Self {
        let (rows, cols) = x0.shape();
        Self {
            z: x0.clone(),
            x: x0,
            lambda: DMatrix::zeros(rows + 1, cols),
            primal_residual_norm: f64::INFINITY,
            dual_residual_norm: f64::INFINITY,
            iteration: 0,
        }
    }

    fn check_shape(&self, candidates: usize, pixels: usize) -> Result<()> {
        ensure_dims(
            self.x.shape() == (candidates, pixels)
                && self.z.shape() == (candidates, pixels)
                && self.lambda.shape() == (candidates + 1, pixels),
            || {
                format!(
                    "ADMM state shapes X {:?}, Z {:?}, Lambda {:?} do not fit {candidates}x{pixels}",
                    self.x.shape(),
                    self.z.shape(),
                    self.lambda.shape()
                )
            },
        )
    }
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    /// The `Z` iterate at termination.
    pub abundance: AbundanceEstimate,
    pub iterations: usize,
    pub converged: bool,
    pub final_primal_residual: f64,
    pub final_dual_residual: f64,
    pub objective_value: f64,
    /// `(primal, dual)` residual norms after every ADMM iteration.
    pub residual_history: Vec<(f64, f64)>,
}

/// Precomputed inverse of `S_w^T S_w + rho (I + 1 1^T)`, obtained from a
/// Cholesky factorization.
#[derive(Debug, Clone)]
pub struct GramSolver {
    inverse: DMatrix<f64>,
    /// `Q 1`.
    inverse_ones: DVector<f64>,
    rho: f64,
    ridge: f64,
}

impl GramSolver {
    pub fn new(candidates: &DMatrix<f64>, rho: f64) -> Result<Self> {
        let gram = candidates.tr_mul(candidates);
        Self::from_gram(&gram, rho)
    }

    /// Factorizes `gram + rho (I + 1 1^T)`. A failed factorization is retried
    /// once with `1e-10 * trace / N'` added to the diagonal.
    pub fn from_gram(gram: &DMatrix<f64>, rho: f64) -> Result<Self> {
        let n = gram.nrows();
        ensure_dims(gram.is_square(), || "Gram matrix must be square".into())?;
        let mut system = gram.clone();
        system.add_scalar_mut(rho);
        for i in 0..n {
            system[(i, i)] += rho;
        }
        let (chol, ridge) = match Cholesky::new(system.clone()) {
            Some(c) => (c, 0.0),
            None => {
                let ridge = 1e-10 * system.trace() / n as f64;
                for i in 0..n {
                    system[(i, i)] += ridge;
                }
                let c = Cholesky::new(system).ok_or_else(|| {
                    UnmixError::Numerical(
                        "X-step system is not positive definite even after ridge".into(),
                    )
                })?;
                (c, ridge)
            }
        };
        let inverse = chol.inverse();
        let inverse_ones = inverse.column_sum();
        Ok(Self {
            inverse,
            inverse_ones,
            rho,
            ridge,
        })
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    /// Diagonal ridge added by the fallback path, zero when the first
    /// factorization succeeded.
    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn solve(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        &self.inverse * rhs
    }
}

/// `A^T [Lambda + rho (B Z - C)] = Lambda_1 - rho Z + 1 (lambda_2 - rho)^T`.
pub(crate) fn constraint_pullback(z: &DMatrix<f64>, lambda: &DMatrix<f64>, rho: f64) -> DMatrix<f64> {
    let n_cand = z.nrows();
    let mut h = lambda.rows(0, n_cand) - z * rho;
    let last = lambda.row(n_cand);
    for (j, mut col) in h.column_iter_mut().enumerate() {
        col.add_scalar_mut(last[j] - rho);
    }
    h
}

/// X-minimization step:
/// `X = (S_w^T S_w + rho A^T A)^{-1} (S_w^T S - A^T [Lambda + rho (B Z - C)])`.
///
/// `cross` is `S_w^T S`.
pub fn glup_x_step(
    gram: &GramSolver,
    cross: &DMatrix<f64>,
    z: &DMatrix<f64>,
    lambda: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    ensure_dims(
        cross.shape() == z.shape() && lambda.nrows() == z.nrows() + 1 && lambda.ncols() == z.ncols(),
        || "X-step operand shapes disagree".into(),
    )?;
    let rhs = cross - constraint_pullback(z, lambda, gram.rho);
    Ok(gram.solve(&rhs))
}

/// Same step as [`glup_x_step`] with `Q S_w^T S` and `Q 1` cached, so each
/// iteration costs one `N' x N'` by `N' x N` product.
pub(crate) struct CachedGramStep {
    gram: GramSolver,
    /// `Q S_w^T S`.
    projected_cross: DMatrix<f64>,
}

impl CachedGramStep {
    pub(crate) fn new(gram: GramSolver, cross: &DMatrix<f64>) -> Self {
        let projected_cross = gram.solve(cross);
        Self {
            gram,
            projected_cross,
        }
    }

    pub(crate) fn apply(&self, z: &DMatrix<f64>, lambda: &DMatrix<f64>) -> DMatrix<f64> {
        let rho = self.gram.rho;
        let n_cand = z.nrows();
        let mut consensus = lambda.rows(0, n_cand).into_owned();
        consensus -= z * rho;
        let mut x = &self.projected_cross - &self.gram.inverse * consensus;
        let last = lambda.row(n_cand);
        for (j, mut col) in x.column_iter_mut().enumerate() {
            col.axpy(-(last[j] - rho), &self.gram.inverse_ones, 1.0);
        }
        x
    }
}

/// Z-minimization step: row `i` of `Z` is the positively constrained
/// shrinkage of `x_i + lambda_i / rho` at threshold `mu / rho`.
pub fn glup_z_step(x: &DMatrix<f64>, lambda: &DMatrix<f64>, mu: f64, rho: f64) -> Result<DMatrix<f64>> {
    ensure_dims(
        lambda.nrows() == x.nrows() + 1 && lambda.ncols() == x.ncols(),
        || "Z-step operand shapes disagree".into(),
    )?;
    if !(mu >= 0.0) || !(rho > 0.0) {
        return Err(UnmixError::InvalidParameter(format!("mu = {mu}, rho = {rho}")));
    }
    ensure_finite(x.as_slice(), "X iterate")?;
    Ok(z_step(x, lambda, mu, rho))
}

pub(crate) fn z_step(x: &DMatrix<f64>, lambda: &DMatrix<f64>, mu: f64, rho: f64) -> DMatrix<f64> {
    let n_cand = x.nrows();
    let alpha = mu / rho;
    let inv_rho = rho.recip();
    let mut z = x.clone();
    z.zip_apply(&lambda.rows(0, n_cand), |zv, l| *zv = (*zv + inv_rho * l).max(0.0));
    for mut row in z.row_iter_mut() {
        let norm = row.norm();
        let factor = shrink_factor(norm, alpha);
        if factor == 0.0 {
            row.fill(0.0);
        } else {
            row *= factor;
        }
    }
    z
}

/// Multiplier update `Lambda += rho (A X + B Z - C)`.
///
/// Returns the Frobenius norms of the primal residual `A X + B Z - C` and of
/// the dual residual `rho A^T B (Z - Z_old) = -rho (Z - Z_old)`.
pub fn glup_dual_step(
    lambda: &mut DMatrix<f64>,
    x: &DMatrix<f64>,
    z: &DMatrix<f64>,
    z_old: &DMatrix<f64>,
    rho: f64,
) -> Result<(f64, f64)> {
    ensure_dims(
        x.shape() == z.shape()
            && z.shape() == z_old.shape()
            && lambda.nrows() == x.nrows() + 1
            && lambda.ncols() == x.ncols(),
        || "dual-step operand shapes disagree".into(),
    )?;
    Ok(dual_step(lambda, x, z, z_old, rho))
}

pub(crate) fn dual_step(
    lambda: &mut DMatrix<f64>,
    x: &DMatrix<f64>,
    z: &DMatrix<f64>,
    z_old: &DMatrix<f64>,
    rho: f64,
) -> (f64, f64) {
    let n_cand = x.nrows();
    let mut primal_sq = 0.0;
    let mut dual_sq = 0.0;
    for j in 0..x.ncols() {
        let mut col_sum = 0.0;
        for i in 0..n_cand {
            let xi = x[(i, j)];
            let r = xi - z[(i, j)];
            primal_sq += r * r;
            lambda[(i, j)] += rho * r;
            col_sum += xi;
            let dz = z[(i, j)] - z_old[(i, j)];
            dual_sq += dz * dz;
        }
        let r = col_sum - 1.0;
        primal_sq += r * r;
        lambda[(n_cand, j)] += rho * r;
    }
    (primal_sq.sqrt(), rho * dual_sq.sqrt())
}

/// `sum_k |z_k|_2` over rows.
pub fn group_norm(z: &DMatrix<f64>) -> f64 {
    z.row_iter().map(|r| r.norm()).sum()
}

/// `0.5 |S - S_w Z|_F^2 + mu * sum_k |z_k|_2`.
pub fn glup_objective(scene: &DMatrix<f64>, candidates: &DMatrix<f64>, z: &DMatrix<f64>, mu: f64) -> f64 {
    let residual = scene - candidates * z;
    0.5 * residual.norm_squared() + mu * group_norm(z)
}

/// One ADMM sweep (X-step, Z-step, multiplier update) with a pluggable X-step.
pub(crate) fn admm_iteration(
    state: &mut AdmmState,
    mu: f64,
    rho: f64,
    x_step: impl FnOnce(&DMatrix<f64>, &DMatrix<f64>) -> DMatrix<f64>,
) {
    state.x = x_step(&state.z, &state.lambda);
    let z_new = z_step(&state.x, &state.lambda, mu, rho);
    let z_old = std::mem::replace(&mut state.z, z_new);
    let (primal, dual) = dual_step(&mut state.lambda, &state.x, &state.z, &z_old, rho);
    state.primal_residual_norm = primal;
    state.dual_residual_norm = dual;
    state.iteration += 1;
}

pub(crate) fn check_problem(scene: &SpectralScene, candidates: &CandidateSet) -> Result<()> {
    candidates.check_against(scene)?;
    if candidates.is_empty() {
        return Err(UnmixError::InvalidInput("candidate set is empty".into()));
    }
    Ok(())
}

/// Runs GLUP from `Z = 0`, `Lambda = 0`.
pub fn glup_solve(scene: &SpectralScene, candidates: &CandidateSet, config: &GlupConfig) -> Result<SolveReport> {
    let state = AdmmState::zeros(candidates.len(), scene.pixel_count());
    glup_solve_from(scene, candidates, config, state)
}

/// Runs GLUP from an arbitrary starting iterate.
pub fn glup_solve_from(
    scene: &SpectralScene,
    candidates: &CandidateSet,
    config: &GlupConfig,
    mut state: AdmmState,
) -> Result<SolveReport> {
    config.validate()?;
    check_problem(scene, candidates)?;
    state.check_shape(candidates.len(), scene.pixel_count())?;

    let s = scene.data();
    let s_w = candidates.columns();
    let gram = GramSolver::new(s_w, config.rho)?;
    let cross = s_w.tr_mul(s);
    let step = CachedGramStep::new(gram, &cross);

    let mut history = Vec::new();
    let mut converged = false;
    for _ in 0..config.max_iterations {
        admm_iteration(&mut state, config.mu, config.rho, |z, l| step.apply(z, l));
        history.push((state.primal_residual_norm, state.dual_residual_norm));
        if state.primal_residual_norm <= config.eps_primal && state.dual_residual_norm <= config.eps_dual {
            converged = true;
            break;
        }
    }
    if state.z.iter().any(|v| !v.is_finite()) {
        return Err(UnmixError::Numerical("ADMM iterates diverged to non-finite values".into()));
    }

    let objective_value = glup_objective(s, s_w, &state.z, config.mu);
    Ok(SolveReport {
        iterations: state.iteration,
        converged,
        final_primal_residual: state.primal_residual_norm,
        final_dual_residual: state.dual_residual_norm,
        objective_value,
        residual_history: history,
        abundance: AbundanceEstimate::with_measured_tolerance(state.z),
    })
}
