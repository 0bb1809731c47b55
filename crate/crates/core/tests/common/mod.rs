//! Independent reference solvers shared by the integration tests.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(lo..hi))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `0.5 |z - v|^2 + alpha |z|`.
pub fn prox_objective(z: &[f64], v: &[f64], alpha: f64) -> f64 {
    let d: f64 = z.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
    0.5 * d + alpha * norm(z)
}

/// Minimizes `0.5 |z - v|^2 + alpha |z|` over `z >= 0` by Douglas-Rachford
/// splitting between the smooth-plus-norm term and the orthant indicator.
/// Only the unconstrained group shrinkage and the orthant projection are
/// used, never the composed operator under test.
pub fn prox_oracle(v: &[f64], alpha: f64, iterations: usize) -> Vec<f64> {
    let gamma = 1.0;
    let mut y = v.to_vec();
    let mut x = vec![0.0; v.len()];
    for _ in 0..iterations {
        // prox of gamma * (0.5 |. - v|^2 + alpha |.|): average then shrink.
        let u: Vec<f64> = y.iter().zip(v).map(|(a, b)| (a + gamma * b) / (1.0 + gamma)).collect();
        let t = gamma * alpha / (1.0 + gamma);
        let nu = norm(&u);
        let scale = if nu > t { 1.0 - t / nu } else { 0.0 };
        x = u.iter().map(|a| a * scale).collect();
        let reflected: Vec<f64> = x.iter().zip(&y).map(|(a, b)| 2.0 * a - b).collect();
        let p: Vec<f64> = reflected.iter().map(|a| a.max(0.0)).collect();
        for i in 0..y.len() {
            y[i] += p[i] - x[i];
        }
    }
    x.iter().map(|a| a.max(0.0)).collect()
}

/// Euclidean projection of `v` onto the unit simplex by bisection on the
/// shift `tau` in `sum max(v - tau, 0) = 1`.
pub fn simplex_projection_bisect(v: &[f64]) -> Vec<f64> {
    let mut lo = v.iter().copied().fold(f64::INFINITY, f64::min) - 1.0;
    let mut hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let s: f64 = v.iter().map(|x| (x - mid).max(0.0)).sum();
        if s > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let tau = 0.5 * (lo + hi);
    let mut p: Vec<f64> = v.iter().map(|x| (x - tau).max(0.0)).collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= s);
    p
}

/// `0.5 |S - S_w X|_F^2 + mu sum_k |x_k|_2`.
pub fn glup_objective(s: &DMatrix<f64>, s_w: &DMatrix<f64>, x: &DMatrix<f64>, mu: f64) -> f64 {
    let fit = 0.5 * (s - s_w * x).norm_squared();
    let penalty: f64 = x.row_iter().map(|r| r.norm()).sum();
    fit + mu * penalty
}

/// GLUP minimizer by Condat-Vu primal-dual iterations: gradient on the fit,
/// column-wise simplex projection on the constraints, dual ball projection for
/// the row-group penalty.
pub fn glup_condat_vu(s: &DMatrix<f64>, s_w: &DMatrix<f64>, mu: f64, iterations: usize) -> DMatrix<f64> {
    let (np, n) = (s_w.ncols(), s.ncols());
    let gram = s_w.tr_mul(s_w);
    let cross = s_w.tr_mul(s);
    let beta = gram.clone().symmetric_eigenvalues().max().max(1e-12);
    let sigma = beta;
    let tau = 0.99 / (0.5 * beta + sigma);
    let mut x = DMatrix::from_element(np, n, 1.0 / np as f64);
    let mut y = DMatrix::zeros(np, n);
    for _ in 0..iterations {
        let grad = &gram * &x - &cross;
        let step = &x - (grad + &y) * tau;
        let mut x_new = DMatrix::zeros(np, n);
        for j in 0..n {
            let col: Vec<f64> = step.column(j).iter().copied().collect();
            x_new.set_column(j, &DVector::from_vec(simplex_projection_bisect(&col)));
        }
        let mut u = &y + (&x_new * 2.0 - &x) * sigma;
        for mut row in u.row_iter_mut() {
            let r = row.norm();
            if r > mu {
                row *= mu / r;
            }
        }
        y = u;
        x = x_new;
    }
    x
}

/// Simplex-constrained least squares `min |s - E a|^2` by enumerating every
/// support, solving the equality-constrained problem on it through the
/// bordered normal equations and keeping the best feasible candidate.
pub fn fcls_enumeration(e: &DMatrix<f64>, s: &DVector<f64>) -> (DVector<f64>, f64) {
    let m = e.ncols();
    let mut best: Option<(DVector<f64>, f64)> = None;
    for mask in 1u32..(1 << m) {
        let support: Vec<usize> = (0..m).filter(|k| mask & (1 << k) != 0).collect();
        let k = support.len();
        let sub = e.select_columns(support.iter());
        let mut kkt = DMatrix::zeros(k + 1, k + 1);
        kkt.view_mut((0, 0), (k, k)).copy_from(&(sub.tr_mul(&sub) * 2.0));
        for i in 0..k {
            kkt[(i, k)] = 1.0;
            kkt[(k, i)] = 1.0;
        }
        let mut rhs = DVector::zeros(k + 1);
        rhs.rows_mut(0, k).copy_from(&(sub.tr_mul(s) * 2.0));
        rhs[k] = 1.0;
        let Some(sol) = kkt.clone().full_piv_lu().solve(&rhs) else {
            continue;
        };
        if (&kkt * &sol - &rhs).amax() > 1e-9 * (1.0 + rhs.amax()) {
            continue;
        }
        if sol.rows(0, k).iter().any(|&v| v < -1e-12) {
            continue;
        }
        let mut a = DVector::zeros(m);
        for (i, &col) in support.iter().enumerate() {
            a[col] = sol[i].max(0.0);
        }
        let total = a.sum();
        a /= total;
        let obj = (s - e * &a).norm_squared();
        if best.as_ref().is_none_or(|(_, b)| obj < *b) {
            best = Some((a, obj));
        }
    }
    best.expect("the single-vertex supports are always feasible")
}
