//! Pairwise logistic regression on comparison scores.
//!
//! Every unordered pair of individuals contributes a score `S in {0, 0.5, 1}`
//! (loss / tie / win for the first member) and covariate differences
//! (treatment, time). The model is `E[S | dz] = expit(alpha + beta' dz)`;
//! the treatment coefficient is a log win odds adjusted for the other
//! covariate differences.
//!
//! The score equations are accumulated orientation-symmetrically: each pair
//! enters once as `(dz, S)` and once as `(-dz, 1 - S)`. This makes the
//! intercept vanish identically, removes any dependence on how pairs were
//! oriented, and makes the two-group model solve `expit(beta) = mean(S)`
//! exactly, matching the direct win-proportion estimate.
//!
//! Standard errors come from a cluster-robust sandwich over individuals:
//! pairs sharing an individual are dependent, so the middle matrix is
//! `sum_i T_i T_i' - sum_pairs U_p U_p'` with `T_i` the sum of the scores of
//! the pairs containing individual `i` (each unordered pair is counted in
//! exactly two `T_i`, and the subtraction removes the double-counted
//! diagonal).

use nalgebra::{Cholesky, DMatrix};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::expit;

/// Errors from pair construction or fitting.
#[derive(Debug, Error)]
pub enum PimError {
    #[error("no pairs to fit")]
    Empty,
    #[error("pair {0} has score {1}, outside [0, 1]")]
    BadScore(usize, f64),
    #[error("score equations are singular (complete separation or constant covariates)")]
    Singular,
    #[error("Newton iterations failed to converge (last score norm {0:.3e})")]
    NoConvergence(f64),
}

/// One scored pair: indices of the two individuals, the comparison score of
/// the first against the second, and covariate differences (first minus
/// second).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PimPair {
    pub i: u32,
    pub j: u32,
    /// 1 first wins, 0 first loses, 0.5 tie.
    pub s: f64,
    /// Treatment difference.
    pub dx: f64,
    /// Time difference.
    pub dt: f64,
}

/// Fitted pairwise model.
#[derive(Debug, Clone)]
pub struct PimFit {
    /// Intercept of the pairwise model. Under orientation-symmetric score
    /// accumulation the intercept equation is satisfied at zero for any
    /// slope (`expit(a+e) + expit(a-e) = 1` forces `a = 0`), so this is
    /// exactly zero; it is reported for interface completeness.
    pub alpha: f64,
    /// Slope estimates, in the order of the design columns.
    pub beta: Vec<f64>,
    pub coef_names: Vec<String>,
    /// Individual-level sandwich covariance of `beta`.
    pub vcov: DMatrix<f64>,
    pub converged: bool,
    pub n_iter: usize,
    pub n_pairs: usize,
    /// True when the sandwich middle matrix needed an eigenvalue floor to
    /// become positive semidefinite.
    pub vcov_projected: bool,
}

const SCORE_TOL: f64 = 1e-8;
const MAX_ITER: usize = 60;
/// Pairs per accumulation chunk; fixed so that parallel reductions are
/// byte-identical regardless of thread count.
const CHUNK: usize = 8192;

fn design(pair: &PimPair, include_time: bool) -> [f64; 2] {
    if include_time {
        [pair.dx, pair.dt]
    } else {
        [pair.dx, 0.0]
    }
}

/// Symmetrized score and negative Jacobian at `beta`.
///
/// Each pair contributes `(z, s)` and `(-z, 1 - s)`:
/// `U = sum z [s - expit(z'b)] + (-z) [(1 - s) - expit(-z'b)]
///    = 2 sum z [s - expit(z'b)]` (using `expit(-a) = 1 - expit(a)`),
/// so the factor 2 is dropped. The intercept column would contribute
/// `[s - e] + [(1 - s) - (1 - e)] = 0` identically, hence no intercept.
fn score_and_info(
    pairs: &[PimPair],
    beta: &[f64; 2],
    include_time: bool,
) -> ([f64; 2], [[f64; 2]; 2]) {
    let (u, h) = pairs
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut u = [0.0f64; 2];
            let mut h = [[0.0f64; 2]; 2];
            for p in chunk {
                let z = design(p, include_time);
                let eta = beta[0] * z[0] + beta[1] * z[1];
                let e = expit(eta);
                let w = e * (1.0 - e);
                let r = p.s - e;
                for a in 0..2 {
                    u[a] += z[a] * r;
                    for b in 0..2 {
                        h[a][b] += w * z[a] * z[b];
                    }
                }
            }
            (u, h)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold(([0.0f64; 2], [[0.0f64; 2]; 2]), |(mut u, mut h), (cu, ch)| {
            for a in 0..2 {
                u[a] += cu[a];
                for b in 0..2 {
                    h[a][b] += ch[a][b];
                }
            }
            (u, h)
        });
    (u, h)
}

/// Fits the pairwise model by damped Newton iteration from `beta = 0`.
///
/// `n_individuals` must exceed every index stored in the pairs; it sizes the
/// per-individual accumulators of the sandwich variance. When
/// `include_time` is false the time column is dropped and only the
/// treatment coefficient is estimated.
pub fn fit_pim(
    pairs: &[PimPair],
    n_individuals: usize,
    include_time: bool,
) -> Result<PimFit, PimError> {
    if pairs.is_empty() {
        return Err(PimError::Empty);
    }
    for (idx, p) in pairs.iter().enumerate() {
        if !(0.0..=1.0).contains(&p.s) || !p.s.is_finite() {
            return Err(PimError::BadScore(idx, p.s));
        }
        if (p.i as usize) >= n_individuals || (p.j as usize) >= n_individuals || p.i == p.j {
            return Err(PimError::BadScore(idx, p.s));
        }
    }

    let dim = if include_time { 2 } else { 1 };
    let mut beta = [0.0f64; 2];
    let mut converged = false;
    let mut n_iter = 0;
    let mut last_norm = f64::INFINITY;
    for iter in 1..=MAX_ITER {
        n_iter = iter;
        let (u, h) = score_and_info(pairs, &beta, include_time);
        last_norm = u[..dim].iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        // a drifting estimate with a shrinking score is separation: the MLE
        // is at infinity and the score tends to zero along the way
        if beta[..dim].iter().any(|b| b.abs() > 15.0) {
            return Err(PimError::NoConvergence(last_norm));
        }
        if last_norm < SCORE_TOL {
            converged = true;
            break;
        }
        // solve H d = U on the active columns
        let step = if dim == 2 {
            let det = h[0][0] * h[1][1] - h[0][1] * h[1][0];
            if det.abs() < 1e-300 || !det.is_finite() {
                return Err(PimError::Singular);
            }
            [
                (h[1][1] * u[0] - h[0][1] * u[1]) / det,
                (h[0][0] * u[1] - h[1][0] * u[0]) / det,
            ]
        } else {
            if h[0][0] < 1e-300 || !h[0][0].is_finite() {
                return Err(PimError::Singular);
            }
            [u[0] / h[0][0], 0.0]
        };
        // damping: halve until the score norm decreases
        let mut alpha = 1.0f64;
        let mut accepted = false;
        for _ in 0..30 {
            let cand = [beta[0] + alpha * step[0], beta[1] + alpha * step[1]];
            let (uc, _) = score_and_info(pairs, &cand, include_time);
            let norm = uc[..dim].iter().fold(0.0f64, |a, &v| a.max(v.abs()));
            if norm < last_norm {
                beta = cand;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if !converged {
        return Err(PimError::NoConvergence(last_norm));
    }

    // sandwich: A = H (info), B = sum_i T_i T_i' - sum_p U_p U_p'
    let (_, h) = score_and_info(pairs, &beta, include_time);
    let mut t_acc = vec![[0.0f64; 2]; n_individuals];
    let mut b_pairs = [[0.0f64; 2]; 2];
    for p in pairs {
        let z = design(p, include_time);
        let e = expit(beta[0] * z[0] + beta[1] * z[1]);
        let r = p.s - e;
        let up = [z[0] * r, z[1] * r];
        for a in 0..2 {
            t_acc[p.i as usize][a] += up[a];
            t_acc[p.j as usize][a] += up[a];
            for b in 0..2 {
                b_pairs[a][b] += up[a] * up[b];
            }
        }
    }
    let mut b_mid = DMatrix::zeros(dim, dim);
    for t in &t_acc {
        for a in 0..dim {
            for b in 0..dim {
                b_mid[(a, b)] += t[a] * t[b];
            }
        }
    }
    // sum_i T_i T_i' = 2 sum_p U_p U_p' + cross-terms of pairs sharing an
    // individual; subtracting one diagonal leaves each dependence once
    for a in 0..dim {
        for b in 0..dim {
            b_mid[(a, b)] -= b_pairs[a][b];
        }
    }

    // the middle matrix is PSD in expectation but not always in samples
    let mut projected = false;
    if Cholesky::new(b_mid.clone()).is_none() {
        let mut eig = b_mid.clone().symmetric_eigen();
        for e in eig.eigenvalues.iter_mut() {
            if *e < 0.0 {
                *e = 0.0;
                projected = true;
            }
        }
        let mut d = DMatrix::zeros(dim, dim);
        for k in 0..dim {
            d[(k, k)] = eig.eigenvalues[k];
        }
        b_mid = &eig.eigenvectors * d * eig.eigenvectors.transpose();
    }

    let mut a_mat = DMatrix::zeros(dim, dim);
    for a in 0..dim {
        for b in 0..dim {
            a_mat[(a, b)] = h[a][b];
        }
    }
    let a_chol = Cholesky::new(a_mat).ok_or(PimError::Singular)?;
    let a_inv = a_chol.inverse();
    let vcov = &a_inv * b_mid * &a_inv;

    let mut names = vec!["dx".to_string()];
    if include_time {
        names.push("dt".to_string());
    }
    Ok(PimFit {
        alpha: 0.0,
        beta: beta[..dim].to_vec(),
        coef_names: names,
        vcov,
        converged,
        n_iter,
        n_pairs: pairs.len(),
        vcov_projected: projected,
    })
}

/// Treatment coefficient and its sandwich standard error.
pub fn treatment_estimate(fit: &PimFit) -> (f64, f64) {
    (fit.beta[0], fit.vcov[(0, 0)].max(0.0).sqrt())
}

/// Wald test of the treatment coefficient against the standard normal
/// reference; returns (estimate, se, p).
pub fn treatment_test(fit: &PimFit) -> (f64, f64, f64) {
    let (est, se) = treatment_estimate(fit);
    let z = est / se;
    let p = 2.0 * crate::estimators::normal_sf(z.abs());
    (est, se, p)
}
