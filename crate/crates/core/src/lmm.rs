//! Linear mixed models with independent variance-component blocks, fitted by
//! REML, with Kenward-Roger small-sample inference for fixed effects.
//!
//! Model: `y = X beta + sum_b Z_b u_b + eps`, `u_b ~ N(0, sigma2_b I)`,
//! `eps ~ N(0, sigma2 I)`, all blocks independent. Each block contributes one
//! column per level with a per-row loading (1 for random intercepts, a
//! covariate value for random slopes).
//!
//! Fitting profiles the residual variance out of the REML criterion and
//! optimizes over log variance ratios `ln(sigma2_b / sigma2)` (Nelder-Mead,
//! then Newton polish on the analytic gradient), so variance components may
//! sit on the zero boundary, handled by an explicit floor. All linear
//! algebra runs in the q-dimensional random-effect space through the
//! Woodbury identity; nothing is ever n x n.
//!
//! Kenward-Roger: the fixed-effects covariance is inflated using the REML
//! covariance of the variance components and the derivatives of V, and the
//! denominator df of a one-dimensional contrast comes from the matched
//! Satterthwaite map, which is what the full moment-matching formula reduces
//! to for single contrasts (the scale factor is exactly 1). In the
//! no-random-effects limit this reproduces the exact t-test with df n - p.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

/// Errors raised during model specification or fitting.
#[derive(Debug, Error)]
pub enum LmmError {
    #[error("model specification invalid: {0}")]
    Spec(String),
    #[error("fixed-effects design is rank deficient")]
    RankDeficient,
    #[error("optimizer failed to produce a finite objective")]
    NonFinite,
}

/// One random-effect block: a grouping factor with a per-row loading.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomBlock {
    pub name: String,
    /// Number of levels (columns of this block's Z).
    pub n_levels: usize,
    /// Per-row level index, 0-based.
    pub level: Vec<usize>,
    /// Per-row loading; 1.0 everywhere for a random intercept.
    pub loading: Vec<f64>,
}

impl RandomBlock {
    /// Random intercept for a 0-based grouping vector.
    pub fn intercept(name: &str, n_levels: usize, level: Vec<usize>) -> Self {
        let loading = vec![1.0; level.len()];
        Self { name: name.into(), n_levels, level, loading }
    }

    /// Random slope: the loading multiplies the indicator of each level.
    pub fn slope(name: &str, n_levels: usize, level: Vec<usize>, loading: Vec<f64>) -> Self {
        Self { name: name.into(), n_levels, level, loading }
    }
}

/// Full model specification.
#[derive(Debug, Clone, PartialEq)]
pub struct LmmSpec {
    /// Response vector.
    pub y: Vec<f64>,
    /// Fixed-effects design, one row per observation.
    pub x: Vec<Vec<f64>>,
    pub fixed_names: Vec<String>,
    pub blocks: Vec<RandomBlock>,
    /// REML (true) or ML (false). Kenward-Roger inference requires REML.
    pub reml: bool,
    /// Optional per-row precision weights: row `i` has residual variance
    /// `sigma2 / weights[i]`. `None` means equal weights (the default used
    /// by all built-in analyses).
    pub weights: Option<Vec<f64>>,
}

/// Result of a mixed-model fit.
#[derive(Debug, Clone)]
pub struct LmmFit {
    pub fixed_names: Vec<String>,
    /// Fixed-effect estimates.
    pub beta: Vec<f64>,
    /// Variance components: one per block (block order), residual last.
    pub theta: Vec<f64>,
    pub component_names: Vec<String>,
    /// Restricted (or ML) log-likelihood at the optimum.
    pub loglik: f64,
    /// Model-based covariance of `beta` (GLS plug-in).
    pub vcov_beta: DMatrix<f64>,
    pub converged: bool,
    /// Gradient max-norm on the working (log variance ratio) scale.
    pub grad_norm: f64,
    pub n_obs: usize,
    pub n_fixed: usize,
    reml: bool,
    sigma2: f64,
    gamma: Vec<f64>,
    internals: Internals,
}

/// Kenward-Roger test of a single contrast of the fixed effects.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct KrResult {
    pub estimate: f64,
    pub se: f64,
    pub df: f64,
    pub p_value: f64,
    /// True when the variance-component covariance was not positive
    /// definite and the model-based covariance with residual df was used.
    pub fallback: bool,
}

// Cached crossproducts; everything KR needs lives in q- and p-space.
#[derive(Debug, Clone)]
struct Internals {
    czz: DMatrix<f64>,
    czx: DMatrix<f64>,
    cxx: DMatrix<f64>,
    /// (offset, size) of each block inside the q columns.
    layout: Vec<(usize, usize)>,
}

const LOG_FLOOR: f64 = -23.025850929940457; // ln(1e-10)
const LOG_CEIL: f64 = 23.025850929940457; // ln(1e10)
const GRAD_TOL: f64 = 1e-7;

struct Workspace {
    n: usize,
    p: usize,
    q: usize,
    layout: Vec<(usize, usize)>,
    czz: DMatrix<f64>,
    czx: DMatrix<f64>,
    czy: DVector<f64>,
    cxx: DMatrix<f64>,
    cxy: DVector<f64>,
    syy: f64,
    reml: bool,
    /// `0.5 * sum(ln w_i)`, the log-likelihood offset of precision weights.
    half_logw: f64,
}

/// Everything the objective needs at one gamma point.
struct Eval {
    f: f64,
    beta: DVector<f64>,
    rss: f64,
    /// Cholesky of X' W^-1 X.
    xwx_chol: Cholesky<f64, nalgebra::Dyn>,
    /// sqrt(gamma) per q-column.
    s: DVector<f64>,
    /// Cholesky of I + S czz S.
    m_chol: Cholesky<f64, nalgebra::Dyn>,
}

impl Workspace {
    fn new(spec: &LmmSpec) -> Result<Self, LmmError> {
        let n = spec.y.len();
        if n == 0 {
            return Err(LmmError::Spec("empty response".into()));
        }
        if spec.x.len() != n {
            return Err(LmmError::Spec("X row count does not match y".into()));
        }
        let p = spec.x[0].len();
        if p == 0 || spec.fixed_names.len() != p {
            return Err(LmmError::Spec("fixed design needs named columns".into()));
        }
        if n <= p {
            return Err(LmmError::Spec(format!("{n} observations cannot identify {p} fixed effects")));
        }
        for (i, row) in spec.x.iter().enumerate() {
            if row.len() != p || row.iter().any(|v| !v.is_finite()) {
                return Err(LmmError::Spec(format!("X row {i} malformed")));
            }
        }
        if spec.y.iter().any(|v| !v.is_finite()) {
            return Err(LmmError::Spec("non-finite response".into()));
        }
        let mut half_logw = 0.0;
        if let Some(w) = &spec.weights {
            if w.len() != n {
                return Err(LmmError::Spec("weight count does not match y".into()));
            }
            if w.iter().any(|&v| !v.is_finite() || v <= 0.0) {
                return Err(LmmError::Spec("weights must be finite and positive".into()));
            }
            half_logw = 0.5 * w.iter().map(|v| v.ln()).sum::<f64>();
        }
        let mut layout = Vec::with_capacity(spec.blocks.len());
        let mut q = 0;
        for b in &spec.blocks {
            if b.level.len() != n || b.loading.len() != n {
                return Err(LmmError::Spec(format!("block {:?} length mismatch", b.name)));
            }
            if b.n_levels == 0 || b.level.iter().any(|&l| l >= b.n_levels) {
                return Err(LmmError::Spec(format!("block {:?} has invalid levels", b.name)));
            }
            if b.loading.iter().any(|v| !v.is_finite()) {
                return Err(LmmError::Spec(format!("block {:?} has non-finite loadings", b.name)));
            }
            layout.push((q, b.n_levels));
            q += b.n_levels;
        }

        // crossproducts; each row touches exactly one column per block
        let mut czz = DMatrix::zeros(q, q);
        let mut czx = DMatrix::zeros(q, p);
        let mut czy = DVector::zeros(q);
        let mut cxx = DMatrix::zeros(p, p);
        let mut cxy = DVector::zeros(p);
        let mut syy = 0.0;
        let mut cols = vec![0usize; spec.blocks.len()];
        let mut loads = vec![0f64; spec.blocks.len()];
        for i in 0..n {
            // a weight w scales row i of y, X, and Z by sqrt(w), hence every
            // crossproduct contribution of the row by w
            let wf = spec.weights.as_ref().map_or(1.0, |w| w[i]);
            for (bi, b) in spec.blocks.iter().enumerate() {
                cols[bi] = layout[bi].0 + b.level[i];
                loads[bi] = b.loading[i];
            }
            for a in 0..spec.blocks.len() {
                for b in 0..spec.blocks.len() {
                    czz[(cols[a], cols[b])] += wf * loads[a] * loads[b];
                }
                for c in 0..p {
                    czx[(cols[a], c)] += wf * loads[a] * spec.x[i][c];
                }
                czy[cols[a]] += wf * loads[a] * spec.y[i];
            }
            for a in 0..p {
                for b in 0..p {
                    cxx[(a, b)] += wf * spec.x[i][a] * spec.x[i][b];
                }
                cxy[a] += wf * spec.x[i][a] * spec.y[i];
            }
            syy += wf * spec.y[i] * spec.y[i];
        }

        // rank check on the fixed design
        let eig = cxx.clone().symmetric_eigen();
        let max_e = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
        if eig.eigenvalues.iter().any(|&e| e < 1e-10 * max_e.max(1e-300)) {
            return Err(LmmError::RankDeficient);
        }
        Ok(Self { n, p, q, layout, czz, czx, czy, cxx, cxy, syy, reml: spec.reml, half_logw })
    }

    fn s_vector(&self, gamma: &[f64]) -> DVector<f64> {
        let mut s = DVector::zeros(self.q);
        for (bi, &(off, sz)) in self.layout.iter().enumerate() {
            let g = gamma[bi].max(0.0).sqrt();
            for c in off..off + sz {
                s[c] = g;
            }
        }
        s
    }

    /// Profiled criterion at gamma (variance ratios); returns None when the
    /// required factorizations fail.
    fn evaluate(&self, gamma: &[f64]) -> Option<Eval> {
        let s = self.s_vector(gamma);
        let mut m = DMatrix::identity(self.q, self.q);
        for r in 0..self.q {
            for c in 0..self.q {
                m[(r, c)] += s[r] * s[c] * self.czz[(r, c)];
            }
        }
        let m_chol = Cholesky::new(m)?;
        let logdet_m = 2.0 * m_chol.l_dirty().diagonal().iter().map(|d: &f64| d.ln()).sum::<f64>();

        // rhs = [S Z'X | S Z'y], solved against M
        let mut rhs = DMatrix::zeros(self.q, self.p + 1);
        for r in 0..self.q {
            for c in 0..self.p {
                rhs[(r, c)] = s[r] * self.czx[(r, c)];
            }
            rhs[(r, self.p)] = s[r] * self.czy[r];
        }
        let sol = m_chol.solve(&rhs);

        let mut xwx = self.cxx.clone();
        let mut xwy = self.cxy.clone();
        let mut ywy = self.syy;
        for r in 0..self.q {
            for a in 0..self.p {
                for b in 0..self.p {
                    xwx[(a, b)] -= rhs[(r, a)] * sol[(r, b)];
                }
                xwy[a] -= rhs[(r, a)] * sol[(r, self.p)];
            }
            ywy -= rhs[(r, self.p)] * sol[(r, self.p)];
        }
        let xwx_chol = Cholesky::new(xwx)?;
        let logdet_xwx =
            2.0 * xwx_chol.l_dirty().diagonal().iter().map(|d: &f64| d.ln()).sum::<f64>();
        let beta = xwx_chol.solve(&xwy);
        let rss = (ywy - beta.dot(&xwy)).max(1e-290);

        let f = if self.reml {
            let df = (self.n - self.p) as f64;
            df * (rss / df).ln() + logdet_m + logdet_xwx
        } else {
            let nn = self.n as f64;
            nn * (rss / nn).ln() + logdet_m
        };
        if !f.is_finite() {
            return None;
        }
        Some(Eval { f, beta, rss, xwx_chol, s, m_chol })
    }

    fn objective(&self, ell: &[f64]) -> f64 {
        let gamma: Vec<f64> = ell.iter().map(|&l| l.clamp(LOG_FLOOR, LOG_CEIL).exp()).collect();
        self.evaluate(&gamma).map_or(f64::INFINITY, |e| e.f)
    }

    /// K_w = S M^-1 S, the Woodbury core at an evaluated point.
    fn kw(&self, e: &Eval) -> DMatrix<f64> {
        let mut sm = DMatrix::identity(self.q, self.q);
        for r in 0..self.q {
            for c in 0..self.q {
                sm[(r, c)] = if r == c { e.s[r] } else { 0.0 };
            }
        }
        let minv_s = e.m_chol.solve(&sm);
        let mut kw = minv_s;
        for r in 0..self.q {
            for c in 0..self.q {
                kw[(r, c)] *= e.s[r];
            }
        }
        kw
    }

    /// Analytic gradient of the profiled criterion w.r.t. log gamma.
    fn gradient(&self, ell: &[f64]) -> Option<Vec<f64>> {
        let gamma: Vec<f64> = ell.iter().map(|&l| l.clamp(LOG_FLOOR, LOG_CEIL).exp()).collect();
        let e = self.evaluate(&gamma)?;
        let kw = self.kw(&e);

        // Z'W^-1Z = czz - czz K czz ; X'W^-1Z = czx' - czx' K czz
        let kczz = &kw * &self.czz;
        let zwz = &self.czz - &self.czz * &kczz;
        let xwz = self.czx.transpose() - self.czx.transpose() * &kw * &self.czz;
        // Z'W^-1 r = (czy - czz K czy) - (czx - czz K czx) beta
        let zwy = &self.czy - &self.czz * (&kw * &self.czy);
        let zwxb = (&self.czx - &self.czz * (&kw * &self.czx)) * &e.beta;
        let rwz = zwy - zwxb;

        let scale = if self.reml { (self.n - self.p) as f64 } else { self.n as f64 };
        let mut grad = Vec::with_capacity(self.layout.len());
        for (bi, &(off, sz)) in self.layout.iter().enumerate() {
            let tr_wzz: f64 = (off..off + sz).map(|c| zwz[(c, c)]).sum();
            let tr_xwx = if self.reml {
                let sub = xwz.columns(off, sz).into_owned();
                let li = e.xwx_chol.l_dirty().clone();
                // || L^-1 sub ||_F^2 via forward substitution
                let solved = li.solve_lower_triangular(&sub).unwrap_or_else(|| sub.clone());
                solved.iter().map(|v| v * v).sum::<f64>()
            } else {
                0.0
            };
            let rq: f64 = (off..off + sz).map(|c| rwz[c] * rwz[c]).sum();
            let dgamma = tr_wzz - tr_xwx - scale / e.rss * rq;
            grad.push(gamma[bi] * dgamma);
        }
        Some(grad)
    }
}

fn nelder_mead(ws: &Workspace, start: &[f64], max_iter: usize) -> (Vec<f64>, f64) {
    let dim = start.len();
    let clamp = |v: &mut Vec<f64>| {
        for x in v.iter_mut() {
            *x = x.clamp(LOG_FLOOR, LOG_CEIL);
        }
    };
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(dim + 1);
    let mut p0 = start.to_vec();
    clamp(&mut p0);
    simplex.push((p0.clone(), ws.objective(&p0)));
    for d in 0..dim {
        let mut p = p0.clone();
        p[d] += 1.0;
        clamp(&mut p);
        let f = ws.objective(&p);
        simplex.push((p, f));
    }
    for _ in 0..max_iter {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (best, worst) = (simplex[0].1, simplex[dim].1);
        if (worst - best).abs() < 1e-11 * (1.0 + best.abs()) {
            break;
        }
        let centroid: Vec<f64> = (0..dim)
            .map(|d| simplex[..dim].iter().map(|(p, _)| p[d]).sum::<f64>() / dim as f64)
            .collect();
        let shifted = |coef: f64| -> (Vec<f64>, f64) {
            let mut p: Vec<f64> = (0..dim)
                .map(|d| centroid[d] + coef * (centroid[d] - simplex[dim].0[d]))
                .collect();
            clamp(&mut p);
            let f = ws.objective(&p);
            (p, f)
        };
        let (pr, fr) = shifted(1.0);
        if fr < simplex[0].1 {
            let (pe, fe) = shifted(2.0);
            simplex[dim] = if fe < fr { (pe, fe) } else { (pr, fr) };
        } else if fr < simplex[dim - 1].1 {
            simplex[dim] = (pr, fr);
        } else {
            let (pc, fc) = if fr < simplex[dim].1 { shifted(0.5) } else { shifted(-0.5) };
            if fc < simplex[dim].1.min(fr) {
                simplex[dim] = (pc, fc);
            } else {
                let best = simplex[0].0.clone();
                for entry in simplex.iter_mut().skip(1) {
                    for d in 0..dim {
                        entry.0[d] = best[d] + 0.5 * (entry.0[d] - best[d]);
                    }
                    entry.1 = ws.objective(&entry.0);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    simplex.remove(0)
}

/// Newton polish on the analytic gradient; returns (point, grad max-norm).
fn newton_polish(ws: &Workspace, start: &[f64]) -> (Vec<f64>, f64) {
    let dim = start.len();
    let mut ell = start.to_vec();
    let mut f = ws.objective(&ell);
    let mut gnorm = f64::INFINITY;
    for _ in 0..60 {
        let Some(g) = ws.gradient(&ell) else { break };
        gnorm = g.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        if gnorm < GRAD_TOL {
            break;
        }
        // Hessian by forward differences of the gradient
        let h = 1e-5;
        let mut hess = DMatrix::zeros(dim, dim);
        let mut ok = true;
        for d in 0..dim {
            let mut shifted = ell.clone();
            shifted[d] = (shifted[d] + h).min(LOG_CEIL);
            let step = shifted[d] - ell[d];
            match ws.gradient(&shifted) {
                Some(g2) if step > 0.0 => {
                    for r in 0..dim {
                        hess[(r, d)] = (g2[r] - g[r]) / step;
                    }
                }
                _ => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            break;
        }
        hess = (hess.clone() + hess.transpose()) * 0.5;
        let gvec = DVector::from_column_slice(&g);
        let mut lambda = 0.0;
        let mut improved = false;
        for _ in 0..12 {
            let damped = &hess + DMatrix::identity(dim, dim) * lambda;
            if let Some(chol) = Cholesky::new(damped) {
                let dir = chol.solve(&(-&gvec));
                let mut cand: Vec<f64> = (0..dim)
                    .map(|d| (ell[d] + dir[d]).clamp(LOG_FLOOR, LOG_CEIL))
                    .collect();
                let mut alpha = 1.0f64;
                for _ in 0..30 {
                    let fc = ws.objective(&cand);
                    if fc < f + 1e-14 * (1.0 + f.abs()) {
                        ell = cand;
                        f = fc;
                        improved = true;
                        break;
                    }
                    alpha *= 0.5;
                    cand = (0..dim)
                        .map(|d| (ell[d] + alpha * dir[d]).clamp(LOG_FLOOR, LOG_CEIL))
                        .collect();
                }
            }
            if improved {
                break;
            }
            lambda = if lambda == 0.0 { 1e-4 } else { lambda * 10.0 };
            if lambda > 1e8 {
                break;
            }
        }
        if !improved {
            break;
        }
    }
    if let Some(g) = ws.gradient(&ell) {
        gnorm = g.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    }
    (ell, gnorm)
}

/// Fits the model by REML (or ML when `spec.reml` is false).
pub fn fit_reml(spec: &LmmSpec) -> Result<LmmFit, LmmError> {
    let ws = Workspace::new(spec)?;
    let dim = spec.blocks.len();

    let (ell, gnorm, converged) = if dim == 0 {
        (Vec::new(), 0.0, true)
    } else {
        let mut best: Option<(Vec<f64>, f64, f64)> = None; // (ell, f, gnorm)
        for start in [-2.302585092994046, -9.210340371976182, 0.0] {
            let s = vec![start; dim];
            let (nm_pt, _) = nelder_mead(&ws, &s, 500);
            let (pt, gn) = newton_polish(&ws, &nm_pt);
            let f = ws.objective(&pt);
            let better = match &best {
                None => true,
                Some((_, bf, bg)) => {
                    (gn < GRAD_TOL && *bg >= GRAD_TOL) || (f < bf - 1e-10 && gn < GRAD_TOL) || (f < bf - 1e-10 && *bg >= GRAD_TOL)
                }
            };
            if better {
                best = Some((pt, f, gn));
            }
            if best.as_ref().is_some_and(|(_, _, g)| *g < GRAD_TOL) && start == -2.302585092994046 {
                break; // default start already converged
            }
        }
        let (pt, f, gn) = best.ok_or(LmmError::NonFinite)?;
        if !f.is_finite() {
            return Err(LmmError::NonFinite);
        }
        (pt.clone(), gn, gn < 1e-6)
    };

    let gamma: Vec<f64> =
        ell.iter().map(|&l| l.clamp(LOG_FLOOR, LOG_CEIL).exp()).collect();
    let e = ws.evaluate(&gamma).ok_or(LmmError::NonFinite)?;
    let denom = if ws.reml { (ws.n - ws.p) as f64 } else { ws.n as f64 };
    let sigma2 = e.rss / denom;
    let loglik =
        -0.5 * (e.f + denom * (1.0 + (2.0 * std::f64::consts::PI).ln())) + ws.half_logw;
    // gamma at the floor is numerically zero; report it as such
    let snap = |g: f64| if g <= 1.5e-10 { 0.0 } else { g };
    let mut theta: Vec<f64> = gamma.iter().map(|&g| snap(g) * sigma2).collect();
    theta.push(sigma2);
    let mut component_names: Vec<String> = spec.blocks.iter().map(|b| b.name.clone()).collect();
    component_names.push("residual".into());

    let xwx_inv = e.xwx_chol.inverse();
    let vcov_beta = &xwx_inv * sigma2;
    Ok(LmmFit {
        fixed_names: spec.fixed_names.clone(),
        beta: e.beta.iter().cloned().collect(),
        theta,
        component_names,
        loglik,
        vcov_beta,
        converged,
        grad_norm: gnorm,
        n_obs: ws.n,
        n_fixed: ws.p,
        reml: ws.reml,
        sigma2,
        gamma,
        internals: Internals {
            czz: ws.czz.clone(),
            czx: ws.czx.clone(),
            cxx: ws.cxx.clone(),
            layout: ws.layout.clone(),
        },
    })
}

/// Restricted (or ML) log-likelihood of `spec` profiled at fixed variance
/// ratios `gamma_b = sigma2_b / sigma2` (the residual variance and fixed
/// effects at their conditional optima).
pub fn profiled_loglik(spec: &LmmSpec, gamma: &[f64]) -> Result<f64, LmmError> {
    let ws = Workspace::new(spec)?;
    if gamma.len() != spec.blocks.len() || gamma.iter().any(|&g| !(g >= 0.0) || !g.is_finite()) {
        return Err(LmmError::Spec("gamma must be finite and non-negative per block".into()));
    }
    let e = ws.evaluate(gamma).ok_or(LmmError::NonFinite)?;
    let denom = if ws.reml { (ws.n - ws.p) as f64 } else { ws.n as f64 };
    Ok(-0.5 * (e.f + denom * (1.0 + (2.0 * std::f64::consts::PI).ln())) + ws.half_logw)
}

// ---- Kenward-Roger ----

struct KrPieces {
    phi: DMatrix<f64>,
    phi_a: DMatrix<f64>,
    /// theta-scale -X'V^-1 (dV/dth_r) V^-1 X, one per component.
    p_mats: Vec<DMatrix<f64>>,
    /// REML covariance of theta_hat.
    w_cov: DMatrix<f64>,
    fallback: bool,
}

fn kr_pieces(fit: &LmmFit) -> Result<KrPieces, LmmError> {
    if !fit.reml {
        return Err(LmmError::Spec("Kenward-Roger requires a REML fit".into()));
    }
    let it = &fit.internals;
    let q = it.czz.nrows();
    let p = fit.n_fixed;
    let nb = it.layout.len();
    let n = fit.n_obs as f64;
    let te = fit.sigma2; // theta_eps

    // rebuild W-space operators at the fitted gamma
    let mut s = DVector::zeros(q);
    for (bi, &(off, sz)) in it.layout.iter().enumerate() {
        let g = fit.gamma[bi].max(0.0).sqrt();
        for c in off..off + sz {
            s[c] = g;
        }
    }
    let mut m = DMatrix::identity(q, q);
    for r in 0..q {
        for c in 0..q {
            m[(r, c)] += s[r] * s[c] * it.czz[(r, c)];
        }
    }
    let m_chol = Cholesky::new(m).ok_or(LmmError::NonFinite)?;
    let mut smat = DMatrix::zeros(q, q);
    for r in 0..q {
        smat[(r, r)] = s[r];
    }
    let kw = {
        let minv_s = m_chol.solve(&smat);
        let mut kw = minv_s;
        for r in 0..q {
            for c in 0..q {
                kw[(r, c)] *= s[r];
            }
        }
        kw
    };

    let czx_t = it.czx.transpose(); // p x q
    let kczz = &kw * &it.czz; // q x q
    let zwz = &it.czz - &it.czz * &kczz;
    let xwz = &czx_t - &czx_t * &kw * &it.czz; // p x q
    let xwx = &it.cxx - &czx_t * (&kw * &it.czx); // p x p
    let xwx_chol = Cholesky::new(xwx).ok_or(LmmError::NonFinite)?;
    let phi_w = xwx_chol.inverse();
    let phi = &phi_w * te;

    // W^-2 and W^-3 contractions
    let ikc = DMatrix::identity(q, q) - &kczz; // I - K czz
    let zw2z = &it.czz - &it.czz * &kw * &it.czz * 2.0
        + &it.czz * &kw * &it.czz * &kw * &it.czz;
    let xw2z = &czx_t * (&ikc * &ikc); // p x q
    let kx = &kw * &it.czx; // q x p
    let xw2x = &it.cxx - &czx_t * &kx * 2.0 + kx.transpose() * &it.czz * &kx;
    let xw3x = &it.cxx - &czx_t * &kx * 3.0 + (kx.transpose() * &it.czz * &kx) * 3.0
        - kx.transpose() * &it.czz * &kczz * &kx;
    let tr_kczz = kczz.trace();
    let tr_kczz2 = (&kczz * &kczz).trace();
    let tr_w2 = n - 2.0 * tr_kczz + tr_kczz2;

    // theta-scale P_r and Q_rs; component order: blocks then residual
    let ncomp = nb + 1;
    let mut p_mats: Vec<DMatrix<f64>> = Vec::with_capacity(ncomp);
    for &(off, sz) in &it.layout {
        let xb = xwz.columns(off, sz).into_owned();
        p_mats.push(&xb * xb.transpose() * (-1.0 / (te * te)));
    }
    p_mats.push(xw2x.clone() * (-1.0 / (te * te)));

    let q_mat = |r: usize, c: usize| -> DMatrix<f64> {
        let t3 = te * te * te;
        if r < nb && c < nb {
            let (ro, rs) = it.layout[r];
            let (co, cs) = it.layout[c];
            let xr = xwz.columns(ro, rs).into_owned();
            let xc = xwz.columns(co, cs).into_owned();
            let zz = zwz.view((ro, co), (rs, cs)).into_owned();
            &xr * zz * xc.transpose() / t3
        } else if r == nb && c < nb {
            let (co, cs) = it.layout[c];
            let x2 = xw2z.columns(co, cs).into_owned();
            let xc = xwz.columns(co, cs).into_owned();
            &x2 * xc.transpose() / t3
        } else if r < nb && c == nb {
            q_dual(&xwz, &xw2z, it, r) / t3
        } else {
            xw3x.clone() / t3
        }
    };
    fn q_dual(
        xwz: &DMatrix<f64>,
        xw2z: &DMatrix<f64>,
        it: &Internals,
        r: usize,
    ) -> DMatrix<f64> {
        let (ro, rs) = it.layout[r];
        let xr = xwz.columns(ro, rs).into_owned();
        let x2 = xw2z.columns(ro, rs).into_owned();
        &xr * x2.transpose()
    }

    // tr(V^-1 dV_r V^-1 dV_s)
    let trace_vgvg = |r: usize, c: usize| -> f64 {
        let t2 = te * te;
        if r < nb && c < nb {
            let (ro, rs) = it.layout[r];
            let (co, cs) = it.layout[c];
            let zz = zwz.view((ro, co), (rs, cs));
            zz.iter().map(|v| v * v).sum::<f64>() / t2
        } else if r == nb && c == nb {
            tr_w2 / t2
        } else {
            let b = if r < nb { r } else { c };
            let (off, sz) = it.layout[b];
            (off..off + sz).map(|i| zw2z[(i, i)]).sum::<f64>() / t2
        }
    };

    // expected information and the adjustment sum
    let mut ie = DMatrix::zeros(ncomp, ncomp);
    let mut u = DMatrix::zeros(p, p);
    let mut qs: Vec<Vec<DMatrix<f64>>> = Vec::with_capacity(ncomp);
    for r in 0..ncomp {
        let mut row = Vec::with_capacity(ncomp);
        for c in 0..ncomp {
            row.push(q_mat(r, c));
        }
        qs.push(row);
    }
    for r in 0..ncomp {
        for c in 0..ncomp {
            let t1 = trace_vgvg(r, c);
            let t2 = (&phi * &qs[r][c]).trace();
            let t3 = (&phi * &p_mats[r] * &phi * &p_mats[c]).trace();
            ie[(r, c)] = 0.5 * (t1 - 2.0 * t2 + t3);
        }
    }
    ie = (ie.clone() + ie.transpose()) * 0.5;
    let (w_cov, fallback) = match Cholesky::new(ie.clone()) {
        Some(ch) => (ch.inverse(), false),
        None => (DMatrix::zeros(ncomp, ncomp), true),
    };
    if !fallback {
        for r in 0..ncomp {
            for c in 0..ncomp {
                u += (&qs[r][c] - &p_mats[r] * &phi * &p_mats[c]) * w_cov[(r, c)];
            }
        }
    }
    let phi_a = &phi + (&phi * &u * &phi) * 2.0;
    Ok(KrPieces { phi, phi_a, p_mats, w_cov, fallback })
}

/// Kenward-Roger adjusted covariance of the fixed effects; the flag is true
/// when the fallback to the model-based covariance was taken.
pub fn kr_adjusted_vcov(fit: &LmmFit) -> Result<(DMatrix<f64>, bool), LmmError> {
    let pieces = kr_pieces(fit)?;
    if pieces.fallback {
        Ok((pieces.phi, true))
    } else {
        Ok((pieces.phi_a, false))
    }
}

/// Tests the single contrast `c' beta = 0` with Kenward-Roger SE and df.
pub fn kenward_roger(fit: &LmmFit, contrast: &[f64]) -> Result<KrResult, LmmError> {
    let p = fit.n_fixed;
    if contrast.len() != p {
        return Err(LmmError::Spec(format!("contrast length {} != {p}", contrast.len())));
    }
    let c = DVector::from_column_slice(contrast);
    let pieces = kr_pieces(fit)?;
    let resid_df = (fit.n_obs - fit.n_fixed) as f64;
    let estimate = c
        .iter()
        .zip(fit.beta.iter())
        .map(|(ci, bi)| ci * bi)
        .sum::<f64>();

    let (se, df, fallback) = if pieces.fallback {
        let v = (c.transpose() * &pieces.phi * &c)[(0, 0)];
        (v.sqrt(), resid_df, true)
    } else {
        let c_phi_c = (c.transpose() * &pieces.phi * &c)[(0, 0)];
        let ncomp = pieces.p_mats.len();
        let mut grad = DVector::zeros(ncomp);
        for r in 0..ncomp {
            grad[r] = (c.transpose() * &pieces.phi * &pieces.p_mats[r] * &pieces.phi * &c)[(0, 0)];
        }
        let a = (grad.transpose() * &pieces.w_cov * &grad)[(0, 0)] / (c_phi_c * c_phi_c);
        let v_a = (c.transpose() * &pieces.phi_a * &c)[(0, 0)];
        if a > 0.0 && v_a > 0.0 {
            (v_a.sqrt(), (2.0 / a).max(1.0), false)
        } else {
            let v = (c.transpose() * &pieces.phi * &c)[(0, 0)];
            (v.sqrt(), resid_df, true)
        }
    };

    let t = estimate / se;
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|_| LmmError::NonFinite)?;
    let p_value = 2.0 * dist.cdf(-t.abs());
    Ok(KrResult { estimate, se, df, p_value, fallback })
}
