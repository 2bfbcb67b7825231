//! Data generation under cluster/cluster-period random-effects models.
//!
//! Binary endpoints follow a logistic model on the latent scale,
//!
//! ```text
//! logit P(Y=1) = logit(p0) + delta * X + eta_k + zeta_jk + beta_t * t
//! ```
//!
//! with `eta_k ~ N(0, sigma2_cluster)` and `zeta_jk ~ N(0, sigma2_period)`.
//! Continuous endpoints follow the same random-effects structure around a
//! Gaussian mean `mu0 + delta * X`, hard-clamped to a truncation range, and
//! carry no secular trend. Both variances derive from (ICC, CAC) against the
//! model's residual variance: `pi^2/3` for the logistic latent scale,
//! `sigma^2` for the Gaussian.
//!
//! All randomness flows through [`RngSpec`]: every (replicate, purpose,
//! endpoint, cluster, period) tuple keys its own counter-derived ChaCha
//! stream, so replicates are reproducible in isolation, cells do not perturb
//! each other, and nested endpoint subsets share the same random-effect and
//! outcome draws for their common endpoints.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trial::{
    Dataset, Direction, EndpointHierarchy, EndpointKind, EndpointSpec, IndividualRecord,
    TrialDesign, TrialError,
};

/// Residual variance of the standard logistic distribution, `pi^2 / 3`.
pub const LOGISTIC_RESIDUAL_VARIANCE: f64 = std::f64::consts::PI * std::f64::consts::PI / 3.0;

/// Errors raised by parameter validation or dataset assembly.
#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error(transparent)]
    Trial(#[from] TrialError),
}

/// Inverse logit.
pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Log odds of `p` for `p` in (0, 1).
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Splits total clustering given by (ICC, CAC) into cluster and
/// cluster-period variance components against a residual variance:
///
/// ```text
/// sigma2_cluster = CAC * ICC * residual / (1 - ICC)
/// sigma2_period  = (1 - CAC) * ICC * residual / (1 - ICC)
/// ```
pub fn variance_components(
    icc: f64,
    cac: f64,
    residual_variance: f64,
) -> Result<(f64, f64), DatagenError> {
    if !(0.0..1.0).contains(&icc) {
        return Err(DatagenError::Parameter(format!("icc {icc} outside [0, 1)")));
    }
    if !(0.0..=1.0).contains(&cac) {
        return Err(DatagenError::Parameter(format!("cac {cac} outside [0, 1]")));
    }
    if !(residual_variance > 0.0 && residual_variance.is_finite()) {
        return Err(DatagenError::Parameter(format!(
            "residual variance {residual_variance} must be positive and finite"
        )));
    }
    let total = icc / (1.0 - icc) * residual_variance;
    Ok((cac * total, (1.0 - cac) * total))
}

/// Maps variance components back to (ICC, CAC). CAC is undefined (`None`)
/// when both components are zero.
pub fn icc_roundtrip(
    sigma2_cluster: f64,
    sigma2_period: f64,
    residual_variance: f64,
) -> (f64, Option<f64>) {
    let between = sigma2_cluster + sigma2_period;
    let icc = between / (between + residual_variance);
    let cac = if between > 0.0 { Some(sigma2_cluster / between) } else { None };
    (icc, cac)
}

/// Parameters of one binary endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryEndpointParams {
    /// Control-condition outcome probability at time 0.
    pub p0: f64,
    /// Treatment effect on the log-odds scale.
    pub delta: f64,
    /// Linear secular trend per unit calendar time, on the log-odds scale.
    pub beta_t: f64,
    pub icc: f64,
    pub cac: f64,
}

impl BinaryEndpointParams {
    fn validate(&self) -> Result<(), DatagenError> {
        if !(self.p0 > 0.0 && self.p0 < 1.0) {
            return Err(DatagenError::Parameter(format!("p0 {} outside (0, 1)", self.p0)));
        }
        if !self.delta.is_finite() || !self.beta_t.is_finite() {
            return Err(DatagenError::Parameter("delta and beta_t must be finite".into()));
        }
        variance_components(self.icc, self.cac, LOGISTIC_RESIDUAL_VARIANCE).map(|_| ())
    }
}

/// Parameters of one continuous (truncated Gaussian) endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContinuousEndpointParams {
    /// Control-condition mean.
    pub mu0: f64,
    /// Treatment effect on the outcome scale.
    pub delta: f64,
    /// Residual standard deviation before truncation.
    pub sigma: f64,
    pub icc: f64,
    pub cac: f64,
    /// Hard clamp range `[lower, upper]` applied after drawing.
    pub lower: f64,
    pub upper: f64,
}

impl ContinuousEndpointParams {
    fn validate(&self) -> Result<(), DatagenError> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(DatagenError::Parameter(format!("sigma {} must be positive", self.sigma)));
        }
        if !self.mu0.is_finite() || !self.delta.is_finite() {
            return Err(DatagenError::Parameter("mu0 and delta must be finite".into()));
        }
        if !(self.lower < self.upper) {
            return Err(DatagenError::Parameter(format!(
                "truncation range [{}, {}] is empty",
                self.lower, self.upper
            )));
        }
        variance_components(self.icc, self.cac, self.sigma * self.sigma).map(|_| ())
    }
}

/// Generative model of one endpoint of a simulated trial.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "model")]
pub enum EndpointModel {
    Binary { params: BinaryEndpointParams, direction: Direction },
    Continuous { params: ContinuousEndpointParams, direction: Direction, tie_threshold: f64 },
}

impl EndpointModel {
    /// The comparison spec induced by this generative model.
    pub fn spec(&self) -> EndpointSpec {
        match *self {
            EndpointModel::Binary { direction, .. } => {
                EndpointSpec { kind: EndpointKind::Binary, direction }
            }
            EndpointModel::Continuous { direction, tie_threshold, .. } => {
                EndpointSpec { kind: EndpointKind::Continuous { tie_threshold }, direction }
            }
        }
    }

    fn validate(&self) -> Result<(), DatagenError> {
        match self {
            EndpointModel::Binary { params, .. } => params.validate(),
            EndpointModel::Continuous { params, .. } => params.validate(),
        }
    }
}

/// Deterministic seed derivation: a scenario seed plus a replicate index.
/// Independent streams for any id tuple come from [`RngSpec::stream`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngSpec {
    pub scenario_seed: u64,
    pub replicate: u32,
}

// Stream purposes; part of the stream key, so reordering draws of one
// purpose never affects another.
const STREAM_TIME: u64 = 1;
const STREAM_CLUSTER_EFFECT: u64 = 2;
const STREAM_PERIOD_EFFECT: u64 = 3;
const STREAM_OUTCOME: u64 = 4;

fn splitmix_absorb(state: u64, value: u64) -> u64 {
    let mut z = state
        .wrapping_add(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(value.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngSpec {
    /// Creates the spec for one replicate of a scenario.
    pub fn new(scenario_seed: u64, replicate: u32) -> Self {
        Self { scenario_seed, replicate }
    }

    /// Counter-derived ChaCha stream for an id tuple. The same
    /// (seed, replicate, ids) always yields the same stream; any change to
    /// one component yields an unrelated stream.
    pub fn stream(&self, ids: &[u64]) -> ChaCha8Rng {
        let mut h = splitmix_absorb(self.scenario_seed, u64::from(self.replicate));
        h = splitmix_absorb(h, ids.len() as u64);
        for &id in ids {
            h = splitmix_absorb(h, id);
        }
        let mut seed = [0u8; 32];
        let mut s = h;
        for chunk in seed.chunks_exact_mut(8) {
            s = splitmix_absorb(s, 0x243f_6a88_85a3_08d3);
            chunk.copy_from_slice(&s.to_le_bytes());
        }
        ChaCha8Rng::from_seed(seed)
    }
}

fn normal_draw(rng: &mut ChaCha8Rng, sd: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    sd * z
}

/// Simulates a multi-endpoint dataset: `n_per_cell` individuals in every
/// cluster-period cell, times uniform within the period bounds, outcomes per
/// [`EndpointModel`]. Records are ordered by (cluster, period, draw index).
pub fn simulate(
    design: &TrialDesign,
    endpoints: &[(String, EndpointModel)],
    n_per_cell: usize,
    rng: &RngSpec,
) -> Result<Dataset, DatagenError> {
    for (_, model) in endpoints {
        model.validate()?;
    }
    let hierarchy = EndpointHierarchy::new(
        endpoints.iter().map(|(name, model)| (name.clone(), model.spec())).collect(),
    )?;
    let (k_n, j_n, m_n) = (design.n_clusters(), design.n_periods(), endpoints.len());

    // Random effects, one stream per (endpoint, cluster[, period]). Draws are
    // taken even for zero variance so stream consumption does not depend on
    // the ICC/CAC setting.
    let mut eta = vec![vec![0.0; k_n]; m_n];
    let mut zeta = vec![vec![0.0; k_n * j_n]; m_n];
    for (m, (_, model)) in endpoints.iter().enumerate() {
        let (icc, cac, resid) = match model {
            EndpointModel::Binary { params, .. } => {
                (params.icc, params.cac, LOGISTIC_RESIDUAL_VARIANCE)
            }
            EndpointModel::Continuous { params, .. } => {
                (params.icc, params.cac, params.sigma * params.sigma)
            }
        };
        let (s2c, s2p) = variance_components(icc, cac, resid)?;
        for k in 1..=k_n {
            let mut r = rng.stream(&[STREAM_CLUSTER_EFFECT, m as u64, k as u64]);
            eta[m][k - 1] = normal_draw(&mut r, s2c.sqrt());
            for j in 1..=j_n {
                let mut r = rng.stream(&[STREAM_PERIOD_EFFECT, m as u64, k as u64, j as u64]);
                zeta[m][(k - 1) * j_n + (j - 1)] = normal_draw(&mut r, s2p.sqrt());
            }
        }
    }

    let mut records = Vec::with_capacity(k_n * j_n * n_per_cell);
    for k in 1..=k_n {
        let seq = design.sequence_of_cluster(k);
        for j in 1..=j_n {
            let x = design.treatment_indicator(k, j);
            let (lo, hi) = design.period_bounds(j);
            let mut time_rng = rng.stream(&[STREAM_TIME, k as u64, j as u64]);
            let times: Vec<f64> =
                (0..n_per_cell).map(|_| time_rng.random_range(lo..hi)).collect();

            let mut cols = vec![vec![0.0; n_per_cell]; m_n];
            for (m, (_, model)) in endpoints.iter().enumerate() {
                let re = eta[m][k - 1] + zeta[m][(k - 1) * j_n + (j - 1)];
                let mut out_rng = rng.stream(&[STREAM_OUTCOME, m as u64, k as u64, j as u64]);
                match model {
                    EndpointModel::Binary { params, .. } => {
                        let base = logit(params.p0) + params.delta * f64::from(x) + re;
                        for (i, &t) in times.iter().enumerate() {
                            let p = expit(base + params.beta_t * t);
                            cols[m][i] = f64::from(out_rng.random::<f64>() < p);
                        }
                    }
                    EndpointModel::Continuous { params, .. } => {
                        let mean = params.mu0 + params.delta * f64::from(x) + re;
                        for slot in cols[m].iter_mut() {
                            let y = mean + normal_draw(&mut out_rng, params.sigma);
                            *slot = y.clamp(params.lower, params.upper);
                        }
                    }
                }
            }

            for i in 0..n_per_cell {
                records.push(IndividualRecord {
                    cluster: k,
                    period: j,
                    sequence: seq,
                    time: times[i],
                    treatment: x,
                    outcomes: (0..m_n).map(|m| cols[m][i]).collect(),
                });
            }
        }
    }
    Ok(Dataset::new(design.clone(), hierarchy, records)?)
}

/// Simulates a single-binary-endpoint dataset (endpoint name `y1`).
pub fn simulate_binary(
    design: &TrialDesign,
    params: &BinaryEndpointParams,
    direction: Direction,
    n_per_cell: usize,
    rng: &RngSpec,
) -> Result<Dataset, DatagenError> {
    simulate(
        design,
        &[("y1".into(), EndpointModel::Binary { params: *params, direction })],
        n_per_cell,
        rng,
    )
}

/// Simulates one continuous outcome column in canonical record order
/// (cluster asc, period asc, draw index asc), as endpoint index 0. Useful
/// for assembling columns into multi-endpoint datasets or inspecting the
/// truncation behaviour in isolation.
pub fn simulate_continuous(
    design: &TrialDesign,
    params: &ContinuousEndpointParams,
    n_per_cell: usize,
    rng: &RngSpec,
) -> Result<Vec<f64>, DatagenError> {
    let ds = simulate(
        design,
        &[(
            "y1".into(),
            EndpointModel::Continuous {
                params: *params,
                direction: Direction::HigherIsFavorable,
                tie_threshold: 0.0,
            },
        )],
        n_per_cell,
        rng,
    )?;
    Ok(ds.records().iter().map(|r| r.outcomes[0]).collect())
}
