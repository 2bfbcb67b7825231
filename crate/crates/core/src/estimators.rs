//! The analysis methods: unadjusted and cluster-stratified win odds,
//! mixed-model pooling of cluster-period-pair win odds, and pairwise
//! regression, all reporting on the log win odds scale.
//!
//! Naming: `a*` are direct win-statistic estimators, `b*` pool a
//! within-cluster period-pair win-odds table through a linear mixed model
//! with Kenward-Roger inference, `c*` fit a pairwise logistic regression to
//! individual-level comparisons with a cluster-robust sandwich.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

use crate::gpc::{cluster_period_table, compare_pair, win_stats_with_means, WinStats};
use crate::lmm::{fit_reml, kenward_roger, LmmError, LmmSpec, RandomBlock};
use crate::pim::{fit_pim, PimError, PimPair};
use crate::trial::Dataset;

/// Errors common to all estimators.
#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("no treatment variation in the data")]
    NoTreatmentVariation,
    #[error("degenerate data: {0}")]
    Degenerate(String),
    #[error(transparent)]
    Lmm(#[from] LmmError),
    #[error(transparent)]
    Pim(#[from] PimError),
}

/// Analysis method identifiers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Unadjusted win odds over all treated-vs-control pairs.
    A1,
    /// Cluster-stratified win odds, pair-count weights.
    A2,
    /// Mixed model on period-pair log win odds: random cluster and
    /// period-pair intercepts.
    B1,
    /// B1 plus a random cluster-level treatment slope.
    B2,
    /// B1 plus a random sequence-level treatment slope.
    B3,
    /// B1 plus both treatment slopes.
    B4,
    /// Pairwise regression on all pairs of individuals.
    C1,
    /// Pairwise regression restricted to within-cluster pairs.
    C2,
}

impl Method {
    pub fn all() -> [Method; 8] {
        [
            Method::A1,
            Method::A2,
            Method::B1,
            Method::B2,
            Method::B3,
            Method::B4,
            Method::C1,
            Method::C2,
        ]
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::A1 => "a1",
            Method::A2 => "a2",
            Method::B1 => "b1",
            Method::B2 => "b2",
            Method::B3 => "b3",
            Method::B4 => "b4",
            Method::C1 => "c1",
            Method::C2 => "c2",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "a1" => Ok(Method::A1),
            "a2" => Ok(Method::A2),
            "b1" => Ok(Method::B1),
            "b2" => Ok(Method::B2),
            "b3" => Ok(Method::B3),
            "b4" => Ok(Method::B4),
            "c1" => Ok(Method::C1),
            "c2" => Ok(Method::C2),
            other => Err(format!(
                "unknown method {other:?} (expected one of a1 a2 b1 b2 b3 b4 c1 c2)"
            )),
        }
    }
}

/// Fit quality notes carried alongside every estimate.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Diagnostics {
    pub converged: bool,
    pub warnings: Vec<String>,
}

/// A treatment-effect estimate on the log win odds scale.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub method: Method,
    /// Estimated log win odds of treatment versus control.
    pub delta_hat: f64,
    /// `exp(delta_hat)`.
    pub wo_hat: f64,
    pub std_err: f64,
    /// Denominator degrees of freedom of the t reference, when one is used;
    /// `None` means a standard normal reference.
    pub df: Option<f64>,
    pub p_value: f64,
    pub diagnostics: Diagnostics,
}

/// Upper tail of the standard normal.
pub fn normal_sf(z: f64) -> f64 {
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

/// Sample variance (denominator n - 1); zero for fewer than two values.
fn sample_var(v: &[f64]) -> f64 {
    let n = v.len();
    if n < 2 {
        return 0.0;
    }
    let mean = v.iter().sum::<f64>() / n as f64;
    v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
}

/// Win proportion on the corrected scale when the raw one is degenerate.
fn effective_proportion(stats: &WinStats) -> f64 {
    if stats.corrected {
        let wo = stats.win_odds();
        wo / (1.0 + wo)
    } else {
        stats.win_proportion()
    }
}

fn split_by_treatment<'a>(
    ds: &'a Dataset,
    cluster: Option<usize>,
) -> (Vec<&'a [f64]>, Vec<&'a [f64]>) {
    let mut treated = Vec::new();
    let mut control = Vec::new();
    for r in ds.records() {
        if cluster.is_some_and(|k| k != r.cluster) {
            continue;
        }
        if r.treatment == 1 {
            treated.push(r.outcomes.as_slice());
        } else {
            control.push(r.outcomes.as_slice());
        }
    }
    (treated, control)
}

/// Unadjusted win odds: every treated individual against every control
/// individual, two-sample U-statistic variance, delta method on the logit.
pub fn method_a1(ds: &Dataset) -> Result<FitResult, EstimatorError> {
    let (treated, control) = split_by_treatment(ds, None);
    if treated.is_empty() || control.is_empty() {
        return Err(EstimatorError::NoTreatmentVariation);
    }
    let (stats, v_treated, v_control) = win_stats_with_means(&treated, &control, ds.hierarchy());
    let mut warnings = Vec::new();
    if stats.corrected {
        warnings.push("all comparisons one-sided; continuity correction applied".into());
    }
    let delta_hat = stats.log_win_odds();
    let pi = effective_proportion(&stats);
    let var_pi = sample_var(&v_treated) / treated.len() as f64
        + sample_var(&v_control) / control.len() as f64;
    let deriv = pi * (1.0 - pi);
    let std_err = (var_pi / (deriv * deriv)).sqrt();
    let converged = std_err.is_finite() && std_err > 0.0;
    if !converged {
        warnings.push("degenerate variance estimate".into());
    }
    let z = delta_hat / std_err;
    Ok(FitResult {
        method: Method::A1,
        delta_hat,
        wo_hat: delta_hat.exp(),
        std_err,
        df: None,
        p_value: 2.0 * normal_sf(z.abs()),
        diagnostics: Diagnostics { converged, warnings },
    })
}

/// Cluster-stratified win odds: within-cluster treated-vs-control win
/// proportions pooled with pair-count weights, then mapped to log win odds.
pub fn method_a2(ds: &Dataset) -> Result<FitResult, EstimatorError> {
    let design = ds.design();
    let mut warnings = Vec::new();
    let mut strata: Vec<(f64, f64, f64)> = Vec::new(); // (weight, pi, var_pi)
    let mut skipped = 0usize;
    for k in 1..=design.n_clusters() {
        let (treated, control) = split_by_treatment(ds, Some(k));
        if treated.is_empty() || control.is_empty() {
            skipped += 1;
            continue;
        }
        let (stats, v_treated, v_control) =
            win_stats_with_means(&treated, &control, ds.hierarchy());
        let weight = (treated.len() * control.len()) as f64;
        let pi = effective_proportion(&stats);
        let var_pi = sample_var(&v_treated) / treated.len() as f64
            + sample_var(&v_control) / control.len() as f64;
        strata.push((weight, pi, var_pi));
    }
    if strata.is_empty() {
        return Err(EstimatorError::NoTreatmentVariation);
    }
    if skipped > 0 {
        warnings.push(format!("{skipped} clusters without both arms were skipped"));
    }
    let total: f64 = strata.iter().map(|s| s.0).sum();
    let mut pi = 0.0;
    let mut var_pi = 0.0;
    for (w, p, v) in &strata {
        let wt = w / total;
        pi += wt * p;
        var_pi += wt * wt * v;
    }
    // a pooled proportion of exactly 0 or 1 cannot be mapped to log odds
    let n_pairs_total: f64 = total;
    if pi <= 0.0 || pi >= 1.0 {
        let eps = 0.5 / (n_pairs_total + 1.0);
        pi = pi.clamp(eps, 1.0 - eps);
        warnings.push("pooled win proportion at the boundary; continuity corrected".into());
    }
    let delta_hat = (pi / (1.0 - pi)).ln();
    let deriv = pi * (1.0 - pi);
    let std_err = (var_pi / (deriv * deriv)).sqrt();
    let converged = std_err.is_finite() && std_err > 0.0;
    if !converged {
        warnings.push("degenerate variance estimate".into());
    }
    let z = delta_hat / std_err;
    Ok(FitResult {
        method: Method::A2,
        delta_hat,
        wo_hat: delta_hat.exp(),
        std_err,
        df: None,
        p_value: 2.0 * normal_sf(z.abs()),
        diagnostics: Diagnostics { converged, warnings },
    })
}

/// Builds the mixed-model specification of a `b*` method from the
/// cluster-period-pair table. Returns the spec plus the counts of skipped
/// (empty-cell) pairs and continuity-corrected rows. With
/// `weight_by_pairs`, rows get precision weights proportional to their pair
/// counts (a sensitivity option; the default analyses are unweighted).
pub fn b_model_spec(
    ds: &Dataset,
    method: Method,
    weight_by_pairs: bool,
) -> Result<(LmmSpec, usize, usize), EstimatorError> {
    if !matches!(method, Method::B1 | Method::B2 | Method::B3 | Method::B4) {
        return Err(EstimatorError::Degenerate(format!("{method} is not a mixed-model method")));
    }
    let design = ds.design();
    let (table, skipped) = cluster_period_table(ds);
    if table.is_empty() {
        return Err(EstimatorError::Degenerate("empty period-pair table".into()));
    }
    if table.iter().all(|r| r.dx == 0.0) {
        return Err(EstimatorError::NoTreatmentVariation);
    }
    let n_corrected = table.iter().filter(|r| r.corrected).count();

    let mut pair_levels: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for row in &table {
        let next = pair_levels.len();
        pair_levels.entry((row.j1, row.j2)).or_insert(next);
    }
    let y: Vec<f64> = table.iter().map(|r| r.log_wo).collect();
    let x: Vec<Vec<f64>> = table.iter().map(|r| vec![1.0, r.dx, r.dj]).collect();
    let cluster_level: Vec<usize> = table.iter().map(|r| r.cluster - 1).collect();
    let pair_level: Vec<usize> = table.iter().map(|r| pair_levels[&(r.j1, r.j2)]).collect();
    let dx: Vec<f64> = table.iter().map(|r| r.dx).collect();

    let mut blocks = vec![
        RandomBlock::intercept("cluster", design.n_clusters(), cluster_level.clone()),
        RandomBlock::intercept("period_pair", pair_levels.len(), pair_level),
    ];
    if matches!(method, Method::B2 | Method::B4) {
        blocks.push(RandomBlock::slope(
            "cluster_dx",
            design.n_clusters(),
            cluster_level,
            dx.clone(),
        ));
    }
    if matches!(method, Method::B3 | Method::B4) {
        let seq_level: Vec<usize> = table.iter().map(|r| r.sequence - 1).collect();
        blocks.push(RandomBlock::slope("sequence_dx", design.n_sequences(), seq_level, dx));
    }
    let weights = weight_by_pairs
        .then(|| table.iter().map(|r| r.n_pairs as f64).collect::<Vec<f64>>());

    let spec = LmmSpec {
        y,
        x,
        fixed_names: vec!["intercept".into(), "dx".into(), "dj".into()],
        blocks,
        reml: true,
        weights,
    };
    Ok((spec, skipped, n_corrected))
}

/// Mixed-model pooling of the cluster-period-pair win-odds table.
///
/// Response: log win odds of each within-cluster period pair. Fixed
/// effects: intercept, treatment contrast, period separation. Random
/// structure by variant: cluster and period-pair intercepts (B1), plus a
/// cluster-level treatment slope (B2), a sequence-level slope (B3), or both
/// (B4). Inference on the treatment contrast uses Kenward-Roger.
pub fn method_b(ds: &Dataset, method: Method) -> Result<FitResult, EstimatorError> {
    let (spec, skipped, n_corrected) = b_model_spec(ds, method, false)?;
    let mut warnings = Vec::new();
    if skipped > 0 {
        warnings.push(format!("{skipped} empty cluster-period pairs were skipped"));
    }
    if n_corrected > 0 {
        warnings.push(format!("{n_corrected} period-pair cells used a continuity correction"));
    }
    let fit = fit_reml(&spec)?;
    let kr = kenward_roger(&fit, &[0.0, 1.0, 0.0])?;
    if kr.fallback {
        warnings.push("variance-component information not positive definite; \
             model-based covariance with residual df used"
            .into());
    }
    if !fit.converged {
        warnings.push(format!(
            "variance-component optimizer stopped at gradient norm {:.2e}",
            fit.grad_norm
        ));
    }
    Ok(FitResult {
        method,
        delta_hat: kr.estimate,
        wo_hat: kr.estimate.exp(),
        std_err: kr.se,
        df: Some(kr.df),
        p_value: kr.p_value,
        diagnostics: Diagnostics { converged: fit.converged, warnings },
    })
}

fn score_of(cmp: i8) -> f64 {
    match cmp {
        1 => 1.0,
        -1 => 0.0,
        _ => 0.5,
    }
}

/// All unordered pairs of individuals, in record order.
pub fn build_pairs_all(ds: &Dataset) -> Vec<PimPair> {
    let records = ds.records();
    let h = ds.hierarchy();
    let mut pairs = Vec::with_capacity(records.len() * (records.len().saturating_sub(1)) / 2);
    for i in 0..records.len() {
        for j in (i + 1)..records.len() {
            let (a, b) = (&records[i], &records[j]);
            pairs.push(PimPair {
                i: i as u32,
                j: j as u32,
                s: score_of(compare_pair(&a.outcomes, &b.outcomes, h)),
                dx: f64::from(a.treatment) - f64::from(b.treatment),
                dt: a.time - b.time,
            });
        }
    }
    pairs
}

/// Unordered pairs restricted to individuals of the same cluster.
pub fn build_pairs_within_cluster(ds: &Dataset) -> Vec<PimPair> {
    let records = ds.records();
    let h = ds.hierarchy();
    let mut by_cluster: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (idx, r) in records.iter().enumerate() {
        by_cluster.entry(r.cluster).or_default().push(idx);
    }
    let mut pairs = Vec::new();
    for members in by_cluster.values() {
        for (a_pos, &i) in members.iter().enumerate() {
            for &j in &members[a_pos + 1..] {
                let (a, b) = (&records[i], &records[j]);
                pairs.push(PimPair {
                    i: i as u32,
                    j: j as u32,
                    s: score_of(compare_pair(&a.outcomes, &b.outcomes, h)),
                    dx: f64::from(a.treatment) - f64::from(b.treatment),
                    dt: a.time - b.time,
                });
            }
        }
    }
    pairs
}

/// Pairwise regression of comparison scores on treatment and time
/// differences; C1 uses all pairs, C2 within-cluster pairs only.
pub fn method_c(ds: &Dataset, method: Method) -> Result<FitResult, EstimatorError> {
    let pairs = match method {
        Method::C1 => build_pairs_all(ds),
        Method::C2 => build_pairs_within_cluster(ds),
        other => {
            return Err(EstimatorError::Degenerate(format!(
                "{other} is not a pairwise-regression method"
            )))
        }
    };
    if pairs.is_empty() {
        return Err(EstimatorError::Degenerate("no comparable pairs".into()));
    }
    if pairs.iter().all(|p| p.dx == 0.0) {
        return Err(EstimatorError::NoTreatmentVariation);
    }
    let include_time = pairs.iter().any(|p| p.dt != 0.0);
    let fit = fit_pim(&pairs, ds.records().len(), include_time)?;
    let mut warnings = Vec::new();
    if fit.vcov_projected {
        warnings.push("sandwich covariance projected to positive semidefinite".into());
    }
    let (delta_hat, std_err, p_value) = crate::pim::treatment_test(&fit);
    Ok(FitResult {
        method,
        delta_hat,
        wo_hat: delta_hat.exp(),
        std_err,
        df: None,
        p_value,
        diagnostics: Diagnostics { converged: fit.converged, warnings },
    })
}

/// Runs one method on one dataset.
pub fn run_method(ds: &Dataset, method: Method) -> Result<FitResult, EstimatorError> {
    match method {
        Method::A1 => method_a1(ds),
        Method::A2 => method_a2(ds),
        Method::B1 | Method::B2 | Method::B3 | Method::B4 => method_b(ds, method),
        Method::C1 | Method::C2 => method_c(ds, method),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{simulate_binary, BinaryEndpointParams, RngSpec};
    use crate::trial::{
        make_uniform_design, Direction, EndpointHierarchy, EndpointKind, EndpointSpec,
        IndividualRecord, TrialDesign,
    };
    use approx::assert_relative_eq;

    fn small_dataset(delta: f64, seed: u64) -> Dataset {
        let design = make_uniform_design(10, 5, 6).unwrap();
        let params = BinaryEndpointParams {
            p0: 0.3,
            delta,
            beta_t: 0.02,
            icc: 0.05,
            cac: 0.8,
        };
        simulate_binary(
            &design,
            &params,
            Direction::HigherIsFavorable,
            20,
            &RngSpec { scenario_seed: seed, replicate: 0 },
        )
        .unwrap()
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::all() {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("zz".parse::<Method>().is_err());
        assert_eq!("B4".parse::<Method>().unwrap(), Method::B4);
    }

    #[test]
    fn a1_recovers_a_positive_effect() {
        let ds = small_dataset(1.0, 11);
        let fit = method_a1(&ds).unwrap();
        assert!(fit.diagnostics.converged);
        assert!(fit.wo_hat > 1.0, "wo {}", fit.wo_hat);
        assert_relative_eq!(fit.wo_hat.ln(), fit.delta_hat, epsilon = 1e-12);
        assert!(fit.p_value < 0.05, "p {}", fit.p_value);
        assert!(fit.df.is_none());
    }

    #[test]
    fn a2_is_finite_and_agrees_in_sign_with_a1() {
        let ds = small_dataset(0.8, 12);
        let a1 = method_a1(&ds).unwrap();
        let a2 = method_a2(&ds).unwrap();
        assert!(a2.diagnostics.converged);
        assert_eq!(a1.delta_hat > 0.0, a2.delta_hat > 0.0);
        assert!(a2.std_err > 0.0);
    }

    #[test]
    fn b_methods_fit_and_nest() {
        let ds = small_dataset(0.6, 13);
        let b1 = method_b(&ds, Method::B1).unwrap();
        let b4 = method_b(&ds, Method::B4).unwrap();
        for fit in [&b1, &b4] {
            assert!(fit.std_err > 0.0);
            assert!(fit.df.unwrap() > 1.0);
            assert!(fit.p_value > 0.0 && fit.p_value <= 1.0);
        }
        // same data, same response: the estimates should be in the same
        // neighborhood even though the random structures differ
        assert!((b1.delta_hat - b4.delta_hat).abs() < 1.0);
    }

    #[test]
    fn c_methods_fit_with_time_column() {
        let ds = small_dataset(0.6, 14);
        let c1 = method_c(&ds, Method::C1).unwrap();
        let c2 = method_c(&ds, Method::C2).unwrap();
        for fit in [&c1, &c2] {
            assert!(fit.diagnostics.converged);
            assert!(fit.std_err > 0.0);
            assert!(fit.df.is_none());
        }
    }

    #[test]
    fn dispatcher_covers_every_method() {
        let ds = small_dataset(0.5, 15);
        for m in Method::all() {
            let fit = run_method(&ds, m).unwrap();
            assert_eq!(fit.method, m);
            assert!(fit.delta_hat.is_finite());
        }
    }

    #[test]
    fn treated_only_records_are_rejected() {
        // a valid design, but records observed only in treated cells
        let design =
            TrialDesign::new(vec![1, 1], vec![2], vec![(0.0, 1.0), (1.0, 2.0)]).unwrap();
        let hierarchy = EndpointHierarchy::new(vec![(
            "y1".into(),
            EndpointSpec { kind: EndpointKind::Binary, direction: Direction::HigherIsFavorable },
        )])
        .unwrap();
        let records: Vec<IndividualRecord> = (0..10)
            .map(|i| IndividualRecord {
                cluster: 1 + (i % 2),
                period: 2,
                sequence: 1,
                time: 1.5,
                treatment: 1,
                outcomes: vec![f64::from((i % 3 == 0) as u8)],
            })
            .collect();
        let ds = Dataset::new(design, hierarchy, records).unwrap();
        assert!(matches!(method_a1(&ds), Err(EstimatorError::NoTreatmentVariation)));
        assert!(matches!(
            method_c(&ds, Method::C1),
            Err(EstimatorError::NoTreatmentVariation)
        ));
        // every period pair has an empty control cell, so the table is empty
        assert!(method_b(&ds, Method::B4).is_err());
    }

    #[test]
    fn wrong_family_dispatch_is_an_error() {
        let ds = small_dataset(0.5, 16);
        assert!(method_b(&ds, Method::A1).is_err());
        assert!(method_c(&ds, Method::B1).is_err());
    }
}
