//! Monte Carlo harness: replicated scenarios, operating characteristics,
//! and the two built-in scenario grids (the binary single-endpoint grid and
//! the four-level composite-endpoint study).
//!
//! Determinism contract: every replicate is reproducible in isolation from
//! `(scenario seed, replicate index)`, and scenario summaries are aggregated
//! sequentially in replicate order, so results are identical bytes no matter
//! how many worker threads ran the replicates.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{
    expit, logit, simulate, BinaryEndpointParams, ContinuousEndpointParams, EndpointModel,
    RngSpec,
};
use crate::estimators::{run_method, Method};
use crate::trial::{make_uniform_design, Dataset, Direction, TrialDesign};

/// Two-sided significance threshold used for all rejection decisions.
pub const ALPHA: f64 = 0.05;

/// Scenario descriptors carried through to result rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMeta {
    pub label: String,
    /// Baseline event probability of the first endpoint.
    pub p0: f64,
    pub icc: f64,
    pub cac: f64,
    pub beta_t: f64,
    /// Log odds ratio of the first endpoint.
    pub delta: f64,
    /// `+`-joined endpoint names.
    pub endpoint_set: String,
}

/// A fully specified simulation scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub meta: ScenarioMeta,
    pub design: TrialDesign,
    pub endpoints: Vec<(String, EndpointModel)>,
    pub n_per_cell: usize,
    pub methods: Vec<Method>,
    pub n_reps: u32,
    /// Scenario-level seed; replicate `r` uses the stream family
    /// `(seed, r)`. Grids share one seed so scenarios are compared under
    /// common random numbers.
    pub seed: u64,
}

/// Operating characteristics of one method in one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub n_reps: u32,
    /// Replicates where the method errored or did not converge.
    pub n_fail: u32,
    /// Rejections of the null among the `n_reps - n_fail` usable replicates.
    pub rejections: u32,
    /// `rejections / (n_reps - n_fail)`.
    pub rejection_rate: f64,
    /// Monte Carlo standard error `sqrt(r (1 - r) / n_used)`.
    pub mcse: f64,
    pub mean_delta_hat: f64,
    pub sd_delta_hat: f64,
}

/// All method summaries of one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub meta: ScenarioMeta,
    pub summaries: Vec<MethodSummary>,
}

/// The simulated dataset of one replicate of a scenario.
pub fn replicate_dataset(sc: &Scenario, replicate: u32) -> Dataset {
    let spec = RngSpec { scenario_seed: sc.seed, replicate };
    simulate(&sc.design, &sc.endpoints, sc.n_per_cell, &spec)
        .expect("scenario endpoints and design were validated at construction")
}

/// One method's outcome on one replicate: `None` when the fit failed or did
/// not converge, otherwise the estimate and the rejection decision.
pub type ReplicateOutcome = Option<(f64, bool)>;

/// Runs every method of the scenario on one simulated replicate.
pub fn run_replicate(sc: &Scenario, replicate: u32) -> Vec<(Method, ReplicateOutcome)> {
    let ds = replicate_dataset(sc, replicate);
    sc.methods
        .iter()
        .map(|&m| {
            let out = run_method(&ds, m).ok().and_then(|fit| {
                let usable = fit.diagnostics.converged
                    && fit.delta_hat.is_finite()
                    && fit.p_value.is_finite();
                usable.then_some((fit.delta_hat, fit.p_value < ALPHA))
            });
            (m, out)
        })
        .collect()
}

/// Runs all replicates of a scenario (in parallel) and aggregates
/// sequentially in replicate order.
pub fn run_scenario(sc: &Scenario) -> ScenarioResult {
    let per_rep: Vec<Vec<(Method, ReplicateOutcome)>> =
        (0..sc.n_reps).into_par_iter().map(|r| run_replicate(sc, r)).collect();

    let mut summaries = Vec::with_capacity(sc.methods.len());
    for (mi, &method) in sc.methods.iter().enumerate() {
        let mut n_fail = 0u32;
        let mut rejections = 0u32;
        let mut deltas: Vec<f64> = Vec::with_capacity(per_rep.len());
        for rep in &per_rep {
            debug_assert_eq!(rep[mi].0, method);
            match rep[mi].1 {
                Some((delta, reject)) => {
                    deltas.push(delta);
                    rejections += u32::from(reject);
                }
                None => n_fail += 1,
            }
        }
        let n_used = deltas.len() as f64;
        let (rate, mcse, mean, sd) = if deltas.is_empty() {
            (f64::NAN, f64::NAN, f64::NAN, f64::NAN)
        } else {
            let rate = f64::from(rejections) / n_used;
            let mcse = (rate * (1.0 - rate) / n_used).sqrt();
            let mean = deltas.iter().sum::<f64>() / n_used;
            let sd = if deltas.len() < 2 {
                f64::NAN
            } else {
                (deltas.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n_used - 1.0)).sqrt()
            };
            (rate, mcse, mean, sd)
        };
        summaries.push(MethodSummary {
            method,
            n_reps: sc.n_reps,
            n_fail,
            rejections,
            rejection_rate: rate,
            mcse,
            mean_delta_hat: mean,
            sd_delta_hat: sd,
        });
    }
    ScenarioResult { meta: sc.meta.clone(), summaries }
}

/// The standard 45-cluster, 5-sequence, 6-period design.
pub fn default_design() -> TrialDesign {
    make_uniform_design(45, 5, 6).expect("45/5/6 is a valid uniform design")
}

// compact numeric labels: 0.05 -> "0.05", 1.0 -> "1"
fn trim(v: f64) -> String {
    format!("{v}")
}

/// A single binary-endpoint scenario on the standard design.
pub fn binary_scenario(
    p0: f64,
    icc: f64,
    cac: f64,
    beta_t: f64,
    delta: f64,
    n_reps: u32,
    seed: u64,
    methods: Vec<Method>,
) -> Scenario {
    let label = format!(
        "p0={}_icc={}_cac={}_bt={}_d={}",
        trim(p0),
        trim(icc),
        trim(cac),
        trim(beta_t),
        trim(delta)
    );
    let params = BinaryEndpointParams { p0, delta, beta_t, icc, cac };
    Scenario {
        meta: ScenarioMeta {
            label,
            p0,
            icc,
            cac,
            beta_t,
            delta,
            endpoint_set: "y1".into(),
        },
        design: default_design(),
        endpoints: vec![(
            "y1".into(),
            EndpointModel::Binary { params, direction: Direction::HigherIsFavorable },
        )],
        n_per_cell: 10,
        methods,
        n_reps,
        seed,
    }
}

/// Factor levels of the binary scenario grid.
pub const GRID_P0: [f64; 4] = [0.01, 0.1, 0.2, 0.5];
pub const GRID_ICC: [f64; 4] = [0.0, 0.05, 0.1, 0.3];
pub const GRID_CAC: [f64; 4] = [0.5, 0.75, 0.9, 1.0];
pub const GRID_BETA_T: [f64; 5] = [-0.05, -0.025, 0.0, 0.025, 0.05];
pub const GRID_DELTA: [f64; 5] = [0.0, 0.25, 0.5, 1.0, 1.5];

/// The full binary-endpoint grid: all combinations of the factor levels on
/// the standard design with 10 individuals per cell, every method enabled.
pub fn paper_grid(n_reps: u32, master_seed: u64) -> Vec<Scenario> {
    let mut out = Vec::with_capacity(1600);
    for &p0 in &GRID_P0 {
        for &icc in &GRID_ICC {
            for &cac in &GRID_CAC {
                for &beta_t in &GRID_BETA_T {
                    for &delta in &GRID_DELTA {
                        out.push(binary_scenario(
                            p0,
                            icc,
                            cac,
                            beta_t,
                            delta,
                            n_reps,
                            master_seed,
                            Method::all().to_vec(),
                        ));
                    }
                }
            }
        }
    }
    out
}

/// Component endpoints of the composite-endpoint study, in hierarchy order:
/// three binary events where lower is favorable, then a continuous
/// functional score where higher is favorable.
pub fn composite_endpoints(icc: f64, cac: f64, beta_t: f64) -> Vec<(String, EndpointModel)> {
    let binary = |p0: f64, delta: f64| BinaryEndpointParams { p0, delta, beta_t, icc, cac };
    vec![
        (
            "death".into(),
            EndpointModel::Binary {
                params: binary(0.10, -0.117),
                direction: Direction::LowerIsFavorable,
            },
        ),
        (
            "vte".into(),
            EndpointModel::Binary {
                params: binary(0.066, -0.674),
                direction: Direction::LowerIsFavorable,
            },
        ),
        (
            "bleed".into(),
            EndpointModel::Binary {
                params: binary(0.070, -0.816),
                direction: Direction::LowerIsFavorable,
            },
        ),
        (
            "pam".into(),
            EndpointModel::Continuous {
                params: ContinuousEndpointParams {
                    mu0: 62.6,
                    delta: 5.0,
                    sigma: 13.6,
                    icc,
                    cac,
                    lower: 0.0,
                    upper: 100.0,
                },
                direction: Direction::HigherIsFavorable,
                tie_threshold: 5.4,
            },
        ),
    ]
}

/// Correlation-structure levels of the composite-endpoint study.
pub const ETHER_ICC: [f64; 4] = [0.01, 0.03, 0.05, 0.10];

/// The composite-endpoint scenario grid: correlation structure crossed with
/// the four nested endpoint sets; mixed-model and within-cluster pairwise
/// regression methods only. Because random-effect and outcome streams are
/// keyed per endpoint, nested sets reuse identical draws for their shared
/// endpoints within a replicate.
pub fn ether_scenarios(n_reps: u32, master_seed: u64) -> Vec<Scenario> {
    let mut out = Vec::with_capacity(320);
    for &icc in &ETHER_ICC {
        for &cac in &GRID_CAC {
            for &beta_t in &GRID_BETA_T {
                let full = composite_endpoints(icc, cac, beta_t);
                for m in 1..=full.len() {
                    let endpoints: Vec<_> = full[..m].to_vec();
                    let set: Vec<&str> =
                        endpoints.iter().map(|(n, _)| n.as_str()).collect();
                    let endpoint_set = set.join("+");
                    out.push(Scenario {
                        meta: ScenarioMeta {
                            label: format!(
                                "ether_icc={}_cac={}_bt={}_set={}",
                                trim(icc),
                                trim(cac),
                                trim(beta_t),
                                endpoint_set
                            ),
                            p0: 0.10,
                            icc,
                            cac,
                            beta_t,
                            delta: -0.117,
                            endpoint_set,
                        },
                        design: default_design(),
                        endpoints,
                        n_per_cell: 10,
                        methods: vec![Method::B4, Method::C2],
                        n_reps,
                        seed: master_seed,
                    });
                }
            }
        }
    }
    out
}

/// Header of the long-format results table.
pub const RESULTS_CSV_HEADER: &str = "scenario_label,p0,icc,cac,beta_t,delta,method,\
endpoint_set,n_reps,rejections,rejection_rate,mcse,mean_delta_hat,sd_delta_hat,n_fail";

/// Renders scenario results as the long-format CSV (one row per scenario ×
/// method). Numbers use shortest-roundtrip formatting, so equal inputs give
/// equal bytes.
pub fn results_csv(results: &[ScenarioResult]) -> String {
    let mut out = String::with_capacity(128 * (1 + results.len()));
    out.push_str(RESULTS_CSV_HEADER);
    out.push('\n');
    for res in results {
        let m = &res.meta;
        for s in &res.summaries {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                m.label,
                m.p0,
                m.icc,
                m.cac,
                m.beta_t,
                m.delta,
                s.method,
                m.endpoint_set,
                s.n_reps,
                s.rejections,
                s.rejection_rate,
                s.mcse,
                s.mean_delta_hat,
                s.sd_delta_hat,
                s.n_fail
            ));
        }
    }
    out
}

/// Closed-form win odds of treated vs control for a single binary endpoint
/// (higher is favorable) with control probability `p0` and log odds ratio
/// `delta`, ignoring clustering: ties split evenly.
pub fn true_win_odds_binary(p0: f64, delta: f64) -> f64 {
    assert!(p0 > 0.0 && p0 < 1.0, "p0 must be inside (0, 1)");
    let p_c = p0;
    let p_t = expit(logit(p0) + delta);
    let win = p_t * (1.0 - p_c);
    let loss = p_c * (1.0 - p_t);
    let tie = p_t * p_c + (1.0 - p_t) * (1.0 - p_c);
    (win + 0.5 * tie) / (loss + 0.5 * tie)
}
