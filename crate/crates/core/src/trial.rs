//! Trial structure: stepped-wedge designs, endpoint hierarchies, datasets.
//!
//! Ids are 1-based throughout (`cluster ∈ 1..=K`, `period ∈ 1..=J`,
//! `sequence ∈ 1..=S`), matching the file formats. Treatment is a {0,1}
//! indicator derived from the design: cluster `k` is treated in period `j`
//! iff `j >= switch_period(sequence_of(k))`, so every treatment path is
//! monotone non-decreasing (no reversals).

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised while constructing or validating trial structures.
#[derive(Debug, Error)]
pub enum TrialError {
    #[error("design invalid: {0}")]
    Design(String),
    #[error("endpoint hierarchy invalid: {0}")]
    Hierarchy(String),
    #[error("record {row}: {reason}")]
    Record { row: usize, reason: String },
}

/// Which direction of an outcome is favorable when comparing two individuals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Larger outcome values win (e.g. a functional score).
    HigherIsFavorable,
    /// Smaller outcome values win (e.g. an event indicator).
    LowerIsFavorable,
}

/// Endpoint kind; the tie threshold exists only for continuous endpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EndpointKind {
    /// Outcome restricted to {0, 1}; equal values tie.
    Binary,
    /// Real-valued outcome; absolute differences strictly below
    /// `tie_threshold` tie, differences at or above it distinguish.
    Continuous { tie_threshold: f64 },
}

/// One endpoint of a hierarchy: kind plus favorable direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EndpointSpec {
    #[serde(flatten)]
    pub kind: EndpointKind,
    pub direction: Direction,
}

/// Ordered hierarchy of endpoints, most important first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointHierarchy {
    endpoints: Vec<(String, EndpointSpec)>,
}

impl EndpointHierarchy {
    /// Builds a hierarchy; names must be unique and non-empty, continuous
    /// tie thresholds finite and non-negative.
    pub fn new(endpoints: Vec<(String, EndpointSpec)>) -> Result<Self, TrialError> {
        if endpoints.is_empty() {
            return Err(TrialError::Hierarchy("no endpoints".into()));
        }
        for (i, (name, spec)) in endpoints.iter().enumerate() {
            if name.is_empty() {
                return Err(TrialError::Hierarchy(format!("endpoint {i} has empty name")));
            }
            if endpoints[..i].iter().any(|(n, _)| n == name) {
                return Err(TrialError::Hierarchy(format!("duplicate endpoint name {name:?}")));
            }
            if let EndpointKind::Continuous { tie_threshold } = spec.kind {
                if !tie_threshold.is_finite() || tie_threshold < 0.0 {
                    return Err(TrialError::Hierarchy(format!(
                        "endpoint {name:?}: tie threshold {tie_threshold} must be finite and >= 0"
                    )));
                }
            }
        }
        Ok(Self { endpoints })
    }

    /// Number of endpoints in the hierarchy.
    pub fn len(&self) -> usize {
        self.endpoints.len()
    }

    /// Hierarchies are never empty; provided for completeness.
    pub fn is_empty(&self) -> bool {
        false
    }

    /// Endpoint at hierarchy position `m` (0-based).
    pub fn endpoint(&self, m: usize) -> &EndpointSpec {
        &self.endpoints[m].1
    }

    /// Name of the endpoint at position `m`.
    pub fn name(&self, m: usize) -> &str {
        &self.endpoints[m].0
    }

    /// Iterates `(name, spec)` in hierarchy order.
    pub fn iter(&self) -> impl Iterator<Item = &(String, EndpointSpec)> {
        self.endpoints.iter()
    }

    /// Hierarchy containing only the first `m` endpoints (1 <= m <= len).
    pub fn prefix(&self, m: usize) -> Result<Self, TrialError> {
        if m == 0 || m > self.len() {
            return Err(TrialError::Hierarchy(format!("prefix length {m} out of range")));
        }
        Ok(Self { endpoints: self.endpoints[..m].to_vec() })
    }
}

/// Stepped-wedge design: cluster-to-sequence map, per-sequence switch
/// periods, and contiguous calendar bounds for each period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialDesign {
    n_clusters: usize,
    n_sequences: usize,
    n_periods: usize,
    /// Entry `k-1` is the sequence (1..=S) of cluster `k`.
    sequence_of_cluster: Vec<usize>,
    /// Entry `s-1` is the first treated period (2..=J) of sequence `s`.
    switch_period: Vec<usize>,
    /// Entry `j-1` is the half-open calendar interval `[start, end)` of
    /// period `j`; intervals are contiguous and increasing.
    period_bounds: Vec<(f64, f64)>,
}

impl TrialDesign {
    /// Builds a design, checking all structural invariants.
    pub fn new(
        sequence_of_cluster: Vec<usize>,
        switch_period: Vec<usize>,
        period_bounds: Vec<(f64, f64)>,
    ) -> Result<Self, TrialError> {
        let n_clusters = sequence_of_cluster.len();
        let n_sequences = switch_period.len();
        let n_periods = period_bounds.len();
        if n_clusters == 0 || n_sequences == 0 || n_periods < 2 {
            return Err(TrialError::Design(
                "need at least one cluster, one sequence, and two periods".into(),
            ));
        }
        for (i, &s) in sequence_of_cluster.iter().enumerate() {
            if s < 1 || s > n_sequences {
                return Err(TrialError::Design(format!(
                    "cluster {}: sequence {s} outside 1..={n_sequences}",
                    i + 1
                )));
            }
        }
        for (i, &p) in switch_period.iter().enumerate() {
            if p < 2 || p > n_periods {
                return Err(TrialError::Design(format!(
                    "sequence {}: switch period {p} outside 2..={n_periods}",
                    i + 1
                )));
            }
        }
        for (j, &(lo, hi)) in period_bounds.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(TrialError::Design(format!(
                    "period {}: bounds [{lo}, {hi}) are not a finite non-empty interval",
                    j + 1
                )));
            }
            if j > 0 && period_bounds[j - 1].1 != lo {
                return Err(TrialError::Design(format!(
                    "period {} does not start where period {} ends",
                    j + 1,
                    j
                )));
            }
        }
        Ok(Self { n_clusters, n_sequences, n_periods, sequence_of_cluster, switch_period, period_bounds })
    }

    /// Number of clusters K.
    pub fn n_clusters(&self) -> usize {
        self.n_clusters
    }

    /// Number of sequences S.
    pub fn n_sequences(&self) -> usize {
        self.n_sequences
    }

    /// Number of periods J.
    pub fn n_periods(&self) -> usize {
        self.n_periods
    }

    /// Sequence (1..=S) of cluster `k` (1..=K).
    pub fn sequence_of_cluster(&self, cluster: usize) -> usize {
        self.sequence_of_cluster[cluster - 1]
    }

    /// First treated period of sequence `s` (1..=S).
    pub fn switch_period(&self, sequence: usize) -> usize {
        self.switch_period[sequence - 1]
    }

    /// Calendar bounds `[start, end)` of period `j` (1..=J).
    pub fn period_bounds(&self, period: usize) -> (f64, f64) {
        self.period_bounds[period - 1]
    }

    /// Treatment indicator X(k, j) ∈ {0, 1}.
    pub fn treatment_indicator(&self, cluster: usize, period: usize) -> u8 {
        u8::from(period >= self.switch_period(self.sequence_of_cluster(cluster)))
    }
}

/// Builds the standard uniform stepped wedge: `n_clusters` split into
/// contiguous equal blocks over `n_sequences`, sequence `s` switching at
/// period `s + 1`, `n_periods = n_sequences + 1`, unit period bounds
/// `[j-1, j)` so calendar time spans `[0, J)`.
pub fn make_uniform_design(
    n_clusters: usize,
    n_sequences: usize,
    n_periods: usize,
) -> Result<TrialDesign, TrialError> {
    if n_sequences == 0 || n_clusters % n_sequences != 0 {
        return Err(TrialError::Design(format!(
            "{n_clusters} clusters do not split evenly over {n_sequences} sequences"
        )));
    }
    if n_periods != n_sequences + 1 {
        return Err(TrialError::Design(format!(
            "uniform design needs n_periods = n_sequences + 1, got {n_periods} and {n_sequences}"
        )));
    }
    let per = n_clusters / n_sequences;
    let sequence_of_cluster = (0..n_clusters).map(|k| k / per + 1).collect();
    let switch_period = (1..=n_sequences).map(|s| s + 1).collect();
    let period_bounds = (0..n_periods).map(|j| (j as f64, (j + 1) as f64)).collect();
    TrialDesign::new(sequence_of_cluster, switch_period, period_bounds)
}

/// One individual: position in the design, calendar time, treatment, and
/// the outcome vector ordered by the endpoint hierarchy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndividualRecord {
    pub cluster: usize,
    pub period: usize,
    pub sequence: usize,
    pub time: f64,
    pub treatment: u8,
    pub outcomes: Vec<f64>,
}

/// A validated dataset: design, endpoint hierarchy, and individual records.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    design: TrialDesign,
    hierarchy: EndpointHierarchy,
    records: Vec<IndividualRecord>,
}

impl Dataset {
    /// Builds a dataset, validating every record against the design and
    /// hierarchy (ids in range, sequence and treatment consistent with the
    /// design, time inside its period bounds, binary outcomes in {0, 1},
    /// all outcomes finite).
    pub fn new(
        design: TrialDesign,
        hierarchy: EndpointHierarchy,
        records: Vec<IndividualRecord>,
    ) -> Result<Self, TrialError> {
        Self::build(design, hierarchy, records, true)
    }

    /// Like [`Dataset::new`] but skips the time-inside-period-bounds check;
    /// used when the design was inferred from a file whose time scale is
    /// not known a priori.
    pub fn new_lenient_time(
        design: TrialDesign,
        hierarchy: EndpointHierarchy,
        records: Vec<IndividualRecord>,
    ) -> Result<Self, TrialError> {
        Self::build(design, hierarchy, records, false)
    }

    fn build(
        design: TrialDesign,
        hierarchy: EndpointHierarchy,
        records: Vec<IndividualRecord>,
        strict_time: bool,
    ) -> Result<Self, TrialError> {
        let m = hierarchy.len();
        for (row, r) in records.iter().enumerate() {
            let fail = |reason: String| TrialError::Record { row: row + 1, reason };
            if r.cluster < 1 || r.cluster > design.n_clusters() {
                return Err(fail(format!("cluster {} outside 1..={}", r.cluster, design.n_clusters())));
            }
            if r.period < 1 || r.period > design.n_periods() {
                return Err(fail(format!("period {} outside 1..={}", r.period, design.n_periods())));
            }
            let seq = design.sequence_of_cluster(r.cluster);
            if r.sequence != seq {
                return Err(fail(format!(
                    "sequence {} does not match design sequence {seq} for cluster {}",
                    r.sequence, r.cluster
                )));
            }
            let x = design.treatment_indicator(r.cluster, r.period);
            if r.treatment != x {
                return Err(fail(format!(
                    "treatment {} does not match design indicator {x} for cluster {} period {}",
                    r.treatment, r.cluster, r.period
                )));
            }
            if strict_time {
                let (lo, hi) = design.period_bounds(r.period);
                if !(r.time >= lo && r.time < hi) {
                    return Err(fail(format!(
                        "time {} outside period {} bounds [{lo}, {hi})",
                        r.time, r.period
                    )));
                }
            } else if !r.time.is_finite() {
                return Err(fail(format!("time {} is not finite", r.time)));
            }
            if r.outcomes.len() != m {
                return Err(fail(format!("{} outcomes, hierarchy has {m}", r.outcomes.len())));
            }
            for (i, &y) in r.outcomes.iter().enumerate() {
                if !y.is_finite() {
                    return Err(fail(format!("outcome {} = {y} is not finite", i + 1)));
                }
                if matches!(hierarchy.endpoint(i).kind, EndpointKind::Binary)
                    && y != 0.0
                    && y != 1.0
                {
                    return Err(fail(format!("binary outcome {} = {y} not in {{0, 1}}", i + 1)));
                }
            }
        }
        Ok(Self { design, hierarchy, records })
    }

    /// The stepped-wedge design.
    pub fn design(&self) -> &TrialDesign {
        &self.design
    }

    /// The endpoint hierarchy.
    pub fn hierarchy(&self) -> &EndpointHierarchy {
        &self.hierarchy
    }

    /// All individual records.
    pub fn records(&self) -> &[IndividualRecord] {
        &self.records
    }

    /// Dataset restricted to the first `m` endpoints of the hierarchy;
    /// records keep only the first `m` outcome columns.
    pub fn truncate_endpoints(&self, m: usize) -> Result<Self, TrialError> {
        let hierarchy = self.hierarchy.prefix(m)?;
        let records = self
            .records
            .iter()
            .map(|r| IndividualRecord { outcomes: r.outcomes[..m].to_vec(), ..r.clone() })
            .collect();
        Ok(Self { design: self.design.clone(), hierarchy, records })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_binary() -> EndpointHierarchy {
        EndpointHierarchy::new(vec![(
            "y1".into(),
            EndpointSpec { kind: EndpointKind::Binary, direction: Direction::HigherIsFavorable },
        )])
        .unwrap()
    }

    #[test]
    fn uniform_design_45_5_6() {
        let d = make_uniform_design(45, 5, 6).unwrap();
        assert_eq!(d.n_clusters(), 45);
        assert_eq!(d.n_periods(), 6);
        // 9 clusters per sequence, contiguous blocks
        assert_eq!(d.sequence_of_cluster(1), 1);
        assert_eq!(d.sequence_of_cluster(9), 1);
        assert_eq!(d.sequence_of_cluster(10), 2);
        assert_eq!(d.sequence_of_cluster(45), 5);
        // sequence s switches at period s + 1
        for s in 1..=5 {
            assert_eq!(d.switch_period(s), s + 1);
        }
        // every period 1 is control, every period 6 treated
        for k in 1..=45 {
            assert_eq!(d.treatment_indicator(k, 1), 0);
            assert_eq!(d.treatment_indicator(k, 6), 1);
        }
        // treated cluster-period count: sum over sequences of 9 * (6 - switch + 1)
        let treated: usize = (1..=45)
            .flat_map(|k| (1..=6).map(move |j| (k, j)))
            .filter(|&(k, j)| d.treatment_indicator(k, j) == 1)
            .count();
        assert_eq!(treated, 135);
        assert_eq!(45 * 6 - treated, 135);
        assert_eq!(d.period_bounds(1), (0.0, 1.0));
        assert_eq!(d.period_bounds(6), (5.0, 6.0));
    }

    #[test]
    fn treatment_paths_are_monotone() {
        let d = make_uniform_design(10, 5, 6).unwrap();
        for k in 1..=10 {
            let mut prev = 0;
            for j in 1..=6 {
                let x = d.treatment_indicator(k, j);
                assert!(x >= prev, "cluster {k} reverses at period {j}");
                prev = x;
            }
        }
    }

    #[test]
    fn smallest_valid_design() {
        let d = make_uniform_design(2, 1, 2).unwrap();
        assert_eq!(d.treatment_indicator(1, 1), 0);
        assert_eq!(d.treatment_indicator(2, 2), 1);
    }

    #[test]
    fn uneven_cluster_split_rejected() {
        assert!(make_uniform_design(44, 5, 6).is_err());
    }

    #[test]
    fn wrong_period_count_rejected() {
        assert!(make_uniform_design(45, 5, 7).is_err());
    }

    #[test]
    fn non_contiguous_bounds_rejected() {
        let err = TrialDesign::new(vec![1, 1], vec![2], vec![(0.0, 1.0), (1.5, 2.0)]);
        assert!(err.is_err());
    }

    #[test]
    fn switch_period_one_rejected() {
        // a sequence switching at period 1 would never contribute control time
        assert!(TrialDesign::new(vec![1], vec![1], vec![(0.0, 1.0), (1.0, 2.0)]).is_err());
    }

    #[test]
    fn hierarchy_rejects_duplicates_and_bad_thresholds() {
        let b = EndpointSpec { kind: EndpointKind::Binary, direction: Direction::LowerIsFavorable };
        assert!(EndpointHierarchy::new(vec![("a".into(), b), ("a".into(), b)]).is_err());
        assert!(EndpointHierarchy::new(vec![]).is_err());
        let bad = EndpointSpec {
            kind: EndpointKind::Continuous { tie_threshold: -1.0 },
            direction: Direction::HigherIsFavorable,
        };
        assert!(EndpointHierarchy::new(vec![("pam".into(), bad)]).is_err());
    }

    #[test]
    fn dataset_validates_records() {
        let d = make_uniform_design(2, 1, 2).unwrap();
        let h = one_binary();
        let good = IndividualRecord {
            cluster: 1,
            period: 1,
            sequence: 1,
            time: 0.5,
            treatment: 0,
            outcomes: vec![1.0],
        };
        assert!(Dataset::new(d.clone(), h.clone(), vec![good.clone()]).is_ok());

        let mut bad = good.clone();
        bad.treatment = 1; // contradicts the design indicator
        assert!(Dataset::new(d.clone(), h.clone(), vec![bad]).is_err());

        let mut bad = good.clone();
        bad.time = 1.5; // outside period 1 bounds [0, 1)
        assert!(Dataset::new(d.clone(), h.clone(), vec![bad]).is_err());

        let mut bad = good.clone();
        bad.outcomes = vec![0.5]; // binary outcome must be 0 or 1
        assert!(Dataset::new(d.clone(), h.clone(), vec![bad]).is_err());

        let mut bad = good;
        bad.cluster = 3;
        let err = Dataset::new(d, h, vec![bad]).unwrap_err();
        assert!(matches!(err, TrialError::Record { row: 1, .. }));
    }

    #[test]
    fn truncate_endpoints_keeps_prefix() {
        let d = make_uniform_design(2, 1, 2).unwrap();
        let b = EndpointSpec { kind: EndpointKind::Binary, direction: Direction::LowerIsFavorable };
        let h = EndpointHierarchy::new(vec![("death".into(), b), ("vte".into(), b)]).unwrap();
        let r = IndividualRecord {
            cluster: 1,
            period: 1,
            sequence: 1,
            time: 0.0,
            treatment: 0,
            outcomes: vec![0.0, 1.0],
        };
        let ds = Dataset::new(d, h, vec![r]).unwrap();
        let t = ds.truncate_endpoints(1).unwrap();
        assert_eq!(t.hierarchy().len(), 1);
        assert_eq!(t.records()[0].outcomes, vec![0.0]);
        assert!(ds.truncate_endpoints(3).is_err());
    }
}
