//! Generalized pairwise comparisons: hierarchical scoring, win statistics,
//! and the cluster-period-pair table feeding the mixed-model estimators.
//!
//! A pair is scored by walking the endpoint hierarchy: the first endpoint
//! that distinguishes the two individuals decides the comparison (+1 first
//! individual wins, -1 loses); if no endpoint distinguishes them the pair
//! ties (0). Win odds treat ties as half a win and half a loss:
//!
//! ```text
//! WO = (n_win + 0.5 n_tie) / (n_loss + 0.5 n_tie)
//! ```
//!
//! When either aggregate is zero, 0.5 is added to both before forming the
//! ratio (continuity correction) and the statistic is flagged. Enumeration
//! is a direct double loop over the two groups; no sorting shortcut.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trial::{Dataset, EndpointHierarchy, EndpointKind};

/// Errors raised by aggregation over comparison strata.
#[derive(Debug, Error)]
pub enum GpcError {
    #[error("no strata with comparisons to pool")]
    NothingToPool,
}

/// Scores a pair of outcome vectors against a hierarchy: +1 if `a` wins,
/// -1 if `b` wins, 0 if every endpoint ties.
pub fn compare_pair(a: &[f64], b: &[f64], hierarchy: &EndpointHierarchy) -> i8 {
    for (m, (_, spec)) in hierarchy.iter().enumerate() {
        let (ya, yb) = (a[m], b[m]);
        let tied = match spec.kind {
            EndpointKind::Binary => ya == yb,
            // equal values always tie, even when the threshold is zero
            EndpointKind::Continuous { tie_threshold } => {
                ya == yb || (ya - yb).abs() < tie_threshold
            }
        };
        if tied {
            continue;
        }
        let a_higher = ya > yb;
        let a_favorable = match spec.direction {
            crate::trial::Direction::HigherIsFavorable => a_higher,
            crate::trial::Direction::LowerIsFavorable => !a_higher,
        };
        return if a_favorable { 1 } else { -1 };
    }
    0
}

/// Win/loss/tie counts for one comparison stratum, with derived statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WinStats {
    pub n_win: u64,
    pub n_loss: u64,
    pub n_tie: u64,
    /// Whether the 0.5 continuity correction was applied to the win odds.
    pub corrected: bool,
}

impl WinStats {
    /// Builds stats from raw counts, deciding the continuity correction.
    pub fn from_counts(n_win: u64, n_loss: u64, n_tie: u64) -> Self {
        let corrected = n_win * 2 + n_tie == 0 || n_loss * 2 + n_tie == 0;
        Self { n_win, n_loss, n_tie, corrected }
    }

    /// Total number of compared pairs.
    pub fn n_pairs(&self) -> u64 {
        self.n_win + self.n_loss + self.n_tie
    }

    fn aggregates(&self) -> (f64, f64) {
        let mut num = self.n_win as f64 + 0.5 * self.n_tie as f64;
        let mut den = self.n_loss as f64 + 0.5 * self.n_tie as f64;
        if self.corrected {
            num += 0.5;
            den += 0.5;
        }
        (num, den)
    }

    /// Win odds, continuity-corrected when a side is empty.
    pub fn win_odds(&self) -> f64 {
        let (num, den) = self.aggregates();
        num / den
    }

    /// Log win odds.
    pub fn log_win_odds(&self) -> f64 {
        self.win_odds().ln()
    }

    /// Win ratio `n_win / n_loss`; +infinity when only wins, NaN for 0/0.
    pub fn win_ratio(&self) -> f64 {
        self.n_win as f64 / self.n_loss as f64
    }

    /// Net treatment benefit `(WO - 1) / (WO + 1)`, the tie-weighted win
    /// proportion difference.
    pub fn net_treatment_benefit(&self) -> f64 {
        let wo = self.win_odds();
        (wo - 1.0) / (wo + 1.0)
    }

    /// Proportion of favorable comparisons `(n_win + 0.5 n_tie) / n_pairs`,
    /// after any continuity correction.
    pub fn win_proportion(&self) -> f64 {
        let (num, den) = self.aggregates();
        num / (num + den)
    }
}

/// Compares every individual of `group_a` with every individual of
/// `group_b` (outcome rows) and tallies wins from `group_a`'s perspective.
pub fn win_stats(
    group_a: &[&[f64]],
    group_b: &[&[f64]],
    hierarchy: &EndpointHierarchy,
) -> WinStats {
    let (mut w, mut l, mut t) = (0u64, 0u64, 0u64);
    for a in group_a {
        for b in group_b {
            match compare_pair(a, b, hierarchy) {
                1 => w += 1,
                -1 => l += 1,
                _ => t += 1,
            }
        }
    }
    WinStats::from_counts(w, l, t)
}

/// Like [`win_stats`], additionally returning each individual's mean
/// comparison score against the opposite group on the {0, 0.5, 1} win
/// scale (the per-individual placement means used for the two-sample
/// U-statistic variance).
pub fn win_stats_with_means(
    group_a: &[&[f64]],
    group_b: &[&[f64]],
    hierarchy: &EndpointHierarchy,
) -> (WinStats, Vec<f64>, Vec<f64>) {
    let (mut w, mut l, mut t) = (0u64, 0u64, 0u64);
    let mut rows = vec![0.0f64; group_a.len()];
    let mut cols = vec![0.0f64; group_b.len()];
    for (i, a) in group_a.iter().enumerate() {
        for (j, b) in group_b.iter().enumerate() {
            let h = match compare_pair(a, b, hierarchy) {
                1 => {
                    w += 1;
                    1.0
                }
                -1 => {
                    l += 1;
                    0.0
                }
                _ => {
                    t += 1;
                    0.5
                }
            };
            rows[i] += h;
            cols[j] += h;
        }
    }
    let nb = group_b.len() as f64;
    let na = group_a.len() as f64;
    for r in rows.iter_mut() {
        *r /= nb;
    }
    for c in cols.iter_mut() {
        *c /= na;
    }
    (WinStats::from_counts(w, l, t), rows, cols)
}

/// Weighted mean of per-stratum log win odds. Strata with zero weight are
/// dropped and the remaining weights renormalized to sum to one.
pub fn pooled_log_wo(strata: &[(f64, f64)]) -> Result<f64, GpcError> {
    let total: f64 = strata.iter().filter(|(_, w)| *w > 0.0).map(|(_, w)| w).sum();
    if !(total > 0.0) {
        return Err(GpcError::NothingToPool);
    }
    Ok(strata
        .iter()
        .filter(|(_, w)| *w > 0.0)
        .map(|(lwo, w)| lwo * w / total)
        .sum())
}

/// One row of the cluster-period-pair table: within cluster `cluster`, the
/// individuals of period `j2` compared against those of period `j1 < j2`
/// (later period first, so `log_wo > 0` favors the later period).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterPeriodPairRow {
    pub cluster: usize,
    pub sequence: usize,
    pub j1: usize,
    pub j2: usize,
    pub n_pairs: u64,
    pub n_win: u64,
    pub n_loss: u64,
    pub n_tie: u64,
    pub log_wo: f64,
    /// Treatment contrast X(k, j2) - X(k, j1), in {0, 1} for monotone paths.
    pub dx: f64,
    /// Period separation j2 - j1.
    pub dj: f64,
    pub corrected: bool,
}

/// Builds the within-cluster period-pair win-odds table over all clusters
/// and ordered period pairs `j1 < j2`, sorted by (cluster, j1, j2). Pairs
/// with an empty cell are skipped; the second element of the return value
/// counts them.
pub fn cluster_period_table(ds: &Dataset) -> (Vec<ClusterPeriodPairRow>, usize) {
    let design = ds.design();
    let (k_n, j_n) = (design.n_clusters(), design.n_periods());
    let mut cells: Vec<Vec<&[f64]>> = vec![Vec::new(); k_n * j_n];
    for r in ds.records() {
        cells[(r.cluster - 1) * j_n + (r.period - 1)].push(&r.outcomes);
    }
    let mut rows = Vec::new();
    let mut skipped = 0usize;
    for k in 1..=k_n {
        for j1 in 1..=j_n {
            for j2 in (j1 + 1)..=j_n {
                let a = &cells[(k - 1) * j_n + (j2 - 1)];
                let b = &cells[(k - 1) * j_n + (j1 - 1)];
                if a.is_empty() || b.is_empty() {
                    skipped += 1;
                    continue;
                }
                let stats = win_stats(a, b, ds.hierarchy());
                let dx = f64::from(design.treatment_indicator(k, j2))
                    - f64::from(design.treatment_indicator(k, j1));
                rows.push(ClusterPeriodPairRow {
                    cluster: k,
                    sequence: design.sequence_of_cluster(k),
                    j1,
                    j2,
                    n_pairs: stats.n_pairs(),
                    n_win: stats.n_win,
                    n_loss: stats.n_loss,
                    n_tie: stats.n_tie,
                    log_wo: stats.log_win_odds(),
                    dx,
                    dj: (j2 - j1) as f64,
                    corrected: stats.corrected,
                });
            }
        }
    }
    (rows, skipped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{simulate_binary, BinaryEndpointParams, RngSpec};
    use crate::trial::{make_uniform_design, Direction, EndpointKind, EndpointSpec};
    use approx::assert_relative_eq;

    fn binary_hierarchy(direction: Direction) -> EndpointHierarchy {
        EndpointHierarchy::new(vec![(
            "y1".into(),
            EndpointSpec { kind: EndpointKind::Binary, direction },
        )])
        .unwrap()
    }

    fn event_then_score() -> EndpointHierarchy {
        EndpointHierarchy::new(vec![
            (
                "event".into(),
                EndpointSpec { kind: EndpointKind::Binary, direction: Direction::LowerIsFavorable },
            ),
            (
                "pam".into(),
                EndpointSpec {
                    kind: EndpointKind::Continuous { tie_threshold: 5.4 },
                    direction: Direction::HigherIsFavorable,
                },
            ),
        ])
        .unwrap()
    }

    #[test]
    fn compare_walks_the_hierarchy() {
        let h = event_then_score();
        // first endpoint decides: a has no event, b has one
        assert_eq!(compare_pair(&[0.0, 50.0], &[1.0, 90.0], &h), 1);
        // first ties, second decides by threshold
        assert_eq!(compare_pair(&[0.0, 70.0], &[0.0, 60.0], &h), 1);
        assert_eq!(compare_pair(&[0.0, 70.0], &[0.0, 66.0], &h), 0); // |4| < 5.4
        assert_eq!(compare_pair(&[1.0, 40.0], &[1.0, 52.0], &h), -1);
        // exactly at the threshold distinguishes
        assert_eq!(compare_pair(&[0.0, 70.0], &[0.0, 64.6], &h), 1);
        // full tie
        assert_eq!(compare_pair(&[1.0, 63.0], &[1.0, 60.0], &h), 0);
    }

    #[test]
    fn compare_is_antisymmetric() {
        let h = event_then_score();
        let rows: Vec<[f64; 2]> =
            vec![[0.0, 50.0], [1.0, 90.0], [0.0, 55.3], [1.0, 50.1], [0.0, 49.9]];
        for a in &rows {
            for b in &rows {
                assert_eq!(compare_pair(a, b, &h), -compare_pair(b, a, &h));
            }
        }
    }

    #[test]
    fn direction_flips_the_sign() {
        let hi = binary_hierarchy(Direction::HigherIsFavorable);
        let lo = binary_hierarchy(Direction::LowerIsFavorable);
        assert_eq!(compare_pair(&[1.0], &[0.0], &hi), 1);
        assert_eq!(compare_pair(&[1.0], &[0.0], &lo), -1);
    }

    #[test]
    fn six_individual_fixture_gives_win_odds_five() {
        // treated {1, 1, 0} vs control {0, 0, 0}: 6 wins, 0 losses, 3 ties
        let h = binary_hierarchy(Direction::HigherIsFavorable);
        let a: Vec<Vec<f64>> = vec![vec![1.0], vec![1.0], vec![0.0]];
        let b: Vec<Vec<f64>> = vec![vec![0.0], vec![0.0], vec![0.0]];
        let ar: Vec<&[f64]> = a.iter().map(|v| v.as_slice()).collect();
        let br: Vec<&[f64]> = b.iter().map(|v| v.as_slice()).collect();
        let s = win_stats(&ar, &br, &h);
        assert_eq!((s.n_win, s.n_loss, s.n_tie), (6, 0, 3));
        assert!(!s.corrected);
        assert_relative_eq!(s.win_odds(), 5.0);
        assert_relative_eq!(s.net_treatment_benefit(), 4.0 / 6.0);
        assert_eq!(s.win_ratio(), f64::INFINITY);
    }

    #[test]
    fn continuity_correction_and_antisymmetry() {
        // all wins, no ties: numerator side of the reverse is zero
        let s = WinStats::from_counts(4, 0, 0);
        assert!(s.corrected);
        assert_relative_eq!(s.win_odds(), 4.5 / 0.5);
        let r = WinStats::from_counts(0, 4, 0);
        assert!(r.corrected);
        assert_relative_eq!(s.win_odds() * r.win_odds(), 1.0, epsilon = 1e-12);
        // ties on both sides prevent the correction
        assert!(!WinStats::from_counts(0, 0, 5).corrected);
        assert_relative_eq!(WinStats::from_counts(0, 0, 5).win_odds(), 1.0);
    }

    #[test]
    fn ntb_identity_and_small_effect_approximation() {
        for &(w, l, t) in &[(60u64, 40u64, 20u64), (55, 50, 10), (102, 98, 40)] {
            let s = WinStats::from_counts(w, l, t);
            let wo = s.win_odds();
            assert_relative_eq!(s.net_treatment_benefit(), (wo - 1.0) / (wo + 1.0));
            let ntb = s.net_treatment_benefit();
            if ntb.abs() < 0.1 {
                assert!((s.log_win_odds() - 2.0 * ntb).abs() < 0.01);
            }
        }
    }

    #[test]
    fn pooled_log_wo_normalizes_and_drops_zero_weights() {
        let v = pooled_log_wo(&[(1.0, 2.0), (0.0, 0.0), (2.0, 2.0)]).unwrap();
        assert_relative_eq!(v, 1.5);
        assert!(pooled_log_wo(&[(1.0, 0.0)]).is_err());
        assert!(pooled_log_wo(&[]).is_err());
    }

    #[test]
    fn table_covers_all_period_pairs() {
        let d = make_uniform_design(45, 5, 6).unwrap();
        let p = BinaryEndpointParams { p0: 0.2, delta: 0.3, beta_t: 0.0, icc: 0.05, cac: 0.9 };
        let ds = simulate_binary(&d, &p, Direction::HigherIsFavorable, 10, &RngSpec::new(3, 0))
            .unwrap();
        let (rows, skipped) = cluster_period_table(&ds);
        assert_eq!(rows.len(), 45 * 15); // K * C(J, 2) = 675
        assert_eq!(skipped, 0);
        for r in &rows {
            assert!(r.j1 < r.j2);
            assert_eq!(r.n_pairs, 100);
            assert_eq!(r.n_win + r.n_loss + r.n_tie, r.n_pairs);
            assert!(r.dx == 0.0 || r.dx == 1.0);
            assert_eq!(r.dj, (r.j2 - r.j1) as f64);
            assert_eq!(r.sequence, d.sequence_of_cluster(r.cluster));
        }
        // sorted by (cluster, j1, j2)
        let mut sorted = rows.clone();
        sorted.sort_by_key(|r| (r.cluster, r.j1, r.j2));
        assert_eq!(rows, sorted);
        // dx = 1 exactly when the pair straddles the switch
        for r in &rows {
            let sw = d.switch_period(r.sequence);
            assert_eq!(r.dx == 1.0, r.j1 < sw && r.j2 >= sw);
        }
    }

    #[test]
    fn table_skips_empty_cells() {
        let d = make_uniform_design(2, 1, 2).unwrap();
        let h = binary_hierarchy(Direction::HigherIsFavorable);
        let recs = vec![crate::trial::IndividualRecord {
            cluster: 1,
            period: 1,
            sequence: 1,
            time: 0.1,
            treatment: 0,
            outcomes: vec![1.0],
        }];
        let ds = Dataset::new(d, h, recs).unwrap();
        let (rows, skipped) = cluster_period_table(&ds);
        assert!(rows.is_empty());
        assert_eq!(skipped, 2);
    }
}
