//! Logical process control component.
//!
//! Implements the adaptive optimism control of Shock Resistant Time Warp:
//! cumulative sensors are turned into per-second indicator rates at
//! GVT-linked intervals, the bounded cluster space is searched for the most
//! similar past state with a higher committed-move rate, and the actuator
//! derived from it caps the number of uncommitted transaction moves.

use serde::{Deserialize, Serialize};

use crate::logging::{names, Log};
use crate::report::LpStats;

/// Number of indicator components.
pub const INDICATOR_DIM: usize = 8;

/// Index of the committed-move rate (the performance indicator).
pub const IDX_COMMITTED_RATE: usize = 0;
/// Index of the average uncommitted moves (linked to the actuator).
pub const IDX_AVG_UNCOMMITTED: usize = 1;

/// Confidence multiplier for the actuator upper limit (two-sided 95%).
pub const CONFIDENCE_Z: f64 = 1.96;

/// Indicator vector in the fixed component order:
/// [committed move rate, avg uncommitted moves, simulate rate, xact sent
/// rate, anti-xact sent rate, xact received rate, anti-xact received rate,
/// moves rolled back rate].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndicatorSet {
    pub values: [f64; INDICATOR_DIM],
}

impl IndicatorSet {
    pub fn committed_move_rate(&self) -> f64 {
        self.values[IDX_COMMITTED_RATE]
    }

    pub fn avg_uncommitted_moves(&self) -> f64 {
        self.values[IDX_AVG_UNCOMMITTED]
    }

    /// Integer rendering used in the LPCC logs.
    pub fn render(&self) -> String {
        let ints: Vec<String> = self
            .values
            .iter()
            .map(|v| format!("{}", v.floor() as i64))
            .collect();
        format!("[{}]", ints.join(","))
    }
}

/// Euclidean distance ignoring the committed-move rate and the average
/// uncommitted moves.
pub fn distance(a: &IndicatorSet, b: &IndicatorSet) -> f64 {
    (2..INDICATOR_DIM)
        .map(|i| (a.values[i] - b.values[i]).powi(2))
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub mean: IndicatorSet,
    pub members: u64,
}

/// Bounded set of mean-position clusters over past indicator sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpace {
    clusters: Vec<Cluster>,
    max_clusters: usize,
}

impl ClusterSpace {
    pub fn new(max_clusters: usize) -> ClusterSpace {
        ClusterSpace {
            clusters: Vec::new(),
            max_clusters: max_clusters.max(1),
        }
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    pub fn clusters(&self) -> &[Cluster] {
        &self.clusters
    }

    /// Most similar past state with a strictly higher committed-move rate.
    pub fn closest_better(&self, current: &IndicatorSet) -> Option<IndicatorSet> {
        self.clusters
            .iter()
            .filter(|c| c.mean.committed_move_rate() > current.committed_move_rate())
            .map(|c| (distance(&c.mean, current), c.mean))
            .min_by(|(d1, _), (d2, _)| d1.total_cmp(d2))
            .map(|(_, mean)| mean)
    }

    /// Adds an indicator set. Below capacity it becomes a new cluster.
    /// At capacity the new set is absorbed into its nearest cluster when it
    /// is closer to one than any two clusters are to each other; otherwise
    /// the two closest clusters merge and the set starts a fresh cluster.
    pub fn add(&mut self, v: IndicatorSet) {
        if self.clusters.len() < self.max_clusters {
            self.clusters.push(Cluster {
                mean: v,
                members: 1,
            });
            return;
        }
        let nearest = self
            .clusters
            .iter()
            .enumerate()
            .map(|(i, c)| (distance(&c.mean, &v), i))
            .min_by(|(d1, _), (d2, _)| d1.total_cmp(d2))
            .expect("space at capacity is non-empty");
        let mut closest_pair = (f64::INFINITY, 0usize, 0usize);
        for i in 0..self.clusters.len() {
            for j in i + 1..self.clusters.len() {
                let d = distance(&self.clusters[i].mean, &self.clusters[j].mean);
                if d < closest_pair.0 {
                    closest_pair = (d, i, j);
                }
            }
        }
        if nearest.0 < closest_pair.0 || self.clusters.len() == 1 {
            let c = &mut self.clusters[nearest.1];
            let n = c.members as f64;
            for i in 0..INDICATOR_DIM {
                c.mean.values[i] = (c.mean.values[i] * n + v.values[i]) / (n + 1.0);
            }
            c.members += 1;
        } else {
            let (_, i, j) = closest_pair;
            let (a, b) = (self.clusters[i].clone(), self.clusters[j].clone());
            let total = (a.members + b.members) as f64;
            let mut merged = Cluster {
                mean: a.mean,
                members: a.members + b.members,
            };
            for k in 0..INDICATOR_DIM {
                merged.mean.values[k] = (a.mean.values[k] * a.members as f64
                    + b.mean.values[k] * b.members as f64)
                    / total;
            }
            self.clusters.remove(j);
            self.clusters.remove(i);
            self.clusters.push(merged);
            self.clusters.push(Cluster {
                mean: v,
                members: 1,
            });
        }
    }
}

/// Upper actuator limit from a mean and standard deviation at 95%
/// confidence.
pub fn upper_limit(mean: f64, sigma: f64) -> i64 {
    (mean + CONFIDENCE_Z * sigma).ceil() as i64
}

/// Sample standard deviation from running (sum, square sum, count).
pub fn std_deviation(sum: f64, sqr_sum: f64, count: f64) -> f64 {
    if count < 2.0 {
        return 0.0;
    }
    ((sqr_sum - sum * sum / count) / (count - 1.0))
        .max(0.0)
        .sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Actuator {
    /// Mean uncommitted-move limit; `i64::MAX` when unbounded.
    pub mean_limit: i64,
    /// Upper uncommitted-move limit; `i64::MAX` when unbounded.
    pub upper_limit: i64,
}

impl Actuator {
    pub fn unbounded() -> Actuator {
        Actuator {
            mean_limit: i64::MAX,
            upper_limit: i64::MAX,
        }
    }

    pub fn is_unbounded(&self) -> bool {
        self.upper_limit == i64::MAX
    }
}

/// Per-LP control component state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpControlComponent {
    space: ClusterSpace,
    actuator: Actuator,
    sample_sum: f64,
    sample_sqr_sum: f64,
    sample_count: u64,
    sample_max: u64,
    last_processing_ms: u64,
    last_sensors: LpStats,
}

impl LpControlComponent {
    pub fn new(max_clusters: usize) -> LpControlComponent {
        LpControlComponent {
            space: ClusterSpace::new(max_clusters),
            actuator: Actuator::unbounded(),
            sample_sum: 0.0,
            sample_sqr_sum: 0.0,
            sample_count: 0,
            sample_max: 0,
            last_processing_ms: 0,
            last_sensors: LpStats::default(),
        }
    }

    pub fn actuator(&self) -> Actuator {
        self.actuator
    }

    pub fn space(&self) -> &ClusterSpace {
        &self.space
    }

    pub fn sample_stats(&self) -> (f64, f64, u64, u64) {
        (
            self.sample_sum,
            self.sample_sqr_sum,
            self.sample_count,
            self.sample_max,
        )
    }

    /// Marks the start of the first processing interval.
    pub fn note_started(&mut self, now_ms: u64) {
        self.last_processing_ms = now_ms;
    }

    /// Records one scheduling-cycle sample of the uncommitted move count.
    pub fn record_cycle_sample(&mut self, uncommitted_moves: u64) {
        let v = uncommitted_moves as f64;
        self.sample_sum += v;
        self.sample_sqr_sum += v * v;
        self.sample_count += 1;
        self.sample_max = self.sample_max.max(uncommitted_moves);
    }

    /// True when the uncommitted move count is within the actuator limit.
    pub fn is_within_actuator_range(&self, uncommitted_moves: u64) -> bool {
        self.actuator.is_unbounded() || uncommitted_moves as i64 <= self.actuator.upper_limit
    }

    /// Main LPCC processing, run after a GVT delivery that asked for it.
    /// Builds the indicator set for the elapsed interval, searches the
    /// cluster space for the closest better past state, derives the new
    /// actuator and stores the current set.
    pub fn process_sensor_values(&mut self, now_ms: u64, sensors: &LpStats, log: &Log) {
        let interval_ms = now_ms.saturating_sub(self.last_processing_ms).max(1);
        log.debug(
            names::LP_LPCC,
            &format!(
                "CommittedMoves now: {}, last time: {}, time diff {}ms",
                sensors.committed_moves, self.last_sensors.committed_moves, interval_ms
            ),
        );

        if self.sample_count == 0 {
            self.actuator = Actuator::unbounded();
            log.debug(
                names::LP_LPCC,
                &format!(
                    "Actuator upper limit {}, mean limit {}",
                    self.actuator.upper_limit, self.actuator.mean_limit
                ),
            );
            self.last_processing_ms = now_ms;
            self.last_sensors = *sensors;
            return;
        }

        let count = self.sample_count as f64;
        let avg_uncommitted = self.sample_sum / count;
        let sigma = std_deviation(self.sample_sum, self.sample_sqr_sum, count);
        log.debug(
            names::LP_LPCC,
            &format!(
                "Uncommitted moves avg: {}, sum: {}, sqr sum: {}, count: {}",
                avg_uncommitted.floor() as i64,
                self.sample_sum as i64,
                self.sample_sqr_sum as i64,
                self.sample_count
            ),
        );
        log.debug(
            names::LP_LPCC,
            &format!("Set new std derivation: {sigma:.6}"),
        );
        log.debug(
            names::LP_LPCC,
            &format!("Max uncommitted moves: {}", self.sample_max),
        );

        let secs = interval_ms as f64 / 1000.0;
        let rate = |now: u64, before: u64| (now.saturating_sub(before)) as f64 / secs;
        let current = IndicatorSet {
            values: [
                rate(sensors.committed_moves, self.last_sensors.committed_moves),
                avg_uncommitted,
                rate(sensors.simulated_moves, self.last_sensors.simulated_moves),
                rate(sensors.xacts_sent, self.last_sensors.xacts_sent),
                rate(sensors.anti_xacts_sent, self.last_sensors.anti_xacts_sent),
                rate(sensors.xacts_received, self.last_sensors.xacts_received),
                rate(
                    sensors.anti_xacts_received,
                    self.last_sensors.anti_xacts_received,
                ),
                rate(sensors.moves_rolled_back, self.last_sensors.moves_rolled_back),
            ],
        };

        match self.space.closest_better(&current) {
            Some(found) => {
                log.debug(
                    names::LP_LPCC_STATESPACE,
                    &format!("Get better indicator set: {}", found.render()),
                );
                let mean = found.avg_uncommitted_moves();
                self.actuator = Actuator {
                    mean_limit: mean.floor() as i64,
                    upper_limit: upper_limit(mean, sigma),
                };
            }
            None => {
                log.debug(names::LP_LPCC_STATESPACE, "Get better indicator set: non found");
                self.actuator = Actuator::unbounded();
            }
        }
        self.space.add(current);
        log.debug(
            names::LP_LPCC_STATESPACE,
            &format!(
                "Current indicator set {} added to Clustered State Space",
                current.render()
            ),
        );
        log.debug(
            names::LP_LPCC,
            &format!(
                "LPCC processed, total committed moves: {}",
                sensors.committed_moves
            ),
        );
        log.debug(
            names::LP_LPCC,
            &format!(
                "Actuator upper limit {}, mean limit {}",
                self.actuator.upper_limit, self.actuator.mean_limit
            ),
        );

        self.sample_sum = 0.0;
        self.sample_sqr_sum = 0.0;
        self.sample_count = 0;
        self.sample_max = 0;
        self.last_processing_ms = now_ms;
        self.last_sensors = *sensors;
    }

    /// Logs the actuator-exceeded line; used by the LP when the check fails.
    pub fn log_limit_exceeded(&self, uncommitted: u64, log: &Log) {
        log.debug(
            names::LP_LPCC,
            &format!(
                "Actuator limit (limit of uncommitted transaction moves) exceeded, current uncommitted moves: {uncommitted}, limit: {}",
                self.actuator.upper_limit
            ),
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec8(values: [f64; 8]) -> IndicatorSet {
        IndicatorSet { values }
    }

    #[test]
    fn sample_recording_accumulates_sum_square_and_count() {
        let mut lpcc = LpControlComponent::new(10);
        for v in [1, 2, 3] {
            lpcc.record_cycle_sample(v);
        }
        let (sum, sqr, count, max) = lpcc.sample_stats();
        assert_eq!(sum, 6.0);
        assert_eq!(sqr, 14.0);
        assert_eq!(count, 3);
        assert_eq!(max, 3);
    }

    #[test]
    fn std_deviation_matches_two_pass_oracle() {
        let samples: Vec<f64> = (0..1000).map(|i| ((i * 37) % 101) as f64).collect();
        let sum: f64 = samples.iter().sum();
        let sqr: f64 = samples.iter().map(|v| v * v).sum();
        let mean = sum / samples.len() as f64;
        let n = samples.len() as f64;
        let two_pass =
            (samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let running = std_deviation(sum, sqr, n);
        assert!((two_pass - running).abs() / two_pass < 1e-6);
    }

    #[test]
    fn distance_ignores_first_two_components() {
        let a = vec8([0.0, 0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = vec8([999.0, -50.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(distance(&a, &b), 0.0);
    }

    #[test]
    fn closest_better_requires_strictly_higher_committed_rate() {
        let mut space = ClusterSpace::new(10);
        assert!(space.closest_better(&vec8([10.0; 8])).is_none());
        space.add(vec8([5.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]));
        space.add(vec8([10.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]));
        let current = vec8([10.0, 3.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(space.closest_better(&current).is_none());
        let lower = vec8([4.0, 3.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let found = space.closest_better(&lower).unwrap();
        assert_eq!(found.committed_move_rate(), 5.0);
    }

    #[test]
    fn closest_better_picks_minimum_distance_over_the_six_components() {
        let mut space = ClusterSpace::new(10);
        // A: rate 2001, distance 5 from current; B: rate 2100, distance 9.
        space.add(vec8([2001.0, 0.0, 5.0, 0.0, 0.0, 0.0, 0.0, 0.0]));
        space.add(vec8([2100.0, 0.0, 9.0, 0.0, 0.0, 0.0, 0.0, 0.0]));
        let current = vec8([1847.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let found = space.closest_better(&current).unwrap();
        assert_eq!(found.committed_move_rate(), 2001.0);
    }

    #[test]
    fn absorb_into_nearest_cluster_updates_the_mean() {
        // max 2, clusters at 0 and 10 (component 2); adding 1 is closer to
        // cluster 0 than the inter-cluster distance, so it is absorbed.
        let mut space = ClusterSpace::new(2);
        space.add(vec8([0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]));
        space.add(vec8([0.0, 0.0, 10.0, 0.0, 0.0, 0.0, 0.0, 0.0]));
        space.add(vec8([0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]));
        assert_eq!(space.len(), 2);
        let mut means: Vec<f64> = space.clusters().iter().map(|c| c.mean.values[2]).collect();
        means.sort_by(f64::total_cmp);
        assert_eq!(means, vec![0.5, 10.0]);
    }

    #[test]
    fn merge_two_closest_and_start_fresh_cluster() {
        // max 2, clusters at 0 and 1; adding 10 forces a merge of (0,1) into
        // 0.5 and the new vector becomes its own cluster.
        let mut space = ClusterSpace::new(2);
        space.add(vec8([0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]));
        space.add(vec8([0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]));
        space.add(vec8([0.0, 0.0, 10.0, 0.0, 0.0, 0.0, 0.0, 0.0]));
        assert_eq!(space.len(), 2);
        let mut means: Vec<f64> = space.clusters().iter().map(|c| c.mean.values[2]).collect();
        means.sort_by(f64::total_cmp);
        assert_eq!(means, vec![0.5, 10.0]);
        let merged = space
            .clusters()
            .iter()
            .find(|c| c.mean.values[2] == 0.5)
            .unwrap();
        assert_eq!(merged.members, 2);
    }

    #[test]
    fn cluster_count_never_exceeds_the_limit() {
        let mut space = ClusterSpace::new(5);
        for i in 0..50 {
            space.add(vec8([
                i as f64,
                0.0,
                (i * 7 % 13) as f64,
                (i * 3 % 11) as f64,
                0.0,
                0.0,
                0.0,
                (i % 5) as f64,
            ]));
            assert!(space.len() <= 5);
        }
    }

    #[test]
    fn absorbing_identical_vectors_keeps_the_mean() {
        let mut space = ClusterSpace::new(1);
        let v = vec8([1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        for _ in 0..10 {
            space.add(v);
        }
        assert_eq!(space.len(), 1);
        assert_eq!(space.clusters()[0].mean, v);
        assert_eq!(space.clusters()[0].members, 10);
    }

    #[test]
    fn processing_derives_the_actuator_from_the_closest_better_state() {
        let log = crate::logging::Log::off();
        let mut lpcc = LpControlComponent::new(16);
        lpcc.note_started(0);

        // Interval 1: high committed-move rate; no history yet, so the
        // actuator stays unbounded and the state enters the space.
        for v in [4000, 5000, 6000] {
            lpcc.record_cycle_sample(v);
        }
        let s1 = LpStats {
            committed_moves: 10_000,
            simulated_moves: 11_000,
            ..LpStats::default()
        };
        lpcc.process_sensor_values(1000, &s1, &log);
        assert!(lpcc.actuator().is_unbounded());
        assert_eq!(lpcc.space().len(), 1);

        // Interval 2: lower rate; the first state is the closest better
        // one, so its average uncommitted moves (5000) becomes the mean
        // limit and the upper limit adds 1.96 sigma of this interval.
        for v in [1000, 3000] {
            lpcc.record_cycle_sample(v);
        }
        let s2 = LpStats {
            committed_moves: 15_000,
            simulated_moves: 16_000,
            ..LpStats::default()
        };
        lpcc.process_sensor_values(2000, &s2, &log);
        let actuator = lpcc.actuator();
        assert_eq!(actuator.mean_limit, 5000);
        let sigma = std_deviation(4000.0, 10_000_000.0, 2.0);
        assert_eq!(actuator.upper_limit, upper_limit(5000.0, sigma));
        assert!(lpcc.is_within_actuator_range(actuator.upper_limit as u64));
        assert!(!lpcc.is_within_actuator_range(actuator.upper_limit as u64 + 1));
        assert_eq!(lpcc.space().len(), 2);
        // Interval statistics reset after processing.
        assert_eq!(lpcc.sample_stats(), (0.0, 0.0, 0, 0));
    }

    #[test]
    fn empty_interval_skips_with_an_unbounded_actuator() {
        let log = crate::logging::Log::off();
        let mut lpcc = LpControlComponent::new(4);
        lpcc.note_started(0);
        let s = LpStats::default();
        lpcc.process_sensor_values(1000, &s, &log);
        assert!(lpcc.actuator().is_unbounded());
        assert!(lpcc.space().is_empty());
    }

    #[test]
    fn upper_limit_uses_ceiling_at_95_percent() {
        assert_eq!(upper_limit(1730.0, 716.543), 3135);
        assert_eq!(upper_limit(1730.0, 1036.407), 3762);
        assert_eq!(upper_limit(1625.0, 607.884), 2817);
    }

    #[test]
    fn actuator_boundary_is_inclusive() {
        let mut lpcc = LpControlComponent::new(4);
        lpcc.actuator = Actuator {
            mean_limit: 1838,
            upper_limit: 4388,
        };
        assert!(lpcc.is_within_actuator_range(4388));
        assert!(!lpcc.is_within_actuator_range(4389));
        lpcc.actuator = Actuator::unbounded();
        assert!(lpcc.is_within_actuator_range(u64::MAX / 2));
    }
}
