//! Switching schedules over a collection of communication graphs.
//!
//! A [`SwitchingSchedule`] partitions time into contiguous intervals
//! `[t_k, t_{k+1})`, each subdivided into dwell segments during which one
//! graph from the collection is active. The active graph is right-continuous:
//! at a switch instant the new graph is already in effect. Periodic schedules
//! repeat the interval list forever; aperiodic ones end after the last
//! interval.
//!
//! The schedule also carries the averaging analysis. For interval `k` the
//! averaged structure matrix is the dwell-fraction combination of the active
//! graphs' `H` matrices, and the stability margin estimate `delta_bar` is the
//! minimum over intervals of the smallest eigenvalue real part of that
//! combination, minimized over the set of admissible dwell fractions. The
//! admissible set for an interval of length `T_k` keeps every fraction at or
//! above `tau / T_k`, where `tau` is the smallest dwell appearing anywhere in
//! the schedule. Minimization is by sampling (vertex enumeration, nested
//! simplex grids, or seeded random draws), so the estimate is an upper bound
//! on the true infimum that decreases as sampling is refined. Designs that
//! want slack below the estimate pass a reduced value downstream.

use crate::graph::{self, LeaderGraph};
use crate::linalg::{self, Matrix, MatrixError};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;
use thiserror::Error;

/// Cap on simplex grid points per interval before the grid strategy refuses
/// to run. Keeps accidental `resolution = 1e-3` requests from exploding.
pub const GRID_POINT_CAP: usize = 200_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("schedule needs at least one graph")]
    NoGraphs,
    #[error("graphs must share follower counts: expected {expected}, got {got}")]
    MixedGraphSizes { expected: usize, got: usize },
    #[error("schedule needs at least one interval")]
    NoIntervals,
    #[error("interval {interval} has no segments")]
    EmptySegments { interval: usize },
    #[error("interval {interval} segment {segment} references graph {index}, but only {count} graphs exist")]
    GraphIndexOutOfRange {
        interval: usize,
        segment: usize,
        index: usize,
        count: usize,
    },
    #[error("dwell must be positive and finite, got {dwell}")]
    BadDwell { dwell: f64 },
    #[error("time {t} is negative")]
    NegativeTime { t: f64 },
    #[error("time {t} is beyond the schedule end {end}")]
    BeyondHorizon { t: f64, end: f64 },
    #[error("interval index {index} out of range, schedule has {count}")]
    IntervalOutOfRange { index: usize, count: usize },
    #[error("grid resolution {resolution} yields {points} simplex points in one interval, cap is {cap}")]
    GridTooFine {
        resolution: f64,
        points: usize,
        cap: usize,
    },
    #[error("random strategy needs at least one sample")]
    NoSamples,
    #[error(transparent)]
    Matrix(#[from] MatrixError),
}

/// One dwell segment: which graph is active and for how long.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub graph: usize,
    pub dwell: f64,
}

/// Contiguous interval `[start, start + length)` with its dwell subdivision.
#[derive(Debug, Clone, PartialEq)]
pub struct Interval {
    start: f64,
    segments: Vec<Segment>,
}

impl Interval {
    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn length(&self) -> f64 {
        self.segments.iter().map(|s| s.dwell).sum()
    }

    pub fn end(&self) -> f64 {
        self.start + self.length()
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn min_dwell(&self) -> f64 {
        self.segments
            .iter()
            .map(|s| s.dwell)
            .fold(f64::INFINITY, f64::min)
    }

    /// Distinct graph indices active during this interval, ascending.
    pub fn active_graphs(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = self.segments.iter().map(|s| s.graph).collect();
        idx.sort_unstable();
        idx.dedup();
        idx
    }

    /// Actual dwell fractions of the segments, summing to one.
    pub fn dwell_fractions(&self) -> Vec<f64> {
        let len = self.length();
        self.segments.iter().map(|s| s.dwell / len).collect()
    }
}

/// Piecewise-constant graph assignment over time.
#[derive(Debug, Clone, PartialEq)]
pub struct SwitchingSchedule {
    graphs: Vec<LeaderGraph>,
    intervals: Vec<Interval>,
    periodic: bool,
}

impl SwitchingSchedule {
    pub fn new(
        graphs: Vec<LeaderGraph>,
        intervals: Vec<Vec<Segment>>,
        periodic: bool,
    ) -> Result<Self, ScheduleError> {
        let first_n = graphs.first().ok_or(ScheduleError::NoGraphs)?.n_followers();
        for g in &graphs {
            if g.n_followers() != first_n {
                return Err(ScheduleError::MixedGraphSizes {
                    expected: first_n,
                    got: g.n_followers(),
                });
            }
        }
        if intervals.is_empty() {
            return Err(ScheduleError::NoIntervals);
        }
        let mut built = Vec::with_capacity(intervals.len());
        let mut start = 0.0;
        for (k, segments) in intervals.into_iter().enumerate() {
            if segments.is_empty() {
                return Err(ScheduleError::EmptySegments { interval: k });
            }
            for (j, seg) in segments.iter().enumerate() {
                if seg.graph >= graphs.len() {
                    return Err(ScheduleError::GraphIndexOutOfRange {
                        interval: k,
                        segment: j,
                        index: seg.graph,
                        count: graphs.len(),
                    });
                }
                if !(seg.dwell.is_finite() && seg.dwell > 0.0) {
                    return Err(ScheduleError::BadDwell { dwell: seg.dwell });
                }
            }
            let interval = Interval { start, segments };
            start = interval.end();
            built.push(interval);
        }
        Ok(SwitchingSchedule {
            graphs,
            intervals: built,
            periodic,
        })
    }

    pub fn graphs(&self) -> &[LeaderGraph] {
        &self.graphs
    }

    pub fn n_followers(&self) -> usize {
        self.graphs[0].n_followers()
    }

    pub fn intervals(&self) -> &[Interval] {
        &self.intervals
    }

    pub fn periodic(&self) -> bool {
        self.periodic
    }

    /// Total length of the interval list. For periodic schedules this is the
    /// repetition period.
    pub fn period(&self) -> f64 {
        self.intervals.last().map(Interval::end).unwrap_or(0.0)
    }

    /// End of definition, `None` when the schedule repeats forever.
    pub fn end(&self) -> Option<f64> {
        if self.periodic {
            None
        } else {
            Some(self.period())
        }
    }

    /// Smallest dwell anywhere in the schedule.
    pub fn min_dwell(&self) -> f64 {
        self.intervals
            .iter()
            .map(Interval::min_dwell)
            .fold(f64::INFINITY, f64::min)
    }

    /// Longest interval length.
    pub fn max_interval_length(&self) -> f64 {
        self.intervals
            .iter()
            .map(Interval::length)
            .fold(0.0, f64::max)
    }

    /// Index of the graph active at time `t`. Right-continuous at switches;
    /// periodic schedules wrap `t` modulo the period.
    pub fn active_graph(&self, t: f64) -> Result<usize, ScheduleError> {
        if !(t.is_finite() && t >= 0.0) {
            return Err(ScheduleError::NegativeTime { t });
        }
        let local = if self.periodic {
            let p = self.period();
            let r = t % p;
            if r < 0.0 {
                r + p
            } else {
                r
            }
        } else {
            if t >= self.period() {
                return Err(ScheduleError::BeyondHorizon {
                    t,
                    end: self.period(),
                });
            }
            t
        };
        let mut acc = 0.0;
        for interval in &self.intervals {
            for seg in interval.segments() {
                acc += seg.dwell;
                if local < acc {
                    return Ok(seg.graph);
                }
            }
        }
        // Periodic wrap can land exactly on the period boundary through
        // floating-point remainder; that instant belongs to the next cycle.
        Ok(self.intervals[0].segments()[0].graph)
    }

    /// Flattened `(start, dwell, graph)` list covering `[0, horizon)`,
    /// unrolling repetitions for periodic schedules. The final segment may
    /// extend past the horizon; callers clip as needed.
    pub fn segments_until(&self, horizon: f64) -> Result<Vec<(f64, f64, usize)>, ScheduleError> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(ScheduleError::NegativeTime { t: horizon });
        }
        if !self.periodic && horizon > self.period() + 1e-9 * self.period().max(1.0) {
            return Err(ScheduleError::BeyondHorizon {
                t: horizon,
                end: self.period(),
            });
        }
        let mut out = Vec::new();
        let mut start = 0.0;
        'outer: loop {
            for interval in &self.intervals {
                for seg in interval.segments() {
                    if start >= horizon {
                        break 'outer;
                    }
                    out.push((start, seg.dwell, seg.graph));
                    start += seg.dwell;
                }
            }
            if !self.periodic || start >= horizon {
                break;
            }
        }
        Ok(out)
    }

    /// Checks interval lengths against `t_max`, dwells against `tau_min`,
    /// and per-interval joint connectivity of the active graphs.
    pub fn validate(&self, t_max: f64, tau_min: f64) -> ValidationReport {
        assert!(t_max > 0.0 && tau_min > 0.0, "bounds must be positive");
        let intervals = self
            .intervals
            .iter()
            .enumerate()
            .map(|(k, interval)| {
                let active = interval.active_graphs();
                let active_graphs: Vec<LeaderGraph> = active
                    .iter()
                    .map(|&i| self.graphs[i].clone())
                    .collect();
                let jointly = graph::jointly_connected(&active_graphs)
                    .expect("interval has at least one active graph");
                IntervalCheck {
                    index: k,
                    start: interval.start(),
                    length: interval.length(),
                    min_dwell: interval.min_dwell(),
                    active,
                    length_ok: interval.length() <= t_max + 1e-12 * t_max,
                    dwell_ok: interval.min_dwell() >= tau_min - 1e-12 * tau_min,
                    jointly_connected: jointly,
                }
            })
            .collect();
        ValidationReport {
            t_max,
            tau_min,
            intervals,
        }
    }

    /// Averaged structure matrix of interval `k`: the dwell-fraction
    /// combination of the active graphs' `H` matrices.
    pub fn averaged_structure(&self, k: usize) -> Result<Matrix, ScheduleError> {
        let interval = self
            .intervals
            .get(k)
            .ok_or(ScheduleError::IntervalOutOfRange {
                index: k,
                count: self.intervals.len(),
            })?;
        let fractions = interval.dwell_fractions();
        Ok(self.combine_interval(interval, &fractions))
    }

    fn combine_interval(&self, interval: &Interval, fractions: &[f64]) -> Matrix {
        debug_assert_eq!(fractions.len(), interval.segments().len());
        let n = self.n_followers();
        let mut acc = Matrix::zeros(n, n);
        for (seg, &f) in interval.segments().iter().zip(fractions) {
            let h = self.graphs[seg.graph].structure_matrices().h;
            acc = &acc + &h.scale(f);
        }
        acc
    }

    /// Estimates the averaging margin `delta_bar` by sampling admissible
    /// dwell fractions per interval and minimizing the smallest eigenvalue
    /// real part of the averaged `H`. The result can be non-positive; it is
    /// reported as computed and rejected only where a positive margin is
    /// actually required.
    pub fn estimate_delta_bar(
        &self,
        strategy: &SamplingStrategy,
    ) -> Result<DeltaEstimate, ScheduleError> {
        let tau = self.min_dwell();
        let mut cache: HashMap<Vec<(usize, u64)>, (f64, usize)> = HashMap::new();
        let mut per_interval = Vec::with_capacity(self.intervals.len());
        let mut total_samples = 0usize;
        for interval in &self.intervals {
            let key: Vec<(usize, u64)> = interval
                .segments()
                .iter()
                .map(|s| (s.graph, s.dwell.to_bits()))
                .collect();
            let (min_eig, samples) = match cache.get(&key) {
                Some(&hit) => hit,
                None => {
                    let computed = self.minimize_interval(interval, tau, strategy)?;
                    cache.insert(key, computed);
                    computed
                }
            };
            per_interval.push(min_eig);
            total_samples += samples;
        }
        let value = per_interval.iter().copied().fold(f64::INFINITY, f64::min);
        Ok(DeltaEstimate {
            value,
            per_interval,
            total_samples,
        })
    }

    fn minimize_interval(
        &self,
        interval: &Interval,
        tau: f64,
        strategy: &SamplingStrategy,
    ) -> Result<(f64, usize), ScheduleError> {
        let s = interval.segments().len();
        let floor = tau / interval.length();
        let free = 1.0 - s as f64 * floor;
        debug_assert!(free >= -1e-12);
        let free = free.max(0.0);

        // Every strategy is anchored at the interval's own dwell fractions,
        // so the estimate never exceeds the operating point's margin.
        let mut points: Vec<Vec<f64>> = vec![interval.dwell_fractions()];
        match strategy {
            SamplingStrategy::Vertices => {
                for i in 0..s {
                    let mut p = vec![floor; s];
                    p[i] += free;
                    points.push(p);
                }
            }
            SamplingStrategy::Grid { resolution } => {
                assert!(
                    resolution.is_finite() && *resolution > 0.0 && *resolution <= 1.0,
                    "grid resolution must lie in (0, 1]"
                );
                let k = (1.0 / resolution).round().max(1.0) as usize;
                let count = compositions_count(k, s);
                if count > GRID_POINT_CAP {
                    return Err(ScheduleError::GridTooFine {
                        resolution: *resolution,
                        points: count,
                        cap: GRID_POINT_CAP,
                    });
                }
                let mut current = vec![0usize; s];
                enumerate_compositions(k, s, &mut current, &mut |comp| {
                    points.push(
                        comp.iter()
                            .map(|&m| floor + free * m as f64 / k as f64)
                            .collect(),
                    );
                });
            }
            SamplingStrategy::Random { samples, seed } => {
                if *samples == 0 {
                    return Err(ScheduleError::NoSamples);
                }
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                for _ in 0..*samples {
                    let draws: Vec<f64> = (0..s)
                        .map(|_| -(1.0 - rng.random::<f64>()).ln())
                        .collect();
                    let total: f64 = draws.iter().sum();
                    points.push(draws.iter().map(|d| floor + free * d / total).collect());
                }
            }
        }

        let mut min_eig = f64::INFINITY;
        for p in &points {
            let combined = self.combine_interval(interval, p);
            let eig = linalg::eigenvalues(&combined)?.min_real();
            min_eig = min_eig.min(eig);
        }
        Ok((min_eig, points.len()))
    }
}

/// How to sample the admissible dwell-fraction set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SamplingStrategy {
    /// Simplex vertices plus the operating point.
    Vertices,
    /// Nested simplex grid with the given fraction resolution. Halving the
    /// resolution refines the grid in place, so estimates are monotone
    /// non-increasing under refinement.
    Grid { resolution: f64 },
    /// Seeded uniform draws over the admissible set.
    Random { samples: usize, seed: u64 },
}

/// Result of a `delta_bar` estimation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaEstimate {
    /// Minimum over intervals of the sampled minimum eigenvalue real part.
    pub value: f64,
    /// Per-interval sampled minima, in interval order.
    pub per_interval: Vec<f64>,
    /// Total evaluation count across intervals.
    pub total_samples: usize,
}

/// Per-interval validation outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalCheck {
    pub index: usize,
    pub start: f64,
    pub length: f64,
    pub min_dwell: f64,
    pub active: Vec<usize>,
    pub length_ok: bool,
    pub dwell_ok: bool,
    pub jointly_connected: bool,
}

impl IntervalCheck {
    pub fn pass(&self) -> bool {
        self.length_ok && self.dwell_ok && self.jointly_connected
    }
}

/// Outcome of [`SwitchingSchedule::validate`].
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub t_max: f64,
    pub tau_min: f64,
    pub intervals: Vec<IntervalCheck>,
}

impl ValidationReport {
    pub fn pass(&self) -> bool {
        self.intervals.iter().all(IntervalCheck::pass)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.intervals {
            writeln!(
                f,
                "interval {} [{:.6}, {:.6}): length {} (max {}), min dwell {} (min {}), graphs {:?}, jointly connected: {}",
                c.index,
                c.start,
                c.start + c.length,
                if c.length_ok { "ok" } else { "VIOLATION" },
                self.t_max,
                if c.dwell_ok { "ok" } else { "VIOLATION" },
                self.tau_min,
                c.active,
                if c.jointly_connected { "yes" } else { "NO" },
            )?;
        }
        writeln!(
            f,
            "overall: {}",
            if self.pass() { "pass" } else { "fail" }
        )
    }
}

fn compositions_count(k: usize, s: usize) -> usize {
    // C(k + s - 1, s - 1), saturating.
    let mut acc: usize = 1;
    for i in 0..(s - 1) {
        acc = acc.saturating_mul(k + i + 1) / (i + 1);
        if acc > 100 * GRID_POINT_CAP {
            return acc;
        }
    }
    acc
}

/// Visits every way of writing `total` as an ordered sum of `slots`
/// non-negative integers.
fn enumerate_compositions(
    total: usize,
    slots: usize,
    current: &mut Vec<usize>,
    emit: &mut impl FnMut(&[usize]),
) {
    fn rec(
        remaining: usize,
        slot: usize,
        slots: usize,
        current: &mut Vec<usize>,
        emit: &mut impl FnMut(&[usize]),
    ) {
        if slot + 1 == slots {
            current[slot] = remaining;
            emit(current);
            return;
        }
        for m in 0..=remaining {
            current[slot] = m;
            rec(remaining - m, slot + 1, slots, current, emit);
        }
    }
    rec(total, 0, slots, current, emit);
}

/// Schedule description as it appears in configuration files. Segments are
/// `[graph_index, dwell_seconds]` pairs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub intervals: Vec<IntervalConfig>,
    #[serde(default)]
    pub periodic: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IntervalConfig {
    pub segments: Vec<(usize, f64)>,
}

impl ScheduleConfig {
    pub fn to_schedule(&self, graphs: Vec<LeaderGraph>) -> Result<SwitchingSchedule, ScheduleError> {
        let intervals = self
            .intervals
            .iter()
            .map(|iv| {
                iv.segments
                    .iter()
                    .map(|&(graph, dwell)| Segment { graph, dwell })
                    .collect()
            })
            .collect();
        SwitchingSchedule::new(graphs, intervals, self.periodic)
    }

    pub fn from_schedule(s: &SwitchingSchedule) -> ScheduleConfig {
        ScheduleConfig {
            intervals: s
                .intervals()
                .iter()
                .map(|iv| IntervalConfig {
                    segments: iv.segments().iter().map(|s| (s.graph, s.dwell)).collect(),
                })
                .collect(),
            periodic: s.periodic(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mat;
    use approx::assert_relative_eq;

    fn two_graphs() -> Vec<LeaderGraph> {
        let mut g1 = LeaderGraph::new(2).unwrap();
        g1.add_leader_link(1, 1.0).unwrap();
        let mut g2 = LeaderGraph::new(2).unwrap();
        g2.add_edge(1, 2, 1.0).unwrap();
        vec![g1, g2]
    }

    fn alternating_schedule(periodic: bool) -> SwitchingSchedule {
        SwitchingSchedule::new(
            two_graphs(),
            vec![vec![
                Segment { graph: 0, dwell: 0.5 },
                Segment { graph: 1, dwell: 0.5 },
            ]],
            periodic,
        )
        .unwrap()
    }

    #[test]
    fn construction_validates_inputs() {
        assert!(matches!(
            SwitchingSchedule::new(vec![], vec![], false),
            Err(ScheduleError::NoGraphs)
        ));
        assert!(matches!(
            SwitchingSchedule::new(two_graphs(), vec![], false),
            Err(ScheduleError::NoIntervals)
        ));
        assert!(matches!(
            SwitchingSchedule::new(two_graphs(), vec![vec![]], false),
            Err(ScheduleError::EmptySegments { interval: 0 })
        ));
        assert!(matches!(
            SwitchingSchedule::new(
                two_graphs(),
                vec![vec![Segment { graph: 7, dwell: 1.0 }]],
                false
            ),
            Err(ScheduleError::GraphIndexOutOfRange { index: 7, .. })
        ));
        assert!(matches!(
            SwitchingSchedule::new(
                two_graphs(),
                vec![vec![Segment { graph: 0, dwell: 0.0 }]],
                false
            ),
            Err(ScheduleError::BadDwell { .. })
        ));
    }

    #[test]
    fn active_graph_is_right_continuous() {
        let s = alternating_schedule(false);
        assert_eq!(s.active_graph(0.0).unwrap(), 0);
        assert_eq!(s.active_graph(0.25).unwrap(), 0);
        assert_eq!(s.active_graph(0.5).unwrap(), 1);
        assert_eq!(s.active_graph(0.999).unwrap(), 1);
        assert!(matches!(
            s.active_graph(1.0),
            Err(ScheduleError::BeyondHorizon { .. })
        ));
        assert!(matches!(
            s.active_graph(-0.1),
            Err(ScheduleError::NegativeTime { .. })
        ));
    }

    #[test]
    fn periodic_schedule_wraps() {
        let s = alternating_schedule(true);
        assert_eq!(s.active_graph(1.0).unwrap(), 0);
        assert_eq!(s.active_graph(1.5).unwrap(), 1);
        assert_eq!(s.active_graph(10.25).unwrap(), 0);
        assert_eq!(s.end(), None);
    }

    #[test]
    fn segments_until_unrolls_periodic() {
        let s = alternating_schedule(true);
        let segs = s.segments_until(2.0).unwrap();
        assert_eq!(
            segs,
            vec![
                (0.0, 0.5, 0),
                (0.5, 0.5, 1),
                (1.0, 0.5, 0),
                (1.5, 0.5, 1)
            ]
        );
        let s = alternating_schedule(false);
        assert!(matches!(
            s.segments_until(2.0),
            Err(ScheduleError::BeyondHorizon { .. })
        ));
    }

    #[test]
    fn validation_report_checks_bounds_and_connectivity() {
        let s = alternating_schedule(false);
        let report = s.validate(1.5, 0.25);
        assert!(report.pass());
        assert_eq!(report.intervals.len(), 1);
        assert_eq!(report.intervals[0].active, vec![0, 1]);

        let too_long = s.validate(0.75, 0.25);
        assert!(!too_long.pass());
        assert!(!too_long.intervals[0].length_ok);

        let dwell_short = s.validate(1.5, 0.6);
        assert!(!dwell_short.pass());
        assert!(!dwell_short.intervals[0].dwell_ok);

        // An interval seeing only the leaderless graph is not jointly
        // connected even though an interval seeing both is.
        let split = SwitchingSchedule::new(
            two_graphs(),
            vec![
                vec![
                    Segment { graph: 0, dwell: 0.5 },
                    Segment { graph: 1, dwell: 0.5 },
                ],
                vec![Segment { graph: 1, dwell: 1.0 }],
            ],
            false,
        )
        .unwrap();
        let report = split.validate(1.5, 0.25);
        assert!(!report.pass());
        assert!(report.intervals[0].jointly_connected);
        assert!(!report.intervals[1].jointly_connected);
    }

    #[test]
    fn averaged_structure_combines_dwell_fractions() {
        let s = alternating_schedule(false);
        let h = s.averaged_structure(0).unwrap();
        assert_eq!(h, mat![[0.5, 0.0], [-0.5, 0.5]]);
        assert!(matches!(
            s.averaged_structure(1),
            Err(ScheduleError::IntervalOutOfRange { .. })
        ));
    }

    #[test]
    fn delta_bar_on_degenerate_simplex() {
        // Equal dwells and floor = 0.5 pin the admissible set to one point.
        let s = alternating_schedule(false);
        let est = s.estimate_delta_bar(&SamplingStrategy::Vertices).unwrap();
        assert_relative_eq!(est.value, 0.5, max_relative = 1e-9);
        assert_eq!(est.per_interval.len(), 1);
    }

    fn three_graph_schedule() -> SwitchingSchedule {
        let mut g1 = LeaderGraph::new(3).unwrap();
        g1.add_leader_link(1, 1.0).unwrap();
        let mut g2 = LeaderGraph::new(3).unwrap();
        g2.add_edge(1, 2, 1.0).unwrap();
        let mut g3 = LeaderGraph::new(3).unwrap();
        g3.add_edge(2, 3, 1.0).unwrap();
        SwitchingSchedule::new(
            vec![g1, g2, g3],
            vec![vec![
                Segment { graph: 0, dwell: 0.2 },
                Segment { graph: 1, dwell: 0.2 },
                Segment { graph: 2, dwell: 0.6 },
            ]],
            true,
        )
        .unwrap()
    }

    #[test]
    fn grid_refinement_is_monotone() {
        let s = three_graph_schedule();
        let coarse = s
            .estimate_delta_bar(&SamplingStrategy::Grid { resolution: 0.2 })
            .unwrap();
        let mid = s
            .estimate_delta_bar(&SamplingStrategy::Grid { resolution: 0.1 })
            .unwrap();
        let fine = s
            .estimate_delta_bar(&SamplingStrategy::Grid { resolution: 0.05 })
            .unwrap();
        assert!(mid.value <= coarse.value + 1e-12);
        assert!(fine.value <= mid.value + 1e-12);
        assert!(mid.total_samples > coarse.total_samples);
    }

    #[test]
    fn random_strategy_is_deterministic_and_bounded_by_operating_point() {
        let s = three_graph_schedule();
        let a = s
            .estimate_delta_bar(&SamplingStrategy::Random {
                samples: 200,
                seed: 11,
            })
            .unwrap();
        let b = s
            .estimate_delta_bar(&SamplingStrategy::Random {
                samples: 200,
                seed: 11,
            })
            .unwrap();
        assert_eq!(a, b);

        let operating = s.averaged_structure(0).unwrap();
        let op_eig = linalg::eigenvalues(&operating).unwrap().min_real();
        assert!(a.value <= op_eig + 1e-12);
    }

    #[test]
    fn grid_cap_rejects_absurd_resolution() {
        let s = three_graph_schedule();
        assert!(matches!(
            s.estimate_delta_bar(&SamplingStrategy::Grid { resolution: 1e-4 }),
            Err(ScheduleError::GridTooFine { .. })
        ));
    }

    #[test]
    fn config_round_trip() {
        let s = alternating_schedule(true);
        let cfg = ScheduleConfig::from_schedule(&s);
        let json = serde_json::to_string(&cfg).unwrap();
        let back: ScheduleConfig = serde_json::from_str(&json).unwrap();
        let rebuilt = back.to_schedule(two_graphs()).unwrap();
        assert_eq!(rebuilt, s);
    }
}
