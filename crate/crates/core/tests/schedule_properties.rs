//! Schedule invariants: right-continuity, averaging, and refinement
//! behavior of the coupling-margin estimate.

use consensus_core::graph::LeaderGraph;
use consensus_core::linalg;
use consensus_core::schedule::{SamplingStrategy, Segment, SwitchingSchedule};
use proptest::prelude::*;

fn graph_pool() -> Vec<LeaderGraph> {
    let mut g0 = LeaderGraph::new(2).unwrap();
    g0.add_leader_link(1, 1.0).unwrap();
    let mut g1 = LeaderGraph::new(2).unwrap();
    g1.add_edge(1, 2, 1.0).unwrap();
    let mut g2 = LeaderGraph::new(2).unwrap();
    g2.add_leader_link(2, 0.5).unwrap();
    g2.add_edge(2, 1, 2.0).unwrap();
    vec![g0, g1, g2]
}

fn dwell() -> impl Strategy<Value = f64> {
    prop::sample::select(vec![0.25, 0.5, 0.75, 1.0])
}

fn intervals() -> impl Strategy<Value = Vec<Vec<Segment>>> {
    prop::collection::vec(
        prop::collection::vec(
            (0usize..3, dwell()).prop_map(|(graph, dwell)| Segment { graph, dwell }),
            1..=3,
        ),
        1..=2,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn grid_refinement_never_raises_the_estimate(segs in intervals()) {
        let schedule = SwitchingSchedule::new(graph_pool(), segs, true).unwrap();
        let mut last = f64::INFINITY;
        for resolution in [0.5, 0.25, 0.125] {
            let est = schedule
                .estimate_delta_bar(&SamplingStrategy::Grid { resolution })
                .unwrap();
            prop_assert!(est.value <= last + 1e-12);
            last = est.value;
        }
    }

    /// Every strategy samples the interval's own dwell fractions, so the
    /// estimate never exceeds the operating point's margin.
    #[test]
    fn estimate_is_bounded_by_the_operating_point(segs in intervals()) {
        let schedule = SwitchingSchedule::new(graph_pool(), segs, true).unwrap();
        for strategy in [
            SamplingStrategy::Vertices,
            SamplingStrategy::Grid { resolution: 0.25 },
            SamplingStrategy::Random { samples: 16, seed: 3 },
        ] {
            let est = schedule.estimate_delta_bar(&strategy).unwrap();
            for (k, &per) in est.per_interval.iter().enumerate() {
                let h_bar = schedule.averaged_structure(k).unwrap();
                let anchor = linalg::eigenvalues(&h_bar).unwrap().min_real();
                prop_assert!(per <= anchor + 1e-9);
            }
        }
    }

    #[test]
    fn active_graph_agrees_with_the_unrolled_segments(
        segs in intervals(),
        frac in 0.0f64..2.0,
    ) {
        let schedule = SwitchingSchedule::new(graph_pool(), segs, true).unwrap();
        let horizon = 2.0 * schedule.period();
        let t = frac * schedule.period();
        let unrolled = schedule.segments_until(horizon).unwrap();
        let expected = unrolled
            .iter()
            .rev()
            .find(|(start, _, _)| *start <= t + 1e-12)
            .map(|&(_, _, g)| g)
            .unwrap();
        prop_assert_eq!(schedule.active_graph(t).unwrap(), expected);
    }

    #[test]
    fn own_bounds_always_validate(segs in intervals()) {
        let schedule = SwitchingSchedule::new(graph_pool(), segs, true).unwrap();
        let report = schedule.validate(schedule.max_interval_length(), schedule.min_dwell());
        for check in &report.intervals {
            prop_assert!(check.length_ok);
            prop_assert!(check.dwell_ok);
        }
    }
}
