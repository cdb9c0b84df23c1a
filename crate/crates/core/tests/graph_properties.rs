//! Structure-matrix invariants on randomly generated graph collections.
//!
//! The load-bearing fact: a jointly connected collection has every positive
//! combination of its structure matrices positive stable, while starving a
//! follower of information plants an eigenvalue at zero.

use consensus_core::graph::{
    self,
    random::{self, CollectionParams, Defect},
    LeaderGraph,
};
use consensus_core::linalg::{self, Matrix};
use proptest::prelude::*;

const EIG_FLOOR: f64 = 1e-9;

fn summed_structure(graphs: &[LeaderGraph], weights: Option<&[f64]>) -> Matrix {
    let mut sum = Matrix::zeros(graphs[0].n_followers(), graphs[0].n_followers());
    for (i, g) in graphs.iter().enumerate() {
        let h = g.structure_matrices().h;
        let w = weights.map(|ws| ws[i]).unwrap_or(1.0);
        sum = &sum + &h.scale(w);
    }
    sum
}

/// Positive weights with the given floor, normalized to sum to one.
fn floored_weights(raw: &[f64], floor: f64) -> Vec<f64> {
    let total: f64 = raw.iter().sum();
    let free = 1.0 - floor * raw.len() as f64;
    assert!(free >= 0.0, "floor leaves no mass");
    raw.iter().map(|r| floor + free * r / total).collect()
}

proptest! {
    #[test]
    fn jointly_connected_sums_are_positive_stable(
        n in 2usize..=8,
        m in 1usize..=5,
        seed in any::<u64>(),
        raw in prop::collection::vec(0.01f64..1.0, 5),
    ) {
        let params = CollectionParams {
            n_followers: n,
            n_graphs: m,
            extra_edge_prob: 0.3,
        };
        let graphs = random::jointly_connected_collection(params, seed).unwrap();
        prop_assert!(graph::jointly_connected(&graphs).unwrap());

        let plain = summed_structure(&graphs, None);
        prop_assert!(graph::min_real_eig(&plain).unwrap() > EIG_FLOOR);

        let tau = floored_weights(&raw[..m], 0.05);
        let weighted = summed_structure(&graphs, Some(&tau));
        prop_assert!(graph::min_real_eig(&weighted).unwrap() > EIG_FLOOR);
    }

    #[test]
    fn starved_collections_have_a_zero_eigenvalue(
        n in 2usize..=8,
        m in 1usize..=5,
        seed in any::<u64>(),
        pair in proptest::bool::ANY,
    ) {
        let params = CollectionParams {
            n_followers: n,
            n_graphs: m,
            extra_edge_prob: 0.3,
        };
        let defect = if pair { Defect::StarvedPair } else { Defect::StarvedNode };
        let (graphs, starved) = random::disconnected_collection(params, seed, defect).unwrap();
        prop_assert!(!graph::jointly_connected(&graphs).unwrap());
        prop_assert!(!starved.is_empty());

        let sum = summed_structure(&graphs, None);
        let min_modulus = linalg::eigenvalues(&sum)
            .unwrap()
            .values()
            .iter()
            .map(|z| z.norm())
            .fold(f64::INFINITY, f64::min);
        prop_assert!(min_modulus <= EIG_FLOOR);
    }

    #[test]
    fn gershgorin_discs_contain_every_structure_spectrum(
        n in 2usize..=8,
        m in 1usize..=5,
        seed in any::<u64>(),
    ) {
        let params = CollectionParams {
            n_followers: n,
            n_graphs: m,
            extra_edge_prob: 0.3,
        };
        let graphs = random::jointly_connected_collection(params, seed).unwrap();
        for g in &graphs {
            let h = g.structure_matrices().h;
            let discs = graph::gershgorin_discs(&h).unwrap();
            for z in linalg::eigenvalues(&h).unwrap().values() {
                prop_assert!(graph::discs_contain(&discs, z.re, z.im, EIG_FLOOR));
            }
        }
    }

    #[test]
    fn laplacian_rows_sum_to_zero_and_h_rows_to_leader_weights(
        n in 2usize..=8,
        m in 1usize..=4,
        seed in any::<u64>(),
    ) {
        let params = CollectionParams {
            n_followers: n,
            n_graphs: m,
            extra_edge_prob: 0.4,
        };
        let graphs = random::jointly_connected_collection(params, seed).unwrap();
        for g in &graphs {
            let s = g.structure_matrices();
            for i in 0..n {
                let lap_row: f64 = (0..n).map(|j| s.laplacian[(i, j)]).sum();
                prop_assert!(lap_row.abs() <= 1e-12);
                let h_row: f64 = (0..n).map(|j| s.h[(i, j)]).sum();
                prop_assert!((h_row - s.leader_diag[(i, i)]).abs() <= 1e-12);
            }
        }
    }

    /// The union with scales reproduces the same structure matrix as the
    /// scaled sum of the members' matrices.
    #[test]
    fn union_structure_is_linear_in_weights(
        n in 2usize..=6,
        m in 2usize..=4,
        seed in any::<u64>(),
        raw in prop::collection::vec(0.1f64..2.0, 4),
    ) {
        let params = CollectionParams {
            n_followers: n,
            n_graphs: m,
            extra_edge_prob: 0.3,
        };
        let graphs = random::jointly_connected_collection(params, seed).unwrap();
        let scales = &raw[..m];
        let joined = graph::union(&graphs, Some(scales)).unwrap();
        let direct = joined.structure_matrices().h;
        let summed = summed_structure(&graphs, Some(scales));
        prop_assert!((&direct - &summed).max_abs() <= 1e-12);
    }
}

#[test]
fn spectra_of_once_troublesome_collections() {
    // The first seed once drove the QR iteration past its cap on one of the
    // structure matrices; the second produced a defective eigenvalue pair
    // that the eigenvalue extraction used to render as NaN.
    for (n, m, seed) in [(7, 5, 4570529690012351800u64), (5, 2, 15586426322586496135)] {
        let params = CollectionParams {
            n_followers: n,
            n_graphs: m,
            extra_edge_prob: 0.3,
        };
        let graphs = random::jointly_connected_collection(params, seed).unwrap();
        for g in &graphs {
            let h = g.structure_matrices().h;
            let discs = graph::gershgorin_discs(&h).unwrap();
            for z in linalg::eigenvalues(&h).unwrap().values() {
                assert!(z.re.is_finite() && z.im.is_finite());
                assert!(graph::discs_contain(&discs, z.re, z.im, EIG_FLOOR));
            }
        }
    }
}
