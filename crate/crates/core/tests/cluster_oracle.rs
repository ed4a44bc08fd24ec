mod common;

use common::{brute_force_upgma, mean_rows, nearest};
use damvp_core::cluster::{agglomerate, cut, prototypes, route, FeatureMatrix, PrototypeSet};
use damvp_core::rng;
use proptest::prelude::*;
use rand_distr::{Distribution, StandardNormal};

fn random_points(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng::stream(seed, "oracle-points", 0);
    (0..n).map(|_| (0..d).map(|_| StandardNormal.sample(&mut r)).collect()).collect()
}

fn matches_oracle(points: &[Vec<f64>]) {
    let dend = agglomerate(&FeatureMatrix::from_rows(points.to_vec()).unwrap()).unwrap();
    let oracle = brute_force_upgma(points);
    assert_eq!(dend.merges.len(), oracle.len());
    for (k, (m, o)) in dend.merges.iter().zip(&oracle).enumerate() {
        assert_eq!((m.left, m.right), (o.0, o.1), "merge {k}");
        assert!((m.distance - o.2).abs() <= 1e-9 * o.2.max(1.0), "merge {k}: {} vs {}", m.distance, o.2);
    }
}

#[test]
fn fifty_random_instances_match_brute_force() {
    for i in 0..50u64 {
        let n = 2 + (i as usize * 13) % 63;
        let d = 1 + (i as usize % 5) * 3;
        matches_oracle(&random_points(n, d, i));
    }
}

#[test]
fn clustered_instances_match_brute_force() {
    for seed in 0..5u64 {
        let base = random_points(40, 6, 100 + seed);
        let pts: Vec<Vec<f64>> = base.iter().enumerate().map(|(i, p)| p.iter().map(|v| v * 0.3 + (i % 4) as f64 * 8.0).collect()).collect();
        matches_oracle(&pts);
    }
}

#[test]
fn four_point_example() {
    let pts = vec![vec![0.0, 0.0], vec![0.0, 1.0], vec![10.0, 10.0], vec![10.0, 11.0]];
    let dend = agglomerate(&FeatureMatrix::from_rows(pts.clone()).unwrap()).unwrap();
    let pairs: Vec<(usize, usize, f64)> = dend.merges.iter().map(|m| (m.left, m.right, m.distance)).collect();
    assert_eq!((pairs[0].0, pairs[0].1, pairs[0].2), (0, 1, 1.0));
    assert_eq!((pairs[1].0, pairs[1].1, pairs[1].2), (2, 3, 1.0));
    let cross = (2.0 * 200f64.sqrt() + 221f64.sqrt() + 181f64.sqrt()) / 4.0;
    assert!((pairs[2].2 - cross).abs() < 1e-12);
    assert!((pairs[2].2 - 14.15099).abs() < 1e-5);

    let c = cut(&dend, 2.0, None).unwrap();
    assert_eq!(c.clusters, 2);
    assert_eq!(c.labels, vec![0, 0, 1, 1]);
}

/// Equal distances resolve to the smallest `(min id, max id)` pair.
#[test]
fn ties_follow_id_order() {
    let pts: Vec<Vec<f64>> = [0.0, 1.0, 2.0, 3.0].iter().map(|&x| vec![x]).collect();
    let dend = agglomerate(&FeatureMatrix::from_rows(pts.clone()).unwrap()).unwrap();
    let oracle = brute_force_upgma(&pts);
    let got: Vec<(usize, usize)> = dend.merges.iter().map(|m| (m.left, m.right)).collect();
    assert_eq!(got, vec![(0, 1), (2, 3), (4, 5)]);
    assert_eq!(got, oracle.iter().map(|o| (o.0, o.1)).collect::<Vec<_>>());
}

#[test]
fn cap_forces_merges_past_threshold() {
    let pts = random_points(30, 3, 9);
    let dend = agglomerate(&FeatureMatrix::from_rows(pts).unwrap()).unwrap();
    let c = cut(&dend, 1e-9, Some(4)).unwrap();
    assert_eq!(c.clusters, 4);
    assert!(cut(&dend, 0.0, None).is_err());
    assert!(cut(&dend, 1.0, Some(0)).is_err());
}

#[test]
fn routing_matches_exhaustive_scan() {
    let centroids = random_points(7, 12, 1);
    let protos = PrototypeSet {
        centroids: centroids.clone(),
        threshold: 1.0,
        fingerprint: 0,
    };
    for f in random_points(1000, 12, 2) {
        assert_eq!(route(&f, &protos).unwrap(), nearest(&f, &centroids));
    }
    // equidistant from centroids 0 and 1
    let tie = PrototypeSet {
        centroids: vec![vec![1.0, 0.0], vec![-1.0, 0.0]],
        threshold: 1.0,
        fingerprint: 0,
    };
    assert_eq!(route(&[0.0, 5.0], &tie).unwrap(), 0);
    assert!(route(&[0.0], &tie).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn merge_distances_never_decrease(n in 2usize..40, d in 1usize..6, seed in any::<u64>()) {
        let dend = agglomerate(&FeatureMatrix::from_rows(random_points(n, d, seed)).unwrap()).unwrap();
        prop_assert!(dend.is_monotone());
        prop_assert_eq!(dend.merges.len(), n - 1);
    }

    #[test]
    fn cluster_count_nonincreasing_in_threshold(n in 2usize..40, seed in any::<u64>(), a in 0.01f64..5.0, b in 0.01f64..5.0) {
        let dend = agglomerate(&FeatureMatrix::from_rows(random_points(n, 3, seed)).unwrap()).unwrap();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(cut(&dend, lo, None).unwrap().clusters >= cut(&dend, hi, None).unwrap().clusters);
    }

    /// Relabeling the input permutes the partition but not its blocks.
    #[test]
    fn partition_invariant_under_permutation(n in 3usize..30, seed in any::<u64>(), tau in 0.5f64..4.0) {
        let pts = random_points(n, 3, seed);
        let mut r = rng::stream(seed, "perm", 0);
        let perm = rng::permutation(n, &mut r);
        let shuffled: Vec<Vec<f64>> = perm.iter().map(|&i| pts[i].clone()).collect();
        let a = cut(&agglomerate(&FeatureMatrix::from_rows(pts).unwrap()).unwrap(), tau, None).unwrap();
        let b = cut(&agglomerate(&FeatureMatrix::from_rows(shuffled).unwrap()).unwrap(), tau, None).unwrap();
        prop_assert_eq!(a.clusters, b.clusters);
        for i in 0..n {
            for j in 0..n {
                prop_assert_eq!(b.labels[i] == b.labels[j], a.labels[perm[i]] == a.labels[perm[j]]);
            }
        }
    }

    #[test]
    fn prototypes_are_cluster_means(n in 2usize..50, d in 1usize..8, seed in any::<u64>(), tau in 0.5f64..4.0) {
        let pts = random_points(n, d, seed);
        let fm = FeatureMatrix::from_rows(pts.clone()).unwrap();
        let c = cut(&agglomerate(&fm).unwrap(), tau, None).unwrap();
        let p = prototypes(&fm, &c).unwrap();
        prop_assert_eq!(p.len(), c.clusters);
        for (k, centroid) in p.centroids.iter().enumerate() {
            let want = mean_rows(&pts, |i| c.labels[i] == k);
            for (x, y) in centroid.iter().zip(&want) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
