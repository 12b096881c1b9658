use fedbnsl::admm_mlp::{equivalent_adjacency, MlpParams};
use fedbnsl::baselines::{aggregate_average, aggregate_voting, select_best, LocalEstimate};
use fedbnsl::graph::{
    center, evaluate, partition, sample_er_dag, threshold_graph, DirectedGraph,
};
use fedbnsl::numerics::{acyclicity, lbfgs_minimize, Matrix, SolverOptions};
use fedbnsl::rng::seeded;
use fedbnsl::suffstats::{local_stats, mask_share, secure_sum, LocalStatistics, MaskKeys};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut r = seeded(seed, 0);
    Matrix::from_fn(rows, cols, |_, _| r.random_range(-1.0..1.0))
}

fn estimate(id: u32, weighted: Matrix, tau: f64) -> LocalEstimate {
    let graph = threshold_graph(&weighted, tau);
    LocalEstimate {
        client_id: id,
        weighted,
        graph,
        converged: true,
    }
}

#[test]
fn er_draws_are_acyclic() {
    let mut r = seeded(7, 0);
    for _ in 0..1000 {
        let d = r.random_range(1..=20);
        let max_edges = d * (d - 1) / 2;
        let edges = r.random_range(0..=max_edges);
        let g = sample_er_dag(d, edges, &mut r).unwrap();
        assert!(g.is_acyclic());
        assert_eq!(g.edge_count(), edges);
    }
}

#[test]
fn lbfgs_never_ends_above_its_start() {
    let mut f = |x: &[f64], g: &mut [f64]| {
        g[0] = 4.0 * x[0].powi(3) - 3.0;
        g[1] = 2.0 * (x[1] - x[0]);
        x[0].powi(4) - 3.0 * x[0] + (x[1] - x[0]).powi(2)
    };
    let mut g = [0.0; 2];
    let start = f(&[2.0, -1.0], &mut g);
    let min = lbfgs_minimize(&mut f, vec![2.0, -1.0], &SolverOptions::default()).unwrap();
    assert!(min.value <= start);
    assert!((min.x[0] - 0.75f64.cbrt()).abs() < 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn acyclicity_is_permutation_invariant(seed in any::<u64>()) {
        let w = random_matrix(5, 5, seed);
        let mut perm: Vec<usize> = (0..5).collect();
        perm.shuffle(&mut seeded(seed, 1));
        let pw = Matrix::from_fn(5, 5, |i, j| w[(perm[i], perm[j])]);
        let (a, b) = (acyclicity(&w).unwrap(), acyclicity(&pw).unwrap());
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn evaluation_is_reflexive_and_shd_symmetric(seed in any::<u64>(), d in 2usize..8) {
        let mut r = seeded(seed, 0);
        let random_graph = |r: &mut fedbnsl::rng::Rng| {
            let mut g = DirectedGraph::empty(d);
            for i in 0..d {
                for j in 0..d {
                    if i != j && r.random::<f64>() < 0.3 {
                        g.add_edge(i, j).unwrap();
                    }
                }
            }
            g
        };
        let (a, b) = (random_graph(&mut r), random_graph(&mut r));
        let m = evaluate(&a, &a).unwrap();
        prop_assert_eq!((m.shd, m.tpr, m.fdr), (0, 1.0, 0.0));
        prop_assert_eq!(evaluate(&a, &b).unwrap().shd, evaluate(&b, &a).unwrap().shd);
    }

    #[test]
    fn partition_covers_rows_evenly(n in 1usize..60, k in 1usize..12) {
        prop_assume!(k <= n);
        let x = Matrix::from_fn(n, 2, |i, j| (i * 2 + j) as f64);
        let parts = partition(&x, k).unwrap();
        prop_assert_eq!(parts.len(), k);
        let sizes: Vec<usize> = parts.iter().map(|p| p.sample_count()).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let blocks: Vec<&Matrix> = parts.iter().map(|p| &p.data).collect();
        prop_assert_eq!(Matrix::vstack(&blocks).unwrap(), x);
    }

    #[test]
    fn centering_is_idempotent(seed in any::<u64>(), n in 1usize..30) {
        let once = center(&random_matrix(n, 4, seed));
        let twice = center(&once);
        prop_assert!(once.sub(&twice).unwrap().max_abs() <= 1e-12);
    }

    #[test]
    fn statistics_add_over_splits(seed in any::<u64>(), n in 2usize..40, cut in 1usize..39) {
        prop_assume!(cut < n);
        let mut r = seeded(seed, 0);
        // Small integers keep every partial sum exact.
        let x = Matrix::from_fn(n, 3, |_, _| r.random_range(-9i32..=9) as f64);
        let a = x.select_rows(0..cut);
        let b = x.select_rows(cut..n);
        let split = local_stats(&a).add(&local_stats(&b)).unwrap();
        prop_assert_eq!(split, local_stats(&x));
    }

    #[test]
    fn secure_sum_matches_direct_sum(seed in any::<u64>(), d in 1usize..5) {
        let ids: Vec<u32> = (0..5).collect();
        let mut direct = LocalStatistics::zeros(d);
        let mut shares = Vec::new();
        for &id in &ids {
            let stats = local_stats(&random_matrix(3 + id as usize, d, seed ^ u64::from(id)));
            direct = direct.add(&stats).unwrap();
            let share = mask_share(&stats, &MaskKeys::from_session(seed, id, &ids), 1);
            prop_assert!(share.sum_x.iter().zip(&stats.sum_x).all(|(m, s)| m != s));
            prop_assert!(share
                .sum_xxt
                .as_slice()
                .iter()
                .zip(stats.sum_xxt.as_slice())
                .all(|(m, s)| m != s));
            shares.push(share);
        }
        let total = secure_sum(&shares, &ids).unwrap();
        prop_assert_eq!(total.count, direct.count);
        prop_assert!(total.max_abs_diff(&direct) <= 1e-9);
    }

    #[test]
    fn averaging_commutes_with_scaling(seed in any::<u64>(), c in 0.1f64..10.0) {
        let ests: Vec<LocalEstimate> = (0..3)
            .map(|k| estimate(k, random_matrix(4, 4, seed + u64::from(k)), 0.3))
            .collect();
        let scaled: Vec<LocalEstimate> = ests
            .iter()
            .map(|e| estimate(e.client_id, e.weighted.scale(c), 0.3 * c))
            .collect();
        prop_assert_eq!(
            aggregate_average(&scaled, 0.3 * c).unwrap(),
            aggregate_average(&ests, 0.3).unwrap()
        );
    }

    #[test]
    fn best_is_no_worse_than_any_client(seed in any::<u64>()) {
        let truth = sample_er_dag(5, 5, &mut seeded(seed, 9)).unwrap();
        let ests: Vec<LocalEstimate> = (0..4)
            .map(|k| estimate(k, random_matrix(5, 5, seed + u64::from(k)), 0.3))
            .collect();
        let best = select_best(&ests, &truth).unwrap();
        let best_shd = evaluate(&best, &truth).unwrap().shd;
        for e in &ests {
            prop_assert!(best_shd <= evaluate(&e.graph, &truth).unwrap().shd);
        }
    }

    #[test]
    fn voting_with_one_client_is_verbatim(seed in any::<u64>()) {
        let e = estimate(0, random_matrix(5, 5, seed), 0.3);
        prop_assert_eq!(aggregate_voting(std::slice::from_ref(&e)).unwrap(), e.graph);
    }

    #[test]
    fn equivalent_adjacency_is_homogeneous(seed in any::<u64>(), alpha in -5.0f64..5.0) {
        let p = MlpParams::init(4, 3, seed);
        let mut scaled = p.clone();
        scaled.scale_first_layer(alpha);
        let expected = equivalent_adjacency(&p).scale(alpha.abs());
        prop_assert!(equivalent_adjacency(&scaled).sub(&expected).unwrap().max_abs() <= 1e-12);
    }
}
