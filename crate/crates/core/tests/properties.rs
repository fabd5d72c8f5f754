use isonas_core::concentration::{cyclic_conv, Filter};
use isonas_core::init::{gram_deviation, init_conv, init_dense, orthogonal_matrix, InitSpec, KernelLayout};
use isonas_core::rng::rng_from;
use isonas_core::search::{
    compute_scores, exhaustive_topk, select_top_per_layer, Constraint, CostTable, ScoreTable,
};
use isonas_core::stats::isotonic_nonincreasing;
use isonas_core::supernet::{plan_round, BlockTemplate, FairnessCounter, IndicatorStore, SearchSpace};
use isonas_core::{Dims, Tensor4};
use proptest::prelude::*;

fn table_and_costs() -> impl Strategy<Value = (ScoreTable, CostTable)> {
    (1usize..5, 1usize..4).prop_flat_map(|(l, m)| {
        (
            prop::collection::vec(prop::collection::vec(0.0f64..3.0, m), l),
            prop::collection::vec(prop::collection::vec(1u64..50, m), l),
            prop::collection::vec(prop::collection::vec(1u64..50, m), l),
        )
            .prop_map(move |(s, f, p)| {
                (
                    ScoreTable {
                        scores: s,
                        layer_weight: vec![None; l],
                    },
                    CostTable {
                        flops: f,
                        params: p,
                        base_flops: 3,
                        base_params: 2,
                    },
                )
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn orthogonal_matrices_have_gain_squared_gram(rows in 1usize..20, cols in 1usize..20, gain in 0.5f64..2.0, seed: u64) {
        let w = orthogonal_matrix(rows, cols, gain, 1.0, &mut rng_from(seed)).unwrap();
        prop_assert!(gram_deviation(&w, gain) < 1e-10);
    }

    #[test]
    fn initialized_layers_are_orthogonal(d_out in 1usize..12, d_in in 1usize..12, k in prop::sample::select(vec![1usize, 3, 5]), seed: u64) {
        let spec = InitSpec::orthogonal(seed);
        let g = spec.resolved_gain();
        let full = InitSpec { kernel_layout: KernelLayout::Full, ..spec.clone() };
        let conv = init_conv(&full, d_out, d_in, k, 1).unwrap();
        prop_assert!(gram_deviation(&conv.flattened(), g) < 1e-8);
        // the centered bank only populates the middle tap
        if d_out <= d_in {
            let conv = init_conv(&spec, d_out, d_in, k, 1).unwrap();
            prop_assert!(gram_deviation(&conv.flattened(), g) < 1e-8);
        }
        let dense = init_dense(&spec, d_out, d_in).unwrap();
        prop_assert!(gram_deviation(&dense.flattened(), g) < 1e-8);
    }

    #[test]
    fn cyclic_conv_commutes_with_shifts(dy in 0usize..5, dx in 0usize..5, seed: u64) {
        let (n, d) = (5, 2);
        let mut rng = rng_from(seed);
        let h = Tensor4::randn(Dims::new(1, d, n, n), 1.0, &mut rng);
        let f = Filter::gaussian(3, d, 1.0, &mut rng);
        let mut data = Vec::with_capacity(d * n * n);
        for c in 0..d {
            for y in 0..n {
                for x in 0..n {
                    data.push(h.at(0, c, (y + n - dy) % n, (x + n - dx) % n));
                }
            }
        }
        let shifted = Tensor4::from_vec(Dims::new(1, d, n, n), data).unwrap();
        let a = cyclic_conv(&h, &f).unwrap();
        let b = cyclic_conv(&shifted, &f).unwrap();
        for y in 0..n {
            for x in 0..n {
                prop_assert!((b[(y, x)] - a[((y + n - dy) % n, (x + n - dx) % n)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unconstrained_top1_is_per_layer_argmax((t, c) in table_and_costs()) {
        let top = exhaustive_topk(&t, &c, &Constraint::none(), 1).unwrap();
        let best = select_top_per_layer(&t).blocks().unwrap();
        prop_assert_eq!(t.path_score(&top.entries[0].choices), t.path_score(&best));
    }

    #[test]
    fn ranked_entries_are_feasible_and_sorted((t, c) in table_and_costs(), cap in 5u64..200) {
        let con = Constraint { max_flops: Some(cap), max_params: None };
        if let Ok(r) = exhaustive_topk(&t, &c, &con, 5) {
            for e in &r.entries {
                let (f, p) = c.cost(&e.choices);
                prop_assert!(con.admits(f, p));
                prop_assert_eq!((f, p), (e.flops, e.params));
                prop_assert!((e.score - t.path_score(&e.choices)).abs() < 1e-12);
            }
            for w in r.entries.windows(2) {
                prop_assert!(w[0].score >= w[1].score);
            }
        }
    }

    #[test]
    fn relaxing_a_constraint_never_lowers_top1((t, c) in table_and_costs(), cap in 5u64..200, extra in 0u64..100) {
        let tight = exhaustive_topk(&t, &c, &Constraint { max_flops: Some(cap), max_params: None }, 1);
        let loose = exhaustive_topk(&t, &c, &Constraint { max_flops: Some(cap + extra), max_params: None }, 1);
        if let Ok(tight) = tight {
            prop_assert!(loose.unwrap().entries[0].score >= tight.entries[0].score);
        }
    }

    #[test]
    fn positive_rescaling_keeps_argmax(gammas in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 3), 3), layer in 0usize..3, c in 0.1f64..10.0) {
        let store = IndicatorStore {
            block: gammas.iter().map(|row| row.iter().map(|&g| vec![g, g / 2.0]).collect()).collect(),
            layer: vec![Some(vec![1.0]), None, Some(vec![0.5])],
        };
        let mut scaled = store.clone();
        for v in &mut scaled.block[layer] {
            v.iter_mut().for_each(|g| *g *= c);
        }
        prop_assert_eq!(select_top_per_layer(&compute_scores(&store)), select_top_per_layer(&compute_scores(&scaled)));
    }

    #[test]
    fn rounds_are_strictly_fair(m in 1usize..5, rounds in 1u64..12, seed: u64) {
        let cands: Vec<BlockTemplate> = (0..m).map(|i| BlockTemplate::plain(if i % 2 == 0 { 3 } else { 5 }, 1)).collect();
        let space = SearchSpace::uniform("NNRN", &cands, 4, 1, 16, 2).unwrap();
        let mut counter = FairnessCounter::new(&space);
        for r in 0..rounds {
            let plan = plan_round(&space, seed, r);
            prop_assert_eq!(plan.block_paths.len(), m);
            for p in &plan.block_paths {
                p.validate(&space).unwrap();
                counter.record(p);
            }
        }
        prop_assert_eq!(counter.uniform_count(), Some(rounds));
    }

    #[test]
    fn isotonic_fit_is_nonincreasing(ys in prop::collection::vec(0.0f64..1.0, 1..20)) {
        let fit = isotonic_nonincreasing(&ys);
        prop_assert_eq!(fit.len(), ys.len());
        for w in fit.windows(2) {
            prop_assert!(w[0] >= w[1] - 1e-12);
        }
    }
}
