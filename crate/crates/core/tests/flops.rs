mod common;

use common::*;
use longtail::arch::{Genotype, OpSpec, SeqShape};
use longtail::budgetnas::{softmax, ArchWeights, SpaceSpec};
use longtail::flopsmeter::{
    aggregation_flops, expected_flops, genotype_flops, op_flops, space_max_flops, space_min_flops,
};
use longtail::rng::rng_for;
use proptest::prelude::*;

fn shape() -> SeqShape {
    SeqShape {
        seq_len: 32,
        dim: 15,
    }
}

fn ops() -> Vec<OpSpec> {
    SpaceSpec::default_candidates(15, 3)
}

#[test]
fn closed_form_matches_graph_walk_on_random_genotypes() {
    let ops = ops();
    let mut rng = rng_for(17, &[]);
    for i in 0..40 {
        let n_layers = 1 + i % 5;
        let g = random_genotype(&mut rng, n_layers, ops.len());
        let r = genotype_flops(&g, &ops, shape()).unwrap();
        assert_eq!(r.total, walk_genotype(&g, &ops, shape()), "{g:?}");
    }
}

#[test]
fn every_candidate_op_matches_the_walk() {
    for t in [1, 5, 32] {
        for op in SpaceSpec::default_candidates(6, 2) {
            assert_eq!(
                op_flops(&op, t).unwrap(),
                walk_genotype(
                    &Genotype {
                        layers: vec![gene(0, 0, &[])]
                    },
                    &[op],
                    SeqShape { seq_len: t, dim: 6 },
                ) - aggregation_flops(1, SeqShape { seq_len: t, dim: 6 }),
                "{op} at T={t}"
            );
        }
    }
}

#[test]
fn pointwise_conv_costs_a_dense_layer() {
    for (d, t) in [(1, 1), (4, 7), (15, 32)] {
        assert_eq!(
            op_flops(&OpSpec::conv(1, d), t).unwrap(),
            walk_dense_seq(d, d, t)
        );
    }
}

#[test]
fn hand_examples() {
    assert_eq!(
        op_flops(&OpSpec::conv(3, 2), 4).unwrap(),
        2 * 3 * 2 * 2 * 4 + 2 * 4
    );
    assert_eq!(op_flops(&OpSpec::avg_pool(3, 1), 1).unwrap(), 3);
}

#[test]
fn most_expensive_genotype_normalizes_to_one() {
    let ops = ops();
    let n = 3;
    let costliest = (0..ops.len())
        .max_by_key(|&m| op_flops(&ops[m], 32).unwrap())
        .unwrap();
    let g = Genotype {
        layers: (1..=n)
            .map(|l| gene(0, costliest, &(0..l).collect::<Vec<_>>()))
            .collect(),
    };
    let r = genotype_flops(&g, &ops, shape()).unwrap();
    assert_eq!(r.total, space_max_flops(n, &ops, shape()).unwrap());
    assert_eq!(r.normalized, 1.0);
}

#[test]
fn one_hot_weights_give_the_genotype_count() {
    let space = SpaceSpec::new(3, ops()).unwrap();
    let mut rng = rng_for(4, &[]);
    for _ in 0..10 {
        let g = random_genotype(&mut rng, 3, space.ops.len());
        let e = expected_flops(&ArchWeights::one_hot(&space, &g), &space.ops, shape()).unwrap();
        let exact = genotype_flops(&g, &space.ops, shape()).unwrap().total as f64;
        assert!(
            (e.value - exact).abs() <= 1e-9 * exact,
            "{} vs {exact}",
            e.value
        );
    }
}

#[test]
fn uniform_two_op_expectation() {
    let two = vec![OpSpec::conv(3, 4), OpSpec::max_pool(3, 4)];
    let sh = SeqShape { seq_len: 6, dim: 4 };
    let space = SpaceSpec::new(1, two.clone()).unwrap();
    let mut aw = ArchWeights::uniform(&space, 1.0);
    // drop the residual edge so only the op decision varies
    aw.logits
        .get_mut(&ArchWeights::res_key(1, 0))
        .unwrap()
        .data_mut()
        .copy_from_slice(&[200.0, 0.0]);
    let e = expected_flops(&aw, &two, sh).unwrap();
    let a = op_flops(&two[0], 6).unwrap() as f64;
    let b = op_flops(&two[1], 6).unwrap() as f64;
    let want = (a + b) / 2.0 + aggregation_flops(1, sh) as f64;
    assert!((e.value - want).abs() < 1e-6, "{} vs {want}", e.value);
}

#[test]
fn expectation_gradient_matches_differences() {
    let space = SpaceSpec::new(2, SpaceSpec::default_candidates(4, 2)).unwrap();
    let sh = SeqShape { seq_len: 5, dim: 4 };
    let mut aw = ArchWeights::uniform(&space, 1.0);
    let mut rng = rng_for(2, &[]);
    for (_, m) in aw.logits.iter_mut() {
        for x in m.data_mut() {
            *x = rand::Rng::random_range(&mut rng, -1.0..1.0);
        }
    }
    let e = expected_flops(&aw, &space.ops, sh).unwrap();
    let (err, at) = max_rel_error(&aw.logits, &e.grad, |p| {
        let mut w = aw.clone();
        w.logits = p.clone();
        expected_flops(&w, &space.ops, sh).unwrap().value
    });
    assert!(err < 1e-4, "relative error {err:e} at {at}");
    let p: f64 = softmax(aw.logits_of(&ArchWeights::op_key(1))).iter().sum();
    assert!((p - 1.0).abs() < 1e-12);
}

fn any_genotype(max_layers: usize, n_ops: usize) -> impl Strategy<Value = Genotype> {
    (1..=max_layers, any::<u64>())
        .prop_map(move |(n, seed)| random_genotype(&mut rng_for(seed, &[]), n, n_ops))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn total_is_the_sum_of_the_walk(g in any_genotype(5, 12)) {
        prop_assert_eq!(genotype_flops(&g, &ops(), shape()).unwrap().total, walk_genotype(&g, &ops(), shape()));
    }

    #[test]
    fn extra_residual_never_lowers_flops(g in any_genotype(5, 12), pick in any::<prop::sample::Index>()) {
        let before = genotype_flops(&g, &ops(), shape()).unwrap().total;
        let l = pick.index(g.layers.len());
        let mut h = g.clone();
        let missing: Vec<usize> = (0..=l).filter(|j| !h.layers[l].residual.contains(j)).collect();
        if let Some(&j) = missing.first() {
            h.layers[l].residual.push(j);
            h.layers[l].residual.sort();
        }
        prop_assert!(genotype_flops(&h, &ops(), shape()).unwrap().total >= before);
    }

    #[test]
    fn normalized_lies_in_unit_interval(g in any_genotype(5, 12)) {
        let r = genotype_flops(&g, &ops(), shape()).unwrap();
        prop_assert!(r.normalized > 0.0 && r.normalized <= 1.0);
        let n = g.layers.len();
        prop_assert!(r.total >= space_min_flops(n, &ops(), shape()).unwrap());
    }
}
