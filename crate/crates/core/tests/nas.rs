mod common;

use common::*;
use longtail::arch::OpSpec;
use longtail::budgetnas::{
    derive_genotype, distill, gumbel_noise, relaxed_probs, run_search, searched_spec,
    supernet_forward, train_light, ArchWeights, NasConfig, SpaceSpec, Supernet,
};
use longtail::flopsmeter::{genotype_flops, space_max_flops, space_min_flops};
use longtail::nets::{
    auc, build_model, predict, predict_batch, train_model, ArchConfig, Architecture, Batch,
    EncoderKind, InputShape, LossSpec, ModelSpec, Provenance, TrainConfig, TrainingSet,
};
use longtail::rng::rng_for;
use longtail::synthgen::RowSet;
use proptest::prelude::*;

#[test]
fn gumbel_argmax_follows_softmax() {
    for (i, logits) in [
        vec![0.0, 0.0, 0.0],
        vec![1.5, -0.3, 0.2, 0.0],
        vec![3.0, 0.0],
    ]
    .iter()
    .enumerate()
    {
        let gap = gumbel_law_gap(logits, 100_000, i as u64);
        assert!(gap < 0.01, "{logits:?}: gap {gap}");
    }
}

#[test]
fn cold_temperature_is_nearly_one_hot() {
    let p = relaxed_probs(&[5.0, 0.0, 0.0], &[0.0; 3], 0.01);
    assert!(p[0] > 1.0 - 1e-6);
}

proptest! {
    #[test]
    fn relaxed_probs_sum_to_one(
        logits in prop::collection::vec(-10.0f64..10.0, 1..12),
        tau in 0.01f64..5.0,
        seed in any::<u64>(),
    ) {
        let noise = gumbel_noise(&mut rng_for(seed, &[]), logits.len());
        let p = relaxed_probs(&logits, &noise, tau);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }
}

#[test]
fn supernet_output_is_the_sampled_subnetwork() {
    let gap = straight_through_gap(100);
    assert!(gap < 1e-9, "gap {gap:e}");
}

#[test]
fn single_choice_space_is_a_fixed_network() {
    let space = SpaceSpec::new(1, vec![OpSpec::recurrent(4)]).unwrap();
    let mut net = Supernet::new(space.clone(), tiny_input(), vec![3], vec![], 3).unwrap();
    // force the residual decision so the only choice left is trivial
    net.arch
        .logits
        .get_mut(&ArchWeights::res_key(1, 0))
        .unwrap()
        .data_mut()
        .copy_from_slice(&[100.0, -100.0]);
    let ds = tiny_dataset(3);
    let batch = Batch::from_rows(&ds, &(0..10).collect::<Vec<_>>());
    let pass = supernet_forward(&net, &batch, 1.0, &mut rng_for(0, &[])).unwrap();
    let fixed = net
        .extract(&pass.genotype(&space), Provenance::new("x", 0, 0))
        .unwrap();
    assert!(fixed.params.names().any(|n| n.starts_with("cell.1.")));
    assert_eq!(
        pass.genotype(&space).layers[0].residual,
        Vec::<usize>::new()
    );
    for (a, b) in pass
        .prob_values()
        .iter()
        .zip(predict_batch(&fixed, &batch).unwrap())
    {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn derive_matches_exhaustive_enumeration() {
    assert_eq!(exhaustive_mismatches(10, 1), 0);
}

#[test]
fn cheapest_budget_gives_a_cheapest_genotype() {
    let space = toy_space();
    let shape = toy_shape();
    let min = space_min_flops(space.n_layers, &space.ops, shape).unwrap();
    let mut rng = rng_for(8, &[]);
    for _ in 0..5 {
        let mut aw = ArchWeights::uniform(&space, 1.0);
        randomize_logits(&mut aw, &mut rng, 3.0);
        let g = derive_genotype(&aw, &space, min, shape).unwrap();
        assert_eq!(genotype_flops(&g, &space.ops, shape).unwrap().total, min);
    }
}

#[test]
fn heavier_penalty_never_buys_more_flops() {
    let f = lambda_sweep(&[0, 1, 2, 3, 4], &[0.0, 1.0, 10.0]);
    assert!(f[1] <= f[0] && f[2] <= f[1], "{f:?}");
}

#[test]
fn overwhelming_penalty_selects_minimum_flops() {
    let space = toy_space();
    let shape = toy_shape();
    let ds = toy_scenario(6);
    let net = Supernet::new(space.clone(), InputShape::of(&ds), vec![4], vec![], 6).unwrap();
    let cfg = NasConfig {
        n_layers: 2,
        delta: 0.0,
        lambda: Some(1e3),
        epochs: 6,
        batch_size: 32,
        arch_lr: 0.05,
        ..NasConfig::default()
    };
    let (net, _) = run_search(net, &ds, None, &cfg, 6).unwrap();
    let max = space_max_flops(2, &space.ops, shape).unwrap();
    let g = derive_genotype(&net.arch, &space, max, shape).unwrap();
    assert_eq!(
        genotype_flops(&g, &space.ops, shape).unwrap().total,
        space_min_flops(2, &space.ops, shape).unwrap()
    );
}

#[test]
fn distillation_needs_a_teacher() {
    let ds = toy_scenario(1);
    let net = Supernet::new(toy_space(), InputShape::of(&ds), vec![4], vec![], 1).unwrap();
    let cfg = NasConfig {
        n_layers: 2,
        ..NasConfig::default()
    };
    assert!(run_search(net, &ds, None, &cfg, 1).is_err());
}

fn light_searched(ds: &longtail::synthgen::ScenarioDataset) -> ModelSpec {
    let space = toy_space();
    searched_spec(
        InputShape::of(ds),
        &space,
        space.genotype_from_choices(&[0, 0, 0, 1, 1, 0, 0]),
        vec![4],
        vec![],
    )
}

#[test]
fn zero_delta_distillation_is_plain_training() {
    let ds = toy_scenario(2);
    let rows = ds.rows(RowSet::Train);
    let student = build_model(&light_searched(&ds), 4, Provenance::new("s", 0, 4)).unwrap();
    let teacher = build_model(&light_searched(&ds), 5, Provenance::new("t", 0, 5)).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 32,
        ..TrainConfig::default()
    };
    let a = distill(&student, &ds, &rows, &teacher, &cfg, 0.0).unwrap();
    let (b, _) = train_model(
        &student,
        &TrainingSet::from_rows(&ds, &rows),
        &cfg,
        LossSpec::Ce,
    )
    .unwrap();
    assert_eq!(a.params, b.params);
}

#[test]
fn distilled_student_keeps_up_with_plain_student() {
    let mut with = 0.0;
    let mut without = 0.0;
    for seed in 0..5 {
        let ds = toy_scenario(20 + seed);
        let train = ds.rows(RowSet::Train);
        let test = ds.rows(RowSet::Test);
        let teacher_spec = ModelSpec::new(
            InputShape::of(&ds),
            Architecture::Predesigned(ArchConfig {
                hidden_dim: 8,
                embed_dim: 8,
                n_encoder_layers: 2,
                profile_mlp_dims: vec![8],
                head_mlp_dims: vec![8],
                ..ArchConfig::light(EncoderKind::Recurrent)
            }),
        );
        let fresh = build_model(&teacher_spec, seed, Provenance::new("t", 0, seed)).unwrap();
        let tcfg = TrainConfig {
            learning_rate: 0.01,
            epochs: 15,
            batch_size: 32,
            seed,
            ..TrainConfig::default()
        };
        let (teacher, _) = train_model(
            &fresh,
            &TrainingSet::from_rows(&ds, &train),
            &tcfg,
            LossSpec::Ce,
        )
        .unwrap();
        let scfg = TrainConfig {
            learning_rate: 0.01,
            epochs: 8,
            batch_size: 32,
            seed,
            ..TrainConfig::default()
        };
        let spec = light_searched(&ds);
        let labels = ds.labels_f64(&test);
        let score = |delta: f64| {
            let m = train_light(
                &spec,
                &ds,
                &teacher,
                &scfg,
                delta,
                Provenance::new("s", 0, seed),
            )
            .unwrap();
            auc(&predict(&m, &ds, &test, 256).unwrap(), &labels).unwrap()
        };
        with += score(1.0);
        without += score(0.0);
    }
    assert!(
        with / 5.0 >= without / 5.0 - 0.005,
        "distilled {} vs plain {}",
        with / 5.0,
        without / 5.0
    );
}
