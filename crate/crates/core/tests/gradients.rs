//! Analytic gradients against central finite differences.

mod common;

use common::*;
use longtail::arch::SeqShape;
use longtail::budgetnas::{penalty_gradient, ArchWeights};
use longtail::flopsmeter::expected_flops;

const TOL: f64 = 1e-4;

#[test]
fn model_parameter_gradients() {
    for (name, spec) in gradient_specs() {
        let (err, at) = spec_grad_error(&spec);
        assert!(err < TOL, "{name}: relative error {err:e} at {at}");
    }
}

#[test]
fn supernet_arch_logit_gradients_match_straight_through_surrogate() {
    for seed in 0..5 {
        let (err, at) = supernet_logit_grad_error(seed);
        assert!(err < TOL, "seed {seed}: relative error {err:e} at {at}");
    }
}

#[test]
fn flops_penalty_gradients() {
    let mut net = tiny_supernet();
    let (_, analytic) = penalty_gradient(&net, 2.5).unwrap();
    let logits = net.arch.logits.clone();
    let (err, at) = max_rel_error(&logits, &analytic, |p| {
        net.arch.logits = p.clone();
        penalty_gradient(&net, 2.5).unwrap().0
    });
    assert!(err < TOL, "relative error {err:e} at {at}");

    // the closed form agrees with finite differences as well
    net.arch.logits = logits.clone();
    let shape = SeqShape { seq_len: 5, dim: 4 };
    let ops = net.space.ops.clone();
    let e = expected_flops(&net.arch, &ops, shape).unwrap();
    let mut aw: ArchWeights = net.arch.clone();
    let (err, at) = max_rel_error(&logits, &e.grad, |p| {
        aw.logits = p.clone();
        expected_flops(&aw, &ops, shape).unwrap().value
    });
    assert!(err < TOL, "relative error {err:e} at {at}");
}
