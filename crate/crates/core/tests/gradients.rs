mod common;

use std::collections::BTreeSet;

use sdcl::autodiff::{grad_check, OPS};
use sdcl::bdcl::AugLoss;
use sdcl::sgem::RoutingMode;
use sdcl::synth::generate_benchmark;
use sdcl::trainer::check_step_gradient;

#[test]
fn catalog_covers_every_registered_op() {
    let covered: BTreeSet<&str> = common::op_cases(0).iter().map(|c| c.op).collect();
    let registered: BTreeSet<&str> = OPS.iter().copied().collect();
    assert_eq!(covered, registered);
}

#[test]
fn op_gradients_at_three_seeds() {
    for seed in [11, 12, 13] {
        for case in common::op_cases(seed) {
            let r = grad_check(case.op, &case.f, &case.point, 1e-5).unwrap();
            assert!(
                r.max_rel_error < 1e-4,
                "{}.{} seed {seed}: {:?}",
                case.op,
                case.arg,
                r
            );
        }
    }
}

#[test]
fn step_gradient_across_pipeline_switches() {
    let base = common::mini_config();
    let batch = generate_benchmark(&base.benchmark)
        .unwrap()
        .train
        .slice(0, 8)
        .unwrap();
    let mut literal = base.clone();
    literal.sgem.routing = RoutingMode::Literal;
    let mut raw = base.clone();
    raw.bdcl.aug_loss = AugLoss::Raw;
    let mut plain = base.clone();
    plain.sgem.enabled = false;
    for cfg in [base, literal, raw, plain] {
        let r = check_step_gradient(&cfg, &batch, 32, 1e-6).unwrap();
        assert!(r.max_rel_error < 1e-3, "{:?} {:?}", cfg.sgem.routing, r);
    }
}
