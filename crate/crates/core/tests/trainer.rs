mod common;

use sdcl::synth::generate_benchmark;
use sdcl::trainer::{ablate, sweep, train_on, OptimizerConfig, RunConfig, SweepParam, Variant};

fn small() -> RunConfig {
    let mut cfg = common::mini_config();
    cfg.benchmark.train_count = 96;
    cfg.benchmark.test_count = 48;
    cfg.epochs = 2;
    cfg
}

#[test]
fn ablation_base_row_is_a_plain_run_without_experts() {
    let cfg = small();
    let bench = generate_benchmark(&cfg.benchmark).unwrap();
    let rows = ablate(&cfg, &[1, 2, 3]).unwrap();
    for (i, seed) in [1u64, 2, 3].into_iter().enumerate() {
        let mut plain = cfg.clone();
        plain.seed = seed;
        plain.sgem.enabled = false;
        plain.bdcl.enabled = false;
        let (_, r) = train_on(&plain, &bench).unwrap();
        assert_eq!(rows[0].variant, Variant::Base);
        assert_eq!(rows[0].accuracies[i], r.decorrelated_accuracy);
    }
}

#[test]
fn alpha_one_matches_training_without_fusion() {
    let cfg = small();
    let bench = generate_benchmark(&cfg.benchmark).unwrap();
    let mut sg = Variant::BaseSg.apply(&cfg);
    sg.seed = 4;
    let mut fused = Variant::Sdcl.apply(&cfg);
    fused.seed = 4;
    fused.bdcl.alpha = 1.0;
    let (_, a) = train_on(&sg, &bench).unwrap();
    let (_, b) = train_on(&fused, &bench).unwrap();
    assert_eq!(a.param_checksum, b.param_checksum);
    assert_eq!(a.decorrelated_accuracy, b.decorrelated_accuracy);
    assert!(b.fusions > 0);
}

#[test]
fn sweep_rows_reuse_single_runs() {
    let cfg = small();
    let bench = generate_benchmark(&cfg.benchmark).unwrap();
    let rows = sweep(&cfg, SweepParam::Alpha, &[0.3], &[5]).unwrap();
    let mut run = cfg.clone();
    run.seed = 5;
    run.bdcl.alpha = 0.3;
    assert_eq!(
        rows[0].accuracies[0],
        train_on(&run, &bench).unwrap().1.decorrelated_accuracy
    );
}

#[test]
fn golden_mini_run() {
    let mut cfg = small();
    cfg.seed = 7;
    cfg.epochs = 6;
    cfg.benchmark.train_count = 256;
    cfg.benchmark.test_count = 200;
    cfg.model.channels = vec![8, 12];
    cfg.optimizer = OptimizerConfig::Adam {
        lr: 0.01,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
    let bench = generate_benchmark(&cfg.benchmark).unwrap();
    let (_, r) = train_on(&cfg, &bench).unwrap();
    let last = r.epochs.last().unwrap();
    println!("golden: {:?} {:?}", r.decorrelated_accuracy, last.total);
    // frozen from the first green run; tolerances absorb kernel dispatch
    // differences across CPUs
    assert!((r.decorrelated_accuracy - 0.255).abs() < 1e-9);
    assert!((last.total - 1.1743495877474954).abs() < 1e-6);
}
