//! Shared fixtures: the gradient-check catalog and tiny run configs.
#![allow(dead_code)]

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sdcl::autodiff::{Graph, Tensor, Var};
use sdcl::nets::ModelSpec;
use sdcl::sgem::SgemConfig;
use sdcl::synth::BenchmarkSpec;
use sdcl::trainer::RunConfig;
use sdcl::Result;

pub type ScalarFn = Box<dyn Fn(&mut Graph, Var) -> Result<Var>>;

/// One gradient check: which op, which argument varies, the point, and a
/// scalar function of that argument with every other operand fixed.
pub struct OpCase {
    pub op: &'static str,
    pub arg: &'static str,
    pub point: Tensor,
    pub f: ScalarFn,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Uniform in `[-hi, -lo] ∪ [lo, hi]`, away from kinks at zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.gen_range(lo..hi);
            if rng.gen::<bool>() {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `sum(y * probe)` with a fixed random probe, so every output coordinate
/// carries a distinct weight.
fn probed(g: &mut Graph, y: Var, probe: &Tensor) -> Result<Var> {
    let p = g.constant(probe.clone());
    let m = g.mul(y, p)?;
    g.sum(m)
}

macro_rules! case {
    ($cases:ident, $op:expr, $arg:expr, $point:expr, $out:expr, |$g:ident, $x:ident| $body:expr) => {{
        let probe = $out;
        $cases.push(OpCase {
            op: $op,
            arg: $arg,
            point: $point,
            f: Box::new(move |$g: &mut Graph, $x: Var| {
                let y = $body?;
                probed($g, y, &probe)
            }),
        });
    }};
}

/// Every registered op, every differentiable argument, at a point drawn
/// from `seed`.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut cases = Vec::new();

    let c23 = uniform(r, &[2, 3], -1.0, 1.0);
    let (a, b, m) = (c23.clone(), c23.clone(), c23.clone());
    case!(
        cases,
        "add",
        "lhs",
        uniform(r, &[2, 3], -1.0, 1.0),
        uniform(r, &[2, 3], -1.0, 1.0),
        |g, x| {
            let c = g.constant(a.clone());
            g.add(x, c)
        }
    );
    case!(
        cases,
        "add",
        "rhs",
        uniform(r, &[2, 3], -1.0, 1.0),
        uniform(r, &[2, 3], -1.0, 1.0),
        |g, x| {
            let c = g.constant(b.clone());
            g.add(c, x)
        }
    );
    let (s1, s2) = (c23.clone(), c23.clone());
    case!(
        cases,
        "sub",
        "lhs",
        uniform(r, &[2, 3], -1.0, 1.0),
        uniform(r, &[2, 3], -1.0, 1.0),
        |g, x| {
            let c = g.constant(s1.clone());
            g.sub(x, c)
        }
    );
    case!(
        cases,
        "sub",
        "rhs",
        uniform(r, &[2, 3], -1.0, 1.0),
        uniform(r, &[2, 3], -1.0, 1.0),
        |g, x| {
            let c = g.constant(s2.clone());
            g.sub(c, x)
        }
    );
    let m2 = m.clone();
    case!(
        cases,
        "mul",
        "lhs",
        uniform(r, &[2, 3], -1.0, 1.0),
        uniform(r, &[2, 3], -1.0, 1.0),
        |g, x| {
            let c = g.constant(m.clone());
            g.mul(x, c)
        }
    );
    case!(
        cases,
        "mul",
        "rhs",
        uniform(r, &[2, 3], -1.0, 1.0),
        uniform(r, &[2, 3], -1.0, 1.0),
        |g, x| {
            let c = g.constant(m2.clone());
            let sq = g.mul(x, x)?;
            g.mul(c, sq)
        }
    );
    let factor = r.gen_range(-2.0..2.0);
    case!(
        cases,
        "scale",
        "x",
        uniform(r, &[2, 3], -1.0, 1.0),
        uniform(r, &[2, 3], -1.0, 1.0),
        |g, x| { g.scale(x, factor) }
    );

    let (dx, dw, db) = (
        uniform(r, &[3, 4], -1.0, 1.0),
        uniform(r, &[4, 5], -1.0, 1.0),
        uniform(r, &[5], -1.0, 1.0),
    );
    let (w1, b1) = (dw.clone(), db.clone());
    case!(
        cases,
        "dense",
        "x",
        dx.clone(),
        uniform(r, &[3, 5], -1.0, 1.0),
        |g, x| {
            let w = g.constant(w1.clone());
            let b = g.constant(b1.clone());
            g.dense(x, w, b)
        }
    );
    let (x2, b2) = (dx.clone(), db.clone());
    case!(
        cases,
        "dense",
        "w",
        dw.clone(),
        uniform(r, &[3, 5], -1.0, 1.0),
        |g, w| {
            let x = g.constant(x2.clone());
            let b = g.constant(b2.clone());
            g.dense(x, w, b)
        }
    );
    let (x3, w3) = (dx, dw);
    case!(
        cases,
        "dense",
        "b",
        db,
        uniform(r, &[3, 5], -1.0, 1.0),
        |g, b| {
            let x = g.constant(x3.clone());
            let w = g.constant(w3.clone());
            g.dense(x, w, b)
        }
    );

    let (cx, cw, cb) = (
        uniform(r, &[2, 2, 5, 4], -1.0, 1.0),
        uniform(r, &[3, 2, 3, 3], -1.0, 1.0),
        uniform(r, &[3], -1.0, 1.0),
    );
    let (w1, b1) = (cw.clone(), cb.clone());
    case!(
        cases,
        "conv3x3",
        "x",
        cx.clone(),
        uniform(r, &[2, 3, 5, 4], -1.0, 1.0),
        |g, x| {
            let w = g.constant(w1.clone());
            let b = g.constant(b1.clone());
            g.conv3x3(x, w, b)
        }
    );
    let (x2, b2) = (cx.clone(), cb.clone());
    case!(
        cases,
        "conv3x3",
        "w",
        cw.clone(),
        uniform(r, &[2, 3, 5, 4], -1.0, 1.0),
        |g, w| {
            let x = g.constant(x2.clone());
            let b = g.constant(b2.clone());
            g.conv3x3(x, w, b)
        }
    );
    let (x3, w3) = (cx, cw);
    case!(
        cases,
        "conv3x3",
        "b",
        cb,
        uniform(r, &[2, 3, 5, 4], -1.0, 1.0),
        |g, b| {
            let x = g.constant(x3.clone());
            let w = g.constant(w3.clone());
            g.conv3x3(x, w, b)
        }
    );

    case!(
        cases,
        "relu",
        "x",
        away_from_zero(r, &[2, 5], 0.05, 1.0),
        uniform(r, &[2, 5], -1.0, 1.0),
        |g, x| { g.relu(x) }
    );
    case!(
        cases,
        "avg_pool2",
        "x",
        uniform(r, &[2, 2, 4, 6], -1.0, 1.0),
        uniform(r, &[2, 2, 2, 3], -1.0, 1.0),
        |g, x| { g.avg_pool2(x) }
    );
    case!(
        cases,
        "global_avg_pool",
        "x",
        uniform(r, &[2, 3, 3, 2], -1.0, 1.0),
        uniform(r, &[2, 3], -1.0, 1.0),
        |g, x| { g.global_avg_pool(x) }
    );
    case!(
        cases,
        "channel_mean",
        "x",
        uniform(r, &[2, 3, 3, 3], -1.0, 1.0),
        uniform(r, &[2, 3], -1.0, 1.0),
        |g, x| { g.channel_mean(x) }
    );
    case!(
        cases,
        "channel_std",
        "x",
        uniform(r, &[2, 3, 3, 3], -1.0, 1.0),
        uniform(r, &[2, 3], -1.0, 1.0),
        |g, x| { g.channel_std(x) }
    );

    for (op, name) in [
        ("channel_sub", 0usize),
        ("channel_mul", 1usize),
        ("channel_add", 2usize),
    ] {
        let apply = move |g: &mut Graph, x: Var, v: Var| match name {
            0 => g.channel_sub(x, v),
            1 => g.channel_mul(x, v),
            _ => g.channel_add(x, v),
        };
        let (fx, fv) = (
            uniform(r, &[2, 3, 2, 3], -1.0, 1.0),
            uniform(r, &[2, 3], -1.0, 1.0),
        );
        let v1 = fv.clone();
        case!(
            cases,
            op,
            "x",
            fx.clone(),
            uniform(r, &[2, 3, 2, 3], -1.0, 1.0),
            |g, x| {
                let v = g.constant(v1.clone());
                apply(g, x, v)
            }
        );
        case!(
            cases,
            op,
            "v",
            fv,
            uniform(r, &[2, 3, 2, 3], -1.0, 1.0),
            |g, v| {
                let x = g.constant(fx.clone());
                apply(g, x, v)
            }
        );
    }

    // floor at 0.5; points kept at least 0.05 away from the kink
    let fl: Vec<f64> = (0..6)
        .map(|_| {
            let v: f64 = r.gen_range(0.05..0.45);
            if r.gen::<bool>() {
                0.5 + v
            } else {
                0.5 - v
            }
        })
        .collect();
    case!(
        cases,
        "floor",
        "x",
        Tensor::new(vec![2, 3], fl).unwrap(),
        uniform(r, &[2, 3], -1.0, 1.0),
        |g, x| { g.floor(x, 0.5) }
    );
    case!(
        cases,
        "recip",
        "x",
        away_from_zero(r, &[2, 3], 0.5, 2.0),
        uniform(r, &[2, 3], -1.0, 1.0),
        |g, x| { g.recip(x) }
    );
    case!(
        cases,
        "softmax",
        "x",
        uniform(r, &[2, 4], -2.0, 2.0),
        uniform(r, &[2, 4], -1.0, 1.0),
        |g, x| { g.softmax(x) }
    );
    let mask = vec![true, false, true, true, false, true, true, false];
    case!(
        cases,
        "masked_softmax",
        "x",
        uniform(r, &[2, 4], -2.0, 2.0),
        uniform(r, &[2, 4], -1.0, 1.0),
        |g, x| { g.masked_softmax(x, &mask) }
    );
    let labels: Vec<usize> = (0..3).map(|_| r.gen_range(0..4)).collect();
    case!(
        cases,
        "cross_entropy",
        "logits",
        uniform(r, &[3, 4], -2.0, 2.0),
        Tensor::scalar(1.0),
        |g, x| { g.cross_entropy(x, &labels) }
    );
    case!(
        cases,
        "sum",
        "x",
        uniform(r, &[2, 3], -1.0, 1.0),
        Tensor::scalar(1.3),
        |g, x| {
            let sq = g.mul(x, x)?;
            g.sum(sq)
        }
    );
    case!(
        cases,
        "mean",
        "x",
        uniform(r, &[2, 3], -1.0, 1.0),
        Tensor::scalar(0.7),
        |g, x| {
            let sq = g.mul(x, x)?;
            g.mean(sq)
        }
    );
    case!(
        cases,
        "sum_rows",
        "x",
        uniform(r, &[3, 4], -1.0, 1.0),
        uniform(r, &[4], -1.0, 1.0),
        |g, x| { g.sum_rows(x) }
    );
    case!(
        cases,
        "cv_squared",
        "x",
        uniform(r, &[5], 0.2, 2.0),
        Tensor::scalar(1.0),
        |g, x| { g.cv_squared(x) }
    );
    let (ca, cb2) = (
        uniform(r, &[2, 3], -1.0, 1.0),
        uniform(r, &[2, 2], -1.0, 1.0),
    );
    let cb3 = cb2.clone();
    case!(
        cases,
        "concat_cols",
        "lhs",
        ca.clone(),
        uniform(r, &[2, 5], -1.0, 1.0),
        |g, x| {
            let c = g.constant(cb3.clone());
            g.concat_cols(x, c)
        }
    );
    case!(
        cases,
        "concat_cols",
        "rhs",
        cb2,
        uniform(r, &[2, 5], -1.0, 1.0),
        |g, x| {
            let c = g.constant(ca.clone());
            g.concat_cols(c, x)
        }
    );

    let experts: Vec<Tensor> = (0..3).map(|_| uniform(r, &[2, 4], -1.0, 1.0)).collect();
    let weights = uniform(r, &[2, 3], 0.1, 1.0);
    let ex = experts.clone();
    case!(
        cases,
        "mix",
        "weights",
        weights.clone(),
        uniform(r, &[2, 4], -1.0, 1.0),
        |g, w| {
            let es: Vec<Option<Var>> = ex.iter().map(|e| Some(g.constant(e.clone()))).collect();
            g.mix(w, &es)
        }
    );
    case!(
        cases,
        "mix",
        "expert",
        experts[1].clone(),
        uniform(r, &[2, 4], -1.0, 1.0),
        |g, x| {
            let w = g.constant(weights.clone());
            let es = vec![
                Some(g.constant(experts[0].clone())),
                Some(x),
                Some(g.constant(experts[2].clone())),
            ];
            g.mix(w, &es)
        }
    );
    cases
}

/// A model with a handful of parameters per layer, for end-to-end checks
/// and fast training tests.
pub fn mini_config() -> RunConfig {
    RunConfig {
        model: ModelSpec {
            input_shape: [3, 8, 8],
            stem_blocks: 1,
            expert_point: 1,
            deep_blocks: 1,
            channels: vec![3, 4],
            num_classes: 4,
            ..ModelSpec::default()
        },
        benchmark: BenchmarkSpec {
            image_size: [3, 8, 8],
            train_count: 64,
            test_count: 32,
            ..BenchmarkSpec::default()
        },
        sgem: SgemConfig {
            n: 3,
            k: 2,
            ..SgemConfig::default()
        },
        epochs: 1,
        batch_size: 16,
        ..RunConfig::default()
    }
}
