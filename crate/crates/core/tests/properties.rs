use proptest::prelude::*;

use sdcl::autodiff::{channel_stats, Graph, Tensor};
use sdcl::bdcl::{adain_with_eps, causal_fuse, FusionConfig, NoisePolicy};
use sdcl::scm::{interventional_distribution, ScmSpec};
use sdcl::sgem::{cv_squared, gate, ConfounderSet, RoutingMode, StratumStats};
use sdcl::synth::{style_jitter, LabeledBatch};

fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).unwrap()
}

fn logits_strategy() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1usize..5, 1usize..9).prop_flat_map(|(b, n)| {
        (
            Just(b),
            Just(n),
            prop::collection::vec(-20.0f64..20.0, b * n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn gate_rows_are_sparse_distributions((b, n, data) in logits_strategy(), k_seed in 0usize..100, literal in any::<bool>()) {
        let k = 1 + k_seed % n;
        let mode = if literal { RoutingMode::Literal } else { RoutingMode::Default };
        let mut g = Graph::new();
        let l = g.constant(tensor(vec![b, n], data));
        let r = gate(&mut g, l, k, mode).unwrap();
        for d in &r.decisions {
            let total: f64 = d.weights.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            prop_assert_eq!(d.weights.iter().filter(|&&w| w > 0.0).count(), k);
            prop_assert_eq!(d.selected.len(), k);
            prop_assert!(d.selected.iter().all(|&i| d.weights[i] > 0.0));
        }
    }

    #[test]
    fn cv_squared_ignores_positive_scale(v in prop::collection::vec(0.01f64..10.0, 1..10), c in 0.01f64..100.0) {
        let scaled: Vec<f64> = v.iter().map(|x| x * c).collect();
        prop_assert!((cv_squared(&v) - cv_squared(&scaled)).abs() < 1e-9 * (1.0 + cv_squared(&v)));
        prop_assert!(cv_squared(&v) >= 0.0);
    }

    #[test]
    fn ema_follows_closed_form(m in -5.0f64..5.0, c in -5.0f64..5.0, t in 1usize..60, tau in 0.0f64..0.99) {
        let mut set = ConfounderSet::new(1, 1, tau);
        set.blend(0, StratumStats { mu: vec![m], sigma: vec![m.abs()] });
        for _ in 0..t {
            set.blend(0, StratumStats { mu: vec![c], sigma: vec![c.abs()] });
        }
        let st = set.stats[0].as_ref().unwrap();
        let want = c + tau.powi(t as i32) * (m - c);
        prop_assert!((st.mu[0] - want).abs() < 1e-9);
    }

    #[test]
    fn adain_hits_target_moments(
        data in prop::collection::vec(-3.0f64..3.0, 2 * 3 * 16),
        mu in prop::collection::vec(-2.0f64..2.0, 3),
        sigma in prop::collection::vec(0.1f64..3.0, 3),
        eps in prop::collection::vec(-1.5f64..1.5, 3),
    ) {
        let x = tensor(vec![2, 3, 4, 4], data);
        prop_assume!(channel_stats(&x).unwrap().iter().all(|s| s.sigma.iter().all(|&v| v > 1e-3)));
        let mut g = Graph::new();
        let f = g.constant(x);
        let y = adain_with_eps(&mut g, f, &mu, &sigma, &eps).unwrap();
        for s in channel_stats(g.value(y)).unwrap() {
            for c in 0..3 {
                prop_assert!((s.mu[c] - mu[c]).abs() < 1e-6);
                prop_assert!((s.sigma[c] - (eps[c] * sigma[c]).abs()).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn fusion_with_alpha_one_is_identity(data in prop::collection::vec(-3.0f64..3.0, 2 * 16)) {
        let x = tensor(vec![1, 2, 4, 4], data);
        let mut set = ConfounderSet::new(2, 2, 0.9);
        set.blend(1, StratumStats { mu: vec![1.0, -1.0], sigma: vec![2.0, 0.5] });
        let mut g = Graph::new();
        let f = g.constant(x.clone());
        let mut rng = sdcl::rng::stream(1, sdcl::rng::Stream::Noise);
        let y = causal_fuse(&mut g, f, &set, &FusionConfig { alpha: 1.0 }, &NoisePolicy::default(), &mut rng).unwrap();
        prop_assert_eq!(g.data(y), x.data());
    }

    #[test]
    fn intervention_ignores_p_x_given_s(seed in 0u64..10_000, shift in 0.01f64..0.5) {
        let scm = ScmSpec::random(seed, 2, 3, 2, 2);
        let base = interventional_distribution(&scm).unwrap();
        let mut other = scm.clone();
        for row in &mut other.p_x_given_s {
            let moved = row[0] * shift;
            row[0] -= moved;
            row[1] += moved;
        }
        let moved = interventional_distribution(&other).unwrap();
        prop_assert_eq!(base, moved);
    }

    #[test]
    fn jitter_stays_in_range_and_keeps_labels(
        data in prop::collection::vec(0.0f64..=1.0, 2 * 3 * 16),
        strength in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let batch = LabeledBatch { images: tensor(vec![2, 3, 4, 4], data), labels: vec![1, 3], style_ids: vec![0, 2] };
        let j = style_jitter(&batch, strength, seed);
        prop_assert!(j.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(j.labels, batch.labels);
        prop_assert_eq!(j.images.shape(), batch.images.shape());
    }
}
