use proptest::prelude::*;

use kolmogorov::data::{stream, RngStream};
use kolmogorov::kernel::{Mode, Tensor};
use kolmogorov::multilevel::{load_checkpoint, save_checkpoint, Architecture, CheckpointMeta, MultilevelConfig, MultilevelNet, NormKind};
use kolmogorov::problems::{bs_put, Interval, ProblemKind};
use kolmogorov::theory::{build_sq_relu_net, sq_formula};
use kolmogorov::training::{adamw_step, lr_schedule, AdamW, OptState, TrainConfig};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn substreams_are_reproducible(seed in any::<u64>(), id in any::<u64>(), index in any::<u64>()) {
        let mut a = RngStream::new(seed, id).substream(index);
        let mut b = RngStream::new(seed, id).substream(index);
        for _ in 0..16 {
            let u = a.uniform();
            prop_assert!((0.0..1.0).contains(&u));
            prop_assert_eq!(u.to_bits(), b.uniform().to_bits());
        }
    }

    #[test]
    fn schedule_is_monotone_and_bounded(s1 in 0u64..200_000, s2 in 0u64..200_000, decay in 0.05f64..0.95) {
        let mut t = TrainConfig::paper(ProblemKind::BlackScholes).training;
        t.decay = decay;
        let (lo, hi) = (s1.min(s2), s1.max(s2));
        let (a, b) = (lr_schedule(lo, &t), lr_schedule(hi, &t));
        prop_assert!(b <= a);
        prop_assert!(b >= t.min_lr && a <= t.init_lr);
    }

    #[test]
    fn sq_net_overestimates_within_bound(levels in 1usize..9, x in 0.0f64..=1.0) {
        let v = build_sq_relu_net(levels).eval(&[x])[0];
        prop_assert!((v - sq_formula(levels, x)).abs() <= 1e-12);
        prop_assert!(v - x * x >= -1e-15);
        prop_assert!(v - x * x <= 0.25f64.powi(levels as i32 + 1) + 1e-15);
    }

    #[test]
    fn put_respects_no_arbitrage_bounds(s in 0.1f64..0.6, k in 10.0f64..12.0, x in 9.0f64..10.0, t in 0.0f64..1.0) {
        let p = bs_put(s, k, x, t);
        prop_assert!(p >= (k - x).max(0.0) - 1e-12);
        prop_assert!(p <= k);
    }

    #[test]
    fn clamp_stays_inside(lo in -10.0f64..10.0, w in 0.0f64..5.0, v in -100.0f64..100.0) {
        let iv = Interval::new(lo, lo + w);
        prop_assert!(iv.contains(iv.clamp(v)));
    }

    #[test]
    fn pure_decay_shrinks_parameters(theta in prop::collection::vec(-5.0f64..5.0, 1..20), lr in 1e-4f64..1e-1) {
        let mut params = vec![Tensor::new(vec![theta.len()], theta.clone()).unwrap()];
        let grads = vec![Tensor::zeros(&[theta.len()])];
        let mut state = OptState::new(&params);
        let hp = AdamW { lr, weight_decay: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        adamw_step(&mut params, &grads, &mut state, &hp).unwrap();
        for (new, old) in params[0].data().iter().zip(&theta) {
            prop_assert!((new - old * (1.0 - lr * 0.01)).abs() <= 1e-15 * old.abs().max(1.0));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn eval_mode_is_row_equivariant(seed in 0u64..1000, norm in prop_oneof![Just(NormKind::Batch), Just(NormKind::Layer), Just(NormKind::None)]) {
        let net = MultilevelNet::build(MultilevelConfig::new(3, 3, 2, 1, norm), Architecture::Multilevel, seed).unwrap();
        let mut rng = RngStream::new(seed, stream::aux(200));
        let rows: Vec<Vec<f64>> = (0..6).map(|_| (0..3).map(|_| rng.normal()).collect()).collect();
        let x = Tensor::matrix(6, 3, rows.concat()).unwrap();
        let rev = Tensor::matrix(6, 3, rows.iter().rev().flatten().copied().collect()).unwrap();
        let a = net.predict(&x).unwrap();
        let mut b = net.predict(&rev).unwrap();
        b.reverse();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn checkpoints_round_trip(seed in 0u64..1000, levels in 1usize..4, q in 1usize..4) {
        let mut net = MultilevelNet::build(MultilevelConfig::new(4, levels, q, 1, NormKind::Batch), Architecture::Multilevel, seed).unwrap();
        let mut rng = RngStream::new(seed, stream::aux(201));
        let x = Tensor::matrix(8, 4, (0..32).map(|_| rng.normal()).collect()).unwrap();
        net.forward(&x, Mode::Train).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        let meta = CheckpointMeta { problem: "black_scholes".into(), step: 3, seed };
        save_checkpoint(&net, &meta, &path).unwrap();
        let (back, m) = load_checkpoint(&path).unwrap();
        prop_assert_eq!(m, meta);
        prop_assert_eq!(back.flat_params(), net.flat_params());
        prop_assert_eq!(back.predict(&x).unwrap(), net.predict(&x).unwrap());
    }
}
