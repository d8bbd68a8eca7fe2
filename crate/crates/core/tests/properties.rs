use proptest::prelude::*;
use smdk::autograd::Tape;
use smdk::baselines::{balance_loss, dropblock, dropout, thor_consistency, BalanceStats};
use smdk::moe::{modulize, route, router_init, topk_select, DenseMlp, RoutingDecision};
use smdk::nn::Activation;
use smdk::rng::RngStream;
use smdk::schedule::KSchedule;
use smdk::tensor::Tensor;
use smdk::training::Checkpoint;

fn simplex(raw: Vec<f64>) -> Vec<f64> {
    let s: f64 = raw.iter().sum();
    raw.iter().map(|x| x / s).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tensor_rejects_mismatched_length(rows in 1usize..6, cols in 1usize..6, extra in 1usize..3) {
        prop_assert!(Tensor::<f64>::new(vec![rows, cols], vec![0.0; rows * cols + extra]).is_err());
        prop_assert!(Tensor::<f64>::new(vec![rows, cols], vec![0.0; rows * cols]).is_ok());
    }

    #[test]
    fn softmax_rows_are_distributions(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..10, scale in 0.1f64..5.0) {
        let x = Tensor::<f64>::randn(vec![rows, cols], &mut RngStream::new(seed, "sm"), scale).unwrap();
        let tape = Tape::new();
        let p = tape.constant(x).softmax(1).unwrap().value();
        for r in 0..rows {
            let row = p.row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v > 0.0 && v < 1.0 || cols == 1 && v == 1.0));
        }
    }

    #[test]
    fn topk_nests(v in prop::collection::vec(-5.0f64..5.0, 1..20)) {
        let n = v.len();
        for k in 1..n {
            let (a, _) = topk_select(&v, k).unwrap();
            let (b, _) = topk_select(&v, k + 1).unwrap();
            prop_assert!(a.iter().all(|e| b.contains(e)));
            prop_assert_eq!(&b[..k], &a[..]);
        }
    }

    #[test]
    fn topk_ties_prefer_lower_index(n in 2usize..12, k in 1usize..12) {
        let k = k.min(n);
        let (idx, _) = topk_select(&vec![0.5f64; n], k).unwrap();
        prop_assert_eq!(idx, (0..k).collect::<Vec<_>>());
    }

    #[test]
    fn routing_gates_are_unnormalized_softmax(seed in any::<u64>(), n in 2usize..9, k in 1usize..9) {
        let k = k.min(n);
        let d = 6;
        let router = router_init::<f64>(d, n, seed).unwrap();
        let x = Tensor::randn(vec![5, d], &mut RngStream::new(seed, "x"), 1.0).unwrap();
        let tape = Tape::new();
        let (dec, probs) = route(&tape.constant(x), &tape.constant(router.g), k).unwrap();
        let p = probs.value();
        for t in 0..dec.tokens() {
            let ids = dec.token(t);
            let mut sorted = ids.to_vec();
            sorted.sort_unstable();
            sorted.dedup();
            prop_assert_eq!(sorted.len(), k);
            for (j, &e) in ids.iter().enumerate() {
                let g = dec.gates[t * k + j];
                prop_assert_eq!(g, p.row(t)[e]);
                prop_assert!(g > 0.0 && g <= 1.0);
            }
        }
    }

    #[test]
    fn modulize_reconstructs(seed in any::<u64>(), d in 1usize..8, h in 1usize..5, n in 1usize..6) {
        let mut rng = RngStream::new(seed, "mlp");
        let mut mlp = DenseMlp::<f64>::init(d, h * n, &mut rng, 1.0).unwrap();
        mlp.b1 = Tensor::randn(vec![h * n], &mut rng, 1.0).unwrap();
        mlp.b2 = Tensor::randn(vec![d], &mut rng, 1.0).unwrap();
        let layer = modulize(&mlp, n).unwrap();
        prop_assert_eq!(layer.param_count(), 2 * d * h * n + h * n + d);
        prop_assert_eq!(&layer.to_dense().unwrap(), &mlp);
        let router = router_init::<f64>(d, n, seed).unwrap();
        let x = Tensor::randn(vec![4, d], &mut rng, 1.0).unwrap();
        let got = layer.forward(&x, &router, n, true, Activation::Gelu).unwrap();
        let want = mlp.forward(&x, Activation::Gelu).unwrap();
        prop_assert!(got.max_abs_diff(&want) < 1e-10);
    }

    #[test]
    fn k_schedule_is_monotone_and_complete(k_min in 1usize..5, span in 0usize..12, extra in 0usize..50) {
        let k_max = k_min + span;
        let steps = span + 1 + extra;
        let s = KSchedule::linear(k_min, k_max, steps).unwrap();
        let ks: Vec<usize> = (0..steps).map(|t| s.k_at(t).unwrap()).collect();
        prop_assert_eq!(ks[0], k_min);
        prop_assert_eq!(*ks.last().unwrap(), k_max);
        prop_assert!(ks.windows(2).all(|w| w[0] <= w[1]));
        for k in k_min..=k_max {
            prop_assert!(ks.contains(&k), "missing k={}", k);
        }
        prop_assert!(s.k_at(steps).is_err());
        let c = KSchedule::constant(k_min, steps).unwrap();
        prop_assert!((0..steps).all(|t| c.k_at(t).unwrap() == k_min));
    }

    #[test]
    fn balance_loss_at_least_one(raw in prop::collection::vec(0.01f64..1.0, 2..16)) {
        let p = simplex(raw);
        let n = p.len();
        let stats = BalanceStats { f: p.clone(), p };
        prop_assert!(balance_loss(&stats, n) >= 1.0 - 1e-12);
    }

    #[test]
    fn balance_stats_sum(seed in any::<u64>(), n in 2usize..9, k in 1usize..9) {
        let k = k.min(n);
        let x = Tensor::<f64>::randn(vec![7, n], &mut RngStream::new(seed, "p"), 1.0).unwrap();
        let tape = Tape::new();
        let probs = tape.constant(x).softmax(1).unwrap().value();
        let dec = RoutingDecision::from_probs(&probs, k).unwrap();
        let s = BalanceStats::from_routing(&dec, &probs);
        prop_assert!((s.f.iter().sum::<f64>() - k as f64).abs() < 1e-12);
        prop_assert!((s.p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!((s.f_hat().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn thor_consistency_symmetric_nonnegative(a in prop::collection::vec(0.0f64..1.0, 2..10), b in prop::collection::vec(0.0f64..1.0, 2..10)) {
        let n = a.len().min(b.len());
        let p = simplex(a[..n].iter().map(|x| x + 1e-3).collect());
        let q = simplex(b[..n].iter().map(|x| x + 1e-3).collect());
        let pq = thor_consistency(&p, &q);
        prop_assert!(pq >= 0.0);
        prop_assert_eq!(pq, thor_consistency(&q, &p));
        prop_assert_eq!(thor_consistency(&p, &p), 0.0);
    }

    #[test]
    fn dropout_variants_are_identity_in_eval(seed in any::<u64>(), p in 0.0f64..0.9) {
        let x = Tensor::<f64>::randn(vec![3, 9], &mut RngStream::new(seed, "x"), 1.0).unwrap();
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        let mut rng = RngStream::new(seed, "mask");
        prop_assert_eq!(&*dropout(&xv, p, &mut rng, false).unwrap().value(), &x);
        prop_assert_eq!(&*dropblock(&xv, p, 3, &mut rng, false).unwrap().value(), &x);
        prop_assert_eq!(rng.counter(), 0);
    }

    #[test]
    fn rng_streams_replay(seed in any::<u64>(), label in "[a-z/-]{1,12}") {
        let mut a = RngStream::new(seed, label.clone());
        let mut b = RngStream::new(seed, label.clone());
        let xs: Vec<u64> = (0..16).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..16).map(|_| b.next_u64()).collect();
        prop_assert_eq!(xs, ys);
        let mut c = RngStream::new(seed, format!("{label}!"));
        prop_assert_ne!(c.next_u64(), RngStream::new(seed, label).next_u64());
    }

    #[test]
    fn checkpoint_bytes_round_trip(seed in 0u64..1000) {
        let cfg = smdk::training::TrainConfig::new(smdk::nn::ModelConfig::tiny(smdk::nn::Method::SmoeDropout), 1);
        let model = smdk::nn::Model::<f32>::new(cfg.model.clone(), seed).unwrap();
        let ck = Checkpoint::from_model(&model, &cfg, 0);
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        prop_assert_eq!(back.to_model().unwrap().checksum(), model.checksum());
    }
}
