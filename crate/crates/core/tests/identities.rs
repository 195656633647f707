//! Algebraic identities of the refinery, mixup, schedules, EMA, queue and
//! residual split, checked on random inputs.

use proptest::prelude::*;
use sane_core::contrastive::{KeyQueue, MlpEncoder, MomentumPair};
use sane_core::numerics::{softmax_temp, ProbVector, SeededRng, SIMPLEX_TOL};
use sane_core::refinery::{
    confidence_weights, mixup_with, mu_schedule, refine_label, refine_label_regression,
};
use sane_core::shallow_net::Activation;
use sane_core::theory::{residual_split, support_projector};

fn prob(len: usize) -> impl Strategy<Value = ProbVector> {
    prop::collection::vec(-6.0f64..6.0, len).prop_map(|s| softmax_temp(&s, 1.0).unwrap())
}

fn labelled_batch() -> impl Strategy<Value = (usize, ProbVector, ProbVector, ProbVector)> {
    (2usize..24).prop_flat_map(|len| (Just(len), 0..len, prob(len), prob(len))).prop_map(|(len, hot, p, q)| {
        (len, ProbVector::one_hot(len, hot).unwrap(), p, q)
    })
}

fn assert_simplex(v: &ProbVector) {
    let sum: f64 = v.iter().sum();
    assert!((sum - 1.0).abs() <= SIMPLEX_TOL, "sum {sum}");
    assert!(v.iter().all(|x| *x >= 0.0));
}

proptest! {
    #[test]
    fn refined_label_stays_on_simplex((_, y, p, q) in labelled_batch(), mu in 0.0f64..50.0) {
        let (alpha, beta) = confidence_weights(&p, &q, mu).unwrap();
        prop_assert!(alpha >= 0.0 && beta >= 0.0 && alpha + beta < 1.0);
        let refined = refine_label(&y, &p, &q, alpha, beta).unwrap();
        assert_simplex(&refined.label);
    }

    #[test]
    fn zero_weights_return_the_label((_, y, p, q) in labelled_batch()) {
        let refined = refine_label(&y, &p, &q, 0.0, 0.0).unwrap();
        prop_assert_eq!(refined.label, y);
        let (alpha, beta) = confidence_weights(&p, &q, 0.0).unwrap();
        prop_assert_eq!((alpha, beta), (0.0, 0.0));
    }

    #[test]
    fn refined_label_is_the_convex_combination((_, y, p, q) in labelled_batch(), a in 0.0f64..0.5, b in 0.0f64..0.49) {
        let refined = refine_label(&y, &p, &q, a, b).unwrap();
        for k in 0..y.len() {
            let want = (1.0 - a - b) * y[k] + a * p[k] + b * q[k];
            prop_assert!((refined.label[k] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn mixup_boundaries_and_convexity(
        s in 1usize..8,
        d in 1usize..6,
        theta in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let mut rng = SeededRng::new(seed, "mixup");
        let rows = |rng: &mut SeededRng| -> Vec<Vec<f64>> {
            (0..s).map(|_| (0..d).map(|_| rng.normal()).collect()).collect()
        };
        let queries = rows(&mut rng);
        let positives = rows(&mut rng);
        let width = s + 3;
        let labels: Vec<ProbVector> = (0..s)
            .map(|_| {
                let scores: Vec<f64> = (0..width).map(|_| rng.normal()).collect();
                softmax_temp(&scores, 1.0).unwrap()
            })
            .collect();
        let partners: Vec<usize> = (0..s).map(|_| rng.below(s)).collect();

        let keep = mixup_with(&queries, &positives, &labels, &partners, &vec![1.0; s]).unwrap();
        prop_assert_eq!(&keep.inputs, &queries);
        prop_assert_eq!(&keep.labels, &labels);

        let swap = mixup_with(&queries, &positives, &labels, &partners, &vec![0.0; s]).unwrap();
        for i in 0..s {
            prop_assert_eq!(&swap.inputs[i], &positives[partners[i]]);
            prop_assert_eq!(&swap.labels[i], &labels[partners[i]]);
        }

        let mixed = mixup_with(&queries, &positives, &labels, &partners, &vec![theta; s]).unwrap();
        for i in 0..s {
            assert_simplex(&mixed.labels[i]);
            let k = partners[i];
            for t in 0..width {
                let (a, b) = (labels[i][t], labels[k][t]);
                let v = mixed.labels[i][t];
                prop_assert!(v >= a.min(b) - 1e-15 && v <= a.max(b) + 1e-15);
            }
        }
    }

    #[test]
    fn mu_schedule_endpoints(total in 1usize..10_000, m1 in -2.0f64..2.0, m2 in -2.0f64..2.0) {
        prop_assert_eq!(mu_schedule(0, total, m1, m2).unwrap(), m1);
        prop_assert_eq!(mu_schedule(total, total, m1, m2).unwrap(), m2);
        prop_assert!(mu_schedule(total + 1, total, m1, m2).is_err());
    }

    #[test]
    fn mu_schedule_is_monotone(total in 2usize..500, m1 in 0.0f64..1.0, rise in 0.0f64..2.0) {
        let m2 = m1 + rise;
        let mut prev = m1;
        for t in 0..=total {
            let mu = mu_schedule(t, total, m1, m2).unwrap();
            prop_assert!(mu >= prev - 1e-12 && mu <= m2 + 1e-12);
            prev = mu;
        }
    }

    #[test]
    fn scalar_refinery_boundaries(y in -2.0f64..2.0, f in -2.0f64..2.0) {
        prop_assert_eq!(refine_label_regression(y, f, 0.0).unwrap(), y);
        prop_assert_eq!(refine_label_regression(y, f, 1.0).unwrap(), f);
    }

    #[test]
    fn ema_boundaries(seed in any::<u64>()) {
        let mut rng = SeededRng::new(seed, "ema");
        let online = MlpEncoder::new(&[3, 5, 2], Activation::Softplus, &mut rng).unwrap();
        let target = MlpEncoder::new(&[3, 5, 2], Activation::Softplus, &mut rng).unwrap();

        let frozen = MomentumPair::from_parts(online.clone(), target.clone(), 0.0).unwrap().ema_update();
        prop_assert_eq!(&frozen.target, &target);
        prop_assert_eq!(&frozen.online, &online);

        let copied = MomentumPair::from_parts(online.clone(), target, 1.0).unwrap().ema_update();
        prop_assert_eq!(&copied.target, &online);
    }

    #[test]
    fn residual_split_is_pythagorean(
        assignment in prop::collection::vec(0usize..5, 1..60),
        seed in any::<u64>(),
    ) {
        // relabel to contiguous cluster ids so every cluster is nonempty
        let mut ids: Vec<usize> = assignment.clone();
        ids.sort_unstable();
        ids.dedup();
        let center_of: Vec<usize> = assignment.iter().map(|c| ids.binary_search(c).unwrap()).collect();
        let (proj, zeta) = support_projector(&center_of).unwrap();
        prop_assert!(zeta >= ids.len() as f64 - 1e-12);
        let mut rng = SeededRng::new(seed, "residual");
        let r: Vec<f64> = (0..center_of.len()).map(|_| 3.0 * rng.normal()).collect();
        let (plus, minus) = residual_split(&r, &proj).unwrap();
        let total: f64 = r.iter().map(|v| v * v).sum();
        prop_assert!((plus * plus + minus * minus - total).abs() <= 1e-10 * total.max(1.0));
        // projecting twice changes nothing
        let once = proj.project(&r).unwrap();
        let twice = proj.project(&once).unwrap();
        for (a, b) in once.iter().zip(&twice) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    /// The queue behaves like a bounded FIFO reference model under arbitrary
    /// push sequences.
    #[test]
    fn queue_matches_fifo_model(
        capacity in 1usize..12,
        pushes in prop::collection::vec(0usize..6, 0..25),
    ) {
        let mut queue = KeyQueue::new(capacity);
        let mut model: std::collections::VecDeque<(f64, Option<usize>)> = Default::default();
        let mut next = 0.0;
        for size in pushes {
            let size = size.min(capacity);
            let keys: Vec<Vec<f64>> = (0..size).map(|j| vec![next + j as f64]).collect();
            let tags: Vec<Option<usize>> = (0..size).map(|j| (j % 2 == 0).then_some(j)).collect();
            for (k, t) in keys.iter().zip(&tags) {
                model.push_back((k[0], *t));
            }
            next += size as f64;
            while model.len() > capacity {
                model.pop_front();
            }
            queue = queue.refresh_tagged(keys, tags).unwrap();
            prop_assert_eq!(queue.len(), model.len());
            prop_assert!(queue.len() <= capacity);
            let got: Vec<(f64, Option<usize>)> = queue.keys().map(|k| k[0]).zip(queue.tags()).collect();
            let want: Vec<(f64, Option<usize>)> = model.iter().copied().collect();
            prop_assert_eq!(got, want);
        }
        prop_assert!(queue.refresh_keys(vec![vec![0.0]; capacity + 1]).is_err());
    }
}
