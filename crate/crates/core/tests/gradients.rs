//! Analytic gradients against central differences on random small problems.

use proptest::prelude::*;
use sane_core::contrastive::{contrastive_loss, KeySet, MlpEncoder, Similarity, SimilaritySign};
use sane_core::numerics::{finite_diff_grad, relative_error, softmax_temp, Matrix, ProbVector, SeededRng};
use sane_core::refinery::{mixup_with, sane_loss};
use sane_core::shallow_net::{Activation, ShallowNet};

const H: f64 = 1e-6;

fn rows(n: usize, d: usize, rng: &mut SeededRng) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.normal()).collect()).collect()
}

fn activation() -> impl Strategy<Value = Activation> {
    prop::sample::select(Activation::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn shallow_net_quadratic_loss(
        seed in any::<u64>(),
        half_k in 1usize..=32,
        d in 1usize..=16,
        n in 1usize..=12,
        act in activation(),
    ) {
        let mut rng = SeededRng::new(seed, "shallow");
        let k = 2 * half_k;
        let net = ShallowNet::init_gaussian(k, d, act, &mut rng).unwrap();
        let xs = Matrix::from_rows(&rows(n, d, &mut rng)).unwrap();
        let labels: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let analytic = net.quadratic_grad(&xs, &labels).unwrap();
        let numeric = finite_diff_grad(
            |w| {
                let w = Matrix::from_vec(k, d, w.to_vec()).unwrap();
                ShallowNet::from_weights(w, act).unwrap().quadratic_eval(&xs, &labels).unwrap().loss
            },
            net.weights().as_slice(),
            H,
        )
        .unwrap();
        let err = relative_error(analytic.as_slice(), &numeric);
        prop_assert!(err <= 1e-5, "relative error {err:e}");
    }

    #[test]
    fn contrastive_loss_gradient(
        seed in any::<u64>(),
        d in 1usize..=16,
        hidden in 1usize..=12,
        feature in 2usize..=6,
        s in 1usize..=8,
        b in 0usize..=16,
        tau in 0.1f64..1.0,
        negated in any::<bool>(),
        soft in any::<bool>(),
    ) {
        let mut rng = SeededRng::new(seed, "contrastive");
        let enc = MlpEncoder::new(&[d, hidden, feature], Activation::Softplus, &mut rng).unwrap();
        let queries = rows(s, d, &mut rng);
        let keys = KeySet::from_keys(rows(s + b, feature, &mut rng), s).unwrap();
        let labels: Vec<ProbVector> = (0..s)
            .map(|i| {
                if soft {
                    let scores: Vec<f64> = (0..s + b).map(|_| rng.normal()).collect();
                    softmax_temp(&scores, 1.0).unwrap()
                } else {
                    ProbVector::one_hot(s + b, i).unwrap()
                }
            })
            .collect();
        let sign = if negated { SimilaritySign::Negated } else { SimilaritySign::Agreement };
        let sim = Similarity::new(tau).unwrap().with_sign(sign);
        let analytic = contrastive_loss(&enc, &queries, &keys, &labels, sim, true)
            .unwrap()
            .grad
            .unwrap()
            .flatten();
        let numeric = finite_diff_grad(
            |p| contrastive_loss(&enc.with_params(p).unwrap(), &queries, &keys, &labels, sim, false).unwrap().loss,
            &enc.params(),
            H,
        )
        .unwrap();
        let err = relative_error(&analytic, &numeric);
        prop_assert!(err <= 1e-4, "relative error {err:e}");
    }

    #[test]
    fn sane_loss_gradient(
        seed in any::<u64>(),
        d in 1usize..=16,
        hidden in 1usize..=12,
        s in 1usize..=8,
        b in 0usize..=16,
        lambda in 0.0f64..=1.0,
    ) {
        let mut rng = SeededRng::new(seed, "sane");
        let feature = 4;
        let enc = MlpEncoder::new(&[d, hidden, feature], Activation::Tanh, &mut rng).unwrap();
        let queries = rows(s, d, &mut rng);
        let positives = rows(s, d, &mut rng);
        let keys = KeySet::from_keys(rows(s + b, feature, &mut rng), s).unwrap();
        let labels: Vec<ProbVector> = (0..s)
            .map(|_| {
                let scores: Vec<f64> = (0..s + b).map(|_| rng.normal()).collect();
                softmax_temp(&scores, 1.0).unwrap()
            })
            .collect();
        let partners: Vec<usize> = (0..s).map(|_| rng.below(s)).collect();
        let thetas: Vec<f64> = (0..s).map(|_| rng.uniform()).collect();
        let vb = mixup_with(&queries, &positives, &labels, &partners, &thetas).unwrap();
        let sim = Similarity::new(0.3).unwrap();
        let analytic = sane_loss(&enc, &queries, &keys, &vb, lambda, sim, true)
            .unwrap()
            .grad
            .unwrap()
            .flatten();
        let numeric = finite_diff_grad(
            |p| sane_loss(&enc.with_params(p).unwrap(), &queries, &keys, &vb, lambda, sim, false).unwrap().total,
            &enc.params(),
            H,
        )
        .unwrap();
        let err = relative_error(&analytic, &numeric);
        prop_assert!(err <= 1e-4, "relative error {err:e}");
    }
}
