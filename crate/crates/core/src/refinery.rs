//! Self-labeling refinery and momentum mixup.
//!
//! For query `i` the refinery compares the target feature of its positive view
//! against every key, producing `p` (all keys, sharpened by `τ'`) and `q` (the
//! positive's own key removed). The refined label is the convex combination
//! `(1 − α − β) y + α p + β q` with confidence weights derived from `μ`.
//! Momentum mixup then blends each query with another pair's positive view and
//! blends their refined labels with the same coefficient.

use alloc::vec::Vec;

use crate::contrastive::{
    contrastive_loss, EncoderGrad, KeyQueue, KeySet, MlpEncoder, MomentumPair, Similarity,
};
use crate::error::{invalid, Error, Result};
use crate::float::cos;
use crate::numerics::{sample_beta, softmax_temp, ProbVector, SeededRng};
use crate::synthdata::{make_positive_pairs, CropDataset};

/// Hyperparameters of the refinery, mixup and combined loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineryConfig {
    /// Sharpening `τ' ∈ (0, 1]`.
    pub tau_prime: f64,
    /// Confidence schedule start `m1`.
    pub m1: f64,
    /// Confidence schedule end `m2`.
    pub m2: f64,
    /// Mixup coefficient `θ ∼ Beta(κ, κ)`.
    pub kappa: f64,
    /// Weight of the mixup loss, `λ ∈ [0, 1]`.
    pub lambda: f64,
    /// Total iterations `T` of the confidence schedule.
    pub total_iters: usize,
}

impl Default for RefineryConfig {
    fn default() -> Self {
        Self {
            tau_prime: 0.8,
            m1: 0.0,
            m2: 1.0,
            kappa: 2.0,
            lambda: 0.5,
            total_iters: 1000,
        }
    }
}

impl RefineryConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_prime > 0.0 && self.tau_prime <= 1.0) {
            return Err(invalid!("tau' must lie in (0, 1], got {}", self.tau_prime));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(invalid!("lambda must lie in [0, 1], got {}", self.lambda));
        }
        if !(self.m1 <= self.m2) || self.m1 < 0.0 {
            return Err(invalid!("need 0 <= m1 <= m2, got m1 = {}, m2 = {}", self.m1, self.m2));
        }
        if !(self.kappa > 0.0) {
            return Err(invalid!("kappa must be positive, got {}", self.kappa));
        }
        if self.total_iters == 0 {
            return Err(invalid!("total iterations must be positive"));
        }
        Ok(())
    }
}

/// A refined soft label with the weights that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinedLabel {
    pub label: ProbVector,
    pub alpha: f64,
    pub beta: f64,
}

/// Instance-class estimates `(p, q)` for query `self_index`.
///
/// `p = softmax(±cos(positive, b̄_k) / (τ·τ'))` over all keys, which equals
/// raising `σ` to the power `1/τ'` and renormalizing. `q` is the same with the
/// positive's own key removed and `q_ii = 0`.
pub fn estimate_pq(
    positive_feature: &[f64],
    keys: &KeySet,
    similarity: Similarity,
    tau_prime: f64,
    self_index: usize,
) -> Result<(ProbVector, ProbVector)> {
    if !(tau_prime > 0.0 && tau_prime <= 1.0) {
        return Err(invalid!("tau' must lie in (0, 1], got {tau_prime}"));
    }
    if self_index >= keys.batch_len() {
        return Err(invalid!(
            "self index {self_index} is not a batch positive (batch has {})",
            keys.batch_len()
        ));
    }
    if keys.len() < 2 {
        return Err(Error::DegenerateInput("need at least two keys to estimate q".into()));
    }
    // the sign and τ are already inside the logits; sharpening divides by τ'
    let logits = similarity.logits(positive_feature, keys)?;
    let p = softmax_temp(&logits, tau_prime)?;
    let rest: Vec<f64> = logits
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != self_index)
        .map(|(_, l)| *l)
        .collect();
    let mut q = softmax_temp(&rest, tau_prime)?.into_vec();
    q.insert(self_index, 0.0);
    Ok((p, ProbVector::new(q)?))
}

/// `α = μ max p / z`, `β = μ max q / z` with `z = 1 + μ max p + μ max q`.
pub fn confidence_weights(p: &ProbVector, q: &ProbVector, mu: f64) -> Result<(f64, f64)> {
    if !(mu >= 0.0) || !mu.is_finite() {
        return Err(invalid!("confidence mu must be finite and >= 0, got {mu}"));
    }
    let mp = mu * p.max();
    let mq = mu * q.max();
    let z = 1.0 + mp + mq;
    Ok((mp / z, mq / z))
}

/// `ŷ = (1 − α − β) y + α p + β q`.
pub fn refine_label(
    onehot: &ProbVector,
    p: &ProbVector,
    q: &ProbVector,
    alpha: f64,
    beta: f64,
) -> Result<RefinedLabel> {
    if !(alpha >= 0.0 && beta >= 0.0) {
        return Err(invalid!("alpha and beta must be nonnegative"));
    }
    if !(alpha + beta < 1.0) {
        return Err(invalid!("alpha + beta must be < 1, got {}", alpha + beta));
    }
    if onehot.len() != p.len() || p.len() != q.len() {
        return Err(invalid!("label, p and q lengths differ"));
    }
    let keep = 1.0 - alpha - beta;
    let entries = onehot
        .iter()
        .zip(p.iter())
        .zip(q.iter())
        .map(|((y, pk), qk)| keep * y + alpha * pk + beta * qk)
        .collect();
    Ok(RefinedLabel {
        label: ProbVector::new(entries)?,
        alpha,
        beta,
    })
}

/// `μ_t = m2 − (m2 − m1)(cos(πt/T) + 1)/2`, rising from `m1` to `m2`.
pub fn mu_schedule(t: usize, total: usize, m1: f64, m2: f64) -> Result<f64> {
    if total == 0 {
        return Err(invalid!("schedule length T must be positive"));
    }
    if t > total {
        return Err(invalid!("iteration {t} beyond schedule length {total}"));
    }
    if t == total {
        return Ok(m2);
    }
    let c = cos(core::f64::consts::PI * t as f64 / total as f64);
    // anchored at m1 so t = 0 is exact; t = T is handled above
    Ok(m1 + (m2 - m1) * (1.0 - c) / 2.0)
}

/// Virtual queries and labels from momentum mixup.
#[derive(Debug, Clone, PartialEq)]
pub struct VirtualBatch {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<ProbVector>,
    /// Partner index `k` for each query.
    pub partners: Vec<usize>,
    /// Mixing coefficient `θ` for each query.
    pub thetas: Vec<f64>,
}

/// `x'_i = θ_i x_i + (1 − θ_i) x̃_k`, `ŷ'_i = θ_i ŷ_i + (1 − θ_i) ŷ_k` for given
/// partners and coefficients.
pub fn mixup_with(
    queries: &[Vec<f64>],
    positives: &[Vec<f64>],
    labels: &[ProbVector],
    partners: &[usize],
    thetas: &[f64],
) -> Result<VirtualBatch> {
    let s = queries.len();
    if positives.len() != s || labels.len() != s || partners.len() != s || thetas.len() != s {
        return Err(invalid!("mixup inputs must all have the batch length {s}"));
    }
    let mut inputs = Vec::with_capacity(s);
    let mut mixed = Vec::with_capacity(s);
    for i in 0..s {
        let k = partners[i];
        let theta = thetas[i];
        if k >= s {
            return Err(invalid!("partner index {k} out of range"));
        }
        if !(0.0..=1.0).contains(&theta) {
            return Err(invalid!("mixing coefficient {theta} outside [0, 1]"));
        }
        if queries[i].len() != positives[k].len() {
            return Err(invalid!("query and positive dimensions differ"));
        }
        inputs.push(
            queries[i]
                .iter()
                .zip(&positives[k])
                .map(|(x, xt)| theta * x + (1.0 - theta) * xt)
                .collect(),
        );
        mixed.push(ProbVector::mix(&labels[i], &labels[k], theta)?);
    }
    Ok(VirtualBatch {
        inputs,
        labels: mixed,
        partners: partners.to_vec(),
        thetas: thetas.to_vec(),
    })
}

/// Momentum mixup with partners drawn uniformly with replacement (all partner
/// indices first), then one `θ ∼ Beta(κ, κ)` per query.
pub fn momentum_mixup(
    queries: &[Vec<f64>],
    positives: &[Vec<f64>],
    labels: &[ProbVector],
    kappa: f64,
    rng: &mut SeededRng,
) -> Result<VirtualBatch> {
    if !(kappa > 0.0) {
        return Err(invalid!("kappa must be positive, got {kappa}"));
    }
    let s = queries.len();
    if s == 0 {
        return Err(invalid!("empty batch"));
    }
    let partners: Vec<usize> = (0..s).map(|_| rng.below(s)).collect();
    let thetas = (0..s)
        .map(|_| sample_beta(kappa, rng))
        .collect::<Result<Vec<_>>>()?;
    mixup_with(queries, positives, labels, &partners, &thetas)
}

/// Components of the combined loss.
#[derive(Debug, Clone)]
pub struct SaneLoss {
    pub total: f64,
    pub onehot: f64,
    pub mixup: f64,
    pub grad: Option<EncoderGrad>,
}

/// `(1 − λ) L(queries, one-hot) + λ L(virtual queries, mixed labels)`.
///
/// Query `i`'s one-hot label sits on key `i`. Gradients flow through the online
/// encoder only.
pub fn sane_loss(
    online: &MlpEncoder,
    queries: &[Vec<f64>],
    keys: &KeySet,
    virtual_batch: &VirtualBatch,
    lambda: f64,
    similarity: Similarity,
    with_grad: bool,
) -> Result<SaneLoss> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(invalid!("lambda must lie in [0, 1], got {lambda}"));
    }
    if queries.len() > keys.batch_len() {
        return Err(invalid!("more queries than batch positives in the key set"));
    }
    let onehot: Vec<ProbVector> = (0..queries.len())
        .map(|i| ProbVector::one_hot(keys.len(), i))
        .collect::<Result<_>>()?;
    let plain = contrastive_loss(online, queries, keys, &onehot, similarity, with_grad)?;
    let mixed = contrastive_loss(
        online,
        &virtual_batch.inputs,
        keys,
        &virtual_batch.labels,
        similarity,
        with_grad,
    )?;
    let grad = match (plain.grad, mixed.grad) {
        (Some(mut a), Some(b)) => {
            for w in &mut a.weights {
                for v in w.as_mut_slice() {
                    *v *= 1.0 - lambda;
                }
            }
            for bias in &mut a.biases {
                for v in bias {
                    *v *= 1.0 - lambda;
                }
            }
            a.add_scaled(&b, lambda);
            Some(a)
        }
        _ => None,
    };
    Ok(SaneLoss {
        total: (1.0 - lambda) * plain.loss + lambda * mixed.loss,
        onehot: plain.loss,
        mixup: mixed.loss,
        grad,
    })
}

/// Scalar refinery used by the regression analysis: `(1 − α) y + α·prediction`.
pub fn refine_label_regression(y: f64, prediction: f64, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(invalid!("alpha must lie in [0, 1], got {alpha}"));
    }
    Ok((1.0 - alpha) * y + alpha * prediction)
}

/// Settings for the full training loop.
#[derive(Debug, Clone, PartialEq)]
pub struct SaneConfig {
    pub similarity: Similarity,
    pub refinery: RefineryConfig,
    /// EMA rate `ι` of the target encoder.
    pub momentum: f64,
    pub learning_rate: f64,
    pub batch: usize,
    pub queue: usize,
}

impl SaneConfig {
    pub fn validate(&self) -> Result<()> {
        self.refinery.validate()?;
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(invalid!("momentum must lie in [0, 1], got {}", self.momentum));
        }
        if !(self.learning_rate > 0.0) {
            return Err(invalid!("learning rate must be positive"));
        }
        if self.batch < 2 {
            return Err(invalid!("batch size must be at least 2"));
        }
        if self.batch > self.queue {
            return Err(invalid!(
                "batch size {} exceeds queue capacity {}",
                self.batch,
                self.queue
            ));
        }
        Ok(())
    }
}

/// Encoders, dictionary and iteration counter.
#[derive(Debug, Clone, PartialEq)]
pub struct SaneState {
    pub pair: MomentumPair,
    pub queue: KeyQueue,
    pub iteration: usize,
}

impl SaneState {
    /// Online encoder with the given widths, target copied from it, and a queue
    /// of random unit keys.
    pub fn init(widths: &[usize], activation: crate::shallow_net::Activation, config: &SaneConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let online = MlpEncoder::new(widths, activation, &mut rng.substream("encoder"))?;
        let dim = online.output_dim();
        Ok(Self {
            pair: MomentumPair::new(online, config.momentum)?,
            queue: KeyQueue::random(config.queue, dim, &mut rng.substream("queue")),
            iteration: 0,
        })
    }
}

/// Metrics of one training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub iteration: usize,
    pub loss: f64,
    pub onehot_loss: f64,
    pub mixup_loss: f64,
    pub mu: f64,
    pub mean_alpha: f64,
    pub mean_beta: f64,
}

/// One training iteration: sample pairs, encode, refine labels, mix, update the
/// online encoder by SGD, update the target by EMA, then push the batch keys
/// into the queue.
pub fn sane_step(
    state: &SaneState,
    data: &CropDataset,
    config: &SaneConfig,
    rng: &mut SeededRng,
) -> Result<(SaneState, StepReport)> {
    let batch = make_positive_pairs(data, config.batch, rng)?;
    let queries: Vec<Vec<f64>> = batch.queries.iter().map(|&i| data.crops.row(i).to_vec()).collect();
    let positives: Vec<Vec<f64>> = batch.positives.iter().map(|&i| data.crops.row(i).to_vec()).collect();

    let target = &state.pair.target;
    let batch_keys: Vec<Vec<f64>> = positives.iter().map(|x| target.encode(x)).collect::<Result<_>>()?;
    let tags: Vec<Option<usize>> = batch.positives.iter().map(|&i| Some(data.center_of[i])).collect();
    let keys = KeySet::new(batch_keys.clone(), tags.clone(), &state.queue)?;

    let t = state.iteration.min(config.refinery.total_iters);
    let mu = mu_schedule(t, config.refinery.total_iters, config.refinery.m1, config.refinery.m2)?;
    let mut refined = Vec::with_capacity(queries.len());
    let (mut sum_alpha, mut sum_beta) = (0.0, 0.0);
    for (i, feature) in batch_keys.iter().enumerate() {
        let (p, q) = estimate_pq(feature, &keys, config.similarity, config.refinery.tau_prime, i)?;
        let (alpha, beta) = confidence_weights(&p, &q, mu)?;
        let label = refine_label(&ProbVector::one_hot(keys.len(), i)?, &p, &q, alpha, beta)?;
        sum_alpha += alpha;
        sum_beta += beta;
        refined.push(label.label);
    }

    let virtual_batch = momentum_mixup(&queries, &positives, &refined, config.refinery.kappa, rng)?;
    let loss = sane_loss(
        &state.pair.online,
        &queries,
        &keys,
        &virtual_batch,
        config.refinery.lambda,
        config.similarity,
        true,
    )?;
    if !loss.total.is_finite() {
        return Err(Error::Divergence {
            iteration: state.iteration,
            loss: loss.total,
        });
    }
    let grad = loss.grad.as_ref().expect("gradient requested");
    let online = state.pair.online.apply_gradient(grad, config.learning_rate)?;
    let pair = state.pair.with_online(online)?.ema_update();
    let queue = state.queue.refresh_tagged(batch_keys, tags)?;

    let s = queries.len() as f64;
    let report = StepReport {
        iteration: state.iteration,
        loss: loss.total,
        onehot_loss: loss.onehot,
        mixup_loss: loss.mixup,
        mu,
        mean_alpha: sum_alpha / s,
        mean_beta: sum_beta / s,
    };
    Ok((
        SaneState {
            pair,
            queue,
            iteration: state.iteration + 1,
        },
        report,
    ))
}
