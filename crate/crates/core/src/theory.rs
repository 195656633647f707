//! Measurable counterparts of the recovery and generalization theory.
//!
//! Covers the network covariance `Σ(C)` and its smallest eigenvalue, the
//! cluster support subspace `S+` with its diffusedness `ζ`, Jacobian spectrum
//! diagnostics, the label-recovery experiment for the shallow network, and the
//! label-noise versus generalization-gap experiment for the contrastive model.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::contrastive::{contrastive_loss, KeyQueue, KeySet, MlpEncoder, MomentumPair, Similarity};
use crate::error::{invalid, Error, Result};
use crate::float::sqrt;
use crate::numerics::{
    dot, norm, singular_values, smallest_eigenvalue, spearman, Matrix, ProbVector, SeededRng,
};
use crate::refinery::refine_label_regression;
use crate::shallow_net::{Activation, ShallowNet};
use crate::synthdata::{
    corrupt_labels, corruption_count, generate_dataset, sample_crop, CenterSet, CropDataset, DatasetParams,
};

/// Fewest Monte Carlo draws accepted by [`network_covariance`].
pub const MIN_MC_SAMPLES: usize = 1000;

/// Loss above which a recovery run counts as diverged.
pub const DIVERGENCE_LOSS: f64 = 1e6;

/// Monte Carlo estimate of `Σ(C)` and its smallest eigenvalue.
#[derive(Debug, Clone, PartialEq)]
pub struct Covariance {
    pub sigma: Matrix,
    pub lambda: f64,
}

/// `Σ(C) = (CCᵀ) ⊙ E_u[φ'(Cu) φ'(Cu)ᵀ]` with `u ∼ N(0, I_d)`.
pub fn network_covariance(
    centers: &Matrix,
    activation: Activation,
    n_mc: usize,
    rng: &mut SeededRng,
) -> Result<Covariance> {
    if n_mc < MIN_MC_SAMPLES {
        return Err(invalid!("need at least {MIN_MC_SAMPLES} Monte Carlo samples, got {n_mc}"));
    }
    let (k, d) = centers.shape();
    if k == 0 {
        return Err(invalid!("no centers"));
    }
    for (i, c) in centers.row_iter().enumerate() {
        if (norm(c) - 1.0).abs() > 1e-8 {
            return Err(invalid!("center {i} is not unit norm"));
        }
    }
    let mut moments = vec![0.0; k * k];
    let mut u = vec![0.0; d];
    let mut slopes = vec![0.0; k];
    for _ in 0..n_mc {
        for v in &mut u {
            *v = rng.normal();
        }
        for (s, c) in slopes.iter_mut().zip(centers.row_iter()) {
            *s = activation.derivative(dot(c, &u));
        }
        for a in 0..k {
            for b in a..k {
                moments[a * k + b] += slopes[a] * slopes[b];
            }
        }
    }
    let gram = centers.gram();
    let mut sigma = Matrix::zeros(k, k);
    for a in 0..k {
        for b in a..k {
            let v = gram.get(a, b) * moments[a * k + b] / n_mc as f64;
            sigma.set(a, b, v);
            sigma.set(b, a, v);
        }
    }
    let lambda = smallest_eigenvalue(&sigma)?;
    Ok(Covariance { sigma, lambda })
}

/// Orthogonal projector onto vectors constant within each cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportProjector {
    center_of: Vec<usize>,
    counts: Vec<usize>,
}

impl SupportProjector {
    pub fn len(&self) -> usize {
        self.center_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.center_of.is_empty()
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// Replaces every entry by its cluster mean.
    pub fn project(&self, r: &[f64]) -> Result<Vec<f64>> {
        if r.len() != self.len() {
            return Err(invalid!("vector has length {}, projector acts on {}", r.len(), self.len()));
        }
        let mut sums = vec![0.0; self.counts.len()];
        for (v, &c) in r.iter().zip(&self.center_of) {
            sums[c] += v;
        }
        for (s, &n) in sums.iter_mut().zip(&self.counts) {
            *s /= n as f64;
        }
        Ok(self.center_of.iter().map(|&c| sums[c]).collect())
    }

    /// `r − P_{S+} r`.
    pub fn complement(&self, r: &[f64]) -> Result<Vec<f64>> {
        let p = self.project(r)?;
        Ok(r.iter().zip(&p).map(|(a, b)| a - b).collect())
    }
}

/// Builds the `S+` projector and the diffusedness `ζ = n / min_ℓ n_ℓ`.
pub fn support_projector(center_of: &[usize]) -> Result<(SupportProjector, f64)> {
    if center_of.is_empty() {
        return Err(invalid!("empty assignment"));
    }
    let clusters = center_of.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; clusters];
    for &c in center_of {
        counts[c] += 1;
    }
    if let Some(empty) = counts.iter().position(|&n| n == 0) {
        return Err(invalid!("cluster {empty} has no members"));
    }
    let smallest = *counts.iter().min().expect("nonempty");
    let zeta = center_of.len() as f64 / smallest as f64;
    Ok((
        SupportProjector {
            center_of: center_of.to_vec(),
            counts,
        },
        zeta,
    ))
}

/// `(‖P_{S+} r‖, ‖P_{S−} r‖)`.
pub fn residual_split(r: &[f64], projector: &SupportProjector) -> Result<(f64, f64)> {
    let plus = projector.project(r)?;
    let minus: Vec<f64> = r.iter().zip(&plus).map(|(a, b)| a - b).collect();
    Ok((norm(&plus), norm(&minus)))
}

/// Top singular values of a Jacobian and the gap after the `K`-th.
#[derive(Debug, Clone, PartialEq)]
pub struct BimodalityReport {
    /// `σ_1 ≥ … ≥ σ_{K+1}`.
    pub top: Vec<f64>,
    /// `σ_{K+1} / σ_K`.
    pub ratio: f64,
    /// `σ_{K+1} / σ_1`.
    pub relative_tail: f64,
}

pub fn jacobian_bimodality(jacobian: &Matrix, k: usize) -> Result<BimodalityReport> {
    if jacobian.rows() < k + 1 || jacobian.cols() < k + 1 {
        return Err(invalid!(
            "a {} x {} Jacobian has fewer than K + 1 = {} singular values",
            jacobian.rows(),
            jacobian.cols(),
            k + 1
        ));
    }
    bimodality_from_spectrum(&singular_values(jacobian)?, k)
}

/// [`jacobian_bimodality`] for an already computed descending spectrum.
pub fn bimodality_from_spectrum(spectrum: &[f64], k: usize) -> Result<BimodalityReport> {
    if k == 0 {
        return Err(invalid!("K must be positive"));
    }
    if spectrum.len() < k + 1 {
        return Err(invalid!("need at least K + 1 = {} singular values", k + 1));
    }
    let top = spectrum[..=k].to_vec();
    let ratio = if top[k - 1] > 0.0 { top[k] / top[k - 1] } else { 0.0 };
    let relative_tail = if top[0] > 0.0 { top[k] / top[0] } else { 0.0 };
    Ok(BimodalityReport {
        top,
        ratio,
        relative_tail,
    })
}

/// Index of the class value nearest to `value`; ties go to the lower index.
pub fn round_to_class(value: f64, class_values: &[f64]) -> usize {
    let mut best = 0;
    let mut best_gap = f64::INFINITY;
    for (i, g) in class_values.iter().enumerate() {
        let gap = (value - g).abs();
        if gap < best_gap {
            best = i;
            best_gap = gap;
        }
    }
    best
}

/// Uniform distribution over the keys sharing the query's class.
pub fn true_soft_label(query_class: usize, key_classes: &[Option<usize>]) -> Result<ProbVector> {
    let matches = key_classes.iter().filter(|c| **c == Some(query_class)).count();
    if matches == 0 {
        return Err(Error::DegenerateInput(alloc::format!(
            "no key shares class {query_class}"
        )));
    }
    let w = 1.0 / matches as f64;
    ProbVector::new(
        key_classes
            .iter()
            .map(|c| if *c == Some(query_class) { w } else { 0.0 })
            .collect(),
    )
}

/// Sequence of refinery weights `α_t`.
#[derive(Debug, Clone, PartialEq)]
pub enum AlphaSchedule {
    Constant(f64),
    /// `α_t = min(max, t / ramp_len)`.
    Ramp { max: f64, ramp_len: usize },
    /// Listed values; the last one repeats past the end.
    Explicit(Vec<f64>),
}

impl Default for AlphaSchedule {
    fn default() -> Self {
        AlphaSchedule::Ramp {
            max: 0.95,
            ramp_len: 500,
        }
    }
}

impl AlphaSchedule {
    pub fn at(&self, t: usize) -> f64 {
        match self {
            AlphaSchedule::Constant(a) => *a,
            AlphaSchedule::Ramp { max, ramp_len } => {
                if *ramp_len == 0 {
                    *max
                } else {
                    max.min(t as f64 / *ramp_len as f64)
                }
            }
            AlphaSchedule::Explicit(values) => *values.get(t).or(values.last()).unwrap_or(&0.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |a: f64| (0.0..=1.0).contains(&a);
        let valid = match self {
            AlphaSchedule::Constant(a) => ok(*a),
            AlphaSchedule::Ramp { max, .. } => ok(*max),
            AlphaSchedule::Explicit(values) => !values.is_empty() && values.iter().all(|a| ok(*a)),
        };
        if valid {
            Ok(())
        } else {
            Err(invalid!("alpha schedule values must lie in [0, 1]"))
        }
    }
}

/// Everything a recovery run depends on.
#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryConfig {
    pub data: DatasetParams,
    pub rho: f64,
    pub hidden: usize,
    pub activation: Activation,
    pub eta: f64,
    pub iterations: usize,
    pub alpha: AlphaSchedule,
    /// Fresh crops per center drawn after training to test generalization.
    pub fresh_per_center: usize,
    pub seed: u64,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        Self {
            data: DatasetParams::default(),
            rho: 0.05,
            hidden: 1024,
            activation: Activation::Softplus,
            eta: 0.05,
            iterations: 3000,
            alpha: AlphaSchedule::default(),
            fresh_per_center: 25,
            seed: 0,
        }
    }
}

impl RecoveryConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(invalid!("rho must lie in [0, 1], got {}", self.rho));
        }
        if self.hidden < 2 || self.hidden % 2 != 0 || self.hidden > crate::shallow_net::MAX_HIDDEN {
            return Err(invalid!("hidden width must be even and in [2, {}]", crate::shallow_net::MAX_HIDDEN));
        }
        if !(self.eta > 0.0) {
            return Err(invalid!("step size must be positive"));
        }
        self.alpha.validate()
    }
}

/// Metrics at one iteration, measured before the gradient step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecoveryRow {
    pub iter: usize,
    pub loss: f64,
    /// `‖ŷ − y*‖/√n`.
    pub label_err: f64,
    /// `‖f(W, X) − y*‖/√n`.
    pub pred_err: f64,
    pub frac_label_correct: f64,
    pub frac_pred_correct: f64,
    pub resid_splus: f64,
    pub resid_sminus: f64,
    pub alpha: f64,
    /// `‖f(W, X̃) − y*‖/√n` on the positive crops feeding the refinery.
    pub positive_pred_err: f64,
    /// `‖y − y*‖/√n`.
    pub noisy_label_err: f64,
}

/// End-of-run summary.
#[derive(Debug, Clone, PartialEq)]
pub struct RecoverySummary {
    pub frac_label_correct: f64,
    pub frac_pred_correct: f64,
    pub fresh_frac_correct: f64,
    /// Share of corrupted samples whose prediction rounds to the corrupted label.
    pub corrupted_fit: Option<f64>,
    pub pred_err: f64,
    pub zeta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub rows: Vec<RecoveryRow>,
    pub summary: RecoverySummary,
    /// The trained network.
    pub net: ShallowNet,
}

fn fraction_correct(values: &[f64], truth: &[f64], classes: &[f64]) -> f64 {
    let hits = values
        .iter()
        .zip(truth)
        .filter(|(v, t)| round_to_class(**v, classes) == round_to_class(**t, classes))
        .count();
    hits as f64 / values.len() as f64
}

fn scaled_distance(a: &[f64], b: &[f64]) -> f64 {
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    sqrt(s / a.len() as f64)
}

/// Positive partner of every crop: another crop of the same center.
///
/// Members of each center are shuffled and each is paired with the next one
/// cyclically, so the map is a permutation within every cluster (a crop is its
/// own partner only in a single-member cluster).
pub fn positive_partners(data: &CropDataset, rng: &mut SeededRng) -> Vec<usize> {
    let mut partner: Vec<usize> = (0..data.len()).collect();
    for mut members in data.members() {
        for i in (1..members.len()).rev() {
            members.swap(i, rng.below(i + 1));
        }
        for j in 0..members.len() {
            partner[members[j]] = members[(j + 1) % members.len()];
        }
    }
    partner
}

/// Dataset, centers and positive partner indices exactly as a recovery run sees them.
pub fn recovery_data(config: &RecoveryConfig) -> Result<(CenterSet, CropDataset, Vec<usize>)> {
    let root = SeededRng::new(config.seed, "recovery");
    let (centers, clean) = generate_dataset(&config.data, &mut root.substream("data"))?;
    let data = corrupt_labels(&clean, config.rho, &mut root.substream("corrupt"))?;
    let partner = positive_partners(&data, &mut root.substream("positives"));
    Ok((centers, data, partner))
}

/// Gradient descent on `½‖ŷ_t − f(W, X)‖²` with refined labels
/// `ŷ_t = (1 − α_t) y + α_t f(W_t, X̃)`.
///
/// Rows are recorded for `t = 0..=T`; the last row describes the trained network.
pub fn run_recovery(config: &RecoveryConfig) -> Result<RunRecord> {
    config.validate()?;
    let (centers, data, partner) = recovery_data(config)?;
    let root = SeededRng::new(config.seed, "recovery");
    let mut net = ShallowNet::init_gaussian(
        config.hidden,
        data.dim(),
        config.activation,
        &mut root.substream("net"),
    )?;
    let (projector, zeta) = support_projector(&data.center_of)?;
    let classes = &data.class_values;
    let xs = &data.crops;
    let noisy_label_err = scaled_distance(&data.y, &data.y_star);

    let mut rows = Vec::with_capacity(config.iterations + 1);
    let mut last_preds = Vec::new();
    for t in 0..=config.iterations {
        let alpha = config.alpha.at(t);
        let (preds, slopes) = net.forward_with_slopes(xs)?;
        // positives are other training crops, so their predictions are a permutation
        let pos_preds: Vec<f64> = partner.iter().map(|&p| preds[p]).collect();
        let refined = data
            .y
            .iter()
            .zip(&pos_preds)
            .map(|(y, p)| refine_label_regression(*y, *p, alpha))
            .collect::<Result<Vec<f64>>>()?;
        let residual: Vec<f64> = preds.iter().zip(&refined).map(|(f, y)| f - y).collect();
        let loss = 0.5 * dot(&residual, &residual);
        if !loss.is_finite() || loss > DIVERGENCE_LOSS {
            return Err(Error::Divergence { iteration: t, loss });
        }
        let (resid_splus, resid_sminus) = residual_split(&residual, &projector)?;
        rows.push(RecoveryRow {
            iter: t,
            loss,
            label_err: scaled_distance(&refined, &data.y_star),
            pred_err: scaled_distance(&preds, &data.y_star),
            frac_label_correct: fraction_correct(&refined, &data.y_star, classes),
            frac_pred_correct: fraction_correct(&preds, &data.y_star, classes),
            resid_splus,
            resid_sminus,
            alpha,
            positive_pred_err: scaled_distance(&pos_preds, &data.y_star),
            noisy_label_err,
        });
        if t < config.iterations {
            let grad = net.gradient_from_slopes(xs, &slopes, &residual)?;
            net = net.gd_step(&grad, config.eta)?;
        } else {
            last_preds = preds;
        }
    }

    let mut fresh_rng = root.substream("fresh");
    let mut fresh_hits = 0usize;
    let mut fresh_total = 0usize;
    for c in 0..centers.len() {
        for _ in 0..config.fresh_per_center {
            let x = sample_crop(centers.centers.row(c), data.epsilon, &mut fresh_rng)?;
            let f = net.forward(&x)?;
            fresh_total += 1;
            if round_to_class(f, classes) == centers.class_index[c] {
                fresh_hits += 1;
            }
        }
    }
    let corrupted = data.corrupted();
    let corrupted_fit = if corrupted.is_empty() {
        None
    } else {
        let hits = corrupted
            .iter()
            .filter(|&&i| round_to_class(last_preds[i], classes) == round_to_class(data.y[i], classes))
            .count();
        Some(hits as f64 / corrupted.len() as f64)
    };
    let last = rows.last().expect("at least one row");
    let summary = RecoverySummary {
        frac_label_correct: last.frac_label_correct,
        frac_pred_correct: last.frac_pred_correct,
        fresh_frac_correct: if fresh_total == 0 {
            1.0
        } else {
            fresh_hits as f64 / fresh_total as f64
        },
        corrupted_fit,
        pred_err: last.pred_err,
        zeta,
    };
    Ok(RunRecord { rows, summary, net })
}

/// Shallow-network Jacobian spectrum on a freshly generated dataset.
pub fn jacobian_spectrum(
    data: &DatasetParams,
    hidden: usize,
    activation: Activation,
    seed: u64,
) -> Result<BimodalityReport> {
    let root = SeededRng::new(seed, "spectrum");
    let (_, set) = generate_dataset(data, &mut root.substream("data"))?;
    let net = ShallowNet::init_gaussian(hidden, data.dim, activation, &mut root.substream("net"))?;
    jacobian_bimodality(&net.jacobian(&set.crops)?, data.centers)
}

/// Settings shared by every cell of the noise-versus-gap experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct GapConfig {
    pub data: DatasetParams,
    /// Hidden and feature widths of the encoder (input width comes from the data).
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub similarity: Similarity,
    pub batch: usize,
    pub queue: usize,
    pub momentum: f64,
    pub learning_rate: f64,
    pub steps: usize,
}

impl Default for GapConfig {
    fn default() -> Self {
        Self {
            data: DatasetParams {
                centers: 8,
                classes: 8,
                dim: 16,
                n: 160,
                epsilon: 0.3,
                delta: 2.0 / 7.0,
                c_lower: 0.5,
                c_upper: 2.0,
            },
            widths: vec![32, 8],
            activation: Activation::Softplus,
            similarity: Similarity::new(0.2).expect("positive temperature"),
            batch: 20,
            queue: 60,
            momentum: 0.1,
            learning_rate: 0.3,
            steps: 500,
        }
    }
}

impl GapConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        if self.batch < 2 || self.batch > self.data.n {
            return Err(invalid!("batch size must lie in [2, n]"));
        }
        if self.queue < self.batch {
            return Err(invalid!("queue must hold at least one batch"));
        }
        if self.widths.is_empty() {
            return Err(invalid!("encoder needs at least one layer"));
        }
        if !(0.0..=1.0).contains(&self.momentum) || !(self.learning_rate > 0.0) || self.steps == 0 {
            return Err(invalid!("momentum, learning rate or step count out of range"));
        }
        Ok(())
    }
}

/// Outcome of one `(ρ, seed)` cell.
#[derive(Debug, Clone, PartialEq)]
pub struct GapCell {
    pub rho: f64,
    pub seed: u64,
    /// Mean `‖y − y*‖` over training queries, with `y*` the clean one-hot label.
    pub label_err: f64,
    pub train_risk: f64,
    pub heldout_risk: f64,
    /// `|heldout_risk − train_risk|`, the quantity the generalization bound controls.
    pub gap: f64,
    pub converged: bool,
}

struct TrainBatch {
    queries: Vec<Vec<f64>>,
    positives: Vec<Vec<f64>>,
    tags: Vec<Option<usize>>,
    labels: Vec<ProbVector>,
}

fn key_set(target: &MlpEncoder, batch: &TrainBatch, queue: &KeyQueue) -> Result<(Vec<Vec<f64>>, KeySet)> {
    let feats: Vec<Vec<f64>> = batch.positives.iter().map(|x| target.encode(x)).collect::<Result<_>>()?;
    let keys = KeySet::new(feats.clone(), batch.tags.clone(), queue)?;
    Ok((feats, keys))
}

/// Trains the contrastive model on one-hot labels where `⌊ρ s⌋` fixed queries per
/// training batch point at another query's positive key, then measures the
/// training risk under those labels and the held-out risk on fresh crops under
/// [`true_soft_label`] targets.
pub fn run_gap_cell(config: &GapConfig, rho: f64, seed: u64) -> Result<GapCell> {
    config.validate()?;
    if !(0.0..=1.0).contains(&rho) {
        return Err(invalid!("rho must lie in [0, 1], got {rho}"));
    }
    let root = SeededRng::new(seed, "gap");
    let (centers, data) = generate_dataset(&config.data, &mut root.substream("data"))?;
    let class_of = |tag: Option<usize>| tag.map(|c| centers.class_index[c]);
    let s = config.batch;
    let members = data.members();

    // fixed training pairs in a fixed shuffled order, chunked into batches
    let mut rng = root.substream("pairs");
    let mut order: Vec<usize> = (0..data.len()).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.below(i + 1));
    }
    let swaps = corruption_count(rho, s);
    let mut batches = Vec::new();
    let mut label_err_sum = 0.0;
    let mut label_count = 0usize;
    for chunk in order.chunks_exact(s) {
        let mut queries = Vec::with_capacity(s);
        let mut positives = Vec::with_capacity(s);
        let mut tags = Vec::with_capacity(s);
        for &q in chunk {
            let group = &members[data.center_of[q]];
            let p = if group.len() == 1 {
                q
            } else {
                let mut pick = group[rng.below(group.len() - 1)];
                if pick == q {
                    pick = group[group.len() - 1];
                }
                pick
            };
            queries.push(data.crops.row(q).to_vec());
            positives.push(data.crops.row(p).to_vec());
            tags.push(Some(data.center_of[q]));
        }
        let mut targets: Vec<usize> = (0..s).collect();
        let mut slots: Vec<usize> = (0..s).collect();
        for i in 0..swaps {
            let j = i + rng.below(s - i);
            slots.swap(i, j);
        }
        for &i in &slots[..swaps] {
            let mut other = rng.below(s - 1);
            if other >= i {
                other += 1;
            }
            targets[i] = other;
        }
        let width = s + config.queue;
        let labels = targets
            .iter()
            .map(|&t| ProbVector::one_hot(width, t))
            .collect::<Result<Vec<_>>>()?;
        for (i, &t) in targets.iter().enumerate() {
            label_err_sum += if t == i { 0.0 } else { core::f64::consts::SQRT_2 };
            label_count += 1;
        }
        batches.push(TrainBatch {
            queries,
            positives,
            tags,
            labels,
        });
    }
    if batches.is_empty() {
        return Err(invalid!("dataset smaller than one batch"));
    }

    let mut widths = vec![data.dim()];
    widths.extend_from_slice(&config.widths);
    let online = MlpEncoder::new(&widths, config.activation, &mut root.substream("encoder"))?;
    let mut pair = MomentumPair::new(online, config.momentum)?;
    let mut queue = KeyQueue::random(config.queue, pair.online.output_dim(), &mut root.substream("queue"));
    let mut converged = true;
    for step in 0..config.steps {
        let batch = &batches[step % batches.len()];
        let (feats, keys) = key_set(&pair.target, batch, &queue)?;
        let out = contrastive_loss(&pair.online, &batch.queries, &keys, &batch.labels, config.similarity, true)?;
        if !out.loss.is_finite() {
            converged = false;
            break;
        }
        let grad = out.grad.expect("gradient requested");
        let online = pair.online.apply_gradient(&grad, config.learning_rate)?;
        pair = pair.with_online(online)?.ema_update();
        queue = queue.refresh_tagged(feats, batch.tags.clone())?;
    }

    // Risks are measured on the final model only: every key is re-encoded by
    // the final target, and the dictionary of training batch j holds the
    // positives of the batches that preceded it in the cycle (its training-time
    // queue, minus the staleness). Stale queue features would favour the fresh
    // in-batch positive over same-class queue keys and bias one-hot risk low.
    let per_queue = config.queue.div_ceil(s);
    let dictionary = |j: usize| -> Result<KeyQueue> {
        let mut q = queue.clone();
        for back in (1..=per_queue).rev() {
            let b = &batches[(j + batches.len() * per_queue - back) % batches.len()];
            let feats = b.positives.iter().map(|x| pair.target.encode(x)).collect::<Result<_>>()?;
            q = q.refresh_tagged(feats, b.tags.clone())?;
        }
        Ok(q)
    };

    let mut train_risk = 0.0;
    for (j, batch) in batches.iter().enumerate() {
        let (_, keys) = key_set(&pair.target, batch, &dictionary(j)?)?;
        train_risk += contrastive_loss(&pair.online, &batch.queries, &keys, &batch.labels, config.similarity, false)?.loss;
    }
    train_risk /= batches.len() as f64;

    // held-out dictionary: the one that follows the last training step
    let heldout_dictionary = dictionary(config.steps % batches.len())?;
    let mut fresh = root.substream("heldout");
    let mut heldout_risk = 0.0;
    for _ in 0..batches.len() {
        let mut batch = TrainBatch {
            queries: Vec::with_capacity(s),
            positives: Vec::with_capacity(s),
            tags: Vec::with_capacity(s),
            labels: Vec::new(),
        };
        for _ in 0..s {
            let c = fresh.below(centers.len());
            batch.queries.push(sample_crop(centers.centers.row(c), data.epsilon, &mut fresh)?);
            batch.positives.push(sample_crop(centers.centers.row(c), data.epsilon, &mut fresh)?);
            batch.tags.push(Some(c));
        }
        let (_, keys) = key_set(&pair.target, &batch, &heldout_dictionary)?;
        let key_classes: Vec<Option<usize>> = keys.tags().iter().map(|t| class_of(*t)).collect();
        batch.labels = batch
            .tags
            .iter()
            .map(|t| true_soft_label(class_of(*t).expect("tagged"), &key_classes))
            .collect::<Result<_>>()?;
        heldout_risk +=
            contrastive_loss(&pair.online, &batch.queries, &keys, &batch.labels, config.similarity, false)?.loss;
    }
    heldout_risk /= batches.len() as f64;
    converged &= train_risk.is_finite() && heldout_risk.is_finite();

    Ok(GapCell {
        rho,
        seed,
        label_err: label_err_sum / label_count as f64,
        train_risk,
        heldout_risk,
        gap: (heldout_risk - train_risk).abs(),
        converged,
    })
}

/// Per-`ρ` averages and the trend statistic.
#[derive(Debug, Clone, PartialEq)]
pub struct GapReport {
    pub rhos: Vec<f64>,
    /// Cells in `(ρ, seed)` order.
    pub cells: Vec<GapCell>,
    pub mean_label_err: Vec<f64>,
    pub mean_train_risk: Vec<f64>,
    pub mean_heldout_risk: Vec<f64>,
    pub mean_gap: Vec<f64>,
    /// Spearman correlation between mean gap and mean label error over the grid
    /// points that kept at least one converged cell.
    pub spearman: Option<f64>,
    pub warnings: Vec<String>,
}

impl GapReport {
    /// Merges cells (in any order) into a report over the sorted grid `rhos`.
    pub fn from_cells(rhos: &[f64], mut cells: Vec<GapCell>) -> Result<Self> {
        if rhos.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(invalid!("noise grid must be strictly ascending"));
        }
        cells.sort_by(|a, b| a.rho.total_cmp(&b.rho).then(a.seed.cmp(&b.seed)));
        let mut warnings = Vec::new();
        let mut report = GapReport {
            rhos: rhos.to_vec(),
            cells: Vec::new(),
            mean_label_err: Vec::new(),
            mean_train_risk: Vec::new(),
            mean_heldout_risk: Vec::new(),
            mean_gap: Vec::new(),
            spearman: None,
            warnings: Vec::new(),
        };
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for &rho in rhos {
            let kept: Vec<&GapCell> = cells.iter().filter(|c| c.rho == rho && c.converged).collect();
            for c in cells.iter().filter(|c| c.rho == rho && !c.converged) {
                warnings.push(alloc::format!(
                    "cell rho={} seed={} did not converge and is excluded",
                    c.rho,
                    c.seed
                ));
            }
            let mean = |f: fn(&GapCell) -> f64| {
                if kept.is_empty() {
                    f64::NAN
                } else {
                    kept.iter().map(|c| f(c)).sum::<f64>() / kept.len() as f64
                }
            };
            report.mean_label_err.push(mean(|c| c.label_err));
            report.mean_train_risk.push(mean(|c| c.train_risk));
            report.mean_heldout_risk.push(mean(|c| c.heldout_risk));
            report.mean_gap.push(mean(|c| c.gap));
            if !kept.is_empty() {
                xs.push(*report.mean_gap.last().expect("pushed"));
                ys.push(*report.mean_label_err.last().expect("pushed"));
            }
        }
        report.spearman = if xs.len() >= 2 { spearman(&xs, &ys).ok() } else { None };
        report.cells = cells;
        report.warnings = warnings;
        Ok(report)
    }

    /// Grid index with the smallest mean gap.
    pub fn argmin_gap(&self) -> Option<usize> {
        self.mean_gap
            .iter()
            .enumerate()
            .filter(|(_, g)| g.is_finite())
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
    }
}

/// Runs every `(ρ, seed)` cell in sequence, seeds `base_seed..base_seed + seeds`.
pub fn run_gap_experiment(config: &GapConfig, rhos: &[f64], seeds: usize, base_seed: u64) -> Result<GapReport> {
    if seeds < 3 {
        return Err(invalid!("need at least 3 seeds, got {seeds}"));
    }
    let mut cells = Vec::new();
    for &rho in rhos {
        for s in 0..seeds as u64 {
            cells.push(run_gap_cell(config, rho, base_seed + s)?);
        }
    }
    GapReport::from_cells(rhos, cells)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_to_class_examples() {
        let g = [-0.9, 0.9];
        assert_eq!(round_to_class(0.9, &g), 1);
        assert_eq!(round_to_class(0.0, &g), 0);
        assert_eq!(round_to_class(0.7, &g), 1);
        assert_eq!(round_to_class(-5.0, &g), 0);
    }

    #[test]
    fn soft_label_examples() {
        let one = true_soft_label(2, &[Some(0), Some(2), None]).unwrap();
        assert_eq!(one.as_slice(), &[0.0, 1.0, 0.0]);
        let many = true_soft_label(1, &[Some(1), Some(0), Some(1), Some(1)]).unwrap();
        assert!((many[0] - 1.0 / 3.0).abs() < 1e-15 && many[1] == 0.0);
        assert!(true_soft_label(5, &[Some(1), None]).is_err());
    }

    #[test]
    fn projector_examples() {
        let (p, zeta) = support_projector(&[0, 0, 0, 0]).unwrap();
        assert_eq!(zeta, 1.0);
        assert_eq!(p.project(&[1.0, 2.0, 3.0, 6.0]).unwrap(), vec![3.0; 4]);
        let (_, zeta) = support_projector(&[0, 1, 2, 0, 1, 2]).unwrap();
        assert_eq!(zeta, 3.0);
        assert!(support_projector(&[0, 2]).is_err());
        let (p, _) = support_projector(&[0, 1, 1, 0, 1]).unwrap();
        let r = [0.3, -1.0, 2.0, 0.7, 4.0];
        let once = p.project(&r).unwrap();
        let twice = p.project(&once).unwrap();
        for (a, b) in once.iter().zip(&twice) {
            assert!((a - b).abs() < 1e-12);
        }
        let (plus, minus) = residual_split(&r, &p).unwrap();
        assert!((plus * plus + minus * minus - dot(&r, &r)).abs() < 1e-10);
        assert!(residual_split(&[1.0], &p).is_err());
    }

    #[test]
    fn split_of_structured_vectors() {
        let (p, _) = support_projector(&[0, 0, 1, 1]).unwrap();
        let (_, minus) = residual_split(&[2.0, 2.0, -1.0, -1.0], &p).unwrap();
        assert!(minus < 1e-15);
        let (plus, _) = residual_split(&[1.0, -1.0, 3.0, -3.0], &p).unwrap();
        assert!(plus < 1e-15);
    }

    #[test]
    fn covariance_linear_orthonormal() {
        let c = Matrix::identity(3);
        let mut rng = SeededRng::new(4, "cov");
        let cov = network_covariance(&c, Activation::Linear, 1000, &mut rng).unwrap();
        assert_eq!(cov.sigma, Matrix::identity(3));
        assert!((cov.lambda - 1.0).abs() < 1e-12);
        assert!(network_covariance(&c, Activation::Linear, 999, &mut rng).is_err());
        assert!(network_covariance(&c.scale(2.0), Activation::Linear, 1000, &mut rng).is_err());
    }

    #[test]
    fn covariance_symmetric_psd() {
        let mut rng = SeededRng::new(5, "cov");
        let rows: Vec<Vec<f64>> = (0..4)
            .map(|_| {
                let v: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
                let n = norm(&v);
                v.into_iter().map(|x| x / n).collect()
            })
            .collect();
        let c = Matrix::from_rows(&rows).unwrap();
        let cov = network_covariance(&c, Activation::Softplus, 4000, &mut rng).unwrap();
        assert!(cov.sigma.asymmetry() <= 1e-10);
        assert!(cov.lambda > -1e-3);
    }

    #[test]
    fn bimodality_checks() {
        let mut rng = SeededRng::new(6, "j");
        let data: Vec<f64> = (0..6 * 8).map(|_| rng.normal()).collect();
        let j = Matrix::from_vec(6, 8, data).unwrap();
        let rep = jacobian_bimodality(&j, 2).unwrap();
        assert_eq!(rep.top.len(), 3);
        assert!(rep.ratio > 0.1);
        assert!(jacobian_bimodality(&j, 6).is_err());
    }

    #[test]
    fn alpha_schedules() {
        let ramp = AlphaSchedule::default();
        assert_eq!(ramp.at(0), 0.0);
        assert_eq!(ramp.at(250), 0.5);
        assert_eq!(ramp.at(10_000), 0.95);
        let list = AlphaSchedule::Explicit(vec![0.1, 0.2]);
        assert_eq!(list.at(5), 0.2);
        assert!(AlphaSchedule::Constant(1.2).validate().is_err());
        assert!(AlphaSchedule::Explicit(vec![]).validate().is_err());
    }

    #[test]
    fn noiseless_small_recovery() {
        let config = RecoveryConfig {
            rho: 0.0,
            hidden: 256,
            iterations: 300,
            alpha: AlphaSchedule::Constant(0.0),
            seed: 3,
            ..RecoveryConfig::default()
        };
        let run = run_recovery(&config).unwrap();
        assert_eq!(run.rows.len(), 301);
        assert_eq!(run.summary.frac_pred_correct, 1.0);
        assert!(run.summary.corrupted_fit.is_none());
        assert!(run.rows.last().unwrap().loss < run.rows[0].loss);
    }

    #[test]
    fn divergence_is_reported() {
        let config = RecoveryConfig {
            hidden: 64,
            eta: 50.0,
            iterations: 200,
            ..RecoveryConfig::default()
        };
        match run_recovery(&config) {
            Err(Error::Divergence { iteration, .. }) => assert!(iteration > 0),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn gap_report_merging() {
        let cell = |rho: f64, seed: u64, gap: f64, converged: bool| GapCell {
            rho,
            seed,
            label_err: rho,
            train_risk: 1.0,
            heldout_risk: 1.0 + gap,
            gap,
            converged,
        };
        let cells = vec![
            cell(0.2, 1, 0.5, true),
            cell(0.0, 0, 0.1, true),
            cell(0.1, 0, 0.3, true),
            cell(0.2, 0, 0.7, true),
            cell(0.1, 1, f64::NAN, false),
        ];
        let rep = GapReport::from_cells(&[0.0, 0.1, 0.2], cells).unwrap();
        assert_eq!(rep.mean_gap[2], 0.6);
        assert_eq!(rep.mean_gap[1], 0.3);
        assert_eq!(rep.warnings.len(), 1);
        assert_eq!(rep.spearman, Some(1.0));
        assert_eq!(rep.argmin_gap(), Some(0));
        assert_eq!(rep.cells[0].rho, 0.0);
        assert!(GapReport::from_cells(&[0.1, 0.0], vec![]).is_err());
    }
}
