//! Momentum-contrast machinery: an MLP encoder with hand-written backprop, the
//! EMA target encoder, the FIFO key queue and the soft-label contrastive loss.
//!
//! Keys and queue entries are constants with respect to the online encoder;
//! gradients only flow through the query branch.

use alloc::collections::VecDeque;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::float::{exp, sqrt};
use crate::numerics::{dot, log_softmax, norm, Matrix, ProbVector, SeededRng};
use crate::shallow_net::Activation;

/// One affine layer, `z = W a + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `out × in`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    fn forward(&self, a: &[f64]) -> Vec<f64> {
        self.weight
            .row_iter()
            .zip(&self.bias)
            .map(|(w, b)| dot(w, a) + b)
            .collect()
    }
}

/// Multilayer perceptron: activation on hidden layers, identity on the output.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpEncoder {
    input_dim: usize,
    layers: Vec<DenseLayer>,
    activation: Activation,
}

/// Gradient with the same shape as an encoder's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrad {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl EncoderGrad {
    pub fn zeros_like(enc: &MlpEncoder) -> Self {
        Self {
            weights: enc
                .layers
                .iter()
                .map(|l| Matrix::zeros(l.weight.rows(), l.weight.cols()))
                .collect(),
            biases: enc.layers.iter().map(|l| alloc::vec![0.0; l.bias.len()]).collect(),
        }
    }

    /// `self += factor · other`.
    pub fn add_scaled(&mut self, other: &EncoderGrad, factor: f64) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            for (x, y) in a.as_mut_slice().iter_mut().zip(b.as_slice()) {
                *x += factor * y;
            }
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += factor * y;
            }
        }
    }

    /// Parameters in [`MlpEncoder::params`] order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b);
        }
        out
    }

    pub fn is_zero(&self) -> bool {
        self.flatten().iter().all(|v| *v == 0.0)
    }
}

struct Trace {
    /// Input to each layer (`inputs[0] = x`).
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of each hidden layer.
    pre: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl MlpEncoder {
    /// Encoder with layer widths `[d, h_1, …, out]`, weights `N(0, 1/fan_in)` and
    /// zero biases. A single width gives the identity encoder.
    pub fn new(widths: &[usize], activation: Activation, rng: &mut SeededRng) -> Result<Self> {
        if widths.is_empty() || widths.contains(&0) {
            return Err(invalid!("encoder widths must be nonempty and positive, got {widths:?}"));
        }
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let scale = 1.0 / sqrt(fan_in as f64);
                let weight = Matrix::from_vec(
                    fan_out,
                    fan_in,
                    (0..fan_in * fan_out).map(|_| scale * rng.normal()).collect(),
                )?;
                Ok(DenseLayer {
                    weight,
                    bias: alloc::vec![0.0; fan_out],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            input_dim: widths[0],
            layers,
            activation,
        })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            input_dim: dim,
            layers: Vec::new(),
            activation: Activation::Linear,
        }
    }

    pub fn from_layers(input_dim: usize, layers: Vec<DenseLayer>, activation: Activation) -> Result<Self> {
        let mut width = input_dim;
        for (i, l) in layers.iter().enumerate() {
            if l.weight.cols() != width || l.bias.len() != l.weight.rows() {
                return Err(invalid!("layer {i} does not chain: expected input width {width}"));
            }
            width = l.weight.rows();
        }
        if layers.iter().any(|l| l.bias.iter().any(|b| !b.is_finite())) {
            return Err(Error::NumericFailure("non-finite bias".into()));
        }
        Ok(Self {
            input_dim,
            layers,
            activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(self.input_dim, |l| l.weight.rows())
    }

    /// `[d, h_1, …, out]`.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = alloc::vec![self.input_dim];
        w.extend(self.layers.iter().map(|l| l.weight.rows()));
        w
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(invalid!(
                "encoder input has length {}, expected {}",
                x.len(),
                self.input_dim
            ));
        }
        Ok(())
    }

    /// Forward pass. The output is not normalized.
    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut a = x.to_vec();
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = layer.forward(&a);
            if i < last {
                for v in &mut z {
                    *v = self.activation.value(*v);
                }
            }
            a = z;
        }
        Ok(a)
    }

    fn trace(&self, x: &[f64]) -> Result<Trace> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len().saturating_sub(1));
        let mut a = x.to_vec();
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&a);
            inputs.push(a);
            if i < last {
                a = z.iter().map(|v| self.activation.value(*v)).collect();
                pre.push(z);
            } else {
                a = z;
            }
        }
        Ok(Trace {
            inputs,
            pre,
            output: a,
        })
    }

    fn backprop_trace(&self, trace: &Trace, upstream: &[f64], grad: &mut EncoderGrad, factor: f64) {
        let mut delta: Vec<f64> = upstream.iter().map(|u| u * factor).collect();
        for l in (0..self.layers.len()).rev() {
            let input = &trace.inputs[l];
            let gw = grad.weights[l].as_mut_slice();
            let cols = input.len();
            for (r, dv) in delta.iter().enumerate() {
                if *dv == 0.0 {
                    continue;
                }
                for (g, a) in gw[r * cols..(r + 1) * cols].iter_mut().zip(input) {
                    *g += dv * a;
                }
            }
            for (g, dv) in grad.biases[l].iter_mut().zip(&delta) {
                *g += dv;
            }
            if l > 0 {
                let w = &self.layers[l].weight;
                let mut prev = alloc::vec![0.0; w.cols()];
                for (r, dv) in delta.iter().enumerate() {
                    for (p, wv) in prev.iter_mut().zip(w.row(r)) {
                        *p += dv * wv;
                    }
                }
                for (p, z) in prev.iter_mut().zip(&trace.pre[l - 1]) {
                    *p *= self.activation.derivative(*z);
                }
                delta = prev;
            }
        }
    }

    /// Gradient of `⟨upstream, encode(x)⟩` with respect to every weight and bias.
    pub fn backprop(&self, x: &[f64], upstream: &[f64]) -> Result<EncoderGrad> {
        if upstream.len() != self.output_dim() {
            return Err(invalid!(
                "upstream gradient has length {}, encoder output is {}",
                upstream.len(),
                self.output_dim()
            ));
        }
        let trace = self.trace(x)?;
        let mut grad = EncoderGrad::zeros_like(self);
        self.backprop_trace(&trace, upstream, &mut grad, 1.0);
        Ok(grad)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.rows() * l.weight.cols() + l.bias.len()).sum()
    }

    /// All parameters, layer by layer: weights row-major, then biases.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Same architecture with parameters replaced (see [`MlpEncoder::params`]).
    pub fn with_params(&self, params: &[f64]) -> Result<Self> {
        if params.len() != self.param_count() {
            return Err(invalid!(
                "expected {} parameters, got {}",
                self.param_count(),
                params.len()
            ));
        }
        let mut offset = 0;
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let (r, c) = l.weight.shape();
            let weight = Matrix::from_vec(r, c, params[offset..offset + r * c].to_vec())?;
            offset += r * c;
            let bias = params[offset..offset + r].to_vec();
            offset += r;
            layers.push(DenseLayer { weight, bias });
        }
        Self::from_layers(self.input_dim, layers, self.activation)
    }

    /// Plain SGD step `θ ← θ − lr · grad`.
    pub fn apply_gradient(&self, grad: &EncoderGrad, lr: f64) -> Result<Self> {
        let mut params = self.params();
        for (p, g) in params.iter_mut().zip(grad.flatten()) {
            *p -= lr * g;
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NumericFailure("encoder parameters became non-finite".into()));
        }
        self.with_params(&params)
    }
}

/// Online encoder `w` and its EMA target `ξ`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumPair {
    pub online: MlpEncoder,
    pub target: MlpEncoder,
    momentum: f64,
}

impl MomentumPair {
    /// Starts with the target equal to the online encoder.
    pub fn new(online: MlpEncoder, momentum: f64) -> Result<Self> {
        let target = online.clone();
        Self::from_parts(online, target, momentum)
    }

    pub fn from_parts(online: MlpEncoder, target: MlpEncoder, momentum: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(invalid!("momentum must lie in [0, 1], got {momentum}"));
        }
        if online.widths() != target.widths() || online.activation() != target.activation() {
            return Err(invalid!("online and target encoders must share an architecture"));
        }
        Ok(Self {
            online,
            target,
            momentum,
        })
    }

    /// `ι`.
    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    /// `ξ ← (1 − ι) ξ + ι w`; the online encoder is untouched.
    pub fn ema_update(&self) -> MomentumPair {
        let iota = self.momentum;
        let w = self.online.params();
        let xi: Vec<f64> = self
            .target
            .params()
            .iter()
            .zip(&w)
            .map(|(t, o)| if iota == 1.0 { *o } else { (1.0 - iota) * t + iota * o })
            .collect();
        MomentumPair {
            online: self.online.clone(),
            target: self
                .target
                .with_params(&xi)
                .expect("EMA of finite parameters with matching shape"),
            momentum: iota,
        }
    }

    pub fn with_online(&self, online: MlpEncoder) -> Result<MomentumPair> {
        Self::from_parts(online, self.target.clone(), self.momentum)
    }
}

/// FIFO dictionary of key features, oldest first. Each key may carry a tag
/// (the center it was encoded from) for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyQueue {
    capacity: usize,
    keys: VecDeque<Vec<f64>>,
    tags: VecDeque<Option<usize>>,
}

impl KeyQueue {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            keys: VecDeque::with_capacity(capacity),
            tags: VecDeque::with_capacity(capacity),
        }
    }

    /// Queue pre-filled with `capacity` untagged unit Gaussian keys.
    pub fn random(capacity: usize, dim: usize, rng: &mut SeededRng) -> Self {
        let mut q = Self::new(capacity);
        for _ in 0..capacity {
            let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
            let n = norm(&v).max(1e-300);
            q.keys.push_back(v.into_iter().map(|x| x / n).collect());
            q.tags.push_back(None);
        }
        q
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.keys.iter()
    }

    pub fn tags(&self) -> impl Iterator<Item = Option<usize>> + '_ {
        self.tags.iter().copied()
    }

    /// Appends `new_keys` and evicts the oldest entries beyond capacity.
    pub fn refresh_keys(&self, new_keys: Vec<Vec<f64>>) -> Result<KeyQueue> {
        let tags = alloc::vec![None; new_keys.len()];
        self.refresh_tagged(new_keys, tags)
    }

    pub fn refresh_tagged(&self, new_keys: Vec<Vec<f64>>, tags: Vec<Option<usize>>) -> Result<KeyQueue> {
        if new_keys.len() > self.capacity {
            return Err(invalid!(
                "pushing {} keys into a queue of capacity {}",
                new_keys.len(),
                self.capacity
            ));
        }
        if tags.len() != new_keys.len() {
            return Err(invalid!("one tag per key required"));
        }
        let mut out = self.clone();
        for (k, t) in new_keys.into_iter().zip(tags) {
            out.keys.push_back(k);
            out.tags.push_back(t);
        }
        while out.keys.len() > out.capacity {
            out.keys.pop_front();
            out.tags.pop_front();
        }
        Ok(out)
    }
}

/// Ordered key set: the `s` batch positives first, then the queue.
#[derive(Debug, Clone, PartialEq)]
pub struct KeySet {
    keys: Vec<Vec<f64>>,
    tags: Vec<Option<usize>>,
    batch: usize,
}

impl KeySet {
    pub fn new(positives: Vec<Vec<f64>>, positive_tags: Vec<Option<usize>>, queue: &KeyQueue) -> Result<Self> {
        if positive_tags.len() != positives.len() {
            return Err(invalid!("one tag per positive key required"));
        }
        let batch = positives.len();
        let mut keys = positives;
        keys.extend(queue.keys().cloned());
        let mut tags = positive_tags;
        tags.extend(queue.tags());
        if let Some(dim) = keys.first().map(Vec::len) {
            if keys.iter().any(|k| k.len() != dim) {
                return Err(invalid!("keys have mixed dimensions"));
            }
        }
        Ok(Self { keys, tags, batch })
    }

    /// Key set made of the given keys only (no queue).
    pub fn from_keys(keys: Vec<Vec<f64>>, batch: usize) -> Result<Self> {
        if batch > keys.len() {
            return Err(invalid!("batch size {batch} exceeds {} keys", keys.len()));
        }
        let tags = alloc::vec![None; keys.len()];
        Ok(Self { keys, tags, batch })
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Number of batch positives `s`.
    pub fn batch_len(&self) -> usize {
        self.batch
    }

    pub fn key(&self, i: usize) -> &[f64] {
        &self.keys[i]
    }

    pub fn keys(&self) -> &[Vec<f64>] {
        &self.keys
    }

    pub fn tags(&self) -> &[Option<usize>] {
        &self.tags
    }

    fn normalized(&self) -> Result<Vec<Vec<f64>>> {
        self.keys
            .iter()
            .map(|k| {
                let n = norm(k);
                if n == 0.0 {
                    Err(Error::DegenerateInput("zero-norm key feature".into()))
                } else {
                    Ok(k.iter().map(|v| v / n).collect())
                }
            })
            .collect()
    }
}

/// Sign convention for the similarity inside the exponential.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SimilaritySign {
    /// `exp(+cos/τ)`: agreement with a key raises its probability.
    #[default]
    Agreement,
    /// `exp(−cos/τ)`, kept for inspection; it pushes positives apart.
    Negated,
}

impl SimilaritySign {
    fn factor(self) -> f64 {
        match self {
            SimilaritySign::Agreement => 1.0,
            SimilaritySign::Negated => -1.0,
        }
    }
}

/// Temperature-scaled cosine similarity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub temperature: f64,
    pub sign: SimilaritySign,
}

impl Similarity {
    pub fn new(temperature: f64) -> Result<Self> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(invalid!("temperature must be positive, got {temperature}"));
        }
        Ok(Self {
            temperature,
            sign: SimilaritySign::Agreement,
        })
    }

    pub fn with_sign(self, sign: SimilaritySign) -> Self {
        Self { sign, ..self }
    }

    /// Same sign, temperature multiplied by `factor`.
    pub fn sharpened(self, factor: f64) -> Result<Self> {
        Ok(Similarity::new(self.temperature * factor)?.with_sign(self.sign))
    }

    /// Entry `l` is `±cos(query, key_l)/τ`.
    pub fn logits(&self, query: &[f64], keys: &KeySet) -> Result<Vec<f64>> {
        let qn = norm(query);
        if qn == 0.0 {
            return Err(Error::DegenerateInput("zero-norm query feature".into()));
        }
        let scale = self.sign.factor() / self.temperature;
        keys.keys
            .iter()
            .map(|k| {
                if k.len() != query.len() {
                    return Err(invalid!("query and key dimensions differ"));
                }
                let kn = norm(k);
                if kn == 0.0 {
                    return Err(Error::DegenerateInput("zero-norm key feature".into()));
                }
                Ok(scale * (dot(query, k) / (qn * kn)).clamp(-1.0, 1.0))
            })
            .collect()
    }
}

/// `cos(query, key_l)/τ` for every key.
pub fn similarity_logits(query: &[f64], keys: &KeySet, temperature: f64) -> Result<Vec<f64>> {
    Similarity::new(temperature)?.logits(query, keys)
}

/// Cross-entropy `−Σ_k y_k log softmax(logits)_k` and its gradient `p − y`.
pub fn soft_ce_loss(logits: &[f64], label: &ProbVector) -> Result<(f64, Vec<f64>)> {
    if logits.len() != label.len() {
        return Err(invalid!(
            "{} logits for a label of length {}",
            logits.len(),
            label.len()
        ));
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::NumericFailure("non-finite logits".into()));
    }
    let logp = log_softmax(logits);
    let loss = -label
        .iter()
        .zip(&logp)
        .filter(|(y, _)| **y > 0.0)
        .map(|(y, lp)| y * lp)
        .sum::<f64>();
    let grad = logp.iter().zip(label.iter()).map(|(lp, y)| exp(*lp) - y).collect();
    Ok((loss, grad))
}

/// Mean loss over a batch and (optionally) its encoder gradient.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub loss: f64,
    pub grad: Option<EncoderGrad>,
}

/// `−(1/s) Σ_i Σ_k y_ik log softmax_k(±cos(f(x_i), b̄_k)/τ)` over the online
/// encoder, with `labels[i]` a distribution over `keys`.
pub fn contrastive_loss(
    online: &MlpEncoder,
    queries: &[Vec<f64>],
    keys: &KeySet,
    labels: &[ProbVector],
    similarity: Similarity,
    with_grad: bool,
) -> Result<BatchLoss> {
    if queries.len() != labels.len() {
        return Err(invalid!("{} queries but {} labels", queries.len(), labels.len()));
    }
    if queries.is_empty() {
        return Err(invalid!("empty query batch"));
    }
    let unit_keys = keys.normalized()?;
    let s = queries.len() as f64;
    let scale = similarity.sign.factor() / similarity.temperature;
    let mut total = 0.0;
    let mut grad = with_grad.then(|| EncoderGrad::zeros_like(online));
    for (x, label) in queries.iter().zip(labels) {
        let trace = online.trace(x)?;
        let q = &trace.output;
        let qn = norm(q);
        if qn == 0.0 {
            return Err(Error::DegenerateInput("zero-norm query feature".into()));
        }
        let qhat: Vec<f64> = q.iter().map(|v| v / qn).collect();
        let cosines: Vec<f64> = unit_keys
            .iter()
            .map(|k| {
                if k.len() != q.len() {
                    Err(invalid!("query and key dimensions differ"))
                } else {
                    Ok(dot(&qhat, k).clamp(-1.0, 1.0))
                }
            })
            .collect::<Result<_>>()?;
        let logits: Vec<f64> = cosines.iter().map(|c| scale * c).collect();
        let (loss, dlogits) = soft_ce_loss(&logits, label)?;
        total += loss;
        if let Some(g) = grad.as_mut() {
            // d cos / d q = (k̂ − cos · q̂) / ‖q‖
            let mut upstream = alloc::vec![0.0; q.len()];
            for ((dl, c), k) in dlogits.iter().zip(&cosines).zip(&unit_keys) {
                let w = dl * scale / qn;
                if w == 0.0 {
                    continue;
                }
                for ((u, kv), qv) in upstream.iter_mut().zip(k).zip(&qhat) {
                    *u += w * (kv - c * qv);
                }
            }
            online.backprop_trace(&trace, &upstream, g, 1.0 / s);
        }
    }
    Ok(BatchLoss {
        loss: total / s,
        grad,
    })
}
