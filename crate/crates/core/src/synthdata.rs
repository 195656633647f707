//! Corrupted clusterable datasets.
//!
//! `K` unit-norm centers belong to `K̄` classes whose scalar values sit on a grid
//! with spacing `δ`. Each center owns `n_i` crops drawn inside the spherical cap
//! `‖x − c‖ ≤ ε`, and label corruption flips exactly `⌊ρ n_i⌋` labels per center
//! to a different class value.

use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::float::{ceil, floor};
use crate::numerics::{distance, dot, norm, Matrix, SeededRng};

/// Pairwise center distance floor, applied even when `ε = 0`.
pub const MIN_CENTER_SEPARATION: f64 = 0.1;

/// Rejection rounds allowed while placing centers.
pub const MAX_REJECTION_ROUNDS: usize = 10_000;

const UNIT_TOL: f64 = 1e-12;
// ⌊ρ n⌋ guard against products like 0.29 * 100 = 28.999999999999996
const FLOOR_SLACK: f64 = 1e-9;

/// Parameters of [`generate_dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetParams {
    /// Number of centers `K`.
    pub centers: usize,
    /// Number of classes `K̄`.
    pub classes: usize,
    pub dim: usize,
    /// Total crops `n`.
    pub n: usize,
    pub epsilon: f64,
    pub delta: f64,
    pub c_lower: f64,
    pub c_upper: f64,
}

impl Default for DatasetParams {
    fn default() -> Self {
        Self {
            centers: 4,
            classes: 2,
            dim: 16,
            n: 200,
            epsilon: 0.0,
            delta: 1.8,
            c_lower: 0.5,
            c_upper: 2.0,
        }
    }
}

impl DatasetParams {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.centers < self.classes {
            return Err(invalid!(
                "need K >= K̄ >= 2, got K = {}, K̄ = {}",
                self.centers,
                self.classes
            ));
        }
        if self.dim == 0 {
            return Err(invalid!("dimension must be positive"));
        }
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(invalid!("epsilon must be >= 0, got {}", self.epsilon));
        }
        if !(self.delta > 0.0) {
            return Err(invalid!("delta must be positive, got {}", self.delta));
        }
        let max_delta = 2.0 / (self.classes - 1) as f64;
        if self.delta > max_delta * (1.0 + 1e-12) {
            return Err(invalid!(
                "delta {} too large: {} class values cannot fit in [-1, 1] (max {max_delta})",
                self.delta,
                self.classes
            ));
        }
        if !(self.c_lower <= 1.0 && self.c_upper >= 1.0 && self.c_lower > 0.0) {
            return Err(invalid!(
                "need 0 < c_l <= 1 <= c_u, got c_l = {}, c_u = {}",
                self.c_lower,
                self.c_upper
            ));
        }
        self.count_bounds().map(|_| ())
    }

    /// Inclusive per-center count range `[⌈c_l n/K⌉, ⌊c_u n/K⌋]`.
    pub fn count_bounds(&self) -> Result<(usize, usize)> {
        let share = self.n as f64 / self.centers as f64;
        let lo = ceil(self.c_lower * share - FLOOR_SLACK).max(1.0) as usize;
        let hi = floor(self.c_upper * share + FLOOR_SLACK) as usize;
        if lo > hi || lo * self.centers > self.n || hi * self.centers < self.n {
            return Err(invalid!(
                "infeasible per-center counts: range [{lo}, {hi}] cannot sum to n = {} over {} centers",
                self.n,
                self.centers
            ));
        }
        Ok((lo, hi))
    }
}

/// Centers and their class assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterSet {
    /// `K × d`, unit-norm rows.
    pub centers: Matrix,
    /// Class values `γ_1..γ_K̄`, ascending.
    pub class_values: Vec<f64>,
    /// Class index (0-based) of each center.
    pub class_index: Vec<usize>,
}

impl CenterSet {
    pub fn len(&self) -> usize {
        self.centers.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `γ` of center `c`.
    pub fn value_of(&self, c: usize) -> f64 {
        self.class_values[self.class_index[c]]
    }

    pub fn min_separation(&self) -> f64 {
        let k = self.len();
        let mut best = f64::INFINITY;
        for i in 0..k {
            for j in 0..i {
                best = best.min(distance(self.centers.row(i), self.centers.row(j)));
            }
        }
        best
    }
}

/// Crops, their centers and (possibly corrupted) labels.
#[derive(Debug, Clone, PartialEq)]
pub struct CropDataset {
    /// `n × d`, unit-norm rows.
    pub crops: Matrix,
    pub center_of: Vec<usize>,
    pub y_star: Vec<f64>,
    pub y: Vec<f64>,
    pub counts: Vec<usize>,
    pub class_values: Vec<f64>,
    pub epsilon: f64,
    pub rho: f64,
}

impl CropDataset {
    pub fn len(&self) -> usize {
        self.crops.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.crops.cols()
    }

    pub fn num_centers(&self) -> usize {
        self.counts.len()
    }

    /// Crop indices grouped by center.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = alloc::vec![Vec::new(); self.num_centers()];
        for (i, &c) in self.center_of.iter().enumerate() {
            out[c].push(i);
        }
        out
    }

    /// Indices whose label differs from the true label.
    pub fn corrupted(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.y[i] != self.y_star[i]).collect()
    }

    /// Checks every structural invariant against the centers it was drawn from.
    pub fn check_invariants(&self, centers: &CenterSet) -> Result<()> {
        let n = self.len();
        if self.center_of.len() != n || self.y.len() != n || self.y_star.len() != n {
            return Err(invalid!("per-crop vectors disagree with crop count {n}"));
        }
        if self.counts.len() != centers.len() || self.counts.iter().sum::<usize>() != n {
            return Err(invalid!("per-center counts do not sum to n"));
        }
        let mut seen = alloc::vec![0usize; centers.len()];
        let mut wrong = alloc::vec![0usize; centers.len()];
        for i in 0..n {
            let c = self.center_of[i];
            if c >= centers.len() {
                return Err(invalid!("crop {i} points at missing center {c}"));
            }
            seen[c] += 1;
            let x = self.crops.row(i);
            if (norm(x) - 1.0).abs() > UNIT_TOL {
                return Err(invalid!("crop {i} is not unit norm"));
            }
            if distance(x, centers.centers.row(c)) > self.epsilon + UNIT_TOL {
                return Err(invalid!("crop {i} lies outside the epsilon cap"));
            }
            if self.y_star[i] != centers.value_of(c) {
                return Err(invalid!("crop {i} has a wrong true label"));
            }
            if !self.class_values.contains(&self.y[i]) {
                return Err(invalid!("crop {i} label {} is not a class value", self.y[i]));
            }
            if self.y[i] != self.y_star[i] {
                wrong[c] += 1;
            }
        }
        if seen != self.counts {
            return Err(invalid!("center membership disagrees with counts"));
        }
        for (c, (&w, &count)) in wrong.iter().zip(&self.counts).enumerate() {
            if w > corruption_count(self.rho, count) {
                return Err(invalid!("center {c} has {w} corrupted labels, above the rho budget"));
            }
        }
        Ok(())
    }
}

/// `⌊ρ n_i⌋`.
pub fn corruption_count(rho: f64, count: usize) -> usize {
    floor(rho * count as f64 + FLOOR_SLACK) as usize
}

/// Class grid `γ_t = (t − (K̄−1)/2)·δ`, equally spaced and centered on zero.
pub fn class_grid(classes: usize, delta: f64) -> Vec<f64> {
    let mid = (classes as f64 - 1.0) / 2.0;
    (0..classes).map(|t| (t as f64 - mid) * delta).collect()
}

fn random_unit(dim: usize, rng: &mut SeededRng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let n = norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Draws a unit vector within distance `ε` of the unit vector `center`.
///
/// A Gaussian tangent direction is scaled to a uniform radius in `[0, ε]`, added
/// to the center, and the sum is projected back to the sphere.
pub fn sample_crop(center: &[f64], epsilon: f64, rng: &mut SeededRng) -> Result<Vec<f64>> {
    if epsilon == 0.0 {
        return Ok(center.to_vec());
    }
    for _ in 0..1000 {
        let mut t: Vec<f64> = (0..center.len()).map(|_| rng.normal()).collect();
        let along = dot(&t, center);
        for (ti, ci) in t.iter_mut().zip(center) {
            *ti -= along * ci;
        }
        let tn = norm(&t);
        if tn < 1e-12 {
            // one-dimensional sphere: no tangent space
            if center.len() == 1 {
                return Ok(center.to_vec());
            }
            continue;
        }
        let radius = epsilon * rng.uniform();
        let mut x: Vec<f64> = center
            .iter()
            .zip(&t)
            .map(|(c, ti)| c + radius * ti / tn)
            .collect();
        let xn = norm(&x);
        for v in &mut x {
            *v /= xn;
        }
        if distance(&x, center) <= epsilon {
            return Ok(x);
        }
    }
    Err(Error::GenerationFailure("could not place a crop inside the epsilon cap".into()))
}

/// Generates an uncorrupted (`ρ = 0`) dataset.
pub fn generate_dataset(params: &DatasetParams, rng: &mut SeededRng) -> Result<(CenterSet, CropDataset)> {
    params.validate()?;
    let k = params.centers;
    let d = params.dim;
    let min_sep = (2.0 * params.epsilon).max(MIN_CENTER_SEPARATION);

    let mut center_rng = rng.substream("centers");
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut rounds = 0;
    while rows.len() < k {
        let cand = random_unit(d, &mut center_rng);
        if rows.iter().all(|r| distance(r, &cand) >= min_sep) {
            rows.push(cand);
        } else {
            rounds += 1;
            if rounds >= MAX_REJECTION_ROUNDS {
                return Err(Error::GenerationFailure(alloc::format!(
                    "could not separate {k} centers by {min_sep} in dimension {d}"
                )));
            }
        }
    }
    let class_values = class_grid(params.classes, params.delta);
    let class_index: Vec<usize> = (0..k).map(|c| c % params.classes).collect();
    let centers = CenterSet {
        centers: Matrix::from_rows(&rows)?,
        class_values: class_values.clone(),
        class_index,
    };

    let counts = draw_counts(params, &mut rng.substream("counts"))?;

    let mut crop_rng = rng.substream("crops");
    let mut crops = Vec::with_capacity(params.n * d);
    let mut center_of = Vec::with_capacity(params.n);
    let mut y_star = Vec::with_capacity(params.n);
    for (c, &count) in counts.iter().enumerate() {
        for _ in 0..count {
            crops.extend(sample_crop(&rows[c], params.epsilon, &mut crop_rng)?);
            center_of.push(c);
            y_star.push(centers.value_of(c));
        }
    }
    let data = CropDataset {
        crops: Matrix::from_vec(params.n, d, crops)?,
        center_of,
        y: y_star.clone(),
        y_star,
        counts,
        class_values,
        epsilon: params.epsilon,
        rho: 0.0,
    };
    data.check_invariants(&centers)?;
    Ok((centers, data))
}

fn draw_counts(params: &DatasetParams, rng: &mut SeededRng) -> Result<Vec<usize>> {
    let (lo, hi) = params.count_bounds()?;
    let mut counts: Vec<usize> = (0..params.centers).map(|_| rng.between(lo, hi)).collect();
    let mut total: usize = counts.iter().sum();
    while total > params.n {
        let c = rng.below(params.centers);
        if counts[c] > lo {
            counts[c] -= 1;
            total -= 1;
        }
    }
    while total < params.n {
        let c = rng.below(params.centers);
        if counts[c] < hi {
            counts[c] += 1;
            total += 1;
        }
    }
    Ok(counts)
}

/// Flips exactly `⌊ρ n_i⌋` labels per center to a uniformly chosen wrong class.
pub fn corrupt_labels(data: &CropDataset, rho: f64, rng: &mut SeededRng) -> Result<CropDataset> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(invalid!("rho must lie in [0, 1], got {rho}"));
    }
    if data.y != data.y_star {
        return Err(invalid!("corrupt_labels expects an uncorrupted dataset"));
    }
    let mut out = data.clone();
    out.rho = rho;
    for members in data.members() {
        let m = corruption_count(rho, members.len());
        if m == 0 {
            continue;
        }
        let chosen = rand::seq::index::sample(rng, members.len(), m);
        for local in chosen.iter() {
            let i = members[local];
            let wrong: Vec<f64> = data
                .class_values
                .iter()
                .copied()
                .filter(|g| *g != data.y_star[i])
                .collect();
            out.y[i] = wrong[rng.below(wrong.len())];
        }
    }
    Ok(out)
}

/// Query/positive crop indices; each pair shares a center.
#[derive(Debug, Clone, PartialEq)]
pub struct PositivePairBatch {
    pub queries: Vec<usize>,
    pub positives: Vec<usize>,
}

impl PositivePairBatch {
    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }
}

/// Samples `s` positive pairs: a uniformly chosen query crop and a distinct crop
/// of the same center.
pub fn make_positive_pairs(data: &CropDataset, s: usize, rng: &mut SeededRng) -> Result<PositivePairBatch> {
    if data.is_empty() {
        return Err(Error::PairingFailure("empty dataset".into()));
    }
    let members = data.members();
    let mut queries = Vec::with_capacity(s);
    let mut positives = Vec::with_capacity(s);
    for _ in 0..s {
        let q = rng.below(data.len());
        let group = &members[data.center_of[q]];
        let p = if group.len() == 1 {
            if data.epsilon > 0.0 {
                return Err(Error::PairingFailure(alloc::format!(
                    "center {} has a single crop and epsilon > 0",
                    data.center_of[q]
                )));
            }
            q
        } else {
            let mut pick = group[rng.below(group.len() - 1)];
            if pick == q {
                pick = group[group.len() - 1];
            }
            pick
        };
        queries.push(q);
        positives.push(p);
    }
    Ok(PositivePairBatch { queries, positives })
}
