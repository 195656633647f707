//! One-hidden-layer network `f(W, x) = vᵀφ(Wx)` with a fixed output layer.
//!
//! `v` has `k/2` entries equal to `+1/√k` followed by `k/2` entries equal to
//! `−1/√k`; only `W` is trained. Jacobian columns are ordered row-major over
//! (hidden unit, input coordinate), matching the layout of `W`.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{invalid, Result};
use crate::fastmath::{exp_nonpositive, ln_1p_unit};
use crate::float::{exp, sqrt, tanh};
use crate::numerics::{dot, Matrix, SeededRng};

/// Largest hidden width accepted at desk scale.
pub const MAX_HIDDEN: usize = 4096;

/// Scalar activation with its first two derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    Linear,
    Tanh,
    Sigmoid,
    #[default]
    Softplus,
}

impl Activation {
    pub const ALL: [Activation; 4] = [
        Activation::Linear,
        Activation::Tanh,
        Activation::Sigmoid,
        Activation::Softplus,
    ];

    pub fn value(self, z: f64) -> f64 {
        self.value_and_derivative(z).0
    }

    pub fn derivative(self, z: f64) -> f64 {
        self.value_and_derivative(z).1
    }

    /// `(φ(z), φ'(z))`, sharing the exponential where possible.
    #[inline]
    pub fn value_and_derivative(self, z: f64) -> (f64, f64) {
        match self {
            Activation::Linear => (z, 1.0),
            Activation::Tanh => {
                let t = tanh(z);
                (t, 1.0 - t * t)
            }
            Activation::Sigmoid => {
                let s = sigmoid(z);
                (s, s * (1.0 - s))
            }
            Activation::Softplus => {
                let e = exp_nonpositive(-z.abs());
                let sp = z.max(0.0) + ln_1p_unit(e);
                // arithmetic select: a branch on the sign of z mispredicts half the time
                let pos = f64::from(u8::from(z >= 0.0));
                let sig = (e + pos * (1.0 - e)) / (1.0 + e);
                (sp, sig)
            }
        }
    }

    pub fn second_derivative(self, z: f64) -> f64 {
        match self {
            Activation::Linear => 0.0,
            Activation::Tanh => {
                let t = tanh(z);
                -2.0 * t * (1.0 - t * t)
            }
            Activation::Sigmoid => {
                let s = sigmoid(z);
                s * (1.0 - s) * (1.0 - 2.0 * s)
            }
            Activation::Softplus => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
        }
    }

    /// Bound `Γ ≥ 1` on `|φ(0)|`, `|φ'|` and `|φ''|`.
    ///
    /// Each supported activation has `|φ(0)| ≤ ln 2`, `|φ'| ≤ 1` and
    /// `|φ''| ≤ 0.77`, so `Γ = 1` for all of them.
    pub fn gamma(self) -> f64 {
        1.0
    }

    /// Largest of `|φ(0)|`, `|φ'(z)|`, `|φ''(z)|` over a grid on `[−20, 20]`.
    pub fn sampled_bound(self) -> f64 {
        let mut worst = self.value(0.0).abs();
        for i in 0..=40_000 {
            let z = -20.0 + i as f64 * 1e-3;
            worst = worst
                .max(self.derivative(z).abs())
                .max(self.second_derivative(z).abs());
        }
        worst
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Linear => "linear",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
            Activation::Softplus => "softplus",
        }
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + exp(-z))
    } else {
        let e = exp(z);
        e / (1.0 + e)
    }
}

/// `phi ← φ(z)`, `z ← v ⊙ φ'(z)`; monomorphized per activation so the loop
/// body is branch-free.
#[inline(always)]
fn activation_pass(phi: &mut [f64], z: &mut [f64], v: &[f64], f: impl Fn(f64) -> (f64, f64)) {
    for ((p, s), v) in phi.iter_mut().zip(z.iter_mut()).zip(v) {
        let (value, slope) = f(*s);
        *p = value;
        *s = v * slope;
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Activation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| invalid!("unknown activation {s:?}"))
    }
}

/// The analysis network. Values are immutable; [`ShallowNet::gd_step`] returns
/// a new network.
#[derive(Debug, Clone, PartialEq)]
pub struct ShallowNet {
    weights: Matrix,
    output: Vec<f64>,
    activation: Activation,
}

/// Output weights `[+1/√k; k/2] ++ [−1/√k; k/2]`.
pub fn output_layer(k: usize) -> Result<Vec<f64>> {
    if k < 2 || k % 2 != 0 {
        return Err(invalid!("hidden width must be even and >= 2, got {k}"));
    }
    if k > MAX_HIDDEN {
        return Err(invalid!("hidden width {k} exceeds the cap of {MAX_HIDDEN}"));
    }
    let a = 1.0 / sqrt(k as f64);
    Ok((0..k).map(|j| if j < k / 2 { a } else { -a }).collect())
}

/// Loss, gradient and predictions from one pass over a batch.
#[derive(Debug, Clone)]
pub struct QuadraticEval {
    /// `½ Σ_i (f(W, x_i) − ŷ_i)²`.
    pub loss: f64,
    pub gradient: Matrix,
    pub predictions: Vec<f64>,
}

impl ShallowNet {
    /// Network with given hidden weights `W` (`k × d`).
    pub fn from_weights(weights: Matrix, activation: Activation) -> Result<Self> {
        let output = output_layer(weights.rows())?;
        Ok(Self {
            weights,
            output,
            activation,
        })
    }

    /// `W` with i.i.d. `N(0, 1)` entries.
    pub fn init_gaussian(k: usize, d: usize, activation: Activation, rng: &mut SeededRng) -> Result<Self> {
        output_layer(k)?;
        if d == 0 {
            return Err(invalid!("input dimension must be positive"));
        }
        let w = Matrix::from_vec(k, d, (0..k * d).map(|_| rng.normal()).collect())?;
        Self::from_weights(w, activation)
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn output_weights(&self) -> &[f64] {
        &self.output
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn hidden(&self) -> usize {
        self.weights.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(invalid!(
                "input has length {}, network expects {}",
                x.len(),
                self.input_dim()
            ));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        self.check_input(x)?;
        Ok(self
            .weights
            .row_iter()
            .zip(&self.output)
            .map(|(w, v)| v * self.activation.value(dot(w, x)))
            .sum())
    }

    pub fn forward_batch(&self, xs: &Matrix) -> Result<Vec<f64>> {
        xs.row_iter().map(|x| self.forward(x)).collect()
    }

    /// Loss `½‖f(W, X) − ŷ‖²` with its gradient `Σ_i r_i (v ⊙ φ'(Wx_i)) x_iᵀ`.
    pub fn quadratic_eval(&self, xs: &Matrix, labels: &[f64]) -> Result<QuadraticEval> {
        if labels.len() != xs.rows() {
            return Err(invalid!(
                "{} labels for {} samples",
                labels.len(),
                xs.rows()
            ));
        }
        if xs.cols() != self.input_dim() {
            return Err(invalid!(
                "samples have dimension {}, network expects {}",
                xs.cols(),
                self.input_dim()
            ));
        }
        let k = self.hidden();
        let d = self.input_dim();
        let mut grad = Matrix::zeros(k, d);
        let mut predictions = Vec::with_capacity(xs.rows());
        let mut slopes = alloc::vec![0.0; k];
        let mut loss = 0.0;
        for (x, y) in xs.row_iter().zip(labels) {
            let mut f = 0.0;
            for (j, (w, v)) in self.weights.row_iter().zip(&self.output).enumerate() {
                let (phi, dphi) = self.activation.value_and_derivative(dot(w, x));
                f += v * phi;
                slopes[j] = v * dphi;
            }
            let r = f - y;
            loss += 0.5 * r * r;
            predictions.push(f);
            let g = grad.as_mut_slice();
            for (j, s) in slopes.iter().enumerate() {
                let coef = r * s;
                for (gi, xi) in g[j * d..(j + 1) * d].iter_mut().zip(x) {
                    *gi += coef * xi;
                }
            }
        }
        Ok(QuadraticEval {
            loss,
            gradient: grad,
            predictions,
        })
    }

    /// `∇_W ½ Σ_i (f(W, x_i) − ŷ_i)²`.
    pub fn quadratic_grad(&self, xs: &Matrix, labels: &[f64]) -> Result<Matrix> {
        Ok(self.quadratic_eval(xs, labels)?.gradient)
    }

    /// Outputs on every row of `xs` with the slopes `v ⊙ φ'(Wx_i)` as an `n × k` matrix.
    pub fn forward_with_slopes(&self, xs: &Matrix) -> Result<(Vec<f64>, Matrix)> {
        if xs.cols() != self.input_dim() {
            return Err(invalid!(
                "samples have dimension {}, network expects {}",
                xs.cols(),
                self.input_dim()
            ));
        }
        let mut slopes = Matrix::zeros(xs.rows(), self.hidden());
        let mut outputs = Vec::with_capacity(xs.rows());
        let mut phi = alloc::vec![0.0; self.hidden()];
        for (i, x) in xs.row_iter().enumerate() {
            let row = slopes.row_mut(i);
            // three separate passes (pre-activation, activation, output sum):
            // the activation pass has no loop-carried dependency and vectorizes
            for (w, s) in self.weights.row_iter().zip(row.iter_mut()) {
                *s = dot(w, x);
            }
            match self.activation {
                Activation::Linear => activation_pass(&mut phi, row, &self.output, |z| (z, 1.0)),
                Activation::Tanh => activation_pass(&mut phi, row, &self.output, |z| Activation::Tanh.value_and_derivative(z)),
                Activation::Sigmoid => {
                    activation_pass(&mut phi, row, &self.output, |z| Activation::Sigmoid.value_and_derivative(z))
                }
                Activation::Softplus => {
                    activation_pass(&mut phi, row, &self.output, |z| Activation::Softplus.value_and_derivative(z))
                }
            }
            outputs.push(dot(&self.output, &phi));
        }
        Ok((outputs, slopes))
    }

    /// `Σ_i r_i s_i x_iᵀ` for slopes from [`ShallowNet::forward_with_slopes`].
    pub fn gradient_from_slopes(&self, xs: &Matrix, slopes: &Matrix, residuals: &[f64]) -> Result<Matrix> {
        if residuals.len() != xs.rows() || slopes.shape() != (xs.rows(), self.hidden()) {
            return Err(invalid!("slopes or residuals do not match the samples"));
        }
        let d = self.input_dim();
        let mut grad = Matrix::zeros(self.hidden(), d);
        let g = grad.as_mut_slice();
        for ((x, s), r) in xs.row_iter().zip(slopes.row_iter()).zip(residuals) {
            for (gj, sj) in g.chunks_exact_mut(d).zip(s) {
                let coef = r * sj;
                for (gi, xi) in gj.iter_mut().zip(x) {
                    *gi += coef * xi;
                }
            }
        }
        Ok(grad)
    }

    /// `W ← W − η·gradient`; `v` and the activation are carried over.
    pub fn gd_step(&self, gradient: &Matrix, eta: f64) -> Result<ShallowNet> {
        if !(eta > 0.0) {
            return Err(invalid!("step size must be positive, got {eta}"));
        }
        Ok(ShallowNet {
            weights: self.weights.sub_scaled(gradient, eta)?,
            output: self.output.clone(),
            activation: self.activation,
        })
    }

    /// `n × (k·d)` Jacobian of the outputs with respect to `W`; row `i` is the
    /// flattening of `(v ⊙ φ'(Wx_i)) x_iᵀ`.
    pub fn jacobian(&self, xs: &Matrix) -> Result<Matrix> {
        if xs.cols() != self.input_dim() {
            return Err(invalid!(
                "samples have dimension {}, network expects {}",
                xs.cols(),
                self.input_dim()
            ));
        }
        let k = self.hidden();
        let d = self.input_dim();
        let mut jac = Matrix::zeros(xs.rows(), k * d);
        for (i, x) in xs.row_iter().enumerate() {
            let row = jac.row_mut(i);
            for (j, (w, v)) in self.weights.row_iter().zip(&self.output).enumerate() {
                let s = v * self.activation.derivative(dot(w, x));
                for (r, xi) in row[j * d..(j + 1) * d].iter_mut().zip(x) {
                    *r = s * xi;
                }
            }
        }
        Ok(jac)
    }

    pub fn describe(&self) -> String {
        alloc::format!("{} {} {}", self.hidden(), self.input_dim(), self.activation)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, relative_error};
    use alloc::vec;

    fn random_net(k: usize, d: usize, act: Activation, seed: u64) -> ShallowNet {
        ShallowNet::init_gaussian(k, d, act, &mut SeededRng::new(seed, "net")).unwrap()
    }

    #[test]
    fn output_layer_pattern() {
        assert_eq!(output_layer(4).unwrap(), vec![0.5, 0.5, -0.5, -0.5]);
        assert!(output_layer(3).is_err());
        assert!(output_layer(0).is_err());
        assert!(output_layer(MAX_HIDDEN + 2).is_err());
        let v = output_layer(64).unwrap();
        assert!((dot(&v, &v) - 1.0).abs() < 1e-12);
        assert_eq!(v.iter().filter(|x| **x > 0.0).count(), 32);
    }

    #[test]
    fn init_is_deterministic_and_centered() {
        let a = random_net(1000, 1000, Activation::Softplus, 3);
        let b = random_net(1000, 1000, Activation::Softplus, 3);
        assert_eq!(a, b);
        let mean = a.weights().as_slice().iter().sum::<f64>() / 1e6;
        assert!(mean.abs() < 0.004, "mean {mean}");
        assert!(ShallowNet::init_gaussian(3, 2, Activation::Tanh, &mut SeededRng::new(0, "x")).is_err());
    }

    #[test]
    fn forward_examples() {
        let net = ShallowNet::from_weights(Matrix::identity(2), Activation::Linear).unwrap();
        let f = net.forward(&[1.0, 0.0]).unwrap();
        assert!((f - core::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6);
        assert!(net.forward(&[1.0]).is_err());

        let tanh = random_net(8, 3, Activation::Tanh, 1);
        assert_eq!(tanh.forward(&[0.0, 0.0, 0.0]).unwrap(), 0.0);
        let x = [0.3, -0.2, 0.9];
        let flipped = ShallowNet::from_weights(tanh.weights().scale(-1.0), Activation::Tanh).unwrap();
        let a = tanh.forward(&x).unwrap();
        let b = flipped.forward(&x).unwrap();
        assert!((a + b).abs() < 1e-14);
    }

    #[test]
    fn activation_bounds_hold() {
        for act in Activation::ALL {
            assert!(act.gamma() >= 1.0);
            assert!(act.sampled_bound() <= act.gamma() + 1e-12, "{act}");
            assert_eq!(act.name().parse::<Activation>().unwrap(), act);
        }
        assert!("relu".parse::<Activation>().is_err());
    }

    #[test]
    fn zero_residual_zero_gradient() {
        let net = random_net(6, 3, Activation::Softplus, 2);
        let xs = Matrix::from_vec(2, 3, vec![0.1, 0.2, 0.3, -0.4, 0.5, 0.6]).unwrap();
        let labels = net.forward_batch(&xs).unwrap();
        let g = net.quadratic_grad(&xs, &labels).unwrap();
        assert!(g.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for act in Activation::ALL {
            let net = random_net(6, 4, act, 7);
            let mut rng = SeededRng::new(8, "xs");
            let xs = Matrix::from_vec(3, 4, (0..12).map(|_| rng.normal()).collect()).unwrap();
            let labels = [0.3, -0.5, 0.9];
            let g = net.quadratic_grad(&xs, &labels).unwrap();
            let fd = finite_diff_grad(
                |w| {
                    let m = Matrix::from_vec(6, 4, w.to_vec()).unwrap();
                    let n = ShallowNet::from_weights(m, act).unwrap();
                    n.quadratic_eval(&xs, &labels).unwrap().loss
                },
                net.weights().as_slice(),
                1e-5,
            )
            .unwrap();
            let err = relative_error(g.as_slice(), &fd);
            assert!(err <= 1e-5, "{act}: {err}");
        }
    }

    #[test]
    fn gradient_linear_in_residual() {
        let net = random_net(4, 3, Activation::Tanh, 5);
        let xs = Matrix::from_vec(2, 3, vec![0.5, 0.1, -0.3, 0.2, 0.2, 0.7]).unwrap();
        let f = net.forward_batch(&xs).unwrap();
        let labels = [0.1, -0.2];
        let doubled: Vec<f64> = f.iter().zip(&labels).map(|(fi, y)| fi - 2.0 * (fi - y)).collect();
        let g1 = net.quadratic_grad(&xs, &labels).unwrap();
        let g2 = net.quadratic_grad(&xs, &doubled).unwrap();
        for (a, b) in g1.as_slice().iter().zip(g2.as_slice()) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gd_step_algebra() {
        let net = random_net(4, 2, Activation::Softplus, 9);
        let zero = Matrix::zeros(4, 2);
        assert_eq!(net.gd_step(&zero, 0.5).unwrap(), net);
        let gone = net.gd_step(net.weights(), 1.0).unwrap();
        assert!(gone.weights().as_slice().iter().all(|v| *v == 0.0));
        assert_eq!(gone.output_weights(), net.output_weights());
        let g = Matrix::from_vec(4, 2, vec![0.5, -1.0, 2.0, 0.25, 1.0, 1.0, -3.0, 0.0]).unwrap();
        let two = net.gd_step(&g, 0.05).unwrap().gd_step(&g, 0.05).unwrap();
        let one = net.gd_step(&g, 0.1).unwrap();
        assert!(relative_error(two.weights().as_slice(), one.weights().as_slice()) < 1e-14);
        assert!(net.gd_step(&zero, 0.0).is_err());
        assert!(net.gd_step(&Matrix::zeros(2, 2), 0.1).is_err());
    }

    #[test]
    fn jacobian_consistent_with_gradient() {
        let net = random_net(8, 5, Activation::Softplus, 11);
        let mut rng = SeededRng::new(12, "xs");
        let xs = Matrix::from_vec(7, 5, (0..35).map(|_| rng.normal()).collect()).unwrap();
        let labels: Vec<f64> = (0..7).map(|_| rng.normal()).collect();
        let eval = net.quadratic_eval(&xs, &labels).unwrap();
        let r: Vec<f64> = eval.predictions.iter().zip(&labels).map(|(f, y)| f - y).collect();
        let jt_r = net.jacobian(&xs).unwrap().transpose().matvec(&r).unwrap();
        for (a, b) in jt_r.iter().zip(eval.gradient.as_slice()) {
            assert!((a - b).abs() < 1e-10);
        }
        let (preds, slopes) = net.forward_with_slopes(&xs).unwrap();
        assert_eq!(preds, eval.predictions);
        let g = net.gradient_from_slopes(&xs, &slopes, &r).unwrap();
        for (a, b) in g.as_slice().iter().zip(eval.gradient.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_single_unit_jacobian_is_data() {
        // k = 1 is not a valid analysis net, so build the collapse directly:
        // with φ' ≡ 1 each row block j is v_j x_i.
        let w = Matrix::from_vec(2, 3, vec![0.3, 0.1, 0.4, 1.0, -0.5, 0.9]).unwrap();
        let net = ShallowNet::from_weights(w, Activation::Linear).unwrap();
        let xs = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 0.5]).unwrap();
        let j = net.jacobian(&xs).unwrap();
        let v = core::f64::consts::FRAC_1_SQRT_2;
        for i in 0..2 {
            for c in 0..3 {
                assert!((j.get(i, c) - v * xs.get(i, c)).abs() < 1e-15);
                assert!((j.get(i, 3 + c) + v * xs.get(i, c)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn linear_net_is_linear_in_weights() {
        let a = random_net(6, 3, Activation::Linear, 1);
        let b = random_net(6, 3, Activation::Linear, 2);
        let sum = Matrix::from_vec(
            6,
            3,
            a.weights().as_slice().iter().zip(b.weights().as_slice()).map(|(x, y)| x + y).collect(),
        )
        .unwrap();
        let c = ShallowNet::from_weights(sum, Activation::Linear).unwrap();
        let x = [0.2, -0.7, 0.4];
        let lhs = c.forward(&x).unwrap();
        let rhs = a.forward(&x).unwrap() + b.forward(&x).unwrap();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
