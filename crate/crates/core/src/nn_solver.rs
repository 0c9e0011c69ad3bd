//! Fully connected network trained on the V-statistic objective
//! `rᵀ W_V r + λ‖θ‖²`, `r = y − f_θ(x)`, by full-batch gradient descent.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MmrError, Result};
use crate::kernels::{gram, KernelSpec};
use crate::risk::{weight_v, Dataset};

pub const LEAKY_SLOPE: f64 = 0.01;

/// Layer `i` maps `layer_sizes[i]` inputs to `layer_sizes[i + 1]` outputs with
/// `weights[i]` of shape `out × in`. Hidden layers use leaky ReLU; the output
/// layer is linear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layer_sizes: Vec<usize>,
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
    pub slope: f64,
}

impl MlpParams {
    pub fn zeros(layer_sizes: &[usize]) -> Result<Self> {
        check_sizes(layer_sizes)?;
        let weights = layer_sizes
            .windows(2)
            .map(|w| DMatrix::zeros(w[1], w[0]))
            .collect();
        let biases = layer_sizes[1..].iter().map(|&o| DVector::zeros(o)).collect();
        Ok(MlpParams {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
            slope: LEAKY_SLOPE,
        })
    }

    /// Glorot-uniform weights `U(−a, a)`, `a = √(6 / (fan_in + fan_out))`;
    /// zero biases.
    pub fn init(layer_sizes: &[usize], seed: u64) -> Result<Self> {
        let mut p = Self::zeros(layer_sizes)?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        for w in &mut p.weights {
            let a = (6.0 / (w.nrows() + w.ncols()) as f64).sqrt();
            for v in w.iter_mut() {
                *v = rng.random_range(-a..a);
            }
        }
        Ok(p)
    }

    pub fn num_params(&self) -> usize {
        self.weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| w.len() + b.len())
            .sum()
    }

    /// All parameters as one vector: per layer, weights (column-major) then biases.
    pub fn flatten(&self) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b.as_slice());
        }
        DVector::from_vec(out)
    }

    pub fn set_flat(&mut self, theta: &DVector<f64>) -> Result<()> {
        if theta.len() != self.num_params() {
            return Err(MmrError::input(format!(
                "parameter vector has {} entries, network has {}",
                theta.len(),
                self.num_params()
            )));
        }
        let mut at = 0;
        for (w, b) in self.weights.iter_mut().zip(&mut self.biases) {
            let nw = w.len();
            w.as_mut_slice().copy_from_slice(&theta.as_slice()[at..at + nw]);
            at += nw;
            let nb = b.len();
            b.as_mut_slice().copy_from_slice(&theta.as_slice()[at..at + nb]);
            at += nb;
        }
        Ok(())
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        let acts = self.activations(x)?;
        Ok(acts.last().expect("at least one layer").column(0).into_owned())
    }

    /// Pre-activations of every layer, each `batch × units`, starting with the input.
    fn activations(&self, x: &DMatrix<f64>) -> Result<Vec<DMatrix<f64>>> {
        if x.ncols() != self.layer_sizes[0] {
            return Err(MmrError::input(format!(
                "network expects {} input columns, got {}",
                self.layer_sizes[0],
                x.ncols()
            )));
        }
        let mut out = Vec::with_capacity(self.weights.len() + 1);
        out.push(x.clone());
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let prev = out.last().expect("input pushed");
            let input = if i == 0 {
                prev.clone()
            } else {
                prev.map(|v| leaky(v, self.slope))
            };
            let mut z = input * w.transpose();
            for mut row in z.row_iter_mut() {
                row += b.transpose();
            }
            out.push(z);
        }
        Ok(out)
    }
}

fn check_sizes(layer_sizes: &[usize]) -> Result<()> {
    if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
        return Err(MmrError::input(format!(
            "layer sizes must have at least two positive entries, got {layer_sizes:?}"
        )));
    }
    if layer_sizes[layer_sizes.len() - 1] != 1 {
        return Err(MmrError::input("the output layer must have one unit"));
    }
    Ok(())
}

fn leaky(v: f64, slope: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        slope * v
    }
}

fn leaky_grad(v: f64, slope: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else {
        slope
    }
}

/// Objective `rᵀ W r + λ‖θ‖²` and its gradient, flattened like [`MlpParams::flatten`].
pub fn objective_and_gradient(
    params: &MlpParams,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    w: &DMatrix<f64>,
    lambda: f64,
) -> Result<(f64, DVector<f64>)> {
    let n = y.len();
    if x.nrows() != n || w.nrows() != n || w.ncols() != n {
        return Err(MmrError::input(format!(
            "objective: x has {} rows, y {} entries, W is {}x{}",
            x.nrows(),
            n,
            w.nrows(),
            w.ncols()
        )));
    }
    let acts = params.activations(x)?;
    let f = acts.last().expect("output layer").column(0).into_owned();
    let r = y - f;
    let wr = w * &r;
    let theta = params.flatten();
    let obj = r.dot(&wr) + lambda * theta.norm_squared();
    if !obj.is_finite() {
        return Err(MmrError::numerical("objective is not finite"));
    }

    let layers = params.weights.len();
    let mut grads_w: Vec<DMatrix<f64>> = Vec::with_capacity(layers);
    let mut grads_b: Vec<DVector<f64>> = Vec::with_capacity(layers);
    // Cotangent of the output pre-activation: ∂(rᵀWr)/∂f = −2 W r.
    let mut delta = DMatrix::from_column_slice(n, 1, (wr * -2.0).as_slice());
    for i in (0..layers).rev() {
        let input = if i == 0 {
            acts[0].clone()
        } else {
            acts[i].map(|v| leaky(v, params.slope))
        };
        grads_w.push(delta.transpose() * &input);
        grads_b.push(delta.row_sum().transpose());
        if i > 0 {
            let mut back = &delta * &params.weights[i];
            back.zip_apply(&acts[i], |g, z| *g *= leaky_grad(z, params.slope));
            delta = back;
        }
    }
    grads_w.reverse();
    grads_b.reverse();
    let mut grad = Vec::with_capacity(theta.len());
    for (gw, gb) in grads_w.iter().zip(&grads_b) {
        grad.extend_from_slice(gw.as_slice());
        grad.extend_from_slice(gb.as_slice());
    }
    let grad = DVector::from_vec(grad) + theta * (2.0 * lambda);
    Ok((obj, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    GradientDescent,
    Momentum,
}

pub const MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub lambda: f64,
    pub seed: u64,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            epochs: 1000,
            lambda: 1e-4,
            seed: 0,
            optimizer: Optimizer::Momentum,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(MmrError::input("learning rate must be positive"));
        }
        if self.epochs == 0 {
            return Err(MmrError::input("epochs must be at least 1"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(MmrError::input("lambda must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedMlp {
    pub params: MlpParams,
    /// Objective before each update; `curve[0]` is the value at initialization.
    pub curve: Vec<f64>,
    pub best_epoch: usize,
}

impl TrainedMlp {
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.params.forward(x)
    }
}

/// Architecture `[d, hidden..., 1]` for `d` input columns.
pub fn architecture(d: usize, hidden: &[usize]) -> Vec<usize> {
    let mut sizes = Vec::with_capacity(hidden.len() + 2);
    sizes.push(d);
    sizes.extend_from_slice(hidden);
    sizes.push(1);
    sizes
}

pub fn train(
    data: &Dataset,
    kernel_k: &KernelSpec,
    hidden: &[usize],
    config: &TrainConfig,
) -> Result<TrainedMlp> {
    let w = weight_v(&gram(kernel_k, &data.z)?).into_inner();
    train_with_weights(&data.x, &data.y, &w, hidden, config)
}

/// Full-batch training on a precomputed weight matrix. Returns the parameters
/// of the epoch with the lowest objective.
pub fn train_with_weights(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    w: &DMatrix<f64>,
    hidden: &[usize],
    config: &TrainConfig,
) -> Result<TrainedMlp> {
    config.validate()?;
    let mut params = MlpParams::init(&architecture(x.ncols(), hidden), config.seed)?;
    let mut theta = params.flatten();
    let mut velocity = DVector::zeros(theta.len());
    let mut best = (f64::INFINITY, theta.clone(), 0);
    let mut curve = Vec::with_capacity(config.epochs + 1);
    for epoch in 0..=config.epochs {
        params.set_flat(&theta)?;
        let step = objective_and_gradient(&params, x, y, w, config.lambda);
        let diverged = |reason: String| {
            let mut last = params.clone();
            last.set_flat(&best.1).expect("same shape");
            MmrError::Diverged {
                epoch,
                reason,
                last_finite: Box::new(last),
            }
        };
        let (obj, grad) = match step {
            Ok(v) => v,
            Err(e) => return Err(diverged(e.to_string())),
        };
        if let Some(&prev) = curve.last() {
            if obj > 10.0 * prev && obj > 1e-12 {
                return Err(diverged(format!("objective jumped from {prev:e} to {obj:e}")));
            }
        }
        curve.push(obj);
        if obj < best.0 {
            best = (obj, theta.clone(), epoch);
        }
        if epoch == config.epochs {
            break;
        }
        match config.optimizer {
            Optimizer::GradientDescent => theta -= grad * config.learning_rate,
            Optimizer::Momentum => {
                velocity = velocity * MOMENTUM - grad * config.learning_rate;
                theta += &velocity;
            }
        }
    }
    params.set_flat(&best.1)?;
    Ok(TrainedMlp {
        params,
        curve,
        best_epoch: best.2,
    })
}
