use ndarray::{ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::net::{DenseNet, Mode};
use super::objective::{objective_and_grads, LossKind, Objective, Targets};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::adam()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub jacobian_coeff: f64,
    /// Fixed weight on the task loss; ignored when `adaptive_task_weight` is set.
    pub task_weight: f64,
    /// Learn the task weight as `exp(-s)` with penalty `s` (log-variance weighting).
    pub adaptive_task_weight: bool,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            epochs: 100,
            batch_size: 64,
            seed: 0,
            jacobian_coeff: 0.0,
            task_weight: 1.0,
            adaptive_task_weight: false,
            optimizer: Optimizer::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.jacobian_coeff >= 0.0 && self.jacobian_coeff.is_finite()) {
            return Err(Error::config("jacobian_coeff must be nonnegative"));
        }
        if !(self.task_weight > 0.0 && self.task_weight.is_finite()) {
            return Err(Error::config("task_weight must be positive"));
        }
        if let Optimizer::Adam { beta1, beta2, epsilon } = self.optimizer {
            let unit = |b: f64| (0.0..1.0).contains(&b);
            if !unit(beta1) || !unit(beta2) || !(epsilon > 0.0) {
                return Err(Error::config("adam betas must lie in [0, 1) and epsilon be positive"));
            }
        }
        Ok(())
    }
}

/// Sample-weighted epoch means of the loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub task: f64,
    pub regularizer: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub epochs: Vec<EpochLoss>,
    /// Task weight in effect after the last update.
    pub final_task_weight: f64,
}

impl LossReport {
    pub fn last(&self) -> Option<&EpochLoss> {
        self.epochs.last()
    }
}

struct OptState {
    kind: Optimizer,
    lr: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptState {
    fn new(kind: Optimizer, lr: f64, shapes: &[usize]) -> Self {
        OptState {
            kind,
            lr,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    fn apply(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>) {
        self.step += 1;
        match self.kind {
            Optimizer::Sgd => {
                for (p, g) in params.into_iter().zip(grads) {
                    for (pi, gi) in p.iter_mut().zip(g) {
                        *pi -= self.lr * gi;
                    }
                }
            }
            Optimizer::Adam { beta1, beta2, epsilon } => {
                let c1 = 1.0 - beta1.powi(self.step);
                let c2 = 1.0 - beta2.powi(self.step);
                for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
                    for (((pi, gi), mi), vi) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                        *pi -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + epsilon);
                    }
                }
            }
        }
    }
}

fn run(mut net: DenseNet, x: ArrayView2<f64>, targets: Targets, loss: LossKind, cfg: &TrainConfig) -> Result<(DenseNet, LossReport)> {
    cfg.validate()?;
    let n = x.nrows();
    let min_batch = if net.has_batch_norm() { 2 } else { 1 };
    if n < min_batch {
        return Err(Error::TooFewSamples { needed: min_batch, got: n });
    }
    if x.ncols() != net.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "inputs have {} columns, network expects {}",
            x.ncols(),
            net.input_dim()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut shapes: Vec<usize> = net.params().iter().map(|p| p.len()).collect();
    shapes.push(1);
    let mut opt = OptState::new(cfg.optimizer, cfg.learning_rate, &shapes);
    // log-variance for adaptive weighting; weight = exp(-s)
    let mut log_var = [0.0f64];
    let mut report = LossReport::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut task_sum, mut reg_sum, mut total_sum, mut seen) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < min_batch {
                continue;
            }
            let xb = x.select(Axis(0), chunk);
            let weight = if cfg.adaptive_task_weight {
                (-log_var[0]).exp()
            } else {
                cfg.task_weight
            };
            let obj = Objective {
                loss,
                task_weight: weight,
                jacobian_coeff: cfg.jacobian_coeff,
            };
            let (value, grads, cache) = match targets {
                Targets::Values(y) => {
                    let yb = y.select(Axis(0), chunk);
                    objective_and_grads(&net, xb.view(), &Targets::Values(yb.view()), &obj, Mode::Train)?
                }
                Targets::Classes(y) => {
                    let yb: Vec<usize> = chunk.iter().map(|&i| y[i]).collect();
                    objective_and_grads(&net, xb.view(), &Targets::Classes(&yb), &obj, Mode::Train)?
                }
            };
            let total = value.total + if cfg.adaptive_task_weight { log_var[0] } else { 0.0 };
            if !total.is_finite() {
                return Err(Error::NonFiniteLoss { epoch });
            }
            net.update_running(&cache);
            let d_log_var = [if cfg.adaptive_task_weight {
                1.0 - weight * value.task
            } else {
                0.0
            }];
            let mut grad_slices = grads.slices();
            grad_slices.push(&d_log_var);
            let mut params = net.params_mut();
            params.push(&mut log_var);
            opt.apply(params, grad_slices);
            let b = chunk.len() as f64;
            task_sum += value.task * b;
            reg_sum += value.regularizer * b;
            total_sum += value.total * b;
            seen += chunk.len();
        }
        let seen = seen.max(1) as f64;
        report.epochs.push(EpochLoss {
            task: task_sum / seen,
            regularizer: reg_sum / seen,
            total: total_sum / seen,
        });
        let finite = net.params().iter().all(|p| p.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::NonFiniteLoss { epoch });
        }
    }
    report.final_task_weight = if cfg.adaptive_task_weight {
        (-log_var[0]).exp()
    } else {
        cfg.task_weight
    };
    Ok((net, report))
}

/// Mini-batch MSE training. Deterministic given `cfg.seed`.
pub fn train_regressor(net: DenseNet, x: ArrayView2<f64>, y: ArrayView2<f64>, cfg: &TrainConfig) -> Result<(DenseNet, LossReport)> {
    if y.nrows() != x.nrows() || y.ncols() != net.output_dim() {
        return Err(Error::ShapeMismatch(format!(
            "targets {}×{} for {} rows and {} outputs",
            y.nrows(),
            y.ncols(),
            x.nrows(),
            net.output_dim()
        )));
    }
    run(net, x, Targets::Values(y), LossKind::Mse, cfg)
}

/// Mini-batch training of `λ·CE + jacobian_coeff·jacobian_norm`.
pub fn train_classifier(net: DenseNet, x: ArrayView2<f64>, y: &[usize], cfg: &TrainConfig) -> Result<(DenseNet, LossReport)> {
    if y.len() != x.nrows() {
        return Err(Error::LengthMismatch {
            left: y.len(),
            right: x.nrows(),
        });
    }
    if let Some(&bad) = y.iter().find(|&&l| l >= net.output_dim()) {
        return Err(Error::UnknownLabel {
            label: bad,
            size: net.output_dim(),
        });
    }
    run(net, x, Targets::Classes(y), LossKind::CrossEntropy, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{jacobian_norm, Activation, MlpSpec};
    use ndarray::{array, Array2};
    use rand::Rng;

    fn linear_net(input: usize, output: usize, seed: u64) -> DenseNet {
        let spec = MlpSpec {
            hidden: vec![],
            ..Default::default()
        };
        DenseNet::mlp(&spec, input, output, Activation::Identity, seed).unwrap()
    }

    #[test]
    fn realizable_linear_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array2::from_shape_fn((200, 3), |_| rng.random_range(-1.0..1.0));
        let a = array![[1.0, -2.0, 0.5], [0.3, 0.0, 1.5]];
        let y = x.dot(&a.t());
        let cfg = TrainConfig {
            learning_rate: 0.05,
            epochs: 200,
            batch_size: 32,
            ..Default::default()
        };
        let (net, report) = train_regressor(linear_net(3, 2, 3), x.view(), y.view(), &cfg).unwrap();
        let pred = net.forward(x.view()).unwrap();
        let mse = (&pred - &y).mapv(|v| v * v).mean().unwrap();
        assert!(mse < 1e-4, "{mse}");
        assert!(report.epochs.iter().all(|e| e.total.is_finite() && e.total >= 0.0));
    }

    #[test]
    fn constant_target_converges_to_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array2::from_shape_fn((100, 2), |_| rng.random_range(-1.0..1.0));
        let y = Array2::from_elem((100, 1), 3.5);
        let cfg = TrainConfig {
            learning_rate: 0.05,
            epochs: 300,
            batch_size: 25,
            ..Default::default()
        };
        let (net, _) = train_regressor(linear_net(2, 1, 4), x.view(), y.view(), &cfg).unwrap();
        let pred = net.forward(x.view()).unwrap();
        let mse = pred.mapv(|v| (v - 3.5).powi(2)).mean().unwrap();
        assert!(mse < 1e-6, "{mse}");
    }

    #[test]
    fn same_seed_same_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Array2::from_shape_fn((50, 4), |_| rng.random_range(-1.0..1.0));
        let y: Vec<usize> = (0..50).map(|i| i % 2).collect();
        let spec = MlpSpec {
            hidden: vec![6],
            batch_norm: true,
            ..Default::default()
        };
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 8,
            seed: 11,
            jacobian_coeff: 0.1,
            ..Default::default()
        };
        let make = || DenseNet::mlp(&spec, 4, 2, Activation::SoftmaxOutput, 5).unwrap();
        let (a, ra) = train_classifier(make(), x.view(), &y, &cfg).unwrap();
        let (b, rb) = train_classifier(make(), x.view(), &y, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
    }

    #[test]
    fn rejects_bad_labels_and_configs() {
        let x = Array2::zeros((4, 2));
        let net = DenseNet::mlp(&MlpSpec::default(), 2, 2, Activation::SoftmaxOutput, 0).unwrap();
        assert!(matches!(
            train_classifier(net.clone(), x.view(), &[0, 1, 2, 0], &TrainConfig::default()),
            Err(Error::UnknownLabel { label: 2, size: 2 })
        ));
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        assert!(train_classifier(net, x.view(), &[0, 1, 1, 0], &bad).is_err());
    }

    #[test]
    fn diverging_training_reports_epoch() {
        let x = Array2::from_shape_fn((20, 1), |(i, _)| i as f64 * 100.0);
        let y = Array2::from_shape_fn((20, 1), |(i, _)| i as f64 * 1e5);
        let cfg = TrainConfig {
            learning_rate: 1e3,
            epochs: 50,
            optimizer: Optimizer::Sgd,
            ..Default::default()
        };
        let err = train_regressor(linear_net(1, 1, 0), x.view(), y.view(), &cfg).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { .. }));
    }

    fn blobs(seed: u64, n: usize) -> (Array2<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let x = Array2::from_shape_fn((n, 2), |(i, _)| {
            let centre = if y[i] == 1 { 3.0 } else { -3.0 };
            centre + rng.random_range(-1.0..1.0)
        });
        (x, y)
    }

    #[test]
    fn separable_blobs_are_fit_exactly() {
        let (x, y) = blobs(6, 100);
        let spec = MlpSpec {
            hidden: vec![8],
            ..Default::default()
        };
        let net = DenseNet::mlp(&spec, 2, 2, Activation::SoftmaxOutput, 1).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.01,
            epochs: 50,
            batch_size: 16,
            ..Default::default()
        };
        let (net, _) = train_classifier(net, x.view(), &y, &cfg).unwrap();
        assert_eq!(net.predict_classes(x.view()).unwrap(), y);
    }

    #[test]
    fn zero_coefficient_is_plain_cross_entropy() {
        use crate::nn::net::{backward, Grads};
        use crate::nn::objective::cross_entropy;
        let (x, y) = blobs(7, 40);
        let spec = MlpSpec {
            hidden: vec![5],
            activation: Activation::Tanh,
            batch_norm: false,
        };
        let net = DenseNet::mlp(&spec, 2, 2, Activation::SoftmaxOutput, 2).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 8,
            learning_rate: 0.1,
            optimizer: Optimizer::Sgd,
            seed: 5,
            ..Default::default()
        };
        let (trained, _) = train_classifier(net.clone(), x.view(), &y, &cfg).unwrap();

        // hand-written SGD on cross-entropy alone
        let mut plain = net;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut order: Vec<usize> = (0..40).collect();
        for _ in 0..3 {
            order.shuffle(&mut rng);
            for chunk in order.chunks(8) {
                let xb = x.select(Axis(0), chunk);
                let yb: Vec<usize> = chunk.iter().map(|&i| y[i]).collect();
                let cache = plain.forward_cached(xb.view(), Mode::Train).unwrap();
                let (_, d) = cross_entropy(cache.logits(), &yb);
                let mut g = Grads::zeros(&plain);
                backward(&plain, &cache, d, None, &mut g);
                for (p, gs) in plain.params_mut().into_iter().zip(g.slices()) {
                    for (pi, gi) in p.iter_mut().zip(gs) {
                        *pi -= 0.1 * gi;
                    }
                }
            }
        }
        assert_eq!(trained, plain);
    }

    #[test]
    fn huge_coefficient_shrinks_jacobian() {
        let (x, y) = blobs(8, 80);
        let spec = MlpSpec {
            hidden: vec![8],
            ..Default::default()
        };
        let net = DenseNet::mlp(&spec, 2, 2, Activation::SoftmaxOutput, 3).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.01,
            epochs: 40,
            batch_size: 16,
            ..Default::default()
        };
        let (plain, _) = train_classifier(net.clone(), x.view(), &y, &cfg).unwrap();
        let reg_cfg = TrainConfig {
            jacobian_coeff: 1e6,
            ..cfg
        };
        let (reg, _) = train_classifier(net, x.view(), &y, &reg_cfg).unwrap();
        let jp = jacobian_norm(&plain, x.view()).unwrap();
        let jr = jacobian_norm(&reg, x.view()).unwrap();
        assert!(jr * 100.0 <= jp, "{jr} vs {jp}");
    }

    #[test]
    fn adaptive_weight_moves_toward_inverse_loss() {
        let (x, y) = blobs(9, 60);
        let net = DenseNet::mlp(&MlpSpec { hidden: vec![4], ..Default::default() }, 2, 2, Activation::SoftmaxOutput, 4).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.01,
            epochs: 20,
            batch_size: 20,
            adaptive_task_weight: true,
            ..Default::default()
        };
        let (_, report) = train_classifier(net, x.view(), &y, &cfg).unwrap();
        // stationary point of exp(-s)·L + s is exp(-s) = 1/L; with small L the weight grows
        assert!(report.final_task_weight > 1.0);
    }
}
