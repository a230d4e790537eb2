//! Losses, the input-Jacobian penalty, and their parameter gradients.
//!
//! The penalty is the batch mean of `‖∂z/∂x‖_F²`, where `z` are the final
//! pre-activations (logits for classifiers). Rows of the Jacobian come from
//! one reverse sweep per output; its parameter gradient differentiates that
//! sweep once more. Batch-norm layers enter the Jacobian as the per-row
//! affine map given the statistics of the current pass.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::net::{backward, DenseNet, ForwardCache, Grads, Injected, Mode};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    CrossEntropy,
}

#[derive(Clone, Copy, Debug)]
pub enum Targets<'a> {
    Values(ArrayView2<'a, f64>),
    Classes(&'a [usize]),
}

/// `task_weight · task_loss + jacobian_coeff · jacobian_norm`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objective {
    pub loss: LossKind,
    pub task_weight: f64,
    pub jacobian_coeff: f64,
}

impl Objective {
    pub fn new(loss: LossKind) -> Self {
        Objective {
            loss,
            task_weight: 1.0,
            jacobian_coeff: 0.0,
        }
    }

    pub fn with_jacobian(mut self, coeff: f64) -> Self {
        self.jacobian_coeff = coeff;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveValue {
    pub task: f64,
    pub regularizer: f64,
    pub total: f64,
}

/// Mean squared error over every entry, with its gradient.
pub fn mse(pred: &Array2<f64>, target: &ArrayView2<f64>) -> (f64, Array2<f64>) {
    let diff = pred - target;
    let n = diff.len().max(1) as f64;
    let value = diff.iter().map(|d| d * d).sum::<f64>() / n;
    (value, diff * (2.0 / n))
}

/// Mean cross-entropy of softmax(logits) against class indices, with the
/// gradient with respect to the logits.
pub fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let b = logits.nrows().max(1) as f64;
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut total = 0.0;
    for ((row, mut g), &y) in logits.rows().into_iter().zip(grad.rows_mut()).zip(labels) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        total += log_z - row[y];
        for (k, (gk, &v)) in g.iter_mut().zip(row.iter()).enumerate() {
            let p = (v - log_z).exp();
            *gk = (p - if k == y { 1.0 } else { 0.0 }) / b;
        }
    }
    (total / b, grad)
}

fn check_targets(net: &DenseNet, x: &ArrayView2<f64>, targets: &Targets, loss: LossKind) -> Result<()> {
    match (targets, loss) {
        (Targets::Values(y), LossKind::Mse) => {
            if y.nrows() != x.nrows() || y.ncols() != net.output_dim() {
                return Err(Error::ShapeMismatch(format!(
                    "targets {}×{} for {} rows and {} outputs",
                    y.nrows(),
                    y.ncols(),
                    x.nrows(),
                    net.output_dim()
                )));
            }
            if net.is_classifier() {
                return Err(Error::config("MSE needs a non-softmax output layer"));
            }
        }
        (Targets::Classes(y), LossKind::CrossEntropy) => {
            if y.len() != x.nrows() {
                return Err(Error::LengthMismatch {
                    left: y.len(),
                    right: x.nrows(),
                });
            }
            if !net.is_classifier() {
                return Err(Error::config("cross-entropy needs a softmax output layer"));
            }
            if let Some(&bad) = y.iter().find(|&&l| l >= net.output_dim()) {
                return Err(Error::UnknownLabel {
                    label: bad,
                    size: net.output_dim(),
                });
            }
        }
        _ => return Err(Error::config("loss kind does not match target kind")),
    }
    Ok(())
}

/// Value and ∂/∂logits of the task loss.
fn task_loss(net: &DenseNet, cache: &ForwardCache, targets: &Targets) -> (f64, Array2<f64>) {
    match targets {
        Targets::Values(y) => {
            let last = net.layers().last().expect("non-empty");
            let (v, d_out) = mse(cache.output(), y);
            let d_pre = d_out * &last.activation.derivative(cache.logits());
            (v, d_pre)
        }
        Targets::Classes(y) => cross_entropy(cache.logits(), y),
    }
}

/// Reverse sweeps for every output. Returns per-layer `(Q, R, P)` for each
/// output and the squared Jacobian norm summed over rows.
struct Sweep {
    q: Vec<Array2<f64>>,
    r: Vec<Array2<f64>>,
    p: Vec<Array2<f64>>,
}

fn sweeps(net: &DenseNet, cache: &ForwardCache) -> (Vec<Sweep>, Vec<Array1<f64>>, Vec<Array2<f64>>, f64) {
    let layers = net.layers();
    let n = layers.len();
    let b = cache.layers[0].input.nrows();
    let scales: Vec<Array1<f64>> = layers
        .iter()
        .zip(&cache.layers)
        .map(|(l, c)| l.bn_scale(c))
        .collect();
    let slopes: Vec<Array2<f64>> = layers
        .iter()
        .zip(&cache.layers)
        .take(n - 1)
        .map(|(l, c)| l.activation.derivative(&c.pre))
        .collect();
    let mut total = 0.0;
    let out_dim = net.output_dim();
    let mut all = Vec::with_capacity(out_dim);
    for k in 0..out_dim {
        let mut q_l = Array2::zeros((b, out_dim));
        q_l.column_mut(k).fill(1.0);
        let mut q = vec![Array2::zeros((0, 0)); n];
        let mut r = vec![Array2::zeros((0, 0)); n];
        let mut p = vec![Array2::zeros((0, 0)); n];
        for l in (0..n).rev() {
            let r_l = &q_l * &scales[l];
            let p_l = r_l.dot(&layers[l].weight);
            if l > 0 {
                let next_q = &p_l * &slopes[l - 1];
                q[l] = std::mem::replace(&mut q_l, next_q);
            } else {
                q[l] = q_l.clone();
            }
            r[l] = r_l;
            p[l] = p_l;
        }
        total += p[0].iter().map(|v| v * v).sum::<f64>();
        all.push(Sweep { q, r, p });
    }
    (all, scales, slopes, total)
}

/// Mean over rows of the squared Frobenius norm of the input-output Jacobian.
pub fn jacobian_norm(net: &DenseNet, batch: ArrayView2<f64>) -> Result<f64> {
    let cache = net.forward_cached(batch, Mode::Eval)?;
    let (_, _, _, total) = sweeps(net, &cache);
    Ok(total / batch.nrows().max(1) as f64)
}

/// Jacobian penalty `coeff · mean_b ‖J_b‖²` and its gradient contributions.
fn jacobian_penalty(
    net: &DenseNet,
    cache: &ForwardCache,
    coeff: f64,
    grads: &mut Grads,
    injected: &mut Injected,
) -> f64 {
    let layers = net.layers();
    let n = layers.len();
    let b = cache.layers[0].input.nrows().max(1) as f64;
    let (all, scales, slopes, total) = sweeps(net, cache);
    let scale = coeff / b;
    let curvature: Vec<Option<Array2<f64>>> = layers
        .iter()
        .zip(&cache.layers)
        .take(n - 1)
        .map(|(l, c)| l.activation.second_derivative(&c.pre))
        .collect();
    let mut scale_bar: Vec<Array1<f64>> = layers.iter().map(|l| Array1::zeros(l.output_dim())).collect();
    for sw in &all {
        let mut p_bar = &sw.p[0] * (2.0 * scale);
        for l in 0..n {
            grads.layers[l].weight += &sw.r[l].t().dot(&p_bar);
            let r_bar = p_bar.dot(&layers[l].weight.t());
            let q_bar = &r_bar * &scales[l];
            scale_bar[l] += &(&sw.q[l] * &r_bar).sum_axis(Axis(0));
            if l + 1 < n {
                p_bar = &q_bar * &slopes[l];
                if let Some(curv) = &curvature[l] {
                    let s_bar = &q_bar * &sw.p[l + 1];
                    injected.add_pre(l, s_bar * curv);
                }
            }
        }
    }
    for (l, sb) in scale_bar.into_iter().enumerate() {
        let (Some(bn), Some(c)) = (&layers[l].batch_norm, &cache.layers[l].bn) else {
            continue;
        };
        *grads.layers[l].gamma.as_mut().expect("bn grads") += &(&sb * &c.inv_std);
        if cache.mode == Mode::Train {
            injected.add_inv_std(l, &sb * &bn.gamma);
        }
    }
    coeff * total / b
}

/// Objective value only; used by finite-difference checks.
pub fn objective_value(
    net: &DenseNet,
    x: ArrayView2<f64>,
    targets: &Targets,
    obj: &Objective,
    mode: Mode,
) -> Result<ObjectiveValue> {
    check_targets(net, &x, targets, obj.loss)?;
    let cache = net.forward_cached(x, mode)?;
    let (task, _) = task_loss(net, &cache, targets);
    let regularizer = if obj.jacobian_coeff != 0.0 {
        let (_, _, _, total) = sweeps(net, &cache);
        obj.jacobian_coeff * total / x.nrows().max(1) as f64
    } else {
        0.0
    };
    Ok(ObjectiveValue {
        task,
        regularizer,
        total: obj.task_weight * task + regularizer,
    })
}

/// Objective value, parameter gradients, and the forward cache (for running-stat updates).
pub(crate) fn objective_and_grads(
    net: &DenseNet,
    x: ArrayView2<f64>,
    targets: &Targets,
    obj: &Objective,
    mode: Mode,
) -> Result<(ObjectiveValue, Grads, ForwardCache)> {
    check_targets(net, &x, targets, obj.loss)?;
    let cache = net.forward_cached(x, mode)?;
    let (task, d_task) = task_loss(net, &cache, targets);
    let mut grads = Grads::zeros(net);
    let mut injected = Injected::new(net.layers().len());
    let regularizer = if obj.jacobian_coeff != 0.0 {
        jacobian_penalty(net, &cache, obj.jacobian_coeff, &mut grads, &mut injected)
    } else {
        0.0
    };
    let d_last = if obj.task_weight == 1.0 {
        d_task
    } else {
        d_task * obj.task_weight
    };
    let inj = (obj.jacobian_coeff != 0.0).then_some(&injected);
    backward(net, &cache, d_last, inj, &mut grads);
    Ok((
        ObjectiveValue {
            task,
            regularizer,
            total: obj.task_weight * task + regularizer,
        },
        grads,
        cache,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::net::{Activation, Layer};
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn linear(w: Array2<f64>) -> DenseNet {
        let out = w.nrows();
        DenseNet::new(vec![Layer {
            weight: w,
            bias: Array1::zeros(out),
            activation: Activation::Identity,
            batch_norm: None,
        }])
        .unwrap()
    }

    #[test]
    fn linear_jacobian_is_frobenius_norm() {
        let w = array![[1.0, -2.0, 0.5], [0.25, 3.0, -1.0]];
        let expect: f64 = w.iter().map(|v| v * v).sum();
        let net = linear(w);
        let x = array![[1.0, 2.0, 3.0], [-4.0, 0.0, 9.0]];
        assert!((jacobian_norm(&net, x.view()).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn zero_weights_have_zero_jacobian() {
        let net = linear(Array2::zeros((2, 4)));
        assert_eq!(jacobian_norm(&net, Array2::ones((3, 4)).view()).unwrap(), 0.0);
    }

    #[test]
    fn composition_with_frozen_linear_map() {
        // J(f∘B) = ‖W B‖_F² for linear f
        let w = array![[1.0, 2.0], [0.0, -1.0], [3.0, 1.0]];
        let bm = array![[0.5, -1.0, 2.0], [1.5, 0.0, -0.5]];
        let composed = DenseNet::new(vec![
            Layer {
                weight: bm.clone(),
                bias: Array1::zeros(2),
                activation: Activation::Identity,
                batch_norm: None,
            },
            Layer {
                weight: w.clone(),
                bias: Array1::zeros(3),
                activation: Activation::Identity,
                batch_norm: None,
            },
        ])
        .unwrap();
        let wb = w.dot(&bm);
        let expect: f64 = wb.iter().map(|v| v * v).sum();
        let got = jacobian_norm(&composed, Array2::ones((2, 3)).view()).unwrap();
        assert!((got - expect).abs() < 1e-10);
    }

    #[test]
    fn relu_net_jacobian_matches_finite_differences() {
        let spec = crate::nn::MlpSpec {
            hidden: vec![4],
            ..Default::default()
        };
        let net = DenseNet::mlp(&spec, 3, 2, Activation::Identity, 17).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Array2::from_shape_fn((5, 3), |_| rng.random_range(-1.0..1.0));
        let analytic = jacobian_norm(&net, x.view()).unwrap();
        // central differences, one input coordinate at a time
        let h = 1e-5;
        let mut fd = 0.0;
        for row in 0..x.nrows() {
            for i in 0..3 {
                let mut xp = x.row(row).to_owned().insert_axis(Axis(0));
                let mut xm = xp.clone();
                xp[[0, i]] += h;
                xm[[0, i]] -= h;
                let d = (net.forward(xp.view()).unwrap() - net.forward(xm.view()).unwrap()) / (2.0 * h);
                fd += d.iter().map(|v| v * v).sum::<f64>();
            }
        }
        fd /= x.nrows() as f64;
        assert!((analytic - fd).abs() / fd < 1e-4, "{analytic} vs {fd}");
    }

    #[test]
    fn cross_entropy_is_nonnegative_and_matches_definition() {
        let logits = array![[2.0, 0.0], [0.0, 0.0]];
        let (v, g) = cross_entropy(&logits, &[0, 1]);
        let p0 = 2f64.exp() / (2f64.exp() + 1.0);
        let expect = (-(p0.ln()) + 2f64.ln()) / 2.0;
        assert!((v - expect).abs() < 1e-12);
        assert!(v >= 0.0);
        // each gradient row sums to zero
        for row in g.rows() {
            assert!(row.sum().abs() < 1e-12);
        }
    }

    #[test]
    fn target_checks() {
        let net = linear(Array2::eye(2));
        let x = Array2::zeros((3, 2));
        let y = Array2::zeros((2, 2));
        assert!(objective_value(&net, x.view(), &Targets::Values(y.view()), &Objective::new(LossKind::Mse), Mode::Eval).is_err());
        assert!(objective_value(&net, x.view(), &Targets::Classes(&[0, 1, 0]), &Objective::new(LossKind::CrossEntropy), Mode::Eval).is_err());
    }
}
