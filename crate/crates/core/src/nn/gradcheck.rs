use ndarray::ArrayView2;

use super::net::{DenseNet, Mode};
use super::objective::{objective_and_grads, objective_value, Objective, Targets};
use crate::error::Result;

const STEP: f64 = 1e-5;

/// Largest relative discrepancy between analytic parameter gradients and
/// central differences of the objective, in train mode (batch statistics,
/// running statistics untouched).
///
/// The denominator is floored at `1e-6·max(1, |f|)`: central differences
/// carry roundoff of order `ε·|f|/h`, so exactly-zero gradients (e.g. biases
/// feeding batch norm) would otherwise read as large relative errors.
pub fn grad_check(net: &DenseNet, x: ArrayView2<f64>, targets: &Targets, obj: &Objective) -> Result<f64> {
    let (value, grads, _) = objective_and_grads(net, x, targets, obj, Mode::Train)?;
    let floor = 1e-6 * value.total.abs().max(1.0);
    let analytic: Vec<Vec<f64>> = grads.slices().into_iter().map(<[f64]>::to_vec).collect();
    let mut probe = net.clone();
    let mut worst = 0.0f64;
    for (t, tensor) in analytic.iter().enumerate() {
        for (i, &a) in tensor.iter().enumerate() {
            let original = probe.params()[t][i];
            probe.params_mut()[t][i] = original + STEP;
            let up = objective_value(&probe, x, targets, obj, Mode::Train)?.total;
            probe.params_mut()[t][i] = original - STEP;
            let down = objective_value(&probe, x, targets, obj, Mode::Train)?.total;
            probe.params_mut()[t][i] = original;
            let numeric = (up - down) / (2.0 * STEP);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
