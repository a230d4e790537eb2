use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
    /// Row-wise softmax; only valid on the final layer.
    SoftmaxOutput,
}

impl Activation {
    pub(crate) fn apply(self, n: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Relu => n.mapv(|v| v.max(0.0)),
            Activation::Tanh => n.mapv(f64::tanh),
            Activation::Identity => n.clone(),
            Activation::SoftmaxOutput => softmax_rows(n),
        }
    }

    /// Elementwise σ'(n). Softmax has no elementwise derivative and is
    /// differentiated through the loss instead.
    pub(crate) fn derivative(self, n: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Relu => n.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }),
            Activation::Tanh => n.mapv(|v| {
                let t = v.tanh();
                1.0 - t * t
            }),
            Activation::Identity | Activation::SoftmaxOutput => Array2::ones(n.raw_dim()),
        }
    }

    pub(crate) fn second_derivative(self, n: &Array2<f64>) -> Option<Array2<f64>> {
        match self {
            Activation::Tanh => Some(n.mapv(|v| {
                let t = v.tanh();
                -2.0 * t * (1.0 - t * t)
            })),
            _ => None,
        }
    }
}

pub(crate) fn softmax_rows(n: &Array2<f64>) -> Array2<f64> {
    let mut out = n.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch-normalization parameters and running statistics for one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNorm {
    pub fn new(width: usize) -> Self {
        BatchNorm {
            gamma: Array1::ones(width),
            beta: Array1::zeros(width),
            running_mean: Array1::zeros(width),
            running_var: Array1::ones(width),
            momentum: 0.1,
            epsilon: 1e-8,
        }
    }

    pub fn width(&self) -> usize {
        self.gamma.len()
    }

    pub(crate) fn check(&self) -> Result<()> {
        let w = self.gamma.len();
        if self.beta.len() != w || self.running_mean.len() != w || self.running_var.len() != w {
            return Err(Error::ShapeMismatch("batch-norm vectors differ in length".into()));
        }
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return Err(Error::config("batch-norm momentum must lie in (0, 1)"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("batch-norm epsilon must be positive"));
        }
        if self.running_var.iter().any(|&v| v < 0.0) {
            return Err(Error::config("batch-norm running variance must be nonnegative"));
        }
        Ok(())
    }

    pub(crate) fn normalize(&self, a: &Array2<f64>, mode: Mode) -> Result<BnCache> {
        if a.ncols() != self.width() {
            return Err(Error::ShapeMismatch(format!(
                "batch width {} vs batch-norm width {}",
                a.ncols(),
                self.width()
            )));
        }
        let (mean, var) = match mode {
            Mode::Train => {
                let b = a.nrows();
                if b < 2 {
                    return Err(Error::BatchTooSmall(b));
                }
                let mean = a.mean_axis(Axis(0)).expect("non-empty batch");
                let var = a.var_axis(Axis(0), 0.0);
                (mean, var)
            }
            Mode::Eval => (self.running_mean.clone(), self.running_var.clone()),
        };
        let inv_std = var.mapv(|v| 1.0 / (v + self.epsilon).sqrt());
        let xhat = (a - &mean) * &inv_std;
        Ok(BnCache {
            xhat,
            mean,
            var,
            inv_std,
        })
    }

    /// Normalizes `batch`; in train mode also folds the batch statistics into
    /// the running estimates.
    pub fn forward(&mut self, batch: &Array2<f64>, mode: Mode) -> Result<Array2<f64>> {
        let cache = self.normalize(batch, mode)?;
        let out = &cache.xhat * &self.gamma + &self.beta;
        if mode == Mode::Train {
            self.update_running(&cache);
        }
        Ok(out)
    }

    pub(crate) fn update_running(&mut self, cache: &BnCache) {
        let m = self.momentum;
        Zip::from(&mut self.running_mean)
            .and(&cache.mean)
            .for_each(|r, &v| *r = (1.0 - m) * *r + m * v);
        Zip::from(&mut self.running_var)
            .and(&cache.var)
            .for_each(|r, &v| *r = (1.0 - m) * *r + m * v);
    }
}

#[derive(Clone, Debug)]
pub(crate) struct BnCache {
    pub xhat: Array2<f64>,
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
    pub inv_std: Array1<f64>,
}

/// One affine → (batch-norm) → activation stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `out × in`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
    pub batch_norm: Option<BatchNorm>,
}

impl Layer {
    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    /// Per-unit scale the batch-norm applies to the affine output.
    pub(crate) fn bn_scale(&self, cache: &LayerCache) -> Array1<f64> {
        match (&self.batch_norm, &cache.bn) {
            (Some(bn), Some(c)) => &bn.gamma * &c.inv_std,
            _ => Array1::ones(self.output_dim()),
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct LayerCache {
    pub input: Array2<f64>,
    pub affine: Array2<f64>,
    pub bn: Option<BnCache>,
    /// Pre-activation (logits on the final layer).
    pub pre: Array2<f64>,
    pub output: Array2<f64>,
}

#[derive(Clone, Debug)]
pub(crate) struct ForwardCache {
    pub layers: Vec<LayerCache>,
    pub mode: Mode,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        &self.layers.last().expect("at least one layer").output
    }

    pub fn logits(&self) -> &Array2<f64> {
        &self.layers.last().expect("at least one layer").pre
    }
}

/// Hidden-layer layout for [`DenseNet::mlp`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpSpec {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub batch_norm: bool,
}

impl Default for MlpSpec {
    /// Two hidden layers of width 64 with ReLU.
    fn default() -> Self {
        MlpSpec {
            hidden: vec![64, 64],
            activation: Activation::Relu,
            batch_norm: false,
        }
    }
}

/// Feed-forward network of dense layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Layer>", into = "Vec<Layer>")]
pub struct DenseNet {
    layers: Vec<Layer>,
}

impl TryFrom<Vec<Layer>> for DenseNet {
    type Error = Error;

    fn try_from(layers: Vec<Layer>) -> Result<Self> {
        DenseNet::new(layers)
    }
}

impl From<DenseNet> for Vec<Layer> {
    fn from(net: DenseNet) -> Self {
        net.layers
    }
}

impl DenseNet {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::ShapeMismatch("network has no layers".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.output_dim() {
                return Err(Error::ShapeMismatch(format!("layer {i}: bias length")));
            }
            if i > 0 && layers[i - 1].output_dim() != l.input_dim() {
                return Err(Error::ShapeMismatch(format!(
                    "layer {i} expects {} inputs, previous layer emits {}",
                    l.input_dim(),
                    layers[i - 1].output_dim()
                )));
            }
            if l.activation == Activation::SoftmaxOutput && i + 1 != layers.len() {
                return Err(Error::ShapeMismatch(format!(
                    "layer {i}: softmax is only allowed on the final layer"
                )));
            }
            if let Some(bn) = &l.batch_norm {
                bn.check()?;
                if bn.width() != l.output_dim() {
                    return Err(Error::ShapeMismatch(format!("layer {i}: batch-norm width")));
                }
            }
            let finite = l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite());
            if !finite {
                return Err(Error::config(format!("layer {i} has non-finite parameters")));
            }
        }
        Ok(DenseNet { layers })
    }

    /// Randomly initialized MLP: uniform He initialization
    /// (`±sqrt(6 / fan_in)`), zero biases, batch-norm on hidden layers if requested.
    pub fn mlp(
        spec: &MlpSpec,
        input_dim: usize,
        output_dim: usize,
        output: Activation,
        seed: u64,
    ) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 {
            return Err(Error::ShapeMismatch("zero-width network".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = vec![input_dim];
        dims.extend(spec.hidden.iter().copied());
        dims.push(output_dim);
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (fan_in, fan_out) = (dims[i], dims[i + 1]);
                let limit = (6.0 / fan_in as f64).sqrt();
                let weight = Array2::from_shape_fn((fan_out, fan_in), |_| {
                    rng.random_range(-limit..limit)
                });
                let last = i + 1 == n;
                Layer {
                    weight,
                    bias: Array1::zeros(fan_out),
                    activation: if last { output } else { spec.activation },
                    batch_norm: (!last && spec.batch_norm).then(|| BatchNorm::new(fan_out)),
                }
            })
            .collect();
        DenseNet::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").output_dim()
    }

    pub fn has_batch_norm(&self) -> bool {
        self.layers.iter().any(|l| l.batch_norm.is_some())
    }

    pub fn is_classifier(&self) -> bool {
        self.layers.last().expect("non-empty").activation == Activation::SoftmaxOutput
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| {
                l.weight.len()
                    + l.bias.len()
                    + l.batch_norm.as_ref().map_or(0, |bn| 2 * bn.width())
            })
            .sum()
    }

    /// Trainable parameter tensors in a fixed order: per layer weight, bias,
    /// then gamma and beta when batch-norm is present.
    pub(crate) fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(l.weight.as_slice_mut().expect("standard layout"));
            out.push(l.bias.as_slice_mut().expect("standard layout"));
            if let Some(bn) = &mut l.batch_norm {
                out.push(bn.gamma.as_slice_mut().expect("standard layout"));
                out.push(bn.beta.as_slice_mut().expect("standard layout"));
            }
        }
        out
    }

    pub(crate) fn params(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(l.weight.as_slice().expect("standard layout"));
            out.push(l.bias.as_slice().expect("standard layout"));
            if let Some(bn) = &l.batch_norm {
                out.push(bn.gamma.as_slice().expect("standard layout"));
                out.push(bn.beta.as_slice().expect("standard layout"));
            }
        }
        out
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "batch width {} vs network input {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        Ok(())
    }

    pub(crate) fn forward_cached(&self, x: ArrayView2<f64>, mode: Mode) -> Result<ForwardCache> {
        self.check_input(&x)?;
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for layer in &self.layers {
            let affine = h.dot(&layer.weight.t()) + &layer.bias;
            let (bn, pre) = match &layer.batch_norm {
                Some(bn) => {
                    let c = bn.normalize(&affine, mode)?;
                    let pre = &c.xhat * &bn.gamma + &bn.beta;
                    (Some(c), pre)
                }
                None => (None, affine.clone()),
            };
            let output = layer.activation.apply(&pre);
            layers.push(LayerCache {
                input: std::mem::replace(&mut h, output.clone()),
                affine,
                bn,
                pre,
                output,
            });
        }
        Ok(ForwardCache { layers, mode })
    }

    /// Evaluation-mode forward pass (batch-norm uses running statistics).
    pub fn forward(&self, batch: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_cached(batch, Mode::Eval)?.output().clone())
    }

    /// Pre-softmax outputs in evaluation mode.
    pub fn logits(&self, batch: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_cached(batch, Mode::Eval)?.logits().clone())
    }

    /// Forward pass in the given mode; train mode updates running statistics.
    pub fn forward_mode(&mut self, batch: ArrayView2<f64>, mode: Mode) -> Result<Array2<f64>> {
        let cache = self.forward_cached(batch, mode)?;
        if mode == Mode::Train {
            self.update_running(&cache);
        }
        Ok(cache.output().clone())
    }

    pub(crate) fn update_running(&mut self, cache: &ForwardCache) {
        for (layer, lc) in self.layers.iter_mut().zip(&cache.layers) {
            if let (Some(bn), Some(c)) = (&mut layer.batch_norm, &lc.bn) {
                bn.update_running(c);
            }
        }
    }

    /// Class predictions by arg-max of the output rows.
    pub fn predict_classes(&self, batch: ArrayView2<f64>) -> Result<Vec<usize>> {
        let out = self.forward(batch)?;
        Ok(out
            .rows()
            .into_iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect())
    }
}

/// Gradients shaped like the network's parameters.
#[derive(Clone, Debug)]
pub(crate) struct LayerGrads {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub gamma: Option<Array1<f64>>,
    pub beta: Option<Array1<f64>>,
}

#[derive(Clone, Debug)]
pub(crate) struct Grads {
    pub layers: Vec<LayerGrads>,
}

impl Grads {
    pub fn zeros(net: &DenseNet) -> Self {
        Grads {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrads {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: Array1::zeros(l.bias.len()),
                    gamma: l.batch_norm.as_ref().map(|bn| Array1::zeros(bn.width())),
                    beta: l.batch_norm.as_ref().map(|bn| Array1::zeros(bn.width())),
                })
                .collect(),
        }
    }

    /// Same order as [`DenseNet::params_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(l.weight.as_slice().expect("standard layout"));
            out.push(l.bias.as_slice().expect("standard layout"));
            if let (Some(g), Some(b)) = (&l.gamma, &l.beta) {
                out.push(g.as_slice().expect("standard layout"));
                out.push(b.as_slice().expect("standard layout"));
            }
        }
        out
    }
}

/// Extra adjoints a regularizer injects into the primal backward pass.
#[derive(Clone, Debug)]
pub(crate) struct Injected {
    /// ∂R/∂pre per layer.
    pub pre: Vec<Option<Array2<f64>>>,
    /// ∂R/∂(1/σ_batch) per batch-norm layer (train mode only).
    pub inv_std: Vec<Option<Array1<f64>>>,
}

impl Injected {
    pub fn new(layers: usize) -> Self {
        Injected {
            pre: vec![None; layers],
            inv_std: vec![None; layers],
        }
    }
}

fn add_into(slot: &mut Option<Array2<f64>>, v: Array2<f64>) {
    match slot {
        Some(s) => *s += &v,
        None => *slot = Some(v),
    }
}

impl Injected {
    pub fn add_pre(&mut self, layer: usize, v: Array2<f64>) {
        add_into(&mut self.pre[layer], v);
    }

    pub fn add_inv_std(&mut self, layer: usize, v: Array1<f64>) {
        match &mut self.inv_std[layer] {
            Some(s) => *s += &v,
            None => self.inv_std[layer] = Some(v),
        }
    }
}

/// Backpropagates `d_last` (∂L/∂pre of the final layer) plus any injected
/// adjoints, accumulating into `grads`.
pub(crate) fn backward(
    net: &DenseNet,
    cache: &ForwardCache,
    d_last: Array2<f64>,
    injected: Option<&Injected>,
    grads: &mut Grads,
) {
    let n = net.layers.len();
    let mut d_out: Option<Array2<f64>> = None;
    for l in (0..n).rev() {
        let layer = &net.layers[l];
        let lc = &cache.layers[l];
        let mut d_pre = if l + 1 == n {
            d_last.clone()
        } else {
            let d_h = d_out.take().expect("upstream gradient");
            d_h * &layer.activation.derivative(&lc.pre)
        };
        if let Some(extra) = injected.and_then(|inj| inj.pre[l].as_ref()) {
            d_pre += extra;
        }
        let d_affine = match (&layer.batch_norm, &lc.bn) {
            (Some(bn), Some(c)) => {
                let g = &mut grads.layers[l];
                *g.gamma.as_mut().expect("bn grads") += &(&d_pre * &c.xhat).sum_axis(Axis(0));
                *g.beta.as_mut().expect("bn grads") += &d_pre.sum_axis(Axis(0));
                let d_xhat = &d_pre * &bn.gamma;
                match cache.mode {
                    Mode::Eval => d_xhat * &c.inv_std,
                    Mode::Train => {
                        let b = d_pre.nrows() as f64;
                        let centered = &lc.affine - &c.mean;
                        let mut d_inv = (&d_xhat * &centered).sum_axis(Axis(0));
                        if let Some(extra) = injected.and_then(|inj| inj.inv_std[l].as_ref()) {
                            d_inv += extra;
                        }
                        // inv = (var + eps)^(-1/2)  ⇒  d var = -1/2 · inv³ · d inv
                        let d_var = &d_inv * &c.inv_std.mapv(|s| -0.5 * s * s * s);
                        let d_mean = -(&d_xhat.sum_axis(Axis(0)) * &c.inv_std);
                        &d_xhat * &c.inv_std + &(&centered * &(&d_var * (2.0 / b))) + &(&d_mean / b)
                    }
                }
            }
            _ => d_pre,
        };
        let g = &mut grads.layers[l];
        g.weight += &d_affine.t().dot(&lc.input);
        g.bias += &d_affine.sum_axis(Axis(0));
        if l > 0 {
            d_out = Some(d_affine.dot(&layer.weight));
        }
    }
}
