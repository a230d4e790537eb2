//! Empirical estimators: binned mutual information, proxy A-distance, and
//! the train/test generalization gap.

use std::collections::HashMap;

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::SensorDataset;
use crate::error::{Error, Result};
use crate::nn::{self, Activation, DenseNet, MlpSpec, TrainConfig};
use crate::pipeline::{metrics_on, Detector};

pub const MAX_MI_COLUMNS: usize = 3;
pub const DEFAULT_BINS: usize = 16;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Binning {
    /// Equal-width bins between each column's min and max.
    #[default]
    EqualWidth,
    /// Bins holding (nearly) equal counts; invariant to monotone transforms.
    EqualFrequency,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiEstimate {
    /// Nats, clamped at 0.
    pub value: f64,
    pub bins: usize,
    pub sample_count: usize,
}

fn column_bins(col: &[f64], bins: usize, binning: Binning) -> Vec<usize> {
    match binning {
        Binning::EqualWidth => {
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let width = hi - lo;
            col.iter()
                .map(|&v| {
                    if width > 0.0 {
                        (((v - lo) / width * bins as f64) as usize).min(bins - 1)
                    } else {
                        0
                    }
                })
                .collect()
        }
        Binning::EqualFrequency => {
            let n = col.len();
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| col[a].total_cmp(&col[b]));
            let mut out = vec![0; n];
            let mut rank = 0;
            while rank < n {
                // ties share the bin of their first rank
                let bin = rank * bins / n;
                let v = col[order[rank]];
                while rank < n && col[order[rank]] == v {
                    out[order[rank]] = bin;
                    rank += 1;
                }
            }
            out
        }
    }
}

/// Plug-in entropy with the Miller–Madow correction `(m − 1) / 2n`, where
/// `m` is the number of occupied cells.
fn entropy_mm<K: std::hash::Hash + Eq>(keys: impl Iterator<Item = K>, n: usize) -> f64 {
    let mut counts: HashMap<K, usize> = HashMap::new();
    for k in keys {
        *counts.entry(k).or_default() += 1;
    }
    let nf = n as f64;
    let plug_in: f64 = counts
        .values()
        .map(|&c| {
            let p = c as f64 / nf;
            -p * p.ln()
        })
        .sum();
    plug_in + (counts.len() as f64 - 1.0) / (2.0 * nf)
}

/// Histogram estimate of `I(X; y)` in nats for up to three columns of `X`.
pub fn mutual_info_binned(x: ArrayView2<f64>, y: &[usize], bins: usize, binning: Binning) -> Result<MiEstimate> {
    let (n, cols) = x.dim();
    if y.len() != n {
        return Err(Error::LengthMismatch { left: n, right: y.len() });
    }
    if cols == 0 || cols > MAX_MI_COLUMNS {
        return Err(Error::config(format!("mutual information takes 1 to {MAX_MI_COLUMNS} columns, got {cols}")));
    }
    if bins < 2 {
        return Err(Error::config("at least two bins are required"));
    }
    let needed = 10 * bins.pow(cols as u32);
    if n < needed {
        return Err(Error::TooFewSamples { needed, got: n });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    let per_col: Vec<Vec<usize>> = x.columns().into_iter().map(|c| column_bins(&c.to_vec(), bins, binning)).collect();
    let cell = |i: usize| per_col.iter().fold(0usize, |acc, b| acc * bins + b[i]);
    let hx = entropy_mm((0..n).map(cell), n);
    let hy = entropy_mm(y.iter().copied(), n);
    let hxy = entropy_mm((0..n).map(|i| (cell(i), y[i])), n);
    Ok(MiEstimate {
        value: (hx + hy - hxy).max(0.0),
        bins,
        sample_count: n,
    })
}

/// Generator for the information-monotonicity check: `y` uniform binary,
/// `x = x_gain·y + N(0,1)`, `a = a_gain·y + N(0,1)`, noises independent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Theorem1Config {
    pub samples: usize,
    pub bins: usize,
    pub x_gain: f64,
    pub a_gain: f64,
    /// Probability of label 1; 0 makes the label constant.
    pub positive_rate: f64,
}

impl Default for Theorem1Config {
    fn default() -> Self {
        Theorem1Config {
            samples: 50_000,
            bins: 10,
            x_gain: 1.0,
            a_gain: 1.0,
            positive_rate: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Check {
    pub i_x: f64,
    pub i_xplus: f64,
    pub passed: bool,
}

/// Tolerance on `I([x, a]; y) ≥ I(x; y)`.
pub const THEOREM1_SLACK: f64 = 0.01;

pub fn theorem1_sample(cfg: &Theorem1Config, seed: u64) -> (Array2<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut x = Array2::zeros((cfg.samples, 2));
    let mut y = Vec::with_capacity(cfg.samples);
    for i in 0..cfg.samples {
        let label = usize::from(rand::Rng::random::<f64>(&mut rng) < cfg.positive_rate);
        let yf = label as f64;
        x[[i, 0]] = cfg.x_gain * yf + unit.sample(&mut rng);
        x[[i, 1]] = cfg.a_gain * yf + unit.sample(&mut rng);
        y.push(label);
    }
    (x, y)
}

/// Checks that adding the independent feature `a` does not lose label information.
pub fn theorem1_direction_check(cfg: &Theorem1Config, seed: u64) -> Result<Theorem1Check> {
    let (x, y) = theorem1_sample(cfg, seed);
    let i_x = mutual_info_binned(x.slice(ndarray::s![.., 0..1]), &y, cfg.bins, Binning::EqualWidth)?.value;
    let i_xplus = mutual_info_binned(x.view(), &y, cfg.bins, Binning::EqualWidth)?.value;
    Ok(Theorem1Check {
        i_x,
        i_xplus,
        passed: i_xplus >= i_x - THEOREM1_SLACK,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceEstimate {
    /// `2(1 − 2ε)` clamped to [0, 2].
    pub value: f64,
    pub classifier_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProxyConfig {
    pub seed: u64,
    pub net: MlpSpec,
    pub train: TrainConfig,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        ProxyConfig {
            seed: 0,
            net: MlpSpec {
                hidden: vec![16],
                ..Default::default()
            },
            train: TrainConfig {
                learning_rate: 0.01,
                epochs: 30,
                batch_size: 64,
                ..Default::default()
            },
        }
    }
}

pub const MIN_PROXY_ROWS: usize = 100;

/// Proxy A-distance: a domain classifier is trained on half of each set and
/// its held-out error `ε` on the other halves maps to `2(1 − 2ε)`.
pub fn proxy_a_distance(a: ArrayView2<f64>, b: ArrayView2<f64>, cfg: &ProxyConfig) -> Result<DistanceEstimate> {
    if a.ncols() != b.ncols() {
        return Err(Error::WidthMismatch { left: a.ncols(), right: b.ncols() });
    }
    let small = a.nrows().min(b.nrows());
    if small < MIN_PROXY_ROWS {
        return Err(Error::TooFewSamples { needed: MIN_PROXY_ROWS, got: small });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let halves = |n: usize, rng: &mut ChaCha8Rng| {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        let test = idx.split_off(n / 2);
        (idx, test)
    };
    let (a_train, a_test) = halves(a.nrows(), &mut rng);
    let (b_train, b_test) = halves(b.nrows(), &mut rng);
    let stack = |ia: &[usize], ib: &[usize]| -> (Array2<f64>, Vec<usize>) {
        let x = concatenate(Axis(0), &[a.select(Axis(0), ia).view(), b.select(Axis(0), ib).view()]).expect("equal widths");
        let y = std::iter::repeat_n(0, ia.len()).chain(std::iter::repeat_n(1, ib.len())).collect();
        (x, y)
    };
    let (mut xtr, ytr) = stack(&a_train, &b_train);
    let (mut xte, yte) = stack(&a_test, &b_test);
    // scale with train-half statistics only
    let mean = xtr.mean_axis(Axis(0)).expect("rows");
    let std = xtr.std_axis(Axis(0), 0.0).mapv(|s| s + crate::dataset::NORM_EPSILON);
    xtr = (&xtr - &mean) / &std;
    xte = (&xte - &mean) / &std;
    let net = DenseNet::mlp(&cfg.net, a.ncols(), 2, Activation::SoftmaxOutput, cfg.seed)?;
    let train = TrainConfig {
        seed: cfg.seed,
        ..cfg.train.clone()
    };
    let (net, _) = nn::train_classifier(net, xtr.view(), &ytr, &train)?;
    let pred = net.predict_classes(xte.view())?;
    // balanced error so unequal set sizes do not bias ε
    let err_of = |label: usize| {
        let (wrong, total) = pred
            .iter()
            .zip(&yte)
            .filter(|(_, &t)| t == label)
            .fold((0usize, 0usize), |(w, t), (p, l)| (w + usize::from(p != l), t + 1));
        wrong as f64 / total as f64
    };
    let eps = 0.5 * (err_of(0) + err_of(1));
    Ok(DistanceEstimate {
        value: (2.0 * (1.0 - 2.0 * eps)).clamp(0.0, 2.0),
        classifier_error: eps,
    })
}

/// Test minus train mean cross-entropy of a trained detector.
pub fn generalization_gap(detector: &Detector, train: &SensorDataset, test: &SensorDataset) -> Result<f64> {
    let tr = metrics_on(&detector.net, &detector.windows(train)?)?;
    let te = metrics_on(&detector.net, &detector.windows(test)?)?;
    Ok(te.cross_entropy - tr.cross_entropy)
}

/// Cross-entropy gap of a bare network on window matrices.
pub fn generalization_gap_windows(
    net: &DenseNet,
    train: (ArrayView2<f64>, &[usize]),
    test: (ArrayView2<f64>, &[usize]),
) -> Result<f64> {
    let ce = |x: ArrayView2<f64>, y: &[usize]| -> Result<f64> { Ok(nn::cross_entropy(&net.logits(x)?, y).0) };
    Ok(ce(test.0, test.1)? - ce(train.0, train.1)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn independent_data_has_no_information() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let x = Array2::from_shape_fn((n, 1), |_| rng.random::<f64>());
        let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let mi = mutual_info_binned(x.view(), &y, 16, Binning::EqualWidth).unwrap();
        assert!(mi.value < 0.02, "{}", mi.value);
    }

    #[test]
    fn deterministic_binary_label_gives_ln2() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let x = Array2::from_shape_fn((n, 1), |_| rng.random_range(-1.0..1.0));
        let y: Vec<usize> = x.column(0).iter().map(|&v| usize::from(v > 0.0)).collect();
        let mi = mutual_info_binned(x.view(), &y, 16, Binning::EqualWidth).unwrap();
        assert!((mi.value - std::f64::consts::LN_2).abs() < 0.02, "{}", mi.value);
    }

    #[test]
    fn sparse_histograms_are_refused() {
        let x = Array2::zeros((100, 2));
        let y = vec![0; 100];
        assert!(matches!(
            mutual_info_binned(x.view(), &y, 16, Binning::EqualWidth),
            Err(Error::TooFewSamples { needed: 2560, got: 100 })
        ));
    }

    #[test]
    fn theorem1_examples() {
        let informative = theorem1_direction_check(&Theorem1Config::default(), 3).unwrap();
        assert!(informative.passed);
        assert!(informative.i_xplus > informative.i_x);
        let noise = theorem1_direction_check(
            &Theorem1Config {
                a_gain: 0.0,
                ..Default::default()
            },
            4,
        )
        .unwrap();
        assert!((noise.i_xplus - noise.i_x).abs() < 0.02, "{noise:?}");
        let constant = theorem1_direction_check(
            &Theorem1Config {
                positive_rate: 0.0,
                ..Default::default()
            },
            5,
        )
        .unwrap();
        assert!(constant.i_x < 1e-9 && constant.i_xplus < 1e-9);
    }

    #[test]
    fn proxy_distance_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = Array2::from_shape_fn((400, 2), |_| rng.random::<f64>());
        let b = Array2::from_shape_fn((400, 2), |_| rng.random::<f64>());
        let same = proxy_a_distance(a.view(), b.view(), &ProxyConfig::default()).unwrap();
        assert!(same.value < 0.2, "{same:?}");
        let far = b.mapv(|v| v + 10.0);
        let apart = proxy_a_distance(a.view(), far.view(), &ProxyConfig::default()).unwrap();
        assert!(apart.value > 1.8, "{apart:?}");
        let narrow = Array2::zeros((50, 2));
        assert!(matches!(
            proxy_a_distance(a.view(), narrow.view(), &ProxyConfig::default()),
            Err(Error::TooFewSamples { .. })
        ));
    }
}
