//! Signal conditioning: RLS motion-artifact cancellation, singular spectrum
//! analysis, Hampel outlier filtering, linear resampling and windowing.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::dataset::{Block, Modality, SensorDataset};
use crate::error::{Error, Result};

/// Uniform rate every dataset is resampled to.
pub const TARGET_RATE: f64 = 32.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RlsConfig {
    pub filter_order: usize,
    pub forgetting: f64,
    /// δ in P(0) = δ⁻¹·I.
    pub init_scale: f64,
}

impl Default for RlsConfig {
    fn default() -> Self {
        RlsConfig {
            filter_order: 8,
            forgetting: 0.999,
            init_scale: 0.01,
        }
    }
}

impl RlsConfig {
    fn check(&self) -> Result<()> {
        if self.filter_order == 0 {
            return Err(Error::config("RLS filter_order must be at least 1"));
        }
        if !(self.forgetting > 0.0 && self.forgetting <= 1.0) {
            return Err(Error::config("RLS forgetting factor must lie in (0, 1]"));
        }
        if !(self.init_scale > 0.0) {
            return Err(Error::config("RLS init_scale must be positive"));
        }
        Ok(())
    }
}

/// Exponentially weighted RLS transversal filter.
#[derive(Clone, Debug)]
pub struct RlsFilter {
    inv_forgetting: f64,
    weights: Array1<f64>,
    inv_corr: Array2<f64>,
    taps: Array1<f64>,
}

impl RlsFilter {
    pub fn new(cfg: &RlsConfig) -> Result<Self> {
        cfg.check()?;
        let n = cfg.filter_order;
        Ok(RlsFilter {
            inv_forgetting: 1.0 / cfg.forgetting,
            weights: Array1::zeros(n),
            inv_corr: Array2::eye(n) / cfg.init_scale,
            taps: Array1::zeros(n),
        })
    }

    pub fn weights(&self) -> &Array1<f64> {
        &self.weights
    }

    /// Shifts `reference` into the tap line, predicts `desired`, adapts, and
    /// returns the a-priori error.
    pub fn step(&mut self, reference: f64, desired: f64) -> f64 {
        let n = self.taps.len();
        for i in (1..n).rev() {
            self.taps[i] = self.taps[i - 1];
        }
        self.taps[0] = reference;
        let u = &self.taps;
        let err = desired - self.weights.dot(u);
        if u.iter().all(|&x| x == 0.0) {
            // nothing to learn from; also keeps P from growing without bound
            return err;
        }
        let pu = self.inv_corr.dot(u);
        let denom = 1.0 / self.inv_forgetting + u.dot(&pu);
        let gain = &pu / denom;
        self.weights.scaled_add(err, &gain);
        // P ← λ⁻¹ (P − k uᵀP), symmetrized
        let n = gain.len();
        for i in 0..n {
            for j in 0..n {
                self.inv_corr[[i, j]] = self.inv_forgetting * (self.inv_corr[[i, j]] - gain[i] * pu[j]);
            }
        }
        for i in 0..n {
            for j in (i + 1)..n {
                let m = 0.5 * (self.inv_corr[[i, j]] + self.inv_corr[[j, i]]);
                self.inv_corr[[i, j]] = m;
                self.inv_corr[[j, i]] = m;
            }
        }
        err
    }
}

/// Removes the part of `signal` linearly predictable from lagged `reference`.
pub fn rls_denoise(signal: &[f64], reference: &[f64], cfg: &RlsConfig) -> Result<Vec<f64>> {
    if signal.len() != reference.len() {
        return Err(Error::LengthMismatch {
            left: signal.len(),
            right: reference.len(),
        });
    }
    cfg.check()?;
    if signal.len() < cfg.filter_order {
        return Err(Error::DegenerateInput(format!(
            "{} samples for a {}-tap filter",
            signal.len(),
            cfg.filter_order
        )));
    }
    let mut filter = RlsFilter::new(cfg)?;
    Ok(signal
        .iter()
        .zip(reference)
        .map(|(&d, &r)| filter.step(r, d))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsaConfig {
    pub window_len: usize,
    pub keep_components: usize,
}

impl Default for SsaConfig {
    fn default() -> Self {
        SsaConfig {
            window_len: 32,
            keep_components: 4,
        }
    }
}

fn ssa_check(n: usize, cfg: &SsaConfig) -> Result<()> {
    if cfg.window_len < 2 {
        return Err(Error::config("SSA window_len must be at least 2"));
    }
    if cfg.keep_components == 0 || cfg.keep_components > cfg.window_len {
        return Err(Error::config("SSA keep_components must lie in 1..=window_len"));
    }
    if n < 2 * cfg.window_len {
        return Err(Error::TooShort {
            needed: 2 * cfg.window_len,
            got: n,
        });
    }
    Ok(())
}

/// Eigenvectors of the lag-covariance `X Xᵀ`, sorted by decreasing eigenvalue.
fn ssa_basis(signal: &[f64], l: usize) -> DMatrix<f64> {
    let k = signal.len() - l + 1;
    let mut cov = DMatrix::<f64>::zeros(l, l);
    for i in 0..l {
        for j in i..l {
            let v: f64 = (0..k).map(|t| signal[i + t] * signal[j + t]).sum();
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..l).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    DMatrix::from_fn(l, l, |r, c| eig.eigenvectors[(r, order[c])])
}

/// Diagonal average of the rank-1 term `u (uᵀ X)` back to a sequence.
fn ssa_component(signal: &[f64], u: &[f64]) -> Vec<f64> {
    let n = signal.len();
    let l = u.len();
    let k = n - l + 1;
    // projection coefficients: v_t = Σ_i u_i x_{i+t}
    let v: Vec<f64> = (0..k)
        .map(|t| u.iter().enumerate().map(|(i, ui)| ui * signal[i + t]).sum())
        .collect();
    let mut out = vec![0.0; n];
    let mut counts = vec![0usize; n];
    for (i, ui) in u.iter().enumerate() {
        for (t, vt) in v.iter().enumerate() {
            out[i + t] += ui * vt;
            counts[i + t] += 1;
        }
    }
    for (o, c) in out.iter_mut().zip(counts) {
        *o /= c as f64;
    }
    out
}

/// Singular spectrum decomposition into `window_len` additive components,
/// ordered by decreasing singular value.
pub fn ssa_decompose(signal: &[f64], cfg: &SsaConfig) -> Result<Vec<Vec<f64>>> {
    ssa_check(signal.len(), cfg)?;
    let basis = ssa_basis(signal, cfg.window_len);
    Ok((0..cfg.window_len)
        .map(|c| ssa_component(signal, basis.column(c).as_slice()))
        .collect())
}

/// Sum of the leading `keep_components` SSA components.
pub fn ssa_denoise(signal: &[f64], cfg: &SsaConfig) -> Result<Vec<f64>> {
    ssa_check(signal.len(), cfg)?;
    let basis = ssa_basis(signal, cfg.window_len);
    let mut out = vec![0.0; signal.len()];
    for c in 0..cfg.keep_components {
        for (o, x) in out.iter_mut().zip(ssa_component(signal, basis.column(c).as_slice())) {
            *o += x;
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutlierConfig {
    pub window_len: usize,
    pub threshold_mads: f64,
}

impl Default for OutlierConfig {
    fn default() -> Self {
        OutlierConfig {
            window_len: 7,
            threshold_mads: 3.0,
        }
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Hampel filter: samples farther than `threshold_mads · 1.4826 · MAD` from
/// their centered-window median are replaced by that median. Windows are
/// truncated at the signal edges. When MAD is zero every sample that differs
/// from the median is replaced.
pub fn max_outlier_filter(signal: &[f64], cfg: &OutlierConfig) -> Result<Vec<f64>> {
    if cfg.window_len < 3 || cfg.window_len % 2 == 0 {
        return Err(Error::config("outlier window_len must be odd and at least 3"));
    }
    if !(cfg.threshold_mads > 0.0) {
        return Err(Error::config("outlier threshold_mads must be positive"));
    }
    if signal.len() < cfg.window_len {
        return Err(Error::TooShort {
            needed: cfg.window_len,
            got: signal.len(),
        });
    }
    let half = cfg.window_len / 2;
    let n = signal.len();
    let mut buf = Vec::with_capacity(cfg.window_len);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let lo = i.saturating_sub(half);
        let hi = (i + half + 1).min(n);
        buf.clear();
        buf.extend_from_slice(&signal[lo..hi]);
        let med = median(&mut buf);
        for v in buf.iter_mut() {
            *v = (*v - med).abs();
        }
        let mad = median(&mut buf);
        let dev = (signal[i] - med).abs();
        let replace = if mad == 0.0 {
            dev > 0.0
        } else {
            dev > cfg.threshold_mads * 1.4826 * mad
        };
        out.push(if replace { med } else { signal[i] });
    }
    Ok(out)
}

fn resample_len(n: usize, from_rate: f64, to_rate: f64) -> usize {
    ((n - 1) as f64 * to_rate / from_rate + 1e-9).floor() as usize + 1
}

/// Source positions (fractional sample indices) of the output grid.
fn resample_positions(n: usize, from_rate: f64, to_rate: f64) -> Vec<f64> {
    let m = resample_len(n, from_rate, to_rate);
    let last = (n - 1) as f64;
    (0..m)
        .map(|j| (j as f64 * from_rate / to_rate).min(last))
        .collect()
}

/// Linear interpolation onto the grid `t_j = j / to_rate`, never past the last input sample.
pub fn resample(signal: &[f64], from_rate: f64, to_rate: f64) -> Result<Vec<f64>> {
    if !(from_rate > 0.0 && to_rate > 0.0) {
        return Err(Error::config("sample rates must be positive"));
    }
    if signal.len() < 2 {
        return Err(Error::TooShort {
            needed: 2,
            got: signal.len(),
        });
    }
    if from_rate == to_rate {
        return Ok(signal.to_vec());
    }
    Ok(resample_positions(signal.len(), from_rate, to_rate)
        .into_iter()
        .map(|p| {
            let i = p.floor() as usize;
            let frac = p - i as f64;
            if i + 1 >= signal.len() || frac == 0.0 {
                signal[i]
            } else {
                signal[i] + frac * (signal[i + 1] - signal[i])
            }
        })
        .collect())
}

/// Labels on the resampled grid: the label of the last input sample at or before each output time.
pub fn resample_labels(labels: &[usize], from_rate: f64, to_rate: f64) -> Vec<usize> {
    if labels.len() < 2 || from_rate == to_rate {
        return labels.to_vec();
    }
    resample_positions(labels.len(), from_rate, to_rate)
        .into_iter()
        .map(|p| labels[(p + 1e-9).floor() as usize])
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelRule {
    #[default]
    Majority,
    Last,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    pub window_samples: usize,
    pub stride_samples: usize,
    pub label_rule: LabelRule,
}

impl Default for WindowConfig {
    /// 4 s windows with a 1 s hop at 32 Hz.
    fn default() -> Self {
        WindowConfig {
            window_samples: 128,
            stride_samples: 32,
            label_rule: LabelRule::Majority,
        }
    }
}

impl WindowConfig {
    pub fn new(window_samples: usize, stride_samples: usize) -> Self {
        WindowConfig {
            window_samples,
            stride_samples,
            label_rule: LabelRule::Majority,
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.window_samples == 0 || self.stride_samples == 0 {
            return Err(Error::config("window and stride must be at least one sample"));
        }
        Ok(())
    }

    /// Window start offsets for a block of length `t`.
    pub fn starts(&self, t: usize) -> impl Iterator<Item = usize> {
        let count = if t >= self.window_samples {
            (t - self.window_samples) / self.stride_samples + 1
        } else {
            0
        };
        let stride = self.stride_samples;
        (0..count).map(move |i| i * stride)
    }
}

/// Model-ready windows of one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Windows {
    /// One row per window, channel-major: `row[c * W + t]`.
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub block: Vec<usize>,
    pub start: Vec<usize>,
}

impl Windows {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub(crate) fn window_label(labels: &[usize], rule: LabelRule) -> usize {
    match rule {
        LabelRule::Last => *labels.last().expect("non-empty window"),
        LabelRule::Majority => {
            let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
            for &l in labels {
                *counts.entry(l).or_default() += 1;
            }
            // ties go to the higher label index
            counts
                .into_iter()
                .max_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(&b.0)))
                .map(|(l, _)| l)
                .expect("non-empty window")
        }
    }
}

/// Flattens one window of `block` starting at `start` into `row`.
pub(crate) fn flatten_window(block: &Block, start: usize, w: usize, row: &mut [f64]) {
    let d = block.width();
    for c in 0..d {
        for t in 0..w {
            row[c * w + t] = block.samples[[start + t, c]];
        }
    }
}

/// Slides a window over every block; windows never cross block boundaries.
pub fn windowize(ds: &SensorDataset, cfg: &WindowConfig) -> Result<Windows> {
    cfg.check()?;
    let w = cfg.window_samples;
    let d = ds.width();
    for (bi, b) in ds.blocks.iter().enumerate() {
        if b.len() < w {
            return Err(Error::WindowTooLarge {
                window: w,
                block: bi,
                len: b.len(),
            });
        }
    }
    let total: usize = ds.blocks.iter().map(|b| cfg.starts(b.len()).count()).sum();
    let mut features = Array2::zeros((total, w * d));
    let mut labels = Vec::with_capacity(total);
    let mut block = Vec::with_capacity(total);
    let mut start = Vec::with_capacity(total);
    let mut r = 0;
    for (bi, b) in ds.blocks.iter().enumerate() {
        for s0 in cfg.starts(b.len()) {
            let mut row = features.row_mut(r);
            flatten_window(b, s0, w, row.as_slice_mut().expect("standard layout"));
            labels.push(window_label(&b.labels[s0..s0 + w], cfg.label_rule));
            block.push(bi);
            start.push(s0);
            r += 1;
        }
    }
    Ok(Windows {
        features,
        labels,
        block,
        start,
    })
}

/// One conditioning step of a preprocessing plan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "step", rename_all = "snake_case")]
pub enum PreprocessStep {
    Rls {
        /// Name of the reference channel (an accelerometer axis by convention).
        reference: String,
        #[serde(flatten)]
        cfg: RlsConfig,
    },
    Ssa(SsaConfig),
    Outlier(OutlierConfig),
}

/// Ordered steps per modality, then a uniform resample of every channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessPlan {
    pub steps: BTreeMap<Modality, Vec<PreprocessStep>>,
    pub target_rate: f64,
}

impl PreprocessPlan {
    /// PPG: RLS against the first ACC channel, then SSA. ACC: SSA.
    /// HR, GSR and ST: outlier filtering.
    pub fn default_for(schema: &crate::dataset::ChannelSchema) -> PreprocessPlan {
        let mut steps = BTreeMap::new();
        let acc = schema
            .channels()
            .iter()
            .find(|c| c.modality == Modality::Acc)
            .map(|c| c.name.clone());
        let mut ppg = Vec::new();
        if let Some(reference) = acc {
            ppg.push(PreprocessStep::Rls {
                reference,
                cfg: RlsConfig::default(),
            });
        }
        ppg.push(PreprocessStep::Ssa(SsaConfig::default()));
        steps.insert(Modality::Ppg, ppg);
        steps.insert(Modality::Acc, vec![PreprocessStep::Ssa(SsaConfig::default())]);
        for m in [Modality::Hr, Modality::Gsr, Modality::St] {
            steps.insert(m, vec![PreprocessStep::Outlier(OutlierConfig::default())]);
        }
        PreprocessPlan {
            steps,
            target_rate: TARGET_RATE,
        }
    }
}

/// What was applied to which channel, for the provenance sidecar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AppliedStep {
    pub block: usize,
    pub channel: String,
    pub step: PreprocessStep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub from_rate: f64,
    pub to_rate: f64,
    pub applied: Vec<AppliedStep>,
}

/// Runs the plan on every channel of every block, then resamples to the plan's rate.
///
/// Steps run on the raw signals; RLS references are read before any step touches them.
pub fn apply_plan(ds: &SensorDataset, plan: &PreprocessPlan) -> Result<(SensorDataset, Provenance)> {
    let mut applied = Vec::new();
    let mut blocks = Vec::with_capacity(ds.blocks.len());
    for (bi, b) in ds.blocks.iter().enumerate() {
        let mut columns: Vec<Vec<f64>> = Vec::with_capacity(ds.width());
        for (c, ch) in ds.schema.channels().iter().enumerate() {
            let mut x = b.samples.column(c).to_vec();
            for step in plan.steps.get(&ch.modality).into_iter().flatten() {
                x = match step {
                    PreprocessStep::Rls { reference, cfg } => {
                        let rc = ds
                            .schema
                            .index_of(reference)
                            .ok_or_else(|| Error::UnknownChannel(reference.clone()))?;
                        if rc == c {
                            return Err(Error::config(format!(
                                "channel `{}` cannot be its own RLS reference",
                                ch.name
                            )));
                        }
                        rls_denoise(&x, &b.samples.column(rc).to_vec(), cfg)?
                    }
                    PreprocessStep::Ssa(cfg) => ssa_denoise(&x, cfg)?,
                    PreprocessStep::Outlier(cfg) => max_outlier_filter(&x, cfg)?,
                };
                applied.push(AppliedStep {
                    block: bi,
                    channel: ch.name.clone(),
                    step: step.clone(),
                });
            }
            columns.push(resample(&x, ds.rate, plan.target_rate)?);
        }
        let t = columns.first().map_or(0, Vec::len);
        let samples = Array2::from_shape_fn((t, columns.len()), |(i, c)| columns[c][i]);
        blocks.push(Block {
            subject_id: b.subject_id.clone(),
            samples,
            labels: resample_labels(&b.labels, ds.rate, plan.target_rate),
            origin: b.origin.clone(),
        });
    }
    let out = SensorDataset {
        domain_id: ds.domain_id.clone(),
        schema: ds.schema.clone(),
        label_set: ds.label_set.clone(),
        blocks,
        rate: plan.target_rate,
    };
    Ok((
        out,
        Provenance {
            from_rate: ds.rate,
            to_rate: plan.target_rate,
            applied,
        },
    ))
}
