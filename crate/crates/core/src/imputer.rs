//! Regression imputers from shared channels to a source's extra channels.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Block, Channel, ChannelPartition, ChannelSchema, ChannelStats, GroupLevel, IndexRange, SensorDataset};
use crate::error::{Error, Result};
use crate::nn::{self, Activation, DenseNet, MlpSpec, TrainConfig};
use crate::preprocess::{flatten_window, windowize, WindowConfig};

/// Settings shared by fitting and applying an imputer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImputerConfig {
    pub train: TrainConfig,
    pub window: WindowConfig,
    pub net: MlpSpec,
    /// Standardize the target's shared channels with target statistics and
    /// put batch-norm layers inside the imputer. When off, target inputs are
    /// scaled with the source's statistics.
    pub use_batchnorm: bool,
    /// Fraction of every source block's tail held out for reconstruction MSE.
    pub holdout_fraction: f64,
    pub level: GroupLevel,
}

impl Default for ImputerConfig {
    fn default() -> Self {
        ImputerConfig {
            train: TrainConfig::default(),
            window: WindowConfig::default(),
            net: MlpSpec::default(),
            use_batchnorm: true,
            holdout_fraction: 0.1,
            level: GroupLevel::Channel,
        }
    }
}

/// A fitted mapping from shared-channel windows to extra-channel windows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Imputer {
    pub source_domain_id: String,
    pub shared_channels: Vec<String>,
    /// Output channels in source order, carrying source modality tags.
    pub generated_channels: Vec<Channel>,
    pub net: DenseNet,
    /// Source statistics of the shared channels at fit time.
    pub alignment: Vec<ChannelStats>,
    /// Source statistics of the generated channels; outputs are restored with these.
    pub output_stats: Vec<ChannelStats>,
    pub window: WindowConfig,
    pub align_target: bool,
    /// Standardized MSE on the held-out source tail, when one existed.
    pub holdout_mse: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ImputerHeader {
    source_domain_id: String,
    shared_channels: Vec<String>,
    generated_channels: Vec<Channel>,
    alignment: Vec<ChannelStats>,
    output_stats: Vec<ChannelStats>,
    window: WindowConfig,
    align_target: bool,
    holdout_mse: Option<f64>,
}

fn standardized(ds: &SensorDataset, stats: &[ChannelStats]) -> SensorDataset {
    let mut out = ds.clone();
    for b in &mut out.blocks {
        for (c, st) in stats.iter().enumerate() {
            b.samples.column_mut(c).mapv_inplace(|v| st.standardize(v));
        }
    }
    out
}

fn stats_of(ds: &SensorDataset) -> Vec<ChannelStats> {
    crate::dataset::channel_stats(ds)
}

/// Splits every block into a leading fit part and a trailing holdout part.
/// Blocks too short to give a window on both sides stay whole in the fit part.
fn tail_split(ds: &SensorDataset, fraction: f64, window: usize) -> (SensorDataset, SensorDataset) {
    let mut fit = Vec::new();
    let mut hold = Vec::new();
    for (bi, b) in ds.blocks.iter().enumerate() {
        let t = b.len();
        let k = (fraction * t as f64 + 1e-9).floor() as usize;
        if k >= window && t - k >= window {
            fit.push(b.slice(bi, IndexRange::new(0, t - k)));
            hold.push(b.slice(bi, IndexRange::new(t - k, t)));
        } else {
            fit.push(b.clone());
        }
    }
    let side = |blocks| SensorDataset {
        blocks,
        ..ds.clone()
    };
    (side(fit), side(hold))
}

fn usable(ds: &SensorDataset, window: usize) -> SensorDataset {
    SensorDataset {
        blocks: ds.blocks.iter().filter(|b| b.len() >= window).cloned().collect(),
        ..ds.clone()
    }
}

fn mean_sq(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a - b).mapv(|v| v * v).mean().unwrap_or(0.0)
}

/// Channels of `source` the imputer would read and write for `target_schema`.
pub fn imputer_partition(target_schema: &ChannelSchema, source: &ChannelSchema, level: GroupLevel) -> Result<ChannelPartition> {
    ChannelPartition::compute(target_schema, source, level)
}

/// Trains an imputer on `source` for a target with `target_schema`.
pub fn fit_imputer(source: &SensorDataset, target_schema: &ChannelSchema, cfg: &ImputerConfig) -> Result<Imputer> {
    let part = imputer_partition(target_schema, &source.schema, cfg.level)?;
    if part.shared.is_empty() {
        return Err(Error::NoSharedChannels {
            target: "target".into(),
            source_domain: source.domain_id.clone(),
        });
    }
    if part.extra.is_empty() {
        return Err(Error::NoExtraChannels(source.domain_id.clone()));
    }
    fit_on_channels(source, &part.shared, &part.extra, cfg)
}

/// Trains an imputer from the named `shared` source channels to `extra`.
pub fn fit_on_channels(source: &SensorDataset, shared: &[String], extra: &[String], cfg: &ImputerConfig) -> Result<Imputer> {
    cfg.window.check()?;
    if !(0.0..1.0).contains(&cfg.holdout_fraction) {
        return Err(Error::config("holdout_fraction must lie in [0, 1)"));
    }
    let w = cfg.window.window_samples;
    let inputs = source.select_channels(shared)?;
    let outputs = source.select_channels(extra)?;
    let (fit_in, hold_in) = tail_split(&inputs, cfg.holdout_fraction, w);
    let (fit_out, hold_out) = tail_split(&outputs, cfg.holdout_fraction, w);
    let alignment = stats_of(&fit_in);
    let output_stats = stats_of(&fit_out);
    let x = windowize(&usable(&standardized(&fit_in, &alignment), w), &cfg.window)?;
    let y = windowize(&usable(&standardized(&fit_out, &output_stats), w), &cfg.window)?;
    if x.is_empty() {
        return Err(Error::TooFewSamples { needed: w, got: source.blocks.iter().map(Block::len).max().unwrap_or(0) });
    }
    let spec = MlpSpec {
        batch_norm: cfg.use_batchnorm,
        ..cfg.net.clone()
    };
    let net = DenseNet::mlp(&spec, x.features.ncols(), y.features.ncols(), Activation::Identity, cfg.train.seed)?;
    let (net, _) = nn::train_regressor(net, x.features.view(), y.features.view(), &cfg.train)?;
    let holdout_mse = if hold_in.blocks.is_empty() {
        None
    } else {
        let hx = windowize(&standardized(&hold_in, &alignment), &cfg.window)?;
        let hy = windowize(&standardized(&hold_out, &output_stats), &cfg.window)?;
        Some(mean_sq(&net.forward(hx.features.view())?, &hy.features))
    };
    let generated_channels = extra
        .iter()
        .map(|n| source.schema.get(n).cloned().expect("selected above"))
        .collect();
    Ok(Imputer {
        source_domain_id: source.domain_id.clone(),
        shared_channels: shared.to_vec(),
        generated_channels,
        net,
        alignment,
        output_stats,
        window: cfg.window,
        align_target: cfg.use_batchnorm,
        holdout_mse,
    })
}

impl Imputer {
    pub fn generated_names(&self) -> Vec<String> {
        self.generated_channels.iter().map(|c| c.name.clone()).collect()
    }

    /// Input statistics used on a dataset whose own statistics are `own`.
    fn input_stats<'a>(&'a self, own: &'a [ChannelStats]) -> &'a [ChannelStats] {
        if self.align_target {
            own
        } else {
            &self.alignment
        }
    }

    /// Predicts the generated channels for every block of `ds`, which must
    /// contain the shared channels. `target_stats` are the statistics used to
    /// standardize the shared inputs when target alignment is on; `None`
    /// computes them from `ds` itself.
    pub fn predict(&self, ds: &SensorDataset, target_stats: Option<&[ChannelStats]>) -> Result<Vec<Array2<f64>>> {
        let inputs = ds.select_channels(&self.shared_channels)?;
        let own;
        let stats = match target_stats {
            Some(s) => {
                if s.len() != self.shared_channels.len() {
                    return Err(Error::WidthMismatch {
                        left: s.len(),
                        right: self.shared_channels.len(),
                    });
                }
                self.input_stats(s)
            }
            None => {
                own = stats_of(&inputs);
                self.input_stats(&own)
            }
        };
        let inputs = standardized(&inputs, stats);
        let w = self.window.window_samples;
        let d_in = self.shared_channels.len();
        let d_out = self.generated_channels.len();
        let mut result = Vec::with_capacity(inputs.blocks.len());
        for block in &inputs.blocks {
            let t = block.len();
            let padded;
            let source_block = if t < w {
                // repeat the last sample so short blocks still fill one window
                let mut s = Array2::zeros((w, d_in));
                for i in 0..w {
                    s.row_mut(i).assign(&block.samples.row(i.min(t - 1)));
                }
                padded = Block::new(block.subject_id.clone(), s, vec![0; w]);
                &padded
            } else {
                block
            };
            let len = source_block.len();
            let mut starts: Vec<usize> = self.window.starts(len).collect();
            if starts.last().is_none_or(|&s| s + w < len) {
                starts.push(len - w);
            }
            let mut rows = Array2::zeros((starts.len(), w * d_in));
            for (r, &s0) in starts.iter().enumerate() {
                flatten_window(source_block, s0, w, rows.row_mut(r).as_slice_mut().expect("standard layout"));
            }
            let pred = self.net.forward(rows.view())?;
            let mut sum = Array2::<f64>::zeros((len, d_out));
            let mut count = vec![0usize; len];
            for (r, &s0) in starts.iter().enumerate() {
                for i in 0..w {
                    count[s0 + i] += 1;
                    for c in 0..d_out {
                        sum[[s0 + i, c]] += pred[[r, c * w + i]];
                    }
                }
            }
            let mut out = Array2::zeros((t, d_out));
            for i in 0..t {
                for c in 0..d_out {
                    out[[i, c]] = self.output_stats[c].restore(sum[[i, c]] / count[i] as f64);
                }
            }
            result.push(out);
        }
        Ok(result)
    }

    /// Appends the generated channels to `target`, tagged with the source id.
    /// Existing channels and labels are copied unchanged.
    pub fn apply(&self, target: &SensorDataset, target_stats: Option<&[ChannelStats]>) -> Result<SensorDataset> {
        let preds = self.predict(target, target_stats)?;
        let extra = self
            .generated_channels
            .iter()
            .map(|c| Channel {
                generated_from: Some(self.source_domain_id.clone()),
                ..c.clone()
            })
            .collect();
        let schema = target.schema.with_appended(extra)?;
        let blocks = target
            .blocks
            .iter()
            .zip(preds)
            .map(|(b, p)| Block {
                samples: ndarray::concatenate(Axis(1), &[b.samples.view(), p.view()]).expect("equal lengths"),
                ..b.clone()
            })
            .collect();
        Ok(SensorDataset {
            schema,
            blocks,
            ..target.clone()
        })
    }

    /// Statistics of the shared channels of `ds`, for [`Imputer::apply`].
    pub fn shared_stats(&self, ds: &SensorDataset) -> Result<Vec<ChannelStats>> {
        Ok(stats_of(&ds.select_channels(&self.shared_channels)?))
    }

    pub fn input_fingerprint(&self) -> String {
        shared_fingerprint(&self.shared_channels)
    }

    fn header(&self) -> ImputerHeader {
        ImputerHeader {
            source_domain_id: self.source_domain_id.clone(),
            shared_channels: self.shared_channels.clone(),
            generated_channels: self.generated_channels.clone(),
            alignment: self.alignment.clone(),
            output_stats: self.output_stats.clone(),
            window: self.window,
            align_target: self.align_target,
            holdout_mse: self.holdout_mse,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        nn::save_model(path, &self.net, &self.input_fingerprint(), &self.header())
    }

    /// Loads an imputer; `expected_shared` rejects files fitted on other inputs.
    pub fn load(path: &Path, expected_shared: Option<&[String]>) -> Result<Imputer> {
        let expected = expected_shared.map(shared_fingerprint);
        let (net, h, _) = nn::load_model::<ImputerHeader>(path, expected.as_deref())?;
        let w = h.window.window_samples;
        if net.input_dim() != w * h.shared_channels.len() || net.output_dim() != w * h.generated_channels.len() {
            return Err(Error::MalformedModel("network shape disagrees with channel lists".into()));
        }
        Ok(Imputer {
            source_domain_id: h.source_domain_id,
            shared_channels: h.shared_channels,
            generated_channels: h.generated_channels,
            net,
            alignment: h.alignment,
            output_stats: h.output_stats,
            window: h.window,
            align_target: h.align_target,
            holdout_mse: h.holdout_mse,
        })
    }
}

/// Fingerprint of an ordered list of input channel names.
pub(crate) fn shared_fingerprint(names: &[String]) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    for n in names {
        hasher.update(n.as_bytes());
        hasher.update([0u8]);
    }
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Imputes the source's extra channels onto `target` (identity when the
/// source adds nothing). Target-side statistics come from `target` itself.
pub fn sensor_impute(target: &SensorDataset, source: &SensorDataset, cfg: &ImputerConfig) -> Result<SensorDataset> {
    let part = imputer_partition(&target.schema, &source.schema, cfg.level)?;
    if part.shared.is_empty() {
        return Err(Error::NoSharedChannels {
            target: target.domain_id.clone(),
            source_domain: source.domain_id.clone(),
        });
    }
    if part.extra.is_empty() {
        return Ok(target.clone());
    }
    let imputer = fit_on_channels(source, &part.shared, &part.extra, cfg)?;
    imputer.apply(target, None)
}

/// Per-channel and aggregate MSE of an imputer against true channels, in the
/// standardized space of the imputer's output statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImputeReport {
    pub per_channel: Vec<(String, f64)>,
    pub mean: f64,
}

/// Scores `imputer` on `holdout`, which must carry the shared channels and the
/// true generated channels. Inputs are scaled with the source statistics.
pub fn impute_report(imputer: &Imputer, holdout: &SensorDataset) -> Result<ImputeReport> {
    for c in &imputer.generated_channels {
        if !holdout.schema.contains(&c.name) {
            return Err(Error::MissingTruthChannels(c.name.clone()));
        }
    }
    let source_side = Imputer {
        align_target: false,
        ..imputer.clone()
    };
    let preds = source_side.predict(holdout, None)?;
    let truth = holdout.select_channels(&imputer.generated_names())?;
    let mut per_channel = Vec::new();
    for (c, ch) in imputer.generated_channels.iter().enumerate() {
        let st = imputer.output_stats[c];
        let (mut sum, mut n) = (0.0, 0usize);
        for (p, b) in preds.iter().zip(&truth.blocks) {
            for (pv, tv) in p.column(c).iter().zip(b.samples.column(c)) {
                let e = st.standardize(*pv) - st.standardize(*tv);
                sum += e * e;
                n += 1;
            }
        }
        per_channel.push((ch.name.clone(), sum / n.max(1) as f64));
    }
    let mean = per_channel.iter().map(|(_, v)| v).sum::<f64>() / per_channel.len().max(1) as f64;
    Ok(ImputeReport { per_channel, mean })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    /// Adds noise on top of the channel.
    AdditiveGaussian,
    /// Replaces the channel with noise.
    PureGaussian,
}

/// Gaussian corruption with σ = 2·max|reference| unless `sigma` is given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub seed: u64,
    /// Channel whose original values set the scale; each corrupted channel
    /// is its own reference when absent.
    #[serde(default)]
    pub reference: Option<String>,
    #[serde(default)]
    pub sigma: Option<f64>,
}

impl NoiseSpec {
    pub fn new(kind: NoiseKind, seed: u64) -> Self {
        NoiseSpec {
            kind,
            seed,
            reference: None,
            sigma: None,
        }
    }
}

fn twice_max_abs(ds: &SensorDataset, name: &str) -> Result<f64> {
    Ok(2.0 * ds.channel_values(name)?.iter().fold(0.0f64, |m, v| m.max(v.abs())))
}

/// Corrupts the named channels with seeded Gaussian noise.
pub fn add_gaussian_noise<S: AsRef<str>>(ds: &SensorDataset, channels: &[S], spec: &NoiseSpec) -> Result<SensorDataset> {
    let mut seen = BTreeSet::new();
    let mut targets = Vec::new();
    for name in channels {
        let name = name.as_ref();
        let idx = ds.schema.index_of(name).ok_or_else(|| Error::UnknownChannel(name.into()))?;
        if seen.insert(idx) {
            let sigma = match (spec.sigma, &spec.reference) {
                (Some(s), _) => s,
                (None, Some(r)) => twice_max_abs(ds, r)?,
                (None, None) => twice_max_abs(ds, name)?,
            };
            if !(sigma >= 0.0 && sigma.is_finite()) {
                return Err(Error::config(format!("noise scale {sigma} is not a nonnegative number")));
            }
            targets.push((idx, sigma));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = ds.clone();
    for b in &mut out.blocks {
        for t in 0..b.len() {
            for &(c, sigma) in &targets {
                let z = unit.sample(&mut rng) * sigma;
                let v = &mut b.samples[[t, c]];
                *v = match spec.kind {
                    NoiseKind::AdditiveGaussian => *v + z,
                    NoiseKind::PureGaussian => z,
                };
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{LabelSet, Modality};
    use ndarray::array;

    fn tiny(values: Array2<f64>, names: &[(&str, Modality)]) -> SensorDataset {
        let schema = ChannelSchema::from_tags(&names.iter().map(|&(n, m)| (n, m, 32.0)).collect::<Vec<_>>()).unwrap();
        let t = values.nrows();
        SensorDataset::new("D", schema, LabelSet::default(), vec![Block::new("s", values, vec![0; t])], 32.0).unwrap()
    }

    #[test]
    fn noise_scale_examples() {
        let ds = tiny(Array2::zeros((10, 1)), &[("A", Modality::Hr)]);
        let out = add_gaussian_noise(&ds, &["A"], &NoiseSpec::new(NoiseKind::AdditiveGaussian, 1)).unwrap();
        assert_eq!(out, ds);
        let n = 100_000;
        let mut v = Array2::zeros((n, 1));
        v[[0, 0]] = -1.5;
        let ds = tiny(v, &[("A", Modality::Hr)]);
        let out = add_gaussian_noise(&ds, &["A"], &NoiseSpec::new(NoiseKind::PureGaussian, 2)).unwrap();
        let st = ChannelStats::of(out.channel_values("A").unwrap());
        assert!((st.std - 3.0).abs() / 3.0 < 0.02, "{}", st.std);
        let again = add_gaussian_noise(&ds, &["A"], &NoiseSpec::new(NoiseKind::PureGaussian, 2)).unwrap();
        assert_eq!(out, again);
        assert!(matches!(
            add_gaussian_noise(&ds, &["B"], &NoiseSpec::new(NoiseKind::PureGaussian, 2)),
            Err(Error::UnknownChannel(_))
        ));
    }

    #[test]
    fn fit_requires_shared_and_extra() {
        let src = tiny(array![[1.0, 2.0], [2.0, 3.0]], &[("A", Modality::Hr), ("B", Modality::Eeg)]);
        let disjoint = ChannelSchema::from_tags(&[("C", Modality::Gsr, 32.0)]).unwrap();
        assert!(matches!(
            fit_imputer(&src, &disjoint, &ImputerConfig::default()),
            Err(Error::NoSharedChannels { .. })
        ));
        let same = src.schema.clone();
        assert!(matches!(fit_imputer(&src, &same, &ImputerConfig::default()), Err(Error::NoExtraChannels(_))));
    }

    #[test]
    fn nothing_to_add_is_identity() {
        let target = tiny(array![[1.0, 2.0], [2.0, 3.0]], &[("A", Modality::Hr), ("B", Modality::Eeg)]);
        let source = tiny(array![[1.0], [2.0]], &[("A", Modality::Hr)]);
        assert_eq!(sensor_impute(&target, &source, &ImputerConfig::default()).unwrap(), target);
    }
}
