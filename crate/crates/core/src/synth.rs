//! Seeded multi-domain generator with a latent fatigue label.
//!
//! Every channel is a response function of the label plus independent
//! Gaussian noise. Domains expose subsets of the channels; the target's
//! unexposed channels are returned as ground truth.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as StdNormal};

use crate::dataset::{Block, Channel, ChannelSchema, LabelSet, Modality, SensorDataset};
use crate::error::{Error, Result};

/// Noise-free part of a channel as a function of the label index `y` and
/// earlier channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Response {
    /// `offset + gain·y`.
    Affine { offset: f64, gain: f64 },
    /// `offset + gain·y + Σ coef·channel`, over earlier channels.
    Linear {
        offset: f64,
        gain: f64,
        terms: Vec<(String, f64)>,
    },
    /// `scale · Π channel`, over earlier channels. No closed-form oracle.
    Product { factors: Vec<String>, scale: f64 },
    /// ±1 with equal probability, independent of the label.
    RandomSign,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSpec {
    pub name: String,
    pub modality: Modality,
    pub response: Response,
    pub noise_std: f64,
}

impl ChannelSpec {
    pub fn affine(name: &str, modality: Modality, offset: f64, gain: f64, noise_std: f64) -> Self {
        ChannelSpec {
            name: name.into(),
            modality,
            response: Response::Affine { offset, gain },
            noise_std,
        }
    }
}

/// Per-channel `scale·v + offset` applied to one domain's readings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceShift {
    pub scale: f64,
    pub offset: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainLayout {
    pub domain_id: String,
    pub channels: Vec<String>,
    /// Overrides the config-wide subject count.
    #[serde(default)]
    pub subjects: Option<usize>,
    /// Overrides the config-wide block length.
    #[serde(default)]
    pub block_length: Option<usize>,
    #[serde(default)]
    pub shift: BTreeMap<String, DeviceShift>,
}

impl DomainLayout {
    pub fn new(domain_id: &str, channels: &[&str]) -> Self {
        DomainLayout {
            domain_id: domain_id.into(),
            channels: channels.iter().map(|s| s.to_string()).collect(),
            subjects: None,
            block_length: None,
            shift: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub labels: usize,
    pub channels: Vec<ChannelSpec>,
    pub subjects: usize,
    pub block_length: usize,
    /// Probability of keeping the current label at each step.
    pub persistence: f64,
    pub rate: f64,
    pub seed: u64,
    pub target: DomainLayout,
    pub sources: Vec<DomainLayout>,
    /// Window length the oracle scores (one label per window).
    #[serde(default = "one")]
    pub oracle_window: usize,
}

fn one() -> usize {
    1
}

/// Target, sources, and the target's hidden channels on the target's time grid.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiDomain {
    pub target: SensorDataset,
    pub sources: Vec<SensorDataset>,
    pub hidden_truth: SensorDataset,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidLayout(m));
        if self.labels < 2 {
            return bad("need at least two labels".into());
        }
        if !(self.persistence > 0.0 && self.persistence <= 1.0) {
            return bad(format!("persistence {} outside (0, 1]", self.persistence));
        }
        if self.subjects == 0 || self.block_length == 0 || self.oracle_window == 0 {
            return bad("subjects, block_length and oracle_window must be positive".into());
        }
        if !(self.rate > 0.0) {
            return bad("rate must be positive".into());
        }
        let mut seen = BTreeSet::new();
        for ch in &self.channels {
            if !(ch.noise_std > 0.0 && ch.noise_std.is_finite()) {
                return bad(format!("channel `{}` needs a positive noise std", ch.name));
            }
            let refs: Vec<&String> = match &ch.response {
                Response::Linear { terms, .. } => terms.iter().map(|(n, _)| n).collect(),
                Response::Product { factors, .. } => factors.iter().collect(),
                _ => Vec::new(),
            };
            for r in refs {
                if !seen.contains(r.as_str()) {
                    return bad(format!("channel `{}` refers to `{r}`, which is not defined earlier", ch.name));
                }
            }
            if !seen.insert(ch.name.as_str()) {
                return bad(format!("duplicate channel `{}`", ch.name));
            }
        }
        let mut exposed = BTreeSet::new();
        for layout in std::iter::once(&self.target).chain(&self.sources) {
            for c in &layout.channels {
                if !seen.contains(c.as_str()) {
                    return bad(format!("domain `{}` exposes unknown channel `{c}`", layout.domain_id));
                }
                exposed.insert(c.as_str());
            }
            for c in layout.shift.keys() {
                if !layout.channels.contains(c) {
                    return bad(format!("domain `{}` shifts unexposed channel `{c}`", layout.domain_id));
                }
            }
        }
        for layout in &self.sources {
            if !layout.channels.iter().any(|c| self.target.channels.contains(c)) {
                return bad(format!("domain `{}` shares no channel with the target", layout.domain_id));
            }
        }
        if let Some(orphan) = self.channels.iter().find(|c| !exposed.contains(c.name.as_str())) {
            return bad(format!("channel `{}` is exposed in no domain", orphan.name));
        }
        Ok(())
    }

    fn channel_index(&self, name: &str) -> usize {
        self.channels.iter().position(|c| c.name == name).expect("validated")
    }

    fn schema_for(&self, names: &[String]) -> Result<ChannelSchema> {
        ChannelSchema::new(
            names
                .iter()
                .map(|n| {
                    let spec = &self.channels[self.channel_index(n)];
                    Channel::new(n.clone(), spec.modality, self.rate)
                })
                .collect(),
        )
    }
}

fn label_chain(rng: &mut ChaCha8Rng, k: usize, len: usize, persistence: f64) -> Vec<usize> {
    let mut out = Vec::with_capacity(len);
    let mut y = rng.random_range(0..k);
    for _ in 0..len {
        out.push(y);
        if rng.random::<f64>() >= persistence {
            // move to a uniformly chosen different label
            let step = rng.random_range(1..k);
            y = (y + step) % k;
        }
    }
    out
}

/// All channels, `len × channels`, for one label sequence.
fn sample_channels(cfg: &SynthConfig, labels: &[usize], rng: &mut ChaCha8Rng) -> Array2<f64> {
    let d = cfg.channels.len();
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = Array2::zeros((labels.len(), d));
    for (t, &y) in labels.iter().enumerate() {
        for (c, spec) in cfg.channels.iter().enumerate() {
            let y = y as f64;
            let clean = match &spec.response {
                Response::Affine { offset, gain } => offset + gain * y,
                Response::Linear { offset, gain, terms } => {
                    offset + gain * y + terms.iter().map(|(n, w)| w * out[[t, cfg.channel_index(n)]]).sum::<f64>()
                }
                Response::Product { factors, scale } => {
                    scale * factors.iter().map(|n| out[[t, cfg.channel_index(n)]]).product::<f64>()
                }
                Response::RandomSign => {
                    if rng.random::<bool>() {
                        1.0
                    } else {
                        -1.0
                    }
                }
            };
            out[[t, c]] = clean + spec.noise_std * std_normal.sample(rng);
        }
    }
    out
}

struct Carved {
    exposed: SensorDataset,
    hidden: SensorDataset,
}

fn carve(cfg: &SynthConfig, layout: &DomainLayout, stream: u64) -> Result<Carved> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let subjects = layout.subjects.unwrap_or(cfg.subjects);
    let len = layout.block_length.unwrap_or(cfg.block_length);
    let exposed_idx: Vec<usize> = layout.channels.iter().map(|n| cfg.channel_index(n)).collect();
    let hidden_names: Vec<String> = cfg
        .channels
        .iter()
        .filter(|c| !layout.channels.contains(&c.name))
        .map(|c| c.name.clone())
        .collect();
    let hidden_idx: Vec<usize> = hidden_names.iter().map(|n| cfg.channel_index(n)).collect();
    let mut exposed_blocks = Vec::with_capacity(subjects);
    let mut hidden_blocks = Vec::with_capacity(subjects);
    for s in 0..subjects {
        let labels = label_chain(&mut rng, cfg.labels, len, cfg.persistence);
        let all = sample_channels(cfg, &labels, &mut rng);
        let mut exposed = all.select(ndarray::Axis(1), &exposed_idx);
        for (j, name) in layout.channels.iter().enumerate() {
            if let Some(sh) = layout.shift.get(name) {
                exposed.column_mut(j).mapv_inplace(|v| sh.scale * v + sh.offset);
            }
        }
        let subject = format!("{}-s{s:03}", layout.domain_id);
        hidden_blocks.push(Block::new(subject.clone(), all.select(ndarray::Axis(1), &hidden_idx), labels.clone()));
        exposed_blocks.push(Block::new(subject, exposed, labels));
    }
    let label_set = LabelSet::indexed(cfg.labels)?;
    Ok(Carved {
        exposed: SensorDataset::new(
            layout.domain_id.clone(),
            cfg.schema_for(&layout.channels)?,
            label_set.clone(),
            exposed_blocks,
            cfg.rate,
        )?,
        hidden: SensorDataset {
            domain_id: layout.domain_id.clone(),
            schema: cfg.schema_for(&hidden_names)?,
            label_set,
            blocks: hidden_blocks,
            rate: cfg.rate,
        },
    })
}

/// Generates the target, the sources, and the target's hidden channels.
/// Each domain draws its own subjects from an independent seeded stream.
pub fn generate_multidomain(cfg: &SynthConfig) -> Result<MultiDomain> {
    cfg.validate()?;
    let target = carve(cfg, &cfg.target, 0)?;
    let sources = cfg
        .sources
        .iter()
        .enumerate()
        .map(|(i, l)| carve(cfg, l, i as u64 + 1).map(|c| c.exposed))
        .collect::<Result<Vec<_>>>()?;
    Ok(MultiDomain {
        target: target.exposed,
        sources,
        hidden_truth: target.hidden,
    })
}

/// Bayes-optimal accuracy of classifying a label held constant over
/// `oracle_window` samples from the target's exposed channels, under a
/// uniform label prior.
///
/// Class means lie on a line (`offset + gain·y` propagated through the
/// linear terms), so the optimal rule thresholds the projection onto the
/// discriminant direction and the accuracy depends only on the Mahalanobis
/// distance `d` between adjacent classes:
/// `[2Φ(d/2) + (K−2)(2Φ(d/2) − 1)] / K`.
pub fn oracle_bayes_accuracy(cfg: &SynthConfig) -> Result<f64> {
    cfg.validate()?;
    let d = cfg.channels.len();
    // v = A v + g·y + offsets + ε  ⇒  v = (I − A)⁻¹(g·y + offsets + ε)
    let mut a = DMatrix::<f64>::zeros(d, d);
    let mut gain = DVector::<f64>::zeros(d);
    for (c, spec) in cfg.channels.iter().enumerate() {
        match &spec.response {
            Response::Affine { gain: g, .. } => gain[c] = *g,
            Response::Linear { gain: g, terms, .. } => {
                gain[c] = *g;
                for (n, w) in terms {
                    a[(c, cfg.channel_index(n))] += w;
                }
            }
            _ => {
                return Err(Error::UnsupportedResponse(format!(
                    "channel `{}` is not affine in the label",
                    spec.name
                )));
            }
        }
    }
    let inv = (DMatrix::identity(d, d) - a)
        .try_inverse()
        .ok_or_else(|| Error::UnsupportedResponse("linear terms are singular".into()))?;
    let noise = DMatrix::from_diagonal(&DVector::from_iterator(d, cfg.channels.iter().map(|c| c.noise_std * c.noise_std)));
    let mean_step = &inv * gain;
    let cov = &inv * noise * inv.transpose();
    let idx: Vec<usize> = cfg.target.channels.iter().map(|n| cfg.channel_index(n)).collect();
    let mut scale = DVector::from_element(d, 1.0);
    for (name, sh) in &cfg.target.shift {
        scale[cfg.channel_index(name)] = sh.scale;
    }
    let m = DVector::from_iterator(idx.len(), idx.iter().map(|&i| mean_step[i] * scale[i]));
    let s = DMatrix::from_fn(idx.len(), idx.len(), |r, c| cov[(idx[r], idx[c])] * scale[idx[r]] * scale[idx[c]]);
    let s_inv = s
        .try_inverse()
        .ok_or_else(|| Error::UnsupportedResponse("exposed covariance is singular".into()))?;
    let d2 = cfg.oracle_window as f64 * (m.transpose() * s_inv * &m)[(0, 0)];
    let k = cfg.labels as f64;
    let phi = StdNormal::new(0.0, 1.0).expect("unit normal").cdf(d2.max(0.0).sqrt() / 2.0);
    Ok((2.0 * phi + (k - 2.0) * (2.0 * phi - 1.0)) / k)
}

/// Ready-made configurations for the experiment protocols.
///
/// The product designs hide a label-informative channel `E` behind
/// `A = E·B₁·…·B_k` with random signs `Bᵢ`: the shared channels determine
/// `E` exactly, but only through a parity-like interaction that a regressor
/// trained on plentiful source data learns far more easily than a detector
/// trained on scarce target labels.
pub mod presets {
    use super::*;

    const SIGN_FACTORS: usize = 3;
    const SIGN_NOISE: f64 = 0.01;

    /// Adds `E{tag}`, `B{tag}0..`, `A{tag}` and returns the shared names (`B…`, `A…`).
    fn product_group(tag: &str, gain: f64, channels: &mut Vec<ChannelSpec>) -> Vec<String> {
        let e = format!("E{tag}");
        channels.push(ChannelSpec::affine(&e, Modality::Eeg, -gain / 2.0, gain, 1.0));
        let mut factors = vec![e];
        let mut shared = Vec::new();
        for i in 0..SIGN_FACTORS {
            let b = format!("B{tag}{i}");
            channels.push(ChannelSpec {
                name: b.clone(),
                modality: Modality::Acc,
                response: Response::RandomSign,
                noise_std: SIGN_NOISE,
            });
            factors.push(b.clone());
            shared.push(b);
        }
        let a = format!("A{tag}");
        channels.push(ChannelSpec {
            name: a.clone(),
            modality: Modality::Ppg,
            response: Response::Product { factors, scale: 1.0 },
            noise_std: SIGN_NOISE,
        });
        shared.push(a);
        shared
    }

    fn layout(id: &str, names: &[String], subjects: Option<usize>, len: Option<usize>) -> DomainLayout {
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        DomainLayout {
            subjects,
            block_length: len,
            ..DomainLayout::new(id, &refs)
        }
    }

    /// Target with one masked-and-restorable channel `E1` plus a weak
    /// channel `W`; one large source exposing everything.
    pub fn noise_baseline(seed: u64) -> SynthConfig {
        let mut channels = Vec::new();
        let mut names = vec!["E1".to_string()];
        names.extend(product_group("1", 2.0, &mut channels));
        channels.push(ChannelSpec::affine("W", Modality::Hr, 0.0, 0.3, 1.0));
        names.push("W".into());
        SynthConfig {
            labels: 2,
            channels,
            subjects: 6,
            block_length: 300,
            persistence: 0.98,
            rate: 32.0,
            seed,
            target: layout("target", &names, None, None),
            sources: vec![layout("source", &names, Some(20), Some(1000))],
            oracle_window: 1,
        }
    }

    /// Target exposing `W` and two product groups; source `s1` adds `E1`,
    /// source `s2` adds `E2`. A nonzero `device_offset` rescales (×2) and
    /// offsets the target's shared channels.
    pub fn two_source(seed: u64, device_offset: f64) -> SynthConfig {
        let mut channels = vec![ChannelSpec::affine("W", Modality::Hr, 0.0, 0.3, 1.0)];
        let g1 = product_group("1", 1.5, &mut channels);
        let g2 = product_group("2", 1.5, &mut channels);
        let mut target_names = vec!["W".to_string()];
        target_names.extend(g1.iter().cloned());
        target_names.extend(g2.iter().cloned());
        let mut target = layout("target", &target_names, None, None);
        if device_offset != 0.0 {
            for n in g1.iter().chain(&g2) {
                target.shift.insert(
                    n.clone(),
                    DeviceShift {
                        scale: 2.0,
                        offset: device_offset,
                    },
                );
            }
        }
        let source = |id: &str, shared: &[String], extra: &str| {
            let mut names = shared.to_vec();
            names.push(extra.to_string());
            layout(id, &names, Some(20), Some(1000))
        };
        SynthConfig {
            labels: 2,
            channels,
            subjects: 6,
            block_length: 300,
            persistence: 0.98,
            rate: 32.0,
            seed,
            target,
            sources: vec![source("s1", &g1, "E1"), source("s2", &g2, "E2")],
            oracle_window: 1,
        }
    }

    /// Source where `EXTRA = 0.7·HR − 0.2·GSR + N(0, 0.1²)`; the target
    /// exposes only HR and GSR. Scales give `EXTRA` a variance near 1.05.
    pub fn affine_imputation(seed: u64) -> SynthConfig {
        SynthConfig {
            labels: 2,
            channels: vec![
                ChannelSpec::affine("HR", Modality::Hr, 0.0, 1.0, 1.2),
                ChannelSpec::affine("GSR", Modality::Gsr, 0.0, 1.0, 2.6),
                ChannelSpec {
                    name: "EXTRA".into(),
                    modality: Modality::Ecg,
                    response: Response::Linear {
                        offset: 0.0,
                        gain: 0.0,
                        terms: vec![("HR".into(), 0.7), ("GSR".into(), -0.2)],
                    },
                    noise_std: 0.1,
                },
            ],
            subjects: 4,
            block_length: 400,
            persistence: 0.98,
            rate: 32.0,
            seed,
            target: DomainLayout::new("target", &["HR", "GSR"]),
            sources: vec![DomainLayout {
                subjects: Some(20),
                block_length: Some(2000),
                ..DomainLayout::new("source", &["HR", "GSR", "EXTRA"])
            }],
            oracle_window: 1,
        }
    }
}
