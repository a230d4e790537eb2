//! Multi-domain sensor datasets.
//!
//! A [`SensorDataset`] is one domain's labeled recordings, organized as
//! [`Block`]s (one per participant by default). Each dataset carries a
//! [`ChannelSchema`]; the set algebra over schemas ([`common_channels`],
//! [`extra_in_source`], [`missing_in_source`]) decides which channels a source
//! can contribute to a target.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Variance guard for constant channels.
pub const NORM_EPSILON: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE", try_from = "String")]
pub enum Modality {
    Ppg,
    Gsr,
    Hr,
    St,
    Acc,
    Eye,
    Eeg,
    Ecg,
    Other,
}

impl Modality {
    pub const ALL: [Modality; 9] = [
        Modality::Ppg,
        Modality::Gsr,
        Modality::Hr,
        Modality::St,
        Modality::Acc,
        Modality::Eye,
        Modality::Eeg,
        Modality::Ecg,
        Modality::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Ppg => "PPG",
            Modality::Gsr => "GSR",
            Modality::Hr => "HR",
            Modality::St => "ST",
            Modality::Acc => "ACC",
            Modality::Eye => "EYE",
            Modality::Eeg => "EEG",
            Modality::Ecg => "ECG",
            Modality::Other => "OTHER",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl TryFrom<String> for Modality {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Modality::ALL
            .iter()
            .copied()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidSchema(format!("unknown modality tag `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Channel {
    pub name: String,
    pub modality: Modality,
    pub native_rate: f64,
    /// Domain id of the source whose imputer synthesized this channel.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generated_from: Option<String>,
}

impl Channel {
    pub fn new(name: impl Into<String>, modality: Modality, native_rate: f64) -> Self {
        Channel {
            name: name.into(),
            modality,
            native_rate,
            generated_from: None,
        }
    }

    pub fn is_generated(&self) -> bool {
        self.generated_from.is_some()
    }
}

/// Ordered, uniquely named channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Channel>", into = "Vec<Channel>")]
pub struct ChannelSchema {
    channels: Vec<Channel>,
}

impl TryFrom<Vec<Channel>> for ChannelSchema {
    type Error = Error;

    fn try_from(channels: Vec<Channel>) -> Result<Self> {
        ChannelSchema::new(channels)
    }
}

impl From<ChannelSchema> for Vec<Channel> {
    fn from(schema: ChannelSchema) -> Self {
        schema.channels
    }
}

impl ChannelSchema {
    pub fn new(channels: Vec<Channel>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for ch in &channels {
            if ch.name.is_empty() {
                return Err(Error::InvalidSchema("empty channel name".into()));
            }
            if !seen.insert(ch.name.as_str()) {
                return Err(Error::InvalidSchema(format!(
                    "duplicate channel `{}`",
                    ch.name
                )));
            }
            if !(ch.native_rate > 0.0 && ch.native_rate.is_finite()) {
                return Err(Error::InvalidSchema(format!(
                    "channel `{}` has non-positive native rate {}",
                    ch.name, ch.native_rate
                )));
            }
        }
        Ok(ChannelSchema { channels })
    }

    /// Convenience constructor used heavily in tests and configs.
    pub fn from_tags(entries: &[(&str, Modality, f64)]) -> Result<Self> {
        ChannelSchema::new(
            entries
                .iter()
                .map(|&(n, m, r)| Channel::new(n, m, r))
                .collect(),
        )
    }

    pub fn channels(&self) -> &[Channel] {
        &self.channels
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn names(&self) -> Vec<&str> {
        self.channels.iter().map(|c| c.name.as_str()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.channels.iter().position(|c| c.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Channel> {
        self.channels.iter().find(|c| c.name == name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index_of(name).is_some()
    }

    pub fn modalities(&self) -> BTreeSet<Modality> {
        self.channels.iter().map(|c| c.modality).collect()
    }

    /// Indices of the named channels, in the order given.
    pub fn indices_of<S: AsRef<str>>(&self, names: &[S]) -> Result<Vec<usize>> {
        names
            .iter()
            .map(|n| {
                self.index_of(n.as_ref())
                    .ok_or_else(|| Error::UnknownChannel(n.as_ref().to_string()))
            })
            .collect()
    }

    pub fn select<S: AsRef<str>>(&self, names: &[S]) -> Result<ChannelSchema> {
        let idx = self.indices_of(names)?;
        ChannelSchema::new(idx.into_iter().map(|i| self.channels[i].clone()).collect())
    }

    pub fn with_appended(&self, extra: Vec<Channel>) -> Result<ChannelSchema> {
        let mut channels = self.channels.clone();
        channels.extend(extra);
        ChannelSchema::new(channels)
    }

    pub fn without<S: AsRef<str>>(&self, names: &[S]) -> ChannelSchema {
        let drop: BTreeSet<&str> = names.iter().map(|n| n.as_ref()).collect();
        ChannelSchema {
            channels: self
                .channels
                .iter()
                .filter(|c| !drop.contains(c.name.as_str()))
                .cloned()
                .collect(),
        }
    }

    /// Stable hash of channel names and modality tags.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for ch in &self.channels {
            hasher.update(ch.name.as_bytes());
            hasher.update([0u8]);
            hasher.update(ch.modality.as_str().as_bytes());
            hasher.update([0u8]);
        }
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Group keys at the requested level: channel names, or modality tags.
    pub fn group_keys(&self, level: GroupLevel) -> BTreeSet<String> {
        self.channels.iter().map(|c| level.key(c)).collect()
    }
}

/// Granularity of the channel-set algebra.
///
/// At [`GroupLevel::Modality`] a multi-channel modality such as a 3-axis
/// accelerometer counts as one member, so "EEG" means every EEG-tagged channel.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupLevel {
    #[default]
    Channel,
    Modality,
}

impl GroupLevel {
    fn key(self, ch: &Channel) -> String {
        match self {
            GroupLevel::Channel => ch.name.clone(),
            GroupLevel::Modality => ch.modality.as_str().to_string(),
        }
    }
}

/// Channel names present in both schemas.
pub fn common_channels(a: &ChannelSchema, b: &ChannelSchema) -> Result<BTreeSet<String>> {
    let mut out = BTreeSet::new();
    for ca in a.channels() {
        if let Some(cb) = b.get(&ca.name) {
            if ca.modality != cb.modality {
                return Err(Error::ModalityMismatch {
                    name: ca.name.clone(),
                    left: ca.modality.to_string(),
                    right: cb.modality.to_string(),
                });
            }
            out.insert(ca.name.clone());
        }
    }
    Ok(out)
}

/// Channels the source has and the target lacks.
pub fn extra_in_source(target: &ChannelSchema, source: &ChannelSchema) -> BTreeSet<String> {
    source
        .channels()
        .iter()
        .filter(|c| !target.contains(&c.name))
        .map(|c| c.name.clone())
        .collect()
}

/// Channels the target has and the source lacks.
pub fn missing_in_source(target: &ChannelSchema, source: &ChannelSchema) -> BTreeSet<String> {
    extra_in_source(source, target)
}

/// Shared / extra / missing channels of a (target, source) pair.
///
/// `shared` and `extra` keep schema order (source order for `extra`), which is
/// the order imputers consume and emit channels in.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelPartition {
    pub shared: Vec<String>,
    pub extra: Vec<String>,
    pub missing: Vec<String>,
}

impl ChannelPartition {
    pub fn compute(target: &ChannelSchema, source: &ChannelSchema, level: GroupLevel) -> Result<Self> {
        // validates modality agreement
        common_channels(target, source)?;
        let shared = target
            .channels()
            .iter()
            .filter(|c| source.contains(&c.name))
            .map(|c| c.name.clone())
            .collect();
        let target_keys = target.group_keys(level);
        let source_keys = source.group_keys(level);
        let extra = source
            .channels()
            .iter()
            .filter(|c| !target_keys.contains(&level.key(c)))
            .map(|c| c.name.clone())
            .collect();
        let missing = target
            .channels()
            .iter()
            .filter(|c| !source_keys.contains(&level.key(c)))
            .map(|c| c.name.clone())
            .collect();
        Ok(ChannelPartition {
            shared,
            extra,
            missing,
        })
    }
}

/// Finite label set; labels are stored as indices into `names`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelSet {
    names: Vec<String>,
}

impl Default for LabelSet {
    fn default() -> Self {
        LabelSet {
            names: vec!["alert".into(), "fatigued".into()],
        }
    }
}

impl LabelSet {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.len() < 2 {
            return Err(Error::config("label set needs at least two labels"));
        }
        let unique: BTreeSet<&String> = names.iter().collect();
        if unique.len() != names.len() {
            return Err(Error::config("duplicate label names"));
        }
        Ok(LabelSet { names })
    }

    /// Labels named "0", "1", ... "k-1".
    pub fn indexed(k: usize) -> Result<Self> {
        LabelSet::new((0..k).map(|i| i.to_string()))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, idx: usize) -> Option<&str> {
        self.names.get(idx).map(String::as_str)
    }

    /// Resolve a label by name, falling back to a numeric index.
    pub fn resolve(&self, token: &str) -> Option<usize> {
        self.names
            .iter()
            .position(|n| n == token)
            .or_else(|| token.parse::<usize>().ok().filter(|&i| i < self.names.len()))
    }
}

/// Half-open index range `[start, end)` into an original block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexRange {
    pub start: usize,
    pub end: usize,
}

impl IndexRange {
    pub fn new(start: usize, end: usize) -> Self {
        IndexRange { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn overlaps(&self, other: &IndexRange) -> bool {
        self.start < other.end && other.start < self.end
    }
}

/// Where a block's rows came from, when it was carved out of a larger block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockOrigin {
    pub block: usize,
    pub range: IndexRange,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub subject_id: String,
    /// `T × D` samples at the dataset rate.
    pub samples: Array2<f64>,
    pub labels: Vec<usize>,
    pub origin: Option<BlockOrigin>,
}

impl Block {
    pub fn new(subject_id: impl Into<String>, samples: Array2<f64>, labels: Vec<usize>) -> Self {
        Block {
            subject_id: subject_id.into(),
            samples,
            labels,
            origin: None,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.nrows() == 0
    }

    pub fn width(&self) -> usize {
        self.samples.ncols()
    }

    /// Rows `range` of this block, remembering provenance.
    pub fn slice(&self, own_index: usize, range: IndexRange) -> Block {
        let base = self.origin.as_ref();
        let origin = match base {
            Some(o) => BlockOrigin {
                block: o.block,
                range: IndexRange::new(o.range.start + range.start, o.range.start + range.end),
            },
            None => BlockOrigin {
                block: own_index,
                range,
            },
        };
        Block {
            subject_id: self.subject_id.clone(),
            samples: self.samples.slice(s![range.start..range.end, ..]).to_owned(),
            labels: self.labels[range.start..range.end].to_vec(),
            origin: Some(origin),
        }
    }

    /// Provenance of the whole block, in original-block coordinates.
    pub fn extent(&self, own_index: usize) -> BlockOrigin {
        self.origin.clone().unwrap_or(BlockOrigin {
            block: own_index,
            range: IndexRange::new(0, self.len()),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SensorDataset {
    pub domain_id: String,
    pub schema: ChannelSchema,
    pub label_set: LabelSet,
    pub blocks: Vec<Block>,
    /// Uniform sample rate after resampling, in Hz.
    pub rate: f64,
}

impl SensorDataset {
    /// Builds a dataset and rejects any invariant violation.
    pub fn new(
        domain_id: impl Into<String>,
        schema: ChannelSchema,
        label_set: LabelSet,
        blocks: Vec<Block>,
        rate: f64,
    ) -> Result<Self> {
        let ds = SensorDataset {
            domain_id: domain_id.into(),
            schema,
            label_set,
            blocks,
            rate,
        };
        let violations = validate(&ds);
        if let Some(v) = violations.first() {
            return Err(Error::Data {
                path: ds.domain_id.clone().into(),
                message: format!("{} violation(s), first: {v}", violations.len()),
            });
        }
        Ok(ds)
    }

    pub fn total_len(&self) -> usize {
        self.blocks.iter().map(Block::len).sum()
    }

    pub fn width(&self) -> usize {
        self.schema.len()
    }

    /// Same dataset restricted to the named channels.
    pub fn select_channels<S: AsRef<str>>(&self, names: &[S]) -> Result<SensorDataset> {
        let idx = self.schema.indices_of(names)?;
        let schema = self.schema.select(names)?;
        let blocks = self
            .blocks
            .iter()
            .map(|b| Block {
                subject_id: b.subject_id.clone(),
                samples: b.samples.select(Axis(1), &idx),
                labels: b.labels.clone(),
                origin: b.origin.clone(),
            })
            .collect();
        Ok(SensorDataset {
            domain_id: self.domain_id.clone(),
            schema,
            label_set: self.label_set.clone(),
            blocks,
            rate: self.rate,
        })
    }

    /// Values of one channel, concatenated across blocks.
    pub fn channel_values(&self, name: &str) -> Result<Vec<f64>> {
        let c = self
            .schema
            .index_of(name)
            .ok_or_else(|| Error::UnknownChannel(name.to_string()))?;
        Ok(self
            .blocks
            .iter()
            .flat_map(|b| b.samples.column(c).to_vec())
            .collect())
    }

    pub fn all_labels(&self) -> Vec<usize> {
        self.blocks.iter().flat_map(|b| b.labels.iter().copied()).collect()
    }

    /// Distinct subject ids in first-appearance order.
    pub fn subjects(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for b in &self.blocks {
            if seen.insert(b.subject_id.as_str()) {
                out.push(b.subject_id.clone());
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub test_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { test_fraction: 0.2 }
    }
}

impl SplitConfig {
    /// Fraction of each block taken from each end.
    pub fn edge_fraction(&self) -> f64 {
        self.test_fraction / 2.0
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSplit {
    pub block: usize,
    pub subject_id: String,
    pub len: usize,
    pub test: Vec<IndexRange>,
    pub train: Vec<IndexRange>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub test_fraction_ppm: u64,
    pub blocks: Vec<BlockSplit>,
}

impl SplitManifest {
    /// All ranges of one block in temporal order, tagged train (`false`) or test (`true`).
    pub fn ordered_ranges(&self, block: usize) -> Vec<(IndexRange, bool)> {
        let Some(b) = self.blocks.iter().find(|b| b.block == block) else {
            return Vec::new();
        };
        let mut all: Vec<(IndexRange, bool)> = b
            .test
            .iter()
            .map(|r| (*r, true))
            .chain(b.train.iter().map(|r| (*r, false)))
            .collect();
        all.sort_by_key(|(r, _)| r.start);
        all
    }

    pub fn is_test_index(&self, block: usize, index: usize) -> bool {
        self.blocks
            .iter()
            .filter(|b| b.block == block)
            .flat_map(|b| b.test.iter())
            .any(|r| r.start <= index && index < r.end)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitResult {
    pub train: SensorDataset,
    /// Head and tail segments become separate blocks so windows never bridge the gap.
    pub test: SensorDataset,
    pub manifest: SplitManifest,
}

/// Block-based split: the first and last `edge_fraction·T` samples of every
/// block go to test, the middle to train. No shuffling.
pub fn block_split(ds: &SensorDataset, cfg: &SplitConfig) -> Result<SplitResult> {
    if !(cfg.test_fraction > 0.0 && cfg.test_fraction < 1.0) {
        return Err(Error::config(format!(
            "test_fraction must lie in (0, 1), got {}",
            cfg.test_fraction
        )));
    }
    let edge = cfg.edge_fraction();
    let mut train_blocks = Vec::new();
    let mut test_blocks = Vec::new();
    let mut manifest = SplitManifest {
        test_fraction_ppm: (cfg.test_fraction * 1e6).round() as u64,
        blocks: Vec::new(),
    };
    for (bi, block) in ds.blocks.iter().enumerate() {
        let t = block.len();
        if t == 0 {
            return Err(Error::EmptyBlock { block: bi });
        }
        // the tolerance keeps products like 0.1 * 30 from flooring to 2
        let k = (edge * t as f64 + 1e-9).floor() as usize;
        let head = IndexRange::new(0, k);
        let mid = IndexRange::new(k, t - k);
        let tail = IndexRange::new(t - k, t);
        let mut entry = BlockSplit {
            block: bi,
            subject_id: block.subject_id.clone(),
            len: t,
            test: Vec::new(),
            train: vec![mid],
        };
        train_blocks.push(block.slice(bi, mid));
        if k > 0 {
            entry.test = vec![head, tail];
            test_blocks.push(block.slice(bi, head));
            test_blocks.push(block.slice(bi, tail));
        }
        manifest.blocks.push(entry);
    }
    let side = |blocks| SensorDataset {
        domain_id: ds.domain_id.clone(),
        schema: ds.schema.clone(),
        label_set: ds.label_set.clone(),
        blocks,
        rate: ds.rate,
    };
    Ok(SplitResult {
        train: side(train_blocks),
        test: side(test_blocks),
        manifest,
    })
}

/// Per-channel mean and standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: f64,
    pub std: f64,
}

impl ChannelStats {
    pub fn of(values: impl IntoIterator<Item = f64>) -> ChannelStats {
        let mut n = 0usize;
        let mut mean = 0.0;
        let mut m2 = 0.0;
        for x in values {
            n += 1;
            let d = x - mean;
            mean += d / n as f64;
            m2 += d * (x - mean);
        }
        if n == 0 {
            return ChannelStats { mean: 0.0, std: 1.0 };
        }
        ChannelStats {
            mean,
            std: (m2 / n as f64).sqrt(),
        }
    }

    pub fn standardize(&self, x: f64) -> f64 {
        (x - self.mean) / (self.std + NORM_EPSILON)
    }

    pub fn restore(&self, z: f64) -> f64 {
        z * (self.std + NORM_EPSILON) + self.mean
    }
}

/// Statistics of every channel over all blocks of `ds`.
pub fn channel_stats(ds: &SensorDataset) -> Vec<ChannelStats> {
    (0..ds.width())
        .map(|c| {
            ChannelStats::of(
                ds.blocks
                    .iter()
                    .flat_map(|b| b.samples.column(c).to_vec()),
            )
        })
        .collect()
}

/// Per-subject, per-channel normalization statistics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SubjectStats {
    pub subjects: BTreeMap<String, Vec<ChannelStats>>,
}

impl SubjectStats {
    pub fn fit(ds: &SensorDataset) -> SubjectStats {
        let mut grouped: BTreeMap<&str, Vec<&Block>> = BTreeMap::new();
        for b in &ds.blocks {
            grouped.entry(b.subject_id.as_str()).or_default().push(b);
        }
        let subjects = grouped
            .into_iter()
            .map(|(sid, blocks)| {
                let stats = (0..ds.width())
                    .map(|c| {
                        ChannelStats::of(blocks.iter().flat_map(|b| b.samples.column(c).to_vec()))
                    })
                    .collect();
                (sid.to_string(), stats)
            })
            .collect();
        SubjectStats { subjects }
    }

    /// Applies stored statistics; subjects without statistics are normalized
    /// with their own.
    pub fn apply(&self, ds: &SensorDataset) -> SensorDataset {
        let own = SubjectStats::fit(ds);
        let mut out = ds.clone();
        for b in &mut out.blocks {
            let stats = self
                .subjects
                .get(&b.subject_id)
                .or_else(|| own.subjects.get(&b.subject_id))
                .expect("subject statistics present");
            for (c, st) in stats.iter().enumerate() {
                b.samples.column_mut(c).mapv_inplace(|x| st.standardize(x));
            }
        }
        out
    }
}

/// Z-scores every channel within each subject.
pub fn normalize_per_subject(ds: &SensorDataset) -> SensorDataset {
    SubjectStats::fit(ds).apply(ds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    NoBlocks,
    NonPositiveRate { rate: f64 },
    EmptyBlock { block: usize },
    WidthMismatch { block: usize, expected: usize, found: usize },
    LabelCountMismatch { block: usize, samples: usize, labels: usize },
    NonFinite { block: usize, channel: String, count: usize },
    IllegalLabel { block: usize, index: usize, label: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoBlocks => write!(f, "dataset has no blocks"),
            Violation::NonPositiveRate { rate } => write!(f, "rate {rate} is not positive"),
            Violation::EmptyBlock { block } => write!(f, "block {block} is empty"),
            Violation::WidthMismatch {
                block,
                expected,
                found,
            } => write!(f, "block {block} has {found} channels, schema has {expected}"),
            Violation::LabelCountMismatch {
                block,
                samples,
                labels,
            } => write!(f, "block {block} has {samples} samples but {labels} labels"),
            Violation::NonFinite {
                block,
                channel,
                count,
            } => write!(f, "block {block} channel `{channel}` has {count} non-finite value(s)"),
            Violation::IllegalLabel { block, index, label } => {
                write!(f, "block {block} sample {index} has illegal label {label}")
            }
        }
    }
}

/// Every invariant violation in `ds`; empty iff well-formed.
pub fn validate(ds: &SensorDataset) -> Vec<Violation> {
    let mut out = Vec::new();
    if ds.blocks.is_empty() {
        out.push(Violation::NoBlocks);
    }
    if !(ds.rate > 0.0 && ds.rate.is_finite()) {
        out.push(Violation::NonPositiveRate { rate: ds.rate });
    }
    let d = ds.schema.len();
    for (bi, b) in ds.blocks.iter().enumerate() {
        if b.is_empty() {
            out.push(Violation::EmptyBlock { block: bi });
        }
        if b.width() != d {
            out.push(Violation::WidthMismatch {
                block: bi,
                expected: d,
                found: b.width(),
            });
        }
        if b.labels.len() != b.len() {
            out.push(Violation::LabelCountMismatch {
                block: bi,
                samples: b.len(),
                labels: b.labels.len(),
            });
        }
        for (c, col) in b.samples.columns().into_iter().enumerate() {
            let count = col.iter().filter(|x| !x.is_finite()).count();
            if count > 0 {
                let channel = ds
                    .schema
                    .channels()
                    .get(c)
                    .map(|ch| ch.name.clone())
                    .unwrap_or_else(|| format!("#{c}"));
                out.push(Violation::NonFinite {
                    block: bi,
                    channel,
                    count,
                });
            }
        }
        for (i, &l) in b.labels.iter().enumerate() {
            if l >= ds.label_set.len() {
                out.push(Violation::IllegalLabel {
                    block: bi,
                    index: i,
                    label: l,
                });
            }
        }
    }
    out
}
