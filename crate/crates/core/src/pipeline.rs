//! End-to-end enhancement, detection, and the experiment protocols.
//!
//! Every run splits the target first; normalization statistics, imputer
//! alignment statistics, and the detector only ever see the train side. Each
//! data access is recorded in an [`AccessLog`] so that property can be checked.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    block_split, channel_stats, BlockOrigin, ChannelStats, SensorDataset, SplitConfig, SplitManifest, SubjectStats,
};
use crate::error::{Error, Result};
use crate::imputer::{add_gaussian_noise, fit_on_channels, shared_fingerprint, ImputerConfig, NoiseKind, NoiseSpec};
use crate::nn::{self, Activation, DenseNet, MlpSpec, TrainConfig};
use crate::preprocess::{windowize, WindowConfig, Windows};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Toggles {
    /// Target-side alignment of imputer inputs and batch-norm layers in both networks.
    pub use_batchnorm: bool,
    /// Jacobian-norm penalty on the detector.
    pub use_jacobian: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles {
            use_batchnorm: true,
            use_jacobian: true,
        }
    }
}

impl Toggles {
    pub const GRID: [Toggles; 4] = [
        Toggles {
            use_batchnorm: false,
            use_jacobian: false,
        },
        Toggles {
            use_batchnorm: true,
            use_jacobian: false,
        },
        Toggles {
            use_batchnorm: false,
            use_jacobian: true,
        },
        Toggles {
            use_batchnorm: true,
            use_jacobian: true,
        },
    ];

    pub fn label(&self) -> &'static str {
        match (self.use_batchnorm, self.use_jacobian) {
            (false, false) => "baseline",
            (true, false) => "bn",
            (false, true) => "jacobian",
            (true, true) => "bn+jacobian",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub train: TrainConfig,
    pub net: MlpSpec,
    pub window: WindowConfig,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            train: TrainConfig::default(),
            net: MlpSpec::default(),
            window: WindowConfig::default(),
        }
    }
}

/// Everything one pipeline run needs besides the data and the seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub split: SplitConfig,
    /// Per-subject z-scoring; statistics come from the target's train side.
    pub normalize: bool,
    pub imputer: ImputerConfig,
    pub detector: DetectorConfig,
    /// Penalty weight used when `toggles.use_jacobian` is on.
    pub jacobian_coeff: f64,
    pub toggles: Toggles,
    /// Let later imputers read channels generated by earlier ones.
    pub cascade_feeds_forward: bool,
    pub seeds: Vec<u64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            split: SplitConfig::default(),
            normalize: true,
            imputer: ImputerConfig::default(),
            detector: DetectorConfig::default(),
            jacobian_coeff: 0.01,
            toggles: Toggles::default(),
            cascade_feeds_forward: false,
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        if !(self.jacobian_coeff >= 0.0) {
            return Err(Error::config("jacobian_coeff must be nonnegative"));
        }
        self.detector.train.validate()?;
        self.imputer.train.validate()?;
        self.detector.window.check()?;
        self.imputer.window.check()
    }

    /// Copy with the toggles applied and all seeds set to `seed`.
    pub fn for_run(&self, seed: u64) -> PipelineConfig {
        let mut cfg = self.clone();
        cfg.imputer.use_batchnorm = self.toggles.use_batchnorm;
        cfg.imputer.train.seed = seed;
        cfg.detector.net.batch_norm = self.toggles.use_batchnorm;
        cfg.detector.train.seed = seed;
        cfg.detector.train.jacobian_coeff = if self.toggles.use_jacobian { self.jacobian_coeff } else { 0.0 };
        cfg
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessKind {
    /// Statistics or parameters were estimated from the data.
    Fit,
    /// Fixed transforms or predictions were applied to the data.
    Apply,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Access {
    pub stage: String,
    pub kind: AccessKind,
    pub domain: String,
    /// Provenance of every block touched; empty for unsplit data.
    pub origins: Vec<BlockOrigin>,
}

/// Ordered record of every read of target data during a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccessLog {
    pub entries: Vec<Access>,
}

impl AccessLog {
    fn record(&mut self, stage: &str, kind: AccessKind, ds: &SensorDataset) {
        self.entries.push(Access {
            stage: stage.into(),
            kind,
            domain: ds.domain_id.clone(),
            origins: ds.blocks.iter().filter_map(|b| b.origin.clone()).collect(),
        });
    }

    /// Whether any fitting stage read an index the manifest assigns to test.
    pub fn fit_touches_test(&self, manifest: &SplitManifest) -> bool {
        self.entries.iter().filter(|a| a.kind == AccessKind::Fit).any(|a| {
            a.origins.iter().any(|o| {
                manifest
                    .blocks
                    .iter()
                    .filter(|b| b.block == o.block)
                    .flat_map(|b| &b.test)
                    .any(|r| r.overlaps(&o.range))
            })
        })
    }
}

/// Trained classifier plus the input scaling and windowing it expects.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detector {
    pub net: DenseNet,
    pub channels: Vec<String>,
    pub input_stats: Vec<ChannelStats>,
    pub window: WindowConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub cross_entropy: f64,
    pub windows: usize,
}

fn scaled(ds: &SensorDataset, stats: &[ChannelStats]) -> SensorDataset {
    let mut out = ds.clone();
    for b in &mut out.blocks {
        for (c, st) in stats.iter().enumerate() {
            b.samples.column_mut(c).mapv_inplace(|v| st.standardize(v));
        }
    }
    out
}

/// Windows of every block long enough to hold one.
pub fn windows_of(ds: &SensorDataset, wcfg: &WindowConfig) -> Result<Windows> {
    let kept = SensorDataset {
        blocks: ds.blocks.iter().filter(|b| b.len() >= wcfg.window_samples).cloned().collect(),
        ..ds.clone()
    };
    windowize(&kept, wcfg)
}

/// Trains the detector on (train-side) `enhanced` data.
pub fn train_detector(enhanced: &SensorDataset, cfg: &DetectorConfig) -> Result<Detector> {
    let input_stats = channel_stats(enhanced);
    let w = windows_of(&scaled(enhanced, &input_stats), &cfg.window)?;
    if w.is_empty() {
        return Err(Error::TooFewSamples {
            needed: cfg.window.window_samples,
            got: enhanced.blocks.iter().map(|b| b.len()).max().unwrap_or(0),
        });
    }
    let net = DenseNet::mlp(&cfg.net, w.features.ncols(), enhanced.label_set.len(), Activation::SoftmaxOutput, cfg.train.seed)?;
    let (net, _) = nn::train_classifier(net, w.features.view(), &w.labels, &cfg.train)?;
    Ok(Detector {
        net,
        channels: enhanced.schema.names().iter().map(|s| s.to_string()).collect(),
        input_stats,
        window: cfg.window,
    })
}

#[derive(Serialize, Deserialize)]
struct DetectorHeader {
    channels: Vec<String>,
    input_stats: Vec<ChannelStats>,
    window: WindowConfig,
}

impl Detector {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let header = DetectorHeader {
            channels: self.channels.clone(),
            input_stats: self.input_stats.clone(),
            window: self.window,
        };
        nn::save_model(path, &self.net, &shared_fingerprint(&self.channels), &header)
    }

    /// Loads a detector; `expected_channels` rejects files trained on other inputs.
    pub fn load(path: &std::path::Path, expected_channels: Option<&[String]>) -> Result<Detector> {
        let expected = expected_channels.map(shared_fingerprint);
        let (net, h, _) = nn::load_model::<DetectorHeader>(path, expected.as_deref())?;
        if net.input_dim() != h.window.window_samples * h.channels.len() || h.input_stats.len() != h.channels.len() {
            return Err(Error::MalformedModel("network shape disagrees with channel list".into()));
        }
        Ok(Detector {
            net,
            channels: h.channels,
            input_stats: h.input_stats,
            window: h.window,
        })
    }

    pub fn windows(&self, ds: &SensorDataset) -> Result<Windows> {
        let names: Vec<&str> = ds.schema.names();
        if names != self.channels {
            return Err(Error::SchemaMismatch(format!(
                "detector expects {:?}, data has {:?}",
                self.channels, names
            )));
        }
        windows_of(&scaled(ds, &self.input_stats), &self.window)
    }
}

/// Window-level accuracy and mean cross-entropy in evaluation mode.
pub fn evaluate(detector: &Detector, test: &SensorDataset) -> Result<Metrics> {
    let w = detector.windows(test)?;
    if w.is_empty() {
        return Err(Error::TooFewSamples {
            needed: detector.window.window_samples,
            got: test.blocks.iter().map(|b| b.len()).max().unwrap_or(0),
        });
    }
    metrics_on(&detector.net, &w)
}

pub(crate) fn metrics_on(net: &DenseNet, w: &Windows) -> Result<Metrics> {
    let logits = net.logits(w.features.view())?;
    let (ce, _) = nn::cross_entropy(&logits, &w.labels);
    let pred = net.predict_classes(w.features.view())?;
    let correct = pred.iter().zip(&w.labels).filter(|(p, l)| p == l).count();
    Ok(Metrics {
        accuracy: correct as f64 / w.len() as f64,
        cross_entropy: ce,
        windows: w.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImputationSummary {
    pub source: String,
    pub shared: Vec<String>,
    pub generated: Vec<String>,
    pub holdout_mse: Option<f64>,
}

struct Enhanced {
    train: SensorDataset,
    test: SensorDataset,
    summaries: Vec<ImputationSummary>,
}

/// Folds imputation over `sources` on a train/test pair; target-side
/// statistics come from the train side only.
fn enhance_split(
    train: &SensorDataset,
    test: &SensorDataset,
    sources: &[SensorDataset],
    cfg: &PipelineConfig,
    log: &mut AccessLog,
) -> Result<Enhanced> {
    let original: BTreeSet<String> = train.schema.names().iter().map(|s| s.to_string()).collect();
    let mut train = train.clone();
    let mut test = test.clone();
    let mut summaries = Vec::new();
    for source in sources {
        let part = crate::imputer::imputer_partition(&train.schema, &source.schema, cfg.imputer.level)?;
        let shared: Vec<String> = part
            .shared
            .into_iter()
            .filter(|c| cfg.cascade_feeds_forward || original.contains(c))
            .collect();
        if shared.is_empty() {
            return Err(Error::NoSharedChannels {
                target: train.domain_id.clone(),
                source_domain: source.domain_id.clone(),
            });
        }
        if part.extra.is_empty() {
            continue;
        }
        let imputer = fit_on_channels(source, &shared, &part.extra, &cfg.imputer)?;
        log.record("imputer-alignment", AccessKind::Fit, &train);
        let stats = imputer.shared_stats(&train)?;
        train = imputer.apply(&train, Some(&stats))?;
        log.record("imputer-apply", AccessKind::Apply, &test);
        test = imputer.apply(&test, Some(&stats))?;
        summaries.push(ImputationSummary {
            source: source.domain_id.clone(),
            shared,
            generated: imputer.generated_names(),
            holdout_mse: imputer.holdout_mse,
        });
    }
    Ok(Enhanced { train, test, summaries })
}

/// Imputes every source's extra channels onto `target` in list order
/// (an empty list returns the target unchanged). Alignment statistics come
/// from `target` itself.
pub fn enhance_target(target: &SensorDataset, sources: &[SensorDataset], cfg: &PipelineConfig) -> Result<SensorDataset> {
    let mut log = AccessLog::default();
    Ok(enhance_split(target, target, sources, cfg, &mut log)?.train)
}

/// Output of one (scenario, seed) run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunOutput {
    pub metrics: Metrics,
    pub imputation: Vec<ImputationSummary>,
    pub manifest: SplitManifest,
    pub log: AccessLog,
    pub detector: Detector,
    /// The enhanced test side the metrics were computed on.
    pub test: SensorDataset,
}

fn split_and_normalize(target: &SensorDataset, cfg: &PipelineConfig, log: &mut AccessLog) -> Result<(SensorDataset, SensorDataset, SplitManifest)> {
    let split = block_split(target, &cfg.split)?;
    let (mut train, mut test) = (split.train, split.test);
    if cfg.normalize {
        log.record("normalize", AccessKind::Fit, &train);
        let stats = SubjectStats::fit(&train);
        train = stats.apply(&train);
        log.record("normalize", AccessKind::Apply, &test);
        test = stats.apply(&test);
    }
    Ok((train, test, split.manifest))
}

fn normalized_sources(sources: &[SensorDataset], cfg: &PipelineConfig) -> Vec<SensorDataset> {
    if cfg.normalize {
        sources.iter().map(crate::dataset::normalize_per_subject).collect()
    } else {
        sources.to_vec()
    }
}

/// Algorithm flow for one seed: split, normalize, enhance, train, evaluate.
pub fn run_once(target: &SensorDataset, sources: &[SensorDataset], cfg: &PipelineConfig, seed: u64) -> Result<RunOutput> {
    let cfg = cfg.for_run(seed);
    let mut log = AccessLog::default();
    let (train, test, manifest) = split_and_normalize(target, &cfg, &mut log)?;
    let sources = normalized_sources(sources, &cfg);
    let enhanced = enhance_split(&train, &test, &sources, &cfg, &mut log)?;
    log.record("detector", AccessKind::Fit, &enhanced.train);
    let detector = train_detector(&enhanced.train, &cfg.detector)?;
    log.record("evaluate", AccessKind::Apply, &enhanced.test);
    let metrics = evaluate(&detector, &enhanced.test)?;
    Ok(RunOutput {
        metrics,
        imputation: enhanced.summaries,
        manifest,
        log,
        detector,
        test: enhanced.test,
    })
}

/// One row of an experiment report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub scenario: String,
    pub seed: u64,
    pub accuracy: Option<f64>,
    pub cross_entropy: Option<f64>,
    /// Standardized reconstruction MSE, where the scenario has one.
    pub mse: Option<f64>,
    pub windows: usize,
    pub imputation: Vec<ImputationSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub scenario: String,
    pub runs: usize,
    pub accuracy_mean: Option<f64>,
    pub accuracy_std: Option<f64>,
    pub cross_entropy_mean: Option<f64>,
    pub cross_entropy_std: Option<f64>,
    pub mse_mean: Option<f64>,
    pub mse_std: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: String,
    /// Sorted by scenario declaration order, then seed.
    pub records: Vec<RunRecord>,
    pub summary: Vec<ScenarioSummary>,
}

fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x}"))
}

impl ExperimentReport {
    /// Builds a report; `order` fixes the scenario order.
    pub fn new(experiment: &str, order: &[String], mut records: Vec<RunRecord>) -> Self {
        let rank = |s: &str| order.iter().position(|o| o == s).unwrap_or(usize::MAX);
        records.sort_by(|a, b| (rank(&a.scenario), &a.scenario, a.seed).cmp(&(rank(&b.scenario), &b.scenario, b.seed)));
        let mut names: Vec<String> = Vec::new();
        for r in &records {
            if !names.contains(&r.scenario) {
                names.push(r.scenario.clone());
            }
        }
        let summary = names
            .into_iter()
            .map(|name| {
                let rows: Vec<&RunRecord> = records.iter().filter(|r| r.scenario == name).collect();
                let col = |f: fn(&RunRecord) -> Option<f64>| mean_std(&rows.iter().filter_map(|r| f(r)).collect::<Vec<_>>());
                let acc = col(|r| r.accuracy);
                let ce = col(|r| r.cross_entropy);
                let mse = col(|r| r.mse);
                ScenarioSummary {
                    scenario: name,
                    runs: rows.len(),
                    accuracy_mean: acc.map(|p| p.0),
                    accuracy_std: acc.map(|p| p.1),
                    cross_entropy_mean: ce.map(|p| p.0),
                    cross_entropy_std: ce.map(|p| p.1),
                    mse_mean: mse.map(|p| p.0),
                    mse_std: mse.map(|p| p.1),
                }
            })
            .collect();
        ExperimentReport {
            experiment: experiment.into(),
            records,
            summary,
        }
    }

    pub fn scenario(&self, name: &str) -> Option<&ScenarioSummary> {
        self.summary.iter().find(|s| s.scenario == name)
    }

    /// Seed-mean accuracy of a scenario.
    pub fn mean_accuracy(&self, name: &str) -> Option<f64> {
        self.scenario(name).and_then(|s| s.accuracy_mean)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("experiment,scenario,seed,accuracy,cross_entropy,mse,windows,generated\n");
        for r in &self.records {
            let generated: Vec<String> = r.imputation.iter().flat_map(|s| s.generated.clone()).collect();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                self.experiment,
                r.scenario,
                r.seed,
                opt(r.accuracy),
                opt(r.cross_entropy),
                opt(r.mse),
                r.windows,
                generated.join(";")
            );
        }
        out
    }

    /// Aligned plain-text summary: one line per scenario.
    pub fn to_table(&self) -> String {
        let pct = |m: Option<f64>, s: Option<f64>| match (m, s) {
            (Some(m), Some(s)) => format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * s),
            _ => "-".into(),
        };
        let num = |m: Option<f64>, s: Option<f64>| match (m, s) {
            (Some(m), Some(s)) => format!("{m:.4} ± {s:.4}"),
            _ => "-".into(),
        };
        let mut rows = vec![[
            "scenario".to_string(),
            "runs".into(),
            "accuracy (%)".into(),
            "cross-entropy".into(),
            "mse".into(),
        ]];
        for s in &self.summary {
            rows.push([
                s.scenario.clone(),
                s.runs.to_string(),
                pct(s.accuracy_mean, s.accuracy_std),
                num(s.cross_entropy_mean, s.cross_entropy_std),
                num(s.mse_mean, s.mse_std),
            ]);
        }
        let widths: Vec<usize> = (0..5).map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0)).collect();
        let mut out = format!("{}\n", self.experiment);
        for (i, r) in rows.iter().enumerate() {
            let cells: Vec<String> = r
                .iter()
                .zip(&widths)
                .map(|(cell, &w)| format!("{cell}{}", " ".repeat(w - cell.chars().count())))
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
            if i == 0 {
                out.push_str(&widths.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().join("  "));
                out.push('\n');
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn in_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if jobs == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::config(e.to_string()))?;
    Ok(pool.install(f))
}

/// A named list of sources (indices into a pool) to enhance the target with.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub sources: Vec<usize>,
}

fn record_of(name: &str, seed: u64, out: &RunOutput) -> RunRecord {
    RunRecord {
        scenario: name.into(),
        seed,
        accuracy: Some(out.metrics.accuracy),
        cross_entropy: Some(out.metrics.cross_entropy),
        mse: None,
        windows: out.metrics.windows,
        imputation: out.imputation.clone(),
    }
}

fn pick(pool: &[SensorDataset], idx: &[usize]) -> Result<Vec<SensorDataset>> {
    idx.iter()
        .map(|&i| {
            pool.get(i)
                .cloned()
                .ok_or_else(|| Error::config(format!("scenario refers to source {i}, pool has {}", pool.len())))
        })
        .collect()
}

/// Runs every (scenario, seed) pair, `jobs` at a time (0 = current thread).
pub fn run_scenarios(
    experiment: &str,
    target: &SensorDataset,
    pool: &[SensorDataset],
    scenarios: &[(Scenario, PipelineConfig)],
    jobs: usize,
) -> Result<ExperimentReport> {
    if scenarios.is_empty() {
        return Err(Error::config("scenario list is empty"));
    }
    let mut tasks = Vec::new();
    for (sc, cfg) in scenarios {
        cfg.validate()?;
        let sources = pick(pool, &sc.sources)?;
        for &seed in &cfg.seeds {
            tasks.push((sc.name.clone(), sources.clone(), cfg.clone(), seed));
        }
    }
    let records = in_pool(jobs, || {
        tasks
            .par_iter()
            .map(|(name, sources, cfg, seed)| run_once(target, sources, cfg, *seed).map(|o| record_of(name, *seed, &o)))
            .collect::<Result<Vec<_>>>()
    })??;
    let order: Vec<String> = scenarios.iter().map(|(s, _)| s.name.clone()).collect();
    Ok(ExperimentReport::new(experiment, &order, records))
}

/// Cross-domain augmentation: each scenario adds its sources to the target.
pub fn run_augmentation_experiment(
    target: &SensorDataset,
    pool: &[SensorDataset],
    scenarios: &[Scenario],
    cfg: &PipelineConfig,
    jobs: usize,
) -> Result<ExperimentReport> {
    let with_cfg: Vec<(Scenario, PipelineConfig)> = scenarios.iter().map(|s| (s.clone(), cfg.clone())).collect();
    run_scenarios("augmentation", target, pool, &with_cfg, jobs)
}

/// All four toggle combinations for every scenario and seed. Scenario names
/// become `<scenario>/<toggle label>`.
pub fn run_ablation(
    target: &SensorDataset,
    pool: &[SensorDataset],
    scenarios: &[Scenario],
    cfg: &PipelineConfig,
    jobs: usize,
) -> Result<ExperimentReport> {
    let mut grid = Vec::new();
    for sc in scenarios {
        for t in Toggles::GRID {
            let named = Scenario {
                name: format!("{}/{}", sc.name, t.label()),
                sources: sc.sources.clone(),
            };
            grid.push((named, PipelineConfig { toggles: t, ..cfg.clone() }));
        }
    }
    run_scenarios("ablation", target, pool, &grid, jobs)
}

pub const NOISE_VARIANTS: [&str; 4] = ["original", "imputed", "imputed+noise", "pure-noise"];

/// Replaces the `masked` channels of `ds` with the imputer's predictions.
fn restore_masked(ds: &SensorDataset, imputer: &crate::imputer::Imputer, stats: &[ChannelStats]) -> Result<SensorDataset> {
    let preds = imputer.predict(ds, Some(stats))?;
    let idx = ds.schema.indices_of(&imputer.generated_names())?;
    let mut out = ds.clone();
    for (b, p) in out.blocks.iter_mut().zip(preds) {
        for (j, &c) in idx.iter().enumerate() {
            b.samples.column_mut(c).assign(&p.column(j));
        }
    }
    Ok(out)
}

fn noise_runs(
    target: &SensorDataset,
    source: Option<&SensorDataset>,
    masked: &[String],
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<Vec<RunRecord>> {
    let cfg = cfg.for_run(seed);
    let mut log = AccessLog::default();
    let (train, test, _) = split_and_normalize(target, &cfg, &mut log)?;
    for m in masked {
        if !train.schema.contains(m) {
            return Err(Error::UnknownChannel(m.clone()));
        }
    }
    let shared: Vec<String> = match source {
        Some(s) => train
            .schema
            .names()
            .into_iter()
            .filter(|n| !masked.iter().any(|m| m == n) && s.schema.contains(n))
            .map(str::to_string)
            .collect(),
        None => train
            .schema
            .names()
            .into_iter()
            .filter(|n| !masked.iter().any(|m| m == n))
            .map(str::to_string)
            .collect(),
    };
    if shared.is_empty() {
        return Err(Error::NoSharedChannels {
            target: target.domain_id.clone(),
            source_domain: source.map_or_else(|| target.domain_id.clone(), |s| s.domain_id.clone()),
        });
    }
    let fit_source = match source {
        Some(s) => normalized_sources(std::slice::from_ref(s), &cfg).remove(0),
        None => train.clone(),
    };
    let imputer = fit_on_channels(&fit_source, &shared, masked, &cfg.imputer)?;
    let stats = imputer.shared_stats(&train)?;
    let imputed = restore_masked(&train, &imputer, &stats)?;
    let noisy = add_gaussian_noise(&imputed, masked, &NoiseSpec::new(NoiseKind::AdditiveGaussian, seed ^ 0x6e6f_6973_6521))?;
    let pure = add_gaussian_noise(&train, masked, &NoiseSpec::new(NoiseKind::PureGaussian, seed ^ 0x7075_7265_2121))?;
    let summary = ImputationSummary {
        source: fit_source.domain_id.clone(),
        shared: shared.clone(),
        generated: masked.to_vec(),
        holdout_mse: imputer.holdout_mse,
    };
    let variants = [(NOISE_VARIANTS[0], &train), (NOISE_VARIANTS[1], &imputed), (NOISE_VARIANTS[2], &noisy), (NOISE_VARIANTS[3], &pure)];
    variants
        .iter()
        .map(|(name, data)| {
            let detector = train_detector(data, &cfg.detector)?;
            // every variant is scored on the same untouched test side
            let m = evaluate(&detector, &test)?;
            Ok(RunRecord {
                scenario: name.to_string(),
                seed,
                accuracy: Some(m.accuracy),
                cross_entropy: Some(m.cross_entropy),
                mse: (*name == "imputed").then_some(imputer.holdout_mse).flatten(),
                windows: m.windows,
                imputation: if *name == "original" { Vec::new() } else { vec![summary.clone()] },
            })
        })
        .collect()
}

/// Masks `masked` in the target's train side and compares detectors trained
/// on the original, imputed, imputed-plus-noise, and pure-noise versions.
/// The imputer is fitted on `source` when given, else on the target's train side.
pub fn run_noise_baseline_experiment(
    target: &SensorDataset,
    source: Option<&SensorDataset>,
    masked: &[String],
    cfg: &PipelineConfig,
    jobs: usize,
) -> Result<ExperimentReport> {
    cfg.validate()?;
    if masked.is_empty() {
        return Err(Error::config("no channel to mask"));
    }
    let per_seed = in_pool(jobs, || {
        cfg.seeds
            .par_iter()
            .map(|&seed| noise_runs(target, source, masked, cfg, seed))
            .collect::<Result<Vec<_>>>()
    })??;
    let order: Vec<String> = NOISE_VARIANTS.iter().map(|s| s.to_string()).collect();
    Ok(ExperimentReport::new("noise-baseline", &order, per_seed.into_iter().flatten().collect()))
}

/// Held-out reconstruction MSE of several imputer architectures on one source.
pub fn run_imputer_selection(
    source: &SensorDataset,
    target_schema: &crate::dataset::ChannelSchema,
    candidates: &[(String, MlpSpec)],
    cfg: &ImputerConfig,
    seeds: &[u64],
    jobs: usize,
) -> Result<ExperimentReport> {
    let part = crate::imputer::imputer_partition(target_schema, &source.schema, cfg.level)?;
    if part.shared.is_empty() {
        return Err(Error::NoSharedChannels {
            target: "target".into(),
            source_domain: source.domain_id.clone(),
        });
    }
    if part.extra.is_empty() {
        return Err(Error::NoExtraChannels(source.domain_id.clone()));
    }
    let tasks: Vec<(String, MlpSpec, u64)> = candidates
        .iter()
        .flat_map(|(n, s)| seeds.iter().map(move |&seed| (n.clone(), s.clone(), seed)))
        .collect();
    let records = in_pool(jobs, || {
        tasks
            .par_iter()
            .map(|(name, spec, seed)| {
                let mut c = cfg.clone();
                c.net = spec.clone();
                c.train.seed = *seed;
                let imp = fit_on_channels(source, &part.shared, &part.extra, &c)?;
                Ok(RunRecord {
                    scenario: name.clone(),
                    seed: *seed,
                    accuracy: None,
                    cross_entropy: None,
                    mse: imp.holdout_mse,
                    windows: 0,
                    imputation: Vec::new(),
                })
            })
            .collect::<Result<Vec<_>>>()
    })??;
    let order: Vec<String> = candidates.iter().map(|(n, _)| n.clone()).collect();
    Ok(ExperimentReport::new("imputer-selection", &order, records))
}
