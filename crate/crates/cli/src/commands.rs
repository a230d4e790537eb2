use std::collections::BTreeSet;

use fatigue_fusion::dataset::{block_split, channel_stats, common_channels, ChannelStats};
use fatigue_fusion::imputer::{fit_on_channels, imputer_partition};
use fatigue_fusion::io::write_dataset_with_schema;
use fatigue_fusion::pipeline::{
    evaluate, run_ablation, run_augmentation_experiment, run_imputer_selection, run_noise_baseline_experiment,
    run_once, Detector, ExperimentReport, ImputationSummary,
};
use fatigue_fusion::preprocess::{apply_plan, PreprocessPlan};
use fatigue_fusion::synth::{generate_multidomain, oracle_bayes_accuracy};
use fatigue_fusion::theory::{mutual_info_binned, proxy_a_distance, theorem1_direction_check, Theorem1Check};
use fatigue_fusion::{Error, SensorDataset};
use ndarray::Array2;
use serde::Serialize;

use crate::config::{DatasetRef, ExperimentConfig};
use crate::output::Output;
use crate::CliError;

/// File-system friendly form of a domain id.
fn slug(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn write_dataset(out: &mut Output, rel: &str, ds: &SensorDataset) -> Result<(), CliError> {
    write_dataset_with_schema(ds, &out.path(rel))?;
    out.record(rel);
    Ok(())
}

fn all_domains(cfg: &ExperimentConfig) -> Result<Vec<SensorDataset>, CliError> {
    let mut domains = vec![cfg.target()?];
    domains.extend(cfg.sources()?);
    Ok(domains)
}

fn first_seed(cfg: &ExperimentConfig) -> Result<u64, CliError> {
    cfg.pipeline
        .seeds
        .first()
        .copied()
        .ok_or_else(|| CliError::Config("`pipeline.seeds` is empty".into()))
}

#[derive(Serialize)]
struct DomainViolations {
    domain: String,
    violations: Vec<String>,
}

pub fn validate(cfg: &ExperimentConfig, out: &mut Output) -> Result<(), CliError> {
    let domains = out.stage("load", || all_domains(cfg))?;
    let report: Vec<DomainViolations> = domains
        .iter()
        .map(|ds| DomainViolations {
            domain: ds.domain_id.clone(),
            violations: fatigue_fusion::validate(ds).iter().map(ToString::to_string).collect(),
        })
        .collect();
    out.write_json("validation.json", &report)?;
    let bad: Vec<String> = report
        .iter()
        .flat_map(|d| d.violations.iter().map(move |v| format!("{}: {v}", d.domain)))
        .collect();
    if let Some(first) = bad.first() {
        return Err(CliError::Invalid(format!("{} violation(s); first: {first}", bad.len())));
    }
    println!("{} dataset(s) valid", domains.len());
    Ok(())
}

pub fn preprocess(cfg: &ExperimentConfig, out: &mut Output) -> Result<(), CliError> {
    let domains = out.stage("load", || all_domains(cfg))?;
    for ds in &domains {
        let plan = cfg.preprocess.clone().unwrap_or_else(|| PreprocessPlan::default_for(&ds.schema));
        let (conditioned, provenance) = out.stage(&format!("condition {}", ds.domain_id), || Ok(apply_plan(ds, &plan)?))?;
        let dir = format!("preprocessed/{}", slug(&ds.domain_id));
        write_dataset(out, &dir, &conditioned)?;
        out.write_json(&format!("{dir}/provenance.json"), &provenance)?;
        println!("{}: {} step(s) applied, now at {} Hz", ds.domain_id, provenance.applied.len(), provenance.to_rate);
    }
    Ok(())
}

pub fn split(cfg: &ExperimentConfig, out: &mut Output) -> Result<(), CliError> {
    let target = out.stage("load", || cfg.target())?;
    let split = out.stage("split", || Ok(block_split(&target, &cfg.pipeline.split)?))?;
    out.write_json("split/manifest.json", &split.manifest)?;
    write_dataset(out, "split/train", &split.train)?;
    write_dataset(out, "split/test", &split.test)?;
    println!(
        "{} blocks: {} train samples, {} test samples",
        target.blocks.len(),
        split.train.total_len(),
        split.test.total_len()
    );
    Ok(())
}

pub fn impute(cfg: &ExperimentConfig, out: &mut Output) -> Result<(), CliError> {
    let target = out.stage("load", || cfg.target())?;
    let sources = cfg.sources()?;
    if sources.is_empty() {
        return Err(CliError::Config("`data.sources` is empty".into()));
    }
    let run = cfg.pipeline.for_run(first_seed(cfg)?);
    let original: BTreeSet<String> = target.schema.names().iter().map(|s| s.to_string()).collect();
    let mut enhanced = target.clone();
    let mut summaries = Vec::new();
    for (i, source) in sources.iter().enumerate() {
        let part = imputer_partition(&enhanced.schema, &source.schema, run.imputer.level)?;
        let shared: Vec<String> = part
            .shared
            .into_iter()
            .filter(|c| run.cascade_feeds_forward || original.contains(c))
            .collect();
        if shared.is_empty() {
            return Err(Error::NoSharedChannels {
                target: target.domain_id.clone(),
                source_domain: source.domain_id.clone(),
            }
            .into());
        }
        if part.extra.is_empty() {
            log::warn!("source `{}` adds no channels; skipped", source.domain_id);
            continue;
        }
        let imputer = out.stage(&format!("fit {}", source.domain_id), || {
            Ok(fit_on_channels(source, &shared, &part.extra, &run.imputer)?)
        })?;
        let stats = imputer.shared_stats(&enhanced)?;
        enhanced = imputer.apply(&enhanced, Some(&stats))?;
        let rel = format!("imputers/{i:02}-{}.json", slug(&source.domain_id));
        std::fs::create_dir_all(out.path("imputers"))?;
        imputer.save(&out.path(&rel))?;
        out.record(&rel);
        summaries.push(ImputationSummary {
            source: source.domain_id.clone(),
            shared,
            generated: imputer.generated_names(),
            holdout_mse: imputer.holdout_mse,
        });
    }
    write_dataset(out, "enhanced", &enhanced)?;
    out.write_json("imputation_report.json", &summaries)?;
    for s in &summaries {
        let mse = s.holdout_mse.map_or("n/a".to_string(), |m| format!("{m:.4}"));
        println!("{} -> {:?} (holdout MSE {mse})", s.source, s.generated);
    }
    Ok(())
}

#[derive(Serialize)]
struct TrainReport<'a> {
    seed: u64,
    metrics: &'a fatigue_fusion::pipeline::Metrics,
    imputation: &'a [ImputationSummary],
    split: &'a fatigue_fusion::dataset::SplitManifest,
}

pub fn train(cfg: &ExperimentConfig, out: &mut Output) -> Result<(), CliError> {
    let target = out.stage("load", || cfg.target())?;
    let sources = cfg.sources()?;
    let seed = first_seed(cfg)?;
    let run = out.stage("run", || Ok(run_once(&target, &sources, &cfg.pipeline, seed)?))?;
    run.detector.save(&out.path("detector.json"))?;
    out.record("detector.json");
    write_dataset(out, "test", &run.test)?;
    out.write_json(
        "train_report.json",
        &TrainReport {
            seed,
            metrics: &run.metrics,
            imputation: &run.imputation,
            split: &run.manifest,
        },
    )?;
    println!(
        "held-out accuracy {:.4}, cross-entropy {:.4} over {} windows",
        run.metrics.accuracy, run.metrics.cross_entropy, run.metrics.windows
    );
    Ok(())
}

pub fn eval(cfg: &ExperimentConfig, out: &mut Output) -> Result<(), CliError> {
    let model = cfg.eval.model.clone().unwrap_or_else(|| out.path("detector.json"));
    let data = cfg.eval.data.clone().unwrap_or_else(|| DatasetRef {
        dir: out.path("test"),
        schema: None,
    });
    let ds = out.stage("load", || data.load())?;
    let detector = Detector::load(&model, None)?;
    let metrics = out.stage("evaluate", || Ok(evaluate(&detector, &ds)?))?;
    out.write_json("metrics.json", &metrics)?;
    println!(
        "accuracy {:.4}, cross-entropy {:.4} over {} windows",
        metrics.accuracy, metrics.cross_entropy, metrics.windows
    );
    Ok(())
}

pub fn noise_baseline(cfg: &ExperimentConfig, out: &mut Output, jobs: usize) -> Result<(), CliError> {
    let target = out.stage("load", || cfg.target())?;
    let sources = cfg.sources()?;
    let nb = &cfg.noise_baseline;
    let source = match nb.source {
        Some(i) => Some(
            sources
                .get(i)
                .ok_or_else(|| CliError::Config(format!("noise_baseline.source {i} is out of range")))?,
        ),
        None => None,
    };
    let report = out.stage("experiment", || {
        Ok(run_noise_baseline_experiment(&target, source, &nb.masked, &cfg.pipeline, jobs)?)
    })?;
    publish(cfg, out, report)
}

pub fn ablate(cfg: &ExperimentConfig, out: &mut Output, jobs: usize) -> Result<(), CliError> {
    let target = out.stage("load", || cfg.target())?;
    let sources = cfg.sources()?;
    let report = out.stage("experiment", || {
        Ok(run_ablation(&target, &sources, &cfg.scenarios, &cfg.pipeline, jobs)?)
    })?;
    publish(cfg, out, report)
}

pub fn augment(cfg: &ExperimentConfig, out: &mut Output, jobs: usize) -> Result<(), CliError> {
    let target = out.stage("load", || cfg.target())?;
    let sources = cfg.sources()?;
    let report = out.stage("experiment", || {
        Ok(run_augmentation_experiment(&target, &sources, &cfg.scenarios, &cfg.pipeline, jobs)?)
    })?;
    publish(cfg, out, report)
}

pub fn select_imputer(cfg: &ExperimentConfig, out: &mut Output, jobs: usize) -> Result<(), CliError> {
    let target = out.stage("load", || cfg.target())?;
    let sources = cfg.sources()?;
    let sel = &cfg.imputer_selection;
    let source = sources
        .get(sel.source)
        .ok_or_else(|| CliError::Config(format!("imputer_selection.source {} is out of range", sel.source)))?;
    if sel.candidates.is_empty() {
        return Err(CliError::Config("`imputer_selection.candidates` is empty".into()));
    }
    let candidates: Vec<_> = sel.candidates.iter().map(|c| (c.name.clone(), c.net.clone())).collect();
    let report = out.stage("experiment", || {
        Ok(run_imputer_selection(
            source,
            &target.schema,
            &candidates,
            &cfg.pipeline.imputer,
            &cfg.pipeline.seeds,
            jobs,
        )?)
    })?;
    publish(cfg, out, report)
}

fn publish(cfg: &ExperimentConfig, out: &mut Output, mut report: ExperimentReport) -> Result<(), CliError> {
    if let Some(name) = &cfg.name {
        report.experiment = name.clone();
    }
    out.write_report(&report)
}

#[derive(Serialize)]
struct TruthSidecar<'a> {
    hidden_channels: Vec<&'a str>,
    /// Absent when a response has no closed-form oracle.
    oracle_accuracy: Option<f64>,
    config: &'a fatigue_fusion::synth::SynthConfig,
}

pub fn synth(cfg: &ExperimentConfig, out: &mut Output) -> Result<(), CliError> {
    let sc = cfg
        .synth
        .as_ref()
        .ok_or_else(|| CliError::Config("the config has no `[synth]` section".into()))?;
    let md = out.stage("generate", || Ok(generate_multidomain(sc)?))?;
    let oracle = match oracle_bayes_accuracy(sc) {
        Ok(a) => Some(a),
        Err(Error::UnsupportedResponse(_)) => None,
        Err(e) => return Err(e.into()),
    };
    for ds in std::iter::once(&md.target).chain(&md.sources) {
        write_dataset(out, &slug(&ds.domain_id), ds)?;
    }
    if !md.hidden_truth.schema.is_empty() {
        write_dataset(out, "truth", &md.hidden_truth)?;
    }
    out.write_json(
        "truth.json",
        &TruthSidecar {
            hidden_channels: md.hidden_truth.schema.names(),
            oracle_accuracy: oracle,
            config: sc,
        },
    )?;
    println!(
        "wrote target `{}` and {} source(s); oracle accuracy {}",
        md.target.domain_id,
        md.sources.len(),
        oracle.map_or("n/a".to_string(), |a| format!("{a:.4}"))
    );
    Ok(())
}

#[derive(Serialize)]
struct ChannelMi {
    channel: String,
    mi_nats: Option<f64>,
    note: Option<String>,
}

#[derive(Serialize)]
struct SourceDistance {
    source: String,
    shared: Vec<String>,
    before_alignment: Option<f64>,
    after_alignment: Option<f64>,
    note: Option<String>,
}

#[derive(Serialize)]
struct Diagnosis {
    mutual_information: Vec<ChannelMi>,
    proxy_distance: Vec<SourceDistance>,
    theorem1: Theorem1Check,
}

/// Evenly strided rows of the named channels, at most `max_rows`.
fn rows_of(ds: &SensorDataset, names: &[String], stats: Option<&[ChannelStats]>, max_rows: usize) -> Result<Array2<f64>, CliError> {
    let sel = ds.select_channels(names)?;
    let total = sel.total_len();
    let stride = total.div_ceil(max_rows.max(1)).max(1);
    let rows: Vec<Vec<f64>> = sel
        .blocks
        .iter()
        .flat_map(|b| b.samples.rows().into_iter().map(|r| r.to_vec()).collect::<Vec<_>>())
        .step_by(stride)
        .collect();
    let mut m = Array2::zeros((rows.len(), names.len()));
    for (i, r) in rows.iter().enumerate() {
        for (j, v) in r.iter().enumerate() {
            m[[i, j]] = stats.map_or(*v, |s| s[j].standardize(*v));
        }
    }
    Ok(m)
}

pub fn diagnose(cfg: &ExperimentConfig, out: &mut Output) -> Result<(), CliError> {
    let target = out.stage("load", || cfg.target())?;
    let sources = cfg.sources()?;
    let d = &cfg.diagnose;
    let labels = target.all_labels();
    let mutual_information = out.stage("mutual information", || {
        target
            .schema
            .names()
            .iter()
            .map(|name| {
                let values = target.channel_values(name)?;
                let x = Array2::from_shape_vec((values.len(), 1), values).expect("one column");
                Ok(match mutual_info_binned(x.view(), &labels, d.bins, d.binning) {
                    Ok(m) => ChannelMi {
                        channel: name.to_string(),
                        mi_nats: Some(m.value),
                        note: None,
                    },
                    Err(e) => ChannelMi {
                        channel: name.to_string(),
                        mi_nats: None,
                        note: Some(e.to_string()),
                    },
                })
            })
            .collect::<Result<Vec<_>, CliError>>()
    })?;
    let proxy_distance = out.stage("proxy distance", || {
        let mut rows = Vec::new();
        for source in &sources {
            let common = common_channels(&target.schema, &source.schema)?;
            let shared: Vec<String> = target
                .schema
                .names()
                .iter()
                .filter(|n| common.contains(**n))
                .map(|n| n.to_string())
                .collect();
            let mut entry = SourceDistance {
                source: source.domain_id.clone(),
                shared: shared.clone(),
                before_alignment: None,
                after_alignment: None,
                note: None,
            };
            if shared.is_empty() {
                entry.note = Some("no shared channels".into());
                rows.push(entry);
                continue;
            }
            let t_stats = channel_stats(&target.select_channels(&shared)?);
            let s_stats = channel_stats(&source.select_channels(&shared)?);
            let raw = (rows_of(&target, &shared, None, d.max_rows)?, rows_of(source, &shared, None, d.max_rows)?);
            let aligned = (
                rows_of(&target, &shared, Some(&t_stats), d.max_rows)?,
                rows_of(source, &shared, Some(&s_stats), d.max_rows)?,
            );
            match (
                proxy_a_distance(raw.0.view(), raw.1.view(), &d.proxy),
                proxy_a_distance(aligned.0.view(), aligned.1.view(), &d.proxy),
            ) {
                (Ok(b), Ok(a)) => {
                    entry.before_alignment = Some(b.value);
                    entry.after_alignment = Some(a.value);
                }
                (Err(e), _) | (_, Err(e)) => entry.note = Some(e.to_string()),
            }
            rows.push(entry);
        }
        Ok(rows)
    })?;
    let seed = cfg.pipeline.seeds.first().copied().unwrap_or(0);
    let theorem1 = out.stage("information check", || Ok(theorem1_direction_check(&d.theorem1, seed)?))?;
    let diagnosis = Diagnosis {
        mutual_information,
        proxy_distance,
        theorem1,
    };
    let text = render_diagnosis(&diagnosis);
    out.write_text("diagnose.txt", &text)?;
    out.write_json("diagnose.json", &diagnosis)?;
    print!("{text}");
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map_or("n/a".to_string(), |x| format!("{x:.4}"))
}

fn render_diagnosis(d: &Diagnosis) -> String {
    let mut s = String::from("mutual information with the label (nats)\n");
    for m in &d.mutual_information {
        s += &format!("  {:<16} {}\n", m.channel, opt(m.mi_nats));
    }
    s += "proxy A-distance on shared channels (before -> after alignment)\n";
    for p in &d.proxy_distance {
        s += &format!("  {:<16} {} -> {}", p.source, opt(p.before_alignment), opt(p.after_alignment));
        if let Some(n) = &p.note {
            s += &format!("  ({n})");
        }
        s += "\n";
    }
    let t = &d.theorem1;
    s += &format!(
        "added-feature information check: I(x;y) {:.4}, I([x,a];y) {:.4} -> {}\n",
        t.i_x,
        t.i_xplus,
        if t.passed { "pass" } else { "fail" }
    );
    s
}
