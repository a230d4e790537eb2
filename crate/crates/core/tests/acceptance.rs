//! Acceptance suite. Prints one line per criterion and exits nonzero if any fails.
//!
//! Criterion 10 needs real recordings: point `FATIGUE_FUSION_DATA` at a
//! directory holding `vpfd/`, `mefar/` and `fatigueset/`, each with a
//! `schema.toml` and block CSVs.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use fatigue_fusion::dataset::{block_split, Block, ChannelSchema, LabelSet, Modality, SensorDataset, SplitConfig};
use fatigue_fusion::imputer::{fit_imputer, ImputerConfig};
use fatigue_fusion::io::{load_dataset, SchemaConfig};
use fatigue_fusion::nn::{
    grad_check, jacobian_norm, Activation, BatchNorm, DenseNet, Layer, LossKind, MlpSpec, Mode, Objective, Targets,
    TrainConfig,
};
use fatigue_fusion::pipeline::{
    run_ablation, run_augmentation_experiment, run_noise_baseline_experiment, run_once, Access, AccessKind, AccessLog,
    PipelineConfig, Scenario, Toggles,
};
use fatigue_fusion::preprocess::{resample, rls_denoise, ssa_decompose, RlsConfig, SsaConfig, WindowConfig};
use fatigue_fusion::synth::{generate_multidomain, presets};
use fatigue_fusion::theory::{mutual_info_binned, proxy_a_distance, theorem1_direction_check, Binning, ProxyConfig, Theorem1Config};
use fatigue_fusion::Result;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

enum Status {
    Pass,
    Fail,
    Skipped,
}

struct Outcome {
    status: Status,
    detail: String,
}

impl Outcome {
    fn check(ok: bool, detail: impl Into<String>) -> Self {
        Outcome {
            status: if ok { Status::Pass } else { Status::Fail },
            detail: detail.into(),
        }
    }
}

/// Shared pipeline settings for the synthetic experiments.
fn synthetic_pipeline() -> PipelineConfig {
    PipelineConfig {
        normalize: false,
        imputer: ImputerConfig {
            window: WindowConfig::new(1, 1),
            net: MlpSpec {
                hidden: vec![32, 32],
                ..Default::default()
            },
            train: TrainConfig {
                learning_rate: 3e-3,
                epochs: 15,
                batch_size: 64,
                ..Default::default()
            },
            ..Default::default()
        },
        detector: fatigue_fusion::pipeline::DetectorConfig {
            window: WindowConfig::new(4, 2),
            net: MlpSpec {
                hidden: vec![32, 32],
                ..Default::default()
            },
            train: TrainConfig {
                learning_rate: 3e-3,
                epochs: 30,
                batch_size: 32,
                ..Default::default()
            },
        },
        ..Default::default()
    }
}

fn pct(x: Option<f64>) -> f64 {
    100.0 * x.expect("scenario present")
}

fn noise_baseline() -> Result<Outcome> {
    let start = Instant::now();
    let md = generate_multidomain(&presets::noise_baseline(1))?;
    let cfg = PipelineConfig {
        toggles: Toggles {
            use_batchnorm: false,
            use_jacobian: false,
        },
        ..synthetic_pipeline()
    };
    let r = run_noise_baseline_experiment(&md.target, Some(&md.sources[0]), &["E1".to_string()], &cfg, 0)?;
    let elapsed = start.elapsed();
    let [orig, imp, noisy, pure] = ["original", "imputed", "imputed+noise", "pure-noise"].map(|s| pct(r.mean_accuracy(s)));
    let ok = orig - imp <= 3.0 && imp - noisy >= 10.0 && imp - pure >= 10.0 && elapsed <= Duration::from_secs(180);
    Ok(Outcome::check(
        ok,
        format!("original {orig:.2} imputed {imp:.2} +noise {noisy:.2} pure {pure:.2} in {:.1}s", elapsed.as_secs_f64()),
    ))
}

fn two_source_scenarios() -> Vec<Scenario> {
    vec![
        Scenario {
            name: "target".into(),
            sources: vec![],
        },
        Scenario {
            name: "+one".into(),
            sources: vec![0],
        },
        Scenario {
            name: "+both".into(),
            sources: vec![0, 1],
        },
    ]
}

fn augmentation() -> Result<Outcome> {
    let start = Instant::now();
    let md = generate_multidomain(&presets::two_source(1, 0.0))?;
    let cfg = PipelineConfig {
        toggles: Toggles {
            use_batchnorm: true,
            use_jacobian: false,
        },
        ..synthetic_pipeline()
    };
    let r = run_augmentation_experiment(&md.target, &md.sources, &two_source_scenarios(), &cfg, 0)?;
    let elapsed = start.elapsed();
    let [t, one, both] = ["target", "+one", "+both"].map(|s| pct(r.mean_accuracy(s)));
    let ok = one - t >= 3.0 && both - one >= 3.0 && elapsed <= Duration::from_secs(300);
    Ok(Outcome::check(
        ok,
        format!("target {t:.2} +one {one:.2} +both {both:.2} in {:.1}s", elapsed.as_secs_f64()),
    ))
}

fn ablation() -> Result<Outcome> {
    let md = generate_multidomain(&presets::two_source(1, 3.0))?;
    let cfg = PipelineConfig {
        jacobian_coeff: 0.1,
        ..synthetic_pipeline()
    };
    let scenarios = &two_source_scenarios()[2..];
    let r = run_ablation(&md.target, &md.sources, scenarios, &cfg, 0)?;
    let [base, bn, jac, both] = Toggles::GRID.map(|t| pct(r.mean_accuracy(&format!("+both/{}", t.label()))));
    let ok = both >= bn && both >= jac && both >= base && both - base >= 1.0;
    Ok(Outcome::check(
        ok,
        format!("baseline {base:.2} bn {bn:.2} jacobian {jac:.2} bn+jacobian {both:.2}"),
    ))
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

fn variance(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n
}

fn imputer_fidelity() -> Result<Outcome> {
    let md = generate_multidomain(&presets::affine_imputation(3))?;
    let source = &md.sources[0];
    let cfg = ImputerConfig {
        window: WindowConfig::new(1, 1),
        net: MlpSpec {
            hidden: vec![16],
            activation: Activation::Identity,
            batch_norm: false,
        },
        train: TrainConfig {
            learning_rate: 1e-2,
            epochs: 40,
            batch_size: 64,
            ..Default::default()
        },
        use_batchnorm: false,
        ..Default::default()
    };
    let imputer = fit_imputer(source, &md.target.schema, &cfg)?;
    let mse = imputer.holdout_mse.expect("holdout present");
    // irreducible error: noise variance over the channel's own variance
    let floor = 0.01 / variance(&source.channel_values("EXTRA")?);
    let enhanced = imputer.apply(&md.target, None)?;
    let corr = pearson(&enhanced.channel_values("EXTRA")?, &md.hidden_truth.channel_values("EXTRA")?);
    Ok(Outcome::check(
        mse <= 1.1 * floor && mse <= 0.011 && corr >= 0.9,
        format!("holdout MSE {mse:.5} (floor {floor:.5}), target correlation {corr:.4}"),
    ))
}

fn random_net(rng: &mut ChaCha8Rng, seed: u64, output: Activation) -> Result<(DenseNet, Array2<f64>)> {
    let acts = [Activation::Tanh, Activation::Relu, Activation::Identity];
    let depth = rng.random_range(1..=2);
    let spec = MlpSpec {
        hidden: (0..depth).map(|_| rng.random_range(2..=5)).collect(),
        activation: acts[rng.random_range(0..acts.len())],
        batch_norm: rng.random_bool(0.5),
    };
    let inputs = rng.random_range(1..=4);
    let outputs = rng.random_range(2..=3);
    let rows = rng.random_range(4..=8);
    let mut net = DenseNet::mlp(&spec, inputs, outputs, output, seed)?;
    // zero biases can park a ReLU input exactly on its kink
    for layer in net.layers_mut() {
        layer.bias.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    }
    let x = Array2::from_shape_fn((rows, inputs), |_| rng.random_range(-1.5..1.5));
    Ok((net, x))
}

fn gradients() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut worst_mse, mut worst_ce, mut worst_jac) = (0.0f64, 0.0f64, 0.0f64);
    for seed in 0..50 {
        let (net, x) = random_net(&mut rng, seed, Activation::Identity)?;
        let y = Array2::from_shape_fn((x.nrows(), net.output_dim()), |_| rng.random_range(-1.0..1.0));
        let t = Targets::Values(y.view());
        worst_mse = worst_mse.max(grad_check(&net, x.view(), &t, &Objective::new(LossKind::Mse))?);
        worst_jac = worst_jac.max(grad_check(&net, x.view(), &t, &Objective::new(LossKind::Mse).with_jacobian(0.5))?);

        let (net, x) = random_net(&mut rng, 1000 + seed, Activation::SoftmaxOutput)?;
        let labels: Vec<usize> = (0..x.nrows()).map(|_| rng.random_range(0..net.output_dim())).collect();
        let t = Targets::Classes(&labels);
        worst_ce = worst_ce.max(grad_check(&net, x.view(), &t, &Objective::new(LossKind::CrossEntropy))?);
        worst_jac = worst_jac.max(grad_check(
            &net,
            x.view(),
            &t,
            &Objective::new(LossKind::CrossEntropy).with_jacobian(0.5),
        )?);
    }
    let w = Array2::from_shape_fn((3, 4), |_| rng.random_range(-2.0..2.0));
    let linear = DenseNet::new(vec![Layer {
        bias: Array1::from_shape_fn(3, |_| rng.random_range(-1.0..1.0)),
        weight: w.clone(),
        activation: Activation::Identity,
        batch_norm: None,
    }])?;
    let x = Array2::from_shape_fn((10, 4), |_| rng.random_range(-1.0..1.0));
    let frob: f64 = w.iter().map(|v| v * v).sum();
    let jac_err = (jacobian_norm(&linear, x.view())? - frob).abs();
    Ok(Outcome::check(
        worst_mse < 1e-4 && worst_ce < 1e-4 && worst_jac < 1e-3 && jac_err <= 1e-10,
        format!("max rel err mse {worst_mse:.2e} ce {worst_ce:.2e} jacobian {worst_jac:.2e}; linear |J|² err {jac_err:.1e}"),
    ))
}

fn batchnorm() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut worst_mean, mut worst_var) = (0.0f64, 0.0f64);
    for _ in 0..20 {
        let width = rng.random_range(1..=16);
        let shift: Vec<f64> = (0..width).map(|_| rng.random_range(-50.0..50.0)).collect();
        let scale: Vec<f64> = (0..width).map(|_| rng.random_range(1.0..20.0)).collect();
        let batch = Array2::from_shape_fn((64, width), |(_, j)| shift[j] + scale[j] * rng.random_range(-1.0..1.0));
        let out = BatchNorm::new(width).forward(&batch, Mode::Train)?;
        for col in out.columns() {
            let v = col.to_vec();
            let mean = v.iter().sum::<f64>() / 64.0;
            worst_mean = worst_mean.max(mean.abs());
            worst_var = worst_var.max((variance(&v) - 1.0).abs());
        }
    }
    Ok(Outcome::check(
        worst_mean < 1e-6 && worst_var < 1e-6,
        format!("max |mean| {worst_mean:.1e}, max |var − 1| {worst_var:.1e}"),
    ))
}

fn theory() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 100_000;
    let x = Array2::from_shape_fn((n, 1), |_| rng.random::<f64>());
    let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
    let mi_indep = mutual_info_binned(x.view(), &y, 16, Binning::EqualWidth)?.value;
    let xy = Array2::from_shape_fn((n, 1), |(i, _)| y[i] as f64);
    let mi_det = mutual_info_binned(xy.view(), &y, 16, Binning::EqualWidth)?.value;

    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut gauss = |rows: usize, offset: f64| Array2::from_shape_fn((rows, 3), |_| offset + unit.sample(&mut rng));
    let (a, b) = (gauss(1000, 0.0), gauss(1000, 0.0));
    let same = proxy_a_distance(a.view(), b.view(), &ProxyConfig::default())?.value;
    let far = gauss(1000, 10.0);
    let disjoint = proxy_a_distance(a.view(), far.view(), &ProxyConfig::default())?.value;

    let t1 = Theorem1Config::default();
    let mut passed = 0;
    for seed in 0..100 {
        passed += usize::from(theorem1_direction_check(&t1, seed)?.passed);
    }
    let ok = mi_indep < 0.02 && (mi_det - std::f64::consts::LN_2).abs() < 0.02 && same < 0.2 && disjoint > 1.8 && passed == 100;
    Ok(Outcome::check(
        ok,
        format!(
            "MI indep {mi_indep:.4}, MI det {mi_det:.4}, PAD same {same:.3} disjoint {disjoint:.3}, direction {passed}/100"
        ),
    ))
}

fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

fn rls_suppression_db() -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 8000;
    let fir = [0.8, -0.5, 0.3, 0.1];
    let reference: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let clean: Vec<f64> = (0..n)
        .map(|i| 0.3 * (2.0 * std::f64::consts::PI * i as f64 / 50.0).sin())
        .collect();
    let interference: Vec<f64> = (0..n)
        .map(|i| (0..fir.len().min(i + 1)).map(|k| fir[k] * reference[i - k]).sum())
        .collect();
    let signal: Vec<f64> = clean.iter().zip(&interference).map(|(a, b)| a + b).collect();
    let cfg = RlsConfig {
        filter_order: 4,
        ..Default::default()
    };
    let out = rls_denoise(&signal, &reference, &cfg)?;
    let tail = n / 2;
    let residual: Vec<f64> = out[tail..].iter().zip(&clean[tail..]).map(|(a, b)| a - b).collect();
    Ok(10.0 * (power(&interference[tail..]) / power(&residual)).log10())
}

fn split_exact(len: usize) -> Result<bool> {
    let schema = ChannelSchema::from_tags(&[("idx", Modality::Hr, 32.0)])?;
    let samples = Array2::from_shape_fn((len, 1), |(i, _)| i as f64);
    let ds = SensorDataset::new("t", schema, LabelSet::default(), vec![Block::new("s", samples, vec![0; len])], 32.0)?;
    let split = block_split(&ds, &SplitConfig { test_fraction: 0.2 })?;
    // first and last tenth, rounded down
    let k = len / 10;
    let is_test = |i: usize| i < k || i >= len - k;
    let by_index = (0..len).all(|i| split.manifest.is_test_index(0, i) == is_test(i));
    let values = |d: &SensorDataset| -> Vec<usize> {
        d.blocks.iter().flat_map(|b| b.samples.column(0).to_vec()).map(|v| v as usize).collect()
    };
    let train_ok = values(&split.train) == (0..len).filter(|&i| !is_test(i)).collect::<Vec<_>>();
    let test_ok = values(&split.test) == (0..len).filter(|&i| is_test(i)).collect::<Vec<_>>();
    Ok(by_index && train_ok && test_ok)
}

fn preprocessing() -> Result<Outcome> {
    let db = rls_suppression_db()?;

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let signal: Vec<f64> = (0..400).map(|i| (i as f64 * 0.07).sin() + rng.random_range(-0.5..0.5)).collect();
    let parts = ssa_decompose(&signal, &SsaConfig::default())?;
    let num: f64 = (0..signal.len())
        .map(|t| (parts.iter().map(|p| p[t]).sum::<f64>() - signal[t]).powi(2))
        .sum();
    let ssa_rel = (num / signal.iter().map(|v| v * v).sum::<f64>()).sqrt();

    let (a, b, from) = (1.25, -0.75, 10.0);
    let affine: Vec<f64> = (0..101).map(|i| a + b * i as f64 / from).collect();
    let mut resample_err = 0.0f64;
    for to in [4.0, 7.0, 32.0, 64.0] {
        for (j, v) in resample(&affine, from, to)?.iter().enumerate() {
            resample_err = resample_err.max((v - (a + b * j as f64 / to)).abs());
        }
    }

    let mut split_ok = true;
    for len in [5, 10, 100, 101] {
        split_ok &= split_exact(len)?;
    }
    Ok(Outcome::check(
        db >= 20.0 && ssa_rel <= 1e-8 && resample_err <= 1e-12 && split_ok,
        format!("RLS {db:.1} dB, SSA rel err {ssa_rel:.1e}, resample err {resample_err:.1e}, split exact {split_ok}"),
    ))
}

fn leakage_and_determinism() -> Result<Outcome> {
    let md = generate_multidomain(&presets::two_source(5, 0.0))?;
    let cfg = PipelineConfig {
        normalize: true,
        seeds: vec![3],
        ..synthetic_pipeline()
    };
    let out = run_once(&md.target, &md.sources, &cfg, 3)?;
    let clean = !out.log.fit_touches_test(&out.manifest);

    // a log that fits on the test side must be caught
    let split = block_split(&md.target, &cfg.split)?;
    let leaky = AccessLog {
        entries: vec![Access {
            stage: "normalize".into(),
            kind: AccessKind::Fit,
            domain: md.target.domain_id.clone(),
            origins: split.test.blocks.iter().filter_map(|b| b.origin.clone()).collect(),
        }],
    };
    let detects = leaky.fit_touches_test(&split.manifest);

    let scenarios = two_source_scenarios();
    let first = run_augmentation_experiment(&md.target, &md.sources, &scenarios, &cfg, 0)?;
    let second = run_augmentation_experiment(&md.target, &md.sources, &scenarios, &cfg, 2)?;
    let identical = first.to_json()? == second.to_json()? && first.to_csv() == second.to_csv();
    Ok(Outcome::check(
        clean && detects && identical,
        format!("fit stages clear of test {clean}, planted leak detected {detects}, reports identical {identical}"),
    ))
}

fn data_root() -> Option<PathBuf> {
    let root = PathBuf::from(std::env::var_os("FATIGUE_FUSION_DATA")?);
    ["vpfd", "mefar", "fatigueset"]
        .iter()
        .all(|d| root.join(d).join("schema.toml").is_file())
        .then_some(root)
}

fn load(root: &Path, name: &str) -> Result<SensorDataset> {
    let dir = root.join(name);
    load_dataset(&dir, &SchemaConfig::load(&dir.join("schema.toml"))?)
}

fn real_data() -> Result<Outcome> {
    let Some(root) = data_root() else {
        return Ok(Outcome {
            status: Status::Skipped,
            detail: "set FATIGUE_FUSION_DATA to a directory with vpfd/, mefar/ and fatigueset/".into(),
        });
    };
    let vpfd = load(&root, "vpfd")?;
    let mefar = load(&root, "mefar")?;
    let fatigueset = load(&root, "fatigueset")?;
    let cfg = PipelineConfig::default();
    let within = |got: f64, want: f64| (got - want).abs() <= 0.1 * want;
    let ecg = fit_imputer(&fatigueset, &vpfd.schema, &cfg.imputer)?.holdout_mse.unwrap_or(f64::NAN);
    let eeg = fit_imputer(&mefar, &vpfd.schema, &cfg.imputer)?.holdout_mse.unwrap_or(f64::NAN);
    let pool = vec![mefar, fatigueset];
    let scenarios = vec![
        Scenario {
            name: "vpfd".into(),
            sources: vec![],
        },
        Scenario {
            name: "+eeg".into(),
            sources: vec![0],
        },
        Scenario {
            name: "+ecg".into(),
            sources: vec![1],
        },
        Scenario {
            name: "+eeg+ecg".into(),
            sources: vec![0, 1],
        },
    ];
    let r = run_augmentation_experiment(&vpfd, &pool, &scenarios, &cfg, 0)?;
    let [base, with_eeg, with_ecg, both] = ["vpfd", "+eeg", "+ecg", "+eeg+ecg"].map(|s| pct(r.mean_accuracy(s)));
    let ordered = base < with_eeg && base < with_ecg && with_eeg < both && with_ecg < both;
    Ok(Outcome::check(
        within(ecg, 0.4074) && within(eeg, 0.1028) && ordered,
        format!(
            "ECG loss {ecg:.4}, EEG loss {eeg:.4}; accuracy vpfd {base:.2} +eeg {with_eeg:.2} +ecg {with_ecg:.2} both {both:.2}"
        ),
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Result<Outcome>); 10] = [
        ("noise-baseline ordering", noise_baseline),
        ("augmentation ordering", augmentation),
        ("ablation direction", ablation),
        ("imputer fidelity", imputer_fidelity),
        ("gradient correctness", gradients),
        ("batch-norm statistics", batchnorm),
        ("theory estimators", theory),
        ("preprocessing", preprocessing),
        ("leakage and determinism", leakage_and_determinism),
        ("real-data reproduction", real_data),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let outcome = run().unwrap_or_else(|e| Outcome::check(false, format!("error: {e}")));
        let tag = match outcome.status {
            Status::Pass => "PASS",
            Status::Fail => {
                failed += 1;
                "FAIL"
            }
            Status::Skipped => "SKIPPED-DATA",
        };
        println!("criterion {:>2} {tag:<12} {name}: {}", i + 1, outcome.detail);
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
