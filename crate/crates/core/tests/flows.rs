use fatigue_fusion::imputer::{add_gaussian_noise, sensor_impute, Imputer, ImputerConfig, NoiseKind, NoiseSpec};
use fatigue_fusion::io::{load_dataset, write_dataset_with_schema, SchemaConfig};
use fatigue_fusion::nn::{MlpSpec, TrainConfig};
use fatigue_fusion::pipeline::{evaluate, run_once, train_detector, Detector, DetectorConfig, PipelineConfig};
use fatigue_fusion::preprocess::WindowConfig;
use fatigue_fusion::synth::{generate_multidomain, oracle_bayes_accuracy, presets, ChannelSpec, DomainLayout, SynthConfig};
use fatigue_fusion::dataset::{block_split, Modality, SplitConfig};
use fatigue_fusion::Error;

fn small_imputer() -> ImputerConfig {
    ImputerConfig {
        window: WindowConfig::new(1, 1),
        net: MlpSpec {
            hidden: vec![8],
            ..Default::default()
        },
        train: TrainConfig {
            learning_rate: 1e-2,
            epochs: 5,
            batch_size: 64,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn affine_two_channel(seed: u64) -> SynthConfig {
    SynthConfig {
        labels: 2,
        channels: vec![
            ChannelSpec::affine("x1", Modality::Hr, 0.0, 1.0, 1.0),
            ChannelSpec::affine("x2", Modality::Gsr, 0.0, 0.8, 1.0),
        ],
        subjects: 8,
        block_length: 400,
        persistence: 0.95,
        rate: 32.0,
        seed,
        target: DomainLayout::new("t", &["x1", "x2"]),
        sources: vec![],
        oracle_window: 1,
    }
}

#[test]
fn trained_detector_does_not_beat_the_oracle() {
    for seed in 0..4 {
        let cfg = SynthConfig {
            subjects: 16,
            block_length: 1500,
            ..affine_two_channel(seed)
        };
        let oracle = oracle_bayes_accuracy(&cfg).unwrap();
        let md = generate_multidomain(&cfg).unwrap();
        let split = block_split(&md.target, &SplitConfig::default()).unwrap();
        let det = DetectorConfig {
            window: WindowConfig::new(1, 1),
            net: MlpSpec {
                hidden: vec![16],
                ..Default::default()
            },
            train: TrainConfig {
                learning_rate: 1e-2,
                epochs: 10,
                seed,
                ..Default::default()
            },
        };
        let detector = train_detector(&split.train, &det).unwrap();
        let acc = evaluate(&detector, &split.test).unwrap().accuracy;
        assert!(acc <= oracle + 0.02, "seed {seed}: accuracy {acc} vs oracle {oracle}");
        assert!(acc >= oracle - 0.04, "seed {seed}: accuracy {acc} far below oracle {oracle}");
    }
}

#[test]
fn sensor_impute_preserves_original_channels() {
    let md = generate_multidomain(&presets::affine_imputation(1)).unwrap();
    let out = sensor_impute(&md.target, &md.sources[0], &small_imputer()).unwrap();
    assert_eq!(out.schema.names(), vec!["HR", "GSR", "EXTRA"]);
    assert!(out.schema.get("EXTRA").unwrap().is_generated());
    for (a, b) in out.blocks.iter().zip(&md.target.blocks) {
        assert_eq!(a.samples.column(0), b.samples.column(0));
        assert_eq!(a.samples.column(1), b.samples.column(1));
        assert_eq!(a.labels, b.labels);
    }
    // a source adding nothing leaves the target untouched
    let same = sensor_impute(&md.target, &md.target, &small_imputer()).unwrap();
    assert_eq!(same, md.target);
}

#[test]
fn imputer_save_load_checks_inputs() {
    let md = generate_multidomain(&presets::affine_imputation(2)).unwrap();
    let imp = fatigue_fusion::fit_imputer(&md.sources[0], &md.target.schema, &small_imputer()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("imp.json");
    imp.save(&path).unwrap();
    let shared = vec!["HR".to_string(), "GSR".to_string()];
    let back = Imputer::load(&path, Some(&shared)).unwrap();
    assert_eq!(back.apply(&md.target, None).unwrap(), imp.apply(&md.target, None).unwrap());
    let wrong = vec!["GSR".to_string(), "HR".to_string()];
    assert!(matches!(Imputer::load(&path, Some(&wrong)), Err(Error::FingerprintMismatch { .. })));
}

#[test]
fn noise_scale_follows_reference_maximum() {
    let md = generate_multidomain(&affine_two_channel(9)).unwrap();
    let x1 = md.target.channel_values("x1").unwrap();
    let max = x1.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let pure = add_gaussian_noise(&md.target, &["x1"], &NoiseSpec::new(NoiseKind::PureGaussian, 3)).unwrap();
    let v = pure.channel_values("x1").unwrap();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!((std / (2.0 * max) - 1.0).abs() < 0.05, "std {std}, expected {}", 2.0 * max);
    assert_eq!(pure.channel_values("x2").unwrap(), md.target.channel_values("x2").unwrap());
    let again = add_gaussian_noise(&md.target, &["x1"], &NoiseSpec::new(NoiseKind::PureGaussian, 3)).unwrap();
    assert_eq!(again, pure);
}

#[test]
fn csv_round_trip_feeds_the_pipeline() {
    let md = generate_multidomain(&affine_two_channel(5)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset_with_schema(&md.target, dir.path()).unwrap();
    let cfg = SchemaConfig::load(&dir.path().join("schema.toml")).unwrap();
    let back = load_dataset(dir.path(), &cfg).unwrap();
    assert_eq!(back.schema, md.target.schema);
    assert_eq!(back.blocks.len(), md.target.blocks.len());
    for (a, b) in back.blocks.iter().zip(&md.target.blocks) {
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.samples, b.samples);
    }
    let pipeline = PipelineConfig {
        imputer: small_imputer(),
        detector: DetectorConfig {
            window: WindowConfig::new(4, 4),
            net: MlpSpec {
                hidden: vec![8],
                ..Default::default()
            },
            train: TrainConfig {
                epochs: 3,
                ..Default::default()
            },
        },
        seeds: vec![0],
        ..Default::default()
    };
    let out = run_once(&back, &[], &pipeline, 0).unwrap();
    assert!(out.metrics.windows > 0);
    assert!(!out.log.fit_touches_test(&out.manifest));
}

#[test]
fn detector_save_load_round_trips() {
    let md = generate_multidomain(&affine_two_channel(6)).unwrap();
    let split = block_split(&md.target, &SplitConfig::default()).unwrap();
    let det = DetectorConfig {
        window: WindowConfig::new(4, 2),
        net: MlpSpec {
            hidden: vec![8],
            ..Default::default()
        },
        train: TrainConfig {
            epochs: 2,
            ..Default::default()
        },
    };
    let detector = train_detector(&split.train, &det).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("det.json");
    detector.save(&path).unwrap();
    let names = vec!["x1".to_string(), "x2".to_string()];
    let back = Detector::load(&path, Some(&names)).unwrap();
    assert_eq!(evaluate(&back, &split.test).unwrap(), evaluate(&detector, &split.test).unwrap());
    let swapped = vec!["x2".to_string(), "x1".to_string()];
    assert!(matches!(Detector::load(&path, Some(&swapped)), Err(Error::FingerprintMismatch { .. })));
}
