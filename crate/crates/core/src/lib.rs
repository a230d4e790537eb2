//! Heterogeneous multi-source fatigue detection.
//!
//! Regression imputers trained on differently instrumented source datasets
//! synthesize the sensor channels a target dataset lacks; a dense detector is
//! then trained on the enhanced target. The crate also carries the signal
//! conditioning chain, a seeded synthetic multi-domain generator, and
//! empirical estimators (binned mutual information, proxy A-distance,
//! generalization gap) used to sanity-check the approach.

pub mod dataset;
pub mod error;
pub mod imputer;
pub mod io;
pub mod nn;
pub mod pipeline;
pub mod preprocess;
pub mod synth;
pub mod theory;

pub use dataset::{
    block_split, common_channels, extra_in_source, missing_in_source, normalize_per_subject,
    validate, Block, Channel, ChannelSchema, LabelSet, Modality, SensorDataset, SplitConfig,
    SplitResult,
};
pub use error::{Error, Result};
pub use imputer::{fit_imputer, sensor_impute, Imputer};
pub use nn::{DenseNet, TrainConfig};
pub use pipeline::{enhance_target, evaluate, train_detector, Detector, ExperimentReport, PipelineConfig};
pub use preprocess::WindowConfig;
