//! The experiment config: one TOML file with a section per subcommand.
//! `docs/config-keys.md` lists every key.

use std::fs;
use std::path::{Path, PathBuf};

use fatigue_fusion::io::{load_dataset, SchemaConfig};
use fatigue_fusion::nn::MlpSpec;
use fatigue_fusion::pipeline::{PipelineConfig, Scenario};
use fatigue_fusion::preprocess::PreprocessPlan;
use fatigue_fusion::synth::SynthConfig;
use fatigue_fusion::theory::{Binning, ProxyConfig, Theorem1Config, DEFAULT_BINS};
use fatigue_fusion::SensorDataset;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// A dataset directory and its schema config (`<dir>/schema.toml` by default).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRef {
    pub dir: PathBuf,
    #[serde(default)]
    pub schema: Option<PathBuf>,
}

impl DatasetRef {
    pub fn load(&self) -> Result<SensorDataset, CliError> {
        let schema_path = self.schema.clone().unwrap_or_else(|| self.dir.join("schema.toml"));
        let schema = SchemaConfig::load(&schema_path)?;
        Ok(load_dataset(&self.dir, &schema)?)
    }

    fn resolve(&mut self, base: &Path) {
        self.dir = base.join(&self.dir);
        if let Some(s) = &mut self.schema {
            *s = base.join(&*s);
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub target: Option<DatasetRef>,
    /// Source pool; scenarios refer to sources by index.
    pub sources: Vec<DatasetRef>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseBaselineConfig {
    /// Target channels masked and restored by imputation.
    pub masked: Vec<String>,
    /// Index into `data.sources` to fit the imputer on; the target's train side when absent.
    pub source: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Candidate {
    pub name: String,
    pub net: MlpSpec,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub source: usize,
    pub candidates: Vec<Candidate>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Saved detector; `<out>/detector.json` when absent.
    pub model: Option<PathBuf>,
    /// Dataset to score; the test side written by `train` when absent.
    pub data: Option<DatasetRef>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnoseConfig {
    pub bins: usize,
    pub binning: Binning,
    /// Rows drawn (evenly strided) from each domain for the proxy distance.
    pub max_rows: usize,
    pub proxy: ProxyConfig,
    pub theorem1: Theorem1Config,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        DiagnoseConfig {
            bins: DEFAULT_BINS,
            binning: Binning::EqualWidth,
            max_rows: 2000,
            proxy: ProxyConfig::default(),
            theorem1: Theorem1Config::default(),
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: Option<String>,
    pub data: DataConfig,
    /// Per-modality plan; the built-in plan for the target schema when absent.
    pub preprocess: Option<PreprocessPlan>,
    pub pipeline: PipelineConfig,
    pub scenarios: Vec<Scenario>,
    pub noise_baseline: NoiseBaselineConfig,
    pub imputer_selection: SelectionConfig,
    pub eval: EvalConfig,
    pub synth: Option<SynthConfig>,
    pub diagnose: DiagnoseConfig,
}

/// A parsed config plus the digest of its exact bytes.
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub hash: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl ExperimentConfig {
    /// Parses `path`; relative dataset paths resolve against its directory.
    pub fn load(path: &Path) -> Result<LoadedConfig, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut config: ExperimentConfig =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(t) = &mut config.data.target {
            t.resolve(base);
        }
        for s in &mut config.data.sources {
            s.resolve(base);
        }
        if let Some(d) = &mut config.eval.data {
            d.resolve(base);
        }
        if let Some(m) = &mut config.eval.model {
            *m = base.join(&*m);
        }
        Ok(LoadedConfig {
            config,
            hash: sha256_hex(text.as_bytes()),
        })
    }

    /// Applies a `--seed` override to every seeded section.
    pub fn override_seed(&mut self, seed: u64) {
        self.pipeline.seeds = vec![seed];
        if let Some(s) = &mut self.synth {
            s.seed = seed;
        }
        self.diagnose.proxy.seed = seed;
    }

    pub fn seeds(&self) -> Vec<u64> {
        let mut seeds = self.pipeline.seeds.clone();
        if let Some(s) = &self.synth {
            seeds.push(s.seed);
        }
        seeds
    }

    pub fn target(&self) -> Result<SensorDataset, CliError> {
        self.data
            .target
            .as_ref()
            .ok_or_else(|| CliError::Config("`data.target` is not set".into()))?
            .load()
    }

    pub fn sources(&self) -> Result<Vec<SensorDataset>, CliError> {
        self.data.sources.iter().map(DatasetRef::load).collect()
    }
}
