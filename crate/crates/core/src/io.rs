//! Schema configs and CSV datasets on disk.
//!
//! A dataset directory holds one CSV file per block, read in file-name order.
//! Each file has the header `timestamp,subject_id,<channel names...>,label`
//! with timestamps in seconds, strictly increasing.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::{Block, Channel, ChannelSchema, LabelSet, SensorDataset};
use crate::error::{Error, Result};

/// Structured description of one domain's channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemaConfig {
    pub domain_id: String,
    /// Sample rate of the stored CSV rows; inferred from timestamps when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate: Option<f64>,
    #[serde(default = "default_labels")]
    pub labels: Vec<String>,
    pub channels: Vec<Channel>,
}

fn default_labels() -> Vec<String> {
    LabelSet::default().names().to_vec()
}

impl SchemaConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: SchemaConfig = toml::from_str(text)?;
        cfg.schema()?;
        cfg.label_set()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| Error::Data {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn schema(&self) -> Result<ChannelSchema> {
        ChannelSchema::new(self.channels.clone())
    }

    pub fn label_set(&self) -> Result<LabelSet> {
        LabelSet::new(self.labels.iter().cloned())
    }

    pub fn describe(ds: &SensorDataset) -> Self {
        SchemaConfig {
            domain_id: ds.domain_id.clone(),
            rate: Some(ds.rate),
            labels: ds.label_set.names().to_vec(),
            channels: ds.schema.channels().to_vec(),
        }
    }
}

fn data_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Data {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn csv_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("csv")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(data_err(dir, "no .csv files found"));
    }
    Ok(files)
}

/// Reads one block file; returns the block and its timestamps.
pub fn read_block(path: &Path, schema: &ChannelSchema, labels: &LabelSet) -> Result<(Block, Vec<f64>)> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let mut expected = vec!["timestamp".to_string(), "subject_id".to_string()];
    expected.extend(schema.names().iter().map(|s| s.to_string()));
    expected.push("label".into());
    if header != expected {
        return Err(data_err(
            path,
            format!("header {:?} disagrees with schema {:?}", header, expected),
        ));
    }
    let d = schema.len();
    let mut values = Vec::new();
    let mut block_labels = Vec::new();
    let mut times = Vec::new();
    let mut subject: Option<String> = None;
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let line = row + 2;
        let num = |i: usize| -> Result<f64> {
            record[i]
                .parse::<f64>()
                .map_err(|_| data_err(path, format!("line {line}: `{}` is not a number", &record[i])))
        };
        let t = num(0)?;
        if let Some(&prev) = times.last() {
            if !(t > prev) {
                return Err(data_err(path, format!("line {line}: timestamps must increase strictly")));
            }
        }
        times.push(t);
        match &subject {
            None => subject = Some(record[1].to_string()),
            Some(s) if s != &record[1] => {
                return Err(data_err(path, format!("line {line}: subject changes within a block")));
            }
            _ => {}
        }
        for c in 0..d {
            values.push(num(2 + c)?);
        }
        let token = &record[2 + d];
        let label = labels
            .resolve(token)
            .ok_or_else(|| data_err(path, format!("line {line}: label `{token}` not in label set")))?;
        block_labels.push(label);
    }
    let subject = subject.ok_or_else(|| data_err(path, "no data rows"))?;
    let samples = Array2::from_shape_vec((block_labels.len(), d), values).expect("row-major values");
    Ok((Block::new(subject, samples, block_labels), times))
}

fn inferred_rate(times: &[f64]) -> Option<f64> {
    (times.len() >= 2).then(|| (times.len() - 1) as f64 / (times[times.len() - 1] - times[0]))
}

/// Loads every CSV block under `dir` against `cfg`.
pub fn load_dataset(dir: &Path, cfg: &SchemaConfig) -> Result<SensorDataset> {
    let schema = cfg.schema()?;
    let labels = cfg.label_set()?;
    let mut blocks = Vec::new();
    let mut rate = cfg.rate;
    for file in csv_files(dir).map_err(|e| data_err(dir, e.to_string()))? {
        let (block, times) = read_block(&file, &schema, &labels)?;
        if rate.is_none() {
            rate = inferred_rate(&times);
        }
        blocks.push(block);
    }
    let rate = rate.ok_or_else(|| data_err(dir, "cannot infer sample rate; set `rate` in the schema config"))?;
    SensorDataset::new(cfg.domain_id.clone(), schema, labels, blocks, rate)
}

/// Writes each block to `dir/block_NNNN.csv` with timestamps `i / rate`.
pub fn write_dataset(ds: &SensorDataset, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(ds.blocks.len());
    for (i, block) in ds.blocks.iter().enumerate() {
        let path = dir.join(format!("block_{i:04}.csv"));
        let mut w = csv::Writer::from_path(&path)?;
        let mut header = vec!["timestamp".to_string(), "subject_id".to_string()];
        header.extend(ds.schema.names().iter().map(|s| s.to_string()));
        header.push("label".into());
        w.write_record(&header)?;
        for (t, (row, &label)) in block.samples.rows().into_iter().zip(&block.labels).enumerate() {
            let mut rec = Vec::with_capacity(row.len() + 3);
            rec.push(format!("{}", t as f64 / ds.rate));
            rec.push(block.subject_id.clone());
            rec.extend(row.iter().map(|v| format!("{v}")));
            rec.push(ds.label_set.name(label).unwrap_or("?").to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        paths.push(path);
    }
    Ok(paths)
}

/// Writes the dataset plus its `schema.toml`.
pub fn write_dataset_with_schema(ds: &SensorDataset, dir: &Path) -> Result<()> {
    write_dataset(ds, dir)?;
    fs::write(dir.join("schema.toml"), SchemaConfig::describe(ds).to_toml()?)?;
    Ok(())
}
