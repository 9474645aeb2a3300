//! Serializable pipeline configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::annotator::AnnotateOptions;
use crate::corpus::{DatasetFormat, IngestOptions};
use crate::error::{read_to_string, write_string, Error, Result};
use crate::eval::experiment::{ExperimentConfig, Method, MethodConfigs};
use crate::kt::Aggregation;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    /// Raw dataset file to ingest.
    pub raw: Option<PathBuf>,
    pub format: DatasetFormat,
    /// Canonical corpus (ingest output, annotation input).
    pub canonical: Option<PathBuf>,
    /// Annotated canonical corpus used for training and evaluation.
    pub annotated: Option<PathBuf>,
    pub ingest: IngestOptions,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            raw: None,
            format: DatasetFormat::Canonical,
            canonical: None,
            annotated: None,
            ingest: IngestOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnotationConfig {
    pub model_id: String,
    pub cache_dir: Option<PathBuf>,
    /// Directory of recorded responses to replay before calling the endpoint.
    pub replay_dir: Option<PathBuf>,
    pub options: AnnotateOptions,
}

impl Default for AnnotationConfig {
    fn default() -> Self {
        AnnotationConfig {
            model_id: "gpt-4o".into(),
            cache_dir: None,
            replay_dir: None,
            options: AnnotateOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    /// 1 uses the published train/test tags of the corpus.
    pub folds: usize,
    pub val_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            folds: 5,
            val_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub corpus: CorpusConfig,
    pub taxonomy: Option<PathBuf>,
    pub annotation: AnnotationConfig,
    pub splits: SplitConfig,
    /// Saved split plan; created from `splits` when absent.
    pub split_plan: Option<PathBuf>,
    pub methods: MethodConfigs,
    pub aggregation: Aggregation,
    pub curves_top_n: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            corpus: CorpusConfig::default(),
            taxonomy: None,
            annotation: AnnotationConfig::default(),
            splits: SplitConfig::default(),
            split_plan: None,
            methods: MethodConfigs::default(),
            aggregation: Aggregation::Mean,
            curves_top_n: 15,
            seed: 0,
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl PipelineConfig {
    /// Reads a JSON document; missing fields take their defaults and unknown
    /// fields are rejected.
    pub fn load(path: &Path) -> Result<Self> {
        let text = read_to_string(path)?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        let cfg: PipelineConfig = serde_json::from_value(value.clone())?;
        let round = serde_json::to_value(&cfg)?;
        if let Some(unknown) = unknown_field(&value, &round, "") {
            return Err(Error::Config(format!("unknown config field `{unknown}` in {}", path.display())));
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_string(path, &self.to_json()?)
    }

    pub fn experiment(&self, method: Method) -> ExperimentConfig {
        ExperimentConfig {
            method,
            seed: self.seed,
            aggregation: self.aggregation,
            curves_top_n: self.curves_top_n,
            methods: self.methods.clone(),
        }
    }
}

/// First key of `given` that does not survive a round trip through the
/// typed config.
fn unknown_field(given: &serde_json::Value, typed: &serde_json::Value, prefix: &str) -> Option<String> {
    let (serde_json::Value::Object(g), serde_json::Value::Object(t)) = (given, typed) else {
        return None;
    };
    for (k, v) in g {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match t.get(k) {
            None => return Some(path),
            Some(tv) => {
                if let Some(u) = unknown_field(v, tv, &path) {
                    return Some(u);
                }
            }
        }
    }
    None
}
