//! Experiment configuration: one TOML document with a format version,
//! adjustable from the command line through dotted `key=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{default_classes, default_domains, DatasetSpec, DomainSpec, SplitSpec};
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::{AblationAxis, Protocol};
use crate::train::{PretrainConfig, TuneConfig};

pub const CONFIG_FORMAT_VERSION: u32 = 1;

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "STYLEPRO_OUT";
pub const DEFAULT_OUT_ROOT: &str = "runs";

pub fn default_out_root() -> PathBuf {
    std::env::var_os(OUT_ROOT_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Seed of the tuning/evaluation dataset.
    pub seed: u64,
    /// Seed of the separate dataset the backbone is pre-trained on.
    pub pretrain_seed: u64,
    pub samples_per_cell: usize,
    pub pretrain_samples_per_cell: usize,
    pub n_classes: usize,
    pub domains: Vec<DomainSpec>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 200,
            pretrain_seed: 100,
            samples_per_cell: 24,
            pretrain_samples_per_cell: 40,
            n_classes: 8,
            domains: default_domains(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub fraction_base: f64,
    pub shots: usize,
    pub source_domains: Vec<usize>,
    pub target_domains: Vec<usize>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            fraction_base: 0.5,
            shots: 16,
            source_domains: vec![0, 1],
            target_domains: vec![2, 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub protocol: Protocol,
    pub seeds: Vec<u64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            protocol: Protocol::DomainGeneralization,
            seeds: (0..5).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub axis: AblationAxis,
    pub seeds: Vec<u64>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            axis: AblationAxis::LossTerms,
            seeds: (0..5).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub format_version: u32,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub tune: TuneConfig,
    pub split: SplitConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            format_version: CONFIG_FORMAT_VERSION,
            data: DataConfig::default(),
            encoder: EncoderConfig::default(),
            pretrain: PretrainConfig::default(),
            tune: TuneConfig::default(),
            split: SplitConfig::default(),
            eval: EvalConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

/// Parses the right-hand side of an override as a TOML value, falling back to
/// a bare string so `eval.protocol=base_to_novel` needs no quoting.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies one `a.b.c=value` override to a TOML tree.
pub fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Configuration(format!("override {spec:?} is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Configuration(format!("override key {key:?} is malformed")));
    }
    let mut node = root;
    for part in &path[..path.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Configuration(format!("override {key:?} descends into a non-table")))?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::Configuration(format!("override {key:?} descends into a non-table")))?;
    table.insert(path[path.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl ExperimentConfig {
    /// Reads `path` (or starts from the defaults), applies `overrides` in
    /// order, then checks the format version and value ranges.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut tree = match path {
            Some(p) => {
                if !p.exists() {
                    return Err(Error::MissingPrerequisite(format!("config file {} not found", p.display())));
                }
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                toml::from_str::<toml::Value>(&text)
                    .map_err(|e| Error::Configuration(format!("{}: {e}", p.display())))?
            }
            None => toml::Value::try_from(Self::default()).map_err(|e| Error::Format(e.to_string()))?,
        };
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        let cfg: Self = tree
            .try_into()
            .map_err(|e: toml::de::Error| Error::Configuration(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Configuration(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != CONFIG_FORMAT_VERSION {
            return Err(Error::Compatibility(format!(
                "config format version {} (supported: {CONFIG_FORMAT_VERSION})",
                self.format_version
            )));
        }
        self.encoder.validate()?;
        self.tune.validate(&self.encoder)?;
        if self.data.n_classes > self.encoder.max_classes {
            return Err(Error::Configuration(format!(
                "{} classes exceed the encoder vocabulary of {}",
                self.data.n_classes, self.encoder.max_classes
            )));
        }
        let ids: Vec<usize> = self.data.domains.iter().map(|d| d.id).collect();
        for d in self.split.source_domains.iter().chain(&self.split.target_domains) {
            if !ids.contains(d) {
                return Err(Error::Configuration(format!("split names unknown domain {d}")));
            }
        }
        if self.eval.seeds.is_empty() || self.ablate.seeds.is_empty() {
            return Err(Error::Configuration("seed lists must be nonempty".into()));
        }
        Ok(())
    }

    pub fn dataset_spec(&self) -> Result<DatasetSpec> {
        Ok(DatasetSpec {
            seed: self.data.seed,
            image_size: self.encoder.image_size,
            channels: self.encoder.channels,
            samples_per_cell: self.data.samples_per_cell,
            domains: self.data.domains.clone(),
            classes: default_classes(self.data.n_classes)?,
        })
    }

    /// Pre-training data: same domains and classes, independent samples.
    pub fn pretrain_dataset_spec(&self) -> Result<DatasetSpec> {
        Ok(DatasetSpec {
            seed: self.data.pretrain_seed,
            samples_per_cell: self.data.pretrain_samples_per_cell,
            ..self.dataset_spec()?
        })
    }

    pub fn split_spec(&self, seed: u64) -> SplitSpec {
        SplitSpec {
            fraction_base: self.split.fraction_base,
            shots: self.split.shots,
            seed,
            source_domains: self.split.source_domains.clone(),
            target_domains: self.split.target_domains.clone(),
        }
    }

    pub fn tune_config(&self, seed: u64) -> TuneConfig {
        TuneConfig {
            seed,
            ..self.tune.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
        assert_eq!(ExperimentConfig::load(None, &[]).unwrap(), cfg);
    }

    #[test]
    fn overrides_apply_after_parsing() {
        let cfg = ExperimentConfig::load(
            None,
            &[
                "eval.protocol=base_to_novel".into(),
                "tune.weights.lambda_f=3.5".into(),
                "tune.epochs = 2".into(),
                "eval.seeds=[7, 8]".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.eval.protocol, Protocol::BaseToNovel);
        assert_eq!(cfg.tune.weights.lambda_f, 3.5);
        assert_eq!(cfg.tune.epochs, 2);
        assert_eq!(cfg.eval.seeds, vec![7, 8]);
    }

    #[test]
    fn bad_overrides_are_configuration_errors() {
        for o in ["tune.nonexistent=1", "tune.epochs", "tune..epochs=1", "tune.learning_rate=-1"] {
            let err = ExperimentConfig::load(None, &[o.to_string()]).unwrap_err();
            assert_eq!(err.category(), "configuration", "{o}");
        }
        let err = ExperimentConfig::load(None, &["format_version=9".into()]).unwrap_err();
        assert_eq!(err.category(), "compatibility");
    }
}
