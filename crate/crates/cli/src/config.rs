//! Run configuration: one flat TOML table whose keys are the `SearchConfig`
//! fields plus the dataset keys below. Environment variables named
//! `NASGRAPH_<KEY>` override file values.

use std::path::PathBuf;

use nasgraph::search::SearchConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::{Table, Value};

pub const ENV_PREFIX: &str = "NASGRAPH_";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },
    #[error("malformed config: {0}")]
    Parse(String),
    #[error("key `{0}` is nested; the config is a flat key = value table")]
    Nested(String),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    #[default]
    Synthetic,
    Mnist,
    Cifar10,
}

impl std::str::FromStr for DatasetKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "synthetic" => Ok(Self::Synthetic),
            "mnist" => Ok(Self::Mnist),
            "cifar10" => Ok(Self::Cifar10),
            _ => Err(format!("unknown dataset `{s}` (synthetic, mnist, cifar10)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dataset: DatasetKind,
    /// Directory holding the IDX or CIFAR-10 binary files.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    /// Keep only the first `n` training images.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_limit: Option<usize>,
    pub synthetic_classes: usize,
    pub synthetic_train: usize,
    pub synthetic_test: usize,
    pub synthetic_dim: usize,
    pub synthetic_channels: usize,
    pub synthetic_noise: f64,
    pub synthetic_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = nasgraph::data::SyntheticSpec::default();
        Self {
            dataset: DatasetKind::Synthetic,
            data_dir: None,
            train_limit: None,
            synthetic_classes: s.classes,
            synthetic_train: s.train_size,
            synthetic_test: s.test_size,
            synthetic_dim: s.image_dim,
            synthetic_channels: s.channels,
            synthetic_noise: s.noise,
            synthetic_seed: 0,
        }
    }
}

const DATA_KEYS: [&str; 10] = [
    "dataset",
    "data_dir",
    "train_limit",
    "synthetic_classes",
    "synthetic_train",
    "synthetic_test",
    "synthetic_dim",
    "synthetic_channels",
    "synthetic_noise",
    "synthetic_seed",
];

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub search: SearchConfig,
    pub data: DataConfig,
}

fn search_keys() -> Vec<String> {
    Table::try_from(SearchConfig::default())
        .expect("search config is a flat table")
        .keys()
        .cloned()
        .collect()
}

/// Every key the config accepts.
pub fn known_keys() -> Vec<String> {
    let mut keys = search_keys();
    keys.extend(DATA_KEYS.iter().map(|k| k.to_string()));
    keys
}

/// An override value is read as a TOML literal when it parses as one
/// (`3`, `0.5`, `true`) and as a bare string otherwise (`zero_one`).
fn env_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

impl RunConfig {
    /// Parses `text`, then applies overrides from `env` for known keys.
    /// Other `NASGRAPH_*` variables are left alone.
    pub fn parse<I>(text: &str, env: I) -> Result<Self, ConfigError>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut table: Table = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let known = known_keys();
        for (k, v) in env {
            let Some(key) = k.strip_prefix(ENV_PREFIX).map(str::to_lowercase) else {
                continue;
            };
            if known.contains(&key) {
                table.insert(key, env_value(&v));
            }
        }
        let mut data = Table::new();
        for key in DATA_KEYS {
            if let Some(v) = table.remove(key) {
                data.insert(key.to_string(), v);
            }
        }
        for (k, v) in table.iter().chain(data.iter()) {
            if matches!(v, Value::Table(_)) {
                return Err(ConfigError::Nested(k.clone()));
            }
        }
        let search: SearchConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        let data: DataConfig = data
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        search.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if data.dataset != DatasetKind::Synthetic && data.data_dir.is_none() {
            return Err(ConfigError::Invalid(format!(
                "dataset {:?} needs data_dir",
                data.dataset
            )));
        }
        Ok(Self { search, data })
    }

    pub fn load(path: Option<&std::path::Path>) -> Result<Self, ConfigError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| ConfigError::File {
                path: p.to_path_buf(),
                message: e.to_string(),
            })?,
            None => String::new(),
        };
        Self::parse(&text, std::env::vars())
    }

    /// The resolved config as flat TOML; `parse(to_toml(c), [])` returns `c`.
    pub fn to_toml(&self) -> String {
        let mut table = Table::try_from(&self.search).expect("search config serializes");
        table.extend(Table::try_from(&self.data).expect("data config serializes"));
        toml::to_string(&table).expect("flat table serializes")
    }
}
