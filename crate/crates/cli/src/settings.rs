//! Flat run configuration: model, training and data keys in one JSON
//! object. Files are overlaid on the defaults and flags on the file.

use std::path::{Path, PathBuf};

use gcc_unet::data::{DatasetSpec, Source, Split};
use gcc_unet::network::ModelConfig;
use gcc_unet::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

/// Dataset keys of the flat configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSettings {
    /// `synthetic` or `drive:<root>`.
    pub data: String,
    /// Synthetic corpus size before the train/test split.
    pub samples: usize,
    /// Synthetic image side.
    pub size: usize,
    /// Patch side for training; `null` trains on whole images.
    pub patch: Option<usize>,
    pub stride: Option<usize>,
    /// Share of training images held out for early stopping.
    pub val_fraction: f64,
}

impl Default for DataSettings {
    fn default() -> Self {
        DataSettings {
            data: "synthetic".into(),
            samples: 40,
            size: 48,
            patch: None,
            stride: None,
            val_fraction: 0.1,
        }
    }
}

impl DataSettings {
    pub fn source(&self, seed: u64) -> Result<Source, CliError> {
        if self.data == "synthetic" {
            return Ok(Source::Synthetic {
                seed,
                count: self.samples,
                size: self.size,
            });
        }
        match self.data.strip_prefix("drive:") {
            Some(root) if !root.is_empty() => {
                let path = PathBuf::from(root);
                if !path.is_dir() {
                    return Err(CliError::usage(format!(
                        "data root {} does not exist or is not a directory",
                        path.display()
                    )));
                }
                Ok(Source::DriveLayout { path })
            }
            _ => Err(CliError::usage(format!(
                "data must be `synthetic` or `drive:<path>`, got `{}`",
                self.data
            ))),
        }
    }

    pub fn spec(&self, seed: u64, split: Split) -> Result<DatasetSpec, CliError> {
        let patching = match (self.patch, self.stride) {
            (None, None) => None,
            (Some(p), s) => Some((p, s.unwrap_or(p))),
            (None, Some(_)) => return Err(CliError::usage("stride needs patch")),
        };
        Ok(DatasetSpec {
            source: self.source(seed)?,
            split,
            patching,
        })
    }
}

/// The three typed views of one flat configuration.
#[derive(Debug, Clone)]
pub struct Settings {
    pub flat: Map<String, Value>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataSettings,
}

fn object(v: Value) -> Map<String, Value> {
    match v {
        Value::Object(m) => m,
        _ => unreachable!("config structs serialize to objects"),
    }
}

fn defaults() -> [Map<String, Value>; 3] {
    [
        object(serde_json::to_value(ModelConfig::default()).expect("serializable")),
        object(serde_json::to_value(TrainConfig::default()).expect("serializable")),
        object(serde_json::to_value(DataSettings::default()).expect("serializable")),
    ]
}

fn pick<T: serde::de::DeserializeOwned>(
    flat: &Map<String, Value>,
    keys: &Map<String, Value>,
) -> Result<T, CliError> {
    let sub: Map<String, Value> = flat
        .iter()
        .filter(|(k, _)| keys.contains_key(*k))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    serde_json::from_value(Value::Object(sub))
        .map_err(|e| CliError::usage(format!("bad config value: {e}")))
}

/// Reads a flat config, or the `config` object of a run manifest.
pub fn read_file(path: &Path) -> Result<Map<String, Value>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| {
        CliError::usage(format!("config {} is not valid JSON: {e}", path.display()))
    })?;
    match value {
        Value::Object(mut m) => match m.remove("config") {
            Some(Value::Object(inner)) if m.contains_key("command") => Ok(inner),
            Some(other) => {
                m.insert("config".into(), other);
                Ok(m)
            }
            None => Ok(m),
        },
        _ => Err(CliError::usage(format!(
            "config {} must be a JSON object",
            path.display()
        ))),
    }
}

impl Settings {
    /// Defaults, then `file`, then `overrides`, validated.
    pub fn resolve(
        file: Option<Map<String, Value>>,
        overrides: Map<String, Value>,
    ) -> Result<Self, CliError> {
        let [m, t, d] = defaults();
        let mut flat = Map::new();
        for part in [&m, &t, &d] {
            flat.extend(part.clone());
        }
        let mut patience_set = false;
        for layer in file.into_iter().chain(std::iter::once(overrides)) {
            for (k, v) in layer {
                patience_set |= k == "patience";
                if !flat.contains_key(&k) {
                    return Err(CliError::usage(format!("unknown config key `{k}`")));
                }
                flat.insert(k, v);
            }
        }
        // short runs keep working without restating the patience
        if !patience_set {
            if let (Some(e), Some(p)) = (flat["max_epochs"].as_u64(), flat["patience"].as_u64()) {
                flat.insert("patience".into(), Value::from(p.min(e)));
            }
        }
        let model: ModelConfig = pick(&flat, &m)?;
        let train: TrainConfig = pick(&flat, &t)?;
        let data: DataSettings = pick(&flat, &d)?;
        model.validate()?;
        train.validate()?;
        if !(0.0..1.0).contains(&data.val_fraction) {
            return Err(CliError::usage("val_fraction must lie in [0, 1)"));
        }
        Ok(Settings {
            flat,
            model,
            train,
            data,
        })
    }

    pub fn seed(&self) -> u64 {
        self.model.seed
    }
}
