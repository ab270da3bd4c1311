//! The tool configuration: one TOML file with a section per module, layered
//! over a built-in profile. Unknown keys anywhere are errors.

use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::nn::NetworkConfig;
use crate::pipeline::PipelineConfig;
use crate::preprocess::PreprocessConfig;
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    /// 64³/128³ stages and narrow nets: trainable on a workstation CPU.
    Desk,
    /// 128³/256³ stages and the published widths and schedule.
    Paper,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            _ => Err(Error::InvalidConfig(format!("profile must be desk or paper, not '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub stage1: NetworkConfig,
    pub stage2: NetworkConfig,
    /// Shared by the sagittal, coronal and axial models.
    pub view2d: NetworkConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub view2d: TrainConfig,
    /// Start stage 2 from the stage-1 weights of the same run instead of a
    /// fresh initialization. Needs identical stage-1 and stage-2 networks.
    #[serde(default)]
    pub stage2_from_stage1: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolConfig {
    pub preprocess: PreprocessConfig,
    pub augment: AugmentConfig,
    pub network: NetworkSection,
    pub train: TrainSection,
    pub pipeline: PipelineConfig,
}

impl ToolConfig {
    pub fn profile(p: Profile) -> Self {
        let net3 = NetworkConfig::paper_3d();
        let net2 = NetworkConfig::paper_2d();
        match p {
            Profile::Paper => ToolConfig {
                preprocess: PreprocessConfig::default(),
                augment: AugmentConfig::default(),
                network: NetworkSection {
                    stage1: net3.clone(),
                    stage2: net3,
                    view2d: net2,
                },
                train: TrainSection {
                    stage1: TrainConfig {
                        epochs: 200,
                        ..Default::default()
                    },
                    stage2: TrainConfig {
                        epochs: 200,
                        ..Default::default()
                    },
                    view2d: TrainConfig {
                        epochs: 10,
                        batch_size: 32,
                        lr_multipliers: [0.0, 0.2, 1.0],
                        ..Default::default()
                    },
                    stage2_from_stage1: false,
                },
                pipeline: PipelineConfig::default(),
            },
            Profile::Desk => {
                let small3 = NetworkConfig {
                    base_channels: 8,
                    ..net3
                };
                ToolConfig {
                    preprocess: PreprocessConfig::default(),
                    augment: AugmentConfig::default(),
                    network: NetworkSection {
                        stage1: small3.clone(),
                        stage2: small3,
                        view2d: NetworkConfig {
                            base_channels: 16,
                            ..net2
                        },
                    },
                    train: TrainSection {
                        stage1: TrainConfig {
                            epochs: 5,
                            ..Default::default()
                        },
                        stage2: TrainConfig {
                            epochs: 2,
                            ..Default::default()
                        },
                        view2d: TrainConfig {
                            epochs: 1,
                            batch_size: 16,
                            ..Default::default()
                        },
                        stage2_from_stage1: true,
                    },
                    pipeline: PipelineConfig::desk(),
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.preprocess.validate()?;
        self.augment.validate()?;
        for n in [&self.network.stage1, &self.network.stage2, &self.network.view2d] {
            n.validate()?;
        }
        for t in [&self.train.stage1, &self.train.stage2, &self.train.view2d] {
            t.validate()?;
        }
        if self.train.stage2_from_stage1 && self.network.stage1 != self.network.stage2 {
            return Err(Error::InvalidConfig(
                "train.stage2_from_stage1 needs identical network.stage1 and network.stage2".into(),
            ));
        }
        self.pipeline.validate()
    }

    /// Profile defaults, then `file` (TOML text), then `overrides`
    /// (`section.key = value` pairs, values in TOML syntax).
    pub fn layered(profile: Profile, file: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        let mut base = Value::try_from(ToolConfig::profile(profile))
            .map_err(|e| Error::InvalidConfig(format!("serializing defaults: {e}")))?;
        if let Some(text) = file {
            let table: Table = text
                .parse()
                .map_err(|e: toml::de::Error| Error::InvalidConfig(e.message().to_string()))?;
            merge(&mut base, Value::Table(table));
        }
        for (key, raw) in overrides {
            merge(&mut base, override_value(key, raw)?);
        }
        let cfg: ToolConfig = base
            .try_into()
            .map_err(|e: toml::de::Error| Error::InvalidConfig(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(profile: Profile, path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = path
            .map(|p| std::fs::read_to_string(p).map_err(|e| Error::io(p, e)))
            .transpose()?;
        Self::layered(profile, text.as_deref(), overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is representable as TOML")
    }
}

/// A one-key nested table for a dotted `key`. Bare words that do not parse
/// as TOML values are taken as strings.
fn override_value(key: &str, raw: &str) -> Result<Value> {
    let parsed: Value = match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("key just written"),
        Err(_) => Value::String(raw.to_string()),
    };
    let mut v = parsed;
    for part in key.rsplit('.') {
        if part.is_empty() {
            return Err(Error::InvalidConfig(format!("malformed override key '{key}'")));
        }
        let mut t = Table::new();
        t.insert(part.to_string(), v);
        v = Value::Table(t);
    }
    Ok(v)
}

/// Tables merge key by key; anything else replaces.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Table(b), Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
