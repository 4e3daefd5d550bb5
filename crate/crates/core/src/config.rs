//! Run configuration: TOML sections `[model]`, `[rain]`, `[optim]` and
//! `[train]` layered over the defaults of the chosen variant.
//!
//! Resolution order is variant defaults, then the file, then `key=value`
//! overrides such as `train.max_steps=500`. Unknown keys are errors.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::data::RainParams;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};
use crate::train::{OptimConfig, TrainConfig};

pub const CONFIG_FILE: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub rain: RainParams,
    pub optim: OptimConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn for_variant(variant: Variant) -> Self {
        let model = ModelConfig::for_variant(variant);
        let (optim, train) = match variant {
            Variant::Elf | Variant::ElfLw => (
                OptimConfig::default(),
                TrainConfig { epochs: 600, batch_size: 12, patch: 256, seed: 0, max_steps: 0, save_every: 0 },
            ),
            // 600 → 120 epochs, so decay_every 65 → 13
            Variant::Desk => (
                OptimConfig { decay_every: 13, ..OptimConfig::default() },
                TrainConfig { epochs: 120, batch_size: 2, patch: 32, seed: 0, max_steps: 0, save_every: 0 },
            ),
        };
        Self { model, rain: RainParams::default(), optim, train }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.rain.validate()?;
        self.optim.validate()?;
        self.train.validate()?;
        if self.train.patch % self.model.spatial_multiple() != 0 {
            return Err(Error::Config(format!(
                "train.patch {} must be a multiple of {}",
                self.train.patch,
                self.model.spatial_multiple()
            )));
        }
        Ok(())
    }

    /// Resolves `text` (may be empty) plus `overrides` against the defaults
    /// of the variant named in `model.variant`, or `desk` if absent.
    pub fn resolve(text: &str, overrides: &[String]) -> Result<Self> {
        let mut file: Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut file, o)?;
        }
        let variant = match file.get("model").and_then(|m| m.get("variant")) {
            Some(Value::String(s)) => s.parse()?,
            Some(v) => return Err(Error::Config(format!("model.variant must be a string, got {v}"))),
            None => Variant::Desk,
        };
        let mut merged = Value::try_from(Self::for_variant(variant)).expect("serializable defaults");
        merge(&mut merged, Value::Table(file));
        let cfg: Self = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::resolve(&text, overrides).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        format!(
            "# resolved by elf-core {}\n{}",
            env!("CARGO_PKG_VERSION"),
            toml::to_string(self).expect("serializable config")
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Table(b), Value::Table(o)) => {
            for (k, v) in o {
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

/// `section.key=value`; the value is read as TOML and falls back to a bare
/// string, so `model.variant=ELF` works unquoted.
fn apply_override(table: &mut Table, spec: &str) -> Result<()> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("bad override key {path:?}")));
    }
    let (last, parents) = keys.split_last().expect("non-empty");
    let mut cur = table;
    for k in parents {
        cur = cur
            .entry(k.to_string())
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{path}: {k} is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
