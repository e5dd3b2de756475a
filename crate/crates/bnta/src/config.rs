//! Run configuration: one TOML file with a section per module, plus
//! `section.key=value` overrides from the command line.
//!
//! The file is merged over the built-in defaults, so a file only needs the
//! keys it changes. Unknown keys are rejected. A few fields are derived and
//! overwritten on resolution: the per-module seeds follow the top-level
//! `seed`, the model's input size follows the data section and its
//! identity count follows the training set.

use std::path::Path;

use bnta_core::adapt::TtaConfig;
use bnta_core::model::ModelConfig;
use bnta_core::synth::BenchmarkSpec;
use bnta_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{self, Error, Result};

pub const ECHO_FILE: &str = "config.toml";

/// Evaluation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Random probe/gallery re-splits averaged per report.
    pub splits: usize,
    /// L2-normalize features before ranking.
    pub normalize: bool,
    /// Images per forward pass.
    pub batch: usize,
    /// Bins of the BN output histogram.
    pub histogram_bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            splits: 10,
            normalize: false,
            batch: 128,
            histogram_bins: 40,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Root of every random stream (data, init, shuffle, tta, splits).
    pub seed: u64,
    pub data: BenchmarkSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub tta: TtaConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data: BenchmarkSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            tta: TtaConfig::default(),
            eval: EvalConfig::default(),
        }
        .resolved()
    }
}

/// Recursively merge `over` into `base`; tables merge, other values replace.
fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parse `a.b.c=value` into a nested table. The value is read as a TOML
/// value when it parses as one and as a bare string otherwise.
pub fn parse_override(spec: &str) -> Result<Table> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("override `{spec}` has an empty key")));
    }
    let value = format!("v = {}", raw.trim())
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.trim().to_string()));
    let mut table = Table::new();
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("non-empty key");
    let mut slot = &mut table;
    for p in parts {
        slot = match slot.entry(p).or_insert_with(|| Value::Table(Table::new())) {
            Value::Table(t) => t,
            _ => unreachable!("fresh tables only"),
        };
    }
    slot.insert(last.to_string(), value);
    Ok(table)
}

impl RunConfig {
    /// Defaults, then the file (if any), then each override in order.
    pub fn build(file: Option<&Path>, overrides: &[Table]) -> Result<Self> {
        let defaults = toml::to_string(&RunConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
        let mut table: Table = defaults.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if let Some(path) = file {
            let text = String::from_utf8(error::read(path)?)
                .map_err(|_| Error::format(path, "config file is not UTF-8"))?;
            let user: Table = text
                .parse()
                .map_err(|e: toml::de::Error| Error::format(path, e.to_string()))?;
            merge(&mut table, user);
        }
        for o in overrides {
            merge(&mut table, o.clone());
        }
        let cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        let cfg = cfg.resolved();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Propagate the seed and the data geometry into the module sections.
    pub fn resolved(mut self) -> Self {
        self.data.seed = self.seed;
        self.train.seed = self.seed;
        self.tta.seed = self.seed;
        self.model.image_height = self.data.height;
        self.model.image_width = self.data.width;
        self.model.num_ids = self.data.train_ids * self.data.sources.len();
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.block_sizes()?;
        self.train.weights.validate()?;
        self.tta.validate()?;
        if self.eval.splits == 0 || self.eval.batch == 0 || self.eval.histogram_bins == 0 {
            return Err(Error::Config("eval.splits, eval.batch and eval.histogram_bins must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Write the effective configuration and the tool version into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        let text = format!("# bnta {} effective configuration\n{}", crate::TOOL_VERSION, self.to_toml());
        error::write(&dir.join(ECHO_FILE), text.as_bytes())
    }
}
