use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use xlsr::{ModelConfig, TrainConfig};

use crate::args::CommonArgs;

pub const MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantOptions {
    /// Calibration uses the first this-many training images.
    pub calibration_images: usize,
}

impl Default for QuantOptions {
    fn default() -> Self {
        QuantOptions { calibration_images: 8 }
    }
}

/// Fully resolved configuration of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub quant: QuantOptions,
}

const SECTIONS: [&str; 3] = ["model", "train", "quant"];

impl RunConfig {
    /// Defaults, then `--desk-scale`, `--seed` and `--scale`, then `--config` overrides.
    pub fn resolve(common: &CommonArgs) -> Result<Self> {
        let mut train = if common.desk_scale { TrainConfig::desk_scale() } else { TrainConfig::default() };
        train.rng_seed = common.seed;
        let mut model = ModelConfig::default();
        if let Some(scale) = common.scale {
            model.scale = scale;
        }
        let base = RunConfig { model, train, quant: QuantOptions::default() };
        let mut tree = serde_json::to_value(&base)?;
        for item in &common.overrides {
            apply_override(&mut tree, item)?;
        }
        let run: RunConfig = serde_json::from_value(tree).context("applying --config overrides")?;
        run.model.validate()?;
        run.train.validate()?;
        if run.quant.calibration_images == 0 {
            bail!("quant.calibration_images must be positive");
        }
        Ok(run)
    }
}

fn apply_override(tree: &mut Value, item: &str) -> Result<()> {
    let (key, raw) = item.split_once('=').ok_or_else(|| anyhow!("override {item:?} is not KEY=VALUE"))?;
    let (key, raw) = (key.trim(), raw.trim());
    let sections = tree.as_object_mut().expect("config serializes to an object");
    let section = match key.split_once('.') {
        Some((s, k)) if SECTIONS.contains(&s) => Some((s.to_string(), k)),
        _ => None,
    };
    let (section, field) = match section {
        Some(found) => found,
        None => {
            let owner = SECTIONS
                .iter()
                .find(|s| sections[**s].as_object().is_some_and(|m| m.contains_key(key)))
                .ok_or_else(|| anyhow!("unknown config key {key:?}"))?;
            (owner.to_string(), key)
        }
    };
    let fields: &mut Map<String, Value> = sections[&section].as_object_mut().expect("sections are objects");
    if !fields.contains_key(field) {
        bail!("unknown config key {section}.{field}");
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    fields.insert(field.to_string(), value);
    Ok(())
}

/// Everything needed to repeat a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub git_revision: Option<String>,
    pub command: String,
    /// Arguments after the program name.
    pub args: Vec<String>,
    pub common: CommonArgs,
    pub config: RunConfig,
}

impl RunManifest {
    pub fn new(command: &str, args: Vec<String>, common: &CommonArgs, config: &RunConfig) -> Self {
        RunManifest {
            tool: "xlsr".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            git_revision: option_env!("XLSR_GIT_REVISION").map(String::from),
            command: command.into(),
            args,
            common: common.clone(),
            config: config.clone(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("writing {}", path.display()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}
