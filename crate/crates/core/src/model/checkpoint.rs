use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::params::{LayerParams, ModelParams};
use crate::container::{self, BlobWriter};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &str = "XLSR-CHECKPOINT v1";

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    dtype: String,
    layers: Vec<String>,
}

fn weight_name(layer: &str) -> String {
    format!("{layer}.weight")
}

fn bias_name(layer: &str) -> String {
    format!("{layer}.bias")
}

/// Serializes `params` as the checkpoint bytes (manifest + float32 blob).
pub fn checkpoint_bytes(params: &ModelParams, config: &ModelConfig) -> Result<Vec<u8>> {
    writer(params, config)?.to_bytes(CHECKPOINT_MAGIC, manifest(params, config))
}

fn manifest(params: &ModelParams, config: &ModelConfig) -> Manifest {
    Manifest { config: *config, dtype: "f32-le".into(), layers: params.layers.iter().map(|l| l.name.clone()).collect() }
}

fn writer(params: &ModelParams, config: &ModelConfig) -> Result<BlobWriter> {
    params.check_matches(config)?;
    let mut w = BlobWriter::default();
    for l in &params.layers {
        w.f32s(&weight_name(&l.name), &l.spec.weight_shape(), &l.weights);
        w.f32s(&bias_name(&l.name), &[l.spec.out_channels], &l.bias);
    }
    Ok(w)
}

pub fn save_checkpoint(params: &ModelParams, config: &ModelConfig, path: &Path) -> Result<()> {
    writer(params, config)?.write(path, CHECKPOINT_MAGIC, manifest(params, config))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, ModelConfig)> {
    let (manifest, mut blob) = container::read::<Manifest>(path, CHECKPOINT_MAGIC)?;
    let config = manifest.config;
    let specs = config.layers().map_err(|e| Error::format(path, e.to_string()))?;
    let names: Vec<&str> = specs.iter().map(|s| s.name.as_str()).collect();
    if manifest.layers != names {
        return Err(Error::format(path, "layer list does not match the config"));
    }
    let mut layers = Vec::with_capacity(specs.len());
    for s in specs {
        let weights = blob.f32s(&weight_name(&s.name), &s.conv.weight_shape())?;
        let bias = blob.f32s(&bias_name(&s.name), &[s.conv.out_channels])?;
        layers.push(LayerParams { name: s.name, spec: s.conv, weights, bias });
    }
    blob.finish()?;
    Ok((ModelParams { layers }, config))
}
