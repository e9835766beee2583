use rand_distr::{Distribution, Normal};

use super::config::{LayerSpec, ModelConfig};
use crate::error::{Error, Result};
use crate::ops::ConvSpec;
use crate::rng::{stream_rng, Stream};
use crate::tensor::Real;

/// Variance multiplier applied on top of He initialization.
pub const INIT_VARIANCE_SCALE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T = f32> {
    pub name: String,
    pub spec: ConvSpec,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

/// Weights and biases of every convolution, in execution order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = f32> {
    pub layers: Vec<LayerParams<T>>,
}

impl<T: Real> ModelParams<T> {
    pub fn zeros(layers: &[LayerSpec]) -> Self {
        ModelParams {
            layers: layers
                .iter()
                .map(|l| LayerParams {
                    name: l.name.clone(),
                    spec: l.conv,
                    weights: vec![T::ZERO; l.conv.weight_len()],
                    bias: vec![T::ZERO; l.conv.out_channels],
                })
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams {
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    name: l.name.clone(),
                    spec: l.spec,
                    weights: vec![T::ZERO; l.weights.len()],
                    bias: vec![T::ZERO; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn layer(&self, name: &str) -> Option<&LayerParams<T>> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::from_f64(x.to_f64())).collect();
        ModelParams {
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    name: l.name.clone(),
                    spec: l.spec,
                    weights: conv(&l.weights),
                    bias: conv(&l.bias),
                })
                .collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Flat views of every parameter array, weights before bias per layer.
    pub fn arrays(&self) -> impl Iterator<Item = &Vec<T>> {
        self.layers.iter().flat_map(|l| [&l.weights, &l.bias])
    }

    pub fn arrays_mut(&mut self) -> impl Iterator<Item = &mut Vec<T>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weights, &mut l.bias])
    }

    /// Checks names and array lengths against the layer list of `config`.
    pub fn check_matches(&self, config: &ModelConfig) -> Result<()> {
        let specs = config.layers()?;
        if specs.len() != self.layers.len() {
            return Err(Error::InvalidConfig(format!(
                "config defines {} layers, parameters have {}",
                specs.len(),
                self.layers.len()
            )));
        }
        for (s, l) in specs.iter().zip(&self.layers) {
            if s.name != l.name
                || s.conv != l.spec
                || l.weights.len() != s.conv.weight_len()
                || l.bias.len() != s.conv.out_channels
            {
                return Err(Error::InvalidConfig(format!("layer {:?} does not match the config", l.name)));
            }
        }
        Ok(())
    }
}

/// Standard deviation of the initial weights for a layer with this fan-in:
/// variance = 0.1 · 2 / fan_in.
pub fn init_std(fan_in: usize) -> f64 {
    (INIT_VARIANCE_SCALE * 2.0 / fan_in as f64).sqrt()
}

/// Scaled He-normal weights, zero biases; deterministic in `seed`.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    let specs = config.layers()?;
    let mut params = ModelParams::<f32>::zeros(&specs);
    let mut rng = stream_rng(seed, Stream::Init, 0);
    for layer in &mut params.layers {
        let normal =
            Normal::new(0.0f64, init_std(layer.spec.fan_in())).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        for w in &mut layer.weights {
            *w = normal.sample(&mut rng) as f32;
        }
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_layer_std() {
        // 3x3, 3 -> 32, groups 1: fan_in 27
        assert!((init_std(27) - 0.086066).abs() < 1e-6);
    }

    #[test]
    fn same_seed_same_params() {
        let cfg = ModelConfig::default();
        let a = build_model(&cfg, 11).unwrap();
        assert_eq!(a, build_model(&cfg, 11).unwrap());
        assert_ne!(a, build_model(&cfg, 12).unwrap());
        assert!(a.layers.iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
        a.check_matches(&cfg).unwrap();
    }

    #[test]
    fn empirical_variance_within_five_percent() {
        // a wide 1x1 layer gives ~10k samples
        let cfg = ModelConfig { feature_channels: 100, gblock_groups: 4, num_gblocks: 1, ..ModelConfig::default() };
        let params = build_model(&cfg, 3).unwrap();
        let layer = params.layer("gblock0.pointwise").unwrap();
        assert_eq!(layer.weights.len(), 10_000);
        let n = layer.weights.len() as f64;
        let mean = layer.weights.iter().map(|&w| w as f64).sum::<f64>() / n;
        let var = layer.weights.iter().map(|&w| (w as f64 - mean).powi(2)).sum::<f64>() / n;
        let target = init_std(layer.spec.fan_in()).powi(2);
        assert!((var / target - 1.0).abs() < 0.05, "var {var} target {target}");
    }
}
