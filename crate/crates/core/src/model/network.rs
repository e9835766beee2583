//! Float execution of the graph: inference, cached forward for training, and backward.

use super::config::{ModelConfig, OutputHead, IMAGE_CHANNELS};
use super::graph::{Graph, Node, Op, ValueId};
use super::params::ModelParams;
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::ops;
use crate::tensor::{Real, Tensor, TensorError};

/// A model config together with its compiled graph.
#[derive(Debug, Clone)]
pub struct Network {
    config: ModelConfig,
    graph: Graph,
}

/// Every intermediate value of one forward pass, indexed by [`ValueId`].
pub struct Trace<T> {
    values: Vec<Option<Tensor<T>>>,
    output: ValueId,
}

impl<T: Real> Trace<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.values[self.output].as_ref().expect("output is always kept")
    }

    pub fn value(&self, id: ValueId) -> Option<&Tensor<T>> {
        self.values.get(id).and_then(Option::as_ref)
    }
}

pub struct Gradients<T> {
    pub params: ModelParams<T>,
    pub input: Option<Tensor<T>>,
}

impl Network {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let graph = Graph::build(&config)?;
        Ok(Network { config, graph })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    fn check<T: Real>(&self, params: &ModelParams<T>, input: &Tensor<T>) -> Result<()> {
        if params.layers.len() != self.graph.layers.len()
            || params.layers.iter().zip(&self.graph.layers).any(|(p, s)| p.spec != s.conv)
        {
            return Err(Error::InvalidConfig("parameters do not match the network layers".into()));
        }
        if input.shape().c != IMAGE_CHANNELS {
            return Err(TensorError::ShapeMismatch {
                op: "forward",
                detail: format!("expected {IMAGE_CHANNELS} input channels, got {}", input.shape()),
            }
            .into());
        }
        Ok(input.ensure_finite("input")?)
    }

    fn eval_node<T: Real>(
        &self,
        node: &Node,
        params: &ModelParams<T>,
        values: &[Option<Tensor<T>>],
    ) -> Result<Tensor<T>> {
        let arg = |i: usize| values[node.inputs[i]].as_ref().expect("graph inputs are evaluated before use");
        let out = match node.op {
            Op::Conv { layer } => {
                let p = &params.layers[layer];
                ops::conv2d(arg(0), &p.spec, &p.weights, &p.bias)?
            }
            Op::Relu => ops::relu(arg(0)),
            Op::ClippedRelu => ops::clipped_relu(arg(0)),
            Op::Concat => ops::concat_channels(arg(0), arg(1))?,
            Op::DepthToSpace { block } => ops::depth_to_space(arg(0), block)?,
        };
        // conv2d rejects non-finite outputs; the other ops keep finite values finite
        Ok(out)
    }

    /// Inference: intermediate values are dropped after their last use.
    pub fn forward<T: Real>(&self, params: &ModelParams<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(params, input)?;
        let last_use = self.graph.last_use();
        let mut values: Vec<Option<Tensor<T>>> = vec![None; self.graph.num_values()];
        values[self.graph.input] = Some(input.clone());
        for (i, node) in self.graph.nodes.iter().enumerate() {
            let out = self.eval_node(node, params, &values)?;
            values[node.output] = Some(out);
            for &v in &node.inputs {
                if last_use[v] == Some(i) {
                    values[v] = None;
                }
            }
        }
        Ok(values[self.graph.output].take().expect("output evaluated"))
    }

    /// Float super-resolution of an 8-bit image, rounded back to 8 bits.
    pub fn upscale(&self, params: &ModelParams, image: &RgbImage) -> Result<RgbImage> {
        RgbImage::from_unit(&self.forward(params, &image.to_unit::<f32>())?)
    }

    /// Forward pass keeping every intermediate value for [`Network::backward`].
    pub fn forward_trace<T: Real>(&self, params: &ModelParams<T>, input: &Tensor<T>) -> Result<Trace<T>> {
        self.check(params, input)?;
        let mut values: Vec<Option<Tensor<T>>> = vec![None; self.graph.num_values()];
        values[self.graph.input] = Some(input.clone());
        for node in &self.graph.nodes {
            let out = self.eval_node(node, params, &values)?;
            values[node.output] = Some(out);
        }
        Ok(Trace { values, output: self.graph.output })
    }

    /// Reverse pass from `output_grad` (d loss / d output).
    pub fn backward<T: Real>(
        &self,
        params: &ModelParams<T>,
        trace: &Trace<T>,
        output_grad: Tensor<T>,
        need_input_grad: bool,
    ) -> Result<Gradients<T>> {
        if output_grad.shape() != trace.output().shape() {
            return Err(TensorError::ShapeMismatch {
                op: "backward",
                detail: format!("gradient {} vs output {}", output_grad.shape(), trace.output().shape()),
            }
            .into());
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.graph.num_values()];
        grads[self.graph.output] = Some(output_grad);
        let mut param_grads = params.zeros_like();
        let value = |v: ValueId| trace.values[v].as_ref().expect("trace holds every value");

        for node in self.graph.nodes.iter().rev() {
            let Some(g) = grads[node.output].take() else { continue };
            let wants = |v: ValueId| v != self.graph.input || need_input_grad;
            let mut input_grads: Vec<(ValueId, Tensor<T>)> = Vec::with_capacity(2);
            match node.op {
                Op::Conv { layer } => {
                    let p = &params.layers[layer];
                    let src = node.inputs[0];
                    let cg = ops::conv2d_backward(value(src), &p.spec, &p.weights, &g, wants(src))?;
                    let pg = &mut param_grads.layers[layer];
                    pg.weights = cg.weights;
                    pg.bias = cg.bias;
                    if let Some(gi) = cg.input {
                        input_grads.push((src, gi));
                    }
                }
                Op::Relu => input_grads.push((node.inputs[0], ops::relu_grad(value(node.inputs[0]), &g)?)),
                Op::ClippedRelu => {
                    input_grads.push((node.inputs[0], ops::clipped_relu_grad(value(node.inputs[0]), &g)?))
                }
                Op::Concat => {
                    let a_channels = value(node.inputs[0]).shape().c;
                    let (ga, gb) = ops::concat_channels_grad(&g, a_channels)?;
                    input_grads.push((node.inputs[0], ga));
                    input_grads.push((node.inputs[1], gb));
                }
                Op::DepthToSpace { block } => input_grads.push((node.inputs[0], ops::space_to_depth(&g, block)?)),
            }
            for (v, gi) in input_grads {
                if !wants(v) {
                    continue;
                }
                grads[v] = Some(match grads[v].take() {
                    None => gi,
                    Some(acc) => {
                        let data = acc.data().iter().zip(gi.data()).map(|(&a, &b)| a + b).collect();
                        Tensor::new(acc.shape(), data)?
                    }
                });
            }
        }
        Ok(Gradients { params: param_grads, input: grads[self.graph.input].take() })
    }
}

/// Clipped-ReLU-head forward pass, output in `[0, 1]`.
pub fn forward(params: &ModelParams, config: &ModelConfig, lr_image: &Tensor) -> Result<Tensor> {
    Network::new(config.with_head(OutputHead::ClippedRelu))?.forward(params, lr_image)
}

/// The same graph without the final clip.
pub fn forward_linear_head(params: &ModelParams, config: &ModelConfig, lr_image: &Tensor) -> Result<Tensor> {
    Network::new(config.with_head(OutputHead::Linear))?.forward(params, lr_image)
}
