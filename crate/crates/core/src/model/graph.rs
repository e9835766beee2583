//! The inference graph as a flat list of nodes over numbered values.
//!
//! Forward, backward, calibration, integer inference and the hardware lint
//! all interpret this one description.

use serde::Serialize;

use super::config::{LayerSpec, ModelConfig, OutputHead};
use crate::error::Result;

pub type ValueId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    /// Convolution with the parameters of layer `layer`.
    Conv {
        layer: usize,
    },
    Relu,
    ClippedRelu,
    /// Channel concatenation of the two inputs, first input first.
    Concat,
    DepthToSpace {
        block: usize,
    },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Conv { .. } => "conv2d",
            Op::Relu => "relu",
            Op::ClippedRelu => "clipped_relu",
            Op::Concat => "concat",
            Op::DepthToSpace { .. } => "depth_to_space",
        }
    }

    /// Two-operand elementwise arithmetic (add, sub, mul...). None exist in
    /// this graph family; the lint still counts them.
    pub fn is_elementwise_arithmetic(&self) -> bool {
        false
    }

    /// Memory-layout rearrangements (reshape, transpose, depth-to-space).
    pub fn is_layout_op(&self) -> bool {
        matches!(self, Op::DepthToSpace { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<ValueId>,
    pub output: ValueId,
}

#[derive(Debug, Clone)]
pub struct Graph {
    pub layers: Vec<LayerSpec>,
    pub nodes: Vec<Node>,
    pub value_names: Vec<String>,
    pub input: ValueId,
    pub output: ValueId,
    pub head: OutputHead,
}

struct Builder {
    nodes: Vec<Node>,
    value_names: Vec<String>,
}

impl Builder {
    fn value(&mut self, name: String) -> ValueId {
        self.value_names.push(name);
        self.value_names.len() - 1
    }

    fn push(&mut self, op: Op, inputs: Vec<ValueId>, name: String) -> ValueId {
        let output = self.value(name);
        self.nodes.push(Node { op, inputs, output });
        output
    }
}

impl Graph {
    pub fn build(config: &ModelConfig) -> Result<Graph> {
        let layers = config.layers()?;
        let mut b = Builder { nodes: Vec::new(), value_names: Vec::new() };
        let input = b.value("input".into());
        let mut layer_idx = 0;
        let mut conv = |b: &mut Builder, src: ValueId| {
            let name = layers[layer_idx].name.clone();
            let v = b.push(Op::Conv { layer: layer_idx }, vec![src], name);
            layer_idx += 1;
            v
        };
        let relu = |b: &mut Builder, src: ValueId| {
            let name = format!("{}.relu", b.value_names[src]);
            b.push(Op::Relu, vec![src], name)
        };

        let mut x = conv(&mut b, input);
        x = relu(&mut b, x);
        for _ in 0..config.num_gblocks {
            x = conv(&mut b, x);
            x = relu(&mut b, x);
            x = conv(&mut b, x);
            x = relu(&mut b, x);
        }
        let skip = conv(&mut b, input);
        let skip = relu(&mut b, skip);
        let cat = b.push(Op::Concat, vec![x, skip], "concat".into());
        let fused = conv(&mut b, cat);
        let fused = relu(&mut b, fused);
        let head = conv(&mut b, fused);
        let mut output = b.push(Op::DepthToSpace { block: config.scale }, vec![head], "depth_to_space".into());
        if config.head == OutputHead::ClippedRelu {
            output = b.push(Op::ClippedRelu, vec![output], "output".into());
        }
        Ok(Graph { layers, nodes: b.nodes, value_names: b.value_names, input, output, head: config.head })
    }

    pub fn num_values(&self) -> usize {
        self.value_names.len()
    }

    /// Node producing `value`, if any (the graph input has none).
    pub fn producer(&self, value: ValueId) -> Option<&Node> {
        self.nodes.iter().find(|n| n.output == value)
    }

    /// Nodes consuming `value`.
    pub fn consumers(&self, value: ValueId) -> impl Iterator<Item = &Node> {
        self.nodes.iter().filter(move |n| n.inputs.contains(&value))
    }

    /// Index of the last node reading each value (`None` if unread).
    pub fn last_use(&self) -> Vec<Option<usize>> {
        let mut last = vec![None; self.num_values()];
        for (i, node) in self.nodes.iter().enumerate() {
            for &v in &node.inputs {
                last[v] = Some(i);
            }
        }
        last
    }

    pub fn lint(&self) -> GraphLint {
        let mut lint = GraphLint::default();
        for node in &self.nodes {
            lint.nodes += 1;
            if node.op.is_elementwise_arithmetic() {
                lint.elementwise_arithmetic += 1;
            }
            match node.op {
                Op::DepthToSpace { .. } => lint.depth_to_space += 1,
                op if op.is_layout_op() => lint.other_layout_ops += 1,
                _ => {}
            }
            match node.op {
                Op::Conv { .. } => lint.convolutions += 1,
                Op::Concat => lint.concats += 1,
                _ => {}
            }
        }
        lint
    }
}

/// Operator census used to check the deployment constraints: no elementwise
/// add/sub, no reshape/transpose besides a single depth-to-space.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct GraphLint {
    pub nodes: usize,
    pub convolutions: usize,
    pub concats: usize,
    pub elementwise_arithmetic: usize,
    pub depth_to_space: usize,
    pub other_layout_ops: usize,
}

impl GraphLint {
    pub fn passes(&self) -> bool {
        self.elementwise_arithmetic == 0 && self.other_layout_ops == 0 && self.depth_to_space == 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_graph_shape() {
        let g = Graph::build(&ModelConfig::default()).unwrap();
        let lint = g.lint();
        assert!(lint.passes(), "{lint:?}");
        assert_eq!(lint.convolutions, 10);
        assert_eq!(lint.concats, 1);
        assert_eq!(g.nodes.last().unwrap().op, Op::ClippedRelu);
        assert_eq!(g.consumers(g.input).count(), 2);
    }

    #[test]
    fn linear_head_ends_in_depth_to_space() {
        let g = Graph::build(&ModelConfig::default().with_head(OutputHead::Linear)).unwrap();
        assert_eq!(g.nodes.last().unwrap().op, Op::DepthToSpace { block: 3 });
        assert!(g.lint().passes());
    }
}
