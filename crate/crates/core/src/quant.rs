//! Post-training uint8 quantization and the pure-integer inference path.
//!
//! Scheme: per-tensor asymmetric uint8 activations from calibrated min/max,
//! per-tensor symmetric int8 weights, int32 biases at `s_in · s_w`, and
//! requantization by a Q31 multiplier and shift with halves rounded away from
//! zero. ReLU and the clipped head are fused into the preceding convolution as
//! clamps. Both inputs of a concatenation share its parameters, so the concat
//! itself is a byte copy.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{self, BlobWriter};
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::metrics::psnr;
use crate::model::{Graph, ModelConfig, ModelParams, Network, Op, OutputHead, ValueId};
use crate::ops::ConvSpec;
use crate::tensor::{Shape, Tensor};
use crate::train::ImagePair;

pub const QMODEL_MAGIC: &str = "XLSR-QMODEL v1";
/// Smallest scale ever used; degenerate ranges are widened to it.
pub const SCALE_FLOOR: f64 = 1e-8;
pub const QMAX: i32 = 255;
pub const WEIGHT_QMAX: i32 = 127;

/// `real = scale · (q − zero_point)`, `q ∈ [0, 255]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f64,
    pub zero_point: i32,
}

impl QuantParams {
    /// `(1/255, 0)`: the 8-bit image grid on `[0, 1]`.
    pub fn unit() -> Self {
        QuantParams { scale: 1.0 / 255.0, zero_point: 0 }
    }

    /// Asymmetric parameters covering `[min, max] ∪ {0}`.
    pub fn from_range(min: f64, max: f64) -> Self {
        let (lo, hi) = (min.min(0.0), max.max(0.0));
        let mut scale = (hi - lo) / QMAX as f64;
        if scale.is_nan() || scale < SCALE_FLOOR {
            log::warn!("degenerate activation range [{min}, {max}]; using scale {SCALE_FLOOR:e}");
            scale = SCALE_FLOOR;
        }
        let zero_point = (-lo / scale).round().clamp(0.0, QMAX as f64) as i32;
        QuantParams { scale, zero_point }
    }

    pub fn quantize(&self, v: f64) -> u8 {
        ((v / self.scale).round() + self.zero_point as f64).clamp(0.0, QMAX as f64) as u8
    }

    pub fn dequantize(&self, q: u8) -> f64 {
        self.scale * (q as i32 - self.zero_point) as f64
    }
}

pub fn quantize_tensor(values: &[f32], qp: &QuantParams) -> Vec<u8> {
    values.iter().map(|&v| qp.quantize(v as f64)).collect()
}

/// Symmetric per-tensor int8 weights: `scale = max|w| / 127`, zero point 0.
pub fn quantize_weights(w: &[f32]) -> (QuantParams, Vec<i8>) {
    let max = w.iter().fold(0.0f64, |m, &v| m.max((v as f64).abs()));
    let mut scale = max / WEIGHT_QMAX as f64;
    if scale.is_nan() || scale < SCALE_FLOOR {
        log::warn!("weight tensor with max |w| = {max}; using scale {SCALE_FLOOR:e}");
        scale = SCALE_FLOOR;
    }
    let q =
        w.iter().map(|&v| (v as f64 / scale).round().clamp(-WEIGHT_QMAX as f64, WEIGHT_QMAX as f64) as i8).collect();
    (QuantParams { scale, zero_point: 0 }, q)
}

/// Fixed-point factor `multiplier · 2^−(31 + shift)` with the multiplier
/// normalized to `[2^30, 2^31)`, i.e. a Q31 fraction in `[0.5, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Requant {
    pub multiplier: i32,
    pub shift: i32,
}

impl Requant {
    pub fn from_real(factor: f64) -> Result<Self> {
        if !(factor > 0.0 && factor.is_finite()) {
            return Err(Error::Quantization(format!("requantization factor {factor} must be positive and finite")));
        }
        let (mut mant, mut exp) = (factor, 0i32);
        while mant >= 1.0 {
            mant /= 2.0;
            exp += 1;
        }
        while mant < 0.5 {
            mant *= 2.0;
            exp -= 1;
        }
        let mut m = (mant * (1u64 << 31) as f64).round() as i64;
        if m == 1 << 31 {
            m = 1 << 30;
            exp += 1;
        }
        let shift = -exp;
        if !(-31..=96).contains(&shift) {
            return Err(Error::Quantization(format!("requantization factor {factor} is out of range")));
        }
        Ok(Requant { multiplier: m as i32, shift })
    }

    /// The real number this pair represents.
    pub fn factor(&self) -> f64 {
        self.multiplier as f64 * (-(31 + self.shift) as f64).exp2()
    }

    /// `round(acc · multiplier / 2^(31 + shift))`, halves away from zero.
    pub fn apply(&self, acc: i64) -> i64 {
        let p = acc as i128 * self.multiplier as i128;
        let s = 31 + self.shift;
        let r = if s <= 0 {
            p << -s
        } else {
            let half = 1i128 << (s - 1);
            if p >= 0 {
                (p + half) >> s
            } else {
                -((-p + half) >> s)
            }
        };
        r.clamp(i64::MIN as i128, i64::MAX as i128) as i64
    }
}

/// Observed value range of one graph value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationRange {
    pub name: String,
    pub min: f64,
    pub max: f64,
}

/// Ranges of every graph value, indexed by [`ValueId`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub ranges: Vec<ActivationRange>,
    pub images: usize,
}

/// Exact min/max of every activation over the representative images (each a
/// `1 × H × W × 3` tensor in `[0, 1]`). The graph input is pinned to `[0, 1]`.
pub fn calibrate(params: &ModelParams, config: &ModelConfig, images: &[Tensor]) -> Result<Calibration> {
    if images.is_empty() {
        return Err(Error::Quantization("calibration needs at least one representative image".into()));
    }
    let network = Network::new(*config)?;
    let graph = network.graph();
    let mut ranges: Vec<ActivationRange> = graph
        .value_names
        .iter()
        .map(|name| ActivationRange { name: name.clone(), min: f64::INFINITY, max: f64::NEG_INFINITY })
        .collect();
    for image in images {
        let trace = network.forward_trace(params, image)?;
        for (id, r) in ranges.iter_mut().enumerate() {
            let t = trace.value(id).expect("trace keeps every value");
            for &v in t.data() {
                r.min = r.min.min(v as f64);
                r.max = r.max.max(v as f64);
            }
        }
    }
    ranges[graph.input].min = 0.0;
    ranges[graph.input].max = 1.0;
    Ok(Calibration { ranges, images: images.len() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusedActivation {
    None,
    /// Clamp below at the output zero point.
    Relu,
    /// Output parameters are `(1/255, 0)`, so the `[0, 255]` clamp is the clip.
    ClippedRelu,
}

/// One integer operation over materialized values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    Conv { layer: usize, input: ValueId, output: ValueId, activation: FusedActivation },
    Concat { a: ValueId, b: ValueId, output: ValueId },
    DepthToSpace { block: usize, input: ValueId, output: ValueId },
}

/// The graph lowered to integer steps: activations folded into convolutions.
#[derive(Debug, Clone)]
pub struct Program {
    pub steps: Vec<Step>,
    pub input: ValueId,
    pub output: ValueId,
}

impl Program {
    pub fn lower(graph: &Graph) -> Result<Program> {
        let unsupported = |what: String| Error::Quantization(format!("cannot lower graph: {what}"));
        // alias[v] = the materialized value holding v
        let mut alias: Vec<ValueId> = (0..graph.num_values()).collect();
        let mut fused = vec![false; graph.num_values()];
        let mut clipped_heads = vec![false; graph.num_values()];
        let mut steps = Vec::new();
        for node in &graph.nodes {
            match node.op {
                Op::Conv { layer } => {
                    let consumers: Vec<_> = graph.consumers(node.output).collect();
                    let input = alias[node.inputs[0]];
                    let (output, activation) = match consumers.as_slice() {
                        [c] if c.op == Op::Relu => {
                            fused[c.output] = true;
                            alias[c.output] = c.output;
                            (c.output, FusedActivation::Relu)
                        }
                        [d] if graph.head == OutputHead::ClippedRelu
                            && matches!(d.op, Op::DepthToSpace { .. })
                            && graph.consumers(d.output).all(|n| n.op == Op::ClippedRelu) =>
                        {
                            clipped_heads[node.output] = true;
                            (node.output, FusedActivation::ClippedRelu)
                        }
                        _ => (node.output, FusedActivation::None),
                    };
                    alias[node.output] = output;
                    steps.push(Step::Conv { layer, input, output, activation });
                }
                Op::Relu => {
                    if !fused[node.output] {
                        return Err(unsupported(format!(
                            "relu {} does not follow a convolution",
                            graph.value_names[node.output]
                        )));
                    }
                }
                Op::ClippedRelu => {
                    let src = node.inputs[0];
                    let from_clipped_head = graph
                        .producer(src)
                        .is_some_and(|p| matches!(p.op, Op::DepthToSpace { .. }) && clipped_heads[p.inputs[0]]);
                    if !from_clipped_head {
                        return Err(unsupported("clipped relu away from the output head".into()));
                    }
                    alias[node.output] = alias[src];
                }
                Op::Concat => {
                    steps.push(Step::Concat { a: alias[node.inputs[0]], b: alias[node.inputs[1]], output: node.output })
                }
                Op::DepthToSpace { block } => {
                    steps.push(Step::DepthToSpace { block, input: alias[node.inputs[0]], output: node.output })
                }
            }
        }
        Ok(Program { steps, input: graph.input, output: alias[graph.output] })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantLayer {
    pub name: String,
    pub spec: ConvSpec,
    /// The single per-tensor parameter pair of the weights (zero point 0).
    pub weight_qp: QuantParams,
    #[serde(skip)]
    pub weights: Vec<i8>,
    #[serde(skip)]
    pub bias: Vec<i32>,
    pub input_qp: QuantParams,
    pub output_qp: QuantParams,
    /// `input_scale · weight_scale / output_scale` in fixed point.
    pub requant: Requant,
    pub activation: FusedActivation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedQuantParams {
    pub name: String,
    pub qp: QuantParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub config: ModelConfig,
    pub input_qp: QuantParams,
    pub output_qp: QuantParams,
    pub layers: Vec<QuantLayer>,
    /// Parameters of every materialized activation, input and output included.
    pub activations: Vec<NamedQuantParams>,
    /// Output-to-pixel conversion when the output grid is not already `(1/255, 0)`.
    pub pixel_requant: Option<Requant>,
    pub calibration_images: usize,
}

/// Per-tensor quantization of a float model from calibrated ranges.
pub fn quantize_model(params: &ModelParams, config: &ModelConfig, calibration: &Calibration) -> Result<QuantizedModel> {
    params.check_matches(config)?;
    let graph = Graph::build(config)?;
    if calibration.ranges.len() != graph.num_values() {
        return Err(Error::Quantization(format!(
            "calibration covers {} values, graph has {}",
            calibration.ranges.len(),
            graph.num_values()
        )));
    }
    let program = Program::lower(&graph)?;
    let range_qp = |v: ValueId| {
        let r = &calibration.ranges[v];
        QuantParams::from_range(r.min, r.max)
    };
    let mut qp: Vec<Option<QuantParams>> = vec![None; graph.num_values()];
    qp[program.input] = Some(QuantParams::unit());
    // concat inputs adopt the concat's parameters
    let mut shared: Vec<Option<QuantParams>> = vec![None; graph.num_values()];
    for step in &program.steps {
        if let Step::Concat { a, b, output } = *step {
            let p = range_qp(output);
            for v in [a, b] {
                if v == program.input || shared[v].is_some() {
                    return Err(Error::Quantization(format!(
                        "value {} feeds conflicting concats",
                        graph.value_names[v]
                    )));
                }
                shared[v] = Some(p);
            }
        }
    }
    let mut layers = Vec::with_capacity(params.layers.len());
    for step in &program.steps {
        match *step {
            Step::Conv { layer, input, output, activation } => {
                let p = &params.layers[layer];
                let input_qp =
                    qp[input].ok_or_else(|| Error::Quantization("convolution input not quantized".into()))?;
                let output_qp = match (activation, shared[output]) {
                    (FusedActivation::ClippedRelu, _) => QuantParams::unit(),
                    (_, Some(s)) => s,
                    _ => range_qp(output),
                };
                qp[output] = Some(output_qp);
                let (weight_qp, weights) = quantize_weights(&p.weights);
                let bias_scale = input_qp.scale * weight_qp.scale;
                let bias = p
                    .bias
                    .iter()
                    .map(|&b| (b as f64 / bias_scale).round().clamp(i32::MIN as f64, i32::MAX as f64) as i32)
                    .collect();
                let requant = Requant::from_real(bias_scale / output_qp.scale)?;
                layers.push(QuantLayer {
                    name: p.name.clone(),
                    spec: p.spec,
                    weight_qp,
                    weights,
                    bias,
                    input_qp,
                    output_qp,
                    requant,
                    activation,
                });
            }
            Step::Concat { a, output, .. } => qp[output] = shared[a],
            Step::DepthToSpace { input, output, .. } => qp[output] = qp[input],
        }
    }
    let output_qp = qp[program.output].ok_or_else(|| Error::Quantization("output not quantized".into()))?;
    let pixel_requant =
        if output_qp == QuantParams::unit() { None } else { Some(Requant::from_real(output_qp.scale * 255.0)?) };
    let activations = qp
        .iter()
        .enumerate()
        .filter_map(|(v, p)| p.map(|qp| NamedQuantParams { name: graph.value_names[v].clone(), qp }))
        .collect();
    Ok(QuantizedModel {
        config: *config,
        input_qp: QuantParams::unit(),
        output_qp,
        layers,
        activations,
        pixel_requant,
        calibration_images: calibration.images,
    })
}

/// 8-bit activation tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QTensor {
    pub shape: Shape,
    pub data: Vec<u8>,
}

fn conv_int(x: &QTensor, layer: &QuantLayer) -> QTensor {
    let s = x.shape;
    let spec = &layer.spec;
    let (kh, kw) = (spec.kernel_h, spec.kernel_w);
    let (pt, pl) = ((kh - 1) / 2, (kw - 1) / 2);
    let (ph, pw) = (s.h + kh - 1, s.w + kw - 1);
    let (cin_g, cout_g) = (spec.in_per_group(), spec.out_per_group());
    let zp_in = layer.input_qp.zero_point;
    // centred input with zero padding (the real value 0 is q = zp_in)
    let mut centred = vec![0i32; s.n * ph * pw * s.c];
    for n in 0..s.n {
        for y in 0..s.h {
            for x_ in 0..s.w {
                let src = s.index(n, y, x_, 0);
                let dst = ((n * ph + y + pt) * pw + x_ + pl) * s.c;
                for c in 0..s.c {
                    centred[dst + c] = x.data[src + c] as i32 - zp_in;
                }
            }
        }
    }
    let weights: Vec<i32> = layer.weights.iter().map(|&w| w as i32).collect();
    let zp_out = layer.output_qp.zero_point as i64;
    let lo = match layer.activation {
        FusedActivation::Relu => zp_out,
        _ => 0,
    };
    let out_shape = Shape::new(s.n, s.h, s.w, spec.out_channels);
    let mut out = Vec::with_capacity(out_shape.len());
    for n in 0..s.n {
        for y in 0..s.h {
            for x_ in 0..s.w {
                for o in 0..spec.out_channels {
                    let g = o / cout_g;
                    let w = &weights[o * spec.fan_in()..(o + 1) * spec.fan_in()];
                    let mut acc = layer.bias[o] as i64;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let src = ((n * ph + y + ky) * pw + x_ + kx) * s.c + g * cin_g;
                            let wt = &w[(ky * kw + kx) * cin_g..(ky * kw + kx + 1) * cin_g];
                            let dot: i32 = centred[src..src + cin_g].iter().zip(wt).map(|(a, b)| a * b).sum();
                            acc += dot as i64;
                        }
                    }
                    out.push((layer.requant.apply(acc) + zp_out).clamp(lo, QMAX as i64) as u8);
                }
            }
        }
    }
    QTensor { shape: out_shape, data: out }
}

fn concat_int(a: &QTensor, b: &QTensor) -> QTensor {
    let (sa, sb) = (a.shape, b.shape);
    let shape = Shape::new(sa.n, sa.h, sa.w, sa.c + sb.c);
    let mut data = Vec::with_capacity(shape.len());
    for (pa, pb) in a.data.chunks_exact(sa.c).zip(b.data.chunks_exact(sb.c)) {
        data.extend_from_slice(pa);
        data.extend_from_slice(pb);
    }
    QTensor { shape, data }
}

fn depth_to_space_int(x: &QTensor, block: usize) -> QTensor {
    let s = x.shape;
    let shape = Shape::new(s.n, s.h * block, s.w * block, s.c / (block * block));
    let mut data = Vec::with_capacity(shape.len());
    for n in 0..shape.n {
        for y in 0..shape.h {
            for x_ in 0..shape.w {
                for c in 0..shape.c {
                    let src_c = c * block * block + (y % block) * block + x_ % block;
                    data.push(x.data[s.index(n, y / block, x_ / block, src_c)]);
                }
            }
        }
    }
    QTensor { shape, data }
}

impl QuantizedModel {
    pub fn program(&self) -> Result<Program> {
        Program::lower(&Graph::build(&self.config)?)
    }

    /// Runs the integer program; the result is on the `output_qp` grid.
    pub fn forward_raw(&self, image: &RgbImage) -> Result<QTensor> {
        let graph = Graph::build(&self.config)?;
        let program = Program::lower(&graph)?;
        if self.layers.len() != graph.layers.len() {
            return Err(Error::Quantization("layer count does not match the config".into()));
        }
        let mut values: Vec<Option<QTensor>> = vec![None; graph.num_values()];
        values[program.input] = Some(QTensor { shape: image.shape(), data: image.data.clone() });
        let missing = |v: ValueId| Error::Quantization(format!("value {} is not available", graph.value_names[v]));
        for step in &program.steps {
            match *step {
                Step::Conv { layer, input, output, .. } => {
                    let x = values[input].as_ref().ok_or_else(|| missing(input))?;
                    values[output] = Some(conv_int(x, &self.layers[layer]));
                }
                Step::Concat { a, b, output } => {
                    let x = values[a].as_ref().ok_or_else(|| missing(a))?;
                    let y = values[b].as_ref().ok_or_else(|| missing(b))?;
                    values[output] = Some(concat_int(x, y));
                }
                Step::DepthToSpace { block, input, output } => {
                    let x = values[input].as_ref().ok_or_else(|| missing(input))?;
                    values[output] = Some(depth_to_space_int(x, block));
                }
            }
        }
        values[program.output].take().ok_or_else(|| missing(program.output))
    }

    /// Output bytes re-expressed on the `(1/255, 0)` pixel grid.
    pub fn to_pixels(&self, out: &QTensor) -> Vec<u8> {
        match self.pixel_requant {
            None => out.data.clone(),
            Some(rq) => {
                let zp = self.output_qp.zero_point as i64;
                out.data.iter().map(|&q| rq.apply(q as i64 - zp).clamp(0, QMAX as i64) as u8).collect()
            }
        }
    }
}

/// Integer-only super-resolution of an 8-bit image.
pub fn quantized_forward(qmodel: &QuantizedModel, image: &RgbImage) -> Result<RgbImage> {
    let out = qmodel.forward_raw(image)?;
    RgbImage::new(out.shape.h, out.shape.w, qmodel.to_pixels(&out))
}

#[derive(Serialize, Deserialize)]
struct QManifest {
    config: ModelConfig,
    input_qp: QuantParams,
    output_qp: QuantParams,
    layers: Vec<QuantLayer>,
    activations: Vec<NamedQuantParams>,
    pixel_requant: Option<Requant>,
    calibration_images: usize,
}

impl QuantizedModel {
    fn manifest(&self) -> QManifest {
        QManifest {
            config: self.config,
            input_qp: self.input_qp,
            output_qp: self.output_qp,
            layers: self.layers.clone(),
            activations: self.activations.clone(),
            pixel_requant: self.pixel_requant,
            calibration_images: self.calibration_images,
        }
    }

    fn writer(&self) -> BlobWriter {
        let mut w = BlobWriter::default();
        for l in &self.layers {
            w.i8s(&format!("{}.weight", l.name), &l.spec.weight_shape(), &l.weights);
            w.i32s(&format!("{}.bias", l.name), &[l.spec.out_channels], &l.bias);
        }
        w
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.writer().to_bytes(QMODEL_MAGIC, self.manifest())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.writer().write(path, QMODEL_MAGIC, self.manifest())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (m, mut blob) = container::read::<QManifest>(path, QMODEL_MAGIC)?;
        let specs = m.config.layers().map_err(|e| Error::format(path, e.to_string()))?;
        if specs.len() != m.layers.len() {
            return Err(Error::format(path, "layer list does not match the config"));
        }
        let mut layers = m.layers;
        for (l, s) in layers.iter_mut().zip(&specs) {
            if l.name != s.name || l.spec != s.conv {
                return Err(Error::format(path, format!("layer {} does not match the config", l.name)));
            }
            l.weights = blob.i8s(&format!("{}.weight", l.name), &l.spec.weight_shape())?;
            l.bias = blob.i32s(&format!("{}.bias", l.name), &[l.spec.out_channels])?;
        }
        blob.finish()?;
        Ok(QuantizedModel {
            config: m.config,
            input_qp: m.input_qp,
            output_qp: m.output_qp,
            layers,
            activations: m.activations,
            pixel_requant: m.pixel_requant,
            calibration_images: m.calibration_images,
        })
    }
}

/// Float and uint8 PSNR of the same architecture on the same images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropReport {
    pub psnr_float: f64,
    pub psnr_uint8: f64,
    pub drop: f64,
    pub images: usize,
}

/// Mean RGB PSNR (no shave) of both paths; `drop = float − uint8`.
pub fn quantization_drop_report(
    params: &ModelParams,
    qmodel: &QuantizedModel,
    eval_set: &[ImagePair],
) -> Result<DropReport> {
    if eval_set.is_empty() {
        return Err(Error::Quantization("empty evaluation set".into()));
    }
    let network = Network::new(qmodel.config)?;
    let (mut pf, mut pq) = (0.0, 0.0);
    for pair in eval_set {
        let hr = pair.hr.to_f64();
        pf += psnr(&network.upscale(params, &pair.lr)?.to_f64(), &hr, 0)?;
        pq += psnr(&quantized_forward(qmodel, &pair.lr)?.to_f64(), &hr, 0)?;
    }
    let n = eval_set.len() as f64;
    let (psnr_float, psnr_uint8) = (pf / n, pq / n);
    Ok(DropReport { psnr_float, psnr_uint8, drop: psnr_float - psnr_uint8, images: eval_set.len() })
}
