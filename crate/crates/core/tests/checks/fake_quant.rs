//! The integer inference path against a real-valued simulation of the same
//! quantized arithmetic: dequantized operands, an exact real accumulation, the
//! effective rescale factor, rounding half away from zero and the clamps.

use xlsr::model::{build_model, Graph, ModelConfig, OutputHead};
use xlsr::quant::{calibrate, quantize_model, quantized_forward, FusedActivation, Program, QuantizedModel, Step};
use xlsr::{RgbImage, Tensor};

/// A value on a quantized grid, held as its real-valued integer code.
#[derive(Clone)]
struct Sim {
    h: usize,
    w: usize,
    c: usize,
    q: Vec<f64>,
}

fn round_half_away(v: f64) -> f64 {
    v.signum() * (v.abs() + 0.5).floor()
}

fn conv(x: &Sim, qm: &QuantizedModel, layer: usize, activation: FusedActivation) -> Sim {
    let l = &qm.layers[layer];
    let s = &l.spec;
    let (k, cin_g, cout_g) = (s.kernel_h, s.in_per_group(), s.out_per_group());
    let pad = (k as isize - 1) / 2;
    let zp_in = l.input_qp.zero_point as f64;
    let zp_out = l.output_qp.zero_point as f64;
    // real-valued rescale exactly as represented by the fixed-point pair
    let factor = l.requant.multiplier as f64 * (-(31 + l.requant.shift) as f64).exp2();
    let lo = if activation == FusedActivation::Relu { zp_out } else { 0.0 };
    let mut q = Vec::with_capacity(x.h * x.w * s.out_channels);
    for y in 0..x.h {
        for xx in 0..x.w {
            for o in 0..s.out_channels {
                let g = o / cout_g;
                let mut acc = l.bias[o] as f64;
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = y as isize + ky as isize - pad;
                        let ix = xx as isize + kx as isize - pad;
                        if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                            continue;
                        }
                        for i in 0..cin_g {
                            let xv = x.q[(iy as usize * x.w + ix as usize) * x.c + g * cin_g + i] - zp_in;
                            acc += xv * l.weights[((o * k + ky) * k + kx) * cin_g + i] as f64;
                        }
                    }
                }
                // the real product must stay exact for the simulation to be exact
                assert!(acc.abs() * l.requant.multiplier as f64 <= 2f64.powi(53));
                q.push((round_half_away(acc * factor) + zp_out).clamp(lo, 255.0));
            }
        }
    }
    Sim { h: x.h, w: x.w, c: s.out_channels, q }
}

pub fn simulate(qm: &QuantizedModel, image: &RgbImage) -> Vec<u8> {
    let graph = Graph::build(&qm.config).unwrap();
    let program = Program::lower(&graph).unwrap();
    let mut values: Vec<Option<Sim>> = vec![None; graph.num_values()];
    values[program.input] =
        Some(Sim { h: image.height, w: image.width, c: 3, q: image.data.iter().map(|&v| v as f64).collect() });
    for step in &program.steps {
        match *step {
            Step::Conv { layer, input, output, activation } => {
                values[output] = Some(conv(values[input].as_ref().unwrap(), qm, layer, activation));
            }
            Step::Concat { a, b, output } => {
                let (a, b) = (values[a].as_ref().unwrap(), values[b].as_ref().unwrap());
                let mut q = Vec::new();
                for p in 0..a.h * a.w {
                    q.extend_from_slice(&a.q[p * a.c..(p + 1) * a.c]);
                    q.extend_from_slice(&b.q[p * b.c..(p + 1) * b.c]);
                }
                values[output] = Some(Sim { h: a.h, w: a.w, c: a.c + b.c, q });
            }
            Step::DepthToSpace { block, input, output } => {
                let x = values[input].as_ref().unwrap();
                let c = x.c / (block * block);
                let (h, w) = (x.h * block, x.w * block);
                let mut q = vec![0.0; h * w * c];
                for y in 0..h {
                    for xx in 0..w {
                        for ch in 0..c {
                            let src = ch * block * block + (y % block) * block + xx % block;
                            q[(y * w + xx) * c + ch] = x.q[((y / block) * x.w + xx / block) * x.c + src];
                        }
                    }
                }
                values[output] = Some(Sim { h, w, c, q });
            }
        }
    }
    let out = values[program.output].take().unwrap();
    match qm.pixel_requant {
        None => out.q.iter().map(|&v| v as u8).collect(),
        Some(rq) => {
            let factor = rq.multiplier as f64 * (-(31 + rq.shift) as f64).exp2();
            let zp = qm.output_qp.zero_point as f64;
            out.q.iter().map(|&v| round_half_away((v - zp) * factor).clamp(0.0, 255.0) as u8).collect()
        }
    }
}

/// Pixels where the integer path and the simulation disagree.
pub fn mismatches(qm: &QuantizedModel, images: &[RgbImage]) -> usize {
    images
        .iter()
        .map(|image| {
            let got = quantized_forward(qm, image).unwrap();
            assert_eq!((got.height, got.width), (image.height * qm.config.scale, image.width * qm.config.scale));
            got.data.iter().zip(simulate(qm, image)).filter(|(a, b)| **a != *b).count()
        })
        .sum()
}

/// An untrained default model with varied biases, quantized on `images`.
pub fn untrained(head: OutputHead, seed: u64, images: &[RgbImage]) -> QuantizedModel {
    let config = ModelConfig::default().with_head(head);
    let mut params = build_model(&config, seed).unwrap();
    // non-trivial biases so zero points and bias codes vary
    for (i, l) in params.layers.iter_mut().enumerate() {
        for (j, b) in l.bias.iter_mut().enumerate() {
            *b = ((i * 7 + j * 3) % 11) as f32 * 0.02 - 0.08;
        }
    }
    let calib: Vec<Tensor> = images.iter().map(|im| im.to_unit()).collect();
    quantize_model(&params, &config, &calibrate(&params, &config, &calib).unwrap()).unwrap()
}
