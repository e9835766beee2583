//! Grouped 2-D convolution, stride 1, zero "same" padding, NHWC layout.
//!
//! Weights are laid out `(out_channels, kernel_h, kernel_w, in_channels / groups)`.
//! Each group is lowered to one GEMM over the whole batch: an im2col matrix of
//! shape `(N·H·W) × (kh·kw·cin_g)` times the transposed group weight block.
//! 1×1 kernels skip im2col and read the input in place through strides. The
//! input gradient of a spatial kernel is itself a forward convolution of the
//! upstream gradient with the rotated, channel-swapped kernel. Shapes with a
//! direct kernel (see `kernels`) bypass the GEMM lowering.

use serde::{Deserialize, Serialize};

use crate::tensor::{gemm, MatMut, MatRef, Real, Result, Shape, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(kernel: usize, in_channels: usize, out_channels: usize, groups: usize) -> Self {
        ConvSpec { kernel_h: kernel, kernel_w: kernel, in_channels, out_channels, groups }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| TensorError::InvalidArgument { op: "conv2d", detail };
        if self.kernel_h == 0 || self.kernel_w == 0 {
            return Err(bad("kernel dimensions must be positive".into()));
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.groups == 0 {
            return Err(bad("channel and group counts must be positive".into()));
        }
        for (what, value) in [("in_channels", self.in_channels), ("out_channels", self.out_channels)] {
            if value % self.groups != 0 {
                return Err(TensorError::NotDivisible { op: "conv2d", what, value, divisor: self.groups });
            }
        }
        Ok(())
    }

    pub fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    /// Length of one output channel's filter, also the He-init fan-in.
    pub fn fan_in(&self) -> usize {
        self.kernel_h * self.kernel_w * self.in_per_group()
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.fan_in()
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.kernel_h, self.kernel_w, self.in_per_group()]
    }

    pub fn param_count(&self) -> usize {
        self.weight_len() + self.out_channels
    }

    fn pad_top(&self) -> usize {
        (self.kernel_h - 1) / 2
    }

    fn pad_left(&self) -> usize {
        (self.kernel_w - 1) / 2
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1
    }
}

pub struct ConvGrads<T> {
    /// `None` when the caller asked to skip the input gradient.
    pub input: Option<Tensor<T>>,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

fn check_args<T: Real>(input: &Tensor<T>, spec: &ConvSpec, weights: &[T]) -> Result<()> {
    spec.validate()?;
    if input.shape().c != spec.in_channels {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            detail: format!("input has {} channels, spec expects {}", input.shape().c, spec.in_channels),
        });
    }
    if weights.len() != spec.weight_len() {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            detail: format!("weights have {} elements, spec expects {:?}", weights.len(), spec.weight_shape()),
        });
    }
    Ok(())
}

/// Gathers receptive fields into `cols` (`pixels × groups·fan_in`), group-major:
/// row layout is `[group][ky][kx][channel-in-group]`, so group `g` is the column
/// block starting at `g·fan_in`.
fn im2col<T: Real>(input: &Tensor<T>, spec: &ConvSpec, cols: &mut Vec<T>) {
    let s = input.shape();
    let cin_g = spec.in_per_group();
    let k = spec.fan_in();
    let row_len = k * spec.groups;
    let (pt, pl) = (spec.pad_top() as isize, spec.pad_left() as isize);
    let data = input.data();
    // every element is overwritten below, so stale contents need no clearing
    cols.resize(s.pixels() * row_len, T::ZERO);
    let mut row = 0;
    for n in 0..s.n {
        for y in 0..s.h {
            for x in 0..s.w {
                let dst = &mut cols[row * row_len..(row + 1) * row_len];
                for ky in 0..spec.kernel_h {
                    let iy = y as isize + ky as isize - pt;
                    for kx in 0..spec.kernel_w {
                        let ix = x as isize + kx as isize - pl;
                        let tap = (ky * spec.kernel_w + kx) * cin_g;
                        if iy < 0 || iy >= s.h as isize || ix < 0 || ix >= s.w as isize {
                            for g in 0..spec.groups {
                                dst[g * k + tap..g * k + tap + cin_g].fill(T::ZERO);
                            }
                            continue;
                        }
                        let src = s.index(n, iy as usize, ix as usize, 0);
                        let src = &data[src..src + s.c];
                        for g in 0..spec.groups {
                            let off = g * k + tap;
                            dst[off..off + cin_g].copy_from_slice(&src[g * cin_g..(g + 1) * cin_g]);
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Accumulates the convolution of `input` into `out` (`pixels × out_channels`).
fn conv_accumulate<T: Real>(input: &Tensor<T>, spec: &ConvSpec, weights: &[T], out: &mut [T], cols: &mut Vec<T>) {
    let s = input.shape();
    let pixels = s.pixels();
    let (cin_g, cout_g, k) = (spec.in_per_group(), spec.out_per_group(), spec.fan_in());
    if T::conv_direct(input.data(), (s.n, s.h, s.w), spec, weights, out) {
        return;
    }
    if !spec.is_pointwise() {
        im2col(input, spec, cols);
    }
    for g in 0..spec.groups {
        let a = if spec.is_pointwise() {
            MatRef { data: input.data(), offset: g * cin_g, rs: s.c, cs: 1 }
        } else {
            MatRef { data: cols, offset: g * k, rs: k * spec.groups, cs: 1 }
        };
        // B = W_g^T, (k × cout_g)
        let b = MatRef { data: weights, offset: g * cout_g * k, rs: 1, cs: k };
        let c = MatMut { data: out, offset: g * cout_g, rs: spec.out_channels, cs: 1 };
        gemm(pixels, k, cout_g, a, b, T::ONE, c);
    }
}

/// The convolution whose forward pass is the input gradient of `spec`:
/// channels swapped, kernel rotated by 180°, same groups.
fn transposed_kernel<T: Real>(spec: &ConvSpec, weights: &[T]) -> (ConvSpec, Vec<T>) {
    let t = ConvSpec {
        kernel_h: spec.kernel_h,
        kernel_w: spec.kernel_w,
        in_channels: spec.out_channels,
        out_channels: spec.in_channels,
        groups: spec.groups,
    };
    let (kh, kw) = (spec.kernel_h, spec.kernel_w);
    let (cin_g, cout_g) = (spec.in_per_group(), spec.out_per_group());
    let mut w = vec![T::ZERO; t.weight_len()];
    for g in 0..spec.groups {
        for o in 0..cout_g {
            for ky in 0..kh {
                for kx in 0..kw {
                    for i in 0..cin_g {
                        let src = (((g * cout_g + o) * kh + ky) * kw + kx) * cin_g + i;
                        let dst = (((g * cin_g + i) * kh + (kh - 1 - ky)) * kw + (kw - 1 - kx)) * cout_g + o;
                        w[dst] = weights[src];
                    }
                }
            }
        }
    }
    (t, w)
}

pub fn conv2d<T: Real>(input: &Tensor<T>, spec: &ConvSpec, weights: &[T], bias: &[T]) -> Result<Tensor<T>> {
    check_args(input, spec, weights)?;
    if bias.len() != spec.out_channels {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            detail: format!("bias has {} elements, expected {}", bias.len(), spec.out_channels),
        });
    }
    let s = input.shape();
    let out_shape = Shape::new(s.n, s.h, s.w, spec.out_channels);
    let pixels = s.pixels();
    let mut out = Vec::with_capacity(out_shape.len());
    for _ in 0..pixels {
        out.extend_from_slice(bias);
    }
    T::with_scratch(|cols| conv_accumulate(input, spec, weights, &mut out, cols));
    let out = Tensor::new(out_shape, out)?;
    out.ensure_finite("conv2d")?;
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to input, weights and bias.
pub fn conv2d_grad<T: Real>(
    input: &Tensor<T>,
    spec: &ConvSpec,
    weights: &[T],
    upstream: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    conv2d_backward(input, spec, weights, upstream, true)
}

/// Like [`conv2d_grad`], optionally skipping the input gradient (first layer).
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    spec: &ConvSpec,
    weights: &[T],
    upstream: &Tensor<T>,
    need_input_grad: bool,
) -> Result<ConvGrads<T>> {
    check_args(input, spec, weights)?;
    let s = input.shape();
    let expected = Shape::new(s.n, s.h, s.w, spec.out_channels);
    if upstream.shape() != expected {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d_grad",
            detail: format!("upstream gradient {} does not match output {}", upstream.shape(), expected),
        });
    }
    let pixels = s.pixels();
    let (cin_g, cout_g, k) = (spec.in_per_group(), spec.out_per_group(), spec.fan_in());
    let dy = upstream.data();

    let mut grad_bias = vec![T::ZERO; spec.out_channels];
    for px in dy.chunks_exact(spec.out_channels) {
        for (gb, &v) in grad_bias.iter_mut().zip(px) {
            *gb += v;
        }
    }

    let mut grad_w = vec![T::ZERO; spec.weight_len()];
    let direct = T::conv_weight_grad_direct(input.data(), (s.n, s.h, s.w), spec, dy, &mut grad_w);
    T::with_scratch(|cols| {
        if direct {
            return;
        }
        if !spec.is_pointwise() {
            im2col(input, spec, cols);
        }
        for g in 0..spec.groups {
            let a = if spec.is_pointwise() {
                MatRef { data: input.data(), offset: g * cin_g, rs: s.c, cs: 1 }
            } else {
                MatRef { data: cols, offset: g * k, rs: k * spec.groups, cs: 1 }
            };
            // dW_g (cout_g × k) = dY_g^T (cout_g × P) · A_g (P × k)
            let dy_t = MatRef { data: dy, offset: g * cout_g, rs: 1, cs: spec.out_channels };
            let c = MatMut { data: &mut grad_w, offset: g * cout_g * k, rs: k, cs: 1 };
            gemm(cout_g, pixels, k, dy_t, a, T::ZERO, c);
        }
    });

    let grad_in = if !need_input_grad {
        None
    } else if spec.is_pointwise() {
        let mut grad_in = vec![T::ZERO; s.len()];
        for g in 0..spec.groups {
            // dX_g (P × cin_g) = dY_g (P × cout_g) · W_g (cout_g × cin_g)
            let dy_g = MatRef { data: dy, offset: g * cout_g, rs: spec.out_channels, cs: 1 };
            let w_g = MatRef { data: weights, offset: g * cout_g * k, rs: k, cs: 1 };
            let c = MatMut { data: &mut grad_in, offset: g * cin_g, rs: s.c, cs: 1 };
            gemm(pixels, cout_g, k, dy_g, w_g, T::ZERO, c);
        }
        Some(grad_in)
    } else {
        let (tspec, tweights) = transposed_kernel(spec, weights);
        let mut grad_in = vec![T::ZERO; s.len()];
        T::with_scratch(|cols| conv_accumulate(upstream, &tspec, &tweights, &mut grad_in, cols));
        Some(grad_in)
    };
    let input_grad = grad_in.map(|d| Tensor::new(s, d)).transpose()?;
    Ok(ConvGrads { input: input_grad, weights: grad_w, bias: grad_bias })
}
