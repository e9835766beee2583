//! Pure index permutations: depth-to-space, its inverse, and channel concatenation.

use crate::tensor::{Real, Result, Shape, Tensor, TensorError};

/// Moves `block²` channel groups into a `block`× larger spatial grid.
///
/// Output `(y, x, c)` reads input `(y / b, x / b, c·b² + (y mod b)·b + (x mod b))`.
pub fn depth_to_space<T: Real>(input: &Tensor<T>, block: usize) -> Result<Tensor<T>> {
    let s = input.shape();
    if block == 0 {
        return Err(TensorError::InvalidArgument { op: "depth_to_space", detail: "block must be positive".into() });
    }
    let bb = block * block;
    if !s.c.is_multiple_of(bb) {
        return Err(TensorError::NotDivisible { op: "depth_to_space", what: "channels", value: s.c, divisor: bb });
    }
    let out_shape = Shape::new(s.n, s.h * block, s.w * block, s.c / bb);
    let data = input.data();
    let mut out = Vec::with_capacity(out_shape.len());
    for n in 0..s.n {
        for y in 0..out_shape.h {
            for x in 0..out_shape.w {
                let base = s.index(n, y / block, x / block, (y % block) * block + x % block);
                for c in 0..out_shape.c {
                    out.push(data[base + c * bb]);
                }
            }
        }
    }
    Tensor::new(out_shape, out)
}

/// Exact inverse of [`depth_to_space`].
pub fn space_to_depth<T: Real>(input: &Tensor<T>, block: usize) -> Result<Tensor<T>> {
    let s = input.shape();
    if block == 0 {
        return Err(TensorError::InvalidArgument { op: "space_to_depth", detail: "block must be positive".into() });
    }
    for (what, value) in [("height", s.h), ("width", s.w)] {
        if value % block != 0 {
            return Err(TensorError::NotDivisible { op: "space_to_depth", what, value, divisor: block });
        }
    }
    let bb = block * block;
    let out_shape = Shape::new(s.n, s.h / block, s.w / block, s.c * bb);
    let mut out = vec![T::ZERO; out_shape.len()];
    let data = input.data();
    for n in 0..s.n {
        for y in 0..s.h {
            for x in 0..s.w {
                let base = out_shape.index(n, y / block, x / block, (y % block) * block + x % block);
                let src = s.index(n, y, x, 0);
                for c in 0..s.c {
                    out[base + c * bb] = data[src + c];
                }
            }
        }
    }
    Tensor::new(out_shape, out)
}

/// Concatenates along channels, `a` first.
pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if (sa.n, sa.h, sa.w) != (sb.n, sb.h, sb.w) {
        return Err(TensorError::ShapeMismatch { op: "concat_channels", detail: format!("{sa} vs {sb}") });
    }
    let out_shape = Shape::new(sa.n, sa.h, sa.w, sa.c + sb.c);
    let mut out = Vec::with_capacity(out_shape.len());
    for p in 0..sa.pixels() {
        out.extend_from_slice(&a.data()[p * sa.c..(p + 1) * sa.c]);
        out.extend_from_slice(&b.data()[p * sb.c..(p + 1) * sb.c]);
    }
    Tensor::new(out_shape, out)
}

/// Splits an upstream gradient of [`concat_channels`] into the parts for `a` and `b`.
pub fn concat_channels_grad<T: Real>(upstream: &Tensor<T>, a_channels: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let s = upstream.shape();
    if a_channels > s.c {
        return Err(TensorError::ShapeMismatch {
            op: "concat_channels_grad",
            detail: format!("{a_channels} channels requested from {s}"),
        });
    }
    let b_channels = s.c - a_channels;
    let mut ga = Vec::with_capacity(s.pixels() * a_channels);
    let mut gb = Vec::with_capacity(s.pixels() * b_channels);
    for px in upstream.data().chunks_exact(s.c.max(1)) {
        ga.extend_from_slice(&px[..a_channels]);
        gb.extend_from_slice(&px[a_channels..]);
    }
    Ok((
        Tensor::new(Shape::new(s.n, s.h, s.w, a_channels), ga)?,
        Tensor::new(Shape::new(s.n, s.h, s.w, b_channels), gb)?,
    ))
}
