//! Direct f32 convolution kernels for spatial kernels (AVX-512 or AVX2 + FMA).
//!
//! Output channels are processed in blocks of one vector register. A tile
//! accumulates `P` neighbouring pixels times `OB` output blocks, reading from a
//! zero-padded copy of the input so the inner loops carry no border tests.
//! Dense layers whose output count is not a multiple of the block are padded
//! with zero filters. Callers fall back to im2col + GEMM whenever [`supported`]
//! is false.

use super::conv::ConvSpec;

/// Zero-pads `input` (`n × h × w × c`) to `n × (h + kh - 1) × (w + kw - 1) × c`.
fn pad_input(input: &[f32], (n, h, w): (usize, usize, usize), spec: &ConvSpec) -> (Vec<f32>, usize, usize) {
    let c = spec.in_channels;
    let (pt, pl) = ((spec.kernel_h - 1) / 2, (spec.kernel_w - 1) / 2);
    let (ph, pw) = (h + spec.kernel_h - 1, w + spec.kernel_w - 1);
    let mut out = vec![0.0f32; n * ph * pw * c];
    for b in 0..n {
        for y in 0..h {
            let src = ((b * h + y) * w) * c;
            let dst = ((b * ph + y + pt) * pw + pl) * c;
            out[dst..dst + w * c].copy_from_slice(&input[src..src + w * c]);
        }
    }
    (out, ph, pw)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Isa {
    Avx512,
    Avx2,
}

impl Isa {
    fn lanes(self) -> usize {
        match self {
            Isa::Avx512 => 16,
            Isa::Avx2 => 8,
        }
    }
}

fn detect() -> Option<Isa> {
    #[cfg(target_arch = "x86_64")]
    {
        if is_x86_feature_detected!("avx512f") {
            return Some(Isa::Avx512);
        }
        if is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma") {
            return Some(Isa::Avx2);
        }
    }
    None
}

/// The widest instruction set whose block size divides the per-group outputs.
fn isa_for(spec: &ConvSpec) -> Option<Isa> {
    let best = detect()?;
    [Isa::Avx512, Isa::Avx2]
        .into_iter()
        .filter(|&isa| isa == Isa::Avx2 || best == Isa::Avx512)
        .find(|isa| spec.out_per_group().is_multiple_of(isa.lanes()))
}

pub(crate) fn supported(spec: &ConvSpec) -> bool {
    let spatial = spec.kernel_h > 1 || spec.kernel_w > 1;
    spatial && detect().is_some() && (spec.groups == 1 || isa_for(spec).is_some())
}

/// `spec` with the output count rounded up to a whole number of blocks.
fn padded_spec(spec: &ConvSpec) -> ConvSpec {
    let lanes = detect().map_or(1, Isa::lanes);
    ConvSpec { out_channels: spec.out_channels.div_ceil(lanes) * lanes, ..*spec }
}

/// `out += conv(input, weights)`; `out` is `pixels × out_channels`.
pub(crate) fn conv_accumulate(
    input: &[f32],
    dims: (usize, usize, usize),
    spec: &ConvSpec,
    weights: &[f32],
    out: &mut [f32],
) {
    assert!(supported(spec));
    #[cfg(target_arch = "x86_64")]
    // SAFETY: `isa_for` only returns instruction sets detected at runtime.
    unsafe {
        match isa_for(spec) {
            Some(Isa::Avx512) => return avx512::conv_accumulate(input, dims, spec, weights, out),
            Some(Isa::Avx2) => return avx2::conv_accumulate(input, dims, spec, weights, out),
            None => {}
        }
    }
    // groups == 1: extra zero filters, then drop their outputs
    let ps = padded_spec(spec);
    let mut pw = weights.to_vec();
    pw.resize(ps.weight_len(), 0.0);
    let mut tmp = vec![0.0f32; dims.0 * dims.1 * dims.2 * ps.out_channels];
    conv_accumulate(input, dims, &ps, &pw, &mut tmp);
    for (o, t) in out.chunks_exact_mut(spec.out_channels).zip(tmp.chunks_exact(ps.out_channels)) {
        for (a, &b) in o.iter_mut().zip(t) {
            *a += b;
        }
    }
}

/// Weight gradient `(out_channels, kh, kw, cin_g)` of the convolution.
pub(crate) fn weight_grad(
    input: &[f32],
    dims: (usize, usize, usize),
    spec: &ConvSpec,
    upstream: &[f32],
    grad_w: &mut [f32],
) {
    assert!(supported(spec));
    #[cfg(target_arch = "x86_64")]
    // SAFETY: `isa_for` only returns instruction sets detected at runtime.
    unsafe {
        match isa_for(spec) {
            Some(Isa::Avx512) => return avx512::weight_grad(input, dims, spec, upstream, grad_w),
            Some(Isa::Avx2) => return avx2::weight_grad(input, dims, spec, upstream, grad_w),
            None => {}
        }
    }
    let ps = padded_spec(spec);
    let mut up = vec![0.0f32; dims.0 * dims.1 * dims.2 * ps.out_channels];
    for (u, s) in up.chunks_exact_mut(ps.out_channels).zip(upstream.chunks_exact(spec.out_channels)) {
        u[..spec.out_channels].copy_from_slice(s);
    }
    let mut gw = vec![0.0f32; ps.weight_len()];
    weight_grad(input, dims, &ps, &up, &mut gw);
    grad_w.copy_from_slice(&gw[..spec.weight_len()]);
}

/// One kernel module per vector width; the bodies are identical.
#[cfg(target_arch = "x86_64")]
macro_rules! simd_kernels {
    (
        $module:ident, $features:literal, $lanes:literal, $v:ty,
        zero = $zero:ident, load = $load:ident, store = $store:ident,
        splat = $splat:ident, fma = $fma:ident, add = $add:ident,
        tiles = [$p1:literal, $p2:literal, $p3:literal, $p4:literal]
    ) => {
        mod $module {
            use std::arch::x86_64::*;

            use super::{pad_input, ConvSpec};

            const LANES: usize = $lanes;

            struct Geometry<'a> {
                padded: &'a [f32],
                wt: &'a [f32],
                n: usize,
                h: usize,
                w: usize,
                ph: usize,
                pw: usize,
                c: usize,
                cout: usize,
                cin_g: usize,
                cout_g: usize,
                kh: usize,
                kw: usize,
            }

            /// Accumulates outputs `[block, block + OB)` of group `g`, `P` pixels at a time.
            #[target_feature(enable = $features)]
            unsafe fn run<const P: usize, const OB: usize>(
                geo: &Geometry<'_>,
                g: usize,
                block: usize,
                out: &mut [f32],
            ) {
                let taps = geo.kh * geo.kw;
                let (c, cin_g, cout_g) = (geo.c, geo.cin_g, geo.cout_g);
                let pp = geo.padded.as_ptr();
                let wg = geo.wt.as_ptr().add(g * taps * cin_g * cout_g + block * LANES);
                let op = out.as_mut_ptr();
                let out_off = g * cout_g + block * LANES;
                for b in 0..geo.n {
                    for y in 0..geo.h {
                        let mut x0 = 0;
                        while x0 < geo.w {
                            let full = x0 + P <= geo.w;
                            let count = if full { P } else { 1 };
                            let mut acc: [[$v; OB]; P] = [[$zero(); OB]; P];
                            for ky in 0..geo.kh {
                                for kx in 0..geo.kw {
                                    let t = ky * geo.kw + kx;
                                    let src = pp.add(((b * geo.ph + y + ky) * geo.pw + x0 + kx) * c + g * cin_g);
                                    let wrow = wg.add(t * cin_g * cout_g);
                                    for i in 0..cin_g {
                                        let mut wv: [$v; OB] = [$zero(); OB];
                                        for (j, v) in wv.iter_mut().enumerate() {
                                            *v = $load(wrow.add(i * cout_g + j * LANES));
                                        }
                                        if full {
                                            for (p, row) in acc.iter_mut().enumerate() {
                                                let xv = $splat(*src.add(p * c + i));
                                                for (a, &v) in row.iter_mut().zip(&wv) {
                                                    *a = $fma(xv, v, *a);
                                                }
                                            }
                                        } else {
                                            let xv = $splat(*src.add(i));
                                            for (a, &v) in acc[0].iter_mut().zip(&wv) {
                                                *a = $fma(xv, v, *a);
                                            }
                                        }
                                    }
                                }
                            }
                            for (p, row) in acc.iter().enumerate().take(count) {
                                let dst = op.add(((b * geo.h + y) * geo.w + x0 + p) * geo.cout + out_off);
                                for (j, a) in row.iter().enumerate() {
                                    let d = dst.add(j * LANES);
                                    $store(d, $add($load(d), *a));
                                }
                            }
                            x0 += count;
                        }
                    }
                }
            }

            #[target_feature(enable = $features)]
            pub(super) unsafe fn conv_accumulate(
                input: &[f32],
                dims: (usize, usize, usize),
                spec: &ConvSpec,
                weights: &[f32],
                out: &mut [f32],
            ) {
                let (n, h, w) = dims;
                let (cin_g, cout_g) = (spec.in_per_group(), spec.out_per_group());
                let taps = spec.kernel_h * spec.kernel_w;
                assert_eq!(cout_g % LANES, 0);
                assert_eq!(input.len(), n * h * w * spec.in_channels);
                assert_eq!(weights.len(), spec.weight_len());
                assert_eq!(out.len(), n * h * w * spec.out_channels);
                let (padded, ph, pw) = pad_input(input, dims, spec);

                // per group: [tap][i][o], o contiguous
                let mut wt = vec![0.0f32; weights.len()];
                for g in 0..spec.groups {
                    for o in 0..cout_g {
                        for t in 0..taps {
                            for i in 0..cin_g {
                                wt[((g * taps + t) * cin_g + i) * cout_g + o] =
                                    weights[((g * cout_g + o) * taps + t) * cin_g + i];
                            }
                        }
                    }
                }
                let geo = Geometry {
                    padded: &padded,
                    wt: &wt,
                    n,
                    h,
                    w,
                    ph,
                    pw,
                    c: spec.in_channels,
                    cout: spec.out_channels,
                    cin_g,
                    cout_g,
                    kh: spec.kernel_h,
                    kw: spec.kernel_w,
                };
                let blocks = cout_g / LANES;
                for g in 0..spec.groups {
                    let mut block = 0;
                    while block < blocks {
                        match blocks - block {
                            1 => run::<$p1, 1>(&geo, g, block, out),
                            2 => run::<$p2, 2>(&geo, g, block, out),
                            3 => run::<$p3, 3>(&geo, g, block, out),
                            _ => run::<$p4, 4>(&geo, g, block, out),
                        }
                        block += (blocks - block).min(4);
                    }
                }
            }

            #[target_feature(enable = $features)]
            pub(super) unsafe fn weight_grad(
                input: &[f32],
                dims: (usize, usize, usize),
                spec: &ConvSpec,
                upstream: &[f32],
                grad_w: &mut [f32],
            ) {
                let (n, h, w) = dims;
                let c = spec.in_channels;
                let cout = spec.out_channels;
                let (cin_g, cout_g) = (spec.in_per_group(), spec.out_per_group());
                let (kh, kw) = (spec.kernel_h, spec.kernel_w);
                let taps = kh * kw;
                let chunks = cin_g.div_ceil(LANES);
                assert_eq!(cout_g % LANES, 0);
                assert_eq!(input.len(), n * h * w * c);
                assert_eq!(upstream.len(), n * h * w * cout);
                assert_eq!(grad_w.len(), spec.weight_len());
                let (padded, ph, pw) = pad_input(input, dims, spec);

                // accumulators [output block][tap][chunk][i][o], one image row at a time
                let blocks = cout / LANES;
                let mut accbuf = vec![0.0f32; blocks * taps * chunks * LANES * LANES];
                let pp = padded.as_ptr();
                let up = upstream.as_ptr();
                let ab = accbuf.as_mut_ptr();
                for b in 0..n {
                    for y in 0..h {
                        for ob in 0..blocks {
                            let g = ob * LANES / cout_g;
                            let dy_row = up.add(((b * h + y) * w) * cout + ob * LANES);
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let t = ky * kw + kx;
                                    let x_base = pp.add(((b * ph + y + ky) * pw + kx) * c + g * cin_g);
                                    for chunk in 0..chunks {
                                        let i0 = chunk * LANES;
                                        let count = (cin_g - i0).min(LANES);
                                        let slot = ab.add(((ob * taps + t) * chunks + chunk) * LANES * LANES);
                                        let mut acc: [$v; LANES] = [$zero(); LANES];
                                        for (i, a) in acc.iter_mut().enumerate() {
                                            *a = $load(slot.add(i * LANES));
                                        }
                                        let x_row = x_base.add(i0);
                                        if count == LANES {
                                            for x in 0..w {
                                                let dy = $load(dy_row.add(x * cout));
                                                let xs = x_row.add(x * c);
                                                for (i, a) in acc.iter_mut().enumerate() {
                                                    *a = $fma($splat(*xs.add(i)), dy, *a);
                                                }
                                            }
                                        } else {
                                            for x in 0..w {
                                                let dy = $load(dy_row.add(x * cout));
                                                let xs = x_row.add(x * c);
                                                for (i, a) in acc.iter_mut().enumerate().take(count) {
                                                    *a = $fma($splat(*xs.add(i)), dy, *a);
                                                }
                                            }
                                        }
                                        for (i, a) in acc.iter().enumerate() {
                                            $store(slot.add(i * LANES), *a);
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                for ob in 0..blocks {
                    for t in 0..taps {
                        for chunk in 0..chunks {
                            let slot = ((ob * taps + t) * chunks + chunk) * LANES * LANES;
                            for i in 0..(cin_g - chunk * LANES).min(LANES) {
                                for o in 0..LANES {
                                    grad_w[((ob * LANES + o) * taps + t) * cin_g + chunk * LANES + i] =
                                        accbuf[slot + i * LANES + o];
                                }
                            }
                        }
                    }
                }
            }
        }
    };
}

#[cfg(target_arch = "x86_64")]
simd_kernels!(
    avx2,
    "avx2,fma",
    8,
    __m256,
    zero = _mm256_setzero_ps,
    load = _mm256_loadu_ps,
    store = _mm256_storeu_ps,
    splat = _mm256_set1_ps,
    fma = _mm256_fmadd_ps,
    add = _mm256_add_ps,
    tiles = [8, 6, 4, 3]
);

#[cfg(target_arch = "x86_64")]
simd_kernels!(
    avx512,
    "avx512f",
    16,
    __m512,
    zero = _mm512_setzero_ps,
    load = _mm512_loadu_ps,
    store = _mm512_storeu_ps,
    splat = _mm512_set1_ps,
    fma = _mm512_fmadd_ps,
    add = _mm512_add_ps,
    tiles = [16, 8, 8, 6]
);
