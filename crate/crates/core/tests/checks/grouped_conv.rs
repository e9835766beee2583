//! Grouped convolution equals the channel concatenation of independent dense
//! convolutions, one per group.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xlsr::ops::{conv2d, ConvSpec};
use xlsr::{Shape, Tensor};

/// Textbook dense "same" convolution in f64 over one channel slice of `x`.
fn dense_conv(x: &Tensor<f32>, c0: usize, cin: usize, k: usize, w: &[f32], b: &[f32]) -> Vec<Vec<f64>> {
    let s = x.shape();
    let cout = b.len();
    let pad = (k as isize - 1) / 2;
    let mut out = Vec::with_capacity(s.pixels());
    for n in 0..s.n {
        for y in 0..s.h {
            for xx in 0..s.w {
                let mut px = vec![0.0f64; cout];
                for (o, v) in px.iter_mut().enumerate() {
                    let mut acc = b[o] as f64;
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = y as isize + ky as isize - pad;
                            let ix = xx as isize + kx as isize - pad;
                            if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                continue;
                            }
                            for i in 0..cin {
                                let xv = x.at(n, iy as usize, ix as usize, c0 + i) as f64;
                                acc += xv * w[((o * k + ky) * k + kx) * cin + i] as f64;
                            }
                        }
                    }
                    *v = acc;
                }
                out.push(px);
            }
        }
    }
    out
}

pub const CASES: usize = 50;
pub const TOLERANCE: f64 = 1e-6;

/// Max abs difference between `conv2d` and the oracle over random cases.
pub fn worst_error() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for case in 0..CASES {
        let groups = if case % 2 == 0 { 2 } else { 4 };
        let k = [1, 3][rng.random_range(0..2)];
        let cin_g = rng.random_range(1..=8);
        let cout_g = [1, 3, 8, 16][rng.random_range(0..4)];
        let (cin, cout) = (groups * cin_g, groups * cout_g);
        let spec = ConvSpec::new(k, cin, cout, groups);
        let shape = Shape::new(rng.random_range(1..=2), rng.random_range(1..=9), rng.random_range(1..=12), cin);
        let x = Tensor::from_fn(shape, |_, _, _, _| rng.random_range(0.0f32..1.0));
        // weights on the scale the initializer and training produce
        let std = (0.2 / spec.fan_in() as f64).sqrt() as f32;
        let w: Vec<f32> = (0..spec.weight_len()).map(|_| rng.random_range(-2.0 * std..2.0 * std)).collect();
        let b: Vec<f32> = (0..cout).map(|_| rng.random_range(-0.1f32..0.1)).collect();
        let got = conv2d(&x, &spec, &w, &b).unwrap();

        let per_group = spec.weight_len() / groups;
        let parts: Vec<Vec<Vec<f64>>> = (0..groups)
            .map(|g| {
                let wg = &w[g * per_group..(g + 1) * per_group];
                dense_conv(&x, g * cin_g, cin_g, k, wg, &b[g * cout_g..(g + 1) * cout_g])
            })
            .collect();
        for (p, px) in got.data().chunks_exact(cout).enumerate() {
            for (o, &v) in px.iter().enumerate() {
                let want = parts[o / cout_g][p][o % cout_g];
                worst = worst.max((v as f64 - want).abs());
            }
        }
    }
    worst
}
