//! Procedural RGB test images: colour gradients overlaid with anti-aliased
//! discs, polygons and sinusoidal gratings. They contain sharp edges at many
//! orientations and textures at many frequencies, which is what a
//! super-resolution model has to learn beyond interpolation.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{write_png, RgbImage};
use crate::rng::{stream_rng, Stream};

/// Sub-samples per axis used for anti-aliasing.
const SUPERSAMPLE: usize = 4;

enum Shape {
    Disc {
        cx: f64,
        cy: f64,
        r: f64,
    },
    /// Convex polygon given as half-planes `a·x + b·y <= c`.
    Polygon {
        planes: Vec<(f64, f64, f64)>,
    },
    Grating {
        cx: f64,
        cy: f64,
        r: f64,
        fx: f64,
        fy: f64,
        phase: f64,
    },
}

struct Layer {
    shape: Shape,
    color: [f64; 3],
    alt: [f64; 3],
    opacity: f64,
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn random_polygon(rng: &mut ChaCha8Rng, h: f64, w: f64) -> Shape {
    let (cx, cy) = (rng.random::<f64>() * w, rng.random::<f64>() * h);
    let r = (0.08 + 0.3 * rng.random::<f64>()) * h.min(w);
    let sides = rng.random_range(3..=6);
    let rot = rng.random::<f64>() * 2.0 * PI;
    let planes = (0..sides)
        .map(|k| {
            let t = rot + 2.0 * PI * k as f64 / sides as f64;
            let (a, b) = (t.cos(), t.sin());
            (a, b, a * cx + b * cy + r)
        })
        .collect();
    Shape::Polygon { planes }
}

impl Layer {
    fn random(rng: &mut ChaCha8Rng, h: f64, w: f64) -> Layer {
        let shape = match rng.random_range(0..3) {
            0 => Shape::Disc {
                cx: rng.random::<f64>() * w,
                cy: rng.random::<f64>() * h,
                r: (0.04 + 0.25 * rng.random::<f64>()) * h.min(w),
            },
            1 => random_polygon(rng, h, w),
            _ => {
                let period = 2.5 + 14.0 * rng.random::<f64>();
                let t = rng.random::<f64>() * PI;
                Shape::Grating {
                    cx: rng.random::<f64>() * w,
                    cy: rng.random::<f64>() * h,
                    r: (0.15 + 0.3 * rng.random::<f64>()) * h.min(w),
                    fx: t.cos() * 2.0 * PI / period,
                    fy: t.sin() * 2.0 * PI / period,
                    phase: rng.random::<f64>() * 2.0 * PI,
                }
            }
        };
        Layer { shape, color: random_color(rng), alt: random_color(rng), opacity: 0.6 + 0.4 * rng.random::<f64>() }
    }

    /// Coverage in `[0, 1]` and colour at a sample point.
    fn sample(&self, x: f64, y: f64) -> (f64, [f64; 3]) {
        match &self.shape {
            Shape::Disc { cx, cy, r } => {
                let inside = (x - cx).powi(2) + (y - cy).powi(2) <= r * r;
                (if inside { 1.0 } else { 0.0 }, self.color)
            }
            Shape::Polygon { planes } => {
                let inside = planes.iter().all(|&(a, b, c)| a * x + b * y <= c);
                (if inside { 1.0 } else { 0.0 }, self.color)
            }
            Shape::Grating { cx, cy, r, fx, fy, phase } => {
                if (x - cx).powi(2) + (y - cy).powi(2) > r * r {
                    return (0.0, self.color);
                }
                let t = 0.5 + 0.5 * (fx * x + fy * y + phase).sin();
                (1.0, std::array::from_fn(|k| t * self.color[k] + (1.0 - t) * self.alt[k]))
            }
        }
    }
}

/// Deterministic image number `index` of the synthetic set for `seed`.
pub fn synth_image(height: usize, width: usize, seed: u64, index: u64) -> RgbImage {
    let mut rng = stream_rng(seed, Stream::Synth, index);
    let (h, w) = (height as f64, width as f64);
    let (c0, c1) = (random_color(&mut rng), random_color(&mut rng));
    let angle = rng.random::<f64>() * 2.0 * PI;
    let (gx, gy) = (angle.cos() / w, angle.sin() / h);
    let layers: Vec<Layer> = (0..rng.random_range(6..=14)).map(|_| Layer::random(&mut rng, h, w)).collect();

    let mut data = Vec::with_capacity(height * width * 3);
    let step = 1.0 / SUPERSAMPLE as f64;
    for py in 0..height {
        for px in 0..width {
            let mut acc = [0.0; 3];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = px as f64 + (sx as f64 + 0.5) * step;
                    let y = py as f64 + (sy as f64 + 0.5) * step;
                    let t = (0.5 + (x - w / 2.0) * gx + (y - h / 2.0) * gy).clamp(0.0, 1.0);
                    let mut c = [0.0; 3];
                    for k in 0..3 {
                        c[k] = (1.0 - t) * c0[k] + t * c1[k];
                    }
                    for layer in &layers {
                        let (cov, lc) = layer.sample(x, y);
                        let a = cov * layer.opacity;
                        for k in 0..3 {
                            c[k] = (1.0 - a) * c[k] + a * lc[k];
                        }
                    }
                    for k in 0..3 {
                        acc[k] += c[k];
                    }
                }
            }
            let n = (SUPERSAMPLE * SUPERSAMPLE) as f64;
            data.extend(acc.iter().map(|v| (v / n * 255.0).round().clamp(0.0, 255.0) as u8));
        }
    }
    RgbImage::new(height, width, data).expect("buffer sized for the image")
}

/// Writes `count` images as `<root>/hr/0000.png`, `0001.png`, ...
pub fn write_synth_dataset(root: &Path, count: usize, size: usize, seed: u64) -> Result<Vec<PathBuf>> {
    let hr = root.join("hr");
    std::fs::create_dir_all(&hr).map_err(|e| Error::io(&hr, e))?;
    (0..count)
        .map(|i| {
            let path = hr.join(format!("{i:04}.png"));
            write_png(&path, &synth_image(size, size, seed, i as u64))?;
            Ok(path)
        })
        .collect()
}
