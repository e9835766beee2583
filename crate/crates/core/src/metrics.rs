//! Image quality metrics, the challenge score and bicubic resampling.
//!
//! Metric inputs are `[0, 255]`-scaled `f64` tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::tensor::{Real, Shape, Tensor, TensorError};

/// Reported PSNR for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

fn same_shape(op: &'static str, a: Shape, b: Shape) -> Result<()> {
    if a != b {
        return Err(TensorError::ShapeMismatch { op, detail: format!("{a} vs {b}") }.into());
    }
    Ok(())
}

/// Mean squared error over the region `shave` pixels inside every border.
pub fn mse(a: &Tensor<f64>, b: &Tensor<f64>, shave: usize) -> Result<f64> {
    same_shape("psnr", a.shape(), b.shape())?;
    let s = a.shape();
    if 2 * shave >= s.h || 2 * shave >= s.w {
        return Err(Error::Metric(format!("shave {shave} leaves no pixels of a {}x{} image", s.h, s.w)));
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for n in 0..s.n {
        for y in shave..s.h - shave {
            let row = s.index(n, y, shave, 0);
            let len = (s.w - 2 * shave) * s.c;
            for (p, q) in a.data()[row..row + len].iter().zip(&b.data()[row..row + len]) {
                sum += (p - q) * (p - q);
            }
            count += len;
        }
    }
    Ok(sum / count as f64)
}

/// `10·log10(255² / MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Tensor<f64>, b: &Tensor<f64>, shave: usize) -> Result<f64> {
    let m = mse(a, b, shave)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (255.0 * 255.0 / m).log10()).min(PSNR_CAP_DB))
}

/// BT.601 studio-swing luma: `16 + (65.481 R + 128.553 G + 24.966 B) / 255`.
pub fn rgb_to_y(image: &Tensor<f64>) -> Result<Tensor<f64>> {
    let s = image.shape();
    if s.c != 3 {
        return Err(
            TensorError::ShapeMismatch { op: "rgb_to_y", detail: format!("expected 3 channels, got {s}") }.into()
        );
    }
    let data =
        image.data().chunks_exact(3).map(|p| 16.0 + (65.481 * p[0] + 128.553 * p[1] + 24.966 * p[2]) / 255.0).collect();
    Ok(Tensor::new(Shape::new(s.n, s.h, s.w, 1), data)?)
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const SSIM_RANGE: f64 = 255.0;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let mid = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - mid;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = g.iter().sum();
    g.map(|v| v / sum)
}

/// Valid-mode separable filtering of one `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..SSIM_WINDOW).map(|k| g[k] * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|k| g[k] * tmp[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM (11×11 Gaussian window, σ = 1.5), averaged over channels and batch.
pub fn ssim(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    same_shape("ssim", a.shape(), b.shape())?;
    let s = a.shape();
    if s.h < SSIM_WINDOW || s.w < SSIM_WINDOW {
        return Err(Error::Metric(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {}x{}",
            s.h, s.w
        )));
    }
    let g = gaussian_window();
    let c1 = (SSIM_K1 * SSIM_RANGE).powi(2);
    let c2 = (SSIM_K2 * SSIM_RANGE).powi(2);
    let mut total = 0.0;
    for n in 0..s.n {
        for c in 0..s.c {
            let plane = |t: &Tensor<f64>| -> Vec<f64> {
                (0..s.h * s.w).map(|i| t.data()[(n * s.h * s.w + i) * s.c + c]).collect()
            };
            let (pa, pb) = (plane(a), plane(b));
            let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
            let mu_a = filter_valid(&pa, s.h, s.w, &g);
            let mu_b = filter_valid(&pb, s.h, s.w, &g);
            let e_aa = filter_valid(&prod(&pa, &pa), s.h, s.w, &g);
            let e_bb = filter_valid(&prod(&pb, &pb), s.h, s.w, &g);
            let e_ab = filter_valid(&prod(&pa, &pb), s.h, s.w, &g);
            let mut sum = 0.0;
            for i in 0..mu_a.len() {
                let (ma, mb) = (mu_a[i], mu_b[i]);
                let var_a = e_aa[i] - ma * ma;
                let var_b = e_bb[i] - mb * mb;
                let cov = e_ab[i] - ma * mb;
                sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
            }
            total += sum / mu_a.len() as f64;
        }
    }
    Ok(total / (s.n * s.c) as f64)
}

/// `2^(2·PSNR) / (C · runtime)`.
pub fn challenge_score(psnr_db: f64, runtime_ms: f64, c: f64) -> Result<f64> {
    if runtime_ms.is_nan() || runtime_ms <= 0.0 || c.is_nan() || c <= 0.0 {
        return Err(Error::Metric(format!("runtime ({runtime_ms}) and C ({c}) must be positive")));
    }
    Ok((2.0 * psnr_db).exp2() / (c * runtime_ms))
}

const BICUBIC_A: f64 = -0.5;

fn cubic(x: f64) -> f64 {
    let x = x.abs();
    let a = BICUBIC_A;
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Source taps of one output sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ResampleTaps {
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Normalized bicubic taps mapping `in_len` samples onto `out_len`.
/// Pixel centres are aligned; when shrinking, the kernel is widened by the
/// reduction factor; indices past the edge are clamped.
pub fn bicubic_taps(in_len: usize, out_len: usize) -> Vec<ResampleTaps> {
    let ratio = in_len as f64 / out_len as f64;
    let stretch = ratio.max(1.0);
    let support = 2.0 * stretch;
    (0..out_len)
        .map(|o| {
            let center = (o as f64 + 0.5) * ratio - 0.5;
            let lo = (center - support).ceil() as isize;
            let hi = (center + support).floor() as isize;
            let mut taps = ResampleTaps { indices: Vec::new(), weights: Vec::new() };
            for k in lo..=hi {
                let w = cubic((k as f64 - center) / stretch);
                if w == 0.0 {
                    continue;
                }
                taps.indices.push(k.clamp(0, in_len as isize - 1) as usize);
                taps.weights.push(w);
            }
            let sum: f64 = taps.weights.iter().sum();
            for w in &mut taps.weights {
                *w /= sum;
            }
            taps
        })
        .collect()
}

/// Separable bicubic resize of every batch item and channel.
pub fn bicubic_resize<T: Real>(image: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let s = image.shape();
    if out_h == 0 || out_w == 0 || s.h == 0 || s.w == 0 {
        return Err(Error::Metric(format!("cannot resize {s} to {out_h}x{out_w}")));
    }
    let tx = bicubic_taps(s.w, out_w);
    let ty = bicubic_taps(s.h, out_h);
    let src: Vec<f64> = image.data().iter().map(|v| v.to_f64()).collect();
    let mut horiz = vec![0.0; s.n * s.h * out_w * s.c];
    for n in 0..s.n {
        for y in 0..s.h {
            for (x, t) in tx.iter().enumerate() {
                let dst = ((n * s.h + y) * out_w + x) * s.c;
                for (&i, &w) in t.indices.iter().zip(&t.weights) {
                    let src_px = s.index(n, y, i, 0);
                    for c in 0..s.c {
                        horiz[dst + c] += w * src[src_px + c];
                    }
                }
            }
        }
    }
    let out_shape = Shape::new(s.n, out_h, out_w, s.c);
    let mut out = vec![0.0; out_shape.len()];
    for n in 0..s.n {
        for (y, t) in ty.iter().enumerate() {
            let dst = out_shape.index(n, y, 0, 0);
            for (&i, &w) in t.indices.iter().zip(&t.weights) {
                let row = ((n * s.h + i) * out_w) * s.c;
                for (o, &v) in out[dst..dst + out_w * s.c].iter_mut().zip(&horiz[row..row + out_w * s.c]) {
                    *o += w * v;
                }
            }
        }
    }
    Ok(Tensor::new(out_shape, out.into_iter().map(T::from_f64).collect())?)
}

/// Bicubic ×`scale` downscale of an 8-bit image, rounded back to 8 bits.
pub fn downscale_image(hr: &RgbImage, scale: usize) -> Result<RgbImage> {
    let t = bicubic_resize(&hr.to_f64(), hr.height / scale, hr.width / scale)?;
    let data = t.data().iter().map(|&v| v.round().clamp(0.0, 255.0) as u8).collect();
    RgbImage::new(hr.height / scale, hr.width / scale, data)
}

/// Bicubic ×`scale` upscale of an 8-bit image, rounded back to 8 bits.
pub fn upscale_image(lr: &RgbImage, scale: usize) -> Result<RgbImage> {
    let t = bicubic_resize(&lr.to_f64(), lr.height * scale, lr.width * scale)?;
    let data = t.data().iter().map(|&v| v.round().clamp(0.0, 255.0) as u8).collect();
    RgbImage::new(lr.height * scale, lr.width * scale, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricMode {
    Rgb,
    YChannel,
}

impl MetricMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricMode::Rgb => "rgb",
            MetricMode::YChannel => "y_channel",
        }
    }
}

impl std::str::FromStr for MetricMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb" => Ok(MetricMode::Rgb),
            "y" | "y_channel" => Ok(MetricMode::YChannel),
            other => Err(Error::Metric(format!("unknown metric mode {other:?} (rgb | y)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Which model or baseline produced the images (`float`, `uint8`, `bicubic`...).
    pub source: String,
    pub mode: MetricMode,
    pub border_shave: usize,
    pub images: Vec<ImageScore>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

/// PSNR and SSIM of `sr` against `hr` in the given mode.
pub fn score_image(sr: &RgbImage, hr: &RgbImage, mode: MetricMode, shave: usize) -> Result<(f64, f64)> {
    let (a, b) = match mode {
        MetricMode::Rgb => (sr.to_f64(), hr.to_f64()),
        MetricMode::YChannel => (rgb_to_y(&sr.to_f64())?, rgb_to_y(&hr.to_f64())?),
    };
    let p = psnr(&a, &b, shave)?;
    let inner = |t: &Tensor<f64>| {
        let s = t.shape();
        t.crop(shave, shave, s.h - 2 * shave, s.w - 2 * shave)
    };
    let (ia, ib) = (inner(&a)?, inner(&b)?);
    let q = if ia.shape().h >= SSIM_WINDOW && ia.shape().w >= SSIM_WINDOW { ssim(&ia, &ib)? } else { f64::NAN };
    Ok((p, q))
}

impl EvalReport {
    pub fn new(source: &str, mode: MetricMode, border_shave: usize, images: Vec<ImageScore>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Metric("no images to report".into()));
        }
        let n = images.len() as f64;
        let mean_psnr = images.iter().map(|i| i.psnr).sum::<f64>() / n;
        let mean_ssim = images.iter().map(|i| i.ssim).sum::<f64>() / n;
        Ok(EvalReport { source: source.into(), mode, border_shave, images, mean_psnr, mean_ssim })
    }

    /// Scores `(name, sr, hr)` triples.
    pub fn evaluate<'a>(
        source: &str,
        mode: MetricMode,
        border_shave: usize,
        pairs: impl IntoIterator<Item = (&'a str, &'a RgbImage, &'a RgbImage)>,
    ) -> Result<Self> {
        let mut images = Vec::new();
        for (name, sr, hr) in pairs {
            let (psnr, ssim) = score_image(sr, hr, mode, border_shave)?;
            images.push(ImageScore { name: name.into(), psnr, ssim });
        }
        EvalReport::new(source, mode, border_shave, images)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = format!(
            "# source={} mode={} shave={}\nimage\tpsnr_db\tssim\n",
            self.source,
            self.mode.as_str(),
            self.border_shave
        );
        for i in &self.images {
            out.push_str(&format!("{}\t{:.4}\t{:.4}\n", i.name, i.psnr, i.ssim));
        }
        out.push_str(&format!("mean\t{:.4}\t{:.4}\n", self.mean_psnr, self.mean_ssim));
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
