//! 8-bit RGB images and PNG input/output.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor, TensorError};

/// Row-major interleaved RGB, one byte per channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

/// `round(v · 255)` clamped to `[0, 255]`, halves away from zero.
pub fn unit_to_u8(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(TensorError::LengthMismatch {
                shape: Shape::new(1, height, width, 3),
                expected: height * width * 3,
                actual: data.len(),
            }
            .into());
        }
        Ok(RgbImage { height, width, data })
    }

    pub fn shape(&self) -> Shape {
        Shape::new(1, self.height, self.width, 3)
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * 3 + c]
    }

    /// `1 × H × W × 3` tensor with values `v / 255`.
    pub fn to_unit<T: Real>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|&v| T::from_f64(v as f64 / 255.0)).collect();
        Tensor::new(self.shape(), data).expect("shape matches data")
    }

    /// `1 × H × W × 3` tensor on the `[0, 255]` scale.
    pub fn to_f64(&self) -> Tensor<f64> {
        let data = self.data.iter().map(|&v| v as f64).collect();
        Tensor::new(self.shape(), data).expect("shape matches data")
    }

    /// Quantizes a single-image `[0, 1]` tensor to 8 bits (clamped).
    pub fn from_unit<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        if s.n != 1 || s.c != 3 {
            return Err(
                TensorError::ShapeMismatch { op: "to_image", detail: format!("expected 1×H×W×3, got {s}") }.into()
            );
        }
        let data = t.data().iter().map(|v| unit_to_u8(v.to_f64())).collect();
        RgbImage::new(s.h, s.w, data)
    }

    /// Crop `[y0, y0 + h) × [x0, x0 + w)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(TensorError::InvalidArgument {
                op: "crop",
                detail: format!("window {h}x{w} at ({y0},{x0}) exceeds {}x{}", self.height, self.width),
            }
            .into());
        }
        let mut data = Vec::with_capacity(h * w * 3);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * 3;
            data.extend_from_slice(&self.data[start..start + w * 3]);
        }
        RgbImage::new(h, w, data)
    }

    /// Largest top-left crop whose sides are multiples of `m`.
    pub fn mod_crop(&self, m: usize) -> Result<Self> {
        self.crop(0, 0, self.height / m * m, self.width / m * m)
    }
}

/// Reads an 8-bit RGB PNG; every other colour type or bit depth is rejected.
pub fn read_png(path: &Path) -> Result<RgbImage> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let unsupported = |detail: String| Error::UnsupportedImage { path: path.to_path_buf(), detail };
    let mut reader = decoder.read_info().map_err(|e| Error::format(path, e.to_string()))?;
    let info = reader.info();
    if info.bit_depth != png::BitDepth::Eight {
        return Err(unsupported(format!("bit depth {:?}, only 8-bit is accepted", info.bit_depth)));
    }
    if info.color_type != png::ColorType::Rgb {
        return Err(unsupported(format!("colour type {:?}, only RGB is accepted", info.color_type)));
    }
    let (width, height) = (info.width as usize, info.height as usize);
    let size = reader.output_buffer_size().ok_or_else(|| unsupported("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let frame = reader.next_frame(&mut buf).map_err(|e| Error::format(path, e.to_string()))?;
    if frame.line_size != width * 3 {
        return Err(unsupported("unexpected row layout".into()));
    }
    buf.truncate(height * width * 3);
    RgbImage::new(height, width, buf)
}

pub fn write_png(path: &Path, image: &RgbImage) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), image.width as u32, image.height as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let to_err = |e: png::EncodingError| Error::format(path, e.to_string());
    let mut writer = encoder.write_header().map_err(to_err)?;
    writer.write_image_data(&image.data).map_err(to_err)?;
    writer.finish().map_err(to_err)
}
