//! 8-bit RGB images, PNG interchange and conversion to tensors.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::Rng;
use sdflow_core::{Real, Shape, Tensor};

use crate::error::{DataError, Result};

/// Interleaved 8-bit RGB pixels, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(DataError::Config(format!("{}x{} RGB image needs {} bytes, got {}", width, height, width * height * 3, data.len())));
        }
        Ok(RgbImage { width, height, data })
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Rounds batch item `n` of a (N, 3, H, W) tensor in [0, 1] to 8 bits;
    /// values outside the range are clamped.
    pub fn from_tensor<T: Real>(t: &Tensor<T>, n: usize) -> Result<Self> {
        let s = t.shape();
        if s.c != 3 || n >= s.n {
            return Err(DataError::Config(format!("cannot take RGB image {n} from tensor {s}")));
        }
        let mut data = vec![0u8; s.h * s.w * 3];
        for y in 0..s.h {
            for x in 0..s.w {
                for c in 0..3 {
                    data[3 * (y * s.w + x) + c] = quantize(t.at(n, c, y, x).as_f64());
                }
            }
        }
        Ok(RgbImage { width: s.w, height: s.h, data })
    }

    /// Exact values `v / 255` as a (1, 3, H, W) tensor.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_fn(Shape::new(1, 3, self.height, self.width), |_, c, y, x| T::from_f64(self.data[3 * (y * self.width + x) + c] as f64 / 255.0))
    }

    /// `v / 255 + U[0, 1/255)` per element; `None` disables the noise.
    pub fn dequantize<T: Real>(&self, rng: Option<&mut dyn rand::RngCore>) -> Tensor<T> {
        let mut t = self.to_tensor::<f64>();
        if let Some(rng) = rng {
            for v in t.data_mut() {
                *v += rng.random::<f64>() / 255.0;
            }
        }
        t.cast()
    }

    /// Rectangular crop.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(DataError::Config(format!("crop {w}x{h}+{x0}+{y0} exceeds {}x{} image", self.width, self.height)));
        }
        let mut data = Vec::with_capacity(w * h * 3);
        for y in y0..y0 + h {
            let row = 3 * (y * self.width + x0);
            data.extend_from_slice(&self.data[row..row + 3 * w]);
        }
        Ok(RgbImage { width: w, height: h, data })
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in (0..self.width).rev() {
                data.extend_from_slice(&self.pixel(x, y));
            }
        }
        RgbImage { width: self.width, height: self.height, data }
    }

    pub fn flip_vertical(&self) -> Self {
        let row = 3 * self.width;
        let mut data = Vec::with_capacity(self.data.len());
        for y in (0..self.height).rev() {
            data.extend_from_slice(&self.data[y * row..(y + 1) * row]);
        }
        RgbImage { width: self.width, height: self.height, data }
    }
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Reads a PNG as 8-bit RGB. Gray, alpha and 16-bit inputs are converted.
pub fn read_png(path: &Path) -> Result<RgbImage> {
    let file = File::open(path).map_err(|e| DataError::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let decode_err = |e: png::DecodingError| DataError::Decode { path: path.to_path_buf(), detail: e.to_string() };
    let mut reader = decoder.read_info().map_err(decode_err)?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(decode_err)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let src = &buf[..info.buffer_size()];
    let data: Vec<u8> = match info.color_type {
        png::ColorType::Rgb => src.to_vec(),
        png::ColorType::Rgba => src.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => src.iter().flat_map(|&v| [v, v, v]).collect(),
        png::ColorType::GrayscaleAlpha => src.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        png::ColorType::Indexed => {
            return Err(DataError::Decode { path: path.to_path_buf(), detail: "palette image was not expanded".into() });
        }
    };
    RgbImage::new(w, h, data)
}

/// Writes 8-bit RGB PNG.
pub fn write_png(path: &Path, img: &RgbImage) -> Result<()> {
    let file = File::create(path).map_err(|e| DataError::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let to_io = |e: png::EncodingError| match e {
        png::EncodingError::IoError(io) => DataError::io(path, io),
        other => DataError::Decode { path: path.to_path_buf(), detail: other.to_string() },
    };
    let mut writer = encoder.write_header().map_err(to_io)?;
    writer.write_image_data(&img.data).map_err(to_io)?;
    writer.finish().map_err(to_io)
}
