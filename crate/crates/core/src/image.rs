//! Plain-memory images and their PNG codecs.
//!
//! Pixel data lives in planar (channel-major) `f32` buffers in `[0, 1]`. Conversion to
//! `(1, C, H, W)` tensors happens at the network boundary only.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{param, Error, Result};

/// Three-plane colour image, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    /// Planar layout: all R, then all G, then all B.
    data: Vec<f32>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return param("image dimensions must be positive");
        }
        if data.len() != 3 * height * width {
            return param(format!(
                "rgb buffer holds {} values, expected {}",
                data.len(),
                3 * height * width
            ));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return param("rgb values must be finite and in [0, 1]");
        }
        Ok(Self { height, width, data })
    }

    /// Builds an image from arbitrary values, clamping into `[0, 1]` (NaN maps to 0).
    pub fn from_clamped(height: usize, width: usize, mut data: Vec<f32>) -> Result<Self> {
        for v in data.iter_mut() {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::new(height, width, data)
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self> {
        let n = height * width;
        let mut data = Vec::with_capacity(3 * n);
        for c in rgb {
            data.extend(std::iter::repeat(c).take(n));
        }
        Self::new(height, width, data)
    }

    /// Replicates a single plane into all three channels.
    pub fn from_gray(gray: &GrayImage) -> Self {
        let mut data = Vec::with_capacity(3 * gray.data.len());
        for _ in 0..3 {
            data.extend_from_slice(&gray.data);
        }
        Self { height: gray.height, width: gray.width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v.clamp(0.0, 1.0);
    }

    /// Applies `f` to every value and clamps the result back into `[0, 1]`.
    pub fn map(&self, mut f: impl FnMut(f32) -> f32) -> Self {
        let data = self
            .data
            .iter()
            .map(|&v| {
                let o = f(v);
                if o.is_nan() {
                    0.0
                } else {
                    o.clamp(0.0, 1.0)
                }
            })
            .collect();
        Self { height: self.height, width: self.width, data }
    }

    /// Mirror image about the vertical axis.
    pub fn flip_horizontal(&self) -> Self {
        let (h, w) = (self.height, self.width);
        let mut data = self.data.clone();
        for row in data.chunks_mut(w).take(3 * h) {
            row.reverse();
        }
        Self { height: h, width: w, data }
    }

    /// BT.601 luma plane.
    pub fn luma(&self) -> Vec<f32> {
        let (r, g, b) = (self.plane(0), self.plane(1), self.plane(2));
        r.iter()
            .zip(g)
            .zip(b)
            .map(|((r, g), b)| 0.299 * r + 0.587 * g + 0.114 * b)
            .collect()
    }

    pub fn mean(&self) -> f32 {
        self.data.iter().sum::<f32>() / self.data.len() as f32
    }

    /// `(1, 3, H, W)` f32 tensor.
    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, (1, 3, self.height, self.width), device)?)
    }

    /// Stacks equally sized images into a `(B, 3, H, W)` tensor.
    pub fn batch_to_tensor(images: &[&RgbImage], device: &Device) -> Result<Tensor> {
        let Some(first) = images.first() else {
            return param("cannot batch zero images");
        };
        let dims = first.dims();
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for img in images {
            if img.dims() != dims {
                return param("batched images must share dimensions");
            }
            data.extend_from_slice(&img.data);
        }
        Ok(Tensor::from_vec(data, (images.len(), 3, dims.0, dims.1), device)?)
    }

    /// Reads one image out of a `(B, 3, H, W)` tensor, clamping into `[0, 1]`.
    pub fn from_tensor(t: &Tensor, index: usize) -> Result<Self> {
        let (_, c, h, w) = t.dims4()?;
        if c != 3 {
            return param(format!("expected 3 channels, got {c}"));
        }
        let data = t.get(index)?.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Self::from_clamped(h, w, data)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0f32; 3 * h * w];
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[(c * h + y as usize) * w + x as usize] = px[c] as f32 / 255.0;
            }
        }
        Self::new(h, w, data)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (h, w) = self.dims();
        let mut buf = image::RgbImage::new(w as u32, h as u32);
        for (x, y, px) in buf.enumerate_pixels_mut() {
            for c in 0..3 {
                px[c] = quantize(self.get(c, y as usize, x as usize));
            }
        }
        buf.save(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }
}

/// Single-plane image in `[0, 1]` (infrared intensity).
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return param("gray image buffer does not match its dimensions");
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return param("gray values must be finite and in [0, 1]");
        }
        Ok(Self { height, width, data })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
            .to_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        Self::new(h, w, data)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let raw: Vec<u8> = self.data.iter().map(|&v| quantize(v)).collect();
        let buf = image::GrayImage::from_raw(self.width as u32, self.height as u32, raw)
            .ok_or_else(|| Error::Image("gray buffer size mismatch".into()))?;
        buf.save(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }
}

/// Per-pixel class indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationMap {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

/// Colours used when writing label PNGs; indices beyond the table reuse the last entry.
const LABEL_PALETTE: [[u8; 3]; 9] = [
    [0, 0, 0],
    [220, 20, 60],
    [0, 0, 142],
    [128, 64, 128],
    [250, 170, 30],
    [107, 142, 35],
    [70, 130, 180],
    [190, 153, 153],
    [255, 255, 255],
];

impl SegmentationMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || labels.len() != height * width {
            return param("label buffer does not match its dimensions");
        }
        Ok(Self { height, width, labels })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Result<Self> {
        Self::new(height, width, vec![class; height * width])
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn max_class(&self) -> u8 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    pub fn check_classes(&self, n_class: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l as usize >= n_class) {
            Some(bad) => param(format!("label index {bad} outside [0, {n_class})")),
            None => Ok(()),
        }
    }

    /// Nearest-neighbour downsample by an integer factor (picks the top-left pixel of each cell).
    pub fn downsample_nearest(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return param(format!(
                "label map {}x{} not divisible by {factor}",
                self.height, self.width
            ));
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let labels = (0..h)
            .flat_map(|y| (0..w).map(move |x| (y, x)))
            .map(|(y, x)| self.get(y * factor, x * factor))
            .collect();
        Self::new(h, w, labels)
    }

    /// `(1, H, W)` u32 tensor of class indices.
    pub fn to_index_tensor(&self, device: &Device) -> Result<Tensor> {
        let idx: Vec<u32> = self.labels.iter().map(|&l| l as u32).collect();
        Ok(Tensor::from_vec(idx, (1, self.height, self.width), device)?)
    }

    /// Writes a single-channel palette PNG whose pixel values are the class indices.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let file = BufWriter::new(File::create(path)?);
        let mut enc = png::Encoder::new(file, self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Indexed);
        enc.set_depth(png::BitDepth::Eight);
        let max = self.max_class() as usize;
        let palette: Vec<u8> = (0..=max.max(LABEL_PALETTE.len() - 1))
            .flat_map(|i| LABEL_PALETTE[i.min(LABEL_PALETTE.len() - 1)])
            .collect();
        enc.set_palette(palette);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        writer
            .write_image_data(&self.labels)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        Ok(())
    }

    /// Reads an indexed or 8-bit grayscale PNG; the raw sample values are the class indices.
    pub fn load_png(path: &Path) -> Result<Self> {
        let codec = |e: png::DecodingError| Error::Image(format!("{}: {e}", path.display()));
        let decoder = png::Decoder::new(File::open(path)?);
        let mut reader = decoder.read_info().map_err(codec)?;
        let mut buf = vec![0u8; reader.output_buffer_size()];
        let info = reader.next_frame(&mut buf).map_err(codec)?;
        if info.bit_depth != png::BitDepth::Eight
            || !matches!(info.color_type, png::ColorType::Indexed | png::ColorType::Grayscale)
        {
            return Err(Error::Image(format!(
                "{}: label maps must be 8-bit indexed or grayscale",
                path.display()
            )));
        }
        buf.truncate(info.buffer_size());
        Self::new(info.height as usize, info.width as usize, buf)
    }
}

pub(crate) fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
