//! Visual regularisation of the fused image: contrast, texture and colour terms, plus the
//! BT.601 full-range colour conversion they are defined in.
//!
//! Tensor versions work on `(B, 3, H, W)` batches of any float dtype and keep the autodiff
//! graph; the plain versions are for inspection and tests.

use candle_core::Tensor;

use crate::error::{param, Result};
use crate::image::RgbImage;
use crate::nn::scalar;

/// Forward BT.601 full-range matrix (rows: Y, Cb, Cr) applied to `[R, G, B]`; chroma is
/// offset by 0.5.
pub const BT601_FORWARD: [[f64; 3]; 3] = [
    [0.299, 0.587, 0.114],
    [-0.168_736, -0.331_264, 0.5],
    [0.5, -0.418_688, -0.081_312],
];

/// Luminance plus offset-binary chrominance, all in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct YcbcrImage {
    pub height: usize,
    pub width: usize,
    pub y: Vec<f64>,
    pub cb: Vec<f64>,
    pub cr: Vec<f64>,
}

pub fn rgb_to_ycbcr(image: &RgbImage) -> YcbcrImage {
    let m = BT601_FORWARD;
    let n = image.height() * image.width();
    let (mut y, mut cb, mut cr) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for i in 0..n {
        let rgb = [image.plane(0)[i] as f64, image.plane(1)[i] as f64, image.plane(2)[i] as f64];
        let dot = |row: [f64; 3]| row[0] * rgb[0] + row[1] * rgb[1] + row[2] * rgb[2];
        y.push(dot(m[0]).clamp(0.0, 1.0));
        cb.push((dot(m[1]) + 0.5).clamp(0.0, 1.0));
        cr.push((dot(m[2]) + 0.5).clamp(0.0, 1.0));
    }
    YcbcrImage { height: image.height(), width: image.width(), y, cb, cr }
}

pub fn ycbcr_to_rgb(img: &YcbcrImage) -> Result<RgbImage> {
    let n = img.height * img.width;
    let mut data = vec![0f32; 3 * n];
    for i in 0..n {
        let (y, cb, cr) = (img.y[i], img.cb[i] - 0.5, img.cr[i] - 0.5);
        data[i] = (y + 1.402 * cr) as f32;
        data[n + i] = (y - 0.344_136 * cb - 0.714_136 * cr) as f32;
        data[2 * n + i] = (y + 1.772 * cb) as f32;
    }
    RgbImage::from_clamped(img.height, img.width, data)
}

/// `(Y, CbCr)` planes of a `(B, 3, H, W)` tensor: `(B, 1, H, W)` and `(B, 2, H, W)`.
pub fn ycbcr_tensor(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let (_, c, _, _) = x.dims4()?;
    if c != 3 {
        return param(format!("colour conversion needs 3 channels, got {c}"));
    }
    let ch = |i| x.narrow(1, i, 1);
    let (r, g, b) = (ch(0)?, ch(1)?, ch(2)?);
    let row = |k: [f64; 3], offset: f64| -> Result<Tensor> {
        Ok((((&r * k[0])? + (&g * k[1])?)? + (&b * k[2])?)?.affine(1.0, offset)?)
    };
    let m = BT601_FORWARD;
    let y = row(m[0], 0.0)?;
    let cbcr = Tensor::cat(&[row(m[1], 0.5)?, row(m[2], 0.5)?], 1)?;
    Ok((y, cbcr))
}

/// A single 2-D plane of reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return param("plane buffer does not match its dimensions");
        }
        Ok(Self { height, width, data })
    }

    fn at_clamped(&self, y: isize, x: isize) -> f64 {
        let y = y.clamp(0, self.height as isize - 1) as usize;
        let x = x.clamp(0, self.width as isize - 1) as usize;
        self.data[y * self.width + x]
    }
}

/// Correlation kernels.
const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// Sobel responses `(gx, gy)` with replicate padding.
pub fn sobel_components(plane: &Plane) -> Result<(Plane, Plane)> {
    if plane.height < 3 || plane.width < 3 {
        return param(format!("sobel needs at least 3x3, got {}x{}", plane.height, plane.width));
    }
    let (h, w) = (plane.height, plane.width);
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            // Differences first, so equal neighbours cancel exactly.
            let at = |dy: isize, dx: isize| plane.at_clamped(y as isize + dy, x as isize + dx);
            let (mut sx, mut sy) = (0.0, 0.0);
            for (k, weight) in [(-1isize, 1.0), (0, 2.0), (1, 1.0)] {
                sx += weight * (at(k, 1) - at(k, -1));
                sy += weight * (at(1, k) - at(-1, k));
            }
            gx[y * w + x] = sx;
            gy[y * w + x] = sy;
        }
    }
    Ok((Plane::new(h, w, gx)?, Plane::new(h, w, gy)?))
}

/// Sobel gradient magnitude `√(gx² + gy²)`, same dimensions as the input.
pub fn sobel_grad(plane: &Plane) -> Result<Plane> {
    let (gx, gy) = sobel_components(plane)?;
    let data = gx.data.iter().zip(&gy.data).map(|(a, b)| (a * a + b * b).sqrt()).collect();
    Plane::new(plane.height, plane.width, data)
}

/// Smoothing inside the square root so the magnitude is differentiable at zero gradient.
/// The offset is subtracted again, so flat regions still map to exactly 0.
const SOBEL_EPS: f64 = 1e-6;

/// Differentiable Sobel magnitude of a `(B, 1, H, W)` tensor.
pub fn sobel_magnitude(y: &Tensor) -> Result<Tensor> {
    let (_, c, h, w) = y.dims4()?;
    if c != 1 || h < 3 || w < 3 {
        return param(format!("sobel needs a single plane of at least 3x3, got {:?}", y.dims()));
    }
    let k: Vec<f64> = SOBEL_X.iter().chain(SOBEL_Y.iter()).flatten().copied().collect();
    let kernel = Tensor::from_vec(k, (2, 1, 3, 3), y.device())?.to_dtype(y.dtype())?;
    let padded = y.pad_with_same(2, 1, 1)?.pad_with_same(3, 1, 1)?;
    let g = padded.conv2d(&kernel, 0, 1, 1, 1)?;
    let mag = (g.sqr()?.sum_keepdim(1)? + SOBEL_EPS * SOBEL_EPS)?.sqrt()?;
    Ok((mag - SOBEL_EPS)?)
}

/// The three visual terms and their sum, as scalar tensors.
#[derive(Debug, Clone)]
pub struct VisualLosses {
    pub contrast: Tensor,
    pub texture: Tensor,
    pub color: Tensor,
    pub total: Tensor,
}

impl VisualLosses {
    pub fn values(&self) -> Result<VisualLossValues> {
        Ok(VisualLossValues {
            contrast: scalar(&self.contrast)?,
            texture: scalar(&self.texture)?,
            color: scalar(&self.color)?,
            total: scalar(&self.total)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct VisualLossValues {
    pub contrast: f64,
    pub texture: f64,
    pub color: f64,
    pub total: f64,
}

/// Mean absolute deviations of the fused image from the element-wise luminance maximum,
/// the element-wise gradient-magnitude maximum, and the restoration stream's chroma.
pub fn visual_losses_tensor(fused: &Tensor, dec_psi: &Tensor, dec_phi: &Tensor) -> Result<VisualLosses> {
    if fused.dims() != dec_psi.dims() || fused.dims() != dec_phi.dims() {
        return param(format!(
            "visual loss inputs differ: {:?}, {:?}, {:?}",
            fused.dims(),
            dec_psi.dims(),
            dec_phi.dims()
        ));
    }
    let (y_f, c_f) = ycbcr_tensor(fused)?;
    let (y_a, c_a) = ycbcr_tensor(dec_psi)?;
    let (y_b, _) = ycbcr_tensor(dec_phi)?;
    let contrast = (y_f.clone() - y_a.maximum(&y_b)?)?.abs()?.mean_all()?;
    let g_target = sobel_magnitude(&y_a)?.maximum(&sobel_magnitude(&y_b)?)?;
    let texture = (sobel_magnitude(&y_f)? - g_target)?.abs()?.mean_all()?;
    let color = (c_f - c_a)?.abs()?.mean_all()?;
    let total = ((&contrast + &texture)? + &color)?;
    Ok(VisualLosses { contrast, texture, color, total })
}

pub fn visual_losses(mag: &RgbImage, dec_psi: &RgbImage, dec_phi: &RgbImage) -> Result<VisualLossValues> {
    if mag.dims() != dec_psi.dims() || mag.dims() != dec_phi.dims() {
        return param("visual loss inputs must share dimensions");
    }
    let dev = candle_core::Device::Cpu;
    let t = |img: &RgbImage| -> Result<Tensor> { Ok(img.to_tensor(&dev)?.to_dtype(candle_core::DType::F64)?) };
    visual_losses_tensor(&t(mag)?, &t(dec_psi)?, &t(dec_phi)?)?.values()
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn neutral_and_black() {
        let gray = RgbImage::filled(2, 2, [0.4, 0.4, 0.4]).unwrap();
        let c = rgb_to_ycbcr(&gray);
        assert!(c.y.iter().all(|v| (v - 0.4).abs() < 1e-7));
        assert!(c.cb.iter().chain(&c.cr).all(|v| (v - 0.5).abs() < 1e-7));
        let black = rgb_to_ycbcr(&RgbImage::filled(1, 1, [0.0; 3]).unwrap());
        assert_eq!(black.y[0], 0.0);
    }

    #[test]
    fn primaries_match_published_coefficients() {
        // Oracle: Y = Kr R + Kg G + Kb B, Cb = (B − Y) / (2 (1 − Kb)) + ½, Cr = (R − Y) / (2 (1 − Kr)) + ½
        let (kr, kb) = (0.299, 0.114);
        let kg = 1.0 - kr - kb;
        for rgb in [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]] {
            let img = RgbImage::filled(1, 1, [rgb[0] as f32, rgb[1] as f32, rgb[2] as f32]).unwrap();
            let c = rgb_to_ycbcr(&img);
            let y = kr * rgb[0] + kg * rgb[1] + kb * rgb[2];
            let cb = (rgb[2] - y) / (2.0 * (1.0 - kb)) + 0.5;
            let cr = (rgb[0] - y) / (2.0 * (1.0 - kr)) + 0.5;
            assert!((c.y[0] - y).abs() < 1e-6);
            assert!((c.cb[0] - cb).abs() < 1e-6, "cb {} vs {cb}", c.cb[0]);
            assert!((c.cr[0] - cr).abs() < 1e-6, "cr {} vs {cr}", c.cr[0]);
        }
    }

    #[test]
    fn colour_round_trip() {
        let data: Vec<f32> = (0..3 * 16).map(|i| ((i * 53) % 97) as f32 / 96.0).collect();
        let img = RgbImage::new(4, 4, data).unwrap();
        let back = ycbcr_to_rgb(&rgb_to_ycbcr(&img)).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn sobel_on_step_edge() {
        // 5x5, columns 0-1 dark, 2-4 bright. With replicate padding the x-response per
        // column is 4 (p[x+1] − p[x−1]): [0, 4, 4, 0, 0]; y-response is zero.
        let data: Vec<f64> = (0..25).map(|i| if i % 5 >= 2 { 1.0 } else { 0.0 }).collect();
        let g = sobel_grad(&Plane::new(5, 5, data).unwrap()).unwrap();
        for row in g.data.chunks(5) {
            assert_eq!(row, &[0.0, 4.0, 4.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn sobel_constant_and_small() {
        let g = sobel_grad(&Plane::new(4, 6, vec![0.3; 24]).unwrap()).unwrap();
        assert_eq!((g.height, g.width), (4, 6));
        assert!(g.data.iter().all(|v| *v == 0.0));
        assert!(sobel_grad(&Plane::new(2, 5, vec![0.0; 10]).unwrap()).is_err());
        let t = Tensor::full(0.3f64, (1, 1, 4, 6), &Device::Cpu).unwrap();
        let m = sobel_magnitude(&t).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(m.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn tensor_sobel_matches_plain() {
        let data: Vec<f64> = (0..42).map(|i| ((i * 31) % 17) as f64 / 17.0).collect();
        let plain = sobel_grad(&Plane::new(6, 7, data.clone()).unwrap()).unwrap();
        let t = Tensor::from_vec(data, (1, 1, 6, 7), &Device::Cpu).unwrap();
        let m = sobel_magnitude(&t).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (a, b) in plain.data.iter().zip(m) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    fn img(seed: u32) -> RgbImage {
        let data: Vec<f32> = (0..3 * 36).map(|i| (((i as u32 + 7) * (seed * 13 + 5)) % 101) as f32 / 100.0).collect();
        RgbImage::new(6, 6, data).unwrap()
    }

    #[test]
    fn zero_at_target() {
        let a = img(1);
        let l = visual_losses(&a, &a, &a).unwrap();
        assert_eq!((l.contrast, l.texture, l.color), (0.0, 0.0, 0.0));
    }

    #[test]
    fn single_pixel_perturbation_shifts_contrast_by_delta_over_area() {
        // Gray images: luma equals the channel value, so raising one pixel's RGB by δ
        // raises its luma by δ.
        let base = RgbImage::filled(4, 4, [0.5; 3]).unwrap();
        let dark = RgbImage::filled(4, 4, [0.2; 3]).unwrap();
        let l0 = visual_losses(&base, &base, &dark).unwrap();
        let mut bumped = base.clone();
        let delta = 0.125f32;
        for c in 0..3 {
            bumped.set(c, 1, 2, 0.5 + delta);
        }
        let l1 = visual_losses(&bumped, &base, &dark).unwrap();
        assert!((l1.contrast - l0.contrast - delta as f64 / 16.0).abs() < 1e-7);
    }

    #[test]
    fn swap_symmetry_and_colour_asymmetry() {
        let (f, a, b) = (img(1), img(2), img(3));
        let l_ab = visual_losses(&f, &a, &b).unwrap();
        let l_ba = visual_losses(&f, &b, &a).unwrap();
        assert!((l_ab.contrast - l_ba.contrast).abs() < 1e-12);
        assert!((l_ab.texture - l_ba.texture).abs() < 1e-12);
        assert!((l_ab.color - l_ba.color).abs() > 1e-3);
    }

    #[test]
    fn dimension_mismatch() {
        let a = RgbImage::filled(4, 4, [0.5; 3]).unwrap();
        let b = RgbImage::filled(4, 5, [0.5; 3]).unwrap();
        assert!(visual_losses(&a, &a, &b).is_err());
        let t = Tensor::zeros((1, 3, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let u = Tensor::zeros((1, 3, 4, 5), DType::F64, &Device::Cpu).unwrap();
        assert!(visual_losses_tensor(&t, &t, &u).is_err());
    }
}
