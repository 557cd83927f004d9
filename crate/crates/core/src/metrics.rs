//! Fusion-quality metrics (EN, SSIM, MI, Qabf, PSNR) and segmentation IoU.
//!
//! All fusion metrics work on BT.601 luminance. EN and MI use 256-bin histograms of the
//! 8-bit quantised luminance; SSIM and PSNR use the luminance on a `[0, 255]` scale.

use serde::{Deserialize, Serialize};

use crate::error::{param, Result};
use crate::image::{quantize, RgbImage, SegmentationMap};
use crate::losses::{sobel_components, Plane};

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub en: f64,
    pub ssim: f64,
    pub mi: f64,
    pub qabf: f64,
    pub psnr: f64,
}

impl MetricReport {
    pub fn mean(reports: &[MetricReport]) -> Option<MetricReport> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let sum = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Some(MetricReport {
            en: sum(|r| r.en),
            ssim: sum(|r| r.ssim),
            mi: sum(|r| r.mi),
            qabf: sum(|r| r.qabf),
            psnr: sum(|r| r.psnr),
        })
    }
}

fn gray8(img: &RgbImage) -> Vec<u8> {
    img.luma().into_iter().map(quantize).collect()
}

fn gray255(img: &RgbImage) -> Vec<f64> {
    img.luma().into_iter().map(|v| v as f64 * 255.0).collect()
}

fn entropy_of_counts(counts: impl Iterator<Item = u64>, total: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / total;
            -p * p.log2()
        })
        .sum()
}

fn entropy8(g: &[u8]) -> f64 {
    let mut hist = [0u64; 256];
    for &v in g {
        hist[v as usize] += 1;
    }
    entropy_of_counts(hist.into_iter(), g.len() as f64)
}

/// `MI(a, b) = H(a) + H(b) − H(a, b)` over 256-bin histograms.
fn mutual_information8(a: &[u8], b: &[u8]) -> f64 {
    let mut joint = vec![0u64; 256 * 256];
    for (&x, &y) in a.iter().zip(b) {
        joint[x as usize * 256 + y as usize] += 1;
    }
    let h_joint = entropy_of_counts(joint.into_iter(), a.len() as f64);
    (entropy8(a) + entropy8(b) - h_joint).max(0.0)
}

pub fn entropy(img: &RgbImage) -> f64 {
    entropy8(&gray8(img))
}

pub fn mutual_information(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    same_dims(a, b)?;
    Ok(mutual_information8(&gray8(a), &gray8(b)))
}

fn same_dims(a: &RgbImage, b: &RgbImage) -> Result<()> {
    if a.dims() != b.dims() {
        return param(format!("image dimensions differ: {:?} vs {:?}", a.dims(), b.dims()));
    }
    Ok(())
}

/// Normalised Gaussian window; 11 taps with σ = 1.5, shrunk to fit small images.
fn gaussian_window(h: usize, w: usize) -> Vec<f64> {
    let mut size = 11.min(h).min(w);
    if size % 2 == 0 {
        size -= 1;
    }
    let half = (size / 2) as f64;
    let g: Vec<f64> = (0..size).map(|i| (-((i as f64 - half).powi(2)) / (2.0 * 1.5 * 1.5)).exp()).collect();
    let total: f64 = g.iter().sum::<f64>().powi(2);
    let mut win = Vec::with_capacity(size * size);
    for a in &g {
        for b in &g {
            win.push(a * b / total);
        }
    }
    win
}

/// Mean SSIM over valid window positions of two `[0, 255]` planes.
fn ssim_planes(x: &[f64], y: &[f64], h: usize, w: usize) -> f64 {
    const C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
    const C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);
    let win = gaussian_window(h, w);
    let k = (win.len() as f64).sqrt() as usize;
    let (mut total, mut n) = (0.0, 0usize);
    for oy in 0..=h - k {
        for ox in 0..=w - k {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..k {
                for dx in 0..k {
                    let g = win[dy * k + dx];
                    let i = (oy + dy) * w + ox + dx;
                    mx += g * x[i];
                    my += g * y[i];
                    sxx += g * x[i] * x[i];
                    syy += g * y[i] * y[i];
                    sxy += g * x[i] * y[i];
                }
            }
            let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
            total += ((2.0 * mx * my + C1) * (2.0 * cxy + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2));
            n += 1;
        }
    }
    total / n as f64
}

pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    same_dims(a, b)?;
    let (h, w) = a.dims();
    Ok(ssim_planes(&gray255(a), &gray255(b), h, w))
}

/// Luminance PSNR on the `[0, 255]` scale, [`PSNR_CAP`] for identical images.
pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    same_dims(a, b)?;
    let (x, y) = (gray255(a), gray255(b));
    let mse = x.iter().zip(&y).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / x.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (255.0f64.powi(2) / mse).log10()).min(PSNR_CAP))
}

/// Edge-strength and orientation preservation constants.
const QG: (f64, f64, f64) = (0.9994, -15.0, 0.5);
const QA: (f64, f64, f64) = (0.9879, -22.0, 0.8);

fn sigmoid_q((gamma, kappa, sigma): (f64, f64, f64), v: f64) -> f64 {
    gamma / (1.0 + (kappa * (v - sigma)).exp())
}

/// Preservation of `source` edges in `fused`, per pixel, normalised so that perfect
/// agreement scores exactly 1.
fn edge_preservation(gs: &(Vec<f64>, Vec<f64>), gf: &(Vec<f64>, Vec<f64>)) -> Vec<f64> {
    let qg1 = sigmoid_q(QG, 1.0);
    let qa1 = sigmoid_q(QA, 1.0);
    gs.0.iter()
        .zip(&gs.1)
        .zip(gf.0.iter().zip(&gf.1))
        .map(|((&ms, &as_), (&mf, &af))| {
            let g = if ms == mf {
                1.0
            } else if ms > mf {
                mf / ms
            } else {
                ms / mf
            };
            let a = 1.0 - (as_ - af).abs() / std::f64::consts::FRAC_PI_2;
            (sigmoid_q(QG, g) / qg1) * (sigmoid_q(QA, a) / qa1)
        })
        .collect()
}

/// Sobel magnitude and orientation in `[−π/2, π/2]`.
fn magnitude_orientation(img: &RgbImage) -> Result<(Vec<f64>, Vec<f64>)> {
    let (h, w) = img.dims();
    let plane = Plane::new(h, w, gray255(img))?;
    let (gx, gy) = sobel_components(&plane)?;
    let mag = gx.data.iter().zip(&gy.data).map(|(x, y)| (x * x + y * y).sqrt()).collect();
    let ori = gx
        .data
        .iter()
        .zip(&gy.data)
        .map(|(&x, &y)| if x == 0.0 { if y == 0.0 { 0.0 } else { std::f64::consts::FRAC_PI_2 } } else { (y / x).atan() })
        .collect();
    Ok((mag, ori))
}

/// Gradient-based fusion quality over both sources, weighted by source edge strength.
/// Sources without any edges give 1 (nothing to lose).
pub fn qabf(fused: &RgbImage, a: &RgbImage, b: &RgbImage) -> Result<f64> {
    same_dims(fused, a)?;
    same_dims(fused, b)?;
    let gf = magnitude_orientation(fused)?;
    let ga = magnitude_orientation(a)?;
    let gb = magnitude_orientation(b)?;
    let qa = edge_preservation(&ga, &gf);
    let qb = edge_preservation(&gb, &gf);
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..qa.len() {
        num += qa[i] * ga.0[i] + qb[i] * gb.0[i];
        den += ga.0[i] + gb.0[i];
    }
    Ok(if den == 0.0 { 1.0 } else { (num / den).clamp(0.0, 1.0) })
}

/// EN of the fused image, MI summed over both sources, SSIM/PSNR averaged over both.
pub fn fusion_metrics(fused: &RgbImage, a: &RgbImage, b: &RgbImage) -> Result<MetricReport> {
    same_dims(fused, a)?;
    same_dims(fused, b)?;
    Ok(MetricReport {
        en: entropy(fused),
        ssim: 0.5 * (ssim(fused, a)? + ssim(fused, b)?),
        mi: mutual_information(fused, a)? + mutual_information(fused, b)?,
        qabf: qabf(fused, a, b)?,
        psnr: 0.5 * (psnr(fused, a)? + psnr(fused, b)?),
    })
}

/// Per-class IoU and their mean. Classes absent from both maps get `None` and are excluded.
pub fn miou(pred: &SegmentationMap, label: &SegmentationMap, n_class: usize) -> Result<(Vec<Option<f64>>, f64)> {
    let classes: Vec<u8> = (0..n_class).map(|c| c as u8).collect();
    miou_over(pred, label, n_class, &classes)
}

/// As [`miou`] with the mean restricted to `classes`.
pub fn miou_over(
    pred: &SegmentationMap,
    label: &SegmentationMap,
    n_class: usize,
    classes: &[u8],
) -> Result<(Vec<Option<f64>>, f64)> {
    let (inter, union) = confusion_counts(pred, label, n_class)?;
    let iou: Vec<Option<f64>> = (0..n_class).map(|c| (union[c] > 0).then(|| inter[c] as f64 / union[c] as f64)).collect();
    let chosen: Vec<f64> = classes.iter().filter_map(|&c| iou.get(c as usize).copied().flatten()).collect();
    let mean = if chosen.is_empty() { 0.0 } else { chosen.iter().sum::<f64>() / chosen.len() as f64 };
    Ok((iou, mean))
}

/// Per-class intersection and union pixel counts.
pub fn confusion_counts(pred: &SegmentationMap, label: &SegmentationMap, n_class: usize) -> Result<(Vec<u64>, Vec<u64>)> {
    if pred.dims() != label.dims() {
        return param(format!("segmentation maps differ in size: {:?} vs {:?}", pred.dims(), label.dims()));
    }
    pred.check_classes(n_class)?;
    label.check_classes(n_class)?;
    let mut inter = vec![0u64; n_class];
    let mut union = vec![0u64; n_class];
    for (&p, &l) in pred.labels().iter().zip(label.labels()) {
        if p == l {
            inter[p as usize] += 1;
            union[p as usize] += 1;
        } else {
            union[p as usize] += 1;
            union[l as usize] += 1;
        }
    }
    Ok((inter, union))
}

/// Dataset-level mIoU from counts accumulated over several maps.
pub fn pooled_miou(maps: &[(SegmentationMap, SegmentationMap)], n_class: usize, classes: &[u8]) -> Result<f64> {
    let mut inter = vec![0u64; n_class];
    let mut union = vec![0u64; n_class];
    for (pred, label) in maps {
        let (i, u) = confusion_counts(pred, label, n_class)?;
        for c in 0..n_class {
            inter[c] += i[c];
            union[c] += u[c];
        }
    }
    let ious: Vec<f64> = classes
        .iter()
        .map(|&c| c as usize)
        .filter(|&c| c < n_class && union[c] > 0)
        .map(|c| inter[c] as f64 / union[c] as f64)
        .collect();
    Ok(if ious.is_empty() { 0.0 } else { ious.iter().sum::<f64>() / ious.len() as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise_image(seed: u64, h: usize, w: usize) -> RgbImage {
        use rand::Rng;
        let mut rng = crate::nn::seeded_rng(seed);
        RgbImage::new(h, w, (0..3 * h * w).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn constant_image_has_zero_entropy() {
        assert_eq!(entropy(&RgbImage::filled(8, 8, [0.3; 3]).unwrap()), 0.0);
    }

    #[test]
    fn identity_scores() {
        let x = noise_image(1, 16, 16);
        let r = fusion_metrics(&x, &x, &x).unwrap();
        assert!((r.ssim - 1.0).abs() < 1e-12);
        assert!((r.qabf - 1.0).abs() < 1e-12);
        assert_eq!(r.psnr, PSNR_CAP);
        assert!((mutual_information(&x, &x).unwrap() - entropy(&x)).abs() < 1e-12);
    }

    #[test]
    fn symmetric_in_sources() {
        let (f, a, b) = (noise_image(1, 12, 12), noise_image(2, 12, 12), noise_image(3, 12, 12));
        let r1 = fusion_metrics(&f, &a, &b).unwrap();
        let r2 = fusion_metrics(&f, &b, &a).unwrap();
        for (x, y) in [(r1.en, r2.en), (r1.ssim, r2.ssim), (r1.mi, r2.mi), (r1.psnr, r2.psnr), (r1.qabf, r2.qabf)] {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn report_ranges() {
        let (f, a, b) = (noise_image(4, 12, 12), noise_image(5, 12, 12), noise_image(6, 12, 12));
        let r = fusion_metrics(&f, &a, &b).unwrap();
        assert!(r.en >= 0.0 && r.mi >= 0.0 && r.psnr >= 0.0);
        assert!((-1.0..=1.0).contains(&r.ssim) && (0.0..=1.0).contains(&r.qabf));
    }

    #[test]
    fn iou_examples() {
        let a = SegmentationMap::new(2, 2, vec![0, 1, 1, 2]).unwrap();
        let (per, m) = miou(&a, &a, 4).unwrap();
        assert_eq!(m, 1.0);
        assert_eq!(per[3], None);
        let zeros = SegmentationMap::filled(2, 2, 0).unwrap();
        let ones = SegmentationMap::filled(2, 2, 1).unwrap();
        let (per, m) = miou(&zeros, &ones, 2).unwrap();
        assert_eq!(per, vec![Some(0.0), Some(0.0)]);
        assert_eq!(m, 0.0);
        assert!(miou(&a, &a, 2).is_err());
    }

    #[test]
    fn dimension_mismatch() {
        let a = noise_image(1, 8, 8);
        let b = noise_image(1, 8, 9);
        assert!(fusion_metrics(&a, &a, &b).is_err());
    }
}
