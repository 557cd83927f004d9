//! A fixed-protocol pixel classifier used to compare how much semantic content different
//! image sources carry.
//!
//! Each pixel is described by the RGB values of its 3×3 neighbourhood (replicate padding).
//! Softmax regression on standardised features is fitted full-batch from a zero
//! initialisation, so the result is a deterministic function of the training images.

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use candle_nn::ops::log_softmax;

use crate::error::{param, Result};
use crate::image::{RgbImage, SegmentationMap};
use crate::nn::scalar;
use crate::optim::adam;

const FEATURES: usize = 27;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub iterations: usize,
    pub lr: f64,
    pub l2: f64,
    /// Weight each class by its inverse frequency so rare classes matter as much as common ones.
    pub balanced: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { iterations: 600, lr: 0.1, l2: 1e-4, balanced: true }
    }
}

fn patch_features(img: &RgbImage) -> Vec<f32> {
    let (h, w) = img.dims();
    let mut out = Vec::with_capacity(h * w * FEATURES);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                        let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                        out.push(img.get(c, yy, xx));
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct PixelProbe {
    mean: Tensor,
    std: Tensor,
    weight: Tensor,
    bias: Tensor,
    n_class: usize,
}

fn stack(images: &[&RgbImage]) -> Result<(Tensor, Vec<(usize, usize)>)> {
    let mut feats = Vec::new();
    let mut dims = Vec::with_capacity(images.len());
    for img in images {
        feats.extend(patch_features(img));
        dims.push(img.dims());
    }
    let n = feats.len() / FEATURES;
    Ok((Tensor::from_vec(feats, (n, FEATURES), &Device::Cpu)?, dims))
}

impl PixelProbe {
    pub fn fit(images: &[&RgbImage], labels: &[&SegmentationMap], n_class: usize, cfg: &ProbeConfig) -> Result<Self> {
        if images.is_empty() || images.len() != labels.len() {
            return param("probe needs one label map per training image");
        }
        for (img, lab) in images.iter().zip(labels) {
            if img.dims() != lab.dims() {
                return param("probe image and label sizes differ");
            }
            lab.check_classes(n_class)?;
        }
        let (x, _) = stack(images)?;
        let mean = x.mean_keepdim(0)?;
        let std = (x.broadcast_sub(&mean)?.sqr()?.mean_keepdim(0)? + 1e-6)?.sqrt()?;
        let xs = x.broadcast_sub(&mean)?.broadcast_div(&std)?;
        let n = xs.dims()[0];
        let idx: Vec<u8> = labels.iter().flat_map(|l| l.labels().iter().copied()).collect();
        let mut counts = vec![0usize; n_class];
        for &c in &idx {
            counts[c as usize] += 1;
        }
        let class_w: Vec<f32> = counts
            .iter()
            .map(|&c| if cfg.balanced && c > 0 { n as f32 / (n_class * c) as f32 } else { 1.0 })
            .collect();
        let pixel_w: Vec<f32> = idx.iter().map(|&c| class_w[c as usize]).collect();
        let pixel_w = Tensor::from_vec(pixel_w, (n, 1), &Device::Cpu)?;
        let norm = scalar(&pixel_w.sum_all()?)?;
        let target = Tensor::from_vec(idx.iter().map(|&c| c as u32).collect::<Vec<_>>(), (n, 1), &Device::Cpu)?;

        let weight = Var::zeros((FEATURES, n_class), DType::F32, &Device::Cpu)?;
        let bias = Var::zeros(n_class, DType::F32, &Device::Cpu)?;
        let mut opt = adam(vec![weight.clone(), bias.clone()], cfg.lr)?;
        for _ in 0..cfg.iterations {
            let logits = xs.matmul(weight.as_tensor())?.broadcast_add(bias.as_tensor())?;
            let picked = log_softmax(&logits, 1)?.gather(&target, 1)?;
            let nll = (picked.mul(&pixel_w)?.sum_all()?.neg()? / norm)?;
            let loss = (nll + (weight.as_tensor().sqr()?.sum_all()? * cfg.l2)?)?;
            candle_nn::Optimizer::backward_step(&mut opt, &loss)?;
        }
        Ok(Self { mean, std, weight: weight.as_tensor().detach(), bias: bias.as_tensor().detach(), n_class })
    }

    pub fn predict(&self, img: &RgbImage) -> Result<SegmentationMap> {
        let (x, _) = stack(&[img])?;
        let xs = x.broadcast_sub(&self.mean)?.broadcast_div(&self.std)?;
        let logits = xs.matmul(&self.weight)?.broadcast_add(&self.bias)?;
        let idx: Vec<u8> = logits.argmax(1)?.to_vec1::<u32>()?.into_iter().map(|c| c as u8).collect();
        let (h, w) = img.dims();
        SegmentationMap::new(h, w, idx)
    }

    pub fn n_class(&self) -> usize {
        self.n_class
    }
}
