//! Segmentation head threaded through the fusion loop, the radiation mask it induces and
//! the cross-entropy that trains it.

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::Conv2d;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{param, Result};
use crate::image::SegmentationMap;
use crate::latent::LatentGrid;
use crate::nn::{seeded_rng, silu, ParamBuilder, ParamStore};

pub const SEGHEAD_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegHeadDescriptor {
    pub n_class: usize,
    /// Channel count of each fusion-network tap, in order.
    pub tap_channels: Vec<usize>,
    pub hidden: usize,
    /// Image-to-latent resolution ratio; taps are upsampled by this factor.
    pub factor: usize,
    pub schema_version: u32,
}

impl SegHeadDescriptor {
    pub fn new(n_class: usize, tap_channels: Vec<usize>, factor: usize) -> Self {
        Self { n_class, tap_channels, hidden: 32, factor, schema_version: SEGHEAD_SCHEMA }
    }
}

/// Per-run segmentation logits `(B, N_class, H, W)` carried across timesteps.
#[derive(Debug, Clone)]
pub struct SegState(Tensor);

impl SegState {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.rank() != 4 {
            return param(format!("segmentation state must be rank 4, got {:?}", t.dims()));
        }
        Ok(Self(t))
    }

    /// Standard-normal initial state.
    pub fn standard_normal<R: Rng>(rng: &mut R, batch: usize, n_class: usize, h: usize, w: usize) -> Result<Self> {
        Self::new(LatentGrid::standard_normal(rng, (batch, n_class, h, w), DType::F32, &Device::Cpu)?.into_tensor())
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.0.dims4().expect("rank checked at construction")
    }

    pub fn detach(&self) -> Self {
        Self(self.0.detach())
    }

    /// Per-pixel argmax over the class axis, one map per batch element.
    pub fn argmax(&self) -> Result<Vec<SegmentationMap>> {
        let (b, _, h, w) = self.dims();
        let idx = self.0.argmax(1)?.to_dtype(DType::U32)?;
        (0..b)
            .map(|i| {
                let v: Vec<u8> = idx.get(i)?.flatten_all()?.to_vec1::<u32>()?.into_iter().map(|c| c as u8).collect();
                SegmentationMap::new(h, w, v)
            })
            .collect()
    }
}

/// Shallow convolutional head over `[z_s, upsampled taps]`.
#[derive(Debug, Clone)]
pub struct SegHead {
    desc: SegHeadDescriptor,
    params: ParamStore,
    conv1: Conv2d,
    conv2: Conv2d,
}

impl SegHead {
    pub fn new(desc: SegHeadDescriptor, seed: u64) -> Result<Self> {
        if desc.n_class < 2 || desc.n_class > u8::MAX as usize {
            return param(format!("segmentation head needs 2..=255 classes, got {}", desc.n_class));
        }
        if desc.factor == 0 || desc.tap_channels.is_empty() {
            return param("segmentation head needs a positive factor and at least one tap");
        }
        let mut params = ParamStore::new();
        let mut rng = seeded_rng(seed);
        let mut pb = ParamBuilder::new(&mut params, &mut rng);
        let c_in = desc.n_class + desc.tap_channels.iter().sum::<usize>();
        let conv1 = pb.pp("conv1").conv2d(c_in, desc.hidden, 3, 1)?;
        let conv2 = pb.pp("conv2").conv2d(desc.hidden, desc.n_class, 3, 1)?;
        Ok(Self { desc, params, conv1, conv2 })
    }

    pub fn descriptor(&self) -> &SegHeadDescriptor {
        &self.desc
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Next logits from the current state and the taps of the same fusion-network pass.
    /// The current state is read through a softmax over classes.
    pub fn forward(&self, z_s: &SegState, taps: &[Tensor]) -> Result<SegState> {
        let (b, k, h, w) = z_s.dims();
        if k != self.desc.n_class {
            return param(format!("segmentation state has {k} classes, head expects {}", self.desc.n_class));
        }
        if taps.len() != self.desc.tap_channels.len() {
            return param(format!("{} taps supplied, head expects {}", taps.len(), self.desc.tap_channels.len()));
        }
        let f = self.desc.factor;
        // The previous logits enter as probabilities so the recurrence stays bounded.
        let mut parts = vec![candle_nn::ops::softmax(&z_s.tensor().to_dtype(DType::F32)?, 1)?];
        for (tap, &c) in taps.iter().zip(&self.desc.tap_channels) {
            let (tb, tc, th, tw) = tap.dims4()?;
            if (tb, tc, th * f, tw * f) != (b, c, h, w) {
                return param(format!("tap {:?} does not align with state {:?}", tap.dims(), z_s.dims()));
            }
            parts.push(tap.to_dtype(DType::F32)?.upsample_nearest2d(h, w)?);
        }
        let x = Tensor::cat(&parts, 1)?;
        let out = self.conv2.forward(&silu(&self.conv1.forward(&x)?)?)?;
        SegState::new(out)
    }
}

/// One head step: next state and its argmax map(s).
pub fn seg_step(z_s: &SegState, taps: &[Tensor], head: &SegHead) -> Result<(SegState, Vec<SegmentationMap>)> {
    let next = head.forward(z_s, taps)?;
    let gamma = next.argmax()?;
    Ok((next, gamma))
}

/// Binary map marking pixels whose class is in the thermal set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RadiationMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl RadiationMask {
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn fraction(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Nearest-neighbour downsample (top-left pixel of each cell).
    pub fn downsample_nearest(&self, factor: usize) -> Result<Self> {
        let as_map = SegmentationMap::new(self.height, self.width, self.data.clone())?;
        let small = as_map.downsample_nearest(factor)?;
        let (height, width) = small.dims();
        Ok(Self { height, width, data: small.labels().to_vec() })
    }

    /// `(1, 1, H, W)` u8 tensor.
    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.data.clone(), (1, 1, self.height, self.width), device)?)
    }
}

pub fn radiation_mask(gamma: &SegmentationMap, thermal_classes: &[u8]) -> RadiationMask {
    if thermal_classes.is_empty() {
        log::warn!("empty thermal class set; the radiation mask is all zero");
    }
    let (height, width) = gamma.dims();
    let data = gamma.labels().iter().map(|l| thermal_classes.contains(l) as u8).collect();
    RadiationMask { height, width, data }
}

/// Mean per-pixel cross-entropy of `logits` `(B, K, H, W)` against one label map per batch element.
pub fn seg_loss(logits: &Tensor, labels: &[&SegmentationMap]) -> Result<Tensor> {
    let (b, k, h, w) = logits.dims4()?;
    if labels.len() != b {
        return param(format!("{} label maps for a batch of {b}", labels.len()));
    }
    let mut idx = Vec::with_capacity(b * h * w);
    for label in labels {
        if label.dims() != (h, w) {
            return param(format!("label {:?} does not match logits {h}x{w}", label.dims()));
        }
        label.check_classes(k)?;
        idx.extend(label.labels().iter().map(|&l| l as u32));
    }
    let idx = Tensor::from_vec(idx, (b, 1, h, w), logits.device())?;
    let logp = candle_nn::ops::log_softmax(logits, 1)?;
    let picked = logp.gather(&idx, 1)?;
    Ok(picked.mean_all()?.neg()?)
}

/// Per-pixel class probabilities summed over the batch and spatial axes; handy in traces.
pub fn mean_class_probability(state: &SegState) -> Result<Vec<f64>> {
    let p = candle_nn::ops::softmax(state.tensor(), 1)?;
    Ok(p.mean(D::Minus1)?.mean(D::Minus1)?.mean(0)?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}
