//! Lightweight image ↔ latent autoencoder with instance-normalised residual blocks.

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{Conv2d, Optimizer};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{param, Result};
use crate::image::RgbImage;
use crate::latent::LatentGrid;
use crate::nn::{scalar, seeded_rng, silu, InstanceNorm, ParamBuilder, ParamStore};
use crate::optim::{adam, LossLog};

pub const AUTOENCODER_SCHEMA: u32 = 1;

/// Architecture of an autoencoder instance. `widths[0]` runs at full resolution and every
/// further entry halves it, so the downsample factor is `2^(widths.len() - 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderDescriptor {
    pub widths: Vec<usize>,
    pub latent_channels: usize,
    /// Multiplier applied to raw encoder output so latents have roughly unit variance.
    pub latent_scale: f32,
    pub schema_version: u32,
}

impl Default for AutoencoderDescriptor {
    fn default() -> Self {
        Self { widths: vec![16, 32, 32], latent_channels: 4, latent_scale: 1.0, schema_version: AUTOENCODER_SCHEMA }
    }
}

impl AutoencoderDescriptor {
    pub fn factor(&self) -> usize {
        1 << (self.widths.len() - 1)
    }

    pub fn latent_dims(&self, height: usize, width: usize) -> Result<(usize, usize, usize)> {
        let f = self.factor();
        if height % f != 0 || width % f != 0 {
            return param(format!("image {height}x{width} not divisible by downsample factor {f}"));
        }
        Ok((self.latent_channels, height / f, width / f))
    }

    fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.iter().any(|&w| w == 0) || self.latent_channels == 0 {
            return param("autoencoder widths and latent channels must be positive");
        }
        if self.schema_version != AUTOENCODER_SCHEMA {
            return param(format!("unsupported autoencoder schema {}", self.schema_version));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    norm: InstanceNorm,
}

impl ResBlock {
    fn new(pb: &mut ParamBuilder, c: usize) -> Result<Self> {
        Ok(Self {
            conv1: pb.pp("conv1").conv2d(c, c, 3, 1)?,
            conv2: pb.pp("conv2").conv2d(c, c, 3, 1)?,
            norm: InstanceNorm::default(),
        })
    }

    fn forward(&self, x: &Tensor, taps: &mut Option<Vec<Tensor>>) -> Result<Tensor> {
        let n1 = self.norm.forward(x)?;
        let h = self.conv1.forward(&silu(&n1)?)?;
        let n2 = self.norm.forward(&h)?;
        if let Some(t) = taps.as_mut() {
            t.push(n1);
            t.push(n2.clone());
        }
        let h = self.conv2.forward(&silu(&n2)?)?;
        Ok((x + h)?)
    }
}

#[derive(Debug, Clone)]
pub struct Autoencoder {
    desc: AutoencoderDescriptor,
    params: ParamStore,
    enc_in: Conv2d,
    enc_blocks: Vec<ResBlock>,
    enc_down: Vec<Conv2d>,
    enc_out: Conv2d,
    dec_in: Conv2d,
    dec_blocks: Vec<ResBlock>,
    dec_up: Vec<Conv2d>,
    dec_out: Conv2d,
}

impl Autoencoder {
    pub fn new(desc: AutoencoderDescriptor, seed: u64) -> Result<Self> {
        desc.validate()?;
        let mut params = ParamStore::new();
        let mut rng = seeded_rng(seed);
        let mut pb = ParamBuilder::new(&mut params, &mut rng);
        let w = &desc.widths;
        let last = w.len() - 1;

        let mut enc = pb.pp("encoder");
        let enc_in = enc.pp("conv_in").conv2d(3, w[0], 3, 1)?;
        let mut enc_blocks = Vec::new();
        let mut enc_down = Vec::new();
        for s in 0..=last {
            enc_blocks.push(ResBlock::new(&mut enc.pp(&format!("block{s}")), w[s])?);
            if s < last {
                enc_down.push(enc.pp(&format!("down{s}")).conv2d(w[s], w[s + 1], 3, 2)?);
            }
        }
        let enc_out = enc.pp("conv_out").conv2d(w[last], desc.latent_channels, 3, 1)?;

        let mut dec = pb.pp("decoder");
        let dec_in = dec.pp("conv_in").conv2d(desc.latent_channels, w[last], 3, 1)?;
        let mut dec_blocks = Vec::new();
        let mut dec_up = Vec::new();
        for s in (0..=last).rev() {
            dec_blocks.push(ResBlock::new(&mut dec.pp(&format!("block{s}")), w[s])?);
            if s > 0 {
                dec_up.push(dec.pp(&format!("up{s}")).conv2d(w[s], w[s - 1], 3, 1)?);
            }
        }
        let dec_out = dec.pp("conv_out").conv2d(w[0], 3, 3, 1)?;

        Ok(Self { desc, params, enc_in, enc_blocks, enc_down, enc_out, dec_in, dec_blocks, dec_up, dec_out })
    }

    pub fn descriptor(&self) -> &AutoencoderDescriptor {
        &self.desc
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub(crate) fn set_latent_scale(&mut self, scale: f32) {
        self.desc.latent_scale = scale;
    }

    fn encode_inner(&self, x: &Tensor, taps: &mut Option<Vec<Tensor>>) -> Result<Tensor> {
        let mut h = self.enc_in.forward(x)?;
        for (s, block) in self.enc_blocks.iter().enumerate() {
            h = block.forward(&h, taps)?;
            if let Some(down) = self.enc_down.get(s) {
                h = down.forward(&h)?;
            }
        }
        let z = self.enc_out.forward(&silu(&h)?)?;
        Ok((z * self.desc.latent_scale as f64)?)
    }

    /// Encodes a `(B, 3, H, W)` batch.
    pub fn encode_tensor(&self, x: &Tensor) -> Result<LatentGrid> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 {
            return param(format!("encoder expects 3 channels, got {c}"));
        }
        self.desc.latent_dims(h, w)?;
        LatentGrid::new(self.encode_inner(x, &mut None)?)
    }

    pub fn encode(&self, image: &RgbImage) -> Result<LatentGrid> {
        self.encode_tensor(&image.to_tensor(&Device::Cpu)?)
    }

    /// Encodes while capturing every instance-normalisation output, in network order.
    pub fn encode_with_norm_taps(&self, image: &RgbImage) -> Result<(LatentGrid, Vec<Tensor>)> {
        let x = image.to_tensor(&Device::Cpu)?;
        self.desc.latent_dims(image.height(), image.width())?;
        let mut taps = Some(Vec::new());
        let z = self.encode_inner(&x, &mut taps)?;
        Ok((LatentGrid::new(z)?, taps.unwrap_or_default()))
    }

    /// Decodes to a `(B, 3, H, W)` tensor in `[0, 1]`, keeping the autodiff graph.
    pub fn decode_tensor(&self, z: &LatentGrid) -> Result<Tensor> {
        let (_, c, _, _) = z.dims();
        if c != self.desc.latent_channels {
            return param(format!(
                "decoder expects {} latent channels, got {c}",
                self.desc.latent_channels
            ));
        }
        let z = z.tensor().to_dtype(DType::F32)?;
        let mut h = self.dec_in.forward(&(z / self.desc.latent_scale as f64)?)?;
        for (i, block) in self.dec_blocks.iter().enumerate() {
            h = block.forward(&h, &mut None)?;
            if let Some(up) = self.dec_up.get(i) {
                let (_, _, hh, ww) = h.dims4()?;
                h = up.forward(&h.upsample_nearest2d(hh * 2, ww * 2)?)?;
            }
        }
        let out = candle_nn::ops::sigmoid(&self.dec_out.forward(&silu(&h)?)?)?;
        Ok(out.clamp(0f32, 1f32)?)
    }

    pub fn decode(&self, z: &LatentGrid) -> Result<RgbImage> {
        let (b, ..) = z.dims();
        if b != 1 {
            return param(format!("decode returns one image; got a batch of {b}"));
        }
        RgbImage::from_tensor(&self.decode_tensor(z)?, 0)
    }

    /// Mean absolute reconstruction error over a set of images.
    pub fn reconstruction_error(&self, images: &[RgbImage]) -> Result<f64> {
        if images.is_empty() {
            return param("no images to reconstruct");
        }
        let mut total = 0.0;
        for img in images {
            let x = img.to_tensor(&Device::Cpu)?;
            let y = self.decode_tensor(&self.encode_tensor(&x)?)?;
            total += scalar(&(y - x)?.abs()?.mean_all()?)?;
        }
        Ok(total / images.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AeTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Side of the square random crops trained on; 0 trains on whole images.
    #[serde(default)]
    pub crop: usize,
    #[serde(default)]
    pub loss: ReconLoss,
}

/// Per-pixel reconstruction penalty.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconLoss {
    L1,
    #[default]
    Mse,
}

impl ReconLoss {
    fn apply(self, y: &Tensor, x: &Tensor) -> Result<Tensor> {
        let d = (y - x)?;
        Ok(match self {
            Self::L1 => d.abs()?.mean_all()?,
            Self::Mse => d.sqr()?.mean_all()?,
        })
    }
}

impl Default for AeTrainConfig {
    fn default() -> Self {
        Self { steps: 600, batch_size: 8, lr: 2e-3, seed: 0, crop: 0, loss: ReconLoss::Mse }
    }
}

/// Reconstruction training. Returns the trained model and its per-step loss.
///
/// After training the latent scale is set to the inverse standard deviation of the
/// training latents.
pub fn train_autoencoder(
    dataset: &[RgbImage],
    desc: AutoencoderDescriptor,
    cfg: &AeTrainConfig,
) -> Result<(Autoencoder, LossLog)> {
    if dataset.is_empty() {
        return param("autoencoder training needs at least one image");
    }
    if cfg.batch_size == 0 {
        return param("batch size must be at least 1");
    }
    let mut ae = Autoencoder::new(desc, cfg.seed)?;
    let refs: Vec<&RgbImage> = dataset.iter().collect();
    let all = RgbImage::batch_to_tensor(&refs, &Device::Cpu)?;
    let (_, _, h, w) = all.dims4()?;
    let crop = match cfg.crop {
        0 => None,
        c if c >= h.min(w) => None,
        c if c % ae.desc.factor() != 0 => {
            return param(format!("crop {c} must be a multiple of the downsample factor {}", ae.desc.factor()))
        }
        c => Some(c),
    };
    let mut log = LossLog::default();
    if cfg.steps > 0 {
        let mut opt = adam(ae.params.vars(), cfg.lr)?;
        let mut rng = seeded_rng(cfg.seed ^ 0x5eed_ae00);
        for _ in 0..cfg.steps {
            let idx: Vec<u32> = (0..cfg.batch_size.min(dataset.len()))
                .map(|_| rng.random_range(0..dataset.len()) as u32)
                .collect();
            let idx = Tensor::new(idx.as_slice(), &Device::Cpu)?;
            let x = all.index_select(&idx, 0)?;
            let x = match crop {
                Some(c) => {
                    let f = ae.desc.factor();
                    let (_, _, h, w) = x.dims4()?;
                    let y0 = rng.random_range(0..=(h - c) / f) * f;
                    let x0 = rng.random_range(0..=(w - c) / f) * f;
                    x.narrow(2, y0, c)?.narrow(3, x0, c)?.contiguous()?
                }
                None => x,
            };
            let y = ae.decode_tensor(&ae.encode_tensor(&x)?)?;
            let loss = cfg.loss.apply(&y, &x)?;
            log.push(scalar(&loss)?);
            if cfg.lr > 0.0 {
                opt.backward_step(&loss)?;
            }
        }
    }
    let z = ae.encode_inner(&all, &mut None)?.to_dtype(DType::F64)?;
    let std = scalar(&z.sqr()?.mean_all()?)?.sqrt() / ae.desc.latent_scale as f64;
    if std.is_finite() && std > 1e-6 {
        ae.set_latent_scale((1.0 / std) as f32);
    }
    Ok((ae, log))
}
