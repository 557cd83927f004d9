//! Conditional latent diffusion streams: restoration (degraded → clean visible) and
//! translation (degraded visible → infrared).
//!
//! A stream is a noise predictor over `[z_t ‖ c]` (channel concatenation of the noisy latent
//! and the conditioning latent) plus the deterministic reverse loop built on
//! [`crate::schedule`].

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{Conv2d, GroupNorm, Linear};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autoencoder::Autoencoder;
use crate::error::{param, Result};
use crate::image::RgbImage;
use crate::latent::{ensure_same, LatentGrid};
use crate::nn::{mse, scalar, seeded_rng, silu, timestep_embedding, ParamBuilder, ParamStore};
use crate::optim::{LossLog, Opt, OptimizerKind};
use crate::schedule::{ddim_step, estimate_x0, forward_sample_batch, NoiseSchedule, TimestepPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamRole {
    /// Intra-spectral restoration of the degraded visible image.
    Restoration,
    /// Visible-to-infrared translation.
    Translation,
}

impl StreamRole {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Restoration => "restoration",
            Self::Translation => "translation",
        }
    }
}

impl std::fmt::Display for StreamRole {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for StreamRole {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "restoration" | "psi" => Ok(Self::Restoration),
            "translation" | "phi" => Ok(Self::Translation),
            other => param(format!("unknown stream role {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserDescriptor {
    pub role: StreamRole,
    pub base_width: usize,
    pub latent_channels: usize,
    pub cond_channels: usize,
    pub temb_dim: usize,
    pub groups: usize,
}

impl DenoiserDescriptor {
    /// Desk-scale default: the translation stream gets twice the restoration width.
    pub fn for_role(role: StreamRole, latent_channels: usize) -> Self {
        let base_width = match role {
            StreamRole::Restoration => 24,
            StreamRole::Translation => 48,
        };
        Self { role, base_width, latent_channels, cond_channels: latent_channels, temb_dim: 32, groups: 8 }
    }
}

#[derive(Debug, Clone)]
struct TimeResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl TimeResBlock {
    fn new(pb: &mut ParamBuilder, c_in: usize, c_out: usize, emb: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            norm1: pb.pp("norm1").group_norm(groups, c_in)?,
            conv1: pb.pp("conv1").conv2d(c_in, c_out, 3, 1)?,
            temb: pb.pp("temb").linear(emb, c_out)?,
            norm2: pb.pp("norm2").group_norm(groups, c_out)?,
            conv2: pb.pp("conv2").conv2d(c_out, c_out, 3, 1)?,
            skip: if c_in == c_out { None } else { Some(pb.pp("skip").conv2d(c_in, c_out, 1, 1)?) },
        })
    }

    fn forward(&self, x: &Tensor, emb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&silu(&self.norm1.forward(x)?)?)?;
        let e = self.temb.forward(&silu(emb)?)?.unsqueeze(2)?.unsqueeze(3)?;
        let h = h.broadcast_add(&e)?;
        let h = self.conv2.forward(&silu(&self.norm2.forward(&h)?)?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

/// Conditional noise predictor: a two-level encoder–decoder with one skip connection.
#[derive(Debug, Clone)]
pub struct Denoiser {
    desc: DenoiserDescriptor,
    params: ParamStore,
    temb1: Linear,
    temb2: Linear,
    conv_in: Conv2d,
    res1: TimeResBlock,
    down: Conv2d,
    res2: TimeResBlock,
    mid: TimeResBlock,
    res3: TimeResBlock,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl Denoiser {
    pub fn new(desc: DenoiserDescriptor, seed: u64) -> Result<Self> {
        if desc.base_width == 0 || desc.base_width % desc.groups != 0 {
            return param("denoiser width must be a positive multiple of the group count");
        }
        let mut params = ParamStore::new();
        let mut rng = seeded_rng(seed);
        let mut pb = ParamBuilder::new(&mut params, &mut rng);
        let w = desc.base_width;
        let e = 4 * desc.temb_dim;
        let g = desc.groups;
        let c_in = desc.latent_channels + desc.cond_channels;
        let temb1 = pb.pp("temb1").linear(desc.temb_dim, e)?;
        let temb2 = pb.pp("temb2").linear(e, e)?;
        let conv_in = pb.pp("conv_in").conv2d(c_in, w, 3, 1)?;
        let res1 = TimeResBlock::new(&mut pb.pp("res1"), w, w, e, g)?;
        let down = pb.pp("down").conv2d(w, w, 3, 2)?;
        let res2 = TimeResBlock::new(&mut pb.pp("res2"), w, 2 * w, e, g)?;
        let mid = TimeResBlock::new(&mut pb.pp("mid"), 2 * w, 2 * w, e, g)?;
        let res3 = TimeResBlock::new(&mut pb.pp("res3"), 3 * w, w, e, g)?;
        let norm_out = pb.pp("norm_out").group_norm(g, w)?;
        let conv_out = pb.pp("conv_out").conv2d_scaled(w, desc.latent_channels, 3, 1, 0.1)?;
        Ok(Self { desc, params, temb1, temb2, conv_in, res1, down, res2, mid, res3, norm_out, conv_out })
    }

    pub fn role(&self) -> StreamRole {
        self.desc.role
    }

    pub fn descriptor(&self) -> &DenoiserDescriptor {
        &self.desc
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Predicted noise with one timestep per batch element.
    pub fn predict_noise_batch(&self, z_t: &LatentGrid, c: &LatentGrid, ts: &[usize]) -> Result<LatentGrid> {
        let (b, cz, h, w) = z_t.dims();
        let (bc, cc, hc, wc) = c.dims();
        if (b, h, w) != (bc, hc, wc) {
            return param(format!("noisy latent {:?} and condition {:?} are not aligned", z_t.dims(), c.dims()));
        }
        if cz != self.desc.latent_channels || cc != self.desc.cond_channels {
            return param("latent or condition channel count does not match the denoiser");
        }
        if ts.len() != b {
            return param(format!("{} timesteps for a batch of {b}", ts.len()));
        }
        if h % 2 != 0 || w % 2 != 0 {
            return param("denoiser needs even latent dimensions");
        }
        let dtype = z_t.tensor().dtype();
        let emb = timestep_embedding(ts, self.desc.temb_dim, &Device::Cpu)?;
        let emb = self.temb2.forward(&silu(&self.temb1.forward(&emb)?)?)?;
        let x = Tensor::cat(&[z_t.tensor().to_dtype(DType::F32)?, c.tensor().to_dtype(DType::F32)?], 1)?;
        let h0 = self.conv_in.forward(&x)?;
        let h1 = self.res1.forward(&h0, &emb)?;
        let h2 = self.down.forward(&h1)?;
        let h3 = self.res2.forward(&h2, &emb)?;
        let h4 = self.mid.forward(&h3, &emb)?;
        let up = h4.upsample_nearest2d(h, w)?;
        let u = self.res3.forward(&Tensor::cat(&[up, h1], 1)?, &emb)?;
        let out = self.conv_out.forward(&silu(&self.norm_out.forward(&u)?)?)?;
        LatentGrid::new(out.to_dtype(dtype)?)
    }

    pub fn predict_noise(&self, z_t: &LatentGrid, c: &LatentGrid, t: usize) -> Result<LatentGrid> {
        let (b, ..) = z_t.dims();
        self.predict_noise_batch(z_t, c, &vec![t; b])
    }
}

/// Per-timestep bundle of one stream: the current latent, the noise predicted at the
/// previous timestep and the clean estimate derived from it.
///
/// For an emitted state, `z_t = √ᾱ_t·x0_hat + √(1−ᾱ_t)·eps` holds at `t`.
#[derive(Debug, Clone)]
pub struct DiffusionStreamState {
    pub z_t: LatentGrid,
    pub t: usize,
    pub eps: Option<LatentGrid>,
    pub x0_hat: Option<LatentGrid>,
    pub cond: LatentGrid,
}

impl DiffusionStreamState {
    pub fn start(z_start: LatentGrid, cond: LatentGrid, t: usize) -> Self {
        Self { z_t: z_start, t, eps: None, x0_hat: None, cond }
    }

    /// Max absolute residual of the state's self-consistency relation; `None` for a start state.
    pub fn consistency_residual(&self, s: &NoiseSchedule) -> Result<Option<f64>> {
        let (Some(eps), Some(x0)) = (&self.eps, &self.x0_hat) else {
            return Ok(None);
        };
        let rebuilt = ddim_step(x0, eps, self.t, s)?;
        Ok(Some(rebuilt.max_abs_diff(&self.z_t)?))
    }
}

/// Advances one deterministic reverse transition `t → t_next`.
pub fn reverse_step(
    state: &DiffusionStreamState,
    denoiser: &Denoiser,
    s: &NoiseSchedule,
    t_next: usize,
) -> Result<DiffusionStreamState> {
    let eps = denoiser.predict_noise(&state.z_t, &state.cond, state.t)?;
    step_with_noise(state, eps, s, t_next)
}

/// Reverse transition with an externally supplied noise estimate.
pub fn step_with_noise(
    state: &DiffusionStreamState,
    eps: LatentGrid,
    s: &NoiseSchedule,
    t_next: usize,
) -> Result<DiffusionStreamState> {
    if t_next >= state.t {
        return param(format!("reverse step must decrease the timestep ({} -> {t_next})", state.t));
    }
    ensure_same(&state.z_t, &eps, "reverse step noise")?;
    let x0 = estimate_x0(&state.z_t, &eps, state.t, s)?;
    let z_next = ddim_step(&x0, &eps, t_next, s)?;
    Ok(DiffusionStreamState { z_t: z_next, t: t_next, eps: Some(eps), x0_hat: Some(x0), cond: state.cond.clone() })
}

/// Runs the whole plan from `z_T` and returns the final clean latent.
pub fn sample_latent(
    cond: &LatentGrid,
    z_start: &LatentGrid,
    denoiser: &Denoiser,
    s: &NoiseSchedule,
    plan: &TimestepPlan,
) -> Result<LatentGrid> {
    ensure_same(cond, z_start, "sampling start")?;
    let mut state = DiffusionStreamState::start(z_start.clone(), cond.clone(), plan.steps()[0]);
    for (_, t_next) in plan.transitions() {
        state = reverse_step(&state, denoiser, s, t_next)?;
    }
    Ok(state.x0_hat.expect("plan has at least one step"))
}

/// Full reverse chain followed by decoding.
pub fn sample_full(
    cond: &LatentGrid,
    z_start: &LatentGrid,
    denoiser: &Denoiser,
    s: &NoiseSchedule,
    plan: &TimestepPlan,
    ae: &Autoencoder,
) -> Result<RgbImage> {
    ae.decode(&sample_latent(cond, z_start, denoiser, s, plan)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamTrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
}

impl StreamTrainConfig {
    /// Reference optimiser settings for each role at full scale.
    pub fn reference(role: StreamRole) -> Self {
        match role {
            StreamRole::Restoration => Self { optimizer: OptimizerKind::Adam, lr: 1e-4, batch_size: 16, steps: 0, seed: 0 },
            StreamRole::Translation => Self { optimizer: OptimizerKind::Adam, lr: 1e-5, batch_size: 4, steps: 0, seed: 0 },
        }
    }
}

/// Encoded training pairs: conditioning latents and clean target latents, `(N, C, h, w)` each.
#[derive(Debug, Clone)]
pub struct LatentPairs {
    pub cond: Tensor,
    pub target: Tensor,
}

impl LatentPairs {
    pub fn encode(pairs: &[(RgbImage, RgbImage)], ae: &Autoencoder) -> Result<Self> {
        if pairs.is_empty() {
            return param("stream training needs at least one pair");
        }
        let inputs: Vec<&RgbImage> = pairs.iter().map(|p| &p.0).collect();
        let targets: Vec<&RgbImage> = pairs.iter().map(|p| &p.1).collect();
        let cond = ae.encode_tensor(&RgbImage::batch_to_tensor(&inputs, &Device::Cpu)?)?;
        let target = ae.encode_tensor(&RgbImage::batch_to_tensor(&targets, &Device::Cpu)?)?;
        Ok(Self { cond: cond.into_tensor().detach(), target: target.into_tensor().detach() })
    }

    pub fn len(&self) -> usize {
        self.cond.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `‖ε − ε_θ(√ᾱ_t z0 + √(1−ᾱ_t) ε, c, t)‖²` averaged over a batch.
fn eps_loss(
    denoiser: &Denoiser,
    z0: &Tensor,
    cond: &Tensor,
    ts: &[usize],
    eps: &LatentGrid,
    s: &NoiseSchedule,
) -> Result<Tensor> {
    let z0 = LatentGrid::new(z0.clone())?;
    let zt = forward_sample_batch(&z0, ts, eps, s)?;
    let pred = denoiser.predict_noise_batch(&zt, &LatentGrid::new(cond.clone())?, ts)?;
    mse(pred.tensor(), eps.tensor())
}

/// Mean ε-prediction error over a fixed, seeded set of `(t, ε)` draws per pair.
pub fn eval_eps_mse(
    denoiser: &Denoiser,
    data: &LatentPairs,
    s: &NoiseSchedule,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = seeded_rng(seed);
    let (n, c, h, w) = data.target.dims4()?;
    let mut total = 0.0;
    for _ in 0..draws {
        let ts: Vec<usize> = (0..n).map(|_| rng.random_range(1..=s.len())).collect();
        let eps = LatentGrid::standard_normal(&mut rng, (n, c, h, w), DType::F32, &Device::Cpu)?;
        total += scalar(&eps_loss(denoiser, &data.target, &data.cond, &ts, &eps, s)?)?;
    }
    Ok(total / draws.max(1) as f64)
}

/// Trains a fresh denoiser on encoded pairs with uniformly drawn timesteps.
pub fn train_stream_latents(
    data: &LatentPairs,
    desc: DenoiserDescriptor,
    cfg: &StreamTrainConfig,
    s: &NoiseSchedule,
) -> Result<(Denoiser, LossLog)> {
    train_stream_observed(data, desc, cfg, s, &mut |_, _, _| Ok(()))
}

/// As [`train_stream_latents`], calling `observer(step, loss, model)` after every update.
pub fn train_stream_observed(
    data: &LatentPairs,
    desc: DenoiserDescriptor,
    cfg: &StreamTrainConfig,
    s: &NoiseSchedule,
    observer: &mut dyn FnMut(usize, f64, &Denoiser) -> Result<()>,
) -> Result<(Denoiser, LossLog)> {
    if data.is_empty() {
        return param("stream training needs at least one pair");
    }
    if cfg.batch_size == 0 {
        return param("batch size must be at least 1");
    }
    let denoiser = Denoiser::new(desc, cfg.seed)?;
    let mut log = LossLog::default();
    if cfg.steps == 0 {
        return Ok((denoiser, log));
    }
    let mut opt = Opt::new(cfg.optimizer, denoiser.params().vars(), cfg.lr)?;
    let mut rng = seeded_rng(cfg.seed ^ 0xd1ff_0000);
    let (_, c, h, w) = data.target.dims4()?;
    for step in 0..cfg.steps {
        let b = cfg.batch_size;
        let idx: Vec<u32> = (0..b).map(|_| rng.random_range(0..data.len()) as u32).collect();
        let idx = Tensor::new(idx.as_slice(), &Device::Cpu)?;
        let ts: Vec<usize> = (0..b).map(|_| rng.random_range(1..=s.len())).collect();
        let eps = LatentGrid::standard_normal(&mut rng, (b, c, h, w), DType::F32, &Device::Cpu)?;
        let loss = eps_loss(
            &denoiser,
            &data.target.index_select(&idx, 0)?,
            &data.cond.index_select(&idx, 0)?,
            &ts,
            &eps,
            s,
        )?;
        let value = scalar(&loss)?;
        log.push(value);
        if cfg.lr > 0.0 {
            opt.backward_step(&loss)?;
        }
        observer(step, value, &denoiser)?;
    }
    Ok((denoiser, log))
}

/// Encodes `(input, target)` image pairs and trains a stream of the given role.
pub fn train_stream(
    pairs: &[(RgbImage, RgbImage)],
    role: StreamRole,
    ae: &Autoencoder,
    cfg: &StreamTrainConfig,
    s: &NoiseSchedule,
) -> Result<(Denoiser, LossLog)> {
    let data = LatentPairs::encode(pairs, ae)?;
    let desc = DenoiserDescriptor::for_role(role, ae.descriptor().latent_channels);
    train_stream_latents(&data, desc, cfg, s)
}
