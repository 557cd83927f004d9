//! Noise-space fusion of the two streams: the weight-map network, radiation-mask modulation,
//! the convex noise blend and the fused sampling loop.

use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{Conv2d, Linear};
use serde::{Deserialize, Serialize};

use crate::autoencoder::Autoencoder;
use crate::error::{param, Error, Result};
use crate::image::{RgbImage, SegmentationMap};
use crate::latent::{ensure_same, LatentGrid};
use crate::nn::{seeded_rng, silu, timestep_embedding, ParamBuilder, ParamStore};
use crate::schedule::{ddim_step, estimate_x0, NoiseSchedule, TimestepPlan};
use crate::seghead::{radiation_mask, seg_step, RadiationMask, SegHead, SegHeadDescriptor, SegState};
use crate::stream::{step_with_noise, Denoiser, DiffusionStreamState};

pub const FUSION_SCHEMA: u32 = 1;
pub const DEFAULT_TAU: f64 = 0.4;

/// Seed offset separating the segmentation-state draw from the latent-noise draw.
const SEG_STATE_SALT: u64 = 0x5e95_7a7e;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionNetDescriptor {
    pub latent_channels: usize,
    pub hidden: usize,
    /// Number of hidden layers; each one is a tap.
    pub n_taps: usize,
    pub temb_dim: usize,
    pub temb_channels: usize,
    /// Whether the two single-step clean estimates are part of the input.
    pub use_x0: bool,
    pub schema_version: u32,
}

impl FusionNetDescriptor {
    pub fn new(latent_channels: usize) -> Self {
        Self {
            latent_channels,
            hidden: 32,
            n_taps: 3,
            temb_dim: 16,
            temb_channels: 8,
            use_x0: true,
            schema_version: FUSION_SCHEMA,
        }
    }

    pub fn input_channels(&self) -> usize {
        let grids = if self.use_x0 { 5 } else { 3 };
        grids * self.latent_channels + self.temb_channels
    }
}

/// Feature grids captured from the designated layers of the weight-map network.
#[derive(Debug, Clone)]
pub struct AttentionTaps(pub Vec<Tensor>);

impl AttentionTaps {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn detach(&self) -> Self {
        Self(self.0.iter().map(Tensor::detach).collect())
    }
}

/// Raw and modulated blend weights, both latent-shaped with values in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct FusionWeightMap {
    pub w: LatentGrid,
    pub w_r: LatentGrid,
}

/// Shallow convolutional weight-map network ending in a logistic squashing.
#[derive(Debug, Clone)]
pub struct FusionNet {
    desc: FusionNetDescriptor,
    params: ParamStore,
    temb: Linear,
    layers: Vec<Conv2d>,
    out: Conv2d,
}

impl FusionNet {
    pub fn new(desc: FusionNetDescriptor, seed: u64) -> Result<Self> {
        if desc.n_taps == 0 || desc.hidden == 0 || desc.latent_channels == 0 {
            return param("fusion network needs at least one hidden layer and positive widths");
        }
        let mut params = ParamStore::new();
        let mut rng = seeded_rng(seed);
        let mut pb = ParamBuilder::new(&mut params, &mut rng);
        let temb = pb.pp("temb").linear(desc.temb_dim, desc.temb_channels)?;
        let mut layers = Vec::with_capacity(desc.n_taps);
        let mut c_in = desc.input_channels();
        for k in 0..desc.n_taps {
            layers.push(pb.pp(&format!("layer{k}")).conv2d(c_in, desc.hidden, 3, 1)?);
            c_in = desc.hidden;
        }
        let out = pb.pp("out").conv2d(desc.hidden, desc.latent_channels, 1, 1)?;
        Ok(Self { desc, params, temb, layers, out })
    }

    pub fn descriptor(&self) -> &FusionNetDescriptor {
        &self.desc
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn tap_channels(&self) -> Vec<usize> {
        vec![self.desc.hidden; self.desc.n_taps]
    }

    /// Weight map `w` and the taps of the same pass. `w` keeps the dtype of `z_f`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        x0_psi: &LatentGrid,
        x0_phi: &LatentGrid,
        z_f: &LatentGrid,
        eps_psi: &LatentGrid,
        eps_phi: &LatentGrid,
        t: usize,
    ) -> Result<(LatentGrid, AttentionTaps)> {
        for (g, what) in [(x0_psi, "restoration estimate"), (x0_phi, "translation estimate"), (eps_psi, "restoration noise"), (eps_phi, "translation noise")] {
            ensure_same(z_f, g, what)?;
        }
        let (b, c, h, w) = z_f.dims();
        if c != self.desc.latent_channels {
            return param(format!("fusion network expects {} latent channels, got {c}", self.desc.latent_channels));
        }
        let dtype = z_f.tensor().dtype();
        let emb = timestep_embedding(&vec![t; b], self.desc.temb_dim, &Device::Cpu)?;
        let emb = self.temb.forward(&emb)?.unsqueeze(2)?.unsqueeze(3)?.broadcast_as((b, self.desc.temb_channels, h, w))?;
        let mut grids = Vec::with_capacity(6);
        if self.desc.use_x0 {
            grids.extend([x0_psi, x0_phi]);
        }
        grids.extend([z_f, eps_psi, eps_phi]);
        let mut parts: Vec<Tensor> = grids.iter().map(|g| g.tensor().to_dtype(DType::F32)).collect::<candle_core::Result<_>>()?;
        parts.push(emb.contiguous()?);
        let mut x = Tensor::cat(&parts, 1)?;
        let mut taps = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            x = silu(&layer.forward(&x)?)?;
            taps.push(x.clone());
        }
        let w = candle_nn::ops::sigmoid(&self.out.forward(&x)?)?;
        Ok((LatentGrid::new(w.to_dtype(dtype)?)?, AttentionTaps(taps)))
    }
}

pub fn fuse_weights(
    net: &FusionNet,
    x0_psi: &LatentGrid,
    x0_phi: &LatentGrid,
    z_f: &LatentGrid,
    eps_psi: &LatentGrid,
    eps_phi: &LatentGrid,
    t: usize,
) -> Result<(LatentGrid, AttentionTaps)> {
    net.forward(x0_psi, x0_phi, z_f, eps_psi, eps_phi, t)
}

/// `tau` as the largest value of `dtype` not above it, so the cap holds when read back in f64.
fn cap_for(tau: f64, dtype: DType) -> f64 {
    match dtype {
        DType::F32 => {
            let t = tau as f32;
            if t as f64 > tau {
                f32::from_bits(t.to_bits() - 1) as f64
            } else {
                t as f64
            }
        }
        _ => tau,
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return param(format!("tau must lie in [0, 1], got {tau}"));
    }
    Ok(())
}

/// `w_r = M·min(w, τ) + (1−M)·w` with `M` at latent resolution, broadcast over batch and channels.
pub fn modulate_weights(w: &LatentGrid, mask: &RadiationMask, tau: f64) -> Result<LatentGrid> {
    check_tau(tau)?;
    let (b, c, h, wd) = w.dims();
    if mask.dims() != (h, wd) {
        return param(format!("mask {:?} does not match weight map {h}x{wd}", mask.dims()));
    }
    let wt = w.tensor();
    let m = mask.to_tensor(wt.device())?.broadcast_as((b, c, h, wd))?.contiguous()?;
    let capped = wt.minimum(cap_for(tau, wt.dtype()))?;
    LatentGrid::new(m.where_cond(&capped, wt)?)
}

/// `ε^f = w_r·ε^ψ + (1−w_r)·ε^φ`, clamped into the elementwise hull of the two noises.
pub fn fuse_noise(eps_psi: &LatentGrid, eps_phi: &LatentGrid, w_r: &LatentGrid) -> Result<LatentGrid> {
    ensure_same(eps_psi, eps_phi, "noise fusion")?;
    ensure_same(eps_psi, w_r, "noise fusion weights")?;
    let (a, b) = (eps_psi.tensor(), eps_phi.tensor());
    let w = w_r.tensor().to_dtype(a.dtype())?;
    let blend = ((&w * a)? + (w.affine(-1.0, 1.0)? * b)?)?;
    let lo = a.minimum(b)?;
    let hi = a.maximum(b)?;
    LatentGrid::new(blend.maximum(&lo)?.minimum(&hi)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub tau: f64,
    pub thermal_classes: Vec<u8>,
    pub plan: TimestepPlan,
    pub seed: u64,
    /// When false the weights pass through unmodulated.
    pub use_mask: bool,
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        check_tau(self.tau)
    }
}

/// Every network the fused loop needs.
#[derive(Clone, Copy)]
pub struct FusionModels<'a> {
    pub ae: &'a Autoencoder,
    pub psi: &'a Denoiser,
    pub phi: &'a Denoiser,
    pub fusion: &'a FusionNet,
    pub seg: &'a SegHead,
}

impl FusionModels<'_> {
    /// Checks that the pieces fit together.
    pub fn validate(&self) -> Result<()> {
        let c = self.ae.descriptor().latent_channels;
        if self.psi.descriptor().latent_channels != c
            || self.phi.descriptor().latent_channels != c
            || self.fusion.descriptor().latent_channels != c
        {
            return Err(Error::Config("stream, fusion and autoencoder latent channels disagree".into()));
        }
        let sd: &SegHeadDescriptor = self.seg.descriptor();
        if sd.tap_channels != self.fusion.tap_channels() || sd.factor != self.ae.descriptor().factor() {
            return Err(Error::Config("segmentation head does not match the fusion network taps".into()));
        }
        Ok(())
    }
}

/// The three trajectories and the segmentation state at one timestep.
#[derive(Debug, Clone)]
pub struct FusionLoopState {
    pub psi: DiffusionStreamState,
    pub phi: DiffusionStreamState,
    pub z_f: LatentGrid,
    pub z_s: SegState,
    pub t: usize,
}

impl FusionLoopState {
    /// All three trajectories start from the same `z_T`.
    pub fn start(cond: &LatentGrid, z_start: &LatentGrid, z_s: SegState, t: usize) -> Result<Self> {
        ensure_same(cond, z_start, "fusion start")?;
        Ok(Self {
            psi: DiffusionStreamState::start(z_start.clone(), cond.clone(), t),
            phi: DiffusionStreamState::start(z_start.clone(), cond.clone(), t),
            z_f: z_start.clone(),
            z_s,
            t,
        })
    }
}

/// Modulation settings of one step.
#[derive(Debug, Clone, Copy)]
pub struct StepOptions<'a> {
    pub tau: f64,
    pub thermal_classes: &'a [u8],
    pub use_mask: bool,
}

/// Everything produced at one step. With gradient tracking on, `weights`, `eps_f`, `x0_f`
/// and `z_s_next` stay attached to the fusion and segmentation parameters.
#[derive(Debug, Clone)]
pub struct FusionStep {
    pub t: usize,
    pub t_next: usize,
    pub eps_psi: LatentGrid,
    pub eps_phi: LatentGrid,
    pub x0_psi: LatentGrid,
    pub x0_phi: LatentGrid,
    pub weights: FusionWeightMap,
    pub mask: RadiationMask,
    pub gamma: SegmentationMap,
    pub eps_f: LatentGrid,
    pub x0_f: LatentGrid,
    pub z_s_next: SegState,
}

/// One reverse step of all three trajectories. The returned state is always detached.
pub fn fusion_step(
    models: &FusionModels<'_>,
    s: &NoiseSchedule,
    state: &FusionLoopState,
    t_next: usize,
    opts: &StepOptions<'_>,
    track_grad: bool,
) -> Result<(FusionLoopState, FusionStep)> {
    let t = state.t;
    let eps_psi = models.psi.predict_noise(&state.psi.z_t, &state.psi.cond, t)?.detach();
    let eps_phi = models.phi.predict_noise(&state.phi.z_t, &state.phi.cond, t)?.detach();
    let psi = step_with_noise(&state.psi, eps_psi.clone(), s, t_next)?;
    let phi = step_with_noise(&state.phi, eps_phi.clone(), s, t_next)?;
    let x0_psi = psi.x0_hat.clone().expect("stepped state has an estimate");
    let x0_phi = phi.x0_hat.clone().expect("stepped state has an estimate");

    let (w, taps) = fuse_weights(models.fusion, &x0_psi, &x0_phi, &state.z_f, &eps_psi, &eps_phi, t)?;
    let (z_s_next, gammas) = seg_step(&state.z_s, &taps.0, models.seg)?;
    let gamma = gammas.into_iter().next().ok_or_else(|| Error::Param("empty batch".into()))?;
    let factor = models.ae.descriptor().factor();
    let mask = radiation_mask(&gamma, opts.thermal_classes).downsample_nearest(factor)?;
    let w_r = if opts.use_mask { modulate_weights(&w, &mask, opts.tau)? } else { w.clone() };
    let eps_f = fuse_noise(&eps_psi, &eps_phi, &w_r)?;
    let x0_f = estimate_x0(&state.z_f, &eps_f, t, s)?;
    let z_f_next = ddim_step(&x0_f, &eps_f, t_next, s)?.detach();

    let (weights, eps_f, x0_f, z_s_out) = if track_grad {
        (FusionWeightMap { w, w_r }, eps_f, x0_f, z_s_next.clone())
    } else {
        (FusionWeightMap { w: w.detach(), w_r: w_r.detach() }, eps_f.detach(), x0_f.detach(), z_s_next.detach())
    };
    let next = FusionLoopState { psi, phi, z_f: z_f_next, z_s: z_s_next.detach(), t: t_next };
    let step = FusionStep { t, t_next, eps_psi, eps_phi, x0_psi, x0_phi, weights, mask, gamma, eps_f, x0_f, z_s_next: z_s_out };
    Ok((next, step))
}

/// Diagnostics of one fused step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: usize,
    pub t_next: usize,
    pub w_mean: f64,
    pub w_min: f64,
    pub w_max: f64,
    pub w_r_mean: f64,
    /// Mean of `w_r` over masked latent cells; absent when the mask is empty.
    pub w_r_inside_mean: Option<f64>,
    /// Mean of `w` over unmasked latent cells; absent when the mask covers everything.
    pub w_outside_mean: Option<f64>,
    pub mask_fraction: f64,
    pub z_f_rms: f64,
    pub z_psi_rms: f64,
    pub z_phi_rms: f64,
}

/// Mean of `grid` over cells where `mask` equals `on`, broadcast over batch and channels.
pub fn masked_mean(grid: &LatentGrid, mask: &RadiationMask, on: bool) -> Result<Option<f64>> {
    let (b, c, h, w) = grid.dims();
    if mask.dims() != (h, w) {
        return param("mask and grid disagree");
    }
    let v = grid.to_vec()?;
    let (mut sum, mut n) = (0.0, 0usize);
    for bc in 0..b * c {
        for (p, &m) in mask.data().iter().enumerate() {
            if (m == 1) == on {
                sum += v[bc * h * w + p];
                n += 1;
            }
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}

impl TraceRecord {
    pub fn from_step(step: &FusionStep, next: &FusionLoopState) -> Result<Self> {
        let w = step.weights.w.to_vec()?;
        let w_r = step.weights.w_r.to_vec()?;
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        Ok(Self {
            t: step.t,
            t_next: step.t_next,
            w_mean: mean(&w),
            w_min: w.iter().copied().fold(f64::INFINITY, f64::min),
            w_max: w.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            w_r_mean: mean(&w_r),
            w_r_inside_mean: masked_mean(&step.weights.w_r, &step.mask, true)?,
            w_outside_mean: masked_mean(&step.weights.w, &step.mask, false)?,
            mask_fraction: step.mask.fraction(),
            z_f_rms: next.z_f.rms()?,
            z_psi_rms: next.psi.z_t.rms()?,
            z_phi_rms: next.phi.z_t.rms()?,
        })
    }
}

pub fn write_trace_jsonl(trace: &[TraceRecord], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in trace {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct FusionOutput {
    pub image: RgbImage,
    pub gamma: SegmentationMap,
    pub latent: LatentGrid,
    pub trace: Vec<TraceRecord>,
}

/// Standard-normal starting latent for an image of the given size.
pub fn initial_noise(ae: &Autoencoder, height: usize, width: usize, seed: u64) -> Result<LatentGrid> {
    let (c, h, w) = ae.descriptor().latent_dims(height, width)?;
    LatentGrid::standard_normal(&mut seeded_rng(seed), (1, c, h, w), DType::F32, &Device::Cpu)
}

/// Initial segmentation state for a run seeded with `seed`.
pub fn initial_seg_state(n_class: usize, height: usize, width: usize, seed: u64) -> Result<SegState> {
    SegState::standard_normal(&mut seeded_rng(seed ^ SEG_STATE_SALT), 1, n_class, height, width)
}

/// Fused sampling of one degraded visible image from `z_start`.
pub fn run_fusion_sampling(
    input: &RgbImage,
    z_start: &LatentGrid,
    models: &FusionModels<'_>,
    s: &NoiseSchedule,
    cfg: &FusionConfig,
) -> Result<FusionOutput> {
    cfg.validate()?;
    models.validate()?;
    let cond = models.ae.encode(input)?;
    let (h, w) = input.dims();
    let z_s = initial_seg_state(models.seg.descriptor().n_class, h, w, cfg.seed)?;
    let mut state = FusionLoopState::start(&cond, z_start, z_s, cfg.plan.steps()[0])?;
    let opts = StepOptions { tau: cfg.tau, thermal_classes: &cfg.thermal_classes, use_mask: cfg.use_mask };
    let mut trace = Vec::with_capacity(cfg.plan.len());
    let mut last = None;
    for (_, t_next) in cfg.plan.transitions() {
        let (next, step) = fusion_step(models, s, &state, t_next, &opts, false)?;
        trace.push(TraceRecord::from_step(&step, &next)?);
        state = next;
        last = Some(step);
    }
    let last = last.expect("plan has at least one step");
    let image = models.ae.decode(&last.x0_f)?;
    Ok(FusionOutput { image, gamma: last.gamma, latent: last.x0_f, trace })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(seed: u64) -> LatentGrid {
        LatentGrid::standard_normal(&mut seeded_rng(seed), (1, 4, 4, 4), DType::F32, &Device::Cpu).unwrap()
    }

    fn filled(v: f64) -> LatentGrid {
        LatentGrid::filled((1, 4, 4, 4), v, DType::F32).unwrap()
    }

    fn mask(on: bool) -> RadiationMask {
        let g = SegmentationMap::filled(4, 4, if on { 1 } else { 0 }).unwrap();
        radiation_mask(&g, &[1, 2])
    }

    #[test]
    fn weights_bounded_deterministic_with_taps() {
        let net = FusionNet::new(FusionNetDescriptor::new(4), 0).unwrap();
        let g: Vec<_> = (0..5).map(grid).collect();
        let (w1, taps) = fuse_weights(&net, &g[0], &g[1], &g[2], &g[3], &g[4], 500).unwrap();
        let (w2, _) = fuse_weights(&net, &g[0], &g[1], &g[2], &g[3], &g[4], 500).unwrap();
        assert_eq!(w1.to_vec().unwrap(), w2.to_vec().unwrap());
        assert!(w1.to_vec().unwrap().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(taps.len(), 3);
        let bad = LatentGrid::filled((1, 4, 2, 2), 0.0, DType::F32).unwrap();
        assert!(fuse_weights(&net, &bad, &g[1], &g[2], &g[3], &g[4], 1).is_err());
    }

    #[test]
    fn model_i_drops_estimates() {
        let mut d = FusionNetDescriptor::new(4);
        d.use_x0 = false;
        let net = FusionNet::new(d, 0).unwrap();
        let g: Vec<_> = (0..5).map(grid).collect();
        let (a, _) = net.forward(&g[0], &g[1], &g[2], &g[3], &g[4], 10).unwrap();
        let (b, _) = net.forward(&grid(9), &grid(10), &g[2], &g[3], &g[4], 10).unwrap();
        assert_eq!(a.to_vec().unwrap(), b.to_vec().unwrap());
    }

    #[test]
    fn modulation_examples() {
        let w = filled(0.9);
        let r = modulate_weights(&w, &mask(true), 0.4).unwrap().to_vec().unwrap();
        assert!(r.iter().all(|&v| v <= 0.4 && (v - 0.4).abs() < 1e-7));
        let r = modulate_weights(&grid(1), &mask(false), 0.4).unwrap();
        assert_eq!(r.to_vec().unwrap(), grid(1).to_vec().unwrap());
        assert!(modulate_weights(&w, &mask(true), 1.2).is_err());
    }

    #[test]
    fn noise_examples() {
        let (a, b) = (grid(1), grid(2));
        assert_eq!(fuse_noise(&a, &b, &filled(1.0)).unwrap().to_vec().unwrap(), a.to_vec().unwrap());
        assert_eq!(fuse_noise(&a, &b, &filled(0.0)).unwrap().to_vec().unwrap(), b.to_vec().unwrap());
        let half = fuse_noise(&filled(1.0), &filled(0.0), &filled(0.5)).unwrap();
        assert!(half.to_vec().unwrap().iter().all(|&v| v == 0.5));
        assert_eq!(fuse_noise(&a, &a, &filled(0.37)).unwrap().to_vec().unwrap(), a.to_vec().unwrap());
    }

    #[test]
    fn f32_cap_is_at_most_tau() {
        for tau in [0.0, 0.1, 0.2, 0.4, 0.6, 0.8, 1.0] {
            let c = cap_for(tau, DType::F32);
            assert!(c <= tau && tau - c < 1e-7);
        }
    }
}
