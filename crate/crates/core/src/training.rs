//! Stage configuration and the two-phase optimisation: independent stream training, then
//! fusion and segmentation training through the gradient-gated reverse loop.

use std::collections::HashSet;

use candle_core::{backprop::GradStore, DType, Device, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autoencoder::{train_autoencoder, AeTrainConfig, Autoencoder, AutoencoderDescriptor, ReconLoss};
use crate::error::{param, Error, Result};
use crate::fusion::{fusion_step, FusionLoopState, FusionModels, FusionNet, FusionNetDescriptor, StepOptions, TraceRecord};
use crate::image::RgbImage;
use crate::latent::LatentGrid;
use crate::losses::visual_losses_tensor;
use crate::nn::{scalar, seeded_rng, ParamStore};
use crate::optim::{LossLog, Opt, OptimizerKind};
use crate::probe::ProbeConfig;
use crate::schedule::{build_schedule, subsample_timesteps, NoiseSchedule, TimestepPlan, DEFAULT_BETA_MAX, DEFAULT_BETA_MIN};
use crate::seghead::{seg_loss, SegHead, SegHeadDescriptor, SegState};
use crate::stream::{eval_eps_mse, train_stream_observed, Denoiser, DenoiserDescriptor, LatentPairs, StreamRole, StreamTrainConfig};
use crate::synth::{degrade, generate_dataset, ClassPalette, DegradationRecipe, SceneSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub size: usize,
    /// Seed of the first training scene; test scenes follow the training seeds.
    pub first_seed: u64,
    pub degradation: DegradationRecipe,
    /// Stream-training views per scene: the original, then alternately mirrored copies, each
    /// with a fresh degradation draw. 1 disables augmentation.
    pub augment_copies: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { n_train: 16, n_test: 8, size: 32, first_seed: 1000, degradation: DegradationRecipe::default(), augment_copies: 8 }
    }
}

impl DataConfig {
    /// `(train, test)` synthetic splits.
    pub fn generate(&self) -> Result<(Vec<SceneSample>, Vec<SceneSample>)> {
        let palette = ClassPalette::default();
        let all = generate_dataset(self.n_train + self.n_test, self.size, self.first_seed, &palette, &self.degradation)?;
        let (train, test) = all.split_at(self.n_train);
        Ok((train.to_vec(), test.to_vec()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AeStageConfig {
    pub widths: Vec<usize>,
    pub latent_channels: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Random-crop side for training; 0 uses whole images.
    pub crop: usize,
    pub loss: ReconLoss,
}

impl Default for AeStageConfig {
    fn default() -> Self {
        let d = AutoencoderDescriptor::default();
        let t = AeTrainConfig::default();
        Self { widths: d.widths, latent_channels: d.latent_channels, steps: t.steps, batch_size: t.batch_size, lr: t.lr, crop: t.crop, loss: t.loss }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamStageConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Write a checkpoint every this many epochs (0 disables intermediate checkpoints).
    pub checkpoint_every: usize,
}

impl Default for StreamStageConfig {
    fn default() -> Self {
        Self { optimizer: OptimizerKind::Adam, lr: 1e-3, batch_size: 8, epochs: 150, checkpoint_every: 25 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionStageConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub visual_weight: f64,
    pub seg_weight: f64,
    /// Apply the radiation-mask cap during training and inference.
    pub use_mask: bool,
    /// Feed the streams' clean estimates to the weight-map network.
    pub use_x0: bool,
}

impl Default for FusionStageConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Sgd,
            lr: 1e-3,
            batch_size: 1,
            epochs: 10,
            visual_weight: 1.0,
            seg_weight: 1.0,
            use_mask: true,
            use_x0: true,
        }
    }
}

/// Every knob of a run. `Default` is the desk-scale smoke configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub t_train: usize,
    pub t_infer: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub tau: f64,
    pub n_class: usize,
    pub thermal_classes: Vec<u8>,
    /// `(t, ε)` draws per pair when measuring ε-prediction error.
    pub eval_draws: usize,
    pub data: DataConfig,
    pub autoencoder: AeStageConfig,
    pub psi: StreamStageConfig,
    pub phi: StreamStageConfig,
    pub fusion: FusionStageConfig,
    pub probe: ProbeConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::smoke()
    }
}

impl TrainConfig {
    /// Desk-scale settings: 16 training and 8 test scenes of 32×32.
    pub fn smoke() -> Self {
        Self {
            seed: 0,
            t_train: 1000,
            t_infer: 25,
            beta_min: DEFAULT_BETA_MIN,
            beta_max: DEFAULT_BETA_MAX,
            tau: crate::fusion::DEFAULT_TAU,
            n_class: ClassPalette::default().len(),
            thermal_classes: ClassPalette::default().thermal_classes(),
            eval_draws: 8,
            data: DataConfig::default(),
            autoencoder: AeStageConfig {
                widths: vec![8, 16, 32],
                steps: 1500,
                batch_size: 16,
                lr: 3e-3,
                crop: 16,
                ..AeStageConfig::default()
            },
            psi: StreamStageConfig { epochs: 100, ..StreamStageConfig::default() },
            phi: StreamStageConfig { epochs: 40, ..StreamStageConfig::default() },
            fusion: FusionStageConfig { optimizer: OptimizerKind::Adam, lr: 3e-3, epochs: 12, ..FusionStageConfig::default() },
            probe: ProbeConfig::default(),
        }
    }

    /// Optimiser settings of the full-scale recipe.
    pub fn reference() -> Self {
        let mut c = Self::smoke();
        let psi = StreamTrainConfig::reference(StreamRole::Restoration);
        let phi = StreamTrainConfig::reference(StreamRole::Translation);
        c.psi = StreamStageConfig { optimizer: psi.optimizer, lr: psi.lr, batch_size: psi.batch_size, ..c.psi };
        c.phi = StreamStageConfig { optimizer: phi.optimizer, lr: phi.lr, batch_size: phi.batch_size, ..c.phi };
        c.fusion = FusionStageConfig::default();
        c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.t_infer == 0 || self.t_infer > self.t_train {
            return bad(format!("t_infer must lie in [1, t_train], got {}", self.t_infer));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad(format!("tau must lie in [0, 1], got {}", self.tau));
        }
        for (name, lr, batch) in [
            ("autoencoder", self.autoencoder.lr, self.autoencoder.batch_size),
            ("psi", self.psi.lr, self.psi.batch_size),
            ("phi", self.phi.lr, self.phi.batch_size),
            ("fusion", self.fusion.lr, self.fusion.batch_size),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("{name} learning rate must be positive, got {lr}"));
            }
            if batch == 0 {
                return bad(format!("{name} batch size must be at least 1"));
            }
        }
        if self.thermal_classes.iter().any(|&c| c as usize >= self.n_class) {
            return bad("thermal classes must be valid class indices".into());
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        build_schedule(self.t_train, self.beta_min, self.beta_max)
    }

    pub fn plan(&self) -> Result<TimestepPlan> {
        subsample_timesteps(self.t_train, self.t_infer)
    }

    pub fn ae_descriptor(&self) -> AutoencoderDescriptor {
        AutoencoderDescriptor {
            widths: self.autoencoder.widths.clone(),
            latent_channels: self.autoencoder.latent_channels,
            ..AutoencoderDescriptor::default()
        }
    }

    fn stream_stage(&self, role: StreamRole) -> &StreamStageConfig {
        match role {
            StreamRole::Restoration => &self.psi,
            StreamRole::Translation => &self.phi,
        }
    }

    /// Per-role seed for initialisation and batching.
    pub fn stream_seed(&self, role: StreamRole) -> u64 {
        match role {
            StreamRole::Restoration => self.seed.wrapping_add(101),
            StreamRole::Translation => self.seed.wrapping_add(202),
        }
    }
}

/// Images the shared autoencoder is fitted on: every modality of every training scene.
pub fn autoencoder_images(samples: &[SceneSample]) -> Vec<RgbImage> {
    samples.iter().flat_map(|s| [s.clean_vis.clone(), s.infrared_rgb(), s.degraded_vis.clone()]).collect()
}

pub fn train_shared_autoencoder(samples: &[SceneSample], cfg: &TrainConfig) -> Result<(Autoencoder, LossLog)> {
    let a = &cfg.autoencoder;
    let tc = AeTrainConfig { steps: a.steps, batch_size: a.batch_size, lr: a.lr, seed: cfg.seed.wrapping_add(7), crop: a.crop, loss: a.loss };
    train_autoencoder(&autoencoder_images(samples), cfg.ae_descriptor(), &tc)
}

/// Both pair types, each `(input, target)`.
#[derive(Debug, Clone, Default)]
pub struct StreamData {
    /// Degraded visible → clean visible.
    pub restoration: Vec<(RgbImage, RgbImage)>,
    /// Degraded visible → clean infrared.
    pub translation: Vec<(RgbImage, RgbImage)>,
}

impl StreamData {
    pub fn from_samples(samples: &[SceneSample]) -> Self {
        Self {
            restoration: samples.iter().map(|s| (s.degraded_vis.clone(), s.clean_vis.clone())).collect(),
            translation: samples.iter().map(|s| (s.degraded_vis.clone(), s.infrared_rgb())).collect(),
        }
    }

    /// Training pairs with `copies` views per scene (see [`DataConfig::augment_copies`]).
    pub fn augmented(samples: &[SceneSample], copies: usize, recipe: &DegradationRecipe) -> Result<Self> {
        let mut out = Self::from_samples(samples);
        for s in samples {
            for j in 1..copies {
                let flip = |img: &RgbImage| if j % 2 == 1 { img.flip_horizontal() } else { img.clone() };
                let clean = flip(&s.clean_vis);
                let seed = s.seed.wrapping_mul(0x2545_f491_4f6c_dd1d).wrapping_add(j as u64);
                let input = degrade(&clean, &recipe.kinds, recipe.severity, seed)?;
                out.restoration.push((input.clone(), clean));
                out.translation.push((input, flip(&s.infrared_rgb())));
            }
        }
        Ok(out)
    }

    pub fn pairs(&self, role: StreamRole) -> &[(RgbImage, RgbImage)] {
        match role {
            StreamRole::Restoration => &self.restoration,
            StreamRole::Translation => &self.translation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamReport {
    pub role: StreamRole,
    pub steps: usize,
    pub epochs: usize,
    /// ε-MSE of the initial parameters on the evaluation pairs.
    pub eps_mse_init: f64,
    pub eps_mse_trained: f64,
    pub log: LossLog,
}

impl StreamReport {
    pub fn reduction(&self) -> f64 {
        1.0 - self.eps_mse_trained / self.eps_mse_init
    }
}

#[derive(Debug, Clone)]
pub struct PhaseOne {
    pub psi: Denoiser,
    pub phi: Denoiser,
    pub psi_report: StreamReport,
    pub phi_report: StreamReport,
}

/// Trains one stream. `on_epoch(epoch, model)` fires at every completed epoch.
pub fn train_one_stream(
    role: StreamRole,
    train: &StreamData,
    eval: &StreamData,
    ae: &Autoencoder,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(usize, &Denoiser) -> Result<()>,
) -> Result<(Denoiser, StreamReport)> {
    let pairs = train.pairs(role);
    if pairs.is_empty() {
        return Err(Error::Config(format!("no {} pairs for the {} stream", role.as_str(), role.as_str())));
    }
    let eval_pairs = if eval.pairs(role).is_empty() { pairs } else { eval.pairs(role) };
    let stage = cfg.stream_stage(role);
    let s = cfg.schedule()?;
    let data = LatentPairs::encode(pairs, ae)?;
    let eval_data = LatentPairs::encode(eval_pairs, ae)?;
    let desc = DenoiserDescriptor::for_role(role, ae.descriptor().latent_channels);
    let seed = cfg.stream_seed(role);
    let init = Denoiser::new(desc.clone(), seed)?;
    let eval_seed = cfg.seed ^ 0xe7a1;
    let eps_mse_init = eval_eps_mse(&init, &eval_data, &s, cfg.eval_draws, eval_seed)?;
    let per_epoch = data.len().div_ceil(stage.batch_size);
    let steps = per_epoch * stage.epochs;
    let tc = StreamTrainConfig { optimizer: stage.optimizer, lr: stage.lr, batch_size: stage.batch_size, steps, seed };
    let mut observer = |step: usize, _loss: f64, model: &Denoiser| -> Result<()> {
        if (step + 1) % per_epoch == 0 {
            on_epoch((step + 1) / per_epoch, model)?;
        }
        Ok(())
    };
    let (model, log) = train_stream_observed(&data, desc, &tc, &s, &mut observer)?;
    let eps_mse_trained = eval_eps_mse(&model, &eval_data, &s, cfg.eval_draws, eval_seed)?;
    let report = StreamReport { role, steps, epochs: stage.epochs, eps_mse_init, eps_mse_trained, log };
    Ok((model, report))
}

/// Phase 1: the two streams trained independently on their own pair types.
pub fn phase1_train(
    train: &StreamData,
    eval: &StreamData,
    ae: &Autoencoder,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(StreamRole, usize, &Denoiser) -> Result<()>,
) -> Result<PhaseOne> {
    for role in [StreamRole::Restoration, StreamRole::Translation] {
        if train.pairs(role).is_empty() {
            return Err(Error::Config(format!("dataset has no pairs for the {} stream", role.as_str())));
        }
    }
    let (psi, psi_report) =
        train_one_stream(StreamRole::Restoration, train, eval, ae, cfg, &mut |e, m| on_epoch(StreamRole::Restoration, e, m))?;
    let (phi, phi_report) =
        train_one_stream(StreamRole::Translation, train, eval, ae, cfg, &mut |e, m| on_epoch(StreamRole::Translation, e, m))?;
    Ok(PhaseOne { psi, phi, psi_report, phi_report })
}

/// Settings of one phase-2 run, resolved from a [`TrainConfig`] and a variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTwoSettings {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub tau: f64,
    pub use_mask: bool,
    pub use_x0: bool,
    pub visual_weight: f64,
    pub seg_weight: f64,
    pub seed: u64,
    /// Record per-step gradient probes (costs one extra backward pass per step).
    pub instrument_gate: bool,
}

impl PhaseTwoSettings {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        let f = &cfg.fusion;
        Self {
            optimizer: f.optimizer,
            lr: f.lr,
            batch_size: f.batch_size,
            epochs: f.epochs,
            tau: cfg.tau,
            use_mask: f.use_mask,
            use_x0: f.use_x0,
            visual_weight: f.visual_weight,
            seg_weight: f.seg_weight,
            seed: cfg.seed.wrapping_add(303),
            instrument_gate: false,
        }
    }
}

/// One phase-2 sample update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTwoRecord {
    pub epoch: usize,
    pub sample: usize,
    /// Timestep at which gradients were recorded.
    pub i: usize,
    pub loss_visual: f64,
    pub loss_seg: f64,
    pub loss_total: f64,
    pub w_mean: f64,
    pub w_r_mean: f64,
    pub w_r_inside_mean: Option<f64>,
    pub w_outside_mean: Option<f64>,
    pub grad_norm: f64,
}

/// Gradient norm reaching the fusion and segmentation parameters from one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateProbe {
    pub t: usize,
    pub recorded: bool,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct PhaseTwo {
    pub fusion: FusionNet,
    pub seg: SegHead,
    pub records: Vec<PhaseTwoRecord>,
    /// Mean total loss per epoch.
    pub epoch_loss: Vec<f64>,
    /// Mean `w` per epoch.
    pub epoch_w_mean: Vec<f64>,
    /// Per-update gradient probes, filled when instrumentation is on.
    pub gate: Vec<Vec<GateProbe>>,
    pub frozen_checksums: [String; 3],
}

fn grad_norm(grads: &GradStore, vars: &[Var]) -> Result<f64> {
    let mut total = 0.0;
    for v in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            total += scalar(&g.to_dtype(DType::F64)?.sqr()?.sum_all()?)?;
        }
    }
    Ok(total.sqrt())
}

fn frozen_checksums(ae: &Autoencoder, psi: &Denoiser, phi: &Denoiser) -> Result<[String; 3]> {
    Ok([ae.params().checksum()?, psi.params().checksum()?, phi.params().checksum()?])
}

/// Fails when any trainable tensor is also one of the frozen ones.
fn ensure_disjoint(trainable: &[Var], frozen: &[&ParamStore]) -> Result<()> {
    let ids: HashSet<_> = frozen.iter().flat_map(|p| p.vars()).map(|v| v.as_tensor().id()).collect();
    if trainable.iter().any(|v| ids.contains(&v.as_tensor().id())) {
        return Err(Error::Contract("fusion optimiser would update frozen stream parameters".into()));
    }
    Ok(())
}

/// A phase-2 trainer with its networks and optimiser.
pub struct PhaseTwoTrainer<'a> {
    pub ae: &'a Autoencoder,
    pub psi: &'a Denoiser,
    pub phi: &'a Denoiser,
    pub fusion: FusionNet,
    pub seg: SegHead,
    pub settings: PhaseTwoSettings,
    schedule: NoiseSchedule,
    plan: TimestepPlan,
    thermal: Vec<u8>,
    n_class: usize,
    vars: Vec<Var>,
    opt: Opt,
}

/// Outcome of one sample's reverse loop up to the recorded step.
pub struct GatedPass {
    pub loss: Tensor,
    pub record: PhaseTwoRecord,
    pub probes: Vec<GateProbe>,
}

impl<'a> PhaseTwoTrainer<'a> {
    pub fn new(ae: &'a Autoencoder, psi: &'a Denoiser, phi: &'a Denoiser, cfg: &TrainConfig, settings: PhaseTwoSettings) -> Result<Self> {
        let latent = ae.descriptor().latent_channels;
        let mut fd = FusionNetDescriptor::new(latent);
        fd.use_x0 = settings.use_x0;
        let fusion = FusionNet::new(fd, settings.seed)?;
        let sd = SegHeadDescriptor::new(cfg.n_class, fusion.tap_channels(), ae.descriptor().factor());
        let seg = SegHead::new(sd, settings.seed.wrapping_add(1))?;
        Self::with_models(ae, psi, phi, fusion, seg, cfg, settings)
    }

    pub fn with_models(
        ae: &'a Autoencoder,
        psi: &'a Denoiser,
        phi: &'a Denoiser,
        fusion: FusionNet,
        seg: SegHead,
        cfg: &TrainConfig,
        settings: PhaseTwoSettings,
    ) -> Result<Self> {
        if settings.batch_size == 0 {
            return param("phase-2 batch size must be at least 1");
        }
        let mut vars = fusion.params().vars();
        vars.extend(seg.params().vars());
        ensure_disjoint(&vars, &[ae.params(), psi.params(), phi.params()])?;
        let opt = Opt::new(settings.optimizer, vars.clone(), settings.lr)?;
        let models = FusionModels { ae, psi, phi, fusion: &fusion, seg: &seg };
        models.validate()?;
        Ok(Self {
            ae,
            psi,
            phi,
            fusion,
            seg,
            settings,
            schedule: cfg.schedule()?,
            plan: cfg.plan()?,
            thermal: cfg.thermal_classes.clone(),
            n_class: cfg.n_class,
            vars,
            opt,
        })
    }

    pub fn plan(&self) -> &TimestepPlan {
        &self.plan
    }

    fn models(&self) -> FusionModels<'_> {
        FusionModels { ae: self.ae, psi: self.psi, phi: self.phi, fusion: &self.fusion, seg: &self.seg }
    }

    /// Runs the reverse loop from `T` down to plan position `k`, recording gradients only at
    /// that step, and returns the combined loss there.
    pub fn gated_pass(
        &self,
        sample: &SceneSample,
        cond: &LatentGrid,
        z_start: &LatentGrid,
        z_s: SegState,
        k: usize,
    ) -> Result<GatedPass> {
        if k >= self.plan.len() {
            return param(format!("plan position {k} outside a {}-step plan", self.plan.len()));
        }
        let models = self.models();
        let opts = StepOptions { tau: self.settings.tau, thermal_classes: &self.thermal, use_mask: self.settings.use_mask };
        let mut state = FusionLoopState::start(cond, z_start, z_s, self.plan.steps()[0])?;
        let mut probes = Vec::new();
        for (pos, (t, t_next)) in self.plan.transitions().enumerate().take(k + 1) {
            let record = pos == k;
            let (next, step) = fusion_step(&models, &self.schedule, &state, t_next, &opts, record)?;
            if !record {
                if self.settings.instrument_gate {
                    // Everything a later step can see of this one is the carried state.
                    let carried = (next.z_f.tensor().sum_all()? + next.z_s.tensor().sum_all()?)?;
                    let g = grad_norm(&carried.backward()?, &self.vars)?;
                    probes.push(GateProbe { t, recorded: false, grad_norm: g });
                }
                state = next;
                continue;
            }
            let dec_f = self.ae.decode_tensor(&step.x0_f)?;
            let dec_psi = self.ae.decode_tensor(&step.x0_psi)?.detach();
            let dec_phi = self.ae.decode_tensor(&step.x0_phi)?.detach();
            let visual = visual_losses_tensor(&dec_f, &dec_psi, &dec_phi)?.total;
            let seg = seg_loss(step.z_s_next.tensor(), &[&sample.label])?;
            let loss = ((&visual * self.settings.visual_weight)? + (&seg * self.settings.seg_weight)?)?;
            let trace = TraceRecord::from_step(&step, &next)?;
            let record = PhaseTwoRecord {
                epoch: 0,
                sample: 0,
                i: t,
                loss_visual: scalar(&visual)?,
                loss_seg: scalar(&seg)?,
                loss_total: scalar(&loss)?,
                w_mean: trace.w_mean,
                w_r_mean: trace.w_r_mean,
                w_r_inside_mean: trace.w_r_inside_mean,
                w_outside_mean: trace.w_outside_mean,
                grad_norm: 0.0,
            };
            return Ok(GatedPass { loss, record, probes });
        }
        unreachable!("loop returns at plan position k")
    }

    /// Trains for the configured epochs on `train`.
    pub fn train(mut self, train: &[SceneSample]) -> Result<PhaseTwo> {
        if train.is_empty() {
            return Err(Error::Config("phase 2 needs at least one labelled scene".into()));
        }
        let before = frozen_checksums(self.ae, self.psi, self.phi)?;
        let conds: Vec<LatentGrid> =
            train.iter().map(|s| Ok(self.ae.encode(&s.degraded_vis)?.detach())).collect::<Result<_>>()?;
        let (c, h, w) = self.ae.descriptor().latent_dims(train[0].clean_vis.height(), train[0].clean_vis.width())?;
        let (ih, iw) = train[0].clean_vis.dims();
        let mut rng = seeded_rng(self.settings.seed ^ 0xa16_0001);
        let mut records = Vec::new();
        let mut gate = Vec::new();
        let mut epoch_loss = Vec::new();
        let mut epoch_w_mean = Vec::new();
        let b = self.settings.batch_size;
        for epoch in 0..self.settings.epochs {
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut rng);
            let (mut sum_loss, mut sum_w) = (0.0, 0.0);
            for chunk in order.chunks(b) {
                let mut batch_loss: Option<Tensor> = None;
                let mut pending = Vec::new();
                for &idx in chunk {
                    let z_start = LatentGrid::standard_normal(&mut rng, (1, c, h, w), DType::F32, &Device::Cpu)?;
                    let z_s = SegState::standard_normal(&mut rng, 1, self.n_class, ih, iw)?;
                    let k = rng.random_range(0..self.plan.len());
                    let pass = self.gated_pass(&train[idx], &conds[idx], &z_start, z_s, k)?;
                    let scaled = (pass.loss / chunk.len() as f64)?;
                    batch_loss = Some(match batch_loss {
                        Some(l) => (l + scaled)?,
                        None => scaled,
                    });
                    let mut record = pass.record;
                    record.epoch = epoch;
                    record.sample = idx;
                    pending.push((record, pass.probes));
                }
                let loss = batch_loss.expect("chunk is non-empty");
                let grads = loss.backward()?;
                let norm = grad_norm(&grads, &self.vars)?;
                self.opt.step(&grads)?;
                for (mut record, mut probes) in pending {
                    record.grad_norm = norm;
                    sum_loss += record.loss_total;
                    sum_w += record.w_mean;
                    if self.settings.instrument_gate {
                        probes.push(GateProbe { t: record.i, recorded: true, grad_norm: norm });
                        gate.push(probes);
                    }
                    records.push(record);
                }
            }
            epoch_loss.push(sum_loss / train.len() as f64);
            epoch_w_mean.push(sum_w / train.len() as f64);
            log::debug!("phase 2 epoch {epoch}: loss {:.4}", epoch_loss[epoch]);
        }
        let after = frozen_checksums(self.ae, self.psi, self.phi)?;
        if before != after {
            return Err(Error::Contract("frozen autoencoder or stream parameters changed during phase 2".into()));
        }
        Ok(PhaseTwo { fusion: self.fusion, seg: self.seg, records, epoch_loss, epoch_w_mean, gate, frozen_checksums: after })
    }
}

/// Phase 2: freezes the streams and trains the fusion network and segmentation head.
pub fn phase2_train(
    train: &[SceneSample],
    ae: &Autoencoder,
    psi: &Denoiser,
    phi: &Denoiser,
    cfg: &TrainConfig,
    settings: PhaseTwoSettings,
) -> Result<PhaseTwo> {
    PhaseTwoTrainer::new(ae, psi, phi, cfg, settings)?.train(train)
}
