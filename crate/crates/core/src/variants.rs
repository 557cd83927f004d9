//! The full model and its ablations behind one interface, looked up by name.

use std::collections::BTreeMap;

use crate::autoencoder::Autoencoder;
use crate::error::{Error, Result};
use crate::fusion::{run_fusion_sampling, FusionConfig, FusionModels, FusionNet, TraceRecord};
use crate::image::{RgbImage, SegmentationMap};
use crate::latent::LatentGrid;
use crate::schedule::NoiseSchedule;
use crate::seghead::SegHead;
use crate::stream::{sample_full, Denoiser};
use crate::training::PhaseTwoSettings;

/// Trained networks available at inference time.
#[derive(Clone, Copy)]
pub struct InferenceContext<'a> {
    pub ae: &'a Autoencoder,
    pub psi: &'a Denoiser,
    pub phi: &'a Denoiser,
    pub schedule: &'a NoiseSchedule,
    /// Present for variants with a trained fusion stage.
    pub fusion: Option<(&'a FusionNet, &'a SegHead)>,
}

impl<'a> InferenceContext<'a> {
    fn fusion_models(&self, variant: &str) -> Result<FusionModels<'a>> {
        let (fusion, seg) = self
            .fusion
            .ok_or_else(|| Error::Config(format!("variant {variant} needs trained fusion parameters")))?;
        Ok(FusionModels { ae: self.ae, psi: self.psi, phi: self.phi, fusion, seg })
    }
}

#[derive(Debug, Clone)]
pub struct VariantOutput {
    pub image: RgbImage,
    pub gamma: Option<SegmentationMap>,
    pub trace: Vec<TraceRecord>,
}

pub trait FusionVariant: Send + Sync {
    fn name(&self) -> &'static str;

    fn description(&self) -> &'static str;

    /// Phase-2 settings for this variant, or `None` if it has no trainable fusion stage.
    fn phase_two(&self, base: &PhaseTwoSettings) -> Option<PhaseTwoSettings>;

    fn infer(&self, ctx: &InferenceContext<'_>, input: &RgbImage, z_start: &LatentGrid, cfg: &FusionConfig) -> Result<VariantOutput>;
}

fn fused(ctx: &InferenceContext<'_>, name: &str, input: &RgbImage, z_start: &LatentGrid, cfg: &FusionConfig) -> Result<VariantOutput> {
    let out = run_fusion_sampling(input, z_start, &ctx.fusion_models(name)?, ctx.schedule, cfg)?;
    Ok(VariantOutput { image: out.image, gamma: Some(out.gamma), trace: out.trace })
}

/// Per-step noise fusion with every input, the segmentation loss and the radiation mask.
pub struct Full;

impl FusionVariant for Full {
    fn name(&self) -> &'static str {
        "full"
    }

    fn description(&self) -> &'static str {
        "noise fusion with clean estimates, segmentation head and radiation mask"
    }

    fn phase_two(&self, base: &PhaseTwoSettings) -> Option<PhaseTwoSettings> {
        Some(PhaseTwoSettings { use_x0: true, ..base.clone() })
    }

    fn infer(&self, ctx: &InferenceContext<'_>, input: &RgbImage, z: &LatentGrid, cfg: &FusionConfig) -> Result<VariantOutput> {
        fused(ctx, self.name(), input, z, cfg)
    }
}

/// Model I: the weight-map network does not see the streams' clean estimates.
pub struct NoCleanEstimates;

impl FusionVariant for NoCleanEstimates {
    fn name(&self) -> &'static str {
        "model-i"
    }

    fn description(&self) -> &'static str {
        "weight map computed without the single-step clean estimates"
    }

    fn phase_two(&self, base: &PhaseTwoSettings) -> Option<PhaseTwoSettings> {
        Some(PhaseTwoSettings { use_x0: false, ..base.clone() })
    }

    fn infer(&self, ctx: &InferenceContext<'_>, input: &RgbImage, z: &LatentGrid, cfg: &FusionConfig) -> Result<VariantOutput> {
        fused(ctx, self.name(), input, z, cfg)
    }
}

/// Model II: trained without the segmentation loss; the head and mask still run.
pub struct NoSegmentationLoss;

impl FusionVariant for NoSegmentationLoss {
    fn name(&self) -> &'static str {
        "model-ii"
    }

    fn description(&self) -> &'static str {
        "fusion trained without the segmentation loss"
    }

    fn phase_two(&self, base: &PhaseTwoSettings) -> Option<PhaseTwoSettings> {
        Some(PhaseTwoSettings { use_x0: true, seg_weight: 0.0, ..base.clone() })
    }

    fn infer(&self, ctx: &InferenceContext<'_>, input: &RgbImage, z: &LatentGrid, cfg: &FusionConfig) -> Result<VariantOutput> {
        fused(ctx, self.name(), input, z, cfg)
    }
}

/// Model III: both streams sampled to completion, decoded outputs averaged.
pub struct OutputAverage;

impl FusionVariant for OutputAverage {
    fn name(&self) -> &'static str {
        "model-iii"
    }

    fn description(&self) -> &'static str {
        "average of the two streams' decoded samples"
    }

    fn phase_two(&self, _base: &PhaseTwoSettings) -> Option<PhaseTwoSettings> {
        None
    }

    fn infer(&self, ctx: &InferenceContext<'_>, input: &RgbImage, z: &LatentGrid, cfg: &FusionConfig) -> Result<VariantOutput> {
        let cond = ctx.ae.encode(input)?;
        let a = sample_full(&cond, z, ctx.psi, ctx.schedule, &cfg.plan, ctx.ae)?;
        let b = sample_full(&cond, z, ctx.phi, ctx.schedule, &cfg.plan, ctx.ae)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| 0.5 * (x + y)).collect();
        let (h, w) = a.dims();
        Ok(VariantOutput { image: RgbImage::from_clamped(h, w, data)?, gamma: None, trace: Vec::new() })
    }
}

/// Model IV: the restoration stream alone.
pub struct RestorationOnly;

impl FusionVariant for RestorationOnly {
    fn name(&self) -> &'static str {
        "model-iv"
    }

    fn description(&self) -> &'static str {
        "restoration stream only"
    }

    fn phase_two(&self, _base: &PhaseTwoSettings) -> Option<PhaseTwoSettings> {
        None
    }

    fn infer(&self, ctx: &InferenceContext<'_>, input: &RgbImage, z: &LatentGrid, cfg: &FusionConfig) -> Result<VariantOutput> {
        let cond = ctx.ae.encode(input)?;
        let image = sample_full(&cond, z, ctx.psi, ctx.schedule, &cfg.plan, ctx.ae)?;
        Ok(VariantOutput { image, gamma: None, trace: Vec::new() })
    }
}

pub struct VariantRegistry {
    entries: BTreeMap<&'static str, Box<dyn FusionVariant>>,
}

impl Default for VariantRegistry {
    fn default() -> Self {
        let mut r = Self { entries: BTreeMap::new() };
        r.register(Box::new(Full));
        r.register(Box::new(NoCleanEstimates));
        r.register(Box::new(NoSegmentationLoss));
        r.register(Box::new(OutputAverage));
        r.register(Box::new(RestorationOnly));
        r
    }
}

impl VariantRegistry {
    pub fn register(&mut self, v: Box<dyn FusionVariant>) {
        self.entries.insert(v.name(), v);
    }

    pub fn get(&self, name: &str) -> Result<&dyn FusionVariant> {
        self.entries.get(name).map(|b| b.as_ref()).ok_or_else(|| {
            Error::Config(format!("unknown variant {name:?}; known: {}", self.names().collect::<Vec<_>>().join(", ")))
        })
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.entries.keys().copied()
    }

    /// Maps the ablation number 1–4 to its variant name.
    pub fn ablation_name(number: u8) -> Result<&'static str> {
        match number {
            1 => Ok("model-i"),
            2 => Ok("model-ii"),
            3 => Ok("model-iii"),
            4 => Ok("model-iv"),
            n => Err(Error::Config(format!("ablation variant must be 1-4, got {n}"))),
        }
    }
}
