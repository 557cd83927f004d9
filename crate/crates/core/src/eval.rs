//! Evaluation of fused outputs, and the ablation and τ-sweep harnesses built on it.
//!
//! Fusion metrics use the clean visible and infrared images as the two sources. Semantic
//! content is measured with a [`PixelProbe`] fitted per image source on the training split
//! and scored on the test split.

use serde::{Deserialize, Serialize};

use crate::autoencoder::Autoencoder;
use crate::error::Result;
use crate::fusion::{initial_noise, FusionConfig, FusionNet, TraceRecord};
use crate::image::{RgbImage, SegmentationMap};
use crate::metrics::{fusion_metrics, pooled_miou, psnr, MetricReport};
use crate::probe::PixelProbe;
use crate::schedule::NoiseSchedule;
use crate::seghead::SegHead;
use crate::stream::Denoiser;
use crate::synth::SceneSample;
use crate::training::{phase2_train, PhaseTwo, PhaseTwoSettings, TrainConfig};
use crate::variants::{FusionVariant, InferenceContext};

/// Seed of the starting noise for one scene.
pub fn sample_seed(run_seed: u64, sample: &SceneSample) -> u64 {
    run_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(sample.seed)
}

pub fn fusion_config(cfg: &TrainConfig, tau: f64, use_mask: bool) -> Result<FusionConfig> {
    Ok(FusionConfig { tau, thermal_classes: cfg.thermal_classes.clone(), plan: cfg.plan()?, seed: cfg.seed, use_mask })
}

/// One fused image per scene.
#[derive(Debug, Clone)]
pub struct FusedSet {
    pub images: Vec<RgbImage>,
    pub gammas: Vec<Option<SegmentationMap>>,
    pub traces: Vec<Vec<TraceRecord>>,
}

pub fn fuse_samples(
    variant: &dyn FusionVariant,
    ctx: &InferenceContext<'_>,
    samples: &[SceneSample],
    cfg: &FusionConfig,
) -> Result<FusedSet> {
    let mut set = FusedSet { images: Vec::new(), gammas: Vec::new(), traces: Vec::new() };
    for s in samples {
        let (h, w) = s.degraded_vis.dims();
        let seed = sample_seed(cfg.seed, s);
        let z = initial_noise(ctx.ae, h, w, seed)?;
        let out = variant.infer(ctx, &s.degraded_vis, &z, &FusionConfig { seed, ..cfg.clone() })?;
        set.images.push(out.image);
        set.gammas.push(out.gamma);
        set.traces.push(out.trace);
    }
    Ok(set)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEval {
    pub name: String,
    pub metrics: MetricReport,
    pub psnr_vs_clean: f64,
}

/// Scores of one image source on the test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceEval {
    pub source: String,
    pub mean: MetricReport,
    /// Luminance PSNR against the clean visible image.
    pub psnr_vs_clean: f64,
    /// Probe mIoU over the thermal classes.
    pub probe_miou_thermal: f64,
    /// Probe mIoU over all classes.
    pub probe_miou: f64,
    /// mIoU of the segmentation head's own map over the thermal classes, when it has one.
    pub head_miou_thermal: Option<f64>,
    pub per_image: Vec<ImageEval>,
}

/// Scores `test_images` (with `train_images` used to fit the probe).
pub fn evaluate_source(
    source: &str,
    train_images: &[RgbImage],
    train: &[SceneSample],
    test_images: &[RgbImage],
    test: &[SceneSample],
    test_gammas: Option<&[Option<SegmentationMap>]>,
    cfg: &TrainConfig,
) -> Result<SourceEval> {
    let mut per_image = Vec::with_capacity(test.len());
    for (img, s) in test_images.iter().zip(test) {
        per_image.push(ImageEval {
            name: s.name.clone(),
            metrics: fusion_metrics(img, &s.clean_vis, &s.infrared_rgb())?,
            psnr_vs_clean: psnr(img, &s.clean_vis)?,
        });
    }
    let reports: Vec<MetricReport> = per_image.iter().map(|e| e.metrics).collect();
    let mean = MetricReport::mean(&reports).unwrap_or(MetricReport { en: 0.0, ssim: 0.0, mi: 0.0, qabf: 0.0, psnr: 0.0 });
    let psnr_vs_clean = per_image.iter().map(|e| e.psnr_vs_clean).sum::<f64>() / per_image.len().max(1) as f64;

    let imgs: Vec<&RgbImage> = train_images.iter().collect();
    let labels: Vec<&SegmentationMap> = train.iter().map(|s| &s.label).collect();
    let probe = PixelProbe::fit(&imgs, &labels, cfg.n_class, &cfg.probe)?;
    let pairs: Vec<(SegmentationMap, SegmentationMap)> =
        test_images.iter().zip(test).map(|(img, s)| Ok((probe.predict(img)?, s.label.clone()))).collect::<Result<_>>()?;
    let all: Vec<u8> = (0..cfg.n_class as u8).collect();
    let probe_miou_thermal = pooled_miou(&pairs, cfg.n_class, &cfg.thermal_classes)?;
    let probe_miou = pooled_miou(&pairs, cfg.n_class, &all)?;

    let head_miou_thermal = match test_gammas {
        Some(g) if g.iter().all(Option::is_some) && !g.is_empty() => {
            let pairs: Vec<_> = g.iter().zip(test).map(|(m, s)| (m.clone().expect("checked"), s.label.clone())).collect();
            Some(pooled_miou(&pairs, cfg.n_class, &cfg.thermal_classes)?)
        }
        _ => None,
    };
    Ok(SourceEval { source: source.into(), mean, psnr_vs_clean, probe_miou_thermal, probe_miou, head_miou_thermal, per_image })
}

/// The degraded input itself, scored like a fused output.
pub fn degraded_baseline(train: &[SceneSample], test: &[SceneSample], cfg: &TrainConfig) -> Result<SourceEval> {
    let tr: Vec<RgbImage> = train.iter().map(|s| s.degraded_vis.clone()).collect();
    let te: Vec<RgbImage> = test.iter().map(|s| s.degraded_vis.clone()).collect();
    evaluate_source("degraded", &tr, train, &te, test, None, cfg)
}

/// Frozen phase-1 networks shared by every variant.
#[derive(Clone, Copy)]
pub struct StreamArtifacts<'a> {
    pub ae: &'a Autoencoder,
    pub psi: &'a Denoiser,
    pub phi: &'a Denoiser,
    pub schedule: &'a NoiseSchedule,
}

/// A variant trained (if it has a fusion stage) and evaluated.
#[derive(Debug, Clone)]
pub struct VariantRun {
    pub variant: String,
    pub tau: f64,
    pub phase_two: Option<PhaseTwo>,
    pub train_set: FusedSet,
    pub test_set: FusedSet,
    pub eval: SourceEval,
}

/// Trains the variant's fusion stage (if any) and evaluates it.
pub fn run_variant(
    variant: &dyn FusionVariant,
    art: StreamArtifacts<'_>,
    train: &[SceneSample],
    test: &[SceneSample],
    cfg: &TrainConfig,
    base: &PhaseTwoSettings,
) -> Result<VariantRun> {
    let phase_two = match variant.phase_two(base) {
        Some(settings) => Some(phase2_train(train, art.ae, art.psi, art.phi, cfg, settings)?),
        None => None,
    };
    let models: Option<(&FusionNet, &SegHead)> = phase_two.as_ref().map(|p| (&p.fusion, &p.seg));
    let ctx = InferenceContext { ae: art.ae, psi: art.psi, phi: art.phi, schedule: art.schedule, fusion: models };
    let fcfg = fusion_config(cfg, base.tau, base.use_mask)?;
    let train_set = fuse_samples(variant, &ctx, train, &fcfg)?;
    let test_set = fuse_samples(variant, &ctx, test, &fcfg)?;
    let eval = evaluate_source(variant.name(), &train_set.images, train, &test_set.images, test, Some(&test_set.gammas), cfg)?;
    Ok(VariantRun { variant: variant.name().into(), tau: base.tau, phase_two, train_set, test_set, eval })
}

/// One row of the τ sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub tau: f64,
    pub mean: MetricReport,
    pub psnr_vs_clean: f64,
    pub probe_miou_thermal: f64,
    pub head_miou_thermal: Option<f64>,
    /// Mean `w_r` inside the mask at the final step, averaged over test scenes.
    pub final_w_r_inside: Option<f64>,
}

impl SweepRow {
    pub fn from_run(run: &VariantRun) -> Self {
        let inside: Vec<f64> =
            run.test_set.traces.iter().filter_map(|t| t.last().and_then(|r| r.w_r_inside_mean)).collect();
        Self {
            tau: run.tau,
            mean: run.eval.mean,
            psnr_vs_clean: run.eval.psnr_vs_clean,
            probe_miou_thermal: run.eval.probe_miou_thermal,
            head_miou_thermal: run.eval.head_miou_thermal,
            final_w_r_inside: (!inside.is_empty()).then(|| inside.iter().sum::<f64>() / inside.len() as f64),
        }
    }
}

/// Trains and evaluates the full model once per τ.
pub fn sweep_tau(
    values: &[f64],
    variant: &dyn FusionVariant,
    art: StreamArtifacts<'_>,
    train: &[SceneSample],
    test: &[SceneSample],
    cfg: &TrainConfig,
    base: &PhaseTwoSettings,
) -> Result<Vec<SweepRow>> {
    values
        .iter()
        .map(|&tau| {
            let settings = PhaseTwoSettings { tau, ..base.clone() };
            Ok(SweepRow::from_run(&run_variant(variant, art, train, test, cfg, &settings)?))
        })
        .collect()
}

/// Plain-text table of a sweep.
pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut out = String::from("tau\tEN\tSSIM\tMI\tQabf\tPSNR\tPSNR_vis\tmIoU_probe\tmIoU_head\n");
    for r in rows {
        let head = r.head_miou_thermal.map_or("-".to_string(), |v| format!("{v:.4}"));
        out.push_str(&format!(
            "{:.2}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.2}\t{:.2}\t{:.4}\t{head}\n",
            r.tau, r.mean.en, r.mean.ssim, r.mean.mi, r.mean.qabf, r.mean.psnr, r.psnr_vs_clean, r.probe_miou_thermal
        ));
    }
    out
}
