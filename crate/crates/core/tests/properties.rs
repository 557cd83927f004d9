use candle_core::{DType, Device, Tensor};
use proptest::prelude::*;

use noisefuse::fusion::{fuse_noise, modulate_weights};
use noisefuse::image::{RgbImage, SegmentationMap};
use noisefuse::latent::LatentGrid;
use noisefuse::losses::visual_losses;
use noisefuse::metrics::{entropy, fusion_metrics, mutual_information, psnr, ssim};
use noisefuse::schedule::{build_schedule, estimate_x0, forward_sample, subsample_timesteps};
use noisefuse::seghead::{radiation_mask, seg_loss, SegState};
use noisefuse::synth::{degrade, synthesize_scene, ClassPalette};

fn grid(values: Vec<f64>, dims: (usize, usize, usize, usize)) -> LatentGrid {
    LatentGrid::new(Tensor::from_vec(values, dims, &Device::Cpu).unwrap()).unwrap()
}

fn image(h: usize, w: usize, values: Vec<f32>) -> RgbImage {
    RgbImage::new(h, w, values).unwrap()
}

fn pixels(n: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(0f32..=1.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn schedule_invariants(t in 1usize..1500, lo in 1e-5f64..0.05, span in 0f64..0.5) {
        let hi = (lo + span).min(0.999);
        let s = build_schedule(t, lo, hi).unwrap();
        let betas = s.betas();
        prop_assert!(betas.iter().all(|&b| b > 0.0 && b < 1.0));
        prop_assert!(betas.windows(2).all(|w| w[0] <= w[1]));
        for (a, b) in s.alphas().iter().zip(betas) {
            prop_assert_eq!(*a, 1.0 - b);
        }
        prop_assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        prop_assert!(*s.alpha_bars().last().unwrap() > 0.0);
    }

    #[test]
    fn plan_invariants(t in 1usize..2000, frac in 0f64..1.0) {
        let n = 1 + ((t - 1) as f64 * frac) as usize;
        let plan = subsample_timesteps(t, n).unwrap();
        prop_assert_eq!(plan.len(), n);
        prop_assert_eq!(plan.steps()[0], t);
        prop_assert!(plan.steps().iter().all(|&k| (1..=t).contains(&k)));
        prop_assert!(plan.steps().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn forward_then_estimate_recovers_z0(
        z0 in prop::collection::vec(-3f64..3.0, 32),
        eps in prop::collection::vec(-3f64..3.0, 32),
        t in 1usize..=1000,
    ) {
        let s = build_schedule(1000, 1e-4, 0.02).unwrap();
        let z0g = grid(z0.clone(), (1, 2, 4, 4));
        let e = grid(eps, (1, 2, 4, 4));
        let back = estimate_x0(&forward_sample(&z0g, t, &e, &s).unwrap(), &e, t, &s).unwrap();
        for (a, b) in back.to_vec().unwrap().iter().zip(&z0) {
            prop_assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn fused_noise_stays_in_hull(
        a in prop::collection::vec(-4f32..4.0, 16),
        b in prop::collection::vec(-4f32..4.0, 16),
        w in prop::collection::vec(0f32..=1.0, 16),
    ) {
        let g = |v: &Vec<f32>| LatentGrid::new(Tensor::from_vec(v.clone(), (1, 1, 4, 4), &Device::Cpu).unwrap()).unwrap();
        let f = fuse_noise(&g(&a), &g(&b), &g(&w)).unwrap().to_vec().unwrap();
        for i in 0..16 {
            let (lo, hi) = (a[i].min(b[i]) as f64, a[i].max(b[i]) as f64);
            prop_assert!(lo <= f[i] && f[i] <= hi);
        }
        let same = fuse_noise(&g(&a), &g(&a), &g(&w)).unwrap().to_vec().unwrap();
        prop_assert_eq!(same, g(&a).to_vec().unwrap());
        let ones = fuse_noise(&g(&a), &g(&b), &g(&vec![1.0; 16])).unwrap().to_vec().unwrap();
        prop_assert_eq!(ones, g(&a).to_vec().unwrap());
    }

    #[test]
    fn modulation_caps_inside_and_preserves_outside(
        w in prop::collection::vec(0f32..=1.0, 2 * 16),
        labels in prop::collection::vec(0u8..4, 16),
        tau in 0f64..=1.0,
    ) {
        let wg = LatentGrid::new(Tensor::from_vec(w.clone(), (1, 2, 4, 4), &Device::Cpu).unwrap()).unwrap();
        let gamma = SegmentationMap::new(4, 4, labels).unwrap();
        let mask = radiation_mask(&gamma, &[1, 2]);
        let wr = modulate_weights(&wg, &mask, tau).unwrap().to_vec().unwrap();
        for c in 0..2 {
            for p in 0..16 {
                let i = c * 16 + p;
                if mask.data()[p] == 1 {
                    prop_assert!(wr[i] <= tau, "{} > {tau}", wr[i]);
                } else {
                    prop_assert_eq!(wr[i], w[i] as f64);
                }
            }
        }
    }

    #[test]
    fn argmax_ignores_per_pixel_offsets(
        logits in prop::collection::vec(-5f32..5.0, 4 * 9),
        offsets in prop::collection::vec(-50f32..50.0, 9),
    ) {
        let base = Tensor::from_vec(logits, (1, 4, 3, 3), &Device::Cpu).unwrap();
        let shift = Tensor::from_vec(offsets, (1, 1, 3, 3), &Device::Cpu).unwrap();
        let shifted = base.broadcast_add(&shift).unwrap();
        let a = SegState::new(base).unwrap().argmax().unwrap();
        let b = SegState::new(shifted).unwrap().argmax().unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn mask_is_idempotent(labels in prop::collection::vec(0u8..4, 25), thermal in prop::collection::btree_set(0u8..4, 0..4)) {
        let thermal: Vec<u8> = thermal.into_iter().collect();
        let gamma = SegmentationMap::new(5, 5, labels.clone()).unwrap();
        let m = radiation_mask(&gamma, &thermal);
        // keep thermal pixels, send the rest to the first non-thermal class (or leave them)
        let filler = (0u8..4).find(|c| !thermal.contains(c));
        let kept: Vec<u8> = labels
            .iter()
            .zip(m.data())
            .map(|(&l, &on)| if on == 1 { l } else { filler.unwrap_or(l) })
            .collect();
        let again = radiation_mask(&SegmentationMap::new(5, 5, kept).unwrap(), &thermal);
        prop_assert_eq!(again, m.clone());
        for (&l, &on) in labels.iter().zip(m.data()) {
            prop_assert_eq!(on == 1, thermal.contains(&l));
        }
    }

    #[test]
    fn seg_loss_positive_and_ln_k_at_uniform(
        logits in prop::collection::vec(-3f32..3.0, 4 * 16),
        labels in prop::collection::vec(0u8..4, 16),
        c in -2f32..2.0,
    ) {
        let label = SegmentationMap::new(4, 4, labels).unwrap();
        let t = Tensor::from_vec(logits, (1, 4, 4, 4), &Device::Cpu).unwrap();
        let l = seg_loss(&t, &[&label]).unwrap().to_scalar::<f32>().unwrap();
        prop_assert!(l > 0.0);
        let flat = Tensor::full(c, (1, 4, 4, 4), &Device::Cpu).unwrap();
        let u = seg_loss(&flat, &[&label]).unwrap().to_scalar::<f32>().unwrap();
        prop_assert!((u as f64 - 4f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn metrics_are_symmetric_in_sources(f in pixels(3 * 64), a in pixels(3 * 64), b in pixels(3 * 64)) {
        let (f, a, b) = (image(8, 8, f), image(8, 8, a), image(8, 8, b));
        let ab = fusion_metrics(&f, &a, &b).unwrap();
        let ba = fusion_metrics(&f, &b, &a).unwrap();
        prop_assert_eq!(ab.en, ba.en);
        prop_assert!((ab.mi - ba.mi).abs() < 1e-12);
        prop_assert!((ab.ssim - ba.ssim).abs() < 1e-12);
        prop_assert!((ab.psnr - ba.psnr).abs() < 1e-12);
        prop_assert!(ab.en >= 0.0 && ab.mi >= 0.0);
        prop_assert!((-1.0..=1.0).contains(&ab.ssim));
        prop_assert!((0.0..=1.0).contains(&ab.qabf));
        prop_assert!(ab.psnr >= 0.0);
        prop_assert!(mutual_information(&f, &f).unwrap() <= entropy(&f) + 1e-12);
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degradations_stay_in_range(
        data in pixels(3 * 16 * 16),
        severity in 0f32..=1.0,
        seed in any::<u64>(),
        kinds in prop::sample::subsequence(vec!["low_light", "haze", "noise"], 0..=3),
    ) {
        let img = image(16, 16, data);
        let out = degrade(&img, &kinds, severity, seed).unwrap();
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(&out, &degrade(&img, &kinds, severity, seed).unwrap());
        prop_assert_eq!(degrade(&img, &kinds, 0.0, seed).unwrap(), img);
    }

    #[test]
    fn scenes_have_thermal_contrast(seed in any::<u64>(), k in 4usize..=12) {
        let palette = ClassPalette::default();
        let thermal = palette.thermal_classes();
        let (vis, ir, label) = synthesize_scene(seed, 4 * k, &palette).unwrap();
        prop_assert_eq!((vis.dims(), ir.dims()), (label.dims(), label.dims()));
        let (mut hot, mut cold) = (f32::INFINITY, f32::NEG_INFINITY);
        for (&l, &v) in label.labels().iter().zip(ir.data()) {
            prop_assert!((l as usize) < palette.len());
            if thermal.contains(&l) { hot = hot.min(v) } else { cold = cold.max(v) }
        }
        if hot.is_finite() && cold.is_finite() {
            prop_assert!(hot - cold >= 0.3, "thermal {hot} vs background {cold}");
        }
        prop_assert_eq!(synthesize_scene(seed, 4 * k, &palette).unwrap(), (vis, ir, label));
    }

    #[test]
    fn visual_losses_nonnegative_zero_at_target_and_symmetric(
        m in pixels(3 * 64), a in pixels(3 * 64), b in pixels(3 * 64),
    ) {
        let (m, a, b) = (image(8, 8, m), image(8, 8, a), image(8, 8, b));
        let ab = visual_losses(&m, &a, &b).unwrap();
        let ba = visual_losses(&m, &b, &a).unwrap();
        prop_assert!(ab.contrast >= 0.0 && ab.texture >= 0.0 && ab.color >= 0.0);
        prop_assert!((ab.contrast - ba.contrast).abs() < 1e-12);
        prop_assert!((ab.texture - ba.texture).abs() < 1e-12);
        let own = visual_losses(&a, &a, &a).unwrap();
        prop_assert!(own.total.abs() < 1e-12);
    }

    #[test]
    fn flip_is_an_involution(data in pixels(3 * 12)) {
        let img = image(3, 4, data);
        prop_assert_eq!(img.flip_horizontal().flip_horizontal(), img.clone());
        prop_assert_eq!(img.flip_horizontal().get(1, 2, 0), img.get(1, 2, 3));
    }

    #[test]
    fn added_noise_lowers_psnr(data in prop::collection::vec(0.2f32..0.8, 3 * 256), seed in any::<u64>()) {
        let clean = image(16, 16, data);
        let noisy = degrade(&clean, &["noise"], 0.8, seed).unwrap();
        prop_assert!(psnr(&noisy, &clean).unwrap() < psnr(&clean, &clean).unwrap());
    }
}

#[test]
fn single_precision_latents_round_trip() {
    let s = build_schedule(1000, 1e-4, 0.02).unwrap();
    let z = LatentGrid::filled((1, 4, 8, 8), 0.5, DType::F32).unwrap();
    let e = LatentGrid::filled((1, 4, 8, 8), -0.25, DType::F32).unwrap();
    let back = estimate_x0(&forward_sample(&z, 10, &e, &s).unwrap(), &e, 10, &s).unwrap();
    assert!(back.max_abs_diff(&z).unwrap() < 1e-5);
}
