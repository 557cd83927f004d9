//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and exits non-zero
//! when any criterion fails.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor, Var};
use noisefuse::autoencoder::{Autoencoder, AutoencoderDescriptor};
use noisefuse::eval::{degraded_baseline, run_variant, sweep_table, sweep_tau, StreamArtifacts, SweepRow, VariantRun};
use noisefuse::fusion::{
    fusion_step, initial_noise, initial_seg_state, FusionLoopState, FusionModels, FusionNet, FusionNetDescriptor, StepOptions,
};
use noisefuse::image::{RgbImage, SegmentationMap};
use noisefuse::latent::LatentGrid;
use noisefuse::losses::visual_losses_tensor;
use noisefuse::metrics::{entropy, miou, mutual_information, qabf, ssim};
use noisefuse::schedule::{
    build_schedule, estimate_x0, forward_sample, subsample_timesteps, NoiseSchedule,
};
use noisefuse::seghead::{seg_loss, SegHead, SegHeadDescriptor};
use noisefuse::stream::{reverse_step, sample_latent, Denoiser, DenoiserDescriptor, DiffusionStreamState, StreamRole};
use noisefuse::synth::SceneSample;
use noisefuse::training::{phase1_train, train_shared_autoencoder, PhaseOne, PhaseTwoSettings, StreamData, TrainConfig};
use noisefuse::variants::VariantRegistry;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

struct Outcome {
    id: usize,
    name: &'static str,
    elapsed: Duration,
    limit: Option<Duration>,
    result: Check,
}

impl Outcome {
    fn passed(&self) -> bool {
        self.result.is_ok() && self.limit.is_none_or(|l| self.elapsed <= l)
    }

    fn line(&self) -> String {
        let status = if self.passed() { "PASS" } else { "FAIL" };
        let limit = self.limit.map_or(String::new(), |l| format!(" (limit {}s)", l.as_secs()));
        let detail = match &self.result {
            Ok(d) => d.clone(),
            Err(e) => e.clone(),
        };
        format!("criterion {} [{status}] {}: {:.1}s{limit}; {detail}", self.id, self.name, self.elapsed.as_secs_f64())
    }
}

fn timed(id: usize, name: &'static str, limit: Option<u64>, f: impl FnOnce() -> Check) -> Outcome {
    let start = Instant::now();
    let result = f();
    let o = Outcome { id, name, elapsed: start.elapsed(), limit: limit.map(Duration::from_secs), result };
    println!("{}", o.line());
    o
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn grid(rng: &mut ChaCha8Rng, dims: (usize, usize, usize, usize), dtype: DType) -> LatentGrid {
    LatentGrid::standard_normal(rng, dims, dtype, &Device::Cpu).unwrap()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let den: f64 = b.iter().map(|y| y.abs()).fold(0.0, f64::max).max(1e-300);
    num / den
}

// Criterion 1.

fn diffusion_algebra() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut cases = 0usize;

    let mut worst_round_trip = 0.0f64;
    for _ in 0..500 {
        let t_train = rng.random_range(10..=1000);
        let lo = rng.random_range(1e-5..5e-3);
        let s = build_schedule(t_train, lo, rng.random_range(lo..0.05)).map_err(err)?;
        let t = rng.random_range(1..=t_train);
        let z0 = grid(&mut rng, (1, 4, 4, 4), DType::F64);
        let eps = grid(&mut rng, (1, 4, 4, 4), DType::F64);
        let z_t = forward_sample(&z0, t, &eps, &s).map_err(err)?;
        let back = estimate_x0(&z_t, &eps, t, &s).map_err(err)?;
        let r = rel_err(&back.to_vec().map_err(err)?, &z0.to_vec().map_err(err)?);
        worst_round_trip = worst_round_trip.max(r);
        cases += 1;
    }
    ensure(worst_round_trip <= 1e-6, || format!("round trip relative error {worst_round_trip:e}"))?;

    for _ in 0..300 {
        let t_train = rng.random_range(2..=2000);
        let lo = rng.random_range(1e-6..1e-2);
        let s = build_schedule(t_train, lo, rng.random_range(lo..0.1)).map_err(err)?;
        let ab = s.alpha_bars();
        ensure(ab.windows(2).all(|w| w[1] < w[0]) && ab.iter().all(|&v| v > 0.0 && v < 1.0), || {
            format!("alpha-bar not strictly decreasing in (0,1) for T={t_train}")
        })?;
        cases += 1;
    }

    let s = build_schedule(1000, 1e-4, 0.02).map_err(err)?;
    let psi = Denoiser::new(DenoiserDescriptor::for_role(StreamRole::Restoration, 4), 3).map_err(err)?;
    let mut worst_consistency = 0.0f64;
    for _ in 0..110 {
        let n = rng.random_range(2..=6);
        let plan = subsample_timesteps(1000, n).map_err(err)?;
        let cond = grid(&mut rng, (1, 4, 4, 4), DType::F32);
        let z = grid(&mut rng, (1, 4, 4, 4), DType::F32);
        let a = sample_latent(&cond, &z, &psi, &s, &plan).map_err(err)?;
        let b = sample_latent(&cond, &z, &psi, &s, &plan).map_err(err)?;
        ensure(a.to_vec().map_err(err)? == b.to_vec().map_err(err)?, || "DDIM chain is not deterministic".into())?;
        cases += 1;

        // z_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps, recomputed in f64 from the emitted estimate.
        let mut state = DiffusionStreamState::start(z, cond, plan.steps()[0]);
        for (t, t_next) in plan.transitions() {
            let z_t = state.z_t.to_vec().map_err(err)?;
            state = reverse_step(&state, &psi, &s, t_next).map_err(err)?;
            let x0 = state.x0_hat.as_ref().expect("stepped state").to_vec().map_err(err)?;
            let eps = state.eps.as_ref().expect("stepped state").to_vec().map_err(err)?;
            let ab = s.alpha_bars()[t - 1];
            let rebuilt: Vec<f64> = x0.iter().zip(&eps).map(|(x, e)| ab.sqrt() * x + (1.0 - ab).sqrt() * e).collect();
            worst_consistency = worst_consistency.max(rel_err(&rebuilt, &z_t));
        }
        cases += 1;
    }
    ensure(worst_consistency <= 1e-5, || format!("state self-consistency residual {worst_consistency:e}"))?;
    ensure(cases >= 1000, || format!("only {cases} cases"))?;
    Ok(format!("{cases} cases; round-trip {worst_round_trip:.1e}, consistency {worst_consistency:.1e}"))
}

// Criterion 2.

struct Untrained {
    ae: Autoencoder,
    psi: Denoiser,
    phi: Denoiser,
    fusion: FusionNet,
    seg: SegHead,
}

impl Untrained {
    fn new(seed: u64, n_class: usize) -> Self {
        let ae = Autoencoder::new(AutoencoderDescriptor { widths: vec![4, 8, 8], ..AutoencoderDescriptor::default() }, seed)
            .unwrap();
        let c = ae.descriptor().latent_channels;
        let psi = Denoiser::new(DenoiserDescriptor::for_role(StreamRole::Restoration, c), seed + 1).unwrap();
        let phi = Denoiser::new(DenoiserDescriptor::for_role(StreamRole::Translation, c), seed + 2).unwrap();
        let fusion = FusionNet::new(FusionNetDescriptor::new(c), seed + 3).unwrap();
        let sd = SegHeadDescriptor::new(n_class, fusion.tap_channels(), ae.descriptor().factor());
        let seg = SegHead::new(sd, seed + 4).unwrap();
        Self { ae, psi, phi, fusion, seg }
    }
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> RgbImage {
    RgbImage::new(h, w, (0..3 * h * w).map(|_| rng.random::<f32>()).collect()).unwrap()
}

fn fusion_invariants() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n_class = 4;
    let thermal = [1u8, 2];
    let (mut steps, mut masked_cells, mut cells) = (0usize, 0usize, 0usize);
    let mut worst_degenerate = 0.0f64;
    for run in 0..6u64 {
        let nets = Untrained::new(100 + run * 10, n_class);
        let s = build_schedule(1000, 1e-4, 0.02).map_err(err)?;
        let plan = subsample_timesteps(1000, 10).map_err(err)?;
        let input = random_image(&mut rng, 16, 16);
        let cond = nets.ae.encode(&input).map_err(err)?;
        let z = initial_noise(&nets.ae, 16, 16, run).map_err(err)?;
        let tau = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0][run as usize];

        let models = FusionModels { ae: &nets.ae, psi: &nets.psi, phi: &nets.phi, fusion: &nets.fusion, seg: &nets.seg };
        let opts = StepOptions { tau, thermal_classes: &thermal, use_mask: true };
        let z_s = initial_seg_state(n_class, 16, 16, run).map_err(err)?;
        let mut state = FusionLoopState::start(&cond, &z, z_s, plan.steps()[0]).map_err(err)?;
        for (_, t_next) in plan.transitions() {
            let (next, step) = fusion_step(&models, &s, &state, t_next, &opts, false).map_err(err)?;
            let a = step.eps_psi.to_vec().map_err(err)?;
            let b = step.eps_phi.to_vec().map_err(err)?;
            let f = step.eps_f.to_vec().map_err(err)?;
            let hull = a.iter().zip(&b).zip(&f).all(|((a, b), f)| a.min(*b) <= *f && *f <= a.max(*b));
            ensure(hull, || format!("fused noise leaves the convex hull at t={}", step.t))?;

            let w = step.weights.w.to_vec().map_err(err)?;
            let wr = step.weights.w_r.to_vec().map_err(err)?;
            let (_, c, h, wd) = step.weights.w.dims();
            let m = step.mask.data();
            for ch in 0..c {
                for i in 0..h * wd {
                    let k = ch * h * wd + i;
                    if m[i] == 1 {
                        ensure(wr[k] <= tau, || format!("w_r {} above tau {tau}", wr[k]))?;
                        masked_cells += 1;
                    } else {
                        ensure(wr[k] == w[k], || "w_r differs from w outside the mask".into())?;
                    }
                    cells += 1;
                }
            }
            state = next;
            steps += 1;
        }

        // Degenerate streams: Ψ as both streams.
        let same = FusionModels { phi: &nets.psi, ..models };
        let z_s = initial_seg_state(n_class, 16, 16, run).map_err(err)?;
        let mut fused = FusionLoopState::start(&cond, &z, z_s, plan.steps()[0]).map_err(err)?;
        let mut single = DiffusionStreamState::start(z.clone(), cond.clone(), plan.steps()[0]);
        for (_, t_next) in plan.transitions() {
            let (next, _) = fusion_step(&same, &s, &fused, t_next, &opts, false).map_err(err)?;
            single = reverse_step(&single, &nets.psi, &s, t_next).map_err(err)?;
            let d = next.z_f.max_abs_diff(&single.z_t).map_err(err)?;
            let scale = single.z_t.to_vec().map_err(err)?.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            worst_degenerate = worst_degenerate.max(d / scale);
            fused = next;
        }
    }
    ensure(worst_degenerate <= 1e-6, || format!("degenerate-stream deviation {worst_degenerate:e}"))?;
    ensure(masked_cells > 0, || "no step had a non-empty thermal mask".into())?;
    Ok(format!(
        "{steps} fused steps; {masked_cells}/{cells} masked cells; degenerate deviation {worst_degenerate:.1e}"
    ))
}

// Criterion 3.

fn central_difference(x: &[f64], shape: &[usize], h: f64, f: &dyn Fn(&Tensor) -> f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    let mut buf = x.to_vec();
    for i in 0..x.len() {
        buf[i] = x[i] + h;
        let up = f(&Tensor::from_slice(&buf, shape, &Device::Cpu).unwrap());
        buf[i] = x[i] - h;
        let down = f(&Tensor::from_slice(&buf, shape, &Device::Cpu).unwrap());
        buf[i] = x[i];
        out.push((up - down) / (2.0 * h));
    }
    out
}

fn analytic(x: &[f64], shape: &[usize], f: &dyn Fn(&Tensor) -> Tensor) -> Vec<f64> {
    let v = Var::from_tensor(&Tensor::from_slice(x, shape, &Device::Cpu).unwrap()).unwrap();
    let loss = f(v.as_tensor());
    let grads = loss.backward().unwrap();
    grads.get(v.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

fn gradient_checks() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let shape = [1usize, 3, 8, 8];
    let n = 3 * 64;
    let h = 1e-6;
    let mut worst: HashMap<&str, f64> = HashMap::new();
    for _ in 0..3 {
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
        let a = Tensor::from_vec((0..n).map(|_| rng.random_range(0.05..0.95)).collect::<Vec<f64>>(), &shape, &Device::Cpu)
            .unwrap();
        let b = Tensor::from_vec((0..n).map(|_| rng.random_range(0.05..0.95)).collect::<Vec<f64>>(), &shape, &Device::Cpu)
            .unwrap();
        for term in ["contrast", "texture", "color"] {
            let pick = |t: &Tensor| {
                let l = visual_losses_tensor(t, &a, &b).unwrap();
                match term {
                    "contrast" => l.contrast,
                    "texture" => l.texture,
                    _ => l.color,
                }
            };
            let g = analytic(&x, &shape, &pick);
            let fd = central_difference(&x, &shape, h, &|t| pick(t).to_scalar::<f64>().unwrap());
            let e = rel_err(&fd, &g);
            let slot = worst.entry(term).or_insert(0.0);
            *slot = slot.max(e);
        }

        let k = 4;
        let lshape = [2usize, k, 6, 6];
        let logits: Vec<f64> = (0..2 * k * 36).map(|_| rng.random_range(-3.0..3.0)).collect();
        let labels: Vec<SegmentationMap> =
            (0..2).map(|_| SegmentationMap::new(6, 6, (0..36).map(|_| rng.random_range(0..k as u8)).collect()).unwrap()).collect();
        let refs: Vec<&SegmentationMap> = labels.iter().collect();
        let seg = |t: &Tensor| seg_loss(t, &refs).unwrap();
        let g = analytic(&logits, &lshape, &seg);
        let fd = central_difference(&logits, &lshape, h, &|t| seg(t).to_scalar::<f64>().unwrap());
        let e = rel_err(&fd, &g);
        let slot = worst.entry("seg").or_insert(0.0);
        *slot = slot.max(e);
    }
    let mut names: Vec<_> = worst.iter().collect();
    names.sort_by(|a, b| a.0.cmp(b.0));
    let summary = names.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect::<Vec<_>>().join(", ");
    ensure(worst.values().all(|&e| e <= 1e-3), || format!("relative error too large: {summary}"))?;
    Ok(summary)
}

// Criterion 4.

fn luma8(img: &RgbImage) -> Vec<u8> {
    let (h, w) = img.dims();
    (0..h * w)
        .map(|i| {
            let y = 0.299 * img.plane(0)[i] + 0.587 * img.plane(1)[i] + 0.114 * img.plane(2)[i];
            (y.clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect()
}

fn shannon<K: std::hash::Hash + Eq>(values: impl Iterator<Item = K>) -> f64 {
    let mut counts: HashMap<K, usize> = HashMap::new();
    let mut n = 0usize;
    for v in values {
        *counts.entry(v).or_default() += 1;
        n += 1;
    }
    counts.values().map(|&c| c as f64 / n as f64).map(|p| -p * p.log2()).sum()
}

fn metric_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for case in 0..200 {
        let a = random_image(&mut rng, 8, 8);
        // Half the cases share structure so the joint histogram is not all singletons.
        let b = if case % 2 == 0 { random_image(&mut rng, 8, 8) } else { a.map(|v| (v * 0.5 + 0.25).round_ties_even()) };
        let (la, lb) = (luma8(&a), luma8(&b));
        let en = shannon(la.iter().copied());
        let mi = (shannon(la.iter().copied()) + shannon(lb.iter().copied()) - shannon(la.iter().zip(&lb))).max(0.0);
        worst = worst.max((entropy(&a) - en).abs());
        worst = worst.max((mutual_information(&a, &b).map_err(err)? - mi).abs());
    }
    ensure(worst <= 1e-9, || format!("EN/MI oracle deviation {worst:e}"))?;

    let mut min_ssim = f64::INFINITY;
    let mut min_qabf = f64::INFINITY;
    for _ in 0..20 {
        let x = random_image(&mut rng, 16, 16);
        min_ssim = min_ssim.min(ssim(&x, &x).map_err(err)?);
        min_qabf = min_qabf.min(qabf(&x, &x, &x).map_err(err)?);
    }
    ensure((min_ssim - 1.0).abs() <= 1e-12, || format!("SSIM(x,x) = {min_ssim}"))?;
    ensure(min_qabf >= 0.99, || format!("Qabf(x,x,x) = {min_qabf}"))?;

    let labels = SegmentationMap::new(8, 8, (0..64).map(|_| rng.random_range(0..4u8)).collect()).map_err(err)?;
    let (_, m) = miou(&labels, &labels, 4).map_err(err)?;
    ensure(m == 1.0, || format!("mIoU(perfect) = {m}"))?;
    Ok(format!("EN/MI deviation {worst:.1e}; SSIM(x,x) {min_ssim}; Qabf(x,x,x) {min_qabf:.4}; mIoU {m}"))
}

// Criteria 5 to 8 share one trained pipeline.

struct Pipeline {
    cfg: TrainConfig,
    train: Vec<SceneSample>,
    test: Vec<SceneSample>,
    ae: Autoencoder,
    p1: PhaseOne,
    schedule: NoiseSchedule,
    stage_one: Duration,
}

impl Pipeline {
    fn build() -> Result<Self, String> {
        let start = Instant::now();
        let cfg = TrainConfig::smoke();
        let (train, test) = cfg.data.generate().map_err(err)?;
        let (ae, _) = train_shared_autoencoder(&train, &cfg).map_err(err)?;
        println!("  autoencoder trained in {:.1}s", start.elapsed().as_secs_f64());
        let stream_train = StreamData::augmented(&train, cfg.data.augment_copies, &cfg.data.degradation).map_err(err)?;
        let stream_eval = StreamData::from_samples(&test);
        let p1 = phase1_train(&stream_train, &stream_eval, &ae, &cfg, &mut |_, _, _| Ok(())).map_err(err)?;
        let schedule = cfg.schedule().map_err(err)?;
        Ok(Self { cfg, train, test, ae, p1, schedule, stage_one: start.elapsed() })
    }

    fn art(&self) -> StreamArtifacts<'_> {
        StreamArtifacts { ae: &self.ae, psi: &self.p1.psi, phi: &self.p1.phi, schedule: &self.schedule }
    }

    fn base(&self) -> PhaseTwoSettings {
        PhaseTwoSettings::from_config(&self.cfg)
    }

    fn run(&self, variant: &str, settings: &PhaseTwoSettings) -> Result<VariantRun, String> {
        let registry = VariantRegistry::default();
        let v = registry.get(variant).map_err(err)?;
        run_variant(v, self.art(), &self.train, &self.test, &self.cfg, settings).map_err(err)
    }
}

fn report_line(run: &VariantRun) -> String {
    let e = &run.eval;
    format!(
        "{}: EN {:.3} SSIM {:.3} MI {:.3} Qabf {:.3} PSNR {:.2} PSNR_vis {:.2} mIoU_thermal {:.3} head {}",
        run.variant,
        e.mean.en,
        e.mean.ssim,
        e.mean.mi,
        e.mean.qabf,
        e.mean.psnr,
        e.psnr_vs_clean,
        e.probe_miou_thermal,
        e.head_miou_thermal.map_or("-".into(), |v| format!("{v:.3}"))
    )
}

fn max_image_diff(a: &[RgbImage], b: &[RgbImage]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.data().iter().zip(y.data()).map(|(p, q)| (p - q).abs() as f64))
        .fold(0.0, f64::max)
}

fn inside_means(run: &VariantRun) -> Vec<f64> {
    run.test_set.traces.iter().flatten().filter_map(|r| r.w_r_inside_mean).collect()
}

const DETERMINISM_TOL: f64 = 1e-6;

fn main() {
    println!("acceptance: running criteria 1-8");
    let mut outcomes = vec![
        timed(1, "diffusion algebra", Some(10), diffusion_algebra),
        timed(2, "fusion invariants", Some(30), fusion_invariants),
        timed(3, "finite-difference gradients", Some(60), gradient_checks),
        timed(4, "metric oracles", Some(30), metric_oracles),
    ];

    let start = Instant::now();
    let pipeline = Pipeline::build();
    let (pipeline, full) = match pipeline.and_then(|p| {
        let base = p.base();
        let full = p.run("full", &base)?;
        Ok((p, full))
    }) {
        Ok(v) => v,
        Err(e) => {
            for (id, name) in [(5, "smoke run"), (6, "collapse mitigation"), (7, "ablation variants"), (8, "tau sweep")] {
                outcomes.push(timed(id, name, None, || Err(format!("pipeline failed: {e}"))));
            }
            finish(&outcomes);
        }
    };
    let smoke_time = start.elapsed();
    println!("  stage one {:.1}s, full phase two and evaluation {:.1}s", pipeline.stage_one.as_secs_f64(), (smoke_time - pipeline.stage_one).as_secs_f64());
    println!("  {}", report_line(&full));

    let baseline = degraded_baseline(&pipeline.train, &pipeline.test, &pipeline.cfg);
    outcomes.push(Outcome {
        id: 5,
        name: "smoke run",
        elapsed: smoke_time,
        limit: Some(Duration::from_secs(900)),
        result: baseline.map_err(err).and_then(|base| {
            let (psi, phi) = (pipeline.p1.psi_report.reduction(), pipeline.p1.phi_report.reduction());
            let eval = &full.eval;
            let detail = format!(
                "eps-MSE reduction psi {:.1}% phi {:.1}%; thermal mIoU {:.3} vs degraded {:.3}; PSNR {:.2} vs degraded {:.2}",
                100.0 * psi,
                100.0 * phi,
                eval.probe_miou_thermal,
                base.probe_miou_thermal,
                eval.psnr_vs_clean,
                base.psnr_vs_clean
            );
            let mut failed = Vec::new();
            if psi < 0.5 || phi < 0.5 {
                failed.push("(a)");
            }
            if eval.probe_miou_thermal < base.probe_miou_thermal {
                failed.push("(b)");
            }
            if eval.psnr_vs_clean < base.psnr_vs_clean {
                failed.push("(c)");
            }
            if failed.is_empty() {
                Ok(detail)
            } else {
                Err(format!("{} failed; {detail}", failed.join(" ")))
            }
        }),
    });
    println!("{}", outcomes.last().unwrap().line());

    let out_dir = std::path::PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&out_dir).expect("acceptance output directory");

    outcomes.push(timed(6, "collapse mitigation", None, || {
        let settings = PhaseTwoSettings { tau: 1.0, use_mask: false, ..pipeline.base() };
        let collapse = pipeline.run("full", &settings)?;
        let p2 = collapse.phase_two.as_ref().expect("full variant trains phase 2");
        let trajectory: Vec<f64> = p2.records.iter().map(|r| r.w_mean).collect();
        let path = out_dir.join("collapse_w_trajectory.json");
        let json = serde_json::json!({ "epoch_w_mean": p2.epoch_w_mean, "update_w_mean": trajectory });
        std::fs::write(&path, serde_json::to_string_pretty(&json).unwrap()).map_err(err)?;
        let peak = trajectory.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let saturation = if peak > 0.99 { "saturated" } else { "recorded without saturating" };

        let inside = inside_means(&full);
        ensure(!trajectory.is_empty(), || "no w trajectory recorded".into())?;
        ensure(!inside.is_empty(), || "no inference step had thermal pixels in the mask at tau 0.4".into())?;
        let tau = pipeline.base().tau;
        let worst = inside.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        ensure(worst <= tau, || format!("mean w_r inside the mask {worst} exceeds {tau}"))?;
        Ok(format!(
            "tau=1 unmasked: peak mean w {peak:.3} ({saturation}), epochs {:?}, trajectory at {}; tau={tau}: max inside mean {worst:.4} over {} masked steps",
            p2.epoch_w_mean.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>(),
            path.display(),
            inside.len()
        ))
    }));

    outcomes.push(timed(7, "ablation variants", None, || {
        let base = pipeline.base();
        let mut lines = Vec::new();
        let mut model_iii = None;
        for n in 1..=4u8 {
            let name = VariantRegistry::ablation_name(n).map_err(err)?;
            let run = pipeline.run(name, &base)?;
            lines.push(report_line(&run));
            let json = serde_json::to_string_pretty(&run.eval).map_err(err)?;
            std::fs::write(out_dir.join(format!("{name}.json")), json).map_err(err)?;
            if n == 3 {
                model_iii = Some(run);
            }
        }
        for l in &lines {
            println!("  {l}");
        }
        let iii = model_iii.expect("model III ran");
        let diff = max_image_diff(&iii.test_set.images, &full.test_set.images);
        ensure(diff > DETERMINISM_TOL, || format!("model III image equals the full model's (max diff {diff:e})"))?;
        Ok(format!("4 variants reported; model III vs full max pixel diff {diff:.3}"))
    }));

    outcomes.push(timed(8, "tau sweep", None, || {
        let registry = VariantRegistry::default();
        let v = registry.get("full").map_err(err)?;
        let taus = [0.0, 0.2, 0.4, 0.6, 0.8];
        let rows: Vec<SweepRow> =
            sweep_tau(&taus, v, pipeline.art(), &pipeline.train, &pipeline.test, &pipeline.cfg, &pipeline.base()).map_err(err)?;
        let table = sweep_table(&rows);
        print!("{table}");
        std::fs::write(out_dir.join("tau_sweep.tsv"), &table).map_err(err)?;
        ensure(rows.len() == taus.len(), || format!("{} rows for {} values", rows.len(), taus.len()))?;
        ensure(table.lines().count() == taus.len() + 1, || "table is missing rows".into())?;
        ensure(rows.iter().all(|r| r.mean.en.is_finite() && r.psnr_vs_clean.is_finite()), || "non-finite entries".into())?;
        Ok(format!("{} rows", rows.len()))
    }));

    finish(&outcomes);
}

fn finish(outcomes: &[Outcome]) -> ! {
    println!("acceptance summary:");
    for o in outcomes {
        println!("{}", o.line());
    }
    let failed = outcomes.iter().filter(|o| !o.passed()).count();
    println!("acceptance: {} passed, {failed} failed", outcomes.len() - failed);
    std::process::exit(if failed == 0 { 0 } else { 1 });
}
