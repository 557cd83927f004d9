//! `noisefuse` command-line driver.

mod manifest;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use noisefuse::autoencoder::Autoencoder;
use noisefuse::checkpoint::{load_autoencoder, load_denoiser, load_fusion, save_autoencoder, save_denoiser, save_fusion};
use noisefuse::eval::{
    degraded_baseline, evaluate_source, fuse_samples, fusion_config, run_variant, sweep_table, sweep_tau, SourceEval,
    StreamArtifacts,
};
use noisefuse::fusion::{initial_noise, write_trace_jsonl, FusionConfig, FusionNet};
use noisefuse::image::RgbImage;
use noisefuse::seghead::SegHead;
use noisefuse::stream::{Denoiser, StreamRole};
use noisefuse::synth::{generate_dataset, load_dataset_dir, write_dataset_dir, ClassPalette, SceneSample};
use noisefuse::training::{
    phase2_train, train_one_stream, train_shared_autoencoder, PhaseTwoSettings, StreamData, TrainConfig,
};
use noisefuse::variants::{FusionVariant, InferenceContext, VariantRegistry};
use serde::Serialize;

use manifest::{ConfigSources, RunManifest};

/// Environment variable naming the root under which default output directories are created.
pub const OUT_ROOT_ENV: &str = "NOISEFUSE_OUT";

#[derive(Parser)]
#[command(name = "noisefuse", version, about = "Single-image visible/infrared fusion with two diffusion streams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
struct ConfigArgs {
    /// Built-in starting configuration.
    #[arg(long, default_value = "smoke")]
    preset: String,
    /// TOML configuration file, or a run manifest to replay.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set fusion.epochs=3`. Repeatable; later wins.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Clone, Debug)]
struct DataArgs {
    /// Dataset directory written by `make-synthetic`; generated from the config when absent.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args, Clone, Debug)]
struct ModelArgs {
    /// Autoencoder checkpoint [default: $NOISEFUSE_OUT/train-ae/ae.ckpt].
    #[arg(long)]
    ae: Option<PathBuf>,
    /// Restoration stream checkpoint [default: $NOISEFUSE_OUT/train-stream-restoration/psi.ckpt].
    #[arg(long)]
    psi: Option<PathBuf>,
    /// Translation stream checkpoint [default: $NOISEFUSE_OUT/train-stream-translation/phi.ckpt].
    #[arg(long)]
    phi: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Role {
    Restoration,
    Translation,
}

impl From<Role> for StreamRole {
    fn from(r: Role) -> Self {
        match r {
            Role::Restoration => StreamRole::Restoration,
            Role::Translation => StreamRole::Translation,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic visible/infrared/label/degraded scenes.
    MakeSynthetic {
        /// Number of scenes [default: n_train + n_test].
        #[arg(long)]
        n: Option<usize>,
        /// Image side in pixels.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train the shared autoencoder.
    TrainAe {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train one diffusion stream.
    TrainStream {
        #[arg(long, value_enum)]
        role: Role,
        /// Autoencoder checkpoint [default: $NOISEFUSE_OUT/train-ae/ae.ckpt].
        #[arg(long)]
        ae: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Phase 2: train the fusion network and segmentation head with the streams frozen.
    TrainFusion {
        /// Variant with a fusion stage: full, model-i or model-ii.
        #[arg(long, default_value = "full")]
        variant: String,
        #[arg(long)]
        tau: Option<f64>,
        #[command(flatten)]
        models: ModelArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Fuse one degraded visible image.
    Infer {
        #[arg(long)]
        input: PathBuf,
        /// Output PNG; the segmentation map, trace and manifest are written beside it.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long, default_value = "full")]
        variant: String,
        #[command(flatten)]
        models: ModelArgs,
        /// Fusion checkpoint [default: $NOISEFUSE_OUT/train-fusion/fusion.ckpt].
        #[arg(long)]
        fusion: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score a variant on the test split and write per-image and aggregate reports.
    Eval {
        #[arg(long, default_value = "full")]
        variant: String,
        #[arg(long)]
        tau: Option<f64>,
        #[command(flatten)]
        models: ModelArgs,
        /// Fusion checkpoint [default: $NOISEFUSE_OUT/train-fusion/fusion.ckpt].
        #[arg(long)]
        fusion: Option<PathBuf>,
        /// Also write per-image metrics as CSV.
        #[arg(long)]
        csv: bool,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train (if needed) and evaluate ablation model I, II, III or IV.
    Ablate {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=4))]
        variant: u8,
        #[command(flatten)]
        models: ModelArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Retrain and evaluate the full model at each τ.
    SweepTau {
        #[arg(long, value_delimiter = ',', default_value = "0,0.2,0.4,0.6,0.8")]
        values: Vec<f64>,
        #[command(flatten)]
        models: ModelArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn out_root() -> PathBuf {
    std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

fn default_dir(out: Option<PathBuf>, name: &str) -> PathBuf {
    out.unwrap_or_else(|| out_root().join(name))
}

/// Resolves the configuration. Dedicated flags are applied after `--set`.
fn resolve_config(args: &ConfigArgs, flags: &[(&str, Option<String>)]) -> Result<(TrainConfig, ConfigSources)> {
    let mut overrides = args.overrides.clone();
    if let Some(seed) = args.seed {
        overrides.push(format!("seed={seed}"));
    }
    for (key, value) in flags {
        if let Some(v) = value {
            overrides.push(format!("{key}={v}"));
        }
    }
    let cfg = noisefuse::config::load(&args.preset, args.config.as_deref(), &overrides)?;
    let sources = ConfigSources { preset: args.preset.clone(), file: args.config.clone(), overrides };
    Ok((cfg, sources))
}

/// `(train, test)` from a dataset directory (first `n_train` scenes, then `n_test`) or
/// generated from the config.
fn load_splits(data: &DataArgs, cfg: &TrainConfig) -> Result<(Vec<SceneSample>, Vec<SceneSample>)> {
    let Some(dir) = &data.data else {
        return Ok(cfg.data.generate()?);
    };
    let all = load_dataset_dir(dir, &cfg.data.degradation)?;
    let need = cfg.data.n_train + cfg.data.n_test;
    if all.len() < need {
        bail!("{} holds {} scenes but the config asks for {} train + {} test", dir.display(), all.len(), cfg.data.n_train, cfg.data.n_test);
    }
    let test = all[cfg.data.n_train..need].to_vec();
    let mut train = all;
    train.truncate(cfg.data.n_train);
    Ok((train, test))
}

struct Models {
    ae: Autoencoder,
    psi: Denoiser,
    phi: Denoiser,
}

fn model_paths(m: &ModelArgs) -> [PathBuf; 3] {
    let root = out_root();
    [
        m.ae.clone().unwrap_or_else(|| root.join("train-ae").join("ae.ckpt")),
        m.psi.clone().unwrap_or_else(|| root.join("train-stream-restoration").join("psi.ckpt")),
        m.phi.clone().unwrap_or_else(|| root.join("train-stream-translation").join("phi.ckpt")),
    ]
}

fn load_models(m: &ModelArgs) -> Result<Models> {
    let paths = model_paths(m);
    let ae = load_autoencoder(&paths[0])?.0;
    let psi = load_denoiser(&paths[1], StreamRole::Restoration)?.0;
    let phi = load_denoiser(&paths[2], StreamRole::Translation)?.0;
    Ok(Models { ae, psi, phi })
}

fn fusion_path(p: &Option<PathBuf>) -> PathBuf {
    p.clone().unwrap_or_else(|| out_root().join("train-fusion").join("fusion.ckpt"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn config_json(cfg: &TrainConfig) -> serde_json::Value {
    serde_json::to_value(cfg).expect("config serialises")
}

#[derive(Serialize)]
struct CsvRow<'a> {
    name: &'a str,
    en: f64,
    ssim: f64,
    mi: f64,
    qabf: f64,
    psnr: f64,
    psnr_vs_clean: f64,
}

fn write_eval(dir: &Path, eval: &SourceEval, csv: bool, artifacts: &mut BTreeMap<String, PathBuf>) -> Result<()> {
    let per_image = dir.join("per_image.json");
    write_json(&per_image, &eval.per_image)?;
    let aggregate = dir.join("aggregate.json");
    let agg = serde_json::json!({
        "source": eval.source,
        "mean": eval.mean,
        "psnr_vs_clean": eval.psnr_vs_clean,
        "probe_miou_thermal": eval.probe_miou_thermal,
        "probe_miou": eval.probe_miou,
        "head_miou_thermal": eval.head_miou_thermal,
        "n_images": eval.per_image.len(),
    });
    write_json(&aggregate, &agg)?;
    artifacts.insert("per_image".into(), per_image);
    artifacts.insert("aggregate".into(), aggregate);
    if csv {
        let path = dir.join("per_image.csv");
        let mut w = csv::Writer::from_path(&path)?;
        for e in &eval.per_image {
            let m = &e.metrics;
            w.serialize(CsvRow { name: &e.name, en: m.en, ssim: m.ssim, mi: m.mi, qabf: m.qabf, psnr: m.psnr, psnr_vs_clean: e.psnr_vs_clean })?;
        }
        w.flush()?;
        artifacts.insert("per_image_csv".into(), path);
    }
    Ok(())
}

fn variant<'r>(registry: &'r VariantRegistry, name: &str) -> Result<&'r dyn FusionVariant> {
    Ok(registry.get(name)?)
}

/// Loads the fusion checkpoint when the variant has a trained fusion stage.
fn load_fusion_if_needed(
    v: &dyn FusionVariant,
    cfg: &TrainConfig,
    path: &Option<PathBuf>,
    inputs: &mut BTreeMap<String, PathBuf>,
) -> Result<Option<(FusionNet, SegHead)>> {
    if v.phase_two(&PhaseTwoSettings::from_config(cfg)).is_none() {
        return Ok(None);
    }
    let path = fusion_path(path);
    let (f, s, _) = load_fusion(&path)?;
    inputs.insert("fusion".into(), path);
    Ok(Some((f, s)))
}

fn run(cli: Cli, argv: Vec<String>) -> Result<()> {
    match cli.command {
        Command::MakeSynthetic { n, size, out, cfg } => {
            let (cfg, sources) = resolve_config(&cfg, &[("data.size", size.map(|s| s.to_string()))])?;
            let dir = default_dir(out, "make-synthetic");
            let n = n.unwrap_or(cfg.data.n_train + cfg.data.n_test);
            let mut m = RunManifest::begin("make-synthetic", argv, &cfg, sources, &dir)?;
            m.artifacts.insert("dataset".into(), dir.clone());
            m.write()?;
            let samples = generate_dataset(n, cfg.data.size, cfg.data.first_seed, &ClassPalette::default(), &cfg.data.degradation)?;
            write_dataset_dir(&samples, &dir)?;
            log::info!("wrote {n} scenes to {}", dir.display());
            m.finish()
        }
        Command::TrainAe { data, out, cfg } => {
            let (cfg, sources) = resolve_config(&cfg, &[])?;
            let dir = default_dir(out, "train-ae");
            let mut m = RunManifest::begin("train-ae", argv, &cfg, sources, &dir)?;
            if let Some(d) = &data.data {
                m.inputs.insert("data".into(), d.clone());
            }
            let ckpt = dir.join("ae.ckpt");
            let losses = dir.join("ae_loss.json");
            m.artifacts.insert("checkpoint".into(), ckpt.clone());
            m.artifacts.insert("loss_log".into(), losses.clone());
            m.write()?;
            let (train, _) = load_splits(&data, &cfg)?;
            let (ae, log) = train_shared_autoencoder(&train, &cfg)?;
            save_autoencoder(&ckpt, &ae, config_json(&cfg), log.len() as u64)?;
            write_json(&losses, &log)?;
            log::info!("autoencoder: {} steps, final loss {:.4}", log.len(), log.values().last().copied().unwrap_or(f64::NAN));
            m.finish()
        }
        Command::TrainStream { role, ae, data, out, cfg } => {
            let role: StreamRole = role.into();
            let (cfg, sources) = resolve_config(&cfg, &[])?;
            let dir = default_dir(out, &format!("train-stream-{}", role.as_str()));
            let mut m = RunManifest::begin("train-stream", argv, &cfg, sources, &dir)?;
            let ae_path = ae.unwrap_or_else(|| out_root().join("train-ae").join("ae.ckpt"));
            m.inputs.insert("ae".into(), ae_path.clone());
            let name = match role {
                StreamRole::Restoration => "psi",
                StreamRole::Translation => "phi",
            };
            let ckpt = dir.join(format!("{name}.ckpt"));
            let losses = dir.join(format!("{name}_loss.json"));
            let report_path = dir.join(format!("{name}_report.json"));
            m.artifacts.insert("checkpoint".into(), ckpt.clone());
            m.artifacts.insert("loss_log".into(), losses.clone());
            m.artifacts.insert("report".into(), report_path.clone());
            m.write()?;
            let ae = load_autoencoder(&ae_path)?.0;
            let (train, test) = load_splits(&data, &cfg)?;
            let train_data = StreamData::augmented(&train, cfg.data.augment_copies, &cfg.data.degradation)?;
            let eval_data = StreamData::from_samples(&test);
            let every = match role {
                StreamRole::Restoration => cfg.psi.checkpoint_every,
                StreamRole::Translation => cfg.phi.checkpoint_every,
            };
            let snapshot = config_json(&cfg);
            let mut on_epoch = |epoch: usize, model: &Denoiser| -> noisefuse::Result<()> {
                if every > 0 && epoch % every == 0 {
                    save_denoiser(&dir.join(format!("{name}_epoch{epoch:04}.ckpt")), model, snapshot.clone(), epoch as u64)?;
                }
                Ok(())
            };
            let (model, report) = train_one_stream(role, &train_data, &eval_data, &ae, &cfg, &mut on_epoch)?;
            save_denoiser(&ckpt, &model, config_json(&cfg), report.steps as u64)?;
            write_json(&losses, &report.log)?;
            write_json(&report_path, &report)?;
            log::info!(
                "{} stream: eps-MSE {:.4} -> {:.4} ({:.1}% reduction)",
                role.as_str(),
                report.eps_mse_init,
                report.eps_mse_trained,
                100.0 * report.reduction()
            );
            m.finish()
        }
        Command::TrainFusion { variant: name, tau, models, data, out, cfg } => {
            let (cfg, sources) = resolve_config(&cfg, &[("tau", tau.map(|t| t.to_string()))])?;
            let registry = VariantRegistry::default();
            let v = variant(&registry, &name)?;
            let Some(settings) = v.phase_two(&PhaseTwoSettings::from_config(&cfg)) else {
                bail!("variant {name} has no fusion stage to train");
            };
            let dir = default_dir(out, "train-fusion");
            let mut m = RunManifest::begin("train-fusion", argv, &cfg, sources, &dir)?;
            m.inputs = model_inputs_from_paths(&models);
            let ckpt = dir.join("fusion.ckpt");
            let records = dir.join("phase2_records.jsonl");
            let summary = dir.join("phase2_summary.json");
            m.artifacts.insert("checkpoint".into(), ckpt.clone());
            m.artifacts.insert("records".into(), records.clone());
            m.artifacts.insert("summary".into(), summary.clone());
            m.write()?;
            let mdl = load_models(&models)?;
            let (train, _) = load_splits(&data, &cfg)?;
            let p2 = phase2_train(&train, &mdl.ae, &mdl.psi, &mdl.phi, &cfg, settings.clone())?;
            save_fusion(&ckpt, &p2.fusion, &p2.seg, config_json(&cfg), p2.records.len() as u64)?;
            write_jsonl(&records, &p2.records)?;
            let s = serde_json::json!({
                "variant": name,
                "settings": settings,
                "epoch_loss": p2.epoch_loss,
                "epoch_w_mean": p2.epoch_w_mean,
                "frozen_checksums": p2.frozen_checksums,
            });
            write_json(&summary, &s)?;
            log::info!("phase 2 ({name}): final epoch loss {:.4}", p2.epoch_loss.last().copied().unwrap_or(f64::NAN));
            m.finish()
        }
        Command::Infer { input, out, tau, variant: name, models, fusion, cfg } => {
            let (cfg, sources) = resolve_config(&cfg, &[("tau", tau.map(|t| t.to_string()))])?;
            let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).map(Path::to_path_buf).unwrap_or_else(|| ".".into());
            let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("fused").to_string();
            let mut m = RunManifest::begin("infer", argv, &cfg, sources, &dir)?;
            m.inputs = model_inputs_from_paths(&models);
            m.inputs.insert("input".into(), input.clone());
            let gamma_path = dir.join(format!("{stem}_segmentation.png"));
            let trace_path = dir.join(format!("{stem}_trace.jsonl"));
            m.artifacts.insert("image".into(), out.clone());
            m.write()?;
            let registry = VariantRegistry::default();
            let v = variant(&registry, &name)?;
            let mdl = load_models(&models)?;
            let trained = load_fusion_if_needed(v, &cfg, &fusion, &mut m.inputs)?;
            let ctx = InferenceContext {
                ae: &mdl.ae,
                psi: &mdl.psi,
                phi: &mdl.phi,
                schedule: &cfg.schedule()?,
                fusion: trained.as_ref().map(|(f, s)| (f, s)),
            };
            let img = RgbImage::load_png(&input)?;
            let (h, w) = img.dims();
            let fcfg = FusionConfig { seed: cfg.seed, ..fusion_config(&cfg, cfg.tau, cfg.fusion.use_mask)? };
            let z = initial_noise(&mdl.ae, h, w, cfg.seed)?;
            let result = v.infer(&ctx, &img, &z, &fcfg)?;
            result.image.save_png(&out)?;
            if let Some(g) = &result.gamma {
                g.save_png(&gamma_path)?;
                m.artifacts.insert("segmentation".into(), gamma_path);
            }
            if !result.trace.is_empty() {
                write_trace_jsonl(&result.trace, &trace_path)?;
                m.artifacts.insert("trace".into(), trace_path);
            }
            m.finish()
        }
        Command::Eval { variant: name, tau, models, fusion, csv, data, out, cfg } => {
            let (cfg, sources) = resolve_config(&cfg, &[("tau", tau.map(|t| t.to_string()))])?;
            let dir = default_dir(out, &format!("eval-{name}"));
            let mut m = RunManifest::begin("eval", argv, &cfg, sources, &dir)?;
            m.inputs = model_inputs_from_paths(&models);
            m.write()?;
            let registry = VariantRegistry::default();
            let v = variant(&registry, &name)?;
            let mdl = load_models(&models)?;
            let trained = load_fusion_if_needed(v, &cfg, &fusion, &mut m.inputs)?;
            let (train, test) = load_splits(&data, &cfg)?;
            let schedule = cfg.schedule()?;
            let ctx = InferenceContext {
                ae: &mdl.ae,
                psi: &mdl.psi,
                phi: &mdl.phi,
                schedule: &schedule,
                fusion: trained.as_ref().map(|(f, s)| (f, s)),
            };
            let fcfg = fusion_config(&cfg, cfg.tau, cfg.fusion.use_mask)?;
            let train_set = fuse_samples(v, &ctx, &train, &fcfg)?;
            let test_set = fuse_samples(v, &ctx, &test, &fcfg)?;
            let eval = evaluate_source(v.name(), &train_set.images, &train, &test_set.images, &test, Some(&test_set.gammas), &cfg)?;
            write_eval(&dir, &eval, csv, &mut m.artifacts)?;
            let baseline = degraded_baseline(&train, &test, &cfg)?;
            let bpath = dir.join("degraded_baseline.json");
            write_json(&bpath, &baseline)?;
            m.artifacts.insert("degraded_baseline".into(), bpath);
            let images = dir.join("images");
            fs::create_dir_all(&images)?;
            for (img, s) in test_set.images.iter().zip(&test) {
                img.save_png(&images.join(format!("{}.png", s.name)))?;
            }
            m.artifacts.insert("images".into(), images);
            log::info!(
                "{name}: PSNR vs clean {:.2} (degraded {:.2}); thermal probe mIoU {:.3} (degraded {:.3})",
                eval.psnr_vs_clean,
                baseline.psnr_vs_clean,
                eval.probe_miou_thermal,
                baseline.probe_miou_thermal
            );
            m.finish()
        }
        Command::Ablate { variant: number, models, data, out, cfg } => {
            let name = VariantRegistry::ablation_name(number)?;
            let (cfg, sources) = resolve_config(&cfg, &[])?;
            let dir = default_dir(out, &format!("ablate-{name}"));
            let mut m = RunManifest::begin("ablate", argv, &cfg, sources, &dir)?;
            m.inputs = model_inputs_from_paths(&models);
            m.write()?;
            let registry = VariantRegistry::default();
            let v = variant(&registry, name)?;
            let mdl = load_models(&models)?;
            let (train, test) = load_splits(&data, &cfg)?;
            let schedule = cfg.schedule()?;
            let art = StreamArtifacts { ae: &mdl.ae, psi: &mdl.psi, phi: &mdl.phi, schedule: &schedule };
            let run = run_variant(v, art, &train, &test, &cfg, &PhaseTwoSettings::from_config(&cfg))?;
            write_eval(&dir, &run.eval, true, &mut m.artifacts)?;
            if let Some(p2) = &run.phase_two {
                let ckpt = dir.join("fusion.ckpt");
                save_fusion(&ckpt, &p2.fusion, &p2.seg, config_json(&cfg), p2.records.len() as u64)?;
                m.artifacts.insert("checkpoint".into(), ckpt);
                let records = dir.join("phase2_records.jsonl");
                write_jsonl(&records, &p2.records)?;
                m.artifacts.insert("records".into(), records);
            }
            log::info!("{name}: PSNR vs clean {:.2}; thermal probe mIoU {:.3}", run.eval.psnr_vs_clean, run.eval.probe_miou_thermal);
            m.finish()
        }
        Command::SweepTau { values, models, data, out, cfg } => {
            if values.is_empty() || values.iter().any(|t| !(0.0..=1.0).contains(t)) {
                bail!("sweep values must be a non-empty list in [0, 1]");
            }
            let (cfg, sources) = resolve_config(&cfg, &[])?;
            let dir = default_dir(out, "sweep-tau");
            let mut m = RunManifest::begin("sweep-tau", argv, &cfg, sources, &dir)?;
            m.inputs = model_inputs_from_paths(&models);
            let table_path = dir.join("sweep.tsv");
            let rows_path = dir.join("sweep.json");
            m.artifacts.insert("table".into(), table_path.clone());
            m.artifacts.insert("rows".into(), rows_path.clone());
            m.write()?;
            let registry = VariantRegistry::default();
            let v = variant(&registry, "full")?;
            let mdl = load_models(&models)?;
            let (train, test) = load_splits(&data, &cfg)?;
            let schedule = cfg.schedule()?;
            let art = StreamArtifacts { ae: &mdl.ae, psi: &mdl.psi, phi: &mdl.phi, schedule: &schedule };
            let rows = sweep_tau(&values, v, art, &train, &test, &cfg, &PhaseTwoSettings::from_config(&cfg))?;
            let table = sweep_table(&rows);
            fs::write(&table_path, &table)?;
            write_json(&rows_path, &rows)?;
            print!("{table}");
            m.finish()
        }
    }
}

fn model_inputs_from_paths(m: &ModelArgs) -> BTreeMap<String, PathBuf> {
    let paths = model_paths(m);
    let mut inputs = BTreeMap::new();
    for (k, p) in ["ae", "psi", "phi"].iter().zip(paths) {
        inputs.insert(k.to_string(), p);
    }
    inputs
}

/// Error kind for the machine-readable failure line.
fn error_kind(e: &anyhow::Error) -> &'static str {
    match e.downcast_ref::<noisefuse::Error>() {
        Some(noisefuse::Error::Param(_)) => "param",
        Some(noisefuse::Error::Config(_)) => "config",
        Some(noisefuse::Error::Ingest(_)) => "ingest",
        Some(noisefuse::Error::Checkpoint { .. }) => "checkpoint",
        Some(noisefuse::Error::Contract(_)) => "contract",
        Some(noisefuse::Error::Tensor(_)) => "tensor",
        Some(noisefuse::Error::Io(_)) => "io",
        Some(noisefuse::Error::Image(_)) => "image",
        Some(noisefuse::Error::Json(_)) => "json",
        None => "failure",
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli, argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": error_kind(&e), "message": format!("{e:#}") });
            eprintln!("{line}");
            ExitCode::from(1)
        }
    }
}
