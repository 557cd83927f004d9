//! Synthetic paired scenes (clean visible, infrared, labels) and visible-band degradations.
//!
//! Every scene is a pure function of its seed. Infrared intensity is derived from the label
//! map plus smooth background noise, so a visible→infrared mapping exists to be learned.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::image::{GrayImage, RgbImage, SegmentationMap};
use crate::nn::seeded_rng;

pub const BACKGROUND: u8 = 0;
pub const PERSON: u8 = 1;
pub const CAR: u8 = 2;
pub const ROAD: u8 = 3;

/// Visible colour and infrared level of one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStyle {
    pub name: String,
    pub rgb: [f32; 3],
    pub infrared: f32,
    pub thermal: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPalette {
    pub classes: Vec<ClassStyle>,
}

impl Default for ClassPalette {
    /// background, person, car, road; people and cars are the thermal classes.
    fn default() -> Self {
        let style = |name: &str, rgb, infrared, thermal| ClassStyle { name: name.into(), rgb, infrared, thermal };
        Self {
            classes: vec![
                style("background", [0.36, 0.46, 0.30], 0.14, false),
                style("person", [0.30, 0.33, 0.30], 0.92, true),
                style("car", [0.62, 0.24, 0.22], 0.78, true),
                style("road", [0.48, 0.48, 0.50], 0.30, false),
            ],
        }
    }
}

impl ClassPalette {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn thermal_classes(&self) -> Vec<u8> {
        self.classes
            .iter()
            .enumerate()
            .filter(|(_, c)| c.thermal)
            .map(|(i, _)| i as u8)
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.classes.len() < 4 {
            return param("palette needs background, person, car and road entries");
        }
        Ok(())
    }
}

pub const MIN_SCENE_SIZE: usize = 16;

/// Smooth noise in `[0, 1]`: a coarse random lattice, bilinearly interpolated.
fn smooth_noise(rng: &mut ChaCha8Rng, size: usize, cells: usize) -> Vec<f32> {
    let n = cells + 1;
    let lattice: Vec<f32> = (0..n * n).map(|_| rng.random::<f32>()).collect();
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let fy = y as f32 / (size - 1) as f32 * cells as f32;
            let fx = x as f32 / (size - 1) as f32 * cells as f32;
            let (y0, x0) = ((fy as usize).min(cells - 1), (fx as usize).min(cells - 1));
            let (ty, tx) = (fy - y0 as f32, fx - x0 as f32);
            let at = |yy: usize, xx: usize| lattice[yy * n + xx];
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
            let bottom = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

/// Draws one scene. Returns `(clean visible, infrared, labels)`.
pub fn synthesize_scene(
    seed: u64,
    size: usize,
    palette: &ClassPalette,
) -> Result<(RgbImage, GrayImage, SegmentationMap)> {
    if size < MIN_SCENE_SIZE || size % 4 != 0 {
        return param(format!("scene size must be a multiple of 4 and at least {MIN_SCENE_SIZE}, got {size}"));
    }
    palette.validate()?;
    let mut rng = seeded_rng(seed);
    let n = size * size;
    let mut label = vec![BACKGROUND; n];

    // Road band across the lower part of the frame
    let road_top = size * 3 / 5 + rng.random_range(0..=size / 8);
    let road_bottom = (road_top + size / 4).min(size);
    for y in road_top..road_bottom {
        for x in 0..size {
            label[y * size + x] = ROAD;
        }
    }

    // One to three objects; later ones may occlude earlier ones.
    let count = rng.random_range(1..=3);
    for _ in 0..count {
        let (class, w, h) = if rng.random_bool(0.5) {
            (PERSON, (size / 8).max(2), size * 2 / 7)
        } else {
            (CAR, size * 2 / 7, (size / 6).max(2))
        };
        let x0 = rng.random_range(0..=size - w);
        let foot = rng.random_range((road_top.saturating_sub(size / 6)).max(h)..=road_bottom.min(size));
        let y0 = foot - h;
        for y in y0..foot {
            for x in x0..x0 + w {
                // round off the corners of people
                if class == PERSON && (y == y0) && (x == x0 || x == x0 + w - 1) {
                    continue;
                }
                label[y * size + x] = class;
            }
        }
    }

    let bg_noise = smooth_noise(&mut rng, size, 4);
    let fine_noise = smooth_noise(&mut rng, size, size / 4);
    let ir_noise = smooth_noise(&mut rng, size, 3);
    let tint: [f32; 3] = [rng.random_range(-0.06..0.06), rng.random_range(-0.06..0.06), rng.random_range(-0.06..0.06)];

    let mut vis = vec![0f32; 3 * n];
    let mut ir = vec![0f32; n];
    for y in 0..size {
        for x in 0..size {
            let i = y * size + x;
            let cls = label[i] as usize;
            let style = &palette.classes[cls];
            let texture = match label[i] {
                BACKGROUND => 0.22 * (bg_noise[i] - 0.5) + 0.10 * (fine_noise[i] - 0.5),
                ROAD => {
                    let centre = (road_top + road_bottom) / 2;
                    let dash = y == centre && (x / 3) % 2 == 0;
                    if dash { 0.4 } else { 0.05 * (fine_noise[i] - 0.5) }
                }
                _ => 0.05 * (fine_noise[i] - 0.5),
            };
            for c in 0..3 {
                vis[c * n + i] = (style.rgb[c] + tint[c] + texture).clamp(0.0, 1.0);
            }
            let ir_texture = if style.thermal { 0.04 } else { 0.10 } * (ir_noise[i] - 0.5);
            ir[i] = (style.infrared + ir_texture).clamp(0.0, 1.0);
        }
    }
    Ok((
        RgbImage::new(size, size, vis)?,
        GrayImage::new(size, size, ir)?,
        SegmentationMap::new(size, size, label)?,
    ))
}

/// One visible-band degradation. `severity` is in `[0, 1]` and 0 must be the identity.
pub trait Degradation: Send + Sync {
    fn name(&self) -> &'static str;
    fn apply(&self, image: &RgbImage, severity: f32, rng: &mut ChaCha8Rng) -> RgbImage;
}

/// Mean luminance a white image falls below at full low-light severity.
pub const LOW_LIGHT_FLOOR: f32 = 0.2;

/// Gamma plus gain darkening.
pub struct LowLight;

impl Degradation for LowLight {
    fn name(&self) -> &'static str {
        "low_light"
    }

    fn apply(&self, image: &RgbImage, severity: f32, _rng: &mut ChaCha8Rng) -> RgbImage {
        let gain = 1.0 - 0.85 * severity;
        let gamma = 1.0 + 1.5 * severity;
        image.map(|v| gain * v.powf(gamma))
    }
}

/// Atmospheric scattering blend toward a bright airlight.
pub struct Haze {
    pub airlight: f32,
}

impl Degradation for Haze {
    fn name(&self) -> &'static str {
        "haze"
    }

    fn apply(&self, image: &RgbImage, severity: f32, _rng: &mut ChaCha8Rng) -> RgbImage {
        let t = 1.0 - 0.7 * severity;
        image.map(|v| v * t + self.airlight * (1.0 - t))
    }
}

/// Additive Gaussian sensor noise.
pub struct GaussianNoise {
    pub max_sigma: f32,
}

impl Degradation for GaussianNoise {
    fn name(&self) -> &'static str {
        "noise"
    }

    fn apply(&self, image: &RgbImage, severity: f32, rng: &mut ChaCha8Rng) -> RgbImage {
        let sigma = self.max_sigma * severity;
        if sigma <= 0.0 {
            return image.clone();
        }
        let normal = Normal::new(0.0f32, sigma).expect("sigma is positive");
        image.map(|v| v + normal.sample(rng))
    }
}

/// Degradations looked up by name.
pub struct DegradationRegistry {
    entries: BTreeMap<&'static str, Box<dyn Degradation>>,
}

impl Default for DegradationRegistry {
    fn default() -> Self {
        let mut r = Self { entries: BTreeMap::new() };
        r.register(Box::new(LowLight));
        r.register(Box::new(Haze { airlight: 0.85 }));
        r.register(Box::new(GaussianNoise { max_sigma: 0.12 }));
        r
    }
}

impl DegradationRegistry {
    pub fn register(&mut self, d: Box<dyn Degradation>) {
        self.entries.insert(d.name(), d);
    }

    pub fn get(&self, name: &str) -> Result<&dyn Degradation> {
        self.entries.get(name).map(|b| b.as_ref()).ok_or_else(|| {
            Error::Param(format!(
                "unknown degradation {name:?}; known: {}",
                self.names().collect::<Vec<_>>().join(", ")
            ))
        })
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.entries.keys().copied()
    }

    /// Applies `kinds` in order with a shared seeded stream.
    pub fn degrade<S: AsRef<str>>(&self, clean: &RgbImage, kinds: &[S], severity: f32, seed: u64) -> Result<RgbImage> {
        if !(0.0..=1.0).contains(&severity) {
            return param(format!("severity must lie in [0, 1], got {severity}"));
        }
        let stages = kinds.iter().map(|k| self.get(k.as_ref())).collect::<Result<Vec<_>>>()?;
        let mut rng = seeded_rng(seed ^ 0xde9a_de00);
        let mut out = clean.clone();
        for stage in stages {
            out = stage.apply(&out, severity, &mut rng);
        }
        Ok(out)
    }
}

pub fn degrade<S: AsRef<str>>(clean: &RgbImage, kinds: &[S], severity: f32, seed: u64) -> Result<RgbImage> {
    DegradationRegistry::default().degrade(clean, kinds, severity, seed)
}

/// Which degradations are applied to build the degraded visible input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationRecipe {
    pub kinds: Vec<String>,
    pub severity: f32,
}

impl Default for DegradationRecipe {
    fn default() -> Self {
        Self { kinds: vec!["low_light".into(), "noise".into()], severity: 0.7 }
    }
}

/// One aligned training/evaluation record.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub name: String,
    pub seed: u64,
    pub clean_vis: RgbImage,
    pub infrared: GrayImage,
    pub label: SegmentationMap,
    pub degraded_vis: RgbImage,
}

impl SceneSample {
    pub fn infrared_rgb(&self) -> RgbImage {
        RgbImage::from_gray(&self.infrared)
    }
}

pub fn generate_scene(seed: u64, size: usize, palette: &ClassPalette, recipe: &DegradationRecipe) -> Result<SceneSample> {
    let (clean_vis, infrared, label) = synthesize_scene(seed, size, palette)?;
    let degraded_vis = degrade(&clean_vis, &recipe.kinds, recipe.severity, seed)?;
    Ok(SceneSample { name: format!("{seed:06}"), seed, clean_vis, infrared, label, degraded_vis })
}

/// `n` scenes with consecutive seeds starting at `first_seed`.
pub fn generate_dataset(
    n: usize,
    size: usize,
    first_seed: u64,
    palette: &ClassPalette,
    recipe: &DegradationRecipe,
) -> Result<Vec<SceneSample>> {
    (0..n as u64).map(|i| generate_scene(first_seed + i, size, palette, recipe)).collect()
}

pub const VIS_DIR: &str = "vis";
pub const IR_DIR: &str = "ir";
pub const LABEL_DIR: &str = "labels";
pub const DEGRADED_DIR: &str = "degraded";

/// Writes `vis/`, `ir/`, `labels/` and `degraded/` with matching `<name>.png` files.
pub fn write_dataset_dir(samples: &[SceneSample], root: &Path) -> Result<()> {
    for d in [VIS_DIR, IR_DIR, LABEL_DIR, DEGRADED_DIR] {
        fs::create_dir_all(root.join(d))?;
    }
    for s in samples {
        let file = format!("{}.png", s.name);
        s.clean_vis.save_png(&root.join(VIS_DIR).join(&file))?;
        s.infrared.save_png(&root.join(IR_DIR).join(&file))?;
        s.label.save_png(&root.join(LABEL_DIR).join(&file))?;
        s.degraded_vis.save_png(&root.join(DEGRADED_DIR).join(&file))?;
    }
    Ok(())
}

fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

/// Loads an MFNet-style directory. `vis/`, `ir/` and `labels/` must hold the same file
/// names; `degraded/` is optional and, when absent, degraded inputs are produced from
/// `recipe` seeded by the sample index.
pub fn load_dataset_dir(root: &Path, recipe: &DegradationRecipe) -> Result<Vec<SceneSample>> {
    if !root.is_dir() {
        return Err(Error::Ingest(format!("{} is not a directory", root.display())));
    }
    let vis = png_stems(&root.join(VIS_DIR))?;
    let ir = png_stems(&root.join(IR_DIR))?;
    let labels = png_stems(&root.join(LABEL_DIR))?;
    let degraded_dir = root.join(DEGRADED_DIR);
    let degraded = degraded_dir.is_dir().then(|| png_stems(&degraded_dir)).transpose()?;

    let mut problems = Vec::new();
    let mut all: Vec<&String> = vis.keys().chain(ir.keys()).chain(labels.keys()).collect();
    all.sort();
    all.dedup();
    for stem in &all {
        for (dir, set) in [(VIS_DIR, &vis), (IR_DIR, &ir), (LABEL_DIR, &labels)] {
            if !set.contains_key(*stem) {
                problems.push(format!("{stem}.png missing from {dir}/"));
            }
        }
        if let Some(d) = &degraded {
            if !d.contains_key(*stem) {
                problems.push(format!("{stem}.png missing from {DEGRADED_DIR}/"));
            }
        }
    }
    if !problems.is_empty() {
        return Err(Error::Ingest(problems.join("; ")));
    }

    let mut samples = Vec::with_capacity(vis.len());
    for (index, (stem, vis_path)) in vis.iter().enumerate() {
        let clean_vis = RgbImage::load_png(vis_path)?;
        let infrared = GrayImage::load_png(&ir[stem])?;
        let label = SegmentationMap::load_png(&labels[stem])?;
        let seed = stem.parse::<u64>().unwrap_or(index as u64);
        let degraded_vis = match &degraded {
            Some(d) => RgbImage::load_png(&d[stem])?,
            None => degrade(&clean_vis, &recipe.kinds, recipe.severity, seed)?,
        };
        let dims = clean_vis.dims();
        if infrared.dims() != dims || label.dims() != dims || degraded_vis.dims() != dims {
            return Err(Error::Ingest(format!("{stem}: modalities have different dimensions")));
        }
        samples.push(SceneSample { name: stem.clone(), seed, clean_vis, infrared, label, degraded_vis });
    }
    Ok(samples)
}
