//! Closed-form diffusion arithmetic: the variance schedule, forward corruption,
//! single-step clean-latent estimates and deterministic reverse transitions.
//!
//! Timesteps are 1-indexed (`1..=T`); `alpha_bar(0)` is defined as 1 so that a transition
//! to timestep 0 lands exactly on the clean estimate.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{param, Result};
use crate::latent::{ensure_same, LatentGrid};

pub const DEFAULT_BETA_MIN: f64 = 1e-4;
pub const DEFAULT_BETA_MAX: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas linearly interpolated from `beta_min` (t = 1) to `beta_max` (t = T).
    pub fn linear(t_train: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if t_train == 0 {
            return param("schedule needs at least one timestep");
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return param(format!(
                "beta range must satisfy 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
            ));
        }
        let betas = if t_train == 1 {
            vec![beta_min]
        } else {
            let span = beta_max - beta_min;
            (0..t_train)
                .map(|i| beta_min + span * i as f64 / (t_train - 1) as f64)
                .collect()
        };
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return param("schedule needs at least one timestep");
        }
        if betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return param("every beta must lie in (0, 1)");
        }
        if betas.windows(2).any(|w| w[1] < w[0]) {
            return param("betas must be non-decreasing");
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars: Vec<f64> = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        if alpha_bars.last().is_some_and(|&a| a <= 0.0) {
            return param("cumulative alpha underflowed to zero");
        }
        Ok(Self { betas, alphas, alpha_bars })
    }

    /// Number of training timesteps `T`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `ᾱ_t` for `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        match t {
            0 => Ok(1.0),
            t if t <= self.len() => Ok(self.alpha_bars[t - 1]),
            t => param(format!("timestep {t} outside [0, {}]", self.len())),
        }
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            return param(format!("timestep {t} outside [1, {}]", self.len()));
        }
        Ok(())
    }
}

pub fn build_schedule(t_train: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    NoiseSchedule::linear(t_train, beta_min, beta_max)
}

/// `√a·x + √(1−a)·y`, the shared shape of the forward and reverse formulas.
fn blend(x: &LatentGrid, y: &LatentGrid, alpha_bar: f64) -> Result<LatentGrid> {
    let a = alpha_bar.sqrt();
    let b = (1.0 - alpha_bar).sqrt();
    LatentGrid::new(((x.tensor() * a)? + (y.tensor() * b)?)?)
}

/// `z_t = √ᾱ_t·z0 + √(1−ᾱ_t)·ε`.
pub fn forward_sample(
    z0: &LatentGrid,
    t: usize,
    eps: &LatentGrid,
    s: &NoiseSchedule,
) -> Result<LatentGrid> {
    ensure_same(z0, eps, "forward_sample")?;
    s.check_step(t)?;
    blend(z0, eps, s.alpha_bar(t)?)
}

/// Forward corruption with one timestep per batch element.
pub fn forward_sample_batch(
    z0: &LatentGrid,
    ts: &[usize],
    eps: &LatentGrid,
    s: &NoiseSchedule,
) -> Result<LatentGrid> {
    ensure_same(z0, eps, "forward_sample_batch")?;
    let (b, ..) = z0.dims();
    if ts.len() != b {
        return param(format!("{} timesteps for a batch of {b}", ts.len()));
    }
    let mut a = Vec::with_capacity(b);
    let mut c = Vec::with_capacity(b);
    for &t in ts {
        s.check_step(t)?;
        let ab = s.alpha_bar(t)?;
        a.push(ab.sqrt());
        c.push((1.0 - ab).sqrt());
    }
    let dev = z0.tensor().device();
    let dtype = z0.tensor().dtype();
    let a = Tensor::from_vec(a, (b, 1, 1, 1), dev)?.to_dtype(dtype)?;
    let c = Tensor::from_vec(c, (b, 1, 1, 1), dev)?.to_dtype(dtype)?;
    LatentGrid::new(
        (z0.tensor().broadcast_mul(&a)? + eps.tensor().broadcast_mul(&c)?)?,
    )
}

/// Single-step clean estimate `z̃_{t→0} = (z_t − √(1−ᾱ_t)·ε) / √ᾱ_t`.
pub fn estimate_x0(
    z_t: &LatentGrid,
    eps: &LatentGrid,
    t: usize,
    s: &NoiseSchedule,
) -> Result<LatentGrid> {
    ensure_same(z_t, eps, "estimate_x0")?;
    let ab = s.alpha_bar(t)?;
    let scaled = (z_t.tensor() - (eps.tensor() * (1.0 - ab).sqrt())?)?;
    LatentGrid::new((scaled / ab.sqrt())?)
}

/// Deterministic transition `z_{t_next} = √ᾱ_{t_next}·z̃ + √(1−ᾱ_{t_next})·ε`.
/// `t_next = 0` returns the clean estimate itself.
pub fn ddim_step(
    x0_hat: &LatentGrid,
    eps: &LatentGrid,
    t_next: usize,
    s: &NoiseSchedule,
) -> Result<LatentGrid> {
    ensure_same(x0_hat, eps, "ddim_step")?;
    if t_next == 0 {
        return Ok(x0_hat.clone());
    }
    blend(x0_hat, eps, s.alpha_bar(t_next)?)
}

/// Strictly decreasing inference timesteps, `T` first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimestepPlan {
    steps: Vec<usize>,
}

impl TimestepPlan {
    pub fn new(steps: Vec<usize>, t_train: usize) -> Result<Self> {
        if steps.is_empty() {
            return param("timestep plan is empty");
        }
        if steps.iter().any(|&t| t == 0 || t > t_train) {
            return param(format!("plan indices must lie in [1, {t_train}]"));
        }
        if steps.windows(2).any(|w| w[1] >= w[0]) {
            return param("plan must be strictly decreasing");
        }
        Ok(Self { steps })
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// `(t, t_next)` pairs; the last transition goes to 0.
    pub fn transitions(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.steps
            .iter()
            .enumerate()
            .map(|(k, &t)| (t, self.steps.get(k + 1).copied().unwrap_or(0)))
    }
}

/// Uniform stride from `T` down to 1, both endpoints kept (a single step keeps only `T`).
pub fn subsample_timesteps(t_train: usize, n_steps: usize) -> Result<TimestepPlan> {
    if n_steps == 0 || n_steps > t_train {
        return param(format!("need 1 <= n_steps <= T, got n_steps={n_steps}, T={t_train}"));
    }
    let steps = if n_steps == 1 {
        vec![t_train]
    } else {
        let stride = (t_train - 1) as f64 / (n_steps - 1) as f64;
        (0..n_steps)
            .map(|k| (t_train as f64 - stride * k as f64).round() as usize)
            .collect()
    };
    TimestepPlan::new(steps, t_train)
}


#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use candle_core::{DType, Device};

    fn grid(v: f64) -> LatentGrid {
        LatentGrid::filled((1, 2, 3, 3), v, DType::F64).unwrap()
    }

    fn all_close(g: &LatentGrid, v: f64, tol: f64) -> bool {
        g.to_vec().unwrap().iter().all(|x| (x - v).abs() <= tol)
    }

    #[test]
    fn cumulative_products() {
        let s = NoiseSchedule::linear(2, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bars(), &[0.5, 0.25]);
        let s = NoiseSchedule::linear(1, 0.1, 0.1).unwrap();
        assert_relative_eq!(s.alpha_bars()[0], 0.9);
        assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
    }

    #[test]
    fn default_schedule_is_valid() {
        let s = build_schedule(1000, DEFAULT_BETA_MIN, DEFAULT_BETA_MAX).unwrap();
        assert_eq!(s.len(), 1000);
        assert_relative_eq!(s.betas()[0], 1e-4);
        assert_relative_eq!(s.betas()[999], 0.02);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bars()[999] > 0.0);
        for (a, b) in s.alphas().iter().zip(s.betas()) {
            assert_eq!(*a, 1.0 - b);
        }
    }

    #[test]
    fn rejects_bad_ranges() {
        assert!(NoiseSchedule::linear(0, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::from_betas(vec![0.2, 0.1]).is_err());
    }

    #[test]
    fn forward_closed_form() {
        let s = NoiseSchedule::from_betas(vec![0.75]).unwrap(); // ᾱ_1 = 0.25
        assert!(all_close(&forward_sample(&grid(1.0), 1, &grid(0.0), &s).unwrap(), 0.5, 1e-15));
        let s = NoiseSchedule::from_betas(vec![0.25]).unwrap(); // ᾱ_1 = 0.75
        assert!(all_close(&forward_sample(&grid(0.0), 1, &grid(1.0), &s).unwrap(), 0.5, 1e-15));
        // ᾱ → 1: coefficient forces identity
        let s = NoiseSchedule::from_betas(vec![1e-15]).unwrap();
        let z = forward_sample(&grid(0.3), 1, &grid(7.0), &s).unwrap();
        assert!(all_close(&z, 0.3, 1e-6));
    }

    #[test]
    fn forward_checks() {
        let s = build_schedule(10, 0.01, 0.1).unwrap();
        let other = LatentGrid::filled((1, 2, 3, 4), 0.0, DType::F64).unwrap();
        assert!(forward_sample(&grid(0.0), 1, &other, &s).is_err());
        assert!(forward_sample(&grid(0.0), 0, &grid(0.0), &s).is_err());
        assert!(forward_sample(&grid(0.0), 11, &grid(0.0), &s).is_err());
    }

    #[test]
    fn x0_estimate_cases() {
        let s = build_schedule(100, 1e-3, 0.05).unwrap();
        let t = 40;
        let ab = s.alpha_bar(t).unwrap();
        let zt = grid(0.7);
        let x0 = estimate_x0(&zt, &grid(0.0), t, &s).unwrap();
        assert!(all_close(&x0, 0.7 / ab.sqrt(), 1e-12));
        let x0 = estimate_x0(&grid((1.0 - ab).sqrt()), &grid(1.0), t, &s).unwrap();
        assert!(all_close(&x0, 0.0, 1e-12));
    }

    #[test]
    fn ddim_step_cases() {
        let s = build_schedule(100, 1e-3, 0.05).unwrap();
        let ab = s.alpha_bar(30).unwrap();
        let z = ddim_step(&grid(2.0), &grid(0.0), 30, &s).unwrap();
        assert!(all_close(&z, ab.sqrt() * 2.0, 1e-12));
        let z = ddim_step(&grid(0.0), &grid(1.0), 30, &s).unwrap();
        assert!(all_close(&z, (1.0 - ab).sqrt(), 1e-12));
        let z = ddim_step(&grid(0.4), &grid(1.0), 0, &s).unwrap();
        assert!(all_close(&z, 0.4, 0.0));
    }

    #[test]
    fn batch_forward_matches_single() {
        let s = build_schedule(50, 1e-3, 0.05).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        use rand::SeedableRng;
        let z0 = LatentGrid::standard_normal(&mut rng, (2, 1, 2, 2), DType::F64, &Device::Cpu)
            .unwrap();
        let eps = LatentGrid::standard_normal(&mut rng, (2, 1, 2, 2), DType::F64, &Device::Cpu)
            .unwrap();
        let zb = forward_sample_batch(&z0, &[5, 40], &eps, &s).unwrap();
        for (i, t) in [5usize, 40].into_iter().enumerate() {
            let a = LatentGrid::new(z0.tensor().narrow(0, i, 1).unwrap()).unwrap();
            let e = LatentGrid::new(eps.tensor().narrow(0, i, 1).unwrap()).unwrap();
            let single = forward_sample(&a, t, &e, &s).unwrap();
            let zi = LatentGrid::new(zb.tensor().narrow(0, i, 1).unwrap()).unwrap();
            assert!(single.max_abs_diff(&zi).unwrap() < 1e-12);
        }
    }

    #[test]
    fn plans() {
        let p = subsample_timesteps(1000, 25).unwrap();
        assert_eq!(p.len(), 25);
        assert_eq!(p.steps()[0], 1000);
        assert_eq!(*p.steps().last().unwrap(), 1);
        assert_eq!(
            subsample_timesteps(10, 10).unwrap().steps(),
            &[10, 9, 8, 7, 6, 5, 4, 3, 2, 1]
        );
        assert_eq!(subsample_timesteps(100, 1).unwrap().steps(), &[100]);
        assert!(subsample_timesteps(10, 11).is_err());
        assert!(subsample_timesteps(10, 0).is_err());
        let tr: Vec<_> = subsample_timesteps(10, 3).unwrap().transitions().collect();
        assert_eq!(tr, vec![(10, 6), (6, 1), (1, 0)]);
    }
}
