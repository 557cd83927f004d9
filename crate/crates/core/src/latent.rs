use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{param, Result};

/// A batch of latent feature grids, `(B, C, h, w)`.
///
/// The wrapped tensor may carry an autodiff graph; [`LatentGrid::detach`] cuts it.
#[derive(Debug, Clone)]
pub struct LatentGrid(Tensor);

impl LatentGrid {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.rank() != 4 {
            return param(format!("latent grid must be rank 4, got shape {:?}", t.dims()));
        }
        Ok(Self(t))
    }

    /// Standard-normal grid drawn from `rng`, so sampling stays reproducible per seed.
    pub fn standard_normal<R: Rng>(
        rng: &mut R,
        dims: (usize, usize, usize, usize),
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let n = dims.0 * dims.1 * dims.2 * dims.3;
        let v: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Self::new(Tensor::from_vec(v, dims, device)?.to_dtype(dtype)?)
    }

    pub fn filled(dims: (usize, usize, usize, usize), value: f64, dtype: DType) -> Result<Self> {
        Self::new((Tensor::ones(dims, dtype, &Device::Cpu)? * value)?)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.0.dims4().expect("rank checked at construction")
    }

    pub fn same_shape(&self, other: &LatentGrid) -> bool {
        self.0.dims() == other.0.dims()
    }

    pub fn detach(&self) -> Self {
        Self(self.0.detach())
    }

    pub fn to_vec(&self) -> Result<Vec<f64>> {
        Ok(self.0.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
    }

    /// Root-mean-square over all elements.
    pub fn rms(&self) -> Result<f64> {
        let v = self.0.to_dtype(DType::F64)?.sqr()?.mean_all()?.to_scalar::<f64>()?;
        Ok(v.sqrt())
    }

    pub fn max_abs_diff(&self, other: &LatentGrid) -> Result<f64> {
        if !self.same_shape(other) {
            return param("latent shapes differ");
        }
        let d = (self.0.to_dtype(DType::F64)? - other.0.to_dtype(DType::F64)?)?;
        Ok(d.abs()?.flatten_all()?.max(0)?.to_scalar::<f64>()?)
    }
}

pub(crate) fn ensure_same(a: &LatentGrid, b: &LatentGrid, what: &str) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        param(format!("{what}: shape {:?} vs {:?}", a.tensor().dims(), b.tensor().dims()))
    }
}
