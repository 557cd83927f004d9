//! Shared network plumbing: a deterministic parameter store, seeded initialisation and the
//! few layers the models are built from.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Module, Tensor, Var, D};
use candle_nn::{Conv2d, Conv2dConfig, GroupNorm, Linear};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{param, Error, Result};

/// Named trainable tensors in a fixed (lexicographic) order.
///
/// Cloning shares the underlying storage; use [`ParamStore::deep_clone`] for an independent copy.
#[derive(Clone, Default)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("tensors", &self.vars.len())
            .field("elements", &self.num_elements())
            .finish()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: String, t: Tensor) -> Result<Tensor> {
        if self.vars.contains_key(&name) {
            return param(format!("parameter {name} registered twice"));
        }
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name, var);
        Ok(out)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// SHA-256 over names, shapes and raw little-endian values.
    pub fn checksum(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in &self.vars {
            h.update(name.as_bytes());
            for d in var.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in var.as_tensor().flatten_all()?.to_vec1::<f32>()? {
                h.update(v.to_le_bytes());
            }
        }
        Ok(format!("{:x}", h.finalize()))
    }

    pub fn snapshot(&self) -> Result<BTreeMap<String, Vec<f32>>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().flatten_all()?.to_vec1::<f32>()?)))
            .collect()
    }

    /// Independent copy with fresh storage.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (k, v) in &self.vars {
            vars.insert(k.clone(), Var::from_tensor(&v.as_tensor().copy()?)?);
        }
        Ok(Self { vars })
    }

    pub fn to_safetensors(&self) -> Result<Vec<u8>> {
        let data: Vec<(&String, &Tensor)> = self.vars.iter().map(|(k, v)| (k, v.as_tensor())).collect();
        safetensors::tensor::serialize(data, None)
            .map_err(|e| Error::Param(format!("serialising parameters: {e}")))
    }

    /// Overwrites every parameter from a safetensors buffer; names and shapes must match exactly.
    pub fn load_safetensors(&self, bytes: &[u8]) -> Result<()> {
        let loaded = candle_core::safetensors::load_buffer(bytes, &Device::Cpu)?;
        if loaded.len() != self.vars.len() {
            return param(format!(
                "parameter count mismatch: file has {}, model has {}",
                loaded.len(),
                self.vars.len()
            ));
        }
        // Validate everything before mutating anything.
        for (name, var) in &self.vars {
            match loaded.get(name) {
                Some(t) if t.dims() == var.dims() => {}
                Some(t) => {
                    return param(format!("{name}: shape {:?} vs {:?}", t.dims(), var.dims()))
                }
                None => return param(format!("missing parameter {name}")),
            }
        }
        for (name, var) in &self.vars {
            var.set(&loaded[name].to_dtype(DType::F32)?)?;
        }
        Ok(())
    }

    /// Copies values from another store with identical layout.
    pub fn copy_from(&self, other: &ParamStore) -> Result<()> {
        self.load_safetensors(&other.to_safetensors()?)
    }
}

/// Registers parameters under a dotted prefix, drawing initial values from a seeded stream.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self { store, rng, prefix: String::new() }
    }

    pub fn pp(&mut self, name: &str) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        ParamBuilder { store: self.store, rng: self.rng, prefix }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    fn uniform(&mut self, name: &str, shape: &[usize], bound: f32) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let v: Vec<f32> = (0..n)
            .map(|_| if bound == 0.0 { 0.0 } else { self.rng.random_range(-bound..bound) })
            .collect();
        let t = Tensor::from_vec(v, shape, &Device::Cpu)?;
        let full = self.full_name(name);
        self.store.insert(full, t)
    }

    fn constant(&mut self, name: &str, shape: &[usize], value: f32) -> Result<Tensor> {
        let t = (Tensor::ones(shape, DType::F32, &Device::Cpu)? * value as f64)?;
        let full = self.full_name(name);
        self.store.insert(full, t)
    }

    /// Square-kernel convolution with "same" padding for stride 1.
    pub fn conv2d(&mut self, c_in: usize, c_out: usize, k: usize, stride: usize) -> Result<Conv2d> {
        self.conv2d_scaled(c_in, c_out, k, stride, 1.0)
    }

    /// As [`Self::conv2d`] with the weight bound multiplied by `scale` (0 gives a zero layer).
    pub fn conv2d_scaled(
        &mut self,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        scale: f32,
    ) -> Result<Conv2d> {
        let bound = 1.0 / ((c_in * k * k) as f32).sqrt();
        let w = self.uniform("weight", &[c_out, c_in, k, k], bound * scale)?;
        let b = self.uniform("bias", &[c_out], bound * scale)?;
        let cfg = Conv2dConfig { padding: k / 2, stride, ..Default::default() };
        Ok(Conv2d::new(w, Some(b), cfg))
    }

    pub fn linear(&mut self, d_in: usize, d_out: usize) -> Result<Linear> {
        let bound = 1.0 / (d_in as f32).sqrt();
        let w = self.uniform("weight", &[d_out, d_in], bound)?;
        let b = self.uniform("bias", &[d_out], bound)?;
        Ok(Linear::new(w, Some(b)))
    }

    pub fn group_norm(&mut self, groups: usize, channels: usize) -> Result<GroupNorm> {
        let w = self.constant("weight", &[channels], 1.0)?;
        let b = self.constant("bias", &[channels], 0.0)?;
        Ok(GroupNorm::new(w, b, channels, groups, 1e-5)?)
    }

    /// A `[size]` vector initialised to `value`.
    pub fn vector(&mut self, name: &str, size: usize, value: f32) -> Result<Tensor> {
        self.constant(name, &[size], value)
    }
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Parameter-free instance normalisation over the spatial axes of `(B, C, H, W)`.
#[derive(Debug, Clone, Copy)]
pub struct InstanceNorm {
    pub eps: f64,
}

impl Default for InstanceNorm {
    fn default() -> Self {
        Self { eps: 1e-5 }
    }
}

impl Module for InstanceNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let flat = x.reshape((b, c, h * w))?;
        let mean = flat.mean_keepdim(D::Minus1)?;
        let centred = flat.broadcast_sub(&mean)?;
        let var = centred.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centred.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        normed.reshape((b, c, h, w))
    }
}

/// Sinusoidal embedding of integer timesteps, `(B, dim)`.
pub fn timestep_embedding(ts: &[usize], dim: usize, device: &Device) -> Result<Tensor> {
    if dim == 0 || dim % 2 != 0 {
        return param(format!("timestep embedding dimension must be even and positive, got {dim}"));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let freqs = (0..half).map(|i| (-(10_000f64.ln()) * i as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|f| t as f64 * f).collect();
        out.extend(args.iter().map(|a| a.sin() as f32));
        out.extend(args.iter().map(|a| a.cos() as f32));
    }
    Ok(Tensor::from_vec(out, (ts.len(), dim), device)?)
}

pub fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::silu(x)?)
}

/// Mean squared error, reduced to a scalar.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.sqr()?.mean_all()?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn instance_norm_output_is_standardised() {
        let mut rng = seeded_rng(1);
        let v: Vec<f32> = (0..2 * 3 * 8 * 8)
            .map(|_| 3.0 + 2.5 * <StandardNormal as Distribution<f32>>::sample(&StandardNormal, &mut rng))
            .collect();
        let x = Tensor::from_vec(v, (2, 3, 8, 8), &Device::Cpu).unwrap();
        let y = InstanceNorm::default().forward(&x).unwrap().to_dtype(DType::F64).unwrap();
        let flat = y.reshape((6, 64)).unwrap();
        let mean = flat.mean(1).unwrap().to_vec1::<f64>().unwrap();
        let var = flat.sqr().unwrap().mean(1).unwrap().to_vec1::<f64>().unwrap();
        for (m, v) in mean.iter().zip(var) {
            assert!(m.abs() < 1e-3, "mean {m}");
            assert!((v - 1.0).abs() < 1e-3, "var {v}");
        }
    }

    #[test]
    fn builder_is_seed_deterministic() {
        let build = |seed| {
            let mut store = ParamStore::new();
            let mut rng = seeded_rng(seed);
            let mut pb = ParamBuilder::new(&mut store, &mut rng);
            pb.pp("a").conv2d(3, 4, 3, 1).unwrap();
            pb.pp("b").linear(4, 2).unwrap();
            store.checksum().unwrap()
        };
        assert_eq!(build(7), build(7));
        assert_ne!(build(7), build(8));
    }

    #[test]
    fn safetensors_round_trip_and_strictness() {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(2);
        ParamBuilder::new(&mut store, &mut rng).pp("c").conv2d(2, 2, 3, 1).unwrap();
        let bytes = store.to_safetensors().unwrap();
        let copy = store.deep_clone().unwrap();
        for v in copy.vars() {
            v.set(&v.zeros_like().unwrap()).unwrap();
        }
        assert_ne!(copy.checksum().unwrap(), store.checksum().unwrap());
        copy.load_safetensors(&bytes).unwrap();
        assert_eq!(copy.checksum().unwrap(), store.checksum().unwrap());

        let mut other = ParamStore::new();
        ParamBuilder::new(&mut other, &mut rng).pp("c").conv2d(2, 3, 3, 1).unwrap();
        assert!(other.load_safetensors(&bytes).is_err());
    }

    #[test]
    fn embedding_shape() {
        let e = timestep_embedding(&[1, 500], 16, &Device::Cpu).unwrap();
        assert_eq!(e.dims(), &[2, 16]);
        assert!(timestep_embedding(&[1], 7, &Device::Cpu).is_err());
    }
}
