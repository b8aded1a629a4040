//! Small tensor building blocks shared by the encoders, retrieval layers and
//! extractor, plus a seeded parameter store.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Named trainable tensors. Initialization draws from a ChaCha stream so a
/// store is a pure function of its seed and the order of registration.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    frozen_prefixes: Vec<String>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Uniform(f64),
    Const(f64),
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            vars: BTreeMap::new(),
            frozen_prefixes: Vec::new(),
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Tensors registered under `prefix` from now on are handed out detached:
    /// they take part in forward passes but never receive gradients.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        self.frozen_prefixes.push(prefix.to_string());
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen_prefixes.iter().any(|p| name.starts_with(p.as_str()))
    }

    pub fn tensor(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::invalid(format!("parameter {name} registered twice")));
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Uniform(a) => (0..n).map(|_| self.rng.random_range(-a..a)).collect(),
            Init::Const(c) => vec![c; n],
        };
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let handle = if self.is_frozen(name) {
            var.as_tensor().detach()
        } else {
            var.as_tensor().clone()
        };
        self.vars.insert(name.to_string(), var);
        Ok(handle)
    }

    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize, bias: bool) -> Result<Linear> {
        let a = 1.0 / (d_in as f64).sqrt();
        let weight = self.tensor(&format!("{name}.weight"), &[d_in, d_out], Init::Uniform(a))?;
        let bias = if bias {
            Some(self.tensor(&format!("{name}.bias"), &[d_out], Init::Uniform(a))?)
        } else {
            None
        };
        Ok(Linear { weight, bias })
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    /// Variables that an optimizer should update.
    pub fn trainable(&self) -> Vec<(String, Var)> {
        self.vars
            .iter()
            .filter(|(k, _)| !self.is_frozen(k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn with_prefix(&self, prefix: &str) -> Vec<(String, Var)> {
        self.vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    /// Overwrites every registered parameter from `values`; names and shapes must match.
    pub fn load(&self, values: &std::collections::HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let src = values
                .get(name)
                .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))?;
            if src.dims() != var.dims() {
                return Err(Error::invalid(format!(
                    "parameter {name}: shape {:?} != {:?}",
                    src.dims(),
                    var.dims()
                )));
            }
            var.set(&src.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
            .collect()
    }
}

/// Affine map over the last axis; weight is stored `(d_in, d_out)`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn from_parts(weight: Tensor, bias: Option<Tensor>) -> Self {
        Self { weight, bias }
    }

    /// Identity map of width `c` without bias.
    pub fn identity(c: usize, dtype: DType) -> Result<Self> {
        Ok(Self { weight: Tensor::eye(c, dtype, &Device::Cpu)?, bias: None })
    }

    pub fn d_in(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let last = *dims.last().ok_or_else(|| Error::invalid("linear on a scalar"))?;
        if last != self.d_in() {
            return Err(Error::invalid(format!(
                "linear expects width {}, got {last}",
                self.d_in()
            )));
        }
        let rows = x.elem_count() / last;
        let y = x.reshape((rows, last))?.matmul(&self.weight)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out = dims;
        *out.last_mut().unwrap() = self.d_out();
        Ok(y.reshape(out)?)
    }
}

/// Softmax along `dim`, max-shifted.
pub fn softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?;
    let num = x.broadcast_sub(&max)?.exp()?;
    let den = num.sum_keepdim(dim)?;
    Ok(num.broadcast_div(&den)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// Scales each row of `x` (last axis = time) to unit RMS.
pub fn rms_normalize(x: &Tensor, eps: f64) -> Result<Tensor> {
    let ms = x.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(x.broadcast_div(&(ms + eps)?.sqrt()?)?)
}

/// Learned per-channel layer normalization over the last axis.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub shift: Tensor,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Result<Self> {
        Ok(Self {
            gain: store.tensor(&format!("{name}.gain"), &[c], Init::Const(1.0))?,
            shift: store.tensor(&format!("{name}.shift"), &[c], Init::Const(0.0))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gain)?.broadcast_add(&self.shift)?)
    }
}

/// `(rows, len)` tensor from equal-length sample rows.
pub fn rows_to_tensor(rows: &[&[f64]], dtype: DType) -> Result<Tensor> {
    let len = rows.first().map(|r| r.len()).unwrap_or(0);
    if rows.iter().any(|r| r.len() != len) {
        return Err(Error::invalid("rows must share a length"));
    }
    let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    Ok(Tensor::from_vec(flat, (rows.len(), len), &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn tensor_to_rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.to_dtype(DType::F64)?.to_vec2::<f64>()?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
