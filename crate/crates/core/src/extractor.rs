//! Feature fusion and the mask-estimating separator.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Init, LayerNorm, Linear, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractorDims {
    pub channels: usize,
    pub hidden: usize,
    pub blocks: usize,
}

/// Dilation of block `i`: 1, 2, 4, 8, then repeating.
pub fn dilation(i: usize) -> usize {
    1 << (i % 4)
}

/// Test hook pinning the mask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MaskOverride {
    #[default]
    None,
    Ones,
    Zeros,
}

/// Pre-norm residual block: kernel-3 dilated convolution, ReLU, projection.
#[derive(Clone, Debug)]
pub struct TcnBlock {
    pub norm: LayerNorm,
    pub conv: Linear,
    pub out: Linear,
    pub dilation: usize,
}

impl TcnBlock {
    pub fn new(store: &mut ParamStore, name: &str, dims: ExtractorDims, dilation: usize) -> Result<Self> {
        let c = dims.channels;
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), c)?,
            conv: store.linear(&format!("{name}.conv"), 3 * c, dims.hidden, true)?,
            out: store.linear(&format!("{name}.out"), dims.hidden, c, true)?,
            dilation,
        })
    }

    /// `(B, L, C)` → `(B, L, C)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let l = x.dim(1)?;
        let d = self.dilation;
        let h = self.norm.forward(x)?.pad_with_zeros(1, d, d)?;
        let taps = [h.narrow(1, 0, l)?, h.narrow(1, d, l)?, h.narrow(1, 2 * d, l)?];
        let h = self.conv.forward(&Tensor::cat(&taps, D::Minus1)?)?.relu()?;
        Ok((x + self.out.forward(&h)?)?)
    }
}

#[derive(Clone, Debug)]
pub struct Extractor {
    pub dims: ExtractorDims,
    pub null_speaker: Tensor,
    pub null_context: Tensor,
    pub fusion: Linear,
    pub blocks: Vec<TcnBlock>,
    pub mask_head: Linear,
}

impl Extractor {
    pub fn new(store: &mut ParamStore, name: &str, dims: ExtractorDims) -> Result<Self> {
        let c = dims.channels;
        let a = 1.0 / (c as f64).sqrt();
        let null_speaker = store.tensor(&format!("{name}.null_speaker"), &[c], Init::Uniform(a))?;
        let null_context = store.tensor(&format!("{name}.null_context"), &[c], Init::Uniform(a))?;
        let fusion = store.linear(&format!("{name}.fusion"), 4 * c, c, true)?;
        let blocks = (0..dims.blocks)
            .map(|i| TcnBlock::new(store, &format!("{name}.block{i}"), dims, dilation(i)))
            .collect::<Result<_>>()?;
        let mask_head = store.linear(&format!("{name}.mask"), c, c, true)?;
        Ok(Self { dims, null_speaker, null_context, fusion, blocks, mask_head })
    }

    /// Concatenates `[Y, V, M^s, M^c]` along channels; absent components are
    /// replaced by their learned null embedding. All inputs `(B, L, C)`.
    pub fn fuse(&self, y: &Tensor, v: &Tensor, ms: Option<&Tensor>, mc: Option<&Tensor>) -> Result<Tensor> {
        let shape = y.dims3()?;
        let check = |t: &Tensor, what: &str| -> Result<()> {
            if t.dims3()? != shape {
                return Err(Error::invalid(format!("{what} is {:?}, mixture latent is {:?}", t.dims(), y.dims())));
            }
            Ok(())
        };
        check(v, "cue latent")?;
        let null = |t: &Tensor| t.broadcast_as(shape).map_err(Error::from);
        let ms = match ms {
            Some(m) => {
                check(m, "speaker feature")?;
                m.clone()
            }
            None => null(&self.null_speaker)?,
        };
        let mc = match mc {
            Some(m) => {
                check(m, "contextual feature")?;
                m.clone()
            }
            None => null(&self.null_context)?,
        };
        Ok(Tensor::cat(&[y, v, &ms, &mc], D::Minus1)?)
    }

    /// Mask in (0, 1) from fused features `(B, L, 4C)`.
    pub fn mask(&self, fused: &Tensor) -> Result<Tensor> {
        let mut h = self.fusion.forward(fused)?;
        for b in &self.blocks {
            h = b.forward(&h)?;
        }
        nn::sigmoid(&self.mask_head.forward(&h)?)
    }

    /// `X̂ = mask(R) ⊙ Y`. Returns `(estimate, mask)`.
    pub fn extract(&self, fused: &Tensor, y: &Tensor, hook: MaskOverride) -> Result<(Tensor, Tensor)> {
        let mask = match hook {
            MaskOverride::None => self.mask(fused)?,
            MaskOverride::Ones => y.ones_like()?,
            MaskOverride::Zeros => y.zeros_like()?,
        };
        Ok(((&mask * y)?, mask))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn setup() -> (Extractor, Tensor, Tensor) {
        let mut s = ParamStore::new(DType::F64, 2);
        let e = Extractor::new(&mut s, "x", ExtractorDims { channels: 4, hidden: 6, blocks: 4 }).unwrap();
        let y = Tensor::randn(0.0, 1.0, (2, 5, 4), &Device::Cpu).unwrap().to_dtype(DType::F64).unwrap();
        let v = Tensor::randn(0.0, 1.0, (2, 5, 4), &Device::Cpu).unwrap().to_dtype(DType::F64).unwrap();
        (e, y, v)
    }

    #[test]
    fn fused_width_is_four_channels() {
        let (e, y, v) = setup();
        let r = e.fuse(&y, &v, Some(&y), Some(&v)).unwrap();
        assert_eq!(r.dims(), &[2, 5, 16]);
        let nulls = e.fuse(&y, &v, None, None).unwrap();
        let tail = nulls.narrow(2, 8, 4).unwrap().to_vec3::<f64>().unwrap();
        let want = e.null_speaker.to_vec1::<f64>().unwrap();
        assert!(tail.iter().flatten().all(|row| row == &want));
    }

    #[test]
    fn fuse_is_order_sensitive_and_checks_shapes() {
        let (e, y, v) = setup();
        let a = e.fuse(&y, &v, None, None).unwrap();
        let b = e.fuse(&v, &y, None, None).unwrap();
        assert_ne!(a.to_vec3::<f64>().unwrap(), b.to_vec3::<f64>().unwrap());
        let short = y.narrow(1, 0, 4).unwrap();
        assert!(e.fuse(&y, &v, Some(&short), None).is_err());
    }

    #[test]
    fn mask_hooks_and_bounds() {
        let (e, y, v) = setup();
        let r = e.fuse(&y, &v, None, None).unwrap();
        let (x, _) = e.extract(&r, &y, MaskOverride::Ones).unwrap();
        assert_eq!(x.to_vec3::<f64>().unwrap(), y.to_vec3::<f64>().unwrap());
        let (z, _) = e.extract(&r, &y, MaskOverride::Zeros).unwrap();
        assert!(z.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().all(|v| *v == 0.0));
        let (_, m) = e.extract(&r, &y, MaskOverride::None).unwrap();
        assert!(m.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn block_keeps_shape() {
        let (e, y, _) = setup();
        assert_eq!(e.blocks[3].dilation, 8);
        // dilation longer than the sequence still works
        assert_eq!(e.blocks[3].forward(&y).unwrap().dims(), y.dims());
    }
}
