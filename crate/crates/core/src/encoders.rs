//! Front ends and back end: waveform → latent sequence, cue stream → latent
//! sequence, speech → speaker vector, latent sequence → waveform.
//!
//! Framing convention: a waveform of `T` samples becomes `L = ceil(T / hop)`
//! latent steps. Step `l` sees samples `[l·hop, l·hop + 2·hop)` (zero padded
//! past the end), so consecutive frames overlap by half. The decoder inverts
//! this with overlap-add and trims to the requested length.

use candle_core::{DType, Tensor, D};

use crate::error::{Error, Result};
use crate::nn::{self, Linear, ParamStore};
use crate::signals::{CueStream, Waveform, CUE_DIM};

/// Dimensions shared by all encoder components.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct EncoderDims {
    pub channels: usize,
    pub hop: usize,
    pub speaker_hidden: usize,
}

pub fn latent_len(samples: usize, hop: usize) -> usize {
    samples.div_ceil(hop)
}

/// `(B, T)` → `(B, L, 2·hop)` half-overlapping frames.
pub fn frame_signal(x: &Tensor, hop: usize) -> Result<Tensor> {
    let (b, t) = x.dims2()?;
    if t == 0 {
        return Err(Error::invalid("cannot frame an empty signal"));
    }
    let l = latent_len(t, hop);
    let padded = x.pad_with_zeros(1, 0, (l + 1) * hop - t)?.reshape((b, l + 1, hop))?;
    let head = padded.narrow(1, 0, l)?;
    let tail = padded.narrow(1, 1, l)?;
    Ok(Tensor::cat(&[&head, &tail], 2)?)
}

/// Linear filterbank over half-overlapping frames followed by ReLU.
#[derive(Clone, Debug)]
pub struct SpeechEncoder {
    pub proj: Linear,
    pub hop: usize,
}

impl SpeechEncoder {
    pub fn new(store: &mut ParamStore, name: &str, dims: EncoderDims) -> Result<Self> {
        Ok(Self { proj: store.linear(name, 2 * dims.hop, dims.channels, true)?, hop: dims.hop })
    }

    /// `(B, T)` → `(B, L, C)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.proj.forward(&frame_signal(x, self.hop)?)?.relu()?)
    }
}

/// Per-frame projection of cue features, repeated onto the latent time axis.
#[derive(Clone, Debug)]
pub struct CueEncoder {
    pub proj: Linear,
}

/// Latent row `l` takes cue frame `floor(l·F / L)`.
pub fn cue_row_index(frames: usize, target_len: usize) -> Vec<u32> {
    (0..target_len).map(|l| ((l * frames) / target_len) as u32).collect()
}

impl CueEncoder {
    pub fn new(store: &mut ParamStore, name: &str, dims: EncoderDims) -> Result<Self> {
        Ok(Self { proj: store.linear(name, CUE_DIM, dims.channels, true)? })
    }

    /// `(B, F, CUE_DIM)` → `(B, target_len, C)`.
    pub fn forward(&self, cues: &Tensor, target_len: usize) -> Result<Tensor> {
        let (_, f, _) = cues.dims3()?;
        if f == 0 || target_len == 0 {
            return Err(Error::invalid("cue encoder needs at least one frame and one output row"));
        }
        let per_frame = self.proj.forward(cues)?.relu()?;
        let idx = Tensor::new(cue_row_index(f, target_len), cues.device())?;
        Ok(per_frame.index_select(&idx, 1)?)
    }
}

/// Statistics-pooling speaker network with its own filterbank front end.
#[derive(Clone, Debug)]
pub struct SpeakerEncoder {
    pub front: Linear,
    pub hidden: Linear,
    pub out: Linear,
    pub hop: usize,
}

impl SpeakerEncoder {
    pub fn new(store: &mut ParamStore, name: &str, dims: EncoderDims) -> Result<Self> {
        let s = dims.speaker_hidden;
        Ok(Self {
            front: store.linear(&format!("{name}.front"), 2 * dims.hop, s, true)?,
            hidden: store.linear(&format!("{name}.hidden"), s, s, true)?,
            out: store.linear(&format!("{name}.out"), 2 * s, dims.channels, true)?,
            hop: dims.hop,
        })
    }

    pub fn min_samples(&self) -> usize {
        2 * self.hop
    }

    /// Embedding before length normalization, `(B, C)`.
    pub fn pooled(&self, x: &Tensor) -> Result<Tensor> {
        let (_, t) = x.dims2()?;
        if t < self.min_samples() {
            return Err(Error::invalid(format!(
                "speaker encoder needs at least {} samples, got {t}",
                self.min_samples()
            )));
        }
        let x = nn::rms_normalize(x, 1e-8)?;
        let h = self.front.forward(&frame_signal(&x, self.hop)?)?.relu()?;
        let h = (h + 1.0)?.log()?;
        let h = self.hidden.forward(&h)?.relu()?;
        let mean = h.mean_keepdim(1)?;
        let var = h.broadcast_sub(&mean)?.sqr()?.mean(1)?;
        let std = (var + 1e-6)?.sqrt()?;
        let stats = Tensor::cat(&[&mean.squeeze(1)?, &std], 1)?;
        self.out.forward(&stats)
    }

    /// `(B, T)` → unit-norm `(B, C)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let e = self.pooled(x)?;
        let norm = (e.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
        Ok(e.broadcast_div(&norm)?)
    }
}

/// Frame synthesis plus overlap-add.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub proj: Linear,
    pub hop: usize,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, name: &str, dims: EncoderDims) -> Result<Self> {
        Ok(Self { proj: store.linear(name, dims.channels, 2 * dims.hop, true)?, hop: dims.hop })
    }

    /// `(B, L, C)` → `(B, target_len)`.
    pub fn forward(&self, z: &Tensor, target_len: usize) -> Result<Tensor> {
        let (b, l, _) = z.dims3()?;
        let frames = self.proj.forward(z)?;
        let head = frames.narrow(2, 0, self.hop)?.pad_with_zeros(1, 0, 1)?;
        let tail = frames.narrow(2, self.hop, self.hop)?.pad_with_zeros(1, 1, 0)?;
        let full = (head + tail)?.reshape((b, (l + 1) * self.hop))?;
        let have = (l + 1) * self.hop;
        if target_len <= have {
            Ok(full.narrow(1, 0, target_len)?)
        } else {
            Ok(full.pad_with_zeros(1, 0, target_len - have)?)
        }
    }
}

/// The four encoder/decoder components. The speech encoder is a single
/// parameter set used for the mixture and for every stored reference.
#[derive(Clone, Debug)]
pub struct Encoders {
    pub dims: EncoderDims,
    pub speech: SpeechEncoder,
    pub cue: CueEncoder,
    pub speaker: SpeakerEncoder,
    pub decoder: Decoder,
}

pub const SPEAKER_ENCODER_PREFIX: &str = "speaker_encoder.";

impl Encoders {
    pub fn new(store: &mut ParamStore, dims: EncoderDims) -> Result<Self> {
        Ok(Self {
            dims,
            speech: SpeechEncoder::new(store, "speech_encoder", dims)?,
            cue: CueEncoder::new(store, "cue_encoder", dims)?,
            speaker: SpeakerEncoder::new(store, "speaker_encoder", dims)?,
            decoder: Decoder::new(store, "decoder", dims)?,
        })
    }

    pub fn dtype(&self) -> DType {
        self.speech.proj.weight.dtype()
    }
}

/// One latent sequence, `values` shaped `(L, C)`.
#[derive(Clone, Debug)]
pub struct LatentSeq {
    pub values: Tensor,
    pub hop: usize,
}

impl LatentSeq {
    pub fn new(values: Tensor, hop: usize) -> Result<Self> {
        values.dims2()?;
        Ok(Self { values, hop })
    }

    pub fn len(&self) -> usize {
        self.values.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.dims()[1]
    }

    pub fn to_rows(&self) -> Result<Vec<Vec<f64>>> {
        nn::tensor_to_rows(&self.values)
    }
}

/// Unit-norm speaker embedding, `values` shaped `(C,)`.
#[derive(Clone, Debug)]
pub struct SpeakerVec {
    pub values: Tensor,
}

impl SpeakerVec {
    pub fn to_vec(&self) -> Result<Vec<f64>> {
        Ok(self.values.to_dtype(DType::F64)?.to_vec1()?)
    }

    pub fn cosine(&self, other: &SpeakerVec) -> Result<f64> {
        let a = self.to_vec()?;
        let b = other.to_vec()?;
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        Ok(dot / (na * nb).max(1e-12))
    }
}

pub(crate) fn waveform_tensor(w: &Waveform, dtype: DType) -> Result<Tensor> {
    nn::rows_to_tensor(&[w.samples()], dtype)
}

pub(crate) fn cue_tensor(c: &CueStream, dtype: DType) -> Result<Tensor> {
    let flat: Vec<f64> = c.frames().iter().flatten().copied().collect();
    Ok(Tensor::from_vec(flat, (1, c.len(), CUE_DIM), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

pub fn encode_speech(w: &Waveform, enc: &Encoders) -> Result<LatentSeq> {
    let z = enc.speech.forward(&waveform_tensor(w, enc.dtype())?)?;
    LatentSeq::new(z.squeeze(0)?, enc.dims.hop)
}

pub fn encode_cues(c: &CueStream, target_len: usize, enc: &Encoders) -> Result<LatentSeq> {
    if c.is_empty() {
        return Err(Error::invalid("empty cue stream"));
    }
    let z = enc.cue.forward(&cue_tensor(c, enc.dtype())?, target_len)?;
    LatentSeq::new(z.squeeze(0)?, enc.dims.hop)
}

pub fn encode_speaker(w: &Waveform, enc: &Encoders) -> Result<SpeakerVec> {
    let e = enc.speaker.forward(&waveform_tensor(w, enc.dtype())?)?;
    Ok(SpeakerVec { values: e.squeeze(0)? })
}

pub fn decode_speech(z: &LatentSeq, target_len: usize, enc: &Encoders, rate: u32) -> Result<Waveform> {
    if target_len == 0 {
        return Err(Error::invalid("decoded length must be positive"));
    }
    let x = enc.decoder.forward(&z.values.unsqueeze(0)?, target_len)?;
    let rows = nn::tensor_to_rows(&x)?;
    Waveform::new(rows.into_iter().next().unwrap(), rate)
}
