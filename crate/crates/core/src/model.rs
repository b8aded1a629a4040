//! The full extraction network: encoders, both retrieval heads and the
//! extractor on one parameter store.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::encoders::{EncoderDims, Encoders, SPEAKER_ENCODER_PREFIX};
use crate::error::{Error, Result};
use crate::extractor::{Extractor, ExtractorDims, MaskOverride};
use crate::memory::{context_retrieve, speaker_retrieve, ContextAttention, SpeakerAttention};
use crate::nn::{self, ParamStore};

/// How the first prediction of a stream (or stage 1 of training) is made.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Visual cues only.
    #[default]
    VInit,
    /// Visual cues plus the speaker embedding of pre-enrolled speech.
    VpInit,
}

/// Which memory banks take part in extraction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BankMode {
    Speaker,
    #[default]
    Contextual,
    Both,
}

impl BankMode {
    pub fn speaker(self) -> bool {
        matches!(self, Self::Speaker | Self::Both)
    }

    pub fn contextual(self) -> bool {
        matches!(self, Self::Contextual | Self::Both)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub channels: usize,
    pub hop: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub speaker_hidden: usize,
    pub seed: u64,
    pub freeze_speaker_encoder: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            hop: 160,
            hidden: 128,
            blocks: 4,
            speaker_hidden: 64,
            seed: 0,
            freeze_speaker_encoder: true,
        }
    }
}

impl ModelConfig {
    pub fn encoder_dims(&self) -> EncoderDims {
        EncoderDims { channels: self.channels, hop: self.hop, speaker_hidden: self.speaker_hidden }
    }

    pub fn extractor_dims(&self) -> ExtractorDims {
        ExtractorDims { channels: self.channels, hidden: self.hidden, blocks: self.blocks }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.hop == 0 || self.hidden == 0 || self.speaker_hidden == 0 {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        Ok(())
    }
}

/// Memory supplied to one forward pass. Speaker slots are embeddings
/// `(B, N, C)`; contextual slots are latent sequences `(B, N, L, C)`.
#[derive(Clone, Debug, Default)]
pub struct Memory {
    pub speaker: Option<Tensor>,
    pub context: Option<Tensor>,
}

impl Memory {
    pub fn none() -> Self {
        Self::default()
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `(B, T)` at the scale of the input mixture.
    pub estimate: Tensor,
    /// `X̂`, `(B, L, C)`.
    pub latent: Tensor,
    /// `Y`, `(B, L, C)`.
    pub mixture_latent: Tensor,
    pub mask: Tensor,
    /// `(B, N)` slot weights of each consulted bank.
    pub speaker_scores: Option<Tensor>,
    pub context_scores: Option<Tensor>,
}

pub struct MemoModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoders: Encoders,
    pub speaker_attention: SpeakerAttention,
    pub context_attention: ContextAttention,
    pub extractor: Extractor,
}

impl MemoModel {
    pub fn new(config: ModelConfig, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(dtype, config.seed);
        if config.freeze_speaker_encoder {
            store.freeze_prefix(SPEAKER_ENCODER_PREFIX);
        }
        let encoders = Encoders::new(&mut store, config.encoder_dims())?;
        let speaker_attention = SpeakerAttention::new(&mut store, "speaker_bank", config.channels)?;
        let context_attention = ContextAttention::new(&mut store, "context_bank", config.channels)?;
        let extractor = Extractor::new(&mut store, "extractor", config.extractor_dims())?;
        Ok(Self { config, store, encoders, speaker_attention, context_attention, extractor })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Speaker embeddings of reference speech `(B, T)` → `(B, C)`.
    pub fn embed_speaker(&self, refs: &Tensor) -> Result<Tensor> {
        self.encoders.speaker.forward(refs)
    }

    /// Latent sequences of reference speech `(B, T)` → `(B, L, C)`. References
    /// are brought to unit RMS first so stored content does not depend on the
    /// scale of the estimate that produced it.
    pub fn encode_reference(&self, refs: &Tensor) -> Result<Tensor> {
        self.encoders.speech.forward(&nn::rms_normalize(refs, 1e-8)?)
    }

    pub fn forward(&self, mixture: &Tensor, cues: &Tensor, memory: &Memory) -> Result<ForwardOutput> {
        self.forward_with(mixture, cues, memory, MaskOverride::None)
    }

    /// `mixture (B, T)`, `cues (B, F, 4)`.
    pub fn forward_with(
        &self,
        mixture: &Tensor,
        cues: &Tensor,
        memory: &Memory,
        hook: MaskOverride,
    ) -> Result<ForwardOutput> {
        let (b, t) = mixture.dims2()?;
        let rms = (mixture.sqr()?.mean_keepdim(D::Minus1)? + 1e-10)?.sqrt()?;
        let y = self.encoders.speech.forward(&mixture.broadcast_div(&rms)?)?;
        let l = y.dim(1)?;
        let c = self.config.channels;
        let v = self.encoders.cue.forward(cues, l)?;

        let (ms, speaker_scores) = match &memory.speaker {
            Some(slots) => {
                let r = speaker_retrieve(slots, &self.speaker_attention)?;
                let f = r.feature.unsqueeze(1)?.broadcast_as((b, l, c))?;
                (Some(f), Some(r.slot_weights))
            }
            None => (None, None),
        };
        let (mc, context_scores) = match &memory.context {
            Some(slots) => {
                let r = context_retrieve(slots, &y, &self.context_attention)?;
                (Some(r.feature), Some(r.slot_weights))
            }
            None => (None, None),
        };
        let fused = self.extractor.fuse(&y, &v, ms.as_ref(), mc.as_ref())?;
        let (latent, mask) = self.extractor.extract(&fused, &y, hook)?;
        let estimate = self.encoders.decoder.forward(&latent, t)?.broadcast_mul(&rms)?;
        Ok(ForwardOutput { estimate, latent, mixture_latent: y, mask, speaker_scores, context_scores })
    }
}
