//! Deterministic synthetic corpus: parametric speakers, SNR mixing, cue streams
//! derived from the target envelope, cue impairments and speaker-switch cases.
//!
//! Every generator is a pure function of its arguments. Randomness comes from a
//! ChaCha stream keyed by the caller's seed, mixed with a tag per use site so
//! that sub-streams (target, interferer, schedule, ...) never alias.

use std::f64::consts::PI;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_RATE: u32 = 16_000;
pub const DEFAULT_FRAME_RATE: f64 = 25.0;

/// Feature values per cue frame: envelope RMS of each quarter of the frame.
pub const CUE_DIM: usize = 4;

/// Number of spectral positions a speaker's formant can occupy.
pub const SYNTH_BANDS: usize = 13;
pub const BAND_BASE_HZ: f64 = 400.0;
pub const BAND_STEP_HZ: f64 = 250.0;

/// RMS every synthesized utterance is normalized to.
pub const UTTERANCE_RMS: f64 = 0.05;

const CUE_GAIN: f64 = 10.0;
const HARMONIC_CEILING_HZ: f64 = 4_000.0;

pub(crate) fn sub_seed(seed: u64, tag: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed
        .wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn rng_for(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sub_seed(seed, tag))
}

/// Mono sample sequence at a fixed rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("waveform must hold at least one sample"));
        }
        if rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::invalid(format!("non-finite sample at index {i}")));
        }
        Ok(Self { samples, rate })
    }

    pub fn zeros(len: usize, rate: u32) -> Result<Self> {
        Self::new(vec![0.0; len], rate)
    }

    /// Skips validation; callers guarantee the invariants.
    pub(crate) fn from_parts(samples: Vec<f64>, rate: u32) -> Self {
        debug_assert!(!samples.is_empty() && samples.iter().all(|s| s.is_finite()));
        Self { samples, rate }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn rate(&self) -> u32 {
        self.rate
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.rate as f64
    }

    /// Squared L2 norm.
    pub fn energy(&self) -> f64 {
        energy(&self.samples)
    }

    /// Mean squared amplitude.
    pub fn power(&self) -> f64 {
        self.energy() / self.samples.len() as f64
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self::from_parts(self.samples.iter().map(|s| s * gain).collect(), self.rate)
    }

    /// Samples `[start, end)`. Panics on an empty or out-of-range slice.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        assert!(start < end && end <= self.samples.len(), "bad slice {start}..{end}");
        Self::from_parts(self.samples[start..end].to_vec(), self.rate)
    }
}

pub(crate) fn energy(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x * x).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SpeakerId(pub u32);

impl fmt::Display for SpeakerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "spk_{}", self.0)
    }
}

/// Fixed per-speaker synthesis parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VoiceProfile {
    pub f0_hz: f64,
    pub band: usize,
    pub formant_hz: f64,
    pub formant_width_hz: f64,
}

impl VoiceProfile {
    pub fn for_speaker(id: SpeakerId) -> Self {
        let id = id.0 as usize;
        let band = (id * 5) % SYNTH_BANDS;
        let f0_hz = 95.0 + 13.0 * ((id * 7) % 11) as f64;
        Self {
            f0_hz,
            band,
            formant_hz: BAND_BASE_HZ + BAND_STEP_HZ * band as f64,
            formant_width_hz: 180.0,
        }
    }

    fn harmonic_gain(&self, freq: f64, formant: f64) -> f64 {
        let z = (freq - formant) / self.formant_width_hz;
        (-0.5 * z * z).exp() + 0.02
    }
}

/// Band distance between two speakers' formant positions.
pub fn band_distance(a: SpeakerId, b: SpeakerId) -> usize {
    VoiceProfile::for_speaker(a)
        .band
        .abs_diff(VoiceProfile::for_speaker(b).band)
}

fn seconds_to_samples(duration_s: f64, rate: u32) -> Result<usize> {
    if !(duration_s > 0.0) || !duration_s.is_finite() {
        return Err(Error::invalid(format!("duration must be positive, got {duration_s}")));
    }
    Ok(((duration_s * rate as f64).round() as usize).max(1))
}

/// Synthesizes `duration_s` seconds of "speech" for `speaker_id`: a harmonic
/// source with a speaker-specific pitch and formant band, gated by a
/// syllable-like on/off envelope drawn from `seed`.
pub fn synth_speaker(speaker_id: SpeakerId, duration_s: f64, seed: u64) -> Result<Waveform> {
    synth_speaker_at(speaker_id, duration_s, seed, DEFAULT_RATE)
}

pub fn synth_speaker_at(
    speaker_id: SpeakerId,
    duration_s: f64,
    seed: u64,
    rate: u32,
) -> Result<Waveform> {
    let n = seconds_to_samples(duration_s, rate)?;
    let profile = VoiceProfile::for_speaker(speaker_id);
    let mut rng = rng_for(seed, 0x5EED_0000 ^ speaker_id.0 as u64);
    let fs = rate as f64;

    let mut out = vec![0.0; n];
    let mut phase = 0.0f64;
    let mut t = (rng.random::<f64>() * 0.1 * fs) as usize;
    let max_harm = (HARMONIC_CEILING_HZ / (profile.f0_hz * 0.8)).ceil() as usize;
    let mut gains = vec![0.0; max_harm + 1];
    while t < n {
        let syl_len = ((0.12 + 0.20 * rng.random::<f64>()) * fs) as usize;
        let gap = ((0.04 + 0.16 * rng.random::<f64>()) * fs) as usize;
        let amp = 0.5 + 0.5 * rng.random::<f64>();
        let formant = profile.formant_hz + (rng.random::<f64>() - 0.5) * 120.0;
        let pitch_start = 0.9 + 0.2 * rng.random::<f64>();
        let pitch_slope = (rng.random::<f64>() - 0.5) * 0.3;
        let ramp = (0.025 * fs) as usize;
        let end = (t + syl_len).min(n);
        let mut i = t;
        while i < end {
            // gains are refreshed every 64 samples while pitch glides
            let block_end = (i + 64).min(end);
            let pos = (i - t) as f64 / syl_len as f64;
            let f0 = profile.f0_hz * (pitch_start + pitch_slope * pos);
            let harmonics = ((HARMONIC_CEILING_HZ / f0) as usize).min(max_harm);
            for (k, g) in gains.iter_mut().enumerate().take(harmonics + 1).skip(1) {
                *g = profile.harmonic_gain(k as f64 * f0, formant);
            }
            let dphi = 2.0 * PI * f0 / fs;
            for (j, sample) in out.iter_mut().enumerate().take(block_end).skip(i) {
                phase = (phase + dphi) % (2.0 * PI);
                let rel = j - t;
                let env = if rel < ramp {
                    0.5 - 0.5 * (PI * rel as f64 / ramp as f64).cos()
                } else if syl_len - rel < ramp {
                    0.5 - 0.5 * (PI * (syl_len - rel) as f64 / ramp as f64).cos()
                } else {
                    1.0
                };
                // sin(k·phase) by the Chebyshev recurrence
                let (s1, c1) = phase.sin_cos();
                let (mut prev, mut cur) = (0.0, s1);
                let mut acc = 0.0;
                for g in gains.iter().take(harmonics + 1).skip(1) {
                    acc += g * cur;
                    let next = 2.0 * c1 * cur - prev;
                    prev = cur;
                    cur = next;
                }
                *sample = amp * env * acc;
            }
            i = block_end;
        }
        t = end + gap;
    }

    let rms = (energy(&out) / n as f64).sqrt();
    if rms > 0.0 {
        let g = UTTERANCE_RMS / rms;
        out.iter_mut().for_each(|s| *s *= g);
    }
    Ok(Waveform::from_parts(out, rate))
}

fn check_pair(a: &Waveform, b: &Waveform) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("length mismatch: {} vs {}", a.len(), b.len())));
    }
    if a.rate() != b.rate() {
        return Err(Error::invalid(format!("rate mismatch: {} vs {}", a.rate(), b.rate())));
    }
    Ok(())
}

/// Gain applied to `interferer` so that the target-to-interferer power ratio is `snr_db`.
pub fn interferer_gain(target: &Waveform, interferer: &Waveform, snr_db: f64) -> Result<f64> {
    check_pair(target, interferer)?;
    let pt = target.power();
    let pi = interferer.power();
    if pt <= 0.0 {
        return Err(Error::invalid("target has zero power"));
    }
    if pi <= 0.0 {
        return Err(Error::invalid("interferer has zero power"));
    }
    Ok((pt / (pi * 10f64.powf(snr_db / 10.0))).sqrt())
}

/// `target + g·interferer` with `g` chosen so the components sit at `snr_db`.
pub fn mix_at_snr(target: &Waveform, interferer: &Waveform, snr_db: f64) -> Result<Waveform> {
    let g = interferer_gain(target, interferer, snr_db)?;
    let samples = target
        .samples()
        .iter()
        .zip(interferer.samples())
        .map(|(t, i)| t + g * i)
        .collect();
    Ok(Waveform::from_parts(samples, target.rate()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameLabel {
    Clean,
    Missing,
    Occluded,
    LowRes,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImpairmentType {
    Missing,
    Occluded,
    LowRes,
}

impl ImpairmentType {
    pub const ALL: [ImpairmentType; 3] = [Self::Missing, Self::Occluded, Self::LowRes];

    pub fn label(self) -> FrameLabel {
        match self {
            Self::Missing => FrameLabel::Missing,
            Self::Occluded => FrameLabel::Occluded,
            Self::LowRes => FrameLabel::LowRes,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Missing => "missing",
            Self::Occluded => "occluded",
            Self::LowRes => "low_res",
        }
    }
}

pub type CueFrame = [f64; CUE_DIM];

/// Frame-rate feature stream standing in for lip movements.
#[derive(Clone, Debug, PartialEq)]
pub struct CueStream {
    frames: Vec<CueFrame>,
    labels: Vec<FrameLabel>,
    frame_rate: f64,
    audio_rate: u32,
    switch_s: Option<f64>,
}

impl CueStream {
    pub fn new(
        frames: Vec<CueFrame>,
        labels: Vec<FrameLabel>,
        frame_rate: f64,
        audio_rate: u32,
    ) -> Result<Self> {
        if frames.len() != labels.len() {
            return Err(Error::invalid("every cue frame needs exactly one label"));
        }
        if !(frame_rate > 0.0) {
            return Err(Error::invalid("frame rate must be positive"));
        }
        if frames.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite cue feature"));
        }
        Ok(Self { frames, labels, frame_rate, audio_rate, switch_s: None })
    }

    pub fn frames(&self) -> &[CueFrame] {
        &self.frames
    }

    pub fn labels(&self) -> &[FrameLabel] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn audio_rate(&self) -> u32 {
        self.audio_rate
    }

    /// Audio samples covered by one frame.
    pub fn samples_per_frame(&self) -> f64 {
        self.audio_rate as f64 / self.frame_rate
    }

    /// Switch point metadata for speaker-switch streams.
    pub fn switch_s(&self) -> Option<f64> {
        self.switch_s
    }

    pub fn with_switch(mut self, switch_s: Option<f64>) -> Self {
        self.switch_s = switch_s;
        self
    }

    pub fn impaired_count(&self) -> usize {
        self.labels.iter().filter(|l| **l != FrameLabel::Clean).count()
    }

    /// Frames overlapping audio samples `[start, end)`; frames past the end of
    /// the stream are zero and labeled missing.
    pub fn window(&self, start_sample: usize, end_sample: usize) -> CueStream {
        self.window_from(start_sample as i64, end_sample)
    }

    /// Like [`CueStream::window`], but `start_sample` may be negative; frames
    /// before the stream start are zero and labeled missing.
    pub fn window_from(&self, start_sample: i64, end_sample: usize) -> CueStream {
        let spf = self.samples_per_frame();
        let first = (start_sample as f64 / spf).floor() as i64;
        let last = ((end_sample as f64 / spf).ceil() as i64).max(first + 1);
        let mut frames = Vec::with_capacity((last - first) as usize);
        let mut labels = Vec::with_capacity((last - first) as usize);
        for i in first..last {
            match usize::try_from(i).ok().and_then(|i| self.frames.get(i).map(|f| (i, f))) {
                Some((i, f)) => {
                    frames.push(*f);
                    labels.push(self.labels[i]);
                }
                None => {
                    frames.push([0.0; CUE_DIM]);
                    labels.push(FrameLabel::Missing);
                }
            }
        }
        CueStream {
            frames,
            labels,
            frame_rate: self.frame_rate,
            audio_rate: self.audio_rate,
            switch_s: None,
        }
    }
}

fn frame_span(rate: u32, frame_rate: f64) -> Result<usize> {
    let span = rate as f64 / frame_rate;
    if !(frame_rate > 0.0) || span.fract() != 0.0 || span as usize % CUE_DIM != 0 {
        return Err(Error::invalid(format!(
            "frame rate {frame_rate} must split {rate} Hz audio into whole frames of {CUE_DIM} sub-spans"
        )));
    }
    Ok(span as usize)
}

/// Per-frame cue features from the target's local envelope: RMS of each
/// quarter of the frame span. Silence maps to all-zero frames.
pub fn derive_cues(target: &Waveform, frame_rate: f64) -> Result<CueStream> {
    let span = frame_span(target.rate(), frame_rate)?;
    let sub = span / CUE_DIM;
    let n_frames = (target.len() as f64 * frame_rate / target.rate() as f64).floor() as usize;
    let xs = target.samples();
    let frames = (0..n_frames)
        .map(|f| {
            let mut frame = [0.0; CUE_DIM];
            for (j, v) in frame.iter_mut().enumerate() {
                let s = f * span + j * sub;
                *v = CUE_GAIN * (energy(&xs[s..s + sub]) / sub as f64).sqrt();
            }
            frame
        })
        .collect();
    CueStream::new(frames, vec![FrameLabel::Clean; n_frames], frame_rate, target.rate())
}

/// Placement of the corrupted span(s).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImpairmentSchedule {
    pub runs: usize,
}

impl Default for ImpairmentSchedule {
    fn default() -> Self {
        Self { runs: 1 }
    }
}

/// Corrupts `floor(ratio · eligible)` frames lying after `protect_prefix_s`,
/// as one contiguous run.
pub fn apply_impairment(
    cues: &CueStream,
    kind: ImpairmentType,
    ratio: f64,
    seed: u64,
    protect_prefix_s: f64,
) -> Result<CueStream> {
    apply_impairment_with(cues, kind, ratio, seed, protect_prefix_s, &[], ImpairmentSchedule::default())
}

/// General form: `protected` lists extra `[start, end)` frame ranges that stay clean.
/// Runs are contiguous in the list of eligible frames, so they may hop over a
/// protected range.
pub fn apply_impairment_with(
    cues: &CueStream,
    kind: ImpairmentType,
    ratio: f64,
    seed: u64,
    protect_prefix_s: f64,
    protected: &[(usize, usize)],
    schedule: ImpairmentSchedule,
) -> Result<CueStream> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::invalid(format!("impairment ratio must lie in [0, 1), got {ratio}")));
    }
    if !(protect_prefix_s >= 0.0) {
        return Err(Error::invalid("protected prefix must be non-negative"));
    }
    if schedule.runs == 0 {
        return Err(Error::invalid("impairment schedule needs at least one run"));
    }
    let prefix = ((protect_prefix_s * cues.frame_rate).floor() as usize).min(cues.len());
    let eligible: Vec<usize> = (prefix..cues.len())
        .filter(|i| !protected.iter().any(|&(s, e)| (s..e).contains(i)))
        .collect();
    let count = (ratio * eligible.len() as f64).floor() as usize;
    let mut out = cues.clone();
    if count == 0 {
        return Ok(out);
    }

    let mut rng = rng_for(seed, 0x1A4A_1E00);
    let runs = schedule.runs.min(count);
    let chunk = eligible.len() / runs;
    let mut chosen = Vec::with_capacity(count);
    for r in 0..runs {
        let len = count / runs + usize::from(r < count % runs);
        let (lo, hi) = if runs == 1 {
            (0, eligible.len())
        } else {
            (r * chunk, if r + 1 == runs { eligible.len() } else { (r + 1) * chunk })
        };
        let start = lo + rng.random_range(0..=(hi - lo - len));
        chosen.extend_from_slice(&eligible[start..start + len]);
    }

    let peak = cues.frames.iter().flatten().fold(0.0f64, |m, v| m.max(*v)).max(1e-3);
    for &i in &chosen {
        out.frames[i] = corrupt_frame(cues, i, kind, peak);
        out.labels[i] = kind.label();
    }
    Ok(out)
}

fn corrupt_frame(clean: &CueStream, i: usize, kind: ImpairmentType, peak: f64) -> CueFrame {
    match kind {
        ImpairmentType::Missing => [0.0; CUE_DIM],
        ImpairmentType::Occluded => {
            // alternating-sign distractor dominates the residual lip signal
            let mut f = clean.frames[i];
            let wobble = 0.8 + 0.2 * (0.9 * i as f64).sin();
            for (d, v) in f.iter_mut().enumerate() {
                let sign = if d % 2 == 0 { 1.0 } else { -1.0 };
                *v = 0.2 * *v + sign * wobble * peak;
            }
            f
        }
        ImpairmentType::LowRes => {
            // temporal blur, then collapse sub-frame detail, then quantize
            let lo = i.saturating_sub(2);
            let hi = (i + 3).min(clean.len());
            let mut mean = 0.0;
            for f in &clean.frames[lo..hi] {
                mean += f.iter().sum::<f64>() / CUE_DIM as f64;
            }
            mean /= (hi - lo) as f64;
            let step = 0.25 * peak;
            [(mean / step).round() * step; CUE_DIM]
        }
    }
}

/// One synthetic two-speaker test item.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub target_id: SpeakerId,
    pub interferer_id: SpeakerId,
    pub snr_db: f64,
    pub duration_s: f64,
    pub impairment_ratio: f64,
    pub impairment_type: ImpairmentType,
    pub seed: u64,
    /// Leading span kept clean (e.g. the streaming initialization window).
    #[serde(default)]
    pub protect_prefix_s: f64,
    #[serde(default = "default_pre_enrolled_s")]
    pub pre_enrolled_s: f64,
}

fn default_pre_enrolled_s() -> f64 {
    2.0
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.target_id == self.interferer_id {
            return Err(Error::invalid("target and interferer must differ"));
        }
        if !(-10.0..=10.0).contains(&self.snr_db) {
            return Err(Error::invalid(format!("snr {} dB outside [-10, 10]", self.snr_db)));
        }
        if !(self.duration_s > 0.0) || !(self.pre_enrolled_s > 0.0) {
            return Err(Error::invalid("durations must be positive"));
        }
        if !(0.0..1.0).contains(&self.impairment_ratio) {
            return Err(Error::invalid("impairment ratio must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct MixtureBundle {
    pub mixture: Waveform,
    pub target: Waveform,
    /// Interferer after SNR scaling, so `mixture = target + interferer`.
    pub interferer: Waveform,
    pub cues: CueStream,
    pub clean_cues: CueStream,
    /// A different utterance of the target speaker.
    pub pre_enrolled: Waveform,
}

pub fn build_mixture(spec: &MixtureSpec) -> Result<MixtureBundle> {
    spec.validate()?;
    let target = synth_speaker(spec.target_id, spec.duration_s, sub_seed(spec.seed, 1))?;
    let raw_interferer =
        synth_speaker(spec.interferer_id, spec.duration_s, sub_seed(spec.seed, 2))?;
    let g = interferer_gain(&target, &raw_interferer, spec.snr_db)?;
    let interferer = raw_interferer.scaled(g);
    let mixture = Waveform::from_parts(
        target.samples().iter().zip(interferer.samples()).map(|(t, i)| t + i).collect(),
        target.rate(),
    );
    let clean_cues = derive_cues(&target, DEFAULT_FRAME_RATE)?;
    let cues = apply_impairment(
        &clean_cues,
        spec.impairment_type,
        spec.impairment_ratio,
        sub_seed(spec.seed, 3),
        spec.protect_prefix_s,
    )?;
    let pre_enrolled = synth_speaker(spec.target_id, spec.pre_enrolled_s, sub_seed(spec.seed, 4))?;
    Ok(MixtureBundle { mixture, target, interferer, cues, clean_cues, pre_enrolled })
}

/// Two targets in sequence against one persistent interferer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwitchSpec {
    pub speaker_a: SpeakerId,
    pub speaker_b: SpeakerId,
    pub interferer: SpeakerId,
    pub switch_time_s: f64,
    pub total_duration_s: f64,
    #[serde(default = "default_post_switch_clean_s")]
    pub post_switch_clean_s: f64,
    pub snr_db: f64,
    pub impairment_ratio: f64,
    pub impairment_type: ImpairmentType,
    #[serde(default)]
    pub protect_prefix_s: f64,
    pub seed: u64,
}

fn default_post_switch_clean_s() -> f64 {
    1.0
}

impl SwitchSpec {
    pub fn validate(&self) -> Result<()> {
        let ids = [self.speaker_a, self.speaker_b, self.interferer];
        if ids[0] == ids[1] || ids[0] == ids[2] || ids[1] == ids[2] {
            return Err(Error::invalid("switch speakers must be pairwise distinct"));
        }
        if !(4.0..=6.0).contains(&self.switch_time_s) {
            return Err(Error::invalid(format!("switch time {} outside [4, 6] s", self.switch_time_s)));
        }
        if !(self.total_duration_s >= 10.0) {
            return Err(Error::invalid("switch mixtures last at least 10 s"));
        }
        if !(-10.0..=10.0).contains(&self.snr_db) {
            return Err(Error::invalid("snr outside [-10, 10] dB"));
        }
        if !(0.0..1.0).contains(&self.impairment_ratio) || !(self.post_switch_clean_s >= 0.0) {
            return Err(Error::invalid("bad impairment settings"));
        }
        Ok(())
    }
}

/// Target reference that changes speaker at known sample boundaries.
#[derive(Clone, Debug)]
pub struct PiecewiseReference {
    pub waveform: Waveform,
    /// `(start_sample, end_sample, speaker)` in time order.
    pub segments: Vec<(usize, usize, SpeakerId)>,
}

impl PiecewiseReference {
    pub fn switch_sample(&self) -> Option<usize> {
        self.segments.get(1).map(|s| s.0)
    }
}

#[derive(Clone, Debug)]
pub struct SwitchBundle {
    pub mixture: Waveform,
    pub reference: PiecewiseReference,
    pub interferer: Waveform,
    pub cues: CueStream,
    pub clean_cues: CueStream,
}

pub fn build_switch_mixture(spec: &SwitchSpec) -> Result<SwitchBundle> {
    spec.validate()?;
    let a = synth_speaker(spec.speaker_a, spec.total_duration_s, sub_seed(spec.seed, 11))?;
    let b = synth_speaker(spec.speaker_b, spec.total_duration_s, sub_seed(spec.seed, 12))?;
    let n = a.len();
    let rate = a.rate();
    let switch = ((spec.switch_time_s * rate as f64).round() as usize).min(n);
    let mut target = a.samples()[..switch].to_vec();
    target.extend_from_slice(&b.samples()[switch..]);
    let target = Waveform::from_parts(target, rate);

    let raw = synth_speaker(spec.interferer, spec.total_duration_s, sub_seed(spec.seed, 13))?;
    let interferer = raw.scaled(interferer_gain(&target, &raw, spec.snr_db)?);
    let mixture = Waveform::from_parts(
        target.samples().iter().zip(interferer.samples()).map(|(t, i)| t + i).collect(),
        rate,
    );

    let clean_cues = derive_cues(&target, DEFAULT_FRAME_RATE)?;
    let switch_frame = (spec.switch_time_s * DEFAULT_FRAME_RATE).floor() as usize;
    let clean_frames = (spec.post_switch_clean_s * DEFAULT_FRAME_RATE).ceil() as usize;
    let cues = apply_impairment_with(
        &clean_cues,
        spec.impairment_type,
        spec.impairment_ratio,
        sub_seed(spec.seed, 14),
        spec.protect_prefix_s,
        &[(switch_frame, switch_frame + clean_frames)],
        ImpairmentSchedule::default(),
    )?
    .with_switch(Some(switch as f64 / rate as f64));

    Ok(SwitchBundle {
        mixture,
        reference: PiecewiseReference {
            waveform: target,
            segments: vec![(0, switch, spec.speaker_a), (switch, n, spec.speaker_b)],
        },
        interferer,
        cues,
        clean_cues: clean_cues.with_switch(Some(switch as f64 / rate as f64)),
    })
}

/// Last `len` samples of `x`, left-zero-padded when `x` is shorter.
pub fn fit_tail(x: &[f64], len: usize) -> Vec<f64> {
    if x.len() >= len {
        x[x.len() - len..].to_vec()
    } else {
        let mut out = vec![0.0; len - x.len()];
        out.extend_from_slice(x);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mix_spec() -> MixtureSpec {
        MixtureSpec {
            target_id: SpeakerId(0),
            interferer_id: SpeakerId(1),
            snr_db: 3.0,
            duration_s: 4.0,
            impairment_ratio: 0.5,
            impairment_type: ImpairmentType::Missing,
            seed: 99,
            protect_prefix_s: 1.0,
            pre_enrolled_s: 2.0,
        }
    }

    #[test]
    fn synth_is_deterministic_and_sized() {
        let a = synth_speaker(SpeakerId(0), 1.0, 7).unwrap();
        let b = synth_speaker(SpeakerId(0), 1.0, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(synth_speaker(SpeakerId(3), 2.0, 1).unwrap().len(), 32_000);
        assert!((a.power().sqrt() - UTTERANCE_RMS).abs() < 1e-12);
    }

    #[test]
    fn synth_rejects_bad_duration() {
        assert!(matches!(synth_speaker(SpeakerId(0), 0.0, 1), Err(Error::InvalidArgument(_))));
        assert!(synth_speaker(SpeakerId(0), -1.0, 1).is_err());
        assert!(synth_speaker(SpeakerId(0), f64::NAN, 1).is_err());
    }

    #[test]
    fn snr_mixing_hits_requested_ratio() {
        let t = synth_speaker(SpeakerId(0), 1.0, 1).unwrap();
        let i = synth_speaker(SpeakerId(1), 1.0, 2).unwrap();
        for snr in [-10.0, 0.0, 10.0] {
            let g = interferer_gain(&t, &i, snr).unwrap();
            let mix = mix_at_snr(&t, &i, snr).unwrap();
            let residual: Vec<f64> =
                mix.samples().iter().zip(t.samples()).map(|(m, t)| m - t).collect();
            let p_res = energy(&residual) / residual.len() as f64;
            let ratio = t.power() / p_res;
            let want = 10f64.powf(snr / 10.0);
            assert!((ratio - want).abs() / want < 1e-9, "snr {snr}: {ratio} vs {want}");
            assert!((i.scaled(g).power() * want - t.power()).abs() / t.power() < 1e-9);
        }
    }

    #[test]
    fn mixing_rejects_silent_interferer_and_mismatch() {
        let t = synth_speaker(SpeakerId(0), 1.0, 1).unwrap();
        let z = Waveform::zeros(t.len(), t.rate()).unwrap();
        assert!(mix_at_snr(&t, &z, 0.0).is_err());
        assert!(mix_at_snr(&z, &t, 0.0).is_err());
        let short = t.slice(0, 100);
        assert!(mix_at_snr(&t, &short, 0.0).is_err());
    }

    #[test]
    fn cue_lengths_and_silence() {
        let w = synth_speaker(SpeakerId(2), 4.0, 3).unwrap();
        let c = derive_cues(&w, 25.0).unwrap();
        assert_eq!(c.len(), 100);
        assert!(c.labels().iter().all(|l| *l == FrameLabel::Clean));
        let silent = derive_cues(&Waveform::zeros(16_000, DEFAULT_RATE).unwrap(), 25.0).unwrap();
        assert!(silent.frames().iter().flatten().all(|v| *v == 0.0));
        // 16000 / 30 is not a whole number of samples
        assert!(derive_cues(&w, 30.0).is_err());
    }

    #[test]
    fn zero_ratio_is_identity() {
        let w = synth_speaker(SpeakerId(2), 4.0, 3).unwrap();
        let c = derive_cues(&w, 25.0).unwrap();
        let out = apply_impairment(&c, ImpairmentType::Occluded, 0.0, 5, 0.0).unwrap();
        assert_eq!(out, c);
    }

    #[test]
    fn missing_run_respects_prefix_and_count() {
        let w = synth_speaker(SpeakerId(2), 4.0, 3).unwrap();
        let c = derive_cues(&w, 25.0).unwrap();
        let out = apply_impairment(&c, ImpairmentType::Missing, 0.5, 5, 1.0).unwrap();
        let hit: Vec<usize> = (0..out.len()).filter(|&i| out.labels()[i] != FrameLabel::Clean).collect();
        // floor(0.5 * 75)
        assert_eq!(hit.len(), 37);
        assert!(hit.iter().all(|&i| i >= 25));
        assert!(hit.windows(2).all(|p| p[1] == p[0] + 1), "single contiguous run");
        assert!(hit.iter().all(|&i| out.frames()[i] == [0.0; CUE_DIM]));
    }

    #[test]
    fn multi_run_schedule_splits_the_count() {
        let w = synth_speaker(SpeakerId(2), 4.0, 3).unwrap();
        let c = derive_cues(&w, 25.0).unwrap();
        let out = apply_impairment_with(
            &c,
            ImpairmentType::LowRes,
            0.4,
            8,
            0.0,
            &[],
            ImpairmentSchedule { runs: 3 },
        )
        .unwrap();
        assert_eq!(out.impaired_count(), 40);
        assert!(out.labels().iter().all(|l| matches!(l, FrameLabel::Clean | FrameLabel::LowRes)));
    }

    #[test]
    fn impairment_rejects_bad_ratio() {
        let w = synth_speaker(SpeakerId(2), 1.0, 3).unwrap();
        let c = derive_cues(&w, 25.0).unwrap();
        assert!(apply_impairment(&c, ImpairmentType::Missing, 1.0, 0, 0.0).is_err());
        assert!(apply_impairment(&c, ImpairmentType::Missing, -0.1, 0, 0.0).is_err());
    }

    #[test]
    fn occlusion_is_nonzero_but_dissimilar() {
        let w = synth_speaker(SpeakerId(4), 4.0, 9).unwrap();
        let c = derive_cues(&w, 25.0).unwrap();
        let out = apply_impairment(&c, ImpairmentType::Occluded, 0.9, 1, 0.0).unwrap();
        let mut checked = 0;
        for i in 0..c.len() {
            if out.labels()[i] != FrameLabel::Occluded {
                continue;
            }
            let (a, b) = (c.frames()[i], out.frames()[i]);
            assert!(b.iter().any(|v| *v != 0.0));
            let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            if na < 1e-9 {
                continue;
            }
            let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            let cos = a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
            assert!(cos < 0.7, "frame {i}: cosine {cos}");
            checked += 1;
        }
        assert!(checked > 20);
    }

    #[test]
    fn bundle_is_reproducible_and_additive() {
        let spec = mix_spec();
        let a = build_mixture(&spec).unwrap();
        let b = build_mixture(&spec).unwrap();
        assert_eq!(a.mixture, b.mixture);
        assert_eq!(a.cues, b.cues);
        for ((m, i), t) in a.mixture.samples().iter().zip(a.interferer.samples()).zip(a.target.samples()) {
            assert!((m - i - t).abs() < 1e-15);
        }
        assert_ne!(a.pre_enrolled.samples(), &a.target.samples()[..a.pre_enrolled.len()]);
        assert_eq!(a.pre_enrolled.len(), 32_000);
    }

    #[test]
    fn mixture_spec_validation() {
        let mut s = mix_spec();
        s.interferer_id = s.target_id;
        assert!(build_mixture(&s).is_err());
        let mut s = mix_spec();
        s.snr_db = 12.0;
        assert!(build_mixture(&s).is_err());
    }

    #[test]
    fn switch_bundle_layout() {
        let spec = SwitchSpec {
            speaker_a: SpeakerId(0),
            speaker_b: SpeakerId(1),
            interferer: SpeakerId(2),
            switch_time_s: 5.0,
            total_duration_s: 10.0,
            post_switch_clean_s: 1.0,
            snr_db: 0.0,
            impairment_ratio: 0.9,
            impairment_type: ImpairmentType::Missing,
            protect_prefix_s: 0.0,
            seed: 4,
        };
        let b = build_switch_mixture(&spec).unwrap();
        assert!(b.mixture.len() >= 160_000);
        let a = synth_speaker(SpeakerId(0), 10.0, sub_seed(4, 11)).unwrap();
        assert_eq!(&b.reference.waveform.samples()[..80_000], &a.samples()[..80_000]);
        assert_eq!(b.reference.switch_sample(), Some(80_000));
        assert!(b.cues.labels()[125..150].iter().all(|l| *l == FrameLabel::Clean));
        assert_eq!(b.cues.switch_s(), Some(5.0));
        // 0.9 of the 225 eligible frames
        assert_eq!(b.cues.impaired_count(), 202);

        let mut bad = spec.clone();
        bad.switch_time_s = 3.0;
        assert!(build_switch_mixture(&bad).is_err());
        let mut bad = spec;
        bad.interferer = bad.speaker_a;
        assert!(build_switch_mixture(&bad).is_err());
    }

    #[test]
    fn window_pads_past_the_end() {
        let w = synth_speaker(SpeakerId(2), 1.0, 3).unwrap();
        let c = derive_cues(&w, 25.0).unwrap();
        let win = c.window(12_800, 19_200);
        assert_eq!(win.len(), 10);
        assert_eq!(win.labels()[9], FrameLabel::Missing);
    }
}
