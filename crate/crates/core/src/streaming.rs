//! Online inference: an initialization window followed by a sliding window
//! of length `t_win` advancing by `t_sh`, with self-enrollment into the
//! memory banks and energy normalization of every window estimate.
//!
//! Timeline: the init step covers `[0, t_init)` and emits all of it. Step
//! `k ≥ 1` covers `[e_k − t_win, e_k)` with `e_k = min(t_init + k·t_sh, T)`
//! (left-padded with zeros before the stream start) and emits the samples
//! between the previous end and `e_k`, so the last step absorbs a remainder
//! shorter than `t_sh` using a window aligned to the stream end.

use std::time::Instant;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::encoders::{cue_tensor, latent_len};
use crate::error::{Error, Result};
use crate::memory::{BankSnapshot, ContextualBank, SpeakerBank, UpdatePolicy};
use crate::model::{BankMode, InitMode, MemoModel, Memory};
use crate::nn;
use crate::signals::{energy, fit_tail, CueStream, Waveform};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSetting {
    VisualOnly,
    #[default]
    SelfEnro,
    PreEnro,
    TgtEnro,
}

impl EvalSetting {
    pub const ALL: [EvalSetting; 4] = [Self::VisualOnly, Self::SelfEnro, Self::PreEnro, Self::TgtEnro];

    pub fn name(self) -> &'static str {
        match self {
            Self::VisualOnly => "visual_only",
            Self::SelfEnro => "visual_self_enro",
            Self::PreEnro => "visual_pre_enro",
            Self::TgtEnro => "visual_tgt_enro",
        }
    }
}

/// Scaling of each window estimate before emission.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// Init: `γ·x̂/‖x̂‖²`; later: `x̂·‖emitted‖²/‖x̂‖²`.
    #[default]
    Literal,
    /// Init: `γ·x̂/rms(x̂)`; later: `x̂·rms(emitted)/rms(x̂)`.
    Rms,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StreamConfig {
    pub t_win: usize,
    pub t_sh: usize,
    pub t_init: usize,
    pub gamma: f64,
    pub speaker_capacity: usize,
    pub context_capacity: usize,
    pub self_enroll_len: usize,
    pub init_mode: InitMode,
    pub eval_setting: EvalSetting,
    pub empty_on_switch: bool,
    /// Use clean cue frames for the init window.
    pub clean_init: bool,
    pub norm_mode: NormMode,
    pub banks: BankMode,
    pub policy: UpdatePolicy,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            t_win: 32_000,
            t_sh: 3_200,
            t_init: 32_000,
            gamma: 0.7,
            speaker_capacity: 1,
            context_capacity: 1,
            self_enroll_len: 32_000,
            init_mode: InitMode::VInit,
            eval_setting: EvalSetting::SelfEnro,
            empty_on_switch: false,
            clean_init: true,
            norm_mode: NormMode::Literal,
            banks: BankMode::Contextual,
            policy: UpdatePolicy::Fifo,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_sh == 0 || self.t_win == 0 || self.t_init == 0 || self.self_enroll_len == 0 {
            return Err(Error::invalid("window, shift, init and self-enrollment lengths must be positive"));
        }
        if self.t_sh > self.t_win {
            return Err(Error::invalid(format!("shift {} exceeds window {}", self.t_sh, self.t_win)));
        }
        if self.speaker_capacity == 0 || self.context_capacity == 0 {
            return Err(Error::invalid("bank capacities must be at least 1"));
        }
        Ok(())
    }

    /// Step at which an Empty reset happens for a switch at `switch_sample`:
    /// the first `k ≥ 1` whose window contains the switch.
    pub fn reset_step(&self, switch_sample: usize, total_len: usize) -> Option<usize> {
        let steps = self.steps(total_len);
        (1..=steps).find(|&k| {
            let (start, end) = self.window_bounds(k, total_len);
            start <= switch_sample as i64 && switch_sample < end
        })
    }

    /// Number of sliding steps after init for a stream of `total_len` samples.
    pub fn steps(&self, total_len: usize) -> usize {
        total_len.saturating_sub(self.t_init).div_ceil(self.t_sh)
    }

    /// `[start, end)` of step `k ≥ 1`; `start` may be negative.
    pub fn window_bounds(&self, k: usize, total_len: usize) -> (i64, usize) {
        let end = (self.t_init + k * self.t_sh).min(total_len);
        (end as i64 - self.t_win as i64, end)
    }
}

/// Per-step record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: usize,
    pub window_start: i64,
    pub window_end: usize,
    pub emitted: usize,
    pub reset: bool,
    pub speaker_bank_before: usize,
    pub context_bank_before: usize,
    pub speaker_bank_after: usize,
    pub context_bank_after: usize,
    pub speaker_scores: Option<Vec<f64>>,
    pub context_scores: Option<Vec<f64>>,
    /// `‖x̂(k)‖²` before normalization.
    pub window_energy: f64,
    /// Squared norm of everything emitted before this step.
    pub prior_energy: f64,
    pub scale: f64,
    pub emitted_energy: f64,
    pub cumulative_energy: f64,
    pub speaker_digest: f64,
    pub context_digest: f64,
    pub wall_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamStateSnapshot {
    pub k: usize,
    pub emitted: Vec<f64>,
    pub cumulative_energy: f64,
    pub speaker_bank: Option<BankSnapshot>,
    pub context_bank: Option<BankSnapshot>,
}

/// Evolving state of one stream.
pub struct StreamState {
    pub k: usize,
    pub speaker_bank: Option<SpeakerBank>,
    pub context_bank: Option<ContextualBank>,
    pub emitted: Vec<f64>,
    pub cumulative_energy: f64,
}

impl StreamState {
    pub fn snapshot(&self) -> Result<StreamStateSnapshot> {
        Ok(StreamStateSnapshot {
            k: self.k,
            emitted: self.emitted.clone(),
            cumulative_energy: self.cumulative_energy,
            speaker_bank: self.speaker_bank.as_ref().map(|b| b.snapshot()).transpose()?,
            context_bank: self.context_bank.as_ref().map(|b| b.snapshot()).transpose()?,
        })
    }

    fn sizes(&self) -> (usize, usize) {
        (
            self.speaker_bank.as_ref().map_or(0, |b| b.len()),
            self.context_bank.as_ref().map_or(0, |b| b.len()),
        )
    }

    fn digests(&self) -> Result<(f64, f64)> {
        Ok((
            self.speaker_bank.as_ref().map(|b| b.digest()).transpose()?.unwrap_or(0.0),
            self.context_bank.as_ref().map(|b| b.digest()).transpose()?.unwrap_or(0.0),
        ))
    }
}

/// Inputs of one stream. `clean_cues` feeds the init window when
/// `clean_init` is set; `pre_enrolled` and `target` are needed only by the
/// settings and init modes that use them.
#[derive(Clone, Copy, Debug)]
pub struct StreamInputs<'a> {
    pub mixture: &'a Waveform,
    pub cues: &'a CueStream,
    pub clean_cues: Option<&'a CueStream>,
    pub pre_enrolled: Option<&'a Waveform>,
    pub target: Option<&'a Waveform>,
}

#[derive(Clone, Debug)]
pub struct StreamOutput {
    pub estimate: Waveform,
    pub trace: Vec<StepTrace>,
    /// Processing time over all steps, seconds.
    pub processing_s: f64,
}

impl StreamOutput {
    pub fn trace_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for t in &self.trace {
            s.push_str(&serde_json::to_string(t)?);
            s.push('\n');
        }
        Ok(s)
    }
}

/// Real-time factor: processing seconds over speech seconds.
pub fn rtf(processing_s: f64, speech_s: f64) -> f64 {
    processing_s / speech_s
}

pub fn measure_rtf(out: &StreamOutput) -> f64 {
    rtf(out.processing_s, out.estimate.duration_s())
}

/// Unit-RMS copy, or zeros for a silent input.
fn unit_rms(x: &[f64]) -> Vec<f64> {
    let e = energy(x);
    if e > 0.0 {
        let g = (x.len() as f64 / e).sqrt();
        x.iter().map(|v| v * g).collect()
    } else {
        x.to_vec()
    }
}

pub struct StreamEngine<'m> {
    model: &'m MemoModel,
    cfg: StreamConfig,
    state: StreamState,
    rate: u32,
}

impl<'m> StreamEngine<'m> {
    pub fn new(model: &'m MemoModel, cfg: StreamConfig, rate: u32) -> Result<Self> {
        cfg.validate()?;
        let c = model.config.channels;
        let uses_banks = cfg.eval_setting != EvalSetting::VisualOnly;
        let speaker_bank = if uses_banks && cfg.banks.speaker() {
            Some(SpeakerBank::new(cfg.speaker_capacity, cfg.policy, c)?)
        } else {
            None
        };
        let context_bank = if uses_banks && cfg.banks.contextual() {
            let l = latent_len(cfg.t_win, model.config.hop);
            Some(ContextualBank::new(cfg.context_capacity, cfg.policy, l, c)?)
        } else {
            None
        };
        let state = StreamState { k: 0, speaker_bank, context_bank, emitted: Vec::new(), cumulative_energy: 0.0 };
        Ok(Self { model, cfg, state, rate })
    }

    pub fn state(&self) -> &StreamState {
        &self.state
    }

    pub fn config(&self) -> &StreamConfig {
        &self.cfg
    }

    fn tensor(&self, x: &[f64]) -> Result<Tensor> {
        Ok(Tensor::from_vec(x.to_vec(), (1, x.len()), &Device::Cpu)?.to_dtype(self.model.dtype())?)
    }

    /// Stores a reference segment into every configured bank.
    fn store_reference(&mut self, segment: &[f64]) -> Result<()> {
        let seg = unit_rms(&fit_tail(segment, self.cfg.self_enroll_len));
        if self.state.speaker_bank.is_some() {
            let e = self.model.embed_speaker(&self.tensor(&seg)?)?;
            self.state.speaker_bank.as_mut().unwrap().store(&e.squeeze(0)?)?;
        }
        if self.state.context_bank.is_some() {
            let z = self.model.encode_reference(&self.tensor(&fit_tail(&seg, self.cfg.t_win))?)?;
            self.state.context_bank.as_mut().unwrap().store(&z.squeeze(0)?)?;
        }
        Ok(())
    }

    fn bank_memory(&self) -> Result<Memory> {
        let speaker = match &self.state.speaker_bank {
            Some(b) if !b.is_empty() => Some(b.stacked()?),
            _ => None,
        };
        let context = match &self.state.context_bank {
            Some(b) if !b.is_empty() => Some(b.stacked()?),
            _ => None,
        };
        Ok(Memory { speaker, context })
    }

    fn run_model(&self, window: &[f64], cues: &CueStream, memory: &Memory) -> Result<(Vec<f64>, Option<Vec<f64>>, Option<Vec<f64>>)> {
        let out = self.model.forward(&self.tensor(window)?, &cue_tensor(cues, self.model.dtype())?, memory)?;
        let est = nn::tensor_to_rows(&out.estimate)?.remove(0);
        let scores = |t: Option<Tensor>| -> Result<Option<Vec<f64>>> {
            t.map(|t| nn::tensor_to_rows(&t).map(|mut r| r.remove(0))).transpose()
        };
        Ok((est, scores(out.speaker_scores)?, scores(out.context_scores)?))
    }

    fn trace_base(&self, step: usize, start: i64, end: usize) -> Result<StepTrace> {
        let (sb, cb) = self.state.sizes();
        Ok(StepTrace {
            step,
            window_start: start,
            window_end: end,
            emitted: 0,
            reset: false,
            speaker_bank_before: sb,
            context_bank_before: cb,
            speaker_bank_after: sb,
            context_bank_after: cb,
            speaker_scores: None,
            context_scores: None,
            window_energy: 0.0,
            prior_energy: self.state.cumulative_energy,
            scale: 0.0,
            emitted_energy: 0.0,
            cumulative_energy: 0.0,
            speaker_digest: 0.0,
            context_digest: 0.0,
            wall_s: 0.0,
        })
    }

    fn finish_trace(&self, t: &mut StepTrace) -> Result<()> {
        let (sb, cb) = self.state.sizes();
        let (sd, cd) = self.state.digests()?;
        t.speaker_bank_after = sb;
        t.context_bank_after = cb;
        t.speaker_digest = sd;
        t.context_digest = cd;
        t.cumulative_energy = self.state.cumulative_energy;
        Ok(())
    }

    /// Scale applied to a window estimate with squared norm `window_energy`
    /// and `len` samples.
    pub fn norm_scale(&self, window_energy: f64, len: usize) -> f64 {
        if !(window_energy > 0.0) {
            return 0.0;
        }
        let k = self.state.k;
        let prior = self.state.cumulative_energy;
        match (self.cfg.norm_mode, k) {
            (NormMode::Literal, 0) => self.cfg.gamma / window_energy,
            (NormMode::Literal, _) => prior / window_energy,
            (NormMode::Rms, 0) => self.cfg.gamma / (window_energy / len as f64).sqrt(),
            (NormMode::Rms, _) => {
                let emitted_ms = prior / self.state.emitted.len().max(1) as f64;
                (emitted_ms / (window_energy / len as f64)).sqrt()
            }
        }
    }

    /// Init step over `[0, len(window))`; emits the whole normalized window.
    pub fn init_step(
        &mut self,
        window: &[f64],
        cues: &CueStream,
        pre_enrolled: Option<&Waveform>,
        target_window: Option<&[f64]>,
    ) -> Result<(Vec<f64>, StepTrace)> {
        if self.state.k != 0 {
            return Err(Error::invalid("init step must come first"));
        }
        let started = Instant::now();
        let mut trace = self.trace_base(0, 0, window.len())?;
        let memory = match self.cfg.init_mode {
            InitMode::VInit => Memory::none(),
            InitMode::VpInit => {
                let pre = pre_enrolled.ok_or_else(|| Error::invalid("VP init needs pre-enrolled speech"))?;
                let e = self.model.embed_speaker(&self.tensor(&unit_rms(pre.samples()))?)?;
                Memory { speaker: Some(e.unsqueeze(1)?), context: None }
            }
        };
        let (est, ss, _) = self.run_model(window, cues, &memory)?;
        trace.speaker_scores = ss;
        let we = energy(&est);
        let scale = self.norm_scale(we, est.len());
        let out: Vec<f64> = est.iter().map(|v| v * scale).collect();
        trace.window_energy = we;
        trace.scale = scale;
        trace.emitted = out.len();
        trace.emitted_energy = energy(&out);
        self.state.cumulative_energy += trace.emitted_energy;
        self.state.emitted.extend_from_slice(&out);

        match self.cfg.eval_setting {
            EvalSetting::VisualOnly => {}
            EvalSetting::SelfEnro => self.store_reference(&out)?,
            EvalSetting::PreEnro => {
                let pre = pre_enrolled.ok_or_else(|| Error::invalid("pre-enrolled setting needs pre-enrolled speech"))?;
                self.store_reference(pre.samples())?;
            }
            EvalSetting::TgtEnro => {
                let t = target_window.ok_or_else(|| Error::invalid("target-enrolled setting needs the target"))?;
                self.store_reference(t)?;
            }
        }
        self.state.k = 1;
        trace.wall_s = started.elapsed().as_secs_f64();
        self.finish_trace(&mut trace)?;
        Ok((out, trace))
    }

    /// One sliding step. `window` has `t_win` samples; the last `emit`
    /// samples of the normalized estimate are returned.
    pub fn step(
        &mut self,
        window: &[f64],
        cues: &CueStream,
        emit: usize,
        target_window: Option<&[f64]>,
        reset: bool,
        bounds: (i64, usize),
    ) -> Result<(Vec<f64>, StepTrace)> {
        if self.state.k == 0 {
            return Err(Error::invalid("init step has not run"));
        }
        if window.len() != self.cfg.t_win {
            return Err(Error::invalid(format!("window has {} samples, expected {}", window.len(), self.cfg.t_win)));
        }
        if emit == 0 || emit > window.len() {
            return Err(Error::invalid(format!("cannot emit {emit} samples from a window of {}", window.len())));
        }
        let started = Instant::now();
        let mut trace = self.trace_base(self.state.k, bounds.0, bounds.1)?;
        if reset {
            if let Some(b) = self.state.speaker_bank.as_mut() {
                b.reset();
            }
            if let Some(b) = self.state.context_bank.as_mut() {
                b.reset();
            }
            trace.reset = true;
        }
        if self.cfg.eval_setting == EvalSetting::TgtEnro {
            let t = target_window.ok_or_else(|| Error::invalid("target-enrolled setting needs the target"))?;
            self.store_reference(t)?;
        }
        let memory = self.bank_memory()?;
        let (est, ss, cs) = self.run_model(window, cues, &memory)?;
        if let (Some(b), Some(s)) = (self.state.speaker_bank.as_mut(), ss.clone()) {
            b.observe_scores(s);
        }
        if let (Some(b), Some(s)) = (self.state.context_bank.as_mut(), cs.clone()) {
            b.observe_scores(s);
        }
        trace.speaker_scores = ss;
        trace.context_scores = cs;

        let we = energy(&est);
        let scale = self.norm_scale(we, est.len());
        let normalized: Vec<f64> = est.iter().map(|v| v * scale).collect();
        let out = normalized[normalized.len() - emit..].to_vec();
        trace.window_energy = we;
        trace.scale = scale;
        trace.emitted = emit;
        trace.emitted_energy = energy(&out);
        self.state.cumulative_energy += trace.emitted_energy;
        self.state.emitted.extend_from_slice(&out);
        if self.cfg.eval_setting == EvalSetting::SelfEnro {
            self.store_reference(&normalized)?;
        }
        self.state.k += 1;
        trace.wall_s = started.elapsed().as_secs_f64();
        self.finish_trace(&mut trace)?;
        Ok((out, trace))
    }
}

fn padded_window(x: &[f64], start: i64, end: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity((end as i64 - start) as usize);
    if start < 0 {
        out.resize((-start) as usize, 0.0);
    }
    out.extend_from_slice(&x[start.max(0) as usize..end]);
    out
}

fn check_inputs(inputs: &StreamInputs, cfg: &StreamConfig) -> Result<()> {
    let n = inputs.mixture.len();
    if let Some(t) = inputs.target {
        if t.len() != n {
            return Err(Error::invalid("target and mixture lengths differ"));
        }
    }
    if cfg.eval_setting == EvalSetting::TgtEnro && inputs.target.is_none() {
        return Err(Error::invalid("target-enrolled setting needs the target"));
    }
    if (cfg.eval_setting == EvalSetting::PreEnro || cfg.init_mode == InitMode::VpInit) && inputs.pre_enrolled.is_none() {
        return Err(Error::invalid("pre-enrolled speech is required by this configuration"));
    }
    Ok(())
}

fn stream_impl(model: &MemoModel, inputs: &StreamInputs, cfg: &StreamConfig, switch: Option<usize>) -> Result<StreamOutput> {
    check_inputs(inputs, cfg)?;
    let started = Instant::now();
    let x = inputs.mixture.samples();
    let total = x.len();
    let mut engine = StreamEngine::new(model, cfg.clone(), inputs.mixture.rate())?;
    let mut trace = Vec::new();

    let init_len = cfg.t_init.min(total);
    let init_cues = if cfg.clean_init { inputs.clean_cues.unwrap_or(inputs.cues) } else { inputs.cues };
    let tgt_init = inputs.target.map(|t| &t.samples()[..init_len]);
    let (_, t0) = engine.init_step(&x[..init_len], &init_cues.window(0, init_len), inputs.pre_enrolled, tgt_init)?;
    trace.push(t0);

    let reset_at = switch.filter(|_| cfg.empty_on_switch).and_then(|s| cfg.reset_step(s, total));
    for k in 1..=cfg.steps(total) {
        let (start, end) = cfg.window_bounds(k, total);
        let emit = end - engine.state().emitted.len();
        let window = padded_window(x, start, end);
        let tgt = inputs.target.map(|t| padded_window(t.samples(), start, end));
        let (_, tr) = engine.step(
            &window,
            &inputs.cues.window_from(start, end),
            emit,
            tgt.as_deref(),
            reset_at == Some(k),
            (start, end),
        )?;
        trace.push(tr);
    }
    let processing_s = started.elapsed().as_secs_f64();
    let estimate = Waveform::new(engine.state.emitted, engine.rate)?;
    Ok(StreamOutput { estimate, trace, processing_s })
}

/// Streams a whole utterance. The estimate has the mixture's length.
pub fn run_stream(model: &MemoModel, inputs: &StreamInputs, cfg: &StreamConfig) -> Result<StreamOutput> {
    stream_impl(model, inputs, cfg, None)
}

/// Like [`run_stream`], reading the switch point from the cue stream; with
/// `empty_on_switch` both banks are emptied at the first step whose window
/// contains the switch.
pub fn run_switch_stream(model: &MemoModel, inputs: &StreamInputs, cfg: &StreamConfig) -> Result<StreamOutput> {
    let s = inputs
        .cues
        .switch_s()
        .ok_or_else(|| Error::invalid("cue stream carries no switch point"))?;
    let sample = (s * inputs.mixture.rate() as f64).round() as usize;
    stream_impl(model, inputs, cfg, Some(sample))
}

/// Offline extraction: one window over the whole utterance. The
/// self-enrolled setting runs twice, the second pass using the first pass's
/// estimate as its reference.
pub fn run_offline(model: &MemoModel, inputs: &StreamInputs, setting: EvalSetting, banks: BankMode) -> Result<Waveform> {
    let x = inputs.mixture.samples();
    let dtype = model.dtype();
    let to_tensor = |v: &[f64]| -> Result<Tensor> { Ok(Tensor::from_vec(v.to_vec(), (1, v.len()), &Device::Cpu)?.to_dtype(dtype)?) };
    let mix = to_tensor(x)?;
    let cues = cue_tensor(inputs.cues, dtype)?;
    let pass = |memory: &Memory| -> Result<Vec<f64>> {
        let out = model.forward(&mix, &cues, memory)?;
        Ok(nn::tensor_to_rows(&out.estimate)?.remove(0))
    };
    let with_reference = |r: &[f64]| -> Result<Vec<f64>> {
        let r = to_tensor(&unit_rms(&fit_tail(r, x.len())))?;
        let speaker = if banks.speaker() { Some(model.embed_speaker(&r)?.unsqueeze(1)?) } else { None };
        let context = if banks.contextual() { Some(model.encode_reference(&r)?.unsqueeze(1)?) } else { None };
        pass(&Memory { speaker, context })
    };
    let est = match setting {
        EvalSetting::VisualOnly => pass(&Memory::none())?,
        EvalSetting::SelfEnro => with_reference(&pass(&Memory::none())?)?,
        EvalSetting::PreEnro => with_reference(
            inputs.pre_enrolled.ok_or_else(|| Error::invalid("pre-enrolled speech is required"))?.samples(),
        )?,
        EvalSetting::TgtEnro => {
            with_reference(inputs.target.ok_or_else(|| Error::invalid("the target is required"))?.samples())?
        }
    };
    Waveform::new(est, inputs.mixture.rate())
}
