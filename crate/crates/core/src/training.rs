//! Pseudo-autoregressive (PAR) training: SI-SNR loss, curriculum blending,
//! training-time memory construction, the two-stage step, Adam with a
//! plateau schedule, and speaker-encoder pretraining.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var, D};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointHeader};
use crate::encoders::{cue_tensor, EncoderDims, SpeakerEncoder, SPEAKER_ENCODER_PREFIX};
use crate::error::{Error, Result};
use crate::model::{BankMode, InitMode, MemoModel, Memory};
use crate::nn::{self, Linear, ParamStore};
use crate::signals::{energy, rng_for, sub_seed, synth_speaker, CueStream, MixtureBundle, SpeakerId, Waveform};

pub const SI_SNR_CLAMP_DB: f64 = 60.0;
const EPS: f64 = 1e-8;

/// SI-SNR in dB on raw sample slices. Divisions are guarded by `1e-8`
/// relative to the reference energy, so the value is exactly invariant to
/// rescaling either argument; the result is clamped to ±60 dB.
pub fn si_snr_with(est: &[f64], reference: &[f64], zero_mean: bool) -> Result<f64> {
    if est.len() != reference.len() {
        return Err(Error::invalid(format!("length mismatch: {} vs {}", est.len(), reference.len())));
    }
    if est.is_empty() {
        return Err(Error::invalid("empty signals"));
    }
    let centre = |x: &[f64]| -> Vec<f64> {
        if zero_mean {
            let m = x.iter().sum::<f64>() / x.len() as f64;
            x.iter().map(|v| v - m).collect()
        } else {
            x.to_vec()
        }
    };
    let (e, r) = (centre(est), centre(reference));
    let rr = energy(&r);
    if !(rr > 0.0) {
        return Err(Error::invalid("reference has zero energy"));
    }
    let dot: f64 = e.iter().zip(&r).map(|(a, b)| a * b).sum();
    let scale = dot / rr;
    let target = scale * scale * rr;
    let noise: f64 = e.iter().zip(&r).map(|(a, b)| (a - scale * b).powi(2)).sum();
    let ee = energy(&e);
    if target <= EPS * EPS * ee || target == 0.0 {
        return Ok(-SI_SNR_CLAMP_DB);
    }
    let ratio = target / noise.max(EPS * target);
    Ok((10.0 * ratio.log10()).clamp(-SI_SNR_CLAMP_DB, SI_SNR_CLAMP_DB))
}

pub fn si_snr(est: &Waveform, reference: &Waveform) -> Result<f64> {
    si_snr_with(est.samples(), reference.samples(), true)
}

/// Negative SI-SNR (dB) per row of `(B, T)` tensors; differentiable.
pub fn si_snr_loss(est: &Tensor, reference: &Tensor, zero_mean: bool) -> Result<Tensor> {
    let (e, r) = if zero_mean {
        (
            est.broadcast_sub(&est.mean_keepdim(D::Minus1)?)?,
            reference.broadcast_sub(&reference.mean_keepdim(D::Minus1)?)?,
        )
    } else {
        (est.clone(), reference.clone())
    };
    let dot = (&e * &r)?.sum_keepdim(D::Minus1)?;
    let rr = (r.sqr()?.sum_keepdim(D::Minus1)? + EPS)?;
    let s = r.broadcast_mul(&(dot / rr)?)?;
    let noise = (&e - &s)?;
    let ratio = ((s.sqr()?.sum(D::Minus1)? + EPS)? / (noise.sqr()?.sum(D::Minus1)? + EPS)?)?;
    Ok((ratio.log()? * (-10.0 / std::f64::consts::LN_10))?)
}

/// Scaling of the ground truth in the curriculum blend.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlendMode {
    /// `‖x̂¹‖² / ‖x‖²`, as written.
    #[default]
    Literal,
    /// `‖x̂¹‖ / ‖x‖`: matches the estimate's RMS.
    Rms,
}

impl BlendMode {
    fn factor(self, est_energy: f64, ref_energy: f64) -> f64 {
        match self {
            Self::Literal => est_energy / ref_energy,
            Self::Rms => (est_energy / ref_energy).sqrt(),
        }
    }
}

/// `α·x̂¹ + (1 − α)·f·x` with `f` from `mode`.
pub fn curriculum_blend_with(x1: &Waveform, x: &Waveform, alpha: f64, mode: BlendMode) -> Result<Waveform> {
    if x1.len() != x.len() {
        return Err(Error::invalid("blend inputs differ in length"));
    }
    let xe = x.energy();
    if !(xe > 0.0) {
        return Err(Error::invalid("ground truth has zero energy"));
    }
    let f = mode.factor(x1.energy(), xe);
    let out = x1.samples().iter().zip(x.samples()).map(|(a, b)| alpha * a + (1.0 - alpha) * f * b).collect();
    Waveform::new(out, x.rate())
}

pub fn curriculum_blend(x1: &Waveform, x: &Waveform, alpha: f64) -> Result<Waveform> {
    curriculum_blend_with(x1, x, alpha, BlendMode::Literal)
}

/// Row-wise blend of `(B, T)` tensors.
pub fn blend_tensor(x1: &Tensor, x: &Tensor, alpha: f64, mode: BlendMode) -> Result<Tensor> {
    if alpha >= 1.0 {
        return Ok(x1.clone());
    }
    let ratio = (x1.sqr()?.sum_keepdim(D::Minus1)? / (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?)?;
    let f = match mode {
        BlendMode::Literal => ratio,
        BlendMode::Rms => ratio.sqrt()?,
    };
    Ok(((x1 * alpha)? + x.broadcast_mul(&(f * (1.0 - alpha))?)?)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumSchedule {
    pub ep_cr: usize,
}

impl CurriculumSchedule {
    pub fn alpha(&self, epoch: usize) -> f64 {
        if self.ep_cr == 0 || epoch >= self.ep_cr {
            1.0
        } else {
            epoch as f64 / self.ep_cr as f64
        }
    }
}

fn shift_right(x: &[f64], s: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    out[s..].copy_from_slice(&x[..x.len() - s]);
    out
}

/// Shifts `i·t_sh` for `i = 1..=n`, shuffled.
pub fn memory_shifts(n: usize, t_sh: usize, len: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::invalid("at least one memory item is required"));
    }
    if n * t_sh >= len {
        return Err(Error::invalid(format!("{n} shifts of {t_sh} do not fit in {len} samples")));
    }
    let mut shifts: Vec<usize> = (1..=n).map(|i| i * t_sh).collect();
    shifts.shuffle(rng);
    Ok(shifts)
}

/// Item `i` keeps the first `T − i·t_sh` samples of `x`, left-padded with
/// zeros back to `T`, imitating the estimate of the window `i` shifts ago.
/// The list is returned shuffled.
pub fn build_training_memory(x: &Waveform, n: usize, t_sh: usize, rng: &mut impl Rng) -> Result<Vec<Waveform>> {
    memory_shifts(n, t_sh, x.len(), rng)?
        .into_iter()
        .map(|s| Waveform::new(shift_right(x.samples(), s), x.rate()))
        .collect()
}

fn shift_tensor(x: &Tensor, s: usize) -> Result<Tensor> {
    if s == 0 {
        return Ok(x.clone());
    }
    let t = x.dim(D::Minus1)?;
    if s >= t {
        return Err(Error::invalid(format!("memory shift {s} leaves nothing of a {t}-sample crop")));
    }
    Ok(x.narrow(1, 0, t - s)?.pad_with_zeros(1, s, 0)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub init_mode: InitMode,
    pub bank_mode: BankMode,
    /// With `bank_mode = both`, draw speaker-only, contextual-only or both
    /// per batch so one parameter set serves every bank configuration.
    pub sample_bank_subsets: bool,
    pub loss_beta: f64,
    pub slots_min: usize,
    pub slots_max: usize,
    /// Upper end of the per-batch memory shift, samples.
    pub shift_max: usize,
    pub lr: f64,
    pub halve_patience: usize,
    pub stop_patience: usize,
    pub max_epochs: usize,
    pub ep_cr: usize,
    pub batch_size: usize,
    /// Training crop length, samples; crops start on cue-frame boundaries.
    pub crop_len: usize,
    pub detach_stage1: bool,
    pub blend_mode: BlendMode,
    pub zero_mean: bool,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            init_mode: InitMode::VInit,
            bank_mode: BankMode::Contextual,
            sample_bank_subsets: false,
            loss_beta: 0.2,
            slots_min: 1,
            slots_max: 5,
            shift_max: 16_000,
            lr: 1e-3,
            halve_patience: 6,
            stop_patience: 10,
            max_epochs: 100,
            ep_cr: 50,
            batch_size: 8,
            crop_len: 32_000,
            detach_stage1: false,
            blend_mode: BlendMode::Literal,
            zero_mean: true,
            grad_clip: 5.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(m.to_string()));
        if !(0.0..=1.0).contains(&self.loss_beta) {
            return bad("loss_beta must lie in [0, 1]");
        }
        if self.slots_min == 0 || self.slots_min > self.slots_max {
            return bad("slots range must satisfy 1 <= min <= max");
        }
        if self.batch_size == 0 || self.crop_len == 0 || self.max_epochs == 0 {
            return bad("batch_size, crop_len and max_epochs must be positive");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        Ok(())
    }

    pub fn schedule(&self) -> CurriculumSchedule {
        CurriculumSchedule { ep_cr: self.ep_cr }
    }
}

/// One training utterance.
#[derive(Clone, Debug)]
pub struct Example {
    pub mixture: Waveform,
    pub target: Waveform,
    pub cues: CueStream,
    pub pre_enrolled: Waveform,
}

impl From<MixtureBundle> for Example {
    fn from(b: MixtureBundle) -> Self {
        Self { mixture: b.mixture, target: b.target, cues: b.cues, pre_enrolled: b.pre_enrolled }
    }
}

#[derive(Clone, Debug)]
pub struct TrainBatch {
    pub mixture: Tensor,
    pub target: Tensor,
    pub cues: Tensor,
    pub pre_enrolled: Tensor,
}

fn frame_samples(c: &CueStream) -> usize {
    c.samples_per_frame().round().max(1.0) as usize
}

/// Random frame-aligned crops of `crop_len` samples.
pub fn make_batch(examples: &[&Example], crop_len: usize, rng: &mut impl Rng, dtype: DType) -> Result<TrainBatch> {
    let mut mix = Vec::new();
    let mut tgt = Vec::new();
    let mut cues = Vec::new();
    let mut pre = Vec::new();
    for ex in examples {
        let len = ex.mixture.len();
        if len < crop_len {
            return Err(Error::invalid(format!("utterance of {len} samples is shorter than the crop {crop_len}")));
        }
        let span = frame_samples(&ex.cues);
        let start = rng.random_range(0..=(len - crop_len) / span) * span;
        mix.extend_from_slice(&ex.mixture.samples()[start..start + crop_len]);
        tgt.extend_from_slice(&ex.target.samples()[start..start + crop_len]);
        cues.push(cue_tensor(&ex.cues.window(start, start + crop_len), dtype)?);
        pre.extend(crate::signals::fit_tail(ex.pre_enrolled.samples(), crop_len));
    }
    let b = examples.len();
    let dev = Device::Cpu;
    Ok(TrainBatch {
        mixture: Tensor::from_vec(mix, (b, crop_len), &dev)?.to_dtype(dtype)?,
        target: Tensor::from_vec(tgt, (b, crop_len), &dev)?.to_dtype(dtype)?,
        cues: Tensor::cat(&cues, 0)?,
        pre_enrolled: Tensor::from_vec(pre, (b, crop_len), &dev)?.to_dtype(dtype)?,
    })
}

/// Per-batch random choices of a PAR step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepPlan {
    pub shifts: Vec<usize>,
    pub t_sh: usize,
    pub speaker: bool,
    pub contextual: bool,
}

impl StepPlan {
    pub fn sample(cfg: &TrainConfig, len: usize, rng: &mut impl Rng) -> Result<Self> {
        let n = rng.random_range(cfg.slots_min..=cfg.slots_max);
        let t_sh = rng.random_range(0..=cfg.shift_max.min((len - 1) / n));
        let shifts = memory_shifts(n, t_sh, len, rng)?;
        let (speaker, contextual) = match cfg.bank_mode {
            BankMode::Both if cfg.sample_bank_subsets => match rng.random_range(0..3) {
                0 => (true, false),
                1 => (false, true),
                _ => (true, true),
            },
            m => (m.speaker(), m.contextual()),
        };
        Ok(Self { shifts, t_sh, speaker, contextual })
    }
}

pub struct ParOutput {
    pub loss: Tensor,
    pub stage1: f64,
    pub stage2: f64,
    pub x1: Tensor,
    pub x2: Tensor,
}

/// Encodes memory waveforms `(B, N, T)` into the banks selected by `plan`.
pub fn encode_memory(model: &MemoModel, items: &Tensor, speaker: bool, contextual: bool) -> Result<Memory> {
    let (b, n, t) = items.dims3()?;
    let flat = items.reshape((b * n, t))?;
    let speaker = if speaker {
        let e = model.embed_speaker(&flat)?;
        Some(e.reshape((b, n, model.config.channels))?)
    } else {
        None
    };
    let context = if contextual {
        let z = model.encode_reference(&flat)?;
        let (_, l, c) = z.dims3()?;
        Some(z.reshape((b, n, l, c))?)
    } else {
        None
    };
    Ok(Memory { speaker, context })
}

/// One two-stage PAR step; returns the scalar loss and both stage terms.
pub fn par_step(model: &MemoModel, batch: &TrainBatch, cfg: &TrainConfig, alpha: f64, plan: &StepPlan) -> Result<ParOutput> {
    let x = &batch.target;
    let init_memory = match cfg.init_mode {
        InitMode::VInit => Memory::none(),
        InitMode::VpInit => Memory { speaker: Some(model.embed_speaker(&batch.pre_enrolled)?.unsqueeze(1)?), context: None },
    };
    let x1 = model.forward(&batch.mixture, &batch.cues, &init_memory)?.estimate;
    let l1 = si_snr_loss(&x1, x, cfg.zero_mean)?.mean_all()?;

    let seed = if cfg.detach_stage1 { x1.detach() } else { x1.clone() };
    let blended = blend_tensor(&seed, x, alpha, cfg.blend_mode)?;
    let items: Vec<Tensor> = plan.shifts.iter().map(|s| shift_tensor(&blended, *s)).collect::<Result<_>>()?;
    let items = Tensor::stack(&items, 1)?;
    let memory = encode_memory(model, &items, plan.speaker, plan.contextual)?;
    let x2 = model.forward(&batch.mixture, &batch.cues, &memory)?.estimate;
    let l2 = si_snr_loss(&x2, x, cfg.zero_mean)?.mean_all()?;

    let beta = cfg.loss_beta;
    let loss = ((&l1 * beta)? + (&l2 * (1.0 - beta))?)?;
    Ok(ParOutput { stage1: nn::scalar(&l1)?, stage2: nn::scalar(&l2)?, loss, x1, x2 })
}

/// Adam with global-norm gradient clipping. Moments are kept per parameter
/// name so they can be checkpointed.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// Applies one update; returns the pre-clipping gradient norm.
    pub fn apply(&mut self, params: &[(String, Var)], grads: &GradStore, clip: Option<f64>) -> Result<f64> {
        let mut sq = 0.0;
        let mut present = Vec::new();
        for (name, var) in params {
            if let Some(g) = grads.get(var.as_tensor()) {
                sq += nn::scalar(&g.sqr()?.sum_all()?)?;
                present.push((name, var, g.detach()));
            }
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::Divergence { epoch: 0, batch: 0, detail: format!("gradient norm {norm}") });
        }
        let scale = match clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, var, g) in present {
            let g = (g * scale)?;
            let m = match self.m.get(name) {
                Some(m) => ((m * self.beta1)? + (&g * (1.0 - self.beta1))?)?,
                None => (&g * (1.0 - self.beta1))?,
            };
            let v = match self.v.get(name) {
                Some(v) => ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                None => (g.sqr()? * (1.0 - self.beta2))?,
            };
            let denom = ((&v / bc2)?.sqrt()? + self.eps)?;
            let update = ((&m / bc1)? / denom)?;
            var.set(&(var.as_tensor() - (update * self.lr)?)?)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(norm)
    }

    fn tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (k, t) in &self.m {
            out.insert(format!("adam.m.{k}"), t.clone());
        }
        for (k, t) in &self.v {
            out.insert(format!("adam.v.{k}"), t.clone());
        }
        out
    }

    fn restore(lr: f64, step: u64, tensors: &std::collections::HashMap<String, Tensor>) -> Self {
        let mut a = Self::new(lr);
        a.step = step;
        for (k, t) in tensors {
            if let Some(n) = k.strip_prefix("adam.m.") {
                a.m.insert(n.to_string(), t.clone());
            } else if let Some(n) = k.strip_prefix("adam.v.") {
                a.v.insert(n.to_string(), t.clone());
            }
        }
        a
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlateauAction {
    Improved,
    Continue,
    Halve,
    Stop,
}

/// Halve the learning rate after `halve_patience` epochs without a new best
/// validation loss (counter restarts after each halving); stop after
/// `stop_patience` epochs without one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub halve_patience: usize,
    pub stop_patience: usize,
    pub best: Option<f64>,
    pub since_best: usize,
    pub since_change: usize,
}

impl PlateauScheduler {
    pub fn new(halve_patience: usize, stop_patience: usize) -> Self {
        Self { halve_patience, stop_patience, best: None, since_best: 0, since_change: 0 }
    }

    pub fn observe(&mut self, val: f64) -> PlateauAction {
        if self.best.is_none_or(|b| val < b) {
            self.best = Some(val);
            self.since_best = 0;
            self.since_change = 0;
            return PlateauAction::Improved;
        }
        self.since_best += 1;
        self.since_change += 1;
        if self.since_best >= self.stop_patience {
            PlateauAction::Stop
        } else if self.since_change >= self.halve_patience {
            self.since_change = 0;
            PlateauAction::Halve
        } else {
            PlateauAction::Continue
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub alpha: f64,
    pub lr: f64,
    pub loss1: f64,
    pub loss2: f64,
    pub val_loss: f64,
    pub val_sisnr: f64,
    pub seconds: f64,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,alpha,lr,loss1,loss2,val_loss,val_sisnr";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6e},{:.6},{:.6},{:.6},{:.6}",
            self.epoch, self.alpha, self.lr, self.loss1, self.loss2, self.val_loss, self.val_sisnr
        )
    }
}

/// Progress persisted in checkpoint headers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epochs_done: usize,
    pub lr: f64,
    pub adam_step: u64,
    pub scheduler: PlateauScheduler,
    pub history: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub stopped: bool,
    pub config: TrainConfig,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub history: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
    pub stopped_early: bool,
}

pub struct TrainData {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Directory for `latest.safetensors`, `best.safetensors` and `metrics.csv`.
    pub out_dir: Option<PathBuf>,
    /// Continue from `out_dir/latest.safetensors` when it exists.
    pub resume: bool,
}

pub const LATEST: &str = "latest.safetensors";
pub const BEST: &str = "best.safetensors";

fn batch_rng(seed: u64, epoch: usize, batch: usize, tag: u64) -> ChaCha8Rng {
    rng_for(sub_seed(seed, tag), ((epoch as u64) << 32) | batch as u64)
}

const TAG_ORDER: u64 = 11;
const TAG_TRAIN: u64 = 12;
const TAG_VAL: u64 = 13;

/// Mean validation loss and stage-2 SI-SNR at `alpha = 1` with fixed draws.
pub fn validate(model: &MemoModel, val: &[Example], cfg: &TrainConfig) -> Result<(f64, f64)> {
    if val.is_empty() {
        return Err(Error::invalid("empty validation set"));
    }
    let mut loss = 0.0;
    let mut sisnr = 0.0;
    for (j, chunk) in val.chunks(cfg.batch_size).enumerate() {
        let mut rng = batch_rng(cfg.seed, 0, j, TAG_VAL);
        let refs: Vec<&Example> = chunk.iter().collect();
        let batch = make_batch(&refs, cfg.crop_len, &mut rng, model.dtype())?;
        let plan = StepPlan::sample(cfg, cfg.crop_len, &mut rng)?;
        let out = par_step(model, &batch, cfg, 1.0, &plan)?;
        let w = chunk.len() as f64;
        loss += nn::scalar(&out.loss)? * w;
        sisnr -= out.stage2 * w;
    }
    Ok((loss / val.len() as f64, sisnr / val.len() as f64))
}

fn write_metrics(dir: &Path, history: &[EpochLog]) -> Result<()> {
    let mut s = String::from(EpochLog::CSV_HEADER);
    s.push('\n');
    for h in history {
        s.push_str(&h.csv_row());
        s.push('\n');
    }
    std::fs::write(dir.join("metrics.csv"), s)?;
    Ok(())
}

fn save_state(path: &Path, model: &MemoModel, state: &TrainState, adam: &Adam) -> Result<()> {
    let header = CheckpointHeader::for_model(model, serde_json::to_value(state)?);
    checkpoint::save(path, model, &header, &adam.tensors())
}

/// Runs PAR training. The model ends up holding the best-validation weights.
pub fn train(model: &MemoModel, data: &TrainData, cfg: &TrainConfig, opts: &TrainOptions) -> Result<TrainReport> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut state = TrainState {
        epochs_done: 0,
        lr: cfg.lr,
        adam_step: 0,
        scheduler: PlateauScheduler::new(cfg.halve_patience, cfg.stop_patience),
        history: Vec::new(),
        best_epoch: None,
        stopped: false,
        config: cfg.clone(),
    };
    let mut adam = Adam::new(cfg.lr);
    let mut best = model.store.snapshot()?;

    let latest = opts.out_dir.as_ref().map(|d| d.join(LATEST));
    if let Some(path) = latest.as_ref().filter(|p| opts.resume && p.exists()) {
        let loaded = checkpoint::load(path)?;
        model.store.load(&loaded.tensors)?;
        let saved: TrainState = serde_json::from_value(loaded.header.state.clone())?;
        adam = Adam::restore(saved.lr, saved.adam_step, &loaded.tensors);
        state = TrainState { config: cfg.clone(), ..saved };
        let best_path = path.with_file_name(BEST);
        if best_path.exists() {
            let b = checkpoint::load(&best_path)?;
            best = b.tensors.into_iter().filter(|(k, _)| model.store.get(k).is_some()).collect();
        }
        log::info!("resumed after epoch {}", state.epochs_done);
    }

    let params = model.store.trainable();
    let schedule = cfg.schedule();
    while !state.stopped && state.epochs_done < cfg.max_epochs {
        let epoch = state.epochs_done;
        let started = Instant::now();
        let alpha = schedule.alpha(epoch);
        adam.lr = state.lr;
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut batch_rng(cfg.seed, epoch, 0, TAG_ORDER));
        let (mut sum1, mut sum2, mut count) = (0.0, 0.0, 0.0);
        for (j, idx) in order.chunks(cfg.batch_size).enumerate() {
            let mut rng = batch_rng(cfg.seed, epoch, j, TAG_TRAIN);
            let refs: Vec<&Example> = idx.iter().map(|&i| &data.train[i]).collect();
            let batch = make_batch(&refs, cfg.crop_len, &mut rng, model.dtype())?;
            let plan = StepPlan::sample(cfg, cfg.crop_len, &mut rng)?;
            let out = par_step(model, &batch, cfg, alpha, &plan)?;
            let total = nn::scalar(&out.loss)?;
            if !total.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: j,
                    detail: format!("loss {total} (stage 1 {}, stage 2 {})", out.stage1, out.stage2),
                });
            }
            let grads = out.loss.backward()?;
            adam.apply(&params, &grads, Some(cfg.grad_clip)).map_err(|e| match e {
                Error::Divergence { detail, .. } => Error::Divergence { epoch, batch: j, detail },
                other => other,
            })?;
            let w = idx.len() as f64;
            sum1 += out.stage1 * w;
            sum2 += out.stage2 * w;
            count += w;
        }
        let (val_loss, val_sisnr) = validate(model, &data.val, cfg)?;
        let entry = EpochLog {
            epoch,
            alpha,
            lr: state.lr,
            loss1: sum1 / count,
            loss2: sum2 / count,
            val_loss,
            val_sisnr,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: alpha {alpha:.2} lr {:.2e} loss1 {:.3} loss2 {:.3} val {:.3} ({:.1}s)",
            entry.lr,
            entry.loss1,
            entry.loss2,
            val_loss,
            entry.seconds
        );
        state.history.push(entry);
        state.epochs_done += 1;
        let action = state.scheduler.observe(val_loss);
        match action {
            PlateauAction::Improved => {
                state.best_epoch = Some(epoch);
                best = model.store.snapshot()?;
            }
            PlateauAction::Halve => state.lr *= 0.5,
            PlateauAction::Stop => state.stopped = true,
            PlateauAction::Continue => {}
        }
        state.adam_step = adam.step;
        if let Some(dir) = &opts.out_dir {
            save_state(&dir.join(LATEST), model, &state, &adam)?;
            if action == PlateauAction::Improved {
                save_state(&dir.join(BEST), model, &state, &adam)?;
            }
            write_metrics(dir, &state.history)?;
        }
    }
    let best: std::collections::HashMap<String, Tensor> = best.into_iter().collect();
    model.store.load(&best)?;
    Ok(TrainReport {
        history: state.history,
        best_epoch: state.best_epoch,
        best_val_loss: state.scheduler.best,
        stopped_early: state.stopped,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpeakerPretrainConfig {
    pub epochs: usize,
    pub utterances_per_speaker: usize,
    pub duration_s: f64,
    pub batch_size: usize,
    pub lr: f64,
    /// Logit scale applied to cosine similarities.
    pub scale: f64,
    pub seed: u64,
}

impl Default for SpeakerPretrainConfig {
    fn default() -> Self {
        Self { epochs: 15, utterances_per_speaker: 12, duration_s: 1.0, batch_size: 16, lr: 3e-3, scale: 10.0, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct SpeakerPretrainReport {
    pub final_loss: f64,
    pub train_accuracy: f64,
}

fn cosine_logits(enc: &SpeakerEncoder, classes: &Linear, x: &Tensor, scale: f64) -> Result<Tensor> {
    let e = enc.forward(x)?;
    let w = &classes.weight;
    let wn = w.broadcast_div(&(w.sqr()?.sum_keepdim(0)? + 1e-12)?.sqrt()?)?;
    Ok((e.matmul(&wn)? * scale)?)
}

fn log_softmax_nll(logits: &Tensor, labels: &[u32]) -> Result<Tensor> {
    let max = logits.max_keepdim(1)?;
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(1)?.log()?;
    let logp = shifted.broadcast_sub(&lse)?;
    let idx = Tensor::new(labels, logits.device())?.unsqueeze(1)?;
    Ok(logp.gather(&idx, 1)?.neg()?.mean_all()?)
}

/// Trains a speaker encoder as a speaker classifier on clean synthetic
/// utterances, then copies its weights into `model` (where it is frozen).
pub fn pretrain_speaker_encoder(
    model: &MemoModel,
    speakers: &[SpeakerId],
    cfg: &SpeakerPretrainConfig,
) -> Result<SpeakerPretrainReport> {
    if speakers.len() < 2 {
        return Err(Error::invalid("speaker pretraining needs at least two speakers"));
    }
    let dtype = model.dtype();
    let dims: EncoderDims = model.config.encoder_dims();
    let mut store = ParamStore::new(dtype, sub_seed(cfg.seed, 21));
    let enc = SpeakerEncoder::new(&mut store, "speaker_encoder", dims)?;
    let classes = store.linear("classifier", dims.channels, speakers.len(), false)?;

    let mut items = Vec::new();
    for (label, spk) in speakers.iter().enumerate() {
        for u in 0..cfg.utterances_per_speaker {
            let seed = sub_seed(cfg.seed, 1000 + (spk.0 as u64) * 10_000 + u as u64);
            items.push((synth_speaker(*spk, cfg.duration_s, seed)?, label as u32));
        }
    }
    let len = items[0].0.len();
    let params = store.trainable();
    let mut adam = Adam::new(cfg.lr);
    let mut rng = rng_for(cfg.seed, 22);
    let (mut last_loss, mut correct, mut seen) = (f64::NAN, 0usize, 0usize);
    for epoch in 0..cfg.epochs {
        items.shuffle(&mut rng);
        let (mut total, mut n) = (0.0, 0.0);
        for chunk in items.chunks(cfg.batch_size) {
            let flat: Vec<f64> = chunk.iter().flat_map(|(w, _)| w.samples().iter().copied()).collect();
            let x = Tensor::from_vec(flat, (chunk.len(), len), &Device::Cpu)?.to_dtype(dtype)?;
            let labels: Vec<u32> = chunk.iter().map(|(_, l)| *l).collect();
            let logits = cosine_logits(&enc, &classes, &x, cfg.scale)?;
            let loss = log_softmax_nll(&logits, &labels)?;
            let grads = loss.backward()?;
            adam.apply(&params, &grads, Some(5.0))?;
            total += nn::scalar(&loss)? * chunk.len() as f64;
            n += chunk.len() as f64;
            if epoch + 1 == cfg.epochs {
                let pred = logits.argmax(1)?.to_vec1::<u32>()?;
                correct += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
                seen += labels.len();
            }
        }
        last_loss = total / n;
        log::info!("speaker pretrain epoch {epoch}: loss {last_loss:.4}");
    }
    for (name, var) in store.with_prefix(SPEAKER_ENCODER_PREFIX) {
        let dst = model
            .store
            .get(&name)
            .ok_or_else(|| Error::invalid(format!("model lacks parameter {name}")))?;
        dst.set(var.as_tensor())?;
    }
    Ok(SpeakerPretrainReport { final_loss: last_loss, train_accuracy: correct as f64 / seen.max(1) as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn wave(v: &[f64]) -> Waveform {
        Waveform::new(v.to_vec(), 16_000).unwrap()
    }

    #[test]
    fn si_snr_scale_and_orthogonality() {
        let r = [1.0, -2.0, 3.0, 0.5, -1.5, 2.5];
        let noisy = [1.1, -2.0, 2.9, 0.6, -1.4, 2.4];
        let a = si_snr_with(&noisy, &r, true).unwrap();
        let scaled: Vec<f64> = noisy.iter().map(|v| v * 7.5).collect();
        assert!((si_snr_with(&scaled, &r, true).unwrap() - a).abs() < 1e-9);
        assert_eq!(si_snr_with(&r, &r, true).unwrap(), SI_SNR_CLAMP_DB);
        let twice: Vec<f64> = r.iter().map(|v| 2.0 * v).collect();
        assert_eq!(si_snr_with(&twice, &r, true).unwrap(), SI_SNR_CLAMP_DB);
        let ortho = [1.0, 1.0, -1.0, -1.0];
        let rr = [1.0, -1.0, 1.0, -1.0];
        assert_eq!(si_snr_with(&ortho, &rr, true).unwrap(), -SI_SNR_CLAMP_DB);
        assert!(si_snr_with(&ortho, &[0.0; 4], false).is_err());
        assert!(si_snr_with(&ortho, &[1.0; 4], true).is_err());
    }

    #[test]
    fn blend_endpoints() {
        let x1 = wave(&[1.0, 2.0, 0.0]);
        let x = wave(&[0.0, 1.0, 1.0]);
        assert_eq!(curriculum_blend(&x1, &x, 1.0).unwrap(), x1);
        let zero = curriculum_blend(&x1, &x, 0.0).unwrap();
        assert_eq!(zero.samples(), &[0.0, 2.5, 2.5]);
        let rms = curriculum_blend_with(&x1, &x, 0.0, BlendMode::Rms).unwrap();
        assert!((rms.energy() - x1.energy()).abs() < 1e-12);
        assert!(curriculum_blend(&x1, &wave(&[0.0, 0.0, 0.0]), 0.5).is_err());
    }

    #[test]
    fn alpha_schedule() {
        let s = CurriculumSchedule { ep_cr: 50 };
        let got: Vec<f64> = [0, 25, 50, 80].iter().map(|e| s.alpha(*e)).collect();
        assert_eq!(got, vec![0.0, 0.5, 1.0, 1.0]);
    }

    #[test]
    fn memory_items_are_shifted_prefixes() {
        let x = wave(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut items = build_training_memory(&x, 2, 2, &mut rng).unwrap();
        items.sort_by_key(|w| w.samples().iter().take_while(|v| **v == 0.0).count());
        assert_eq!(items[0].samples(), &[0.0, 0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(items[1].samples(), &[0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 3.0, 4.0]);
        let one = build_training_memory(&x, 1, 3, &mut rng).unwrap();
        assert_eq!(one[0].samples()[..4], [0.0, 0.0, 0.0, 1.0]);
        assert!(build_training_memory(&x, 4, 2, &mut rng).is_err());
        let same = build_training_memory(&x, 3, 0, &mut rng).unwrap();
        assert!(same.iter().all(|w| w == &x));
    }

    #[test]
    fn plateau_patience() {
        let mut s = PlateauScheduler::new(6, 10);
        assert_eq!(s.observe(1.0), PlateauAction::Improved);
        let acts: Vec<_> = (0..10).map(|_| s.observe(2.0)).collect();
        assert_eq!(acts.iter().filter(|a| **a == PlateauAction::Halve).count(), 1);
        assert_eq!(acts[5], PlateauAction::Halve);
        assert_eq!(acts[9], PlateauAction::Stop);
        assert!(acts[..9].iter().all(|a| *a != PlateauAction::Stop));
    }

    #[test]
    fn tensor_loss_matches_metric() {
        let r: Vec<f64> = (0..64).map(|i| ((i * 7 % 13) as f64 - 6.0) / 3.0).collect();
        let e: Vec<f64> = r.iter().enumerate().map(|(i, v)| v + 0.3 * ((i % 5) as f64 - 2.0)).collect();
        let want = -si_snr_with(&e, &r, true).unwrap();
        let et = Tensor::from_vec(e, (1, 64), &Device::Cpu).unwrap();
        let rt = Tensor::from_vec(r, (1, 64), &Device::Cpu).unwrap();
        let got = si_snr_loss(&et, &rt, true).unwrap().to_vec1::<f64>().unwrap()[0];
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }
}
