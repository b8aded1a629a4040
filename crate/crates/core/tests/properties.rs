use candle_core::{DType, Device, Tensor};
use memo::memory::{context_retrieve, speaker_retrieve, ContextAttention, SpeakerAttention};
use memo::model::{BankMode, MemoModel, ModelConfig};
use memo::nn::ParamStore;
use memo::signals::{
    apply_impairment, build_mixture, derive_cues, mix_at_snr, synth_speaker, CueStream, FrameLabel, ImpairmentType,
    MixtureSpec, SpeakerId, Waveform, DEFAULT_FRAME_RATE,
};
use memo::streaming::{run_stream, EvalSetting, NormMode, StreamConfig, StreamInputs};
use memo::training::{si_snr, si_snr_with};
use proptest::prelude::*;

fn seeded(shape: &[usize], seed: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut s = seed ^ 0x9E37_79B9_7F4A_7C15;
    let v: Vec<f64> = (0..n)
        .map(|_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 53) as f64 * 6.0 - 3.0
        })
        .collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let d = t.dims();
    t.reshape((d[..d.len() - 1].iter().product::<usize>(), d[d.len() - 1])).unwrap().to_vec2().unwrap()
}

fn assert_stochastic(t: &Tensor) {
    for r in rows(t) {
        assert!(r.iter().all(|v| *v >= 0.0));
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn retrieval_weights_are_distributions(n in 1usize..=5, ci in 0usize..3, l in 1usize..6, seed in any::<u64>()) {
        let c = [2, 8, 64][ci];
        let mut store = ParamStore::new(DType::F64, seed);
        let sa = SpeakerAttention::new(&mut store, "s", c).unwrap();
        let ca = ContextAttention::new(&mut store, "c", c).unwrap();
        let r = speaker_retrieve(&seeded(&[1, n, c], seed), &sa).unwrap();
        assert_stochastic(&r.attention);
        assert_stochastic(&r.slot_weights);
        let r = context_retrieve(&seeded(&[1, n, l, c], seed ^ 1), &seeded(&[1, l, c], seed ^ 2), &ca).unwrap();
        assert_stochastic(&r.attention);
        assert_stochastic(&r.slot_weights);
    }

    #[test]
    fn si_snr_ignores_gain(seed in any::<u64>(), gain in 1e-3f64..1e3, n in 8usize..200) {
        let r = rows(&seeded(&[1, n], seed)).remove(0);
        let e = rows(&seeded(&[1, n], seed ^ 7)).remove(0);
        let scaled: Vec<f64> = e.iter().map(|v| v * gain).collect();
        let a = si_snr_with(&e, &r, true).unwrap();
        prop_assert!((si_snr_with(&scaled, &r, true).unwrap() - a).abs() < 1e-6);
        let scaled_ref: Vec<f64> = r.iter().map(|v| v * gain).collect();
        prop_assert!((si_snr_with(&e, &scaled_ref, true).unwrap() - a).abs() < 1e-6);
    }

    #[test]
    fn mixing_hits_requested_snr(t in 0u32..13, gap in 1u32..12, snr in -10.0f64..10.0, seed in any::<u64>()) {
        let target = synth_speaker(SpeakerId(t), 0.5, seed).unwrap();
        let interferer = synth_speaker(SpeakerId(t + gap), 0.5, seed ^ 3).unwrap();
        let mix = mix_at_snr(&target, &interferer, snr).unwrap();
        let noise: Vec<f64> = mix.samples().iter().zip(target.samples()).map(|(m, x)| m - x).collect();
        let measured = 10.0 * (target.energy() / noise.iter().map(|v| v * v).sum::<f64>()).log10();
        prop_assert!((measured - snr).abs() < 1e-9);
    }

    #[test]
    fn impairment_spares_protected_prefix(ratio in 0.0f64..0.999, prefix in 0.0f64..3.0, k in 0usize..3, seed in any::<u64>()) {
        let target = synth_speaker(SpeakerId(2), 4.0, seed).unwrap();
        let clean = derive_cues(&target, DEFAULT_FRAME_RATE).unwrap();
        let cues = apply_impairment(&clean, ImpairmentType::ALL[k], ratio, seed, prefix).unwrap();
        let protected = (prefix * DEFAULT_FRAME_RATE).floor() as usize;
        for i in 0..protected.min(cues.len()) {
            prop_assert_eq!(cues.labels()[i], FrameLabel::Clean);
            prop_assert_eq!(cues.frames()[i], clean.frames()[i]);
        }
        let eligible = cues.len() - protected.min(cues.len());
        prop_assert_eq!(cues.impaired_count(), (ratio * eligible as f64).floor() as usize);
    }
}

fn tiny_model() -> MemoModel {
    let cfg = ModelConfig { channels: 4, hop: 8, hidden: 6, blocks: 2, speaker_hidden: 4, seed: 5, ..Default::default() };
    MemoModel::new(cfg, DType::F64).unwrap()
}

fn truncate_cues(c: &CueStream, samples: usize) -> CueStream {
    let frames = ((samples as f64 / c.samples_per_frame()).ceil() as usize).min(c.len());
    CueStream::new(c.frames()[..frames].to_vec(), c.labels()[..frames].to_vec(), c.frame_rate(), c.audio_rate()).unwrap()
}

/// Short streams cut from a half-second mixture, so syllable gaps cannot
/// leave either talker silent.
fn item(len: usize, seed: u64) -> (Waveform, Waveform, CueStream) {
    let spec = MixtureSpec {
        target_id: SpeakerId(1),
        interferer_id: SpeakerId(6),
        snr_db: 0.0,
        duration_s: 0.5f64.max(len as f64 / 16_000.0),
        impairment_ratio: 0.3,
        impairment_type: ImpairmentType::Occluded,
        seed,
        protect_prefix_s: 0.0,
        pre_enrolled_s: 0.1,
    };
    let b = build_mixture(&spec).unwrap();
    (b.mixture.slice(0, len), b.target.slice(0, len), truncate_cues(&b.cues, len))
}

fn stream_cfg(t_win: usize, t_sh: usize, t_init: usize, norm_mode: NormMode) -> StreamConfig {
    StreamConfig {
        t_win,
        t_sh,
        t_init,
        self_enroll_len: t_win,
        norm_mode,
        banks: BankMode::Both,
        speaker_capacity: 2,
        context_capacity: 2,
        ..Default::default()
    }
}

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn streams_emit_exactly_the_input(t_win in 40usize..400, sh_frac in 0.05f64..1.0, init in 16usize..500, len in 600usize..1600, seed in 0u64..1000) {
        let t_sh = ((t_win as f64 * sh_frac) as usize).max(1);
        let (mix, target, cues) = item(len, seed);
        let model = tiny_model();
        for setting in [EvalSetting::SelfEnro, EvalSetting::TgtEnro] {
            let cfg = StreamConfig { eval_setting: setting, ..stream_cfg(t_win, t_sh, init, NormMode::Rms) };
            let inputs = StreamInputs { mixture: &mix, cues: &cues, clean_cues: None, pre_enrolled: None, target: Some(&target) };
            let out = run_stream(&model, &inputs, &cfg).unwrap();
            prop_assert_eq!(out.estimate.len(), mix.len());
            prop_assert_eq!(out.trace.iter().map(|t| t.emitted).sum::<usize>(), mix.len());
        }
    }

    #[test]
    fn prefix_runs_reproduce_prefix_emissions(t_win in 40usize..300, sh_frac in 0.1f64..1.0, cut in 0.3f64..0.95, seed in 0u64..1000) {
        let t_sh = ((t_win as f64 * sh_frac) as usize).max(1);
        let t_init = 320;
        let (mix, target, cues) = item(1600, seed);
        let p = ((mix.len() as f64 * cut) as usize).max(t_init);
        let short_cues = truncate_cues(&cues, p);
        let short_mix = mix.slice(0, p);
        let short_target = target.slice(0, p);
        let model = tiny_model();
        let cfg = stream_cfg(t_win, t_sh, t_init, NormMode::Rms);
        let full = run_stream(&model, &StreamInputs { mixture: &mix, cues: &cues, clean_cues: None, pre_enrolled: None, target: Some(&target) }, &cfg).unwrap();
        let part = run_stream(&model, &StreamInputs { mixture: &short_mix, cues: &short_cues, clean_cues: None, pre_enrolled: None, target: Some(&short_target) }, &cfg).unwrap();
        // steps whose window ends inside the prefix see identical inputs
        let whole_steps = (p - t_init) / t_sh;
        let settled = t_init + whole_steps * t_sh;
        prop_assert_eq!(&full.estimate.samples()[..settled], &part.estimate.samples()[..settled]);
    }

    #[test]
    fn emitted_energy_bookkeeping(t_win in 40usize..300, sh_frac in 0.1f64..1.0, seed in 0u64..1000, literal in any::<bool>()) {
        let t_sh = ((t_win as f64 * sh_frac) as usize).max(1);
        // the literal rule compounds energy every step; keep its streams to a few steps
        let len = if literal { 320 + 2 * t_sh + t_sh.div_ceil(2) } else { 1200 };
        let (mix, _, cues) = item(len, seed);
        let mode = if literal { NormMode::Literal } else { NormMode::Rms };
        let cfg = stream_cfg(t_win, t_sh, 320, mode);
        let out = run_stream(&tiny_model(), &StreamInputs { mixture: &mix, cues: &cues, clean_cues: None, pre_enrolled: None, target: None }, &cfg).unwrap();
        let est = out.estimate.samples();
        let mut pos = 0;
        for (k, t) in out.trace.iter().enumerate() {
            let prior = energy(&est[..pos]);
            let emitted = energy(&est[pos..pos + t.emitted]);
            let tol = |x: f64| 1e-9 * x.abs().max(1e-300);
            prop_assert!((t.prior_energy - prior).abs() <= tol(prior));
            prop_assert!((t.emitted_energy - emitted).abs() <= tol(emitted));
            prop_assert!((t.cumulative_energy - (prior + emitted)).abs() <= tol(prior + emitted));
            if literal {
                let want = if k == 0 { cfg.gamma / t.window_energy } else { prior / t.window_energy };
                prop_assert!((t.scale - want).abs() <= tol(want));
            }
            pos += t.emitted;
        }
    }
}

#[test]
fn si_snr_of_mixture_against_itself_is_clamped_maximum() {
    let (mix, _, _) = item(800, 3);
    assert_eq!(si_snr(&mix, &mix).unwrap(), memo::training::SI_SNR_CLAMP_DB);
}
