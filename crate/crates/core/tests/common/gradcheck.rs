//! Autodiff gradients against central finite differences in f64.

use candle_core::{DType, Device, Tensor, Var};
use memo::encoders::{CueEncoder, Decoder, EncoderDims, SpeakerEncoder, SpeechEncoder};
use memo::extractor::{Extractor, ExtractorDims, MaskOverride};
use memo::memory::{context_retrieve, speaker_retrieve, ContextAttention, SpeakerAttention};
use memo::model::{MemoModel, ModelConfig};
use memo::nn::ParamStore;
use memo::training::{par_step, si_snr_loss, BlendMode, StepPlan, TrainBatch, TrainConfig};

const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
const PROBES: usize = 24;
// below this gradient norm the central difference itself is round-off dominated
const FLOOR: f64 = 1e-5;

fn randn(shape: &[usize], seed: u64) -> Tensor {
    // small LCG so the fixtures do not depend on the device RNG
    let n: usize = shape.iter().product();
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let v: Vec<f64> = (0..n)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn var(shape: &[usize], seed: u64) -> Var {
    Var::from_tensor(&randn(shape, seed)).unwrap()
}

fn flat(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

/// Projects an output onto fixed random weights so every element matters.
fn probe(out: &Tensor, seed: u64) -> Tensor {
    (out * randn(out.dims(), seed)).unwrap().sum_all().unwrap()
}

/// Norm-wise relative error per variable, over up to `PROBES` coordinates.
pub fn check(what: &str, vars: &[(String, Var)], f: impl Fn() -> Tensor) -> Vec<(String, f64)> {
    let grads = f().backward().unwrap();
    let mut out = Vec::new();
    for (name, v) in vars {
        let t = v.as_tensor();
        let base = flat(t);
        let analytic = grads.get(t).map(flat).unwrap_or_else(|| vec![0.0; base.len()]);
        let stride = (base.len() / PROBES).max(1);
        let (mut diff, mut scale) = (0.0, 0.0);
        for i in (0..base.len()).step_by(stride) {
            let eval = |delta: f64| {
                let mut p = base.clone();
                p[i] += delta;
                v.set(&Tensor::from_vec(p, t.dims(), &Device::Cpu).unwrap()).unwrap();
                f().to_scalar::<f64>().unwrap()
            };
            let numeric = (eval(EPS) - eval(-EPS)) / (2.0 * EPS);
            diff += (numeric - analytic[i]).powi(2);
            scale += numeric.powi(2) + analytic[i].powi(2);
        }
        v.set(&Tensor::from_vec(base, t.dims(), &Device::Cpu).unwrap()).unwrap();
        out.push((format!("{what}/{name}"), diff.sqrt() / scale.sqrt().max(FLOOR)));
    }
    out
}

fn with_inputs(store: &ParamStore, inputs: &[(&str, &Var)]) -> Vec<(String, Var)> {
    let mut v = store.trainable();
    v.extend(inputs.iter().map(|(n, x)| (n.to_string(), (*x).clone())));
    v
}

const DIMS: EncoderDims = EncoderDims { channels: 3, hop: 4, speaker_hidden: 5 };

pub fn speech_encoder() -> Vec<(String, f64)> {
    let mut s = ParamStore::new(DType::F64, 1);
    let enc = SpeechEncoder::new(&mut s, "enc", DIMS).unwrap();
    let x = var(&[2, 22], 2);
    check("speech encoder", &with_inputs(&s, &[("x", &x)]), || probe(&enc.forward(x.as_tensor()).unwrap(), 3))
}

pub fn cue_encoder() -> Vec<(String, f64)> {
    let mut s = ParamStore::new(DType::F64, 4);
    let enc = CueEncoder::new(&mut s, "cue", DIMS).unwrap();
    let c = var(&[2, 3, 4], 5);
    check("cue encoder", &with_inputs(&s, &[("cues", &c)]), || probe(&enc.forward(c.as_tensor(), 7).unwrap(), 6))
}

pub fn speaker_encoder() -> Vec<(String, f64)> {
    let mut s = ParamStore::new(DType::F64, 7);
    let enc = SpeakerEncoder::new(&mut s, "spk", DIMS).unwrap();
    let x = var(&[2, 24], 8);
    check("speaker encoder", &with_inputs(&s, &[("x", &x)]), || probe(&enc.forward(x.as_tensor()).unwrap(), 9))
}

pub fn decoder() -> Vec<(String, f64)> {
    let mut s = ParamStore::new(DType::F64, 10);
    let dec = Decoder::new(&mut s, "dec", DIMS).unwrap();
    let z = var(&[2, 5, 3], 11);
    check("decoder", &with_inputs(&s, &[("z", &z)]), || probe(&dec.forward(z.as_tensor(), 19).unwrap(), 12))
}

pub fn speaker_retrieval() -> Vec<(String, f64)> {
    let mut s = ParamStore::new(DType::F64, 13);
    let att = SpeakerAttention::new(&mut s, "att", 4).unwrap();
    let slots = var(&[2, 3, 4], 14);
    check("speaker retrieval", &with_inputs(&s, &[("slots", &slots)]), || {
        probe(&speaker_retrieve(slots.as_tensor(), &att).unwrap().feature, 15)
    })
}

pub fn contextual_retrieval() -> Vec<(String, f64)> {
    let mut s = ParamStore::new(DType::F64, 16);
    let att = ContextAttention::new(&mut s, "att", 4).unwrap();
    let slots = var(&[2, 3, 5, 4], 17);
    let mix = var(&[2, 5, 4], 18);
    check("contextual retrieval", &with_inputs(&s, &[("slots", &slots), ("mixture", &mix)]), || {
        probe(&context_retrieve(slots.as_tensor(), mix.as_tensor(), &att).unwrap().feature, 19)
    })
}

pub fn extractor() -> Vec<(String, f64)> {
    let mut s = ParamStore::new(DType::F64, 20);
    let ex = Extractor::new(&mut s, "ex", ExtractorDims { channels: 3, hidden: 4, blocks: 2 }).unwrap();
    let (y, v, ms, mc) = (var(&[2, 6, 3], 21), var(&[2, 6, 3], 22), var(&[2, 6, 3], 23), var(&[2, 6, 3], 24));
    let vars = with_inputs(&s, &[("y", &y), ("v", &v), ("ms", &ms), ("mc", &mc)]);
    let mut out = check("extractor", &vars, || {
        let fused = ex.fuse(y.as_tensor(), v.as_tensor(), Some(ms.as_tensor()), Some(mc.as_tensor())).unwrap();
        probe(&ex.extract(&fused, y.as_tensor(), MaskOverride::None).unwrap().0, 25)
    });
    // the null embeddings only receive gradient when a bank is absent
    out.extend(check("extractor without banks", &with_inputs(&s, &[("y", &y)]), || {
        let fused = ex.fuse(y.as_tensor(), v.as_tensor(), None, None).unwrap();
        probe(&ex.extract(&fused, y.as_tensor(), MaskOverride::None).unwrap().0, 26)
    }));
    out
}

pub fn si_snr_loss_gradient() -> Vec<(String, f64)> {
    let est = var(&[3, 17], 27);
    let r = randn(&[3, 17], 28);
    [true, false]
        .into_iter()
        .flat_map(|zero_mean| {
            check("si-snr loss", &[("est".into(), est.clone())], || si_snr_loss(est.as_tensor(), &r, zero_mean).unwrap().sum_all().unwrap())
        })
        .collect()
}

pub fn fused_two_stage_loss() -> Vec<(String, f64)> {
    let cfg = ModelConfig { channels: 3, hop: 4, hidden: 4, blocks: 2, speaker_hidden: 4, seed: 29, ..Default::default() };
    let model = MemoModel::new(cfg, DType::F64).unwrap();
    let mixture = Var::from_tensor(&randn(&[2, 40], 30)).unwrap();
    let batch = |m: &Tensor| TrainBatch {
        mixture: m.clone(),
        target: randn(&[2, 40], 31),
        cues: randn(&[2, 2, 4], 32),
        pre_enrolled: randn(&[2, 40], 33),
    };
    let plan = StepPlan { shifts: vec![0, 3, 11], t_sh: 4, speaker: true, contextual: true };
    let mut vars = model.store.trainable();
    vars.push(("mixture".into(), mixture.clone()));
    let mut out = Vec::new();
    for blend_mode in [BlendMode::Literal, BlendMode::Rms] {
        let tc = TrainConfig { loss_beta: 0.3, blend_mode, ..Default::default() };
        out.extend(check("fused loss", &vars, || par_step(&model, &batch(mixture.as_tensor()), &tc, 0.4, &plan).unwrap().loss));
    }
    out
}

pub type Check = fn() -> Vec<(String, f64)>;

pub const SUITE: [(&str, Check); 9] = [
    ("speech encoder", speech_encoder),
    ("cue encoder", cue_encoder),
    ("speaker encoder", speaker_encoder),
    ("decoder", decoder),
    ("speaker retrieval", speaker_retrieval),
    ("contextual retrieval", contextual_retrieval),
    ("extractor", extractor),
    ("si-snr loss", si_snr_loss_gradient),
    ("fused loss", fused_two_stage_loss),
];
