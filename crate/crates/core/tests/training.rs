use candle_core::DType;
use memo::encoders::encode_speaker;
use memo::experiment::{build_manifest, training_examples, DatasetConfig};
use memo::model::{BankMode, MemoModel, ModelConfig};
use memo::signals::synth_speaker;
use memo::training::{pretrain_speaker_encoder, train, SpeakerPretrainConfig, TrainConfig, TrainData, TrainOptions};

fn small_model(seed: u64) -> MemoModel {
    let cfg = ModelConfig { channels: 16, hidden: 16, speaker_hidden: 16, blocks: 2, seed, ..Default::default() };
    MemoModel::new(cfg, DType::F32).unwrap()
}

#[test]
fn pretrained_speaker_encoder_separates_unseen_speakers() {
    let model = small_model(1);
    let data = DatasetConfig::default();
    let cfg = SpeakerPretrainConfig { epochs: 8, ..Default::default() };
    let report = pretrain_speaker_encoder(&model, &data.train_speaker_ids(), &cfg).unwrap();
    assert!(report.train_accuracy > 0.9, "accuracy {}", report.train_accuracy);

    let enc = &model.encoders;
    let held_out = data.test_speaker_ids();
    let embeddings: Vec<Vec<_>> = held_out
        .iter()
        .map(|&id| (0..3).map(|u| encode_speaker(&synth_speaker(id, 1.0, 100 + u).unwrap(), enc).unwrap()).collect())
        .collect();
    let (mut intra, mut inter) = (Vec::new(), Vec::new());
    for (i, a) in embeddings.iter().enumerate() {
        for (j, b) in embeddings.iter().enumerate() {
            for (u, x) in a.iter().enumerate() {
                for (v, y) in b.iter().enumerate() {
                    if i == j && u < v {
                        intra.push(x.cosine(y).unwrap());
                    } else if i < j {
                        inter.push(x.cosine(y).unwrap());
                    }
                }
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(mean(&intra) > mean(&inter) + 0.1, "intra {:.3} inter {:.3}", mean(&intra), mean(&inter));
}

#[test]
fn frozen_speaker_encoder_is_untouched_by_training() {
    let data = DatasetConfig { train_items: 8, val_items: 4, test_items: 4, switch_items: 1, duration_s: 1.0, ..Default::default() };
    let manifest = build_manifest(&data).unwrap();
    let td = TrainData { train: training_examples(&manifest.train).unwrap(), val: training_examples(&manifest.val).unwrap() };
    let model = small_model(2);
    let before = model.store.snapshot().unwrap();
    let cfg = TrainConfig { max_epochs: 1, ep_cr: 1, batch_size: 4, crop_len: 8000, shift_max: 4000, slots_max: 2, ..Default::default() };
    train(&model, &td, &cfg, &TrainOptions::default()).unwrap();
    let after = model.store.snapshot().unwrap();
    let mut changed = 0;
    for (name, t) in &before {
        let same = t.flatten_all().unwrap().to_vec1::<f32>().unwrap() == after[name].flatten_all().unwrap().to_vec1::<f32>().unwrap();
        if name.starts_with("speaker_encoder.") {
            assert!(same, "{name} moved");
        } else if !same {
            changed += 1;
        }
    }
    assert!(changed > 0);
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let data = DatasetConfig { train_items: 8, val_items: 4, test_items: 4, switch_items: 1, duration_s: 1.0, ..Default::default() };
    let manifest = build_manifest(&data).unwrap();
    let td = TrainData { train: training_examples(&manifest.train).unwrap(), val: training_examples(&manifest.val).unwrap() };
    let cfg = |epochs| TrainConfig {
        bank_mode: BankMode::Both,
        sample_bank_subsets: true,
        max_epochs: epochs,
        ep_cr: 2,
        batch_size: 4,
        crop_len: 8000,
        shift_max: 4000,
        slots_max: 2,
        ..Default::default()
    };

    let straight_dir = tempfile::tempdir().unwrap();
    let straight = small_model(3);
    let opts = TrainOptions { out_dir: Some(straight_dir.path().to_path_buf()), resume: false };
    let full = train(&straight, &td, &cfg(3), &opts).unwrap();

    let split_dir = tempfile::tempdir().unwrap();
    let opts = TrainOptions { out_dir: Some(split_dir.path().to_path_buf()), resume: true };
    train(&small_model(3), &td, &cfg(1), &opts).unwrap();
    // a fresh process would rebuild the model from its config before resuming
    let resumed = small_model(3);
    let rest = train(&resumed, &td, &cfg(3), &opts).unwrap();

    assert_eq!(rest.history.last().unwrap().epoch, 2);
    assert_eq!(full.history.last().unwrap().loss2, rest.history.last().unwrap().loss2);
    let (a, b) = (straight.store.snapshot().unwrap(), resumed.store.snapshot().unwrap());
    for (name, t) in &a {
        let x = t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let y = b[name].flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(x.iter().zip(&y).all(|(p, q)| p.to_bits() == q.to_bits()), "{name} differs");
    }
}
