//! Run directory layout and the subcommands.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::DType;
use memo::checkpoint::load_model;
use memo::experiment::{
    build_manifest, evaluate, evaluate_switch, materialize, materialize_switch, ratio_sweep, shift_sweep, slot_sweep,
    sweep_csv, training_examples, window_sweep, EvalConfig, ItemSpec, Manifest, Mode, Scenario, SwitchItemSpec,
    SweepRow,
};
use memo::io::{read_jsonl, write_cues, write_jsonl, write_wav};
use memo::metrics::{rows_to_csv, Summary};
use memo::model::{BankMode, MemoModel};
use memo::streaming::{EvalSetting, StreamConfig};
use memo::training::{pretrain_speaker_encoder, train, TrainConfig, TrainData, TrainOptions, BEST};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::CliError;

pub const ARTIFACTS: &str = "artifacts.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub command: String,
    pub kind: String,
}

/// A run directory plus the index of every file written into it.
pub struct RunDir {
    pub root: PathBuf,
    artifacts: BTreeMap<String, Artifact>,
    command: String,
}

impl RunDir {
    pub fn open(root: &Path, command: &str) -> Result<Self, CliError> {
        std::fs::create_dir_all(root)?;
        let index = root.join(ARTIFACTS);
        let artifacts = if index.exists() { serde_json::from_str(&std::fs::read_to_string(&index)?)? } else { BTreeMap::new() };
        Ok(Self { root: root.to_path_buf(), artifacts, command: command.to_string() })
    }

    pub fn path(&self, rel: &str) -> Result<PathBuf, CliError> {
        let p = self.root.join(rel);
        if let Some(d) = p.parent() {
            std::fs::create_dir_all(d)?;
        }
        Ok(p)
    }

    pub fn record(&mut self, rel: &str, kind: &str) {
        self.artifacts.insert(rel.to_string(), Artifact { command: self.command.clone(), kind: kind.to_string() });
    }

    pub fn write(&mut self, rel: &str, kind: &str, contents: &str) -> Result<(), CliError> {
        std::fs::write(self.path(rel)?, contents)?;
        self.record(rel, kind);
        Ok(())
    }

    pub fn finish(&self) -> Result<(), CliError> {
        std::fs::write(self.root.join(ARTIFACTS), serde_json::to_string_pretty(&self.artifacts)?)?;
        Ok(())
    }
}

const SPLITS: [&str; 4] = ["train", "val", "test", "switch"];

fn manifest_rel(split: &str) -> String {
    format!("data/{split}.jsonl")
}

pub fn simulate(cfg: &RunConfig, run: &mut RunDir, force: bool, audio: bool) -> Result<(), CliError> {
    for s in SPLITS {
        let p = run.root.join(manifest_rel(s));
        if p.exists() && !force {
            return Err(CliError::Config(format!("{} already exists; pass --force to overwrite", p.display())));
        }
    }
    let m = build_manifest(&cfg.data)?;
    write_jsonl(&run.path(&manifest_rel("train"))?, &m.train)?;
    write_jsonl(&run.path(&manifest_rel("val"))?, &m.val)?;
    write_jsonl(&run.path(&manifest_rel("test"))?, &m.test)?;
    write_jsonl(&run.path(&manifest_rel("switch"))?, &m.switch)?;
    for s in SPLITS {
        run.record(&manifest_rel(s), "manifest");
    }
    if audio {
        for (id, b) in materialize(&m.test)? {
            for (name, w) in [("mixture", &b.mixture), ("target", &b.target), ("pre_enrolled", &b.pre_enrolled)] {
                let rel = format!("data/test/{id}/{name}.wav");
                write_wav(&run.path(&rel)?, w)?;
                run.record(&rel, "audio");
            }
            let rel = format!("data/test/{id}/cues.csv");
            write_cues(&run.path(&rel)?, &b.cues)?;
            run.record(&rel, "cues");
            run.record(&format!("data/test/{id}/cues.json"), "cues");
        }
    }
    log::info!("wrote {} train, {} val, {} test and {} switch items", m.train.len(), m.val.len(), m.test.len(), m.switch.len());
    Ok(())
}

/// Manifests from the run directory when present, otherwise from the config.
pub fn manifest(cfg: &RunConfig, run: &RunDir) -> Result<Manifest, CliError> {
    let p = |s: &str| run.root.join(manifest_rel(s));
    if SPLITS.iter().all(|s| p(s).exists()) {
        return Ok(Manifest {
            train: read_jsonl::<ItemSpec>(&p("train"))?,
            val: read_jsonl::<ItemSpec>(&p("val"))?,
            test: read_jsonl::<ItemSpec>(&p("test"))?,
            switch: read_jsonl::<SwitchItemSpec>(&p("switch"))?,
        });
    }
    Ok(build_manifest(&cfg.data)?)
}

fn fit(cfg: &RunConfig, train_cfg: &TrainConfig, m: &Manifest, out_dir: PathBuf, resume: bool) -> Result<MemoModel, CliError> {
    let model = MemoModel::new(cfg.model, DType::F32)?;
    if !(resume && out_dir.join(memo::training::LATEST).exists()) && cfg.model.freeze_speaker_encoder {
        let r = pretrain_speaker_encoder(&model, &cfg.data.train_speaker_ids(), &cfg.speaker_pretrain)?;
        log::info!("speaker encoder pretrained: accuracy {:.3}", r.train_accuracy);
    }
    let data = TrainData { train: training_examples(&m.train)?, val: training_examples(&m.val)? };
    let report = train(&model, &data, train_cfg, &TrainOptions { out_dir: Some(out_dir), resume })?;
    log::info!("best epoch {:?}, val loss {:?}", report.best_epoch, report.best_val_loss);
    Ok(model)
}

pub fn cmd_train(cfg: &RunConfig, run: &mut RunDir, resume: bool) -> Result<(), CliError> {
    let m = manifest(cfg, run)?;
    fit(cfg, &cfg.train, &m, run.path("train/x")?.with_file_name(""), resume)?;
    for (rel, kind) in [("train/best.safetensors", "checkpoint"), ("train/latest.safetensors", "checkpoint"), ("train/metrics.csv", "metrics")] {
        run.record(rel, kind);
    }
    Ok(())
}

pub fn checkpoint(run: &RunDir, explicit: Option<&Path>) -> Result<MemoModel, CliError> {
    let p = explicit.map(Path::to_path_buf).unwrap_or_else(|| run.root.join("train").join(BEST));
    if !p.exists() {
        return Err(CliError::Config(format!("checkpoint {} does not exist; run `train` first", p.display())));
    }
    Ok(load_model(&p)?.0)
}

pub fn cmd_eval(cfg: &RunConfig, run: &mut RunDir, model: &MemoModel) -> Result<(), CliError> {
    let m = manifest(cfg, run)?;
    let items = materialize(&m.test)?;
    let ec = EvalConfig {
        settings: cfg.eval.settings.clone(),
        scenarios: cfg.eval.scenarios.clone(),
        modes: cfg.eval.modes.clone(),
        banks: cfg.eval.banks.mode(),
        stream: cfg.stream.clone(),
    };
    let out = evaluate(model, &items, &m.test, &ec)?;
    run.write("eval/rows.csv", "report", &rows_to_csv(&out.rows))?;
    let mut agg = out.aggregate.clone();
    for s in &ec.settings {
        for sc in &ec.scenarios {
            for md in &ec.modes {
                let key = memo::metrics::cell_key(s.name(), sc.name(), md.name());
                if !agg.cells.contains_key(&key) && !agg.not_applicable.contains_key(&key) {
                    agg.cells.insert(key, Summary::default());
                }
            }
        }
    }
    run.write("eval/aggregate.json", "report", &serde_json::to_string_pretty(&agg)?)?;
    for (k, s) in &agg.cells {
        println!("{k:40} SI-SNRi {:7.3} dB  (n={})", s.si_snri_db, s.count);
    }
    for (k, why) in &agg.not_applicable {
        println!("{k:40} N/A ({why})");
    }
    Ok(())
}

fn impaired_online(cfg: &RunConfig) -> StreamConfig {
    StreamConfig { eval_setting: EvalSetting::SelfEnro, ..cfg.stream.clone() }
}

pub fn cmd_sweep(cfg: &RunConfig, run: &mut RunDir, model: Option<&MemoModel>) -> Result<(), CliError> {
    let m = manifest(cfg, run)?;
    let items = materialize(&m.test)?;
    let base = impaired_online(cfg);
    let need = || model.ok_or_else(|| CliError::Config("this sweep needs a checkpoint".into()));
    for axis in &cfg.sweep.axes {
        let rows: Vec<SweepRow> = match axis.as_str() {
            "slots" => slot_sweep(need()?, &items, &base)?,
            "t_win" => window_sweep(need()?, &items, &base, &cfg.sweep.t_win)?,
            "t_sh" => shift_sweep(need()?, &items, &base, &cfg.sweep.t_sh)?,
            "ratio" => ratio_sweep(need()?, &cfg.data, &base, cfg.sweep.ratio_width, cfg.sweep.ratio_max)?,
            "beta" => {
                let mut rows = Vec::new();
                for &beta in &cfg.sweep.beta {
                    let tc = TrainConfig { loss_beta: beta, max_epochs: cfg.sweep.beta_epochs, ..cfg.train.clone() };
                    let dir = run.path(&format!("sweep/beta_{beta}/x"))?.with_file_name("");
                    let model = fit(cfg, &tc, &m, dir, false)?;
                    let ec = EvalConfig {
                        settings: vec![EvalSetting::SelfEnro],
                        scenarios: vec![Scenario::Impaired],
                        modes: vec![Mode::Online],
                        banks: Some(cfg.stream.banks),
                        stream: base.clone(),
                    };
                    let out = evaluate(&model, &items, &m.test, &ec)?;
                    let s = out.aggregate.cells.values().next().cloned().unwrap_or_default();
                    rows.push(SweepRow {
                        axis: "beta".into(),
                        value: beta.to_string(),
                        si_snri_db: s.si_snri_db,
                        si_snr_db: s.si_snr_db,
                        rtf: None,
                        count: s.count,
                    });
                }
                rows
            }
            other => return Err(CliError::Config(format!("unknown sweep axis {other}"))),
        };
        run.write(&format!("sweep/{axis}.csv"), "sweep", &sweep_csv(&rows))?;
        for r in &rows {
            println!("{axis:>6} {:>10}  SI-SNRi {:7.3} dB", r.value, r.si_snri_db);
        }
    }
    Ok(())
}

pub fn cmd_switch_eval(cfg: &RunConfig, run: &mut RunDir, model: &MemoModel) -> Result<(), CliError> {
    let m = manifest(cfg, run)?;
    let items = materialize_switch(&m.switch)?;
    let banks: BankMode = cfg.switch.banks;
    let variants = [
        ("visual_only", StreamConfig { eval_setting: EvalSetting::VisualOnly, ..cfg.stream.clone() }),
        ("self_enro", StreamConfig { eval_setting: EvalSetting::SelfEnro, banks, empty_on_switch: false, ..cfg.stream.clone() }),
        ("self_enro_empty", StreamConfig { eval_setting: EvalSetting::SelfEnro, banks, empty_on_switch: true, ..cfg.stream.clone() }),
    ];
    let mut csv = String::from("variant,item,init,pre_switch,transition,post_switch\n");
    let mut summaries = Vec::new();
    for (label, sc) in variants {
        let s = evaluate_switch(model, &items, &sc, cfg.switch.settle_s, label)?;
        for ((id, _), segs) in items.iter().zip(&s.per_item) {
            let v: Vec<String> = segs.iter().map(|x| format!("{x:.4}")).collect();
            csv.push_str(&format!("{label},{id},{}\n", v.join(",")));
        }
        println!("{label:16} {:?}", s.segment_means.iter().map(|x| (x * 100.0).round() / 100.0).collect::<Vec<_>>());
        summaries.push(s);
    }
    run.write("switch/segments.csv", "report", &csv)?;
    run.write("switch/summary.json", "report", &serde_json::to_string_pretty(&summaries)?)?;
    Ok(())
}
