//! Synthetic corpora and evaluation drivers: dataset manifests, the
//! setting × scenario × mode evaluation grid, switch evaluation and sweeps.

use serde::{Deserialize, Serialize};

use rand::Rng;

use crate::error::{Error, Result};
use crate::memory::UpdatePolicy;
use crate::metrics::{aggregate, cell_key, score, segmental_si_snr, Aggregate, ReportRow, Summary};
use crate::model::{BankMode, MemoModel};
use crate::signals::{
    band_distance, build_mixture, build_switch_mixture, rng_for, sub_seed, ImpairmentType, MixtureBundle, MixtureSpec,
    SpeakerId, SwitchBundle, SwitchSpec,
};
use crate::streaming::{run_offline, run_stream, run_switch_stream, EvalSetting, StreamConfig, StreamInputs};
use crate::training::Example;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub train_speakers: u32,
    pub test_speakers: u32,
    pub train_items: usize,
    pub val_items: usize,
    pub test_items: usize,
    pub switch_items: usize,
    pub duration_s: f64,
    pub switch_duration_s: f64,
    pub pre_enrolled_s: f64,
    pub snr_db: (f64, f64),
    pub train_ratio: (f64, f64),
    pub test_ratio: (f64, f64),
    /// Clean lead-in of test items (the streaming init window).
    pub test_protect_prefix_s: f64,
    pub min_band_distance: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            train_speakers: 24,
            test_speakers: 8,
            train_items: 512,
            val_items: 64,
            test_items: 64,
            switch_items: 16,
            duration_s: 4.0,
            switch_duration_s: 10.0,
            pre_enrolled_s: 2.0,
            snr_db: (-10.0, 10.0),
            train_ratio: (0.0, 0.8),
            test_ratio: (0.0, 1.0),
            test_protect_prefix_s: 2.0,
            min_band_distance: 2,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemSpec {
    pub id: String,
    pub split: Split,
    pub spec: MixtureSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwitchItemSpec {
    pub id: String,
    pub spec: SwitchSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub train: Vec<ItemSpec>,
    pub val: Vec<ItemSpec>,
    pub test: Vec<ItemSpec>,
    pub switch: Vec<SwitchItemSpec>,
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_speakers < 2 || self.test_speakers < 3 {
            return Err(Error::invalid("need at least 2 training and 3 test speakers"));
        }
        for (lo, hi) in [self.train_ratio, self.test_ratio] {
            if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
                return Err(Error::invalid(format!("bad impairment ratio range [{lo}, {hi})")));
            }
        }
        let (a, b) = self.snr_db;
        if !(-10.0 <= a && a <= b && b <= 10.0) {
            return Err(Error::invalid("snr range must lie within [-10, 10] dB"));
        }
        Ok(())
    }

    pub fn train_speaker_ids(&self) -> Vec<SpeakerId> {
        (0..self.train_speakers).map(SpeakerId).collect()
    }

    pub fn test_speaker_ids(&self) -> Vec<SpeakerId> {
        (self.train_speakers..self.train_speakers + self.test_speakers).map(SpeakerId).collect()
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn pick_pair(rng: &mut impl Rng, pool: &[SpeakerId], min_dist: usize) -> (SpeakerId, SpeakerId) {
    loop {
        let a = pool[rng.random_range(0..pool.len())];
        let b = pool[rng.random_range(0..pool.len())];
        if a != b && band_distance(a, b) >= min_dist {
            return (a, b);
        }
    }
}

fn check_pool(pool: &[SpeakerId], min_dist: usize) -> Result<()> {
    let ok = pool.iter().any(|a| pool.iter().any(|b| a != b && band_distance(*a, *b) >= min_dist));
    if ok {
        Ok(())
    } else {
        Err(Error::invalid(format!("no speaker pair reaches band distance {min_dist}")))
    }
}

const TAG_SPLIT: u64 = 31;

fn split_items(cfg: &DatasetConfig, split: Split, count: usize, pool: &[SpeakerId]) -> Vec<ItemSpec> {
    let (tag, ratio, protect, prefix) = match split {
        Split::Train => (1, cfg.train_ratio, 0.0, "train"),
        Split::Val => (2, cfg.train_ratio, 0.0, "val"),
        Split::Test => (3, cfg.test_ratio, cfg.test_protect_prefix_s, "test"),
    };
    let mut rng = rng_for(sub_seed(cfg.seed, TAG_SPLIT), tag);
    (0..count)
        .map(|i| {
            let (target_id, interferer_id) = pick_pair(&mut rng, pool, cfg.min_band_distance);
            let spec = MixtureSpec {
                target_id,
                interferer_id,
                snr_db: uniform(&mut rng, cfg.snr_db),
                duration_s: cfg.duration_s,
                impairment_ratio: uniform(&mut rng, ratio),
                impairment_type: ImpairmentType::ALL[rng.random_range(0..3)],
                seed: sub_seed(cfg.seed, tag * 1_000_000 + i as u64),
                protect_prefix_s: protect,
                pre_enrolled_s: cfg.pre_enrolled_s,
            };
            ItemSpec { id: format!("{prefix}_{i:05}"), split, spec }
        })
        .collect()
}

/// Deterministic manifest; test speakers never occur in train or val.
pub fn build_manifest(cfg: &DatasetConfig) -> Result<Manifest> {
    cfg.validate()?;
    let train_pool = cfg.train_speaker_ids();
    let test_pool = cfg.test_speaker_ids();
    check_pool(&train_pool, cfg.min_band_distance)?;
    check_pool(&test_pool, cfg.min_band_distance)?;
    let mut rng = rng_for(sub_seed(cfg.seed, TAG_SPLIT), 4);
    let switch = (0..cfg.switch_items)
        .map(|i| {
            let (speaker_a, interferer) = pick_pair(&mut rng, &test_pool, cfg.min_band_distance);
            let speaker_b = loop {
                let b = test_pool[rng.random_range(0..test_pool.len())];
                if b != speaker_a && b != interferer && band_distance(b, interferer) >= cfg.min_band_distance {
                    break b;
                }
            };
            SwitchItemSpec {
                id: format!("switch_{i:05}"),
                spec: SwitchSpec {
                    speaker_a,
                    speaker_b,
                    interferer,
                    switch_time_s: rng.random_range(4.0..=6.0),
                    total_duration_s: cfg.switch_duration_s,
                    post_switch_clean_s: 1.0,
                    snr_db: uniform(&mut rng, cfg.snr_db),
                    impairment_ratio: uniform(&mut rng, cfg.test_ratio),
                    impairment_type: ImpairmentType::ALL[rng.random_range(0..3)],
                    protect_prefix_s: cfg.test_protect_prefix_s,
                    seed: sub_seed(cfg.seed, 4_000_000 + i as u64),
                },
            }
        })
        .collect();
    Ok(Manifest {
        train: split_items(cfg, Split::Train, cfg.train_items, &train_pool),
        val: split_items(cfg, Split::Val, cfg.val_items, &train_pool),
        test: split_items(cfg, Split::Test, cfg.test_items, &test_pool),
        switch,
    })
}

pub fn materialize(items: &[ItemSpec]) -> Result<Vec<(String, MixtureBundle)>> {
    items.iter().map(|i| Ok((i.id.clone(), build_mixture(&i.spec)?))).collect()
}

pub fn training_examples(items: &[ItemSpec]) -> Result<Vec<Example>> {
    items.iter().map(|i| Ok(Example::from(build_mixture(&i.spec)?))).collect()
}

pub fn materialize_switch(items: &[SwitchItemSpec]) -> Result<Vec<(String, SwitchBundle)>> {
    items.iter().map(|i| Ok((i.id.clone(), build_switch_mixture(&i.spec)?))).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Clean,
    Impaired,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Self::Clean => "clean",
            Self::Impaired => "impaired",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Offline,
    Online,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Offline => "offline",
            Self::Online => "online",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub settings: Vec<EvalSetting>,
    pub scenarios: Vec<Scenario>,
    pub modes: Vec<Mode>,
    /// `None` evaluates a bankless model: every bank setting becomes N/A.
    pub banks: Option<BankMode>,
    pub stream: StreamConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            settings: EvalSetting::ALL.to_vec(),
            scenarios: vec![Scenario::Clean, Scenario::Impaired],
            modes: vec![Mode::Offline, Mode::Online],
            banks: Some(BankMode::Contextual),
            stream: StreamConfig::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalOutput {
    pub rows: Vec<ReportRow>,
    pub aggregate: Aggregate,
}

impl EvalOutput {
    pub fn mean_si_snri(&self, setting: EvalSetting, scenario: Scenario, mode: Mode) -> Option<f64> {
        self.aggregate.cells.get(&cell_key(setting.name(), scenario.name(), mode.name())).map(|s| s.si_snri_db)
    }
}

/// Runs every (setting, scenario, mode) cell over `items`.
pub fn evaluate(model: &MemoModel, items: &[(String, MixtureBundle)], specs: &[ItemSpec], cfg: &EvalConfig) -> Result<EvalOutput> {
    let mut rows = Vec::new();
    let mut na = std::collections::BTreeMap::new();
    for &setting in &cfg.settings {
        for &scenario in &cfg.scenarios {
            for &mode in &cfg.modes {
                let key = cell_key(setting.name(), scenario.name(), mode.name());
                let banks = match (setting, cfg.banks) {
                    (EvalSetting::VisualOnly, b) => b.unwrap_or_default(),
                    (_, Some(b)) => b,
                    (_, None) => {
                        na.insert(key, "model has no memory bank".to_string());
                        continue;
                    }
                };
                for ((id, b), spec) in items.iter().zip(specs) {
                    let cues = match scenario {
                        Scenario::Clean => &b.clean_cues,
                        Scenario::Impaired => &b.cues,
                    };
                    let inputs = StreamInputs {
                        mixture: &b.mixture,
                        cues,
                        clean_cues: Some(&b.clean_cues),
                        pre_enrolled: Some(&b.pre_enrolled),
                        target: Some(&b.target),
                    };
                    let (est, rtf) = match mode {
                        Mode::Offline => (run_offline(model, &inputs, setting, banks)?, None),
                        Mode::Online => {
                            let sc = StreamConfig { eval_setting: setting, banks, ..cfg.stream.clone() };
                            let out = run_stream(model, &inputs, &sc)?;
                            let r = crate::streaming::measure_rtf(&out);
                            (out.estimate, Some(r))
                        }
                    };
                    let s = score(&est, &b.target, &b.mixture)?;
                    let (impairment, ratio) = match scenario {
                        Scenario::Clean => ("none".to_string(), 0.0),
                        Scenario::Impaired => (spec.spec.impairment_type.name().to_string(), spec.spec.impairment_ratio),
                    };
                    rows.push(ReportRow {
                        item: id.clone(),
                        setting: setting.name().into(),
                        scenario: scenario.name().into(),
                        mode: mode.name().into(),
                        impairment,
                        impairment_ratio: ratio,
                        si_snr_db: s.si_snr_db,
                        si_snri_db: s.si_snri_db,
                        sdr_db: s.sdr_db,
                        rtf,
                    });
                }
            }
        }
    }
    let mut agg = aggregate(&rows);
    agg.not_applicable = na;
    Ok(EvalOutput { rows, aggregate: agg })
}

/// Segment means of a switch evaluation, all relative to each item's switch
/// time `s`: `[0, init)`, `[init, s)`, `[s, s + settle)`, `[s + settle, end)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwitchSummary {
    pub label: String,
    pub segment_names: Vec<String>,
    pub segment_means: Vec<f64>,
    pub per_item: Vec<Vec<f64>>,
}

impl SwitchSummary {
    pub const SEGMENTS: [&'static str; 4] = ["init", "pre_switch", "transition", "post_switch"];
}

/// Streams every switch item and scores it on item-relative segments
/// against the piecewise reference. `settle_s` is the transition length.
pub fn evaluate_switch(
    model: &MemoModel,
    items: &[(String, SwitchBundle)],
    cfg: &StreamConfig,
    settle_s: f64,
    label: &str,
) -> Result<SwitchSummary> {
    let mut per_item = Vec::new();
    for (_, b) in items {
        let inputs = StreamInputs {
            mixture: &b.mixture,
            cues: &b.cues,
            clean_cues: Some(&b.clean_cues),
            pre_enrolled: None,
            target: Some(&b.reference.waveform),
        };
        let out = run_switch_stream(model, &inputs, cfg)?;
        let rate = b.mixture.rate() as f64;
        let s = b.reference.switch_sample().ok_or_else(|| Error::invalid("switch item without a switch"))? as f64 / rate;
        let init = cfg.t_init as f64 / rate;
        let end = b.mixture.duration_s();
        let bounds = [0.0, init, s, (s + settle_s).min(end), end];
        let segs = segmental_si_snr(&out.estimate, &b.reference.waveform, &bounds)?;
        if segs.len() != 4 {
            return Err(Error::invalid("degenerate switch segments"));
        }
        per_item.push(segs.iter().map(|g| g.si_snr_db).collect::<Vec<_>>());
    }
    let n = per_item.len().max(1) as f64;
    let segment_means = (0..4).map(|j| per_item.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    Ok(SwitchSummary {
        label: label.to_string(),
        segment_names: SwitchSummary::SEGMENTS.iter().map(|s| s.to_string()).collect(),
        segment_means,
        per_item,
    })
}

/// One row of a sweep table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: String,
    pub si_snri_db: f64,
    pub si_snr_db: f64,
    pub rtf: Option<f64>,
    pub count: usize,
}

impl SweepRow {
    pub const CSV_HEADER: &'static str = "axis,value,si_snr_db,si_snri_db,rtf,count";

    pub fn csv(&self) -> String {
        format!(
            "{},{},{:.4},{:.4},{},{}",
            self.axis,
            self.value,
            self.si_snr_db,
            self.si_snri_db,
            self.rtf.map(|r| format!("{r:.5}")).unwrap_or_default(),
            self.count
        )
    }
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from(SweepRow::CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv());
        s.push('\n');
    }
    s
}

fn online_impaired(model: &MemoModel, items: &[(String, MixtureBundle)], cfg: &StreamConfig) -> Result<(Summary, f64)> {
    let mut rows = Vec::new();
    let mut rtf = 0.0;
    for (id, b) in items {
        let inputs = StreamInputs {
            mixture: &b.mixture,
            cues: &b.cues,
            clean_cues: Some(&b.clean_cues),
            pre_enrolled: Some(&b.pre_enrolled),
            target: Some(&b.target),
        };
        let out = run_stream(model, &inputs, cfg)?;
        rtf += crate::streaming::measure_rtf(&out);
        let s = score(&out.estimate, &b.target, &b.mixture)?;
        rows.push(ReportRow {
            item: id.clone(),
            setting: cfg.eval_setting.name().into(),
            scenario: "impaired".into(),
            mode: "online".into(),
            impairment: String::new(),
            impairment_ratio: 0.0,
            si_snr_db: s.si_snr_db,
            si_snri_db: s.si_snri_db,
            sdr_db: s.sdr_db,
            rtf: None,
        });
    }
    Ok((Summary::of(&rows), rtf / items.len().max(1) as f64))
}

/// Slot-count and eviction-policy rows: N = 1, 2, 4 (FIFO) and 4 (ABS).
pub fn slot_sweep(model: &MemoModel, items: &[(String, MixtureBundle)], base: &StreamConfig) -> Result<Vec<SweepRow>> {
    let grid = [(1, UpdatePolicy::Fifo, "1"), (2, UpdatePolicy::Fifo, "2"), (4, UpdatePolicy::Fifo, "4-fifo"), (4, UpdatePolicy::Abs, "4-abs")];
    grid.iter()
        .map(|&(n, policy, label)| {
            let cfg = StreamConfig { speaker_capacity: n, context_capacity: n, policy, ..base.clone() };
            let (s, _) = online_impaired(model, items, &cfg)?;
            Ok(SweepRow { axis: "slots".into(), value: label.into(), si_snri_db: s.si_snri_db, si_snr_db: s.si_snr_db, rtf: None, count: s.count })
        })
        .collect()
}

/// Window-length rows (samples) with RTF; `t_init` stays fixed.
pub fn window_sweep(model: &MemoModel, items: &[(String, MixtureBundle)], base: &StreamConfig, t_wins: &[usize]) -> Result<Vec<SweepRow>> {
    t_wins
        .iter()
        .map(|&t_win| {
            let cfg = StreamConfig { t_win, self_enroll_len: t_win, ..base.clone() };
            let (s, rtf) = online_impaired(model, items, &cfg)?;
            Ok(SweepRow { axis: "t_win".into(), value: t_win.to_string(), si_snri_db: s.si_snri_db, si_snr_db: s.si_snr_db, rtf: Some(rtf), count: s.count })
        })
        .collect()
}

pub fn shift_sweep(model: &MemoModel, items: &[(String, MixtureBundle)], base: &StreamConfig, t_shs: &[usize]) -> Result<Vec<SweepRow>> {
    t_shs
        .iter()
        .map(|&t_sh| {
            let cfg = StreamConfig { t_sh, ..base.clone() };
            let (s, rtf) = online_impaired(model, items, &cfg)?;
            Ok(SweepRow { axis: "t_sh".into(), value: t_sh.to_string(), si_snri_db: s.si_snri_db, si_snr_db: s.si_snr_db, rtf: Some(rtf), count: s.count })
        })
        .collect()
}

/// Impairment-ratio bins of width `width` up to `max`; each bin gets its own
/// freshly drawn test items.
pub fn ratio_sweep(
    model: &MemoModel,
    data: &DatasetConfig,
    base: &StreamConfig,
    width: f64,
    max: f64,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    let mut lo = 0.0;
    while lo < max - 1e-9 {
        let hi = (lo + width).min(max);
        let cfg = DatasetConfig { test_ratio: (lo, hi), ..data.clone() };
        let manifest = build_manifest(&cfg)?;
        let items = materialize(&manifest.test)?;
        let (s, _) = online_impaired(model, &items, base)?;
        rows.push(SweepRow {
            axis: "impairment_ratio".into(),
            value: format!("{lo:.1}-{hi:.1}"),
            si_snri_db: s.si_snri_db,
            si_snr_db: s.si_snr_db,
            rtf: None,
            count: s.count,
        });
        lo = hi;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetConfig {
        DatasetConfig { train_items: 6, val_items: 2, test_items: 3, switch_items: 2, ..Default::default() }
    }

    #[test]
    fn manifest_is_reproducible_and_disjoint() {
        let a = build_manifest(&small()).unwrap();
        assert_eq!(a, build_manifest(&small()).unwrap());
        let train: Vec<SpeakerId> = a.train.iter().flat_map(|i| [i.spec.target_id, i.spec.interferer_id]).collect();
        let test: Vec<SpeakerId> = a.test.iter().flat_map(|i| [i.spec.target_id, i.spec.interferer_id]).collect();
        assert!(test.iter().all(|t| !train.contains(t)));
        assert!(a.train.iter().all(|i| i.spec.impairment_ratio < 0.8));
        assert!(a.test.iter().all(|i| i.spec.protect_prefix_s == 2.0));
        assert!(a.switch.iter().all(|s| s.spec.validate().is_ok()));
    }

    #[test]
    fn bad_ranges_rejected() {
        let c = DatasetConfig { test_ratio: (0.5, 0.2), ..small() };
        assert!(build_manifest(&c).is_err());
        let c = DatasetConfig { snr_db: (-20.0, 0.0), ..small() };
        assert!(build_manifest(&c).is_err());
    }
}
