//! Scores and report aggregation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signals::{energy, Waveform};
use crate::training::{si_snr, si_snr_with, SI_SNR_CLAMP_DB};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start_s: f64,
    pub end_s: f64,
    pub si_snr_db: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub si_snr_db: f64,
    pub si_snri_db: f64,
    pub sdr_db: f64,
    pub segmental: Vec<Segment>,
    pub rtf: Option<f64>,
}

/// `10·log10(‖ref‖² / ‖ref − est‖²)`, clamped like SI-SNR.
pub fn sdr(est: &Waveform, reference: &Waveform) -> Result<f64> {
    if est.len() != reference.len() {
        return Err(Error::invalid("length mismatch"));
    }
    let rr = reference.energy();
    if !(rr > 0.0) {
        return Err(Error::invalid("reference has zero energy"));
    }
    let err: Vec<f64> = reference.samples().iter().zip(est.samples()).map(|(r, e)| r - e).collect();
    let ee = energy(&err);
    if ee <= rr * 1e-12 {
        return Ok(SI_SNR_CLAMP_DB);
    }
    Ok((10.0 * (rr / ee).log10()).clamp(-SI_SNR_CLAMP_DB, SI_SNR_CLAMP_DB))
}

pub fn score(est: &Waveform, reference: &Waveform, mixture: &Waveform) -> Result<ScoreReport> {
    if est.len() != reference.len() || mixture.len() != reference.len() {
        return Err(Error::invalid("estimate, reference and mixture must share a length"));
    }
    let s = si_snr(est, reference)?;
    let base = si_snr(mixture, reference)?;
    Ok(ScoreReport { si_snr_db: s, si_snri_db: s - base, sdr_db: sdr(est, reference)?, segmental: Vec::new(), rtf: None })
}

/// SI-SNR over consecutive intervals `[b_i, b_{i+1})` given in seconds.
/// Intervals that round to no samples, or whose reference is silent, are
/// skipped with a warning.
pub fn segmental_si_snr(est: &Waveform, reference: &Waveform, boundaries_s: &[f64]) -> Result<Vec<Segment>> {
    if est.len() != reference.len() {
        return Err(Error::invalid("length mismatch"));
    }
    let rate = est.rate() as f64;
    let mut out = Vec::new();
    for w in boundaries_s.windows(2) {
        let (a, b) = (w[0], w[1]);
        if a < 0.0 || b > est.duration_s() + 1e-9 || b < a {
            return Err(Error::invalid(format!("interval [{a}, {b}) outside the signal")));
        }
        let (i, j) = ((a * rate).round() as usize, ((b * rate).round() as usize).min(est.len()));
        if j <= i {
            log::warn!("skipping empty interval [{a}, {b})");
            continue;
        }
        match si_snr_with(&est.samples()[i..j], &reference.samples()[i..j], true) {
            Ok(v) => out.push(Segment { start_s: a, end_s: b, si_snr_db: v }),
            Err(e) => log::warn!("skipping interval [{a}, {b}): {e}"),
        }
    }
    Ok(out)
}

/// One scored item of an evaluation grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub item: String,
    pub setting: String,
    pub scenario: String,
    pub mode: String,
    pub impairment: String,
    pub impairment_ratio: f64,
    pub si_snr_db: f64,
    pub si_snri_db: f64,
    pub sdr_db: f64,
    pub rtf: Option<f64>,
}

impl ReportRow {
    pub const CSV_HEADER: &'static str =
        "item,setting,scenario,mode,impairment,impairment_ratio,si_snr_db,si_snri_db,sdr_db,rtf";

    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{:.4},{:.4},{:.4},{:.4},{}",
            self.item,
            self.setting,
            self.scenario,
            self.mode,
            self.impairment,
            self.impairment_ratio,
            self.si_snr_db,
            self.si_snri_db,
            self.sdr_db,
            self.rtf.map(|r| format!("{r:.5}")).unwrap_or_default()
        )
    }
}

pub fn rows_to_csv(rows: &[ReportRow]) -> String {
    let mut s = String::from(ReportRow::CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv());
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub si_snr_db: f64,
    pub si_snri_db: f64,
    pub sdr_db: f64,
}

impl Summary {
    pub fn of<'a>(rows: impl IntoIterator<Item = &'a ReportRow>) -> Self {
        let mut s = Summary::default();
        for r in rows {
            s.count += 1;
            s.si_snr_db += r.si_snr_db;
            s.si_snri_db += r.si_snri_db;
            s.sdr_db += r.sdr_db;
        }
        if s.count > 0 {
            let n = s.count as f64;
            s.si_snr_db /= n;
            s.si_snri_db /= n;
            s.sdr_db /= n;
        }
        s
    }
}

/// Means per (setting, scenario, mode) cell and per impairment type.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub cells: BTreeMap<String, Summary>,
    pub by_impairment: BTreeMap<String, Summary>,
    /// Cells that could not be evaluated, with the reason.
    pub not_applicable: BTreeMap<String, String>,
}

pub fn cell_key(setting: &str, scenario: &str, mode: &str) -> String {
    format!("{setting}/{scenario}/{mode}")
}

pub fn aggregate(rows: &[ReportRow]) -> Aggregate {
    let mut cells: BTreeMap<String, Vec<&ReportRow>> = BTreeMap::new();
    let mut imp: BTreeMap<String, Vec<&ReportRow>> = BTreeMap::new();
    for r in rows {
        cells.entry(cell_key(&r.setting, &r.scenario, &r.mode)).or_default().push(r);
        imp.entry(format!("{}/{}/{}", r.setting, r.mode, r.impairment)).or_default().push(r);
    }
    Aggregate {
        cells: cells.into_iter().map(|(k, v)| (k, Summary::of(v))).collect(),
        by_impairment: imp.into_iter().map(|(k, v)| (k, Summary::of(v))).collect(),
        not_applicable: BTreeMap::new(),
    }
}
