//! File formats: 16-bit PCM WAV, cue CSV with a JSON sidecar, JSONL.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signals::{CueFrame, CueStream, FrameLabel, Waveform, CUE_DIM};

/// Writes mono 16-bit PCM; samples outside [-1, 1] are clipped.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec { channels: 1, sample_rate: w.rate(), bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
    let mut out = hound::WavWriter::create(path, spec)?;
    for &x in w.samples() {
        out.write_sample((x.clamp(-1.0, 1.0) * i16::MAX as f64).round() as i16)?;
    }
    out.finalize()?;
    Ok(())
}

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut r = hound::WavReader::open(path)?;
    let spec = r.spec();
    if spec.channels != 1 {
        return Err(Error::invalid(format!("{}: expected mono audio", path.display())));
    }
    let samples: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f64 - 1.0;
            r.samples::<i32>().map(|s| s.map(|v| v as f64 / scale)).collect::<std::result::Result<_, _>>()?
        }
        hound::SampleFormat::Float => r.samples::<f32>().map(|s| s.map(f64::from)).collect::<std::result::Result<_, _>>()?,
    };
    Waveform::new(samples, spec.sample_rate)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CueMeta {
    pub frame_rate: f64,
    pub audio_rate: u32,
    pub switch_s: Option<f64>,
    pub frames: usize,
}

fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn label_name(l: FrameLabel) -> &'static str {
    match l {
        FrameLabel::Clean => "clean",
        FrameLabel::Missing => "missing",
        FrameLabel::Occluded => "occluded",
        FrameLabel::LowRes => "low_res",
    }
}

fn parse_label(s: &str) -> Result<FrameLabel> {
    Ok(match s {
        "clean" => FrameLabel::Clean,
        "missing" => FrameLabel::Missing,
        "occluded" => FrameLabel::Occluded,
        "low_res" => FrameLabel::LowRes,
        other => return Err(Error::invalid(format!("unknown frame label {other}"))),
    })
}

/// One row per frame: `frame,label,f0,..`, plus `<stem>.json` metadata.
pub fn write_cues(path: &Path, cues: &CueStream) -> Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    let feats: Vec<String> = (0..CUE_DIM).map(|i| format!("f{i}")).collect();
    writeln!(out, "frame,label,{}", feats.join(","))?;
    for (i, (f, l)) in cues.frames().iter().zip(cues.labels()).enumerate() {
        let vals: Vec<String> = f.iter().map(|v| format!("{v:e}")).collect();
        writeln!(out, "{i},{},{}", label_name(*l), vals.join(","))?;
    }
    out.flush()?;
    let meta = CueMeta { frame_rate: cues.frame_rate(), audio_rate: cues.audio_rate(), switch_s: cues.switch_s(), frames: cues.len() };
    std::fs::write(sidecar(path), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn read_cues(path: &Path) -> Result<CueStream> {
    let meta: CueMeta = serde_json::from_str(&std::fs::read_to_string(sidecar(path))?)?;
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut frames = Vec::new();
    let mut labels = Vec::new();
    for (n, line) in r.lines().enumerate().skip(1) {
        let line = line?;
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 2 + CUE_DIM {
            return Err(Error::invalid(format!("{}:{}: expected {} columns", path.display(), n + 1, 2 + CUE_DIM)));
        }
        labels.push(parse_label(cols[1])?);
        let mut f: CueFrame = [0.0; CUE_DIM];
        for (slot, c) in f.iter_mut().zip(&cols[2..]) {
            *slot = c.parse().map_err(|_| Error::invalid(format!("{}:{}: bad number {c}", path.display(), n + 1)))?;
        }
        frames.push(f);
    }
    if frames.len() != meta.frames {
        return Err(Error::invalid(format!("{}: sidecar says {} frames, found {}", path.display(), meta.frames, frames.len())));
    }
    Ok(CueStream::new(frames, labels, meta.frame_rate, meta.audio_rate)?.with_switch(meta.switch_s))
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    for it in items {
        serde_json::to_writer(&mut out, it)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
