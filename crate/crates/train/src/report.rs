//! Evaluation reports: JSON lines, one record per frame and a summary.
//!
//! PSNR is infinite for a perfect reconstruction; it is written as the
//! string `"inf"` since JSON has no infinity.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use finenet_core::error::{Error, Result};
use finenet_core::metrics::{psnr, ssim};
use finenet_core::Frame;

/// Serde helpers writing non-finite floats as strings.
pub mod inf_f64 {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        match *v {
            v if v.is_finite() => Repr::Num(v),
            v if v.is_nan() => Repr::Str("nan".into()),
            v if v > 0.0 => Repr::Str("inf".into()),
            _ => Repr::Str("-inf".into()),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) => match s.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("expected a number or \"inf\", got {other:?}"))),
            },
        }
    }

    pub mod option {
        use serde::{Deserialize, Deserializer, Serializer};

        pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
            match v {
                Some(v) => super::serialize(v, s),
                None => s.serialize_none(),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
            #[derive(Deserialize)]
            struct W(#[serde(with = "super")] f64);
            Ok(Option::<W>::deserialize(d)?.map(|w| w.0))
        }
    }
}

/// One value per output: enhancement branch, interpolation branch, combined.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Triple {
    #[serde(with = "inf_f64")]
    pub enhanced: f64,
    #[serde(with = "inf_f64")]
    pub interpolated: f64,
    #[serde(with = "inf_f64")]
    pub combined: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Output {
    Enhanced,
    Interpolated,
    Combined,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRow {
    pub video: String,
    pub frame: usize,
    pub psnr: Triple,
    pub ssim: Triple,
    /// Output with the highest PSNR; ties favour combined, then enhanced.
    pub winner: Output,
}

impl FrameRow {
    pub fn measure(video: &str, frame: usize, enhanced: &Frame, interpolated: &Frame, combined: &Frame, gt: &Frame) -> Result<Self> {
        let p = Triple { enhanced: psnr(enhanced, gt)?, interpolated: psnr(interpolated, gt)?, combined: psnr(combined, gt)? };
        let s = Triple { enhanced: ssim(enhanced, gt)?, interpolated: ssim(interpolated, gt)?, combined: ssim(combined, gt)? };
        let winner = if p.combined >= p.enhanced && p.combined >= p.interpolated {
            Output::Combined
        } else if p.enhanced >= p.interpolated {
            Output::Enhanced
        } else {
            Output::Interpolated
        };
        Ok(FrameRow { video: video.to_string(), frame, psnr: p, ssim: s, winner })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub enhanced: usize,
    pub interpolated: usize,
    pub combined: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub split: String,
    pub frames: usize,
    pub mean_psnr: Triple,
    pub mean_ssim: Triple,
    /// Best-of-three counts; they sum to `frames`.
    pub winners: Tally,
    /// Frames where the combined output has strictly higher PSNR than the
    /// enhancement output.
    pub combined_beats_enhanced: usize,
    pub combined_beats_interpolated: usize,
    pub config_hash: String,
}

fn mean(rows: &[FrameRow], f: impl Fn(&FrameRow) -> f64) -> f64 {
    if rows.is_empty() {
        return f64::NAN;
    }
    rows.iter().map(f).sum::<f64>() / rows.len() as f64
}

impl Summary {
    pub fn of(rows: &[FrameRow], split: &str, config_hash: &str) -> Self {
        let triple = |g: fn(&FrameRow) -> &Triple| Triple {
            enhanced: mean(rows, |r| g(r).enhanced),
            interpolated: mean(rows, |r| g(r).interpolated),
            combined: mean(rows, |r| g(r).combined),
        };
        let mut winners = Tally::default();
        for r in rows {
            match r.winner {
                Output::Enhanced => winners.enhanced += 1,
                Output::Interpolated => winners.interpolated += 1,
                Output::Combined => winners.combined += 1,
            }
        }
        Summary {
            split: split.to_string(),
            frames: rows.len(),
            mean_psnr: triple(|r| &r.psnr),
            mean_ssim: triple(|r| &r.ssim),
            winners,
            combined_beats_enhanced: rows.iter().filter(|r| r.psnr.combined > r.psnr.enhanced).count(),
            combined_beats_interpolated: rows.iter().filter(|r| r.psnr.combined > r.psnr.interpolated).count(),
            config_hash: config_hash.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "lowercase")]
enum Record {
    Frame(FrameRow),
    Summary(Summary),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub rows: Vec<FrameRow>,
    pub summary: Summary,
}

impl Report {
    pub fn new(rows: Vec<FrameRow>, split: &str, config_hash: &str) -> Self {
        let summary = Summary::of(&rows, split, config_hash);
        Report { rows, summary }
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let records = self.rows.iter().cloned().map(Record::Frame).chain([Record::Summary(self.summary.clone())]);
        for r in records {
            out.push_str(&serde_json::to_string(&r).expect("records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        let mut summary = None;
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let rec: Record = serde_json::from_str(line).map_err(|e| Error::Data(format!("report line {}: {e}", i + 1)))?;
            match rec {
                Record::Frame(r) if summary.is_none() => rows.push(r),
                Record::Frame(_) => return Err(Error::Data("frame record after the summary".into())),
                Record::Summary(s) if summary.is_none() => summary = Some(s),
                Record::Summary(_) => return Err(Error::Data("report has two summaries".into())),
            }
        }
        let summary = summary.ok_or_else(|| Error::Data("report has no summary record".into()))?;
        Ok(Report { rows, summary })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Report::from_jsonl(&text)
    }
}
