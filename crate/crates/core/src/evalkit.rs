//! JSONL datasets of polygon masks and the mIoU / P@k metrics.
//!
//! Sample lines look like
//!
//! ```text
//! {"id": "s0", "width": 640, "height": 480, "instruction": "...",
//!  "reference_polygon": [[x, y], ...], "predicted_polygon": [[x, y], ...]}
//! ```
//!
//! with `predicted_polygon` optional; predictions may instead come from a
//! separate file of `{"id", "predicted_polygon"}` lines. The instruction is
//! carried through untouched.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, LineError, Result};
use crate::polygon::Polygon;
use crate::raster::{mask_iou, rasterize, PixelMask};

/// Thresholds reported by [`evaluate_dataset`].
pub const REPORT_THRESHOLDS: [f64; 2] = [0.5, 0.7];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub instruction: String,
    pub reference_polygon: Polygon<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted_polygon: Option<Polygon<f64>>,
}

impl SampleRecord {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Shape(format!(
                "image size {}x{} must be positive",
                self.width, self.height
            )));
        }
        self.reference_polygon.ensure_ring()?;
        if let Some(p) = &self.predicted_polygon {
            p.ensure_ring()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub id: String,
    pub predicted_polygon: Polygon<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_samples: usize,
    pub miou: f64,
    /// Keyed by the threshold as written, e.g. `"0.5"`.
    pub p_at: BTreeMap<String, f64>,
    pub per_sample_iou: Vec<(String, f64)>,
}

/// Reads a JSONL file, one value per non-blank line. Every malformed line
/// is reported, with 1-based line numbers.
fn read_jsonl<R: for<'de> Deserialize<'de>>(
    path: &Path,
    check: impl Fn(&R) -> Result<()>,
) -> Result<Vec<R>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut errors = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<R>(&line)
            .map_err(Error::from)
            .and_then(|r| check(&r).map(|_| r));
        match parsed {
            Ok(r) => out.push(r),
            Err(e) => errors.push(LineError {
                line: idx + 1,
                message: e.to_string(),
            }),
        }
    }
    if errors.is_empty() {
        Ok(out)
    } else {
        Err(Error::Parse(errors))
    }
}

pub fn load_samples(path: impl AsRef<Path>) -> Result<Vec<SampleRecord>> {
    read_jsonl(path.as_ref(), SampleRecord::validate)
}

pub fn load_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionRecord>> {
    read_jsonl(path.as_ref(), |p: &PredictionRecord| {
        p.predicted_polygon.ensure_ring()
    })
}

/// Serializes records as JSONL.
pub fn write_samples<W: Write>(mut out: W, samples: &[SampleRecord]) -> Result<()> {
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n").map_err(|e| Error::io("<output>", e))?;
    }
    Ok(())
}

pub fn save_samples(path: impl AsRef<Path>, samples: &[SampleRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_samples(&mut buf, samples)?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Fills in `predicted_polygon` from `predictions` by id. Fails listing
/// every sample id still without a prediction afterwards.
pub fn attach_predictions(
    samples: &mut [SampleRecord],
    predictions: Vec<PredictionRecord>,
) -> Result<()> {
    let mut by_id: HashMap<String, Polygon<f64>> = predictions
        .into_iter()
        .map(|p| (p.id, p.predicted_polygon))
        .collect();
    for s in samples.iter_mut() {
        if let Some(p) = by_id.remove(&s.id) {
            s.predicted_polygon = Some(p);
        }
    }
    ensure_predictions(samples)
}

fn ensure_predictions(samples: &[SampleRecord]) -> Result<()> {
    let missing: Vec<String> = samples
        .iter()
        .filter(|s| s.predicted_polygon.is_none())
        .map(|s| s.id.clone())
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::MissingPredictions(missing))
    }
}

fn pair_ious(pairs: &[(PixelMask, PixelMask)]) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(Error::Empty("no mask pairs".into()));
    }
    pairs.iter().map(|(a, b)| mask_iou(a, b)).collect()
}

/// Sum in ascending order so the result does not depend on input order.
fn mean_of(ious: &[f64]) -> f64 {
    let mut sorted = ious.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.iter().sum::<f64>() / sorted.len() as f64
}

fn fraction_above(ious: &[f64], k: f64) -> f64 {
    ious.iter().filter(|&&x| x > k).count() as f64 / ious.len() as f64
}

fn check_threshold(k: f64) -> Result<()> {
    if !(k > 0.0 && k < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "threshold must lie in (0, 1), got {k}"
        )));
    }
    Ok(())
}

/// Mean IoU over `(reference, prediction)` mask pairs.
pub fn compute_miou(pairs: &[(PixelMask, PixelMask)]) -> Result<f64> {
    Ok(mean_of(&pair_ious(pairs)?))
}

/// Fraction of pairs whose IoU is strictly greater than `k`.
pub fn compute_precision_at(pairs: &[(PixelMask, PixelMask)], k: f64) -> Result<f64> {
    check_threshold(k)?;
    Ok(fraction_above(&pair_ious(pairs)?, k))
}

/// Rasterizes every reference and prediction and reports mIoU, P@0.5,
/// P@0.7 and per-sample IoU (in input order). `resolution` overrides each
/// record's own size.
pub fn evaluate_dataset(
    samples: &[SampleRecord],
    resolution: Option<(u32, u32)>,
) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Empty("dataset has no samples".into()));
    }
    ensure_predictions(samples)?;
    let ious: Vec<f64> = samples
        .par_iter()
        .map(|s| {
            let (w, h) = resolution.unwrap_or((s.width, s.height));
            let reference = rasterize(&s.reference_polygon, w, h)?;
            let predicted = rasterize(s.predicted_polygon.as_ref().expect("checked above"), w, h)?;
            mask_iou(&reference, &predicted)
        })
        .collect::<Result<_>>()?;
    Ok(report_from_ious(
        samples.iter().map(|s| s.id.clone()).zip(ious).collect(),
    ))
}

/// Aggregates per-sample IoUs into a report.
pub fn report_from_ious(per_sample_iou: Vec<(String, f64)>) -> MetricsReport {
    let ious: Vec<f64> = per_sample_iou.iter().map(|(_, x)| *x).collect();
    let p_at = REPORT_THRESHOLDS
        .iter()
        .map(|&k| (k.to_string(), fraction_above(&ious, k)))
        .collect();
    MetricsReport {
        n_samples: ious.len(),
        miou: mean_of(&ious),
        p_at,
        per_sample_iou,
    }
}
