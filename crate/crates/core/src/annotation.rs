//! Human bounding-box responses: record validation, the newline-delimited
//! JSON store format, box heatmaps and the balanced label histogram.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, Write};
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::saliency::BinaryMask;
use crate::tensor::Tensor;

/// Percentile above which box-heatmap pixels are highlighted.
pub const DEFAULT_HIGHLIGHT_PERCENTILE: f64 = 90.0;

/// Labels offered to workers, in presentation order.
pub const CANONICAL_LABELS: [&str; 11] = [
    "beard",
    "cheek",
    "chin",
    "ears",
    "eyes",
    "eye brows",
    "hairline",
    "laugh line",
    "lips",
    "moustache",
    "nose",
];

pub fn canonical_labels() -> Vec<String> {
    CANONICAL_LABELS.iter().map(|s| s.to_string()).collect()
}

/// Trims and lowercases a label; `None` if nothing is left.
pub fn canonicalize_label(label: &str) -> Option<String> {
    let trimmed = label.trim();
    (!trimmed.is_empty()).then(|| trimmed.to_lowercase())
}

/// Pixel box covering columns `x0..x1` and rows `y0..y1` (half-open).
/// Serialized as `[x0, y0, x1, y1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[i64; 4]", into = "[i64; 4]")]
pub struct BBox {
    pub x0: i64,
    pub y0: i64,
    pub x1: i64,
    pub y1: i64,
}

impl From<[i64; 4]> for BBox {
    fn from([x0, y0, x1, y1]: [i64; 4]) -> Self {
        Self { x0, y0, x1, y1 }
    }
}

impl From<BBox> for [i64; 4] {
    fn from(b: BBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl BBox {
    pub fn new(x0: i64, y0: i64, x1: i64, y1: i64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    /// Checks `0 ≤ x0 < x1 ≤ width` and `0 ≤ y0 < y1 ≤ height`.
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        let (w, h) = (width as i64, height as i64);
        if !(0 <= self.x0 && self.x0 < self.x1 && self.x1 <= w) {
            return Err(Error::InvalidArgument(format!(
                "box x-range [{}, {}) is not a non-empty range inside 0..{w}",
                self.x0, self.x1
            )));
        }
        if !(0 <= self.y0 && self.y0 < self.y1 && self.y1 <= h) {
            return Err(Error::InvalidArgument(format!(
                "box y-range [{}, {}) is not a non-empty range inside 0..{h}",
                self.y0, self.y1
            )));
        }
        Ok(())
    }

    pub fn area(&self) -> i64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x0 + self.x1) as f64 / 2.0,
            (self.y0 + self.y1) as f64 / 2.0,
        )
    }
}

/// One worker response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub response_id: String,
    pub worker_id: String,
    pub image_id: String,
    pub person_id: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub label: String,
    pub created_at: DateTime<Utc>,
}

impl AnnotationRecord {
    /// Checks the box against the target image size and that the label is
    /// non-empty after trimming.
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        self.bbox.validate(width, height)?;
        if canonicalize_label(&self.label).is_none() {
            return Err(Error::InvalidArgument("label is empty".into()));
        }
        Ok(())
    }
}

pub fn bbox_center(record: &AnnotationRecord) -> (f64, f64) {
    record.bbox.center()
}

/// Parses the newline-delimited JSON store format. Blank lines are skipped.
pub fn read_records(input: impl BufRead) -> Result<Vec<AnnotationRecord>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::format("annotation store", e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::format("annotation store", format!("line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

pub fn load_records(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_records(std::io::BufReader::new(file))
}

/// One JSON object per line, each terminated by `\n`.
pub fn write_records(mut out: impl Write, records: &[AnnotationRecord]) -> Result<()> {
    for r in records {
        let mut line = serde_json::to_vec(r)?;
        line.push(b'\n');
        out.write_all(&line)
            .map_err(|e| Error::format("annotation store", e.to_string()))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoxHeatmap {
    /// Number of boxes containing each pixel, `[H,W]`.
    pub counts: Tensor,
    /// Percentile value of the counts.
    pub threshold: f32,
    /// Pixels whose count is strictly above `threshold`.
    pub highlight: BinaryMask,
}

/// Per-pixel box inclusion counts for one person's records.
pub fn bbox_heatmap(records: &[AnnotationRecord], width: usize, height: usize, percentile: f64) -> Result<BoxHeatmap> {
    let first = records
        .first()
        .ok_or_else(|| Error::EmptyInput("no annotation records".into()))?;
    if let Some(other) = records.iter().find(|r| r.person_id != first.person_id) {
        return Err(Error::InvalidArgument(format!(
            "records mix persons {:?} and {:?}",
            first.person_id, other.person_id
        )));
    }
    if width == 0 || height == 0 {
        return Err(Error::dim("image size must be positive"));
    }
    // 2D difference array, then prefix sums.
    let mut diff = vec![0i64; (height + 1) * (width + 1)];
    let stride = width + 1;
    for r in records {
        r.bbox.validate(width, height)?;
        let b = r.bbox;
        let (x0, y0, x1, y1) = (b.x0 as usize, b.y0 as usize, b.x1 as usize, b.y1 as usize);
        diff[y0 * stride + x0] += 1;
        diff[y0 * stride + x1] -= 1;
        diff[y1 * stride + x0] -= 1;
        diff[y1 * stride + x1] += 1;
    }
    let mut counts = vec![0f32; height * width];
    let mut row = vec![0i64; width];
    for y in 0..height {
        let mut run = 0i64;
        for x in 0..width {
            run += diff[y * stride + x];
            row[x] += run;
            counts[y * width + x] = row[x] as f32;
        }
    }
    let counts = Tensor::new([height, width], counts)?;
    let threshold = percentile_value(counts.data(), percentile)?;
    let highlight = BinaryMask::from_indices(
        height,
        width,
        counts
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > threshold)
            .map(|(i, _)| i),
    )?;
    Ok(BoxHeatmap {
        counts,
        threshold,
        highlight,
    })
}

/// Nearest-rank percentile: the element at zero-based rank
/// `floor(P/100 · n)` of the ascending values (clamped to the last).
///
/// For the values `0..100` the 90th percentile is 90.
pub fn percentile_value(values: &[f32], percentile: f64) -> Result<f32> {
    if values.is_empty() {
        return Err(Error::EmptyInput("percentile of no values".into()));
    }
    if !(0.0..=100.0).contains(&percentile) {
        return Err(Error::InvalidArgument(format!(
            "percentile must lie in [0, 100], got {percentile}"
        )));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f32::total_cmp);
    let rank = ((percentile / 100.0 * sorted.len() as f64).floor() as usize).min(sorted.len() - 1);
    Ok(sorted[rank])
}

/// Normalized label weights, keyed by canonical label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelHistogram {
    pub weights: BTreeMap<String, f64>,
}

impl LabelHistogram {
    pub fn total(&self) -> f64 {
        self.weights.values().sum()
    }

    pub fn get(&self, label: &str) -> f64 {
        self.weights.get(label).copied().unwrap_or(0.0)
    }

    /// `label,weight` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,weight\n");
        for (label, w) in &self.weights {
            let quoted = if label.contains([',', '"']) {
                format!("\"{}\"", label.replace('"', "\"\""))
            } else {
                label.clone()
            };
            out.push_str(&format!("{quoted},{w}\n"));
        }
        out
    }
}

/// Label frequencies with every person weighted equally, regardless of how
/// many responses each person's images received.
pub fn balanced_label_histogram(records: &[AnnotationRecord]) -> Result<LabelHistogram> {
    if records.is_empty() {
        return Err(Error::EmptyInput("no annotation records".into()));
    }
    let mut per_person: BTreeMap<&str, BTreeMap<String, u64>> = BTreeMap::new();
    for r in records {
        let label = canonicalize_label(&r.label)
            .ok_or_else(|| Error::InvalidArgument(format!("record {} has an empty label", r.response_id)))?;
        *per_person
            .entry(r.person_id.as_str())
            .or_default()
            .entry(label)
            .or_default() += 1;
    }
    let persons = per_person.len() as f64;
    let mut weights: BTreeMap<String, f64> = BTreeMap::new();
    for counts in per_person.values() {
        let total: u64 = counts.values().sum();
        for (label, &c) in counts {
            *weights.entry(label.clone()).or_default() += c as f64 / total as f64;
        }
    }
    weights.values_mut().for_each(|w| *w /= persons);
    Ok(LabelHistogram { weights })
}

/// Records grouped by person, in person-id order.
pub fn group_by_person(records: &[AnnotationRecord]) -> BTreeMap<String, Vec<AnnotationRecord>> {
    let mut groups: BTreeMap<String, Vec<AnnotationRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.person_id.clone()).or_default().push(r.clone());
    }
    groups
}
