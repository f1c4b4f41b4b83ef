//! Attribution localisation metrics.
//!
//! For a heatmap and the ground-truth boxes of one class, `μ` is the share
//! of positive relevance that falls inside the union of those boxes and
//! `μw = μ · S_tot / S_in` reweights it by inverse relative box size, so a
//! uniform heatmap scores `μw = 1` whatever the box.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::render::Heatmap2D;

pub const NUM_BINS: usize = 100;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no box of class `{class}` in image `{image_id}`")]
    NoBoxForClass { image_id: String, class: String },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("degenerate box {0:?}")]
    DegenerateBox([usize; 4]),
    #[error("empty input")]
    EmptyInput,
    #[error("i/o error on {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("malformed scores file {path}: {reason}")]
    Malformed { path: String, reason: String },
}

/// Pixel box, inclusive minimum and exclusive maximum.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BoundingBox {
    #[serde(rename = "label")]
    pub class_label: String,
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl BoundingBox {
    pub fn new(
        class_label: impl Into<String>,
        x_min: usize,
        y_min: usize,
        x_max: usize,
        y_max: usize,
    ) -> Result<Self, MetricsError> {
        if x_min >= x_max || y_min >= y_max {
            return Err(MetricsError::DegenerateBox([x_min, y_min, x_max, y_max]));
        }
        Ok(Self {
            class_label: class_label.into(),
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn width(&self) -> usize {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> usize {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x_min..self.x_max).contains(&x) && (self.y_min..self.y_max).contains(&y)
    }

    /// Intersection with a `width × height` frame; `None` if nothing remains.
    pub fn clip(&self, width: usize, height: usize) -> Option<Self> {
        let x_max = self.x_max.min(width);
        let y_max = self.y_max.min(height);
        (self.x_min < x_max && self.y_min < y_max).then(|| Self {
            x_max,
            y_max,
            ..self.clone()
        })
    }
}

/// Union of all boxes of `class` as a row-major mask, and its pixel count.
pub fn union_mask(width: usize, height: usize, boxes: &[BoundingBox], class: &str) -> (Vec<bool>, usize) {
    let mut mask = vec![false; width * height];
    for b in boxes.iter().filter(|b| b.class_label == class) {
        for y in b.y_min..b.y_max.min(height) {
            for x in b.x_min..b.x_max.min(width) {
                mask[y * width + x] = true;
            }
        }
    }
    let area = mask.iter().filter(|&&m| m).count();
    (mask, area)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationScore {
    pub image_id: String,
    pub class_label: String,
    pub s_in: usize,
    pub s_tot: usize,
    pub r_in: f64,
    pub r_tot: f64,
    pub mu: f64,
    pub mu_w: f64,
}

impl LocalizationScore {
    /// Builds a score from its sums. `R_tot = 0` scores zero.
    pub fn from_sums(
        image_id: impl Into<String>,
        class_label: impl Into<String>,
        r_in: f64,
        r_tot: f64,
        s_in: usize,
        s_tot: usize,
    ) -> Self {
        let (mu, mu_w) = if r_tot > 0.0 {
            // μw as one ratio of products keeps the uniform case at exactly 1
            (r_in / r_tot, (r_in * s_tot as f64) / (r_tot * s_in as f64))
        } else {
            (0.0, 0.0)
        };
        Self {
            image_id: image_id.into(),
            class_label: class_label.into(),
            s_in,
            s_tot,
            r_in,
            r_tot,
            mu,
            mu_w,
        }
    }

    pub fn relative_size(&self) -> f64 {
        self.s_in as f64 / self.s_tot as f64
    }
}

/// Scores `heatmap` against the union of the `target_class` boxes.
pub fn localization_score(
    heatmap: &Heatmap2D,
    annotation: &[BoundingBox],
    target_class: &str,
    image_id: &str,
) -> Result<LocalizationScore, MetricsError> {
    let (h, w) = (heatmap.height(), heatmap.width());
    let mut any = false;
    for b in annotation.iter().filter(|b| b.class_label == target_class) {
        any = true;
        if b.x_max > w || b.y_max > h {
            return Err(MetricsError::DimensionMismatch(format!(
                "box {:?} exceeds {w}x{h} heatmap",
                [b.x_min, b.y_min, b.x_max, b.y_max]
            )));
        }
    }
    if !any {
        return Err(MetricsError::NoBoxForClass {
            image_id: image_id.to_string(),
            class: target_class.to_string(),
        });
    }
    let (mask, s_in) = union_mask(w, h, annotation, target_class);
    let (mut r_in, mut r_tot) = (0.0, 0.0);
    for (&v, &inside) in heatmap.values().data().iter().zip(&mask) {
        let p = v.max(0.0);
        r_tot += p;
        if inside {
            r_in += p;
        }
    }
    Ok(LocalizationScore::from_sums(image_id, target_class, r_in, r_tot, s_in, w * h))
}

/// Size bin `1..=100` of a relative box size `s_in / s_tot`, right-closed.
pub fn bin_index(s_in: usize, s_tot: usize) -> usize {
    let b = (NUM_BINS * s_in).div_ceil(s_tot);
    b.clamp(1, NUM_BINS)
}

/// Bounds `(low, high]` of a 1-based bin.
pub fn bin_bounds(bin: usize) -> (f64, f64) {
    ((bin - 1) as f64 / NUM_BINS as f64, bin as f64 / NUM_BINS as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SizeBin {
    pub low: f64,
    pub high: f64,
    pub mean_mu: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateReport {
    pub mean_mu_w: f64,
    pub mean_mu: f64,
    /// Mean `μ` over scores whose box union covers at most a quarter of the image.
    pub mean_mu_le_025: Option<f64>,
    pub mean_mu_le_05: Option<f64>,
    pub bins: Vec<SizeBin>,
    pub n_scores: usize,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn aggregate(scores: &[LocalizationScore]) -> Result<AggregateReport, MetricsError> {
    if scores.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut sums = vec![(0.0, 0usize); NUM_BINS];
    for s in scores {
        let slot = &mut sums[bin_index(s.s_in, s.s_tot) - 1];
        slot.0 += s.mu;
        slot.1 += 1;
    }
    let bins = sums
        .into_iter()
        .enumerate()
        .map(|(i, (sum, count))| {
            let (low, high) = bin_bounds(i + 1);
            SizeBin {
                low,
                high,
                mean_mu: (count > 0).then(|| sum / count as f64),
                count,
            }
        })
        .collect();
    Ok(AggregateReport {
        mean_mu_w: mean(scores.iter().map(|s| s.mu_w)).unwrap(),
        mean_mu: mean(scores.iter().map(|s| s.mu)).unwrap(),
        mean_mu_le_025: mean(scores.iter().filter(|s| 4 * s.s_in <= s.s_tot).map(|s| s.mu)),
        mean_mu_le_05: mean(scores.iter().filter(|s| 2 * s.s_in <= s.s_tot).map(|s| s.mu)),
        bins,
        n_scores: scores.len(),
    })
}

/// One annotated image in the evaluation frame.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    pub image_id: String,
    pub height: usize,
    pub width: usize,
    pub boxes: Vec<BoundingBox>,
}

impl AnnotatedImage {
    /// Distinct class labels present, sorted.
    pub fn classes(&self) -> Vec<String> {
        self.boxes
            .iter()
            .map(|b| b.class_label.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }
}

/// Scores of a uniform positive attribution for every (image, class) pair.
pub fn baseline_scores(images: &[AnnotatedImage]) -> Vec<LocalizationScore> {
    let mut scores = Vec::new();
    for img in images {
        let s_tot = img.width * img.height;
        for class in img.classes() {
            let (_, s_in) = union_mask(img.width, img.height, &img.boxes, &class);
            if s_in == 0 {
                continue;
            }
            scores.push(LocalizationScore::from_sums(
                &img.image_id,
                class,
                s_in as f64,
                s_tot as f64,
                s_in,
                s_tot,
            ));
        }
    }
    scores
}

/// The uniform-attribution baseline: per sample `μ = S_in / S_tot`, `μw = 1`.
pub fn baseline_report(images: &[AnnotatedImage]) -> Result<AggregateReport, MetricsError> {
    aggregate(&baseline_scores(images))
}

const SCORES_HEADER: &str = "image_id,class,S_in,S_tot,R_in,R_tot,mu,mu_w";

fn io_err(path: &Path, e: impl std::fmt::Display) -> MetricsError {
    MetricsError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per score, in the given order.
pub fn write_scores_csv(path: &Path, scores: &[LocalizationScore]) -> Result<(), MetricsError> {
    let mut out = String::from(SCORES_HEADER);
    out.push('\n');
    for s in scores {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            csv_field(&s.image_id),
            csv_field(&s.class_label),
            s.s_in,
            s.s_tot,
            s.r_in,
            s.r_tot,
            s.mu,
            s.mu_w
        )
        .unwrap();
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

fn split_csv_line(line: &str) -> Vec<String> {
    let mut fields = Vec::new();
    let mut cur = String::new();
    let mut quoted = false;
    let mut chars = line.chars().peekable();
    while let Some(c) = chars.next() {
        match (c, quoted) {
            ('"', true) if chars.peek() == Some(&'"') => {
                cur.push('"');
                chars.next();
            }
            ('"', _) => quoted = !quoted,
            (',', false) => fields.push(std::mem::take(&mut cur)),
            _ => cur.push(c),
        }
    }
    fields.push(cur);
    fields
}

/// Reads a file written by [`write_scores_csv`].
pub fn read_scores_csv(path: &Path) -> Result<Vec<LocalizationScore>, MetricsError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let bad = |reason: String| MetricsError::Malformed {
        path: path.display().to_string(),
        reason,
    };
    let mut lines = text.lines();
    if lines.next() != Some(SCORES_HEADER) {
        return Err(bad("unexpected header".into()));
    }
    let mut scores = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
        let f = split_csv_line(line);
        if f.len() != 8 {
            return Err(bad(format!("row {} has {} fields", n + 2, f.len())));
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|e| bad(format!("row {}: {e}", n + 2)));
        let int = |i: usize| f[i].parse::<usize>().map_err(|e| bad(format!("row {}: {e}", n + 2)));
        scores.push(LocalizationScore {
            image_id: f[0].clone(),
            class_label: f[1].clone(),
            s_in: int(2)?,
            s_tot: int(3)?,
            r_in: num(4)?,
            r_tot: num(5)?,
            mu: num(6)?,
            mu_w: num(7)?,
        });
    }
    Ok(scores)
}

/// Table-shaped summary, one row per named report.
pub fn write_summary_csv(path: &Path, rows: &[(&str, &AggregateReport)]) -> Result<(), MetricsError> {
    let mut out = String::from("analyzer,mu_w,mu_le_0.25,mu_le_0.5,mu,n\n");
    for (name, r) in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            csv_field(name),
            r.mean_mu_w,
            opt(r.mean_mu_le_025),
            opt(r.mean_mu_le_05),
            r.mean_mu,
            r.n_scores
        )
        .unwrap();
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

/// The μ-versus-relative-size curve, one row per bin.
pub fn write_bins_csv(path: &Path, report: &AggregateReport) -> Result<(), MetricsError> {
    let mut out = String::from("bin_low,bin_high,mean_mu,count\n");
    for b in &report.bins {
        writeln!(out, "{},{},{},{}", b.low, b.high, opt(b.mean_mu), b.count).unwrap();
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}
