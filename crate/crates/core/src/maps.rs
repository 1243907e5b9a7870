//! Point sets and the attention maps built from them.
//!
//! Clicks, mouse samples and fixations all go through the same recipe:
//! unit impulses at the nearest pixel, a Gaussian blur with the dataset's map
//! sigma, and normalization to a probability distribution.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::MapParams;
use crate::imaging::blur_plane;
use crate::stats;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MapError {
    #[error("point set is empty")]
    EmptyPointSet,
    #[error("map has zero variance")]
    ZeroVariance,
    #[error("point ({x}, {y}) outside the {width}x{height} image")]
    OutOfBounds { x: f64, y: f64, width: usize, height: usize },
    #[error("timestamps of participant {0:?} decrease")]
    NonMonotonicTime(String),
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("expected a {expected} map, got {got}")]
    WrongNormalization { expected: Normalization, got: Normalization },
    #[error("invalid map: {0}")]
    Invalid(String),
    #[error("no maps given")]
    NoMaps,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointKind {
    Click,
    MoveSample,
    Fixation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub t_ms: f64,
    pub participant_id: String,
}

impl Point {
    pub fn new(x: f64, y: f64, t_ms: f64, participant_id: impl Into<String>) -> Self {
        Point {
            x,
            y,
            t_ms,
            participant_id: participant_id.into(),
        }
    }

    /// Nearest pixel, clamped into the image.
    pub fn pixel(&self, width: usize, height: usize) -> (usize, usize) {
        let px = (self.x.round().max(0.0) as usize).min(width - 1);
        let py = (self.y.round().max(0.0) as usize).min(height - 1);
        (px, py)
    }
}

/// Attention points on one image.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    width: usize,
    height: usize,
    kind: PointKind,
    points: Vec<Point>,
}

impl PointSet {
    /// Validates bounds (`[0,width) x [0,height)`) and per-participant time order.
    pub fn new(width: usize, height: usize, kind: PointKind, points: Vec<Point>) -> Result<Self, MapError> {
        if width == 0 || height == 0 {
            return Err(MapError::Invalid("image dimensions must be positive".into()));
        }
        let mut last_t: HashMap<&str, f64> = HashMap::new();
        for p in &points {
            if !(p.x >= 0.0 && p.y >= 0.0 && p.x < width as f64 && p.y < height as f64) {
                return Err(MapError::OutOfBounds {
                    x: p.x,
                    y: p.y,
                    width,
                    height,
                });
            }
            if !(p.t_ms >= 0.0) {
                return Err(MapError::Invalid(format!("negative timestamp {}", p.t_ms)));
            }
            let prev = last_t.entry(&p.participant_id).or_insert(p.t_ms);
            if p.t_ms < *prev {
                return Err(MapError::NonMonotonicTime(p.participant_id.clone()));
            }
            *prev = p.t_ms;
        }
        Ok(PointSet { width, height, kind, points })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn kind(&self) -> PointKind {
        self.kind
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Distinct participant ids in sorted order.
    pub fn participants(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.points.iter().map(|p| p.participant_id.as_str()).collect();
        set.into_iter().map(str::to_owned).collect()
    }

    /// Points belonging to the given participants, order preserved.
    pub fn subset<S: AsRef<str>>(&self, participants: &[S]) -> PointSet {
        let keep: BTreeSet<&str> = participants.iter().map(AsRef::as_ref).collect();
        PointSet {
            points: self
                .points
                .iter()
                .filter(|p| keep.contains(p.participant_id.as_str()))
                .cloned()
                .collect(),
            ..*self
        }
    }

    /// Points of everyone except `participant`.
    pub fn without(&self, participant: &str) -> PointSet {
        PointSet {
            points: self.points.iter().filter(|p| p.participant_id != participant).cloned().collect(),
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    Raw,
    Probability,
    Zscore,
}

impl fmt::Display for Normalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Normalization::Raw => "raw",
            Normalization::Probability => "probability",
            Normalization::Zscore => "zscore",
        })
    }
}

impl FromStr for Normalization {
    type Err = MapError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "raw" => Ok(Normalization::Raw),
            "probability" => Ok(Normalization::Probability),
            "zscore" => Ok(Normalization::Zscore),
            other => Err(MapError::Invalid(format!("unknown normalization {other:?}"))),
        }
    }
}

/// Dense row-major grid of attention values.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
    normalization: Normalization,
}

impl AttentionMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>, normalization: Normalization) -> Result<Self, MapError> {
        if width == 0 || height == 0 || values.len() != width * height {
            return Err(MapError::Invalid(format!(
                "{} values for a {width}x{height} grid",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(MapError::Invalid("non-finite value".into()));
        }
        match normalization {
            Normalization::Raw | Normalization::Probability if values.iter().any(|&v| v < 0.0) => {
                return Err(MapError::Invalid(format!("negative value in a {normalization} map")));
            }
            Normalization::Probability => {
                let sum: f64 = values.iter().sum();
                if (sum - 1.0).abs() > 1e-6 {
                    return Err(MapError::Invalid(format!("probability map sums to {sum}")));
                }
            }
            _ => {}
        }
        Ok(AttentionMap {
            width,
            height,
            values,
            normalization,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn argmax(&self) -> (usize, usize) {
        let (i, _) = self
            .values
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
        (i % self.width, i / self.width)
    }

    pub fn mirror_horizontal(&self) -> AttentionMap {
        let mut values = Vec::with_capacity(self.values.len());
        for row in self.values.chunks_exact(self.width) {
            values.extend(row.iter().rev());
        }
        AttentionMap { values, ..*self }
    }

    /// Rescales a nonnegative map so it sums to one.
    pub fn to_probability(&self) -> Result<AttentionMap, MapError> {
        if self.normalization == Normalization::Zscore {
            return Err(MapError::WrongNormalization {
                expected: Normalization::Raw,
                got: self.normalization,
            });
        }
        let sum: f64 = self.values.iter().sum();
        if !(sum > 0.0) {
            return Err(MapError::Invalid("map has no mass".into()));
        }
        Ok(AttentionMap {
            values: self.values.iter().map(|v| v / sum).collect(),
            normalization: Normalization::Probability,
            ..*self
        })
    }

    fn same_dims(&self, other: &AttentionMap) -> Result<(), MapError> {
        if self.width != other.width || self.height != other.height {
            return Err(MapError::DimensionMismatch(self.width, self.height, other.width, other.height));
        }
        Ok(())
    }

    /// Text grid: a `width height normalization` header, then one line per row.
    pub fn to_grid_text(&self) -> String {
        let mut out = format!("{} {} {}\n", self.width, self.height, self.normalization);
        for row in self.values.chunks_exact(self.width) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_grid_text(text: &str) -> Result<AttentionMap, MapError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| MapError::Invalid("missing header".into()))?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        let [w, h, norm] = parts.as_slice() else {
            return Err(MapError::Invalid(format!("bad header {header:?}")));
        };
        let parse_dim =
            |s: &str| s.parse::<usize>().map_err(|_| MapError::Invalid(format!("bad dimension {s:?}")));
        let (width, height) = (parse_dim(w)?, parse_dim(h)?);
        let normalization: Normalization = norm.parse()?;
        let mut values = Vec::with_capacity(width * height);
        for (row, line) in lines.enumerate() {
            let before = values.len();
            for tok in line.split_whitespace() {
                values.push(
                    tok.parse::<f64>()
                        .map_err(|_| MapError::Invalid(format!("row {row}: bad value {tok:?}")))?,
                );
            }
            if values.len() - before != width {
                return Err(MapError::Invalid(format!("row {row} has {} values", values.len() - before)));
            }
        }
        AttentionMap::new(width, height, values, normalization)
    }
}

/// Impulse grid of the (optionally subsetted) points, blurred and normalized.
pub fn build_map<S: AsRef<str>>(
    pts: &PointSet,
    params: &MapParams,
    participants: Option<&[S]>,
) -> Result<AttentionMap, MapError> {
    let (w, h) = (pts.width, pts.height);
    let keep: Option<BTreeSet<&str>> = participants.map(|ps| ps.iter().map(AsRef::as_ref).collect());
    let mut grid = vec![0.0; w * h];
    let mut count = 0usize;
    for p in &pts.points {
        if let Some(keep) = &keep {
            if !keep.contains(p.participant_id.as_str()) {
                continue;
            }
        }
        let (x, y) = p.pixel(w, h);
        grid[y * w + x] += 1.0;
        count += 1;
    }
    if count == 0 {
        return Err(MapError::EmptyPointSet);
    }
    let blurred = blur_plane(&grid, w, h, params.map_sigma_px);
    let sum: f64 = blurred.iter().sum();
    let values = blurred.into_iter().map(|v| (v / sum).max(0.0)).collect();
    AttentionMap::new(w, h, values, Normalization::Probability)
}

/// Elementwise `(v - mean) / std` with the population standard deviation.
pub fn zscore(map: &AttentionMap) -> Result<AttentionMap, MapError> {
    let (mean, std) = stats::mean_std(&map.values);
    if stats::is_degenerate(&map.values, std) {
        return Err(MapError::ZeroVariance);
    }
    Ok(AttentionMap {
        values: map.values.iter().map(|v| (v - mean) / std).collect(),
        normalization: Normalization::Zscore,
        ..*map
    })
}

/// Elementwise mean of probability maps, renormalized to sum one.
pub fn mean_map(maps: &[AttentionMap]) -> Result<AttentionMap, MapError> {
    let first = maps.first().ok_or(MapError::NoMaps)?;
    let mut acc = vec![0.0; first.values.len()];
    for m in maps {
        first.same_dims(m)?;
        if m.normalization != Normalization::Probability {
            return Err(MapError::WrongNormalization {
                expected: Normalization::Probability,
                got: m.normalization,
            });
        }
        for (a, v) in acc.iter_mut().zip(&m.values) {
            *a += v;
        }
    }
    let n = maps.len() as f64;
    let mean: Vec<f64> = acc.into_iter().map(|v| v / n).collect();
    let sum: f64 = mean.iter().sum();
    AttentionMap::new(
        first.width,
        first.height,
        mean.into_iter().map(|v| v / sum).collect(),
        Normalization::Probability,
    )
}
