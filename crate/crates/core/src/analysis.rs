//! Higher-level analyses on top of maps and metrics.
//!
//! * [`fit_power`] extrapolates scores to infinitely many participants with
//!   `f(n) = a * n^b + c`, `b <= 0`.
//! * [`element_importance`] scores labeled regions by their peak map value.
//! * [`center_bias_profile`] gives the horizontal cross-section of a mean map.
//! * [`estimate_cost`] prices a crowdsourced data collection.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::derive_seed;
use crate::imaging::Image;
use crate::maps::{mean_map, AttentionMap, MapError, Normalization};
use crate::stats;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    #[error("power fit needs at least 4 distinct n values, got {0}")]
    TooFewDistinctN(usize),
    #[error("invalid sample: {0}")]
    InvalidSample(String),
    #[error("element {0:?} lies outside the {1}x{2} map")]
    ElementOutOfBounds(String, usize, usize),
    #[error("element {0:?} has an empty region")]
    EmptyElement(String),
    #[error("map must be nonnegative with positive mass for element scoring")]
    UnscorableMap,
    #[error("rank correlation needs at least 3 aligned pairs, got {0}")]
    TooFewPairs(usize),
    #[error("score lists differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("{0} correlation undefined: zero variance")]
    ZeroVariance(&'static str),
    #[error("nothing to aggregate")]
    Empty,
    #[error(transparent)]
    Map(#[from] MapError),
    #[error("invalid cost model: {0}")]
    InvalidCostModel(String),
    #[error("annotation file {path}: {message}")]
    Annotation { path: String, message: String },
}

// ---------------------------------------------------------------------------
// power-law extrapolation

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PowerFit {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub rss: f64,
    pub c_ci95: (f64, f64),
}

impl PowerFit {
    pub fn predict(&self, n: f64) -> f64 {
        self.a * n.powf(self.b) + self.c
    }
}

impl fmt::Display for PowerFit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:.2} in the limit (95% C.I. [{:.3}, {:.3}])",
            self.c, self.c_ci95.0, self.c_ci95.1
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    /// Grid points over `b in [B_MIN, 0]`, endpoints included.
    pub grid_points: usize,
    /// Golden-section refinement around the best grid point.
    pub refine: bool,
    pub bootstrap_resamples: usize,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            grid_points: 121,
            refine: true,
            bootstrap_resamples: 1000,
            seed: 0,
        }
    }
}

pub const B_MIN: f64 = -3.0;

#[derive(Debug, Clone, Copy)]
struct Projection {
    a: f64,
    c: f64,
    rss: f64,
}

/// Exact least squares for `(a, c)` against precomputed regressors `xs`.
fn project_onto(xs: &[f64], ys: &[f64], b: f64) -> Projection {
    let m = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / m;
    let my = ys.iter().sum::<f64>() / m;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    // b == 0 makes n^b constant: only the intercept is identifiable
    let a = if sxx > 1e-300 && b != 0.0 { sxy / sxx } else { 0.0 };
    let c = my - a * mx;
    let rss = xs.iter().zip(ys).map(|(x, y)| (y - a * x - c).powi(2)).sum();
    Projection { a, c, rss }
}

/// The sample sizes with their logarithms and the grid regressors, shared by
/// every search over the same `n` values.
struct Basis {
    ln_ns: Vec<f64>,
    grid: Vec<(f64, Vec<f64>)>,
}

impl Basis {
    fn new(ns: &[f64], opts: &FitOptions) -> Self {
        let ln_ns: Vec<f64> = ns.iter().map(|n| n.ln()).collect();
        let k = opts.grid_points.max(2);
        let step = -B_MIN / (k - 1) as f64;
        let grid = (0..k)
            .map(|i| {
                let b = if i == k - 1 { 0.0 } else { B_MIN + step * i as f64 };
                (b, Self::powers(&ln_ns, b))
            })
            .collect();
        Basis { ln_ns, grid }
    }

    fn powers(ln_ns: &[f64], b: f64) -> Vec<f64> {
        ln_ns.iter().map(|l| (b * l).exp()).collect()
    }

    fn project(&self, ys: &[f64], b: f64, buf: &mut Vec<f64>) -> Projection {
        buf.clear();
        buf.extend(self.ln_ns.iter().map(|l| (b * l).exp()));
        project_onto(buf, ys, b)
    }

    fn step(&self) -> f64 {
        -B_MIN / (self.grid.len() - 1) as f64
    }
}

fn search_exponent(basis: &Basis, ys: &[f64], opts: &FitOptions) -> (f64, Projection) {
    let mut best_i = 0;
    let mut best = (B_MIN, project_onto(&basis.grid[0].1, ys, B_MIN));
    for (i, (b, xs)) in basis.grid.iter().enumerate().skip(1) {
        let p = project_onto(xs, ys, *b);
        if p.rss < best.1.rss {
            best = (*b, p);
            best_i = i;
        }
    }
    if !opts.refine {
        return best;
    }
    let step = basis.step();
    let mut buf = Vec::with_capacity(ys.len());
    let mut lo = (B_MIN + step * (best_i as f64 - 1.0)).max(B_MIN);
    let mut hi = (B_MIN + step * (best_i as f64 + 1.0)).min(0.0);
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let mut x1 = hi - INV_PHI * (hi - lo);
    let mut x2 = lo + INV_PHI * (hi - lo);
    let mut f1 = basis.project(ys, x1, &mut buf);
    let mut f2 = basis.project(ys, x2, &mut buf);
    for _ in 0..200 {
        if hi - lo < 1e-13 {
            break;
        }
        if f1.rss <= f2.rss {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - INV_PHI * (hi - lo);
            f1 = basis.project(ys, x1, &mut buf);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + INV_PHI * (hi - lo);
            f2 = basis.project(ys, x2, &mut buf);
        }
    }
    for cand in [(x1, f1), (x2, f2)] {
        if cand.1.rss < best.1.rss {
            best = cand;
        }
    }
    best
}

fn check_samples(samples: &[(u32, f64)]) -> Result<(), AnalysisError> {
    if let Some((n, y)) = samples.iter().find(|(n, y)| *n == 0 || !y.is_finite()) {
        return Err(AnalysisError::InvalidSample(format!("n={n}, score={y}")));
    }
    let mut distinct: Vec<u32> = samples.iter().map(|s| s.0).collect();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 4 {
        return Err(AnalysisError::TooFewDistinctN(distinct.len()));
    }
    Ok(())
}

/// Point fit without a confidence interval (the interval is `[c, c]`).
pub fn fit_power_point(samples: &[(u32, f64)], opts: &FitOptions) -> Result<PowerFit, AnalysisError> {
    check_samples(samples)?;
    let ns: Vec<f64> = samples.iter().map(|s| f64::from(s.0)).collect();
    let ys: Vec<f64> = samples.iter().map(|s| s.1).collect();
    let (b, p) = search_exponent(&Basis::new(&ns, opts), &ys, opts);
    Ok(PowerFit {
        a: p.a,
        b,
        c: p.c,
        rss: p.rss,
        c_ci95: (p.c, p.c),
    })
}

/// Least-squares fit of `a * n^b + c` with `b` constrained to `[-3, 0]`,
/// by variable projection; the interval on `c` comes from a seeded
/// residual bootstrap.
pub fn fit_power(samples: &[(u32, f64)], opts: &FitOptions) -> Result<PowerFit, AnalysisError> {
    let mut fit = fit_power_point(samples, opts)?;
    if opts.bootstrap_resamples == 0 {
        return Ok(fit);
    }
    let ns: Vec<f64> = samples.iter().map(|s| f64::from(s.0)).collect();
    let fitted: Vec<f64> = ns.iter().map(|&n| fit.predict(n)).collect();
    let residuals: Vec<f64> = samples.iter().zip(&fitted).map(|(s, f)| s.1 - f).collect();
    let basis = Basis::new(&ns, opts);

    let mut cs: Vec<f64> = (0..opts.bootstrap_resamples)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, k as u64));
            let ys: Vec<f64> = fitted
                .iter()
                .map(|f| f + residuals[rng.random_range(0..residuals.len())])
                .collect();
            search_exponent(&basis, &ys, opts).1.c
        })
        .collect();
    cs.sort_by(f64::total_cmp);
    let lo = stats::quantile_sorted(&cs, 0.025);
    let hi = stats::quantile_sorted(&cs, 0.975);
    fit.c_ci95 = (lo.min(fit.c), hi.max(fit.c));
    Ok(fit)
}

// ---------------------------------------------------------------------------
// element importance

/// Axis-aligned box (half-open, `[x0, x1) x [y0, y1)`) or a binary mask.
#[derive(Debug, Clone, PartialEq)]
pub enum Region {
    Box { x0: usize, y0: usize, x1: usize, y1: usize },
    Mask { width: usize, height: usize, bits: Vec<bool> },
}

impl Region {
    fn cells(&self) -> Vec<(usize, usize)> {
        match self {
            Region::Box { x0, y0, x1, y1 } => {
                (*y0..*y1).flat_map(|y| (*x0..*x1).map(move |x| (x, y))).collect()
            }
            Region::Mask { width, bits, .. } => bits
                .iter()
                .enumerate()
                .filter(|(_, b)| **b)
                .map(|(i, _)| (i % width, i / width))
                .collect(),
        }
    }

    fn fits(&self, width: usize, height: usize) -> bool {
        match self {
            Region::Box { x0, y0, x1, y1 } => x0 < x1 && y0 < y1 && *x1 <= width && *y1 <= height,
            Region::Mask { width: w, height: h, .. } => *w == width && *h == height,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElementAnnotation {
    pub element_id: String,
    pub label: String,
    pub region: Region,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ElementScore {
    pub element_id: String,
    pub label: String,
    pub score: f64,
}

/// Max of the max-normalized map inside each element.
pub fn element_importance(map: &AttentionMap, elements: &[ElementAnnotation]) -> Result<Vec<ElementScore>, AnalysisError> {
    if map.normalization() == Normalization::Zscore {
        return Err(AnalysisError::UnscorableMap);
    }
    let peak = map.values().iter().copied().fold(0.0f64, f64::max);
    if !(peak > 0.0) {
        return Err(AnalysisError::UnscorableMap);
    }
    elements
        .iter()
        .map(|e| {
            if !e.region.fits(map.width(), map.height()) {
                return Err(AnalysisError::ElementOutOfBounds(
                    e.element_id.clone(),
                    map.width(),
                    map.height(),
                ));
            }
            let cells = e.region.cells();
            if cells.is_empty() {
                return Err(AnalysisError::EmptyElement(e.element_id.clone()));
            }
            let max = cells.iter().map(|&(x, y)| map.get(x, y)).fold(f64::NEG_INFINITY, f64::max);
            Ok(ElementScore {
                element_id: e.element_id.clone(),
                label: e.label.clone(),
                score: max / peak,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RankCorrelation {
    pub pearson: f64,
    pub spearman: f64,
}

/// Pearson on raw scores, Spearman as Pearson on average ranks.
pub fn rank_correlation(a: &[f64], b: &[f64]) -> Result<RankCorrelation, AnalysisError> {
    if a.len() != b.len() {
        return Err(AnalysisError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 3 {
        return Err(AnalysisError::TooFewPairs(a.len()));
    }
    let pearson = stats::pearson(a, b).ok_or(AnalysisError::ZeroVariance("pearson"))?;
    let spearman = stats::pearson(&stats::average_ranks(a), &stats::average_ranks(b))
        .ok_or(AnalysisError::ZeroVariance("spearman"))?;
    Ok(RankCorrelation { pearson, spearman })
}

/// Mean score per label, labels in sorted order. Labels missing from an image
/// simply contribute nothing.
pub fn aggregate_element_scores<S: AsRef<str>>(per_image: &[(S, f64)]) -> Result<Vec<(String, f64)>, AnalysisError> {
    if per_image.is_empty() {
        return Err(AnalysisError::Empty);
    }
    let mut groups: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for (label, score) in per_image {
        let g = groups.entry(label.as_ref()).or_insert((0.0, 0));
        g.0 += score;
        g.1 += 1;
    }
    Ok(groups
        .into_iter()
        .map(|(l, (sum, n))| (l.to_string(), sum / n as f64))
        .collect())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationFile {
    #[serde(default, rename = "element")]
    elements: Vec<AnnotationEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationEntry {
    element_id: String,
    label: String,
    #[serde(rename = "box")]
    bbox: Option<[usize; 4]>,
    mask: Option<String>,
}

/// Reads a TOML annotation file:
///
/// ```toml
/// [[element]]
/// element_id = "t1"
/// label = "title"
/// box = [x0, y0, x1, y1]      # half-open pixel box
///
/// [[element]]
/// element_id = "l1"
/// label = "legend"
/// mask = "legend_mask.png"    # nonzero pixels belong to the element
/// ```
pub fn load_annotations(path: &Path) -> Result<Vec<ElementAnnotation>, AnalysisError> {
    let err = |message: String| AnalysisError::Annotation {
        path: path.display().to_string(),
        message,
    };
    let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    let file: AnnotationFile = toml::from_str(&text).map_err(|e| err(e.to_string()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    file.elements
        .into_iter()
        .map(|e| {
            let region = match (e.bbox, e.mask) {
                (Some([x0, y0, x1, y1]), None) => Region::Box { x0, y0, x1, y1 },
                (None, Some(mask)) => {
                    let img = Image::load(base.join(&mask)).map_err(|x| err(x.to_string()))?;
                    let bits = img.to_gray().pixels().iter().map(|&v| v > 0.0).collect();
                    Region::Mask {
                        width: img.width(),
                        height: img.height(),
                        bits,
                    }
                }
                _ => return Err(err(format!("element {:?} needs exactly one of box or mask", e.element_id))),
            };
            Ok(ElementAnnotation {
                element_id: e.element_id,
                label: e.label,
                region,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// center bias

/// Column means of the mean map, scaled so the peak is 1.
pub fn center_bias_profile(maps: &[AttentionMap]) -> Result<Vec<f64>, AnalysisError> {
    let mean = mean_map(maps)?;
    let (w, h) = (mean.width(), mean.height());
    let mut cols = vec![0.0; w];
    for row in mean.values().chunks_exact(w) {
        for (c, v) in cols.iter_mut().zip(row) {
            *c += v;
        }
    }
    cols.iter_mut().for_each(|c| *c /= h as f64);
    let peak = cols.iter().copied().fold(0.0f64, f64::max);
    if peak > 0.0 {
        cols.iter_mut().for_each(|c| *c /= peak);
    }
    Ok(cols)
}

// ---------------------------------------------------------------------------
// cost

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub rate_per_min: f64,
    pub time_per_image_s: f64,
    pub images_per_task: u32,
    pub participants: (u32, u32),
    /// Explicit pay per task; overrides `rate_per_min * time`.
    pub task_price: Option<f64>,
}

impl CostModel {
    pub const DEFAULT_RATE_PER_MIN: f64 = 0.1;

    pub fn new(time_per_image_s: f64, images_per_task: u32, participants: (u32, u32)) -> Self {
        CostModel {
            rate_per_min: Self::DEFAULT_RATE_PER_MIN,
            time_per_image_s,
            images_per_task,
            participants,
            task_price: None,
        }
    }

    fn validate(&self) -> Result<(), AnalysisError> {
        let bad = |m: &str| Err(AnalysisError::InvalidCostModel(m.into()));
        if !(self.rate_per_min > 0.0 && self.rate_per_min.is_finite()) {
            return bad("rate_per_min must be positive");
        }
        if !(self.time_per_image_s > 0.0 && self.time_per_image_s.is_finite()) {
            return bad("time_per_image_s must be positive");
        }
        if self.images_per_task == 0 {
            return bad("images_per_task must be positive");
        }
        if self.participants.0 > self.participants.1 {
            return bad("participant range must satisfy lo <= hi");
        }
        if let Some(p) = self.task_price {
            if !(p >= 0.0 && p.is_finite()) {
                return bad("task_price must be nonnegative");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostEstimate {
    /// `rate * time * images`, unrounded.
    pub task_cost_exact: f64,
    /// What a task would be posted at: the explicit price, or the exact cost
    /// rounded up to the next ten cents.
    pub task_cost: f64,
    pub per_image_lo: f64,
    pub per_image_hi: f64,
}

/// Rounds to the nearest cent, half away from zero.
pub fn round_cents(x: f64) -> f64 {
    // snap away representation noise before rounding (0.285 stored as 0.28499..)
    ((x * 100.0 * 1e6).round() / 1e6).round() / 100.0
}

fn ceil_to(x: f64, step: f64) -> f64 {
    let units = ((x / step) * 1e6).round() / 1e6;
    units.ceil() * step
}

pub fn format_dollars(x: f64) -> String {
    format!("${:.2}", round_cents(x))
}

pub fn estimate_cost(model: &CostModel) -> Result<CostEstimate, AnalysisError> {
    model.validate()?;
    let task_cost_exact = model.rate_per_min * (model.time_per_image_s / 60.0) * f64::from(model.images_per_task);
    let task_cost = model.task_price.unwrap_or_else(|| ceil_to(task_cost_exact, 0.10));
    let per_participant = task_cost / f64::from(model.images_per_task);
    Ok(CostEstimate {
        task_cost_exact,
        task_cost,
        per_image_lo: per_participant * f64::from(model.participants.0),
        per_image_hi: per_participant * f64::from(model.participants.1),
    })
}

impl CostEstimate {
    pub fn per_image_range(&self) -> String {
        format!("{}–{}", format_dollars(self.per_image_lo), format_dollars(self.per_image_hi))
    }
}
