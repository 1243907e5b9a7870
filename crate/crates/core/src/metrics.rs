//! Similarity between click maps and eye-fixation data.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::config::MapParams;
use crate::maps::{build_map, zscore, AttentionMap, MapError, PointSet};
use crate::{derive_seed, stable_hash};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error(transparent)]
    Map(#[from] MapError),
    #[error("inter-observer consistency needs at least 2 observers, got {0}")]
    TooFewObservers(usize),
    #[error("ioc must be positive, got {0}")]
    NonPositiveIoc(f64),
    #[error("image {image_id}: {source}")]
    Image {
        image_id: String,
        #[source]
        source: Box<MetricError>,
    },
    #[error("no images to evaluate")]
    NoImages,
    #[error("n_pred and n_splits must be positive")]
    BadSplitSpec,
}

fn check_dims(a: (usize, usize), b: (usize, usize)) -> Result<(), MapError> {
    if a != b {
        return Err(MapError::DimensionMismatch(a.0, a.1, b.0, b.1));
    }
    Ok(())
}

/// Pearson correlation over all cells.
pub fn cc(pred: &AttentionMap, gt: &AttentionMap) -> Result<f64, MetricError> {
    check_dims((pred.width(), pred.height()), (gt.width(), gt.height()))?;
    let zp = zscore(pred)?;
    let zg = zscore(gt)?;
    let n = zp.values().len() as f64;
    let r = zp.values().iter().zip(zg.values()).map(|(a, b)| a * b).sum::<f64>() / n;
    Ok(r.clamp(-1.0, 1.0))
}

/// Mean z-scored map value at the fixated pixels.
pub fn nss(pred: &AttentionMap, fixations: &PointSet) -> Result<f64, MetricError> {
    check_dims((pred.width(), pred.height()), (fixations.width(), fixations.height()))?;
    if fixations.is_empty() {
        return Err(MapError::EmptyPointSet.into());
    }
    let z = zscore(pred)?;
    let total: f64 = fixations
        .points()
        .iter()
        .map(|p| {
            let (x, y) = p.pixel(z.width(), z.height());
            z.get(x, y)
        })
        .sum();
    Ok(total / fixations.len() as f64)
}

/// Leave-one-observer-out NSS, averaged over observers.
pub fn ioc(gt: &PointSet, params: &MapParams) -> Result<f64, MetricError> {
    let observers = gt.participants();
    if observers.len() < 2 {
        return Err(MetricError::TooFewObservers(observers.len()));
    }
    let mut scores = Vec::with_capacity(observers.len());
    for o in &observers {
        let others = gt.without(o);
        let map = build_map(&others, params, None::<&[&str]>)?;
        scores.push(nss(&map, &gt.subset(&[o]))?);
    }
    // summed in value order so relabeling observers cannot change the result
    scores.sort_by(f64::total_cmp);
    Ok(scores.iter().sum::<f64>() / observers.len() as f64)
}

pub fn normalized_nss(nss_val: f64, ioc_val: f64) -> Result<f64, MetricError> {
    if !(ioc_val > 0.0) {
        return Err(MetricError::NonPositiveIoc(ioc_val));
    }
    Ok(nss_val / ioc_val)
}

/// Integer percent, half away from zero: `0.894 -> "89%"`.
pub fn format_percent(fraction: f64) -> String {
    format!("{}%", (fraction * 100.0).round() as i64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub image_id: String,
    pub cc: f64,
    pub nss: f64,
    pub ioc_nss: f64,
    pub normalized_nss: f64,
    pub n_pred_participants: usize,
    pub n_gt_observers: usize,
}

impl MetricReport {
    fn new(image_id: String, cc: f64, nss: f64, ioc_nss: f64, n_pred: usize, n_gt: usize) -> Self {
        MetricReport {
            image_id,
            cc,
            nss,
            ioc_nss,
            normalized_nss: nss / ioc_nss,
            n_pred_participants: n_pred,
            n_gt_observers: n_gt,
        }
    }
}

/// One image's click data and ground truth.
#[derive(Debug, Clone)]
pub struct ImagePair {
    pub image_id: String,
    pub pred: PointSet,
    pub gt: PointSet,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub n_pred: usize,
    pub n_splits: usize,
    pub seed: u64,
}

impl SplitSpec {
    pub const DEFAULT_SPLITS: usize = 10;
}

/// Participant subsets drawn for one image. A request for at least as many
/// participants as exist yields a single subset with all of them.
pub fn participant_splits(participants: &[String], n_pred: usize, n_splits: usize, seed: u64) -> Vec<Vec<String>> {
    if n_pred >= participants.len() {
        return vec![participants.to_vec()];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_splits)
        .map(|_| {
            let mut idx = rand::seq::index::sample(&mut rng, participants.len(), n_pred).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| participants[i].clone()).collect()
        })
        .collect()
}

/// CC and NSS of a click map built from `n_pred` participants, averaged over
/// random splits. Returns `(cc, nss, effective_n_pred)`.
pub fn split_scores(
    pair: &ImagePair,
    gt_map: &AttentionMap,
    params: &MapParams,
    split: SplitSpec,
) -> Result<(f64, f64, usize), MetricError> {
    if split.n_pred == 0 || split.n_splits == 0 {
        return Err(MetricError::BadSplitSpec);
    }
    let participants = pair.pred.participants();
    let seed = derive_seed(split.seed, stable_hash(&pair.image_id));
    let subsets = participant_splits(&participants, split.n_pred, split.n_splits, seed);
    let (mut cc_sum, mut nss_sum) = (0.0, 0.0);
    for subset in &subsets {
        let map = build_map(&pair.pred, params, Some(subset.as_slice()))?;
        cc_sum += cc(&map, gt_map)?;
        nss_sum += nss(&map, &pair.gt)?;
    }
    let k = subsets.len() as f64;
    Ok((cc_sum / k, nss_sum / k, split.n_pred.min(participants.len())))
}

pub fn evaluate_image(pair: &ImagePair, params: &MapParams, split: SplitSpec) -> Result<MetricReport, MetricError> {
    let gt_map = build_map(&pair.gt, params, None::<&[&str]>)?;
    let ioc_val = ioc(&pair.gt, params)?;
    let (cc_val, nss_val, n_pred) = split_scores(pair, &gt_map, params, split)?;
    Ok(MetricReport::new(
        pair.image_id.clone(),
        cc_val,
        nss_val,
        ioc_val,
        n_pred,
        pair.gt.participants().len(),
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetReport {
    pub images: Vec<MetricReport>,
    /// Unweighted means over images; normalized NSS is mean NSS over mean IOC.
    pub aggregate: MetricReport,
    pub skipped: Vec<(String, String)>,
    pub split: SplitSpec,
}

pub const AGGREGATE_ID: &str = "AGGREGATE";

/// Evaluates every image (in parallel) and averages the per-image scores.
///
/// Per-image seeds derive from the base seed and the image id, so the result
/// does not depend on evaluation order or thread count.
pub fn dataset_report(
    pairs: &[ImagePair],
    params: &MapParams,
    split: SplitSpec,
    skip_errors: bool,
) -> Result<DatasetReport, MetricError> {
    if pairs.is_empty() {
        return Err(MetricError::NoImages);
    }
    let results: Vec<Result<MetricReport, MetricError>> =
        pairs.par_iter().map(|p| evaluate_image(p, params, split)).collect();
    let mut images = Vec::new();
    let mut skipped = Vec::new();
    for (pair, res) in pairs.iter().zip(results) {
        match res {
            Ok(r) => images.push(r),
            Err(e) if skip_errors => skipped.push((pair.image_id.clone(), e.to_string())),
            Err(e) => {
                return Err(MetricError::Image {
                    image_id: pair.image_id.clone(),
                    source: Box::new(e),
                })
            }
        }
    }
    if images.is_empty() {
        return Err(MetricError::NoImages);
    }
    let n = images.len() as f64;
    let mean = |f: fn(&MetricReport) -> f64| images.iter().map(f).sum::<f64>() / n;
    let aggregate = MetricReport::new(
        AGGREGATE_ID.to_string(),
        mean(|r| r.cc),
        mean(|r| r.nss),
        mean(|r| r.ioc_nss),
        split.n_pred,
        images.iter().map(|r| r.n_gt_observers).max().unwrap_or(0),
    );
    Ok(DatasetReport {
        images,
        aggregate,
        skipped,
        split,
    })
}

impl DatasetReport {
    /// CSV with columns `image_id,n_pred,cc,nss,ioc_nss,normalized_nss`,
    /// one row per image plus an `AGGREGATE` row. `preamble` lines are
    /// written first as `#` comments.
    pub fn write_csv<W: Write>(&self, out: W, preamble: &[String]) -> Result<(), csv::Error> {
        let mut out = out;
        for line in preamble {
            writeln!(out, "# {line}")?;
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["image_id", "n_pred", "cc", "nss", "ioc_nss", "normalized_nss"])?;
        for r in self.images.iter().chain(std::iter::once(&self.aggregate)) {
            w.write_record([
                r.image_id.clone(),
                r.n_pred_participants.to_string(),
                r.cc.to_string(),
                r.nss.to_string(),
                r.ioc_nss.to_string(),
                r.normalized_nss.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Mean scores over images at one click-map size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub n: usize,
    /// Images with at least `n` click participants.
    pub images: usize,
    pub cc: f64,
    pub nss: f64,
}

/// Per-image `(cc, nss)` for `n = 1..=participants`, each averaged over
/// `n_splits` random participant orders. The subset of size `n` is the first
/// `n` of each order, so consecutive sizes share participants.
fn nested_scores(
    pair: &ImagePair,
    gt_map: &AttentionMap,
    params: &MapParams,
    n_splits: usize,
    seed: u64,
) -> Result<Vec<(f64, f64)>, MetricError> {
    let participants = pair.pred.participants();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, stable_hash(&pair.image_id)));
    let orders: Vec<Vec<String>> = (0..n_splits)
        .map(|_| {
            let mut order = participants.clone();
            order.shuffle(&mut rng);
            order
        })
        .collect();
    (1..=participants.len())
        .map(|n| {
            let (mut cc_sum, mut nss_sum) = (0.0, 0.0);
            for order in &orders {
                let map = build_map(&pair.pred, params, Some(&order[..n]))?;
                cc_sum += cc(&map, gt_map)?;
                nss_sum += nss(&map, &pair.gt)?;
            }
            let k = orders.len() as f64;
            Ok((cc_sum / k, nss_sum / k))
        })
        .collect()
}

/// CC and NSS against `n` click participants for `n = 1..=max_n`.
///
/// At each `n` only images with at least `n` participants contribute; the
/// curve stops at the first `n` no image reaches.
pub fn convergence_curve(
    pairs: &[ImagePair],
    params: &MapParams,
    max_n: usize,
    n_splits: usize,
    seed: u64,
) -> Result<Vec<CurvePoint>, MetricError> {
    if n_splits == 0 {
        return Err(MetricError::BadSplitSpec);
    }
    let per_image = pairs
        .par_iter()
        .map(|p| {
            let gt = build_map(&p.gt, params, None::<&[&str]>)?;
            nested_scores(p, &gt, params, n_splits, seed)
        })
        .collect::<Result<Vec<_>, MetricError>>()?;
    let mut curve = Vec::new();
    for n in 1..=max_n {
        let at_n: Vec<(f64, f64)> = per_image.iter().filter_map(|s| s.get(n - 1).copied()).collect();
        if at_n.is_empty() {
            break;
        }
        let k = at_n.len() as f64;
        curve.push(CurvePoint {
            n,
            images: at_n.len(),
            cc: at_n.iter().map(|s| s.0).sum::<f64>() / k,
            nss: at_n.iter().map(|s| s.1).sum::<f64>() / k,
        });
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maps::{Normalization, Point, PointKind};

    fn raw(w: usize, h: usize, values: Vec<f64>) -> AttentionMap {
        AttentionMap::new(w, h, values, Normalization::Raw).unwrap()
    }

    fn fix(w: usize, h: usize, coords: &[(f64, f64, &str)]) -> PointSet {
        let points = coords.iter().map(|&(x, y, p)| Point::new(x, y, 0.0, p)).collect();
        PointSet::new(w, h, PointKind::Fixation, points).unwrap()
    }

    #[test]
    fn cc_identity_and_anticorrelation() {
        let m = raw(3, 2, vec![0.1, 0.5, 0.2, 0.9, 0.0, 0.3]);
        assert!((cc(&m, &m).unwrap() - 1.0).abs() < 1e-9);
        let inv = raw(3, 2, m.values().iter().map(|v| 1.0 - v).collect());
        assert!((cc(&m, &inv).unwrap() + 1.0).abs() < 1e-9);
        let flat = raw(3, 2, vec![0.2; 6]);
        assert_eq!(cc(&m, &flat), Err(MetricError::Map(MapError::ZeroVariance)));
    }

    #[test]
    fn nss_hand_values() {
        let m = raw(3, 3, (1..=9).map(f64::from).collect());
        let one = fix(3, 3, &[(2.0, 2.0, "a")]);
        assert!((nss(&m, &one).unwrap() - 1.5492).abs() < 1e-4);
        let every: Vec<(f64, f64, &str)> =
            (0..9).map(|i| ((i % 3) as f64, (i / 3) as f64, "a")).collect();
        assert!(nss(&m, &fix(3, 3, &every)).unwrap().abs() < 1e-9);
        let at_max = fix(3, 3, &[(2.0, 2.0, "a"), (2.2, 1.9, "b")]);
        let zmax = zscore(&m).unwrap().values().iter().cloned().fold(f64::MIN, f64::max);
        assert!((nss(&m, &at_max).unwrap() - zmax).abs() < 1e-12);
    }

    #[test]
    fn nss_errors() {
        let m = raw(3, 3, (1..=9).map(f64::from).collect());
        let empty = PointSet::new(3, 3, PointKind::Fixation, vec![]).unwrap();
        assert_eq!(nss(&m, &empty), Err(MetricError::Map(MapError::EmptyPointSet)));
        let flat = raw(3, 3, vec![1.0; 9]);
        assert_eq!(
            nss(&flat, &fix(3, 3, &[(0.0, 0.0, "a")])),
            Err(MetricError::Map(MapError::ZeroVariance))
        );
    }

    #[test]
    fn ioc_identical_observers_equals_single_point_peak() {
        let params = MapParams::new(2.0).unwrap();
        let gt = fix(21, 21, &[(10.0, 10.0, "a"), (10.0, 10.0, "b"), (10.0, 10.0, "c")]);
        let single = build_map(&fix(21, 21, &[(10.0, 10.0, "x")]), &params, None::<&[&str]>).unwrap();
        let zmax = zscore(&single).unwrap().get(10, 10);
        assert!((ioc(&gt, &params).unwrap() - zmax).abs() < 1e-12);
    }

    #[test]
    fn ioc_needs_two_observers() {
        let params = MapParams::new(2.0).unwrap();
        let gt = fix(10, 10, &[(1.0, 1.0, "a"), (2.0, 2.0, "a")]);
        assert_eq!(ioc(&gt, &params), Err(MetricError::TooFewObservers(1)));
    }

    #[test]
    fn normalized_nss_table_values() {
        assert_eq!(format_percent(normalized_nss(1.27, 1.42).unwrap()), "89%");
        assert_eq!(format_percent(normalized_nss(1.20, 1.33).unwrap()), "90%");
        assert_eq!(format_percent(normalized_nss(2.61, 3.35).unwrap()), "78%");
        assert_eq!(format_percent(normalized_nss(1.3, 1.3).unwrap()), "100%");
        assert_eq!(format_percent(0.125), "13%");
        assert_eq!(format_percent(-0.125), "-13%");
        assert!(normalized_nss(1.0, 0.0).is_err());
    }

    #[test]
    fn splits_cover_all_when_n_pred_is_large() {
        let ps: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        assert_eq!(participant_splits(&ps, 3, 10, 7), vec![ps.clone()]);
        assert_eq!(participant_splits(&ps, 5, 10, 7), vec![ps.clone()]);
        let s = participant_splits(&ps, 2, 10, 7);
        assert_eq!(s.len(), 10);
        assert!(s.iter().all(|x| x.len() == 2));
        assert_eq!(s, participant_splits(&ps, 2, 10, 7));
    }

    fn synthetic_pair(id: &str, shift: f64) -> ImagePair {
        let mut pred = vec![];
        let mut gt = vec![];
        for p in 0..4 {
            for k in 0..5 {
                let x = 10.0 + shift + (p * 3 + k) as f64 % 7.0;
                let y = 8.0 + ((p + k * 2) % 5) as f64;
                pred.push(Point::new(x, y, k as f64, format!("c{p}")));
                gt.push(Point::new(x + 1.0, y - 1.0, k as f64, format!("o{p}")));
            }
        }
        ImagePair {
            image_id: id.into(),
            pred: PointSet::new(40, 20, PointKind::Click, pred).unwrap(),
            gt: PointSet::new(40, 20, PointKind::Fixation, gt).unwrap(),
        }
    }

    #[test]
    fn full_participant_subsetting_matches_single_evaluation() {
        let params = MapParams::new(2.0).unwrap();
        let pair = synthetic_pair("img", 0.0);
        let a = evaluate_image(&pair, &params, SplitSpec { n_pred: 4, n_splits: 10, seed: 1 }).unwrap();
        let b = evaluate_image(&pair, &params, SplitSpec { n_pred: 4, n_splits: 1, seed: 99 }).unwrap();
        assert_eq!(a, b);
        let map = build_map(&pair.pred, &params, None::<&[&str]>).unwrap();
        let gt_map = build_map(&pair.gt, &params, None::<&[&str]>).unwrap();
        assert_eq!(a.cc, cc(&map, &gt_map).unwrap());
        assert_eq!(a.nss, nss(&map, &pair.gt).unwrap());
        assert_eq!(a.normalized_nss, a.nss / a.ioc_nss);
    }

    #[test]
    fn dataset_report_is_mean_and_deterministic() {
        let params = MapParams::new(2.0).unwrap();
        let pairs = vec![synthetic_pair("a", 0.0), synthetic_pair("b", 8.0)];
        let split = SplitSpec { n_pred: 2, n_splits: 10, seed: 42 };
        let r1 = dataset_report(&pairs, &params, split, false).unwrap();
        let r2 = dataset_report(&pairs, &params, split, false).unwrap();
        assert_eq!(r1, r2);
        let mean_cc = (r1.images[0].cc + r1.images[1].cc) / 2.0;
        assert_eq!(r1.aggregate.cc, mean_cc);
        assert_eq!(r1.aggregate.normalized_nss, r1.aggregate.nss / r1.aggregate.ioc_nss);
        let mut a = Vec::new();
        let mut b = Vec::new();
        r1.write_csv(&mut a, &["seed=42".into()]).unwrap();
        r2.write_csv(&mut b, &["seed=42".into()]).unwrap();
        assert_eq!(a, b);
        let text = String::from_utf8(a).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "# seed=42");
        assert_eq!(lines[1], "image_id,n_pred,cc,nss,ioc_nss,normalized_nss");
        assert!(lines[4].starts_with("AGGREGATE,2,"));
    }

    #[test]
    fn dataset_errors_carry_image_ids_and_can_be_skipped() {
        let params = MapParams::new(2.0).unwrap();
        let mut bad = synthetic_pair("broken", 0.0);
        bad.gt = bad.gt.subset(&["o0"]);
        let pairs = vec![synthetic_pair("ok", 0.0), bad];
        let split = SplitSpec { n_pred: 2, n_splits: 3, seed: 1 };
        let err = dataset_report(&pairs, &params, split, false).unwrap_err();
        assert!(err.to_string().starts_with("image broken:"), "{err}");
        let rep = dataset_report(&pairs, &params, split, true).unwrap();
        assert_eq!(rep.images.len(), 1);
        assert_eq!(rep.skipped[0].0, "broken");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn nss_affine_invariant(
                vals in prop::collection::vec(0.0f64..1.0, 30),
                a in 0.01f64..100.0, b in 0.0f64..10.0,
                fx in prop::collection::vec((0.0f64..6.0, 0.0f64..5.0), 1..8),
            ) {
                let m = raw(6, 5, vals.clone());
                prop_assume!(zscore(&m).is_ok());
                let scaled = raw(6, 5, vals.iter().map(|v| a * v + b).collect());
                let f: Vec<(f64, f64, &str)> = fx.iter().map(|&(x, y)| (x, y, "o")).collect();
                let f = fix(6, 5, &f);
                prop_assert!((nss(&m, &f).unwrap() - nss(&scaled, &f).unwrap()).abs() < 1e-9);
            }

            #[test]
            fn cc_affine_invariant(
                va in prop::collection::vec(0.0f64..1.0, 20),
                vb in prop::collection::vec(0.0f64..1.0, 20),
                a in 0.01f64..100.0, b in 0.0f64..10.0,
            ) {
                let ma = raw(5, 4, va.clone());
                let mb = raw(5, 4, vb.clone());
                prop_assume!(zscore(&ma).is_ok() && zscore(&mb).is_ok());
                let sa = raw(5, 4, va.iter().map(|v| a * v + b).collect());
                let r = cc(&ma, &mb).unwrap();
                prop_assert!((r - cc(&sa, &mb).unwrap()).abs() < 1e-9);
                prop_assert!((r - cc(&mb, &sa).unwrap()).abs() < 1e-9);
            }

            #[test]
            fn self_prediction_is_positive(
                fx in prop::collection::vec((0.0f64..40.0, 0.0f64..30.0), 5..40),
            ) {
                let params = MapParams::new(2.0).unwrap();
                let f: Vec<(f64, f64, &str)> = fx.iter().map(|&(x, y)| (x, y, "o")).collect();
                let pts = fix(40, 30, &f);
                let map = build_map(&pts, &params, None::<&[&str]>).unwrap();
                prop_assert!(nss(&map, &pts).unwrap() > 0.0);
            }
        }
    }
}
