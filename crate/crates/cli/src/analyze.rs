use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use bubbleview_core::analysis::{
    aggregate_element_scores, center_bias_profile, element_importance, fit_power, load_annotations,
    rank_correlation, ElementScore, FitOptions, PowerFit,
};
use bubbleview_core::config::{ExperimentConfig, MapParams};
use bubbleview_core::imaging::{render_heatmap, Image};
use bubbleview_core::maps::{build_map, AttentionMap, PointSet};
use bubbleview_core::metrics::{convergence_curve, dataset_report, CurvePoint, DatasetReport, ImagePair, SplitSpec};
use bubbleview_core::store::{import_fixations, Catalog, EventLog, FilteredPoints, StoreError};
use rayon::prelude::*;

use crate::serve::load_config;
use crate::{comment_block, write_atomic, CliError, RunManifest};

/// What a run produced.
#[derive(Debug, Clone, Default)]
pub struct AnalyzeSummary {
    pub written: Vec<PathBuf>,
    pub warnings: Vec<String>,
    /// Per-image failures; outputs for the other images were still written.
    pub failures: Vec<String>,
    pub metrics: Option<DatasetReport>,
    pub power_fit: Option<PowerFit>,
}

impl AnalyzeSummary {
    fn warn(&mut self, msg: String) {
        tracing::warn!("{msg}");
        self.warnings.push(msg);
    }
}

/// Inputs shared by `analyze` and `export-heatmaps`.
pub struct Loaded {
    pub config: ExperimentConfig,
    pub stimuli: BTreeMap<String, Image>,
    pub clicks: BTreeMap<String, FilteredPoints>,
    pub click_errors: Vec<(String, String)>,
    pub fixations: Option<BTreeMap<String, PointSet>>,
}

pub fn load_inputs(m: &RunManifest) -> Result<Loaded, CliError> {
    m.validate()?;
    let config = load_config(&m.config)?;
    let stimuli = config
        .image_ids
        .par_iter()
        .map(|id| {
            let path = m.stimuli.join(format!("{id}.png"));
            Image::load(&path).map(|img| (id.clone(), img)).map_err(|e| CliError::io(&path, e))
        })
        .collect::<Result<BTreeMap<_, _>, _>>()?;
    let dims: BTreeMap<String, (usize, usize)> = stimuli
        .iter()
        .map(|(id, img)| (id.clone(), (img.width(), img.height())))
        .collect();

    let mut catalog = Catalog::new();
    catalog.insert(config.clone(), dims.clone());
    let log = EventLog::open(&m.log, catalog).map_err(|e| match e {
        StoreError::Io { .. } => CliError::Io(e.to_string()),
        other => CliError::Validation(other.to_string()),
    })?;

    let mut clicks = BTreeMap::new();
    let mut click_errors = Vec::new();
    for id in &config.image_ids {
        match log.to_pointset(&config.experiment_id, id, &m.policy) {
            Ok(f) => {
                clicks.insert(id.clone(), f);
            }
            Err(e) => click_errors.push((id.clone(), e.to_string())),
        }
    }

    let fixations = match &m.fixations {
        None => None,
        Some(path) => {
            let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
            let imported = import_fixations(file, "fixations", &dims)
                .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
            if imported.dropped_out_of_bounds > 0 {
                tracing::warn!(dropped = imported.dropped_out_of_bounds, "fixations outside their image");
            }
            Some(imported.images)
        }
    };
    Ok(Loaded {
        config,
        stimuli,
        clicks,
        click_errors,
        fixations,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

/// Runs the whole pipeline and writes every output under `m.out`.
///
/// Returns `CliError::Partial` (after writing) when some images failed.
pub fn run(m: &RunManifest) -> Result<AnalyzeSummary, CliError> {
    let inputs = load_inputs(m)?;
    let mut summary = AnalyzeSummary::default();
    let params = MapParams::new(m.map_sigma_px).map_err(|e| CliError::Validation(e.to_string()))?;
    let preamble = m.preamble();
    let out = &m.out;
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;

    for (id, e) in &inputs.click_errors {
        summary.warn(format!("no click map for {id}: {e}"));
    }

    let click_maps = maps_for(
        inputs.clicks.iter().map(|(id, f)| (id.as_str(), &f.points)),
        &params,
        &mut summary,
        "click",
    );
    let fixation_maps = inputs.fixations.as_ref().map(|fx| {
        maps_for(
            fx.iter().map(|(id, p)| (id.as_str(), p)),
            &params,
            &mut summary,
            "fixation",
        )
    });

    write_filtering(m, &inputs, &preamble, &mut summary)?;
    write_heatmaps(m, &inputs.stimuli, &click_maps, fixation_maps.as_ref(), &preamble, &mut summary)?;

    match &inputs.fixations {
        Some(fixations) => {
            let pairs: Vec<ImagePair> = inputs
                .clicks
                .iter()
                .filter(|(id, _)| click_maps.contains_key(*id))
                .filter_map(|(id, f)| {
                    fixations.get(id).map(|gt| ImagePair {
                        image_id: id.clone(),
                        pred: f.points.clone(),
                        gt: gt.clone(),
                    })
                })
                .collect();
            write_metrics(m, &pairs, &params, &preamble, &mut summary)?;
            write_power_fit(m, &pairs, &params, &preamble, &mut summary)?;
        }
        None => {
            let mut text = comment_block(&preamble);
            text += "# metrics unavailable: no fixation data\n";
            let path = out.join("metrics.csv");
            write_atomic(&path, text.as_bytes())?;
            summary.written.push(path);
            summary.warn("no fixations given; metrics and power fit skipped".into());
        }
    }

    if let Some(dir) = &m.annotations {
        write_elements(m, dir, &click_maps, fixation_maps.as_ref(), &preamble, &mut summary)?;
    }
    write_center_bias(out, &click_maps, fixation_maps.as_ref(), &preamble, &mut summary)?;

    let manifest_copy = out.join("manifest.toml");
    let text = toml::to_string(m).map_err(|e| CliError::Validation(e.to_string()))?;
    write_atomic(&manifest_copy, text.as_bytes())?;
    summary.written.push(manifest_copy);

    if summary.failures.is_empty() {
        Ok(summary)
    } else {
        Err(CliError::Partial(summary.failures.clone()))
    }
}

fn maps_for<'a>(
    sets: impl Iterator<Item = (&'a str, &'a PointSet)>,
    params: &MapParams,
    summary: &mut AnalyzeSummary,
    what: &str,
) -> BTreeMap<String, AttentionMap> {
    let sets: Vec<_> = sets.collect();
    let built: Vec<_> = sets.par_iter().map(|(id, p)| (*id, build_map(p, params, None::<&[&str]>))).collect();
    let mut maps = BTreeMap::new();
    for (id, r) in built {
        match r {
            Ok(map) => {
                maps.insert(id.to_owned(), map);
            }
            Err(e) => summary.warn(format!("no {what} map for {id}: {e}")),
        }
    }
    maps
}

fn write_filtering(
    m: &RunManifest,
    inputs: &Loaded,
    preamble: &[String],
    summary: &mut AnalyzeSummary,
) -> Result<(), CliError> {
    let mut text = comment_block(preamble);
    text += "image_id,total_points,removed_points,removed_fraction,kept_participants,removed_participants\n";
    let (mut total, mut removed) = (0usize, 0usize);
    for (id, f) in &inputs.clicks {
        total += f.total_points;
        removed += f.removed_points;
        let _ = writeln!(
            text,
            "{id},{},{},{},{},{}",
            f.total_points,
            f.removed_points,
            f.removed_fraction(),
            f.points.participants().len(),
            f.removed_participants.join(";"),
        );
    }
    let frac = if total == 0 { 0.0 } else { removed as f64 / total as f64 };
    let _ = writeln!(text, "ALL,{total},{removed},{frac},,");
    let path = m.out.join("filtering.csv");
    write_atomic(&path, text.as_bytes())?;
    summary.written.push(path);
    Ok(())
}

fn write_heatmaps(
    m: &RunManifest,
    stimuli: &BTreeMap<String, Image>,
    click_maps: &BTreeMap<String, AttentionMap>,
    fixation_maps: Option<&BTreeMap<String, AttentionMap>>,
    preamble: &[String],
    summary: &mut AnalyzeSummary,
) -> Result<(), CliError> {
    let dir = m.out.join("heatmaps");
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let mut jobs: Vec<(String, &str, &AttentionMap)> = click_maps.iter().map(|(id, map)| (id.clone(), "clicks", map)).collect();
    if let Some(fx) = fixation_maps {
        jobs.extend(fx.iter().map(|(id, map)| (id.clone(), "fixations", map)));
    }
    let results: Vec<Result<PathBuf, String>> = jobs
        .par_iter()
        .map(|(id, kind, map)| {
            let base = stimuli.get(id).ok_or_else(|| format!("{id}: no stimulus"))?;
            let img = render_heatmap(map, base, m.heatmap_alpha).map_err(|e| format!("{id}: {e}"))?;
            let path = dir.join(format!("{id}__{kind}.png"));
            img.save_png(&path).map_err(|e| format!("{id}: {e}"))?;
            Ok(path)
        })
        .collect();
    let mut index = comment_block(preamble);
    index += &format!("# heatmap_alpha={}\n", m.heatmap_alpha);
    index += "image_id,source,file\n";
    for ((id, kind, _), r) in jobs.iter().zip(results) {
        match r {
            Ok(path) => {
                let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                let _ = writeln!(index, "{id},{kind},{name}");
                summary.written.push(path);
            }
            Err(e) => summary.failures.push(format!("heatmap {e}")),
        }
    }
    let path = dir.join("index.csv");
    write_atomic(&path, index.as_bytes())?;
    summary.written.push(path);
    Ok(())
}

fn effective_n_pred(m: &RunManifest, pairs: &[ImagePair], summary: &mut AnalyzeSummary) -> usize {
    let available = pairs.iter().map(|p| p.pred.participants().len()).max().unwrap_or(0);
    match m.n_pred {
        Some(n) if n > available => {
            summary.warn(format!("n_pred {n} exceeds the {available} participants available; capped"));
            available
        }
        Some(n) => {
            if let Some(p) = pairs.iter().find(|p| p.pred.participants().len() < n) {
                summary.warn(format!(
                    "image {} has fewer than n_pred={n} participants; all of its participants are used",
                    p.image_id
                ));
            }
            n
        }
        None => available,
    }
}

fn write_metrics(
    m: &RunManifest,
    pairs: &[ImagePair],
    params: &MapParams,
    preamble: &[String],
    summary: &mut AnalyzeSummary,
) -> Result<(), CliError> {
    let path = m.out.join("metrics.csv");
    if pairs.is_empty() {
        let text = comment_block(preamble) + "# metrics unavailable: no image has both clicks and fixations\n";
        write_atomic(&path, text.as_bytes())?;
        summary.written.push(path);
        summary.warn("no image has both clicks and fixations".into());
        return Ok(());
    }
    let split = SplitSpec {
        n_pred: effective_n_pred(m, pairs, summary).max(1),
        n_splits: m.n_splits,
        seed: m.seed,
    };
    match dataset_report(pairs, params, split, true) {
        Ok(report) => {
            for (id, e) in &report.skipped {
                summary.failures.push(format!("metrics {id}: {e}"));
            }
            let mut buf = Vec::new();
            report
                .write_csv(&mut buf, preamble)
                .map_err(|e| CliError::Io(e.to_string()))?;
            write_atomic(&path, &buf)?;
            summary.written.push(path);
            summary.metrics = Some(report);
        }
        Err(e) => {
            let text = comment_block(preamble) + &format!("# metrics unavailable: {e}\n");
            write_atomic(&path, text.as_bytes())?;
            summary.written.push(path);
            summary.failures.push(format!("metrics: {e}"));
        }
    }
    Ok(())
}

fn write_power_fit(
    m: &RunManifest,
    pairs: &[ImagePair],
    params: &MapParams,
    preamble: &[String],
    summary: &mut AnalyzeSummary,
) -> Result<(), CliError> {
    let path = m.out.join("power_fit.csv");
    let available = pairs.iter().map(|p| p.pred.participants().len()).max().unwrap_or(0);
    let max_n = m.curve_max_n.map_or(available, |n| n.min(available));
    let curve: Vec<CurvePoint> = if pairs.is_empty() {
        Vec::new()
    } else {
        convergence_curve(pairs, params, max_n, m.n_splits, m.seed).unwrap_or_else(|e| {
            summary.failures.push(format!("convergence curve: {e}"));
            Vec::new()
        })
    };
    let samples: Vec<(u32, f64)> = curve.iter().map(|p| (p.n as u32, p.nss)).collect();
    let opts = FitOptions {
        seed: m.seed,
        ..FitOptions::default()
    };
    let fit = match fit_power(&samples, &opts) {
        Ok(f) => Some(f),
        Err(e) => {
            summary.warn(format!("power fit unavailable: {e}"));
            None
        }
    };
    let mut lines = preamble.to_vec();
    match &fit {
        Some(f) => {
            lines.push(format!("fit nss(n) = a*n^b + c: a={} b={} c={} rss={}", f.a, f.b, f.c, f.rss));
            lines.push(format!("c_ci95=[{}, {}] ({f})", f.c_ci95.0, f.c_ci95.1));
        }
        None => lines.push("fit unavailable".into()),
    }
    let mut text = comment_block(&lines);
    text += "n,images,cc,nss,nss_fit\n";
    for p in &curve {
        let predicted = fit.map(|f| f.predict(p.n as f64));
        let _ = writeln!(text, "{},{},{},{},{}", p.n, p.images, p.cc, p.nss, fmt_opt(predicted));
    }
    write_atomic(&path, text.as_bytes())?;
    summary.written.push(path);
    summary.power_fit = fit;
    Ok(())
}

fn write_elements(
    m: &RunManifest,
    dir: &Path,
    click_maps: &BTreeMap<String, AttentionMap>,
    fixation_maps: Option<&BTreeMap<String, AttentionMap>>,
    preamble: &[String],
    summary: &mut AnalyzeSummary,
) -> Result<(), CliError> {
    let mut rows = comment_block(preamble);
    rows += "image_id,element_id,label,click_score,fixation_score\n";
    let mut corr = comment_block(preamble);
    corr += "image_id,elements,pearson,spearman\n";
    let mut click_labels: Vec<(String, f64)> = Vec::new();
    let mut fix_labels: Vec<(String, f64)> = Vec::new();

    for (id, map) in click_maps {
        let path = dir.join(format!("{id}.toml"));
        if !path.is_file() {
            continue;
        }
        let elements = match load_annotations(&path) {
            Ok(e) => e,
            Err(e) => {
                summary.failures.push(format!("annotations {id}: {e}"));
                continue;
            }
        };
        let clicks = match element_importance(map, &elements) {
            Ok(s) => s,
            Err(e) => {
                summary.failures.push(format!("element scores {id}: {e}"));
                continue;
            }
        };
        let fixations: Option<Vec<ElementScore>> = fixation_maps
            .and_then(|fx| fx.get(id))
            .and_then(|fm| match element_importance(fm, &elements) {
                Ok(s) => Some(s),
                Err(e) => {
                    summary.failures.push(format!("fixation element scores {id}: {e}"));
                    None
                }
            });
        for (i, s) in clicks.iter().enumerate() {
            let fx = fixations.as_ref().map(|f| f[i].score);
            let _ = writeln!(rows, "{id},{},{},{},{}", s.element_id, s.label, s.score, fmt_opt(fx));
            click_labels.push((s.label.clone(), s.score));
            if let Some(v) = fx {
                fix_labels.push((s.label.clone(), v));
            }
        }
        if let Some(fx) = &fixations {
            let a: Vec<f64> = clicks.iter().map(|s| s.score).collect();
            let b: Vec<f64> = fx.iter().map(|s| s.score).collect();
            match rank_correlation(&a, &b) {
                Ok(r) => {
                    let _ = writeln!(corr, "{id},{},{},{}", a.len(), r.pearson, r.spearman);
                }
                Err(e) => {
                    let _ = writeln!(corr, "{id},{},,", a.len());
                    summary.warn(format!("element correlation for {id} undefined: {e}"));
                }
            }
        }
    }

    let elements_path = m.out.join("element_importance.csv");
    write_atomic(&elements_path, rows.as_bytes())?;
    summary.written.push(elements_path);

    let mut labels = comment_block(preamble);
    labels += "label,click_score,fixation_score\n";
    if !click_labels.is_empty() {
        let clicks = aggregate_element_scores(&click_labels).map_err(|e| CliError::Validation(e.to_string()))?;
        let fixes: BTreeMap<String, f64> = if fix_labels.is_empty() {
            BTreeMap::new()
        } else {
            aggregate_element_scores(&fix_labels)
                .map_err(|e| CliError::Validation(e.to_string()))?
                .into_iter()
                .collect()
        };
        let mut ordered = clicks;
        ordered.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        for (label, score) in ordered {
            let _ = writeln!(labels, "{label},{score},{}", fmt_opt(fixes.get(&label).copied()));
        }
    }
    let labels_path = m.out.join("element_labels.csv");
    write_atomic(&labels_path, labels.as_bytes())?;
    summary.written.push(labels_path);

    if fixation_maps.is_some() {
        let corr_path = m.out.join("element_correlation.csv");
        write_atomic(&corr_path, corr.as_bytes())?;
        summary.written.push(corr_path);
    }
    Ok(())
}

/// Maps sharing the most common size (ties broken by the smaller size).
fn common_size(maps: &BTreeMap<String, AttentionMap>) -> Vec<AttentionMap> {
    let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for map in maps.values() {
        *counts.entry((map.width(), map.height())).or_default() += 1;
    }
    let Some((&dims, _)) = counts.iter().max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0))) else {
        return Vec::new();
    };
    maps.values()
        .filter(|m| (m.width(), m.height()) == dims)
        .cloned()
        .collect()
}

fn write_center_bias(
    out: &Path,
    click_maps: &BTreeMap<String, AttentionMap>,
    fixation_maps: Option<&BTreeMap<String, AttentionMap>>,
    preamble: &[String],
    summary: &mut AnalyzeSummary,
) -> Result<(), CliError> {
    let clicks = common_size(click_maps);
    if clicks.is_empty() {
        summary.warn("center-bias profile skipped: no click maps".into());
        return Ok(());
    }
    if clicks.len() < click_maps.len() {
        summary.warn(format!(
            "center-bias profile uses the {} of {} images sharing the most common size",
            clicks.len(),
            click_maps.len()
        ));
    }
    let (w, h) = (clicks[0].width(), clicks[0].height());
    let click_profile = center_bias_profile(&clicks).map_err(|e| CliError::Validation(e.to_string()))?;
    let fix_profile = fixation_maps.and_then(|fx| {
        let same: Vec<AttentionMap> = fx
            .values()
            .filter(|m| (m.width(), m.height()) == (w, h))
            .cloned()
            .collect();
        center_bias_profile(&same).ok()
    });
    let mut lines = preamble.to_vec();
    lines.push(format!("maps={} size={w}x{h}", clicks.len()));
    let mut text = comment_block(&lines);
    text += "column,x_normalized,clicks,fixations\n";
    for (x, c) in click_profile.iter().enumerate() {
        let xn = if w > 1 { x as f64 / (w - 1) as f64 } else { 0.0 };
        let fx = fix_profile.as_ref().map(|p| p[x]);
        let _ = writeln!(text, "{x},{xn},{c},{}", fmt_opt(fx));
    }
    let path = out.join("center_bias.csv");
    write_atomic(&path, text.as_bytes())?;
    summary.written.push(path);
    Ok(())
}

/// Writes click (and fixation) heatmaps only.
pub fn export_heatmaps(m: &RunManifest) -> Result<AnalyzeSummary, CliError> {
    let inputs = load_inputs(m)?;
    let params = MapParams::new(m.map_sigma_px).map_err(|e| CliError::Validation(e.to_string()))?;
    let mut summary = AnalyzeSummary::default();
    for (id, e) in &inputs.click_errors {
        summary.warn(format!("no click map for {id}: {e}"));
    }
    let click_maps = maps_for(
        inputs.clicks.iter().map(|(id, f)| (id.as_str(), &f.points)),
        &params,
        &mut summary,
        "click",
    );
    let fixation_maps = inputs.fixations.as_ref().map(|fx| {
        maps_for(
            fx.iter().map(|(id, p)| (id.as_str(), p)),
            &params,
            &mut summary,
            "fixation",
        )
    });
    write_heatmaps(m, &inputs.stimuli, &click_maps, fixation_maps.as_ref(), &m.preamble(), &mut summary)?;
    if summary.failures.is_empty() {
        Ok(summary)
    } else {
        Err(CliError::Partial(summary.failures.clone()))
    }
}
