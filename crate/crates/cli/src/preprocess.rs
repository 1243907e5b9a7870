use std::path::{Path, PathBuf};

use bubbleview_core::imaging::BlurCache;
use rayon::prelude::*;

use crate::{comment_block, write_atomic, CliError};

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessEntry {
    pub image_id: String,
    pub source: PathBuf,
    pub blurred: PathBuf,
    pub computed: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PreprocessReport {
    pub entries: Vec<PreprocessEntry>,
    pub failures: Vec<(String, String)>,
}

impl PreprocessReport {
    pub fn computed(&self) -> usize {
        self.entries.iter().filter(|e| e.computed).count()
    }
}

/// `.png` files in `dir`, sorted by image id (the file stem).
pub fn list_stimuli(dir: &Path) -> Result<Vec<(String, PathBuf)>, CliError> {
    let rd = std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        let is_png = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.push((stem.to_owned(), path));
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Blurs every stimulus into the cache and writes `index.csv` there.
/// Unreadable images are reported in `failures`; the rest still run.
pub fn run(stimuli: &Path, cache_dir: &Path, sigma_px: f64) -> Result<PreprocessReport, CliError> {
    if !(sigma_px >= 0.0 && sigma_px.is_finite()) {
        return Err(CliError::Validation(format!("sigma must be finite and >= 0, got {sigma_px}")));
    }
    let cache = BlurCache::new(cache_dir);
    let inputs = list_stimuli(stimuli)?;
    let results: Vec<_> = inputs
        .par_iter()
        .map(|(id, src)| {
            cache
                .get_or_create(id, src, sigma_px)
                .map(|(blurred, computed)| PreprocessEntry {
                    image_id: id.clone(),
                    source: src.clone(),
                    blurred,
                    computed,
                })
                .map_err(|e| (id.clone(), e.to_string()))
        })
        .collect();
    let mut report = PreprocessReport::default();
    for r in results {
        match r {
            Ok(e) => report.entries.push(e),
            Err(f) => {
                tracing::warn!(image = %f.0, error = %f.1, "preprocess failed");
                report.failures.push(f);
            }
        }
    }

    let mut csv = comment_block(&[format!("sigma_px={sigma_px}")]);
    csv += "image_id,source,blurred\n";
    for e in &report.entries {
        csv += &format!("{},{},{}\n", e.image_id, e.source.display(), e.blurred.display());
    }
    write_atomic(&cache_dir.join(index_name(sigma_px)), csv.as_bytes())?;
    Ok(report)
}

fn index_name(sigma_px: f64) -> String {
    format!("index__sigma{}.csv", sigma_px.to_string().replace('.', "p"))
}
