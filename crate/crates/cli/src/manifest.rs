use std::path::{Path, PathBuf};

use bubbleview_core::store::FilterPolicy;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Everything an analysis run reads, plus where it writes.
///
/// Relative paths are resolved against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    /// Experiment config (TOML).
    pub config: PathBuf,
    /// Event log written by the service.
    pub log: PathBuf,
    /// Directory of `<image_id>.png` stimuli.
    pub stimuli: PathBuf,
    /// Fixation CSV; without it only click-derived outputs are produced.
    #[serde(default)]
    pub fixations: Option<PathBuf>,
    /// Directory of `<image_id>.toml` element annotations.
    #[serde(default)]
    pub annotations: Option<PathBuf>,
    #[serde(default)]
    pub policy: FilterPolicy,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Map blur in pixels; one degree of visual angle for the viewing setup.
    #[serde(default = "default_map_sigma")]
    pub map_sigma_px: f64,
    /// Participants per click map; all available when absent.
    #[serde(default)]
    pub n_pred: Option<usize>,
    #[serde(default = "default_splits")]
    pub n_splits: usize,
    /// Largest n on the NSS-versus-participants curve; all available when absent.
    #[serde(default)]
    pub curve_max_n: Option<usize>,
    #[serde(default = "default_alpha")]
    pub heatmap_alpha: f64,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn default_map_sigma() -> f64 {
    bubbleview_core::config::MapParams::MASSVIS.map_sigma_px
}

fn default_splits() -> usize {
    10
}

fn default_alpha() -> f64 {
    0.6
}

impl RunManifest {
    pub fn new(config: PathBuf, log: PathBuf, stimuli: PathBuf) -> Self {
        RunManifest {
            config,
            log,
            stimuli,
            fixations: None,
            annotations: None,
            policy: FilterPolicy::default(),
            seed: 0,
            out: default_out(),
            map_sigma_px: default_map_sigma(),
            n_pred: None,
            n_splits: default_splits(),
            curve_max_n: None,
            heatmap_alpha: default_alpha(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut m: RunManifest =
            toml::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        m.resolve(base);
        Ok(m)
    }

    fn resolve(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.config);
        join(&mut self.log);
        join(&mut self.stimuli);
        join(&mut self.out);
        if let Some(p) = &mut self.fixations {
            join(p);
        }
        if let Some(p) = &mut self.annotations {
            join(p);
        }
    }

    /// Checks parameter ranges and that every referenced path exists.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Validation(m));
        if !(self.map_sigma_px > 0.0 && self.map_sigma_px.is_finite()) {
            return bad(format!("map_sigma_px must be positive, got {}", self.map_sigma_px));
        }
        if self.n_splits == 0 {
            return bad("n_splits must be positive".into());
        }
        if self.n_pred == Some(0) || self.curve_max_n == Some(0) {
            return bad("n_pred and curve_max_n must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.heatmap_alpha) {
            return bad(format!("heatmap_alpha must lie in [0, 1], got {}", self.heatmap_alpha));
        }
        if let Some(sd) = self.policy.participant_outlier_sd {
            if !(sd > 0.0) {
                return bad(format!("participant_outlier_sd must be positive, got {sd}"));
            }
        }
        let required = [("config", &self.config), ("log", &self.log), ("stimuli", &self.stimuli)];
        let optional = [("fixations", &self.fixations), ("annotations", &self.annotations)];
        let all = required
            .into_iter()
            .chain(optional.into_iter().filter_map(|(n, p)| p.as_ref().map(|p| (n, p))));
        for (name, p) in all {
            if !p.exists() {
                return Err(CliError::Io(format!("{name} path {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    /// `#` comment lines recorded at the top of every output.
    pub fn preamble(&self) -> Vec<String> {
        vec![
            format!("seed={}", self.seed),
            format!("policy: {}", self.policy.describe()),
            format!(
                "map_sigma_px={} n_splits={} n_pred={}",
                self.map_sigma_px,
                self.n_splits,
                self.n_pred.map_or_else(|| "all".to_string(), |n| n.to_string())
            ),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_paths_resolve_against_manifest_dir() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            "config = \"exp.toml\"\nlog = \"events.jsonl\"\nstimuli = \"img\"\nseed = 5\n[policy]\nmin_clicks_per_image = 1\n",
        )
        .unwrap();
        let m = RunManifest::load(&path).unwrap();
        assert_eq!(m.config, dir.path().join("exp.toml"));
        assert_eq!(m.out, dir.path().join("out"));
        assert_eq!(m.seed, 5);
        assert_eq!(m.policy.min_clicks_per_image, 1);
        assert_eq!(m.policy.participant_outlier_sd, Some(3.0));
        assert!(matches!(m.validate(), Err(CliError::Io(_))));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "config = \"a\"\nlog = \"b\"\nstimuli = \"c\"\nsed = 1\n").unwrap();
        assert!(matches!(RunManifest::load(&path), Err(CliError::Validation(_))));
    }
}
