//! Experiment parameter schemas and visual-angle conversions.
//!
//! Stimulus parameters (blur sigma, bubble radius) are always expressed in
//! image pixels. Crowdsourced viewers have unknown screen geometry, so
//! [`ViewingGeometry`] is only used to derive map sigmas for lab datasets.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskType {
    FreeView,
    Describe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MouseModality {
    Click,
    Move,
}

/// Time allowed per image.
///
/// Serialized as a number of seconds or the string `"unlimited"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TimeLimit {
    Seconds(f64),
    Unlimited,
}

impl TimeLimit {
    pub fn seconds(&self) -> Option<f64> {
        match self {
            TimeLimit::Seconds(s) => Some(*s),
            TimeLimit::Unlimited => None,
        }
    }
}

impl Serialize for TimeLimit {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            TimeLimit::Seconds(v) => s.serialize_f64(*v),
            TimeLimit::Unlimited => s.serialize_str("unlimited"),
        }
    }
}

impl<'de> Deserialize<'de> for TimeLimit {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Int(i64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(TimeLimit::Seconds(v)),
            Repr::Int(v) => Ok(TimeLimit::Seconds(v as f64)),
            Repr::Text(t) if t == "unlimited" => Ok(TimeLimit::Unlimited),
            Repr::Text(t) => Err(serde::de::Error::custom(format!(
                "expected seconds or \"unlimited\", got {t:?}"
            ))),
        }
    }
}

impl fmt::Display for TimeLimit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TimeLimit::Seconds(s) => write!(f, "{s} s"),
            TimeLimit::Unlimited => f.write_str("unlimited"),
        }
    }
}

pub const DEFAULT_MIN_DESCRIPTION_CHARS: u32 = 150;
pub const DEFAULT_MOVE_SAMPLE_HZ: u32 = 100;

/// One experiment's parameter set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "RawExperimentConfig")]
pub struct ExperimentConfig {
    pub experiment_id: String,
    pub task_type: TaskType,
    pub blur_sigma_px: f64,
    pub bubble_radius_px: f64,
    pub time_limit_s: TimeLimit,
    pub mouse_modality: MouseModality,
    /// Minimum description length, counted in UTF-16 code units.
    pub min_description_chars: u32,
    pub images_per_session: u32,
    pub image_ids: Vec<String>,
    pub move_sample_hz: u32,
    pub qualification_note: String,
}

// `min_description_chars` defaults depend on the task type, so the file form
// goes through this mirror.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawExperimentConfig {
    experiment_id: String,
    task_type: TaskType,
    blur_sigma_px: f64,
    bubble_radius_px: f64,
    time_limit_s: TimeLimit,
    mouse_modality: MouseModality,
    #[serde(default)]
    min_description_chars: Option<u32>,
    images_per_session: u32,
    image_ids: Vec<String>,
    #[serde(default)]
    move_sample_hz: Option<u32>,
    #[serde(default)]
    qualification_note: String,
}

impl From<RawExperimentConfig> for ExperimentConfig {
    fn from(raw: RawExperimentConfig) -> Self {
        let min_description_chars = raw.min_description_chars.unwrap_or(match raw.task_type {
            TaskType::Describe => DEFAULT_MIN_DESCRIPTION_CHARS,
            TaskType::FreeView => 0,
        });
        ExperimentConfig {
            experiment_id: raw.experiment_id,
            task_type: raw.task_type,
            blur_sigma_px: raw.blur_sigma_px,
            bubble_radius_px: raw.bubble_radius_px,
            time_limit_s: raw.time_limit_s,
            mouse_modality: raw.mouse_modality,
            min_description_chars,
            images_per_session: raw.images_per_session,
            image_ids: raw.image_ids,
            move_sample_hz: raw.move_sample_hz.unwrap_or(DEFAULT_MOVE_SAMPLE_HZ),
            qualification_note: raw.qualification_note,
        }
    }
}

/// A single violated invariant of an [`ExperimentConfig`].
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigViolation {
    #[error("experiment_id must not be empty")]
    EmptyExperimentId,
    #[error("free_view requires finite time")]
    FreeViewUnlimitedTime,
    #[error("time_limit_s must be positive and finite")]
    NonPositiveTime,
    #[error("describe requires min_description_chars >= 1")]
    DescribeWithoutMinimum,
    #[error("min_description_chars must be 0 unless task_type is describe")]
    DescriptionMinimumOnFreeView,
    #[error("blur_sigma_px must be positive")]
    NonPositiveBlurSigma,
    #[error("bubble_radius_px must be positive")]
    NonPositiveBubbleRadius,
    #[error("images_per_session must be positive")]
    ZeroImagesPerSession,
    #[error("images_per_session ({per_session}) exceeds the number of image_ids ({available})")]
    TooFewImages { per_session: u32, available: usize },
    #[error("image id {0:?} is listed more than once")]
    DuplicateImage(String),
    #[error("move_sample_hz must be positive")]
    ZeroSampleRate,
}

/// Every violation found by [`validate_config`].
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid experiment config: {}", join_violations(.0))]
pub struct ConfigErrors(pub Vec<ConfigViolation>);

fn join_violations(v: &[ConfigViolation]) -> String {
    v.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{field} must be strictly positive, got {value}")]
    NonPositive { field: &'static str, value: f64 },
    #[error(transparent)]
    Invalid(#[from] ConfigErrors),
    #[error("failed to parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("failed to serialize config: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Returns `cfg` unchanged iff every invariant holds.
pub fn validate_config(cfg: ExperimentConfig) -> Result<ExperimentConfig, ConfigErrors> {
    let mut errs = Vec::new();
    if cfg.experiment_id.trim().is_empty() {
        errs.push(ConfigViolation::EmptyExperimentId);
    }
    match (cfg.task_type, cfg.time_limit_s) {
        (TaskType::FreeView, TimeLimit::Unlimited) => errs.push(ConfigViolation::FreeViewUnlimitedTime),
        (_, TimeLimit::Seconds(s)) if !(s > 0.0 && s.is_finite()) => {
            errs.push(ConfigViolation::NonPositiveTime)
        }
        _ => {}
    }
    match cfg.task_type {
        TaskType::Describe if cfg.min_description_chars == 0 => {
            errs.push(ConfigViolation::DescribeWithoutMinimum)
        }
        TaskType::FreeView if cfg.min_description_chars != 0 => {
            errs.push(ConfigViolation::DescriptionMinimumOnFreeView)
        }
        _ => {}
    }
    if !(cfg.blur_sigma_px > 0.0 && cfg.blur_sigma_px.is_finite()) {
        errs.push(ConfigViolation::NonPositiveBlurSigma);
    }
    if !(cfg.bubble_radius_px > 0.0 && cfg.bubble_radius_px.is_finite()) {
        errs.push(ConfigViolation::NonPositiveBubbleRadius);
    }
    if cfg.images_per_session == 0 {
        errs.push(ConfigViolation::ZeroImagesPerSession);
    } else if cfg.images_per_session as usize > cfg.image_ids.len() {
        errs.push(ConfigViolation::TooFewImages {
            per_session: cfg.images_per_session,
            available: cfg.image_ids.len(),
        });
    }
    let mut seen = std::collections::HashSet::new();
    for id in &cfg.image_ids {
        if !seen.insert(id.as_str()) {
            errs.push(ConfigViolation::DuplicateImage(id.clone()));
        }
    }
    if cfg.move_sample_hz == 0 {
        errs.push(ConfigViolation::ZeroSampleRate);
    }
    if errs.is_empty() {
        Ok(cfg)
    } else {
        Err(ConfigErrors(errs))
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(s)?;
        Ok(validate_config(cfg)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string(self)?)
    }

    pub fn time_limit_seconds(&self) -> Option<f64> {
        self.time_limit_s.seconds()
    }
}

/// Physical viewing setup used to convert between pixels and degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewingGeometry {
    pub viewer_distance_cm: f64,
    pub screen_width_cm: f64,
    pub screen_width_px: u32,
}

impl ViewingGeometry {
    fn validate(&self) -> Result<(), ConfigError> {
        let fields = [
            ("viewer_distance_cm", self.viewer_distance_cm),
            ("screen_width_cm", self.screen_width_cm),
            ("screen_width_px", f64::from(self.screen_width_px)),
        ];
        for (field, value) in fields {
            if !(value > 0.0 && value.is_finite()) {
                return Err(ConfigError::NonPositive { field, value });
            }
        }
        Ok(())
    }
}

/// Pixels subtended by one degree of visual angle at the screen center.
pub fn pixels_per_degree(geom: &ViewingGeometry) -> Result<f64, ConfigError> {
    geom.validate()?;
    let cm_per_degree = 2.0 * geom.viewer_distance_cm * 0.5f64.to_radians().tan();
    let px_per_cm = f64::from(geom.screen_width_px) / geom.screen_width_cm;
    Ok(cm_per_degree * px_per_cm)
}

/// Sigma of the Gaussian used to render point sets into maps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapParams {
    pub map_sigma_px: f64,
}

impl MapParams {
    /// Map sigma used for the OSIE natural-image dataset.
    pub const OSIE: MapParams = MapParams { map_sigma_px: 10.0 };
    /// Map sigma used for the MASSVIS and FiWI datasets.
    pub const MASSVIS: MapParams = MapParams { map_sigma_px: 25.0 };

    pub fn new(map_sigma_px: f64) -> Result<Self, ConfigError> {
        if !(map_sigma_px > 0.0 && map_sigma_px.is_finite()) {
            return Err(ConfigError::NonPositive {
                field: "map_sigma_px",
                value: map_sigma_px,
            });
        }
        Ok(MapParams { map_sigma_px })
    }

    /// One degree of visual angle for the given setup. Never applied implicitly.
    pub fn one_degree(geom: &ViewingGeometry) -> Result<Self, ConfigError> {
        Self::new(pixels_per_degree(geom)?)
    }
}
