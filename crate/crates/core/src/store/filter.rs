use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{EventKind, EventLog, StoreError};
use crate::config::MouseModality;
use crate::maps::{Point, PointKind, PointSet};
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutOfBoundsPolicy {
    #[default]
    DropClick,
}

/// Which participants' clicks on an image count toward its map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterPolicy {
    pub min_clicks_per_image: u32,
    pub out_of_bounds: OutOfBoundsPolicy,
    /// Drop participants whose click count on the image is further than this
    /// many standard deviations from the mean over all viewers of the image.
    pub participant_outlier_sd: Option<f64>,
}

impl Default for FilterPolicy {
    fn default() -> Self {
        FilterPolicy {
            min_clicks_per_image: 2,
            out_of_bounds: OutOfBoundsPolicy::DropClick,
            participant_outlier_sd: Some(3.0),
        }
    }
}

impl FilterPolicy {
    pub fn permissive() -> Self {
        FilterPolicy {
            min_clicks_per_image: 0,
            out_of_bounds: OutOfBoundsPolicy::DropClick,
            participant_outlier_sd: None,
        }
    }

    pub fn describe(&self) -> String {
        let sd = self
            .participant_outlier_sd
            .map_or_else(|| "none".to_string(), |v| v.to_string());
        format!(
            "min_clicks_per_image={} out_of_bounds=drop_click participant_outlier_sd={sd}",
            self.min_clicks_per_image
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilteredPoints {
    pub points: PointSet,
    pub total_points: usize,
    pub removed_points: usize,
    pub removed_participants: Vec<String>,
}

impl FilteredPoints {
    pub fn removed_fraction(&self) -> f64 {
        if self.total_points == 0 {
            0.0
        } else {
            self.removed_points as f64 / self.total_points as f64
        }
    }
}

impl EventLog {
    /// Clicks (or mouse samples, for move experiments) on one image from every
    /// participant who survives `policy`.
    ///
    /// Points are grouped by participant (sorted) and time, so the result does
    /// not depend on how sessions interleave in the log. The outlier statistics
    /// use every viewer of the image, which keeps the filter monotone in
    /// `min_clicks_per_image`.
    pub fn to_pointset(&self, experiment_id: &str, image_id: &str, policy: &FilterPolicy) -> Result<FilteredPoints, StoreError> {
        let unknown = || StoreError::UnknownImage {
            experiment_id: experiment_id.to_owned(),
            image_id: image_id.to_owned(),
        };
        let cfg = self.catalog.config(experiment_id).ok_or_else(unknown)?;
        let (width, height) = self.catalog.dims(experiment_id, image_id).ok_or_else(unknown)?;
        let (event_kind, point_kind) = match cfg.mouse_modality {
            MouseModality::Click => (EventKind::Click, PointKind::Click),
            MouseModality::Move => (EventKind::MoveSample, PointKind::MoveSample),
        };

        let mut per_participant: BTreeMap<&str, Vec<Point>> = BTreeMap::new();
        let mut seen_image = false;
        for s in self.state.sessions.values().filter(|s| s.session.experiment_id == experiment_id) {
            for e in s.events.iter().filter(|e| e.image_id.as_deref() == Some(image_id)) {
                seen_image = true;
                let entry = per_participant.entry(&e.participant_id).or_default();
                if e.kind != event_kind {
                    continue;
                }
                if let (Some(x), Some(y)) = (e.x, e.y) {
                    if x >= 0.0 && y >= 0.0 && x < width as f64 && y < height as f64 {
                        entry.push(Point::new(x, y, e.t_ms, e.participant_id.clone()));
                    }
                }
            }
        }
        if !seen_image {
            return Err(unknown());
        }

        let counts: Vec<f64> = per_participant.values().map(|v| v.len() as f64).collect();
        let (mean, sd) = stats::mean_std(&counts);
        let total_points: usize = per_participant.values().map(Vec::len).sum();
        let mut kept = Vec::new();
        let mut removed_participants = Vec::new();
        let mut removed_points = 0;
        for (participant, mut points) in per_participant {
            let n = points.len();
            let too_few = (n as u64) < u64::from(policy.min_clicks_per_image);
            let outlier = policy
                .participant_outlier_sd
                .is_some_and(|k| sd > 0.0 && (n as f64 - mean).abs() > k * sd);
            if too_few || outlier {
                removed_participants.push(participant.to_owned());
                removed_points += n;
            } else {
                points.sort_by(|a, b| a.t_ms.total_cmp(&b.t_ms));
                kept.extend(points);
            }
        }
        if kept.is_empty() {
            return Err(StoreError::EmptyPointSet);
        }
        let points = PointSet::new(width, height, point_kind, kept).map_err(|e| StoreError::Corrupt {
            path: self.path.display().to_string(),
            line: 0,
            message: e.to_string(),
        })?;
        Ok(FilteredPoints {
            points,
            total_points,
            removed_points,
            removed_participants,
        })
    }
}
