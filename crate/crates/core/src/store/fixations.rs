//! Eye-fixation CSV import and export.
//!
//! Schema: header `image_id,observer_id,x,y,t_ms`, one fixation per row,
//! coordinates in stimulus pixels.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use super::StoreError;
use crate::maps::{Point, PointKind, PointSet};

const HEADER: [&str; 5] = ["image_id", "observer_id", "x", "y", "t_ms"];

#[derive(Debug, Clone, PartialEq)]
pub struct FixationImport {
    pub dataset_tag: String,
    pub images: BTreeMap<String, PointSet>,
    /// Rows outside their image, dropped with a warning.
    pub dropped_out_of_bounds: usize,
}

/// Parses a fixation CSV. `dims` gives each image's `(width, height)`.
///
/// Malformed rows fail the whole import and are listed by line number.
pub fn import_fixations<R: Read>(
    reader: R,
    dataset_tag: &str,
    dims: &BTreeMap<String, (usize, usize)>,
) -> Result<FixationImport, StoreError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| StoreError::Fixations(format!("unreadable header: {e}")))?
        .clone();
    if header.is_empty() {
        return Err(StoreError::Fixations("empty file".into()));
    }
    if header.iter().collect::<Vec<_>>() != HEADER {
        return Err(StoreError::Fixations(format!(
            "expected header {}, got {}",
            HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }

    let mut rows: BTreeMap<String, Vec<Point>> = BTreeMap::new();
    let mut problems = Vec::new();
    let mut dropped = 0;
    let mut n_rows = 0;
    for rec in rdr.records() {
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                problems.push(format!("line {line}: {e}"));
                continue;
            }
        };
        n_rows += 1;
        let line = rec.position().map_or(0, |p| p.line());
        let num = |i: usize| rec.get(i).and_then(|s| s.parse::<f64>().ok()).filter(|v| v.is_finite());
        let (Some(x), Some(y), Some(t)) = (num(2), num(3), num(4)) else {
            problems.push(format!("line {line}: x, y and t_ms must be numbers"));
            continue;
        };
        let (image_id, observer) = (&rec[0], &rec[1]);
        if image_id.is_empty() || observer.is_empty() {
            problems.push(format!("line {line}: empty image_id or observer_id"));
            continue;
        }
        if t < 0.0 {
            problems.push(format!("line {line}: negative t_ms"));
            continue;
        }
        let Some(&(w, h)) = dims.get(image_id) else {
            problems.push(format!("line {line}: unknown image {image_id:?}"));
            continue;
        };
        if !(x >= 0.0 && y >= 0.0 && x < w as f64 && y < h as f64) {
            dropped += 1;
            continue;
        }
        rows.entry(image_id.to_owned())
            .or_default()
            .push(Point::new(x, y, t, observer));
    }
    if !problems.is_empty() {
        return Err(StoreError::Fixations(problems.join("; ")));
    }
    if n_rows == 0 {
        return Err(StoreError::Fixations("no fixation rows".into()));
    }

    let mut images = BTreeMap::new();
    for (image_id, mut points) in rows {
        points.sort_by(|a, b| a.participant_id.cmp(&b.participant_id).then(a.t_ms.total_cmp(&b.t_ms)));
        let (w, h) = dims[&image_id];
        let set = PointSet::new(w, h, PointKind::Fixation, points).map_err(|e| StoreError::Fixations(e.to_string()))?;
        images.insert(image_id, set);
    }
    Ok(FixationImport {
        dataset_tag: dataset_tag.to_owned(),
        images,
        dropped_out_of_bounds: dropped,
    })
}

/// Writes fixations in canonical order: image, observer, time.
pub fn export_fixations<W: Write>(import: &FixationImport, out: W) -> Result<(), StoreError> {
    let err = |e: csv::Error| StoreError::Fixations(e.to_string());
    let mut w = csv::Writer::from_writer(out);
    w.write_record(HEADER).map_err(err)?;
    for (image_id, set) in &import.images {
        for p in set.points() {
            w.write_record([
                image_id.as_str(),
                p.participant_id.as_str(),
                &p.x.to_string(),
                &p.y.to_string(),
                &p.t_ms.to_string(),
            ])
            .map_err(err)?;
        }
    }
    w.flush().map_err(|e| StoreError::Fixations(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> BTreeMap<String, (usize, usize)> {
        [("img1".to_string(), (100, 50)), ("img2".to_string(), (20, 20))].into_iter().collect()
    }

    #[test]
    fn empty_file_is_an_error() {
        assert!(import_fixations("".as_bytes(), "t", &dims()).is_err());
        assert!(import_fixations("image_id,observer_id,x,y,t_ms\n".as_bytes(), "t", &dims()).is_err());
    }

    #[test]
    fn negative_x_is_dropped_with_warning() {
        let csv = "image_id,observer_id,x,y,t_ms\nimg1,o1,-3,4,0\nimg1,o1,3,4,10\n";
        let imp = import_fixations(csv.as_bytes(), "massvis", &dims()).unwrap();
        assert_eq!(imp.dropped_out_of_bounds, 1);
        assert_eq!(imp.images["img1"].len(), 1);
        assert_eq!(imp.dataset_tag, "massvis");
    }

    #[test]
    fn malformed_rows_report_line_numbers() {
        let csv = "image_id,observer_id,x,y,t_ms\nimg1,o1,3,4,0\nimg1,o1,abc,4,10\nimg9,o1,1,1,1\n";
        let err = import_fixations(csv.as_bytes(), "t", &dims()).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
        assert!(err.contains("line 4"), "{err}");
        let bad_header = "image,observer,x,y,t\nimg1,o1,3,4,0\n";
        assert!(import_fixations(bad_header.as_bytes(), "t", &dims()).is_err());
    }

    #[test]
    fn export_is_canonical_and_idempotent() {
        let csv = "image_id,observer_id,x,y,t_ms\n\
                   img2,b,1.5,2,30\nimg1,o2,3,4,20\nimg1,o1,5,6,10\nimg1,o1,7.25,8,5\n";
        let imp = import_fixations(csv.as_bytes(), "t", &dims()).unwrap();
        let mut out = Vec::new();
        export_fixations(&imp, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(
            text,
            "image_id,observer_id,x,y,t_ms\n\
             img1,o1,7.25,8,5\nimg1,o1,5,6,10\nimg1,o2,3,4,20\nimg2,b,1.5,2,30\n"
        );
        let again = import_fixations(text.as_bytes(), "t", &dims()).unwrap();
        assert_eq!(again, imp);
        let mut out2 = Vec::new();
        export_fixations(&again, &mut out2).unwrap();
        assert_eq!(String::from_utf8(out2).unwrap(), text);
    }
}
