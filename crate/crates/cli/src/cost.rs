use bubbleview_core::analysis::{estimate_cost, format_dollars, CostEstimate, CostModel};

use crate::CliError;

pub fn estimate(model: &CostModel) -> Result<CostEstimate, CliError> {
    estimate_cost(model).map_err(|e| CliError::Validation(e.to_string()))
}

fn fmt_seconds(s: f64) -> String {
    if s.fract() == 0.0 {
        format!("{s:.0} s")
    } else {
        format!("{s} s")
    }
}

/// Plain-text table, one row per model.
pub fn render_table(rows: &[(CostModel, CostEstimate)]) -> String {
    let header = ["Time/image", "Images/task", "Cost/task", "Participants", "Cost/image"];
    let body: Vec<[String; 5]> = rows
        .iter()
        .map(|(m, e)| {
            [
                fmt_seconds(m.time_per_image_s),
                m.images_per_task.to_string(),
                format_dollars(e.task_cost),
                format!("{}–{}", m.participants.0, m.participants.1),
                e.per_image_range(),
            ]
        })
        .collect();
    let width = |i: usize| {
        body.iter()
            .map(|r| r[i].chars().count())
            .chain(std::iter::once(header[i].len()))
            .max()
            .unwrap_or(0)
    };
    let widths: Vec<usize> = (0..5).map(width).collect();
    let line = |cells: [&str; 5]| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        padded.join("  ").trim_end().to_string() + "\n"
    };
    let mut out = line(header);
    for r in &body {
        out += &line([&r[0], &r[1], &r[2], &r[3], &r[4]]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_second_row() {
        let m = CostModel::new(10.0, 17, (10, 15));
        let e = estimate(&m).unwrap();
        let table = render_table(&[(m, e)]);
        let row = table.lines().nth(1).unwrap();
        assert!(row.starts_with("10 s"));
        assert!(row.contains("$0.30"));
        assert!(row.ends_with("$0.18–$0.26"));
    }

    #[test]
    fn invalid_model_is_a_validation_error() {
        let m = CostModel::new(0.0, 17, (10, 15));
        assert!(matches!(estimate(&m), Err(CliError::Validation(_))));
    }
}
