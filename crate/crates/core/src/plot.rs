//! SVG training curves.

use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::trainer::TrainHistory;

const COLORS: [RGBColor; 4] = [RGBColor(31, 119, 180), RGBColor(214, 39, 40), RGBColor(44, 160, 44), RGBColor(148, 103, 189)];

fn line_chart(path: &Path, title: &str, y_label: &str, series: &[(&str, Vec<f64>)]) -> Result<()> {
    let n = series.iter().map(|(_, v)| v.len()).max().unwrap_or(0);
    let values = series.iter().flat_map(|(_, v)| v.iter().copied()).filter(|v| v.is_finite());
    let (mut lo, mut hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-3);
    let err = |e: String| Error::Format(format!("plot {}: {e}", path.display()));

    let root = SVGBackend::new(path, (640, 400)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(e.to_string()))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(0f64..(n.max(2) - 1) as f64, (lo - pad)..(hi + pad))
        .map_err(|e| err(e.to_string()))?;
    chart
        .configure_mesh()
        .x_desc("epoch")
        .y_desc(y_label)
        .draw()
        .map_err(|e| err(e.to_string()))?;
    for (i, (name, v)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        chart
            .draw_series(LineSeries::new(v.iter().enumerate().map(|(x, &y)| (x as f64, y)), color.stroke_width(2)))
            .map_err(|e| err(e.to_string()))?
            .label(*name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| err(e.to_string()))?;
    root.present().map_err(|e| err(e.to_string()))?;
    Ok(())
}

/// Writes `loss.svg`, `miou.svg` and `f_epoch.svg` into `dir`.
pub fn write_training_plots(history: &TrainHistory, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let loss = dir.join("loss.svg");
    line_chart(
        &loss,
        "Training losses",
        "loss",
        &[
            ("L_seg", history.column(|r| r.l_seg)),
            ("L_RL", history.column(|r| r.l_rl)),
            ("L_total", history.column(|r| r.l_total)),
        ],
    )?;
    let miou = dir.join("miou.svg");
    line_chart(
        &miou,
        "Validation",
        "score",
        &[("mIoU", history.column(|r| r.val_miou)), ("Dice", history.column(|r| r.val_dice))],
    )?;
    let f = dir.join("f_epoch.svg");
    line_chart(&f, "Curriculum factor", "f_epoch", &[("f_epoch", history.column(|r| r.f_epoch))])?;
    Ok(vec![loss, miou, f])
}
