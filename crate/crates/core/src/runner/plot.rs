//! SVG curves of a metrics file.

use std::path::Path;

use plotters::prelude::*;

use crate::error::{Error, Result};

/// Columns of a metrics CSV keyed by header name.
pub struct Table {
    pub header: Vec<String>,
    pub columns: Vec<Vec<f64>>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Table> {
        let mut rdr = csv::Reader::from_path(path)?;
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let mut columns = vec![Vec::new(); header.len()];
        for rec in rdr.records() {
            let rec = rec?;
            for (c, v) in columns.iter_mut().zip(rec.iter()) {
                c.push(v.parse::<f64>().unwrap_or(f64::NAN));
            }
        }
        Ok(Table { header, columns })
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.header.iter().position(|h| h == name).map(|i| self.columns[i].as_slice())
    }
}

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Degenerate(format!("plotting failed: {e}"))
}

/// One log-scale panel per x axis (`time`, `rescaled_time`) with every
/// remaining column that has positive finite values.
pub fn plot_metrics(metrics: &Path, out_dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let table = Table::read(metrics)?;
    let series: Vec<&str> = table
        .header
        .iter()
        .map(String::as_str)
        .filter(|h| !matches!(*h, "iter" | "time" | "rescaled_time"))
        .collect();
    let mut written = Vec::new();
    for axis in ["time", "rescaled_time"] {
        let Some(xs) = table.column(axis) else { continue };
        let path = out_dir.join(format!("metrics_{axis}.svg"));
        draw(&table, xs, axis, &series, &path)?;
        written.push(path);
    }
    Ok(written)
}

fn draw(table: &Table, xs: &[f64], axis: &str, series: &[&str], path: &Path) -> Result<()> {
    let curves: Vec<(&str, Vec<(f64, f64)>)> = series
        .iter()
        .filter_map(|name| {
            let ys = table.column(name)?;
            let pts: Vec<(f64, f64)> =
                xs.iter().zip(ys).filter(|(x, y)| x.is_finite() && y.is_finite() && **y > 0.0).map(|(x, y)| (*x, *y)).collect();
            (!pts.is_empty()).then_some((*name, pts))
        })
        .collect();
    let all = curves.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in all {
        x0 = x0.min(*x);
        x1 = x1.max(*x);
        y0 = y0.min(*y);
        y1 = y1.max(*y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.1, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 * 10.0;
    }
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .margin(20)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, (y0 * 0.9..y1 * 1.1).log_scale())
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc(axis).y_label_formatter(&|v| format!("{v:.0e}")).draw().map_err(plot_err)?;
    for (i, (name, pts)) in curves.into_iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(pts, color.stroke_width(2)))
            .map_err(plot_err)?
            .label(name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
    }
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}
