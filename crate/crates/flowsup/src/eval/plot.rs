//! Minimal PNG chart rendering (axes, polylines, bitmap labels) plus the
//! machine-readable sidecar JSON emitted next to every plot.

use crate::train::RunRecord;
use crate::Result;
use image::{Rgb, RgbImage};
use serde::Serialize;
use std::path::{Path, PathBuf};

/// One plotted series; `markers` are x-positions flagged with an X glyph
/// (used for divergence steps).
#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    pub markers: Vec<f64>,
}

const PALETTE: [[u8; 3]; 7] = [
    [214, 69, 65],
    [31, 119, 180],
    [44, 160, 44],
    [148, 103, 189],
    [255, 127, 14],
    [23, 190, 207],
    [99, 99, 99],
];

// 5x7 bitmap glyphs; text is uppercased before lookup.
fn glyph(c: char) -> [u8; 7] {
    match c {
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        'A' => [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'B' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'F' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'G' => [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
        'H' => [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'J' => [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C],
        'K' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'Q' => [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        ',' => [0x00, 0x00, 0x00, 0x00, 0x0C, 0x04, 0x08],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        '+' => [0x00, 0x04, 0x04, 0x1F, 0x04, 0x04, 0x00],
        ':' => [0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00],
        '%' => [0x18, 0x19, 0x02, 0x04, 0x08, 0x13, 0x03],
        '(' => [0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02],
        ')' => [0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08],
        '/' => [0x01, 0x01, 0x02, 0x04, 0x08, 0x10, 0x10],
        '_' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F],
        '=' => [0x00, 0x00, 0x1F, 0x00, 0x1F, 0x00, 0x00],
        _ => [0x00; 7],
    }
}

struct Canvas {
    img: RgbImage,
}

impl Canvas {
    fn new(w: u32, h: u32) -> Self {
        let mut img = RgbImage::new(w, h);
        for px in img.pixels_mut() {
            *px = Rgb([255, 255, 255]);
        }
        Self { img }
    }

    fn set(&mut self, x: i64, y: i64, color: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as u32) < self.img.width() && (y as u32) < self.img.height() {
            self.img.put_pixel(x as u32, y as u32, Rgb(color));
        }
    }

    fn line(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, color: [u8; 3]) {
        let steps = (x1 - x0).abs().max((y1 - y0).abs()).ceil().max(1.0) as usize;
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let x = (x0 + t * (x1 - x0)).round() as i64;
            let y = (y0 + t * (y1 - y0)).round() as i64;
            self.set(x, y, color);
            self.set(x, y + 1, color);
        }
    }

    fn text(&mut self, x: i64, y: i64, s: &str, color: [u8; 3]) {
        let mut cx = x;
        for c in s.to_ascii_uppercase().chars() {
            let g = glyph(c);
            for (row, bits) in g.iter().enumerate() {
                for col in 0..5 {
                    if bits & (0x10 >> col) != 0 {
                        self.set(cx + col as i64, y + row as i64, color);
                    }
                }
            }
            cx += 6;
        }
    }

    fn marker_x(&mut self, x: f64, y: f64, color: [u8; 3]) {
        for d in -3i64..=3 {
            self.set(x as i64 + d, y as i64 + d, color);
            self.set(x as i64 + d, y as i64 - d, color);
        }
    }
}

fn tick_label(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if a >= 1000.0 {
        format!("{v:.0}")
    } else if a >= 10.0 {
        format!("{v:.1}")
    } else if a >= 0.01 {
        format!("{v:.3}")
    } else {
        format!("{v:.2e}")
    }
}

#[derive(Serialize)]
struct SidecarSeries {
    name: String,
    n_points: usize,
    final_x: Option<f64>,
    final_y: Option<f64>,
    markers: Vec<f64>,
}

#[derive(Serialize)]
struct Sidecar {
    title: String,
    x_label: String,
    y_label: String,
    series: Vec<SidecarSeries>,
}

/// Render a line chart to `path` (PNG) and write a JSON sidecar next to it
/// listing series names and final values.
pub fn line_chart(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
) -> Result<PathBuf> {
    let (width, height) = (760u32, 480u32);
    let (ml, mr, mt, mb) = (70.0, 16.0, 28.0, 44.0);
    let plot_w = width as f64 - ml - mr;
    let plot_h = height as f64 - mt - mb;

    let all_points: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    let (mut x_min, mut x_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y_min, mut y_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in &all_points {
        x_min = x_min.min(*x);
        x_max = x_max.max(*x);
        y_min = y_min.min(*y);
        y_max = y_max.max(*y);
    }
    if all_points.is_empty() {
        x_min = 0.0;
        x_max = 1.0;
        y_min = 0.0;
        y_max = 1.0;
    }
    if (x_max - x_min).abs() < 1e-12 {
        x_max = x_min + 1.0;
    }
    if (y_max - y_min).abs() < 1e-12 {
        y_max = y_min + 1.0;
    }
    let pad = 0.05 * (y_max - y_min);
    y_min -= pad;
    y_max += pad;

    let to_px = |x: f64, y: f64| -> (f64, f64) {
        (
            ml + (x - x_min) / (x_max - x_min) * plot_w,
            mt + (1.0 - (y - y_min) / (y_max - y_min)) * plot_h,
        )
    };

    let mut canvas = Canvas::new(width, height);
    let black = [0u8, 0, 0];
    let gray = [210u8, 210, 210];

    for t in 0..=4 {
        let fx = x_min + (x_max - x_min) * t as f64 / 4.0;
        let fy = y_min + (y_max - y_min) * t as f64 / 4.0;
        let (px, _) = to_px(fx, y_min);
        let (_, py) = to_px(x_min, fy);
        canvas.line(px, mt, px, mt + plot_h, gray);
        canvas.line(ml, py, ml + plot_w, py, gray);
        canvas.text(px as i64 - 10, (mt + plot_h) as i64 + 6, &tick_label(fx), black);
        canvas.text(6, py as i64 - 3, &tick_label(fy), black);
    }
    canvas.line(ml, mt, ml, mt + plot_h, black);
    canvas.line(ml, mt + plot_h, ml + plot_w, mt + plot_h, black);
    canvas.text((ml as i64 + plot_w as i64) / 2 - 3 * x_label.len() as i64, height as i64 - 12, x_label, black);
    canvas.text(6, 8, y_label, black);
    canvas.text(ml as i64, 8, title, black);

    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        for pair in s.points.windows(2) {
            let (x0, y0) = to_px(pair[0].0, pair[0].1);
            let (x1, y1) = to_px(pair[1].0, pair[1].1);
            canvas.line(x0, y0, x1, y1, color);
        }
        // Divergence markers sit at the series' last known y.
        if let Some(&(_, last_y)) = s.points.last() {
            for &mx in &s.markers {
                let (px, py) = to_px(mx, last_y);
                canvas.marker_x(px, py, color);
            }
        }
        let ly = mt as i64 + 14 * i as i64 + 4;
        let lx = (ml + plot_w) as i64 - 150;
        canvas.line(lx as f64 - 18.0, ly as f64 + 3.0, lx as f64 - 4.0, ly as f64 + 3.0, color);
        canvas.text(lx, ly, &s.name, black);
    }

    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    canvas.img.save(path)?;

    let sidecar = Sidecar {
        title: title.into(),
        x_label: x_label.into(),
        y_label: y_label.into(),
        series: series
            .iter()
            .map(|s| SidecarSeries {
                name: s.name.clone(),
                n_points: s.points.len(),
                final_x: s.points.last().map(|p| p.0),
                final_y: s.points.last().map(|p| p.1),
                markers: s.markers.clone(),
            })
            .collect(),
    };
    let sidecar_path = path.with_extension("json");
    std::fs::write(&sidecar_path, serde_json::to_string_pretty(&sidecar)?)?;
    Ok(sidecar_path)
}

fn snapshot_series(records: &[RunRecord], split: &str, model: &str) -> Vec<(f64, f64)> {
    records
        .iter()
        .filter_map(|r| match r {
            RunRecord::Snapshot {
                step,
                split: s,
                model: m,
                epe,
                ..
            } if s == split && m == model => Some((*step as f64, *epe)),
            _ => None,
        })
        .collect()
}

fn divergence_steps(records: &[RunRecord]) -> Vec<f64> {
    records
        .iter()
        .filter_map(|r| match r {
            RunRecord::Divergence { step } => Some(*step as f64),
            _ => None,
        })
        .collect()
}

/// Render the standard plots from parsed run logs: target-validation EPE per
/// strategy (with divergence markers) and, when supervisor snapshots exist,
/// the supervisor-vs-student comparison. Empty logs produce no files and a
/// warning on stderr. Returns the paths written.
pub fn emit_plots(logs: &[(String, Vec<RunRecord>)], out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();

    let mut epe_series = Vec::new();
    for (name, records) in logs {
        let points = snapshot_series(records, "target-val", "student");
        if points.is_empty() {
            eprintln!("warning: log '{name}' has no target-val snapshots; skipping");
            continue;
        }
        epe_series.push(Series {
            name: name.clone(),
            points,
            markers: divergence_steps(records),
        });
    }
    if epe_series.is_empty() {
        eprintln!("warning: no plottable series; nothing emitted");
        return Ok(written);
    }
    let epe_path = out_dir.join("epe_vs_step.png");
    line_chart(&epe_path, "Target-val EPE", "step", "EPE (px)", &epe_series)?;
    written.push(epe_path);

    let mut tvs_series = Vec::new();
    for (name, records) in logs {
        let sup_points = snapshot_series(records, "target-val", "supervisor");
        if sup_points.is_empty() {
            continue;
        }
        tvs_series.push(Series {
            name: format!("{name} student"),
            points: snapshot_series(records, "target-val", "student"),
            markers: vec![],
        });
        tvs_series.push(Series {
            name: format!("{name} supervisor"),
            points: sup_points,
            markers: vec![],
        });
    }
    if !tvs_series.is_empty() {
        let tvs_path = out_dir.join("supervisor_vs_student.png");
        line_chart(
            &tvs_path,
            "Supervisor vs student EPE",
            "step",
            "EPE (px)",
            &tvs_series,
        )?;
        written.push(tvs_path);
    }

    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_writes_png_and_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chart.png");
        let series = vec![
            Series {
                name: "a".into(),
                points: vec![(0.0, 1.0), (100.0, 0.5), (200.0, 0.4)],
                markers: vec![150.0],
            },
            Series {
                name: "b".into(),
                points: vec![(0.0, 1.2), (200.0, 0.9)],
                markers: vec![],
            },
        ];
        let sidecar = line_chart(&path, "test", "step", "epe", &series).unwrap();
        assert!(path.exists());
        let meta: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(sidecar).unwrap()).unwrap();
        assert_eq!(meta["series"].as_array().unwrap().len(), 2);
        assert_eq!(meta["series"][0]["final_y"], 0.4);
    }

    #[test]
    fn empty_logs_emit_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let written = emit_plots(&[("empty".into(), vec![])], dir.path()).unwrap();
        assert!(written.is_empty());
    }

    #[test]
    fn multi_strategy_logs_emit_overlay_with_marker_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let mk = |name: &str, diverged: bool| {
            let mut records = vec![
                RunRecord::Snapshot {
                    step: 0,
                    split: "target-val".into(),
                    model: "student".into(),
                    epe: 2.0,
                    fl_all: 20.0,
                    n_pixels: 100,
                },
                RunRecord::Snapshot {
                    step: 100,
                    split: "target-val".into(),
                    model: "student".into(),
                    epe: 1.5,
                    fl_all: 15.0,
                    n_pixels: 100,
                },
            ];
            if diverged {
                records.push(RunRecord::Divergence { step: 60 });
            }
            (name.to_string(), records)
        };
        let logs = vec![mk("fs", false), mk("self", true)];
        let written = emit_plots(&logs, dir.path()).unwrap();
        assert_eq!(written.len(), 1);
        let sidecar: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join("epe_vs_step.json")).unwrap(),
        )
        .unwrap();
        let series = sidecar["series"].as_array().unwrap();
        assert_eq!(series.len(), 2);
        assert_eq!(series[1]["markers"][0], 60.0);
    }
}
