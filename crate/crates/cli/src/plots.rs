//! Static PNG plots: training curves, precision-recall curves and
//! attention heatmaps.

use std::path::Path;
use std::sync::OnceLock;

use anyhow::{anyhow, Result};
use image::{Rgb, RgbImage};
use ndarray::Array2;
use plotters::prelude::*;

const FONT_CANDIDATES: [&str; 3] = [
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/Library/Fonts/Arial.ttf",
];

/// Registers a TrueType font for chart text. `HOI_PLOT_FONT` takes
/// precedence over the usual system locations. Without a font, charts are
/// drawn without labels.
fn font_available() -> bool {
    static LOADED: OnceLock<bool> = OnceLock::new();
    *LOADED.get_or_init(|| {
        let env = std::env::var("HOI_PLOT_FONT").ok();
        for path in env.iter().map(String::as_str).chain(FONT_CANDIDATES) {
            if let Ok(bytes) = std::fs::read(path) {
                let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                if plotters::style::register_font("sans-serif", FontStyle::Normal, bytes).is_ok() {
                    return true;
                }
            }
        }
        log::warn!("no usable font found; plots will have no text");
        false
    })
}

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn bounds(series: &[Series]) -> ((f64, f64), (f64, f64)) {
    let pts = series.iter().flat_map(|s| s.points.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        return ((0.0, 1.0), (0.0, 1.0));
    }
    let pad = |a: f64, b: f64| if b - a < 1e-12 { (a - 0.5, b + 0.5) } else { (a, b) };
    (pad(x0, x1), pad(y0.min(0.0), y1 * 1.05))
}

/// Line chart of one or more series.
pub fn line_chart(path: &Path, title: &str, x_label: &str, y_label: &str, series: &[Series]) -> Result<()> {
    let ((x0, x1), (y0, y1)) = bounds(series);
    draw_lines(path, title, x_label, y_label, series, (x0, x1), (y0, y1))
}

/// Precision-recall curves on the unit square.
pub fn pr_chart(path: &Path, title: &str, series: &[Series]) -> Result<()> {
    draw_lines(path, title, "recall", "precision", series, (0.0, 1.0), (0.0, 1.05))
}

fn draw_lines(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
    xr: (f64, f64),
    yr: (f64, f64),
) -> Result<()> {
    let text = font_available();
    let root = BitMapBackend::new(path, (800, 560)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| anyhow!("{e}"))?;
    let mut builder = ChartBuilder::on(&root);
    builder.margin(16);
    if text {
        builder.caption(title, ("sans-serif", 22)).x_label_area_size(40).y_label_area_size(56);
    }
    let mut chart = builder.build_cartesian_2d(xr.0..xr.1, yr.0..yr.1).map_err(|e| anyhow!("{e}"))?;
    let mut mesh = chart.configure_mesh();
    if text {
        mesh.x_desc(x_label).y_desc(y_label);
    } else {
        mesh.disable_x_axis().disable_y_axis();
    }
    mesh.draw().map_err(|e| anyhow!("{e}"))?;
    for (i, s) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let drawn = chart
            .draw_series(LineSeries::new(s.points.iter().copied(), color.stroke_width(2)))
            .map_err(|e| anyhow!("{e}"))?;
        if text {
            drawn.label(s.name.clone()).legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
        }
    }
    if text && series.len() > 1 {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(|e| anyhow!("{e}"))?;
    }
    root.present().map_err(|e| anyhow!("{e}"))?;
    Ok(())
}

/// Blue-to-red ramp for values in `[0, 1]`.
fn ramp(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let r = (255.0 * t.powf(0.8)) as u8;
    let b = (255.0 * (1.0 - t).powf(0.8)) as u8;
    let g = (255.0 * (1.0 - (2.0 * t - 1.0).abs()) * 0.8) as u8;
    [r, g, b]
}

/// Renders `map` (feature-grid resolution) stretched over `base` and
/// blended with it. The map is normalized to its own maximum.
pub fn heatmap_overlay(base: &RgbImage, map: &Array2<f64>, alpha: f64) -> RgbImage {
    let (h, w) = map.dim();
    let max = map.iter().cloned().fold(0.0f64, f64::max).max(1e-12);
    let mut out = base.clone();
    for (x, y, px) in out.enumerate_pixels_mut() {
        let cy = (y as usize * h / base.height() as usize).min(h - 1);
        let cx = (x as usize * w / base.width() as usize).min(w - 1);
        let c = ramp(map[[cy, cx]] / max);
        let Rgb(p) = *px;
        *px = Rgb(std::array::from_fn(|k| ((1.0 - alpha) * p[k] as f64 + alpha * c[k] as f64).round() as u8));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlay_keeps_size_and_marks_peak() {
        let base = RgbImage::from_pixel(64, 32, Rgb([0, 0, 0]));
        let mut map = Array2::zeros((2, 4));
        map[[1, 3]] = 1.0;
        let out = heatmap_overlay(&base, &map, 1.0);
        assert_eq!(out.dimensions(), (64, 32));
        assert_eq!(out.get_pixel(60, 30).0, ramp(1.0));
        assert_eq!(out.get_pixel(0, 0).0, ramp(0.0));
    }

    #[test]
    fn charts_write_png() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.png");
        let s = Series { name: "loss".into(), points: vec![(0.0, 3.0), (1.0, 2.0), (2.0, 1.5)] };
        line_chart(&p, "loss", "epoch", "loss", &[s]).unwrap();
        assert!(image::open(&p).is_ok());
        let q = dir.path().join("pr.png");
        pr_chart(&q, "pr", &[Series { name: "a".into(), points: vec![(0.5, 1.0), (1.0, 0.5)] }]).unwrap();
        assert!(image::open(&q).is_ok());
    }
}
