//! Plot rendering from persisted experiment CSVs: line plots (metric vs
//! epoch), heatmaps (mapping and dissimilarity matrices), and sketch grids.
//! Every figure is written twice, as SVG and as PNG; the PNG rasteriser is
//! self-contained (1-px lines plus a 5x7 bitmap font).
//!
//! Input is exclusively the CSV files the runner persisted; nothing is
//! recomputed from checkpoints, so plots are reproducible from artifacts
//! alone.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::agents::{rasterize_strokes, StrokeSet};

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("no metrics found at {path}")]
    MissingMetrics { path: PathBuf },

    #[error("malformed table {path}: {why}")]
    MalformedTable { path: PathBuf, why: String },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

// ---- pixel canvas -------------------------------------------------------------

pub type Rgb = [u8; 3];

pub const PALETTE: [Rgb; 8] = [
    [31, 119, 180],
    [214, 94, 44],
    [44, 160, 44],
    [148, 103, 189],
    [140, 86, 75],
    [64, 64, 64],
    [227, 119, 194],
    [23, 190, 207],
];

const BLACK: Rgb = [20, 20, 20];
const GREY: Rgb = [150, 150, 150];
const WHITE: Rgb = [255, 255, 255];

/// RGB raster with just enough drawing primitives for plots.
pub struct Pixmap {
    w: usize,
    h: usize,
    data: Vec<Rgb>,
}

impl Pixmap {
    pub fn new(w: usize, h: usize) -> Self {
        Self { w, h, data: vec![WHITE; w * h] }
    }

    fn set(&mut self, x: i64, y: i64, c: Rgb) {
        if x >= 0 && y >= 0 && (x as usize) < self.w && (y as usize) < self.h {
            self.data[y as usize * self.w + x as usize] = c;
        }
    }

    /// Alpha-blend a pixel toward `c`.
    fn mix(&mut self, x: i64, y: i64, c: Rgb, alpha: f64) {
        if x >= 0 && y >= 0 && (x as usize) < self.w && (y as usize) < self.h {
            let p = &mut self.data[y as usize * self.w + x as usize];
            for k in 0..3 {
                p[k] = (p[k] as f64 * (1.0 - alpha) + c[k] as f64 * alpha).round() as u8;
            }
        }
    }

    pub fn fill_rect(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, c: Rgb) {
        for y in y0.round() as i64..y1.round() as i64 {
            for x in x0.round() as i64..x1.round() as i64 {
                self.set(x, y, c);
            }
        }
    }

    pub fn blend_rect(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, c: Rgb, alpha: f64) {
        for y in y0.round() as i64..y1.round() as i64 {
            for x in x0.round() as i64..x1.round() as i64 {
                self.mix(x, y, c, alpha);
            }
        }
    }

    /// 1-px line, stepped along the longer axis.
    pub fn line(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, c: Rgb) {
        let (dx, dy) = (x1 - x0, y1 - y0);
        let steps = dx.abs().max(dy.abs()).ceil().max(1.0) as usize;
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            self.set((x0 + dx * t).round() as i64, (y0 + dy * t).round() as i64, c);
        }
    }

    /// Render text with the built-in 5x7 font at integer `scale`.
    pub fn text(&mut self, x: f64, y: f64, s: &str, c: Rgb, scale: usize) {
        let mut cx = x.round() as i64;
        let cy = y.round() as i64;
        for ch in s.chars() {
            let rows = glyph(ch);
            for (ry, bits) in rows.iter().enumerate() {
                for rx in 0..5 {
                    if bits & (0b10000 >> rx) != 0 {
                        for sy in 0..scale {
                            for sx in 0..scale {
                                self.set(
                                    cx + (rx * scale + sx) as i64,
                                    cy + (ry * scale + sy) as i64,
                                    c,
                                );
                            }
                        }
                    }
                }
            }
            cx += (6 * scale) as i64;
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<(), PlotError> {
        let mut img = image::RgbImage::new(self.w as u32, self.h as u32);
        for (i, px) in self.data.iter().enumerate() {
            img.put_pixel((i % self.w) as u32, (i / self.w) as u32, image::Rgb(*px));
        }
        img.save(path).map_err(|e| PlotError::Io(std::io::Error::other(e)))
    }
}

/// Width of a string in pixels at the given font scale.
fn text_width(s: &str, scale: usize) -> f64 {
    (s.chars().count() * 6 * scale) as f64
}

/// 5x7 glyphs; unknown characters render as a box. Uppercase folds to
/// lowercase.
fn glyph(ch: char) -> [u8; 7] {
    match ch.to_ascii_lowercase() {
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
        'a' => [0x00, 0x00, 0x0E, 0x01, 0x0F, 0x11, 0x0F],
        'b' => [0x10, 0x10, 0x16, 0x19, 0x11, 0x11, 0x1E],
        'c' => [0x00, 0x00, 0x0E, 0x10, 0x10, 0x11, 0x0E],
        'd' => [0x01, 0x01, 0x0D, 0x13, 0x11, 0x11, 0x0F],
        'e' => [0x00, 0x00, 0x0E, 0x11, 0x1F, 0x10, 0x0E],
        'f' => [0x06, 0x09, 0x08, 0x1C, 0x08, 0x08, 0x08],
        'g' => [0x00, 0x0F, 0x11, 0x11, 0x0F, 0x01, 0x0E],
        'h' => [0x10, 0x10, 0x16, 0x19, 0x11, 0x11, 0x11],
        'i' => [0x04, 0x00, 0x0C, 0x04, 0x04, 0x04, 0x0E],
        'j' => [0x02, 0x00, 0x06, 0x02, 0x02, 0x12, 0x0C],
        'k' => [0x10, 0x10, 0x12, 0x14, 0x18, 0x14, 0x12],
        'l' => [0x0C, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'm' => [0x00, 0x00, 0x1A, 0x15, 0x15, 0x11, 0x11],
        'n' => [0x00, 0x00, 0x16, 0x19, 0x11, 0x11, 0x11],
        'o' => [0x00, 0x00, 0x0E, 0x11, 0x11, 0x11, 0x0E],
        'p' => [0x00, 0x00, 0x1E, 0x11, 0x1E, 0x10, 0x10],
        'q' => [0x00, 0x00, 0x0D, 0x13, 0x0F, 0x01, 0x01],
        'r' => [0x00, 0x00, 0x16, 0x19, 0x10, 0x10, 0x10],
        's' => [0x00, 0x00, 0x0E, 0x10, 0x0E, 0x01, 0x1E],
        't' => [0x08, 0x08, 0x1C, 0x08, 0x08, 0x09, 0x06],
        'u' => [0x00, 0x00, 0x11, 0x11, 0x11, 0x13, 0x0D],
        'v' => [0x00, 0x00, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'w' => [0x00, 0x00, 0x11, 0x11, 0x15, 0x15, 0x0A],
        'x' => [0x00, 0x00, 0x11, 0x0A, 0x04, 0x0A, 0x11],
        'y' => [0x00, 0x00, 0x11, 0x11, 0x0F, 0x01, 0x0E],
        'z' => [0x00, 0x00, 0x1F, 0x02, 0x04, 0x08, 0x1F],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        ',' => [0x00, 0x00, 0x00, 0x00, 0x0C, 0x04, 0x08],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        '+' => [0x00, 0x04, 0x04, 0x1F, 0x04, 0x04, 0x00],
        ':' => [0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00],
        '%' => [0x18, 0x19, 0x02, 0x04, 0x08, 0x13, 0x03],
        '_' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F],
        '/' => [0x01, 0x01, 0x02, 0x04, 0x08, 0x10, 0x10],
        '(' => [0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02],
        ')' => [0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08],
        '<' => [0x02, 0x04, 0x08, 0x10, 0x08, 0x04, 0x02],
        '>' => [0x08, 0x04, 0x02, 0x01, 0x02, 0x04, 0x08],
        '=' => [0x00, 0x00, 0x1F, 0x00, 0x1F, 0x00, 0x00],
        ' ' => [0x00; 7],
        _ => [0x1F, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1F],
    }
}

// ---- svg builder --------------------------------------------------------------

/// Minimal SVG assembler mirroring the Pixmap primitives.
pub struct Svg {
    w: usize,
    h: usize,
    body: String,
}

impl Svg {
    pub fn new(w: usize, h: usize) -> Self {
        let mut body = String::new();
        let _ = writeln!(body, r##"<rect width="{w}" height="{h}" fill="#ffffff"/>"##);
        Self { w, h, body }
    }

    fn color(c: Rgb) -> String {
        format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
    }

    pub fn line(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, c: Rgb, width: f64) {
        let _ = writeln!(
            self.body,
            r#"<line x1="{x0:.2}" y1="{y0:.2}" x2="{x1:.2}" y2="{y1:.2}" stroke="{}" stroke-width="{width}"/>"#,
            Self::color(c)
        );
    }

    pub fn polyline(&mut self, pts: &[(f64, f64)], c: Rgb, width: f64) {
        let coords: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
        let _ = writeln!(
            self.body,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="{width}"/>"#,
            coords.join(" "),
            Self::color(c)
        );
    }

    pub fn polygon(&mut self, pts: &[(f64, f64)], c: Rgb, opacity: f64) {
        let coords: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
        let _ = writeln!(
            self.body,
            r#"<polygon points="{}" fill="{}" fill-opacity="{opacity}" stroke="none"/>"#,
            coords.join(" "),
            Self::color(c)
        );
    }

    pub fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, c: Rgb) {
        let _ = writeln!(
            self.body,
            r#"<rect x="{x:.2}" y="{y:.2}" width="{w:.2}" height="{h:.2}" fill="{}"/>"#,
            Self::color(c)
        );
    }

    /// Text anchored at the top-left corner (matching `Pixmap::text`), at a
    /// font size equivalent to the raster font at `scale`.
    pub fn text(&mut self, x: f64, y: f64, s: &str, c: Rgb, scale: usize) {
        let size = 8 * scale;
        let esc = s
            .replace('&', "&amp;")
            .replace('<', "&lt;")
            .replace('>', "&gt;");
        let _ = writeln!(
            self.body,
            r#"<text x="{x:.2}" y="{:.2}" font-family="monospace" font-size="{size}" fill="{}">{esc}</text>"#,
            y + (7 * scale) as f64,
            Self::color(c)
        );
    }

    pub fn save(&self, path: &Path) -> Result<(), PlotError> {
        let doc = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" viewBox=\"0 0 {} {}\">\n{}</svg>\n",
            self.w, self.h, self.w, self.h, self.body
        );
        std::fs::write(path, doc)?;
        Ok(())
    }
}

// ---- line plots ---------------------------------------------------------------

/// One plotted curve, optionally with a shaded min/max (or mean±std) band.
pub struct Series {
    pub label: String,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub band: Option<(Vec<f64>, Vec<f64>)>,
}

fn nice_ticks(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect()
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if v.abs() >= 100.0 {
        return format!("{v:.0}");
    }
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    s.to_string()
}

/// Write `<base>.svg` and `<base>.png`.
pub fn line_plot(
    title: &str,
    xlabel: &str,
    ylabel: &str,
    series: &[Series],
    base: &Path,
) -> Result<(), PlotError> {
    let (w, h) = (640usize, 420usize);
    let (ml, mr, mt, mb) = (62.0, 18.0, 30.0, 44.0);
    let (px0, py0) = (ml, h as f64 - mb);
    let (px1, py1) = (w as f64 - mr, mt);

    let mut xmin = f64::INFINITY;
    let mut xmax = f64::NEG_INFINITY;
    let mut ymin = f64::INFINITY;
    let mut ymax = f64::NEG_INFINITY;
    for s in series {
        for &x in &s.xs {
            xmin = xmin.min(x);
            xmax = xmax.max(x);
        }
        let lows = s.band.as_ref().map(|(lo, _)| lo.as_slice()).unwrap_or(&[]);
        let highs = s.band.as_ref().map(|(_, hi)| hi.as_slice()).unwrap_or(&[]);
        for &y in s.ys.iter().chain(lows).chain(highs) {
            ymin = ymin.min(y);
            ymax = ymax.max(y);
        }
    }
    if !xmin.is_finite() {
        xmin = 0.0;
        xmax = 1.0;
        ymin = 0.0;
        ymax = 1.0;
    }
    if (xmax - xmin).abs() < 1e-12 {
        xmax = xmin + 1.0;
    }
    let pad = ((ymax - ymin) * 0.06).max(1e-6);
    ymin -= pad;
    ymax += pad;

    let sx = |x: f64| px0 + (x - xmin) / (xmax - xmin) * (px1 - px0);
    let sy = |y: f64| py0 + (y - ymin) / (ymax - ymin) * (py1 - py0);

    let mut pm = Pixmap::new(w, h);
    let mut sv = Svg::new(w, h);

    // Axes and ticks.
    pm.line(px0, py0, px1, py0, BLACK);
    pm.line(px0, py0, px0, py1, BLACK);
    sv.line(px0, py0, px1, py0, BLACK, 1.0);
    sv.line(px0, py0, px0, py1, BLACK, 1.0);
    for &tx in &nice_ticks(xmin, xmax, 5) {
        let x = sx(tx);
        pm.line(x, py0, x, py0 + 4.0, BLACK);
        sv.line(x, py0, x, py0 + 4.0, BLACK, 1.0);
        let label = fmt_tick(tx);
        let tw = text_width(&label, 1);
        pm.text(x - tw / 2.0, py0 + 8.0, &label, BLACK, 1);
        sv.text(x - tw / 2.0, py0 + 8.0, &label, BLACK, 1);
    }
    for &ty in &nice_ticks(ymin, ymax, 5) {
        let y = sy(ty);
        pm.line(px0 - 4.0, y, px0, y, BLACK);
        sv.line(px0 - 4.0, y, px0, y, BLACK, 1.0);
        pm.line(px0, y, px1, y, [228, 228, 228]);
        sv.line(px0, y, px1, y, [228, 228, 228], 0.5);
        let label = fmt_tick(ty);
        let tw = text_width(&label, 1);
        pm.text(px0 - 7.0 - tw, y - 3.0, &label, BLACK, 1);
        sv.text(px0 - 7.0 - tw, y - 3.0, &label, BLACK, 1);
    }

    // Bands first so lines draw over them.
    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        if let Some((lo, hi)) = &s.band {
            let mut poly: Vec<(f64, f64)> =
                s.xs.iter().zip(hi).map(|(&x, &y)| (sx(x), sy(y))).collect();
            for (&x, &y) in s.xs.iter().zip(lo).rev() {
                poly.push((sx(x), sy(y)));
            }
            sv.polygon(&poly, color, 0.18);
            for (i, (&x, (&l, &u))) in s.xs.iter().zip(lo.iter().zip(hi)).enumerate() {
                // PNG band: vertical strips between consecutive points.
                if i + 1 < s.xs.len() {
                    let xn = s.xs[i + 1];
                    let (ln, un) = (lo[i + 1], hi[i + 1]);
                    let steps = (sx(xn) - sx(x)).abs().ceil() as usize + 1;
                    for k in 0..steps {
                        let t = k as f64 / steps.max(1) as f64;
                        let xc = sx(x) + (sx(xn) - sx(x)) * t;
                        let yl = sy(l + (ln - l) * t);
                        let yu = sy(u + (un - u) * t);
                        pm.blend_rect(xc, yu, xc + 1.0, yl, color, 0.18);
                    }
                }
            }
        }
    }
    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let pts: Vec<(f64, f64)> =
            s.xs.iter().zip(&s.ys).map(|(&x, &y)| (sx(x), sy(y))).collect();
        for w2 in pts.windows(2) {
            pm.line(w2[0].0, w2[0].1, w2[1].0, w2[1].1, color);
            // Thicken by a second pass one pixel lower.
            pm.line(w2[0].0, w2[0].1 + 1.0, w2[1].0, w2[1].1 + 1.0, color);
        }
        sv.polyline(&pts, color, 1.8);
    }

    // Legend, top-right inside the plot area.
    let legend_w = series
        .iter()
        .map(|s| text_width(&s.label, 1))
        .fold(0.0, f64::max)
        + 24.0;
    let lx = px1 - legend_w - 6.0;
    let mut ly = py1 + 6.0;
    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        pm.fill_rect(lx, ly + 2.0, lx + 14.0, ly + 6.0, color);
        sv.rect(lx, ly + 2.0, 14.0, 4.0, color);
        pm.text(lx + 18.0, ly, &s.label, BLACK, 1);
        sv.text(lx + 18.0, ly, &s.label, BLACK, 1);
        ly += 12.0;
    }

    // Title and axis labels.
    let tw = text_width(title, 2);
    pm.text((w as f64 - tw) / 2.0, 6.0, title, BLACK, 2);
    sv.text((w as f64 - tw) / 2.0, 6.0, title, BLACK, 2);
    let xw = text_width(xlabel, 1);
    pm.text((px0 + px1 - xw) / 2.0, h as f64 - 16.0, xlabel, BLACK, 1);
    sv.text((px0 + px1 - xw) / 2.0, h as f64 - 16.0, xlabel, BLACK, 1);
    pm.text(4.0, py1 - 12.0, ylabel, GREY, 1);
    sv.text(4.0, py1 - 12.0, ylabel, GREY, 1);

    pm.save_png(&base.with_extension("png"))?;
    sv.save(&base.with_extension("svg"))
}

// ---- heatmaps -----------------------------------------------------------------

fn ramp(t: f64) -> Rgb {
    // White to deep blue.
    let t = t.clamp(0.0, 1.0);
    let a = [255.0, 255.0, 255.0];
    let b = [8.0, 48.0, 107.0];
    [
        (a[0] + (b[0] - a[0]) * t).round() as u8,
        (a[1] + (b[1] - a[1]) * t).round() as u8,
        (a[2] + (b[2] - a[2]) * t).round() as u8,
    ]
}

/// Heatmap with row/column labels and in-cell values.
pub fn heatmap(
    title: &str,
    row_labels: &[String],
    col_labels: &[String],
    values: &[Vec<f64>],
    base: &Path,
) -> Result<(), PlotError> {
    let rows = row_labels.len();
    let cols = col_labels.len();
    let cell_w = 72.0f64.min(560.0 / cols.max(1) as f64).max(34.0);
    let cell_h = 34.0;
    let (ml, mt) = (70.0, 56.0);
    let w = (ml + cell_w * cols as f64 + 20.0) as usize;
    let h = (mt + cell_h * rows as f64 + 16.0) as usize;

    let mut vmax = f64::MIN;
    let mut vmin = f64::MAX;
    for r in values {
        for &v in r {
            vmax = vmax.max(v);
            vmin = vmin.min(v);
        }
    }
    if vmin > vmax {
        vmin = 0.0;
        vmax = 1.0;
    }
    let span = (vmax - vmin).max(1e-12);

    let mut pm = Pixmap::new(w, h);
    let mut sv = Svg::new(w, h);
    let tw = text_width(title, 2);
    pm.text((w as f64 - tw) / 2.0, 6.0, title, BLACK, 2);
    sv.text((w as f64 - tw) / 2.0, 6.0, title, BLACK, 2);

    for (j, cl) in col_labels.iter().enumerate() {
        let max_chars = (cell_w / 6.0) as usize;
        let label: String = cl.chars().take(max_chars.max(1)).collect();
        let x = ml + j as f64 * cell_w + (cell_w - text_width(&label, 1)) / 2.0;
        pm.text(x, mt - 14.0, &label, BLACK, 1);
        sv.text(x, mt - 14.0, &label, BLACK, 1);
    }
    for (i, rl) in row_labels.iter().enumerate() {
        let y = mt + i as f64 * cell_h + cell_h / 2.0 - 4.0;
        let x = ml - 8.0 - text_width(rl, 1);
        pm.text(x, y, rl, BLACK, 1);
        sv.text(x, y, rl, BLACK, 1);
    }
    for (i, row) in values.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let t = (v - vmin) / span;
            let color = ramp(t);
            let (x, y) = (ml + j as f64 * cell_w, mt + i as f64 * cell_h);
            pm.fill_rect(x, y, x + cell_w - 1.0, y + cell_h - 1.0, color);
            sv.rect(x, y, cell_w - 1.0, cell_h - 1.0, color);
            let label = if v == v.trunc() && v.abs() < 1e6 {
                format!("{}", v as i64)
            } else {
                format!("{v:.2}")
            };
            let text_color = if t > 0.55 { WHITE } else { BLACK };
            let lx = x + (cell_w - text_width(&label, 1)) / 2.0;
            let ly = y + cell_h / 2.0 - 4.0;
            pm.text(lx, ly, &label, text_color, 1);
            sv.text(lx, ly, &label, text_color, 1);
        }
    }

    pm.save_png(&base.with_extension("png"))?;
    sv.save(&base.with_extension("svg"))
}

// ---- sketch grids -------------------------------------------------------------

/// Grid of rendered sketches: one row per listed label (typically one per
/// seed), one column per class.
pub fn sketch_grid(
    title: &str,
    row_labels: &[String],
    classes: &[u32],
    cells: &[Vec<Option<StrokeSet>>],
    base: &Path,
) -> Result<(), PlotError> {
    let tile = 64usize;
    let gap = 6usize;
    let (ml, mt) = (64.0, 44.0);
    let w = (ml as usize + classes.len() * (tile + gap) + 12).max(200);
    let h = (mt as usize + row_labels.len() * (tile + gap) + 12).max(120);

    let mut pm = Pixmap::new(w, h);
    let mut sv = Svg::new(w, h);
    let tw = text_width(title, 2);
    pm.text((w as f64 - tw) / 2.0, 6.0, title, BLACK, 2);
    sv.text((w as f64 - tw) / 2.0, 6.0, title, BLACK, 2);

    for (j, class) in classes.iter().enumerate() {
        let label = format!("n={class}");
        let x = ml + (j * (tile + gap)) as f64 + (tile as f64 - text_width(&label, 1)) / 2.0;
        pm.text(x, mt - 14.0, &label, BLACK, 1);
        sv.text(x, mt - 14.0, &label, BLACK, 1);
    }
    for (i, rl) in row_labels.iter().enumerate() {
        let y = mt + (i * (tile + gap)) as f64 + tile as f64 / 2.0 - 4.0;
        pm.text(4.0, y, rl, BLACK, 1);
        sv.text(4.0, y, rl, BLACK, 1);
    }

    for (i, row) in cells.iter().enumerate() {
        for (j, entry) in row.iter().enumerate() {
            let x0 = ml + (j * (tile + gap)) as f64;
            let y0 = mt + (i * (tile + gap)) as f64;
            // Tile frame.
            pm.fill_rect(x0 - 1.0, y0 - 1.0, x0 + tile as f64 + 1.0, y0 + tile as f64 + 1.0, GREY);
            pm.fill_rect(x0, y0, x0 + tile as f64, y0 + tile as f64, WHITE);
            sv.rect(x0 - 1.0, y0 - 1.0, tile as f64 + 2.0, tile as f64 + 2.0, GREY);
            sv.rect(x0, y0, tile as f64, tile as f64, WHITE);
            let Some(strokes) = entry else { continue };
            // PNG: render through the differentiable rasteriser's eval path.
            let sk = rasterize_strokes(strokes, tile, 1.5 / 64.0);
            for (pi, &v) in sk.canvas.data().iter().enumerate() {
                if v < 0.98 {
                    let px = (pi % tile) as f64;
                    let py = (pi / tile) as f64;
                    let g = (v.clamp(0.0, 1.0) * 255.0) as u8;
                    pm.set((x0 + px) as i64, (y0 + py) as i64, [g, g, g]);
                }
            }
            // SVG: sketches are line sets, so draw them as lines.
            for c in &strokes.coords {
                sv.line(
                    x0 + c[0] * tile as f64,
                    y0 + c[1] * tile as f64,
                    x0 + c[2] * tile as f64,
                    y0 + c[3] * tile as f64,
                    BLACK,
                    1.5,
                );
            }
        }
    }

    pm.save_png(&base.with_extension("png"))?;
    sv.save(&base.with_extension("svg"))
}

// ---- experiment-level rendering -----------------------------------------------

struct CurveRow {
    cell: String,
    epoch: usize,
    accuracy: f64,
    cond_entropy: f64,
    mean_len: f64,
}

fn read_curves(path: &Path) -> Result<Vec<CurveRow>, PlotError> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(PlotError::MalformedTable {
                path: path.to_path_buf(),
                why: format!("line {} has {} fields, want 6", i + 1, f.len()),
            });
        }
        let parse = |s: &str| -> Result<f64, PlotError> {
            s.parse().map_err(|_| PlotError::MalformedTable {
                path: path.to_path_buf(),
                why: format!("bad number {s:?} on line {}", i + 1),
            })
        };
        rows.push(CurveRow {
            cell: f[0].to_string(),
            epoch: parse(f[2])? as usize,
            accuracy: parse(f[3])?,
            cond_entropy: parse(f[4])?,
            mean_len: parse(f[5])?,
        });
    }
    Ok(rows)
}

/// Generic labelled-matrix CSV: first column row labels, header col labels.
fn read_matrix(path: &Path) -> Result<(Vec<String>, Vec<String>, Vec<Vec<f64>>), PlotError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| PlotError::Io(std::io::Error::other(e)))?;
    let mut col_labels = Vec::new();
    let mut row_labels = Vec::new();
    let mut values = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| PlotError::Io(std::io::Error::other(e)))?;
        if i == 0 {
            col_labels = rec.iter().skip(1).map(|s| s.to_string()).collect();
            continue;
        }
        let mut it = rec.iter();
        row_labels.push(it.next().unwrap_or("").to_string());
        let row: Result<Vec<f64>, PlotError> = it
            .map(|s| {
                s.parse().map_err(|_| PlotError::MalformedTable {
                    path: path.to_path_buf(),
                    why: format!("bad number {s:?} on line {}", i + 1),
                })
            })
            .collect();
        values.push(row?);
    }
    Ok((row_labels, col_labels, values))
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Render every figure derivable from an experiment directory's persisted
/// CSVs into `<dir>/plots/`. Optional inputs that are absent are noted in
/// `plots/notes.txt` rather than failing.
pub fn render_plots(exp_dir: &Path) -> Result<(), PlotError> {
    let curves_path = exp_dir.join("curves.csv");
    if !curves_path.exists() {
        return Err(PlotError::MissingMetrics { path: curves_path });
    }
    let plots = exp_dir.join("plots");
    std::fs::create_dir_all(&plots)?;
    let mut notes: Vec<String> = Vec::new();

    // Metric-vs-epoch lines, mean across seeds with a ±std band.
    let rows = read_curves(&curves_path)?;
    let mut cells: Vec<String> = Vec::new();
    for r in &rows {
        if !cells.contains(&r.cell) {
            cells.push(r.cell.clone());
        }
    }
    for (metric, title, fname) in [
        (0usize, "accuracy", "accuracy"),
        (1, "conditional entropy (bits)", "cond_entropy"),
        (2, "mean message length", "mean_len"),
    ] {
        let mut series = Vec::new();
        for cell in &cells {
            let mut per_epoch: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            for r in rows.iter().filter(|r| &r.cell == cell) {
                let v = match metric {
                    0 => r.accuracy,
                    1 => r.cond_entropy,
                    _ => r.mean_len,
                };
                per_epoch.entry(r.epoch).or_default().push(v);
            }
            let xs: Vec<f64> = per_epoch.keys().map(|&e| e as f64).collect();
            let stats: Vec<(f64, f64)> = per_epoch.values().map(|v| mean_std(v)).collect();
            let ys: Vec<f64> = stats.iter().map(|s| s.0).collect();
            let lo: Vec<f64> = stats.iter().map(|s| s.0 - s.1).collect();
            let hi: Vec<f64> = stats.iter().map(|s| s.0 + s.1).collect();
            series.push(Series { label: cell.clone(), xs, ys, band: Some((lo, hi)) });
        }
        line_plot(title, "epoch", title, &series, &plots.join(fname))?;
    }

    // Per-cell matrices and sketch grids from the first seed directory that
    // has them; sketch grids take one row per seed.
    for cell in &cells {
        let cell_dir = exp_dir.join(cell);
        let mut seed_dirs: Vec<PathBuf> = match std::fs::read_dir(&cell_dir) {
            Ok(it) => it
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_dir())
                .collect(),
            Err(_) => Vec::new(),
        };
        seed_dirs.sort();

        if let Some(mm) = seed_dirs.iter().map(|d| d.join("mapping_matrix.csv")).find(|p| p.exists())
        {
            let (rl, cl, vals) = read_matrix(&mm)?;
            heatmap(
                &format!("{cell}: class to message counts"),
                &rl,
                &cl,
                &vals,
                &plots.join(format!("mapping-{cell}")),
            )?;
        } else {
            notes.push(format!("{cell}: no mapping matrix; heatmap omitted"));
        }

        if let Some(dm) = seed_dirs.iter().map(|d| d.join("dissimilarity.csv")).find(|p| p.exists())
        {
            let (rl, cl, vals) = read_matrix(&dm)?;
            heatmap(
                &format!("{cell}: sketch dissimilarity"),
                &rl,
                &cl,
                &vals,
                &plots.join(format!("dissimilarity-{cell}")),
            )?;
        }

        // Sketch grid: rows are seeds, columns classes.
        let mut grid_rows: Vec<(String, BTreeMap<u32, StrokeSet>)> = Vec::new();
        for sd in &seed_dirs {
            let sk = sd.join("sketches.csv");
            if !sk.exists() {
                continue;
            }
            let mut per_class: BTreeMap<u32, StrokeSet> = BTreeMap::new();
            let text = std::fs::read_to_string(&sk)?;
            for (i, line) in text.lines().enumerate() {
                if i == 0 || line.is_empty() {
                    continue;
                }
                let f: Vec<&str> = line.split(',').collect();
                let class: u32 = f[0].parse().map_err(|_| PlotError::MalformedTable {
                    path: sk.clone(),
                    why: format!("bad class on line {}", i + 1),
                })?;
                if per_class.contains_key(&class) {
                    continue;
                }
                let coords: Vec<f64> = f[1..]
                    .iter()
                    .map(|s| s.parse().unwrap_or(0.0))
                    .collect();
                let strokes: Vec<[f64; 4]> = coords
                    .chunks_exact(4)
                    .map(|c| [c[0], c[1], c[2], c[3]])
                    .collect();
                per_class.insert(class, StrokeSet { coords: strokes });
            }
            let label = sd
                .file_name()
                .map(|c| c.to_string_lossy().into_owned())
                .unwrap_or_default();
            grid_rows.push((label, per_class));
        }
        if !grid_rows.is_empty() {
            let mut classes: Vec<u32> = grid_rows
                .iter()
                .flat_map(|(_, m)| m.keys().copied())
                .collect();
            classes.sort_unstable();
            classes.dedup();
            let row_labels: Vec<String> = grid_rows.iter().map(|(l, _)| l.clone()).collect();
            let tiles: Vec<Vec<Option<StrokeSet>>> = grid_rows
                .iter()
                .map(|(_, m)| classes.iter().map(|c| m.get(c).cloned()).collect())
                .collect();
            sketch_grid(
                &format!("{cell}: eval sketches"),
                &row_labels,
                &classes,
                &tiles,
                &plots.join(format!("sketches-{cell}")),
            )?;
        }
    }

    if notes.is_empty() {
        notes.push("all optional inputs present".into());
    }
    std::fs::write(plots.join("notes.txt"), notes.join("\n") + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_plot_writes_both_formats() {
        let tmp = tempfile::tempdir().unwrap();
        let base = tmp.path().join("curve");
        let series = vec![
            Series {
                label: "same".into(),
                xs: (0..10).map(|i| i as f64).collect(),
                ys: (0..10).map(|i| 0.2 + 0.07 * i as f64).collect(),
                band: Some((
                    (0..10).map(|i| 0.15 + 0.07 * i as f64).collect(),
                    (0..10).map(|i| 0.25 + 0.07 * i as f64).collect(),
                )),
            },
            Series {
                label: "diff".into(),
                xs: (0..10).map(|i| i as f64).collect(),
                ys: (0..10).map(|i| 0.2 + 0.05 * i as f64).collect(),
                band: None,
            },
        ];
        line_plot("accuracy", "epoch", "accuracy", &series, &base).unwrap();
        let svg = std::fs::read_to_string(base.with_extension("svg")).unwrap();
        assert!(svg.contains("<polyline"));
        assert!(svg.contains("same"));
        let png = std::fs::read(base.with_extension("png")).unwrap();
        assert_eq!(&png[1..4], b"PNG");
    }

    #[test]
    fn heatmap_handles_constant_values() {
        let tmp = tempfile::tempdir().unwrap();
        let base = tmp.path().join("hm");
        heatmap(
            "constant",
            &["1".into(), "2".into()],
            &["a".into(), "b".into()],
            &[vec![3.0, 3.0], vec![3.0, 3.0]],
            &base,
        )
        .unwrap();
        assert!(base.with_extension("svg").exists());
        assert!(base.with_extension("png").exists());
    }

    #[test]
    fn missing_curves_is_a_typed_error() {
        let tmp = tempfile::tempdir().unwrap();
        match render_plots(tmp.path()) {
            Err(PlotError::MissingMetrics { path }) => {
                assert!(path.ends_with("curves.csv"));
            }
            other => panic!("expected MissingMetrics, got {other:?}"),
        }
    }

    #[test]
    fn sketch_grid_skips_missing_tiles() {
        let tmp = tempfile::tempdir().unwrap();
        let base = tmp.path().join("grid");
        let strokes = StrokeSet {
            coords: vec![[0.2, 0.2, 0.8, 0.3], [0.3, 0.5, 0.7, 0.6]],
        };
        sketch_grid(
            "sketches",
            &["seed0".into(), "seed1".into()],
            &[1, 2, 3],
            &[
                vec![Some(strokes.clone()), None, Some(strokes.clone())],
                vec![None, Some(strokes), None],
            ],
            &base,
        )
        .unwrap();
        assert!(base.with_extension("png").exists());
        let svg = std::fs::read_to_string(base.with_extension("svg")).unwrap();
        assert!(svg.contains("<line"));
    }
}
