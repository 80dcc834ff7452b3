//! Minimal chart rendering for reports: line charts for training
//! curves and bar charts for per-patch accuracy, rasterized with an
//! embedded 5x7 bitmap font and saved as PNG. Output is deterministic:
//! the same inputs produce byte-identical files.

use image::{Rgb, RgbImage};
use std::path::Path;

use crate::error::{Error, Result};

const WIDTH: u32 = 800;
const HEIGHT: u32 = 480;
const MARGIN_L: i64 = 70;
const MARGIN_R: i64 = 24;
const MARGIN_T: i64 = 44;
const MARGIN_B: i64 = 56;

const BG: Rgb<u8> = Rgb([255, 255, 255]);
const FG: Rgb<u8> = Rgb([30, 30, 30]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);

const PALETTE: [Rgb<u8>; 6] = [
    Rgb([31, 119, 180]),
    Rgb([214, 39, 40]),
    Rgb([44, 160, 44]),
    Rgb([255, 127, 14]),
    Rgb([148, 103, 189]),
    Rgb([90, 90, 90]),
];

/// One named line in a line chart.
pub struct Series<'a> {
    pub name: &'a str,
    pub values: &'a [f64],
}

/// 5x7 glyphs, one row per byte, low 5 bits used. Lowercase letters
/// render as uppercase; unknown characters render as space.
fn glyph(c: char) -> [u8; 7] {
    match c.to_ascii_uppercase() {
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
        'Y' => [0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        ',' => [0x00, 0x00, 0x00, 0x00, 0x0C, 0x04, 0x08],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        '_' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F],
        ':' => [0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00],
        '%' => [0x19, 0x1A, 0x02, 0x04, 0x08, 0x0B, 0x13],
        '(' => [0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02],
        ')' => [0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08],
        '/' => [0x01, 0x01, 0x02, 0x04, 0x08, 0x10, 0x10],
        '=' => [0x00, 0x00, 0x1F, 0x00, 0x1F, 0x00, 0x00],
        '+' => [0x00, 0x04, 0x04, 0x1F, 0x04, 0x04, 0x00],
        _ => [0; 7],
    }
}

fn put_pixel(img: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}

fn draw_text(img: &mut RgbImage, x: i64, y: i64, text: &str, scale: i64, color: Rgb<u8>) {
    let mut cx = x;
    for c in text.chars() {
        let rows = glyph(c);
        for (ry, row) in rows.iter().enumerate() {
            for rx in 0..5 {
                if row >> (4 - rx) & 1 == 1 {
                    for sy in 0..scale {
                        for sx in 0..scale {
                            put_pixel(
                                img,
                                cx + rx as i64 * scale + sx,
                                y + ry as i64 * scale + sy,
                                color,
                            );
                        }
                    }
                }
            }
        }
        cx += 6 * scale;
    }
}

fn text_width(text: &str, scale: i64) -> i64 {
    text.chars().count() as i64 * 6 * scale
}

fn draw_line(img: &mut RgbImage, x0: i64, y0: i64, x1: i64, y1: i64, color: Rgb<u8>) {
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    let (mut x, mut y) = (x0, y0);
    loop {
        put_pixel(img, x, y, color);
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

fn draw_thick_line(img: &mut RgbImage, x0: i64, y0: i64, x1: i64, y1: i64, color: Rgb<u8>) {
    draw_line(img, x0, y0, x1, y1, color);
    draw_line(img, x0, y0 + 1, x1, y1 + 1, color);
    draw_line(img, x0 + 1, y0, x1 + 1, y1, color);
}

fn fill_rect(img: &mut RgbImage, x0: i64, y0: i64, x1: i64, y1: i64, color: Rgb<u8>) {
    for y in y0.min(y1)..=y0.max(y1) {
        for x in x0.min(x1)..=x0.max(x1) {
            put_pixel(img, x, y, color);
        }
    }
}

/// Round a raw range out to friendly tick bounds.
fn nice_range(min: f64, max: f64) -> (f64, f64) {
    if !(min.is_finite() && max.is_finite()) {
        return (0.0, 1.0);
    }
    if (max - min).abs() < 1e-12 {
        return (min - 0.5, max + 0.5);
    }
    let span = max - min;
    let pad = span * 0.05;
    (min - pad, max + pad)
}

struct Frame {
    x0: i64,
    y0: i64,
    x1: i64,
    y1: i64,
    ymin: f64,
    ymax: f64,
}

impl Frame {
    fn px(&self, t: f64) -> i64 {
        self.x0 + (t * (self.x1 - self.x0) as f64).round() as i64
    }
    fn py(&self, v: f64) -> i64 {
        let t = (v - self.ymin) / (self.ymax - self.ymin);
        self.y1 - (t * (self.y1 - self.y0) as f64).round() as i64
    }
}

fn format_tick(v: f64) -> String {
    if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else if v.abs() >= 1.0 {
        format!("{v:.2}")
    } else {
        format!("{v:.3}")
    }
}

fn draw_frame(img: &mut RgbImage, title: &str, frame: &Frame) {
    draw_text(img, MARGIN_L, 12, title, 2, FG);
    // Horizontal gridlines and y tick labels.
    for i in 0..=4 {
        let v = frame.ymin + (frame.ymax - frame.ymin) * i as f64 / 4.0;
        let y = frame.py(v);
        if i > 0 {
            draw_line(img, frame.x0, y, frame.x1, y, GRID);
        }
        let label = format_tick(v);
        draw_text(img, frame.x0 - text_width(&label, 1) - 6, y - 3, &label, 1, FG);
    }
    // Axes.
    draw_line(img, frame.x0, frame.y0, frame.x0, frame.y1, FG);
    draw_line(img, frame.x0, frame.y1, frame.x1, frame.y1, FG);
}

/// Render one or more numeric series as lines over their index.
pub fn line_chart(
    path: impl AsRef<Path>,
    title: &str,
    series: &[Series<'_>],
    x_label: &str,
) -> Result<()> {
    if series.is_empty() || series.iter().all(|s| s.values.is_empty()) {
        return Err(Error::InvalidInput("nothing to plot".into()));
    }
    let mut ymin = f64::INFINITY;
    let mut ymax = f64::NEG_INFINITY;
    let mut max_len = 0;
    for s in series {
        for &v in s.values {
            if !v.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "non-finite value in series {:?}",
                    s.name
                )));
            }
            ymin = ymin.min(v);
            ymax = ymax.max(v);
        }
        max_len = max_len.max(s.values.len());
    }
    let (ymin, ymax) = nice_range(ymin, ymax);
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, BG);
    let frame = Frame {
        x0: MARGIN_L,
        y0: MARGIN_T,
        x1: WIDTH as i64 - MARGIN_R,
        y1: HEIGHT as i64 - MARGIN_B,
        ymin,
        ymax,
    };
    draw_frame(&mut img, title, &frame);

    // X tick labels: up to 8 integer indices.
    let denom = (max_len - 1).max(1) as f64;
    let step = (max_len.max(2) - 1).div_ceil(8).max(1);
    for i in (0..max_len).step_by(step) {
        let x = frame.px(i as f64 / denom);
        draw_line(&mut img, x, frame.y1, x, frame.y1 + 4, FG);
        let label = i.to_string();
        draw_text(
            &mut img,
            x - text_width(&label, 1) / 2,
            frame.y1 + 8,
            &label,
            1,
            FG,
        );
    }
    draw_text(
        &mut img,
        (frame.x0 + frame.x1) / 2 - text_width(x_label, 1) / 2,
        HEIGHT as i64 - 20,
        x_label,
        1,
        FG,
    );

    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let pts: Vec<(i64, i64)> = s
            .values
            .iter()
            .enumerate()
            .map(|(i, &v)| (frame.px(i as f64 / denom), frame.py(v)))
            .collect();
        for pair in pts.windows(2) {
            draw_thick_line(&mut img, pair[0].0, pair[0].1, pair[1].0, pair[1].1, color);
        }
        if pts.len() == 1 {
            fill_rect(&mut img, pts[0].0 - 2, pts[0].1 - 2, pts[0].0 + 2, pts[0].1 + 2, color);
        }
        // Legend entry.
        let ly = MARGIN_T + 6 + si as i64 * 16;
        let lx = frame.x1 - 150;
        fill_rect(&mut img, lx, ly, lx + 10, ly + 10, color);
        draw_text(&mut img, lx + 16, ly + 2, s.name, 1, FG);
    }

    img.save(path.as_ref())?;
    Ok(())
}

/// Render labeled values as vertical bars with the value printed on
/// top of each bar.
pub fn bar_chart(path: impl AsRef<Path>, title: &str, bars: &[(String, f64)]) -> Result<()> {
    if bars.is_empty() {
        return Err(Error::InvalidInput("nothing to plot".into()));
    }
    let mut ymax = f64::NEG_INFINITY;
    for (name, v) in bars {
        if !v.is_finite() || *v < 0.0 {
            return Err(Error::InvalidInput(format!(
                "bar {name:?} must be finite and non-negative, got {v}"
            )));
        }
        ymax = ymax.max(*v);
    }
    let ymax = if ymax <= 0.0 { 1.0 } else { ymax * 1.1 };
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, BG);
    let frame = Frame {
        x0: MARGIN_L,
        y0: MARGIN_T,
        x1: WIDTH as i64 - MARGIN_R,
        y1: HEIGHT as i64 - MARGIN_B,
        ymin: 0.0,
        ymax,
    };
    draw_frame(&mut img, title, &frame);

    let n = bars.len() as i64;
    let slot = (frame.x1 - frame.x0) / n;
    let bar_w = (slot * 3 / 5).max(3);
    for (i, (name, v)) in bars.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let cx = frame.x0 + slot * i as i64 + slot / 2;
        let top = frame.py(*v);
        fill_rect(&mut img, cx - bar_w / 2, top, cx + bar_w / 2, frame.y1 - 1, color);
        let value = format_tick(*v);
        draw_text(
            &mut img,
            cx - text_width(&value, 1) / 2,
            top - 12,
            &value,
            1,
            FG,
        );
        // Label under the bar, truncated to the slot width.
        let max_chars = (slot / 6).max(2) as usize;
        let label: String = name.chars().take(max_chars).collect();
        draw_text(
            &mut img,
            cx - text_width(&label, 1) / 2,
            frame.y1 + 8,
            &label,
            1,
            FG,
        );
    }

    img.save(path.as_ref())?;
    Ok(())
}
