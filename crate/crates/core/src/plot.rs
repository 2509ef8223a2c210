//! Grouped bar charts of a metric report, one group per `(R, n_acs)` and one
//! bar per method, written as PNG.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::recon::{Metric, MetricReport, MetricRow};

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const BLACK: Rgb<u8> = Rgb([0, 0, 0]);
const GRID: Rgb<u8> = Rgb([220, 220, 220]);
const PALETTE: [Rgb<u8>; 8] = [
    Rgb([128, 128, 128]),
    Rgb([31, 119, 180]),
    Rgb([255, 127, 14]),
    Rgb([44, 160, 44]),
    Rgb([214, 39, 40]),
    Rgb([148, 103, 189]),
    Rgb([140, 86, 75]),
    Rgb([227, 119, 194]),
];

/// 5x7 glyphs, one row per byte, bit 4 = leftmost column.
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
        'Y' => [0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        ',' => [0x00, 0x00, 0x00, 0x00, 0x0C, 0x04, 0x08],
        ':' => [0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        '+' => [0x00, 0x04, 0x04, 0x1F, 0x04, 0x04, 0x00],
        '=' => [0x00, 0x00, 0x1F, 0x00, 0x1F, 0x00, 0x00],
        '_' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F],
        '/' => [0x00, 0x01, 0x02, 0x04, 0x08, 0x10, 0x00],
        '(' => [0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02],
        ')' => [0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08],
        _ => [0; 7],
    }
}

fn text_width(s: &str) -> u32 {
    6 * s.chars().count() as u32
}

fn draw_text(img: &mut RgbImage, x: i64, y: i64, s: &str, color: Rgb<u8>) {
    for (i, c) in s.chars().enumerate() {
        let rows = glyph(c);
        for (dy, row) in rows.iter().enumerate() {
            for dx in 0..5 {
                if row & (0x10 >> dx) != 0 {
                    put(img, x + 6 * i as i64 + dx, y + dy as i64, color);
                }
            }
        }
    }
}

fn put(img: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}

fn fill_rect(img: &mut RgbImage, x0: i64, y0: i64, x1: i64, y1: i64, color: Rgb<u8>) {
    for y in y0.min(y1)..y0.max(y1) {
        for x in x0.min(x1)..x0.max(x1) {
            put(img, x, y, color);
        }
    }
}

fn tick_label(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s.is_empty() || s == "-0" { "0".into() } else { s.into() }
}

fn series_label(row: &MetricRow) -> String {
    match row.phase_source {
        Some(p) => format!("{} {}", row.method, p),
        None => row.method.clone(),
    }
}

/// Bars show the mean; whiskers show one standard deviation. Non-finite
/// means (e.g. PSNR of an exact reconstruction) are left out.
pub fn grouped_bar_chart(report: &MetricReport, metric: Metric, path: &Path) -> Result<()> {
    let rows: Vec<&MetricRow> = report.rows.iter().filter(|r| r.metric == metric).collect();
    let mut groups = Vec::new();
    let mut series = Vec::new();
    for r in &rows {
        if !groups.contains(&r.spec) {
            groups.push(r.spec);
        }
        let label = series_label(r);
        if !series.contains(&label) {
            series.push(label);
        }
    }
    if groups.is_empty() {
        return Err(Error::Contract(format!("no {} rows to plot", metric.as_str())));
    }
    let top = rows
        .iter()
        .filter(|r| r.mean.is_finite())
        .map(|r| r.mean + if r.std.is_finite() { r.std } else { 0.0 })
        .fold(0.0, f64::max);
    let y_max = if top > 0.0 { top * 1.1 } else { 1.0 };

    let bar_w = 14u32;
    let group_w = bar_w * series.len() as u32 + 24;
    let legend_w = series.iter().map(|s| text_width(s)).max().unwrap_or(0) + 40;
    let (left, right, top_m, bottom) = (60u32, legend_w + 20, 30u32, 40u32);
    let plot_h = 300u32;
    let width = left + group_w * groups.len() as u32 + right;
    let height = top_m + plot_h + bottom;
    let mut img = RgbImage::from_pixel(width, height, WHITE);
    let y_of = |v: f64| top_m as i64 + plot_h as i64 - ((v / y_max).clamp(0.0, 1.0) * plot_h as f64).round() as i64;

    for k in 0..=5 {
        let v = y_max * k as f64 / 5.0;
        let y = y_of(v);
        fill_rect(&mut img, left as i64, y, (width - right) as i64, y + 1, GRID);
        let label = tick_label(v);
        draw_text(&mut img, left as i64 - 6 - text_width(&label) as i64, y - 3, &label, BLACK);
    }
    fill_rect(&mut img, left as i64 - 1, top_m as i64, left as i64, (top_m + plot_h) as i64 + 1, BLACK);
    fill_rect(&mut img, left as i64 - 1, (top_m + plot_h) as i64, (width - right) as i64, (top_m + plot_h) as i64 + 1, BLACK);
    draw_text(&mut img, left as i64, 10, metric.as_str(), BLACK);

    for (gi, spec) in groups.iter().enumerate() {
        let gx = left as i64 + (gi as u32 * group_w) as i64 + 12;
        for (si, label) in series.iter().enumerate() {
            let Some(row) = rows.iter().find(|r| r.spec == *spec && series_label(r) == *label) else {
                continue;
            };
            if !row.mean.is_finite() {
                continue;
            }
            let x0 = gx + (si as u32 * bar_w) as i64;
            let color = PALETTE[si % PALETTE.len()];
            fill_rect(&mut img, x0 + 1, y_of(row.mean), x0 + bar_w as i64 - 1, y_of(0.0), color);
            if row.std.is_finite() && row.std > 0.0 {
                let xc = x0 + bar_w as i64 / 2;
                let (ya, yb) = (y_of(row.mean + row.std), y_of((row.mean - row.std).max(0.0)));
                fill_rect(&mut img, xc, ya, xc + 1, yb + 1, BLACK);
                fill_rect(&mut img, xc - 3, ya, xc + 4, ya + 1, BLACK);
                fill_rect(&mut img, xc - 3, yb, xc + 4, yb + 1, BLACK);
            }
        }
        let label = format!("R{} ACS{}", spec.r, spec.n_acs);
        let cx = gx + (bar_w * series.len() as u32 / 2) as i64;
        draw_text(&mut img, cx - text_width(&label) as i64 / 2, (top_m + plot_h + 10) as i64, &label, BLACK);
    }

    let lx = (width - right + 20) as i64;
    for (si, label) in series.iter().enumerate() {
        let y = top_m as i64 + 14 * si as i64;
        fill_rect(&mut img, lx, y, lx + 10, y + 8, PALETTE[si % PALETTE.len()]);
        draw_text(&mut img, lx + 16, y, label, BLACK);
    }

    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))
}
