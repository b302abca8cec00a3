//! Minimal deterministic raster plots. Output bytes depend only on the data.

use std::path::Path;

use anyhow::Context;
use ews_core::analysis::BoxSummary;
use image::{Rgb, RgbImage};

const WIDTH: u32 = 640;
const HEIGHT: u32 = 400;
const MARGIN: f64 = 40.0;
const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);
pub const PALETTE: [Rgb<u8>; 6] = [
    Rgb([31, 119, 180]),
    Rgb([214, 39, 40]),
    Rgb([44, 160, 44]),
    Rgb([255, 127, 14]),
    Rgb([148, 103, 189]),
    Rgb([140, 86, 75]),
];

pub struct Canvas {
    img: RgbImage,
    x_range: (f64, f64),
    y_range: (f64, f64),
}

impl Canvas {
    /// A blank plot with axes and five horizontal grid lines.
    pub fn new(x_range: (f64, f64), y_range: (f64, f64)) -> Self {
        let pad = |(lo, hi): (f64, f64)| if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
        let mut c = Self {
            img: RgbImage::from_pixel(WIDTH, HEIGHT, WHITE),
            x_range: pad(x_range),
            y_range: pad(y_range),
        };
        let (x0, x1) = (MARGIN, WIDTH as f64 - MARGIN / 2.0);
        for i in 0..=4 {
            let y = c.y_range.0 + (c.y_range.1 - c.y_range.0) * i as f64 / 4.0;
            let py = c.py(y);
            c.line_px((x0, py), (x1, py), GRID);
        }
        let bottom = HEIGHT as f64 - MARGIN;
        c.line_px((x0, MARGIN / 2.0), (x0, bottom), AXIS);
        c.line_px((x0, bottom), (x1, bottom), AXIS);
        c
    }

    fn px(&self, x: f64) -> f64 {
        let (lo, hi) = self.x_range;
        MARGIN + (x - lo) / (hi - lo) * (WIDTH as f64 - 1.5 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        let (lo, hi) = self.y_range;
        HEIGHT as f64 - MARGIN - (y - lo) / (hi - lo) * (HEIGHT as f64 - 1.5 * MARGIN)
    }

    fn put(&mut self, x: i64, y: i64, color: Rgb<u8>) {
        if x >= 0 && y >= 0 && (x as u32) < WIDTH && (y as u32) < HEIGHT {
            self.img.put_pixel(x as u32, y as u32, color);
        }
    }

    fn line_px(&mut self, a: (f64, f64), b: (f64, f64), color: Rgb<u8>) {
        let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil().max(1.0) as i64;
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            let x = (a.0 + t * (b.0 - a.0)).round() as i64;
            let y = (a.1 + t * (b.1 - a.1)).round() as i64;
            self.put(x, y, color);
        }
    }

    pub fn line(&mut self, a: (f64, f64), b: (f64, f64), color: Rgb<u8>) {
        self.line_px((self.px(a.0), self.py(a.1)), (self.px(b.0), self.py(b.1)), color);
    }

    pub fn polyline(&mut self, points: &[(f64, f64)], color: Rgb<u8>) {
        for w in points.windows(2) {
            self.line(w[0], w[1], color);
        }
        for &p in points {
            self.marker(p, color);
        }
    }

    pub fn marker(&mut self, p: (f64, f64), color: Rgb<u8>) {
        let (cx, cy) = (self.px(p.0).round() as i64, self.py(p.1).round() as i64);
        for dy in -2..=2 {
            for dx in -2..=2 {
                self.put(cx + dx, cy + dy, color);
            }
        }
    }

    pub fn fill_rect(&mut self, x: (f64, f64), y: (f64, f64), color: Rgb<u8>) {
        let (x0, x1) = (self.px(x.0).round() as i64, self.px(x.1).round() as i64);
        let (ya, yb) = (self.py(y.0).round() as i64, self.py(y.1).round() as i64);
        for py in ya.min(yb)..=ya.max(yb) {
            for px in x0.min(x1)..=x0.max(x1) {
                self.put(px, py, color);
            }
        }
    }

    /// One box centred at `x`: whiskers at min/max, box from q1 to q3 and a
    /// median bar. `marker` draws the full-model value.
    pub fn boxplot(&mut self, x: f64, half: f64, b: &BoxSummary, color: Rgb<u8>, marker: Option<f64>) {
        let light = Rgb(color.0.map(|c| c / 2 + 128));
        self.fill_rect((x - half, x + half), (b.q1, b.q3), light);
        self.line((x, b.min), (x, b.q1), color);
        self.line((x, b.q3), (x, b.max), color);
        for y in [b.min, b.max] {
            self.line((x - half / 2.0, y), (x + half / 2.0, y), color);
        }
        self.line((x - half, b.median), (x + half, b.median), AXIS);
        if let Some(m) = marker {
            self.marker((x, m), PALETTE[1]);
        }
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        self.img.save(path).with_context(|| format!("writing {}", path.display()))
    }
}

/// Smallest and largest of the given values.
pub fn extent(values: impl IntoIterator<Item = f64>) -> (f64, f64) {
    values
        .into_iter()
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}
