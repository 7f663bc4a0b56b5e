//! Tiny deterministic raster plotting: enough for score traces, mode
//! timelines, and sweep curves, without pulling in a charting stack.
//! Output is PNG; identical inputs produce identical bytes.

use crate::{Error, Result};
use image::{ImageBuffer, Rgb};
use std::path::Path;

pub const BG: Rgb<u8> = Rgb([250, 250, 248]);
pub const AXIS: Rgb<u8> = Rgb([60, 60, 60]);
pub const SERIES: Rgb<u8> = Rgb([31, 119, 180]);
pub const ACCENT: Rgb<u8> = Rgb([214, 39, 40]);
pub const SOFT: Rgb<u8> = Rgb([150, 150, 150]);
pub const FULL_COLOR: Rgb<u8> = Rgb([214, 39, 40]);
pub const SKIP_COLOR: Rgb<u8> = Rgb([44, 160, 44]);

pub struct Canvas {
    pub img: ImageBuffer<Rgb<u8>, Vec<u8>>,
}

impl Canvas {
    pub fn new(w: u32, h: u32) -> Self {
        Canvas { img: ImageBuffer::from_pixel(w, h, BG) }
    }

    pub fn put(&mut self, x: i64, y: i64, c: Rgb<u8>) {
        if x >= 0 && y >= 0 && (x as u32) < self.img.width() && (y as u32) < self.img.height() {
            self.img.put_pixel(x as u32, y as u32, c);
        }
    }

    pub fn line(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: Rgb<u8>) {
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.put(x, y, c);
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

    pub fn rect(&mut self, x: i64, y: i64, w: i64, h: i64, c: Rgb<u8>) {
        for yy in y..y + h {
            for xx in x..x + w {
                self.put(xx, yy, c);
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.img.save(path).map_err(|e| Error::Io(std::io::Error::other(e)))
    }
}

/// Map data coordinates into a margin-inset plot area.
pub struct Frame {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
    pub px: i64,
    pub py: i64,
    pub pw: i64,
    pub ph: i64,
}

impl Frame {
    pub fn fit(w: u32, h: u32, x0: f64, x1: f64, y0: f64, y1: f64) -> Self {
        let m = 30i64;
        Frame {
            x0,
            x1,
            y0,
            y1,
            px: m,
            py: m / 2,
            pw: w as i64 - m - m / 2,
            ph: h as i64 - m,
        }
    }

    pub fn x(&self, v: f64) -> i64 {
        let t = if self.x1 > self.x0 { (v - self.x0) / (self.x1 - self.x0) } else { 0.5 };
        self.px + (t * self.pw as f64).round() as i64
    }

    pub fn y(&self, v: f64) -> i64 {
        let t = if self.y1 > self.y0 { (v - self.y0) / (self.y1 - self.y0) } else { 0.5 };
        self.py + self.ph - (t * self.ph as f64).round() as i64
    }

    pub fn axes(&self, c: &mut Canvas) {
        c.line(self.px, self.py, self.px, self.py + self.ph, AXIS);
        c.line(self.px, self.py + self.ph, self.px + self.pw, self.py + self.ph, AXIS);
    }

    pub fn polyline(&self, c: &mut Canvas, pts: &[(f64, f64)], color: Rgb<u8>) {
        for w in pts.windows(2) {
            c.line(self.x(w[0].0), self.y(w[0].1), self.x(w[1].0), self.y(w[1].1), color);
        }
    }

    pub fn hline(&self, c: &mut Canvas, v: f64, color: Rgb<u8>) {
        let y = self.y(v);
        c.line(self.px, y, self.px + self.pw, y, color);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_inputs_produce_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let render = |p: &Path| {
            let mut c = Canvas::new(120, 80);
            let f = Frame::fit(120, 80, 0.0, 10.0, 0.0, 1.0);
            f.axes(&mut c);
            f.polyline(&mut c, &[(0.0, 0.1), (5.0, 0.9), (10.0, 0.4)], SERIES);
            f.hline(&mut c, 0.5, ACCENT);
            c.save(p).unwrap();
        };
        let p1 = dir.path().join("a.png");
        let p2 = dir.path().join("b.png");
        render(&p1);
        render(&p2);
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn out_of_bounds_pixels_are_ignored() {
        let mut c = Canvas::new(10, 10);
        c.put(-5, -5, AXIS);
        c.put(50, 3, AXIS);
        c.line(-10, 5, 20, 5, SERIES);
        assert_eq!(c.img.get_pixel(5, 5), &SERIES);
    }
}
