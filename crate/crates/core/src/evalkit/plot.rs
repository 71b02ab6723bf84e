//! Minimal raster line plots.

use image::{Rgb, RgbImage};

const W: u32 = 360;
const H: u32 = 240;
const MARGIN: i64 = 30;

pub struct Series {
    pub points: Vec<(f64, f64)>,
}

/// White canvas with axes and each series drawn as a polyline with square
/// markers. The y axis spans `y_range`; the x axis spans the data.
pub fn line_plot(series: &[Series], y_range: (f64, f64)) -> RgbImage {
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let axis = Rgb([0, 0, 0]);
    let (x0, y0, x1, y1) = (MARGIN, H as i64 - MARGIN, W as i64 - MARGIN, MARGIN);
    line(&mut img, (x0, y0), (x1, y0), axis);
    line(&mut img, (x0, y0), (x0, y1), axis);
    for i in 0..=4 {
        let y = y0 + (y1 - y0) * i / 4;
        line(&mut img, (x0 - 4, y), (x0, y), axis);
    }

    let xs = series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
    let (lo, hi) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let to_px = |(x, y): (f64, f64)| {
        let fx = if hi > lo { (x - lo) / span } else { 0.5 };
        let fy = ((y - y_range.0) / (y_range.1 - y_range.0)).clamp(0.0, 1.0);
        (
            x0 + (fx * (x1 - x0) as f64).round() as i64,
            y0 + (fy * (y1 - y0) as f64).round() as i64,
        )
    };
    let colors = [Rgb([31, 119, 180]), Rgb([214, 39, 40]), Rgb([44, 160, 44])];
    for (k, s) in series.iter().enumerate() {
        let c = colors[k % colors.len()];
        let px: Vec<(i64, i64)> = s.points.iter().map(|&p| to_px(p)).collect();
        for w in px.windows(2) {
            line(&mut img, w[0], w[1], c);
        }
        for &(x, y) in &px {
            for dy in -2..=2 {
                for dx in -2..=2 {
                    put(&mut img, x + dx, y + dy, c);
                }
            }
        }
    }
    img
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && x < img.width() as i64 && y < img.height() as i64 {
        img.put_pixel(x as u32, y as u32, c);
    }
}

/// Bresenham.
fn line(img: &mut RgbImage, (mut x, mut y): (i64, i64), (xe, ye): (i64, i64), c: Rgb<u8>) {
    let dx = (xe - x).abs();
    let dy = -(ye - y).abs();
    let sx = if x < xe { 1 } else { -1 };
    let sy = if y < ye { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        put(img, x, y, c);
        if x == xe && y == ye {
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
