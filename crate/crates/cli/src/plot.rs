//! Minimal PNG rendering: greyscale slices, label maps and line charts.

use std::path::Path;

use hidden_potts::{Error, LatticeSpec, Result};
use image::{ImageFormat, Rgb, RgbImage};

const PALETTE: [[u8; 3]; 12] = [
    [31, 119, 180],
    [174, 199, 232],
    [255, 127, 14],
    [255, 187, 120],
    [220, 220, 220],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [255, 255, 255],
    [44, 160, 44],
    [227, 119, 194],
    [188, 189, 34],
];

pub const SERIES: [[u8; 3]; 4] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [148, 103, 189],
];

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, ImageFormat::Png)
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

/// Sites of the middle slice, row by row.
fn middle_slice(spec: &LatticeSpec) -> (u32, u32, Vec<usize>) {
    let [nx, ny, nz] = spec.dims3();
    let z = nz / 2;
    let sites = (0..ny)
        .flat_map(|y| (0..nx).map(move |x| spec.index([x, y, z])))
        .collect();
    (nx as u32, ny as u32, sites)
}

/// Greyscale image of `values`, scaled from min to max.
pub fn grey(path: &Path, spec: &LatticeSpec, values: &[f64]) -> Result<()> {
    let (w, h, sites) = middle_slice(spec);
    let (lo, hi) = sites
        .iter()
        .map(|&i| values[i])
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
            (a.min(v), b.max(v))
        });
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut img = RgbImage::new(w, h);
    for (p, &i) in sites.iter().enumerate() {
        let g = (255.0 * (values[i] - lo) / span).round() as u8;
        img.put_pixel(p as u32 % w, p as u32 / w, Rgb([g, g, g]));
    }
    save(&img, path)
}

pub fn labels(path: &Path, spec: &LatticeSpec, labels: &[u8]) -> Result<()> {
    let (w, h, sites) = middle_slice(spec);
    let mut img = RgbImage::new(w, h);
    for (p, &i) in sites.iter().enumerate() {
        img.put_pixel(
            p as u32 % w,
            p as u32 / w,
            Rgb(PALETTE[labels[i] as usize % PALETTE.len()]),
        );
    }
    save(&img, path)
}

fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), colour: [u8; 3]) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, Rgb(colour));
        }
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

/// Line chart of one or more `(x, y)` series on shared axes.
pub fn lines(path: &Path, series: &[Vec<(f64, f64)>]) -> Result<()> {
    const W: u32 = 480;
    const H: u32 = 320;
    const M: i64 = 30;
    let pts = series.iter().flatten();
    let (mut x0, mut x1, mut y0, mut y1) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for &(x, y) in pts.filter(|(x, y)| x.is_finite() && y.is_finite()) {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        return Err(Error::Data("nothing to plot".into()));
    }
    let (xs, ys) = (
        if x1 > x0 { x1 - x0 } else { 1.0 },
        if y1 > y0 { y1 - y0 } else { 1.0 },
    );
    let to_px = |(x, y): (f64, f64)| {
        let px = M + ((x - x0) / xs * (W as i64 - 2 * M) as f64).round() as i64;
        let py = H as i64 - M - ((y - y0) / ys * (H as i64 - 2 * M) as f64).round() as i64;
        (px, py)
    };
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let axis = [0, 0, 0];
    draw_line(
        &mut img,
        (M, H as i64 - M),
        (W as i64 - M, H as i64 - M),
        axis,
    );
    draw_line(&mut img, (M, H as i64 - M), (M, M), axis);
    for (s, points) in series.iter().enumerate() {
        let colour = SERIES[s % SERIES.len()];
        let finite: Vec<_> = points
            .iter()
            .copied()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .collect();
        for pair in finite.windows(2) {
            draw_line(&mut img, to_px(pair[0]), to_px(pair[1]), colour);
        }
        for &p in &finite {
            let (cx, cy) = to_px(p);
            for d in -2..=2 {
                draw_line(&mut img, (cx - 2, cy + d), (cx + 2, cy + d), colour);
            }
        }
    }
    save(&img, path)
}
