//! File-emitting visualization: color-wheel flow rendering, normalized
//! disparity maps, and a minimal line-plot renderer for loss curves.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::io::FormatError;
use crate::types::{FlowField, Image2D};

/// HSV (h in degrees, s/v in [0,1]) to RGB bytes.
fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    let to_byte = |f: f64| ((f + m) * 255.0).round().clamp(0.0, 255.0) as u8;
    [to_byte(r), to_byte(g), to_byte(b)]
}

/// Color-wheel flow rendering: hue encodes atan2(v, u), saturation the
/// magnitude normalized by `max_magnitude` (or the field's own maximum).
/// Zero flow renders white.
pub fn visualize_flow(flow: &FlowField, max_magnitude: Option<f64>) -> RgbImage {
    let (h, w) = (flow.height(), flow.width());
    let (u, v) = (flow.u.channel(0), flow.v.channel(0));
    let max_mag = max_magnitude.unwrap_or_else(|| {
        u.iter()
            .zip(v)
            .map(|(a, b)| a.hypot(*b))
            .fold(0.0f64, f64::max)
    });
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let (uu, vv) = (u[y * w + x], v[y * w + x]);
            let mag = uu.hypot(vv);
            let sat = if max_mag > 0.0 {
                (mag / max_mag).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let hue = vv.atan2(uu).to_degrees();
            img.put_pixel(x as u32, y as u32, Rgb(hsv_to_rgb(hue, sat, 1.0)));
        }
    }
    img
}

/// Grayscale disparity rendering, linearly normalized to the display
/// range; a constant field renders mid-gray. Returns the image and the
/// (min, max) used for normalization.
pub fn visualize_disparity(d: &Image2D) -> (RgbImage, (f64, f64)) {
    let (h, w) = (d.height(), d.width());
    let (lo, hi) = d.min_max();
    let span = hi - lo;
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let g = if span > 0.0 {
                (((d.get(0, y, x) - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                128
            };
            img.put_pixel(x as u32, y as u32, Rgb([g, g, g]));
        }
    }
    (img, (lo, hi))
}

/// Writes a disparity rendering plus a JSON sidecar recording the
/// normalization range.
pub fn save_disparity(path: &Path, d: &Image2D) -> Result<(), FormatError> {
    let (img, (lo, hi)) = visualize_disparity(d);
    img.save(path).map_err(|e| FormatError::ImageFile {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let sidecar = path.with_extension("minmax.json");
    std::fs::write(
        &sidecar,
        serde_json::json!({ "min": lo, "max": hi }).to_string(),
    )
    .map_err(|source| FormatError::File {
        path: sidecar,
        source,
    })
}

pub fn save_flow(path: &Path, flow: &FlowField, max_magnitude: Option<f64>) -> Result<(), FormatError> {
    visualize_flow(flow, max_magnitude)
        .save(path)
        .map_err(|e| FormatError::ImageFile {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

const PLOT_COLORS: [[u8; 3]; 4] = [[214, 69, 65], [31, 119, 180], [44, 160, 44], [148, 103, 189]];

/// Renders labeled curves as a simple line plot (log-free linear axes,
/// legend swatches in the top-right corner).
pub fn plot_curves(curves: &[(&str, &[f64])], width: u32, height: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let margin = 40i64;
    let (w, h) = (width as i64, height as i64);

    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut max_len = 0usize;
    for (_, data) in curves {
        for &v in data.iter() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        max_len = max_len.max(data.len());
    }
    if !lo.is_finite() || !hi.is_finite() || max_len < 2 {
        return img;
    }
    if hi - lo < 1e-12 {
        hi = lo + 1.0;
    }

    let put = |img: &mut RgbImage, x: i64, y: i64, c: [u8; 3]| {
        if x >= 0 && y >= 0 && x < w && y < h {
            img.put_pixel(x as u32, y as u32, Rgb(c));
        }
    };
    // Axes.
    for x in margin..w - margin {
        put(&mut img, x, h - margin, [0, 0, 0]);
    }
    for y in margin..h - margin {
        put(&mut img, margin, y, [0, 0, 0]);
    }

    let to_px = |i: usize, v: f64, len: usize| -> (i64, i64) {
        let fx = i as f64 / (len - 1) as f64;
        let fy = (v - lo) / (hi - lo);
        (
            margin + (fx * (w - 2 * margin) as f64) as i64,
            h - margin - (fy * (h - 2 * margin) as f64) as i64,
        )
    };

    for (ci, (_, data)) in curves.iter().enumerate() {
        let color = PLOT_COLORS[ci % PLOT_COLORS.len()];
        for i in 1..data.len() {
            let (x0, y0) = to_px(i - 1, data[i - 1], data.len());
            let (x1, y1) = to_px(i, data[i], data.len());
            // Bresenham-style segment.
            let steps = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
            for s in 0..=steps {
                let x = x0 + (x1 - x0) * s / steps;
                let y = y0 + (y1 - y0) * s / steps;
                put(&mut img, x, y, color);
            }
        }
        // Legend swatch.
        for dx in 0..16 {
            for dy in 0..4 {
                put(
                    &mut img,
                    w - margin - 60 + dx,
                    margin / 2 + (ci as i64) * 8 + dy,
                    color,
                );
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flow_from(u: Vec<f64>, v: Vec<f64>, h: usize, w: usize) -> FlowField {
        FlowField::new(
            Image2D::new(h, w, 1, u).unwrap(),
            Image2D::new(h, w, 1, v).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn zero_flow_renders_white() {
        let flow = FlowField::zeros(4, 4);
        let img = visualize_flow(&flow, None);
        for p in img.pixels() {
            assert_eq!(p.0, [255, 255, 255]);
        }
    }

    #[test]
    fn opposite_directions_get_opposite_hues() {
        let m = 3.0;
        let flow = flow_from(vec![m, -m], vec![0.0, 0.0], 1, 2);
        let img = visualize_flow(&flow, Some(m));
        let right = img.get_pixel(0, 0).0;
        let left = img.get_pixel(1, 0).0;
        // Hue oracle: atan2(0, m) = 0deg (red-dominant), atan2(0, -m) =
        // 180deg (cyan-dominant); equal magnitudes, so equal saturation.
        assert!(right[0] > right[1] && right[0] > right[2], "{right:?}");
        assert!(left[1] > left[0] && left[2] > left[0], "{left:?}");
        assert_eq!(right[0], 255);
        assert_eq!(left[1], 255);
    }

    #[test]
    fn rotating_flow_rotates_hue_keeps_magnitude() {
        let m = 2.0;
        let a = visualize_flow(&flow_from(vec![m], vec![0.0], 1, 1), Some(m));
        let b = visualize_flow(&flow_from(vec![0.0], vec![m], 1, 1), Some(m));
        // 90-degree rotation moves hue by 90 degrees: red -> chartreuse.
        assert_eq!(a.get_pixel(0, 0).0, hsv_to_rgb(0.0, 1.0, 1.0));
        assert_eq!(b.get_pixel(0, 0).0, hsv_to_rgb(90.0, 1.0, 1.0));
    }

    #[test]
    fn constant_disparity_renders_mid_gray() {
        let d = Image2D::new(2, 2, 1, vec![3.3; 4]).unwrap();
        let (img, (lo, hi)) = visualize_disparity(&d);
        assert_eq!(lo, hi);
        for p in img.pixels() {
            assert_eq!(p.0, [128, 128, 128]);
        }
    }

    #[test]
    fn disparity_normalization_is_affine_invariant() {
        let base: Vec<f64> = vec![0.0, 1.0, 2.0, 7.0];
        let scaled: Vec<f64> = base.iter().map(|v| v * 3.0 + 11.0).collect();
        let a = visualize_disparity(&Image2D::new(2, 2, 1, base).unwrap()).0;
        let b = visualize_disparity(&Image2D::new(2, 2, 1, scaled).unwrap()).0;
        assert_eq!(a.as_raw(), b.as_raw());
    }

    #[test]
    fn disparity_matches_per_pixel_normalization_oracle() {
        let data: Vec<f64> = vec![1.0, 4.0, 2.5, 9.0, 3.0, 6.5];
        let d = Image2D::new(2, 3, 1, data.clone()).unwrap();
        let (img, (lo, hi)) = visualize_disparity(&d);
        for (i, &v) in data.iter().enumerate() {
            let expected = (((v - lo) / (hi - lo)) * 255.0).round() as u8;
            let px = img.get_pixel((i % 3) as u32, (i / 3) as u32).0;
            assert_eq!(px, [expected, expected, expected]);
        }
    }

    #[test]
    fn plot_is_white_canvas_with_curves() {
        let a: Vec<f64> = (0..50).map(|i| (i as f64 * 0.3).sin()).collect();
        let b: Vec<f64> = (0..50).map(|i| i as f64 * 0.01).collect();
        let img = plot_curves(&[("a", &a), ("b", &b)], 320, 200);
        assert_eq!(img.width(), 320);
        let non_white = img.pixels().filter(|p| p.0 != [255, 255, 255]).count();
        assert!(non_white > 200, "plot should draw axes and curves");
    }
}
