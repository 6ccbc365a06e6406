//! PNG rendering of frames, disagreement heatmaps and review overlays.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower and upper value mapped to the ends of a color scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueRange {
    pub min: f64,
    pub max: f64,
}

impl ValueRange {
    pub fn of(values: &[f32]) -> Self {
        let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
        for &v in values {
            min = min.min(f64::from(v));
            max = max.max(f64::from(v));
        }
        if values.is_empty() {
            (min, max) = (0.0, 0.0);
        }
        Self { min, max }
    }

    /// Position of `v` in `[0, 1]`; a flat range maps everything to 0.
    pub fn normalize(&self, v: f64) -> f64 {
        let span = self.max - self.min;
        if span <= 0.0 {
            0.0
        } else {
            ((v - self.min) / span).clamp(0.0, 1.0)
        }
    }
}

/// Black → red → yellow → white. Luminance increases monotonically.
pub fn heat_color(x: f64) -> [u8; 3] {
    let x = x.clamp(0.0, 1.0) * 3.0;
    let ch = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    [ch(x), ch(x - 1.0), ch(x - 2.0)]
}

fn check_len(len: usize, rows: usize, cols: usize, what: &str) -> Result<()> {
    if len != rows * cols {
        return Err(Error::Shape(format!("{what} has {len} values, expected {rows}x{cols}")));
    }
    Ok(())
}

fn encode(data: &[u8], rows: usize, cols: usize, color: png::ColorType) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, cols as u32, rows as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Format(format!("png header: {e}")))?;
        writer
            .write_image_data(data)
            .map_err(|e| Error::Format(format!("png data: {e}")))?;
        writer.finish().map_err(|e| Error::Format(format!("png: {e}")))?;
    }
    Ok(out)
}

pub fn rgb_png(rgb: &[u8], rows: usize, cols: usize) -> Result<Vec<u8>> {
    check_len(rgb.len(), rows, cols * 3, "rgb buffer")?;
    encode(rgb, rows, cols, png::ColorType::Rgb)
}

fn gray_levels(frame: &[f32], range: ValueRange) -> Vec<u8> {
    frame
        .iter()
        .map(|&v| (range.normalize(f64::from(v)) * 255.0).round() as u8)
        .collect()
}

/// 8-bit grayscale PNG, windowed to the frame's own min/max.
pub fn gray_png(frame: &[f32], rows: usize, cols: usize) -> Result<(Vec<u8>, ValueRange)> {
    check_len(frame.len(), rows, cols, "frame")?;
    let range = ValueRange::of(frame);
    Ok((encode(&gray_levels(frame, range), rows, cols, png::ColorType::Grayscale)?, range))
}

/// Heatmap PNG scaled to the frame's min/max, which is returned for a legend.
pub fn heatmap_png(frame: &[f32], rows: usize, cols: usize) -> Result<(Vec<u8>, ValueRange)> {
    check_len(frame.len(), rows, cols, "frame")?;
    let range = ValueRange::of(frame);
    let rgb: Vec<u8> = frame
        .iter()
        .flat_map(|&v| heat_color(range.normalize(f64::from(v))))
        .collect();
    Ok((encode(&rgb, rows, cols, png::ColorType::Rgb)?, range))
}

/// Foreground pixels with a background 4-neighbor or on the image border.
pub fn contour(mask: &[u8], rows: usize, cols: usize) -> Vec<bool> {
    let on = |m: usize, n: usize| mask[m * cols + n] != 0;
    let mut out = vec![false; rows * cols];
    for m in 0..rows {
        for n in 0..cols {
            if !on(m, n) {
                continue;
            }
            let edge = m == 0
                || n == 0
                || m + 1 == rows
                || n + 1 == cols
                || !on(m - 1, n)
                || !on(m + 1, n)
                || !on(m, n - 1)
                || !on(m, n + 1);
            out[m * cols + n] = edge;
        }
    }
    out
}

const CONTOUR_RGB: [u8; 3] = [0, 255, 0];

/// Grayscale image with the disagreement heatmap blended in at `alpha` and the
/// mask contour drawn on top.
pub fn overlay_png(image: &[f32], mask: &[u8], map: &[f32], rows: usize, cols: usize, alpha: f64) -> Result<Vec<u8>> {
    check_len(image.len(), rows, cols, "image")?;
    check_len(mask.len(), rows, cols, "mask")?;
    check_len(map.len(), rows, cols, "map")?;
    let gray = gray_levels(image, ValueRange::of(image));
    let range = ValueRange::of(map);
    let edge = contour(mask, rows, cols);
    let alpha = alpha.clamp(0.0, 1.0);
    let mut rgb = Vec::with_capacity(rows * cols * 3);
    for i in 0..rows * cols {
        if edge[i] {
            rgb.extend_from_slice(&CONTOUR_RGB);
            continue;
        }
        let x = range.normalize(f64::from(map[i]));
        let heat = heat_color(x);
        // weight by the value so zero-disagreement areas keep the plain image
        let a = alpha * x;
        for c in heat {
            rgb.push(((1.0 - a) * f64::from(gray[i]) + a * f64::from(c)).round() as u8);
        }
    }
    rgb_png(&rgb, rows, cols)
}
