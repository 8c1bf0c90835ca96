//! Static heat-map rendering of attention reports.
//!
//! The image is a single row of cells, one per marker token in registry
//! order, colored by the token's normalized attention mass relative to the
//! largest mass in the report.

use std::path::Path;

use image::{ImageFormat, Rgb, RgbImage};
use thiserror::Error;

use crate::inference::AttentionReport;

#[derive(Debug, Error)]
pub enum VizError {
    #[error("cannot render an empty report")]
    EmptyReport,
    #[error("failed to write image {path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },
}

/// Cell edge length in pixels.
const CELL: u32 = 48;
/// Border thickness between cells.
const BORDER: u32 = 2;

const COLD: [f64; 3] = [22.0, 28.0, 86.0];
const HOT: [f64; 3] = [250.0, 222.0, 64.0];

fn heat_color(intensity: f64) -> Rgb<u8> {
    let t = intensity.clamp(0.0, 1.0);
    let channel = |i: usize| (COLD[i] + t * (HOT[i] - COLD[i])).round() as u8;
    Rgb([channel(0), channel(1), channel(2)])
}

/// Renders `report` as a PNG heat strip at `path`. Cell brightness scales
/// linearly from the smallest to the largest mass.
pub fn render_attention_png(report: &AttentionReport, path: &Path) -> Result<(), VizError> {
    if report.masses.is_empty() {
        return Err(VizError::EmptyReport);
    }
    let n = report.masses.len() as u32;
    let width = n * CELL + (n + 1) * BORDER;
    let height = CELL + 2 * BORDER;
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));

    let max = report.masses.iter().map(|m| m.mass).fold(f64::NEG_INFINITY, f64::max);
    for (i, m) in report.masses.iter().enumerate() {
        let intensity = if max > 0.0 { m.mass / max } else { 0.0 };
        let color = heat_color(intensity);
        let x0 = BORDER + i as u32 * (CELL + BORDER);
        for dy in 0..CELL {
            for dx in 0..CELL {
                img.put_pixel(x0 + dx, BORDER + dy, color);
            }
        }
    }

    img.save_with_format(path, ImageFormat::Png)
        .map_err(|source| VizError::Image { path: path.display().to_string(), source })
}
