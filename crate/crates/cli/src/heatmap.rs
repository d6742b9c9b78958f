//! Greyscale (signals x turns) attention heatmap; darker cells carry more weight.

use image::{GrayImage, Luma};

const CELL: u32 = 40;
const BORDER: u32 = 1;

/// One row per signal, one column per window turn (oldest first). Weights
/// are clamped to `[0, 1]`.
pub fn render(rows: &[&Vec<f64>]) -> GrayImage {
    let n_cols = rows.iter().map(|r| r.len()).max().unwrap_or(0) as u32;
    let n_rows = rows.len() as u32;
    let step = CELL + BORDER;
    let mut img = GrayImage::from_pixel(n_cols * step + BORDER, n_rows * step + BORDER, Luma([128]));
    for (r, row) in rows.iter().enumerate() {
        for (c, &w) in row.iter().enumerate() {
            let shade = (255.0 * (1.0 - w.clamp(0.0, 1.0))).round() as u8;
            let (x0, y0) = (c as u32 * step + BORDER, r as u32 * step + BORDER);
            for y in y0..y0 + CELL {
                for x in x0..x0 + CELL {
                    img.put_pixel(x, y, Luma([shade]));
                }
            }
        }
    }
    img
}
