//! Attention weights rendered over the spectrogram.

use std::fmt::Write as _;

use afcn_core::attention::AttentionWeights;
use afcn_core::model::ReceptiveField;
use afcn_core::Real;

/// `F'` rows of `T'` comma-separated weights; row 0 is the lowest frequency.
pub fn alpha_csv<T: Real>(w: &AttentionWeights<T>) -> String {
    let mut s = String::new();
    let a = w.alpha.data();
    for r in 0..w.rows {
        let row: Vec<String> = (0..w.cols).map(|c| format!("{:.9}", a[r * w.cols + c].as_f64())).collect();
        let _ = writeln!(s, "{}", row.join(","));
    }
    s
}

/// Paints every spectrogram cell with the weight of the grid cell whose
/// receptive-field centre is nearest. Returns `[bins, frames]` row-major.
pub fn upsample_alpha<T: Real>(w: &AttentionWeights<T>, rf: &ReceptiveField, bins: usize, frames: usize) -> Vec<f64> {
    let a = w.alpha.data();
    let cols: Vec<usize> = (0..frames).map(|t| rf.nearest_cell(t, w.cols)).collect();
    let mut out = Vec::with_capacity(bins * frames);
    for f in 0..bins {
        let r = rf.nearest_cell(f, w.rows);
        out.extend(cols.iter().map(|&c| a[r * w.cols + c].as_f64()));
    }
    out
}

/// Binary greyscale PGM of a `[rows, cols]` grid, flipped vertically so row 0
/// (low frequency) ends up at the bottom of the image.
pub fn pgm(pixels: &[u8], rows: usize, cols: usize) -> Vec<u8> {
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    for r in (0..rows).rev() {
        out.extend_from_slice(&pixels[r * cols..(r + 1) * cols]);
    }
    out
}

/// Linear scaling with the maximum mapped to 255.
pub fn scale_to_max(values: &[f64]) -> Vec<u8> {
    let max = values.iter().copied().fold(0.0f64, f64::max);
    values
        .iter()
        .map(|&v| if max > 0.0 { (v / max * 255.0).round().clamp(0.0, 255.0) as u8 } else { 0 })
        .collect()
}

/// `log(1 + x)` stretched over the full grey range; display only.
pub fn scale_log(values: &[f64]) -> Vec<u8> {
    let logs: Vec<f64> = values.iter().map(|v| v.max(0.0).ln_1p()).collect();
    let lo = logs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    logs.iter()
        .map(|&v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 })
        .collect()
}
