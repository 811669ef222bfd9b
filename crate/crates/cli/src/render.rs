//! Heatmap rendering. Time runs left to right, mel channel bottom to top.
//!
//! The colormap is fixed: a five-stop ramp sampled from "inferno", linear in
//! RGB between stops, from near-black at 0 through purple and red to pale
//! yellow at 1. Maps are min-max scaled before coloring.

use image::{Rgb, RgbImage};
use ndarray::Array2;

use s2t_saliency::saliency::minmax_map;

pub const COLORMAP: [(f64, [u8; 3]); 5] = [
    (0.0, [0, 0, 4]),
    (0.25, [87, 16, 110]),
    (0.5, [188, 55, 84]),
    (0.75, [249, 142, 9]),
    (1.0, [252, 255, 164]),
];

/// Weight of the heatmap when blended over the spectrogram.
pub const OVERLAY_ALPHA: f64 = 0.6;

pub fn colormap(v: f64) -> [u8; 3] {
    let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
    let i = COLORMAP.iter().position(|(s, _)| *s >= v).unwrap_or(COLORMAP.len() - 1).max(1);
    let ((s0, c0), (s1, c1)) = (COLORMAP[i - 1], COLORMAP[i]);
    let w = (v - s0) / (s1 - s0);
    std::array::from_fn(|k| (c0[k] as f64 + w * (c1[k] as f64 - c0[k] as f64)).round() as u8)
}

/// Each cell becomes a `scale x scale` block. With `background`, the heatmap
/// is blended over its grayscale rendering.
pub fn render_map(map: &Array2<f64>, background: Option<&Array2<f64>>, scale: u32) -> RgbImage {
    let (t, c) = map.dim();
    let scale = scale.max(1);
    let heat = minmax_map(map);
    let gray = background.map(minmax_map);
    let mut img = RgbImage::new(t as u32 * scale, c as u32 * scale);
    for ((ti, ci), &v) in heat.indexed_iter() {
        let mut rgb = colormap(v);
        if let Some(g) = &gray {
            let g = g[[ti, ci]] * 255.0;
            rgb = rgb.map(|h| (OVERLAY_ALPHA * h as f64 + (1.0 - OVERLAY_ALPHA) * g).round() as u8);
        }
        let row0 = (c - 1 - ci) as u32 * scale;
        for dy in 0..scale {
            for dx in 0..scale {
                img.put_pixel(ti as u32 * scale + dx, row0 + dy, Rgb(rgb));
            }
        }
    }
    img
}
