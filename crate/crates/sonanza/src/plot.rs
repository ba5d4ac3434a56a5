//! Static PNG figures: the augmentation preview grid and loss curves.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use sonanza_core::augment::{apply, AugmentationKind, AugmentationParams};
use sonanza_core::dsp::MelSpectrogram;

use crate::error::{Error, Result};

/// Pixels between preview panels.
pub const GUTTER: u32 = 2;

/// Panel geometry of a preview grid: panel `i` (in [`AugmentationKind::ALL`]
/// order, row-major over a 3x3 grid) has its top-left corner at `origin(i)`.
/// Each panel maps one spectrogram bin to one pixel, highest mel bin on top.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridLayout {
    pub panel_width: u32,
    pub panel_height: u32,
}

impl GridLayout {
    pub fn origin(&self, panel: usize) -> (u32, u32) {
        let (row, col) = ((panel / 3) as u32, (panel % 3) as u32);
        (col * (self.panel_width + GUTTER), row * (self.panel_height + GUTTER))
    }

    pub fn size(&self) -> (u32, u32) {
        (3 * self.panel_width + 2 * GUTTER, 3 * self.panel_height + 2 * GUTTER)
    }

    /// Image row of a mel bin inside a panel.
    pub fn row_of_mel(&self, panel: usize, mel: usize) -> u32 {
        self.origin(panel).1 + self.panel_height - 1 - mel as u32
    }
}

/// One grayscale panel per augmentation kind, each normalized to its own
/// min..max (a constant panel renders mid-gray).
pub fn render_preview(mel: &MelSpectrogram, params: &AugmentationParams) -> Result<(GrayImage, GridLayout)> {
    let (n_mels, n_frames) = mel.shape();
    let layout = GridLayout {
        panel_width: n_frames as u32,
        panel_height: n_mels as u32,
    };
    let (w, h) = layout.size();
    let mut img = GrayImage::from_pixel(w, h, Luma([255]));
    for (i, &kind) in AugmentationKind::ALL.iter().enumerate() {
        let view = apply(kind, params, mel)?;
        let data = view.data();
        let lo = data.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = data.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let (x0, _) = layout.origin(i);
        for m in 0..n_mels {
            let y = layout.row_of_mel(i, m);
            for t in 0..n_frames {
                let v = data[m * n_frames + t];
                let level = if hi > lo {
                    ((v - lo) / (hi - lo) * 255.0).round() as u8
                } else {
                    128
                };
                img.put_pixel(x0 + t as u32, y, Luma([level]));
            }
        }
    }
    Ok((img, layout))
}

pub fn preview_grid(mel: &MelSpectrogram, params: &AugmentationParams, path: &Path) -> Result<GridLayout> {
    let (img, layout) = render_preview(mel, params)?;
    save(path, |p| img.save(p))?;
    Ok(layout)
}

fn save(path: &Path, f: impl FnOnce(&Path) -> image::ImageResult<()>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    f(path).map_err(|source| Error::Image {
        path: path.into(),
        source,
    })
}

const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [140, 86, 75],
];

pub const CURVE_WIDTH: u32 = 640;
pub const CURVE_HEIGHT: u32 = 400;
const MARGIN: u32 = 30;

/// Draws each series as a polyline over shared axes: x spans the longest
/// series, y spans all finite values. Series colors follow input order.
pub fn render_curves(series: &[&[f64]]) -> RgbImage {
    let mut img = RgbImage::from_pixel(CURVE_WIDTH, CURVE_HEIGHT, Rgb([255, 255, 255]));
    let axis = Rgb([0, 0, 0]);
    let (left, right, top, bottom) = (MARGIN, CURVE_WIDTH - MARGIN, MARGIN, CURVE_HEIGHT - MARGIN);
    for x in left..=right {
        img.put_pixel(x, bottom, axis);
    }
    for y in top..=bottom {
        img.put_pixel(left, y, axis);
    }
    let finite = series.iter().flat_map(|s| s.iter().copied()).filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let longest = series.iter().map(|s| s.len()).max().unwrap_or(0);
    if !lo.is_finite() || longest == 0 {
        return img;
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let to_px = |i: usize, v: f64| {
        let fx = if longest > 1 { i as f64 / (longest - 1) as f64 } else { 0.5 };
        let fy = (v - lo) / span;
        (
            left as f64 + fx * (right - left) as f64,
            bottom as f64 - fy * (bottom - top) as f64,
        )
    };
    for (k, s) in series.iter().enumerate() {
        let color = Rgb(PALETTE[k % PALETTE.len()]);
        let pts: Vec<(f64, f64)> = s
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, &v)| to_px(i, v))
            .collect();
        if let [p] = pts.as_slice() {
            img.put_pixel(p.0.round() as u32, p.1.round() as u32, color);
        }
        for w in pts.windows(2) {
            line(&mut img, w[0], w[1], color);
        }
    }
    img
}

fn line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), color: Rgb<u8>) {
    let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil().max(1.0) as usize;
    for s in 0..=steps {
        let f = s as f64 / steps as f64;
        let (x, y) = (a.0 + f * (b.0 - a.0), a.1 + f * (b.1 - a.1));
        let (x, y) = (x.round() as u32, y.round() as u32);
        if x < img.width() && y < img.height() {
            img.put_pixel(x, y, color);
        }
    }
}

pub fn loss_curves(path: &Path, series: &[&[f64]]) -> Result<()> {
    let img = render_curves(series);
    save(path, |p| img.save(p))
}
