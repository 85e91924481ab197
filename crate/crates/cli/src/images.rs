//! Tensor to PNG conversion and the reconstruction panel grid.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};

use metamorph_core::Tensor;

use crate::CliError;

const GAP: u32 = 2;

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Sample `i` of a `[N, 3, H, W]` tensor with values in [0, 1].
pub fn rgb(images: &Tensor, i: usize) -> RgbImage {
    let s = images.shape();
    let (h, w) = (s[2], s[3]);
    let plane = h * w;
    let data = &images.data()[i * 3 * plane..(i + 1) * 3 * plane];
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        Rgb([to_u8(data[p]), to_u8(data[plane + p]), to_u8(data[2 * plane + p])])
    })
}

pub fn mask(labels: &[u32], width: usize, height: usize) -> GrayImage {
    GrayImage::from_fn(width as u32, height as u32, |x, y| {
        Luma([labels[y as usize * width + x as usize].min(255) as u8])
    })
}

/// 2×2 arrangement of panels; each panel shows the first `per_panel`
/// samples of its tensor side by side.
pub fn panel_grid(panels: [&Tensor; 4], per_panel: usize) -> RgbImage {
    let s = panels[0].shape();
    let (h, w) = (s[2] as u32, s[3] as u32);
    let n = per_panel.min(s[0]) as u32;
    let panel_w = n * w + n.saturating_sub(1) * GAP;
    let mut out = RgbImage::from_pixel(2 * panel_w + 3 * GAP, 2 * h + 3 * GAP, Rgb([255, 255, 255]));
    for (k, t) in panels.iter().enumerate() {
        let (px, py) = ((k as u32 % 2) * (panel_w + GAP) + GAP, (k as u32 / 2) * (h + GAP) + GAP);
        for i in 0..n {
            image::imageops::replace(&mut out, &rgb(t, i as usize), i64::from(px + i * (w + GAP)), i64::from(py));
        }
    }
    out
}

pub fn save(img: &RgbImage, path: &Path) -> Result<(), CliError> {
    img.save(path)
        .map_err(|e| CliError::io(path, std::io::Error::other(e.to_string())))
}
