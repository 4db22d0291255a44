//! Training-time augmentation: random resized crop and horizontal flip.

use super::LabeledImage;
use ndarray::Array3;
use rand::Rng;

/// Crop window in pixel coordinates (row `y0`, column `x0`, extent `h`×`w`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropRect {
    pub y0: usize,
    pub x0: usize,
    pub h: usize,
    pub w: usize,
}

impl CropRect {
    pub fn full(h: usize, w: usize) -> Self {
        Self { y0: 0, x0: 0, h, w }
    }
}

/// Bilinear resize of a `[3,H,W]` image (half-pixel-center mapping).
///
/// Resizing to the source size reproduces the input exactly: every sample
/// point then lands on a pixel center with zero interpolation weight.
pub fn resize_bilinear(src: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (c, h, w) = src.dim();
    assert!(out_h > 0 && out_w > 0, "resize target must be non-empty");
    let mut out = Array3::<f64>::zeros((c, out_h, out_w));
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            for ci in 0..c {
                let v00 = src[[ci, y0, x0]];
                let v01 = src[[ci, y0, x1]];
                let v10 = src[[ci, y1, x0]];
                let v11 = src[[ci, y1, x1]];
                out[[ci, oy, ox]] = v00 * (1.0 - wy) * (1.0 - wx)
                    + v01 * (1.0 - wy) * wx
                    + v10 * wy * (1.0 - wx)
                    + v11 * wy * wx;
            }
        }
    }
    out
}

/// Draw augmentation parameters: a random resized crop (area fraction
/// 0.5..1.0, aspect ratio 3/4..4/3, ten placement attempts before falling
/// back to the full frame) and a fair-coin horizontal flip.
pub fn sample_augment_params<R: Rng>(rng: &mut R, h: usize, w: usize) -> (CropRect, bool) {
    let area = (h * w) as f64;
    let mut crop = CropRect::full(h, w);
    for _ in 0..10 {
        let target = area * rng.gen_range(0.5..1.0);
        let aspect = rng.gen_range((0.75f64).ln()..(4.0f64 / 3.0).ln()).exp();
        let cw = (target * aspect).sqrt().round() as usize;
        let ch = (target / aspect).sqrt().round() as usize;
        if cw >= 1 && ch >= 1 && cw <= w && ch <= h {
            let y0 = rng.gen_range(0..=h - ch);
            let x0 = rng.gen_range(0..=w - cw);
            crop = CropRect { y0, x0, h: ch, w: cw };
            break;
        }
    }
    let flip = rng.gen_bool(0.5);
    (crop, flip)
}

/// Apply a fixed crop + flip and resize back to the source size.
pub fn apply_augment(image: &LabeledImage, crop: CropRect, flip: bool) -> LabeledImage {
    let (_, h, w) = image.pixels.dim();
    assert!(crop.y0 + crop.h <= h && crop.x0 + crop.w <= w, "crop out of bounds");
    let window = image
        .pixels
        .slice(ndarray::s![
            ..,
            crop.y0..crop.y0 + crop.h,
            crop.x0..crop.x0 + crop.w
        ])
        .to_owned();
    let mut pixels = if crop.h == h && crop.w == w {
        window
    } else {
        resize_bilinear(&window, h, w)
    };
    if flip {
        pixels.invert_axis(ndarray::Axis(2));
        pixels = pixels.as_standard_layout().to_owned();
    }
    LabeledImage {
        pixels,
        label: image.label,
        source_id: image.source_id.clone(),
    }
}

/// Random resized crop + horizontal flip when enabled; identity otherwise.
pub fn augment<R: Rng>(image: &LabeledImage, rng: &mut R, enabled: bool) -> LabeledImage {
    if !enabled {
        return image.clone();
    }
    let (_, h, w) = image.pixels.dim();
    let (crop, flip) = sample_augment_params(rng, h, w);
    apply_augment(image, crop, flip)
}
