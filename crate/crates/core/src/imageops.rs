//! Image and label-map containers plus the resampling kernels shared by every
//! module.
//!
//! Bilinear resampling uses the half-pixel convention (`align_corners = false`):
//! output pixel `d` samples input coordinate `(d + 0.5) · in / out − 0.5`,
//! clamped at the borders, without antialiasing. Label maps are only ever
//! resampled with nearest-neighbour lookup `src = ⌊d · in / out⌋`.

use std::path::Path;

use ndarray::{Array2, Array3};

use crate::autodiff::SparseRows;
use crate::error::{Error, Result};

/// RGB image, shape `(H, W, 3)`, values in `[0, 1]`.
pub type Image = Array3<f32>;

/// Integer class labels, shape `(H, W)`.
pub type LabelMap = Array2<u8>;

/// 1-D bilinear interpolation weights as an `out_len × in_len` matrix.
pub fn linear_weights(in_len: usize, out_len: usize) -> SparseRows {
    assert!(in_len > 0 && out_len > 0, "empty resize axis");
    let scale = in_len as f64 / out_len as f64;
    let rows = (0..out_len)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let frac = if i0 == i1 { 0.0 } else { src - i0 as f64 };
            if frac == 0.0 {
                vec![(i0, 1.0)]
            } else {
                vec![(i0, 1.0 - frac), (i1, frac)]
            }
        })
        .collect();
    SparseRows::new(in_len, rows)
}

/// Bilinear resize of a flattened `(h, w)` map as a `(oh·ow) × (h·w)` matrix.
pub fn bilinear_matrix(from: (usize, usize), to: (usize, usize)) -> SparseRows {
    SparseRows::kron(&linear_weights(from.0, to.0), &linear_weights(from.1, to.1))
}

/// Bilinear resize of a single-channel map.
pub fn resize_map(map: &Array2<f64>, to: (usize, usize)) -> Array2<f64> {
    let (h, w) = map.dim();
    if (h, w) == to {
        return map.clone();
    }
    let flat = map
        .to_shape((h * w, 1))
        .expect("contiguous map")
        .into_owned();
    bilinear_matrix((h, w), to)
        .apply(&flat)
        .into_shape_with_order(to)
        .expect("resize output shape")
}

/// Bilinear resize of an RGB image.
pub fn resize_image(image: &Image, to: (usize, usize)) -> Image {
    let (h, w, c) = image.dim();
    if (h, w) == to {
        return image.clone();
    }
    let ys = linear_weights(h, to.0);
    let xs = linear_weights(w, to.1);
    let mut out = Array3::zeros((to.0, to.1, c));
    for oy in 0..to.0 {
        for ox in 0..to.1 {
            for &(iy, wy) in ys.row(oy) {
                for &(ix, wx) in xs.row(ox) {
                    let weight = (wy * wx) as f32;
                    for ch in 0..c {
                        out[[oy, ox, ch]] += weight * image[[iy, ix, ch]];
                    }
                }
            }
        }
    }
    out
}

/// Source index for nearest-neighbour resampling.
pub fn nearest_index(dst: usize, in_len: usize, out_len: usize) -> usize {
    (dst * in_len / out_len).min(in_len - 1)
}

/// Nearest-neighbour resize of a label map.
pub fn resize_labels(labels: &LabelMap, to: (usize, usize)) -> LabelMap {
    let (h, w) = labels.dim();
    if (h, w) == to {
        return labels.clone();
    }
    Array2::from_shape_fn(to, |(y, x)| {
        labels[[nearest_index(y, h, to.0), nearest_index(x, w, to.1)]]
    })
}

pub fn from_rgb8(img: &image::RgbImage) -> Image {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
    })
}

pub fn to_rgb8(image: &Image) -> image::RgbImage {
    let (h, w, _) = image.dim();
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px =
            |c: usize| (image[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

pub fn load_image(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?;
    Ok(from_rgb8(&img.to_rgb8()))
}

pub fn save_image(image: &Image, path: &Path) -> Result<()> {
    to_rgb8(image)
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::image(path, e))
}
