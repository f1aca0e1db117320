//! Paired image/mask augmentation.
//!
//! Parameters are drawn once into an [`AugmentationPlan`] and then applied
//! identically to image and mask: flip, crop (resized back to the input
//! size), rotation about the centre, and a Gaussian blur on the image only.
//! Masks are resampled with nearest-neighbour lookup and exposed areas are
//! filled with class 0; exposed image areas are black.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::AnnotatedSample;
use crate::error::{Error, Result};
use crate::imageops::{resize_image, resize_labels, Image, LabelMap};

/// Range of the blur standard deviation, in pixels.
pub const BLUR_SIGMA_RANGE: (f64, f64) = (0.1, 2.0);
pub const BLUR_KERNEL: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationSpec {
    pub horizontal_flip: bool,
    pub gaussian_blur: bool,
    /// Side-length ratio of the random crop, `0 < lo ≤ hi ≤ 1`.
    pub crop_ratio_range: (f64, f64),
    /// Rotation is drawn uniformly from `[-r, r]` degrees.
    pub rotation_degrees: f64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self::none()
    }
}

impl AugmentationSpec {
    pub fn none() -> Self {
        Self {
            horizontal_flip: false,
            gaussian_blur: false,
            crop_ratio_range: (1.0, 1.0),
            rotation_degrees: 0.0,
        }
    }

    pub fn car() -> Self {
        Self {
            horizontal_flip: true,
            gaussian_blur: true,
            crop_ratio_range: (0.5, 1.0),
            rotation_degrees: 30.0,
        }
    }

    pub fn horse() -> Self {
        Self {
            crop_ratio_range: (0.8, 1.0),
            ..Self::car()
        }
    }

    pub fn face() -> Self {
        Self {
            horizontal_flip: true,
            gaussian_blur: true,
            crop_ratio_range: (0.6, 1.0),
            rotation_degrees: 10.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_ratio_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!(
                "crop ratio range ({lo}, {hi}) must satisfy 0 < lo ≤ hi ≤ 1"
            )));
        }
        if !(self.rotation_degrees >= 0.0 && self.rotation_degrees.is_finite()) {
            return Err(Error::Config("rotation range must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropWindow {
    pub y: usize,
    pub x: usize,
    pub height: usize,
    pub width: usize,
}

/// Concrete transform parameters for one augmentation draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPlan {
    pub flip: bool,
    pub crop: Option<CropWindow>,
    pub rotation_degrees: f64,
    pub blur_sigma: Option<f64>,
}

impl AugmentationPlan {
    pub fn identity() -> Self {
        Self {
            flip: false,
            crop: None,
            rotation_degrees: 0.0,
            blur_sigma: None,
        }
    }

    pub fn draw(spec: &AugmentationSpec, dims: (usize, usize), seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = dims;
        let flip = spec.horizontal_flip && rng.random_bool(0.5);
        let (lo, hi) = spec.crop_ratio_range;
        let crop = if lo < 1.0 {
            let ratio = if hi > lo {
                rng.random_range(lo..=hi)
            } else {
                lo
            };
            let ch = ((h as f64 * ratio).round() as usize).clamp(1, h);
            let cw = ((w as f64 * ratio).round() as usize).clamp(1, w);
            let y = rng.random_range(0..=h - ch);
            let x = rng.random_range(0..=w - cw);
            Some(CropWindow {
                y,
                x,
                height: ch,
                width: cw,
            })
            .filter(|c| (c.height, c.width) != (h, w))
        } else {
            None
        };
        let r = spec.rotation_degrees;
        let rotation_degrees = if r > 0.0 {
            rng.random_range(-r..=r)
        } else {
            0.0
        };
        let blur_sigma = spec
            .gaussian_blur
            .then(|| rng.random_range(BLUR_SIGMA_RANGE.0..=BLUR_SIGMA_RANGE.1));
        Self {
            flip,
            crop,
            rotation_degrees,
            blur_sigma,
        }
    }

    pub fn apply(&self, sample: &AnnotatedSample) -> AnnotatedSample {
        let mut image = sample.image.clone();
        let mut mask = sample.mask.clone();
        let dims = mask.dim();
        if self.flip {
            image.invert_axis(ndarray::Axis(1));
            mask.invert_axis(ndarray::Axis(1));
        }
        if let Some(c) = self.crop {
            let img_crop = image
                .slice(ndarray::s![c.y..c.y + c.height, c.x..c.x + c.width, ..])
                .to_owned();
            let mask_crop = mask
                .slice(ndarray::s![c.y..c.y + c.height, c.x..c.x + c.width])
                .to_owned();
            image = resize_image(&img_crop, dims);
            mask = resize_labels(&mask_crop, dims);
        }
        if self.rotation_degrees != 0.0 {
            image = rotate_image(&image, self.rotation_degrees);
            mask = rotate_labels(&mask, self.rotation_degrees);
        }
        if let Some(sigma) = self.blur_sigma {
            image = gaussian_blur(&image, sigma);
        }
        AnnotatedSample {
            image,
            mask,
            class_names: sample.class_names.clone(),
            source_id: sample.source_id.clone(),
        }
    }
}

/// Draws a plan from `seed` and applies it.
pub fn augment(sample: &AnnotatedSample, spec: &AugmentationSpec, seed: u64) -> AnnotatedSample {
    AugmentationPlan::draw(spec, sample.dim(), seed).apply(sample)
}

/// Source coordinate of output pixel `(y, x)` under a rotation by `degrees`
/// about the image centre.
fn rotation_source(y: usize, x: usize, dims: (usize, usize), degrees: f64) -> (f64, f64) {
    let (h, w) = dims;
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (s, c) = degrees.to_radians().sin_cos();
    let (dy, dx) = (y as f64 - cy, x as f64 - cx);
    (cy - s * dx + c * dy, cx + c * dx + s * dy)
}

fn rotate_image(image: &Image, degrees: f64) -> Image {
    let (h, w, ch) = image.dim();
    let mut out = Image::zeros((h, w, ch));
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = rotation_source(y, x, (h, w), degrees);
            if sy < -0.5 || sx < -0.5 || sy > h as f64 - 0.5 || sx > w as f64 - 0.5 {
                continue;
            }
            let sy = sy.clamp(0.0, (h - 1) as f64);
            let sx = sx.clamp(0.0, (w - 1) as f64);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = ((sy - y0 as f64) as f32, (sx - x0 as f64) as f32);
            for c in 0..ch {
                let top = image[[y0, x0, c]] * (1.0 - fx) + image[[y0, x1, c]] * fx;
                let bottom = image[[y1, x0, c]] * (1.0 - fx) + image[[y1, x1, c]] * fx;
                out[[y, x, c]] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

fn rotate_labels(mask: &LabelMap, degrees: f64) -> LabelMap {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (sy, sx) = rotation_source(y, x, (h, w), degrees);
        let (ry, rx) = (sy.round(), sx.round());
        if ry < 0.0 || rx < 0.0 || ry >= h as f64 || rx >= w as f64 {
            0
        } else {
            mask[[ry as usize, rx as usize]]
        }
    })
}

fn gaussian_blur(image: &Image, sigma: f64) -> Image {
    let half = (BLUR_KERNEL / 2) as isize;
    let mut kernel: Vec<f32> = (-half..=half)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32)
        .collect();
    let total: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let (h, w, ch) = image.dim();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = Image::zeros((h, w, ch));
    for y in 0..h {
        for x in 0..w {
            for (i, k) in kernel.iter().enumerate() {
                let sx = clamp(x as isize + i as isize - half, w);
                for c in 0..ch {
                    tmp[[y, x, c]] += k * image[[y, sx, c]];
                }
            }
        }
    }
    let mut out = Image::zeros((h, w, ch));
    for y in 0..h {
        for x in 0..w {
            for (i, k) in kernel.iter().enumerate() {
                let sy = clamp(y as isize + i as isize - half, h);
                for c in 0..ch {
                    out[[y, x, c]] += k * tmp[[sy, x, c]];
                }
            }
        }
    }
    out
}
