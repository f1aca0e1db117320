//! Small generated two-class samples for tests and demos.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{class_names, AnnotatedSample};
use crate::imageops::{Image, LabelMap};

/// A `size × size` image with a coloured ellipse (class 1) on a textured
/// background (class 0). Pixel values are multiples of 1/255.
pub fn two_region_sample(size: usize, seed: u64) -> AnnotatedSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let cy = s * rng.random_range(0.35..0.65);
    let cx = s * rng.random_range(0.35..0.65);
    let ry = s * rng.random_range(0.18..0.3);
    let rx = s * rng.random_range(0.18..0.3);
    let bg = [
        0.15 + rng.random_range(0.0..0.1),
        0.35 + rng.random_range(0.0..0.1),
        0.2,
    ];
    let fg = [
        0.85 + rng.random_range(0.0..0.1),
        0.55,
        0.15 + rng.random_range(0.0..0.1),
    ];
    let mut mask = LabelMap::zeros((size, size));
    let mut image = Image::zeros((size, size, 3));
    for y in 0..size {
        for x in 0..size {
            let dy = (y as f64 + 0.5 - cy) / ry;
            let dx = (x as f64 + 0.5 - cx) / rx;
            let inside = dy * dy + dx * dx <= 1.0;
            let base = if inside { fg } else { bg };
            let texture = 0.04 * ((x as f64 * 0.7).sin() + (y as f64 * 0.9).cos())
                + rng.random_range(-0.02..0.02);
            mask[[y, x]] = u8::from(inside);
            for c in 0..3 {
                let v = (base[c] + texture).clamp(0.0, 1.0);
                image[[y, x, c]] = ((v * 255.0).round() / 255.0) as f32;
            }
        }
    }
    AnnotatedSample::new(
        image,
        mask,
        class_names(&["background", "object"]),
        format!("synth{seed:04}"),
    )
    .expect("generated sample is consistent")
}
