//! Segmentation of unseen images with optimized embeddings.

use std::fs;
use std::path::Path;

use ndarray::{s, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::attention::{aggregate, stack_was, DEFAULT_GATE, DEFAULT_TARGET};
use crate::backbone::{Backbone, PromptEmbeddings};
use crate::data::write_mask;
use crate::error::{Error, Result};
use crate::imageops::{resize_image, resize_map, save_image, Image, LabelMap};

pub const DEFAULT_T_TEST: usize = 100;
pub const PATCH_IMAGE_SIZE: usize = 512;
pub const DEFAULT_PATCH_SIZE: usize = 400;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub t_test: usize,
    pub gate: f64,
    /// Score with WAS maps; when false, raw cross-attention channels.
    pub use_was: bool,
    /// Seed of the noise added at `t_test`.
    pub seed: u64,
    /// Cross-attention aggregation resolution.
    pub target: (usize, usize),
    /// Split 512×512 inputs into corner-anchored patches of this size.
    pub patch_size: Option<usize>,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            t_test: DEFAULT_T_TEST,
            gate: DEFAULT_GATE,
            use_was: true,
            seed: 0,
            target: DEFAULT_TARGET,
            patch_size: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_hash: Option<String>,
    pub backbone: String,
    pub t_test: usize,
    pub gate: f64,
    pub use_was: bool,
    pub seed: u64,
    /// Patch size and `(y, x)` anchors when patching was used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patches: Option<(usize, Vec<(usize, usize)>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationResult {
    pub labels: LabelMap,
    /// `(K, H, W)` class scores.
    pub scores: Array3<f64>,
    pub gate_passed: Vec<bool>,
    pub provenance: Provenance,
}

impl SegmentationResult {
    pub fn num_classes(&self) -> usize {
        self.scores.dim().0
    }
}

/// Per-pixel argmax over `(K, H, W)` scores; ties go to the lowest index.
pub fn argmax_labels(scores: &Array3<f64>) -> LabelMap {
    let (k, h, w) = scores.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut best = 0;
        for c in 1..k {
            if scores[[c, y, x]] > scores[[best, y, x]] {
                best = c;
            }
        }
        best as u8
    })
}

fn check_prompt(emb: &PromptEmbeddings, backbone: &dyn Backbone) -> Result<()> {
    let d = backbone.descriptor();
    if emb.embeddings().dim() != (d.token_capacity, d.embedding_dim) {
        return Err(Error::Compatibility {
            expected: format!("{}×{} embeddings", d.token_capacity, d.embedding_dim),
            found: format!("{:?}", emb.embeddings().dim()),
        });
    }
    Ok(())
}

/// Class score maps at the backbone's aggregation resolution, before upscaling.
pub fn class_maps(
    image: &Image,
    emb: &PromptEmbeddings,
    backbone: &dyn Backbone,
    config: &InferenceConfig,
) -> Result<(Vec<Array2<f64>>, Vec<bool>)> {
    check_prompt(emb, backbone)?;
    let size = backbone.descriptor().input_size;
    let (h, w, _) = image.dim();
    let input = if (h, w) == size {
        image.clone()
    } else {
        resize_image(image, size)
    };
    let latent = backbone.encode_image(&input)?;
    let sample = backbone.add_noise(&latent, config.t_test, None, config.seed)?;
    let probes = backbone.denoise_with_probes(&sample, emb)?;
    let agg = aggregate(&probes, config.target)?;
    let k = emb.num_classes();
    if config.use_was {
        let was = stack_was(&agg.a_ca, &agg.a_sa, k, config.gate)?;
        Ok((was.maps, was.gate_passed))
    } else {
        let maps = (0..k)
            .map(|c| agg.a_ca.index_axis(Axis(2), c).to_owned())
            .collect();
        Ok((maps, vec![true; k]))
    }
}

/// Encodes, noises at `t_test`, probes, scores every class, upsamples the
/// maps bilinearly to the image size and takes the argmax.
pub fn segment(
    image: &Image,
    emb: &PromptEmbeddings,
    backbone: &dyn Backbone,
    config: &InferenceConfig,
) -> Result<SegmentationResult> {
    let (h, w, _) = image.dim();
    let (maps, gate_passed) = class_maps(image, emb, backbone, config)?;
    let mut scores = Array3::zeros((maps.len(), h, w));
    for (c, m) in maps.iter().enumerate() {
        scores
            .index_axis_mut(Axis(0), c)
            .assign(&resize_map(m, (h, w)));
    }
    Ok(SegmentationResult {
        labels: argmax_labels(&scores),
        scores,
        gate_passed,
        provenance: Provenance {
            checkpoint_hash: None,
            backbone: backbone.descriptor().identity(),
            t_test: config.t_test,
            gate: config.gate,
            use_was: config.use_was,
            seed: config.seed,
            patches: None,
        },
    })
}

/// Top-left `(y, x)` corners of the patches covering a square image.
pub fn patch_anchors(image_size: usize, patch: usize) -> Vec<(usize, usize)> {
    if patch >= image_size {
        return vec![(0, 0)];
    }
    let far = image_size - patch;
    vec![(0, 0), (0, far), (far, 0), (far, far)]
}

/// Number of patches covering each pixel.
pub fn coverage_map(image_size: usize, patch: usize) -> Array2<u32> {
    let mut cover = Array2::zeros((image_size, image_size));
    let p = patch.min(image_size);
    for (y, x) in patch_anchors(image_size, patch) {
        cover
            .slice_mut(s![y..y + p, x..x + p])
            .mapv_inplace(|c| c + 1);
    }
    cover
}

/// Segments a 512×512 image from four corner-anchored patches, averaging
/// overlapping scores by coverage count.
pub fn segment_patched(
    image: &Image,
    emb: &PromptEmbeddings,
    backbone: &dyn Backbone,
    config: &InferenceConfig,
    patch: usize,
) -> Result<SegmentationResult> {
    let (h, w, _) = image.dim();
    if (h, w) != (PATCH_IMAGE_SIZE, PATCH_IMAGE_SIZE) {
        return Err(Error::InputShape(format!(
            "patched inference expects {PATCH_IMAGE_SIZE}×{PATCH_IMAGE_SIZE}, got {h}×{w}"
        )));
    }
    if 2 * patch < h {
        return Err(Error::Config(format!(
            "patch size {patch} leaves the centre of a {h}-pixel image uncovered"
        )));
    }
    if patch >= h {
        return segment(image, emb, backbone, config);
    }
    let anchors = patch_anchors(h, patch);
    let k = emb.num_classes();
    let mut sum = Array3::<f64>::zeros((k, h, w));
    let mut gate_passed = vec![false; k];
    for &(y, x) in &anchors {
        let crop = image.slice(s![y..y + patch, x..x + patch, ..]).to_owned();
        let part = segment(&crop, emb, backbone, config)?;
        for (g, p) in gate_passed.iter_mut().zip(&part.gate_passed) {
            *g |= *p;
        }
        let mut view = sum.slice_mut(s![.., y..y + patch, x..x + patch]);
        view += &part.scores;
    }
    let cover = coverage_map(h, patch);
    for mut plane in sum.axis_iter_mut(Axis(0)) {
        plane.zip_mut_with(&cover, |v, &c| *v /= f64::from(c));
    }
    Ok(SegmentationResult {
        labels: argmax_labels(&sum),
        scores: sum,
        gate_passed,
        provenance: Provenance {
            checkpoint_hash: None,
            backbone: backbone.descriptor().identity(),
            t_test: config.t_test,
            gate: config.gate,
            use_was: config.use_was,
            seed: config.seed,
            patches: Some((patch, anchors)),
        },
    })
}

/// Dispatches to [`segment_patched`] when the config asks for patches and
/// the image is 512×512.
pub fn segment_auto(
    image: &Image,
    emb: &PromptEmbeddings,
    backbone: &dyn Backbone,
    config: &InferenceConfig,
) -> Result<SegmentationResult> {
    let (h, w, _) = image.dim();
    match config.patch_size {
        Some(p) if (h, w) == (PATCH_IMAGE_SIZE, PATCH_IMAGE_SIZE) => {
            segment_patched(image, emb, backbone, config, p)
        }
        _ => segment(image, emb, backbone, config),
    }
}

pub const DEFAULT_PALETTE: [[u8; 3]; 12] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
];

/// Alpha-blends class colours over the image.
pub fn render_overlay(
    image: &Image,
    labels: &LabelMap,
    palette: &[[u8; 3]],
    alpha: f32,
    background_transparent: bool,
) -> Result<Image> {
    let (h, w, _) = image.dim();
    if labels.dim() != (h, w) {
        return Err(Error::InputShape(format!(
            "labels {:?} vs image {h}×{w}",
            labels.dim()
        )));
    }
    let max_label = labels.iter().copied().max().unwrap_or(0) as usize;
    if max_label >= palette.len() {
        return Err(Error::InputShape(format!(
            "palette has {} colours, label {max_label} present",
            palette.len()
        )));
    }
    let mut out = image.clone();
    for ((y, x), &l) in labels.indexed_iter() {
        if l == 0 && background_transparent {
            continue;
        }
        let color = palette[l as usize];
        for c in 0..3 {
            let v = &mut out[[y, x, c]];
            *v = (1.0 - alpha) * *v + alpha * f32::from(color[c]) / 255.0;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub source: String,
    pub class_names: Vec<String>,
    pub gate_passed: Vec<bool>,
    pub provenance: Provenance,
}

/// Writes `{dir}/{stem}.mask.png`, `{dir}/{stem}.json` and optionally
/// `{dir}/{stem}.overlay.png`.
pub fn write_segmentation(
    dir: &Path,
    stem: &str,
    result: &SegmentationResult,
    class_names: &[String],
    overlay: Option<&Image>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_mask(&result.labels, &dir.join(format!("{stem}.mask.png")))?;
    let sidecar = Sidecar {
        source: stem.to_string(),
        class_names: class_names.to_vec(),
        gate_passed: result.gate_passed.clone(),
        provenance: result.provenance.clone(),
    };
    let path = dir.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    if let Some(img) = overlay {
        save_image(img, &dir.join(format!("{stem}.overlay.png")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ToyBackbone;
    use crate::data::two_region_sample;

    #[test]
    fn strict_winner_and_ties() {
        let mut scores = Array3::zeros((2, 2, 2));
        scores.index_axis_mut(Axis(0), 1).fill(0.5);
        assert!(argmax_labels(&scores).iter().all(|&l| l == 1));
        scores.index_axis_mut(Axis(0), 0).fill(0.5);
        assert!(argmax_labels(&scores).iter().all(|&l| l == 0));
        let mut three = Array3::zeros((3, 1, 1));
        three[[1, 0, 0]] = 0.7;
        three[[2, 0, 0]] = 0.7;
        assert_eq!(argmax_labels(&three)[[0, 0]], 1);
    }

    #[test]
    fn coverage_geometry() {
        let c = coverage_map(512, 400);
        assert_eq!(c[[0, 0]], 1);
        assert_eq!(c[[511, 511]], 1);
        assert_eq!(c[[0, 511]], 1);
        assert_eq!(c[[256, 256]], 4);
        assert_eq!(c[[0, 256]], 2);
        assert_eq!(c[[111, 111]], 1);
        assert_eq!(c[[112, 112]], 4);
        assert_eq!(c[[399, 399]], 4);
        assert_eq!(c[[400, 400]], 1);
        assert!(coverage_map(512, 600).iter().all(|&v| v == 1));
    }

    #[test]
    fn overlay_background_transparent() {
        let img = Image::from_elem((3, 3, 3), 0.5);
        let mut labels = LabelMap::zeros((3, 3));
        assert_eq!(
            render_overlay(&img, &labels, &DEFAULT_PALETTE, 0.5, true).unwrap(),
            img
        );
        labels[[1, 2]] = 1;
        let out = render_overlay(&img, &labels, &DEFAULT_PALETTE, 0.5, true).unwrap();
        let changed = (0..3)
            .flat_map(|y| (0..3).map(move |x| (y, x)))
            .filter(|&(y, x)| (0..3).any(|c| out[[y, x, c]] != img[[y, x, c]]))
            .count();
        assert_eq!(changed, 1);
        assert!(render_overlay(&img, &labels, &DEFAULT_PALETTE[..1], 0.5, true).is_err());
    }

    #[test]
    fn repeat_is_bit_identical() {
        let bb = ToyBackbone::new(1);
        let s = two_region_sample(64, 2);
        let emb = bb.encode_prompt("part", &s.class_names, 0).unwrap();
        let cfg = InferenceConfig::default();
        let a = segment(&s.image, &emb, &bb, &cfg).unwrap();
        let b = segment(&s.image, &emb, &bb, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.labels, argmax_labels(&a.scores));
        assert_eq!(a.labels.dim(), (64, 64));
    }

    #[test]
    fn wrong_patch_input_size() {
        let bb = ToyBackbone::new(1);
        let s = two_region_sample(64, 2);
        let emb = bb.encode_prompt("part", &s.class_names, 0).unwrap();
        let r = segment_patched(&s.image, &emb, &bb, &InferenceConfig::default(), 400);
        assert!(matches!(r, Err(Error::InputShape(_))));
    }

    #[test]
    fn patches_must_cover_the_centre() {
        let bb = ToyBackbone::new(1);
        let names = vec!["bg".to_string(), "fg".to_string()];
        let emb = bb.encode_prompt("part", &names, 0).unwrap();
        let image = Image::zeros((PATCH_IMAGE_SIZE, PATCH_IMAGE_SIZE, 3));
        let r = segment_patched(&image, &emb, &bb, &InferenceConfig::default(), 255);
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
