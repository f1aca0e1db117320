//! CelebAMask-HQ ingestion.
//!
//! Raw layout: `images/{id}.png|jpg` and per-part binary masks anywhere under
//! `masks/`, named `{id}_{part}.png` (e.g. `00012_l_eye.png`). Part masks are
//! painted in a fixed order so later parts overwrite earlier ones.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use super::{class_names, read_mask, AnnotatedSample, FACE_CLASSES};
use crate::error::{Error, Result};
use crate::imageops::{load_image, resize_image, resize_labels, Image, LabelMap};

/// Side length of prepared samples.
pub const CELEBA_SIZE: usize = 512;

/// Raw parts in painting order, with their target class (`None` = not painted).
pub const CELEBA_PAINT_ORDER: [(&str, Option<&str>); 18] = [
    ("skin", Some("Face")),
    ("l_brow", Some("Eyebrow")),
    ("r_brow", Some("Eyebrow")),
    ("l_eye", Some("Eye")),
    ("r_eye", Some("Eye")),
    ("eye_g", None),
    ("l_ear", Some("Ear")),
    ("r_ear", Some("Ear")),
    ("ear_r", None),
    ("nose", Some("Nose")),
    ("mouth", Some("Mouth")),
    ("u_lip", Some("Mouth")),
    ("l_lip", Some("Mouth")),
    ("neck", Some("Neck")),
    ("neck_l", None),
    ("cloth", Some("Cloth")),
    ("hair", Some("Hair")),
    ("hat", None),
];

#[derive(Debug, Clone)]
pub struct RawCelebaImage {
    pub id: String,
    pub image_path: PathBuf,
    /// Raw part name → mask file.
    pub parts: BTreeMap<String, PathBuf>,
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            walk(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

fn split_part_name(stem: &str) -> Option<(&str, &str)> {
    CELEBA_PAINT_ORDER.iter().find_map(|(part, _)| {
        stem.strip_suffix(part)
            .and_then(|rest| rest.strip_suffix('_'))
            .filter(|id| !id.is_empty())
            .map(|id| (id, *part))
    })
}

/// Indexes images and part masks, failing if any image lacks masks or any
/// mask set lacks an image.
pub fn load_celeba_raw(root: &Path) -> Result<Vec<RawCelebaImage>> {
    let images_dir = root.join("images");
    let masks_dir = root.join("masks");
    for d in [&images_dir, &masks_dir] {
        if !d.is_dir() {
            return Err(Error::Ingestion(format!("{} does not exist", d.display())));
        }
    }
    let mut images = BTreeMap::new();
    for entry in fs::read_dir(&images_dir).map_err(|e| Error::io(&images_dir, e))? {
        let path = entry.map_err(|e| Error::io(&images_dir, e))?.path();
        let ext = path.extension().map(|e| e.to_string_lossy().to_lowercase());
        if matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
            let id = path
                .file_stem()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned();
            images.insert(id, path);
        }
    }
    let mut files = Vec::new();
    walk(&masks_dir, &mut files)?;
    let mut parts: BTreeMap<String, BTreeMap<String, PathBuf>> = BTreeMap::new();
    for path in files {
        if path.extension().is_none_or(|e| e != "png") {
            continue;
        }
        let stem = path
            .file_stem()
            .unwrap_or_default()
            .to_string_lossy()
            .into_owned();
        if let Some((id, part)) = split_part_name(&stem) {
            parts
                .entry(id.to_string())
                .or_default()
                .insert(part.to_string(), path);
        }
    }
    let image_ids: BTreeSet<&String> = images.keys().collect();
    let mask_ids: BTreeSet<&String> = parts.keys().collect();
    let no_masks: Vec<&str> = image_ids
        .difference(&mask_ids)
        .map(|s| s.as_str())
        .collect();
    let no_image: Vec<&str> = mask_ids
        .difference(&image_ids)
        .map(|s| s.as_str())
        .collect();
    if !no_masks.is_empty() || !no_image.is_empty() {
        return Err(Error::Ingestion(format!(
            "images without masks: [{}]; masks without images: [{}]",
            no_masks.join(", "),
            no_image.join(", ")
        )));
    }
    Ok(images
        .into_iter()
        .map(|(id, image_path)| {
            let parts = parts.remove(&id).unwrap_or_default();
            RawCelebaImage {
                id,
                image_path,
                parts,
            }
        })
        .collect())
}

/// Paints binary part masks into one label map in [`CELEBA_PAINT_ORDER`].
pub fn paint_parts(parts: &BTreeMap<String, LabelMap>, dims: (usize, usize)) -> Result<LabelMap> {
    let names = class_names(&FACE_CLASSES);
    let mut labels = LabelMap::zeros(dims);
    for (part, class) in CELEBA_PAINT_ORDER {
        let (Some(class), Some(mask)) = (class, parts.get(part)) else {
            continue;
        };
        let label = names.iter().position(|n| n == class).expect("face class") as u8;
        let mask = if mask.dim() == dims {
            mask.clone()
        } else {
            resize_labels(mask, dims)
        };
        ndarray::Zip::from(&mut labels)
            .and(&mask)
            .for_each(|l, &m| {
                if m > 127 {
                    *l = label;
                }
            });
    }
    Ok(labels)
}

pub fn prepare_celeba(raw: &[RawCelebaImage]) -> Result<Vec<AnnotatedSample>> {
    let names = class_names(&FACE_CLASSES);
    let size = (CELEBA_SIZE, CELEBA_SIZE);
    raw.iter()
        .map(|r| {
            let image: Image = load_image(&r.image_path)?;
            let image = if image.dim().0 == CELEBA_SIZE && image.dim().1 == CELEBA_SIZE {
                image
            } else {
                resize_image(&image, size)
            };
            let masks = r
                .parts
                .iter()
                .map(|(p, path)| Ok((p.clone(), read_mask(path)?)))
                .collect::<Result<BTreeMap<_, _>>>()?;
            let labels = paint_parts(&masks, size)?;
            AnnotatedSample::new(image, labels, names.clone(), r.id.clone())
        })
        .collect()
}
