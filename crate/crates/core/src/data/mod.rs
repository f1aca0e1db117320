//! Annotated samples, label-mask files, dataset directories and the dataset
//! preparation pipelines.

mod augment;
mod celeba;
mod pascal;
mod split;
mod synthetic;

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use augment::{
    augment, AugmentationPlan, AugmentationSpec, CropWindow, BLUR_KERNEL, BLUR_SIGMA_RANGE,
};
pub use celeba::{load_celeba_raw, prepare_celeba, RawCelebaImage, CELEBA_PAINT_ORDER};
pub use pascal::{
    load_pascal_raw, prepare_pascal_part, select_instances, BBox, FilterStats, OverlapDenominator,
    PartMapping, PascalCategory, PascalPrepConfig, RawObject, RawPascalImage,
};
pub use split::{sample_split, Split};
pub use synthetic::two_region_sample;

use crate::error::{Error, Result};
use crate::imageops::{load_image, save_image, Image, LabelMap};

pub const CAR_CLASSES: [&str; 6] = ["Background", "Body", "Light", "Plate", "Wheel", "Window"];
pub const HORSE_CLASSES: [&str; 5] = ["Background", "Head", "Leg", "Neck+Torso", "Tail"];
pub const FACE_CLASSES: [&str; 10] = [
    "Background",
    "Cloth",
    "Ear",
    "Eye",
    "Eyebrow",
    "Face",
    "Hair",
    "Mouth",
    "Neck",
    "Nose",
];

pub fn class_names(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedSample {
    pub image: Image,
    pub mask: LabelMap,
    pub class_names: Vec<String>,
    pub source_id: String,
}

impl AnnotatedSample {
    pub fn new(
        image: Image,
        mask: LabelMap,
        class_names: Vec<String>,
        source_id: impl Into<String>,
    ) -> Result<Self> {
        let (h, w, c) = image.dim();
        if c != 3 || (h, w) != mask.dim() {
            return Err(Error::InputShape(format!(
                "image {h}×{w}×{c} does not pair with mask {:?}",
                mask.dim()
            )));
        }
        let k = class_names.len();
        if let Some(((y, x), &label)) = mask.indexed_iter().find(|(_, &l)| l as usize >= k) {
            return Err(Error::LabelRange { label, k, y, x });
        }
        Ok(Self {
            image,
            mask,
            class_names,
            source_id: source_id.into(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.mask.dim()
    }
}

/// Reads an 8-bit single-channel (grayscale or palette-indexed) PNG as raw labels.
pub fn read_mask(path: &Path) -> Result<LabelMap> {
    let format = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| format(e.to_string()))?;
    let (color, depth) = {
        let info = reader.info();
        (info.color_type, info.bit_depth)
    };
    if !matches!(color, png::ColorType::Grayscale | png::ColorType::Indexed) {
        return Err(format(format!(
            "expected a single-channel mask, found {color:?}"
        )));
    }
    if depth != png::BitDepth::Eight {
        return Err(format(format!("expected 8-bit samples, found {depth:?}")));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| format("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| format(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let mut labels = LabelMap::zeros((h, w));
    for y in 0..h {
        let row = &buf[y * info.line_size..y * info.line_size + w];
        for (x, &v) in row.iter().enumerate() {
            labels[[y, x]] = v;
        }
    }
    Ok(labels)
}

/// Writes labels as an 8-bit grayscale PNG.
pub fn write_mask(labels: &LabelMap, path: &Path) -> Result<()> {
    let (h, w) = labels.dim();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Eight);
    let to_err = |e: png::EncodingError| Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    };
    let mut writer = encoder.write_header().map_err(to_err)?;
    let data: Vec<u8> = labels.iter().copied().collect();
    writer.write_image_data(&data).map_err(to_err)?;
    writer.finish().map_err(to_err)
}

/// Summary written beside a prepared dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub category: String,
    pub class_names: Vec<String>,
    pub splits: Vec<SplitCount>,
    pub class_pixel_counts: Vec<u64>,
    pub prep_config: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter_stats: Option<FilterStats>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCount {
    pub split: String,
    pub count: usize,
}

const CLASSES_FILE: &str = "classes.json";
const IMG_SUFFIX: &str = ".img.png";
const MASK_SUFFIX: &str = ".mask.png";

/// Writes `{dir}/{id}.img.png`, `{dir}/{id}.mask.png` and `{dir}/classes.json`.
pub fn write_sample_dir(
    dir: &Path,
    samples: &[AnnotatedSample],
    class_names: &[String],
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let classes = serde_json::to_string_pretty(class_names).expect("names serialize");
    let classes_path = dir.join(CLASSES_FILE);
    fs::write(&classes_path, classes).map_err(|e| Error::io(&classes_path, e))?;
    for s in samples {
        save_image(&s.image, &dir.join(format!("{}{IMG_SUFFIX}", s.source_id)))?;
        write_mask(&s.mask, &dir.join(format!("{}{MASK_SUFFIX}", s.source_id)))?;
    }
    Ok(())
}

fn find_classes(dir: &Path) -> Option<PathBuf> {
    [dir.join(CLASSES_FILE), dir.join("..").join(CLASSES_FILE)]
        .into_iter()
        .find(|p| p.is_file())
}

/// Reads every `{id}.img.png` + `{id}.mask.png` pair, sorted by id.
pub fn read_sample_dir(dir: &Path) -> Result<Vec<AnnotatedSample>> {
    let classes_path = find_classes(dir)
        .ok_or_else(|| Error::Ingestion(format!("{} has no {CLASSES_FILE}", dir.display())))?;
    let text = fs::read_to_string(&classes_path).map_err(|e| Error::io(&classes_path, e))?;
    let class_names: Vec<String> = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: classes_path.clone(),
        detail: e.to_string(),
    })?;
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(id) = name.strip_suffix(IMG_SUFFIX) {
            ids.push(id.to_string());
        }
    }
    ids.sort();
    ids.into_iter()
        .map(|id| {
            let mask_path = dir.join(format!("{id}{MASK_SUFFIX}"));
            if !mask_path.is_file() {
                return Err(Error::Ingestion(format!("{} has no mask", id)));
            }
            let image = load_image(&dir.join(format!("{id}{IMG_SUFFIX}")))?;
            let mask = read_mask(&mask_path)?;
            AnnotatedSample::new(image, mask, class_names.clone(), id)
        })
        .collect()
}

/// Image files under `dir` (png/jpg/jpeg), skipping label masks, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().to_lowercase())
            .unwrap_or_default();
        let is_image = [".png", ".jpg", ".jpeg"]
            .iter()
            .any(|ext| name.ends_with(ext));
        if path.is_file()
            && is_image
            && !name.ends_with(MASK_SUFFIX)
            && !name.ends_with(".overlay.png")
        {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// File stem with a trailing `.img` removed.
pub fn image_stem(path: &Path) -> String {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    stem.strip_suffix(".img")
        .map(str::to_string)
        .unwrap_or(stem)
}
