//! PASCAL-Part instance cropping, filtering and part-label remapping.
//!
//! Raw layout under the root directory:
//!
//! ```text
//! annotations/{id}.json   {"image": "images/{id}.jpg",
//!                          "objects": [{"category": "car",
//!                                       "bbox": [x0, y0, x1, y1],
//!                                       "part_mask": "parts/{id}_0.png",
//!                                       "parts": {"1": "frontside", "2": "wheel_1"}}]}
//! ```
//!
//! Boxes are pixel bounds with exclusive maxima. Part masks are 8-bit
//! single-channel images of raw part ids for that object, 0 meaning none.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{class_names, read_mask, AnnotatedSample, CAR_CLASSES, HORSE_CLASSES};
use crate::error::{Error, Result};
use crate::imageops::{load_image, Image, LabelMap};

const DEFAULT_MAPPING: &str = include_str!("pascal_part_mapping.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PascalCategory {
    Car,
    Horse,
}

impl PascalCategory {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "car" => Ok(Self::Car),
            "horse" => Ok(Self::Horse),
            other => Err(Error::Config(format!(
                "unknown PASCAL-Part category '{other}'"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Car => "car",
            Self::Horse => "horse",
        }
    }

    pub fn class_names(self) -> Vec<String> {
        match self {
            Self::Car => class_names(&CAR_CLASSES),
            Self::Horse => class_names(&HORSE_CLASSES),
        }
    }

    /// Crops with either side strictly below this are dropped.
    pub fn min_side(self) -> u32 {
        match self {
            Self::Car => 50,
            Self::Horse => 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl BBox {
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> u32 {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> u32 {
        self.y1.saturating_sub(self.y0)
    }

    pub fn area(&self) -> u64 {
        u64::from(self.width()) * u64::from(self.height())
    }

    pub fn intersection(&self, other: &BBox) -> u64 {
        let w = self.x1.min(other.x1).saturating_sub(self.x0.max(other.x0));
        let h = self.y1.min(other.y1).saturating_sub(self.y0.max(other.y0));
        u64::from(w) * u64::from(h)
    }
}

/// What the intersection area is divided by in the overlap filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OverlapDenominator {
    /// The candidate box's own area.
    #[default]
    Candidate,
    /// The union of both boxes (IoU).
    Union,
}

/// Raw part name → class name, per category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartMapping {
    pub car: BTreeMap<String, Vec<String>>,
    pub horse: BTreeMap<String, Vec<String>>,
}

impl Default for PartMapping {
    fn default() -> Self {
        Self::from_toml(DEFAULT_MAPPING).expect("bundled mapping parses")
    }
}

impl PartMapping {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("part mapping: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Class index of a raw part name, ignoring numeric instance suffixes
    /// such as `wheel_3`. Unmapped parts are background.
    pub fn class_of(&self, category: PascalCategory, raw: &str) -> Result<u8> {
        let table = match category {
            PascalCategory::Car => &self.car,
            PascalCategory::Horse => &self.horse,
        };
        let names = category.class_names();
        let base = match raw.rsplit_once('_') {
            Some((head, tail)) if tail.chars().all(|c| c.is_ascii_digit()) && !tail.is_empty() => {
                head
            }
            _ => raw,
        };
        for (class, parts) in table {
            if parts.iter().any(|p| p == base) {
                return names
                    .iter()
                    .position(|n| n == class)
                    .map(|i| i as u8)
                    .ok_or_else(|| {
                        Error::Config(format!("mapping names unknown class '{class}'"))
                    });
            }
        }
        Ok(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PascalPrepConfig {
    pub category: PascalCategory,
    /// Maximum tolerated overlap fraction.
    pub overlap_threshold: f64,
    pub denominator: OverlapDenominator,
    pub min_side: u32,
    pub mapping: PartMapping,
}

impl PascalPrepConfig {
    pub fn new(category: PascalCategory) -> Self {
        Self {
            category,
            overlap_threshold: 0.05,
            denominator: OverlapDenominator::Candidate,
            min_side: category.min_side(),
            mapping: PartMapping::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterStats {
    pub candidates: usize,
    pub removed_overlap: usize,
    pub removed_size: usize,
    pub kept: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawObject {
    pub category: String,
    pub bbox: BBox,
    /// Raw part ids, same size as the image.
    pub part_mask: LabelMap,
    pub parts: BTreeMap<u8, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawPascalImage {
    pub id: String,
    pub image: Image,
    pub objects: Vec<RawObject>,
}

/// Indices of boxes of `category` that survive the overlap and size filters.
///
/// Overlap is checked against every other box in the image, regardless of
/// category; each candidate is judged against its own denominator.
pub fn select_instances(
    boxes: &[(String, BBox)],
    config: &PascalPrepConfig,
) -> (Vec<usize>, FilterStats) {
    let mut stats = FilterStats::default();
    let mut kept = Vec::new();
    for (i, (category, bbox)) in boxes.iter().enumerate() {
        if category != config.category.name() {
            continue;
        }
        stats.candidates += 1;
        let overlaps = boxes.iter().enumerate().any(|(j, (_, other))| {
            if i == j {
                return false;
            }
            let inter = bbox.intersection(other) as f64;
            let denom = match config.denominator {
                OverlapDenominator::Candidate => bbox.area() as f64,
                OverlapDenominator::Union => (bbox.area() + other.area()) as f64 - inter,
            };
            denom > 0.0 && inter / denom > config.overlap_threshold
        });
        if overlaps {
            stats.removed_overlap += 1;
        } else if bbox.width() < config.min_side || bbox.height() < config.min_side {
            stats.removed_size += 1;
        } else {
            kept.push(i);
        }
    }
    stats.kept = kept.len();
    (kept, stats)
}

pub fn prepare_pascal_part(
    images: &[RawPascalImage],
    config: &PascalPrepConfig,
) -> Result<(Vec<AnnotatedSample>, FilterStats)> {
    let names = config.category.class_names();
    let mut total = FilterStats::default();
    let mut samples = Vec::new();
    for raw in images {
        let boxes: Vec<(String, BBox)> = raw
            .objects
            .iter()
            .map(|o| (o.category.clone(), o.bbox))
            .collect();
        let (kept, stats) = select_instances(&boxes, config);
        total.candidates += stats.candidates;
        total.removed_overlap += stats.removed_overlap;
        total.removed_size += stats.removed_size;
        total.kept += stats.kept;
        let (h, w, _) = raw.image.dim();
        for i in kept {
            let obj = &raw.objects[i];
            let b = obj.bbox;
            if b.x1 as usize > w || b.y1 as usize > h || obj.part_mask.dim() != (h, w) {
                return Err(Error::Ingestion(format!(
                    "{} object {i}: box or part mask exceeds the {h}×{w} image",
                    raw.id
                )));
            }
            let mut lut = [0u8; 256];
            for (&id, part) in &obj.parts {
                lut[id as usize] = config.mapping.class_of(config.category, part)?;
            }
            let (y0, y1, x0, x1) = (b.y0 as usize, b.y1 as usize, b.x0 as usize, b.x1 as usize);
            let image = raw.image.slice(ndarray::s![y0..y1, x0..x1, ..]).to_owned();
            let mask = obj
                .part_mask
                .slice(ndarray::s![y0..y1, x0..x1])
                .mapv(|v| lut[v as usize]);
            samples.push(AnnotatedSample::new(
                image,
                mask,
                names.clone(),
                format!("{}_{i}", raw.id),
            )?);
        }
    }
    Ok((samples, total))
}

#[derive(Debug, Deserialize)]
struct RawAnnotationFile {
    image: PathBuf,
    objects: Vec<RawObjectFile>,
}

#[derive(Debug, Deserialize)]
struct RawObjectFile {
    category: String,
    bbox: [u32; 4],
    #[serde(default)]
    part_mask: Option<PathBuf>,
    #[serde(default)]
    parts: BTreeMap<String, String>,
}

/// Loads every `annotations/*.json` under `root`, sorted by id.
pub fn load_pascal_raw(root: &Path) -> Result<Vec<RawPascalImage>> {
    let ann_dir = root.join("annotations");
    if !ann_dir.is_dir() {
        return Err(Error::Ingestion(format!(
            "{} does not exist",
            ann_dir.display()
        )));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(&ann_dir)
        .map_err(|e| Error::io(&ann_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    files.sort();
    files
        .iter()
        .map(|path| {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let ann: RawAnnotationFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: path.clone(),
                detail: e.to_string(),
            })?;
            let id = path
                .file_stem()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned();
            let image = load_image(&root.join(&ann.image))?;
            let (h, w, _) = image.dim();
            let objects = ann
                .objects
                .into_iter()
                .map(|o| {
                    let part_mask = match &o.part_mask {
                        Some(p) => read_mask(&root.join(p))?,
                        None => LabelMap::zeros((h, w)),
                    };
                    let parts = o
                        .parts
                        .into_iter()
                        .map(|(k, v)| {
                            k.parse::<u8>().map(|k| (k, v)).map_err(|_| Error::Parse {
                                path: path.clone(),
                                detail: format!("part id '{k}' is not in 0..=255"),
                            })
                        })
                        .collect::<Result<_>>()?;
                    let [x0, y0, x1, y1] = o.bbox;
                    Ok(RawObject {
                        category: o.category,
                        bbox: BBox::new(x0, y0, x1, y1),
                        part_mask,
                        parts,
                    })
                })
                .collect::<Result<_>>()?;
            Ok(RawPascalImage { id, image, objects })
        })
        .collect()
}
