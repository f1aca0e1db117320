//! mIoU computation, multi-seed aggregation and result tables.

mod table;

use serde::{Deserialize, Serialize};

pub use table::{emit_table, parse_csv_table, TableFormat, TableRow};

use crate::backbone::{Backbone, PromptEmbeddings};
use crate::data::AnnotatedSample;
use crate::error::{Error, Result};
use crate::imageops::LabelMap;
use crate::inference::{segment_auto, InferenceConfig};

/// Per-class IoU of one prediction; `None` for classes absent from both maps.
pub fn iou(pred: &LabelMap, gt: &LabelMap, k: usize) -> Result<Vec<Option<f64>>> {
    let mut acc = IouAccumulator::new(k);
    acc.add(pred, gt)?;
    Ok(acc.per_class())
}

/// Mean of the defined entries, `None` if there are none.
pub fn mean_defined(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Sums intersections and unions over images before dividing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IouAccumulator {
    intersections: Vec<u64>,
    unions: Vec<u64>,
}

impl IouAccumulator {
    pub fn new(k: usize) -> Self {
        Self {
            intersections: vec![0; k],
            unions: vec![0; k],
        }
    }

    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if pred.dim() != gt.dim() {
            return Err(Error::Eval(format!(
                "prediction {:?} vs ground truth {:?}",
                pred.dim(),
                gt.dim()
            )));
        }
        let k = self.intersections.len();
        for (&p, &g) in pred.iter().zip(gt) {
            let (p, g) = (p as usize, g as usize);
            if p >= k || g >= k {
                return Err(Error::Eval(format!("label {} outside 0..{k}", p.max(g))));
            }
            if p == g {
                self.intersections[p] += 1;
                self.unions[p] += 1;
            } else {
                self.unions[p] += 1;
                self.unions[g] += 1;
            }
        }
        Ok(())
    }

    pub fn per_class(&self) -> Vec<Option<f64>> {
        self.intersections
            .iter()
            .zip(&self.unions)
            .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Accumulation {
    /// Intersections and unions summed over the whole test set.
    #[default]
    Dataset,
    /// IoU per image, then averaged over images.
    PerImage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub per_class: Vec<Option<f64>>,
    pub average: Option<f64>,
}

/// Scores `test` under `mode`, given one predicted label map per sample.
pub fn score_predictions(
    predictions: &[LabelMap],
    test: &[AnnotatedSample],
    k: usize,
    mode: Accumulation,
) -> Result<(Vec<Option<f64>>, Option<f64>)> {
    if test.is_empty() {
        return Err(Error::Eval("empty test set".into()));
    }
    if predictions.len() != test.len() {
        return Err(Error::Eval(
            "one prediction per test sample is required".into(),
        ));
    }
    let per_class = match mode {
        Accumulation::Dataset => {
            let mut acc = IouAccumulator::new(k);
            for (p, s) in predictions.iter().zip(test) {
                acc.add(p, &s.mask)?;
            }
            acc.per_class()
        }
        Accumulation::PerImage => {
            let mut sums = vec![(0.0, 0usize); k];
            for (p, s) in predictions.iter().zip(test) {
                for (c, v) in iou(p, &s.mask, k)?.into_iter().enumerate() {
                    if let Some(v) = v {
                        sums[c].0 += v;
                        sums[c].1 += 1;
                    }
                }
            }
            sums.into_iter()
                .map(|(s, n)| (n > 0).then(|| s / n as f64))
                .collect()
        }
    };
    let average = mean_defined(&per_class);
    Ok((per_class, average))
}

/// Segments every test sample and scores the predictions.
pub fn evaluate(
    emb: &PromptEmbeddings,
    test: &[AnnotatedSample],
    backbone: &dyn Backbone,
    config: &InferenceConfig,
    mode: Accumulation,
) -> Result<SeedResult> {
    if test.is_empty() {
        return Err(Error::Eval("empty test set".into()));
    }
    let k = emb.num_classes();
    if let Some(s) = test.iter().find(|s| s.class_names != emb.class_names()) {
        return Err(Error::Eval(format!(
            "{} has classes {:?}, checkpoint has {:?}",
            s.source_id,
            s.class_names,
            emb.class_names()
        )));
    }
    let predictions = test
        .iter()
        .map(|s| segment_auto(&s.image, emb, backbone, config).map(|r| r.labels))
        .collect::<Result<Vec<_>>>()?;
    let (per_class, average) = score_predictions(&predictions, test, k, mode)?;
    Ok(SeedResult {
        seed: config.seed,
        per_class,
        average,
    })
}

/// Population mean and standard deviation of the defined values.
pub fn mean_std(values: &[Option<f64>]) -> (Option<f64>, Option<f64>) {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    if defined.is_empty() {
        return (None, None);
    }
    let n = defined.len() as f64;
    let mean = defined.iter().sum::<f64>() / n;
    let std = (defined.len() >= 2)
        .then(|| (defined.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt());
    (Some(mean), std)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub class_names: Vec<String>,
    pub accumulation: Accumulation,
    pub per_seed: Vec<SeedResult>,
    /// Per class, then the average.
    pub mean: Vec<Option<f64>>,
    /// Present only with at least two seeds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std: Option<Vec<Option<f64>>>,
    #[serde(default)]
    pub manifest: serde_json::Value,
}

impl EvalReport {
    pub fn from_seeds(
        method: impl Into<String>,
        class_names: Vec<String>,
        accumulation: Accumulation,
        per_seed: Vec<SeedResult>,
    ) -> Result<Self> {
        if per_seed.is_empty() {
            return Err(Error::Eval("no seed results".into()));
        }
        let k = class_names.len();
        if per_seed.iter().any(|r| r.per_class.len() != k) {
            return Err(Error::Eval(
                "seed results disagree with the class schema".into(),
            ));
        }
        let column = |i: usize| -> Vec<Option<f64>> {
            per_seed
                .iter()
                .map(|r| if i < k { r.per_class[i] } else { r.average })
                .collect()
        };
        let stats: Vec<(Option<f64>, Option<f64>)> =
            (0..=k).map(|i| mean_std(&column(i))).collect();
        let mean = stats.iter().map(|s| s.0).collect();
        let std = (per_seed.len() >= 2).then(|| stats.iter().map(|s| s.1).collect());
        Ok(Self {
            method: method.into(),
            class_names,
            accumulation,
            per_seed,
            mean,
            std,
            manifest: serde_json::Value::Null,
        })
    }

    pub fn average(&self) -> Option<f64> {
        *self.mean.last().expect("average column")
    }
}
