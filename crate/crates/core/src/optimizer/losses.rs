//! Cross-entropy, WAS mean-squared-error and denoising losses.

use std::sync::Arc;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::attention::{GraphWas, WasMapStack};
use crate::autodiff::{Graph, Var};
use crate::backbone::{latent_rows, AttentionProbeSet, NoisySample, ProbeMap};
use crate::error::{Error, Result};
use crate::imageops::{bilinear_matrix, resize_labels, LabelMap};

/// Lower clamp for cross-entropy normalizers and probabilities.
pub const CE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Sum,
    Mean,
}

/// Ground-truth mask at the loss resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ResizedMask {
    labels: LabelMap,
    num_classes: usize,
    counts: Vec<usize>,
}

impl ResizedMask {
    pub fn labels(&self) -> &LabelMap {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn dim(&self) -> (usize, usize) {
        self.labels.dim()
    }

    /// Binary plane of class `k`.
    pub fn plane(&self, k: usize) -> Array2<f64> {
        self.labels
            .mapv(|l| if l as usize == k { 1.0 } else { 0.0 })
    }

    /// All planes as `(H''·W'') × K`.
    pub fn planes_matrix(&self) -> Array2<f64> {
        let (h, w) = self.labels.dim();
        let mut out = Array2::zeros((h * w, self.num_classes));
        for (p, &l) in self.labels.iter().enumerate() {
            out[[p, l as usize]] = 1.0;
        }
        out
    }

    /// `total / count_c`, or 0 for classes absent from the mask.
    pub fn class_weights(&self) -> Vec<f64> {
        let total = self.labels.len() as f64;
        self.counts
            .iter()
            .map(|&c| if c == 0 { 0.0 } else { total / c as f64 })
            .collect()
    }
}

/// Validates labels against `k` and resizes the mask with nearest-neighbour lookup.
pub fn resize_mask(mask: &LabelMap, k: usize, target: (usize, usize)) -> Result<ResizedMask> {
    if let Some(((y, x), &label)) = mask.indexed_iter().find(|(_, &l)| l as usize >= k) {
        return Err(Error::LabelRange { label, k, y, x });
    }
    let labels = resize_labels(mask, target);
    let mut counts = vec![0; k];
    for &l in labels.iter() {
        counts[l as usize] += 1;
    }
    Ok(ResizedMask {
        labels,
        num_classes: k,
        counts,
    })
}

/// Weighted cross-entropy between cross-attention channels `0..K` and the mask.
pub fn ce_loss_graph(g: &mut Graph, a_ca: ProbeMap, mask: &ResizedMask) -> Result<Var> {
    let k = mask.num_classes();
    if (a_ca.height, a_ca.width) != mask.dim() {
        return Err(Error::InputShape(format!(
            "cross-attention {}×{} vs mask {:?}",
            a_ca.height,
            a_ca.width,
            mask.dim()
        )));
    }
    let tokens = g.shape(a_ca.var).1;
    if k > tokens {
        return Err(Error::ClassCount {
            k,
            capacity: tokens,
        });
    }
    let channels = g.columns(a_ca.var, 0, k);
    let labels = Arc::new(mask.labels().iter().map(|&l| l as usize).collect());
    Ok(g.weighted_cross_entropy(channels, labels, mask.class_weights(), CE_EPS))
}

/// Squared error between bilinearly resized WAS maps and the class planes.
pub fn mse_loss_graph(
    g: &mut Graph,
    was: &GraphWas,
    mask: &ResizedMask,
    reduction: Reduction,
) -> Result<Var> {
    if was.gate_passed.len() != mask.num_classes() {
        return Err(Error::InputShape(format!(
            "{} WAS maps for {} classes",
            was.gate_passed.len(),
            mask.num_classes()
        )));
    }
    let target = mask.dim();
    let resized = if (was.height, was.width) == target {
        was.maps
    } else {
        let m = Arc::new(bilinear_matrix((was.height, was.width), target));
        g.sparse_left(m, was.maps)
    };
    let planes = Arc::new(mask.planes_matrix());
    Ok(match reduction {
        Reduction::Sum => g.squared_error_sum(resized, planes),
        Reduction::Mean => g.squared_error_mean(resized, planes),
    })
}

/// Squared error between true and predicted noise (`predicted` is `(H·W) × C`).
pub fn ldm_loss_graph(
    g: &mut Graph,
    predicted: Var,
    noise: &Array3<f64>,
    reduction: Reduction,
) -> Result<Var> {
    let target = latent_rows(noise);
    if g.shape(predicted) != target.dim() {
        return Err(Error::InputShape(
            "predicted noise does not match the drawn noise".into(),
        ));
    }
    let target = Arc::new(target);
    Ok(match reduction {
        Reduction::Sum => g.squared_error_sum(predicted, target),
        Reduction::Mean => g.squared_error_mean(predicted, target),
    })
}

pub fn ce_loss(a_ca: &Array3<f64>, mask: &ResizedMask) -> Result<f64> {
    let (h, w, t) = a_ca.dim();
    let mut g = Graph::new();
    let var = g.constant(a_ca.to_shape((h * w, t)).expect("contiguous").into_owned());
    let loss = ce_loss_graph(
        &mut g,
        ProbeMap {
            var,
            height: h,
            width: w,
        },
        mask,
    )?;
    Ok(g.scalar(loss))
}

pub fn mse_loss(was: &WasMapStack, mask: &ResizedMask, reduction: Reduction) -> Result<f64> {
    let Some(first) = was.maps.first() else {
        return Err(Error::InputShape("empty WAS stack".into()));
    };
    let (h, w) = first.dim();
    if was.maps.iter().any(|m| m.dim() != (h, w)) {
        return Err(Error::InputShape("WAS maps differ in shape".into()));
    }
    let mut cols = Array2::zeros((h * w, was.maps.len()));
    for (k, m) in was.maps.iter().enumerate() {
        for (p, &v) in m.iter().enumerate() {
            cols[[p, k]] = v;
        }
    }
    let mut g = Graph::new();
    let maps = g.constant(cols);
    let gw = GraphWas {
        maps,
        height: h,
        width: w,
        gate_passed: was.gate_passed.clone(),
    };
    let loss = mse_loss_graph(&mut g, &gw, mask, reduction)?;
    Ok(g.scalar(loss))
}

pub fn ldm_loss(
    probes: &AttentionProbeSet,
    sample: &NoisySample,
    reduction: Reduction,
) -> Result<f64> {
    if probes.predicted_noise.dim() != sample.noise.dim() {
        return Err(Error::InputShape(
            "predicted noise does not match the drawn noise".into(),
        ));
    }
    let mut g = Graph::new();
    let predicted = g.constant(latent_rows(&probes.predicted_noise));
    let loss = ldm_loss_graph(&mut g, predicted, &sample.noise, reduction)?;
    Ok(g.scalar(loss))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ce: f64,
    pub l_mse: f64,
    pub l_ldm: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl LossBreakdown {
    pub fn new(l_ce: f64, l_mse: f64, l_ldm: f64, alpha: f64, beta: f64) -> Self {
        Self {
            l_ce,
            l_mse,
            l_ldm,
            total: l_ce + alpha * l_mse + beta * l_ldm,
            alpha,
            beta,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_ce, self.l_mse, self.l_ldm, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// `l_ce + α·l_mse + β·l_ldm` on the graph, in the same operation order as
/// [`LossBreakdown::new`].
pub fn combine_graph(g: &mut Graph, ce: Var, mse: Var, ldm: Var, alpha: f64, beta: f64) -> Var {
    let a = g.scale(mse, alpha);
    let partial = g.add(ce, a);
    let b = g.scale(ldm, beta);
    g.add(partial, b)
}
