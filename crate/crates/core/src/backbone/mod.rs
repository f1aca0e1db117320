//! Frozen text-conditioned latent diffusion backbones with attention probes.
//!
//! A [`Backbone`] encodes images and prompts, noises latents with its
//! scheduler, and runs its denoiser on an autodiff [`Graph`] so that the
//! probed attention maps stay differentiable with respect to the prompt
//! embeddings. Parameters are never mutated after construction.

mod sd21;
mod toy;

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::PathBuf;

use ndarray::{Array2, Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::imageops::Image;
use crate::scheduler::{standard_normal, NoiseScheduler};

pub use sd21::{sd21_descriptor, Sd21Backbone};
pub use toy::{ToyBackbone, TOY_DEFAULT_SEED};

/// Prompt text that requests standard-normal embedding initialization.
pub const RANDOM_PROMPT: &str = "RANDOM";

/// Encoded image, shape `(C, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentImage {
    pub data: Array3<f64>,
    /// Input-image pixels per latent pixel along each axis.
    pub scale: f64,
}

impl LatentImage {
    pub fn new(data: Array3<f64>, scale: f64) -> Result<Self> {
        let (_, h, w) = data.dim();
        if h == 0 || w == 0 {
            return Err(Error::InputShape("latent has an empty spatial axis".into()));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::InputShape(
                "latent contains non-finite values".into(),
            ));
        }
        Ok(Self { data, scale })
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.data.dim()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisySample {
    pub noisy: LatentImage,
    pub noise: Array3<f64>,
    pub timestep: usize,
}

/// Token embedding sequence conditioning the denoiser.
///
/// Rows `1..K` are the per-class embeddings that optimization may change;
/// row 0 is the background embedding and stays frozen, as do rows `≥ K`.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbeddings {
    embeddings: Array2<f32>,
    class_names: Vec<String>,
}

impl PromptEmbeddings {
    pub fn new(embeddings: Array2<f32>, class_names: Vec<String>) -> Result<Self> {
        let capacity = embeddings.nrows();
        let k = class_names.len();
        if k == 0 || k > capacity {
            return Err(Error::ClassCount { k, capacity });
        }
        if !embeddings.iter().all(|v| v.is_finite()) {
            return Err(Error::InputShape(
                "prompt embeddings contain non-finite values".into(),
            ));
        }
        Ok(Self {
            embeddings,
            class_names,
        })
    }

    pub fn embeddings(&self) -> &Array2<f32> {
        &self.embeddings
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn token_capacity(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn embedding_dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn optimizable_indices(&self) -> Range<usize> {
        1..self.num_classes()
    }

    pub fn to_f64(&self) -> Array2<f64> {
        self.embeddings.mapv(f64::from)
    }

    /// Same classes with new values, stored at `f32` precision.
    pub fn with_values(&self, values: &Array2<f64>) -> Result<Self> {
        if values.dim() != self.embeddings.dim() {
            return Err(Error::InputShape(format!(
                "embedding update {:?} does not match {:?}",
                values.dim(),
                self.embeddings.dim()
            )));
        }
        Self::new(values.mapv(|v| v as f32), self.class_names.clone())
    }
}

/// Plain-array attention maps captured in one denoiser pass (heads averaged).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionProbeSet {
    /// Layer id → `(H', W', T)` cross-attention.
    pub cross: BTreeMap<usize, Array3<f64>>,
    /// Layer id → `(H', W', H', W')` self-attention, query axes first.
    pub self_attention: BTreeMap<usize, Array4<f64>>,
    /// `(C, H, W)` predicted noise.
    pub predicted_noise: Array3<f64>,
}

/// A probed map living in a graph: `(H'·W') × channels`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeMap {
    pub var: Var,
    pub height: usize,
    pub width: usize,
}

/// Differentiable probes produced by [`Backbone::forward`].
#[derive(Debug, Clone)]
pub struct GraphProbes {
    pub cross: BTreeMap<usize, ProbeMap>,
    pub self_attention: BTreeMap<usize, ProbeMap>,
    /// `(H·W) × C` predicted noise.
    pub predicted_noise: Var,
    pub latent_hw: (usize, usize),
}

impl GraphProbes {
    pub fn materialize(&self, g: &Graph) -> AttentionProbeSet {
        let cross = self
            .cross
            .iter()
            .map(|(&id, p)| {
                let v = g.value(p.var);
                let t = v.ncols();
                (
                    id,
                    v.to_shape((p.height, p.width, t))
                        .expect("probe shape")
                        .into_owned(),
                )
            })
            .collect();
        let self_attention = self
            .self_attention
            .iter()
            .map(|(&id, p)| {
                let shape = (p.height, p.width, p.height, p.width);
                (
                    id,
                    g.value(p.var)
                        .to_shape(shape)
                        .expect("probe shape")
                        .into_owned(),
                )
            })
            .collect();
        AttentionProbeSet {
            cross,
            self_attention,
            predicted_noise: rows_to_latent(g.value(self.predicted_noise), self.latent_hw),
        }
    }

    /// Inserts a recorded probe set into `g` as constants.
    pub fn from_probe_set(g: &mut Graph, probes: &AttentionProbeSet) -> Self {
        let cross = probes
            .cross
            .iter()
            .map(|(&id, a)| {
                let (h, w, t) = a.dim();
                let var = g.constant(a.to_shape((h * w, t)).expect("cross shape").into_owned());
                (
                    id,
                    ProbeMap {
                        var,
                        height: h,
                        width: w,
                    },
                )
            })
            .collect();
        let self_attention = probes
            .self_attention
            .iter()
            .map(|(&id, a)| {
                let (h, w, _, _) = a.dim();
                let var = g.constant(a.to_shape((h * w, h * w)).expect("self shape").into_owned());
                (
                    id,
                    ProbeMap {
                        var,
                        height: h,
                        width: w,
                    },
                )
            })
            .collect();
        let (_, h, w) = probes.predicted_noise.dim();
        let predicted_noise = g.constant(latent_rows(&probes.predicted_noise));
        Self {
            cross,
            self_attention,
            predicted_noise,
            latent_hw: (h, w),
        }
    }
}

/// `(C, H, W)` → `(H·W) × C`.
pub fn latent_rows(latent: &Array3<f64>) -> Array2<f64> {
    let (c, h, w) = latent.dim();
    Array2::from_shape_fn((h * w, c), |(p, ch)| latent[[ch, p / w, p % w]])
}

/// `(H·W) × C` → `(C, H, W)`.
pub fn rows_to_latent(rows: &Array2<f64>, hw: (usize, usize)) -> Array3<f64> {
    let (h, w) = hw;
    Array3::from_shape_fn((rows.ncols(), h, w), |(ch, y, x)| rows[[y * w + x, ch]])
}

/// Identity of a backbone, recorded in checkpoints and manifests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneDescriptor {
    pub name: String,
    pub cross_attention_layer_ids: Vec<usize>,
    pub self_attention_layer_ids: Vec<usize>,
    /// `(C, H, W)` of the latent.
    pub latent_shape: (usize, usize, usize),
    /// `(H, W)` of images accepted by the encoder.
    pub input_size: (usize, usize),
    pub token_capacity: usize,
    pub embedding_dim: usize,
    pub max_timestep: usize,
    pub parameter_digest: String,
}

impl BackboneDescriptor {
    /// Short identity string used by the checkpoint compatibility guard.
    pub fn identity(&self) -> String {
        format!("{}:{}", self.name, self.parameter_digest)
    }
}

pub trait Backbone: Send + Sync {
    fn descriptor(&self) -> &BackboneDescriptor;

    fn scheduler(&self) -> &NoiseScheduler;

    /// Deterministic latent for an `input_size` RGB image.
    fn encode_image(&self, image: &Image) -> Result<LatentImage>;

    /// Text-encoder embeddings for `text`, or seeded random ones for
    /// [`RANDOM_PROMPT`]. `class_names.len()` is the class count K.
    fn encode_prompt(
        &self,
        text: &str,
        class_names: &[String],
        seed: u64,
    ) -> Result<PromptEmbeddings>;

    /// Runs the denoiser on `g`; `prompt` must be a `token_capacity × embedding_dim` node.
    fn forward(&self, g: &mut Graph, sample: &NoisySample, prompt: Var) -> Result<GraphProbes>;

    /// Digest recomputed from the live parameter values.
    fn parameter_digest(&self) -> String;

    fn add_noise(
        &self,
        latent: &LatentImage,
        t: usize,
        noise: Option<Array3<f64>>,
        seed: u64,
    ) -> Result<NoisySample> {
        let max = self.scheduler().max_timestep();
        if t > max {
            return Err(Error::Timestep { t, max });
        }
        let noise = noise.unwrap_or_else(|| standard_normal(latent.dim(), seed));
        let noisy = self.scheduler().noisy(&latent.data, &noise, t)?;
        Ok(NoisySample {
            noisy: LatentImage::new(noisy, latent.scale)?,
            noise,
            timestep: t,
        })
    }

    fn denoise_with_probes(
        &self,
        sample: &NoisySample,
        prompt: &PromptEmbeddings,
    ) -> Result<AttentionProbeSet> {
        let d = self.descriptor();
        if prompt.embeddings().dim() != (d.token_capacity, d.embedding_dim) {
            return Err(Error::InputShape(format!(
                "prompt is {:?}, backbone expects ({}, {})",
                prompt.embeddings().dim(),
                d.token_capacity,
                d.embedding_dim
            )));
        }
        let mut g = Graph::new();
        let p = g.constant(prompt.to_f64());
        let probes = self.forward(&mut g, sample, p)?;
        Ok(probes.materialize(&g))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneName {
    Toy,
    Sd21,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub name: BackboneName,
    /// Weights file for `sd21`; falls back to `$PARTSEG_WEIGHTS_DIR/sd21.safetensors`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
    /// Initialization seed of the toy backbone.
    #[serde(default = "default_toy_seed")]
    pub toy_seed: u64,
}

fn default_toy_seed() -> u64 {
    TOY_DEFAULT_SEED
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            name: BackboneName::Toy,
            weights: None,
            toy_seed: TOY_DEFAULT_SEED,
        }
    }
}

/// Environment variable naming the weights/cache directory.
pub const WEIGHTS_DIR_ENV: &str = "PARTSEG_WEIGHTS_DIR";

pub fn load_backbone(config: &BackboneConfig) -> Result<Box<dyn Backbone>> {
    match config.name {
        BackboneName::Toy => Ok(Box::new(ToyBackbone::new(config.toy_seed))),
        BackboneName::Sd21 => {
            let path = match &config.weights {
                Some(p) => p.clone(),
                None => std::env::var_os(WEIGHTS_DIR_ENV)
                    .map(|dir| PathBuf::from(dir).join("sd21.safetensors"))
                    .ok_or_else(|| {
                        Error::Config(format!(
                            "backbone.weights is required for sd21 (or set {WEIGHTS_DIR_ENV})"
                        ))
                    })?,
            };
            Ok(Box::new(Sd21Backbone::open(&path)?))
        }
    }
}
