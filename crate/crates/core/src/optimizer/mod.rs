//! Text-embedding optimization against the composite attention loss.

mod checkpoint;
mod losses;

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    check_compatible, config_hash, decode_checkpoint, encode_checkpoint, load_embeddings,
    read_checkpoint, save_embeddings, sha256_hex, CheckpointMeta, CHECKPOINT_VERSION,
};
pub use losses::{
    ce_loss, ce_loss_graph, combine_graph, ldm_loss, ldm_loss_graph, mse_loss, mse_loss_graph,
    resize_mask, LossBreakdown, Reduction, ResizedMask, CE_EPS,
};

use crate::attention::{
    aggregate_cross_graph, aggregate_self_graph, stack_was_graph, DEFAULT_GATE, DEFAULT_TARGET,
};
use crate::autodiff::Graph;
use crate::backbone::{Backbone, NoisySample, PromptEmbeddings, RANDOM_PROMPT};
use crate::data::{augment, AnnotatedSample, AugmentationSpec};
use crate::error::{Error, Result};
use crate::eval::{evaluate, Accumulation};
use crate::imageops::resize_image;
use crate::inference::InferenceConfig;

/// How the prompt embeddings are initialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PromptInit {
    /// The word "part" once per foreground class.
    #[default]
    RepeatedPart,
    /// No words; every slot holds padding.
    Empty,
    /// The foreground class names.
    ClassNames,
    /// Seeded random vectors.
    Random,
    /// A literal prompt.
    Text(String),
}

impl PromptInit {
    pub fn text(&self, class_names: &[String]) -> String {
        let foreground = class_names.iter().skip(1);
        match self {
            Self::RepeatedPart => foreground.map(|_| "part").collect::<Vec<_>>().join(" "),
            Self::Empty => String::new(),
            Self::ClassNames => foreground.cloned().collect::<Vec<_>>().join(" "),
            Self::Random => RANDOM_PROMPT.to_string(),
            Self::Text(t) => t.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizationConfig {
    pub epochs: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    /// Weight of the WAS mean-squared-error term.
    pub alpha: f64,
    /// Weight of the denoising term.
    pub beta: f64,
    /// Inclusive range `t_opt` is drawn from each iteration.
    pub t_opt_range: (usize, usize),
    /// Loss resolution `(H'', W'')`.
    pub target: (usize, usize),
    pub gate: f64,
    pub seed: u64,
    pub augmentation: AugmentationSpec,
    /// Include the WAS term; when false only cross-entropy and denoising remain.
    pub use_was: bool,
    pub mse_reduction: Reduction,
    pub ldm_reduction: Reduction,
    pub prompt: PromptInit,
}

impl Default for OptimizationConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 1,
            alpha: 1.0,
            beta: 0.005,
            t_opt_range: (5, 100),
            target: DEFAULT_TARGET,
            gate: DEFAULT_GATE,
            seed: 0,
            augmentation: AugmentationSpec::none(),
            use_was: true,
            mse_reduction: Reduction::Sum,
            ldm_reduction: Reduction::Mean,
            prompt: PromptInit::RepeatedPart,
        }
    }
}

impl OptimizationConfig {
    pub fn validate(&self, max_timestep: usize) -> Result<()> {
        let (lo, hi) = self.t_opt_range;
        let checks = [
            (
                self.lr.is_finite() && self.lr >= 0.0,
                "lr must be finite and non-negative",
            ),
            (self.batch_size >= 1, "batch_size must be at least 1"),
            (lo <= hi, "t_opt_range must be ordered"),
            (
                hi <= max_timestep,
                "t_opt_range exceeds the scheduler range",
            ),
            (
                self.target.0 > 0 && self.target.1 > 0,
                "target must be non-empty",
            ),
            (
                (0.0..1.0).contains(&self.adam_beta1) && (0.0..1.0).contains(&self.adam_beta2),
                "Adam betas must lie in [0, 1)",
            ),
            (self.adam_eps > 0.0, "adam_eps must be positive"),
            (
                self.alpha.is_finite() && self.beta.is_finite(),
                "alpha and beta must be finite",
            ),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::Config(msg.to_string())),
            None => self.augmentation.validate(),
        }
    }

    /// Inference settings used for validation scoring.
    pub fn validation_inference(&self) -> InferenceConfig {
        InferenceConfig {
            gate: self.gate,
            use_was: self.use_was,
            target: self.target,
            ..InferenceConfig::default()
        }
    }
}

/// Inputs of one loss evaluation: a noised latent and the resized mask.
#[derive(Debug, Clone)]
pub struct StepInput {
    pub sample: NoisySample,
    pub mask: ResizedMask,
}

/// Encodes `sample` (resized to the backbone input) and noises it at `t`.
pub fn prepare_step(
    backbone: &dyn Backbone,
    sample: &AnnotatedSample,
    config: &OptimizationConfig,
    t: usize,
    noise_seed: u64,
) -> Result<StepInput> {
    let size = backbone.descriptor().input_size;
    let (h, w) = sample.dim();
    let image = if (h, w) == size {
        sample.image.clone()
    } else {
        resize_image(&sample.image, size)
    };
    let latent = backbone.encode_image(&image)?;
    let noisy = backbone.add_noise(&latent, t, None, noise_seed)?;
    let mask = resize_mask(&sample.mask, sample.num_classes(), config.target)?;
    Ok(StepInput {
        sample: noisy,
        mask,
    })
}

/// Total loss and its gradient with respect to the full prompt matrix.
pub fn loss_and_gradient(
    backbone: &dyn Backbone,
    input: &StepInput,
    prompt: &Array2<f64>,
    config: &OptimizationConfig,
) -> Result<(LossBreakdown, Array2<f64>)> {
    let mut g = Graph::new();
    let p = g.variable(prompt.clone());
    let probes = backbone.forward(&mut g, &input.sample, p)?;
    let a_ca = aggregate_cross_graph(&mut g, &probes, config.target)?;
    let ce = ce_loss_graph(&mut g, a_ca, &input.mask)?;
    let mse = if config.use_was {
        let a_sa = aggregate_self_graph(&mut g, &probes)?;
        let was = stack_was_graph(&mut g, a_ca, a_sa, input.mask.num_classes(), config.gate)?;
        mse_loss_graph(&mut g, &was, &input.mask, config.mse_reduction)?
    } else {
        g.constant(Array2::zeros((1, 1)))
    };
    let ldm = ldm_loss_graph(
        &mut g,
        probes.predicted_noise,
        &input.sample.noise,
        config.ldm_reduction,
    )?;
    let total = combine_graph(&mut g, ce, mse, ldm, config.alpha, config.beta);
    let breakdown = LossBreakdown::new(
        g.scalar(ce),
        g.scalar(mse),
        g.scalar(ldm),
        config.alpha,
        config.beta,
    );
    debug_assert_eq!(breakdown.total.to_bits(), g.scalar(total).to_bits());
    let grads = g.backward(total);
    let grad = grads
        .wrt(p)
        .cloned()
        .unwrap_or_else(|| Array2::zeros(prompt.dim()));
    Ok((breakdown, grad))
}

/// Adam over the optimizable rows only.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Array2<f64>,
    v: Array2<f64>,
    step: i32,
}

impl Adam {
    pub fn new(shape: (usize, usize), lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            m: Array2::zeros(shape),
            v: Array2::zeros(shape),
            step: 0,
        }
    }

    pub fn step(&mut self, params: &mut Array2<f64>, grad: &Array2<f64>) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        ndarray::Zip::from(params)
            .and(&mut self.m)
            .and(&mut self.v)
            .and(grad)
            .for_each(|p, m, v, &g| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            });
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub sample: String,
    pub timestep: usize,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_total: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation_miou: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct OptimizationOutcome {
    pub embeddings: PromptEmbeddings,
    pub initial: PromptEmbeddings,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    /// Epoch (1-based) whose embeddings were returned; 0 means the initialization.
    pub selected_epoch: usize,
}

fn check_samples(samples: &[AnnotatedSample]) -> Result<&[String]> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Config("at least one training sample is required".into()))?;
    if let Some(s) = samples.iter().find(|s| s.class_names != first.class_names) {
        return Err(Error::Config(format!(
            "{} has classes {:?}, expected {:?}",
            s.source_id, s.class_names, first.class_names
        )));
    }
    Ok(&first.class_names)
}

/// Optimizes the class embeddings on `samples`.
///
/// Each epoch visits every sample once (shuffled), in groups of
/// `batch_size` whose gradients are averaged. With a non-empty
/// `validation` set the embeddings with the best validation mIoU are
/// returned; otherwise those of the final epoch.
pub fn optimize(
    samples: &[AnnotatedSample],
    validation: &[AnnotatedSample],
    backbone: &dyn Backbone,
    config: &OptimizationConfig,
) -> Result<OptimizationOutcome> {
    config.validate(backbone.scheduler().max_timestep())?;
    let class_names = check_samples(samples)?.to_vec();
    if let Some(v) = validation.iter().find(|v| v.class_names != class_names) {
        return Err(Error::Config(format!(
            "validation sample {} has other classes",
            v.source_id
        )));
    }
    let initial =
        backbone.encode_prompt(&config.prompt.text(&class_names), &class_names, config.seed)?;
    let mut params = initial.to_f64();
    let rows = initial.optimizable_indices();
    let mut adam = Adam::new(
        params.slice(s![rows.clone(), ..]).dim(),
        config.lr,
        config.adam_beta1,
        config.adam_beta2,
        config.adam_eps,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, PromptEmbeddings)> = None;
    let mut step = 0;
    let val_config = config.validation_inference();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut grad_sum = Array2::<f64>::zeros(params.dim());
            for &i in batch {
                let aug_seed: u64 = rng.random();
                let t = rng.random_range(config.t_opt_range.0..=config.t_opt_range.1);
                let noise_seed: u64 = rng.random();
                let sample = augment(&samples[i], &config.augmentation, aug_seed);
                let input = prepare_step(backbone, &sample, config, t, noise_seed)?;
                let (loss, grad) = loss_and_gradient(backbone, &input, &params, config)?;
                if !loss.is_finite() || grad.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Divergence {
                        epoch,
                        step,
                        detail: format!(
                            "sample {} at t={t}: ce={} mse={} ldm={} total={}",
                            samples[i].source_id, loss.l_ce, loss.l_mse, loss.l_ldm, loss.total
                        ),
                    });
                }
                epoch_total += loss.total;
                grad_sum += &grad;
                steps.push(StepRecord {
                    epoch,
                    step,
                    sample: samples[i].source_id.clone(),
                    timestep: t,
                    loss,
                });
                step += 1;
            }
            grad_sum /= batch.len() as f64;
            let mut trainable = params.slice(s![rows.clone(), ..]).to_owned();
            adam.step(
                &mut trainable,
                &grad_sum.slice(s![rows.clone(), ..]).to_owned(),
            );
            // Embeddings are stored as f32, so anything beyond its range has diverged too.
            if trainable
                .iter()
                .any(|v| !v.is_finite() || v.abs() > f32::MAX as f64)
            {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    detail: format!(
                        "embedding update overflowed at learning rate {:e}",
                        config.lr
                    ),
                });
            }
            params.slice_mut(s![rows.clone(), ..]).assign(&trainable);
        }
        let mut record = EpochRecord {
            epoch,
            mean_total: epoch_total / samples.len() as f64,
            validation_miou: None,
        };
        if !validation.is_empty() {
            let current = initial.with_values(&params)?;
            let score = evaluate(
                &current,
                validation,
                backbone,
                &val_config,
                Accumulation::Dataset,
            )?
            .average
            .unwrap_or(0.0);
            record.validation_miou = Some(score);
            if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
                best = Some((score, epoch, current));
            }
        }
        epochs.push(record);
    }
    let (embeddings, selected_epoch) = match best {
        Some((_, epoch, emb)) => (emb, epoch),
        None => (initial.with_values(&params)?, config.epochs),
    };
    Ok(OptimizationOutcome {
        embeddings,
        initial,
        steps,
        epochs,
        selected_epoch,
    })
}
