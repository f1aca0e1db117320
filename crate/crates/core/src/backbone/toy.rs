//! Small deterministic UNet-shaped denoiser for tests and desk-scale runs.
//!
//! Layout (attention layer ids in execution order):
//!
//! ```text
//! 16×16:  self#0  cross#1  ff  ─┐ skip
//!  8×8 :  self#2  cross#3  ff  cross#4
//! 16×16:  cross#5 self#6 cross#7 self#8 ff cross#9 self#10   (+ skip)
//! ```
//!
//! Cross-attention probes default to layers 3, 4, 5, 7, 9 (two resolutions);
//! self-attention probes to the last three self layers, all at 16×16.
//!
//! Cross-attention queries carry a bias aligned with the key of the
//! start-of-sequence token, which therefore absorbs a large share of
//! attention everywhere, as it does in CLIP-conditioned denoisers, while
//! padding tokens are pushed well below it. Self
//! attention uses nearly tied query/key projections so that latents with
//! similar features attend to each other.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use ndarray::{s, Array1, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::{
    latent_rows, Backbone, BackboneDescriptor, GraphProbes, LatentImage, NoisySample, ProbeMap,
    PromptEmbeddings, RANDOM_PROMPT,
};
use crate::autodiff::{Graph, SparseRows, Var};
use crate::error::{Error, Result};
use crate::imageops::Image;
use crate::scheduler::{BetaSchedule, NoiseScheduler};

pub const TOY_DEFAULT_SEED: u64 = 0x5eed_7011;

const IMAGE_SIZE: usize = 64;
const LATENT_CHANNELS: usize = 8;
const LATENT_SIZE: usize = 16;
const TOKENS: usize = 77;
const TEXT_DIM: usize = 32;
const MODEL_DIM: usize = 32;
const HEADS: usize = 2;
const FF_DIM: usize = 64;
const VOCAB: usize = 512;
const BOS: usize = 0;
const EOS: usize = 1;
const PAD: usize = 2;
const LN_EPS: f64 = 1e-5;
/// Pre-softmax score of the start token at an average query.
const SINK_LOGIT: f64 = 4.0;
/// Pre-softmax score of padding tokens at an average query.
const PAD_LOGIT: f64 = -6.0;
const SELF_QK_STD: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum AttentionKind {
    Cross,
    SelfAttention,
}

#[derive(Debug, Clone)]
struct AttentionLayer {
    id: usize,
    kind: AttentionKind,
    wq: Array2<f64>,
    bq: Array2<f64>,
    wk: Array2<f64>,
    wv: Array2<f64>,
    wo: Array2<f64>,
}

#[derive(Debug, Clone)]
struct FeedForward {
    w1: Array2<f64>,
    b1: Array2<f64>,
    w2: Array2<f64>,
}

#[derive(Debug, Clone)]
enum Stage {
    Attention(AttentionLayer),
    FeedForward(FeedForward),
    Down,
    Up,
}

#[derive(Debug, Clone)]
pub struct ToyBackbone {
    descriptor: BackboneDescriptor,
    scheduler: NoiseScheduler,
    encoder_w: Array2<f64>,
    encoder_b: Array2<f64>,
    token_table: Array2<f64>,
    positions: Array2<f64>,
    time_proj: Array2<f64>,
    w_in: Array2<f64>,
    b_in: Array2<f64>,
    stages: Vec<Stage>,
    w_out: Array2<f64>,
    b_out: Array2<f64>,
    pool: Arc<SparseRows>,
    upsample: Arc<SparseRows>,
}

/// Vector `v` in span{a, b} with `v·a = ta` and `v·b = tb`.
fn two_target_bias(
    a: &ndarray::ArrayView1<f64>,
    b: &ndarray::ArrayView1<f64>,
    ta: f64,
    tb: f64,
) -> Array1<f64> {
    let (aa, ab, bb) = (a.dot(a), a.dot(b), b.dot(b));
    let det = aa * bb - ab * ab;
    if det.abs() < 1e-12 * aa * bb {
        return a.to_owned() * (ta / aa.max(1e-12));
    }
    let ca = (ta * bb - tb * ab) / det;
    let cb = (tb * aa - ta * ab) / det;
    a.to_owned() * ca + b.to_owned() * cb
}

fn gaussian(rng: &mut ChaCha8Rng, shape: (usize, usize), std: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

/// 2×2 average pooling on a `side × side` grid.
fn pool_matrix(side: usize) -> SparseRows {
    let half = side / 2;
    let rows = (0..half * half)
        .map(|p| {
            let (y, x) = (p / half, p % half);
            let mut row = Vec::with_capacity(4);
            for dy in 0..2 {
                for dx in 0..2 {
                    row.push(((2 * y + dy) * side + 2 * x + dx, 0.25));
                }
            }
            row
        })
        .collect();
    SparseRows::new(side * side, rows)
}

/// Nearest 2× upsampling of a `side × side` grid.
fn upsample_matrix(side: usize) -> SparseRows {
    let big = side * 2;
    let rows = (0..big * big)
        .map(|p| {
            let (y, x) = (p / big, p % big);
            vec![((y / 2) * side + x / 2, 1.0)]
        })
        .collect();
    SparseRows::new(side * side, rows)
}

fn fnv1a(word: &str) -> u64 {
    word.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn token_ids(text: &str) -> Vec<usize> {
    let mut ids = vec![BOS];
    ids.extend(
        text.split_whitespace()
            .take(TOKENS - 2)
            .map(|w| 3 + (fnv1a(&w.to_lowercase()) % (VOCAB as u64 - 3)) as usize),
    );
    ids.push(EOS);
    ids.resize(TOKENS, PAD);
    ids
}

fn timestep_embedding(t: usize) -> Array2<f64> {
    let half = MODEL_DIM / 2;
    let mut out = Array2::zeros((1, MODEL_DIM));
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        out[[0, 2 * i]] = (t as f64 * freq).sin();
        out[[0, 2 * i + 1]] = (t as f64 * freq).cos();
    }
    out
}

impl ToyBackbone {
    pub fn new(seed: u64) -> Self {
        Self::with_probe_layers(seed, vec![3, 4, 5, 7, 9], vec![6, 8, 10])
            .expect("default toy probe layers are valid")
    }

    /// Toy backbone probing the given attention layer ids.
    pub fn with_probe_layers(
        seed: u64,
        cross_ids: Vec<usize>,
        self_ids: Vec<usize>,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = MODEL_DIM;
        let encoder_w = gaussian(&mut rng, (3, LATENT_CHANNELS), 1.0);
        let encoder_b = gaussian(&mut rng, (1, LATENT_CHANNELS), 0.3);
        let token_table = gaussian(&mut rng, (VOCAB, TEXT_DIM), 1.0);
        let positions = gaussian(&mut rng, (TOKENS, TEXT_DIM), 0.1);
        let time_proj = gaussian(&mut rng, (d, d), 0.5 / (d as f64).sqrt());
        let w_in = gaussian(
            &mut rng,
            (LATENT_CHANNELS, d),
            1.0 / (LATENT_CHANNELS as f64).sqrt(),
        );
        let b_in = gaussian(&mut rng, (1, d), 0.1);

        let bos_embedding = token_table.row(BOS).to_owned() + positions.row(0);
        let pad_embedding = token_table.row(PAD).to_owned();
        let head_dim = d / HEADS;

        use AttentionKind::{Cross, SelfAttention};
        let plan: [Option<AttentionKind>; 16] = [
            Some(SelfAttention),
            Some(Cross),
            None,
            None, // down
            Some(SelfAttention),
            Some(Cross),
            None,
            Some(Cross),
            None, // up
            Some(Cross),
            Some(SelfAttention),
            Some(Cross),
            Some(SelfAttention),
            None,
            Some(Cross),
            Some(SelfAttention),
        ];
        let mut stages = Vec::new();
        let mut next_id = 0;
        for (i, slot) in plan.iter().enumerate() {
            match slot {
                Some(kind) => {
                    let layer = match kind {
                        Cross => {
                            let wq = gaussian(&mut rng, (d, d), 1.0 / (d as f64).sqrt());
                            let wk =
                                gaussian(&mut rng, (TEXT_DIM, d), 1.0 / (TEXT_DIM as f64).sqrt());
                            let wv =
                                gaussian(&mut rng, (TEXT_DIM, d), 1.0 / (TEXT_DIM as f64).sqrt());
                            let wo = gaussian(&mut rng, (d, d), 0.5 / (d as f64).sqrt());
                            let k_bos: Array1<f64> = bos_embedding.dot(&wk);
                            let k_pad: Array1<f64> = pad_embedding.dot(&wk);
                            let mut bq = Array2::zeros((1, d));
                            for h in 0..HEADS {
                                let range = h * head_dim..(h + 1) * head_dim;
                                let a = k_bos.slice(s![range.clone()]);
                                let b = k_pad.slice(s![range.clone()]);
                                let root = (head_dim as f64).sqrt();
                                let bias =
                                    two_target_bias(&a, &b, SINK_LOGIT * root, PAD_LOGIT * root);
                                bq.slice_mut(s![0, range]).assign(&bias);
                            }
                            AttentionLayer {
                                id: next_id,
                                kind: Cross,
                                wq,
                                bq,
                                wk,
                                wv,
                                wo,
                            }
                        }
                        SelfAttention => {
                            let wq = gaussian(&mut rng, (d, d), SELF_QK_STD / (d as f64).sqrt());
                            let wk = &wq
                                + &gaussian(
                                    &mut rng,
                                    (d, d),
                                    0.25 * SELF_QK_STD / (d as f64).sqrt(),
                                );
                            let wv = gaussian(&mut rng, (d, d), 1.0 / (d as f64).sqrt());
                            let wo = gaussian(&mut rng, (d, d), 0.5 / (d as f64).sqrt());
                            let bq = Array2::zeros((1, d));
                            AttentionLayer {
                                id: next_id,
                                kind: SelfAttention,
                                wq,
                                bq,
                                wk,
                                wv,
                                wo,
                            }
                        }
                    };
                    next_id += 1;
                    stages.push(Stage::Attention(layer));
                }
                None if i == 3 => stages.push(Stage::Down),
                None if i == 8 => stages.push(Stage::Up),
                None => stages.push(Stage::FeedForward(FeedForward {
                    w1: gaussian(&mut rng, (d, FF_DIM), 1.0 / (d as f64).sqrt()),
                    b1: gaussian(&mut rng, (1, FF_DIM), 0.1),
                    w2: gaussian(&mut rng, (FF_DIM, d), 0.5 / (FF_DIM as f64).sqrt()),
                })),
            }
        }
        let w_out = gaussian(&mut rng, (d, LATENT_CHANNELS), 1.0 / (d as f64).sqrt());
        let b_out = gaussian(&mut rng, (1, LATENT_CHANNELS), 0.1);

        let layer_kinds: BTreeMap<usize, AttentionKind> = stages
            .iter()
            .filter_map(|s| match s {
                Stage::Attention(l) => Some((l.id, l.kind)),
                _ => None,
            })
            .collect();
        for (ids, kind, label) in [
            (&cross_ids, Cross, "cross"),
            (&self_ids, SelfAttention, "self"),
        ] {
            if ids.is_empty() {
                return Err(Error::Config(format!(
                    "no {label}-attention probe layers declared"
                )));
            }
            for id in ids {
                if layer_kinds.get(id) != Some(&kind) {
                    return Err(Error::Config(format!(
                        "toy backbone has no {label}-attention layer {id}"
                    )));
                }
            }
        }

        let mut backbone = Self {
            descriptor: BackboneDescriptor {
                name: "toy".into(),
                cross_attention_layer_ids: cross_ids,
                self_attention_layer_ids: self_ids,
                latent_shape: (LATENT_CHANNELS, LATENT_SIZE, LATENT_SIZE),
                input_size: (IMAGE_SIZE, IMAGE_SIZE),
                token_capacity: TOKENS,
                embedding_dim: TEXT_DIM,
                max_timestep: 1000,
                parameter_digest: String::new(),
            },
            scheduler: NoiseScheduler::new(BetaSchedule::Linear, 1e-4, 0.02, 1001),
            encoder_w,
            encoder_b,
            token_table,
            positions,
            time_proj,
            w_in,
            b_in,
            stages,
            w_out,
            b_out,
            pool: Arc::new(pool_matrix(LATENT_SIZE)),
            upsample: Arc::new(upsample_matrix(LATENT_SIZE / 2)),
        };
        backbone.descriptor.parameter_digest = backbone.parameter_digest();
        Ok(backbone)
    }

    fn parameters(&self) -> Vec<&Array2<f64>> {
        let mut params = vec![
            &self.encoder_w,
            &self.encoder_b,
            &self.token_table,
            &self.positions,
            &self.time_proj,
            &self.w_in,
            &self.b_in,
        ];
        for stage in &self.stages {
            match stage {
                Stage::Attention(l) => params.extend([&l.wq, &l.bq, &l.wk, &l.wv, &l.wo]),
                Stage::FeedForward(f) => params.extend([&f.w1, &f.b1, &f.w2]),
                Stage::Down | Stage::Up => {}
            }
        }
        params.extend([&self.w_out, &self.b_out]);
        params
    }

    /// Standard deviation of token-table entries, used to scale random prompts.
    fn embedding_std(&self) -> f64 {
        let n = self.token_table.len() as f64;
        let mean = self.token_table.sum() / n;
        (self.token_table.mapv(|v| (v - mean) * (v - mean)).sum() / n).sqrt()
    }

    fn attention(&self, g: &mut Graph, layer: &AttentionLayer, h: Var, prompt: Var) -> (Var, Var) {
        let normed = g.layer_norm_rows(h, LN_EPS);
        let wq = g.constant(layer.wq.clone());
        let bq = g.constant(layer.bq.clone());
        let wk = g.constant(layer.wk.clone());
        let wv = g.constant(layer.wv.clone());
        let wo = g.constant(layer.wo.clone());
        let q = g.matmul(normed, wq);
        let q = g.add_row(q, bq);
        let source = match layer.kind {
            AttentionKind::Cross => prompt,
            AttentionKind::SelfAttention => normed,
        };
        let k = g.matmul(source, wk);
        let v = g.matmul(source, wv);
        let head_dim = MODEL_DIM / HEADS;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut maps = Vec::with_capacity(HEADS);
        let mut outputs = Vec::with_capacity(HEADS);
        for head in 0..HEADS {
            let (lo, hi) = (head * head_dim, (head + 1) * head_dim);
            let qh = g.columns(q, lo, hi);
            let kh = g.columns(k, lo, hi);
            let vh = g.columns(v, lo, hi);
            let scores = g.matmul_nt(qh, kh);
            let scores = g.scale(scores, scale);
            let probs = g.softmax_rows(scores);
            outputs.push(g.matmul(probs, vh));
            maps.push(probs);
        }
        let merged = g.concat_columns(&outputs);
        let projected = g.matmul(merged, wo);
        let out = g.add(h, projected);
        let probe = g.mean(&maps);
        (out, probe)
    }

    fn feed_forward(&self, g: &mut Graph, ff: &FeedForward, h: Var) -> Var {
        let normed = g.layer_norm_rows(h, LN_EPS);
        let w1 = g.constant(ff.w1.clone());
        let b1 = g.constant(ff.b1.clone());
        let w2 = g.constant(ff.w2.clone());
        let a = g.matmul(normed, w1);
        let a = g.add_row(a, b1);
        let a = g.silu(a);
        let a = g.matmul(a, w2);
        g.add(h, a)
    }
}

impl Backbone for ToyBackbone {
    fn descriptor(&self) -> &BackboneDescriptor {
        &self.descriptor
    }

    fn scheduler(&self) -> &NoiseScheduler {
        &self.scheduler
    }

    fn encode_image(&self, image: &Image) -> Result<LatentImage> {
        let (h, w, c) = image.dim();
        if (h, w, c) != (IMAGE_SIZE, IMAGE_SIZE, 3) {
            return Err(Error::InputShape(format!(
                "toy encoder expects {IMAGE_SIZE}×{IMAGE_SIZE}×3, got {h}×{w}×{c}"
            )));
        }
        let cell = IMAGE_SIZE / LATENT_SIZE;
        let mut data = Array3::zeros((LATENT_CHANNELS, LATENT_SIZE, LATENT_SIZE));
        for y in 0..LATENT_SIZE {
            for x in 0..LATENT_SIZE {
                let patch = image.slice(s![y * cell..(y + 1) * cell, x * cell..(x + 1) * cell, ..]);
                let mut rgb = [0.0f64; 3];
                for ((_, _, ch), &v) in patch.indexed_iter() {
                    rgb[ch] += f64::from(v);
                }
                let n = (cell * cell) as f64;
                let feats = rgb.map(|v| 2.0 * v / n - 1.0);
                for out in 0..LATENT_CHANNELS {
                    let mut acc = self.encoder_b[[0, out]];
                    for (j, f) in feats.iter().enumerate() {
                        acc += f * self.encoder_w[[j, out]];
                    }
                    data[[out, y, x]] = 2.0 * (1.5 * acc).tanh();
                }
            }
        }
        LatentImage::new(data, cell as f64)
    }

    fn encode_prompt(
        &self,
        text: &str,
        class_names: &[String],
        seed: u64,
    ) -> Result<PromptEmbeddings> {
        if class_names.len() > TOKENS {
            return Err(Error::ClassCount {
                k: class_names.len(),
                capacity: TOKENS,
            });
        }
        let embeddings = if text == RANDOM_PROMPT {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            gaussian(&mut rng, (TOKENS, TEXT_DIM), self.embedding_std())
        } else {
            let ids = token_ids(text);
            Array2::from_shape_fn((TOKENS, TEXT_DIM), |(i, j)| {
                self.token_table[[ids[i], j]] + self.positions[[i, j]]
            })
        };
        PromptEmbeddings::new(embeddings.mapv(|v| v as f32), class_names.to_vec())
    }

    fn forward(&self, g: &mut Graph, sample: &NoisySample, prompt: Var) -> Result<GraphProbes> {
        if sample.noisy.dim() != self.descriptor.latent_shape {
            return Err(Error::InputShape(format!(
                "latent {:?} does not match {:?}",
                sample.noisy.dim(),
                self.descriptor.latent_shape
            )));
        }
        if g.shape(prompt) != (TOKENS, TEXT_DIM) {
            return Err(Error::InputShape(format!(
                "prompt node is {:?}, expected ({TOKENS}, {TEXT_DIM})",
                g.shape(prompt)
            )));
        }
        if sample.timestep > self.scheduler.max_timestep() {
            return Err(Error::Timestep {
                t: sample.timestep,
                max: self.scheduler.max_timestep(),
            });
        }
        let cross_ids: BTreeSet<usize> = self
            .descriptor
            .cross_attention_layer_ids
            .iter()
            .copied()
            .collect();
        let self_ids: BTreeSet<usize> = self
            .descriptor
            .self_attention_layer_ids
            .iter()
            .copied()
            .collect();

        let x = g.constant(latent_rows(&sample.noisy.data));
        let w_in = g.constant(self.w_in.clone());
        let in_bias = &self.b_in + &timestep_embedding(sample.timestep).dot(&self.time_proj);
        let in_bias = g.constant(in_bias);
        let h = g.matmul(x, w_in);
        let mut h = g.add_row(h, in_bias);

        let mut side = LATENT_SIZE;
        let mut skips = Vec::new();
        let mut cross = BTreeMap::new();
        let mut self_attention = BTreeMap::new();
        for stage in &self.stages {
            match stage {
                Stage::Attention(layer) => {
                    let (out, probe) = self.attention(g, layer, h, prompt);
                    h = out;
                    let map = ProbeMap {
                        var: probe,
                        height: side,
                        width: side,
                    };
                    match layer.kind {
                        AttentionKind::Cross if cross_ids.contains(&layer.id) => {
                            cross.insert(layer.id, map);
                        }
                        AttentionKind::SelfAttention if self_ids.contains(&layer.id) => {
                            self_attention.insert(layer.id, map);
                        }
                        _ => {}
                    }
                }
                Stage::FeedForward(ff) => h = self.feed_forward(g, ff, h),
                Stage::Down => {
                    skips.push(h);
                    h = g.sparse_left(self.pool.clone(), h);
                    side /= 2;
                }
                Stage::Up => {
                    let up = g.sparse_left(self.upsample.clone(), h);
                    let skip = skips.pop().expect("down before up");
                    h = g.add(up, skip);
                    side *= 2;
                }
            }
        }
        let normed = g.layer_norm_rows(h, LN_EPS);
        let w_out = g.constant(self.w_out.clone());
        let b_out = g.constant(self.b_out.clone());
        let eps = g.matmul(normed, w_out);
        let predicted_noise = g.add_row(eps, b_out);

        if cross.len() != cross_ids.len() || self_attention.len() != self_ids.len() {
            return Err(Error::Config(
                "declared probe layer was not captured".into(),
            ));
        }
        Ok(GraphProbes {
            cross,
            self_attention,
            predicted_noise,
            latent_hw: (LATENT_SIZE, LATENT_SIZE),
        })
    }

    fn parameter_digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(b"toy");
        for p in self.parameters() {
            for dim in p.shape() {
                hasher.update((*dim as u64).to_le_bytes());
            }
            for v in p.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn tokenization_pads_to_capacity() {
        let ids = token_ids("part part part");
        assert_eq!(ids.len(), TOKENS);
        assert_eq!(ids[0], BOS);
        assert_eq!(ids[1], ids[2]);
        assert_eq!(ids[4], EOS);
        assert!(ids[5..].iter().all(|&t| t == PAD));
        assert_eq!(token_ids("")[..2], [BOS, EOS]);
    }

    #[test]
    fn invalid_probe_layer_is_config_error() {
        assert!(matches!(
            ToyBackbone::with_probe_layers(1, vec![6], vec![8]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            ToyBackbone::with_probe_layers(1, vec![3], vec![99]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn start_token_absorbs_attention() {
        let bb = ToyBackbone::new(TOY_DEFAULT_SEED);
        let image = Image::from_elem((64, 64, 3), 0.4);
        let latent = bb.encode_image(&image).unwrap();
        let sample = bb.add_noise(&latent, 50, None, 0).unwrap();
        let prompt = bb.encode_prompt("part part", &names(3), 0).unwrap();
        let probes = bb.denoise_with_probes(&sample, &prompt).unwrap();
        for map in probes.cross.values() {
            let mean_bos = map.slice(s![.., .., 0]).mean().unwrap();
            assert!(mean_bos > 0.2, "start-token share {mean_bos}");
        }
    }

    #[test]
    fn digest_depends_on_seed() {
        let a = ToyBackbone::new(1);
        let b = ToyBackbone::new(2);
        assert_ne!(a.parameter_digest(), b.parameter_digest());
        assert_eq!(a.parameter_digest(), ToyBackbone::new(1).parameter_digest());
        assert_eq!(a.descriptor().parameter_digest, a.parameter_digest());
    }
}
