//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.
//!
//! Run with `cargo test -p partseg-core --test acceptance`.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::*;
use ndarray::{Array2, Array3};
use partseg_core::attention::WasMapStack;
use partseg_core::attention::{aggregate, compose_was, DEFAULT_TARGET};
use partseg_core::backbone::{AttentionProbeSet, LatentImage, NoisySample};
use partseg_core::backbone::{Backbone, ToyBackbone, TOY_DEFAULT_SEED};
use partseg_core::data::{select_instances, BBox, PascalCategory, PascalPrepConfig};
use partseg_core::data::{two_region_sample, AnnotatedSample, AugmentationSpec};
use partseg_core::eval::{evaluate, iou, mean_defined, Accumulation, EvalReport};
use partseg_core::imageops::{resize_map, Image};
use partseg_core::inference::{coverage_map, segment, write_segmentation, InferenceConfig};
use partseg_core::optimizer::{
    ce_loss, encode_checkpoint, ldm_loss, loss_and_gradient, mse_loss, optimize, prepare_step,
    resize_mask, OptimizationConfig, PromptInit, Reduction,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;
/// Checkpoint bytes, mask files and report json of one run.
type RunArtifacts = (Vec<u8>, Vec<Vec<u8>>, String);
type Criterion = (u32, &'static str, Duration, fn() -> Check);

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn random_image(rng: &mut ChaCha8Rng, size: usize) -> Image {
    Array3::from_shape_fn((size, size, 3), |_| rng.random::<f32>())
}

fn names(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("class{i}")).collect()
}

/// 1. Aggregated attention rows are distributions.
fn attention_normalization() -> Check {
    let bb = ToyBackbone::new(TOY_DEFAULT_SEED);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_ca, mut worst_sa) = (0.0f64, 0.0f64);
    for pass in 0..100 {
        let image = random_image(&mut rng, 64);
        let k = rng.random_range(1..6);
        let prompt = if pass % 2 == 0 {
            bb.encode_prompt(&PromptInit::RepeatedPart.text(&names(k)), &names(k), 0)
        } else {
            bb.encode_prompt(
                partseg_core::backbone::RANDOM_PROMPT,
                &names(k),
                rng.random(),
            )
        }
        .map_err(|e| e.to_string())?;
        let latent = bb.encode_image(&image).map_err(|e| e.to_string())?;
        let t = rng.random_range(0..=1000);
        let sample = bb
            .add_noise(&latent, t, None, rng.random())
            .map_err(|e| e.to_string())?;
        let probes = bb
            .denoise_with_probes(&sample, &prompt)
            .map_err(|e| e.to_string())?;
        let agg = aggregate(&probes, DEFAULT_TARGET).map_err(|e| e.to_string())?;
        for row in agg.a_ca.rows() {
            worst_ca = worst_ca.max((row.sum() - 1.0).abs());
        }
        let (h, w, _, _) = agg.a_sa.dim();
        let flat = agg.a_sa.to_shape((h * w, h * w)).unwrap();
        for row in flat.rows() {
            worst_sa = worst_sa.max((row.sum() - 1.0).abs());
        }
    }
    ensure(
        worst_ca < 1e-4 && worst_sa < 1e-4,
        format!("max deviation A_ca {worst_ca:.2e}, A_sa {worst_sa:.2e}"),
    )?;
    Ok(format!(
        "100 passes, max deviation A_ca {worst_ca:.2e}, A_sa {worst_sa:.2e}"
    ))
}

/// 2. WAS maps keep the mass of the resized cross-attention channel.
fn was_mass_conservation() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_mass, mut worst_identity) = (0.0f64, 0.0f64);
    let mut channels = 0;
    while channels < 100 {
        let (h, w) = (rng.random_range(2..=16), rng.random_range(2..=16));
        let (ch, cw) = (rng.random_range(2..=64), rng.random_range(2..=64));
        let ca = Array2::from_shape_fn((ch, cw), |_| rng.random::<f64>());
        let sa = random_self_attention(&mut rng, h, w);
        let (s, passed) = compose_was(&ca, &sa, 0.2).map_err(|e| e.to_string())?;
        if !passed {
            continue;
        }
        channels += 1;
        let r = resize_map(&ca, (h, w));
        worst_mass = worst_mass.max((s.sum() - r.sum()).abs());
        let (s_id, _) =
            compose_was(&ca, &identity_self_attention(h, w), 0.2).map_err(|e| e.to_string())?;
        worst_identity = worst_identity.max(max_abs_diff(&s_id, &r));
    }
    ensure(
        worst_mass < 1e-4 && worst_identity < 1e-9,
        format!("mass error {worst_mass:.2e}, identity error {worst_identity:.2e}"),
    )?;
    Ok(format!(
        "100 channels, mass error {worst_mass:.2e}, identity error {worst_identity:.2e}"
    ))
}

/// 3. Library kernels against the brute-force references.
fn oracle_equivalence() -> Check {
    const INSTANCES: usize = 60;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = [0.0f64; 5];
    for _ in 0..INSTANCES {
        let dims = (rng.random_range(1..=8), rng.random_range(1..=8));
        let sa_dims = (rng.random_range(1..=8), rng.random_range(1..=8));
        let k = rng.random_range(1..=4);
        let tokens = k + rng.random_range(0..3);

        let ca = Array2::from_shape_fn(dims, |_| rng.random::<f64>());
        let sa = random_self_attention(&mut rng, sa_dims.0, sa_dims.1);
        let gate = rng.random_range(0.0..1.0);
        let (got, passed) = compose_was(&ca, &sa, gate).map_err(|e| e.to_string())?;
        let (want, want_passed) = was_oracle(&ca, &sa, gate);
        ensure(passed == want_passed, "gate decision differs")?;
        worst[0] = worst[0].max(max_abs_diff(&got, &want));

        let a_ca = Array3::from_shape_fn((dims.0, dims.1, tokens), |_| rng.random::<f64>());
        let labels = random_labels(&mut rng, dims, k);
        let mask = resize_mask(&labels, k, dims).map_err(|e| e.to_string())?;
        let got = ce_loss(&a_ca, &mask).map_err(|e| e.to_string())?;
        worst[1] = worst[1].max((got - ce_oracle(&a_ca, &labels, k)).abs());

        let maps: Vec<Array2<f64>> = (0..k)
            .map(|_| Array2::from_shape_fn(sa_dims, |_| rng.random::<f64>()))
            .collect();
        let stack = WasMapStack {
            maps: maps.clone(),
            gate_passed: vec![true; k],
        };
        for (reduction, mean) in [(Reduction::Sum, false), (Reduction::Mean, true)] {
            let got = mse_loss(&stack, &mask, reduction).map_err(|e| e.to_string())?;
            worst[2] = worst[2].max((got - mse_oracle(&maps, &labels, mean)).abs());
        }

        let shape = (rng.random_range(1..=4), dims.0, dims.1);
        let noise = Array3::from_shape_fn(shape, |_| rng.random::<f64>() - 0.5);
        let predicted = Array3::from_shape_fn(shape, |_| rng.random::<f64>() - 0.5);
        let probes = AttentionProbeSet {
            cross: Default::default(),
            self_attention: Default::default(),
            predicted_noise: predicted.clone(),
        };
        let sample = NoisySample {
            noisy: LatentImage::new(noise.clone(), 1.0).map_err(|e| e.to_string())?,
            noise: noise.clone(),
            timestep: 1,
        };
        for (reduction, mean) in [(Reduction::Sum, false), (Reduction::Mean, true)] {
            let got = ldm_loss(&probes, &sample, reduction).map_err(|e| e.to_string())?;
            worst[3] = worst[3].max((got - ldm_oracle(&predicted, &noise, mean)).abs());
        }

        let pred = random_labels(&mut rng, dims, k);
        let got = iou(&pred, &labels, k).map_err(|e| e.to_string())?;
        let want = iou_oracle(&pred, &labels, k);
        ensure(
            got.iter()
                .map(Option::is_some)
                .eq(want.iter().map(Option::is_some)),
            "iou definedness differs",
        )?;
        let diff = got
            .iter()
            .zip(&want)
            .filter_map(|(a, b)| Some((a.as_ref()? - b.as_ref()?).abs()))
            .fold(0.0, f64::max);
        worst[4] = worst[4].max(diff);
    }
    let detail = format!(
        "{INSTANCES} instances; max error was {:.1e}, ce {:.1e}, mse {:.1e}, ldm {:.1e}, iou {:.1e}",
        worst[0], worst[1], worst[2], worst[3], worst[4]
    );
    ensure(worst.iter().all(|&e| e < 1e-8), detail.clone())?;
    Ok(detail)
}

/// Four-class fixture: background, an ellipse split into left and right halves, and a bar.
fn four_class_sample() -> AnnotatedSample {
    let base = two_region_sample(64, 3);
    let mut mask = base.mask.clone();
    for ((y, x), l) in mask.indexed_iter_mut() {
        if *l == 1 && x >= 32 {
            *l = 2;
        }
        if y >= 56 {
            *l = 3;
        }
    }
    AnnotatedSample::new(base.image, mask, names(4), "four").unwrap()
}

/// 4. Analytic gradient against central differences.
fn gradient_check() -> Check {
    const STEP: f64 = 1e-4;
    const FLOOR: f64 = 1e-6;
    let bb = ToyBackbone::new(TOY_DEFAULT_SEED);
    let sample = four_class_sample();
    let cfg = OptimizationConfig::default();
    let emb = bb
        .encode_prompt(
            &cfg.prompt.text(&sample.class_names),
            &sample.class_names,
            0,
        )
        .map_err(|e| e.to_string())?;
    let base = emb.to_f64();
    let rows = emb.optimizable_indices();
    let dim = emb.embedding_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for instance in 0..4 {
        let t = [10, 40, 75, 100][instance];
        let input = prepare_step(&bb, &sample, &cfg, t, rng.random()).map_err(|e| e.to_string())?;
        let (_, grad) = loss_and_gradient(&bb, &input, &base, &cfg).map_err(|e| e.to_string())?;
        let total = |p: &Array2<f64>| loss_and_gradient(&bb, &input, p, &cfg).map(|(l, _)| l.total);
        let mut coords: Vec<(usize, usize)> = rows
            .clone()
            .flat_map(|r| (0..dim).map(move |c| (r, c)))
            .collect();
        coords.shuffle(&mut rng);
        for &(r, c) in coords.iter().take(50) {
            let mut plus = base.clone();
            plus[[r, c]] += STEP;
            let mut minus = base.clone();
            minus[[r, c]] -= STEP;
            let fd = (total(&plus).map_err(|e| e.to_string())?
                - total(&minus).map_err(|e| e.to_string())?)
                / (2.0 * STEP);
            let g = grad[[r, c]];
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(FLOOR);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    ensure(
        worst < 1e-3,
        format!("{checked} coordinates, max relative error {worst:.2e}"),
    )?;
    Ok(format!(
        "{checked} coordinates, max relative error {worst:.2e}"
    ))
}

fn miou_of(
    sample: &AnnotatedSample,
    emb: &partseg_core::backbone::PromptEmbeddings,
    bb: &ToyBackbone,
    use_was: bool,
) -> Result<f64, String> {
    let cfg = InferenceConfig {
        use_was,
        ..InferenceConfig::default()
    };
    let result = segment(&sample.image, emb, bb, &cfg).map_err(|e| e.to_string())?;
    let per_class =
        iou(&result.labels, &sample.mask, sample.num_classes()).map_err(|e| e.to_string())?;
    mean_defined(&per_class).ok_or_else(|| "no classes present".to_string())
}

/// 5. One synthetic sample is fitted, and WAS maps help at inference.
fn toy_overfit() -> Check {
    let bb = ToyBackbone::new(TOY_DEFAULT_SEED);
    let sample = two_region_sample(64, 1);
    let cfg = OptimizationConfig {
        epochs: 50,
        seed: 0,
        ..OptimizationConfig::default()
    };
    let out = optimize(std::slice::from_ref(&sample), &[], &bb, &cfg).map_err(|e| e.to_string())?;
    let with_was = miou_of(&sample, &out.embeddings, &bb, true)?;
    let without = miou_of(&sample, &out.embeddings, &bb, false)?;
    let detail = format!("mIoU with WAS {with_was:.3}, cross-attention only {without:.3}");
    ensure(with_was >= 0.8 && with_was >= without, detail.clone())?;
    Ok(detail)
}

/// 6. Optimization never touches the backbone or the background embedding.
fn frozen_state() -> Check {
    let bb = ToyBackbone::new(TOY_DEFAULT_SEED);
    let digest = bb.parameter_digest();
    let samples = [two_region_sample(64, 5), two_region_sample(64, 6)];
    let four = four_class_sample();
    let variants: Vec<(
        OptimizationConfig,
        Vec<AnnotatedSample>,
        Vec<AnnotatedSample>,
    )> = vec![
        (OptimizationConfig::default(), samples[..1].to_vec(), vec![]),
        (
            OptimizationConfig {
                use_was: false,
                batch_size: 2,
                ..Default::default()
            },
            samples.to_vec(),
            vec![],
        ),
        (
            OptimizationConfig {
                augmentation: AugmentationSpec::car(),
                prompt: PromptInit::ClassNames,
                ..Default::default()
            },
            vec![four.clone()],
            vec![],
        ),
        (
            OptimizationConfig {
                prompt: PromptInit::Random,
                lr: 0.5,
                ..Default::default()
            },
            samples[..1].to_vec(),
            samples[1..].to_vec(),
        ),
    ];
    for (i, (mut cfg, train, val)) in variants.into_iter().enumerate() {
        cfg.epochs = 4;
        cfg.seed = i as u64;
        let out = optimize(&train, &val, &bb, &cfg).map_err(|e| e.to_string())?;
        ensure(
            bb.parameter_digest() == digest,
            format!("run {i} changed the backbone"),
        )?;
        let (before, after) = (out.initial.embeddings(), out.embeddings.embeddings());
        let k = out.embeddings.num_classes();
        let frozen = |r: usize| {
            before
                .row(r)
                .iter()
                .zip(after.row(r))
                .all(|(a, b)| a.to_bits() == b.to_bits())
        };
        ensure(frozen(0), format!("run {i} changed embedding 0"))?;
        ensure(
            (k..before.nrows()).all(frozen),
            format!("run {i} changed padding embeddings"),
        )?;
        ensure(
            out.selected_epoch == 0 || before != after,
            format!("run {i} never updated"),
        )?;
    }
    Ok("4 runs, backbone digest and embedding 0 bit-identical".into())
}

/// 7. Box filters and patch coverage on hand-built fixtures.
fn data_prep_fixtures() -> Check {
    let b = |x0, y0, x1, y1| BBox::new(x0, y0, x1, y1);
    let boxes: Vec<(String, BBox)> = [
        ("car", b(0, 0, 100, 100)),        // 0: 4 % overlap with 1, kept
        ("car", b(96, 0, 196, 100)),       // 1: 4 % overlap with 0, kept
        ("car", b(300, 300, 400, 400)),    // 2: 10 % overlap with 3, removed
        ("car", b(390, 300, 490, 400)),    // 3: removed
        ("car", b(600, 300, 800, 500)),    // 4: 1.5 % of its own area, kept
        ("car", b(790, 300, 850, 360)),    // 5: 16.7 % of its own area, removed
        ("car", b(1000, 0, 1100, 100)),    // 6: exactly 5 %, kept
        ("person", b(1095, 0, 1195, 100)), // other category still blocks at > 5 %
        ("car", b(1300, 0, 1349, 80)),     // 8: 49 wide, removed by size
        ("car", b(1400, 0, 1450, 50)),     // 9: 50×50, kept
        ("car", b(1500, 0, 1580, 49)),     // 10: 49 tall, removed by size
        ("person", b(1700, 0, 1800, 100)),
        ("car", b(1790, 0, 1850, 60)), // 12: 10×60 of 3600 inside a person, removed
    ]
    .into_iter()
    .map(|(c, bb)| (c.to_string(), bb))
    .collect();
    let (kept, stats) = select_instances(&boxes, &PascalPrepConfig::new(PascalCategory::Car));
    ensure(kept == vec![0, 1, 4, 6, 9], format!("car kept {kept:?}"))?;
    ensure(
        (stats.candidates, stats.removed_overlap, stats.removed_size) == (11, 4, 2),
        format!("car stats {stats:?}"),
    )?;

    let horses: Vec<(String, BBox)> = [b(0, 0, 31, 40), b(100, 0, 132, 32), b(200, 0, 260, 31)]
        .into_iter()
        .map(|bb| ("horse".to_string(), bb))
        .collect();
    let (kept, _) = select_instances(&horses, &PascalPrepConfig::new(PascalCategory::Horse));
    ensure(kept == vec![1], format!("horse kept {kept:?}"))?;

    // Geometric reference: a pixel is covered by each corner patch whose square contains it.
    let cover = coverage_map(512, 400);
    let anchors = [(0, 0), (0, 112), (112, 0), (112, 112)];
    let oracle = Array2::from_shape_fn((512, 512), |(y, x)| {
        anchors
            .iter()
            .filter(|&&(ay, ax)| (ay..ay + 400).contains(&y) && (ax..ax + 400).contains(&x))
            .count() as u32
    });
    ensure(
        cover == oracle,
        "coverage map differs from the geometric reference",
    )?;
    let corners = [
        cover[[0, 0]],
        cover[[0, 511]],
        cover[[511, 0]],
        cover[[511, 511]],
    ];
    ensure(
        corners == [1; 4] && cover[[256, 256]] == 4,
        "corner/center coverage",
    )?;
    Ok("overlap, size and coverage fixtures match".into())
}

/// 8. Two identical runs give identical bytes.
fn reproducibility() -> Check {
    let run = || -> Result<RunArtifacts, String> {
        let bb = ToyBackbone::new(TOY_DEFAULT_SEED);
        let train = two_region_sample(64, 7);
        let test = vec![two_region_sample(64, 8), two_region_sample(64, 9)];
        let cfg = OptimizationConfig {
            epochs: 6,
            seed: 11,
            augmentation: AugmentationSpec::car(),
            ..Default::default()
        };
        let out =
            optimize(std::slice::from_ref(&train), &[], &bb, &cfg).map_err(|e| e.to_string())?;
        let ckpt = encode_checkpoint(
            &out.embeddings,
            bb.descriptor(),
            &serde_json::json!({"seed": 11}),
        )
        .map_err(|e| e.to_string())?;
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let inf = InferenceConfig {
            seed: 5,
            ..Default::default()
        };
        let mut masks = Vec::new();
        for s in &test {
            let r = segment(&s.image, &out.embeddings, &bb, &inf).map_err(|e| e.to_string())?;
            write_segmentation(dir.path(), &s.source_id, &r, &s.class_names, None)
                .map_err(|e| e.to_string())?;
            masks.push(
                std::fs::read(dir.path().join(format!("{}.mask.png", s.source_id)))
                    .map_err(|e| e.to_string())?,
            );
        }
        let seeds = (0..2)
            .map(|seed| {
                let inf = InferenceConfig {
                    seed,
                    ..Default::default()
                };
                evaluate(&out.embeddings, &test, &bb, &inf, Accumulation::Dataset)
            })
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| e.to_string())?;
        let report = EvalReport::from_seeds(
            "repro",
            train.class_names.clone(),
            Accumulation::Dataset,
            seeds,
        )
        .map_err(|e| e.to_string())?;
        Ok((ckpt, masks, serde_json::to_string(&report).unwrap()))
    };
    let first = run()?;
    let second = run()?;
    ensure(first.0 == second.0, "checkpoints differ")?;
    ensure(first.1 == second.1, "masks differ")?;
    ensure(first.2 == second.2, "reports differ")?;
    Ok("checkpoint, 2 masks and report bit-identical".into())
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        (
            1,
            "attention normalization",
            Duration::from_secs(30),
            attention_normalization,
        ),
        (
            2,
            "WAS mass conservation",
            Duration::from_secs(10),
            was_mass_conservation,
        ),
        (
            3,
            "oracle equivalence",
            Duration::from_secs(60),
            oracle_equivalence,
        ),
        (
            4,
            "gradient check",
            Duration::from_secs(120),
            gradient_check,
        ),
        (
            5,
            "end-to-end toy overfit",
            Duration::from_secs(300),
            toy_overfit,
        ),
        (6, "frozen-state guarantees", Duration::MAX, frozen_state),
        (
            7,
            "data-prep fixtures",
            Duration::from_secs(10),
            data_prep_fixtures,
        ),
        (8, "reproducibility", Duration::MAX, reproducibility),
    ];
    let mut failures = 0;
    for (id, name, limit, check) in criteria {
        let start = Instant::now();
        let result = check();
        let elapsed = start.elapsed();
        let (ok, detail) = match result {
            Ok(d) if elapsed <= limit => (true, d),
            Ok(d) => (false, format!("{d}; exceeded {limit:?}")),
            Err(d) => (false, d),
        };
        failures += usize::from(!ok);
        println!(
            "{} criterion {id} ({name}): {detail} [{:.1} s]",
            if ok { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        );
    }
    println!("SKIP criterion 9 (pretrained-weight benchmark): needs Stable Diffusion 2.1 weights and a GPU");
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} criteria failed");
        ExitCode::FAILURE
    }
}
