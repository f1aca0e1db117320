use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use partseg_core::backbone::{load_backbone, Backbone};
use partseg_core::config::RunConfig;
use partseg_core::data::{
    image_stem, list_images, load_celeba_raw, load_pascal_raw, prepare_celeba, prepare_pascal_part,
    read_sample_dir, sample_split, two_region_sample, write_sample_dir, AnnotatedSample,
    DatasetManifest, OverlapDenominator, PartMapping, PascalCategory, PascalPrepConfig, SplitCount,
};
use partseg_core::eval::{
    emit_table, evaluate as evaluate_seed, EvalReport, SeedResult, TableFormat,
};
use partseg_core::imageops::load_image;
use partseg_core::inference::{render_overlay, segment_auto, write_segmentation, DEFAULT_PALETTE};
use partseg_core::optimizer::{
    check_compatible, optimize as run_optimization, read_checkpoint, save_embeddings,
};
use partseg_core::Error;
use serde_json::json;

use crate::manifest::{dir_digests, write_json, write_text};
use crate::DatasetKind;

const OVERLAY_ALPHA: f32 = 0.5;

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

/// The configuration stored in a checkpoint, unless `path` overrides it.
fn checkpoint_config(path: Option<&Path>, stored: &serde_json::Value) -> Result<RunConfig> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None if stored.is_null() => Ok(RunConfig::default()),
        None => {
            let config: RunConfig = serde_json::from_value(stored.clone())
                .map_err(|e| Error::Config(format!("checkpoint configuration: {e}")))?;
            config.validate()?;
            Ok(config)
        }
    }
}

fn class_pixel_counts(samples: &[AnnotatedSample], k: usize) -> Vec<u64> {
    let mut counts = vec![0u64; k];
    for s in samples {
        for &l in &s.mask {
            counts[l as usize] += 1;
        }
    }
    counts
}

pub fn prepare(
    dataset: DatasetKind,
    raw: &Path,
    out: &Path,
    mapping: Option<&Path>,
    union_overlap: bool,
    shots: Option<usize>,
    seed: u64,
) -> Result<()> {
    if !raw.is_dir() {
        return Err(
            Error::Ingestion(format!("raw data directory {} not found", raw.display())).into(),
        );
    }
    let (category, class_names, samples, filter_stats, prep_config) = match dataset {
        DatasetKind::PascalCar | DatasetKind::PascalHorse => {
            let category = if dataset == DatasetKind::PascalCar {
                PascalCategory::Car
            } else {
                PascalCategory::Horse
            };
            let mut config = PascalPrepConfig::new(category);
            if let Some(p) = mapping {
                config.mapping = PartMapping::load(p)?;
            }
            if union_overlap {
                config.denominator = OverlapDenominator::Union;
            }
            let images = load_pascal_raw(raw)?;
            let (samples, stats) = prepare_pascal_part(&images, &config)?;
            let prep = serde_json::to_value(&config)?;
            (
                category.name().to_string(),
                category.class_names(),
                samples,
                Some(stats),
                prep,
            )
        }
        DatasetKind::Celeba => {
            if mapping.is_some() || union_overlap {
                bail!(Error::Config(
                    "--mapping and --union-overlap apply to PASCAL-Part only".into()
                ));
            }
            let images = load_celeba_raw(raw)?;
            let samples = prepare_celeba(&images)?;
            let names = partseg_core::data::class_names(&partseg_core::data::FACE_CLASSES);
            (
                "face".to_string(),
                names,
                samples,
                None,
                json!({"size": 512}),
            )
        }
    };
    let mut splits = Vec::new();
    match shots {
        Some(n) => {
            let split = sample_split(&samples, n, seed)?;
            for (name, part) in [
                ("train", &split.train),
                ("val", &split.validation),
                ("test", &split.test),
            ] {
                write_sample_dir(&out.join(name), part, &class_names)?;
                splits.push(SplitCount {
                    split: name.into(),
                    count: part.len(),
                });
            }
        }
        None => {
            write_sample_dir(&out.join("all"), &samples, &class_names)?;
            splits.push(SplitCount {
                split: "all".into(),
                count: samples.len(),
            });
        }
    }
    let manifest = DatasetManifest {
        category,
        class_pixel_counts: class_pixel_counts(&samples, class_names.len()),
        class_names,
        splits,
        prep_config: json!({"dataset": format!("{dataset:?}"), "shots": shots, "seed": seed, "filter": prep_config}),
        filter_stats,
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    if let Some(s) = &manifest.filter_stats {
        println!(
            "{} candidates, {} removed by overlap, {} removed by size, {} kept",
            s.candidates, s.removed_overlap, s.removed_size, s.kept
        );
    }
    println!("wrote {} samples to {}", samples.len(), out.display());
    Ok(())
}

pub fn make_synthetic(out: &Path, count: usize, size: usize, seed: u64) -> Result<()> {
    if count == 0 || size < 8 {
        bail!(Error::Config(
            "--count must be positive and --size at least 8".into()
        ));
    }
    let samples: Vec<AnnotatedSample> = (0..count as u64)
        .map(|i| two_region_sample(size, seed + i))
        .collect();
    write_sample_dir(out, &samples, &samples[0].class_names)?;
    println!("wrote {count} synthetic samples to {}", out.display());
    Ok(())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().unwrap_or_default().to_string_lossy();
    path.with_file_name(format!("{stem}.{suffix}"))
}

pub fn optimize(
    config: Option<&Path>,
    train: &Path,
    val: Option<&Path>,
    out: &Path,
    epochs: Option<usize>,
    seed: Option<u64>,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(e) = epochs {
        cfg.optimization.epochs = e;
    }
    if let Some(s) = seed {
        cfg.optimization.seed = s;
    }
    cfg.validate()?;
    let backbone = load_backbone(&cfg.backbone)?;
    let train_samples = read_sample_dir(train)?;
    if train_samples.is_empty() {
        bail!(Error::Config(format!(
            "{} holds no training samples",
            train.display()
        )));
    }
    let val_samples = match val {
        Some(v) => read_sample_dir(v)?,
        None => Vec::new(),
    };
    let outcome = run_optimization(
        &train_samples,
        &val_samples,
        backbone.as_ref(),
        &cfg.optimization,
    )?;
    let hash = save_embeddings(
        &outcome.embeddings,
        out,
        backbone.descriptor(),
        &cfg.to_json(),
    )?;

    let mut csv = String::from("epoch,step,sample,timestep,l_ce,l_mse,l_ldm,total\n");
    for s in &outcome.steps {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            s.epoch,
            s.step,
            s.sample,
            s.timestep,
            s.loss.l_ce,
            s.loss.l_mse,
            s.loss.l_ldm,
            s.loss.total
        ));
    }
    write_text(&sibling(out, "loss.csv"), &csv)?;
    let manifest = json!({
        "command": "optimize",
        "config": cfg.to_json(),
        "backbone": backbone.descriptor().identity(),
        "train": train.display().to_string(),
        "train_digests": dir_digests(train)?,
        "validation": val.map(|v| v.display().to_string()),
        "validation_digests": val.map(dir_digests).transpose()?,
        "checkpoint": out.display().to_string(),
        "checkpoint_sha256": hash,
        "selected_epoch": outcome.selected_epoch,
        "epochs": outcome.epochs,
        "final_loss": outcome.steps.last().map(|s| s.loss),
    });
    write_json(&sibling(out, "manifest.json"), &manifest)?;
    println!(
        "optimized {} classes over {} epochs; checkpoint {}",
        outcome.embeddings.num_classes(),
        cfg.optimization.epochs,
        out.display()
    );
    Ok(())
}

struct LoadedCheckpoint {
    emb: partseg_core::backbone::PromptEmbeddings,
    hash: String,
    config: RunConfig,
    backbone: Box<dyn Backbone>,
}

fn open_checkpoint(ckpt: &Path, config: Option<&Path>) -> Result<LoadedCheckpoint> {
    let (emb, meta, hash) = read_checkpoint(ckpt)?;
    let config = checkpoint_config(config, &meta.config)?;
    let backbone = load_backbone(&config.backbone)?;
    check_compatible(&meta, backbone.descriptor())?;
    Ok(LoadedCheckpoint {
        emb,
        hash,
        config,
        backbone,
    })
}

pub fn segment(
    ckpt: &Path,
    images: &Path,
    out: &Path,
    overlay: bool,
    config: Option<&Path>,
    seed: Option<u64>,
) -> Result<()> {
    let mut loaded = open_checkpoint(ckpt, config)?;
    if let Some(s) = seed {
        loaded.config.inference.seed = s;
    }
    let files = list_images(images)?;
    if files.is_empty() {
        bail!(Error::Ingestion(format!(
            "no images in {}",
            images.display()
        )));
    }
    let mut outputs = Vec::new();
    for path in &files {
        let image = load_image(path)?;
        let mut result = segment_auto(
            &image,
            &loaded.emb,
            loaded.backbone.as_ref(),
            &loaded.config.inference,
        )
        .with_context(|| format!("segmenting {}", path.display()))?;
        result.provenance.checkpoint_hash = Some(loaded.hash.clone());
        let stem = image_stem(path);
        let rendered = if overlay {
            Some(render_overlay(
                &image,
                &result.labels,
                &DEFAULT_PALETTE,
                OVERLAY_ALPHA,
                true,
            )?)
        } else {
            None
        };
        write_segmentation(
            out,
            &stem,
            &result,
            loaded.emb.class_names(),
            rendered.as_ref(),
        )?;
        outputs.push(stem);
    }
    let manifest = json!({
        "command": "segment",
        "checkpoint": ckpt.display().to_string(),
        "checkpoint_sha256": loaded.hash,
        "config": loaded.config.to_json(),
        "images": images.display().to_string(),
        "image_digests": dir_digests(images)?,
        "outputs": outputs,
    });
    write_json(&out.join("manifest.json"), &manifest)?;
    println!("segmented {} images into {}", files.len(), out.display());
    Ok(())
}

fn write_reports(dir: &Path, reports: &[EvalReport], stem: &str) -> Result<()> {
    write_json(&dir.join(format!("{stem}.json")), &reports)?;
    write_text(
        &dir.join(format!("{stem}.csv")),
        &emit_table(reports, TableFormat::Csv)?,
    )?;
    write_text(
        &dir.join(format!("{stem}.md")),
        &emit_table(reports, TableFormat::Markdown)?,
    )?;
    Ok(())
}

pub fn evaluate(
    ckpt: &Path,
    test: &Path,
    seeds: &[u64],
    out: &Path,
    config: Option<&Path>,
    method: &str,
) -> Result<()> {
    let loaded = open_checkpoint(ckpt, config)?;
    let samples = read_sample_dir(test)?;
    if samples.is_empty() {
        bail!(Error::Eval(format!(
            "{} holds no test samples",
            test.display()
        )));
    }
    if seeds.is_empty() {
        bail!(Error::Config("at least one seed is required".into()));
    }
    let accumulation = loaded.config.data.accumulation;
    let results = seeds
        .iter()
        .map(|&seed| {
            let mut inference = loaded.config.inference.clone();
            inference.seed = seed;
            evaluate_seed(
                &loaded.emb,
                &samples,
                loaded.backbone.as_ref(),
                &inference,
                accumulation,
            )
        })
        .collect::<partseg_core::Result<Vec<SeedResult>>>()?;
    let mut report = EvalReport::from_seeds(
        method,
        loaded.emb.class_names().to_vec(),
        accumulation,
        results,
    )?;
    report.manifest = json!({
        "command": "evaluate",
        "checkpoint": ckpt.display().to_string(),
        "checkpoint_sha256": loaded.hash,
        "config": loaded.config.to_json(),
        "test": test.display().to_string(),
        "test_digests": dir_digests(test)?,
        "seeds": seeds,
    });
    write_reports(
        &out.join("reports"),
        std::slice::from_ref(&report),
        "report",
    )?;
    match report.average() {
        Some(avg) => println!("{method}: average mIoU {:.1}", 100.0 * avg),
        None => println!("{method}: no classes present"),
    }
    Ok(())
}

/// Flattens nested grid tables into dotted keys with their value lists.
fn parse_grid(text: &str) -> Result<Vec<(String, Vec<toml::Value>)>> {
    let table: toml::Table =
        toml::from_str(text).map_err(|e| Error::Config(format!("grid: {e}")))?;
    fn walk(
        prefix: &str,
        table: &toml::Table,
        out: &mut BTreeMap<String, Vec<toml::Value>>,
    ) -> Result<()> {
        for (k, v) in table {
            let key = if prefix.is_empty() {
                k.clone()
            } else {
                format!("{prefix}.{k}")
            };
            match v {
                toml::Value::Table(t) => walk(&key, t, out)?,
                toml::Value::Array(values) if !values.is_empty() => {
                    out.insert(key, values.clone());
                }
                _ => bail!(Error::Config(format!(
                    "grid entry '{key}' must be a non-empty list"
                ))),
            }
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk("", &table, &mut out)?;
    Ok(out.into_iter().collect())
}

fn grid_points(axes: &[(String, Vec<toml::Value>)]) -> Vec<Vec<(String, toml::Value)>> {
    let mut points = vec![Vec::new()];
    for (key, values) in axes {
        points = points
            .into_iter()
            .flat_map(|p| {
                values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push((key.clone(), v.clone()));
                    q
                })
            })
            .collect();
    }
    points
}

fn point_label(point: &[(String, toml::Value)]) -> String {
    if point.is_empty() {
        return "baseline".into();
    }
    point
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn ablate(
    config: Option<&Path>,
    grid: &Path,
    out: &Path,
    train: Option<&Path>,
    test: Option<&Path>,
) -> Result<()> {
    let base = load_config(config)?;
    let text =
        fs::read_to_string(grid).map_err(|e| Error::Config(format!("{}: {e}", grid.display())))?;
    let axes = parse_grid(&text)?;
    let points = grid_points(&axes);
    let configs = points
        .iter()
        .map(|point| {
            point
                .iter()
                .try_fold(base.clone(), |cfg, (k, v)| cfg.with_override(k, v))
        })
        .collect::<partseg_core::Result<Vec<_>>>()?;

    let train_dir = train
        .map(Path::to_path_buf)
        .or_else(|| base.data.train.clone())
        .ok_or_else(|| {
            Error::Config("a training directory is required (--train or data.train)".into())
        })?;
    let test_dir = test
        .map(Path::to_path_buf)
        .or_else(|| base.data.test.clone())
        .unwrap_or_else(|| train_dir.clone());
    let train_samples = read_sample_dir(&train_dir)?;
    let test_samples = read_sample_dir(&test_dir)?;
    let val_samples = match &base.data.validation {
        Some(v) => read_sample_dir(v)?,
        None => Vec::new(),
    };

    let mut reports = Vec::new();
    for (idx, (point, cfg)) in points.iter().zip(&configs).enumerate() {
        let run_dir = out.join(format!("run{idx:03}"));
        let backbone = load_backbone(&cfg.backbone)?;
        let mut results = Vec::new();
        for &seed in &cfg.seeds {
            let mut opt = cfg.optimization.clone();
            opt.seed = seed;
            let outcome = run_optimization(&train_samples, &val_samples, backbone.as_ref(), &opt)?;
            let mut run_cfg = cfg.clone();
            run_cfg.optimization.seed = seed;
            save_embeddings(
                &outcome.embeddings,
                &run_dir.join(format!("seed{seed}.ckpt")),
                backbone.descriptor(),
                &run_cfg.to_json(),
            )?;
            let mut r = evaluate_seed(
                &outcome.embeddings,
                &test_samples,
                backbone.as_ref(),
                &cfg.inference,
                cfg.data.accumulation,
            )?;
            r.seed = seed;
            results.push(r);
        }
        if results.is_empty() {
            bail!(Error::Config("config.seeds must not be empty".into()));
        }
        let class_names = train_samples[0].class_names.clone();
        let mut report = EvalReport::from_seeds(
            point_label(point),
            class_names,
            cfg.data.accumulation,
            results,
        )?;
        report.manifest = json!({"config": cfg.to_json(), "overrides": point_label(point)});
        write_text(&run_dir.join("config.toml"), &cfg.to_toml())?;
        write_json(&run_dir.join("report.json"), &report)?;
        println!(
            "{}: average mIoU {:.1}",
            report.method,
            100.0 * report.average().unwrap_or(0.0)
        );
        reports.push(report);
    }
    write_reports(out, &reports, "comparison")?;
    write_json(
        &out.join("manifest.json"),
        &json!({
            "command": "ablate",
            "base_config": base.to_json(),
            "grid": axes.iter().map(|(k, v)| (k.clone(), v.iter().map(|x| x.to_string()).collect::<Vec<_>>())).collect::<Vec<_>>(),
            "train_digests": dir_digests(&train_dir)?,
            "test_digests": dir_digests(&test_dir)?,
        }),
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_is_cartesian_in_key_order() {
        let axes = parse_grid("[inference]\nuse_was = [true, false]\nt_test = [5, 20]\n").unwrap();
        assert_eq!(axes[0].0, "inference.t_test");
        let points = grid_points(&axes);
        assert_eq!(points.len(), 4);
        assert_eq!(
            point_label(&points[1]),
            "inference.t_test=5 inference.use_was=false"
        );
        assert_eq!(grid_points(&[]).len(), 1);
        assert_eq!(point_label(&[]), "baseline");
    }

    #[test]
    fn malformed_grids() {
        assert!(parse_grid("x = 1").is_err());
        assert!(parse_grid("x = []").is_err());
        assert!(parse_grid("[[").is_err());
    }
}
