//! The five CLI verbs: train, eval, bench, sweep, export-configs.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use detrs::ndarray::Array4;

use detrs::detector::{evaluate_dataset, evaluate_dataset_fast, Detector};
use detrs::postprocess::bench::{
    benchmark, postprocess_share, report_csv_row, BenchSpec, Device, LatencyReport, Precision,
    REPORT_CSV_HEADER,
};
use detrs::postprocess::pareto::{pareto_frontier, write_reports, ParetoPoint};
use detrs::scaling::sweep_grid;
use detrs::schedule::{load_checkpoint, train, TrainOptions, TrainRecipe, TrainState};
use detrs::tensor::{InferCtx, ParamStore};

use crate::config::{RunConfig, SweepSection};

pub fn cmd_train(
    config_path: &Path,
    resume: Option<&Path>,
    max_steps: Option<u64>,
) -> anyhow::Result<()> {
    let cfg = RunConfig::load(config_path)?;
    let dataset = cfg.build_dataset()?;
    let det_cfg = cfg.detector_config()?;
    let recipe = cfg.recipe()?;

    let mut store = ParamStore::new();
    let detector = Detector::new(&mut store, cfg.seed, det_cfg)?;
    let mut state = TrainState {
        store,
        step: 0,
        epoch: 0,
        seed: cfg.seed,
    };
    if let Some(dir) = resume {
        let (loaded, _recipe) = load_checkpoint(dir)?;
        state.store.load_values_from(&loaded.store)?;
        state.step = loaded.step;
        state.epoch = loaded.epoch;
        state.seed = loaded.seed;
        eprintln!(
            "resumed from {} at step {} epoch {}",
            dir.display(),
            state.step,
            state.epoch
        );
    }

    fs::create_dir_all(&cfg.output_dir)?;
    let metrics_path = cfg.output_dir.join("metrics.jsonl");
    let mut metrics = std::io::BufWriter::new(fs::File::create(&metrics_path)?);
    let options = TrainOptions {
        checkpoint_dir: Some(cfg.output_dir.join("checkpoints")),
        max_steps,
    };
    let norm = cfg.normalize();
    let summary = train(
        &detector,
        &mut state,
        &recipe,
        dataset.as_ref(),
        &norm,
        &mut metrics,
        &options,
    )?;
    metrics.flush()?;
    println!(
        "{}",
        serde_json::json!({
            "steps_run": summary.steps_run,
            "initial_loss": summary.initial_loss,
            "final_loss": summary.final_loss,
            "metrics": metrics_path,
            "checkpoints": cfg.output_dir.join("checkpoints"),
        })
    );
    Ok(())
}

pub fn cmd_eval(config_path: &Path, checkpoint: &Path) -> anyhow::Result<()> {
    let cfg = RunConfig::load(config_path)?;
    let dataset = cfg.build_dataset()?;
    let det_cfg = cfg.detector_config()?;
    let mut store = ParamStore::new();
    let detector = Detector::new(&mut store, cfg.seed, det_cfg)?;
    let (loaded, _) = load_checkpoint(checkpoint)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    store
        .load_values_from(&loaded.store)
        .context("checkpoint does not match the configured model (check num_classes and widths)")?;

    let norm = cfg.normalize();
    let out = evaluate_dataset(&detector, &mut store, dataset.as_ref(), &norm)?;
    let eval_dir = cfg.output_dir.join("eval");
    fs::create_dir_all(&eval_dir)?;
    let metrics = serde_json::json!({
        "ap": out.ap.ap,
        "ap_small": out.ap.ap_small,
        "ap_medium": out.ap.ap_medium,
        "ap_large": out.ap.ap_large,
        "images": out.detections.len(),
    });
    fs::write(eval_dir.join("metrics.json"), serde_json::to_string_pretty(&metrics)?)?;
    fs::write(
        eval_dir.join("detections.json"),
        serde_json::to_string_pretty(&out.detections)?,
    )?;
    println!("{metrics}");
    Ok(())
}

struct BenchCell {
    report: LatencyReport,
}

fn run_bench_cell(
    detector: &Detector,
    store: &ParamStore,
    config_id: &str,
    resolution: usize,
    depth: usize,
    precision: Precision,
    include_postprocess: bool,
    spec: &BenchSpec,
    seed: u64,
) -> anyhow::Result<BenchCell> {
    let device = Device::host();
    let input64 = detrs::postprocess::bench::random_input(resolution, seed);
    let prepared: std::cell::RefCell<Option<(InferCtx, Array4<f32>)>> = std::cell::RefCell::new(None);
    let report = benchmark(
        config_id,
        resolution,
        depth,
        precision,
        include_postprocess,
        &device,
        spec,
        &mut || {
            // weight + input cast is the transfer-equivalent step
            let c = InferCtx::new(store, precision == Precision::Half);
            let x = c.cast_input(&input64);
            *prepared.borrow_mut() = Some((c, x));
            Ok(())
        },
        &mut || {
            let guard = prepared.borrow();
            let (c, x) = guard.as_ref().expect("prepared");
            if include_postprocess {
                let _ = detector.infer_detect(c, x)?;
            } else {
                detector.infer_forward_only(c, x)?;
            }
            Ok(())
        },
    )?;
    Ok(BenchCell { report })
}

pub fn cmd_bench(config_path: &Path, checkpoint: Option<&Path>) -> anyhow::Result<()> {
    let cfg = RunConfig::load(config_path)?;
    let det_cfg = cfg.detector_config()?;
    let sc = cfg.scale_config()?;
    let mut store = ParamStore::new();
    let detector = Detector::new(&mut store, cfg.seed, det_cfg)?;
    if let Some(ck) = checkpoint {
        let (loaded, _) = load_checkpoint(ck)?;
        store.load_values_from(&loaded.store)?;
    }
    let spec = cfg.bench_spec();
    let config_id = sc.id();

    let mut reports = Vec::new();
    for precision in [Precision::Single, Precision::Half] {
        for pp in [false, true] {
            eprintln!("benchmarking {config_id} precision={precision} postprocess={pp} ...");
            let cell = run_bench_cell(
                &detector,
                &store,
                &config_id,
                sc.resolution,
                sc.backbone_depth,
                precision,
                pp,
                &spec,
                cfg.seed,
            )?;
            reports.push(cell.report);
        }
    }
    // reports order: single/no-pp, single/pp, half/no-pp, half/pp
    let share_single = postprocess_share(&reports[1], &reports[0]);
    let share_half = postprocess_share(&reports[3], &reports[2]);
    let speedup = reports[1].median_ms / reports[3].median_ms;

    fs::create_dir_all(&cfg.output_dir)?;
    let mut csv = String::from(REPORT_CSV_HEADER);
    csv.push('\n');
    for r in &reports {
        csv.push_str(&report_csv_row(r, None));
        csv.push('\n');
    }
    fs::write(cfg.output_dir.join("bench.csv"), &csv)?;
    let summary = serde_json::json!({
        "config_id": config_id,
        "environment": reports[0].environment,
        "reports": reports,
        "postprocess_share_pct": { "single": share_single, "half": share_half },
        // hardware-dependent observation, reported for context only
        "half_vs_single_speedup": speedup,
    });
    fs::write(
        cfg.output_dir.join("bench.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    println!(
        "{}",
        serde_json::json!({
            "config_id": config_id,
            "median_ms": {
                "single": reports[0].median_ms,
                "single_with_postprocess": reports[1].median_ms,
                "half": reports[2].median_ms,
                "half_with_postprocess": reports[3].median_ms,
            },
            "postprocess_share_pct": { "single": share_single, "half": share_half },
            "half_vs_single_speedup": speedup,
            "outputs": cfg.output_dir.join("bench.csv"),
        })
    );
    Ok(())
}

pub fn cmd_sweep(config_path: &Path) -> anyhow::Result<()> {
    let cfg = RunConfig::load(config_path)?;
    let Some(sweep) = cfg.sweep.clone() else {
        anyhow::bail!(detrs::DetError::config(
            "sweep",
            "this config has no [sweep] section"
        ));
    };
    match sweep {
        SweepSection::Bench {
            depths,
            resolutions,
        } => sweep_bench(&cfg, &depths, &resolutions),
        SweepSection::Train {
            jitter_ranges,
            epochs_axis,
            max_steps,
        } => sweep_train(&cfg, &jitter_ranges, &epochs_axis, max_steps),
    }
}

fn sweep_bench(cfg: &RunConfig, depths: &[usize], resolutions: &[usize]) -> anyhow::Result<()> {
    let grid = sweep_grid(depths, resolutions)?;
    let sweep_dir = cfg.output_dir.join("sweep");
    fs::create_dir_all(&sweep_dir)?;
    let dataset = cfg.build_dataset()?;
    let norm = cfg.normalize();
    let spec = cfg.bench_spec();
    let mut failures: Vec<serde_json::Value> = Vec::new();
    let mut points: Vec<ParetoPoint> = Vec::new();

    for row in grid {
        let mut sc = row;
        sc.family = cfg.model.family;
        let id = sc.id();
        let cell_path = sweep_dir.join(format!("{id}.json"));
        if cell_path.exists() {
            eprintln!("skipping completed {id}");
            if let Ok(prev) = serde_json::from_str::<serde_json::Value>(&fs::read_to_string(&cell_path)?) {
                if let (Some(l), Some(q)) = (prev["median_ms"].as_f64(), prev["ap"].as_f64()) {
                    points.push(ParetoPoint::new(id.clone(), l, q));
                }
            }
            continue;
        }
        let result = (|| -> anyhow::Result<serde_json::Value> {
            let mut det_cfg = cfg.detector_config()?;
            det_cfg.resolution = sc.resolution;
            det_cfg.backbone.depth = detrs::backbone::Depth::from_layers(sc.backbone_depth)?;
            det_cfg.validate()?;
            let mut store = ParamStore::new();
            let detector = Detector::new(&mut store, cfg.seed, det_cfg)?;
            let without = run_bench_cell(
                &detector, &store, &id, sc.resolution, sc.backbone_depth,
                Precision::Single, false, &spec, cfg.seed,
            )?;
            let with = run_bench_cell(
                &detector, &store, &id, sc.resolution, sc.backbone_depth,
                Precision::Single, true, &spec, cfg.seed,
            )?;
            let ctx = InferCtx::new(&store, false);
            let eval = evaluate_dataset_fast(&detector, &ctx, dataset.as_ref(), &norm)?;
            let ap = eval.ap.ap.unwrap_or(0.0);
            Ok(serde_json::json!({
                "config_id": id,
                "resolution": sc.resolution,
                "depth": sc.backbone_depth,
                "median_ms": with.report.median_ms,
                "median_ms_model_only": without.report.median_ms,
                "postprocess_share_pct": postprocess_share(&with.report, &without.report),
                "ap": ap,
                "reports": [without.report, with.report],
            }))
        })();
        match result {
            Ok(cell) => {
                points.push(ParetoPoint::new(
                    id.clone(),
                    cell["median_ms"].as_f64().unwrap(),
                    cell["ap"].as_f64().unwrap(),
                ));
                fs::write(&cell_path, serde_json::to_string_pretty(&cell)?)?;
                eprintln!("finished {id}");
            }
            Err(e) => {
                eprintln!("config {id} failed: {e}");
                failures.push(serde_json::json!({ "config_id": id, "error": e.to_string() }));
            }
        }
    }
    if !failures.is_empty() {
        fs::write(
            sweep_dir.join("failures.json"),
            serde_json::to_string_pretty(&failures)?,
        )?;
    }
    if points.is_empty() {
        anyhow::bail!("every sweep configuration failed");
    }
    let frontier = pareto_frontier(&mut points);
    write_reports(
        &points,
        &sweep_dir.join("pareto.csv"),
        &sweep_dir.join("pareto.json"),
    )?;
    println!(
        "{}",
        serde_json::json!({
            "configs": points.len(),
            "failures": failures.len(),
            "frontier": frontier.iter().map(|&i| points[i].config_id.clone()).collect::<Vec<_>>(),
            "outputs": sweep_dir,
        })
    );
    Ok(())
}

fn sweep_train(
    cfg: &RunConfig,
    jitter_ranges: &[[f64; 2]],
    epochs_axis: &[usize],
    max_steps: Option<u64>,
) -> anyhow::Result<()> {
    let sweep_dir = cfg.output_dir.join("sweep");
    fs::create_dir_all(&sweep_dir)?;
    let dataset = cfg.build_dataset()?;
    let norm = cfg.normalize();
    let mut matrix: Vec<serde_json::Value> = Vec::new();
    for jr in jitter_ranges {
        for &epochs in epochs_axis {
            let id = format!("jitter{}-{}-ep{epochs}", jr[0], jr[1]);
            let cell_path = sweep_dir.join(format!("{id}.json"));
            if cell_path.exists() {
                eprintln!("skipping completed {id}");
                matrix.push(serde_json::from_str(&fs::read_to_string(&cell_path)?)?);
                continue;
            }
            let det_cfg = cfg.detector_config()?;
            let mut recipe: TrainRecipe = cfg.recipe()?;
            recipe.epochs = epochs;
            recipe.jitter.scale_range = (jr[0], jr[1]);
            let mut store = ParamStore::new();
            let detector = Detector::new(&mut store, cfg.seed, det_cfg)?;
            let mut state = TrainState {
                store,
                step: 0,
                epoch: 0,
                seed: cfg.seed,
            };
            let mut sink = std::io::sink();
            let summary = train(
                &detector,
                &mut state,
                &recipe,
                dataset.as_ref(),
                &norm,
                &mut sink,
                &TrainOptions {
                    checkpoint_dir: None,
                    max_steps,
                },
            )?;
            let eval = evaluate_dataset(&detector, &mut state.store, dataset.as_ref(), &norm)?;
            let cell = serde_json::json!({
                "config_id": id,
                "jitter": jr,
                "epochs": epochs,
                "steps_run": summary.steps_run,
                "final_loss": summary.final_loss,
                "ap": eval.ap.ap,
            });
            fs::write(&cell_path, serde_json::to_string_pretty(&cell)?)?;
            eprintln!("finished {id}");
            matrix.push(cell);
        }
    }
    fs::write(
        sweep_dir.join("matrix.json"),
        serde_json::to_string_pretty(&matrix)?,
    )?;
    println!(
        "{}",
        serde_json::json!({ "cells": matrix.len(), "outputs": sweep_dir.join("matrix.json") })
    );
    Ok(())
}

pub fn cmd_export_configs(out_dir: &Path) -> anyhow::Result<()> {
    use detrs::scaling::{all_rcnn_rs, all_retinanet_rs};
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for row in all_retinanet_rs().into_iter().chain(all_rcnn_rs()) {
        let cfg = template_config(&row);
        let path = out_dir.join(format!("{}.toml", row.id()));
        fs::write(&path, toml::to_string_pretty(&cfg)?)?;
        written.push(path);
    }
    println!(
        "{}",
        serde_json::json!({ "configs": written.len(), "dir": out_dir })
    );
    Ok(())
}

fn template_config(row: &detrs::scaling::ScaleConfig) -> RunConfig {
    use crate::config::*;
    RunConfig {
        seed: 1,
        output_dir: PathBuf::from(format!("runs/{}", row.id())),
        model: ModelSection {
            family: row.family,
            scale: row.scale_label,
            resolution: None,
            backbone_depth: None,
            num_classes: 2,
            width_mult: 1.0,
            head_variant: detrs::detector::HeadVariant::Regular,
            activation: detrs::layers::Activation::Silu,
            stem: detrs::backbone::StemKind::Deep,
            use_se: true,
            se_ratio: 0.25,
            with_masks: false,
            cascade_class_ensemble: false,
            fpn_norm: true,
        },
        anchors: Default::default(),
        focal: Default::default(),
        train: Default::default(),
        dataset: DatasetSection::Synth { count: 8 },
        assemble: Default::default(),
        bench: Default::default(),
        sweep: None,
    }
}
