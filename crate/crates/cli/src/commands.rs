//! Subcommand implementations.

use std::path::Path;

use serde_json::json;

use thermodepth::config::SimConfig;
use thermodepth::eval::{self, AblationConfig};
use thermodepth::heatsim::{self, DatasetOptions};
use thermodepth::manifest::{
    curve_from_csv, curve_to_csv, DatasetManifest, ImageFileEntry, PreparedManifest,
    MANIFEST_FORMAT_VERSION,
};
use thermodepth::model::{Checkpoint, ModelConfig};
use thermodepth::pgm::{self, PgmImage};
use thermodepth::reconstruct::{self, ModelInput, PrepareOptions, StripeImage};
use thermodepth::training::{self, SplitIndices, TrainConfig, TrainSample};

use crate::errors::CliError;
use crate::output::{read_bytes, read_to_string, OutputDir};
use crate::TrainFlags;

fn require_out(out: Option<&Path>) -> Result<&Path, CliError> {
    out.ok_or_else(|| CliError::Config("--out is required".to_string()))
}

fn verbose() -> bool {
    std::env::var("THERMODEPTH_VERBOSE").map(|v| !v.is_empty()).unwrap_or(false)
}

fn load_sim_config(config: Option<&Path>) -> Result<SimConfig, CliError> {
    match config {
        None => Ok(SimConfig::default()),
        Some(path) => {
            let text = read_to_string(path)?;
            SimConfig::from_json(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
        }
    }
}

fn load_train_config(config: Option<&Path>) -> Result<TrainConfig, CliError> {
    match config {
        None => Ok(TrainConfig::default()),
        Some(path) => {
            let text = read_to_string(path)?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
        }
    }
}

pub fn simulate(
    config: Option<&Path>,
    out: Option<&Path>,
    seed: Option<u64>,
    pixels_per_depth: usize,
    flux_jitter: f64,
) -> Result<(), CliError> {
    let sim_config = load_sim_config(config)?;
    let (spec, exc, cam) = sim_config.resolve()?;
    let opts = DatasetOptions {
        pixels_per_depth,
        flux_jitter,
        master_seed: seed.unwrap_or(0),
        grid: None,
    };
    if verbose() {
        eprintln!(
            "simulating {} depths x {} pixels ({} frames each)",
            spec.defect_depths.len(),
            opts.pixels_per_depth,
            exc.frame_count()
        );
    }
    let dataset = heatsim::generate_dataset(&spec, &exc, &cam, &opts)?;

    let mut dir = OutputDir::create(require_out(out)?)?;
    let manifest = DatasetManifest::for_dataset(&dataset);
    for (entry, file) in dataset.entries.iter().zip(manifest.curves.iter()) {
        dir.write_text(&file.file, &curve_to_csv(&entry.curve))?;
    }
    dir.write_text("manifest.json", &serde_json::to_string_pretty(&manifest)?)?;

    println!(
        "{}",
        json!({
            "command": "simulate",
            "curves": dataset.entries.len(),
            "depths": spec.defect_depths.len(),
            "out": dir.path().display().to_string(),
        })
    );
    dir.finish(
        "simulate",
        Some(opts.master_seed),
        serde_json::to_value(&sim_config)?,
        config.iter().map(|p| p.display().to_string()).collect(),
    )
}

fn load_dataset_manifest(data: &Path) -> Result<DatasetManifest, CliError> {
    let path = data.join("manifest.json");
    let text = read_to_string(&path)?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn prepare(data: &Path, out: Option<&Path>, opts: &PrepareOptions) -> Result<(), CliError> {
    let manifest = load_dataset_manifest(data)?;
    let mut dir = OutputDir::create(require_out(out)?)?;

    let mut images = Vec::with_capacity(manifest.curves.len());
    for entry in &manifest.curves {
        let csv_path = data.join(&entry.file);
        let csv = read_to_string(&csv_path)?;
        let curve = curve_from_csv(&csv, manifest.excitation.frame_rate, entry.label_depth_m)?;
        let prepared = reconstruct::prepare(&curve, opts)
            .map_err(|e| CliError::Processing(format!("{}: {e}", entry.file)))?;
        let file = PreparedManifest::image_file_name(
            entry.label_depth_m.unwrap_or_default(),
            entry.pixel_index,
        );
        let image = PgmImage::new(
            prepared.image.side,
            prepared.image.side,
            prepared.image.to_u8(),
        );
        dir.write_bytes(&file, &pgm::encode_to_vec(&image))?;
        images.push(ImageFileEntry {
            file,
            label_depth_m: entry.label_depth_m,
            depth_index: entry.depth_index,
            pixel_index: entry.pixel_index,
        });
    }

    let prepared_manifest = PreparedManifest {
        format_version: MANIFEST_FORMAT_VERSION,
        source: data.display().to_string(),
        prepare: *opts,
        specimen: manifest.specimen.clone(),
        images,
    };
    dir.write_text(
        "manifest.json",
        &serde_json::to_string_pretty(&prepared_manifest)?,
    )?;

    println!(
        "{}",
        json!({
            "command": "prepare",
            "images": prepared_manifest.images.len(),
            "input_size": opts.input_size,
            "enhance": opts.enhance,
            "out": dir.path().display().to_string(),
        })
    );
    dir.finish(
        "prepare",
        None,
        serde_json::to_value(opts)?,
        vec![data.display().to_string()],
    )
}

fn load_prepared_manifest(data: &Path) -> Result<PreparedManifest, CliError> {
    let path = data.join("manifest.json");
    let text = read_to_string(&path)?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Load PGM stripe images back into normalized model inputs.
fn load_samples(data: &Path, manifest: &PreparedManifest) -> Result<Vec<TrainSample>, CliError> {
    let side = manifest.prepare.input_size;
    let mut samples = Vec::with_capacity(manifest.images.len());
    for entry in &manifest.images {
        let bytes = read_bytes(&data.join(&entry.file))?;
        let img = pgm::decode_bytes(&bytes)
            .map_err(|e| CliError::Processing(format!("{}: {e}", entry.file)))?;
        if img.width != side || img.height != side {
            return Err(CliError::Processing(format!(
                "{}: image is {}x{}, manifest says {side}",
                entry.file, img.width, img.height
            )));
        }
        let stripe = StripeImage {
            side,
            pixels: img.data.iter().map(|&b| b as f64).collect(),
            source_label: entry.label_depth_m,
        };
        let input: ModelInput = reconstruct::normalize(&stripe);
        if let Some(label) = entry.label_depth_m {
            // Sample labels are mm; the manifest stores meters.
            samples.push(TrainSample {
                input,
                label: label * 1000.0,
            });
        }
    }
    Ok(samples)
}

pub fn train(
    data: &Path,
    out: Option<&Path>,
    config: Option<&Path>,
    seed: Option<u64>,
    flags: &TrainFlags,
) -> Result<(), CliError> {
    let manifest = load_prepared_manifest(data)?;
    let samples = load_samples(data, &manifest)?;

    let mut train_cfg = load_train_config(config)?;
    flags.apply(&mut train_cfg)?;
    if let Some(s) = seed {
        train_cfg.seed = s;
    }
    let mut model_cfg = ModelConfig {
        input_size: manifest.prepare.input_size,
        ..ModelConfig::default()
    };
    if let Some(head) = flags.head_kind()? {
        model_cfg.head = head;
    }
    if let Some(p) = flags.dropout {
        model_cfg.dropout = p;
    }

    let outcome = training::train_observed(&model_cfg, &train_cfg, &samples, |r| {
        if verbose() {
            eprintln!(
                "epoch {:>4}: train {:.6} val {:.6} lr {:.2e}",
                r.epoch, r.train_loss, r.val_loss, r.lr
            );
        }
    })?;

    let mut dir = OutputDir::create(require_out(out)?)?;
    let best = Checkpoint::new(train_cfg.seed, outcome.best_params);
    let final_ckpt = Checkpoint::new(train_cfg.seed, outcome.final_params);
    dir.write_text("checkpoint_best.json", &serde_json::to_string(&best)?)?;
    dir.write_text("checkpoint_final.json", &serde_json::to_string(&final_ckpt)?)?;
    dir.write_text(
        "loss_history.csv",
        &training::loss_history_csv(&outcome.history),
    )?;
    dir.write_text("split.json", &serde_json::to_string_pretty(&outcome.split)?)?;
    dir.write_text("train_config.json", &serde_json::to_string_pretty(&train_cfg)?)?;

    println!(
        "{}",
        json!({
            "command": "train",
            "samples": samples.len(),
            "epochs": outcome.history.len(),
            "best_epoch": outcome.best_epoch,
            "best_val_loss": outcome.best_val_loss,
            "out": dir.path().display().to_string(),
        })
    );
    dir.finish(
        "train",
        Some(train_cfg.seed),
        serde_json::to_value(train_cfg)?,
        vec![data.display().to_string()],
    )
}

pub fn eval(
    checkpoint: &Path,
    data: &Path,
    split: Option<&Path>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let ckpt: Checkpoint = serde_json::from_str(&read_to_string(checkpoint)?)
        .map_err(|e| CliError::Config(format!("{}: {e}", checkpoint.display())))?;
    ckpt.validate()?;

    let manifest = load_prepared_manifest(data)?;
    let samples = load_samples(data, &manifest)?;

    let split_path = match split {
        Some(p) => p.to_path_buf(),
        None => checkpoint
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join("split.json"),
    };
    let split: SplitIndices = serde_json::from_str(&read_to_string(&split_path)?)
        .map_err(|e| CliError::Config(format!("{}: {e}", split_path.display())))?;
    if let Some(&bad) = split.test.iter().find(|&&i| i >= samples.len()) {
        return Err(CliError::Config(format!(
            "split index {bad} out of range for {} samples",
            samples.len()
        )));
    }

    let report = eval::evaluate_subset(
        &ckpt.params,
        &samples,
        &split.test,
        &manifest.specimen.defect_depths,
    )?;

    let mut dir = OutputDir::create(require_out(out)?)?;
    dir.write_text("report_overall.csv", &eval::overall_csv(&report))?;
    dir.write_text("report_per_depth.csv", &eval::per_depth_csv(&report))?;

    println!(
        "{}",
        json!({
            "command": "eval",
            "test_samples": split.test.len(),
            "rmse_mm": report.overall.rmse_mm,
            "mae_um": report.overall.mae_um,
            "mape_pct": report.overall.mape_pct,
            "r2": report.overall.r2,
            "out": dir.path().display().to_string(),
        })
    );
    dir.finish(
        "eval",
        Some(ckpt.seed),
        json!({"checkpoint": checkpoint.display().to_string()}),
        vec![data.display().to_string(), split_path.display().to_string()],
    )
}

pub fn ablate(
    data: &Path,
    out: Option<&Path>,
    config: Option<&Path>,
    seed: Option<u64>,
    prepare_opts: &PrepareOptions,
    train_flags: &TrainFlags,
) -> Result<(), CliError> {
    let manifest = load_dataset_manifest(data)?;
    let mut curves = Vec::with_capacity(manifest.curves.len());
    for entry in &manifest.curves {
        let csv = read_to_string(&data.join(&entry.file))?;
        let curve = curve_from_csv(&csv, manifest.excitation.frame_rate, entry.label_depth_m)?;
        curves.push(heatsim::DatasetEntry {
            curve,
            depth_index: entry.depth_index,
            pixel_index: entry.pixel_index,
            seed: entry.seed,
        });
    }
    let dataset = heatsim::Dataset {
        entries: curves,
        camera: manifest.camera,
        specimen: manifest.specimen.clone(),
        excitation: manifest.excitation,
        options: manifest.options,
    };

    let mut train_cfg = load_train_config(config)?;
    train_flags.apply(&mut train_cfg)?;
    if let Some(s) = seed {
        train_cfg.seed = s;
    }
    let mut model_cfg = ModelConfig {
        input_size: prepare_opts.input_size,
        ..ModelConfig::default()
    };
    if let Some(p) = train_flags.dropout {
        model_cfg.dropout = p;
    }

    let ablation_cfg = AblationConfig {
        prepare: *prepare_opts,
        model: model_cfg,
        train: train_cfg,
    };
    let grid = eval::run_ablation(&ablation_cfg, &dataset)?;

    let mut dir = OutputDir::create(require_out(out)?)?;
    dir.write_text("ablation.csv", &eval::ablation_csv(&grid))?;

    println!(
        "{}",
        json!({
            "command": "ablate",
            "arms": grid.arms.len(),
            "test_samples": grid.arms[0].test_indices.len(),
            "out": dir.path().display().to_string(),
        })
    );
    dir.finish(
        "ablate",
        Some(train_cfg.seed),
        serde_json::to_value(&ablation_cfg)?,
        vec![data.display().to_string()],
    )
}

/// Render a report CSV as aligned text, inferring the kind from the header.
pub fn report(input: &Path) -> Result<(), CliError> {
    let text = read_to_string(input)?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    let rows: Vec<&str> = lines.filter(|l| !l.trim().is_empty()).collect();

    let parse_f = |s: &str| -> Result<f64, CliError> {
        s.trim()
            .parse()
            .map_err(|e| CliError::Processing(format!("{}: bad number `{s}`: {e}", input.display())))
    };
    let parse_r2 = |s: &str| -> Result<Option<f64>, CliError> {
        if s.trim().is_empty() {
            Ok(None)
        } else {
            parse_f(s).map(Some)
        }
    };

    match header {
        "rmse_mm,mae_um,mape_pct,r2" => {
            let row = rows
                .first()
                .ok_or_else(|| CliError::Processing("empty report".to_string()))?;
            let cols: Vec<&str> = row.split(',').collect();
            let report = eval::EvalReport {
                overall: eval::OverallMetrics {
                    rmse_mm: parse_f(cols[0])?,
                    mae_um: parse_f(cols[1])?,
                    mape_pct: parse_f(cols[2])?,
                    r2: parse_r2(cols.get(3).copied().unwrap_or(""))?,
                },
                per_depth: vec![],
            };
            print!("{}", eval::render_report_text(&report));
        }
        "depth_mm,mae_um,mape_pct,mean_pred_mm,count" => {
            println!(
                "{:>9} {:>10} {:>9} {:>14} {:>6}",
                "depth(mm)", "MAE(um)", "MAPE(%)", "mean_pred(mm)", "count"
            );
            for row in rows {
                let c: Vec<&str> = row.split(',').collect();
                println!(
                    "{:>9.2} {:>10.2} {:>9.3} {:>14.4} {:>6}",
                    parse_f(c[0])?,
                    parse_f(c[1])?,
                    parse_f(c[2])?,
                    parse_f(c[3])?,
                    c[4].trim()
                );
            }
        }
        "arm,enhance,rrh,rmse,mae_um,mape_pct,r2" => {
            println!(
                "{:>3} {:>8} {:>5} {:>12} {:>9} {:>8} {:>8}",
                "arm", "enhance", "rrh", "RMSE(x10^-2)", "MAE(um)", "MAPE(%)", "R2"
            );
            for row in rows {
                let c: Vec<&str> = row.split(',').collect();
                println!(
                    "{:>3} {:>8} {:>5} {:>12.3} {:>9.2} {:>8.3} {:>8}",
                    c[0].trim(),
                    c[1].trim(),
                    c[2].trim(),
                    parse_f(c[3])? * 100.0,
                    parse_f(c[4])?,
                    parse_f(c[5])?,
                    parse_r2(c.get(6).copied().unwrap_or(""))?
                        .map(|v| format!("{v:.4}"))
                        .unwrap_or_else(|| "undef".into()),
                );
            }
        }
        other => {
            return Err(CliError::Config(format!(
                "{}: unrecognized report header `{other}`",
                input.display()
            )));
        }
    }
    Ok(())
}
