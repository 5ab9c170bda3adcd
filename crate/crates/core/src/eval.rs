//! Regression metrics, per-depth breakdown tables and the two-factor
//! ablation grid (log enhancement × residual regression head).
//!
//! Unit convention: metric functions take predictions and targets in mm.
//! RMSE is stored raw in mm (display scaling ×10² happens only at render
//! time), MAE is reported in μm, MAPE in percent.

use serde::{Deserialize, Serialize};

use crate::heatsim::Dataset;
use crate::model::{self, HeadKind, ModelConfig, ModelError, ModelParams};
use crate::reconstruct::{self, PrepareOptions, ReconstructError};
use crate::training::{self, TrainConfig, TrainError, TrainSample};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("empty prediction set")]
    Empty,
    #[error("prediction/target length mismatch: {preds} vs {targets}")]
    LengthMismatch { preds: usize, targets: usize },
    #[error("zero target value at index {0}; MAPE is undefined")]
    ZeroTarget(usize),
    #[error("label {0} mm is not in the configured depth set")]
    UnknownDepth(f64),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Reconstruct(#[from] ReconstructError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Overall regression metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverallMetrics {
    /// Root mean squared error, mm (raw; ×10² only when rendering).
    pub rmse_mm: f64,
    /// Mean absolute error, μm.
    pub mae_um: f64,
    /// Mean absolute percentage error, %.
    pub mape_pct: f64,
    /// Coefficient of determination; `None` when the targets have zero
    /// variance (undefined, reported as empty rather than a number).
    pub r2: Option<f64>,
}

/// Per-depth row mirroring the breakdown tables.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub depth_mm: f64,
    pub mae_um: f64,
    pub mape_pct: f64,
    pub mean_pred_mm: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: OverallMetrics,
    /// Rows ordered by ascending true depth.
    pub per_depth: Vec<DepthMetrics>,
}

/// Standard regression metrics over mm-valued predictions/targets.
pub fn metrics(predictions_mm: &[f64], targets_mm: &[f64]) -> Result<OverallMetrics, EvalError> {
    if predictions_mm.is_empty() {
        return Err(EvalError::Empty);
    }
    if predictions_mm.len() != targets_mm.len() {
        return Err(EvalError::LengthMismatch {
            preds: predictions_mm.len(),
            targets: targets_mm.len(),
        });
    }
    if let Some(i) = targets_mm.iter().position(|&y| y == 0.0) {
        return Err(EvalError::ZeroTarget(i));
    }
    let n = predictions_mm.len() as f64;
    let mut ssr = 0.0f64;
    let mut abs_sum = 0.0f64;
    let mut ape_sum = 0.0f64;
    for (&p, &y) in predictions_mm.iter().zip(targets_mm.iter()) {
        let r = p - y;
        ssr += r * r;
        abs_sum += r.abs();
        ape_sum += (r / y).abs();
    }
    let y_mean = targets_mm.iter().sum::<f64>() / n;
    let sst: f64 = targets_mm.iter().map(|&y| (y - y_mean) * (y - y_mean)).sum();
    let r2 = if sst > 0.0 { Some(1.0 - ssr / sst) } else { None };
    Ok(OverallMetrics {
        rmse_mm: (ssr / n).sqrt(),
        mae_um: abs_sum / n * 1000.0,
        mape_pct: 100.0 * ape_sum / n,
        r2,
    })
}

/// Group predictions by true depth and emit the per-depth table plus the
/// overall metrics. `depth_set_mm` is the configured depth list; targets
/// outside it (beyond 1e-9 mm) are rejected.
pub fn per_depth_report(
    predictions_mm: &[f64],
    targets_mm: &[f64],
    depth_set_mm: &[f64],
) -> Result<EvalReport, EvalError> {
    let overall = metrics(predictions_mm, targets_mm)?;
    let mut depths: Vec<f64> = depth_set_mm.to_vec();
    depths.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); depths.len()];
    for (i, &y) in targets_mm.iter().enumerate() {
        let class = depths
            .iter()
            .position(|&d| (d - y).abs() < 1e-9)
            .ok_or(EvalError::UnknownDepth(y))?;
        groups[class].push(i);
    }

    let mut per_depth = Vec::new();
    for (class, idxs) in groups.iter().enumerate() {
        if idxs.is_empty() {
            continue;
        }
        let n = idxs.len() as f64;
        let mut abs_sum = 0.0;
        let mut ape_sum = 0.0;
        let mut pred_sum = 0.0;
        for &i in idxs {
            let r = predictions_mm[i] - targets_mm[i];
            abs_sum += r.abs();
            ape_sum += (r / targets_mm[i]).abs();
            pred_sum += predictions_mm[i];
        }
        per_depth.push(DepthMetrics {
            depth_mm: depths[class],
            mae_um: abs_sum / n * 1000.0,
            mape_pct: 100.0 * ape_sum / n,
            mean_pred_mm: pred_sum / n,
            count: idxs.len(),
        });
    }
    Ok(EvalReport { overall, per_depth })
}

/// Evaluate a trained model on a subset of samples. Model predictions and
/// sample labels are both in mm; the configured depth set arrives in m.
pub fn evaluate_subset(
    params: &ModelParams,
    samples: &[TrainSample],
    indices: &[usize],
    depth_set_m: &[f64],
) -> Result<EvalReport, EvalError> {
    let mut preds_mm = Vec::with_capacity(indices.len());
    let mut targets_mm = Vec::with_capacity(indices.len());
    for &i in indices {
        preds_mm.push(model::predict(params, &samples[i].input)?);
        targets_mm.push(samples[i].label);
    }
    let depths_mm: Vec<f64> = depth_set_m.iter().map(|d| d * 1000.0).collect();
    per_depth_report(&preds_mm, &targets_mm, &depths_mm)
}

/// Run the reconstruction pipeline over a simulated dataset, keeping only
/// labeled curves. Simulator labels (m) become sample labels (mm).
pub fn samples_from_curves(
    dataset: &Dataset,
    opts: &PrepareOptions,
) -> Result<Vec<TrainSample>, ReconstructError> {
    let mut samples = Vec::with_capacity(dataset.entries.len());
    for entry in &dataset.entries {
        let prepared = reconstruct::prepare(&entry.curve, opts)?;
        if let Some(label) = prepared.label_depth {
            samples.push(TrainSample {
                input: prepared.input,
                label: label * 1000.0,
            });
        }
    }
    Ok(samples)
}

/// Configuration shared by the four ablation arms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub prepare: PrepareOptions,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationArm {
    /// 1 = neither, 2 = enhancement only, 3 = head only, 4 = both.
    pub arm: u8,
    pub enhance: bool,
    pub rrh: bool,
    pub report: EvalReport,
    /// Test-set membership (sample indices); identical across arms.
    pub test_indices: Vec<usize>,
}

/// The four-arm grid over (enhancement on/off) × (RRH on/off).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub arms: Vec<AblationArm>,
}

/// Train and evaluate the four ablation arms with a shared seed and test
/// split.
///
/// Both input variants (enhanced / plain) come from the same curves in the
/// same order, and the split depends only on labels and the seed, so test
/// membership is identical across arms.
pub fn run_ablation(config: &AblationConfig, dataset: &Dataset) -> Result<AblationGrid, EvalError> {
    let enhanced = samples_from_curves(
        dataset,
        &PrepareOptions {
            enhance: true,
            ..config.prepare
        },
    )?;
    let plain = samples_from_curves(
        dataset,
        &PrepareOptions {
            enhance: false,
            ..config.prepare
        },
    )?;

    let mut arms = Vec::with_capacity(4);
    for (arm, (enhance, rrh)) in [(false, false), (true, false), (false, true), (true, true)]
        .into_iter()
        .enumerate()
    {
        let samples = if enhance { &enhanced } else { &plain };
        let model_cfg = ModelConfig {
            head: if rrh { HeadKind::Rrh } else { HeadKind::SingleFc },
            ..config.model
        };
        let outcome = training::train(&model_cfg, &config.train, samples)?;
        let report = evaluate_subset(
            &outcome.best_params,
            samples,
            &outcome.split.test,
            &dataset.specimen.defect_depths,
        )?;
        arms.push(AblationArm {
            arm: arm as u8 + 1,
            enhance,
            rrh,
            report,
            test_indices: outcome.split.test,
        });
    }
    Ok(AblationGrid { arms })
}

fn fmt_r2(r2: Option<f64>) -> String {
    r2.map(|v| v.to_string()).unwrap_or_default()
}

/// `rmse_mm,mae_um,mape_pct,r2` (one row).
pub fn overall_csv(report: &EvalReport) -> String {
    let o = &report.overall;
    format!(
        "rmse_mm,mae_um,mape_pct,r2\n{},{},{},{}\n",
        o.rmse_mm,
        o.mae_um,
        o.mape_pct,
        fmt_r2(o.r2)
    )
}

/// `depth_mm,mae_um,mape_pct,mean_pred_mm,count` rows ordered by depth.
pub fn per_depth_csv(report: &EvalReport) -> String {
    let mut out = String::from("depth_mm,mae_um,mape_pct,mean_pred_mm,count\n");
    for row in &report.per_depth {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            row.depth_mm, row.mae_um, row.mape_pct, row.mean_pred_mm, row.count
        ));
    }
    out
}

/// Table-shaped ablation CSV: `arm,enhance,rrh,rmse,mae_um,mape_pct,r2`.
pub fn ablation_csv(grid: &AblationGrid) -> String {
    let mut out = String::from("arm,enhance,rrh,rmse,mae_um,mape_pct,r2\n");
    for arm in &grid.arms {
        let o = &arm.report.overall;
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            arm.arm,
            arm.enhance,
            arm.rrh,
            o.rmse_mm,
            o.mae_um,
            o.mape_pct,
            fmt_r2(o.r2)
        ));
    }
    out
}

/// Human-readable aligned rendering of a report.
pub fn render_report_text(report: &EvalReport) -> String {
    let o = &report.overall;
    let mut out = String::new();
    out.push_str(&format!(
        "overall: RMSE(x10^-2) {:>8.3}  MAE(um) {:>8.2}  MAPE(%) {:>7.3}  R2 {}\n",
        o.rmse_mm * 100.0,
        o.mae_um,
        o.mape_pct,
        o.r2.map(|v| format!("{v:.4}")).unwrap_or_else(|| "undefined".into())
    ));
    if !report.per_depth.is_empty() {
        out.push_str(&format!(
            "{:>9} {:>10} {:>9} {:>14} {:>6}\n",
            "depth(mm)", "MAE(um)", "MAPE(%)", "mean_pred(mm)", "count"
        ));
        for r in &report.per_depth {
            out.push_str(&format!(
                "{:>9.2} {:>10.2} {:>9.3} {:>14.4} {:>6}\n",
                r.depth_mm, r.mae_um, r.mape_pct, r.mean_pred_mm, r.count
            ));
        }
    }
    out
}

/// Aligned rendering of the ablation grid.
pub fn render_ablation_text(grid: &AblationGrid) -> String {
    let mut out = format!(
        "{:>3} {:>8} {:>5} {:>12} {:>9} {:>8} {:>8}\n",
        "arm", "enhance", "rrh", "RMSE(x10^-2)", "MAE(um)", "MAPE(%)", "R2"
    );
    for a in &grid.arms {
        let o = &a.report.overall;
        out.push_str(&format!(
            "{:>3} {:>8} {:>5} {:>12.3} {:>9.2} {:>8.3} {:>8}\n",
            a.arm,
            a.enhance,
            a.rrh,
            o.rmse_mm * 100.0,
            o.mae_um,
            o.mape_pct,
            o.r2.map(|v| format!("{v:.4}")).unwrap_or_else(|| "undef".into())
        ));
    }
    out
}
