//! On-disk artifact formats: curve CSVs, dataset/prepared manifests, and the
//! digest-bearing run manifest that makes runs citable.
//!
//! Everything here is deterministic except `RunManifest::generated_at`,
//! which is the single timestamp field reruns are allowed to differ in.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::heatsim::{CameraSpec, Dataset, DatasetOptions, ExcitationSpec, PixelCurve, SpecimenSpec};
use crate::reconstruct::PrepareOptions;

pub const MANIFEST_FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("malformed curve CSV at line {line}: {reason}")]
    BadCurveCsv { line: usize, reason: String },
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Render a curve as `frame_index,value` CSV rows.
pub fn curve_to_csv(curve: &PixelCurve) -> String {
    let mut out = String::from("frame_index,value\n");
    for (i, v) in curve.values.iter().enumerate() {
        out.push_str(&format!("{i},{v}\n"));
    }
    out
}

/// Parse a `frame_index,value` CSV; frame rate and label come from the
/// manifest, not the file.
pub fn curve_from_csv(
    csv: &str,
    frame_rate: f64,
    label_depth: Option<f64>,
) -> Result<PixelCurve, ManifestError> {
    let mut values = Vec::new();
    for (lineno, line) in csv.lines().enumerate() {
        if lineno == 0 {
            if line.trim() != "frame_index,value" {
                return Err(ManifestError::BadCurveCsv {
                    line: 1,
                    reason: format!("expected header `frame_index,value`, got `{line}`"),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(2, ',');
        let idx: usize = parts
            .next()
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|e| ManifestError::BadCurveCsv {
                line: lineno + 1,
                reason: format!("bad frame index: {e}"),
            })?;
        if idx != values.len() {
            return Err(ManifestError::BadCurveCsv {
                line: lineno + 1,
                reason: format!("expected frame index {}, got {idx}", values.len()),
            });
        }
        let value: f64 = parts
            .next()
            .ok_or_else(|| ManifestError::BadCurveCsv {
                line: lineno + 1,
                reason: "missing value column".to_string(),
            })?
            .trim()
            .parse()
            .map_err(|e| ManifestError::BadCurveCsv {
                line: lineno + 1,
                reason: format!("bad value: {e}"),
            })?;
        values.push(value);
    }
    Ok(PixelCurve {
        values,
        frame_rate,
        label_depth,
    })
}

/// One curve file plus its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveFileEntry {
    pub file: String,
    /// Defect depth, m (absent for sound pixels).
    pub label_depth_m: Option<f64>,
    pub depth_index: usize,
    pub pixel_index: usize,
    pub seed: u64,
}

/// Manifest of a simulated curve dataset: file list, labels, seeds and the
/// full configuration echo.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub specimen: SpecimenSpec,
    pub excitation: ExcitationSpec,
    /// Camera with the frozen per-dataset calibration.
    pub camera: CameraSpec,
    pub options: DatasetOptions,
    pub curves: Vec<CurveFileEntry>,
}

impl DatasetManifest {
    /// File naming: `<depth_um>_<pixel_idx>.csv`.
    pub fn curve_file_name(depth_m: f64, pixel_index: usize) -> String {
        format!("{}_{pixel_index}.csv", (depth_m * 1e6).round() as i64)
    }

    pub fn for_dataset(dataset: &Dataset) -> Self {
        let curves = dataset
            .entries
            .iter()
            .map(|e| CurveFileEntry {
                file: Self::curve_file_name(
                    e.curve.label_depth.unwrap_or_default(),
                    e.pixel_index,
                ),
                label_depth_m: e.curve.label_depth,
                depth_index: e.depth_index,
                pixel_index: e.pixel_index,
                seed: e.seed,
            })
            .collect();
        Self {
            format_version: MANIFEST_FORMAT_VERSION,
            specimen: dataset.specimen.clone(),
            excitation: dataset.excitation,
            camera: dataset.camera,
            options: dataset.options,
            curves,
        }
    }
}

/// One stripe-image file plus its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageFileEntry {
    pub file: String,
    pub label_depth_m: Option<f64>,
    pub depth_index: usize,
    pub pixel_index: usize,
}

/// Manifest of a prepared (stripe image) dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedManifest {
    pub format_version: u32,
    /// Path of the source dataset manifest, as given on the command line.
    pub source: String,
    pub prepare: PrepareOptions,
    /// Specimen echo (the configured depth set drives per-depth reports).
    pub specimen: SpecimenSpec,
    pub images: Vec<ImageFileEntry>,
}

impl PreparedManifest {
    /// File naming: `<depth_um>_<pixel_idx>.pgm`.
    pub fn image_file_name(depth_m: f64, pixel_index: usize) -> String {
        format!("{}_{pixel_index}.pgm", (depth_m * 1e6).round() as i64)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Digest-bearing record of one CLI invocation. Every produced file is
/// listed with its content digest; `generated_at` is the only field allowed
/// to differ between identical reruns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub seed: Option<u64>,
    pub config_echo: serde_json::Value,
    pub inputs: Vec<String>,
    pub outputs: Vec<FileDigest>,
    /// Unix seconds at generation time.
    pub generated_at: u64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex::encode(hasher.finalize())
}
