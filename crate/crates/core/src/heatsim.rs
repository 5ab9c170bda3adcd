//! Synthetic thermography data: 1-D transient heat conduction over a slab
//! with a flat-bottom-hole defect model, plus a virtual IR camera.
//!
//! A defect pixel is modeled as a slab of thickness `d` (the defect depth)
//! with an insulated back face: the air cavity of a flat-bottom hole blocks
//! conduction. A sound pixel is the full plate thickness with a convective
//! back face. The front face absorbs a constant flux while the pulse lasts
//! and loses heat by convection at all times:
//!
//! ```text
//! ∂T/∂t = α ∂²T/∂x²,  α = k/(ρ·c_p)
//! -k ∂T/∂x|front = q(t) - h(T - T∞),   q(t) = q0 for t ≤ pulse duration
//! ```
//!
//! The scheme is explicit FTCS on a node-centered grid with half-volume
//! boundary cells, which makes the flux accounting exact: with h = 0 and an
//! insulated back face the internal energy gain equals q0 × pulse duration
//! to rounding error. The solver refuses to run when α·Δt/Δx² > 0.5.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::util::{derive_stream_seed, round_half_away_from_zero, standard_normal};

/// Errors from the simulator and virtual camera.
#[derive(Debug, thiserror::Error)]
pub enum HeatsimError {
    /// α·Δt/Δx² exceeded the explicit-scheme limit of 0.5.
    #[error("unstable grid: alpha*dt/dx^2 = {factor:.4} > 0.5")]
    StabilityViolation { factor: f64 },
    /// A defect depth outside (0, thickness).
    #[error("invalid defect depth {depth_m} m for slab thickness {thickness_m} m")]
    InvalidDepth { depth_m: f64, thickness_m: f64 },
    /// Camera calibration missing or inverted.
    #[error("camera calibration invalid: {reason}")]
    CalibrationError { reason: String },
    /// A physical parameter violating its invariant, named by field.
    #[error("invalid configuration: field `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },
}

fn config_err(field: &str, reason: &str) -> HeatsimError {
    HeatsimError::InvalidConfig {
        field: field.to_string(),
        reason: reason.to_string(),
    }
}

/// Thermophysical properties of the specimen material.
///
/// Defaults are mid-range PLA values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaterialProps {
    /// Thermal conductivity, W/(m·K).
    pub conductivity: f64,
    /// Specific heat capacity, J/(kg·K).
    pub specific_heat: f64,
    /// Density, kg/m³.
    pub density: f64,
    /// Surface emissivity in (0, 1].
    pub emissivity: f64,
}

impl Default for MaterialProps {
    fn default() -> Self {
        Self {
            conductivity: 0.19,
            specific_heat: 1900.0,
            density: 1225.0,
            emissivity: 0.92,
        }
    }
}

impl MaterialProps {
    pub fn validate(&self) -> Result<(), HeatsimError> {
        if self.conductivity <= 0.0 || self.conductivity.is_nan() {
            return Err(config_err("material.conductivity", "must be > 0"));
        }
        if self.specific_heat <= 0.0 || self.specific_heat.is_nan() {
            return Err(config_err("material.specific_heat", "must be > 0"));
        }
        if self.density <= 0.0 || self.density.is_nan() {
            return Err(config_err("material.density", "must be > 0"));
        }
        if self.emissivity <= 0.0 || self.emissivity > 1.0 || self.emissivity.is_nan() {
            return Err(config_err("material.emissivity", "must be in (0, 1]"));
        }
        Ok(())
    }
}

/// Thermal diffusivity α = k/(ρ·c_p) in m²/s.
pub fn thermal_diffusivity(m: &MaterialProps) -> f64 {
    m.conductivity / (m.density * m.specific_heat)
}

/// The nine default defect depths: 0.24 mm … 1.52 mm in 0.16 mm steps.
pub fn default_defect_depths() -> Vec<f64> {
    (0..9).map(|i| (240 + 160 * i) as f64 * 1e-6).collect()
}

/// Geometry of the plate and its flat-bottom-hole defects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpecimenSpec {
    /// Plate thickness, m.
    pub thickness: f64,
    /// Lateral plate size, m (metadata only; the model is 1-D).
    pub lateral_size: f64,
    /// Depth of sound material above each defect cavity, m.
    pub defect_depths: Vec<f64>,
    /// Defect radius, m (metadata only).
    pub defect_radius: f64,
    pub material: MaterialProps,
}

impl Default for SpecimenSpec {
    fn default() -> Self {
        Self {
            thickness: 5e-3,
            lateral_size: 90e-3,
            defect_depths: default_defect_depths(),
            defect_radius: 8e-3,
            material: MaterialProps::default(),
        }
    }
}

impl SpecimenSpec {
    pub fn validate(&self) -> Result<(), HeatsimError> {
        self.material.validate()?;
        if self.thickness <= 0.0 || self.thickness.is_nan() {
            return Err(config_err("specimen.thickness", "must be > 0"));
        }
        for &d in &self.defect_depths {
            if d <= 0.0 || d >= self.thickness || d.is_nan() {
                return Err(HeatsimError::InvalidDepth {
                    depth_m: d,
                    thickness_m: self.thickness,
                });
            }
        }
        Ok(())
    }

    /// Smallest configured defect depth, or the plate thickness when no
    /// defects are configured.
    pub fn min_depth(&self) -> f64 {
        self.defect_depths
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
            .min(self.thickness)
    }
}

/// Heating pulse and recording window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExcitationSpec {
    /// Pulse length, s.
    pub pulse_duration: f64,
    /// Absorbed front-face flux while the pulse lasts, W/m².
    pub absorbed_flux: f64,
    /// Ambient (and initial) temperature, K.
    pub ambient_temp: f64,
    /// Convection coefficient at exposed faces, W/(m²·K). Radiation is
    /// folded into this constant.
    pub convection_coeff: f64,
    /// Recording window, s.
    pub record_duration: f64,
    /// Camera frame rate, Hz.
    pub frame_rate: f64,
}

impl Default for ExcitationSpec {
    fn default() -> Self {
        Self {
            pulse_duration: 30.0,
            absorbed_flux: 2000.0,
            ambient_temp: 298.15,
            convection_coeff: 10.0,
            record_duration: 220.0,
            frame_rate: 50.0,
        }
    }
}

impl ExcitationSpec {
    pub fn validate(&self) -> Result<(), HeatsimError> {
        if self.pulse_duration <= 0.0 || self.pulse_duration.is_nan() {
            return Err(config_err("excitation.pulse_duration", "must be > 0"));
        }
        if self.record_duration <= self.pulse_duration || self.record_duration.is_nan() {
            return Err(config_err(
                "excitation.record_duration",
                "must exceed pulse_duration",
            ));
        }
        if self.absorbed_flux <= 0.0 || self.absorbed_flux.is_nan() {
            return Err(config_err("excitation.absorbed_flux", "must be > 0"));
        }
        if self.frame_rate <= 0.0 || self.frame_rate.is_nan() {
            return Err(config_err("excitation.frame_rate", "must be > 0"));
        }
        if self.convection_coeff < 0.0 || self.convection_coeff.is_nan() {
            return Err(config_err("excitation.convection_coeff", "must be >= 0"));
        }
        if self.ambient_temp <= 0.0 || self.ambient_temp.is_nan() {
            return Err(config_err("excitation.ambient_temp", "must be > 0 K"));
        }
        Ok(())
    }

    /// Number of recorded frames: round(record_duration × frame_rate).
    pub fn frame_count(&self) -> usize {
        (self.record_duration * self.frame_rate).round() as usize
    }
}

/// Virtual IR camera: NETD noise plus a linear map to 8-bit grayscale.
///
/// `calib_min`/`calib_max` define the temperature-to-grayscale window. When
/// absent, [`generate_dataset`] calibrates them once from a noiseless
/// sound-pixel run and the shallowest-defect run, padded 5% of the range on
/// each side, and freezes them for the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraSpec {
    /// Temperature noise floor (NETD), K, applied as Gaussian noise before
    /// quantization.
    pub netd_sigma: f64,
    /// Output bit depth; only 8 is supported.
    pub bit_depth: u8,
    /// Temperature mapped to grayscale 0, K.
    pub calib_min: Option<f64>,
    /// Temperature mapped to grayscale 255, K.
    pub calib_max: Option<f64>,
}

impl Default for CameraSpec {
    fn default() -> Self {
        Self {
            netd_sigma: 0.035,
            bit_depth: 8,
            calib_min: None,
            calib_max: None,
        }
    }
}

impl CameraSpec {
    pub fn validate(&self) -> Result<(), HeatsimError> {
        if self.netd_sigma < 0.0 || self.netd_sigma.is_nan() {
            return Err(config_err("camera.netd_sigma", "must be >= 0"));
        }
        if self.bit_depth != 8 {
            return Err(config_err("camera.bit_depth", "only 8 is supported"));
        }
        if let (Some(lo), Some(hi)) = (self.calib_min, self.calib_max) {
            if lo >= hi || lo.is_nan() || hi.is_nan() {
                return Err(HeatsimError::CalibrationError {
                    reason: format!("calib_min {lo} must be < calib_max {hi}"),
                });
            }
        }
        Ok(())
    }

    fn calibration(&self) -> Result<(f64, f64), HeatsimError> {
        match (self.calib_min, self.calib_max) {
            (Some(lo), Some(hi)) if lo < hi => Ok((lo, hi)),
            (Some(lo), Some(hi)) => Err(HeatsimError::CalibrationError {
                reason: format!("calib_min {lo} must be < calib_max {hi}"),
            }),
            _ => Err(HeatsimError::CalibrationError {
                reason: "calib_min/calib_max not set".to_string(),
            }),
        }
    }
}

/// Spatial/temporal discretization of the explicit solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridParams {
    /// Target node spacing, m. The effective spacing divides the slab
    /// thickness exactly.
    pub dx: f64,
    /// Explicit time step, s. `None` picks 0.4·Δx²/α, snapped so an integer
    /// number of steps lands on every frame time.
    pub dt: Option<f64>,
}

impl GridParams {
    /// Default grid for a specimen: Δx = (smallest defect depth)/40.
    pub fn for_specimen(spec: &SpecimenSpec) -> Self {
        Self {
            dx: spec.min_depth() / 40.0,
            dt: None,
        }
    }
}

/// Front-surface temperature per frame, before the camera.
#[derive(Debug, Clone, PartialEq)]
pub struct TemperatureCurve {
    /// Temperature at each frame time, K. Frame n is at t = n / frame_rate,
    /// so frame 0 holds the initial (ambient) state.
    pub samples: Vec<f64>,
    pub frame_rate: f64,
}

/// One pixel's grayscale-vs-frame time series; the unit of supervision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelCurve {
    /// Grayscale levels in [0, 255]. Integral after the camera, but real
    /// values are allowed so smoothed curves flow through the same type.
    pub values: Vec<f64>,
    pub frame_rate: f64,
    /// True defect depth, m. Absent for sound pixels.
    pub label_depth: Option<f64>,
}

enum BackFace {
    Insulated,
    Convective,
}

struct SlabSolution {
    /// Front-surface temperature at frame times, K.
    surface: Vec<f64>,
    /// Full temperature field at the last frame, K (energy diagnostics).
    #[cfg_attr(not(test), allow(dead_code))]
    final_field: Vec<f64>,
    /// Effective node spacing, m.
    #[cfg_attr(not(test), allow(dead_code))]
    dx: f64,
}

/// March the explicit scheme over one slab.
fn solve_slab(
    thickness: f64,
    back: BackFace,
    mat: &MaterialProps,
    exc: &ExcitationSpec,
    grid: &GridParams,
) -> Result<SlabSolution, HeatsimError> {
    mat.validate()?;
    exc.validate()?;
    if grid.dx <= 0.0 || grid.dx.is_nan() {
        return Err(config_err("grid.dx", "must be > 0"));
    }

    let alpha = thermal_diffusivity(mat);
    let nodes = ((thickness / grid.dx).round() as usize).max(2);
    let dx = thickness / nodes as f64;
    let frame_dt = 1.0 / exc.frame_rate;

    // Requested steps are verified against the limit before being snapped to
    // an integer count per frame; snapping only ever shrinks the step.
    let dt_requested = match grid.dt {
        Some(dt) => dt,
        None => 0.4 * dx * dx / alpha,
    };
    let factor = alpha * dt_requested / (dx * dx);
    if factor > 0.5 {
        return Err(HeatsimError::StabilityViolation { factor });
    }
    let steps_per_frame = (frame_dt / dt_requested).ceil().max(1.0) as u64;
    let dt = frame_dt / steps_per_frame as f64;

    let r = alpha * dt / (dx * dx);
    let rho_c = mat.density * mat.specific_heat;
    // Half-volume boundary cell: ρc·(Δx/2)·dT/dt = boundary flux balance.
    let c_bnd = 2.0 * dt / (rho_c * dx);
    let h = exc.convection_coeff;
    let t_inf = exc.ambient_temp;
    let q0 = exc.absorbed_flux;

    let n_frames = exc.frame_count();
    let mut surface = Vec::with_capacity(n_frames);
    let mut prev = vec![t_inf; nodes + 1];
    let mut next = vec![t_inf; nodes + 1];
    if n_frames > 0 {
        surface.push(prev[0]);
    }

    let mut step: u64 = 0;
    for _frame in 1..n_frames {
        for _ in 0..steps_per_frame {
            let t_start = step as f64 * dt;
            // Fraction of this step inside the pulse, so the injected energy
            // is exactly q0·pulse_duration regardless of step alignment.
            let w = ((exc.pulse_duration - t_start) / dt).clamp(0.0, 1.0);
            let q = q0 * w;

            next[0] = prev[0] + 2.0 * r * (prev[1] - prev[0]) + c_bnd * (q - h * (prev[0] - t_inf));
            let m = nodes;
            for (dst, win) in next[1..m].iter_mut().zip(prev.windows(3)) {
                *dst = win[1] + r * (win[0] - 2.0 * win[1] + win[2]);
            }
            next[m] = prev[m] + 2.0 * r * (prev[m - 1] - prev[m]);
            if let BackFace::Convective = back {
                next[m] -= c_bnd * h * (prev[m] - t_inf);
            }

            std::mem::swap(&mut prev, &mut next);
            step += 1;
        }
        surface.push(prev[0]);
    }

    if surface.iter().any(|v| !v.is_finite()) {
        return Err(config_err("solver", "non-finite temperature produced"));
    }

    Ok(SlabSolution {
        surface,
        final_field: prev,
        dx,
    })
}

/// Simulate one pixel's front-surface temperature history.
///
/// `depth = Some(d)` simulates a defect pixel: a slab of thickness `d` with
/// an insulated back face. `depth = None` simulates a sound pixel: the full
/// plate thickness with a convective back face.
pub fn simulate_pixel(
    spec: &SpecimenSpec,
    exc: &ExcitationSpec,
    depth: Option<f64>,
    grid: &GridParams,
) -> Result<TemperatureCurve, HeatsimError> {
    spec.material.validate()?;
    let (thickness, back) = match depth {
        Some(d) => {
            if d <= 0.0 || d >= spec.thickness || d.is_nan() {
                return Err(HeatsimError::InvalidDepth {
                    depth_m: d,
                    thickness_m: spec.thickness,
                });
            }
            (d, BackFace::Insulated)
        }
        None => (spec.thickness, BackFace::Convective),
    };
    let sol = solve_slab(thickness, back, &spec.material, exc, grid)?;
    Ok(TemperatureCurve {
        samples: sol.surface,
        frame_rate: exc.frame_rate,
    })
}

/// Apply the virtual camera: Gaussian NETD noise in the temperature domain,
/// then the linear map to [0, 255] with round-half-away-from-zero.
pub fn quantize_curve(
    curve: &TemperatureCurve,
    cam: &CameraSpec,
    rng_seed: u64,
) -> Result<PixelCurve, HeatsimError> {
    cam.validate()?;
    let (lo, hi) = cam.calibration()?;
    let scale = 255.0 / (hi - lo);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let values = curve
        .samples
        .iter()
        .map(|&t| {
            let noisy = t + cam.netd_sigma * standard_normal(&mut rng);
            round_half_away_from_zero((noisy - lo) * scale).clamp(0.0, 255.0)
        })
        .collect();
    Ok(PixelCurve {
        values,
        frame_rate: curve.frame_rate,
        label_depth: None,
    })
}

/// Knobs for dataset generation beyond the physical specs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetOptions {
    /// Labeled curves generated per defect depth.
    pub pixels_per_depth: usize,
    /// Fractional uniform jitter applied per pixel to the absorbed flux
    /// (±2% by default); 0 disables the draw entirely.
    pub flux_jitter: f64,
    pub master_seed: u64,
    /// Grid override; `None` uses [`GridParams::for_specimen`].
    pub grid: Option<GridParams>,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        Self {
            pixels_per_depth: 197,
            flux_jitter: 0.02,
            master_seed: 0,
            grid: None,
        }
    }
}

/// One labeled curve plus the provenance needed to regenerate it.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEntry {
    pub curve: PixelCurve,
    pub depth_index: usize,
    pub pixel_index: usize,
    /// Stream seed derived from (master seed, depth index, pixel index).
    pub seed: u64,
}

/// A full labeled dataset with its frozen camera calibration.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub entries: Vec<DatasetEntry>,
    /// Camera with calibration resolved and frozen.
    pub camera: CameraSpec,
    pub specimen: SpecimenSpec,
    pub excitation: ExcitationSpec,
    pub options: DatasetOptions,
}

/// Generate `pixels_per_depth` labeled curves for every configured defect
/// depth.
///
/// Per-pixel RNG streams are derived from (master seed, depth index, pixel
/// index), so the output is independent of generation order. Each pixel
/// draws its flux jitter first, then a seed for the camera noise stream.
pub fn generate_dataset(
    spec: &SpecimenSpec,
    exc: &ExcitationSpec,
    cam: &CameraSpec,
    opts: &DatasetOptions,
) -> Result<Dataset, HeatsimError> {
    spec.validate()?;
    exc.validate()?;
    cam.validate()?;
    if opts.pixels_per_depth == 0 {
        return Err(config_err("options.pixels_per_depth", "must be >= 1"));
    }
    if spec.defect_depths.is_empty() {
        return Err(config_err("specimen.defect_depths", "must be non-empty"));
    }

    let grid = opts.grid.unwrap_or_else(|| GridParams::for_specimen(spec));
    let camera = freeze_calibration(spec, exc, cam, &grid)?;

    let mut entries = Vec::with_capacity(spec.defect_depths.len() * opts.pixels_per_depth);
    for (depth_index, &depth) in spec.defect_depths.iter().enumerate() {
        for pixel_index in 0..opts.pixels_per_depth {
            let seed = derive_stream_seed(opts.master_seed, depth_index as u64, pixel_index as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let jitter = if opts.flux_jitter > 0.0 {
                1.0 + opts.flux_jitter * (2.0 * rng.random::<f64>() - 1.0)
            } else {
                1.0
            };
            let exc_px = ExcitationSpec {
                absorbed_flux: exc.absorbed_flux * jitter,
                ..*exc
            };
            let sim = simulate_pixel(spec, &exc_px, Some(depth), &grid)?;
            let noise_seed = rng.next_u64();
            let mut curve = quantize_curve(&sim, &camera, noise_seed)?;
            curve.label_depth = Some(depth);
            entries.push(DatasetEntry {
                curve,
                depth_index,
                pixel_index,
                seed,
            });
        }
    }

    Ok(Dataset {
        entries,
        camera,
        specimen: spec.clone(),
        excitation: *exc,
        options: *opts,
    })
}

/// Resolve the camera calibration window for a dataset.
///
/// When unset, runs a noiseless sound pixel and the shallowest defect pixel,
/// takes the min/max over both curves and pads each side by 5% of the range.
pub fn freeze_calibration(
    spec: &SpecimenSpec,
    exc: &ExcitationSpec,
    cam: &CameraSpec,
    grid: &GridParams,
) -> Result<CameraSpec, HeatsimError> {
    if cam.calib_min.is_some() && cam.calib_max.is_some() {
        cam.validate()?;
        return Ok(*cam);
    }
    let shallowest = spec
        .defect_depths
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let sound = simulate_pixel(spec, exc, None, grid)?;
    let defect = simulate_pixel(spec, exc, Some(shallowest), grid)?;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in sound.samples.iter().chain(defect.samples.iter()) {
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    let range = hi - lo;
    if range <= 0.0 || range.is_nan() {
        return Err(HeatsimError::CalibrationError {
            reason: "calibration runs produced a degenerate temperature range".to_string(),
        });
    }
    Ok(CameraSpec {
        calib_min: Some(lo - 0.05 * range),
        calib_max: Some(hi + 0.05 * range),
        ..*cam
    })
}

/// Peak thermal contrast between a defect and a sound curve.
///
/// Returns (peak contrast in K, time of the peak in s, frame index).
pub fn peak_contrast(defect: &TemperatureCurve, sound: &TemperatureCurve) -> (f64, f64, usize) {
    let n = defect.samples.len().min(sound.samples.len());
    let mut best = f64::NEG_INFINITY;
    let mut best_idx = 0;
    for i in 0..n {
        let c = defect.samples[i] - sound.samples[i];
        if c > best {
            best = c;
            best_idx = i;
        }
    }
    (best, best_idx as f64 / defect.frame_rate, best_idx)
}
