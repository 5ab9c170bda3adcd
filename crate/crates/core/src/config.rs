//! The simulation config document: one JSON object with `material`,
//! `specimen`, `excitation` and `camera` sections, every field optional and
//! defaulting to the built-in values.

use serde::{Deserialize, Serialize};

use crate::heatsim::{
    default_defect_depths, CameraSpec, ExcitationSpec, HeatsimError, MaterialProps, SpecimenSpec,
};

/// Specimen geometry as it appears in the config file (material is its own
/// top-level section).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpecimenGeometry {
    pub thickness: f64,
    pub lateral_size: f64,
    pub defect_depths: Vec<f64>,
    pub defect_radius: f64,
}

impl Default for SpecimenGeometry {
    fn default() -> Self {
        Self {
            thickness: 5e-3,
            lateral_size: 90e-3,
            defect_depths: default_defect_depths(),
            defect_radius: 8e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub material: MaterialProps,
    pub specimen: SpecimenGeometry,
    pub excitation: ExcitationSpec,
    pub camera: CameraSpec,
}

impl SimConfig {
    /// Assemble the domain specs and validate them.
    pub fn resolve(&self) -> Result<(SpecimenSpec, ExcitationSpec, CameraSpec), HeatsimError> {
        let spec = SpecimenSpec {
            thickness: self.specimen.thickness,
            lateral_size: self.specimen.lateral_size,
            defect_depths: self.specimen.defect_depths.clone(),
            defect_radius: self.specimen.defect_radius,
            material: self.material,
        };
        spec.validate()?;
        self.excitation.validate()?;
        self.camera.validate()?;
        Ok((spec, self.excitation, self.camera))
    }

    pub fn from_json(json: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(json)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_resolves_to_defaults() {
        let cfg = SimConfig::from_json("{}").unwrap();
        let (spec, exc, cam) = cfg.resolve().unwrap();
        assert_eq!(spec.thickness, 5e-3);
        assert_eq!(spec.defect_depths.len(), 9);
        assert_eq!(spec.material.conductivity, 0.19);
        assert_eq!(exc.pulse_duration, 30.0);
        assert_eq!(exc.frame_rate, 50.0);
        assert_eq!(cam.netd_sigma, 0.035);
    }

    #[test]
    fn partial_overrides_merge_with_defaults() {
        let cfg = SimConfig::from_json(
            r#"{
                "material": {"conductivity": 0.25},
                "excitation": {"pulse_duration": 10.0, "record_duration": 60.0}
            }"#,
        )
        .unwrap();
        let (spec, exc, _) = cfg.resolve().unwrap();
        assert_eq!(spec.material.conductivity, 0.25);
        assert_eq!(spec.material.density, 1225.0);
        assert_eq!(exc.pulse_duration, 10.0);
        assert_eq!(exc.record_duration, 60.0);
        assert_eq!(exc.frame_rate, 50.0);
    }

    #[test]
    fn unknown_fields_are_rejected_by_name() {
        let err = SimConfig::from_json(r#"{"material": {"conductivty": 0.2}}"#).unwrap_err();
        assert!(err.to_string().contains("conductivty"), "{err}");
    }

    #[test]
    fn invalid_values_name_the_field() {
        let cfg = SimConfig::from_json(r#"{"excitation": {"pulse_duration": 500.0}}"#).unwrap();
        let err = cfg.resolve().unwrap_err();
        assert!(err.to_string().contains("record_duration"), "{err}");
    }
}
