//! Pipeline configuration: one TOML file with a section per module.
//! Unknown keys are rejected; every field has a documented default, so an
//! empty file (or no file) runs the default synthetic survey.

use crate::association::AssociationConfig;
use crate::estimation::EstimationConfig;
use crate::pose_graph::GraphConfig;
use crate::simulator::{BathymetryParams, DriftModel, SurveyPlan};
use crate::sonar_image::SonarConfig;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Master seed; per-stage streams are derived from it.
    pub seed: u64,
    /// Worker threads (0 = use the rayon default).
    pub threads: usize,
    /// Canonical image resolution, meters per column.
    pub canonical_resolution: f64,
    /// Minimum footprint-hull intersection to treat two images as
    /// overlapping, square meters.
    pub min_overlap_area: f64,
    /// Mesh-baseline acceptance threshold for EPE evaluation, meters.
    pub baseline_threshold: f64,
    pub sonar: SonarConfig,
    pub survey: SurveyPlan,
    pub bathymetry: BathymetryParams,
    pub drift: DriftModel,
    pub association: AssociationConfig,
    pub estimation: EstimationConfig,
    pub graph: GraphConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 0,
            canonical_resolution: 0.5,
            min_overlap_area: 5000.0,
            baseline_threshold: 0.3,
            sonar: SonarConfig::default(),
            survey: SurveyPlan::default(),
            bathymetry: BathymetryParams::default(),
            drift: DriftModel::default(),
            association: AssociationConfig::default(),
            estimation: EstimationConfig::default(),
            graph: GraphConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Parse {
            path: "<config>".into(),
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: PipelineConfig = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).unwrap_or_default()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.canonical_resolution > 0.0) {
            return Err(Error::InvalidConfig("canonical_resolution must be > 0".into()));
        }
        if self.min_overlap_area < 0.0 {
            return Err(Error::InvalidConfig("min_overlap_area must be >= 0".into()));
        }
        if !(self.baseline_threshold >= 0.0) {
            return Err(Error::InvalidConfig("baseline_threshold must be >= 0".into()));
        }
        if self.graph.node_stride == 0 {
            return Err(Error::InvalidConfig("graph.node_stride must be >= 1".into()));
        }
        self.sonar.validate()?;
        self.survey.validate()?;
        self.drift.validate()?;
        self.association.validate()?;
        Ok(())
    }
}
