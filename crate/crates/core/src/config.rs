//! Pipeline configuration, read from a single JSON file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cluster::ClusterParams;
use crate::dcae::{FusionHyper, TrainHyper};
use crate::error::{Error, Result};
use crate::metrics::SvmParams;
use crate::ocsvm::{OcSvmParams, Origin};
use crate::patches::Preset;
use crate::preprocess::PreprocessConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DcaeConfig {
    pub dropout: f64,
    pub fusion_elu: bool,
    /// Healthy training pairs kept after uniform subsampling.
    pub max_pairs: Option<usize>,
    pub train: TrainHyper,
    pub fusion: FusionHyper,
}

impl Default for DcaeConfig {
    fn default() -> Self {
        Self {
            dropout: 0.2,
            fusion_elu: true,
            max_pairs: Some(6000),
            train: TrainHyper::default(),
            fusion: FusionHyper::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundaryConfig {
    pub nu: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub origin: Origin,
    /// Healthy features used to fit each boundary.
    pub max_samples: Option<usize>,
}

impl Default for BoundaryConfig {
    fn default() -> Self {
        let p = OcSvmParams::default();
        Self {
            nu: p.nu,
            tol: p.tol,
            max_iter: p.max_iter,
            origin: p.origin,
            max_samples: Some(4000),
        }
    }
}

impl BoundaryConfig {
    pub fn params(&self) -> OcSvmParams {
        OcSvmParams {
            nu: self.nu,
            tol: self.tol,
            max_iter: self.max_iter,
            origin: self.origin,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterConfig {
    pub k_min: usize,
    pub k_max: usize,
    pub restarts: usize,
    pub max_iter: usize,
    /// Anomaly-split superpixels embedded before filtering by the boundary.
    pub max_samples: Option<usize>,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        let p = ClusterParams::default();
        Self {
            k_min: p.k_min,
            k_max: p.k_max,
            restarts: p.restarts,
            max_iter: p.max_iter,
            max_samples: Some(20000),
        }
    }
}

impl ClusterConfig {
    pub fn params(&self) -> ClusterParams {
        ClusterParams {
            k_min: self.k_min,
            k_max: self.k_max,
            restarts: self.restarts,
            max_iter: self.max_iter,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub svm: SvmParams,
    pub folds: usize,
    pub per_class: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            svm: SvmParams::default(),
            folds: 5,
            per_class: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub preset: Preset,
    pub seed: u64,
    pub preprocess: PreprocessConfig,
    pub dcae: DcaeConfig,
    pub ocsvm: BoundaryConfig,
    pub cluster: ClusterConfig,
    pub metrics: MetricsConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Desk,
            seed: 42,
            preprocess: PreprocessConfig::default(),
            dcae: DcaeConfig::default(),
            ocsvm: BoundaryConfig::default(),
            cluster: ClusterConfig::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

fn check(ok: bool, what: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::param(format!("config: {what}")))
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.preprocess;
        check(p.smoothness >= 1, "preprocess.smoothness must be >= 1")?;
        check(p.gradient_window >= 1, "preprocess.gradient_window must be >= 1")?;
        check(p.superpixel_area >= 4.0, "preprocess.superpixel_area must be >= 4")?;
        check(p.compactness > 0.0, "preprocess.compactness must be > 0")?;
        check(p.slic_iterations >= 1, "preprocess.slic_iterations must be >= 1")?;
        check(
            0.0 <= p.low_percentile && p.low_percentile < p.high_percentile && p.high_percentile <= 1.0,
            "preprocess percentiles must satisfy 0 <= low < high <= 1",
        )?;
        let d = &self.dcae;
        check((0.0..1.0).contains(&d.dropout), "dcae.dropout must lie in [0, 1)")?;
        check(d.train.lr > 0.0 && d.fusion.lr > 0.0, "learning rates must be > 0")?;
        check(
            (0.0..1.0).contains(&d.train.momentum) && (0.0..1.0).contains(&d.fusion.momentum),
            "momentum must lie in [0, 1)",
        )?;
        check(d.train.batch_size >= 1 && d.fusion.batch_size >= 1, "batch sizes must be >= 1")?;
        check(d.train.chunk >= 1, "dcae.train.chunk must be >= 1")?;
        check((0.0..1.0).contains(&d.fusion.corruption), "dcae.fusion.corruption must lie in [0, 1)")?;
        let o = &self.ocsvm;
        check(o.nu > 0.0 && o.nu <= 1.0, "ocsvm.nu must lie in (0, 1]")?;
        check(o.tol > 0.0, "ocsvm.tol must be > 0")?;
        let c = &self.cluster;
        check(c.k_min >= 2 && c.k_max >= c.k_min, "cluster k range must satisfy 2 <= k_min <= k_max")?;
        check(c.restarts >= 1, "cluster.restarts must be >= 1")?;
        let m = &self.metrics;
        check(m.folds >= 2, "metrics.folds must be >= 2")?;
        check(m.per_class >= 1, "metrics.per_class must be >= 1")?;
        check(m.svm.c >= 0.0, "metrics.svm.c must be >= 0")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = PipelineConfig::default();
        assert_eq!(PipelineConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg = PipelineConfig::from_json(r#"{"seed": 7, "ocsvm": {"nu": 0.05}}"#).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.ocsvm.nu, 0.05);
        assert_eq!(cfg.metrics.folds, 5);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(PipelineConfig::from_json(r#"{"sed": 7}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"dcae": {"epoch": 3}}"#).is_err());
    }

    #[test]
    fn out_of_range_rejected() {
        assert!(PipelineConfig::from_json(r#"{"ocsvm": {"nu": 1.5}}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"dcae": {"dropout": 1.0}}"#).is_err());
    }
}
