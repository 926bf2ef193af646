//! PCA embeddings used as the comparison baselines.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Embedder;
use crate::numcore::{pca_fit, PcaMode, PcaModel};
use crate::patches::{PatchDataset, PatchPair, Preset};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    /// A preset-dependent fixed number of components per scale.
    Fixed,
    /// Components reaching 95% of the variance per scale.
    Variance,
}

impl BaselineMode {
    pub fn pca_mode(self, preset: Preset) -> PcaMode {
        match self {
            BaselineMode::Fixed => PcaMode::FixedK(fixed_components(preset)),
            BaselineMode::Variance => PcaMode::VarianceFrac(0.95),
        }
    }
}

/// Components kept per scale in fixed mode.
pub fn fixed_components(preset: Preset) -> usize {
    match preset {
        Preset::Paper => 128,
        Preset::Desk => 16,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PcaBaseline {
    pub mode: BaselineMode,
    pub preset: Preset,
    pub scale1: PcaModel<f32>,
    pub scale2: PcaModel<f32>,
}

/// Fits one PCA per scale on the flattened patches.
pub fn fit_pca_baseline(dataset: &PatchDataset, mode: BaselineMode, preset: Preset) -> Result<PcaBaseline> {
    if dataset.preset != preset {
        return Err(Error::param(format!(
            "dataset built for {} patches, baseline requested for {}",
            dataset.preset.as_str(),
            preset.as_str()
        )));
    }
    let pm = mode.pca_mode(preset);
    if let PcaMode::FixedK(k) = pm {
        if dataset.len() < k {
            return Err(Error::Fitting(format!(
                "{} samples cannot support {k} components",
                dataset.len()
            )));
        }
    }
    let s1: Vec<&[f32]> = dataset.pairs.iter().map(|p| p.scale1.as_slice()).collect();
    let s2: Vec<&[f32]> = dataset.pairs.iter().map(|p| p.scale2.as_slice()).collect();
    let (scale1, scale2) = rayon::join(|| pca_fit(&s1, pm), || pca_fit(&s2, pm));
    Ok(PcaBaseline {
        mode,
        preset,
        scale1: scale1?,
        scale2: scale2?,
    })
}

impl PcaBaseline {
    pub fn name(&self) -> String {
        match self.mode {
            BaselineMode::Fixed => format!("PCA_{}", self.dim()),
            BaselineMode::Variance => "PCA_0.95".to_string(),
        }
    }

    pub fn embed_many(&self, pairs: &[PatchPair]) -> Result<Vec<Vec<f32>>> {
        pairs.par_iter().map(|p| self.embed(p)).collect()
    }
}

impl Embedder for PcaBaseline {
    fn dim(&self) -> usize {
        self.scale1.n_components() + self.scale2.n_components()
    }

    fn embed(&self, pair: &PatchPair) -> Result<Vec<f32>> {
        let mut z = self.scale1.project(&pair.scale1)?;
        z.extend(self.scale2.project(&pair.scale2)?);
        Ok(z)
    }
}
