//! Volume preprocessing: surface detection, flattening, intensity
//! normalization and superpixel over-segmentation.

mod normalize;
mod slic;
mod surfaces;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::volume::Volume;

pub use normalize::{normalize_slice, normalize_slice_with};
pub use slic::{slic_superpixels, SlicParams, Superpixel};
pub use surfaces::{flatten, segment_slice, segment_surfaces, Flattened, SurfacePair, SurfaceParams};

/// Sets `in_retina` from the centroid row at the rounded centroid column, inclusive on both surfaces.
pub fn mark_retina(superpixels: &mut [Superpixel], surfaces: &SurfacePair) {
    for sp in superpixels.iter_mut() {
        let col = (sp.centroid.1.round() as usize).min(surfaces.width - 1);
        let top = surfaces.top_at(sp.slice, col) as f64;
        let bottom = surfaces.bottom_at(sp.slice, col) as f64;
        sp.in_retina = sp.centroid.0 >= top && sp.centroid.0 <= bottom;
    }
}

/// Pixels whose percentiles set the intensity normalization of a slice.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormRegion {
    /// Only the retina band. Dark pathology covering more than the low
    /// percentile of the band drags the black point with it.
    Band,
    /// Every pixel that holds image data after flattening.
    #[default]
    Slice,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub smoothness: usize,
    pub gradient_window: usize,
    pub min_thickness: usize,
    pub superpixel_area: f64,
    pub compactness: f64,
    pub slic_iterations: usize,
    pub low_percentile: f64,
    pub high_percentile: f64,
    pub norm_region: NormRegion,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        let s = SurfaceParams::default();
        let p = SlicParams::default();
        Self {
            smoothness: s.smoothness,
            gradient_window: s.gradient_window,
            min_thickness: s.min_thickness,
            superpixel_area: p.target_area,
            compactness: p.compactness,
            slic_iterations: p.iterations,
            low_percentile: 0.01,
            high_percentile: 0.99,
            norm_region: NormRegion::Slice,
        }
    }
}

impl PreprocessConfig {
    pub fn surface_params(&self) -> SurfaceParams {
        SurfaceParams {
            smoothness: self.smoothness,
            gradient_window: self.gradient_window,
            min_thickness: self.min_thickness,
        }
    }

    pub fn slic_params(&self) -> SlicParams {
        SlicParams {
            target_area: self.superpixel_area,
            compactness: self.compactness,
            iterations: self.slic_iterations,
        }
    }
}

/// A volume after the full preprocessing chain. Intensities are flattened and
/// normalized to `[0, 1]`; surfaces are in flattened rows.
#[derive(Clone, Debug)]
pub struct Preprocessed {
    pub volume: Volume,
    pub surfaces: SurfacePair,
    /// Downward shift per (slice, column) that maps original rows to flattened rows.
    pub shifts: Vec<usize>,
    /// Superpixels per slice, ids in grid order.
    pub superpixels: Vec<Vec<Superpixel>>,
}

impl Preprocessed {
    pub fn shift_at(&self, slice: usize, col: usize) -> usize {
        self.shifts[slice * self.volume.width + col]
    }

    pub fn retina_superpixels(&self) -> impl Iterator<Item = &Superpixel> {
        self.superpixels.iter().flatten().filter(|s| s.in_retina)
    }

    /// Maps a flattened (row, col) of `slice` back to the original row, `None` for padding rows.
    pub fn original_row(&self, slice: usize, row: usize, col: usize) -> Option<usize> {
        row.checked_sub(self.shift_at(slice, col))
    }
}

/// Pixels of a flattened slice that were not vacated by the column shifts.
pub fn valid_mask(shifts: &[usize], height: usize) -> Vec<bool> {
    let w = shifts.len();
    let mut mask = vec![false; w * height];
    for (c, &shift) in shifts.iter().enumerate() {
        for r in shift.min(height)..height {
            mask[r * w + c] = true;
        }
    }
    mask
}

pub fn preprocess_volume(volume: &Volume, cfg: &PreprocessConfig) -> Result<Preprocessed> {
    let surfaces = segment_surfaces(volume, &cfg.surface_params())?;
    let Flattened {
        volume: mut flat,
        surfaces,
        shifts,
    } = flatten(volume, &surfaces);
    let (w, h) = (flat.width, flat.height);
    let slic = cfg.slic_params();
    let per_slice: Vec<(Vec<f32>, Vec<Superpixel>)> = (0..flat.slices)
        .into_par_iter()
        .map(|s| {
            let mask = match cfg.norm_region {
                NormRegion::Band => surfaces.band_mask(s, h),
                NormRegion::Slice => valid_mask(&shifts[s * w..(s + 1) * w], h),
            };
            let img = normalize_slice_with(flat.slice(s), &mask, cfg.low_percentile, cfg.high_percentile)?;
            let mut sps = slic_superpixels(&img, w, h, s, &slic)?;
            mark_retina(&mut sps, &surfaces);
            Ok((img, sps))
        })
        .collect::<Result<_>>()?;
    let mut superpixels = Vec::with_capacity(per_slice.len());
    for (s, (img, sps)) in per_slice.into_iter().enumerate() {
        flat.slice_mut(s).copy_from_slice(&img);
        superpixels.push(sps);
    }
    Ok(Preprocessed {
        volume: flat,
        surfaces,
        shifts,
        superpixels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_volume, PhantomConfig};

    fn sp_at(row: f64, col: f64) -> Superpixel {
        Superpixel {
            id: 0,
            slice: 0,
            pixels: vec![0],
            centroid: (row, col),
            in_retina: false,
        }
    }

    fn band(top: usize, bottom: usize) -> SurfacePair {
        SurfacePair {
            width: 4,
            slices: 1,
            top: vec![top; 4],
            bottom: vec![bottom; 4],
        }
    }

    #[test]
    fn valid_mask_skips_vacated_rows() {
        let m = valid_mask(&[0, 2], 3);
        assert_eq!(m, vec![true, false, true, false, true, true]);
    }

    /// Healthy tissue keeps its normalized values when dark pathology fills part
    /// of the band, as long as the percentiles come from the whole slice.
    #[test]
    fn slice_region_resists_dark_pathology() {
        let (w, h) = (40usize, 40usize);
        let mut rng = crate::numcore::Rng::new(3);
        let base: Vec<f32> = (0..w * h)
            .map(|i| {
                let r = i / w;
                let level = match r {
                    0..=9 => 0.05,
                    10..=16 => 0.3,
                    17..=23 => 0.6,
                    24..=29 => 0.9,
                    _ => 0.2,
                };
                (level * rng.uniform_in(0.7, 1.3)) as f32
            })
            .collect();
        let blob = |i: usize| (12..=19).contains(&(i / w)) && (5..=12).contains(&(i % w));
        let sick: Vec<f32> = base.iter().enumerate().map(|(i, &v)| if blob(i) { 0.01 } else { v }).collect();
        let band: Vec<bool> = (0..w * h).map(|i| (10..30).contains(&(i / w))).collect();
        let all = vec![true; w * h];
        let drift = |mask: &[bool]| {
            let a = normalize_slice_with(&base, mask, 0.01, 0.99).unwrap();
            let b = normalize_slice_with(&sick, mask, 0.01, 0.99).unwrap();
            (0..w * h)
                .filter(|&i| band[i] && !blob(i))
                .map(|i| (a[i] - b[i]).abs())
                .fold(0.0f32, f32::max)
        };
        assert!(drift(&band) > 0.1, "band drift {}", drift(&band));
        assert!(drift(&all) < 0.02, "slice drift {}", drift(&all));
    }

    #[test]
    fn retina_membership_rules() {
        let mut sps = vec![sp_at(9.0, 1.0), sp_at(10.0, 1.0), sp_at(20.0, 2.0), sp_at(20.2, 2.0)];
        mark_retina(&mut sps, &band(10, 20));
        let flags: Vec<bool> = sps.iter().map(|s| s.in_retina).collect();
        assert_eq!(flags, vec![false, true, true, false]);
    }

    #[test]
    fn phantom_pipeline() {
        let (vol, _) = generate_volume(&PhantomConfig::desk().with_seed(11)).unwrap();
        let pre = preprocess_volume(&vol, &PreprocessConfig::default()).unwrap();
        assert!(pre.volume.data.iter().all(|v| (0.0..=1.0).contains(v)));
        let (w, h) = (vol.width, vol.height);
        let mut band_px = 0usize;
        let mut sp_count = 0usize;
        for s in 0..vol.slices {
            let sps = &pre.superpixels[s];
            let mean_area = (w * h) as f64 / sps.len() as f64;
            assert!((mean_area - 16.0).abs() <= 4.0, "mean area {mean_area}");
            band_px += pre.surfaces.band_mask(s, h).iter().filter(|&&m| m).count();
            sp_count += sps.len();
        }
        let px_frac = band_px as f64 / (vol.slices * w * h) as f64;
        let sp_frac = pre.retina_superpixels().count() as f64 / sp_count as f64;
        assert!((px_frac - sp_frac).abs() <= 0.05, "{px_frac} vs {sp_frac}");
    }
}
