//! Two-scale patch pairs centered on superpixel centroids.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Rng;
use crate::phantom::Split;
use crate::preprocess::Preprocessed;
use crate::volume::Volume;

/// Model size preset. `Paper` uses 32 px patches, `Desk` 16 px.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Desk,
    Paper,
}

impl Preset {
    /// Side of the square scale-1 patch.
    pub fn side(self) -> usize {
        match self {
            Preset::Desk => 16,
            Preset::Paper => 32,
        }
    }

    /// Width of the scale-2 crop before downsampling.
    pub fn wide(self) -> usize {
        4 * self.side()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSource {
    pub volume: usize,
    pub patient: usize,
    pub slice: usize,
    pub superpixel: usize,
}

/// Co-located patches: `scale1` is `side x side`, `scale2` is a `side x 4*side`
/// crop mean-pooled 1x4 down to `side x side`. Both row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair {
    pub scale1: Vec<f32>,
    pub scale2: Vec<f32>,
    pub source: PatchSource,
}

#[inline]
fn clamp_index(v: isize, n: usize) -> usize {
    v.clamp(0, n as isize - 1) as usize
}

/// Crops both scales around `center`; pixels outside the slice replicate the nearest edge.
/// The center pixel sits at (side/2, side/2) of both patches.
pub fn extract_pair(volume: &Volume, slice: usize, center: (usize, usize), preset: Preset) -> PatchPair {
    let s = preset.side();
    let (w, h) = (volume.width, volume.height);
    let img = volume.slice(slice);
    let (r0, c0) = (center.0 as isize - (s / 2) as isize, center.1 as isize - (s / 2) as isize);
    let wc0 = center.1 as isize - (preset.wide() / 2) as isize;
    let mut scale1 = Vec::with_capacity(s * s);
    let mut scale2 = Vec::with_capacity(s * s);
    for i in 0..s {
        let row = &img[clamp_index(r0 + i as isize, h) * w..][..w];
        for j in 0..s {
            scale1.push(row[clamp_index(c0 + j as isize, w)]);
        }
        for j in 0..s {
            let base = wc0 + 4 * j as isize;
            let sum: f32 = (0..4).map(|k| row[clamp_index(base + k, w)]).sum();
            scale2.push(sum / 4.0);
        }
    }
    PatchPair {
        scale1,
        scale2,
        source: PatchSource {
            slice,
            ..Default::default()
        },
    }
}

/// One preprocessed volume feeding [`build_dataset`].
#[derive(Clone, Copy)]
pub struct DatasetInput<'a> {
    pub volume: usize,
    pub patient: usize,
    pub data: &'a Preprocessed,
}

#[derive(Clone, Debug)]
pub struct PatchDataset {
    pub split: Split,
    pub preset: Preset,
    pub pairs: Vec<PatchPair>,
}

impl PatchDataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn patients(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.source.patient).collect()
    }
}

/// Every in-retina superpixel of the inputs, in (volume, slice, superpixel) order.
pub fn retina_sources(inputs: &[DatasetInput<'_>]) -> Vec<(usize, PatchSource)> {
    let mut out = Vec::new();
    for (k, inp) in inputs.iter().enumerate() {
        for sp in inp.data.retina_superpixels() {
            out.push((
                k,
                PatchSource {
                    volume: inp.volume,
                    patient: inp.patient,
                    slice: sp.slice,
                    superpixel: sp.id,
                },
            ));
        }
    }
    out.sort_by_key(|(_, s)| (s.volume, s.slice, s.superpixel));
    out
}

/// One pair per in-retina superpixel centroid. With `cap`, a uniform subsample of that
/// size is drawn from `rng`; ordering stays (volume, slice, superpixel).
pub fn build_dataset(
    inputs: &[DatasetInput<'_>],
    split: Split,
    preset: Preset,
    cap: Option<usize>,
    rng: &mut Rng,
) -> Result<PatchDataset> {
    let mut sources = retina_sources(inputs);
    if sources.is_empty() {
        return Err(Error::EmptyDataset(format!("no in-retina superpixels in the {} split", split.as_str())));
    }
    if let Some(cap) = cap {
        if cap < sources.len() {
            let keep = rng.sample_indices(sources.len(), cap);
            sources = keep.into_iter().map(|i| sources[i]).collect();
        }
    }
    let pairs = sources
        .par_iter()
        .map(|&(k, src)| {
            let data = inputs[k].data;
            let sp = &data.superpixels[src.slice][src.superpixel];
            let mut pair = extract_pair(&data.volume, src.slice, sp.center(), preset);
            pair.source = src;
            pair
        })
        .collect();
    Ok(PatchDataset { split, preset, pairs })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_volume(seed: u64, w: usize, h: usize) -> Volume {
        let mut rng = Rng::new(seed);
        let data = (0..w * h).map(|_| rng.uniform() as f32).collect();
        Volume::from_data(w, h, 1, data).unwrap()
    }

    #[test]
    fn constant_slice_constant_patches() {
        let v = Volume::from_data(40, 30, 1, vec![0.25; 1200]).unwrap();
        let p = extract_pair(&v, 0, (2, 38), Preset::Desk);
        assert_eq!(p.scale1.len(), 256);
        assert!(p.scale1.iter().chain(&p.scale2).all(|&x| x == 0.25));
    }

    #[test]
    fn column_constant_slice_scales_agree() {
        let (w, h) = (100, 50);
        let data = (0..w * h).map(|i| (i / w) as f32 / h as f32).collect();
        let v = Volume::from_data(w, h, 1, data).unwrap();
        let p = extract_pair(&v, 0, (25, 50), Preset::Desk);
        assert_eq!(p.scale1, p.scale2);
    }

    #[test]
    fn scale2_matches_pool_oracle() {
        let v = random_volume(4, 90, 60);
        for &center in &[(30, 45), (0, 0), (59, 89), (10, 70)] {
            let p = extract_pair(&v, 0, center, Preset::Desk);
            let s = 16isize;
            for i in 0..16 {
                for j in 0..16 {
                    let mut acc = 0.0f64;
                    for k in 0..4 {
                        let r = (center.0 as isize - s / 2 + i).clamp(0, 59) as usize;
                        let c = (center.1 as isize - 2 * s + 4 * j + k).clamp(0, 89) as usize;
                        acc += v.get(0, r, c) as f64;
                    }
                    assert!((p.scale2[(i * 16 + j) as usize] as f64 - acc / 4.0).abs() <= 1e-6);
                    let r = (center.0 as isize - s / 2 + i).clamp(0, 59) as usize;
                    let c = (center.1 as isize - s / 2 + j).clamp(0, 89) as usize;
                    assert_eq!(p.scale1[(i * 16 + j) as usize], v.get(0, r, c));
                }
            }
        }
    }

    #[test]
    fn center_pixel_coincides() {
        let v = random_volume(8, 200, 80);
        let p = extract_pair(&v, 0, (40, 100), Preset::Paper);
        assert_eq!(p.scale1.len(), 32 * 32);
        assert_eq!(p.scale1[16 * 32 + 16], v.get(0, 40, 100));
        let wide: f32 = (0..4).map(|k| v.get(0, 40, 100 + k)).sum::<f32>() / 4.0;
        assert!((p.scale2[16 * 32 + 16] - wide).abs() < 1e-6);
    }
}
