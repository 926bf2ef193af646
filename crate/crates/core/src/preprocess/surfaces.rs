//! Per-slice retina surface detection by dynamic programming over columns.

use crate::error::{Error, Result};
use crate::volume::Volume;

/// Top and bottom retina rows per (slice, column).
///
/// `top` is the first retina row and `bottom` the last one, both inclusive.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SurfacePair {
    pub width: usize,
    pub slices: usize,
    pub top: Vec<usize>,
    pub bottom: Vec<usize>,
}

impl SurfacePair {
    #[inline]
    pub fn top_at(&self, slice: usize, col: usize) -> usize {
        self.top[slice * self.width + col]
    }

    #[inline]
    pub fn bottom_at(&self, slice: usize, col: usize) -> usize {
        self.bottom[slice * self.width + col]
    }

    pub fn contains(&self, slice: usize, row: usize, col: usize) -> bool {
        row >= self.top_at(slice, col) && row <= self.bottom_at(slice, col)
    }

    /// Per-pixel retina mask of one slice, row-major.
    pub fn band_mask(&self, slice: usize, height: usize) -> Vec<bool> {
        let w = self.width;
        let mut m = vec![false; w * height];
        for c in 0..w {
            for r in self.top_at(slice, c)..=self.bottom_at(slice, c).min(height - 1) {
                m[r * w + c] = true;
            }
        }
        m
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfaceParams {
    /// Maximum row change between adjacent columns.
    pub smoothness: usize,
    /// Rows averaged on each side of a candidate edge.
    pub gradient_window: usize,
    /// Minimum rows between the top and bottom surfaces.
    pub min_thickness: usize,
}

impl Default for SurfaceParams {
    fn default() -> Self {
        Self {
            smoothness: 2,
            gradient_window: 3,
            min_thickness: 8,
        }
    }
}

/// Edge strength at every (row, col): mean of `window` rows below minus mean of
/// `window` rows above the boundary between `row - 1` and `row`.
fn vertical_edges(img: &[f32], w: usize, h: usize, window: usize) -> Vec<f64> {
    let mut g = vec![0f64; w * h];
    for c in 0..w {
        let mut prefix = vec![0f64; h + 1];
        for r in 0..h {
            prefix[r + 1] = prefix[r] + img[r * w + c] as f64;
        }
        for r in 1..h {
            let lo = r.saturating_sub(window);
            let hi = (r + window).min(h);
            let above = (prefix[r] - prefix[lo]) / (r - lo) as f64;
            let below = (prefix[hi] - prefix[r]) / (hi - r) as f64;
            g[r * w + c] = below - above;
        }
    }
    g
}

/// Minimum-cost path with `|row(c+1) - row(c)| <= smoothness`; ties go to the lowest row.
fn dp_path(cost: &[f64], w: usize, h: usize, smoothness: usize) -> Option<Vec<usize>> {
    let mut acc: Vec<f64> = (0..h).map(|r| cost[r * w]).collect();
    let mut back = vec![0u32; w * h];
    let mut next = vec![0f64; h];
    for c in 1..w {
        for r in 0..h {
            let lo = r.saturating_sub(smoothness);
            let hi = (r + smoothness).min(h - 1);
            let mut best = f64::INFINITY;
            let mut arg = lo;
            for p in lo..=hi {
                if acc[p] < best {
                    best = acc[p];
                    arg = p;
                }
            }
            next[r] = best + cost[r * w + c];
            back[r * w + c] = arg as u32;
        }
        std::mem::swap(&mut acc, &mut next);
    }
    let (mut r, best) = acc
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |(br, bv), (r, &v)| if v < bv { (r, v) } else { (br, bv) });
    if !best.is_finite() {
        return None;
    }
    let mut path = vec![0usize; w];
    for c in (0..w).rev() {
        path[c] = r;
        if c > 0 {
            r = back[r * w + c] as usize;
        }
    }
    Some(path)
}

/// Detects the top (dark-to-bright) and bottom (bright-to-dark, below the top)
/// surfaces of one `h x w` slice.
pub fn segment_slice(
    img: &[f32],
    w: usize,
    h: usize,
    slice: usize,
    params: &SurfaceParams,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if h < 8 {
        return Err(Error::Segmentation {
            slice,
            reason: format!("needs at least 8 rows, got {h}"),
        });
    }
    let g = vertical_edges(img, w, h, params.gradient_window.max(1));
    let peak = g.iter().fold(0f64, |m, v| m.max(v.abs()));
    if peak <= 1e-9 {
        return Err(Error::Segmentation {
            slice,
            reason: "no gradient evidence (degenerate cost image)".into(),
        });
    }
    let top_cost: Vec<f64> = g.iter().map(|&v| -v.max(0.0)).collect();
    let top = dp_path(&top_cost, w, h, params.smoothness).ok_or_else(|| Error::Segmentation {
        slice,
        reason: "no top path within smoothness bound".into(),
    })?;
    // an edge at row r puts the last retina row at r - 1
    let mut bottom_cost = vec![f64::INFINITY; w * h];
    for c in 0..w {
        for r in (top[c] + params.min_thickness + 1).min(h)..h {
            bottom_cost[r * w + c] = -(-g[r * w + c]).max(0.0);
        }
    }
    let edge = dp_path(&bottom_cost, w, h, params.smoothness).ok_or_else(|| Error::Segmentation {
        slice,
        reason: "no bottom path within smoothness bound".into(),
    })?;
    let bottom = edge.iter().map(|&r| r - 1).collect();
    Ok((top, bottom))
}

/// Runs [`segment_slice`] on every slice of `volume`.
pub fn segment_surfaces(volume: &Volume, params: &SurfaceParams) -> Result<SurfacePair> {
    use rayon::prelude::*;
    let (w, h) = (volume.width, volume.height);
    let per_slice: Vec<(Vec<usize>, Vec<usize>)> = (0..volume.slices)
        .into_par_iter()
        .map(|s| segment_slice(volume.slice(s), w, h, s, params))
        .collect::<Result<_>>()?;
    let mut pair = SurfacePair {
        width: w,
        slices: volume.slices,
        top: Vec::with_capacity(w * volume.slices),
        bottom: Vec::with_capacity(w * volume.slices),
    };
    for (t, b) in per_slice {
        pair.top.extend(t);
        pair.bottom.extend(b);
    }
    Ok(pair)
}

/// Result of [`flatten`]: the shifted volume, surfaces in flattened rows, and the
/// downward shift applied to every (slice, column).
#[derive(Clone, Debug, PartialEq)]
pub struct Flattened {
    pub volume: Volume,
    pub surfaces: SurfacePair,
    pub shifts: Vec<usize>,
}

/// Shifts every column down so the bottom surface lies on the volume's deepest bottom row.
pub fn flatten(volume: &Volume, surfaces: &SurfacePair) -> Flattened {
    let (w, h) = (volume.width, volume.height);
    let target = surfaces.bottom.iter().copied().max().unwrap_or(0);
    let mut out = Volume::zeros(w, h, volume.slices);
    let mut shifts = vec![0usize; surfaces.bottom.len()];
    let mut flat = surfaces.clone();
    for s in 0..volume.slices {
        for c in 0..w {
            let i = s * w + c;
            let shift = target - surfaces.bottom[i];
            shifts[i] = shift;
            for r in 0..h - shift {
                let j = out.index(s, r + shift, c);
                out.data[j] = volume.get(s, r, c);
            }
            flat.top[i] = (surfaces.top[i] + shift).min(h - 1);
            flat.bottom[i] = target;
        }
    }
    Flattened {
        volume: out,
        surfaces: flat,
        shifts,
    }
}
