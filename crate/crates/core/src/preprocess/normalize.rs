use crate::error::{Error, Result};

/// Linear-interpolated percentile of sorted values, `q` in `[0, 1]`.
fn percentile(sorted: &[f32], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let t = pos - lo as f64;
    sorted[lo] as f64 * (1.0 - t) + sorted[hi] as f64 * t
}

/// Maps the `low`/`high` percentiles of the intensities inside `mask` to 0/1 and
/// clamps to `[0, 1]`. A slice without spread inside the mask maps to 0.5.
pub fn normalize_slice_with(img: &[f32], mask: &[bool], low: f64, high: f64) -> Result<Vec<f32>> {
    if img.len() != mask.len() {
        return Err(Error::dim("slice and mask sizes differ"));
    }
    let mut vals: Vec<f32> = img.iter().zip(mask).filter(|(_, &m)| m).map(|(&v, _)| v).collect();
    if vals.is_empty() {
        return Err(Error::Input("retina mask is empty".into()));
    }
    vals.sort_unstable_by(f32::total_cmp);
    let lo = percentile(&vals, low);
    let hi = percentile(&vals, high);
    let span = hi - lo;
    if !(span > 1e-12 * hi.abs().max(lo.abs()).max(1e-30)) {
        return Ok(vec![0.5; img.len()]);
    }
    Ok(img
        .iter()
        .map(|&v| ((v as f64 - lo) / span).clamp(0.0, 1.0) as f32)
        .collect())
}

/// Brightness/contrast normalization with the 1st and 99th percentiles.
pub fn normalize_slice(img: &[f32], mask: &[bool]) -> Result<Vec<f32>> {
    normalize_slice_with(img, mask, 0.01, 0.99)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Rng;

    #[test]
    fn constant_slice_maps_to_half() {
        let out = normalize_slice(&[0.3; 20], &[true; 20]).unwrap();
        assert!(out.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn unit_span_slice_unchanged() {
        let img: Vec<f32> = (0..=100).map(|i| i as f32 / 100.0).collect();
        let mask = vec![true; img.len()];
        let out = normalize_slice_with(&img, &mask, 0.0, 1.0).unwrap();
        for (a, b) in img.iter().zip(&out) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn invariant_to_positive_affine_maps() {
        let mut rng = Rng::new(3);
        let img: Vec<f32> = (0..400).map(|_| rng.uniform() as f32).collect();
        let mask: Vec<bool> = (0..400).map(|i| i % 3 != 0).collect();
        let base = normalize_slice(&img, &mask).unwrap();
        let moved: Vec<f32> = img.iter().map(|v| 2.5 * v + 7.0).collect();
        let out = normalize_slice(&moved, &mask).unwrap();
        for (a, b) in base.iter().zip(&out) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn empty_mask_rejected() {
        assert!(normalize_slice(&[0.1, 0.2], &[false, false]).is_err());
    }
}
