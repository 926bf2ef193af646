//! Linear-kernel ν one-class SVM and superpixel-level anomaly maps.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Embedder;
use crate::patches::{extract_pair, Preset};
use crate::preprocess::Preprocessed;

/// Point the features are expressed relative to before scaling.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    /// Training mean. With a linear kernel this puts the origin inside the data
    /// and the optimal `w` collapses to zero.
    Mean,
    /// Raw feature origin.
    Zero,
    /// Embedding of an all-zero patch pair.
    #[default]
    EmptySignal,
}

/// Per-dimension affine map `(z - center) / scale`. Dimensions without
/// training variance map to 0.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    /// Scales by the training standard deviation; `center` defaults to zeros.
    pub fn fit<R: AsRef<[f32]>>(features: &[R], center: Option<&[f64]>) -> Result<Self> {
        let n = features.len();
        let d = features.first().map_or(0, |f| f.as_ref().len());
        if n == 0 || d == 0 || features.iter().any(|f| f.as_ref().len() != d) {
            return Err(Error::dim("features must be nonempty and share a dimension"));
        }
        let mut mean = vec![0.0; d];
        for f in features {
            for (m, &v) in mean.iter_mut().zip(f.as_ref()) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for f in features {
            for ((s, &v), m) in var.iter_mut().zip(f.as_ref()).zip(&mean) {
                *s += (v as f64 - m).powi(2);
            }
        }
        let scale = var
            .iter()
            .map(|&s| {
                let sd = (s / n as f64).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    f64::INFINITY
                }
            })
            .collect();
        let center = match center {
            Some(c) if c.len() != d => return Err(Error::dim("center dimension mismatch")),
            Some(c) => c.to_vec(),
            None => vec![0.0; d],
        };
        Ok(Self { center, scale })
    }

    /// Mean-centered variant.
    pub fn fit_centered<R: AsRef<[f32]>>(features: &[R]) -> Result<Self> {
        let d = features.first().map_or(0, |f| f.as_ref().len());
        let mut mean = vec![0.0; d];
        for f in features {
            for (m, &v) in mean.iter_mut().zip(f.as_ref()) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= features.len().max(1) as f64);
        Self::fit(features, Some(&mean))
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn apply(&self, z: &[f32]) -> Result<Vec<f64>> {
        if z.len() != self.dim() {
            return Err(Error::Usage(format!(
                "feature has {} values, model expects {}",
                z.len(),
                self.dim()
            )));
        }
        Ok(z
            .iter()
            .zip(&self.center)
            .zip(&self.scale)
            .map(|((&v, c), s)| if s.is_finite() { (v as f64 - c) / s } else { 0.0 })
            .collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OcSvmParams {
    pub nu: f64,
    /// Stop when the maximal KKT violation drops below this.
    pub tol: f64,
    pub max_iter: usize,
    pub origin: Origin,
}

impl Default for OcSvmParams {
    fn default() -> Self {
        Self {
            nu: 0.1,
            tol: 1e-6,
            max_iter: 1_000_000,
            origin: Origin::default(),
        }
    }
}

/// Solution of the one-class dual.
#[derive(Clone, Debug, PartialEq)]
pub struct DualSolution {
    pub alpha: Vec<f64>,
    pub w: Vec<f64>,
    pub rho: f64,
    pub iterations: usize,
    pub violation: f64,
    /// Number of support vectors strictly between the bounds.
    pub free: usize,
}

impl DualSolution {
    pub fn objective(&self) -> f64 {
        0.5 * self.w.iter().map(|v| v * v).sum::<f64>()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Minimizes `½ Σ αᵢαⱼ xᵢ·xⱼ` subject to `0 ≤ αᵢ ≤ 1/(νn)`, `Σ αᵢ = 1` by
/// maximal-violating-pair coordinate descent.
pub fn solve_dual(x: &[Vec<f64>], nu: f64, tol: f64, max_iter: usize) -> Result<DualSolution> {
    let n = x.len();
    if n < 2 {
        return Err(Error::param(format!("one-class SVM needs at least 2 points, got {n}")));
    }
    if !(nu > 0.0 && nu <= 1.0) {
        return Err(Error::param(format!("nu={nu} outside (0, 1]")));
    }
    if !(tol > 0.0) {
        return Err(Error::param("tolerance must be positive"));
    }
    let d = x[0].len();
    if x.iter().any(|r| r.len() != d) {
        return Err(Error::dim("points must share a dimension"));
    }
    let c = 1.0 / (nu * n as f64);
    let mut alpha = vec![1.0 / n as f64; n];
    let mut w = vec![0.0; d];
    for xi in x {
        for (wk, v) in w.iter_mut().zip(xi) {
            *wk += v / n as f64;
        }
    }
    let mut g: Vec<f64> = x.iter().map(|xi| dot(xi, &w)).collect();
    let sq: Vec<f64> = x.iter().map(|xi| dot(xi, xi)).collect();
    let at_upper = |a: f64| a >= c * (1.0 - 1e-12);
    let at_lower = |a: f64| a <= c * 1e-12;
    let mut iterations = 0;
    let mut violation;
    let mut diff = vec![0.0; d];
    loop {
        // i may grow (below C), j may shrink (above 0)
        let (mut i, mut gi) = (usize::MAX, f64::INFINITY);
        let (mut j, mut gj) = (usize::MAX, f64::NEG_INFINITY);
        for k in 0..n {
            if !at_upper(alpha[k]) && g[k] < gi {
                i = k;
                gi = g[k];
            }
            if !at_lower(alpha[k]) && g[k] > gj {
                j = k;
                gj = g[k];
            }
        }
        violation = if i == usize::MAX || j == usize::MAX { 0.0 } else { gj - gi };
        if violation <= tol {
            break;
        }
        if iterations >= max_iter {
            return Err(Error::Convergence { iterations, violation });
        }
        iterations += 1;
        let eta = sq[i] + sq[j] - 2.0 * dot(&x[i], &x[j]);
        let room = (c - alpha[i]).min(alpha[j]);
        let t = if eta > 1e-12 { ((gj - gi) / eta).min(room) } else { room };
        alpha[i] += t;
        alpha[j] -= t;
        if at_upper(alpha[i]) {
            alpha[i] = c;
        }
        if at_lower(alpha[j]) {
            alpha[j] = 0.0;
        }
        for ((dk, a), b) in diff.iter_mut().zip(&x[i]).zip(&x[j]) {
            *dk = t * (a - b);
        }
        for (wk, dk) in w.iter_mut().zip(&diff) {
            *wk += dk;
        }
        for (gk, xk) in g.iter_mut().zip(x) {
            *gk += dot(xk, &diff);
        }
    }
    // refresh from alpha to shed accumulated rounding
    w.iter_mut().for_each(|v| *v = 0.0);
    for (a, xi) in alpha.iter().zip(x) {
        for (wk, v) in w.iter_mut().zip(xi) {
            *wk += a * v;
        }
    }
    let g: Vec<f64> = x.iter().map(|xi| dot(xi, &w)).collect();
    let mut free: Vec<f64> = (0..n)
        .filter(|&k| !at_lower(alpha[k]) && !at_upper(alpha[k]))
        .map(|k| g[k])
        .collect();
    let n_free = free.len();
    let rho = if n_free > 0 {
        median(&mut free)
    } else {
        let upper = (0..n).filter(|&k| at_upper(alpha[k])).map(|k| g[k]).fold(f64::NEG_INFINITY, f64::max);
        let lower = (0..n).filter(|&k| at_lower(alpha[k])).map(|k| g[k]).fold(f64::INFINITY, f64::min);
        log::warn!("one-class SVM has no free support vectors; offset taken between bound groups");
        match (upper.is_finite(), lower.is_finite()) {
            (true, true) => 0.5 * (upper + lower),
            (true, false) => upper,
            (false, true) => lower,
            (false, false) => 0.0,
        }
    };
    Ok(DualSolution {
        alpha,
        w,
        rho,
        iterations,
        violation,
        free: n_free,
    })
}

/// Fitted boundary: `f(z) = w · standardize(z) - rho`.
#[derive(Clone, Debug, PartialEq)]
pub struct OcSvmModel {
    pub w: Vec<f64>,
    pub rho: f64,
    pub nu: f64,
    pub standardizer: Standardizer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Normal,
    Anomaly,
}

/// Fits the one-class SVM on healthy features. `empty_signal` is required for
/// [`Origin::EmptySignal`].
pub fn fit_ocsvm<R: AsRef<[f32]> + Sync>(
    features: &[R],
    params: &OcSvmParams,
    empty_signal: Option<&[f32]>,
) -> Result<(OcSvmModel, DualSolution)> {
    if features.len() < 2 {
        return Err(Error::param(format!(
            "one-class SVM needs at least 2 points, got {}",
            features.len()
        )));
    }
    let standardizer = match params.origin {
        Origin::Mean => Standardizer::fit_centered(features)?,
        Origin::Zero => Standardizer::fit(features, None)?,
        Origin::EmptySignal => {
            let e = empty_signal.ok_or_else(|| Error::Usage("empty-signal origin needs the embedding of an empty patch".into()))?;
            let e: Vec<f64> = e.iter().map(|&v| v as f64).collect();
            Standardizer::fit(features, Some(&e))?
        }
    };
    let x: Vec<Vec<f64>> = features
        .par_iter()
        .map(|f| standardizer.apply(f.as_ref()))
        .collect::<Result<_>>()?;
    let sol = solve_dual(&x, params.nu, params.tol, params.max_iter)?;
    let model = OcSvmModel {
        w: sol.w.clone(),
        rho: sol.rho,
        nu: params.nu,
        standardizer,
    };
    Ok((model, sol))
}

impl OcSvmModel {
    pub fn dim(&self) -> usize {
        self.w.len()
    }

    pub fn decision(&self, z: &[f32]) -> Result<f64> {
        Ok(dot(&self.w, &self.standardizer.apply(z)?) - self.rho)
    }

    /// Scores a feature; a score of exactly 0 is normal.
    pub fn score(&self, z: &[f32]) -> Result<(Label, f64)> {
        let s = self.decision(z)?;
        Ok((if s < 0.0 { Label::Anomaly } else { Label::Normal }, s))
    }
}

/// Per-superpixel decision of one volume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuperpixelScore {
    pub slice: usize,
    pub superpixel: usize,
    pub score: f64,
    pub label: Label,
}

/// Superpixel labels of one volume and the derived pixel mask in flattened rows.
#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyMap {
    pub width: usize,
    pub height: usize,
    pub slices: usize,
    pub scores: Vec<SuperpixelScore>,
    /// 0 unlabeled (outside the retina), 1 normal, 2 anomaly; flattened coordinates.
    pub pixels: Vec<u8>,
}

pub const PIXEL_UNLABELED: u8 = 0;
pub const PIXEL_NORMAL: u8 = 1;
pub const PIXEL_ANOMALY: u8 = 2;

impl AnomalyMap {
    pub fn anomaly_fraction(&self) -> f64 {
        let n = self.scores.len().max(1) as f64;
        self.scores.iter().filter(|s| s.label == Label::Anomaly).count() as f64 / n
    }

    /// Pixel labels moved back to original (unflattened) rows.
    pub fn to_original(&self, pre: &Preprocessed) -> Vec<u8> {
        let (w, h) = (self.width, self.height);
        let mut out = vec![PIXEL_UNLABELED; self.pixels.len()];
        for s in 0..self.slices {
            for c in 0..w {
                let shift = pre.shift_at(s, c);
                for r in shift..h {
                    out[(s * h + r - shift) * w + c] = self.pixels[(s * h + r) * w + c];
                }
            }
        }
        out
    }

    /// Binary anomaly mask in original rows.
    pub fn anomaly_mask(&self, pre: &Preprocessed) -> Vec<bool> {
        self.to_original(pre).into_iter().map(|p| p == PIXEL_ANOMALY).collect()
    }
}

/// Embeds and scores every in-retina superpixel of a preprocessed volume.
pub fn segment_volume<E: Embedder + ?Sized>(
    model: &OcSvmModel,
    embedder: &E,
    pre: &Preprocessed,
    preset: Preset,
) -> Result<AnomalyMap> {
    let sps: Vec<_> = pre.retina_superpixels().collect();
    let scores: Vec<SuperpixelScore> = sps
        .par_iter()
        .map(|sp| {
            let pair = extract_pair(&pre.volume, sp.slice, sp.center(), preset);
            let (label, score) = model.score(&embedder.embed(&pair)?)?;
            Ok(SuperpixelScore {
                slice: sp.slice,
                superpixel: sp.id,
                score,
                label,
            })
        })
        .collect::<Result<_>>()?;
    let v = &pre.volume;
    let mut pixels = vec![PIXEL_UNLABELED; v.data.len()];
    for (sp, sc) in sps.iter().zip(&scores) {
        let value = match sc.label {
            Label::Normal => PIXEL_NORMAL,
            Label::Anomaly => PIXEL_ANOMALY,
        };
        let base = sp.slice * v.slice_len();
        for &p in &sp.pixels {
            pixels[base + p as usize] = value;
        }
    }
    Ok(AnomalyMap {
        width: v.width,
        height: v.height,
        slices: v.slices,
        scores,
        pixels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Rng;

    fn gaussian(n: usize, d: usize, offset: f64, seed: u64) -> Vec<Vec<f32>> {
        let mut rng = Rng::new(seed);
        (0..n).map(|_| (0..d).map(|_| (offset + rng.normal()) as f32).collect()).collect()
    }

    fn zero_origin(nu: f64) -> OcSvmParams {
        OcSvmParams {
            nu,
            tol: 1e-9,
            origin: Origin::Zero,
            ..Default::default()
        }
    }

    #[test]
    fn rejects_single_point() {
        assert!(fit_ocsvm(&[vec![1.0f32, 2.0]], &zero_origin(0.5), None).is_err());
    }

    #[test]
    fn two_identical_points_sit_on_the_boundary() {
        for nu in [0.1, 0.5, 1.0] {
            let pts = vec![vec![1.0f32, -2.0, 0.5]; 2];
            let (m, _) = fit_ocsvm(&pts, &zero_origin(nu), None).unwrap();
            assert!(m.decision(&pts[0]).unwrap().abs() < 1e-12);
            assert_eq!(m.score(&pts[0]).unwrap().0, Label::Normal);
        }
        let pts = vec![vec![3.0], vec![3.0]];
        let sol = solve_dual(&pts, 0.5, 1e-12, 100).unwrap();
        assert!((sol.rho - 9.0).abs() < 1e-12);
        assert!(sol.alpha.iter().all(|&a| (a - 0.5).abs() < 1e-12));
    }

    #[test]
    fn nu_property_on_offset_gaussian() {
        let pts = gaussian(100, 2, 3.0, 11);
        let (m, sol) = fit_ocsvm(&pts, &zero_origin(0.5), None).unwrap();
        let out = pts.iter().filter(|p| m.decision(p).unwrap() < 0.0).count() as f64 / 100.0;
        assert!((0.4..=0.5).contains(&out), "outlier fraction {out}");
        assert!((sol.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn mean_origin_collapses_the_boundary() {
        let pts = gaussian(200, 4, 3.0, 12);
        let p = OcSvmParams {
            origin: Origin::Mean,
            ..zero_origin(0.5)
        };
        let (m, _) = fit_ocsvm(&pts, &p, None).unwrap();
        assert!(m.w.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn free_support_vectors_score_zero() {
        let pts = gaussian(60, 3, 2.0, 13);
        let (m, sol) = fit_ocsvm(&pts, &zero_origin(0.3), None).unwrap();
        let c = 1.0 / (0.3 * 60.0);
        let wn = m.w.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut seen = 0;
        for (a, p) in sol.alpha.iter().zip(&pts) {
            if *a > 1e-9 && *a < c - 1e-9 {
                let s = m.decision(p).unwrap();
                assert!(s.abs() <= 1e-6 * wn.max(1.0), "free SV score {s}");
                seen += 1;
            }
        }
        assert!(seen > 0);
    }

    #[test]
    fn far_points_along_w() {
        let pts = gaussian(50, 3, 2.0, 14);
        let (m, _) = fit_ocsvm(&pts, &zero_origin(0.2), None).unwrap();
        let far = |sign: f64| -> Vec<f32> {
            m.w.iter()
                .zip(&m.standardizer.scale)
                .map(|(w, s)| (sign * 1e3 * w * s) as f32)
                .collect()
        };
        assert_eq!(m.score(&far(1.0)).unwrap().0, Label::Normal);
        assert_eq!(m.score(&far(-1.0)).unwrap().0, Label::Anomaly);
        assert!(matches!(m.score(&[1.0]), Err(Error::Usage(_))));
    }

    #[test]
    fn empty_signal_origin_needs_reference() {
        let pts = gaussian(10, 2, 1.0, 15);
        let p = OcSvmParams::default();
        assert!(matches!(fit_ocsvm(&pts, &p, None), Err(Error::Usage(_))));
        assert!(fit_ocsvm(&pts, &p, Some(&[0.0, 0.0])).is_ok());
    }

    #[test]
    fn non_convergence_reports_violation() {
        let pts: Vec<Vec<f64>> = (0..30).map(|i| vec![1.0 + i as f64, (i * i % 7) as f64]).collect();
        match solve_dual(&pts, 0.2, 1e-12, 2) {
            Err(Error::Convergence { iterations, violation }) => {
                assert_eq!(iterations, 2);
                assert!(violation > 1e-12);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
