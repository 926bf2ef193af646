//! Principal component analysis on mean-centered data.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Scalar, Tensor};

/// How many components to keep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "value", rename_all = "snake_case")]
pub enum PcaMode {
    FixedK(usize),
    /// Smallest prefix of components whose eigenvalue sum reaches this fraction of the total.
    VarianceFrac(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PcaModel<T> {
    pub mean: Vec<T>,
    /// Kept components, one unit-norm row per component.
    pub components: Vec<Vec<T>>,
    /// Eigenvalues of the kept components, descending.
    pub eigenvalues: Vec<f64>,
    /// Sum of all eigenvalues (total variance).
    pub total_variance: f64,
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// `a` is row-major `d x d`; returns eigenvalues (unsorted) and eigenvectors as columns of a row-major matrix.
pub fn symmetric_eigen(a: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = a.to_vec();
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    if scale == 0.0 {
        return (vec![0.0; d], v);
    }
    for _sweep in 0..100 {
        let off: f64 = (0..d)
            .flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * d + j] * a[i * d + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = a[p * d + q];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = a[p * d + p];
                let aqq = a[q * d + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..d).map(|i| a[i * d + i]).collect(), v)
}

/// Fits PCA to the rows of `data` (n samples of dimension d).
pub fn pca_fit<T: Scalar, R: AsRef<[T]>>(data: &[R], mode: PcaMode) -> Result<PcaModel<T>> {
    let n = data.len();
    if n < 2 {
        return Err(Error::Fitting(format!("PCA needs at least 2 samples, got {n}")));
    }
    let d = data[0].as_ref().len();
    if d == 0 || data.iter().any(|r| r.as_ref().len() != d) {
        return Err(Error::dim("PCA rows must share a nonzero dimension"));
    }
    match mode {
        PcaMode::FixedK(k) if k == 0 || k > d => {
            return Err(Error::param(format!("fixed_k={k} outside [1, {d}]")))
        }
        PcaMode::VarianceFrac(f) if !(f > 0.0 && f <= 1.0) => {
            return Err(Error::param(format!("variance_frac={f} outside (0, 1]")))
        }
        _ => {}
    }
    let mut mean = vec![0f64; d];
    for r in data {
        for (m, v) in mean.iter_mut().zip(r.as_ref()) {
            *m += v.f64();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0f64; d * d];
    let mut centered = vec![0f64; d];
    for r in data {
        for ((c, v), m) in centered.iter_mut().zip(r.as_ref()).zip(&mean) {
            *c = v.f64() - m;
        }
        for i in 0..d {
            let ci = centered[i];
            if ci == 0.0 {
                continue;
            }
            let row = &mut cov[i * d..(i + 1) * d];
            for j in i..d {
                row[j] += ci * centered[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / (n - 1) as f64;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    let (vals, vecs) = symmetric_eigen(&cov, d);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]).then(a.cmp(&b)));
    let vmax = vals.iter().cloned().fold(0.0, f64::max);
    let sorted: Vec<f64> = order
        .iter()
        .map(|&i| if vals[i] <= 1e-12 * vmax { 0.0 } else { vals[i] })
        .collect();
    let total: f64 = sorted.iter().sum();
    let keep = match mode {
        PcaMode::FixedK(k) => k,
        PcaMode::VarianceFrac(frac) => {
            if total == 0.0 {
                1
            } else {
                let mut cum = 0.0;
                let mut keep = d;
                for (i, v) in sorted.iter().enumerate() {
                    cum += v;
                    if cum >= frac * total {
                        keep = i + 1;
                        break;
                    }
                }
                keep
            }
        }
    };
    let components = order[..keep]
        .iter()
        .map(|&col| {
            let mut c: Vec<f64> = (0..d).map(|r| vecs[r * d + col]).collect();
            let norm = c.iter().map(|x| x * x).sum::<f64>().sqrt();
            c.iter_mut().for_each(|x| *x /= norm);
            if let Some(first) = c.iter().find(|x| x.abs() > 1e-12) {
                if *first < 0.0 {
                    c.iter_mut().for_each(|x| *x = -*x);
                }
            }
            c.into_iter().map(T::of).collect()
        })
        .collect();
    Ok(PcaModel {
        mean: mean.into_iter().map(T::of).collect(),
        components,
        eigenvalues: sorted[..keep].to_vec(),
        total_variance: total,
    })
}

impl<T: Scalar> PcaModel<T> {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    /// Fraction of the total variance carried by the kept components.
    pub fn retained_variance(&self) -> f64 {
        if self.total_variance == 0.0 {
            1.0
        } else {
            self.eigenvalues.iter().sum::<f64>() / self.total_variance
        }
    }

    pub fn project(&self, v: &[T]) -> Result<Vec<T>> {
        if v.len() != self.dim() {
            return Err(Error::dim(format!("expected {} values, got {}", self.dim(), v.len())));
        }
        Ok(self
            .components
            .iter()
            .map(|c| {
                let s: f64 = c
                    .iter()
                    .zip(v)
                    .zip(&self.mean)
                    .map(|((ci, vi), mi)| ci.f64() * (vi.f64() - mi.f64()))
                    .sum();
                T::of(s)
            })
            .collect())
    }

    /// Mean, components and variance bookkeeping as tensors.
    pub fn to_tensors(&self) -> Vec<Tensor<T>> {
        let k = self.n_components();
        let d = self.dim();
        vec![
            Tensor::vector(self.mean.clone()),
            Tensor::new(vec![k, d], self.components.iter().flatten().copied().collect())
                .expect("component rows share the model dimension"),
            Tensor::vector(
                self.eigenvalues
                    .iter()
                    .chain(std::iter::once(&self.total_variance))
                    .map(|&v| T::of(v))
                    .collect(),
            ),
        ]
    }

    pub fn from_tensors(t: &[Tensor<T>]) -> Result<Self> {
        let [mean, comps, vals] = t else {
            return Err(Error::dim("PCA model needs 3 tensors"));
        };
        let d = mean.len();
        let &[k, cd] = comps.shape() else {
            return Err(Error::dim("PCA components must be rank 2"));
        };
        if cd != d || vals.len() != k + 1 {
            return Err(Error::dim("inconsistent PCA tensors"));
        }
        let v: Vec<f64> = vals.data().iter().map(|x| x.f64()).collect();
        Ok(Self {
            mean: mean.data().to_vec(),
            components: comps.data().chunks(d).map(|c| c.to_vec()).collect(),
            eigenvalues: v[..k].to_vec(),
            total_variance: v[k],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Rng;

    #[test]
    fn collinear_points() {
        let data: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, i as f64]).collect();
        let m = pca_fit(&data, PcaMode::VarianceFrac(0.99)).unwrap();
        assert_eq!(m.n_components(), 1);
        let s = 1.0 / 2f64.sqrt();
        assert!((m.components[0][0] - s).abs() < 1e-9);
        assert!((m.components[0][1] - s).abs() < 1e-9);
        assert!((m.retained_variance() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn full_rank_projection_preserves_distances() {
        let mut rng = Rng::new(11);
        let data: Vec<Vec<f64>> = (0..200).map(|_| (0..4).map(|_| rng.normal()).collect()).collect();
        let m = pca_fit(&data, PcaMode::FixedK(4)).unwrap();
        let p: Vec<Vec<f64>> = data.iter().map(|r| m.project(r).unwrap()).collect();
        for i in 0..20 {
            for j in 0..20 {
                let d0: f64 = data[i].iter().zip(&data[j]).map(|(a, b)| (a - b).powi(2)).sum();
                let d1: f64 = p[i].iter().zip(&p[j]).map(|(a, b)| (a - b).powi(2)).sum();
                assert!((d0.sqrt() - d1.sqrt()).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn components_orthonormal_and_sorted() {
        let mut rng = Rng::new(12);
        let data: Vec<Vec<f64>> = (0..100)
            .map(|_| {
                let a = rng.normal();
                vec![3.0 * a + 0.1 * rng.normal(), rng.normal(), 0.5 * rng.normal(), a]
            })
            .collect();
        let m = pca_fit(&data, PcaMode::FixedK(4)).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let d: f64 = m.components[i].iter().zip(&m.components[j]).map(|(a, b)| a * b).sum();
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((d - e).abs() <= 1e-5);
            }
        }
        assert!(m.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn variance_one_keeps_nonzero_components() {
        // rank-2 data in 3 dimensions
        let mut rng = Rng::new(13);
        let data: Vec<Vec<f64>> = (0..50)
            .map(|_| {
                let (a, b) = (rng.normal(), rng.normal());
                vec![a, b, a + b]
            })
            .collect();
        let m = pca_fit(&data, PcaMode::VarianceFrac(1.0)).unwrap();
        assert_eq!(m.n_components(), 2);
    }

    #[test]
    fn degenerate_data_keeps_one_component() {
        let data = vec![vec![1.0f64, 2.0]; 5];
        let m = pca_fit(&data, PcaMode::VarianceFrac(0.95)).unwrap();
        assert_eq!(m.n_components(), 1);
    }

    #[test]
    fn rejects_bad_requests() {
        let data = vec![vec![1.0f64, 2.0], vec![0.0, 1.0]];
        assert!(pca_fit(&data[..1], PcaMode::FixedK(1)).is_err());
        assert!(pca_fit(&data, PcaMode::FixedK(3)).is_err());
        assert!(pca_fit(&data, PcaMode::VarianceFrac(0.0)).is_err());
    }
}
