//! Spherical k-means with cosine distance and Davies-Bouldin model selection.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterParams {
    pub k_min: usize,
    pub k_max: usize,
    pub restarts: usize,
    pub max_iter: usize,
}

impl Default for ClusterParams {
    fn default() -> Self {
        Self {
            k_min: 2,
            k_max: 30,
            restarts: 5,
            max_iter: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    /// Unit-norm centroids.
    pub centroids: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    /// Sum of cosine similarities of the points to their centroids.
    pub objective: f64,
    /// Objective after every assignment step of the winning restart.
    pub history: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterModel {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    /// `(k, DB index)` for every k of the sweep.
    pub db_trace: Vec<(usize, f64)>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Unit-normalizes in f64; zero vectors are an input error.
pub fn normalize<R: AsRef<[f32]>>(z: R) -> Result<Vec<f64>> {
    let v: Vec<f64> = z.as_ref().iter().map(|&x| x as f64).collect();
    let n = dot(&v, &v).sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::Input("cannot take the direction of a zero or non-finite vector".into()));
    }
    Ok(v.into_iter().map(|x| x / n).collect())
}

fn normalize_f64(v: &mut [f64]) -> bool {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
        true
    } else {
        false
    }
}

/// Index of the most similar centroid, ties to the lowest index.
fn nearest(x: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let s = dot(x, c);
        if s > best.1 {
            best = (i, s);
        }
    }
    best
}

fn seed_centroids(x: &[Vec<f64>], k: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let n = x.len();
    let mut centroids = vec![x[rng.index(n)].clone()];
    let mut dist: Vec<f64> = x.iter().map(|p| (1.0 - dot(p, &centroids[0])).max(0.0)).collect();
    while centroids.len() < k {
        let total: f64 = dist.iter().map(|d| d * d).sum();
        let pick = if total > 0.0 {
            let mut u = rng.uniform() * total;
            let mut chosen = n - 1;
            for (i, d) in dist.iter().enumerate() {
                u -= d * d;
                if u < 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.index(n)
        };
        centroids.push(x[pick].clone());
        let c = centroids.last().expect("just pushed");
        for (d, p) in dist.iter_mut().zip(x) {
            *d = d.min((1.0 - dot(p, c)).max(0.0));
        }
    }
    centroids
}

fn lloyd(x: &[Vec<f64>], mut centroids: Vec<Vec<f64>>, max_iter: usize) -> KMeansResult {
    let k = centroids.len();
    let d = x[0].len();
    let mut assignment: Vec<usize> = Vec::new();
    let mut history = Vec::new();
    let mut objective;
    let mut iter = 0;
    loop {
        let step: Vec<(usize, f64)> = x.par_iter().map(|p| nearest(p, &centroids)).collect();
        objective = step.iter().map(|s| s.1).sum::<f64>();
        history.push(objective);
        let next: Vec<usize> = step.iter().map(|s| s.0).collect();
        let stable = next == assignment;
        assignment = next;
        iter += 1;
        if stable || iter > max_iter {
            break;
        }
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in x.iter().zip(&assignment) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut worst: Vec<usize> = (0..x.len()).collect();
        worst.sort_by(|&a, &b| step[a].1.total_cmp(&step[b].1).then(a.cmp(&b)));
        let mut reseed = worst.into_iter();
        for c in 0..k {
            if counts[c] > 0 && normalize_f64(&mut sums[c]) {
                centroids[c] = std::mem::take(&mut sums[c]);
            } else if counts[c] == 0 {
                if let Some(p) = reseed.next() {
                    centroids[c] = x[p].clone();
                }
            }
        }
    }
    KMeansResult {
        centroids,
        assignment,
        objective,
        history,
    }
}

/// Best of `restarts` seeded runs of spherical k-means on the feature directions.
pub fn spherical_kmeans<R: AsRef<[f32]>>(
    features: &[R],
    k: usize,
    rng: &mut Rng,
    restarts: usize,
    max_iter: usize,
) -> Result<KMeansResult> {
    let x: Vec<Vec<f64>> = features.iter().map(normalize).collect::<Result<_>>()?;
    kmeans_unit(&x, k, rng, restarts, max_iter)
}

fn kmeans_unit(x: &[Vec<f64>], k: usize, rng: &mut Rng, restarts: usize, max_iter: usize) -> Result<KMeansResult> {
    if k == 0 || k > x.len() {
        return Err(Error::param(format!("k={k} outside [1, {}]", x.len())));
    }
    let mut best: Option<KMeansResult> = None;
    for _ in 0..restarts.max(1) {
        let init = seed_centroids(x, k, rng);
        let run = lloyd(x, init, max_iter);
        if best.as_ref().is_none_or(|b| run.objective > b.objective) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    (1.0 - dot(a, b)).max(0.0)
}

/// Davies-Bouldin index with cosine distance for scatter and separation.
/// Coincident centroids give `+inf`.
pub fn davies_bouldin<R: AsRef<[f32]>>(features: &[R], assignment: &[usize], centroids: &[Vec<f64>]) -> Result<f64> {
    let x: Vec<Vec<f64>> = features.iter().map(normalize).collect::<Result<_>>()?;
    db_unit(&x, assignment, centroids)
}

fn db_unit(x: &[Vec<f64>], assignment: &[usize], centroids: &[Vec<f64>]) -> Result<f64> {
    let k = centroids.len();
    if assignment.len() != x.len() || assignment.iter().any(|&a| a >= k) {
        return Err(Error::dim("assignment does not match features and centroids"));
    }
    let mut scatter = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in x.iter().zip(assignment) {
        scatter[a] += cosine_distance(p, &centroids[a]);
        counts[a] += 1;
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Input(format!("cluster {empty} has no members")));
    }
    for (s, &c) in scatter.iter_mut().zip(&counts) {
        *s /= c as f64;
    }
    let mut total = 0.0;
    for i in 0..k {
        let mut worst = 0.0f64;
        for j in 0..k {
            if i == j {
                continue;
            }
            let sep = cosine_distance(&centroids[i], &centroids[j]);
            let r = if sep > 0.0 {
                (scatter[i] + scatter[j]) / sep
            } else {
                f64::INFINITY
            };
            worst = worst.max(r);
        }
        total += worst;
    }
    Ok(total / k as f64)
}

/// Sweeps k over the configured range and keeps the lowest DB index (ties to smaller k).
pub fn select_k<R: AsRef<[f32]>>(features: &[R], params: &ClusterParams, rng: &Rng) -> Result<ClusterModel> {
    if params.k_min < 2 || params.k_max < params.k_min {
        return Err(Error::param(format!("invalid k range [{}, {}]", params.k_min, params.k_max)));
    }
    if features.len() <= params.k_max {
        return Err(Error::Input(format!(
            "{} features cannot support k up to {}",
            features.len(),
            params.k_max
        )));
    }
    let x: Vec<Vec<f64>> = features.iter().map(normalize).collect::<Result<_>>()?;
    let runs: Vec<(usize, f64, Vec<Vec<f64>>)> = (params.k_min..=params.k_max)
        .into_par_iter()
        .map(|k| {
            let mut r = rng.derive(k as u64);
            let fit = kmeans_unit(&x, k, &mut r, params.restarts, params.max_iter)?;
            let db = db_unit(&x, &fit.assignment, &fit.centroids).unwrap_or(f64::INFINITY);
            Ok((k, db, fit.centroids))
        })
        .collect::<Result<_>>()?;
    let mut best = 0;
    for (i, r) in runs.iter().enumerate() {
        if r.1 < runs[best].1 {
            best = i;
        }
    }
    let db_trace = runs.iter().map(|r| (r.0, r.1)).collect();
    let (k, _, centroids) = runs.into_iter().nth(best).expect("nonempty sweep");
    Ok(ClusterModel { k, centroids, db_trace })
}

impl ClusterModel {
    /// Most similar centroid, ties to the lowest id.
    pub fn assign(&self, z: &[f32]) -> Result<usize> {
        let x = normalize(z)?;
        if x.len() != self.centroids[0].len() {
            return Err(Error::Usage("feature dimension does not match the cluster model".into()));
        }
        Ok(nearest(&x, &self.centroids).0)
    }

    /// `k,db` rows of the sweep.
    pub fn db_csv(&self) -> String {
        let mut s = String::from("k,db\n");
        for (k, db) in &self.db_trace {
            s.push_str(&format!("{k},{db}\n"));
        }
        s
    }
}
