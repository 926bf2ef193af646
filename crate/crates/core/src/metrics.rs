//! Segmentation overlap scores and the linear-SVM classification probe.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Embedder;
use crate::numcore::Rng;
use crate::patches::{extract_pair, Preset};
use crate::preprocess::{Preprocessed, Superpixel};
use crate::volume::{AnomalyKind, GroundTruth};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SegScores {
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl SegScores {
    pub fn from_counts(tp: u64, fp: u64, fn_: u64) -> Self {
        let (pred, gt) = (tp + fp, tp + fn_);
        let (dice, precision, recall) = match (pred == 0, gt == 0) {
            (true, true) => (1.0, 1.0, 1.0),
            (true, false) => (0.0, 1.0, 0.0),
            (false, true) => (0.0, 0.0, 1.0),
            (false, false) => (
                2.0 * tp as f64 / (2 * tp + fp + fn_) as f64,
                tp as f64 / pred as f64,
                tp as f64 / gt as f64,
            ),
        };
        Self {
            dice,
            precision,
            recall,
            tp,
            fp,
            fn_,
        }
    }

    /// Pools the counts of several evaluations.
    pub fn pooled(parts: &[SegScores]) -> Self {
        let s = |f: fn(&SegScores) -> u64| parts.iter().map(f).sum::<u64>();
        Self::from_counts(s(|p| p.tp), s(|p| p.fp), s(|p| p.fn_))
    }
}

/// Voxel counts within `roi`.
pub fn seg_scores(pred: &[bool], gt: &[bool], roi: &[bool]) -> Result<SegScores> {
    if pred.len() != gt.len() || gt.len() != roi.len() {
        return Err(Error::Usage(format!(
            "mask sizes differ: pred {}, gt {}, roi {}",
            pred.len(),
            gt.len(),
            roi.len()
        )));
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for ((&p, &g), &r) in pred.iter().zip(gt).zip(roi) {
        if !r {
            continue;
        }
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    Ok(SegScores::from_counts(tp, fp, fn_))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SvmParams {
    pub c: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SvmParams {
    fn default() -> Self {
        Self {
            c: 1.0,
            tol: 1e-6,
            max_iter: 5000,
        }
    }
}

/// One-vs-rest linear classifier with squared-hinge loss.
#[derive(Clone, Debug, PartialEq)]
pub struct L2Svm {
    pub n_classes: usize,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// Per class: weights followed by the bias.
    pub weights: Vec<Vec<f64>>,
    /// Objective after every accepted step, per class.
    pub objective_trace: Vec<Vec<f64>>,
}

struct Binary<'a> {
    x: &'a [Vec<f64>],
    y: Vec<f64>,
    c: f64,
}

impl Binary<'_> {
    /// `½‖θ‖² + C·mean(max(0, 1 - y θ·[x,1])²)` and its gradient; the bias is regularized too.
    fn eval(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let d = theta.len() - 1;
        let n = self.x.len() as f64;
        let mut grad: Vec<f64> = theta.to_vec();
        let mut loss = 0.0;
        for (xi, &yi) in self.x.iter().zip(&self.y) {
            let f = xi.iter().zip(theta).map(|(a, b)| a * b).sum::<f64>() + theta[d];
            let m = 1.0 - yi * f;
            if m > 0.0 {
                loss += m * m;
                let g = -2.0 * self.c * m * yi / n;
                for (gk, v) in grad.iter_mut().zip(xi) {
                    *gk += g * v;
                }
                grad[d] += g;
            }
        }
        let obj = 0.5 * theta.iter().map(|v| v * v).sum::<f64>() + self.c * loss / n;
        (obj, grad)
    }

    /// Gradient descent with Barzilai-Borwein trial steps and Armijo backtracking.
    fn solve(&self, dim: usize, tol: f64, max_iter: usize) -> (Vec<f64>, Vec<f64>) {
        let mut theta = vec![0.0; dim + 1];
        let (mut obj, mut grad) = self.eval(&theta);
        let g0 = norm(&grad).max(1e-300);
        let mut trace = vec![obj];
        let mut step = 1.0 / (1.0 + self.c);
        let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;
        for _ in 0..max_iter {
            let gn = norm(&grad);
            if gn <= tol * g0.max(1.0) {
                break;
            }
            if let Some((pt, pg)) = &prev {
                let s: Vec<f64> = theta.iter().zip(pt).map(|(a, b)| a - b).collect();
                let yv: Vec<f64> = grad.iter().zip(pg).map(|(a, b)| a - b).collect();
                let sy: f64 = s.iter().zip(&yv).map(|(a, b)| a * b).sum();
                if sy > 0.0 {
                    step = s.iter().map(|v| v * v).sum::<f64>() / sy;
                }
            }
            let mut t = step;
            let accepted = loop {
                let cand: Vec<f64> = theta.iter().zip(&grad).map(|(p, g)| p - t * g).collect();
                let (co, cg) = self.eval(&cand);
                if co <= obj - 1e-4 * t * gn * gn {
                    break Some((cand, co, cg));
                }
                t *= 0.5;
                if t < 1e-20 {
                    break None;
                }
            };
            let Some((cand, co, cg)) = accepted else { break };
            prev = Some((std::mem::replace(&mut theta, cand), std::mem::replace(&mut grad, cg)));
            obj = co;
            trace.push(obj);
        }
        (theta, trace)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Trains one binary squared-hinge SVM per class on standardized features.
pub fn train_l2svm<R: AsRef<[f32]> + Sync>(features: &[R], labels: &[usize], params: &SvmParams) -> Result<L2Svm> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(Error::dim("features and labels must be nonempty and aligned"));
    }
    if !(params.c >= 0.0) {
        return Err(Error::param("C must be nonnegative"));
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let present = (0..n_classes).filter(|c| labels.contains(c)).count();
    if present < 2 {
        return Err(Error::Input("classification needs at least two classes".into()));
    }
    let d = features[0].as_ref().len();
    let n = features.len() as f64;
    let mut mean = vec![0.0; d];
    for f in features {
        for (m, &v) in mean.iter_mut().zip(f.as_ref()) {
            *m += v as f64 / n;
        }
    }
    let mut var = vec![0.0; d];
    for f in features {
        for ((s, &v), m) in var.iter_mut().zip(f.as_ref()).zip(&mean) {
            *s += (v as f64 - m).powi(2) / n;
        }
    }
    let scale: Vec<f64> = var.iter().map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 }).collect();
    let x: Vec<Vec<f64>> = features
        .iter()
        .map(|f| standardize(f.as_ref(), &mean, &scale))
        .collect();
    let solved: Vec<(Vec<f64>, Vec<f64>)> = (0..n_classes)
        .into_par_iter()
        .map(|c| {
            let y = labels.iter().map(|&l| if l == c { 1.0 } else { -1.0 }).collect();
            Binary { x: &x, y, c: params.c }.solve(d, params.tol, params.max_iter)
        })
        .collect();
    let (weights, objective_trace) = solved.into_iter().unzip();
    Ok(L2Svm {
        n_classes,
        mean,
        scale,
        weights,
        objective_trace,
    })
}

fn standardize(z: &[f32], mean: &[f64], scale: &[f64]) -> Vec<f64> {
    z.iter().zip(mean).zip(scale).map(|((&v, m), s)| (v as f64 - m) / s).collect()
}

impl L2Svm {
    pub fn decision(&self, z: &[f32]) -> Vec<f64> {
        let x = standardize(z, &self.mean, &self.scale);
        let d = x.len();
        self.weights
            .iter()
            .map(|w| x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + w[d])
            .collect()
    }

    /// Class with the largest decision value, ties to the lowest index.
    pub fn predict(&self, z: &[f32]) -> usize {
        let v = self.decision(z);
        let mut best = 0;
        for (i, &s) in v.iter().enumerate() {
            if s > v[best] {
                best = i;
            }
        }
        best
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub patients: Vec<usize>,
    /// Accuracy per class on the held-out fold (NaN when the class is absent).
    pub per_class: Vec<f64>,
    pub overall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub class_names: Vec<String>,
    pub folds: Vec<FoldResult>,
    pub mean_per_class: Vec<f64>,
    pub mean_overall: f64,
    pub std_overall: f64,
}

/// `86.6 (± 1.6)` style percentage.
pub fn format_accuracy(mean: f64, std: f64) -> String {
    format!("{:.1} (± {:.1})", 100.0 * mean, 100.0 * std)
}

impl CvReport {
    pub fn summary(&self) -> String {
        format_accuracy(self.mean_overall, self.std_overall)
    }
}

impl fmt::Display for CvReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, acc) in self.class_names.iter().zip(&self.mean_per_class) {
            write!(f, "{name} {:.1}  ", 100.0 * acc)?;
        }
        write!(f, "overall {}", self.summary())
    }
}

/// Patients shuffled with `rng` and dealt round-robin into `n_folds` groups.
pub fn patient_folds(patients: &[usize], n_folds: usize, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    let mut ids: Vec<usize> = patients.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if n_folds < 2 || ids.len() < n_folds {
        return Err(Error::Input(format!(
            "{} patients cannot fill {n_folds} folds",
            ids.len()
        )));
    }
    rng.shuffle(&mut ids);
    let mut folds = vec![Vec::new(); n_folds];
    for (i, p) in ids.into_iter().enumerate() {
        folds[i % n_folds].push(p);
    }
    folds.iter_mut().for_each(|f| f.sort_unstable());
    Ok(folds)
}

/// Patient-grouped cross-validation of [`train_l2svm`].
pub fn grouped_cv<R: AsRef<[f32]> + Sync>(
    features: &[R],
    labels: &[usize],
    patients: &[usize],
    class_names: &[&str],
    n_folds: usize,
    params: &SvmParams,
    rng: &mut Rng,
) -> Result<CvReport> {
    if features.len() != labels.len() || labels.len() != patients.len() {
        return Err(Error::dim("features, labels and patients must align"));
    }
    let folds = patient_folds(patients, n_folds, rng)?;
    let k = class_names.len();
    let results: Vec<FoldResult> = folds
        .par_iter()
        .map(|held| {
            let (mut tr_x, mut tr_y) = (Vec::new(), Vec::new());
            let mut test = Vec::new();
            for i in 0..features.len() {
                if held.binary_search(&patients[i]).is_ok() {
                    test.push(i);
                } else {
                    tr_x.push(features[i].as_ref());
                    tr_y.push(labels[i]);
                }
            }
            let svm = train_l2svm(&tr_x, &tr_y, params)?;
            let mut hit = vec![0usize; k];
            let mut tot = vec![0usize; k];
            for &i in &test {
                tot[labels[i]] += 1;
                if svm.predict(features[i].as_ref()) == labels[i] {
                    hit[labels[i]] += 1;
                }
            }
            let per_class = hit
                .iter()
                .zip(&tot)
                .map(|(&h, &t)| if t > 0 { h as f64 / t as f64 } else { f64::NAN })
                .collect();
            let overall = hit.iter().sum::<usize>() as f64 / test.len().max(1) as f64;
            Ok(FoldResult {
                patients: held.clone(),
                per_class,
                overall,
            })
        })
        .collect::<Result<_>>()?;
    let mean_per_class = (0..k)
        .map(|c| {
            let v: Vec<f64> = results.iter().map(|r| r.per_class[c]).filter(|v| !v.is_nan()).collect();
            v.iter().sum::<f64>() / v.len().max(1) as f64
        })
        .collect();
    let m = results.len() as f64;
    let mean_overall = results.iter().map(|r| r.overall).sum::<f64>() / m;
    let std_overall = (results.iter().map(|r| (r.overall - mean_overall).powi(2)).sum::<f64>() / (m - 1.0)).sqrt();
    Ok(CvReport {
        class_names: class_names.iter().map(|s| s.to_string()).collect(),
        folds: results,
        mean_per_class,
        mean_overall,
        std_overall,
    })
}

/// Classes of the classification probe.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeClass {
    /// Cyst-like fluid blobs.
    Cyst,
    /// Fluid beneath the layers.
    Fluid,
    /// Remaining retina.
    Other,
}

impl ProbeClass {
    pub const ALL: [ProbeClass; 3] = [ProbeClass::Cyst, ProbeClass::Fluid, ProbeClass::Other];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ProbeClass::Cyst => "cyst",
            ProbeClass::Fluid => "fluid",
            ProbeClass::Other => "other",
        }
    }

    pub fn from_kind(kind: AnomalyKind) -> Option<Self> {
        match kind {
            AnomalyKind::CystBlob => Some(ProbeClass::Cyst),
            AnomalyKind::SubsurfaceFluid => Some(ProbeClass::Fluid),
            AnomalyKind::None => Some(ProbeClass::Other),
            AnomalyKind::SurfaceDeformation => None,
        }
    }
}

/// Most frequent ground-truth kind over the superpixel's pixels (flattened
/// coordinates mapped back through the column shifts). Ties go to the lower kind.
pub fn majority_kind(sp: &Superpixel, pre: &Preprocessed, truth: &GroundTruth) -> AnomalyKind {
    let w = pre.volume.width;
    let mut counts = [0usize; 4];
    for &p in &sp.pixels {
        let (r, c) = (p as usize / w, p as usize % w);
        if let Some(orig) = pre.original_row(sp.slice, r, c) {
            counts[truth.label(sp.slice, orig, c) as usize] += 1;
        }
    }
    let mut best = 0;
    for k in 1..4 {
        if counts[k] > counts[best] {
            best = k;
        }
    }
    AnomalyKind::from_u8(best as u8).expect("index below 4")
}

/// One preprocessed volume with its ground truth and patient id.
#[derive(Clone, Copy)]
pub struct LabeledVolume<'a> {
    pub patient: usize,
    pub data: &'a Preprocessed,
    pub truth: &'a GroundTruth,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassificationSet {
    pub features: Vec<Vec<f32>>,
    pub labels: Vec<usize>,
    pub patients: Vec<usize>,
    /// (volume index, slice, superpixel) of every sample.
    pub sources: Vec<(usize, usize, usize)>,
}

/// Candidate superpixels per probe class, in (volume, slice, superpixel) order.
pub fn probe_candidates(volumes: &[LabeledVolume<'_>]) -> [Vec<(usize, usize, usize)>; 3] {
    let mut out: [Vec<(usize, usize, usize)>; 3] = Default::default();
    for (v, lv) in volumes.iter().enumerate() {
        for sp in lv.data.retina_superpixels() {
            if let Some(cls) = ProbeClass::from_kind(majority_kind(sp, lv.data, lv.truth)) {
                out[cls.index()].push((v, sp.slice, sp.id));
            }
        }
    }
    out
}

/// Balanced sample of `per_class` superpixels per probe class, embedded with `embedder`.
pub fn build_classification_set<E: Embedder + ?Sized>(
    volumes: &[LabeledVolume<'_>],
    embedder: &E,
    preset: Preset,
    per_class: usize,
    rng: &mut Rng,
) -> Result<ClassificationSet> {
    let candidates = probe_candidates(volumes);
    let mut chosen = Vec::new();
    for cls in ProbeClass::ALL {
        let pool = &candidates[cls.index()];
        if pool.len() < per_class {
            return Err(Error::Input(format!(
                "class `{}` has {} superpixels, {per_class} requested",
                cls.name(),
                pool.len()
            )));
        }
        for i in rng.sample_indices(pool.len(), per_class) {
            chosen.push((pool[i], cls.index()));
        }
    }
    let features = chosen
        .par_iter()
        .map(|&((v, s, id), _)| {
            let pre = volumes[v].data;
            let sp = &pre.superpixels[s][id];
            embedder.embed(&extract_pair(&pre.volume, s, sp.center(), preset))
        })
        .collect::<Result<_>>()?;
    Ok(ClassificationSet {
        features,
        labels: chosen.iter().map(|c| c.1).collect(),
        patients: chosen.iter().map(|c| volumes[c.0 .0].patient).collect(),
        sources: chosen.iter().map(|c| c.0).collect(),
    })
}
