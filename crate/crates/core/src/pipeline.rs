//! The full experiment graph: train on healthy volumes, fit the boundaries,
//! cluster anomalies, segment and evaluate.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline::{fit_pca_baseline, BaselineMode, PcaBaseline};
use crate::cluster::{select_k, ClusterModel};
use crate::config::PipelineConfig;
use crate::dcae::{build_model, train_dcae, train_fusion, DcaeModel};
use crate::error::Result;
use crate::features::{embed_all, Embedder};
use crate::metrics::{
    build_classification_set, grouped_cv, seg_scores, CvReport, LabeledVolume, ProbeClass, SegScores,
};
use crate::numcore::Rng;
use crate::ocsvm::{fit_ocsvm, segment_volume, AnomalyMap, Label, OcSvmModel, Origin};
use crate::patches::{build_dataset, extract_pair, retina_sources, DatasetInput, Preset};
use crate::phantom::Split;
use crate::preprocess::{preprocess_volume, Preprocessed};
use crate::volume::{GroundTruth, Volume};

/// Seed streams of the pipeline stages.
mod stream {
    pub const PAIRS: u64 = 1;
    pub const INIT: u64 = 2;
    pub const DCAE: u64 = 3;
    pub const FUSION: u64 = 4;
    pub const BOUNDARY: u64 = 5;
    pub const CLUSTER_SAMPLE: u64 = 6;
    pub const CLUSTER: u64 = 7;
    pub const PROBE: u64 = 8;
    pub const FOLDS: u64 = 9;
}

/// The three compared embeddings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Dcae,
    PcaFixed,
    PcaVariance,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Dcae, Method::PcaFixed, Method::PcaVariance];

    pub fn key(self) -> &'static str {
        match self {
            Method::Dcae => "dcae",
            Method::PcaFixed => "pca_fixed",
            Method::PcaVariance => "pca_variance",
        }
    }
}

/// Everything `train` produces, plus the optional cluster model.
#[derive(Clone, Debug)]
pub struct Models {
    pub preset: Preset,
    pub dcae: DcaeModel,
    pub pca_fixed: PcaBaseline,
    pub pca_variance: PcaBaseline,
    /// Boundaries in [`Method::ALL`] order.
    pub boundaries: Vec<OcSvmModel>,
    pub cluster: Option<ClusterModel>,
}

impl Models {
    pub fn embedder(&self, m: Method) -> &dyn Embedder {
        match m {
            Method::Dcae => &self.dcae,
            Method::PcaFixed => &self.pca_fixed,
            Method::PcaVariance => &self.pca_variance,
        }
    }

    pub fn boundary(&self, m: Method) -> &OcSvmModel {
        &self.boundaries[m as usize]
    }

    pub fn method_name(&self, m: Method) -> String {
        match m {
            Method::Dcae => "DCAE_ent".to_string(),
            Method::PcaFixed => self.pca_fixed.name(),
            Method::PcaVariance => self.pca_variance.name(),
        }
    }
}

pub fn preprocess_all(volumes: &[&Volume], cfg: &PipelineConfig) -> Result<Vec<Preprocessed>> {
    volumes
        .iter()
        .map(|v| preprocess_volume(v, &cfg.preprocess))
        .collect::<Result<_>>()
        .map_err(|e| e.in_stage("preprocess"))
}

/// Fits one boundary per method on embeddings of the healthy pairs.
fn fit_boundaries(
    models: (&DcaeModel, &PcaBaseline, &PcaBaseline),
    pairs: &[crate::patches::PatchPair],
    cfg: &PipelineConfig,
) -> Result<Vec<OcSvmModel>> {
    let embedders: [&dyn Embedder; 3] = [models.0, models.1, models.2];
    let params = cfg.ocsvm.params();
    embedders
        .iter()
        .map(|e| {
            let feats = embed_all(*e, pairs)?;
            let empty = match params.origin {
                Origin::EmptySignal => Some(e.empty_signal(cfg.preset)?),
                _ => None,
            };
            let (model, sol) = fit_ocsvm(&feats, &params, empty.as_deref())?;
            log::info!(
                "boundary fitted: {} iterations, {} free support vectors",
                sol.iterations,
                sol.free
            );
            Ok(quantized(model))
        })
        .collect()
}

fn round_f32(v: &mut [f64]) {
    for x in v {
        *x = *x as f32 as f64;
    }
}

/// Rounds the stored vectors to 32-bit so a saved bundle reproduces the scores exactly.
fn quantized(mut m: OcSvmModel) -> OcSvmModel {
    round_f32(&mut m.w);
    round_f32(&mut m.standardizer.center);
    round_f32(&mut m.standardizer.scale);
    m
}

/// Trains the autoencoders, both PCA baselines and one boundary per embedding.
pub fn train(healthy: &[&Volume], cfg: &PipelineConfig) -> Result<Models> {
    cfg.validate()?;
    let root = Rng::new(cfg.seed);
    let pre = preprocess_all(healthy, cfg)?;
    let inputs: Vec<DatasetInput<'_>> = pre
        .iter()
        .enumerate()
        .map(|(i, p)| DatasetInput {
            volume: i,
            patient: i,
            data: p,
        })
        .collect();
    let dataset = build_dataset(
        &inputs,
        Split::Healthy,
        cfg.preset,
        cfg.dcae.max_pairs,
        &mut root.derive(stream::PAIRS),
    )
    .map_err(|e| e.in_stage("patches"))?;
    drop(inputs);
    drop(pre);
    log::info!("{} healthy training pairs", dataset.len());

    let mut dcae = build_model(cfg.preset, cfg.dcae.dropout, cfg.dcae.fusion_elu, &mut root.derive(stream::INIT))
        .map_err(|e| e.in_stage("dcae"))?;
    train_dcae(&mut dcae, &dataset, &cfg.dcae.train, &mut root.derive(stream::DCAE))
        .map_err(|e| e.in_stage("dcae"))?;
    train_fusion(&mut dcae, &dataset, &cfg.dcae.fusion, &mut root.derive(stream::FUSION))
        .map_err(|e| e.in_stage("fusion"))?;

    let pca_fixed = fit_pca_baseline(&dataset, BaselineMode::Fixed, cfg.preset).map_err(|e| e.in_stage("pca"))?;
    let pca_variance =
        fit_pca_baseline(&dataset, BaselineMode::Variance, cfg.preset).map_err(|e| e.in_stage("pca"))?;

    let mut pairs = dataset.pairs;
    if let Some(cap) = cfg.ocsvm.max_samples {
        if cap < pairs.len() {
            let keep = root.derive(stream::BOUNDARY).sample_indices(pairs.len(), cap);
            pairs = keep.into_iter().map(|i| pairs[i].clone()).collect();
        }
    }
    let boundaries =
        fit_boundaries((&dcae, &pca_fixed, &pca_variance), &pairs, cfg).map_err(|e| e.in_stage("ocsvm"))?;
    Ok(Models {
        preset: cfg.preset,
        dcae,
        pca_fixed,
        pca_variance,
        boundaries,
        cluster: None,
    })
}

/// Embeds anomaly-split superpixels with the learned features, keeps those outside
/// the boundary and selects the cluster count by the Davies-Bouldin index.
pub fn cluster_fit<'m>(models: &'m mut Models, anomaly: &[&Volume], cfg: &PipelineConfig) -> Result<&'m ClusterModel> {
    let root = Rng::new(cfg.seed);
    let pre = preprocess_all(anomaly, cfg)?;
    let inputs: Vec<DatasetInput<'_>> = pre
        .iter()
        .enumerate()
        .map(|(i, p)| DatasetInput {
            volume: i,
            patient: i,
            data: p,
        })
        .collect();
    let dataset = build_dataset(
        &inputs,
        Split::Anomaly,
        cfg.preset,
        cfg.cluster.max_samples,
        &mut root.derive(stream::CLUSTER_SAMPLE),
    )
    .map_err(|e| e.in_stage("patches"))?;
    let feats = embed_all(&models.dcae, &dataset.pairs).map_err(|e| e.in_stage("embed"))?;
    let boundary = models.boundary(Method::Dcae);
    let mut kept = Vec::new();
    for f in feats {
        if boundary.score(&f)?.0 == Label::Anomaly {
            kept.push(f);
        }
    }
    log::info!("{} of {} anomaly-split superpixels fall outside the boundary", kept.len(), dataset.len());
    let mut model =
        select_k(&kept, &cfg.cluster.params(), &root.derive(stream::CLUSTER)).map_err(|e| e.in_stage("cluster"))?;
    for c in &mut model.centroids {
        round_f32(c);
    }
    Ok(models.cluster.insert(model))
}

/// Segmentation of one volume by one method.
#[derive(Clone, Debug)]
pub struct Segmentation {
    pub pre: Preprocessed,
    pub map: AnomalyMap,
    /// Cluster id per scored superpixel (anomalous ones only, when a cluster model exists).
    pub clusters: Vec<Option<usize>>,
}

impl Segmentation {
    /// Per-pixel codes in original rows: 0 outside the retina, 1 normal,
    /// 2 anomalous without cluster, `3 + id` for cluster `id`.
    pub fn label_image(&self) -> Vec<u8> {
        let v = &self.pre.volume;
        let mut flat = vec![0u8; v.data.len()];
        for (sc, cl) in self.map.scores.iter().zip(&self.clusters) {
            let code = match (sc.label, cl) {
                (Label::Normal, _) => 1,
                (Label::Anomaly, None) => 2,
                (Label::Anomaly, Some(id)) => 3 + (*id).min(252) as u8,
            };
            let base = sc.slice * v.slice_len();
            for &p in &self.pre.superpixels[sc.slice][sc.superpixel].pixels {
                flat[base + p as usize] = code;
            }
        }
        let (w, h) = (v.width, v.height);
        let mut out = vec![0u8; flat.len()];
        for s in 0..v.slices {
            for c in 0..w {
                let shift = self.pre.shift_at(s, c);
                for r in shift..h {
                    out[(s * h + r - shift) * w + c] = flat[(s * h + r) * w + c];
                }
            }
        }
        out
    }

    /// `slice,superpixel,score,label,cluster` rows.
    pub fn csv(&self) -> String {
        let mut s = String::from("slice,superpixel,score,label,cluster\n");
        for (sc, cl) in self.map.scores.iter().zip(&self.clusters) {
            let label = match sc.label {
                Label::Normal => "normal",
                Label::Anomaly => "anomaly",
            };
            let cluster = cl.map(|c| c.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{},{}", sc.slice, sc.superpixel, sc.score as f32, label, cluster);
        }
        s
    }
}

pub fn segment_preprocessed(models: &Models, pre: Preprocessed, method: Method) -> Result<Segmentation> {
    let embedder = models.embedder(method);
    let map = segment_volume(models.boundary(method), embedder, &pre, models.preset)?;
    let clusters = match (&models.cluster, method) {
        (Some(cm), Method::Dcae) => map
            .scores
            .par_iter()
            .map(|sc| {
                if sc.label == Label::Normal {
                    return Ok(None);
                }
                let sp = &pre.superpixels[sc.slice][sc.superpixel];
                let z = embedder.embed(&extract_pair(&pre.volume, sc.slice, sp.center(), models.preset))?;
                cm.assign(&z).map(Some)
            })
            .collect::<Result<_>>()?,
        _ => vec![None; map.scores.len()],
    };
    Ok(Segmentation { pre, map, clusters })
}

pub fn segment(models: &Models, volume: &Volume, cfg: &PipelineConfig, method: Method) -> Result<Segmentation> {
    let pre = preprocess_volume(volume, &cfg.preprocess).map_err(|e| e.in_stage("preprocess"))?;
    segment_preprocessed(models, pre, method).map_err(|e| e.in_stage("segment"))
}

/// A test volume with annotations.
#[derive(Clone, Copy)]
pub struct TestVolume<'a> {
    pub patient: usize,
    pub volume: &'a Volume,
    pub truth: &'a GroundTruth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegRow {
    pub method: String,
    pub pooled: SegScores,
    pub per_volume: Vec<SegScores>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub method: String,
    pub cv: CvReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub segmentation: Vec<SegRow>,
    pub classification: Vec<ClassRow>,
}

/// Overlap scores for every method on the test volumes and the grouped
/// cross-validated classification probe.
pub fn evaluate(models: &Models, test: &[TestVolume<'_>], cfg: &PipelineConfig) -> Result<Report> {
    let root = Rng::new(cfg.seed);
    let vols: Vec<&Volume> = test.iter().map(|t| t.volume).collect();
    let pre = preprocess_all(&vols, cfg)?;
    let mut segmentation = Vec::new();
    for m in Method::ALL {
        let mut per_volume = Vec::new();
        for (t, p) in test.iter().zip(&pre) {
            let map = segment_volume(models.boundary(m), models.embedder(m), p, models.preset)
                .map_err(|e| e.in_stage("segment"))?;
            let pred = map.anomaly_mask(p);
            per_volume.push(seg_scores(&pred, &t.truth.anomaly_mask(), &t.truth.retina_mask())?);
        }
        segmentation.push(SegRow {
            method: models.method_name(m),
            pooled: SegScores::pooled(&per_volume),
            per_volume,
        });
    }
    let labeled: Vec<LabeledVolume<'_>> = test
        .iter()
        .zip(&pre)
        .map(|(t, p)| LabeledVolume {
            patient: t.patient,
            data: p,
            truth: t.truth,
        })
        .collect();
    let names: Vec<&str> = ProbeClass::ALL.iter().map(|c| c.name()).collect();
    let mut classification = Vec::new();
    for m in Method::ALL {
        let set = build_classification_set(
            &labeled,
            models.embedder(m),
            models.preset,
            cfg.metrics.per_class,
            &mut root.derive(stream::PROBE),
        )
        .map_err(|e| e.in_stage("classification"))?;
        let cv = grouped_cv(
            &set.features,
            &set.labels,
            &set.patients,
            &names,
            cfg.metrics.folds,
            &cfg.metrics.svm,
            &mut root.derive(stream::FOLDS),
        )
        .map_err(|e| e.in_stage("classification"))?;
        classification.push(ClassRow {
            method: models.method_name(m),
            cv,
        });
    }
    Ok(Report {
        segmentation,
        classification,
    })
}

impl Report {
    /// `metric,value` rows, one per method and score.
    pub fn metric_value_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (m, r) in Method::ALL.iter().zip(&self.segmentation) {
            let p = &r.pooled;
            let _ = writeln!(s, "{}.dice,{:.6}", m.key(), p.dice);
            let _ = writeln!(s, "{}.precision,{:.6}", m.key(), p.precision);
            let _ = writeln!(s, "{}.recall,{:.6}", m.key(), p.recall);
        }
        for (m, r) in Method::ALL.iter().zip(&self.classification) {
            for (name, a) in r.cv.class_names.iter().zip(&r.cv.mean_per_class) {
                let _ = writeln!(s, "{}.accuracy_{name},{:.6}", m.key(), a);
            }
            let _ = writeln!(s, "{}.accuracy,{:.6}", m.key(), r.cv.mean_overall);
            let _ = writeln!(s, "{}.accuracy_std,{:.6}", m.key(), r.cv.std_overall);
        }
        s
    }

    pub fn segmentation_csv(&self) -> String {
        let mut s = String::from("method,dice,precision,recall,tp,fp,fn\n");
        for r in &self.segmentation {
            let p = &r.pooled;
            let _ = writeln!(
                s,
                "{},{:.4},{:.4},{:.4},{},{},{}",
                r.method, p.dice, p.precision, p.recall, p.tp, p.fp, p.fn_
            );
        }
        s
    }

    pub fn per_volume_csv(&self) -> String {
        let mut s = String::from("method,volume,dice,precision,recall\n");
        for r in &self.segmentation {
            for (i, p) in r.per_volume.iter().enumerate() {
                let _ = writeln!(s, "{},{i},{:.4},{:.4},{:.4}", r.method, p.dice, p.precision, p.recall);
            }
        }
        s
    }

    pub fn classification_csv(&self) -> String {
        let names = self.classification.first().map(|r| r.cv.class_names.clone()).unwrap_or_default();
        let mut s = String::from("method");
        for n in &names {
            let _ = write!(s, ",{n}");
        }
        s.push_str(",overall,std\n");
        for r in &self.classification {
            s.push_str(&r.method);
            for a in &r.cv.mean_per_class {
                let _ = write!(s, ",{:.2}", 100.0 * a);
            }
            let _ = writeln!(s, ",{:.2},{:.2}", 100.0 * r.cv.mean_overall, 100.0 * r.cv.std_overall);
        }
        s
    }

    pub fn folds_csv(&self) -> String {
        let mut s = String::from("method,fold,patients,overall\n");
        for r in &self.classification {
            for (i, f) in r.cv.folds.iter().enumerate() {
                let ids: Vec<String> = f.patients.iter().map(|p| p.to_string()).collect();
                let _ = writeln!(s, "{},{i},{},{:.4}", r.method, ids.join(" "), f.overall);
            }
        }
        s
    }

    pub fn text(&self) -> String {
        let mut s = String::from("Anomaly segmentation (pooled over test volumes)\n");
        let _ = writeln!(s, "{:<12} {:>6} {:>9} {:>6}", "Algorithm", "Dice", "Precision", "Recall");
        for r in &self.segmentation {
            let p = &r.pooled;
            let _ = writeln!(s, "{:<12} {:>6.2} {:>9.2} {:>6.2}", r.method, p.dice, p.precision, p.recall);
        }
        s.push_str("\nClassification accuracy (grouped cross-validation)\n");
        let names = self.classification.first().map(|r| r.cv.class_names.clone()).unwrap_or_default();
        let _ = write!(s, "{:<12}", "Algorithm");
        for n in &names {
            let _ = write!(s, " {n:>6}");
        }
        let _ = writeln!(s, " {:>14}", "overall");
        for r in &self.classification {
            let _ = write!(s, "{:<12}", r.method);
            for a in &r.cv.mean_per_class {
                let _ = write!(s, " {:>6.1}", 100.0 * a);
            }
            let _ = writeln!(s, " {:>14}", r.cv.summary());
        }
        s
    }
}

/// Healthy volumes only: fraction of scored superpixels labelled anomalous.
pub fn anomaly_fraction(models: &Models, volume: &Volume, cfg: &PipelineConfig, method: Method) -> Result<f64> {
    Ok(segment(models, volume, cfg, method)?.map.anomaly_fraction())
}

/// Number of in-retina superpixels over the given preprocessed volumes.
pub fn retina_superpixel_count(pre: &[Preprocessed]) -> usize {
    let inputs: Vec<DatasetInput<'_>> = pre
        .iter()
        .enumerate()
        .map(|(i, p)| DatasetInput {
            volume: i,
            patient: i,
            data: p,
        })
        .collect();
    retina_sources(&inputs).len()
}
