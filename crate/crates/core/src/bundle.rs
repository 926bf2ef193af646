//! Model bundle: a directory with a JSON manifest and `NCT1` tensor files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baseline::{BaselineMode, PcaBaseline};
use crate::cluster::ClusterModel;
use crate::config::PipelineConfig;
use crate::dcae::{build_model, TrainingLog};
use crate::error::{Error, Result};
use crate::numcore::io::{decode_tensors, write_tensor};
use crate::numcore::{PcaModel, Rng, Tensor};
use crate::ocsvm::{OcSvmModel, Standardizer};
use crate::patches::Preset;
use crate::pipeline::{Method, Models};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const DB_TRACE: &str = "db_trace.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundaryEntry {
    pub method: Method,
    pub rho: f64,
    pub nu: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub preset: Preset,
    pub config: PipelineConfig,
    pub scale_log: TrainingLog,
    pub fusion_log: TrainingLog,
    pub boundaries: Vec<BoundaryEntry>,
    pub cluster_k: Option<usize>,
    pub db_trace: Option<Vec<(usize, f64)>>,
    /// SHA-256 (hex) of every data file, keyed by file name.
    pub checksums: BTreeMap<String, String>,
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn encode(tensors: &[Tensor<f32>]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    for t in tensors {
        write_tensor(&mut buf, t)?;
    }
    Ok(buf)
}

fn to_f32(v: &[f64]) -> Tensor<f32> {
    Tensor::vector(v.iter().map(|&x| x as f32).collect())
}

fn of_f32(t: &Tensor<f32>) -> Vec<f64> {
    t.data().iter().map(|&x| x as f64).collect()
}

fn boundary_file(m: Method) -> String {
    format!("ocsvm_{}.nct", m.key())
}

fn pca_file(mode: BaselineMode, scale: u8) -> String {
    let tag = match mode {
        BaselineMode::Fixed => "fixed",
        BaselineMode::Variance => "variance",
    };
    format!("pca_{tag}_scale{scale}.nct")
}

fn data_files(models: &Models) -> Result<Vec<(String, Vec<u8>)>> {
    let mut files = Vec::new();
    let d = &models.dcae;
    for (name, net) in [("dcae_scale1.nct", &d.scale1), ("dcae_scale2.nct", &d.scale2), ("dcae_fusion.nct", &d.fusion)] {
        let params: Vec<Tensor<f32>> = net.params().cloned().collect();
        files.push((name.to_string(), encode(&params)?));
    }
    for p in [&models.pca_fixed, &models.pca_variance] {
        files.push((pca_file(p.mode, 1), encode(&p.scale1.to_tensors())?));
        files.push((pca_file(p.mode, 2), encode(&p.scale2.to_tensors())?));
    }
    for m in Method::ALL {
        let b = models.boundary(m);
        let t = [to_f32(&b.w), to_f32(&b.standardizer.center), to_f32(&b.standardizer.scale)];
        files.push((boundary_file(m), encode(&t)?));
    }
    if let Some(c) = &models.cluster {
        let d = c.centroids.first().map_or(0, Vec::len);
        let flat: Vec<f32> = c.centroids.iter().flatten().map(|&v| v as f32).collect();
        files.push(("cluster.nct".to_string(), encode(&[Tensor::new(vec![c.k, d], flat)?])?));
        files.push((DB_TRACE.to_string(), c.db_csv().into_bytes()));
    }
    Ok(files)
}

/// Exclusive lock on a bundle path, held by a sibling `<bundle>.lock` file.
#[derive(Debug)]
pub struct BundleLock {
    path: PathBuf,
}

impl BundleLock {
    pub fn acquire(bundle: &Path) -> Result<Self> {
        let path = sibling(bundle, "lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Usage(format!(
                "bundle {} is locked by another command ({} exists)",
                bundle.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for BundleLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn sibling(dir: &Path, ext: &str) -> PathBuf {
    let mut name = dir.file_name().map(|n| n.to_os_string()).unwrap_or_else(|| "bundle".into());
    name.push(".");
    name.push(ext);
    dir.with_file_name(name)
}

/// Writes the bundle into a staging directory and swaps it into place, so a
/// failed write never leaves a partial bundle at `dir`.
pub fn save(models: &Models, cfg: &PipelineConfig, dir: &Path) -> Result<Manifest> {
    let staging = sibling(dir, "partial");
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    let result = write_staging(models, cfg, &staging).and_then(|manifest| {
        if dir.exists() {
            let old = sibling(dir, "old");
            if old.exists() {
                fs::remove_dir_all(&old)?;
            }
            fs::rename(dir, &old)?;
            fs::rename(&staging, dir)?;
            fs::remove_dir_all(&old)?;
        } else {
            fs::rename(&staging, dir)?;
        }
        Ok(manifest)
    });
    if result.is_err() && staging.exists() {
        let _ = fs::remove_dir_all(&staging);
    }
    result
}

fn write_staging(models: &Models, cfg: &PipelineConfig, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut checksums = BTreeMap::new();
    for (name, bytes) in data_files(models)? {
        checksums.insert(name.clone(), hex_digest(&bytes));
        fs::write(dir.join(name), bytes)?;
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        preset: models.preset,
        config: cfg.clone(),
        scale_log: models.dcae.scale_log.clone(),
        fusion_log: models.dcae.fusion_log.clone(),
        boundaries: Method::ALL
            .iter()
            .map(|&m| BoundaryEntry {
                method: m,
                rho: models.boundary(m).rho,
                nu: models.boundary(m).nu,
            })
            .collect(),
        cluster_k: models.cluster.as_ref().map(|c| c.k),
        db_trace: models.cluster.as_ref().map(|c| c.db_trace.clone()),
        checksums,
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::format(&path, format!("cannot read manifest: {e}")))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::format(
            &path,
            format!("unsupported bundle format {} (expected {FORMAT_VERSION})", m.format_version),
        ));
    }
    Ok(m)
}

/// Reads and checksums one data file.
fn read_checked(dir: &Path, manifest: &Manifest, name: &str) -> Result<Vec<u8>> {
    let expected = manifest
        .checksums
        .get(name)
        .ok_or_else(|| Error::format(dir.join(MANIFEST), format!("no checksum for {name}")))?;
    let path = dir.join(name);
    let bytes = fs::read(&path).map_err(|e| Error::format(&path, e.to_string()))?;
    let got = hex_digest(&bytes);
    if &got != expected {
        return Err(Error::Checksum(format!("{}: expected {expected}, found {got}", path.display())));
    }
    Ok(bytes)
}

fn tensors(dir: &Path, manifest: &Manifest, name: &str) -> Result<Vec<Tensor<f32>>> {
    let bytes = read_checked(dir, manifest, name)?;
    decode_tensors(&bytes, &dir.join(name))
}

/// Verifies every checksum without building models.
pub fn verify(dir: &Path) -> Result<Manifest> {
    let m = read_manifest(dir)?;
    for name in m.checksums.keys() {
        read_checked(dir, &m, name)?;
    }
    Ok(m)
}

pub fn load(dir: &Path) -> Result<(Models, Manifest)> {
    let manifest = read_manifest(dir)?;
    let cfg = &manifest.config;
    let bad = |what: &str| Error::format(dir.join(MANIFEST), what.to_string());

    let mut dcae = build_model(manifest.preset, cfg.dcae.dropout, cfg.dcae.fusion_elu, &mut Rng::new(0))?;
    dcae.scale1.set_params(tensors(dir, &manifest, "dcae_scale1.nct")?)?;
    dcae.scale2.set_params(tensors(dir, &manifest, "dcae_scale2.nct")?)?;
    dcae.fusion.set_params(tensors(dir, &manifest, "dcae_fusion.nct")?)?;
    dcae.scales_trained = true;
    dcae.fusion_trained = true;
    dcae.scale_log = manifest.scale_log.clone();
    dcae.fusion_log = manifest.fusion_log.clone();

    let pca = |mode: BaselineMode| -> Result<PcaBaseline> {
        Ok(PcaBaseline {
            mode,
            preset: manifest.preset,
            scale1: PcaModel::from_tensors(&tensors(dir, &manifest, &pca_file(mode, 1))?)?,
            scale2: PcaModel::from_tensors(&tensors(dir, &manifest, &pca_file(mode, 2))?)?,
        })
    };
    let pca_fixed = pca(BaselineMode::Fixed)?;
    let pca_variance = pca(BaselineMode::Variance)?;

    if manifest.boundaries.len() != Method::ALL.len() {
        return Err(bad("expected one boundary per method"));
    }
    let mut boundaries = Vec::new();
    for (m, entry) in Method::ALL.iter().zip(&manifest.boundaries) {
        if entry.method != *m {
            return Err(bad("boundaries out of order"));
        }
        let t = tensors(dir, &manifest, &boundary_file(*m))?;
        let [w, center, scale] = t.as_slice() else {
            return Err(bad("boundary file needs 3 tensors"));
        };
        if w.len() != center.len() || w.len() != scale.len() {
            return Err(bad("inconsistent boundary tensors"));
        }
        boundaries.push(OcSvmModel {
            w: of_f32(w),
            rho: entry.rho,
            nu: entry.nu,
            standardizer: Standardizer {
                center: of_f32(center),
                scale: of_f32(scale),
            },
        });
    }

    let cluster = match (manifest.cluster_k, &manifest.db_trace) {
        (Some(k), Some(trace)) => {
            read_checked(dir, &manifest, DB_TRACE)?;
            let t = tensors(dir, &manifest, "cluster.nct")?;
            let [c] = t.as_slice() else {
                return Err(bad("cluster file needs 1 tensor"));
            };
            let &[rows, d] = c.shape() else {
                return Err(bad("centroids must be rank 2"));
            };
            if rows != k {
                return Err(bad("centroid count differs from k"));
            }
            Some(ClusterModel {
                k,
                centroids: c.data().chunks(d.max(1)).map(|r| r.iter().map(|&v| v as f64).collect()).collect(),
                db_trace: trace.clone(),
            })
        }
        (None, None) => None,
        _ => return Err(bad("cluster entries incomplete")),
    };

    let models = Models {
        preset: manifest.preset,
        dcae,
        pca_fixed,
        pca_variance,
        boundaries,
        cluster,
    };
    Ok((models, manifest))
}
