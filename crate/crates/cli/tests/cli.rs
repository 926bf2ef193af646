use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use anomkit::bundle;
use anomkit::config::PipelineConfig;
use anomkit::dataset::read_index;
use anomkit::preprocess::preprocess_volume;
use anomkit::Volume;
use tempfile::TempDir;

fn anomkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_anomkit"))
        .args(args)
        .env("ANOMKIT_THREADS", "2")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = anomkit(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// One generated benchmark shared by the tests of this file.
fn dataset() -> &'static Path {
    static DIR: OnceLock<TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        ok(&["gen-phantom", "--out", s(dir.path()), "--seed", "3"]);
        dir
    })
    .path()
}

fn small_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.dcae.max_pairs = Some(600);
    cfg.dcae.train.max_steps = Some(30);
    cfg.dcae.fusion.epochs = 3;
    cfg.ocsvm.max_samples = Some(600);
    cfg.cluster.k_max = 6;
    cfg.cluster.restarts = 2;
    cfg.cluster.max_samples = Some(1500);
    cfg.metrics.per_class = 60;
    cfg
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn missing_out_is_usage_error() {
    let out = anomkit(&["gen-phantom", "--seed", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_thread_count_is_usage_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_anomkit"))
        .args(["gen-phantom", "--out", "/nonexistent/x"])
        .env("ANOMKIT_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gen_phantom_counts_and_is_reproducible() {
    let index = read_index(dataset()).unwrap();
    let count = |split| index.entries.iter().filter(|e| e.split == split).count();
    use anomkit::phantom::Split;
    assert_eq!((count(Split::Healthy), count(Split::Anomaly), count(Split::Test)), (40, 40, 8));

    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ok(&["gen-phantom", "--out", s(a.path()), "--seed", "1"]);
    ok(&["gen-phantom", "--out", s(b.path()), "--seed", "1"]);
    assert!(files(a.path()) == files(b.path()));
}

#[test]
fn train_fails_without_healthy_split() {
    let empty = tempfile::tempdir().unwrap();
    fs::write(empty.path().join("index.json"), r#"{"seed": null, "entries": []}"#).unwrap();
    let bundle_dir = empty.path().join("bundle");
    let out = anomkit(&["train", "--data", s(empty.path()), "--out-bundle", s(&bundle_dir)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!bundle_dir.exists());
}

#[test]
fn pipeline_commands_end_to_end() {
    let work = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let cfg_path = work.path().join("config.json");
    fs::write(&cfg_path, cfg.to_json()).unwrap();
    let bundle_dir = work.path().join("bundle");
    let data = dataset();

    ok(&["train", "--data", s(data), "--config", s(&cfg_path), "--out-bundle", s(&bundle_dir)]);
    let manifest = bundle::verify(&bundle_dir).unwrap();
    assert_eq!(manifest.config, cfg);
    assert!(!bundle_dir.with_file_name("bundle.lock").exists());

    // segmentation before clustering leaves the cluster column empty
    let index = read_index(data).unwrap();
    let probe = data.join(&index.entries.iter().find(|e| e.split == anomkit::phantom::Split::Test).unwrap().volume);
    let seg1 = work.path().join("seg1");
    ok(&["segment", "--bundle", s(&bundle_dir), "--volume", s(&probe), "--out", s(&seg1)]);
    let csv = fs::read_to_string(seg1.join("superpixels.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    let vol = Volume::load(&probe).unwrap();
    let pre = preprocess_volume(&vol, &cfg.preprocess).unwrap();
    assert_eq!(rows.len(), pre.retina_superpixels().count());
    assert!(rows.iter().all(|r| r.ends_with(',')));
    assert_eq!(fs::read_dir(&seg1).unwrap().count(), vol.slices + 1);
    let pgm = fs::read(seg1.join("slice_000.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n128 128\n"));

    ok(&["cluster-fit", "--bundle", s(&bundle_dir), "--data", s(data)]);
    let trace = fs::read_to_string(bundle_dir.join("db_trace.csv")).unwrap();
    let ks: Vec<usize> = trace.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(ks, (cfg.cluster.k_min..=cfg.cluster.k_max).collect::<Vec<_>>());
    let centroids = fs::read(bundle_dir.join("cluster.nct")).unwrap();
    ok(&["cluster-fit", "--bundle", s(&bundle_dir), "--data", s(data)]);
    assert_eq!(fs::read(bundle_dir.join("cluster.nct")).unwrap(), centroids);

    let seg2 = work.path().join("seg2");
    ok(&["segment", "--bundle", s(&bundle_dir), "--volume", s(&probe), "--out", s(&seg2)]);
    let csv = fs::read_to_string(seg2.join("superpixels.csv")).unwrap();
    for row in csv.lines().skip(1) {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols.len(), 5);
        assert_eq!(cols[3] == "anomaly", !cols[4].is_empty(), "{row}");
    }

    let r1 = work.path().join("r1");
    let r2 = work.path().join("r2");
    ok(&["evaluate", "--bundle", s(&bundle_dir), "--data", s(data), "--report", s(&r1)]);
    ok(&["evaluate", "--bundle", s(&bundle_dir), "--data", s(data), "--report", s(&r2)]);
    assert!(files(&r1) == files(&r2));
    for table in ["segmentation.csv", "classification.csv"] {
        let text = fs::read_to_string(r1.join(table)).unwrap();
        assert_eq!(text.lines().count(), 4, "{table}");
    }

    // a corrupted tensor file fails the checksum
    let f = bundle_dir.join("ocsvm_dcae.nct");
    let mut bytes = fs::read(&f).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    fs::write(&f, bytes).unwrap();
    let out = anomkit(&["segment", "--bundle", s(&bundle_dir), "--volume", s(&probe), "--out", s(&seg2)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checksum"));
}

#[test]
fn locked_bundle_is_refused() {
    let work = tempfile::tempdir().unwrap();
    let bundle_dir = work.path().join("b");
    fs::write(work.path().join("b.lock"), "").unwrap();
    let out = anomkit(&["train", "--data", s(dataset()), "--out-bundle", s(&bundle_dir)]);
    assert_eq!(out.status.code(), Some(2));
}
