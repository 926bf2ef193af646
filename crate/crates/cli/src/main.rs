use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anomkit::bundle::{self, BundleLock};
use anomkit::config::PipelineConfig;
use anomkit::dataset::{load_split, write_benchmark};
use anomkit::phantom::{BenchmarkPlan, PhantomPreset, Split};
use anomkit::pipeline::{cluster_fit, evaluate, segment, Method, TestVolume};
use anomkit::{Error, Volume};
use clap::{Parser, Subcommand, ValueEnum};

/// Retinal anomaly detection with convolutional autoencoder features.
#[derive(Parser, Debug)]
#[command(name = "anomkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PresetArg {
    Desk,
    PaperShape,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MethodArg {
    Dcae,
    PcaFixed,
    PcaVariance,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Dcae => Method::Dcae,
            MethodArg::PcaFixed => Method::PcaFixed,
            MethodArg::PcaVariance => Method::PcaVariance,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic benchmark dataset (healthy, anomaly and test splits).
    GenPhantom {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = PresetArg::Desk)]
        preset: PresetArg,
    },
    /// Train the autoencoders, PCA baselines and boundaries on the healthy split.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// JSON pipeline configuration; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_bundle: PathBuf,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Cluster anomalous superpixels of the anomaly split and store the model in the bundle.
    ClusterFit {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Label one volume: a PGM raster per slice and a per-superpixel CSV.
    Segment {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = MethodArg::Dcae)]
        method: MethodArg,
    },
    /// Score all methods on the annotated test split.
    Evaluate {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn with_seed(mut cfg: PipelineConfig, seed: Option<u64>) -> PipelineConfig {
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg
}

fn gen_phantom(out: &Path, seed: u64, preset: PresetArg) -> anomkit::Result<()> {
    let preset = match preset {
        PresetArg::Desk => PhantomPreset::Desk,
        PresetArg::PaperShape => PhantomPreset::PaperShape,
    };
    let index = write_benchmark(&BenchmarkPlan::new(preset, seed), out)?;
    println!("wrote {} volumes to {}", index.entries.len(), out.display());
    Ok(())
}

fn train(data: &Path, config: Option<&Path>, out: &Path, seed: Option<u64>) -> anomkit::Result<()> {
    let cfg = match config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    let cfg = with_seed(cfg, seed);
    cfg.validate()?;
    let _lock = BundleLock::acquire(out)?;
    let healthy = load_split(data, Split::Healthy)?;
    let vols: Vec<&Volume> = healthy.iter().map(|e| &e.volume).collect();
    let models = anomkit::pipeline::train(&vols, &cfg)?;
    bundle::save(&models, &cfg, out)?;
    println!("bundle written to {}", out.display());
    Ok(())
}

fn cluster(bundle_dir: &Path, data: &Path, seed: Option<u64>) -> anomkit::Result<()> {
    let _lock = BundleLock::acquire(bundle_dir)?;
    let (mut models, manifest) = bundle::load(bundle_dir)?;
    let cfg = with_seed(manifest.config, seed);
    let anomaly = load_split(data, Split::Anomaly)?;
    let vols: Vec<&Volume> = anomaly.iter().map(|e| &e.volume).collect();
    let k = cluster_fit(&mut models, &vols, &cfg)?.k;
    bundle::save(&models, &cfg, bundle_dir)?;
    println!("selected k = {k}");
    Ok(())
}

/// Binary PGM with the label codes as gray levels.
fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> anomkit::Result<()> {
    let max = pixels.iter().copied().max().unwrap_or(0).max(2);
    let mut buf = format!("P5\n{width} {height}\n{max}\n").into_bytes();
    buf.extend_from_slice(pixels);
    fs::write(path, buf)?;
    Ok(())
}

fn segment_cmd(bundle_dir: &Path, volume: &Path, out: &Path, method: Method) -> anomkit::Result<()> {
    let _lock = BundleLock::acquire(bundle_dir)?;
    let (models, manifest) = bundle::load(bundle_dir)?;
    let vol = Volume::load(volume)?;
    let seg = segment(&models, &vol, &manifest.config, method)?;
    fs::create_dir_all(out)?;
    let labels = seg.label_image();
    let n = vol.slice_len();
    for s in 0..vol.slices {
        write_pgm(
            &out.join(format!("slice_{s:03}.pgm")),
            vol.width,
            vol.height,
            &labels[s * n..(s + 1) * n],
        )?;
    }
    fs::write(out.join("superpixels.csv"), seg.csv())?;
    println!(
        "{} superpixels scored, {:.1}% anomalous",
        seg.map.scores.len(),
        100.0 * seg.map.anomaly_fraction()
    );
    Ok(())
}

fn evaluate_cmd(bundle_dir: &Path, data: &Path, report: &Path, seed: Option<u64>) -> anomkit::Result<()> {
    let _lock = BundleLock::acquire(bundle_dir)?;
    let (models, manifest) = bundle::load(bundle_dir)?;
    let cfg = with_seed(manifest.config, seed);
    let test = load_split(data, Split::Test)?;
    let mut tv = Vec::with_capacity(test.len());
    for e in &test {
        let truth = e
            .truth
            .as_ref()
            .ok_or_else(|| Error::Input(format!("test volume of patient {} has no annotations", e.patient)))?;
        tv.push(TestVolume {
            patient: e.patient,
            volume: &e.volume,
            truth,
        });
    }
    let rep = evaluate(&models, &tv, &cfg)?;
    fs::create_dir_all(report)?;
    fs::write(report.join("metrics.csv"), rep.metric_value_csv())?;
    fs::write(report.join("segmentation.csv"), rep.segmentation_csv())?;
    fs::write(report.join("segmentation_per_volume.csv"), rep.per_volume_csv())?;
    fs::write(report.join("classification.csv"), rep.classification_csv())?;
    fs::write(report.join("folds.csv"), rep.folds_csv())?;
    let text = rep.text();
    fs::write(report.join("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn run(cli: Cli) -> anomkit::Result<()> {
    match cli.command {
        Command::GenPhantom { out, seed, preset } => gen_phantom(&out, seed, preset),
        Command::Train {
            data,
            config,
            out_bundle,
            seed,
        } => train(&data, config.as_deref(), &out_bundle, seed),
        Command::ClusterFit { bundle, data, seed } => cluster(&bundle, &data, seed),
        Command::Segment {
            bundle,
            volume,
            out,
            method,
        } => segment_cmd(&bundle, &volume, &out, method.into()),
        Command::Evaluate {
            bundle,
            data,
            report,
            seed,
        } => evaluate_cmd(&bundle, &data, &report, seed),
    }
}

fn init_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("ANOMKIT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("ANOMKIT_THREADS must be a positive integer, got {v:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Usage(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
