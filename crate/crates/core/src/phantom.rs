//! Deterministic layered "retina-like" phantom volumes with voxel-wise ground truth.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Rng;
use crate::volume::{AnomalyKind, GroundTruth, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetinaLayer {
    pub intensity: f64,
    /// Share of the retina thickness occupied by this layer.
    pub fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnomalySpec {
    pub kind: AnomalyKind,
    /// Inclusive range of instances per volume.
    pub count: [usize; 2],
    /// Full extent along the columns, px.
    pub width: [f64; 2],
    /// Full extent along the rows, px (lens/bump peak height for fluid and deformation).
    pub height: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomConfig {
    pub width: usize,
    pub height: usize,
    pub slices: usize,
    pub vitreous_intensity: f64,
    pub choroid_intensity: f64,
    /// Retina layers from the top surface down; the last one is the bright bottom layer.
    pub layers: Vec<RetinaLayer>,
    /// Mean top/bottom surface rows as fractions of the height.
    pub top_row: f64,
    pub bottom_row: f64,
    /// Depth of the bowl shape shared by both surfaces, px.
    pub curvature_px: f64,
    /// Spline control points per boundary.
    pub control_points: usize,
    /// Peak amplitude of the random boundary perturbation, px.
    pub amplitude_px: f64,
    /// Multiplicative speckle half-width: factors are uniform in `[1 - s, 1 + s]`.
    pub speckle: f64,
    pub fluid_intensity: f64,
    pub anomalies: Vec<AnomalySpec>,
    pub seed: u64,
}

/// Maximum surface slope (px per column) produced by a bump.
const MAX_BUMP_SLOPE: f64 = 1.2;
const PLACEMENT_RETRIES: usize = 200;

impl PhantomConfig {
    /// Desk-scale volume: 128 x 128 x 8 with all three anomaly types.
    pub fn desk() -> Self {
        Self {
            width: 128,
            height: 128,
            slices: 8,
            vitreous_intensity: 0.05,
            choroid_intensity: 0.2,
            layers: vec![
                RetinaLayer { intensity: 0.75, fraction: 0.12 },
                RetinaLayer { intensity: 0.45, fraction: 0.25 },
                RetinaLayer { intensity: 0.3, fraction: 0.15 },
                RetinaLayer { intensity: 0.55, fraction: 0.34 },
                RetinaLayer { intensity: 0.95, fraction: 0.14 },
            ],
            top_row: 0.31,
            bottom_row: 0.72,
            curvature_px: 6.0,
            control_points: 6,
            amplitude_px: 3.0,
            speckle: 0.35,
            fluid_intensity: 0.05,
            anomalies: vec![
                AnomalySpec {
                    kind: AnomalyKind::CystBlob,
                    count: [10, 14],
                    width: [12.0, 22.0],
                    height: [7.0, 13.0],
                },
                AnomalySpec {
                    kind: AnomalyKind::SubsurfaceFluid,
                    count: [10, 14],
                    width: [24.0, 44.0],
                    height: [5.0, 9.0],
                },
                AnomalySpec {
                    kind: AnomalyKind::SurfaceDeformation,
                    count: [2, 3],
                    width: [20.0, 32.0],
                    height: [5.0, 9.0],
                },
            ],
            seed: 0,
        }
    }

    /// Scanner-shaped volume (512 x 496 x 49), anomaly sizes scaled with the width.
    pub fn paper_shape() -> Self {
        let mut c = Self::desk();
        let sx = 512.0 / 128.0;
        let sy = 496.0 / 128.0;
        c.width = 512;
        c.height = 496;
        c.slices = 49;
        c.curvature_px *= sy;
        c.amplitude_px *= sy;
        for a in &mut c.anomalies {
            a.width = [a.width[0] * sx, a.width[1] * sx];
            a.height = [a.height[0] * sy, a.height[1] * sy];
            a.count = [a.count[0] * 6, a.count[1] * 6];
        }
        c
    }

    pub fn healthy(mut self) -> Self {
        self.anomalies.clear();
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::param(m));
        if self.width < 8 || self.height < 8 || self.slices == 0 {
            return bad(format!("volume {}x{}x{} too small", self.width, self.height, self.slices));
        }
        if self.layers.is_empty() {
            return bad("at least one retina layer required".into());
        }
        let mut levels: Vec<f64> = self.layers.iter().map(|l| l.intensity).collect();
        levels.push(self.vitreous_intensity);
        levels.push(self.choroid_intensity);
        for (i, a) in levels.iter().enumerate() {
            for b in &levels[i + 1..] {
                if (a - b).abs() < 0.1 - 1e-12 {
                    return bad(format!("layer intensities {a} and {b} differ by less than 0.1"));
                }
            }
        }
        let total: f64 = self.layers.iter().map(|l| l.fraction).sum();
        if self.layers.iter().any(|l| l.fraction <= 0.0) || (total - 1.0).abs() > 1e-6 {
            return bad("layer fractions must be positive and sum to 1".into());
        }
        if !(0.0 < self.top_row && self.top_row < self.bottom_row && self.bottom_row < 1.0) {
            return bad("need 0 < top_row < bottom_row < 1".into());
        }
        if !(0.0..1.0).contains(&self.speckle) || self.control_points < 2 {
            return bad("speckle must lie in [0, 1) and control_points >= 2".into());
        }
        let band = (self.bottom_row - self.top_row) * self.height as f64;
        for a in &self.anomalies {
            if a.kind == AnomalyKind::None || a.count[0] > a.count[1] {
                return bad(format!("invalid anomaly spec {a:?}"));
            }
            if a.width[0] <= 0.0 || a.width[0] > a.width[1] || a.height[0] <= 0.0 || a.height[0] > a.height[1] {
                return bad(format!("invalid anomaly size range {a:?}"));
            }
            if a.height[1] >= 0.5 * band || a.width[1] >= self.width as f64 - 4.0 {
                return bad(format!("anomaly {:?} does not fit inside the retina band", a.kind));
            }
        }
        Ok(())
    }
}

/// Catmull-Rom interpolation of evenly spaced control values over `n` columns.
fn spline(ctrl: &[f64], n: usize) -> Vec<f64> {
    let m = ctrl.len();
    let at = |i: isize| ctrl[i.clamp(0, m as isize - 1) as usize];
    (0..n)
        .map(|c| {
            let t = c as f64 / (n - 1).max(1) as f64 * (m - 1) as f64;
            let i = (t.floor() as isize).min(m as isize - 2);
            let u = t - i as f64;
            let (p0, p1, p2, p3) = (at(i - 1), at(i), at(i + 1), at(i + 2));
            0.5 * (2.0 * p1
                + (-p0 + p2) * u
                + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * u * u
                + (-p0 + 3.0 * p1 - 3.0 * p2 + p3) * u * u * u)
        })
        .collect()
}

/// Raised-cosine profile of peak `h` over `[c0 - w/2, c0 + w/2]`.
fn bump(c: f64, c0: f64, w: f64, h: f64) -> f64 {
    let d = (c - c0) / (0.5 * w);
    if d.abs() >= 1.0 {
        0.0
    } else {
        h * 0.5 * (1.0 + (std::f64::consts::PI * d).cos())
    }
}

#[derive(Clone, Debug)]
struct Deformer {
    slice: usize,
    kind: AnomalyKind,
    c0: f64,
    width: f64,
    height: f64,
}

#[derive(Clone, Debug)]
struct Cyst {
    slice: usize,
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
}

/// Per-slice boundary rows, `boundaries[i][c]` for i in `0..=layers`.
fn base_boundaries(cfg: &PhantomConfig, rng: &mut Rng) -> Vec<Vec<f64>> {
    let w = cfg.width;
    let h = cfg.height as f64;
    let bowl: Vec<f64> = (0..w)
        .map(|c| {
            let x = (c as f64 + 0.5 - 0.5 * w as f64) / (0.5 * w as f64);
            cfg.curvature_px * (1.0 - x * x)
        })
        .collect();
    let perturb = |rng: &mut Rng| {
        let ctrl: Vec<f64> = (0..cfg.control_points)
            .map(|_| rng.uniform_in(-cfg.amplitude_px, cfg.amplitude_px))
            .collect();
        spline(&ctrl, w)
    };
    let top_p = perturb(rng);
    let bot_p = perturb(rng);
    let top: Vec<f64> = (0..w).map(|c| cfg.top_row * h + bowl[c] + top_p[c]).collect();
    let bottom: Vec<f64> = (0..w).map(|c| cfg.bottom_row * h + bowl[c] + bot_p[c]).collect();
    let mut out = vec![top.clone()];
    let mut cum = 0.0;
    for l in &cfg.layers[..cfg.layers.len() - 1] {
        cum += l.fraction;
        out.push((0..w).map(|c| top[c] + cum * (bottom[c] - top[c])).collect());
    }
    out.push(bottom);
    out
}

/// Renders one volume and its ground truth from `config`.
pub fn generate_volume(config: &PhantomConfig) -> Result<(Volume, GroundTruth)> {
    config.validate()?;
    let cfg = config;
    let (w, h, ns) = (cfg.width, cfg.height, cfg.slices);
    let nl = cfg.layers.len();
    let mut rng = Rng::new(cfg.seed);
    let mut bounds: Vec<Vec<Vec<f64>>> = (0..ns).map(|_| base_boundaries(cfg, &mut rng)).collect();

    // surface-deforming anomalies first; column intervals may not overlap within a slice
    let mut deformers: Vec<Deformer> = Vec::new();
    let mut cysts: Vec<Cyst> = Vec::new();
    let mut draws: Vec<(AnomalyKind, f64, f64, &AnomalySpec)> = Vec::new();
    for spec in &cfg.anomalies {
        let n = rng.int_in(spec.count[0], spec.count[1]);
        for _ in 0..n {
            let aw = rng.uniform_in(spec.width[0], spec.width[1]);
            let ah = rng.uniform_in(spec.height[0], spec.height[1]);
            draws.push((spec.kind, aw, ah, spec));
        }
    }
    for &(kind, aw, ah, spec) in draws.iter().filter(|d| d.0 != AnomalyKind::CystBlob) {
        let ah = ah.min(MAX_BUMP_SLOPE * aw / std::f64::consts::PI);
        let mut placed = false;
        for _ in 0..PLACEMENT_RETRIES {
            let slice = rng.index(ns);
            let c0 = rng.uniform_in(0.5 * aw + 2.0, w as f64 - 0.5 * aw - 2.0);
            let clash = deformers.iter().any(|d| {
                d.slice == slice && (d.c0 - c0).abs() < 0.5 * (d.width + aw) + 3.0
            });
            if !clash {
                deformers.push(Deformer { slice, kind, c0, width: aw, height: ah });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(format!("could not place anomaly {spec:?}")));
        }
    }
    // lens: every boundary above the bottom layer moves up; bump: the top surface
    // rises and inner boundaries follow with halving weight
    let mut original_top: Vec<Vec<f64>> = bounds.iter().map(|b| b[0].clone()).collect();
    let mut lens_top: Vec<Vec<f64>> = vec![vec![f64::INFINITY; w]; ns];
    for d in &deformers {
        let b = &mut bounds[d.slice];
        for c in 0..w {
            let t = bump(c as f64 + 0.5, d.c0, d.width, d.height);
            if t <= 0.0 {
                continue;
            }
            match d.kind {
                AnomalyKind::SubsurfaceFluid => {
                    for bi in b.iter_mut().take(nl - 1) {
                        bi[c] -= t;
                    }
                    original_top[d.slice][c] -= t;
                    lens_top[d.slice][c] = b[nl - 1][c] - t;
                }
                AnomalyKind::SurfaceDeformation => {
                    let mut weight = 1.0;
                    for bi in b.iter_mut().take(nl - 1) {
                        bi[c] -= t * weight;
                        weight *= 0.5;
                    }
                }
                _ => unreachable!("cysts are placed separately"),
            }
        }
    }

    for &(_, aw, ah, spec) in draws.iter().filter(|d| d.0 == AnomalyKind::CystBlob) {
        let (a, bsemi) = (0.5 * aw, 0.5 * ah);
        let mut placed = false;
        for _ in 0..PLACEMENT_RETRIES {
            let slice = rng.index(ns);
            let cx = rng.uniform_in(a + 2.0, w as f64 - a - 2.0);
            let span = ((cx - a).floor().max(0.0) as usize)..((cx + a).ceil() as usize).min(w);
            let b = &bounds[slice];
            let lo = span.clone().map(|c| b[0][c]).fold(f64::MIN, f64::max) + bsemi + 2.0;
            let hi = span
                .clone()
                .map(|c| b[nl - 1][c].min(lens_top[slice][c]))
                .fold(f64::MAX, f64::min)
                - bsemi
                - 2.0;
            if lo >= hi {
                continue;
            }
            let cy = rng.uniform_in(lo, hi);
            let clash = cysts.iter().any(|o| {
                o.slice == slice
                    && (o.cx - cx).abs() < o.a + a + 2.0
                    && (o.cy - cy).abs() < o.b + bsemi + 2.0
            }) || deformers.iter().any(|d| {
                d.slice == slice
                    && d.kind == AnomalyKind::SurfaceDeformation
                    && (d.c0 - cx).abs() < 0.5 * d.width + a + 2.0
                    && cy - bsemi < original_top[slice][cx as usize] + 2.0
            });
            if !clash {
                cysts.push(Cyst { slice, cx, cy, a, b: bsemi });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(format!("could not place anomaly {spec:?}")));
        }
    }

    let mut vol = Volume::zeros(w, h, ns);
    let mut labels = vec![AnomalyKind::None; w * h * ns];
    let mut top = vec![0f32; w * ns];
    let mut bottom = vec![0f32; w * ns];
    for s in 0..ns {
        let b = &bounds[s];
        for c in 0..w {
            top[s * w + c] = b[0][c] as f32;
            bottom[s * w + c] = b[nl][c] as f32;
            for r in 0..h {
                let y = r as f64 + 0.5;
                let idx = vol.index(s, r, c);
                let (mut val, mut label) = if y < b[0][c] {
                    (cfg.vitreous_intensity, AnomalyKind::None)
                } else if y >= b[nl][c] {
                    (cfg.choroid_intensity, AnomalyKind::None)
                } else {
                    let layer = (0..nl).rev().find(|&i| y >= b[i][c]).unwrap_or(0);
                    (cfg.layers[layer].intensity, AnomalyKind::None)
                };
                if y >= lens_top[s][c] && y < b[nl - 1][c] {
                    val = cfg.fluid_intensity;
                    label = AnomalyKind::SubsurfaceFluid;
                } else if y >= b[0][c] && y < original_top[s][c] {
                    label = AnomalyKind::SurfaceDeformation;
                }
                vol.data[idx] = val as f32;
                labels[idx] = label;
            }
        }
    }
    for cy in &cysts {
        let r0 = (cy.cy - cy.b).floor().max(0.0) as usize;
        let r1 = ((cy.cy + cy.b).ceil() as usize).min(h);
        let c0 = (cy.cx - cy.a).floor().max(0.0) as usize;
        let c1 = ((cy.cx + cy.a).ceil() as usize).min(w);
        for r in r0..r1 {
            for c in c0..c1 {
                let dx = (c as f64 + 0.5 - cy.cx) / cy.a;
                let dy = (r as f64 + 0.5 - cy.cy) / cy.b;
                if dx * dx + dy * dy <= 1.0 {
                    let idx = vol.index(cy.slice, r, c);
                    vol.data[idx] = cfg.fluid_intensity as f32;
                    labels[idx] = AnomalyKind::CystBlob;
                }
            }
        }
    }
    if cfg.speckle > 0.0 {
        for v in vol.data.iter_mut() {
            *v *= rng.uniform_in(1.0 - cfg.speckle, 1.0 + cfg.speckle) as f32;
        }
    }
    let truth = GroundTruth {
        width: w,
        height: h,
        slices: ns,
        labels,
        top,
        bottom,
    };
    Ok((vol, truth))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Healthy,
    Anomaly,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Healthy => "healthy",
            Split::Anomaly => "anomaly",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhantomPreset {
    Desk,
    PaperShape,
}

/// Volume counts and seeds of a benchmark dataset, generated one volume at a time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkPlan {
    pub base: PhantomConfig,
    pub n_healthy: usize,
    pub n_anomaly: usize,
    pub n_test: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlanEntry {
    pub split: Split,
    /// Global volume index; doubles as the patient id.
    pub index: usize,
    pub config: PhantomConfig,
}

#[derive(Clone, Debug)]
pub struct PhantomVolume {
    pub split: Split,
    pub patient: usize,
    pub volume: Volume,
    pub truth: GroundTruth,
}

#[derive(Clone, Debug)]
pub struct Benchmark {
    pub healthy: Vec<PhantomVolume>,
    pub anomaly: Vec<PhantomVolume>,
    pub test: Vec<PhantomVolume>,
}

impl BenchmarkPlan {
    pub fn new(preset: PhantomPreset, seed: u64) -> Self {
        let base = match preset {
            PhantomPreset::Desk => PhantomConfig::desk(),
            PhantomPreset::PaperShape => PhantomConfig::paper_shape(),
        };
        Self {
            base,
            n_healthy: 40,
            n_anomaly: 40,
            n_test: 8,
            seed,
        }
    }

    pub fn total(&self) -> usize {
        self.n_healthy + self.n_anomaly + self.n_test
    }

    /// Every volume of the plan; each gets the sub-seed `seed ^ index`.
    pub fn entries(&self) -> Vec<PlanEntry> {
        (0..self.total())
            .map(|index| {
                let split = if index < self.n_healthy {
                    Split::Healthy
                } else if index < self.n_healthy + self.n_anomaly {
                    Split::Anomaly
                } else {
                    Split::Test
                };
                let mut config = self.base.clone().with_seed(self.seed ^ index as u64);
                if split == Split::Healthy {
                    config = config.healthy();
                }
                PlanEntry { split, index, config }
            })
            .collect()
    }

    pub fn generate_entry(entry: &PlanEntry) -> Result<PhantomVolume> {
        let (volume, truth) = generate_volume(&entry.config)?;
        Ok(PhantomVolume {
            split: entry.split,
            patient: entry.index,
            volume,
            truth,
        })
    }

    pub fn generate(&self) -> Result<Benchmark> {
        use rayon::prelude::*;
        let vols: Vec<PhantomVolume> = self
            .entries()
            .par_iter()
            .map(Self::generate_entry)
            .collect::<Result<_>>()?;
        let mut b = Benchmark {
            healthy: vec![],
            anomaly: vec![],
            test: vec![],
        };
        for v in vols {
            match v.split {
                Split::Healthy => b.healthy.push(v),
                Split::Anomaly => b.anomaly.push(v),
                Split::Test => b.test.push(v),
            }
        }
        Ok(b)
    }
}

/// Desk-scale benchmark: 40 healthy, 40 unlabeled anomalous and 8 annotated test volumes.
pub fn generate_benchmark(seed: u64) -> Result<Benchmark> {
    BenchmarkPlan::new(PhantomPreset::Desk, seed).generate()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn healthy_config_has_empty_mask() {
        let (_, gt) = generate_volume(&PhantomConfig::desk().healthy().with_seed(3)).unwrap();
        assert_eq!(gt.anomaly_voxels(), 0);
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let cfg = PhantomConfig::desk().with_seed(9);
        let (a, ga) = generate_volume(&cfg).unwrap();
        let (b, gb) = generate_volume(&cfg).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(ga, gb);
    }

    #[test]
    fn single_cyst_area_matches_ellipse() {
        let mut cfg = PhantomConfig::desk().with_seed(5);
        cfg.slices = 1;
        cfg.anomalies = vec![AnomalySpec {
            kind: AnomalyKind::CystBlob,
            count: [1, 1],
            width: [10.0, 10.0],
            height: [6.0, 6.0],
        }];
        let (_, gt) = generate_volume(&cfg).unwrap();
        let area = gt.anomaly_voxels() as f64;
        let ellipse = std::f64::consts::PI * 5.0 * 3.0;
        assert!(area >= 0.5 * ellipse && area <= 1.5 * ellipse, "area {area}");
    }

    #[test]
    fn surfaces_ordered_and_smooth() {
        let (_, gt) = generate_volume(&PhantomConfig::desk().with_seed(1)).unwrap();
        for s in 0..gt.slices {
            for c in 0..gt.width {
                let i = gt.surface_index(s, c);
                assert!(gt.top[i] < gt.bottom[i]);
                if c > 0 {
                    assert!((gt.top[i] - gt.top[i - 1]).abs() <= 2.0);
                    assert!((gt.bottom[i] - gt.bottom[i - 1]).abs() <= 2.0);
                }
            }
        }
    }

    #[test]
    fn rejects_close_intensities() {
        let mut cfg = PhantomConfig::desk();
        cfg.layers[1].intensity = 0.5;
        assert!(matches!(cfg.validate(), Err(Error::Parameter(_))));
    }

    #[test]
    fn unplaceable_anomalies_are_reported() {
        let mut cfg = PhantomConfig::desk().with_seed(2);
        cfg.slices = 1;
        cfg.anomalies = vec![AnomalySpec {
            kind: AnomalyKind::SubsurfaceFluid,
            count: [40, 40],
            width: [60.0, 60.0],
            height: [5.0, 5.0],
        }];
        let err = generate_volume(&cfg).unwrap_err();
        assert!(matches!(err, Error::Generation(ref m) if m.contains("SubsurfaceFluid")));
    }
}
