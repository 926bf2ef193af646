//! Volumes of stacked slices and their ground truth, plus the `OCTV`/`OCTG` file formats.
//!
//! `OCTV`: magic, `u32` width, height, slices, then `f32` intensities, slice-major
//! (slice, row, column), little-endian.
//!
//! `OCTG`: magic, `u32` width, height, slices, one `u8` type label per voxel in the
//! same order, then the true top and bottom surface heights as `f32` per
//! (slice, column).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VOLUME_MAGIC: &[u8; 4] = b"OCTV";
pub const TRUTH_MAGIC: &[u8; 4] = b"OCTG";

/// 3-D intensity raster; each slice is a `height x width` image (rows are depth).
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub width: usize,
    pub height: usize,
    pub slices: usize,
    pub data: Vec<f32>,
}

impl Volume {
    pub fn zeros(width: usize, height: usize, slices: usize) -> Self {
        Self {
            width,
            height,
            slices,
            data: vec![0.0; width * height * slices],
        }
    }

    pub fn from_data(width: usize, height: usize, slices: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * slices || data.is_empty() {
            return Err(Error::dim(format!(
                "volume {width}x{height}x{slices} needs {} values, got {}",
                width * height * slices,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            slices,
            data,
        })
    }

    pub fn slice_len(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn index(&self, slice: usize, row: usize, col: usize) -> usize {
        (slice * self.height + row) * self.width + col
    }

    #[inline]
    pub fn get(&self, slice: usize, row: usize, col: usize) -> f32 {
        self.data[self.index(slice, row, col)]
    }

    pub fn slice(&self, s: usize) -> &[f32] {
        let n = self.slice_len();
        &self.data[s * n..(s + 1) * n]
    }

    pub fn slice_mut(&mut self, s: usize) -> &mut [f32] {
        let n = self.slice_len();
        &mut self.data[s * n..(s + 1) * n]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(16 + self.data.len() * 4);
        buf.extend_from_slice(VOLUME_MAGIC);
        for d in [self.width, self.height, self.slices] {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let (w, h, s) = read_header(bytes, VOLUME_MAGIC, origin)?;
        let n = w * h * s;
        let body = &bytes[16..];
        if body.len() != n * 4 {
            return Err(Error::format(origin, format!("expected {} data bytes, found {}", n * 4, body.len())));
        }
        let data = body
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Volume::from_data(w, h, s, data).map_err(|e| Error::format(origin, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, path)
    }
}

fn read_header(bytes: &[u8], magic: &[u8; 4], origin: &Path) -> Result<(usize, usize, usize)> {
    if bytes.len() < 16 || &bytes[..4] != magic {
        return Err(Error::format(
            origin,
            format!("missing {} header", String::from_utf8_lossy(magic)),
        ));
    }
    let u = |i: usize| u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]) as usize;
    Ok((u(4), u(8), u(12)))
}

/// Per-voxel anomaly category.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum AnomalyKind {
    None = 0,
    CystBlob = 1,
    SubsurfaceFluid = 2,
    SurfaceDeformation = 3,
}

impl AnomalyKind {
    pub const ANOMALOUS: [AnomalyKind; 3] = [
        AnomalyKind::CystBlob,
        AnomalyKind::SubsurfaceFluid,
        AnomalyKind::SurfaceDeformation,
    ];

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(AnomalyKind::None),
            1 => Some(AnomalyKind::CystBlob),
            2 => Some(AnomalyKind::SubsurfaceFluid),
            3 => Some(AnomalyKind::SurfaceDeformation),
            _ => None,
        }
    }
}

/// Voxel-wise anomaly labels and the true retina surfaces.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub width: usize,
    pub height: usize,
    pub slices: usize,
    pub labels: Vec<AnomalyKind>,
    /// True top surface height per (slice, column), in rows.
    pub top: Vec<f32>,
    /// True bottom surface height per (slice, column), in rows.
    pub bottom: Vec<f32>,
}

impl GroundTruth {
    pub fn anomaly_mask(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l != AnomalyKind::None).collect()
    }

    pub fn anomaly_voxels(&self) -> usize {
        self.labels.iter().filter(|&&l| l != AnomalyKind::None).count()
    }

    pub fn label(&self, slice: usize, row: usize, col: usize) -> AnomalyKind {
        self.labels[(slice * self.height + row) * self.width + col]
    }

    pub fn surface_index(&self, slice: usize, col: usize) -> usize {
        slice * self.width + col
    }

    /// Voxel mask of the true retina band, slice-major like the volume.
    pub fn retina_mask(&self) -> Vec<bool> {
        let (w, h) = (self.width, self.height);
        let mut m = vec![false; self.labels.len()];
        for s in 0..self.slices {
            for c in 0..w {
                let i = self.surface_index(s, c);
                for r in 0..h {
                    let y = r as f32 + 0.5;
                    m[(s * h + r) * w + c] = y >= self.top[i] && y < self.bottom[i];
                }
            }
        }
        m
    }

    /// Voxels with row inside `[top, bottom)` of the true surfaces.
    pub fn retina_voxels(&self) -> usize {
        (0..self.slices)
            .flat_map(|s| (0..self.width).map(move |c| (s, c)))
            .map(|(s, c)| {
                let i = self.surface_index(s, c);
                (0..self.height)
                    .filter(|&r| {
                        let y = r as f32 + 0.5;
                        y >= self.top[i] && y < self.bottom[i]
                    })
                    .count()
            })
            .sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(16 + self.labels.len() + self.top.len() * 8);
        buf.extend_from_slice(TRUTH_MAGIC);
        for d in [self.width, self.height, self.slices] {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        buf.extend(self.labels.iter().map(|&l| l as u8));
        for v in self.top.iter().chain(&self.bottom) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let (w, h, s) = read_header(bytes, TRUTH_MAGIC, origin)?;
        let n = w * h * s;
        let ns = w * s;
        let body = &bytes[16..];
        if body.len() != n + ns * 8 {
            return Err(Error::format(origin, "ground truth size mismatch"));
        }
        let labels = body[..n]
            .iter()
            .map(|&b| AnomalyKind::from_u8(b).ok_or_else(|| Error::format(origin, format!("bad label {b}"))))
            .collect::<Result<Vec<_>>>()?;
        let floats: Vec<f32> = body[n..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Ok(Self {
            width: w,
            height: h,
            slices: s,
            labels,
            top: floats[..ns].to_vec(),
            bottom: floats[ns..].to_vec(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, path)
    }
}
