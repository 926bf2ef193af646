//! SLIC superpixels on single-channel slices, with connectivity enforcement.

use crate::error::{Error, Result};

/// Connected pixel group within one slice.
#[derive(Clone, Debug, PartialEq)]
pub struct Superpixel {
    /// Index within the slice, in grid order of the surviving seeds.
    pub id: usize,
    pub slice: usize,
    /// Member pixels as `row * width + col`, ascending.
    pub pixels: Vec<u32>,
    /// Mean (row, col) of the members.
    pub centroid: (f64, f64),
    pub in_retina: bool,
}

impl Superpixel {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }

    /// Centroid rounded to the nearest pixel.
    pub fn center(&self) -> (usize, usize) {
        (self.centroid.0.round() as usize, self.centroid.1.round() as usize)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SlicParams {
    /// Mean superpixel area in px^2.
    pub target_area: f64,
    /// Weight `m` of spatial against intensity distance.
    pub compactness: f64,
    pub iterations: usize,
}

impl Default for SlicParams {
    fn default() -> Self {
        Self {
            target_area: 16.0,
            compactness: 0.3,
            iterations: 10,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Center {
    r: f64,
    c: f64,
    v: f64,
}

/// Over-segments an `h x w` slice; every pixel ends in exactly one connected superpixel.
pub fn slic_superpixels(img: &[f32], w: usize, h: usize, slice: usize, params: &SlicParams) -> Result<Vec<Superpixel>> {
    if !(params.target_area >= 4.0) {
        return Err(Error::param(format!("target area {} below 4", params.target_area)));
    }
    if img.len() != w * h || img.is_empty() {
        return Err(Error::dim("slice size mismatch"));
    }
    let s = params.target_area.sqrt();
    if (w as f64) < s || (h as f64) < s {
        return Ok(vec![build(0, slice, (0..(w * h) as u32).collect(), w)]);
    }
    let nx = ((w as f64 / s).round() as usize).max(1);
    let ny = ((h as f64 / s).round() as usize).max(1);
    let (cw, ch) = (w as f64 / nx as f64, h as f64 / ny as f64);
    let mut centers: Vec<Center> = Vec::with_capacity(nx * ny);
    for i in 0..ny {
        for j in 0..nx {
            let (r0, r1) = ((i as f64 * ch).round() as usize, (((i + 1) as f64 * ch).round() as usize).min(h));
            let (c0, c1) = ((j as f64 * cw).round() as usize, (((j + 1) as f64 * cw).round() as usize).min(w));
            let mut sum = 0.0;
            for r in r0..r1 {
                for c in c0..c1 {
                    sum += img[r * w + c] as f64;
                }
            }
            let n = ((r1 - r0) * (c1 - c0)).max(1) as f64;
            centers.push(Center {
                r: (i as f64 + 0.5) * ch - 0.5,
                c: (j as f64 + 0.5) * cw - 0.5,
                v: sum / n,
            });
        }
    }
    let spatial = (params.compactness / s).powi(2);
    let mut labels = vec![u32::MAX; w * h];
    let mut dist = vec![f64::INFINITY; w * h];
    let reach = s.ceil() as isize * 2;
    for _ in 0..params.iterations.max(1) {
        dist.fill(f64::INFINITY);
        for (k, ct) in centers.iter().enumerate() {
            let (cr, cc) = (ct.r.round() as isize, ct.c.round() as isize);
            let r0 = (cr - reach).max(0) as usize;
            let r1 = ((cr + reach + 1).max(0) as usize).min(h);
            let c0 = (cc - reach).max(0) as usize;
            let c1 = ((cc + reach + 1).max(0) as usize).min(w);
            for r in r0..r1 {
                for c in c0..c1 {
                    let dv = img[r * w + c] as f64 - ct.v;
                    let dr = r as f64 - ct.r;
                    let dc = c as f64 - ct.c;
                    let d = dv * dv + spatial * (dr * dr + dc * dc);
                    let i = r * w + c;
                    if d < dist[i] {
                        dist[i] = d;
                        labels[i] = k as u32;
                    }
                }
            }
        }
        let mut acc = vec![(0f64, 0f64, 0f64, 0usize); centers.len()];
        for (i, &l) in labels.iter().enumerate() {
            if l == u32::MAX {
                continue;
            }
            let a = &mut acc[l as usize];
            a.0 += (i / w) as f64;
            a.1 += (i % w) as f64;
            a.2 += img[i] as f64;
            a.3 += 1;
        }
        for (ct, a) in centers.iter_mut().zip(&acc) {
            if a.3 > 0 {
                let n = a.3 as f64;
                *ct = Center { r: a.0 / n, c: a.1 / n, v: a.2 / n };
            }
        }
    }
    // pixels out of every window (only possible on odd geometries) join the nearest center
    for i in 0..w * h {
        if labels[i] == u32::MAX {
            let (r, c) = ((i / w) as f64, (i % w) as f64);
            let k = centers
                .iter()
                .enumerate()
                .min_by(|a, b| {
                    let da = (a.1.r - r).powi(2) + (a.1.c - c).powi(2);
                    let db = (b.1.r - r).powi(2) + (b.1.c - c).powi(2);
                    da.total_cmp(&db)
                })
                .map(|(k, _)| k)
                .unwrap_or(0);
            labels[i] = k as u32;
        }
    }
    let labels = enforce_connectivity(&labels, w, h, (params.target_area / 4.0).max(1.0) as usize);
    let mut groups: std::collections::BTreeMap<u32, Vec<u32>> = Default::default();
    for (i, &l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i as u32);
    }
    Ok(groups
        .into_values()
        .enumerate()
        .map(|(id, px)| build(id, slice, px, w))
        .collect())
}

fn build(id: usize, slice: usize, pixels: Vec<u32>, w: usize) -> Superpixel {
    let n = pixels.len() as f64;
    let (sr, sc) = pixels
        .iter()
        .fold((0.0, 0.0), |(a, b), &p| (a + (p as usize / w) as f64, b + (p as usize % w) as f64));
    Superpixel {
        id,
        slice,
        pixels,
        centroid: (sr / n, sc / n),
        in_retina: false,
    }
}

/// Keeps the largest 4-connected component of every label (when at least
/// `min_size` pixels) and merges the remaining orphan components into the
/// largest adjacent kept region.
fn enforce_connectivity(labels: &[u32], w: usize, h: usize, min_size: usize) -> Vec<u32> {
    let n = w * h;
    let mut comp = vec![usize::MAX; n];
    let mut comps: Vec<(u32, Vec<usize>)> = Vec::new();
    let mut stack = Vec::new();
    for start in 0..n {
        if comp[start] != usize::MAX {
            continue;
        }
        let id = comps.len();
        let lab = labels[start];
        let mut members = Vec::new();
        comp[start] = id;
        stack.push(start);
        while let Some(p) = stack.pop() {
            members.push(p);
            let (r, c) = (p / w, p % w);
            let mut visit = |q: usize| {
                if comp[q] == usize::MAX && labels[q] == lab {
                    comp[q] = id;
                    stack.push(q);
                }
            };
            if r > 0 {
                visit(p - w);
            }
            if r + 1 < h {
                visit(p + w);
            }
            if c > 0 {
                visit(p - 1);
            }
            if c + 1 < w {
                visit(p + 1);
            }
        }
        comps.push((lab, members));
    }
    let mut largest: std::collections::HashMap<u32, usize> = Default::default();
    for (i, (lab, m)) in comps.iter().enumerate() {
        let e = largest.entry(*lab).or_insert(i);
        if comps[*e].1.len() < m.len() {
            *e = i;
        }
    }
    // owner[i]: kept component that component i belongs to
    let mut owner: Vec<Option<usize>> = (0..comps.len())
        .map(|i| {
            let keep = largest[&comps[i].0] == i && comps[i].1.len() >= min_size;
            keep.then_some(i)
        })
        .collect();
    if owner.iter().all(|o| o.is_none()) {
        // nothing is large enough: keep the single biggest component
        let big = (0..comps.len()).max_by_key(|&i| (comps[i].1.len(), usize::MAX - i)).unwrap_or(0);
        owner[big] = Some(big);
    }
    let mut size: Vec<usize> = comps.iter().map(|c| c.1.len()).collect();
    loop {
        let mut changed = false;
        let mut pending = false;
        for i in 0..comps.len() {
            if owner[i].is_some() {
                continue;
            }
            let mut best: Option<usize> = None;
            for &p in &comps[i].1 {
                let (r, c) = (p / w, p % w);
                let neigh = [
                    (r > 0).then(|| p - w),
                    (r + 1 < h).then(|| p + w),
                    (c > 0).then(|| p - 1),
                    (c + 1 < w).then(|| p + 1),
                ];
                for q in neigh.into_iter().flatten() {
                    if let Some(o) = owner[comp[q]] {
                        best = match best {
                            Some(b) if size[b] > size[o] || (size[b] == size[o] && comps[b].0 <= comps[o].0) => Some(b),
                            _ => Some(o),
                        };
                    }
                }
            }
            match best {
                Some(o) => {
                    owner[i] = Some(o);
                    size[o] += comps[i].1.len();
                    changed = true;
                }
                None => pending = true,
            }
        }
        if !pending || !changed {
            break;
        }
    }
    let mut out = vec![0u32; n];
    for (i, (_, members)) in comps.iter().enumerate() {
        let o = owner[i].unwrap_or(i);
        let lab = comps[o].0;
        for &p in members {
            out[p] = lab;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Rng;

    fn check_partition(sps: &[Superpixel], w: usize, h: usize) {
        let mut seen = vec![0u8; w * h];
        for sp in sps {
            for &p in &sp.pixels {
                seen[p as usize] += 1;
            }
            // connectivity by flood fill inside the member set
            let set: std::collections::HashSet<u32> = sp.pixels.iter().copied().collect();
            let mut stack = vec![sp.pixels[0]];
            let mut reached = std::collections::HashSet::new();
            reached.insert(sp.pixels[0]);
            while let Some(p) = stack.pop() {
                let (r, c) = (p as usize / w, p as usize % w);
                let mut n = vec![];
                if r > 0 { n.push(p - w as u32); }
                if r + 1 < h { n.push(p + w as u32); }
                if c > 0 { n.push(p - 1); }
                if c + 1 < w { n.push(p + 1); }
                for q in n {
                    if set.contains(&q) && reached.insert(q) {
                        stack.push(q);
                    }
                }
            }
            assert_eq!(reached.len(), sp.pixels.len(), "superpixel {} disconnected", sp.id);
        }
        assert!(seen.iter().all(|&s| s == 1));
    }

    #[test]
    fn constant_image_gives_init_grid() {
        let (w, h) = (32, 24);
        let sps = slic_superpixels(&vec![0.5; w * h], w, h, 0, &SlicParams::default()).unwrap();
        assert_eq!(sps.len(), 8 * 6);
        for sp in &sps {
            assert_eq!(sp.area(), 16);
            let (r0, c0) = (sp.pixels[0] as usize / w, sp.pixels[0] as usize % w);
            assert!(r0 % 4 == 0 && c0 % 4 == 0);
        }
        check_partition(&sps, w, h);
    }

    #[test]
    fn random_image_partition_and_area() {
        let mut rng = Rng::new(5);
        let (w, h) = (64, 48);
        let img: Vec<f32> = (0..w * h).map(|_| rng.uniform() as f32).collect();
        let sps = slic_superpixels(&img, w, h, 3, &SlicParams::default()).unwrap();
        check_partition(&sps, w, h);
        assert!(sps.iter().all(|s| s.slice == 3));
        let mean = (w * h) as f64 / sps.len() as f64;
        assert!((mean - 16.0).abs() <= 4.0, "mean area {mean}");
    }

    #[test]
    fn tiny_image_single_superpixel() {
        let sps = slic_superpixels(&[0.1, 0.2, 0.3], 3, 1, 0, &SlicParams::default()).unwrap();
        assert_eq!(sps.len(), 1);
        assert_eq!(sps[0].area(), 3);
    }

    #[test]
    fn rejects_small_target() {
        let p = SlicParams { target_area: 2.0, ..Default::default() };
        assert!(slic_superpixels(&[0.0; 16], 4, 4, 0, &p).is_err());
    }
}
