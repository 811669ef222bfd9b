//! Morphological patches over a spectrogram, via SLIC superpixels at several
//! granularities.
//!
//! The number of patches grows with the utterance duration up to a threshold
//! (`tau_s`), after which it stays fixed: `k = round(min(duration, tau) * phi)`.

use std::collections::{BTreeMap, VecDeque};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::Spectrogram;
use crate::error::{Error, Result};

pub const DEFAULT_PHIS: [f64; 3] = [400.0, 500.0, 600.0];
pub const ASR_TAU_S: f64 = 7.5;
pub const ST_TAU_S: f64 = 5.0;
/// Patch counts used when duration adaptation is switched off.
pub const FIXED_K: [usize; 3] = [2000, 2500, 3000];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentationConfig {
    /// Patches per second, one entry per scale.
    pub phis: Vec<f64>,
    pub tau_s: f64,
    pub compactness: f64,
    pub n_iters: usize,
    /// Gaussian pre-smoothing width in cells; 0 disables it.
    pub sigma: f64,
    /// Overrides the duration-adaptive patch counts, one entry per scale.
    pub fixed_k: Option<Vec<usize>>,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self {
            phis: DEFAULT_PHIS.to_vec(),
            tau_s: ASR_TAU_S,
            compactness: 10.0,
            n_iters: 10,
            sigma: 0.0,
            fixed_k: None,
        }
    }
}

impl SegmentationConfig {
    pub fn asr() -> Self {
        Self::default()
    }

    pub fn st() -> Self {
        Self {
            tau_s: ST_TAU_S,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.phis.is_empty() || self.phis.iter().any(|&p| !(p > 0.0)) {
            return Err(Error::domain("phis must be non-empty and strictly positive"));
        }
        if !(self.tau_s > 0.0) {
            return Err(Error::domain("tau_s must be positive"));
        }
        if !(self.compactness > 0.0) || self.sigma < 0.0 || self.n_iters == 0 {
            return Err(Error::domain(
                "compactness must be positive, sigma non-negative, n_iters at least 1",
            ));
        }
        if let Some(ks) = &self.fixed_k {
            if ks.len() != self.phis.len() {
                return Err(Error::domain("fixed_k needs one entry per scale"));
            }
        }
        Ok(())
    }

    /// Patch count for every scale given an utterance duration.
    pub fn patch_counts(&self, duration_s: f64) -> Result<Vec<usize>> {
        match &self.fixed_k {
            Some(ks) => Ok(ks.clone()),
            None => self
                .phis
                .iter()
                .map(|&phi| patch_count(duration_s, self.tau_s, phi))
                .collect(),
        }
    }
}

/// `round(min(duration, tau) * phi)`, never below 2.
pub fn patch_count(duration_s: f64, tau_s: f64, phi: f64) -> Result<usize> {
    if !(duration_s > 0.0 && tau_s > 0.0 && phi > 0.0) {
        return Err(Error::domain(format!(
            "patch_count arguments must be positive (duration {duration_s}, tau {tau_s}, phi {phi})"
        )));
    }
    Ok(((duration_s.min(tau_s) * phi).round() as usize).max(2))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationMap {
    labels: Array2<u32>,
    n_patches: usize,
    pub k: usize,
    pub phi: f64,
}

#[derive(Serialize, Deserialize)]
struct SegmentationHeader {
    #[serde(rename = "T")]
    t: usize,
    #[serde(rename = "C")]
    c: usize,
    k: usize,
    phi: f64,
}

impl SegmentationMap {
    /// Wraps a label grid, checking ids are dense in `[0, n_patches)`.
    pub fn from_labels(labels: Array2<u32>, k: usize, phi: f64) -> Result<Self> {
        let n_patches = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
        let mut seen = vec![false; n_patches];
        for &l in labels.iter() {
            seen[l as usize] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::format("segmentation labels are not dense"));
        }
        Ok(Self {
            labels,
            n_patches,
            k,
            phi,
        })
    }

    pub fn labels(&self) -> &Array2<u32> {
        &self.labels
    }

    pub fn n_patches(&self) -> usize {
        self.n_patches
    }

    pub fn shape(&self) -> (usize, usize) {
        self.labels.dim()
    }

    pub fn patch_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_patches];
        for &l in self.labels.iter() {
            sizes[l as usize] += 1;
        }
        sizes
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let (t, c) = self.shape();
        let header = SegmentationHeader {
            t,
            c,
            k: self.k,
            phi: self.phi,
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for &l in self.labels.iter() {
            w.write_all(&l.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(mut r: R) -> Result<Self> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        let h: SegmentationHeader = serde_json::from_str(line.trim_end())
            .map_err(|e| Error::format(format!("bad segmentation header: {e}")))?;
        let mut bytes = vec![0u8; h.t * h.c * 4];
        r.read_exact(&mut bytes)
            .map_err(|e| Error::format(format!("truncated label block: {e}")))?;
        let ids = bytes
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let labels =
            Array2::from_shape_vec((h.t, h.c), ids).map_err(|e| Error::format(e.to_string()))?;
        Self::from_labels(labels, h.k, h.phi)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

/// One segmentation per configured scale.
pub fn multiscale_segment(s: &Spectrogram, cfg: &SegmentationConfig) -> Result<Vec<SegmentationMap>> {
    cfg.validate()?;
    let ks = cfg.patch_counts(s.duration_s())?;
    ks.par_iter()
        .zip(cfg.phis.par_iter())
        .map(|(&k, &phi)| {
            let mut map = slic(s, k, cfg)?;
            map.phi = phi;
            Ok(map)
        })
        .collect()
}

pub fn slic(s: &Spectrogram, k: usize, cfg: &SegmentationConfig) -> Result<SegmentationMap> {
    let labels = slic_labels(s.frames(), k, cfg.compactness, cfg.n_iters, cfg.sigma)?;
    SegmentationMap::from_labels(labels, k, s.duration_s().min(cfg.tau_s).recip() * k as f64)
}

#[derive(Debug, Clone, Copy)]
struct Center {
    t: f64,
    c: f64,
    v: f64,
}

/// SLIC over a single-valued grid. Distance between a cell and a center is
/// `sqrt(dv^2 + (ds / S)^2 * m^2)` with grid interval `S = sqrt(T*C/k)`.
pub fn slic_labels(
    values: &Array2<f64>,
    k: usize,
    compactness: f64,
    n_iters: usize,
    sigma: f64,
) -> Result<Array2<u32>> {
    let (nt, nc) = values.dim();
    let n = nt * nc;
    if k < 2 {
        return Err(Error::domain(format!("k must be at least 2, got {k}")));
    }
    if k > n {
        return Err(Error::Infeasible { k, cells: n });
    }
    let img = if sigma > 0.0 {
        gaussian_smooth(values, sigma)
    } else {
        values.clone()
    };

    let step = (n as f64 / k as f64).sqrt();
    let mut rows = ((nt as f64 / step).round() as usize).clamp(1, nt);
    let cols = (k / rows).clamp(1, nc);
    while rows * cols > k {
        rows -= 1;
    }
    let st = nt as f64 / rows as f64;
    let sc = nc as f64 / cols as f64;

    let grad = |t: usize, c: usize| {
        let at = |t: isize, c: isize| {
            img[[
                t.clamp(0, nt as isize - 1) as usize,
                c.clamp(0, nc as isize - 1) as usize,
            ]]
        };
        let (t, c) = (t as isize, c as isize);
        (at(t + 1, c) - at(t - 1, c)).powi(2) + (at(t, c + 1) - at(t, c - 1)).powi(2)
    };

    let mut centers = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            let ct = (i as f64 + 0.5) * st - 0.5;
            let cc = (j as f64 + 0.5) * sc - 0.5;
            let rt = (ct.round().max(0.0) as usize).min(nt - 1);
            let rc = (cc.round().max(0.0) as usize).min(nc - 1);
            // Move the seed to the lowest-gradient cell of its 3x3 neighbourhood.
            let mut best = (grad(rt, rc), rt, rc);
            for dt in -1isize..=1 {
                for dc in -1isize..=1 {
                    let (tt, cc2) = (rt as isize + dt, rc as isize + dc);
                    if tt < 0 || cc2 < 0 || tt >= nt as isize || cc2 >= nc as isize {
                        continue;
                    }
                    let g = grad(tt as usize, cc2 as usize);
                    if g < best.0 {
                        best = (g, tt as usize, cc2 as usize);
                    }
                }
            }
            let (t, c) = if (best.1, best.2) == (rt, rc) {
                (ct, cc)
            } else {
                (best.1 as f64, best.2 as f64)
            };
            centers.push(Center {
                t,
                c,
                v: img[[best.1, best.2]],
            });
        }
    }

    let spatial_weight = (compactness / step).powi(2);
    let win_t = (2.0 * st).ceil();
    let win_c = (2.0 * sc).ceil();
    let mut labels = vec![u32::MAX; n];
    let mut dist = vec![f64::INFINITY; n];

    for _ in 0..n_iters {
        dist.fill(f64::INFINITY);
        for (id, ctr) in centers.iter().enumerate() {
            let t0 = (ctr.t - win_t).floor().max(0.0) as usize;
            let t1 = ((ctr.t + win_t).ceil() as usize).min(nt - 1);
            let c0 = (ctr.c - win_c).floor().max(0.0) as usize;
            let c1 = ((ctr.c + win_c).ceil() as usize).min(nc - 1);
            for t in t0..=t1 {
                let dt2 = (t as f64 - ctr.t).powi(2);
                for c in c0..=c1 {
                    let idx = t * nc + c;
                    let dv = img[[t, c]] - ctr.v;
                    let d = dv * dv + (dt2 + (c as f64 - ctr.c).powi(2)) * spatial_weight;
                    if d < dist[idx] {
                        dist[idx] = d;
                        labels[idx] = id as u32;
                    }
                }
            }
        }
        // Cells outside every search window keep their previous label; on
        // the first pass they fall back to the spatially nearest center.
        for idx in 0..n {
            if labels[idx] == u32::MAX {
                let (t, c) = ((idx / nc) as f64, (idx % nc) as f64);
                labels[idx] = centers
                    .iter()
                    .enumerate()
                    .min_by(|a, b| {
                        let da = (a.1.t - t).powi(2) + (a.1.c - c).powi(2);
                        let db = (b.1.t - t).powi(2) + (b.1.c - c).powi(2);
                        da.total_cmp(&db)
                    })
                    .map(|(i, _)| i as u32)
                    .unwrap();
            }
        }
        let mut sums = vec![(0.0, 0.0, 0.0, 0usize); centers.len()];
        for (idx, &l) in labels.iter().enumerate() {
            let s = &mut sums[l as usize];
            s.0 += (idx / nc) as f64;
            s.1 += (idx % nc) as f64;
            s.2 += img[[idx / nc, idx % nc]];
            s.3 += 1;
        }
        for (ctr, s) in centers.iter_mut().zip(&sums) {
            if s.3 > 0 {
                let cnt = s.3 as f64;
                *ctr = Center {
                    t: s.0 / cnt,
                    c: s.1 / cnt,
                    v: s.2 / cnt,
                };
            }
        }
    }

    let min_size = ((n / k) / 4).max(1);
    let labels = enforce_connectivity(&labels, nt, nc, min_size, k);
    Ok(Array2::from_shape_vec((nt, nc), labels).expect("label count matches grid"))
}

fn neighbors(idx: usize, nt: usize, nc: usize) -> impl Iterator<Item = usize> {
    let (t, c) = (idx / nc, idx % nc);
    let up = (t > 0).then(|| idx - nc);
    let left = (c > 0).then(|| idx - 1);
    let right = (c + 1 < nc).then(|| idx + 1);
    let down = (t + 1 < nt).then(|| idx + nc);
    [up, left, right, down].into_iter().flatten()
}

/// Relabels 4-connected components densely in raster order, folding
/// components smaller than `min_size` into an adjacent earlier component, and
/// merging the smallest components until at most `max_patches` remain.
fn enforce_connectivity(
    labels: &[u32],
    nt: usize,
    nc: usize,
    min_size: usize,
    max_patches: usize,
) -> Vec<u32> {
    let n = labels.len();
    let mut out = vec![u32::MAX; n];
    let mut sizes: Vec<usize> = Vec::new();
    let mut queue = VecDeque::new();
    let mut component = Vec::new();

    for start in 0..n {
        if out[start] != u32::MAX {
            continue;
        }
        let original = labels[start];
        let next = sizes.len() as u32;
        component.clear();
        queue.push_back(start);
        out[start] = next;
        while let Some(idx) = queue.pop_front() {
            component.push(idx);
            for nb in neighbors(idx, nt, nc) {
                if out[nb] == u32::MAX && labels[nb] == original {
                    out[nb] = next;
                    queue.push_back(nb);
                }
            }
        }
        let adjacent = if component.len() < min_size {
            component
                .iter()
                .flat_map(|&idx| neighbors(idx, nt, nc))
                .map(|nb| out[nb])
                .find(|&l| l != next && l != u32::MAX)
        } else {
            None
        };
        match adjacent {
            Some(target) => {
                for &idx in &component {
                    out[idx] = target;
                }
                sizes[target as usize] += component.len();
            }
            None => sizes.push(component.len()),
        }
    }

    if sizes.len() > max_patches {
        merge_down(&mut out, &mut sizes, nt, nc, max_patches);
    }

    // Dense relabel by first appearance.
    let mut remap = vec![u32::MAX; sizes.len()];
    let mut next = 0u32;
    for l in out.iter_mut() {
        let slot = &mut remap[*l as usize];
        if *slot == u32::MAX {
            *slot = next;
            next += 1;
        }
        *l = *slot;
    }
    out
}

fn merge_down(out: &mut [u32], sizes: &mut [usize], nt: usize, nc: usize, max_patches: usize) {
    let mut alive = sizes.iter().filter(|&&s| s > 0).count();
    while alive > max_patches {
        let victim = (0..sizes.len())
            .filter(|&l| sizes[l] > 0)
            .min_by_key(|&l| (sizes[l], l))
            .unwrap() as u32;
        let mut border: BTreeMap<u32, usize> = BTreeMap::new();
        for idx in 0..out.len() {
            if out[idx] == victim {
                for nb in neighbors(idx, nt, nc) {
                    if out[nb] != victim {
                        *border.entry(out[nb]).or_default() += 1;
                    }
                }
            }
        }
        let Some((&target, _)) = border.iter().max_by_key(|(&l, &cnt)| (cnt, std::cmp::Reverse(l))) else {
            break;
        };
        for l in out.iter_mut() {
            if *l == victim {
                *l = target;
            }
        }
        sizes[target as usize] += sizes[victim as usize];
        sizes[victim as usize] = 0;
        alive -= 1;
    }
}

/// Separable Gaussian blur with reflected borders, truncated at 4 sigma.
pub fn gaussian_smooth(values: &Array2<f64>, sigma: f64) -> Array2<f64> {
    let radius = (4.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|w| *w /= norm);

    let reflect = |i: isize, len: usize| -> usize {
        let len = len as isize;
        let period = 2 * len;
        let mut m = i.rem_euclid(period);
        if m >= len {
            m = period - 1 - m;
        }
        m as usize
    };
    let (nt, nc) = values.dim();
    let mut tmp = Array2::<f64>::zeros((nt, nc));
    for t in 0..nt {
        for c in 0..nc {
            tmp[[t, c]] = kernel
                .iter()
                .enumerate()
                .map(|(i, w)| w * values[[reflect(t as isize + i as isize - radius, nt), c]])
                .sum();
        }
    }
    let mut out = Array2::zeros((nt, nc));
    for t in 0..nt {
        for c in 0..nc {
            out[[t, c]] = kernel
                .iter()
                .enumerate()
                .map(|(i, w)| w * tmp[[t, reflect(c as isize + i as isize - radius, nc)]])
                .sum();
        }
    }
    out
}

/// True when every label forms a single 4-connected region.
pub fn labels_are_connected(labels: &Array2<u32>) -> bool {
    let (nt, nc) = labels.dim();
    let flat: Vec<u32> = labels.iter().copied().collect();
    let n_labels = flat.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    let mut seen_label = vec![false; n_labels];
    let mut visited = vec![false; flat.len()];
    let mut queue = VecDeque::new();
    for start in 0..flat.len() {
        if visited[start] {
            continue;
        }
        let l = flat[start] as usize;
        if seen_label[l] {
            return false;
        }
        seen_label[l] = true;
        visited[start] = true;
        queue.push_back(start);
        while let Some(idx) = queue.pop_front() {
            for nb in neighbors(idx, nt, nc) {
                if !visited[nb] && flat[nb] as usize == l {
                    visited[nb] = true;
                    queue.push_back(nb);
                }
            }
        }
    }
    true
}
