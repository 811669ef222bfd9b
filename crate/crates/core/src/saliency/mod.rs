//! Perturbation scoring, aggregation of impacts into maps, and normalization.
//!
//! A cell's raw score is the impact-weighted share of the iterations that
//! perturbed it:
//!
//! ```text
//! S(cell) = sum_i r_i * (1 - M_i(cell)) / sum_i (1 - M_i(cell))
//! ```
//!
//! with `M_i = 1` where iteration `i` kept the cell. Cells no iteration touched
//! score 0.

mod bundle;
mod engine;

pub use bundle::{NormStage, SaliencyBundle, TokenSaliency};
pub use engine::{
    explain, explain_spectrogram, explain_tokens, explain_with_segments, ExplainConfig, Method,
};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::{SpectroMask, TokenMask};
use crate::oracle::ProbDist;
use crate::segmentation::SegmentationMap;

/// Floor applied to the perturbed probabilities before the log ratio.
pub const KL_FLOOR: f64 = 1e-12;

/// `sum_i p_i ln(p_i / max(q_i, KL_FLOOR))`, skipping `p_i = 0` terms.
pub fn kl_divergence(p: &ProbDist, q: &ProbDist) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::domain(format!(
            "distributions over {} and {} outcomes",
            p.len(),
            q.len()
        )));
    }
    let kl: f64 = p
        .probs()
        .iter()
        .zip(q.probs())
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi.max(KL_FLOOR)).ln())
        .sum();
    // Flooring can push q's mass just above 1; keep the result a divergence.
    Ok(kl.max(0.0))
}

/// How a perturbed distribution is compared against the baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImpactKind {
    #[default]
    Kl,
    /// `p_base(target) - p_pert(target)`. May be negative.
    ProbDiff,
}

impl ImpactKind {
    pub fn score(self, base: &ProbDist, pert: &ProbDist, target: u32) -> Result<f64> {
        match self {
            ImpactKind::Kl => kl_divergence(base, pert),
            ImpactKind::ProbDiff => {
                let t = target as usize;
                if t >= base.len() || base.len() != pert.len() {
                    return Err(Error::domain(format!(
                        "target {target} outside a vocabulary of {}",
                        base.len()
                    )));
                }
                Ok(base.probs()[t] - pert.probs()[t])
            }
        }
    }
}

/// One perturbation iteration: the mask it drew and its impact on every
/// explained position.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationRecord<M> {
    pub mask: M,
    pub impacts: Vec<f64>,
}

/// Streaming form of the cell aggregation for all positions at once.
#[derive(Debug, Clone)]
pub struct CellAccumulator {
    num: Vec<Array2<f64>>,
    den: Array2<f64>,
}

impl CellAccumulator {
    pub fn new(shape: (usize, usize), n_positions: usize) -> Self {
        Self {
            num: vec![Array2::zeros(shape); n_positions],
            den: Array2::zeros(shape),
        }
    }

    pub fn add(&mut self, mask: &SpectroMask, impacts: &[f64]) {
        debug_assert_eq!(impacts.len(), self.num.len());
        for ((idx, &keep), d) in mask.bits.indexed_iter().zip(self.den.iter_mut()) {
            if !keep {
                *d += 1.0;
                for (num, &r) in self.num.iter_mut().zip(impacts) {
                    num[idx] += r;
                }
            }
        }
    }

    pub fn finish(self) -> Vec<Array2<f64>> {
        let den = self.den;
        self.num
            .into_iter()
            .map(|mut num| {
                num.zip_mut_with(&den, |n, &d| *n = if d > 0.0 { *n / d } else { 0.0 });
                num
            })
            .collect()
    }
}

/// Aggregation for masks that perturb whole patches of one segmentation.
/// Equivalent to [`CellAccumulator`] but costs one update per patch.
#[derive(Debug, Clone)]
pub struct PatchAccumulator {
    /// Per scale: `num[position][patch]`.
    num: Vec<Vec<Vec<f64>>>,
    /// Per scale: `den[patch]`.
    den: Vec<Vec<f64>>,
}

impl PatchAccumulator {
    pub fn new(segs: &[SegmentationMap], n_positions: usize) -> Self {
        Self {
            num: segs
                .iter()
                .map(|s| vec![vec![0.0; s.n_patches()]; n_positions])
                .collect(),
            den: segs.iter().map(|s| vec![0.0; s.n_patches()]).collect(),
        }
    }

    /// `perturbed[p]` flags patch `p` of scale `scale`.
    pub fn add(&mut self, scale: usize, perturbed: &[bool], impacts: &[f64]) {
        for (p, _) in perturbed.iter().enumerate().filter(|(_, f)| **f) {
            self.den[scale][p] += 1.0;
            for (num, &r) in self.num[scale].iter_mut().zip(impacts) {
                num[p] += r;
            }
        }
    }

    pub fn finish(self, segs: &[SegmentationMap]) -> Vec<Array2<f64>> {
        let shape = segs[0].shape();
        let n_positions = self.num.first().map_or(0, Vec::len);
        let mut den = Array2::<f64>::zeros(shape);
        for (seg, d) in segs.iter().zip(&self.den) {
            den.zip_mut_with(seg.labels(), |v, &l| *v += d[l as usize]);
        }
        (0..n_positions)
            .map(|k| {
                let mut num = Array2::<f64>::zeros(shape);
                for (seg, scale_num) in segs.iter().zip(&self.num) {
                    num.zip_mut_with(seg.labels(), |v, &l| *v += scale_num[k][l as usize]);
                }
                num.zip_mut_with(&den, |n, &d| *n = if d > 0.0 { *n / d } else { 0.0 });
                num
            })
            .collect()
    }
}

/// Token-map aggregation. Explained position `e` (predicting `y[e + 1]`)
/// reads the prefix `y[0..=e]`, so its map has `e + 1` entries.
#[derive(Debug, Clone)]
pub struct TokenAccumulator {
    num: Vec<Vec<f64>>,
    den: Vec<f64>,
}

impl TokenAccumulator {
    pub fn new(n_positions: usize) -> Self {
        Self {
            num: (0..n_positions).map(|e| vec![0.0; e + 1]).collect(),
            den: vec![0.0; n_positions],
        }
    }

    pub fn add(&mut self, mask: &TokenMask, impacts: &[f64]) {
        for j in 0..self.den.len() {
            if !mask.keeps(j) {
                self.den[j] += 1.0;
                for e in j..self.num.len() {
                    self.num[e][j] += impacts[e];
                }
            }
        }
    }

    pub fn finish(self) -> Vec<Vec<f64>> {
        let den = self.den;
        self.num
            .into_iter()
            .map(|row| {
                row.iter()
                    .zip(&den)
                    .map(|(n, &d)| if d > 0.0 { n / d } else { 0.0 })
                    .collect()
            })
            .collect()
    }
}

/// Raw spectrogram map for explained position `position`.
pub fn aggregate(
    records: &[PerturbationRecord<SpectroMask>],
    position: usize,
    shape: (usize, usize),
) -> Result<Array2<f64>> {
    if records.is_empty() {
        return Err(Error::domain("aggregation needs at least one record"));
    }
    let mut acc = CellAccumulator::new(shape, 1);
    for r in records {
        if r.mask.shape() != shape {
            return Err(Error::ShapeMismatch {
                expected: shape,
                got: r.mask.shape(),
            });
        }
        let impact = *r.impacts.get(position).ok_or_else(|| {
            Error::domain(format!("record has no impact for position {position}"))
        })?;
        acc.add(&r.mask, &[impact]);
    }
    Ok(acc.finish().pop().unwrap())
}

/// Raw token map for explained position `position`, covering `position + 1`
/// prefix tokens.
pub fn aggregate_tokens(records: &[PerturbationRecord<TokenMask>], position: usize) -> Result<Vec<f64>> {
    if records.is_empty() {
        return Err(Error::domain("aggregation needs at least one record"));
    }
    let len = position + 1;
    let mut num = vec![0.0; len];
    let mut den = vec![0.0; len];
    for r in records {
        let impact = *r.impacts.get(position).ok_or_else(|| {
            Error::domain(format!("record has no impact for position {position}"))
        })?;
        for j in 0..len {
            if !r.mask.keeps(j) {
                num[j] += impact;
                den[j] += 1.0;
            }
        }
    }
    Ok(num
        .iter()
        .zip(&den)
        .map(|(n, &d)| if d > 0.0 { n / d } else { 0.0 })
        .collect())
}

/// Deviations from the mean and the population std. The mean is refined by
/// the mean of the first-pass residuals, which keeps the centered values
/// accurate when the spread is tiny next to the offset.
fn centered(values: &[f64]) -> (f64, Vec<f64>, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let mut dev: Vec<f64> = values.iter().map(|v| v - mean).collect();
    let correction = dev.iter().sum::<f64>() / n;
    dev.iter_mut().for_each(|d| *d -= correction);
    let var = dev.iter().map(|d| d * d).sum::<f64>() / n;
    (mean, dev, var.sqrt())
}

/// `(v - mean) / std` with the population std. Constant input maps to zeros.
pub fn zscore(values: &[f64]) -> Vec<f64> {
    if values.is_empty() {
        return Vec::new();
    }
    let (mean, dev, std) = centered(values);
    if std <= 1e-12 * (1.0 + mean.abs()) {
        return vec![0.0; values.len()];
    }
    dev.iter().map(|d| d / std).collect()
}

pub fn zscore_map(map: &Array2<f64>) -> Array2<f64> {
    let flat: Vec<f64> = map.iter().copied().collect();
    Array2::from_shape_vec(map.dim(), zscore(&flat)).unwrap()
}

/// Rescales a spectrogram map and its token map by their shared extremes.
/// A jointly constant pair becomes all zeros.
pub fn joint_minmax(sx: &Array2<f64>, sy: &[f64]) -> (Array2<f64>, Vec<f64>) {
    let (lo, hi) = sx
        .iter()
        .chain(sy)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        return (Array2::zeros(sx.dim()), vec![0.0; sy.len()]);
    }
    let scale = |v: f64| (v - lo) / (hi - lo);
    (sx.mapv(scale), sy.iter().map(|&v| scale(v)).collect())
}

/// Min-max over a single map; constant maps become zeros.
pub fn minmax_map(map: &Array2<f64>) -> Array2<f64> {
    joint_minmax(map, &[]).0
}

/// Cellwise mean of token maps.
pub fn sentence_map(maps: &[Array2<f64>]) -> Result<Array2<f64>> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Empty("sentence map of zero token maps".into()))?;
    let mut sum = Array2::<f64>::zeros(first.dim());
    for m in maps {
        if m.dim() != first.dim() {
            return Err(Error::ShapeMismatch {
                expected: first.dim(),
                got: m.dim(),
            });
        }
        sum += m;
    }
    Ok(sum / maps.len() as f64)
}
