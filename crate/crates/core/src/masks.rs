//! Binary perturbation masks for spectrograms and token prefixes.
//!
//! Every sampler takes an explicit RNG. Sweeps derive one independent stream
//! per iteration from `(seed, domain, iteration)` through [`substream`], so a
//! sweep produces the same masks in any execution order.

use ndarray::{Array2, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::audio::Spectrogram;
use crate::error::{Error, Result};
use crate::segmentation::SegmentationMap;

/// Stream domain for spectrogram sweeps.
pub const SPECTRO_STREAM: u64 = 0x5350_4543;
/// Stream domain for token sweeps.
pub const TOKEN_STREAM: u64 = 0x544f_4b4e;

/// RNG for iteration `index` of the sweep identified by `(seed, domain)`.
pub fn substream(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ domain.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbationConfig {
    pub n_spec_iters: usize,
    pub n_tok_iters: usize,
    pub p_spec: f64,
    pub p_tok: f64,
    pub rng_seed: u64,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self {
            n_spec_iters: 20_000,
            n_tok_iters: 2_000,
            p_spec: 0.5,
            p_tok: 0.4,
            rng_seed: 0,
        }
    }
}

impl PerturbationConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_spec", self.p_spec), ("p_tok", self.p_tok)] {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::domain(format!("{name} must lie in (0, 1), got {p}")));
            }
        }
        if self.n_spec_iters == 0 || self.n_tok_iters == 0 {
            return Err(Error::domain("iteration counts must be at least 1"));
        }
        Ok(())
    }
}

/// `T x C` keep/perturb grid: `true` keeps the cell, `false` perturbs it.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectroMask {
    pub bits: Array2<bool>,
    pub scale_index: Option<usize>,
}

impl SpectroMask {
    pub fn keep_all(t: usize, c: usize) -> Self {
        Self {
            bits: Array2::from_elem((t, c), true),
            scale_index: None,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.bits.dim()
    }

    pub fn perturbed_fraction(&self) -> f64 {
        self.bits.iter().filter(|b| !**b).count() as f64 / self.bits.len() as f64
    }
}

/// Keep/zero flags over previous output tokens, `<s>` included.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMask {
    pub bits: Vec<bool>,
}

impl TokenMask {
    pub fn keep_all(len: usize) -> Self {
        Self {
            bits: vec![true; len],
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Missing positions count as kept.
    pub fn keeps(&self, index: usize) -> bool {
        self.bits.get(index).copied().unwrap_or(true)
    }

    pub fn restrict(&self, len: usize) -> TokenMask {
        TokenMask {
            bits: (0..len).map(|i| self.keeps(i)).collect(),
        }
    }
}

/// Per-patch perturbation flags, one draw per patch in id order.
pub fn sample_patch_selection<R: Rng>(n_patches: usize, p_spec: f64, rng: &mut R) -> Vec<bool> {
    (0..n_patches).map(|_| rng.gen_bool(p_spec)).collect()
}

/// Expands per-patch flags (`true` = perturbed) into a cell mask.
pub fn selection_to_mask(seg: &SegmentationMap, perturbed: &[bool], scale: Option<usize>) -> SpectroMask {
    SpectroMask {
        bits: seg.labels().mapv(|l| !perturbed[l as usize]),
        scale_index: scale,
    }
}

pub fn sample_patch_mask<R: Rng>(seg: &SegmentationMap, p_spec: f64, rng: &mut R) -> SpectroMask {
    let sel = sample_patch_selection(seg.n_patches(), p_spec, rng);
    selection_to_mask(seg, &sel, None)
}

pub fn sample_feature_mask<R: Rng>(t: usize, c: usize, p_spec: f64, rng: &mut R) -> SpectroMask {
    SpectroMask {
        bits: Array2::from_shape_simple_fn((t, c), || !rng.gen_bool(p_spec)),
        scale_index: None,
    }
}

pub fn sample_token_mask<R: Rng>(prefix_len: usize, p_tok: f64, rng: &mut R) -> Result<TokenMask> {
    if prefix_len == 0 {
        return Err(Error::domain("token prefix must hold at least the start token"));
    }
    Ok(TokenMask {
        bits: (0..prefix_len).map(|_| !rng.gen_bool(p_tok)).collect(),
    })
}

/// `X' = X * M`; on CMVN'd input the zeroed cells sit at the channel mean.
pub fn apply_spectro_mask(x: &Spectrogram, m: &SpectroMask) -> Result<Spectrogram> {
    if x.shape() != m.shape() {
        return Err(Error::ShapeMismatch {
            expected: x.shape(),
            got: m.shape(),
        });
    }
    let mut out = x.frames().clone();
    Zip::from(&mut out).and(&m.bits).for_each(|v, &keep| {
        if !keep {
            *v = 0.0;
        }
    });
    Ok(x.with_frames(out))
}

/// Bubble Noise geometry. The defaults give 43-frame by 31-channel ellipses
/// at 10 bubbles per second.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BubbleConfig {
    pub bubbles_per_s: f64,
    pub width_s: f64,
    pub height_mels: f64,
}

impl Default for BubbleConfig {
    fn default() -> Self {
        Self {
            bubbles_per_s: 10.0,
            width_s: 0.43,
            height_mels: 31.0,
        }
    }
}

impl BubbleConfig {
    /// Semi-axes in frames and channels.
    pub fn semi_axes(&self, stride_s: f64) -> (f64, f64) {
        (self.width_s / stride_s / 2.0, self.height_mels / 2.0)
    }

    pub fn bubble_count(&self, duration_s: f64) -> usize {
        (duration_s * self.bubbles_per_s).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BubbleField {
    pub noise: Array2<f64>,
    pub bubble_centers: Vec<(usize, usize)>,
    /// Noise weight per cell: 0 at a bubble center rising linearly to 1 on its
    /// boundary. Cells outside every bubble hold 1.
    pub attenuation: Array2<f64>,
    /// `true` inside at least one bubble.
    pub mask_equivalent: SpectroMask,
}

/// Draws noise uniformly over `value_range` and places bubble centers
/// uniformly over the grid. Overlapping bubbles take the weaker attenuation.
pub fn sample_bubble_field<R: Rng>(
    t: usize,
    c: usize,
    stride_s: f64,
    value_range: (f64, f64),
    cfg: &BubbleConfig,
    rng: &mut R,
) -> Result<BubbleField> {
    if t == 0 || c == 0 || !(stride_s > 0.0) {
        return Err(Error::domain("bubble field needs a non-empty grid"));
    }
    let (lo, hi) = value_range;
    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
        return Err(Error::domain(format!("invalid noise range [{lo}, {hi}]")));
    }
    if !(cfg.width_s > 0.0 && cfg.height_mels > 0.0 && cfg.bubbles_per_s > 0.0) {
        return Err(Error::domain("bubble geometry must be positive"));
    }
    let duration = t as f64 * stride_s;
    if duration < cfg.width_s {
        return Err(Error::domain(format!(
            "input of {duration:.3} s is shorter than one bubble ({} s)",
            cfg.width_s
        )));
    }
    let noise = Array2::from_shape_simple_fn((t, c), || {
        if hi > lo {
            rng.gen_range(lo..=hi)
        } else {
            lo
        }
    });
    let n_bubbles = cfg.bubble_count(duration);
    let bubble_centers: Vec<(usize, usize)> = (0..n_bubbles)
        .map(|_| (rng.gen_range(0..t), rng.gen_range(0..c)))
        .collect();

    let (at, ac) = cfg.semi_axes(stride_s);
    let mut attenuation = Array2::from_elem((t, c), 1.0f64);
    let mut inside = Array2::from_elem((t, c), false);
    for &(bt, bc) in &bubble_centers {
        let t0 = (bt as f64 - at).ceil().max(0.0) as usize;
        let t1 = ((bt as f64 + at).floor() as usize).min(t - 1);
        let c0 = (bc as f64 - ac).ceil().max(0.0) as usize;
        let c1 = ((bc as f64 + ac).floor() as usize).min(c - 1);
        for tt in t0..=t1 {
            for cc in c0..=c1 {
                let rho = (((tt as f64 - bt as f64) / at).powi(2)
                    + ((cc as f64 - bc as f64) / ac).powi(2))
                .sqrt();
                if rho <= 1.0 {
                    inside[[tt, cc]] = true;
                    let a = &mut attenuation[[tt, cc]];
                    *a = a.min(rho);
                }
            }
        }
    }
    Ok(BubbleField {
        noise,
        bubble_centers,
        attenuation,
        mask_equivalent: SpectroMask {
            bits: inside,
            scale_index: None,
        },
    })
}

impl BubbleField {
    /// Inside bubbles: `X + a * noise`; outside: the noise alone.
    pub fn apply(&self, x: &Spectrogram) -> Result<Spectrogram> {
        if x.shape() != self.noise.dim() {
            return Err(Error::ShapeMismatch {
                expected: x.shape(),
                got: self.noise.dim(),
            });
        }
        let mut out = x.frames().clone();
        Zip::from(&mut out)
            .and(&self.noise)
            .and(&self.attenuation)
            .and(&self.mask_equivalent.bits)
            .for_each(|v, &n, &a, &inside| {
                *v = if inside { *v + a * n } else { n };
            });
        Ok(x.with_frames(out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmentation::{slic, SegmentationConfig};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn small_seg() -> SegmentationMap {
        let s = Spectrogram::from_frames(Array2::zeros((12, 12)), true).unwrap();
        slic(&s, 6, &SegmentationConfig::default()).unwrap()
    }

    #[test]
    fn patch_mask_boundaries() {
        let seg = small_seg();
        let mut r = rng(1);
        assert!(sample_patch_mask(&seg, 0.0, &mut r).bits.iter().all(|&b| b));
        assert!(sample_patch_mask(&seg, 1.0, &mut r).bits.iter().all(|&b| !b));
    }

    #[test]
    fn patch_mask_perturbs_whole_patches() {
        let seg = small_seg();
        let mut r = rng(2);
        for _ in 0..50 {
            let m = sample_patch_mask(&seg, 0.5, &mut r);
            let mut state = vec![None; seg.n_patches()];
            for (l, b) in seg.labels().iter().zip(m.bits.iter()) {
                let slot = &mut state[*l as usize];
                assert!(slot.is_none() || *slot == Some(*b));
                *slot = Some(*b);
            }
        }
    }

    #[test]
    fn per_patch_rate_within_binomial_bound() {
        let seg = small_seg();
        let mut counts = vec![0usize; seg.n_patches()];
        let draws = 20_000;
        for i in 0..draws {
            let sel = sample_patch_selection(seg.n_patches(), 0.5, &mut substream(9, SPECTRO_STREAM, i));
            for (c, s) in counts.iter_mut().zip(sel) {
                *c += s as usize;
            }
        }
        for c in counts {
            assert!((c as f64 / draws as f64 - 0.5).abs() < 0.01);
        }
    }

    #[test]
    fn feature_mask_rate() {
        let mut r = rng(3);
        assert!(sample_feature_mask(4, 4, 0.0, &mut r).bits.iter().all(|&b| b));
        assert!(sample_feature_mask(4, 4, 1.0, &mut r).bits.iter().all(|&b| !b));
        let mean: f64 = (0..10_000)
            .map(|_| sample_feature_mask(10, 10, 0.7, &mut r).perturbed_fraction())
            .sum::<f64>()
            / 10_000.0;
        assert!((mean - 0.7).abs() < 0.02);
    }

    #[test]
    fn token_mask_rates() {
        let mut r = rng(4);
        assert!(sample_token_mask(5, 0.0, &mut r).unwrap().bits.iter().all(|&b| b));
        assert!(sample_token_mask(5, 1.0, &mut r).unwrap().bits.iter().all(|&b| !b));
        assert_eq!(sample_token_mask(1, 0.4, &mut r).unwrap().len(), 1);
        assert!(sample_token_mask(0, 0.4, &mut r).is_err());
        let mut zeros = [0usize; 10];
        for i in 0..2000 {
            let m = sample_token_mask(10, 0.4, &mut substream(5, TOKEN_STREAM, i)).unwrap();
            for (z, b) in zeros.iter_mut().zip(&m.bits) {
                *z += !b as usize;
            }
        }
        for z in zeros {
            assert!((z as f64 / 2000.0 - 0.4).abs() < 0.03);
        }
    }

    #[test]
    fn substreams_are_order_independent() {
        let a: Vec<u64> = (0..8).map(|i| substream(11, SPECTRO_STREAM, i).gen()).collect();
        let b: Vec<u64> = (0..8).rev().map(|i| substream(11, SPECTRO_STREAM, i).gen()).collect();
        assert_eq!(a, b.into_iter().rev().collect::<Vec<_>>());
        assert_ne!(substream(11, SPECTRO_STREAM, 0).gen::<u64>(), substream(11, TOKEN_STREAM, 0).gen::<u64>());
    }

    #[test]
    fn apply_mask_cases() {
        let frames = Array2::from_shape_fn((6, 10), |(t, c)| (t * 10 + c) as f64 + 1.0);
        let x = Spectrogram::from_frames(frames, true).unwrap();
        assert_eq!(apply_spectro_mask(&x, &SpectroMask::keep_all(6, 10)).unwrap(), x);
        let zero = SpectroMask {
            bits: Array2::from_elem((6, 10), false),
            scale_index: None,
        };
        assert!(apply_spectro_mask(&x, &zero).unwrap().frames().iter().all(|&v| v == 0.0));
        let mut one = SpectroMask::keep_all(6, 10);
        one.bits[[3, 7]] = false;
        let y = apply_spectro_mask(&x, &one).unwrap();
        for ((idx, a), b) in x.frames().indexed_iter().zip(y.frames()) {
            if idx == (3, 7) {
                assert_eq!(*b, 0.0);
            } else {
                assert_eq!(a, b);
            }
        }
        assert!(matches!(
            apply_spectro_mask(&x, &SpectroMask::keep_all(5, 10)),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn bubble_geometry() {
        let cfg = BubbleConfig::default();
        let mut r = rng(6);
        let f = sample_bubble_field(1000, 80, 0.01, (-1.0, 1.0), &cfg, &mut r).unwrap();
        assert_eq!(f.bubble_centers.len(), 100);
        assert!(f.noise.iter().all(|&v| (-1.0..=1.0).contains(&v)));

        // An unclipped bubble spans 43 frames and 31 channels.
        let cfg1 = BubbleConfig {
            bubbles_per_s: 1.0,
            ..cfg.clone()
        };
        for seed in 0..20 {
            let f = sample_bubble_field(100, 80, 0.01, (0.0, 1.0), &cfg1, &mut rng(seed)).unwrap();
            let (bt, bc) = f.bubble_centers[0];
            if bt < 22 || bt + 22 > 100 || bc < 16 || bc + 16 > 80 {
                continue;
            }
            let ts: Vec<usize> = (0..100).filter(|&t| f.mask_equivalent.bits[[t, bc]]).collect();
            let cs: Vec<usize> = (0..80).filter(|&c| f.mask_equivalent.bits[[bt, c]]).collect();
            assert_eq!(ts.len(), 43);
            assert_eq!(cs.len(), 31);
            assert_eq!(f.attenuation[[bt, bc]], 0.0);
        }
    }

    #[test]
    fn bubble_coverage_matches_ellipse_area() {
        let cfg = BubbleConfig::default();
        let mut r = rng(8);
        let mut cells = 0usize;
        let trials = 200;
        for _ in 0..trials {
            let f = sample_bubble_field(1000, 80, 0.01, (0.0, 1.0), &cfg, &mut r).unwrap();
            // Count each bubble's cells separately: coverage before overlap.
            let (at, ac) = cfg.semi_axes(0.01);
            for &(bt, bc) in &f.bubble_centers {
                for t in bt.saturating_sub(22)..(bt + 23).min(1000) {
                    for c in bc.saturating_sub(16)..(bc + 17).min(80) {
                        let rho = ((t as f64 - bt as f64) / at).powi(2) + ((c as f64 - bc as f64) / ac).powi(2);
                        cells += (rho <= 1.0) as usize;
                    }
                }
            }
        }
        let coverage = cells as f64 / (trials * 1000 * 80) as f64;
        let analytic = 100.0 * std::f64::consts::PI * 21.5 * 15.5 / (1000.0 * 80.0);
        // Border clipping trims a few percent from the analytic area.
        assert!(coverage < analytic && coverage > 0.75 * analytic, "{coverage} vs {analytic}");
    }

    #[test]
    fn bubble_apply_and_errors() {
        let x = Spectrogram::from_frames(Array2::from_elem((60, 8), 2.0), true).unwrap();
        let cfg = BubbleConfig {
            height_mels: 5.0,
            ..BubbleConfig::default()
        };
        let f = sample_bubble_field(60, 8, 0.01, (0.0, 1.0), &cfg, &mut rng(1)).unwrap();
        let y = f.apply(&x).unwrap();
        for ((idx, &v), &inside) in y.frames().indexed_iter().zip(f.mask_equivalent.bits.iter()) {
            if inside {
                assert!((v - (2.0 + f.attenuation[idx] * f.noise[idx])).abs() < 1e-12);
            } else {
                assert_eq!(v, f.noise[idx]);
            }
        }
        assert!(sample_bubble_field(0, 8, 0.01, (0.0, 1.0), &cfg, &mut rng(1)).is_err());
        assert!(sample_bubble_field(20, 8, 0.01, (0.0, 1.0), &cfg, &mut rng(1)).is_err());
    }
}
