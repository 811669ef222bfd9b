//! Perturbation sweeps and the end-to-end explanation of one utterance.
//!
//! Iterations run in parallel chunks. Each iteration draws from its own RNG
//! substream and results are folded in iteration order, so the output does
//! not depend on the worker count.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::bundle::{NormStage, SaliencyBundle, TokenSaliency};
use super::{
    joint_minmax, sentence_map, zscore, zscore_map, CellAccumulator, ImpactKind, PatchAccumulator,
    PerturbationRecord, TokenAccumulator,
};
use crate::audio::Spectrogram;
use crate::error::{Error, Result};
use crate::masks::{
    apply_spectro_mask, sample_bubble_field, sample_feature_mask, sample_patch_selection,
    sample_token_mask, selection_to_mask, substream, BubbleConfig, PerturbationConfig, SpectroMask,
    TokenMask, SPECTRO_STREAM, TOKEN_STREAM,
};
use crate::oracle::{Oracle, ProbDist, TokenSequence, END};
use crate::segmentation::{multiscale_segment, SegmentationConfig, SegmentationMap};

/// Iterations evaluated between two sequential folds.
const CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Multi-scale morphological patches.
    #[default]
    Spes,
    /// Independent cells.
    FeatureWise,
    /// Noise everywhere except inside random elliptical bubbles.
    Bubble,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Spes => "spes",
            Method::FeatureWise => "feature-wise",
            Method::Bubble => "bubble",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spes" => Ok(Method::Spes),
            "feature-wise" => Ok(Method::FeatureWise),
            "bubble" => Ok(Method::Bubble),
            other => Err(Error::domain(format!(
                "unknown method {other:?} (expected spes, feature-wise or bubble)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainConfig {
    pub method: Method,
    pub perturbation: PerturbationConfig,
    pub segmentation: SegmentationConfig,
    pub bubble: BubbleConfig,
    pub impact: ImpactKind,
    /// Threads for the sweeps; 0 uses every core. Does not affect results.
    pub workers: usize,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self::for_method(Method::Spes)
    }
}

impl ExplainConfig {
    /// Sampling defaults of each method.
    pub fn for_method(method: Method) -> Self {
        let perturbation = match method {
            Method::Spes => PerturbationConfig::default(),
            Method::FeatureWise => PerturbationConfig {
                p_spec: 0.7,
                p_tok: 0.1,
                ..PerturbationConfig::default()
            },
            Method::Bubble => PerturbationConfig {
                n_spec_iters: 1_000,
                ..PerturbationConfig::default()
            },
        };
        Self {
            method,
            perturbation,
            segmentation: SegmentationConfig::default(),
            bubble: BubbleConfig::default(),
            impact: ImpactKind::Kl,
            workers: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.perturbation.validate()?;
        self.segmentation.validate()
    }

    /// The configuration as echoed into outputs; the worker count is left
    /// out since it cannot change results.
    pub fn echo(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("workers");
        }
        v
    }
}

/// Positions explained in `y`: every predicted token except `</s>`.
pub(crate) fn explained_positions(y: &TokenSequence) -> usize {
    y.surface[1..].iter().take_while(|s| s.as_str() != END).count()
}

fn with_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::domain(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Evaluates iterations `0..n` in parallel chunks and folds them in order.
fn sweep<D, E, F>(n: usize, eval: E, mut fold: F) -> Result<()>
where
    D: Send,
    E: Fn(usize) -> Result<(D, Vec<f64>)> + Sync,
    F: FnMut(usize, D, Vec<f64>),
{
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let results: Vec<Result<(D, Vec<f64>)>> = (start..end)
            .into_par_iter()
            .map(|i| eval(i).map_err(|e| e.at_iteration(i)))
            .collect();
        for (i, r) in (start..end).zip(results) {
            let (draw, impacts) = r?;
            fold(i, draw, impacts);
        }
        log::debug!("iterations {end}/{n}");
        start = end;
    }
    Ok(())
}

fn impacts(
    kind: ImpactKind,
    y: &TokenSequence,
    base: &[ProbDist],
    pert: &[ProbDist],
    n_positions: usize,
) -> Result<Vec<f64>> {
    if pert.len() < n_positions {
        return Err(Error::Protocol(format!(
            "oracle returned {} distributions, {n_positions} needed",
            pert.len()
        )));
    }
    (0..n_positions)
        .map(|e| kind.score(&base[e], &pert[e], y.ids[e + 1]))
        .collect()
}

/// What one spectrogram iteration perturbed.
enum Draw {
    Patches { scale: usize, perturbed: Vec<bool> },
    Cells(SpectroMask),
}

struct SpectroSweep<'a, O> {
    oracle: &'a O,
    x: &'a Spectrogram,
    y: &'a TokenSequence,
    segs: &'a [SegmentationMap],
    cfg: &'a ExplainConfig,
    base: &'a [ProbDist],
    n_positions: usize,
}

impl<O: Oracle> SpectroSweep<'_, O> {
    fn scale_of(&self, i: usize) -> usize {
        let per_scale = self.cfg.perturbation.n_spec_iters.div_ceil(self.segs.len());
        (i / per_scale).min(self.segs.len() - 1)
    }

    fn eval(&self, i: usize) -> Result<(Draw, Vec<f64>)> {
        let p = &self.cfg.perturbation;
        let mut rng = substream(p.rng_seed, SPECTRO_STREAM, i as u64);
        let (t, c) = self.x.shape();
        let (draw, perturbed_x) = match self.cfg.method {
            Method::Spes => {
                let scale = self.scale_of(i);
                let seg = &self.segs[scale];
                let perturbed = sample_patch_selection(seg.n_patches(), p.p_spec, &mut rng);
                let mut frames = self.x.frames().clone();
                frames.zip_mut_with(seg.labels(), |v, &l| {
                    if perturbed[l as usize] {
                        *v = 0.0;
                    }
                });
                let xp = Spectrogram::from_frames(frames, self.x.cmvn)?;
                (Draw::Patches { scale, perturbed }, xp)
            }
            Method::FeatureWise => {
                let m = sample_feature_mask(t, c, p.p_spec, &mut rng);
                let xp = apply_spectro_mask(self.x, &m)?;
                (Draw::Cells(m), xp)
            }
            Method::Bubble => {
                let field = sample_bubble_field(
                    t,
                    c,
                    self.x.stride_s,
                    self.x.value_range(),
                    &self.cfg.bubble,
                    &mut rng,
                )?;
                let xp = field.apply(self.x)?;
                (Draw::Cells(field.mask_equivalent), xp)
            }
        };
        let mut perturbed_x = perturbed_x;
        perturbed_x.stride_s = self.x.stride_s;
        let pert = self.oracle.forward(&perturbed_x, self.y, None)?;
        let r = impacts(self.cfg.impact, self.y, self.base, &pert, self.n_positions)?;
        Ok((draw, r))
    }
}

fn token_eval<O: Oracle>(
    oracle: &O,
    x: &Spectrogram,
    y: &TokenSequence,
    cfg: &ExplainConfig,
    base: &[ProbDist],
    n_positions: usize,
    i: usize,
) -> Result<(TokenMask, Vec<f64>)> {
    let p = &cfg.perturbation;
    let mut rng = substream(p.rng_seed, TOKEN_STREAM, i as u64);
    // Only the prefix tokens some explained position reads are drawn.
    let mask = sample_token_mask(n_positions.max(1), p.p_tok, &mut rng)?;
    let pert = oracle.forward(x, y, Some(&mask))?;
    let r = impacts(cfg.impact, y, base, &pert, n_positions)?;
    Ok((mask, r))
}

fn check_inputs(x: &Spectrogram, y: &TokenSequence, segs: &[SegmentationMap], cfg: &ExplainConfig) -> Result<()> {
    cfg.validate()?;
    if y.len() < 2 {
        return Err(Error::domain("token sequence needs <s> and at least one predicted token"));
    }
    if cfg.method == Method::Spes {
        if segs.is_empty() {
            return Err(Error::domain("patch perturbation needs at least one segmentation"));
        }
        if let Some(s) = segs.iter().find(|s| s.shape() != x.shape()) {
            return Err(Error::ShapeMismatch {
                expected: x.shape(),
                got: s.shape(),
            });
        }
    }
    Ok(())
}

/// Spectrogram perturbation records with the token prefix left intact. Masks
/// are kept in full, so this suits small inputs; [`explain`] streams instead.
pub fn explain_spectrogram<O: Oracle>(
    oracle: &O,
    x: &Spectrogram,
    y: &TokenSequence,
    segs: &[SegmentationMap],
    cfg: &ExplainConfig,
) -> Result<Vec<PerturbationRecord<SpectroMask>>> {
    check_inputs(x, y, segs, cfg)?;
    let base = oracle.forward(x, y, None)?;
    let n_positions = explained_positions(y);
    let job = SpectroSweep {
        oracle,
        x,
        y,
        segs,
        cfg,
        base: &base,
        n_positions,
    };
    let mut records = Vec::with_capacity(cfg.perturbation.n_spec_iters);
    with_pool(cfg.workers, || {
        sweep(
            cfg.perturbation.n_spec_iters,
            |i| job.eval(i),
            |_, draw, impacts| {
                let mask = match draw {
                    Draw::Patches { scale, perturbed } => {
                        selection_to_mask(&segs[scale], &perturbed, Some(scale))
                    }
                    Draw::Cells(m) => m,
                };
                records.push(PerturbationRecord { mask, impacts });
            },
        )
    })??;
    Ok(records)
}

/// Token perturbation records with the spectrogram left intact.
pub fn explain_tokens<O: Oracle>(
    oracle: &O,
    x: &Spectrogram,
    y: &TokenSequence,
    cfg: &ExplainConfig,
) -> Result<Vec<PerturbationRecord<TokenMask>>> {
    cfg.validate()?;
    if y.len() < 2 {
        return Err(Error::domain("token sequence needs <s> and at least one predicted token"));
    }
    let base = oracle.forward(x, y, None)?;
    let n_positions = explained_positions(y);
    let mut records = Vec::with_capacity(cfg.perturbation.n_tok_iters);
    with_pool(cfg.workers, || {
        sweep(
            cfg.perturbation.n_tok_iters,
            |i| token_eval(oracle, x, y, cfg, &base, n_positions, i),
            |_, mask, impacts| records.push(PerturbationRecord { mask, impacts }),
        )
    })??;
    Ok(records)
}

/// Decodes (unless `y` is given), segments and explains one utterance.
pub fn explain<O: Oracle>(
    oracle: &O,
    x: &Spectrogram,
    y: Option<TokenSequence>,
    cfg: &ExplainConfig,
) -> Result<SaliencyBundle> {
    cfg.validate()?;
    let segs = match cfg.method {
        Method::Spes => with_pool(cfg.workers, || multiscale_segment(x, &cfg.segmentation))??,
        _ => Vec::new(),
    };
    explain_with_segments(oracle, x, y, &segs, cfg)
}

/// [`explain`] with precomputed segmentations.
pub fn explain_with_segments<O: Oracle>(
    oracle: &O,
    x: &Spectrogram,
    y: Option<TokenSequence>,
    segs: &[SegmentationMap],
    cfg: &ExplainConfig,
) -> Result<SaliencyBundle> {
    let y = match y {
        Some(y) => y,
        None => oracle.decode(x)?,
    };
    check_inputs(x, &y, segs, cfg)?;
    let base = oracle.forward(x, &y, None)?;
    let n_positions = explained_positions(&y);
    if base.len() < n_positions {
        return Err(Error::Protocol(format!(
            "oracle returned {} distributions, {n_positions} needed",
            base.len()
        )));
    }

    let (raw_x, raw_y) = with_pool(cfg.workers, || -> Result<_> {
        let job = SpectroSweep {
            oracle,
            x,
            y: &y,
            segs,
            cfg,
            base: &base,
            n_positions,
        };
        let raw_x = match cfg.method {
            Method::Spes => {
                let mut acc = PatchAccumulator::new(segs, n_positions);
                sweep(
                    cfg.perturbation.n_spec_iters,
                    |i| job.eval(i),
                    |_, draw, r| {
                        if let Draw::Patches { scale, perturbed } = draw {
                            acc.add(scale, &perturbed, &r);
                        }
                    },
                )?;
                acc.finish(segs)
            }
            _ => {
                let mut acc = CellAccumulator::new(x.shape(), n_positions);
                sweep(
                    cfg.perturbation.n_spec_iters,
                    |i| job.eval(i),
                    |_, draw, r| {
                        if let Draw::Cells(m) = draw {
                            acc.add(&m, &r);
                        }
                    },
                )?;
                acc.finish()
            }
        };
        let mut tok = TokenAccumulator::new(n_positions);
        sweep(
            cfg.perturbation.n_tok_iters,
            |i| token_eval(oracle, x, &y, cfg, &base, n_positions, i),
            |_, m, r| tok.add(&m, &r),
        )?;
        Ok((raw_x, tok.finish()))
    })??;

    Ok(normalize(x, y, raw_x, raw_y, cfg))
}

/// z-scores every map, averages the spectrogram maps into the sentence map,
/// then min-maxes each token's pair of maps jointly.
fn normalize(
    x: &Spectrogram,
    y: TokenSequence,
    raw_x: Vec<Array2<f64>>,
    raw_y: Vec<Vec<f64>>,
    cfg: &ExplainConfig,
) -> SaliencyBundle {
    let zx: Vec<Array2<f64>> = raw_x.iter().map(zscore_map).collect();
    let zy: Vec<Vec<f64>> = raw_y.iter().map(|v| zscore(v)).collect();
    let sentence = sentence_map(&zx).unwrap_or_else(|_| Array2::zeros(x.shape()));
    let maps = zx
        .iter()
        .zip(&zy)
        .enumerate()
        .map(|(e, (sx, sy))| {
            let (sx, sy) = joint_minmax(sx, sy);
            TokenSaliency {
                position: e + 1,
                token_id: y.ids[e + 1],
                surface: y.surface[e + 1].clone(),
                sx,
                sy,
            }
        })
        .collect();
    SaliencyBundle {
        tokens: y,
        method: cfg.method,
        stage: NormStage::Minmaxed,
        seed: cfg.perturbation.rng_seed,
        config: cfg.echo(),
        maps,
        sentence,
        input: x.clone(),
    }
}
