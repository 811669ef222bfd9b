//! Synthetic tone corpus matched to [`ToyModel`](crate::oracle::ToyModel).
//!
//! Every utterance is a run of 0.5 s segments. A segment carries one tone
//! token, rendered as a chord of sinusoids at the mel centers of the inner
//! channels of the tone's band, over a faint noise floor.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::analysis::WordAlignment;
use crate::audio::{mel_center_frequencies, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::masks::substream;
use crate::oracle::{ToyToken, TONE_BANDS};

pub const SEGMENT_S: f64 = 0.5;
const CORPUS_STREAM: u64 = 0x434f_5250;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyCorpusConfig {
    pub n_utterances: usize,
    pub min_segments: usize,
    pub max_segments: usize,
    /// Peak amplitude of each sinusoid.
    pub amplitude: f64,
    pub noise_std: f64,
    /// Raised-cosine ramp at both ends of every segment.
    pub fade_s: f64,
    pub seed: u64,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        Self {
            n_utterances: 50,
            min_segments: 2,
            max_segments: 4,
            amplitude: 0.05,
            noise_std: 0.005,
            fade_s: 0.01,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyUtterance {
    pub id: String,
    pub tones: Vec<ToyToken>,
    pub waveform: Waveform,
    /// The words the toy model is built to output.
    pub reference: Vec<String>,
    pub alignment: Vec<WordAlignment>,
}

/// Words the toy model emits for a tone sequence: a segment that follows a
/// `C` comes out as `MARK`.
pub fn expected_words(tones: &[ToyToken]) -> Vec<String> {
    let mut out: Vec<ToyToken> = Vec::with_capacity(tones.len());
    for &t in tones {
        let next = if out.last() == Some(&ToyToken::C) { ToyToken::Mark } else { t };
        out.push(next);
    }
    out.iter().map(|t| t.surface().to_string()).collect()
}

/// Frequencies of the chord for a tone.
pub fn tone_frequencies(tone: ToyToken) -> Vec<f64> {
    let (lo, hi) = TONE_BANDS[tone.tone_index().expect("a tone token")];
    let centers = mel_center_frequencies();
    (lo + 1..hi).map(|c| centers[c]).collect()
}

fn synthesize<R: Rng>(tones: &[ToyToken], cfg: &ToyCorpusConfig, rng: &mut R) -> Vec<f32> {
    let sr = SAMPLE_RATE as f64;
    let seg_len = (SEGMENT_S * sr) as usize;
    let fade = (cfg.fade_s * sr) as usize;
    let mut out = vec![0.0f64; seg_len * tones.len()];
    for (i, &tone) in tones.iter().enumerate() {
        let seg = &mut out[i * seg_len..(i + 1) * seg_len];
        for f in tone_frequencies(tone) {
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            for (n, v) in seg.iter_mut().enumerate() {
                *v += cfg.amplitude * (std::f64::consts::TAU * f * n as f64 / sr + phase).sin();
            }
        }
        for n in 0..fade.min(seg_len / 2) {
            let w = 0.5 - 0.5 * (std::f64::consts::PI * n as f64 / fade as f64).cos();
            seg[n] *= w;
            seg[seg_len - 1 - n] *= w;
        }
    }
    let noise = Normal::new(0.0, cfg.noise_std).expect("finite noise level");
    out.iter().map(|v| (v + noise.sample(rng)) as f32).collect()
}

/// Utterance `index` of the corpus; independent of the others.
pub fn toy_utterance(cfg: &ToyCorpusConfig, index: usize) -> Result<ToyUtterance> {
    if !(cfg.noise_std >= 0.0 && cfg.noise_std.is_finite()) {
        return Err(Error::domain("noise_std must be finite and non-negative"));
    }
    if cfg.min_segments < 2 || cfg.max_segments < cfg.min_segments {
        return Err(Error::domain("toy utterances need 2 <= min_segments <= max_segments"));
    }
    let mut rng = substream(cfg.seed, CORPUS_STREAM, index as u64);
    let n = rng.gen_range(cfg.min_segments..=cfg.max_segments);
    let tones: Vec<ToyToken> = loop {
        let t: Vec<ToyToken> = (0..n).map(|_| *ToyToken::TONES.choose(&mut rng).unwrap()).collect();
        if t.iter().any(|x| *x != t[0]) {
            break t;
        }
    };
    let reference = expected_words(&tones);
    let alignment = reference
        .iter()
        .enumerate()
        .map(|(j, w)| WordAlignment {
            word: w.clone(),
            start_s: j as f64 * SEGMENT_S,
            end_s: (j + 1) as f64 * SEGMENT_S,
        })
        .collect();
    let samples = synthesize(&tones, cfg, &mut rng);
    Ok(ToyUtterance {
        id: format!("toy{index:04}"),
        tones,
        waveform: Waveform::new(samples, SAMPLE_RATE)?,
        reference,
        alignment,
    })
}

pub fn toy_corpus(cfg: &ToyCorpusConfig) -> Result<Vec<ToyUtterance>> {
    (0..cfg.n_utterances).map(|i| toy_utterance(cfg, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{cmvn, log_mel};
    use crate::oracle::{Oracle, ToyModel};

    #[test]
    fn mark_follows_c() {
        use ToyToken::*;
        assert_eq!(expected_words(&[C, D]), vec!["C", "MARK"]);
        assert_eq!(expected_words(&[C, C, D]), vec!["C", "MARK", "D"]);
        assert_eq!(expected_words(&[A, B, C]), vec!["A", "B", "C"]);
    }

    #[test]
    fn chord_sits_inside_band() {
        let f = tone_frequencies(ToyToken::B);
        assert_eq!(f.len(), 8);
        let centers = mel_center_frequencies();
        assert!(f[0] > centers[25] && f[7] < centers[34]);
    }

    #[test]
    fn toy_model_reads_synthetic_audio() {
        let cfg = ToyCorpusConfig {
            n_utterances: 20,
            ..Default::default()
        };
        let model = ToyModel::default();
        for u in toy_corpus(&cfg).unwrap() {
            let n = u.tones.len();
            assert_eq!(u.waveform.samples.len(), 8000 * n);
            let x = cmvn(&log_mel(&u.waveform).unwrap()).unwrap();
            assert_eq!(x.n_frames(), 50 * n - 2);
            let y = model.decode(&x).unwrap();
            assert_eq!(y.words(), u.reference, "{}", u.id);
            assert_eq!(u.alignment.len(), u.reference.len());
        }
    }

    #[test]
    fn utterances_are_reproducible() {
        let cfg = ToyCorpusConfig::default();
        let a = toy_utterance(&cfg, 3).unwrap();
        let b = toy_utterance(&cfg, 3).unwrap();
        assert_eq!(a.waveform, b.waveform);
        assert_eq!(a.tones, b.tones);
    }
}
