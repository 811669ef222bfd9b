//! A deterministic stand-in model whose true dependencies are known.
//!
//! Audio is read as consecutive 50-frame (0.5 s) segments. Each of the four
//! tone tokens owns a 10-channel mel band:
//!
//! | token | channels |
//! |-------|----------|
//! | A     | 5..=14   |
//! | B     | 25..=34  |
//! | C     | 45..=54  |
//! | D     | 65..=74  |
//!
//! Position `k` (predicting `y_k`, `1 <= k <= n_segments`) emits
//! `softmax(beta * band_means(segment k-1) + recency * [tone == y_{k-1}])` over
//! the tones. When `y_{k-1}` is an unmasked `C`, the position instead puts
//! `mark_mass` on `MARK`. After the last segment the model emits `</s>` with
//! `mark_mass`. In both of those rule-driven cases the remaining mass follows
//! the utterance-wide band means, so it reacts only weakly and diffusely to the
//! audio.

use ndarray::{s, Axis};

use super::{Oracle, ProbDist, TokenSequence};
use crate::audio::Spectrogram;
use crate::error::Result;
use crate::masks::TokenMask;

pub const TOY_VOCAB: [&str; 7] = ["<s>", "</s>", "A", "B", "C", "D", "MARK"];
/// Inclusive channel ranges for A, B, C, D.
pub const TONE_BANDS: [(usize, usize); 4] = [(5, 14), (25, 34), (45, 54), (65, 74)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u32)]
pub enum ToyToken {
    Start = 0,
    End = 1,
    A = 2,
    B = 3,
    C = 4,
    D = 5,
    Mark = 6,
}

impl ToyToken {
    pub const TONES: [ToyToken; 4] = [ToyToken::A, ToyToken::B, ToyToken::C, ToyToken::D];

    pub fn id(self) -> u32 {
        self as u32
    }

    pub fn surface(self) -> &'static str {
        TOY_VOCAB[self as usize]
    }

    pub fn from_id(id: u32) -> Option<Self> {
        Some(match id {
            0 => Self::Start,
            1 => Self::End,
            2 => Self::A,
            3 => Self::B,
            4 => Self::C,
            5 => Self::D,
            6 => Self::Mark,
            _ => return None,
        })
    }

    /// Position of a tone within [`TONE_BANDS`].
    pub fn tone_index(self) -> Option<usize> {
        match self {
            Self::A => Some(0),
            Self::B => Some(1),
            Self::C => Some(2),
            Self::D => Some(3),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyModel {
    pub beta: f64,
    pub mark_mass: f64,
    pub recency: f64,
    pub segment_frames: usize,
    vocab: Vec<String>,
}

impl Default for ToyModel {
    fn default() -> Self {
        Self {
            beta: 8.0,
            mark_mass: 0.95,
            recency: 1.0,
            segment_frames: 50,
            vocab: TOY_VOCAB.iter().map(|s| s.to_string()).collect(),
        }
    }
}

struct Features {
    segments: Vec<[f64; 4]>,
    global: [f64; 4],
}

fn softmax(logits: &[f64; 4]) -> [f64; 4] {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp = logits.map(|l| (l - max).exp());
    let sum: f64 = exp.iter().sum();
    exp.map(|e| e / sum)
}

impl ToyModel {
    pub fn n_segments(&self, n_frames: usize) -> usize {
        n_frames.div_ceil(self.segment_frames)
    }

    fn features(&self, x: &Spectrogram) -> Features {
        let frames = x.frames();
        let band_mean = |view: ndarray::ArrayView2<f64>, (lo, hi): (usize, usize)| {
            let band = view.slice(s![.., lo..=hi]);
            band.sum() / band.len() as f64
        };
        let segments = frames
            .axis_chunks_iter(Axis(0), self.segment_frames)
            .map(|seg| TONE_BANDS.map(|b| band_mean(seg, b)))
            .collect();
        let global = TONE_BANDS.map(|b| band_mean(frames.view(), b));
        Features { segments, global }
    }

    fn rule_dist(&self, token: ToyToken, f: &Features) -> [f64; 7] {
        let rest = softmax(&f.global.map(|g| self.beta * g));
        let mut p = [0.0; 7];
        for (tone, r) in ToyToken::TONES.iter().zip(rest) {
            p[tone.id() as usize] = (1.0 - self.mark_mass) * r;
        }
        p[token.id() as usize] = self.mark_mass;
        p
    }

    /// Distribution for position `k` given the effective previous token.
    fn dist_at(&self, k: usize, prev: Option<ToyToken>, f: &Features) -> [f64; 7] {
        if k > f.segments.len() {
            return self.rule_dist(ToyToken::End, f);
        }
        if prev == Some(ToyToken::C) {
            return self.rule_dist(ToyToken::Mark, f);
        }
        let means = f.segments[k - 1];
        let mut logits = means.map(|m| self.beta * m);
        if let Some(i) = prev.and_then(ToyToken::tone_index) {
            logits[i] += self.recency;
        }
        let tones = softmax(&logits);
        let mut p = [0.0; 7];
        for (tone, q) in ToyToken::TONES.iter().zip(tones) {
            p[tone.id() as usize] = q;
        }
        p
    }

    fn effective_prev(y: &TokenSequence, j: usize, mask: Option<&TokenMask>) -> Option<ToyToken> {
        if mask.is_some_and(|m| !m.keeps(j)) {
            None
        } else {
            ToyToken::from_id(y.ids[j])
        }
    }
}

impl Oracle for ToyModel {
    fn forward(
        &self,
        x: &Spectrogram,
        y: &TokenSequence,
        tok_mask: Option<&TokenMask>,
    ) -> Result<Vec<ProbDist>> {
        let f = self.features(x);
        (0..y.len())
            .map(|j| {
                let prev = Self::effective_prev(y, j, tok_mask);
                ProbDist::new(self.dist_at(j + 1, prev, &f).to_vec())
            })
            .collect()
    }

    fn decode(&self, x: &Spectrogram) -> Result<TokenSequence> {
        let f = self.features(x);
        let mut ids = vec![ToyToken::Start.id()];
        loop {
            let k = ids.len();
            let prev = ToyToken::from_id(*ids.last().unwrap());
            let next = ProbDist::new(self.dist_at(k, prev, &f).to_vec())?.argmax();
            ids.push(next);
            if next == ToyToken::End.id() {
                break;
            }
        }
        let surface = ids.iter().map(|&i| TOY_VOCAB[i as usize].to_string()).collect();
        TokenSequence::new(ids, surface)
    }

    fn vocab(&self) -> Option<&[String]> {
        Some(&self.vocab)
    }
}
