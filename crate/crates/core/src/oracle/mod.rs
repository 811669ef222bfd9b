//! The black-box model contract.
//!
//! An [`Oracle`] exposes teacher-forced next-token distributions and a decoder.
//! `forward(x, y, mask)` returns one distribution per prefix of `y`: entry `j`
//! conditions on `y[0..=j]` and predicts `y[j + 1]`. A token mask zeroes the
//! embeddings of the flagged prefix tokens before any position reads them.

mod remote;
mod toy;
pub mod wire;

pub use remote::{RemoteConfig, RemoteOracle};
pub use toy::{ToyModel, ToyToken, TONE_BANDS, TOY_VOCAB};

use serde::{Deserialize, Serialize};

use crate::audio::Spectrogram;
use crate::error::{Error, Result};
use crate::masks::TokenMask;

pub const START: &str = "<s>";
pub const END: &str = "</s>";
pub const START_ID: u32 = 0;
/// Sentencepiece word-boundary marker.
const WORD_MARK: char = '\u{2581}';

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub surface: Vec<String>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>, surface: Vec<String>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::domain("token sequence must start with <s>"));
        }
        if ids.len() != surface.len() {
            return Err(Error::domain(format!(
                "{} ids but {} surfaces",
                ids.len(),
                surface.len()
            )));
        }
        Ok(Self { ids, surface })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn is_special(surface: &str) -> bool {
        surface == START || surface == END
    }

    /// Words built from the non-special tokens, each paired with the indices
    /// of the tokens forming it. With sentencepiece surfaces a `▁` opens a new
    /// word; otherwise every token is its own word.
    pub fn word_spans(&self) -> Vec<(String, Vec<usize>)> {
        let pieces = self.surface.iter().any(|s| s.starts_with(WORD_MARK));
        let mut words: Vec<(String, Vec<usize>)> = Vec::new();
        for (i, s) in self.surface.iter().enumerate() {
            if Self::is_special(s) {
                continue;
            }
            if !pieces {
                words.push((s.clone(), vec![i]));
            } else if s.starts_with(WORD_MARK) || words.is_empty() {
                words.push((s.trim_start_matches(WORD_MARK).to_string(), vec![i]));
            } else {
                let last = words.last_mut().unwrap();
                last.0.push_str(s);
                last.1.push(i);
            }
        }
        words
    }

    pub fn words(&self) -> Vec<String> {
        self.word_spans().into_iter().map(|(w, _)| w).collect()
    }
}

/// A probability vector over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbDist(Vec<f64>);

impl ProbDist {
    pub const SUM_TOLERANCE: f64 = 1e-6;

    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::domain("empty distribution"));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::domain("probabilities must be finite and non-negative"));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(Error::domain(format!("probabilities sum to {sum}")));
        }
        Ok(Self(probs))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Highest-probability id; ties go to the lowest id.
    pub fn argmax(&self) -> u32 {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = i;
            }
        }
        best as u32
    }
}

pub trait Oracle: Sync {
    fn forward(
        &self,
        x: &Spectrogram,
        y: &TokenSequence,
        tok_mask: Option<&TokenMask>,
    ) -> Result<Vec<ProbDist>>;

    fn decode(&self, x: &Spectrogram) -> Result<TokenSequence>;

    /// Token table, when the oracle knows it.
    fn vocab(&self) -> Option<&[String]> {
        None
    }
}

impl<O: Oracle + ?Sized> Oracle for &O {
    fn forward(&self, x: &Spectrogram, y: &TokenSequence, m: Option<&TokenMask>) -> Result<Vec<ProbDist>> {
        (**self).forward(x, y, m)
    }

    fn decode(&self, x: &Spectrogram) -> Result<TokenSequence> {
        (**self).decode(x)
    }

    fn vocab(&self) -> Option<&[String]> {
        (**self).vocab()
    }
}

impl<O: Oracle + ?Sized> Oracle for Box<O> {
    fn forward(&self, x: &Spectrogram, y: &TokenSequence, m: Option<&TokenMask>) -> Result<Vec<ProbDist>> {
        (**self).forward(x, y, m)
    }

    fn decode(&self, x: &Spectrogram) -> Result<TokenSequence> {
        (**self).decode(x)
    }

    fn vocab(&self) -> Option<&[String]> {
        (**self).vocab()
    }
}
