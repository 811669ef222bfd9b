//! Fixtures shared by the benchmarks.

use s2t_saliency::audio::{cmvn, log_mel, Spectrogram};
use s2t_saliency::corpus::{toy_utterance, ToyCorpusConfig};
use s2t_saliency::oracle::ProbDist;

/// Normalized spectrogram of a toy utterance with `segments` half-second
/// segments.
pub fn toy_input(segments: usize) -> Spectrogram {
    let cfg = ToyCorpusConfig {
        min_segments: segments,
        max_segments: segments,
        ..Default::default()
    };
    let u = toy_utterance(&cfg, 0).expect("valid toy config");
    cmvn(&log_mel(&u.waveform).expect("long enough")).expect("non-empty")
}

/// A smooth, strictly positive distribution over `n` outcomes.
pub fn ramp_dist(n: usize, tilt: f64) -> ProbDist {
    let w: Vec<f64> = (0..n).map(|i| (tilt * i as f64 / n as f64).exp()).collect();
    let s: f64 = w.iter().sum();
    ProbDist::new(w.iter().map(|v| v / s).collect()).expect("normalized")
}
