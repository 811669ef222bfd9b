//! JSON wire protocol spoken with a model bridge.
//!
//! ```text
//! POST /v1/decode  {"spectrogram": {"T", "C", "data"}}
//!               -> {"tokens": [ids], "surface": [strings]}
//! POST /v1/forward {"spectrogram", "tokens": [ids], "token_mask": [0/1] | null}
//!               -> {"logprobs": [[..]; len(tokens)], "vocab_size": V}
//! ```
//!
//! `data` is base64 of the `T * C` little-endian `f32` values, row-major by
//! frame. Entry `j` of `logprobs` is the log-distribution of the token that
//! follows `tokens[0..=j]`. JSON has no infinities, so a zero probability
//! travels as [`LOG_ZERO`].

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Oracle, ProbDist, TokenSequence};
use crate::audio::Spectrogram;
use crate::error::{Error, Result};
use crate::masks::TokenMask;

/// Largest deviation from a unit sum that the client silently renormalizes.
pub const RENORMALIZE_TOLERANCE: f64 = 1e-4;

/// Log-probability sent for an impossible token; `exp` maps it back to 0.
pub const LOG_ZERO: f64 = -1e4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireSpectrogram {
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "C")]
    pub c: usize,
    pub data: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeRequest {
    pub spectrogram: WireSpectrogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeResponse {
    pub tokens: Vec<u32>,
    pub surface: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardRequest {
    pub spectrogram: WireSpectrogram,
    pub tokens: Vec<u32>,
    pub token_mask: Option<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardResponse {
    pub logprobs: Vec<Vec<f64>>,
    pub vocab_size: usize,
}

pub fn encode_spectrogram(x: &Spectrogram) -> WireSpectrogram {
    let mut bytes = Vec::with_capacity(x.frames().len() * 4);
    for &v in x.frames().iter() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    WireSpectrogram {
        t: x.n_frames(),
        c: x.n_mels(),
        data: STANDARD.encode(bytes),
    }
}

pub fn decode_spectrogram(w: &WireSpectrogram) -> Result<Spectrogram> {
    let bytes = STANDARD
        .decode(&w.data)
        .map_err(|e| Error::Protocol(format!("bad base64 payload: {e}")))?;
    if bytes.len() != w.t * w.c * 4 {
        return Err(Error::Protocol(format!(
            "payload has {} bytes, header says {}x{} floats",
            bytes.len(),
            w.t,
            w.c
        )));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    let frames = Array2::from_shape_vec((w.t, w.c), values).map_err(|e| Error::Protocol(e.to_string()))?;
    Spectrogram::from_frames(frames, true).map_err(|e| Error::Protocol(e.to_string()))
}

/// Full-length wire mask: missing trailing positions are kept.
pub fn encode_token_mask(mask: Option<&TokenMask>, len: usize) -> Option<Vec<u8>> {
    mask.map(|m| (0..len).map(|i| m.keeps(i) as u8).collect())
}

/// Converts one per-position log-probability vector, renormalizing small
/// drift and rejecting anything further off.
pub fn logprobs_to_dist(logprobs: &[f64], vocab_size: usize) -> Result<ProbDist> {
    if logprobs.len() != vocab_size {
        return Err(Error::Protocol(format!(
            "vector of length {} for vocabulary of {vocab_size}",
            logprobs.len()
        )));
    }
    let probs: Vec<f64> = logprobs.iter().map(|l| l.exp()).collect();
    if probs.iter().any(|p| !p.is_finite()) {
        return Err(Error::Protocol("non-finite log-probability".into()));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > RENORMALIZE_TOLERANCE {
        return Err(Error::Protocol(format!("distribution sums to {sum}")));
    }
    ProbDist::new(probs.into_iter().map(|p| p / sum).collect()).map_err(|e| Error::Protocol(e.to_string()))
}

pub fn parse_forward(resp: ForwardResponse, n_tokens: usize) -> Result<Vec<ProbDist>> {
    if resp.logprobs.len() < n_tokens {
        return Err(Error::Protocol(format!(
            "{} positions returned for {n_tokens} tokens",
            resp.logprobs.len()
        )));
    }
    resp.logprobs[..n_tokens]
        .iter()
        .map(|v| logprobs_to_dist(v, resp.vocab_size))
        .collect()
}

pub fn parse_decode(resp: DecodeResponse) -> Result<TokenSequence> {
    TokenSequence::new(resp.tokens, resp.surface).map_err(|e| Error::Protocol(e.to_string()))
}

/// Server side of `/v1/forward` over any oracle. Reference behaviour for
/// bridge implementations and the client's conformance tests.
pub fn serve_forward<O: Oracle + ?Sized>(oracle: &O, req: &ForwardRequest) -> Result<ForwardResponse> {
    let x = decode_spectrogram(&req.spectrogram)?;
    if let Some(m) = &req.token_mask {
        if m.len() != req.tokens.len() {
            return Err(Error::Protocol(format!(
                "token_mask has {} entries for {} tokens",
                m.len(),
                req.tokens.len()
            )));
        }
    }
    let surface = req.tokens.iter().map(|i| i.to_string()).collect();
    let y = TokenSequence::new(req.tokens.clone(), surface)?;
    let mask = req.token_mask.as_ref().map(|m| TokenMask {
        bits: m.iter().map(|&b| b != 0).collect(),
    });
    let dists = oracle.forward(&x, &y, mask.as_ref())?;
    let vocab_size = dists.first().map_or(0, ProbDist::len);
    Ok(ForwardResponse {
        logprobs: dists
            .iter()
            .map(|d| d.probs().iter().map(|p| p.ln().max(LOG_ZERO)).collect())
            .collect(),
        vocab_size,
    })
}

pub fn serve_decode<O: Oracle + ?Sized>(oracle: &O, req: &DecodeRequest) -> Result<DecodeResponse> {
    let y = oracle.decode(&decode_spectrogram(&req.spectrogram)?)?;
    Ok(DecodeResponse {
        tokens: y.ids,
        surface: y.surface,
    })
}
