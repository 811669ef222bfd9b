//! Per-utterance explanation and its file format.
//!
//! The file starts with one line of JSON (the manifest) followed by binary
//! blocks in manifest order: for each explained token its spectrogram map in
//! the spectrogram format and its token map as raw little-endian `f32`, then
//! the sentence map and the input spectrogram, both in the spectrogram format.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::engine::Method;
use crate::audio::{read_f32_block, write_f32_block, Spectrogram};
use crate::error::{Error, Result};
use crate::oracle::TokenSequence;

const FORMAT_TAG: &str = "s2t-saliency-bundle";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormStage {
    Raw,
    Zscored,
    Minmaxed,
}

/// Maps explaining the token at `position` of the decoded sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSaliency {
    pub position: usize,
    pub token_id: u32,
    pub surface: String,
    /// `T x C` spectrogram map.
    pub sx: Array2<f64>,
    /// One score per prefix token `y[0..position]`, `<s>` first.
    pub sy: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyBundle {
    pub tokens: TokenSequence,
    pub method: Method,
    /// Normalization applied to the token maps.
    pub stage: NormStage,
    pub seed: u64,
    pub config: serde_json::Value,
    pub maps: Vec<TokenSaliency>,
    /// Mean of the z-scored spectrogram maps.
    pub sentence: Array2<f64>,
    pub input: Spectrogram,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    position: usize,
    token_id: u32,
    surface: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    tokens: TokenSequence,
    #[serde(rename = "T")]
    t: usize,
    #[serde(rename = "C")]
    c: usize,
    method: Method,
    stage: NormStage,
    seed: u64,
    config: serde_json::Value,
    explained: Vec<ManifestEntry>,
    blocks: Vec<String>,
}

fn map_spectrogram(map: &Array2<f64>, like: &Spectrogram) -> Result<Spectrogram> {
    let mut s = Spectrogram::from_frames(map.clone(), false)?;
    s.stride_s = like.stride_s;
    Ok(s)
}

impl SaliencyBundle {
    pub fn shape(&self) -> (usize, usize) {
        self.input.shape()
    }

    /// Map for the token at `position` of the decoded sequence.
    pub fn token(&self, position: usize) -> Option<&TokenSaliency> {
        self.maps.iter().find(|m| m.position == position)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let mut blocks = Vec::new();
        for m in &self.maps {
            blocks.push(format!("sx:{}", m.position));
            blocks.push(format!("sy:{}", m.position));
        }
        blocks.push("sentence".into());
        blocks.push("input".into());
        let (t, c) = self.shape();
        let manifest = Manifest {
            format: FORMAT_TAG.into(),
            version: FORMAT_VERSION,
            tokens: self.tokens.clone(),
            t,
            c,
            method: self.method,
            stage: self.stage,
            seed: self.seed,
            config: self.config.clone(),
            explained: self
                .maps
                .iter()
                .map(|m| ManifestEntry {
                    position: m.position,
                    token_id: m.token_id,
                    surface: m.surface.clone(),
                })
                .collect(),
            blocks,
        };
        serde_json::to_writer(&mut w, &manifest)?;
        w.write_all(b"\n")?;
        for m in &self.maps {
            map_spectrogram(&m.sx, &self.input)?.write_to(&mut w)?;
            write_f32_block(&mut w, m.sy.iter().copied())?;
        }
        map_spectrogram(&self.sentence, &self.input)?.write_to(&mut w)?;
        self.input.write_to(&mut w)?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(mut r: R) -> Result<Self> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        let manifest: Manifest = serde_json::from_str(line.trim_end())
            .map_err(|e| Error::format(format!("bad bundle manifest: {e}")))?;
        if manifest.format != FORMAT_TAG || manifest.version != FORMAT_VERSION {
            return Err(Error::format(format!(
                "not a saliency bundle (format {:?}, version {})",
                manifest.format, manifest.version
            )));
        }
        let shape = (manifest.t, manifest.c);
        let read_map = |r: &mut R| -> Result<Array2<f64>> {
            let s = Spectrogram::read_from(&mut *r)?;
            if s.shape() != shape {
                return Err(Error::format(format!("block of shape {:?}, expected {shape:?}", s.shape())));
            }
            Ok(s.frames().clone())
        };
        let mut maps = Vec::with_capacity(manifest.explained.len());
        for e in manifest.explained {
            let sx = read_map(&mut r)?;
            let sy = read_f32_block(&mut r, e.position)?;
            maps.push(TokenSaliency {
                position: e.position,
                token_id: e.token_id,
                surface: e.surface,
                sx,
                sy,
            });
        }
        let sentence = read_map(&mut r)?;
        let input = Spectrogram::read_from(&mut r)?;
        if input.shape() != shape {
            return Err(Error::format("input block does not match the manifest shape"));
        }
        Ok(Self {
            tokens: manifest.tokens,
            method: manifest.method,
            stage: manifest.stage,
            seed: manifest.seed,
            config: manifest.config,
            maps,
            sentence,
            input,
        })
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
