//! Audio featurization: 16 kHz PCM16 WAV in, CMVN'd 80-channel log-mel
//! spectrograms out.
//!
//! Front-end parameters (fixed, no dithering or pre-emphasis):
//!
//! - 25 ms periodic Hann window (400 samples), 10 ms stride (160 samples)
//! - 512-point FFT, power spectrum
//! - 80 triangular filters on the HTK mel scale `2595 * log10(1 + f / 700)`,
//!   spanning 0..8000 Hz, unnormalized
//! - natural log with an additive floor of `1e-10`
//!
//! The spectrogram binary format is a single JSON header line
//! `{"T":..,"C":..,"stride_s":..,"cmvn":..}` terminated by `\n`, followed by
//! `T * C` little-endian `f32` values, row-major by frame.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, Axis};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
pub const N_MELS: usize = 80;
pub const WINDOW_SAMPLES: usize = 400;
pub const STRIDE_SAMPLES: usize = 160;
pub const N_FFT: usize = 512;
pub const FRAME_STRIDE_S: f64 = 0.010;
pub const WINDOW_S: f64 = 0.025;
pub const LOG_FLOOR: f64 = 1e-10;
pub const MEL_FMAX: f64 = 8000.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::domain("waveform has no samples"));
        }
        if sample_rate == 0 {
            return Err(Error::domain("sample rate must be positive"));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Reads a 16-bit PCM mono WAV file, scaling samples by `1 / 32768`.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let reader = hound::WavReader::open(path.as_ref()).map_err(wav_error)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::UnsupportedFormat(format!(
            "{} channels, expected mono",
            spec.channels
        )));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::UnsupportedFormat(format!(
            "{}-bit {:?} samples, expected 16-bit PCM",
            spec.bits_per_sample, spec.sample_format
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(wav_error)?;
    Waveform::new(samples, spec.sample_rate)
}

/// Writes a waveform as 16-bit PCM mono, clipping to the representable range.
pub fn write_wav(path: impl AsRef<Path>, wave: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path.as_ref(), spec).map_err(wav_error)?;
    for &s in &wave.samples {
        let v = (s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(v).map_err(wav_error)?;
    }
    writer.finalize().map_err(wav_error)
}

fn wav_error(e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io)
            if matches!(io.kind(), std::io::ErrorKind::UnexpectedEof | std::io::ErrorKind::Other) =>
        {
            Error::Format(format!("truncated WAV file: {io}"))
        }
        hound::Error::IoError(io) => Error::Io(io),
        hound::Error::Unsupported => Error::UnsupportedFormat("unsupported WAV encoding".into()),
        other => Error::Format(other.to_string()),
    }
}

/// A `T x C` grid of log-mel energies, one row per 10 ms frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    frames: Array2<f64>,
    pub stride_s: f64,
    pub window_s: f64,
    pub cmvn: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct SpectrogramHeader {
    #[serde(rename = "T")]
    t: usize,
    #[serde(rename = "C")]
    c: usize,
    stride_s: f64,
    cmvn: bool,
}

impl Spectrogram {
    pub fn from_frames(frames: Array2<f64>, cmvn: bool) -> Result<Self> {
        if frames.nrows() == 0 || frames.ncols() == 0 {
            return Err(Error::domain("spectrogram must have at least one frame and channel"));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("spectrogram contains non-finite values"));
        }
        Ok(Self {
            frames,
            stride_s: FRAME_STRIDE_S,
            window_s: WINDOW_S,
            cmvn,
        })
    }

    pub fn frames(&self) -> &Array2<f64> {
        &self.frames
    }

    pub fn n_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn n_mels(&self) -> usize {
        self.frames.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_frames(), self.n_mels())
    }

    pub fn duration_s(&self) -> f64 {
        self.n_frames() as f64 * self.stride_s
    }

    /// Same metadata, new values. Callers keep the shape.
    pub(crate) fn with_frames(&self, frames: Array2<f64>) -> Self {
        debug_assert_eq!(frames.dim(), self.frames.dim());
        Self {
            frames,
            stride_s: self.stride_s,
            window_s: self.window_s,
            cmvn: self.cmvn,
        }
    }

    pub fn value_range(&self) -> (f64, f64) {
        self.frames
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = SpectrogramHeader {
            t: self.n_frames(),
            c: self.n_mels(),
            stride_s: self.stride_s,
            cmvn: self.cmvn,
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        write_f32_block(&mut w, self.frames.iter().copied())?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(mut r: R) -> Result<Self> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        let header: SpectrogramHeader = serde_json::from_str(line.trim_end())
            .map_err(|e| Error::format(format!("bad spectrogram header: {e}")))?;
        let data = read_f32_block(&mut r, header.t * header.c)?;
        let frames = Array2::from_shape_vec((header.t, header.c), data)
            .map_err(|e| Error::format(e.to_string()))?;
        let mut spec = Self::from_frames(frames, header.cmvn)?;
        spec.stride_s = header.stride_s;
        Ok(spec)
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

pub(crate) fn write_f32_block<W: Write>(w: &mut W, values: impl Iterator<Item = f64>) -> Result<()> {
    for v in values {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_f32_block<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)
        .map_err(|e| Error::format(format!("truncated f32 block of {n} values: {e}")))?;
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect())
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Edge and center frequencies of the filterbank: `n_mels + 2` points.
fn mel_points_hz(n_mels: usize, fmax: f64) -> Vec<f64> {
    let top = hz_to_mel(fmax);
    (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect()
}

/// Center frequency of every mel channel in Hz.
pub fn mel_center_frequencies() -> Vec<f64> {
    let pts = mel_points_hz(N_MELS, MEL_FMAX);
    pts[1..=N_MELS].to_vec()
}

/// Triangular filter weights, `n_mels x (n_fft / 2 + 1)`.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32, fmax: f64) -> Array2<f64> {
    let n_bins = n_fft / 2 + 1;
    let pts = mel_points_hz(n_mels, fmax);
    let mut fb = Array2::zeros((n_mels, n_bins));
    for m in 0..n_mels {
        let (lo, center, hi) = (pts[m], pts[m + 1], pts[m + 2]);
        for b in 0..n_bins {
            let f = b as f64 * sample_rate as f64 / n_fft as f64;
            let up = (f - lo) / (center - lo);
            let down = (hi - f) / (hi - center);
            fb[[m, b]] = up.min(down).max(0.0);
        }
    }
    fb
}

/// Reusable log-mel extractor (plans the FFT once).
pub struct MelFrontend {
    filterbank: Array2<f64>,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl Default for MelFrontend {
    fn default() -> Self {
        let window = (0..WINDOW_SAMPLES)
            .map(|n| {
                0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / WINDOW_SAMPLES as f64).cos()
            })
            .collect();
        Self {
            filterbank: mel_filterbank(N_MELS, N_FFT, SAMPLE_RATE, MEL_FMAX),
            window,
            fft: FftPlanner::new().plan_fft_forward(N_FFT),
        }
    }
}

impl MelFrontend {
    pub fn n_frames(n_samples: usize) -> usize {
        if n_samples < WINDOW_SAMPLES {
            0
        } else {
            (n_samples - WINDOW_SAMPLES) / STRIDE_SAMPLES + 1
        }
    }

    /// Power spectrum of one windowed, zero-padded frame.
    pub fn power_spectrum(&self, frame: &[f32]) -> Vec<f64> {
        let mut buf: Vec<Complex<f64>> = frame
            .iter()
            .zip(&self.window)
            .map(|(&s, &w)| Complex::new(s as f64 * w, 0.0))
            .collect();
        buf.resize(N_FFT, Complex::new(0.0, 0.0));
        self.fft.process(&mut buf);
        buf[..N_FFT / 2 + 1].iter().map(|c| c.norm_sqr()).collect()
    }

    pub fn compute(&self, w: &Waveform) -> Result<Spectrogram> {
        if w.sample_rate != SAMPLE_RATE {
            return Err(Error::UnsupportedFormat(format!(
                "sample rate {} Hz, expected {SAMPLE_RATE}",
                w.sample_rate
            )));
        }
        let n_frames = Self::n_frames(w.samples.len());
        if n_frames == 0 {
            return Err(Error::TooShort {
                samples: w.samples.len(),
                window: WINDOW_SAMPLES,
            });
        }
        let mut frames = Array2::zeros((n_frames, N_MELS));
        for (t, mut row) in frames.axis_iter_mut(Axis(0)).enumerate() {
            let start = t * STRIDE_SAMPLES;
            let power = self.power_spectrum(&w.samples[start..start + WINDOW_SAMPLES]);
            for (m, out) in row.iter_mut().enumerate() {
                let energy: f64 = self
                    .filterbank
                    .row(m)
                    .iter()
                    .zip(&power)
                    .map(|(a, b)| a * b)
                    .sum();
                *out = (energy + LOG_FLOOR).ln();
            }
        }
        Spectrogram::from_frames(frames, false)
    }
}

pub fn log_mel(w: &Waveform) -> Result<Spectrogram> {
    MelFrontend::default().compute(w)
}

/// Per-channel mean/variance normalization with population statistics.
/// Channels without variance become all zeros.
pub fn cmvn(s: &Spectrogram) -> Result<Spectrogram> {
    let t = s.n_frames();
    if t < 2 {
        return Err(Error::InsufficientFrames { needed: 2, got: t });
    }
    let mut out = s.frames.clone();
    for mut col in out.axis_iter_mut(Axis(1)) {
        let mean = col.iter().sum::<f64>() / t as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t as f64;
        let std = var.sqrt();
        if std <= 1e-9 * (1.0 + mean.abs()) {
            col.fill(0.0);
        } else {
            col.mapv_inplace(|v| (v - mean) / std);
        }
    }
    let mut spec = s.with_frames(out);
    spec.cmvn = true;
    Ok(spec)
}

/// WAV file to CMVN'd log-mel spectrogram.
pub fn featurize(path: impl AsRef<Path>) -> Result<Spectrogram> {
    cmvn(&log_mel(&read_wav(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn tone(freq: f64, seconds: f64) -> Waveform {
        let n = (seconds * SAMPLE_RATE as f64) as usize;
        let samples = (0..n)
            .map(|i| {
                (0.5 * (2.0 * std::f64::consts::PI * freq * i as f64 / SAMPLE_RATE as f64).sin())
                    as f32
            })
            .collect();
        Waveform::new(samples, SAMPLE_RATE).unwrap()
    }

    #[test]
    fn silence_wav_reads_as_zeros() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("silence.wav");
        write_wav(&path, &Waveform::new(vec![0.0; 16000], SAMPLE_RATE).unwrap()).unwrap();
        let w = read_wav(&path).unwrap();
        assert_eq!(w.sample_rate, 16000);
        assert_eq!(w.samples.len(), 16000);
        assert!(w.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn pcm_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sq.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut wr = hound::WavWriter::create(&path, spec).unwrap();
        for v in [16384i16, 32767, -32768, 32767, -32768] {
            wr.write_sample(v).unwrap();
        }
        wr.finalize().unwrap();
        let w = read_wav(&path).unwrap();
        assert_eq!(w.samples[0], 0.5);
        for pair in w.samples[1..].chunks(2) {
            assert!((pair[0] - 1.0).abs() <= 1.0 / 32768.0);
            assert!((pair[1] + 1.0).abs() <= 1.0 / 32768.0);
        }
    }

    #[test]
    fn stereo_is_unsupported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stereo.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 16000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut wr = hound::WavWriter::create(&path, spec).unwrap();
        for _ in 0..20 {
            wr.write_sample(0i16).unwrap();
        }
        wr.finalize().unwrap();
        assert!(matches!(read_wav(&path), Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn garbage_header_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.wav");
        std::fs::write(&path, b"RIFF\x10\x00\x00\x00WAVEjunkjunkjunk").unwrap();
        let r = read_wav(&path);
        assert!(matches!(r, Err(Error::Format(_))), "{r:?}");
    }

    #[test]
    fn frame_count() {
        let w = Waveform::new(vec![0.0; 16400], SAMPLE_RATE).unwrap();
        assert_eq!(log_mel(&w).unwrap().n_frames(), 101);
        let short = Waveform::new(vec![0.0; 399], SAMPLE_RATE).unwrap();
        assert!(matches!(log_mel(&short), Err(Error::TooShort { .. })));
    }

    #[test]
    fn silence_is_log_floor() {
        let w = Waveform::new(vec![0.0; 8000], SAMPLE_RATE).unwrap();
        let s = log_mel(&w).unwrap();
        assert_eq!(s.n_mels(), 80);
        assert!(s.frames().iter().all(|&v| v == LOG_FLOOR.ln()));
    }

    #[test]
    fn duration_matches_frames_within_one_frame() {
        for n in [8000usize, 12345, 16400, 40000] {
            let w = Waveform::new(vec![0.0; n], SAMPLE_RATE).unwrap();
            let s = log_mel(&w).unwrap();
            assert!((s.duration_s() - w.duration_s()).abs() <= FRAME_STRIDE_S * 3.0);
        }
    }

    /// Independent route: naive DFT of the first frame, filterbank applied by
    /// hand, compared against the FFT path and against the nearest-center rule.
    #[test]
    fn tone_peaks_in_nearest_channel() {
        let w = tone(440.0, 0.2);
        let s = log_mel(&w).unwrap();

        let frame = &w.samples[..WINDOW_SAMPLES];
        let mut power = vec![0.0f64; N_FFT / 2 + 1];
        for (k, p) in power.iter_mut().enumerate() {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, &x) in frame.iter().enumerate() {
                let win = 0.5
                    - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / WINDOW_SAMPLES as f64).cos();
                let ang = -2.0 * std::f64::consts::PI * (k * n) as f64 / N_FFT as f64;
                re += x as f64 * win * ang.cos();
                im += x as f64 * win * ang.sin();
            }
            *p = re * re + im * im;
        }
        let fb = mel_filterbank(N_MELS, N_FFT, SAMPLE_RATE, MEL_FMAX);
        let oracle: Vec<f64> = (0..N_MELS)
            .map(|m| (fb.row(m).iter().zip(&power).map(|(a, b)| a * b).sum::<f64>() + LOG_FLOOR).ln())
            .collect();
        for m in 0..N_MELS {
            assert_abs_diff_eq!(s.frames()[[0, m]], oracle[m], epsilon = 1e-6);
        }

        let centers = mel_center_frequencies();
        let nearest = centers
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - 440.0).abs().total_cmp(&(b.1 - 440.0).abs()))
            .unwrap()
            .0;
        for t in 0..s.n_frames() {
            let row = s.frames().row(t);
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            assert_eq!(argmax, nearest, "frame {t}");
        }
    }

    #[test]
    fn cmvn_three_values() {
        let s = Spectrogram::from_frames(
            Array2::from_shape_vec((3, 1), vec![1.0, 2.0, 3.0]).unwrap(),
            false,
        )
        .unwrap();
        let n = cmvn(&s).unwrap();
        assert_abs_diff_eq!(n.frames()[[0, 0]], -1.224_744_871, epsilon = 1e-6);
        assert_abs_diff_eq!(n.frames()[[1, 0]], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(n.frames()[[2, 0]], 1.224_744_871, epsilon = 1e-6);
    }

    #[test]
    fn cmvn_constant_channel_and_short_input() {
        let s = Spectrogram::from_frames(Array2::from_elem((5, 2), -23.0258), false).unwrap();
        assert!(cmvn(&s).unwrap().frames().iter().all(|&v| v == 0.0));
        let one = Spectrogram::from_frames(Array2::zeros((1, 4)), false).unwrap();
        assert!(matches!(
            cmvn(&one),
            Err(Error::InsufficientFrames { needed: 2, got: 1 })
        ));
    }

    #[test]
    fn cmvn_on_tone_has_zero_mean_and_is_idempotent() {
        let s = log_mel(&tone(1000.0, 0.5)).unwrap();
        let n = cmvn(&s).unwrap();
        for col in n.frames().axis_iter(Axis(1)) {
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            assert!(mean.abs() < 1e-9);
        }
        let twice = cmvn(&n).unwrap();
        for (a, b) in n.frames().iter().zip(twice.frames()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn binary_round_trip() {
        let s = cmvn(&log_mel(&tone(300.0, 0.1)).unwrap()).unwrap();
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        let header_end = buf.iter().position(|&b| b == b'\n').unwrap();
        assert_eq!(
            std::str::from_utf8(&buf[..header_end]).unwrap(),
            format!(r#"{{"T":{},"C":80,"stride_s":0.01,"cmvn":true}}"#, s.n_frames())
        );
        assert_eq!(buf.len(), header_end + 1 + s.n_frames() * 80 * 4);
        let back = Spectrogram::read_from(&buf[..]).unwrap();
        assert_eq!(back.shape(), s.shape());
        for (a, b) in s.frames().iter().zip(back.frames()) {
            assert_eq!(*a as f32 as f64, *b);
        }
    }
}
