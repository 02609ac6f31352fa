//! Feature pipeline: framing, mel filterbank, context stacking, and frame
//! decimation. Applies both to real 16-bit PCM WAV audio and to the
//! synthetic corpus' pre-computed raw feature streams.

use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numcore::Tensor;

/// Energy floor applied before the log so silent frames stay finite.
pub const ENERGY_FLOOR: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum FrontendError {
    #[error("waveform shorter than one analysis window ({samples} samples < {window})")]
    TooShort { samples: usize, window: usize },
    #[error("invalid framing config: win_ms={win_ms}, hop_ms={hop_ms}")]
    BadFraming { win_ms: f64, hop_ms: f64 },
    #[error("provenance violation: expected {expected} input, got {got}")]
    Provenance {
        expected: &'static str,
        got: &'static str,
    },
    #[error("wav error: {0}")]
    Wav(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Mono waveform with samples in [-1, 1].
#[derive(Debug, Clone)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Waveform {
        assert!(sample_rate > 0 && !samples.is_empty());
        Waveform {
            samples,
            sample_rate,
        }
    }

    /// Read a 16-bit PCM mono WAV file.
    pub fn read_wav(path: &Path) -> Result<Waveform, FrontendError> {
        let bytes = std::fs::read(path)?;
        parse_wav(&bytes)
    }
}

/// Where a feature sequence sits in the raw -> stacked -> decimated pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Raw,
    Stacked,
    Decimated,
}

impl Provenance {
    fn name(self) -> &'static str {
        match self {
            Provenance::Raw => "raw",
            Provenance::Stacked => "stacked",
            Provenance::Decimated => "decimated",
        }
    }
}

/// A sequence of feature frames (rows of a rank-2 tensor).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub frames: Tensor,
    pub frame_shift_ms: f64,
    pub provenance: Provenance,
}

impl FeatureSequence {
    pub fn new(frames: Tensor, frame_shift_ms: f64, provenance: Provenance) -> FeatureSequence {
        assert_eq!(frames.dims().len(), 2);
        FeatureSequence {
            frames,
            frame_shift_ms,
            provenance,
        }
    }

    pub fn n_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }
}

/// Split a waveform into fixed-length frames; the trailing partial window is
/// dropped. Frame count = floor((len_ms - win_ms)/hop_ms) + 1.
pub fn frame_signal(
    w: &Waveform,
    win_ms: f64,
    hop_ms: f64,
) -> Result<Vec<Vec<f64>>, FrontendError> {
    if !(hop_ms > 0.0 && win_ms >= hop_ms) {
        return Err(FrontendError::BadFraming { win_ms, hop_ms });
    }
    let sr = w.sample_rate as f64;
    let win = (win_ms * sr / 1000.0).round() as usize;
    let hop = (hop_ms * sr / 1000.0).round() as usize;
    if w.samples.len() < win {
        return Err(FrontendError::TooShort {
            samples: w.samples.len(),
            window: win,
        });
    }
    let n = (w.samples.len() - win) / hop + 1;
    Ok((0..n)
        .map(|i| w.samples[i * hop..i * hop + win].to_vec())
        .collect())
}

/// Log mel filterbank energies of one frame.
///
/// The frame is zero-padded to the next power of two, run through an FFT,
/// and the one-sided power spectrum is pooled by triangular filters spaced
/// evenly on the mel scale between 0 Hz and Nyquist.
pub fn mel_filterbank(frame: &[f64], sample_rate: u32, n_filters: usize) -> Tensor {
    let fft_len = frame.len().next_power_of_two();
    let mut buf: Vec<Complex<f64>> = frame
        .iter()
        .map(|&x| Complex::new(x, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(fft_len)
        .collect();
    FftPlanner::new().plan_fft_forward(fft_len).process(&mut buf);

    let n_bins = fft_len / 2 + 1;
    let power: Vec<f64> = buf[..n_bins].iter().map(|c| c.norm_sqr()).collect();

    let sr = sample_rate as f64;
    let mel_lo = hz_to_mel(0.0);
    let mel_hi = hz_to_mel(sr / 2.0);
    // n_filters triangles need n_filters + 2 edge points.
    let edges_hz: Vec<f64> = (0..n_filters + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_filters + 1) as f64))
        .collect();
    let bin_hz = |k: usize| k as f64 * sr / fft_len as f64;

    let mut out = vec![0.0f64; n_filters];
    for (f, energy) in out.iter_mut().enumerate() {
        let (left, center, right) = (edges_hz[f], edges_hz[f + 1], edges_hz[f + 2]);
        let mut acc = 0.0;
        for (k, &p) in power.iter().enumerate() {
            let hz = bin_hz(k);
            let w = if hz >= left && hz <= center {
                if center > left {
                    (hz - left) / (center - left)
                } else {
                    0.0
                }
            } else if hz > center && hz <= right {
                if right > center {
                    (right - hz) / (right - center)
                } else {
                    0.0
                }
            } else {
                0.0
            };
            acc += w * p;
        }
        *energy = acc.max(ENERGY_FLOOR).ln();
    }
    Tensor::from_vec(&[n_filters], out).expect("n_filters > 0")
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10.0f64.powf(mel / 2595.0) - 1.0)
}

/// Extract the full frame-level mel feature sequence from a waveform.
pub fn waveform_features(
    w: &Waveform,
    win_ms: f64,
    hop_ms: f64,
    n_filters: usize,
) -> Result<FeatureSequence, FrontendError> {
    let frames = frame_signal(w, win_ms, hop_ms)?;
    let mut data = Vec::with_capacity(frames.len() * n_filters);
    for frame in &frames {
        data.extend_from_slice(mel_filterbank(frame, w.sample_rate, n_filters).data());
    }
    let t = Tensor::from_vec(&[frames.len(), n_filters], data).expect("frame count checked");
    Ok(FeatureSequence::new(t, hop_ms, Provenance::Raw))
}

/// Concatenate `left` and `right` neighbouring frames onto every frame.
/// Edges repeat the boundary frame; frame count is unchanged.
pub fn stack_context(
    f: &FeatureSequence,
    left: usize,
    right: usize,
) -> Result<FeatureSequence, FrontendError> {
    if f.provenance != Provenance::Raw {
        return Err(FrontendError::Provenance {
            expected: "raw",
            got: f.provenance.name(),
        });
    }
    let n = f.n_frames();
    let d = f.dim();
    let width = left + right + 1;
    let mut data = Vec::with_capacity(n * d * width);
    for t in 0..n as isize {
        for offset in -(left as isize)..=(right as isize) {
            let src = (t + offset).clamp(0, n as isize - 1) as usize;
            data.extend_from_slice(f.frames.row(src));
        }
    }
    let frames = Tensor::from_vec(&[n, d * width], data).expect("sized above");
    Ok(FeatureSequence::new(
        frames,
        f.frame_shift_ms,
        Provenance::Stacked,
    ))
}

/// Keep frames 0, keep_every, 2*keep_every, ...; N' = ceil(N / keep_every).
pub fn decimate(f: &FeatureSequence, keep_every: usize) -> Result<FeatureSequence, FrontendError> {
    assert!(keep_every >= 1);
    if f.provenance != Provenance::Stacked {
        return Err(FrontendError::Provenance {
            expected: "stacked",
            got: f.provenance.name(),
        });
    }
    let n = f.n_frames();
    let d = f.dim();
    let kept: Vec<usize> = (0..n).step_by(keep_every).collect();
    let mut data = Vec::with_capacity(kept.len() * d);
    for &t in &kept {
        data.extend_from_slice(f.frames.row(t));
    }
    let frames = Tensor::from_vec(&[kept.len(), d], data).expect("kept non-empty");
    Ok(FeatureSequence::new(
        frames,
        f.frame_shift_ms * keep_every as f64,
        Provenance::Decimated,
    ))
}

/// Per-utterance mean/variance normalization of raw features. Off by
/// default everywhere; exposed as a config flag only.
pub fn mean_var_normalize(f: &FeatureSequence) -> FeatureSequence {
    let n = f.n_frames() as f64;
    let d = f.dim();
    let mut mean = vec![0.0; d];
    for t in 0..f.n_frames() {
        for (m, &v) in mean.iter_mut().zip(f.frames.row(t)) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut var = vec![0.0; d];
    for t in 0..f.n_frames() {
        for ((s, &v), &m) in var.iter_mut().zip(f.frames.row(t)).zip(mean.iter()) {
            *s += (v - m) * (v - m);
        }
    }
    let std: Vec<f64> = var.iter().map(|s| (s / n).sqrt().max(1e-8)).collect();
    let mut out = f.frames.clone();
    for t in 0..f.n_frames() {
        for ((v, &m), &s) in out.row_mut(t).iter_mut().zip(mean.iter()).zip(std.iter()) {
            *v = (*v - m) / s;
        }
    }
    FeatureSequence::new(out, f.frame_shift_ms, f.provenance)
}

/// The stack/decimate settings applied between raw features and the model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrontendConfig {
    pub stack_left: usize,
    pub stack_right: usize,
    pub keep_every: usize,
    pub normalize: bool,
}

impl Default for FrontendConfig {
    fn default() -> FrontendConfig {
        FrontendConfig {
            stack_left: 4,
            stack_right: 4,
            keep_every: 3,
            normalize: false,
        }
    }
}

impl FrontendConfig {
    /// raw -> (normalize?) -> stacked -> decimated.
    pub fn apply(&self, raw: &FeatureSequence) -> Result<FeatureSequence, FrontendError> {
        let raw = if self.normalize {
            mean_var_normalize(raw)
        } else {
            raw.clone()
        };
        let stacked = stack_context(&raw, self.stack_left, self.stack_right)?;
        decimate(&stacked, self.keep_every)
    }

    /// Model input width for a given raw feature dimension.
    pub fn stacked_dim(&self, raw_dim: usize) -> usize {
        raw_dim * (self.stack_left + self.stack_right + 1)
    }
}

fn parse_wav(bytes: &[u8]) -> Result<Waveform, FrontendError> {
    let err = |m: &str| FrontendError::Wav(m.to_string());
    if bytes.len() < 44 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(err("not a RIFF/WAVE file"));
    }
    let mut pos = 12;
    let mut format: Option<(u16, u16, u32, u16)> = None; // (audio_format, channels, rate, bits)
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_end = pos + 8 + size;
        if body_end > bytes.len() {
            return Err(err("truncated chunk"));
        }
        let body = &bytes[pos + 8..body_end];
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(err("fmt chunk too small"));
                }
                format = Some((
                    u16::from_le_bytes(body[0..2].try_into().unwrap()),
                    u16::from_le_bytes(body[2..4].try_into().unwrap()),
                    u32::from_le_bytes(body[4..8].try_into().unwrap()),
                    u16::from_le_bytes(body[14..16].try_into().unwrap()),
                ));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        pos = body_end + (size & 1); // chunks are word-aligned
    }
    let (audio_format, channels, rate, bits) = format.ok_or_else(|| err("missing fmt chunk"))?;
    if audio_format != 1 || bits != 16 {
        return Err(err("only 16-bit PCM is supported"));
    }
    if channels != 1 {
        return Err(err("only mono is supported"));
    }
    let body = data.ok_or_else(|| err("missing data chunk"))?;
    let samples: Vec<f64> = body
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
        .collect();
    if samples.is_empty() {
        return Err(err("empty data chunk"));
    }
    Ok(Waveform::new(samples, rate))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::SeededRng;

    fn tone(freq: f64, ms: f64, sr: u32) -> Waveform {
        let n = (ms / 1000.0 * sr as f64) as usize;
        let samples = (0..n)
            .map(|i| 0.5 * (2.0 * std::f64::consts::PI * freq * i as f64 / sr as f64).sin())
            .collect();
        Waveform::new(samples, sr)
    }

    #[test]
    fn frame_count_formula() {
        let w = tone(440.0, 1000.0, 16000);
        let frames = frame_signal(&w, 25.0, 10.0).unwrap();
        assert_eq!(frames.len(), 98); // floor((1000 - 25)/10) + 1
        assert_eq!(frames[0].len(), 400);
    }

    #[test]
    fn frame_boundary_single() {
        let w = tone(440.0, 25.0, 16000);
        assert_eq!(frame_signal(&w, 25.0, 10.0).unwrap().len(), 1);
    }

    #[test]
    fn frame_too_short_errors() {
        let w = tone(440.0, 24.0, 16000);
        assert!(matches!(
            frame_signal(&w, 25.0, 10.0),
            Err(FrontendError::TooShort { .. })
        ));
    }

    #[test]
    fn mel_sinusoid_concentrates_energy() {
        let sr = 16000u32;
        let freq = 2000.0;
        let w = tone(freq, 64.0, sr);
        let frames = frame_signal(&w, 32.0, 32.0).unwrap();
        let fb = mel_filterbank(&frames[0], sr, 26);
        let got = fb
            .data()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        // Expected filter: the triangle whose center is nearest the tone on
        // the mel scale. Centers sit at mel edges 1..=26 of the 28-point grid.
        let mel_hi = hz_to_mel(sr as f64 / 2.0);
        let target = hz_to_mel(freq);
        let expected = (1..=26)
            .min_by(|&a, &b| {
                let ca = (mel_hi * a as f64 / 27.0 - target).abs();
                let cb = (mel_hi * b as f64 / 27.0 - target).abs();
                ca.total_cmp(&cb)
            })
            .unwrap()
            - 1;
        assert!(
            (got as isize - expected as isize).abs() <= 1,
            "energy argmax {got}, expected near {expected}"
        );
    }

    #[test]
    fn mel_silence_is_floored() {
        let fb = mel_filterbank(&vec![0.0; 400], 16000, 26);
        for &v in fb.data() {
            assert_eq!(v, ENERGY_FLOOR.ln());
        }
    }

    #[test]
    fn mel_doubling_amplitude_adds_log4() {
        // A noisy frame puts energy above the floor in every filter.
        let mut rng = SeededRng::new(5);
        let frame: Vec<f64> = (0..400).map(|_| rng.uniform(-0.5, 0.5)).collect();
        let doubled: Vec<f64> = frame.iter().map(|v| 2.0 * v).collect();
        let a = mel_filterbank(&frame, 16000, 26);
        let b = mel_filterbank(&doubled, 16000, 26);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((y - x - 4.0f64.ln()).abs() < 1e-9, "{x} -> {y}");
        }
    }

    fn raw_seq(n: usize, d: usize, seed: u64) -> FeatureSequence {
        let mut rng = SeededRng::new(seed);
        FeatureSequence::new(
            Tensor::from_vec(&[n, d], rng.normal_vec(n * d)).unwrap(),
            10.0,
            Provenance::Raw,
        )
    }

    #[test]
    fn stack_dims_match_paper_defaults() {
        let f = raw_seq(7, 26, 1);
        let s = stack_context(&f, 4, 4).unwrap();
        assert_eq!(s.dim(), 234);
        assert_eq!(s.n_frames(), 7);
    }

    #[test]
    fn stack_zero_context_is_identity() {
        let f = raw_seq(5, 3, 2);
        let s = stack_context(&f, 0, 0).unwrap();
        assert_eq!(s.frames, f.frames);
        assert_eq!(s.provenance, Provenance::Stacked);
    }

    #[test]
    fn stack_single_frame_repeats() {
        let f = raw_seq(1, 2, 3);
        let s = stack_context(&f, 4, 4).unwrap();
        assert_eq!(s.dim(), 18);
        for slot in 0..9 {
            assert_eq!(&s.frames.row(0)[slot * 2..slot * 2 + 2], f.frames.row(0));
        }
    }

    #[test]
    fn stack_rows_are_clamped_neighbours() {
        let f = raw_seq(6, 2, 4);
        let (l, r) = (4usize, 4usize);
        let s = stack_context(&f, l, r).unwrap();
        for t in 0..6i64 {
            for (slot, off) in (-(l as i64)..=(r as i64)).enumerate() {
                let src = (t + off).clamp(0, 5) as usize;
                assert_eq!(
                    &s.frames.row(t as usize)[slot * 2..slot * 2 + 2],
                    f.frames.row(src)
                );
            }
        }
    }

    #[test]
    fn decimate_keeps_every_third() {
        let f = stack_context(&raw_seq(9, 2, 5), 0, 0).unwrap();
        let d = decimate(&f, 3).unwrap();
        assert_eq!(d.n_frames(), 3);
        for (i, &src) in [0usize, 3, 6].iter().enumerate() {
            assert_eq!(d.frames.row(i), f.frames.row(src));
        }
        assert_eq!(d.frame_shift_ms, 30.0);
    }

    #[test]
    fn decimate_ceil_and_identity() {
        let f = stack_context(&raw_seq(10, 2, 6), 0, 0).unwrap();
        assert_eq!(decimate(&f, 3).unwrap().n_frames(), 4);
        let id = decimate(&f, 1).unwrap();
        assert_eq!(id.frames, f.frames);
    }

    #[test]
    fn decimate_length_property() {
        for n in 1..=1000usize {
            let f = FeatureSequence::new(
                Tensor::from_vec(&[n, 1], vec![0.0; n]).unwrap(),
                10.0,
                Provenance::Stacked,
            );
            for k in 1..=5usize {
                assert_eq!(decimate(&f, k).unwrap().n_frames(), n.div_ceil(k));
            }
        }
    }

    #[test]
    fn provenance_transitions_enforced() {
        let f = raw_seq(4, 2, 7);
        assert!(matches!(
            decimate(&f, 3),
            Err(FrontendError::Provenance { .. })
        ));
        let stacked = stack_context(&f, 1, 1).unwrap();
        assert!(matches!(
            stack_context(&stacked, 1, 1),
            Err(FrontendError::Provenance { .. })
        ));
    }

    #[test]
    fn pipeline_is_deterministic() {
        let w = tone(300.0, 200.0, 16000);
        let cfg = FrontendConfig::default();
        let a = cfg.apply(&waveform_features(&w, 25.0, 10.0, 26).unwrap()).unwrap();
        let b = cfg.apply(&waveform_features(&w, 25.0, 10.0, 26).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn wav_roundtrip() {
        // Hand-assembled 16-bit PCM mono WAV.
        let samples: Vec<i16> = vec![0, 1000, -1000, 32767, -32768];
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"RIFF");
        bytes.extend_from_slice(&(36 + samples.len() as u32 * 2).to_le_bytes());
        bytes.extend_from_slice(b"WAVE");
        bytes.extend_from_slice(b"fmt ");
        bytes.extend_from_slice(&16u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes()); // PCM
        bytes.extend_from_slice(&1u16.to_le_bytes()); // mono
        bytes.extend_from_slice(&16000u32.to_le_bytes());
        bytes.extend_from_slice(&32000u32.to_le_bytes()); // byte rate
        bytes.extend_from_slice(&2u16.to_le_bytes()); // block align
        bytes.extend_from_slice(&16u16.to_le_bytes()); // bits
        bytes.extend_from_slice(b"data");
        bytes.extend_from_slice(&(samples.len() as u32 * 2).to_le_bytes());
        for s in &samples {
            bytes.extend_from_slice(&s.to_le_bytes());
        }
        let w = parse_wav(&bytes).unwrap();
        assert_eq!(w.sample_rate, 16000);
        assert_eq!(w.samples.len(), 5);
        assert!((w.samples[1] - 1000.0 / 32768.0).abs() < 1e-12);
        // Stereo is refused.
        bytes[22] = 2;
        assert!(parse_wav(&bytes).is_err());
    }
}
