//! MFCC front end.
//!
//! Pipeline: pre-emphasis → framing → Hamming window → 512-point power
//! spectrum → triangular mel filterbank → log (floored) → orthonormal
//! DCT-II → first `num_coeffs` coefficients. Per-coefficient mean/variance
//! normalisation uses statistics frozen from the clean training split.

use std::io::{Read, Write};
use std::sync::Arc;

use rustfft::{num_complex::Complex, Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::signal::Waveform;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("input too short: {samples} samples, need at least {needed}")]
    TooShort { samples: usize, needed: usize },
    #[error("unsupported sample rate {0} Hz")]
    SampleRate(u32),
    #[error("feature dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("feature cache: {0}")]
    Cache(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FeatureError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub frame_len_ms: f64,
    pub frame_hop_ms: f64,
    pub pre_emphasis: f64,
    pub fft_size: usize,
    pub num_mels: usize,
    pub num_coeffs: usize,
    pub low_hz: f64,
    pub high_hz: f64,
    pub log_floor: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            frame_len_ms: 25.0,
            frame_hop_ms: 10.0,
            pre_emphasis: 0.97,
            fft_size: 512,
            num_mels: 40,
            num_coeffs: 13,
            low_hz: 0.0,
            high_hz: 8000.0,
            log_floor: 1e-10,
        }
    }
}

impl FeatureConfig {
    pub fn frame_len(&self) -> usize {
        (self.frame_len_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop(&self) -> usize {
        (self.frame_hop_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    /// Frames produced for `num_samples` input samples (0 if too short).
    pub fn num_frames(&self, num_samples: usize) -> usize {
        let fl = self.frame_len();
        if num_samples < fl {
            0
        } else {
            1 + (num_samples - fl) / self.hop()
        }
    }
}

/// Frames × coefficients, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    values: Vec<f64>,
    num_frames: usize,
    num_coeffs: usize,
    pub frame_len_ms: f64,
    pub frame_hop_ms: f64,
}

impl FeatureMatrix {
    pub fn new(values: Vec<f64>, num_frames: usize, num_coeffs: usize) -> Result<Self> {
        if values.len() != num_frames * num_coeffs {
            return Err(FeatureError::Dimension(values.len(), num_frames * num_coeffs));
        }
        Ok(Self {
            values,
            num_frames,
            num_coeffs,
            frame_len_ms: 25.0,
            frame_hop_ms: 10.0,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn num_coeffs(&self) -> usize {
        self.num_coeffs
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.values[t * self.num_coeffs..(t + 1) * self.num_coeffs]
    }
}

/// Triangular mel filterbank with fractional (Hz-domain) edges.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    /// `num_mels × (fft_size/2 + 1)` weights.
    weights: Vec<Vec<f64>>,
    centers_hz: Vec<f64>,
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

impl MelFilterbank {
    pub fn new(cfg: &FeatureConfig) -> Self {
        let bins = cfg.fft_size / 2 + 1;
        let (lo, hi) = (hz_to_mel(cfg.low_hz), hz_to_mel(cfg.high_hz));
        let edges: Vec<f64> = (0..cfg.num_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.num_mels + 1) as f64))
            .collect();
        let bin_hz = cfg.sample_rate as f64 / cfg.fft_size as f64;
        let weights = (0..cfg.num_mels)
            .map(|m| {
                let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
                (0..bins)
                    .map(|k| {
                        let f = k as f64 * bin_hz;
                        let up = (f - l) / (c - l);
                        let down = (r - f) / (r - c);
                        up.min(down).max(0.0)
                    })
                    .collect()
            })
            .collect();
        Self {
            weights,
            centers_hz: edges[1..=cfg.num_mels].to_vec(),
        }
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    pub fn apply(&self, power: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .map(|w| w.iter().zip(power).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Orthonormal DCT-II of `x`, first `k` outputs.
pub fn dct2_ortho(x: &[f64], k: usize) -> Vec<f64> {
    let n = x.len() as f64;
    (0..k)
        .map(|q| {
            let s: f64 = x
                .iter()
                .enumerate()
                .map(|(i, v)| v * (std::f64::consts::PI * q as f64 * (2.0 * i as f64 + 1.0) / (2.0 * n)).cos())
                .sum();
            let norm = if q == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            s * norm
        })
        .collect()
}

/// Inverse of [`dct2_ortho`] (orthonormal DCT-III) from the full coefficient set.
pub fn idct2_ortho(c: &[f64]) -> Vec<f64> {
    let n = c.len() as f64;
    (0..c.len())
        .map(|i| {
            c.iter()
                .enumerate()
                .map(|(q, v)| {
                    let norm = if q == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
                    norm * v * (std::f64::consts::PI * q as f64 * (2.0 * i as f64 + 1.0) / (2.0 * n)).cos()
                })
                .sum()
        })
        .collect()
}

/// Reusable MFCC extractor (filterbank, window and FFT plan built once).
#[derive(Clone)]
pub struct Mfcc {
    cfg: FeatureConfig,
    fbank: MelFilterbank,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Mfcc {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Mfcc").field("cfg", &self.cfg).finish()
    }
}

impl Mfcc {
    pub fn new(cfg: FeatureConfig) -> Self {
        let fl = cfg.frame_len();
        let window = (0..fl)
            .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (fl as f64 - 1.0)).cos())
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
        Self {
            fbank: MelFilterbank::new(&cfg),
            cfg,
            window,
            fft,
        }
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.fbank
    }

    fn check(&self, w: &Waveform) -> Result<usize> {
        if w.sample_rate() != self.cfg.sample_rate {
            return Err(FeatureError::SampleRate(w.sample_rate()));
        }
        let frames = self.cfg.num_frames(w.len());
        if frames == 0 {
            return Err(FeatureError::TooShort {
                samples: w.len(),
                needed: self.cfg.frame_len(),
            });
        }
        Ok(frames)
    }

    /// Mel filterbank energies per frame (before the log).
    pub fn mel_energies(&self, w: &Waveform) -> Result<Vec<Vec<f64>>> {
        let frames = self.check(w)?;
        let x = w.samples();
        let mut emph = Vec::with_capacity(x.len());
        emph.push(x[0]);
        for i in 1..x.len() {
            emph.push(x[i] - self.cfg.pre_emphasis * x[i - 1]);
        }
        let (fl, hop, nfft) = (self.cfg.frame_len(), self.cfg.hop(), self.cfg.fft_size);
        let mut buf = vec![Complex::new(0.0, 0.0); nfft];
        let mut out = Vec::with_capacity(frames);
        for t in 0..frames {
            let start = t * hop;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = if i < fl.min(nfft) {
                    Complex::new(emph[start + i] * self.window[i], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process(&mut buf);
            let power: Vec<f64> = buf[..nfft / 2 + 1].iter().map(|c| c.norm_sqr()).collect();
            out.push(self.fbank.apply(&power));
        }
        Ok(out)
    }

    /// Log-mel energies with the configured floor.
    pub fn log_mel(&self, w: &Waveform) -> Result<Vec<Vec<f64>>> {
        let floor = self.cfg.log_floor;
        Ok(self
            .mel_energies(w)?
            .into_iter()
            .map(|row| row.into_iter().map(|e| e.max(floor).ln()).collect())
            .collect())
    }

    /// Unnormalised MFCCs.
    pub fn compute(&self, w: &Waveform) -> Result<FeatureMatrix> {
        let logmel = self.log_mel(w)?;
        let k = self.cfg.num_coeffs;
        let frames = logmel.len();
        let values = logmel.iter().flat_map(|row| dct2_ortho(row, k)).collect();
        let mut fm = FeatureMatrix::new(values, frames, k)?;
        fm.frame_len_ms = self.cfg.frame_len_ms;
        fm.frame_hop_ms = self.cfg.frame_hop_ms;
        Ok(fm)
    }
}

/// One-shot MFCC extraction.
pub fn mfcc(w: &Waveform, cfg: &FeatureConfig) -> Result<FeatureMatrix> {
    Mfcc::new(cfg.clone()).compute(w)
}

/// Frozen per-coefficient normalisation statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    /// Pooled statistics over every frame of `mats`.
    pub fn from_matrices<'a>(mats: impl IntoIterator<Item = &'a FeatureMatrix>) -> Self {
        let mut n = 0usize;
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        for m in mats {
            if sum.is_empty() {
                sum = vec![0.0; m.num_coeffs];
                sq = vec![0.0; m.num_coeffs];
            }
            for t in 0..m.num_frames {
                for (j, v) in m.frame(t).iter().enumerate() {
                    sum[j] += v;
                    sq[j] += v * v;
                }
            }
            n += m.num_frames;
        }
        let nf = n.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / nf - m * m).max(0.0).sqrt().max(1e-8))
            .collect();
        Self { mean, std }
    }

    pub fn identity(num_coeffs: usize) -> Self {
        Self {
            mean: vec![0.0; num_coeffs],
            std: vec![1.0; num_coeffs],
        }
    }

    pub fn apply(&self, m: &FeatureMatrix) -> Result<FeatureMatrix> {
        if m.num_coeffs != self.mean.len() {
            return Err(FeatureError::Dimension(m.num_coeffs, self.mean.len()));
        }
        let k = m.num_coeffs;
        let values = m
            .values
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i % k]) / self.std[i % k])
            .collect();
        Ok(FeatureMatrix {
            values,
            ..m.clone()
        })
    }
}

/// MFCC extractor bundled with frozen normalisation statistics.
#[derive(Debug, Clone)]
pub struct FeaturePipeline {
    pub mfcc: Mfcc,
    pub stats: FeatureStats,
}

impl FeaturePipeline {
    pub fn new(cfg: FeatureConfig, stats: FeatureStats) -> Self {
        Self {
            mfcc: Mfcc::new(cfg),
            stats,
        }
    }

    pub fn extract(&self, w: &Waveform) -> Result<FeatureMatrix> {
        self.stats.apply(&self.mfcc.compute(w)?)
    }
}

const CACHE_MAGIC: &[u8; 8] = b"IRLFEAT1";

/// Writes feature blocks: magic, block count, then per block a
/// `(num_frames, num_coeffs)` u32 header and row-major little-endian f32 values.
pub fn write_feature_cache<W: Write>(mut w: W, mats: &[FeatureMatrix]) -> Result<()> {
    w.write_all(CACHE_MAGIC)?;
    w.write_all(&(mats.len() as u32).to_le_bytes())?;
    for m in mats {
        w.write_all(&(m.num_frames as u32).to_le_bytes())?;
        w.write_all(&(m.num_coeffs as u32).to_le_bytes())?;
        for v in &m.values {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_feature_cache<R: Read>(mut r: R) -> Result<Vec<FeatureMatrix>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CACHE_MAGIC {
        return Err(FeatureError::Cache("bad magic".into()));
    }
    let mut u = [0u8; 4];
    r.read_exact(&mut u)?;
    let count = u32::from_le_bytes(u) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut u)?;
        let frames = u32::from_le_bytes(u) as usize;
        r.read_exact(&mut u)?;
        let coeffs = u32::from_le_bytes(u) as usize;
        let mut values = Vec::with_capacity(frames * coeffs);
        for _ in 0..frames * coeffs {
            r.read_exact(&mut u)?;
            values.push(f32::from_le_bytes(u) as f64);
        }
        out.push(FeatureMatrix::new(values, frames, coeffs)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand::Rng;

    fn wave(samples: Vec<f64>) -> Waveform {
        Waveform::new(samples, 16_000).unwrap()
    }

    fn noise(len: usize, s: u64) -> Waveform {
        let mut r = seed::rng(s, &[]);
        wave((0..len).map(|_| r.gen_range(-0.5..0.5)).collect())
    }

    #[test]
    fn one_second_gives_98_frames() {
        let m = mfcc(&noise(16_000, 1), &FeatureConfig::default()).unwrap();
        assert_eq!(m.num_frames(), 98);
        assert_eq!(m.num_coeffs(), 13);
        assert!(m.values().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn too_short_input() {
        let r = mfcc(&noise(399, 2), &FeatureConfig::default());
        assert!(matches!(r, Err(FeatureError::TooShort { .. })));
        assert_eq!(mfcc(&noise(400, 2), &FeatureConfig::default()).unwrap().num_frames(), 1);
    }

    #[test]
    fn silence_gives_identical_frames() {
        let m = mfcc(&wave(vec![0.0; 4000]), &FeatureConfig::default()).unwrap();
        for t in 1..m.num_frames() {
            assert_eq!(m.frame(t), m.frame(0));
        }
        assert!(m.values().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn tone_at_filter_centre_peaks_in_that_filter() {
        let cfg = FeatureConfig::default();
        let ex = Mfcc::new(cfg);
        let centres = ex.filterbank().centers_hz().to_vec();
        // Filters narrower than the Hamming main lobe (lowest few) cannot
        // resolve a single tone; from 8 upward each filter spans > 2 bins.
        for (j, &f) in centres.iter().enumerate().skip(8) {
            let w = wave((0..4000).map(|i| (2.0 * std::f64::consts::PI * f * i as f64 / 16_000.0).sin()).collect());
            let e = ex.mel_energies(&w).unwrap();
            let row = &e[e.len() / 2];
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmax, j, "tone at {f} Hz");
        }
    }

    #[test]
    fn one_hop_shift_shifts_frames() {
        let cfg = FeatureConfig::default();
        let w = noise(8000, 3);
        let hop = cfg.hop();
        // Prepend one hop; pre-emphasis couples sample 0 to its predecessor,
        // so the first shifted frame differs and interior frames must match.
        let mut shifted = noise(hop, 4).into_samples();
        shifted.extend_from_slice(w.samples());
        let a = mfcc(&w, &cfg).unwrap();
        let b = mfcc(&wave(shifted), &cfg).unwrap();
        for t in 1..a.num_frames() {
            for (x, y) in a.frame(t).iter().zip(b.frame(t + 1)) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn dct_is_invertible() {
        let mut r = seed::rng(5, &[]);
        let x: Vec<f64> = (0..40).map(|_| r.gen_range(-20.0..5.0)).collect();
        let back = idct2_ortho(&dct2_ortho(&x, 40));
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn mfcc_is_deterministic() {
        let w = noise(5000, 6);
        let cfg = FeatureConfig::default();
        assert_eq!(mfcc(&w, &cfg).unwrap(), mfcc(&w, &cfg).unwrap());
    }

    #[test]
    fn stats_normalise_to_zero_mean_unit_variance() {
        let cfg = FeatureConfig::default();
        let mats: Vec<FeatureMatrix> = (0..3).map(|s| mfcc(&noise(6000, s), &cfg).unwrap()).collect();
        let stats = FeatureStats::from_matrices(&mats);
        let normed: Vec<FeatureMatrix> = mats.iter().map(|m| stats.apply(m).unwrap()).collect();
        let again = FeatureStats::from_matrices(&normed);
        for (m, s) in again.mean.iter().zip(&again.std) {
            assert!(m.abs() < 1e-9);
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cache_round_trip_is_f32_exact() {
        let m = mfcc(&noise(3000, 7), &FeatureConfig::default()).unwrap();
        let mut buf = Vec::new();
        write_feature_cache(&mut buf, std::slice::from_ref(&m)).unwrap();
        assert_eq!(buf.len(), 8 + 4 + 8 + 4 * m.values().len());
        let back = read_feature_cache(&buf[..]).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].num_frames(), m.num_frames());
        for (a, b) in back[0].values().iter().zip(m.values()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        assert!(read_feature_cache(&b"NOTMAGIC...."[..]).is_err());
    }
}
