//! Waveform arithmetic: SNR measurement and mixing, noise-spec sampling,
//! room-impulse convolution, gain and band-limited resampling, WAV I/O.
//!
//! Every function is pure; randomness only enters through an explicitly
//! passed generator.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SAMPLE_RATE: u32 = 16_000;

/// Mean and standard deviation of the training SNR distribution (dB).
pub const SNR_MEAN_DB: f64 = 12.0;
pub const SNR_STD_DB: f64 = 8.0;
/// Upper bound of the uniform temporal shift into a noise track.
pub const MAX_SHIFT_MS: f64 = 1000.0;

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("degenerate signal: {0}")]
    DegenerateSignal(&'static str),
    #[error("sample rate mismatch: {0} Hz vs {1} Hz")]
    RateMismatch(u32, u32),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid waveform: {0}")]
    Invalid(String),
    #[error("wav i/o: {0}")]
    Wav(#[from] hound::Error),
}

pub type Result<T> = std::result::Result<T, SignalError>;

/// Mono floating-point audio, nominally in [-1, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(SignalError::Invalid("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(SignalError::Invalid("non-finite sample".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Mean squared amplitude.
    pub fn power(&self) -> f64 {
        power(&self.samples)
    }

    pub fn rms(&self) -> f64 {
        self.power().sqrt()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0f64, |m, s| m.max(s.abs()))
    }

    /// Samples quantised to 16-bit PCM, as they would be written to disk.
    pub fn to_pcm16(&self) -> Vec<i16> {
        self.samples
            .iter()
            .map(|s| (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16)
            .collect()
    }

    pub fn from_pcm16(pcm: &[i16], sample_rate: u32) -> Result<Self> {
        Self::new(pcm.iter().map(|&v| v as f64 / 32768.0).collect(), sample_rate)
    }

    /// Round-trips through 16-bit quantisation.
    pub fn quantized(&self) -> Self {
        Self::from_pcm16(&self.to_pcm16(), self.sample_rate).expect("quantised samples are finite")
    }
}

fn power(s: &[f64]) -> f64 {
    if s.is_empty() {
        return 0.0;
    }
    s.iter().map(|v| v * v).sum::<f64>() / s.len() as f64
}

/// Parameters of one draw of the noising function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub snr_db: f64,
    pub shift_ms: f64,
    pub noise_id: usize,
}

/// Signal-to-noise ratio in dB from mean powers.
pub fn measure_snr_db(signal: &Waveform, noise: &Waveform) -> Result<f64> {
    if signal.sample_rate != noise.sample_rate {
        return Err(SignalError::RateMismatch(signal.sample_rate, noise.sample_rate));
    }
    if signal.len() != noise.len() {
        return Err(SignalError::LengthMismatch(signal.len(), noise.len()));
    }
    let (ps, pn) = (signal.power(), noise.power());
    if ps <= 0.0 {
        return Err(SignalError::DegenerateSignal("signal has zero power"));
    }
    if pn <= 0.0 {
        return Err(SignalError::DegenerateSignal("noise has zero power"));
    }
    Ok(10.0 * (ps / pn).log10())
}

/// The noise track aligned to `len` samples: read from `offset` onwards,
/// wrapping around cyclically.
pub fn align_noise(noise: &[f64], offset: usize, len: usize) -> Vec<f64> {
    let n = noise.len();
    (0..len).map(|i| noise[(offset + i) % n]).collect()
}

/// The scaled noise component that `mix_at_snr` adds to `clean`.
pub fn scaled_noise(clean: &Waveform, noise: &Waveform, spec: &NoiseSpec) -> Result<Waveform> {
    if clean.sample_rate != noise.sample_rate {
        return Err(SignalError::RateMismatch(clean.sample_rate, noise.sample_rate));
    }
    if noise.is_empty() {
        return Err(SignalError::DegenerateSignal("empty noise track"));
    }
    let p_clean = clean.power();
    if p_clean <= 0.0 {
        return Err(SignalError::DegenerateSignal("clean signal has zero power"));
    }
    let offset = ((spec.shift_ms / 1000.0) * clean.sample_rate as f64).round() as usize % noise.len();
    let aligned = align_noise(&noise.samples, offset, clean.len());
    let p_noise = power(&aligned);
    if p_noise <= 0.0 {
        return Err(SignalError::DegenerateSignal("noise segment has zero power"));
    }
    let a = (p_clean / (p_noise * 10f64.powf(spec.snr_db / 10.0))).sqrt();
    Waveform::new(aligned.into_iter().map(|v| a * v).collect(), clean.sample_rate)
}

/// Adds `noise` to `clean` at the requested SNR. The noise track is offset by
/// `shift_ms` (circularly) and cyclically tiled or cropped to the clean length.
pub fn mix_at_snr(clean: &Waveform, noise: &Waveform, spec: &NoiseSpec) -> Result<Waveform> {
    let n = scaled_noise(clean, noise, spec)?;
    let samples = clean.samples.iter().zip(&n.samples).map(|(c, v)| c + v).collect();
    Waveform::new(samples, clean.sample_rate)
}

/// Draws SNR ~ N(12, 8²) dB, shift ~ U[0, 1000] ms and a uniform bank index.
pub fn sample_noise_spec<R: Rng + ?Sized>(rng: &mut R, bank_size: usize) -> NoiseSpec {
    assert!(bank_size >= 1, "noise bank must not be empty");
    let normal = Normal::new(SNR_MEAN_DB, SNR_STD_DB).expect("valid normal");
    let snr_db = normal.sample(rng);
    let shift_ms = rng.gen_range(0.0..=MAX_SHIFT_MS);
    let noise_id = rng.gen_range(0..bank_size);
    NoiseSpec {
        snr_db,
        shift_ms,
        noise_id,
    }
}

/// Linear convolution of `a` and `b` via FFT, full length `a.len() + b.len() - 1`.
pub fn fft_convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let full = a.len() + b.len() - 1;
    let n = full.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut fa: Vec<Complex<f64>> = (0..n).map(|i| Complex::new(a.get(i).copied().unwrap_or(0.0), 0.0)).collect();
    let mut fb: Vec<Complex<f64>> = (0..n).map(|i| Complex::new(b.get(i).copied().unwrap_or(0.0), 0.0)).collect();
    fwd.process(&mut fa);
    fwd.process(&mut fb);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x *= y;
    }
    inv.process(&mut fa);
    let scale = 1.0 / n as f64;
    fa.iter().take(full).map(|c| c.re * scale).collect()
}

/// Reverberates `dry` with `rir`: full linear convolution truncated to the
/// dry length, then rescaled so its peak matches the dry peak.
pub fn convolve_rir(dry: &Waveform, rir: &Waveform) -> Result<Waveform> {
    if dry.sample_rate != rir.sample_rate {
        return Err(SignalError::RateMismatch(dry.sample_rate, rir.sample_rate));
    }
    if rir.is_empty() || rir.peak() == 0.0 {
        return Err(SignalError::DegenerateSignal("empty impulse response"));
    }
    if rir.len() > dry.len() {
        return Err(SignalError::LengthMismatch(rir.len(), dry.len()));
    }
    let mut wet = fft_convolve(&dry.samples, &rir.samples);
    wet.truncate(dry.len());
    let (dry_peak, wet_peak) = (dry.peak(), wet.iter().fold(0.0f64, |m, s| m.max(s.abs())));
    if wet_peak > 0.0 {
        let s = dry_peak / wet_peak;
        wet.iter_mut().for_each(|v| *v *= s);
    }
    Waveform::new(wet, dry.sample_rate)
}

/// Multiplies by `10^(gain_db / 20)`. No clipping.
pub fn scale_volume(w: &Waveform, gain_db: f64) -> Waveform {
    let g = 10f64.powf(gain_db / 20.0);
    Waveform {
        samples: w.samples.iter().map(|s| s * g).collect(),
        sample_rate: w.sample_rate,
    }
}

/// Low-pass cutoff as a fraction of the lower of the two sample rates.
pub const RESAMPLE_CUTOFF: f64 = 0.45;
/// Sinc zero crossings on each side of the kernel centre.
const RESAMPLE_ZERO_CROSSINGS: f64 = 16.0;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn blackman(u: f64) -> f64 {
    // u in [-1, 1]
    if u.abs() >= 1.0 {
        return 0.0;
    }
    let x = std::f64::consts::PI * u;
    0.42 + 0.5 * x.cos() + 0.08 * (2.0 * x).cos()
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Band-limited rational resampling with a Blackman-windowed sinc kernel,
/// evaluated polyphase. The cutoff is `0.45 × min(source, target)` Hz.
pub fn resample(w: &Waveform, target_rate: u32) -> Result<Waveform> {
    if target_rate == 0 {
        return Err(SignalError::Invalid("target rate must be positive".into()));
    }
    let src = w.sample_rate as u64;
    let tgt = target_rate as u64;
    if src == tgt {
        return Ok(w.clone());
    }
    let g = gcd(src, tgt);
    let (up, down) = (tgt / g, src / g);
    let cutoff_hz = RESAMPLE_CUTOFF * src.min(tgt) as f64;
    // Normalised to the source rate: kernel is 2fc·sinc(2fc·d) in source samples.
    let fc = cutoff_hz / src as f64;
    let half = (RESAMPLE_ZERO_CROSSINGS / (2.0 * fc)).ceil() as i64;
    let phases: Vec<Vec<f64>> = (0..up)
        .map(|p| {
            let frac = p as f64 / up as f64;
            let mut taps: Vec<f64> = (-half..=half)
                .map(|j| {
                    let d = j as f64 - frac;
                    2.0 * fc * sinc(2.0 * fc * d) * blackman(d / (half as f64 + 1.0))
                })
                .collect();
            let s: f64 = taps.iter().sum();
            taps.iter_mut().for_each(|t| *t /= s);
            taps
        })
        .collect();
    let n_in = w.len() as u64;
    let n_out = (n_in * up).div_ceil(down) as usize;
    let x = &w.samples;
    let mut out = Vec::with_capacity(n_out);
    for n in 0..n_out as u64 {
        let pos = n * down;
        let k0 = (pos / up) as i64;
        let taps = &phases[(pos % up) as usize];
        let mut acc = 0.0;
        for (t, j) in taps.iter().zip(-half..=half) {
            let k = k0 + j;
            if k >= 0 && (k as u64) < n_in {
                acc += t * x[k as usize];
            }
        }
        out.push(acc);
    }
    Waveform::new(out, target_rate)
}

/// Telephone-band simulation: down to 8 kHz and back to the original rate.
pub fn telephony(w: &Waveform) -> Result<Waveform> {
    let narrow = resample(w, 8_000)?;
    let mut back = resample(&narrow, w.sample_rate)?;
    back.samples.resize(w.len(), 0.0);
    Ok(back)
}

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(SignalError::Invalid(format!(
            "{}: expected mono 16-bit PCM, got {} ch / {} bit",
            path.display(),
            spec.channels,
            spec.bits_per_sample
        )));
    }
    let pcm = reader.samples::<i16>().collect::<std::result::Result<Vec<_>, _>>()?;
    Waveform::from_pcm16(&pcm, spec.sample_rate)
}

pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for s in w.to_pcm16() {
        writer.write_sample(s)?;
    }
    writer.finalize()?;
    Ok(())
}
