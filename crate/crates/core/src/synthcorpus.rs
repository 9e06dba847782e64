//! Deterministic synthetic speech-like corpus and noise bank.
//!
//! Each content character is rendered as a harmonic chirp with its own base
//! frequency. A speaker fixes a pitch factor, speaking rate and loudness;
//! per-utterance jitter perturbs pitch and per-character durations, with a
//! wider jitter for "other" speakers. The noise bank holds tonal,
//! band-limited and babble tracks for training plus a held-out set of
//! overlapping in-vocabulary speech reserved for evaluation.

use std::collections::{BTreeSet, HashMap};
use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::seed::{self, ns};
use crate::signal::{self, SignalError, Waveform, SAMPLE_RATE};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("character {0:?} is not in the vocabulary")]
    Vocab(char),
    #[error("token {0} is outside the vocabulary")]
    Token(usize),
    #[error("invalid corpus config: {0}")]
    Config(String),
    #[error("malformed manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
const NUM_SPECIAL: usize = 3;

/// Character inventory. Token ids: 0 = ⟨pad⟩, 1 = ⟨sos⟩, 2 = ⟨eos⟩, then the
/// content characters in order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    chars: Vec<char>,
}

impl Vocab {
    pub fn new(content: &str) -> Result<Self> {
        let chars: Vec<char> = content.chars().collect();
        let unique: BTreeSet<char> = chars.iter().copied().collect();
        if chars.is_empty() || unique.len() != chars.len() {
            return Err(CorpusError::Config(format!(
                "content characters must be non-empty and distinct: {content:?}"
            )));
        }
        if chars.iter().any(|c| c.is_whitespace() || c.is_control()) {
            return Err(CorpusError::Config("content characters must be printable".into()));
        }
        Ok(Self { chars })
    }

    /// Total token count including the three special tokens.
    pub fn size(&self) -> usize {
        self.chars.len() + NUM_SPECIAL
    }

    pub fn content(&self) -> &[char] {
        &self.chars
    }

    pub fn content_string(&self) -> String {
        self.chars.iter().collect()
    }

    pub fn char_index(&self, c: char) -> Result<usize> {
        self.chars.iter().position(|&x| x == c).ok_or(CorpusError::Vocab(c))
    }

    pub fn token(&self, c: char) -> Result<usize> {
        Ok(self.char_index(c)? + NUM_SPECIAL)
    }

    /// Content tokens of `text` (no ⟨sos⟩/⟨eos⟩).
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars().map(|c| self.token(c)).collect()
    }

    /// Renders tokens as text, dropping special tokens.
    pub fn decode(&self, tokens: &[usize]) -> String {
        tokens
            .iter()
            .filter(|&&t| t >= NUM_SPECIAL && t < self.size())
            .map(|&t| self.chars[t - NUM_SPECIAL])
            .collect()
    }

    /// Decoder input: ⟨sos⟩ followed by the content tokens.
    pub fn decoder_input(&self, text: &str) -> Result<Vec<usize>> {
        let mut v = vec![SOS];
        v.extend(self.encode(text)?);
        Ok(v)
    }

    /// Decoder output targets: content tokens followed by ⟨eos⟩.
    pub fn decoder_target(&self, text: &str) -> Result<Vec<usize>> {
        let mut v = self.encode(text)?;
        v.push(EOS);
        Ok(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    Train,
    DevClean,
    DevOther,
    TestClean,
    TestOther,
}

impl Split {
    pub const ALL: [Split; 5] = [
        Split::Train,
        Split::DevClean,
        Split::DevOther,
        Split::TestClean,
        Split::TestOther,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::DevClean => "dev-clean",
            Split::DevOther => "dev-other",
            Split::TestClean => "test-clean",
            Split::TestOther => "test-other",
        }
    }

    pub fn is_other(self) -> bool {
        matches!(self, Split::DevOther | Split::TestOther)
    }

    /// Speakers may only be shared within the same partition group.
    pub fn partition(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::DevClean | Split::DevOther => "dev",
            Split::TestClean | Split::TestOther => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = CorpusError;
    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| CorpusError::Config(format!("unknown split {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    pub audio: Waveform,
    pub transcript: String,
    pub split: Split,
    pub speaker_id: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseCategory {
    Tonal,
    BandNoise,
    SpeechLike,
}

impl NoiseCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            NoiseCategory::Tonal => "tonal",
            NoiseCategory::BandNoise => "band-noise",
            NoiseCategory::SpeechLike => "speech-like",
        }
    }
}

impl FromStr for NoiseCategory {
    type Err = CorpusError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tonal" => Ok(Self::Tonal),
            "band-noise" => Ok(Self::BandNoise),
            "speech-like" => Ok(Self::SpeechLike),
            _ => Err(CorpusError::Config(format!("unknown noise category {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseTrack {
    pub id: usize,
    pub category: NoiseCategory,
    pub held_out: bool,
    pub audio: Waveform,
}

/// Training tracks occupy ids `0..num_train()`; held-out tracks follow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseBank {
    pub tracks: Vec<NoiseTrack>,
}

impl NoiseBank {
    pub fn train_tracks(&self) -> impl Iterator<Item = &NoiseTrack> {
        self.tracks.iter().filter(|t| !t.held_out)
    }

    pub fn held_out_tracks(&self) -> impl Iterator<Item = &NoiseTrack> {
        self.tracks.iter().filter(|t| t.held_out)
    }

    pub fn num_train(&self) -> usize {
        self.train_tracks().count()
    }

    /// Training track by training index (the `noise_id` of a training NoiseSpec).
    pub fn train_track(&self, idx: usize) -> &Waveform {
        &self.train_tracks().nth(idx).expect("noise id within training bank").audio
    }

    pub fn held_out_track(&self, idx: usize) -> &Waveform {
        &self.held_out_tracks().nth(idx).expect("held-out noise id in range").audio
    }

    pub fn num_held_out(&self) -> usize {
        self.held_out_tracks().count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub seed: u64,
    pub content_chars: String,
    pub train: usize,
    pub dev_clean: usize,
    pub dev_other: usize,
    pub test_clean: usize,
    pub test_other: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub char_ms: f64,
    pub crossfade_ms: f64,
    pub pad_ms: f64,
    pub train_speakers: u32,
    pub eval_speakers_per_split: u32,
    pub clean_jitter: f64,
    pub other_jitter: f64,
    pub tracks_per_category: usize,
    pub held_out_tracks: usize,
    pub track_secs: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            content_chars: "abcdefghijkl".into(),
            train: 500,
            dev_clean: 50,
            dev_other: 50,
            test_clean: 50,
            test_other: 50,
            min_len: 5,
            max_len: 20,
            char_ms: 80.0,
            crossfade_ms: 20.0,
            pad_ms: 50.0,
            train_speakers: 40,
            eval_speakers_per_split: 5,
            clean_jitter: 0.05,
            other_jitter: 0.15,
            tracks_per_category: 12,
            held_out_tracks: 8,
            track_secs: 3.0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        Vocab::new(&self.content_chars)?;
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(CorpusError::Config("need 1 ≤ min_len ≤ max_len".into()));
        }
        if self.track_secs < 1.0 {
            return Err(CorpusError::Config("noise tracks must be at least 1 s".into()));
        }
        if self.train_speakers == 0 || self.eval_speakers_per_split == 0 {
            return Err(CorpusError::Config("speaker counts must be positive".into()));
        }
        if self.char_ms <= self.crossfade_ms {
            return Err(CorpusError::Config("char_ms must exceed crossfade_ms".into()));
        }
        Ok(())
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::DevClean => self.dev_clean,
            Split::DevOther => self.dev_other,
            Split::TestClean => self.test_clean,
            Split::TestOther => self.test_other,
        }
    }

    /// Speaker id range for a split; partitions never overlap.
    pub fn speakers(&self, split: Split) -> std::ops::Range<u32> {
        let t = self.train_speakers;
        let e = self.eval_speakers_per_split;
        let base = match split {
            Split::Train => return 0..t,
            Split::DevClean => t,
            Split::DevOther => t + e,
            Split::TestClean => t + 2 * e,
            Split::TestOther => t + 3 * e,
        };
        base..base + e
    }

    /// Speakers used only to render held-out overlapping speech.
    pub fn noise_speakers(&self) -> std::ops::Range<u32> {
        let base = self.train_speakers + 4 * self.eval_speakers_per_split;
        base..base + 4
    }

    /// Whether a speaker belongs to the wide-jitter ("other") population.
    pub fn speaker_is_other(&self, speaker: u32) -> bool {
        if speaker < self.train_speakers {
            speaker % 2 == 1
        } else {
            Split::ALL[1..]
                .iter()
                .any(|&s| s.is_other() && self.speakers(s).contains(&speaker))
        }
    }
}

/// Per-speaker rendering parameters, a pure function of (corpus seed, id).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeakerProfile {
    pub pitch: f64,
    pub rate: f64,
    pub gain_db: f64,
    pub jitter: f64,
}

impl SpeakerProfile {
    pub fn new(cfg: &CorpusConfig, speaker: u32) -> Self {
        let mut r = seed::rng(cfg.seed, &[ns::CORPUS, 0x5350, speaker as u64]);
        Self {
            pitch: r.gen_range(0.9..1.1),
            rate: r.gen_range(0.85..1.15),
            gain_db: r.gen_range(-10.0..6.0),
            jitter: if cfg.speaker_is_other(speaker) {
                cfg.other_jitter
            } else {
                cfg.clean_jitter
            },
        }
    }
}

/// Base frequency (Hz) of content character `i` before speaker scaling.
pub fn char_base_hz(i: usize) -> f64 {
    350.0 + 260.0 * i as f64
}

/// Relative frequency sweep over one character (alternating up/down).
fn char_sweep(i: usize) -> f64 {
    if i % 2 == 0 {
        0.12
    } else {
        -0.12
    }
}

const BASE_AMPLITUDE: f64 = 0.25;
const FLOOR_AMPLITUDE: f64 = 3e-4;

/// One character segment: a chirp with a half-amplitude second harmonic.
fn render_chirp(f0: f64, sweep: f64, len: usize, phase0: f64) -> Vec<f64> {
    let sr = SAMPLE_RATE as f64;
    let mut phase = phase0;
    let mut out = Vec::with_capacity(len);
    for n in 0..len {
        let frac = n as f64 / len.max(1) as f64;
        let f = f0 * (1.0 + sweep * (frac - 0.5));
        phase += 2.0 * PI * f / sr;
        out.push(phase.sin() + 0.5 * (2.0 * phase).sin());
    }
    out
}

/// Overlap-adds segments with linear cross-fades of `fade` samples. Every
/// segment also fades in and out at its ends.
fn crossfade_concat(segments: &[Vec<f64>], fade: usize) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::new();
    let f = fade.max(1) as f64;
    for seg in segments {
        let start = out.len().saturating_sub(fade);
        let len = seg.len();
        if out.len() < start + len {
            out.resize(start + len, 0.0);
        }
        for (n, v) in seg.iter().enumerate() {
            let fin = ((n as f64 + 0.5) / f).min(1.0);
            let fout = (((len - n) as f64 - 0.5) / f).min(1.0);
            out[start + n] += v * fin * fout;
        }
    }
    out
}

fn render_text(
    cfg: &CorpusConfig,
    vocab: &Vocab,
    text: &str,
    profile: &SpeakerProfile,
    r: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let sr = SAMPLE_RATE as f64;
    let fade = (cfg.crossfade_ms * sr / 1000.0).round() as usize;
    let pitch = profile.pitch * (1.0 + 0.4 * profile.jitter * r.gen_range(-1.0..1.0));
    let mut segments = Vec::new();
    let mut phase = 0.0;
    for c in text.chars() {
        let i = vocab.char_index(c)?;
        let dur_ms = cfg.char_ms * profile.rate * (1.0 + profile.jitter * r.gen_range(-1.0..1.0));
        let len = (dur_ms * sr / 1000.0).round() as usize + fade;
        let f0 = char_base_hz(i) * pitch;
        let seg = render_chirp(f0, char_sweep(i), len, phase);
        phase = (phase + 1.234) % (2.0 * PI);
        segments.push(seg);
    }
    Ok(crossfade_concat(&segments, fade))
}

/// Renders one utterance. Fully determined by (config, transcript, speaker, rng state).
pub fn synth_utterance(
    cfg: &CorpusConfig,
    vocab: &Vocab,
    id: &str,
    transcript: &str,
    split: Split,
    speaker_id: u32,
    rng: &mut ChaCha8Rng,
) -> Result<Utterance> {
    if transcript.is_empty() {
        return Err(CorpusError::Config("empty transcript".into()));
    }
    let profile = SpeakerProfile::new(cfg, speaker_id);
    let body = render_text(cfg, vocab, transcript, &profile, rng)?;
    let pad = (cfg.pad_ms * SAMPLE_RATE as f64 / 1000.0).round() as usize;
    let gain = BASE_AMPLITUDE * 10f64.powf((profile.gain_db + rng.gen_range(-2.0..2.0)) / 20.0);
    let mut samples = vec![0.0; pad];
    samples.extend(body.iter().map(|v| v * gain));
    samples.extend(std::iter::repeat(0.0).take(pad));
    for s in samples.iter_mut() {
        *s += FLOOR_AMPLITUDE * rng.gen_range(-1.0..1.0);
    }
    let audio = Waveform::new(samples, SAMPLE_RATE)?.quantized();
    Ok(Utterance {
        id: id.to_string(),
        audio,
        transcript: transcript.to_string(),
        split,
        speaker_id,
    })
}

fn random_transcript(cfg: &CorpusConfig, vocab: &Vocab, r: &mut ChaCha8Rng) -> String {
    let len = r.gen_range(cfg.min_len..=cfg.max_len);
    (0..len).map(|_| vocab.content()[r.gen_range(0..vocab.content().len())]).collect()
}

fn slow_envelope(r: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    let rate = r.gen_range(0.5..4.0);
    let depth = r.gen_range(0.2..0.8);
    let ph = r.gen_range(0.0..2.0 * PI);
    (0..len)
        .map(|n| 1.0 - depth * 0.5 * (1.0 + (2.0 * PI * rate * n as f64 / SAMPLE_RATE as f64 + ph).sin()))
        .collect()
}

fn tonal_track(r: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    let k = r.gen_range(2..=4);
    let mut out = vec![0.0; len];
    for _ in 0..k {
        let f = r.gen_range(150.0..4000.0);
        let drift = r.gen_range(-0.05..0.05);
        let amp = r.gen_range(0.3..1.0);
        let env = slow_envelope(r, len);
        let mut ph = r.gen_range(0.0..2.0 * PI);
        for (n, o) in out.iter_mut().enumerate() {
            let fi = f * (1.0 + drift * n as f64 / len as f64);
            ph += 2.0 * PI * fi / SAMPLE_RATE as f64;
            *o += amp * env[n] * ph.sin();
        }
    }
    out
}

fn band_track(r: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    let n = len.next_power_of_two();
    let mut buf: Vec<Complex<f64>> = (0..n).map(|_| Complex::new(r.gen_range(-1.0..1.0), 0.0)).collect();
    let lo = r.gen_range(100.0..3000.0);
    let hi = lo + r.gen_range(300.0..3000.0);
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, b) in buf.iter_mut().enumerate() {
        let kk = k.min(n - k);
        let f = kk as f64 * SAMPLE_RATE as f64 / n as f64;
        if f < lo || f > hi {
            *b = Complex::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let env = slow_envelope(r, len);
    (0..len).map(|i| buf[i].re * env[i]).collect()
}

/// Babble from an unrelated chirp inventory, two overlapping streams.
fn babble_track(r: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    let inventory: Vec<f64> = (0..10).map(|_| r.gen_range(250.0..3800.0)).collect();
    let mut out = vec![0.0; len];
    for _ in 0..2 {
        let mut segs = Vec::new();
        let mut total = 0;
        while total < len + 2000 {
            let seg_len = r.gen_range(960..2000);
            let f0 = inventory[r.gen_range(0..inventory.len())];
            let seg = render_chirp(f0, r.gen_range(-0.2..0.2), seg_len, r.gen_range(0.0..2.0 * PI));
            total += seg_len - 320;
            segs.push(seg);
        }
        let stream = crossfade_concat(&segs, 320);
        let off = r.gen_range(0..1000);
        let g = r.gen_range(0.5..1.0);
        for (o, v) in out.iter_mut().zip(&stream[off..]) {
            *o += g * v;
        }
    }
    out
}

fn normalise_peak(mut v: Vec<f64>, peak: f64) -> Vec<f64> {
    let m = v.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    if m > 0.0 {
        v.iter_mut().for_each(|x| *x *= peak / m);
    }
    v
}

/// Builds the noise bank: `tracks_per_category` of each training category,
/// then held-out overlapping speech.
pub fn build_noise_bank(cfg: &CorpusConfig, vocab: &Vocab) -> Result<NoiseBank> {
    let len = (cfg.track_secs * SAMPLE_RATE as f64).round() as usize;
    let cats = [NoiseCategory::Tonal, NoiseCategory::BandNoise, NoiseCategory::SpeechLike];
    let n_train = cats.len() * cfg.tracks_per_category;
    let noise_speakers: Vec<u32> = cfg.noise_speakers().collect();
    let tracks: Vec<Result<NoiseTrack>> = (0..n_train + cfg.held_out_tracks)
        .into_par_iter()
        .map(|id| {
            let mut r = seed::rng(cfg.seed, &[ns::NOISE_BANK, id as u64]);
            if id < n_train {
                let category = cats[id / cfg.tracks_per_category];
                let raw = match category {
                    NoiseCategory::Tonal => tonal_track(&mut r, len),
                    NoiseCategory::BandNoise => band_track(&mut r, len),
                    NoiseCategory::SpeechLike => babble_track(&mut r, len),
                };
                let audio = Waveform::new(normalise_peak(raw, 0.5), SAMPLE_RATE)?.quantized();
                Ok(NoiseTrack {
                    id,
                    category,
                    held_out: false,
                    audio,
                })
            } else {
                let mut samples = Vec::new();
                let mut k = 0;
                while samples.len() < len {
                    let spk = noise_speakers[(id + k) % noise_speakers.len()];
                    let text = random_transcript(cfg, vocab, &mut r);
                    let u = synth_utterance(cfg, vocab, "noise", &text, Split::Train, spk, &mut r)?;
                    samples.extend_from_slice(u.audio.samples());
                    k += 1;
                }
                samples.truncate(len);
                let audio = Waveform::new(normalise_peak(samples, 0.5), SAMPLE_RATE)?.quantized();
                Ok(NoiseTrack {
                    id,
                    category: NoiseCategory::SpeechLike,
                    held_out: true,
                    audio,
                })
            }
        })
        .collect();
    Ok(NoiseBank {
        tracks: tracks.into_iter().collect::<Result<_>>()?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub vocab: Vocab,
    pub utterances: Vec<Utterance>,
    pub noise: NoiseBank,
}

/// Builds the full corpus. A pure function of `cfg`.
pub fn build_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let vocab = Vocab::new(&cfg.content_chars)?;
    let mut plan = Vec::new();
    for split in Split::ALL {
        let spk = cfg.speakers(split);
        let n_spk = spk.end - spk.start;
        for k in 0..cfg.count(split) {
            let idx = plan.len();
            plan.push((idx, split, spk.start + (k as u32 % n_spk)));
        }
    }
    let utterances: Vec<Result<Utterance>> = plan
        .into_par_iter()
        .map(|(idx, split, speaker)| {
            let mut r = seed::rng(cfg.seed, &[ns::CORPUS, idx as u64]);
            let text = random_transcript(cfg, &vocab, &mut r);
            let id = format!("{}-{:05}", split.as_str(), idx);
            synth_utterance(cfg, &vocab, &id, &text, split, speaker, &mut r)
        })
        .collect();
    let utterances = utterances.into_iter().collect::<Result<Vec<_>>>()?;
    let noise = build_noise_bank(cfg, &vocab)?;
    Ok(Corpus {
        config: cfg.clone(),
        vocab,
        utterances,
        noise,
    })
}

impl Corpus {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Utterance> {
        self.utterances.iter().filter(move |u| u.split == split)
    }

    /// SHA-256 over manifest records, quantised audio and the noise bank.
    pub fn manifest_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.vocab.content_string().as_bytes());
        for u in &self.utterances {
            h.update(format!("{}\t{}\t{}\t{}\n", u.id, u.split, u.speaker_id, u.transcript).as_bytes());
            for s in u.audio.to_pcm16() {
                h.update(s.to_le_bytes());
            }
        }
        for t in &self.noise.tracks {
            h.update(format!("{}\t{}\t{}\n", t.id, t.category.as_str(), t.held_out).as_bytes());
            for s in t.audio.to_pcm16() {
                h.update(s.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Checks transcript, vocabulary and speaker-partition invariants.
    pub fn validate(&self) -> Result<()> {
        let mut owner: HashMap<u32, &'static str> = HashMap::new();
        for u in &self.utterances {
            if u.transcript.is_empty() {
                return Err(CorpusError::Config(format!("{}: empty transcript", u.id)));
            }
            self.vocab.encode(&u.transcript)?;
            let part = u.split.partition();
            if let Some(prev) = owner.insert(u.speaker_id, part) {
                if prev != part {
                    return Err(CorpusError::Config(format!(
                        "speaker {} appears in {} and {}",
                        u.speaker_id, prev, part
                    )));
                }
            }
        }
        for t in &self.noise.tracks {
            if t.audio.duration_secs() < 1.0 {
                return Err(CorpusError::Config(format!("noise track {} shorter than 1 s", t.id)));
            }
        }
        Ok(())
    }

    /// Writes `manifest.tsv`, `corpus.json`, utterance WAVs and the noise bank.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("wav"))?;
        fs::create_dir_all(dir.join("noise"))?;
        let mut manifest = String::new();
        for u in &self.utterances {
            let rel = PathBuf::from("wav").join(format!("{}.wav", u.id));
            signal::write_wav(&dir.join(&rel), &u.audio)?;
            manifest.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                u.id,
                u.split,
                u.speaker_id,
                rel.display(),
                u.transcript
            ));
        }
        fs::write(dir.join("manifest.tsv"), manifest)?;
        let mut cats = String::new();
        for t in &self.noise.tracks {
            let rel = PathBuf::from("noise").join(format!("noise-{:03}.wav", t.id));
            signal::write_wav(&dir.join(&rel), &t.audio)?;
            cats.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                t.id,
                t.category.as_str(),
                if t.held_out { "heldout" } else { "train" },
                rel.display()
            ));
        }
        fs::write(dir.join("noise").join("categories.tsv"), cats)?;
        let mut f = fs::File::create(dir.join("corpus.json"))?;
        f.write_all(serde_json::to_string_pretty(&self.config)?.as_bytes())?;
        Ok(())
    }

    /// Loads a corpus previously written with [`Corpus::write`].
    pub fn read(dir: &Path) -> Result<Self> {
        let config: CorpusConfig = serde_json::from_str(&fs::read_to_string(dir.join("corpus.json"))?)?;
        let vocab = Vocab::new(&config.content_chars)?;
        let manifest = fs::read_to_string(dir.join("manifest.tsv"))?;
        let mut utterances = Vec::new();
        for (i, line) in manifest.lines().enumerate() {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(CorpusError::Manifest {
                    line: i + 1,
                    msg: format!("expected 5 fields, got {}", f.len()),
                });
            }
            let speaker_id = f[2].parse().map_err(|_| CorpusError::Manifest {
                line: i + 1,
                msg: format!("bad speaker {:?}", f[2]),
            })?;
            utterances.push(Utterance {
                id: f[0].to_string(),
                split: f[1].parse()?,
                speaker_id,
                audio: signal::read_wav(&dir.join(f[3]))?,
                transcript: f[4].to_string(),
            });
        }
        let cats = fs::read_to_string(dir.join("noise").join("categories.tsv"))?;
        let mut tracks = Vec::new();
        for (i, line) in cats.lines().enumerate() {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(CorpusError::Manifest {
                    line: i + 1,
                    msg: "expected 4 fields in categories.tsv".into(),
                });
            }
            tracks.push(NoiseTrack {
                id: f[0].parse().map_err(|_| CorpusError::Manifest {
                    line: i + 1,
                    msg: "bad noise id".into(),
                })?,
                category: f[1].parse()?,
                held_out: f[2] == "heldout",
                audio: signal::read_wav(&dir.join(f[3]))?,
            });
        }
        let corpus = Corpus {
            config,
            vocab,
            utterances,
            noise: NoiseBank { tracks },
        };
        corpus.validate()?;
        Ok(corpus)
    }
}
