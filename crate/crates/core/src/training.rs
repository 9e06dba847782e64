//! Adam, the halving learning-rate schedule, paired clean/noisy training
//! with per-epoch checkpoints and resume, and hyperparameter search.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{Graph, ParamStore};
use crate::eval::{self, DistanceProfile, EvalError, FeaturePair};
use crate::features::{FeatureConfig, FeatureError, FeatureMatrix, FeaturePipeline, FeatureStats, Mfcc};
use crate::losses::{self, Discriminator, LossError, SchemeAux, SchemeKind, TrainScheme, DISC_WIDTH};
use crate::seed::{self, ns};
use crate::seq2seq::{self, CheckpointMeta, ModelConfig, ModelError, Seq2Seq, CKPT_VERSION};
use crate::signal::{self, NoiseSpec, SignalError, Waveform};
use crate::synthcorpus::{Corpus, CorpusError, NoiseBank, Split, Vocab, PAD};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("numeric error: {0}")]
    NumericError(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Autodiff(#[from] crate::autodiff::AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam moments for one parameter store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    pub learning_rate: f64,
}

impl OptState {
    pub fn new(store: &ParamStore, learning_rate: f64) -> Self {
        let z: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self {
            m: z.clone(),
            v: z,
            step: 0,
            learning_rate,
        }
    }

    /// One bias-corrected Adam update from the gradients in `store`.
    pub fn adam_step(&mut self, store: &mut ParamStore) -> Result<()> {
        if let Some(p) = store.iter().find(|p| p.grad.iter().any(|g| !g.is_finite())) {
            return Err(TrainError::NumericError(format!("non-finite gradient in {}", p.name)));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for (k, p) in store.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, (w, &g)) in p.value.data_mut().iter_mut().zip(&p.grad).enumerate() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                *w -= self.learning_rate * mh / (vh.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

/// Learning-rate schedule and stopping state. The learning rate halves
/// whenever validation perplexity rises over the previous epoch; training
/// stops once `patience` consecutive epochs fail to beat the best
/// perplexity seen so far, or at `max_epochs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub best: Option<f64>,
    pub prev: Option<f64>,
    pub stall: usize,
    pub epochs: usize,
    pub patience: usize,
    pub max_epochs: usize,
}

impl Schedule {
    pub fn new(patience: usize, max_epochs: usize) -> Self {
        Self {
            best: None,
            prev: None,
            stall: 0,
            epochs: 0,
            patience,
            max_epochs,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleDecision {
    pub halved: bool,
    pub improved: bool,
    pub stop: bool,
}

/// Records one completed epoch's validation perplexity.
pub fn schedule_update(s: &mut Schedule, ppl: f64, opt: &mut OptState) -> ScheduleDecision {
    s.epochs += 1;
    let halved = s.prev.is_some_and(|p| ppl > p);
    if halved {
        opt.learning_rate *= 0.5;
    }
    let improved = s.best.is_none_or(|b| ppl < b);
    if improved {
        s.best = Some(ppl);
        s.stall = 0;
    } else {
        s.stall += 1;
    }
    s.prev = Some(ppl);
    let stop = s.stall >= s.patience || s.epochs >= s.max_epochs;
    ScheduleDecision { halved, improved, stop }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean total loss per training example.
    pub train_loss: f64,
    /// Mean cross-entropy part per training example.
    pub train_task_loss: f64,
    pub val_perplexity: f64,
    pub val_cer: f64,
    pub learning_rate: f64,
    pub halved: bool,
    pub improved: bool,
    pub wall_secs: f64,
    pub distances: Option<DistanceProfile>,
}

/// Append-only per-epoch log.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let f = BufReader::new(fs::File::open(path)?);
        let mut records = Vec::new();
        for line in f.lines() {
            let line = line?;
            if !line.trim().is_empty() {
                records.push(serde_json::from_str(&line)?);
            }
        }
        Ok(Self { records })
    }

    /// The log with timing removed, for reproducibility comparisons.
    pub fn without_timing(&self) -> Self {
        let mut c = self.clone();
        c.records.iter_mut().for_each(|r| r.wall_secs = 0.0);
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Dev-other pairs used for the per-epoch distance profile (0 = off).
    pub distance_pairs: usize,
    pub max_decode_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            max_epochs: 40,
            patience: 3,
            batch_size: 1,
            clip_norm: Some(5.0),
            distance_pairs: 10,
            max_decode_len: 30,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config("learning_rate must be positive".into()));
        }
        if self.max_epochs == 0 || self.patience == 0 || self.batch_size == 0 {
            return Err(TrainError::Config("max_epochs, patience and batch_size must be positive".into()));
        }
        if self.clip_norm.is_some_and(|c| c <= 0.0) {
            return Err(TrainError::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }
}

/// One utterance ready for training or scoring.
#[derive(Debug, Clone)]
pub struct Example {
    pub id: String,
    pub audio: Waveform,
    pub feats: FeatureMatrix,
    pub input: Vec<usize>,
    pub target: Vec<usize>,
    pub transcript: String,
}

/// Featurised corpus with normalisation frozen from the clean training set.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub pipeline: FeaturePipeline,
    pub vocab: Vocab,
    pub train: Vec<Example>,
    pub dev_clean: Vec<Example>,
    pub dev_other: Vec<Example>,
    pub noise: NoiseBank,
    pub corpus_hash: String,
}

fn examples(corpus: &Corpus, split: Split, mfcc: &Mfcc) -> Result<Vec<Example>> {
    let utts: Vec<_> = corpus.split(split).collect();
    utts.par_iter()
        .map(|u| {
            Ok(Example {
                id: u.id.clone(),
                audio: u.audio.clone(),
                feats: mfcc.compute(&u.audio)?,
                input: corpus.vocab.decoder_input(&u.transcript)?,
                target: corpus.vocab.decoder_target(&u.transcript)?,
                transcript: u.transcript.clone(),
            })
        })
        .collect()
}

/// Normalised examples of one split under a frozen pipeline.
pub fn split_examples(corpus: &Corpus, split: Split, pipeline: &FeaturePipeline) -> Result<Vec<Example>> {
    let mut ex = examples(corpus, split, &pipeline.mfcc)?;
    for e in ex.iter_mut() {
        e.feats = pipeline.stats.apply(&e.feats)?;
    }
    Ok(ex)
}

impl TrainData {
    pub fn from_corpus(corpus: &Corpus, feat_cfg: FeatureConfig) -> Result<Self> {
        let mfcc = Mfcc::new(feat_cfg.clone());
        let mut train = examples(corpus, Split::Train, &mfcc)?;
        let mut dev_clean = examples(corpus, Split::DevClean, &mfcc)?;
        let mut dev_other = examples(corpus, Split::DevOther, &mfcc)?;
        if train.is_empty() {
            return Err(TrainError::Config("corpus has no training utterances".into()));
        }
        let stats = FeatureStats::from_matrices(train.iter().map(|e| &e.feats));
        for e in train.iter_mut().chain(dev_clean.iter_mut()).chain(dev_other.iter_mut()) {
            e.feats = stats.apply(&e.feats)?;
        }
        Ok(Self {
            pipeline: FeaturePipeline::new(feat_cfg, stats),
            vocab: corpus.vocab.clone(),
            train,
            dev_clean,
            dev_other,
            noise: corpus.noise.clone(),
            corpus_hash: corpus.manifest_hash(),
        })
    }

    pub fn num_coeffs(&self) -> usize {
        self.pipeline.mfcc.config().num_coeffs
    }
}

/// Noise draw for utterance `idx` in `epoch` of run `seed`.
pub fn noise_spec(run_seed: u64, epoch: usize, idx: usize, bank_size: usize) -> NoiseSpec {
    let mut r = seed::rng(run_seed, &[ns::TRAIN_NOISE, epoch as u64, idx as u64]);
    signal::sample_noise_spec(&mut r, bank_size)
}

/// Fresh noisy features for every training utterance of one epoch.
pub fn noisy_epoch(data: &TrainData, run_seed: u64, epoch: usize) -> Result<Vec<FeatureMatrix>> {
    data.train
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let spec = noise_spec(run_seed, epoch, i, data.noise.num_train());
            let w = signal::mix_at_snr(&e.audio, data.noise.train_track(spec.noise_id), &spec)?;
            Ok(data.pipeline.extract(&w)?)
        })
        .collect()
}

/// Clean/noisy pairs for distance profiling. Noise is drawn from the
/// analysis seed namespace so every model is measured on the same pairs.
pub fn analysis_pairs(
    pipeline: &FeaturePipeline,
    noise: &NoiseBank,
    examples: &[Example],
    n: usize,
    analysis_seed: u64,
) -> Result<Vec<FeaturePair>> {
    examples
        .par_iter()
        .take(n)
        .enumerate()
        .map(|(i, e)| {
            let mut r = seed::rng(analysis_seed, &[ns::ANALYSIS, i as u64]);
            let spec = signal::sample_noise_spec(&mut r, noise.num_train());
            let w = signal::mix_at_snr(&e.audio, noise.train_track(spec.noise_id), &spec)?;
            Ok(FeaturePair {
                clean: e.feats.clone(),
                noisy: pipeline.extract(&w)?,
                input: e.input.clone(),
            })
        })
        .collect()
}

/// Teacher-forced perplexity: exp of the mean per-token cross-entropy.
pub fn perplexity(model: &Seq2Seq, examples: &[&Example]) -> Result<f64> {
    let per: Vec<Result<(f64, usize)>> = examples
        .par_iter()
        .map(|e| {
            let mut g = Graph::new();
            let b = model.bind_frozen(&mut g);
            let out = model.forward_teacher_forced(&mut g, &b, &e.feats, &e.input)?;
            let ce = losses::cross_entropy(&mut g, out.logits, &e.target)?;
            Ok((g.scalar_value(ce), e.target.iter().filter(|&&t| t != PAD).count()))
        })
        .collect();
    let (mut s, mut n) = (0.0, 0usize);
    for r in per {
        let (c, k) = r?;
        s += c;
        n += k;
    }
    Ok((s / n.max(1) as f64).exp())
}

/// Pooled CER of decoded clean examples.
pub fn examples_cer(model: &Seq2Seq, examples: &[&Example], opts: eval::DecodeOptions) -> Result<f64> {
    let feats: Vec<FeatureMatrix> = examples.iter().map(|e| e.feats.clone()).collect();
    let hyps = eval::decode_all(model, &feats, opts)?;
    let texts: Vec<String> = hyps.iter().map(|h| h.text(&model.config().vocab)).collect();
    Ok(eval::corpus_cer(texts.iter().zip(examples).map(|(h, e)| (h.as_str(), e.transcript.as_str())))?)
}

/// Everything that determines one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub scheme: TrainScheme,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
}

impl RunSpec {
    /// SHA-256 over the run spec, the corpus and the feature pipeline.
    pub fn config_hash(&self, data: &TrainData) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("serialisable"));
        h.update(data.corpus_hash.as_bytes());
        h.update(serde_json::to_vec(data.pipeline.mfcc.config()).expect("serialisable"));
        hex::encode(h.finalize())
    }
}

/// Files a run writes into its output directory.
pub mod files {
    pub const BEST: &str = "best.ckpt";
    pub const LAST: &str = "last.ckpt";
    pub const STATE: &str = "state.bin";
    pub const LOG: &str = "log.jsonl";
    pub const MANIFEST: &str = "run.json";
}

/// Written once per run: what was trained and from which inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub spec: RunSpec,
    pub config_hash: String,
    pub corpus_hash: String,
    pub model_parameters: usize,
    pub discriminator_parameters: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation perplexity.
    pub best: Seq2Seq,
    pub best_epoch: usize,
    pub last: Seq2Seq,
    pub log: TrainLog,
    pub finished: bool,
    pub model_parameters: usize,
    pub discriminator_parameters: Option<usize>,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StateHeader {
    config_hash: String,
    epochs_done: usize,
    best_epoch: usize,
    finished: bool,
    schedule: Schedule,
    log: TrainLog,
    opt_step: u64,
    opt_lr: f64,
    disc_step: u64,
    disc_lr: f64,
}

const STATE_MAGIC: &[u8; 8] = b"IRLSTAT1";

fn put_f64s(buf: &mut Vec<u8>, vs: &[Vec<f64>]) {
    for v in vs {
        for x in v {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
}

fn take_f64s(bytes: &[u8], pos: &mut usize, shape: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    shape
        .iter()
        .map(|s| {
            let n = s.len() * 8;
            if *pos + n > bytes.len() {
                return Err(TrainError::IncompatibleCheckpoint("truncated training state".into()));
            }
            let v = bytes[*pos..*pos + n].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            *pos += n;
            Ok(v)
        })
        .collect()
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct RunState {
    model: Seq2Seq,
    best: Seq2Seq,
    opt: OptState,
    disc: Option<(Discriminator, OptState)>,
    header: StateHeader,
}

fn save_state(dir: &Path, st: &RunState, meta: &CheckpointMeta, best_meta: &CheckpointMeta) -> Result<()> {
    seq2seq::save_checkpoint(&dir.join(files::LAST), meta, &st.model)?;
    seq2seq::save_checkpoint(&dir.join(files::BEST), best_meta, &st.best)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(STATE_MAGIC);
    let json = serde_json::to_vec(&st.header)?;
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    put_f64s(&mut buf, &st.opt.m);
    put_f64s(&mut buf, &st.opt.v);
    if let Some((d, o)) = &st.disc {
        let vals: Vec<Vec<f64>> = d.params().iter().map(|p| p.value.data().to_vec()).collect();
        put_f64s(&mut buf, &vals);
        put_f64s(&mut buf, &o.m);
        put_f64s(&mut buf, &o.v);
    }
    write_atomic(&dir.join(files::STATE), &buf)?;
    write_atomic(&dir.join(files::LOG), st.header.log.to_jsonl()?.as_bytes())?;
    Ok(())
}

fn load_state(dir: &Path, fresh: RunState) -> Result<RunState> {
    let mut bytes = Vec::new();
    fs::File::open(dir.join(files::STATE))?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..8] != STATE_MAGIC {
        return Err(TrainError::IncompatibleCheckpoint("bad training state file".into()));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let mut pos = 16 + n;
    if pos > bytes.len() {
        return Err(TrainError::IncompatibleCheckpoint("truncated training state".into()));
    }
    let header: StateHeader = serde_json::from_slice(&bytes[16..pos])?;
    if header.config_hash != fresh.header.config_hash {
        return Err(TrainError::IncompatibleCheckpoint(format!(
            "output directory holds a run with config {} but this run is {}",
            header.config_hash, fresh.header.config_hash
        )));
    }
    let load = |name: &str| -> Result<Seq2Seq> {
        let (meta, m) = seq2seq::load_checkpoint(&dir.join(name))?;
        if meta.config_hash != header.config_hash {
            return Err(TrainError::IncompatibleCheckpoint(format!("{name} belongs to a different run")));
        }
        if m.signature() != fresh.model.signature() {
            return Err(TrainError::IncompatibleCheckpoint(format!("{name} has a different architecture")));
        }
        Ok(m)
    };
    let model = load(files::LAST)?;
    let best = load(files::BEST)?;
    let mut opt = fresh.opt;
    opt.m = take_f64s(&bytes, &mut pos, &opt.m)?;
    opt.v = take_f64s(&bytes, &mut pos, &opt.v)?;
    opt.step = header.opt_step;
    opt.learning_rate = header.opt_lr;
    let disc = match fresh.disc {
        Some((mut d, mut o)) => {
            let shape: Vec<Vec<f64>> = d.params().iter().map(|p| p.value.data().to_vec()).collect();
            let vals = take_f64s(&bytes, &mut pos, &shape)?;
            for (p, v) in d.params_mut().iter_mut().zip(vals) {
                p.value.data_mut().copy_from_slice(&v);
            }
            o.m = take_f64s(&bytes, &mut pos, &o.m)?;
            o.v = take_f64s(&bytes, &mut pos, &o.v)?;
            o.step = header.disc_step;
            o.learning_rate = header.disc_lr;
            Some((d, o))
        }
        None => None,
    };
    if pos != bytes.len() {
        return Err(TrainError::IncompatibleCheckpoint("training state has trailing bytes".into()));
    }
    Ok(RunState {
        model,
        best,
        opt,
        disc,
        header,
    })
}

/// Options that affect how, not what, a run computes.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Directory for checkpoints, state and log; resumes from it if a state
    /// file is present.
    pub out_dir: Option<PathBuf>,
    /// Stop this invocation after this many epochs in total (simulated
    /// interruption); a later call with the same directory resumes.
    pub epoch_limit: Option<usize>,
}

/// Trains one model.
pub fn train(data: &TrainData, spec: &RunSpec, opts: &RunOptions) -> Result<TrainOutcome> {
    spec.scheme.validate()?;
    spec.train.validate()?;
    if spec.model.vocab != data.vocab || spec.model.num_coeffs != data.num_coeffs() {
        return Err(TrainError::Config("model vocabulary or input width does not match the data".into()));
    }
    let cfg = &spec.train;
    let kind = spec.scheme.kind;
    let config_hash = spec.config_hash(data);
    let model = Seq2Seq::new(spec.model.clone(), spec.seed)?;
    let disc = (kind == SchemeKind::Adversarial).then(|| {
        let d = Discriminator::new(spec.model.enc_out_dim(), DISC_WIDTH, spec.seed);
        let o = OptState::new(d.params(), cfg.learning_rate);
        (d, o)
    });
    let fresh = RunState {
        opt: OptState::new(model.params(), cfg.learning_rate),
        best: model.clone(),
        model,
        disc,
        header: StateHeader {
            config_hash: config_hash.clone(),
            epochs_done: 0,
            best_epoch: 0,
            finished: false,
            schedule: Schedule::new(cfg.patience, cfg.max_epochs),
            log: TrainLog::default(),
            opt_step: 0,
            opt_lr: cfg.learning_rate,
            disc_step: 0,
            disc_lr: cfg.learning_rate,
        },
    };
    let model_parameters = fresh.model.num_parameters();
    let discriminator_parameters = fresh.disc.as_ref().map(|(d, _)| d.num_parameters());
    let mut st = match &opts.out_dir {
        Some(dir) if dir.join(files::STATE).exists() => {
            let s = load_state(dir, fresh)?;
            log::info!("resuming {} after epoch {}", dir.display(), s.header.epochs_done);
            s
        }
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let manifest = RunManifest {
                spec: spec.clone(),
                config_hash: config_hash.clone(),
                corpus_hash: data.corpus_hash.clone(),
                model_parameters,
                discriminator_parameters,
            };
            write_atomic(&dir.join(files::MANIFEST), &serde_json::to_vec_pretty(&manifest)?)?;
            fresh
        }
        None => fresh,
    };

    let meta = |epoch: usize| CheckpointMeta {
        version: CKPT_VERSION,
        model: spec.model.clone(),
        config_hash: config_hash.clone(),
        corpus_hash: data.corpus_hash.clone(),
        features: Some(data.pipeline.mfcc.config().clone()),
        feature_stats: Some(data.pipeline.stats.clone()),
        epoch,
    };
    let val_set: Vec<&Example> = data.dev_clean.iter().chain(&data.dev_other).collect();
    let pairs = if cfg.distance_pairs > 0 && !data.dev_other.is_empty() {
        analysis_pairs(&data.pipeline, &data.noise, &data.dev_other, cfg.distance_pairs, spec.seed)?
    } else {
        Vec::new()
    };
    let n = data.train.len();

    while !st.header.finished && opts.epoch_limit.is_none_or(|l| st.header.epochs_done < l) {
        let epoch = st.header.epochs_done + 1;
        let start = Instant::now();
        let noisy = if kind.uses_noisy() {
            Some(noisy_epoch(data, spec.seed, epoch)?)
        } else {
            None
        };
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seed::rng(spec.seed, &[ns::TRAIN_ORDER, epoch as u64]));
        let (mut loss_sum, mut task_sum) = (0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            st.model.params_mut().zero_grad();
            if let Some((d, _)) = st.disc.as_mut() {
                d.params_mut().zero_grad();
            }
            for &i in batch {
                let ex = &data.train[i];
                let mut g = Graph::new();
                let b = st.model.bind(&mut g);
                let clean = st.model.forward_teacher_forced(&mut g, &b, &ex.feats, &ex.input)?;
                let noisy_out = match &noisy {
                    Some(nf) => Some(st.model.forward_teacher_forced(&mut g, &b, &nf[i], &ex.input)?),
                    None => None,
                };
                let weights = if kind == SchemeKind::WeightDecay {
                    st.model.weight_vars(&b)
                } else {
                    Vec::new()
                };
                let db = st.disc.as_ref().map(|(d, _)| d.bind(&mut g));
                let aux = SchemeAux {
                    weights: &weights,
                    disc: st.disc.as_ref().map(|(d, _)| d).zip(db.as_ref()),
                };
                let l = losses::scheme_loss(&mut g, &spec.scheme, &clean, noisy_out.as_ref(), &ex.target, &aux)?;
                let lv = g.scalar_value(l.total);
                if !lv.is_finite() {
                    return Err(TrainError::NumericError(format!("loss is {lv} on {}", ex.id)));
                }
                loss_sum += lv;
                task_sum += g.scalar_value(l.task);
                let grads = g.backward_into(l.total, st.model.params_mut())?;
                if let (Some((d, _)), Some(db)) = (st.disc.as_mut(), db.as_ref()) {
                    d.accumulate(&grads, db);
                }
            }
            if let Some(c) = cfg.clip_norm {
                st.model.params_mut().clip_grad_norm(c);
            }
            st.opt.adam_step(st.model.params_mut())?;
            if let Some((d, o)) = st.disc.as_mut() {
                if let Some(c) = cfg.clip_norm {
                    d.params_mut().clip_grad_norm(c);
                }
                o.adam_step(d.params_mut())?;
            }
        }

        let ppl = perplexity(&st.model, &val_set)?;
        if !ppl.is_finite() {
            return Err(TrainError::NumericError(format!("validation perplexity is {ppl}")));
        }
        let val_cer = examples_cer(
            &st.model,
            &val_set,
            eval::DecodeOptions {
                width: 1,
                max_len: cfg.max_decode_len,
            },
        )?;
        let distances = if pairs.is_empty() {
            None
        } else {
            Some(eval::distance_profile(&st.model, &pairs)?)
        };
        let lr_used = st.opt.learning_rate;
        let dec = schedule_update(&mut st.header.schedule, ppl, &mut st.opt);
        if let Some((_, o)) = st.disc.as_mut() {
            o.learning_rate = st.opt.learning_rate;
        }
        if dec.improved {
            st.best = st.model.clone();
            st.header.best_epoch = epoch;
        }
        st.header.log.records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / n as f64,
            train_task_loss: task_sum / n as f64,
            val_perplexity: ppl,
            val_cer,
            learning_rate: lr_used,
            halved: dec.halved,
            improved: dec.improved,
            wall_secs: start.elapsed().as_secs_f64(),
            distances,
        });
        log::info!(
            "{} seed {} epoch {epoch}: loss {:.4} ppl {:.4} cer {:.4} lr {:e}{}",
            kind,
            spec.seed,
            loss_sum / n as f64,
            ppl,
            val_cer,
            lr_used,
            if dec.stop { " (stop)" } else { "" }
        );
        st.header.epochs_done = epoch;
        st.header.finished = dec.stop;
        st.header.opt_step = st.opt.step;
        st.header.opt_lr = st.opt.learning_rate;
        if let Some((_, o)) = &st.disc {
            st.header.disc_step = o.step;
            st.header.disc_lr = o.learning_rate;
        }
        if let Some(dir) = &opts.out_dir {
            save_state(dir, &st, &meta(epoch), &meta(st.header.best_epoch))?;
        }
    }

    Ok(TrainOutcome {
        best: st.best,
        best_epoch: st.header.best_epoch,
        last: st.model,
        log: st.header.log,
        finished: st.header.finished,
        model_parameters,
        discriminator_parameters,
        config_hash,
    })
}

/// A weight that the search may vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Alpha,
    Gamma,
    Lambda,
    Aux,
}

impl Axis {
    fn get(self, s: &TrainScheme) -> f64 {
        match self {
            Axis::Alpha => s.alpha,
            Axis::Gamma => s.gamma,
            Axis::Lambda => s.lambda,
            Axis::Aux => s.aux_weight,
        }
    }

    fn set(self, s: &mut TrainScheme, v: f64) {
        match self {
            Axis::Alpha => s.alpha = v,
            Axis::Gamma => s.gamma = v,
            Axis::Lambda => s.lambda = v,
            Axis::Aux => s.aux_weight = v,
        }
    }
}

/// The weights each scheme's loss actually uses.
pub fn search_axes(kind: SchemeKind) -> Vec<Axis> {
    match kind {
        SchemeKind::Baseline => vec![],
        SchemeKind::DataAug | SchemeKind::Adversarial => vec![Axis::Alpha],
        SchemeKind::WeightDecay | SchemeKind::ActShrink => vec![Axis::Alpha, Axis::Aux],
        SchemeKind::LogitPairing | SchemeKind::IrlE | SchemeKind::IrlC => vec![Axis::Alpha, Axis::Gamma, Axis::Lambda],
    }
}

pub const SCALE_GRID: [f64; 6] = [0.001, 0.01, 0.1, 1.0, 10.0, 100.0];

/// One trained candidate and its selection score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub scheme: TrainScheme,
    pub seed: u64,
    pub dev_other_cer: f64,
    pub best_epoch: usize,
    pub dir: Option<PathBuf>,
}

fn penalty_mass(s: &TrainScheme) -> f64 {
    match s.kind {
        SchemeKind::WeightDecay | SchemeKind::ActShrink => s.aux_weight,
        _ => s.gamma + s.lambda,
    }
}

/// Lower dev-other CER wins; ties go to the smaller penalty weights, then
/// to the earlier candidate.
pub fn better(a: &Candidate, b: &Candidate) -> bool {
    a.dev_other_cer < b.dev_other_cer || (a.dev_other_cer == b.dev_other_cer && penalty_mass(&a.scheme) < penalty_mass(&b.scheme))
}

#[derive(Debug, Clone)]
pub struct SearchConfig {
    pub seeds: Vec<u64>,
    pub decode: eval::DecodeOptions,
    /// Independent runs in flight at once.
    pub parallel: usize,
    pub out_root: Option<PathBuf>,
}

fn run_dir(root: &Option<PathBuf>, s: &TrainScheme, seed_v: u64) -> Option<PathBuf> {
    root.as_ref().map(|r| {
        r.join(format!(
            "{}-a{}-g{}-l{}-x{}-s{}",
            s.kind, s.alpha, s.gamma, s.lambda, s.aux_weight, seed_v
        ))
    })
}

/// Trains `scheme` once per seed and scores each best checkpoint on
/// dev-other. Returns the candidates in seed order and the models.
pub fn train_seeds(
    data: &TrainData,
    base: &RunSpec,
    scheme: TrainScheme,
    cfg: &SearchConfig,
) -> Result<Vec<(Candidate, TrainOutcome)>> {
    let dev_other: Vec<&Example> = data.dev_other.iter().collect();
    if dev_other.is_empty() {
        return Err(TrainError::Config("corpus has no dev-other split".into()));
    }
    let run = |&seed_v: &u64| -> Result<(Candidate, TrainOutcome)> {
        let spec = RunSpec {
            scheme,
            seed: seed_v,
            ..base.clone()
        };
        let dir = run_dir(&cfg.out_root, &scheme, seed_v);
        let out = train(
            data,
            &spec,
            &RunOptions {
                out_dir: dir.clone(),
                epoch_limit: None,
            },
        )?;
        let c = examples_cer(&out.best, &dev_other, cfg.decode)?;
        Ok((
            Candidate {
                scheme,
                seed: seed_v,
                dev_other_cer: c,
                best_epoch: out.best_epoch,
                dir,
            },
            out,
        ))
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.parallel.max(1))
        .build()
        .map_err(|e| TrainError::Config(e.to_string()))?;
    let res: Vec<Result<_>> = if cfg.parallel > 1 {
        pool.install(|| cfg.seeds.par_iter().map(run).collect())
    } else {
        cfg.seeds.iter().map(run).collect()
    };
    res.into_iter().collect()
}

/// Best of several seeds by dev-other CER.
pub fn best_of_seeds(
    data: &TrainData,
    base: &RunSpec,
    scheme: TrainScheme,
    cfg: &SearchConfig,
) -> Result<(Candidate, TrainOutcome, Vec<Candidate>)> {
    let runs = train_seeds(data, base, scheme, cfg)?;
    let all: Vec<Candidate> = runs.iter().map(|(c, _)| c.clone()).collect();
    let mut best: Option<(Candidate, TrainOutcome)> = None;
    for (c, o) in runs {
        if best.as_ref().is_none_or(|(b, _)| better(&c, b)) {
            best = Some((c, o));
        }
    }
    let (c, o) = best.ok_or_else(|| TrainError::Config("no seeds given".into()))?;
    Ok((c, o, all))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchResult {
    pub best: Candidate,
    pub tried: Vec<Candidate>,
}

/// Coordinate search: starting from `base.scheme`, each axis in turn is
/// set to every grid value (others held at their current best) and the
/// best value by dev-other CER is kept. With `full_cross` every
/// combination of axis values is trained instead.
pub fn grid_search(data: &TrainData, base: &RunSpec, grid: &[f64], full_cross: bool, cfg: &SearchConfig) -> Result<SearchResult> {
    if grid.is_empty() {
        return Err(TrainError::Config("empty grid".into()));
    }
    let axes = search_axes(base.scheme.kind);
    let mut tried: Vec<Candidate> = Vec::new();
    let mut eval_point = |s: TrainScheme, tried: &mut Vec<Candidate>| -> Result<Candidate> {
        if let Some(c) = tried.iter().find(|c| c.scheme == s) {
            return Ok(c.clone());
        }
        let (c, _, all) = best_of_seeds(data, base, s, cfg)?;
        tried.extend(all);
        Ok(c)
    };
    let mut best = eval_point_first(base, &axes, grid, full_cross, &mut tried, &mut eval_point)?;
    if !full_cross {
        for &ax in &axes {
            for &v in grid {
                let mut s = best.scheme;
                ax.set(&mut s, v);
                let c = eval_point(s, &mut tried)?;
                if better(&c, &best) {
                    best = c;
                }
            }
        }
    }
    Ok(SearchResult { best, tried })
}

fn eval_point_first(
    base: &RunSpec,
    axes: &[Axis],
    grid: &[f64],
    full_cross: bool,
    tried: &mut Vec<Candidate>,
    eval_point: &mut dyn FnMut(TrainScheme, &mut Vec<Candidate>) -> Result<Candidate>,
) -> Result<Candidate> {
    if !full_cross || axes.is_empty() {
        let mut s = base.scheme;
        // Start each axis at the grid value nearest its default.
        for &ax in axes {
            let cur = ax.get(&s);
            let near = grid
                .iter()
                .copied()
                .min_by(|a, b| (a - cur).abs().partial_cmp(&(b - cur).abs()).unwrap())
                .unwrap();
            ax.set(&mut s, near);
        }
        return eval_point(s, tried);
    }
    let mut best: Option<Candidate> = None;
    let total = grid.len().pow(axes.len() as u32);
    for code in 0..total {
        let mut s = base.scheme;
        let mut c = code;
        for &ax in axes {
            ax.set(&mut s, grid[c % grid.len()]);
            c /= grid.len();
        }
        let cand = eval_point(s, tried)?;
        if best.as_ref().is_none_or(|b| better(&cand, b)) {
            best = Some(cand);
        }
    }
    Ok(best.expect("non-empty grid"))
}

/// The best-of-seeds outcome of one scheme.
#[derive(Debug, Clone)]
pub struct SchemeRun {
    pub best: Candidate,
    pub seeds: Vec<Candidate>,
    pub outcome: TrainOutcome,
}

/// Trains every scheme on the same data and seeds and keeps each scheme's
/// best seed by dev-other CER.
pub fn compare(data: &TrainData, base: &RunSpec, schemes: &[TrainScheme], cfg: &SearchConfig) -> Result<Vec<SchemeRun>> {
    schemes
        .iter()
        .map(|&s| {
            let (best, outcome, seeds) = best_of_seeds(data, base, s, cfg)?;
            Ok(SchemeRun { best, seeds, outcome })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn one_param(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::scalar(v), true);
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = one_param(1.5);
        let mut o = OptState::new(&s, 1e-3);
        o.adam_step(&mut s).unwrap();
        assert_eq!(s.iter().next().unwrap().value.data()[0], 1.5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        for g in [1e-3, 0.7, -250.0] {
            let mut s = one_param(0.0);
            s.iter_mut().next().unwrap().grad[0] = g;
            let mut o = OptState::new(&s, 1e-3);
            o.adam_step(&mut s).unwrap();
            let w = s.iter().next().unwrap().value.data()[0];
            // |m̂/√v̂| = |g|/(|g| + ε)
            let want = -1e-3 * g / (g.abs() + ADAM_EPS);
            assert!((w - want).abs() < 1e-15, "g {g}: {w} vs {want}");
            assert!((w.abs() - 1e-3).abs() < 1e-8);
        }
    }

    #[test]
    fn nan_gradient_is_numeric_error() {
        let mut s = one_param(0.0);
        s.iter_mut().next().unwrap().grad[0] = f64::NAN;
        let mut o = OptState::new(&s, 1e-3);
        assert!(matches!(o.adam_step(&mut s), Err(TrainError::NumericError(_))));
        assert_eq!(o.step, 0);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut s = one_param(0.3);
            let mut o = OptState::new(&s, 1e-2);
            for k in 0..50 {
                let w = s.iter().next().unwrap().value.data()[0];
                s.iter_mut().next().unwrap().grad[0] = 2.0 * (w - 1.0) + (k as f64).sin() * 0.1;
                o.adam_step(&mut s).unwrap();
            }
            let w = s.iter().next().unwrap().value.data()[0];
            w.to_bits()
        };
        assert_eq!(run(), run());
    }

    fn replay(ppls: &[f64]) -> (Vec<ScheduleDecision>, f64) {
        let mut s = Schedule::new(3, 40);
        let mut o = OptState::new(&ParamStore::new(), 1.0);
        let d = ppls.iter().map(|&p| schedule_update(&mut s, p, &mut o)).collect();
        (d, o.learning_rate)
    }

    #[test]
    fn schedule_examples() {
        let (d, lr) = replay(&[10.0, 9.0, 8.0]);
        assert_eq!(lr, 1.0);
        assert!(d.iter().all(|x| !x.stop && !x.halved));

        let (d, lr) = replay(&[10.0, 11.0]);
        assert_eq!(lr, 0.5);
        assert!(d[1].halved && !d[1].stop);

        let (d, lr) = replay(&[10.0, 10.0, 10.0, 10.0]);
        assert_eq!(lr, 1.0);
        assert_eq!(d.iter().map(|x| x.stop).collect::<Vec<_>>(), vec![false, false, false, true]);

        // measured against the running best, not the previous epoch
        let (d, _) = replay(&[10.0, 12.0, 11.0, 10.5]);
        assert!(d[3].stop);
    }

    #[test]
    fn schedule_hard_cap() {
        let mut s = Schedule::new(3, 5);
        let mut o = OptState::new(&ParamStore::new(), 1.0);
        let stops: Vec<bool> = (0..5).map(|k| schedule_update(&mut s, 10.0 - k as f64, &mut o).stop).collect();
        assert_eq!(stops, vec![false, false, false, false, true]);
    }

    #[test]
    fn noise_is_fresh_each_epoch() {
        let seq = |epoch| (0..50).map(|i| noise_spec(3, epoch, i, 24)).collect::<Vec<_>>();
        let (a, b) = (seq(1), seq(2));
        assert_ne!(a, b);
        assert!(a.iter().zip(&b).filter(|(x, y)| x == y).count() == 0);
        assert_eq!(seq(1), a);
    }

    #[test]
    fn selection_rules() {
        let c = |cer, g, l| Candidate {
            scheme: TrainScheme::new(SchemeKind::IrlC).with_weights(g, l),
            seed: 0,
            dev_other_cer: cer,
            best_epoch: 1,
            dir: None,
        };
        assert!(better(&c(0.1, 1.0, 1.0), &c(0.2, 0.0, 0.0)));
        assert!(better(&c(0.1, 0.01, 0.01), &c(0.1, 0.1, 0.01)));
        assert!(!better(&c(0.1, 0.1, 0.01), &c(0.1, 0.01, 0.01)));
        assert!(search_axes(SchemeKind::Baseline).is_empty());
        assert_eq!(search_axes(SchemeKind::IrlC).len(), 3);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.batch_size = 0;
        assert!(c.validate().is_err());
        let c = TrainConfig {
            clip_norm: Some(0.0),
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
