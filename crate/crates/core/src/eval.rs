//! Decoding, character error rate, clean/noisy distance profiles and the
//! out-of-domain perturbation suite.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Graph;
use crate::features::{FeatureError, FeatureMatrix, FeaturePipeline};
use crate::seed::{self, ns};
use crate::seq2seq::{tap_names, Bound, DecoderState, Encoded, ModelError, Seq2Seq};
use crate::signal::{self, NoiseSpec, SignalError, Waveform};
use crate::synthcorpus::{Corpus, NoiseBank, Split, Vocab, EOS, SOS};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("reference transcript is empty")]
    DegenerateReference,
    #[error("beam width must be at least 1")]
    Width,
    #[error("evaluation set is empty")]
    EmptySet,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Autodiff(#[from] crate::autodiff::AutodiffError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

pub const DEFAULT_BEAM: usize = 10;

/// A decoded token sequence (⟨eos⟩ excluded) with its total log-probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    /// Whether decoding stopped on ⟨eos⟩ rather than the length limit.
    pub finished: bool,
}

impl Hypothesis {
    pub fn text(&self, vocab: &Vocab) -> String {
        vocab.decode(&self.tokens)
    }
}

/// Anything that yields next-token log-probabilities given a state.
pub trait StepDecoder {
    type State: Clone;

    fn vocab_size(&self) -> usize;
    fn initial(&mut self) -> Self::State;
    /// Consumes `token`; returns log-probabilities of the next token and the
    /// new state.
    fn step(&mut self, state: &Self::State, token: usize) -> Result<(Vec<f64>, Self::State)>;
}

/// Length-synchronous beam search. Every live hypothesis is expanded by
/// every token; the `width` best expansions by total log-probability
/// survive; those ending in `eos` are finalised. Hypotheses still live at
/// `max_len` are finalised as they stand. No length normalisation.
pub fn beam_search<D: StepDecoder>(d: &mut D, width: usize, max_len: usize, sos: usize, eos: usize) -> Result<Hypothesis> {
    if width == 0 {
        return Err(EvalError::Width);
    }
    let c = d.vocab_size();
    let init = d.initial();
    // (tokens, log_prob, state, last token)
    let mut live: Vec<(Vec<usize>, f64, D::State, usize)> = vec![(Vec::new(), 0.0, init, sos)];
    let mut done: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        if live.is_empty() {
            break;
        }
        let mut cand: Vec<(usize, usize, f64)> = Vec::with_capacity(live.len() * c);
        let mut next_states = Vec::with_capacity(live.len());
        for (bi, (_, lp, st, last)) in live.iter().enumerate() {
            let (logp, ns_) = d.step(st, *last)?;
            for (tok, &l) in logp.iter().enumerate() {
                cand.push((bi, tok, lp + l));
            }
            next_states.push(ns_);
        }
        // stable: ties keep the earlier beam, then the lower token
        cand.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap_or(std::cmp::Ordering::Equal));
        cand.truncate(width);
        let mut next = Vec::with_capacity(width);
        for (bi, tok, score) in cand {
            if tok == eos {
                done.push(Hypothesis {
                    tokens: live[bi].0.clone(),
                    log_prob: score,
                    finished: true,
                });
            } else {
                let mut t = live[bi].0.clone();
                t.push(tok);
                next.push((t, score, next_states[bi].clone(), tok));
            }
        }
        live = next;
    }
    done.extend(live.into_iter().map(|(tokens, log_prob, _, _)| Hypothesis {
        tokens,
        log_prob,
        finished: false,
    }));
    let mut best: Option<Hypothesis> = None;
    for h in done {
        if best.as_ref().is_none_or(|b| h.log_prob > b.log_prob) {
            best = Some(h);
        }
    }
    Ok(best.unwrap_or(Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    }))
}

/// Picks the most probable token at every step (lowest index on ties).
pub fn greedy<D: StepDecoder>(d: &mut D, max_len: usize, sos: usize, eos: usize) -> Result<Hypothesis> {
    let mut st = d.initial();
    let mut last = sos;
    let mut tokens = Vec::new();
    let mut total = 0.0;
    for _ in 0..max_len {
        let (lp, next) = d.step(&st, last)?;
        let mut best = 0;
        for (k, &v) in lp.iter().enumerate() {
            if v > lp[best] {
                best = k;
            }
        }
        total += lp[best];
        if best == eos {
            return Ok(Hypothesis {
                tokens,
                log_prob: total,
                finished: true,
            });
        }
        tokens.push(best);
        last = best;
        st = next;
    }
    Ok(Hypothesis {
        tokens,
        log_prob: total,
        finished: false,
    })
}

/// Step decoder over a trained model for one utterance.
pub struct ModelDecoder<'m> {
    model: &'m Seq2Seq,
    graph: Graph,
    bound: Bound,
    enc: Encoded,
}

impl<'m> ModelDecoder<'m> {
    pub fn new(model: &'m Seq2Seq, feats: &FeatureMatrix) -> Result<Self> {
        let mut graph = Graph::new();
        let bound = model.bind_frozen(&mut graph);
        let enc = model.encode(&mut graph, &bound, feats)?;
        Ok(Self {
            model,
            graph,
            bound,
            enc,
        })
    }
}

impl StepDecoder for ModelDecoder<'_> {
    type State = DecoderState;

    fn vocab_size(&self) -> usize {
        self.model.config().vocab_size()
    }

    fn initial(&mut self) -> DecoderState {
        self.model.initial_state(&mut self.graph)
    }

    fn step(&mut self, state: &DecoderState, token: usize) -> Result<(Vec<f64>, DecoderState)> {
        let out = self.model.decode_step(&mut self.graph, &self.bound, &self.enc, state, token)?;
        let lp = self.graph.log_softmax(out.logits, 1)?;
        Ok((self.graph.data(lp).to_vec(), out.state))
    }
}

/// Decodes one utterance. `width = 1` uses the greedy decoder.
pub fn decode(model: &Seq2Seq, feats: &FeatureMatrix, width: usize, max_len: usize) -> Result<Hypothesis> {
    let mut d = ModelDecoder::new(model, feats)?;
    if width == 1 {
        greedy(&mut d, max_len, SOS, EOS)
    } else {
        beam_search(&mut d, width, max_len, SOS, EOS)
    }
}

/// Unit-cost Levenshtein distance over characters.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance divided by the reference length.
pub fn cer(hyp: &str, reference: &str) -> Result<f64> {
    let n = reference.chars().count();
    if n == 0 {
        return Err(EvalError::DegenerateReference);
    }
    Ok(edit_distance(hyp, reference) as f64 / n as f64)
}

/// Pooled error rate: total edits over total reference characters.
pub fn corpus_cer<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<f64> {
    let (mut e, mut n) = (0usize, 0usize);
    for (h, r) in pairs {
        let len = r.chars().count();
        if len == 0 {
            return Err(EvalError::DegenerateReference);
        }
        e += edit_distance(h, r);
        n += len;
    }
    if n == 0 {
        return Err(EvalError::EmptySet);
    }
    Ok(e as f64 / n as f64)
}

/// Mean clean/noisy distance per tapped layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceProfile {
    pub layers: Vec<String>,
    pub l2: Vec<f64>,
    pub cosine: Vec<f64>,
    pub pairs: usize,
}

fn l2_and_cos(a: &[f64], b: &[f64]) -> (f64, f64) {
    let d = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let cos = if na == 0.0 || nb == 0.0 {
        if d == 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        (a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)).clamp(-1.0, 1.0)
    };
    (d, cos)
}

/// One clean/noisy pair with its decoder input.
#[derive(Debug, Clone)]
pub struct FeaturePair {
    pub clean: FeatureMatrix,
    pub noisy: FeatureMatrix,
    pub input: Vec<usize>,
}

/// Teacher-forced taps of both members of every pair; per-layer mean L2
/// distance and cosine similarity.
pub fn distance_profile(model: &Seq2Seq, pairs: &[FeaturePair]) -> Result<DistanceProfile> {
    if pairs.is_empty() {
        return Err(EvalError::EmptySet);
    }
    let per: Vec<Result<Vec<(f64, f64)>>> = pairs
        .par_iter()
        .map(|p| {
            let mut g = Graph::new();
            let b = model.bind_frozen(&mut g);
            let c = model.forward_teacher_forced(&mut g, &b, &p.clean, &p.input)?;
            let n = model.forward_teacher_forced(&mut g, &b, &p.noisy, &p.input)?;
            Ok(c.taps
                .layers()
                .iter()
                .zip(n.taps.layers())
                .map(|(&x, y)| l2_and_cos(g.data(x), g.data(y)))
                .collect())
        })
        .collect();
    let layers = tap_names(model.config().dec_lstm_layers);
    let mut l2 = vec![0.0; layers.len()];
    let mut cosine = vec![0.0; layers.len()];
    for r in per {
        for (k, (d, c)) in r?.into_iter().enumerate() {
            l2[k] += d;
            cosine[k] += c;
        }
    }
    let n = pairs.len() as f64;
    l2.iter_mut().for_each(|v| *v /= n);
    cosine.iter_mut().for_each(|v| *v /= n);
    Ok(DistanceProfile {
        layers,
        l2,
        cosine,
        pairs: pairs.len(),
    })
}

/// Mean L2 norm of the concatenated encoder output over a set of inputs.
pub fn encoder_norm(model: &Seq2Seq, feats: &[FeatureMatrix]) -> Result<f64> {
    if feats.is_empty() {
        return Err(EvalError::EmptySet);
    }
    let norms: Vec<Result<f64>> = feats
        .par_iter()
        .map(|f| {
            let mut g = Graph::new();
            let b = model.bind_frozen(&mut g);
            let e = model.encode(&mut g, &b, f)?;
            Ok(g.data(e.matrix).iter().map(|v| v * v).sum::<f64>().sqrt())
        })
        .collect();
    let mut s = 0.0;
    for n in norms {
        s += n?;
    }
    Ok(s / feats.len() as f64)
}

/// One evaluation perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Condition {
    Clean,
    /// Additive noise from the training bank at a fixed SNR.
    InDomain { snr_db: f64 },
    /// Synthetic room impulse response.
    Reverb { rt60: f64 },
    /// Held-out speech at a fixed SNR.
    Speech { snr_db: f64 },
    Volume { gain_db: f64 },
    Telephony,
}

impl Condition {
    pub fn label(&self) -> String {
        match self {
            Condition::Clean => "clean".into(),
            Condition::InDomain { snr_db } => format!("in-domain-{snr_db}db"),
            Condition::Reverb { rt60 } => format!("reverb-rt60-{rt60}s"),
            Condition::Speech { snr_db } => format!("speech-{snr_db}db"),
            Condition::Volume { gain_db } => format!("volume{gain_db:+}db"),
            Condition::Telephony => "telephony".into(),
        }
    }
}

/// Clean, in-domain noise at 6 and 12 dB, reverberation at RT60 0.2 and
/// 0.5 s, held-out speech at 6 and 12 dB, volume ±6 dB and telephony.
pub fn ood_conditions() -> Vec<Condition> {
    vec![
        Condition::Clean,
        Condition::InDomain { snr_db: 6.0 },
        Condition::InDomain { snr_db: 12.0 },
        Condition::Reverb { rt60: 0.2 },
        Condition::Reverb { rt60: 0.5 },
        Condition::Speech { snr_db: 6.0 },
        Condition::Speech { snr_db: 12.0 },
        Condition::Volume { gain_db: 6.0 },
        Condition::Volume { gain_db: -6.0 },
        Condition::Telephony,
    ]
}

/// Exponentially decaying white-noise impulse response with a unit direct
/// path: amplitude falls by 60 dB over `rt60` seconds.
pub fn synthetic_rir<R: Rng + ?Sized>(rt60: f64, sample_rate: u32, rng: &mut R) -> Result<Waveform> {
    let n = ((rt60 * sample_rate as f64).ceil() as usize).max(2);
    let decay = 3.0 * std::f64::consts::LN_10 / (rt60 * sample_rate as f64);
    let mut h = Vec::with_capacity(n);
    h.push(1.0);
    for i in 1..n {
        let w: f64 = StandardNormal.sample(rng);
        h.push(0.3 * w * (-decay * i as f64).exp());
    }
    Ok(Waveform::new(h, sample_rate)?)
}

impl Condition {
    /// Stable stream id for this condition's random draws (FNV-1a of the label).
    pub fn stream(&self) -> u64 {
        self.label()
            .bytes()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
    }
}

/// Applies `cond` to utterance `index`. Random choices come from the
/// evaluation seed namespace only, so every model sees identical inputs.
pub fn perturb(cond: &Condition, index: usize, w: &Waveform, bank: &NoiseBank, eval_seed: u64) -> Result<Waveform> {
    let mut r = seed::rng(eval_seed, &[ns::EVAL, cond.stream(), index as u64]);
    Ok(match *cond {
        Condition::Clean => w.clone(),
        Condition::InDomain { snr_db } => {
            let spec = NoiseSpec {
                snr_db,
                shift_ms: r.gen_range(0.0..=signal::MAX_SHIFT_MS),
                noise_id: r.gen_range(0..bank.num_train()),
            };
            signal::mix_at_snr(w, bank.train_track(spec.noise_id), &spec)?
        }
        Condition::Speech { snr_db } => {
            let spec = NoiseSpec {
                snr_db,
                shift_ms: r.gen_range(0.0..=signal::MAX_SHIFT_MS),
                noise_id: r.gen_range(0..bank.num_held_out()),
            };
            signal::mix_at_snr(w, bank.held_out_track(spec.noise_id), &spec)?
        }
        Condition::Reverb { rt60 } => {
            let rir = synthetic_rir(rt60, w.sample_rate(), &mut r)?;
            let keep = rir.len().min(w.len());
            let rir = Waveform::new(rir.samples()[..keep].to_vec(), w.sample_rate())?;
            signal::convolve_rir(w, &rir)?
        }
        Condition::Volume { gain_db } => signal::scale_volume(w, gain_db),
        Condition::Telephony => signal::telephony(w)?,
    })
}

/// An utterance to evaluate.
#[derive(Debug, Clone)]
pub struct EvalItem {
    pub id: String,
    pub audio: Waveform,
    pub transcript: String,
}

/// Every utterance of the given splits, in corpus order.
pub fn eval_items(corpus: &Corpus, splits: &[Split]) -> Vec<EvalItem> {
    splits
        .iter()
        .flat_map(|&s| corpus.split(s))
        .map(|u| EvalItem {
            id: u.id.clone(),
            audio: u.audio.clone(),
            transcript: u.transcript.clone(),
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct DecodeOptions {
    pub width: usize,
    pub max_len: usize,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            width: DEFAULT_BEAM,
            max_len: 30,
        }
    }
}

/// Per-utterance decoding result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoded {
    pub id: String,
    pub hypothesis: String,
    pub reference: String,
}

/// Decodes every feature matrix in parallel.
pub fn decode_all(model: &Seq2Seq, feats: &[FeatureMatrix], opts: DecodeOptions) -> Result<Vec<Hypothesis>> {
    feats.par_iter().map(|f| decode(model, f, opts.width, opts.max_len)).collect()
}

/// Decodes one condition; returns the pooled CER and per-utterance output.
pub fn evaluate_condition(
    model: &Seq2Seq,
    pipeline: &FeaturePipeline,
    items: &[EvalItem],
    cond: &Condition,
    bank: &NoiseBank,
    eval_seed: u64,
    opts: DecodeOptions,
) -> Result<(f64, Vec<Decoded>)> {
    if items.is_empty() {
        return Err(EvalError::EmptySet);
    }
    let vocab = &model.config().vocab;
    let out: Vec<Result<Decoded>> = items
        .par_iter()
        .enumerate()
        .map(|(i, it)| {
            let w = perturb(cond, i, &it.audio, bank, eval_seed)?;
            let f = pipeline.extract(&w)?;
            let h = decode(model, &f, opts.width, opts.max_len)?;
            Ok(Decoded {
                id: it.id.clone(),
                hypothesis: h.text(vocab),
                reference: it.transcript.clone(),
            })
        })
        .collect();
    let out = out.into_iter().collect::<Result<Vec<_>>>()?;
    let c = corpus_cer(out.iter().map(|d| (d.hypothesis.as_str(), d.reference.as_str())))?;
    Ok((c, out))
}

/// CER per condition for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub model: String,
    pub conditions: Vec<String>,
    pub cer: Vec<f64>,
}

impl SuiteResult {
    pub fn get(&self, label: &str) -> Option<f64> {
        self.conditions.iter().position(|c| c == label).map(|i| self.cer[i])
    }
}

/// Runs every condition.
pub fn ood_suite(
    name: &str,
    model: &Seq2Seq,
    pipeline: &FeaturePipeline,
    items: &[EvalItem],
    conds: &[Condition],
    bank: &NoiseBank,
    eval_seed: u64,
    opts: DecodeOptions,
) -> Result<SuiteResult> {
    let mut cer = Vec::with_capacity(conds.len());
    for c in conds {
        cer.push(evaluate_condition(model, pipeline, items, c, bank, eval_seed, opts)?.0);
    }
    Ok(SuiteResult {
        model: name.to_string(),
        conditions: conds.iter().map(Condition::label).collect(),
        cer,
    })
}

/// Tab-separated table: one row per condition, one column per model.
pub fn cer_table_tsv(results: &[SuiteResult]) -> String {
    let mut s = String::from("condition");
    for r in results {
        s.push('\t');
        s.push_str(&r.model);
    }
    s.push('\n');
    if let Some(first) = results.first() {
        for (i, c) in first.conditions.iter().enumerate() {
            s.push_str(c);
            for r in results {
                let _ = write!(s, "\t{:.4}", r.cer[i]);
            }
            s.push('\n');
        }
    }
    s
}
