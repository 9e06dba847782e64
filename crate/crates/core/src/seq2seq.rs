//! Attention encoder-decoder over MFCC frames with representation taps.
//!
//! Encoder: the first BLSTM reads pairs of adjacent frames (halving the
//! sequence), a second BLSTM follows, then two unidirectional LSTMs of width
//! `hidden`. Decoder: learned token embeddings, dot-product attention whose
//! query is the previous top decoder state projected to the encoder width,
//! a stack of LSTMs with the attention context appended to the first layer's
//! input, and a linear output layer.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, ParamId, ParamStore, Tensor, Var};
use crate::features::{FeatureConfig, FeatureMatrix, FeatureStats};
use crate::seed::{self, ns};
use crate::synthcorpus::Vocab;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input too short: {0}")]
    TooShort(&'static str),
    #[error("token {0} is outside the vocabulary of size {1}")]
    Vocab(usize, usize),
    #[error("feature dimension {got} does not match model input {expected}")]
    InputDim { got: usize, expected: usize },
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: usize,
    pub enc_blstm_layers: usize,
    pub enc_lstm_layers: usize,
    pub dec_lstm_layers: usize,
    pub vocab: Vocab,
    pub num_coeffs: usize,
}

impl ModelConfig {
    pub fn new(hidden: usize, vocab: Vocab, num_coeffs: usize) -> Self {
        Self {
            hidden,
            enc_blstm_layers: 2,
            enc_lstm_layers: 2,
            dec_lstm_layers: 4,
            vocab,
            num_coeffs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(ModelError::Config("hidden must be at least 1".into()));
        }
        if self.enc_blstm_layers == 0 || self.dec_lstm_layers == 0 || self.num_coeffs == 0 {
            return Err(ModelError::Config(
                "need at least one BLSTM layer, one decoder layer and one input coefficient".into(),
            ));
        }
        Ok(())
    }

    /// Width of each encoder output state.
    pub fn enc_out_dim(&self) -> usize {
        if self.enc_lstm_layers > 0 {
            self.hidden
        } else {
            2 * self.hidden
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.size()
    }
}

/// Diagonal input-to-cell weight added to stacked square LSTM layers at init.
pub const PASS_GAIN: f64 = 1.5;
/// Input and output gate bias of those layers at init.
pub const PASS_GATE_BIAS: f64 = 3.0;
/// Forget gate bias of those layers at init.
pub const PASS_FORGET_BIAS: f64 = -2.0;

/// Weights of one LSTM: `w` is `[(input + hidden) × 4·hidden]` with gate
/// blocks ordered input, forget, cell, output; `b` is `[1 × 4·hidden]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LstmParams {
    pub w: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    blstm: Vec<(LstmParams, LstmParams)>,
    enc_lstm: Vec<LstmParams>,
    embed: ParamId,
    query: ParamId,
    dec: Vec<LstmParams>,
    out_w: ParamId,
    out_b: ParamId,
}

fn add_lstm(store: &mut ParamStore, name: &str, input: usize, hidden: usize) -> LstmParams {
    let w = store.add(
        format!("{name}.w"),
        Tensor::zeros(&[input + hidden, 4 * hidden]),
        true,
    );
    let b = store.add(format!("{name}.b"), Tensor::zeros(&[1, 4 * hidden]), false);
    LstmParams { w, b, hidden }
}

/// Parameters for the given config, all zero.
fn build_layout(cfg: &ModelConfig) -> (ParamStore, Layout) {
    let h = cfg.hidden;
    let mut s = ParamStore::new();
    let mut blstm = Vec::new();
    let mut input = 2 * cfg.num_coeffs;
    for l in 0..cfg.enc_blstm_layers {
        let f = add_lstm(&mut s, &format!("enc.blstm{l}.fwd"), input, h);
        let b = add_lstm(&mut s, &format!("enc.blstm{l}.bwd"), input, h);
        blstm.push((f, b));
        input = 2 * h;
    }
    let mut enc_lstm = Vec::new();
    for l in 0..cfg.enc_lstm_layers {
        enc_lstm.push(add_lstm(&mut s, &format!("enc.lstm{l}"), input, h));
        input = h;
    }
    let enc_dim = cfg.enc_out_dim();
    let c = cfg.vocab_size();
    let embed = s.add("dec.embed", Tensor::zeros(&[c, h]), true);
    let query = s.add("dec.attn.query", Tensor::zeros(&[h, enc_dim]), true);
    let mut dec = Vec::new();
    let mut input = h + enc_dim;
    for l in 0..cfg.dec_lstm_layers {
        dec.push(add_lstm(&mut s, &format!("dec.lstm{l}"), input, h));
        input = h;
    }
    let out_w = s.add("dec.out.w", Tensor::zeros(&[h, c]), true);
    let out_b = s.add("dec.out.b", Tensor::zeros(&[1, c]), false);
    (
        s,
        Layout {
            blstm,
            enc_lstm,
            embed,
            query,
            dec,
            out_w,
            out_b,
        },
    )
}

/// Parameters of the model bound into one graph. Binding once and running
/// several passes through the same binding shares weights across passes.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Runs one LSTM over `xs` (each `[1 × in]`). With `reverse`, processes
/// right to left; outputs stay aligned with the inputs.
pub fn run_lstm(g: &mut Graph, b: &Bound, p: &LstmParams, xs: &[Var], reverse: bool) -> Result<Vec<Var>> {
    let hsz = p.hidden;
    let w = b.var(p.w);
    let bias = b.var(p.b);
    let mut h = g.constant(Tensor::zeros(&[1, hsz]));
    let mut c = g.constant(Tensor::zeros(&[1, hsz]));
    let mut out = vec![h; xs.len()];
    let order: Vec<usize> = if reverse {
        (0..xs.len()).rev().collect()
    } else {
        (0..xs.len()).collect()
    };
    for t in order {
        let (nh, nc) = lstm_cell(g, w, bias, hsz, xs[t], h, c)?;
        h = nh;
        c = nc;
        out[t] = h;
    }
    Ok(out)
}

/// One LSTM step. Returns the new (hidden, cell) pair.
pub fn lstm_cell(g: &mut Graph, w: Var, bias: Var, hsz: usize, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
    let hc = g.lstm_cell(x, h, c, w, bias)?;
    Ok((g.slice(hc, 1, 0, hsz)?, g.slice(hc, 1, hsz, hsz)?))
}

/// Bidirectional layer: per step, forward and backward states concatenated.
pub fn run_blstm(g: &mut Graph, b: &Bound, fwd: &LstmParams, bwd: &LstmParams, xs: &[Var]) -> Result<Vec<Var>> {
    let f = run_lstm(g, b, fwd, xs, false)?;
    let r = run_lstm(g, b, bwd, xs, true)?;
    f.iter().zip(&r).map(|(a, c)| Ok(g.concat(&[*a, *c], 1)?)).collect()
}

/// Adjacent frames concatenated along the feature axis; an odd final frame is
/// paired with zeros. Returns `ceil(T/2)` rows of width `2 × coeffs`.
pub fn pair_frames(f: &FeatureMatrix) -> Vec<Vec<f64>> {
    let k = f.num_coeffs();
    (0..f.num_frames().div_ceil(2))
        .map(|t| {
            let mut row = f.frame(2 * t).to_vec();
            if 2 * t + 1 < f.num_frames() {
                row.extend_from_slice(f.frame(2 * t + 1));
            } else {
                row.extend(std::iter::repeat(0.0).take(k));
            }
            row
        })
        .collect()
}

/// Encoder output for one utterance.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub states: Vec<Var>,
    /// `[T₁ × enc_dim]`
    pub matrix: Var,
    /// `[enc_dim × T₁]`
    pub matrix_t: Var,
}

/// Recurrent decoder state between steps.
#[derive(Debug, Clone)]
pub struct DecoderState {
    pub h: Vec<Var>,
    pub c: Vec<Var>,
}

impl DecoderState {
    /// Top layer's hidden state, used as the next attention query.
    pub fn top(&self) -> Var {
        *self.h.last().expect("decoder has layers")
    }
}

/// Output of one decoder step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    /// `[1 × C]` pre-softmax scores.
    pub logits: Var,
    /// `[1 × T₁]` attention weights.
    pub attention: Var,
    pub state: DecoderState,
}

/// Representations captured during one teacher-forced pass, each flattened
/// into a single vector concatenated across its own time axis.
#[derive(Debug, Clone)]
pub struct RepresentationTaps {
    pub phi_e: Var,
    pub phi_dec: Vec<Var>,
    pub logits: Var,
}

/// Layer names in tap order.
pub fn tap_names(dec_layers: usize) -> Vec<String> {
    let mut v = vec!["enc".to_string()];
    v.extend((1..=dec_layers).map(|l| format!("dec{l}")));
    v.push("logits".into());
    v
}

impl RepresentationTaps {
    /// Taps in order: encoder, decoder layers, logits.
    pub fn layers(&self) -> Vec<Var> {
        let mut v = vec![self.phi_e];
        v.extend_from_slice(&self.phi_dec);
        v.push(self.logits);
        v
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[T₂ × C]`
    pub logits: Var,
    pub taps: RepresentationTaps,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Seq2Seq {
    cfg: ModelConfig,
    params: ParamStore,
    layout: Layout,
}

impl Seq2Seq {
    /// Randomly initialised model: LSTM and projection weights uniform in
    /// ±1/√hidden, embeddings uniform in ±0.1, forget-gate biases 1.
    pub fn new(cfg: ModelConfig, seed_v: u64) -> Result<Self> {
        cfg.validate()?;
        let (mut params, layout) = build_layout(&cfg);
        let mut r = seed::rng(seed_v, &[ns::INIT]);
        let k = 1.0 / (cfg.hidden as f64).sqrt();
        let forget: Vec<ParamId> = layout
            .blstm
            .iter()
            .flat_map(|(a, b)| [a.b, b.b])
            .chain(layout.enc_lstm.iter().map(|p| p.b))
            .chain(layout.dec.iter().map(|p| p.b))
            .collect();
        let h = cfg.hidden;
        for id in params.ids().collect::<Vec<_>>() {
            let p = params.get_mut(id);
            if forget.contains(&id) {
                for v in &mut p.value.data_mut()[h..2 * h] {
                    *v = 1.0;
                }
            } else if id == layout.embed {
                p.value.data_mut().iter_mut().for_each(|v| *v = r.gen_range(-0.1..0.1));
            } else if p.is_weight {
                p.value.data_mut().iter_mut().for_each(|v| *v = r.gen_range(-k..k));
            }
        }
        // Stacked square layers start near pass-through so depth does not
        // swamp the attention signal early in training.
        let stacked = layout.dec.iter().skip(1).chain(layout.enc_lstm.iter().skip(1));
        for p in stacked {
            let cols = 4 * h;
            let w = params.get_mut(p.w).value.data_mut();
            for j in 0..h {
                w[j * cols + 2 * h + j] += PASS_GAIN;
            }
            let bias = params.get_mut(p.b).value.data_mut();
            for j in 0..h {
                bias[j] = PASS_GATE_BIAS;
                bias[h + j] = PASS_FORGET_BIAS;
                bias[3 * h + j] = PASS_GATE_BIAS;
            }
        }
        Ok(Self { cfg, params, layout })
    }

    /// Every parameter zero (uniform output distribution).
    pub fn zeros(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let (params, layout) = build_layout(&cfg);
        Ok(Self { cfg, params, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Binds all parameters as tracked leaves.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self.params.ids().map(|id| g.param(&self.params, id)).collect(),
        }
    }

    /// Binds all parameters as constants (inference).
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self.params.ids().map(|id| g.param_frozen(&self.params, id)).collect(),
        }
    }

    pub fn encode(&self, g: &mut Graph, b: &Bound, feats: &FeatureMatrix) -> Result<Encoded> {
        if feats.num_frames() == 0 {
            return Err(ModelError::TooShort("no feature frames"));
        }
        if feats.num_coeffs() != self.cfg.num_coeffs {
            return Err(ModelError::InputDim {
                got: feats.num_coeffs(),
                expected: self.cfg.num_coeffs,
            });
        }
        let mut xs: Vec<Var> = pair_frames(feats).into_iter().map(|r| g.constant(Tensor::row(r))).collect();
        for (f, bw) in &self.layout.blstm {
            xs = run_blstm(g, b, f, bw, &xs)?;
        }
        for p in &self.layout.enc_lstm {
            xs = run_lstm(g, b, p, &xs, false)?;
        }
        let matrix = g.concat(&xs, 0)?;
        let matrix_t = g.transpose(matrix)?;
        Ok(Encoded {
            states: xs,
            matrix,
            matrix_t,
        })
    }

    pub fn initial_state(&self, g: &mut Graph) -> DecoderState {
        let h = self.cfg.hidden;
        let n = self.cfg.dec_lstm_layers;
        DecoderState {
            h: (0..n).map(|_| g.constant(Tensor::zeros(&[1, h]))).collect(),
            c: (0..n).map(|_| g.constant(Tensor::zeros(&[1, h]))).collect(),
        }
    }

    /// Dot-product attention of `query` (`[1 × d]`) over the encoder states.
    /// Returns (context `[1 × d]`, weights `[1 × T₁]`).
    pub fn attend(g: &mut Graph, query: Var, enc: &Encoded) -> Result<(Var, Var)> {
        let scores = g.matmul(query, enc.matrix_t)?;
        let w = g.softmax(scores, 1)?;
        let ctx = g.matmul(w, enc.matrix)?;
        Ok((ctx, w))
    }

    /// Consumes `token` and advances the decoder one step.
    pub fn decode_step(
        &self,
        g: &mut Graph,
        b: &Bound,
        enc: &Encoded,
        state: &DecoderState,
        token: usize,
    ) -> Result<StepOutput> {
        let c = self.cfg.vocab_size();
        if token >= c {
            return Err(ModelError::Vocab(token, c));
        }
        let q = g.matmul(state.top(), b.var(self.layout.query))?;
        let (ctx, attention) = Self::attend(g, q, enc)?;
        let emb = g.slice(b.var(self.layout.embed), 0, token, 1)?;
        let mut x = g.concat(&[emb, ctx], 1)?;
        let mut h = Vec::with_capacity(self.layout.dec.len());
        let mut cs = Vec::with_capacity(self.layout.dec.len());
        for (l, p) in self.layout.dec.iter().enumerate() {
            let (nh, nc) = lstm_cell(g, b.var(p.w), b.var(p.b), p.hidden, x, state.h[l], state.c[l])?;
            h.push(nh);
            cs.push(nc);
            x = nh;
        }
        let logits = g.matmul(x, b.var(self.layout.out_w))?;
        let logits = g.add(logits, b.var(self.layout.out_b))?;
        Ok(StepOutput {
            logits,
            attention,
            state: DecoderState { h, c: cs },
        })
    }

    /// Teacher-forced pass: `input` is the decoder input sequence starting
    /// with ⟨sos⟩. Produces `[len(input) × C]` logits and the taps.
    pub fn forward_teacher_forced(
        &self,
        g: &mut Graph,
        b: &Bound,
        feats: &FeatureMatrix,
        input: &[usize],
    ) -> Result<ForwardOutput> {
        if input.is_empty() {
            return Err(ModelError::TooShort("empty decoder input"));
        }
        let c = self.cfg.vocab_size();
        if let Some(&bad) = input.iter().find(|&&t| t >= c) {
            return Err(ModelError::Vocab(bad, c));
        }
        let enc = self.encode(g, b, feats)?;
        let mut state = self.initial_state(g);
        let layers = self.cfg.dec_lstm_layers;
        let mut per_layer: Vec<Vec<Var>> = vec![Vec::with_capacity(input.len()); layers];
        let mut logits = Vec::with_capacity(input.len());
        for &tok in input {
            let step = self.decode_step(g, b, &enc, &state, tok)?;
            for (l, hv) in step.state.h.iter().enumerate() {
                per_layer[l].push(*hv);
            }
            logits.push(step.logits);
            state = step.state;
        }
        let logits = g.concat(&logits, 0)?;
        let phi_e = g.flatten(enc.matrix);
        let mut phi_dec = Vec::with_capacity(layers);
        for hs in &per_layer {
            let m = g.concat(hs, 0)?;
            phi_dec.push(g.flatten(m));
        }
        let logits_flat = g.flatten(logits);
        Ok(ForwardOutput {
            logits,
            taps: RepresentationTaps {
                phi_e,
                phi_dec,
                logits: logits_flat,
            },
        })
    }

    /// Bound weight matrices (biases excluded).
    pub fn weight_vars(&self, b: &Bound) -> Vec<Var> {
        self.params.iter().zip(&b.vars).filter(|(p, _)| p.is_weight).map(|(_, &v)| v).collect()
    }

    /// Names and shapes of every parameter, in storage order.
    pub fn signature(&self) -> Vec<(String, Vec<usize>)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.shape().to_vec()))
            .collect()
    }
}

const CKPT_MAGIC: &[u8; 8] = b"IRLCKPT\0";
pub const CKPT_VERSION: u32 = 1;

/// Metadata stored with every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub model: ModelConfig,
    pub config_hash: String,
    /// Manifest hash of the corpus the model was trained on.
    pub corpus_hash: String,
    pub features: Option<FeatureConfig>,
    pub feature_stats: Option<FeatureStats>,
    pub epoch: usize,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

/// Serialises `params` with `meta`: magic, version, JSON metadata, then the
/// named parameter list (name, shape, little-endian f64 data).
pub fn encode_checkpoint(meta: &CheckpointMeta, params: &ParamStore) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    put_u32(&mut buf, CKPT_VERSION);
    let json = serde_json::to_vec(meta)?;
    put_u32(&mut buf, json.len() as u32);
    buf.extend_from_slice(&json);
    put_u32(&mut buf, params.len() as u32);
    for p in params.iter() {
        put_u32(&mut buf, p.name.len() as u32);
        buf.extend_from_slice(p.name.as_bytes());
        put_u32(&mut buf, p.value.shape().len() as u32);
        for &d in p.value.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(ModelError::IncompatibleCheckpoint("truncated file".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parses a checkpoint, rebuilding the model and validating every parameter
/// name and shape against the stored config.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(CheckpointMeta, Seq2Seq)> {
    let mut c = Cursor { data: bytes, pos: 0 };
    if c.take(8)? != CKPT_MAGIC {
        return Err(ModelError::IncompatibleCheckpoint("bad magic".into()));
    }
    let version = c.u32()?;
    if version != CKPT_VERSION {
        return Err(ModelError::IncompatibleCheckpoint(format!("unsupported version {version}")));
    }
    let n = c.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(c.take(n)?)?;
    let mut model = Seq2Seq::zeros(meta.model.clone())?;
    let count = c.u32()? as usize;
    if count != model.params.len() {
        return Err(ModelError::IncompatibleCheckpoint(format!(
            "{} parameters stored, config implies {}",
            count,
            model.params.len()
        )));
    }
    for id in model.params.ids().collect::<Vec<_>>() {
        let nl = c.u32()? as usize;
        let name = String::from_utf8_lossy(c.take(nl)?).into_owned();
        let nd = c.u32()? as usize;
        let shape = (0..nd).map(|_| c.u64().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let p = model.params.get_mut(id);
        if name != p.name || shape != p.value.shape() {
            return Err(ModelError::IncompatibleCheckpoint(format!(
                "parameter {name} {shape:?} does not match expected {} {:?}",
                p.name,
                p.value.shape()
            )));
        }
        for v in p.value.data_mut() {
            *v = f64::from_le_bytes(c.take(8)?.try_into().unwrap());
        }
    }
    if c.pos != bytes.len() {
        return Err(ModelError::IncompatibleCheckpoint("trailing bytes".into()));
    }
    Ok((meta, model))
}

/// Writes a checkpoint atomically (temporary file, then rename).
pub fn save_checkpoint(path: &Path, meta: &CheckpointMeta, model: &Seq2Seq) -> Result<()> {
    let bytes = encode_checkpoint(meta, model.params())?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointMeta, Seq2Seq)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes)
}
