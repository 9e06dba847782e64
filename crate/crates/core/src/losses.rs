//! Training objectives: cross-entropy, the pairing penalty and its
//! placements (encoder only, every tapped layer, logits only), adversarial
//! domain classification, weight decay and activation shrinkage.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Gradients, Graph, ParamId, ParamStore, Tensor, Var};
use crate::seed;
use crate::seq2seq::ForwardOutput;
use crate::synthcorpus::PAD;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("tap error: {0}")]
    Tap(String),
    #[error("logits have {logits} steps but target has {target}")]
    Length { logits: usize, target: usize },
    #[error("scheme {0} needs a noisy pass")]
    MissingNoisy(SchemeKind),
    #[error("scheme {0} needs a discriminator")]
    MissingDiscriminator(SchemeKind),
    #[error("invalid scheme: {0}")]
    Scheme(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Norm below which the cosine term is dropped.
pub const COSINE_EPS: f64 = 1e-8;

static DEGENERATE_COSINE: AtomicU64 = AtomicU64::new(0);

/// Number of pair penalties evaluated with a near-zero vector since start-up.
pub fn degenerate_cosine_count() -> u64 {
    DEGENERATE_COSINE.load(Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeKind {
    Baseline,
    DataAug,
    Adversarial,
    LogitPairing,
    WeightDecay,
    ActShrink,
    IrlE,
    IrlC,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 8] = [
        SchemeKind::Baseline,
        SchemeKind::DataAug,
        SchemeKind::Adversarial,
        SchemeKind::LogitPairing,
        SchemeKind::WeightDecay,
        SchemeKind::ActShrink,
        SchemeKind::IrlE,
        SchemeKind::IrlC,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SchemeKind::Baseline => "baseline",
            SchemeKind::DataAug => "data-aug",
            SchemeKind::Adversarial => "adversarial",
            SchemeKind::LogitPairing => "logit-pairing",
            SchemeKind::WeightDecay => "weight-decay",
            SchemeKind::ActShrink => "act-shrink",
            SchemeKind::IrlE => "irl-e",
            SchemeKind::IrlC => "irl-c",
        }
    }

    /// Every scheme except the baseline trains on clean/noisy pairs.
    pub fn uses_noisy(self) -> bool {
        self != SchemeKind::Baseline
    }

    /// Schemes whose loss includes the pair penalty weights.
    pub fn uses_pair_weights(self) -> bool {
        matches!(self, SchemeKind::LogitPairing | SchemeKind::IrlE | SchemeKind::IrlC)
    }

    pub fn uses_aux(self) -> bool {
        matches!(self, SchemeKind::WeightDecay | SchemeKind::ActShrink)
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SchemeKind {
    type Err = LossError;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('_', "-");
        SchemeKind::ALL
            .into_iter()
            .find(|k| k.as_str() == norm || k.as_str().replace('-', "") == norm)
            .ok_or_else(|| LossError::Scheme(format!("unknown scheme {s:?}")))
    }
}

/// Loss composition with its weights. Weights a scheme does not use are
/// ignored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainScheme {
    pub kind: SchemeKind,
    pub alpha: f64,
    pub gamma: f64,
    pub lambda: f64,
    /// Weight-decay or activation-shrink coefficient.
    pub aux_weight: f64,
    /// Gradient reversal scale for the adversarial scheme.
    #[serde(default = "default_beta")]
    pub beta: f64,
}

fn default_beta() -> f64 {
    1.0
}

pub const DEFAULT_WEIGHT_DECAY: f64 = 1e-4;
pub const DEFAULT_ACT_SHRINK: f64 = 1e-3;

impl TrainScheme {
    /// α = 1, γ = λ = 0.01.
    pub fn new(kind: SchemeKind) -> Self {
        let aux_weight = match kind {
            SchemeKind::WeightDecay => DEFAULT_WEIGHT_DECAY,
            SchemeKind::ActShrink => DEFAULT_ACT_SHRINK,
            _ => 0.0,
        };
        Self {
            kind,
            alpha: 1.0,
            gamma: 0.01,
            lambda: 0.01,
            aux_weight,
            beta: 1.0,
        }
    }

    pub fn with_weights(mut self, gamma: f64, lambda: f64) -> Self {
        self.gamma = gamma;
        self.lambda = lambda;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (n, v) in [
            ("alpha", self.alpha),
            ("gamma", self.gamma),
            ("lambda", self.lambda),
            ("aux_weight", self.aux_weight),
            ("beta", self.beta),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(LossError::Scheme(format!("{n} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Summed cross-entropy of `logits` (`[T × C]`) against `target`, skipping
/// positions whose target is ⟨pad⟩.
pub fn cross_entropy(g: &mut Graph, logits: Var, target: &[usize]) -> Result<Var> {
    cross_entropy_ignoring(g, logits, target, Some(PAD))
}

/// Summed cross-entropy, skipping positions whose target equals `ignore`.
pub fn cross_entropy_ignoring(g: &mut Graph, logits: Var, target: &[usize], ignore: Option<usize>) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != target.len() {
        return Err(LossError::Length {
            logits: shape.first().copied().unwrap_or(0),
            target: target.len(),
        });
    }
    let c = shape[1];
    let idx: Vec<usize> = target
        .iter()
        .enumerate()
        .filter(|(_, &t)| Some(t) != ignore)
        .map(|(i, &t)| i * c + t)
        .collect();
    let lp = g.log_softmax(logits, 1)?;
    let picked = g.gather(lp, &idx)?;
    let s = g.sum(picked);
    Ok(g.neg(s))
}

/// `γ·‖a−b‖² − λ·cos(a, b)`. When either vector has norm below
/// [`COSINE_EPS`] the cosine term is dropped and a warning is counted.
pub fn pair_penalty(g: &mut Graph, a: Var, b: Var, gamma: f64, lambda: f64) -> Result<Var> {
    if g.value(a).len() != g.value(b).len() {
        return Err(LossError::Tap(format!(
            "paired representations differ in size: {} vs {}",
            g.value(a).len(),
            g.value(b).len()
        )));
    }
    let a = g.flatten(a);
    let b = g.flatten(b);
    let d = g.sub(a, b)?;
    let sq = g.square(d);
    let sq = g.sum(sq);
    let l2 = g.scale(sq, gamma);
    let na = norm(g.data(a));
    let nb = norm(g.data(b));
    if na < COSINE_EPS || nb < COSINE_EPS {
        DEGENERATE_COSINE.fetch_add(1, Ordering::Relaxed);
        log::warn!("pair penalty on a near-zero vector (norms {na:e}, {nb:e}); cosine term dropped");
        return Ok(l2);
    }
    let dot = g.dot(a, b)?;
    // sqrt(‖a‖²·‖b‖²) makes cos(a, a) exactly 1
    let aa = g.dot(a, a)?;
    let bb = g.dot(b, b)?;
    let den = g.mul(aa, bb)?;
    let den = g.sqrt(den);
    let cos = g.div(dot, den)?;
    let cos = g.scale(cos, lambda);
    Ok(g.sub(l2, cos)?)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Sum of pair penalties over matching layers.
pub fn layer_penalties(g: &mut Graph, clean: &[Var], noisy: &[Var], gamma: f64, lambda: f64) -> Result<Var> {
    if clean.len() != noisy.len() || clean.is_empty() {
        return Err(LossError::Tap(format!(
            "clean pass has {} taps, noisy pass {}",
            clean.len(),
            noisy.len()
        )));
    }
    let mut total = pair_penalty(g, clean[0], noisy[0], gamma, lambda)?;
    for (&a, &b) in clean.iter().zip(noisy).skip(1) {
        let p = pair_penalty(g, a, b, gamma, lambda)?;
        total = g.add(total, p)?;
    }
    Ok(total)
}

/// `L_c(x) + α·L_c(x′)`.
pub fn data_aug_loss(
    g: &mut Graph,
    clean: &ForwardOutput,
    noisy: &ForwardOutput,
    target: &[usize],
    alpha: f64,
) -> Result<Var> {
    let lc = cross_entropy(g, clean.logits, target)?;
    let ln = cross_entropy(g, noisy.logits, target)?;
    let ln = g.scale(ln, alpha);
    Ok(g.add(lc, ln)?)
}

fn with_penalty(
    g: &mut Graph,
    clean: &ForwardOutput,
    noisy: &ForwardOutput,
    target: &[usize],
    scheme: &TrainScheme,
    a: &[Var],
    b: &[Var],
) -> Result<Var> {
    let base = data_aug_loss(g, clean, noisy, target, scheme.alpha)?;
    let pen = layer_penalties(g, a, b, scheme.gamma, scheme.lambda)?;
    Ok(g.add(base, pen)?)
}

/// Data augmentation plus the pair penalty on the encoder output.
pub fn irl_e_loss(
    g: &mut Graph,
    clean: &ForwardOutput,
    noisy: &ForwardOutput,
    target: &[usize],
    scheme: &TrainScheme,
) -> Result<Var> {
    with_penalty(g, clean, noisy, target, scheme, &[clean.taps.phi_e], &[noisy.taps.phi_e])
}

/// Data augmentation plus the pair penalty on every tapped layer: encoder
/// output, each decoder layer and the logits.
pub fn irl_c_loss(
    g: &mut Graph,
    clean: &ForwardOutput,
    noisy: &ForwardOutput,
    target: &[usize],
    scheme: &TrainScheme,
) -> Result<Var> {
    let a = clean.taps.layers();
    let b = noisy.taps.layers();
    with_penalty(g, clean, noisy, target, scheme, &a, &b)
}

/// Data augmentation plus the pair penalty on the logits only.
pub fn logit_pairing_loss(
    g: &mut Graph,
    clean: &ForwardOutput,
    noisy: &ForwardOutput,
    target: &[usize],
    scheme: &TrainScheme,
) -> Result<Var> {
    with_penalty(g, clean, noisy, target, scheme, &[clean.taps.logits], &[noisy.taps.logits])
}

/// `coeff · Σ‖W‖²` over the given weight matrices.
pub fn weight_decay_term(g: &mut Graph, weights: &[Var], coeff: f64) -> Result<Var> {
    let mut total = g.scalar(0.0);
    for &w in weights {
        let sq = g.square(w);
        let s = g.sum(sq);
        total = g.add(total, s)?;
    }
    Ok(g.scale(total, coeff))
}

/// `coeff · (‖φ_e(x)‖² + ‖φ_e(x′)‖²)`.
pub fn act_shrink_term(g: &mut Graph, phi_clean: Var, phi_noisy: Var, coeff: f64) -> Result<Var> {
    let a = g.square(phi_clean);
    let a = g.sum(a);
    let b = g.square(phi_noisy);
    let b = g.sum(b);
    let s = g.add(a, b)?;
    Ok(g.scale(s, coeff))
}

/// Classifier on encoder states: two ReLU layers then a sigmoid unit,
/// applied to every encoder time step. The output layer starts at zero so
/// an untrained discriminator predicts 0.5 everywhere.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    params: ParamStore,
    layers: [(ParamId, ParamId); 3],
    input: usize,
}

/// Discriminator parameters bound into a graph.
#[derive(Debug, Clone)]
pub struct DiscBound {
    vars: Vec<Var>,
}

pub const DISC_WIDTH: usize = 256;

impl Discriminator {
    pub fn new(input: usize, width: usize, seed_v: u64) -> Self {
        let mut r = seed::rng(seed_v, &[seed::ns::INIT, 0xd15c]);
        let mut params = ParamStore::new();
        let dims = [(input, width), (width, width), (width, 1)];
        let mut layers = [(ParamId(0), ParamId(0)); 3];
        for (l, &(i, o)) in dims.iter().enumerate() {
            let k = if l == 2 { 0.0 } else { (6.0 / i as f64).sqrt() };
            let data = (0..i * o).map(|_| if k > 0.0 { r.gen_range(-k..k) } else { 0.0 }).collect();
            let w = params.add(format!("disc.l{l}.w"), Tensor::new(vec![i, o], data).expect("sized"), true);
            let b = params.add(format!("disc.l{l}.b"), Tensor::zeros(&[1, o]), false);
            layers[l] = (w, b);
        }
        Self { params, layers, input }
    }

    pub fn input_dim(&self) -> usize {
        self.input
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

    /// Binds parameters as tracked leaves that are not model parameters, so
    /// model and discriminator gradients stay separate.
    pub fn bind(&self, g: &mut Graph) -> DiscBound {
        DiscBound {
            vars: self.params.iter().map(|p| g.leaf(p.value.clone(), true)).collect(),
        }
    }

    /// Pre-sigmoid scores, `[T × 1]`, for `x` of shape `[T × input]`.
    pub fn logits(&self, g: &mut Graph, b: &DiscBound, x: Var) -> Result<Var> {
        let mut h = x;
        for (l, (w, bias)) in self.layers.iter().enumerate() {
            h = g.matmul(h, b.vars[w.0])?;
            let rows = g.shape(h)[0];
            let bias = if rows == 1 {
                b.vars[bias.0]
            } else {
                let reps = vec![b.vars[bias.0]; rows];
                g.concat(&reps, 0)?
            };
            h = g.add(h, bias)?;
            if l < 2 {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    /// Probability that each row came from a noisy example.
    pub fn prob(&self, g: &mut Graph, b: &DiscBound, x: Var) -> Result<Var> {
        let z = self.logits(g, b, x)?;
        Ok(g.sigmoid(z))
    }

    /// Adds the gradients of the bound parameters into the store.
    pub fn accumulate(&mut self, grads: &Gradients, b: &DiscBound) {
        for (p, &v) in self.params.iter_mut().zip(&b.vars) {
            if let Some(gv) = grads.wrt(v) {
                for (d, s) in p.grad.iter_mut().zip(gv) {
                    *d += s;
                }
            }
        }
    }
}

/// Components of the adversarial objective.
#[derive(Debug, Clone, Copy)]
pub struct AdversarialLoss {
    /// `L_c(x) + α·L_c(x′)`
    pub task: Var,
    /// Binary cross-entropy, clean labelled 0 and noisy 1, averaged over
    /// time steps and summed over the pair.
    pub disc: Var,
    /// `task + disc` where the discriminator reads the encoder through a
    /// gradient reversal of scale β. Backpropagating it trains the
    /// discriminator on `disc` and sends `−β·∂disc` into the encoder.
    pub total: Var,
}

fn encoder_rows(g: &mut Graph, phi: Var, width: usize) -> Result<Var> {
    let n = g.value(phi).len();
    if width == 0 || n % width != 0 {
        return Err(LossError::Tap(format!(
            "encoder tap of size {n} is not a whole number of {width}-wide states"
        )));
    }
    Ok(g.reshape(phi, &[n / width, width])?)
}

/// Binary cross-entropy of one pair: mean over steps of softplus(z) for the
/// clean rows plus mean of softplus(−z) for the noisy rows.
pub fn discriminator_bce(g: &mut Graph, z_clean: Var, z_noisy: Var) -> Result<Var> {
    let a = g.softplus(z_clean);
    let a = g.mean(a);
    let nz = g.neg(z_noisy);
    let b = g.softplus(nz);
    let b = g.mean(b);
    Ok(g.add(a, b)?)
}

#[allow(clippy::too_many_arguments)]
pub fn adversarial_loss(
    g: &mut Graph,
    clean: &ForwardOutput,
    noisy: &ForwardOutput,
    target: &[usize],
    disc: &Discriminator,
    db: &DiscBound,
    alpha: f64,
    beta: f64,
) -> Result<AdversarialLoss> {
    let task = data_aug_loss(g, clean, noisy, target, alpha)?;
    let rc = g.grad_scale(clean.taps.phi_e, -beta);
    let rn = g.grad_scale(noisy.taps.phi_e, -beta);
    let xc = encoder_rows(g, rc, disc.input)?;
    let xn = encoder_rows(g, rn, disc.input)?;
    let zc = disc.logits(g, db, xc)?;
    let zn = disc.logits(g, db, xn)?;
    let dl = discriminator_bce(g, zc, zn)?;
    let total = g.add(task, dl)?;
    Ok(AdversarialLoss { task, disc: dl, total })
}

/// Loss of one training example under a scheme.
#[derive(Debug, Clone, Copy)]
pub struct SchemeLoss {
    /// What gets backpropagated.
    pub total: Var,
    /// Cross-entropy part, for logging.
    pub task: Var,
    pub disc: Option<Var>,
}

/// Extra inputs some schemes need.
#[derive(Default)]
pub struct SchemeAux<'a> {
    /// Bound weight matrices, for weight decay.
    pub weights: &'a [Var],
    pub disc: Option<(&'a Discriminator, &'a DiscBound)>,
}

/// Composes the loss of `scheme` for one example.
pub fn scheme_loss(
    g: &mut Graph,
    scheme: &TrainScheme,
    clean: &ForwardOutput,
    noisy: Option<&ForwardOutput>,
    target: &[usize],
    aux: &SchemeAux<'_>,
) -> Result<SchemeLoss> {
    let kind = scheme.kind;
    if kind == SchemeKind::Baseline {
        let t = cross_entropy(g, clean.logits, target)?;
        return Ok(SchemeLoss {
            total: t,
            task: t,
            disc: None,
        });
    }
    let noisy = noisy.ok_or(LossError::MissingNoisy(kind))?;
    let plain = |total: Var| SchemeLoss {
        total,
        task: total,
        disc: None,
    };
    Ok(match kind {
        SchemeKind::Baseline => unreachable!(),
        SchemeKind::DataAug => plain(data_aug_loss(g, clean, noisy, target, scheme.alpha)?),
        SchemeKind::IrlE => plain(irl_e_loss(g, clean, noisy, target, scheme)?),
        SchemeKind::IrlC => plain(irl_c_loss(g, clean, noisy, target, scheme)?),
        SchemeKind::LogitPairing => plain(logit_pairing_loss(g, clean, noisy, target, scheme)?),
        SchemeKind::WeightDecay => {
            let task = data_aug_loss(g, clean, noisy, target, scheme.alpha)?;
            let d = weight_decay_term(g, aux.weights, scheme.aux_weight)?;
            SchemeLoss {
                total: g.add(task, d)?,
                task,
                disc: None,
            }
        }
        SchemeKind::ActShrink => {
            let task = data_aug_loss(g, clean, noisy, target, scheme.alpha)?;
            let s = act_shrink_term(g, clean.taps.phi_e, noisy.taps.phi_e, scheme.aux_weight)?;
            SchemeLoss {
                total: g.add(task, s)?,
                task,
                disc: None,
            }
        }
        SchemeKind::Adversarial => {
            let (d, db) = aux.disc.ok_or(LossError::MissingDiscriminator(kind))?;
            let l = adversarial_loss(g, clean, noisy, target, d, db, scheme.alpha, scheme.beta)?;
            SchemeLoss {
                total: l.total,
                task: l.task,
                disc: Some(l.disc),
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureMatrix;
    use crate::seq2seq::{ModelConfig, Seq2Seq};
    use crate::synthcorpus::{Vocab, EOS, SOS};
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};

    fn row(g: &mut Graph, v: &[f64]) -> Var {
        g.constant(Tensor::row(v.to_vec()))
    }

    fn scalar_of(f: impl FnOnce(&mut Graph) -> Var) -> f64 {
        let mut g = Graph::new();
        let v = f(&mut g);
        g.scalar_value(v)
    }

    #[test]
    fn cross_entropy_examples() {
        let v = scalar_of(|g| {
            let l = g.constant(Tensor::matrix(2, 2, vec![1000.0, 0.0, 0.0, 1000.0]).unwrap());
            cross_entropy_ignoring(g, l, &[0, 1], None).unwrap()
        });
        assert_eq!(v, 0.0);
        let v = scalar_of(|g| {
            let l = g.constant(Tensor::matrix(1, 7, vec![0.3; 7]).unwrap());
            cross_entropy(g, l, &[4]).unwrap()
        });
        assert!((v - 7f64.ln()).abs() < 1e-12);
        let v = scalar_of(|g| {
            let l = g.constant(Tensor::matrix(1, 2, vec![0.8f64.ln(), 0.2f64.ln()]).unwrap());
            cross_entropy_ignoring(g, l, &[0], None).unwrap()
        });
        assert!((v - 0.2231435513142097).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_skips_pad_and_checks_length() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::matrix(2, 4, vec![0.1, 0.7, -0.2, 0.0, 0.5, 0.5, 0.5, 0.5]).unwrap());
        let a = cross_entropy(&mut g, l, &[1, PAD]).unwrap();
        let first = g.slice(l, 0, 0, 1).unwrap();
        let b = cross_entropy(&mut g, first, &[1]).unwrap();
        assert_eq!(g.scalar_value(a), g.scalar_value(b));
        assert!(matches!(cross_entropy(&mut g, l, &[1]), Err(LossError::Length { .. })));
    }

    #[test]
    fn pair_penalty_examples() {
        let v = scalar_of(|g| {
            let a = row(g, &[0.3, -1.2, 2.0]);
            pair_penalty(g, a, a, 0.5, 0.01).unwrap()
        });
        assert_eq!(v, -0.01);
        let v = scalar_of(|g| {
            let a = row(g, &[1.0, 0.0]);
            let b = row(g, &[0.0, 1.0]);
            pair_penalty(g, a, b, 0.3, 0.7).unwrap()
        });
        assert!((v - 0.6).abs() < 1e-15);
        let v = scalar_of(|g| {
            let a = row(g, &[1.0, 0.0]);
            let b = row(g, &[3.0, 4.0]);
            pair_penalty(g, a, b, 0.01, 0.01).unwrap()
        });
        assert!((v - 0.194).abs() < 1e-12);
    }

    #[test]
    fn degenerate_vector_drops_cosine() {
        let before = degenerate_cosine_count();
        let v = scalar_of(|g| {
            let a = row(g, &[0.0, 0.0]);
            let b = row(g, &[3.0, 4.0]);
            pair_penalty(g, a, b, 0.1, 0.5).unwrap()
        });
        assert!((v - 2.5).abs() < 1e-12);
        assert!(degenerate_cosine_count() > before);
    }

    #[test]
    fn scale_sensitivity() {
        // cosine is blind to scale, the L2 term is not
        let b = [0.4, -1.0, 2.5];
        for c in [0.5, 2.0, 7.0] {
            let a: Vec<f64> = b.iter().map(|v| v * c).collect();
            let cos = scalar_of(|g| {
                let x = row(g, &a);
                let y = row(g, &b);
                pair_penalty(g, x, y, 0.0, 1.0).unwrap()
            });
            assert!((cos + 1.0).abs() < 1e-12);
            let l2 = scalar_of(|g| {
                let x = row(g, &a);
                let y = row(g, &b);
                pair_penalty(g, x, y, 1.0, 0.0).unwrap()
            });
            let nb2: f64 = b.iter().map(|v| v * v).sum();
            assert!((l2 - (c - 1.0) * (c - 1.0) * nb2).abs() < 1e-9);
            assert!(l2 > 0.0);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn pair_penalty_symmetric_and_bounded(
            a in proptest::collection::vec(-5.0f64..5.0, 1..12),
            seed_v in 0u64..1000,
            gamma in 0.0f64..2.0,
            lambda in 0.0f64..2.0,
        ) {
            let mut r = seed::rng(seed_v, &[]);
            let b: Vec<f64> = a.iter().map(|_| r.gen_range(-5.0..5.0)).collect();
            let (ab, ba) = {
                let mut g = Graph::new();
                let x = row(&mut g, &a);
                let y = row(&mut g, &b);
                let p = pair_penalty(&mut g, x, y, gamma, lambda).unwrap();
                let q = pair_penalty(&mut g, y, x, gamma, lambda).unwrap();
                (g.scalar_value(p), g.scalar_value(q))
            };
            prop_assert!((ab - ba).abs() <= 1e-12 * (1.0 + ab.abs()));
            prop_assert!(ab >= -lambda - 1e-12);
        }
    }

    fn tiny() -> (Seq2Seq, FeatureMatrix, FeatureMatrix) {
        let m = Seq2Seq::new(ModelConfig::new(3, Vocab::new("ab").unwrap(), 2), 11).unwrap();
        let mut r = seed::rng(3, &[]);
        let mut mk = || FeatureMatrix::new((0..8).map(|_| r.gen_range(-1.0..1.0)).collect(), 4, 2).unwrap();
        (m, mk(), mk())
    }

    fn two_passes(g: &mut Graph, m: &Seq2Seq, a: &FeatureMatrix, b: &FeatureMatrix) -> (ForwardOutput, ForwardOutput) {
        let bd = m.bind(g);
        let input = [SOS, 3, 4];
        let c = m.forward_teacher_forced(g, &bd, a, &input).unwrap();
        let n = m.forward_teacher_forced(g, &bd, b, &input).unwrap();
        (c, n)
    }

    const TARGET: [usize; 3] = [3, 4, EOS];

    #[test]
    fn identical_inputs_give_minus_lambda_per_layer() {
        let (m, x, _) = tiny();
        let s = TrainScheme::new(SchemeKind::IrlC);
        let mut g = Graph::new();
        let (c, n) = two_passes(&mut g, &m, &x, &x);
        let ce = cross_entropy(&mut g, c.logits, &TARGET).unwrap();
        let ce = g.scalar_value(ce);
        let e = irl_e_loss(&mut g, &c, &n, &TARGET, &s).unwrap();
        assert!((g.scalar_value(e) - (2.0 * ce - 0.01)).abs() < 1e-12);
        let pen = layer_penalties(&mut g, &c.taps.layers(), &n.taps.layers(), s.gamma, s.lambda).unwrap();
        assert_eq!(c.taps.layers().len(), 6);
        assert!((g.scalar_value(pen) + 6.0 * 0.01).abs() < 1e-15);
        for t in c.taps.layers() {
            let p = pair_penalty(&mut g, t, t, 0.3, 0.01).unwrap();
            assert_eq!(g.scalar_value(p), -0.01);
        }
        let lp = logit_pairing_loss(&mut g, &c, &n, &TARGET, &s).unwrap();
        assert!((g.scalar_value(lp) - (2.0 * ce - 0.01)).abs() < 1e-12);
    }

    #[test]
    fn zero_weights_reduce_bit_exactly_to_data_aug() {
        let (m, x, y) = tiny();
        for kind in [SchemeKind::IrlE, SchemeKind::IrlC, SchemeKind::LogitPairing] {
            let s = TrainScheme::new(kind).with_weights(0.0, 0.0);
            let mut g = Graph::new();
            let (c, n) = two_passes(&mut g, &m, &x, &y);
            let d = data_aug_loss(&mut g, &c, &n, &TARGET, 1.0).unwrap();
            let l = scheme_loss(&mut g, &s, &c, Some(&n), &TARGET, &SchemeAux::default()).unwrap();
            assert_eq!(g.scalar_value(d).to_bits(), g.scalar_value(l.total).to_bits());
        }
    }

    #[test]
    fn single_tap_irl_c_equals_irl_e() {
        let (m, x, y) = tiny();
        let s = TrainScheme::new(SchemeKind::IrlE).with_weights(0.3, 0.2);
        let mut g = Graph::new();
        let (c, n) = two_passes(&mut g, &m, &x, &y);
        let e = irl_e_loss(&mut g, &c, &n, &TARGET, &s).unwrap();
        let d = with_penalty(&mut g, &c, &n, &TARGET, &s, &c.taps.layers()[..1], &n.taps.layers()[..1]).unwrap();
        assert_eq!(g.scalar_value(e), g.scalar_value(d));
    }

    #[test]
    fn logit_pairing_is_irl_c_restricted_to_logits() {
        let (m, x, y) = tiny();
        let s = TrainScheme::new(SchemeKind::LogitPairing).with_weights(0.3, 0.2);
        let mut g = Graph::new();
        let (c, n) = two_passes(&mut g, &m, &x, &y);
        let lp = logit_pairing_loss(&mut g, &c, &n, &TARGET, &s).unwrap();
        let last = c.taps.layers().len() - 1;
        let r = with_penalty(&mut g, &c, &n, &TARGET, &s, &c.taps.layers()[last..], &n.taps.layers()[last..]).unwrap();
        assert_eq!(g.scalar_value(lp), g.scalar_value(r));
    }

    #[test]
    fn untrained_discriminator_gives_two_ln_two() {
        let (m, x, y) = tiny();
        let d = Discriminator::new(3, DISC_WIDTH, 1);
        let mut g = Graph::new();
        let (c, n) = two_passes(&mut g, &m, &x, &y);
        let db = d.bind(&mut g);
        let l = adversarial_loss(&mut g, &c, &n, &TARGET, &d, &db, 1.0, 1.0).unwrap();
        assert!((g.scalar_value(l.disc) - 2.0 * 2f64.ln()).abs() < 1e-12);
        let xc = g.reshape(c.taps.phi_e, &[2, 3]).unwrap();
        let p = d.prob(&mut g, &db, xc).unwrap();
        assert!(g.data(p).iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn confident_discriminator_loss_vanishes() {
        let mut g = Graph::new();
        let zc = g.constant(Tensor::matrix(3, 1, vec![-60.0; 3]).unwrap());
        let zn = g.constant(Tensor::matrix(3, 1, vec![60.0; 3]).unwrap());
        let l = discriminator_bce(&mut g, zc, zn).unwrap();
        assert!(g.scalar_value(l) < 1e-20);
    }

    #[test]
    fn decay_and_shrink_terms() {
        let v = scalar_of(|g| {
            let w = g.constant(Tensor::scalar(3.0));
            weight_decay_term(g, &[w], 0.1).unwrap()
        });
        assert!((v - 0.9).abs() < 1e-15);
        let mut g = Graph::new();
        let a = g.leaf(Tensor::row(vec![0.5, -2.0]), true);
        let b = g.leaf(Tensor::row(vec![1.0, 3.0]), true);
        let t = act_shrink_term(&mut g, a, b, 0.2).unwrap();
        assert!((g.scalar_value(t) - 0.2 * (4.25 + 10.0)).abs() < 1e-12);
        let gr = g.backward(t).unwrap();
        assert_eq!(gr.wrt(a).unwrap(), &[0.2, -0.8]);
        let zero = act_shrink_term(&mut g, a, b, 0.0).unwrap();
        assert_eq!(g.scalar_value(zero), 0.0);
    }

    #[test]
    fn scheme_parsing() {
        for k in SchemeKind::ALL {
            assert_eq!(k.as_str().parse::<SchemeKind>().unwrap(), k);
        }
        assert_eq!("IRL_C".parse::<SchemeKind>().unwrap(), SchemeKind::IrlC);
        assert_eq!("dataaug".parse::<SchemeKind>().unwrap(), SchemeKind::DataAug);
        assert!("nope".parse::<SchemeKind>().is_err());
        let mut s = TrainScheme::new(SchemeKind::IrlE);
        s.gamma = -1.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn baseline_needs_no_noisy_pass_others_do() {
        let (m, x, _) = tiny();
        let mut g = Graph::new();
        let (c, _) = two_passes(&mut g, &m, &x, &x);
        let base = TrainScheme::new(SchemeKind::Baseline);
        assert!(scheme_loss(&mut g, &base, &c, None, &TARGET, &SchemeAux::default()).is_ok());
        let aug = TrainScheme::new(SchemeKind::DataAug);
        assert!(matches!(
            scheme_loss(&mut g, &aug, &c, None, &TARGET, &SchemeAux::default()),
            Err(LossError::MissingNoisy(_))
        ));
        let adv = TrainScheme::new(SchemeKind::Adversarial);
        assert!(matches!(
            scheme_loss(&mut g, &adv, &c, Some(&c), &TARGET, &SchemeAux::default()),
            Err(LossError::MissingDiscriminator(_))
        ));
    }
}
