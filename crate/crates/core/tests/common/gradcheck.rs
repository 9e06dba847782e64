//! Central finite-difference checks shared by the gradient tests and the
//! acceptance runner.

use irl_core::autodiff::{Graph, Tensor, Var};
use irl_core::features::FeatureMatrix;
use irl_core::losses::{self, Discriminator, SchemeAux, SchemeKind, TrainScheme};
use irl_core::seq2seq::{ModelConfig, Seq2Seq};
use irl_core::synthcorpus::{Vocab, EOS, SOS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-4;
pub const TOL: f64 = 1e-3;

/// Relative error with a small absolute floor so that gradients that are
/// zero up to rounding do not divide by zero.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

/// Builds `f` on fresh leaves holding `inputs`; compares backprop against
/// central differences for every input element. Returns the worst relative
/// error.
pub fn check_fn(inputs: &[Tensor], f: &dyn Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let eval = |ins: &[Tensor]| {
        let mut g = Graph::new();
        let vs: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = f(&mut g, &vs);
        g.scalar_value(out)
    };
    let mut g = Graph::new();
    let vs: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vs);
    let grads = g.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        let zeros = vec![0.0; t.len()];
        let analytic = grads.wrt(vs[k]).unwrap_or(&zeros).to_vec();
        for i in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += EPS;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= EPS;
            let num = (eval(&plus) - eval(&minus)) / (2.0 * EPS);
            worst = worst.max(rel_err(analytic[i], num));
        }
    }
    worst
}

fn rand_tensor(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(lo..hi)).collect()).unwrap()
}

/// Shape-preserving building blocks for random graphs: each takes the
/// current value, another pool member and the side inputs.
type Block = fn(&mut Graph, Var, Var, &Side) -> Var;

pub struct Side {
    pub right: Var,
    pub left: Var,
    pub rows: usize,
    pub cols: usize,
    pub perm: Vec<usize>,
    pub axis: usize,
    pub k: f64,
}

pub const BLOCKS: &[(&str, Block)] = &[
    ("add", |g, x, y, _| g.add(x, y).unwrap()),
    ("sub", |g, x, y, _| g.sub(x, y).unwrap()),
    ("mul", |g, x, y, _| g.mul(x, y).unwrap()),
    ("div", |g, x, y, _| {
        let s = g.scale(y, 0.3);
        let e = g.exp(s);
        let d = g.add_scalar(e, 0.5);
        g.div(x, d).unwrap()
    }),
    ("scale", |g, x, _, s| g.scale(x, s.k)),
    ("add_scalar", |g, x, _, s| g.add_scalar(x, s.k)),
    ("neg", |g, x, _, _| g.neg(x)),
    ("tanh", |g, x, _, _| g.tanh(x)),
    ("sigmoid", |g, x, _, _| g.sigmoid(x)),
    ("relu", |g, x, _, _| g.relu(x)),
    ("softplus", |g, x, _, _| g.softplus(x)),
    ("exp", |g, x, _, _| {
        let t = g.tanh(x);
        g.exp(t)
    }),
    ("log", |g, x, _, _| {
        let s = g.square(x);
        let p = g.add_scalar(s, 0.5);
        g.log(p)
    }),
    ("square", |g, x, _, _| g.square(x)),
    ("sqrt", |g, x, _, _| {
        let s = g.square(x);
        let p = g.add_scalar(s, 0.1);
        g.sqrt(p)
    }),
    ("softmax", |g, x, _, s| g.softmax(x, s.axis).unwrap()),
    ("log_softmax", |g, x, _, s| g.log_softmax(x, s.axis).unwrap()),
    ("matmul", |g, x, _, s| g.matmul(x, s.right).unwrap()),
    ("transpose", |g, x, _, s| {
        let t = g.transpose(x).unwrap();
        let m = g.matmul(t, s.left).unwrap();
        g.transpose(m).unwrap()
    }),
    ("concat_slice", |g, x, y, s| {
        let c = g.concat(&[y, x], s.axis).unwrap();
        let len = if s.axis == 0 { s.rows } else { s.cols };
        g.slice(c, s.axis, len, len).unwrap()
    }),
    ("reshape", |g, x, _, s| {
        let f = g.flatten(x);
        let t = g.tanh(f);
        g.reshape(t, &[s.rows, s.cols]).unwrap()
    }),
    ("gather", |g, x, _, s| {
        let p = g.gather(x, &s.perm).unwrap();
        g.reshape(p, &[s.rows, s.cols]).unwrap()
    }),
    ("sum", |g, x, y, _| {
        let s = g.sum(y);
        let t = g.tanh(s);
        g.mul(x, t).unwrap()
    }),
    ("mean", |g, x, y, _| {
        let m = g.mean(y);
        g.add(x, m).unwrap()
    }),
    ("dot", |g, x, y, _| {
        let d = g.dot(x, y).unwrap();
        let t = g.tanh(d);
        g.mul(x, t).unwrap()
    }),
    ("l2_norm", |g, x, y, _| {
        let n = g.l2_norm(y);
        g.mul(x, n).unwrap()
    }),
    ("grad_scale", |g, x, _, _| g.grad_scale(x, 1.0)),
    ("lstm_cell", |g, x, y, s| {
        let r = s.right;
        let (t, h, n) = (g.tanh(r), g.scale(r, 0.5), g.neg(r));
        let top = g.concat(&[r, t, h, n], 1).unwrap();
        let bottom = g.concat(&[t, r, n, h], 1).unwrap();
        let w = g.concat(&[top, bottom], 0).unwrap();
        let xs = g.concat(&[x, y, x, y], 1).unwrap();
        let b = g.slice(xs, 0, 0, 1).unwrap();
        let hc = g.lstm_cell(x, y, y, w, b).unwrap();
        let hn = g.slice(hc, 1, 0, s.cols).unwrap();
        let cn = g.slice(hc, 1, s.cols, s.cols).unwrap();
        let cs = g.scale(cn, 0.5);
        g.add(hn, cs).unwrap()
    }),
];

/// One random composite graph per seed. Returns (ops used, worst error).
pub fn random_graph(seed_v: u64) -> (Vec<&'static str>, f64) {
    let mut r = ChaCha8Rng::seed_from_u64(seed_v);
    let rows = r.gen_range(1..4);
    let cols = r.gen_range(1..4);
    let n_leaves = r.gen_range(2..4);
    let mut inputs: Vec<Tensor> = (0..n_leaves).map(|_| rand_tensor(&mut r, &[rows, cols], -1.5, 1.5)).collect();
    inputs.push(rand_tensor(&mut r, &[cols, cols], -1.0, 1.0));
    inputs.push(rand_tensor(&mut r, &[rows, rows], -1.0, 1.0));
    inputs.push(rand_tensor(&mut r, &[rows, cols], -1.0, 1.0));
    let steps = r.gen_range(4..9);
    let plan: Vec<(usize, usize, usize, f64)> = (0..steps)
        .map(|_| (r.gen_range(0..BLOCKS.len()), r.gen_range(0..64), r.gen_range(0..2), r.gen_range(-1.5..1.5)))
        .collect();
    let mut perm: Vec<usize> = (0..rows * cols).collect();
    for i in (1..perm.len()).rev() {
        perm.swap(i, r.gen_range(0..=i));
    }
    let names = plan.iter().map(|p| BLOCKS[p.0].0).collect();
    let f = move |g: &mut Graph, v: &[Var]| {
        let n = v.len();
        let mut pool: Vec<Var> = v[..n - 3].to_vec();
        let mut x = pool[0];
        for &(b, pick, axis, k) in &plan {
            let side = Side {
                right: v[n - 3],
                left: v[n - 2],
                rows,
                cols,
                perm: perm.clone(),
                axis,
                k,
            };
            let y = pool[pick % pool.len()];
            x = (BLOCKS[b].1)(g, x, y, &side);
            pool.push(x);
        }
        let w = g.mul(x, v[n - 1]).unwrap();
        g.sum(w)
    };
    (names, check_fn(&inputs, &f))
}

/// Every block applied once on its own, with a random input.
pub fn per_op(seed_v: u64) -> Vec<(&'static str, f64)> {
    let mut r = ChaCha8Rng::seed_from_u64(seed_v);
    let (rows, cols) = (2, 3);
    let inputs = vec![
        rand_tensor(&mut r, &[rows, cols], -1.5, 1.5),
        rand_tensor(&mut r, &[rows, cols], -1.5, 1.5),
        rand_tensor(&mut r, &[cols, cols], -1.0, 1.0),
        rand_tensor(&mut r, &[rows, rows], -1.0, 1.0),
        rand_tensor(&mut r, &[rows, cols], -1.0, 1.0),
    ];
    let k = r.gen_range(-1.5..1.5);
    let axis = r.gen_range(0..2);
    BLOCKS
        .iter()
        .map(|&(name, b)| {
            let f = move |g: &mut Graph, v: &[Var]| {
                let side = Side {
                    right: v[2],
                    left: v[3],
                    rows,
                    cols,
                    perm: vec![5, 0, 3, 1, 4, 2],
                    axis,
                    k,
                };
                let x = b(g, v[0], v[1], &side);
                let w = g.mul(x, v[4]).unwrap();
                g.sum(w)
            };
            (name, check_fn(&inputs, &f))
        })
        .collect()
}

/// Miniature model used for the loss checks: hidden 3, four input frames.
pub fn miniature(seed_v: u64) -> (Seq2Seq, FeatureMatrix, FeatureMatrix) {
    let mut m = Seq2Seq::new(ModelConfig::new(3, Vocab::new("ab").unwrap(), 2), seed_v).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(seed_v ^ 0xfeed);
    // Fresh initialisation leaves the deep decoder's logits near zero, where
    // the cosine is too curved for a 1e-4 step; spread the weights out.
    for p in m.params_mut().iter_mut() {
        for v in p.value.data_mut() {
            *v += r.gen_range(-0.8..0.8);
        }
    }
    let mut mk = || FeatureMatrix::new((0..8).map(|_| r.gen_range(-1.0..1.0)).collect(), 4, 2).unwrap();
    (m, mk(), mk())
}

pub const INPUT: [usize; 3] = [SOS, 3, 4];
pub const TARGET: [usize; 3] = [3, 4, EOS];

/// Value of the objective whose gradient the model receives. For the
/// adversarial scheme that is `task − β·disc`, the function gradient
/// reversal differentiates.
fn scheme_value(scheme: &TrainScheme, m: &Seq2Seq, disc: &Discriminator, x: &FeatureMatrix, y: &FeatureMatrix) -> (f64, f64) {
    let mut g = Graph::new();
    let b = m.bind(&mut g);
    let c = m.forward_teacher_forced(&mut g, &b, x, &INPUT).unwrap();
    let n = m.forward_teacher_forced(&mut g, &b, y, &INPUT).unwrap();
    let w = m.weight_vars(&b);
    let db = disc.bind(&mut g);
    let aux = SchemeAux {
        weights: &w,
        disc: Some((disc, &db)),
    };
    let noisy = scheme.kind.uses_noisy().then_some(&n);
    let l = losses::scheme_loss(&mut g, scheme, &c, noisy, &TARGET, &aux).unwrap();
    match l.disc {
        Some(d) => (
            g.scalar_value(l.task) - scheme.beta * g.scalar_value(d),
            g.scalar_value(d),
        ),
        None => (g.scalar_value(l.total), 0.0),
    }
}

/// Checks model-parameter gradients of a scheme against central
/// differences on the miniature model, and for the adversarial scheme
/// a sample of discriminator parameters as well.
pub fn scheme_check(kind: SchemeKind, seed_v: u64) -> f64 {
    let (m, x, y) = miniature(seed_v);
    let mut scheme = TrainScheme::new(kind).with_weights(0.5, 0.7);
    scheme.aux_weight = 0.3;
    let disc = Discriminator::new(3, 8, seed_v);
    let mut disc = disc;
    // a non-zero output layer so discriminator gradients reach the encoder
    let mut r = ChaCha8Rng::seed_from_u64(seed_v);
    for p in disc.params_mut().iter_mut() {
        for v in p.value.data_mut() {
            *v += r.gen_range(-0.5..0.5);
        }
    }

    let mut g = Graph::new();
    let b = m.bind(&mut g);
    let c = m.forward_teacher_forced(&mut g, &b, &x, &INPUT).unwrap();
    let n = m.forward_teacher_forced(&mut g, &b, &y, &INPUT).unwrap();
    let w = m.weight_vars(&b);
    let db = disc.bind(&mut g);
    let aux = SchemeAux {
        weights: &w,
        disc: Some((&disc, &db)),
    };
    let noisy = kind.uses_noisy().then_some(&n);
    let l = losses::scheme_loss(&mut g, &scheme, &c, noisy, &TARGET, &aux).unwrap();
    let mut store = m.params().clone();
    store.zero_grad();
    let grads = g.backward_into(l.total, &mut store).unwrap();
    let mut dstore = disc.clone();
    dstore.params_mut().zero_grad();
    dstore.accumulate(&grads, &db);

    let mut worst: f64 = 0.0;
    let ids: Vec<_> = m.params().ids().collect();
    for id in ids {
        for i in 0..m.params().get(id).value.len() {
            let mut mp = m.clone();
            mp.params_mut().get_mut(id).value.data_mut()[i] += EPS;
            let mut mm = m.clone();
            mm.params_mut().get_mut(id).value.data_mut()[i] -= EPS;
            let num = (scheme_value(&scheme, &mp, &disc, &x, &y).0 - scheme_value(&scheme, &mm, &disc, &x, &y).0) / (2.0 * EPS);
            worst = worst.max(rel_err(store.get(id).grad[i], num));
        }
    }
    if kind == SchemeKind::Adversarial {
        let dids: Vec<_> = disc.params().ids().collect();
        for id in dids {
            let len = disc.params().get(id).value.len();
            for i in (0..len).step_by(len.div_ceil(6)) {
                let mut dp = disc.clone();
                dp.params_mut().get_mut(id).value.data_mut()[i] += EPS;
                let mut dm = disc.clone();
                dm.params_mut().get_mut(id).value.data_mut()[i] -= EPS;
                let num = (scheme_value(&scheme, &m, &dp, &x, &y).1 - scheme_value(&scheme, &m, &dm, &x, &y).1) / (2.0 * EPS);
                worst = worst.max(rel_err(dstore.params().get(id).grad[i], num));
            }
        }
    }
    worst
}

/// Gradient reversal on a two-unit encoder: the gradient reaching the
/// encoder input through a reversed discriminator loss equals −β times the
/// finite-difference gradient of that loss. Returns the worst relative
/// error.
pub fn reversal_check(seed_v: u64, beta: f64) -> f64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed_v);
    let x = rand_tensor(&mut r, &[2, 2], -1.0, 1.0);
    let w = rand_tensor(&mut r, &[2, 2], -1.0, 1.0);
    let mut disc = Discriminator::new(2, 4, seed_v);
    for p in disc.params_mut().iter_mut() {
        for v in p.value.data_mut() {
            *v += r.gen_range(-0.5..0.5);
        }
    }
    let build = |g: &mut Graph, w: Var, reversed: bool| {
        let xc = g.constant(x.clone());
        let h = g.matmul(xc, w).unwrap();
        let h = g.tanh(h);
        let h = if reversed { g.grad_scale(h, -beta) } else { h };
        let db = disc.bind(g);
        let rows_c = g.slice(h, 0, 0, 1).unwrap();
        let rows_n = g.slice(h, 0, 1, 1).unwrap();
        let zc = disc.logits(g, &db, rows_c).unwrap();
        let zn = disc.logits(g, &db, rows_n).unwrap();
        losses::discriminator_bce(g, zc, zn).unwrap()
    };
    let mut g = Graph::new();
    let wv = g.leaf(w.clone(), true);
    let l = build(&mut g, wv, true);
    let gr = g.backward(l).unwrap();
    let analytic = gr.wrt(wv).unwrap().to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..w.len() {
        let val = |d: f64| {
            let mut t = w.clone();
            t.data_mut()[i] += d;
            let mut g = Graph::new();
            let wv = g.leaf(t, true);
            let l = build(&mut g, wv, false);
            g.scalar_value(l)
        };
        let num = (val(EPS) - val(-EPS)) / (2.0 * EPS);
        worst = worst.max(rel_err(analytic[i], -beta * num));
    }
    worst
}

/// The loss schemes covered by the gradient criterion.
pub const CHECKED_SCHEMES: [SchemeKind; 8] = SchemeKind::ALL;
