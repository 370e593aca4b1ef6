//! Random instances and independent oracles shared by the property suites
//! and the acceptance run.
#![allow(dead_code)]

use everadapt_core::autodiff::NormStats;
use everadapt_core::gradcheck::{check_gradients, random_projection};
use everadapt_core::losses::{
    class_conditional_mmd, cross_entropy, entropy_loss, mmd, replay_loss, weighted_sum, KernelConfig,
    LossTerms,
};
use everadapt_core::model::{classify, extract_features, BoundParams, StatsOverride};
use everadapt_core::normalization::{bn_forward, cbn_forward, ema_update, Affine};
use everadapt_core::{build_model, BatchNormState, Graph, Model, ModelSpec, NodeId, NormPhase, Result, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
/// Denominator floor of the relative error, so exact zeros compare absolutely.
pub const FLOOR: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values at least 0.05 away from zero, so ReLU kinks are never crossed.
pub fn off_zero(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let mut t = uniform(rng, shape, 0.05, 2.0);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// Distinct values spaced 0.1 apart, so max-pool windows have no near ties.
pub fn spaced(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.1 + rng.random_range(0.0..0.02)).collect();
    v.shuffle(rng);
    Tensor::new(shape.to_vec(), v).unwrap()
}

pub fn labels(rng: &mut impl Rng, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..classes)).collect()
}

fn trained_state(rng: &mut impl Rng, ch: usize, mode: NormPhase) -> BatchNormState {
    let mut s = BatchNormState::new(ch, 1e-5, 0.1).unwrap();
    let mean: Vec<f64> = (0..ch).map(|_| rng.random_range(-1.0..1.0)).collect();
    let var: Vec<f64> = (0..ch).map(|_| rng.random_range(0.5..2.0)).collect();
    ema_update(&mut s, &mean, &var).unwrap();
    s.set_mode(mode);
    s
}

type Build = Box<dyn FnMut(&mut Graph, &[NodeId]) -> Result<NodeId>>;

/// One random instance of every differentiable operation and loss:
/// `(name, inputs, scalar builder)`.
pub fn gradient_cases(seed: u64) -> Vec<(&'static str, Vec<Tensor>, Build)> {
    let mut r = rng(seed);
    let b = r.random_range(2..5usize);
    let c = r.random_range(2..5usize);
    let l = r.random_range(4..9usize);
    let d = r.random_range(1..5usize);
    let s = seed;
    let mut cases: Vec<(&'static str, Vec<Tensor>, Build)> = Vec::new();
    let shape = [b, c];

    cases.push((
        "add",
        vec![uniform(&mut r, &shape, -1.0, 1.0), uniform(&mut r, &shape, -1.0, 1.0)],
        Box::new(move |g, x| {
            let y = g.add(x[0], x[1])?;
            random_projection(g, y, s)
        }),
    ));
    cases.push((
        "sub",
        vec![uniform(&mut r, &shape, -1.0, 1.0), uniform(&mut r, &shape, -1.0, 1.0)],
        Box::new(move |g, x| {
            let y = g.sub(x[0], x[1])?;
            random_projection(g, y, s)
        }),
    ));
    cases.push((
        "mul",
        vec![uniform(&mut r, &shape, -1.0, 1.0), uniform(&mut r, &shape, -1.0, 1.0)],
        Box::new(move |g, x| {
            let y = g.mul(x[0], x[1])?;
            random_projection(g, y, s)
        }),
    ));
    let k = r.random_range(-2.0..2.0);
    cases.push((
        "scale+add_scalar",
        vec![uniform(&mut r, &shape, -1.0, 1.0)],
        Box::new(move |g, x| {
            let y = g.scale(x[0], k);
            let y = g.add_scalar(y, k);
            let y = g.mul(y, y)?;
            Ok(g.sum(y))
        }),
    ));
    cases.push((
        "mean",
        vec![uniform(&mut r, &shape, -1.0, 1.0)],
        Box::new(move |g, x| {
            let y = g.mul(x[0], x[0])?;
            g.mean(y)
        }),
    ));
    cases.push((
        "reshape",
        vec![uniform(&mut r, &shape, -1.0, 1.0)],
        Box::new(move |g, x| {
            let y = g.reshape(x[0], vec![b * c])?;
            random_projection(g, y, s)
        }),
    ));
    cases.push((
        "exp",
        vec![uniform(&mut r, &shape, -2.0, 2.0)],
        Box::new(move |g, x| {
            let y = g.exp(x[0]);
            random_projection(g, y, s)
        }),
    ));
    cases.push((
        "relu",
        vec![off_zero(&mut r, &shape)],
        Box::new(move |g, x| {
            let y = g.relu(x[0]);
            random_projection(g, y, s)
        }),
    ));
    cases.push((
        "dense",
        vec![
            uniform(&mut r, &[b, d], -1.0, 1.0),
            uniform(&mut r, &[c, d], -1.0, 1.0),
            uniform(&mut r, &[c], -1.0, 1.0),
        ],
        Box::new(move |g, x| {
            let y = g.dense(x[0], x[1], x[2])?;
            random_projection(g, y, s)
        }),
    ));
    let kernel = r.random_range(1..4usize);
    let stride = r.random_range(1..3usize);
    let padding = r.random_range(0..kernel);
    cases.push((
        "conv1d",
        vec![
            uniform(&mut r, &[b, 2, l], -1.0, 1.0),
            uniform(&mut r, &[c, 2, kernel], -1.0, 1.0),
            uniform(&mut r, &[c], -1.0, 1.0),
        ],
        Box::new(move |g, x| {
            let y = g.conv1d(x[0], x[1], x[2], stride, padding)?;
            random_projection(g, y, s)
        }),
    ));
    let window = r.random_range(1..4usize);
    cases.push((
        "maxpool1d",
        vec![spaced(&mut r, &[b, c, l])],
        Box::new(move |g, x| {
            let y = g.maxpool1d(x[0], window, window)?;
            random_projection(g, y, s)
        }),
    ));
    let out_len = r.random_range(1..=l);
    cases.push((
        "adaptive_avg_pool1d",
        vec![uniform(&mut r, &[b, c, l], -1.0, 1.0)],
        Box::new(move |g, x| {
            let y = g.adaptive_avg_pool1d(x[0], out_len)?;
            random_projection(g, y, s)
        }),
    ));
    cases.push((
        "dropout",
        vec![uniform(&mut r, &shape, -1.0, 1.0)],
        Box::new(move |g, x| {
            // same seed every evaluation, so the mask is held fixed
            let y = g.dropout(x[0], 0.5, true, &mut rng(s))?;
            random_projection(g, y, s)
        }),
    ));
    cases.push((
        "softmax",
        vec![uniform(&mut r, &shape, -3.0, 3.0)],
        Box::new(move |g, x| {
            let y = g.softmax(x[0])?;
            random_projection(g, y, s)
        }),
    ));
    cases.push((
        "log_softmax",
        vec![uniform(&mut r, &shape, -3.0, 3.0)],
        Box::new(move |g, x| {
            let y = g.log_softmax(x[0])?;
            random_projection(g, y, s)
        }),
    ));
    let rows: Vec<usize> = (0..b + 2).map(|_| r.random_range(0..b)).collect();
    cases.push((
        "select_rows",
        vec![uniform(&mut r, &shape, -1.0, 1.0)],
        Box::new(move |g, x| {
            let y = g.select_rows(x[0], &rows)?;
            random_projection(g, y, s)
        }),
    ));
    cases.push((
        "sq_dist",
        vec![uniform(&mut r, &[b, d], -1.0, 1.0), uniform(&mut r, &[c, d], -1.0, 1.0)],
        Box::new(move |g, x| {
            let y = g.sq_dist(x[0], x[1])?;
            random_projection(g, y, s)
        }),
    ));
    let nll_labels = labels(&mut r, b, c);
    cases.push((
        "nll",
        vec![uniform(&mut r, &shape, -3.0, 0.0)],
        Box::new(move |g, x| g.nll(x[0], &nll_labels)),
    ));
    let ch = c;
    let norm_in = [b, ch, l];
    cases.push((
        "channel_norm(batch)",
        vec![
            uniform(&mut r, &norm_in, -2.0, 2.0),
            uniform(&mut r, &[ch], 0.5, 1.5),
            uniform(&mut r, &[ch], -0.5, 0.5),
        ],
        Box::new(move |g, x| {
            let y = g.channel_norm(x[0], x[1], x[2], NormStats::Batch, 1e-5)?;
            random_projection(g, y.output, s)
        }),
    ));
    let bn_state = trained_state(&mut r, ch, NormPhase::TrainBn);
    cases.push((
        "bn_forward(train)",
        vec![
            uniform(&mut r, &norm_in, -2.0, 2.0),
            uniform(&mut r, &[ch], 0.5, 1.5),
            uniform(&mut r, &[ch], -0.5, 0.5),
        ],
        Box::new(move |g, x| {
            let mut st = bn_state.clone();
            let y = bn_forward(g, x[0], Affine { gamma: x[1], beta: x[2] }, &mut st)?;
            random_projection(g, y, s)
        }),
    ));
    let eval_state = trained_state(&mut r, ch, NormPhase::EvalBn);
    cases.push((
        "bn_forward(eval)",
        vec![
            uniform(&mut r, &norm_in, -2.0, 2.0),
            uniform(&mut r, &[ch], 0.5, 1.5),
            uniform(&mut r, &[ch], -0.5, 0.5),
        ],
        Box::new(move |g, x| {
            let mut st = eval_state.clone();
            let y = bn_forward(g, x[0], Affine { gamma: x[1], beta: x[2] }, &mut st)?;
            random_projection(g, y, s)
        }),
    ));
    let cbn_state = trained_state(&mut r, ch, NormPhase::Cbn);
    cases.push((
        "cbn_forward",
        vec![
            uniform(&mut r, &norm_in, -2.0, 2.0),
            uniform(&mut r, &[ch], 0.5, 1.5),
            uniform(&mut r, &[ch], -0.5, 0.5),
        ],
        Box::new(move |g, x| {
            let y = cbn_forward(g, x[0], Affine { gamma: x[1], beta: x[2] }, &cbn_state)?;
            random_projection(g, y, s)
        }),
    ));
    let ce_labels = labels(&mut r, b, c);
    cases.push((
        "cross_entropy",
        vec![uniform(&mut r, &shape, -3.0, 3.0)],
        Box::new(move |g, x| cross_entropy(g, x[0], &ce_labels)),
    ));
    cases.push((
        "entropy_loss",
        vec![uniform(&mut r, &shape, -3.0, 3.0)],
        Box::new(move |g, x| entropy_loss(g, x[0])),
    ));
    let replay_labels = labels(&mut r, b, c);
    cases.push((
        "replay_loss",
        vec![uniform(&mut r, &shape, -3.0, 3.0)],
        Box::new(move |g, x| Ok(replay_loss(g, Some(x[0]), &replay_labels)?.loss)),
    ));
    let bw = random_kernel(&mut r);
    let (na, nb) = (r.random_range(1..6usize), r.random_range(1..6usize));
    let k1 = bw.clone();
    cases.push((
        "mmd",
        vec![uniform(&mut r, &[na, d], -1.0, 1.0), uniform(&mut r, &[nb, d], -1.0, 1.0)],
        Box::new(move |g, x| mmd(g, x[0], x[1], &k1)),
    ));
    let (ns, nt) = (r.random_range(4..9usize), r.random_range(4..9usize));
    let ls = labels(&mut r, ns, 2);
    let lt = labels(&mut r, nt, 2);
    let k2 = bw;
    cases.push((
        "class_conditional_mmd",
        vec![uniform(&mut r, &[ns, d], -1.0, 1.0), uniform(&mut r, &[nt, d], -1.0, 1.0)],
        Box::new(move |g, x| class_conditional_mmd(g, x[0], &ls, x[1], &lt, None, &k2, 2, 1)),
    ));
    let (alpha, beta) = (r.random_range(0.0..1.0), r.random_range(0.0..2.0));
    cases.push((
        "weighted_sum",
        (0..4).map(|_| uniform(&mut r, &[2, 2], -1.0, 1.0)).collect(),
        Box::new(move |g, x| {
            let sq: Vec<NodeId> = x
                .iter()
                .map(|&v| {
                    let p = g.mul(v, v)?;
                    Ok(g.sum(p))
                })
                .collect::<Result<_>>()?;
            let terms = LossTerms {
                entropy: sq[0],
                alignment: sq[1],
                replay: sq[2],
                source: sq[3],
            };
            weighted_sum(g, terms, alpha, beta)
        }),
    ));
    cases
}

/// Worst relative error per operation on one random instance.
pub fn check_ops(seed: u64) -> Vec<(&'static str, f64)> {
    gradient_cases(seed)
        .into_iter()
        .map(|(name, inputs, f)| {
            let r = check_gradients(&inputs, H, FLOOR, f).unwrap_or_else(|e| panic!("{name}: {e}"));
            (name, r.max_rel_err)
        })
        .collect()
}

/// Desk model, CE plus entropy, every parameter checked with dropout off.
pub fn check_desk_model(seed: u64) -> f64 {
    let spec = ModelSpec::desk_default(3);
    let model: Model = build_model(&spec, seed).unwrap();
    let mut r = rng(seed);
    let x = uniform(&mut r, &[4, 1, spec.input_len], -2.0, 2.0);
    let y = labels(&mut r, 4, 3);
    let inputs: Vec<Tensor> = model.parameters().into_iter().map(|p| p.detached()).collect();
    let res = check_gradients(&inputs, H, FLOOR, |g, ids| {
        let mut m = model.clone();
        let params = BoundParams::from_nodes(ids.to_vec());
        let xb = g.constant(x.clone());
        let f = extract_features(&mut m, g, &params, xb, StatsOverride::None, &mut rng(0))?;
        let logits = classify(&m, g, &params, f)?;
        let ce = cross_entropy(g, logits, &y)?;
        let e = entropy_loss(g, logits)?;
        g.add(ce, e)
    })
    .unwrap();
    res.max_rel_err
}

pub fn random_kernel(r: &mut impl Rng) -> KernelConfig {
    let n = r.random_range(1..4usize);
    KernelConfig::new((0..n).map(|_| r.random_range(0.3..3.0)).collect()).unwrap()
}

pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.shape()[0]).map(|i| t.row(i).to_vec()).collect()
}

fn k(x: &[f64], y: &[f64], bw: &[f64]) -> f64 {
    let mut d2 = 0.0;
    for i in 0..x.len() {
        d2 += (x[i] - y[i]) * (x[i] - y[i]);
    }
    let mut s = 0.0;
    for &b in bw {
        s += (-d2 / (2.0 * b * b)).exp();
    }
    s
}

/// Brute-force squared MMD by explicit kernel sums.
pub fn mmd_oracle(a: &[Vec<f64>], b: &[Vec<f64>], bw: &[f64]) -> f64 {
    let (mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0);
    for x in a {
        for y in a {
            saa += k(x, y, bw);
        }
    }
    for x in b {
        for y in b {
            sbb += k(x, y, bw);
        }
    }
    for x in a {
        for y in b {
            sab += k(x, y, bw);
        }
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    saa / (na * na) + sbb / (nb * nb) - 2.0 * sab / (na * nb)
}

/// Per-class decomposition over classes with at least `min` members on each side.
#[allow(clippy::too_many_arguments)]
pub fn cc_mmd_oracle(
    s: &[Vec<f64>],
    ls: &[usize],
    t: &[Vec<f64>],
    lt: &[usize],
    keep: &[bool],
    bw: &[f64],
    classes: usize,
    min: usize,
) -> f64 {
    let mut total = 0.0;
    for c in 0..classes {
        let a: Vec<Vec<f64>> = s.iter().zip(ls).filter(|(_, &l)| l == c).map(|(x, _)| x.clone()).collect();
        let b: Vec<Vec<f64>> = t
            .iter()
            .zip(lt)
            .zip(keep)
            .filter(|((_, &l), &kp)| kp && l == c)
            .map(|((x, _), _)| x.clone())
            .collect();
        if a.len() >= min.max(1) && b.len() >= min.max(1) {
            total += mmd_oracle(&a, &b, bw);
        }
    }
    total
}

/// Evaluates `mmd` through the library on plain row sets.
pub fn mmd_lib(a: &[Vec<f64>], b: &[Vec<f64>], kernel: &KernelConfig) -> f64 {
    let mut g = Graph::new();
    let na = g.constant(Tensor::from_rows(a).unwrap());
    let nb = g.constant(Tensor::from_rows(b).unwrap());
    let m = mmd(&mut g, na, nb, kernel).unwrap();
    g.value(m).item()
}

/// Random lower-triangular accuracy matrix with `n` domains.
pub fn random_matrix(r: &mut impl Rng, n: usize) -> Vec<Vec<f64>> {
    (0..n).map(|i| (0..=i).map(|_| r.random_range(0.0..=100.0)).collect()).collect()
}

/// Spreadsheet-style metrics: `(acc, bwt, adapt_corrected, adapt_literal)`.
pub fn metric_oracle(rows: &[Vec<f64>]) -> (f64, Option<f64>, f64, Option<f64>) {
    let n = rows.len();
    let last = &rows[n - 1];
    let mut acc = 0.0;
    for v in last {
        acc += v;
    }
    acc /= n as f64;
    let mut diag_sum = 0.0;
    for (i, row) in rows.iter().enumerate() {
        diag_sum += row[i];
    }
    let bwt = if n < 2 {
        None
    } else {
        let mut s = 0.0;
        for i in 0..n - 1 {
            s += last[i] - rows[i][i];
        }
        Some(s / (n - 1) as f64)
    };
    let literal = (n >= 2).then(|| diag_sum / (n - 1) as f64);
    (acc, bwt, diag_sum / n as f64, literal)
}
