//! Independent reference implementations shared by the integration tests and
//! the acceptance runner. Nothing here calls into the code it checks except
//! to build inputs.

#![allow(dead_code)]

use std::collections::HashSet;

use admt_core::admt::{dice_ce_loss, RpaState, Teacher, TrainConfig, Trainer, UniformPeriods};
use admt_core::data::SegSample;
use admt_core::model::{ema_update, sgd_step, ModelParams};
use admt_core::rng::{substream, Stream};
use admt_core::{SegModel, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

pub type Check = Result<String, String>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------------------
// Finite differences

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-3;
pub const FD_INSTANCES: usize = 20;

/// Builds a scalar from leaves on a fresh tape.
pub type Builder<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> admt_core::Result<Var> + 'a;

fn eval_scalar(build: &Builder, inputs: &[Tensor<f64>]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = build(&mut tape, &vars).expect("forward succeeds");
    tape.value(out).data()[0]
}

/// Relative error `|a - n| / max(|a|, |n|)` over whole gradient vectors
/// (Euclidean norms), against central differences of every input entry.
pub fn gradcheck(build: &Builder, inputs: &[Tensor<f64>]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_grad())).collect();
    let out = build(&mut tape, &vars).expect("forward succeeds");
    tape.backward(out).expect("backward succeeds");
    let analytic: Vec<f64> = vars
        .iter()
        .zip(inputs)
        .flat_map(|(&v, t)| tape.grad(v).map_or(vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();

    let mut numeric = Vec::with_capacity(analytic.len());
    for (k, t) in inputs.iter().enumerate() {
        for i in 0..t.len() {
            let bump = |d: f64| {
                let mut xs = inputs.to_vec();
                let mut data = xs[k].data().to_vec();
                data[i] += d;
                xs[k] = Tensor::new(t.shape(), data).unwrap();
                eval_scalar(build, &xs)
            };
            numeric.push((bump(FD_STEP) - bump(-FD_STEP)) / (2.0 * FD_STEP));
        }
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
    let scale = norm(&analytic).max(norm(&numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero, so kinks are never straddled.
pub fn away_from_zero(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.5);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Contracts a tensor output to a scalar with fixed random weights so every
/// output entry contributes a distinct gradient.
fn contract(tape: &mut Tape<f64>, out: Var, weights: &Tensor<f64>) -> admt_core::Result<Var> {
    let w = tape.constant(weights.clone());
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

pub struct GradCase {
    pub name: &'static str,
    pub worst: f64,
    pub instances: usize,
}

/// Runs every differentiable op plus the composite losses through
/// [`gradcheck`].
pub fn gradient_suite(seed: u64) -> Vec<GradCase> {
    let mut r = rng(seed);
    let mut cases = Vec::new();
    let mut run = |name: &'static str, r: &mut ChaCha8Rng, make: &mut dyn FnMut(&mut ChaCha8Rng) -> f64| {
        let worst = (0..FD_INSTANCES).map(|_| make(r)).fold(0.0, f64::max);
        cases.push(GradCase {
            name,
            worst,
            instances: FD_INSTANCES,
        });
    };

    run("conv2d", &mut r, &mut |r| {
        let (n, ci, co) = (r.random_range(1..3), r.random_range(1..3), r.random_range(1..4));
        let (h, w) = (r.random_range(2..6), r.random_range(2..6));
        let x = uniform(r, &[n, ci, h, w], -1.0, 1.0);
        let k = uniform(r, &[co, ci, 3, 3], -1.0, 1.0);
        let b = uniform(r, &[co], -1.0, 1.0);
        let wt = uniform(r, &[n, co, h, w], -1.0, 1.0);
        gradcheck(
            &|t, v| {
                let y = t.conv2d(v[0], v[1], v[2])?;
                contract(t, y, &wt)
            },
            &[x, k, b],
        )
    });
    run("relu", &mut r, &mut |r| {
        let x = away_from_zero(r, &[1, 2, 3, 3]);
        let wt = uniform(r, &[1, 2, 3, 3], -1.0, 1.0);
        gradcheck(
            &|t, v| {
                let y = t.relu(v[0])?;
                contract(t, y, &wt)
            },
            &[x],
        )
    });
    run("softmax_channels", &mut r, &mut |r| {
        let c = r.random_range(2..6);
        let x = uniform(r, &[2, c, 2, 3], -3.0, 3.0);
        let wt = uniform(r, &[2, c, 2, 3], -1.0, 1.0);
        gradcheck(
            &|t, v| {
                let y = t.softmax_channels(v[0])?;
                contract(t, y, &wt)
            },
            &[x],
        )
    });
    for (name, which) in [("add", 0), ("mul", 1), ("div", 2)] {
        run(name, &mut r, &mut |r| {
            let a = uniform(r, &[1, 2, 2, 2], -2.0, 2.0);
            let b = if which == 2 {
                let mut b = away_from_zero(r, &[1, 2, 2, 2]).into_data();
                b.iter_mut().for_each(|v| *v += v.signum() * 0.5);
                Tensor::new(&[1, 2, 2, 2], b).unwrap()
            } else {
                uniform(r, &[1, 2, 2, 2], -2.0, 2.0)
            };
            let wt = uniform(r, &[1, 2, 2, 2], -1.0, 1.0);
            gradcheck(
                &|t, v| {
                    let y = match which {
                        0 => t.add(v[0], v[1])?,
                        1 => t.mul(v[0], v[1])?,
                        _ => t.div(v[0], v[1])?,
                    };
                    contract(t, y, &wt)
                },
                &[a, b],
            )
        });
    }
    run("scale", &mut r, &mut |r| {
        let s = r.random_range(-3.0..3.0);
        let x = uniform(r, &[1, 1, 3, 3], -2.0, 2.0);
        let wt = uniform(r, &[1, 1, 3, 3], -1.0, 1.0);
        gradcheck(
            &|t, v| {
                let y = t.scale(v[0], s)?;
                contract(t, y, &wt)
            },
            &[x],
        )
    });
    run("add_scalar", &mut r, &mut |r| {
        let s = r.random_range(-3.0..3.0);
        let x = uniform(r, &[1, 1, 3, 3], -2.0, 2.0);
        let wt = uniform(r, &[1, 1, 3, 3], -1.0, 1.0);
        gradcheck(
            &|t, v| {
                let y = t.add_scalar(v[0], s)?;
                contract(t, y, &wt)
            },
            &[x],
        )
    });
    run("ln_clamped", &mut r, &mut |r| {
        let x = uniform(r, &[1, 2, 2, 2], 0.05, 3.0);
        let wt = uniform(r, &[1, 2, 2, 2], -1.0, 1.0);
        gradcheck(
            &|t, v| {
                let y = t.ln_clamped(v[0], 1e-12)?;
                contract(t, y, &wt)
            },
            &[x],
        )
    });
    run("sum", &mut r, &mut |r| {
        let x = uniform(r, &[2, 2, 2, 2], -2.0, 2.0);
        gradcheck(&|t, v| t.sum(v[0]), &[x])
    });
    run("sum_per_channel", &mut r, &mut |r| {
        let c = r.random_range(1..5);
        let x = uniform(r, &[2, c, 2, 2], -2.0, 2.0);
        let wt = uniform(r, &[c], -1.0, 1.0);
        gradcheck(
            &|t, v| {
                let y = t.sum_per_channel(v[0])?;
                contract(t, y, &wt)
            },
            &[x],
        )
    });
    run("dice_ce_loss", &mut r, &mut |r| {
        let c = r.random_range(2..5);
        let (n, h, w) = (2, 3, 3);
        let logits = uniform(r, &[n, c, h, w], -2.0, 2.0);
        let targets: Vec<u8> = (0..n * h * w).map(|_| r.random_range(0..c as u8)).collect();
        let mut valid: Vec<bool> = (0..n * h * w).map(|_| r.random_bool(0.7)).collect();
        valid[0] = true;
        gradcheck(
            &|t, v| {
                let p = t.softmax_channels(v[0])?;
                dice_ce_loss(t, p, &targets, &valid)
            },
            &[logits],
        )
    });
    run("model+dice_ce_loss", &mut r, &mut |r| {
        let model = SegModel::new(1, 3).unwrap();
        let params: ModelParams<f64> = model.init_params(r);
        let layers = params.unflatten(&model).unwrap();
        let image = uniform(r, &[1, 1, 4, 4], 0.0, 1.0);
        let targets: Vec<u8> = (0..16).map(|_| r.random_range(0..3)).collect();
        let valid = vec![true; 16];
        let mut inputs = vec![image];
        for (k, b) in layers {
            inputs.push(k);
            inputs.push(b);
        }
        gradcheck(
            &|t, v| {
                let mut x = v[0];
                for (i, kb) in v[1..].chunks(2).enumerate() {
                    x = t.conv2d(x, kb[0], kb[1])?;
                    if i != 3 {
                        x = t.relu(x)?;
                    }
                }
                let p = t.softmax_channels(x)?;
                dice_ce_loss(t, p, &targets, &valid)
            },
            &inputs,
        )
    });
    cases
}

// ---------------------------------------------------------------------------
// Fusion

fn bits_entropy(d: &[f64]) -> f64 {
    let mut h = 0.0;
    for &p in d {
        if p > 0.0 {
            h -= p * p.log2();
        }
    }
    h
}

fn first_argmax(d: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..d.len() {
        if d[i] > d[best] {
            best = i;
        }
    }
    best
}

/// Straight-line conflict-combating fusion of one pixel:
/// `(label, valid, from_student, conflict)`.
pub fn ccm_pixel(q1: &[f64], q2: &[f64], qs: &[f64], tau: f64) -> (u8, bool, bool, bool) {
    let w1 = (-bits_entropy(q1)).exp();
    let w2 = (-bits_entropy(q2)).exp();
    let total = w1 + w2;
    let a1 = w1 / total;
    let a2 = w2 / total;
    let mut psi = vec![0.0; q1.len()];
    for k in 0..q1.len() {
        psi[k] = a1 * q1[k] + a2 * q2[k];
    }
    let conflict = first_argmax(q1) != first_argmax(q2);
    let use_student = conflict && bits_entropy(&psi) > bits_entropy(qs);
    let chosen: &[f64] = if use_student { qs } else { &psi };
    let peak = chosen.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (first_argmax(chosen) as u8, peak >= tau, use_student, conflict)
}

/// A random distribution; `sharpness` controls how peaked it is.
pub fn random_dist(r: &mut impl Rng, c: usize, sharpness: f64) -> Vec<f64> {
    let logits: Vec<f64> = (0..c).map(|_| r.random_range(-1.0..1.0) * sharpness).collect();
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

// ---------------------------------------------------------------------------
// Metrics

pub fn set_of(mask: &[bool]) -> HashSet<usize> {
    mask.iter().enumerate().filter(|(_, &v)| v).map(|(i, _)| i).collect()
}

/// `(dice, jaccard)` in percent from set arithmetic.
pub fn overlap_oracle(pred: &[bool], gt: &[bool]) -> (f64, f64) {
    let (p, g) = (set_of(pred), set_of(gt));
    if p.is_empty() && g.is_empty() {
        return (100.0, 100.0);
    }
    let inter = p.intersection(&g).count() as f64;
    let union = p.union(&g).count() as f64;
    (200.0 * inter / (p.len() + g.len()) as f64, 100.0 * inter / union)
}

fn surface_points(mask: &[bool], h: usize, w: usize) -> Vec<(f64, f64)> {
    let inside = |y: i64, x: i64| y >= 0 && x >= 0 && y < h as i64 && x < w as i64 && mask[(y * w as i64 + x) as usize];
    let mut out = Vec::new();
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            if !inside(y, x) {
                continue;
            }
            let interior = [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().all(|(dy, dx)| inside(y + dy, x + dx));
            if !interior {
                out.push((y as f64, x as f64));
            }
        }
    }
    out
}

fn nearest(p: (f64, f64), set: &[(f64, f64)]) -> f64 {
    set.iter()
        .map(|q| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt())
        .fold(f64::INFINITY, f64::min)
}

/// All-pairs `(hd95, asd)` over the symmetric boundary-distance multiset.
pub fn surface_oracle(pred: &[bool], gt: &[bool], h: usize, w: usize) -> Option<(f64, f64)> {
    match (pred.iter().any(|&v| v), gt.iter().any(|&v| v)) {
        (false, false) => return Some((0.0, 0.0)),
        (true, true) => {}
        _ => return None,
    }
    let (sp, sg) = (surface_points(pred, h, w), surface_points(gt, h, w));
    let mut d: Vec<f64> = sp.iter().map(|&p| nearest(p, &sg)).chain(sg.iter().map(|&p| nearest(p, &sp))).collect();
    let asd = d.iter().sum::<f64>() / d.len() as f64;
    d.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = 0.95 * (d.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(d.len() - 1);
    Some((d[lo] + (rank - lo as f64) * (d[hi] - d[lo]), asd))
}

/// A random mask mixing blobs (rectangles) with scattered pixels.
pub fn random_mask(r: &mut impl Rng, h: usize, w: usize) -> Vec<bool> {
    let mut m = vec![false; h * w];
    for _ in 0..r.random_range(0..4) {
        let (y0, x0) = (r.random_range(0..h), r.random_range(0..w));
        let (y1, x1) = (r.random_range(y0..h) + 1, r.random_range(x0..w) + 1);
        for y in y0..y1 {
            for x in x0..x1 {
                m[y * w + x] = true;
            }
        }
    }
    let noise = r.random_range(0.0..0.1);
    for v in m.iter_mut() {
        if r.random_bool(noise) {
            *v = !*v;
        }
    }
    m
}

// ---------------------------------------------------------------------------
// Optimizer and EMA closed forms

/// `|a - b|` maximised over entries.
pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Teacher after `k` EMA steps towards the scripted students:
/// `d^k t0 + sum_j (1-d) d^(k-1-j) s_j`.
pub fn ema_closed_form(t0: &[f64], students: &[Vec<f64>], d: f64) -> Vec<f64> {
    let k = students.len() as i32;
    (0..t0.len())
        .map(|i| {
            let mut acc = d.powi(k) * t0[i];
            for (j, s) in students.iter().enumerate() {
                acc += (1.0 - d) * d.powi(k - 1 - j as i32) * s[i];
            }
            acc
        })
        .collect()
}

/// SGD with momentum and weight decay is the linear system
/// `x' = A x + B g` on `x = (p, v)`; unrolled as
/// `x_k = A^k x_0 + sum_j A^(k-1-j) B g_j`.
pub fn sgd_closed_form(p0: f64, grads: &[f64], lr: f64, m: f64, wd: f64) -> (f64, f64) {
    type M = [[f64; 2]; 2];
    let a: M = [[1.0 - lr * wd, -lr * m], [wd, m]];
    let b = [-lr, 1.0];
    let mul = |x: &M, y: &M| -> M {
        let mut o = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                o[i][j] = x[i][0] * y[0][j] + x[i][1] * y[1][j];
            }
        }
        o
    };
    let pow = |k: usize| -> M {
        let mut out: M = [[1.0, 0.0], [0.0, 1.0]];
        for _ in 0..k {
            out = mul(&out, &a);
        }
        out
    };
    let k = grads.len();
    let ak = pow(k);
    let mut p = ak[0][0] * p0;
    let mut v = ak[1][0] * p0;
    for (j, &g) in grads.iter().enumerate() {
        let aj = pow(k - 1 - j);
        p += (aj[0][0] * b[0] + aj[0][1] * b[1]) * g;
        v += (aj[1][0] * b[0] + aj[1][1] * b[1]) * g;
    }
    (p, v)
}

/// Checks EMA and SGD against their closed forms over 100-step scripts.
pub fn optimizer_exactness(seed: u64) -> Check {
    let mut r = rng(seed);
    let model = SegModel::new(1, 2).unwrap();
    let n = model.param_count();
    let rand_params = |r: &mut ChaCha8Rng| -> Vec<f64> { (0..n).map(|_| r.random_range(-1.0..1.0)).collect() };
    let mut worst_ema: f64 = 0.0;
    for &d in &[0.9, 0.99, 0.5] {
        let t0 = rand_params(&mut r);
        let students: Vec<Vec<f64>> = (0..100).map(|_| rand_params(&mut r)).collect();
        let mut t = ModelParams::from_vec(&model, t0.clone()).unwrap();
        for s in &students {
            t = ema_update(&t, &ModelParams::from_vec(&model, s.clone()).unwrap(), d).unwrap();
        }
        worst_ema = worst_ema.max(max_abs_diff(t.as_slice(), &ema_closed_form(&t0, &students, d)));
    }
    let t0 = ModelParams::from_vec(&model, rand_params(&mut r)).unwrap();
    let s = ModelParams::from_vec(&model, rand_params(&mut r)).unwrap();
    if ema_update(&t0, &s, 0.0).unwrap() != s {
        return Err("decay 0 does not copy the student".into());
    }
    if ema_update(&t0, &s, 1.0).unwrap() != t0 {
        return Err("decay 1 does not keep the teacher".into());
    }

    let mut worst_sgd: f64 = 0.0;
    for &(lr, m, wd) in &[(0.01, 0.9, 1e-4), (0.1, 0.0, 0.0), (0.05, 0.5, 0.01)] {
        let p0 = rand_params(&mut r);
        let grads: Vec<Vec<f64>> = (0..100).map(|_| rand_params(&mut r)).collect();
        let mut p = ModelParams::from_vec(&model, p0.clone()).unwrap();
        let mut v = ModelParams::from_vec(&model, vec![0.0; n]).unwrap();
        for g in &grads {
            sgd_step(&mut p, &ModelParams::from_vec(&model, g.clone()).unwrap(), &mut v, lr, m, wd).unwrap();
        }
        for i in 0..n {
            let gi: Vec<f64> = grads.iter().map(|g| g[i]).collect();
            let (pe, ve) = sgd_closed_form(p0[i], &gi, lr, m, wd);
            worst_sgd = worst_sgd.max((p.as_slice()[i] - pe).abs()).max((v.as_slice()[i] - ve).abs());
        }
    }
    let detail = format!("max |ema - closed| {worst_ema:.2e}, max |sgd - closed| {worst_sgd:.2e}");
    if worst_ema <= 1e-12 && worst_sgd <= 1e-12 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------------------
// Scheduling

/// Draws `n` periods from the uniform source and checks coverage and mean.
pub fn rpa_distribution(seed: u64, n: usize, t_max: usize) -> Check {
    use admt_core::admt::PeriodSource;
    let mut src = UniformPeriods(substream(seed, Stream::Rpa, 0));
    let draws: Vec<usize> = (0..n).map(|_| src.next_period(t_max)).collect();
    let seen: HashSet<usize> = draws.iter().copied().collect();
    let mean = draws.iter().sum::<usize>() as f64 / n as f64;
    let var = draws.iter().map(|&d| (d as f64 - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    let expected = (t_max as f64 + 1.0) / 2.0;
    let all = (1..=t_max).all(|v| seen.contains(&v)) && seen.iter().all(|v| (1..=t_max).contains(v));
    let detail = format!("mean {mean:.4} (expected {expected}, se {se:.4}), distinct {}", seen.len());
    if !all {
        return Err(format!("coverage failed: {detail}"));
    }
    if (mean - expected).abs() > 3.0 * se {
        return Err(format!("mean outside 3 se: {detail}"));
    }

    let mut state = RpaState::new(1, UniformPeriods(substream(seed, Stream::Rpa, 1))).unwrap();
    let seq: Vec<Teacher> = (0..1000).map(|_| state.tick().0).collect();
    if seq[0] != Teacher::T1 || seq.windows(2).any(|w| w[0] == w[1]) {
        return Err("t_max = 1 does not strictly alternate".into());
    }
    Ok(format!("{detail}; t_max=1 alternates over 1000 ticks"))
}

// ---------------------------------------------------------------------------
// Training invariants

/// Steps a trainer, checking after every iteration that only the active
/// teacher moved and that it moved by exactly one EMA step, and that every
/// unlabeled index is drawn exactly once per completed epoch.
pub fn training_invariants(cfg: TrainConfig, labeled: Vec<SegSample>, unlabeled: &[SegSample], classes: usize) -> Check {
    let n_unl = unlabeled.len();
    let mut tr = Trainer::new(cfg, labeled, unlabeled, classes).map_err(|e| e.to_string())?;
    let mut draws: Vec<Vec<(usize, Teacher)>> = Vec::new();
    let mut steps = 0;
    while !tr.is_done() {
        let before = [tr.teacher(Teacher::T1).clone(), tr.teacher(Teacher::T2).clone()];
        let rep = tr.step().map_err(|e| e.to_string())?;
        steps += 1;
        let active = rep.active_teacher.ok_or("no active teacher reported")?;
        let decay = rep.ema_decay.ok_or("no EMA decay reported")?;
        for (slot, t) in [Teacher::T1, Teacher::T2].into_iter().enumerate() {
            let now = tr.teacher(t);
            if t == active {
                let expected = ema_update(&before[slot], tr.student(), decay).unwrap();
                if *now != expected {
                    return Err(format!("iteration {}: active teacher {t} is not one EMA step", rep.iter));
                }
            } else if *now != before[slot] {
                return Err(format!("iteration {}: inactive teacher {t} changed", rep.iter));
            }
        }
        for (&i, &e) in rep.batches.unlabeled.iter().zip(&rep.batches.unlabeled_epochs) {
            if draws.len() <= e {
                draws.resize(e + 1, Vec::new());
            }
            draws[e].push((i, active));
        }
    }
    let complete = draws.iter().filter(|d| d.len() == n_unl).count();
    for (e, d) in draws.iter().enumerate() {
        let ids: HashSet<usize> = d.iter().map(|x| x.0).collect();
        if ids.len() != d.len() {
            return Err(format!("epoch {e}: an unlabeled index was drawn twice"));
        }
        if d.len() == n_unl && ids.len() != n_unl {
            return Err(format!("epoch {e}: not every unlabeled index was drawn"));
        }
    }
    let t1 = draws.iter().flatten().filter(|x| x.1 == Teacher::T1).count();
    let total: usize = draws.iter().map(Vec::len).sum();
    Ok(format!(
        "{steps} iterations, {complete} complete epochs, {t1}/{total} unlabeled draws in a T1 turn"
    ))
}

/// A small labeled/unlabeled pair of pools for training-loop checks.
pub fn small_pools(seed: u64, size: usize, n_labeled: usize, n_unlabeled: usize) -> (Vec<SegSample>, Vec<SegSample>) {
    let all = admt_core::data::generate_dataset(seed, n_labeled + n_unlabeled, size, 4).unwrap();
    let unlabeled = all[n_labeled..].to_vec();
    (all[..n_labeled].to_vec(), unlabeled)
}

pub fn small_config(mode: admt_core::admt::Mode, max_iters: usize, seed: u64) -> TrainConfig {
    use admt_core::admt::{LossWeights, PeriodLimit};
    TrainConfig {
        seed,
        mode,
        ensembling: mode.resolve_ensembling(None).unwrap(),
        batch: admt_core::data::BatchSpec::new(2, 1.0).unwrap(),
        crop: 16,
        max_iters,
        base_lr: 0.01,
        momentum: 0.9,
        weight_decay: 1e-4,
        ema_decay: 0.99,
        ema_warmup: false,
        weights: LossWeights {
            lambda_u_max: 2.0,
            ramp_iters: max_iters / 10,
            tau: 0.6,
        },
        t_max: PeriodLimit::HalfEpoch,
    }
}

pub fn pixel_tensor(d: &[f64]) -> Tensor<f64> {
    Tensor::new(&[1, d.len(), 1, 1], d.to_vec()).unwrap()
}

/// Compares `ccm_fuse` bit-for-bit with [`ccm_pixel`] on `n` random pixels,
/// and requires every branch to be exercised.
pub fn ccm_oracle(seed: u64, n: usize) -> Check {
    use admt_core::admt::ccm_fuse;
    let mut r = rng(seed);
    let (mut conflicts, mut student, mut below) = (0, 0, 0);
    for case in 0..n {
        let c = r.random_range(2..6);
        let sharp = [0.5, 2.0, 6.0];
        let draw = |r: &mut ChaCha8Rng| {
            let k = sharp[r.random_range(0..3)];
            random_dist(r, c, k)
        };
        let (q1, q2, qs) = (draw(&mut r), draw(&mut r), draw(&mut r));
        let tau = r.random_range(0.3..0.95);
        let got = ccm_fuse(&pixel_tensor(&q1), &pixel_tensor(&q2), &pixel_tensor(&qs), tau).map_err(|e| e.to_string())?;
        let (label, valid, from_student, conflict) = ccm_pixel(&q1, &q2, &qs, tau);
        let conflict_frac = if conflict { 1.0 } else { 0.0 };
        if (got.labels[0], got.valid[0], got.from_student[0]) != (label, valid, from_student)
            || got.conflict_frac.to_bits() != f64::to_bits(conflict_frac)
        {
            return Err(format!("case {case}: got {got:?}, oracle {:?}", (label, valid, from_student, conflict)));
        }
        conflicts += conflict as usize;
        student += from_student as usize;
        below += !valid as usize;
    }
    let detail = format!("{n} cases: {conflicts} conflict, {student} student-chosen, {below} below tau");
    if conflicts == 0 || conflicts == n || student == 0 || below == 0 || below == n {
        return Err(format!("branch coverage incomplete: {detail}"));
    }
    Ok(detail)
}

/// Dice/Jaccard against set arithmetic and HD95/ASD against all-pairs
/// distances on random 16x16 pairs plus the empty-mask cases.
pub fn metric_oracle(seed: u64, pairs: usize) -> Check {
    use admt_core::metrics::{dice_jaccard, surface_distances};
    let mut r = rng(seed);
    let (h, w) = (16, 16);
    let mut cases: Vec<(Vec<bool>, Vec<bool>)> =
        (0..pairs).map(|_| (random_mask(&mut r, h, w), random_mask(&mut r, h, w))).collect();
    let empty = vec![false; h * w];
    let mut some = random_mask(&mut r, h, w);
    some[0] = true;
    cases.extend([(empty.clone(), empty.clone()), (empty.clone(), some.clone()), (some, empty)]);
    let mut worst: f64 = 0.0;
    for (i, (p, g)) in cases.iter().enumerate() {
        let pl: Vec<u8> = p.iter().map(|&v| v as u8).collect();
        let gl: Vec<u8> = g.iter().map(|&v| v as u8).collect();
        let (dice, jac) = dice_jaccard(&pl, &gl, 1).map_err(|e| e.to_string())?;
        if (dice, jac) != overlap_oracle(p, g) {
            return Err(format!("case {i}: overlap {:?} vs oracle {:?}", (dice, jac), overlap_oracle(p, g)));
        }
        let d = dice / 100.0;
        if (jac / 100.0 - d / (2.0 - d)).abs() > 1e-12 {
            return Err(format!("case {i}: jaccard {jac} is not dice/(2-dice) for dice {dice}"));
        }
        let got = surface_distances(p, g, h, w).map_err(|e| e.to_string())?;
        match (got, surface_oracle(p, g, h, w)) {
            (Some(a), Some(b)) => worst = worst.max((a.0 - b.0).abs()).max((a.1 - b.1).abs()),
            (None, None) => {}
            other => return Err(format!("case {i}: empty-mask handling differs {other:?}")),
        }
    }
    if worst > 1e-9 {
        return Err(format!("surface distance error {worst:.2e}"));
    }
    Ok(format!("{} cases, max distance error {worst:.2e}", cases.len()))
}
