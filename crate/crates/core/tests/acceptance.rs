//! Acceptance criteria. Each test prints one `criterion N ...: PASS|FAIL`
//! line to stderr (uncaptured) and then asserts.

use std::collections::HashSet;
use std::io::Write;
use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qmaxvit::backbone::{FullAttention, Partition, PartitionAttention};
use qmaxvit::checkpoint::{self, CheckpointMeta};
use qmaxvit::data::{synth_shapes_dataset, Batch, ImageSample};
use qmaxvit::losses::{self, LossWeights};
use qmaxvit::metrics;
use qmaxvit::model::{Component, ModelConfig, QMaxVitUnet, Toggles};
use qmaxvit::nn::{self as qnn, counter, ParamStore};
use qmaxvit::train::{compute_losses, evaluate, fit, TrainConfig, Trainer};

fn verdict(n: usize, name: &str, pass: bool, detail: &str) {
    let status = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {n:>2} {name}: {status} ({detail})");
    assert!(pass, "criterion {n} {name}: {detail}");
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(r: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(lo..hi)).collect()
}

fn tensor(v: Vec<f64>, shape: &[usize]) -> Tensor {
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn host(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar().unwrap()
}

fn rel(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(1e-300)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `||a - b|| / max(||a||, ||b||)`.
fn normwise(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&d) / norm(a).max(norm(b)).max(1e-300)
}

// Loss oracles on [B, C, 8, 8] in plain loops.

const B: usize = 2;
const C: usize = 4;
const HW: usize = 64;
const SIDE: usize = 8;
const DICE_SMOOTH: f64 = 1e-5;

fn at(b: usize, c: usize, p: usize) -> usize {
    (b * C + c) * HW + p
}

fn oracle_partial_ce(logits: &[f64], labels: &[u32]) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for b in 0..B {
        for p in 0..HW {
            let l = labels[b * HW + p] as usize;
            if l >= C {
                continue;
            }
            let m = (0..C).map(|c| logits[at(b, c, p)]).fold(f64::NEG_INFINITY, f64::max);
            let lse = m + (0..C).map(|c| (logits[at(b, c, p)] - m).exp()).sum::<f64>().ln();
            sum += lse - logits[at(b, l, p)];
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn oracle_dice(p: &[f64], t: &[f64], background: bool) -> f64 {
    let classes = if background { 0..C } else { 1..C };
    let k = classes.len() as f64;
    let mut total = 0.0;
    for c in classes {
        let (mut inter, mut sp, mut st) = (0.0, 0.0, 0.0);
        for b in 0..B {
            for q in 0..HW {
                let i = at(b, c, q);
                inter += p[i] * t[i];
                sp += p[i];
                st += t[i];
            }
        }
        total += 1.0 - (2.0 * inter + DICE_SMOOTH) / (sp + st + DICE_SMOOTH);
    }
    total / k
}

fn argmax_at(v: &[f64], b: usize, p: usize) -> usize {
    let mut best = 0;
    for c in 1..C {
        if v[at(b, c, p)] > v[at(b, best, p)] {
            best = c;
        }
    }
    best
}

fn oracle_psl(y1: &[f64], y2: &[f64], alpha: f64, background: bool) -> f64 {
    let mixed: Vec<f64> = y1.iter().zip(y2).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect();
    let mut onehot = vec![0.0; B * C * HW];
    for b in 0..B {
        for p in 0..HW {
            onehot[at(b, argmax_at(&mixed, b, p), p)] = 1.0;
        }
    }
    0.5 * (oracle_dice(y1, &onehot, background) + oracle_dice(y2, &onehot, background))
}

fn oracle_esl(p: &[f64], g: &[f64]) -> f64 {
    p.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64
}

fn softmax_host(logits: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    for b in 0..B {
        for p in 0..HW {
            let m = (0..C).map(|c| logits[at(b, c, p)]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..C).map(|c| (logits[at(b, c, p)] - m).exp()).sum();
            for c in 0..C {
                out[at(b, c, p)] = (logits[at(b, c, p)] - m).exp() / z;
            }
        }
    }
    out
}

fn random_scribble(r: &mut ChaCha8Rng, known: f64) -> Vec<u32> {
    let mut labels: Vec<u32> = (0..B * HW)
        .map(|_| if r.random_bool(known) { r.random_range(0..C as u32) } else { C as u32 })
        .collect();
    labels[0] = r.random_range(0..C as u32);
    labels
}

fn labels_tensor(v: Vec<u32>) -> Tensor {
    Tensor::from_vec(v, (B, SIDE, SIDE), &Device::Cpu).unwrap()
}

const SHAPE: [usize; 4] = [B, C, SIDE, SIDE];

#[test]
fn criterion_01_loss_oracles() {
    let start = Instant::now();
    let mut r = rng(1);
    let mut worst = [0.0f64; 4];
    for i in 0..200 {
        let logits = uniform(&mut r, B * C * HW, -4.0, 4.0);
        let labels = random_scribble(&mut r, 0.3);
        let got = scalar(&losses::partial_ce(&tensor(logits.clone(), &SHAPE), &labels_tensor(labels.clone())).unwrap());
        worst[0] = worst[0].max(rel(got, oracle_partial_ce(&logits, &labels)));

        let probs = softmax_host(&logits);
        let dense: Vec<usize> = (0..B * HW).map(|_| r.random_range(0..C)).collect();
        let mut target = vec![0.0; B * C * HW];
        for (j, &c) in dense.iter().enumerate() {
            target[at(j / HW, c, j % HW)] = 1.0;
        }
        let background = i % 2 == 0;
        let got = scalar(&losses::dice_loss(&tensor(probs.clone(), &SHAPE), &tensor(target.clone(), &SHAPE), background).unwrap());
        worst[1] = worst[1].max(rel(got, oracle_dice(&probs, &target, background)));

        let pred = uniform(&mut r, B * HW, -0.5, 1.5);
        let gt = uniform(&mut r, B * HW, 0.0, 1.0);
        let got = scalar(&losses::esl_loss(&tensor(pred.clone(), &[B, 1, SIDE, SIDE]), &tensor(gt.clone(), &[B, 1, SIDE, SIDE])).unwrap());
        worst[2] = worst[2].max(rel(got, oracle_esl(&pred, &gt)));

        let y2 = softmax_host(&uniform(&mut r, B * C * HW, -4.0, 4.0));
        let alpha = r.random_range(0.01..0.99);
        let got = scalar(&losses::psl_loss(&tensor(probs.clone(), &SHAPE), &tensor(y2.clone(), &SHAPE), alpha, background).unwrap());
        worst[3] = worst[3].max(rel(got, oracle_psl(&probs, &y2, alpha, background)));
    }
    let secs = start.elapsed().as_secs_f64();
    let max = worst.iter().cloned().fold(0.0, f64::max);
    verdict(
        1,
        "loss oracles",
        max <= 1e-9 && secs < 10.0,
        &format!(
            "200 instances; max rel err partial_ce {:.1e}, dice {:.1e}, esl {:.1e}, psl {:.1e}; {secs:.2}s",
            worst[0], worst[1], worst[2], worst[3]
        ),
    );
}

/// Analytic gradient of `f` against central differences over every input
/// coordinate. Returns the norm-wise relative error.
fn check_inputs(f: &dyn Fn(&[Tensor]) -> Tensor, inputs: &[(Vec<f64>, Vec<usize>)], h: f64) -> f64 {
    let vars: Vec<Var> = inputs.iter().map(|(v, s)| Var::from_tensor(&tensor(v.clone(), s)).unwrap()).collect();
    let ts: Vec<Tensor> = vars.iter().map(|v| v.as_tensor().clone()).collect();
    let grads = f(&ts).backward().unwrap();
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for (i, (v, _)) in inputs.iter().enumerate() {
        let g = grads.get(vars[i].as_tensor()).map(host).unwrap_or_else(|| vec![0.0; v.len()]);
        for k in 0..v.len() {
            let eval = |d: f64| {
                let args: Vec<Tensor> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, (w, sj))| {
                        let mut w = w.clone();
                        if j == i {
                            w[k] += d;
                        }
                        tensor(w, sj)
                    })
                    .collect();
                scalar(&f(&args))
            };
            numeric.push((eval(h) - eval(-h)) / (2.0 * h));
            analytic.push(g[k]);
        }
    }
    normwise(&analytic, &numeric)
}

fn set_entry(var: &Var, k: usize, value: f64) {
    let mut v = host(var.as_tensor());
    v[k] = value;
    var.set(&Tensor::from_vec(v, var.shape(), &Device::Cpu).unwrap()).unwrap();
}

#[test]
fn criterion_02_gradient_checks() {
    let start = Instant::now();
    let mut r = rng(2);
    let h = 1e-6;
    let mut loss_err = [0.0f64; 4];
    for _ in 0..5 {
        let labels = labels_tensor(random_scribble(&mut r, 0.4));
        let l1 = uniform(&mut r, B * C * HW, -3.0, 3.0);
        let l2 = uniform(&mut r, B * C * HW, -3.0, 3.0);
        let sh = SHAPE.to_vec();

        let lab = labels.clone();
        let ce = move |x: &[Tensor]| losses::partial_ce(&x[0], &lab).unwrap();
        loss_err[0] = loss_err[0].max(check_inputs(&ce, &[(l1.clone(), sh.clone())], h));

        let alpha = r.random_range(0.05..0.95);
        let psl = move |x: &[Tensor]| {
            let p1 = qnn::softmax(&x[0], 1).unwrap();
            let p2 = qnn::softmax(&x[1], 1).unwrap();
            losses::psl_loss(&p1, &p2, alpha, true).unwrap()
        };
        loss_err[1] = loss_err[1].max(check_inputs(&psl, &[(l1.clone(), sh.clone()), (l2.clone(), sh.clone())], h));

        let dense: Vec<u32> = (0..B * HW).map(|_| r.random_range(0..C as u32)).collect();
        let target = losses::one_hot(&labels_tensor(dense), C, DType::F64).unwrap();
        let dice = move |x: &[Tensor]| losses::dice_loss(&qnn::softmax(&x[0], 1).unwrap(), &target, false).unwrap();
        loss_err[2] = loss_err[2].max(check_inputs(&dice, &[(l2.clone(), sh.clone())], h));

        let gt = tensor(uniform(&mut r, B * HW, 0.0, 1.0), &[B, 1, SIDE, SIDE]);
        let esl = move |x: &[Tensor]| losses::esl_loss(&x[0], &gt).unwrap();
        loss_err[3] = loss_err[3].max(check_inputs(&esl, &[(uniform(&mut r, B * HW, -1.0, 2.0), vec![B, 1, SIDE, SIDE])], h));
    }

    // Full tiny model: weighted readout of y1, y2 and the edge map.
    let mut cfg = ModelConfig::desk(C, 32);
    cfg.in_channels = 3;
    let model = QMaxVitUnet::new(&cfg, DType::F64, 7).unwrap();
    let x = tensor(uniform(&mut r, 2 * 3 * 32 * 32, 0.0, 1.0), &[2, 3, 32, 32]);
    let probe = model.forward(&x, true).unwrap();
    let mut weight_like = |t: &Tensor| tensor(uniform(&mut r, t.elem_count(), -1.0, 1.0), t.dims());
    let w1 = weight_like(&probe.y1);
    let w2 = weight_like(probe.y2.as_ref().unwrap());
    let w3 = weight_like(probe.edge_pred.as_ref().unwrap());
    let readout = || -> Tensor {
        let o = model.forward(&x, true).unwrap();
        let a = (&o.y1 * &w1).unwrap().sum_all().unwrap();
        let b = (o.y2.unwrap() * &w2).unwrap().sum_all().unwrap();
        let c = (o.edge_pred.unwrap() * &w3).unwrap().sum_all().unwrap();
        ((a + b).unwrap() + c).unwrap()
    };
    let grads = readout().backward().unwrap();
    let vars = model.active_vars();
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for (_, var) in &vars {
        let k = r.random_range(0..var.elem_count());
        analytic.push(grads.get(var.as_tensor()).map(|g| host(g)[k]).unwrap_or(0.0));
        let orig = host(var.as_tensor())[k];
        set_entry(var, k, orig + h);
        let plus = scalar(&readout());
        set_entry(var, k, orig - h);
        let minus = scalar(&readout());
        set_entry(var, k, orig);
        numeric.push((plus - minus) / (2.0 * h));
    }
    let model_err = normwise(&analytic, &numeric);
    let secs = start.elapsed().as_secs_f64();
    let max = loss_err.iter().cloned().fold(model_err, f64::max);
    verdict(
        2,
        "gradient checks",
        max <= 1e-4 && secs < 300.0,
        &format!(
            "rel err partial_ce {:.1e}, psl {:.1e}, dice {:.1e}, esl {:.1e}; model {model_err:.1e} over {} tensors; {secs:.1}s",
            loss_err[0],
            loss_err[1],
            loss_err[2],
            loss_err[3],
            vars.len()
        ),
    );
}

#[test]
fn criterion_03_pseudo_label_invariants() {
    let mut r = rng(3);
    let (mut shared, mut violations, mut worst) = (0usize, 0usize, 0.0f64);
    for _ in 0..1000 {
        let y1 = softmax_host(&uniform(&mut r, B * C * HW, -3.0, 3.0));
        let y2 = softmax_host(&uniform(&mut r, B * C * HW, -3.0, 3.0));
        let alpha = r.random_range(0.001..0.999);
        let (t1, t2) = (tensor(y1.clone(), &SHAPE), tensor(y2.clone(), &SHAPE));
        let mixed: Vec<u32> = losses::mix_pseudo_label(&t1, &t2, alpha)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
        for b in 0..B {
            for p in 0..HW {
                let (a1, a2) = (argmax_at(&y1, b, p), argmax_at(&y2, b, p));
                if a1 == a2 {
                    shared += 1;
                    violations += (mixed[b * HW + p] as usize != a1) as usize;
                }
            }
        }
        let fwd = scalar(&losses::psl_loss(&t1, &t2, alpha, true).unwrap());
        let swapped = scalar(&losses::psl_loss(&t2, &t1, 1.0 - alpha, true).unwrap());
        worst = worst.max((fwd - swapped).abs());
    }
    verdict(
        3,
        "pseudo-label invariants",
        violations == 0 && worst <= 1e-12,
        &format!("1000 draws; {violations} of {shared} shared-argmax pixels changed; max swap gap {worst:.1e}"),
    );
}

fn max_change(a: &[f64], b: &[f64], c: usize, y: usize, x: usize, w: usize) -> f64 {
    let base = (y * w + x) * c;
    (0..c).map(|k| (a[base + k] - b[base + k]).abs()).fold(0.0, f64::max)
}

#[test]
fn criterion_04_attention_structure() {
    let (side, c, s) = (8usize, 8usize, 2usize);
    let store = ParamStore::new(DType::F64, 4);
    let root = store.root();
    let block = PartitionAttention::new(&root.pp("block"), c, 2, Partition::Block, s).unwrap();
    let grid = PartitionAttention::new(&root.pp("grid"), c, 2, Partition::Grid, s).unwrap();
    let mut r = rng(4);
    let x = uniform(&mut r, side * side * c, -1.0, 1.0);
    let mut leak = 0.0f64;
    let mut weakest_inside = f64::INFINITY;
    for (attn, same) in [
        (&block, Box::new(|a: (usize, usize), b: (usize, usize)| (a.0 / s, a.1 / s) == (b.0 / s, b.1 / s)) as Box<dyn Fn(_, _) -> bool>),
        (&grid, Box::new(|a: (usize, usize), b: (usize, usize)| (a.0 % (side / s), a.1 % (side / s)) == (b.0 % (side / s), b.1 % (side / s)))),
    ] {
        let base = host(&attn.attend(&tensor(x.clone(), &[1, side, side, c])).unwrap());
        for src in 0..side * side {
            let (sy, sx) = (src / side, src % side);
            let mut xp = x.clone();
            for k in 0..c {
                xp[src * c + k] += 0.5;
            }
            let out = host(&attn.attend(&tensor(xp, &[1, side, side, c])).unwrap());
            let mut inside = 0.0f64;
            for y in 0..side {
                for xx in 0..side {
                    let d = max_change(&base, &out, c, y, xx, side);
                    if same((sy, sx), (y, xx)) {
                        if (y, xx) != (sy, sx) {
                            inside = inside.max(d);
                        }
                    } else {
                        leak = leak.max(d);
                    }
                }
            }
            weakest_inside = weakest_inside.min(inside);
        }
    }

    // Score cost against analytic counts: N*n*c for partitions of n tokens,
    // N*N*c for full attention.
    let full = FullAttention::new(&root.pp("full"), c, 2).unwrap();
    let window = PartitionAttention::new(&root.pp("cost"), c, 2, Partition::Block, 4).unwrap();
    let mut worst_ratio = 0.0f64;
    let mut costs = Vec::new();
    for side in [8usize, 16, 32] {
        let n_tokens = side * side;
        let x = tensor(uniform(&mut r, n_tokens * c, -1.0, 1.0), &[1, side, side, c]);
        counter::reset();
        window.attend(&x).unwrap();
        let part = counter::score_macs();
        counter::reset();
        full.attend(&x).unwrap();
        let dense = counter::score_macs();
        let part_expect = (n_tokens * 16 * c) as f64;
        let dense_expect = (n_tokens * n_tokens * c) as f64;
        worst_ratio = worst_ratio
            .max((part as f64 / part_expect - 1.0).abs())
            .max((dense as f64 / dense_expect - 1.0).abs());
        costs.push((part, dense));
    }
    let growth_part = costs[2].0 as f64 / costs[0].0 as f64;
    let growth_full = costs[2].1 as f64 / costs[0].1 as f64;
    verdict(
        4,
        "attention structure",
        leak <= 1e-12 && weakest_inside > 1e-6 && worst_ratio <= 0.05 && growth_part == 16.0 && growth_full == 256.0,
        &format!(
            "max cross-group change {leak:.1e}, min in-group change {weakest_inside:.1e}; cost vs analytic within {:.1}%; 16x tokens: window x{growth_part}, full x{growth_full}",
            100.0 * worst_ratio
        ),
    );
}

#[test]
fn criterion_05_shape_schedule() {
    let mut mismatches = Vec::new();
    let mut query_dims = Vec::new();
    for size in [64usize, 128, 256] {
        let cfg = ModelConfig::standard(C, size);
        let model = QMaxVitUnet::new(&cfg, DType::F32, 5).unwrap();
        let x = Tensor::rand(0f32, 1f32, (1, 1, size, size), &Device::Cpu).unwrap();
        let out = model.forward(&x, false).unwrap();
        for (i, level) in out.pyramid.levels().iter().enumerate() {
            let want = (96 << i, size >> (2 + i), size >> (2 + i));
            if level.chw() != want {
                mismatches.push(format!("size {size} stage {}: {:?} vs {want:?}", i + 1, level.chw()));
            }
        }
        if out.y1.dims() != [1, C, size, size] {
            mismatches.push(format!("size {size} y1 {:?}", out.y1.dims()));
        }
        query_dims.push(out.queries.unwrap().queries.dims().to_vec());
    }
    let queries_ok = query_dims.iter().all(|d| d == &[1, C, 768]);
    verdict(
        5,
        "shape schedule",
        mismatches.is_empty() && queries_ok,
        &format!("sizes 64/128/256; mismatches {mismatches:?}; query dims {:?}", query_dims[0]),
    );
}

fn oracle_boundary(m: &Array2<u32>) -> Vec<(usize, usize)> {
    let (h, w) = m.dim();
    let inside = |y: isize, x: isize| y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && m[[y as usize, x as usize]] == 1;
    let mut out = Vec::new();
    for y in 0..h as isize {
        for x in 0..w as isize {
            if inside(y, x) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dy, dx)| !inside(y + dy, x + dx)) {
                out.push((y as usize, x as usize));
            }
        }
    }
    out
}

fn oracle_percentile95(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = 0.95 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

fn oracle_hd95(a: &Array2<u32>, b: &Array2<u32>, sp: (f64, f64)) -> f64 {
    let (ba, bb) = (oracle_boundary(a), oracle_boundary(b));
    let (h, w) = a.dim();
    match (ba.is_empty(), bb.is_empty()) {
        (true, true) => return 0.0,
        (true, false) | (false, true) => return ((h as f64 * sp.0).powi(2) + (w as f64 * sp.1).powi(2)).sqrt(),
        _ => {}
    }
    let directed = |from: &[(usize, usize)], to: &[(usize, usize)]| -> Vec<f64> {
        from.iter()
            .map(|&(y, x)| {
                to.iter()
                    .map(|&(ty, tx)| {
                        let dy = (y as f64 - ty as f64) * sp.0;
                        let dx = (x as f64 - tx as f64) * sp.1;
                        (dy * dy + dx * dx).sqrt()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    };
    oracle_percentile95(directed(&ba, &bb)).max(oracle_percentile95(directed(&bb, &ba)))
}

fn oracle_dsc(a: &Array2<u32>, b: &Array2<u32>) -> f64 {
    let sa = a.iter().filter(|&&v| v == 1).count();
    let sb = b.iter().filter(|&&v| v == 1).count();
    let both = a.iter().zip(b.iter()).filter(|(&x, &y)| x == 1 && y == 1).count();
    if sa + sb == 0 {
        1.0
    } else {
        2.0 * both as f64 / (sa + sb) as f64
    }
}

fn mask3(bits: usize) -> Array2<u32> {
    Array2::from_shape_fn((3, 3), |(y, x)| ((bits >> (y * 3 + x)) & 1) as u32)
}

fn random_blob(r: &mut ChaCha8Rng, side: usize) -> Array2<u32> {
    let (cy, cx) = (r.random_range(3.0..side as f64 - 3.0), r.random_range(3.0..side as f64 - 3.0));
    let (ry, rx) = (r.random_range(1.5..5.0), r.random_range(1.5..5.0));
    Array2::from_shape_fn((side, side), |(y, x)| {
        let v = ((y as f64 - cy) / ry).powi(2) + ((x as f64 - cx) / rx).powi(2);
        (v <= 1.0 || r.random_bool(0.02)) as u32
    })
}

#[test]
fn criterion_06_metric_oracles() {
    let start = Instant::now();
    let masks: Vec<Array2<u32>> = (0..512).map(mask3).collect();
    let mut mismatches = 0usize;
    for a in &masks {
        for b in &masks {
            let d = metrics::dsc(a.view(), b.view(), 1);
            let h = metrics::hd95(a.view(), b.view(), 1, (1.0, 1.0)).unwrap();
            if d != oracle_dsc(a, b) || h != oracle_hd95(a, b, (1.0, 1.0)) {
                mismatches += 1;
            }
        }
    }
    let mut r = rng(6);
    let mut aniso_err = 0.0f64;
    let mut linear_err = 0.0f64;
    for _ in 0..200 {
        let (a, b) = (random_blob(&mut r, 24), random_blob(&mut r, 24));
        let sp = (r.random_range(0.3..3.0), r.random_range(0.3..3.0));
        aniso_err = aniso_err.max(rel(metrics::hd95(a.view(), b.view(), 1, sp).unwrap(), oracle_hd95(&a, &b, sp)));
        let unit = metrics::hd95(a.view(), b.view(), 1, (1.0, 1.0)).unwrap();
        let k = r.random_range(0.1..10.0);
        let scaled = metrics::hd95(a.view(), b.view(), 1, (k, k)).unwrap();
        if unit > 0.0 {
            linear_err = linear_err.max(rel(scaled, k * unit));
        }
    }
    let empty = Array2::<u32>::zeros((3, 3));
    let conventions = metrics::hd95(empty.view(), empty.view(), 1, (1.0, 1.0)).unwrap() == 0.0
        && metrics::dsc(empty.view(), empty.view(), 1) == 1.0
        && metrics::hd95(empty.view(), masks[1].view(), 1, (2.0, 0.5)).unwrap() == (36.0f64 + 2.25).sqrt();
    let secs = start.elapsed().as_secs_f64();
    verdict(
        6,
        "metric oracles",
        mismatches == 0 && aniso_err <= 1e-12 && linear_err <= 1e-12 && conventions,
        &format!(
            "262144 pairs, {mismatches} mismatches; anisotropic rel err {aniso_err:.1e}; spacing linearity rel err {linear_err:.1e}; empty-mask conventions {}; {secs:.1}s",
            if conventions { "hold" } else { "broken" }
        ),
    );
}

#[test]
fn criterion_07_ignore_semantics() {
    let mut r = rng(7);
    let mut changed = 0usize;
    let mut grad_leak = 0.0f64;
    for _ in 0..100 {
        let labels = random_scribble(&mut r, 0.25);
        let logits = uniform(&mut r, B * C * HW, -3.0, 3.0);
        let lt = labels_tensor(labels.clone());
        let base = scalar(&losses::partial_ce(&tensor(logits.clone(), &SHAPE), &lt).unwrap());
        let mut noisy = logits.clone();
        for b in 0..B {
            for p in 0..HW {
                if labels[b * HW + p] == C as u32 {
                    for c in 0..C {
                        noisy[at(b, c, p)] += r.random_range(-50.0..50.0);
                    }
                }
            }
        }
        let var = Var::from_tensor(&tensor(noisy, &SHAPE)).unwrap();
        let loss = losses::partial_ce(var.as_tensor(), &lt).unwrap();
        changed += (scalar(&loss).to_bits() != base.to_bits()) as usize;
        let g = host(loss.backward().unwrap().get(var.as_tensor()).unwrap());
        for b in 0..B {
            for p in 0..HW {
                if labels[b * HW + p] == C as u32 {
                    for c in 0..C {
                        grad_leak = grad_leak.max(g[at(b, c, p)].abs());
                    }
                }
            }
        }
    }
    let none = labels_tensor(vec![C as u32; B * HW]);
    let empty = scalar(&losses::partial_ce(&tensor(uniform(&mut r, B * C * HW, -3.0, 3.0), &SHAPE), &none).unwrap());
    verdict(
        7,
        "ignore semantics",
        changed == 0 && grad_leak == 0.0 && empty == 0.0,
        &format!("{changed} of 100 losses changed under unlabeled perturbation; max unlabeled grad {grad_leak:.1e}; all-unlabeled loss {empty}"),
    );
}

fn scribble_only(samples: &[ImageSample]) -> Vec<ImageSample> {
    samples
        .iter()
        .cloned()
        .map(|mut s| {
            s.dense_gt = None;
            s
        })
        .collect()
}

#[test]
fn criterion_08_desk_training_smoke() {
    let start = Instant::now();
    let data = synth_shapes_dataset(250, 64, 4, 0).unwrap();
    let (train, test) = data.split_at(200);
    let train = scribble_only(train);
    let run = |t: Toggles| -> f64 {
        let mut model = ModelConfig::desk(4, 64);
        model.toggles = t;
        let mut cfg = TrainConfig::new(model);
        cfg.epochs = 30;
        cfg.seed = 0;
        let r = fit(&cfg, &train, None, |_| {}).unwrap();
        evaluate(&r.trainer.model, test).unwrap().0.dsc_avg
    };
    let full = run(Toggles::all());
    let baseline = run(Toggles::none());
    let secs = start.elapsed().as_secs_f64();
    verdict(
        8,
        "desk training smoke",
        full >= 0.75 && full > baseline && secs <= 1800.0,
        &format!("test DSC full {full:.4}, baseline {baseline:.4}; {:.1} min", secs / 60.0),
    );
}

#[test]
fn criterion_09_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_shapes_dataset(12, 32, 4, 5).unwrap();
    let (train, val) = data.split_at(8);
    let train = scribble_only(train);
    let mut cfg = TrainConfig::new(ModelConfig::desk(4, 32));
    cfg.epochs = 2;
    cfg.batch_size = 4;
    cfg.seed = 11;
    let a = fit(&cfg, &train, Some(val), |_| {}).unwrap();
    let b = fit(&cfg, &train, Some(val), |_| {}).unwrap();
    let (pa, pb) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    a.history.write_csv(&pa).unwrap();
    b.history.write_csv(&pb).unwrap();
    let same_history = std::fs::read(&pa).unwrap() == std::fs::read(&pb).unwrap();
    let loss_gap = a
        .history
        .records
        .iter()
        .zip(&b.history.records)
        .flat_map(|(x, y)| {
            [
                rel(x.loss_total, y.loss_total),
                rel(x.loss_ssl, y.loss_ssl),
                rel(x.loss_psl, y.loss_psl),
                rel(x.loss_esl, y.loss_esl),
            ]
        })
        .fold(0.0, f64::max);

    let ckpt = dir.path().join("model.safetensors");
    checkpoint::save(&ckpt, &a.trainer.model, &CheckpointMeta::default()).unwrap();
    let (loaded, _) = checkpoint::load(&ckpt, DType::F32).unwrap();
    let (mem, mem_each) = evaluate(&a.trainer.model, val).unwrap();
    let (disk, disk_each) = evaluate(&loaded, val).unwrap();
    let (disk2, _) = evaluate(&loaded, val).unwrap();
    let bits = |m: &metrics::MetricReport| m.flat().values().map(|v| v.to_bits()).collect::<Vec<_>>();
    let same_report = bits(&mem) == bits(&disk) && bits(&disk) == bits(&disk2) && mem_each == disk_each;
    verdict(
        9,
        "determinism",
        same_history && loss_gap <= 1e-6 && same_report,
        &format!(
            "history CSVs {}, max loss rel gap {loss_gap:.1e}; reports after save/load {}",
            if same_history { "identical" } else { "differ" },
            if same_report { "bit-identical" } else { "differ" }
        ),
    );
}

#[test]
fn criterion_10_ablation_harness() {
    let data = synth_shapes_dataset(4, 32, 4, 9).unwrap();
    let refs: Vec<&ImageSample> = data[..2].iter().collect();
    let batch = Batch::from_samples(&refs, DType::F32).unwrap();
    let grid = Toggles::grid();
    let distinct: HashSet<Toggles> = grid.iter().copied().collect();
    let mut structure_errors = Vec::new();
    let mut leaking = Vec::new();
    for t in grid {
        let mut cfg = ModelConfig::desk(4, 32);
        cfg.toggles = t;
        let model = QMaxVitUnet::new(&cfg, DType::F32, 3).unwrap();
        let out = model.forward(&batch.images, true).unwrap();
        let terms = compute_losses(&out, &batch, 0.5, &LossWeights::default(), true).unwrap();
        let shape_ok = out.y2.is_some() == t.dual_decoder
            && out.edge_pred.is_some() == t.edge
            && out.queries.is_some() == t.query
            && out.refined.is_some() == t.query
            && terms.psl.is_some() == t.dual_decoder
            && terms.esl.is_some() == t.edge;
        if !shape_ok {
            structure_errors.push(t.label());
        }
        let grads = terms.total.backward().unwrap();
        for (name, var) in model.store().trainable(|_| true) {
            if Component::of(&name).is_active(t) {
                continue;
            }
            if let Some(g) = grads.get(var.as_tensor()) {
                if host(g).iter().any(|&v| v != 0.0) {
                    leaking.push(format!("{}: {name}", t.label()));
                }
            }
        }
    }

    let data = synth_shapes_dataset(4, 32, 4, 10).unwrap();
    let mut model = ModelConfig::desk(4, 32);
    model.toggles = Toggles::none();
    let mut cfg = TrainConfig::new(model);
    cfg.epochs = 1;
    cfg.batch_size = 2;
    let mut trainer = Trainer::new(&cfg, DType::F32).unwrap();
    let before = trainer.model.store().snapshot().unwrap();
    trainer.train_epoch(&data).unwrap();
    let after = trainer.model.store().snapshot().unwrap();
    let (mut frozen_moved, mut active_moved) = (0usize, 0usize);
    for (name, t0) in &before {
        let moved = host(t0).iter().zip(host(&after[name])).any(|(a, b)| a.to_bits() != b.to_bits());
        if Component::of(name).is_active(Toggles::none()) {
            active_moved += moved as usize;
        } else {
            frozen_moved += moved as usize;
        }
    }
    verdict(
        10,
        "ablation harness",
        distinct.len() == 8 && structure_errors.is_empty() && leaking.is_empty() && frozen_moved == 0 && active_moved > 0,
        &format!(
            "{} configurations; structure errors {structure_errors:?}; nonzero grads on disabled parts {}; all-off epoch moved {frozen_moved} disabled and {active_moved} enabled tensors",
            distinct.len(),
            leaking.len()
        ),
    );
}
