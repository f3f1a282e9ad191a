//! Self-check battery: gradient checks against central finite differences,
//! scheduler invariants, closed-form values, the metric oracle, and gating
//! soundness. The `verify` CLI subcommand runs everything here and fails
//! with exit code 3 when any check fails.
//!
//! The finite-difference oracle is deliberately independent of the backward
//! pass it checks: it only evaluates forward passes (in double precision,
//! `h = 1e-5`) and differences them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::gradcore::{no_grad, Tensor, TensorResult};
use crate::losses::{
    ce_loss, dda_align_loss, dda_mask, dice_loss, mse, sharpen, unsup_loss, warmup, LossWeights,
};
use crate::progressive::{BatchBuffer, Batch, GapScheduler, Mode, TrainerConfig, TrainerState, TrainingSet};
use crate::seeding::derive;
use crate::segmetrics::{dice_jaccard, hd95_asd, hd95_asd_bruteforce};
use crate::segnet::{SegNet, SegNetConfig};
use crate::synthdata::{generate, split, DataGenConfig};

/// One named check outcome.
#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Check {
        Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

// ── finite-difference gradient checks ───────────────────────────────

const FD_H: f64 = 1e-5;
pub const PER_OP_TOL: f64 = 1e-4;
pub const COMPOSITE_TOL: f64 = 1e-3;

type Forward = Box<dyn Fn(&[Tensor<f64>]) -> TensorResult<Tensor<f64>>>;

struct GradCase {
    inputs: Vec<(Vec<usize>, Vec<f64>)>,
    forward: Forward,
}

fn leafs(inputs: &[(Vec<usize>, Vec<f64>)], grad: bool) -> Vec<Tensor<f64>> {
    inputs
        .iter()
        .map(|(shape, vals)| {
            let t = Tensor::from_vec(vals.clone(), shape).expect("finite case inputs");
            t.set_requires_grad(grad);
            t
        })
        .collect()
}

/// Max relative error between analytic gradients and central differences.
fn gradcheck(case: &GradCase) -> TensorResult<f64> {
    let tensors = leafs(&case.inputs, true);
    let loss = (case.forward)(&tensors)?;
    loss.backward()?;
    let grads: Vec<Vec<f64>> = tensors
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let eval = |inputs: &[(Vec<usize>, Vec<f64>)]| -> TensorResult<f64> {
        let t = leafs(inputs, false);
        no_grad(|| (case.forward)(&t))?.item()
    };

    let mut max_rel = 0.0f64;
    for (k, (_, vals)) in case.inputs.iter().enumerate() {
        for i in 0..vals.len() {
            let mut plus = case.inputs.to_vec();
            plus[k].1[i] += FD_H;
            let mut minus = case.inputs.to_vec();
            minus[k].1[i] -= FD_H;
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * FD_H);
            let a = grads[k][i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}

fn rand_vals(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Values bounded away from zero (for kinked ops like relu).
fn rand_vals_off_zero(rng: &mut ChaCha8Rng, n: usize, margin: f64, hi: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mag = rng.gen_range(margin..hi);
            if rng.gen::<bool>() {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

/// Loss scalarization `sum(out * w)` with fixed weights, so every output
/// position contributes to the gradient.
fn weighted_sum(out: &Tensor<f64>, weights: &[f64]) -> TensorResult<Tensor<f64>> {
    let w = Tensor::from_vec(weights.to_vec(), &out.shape())?;
    out.mul(&w)?.sum()
}

fn op_cases(op: &str, instance: u64) -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(derive(0xC0FFEE, instance, hash_op(op)));
    let n = 12usize;
    let shape = vec![3, 4];
    let w = rand_vals(&mut rng, n, -1.0, 1.0);
    match op {
        "add" | "sub" | "mul" => {
            let a = rand_vals(&mut rng, n, -2.0, 2.0);
            let b = rand_vals(&mut rng, n, -2.0, 2.0);
            let name = op.to_string();
            GradCase {
                inputs: vec![(shape.clone(), a), (shape, b)],
                forward: Box::new(move |t| {
                    let out = match name.as_str() {
                        "add" => t[0].add(&t[1])?,
                        "sub" => t[0].sub(&t[1])?,
                        _ => t[0].mul(&t[1])?,
                    };
                    weighted_sum(&out, &w)
                }),
            }
        }
        "div" => {
            let a = rand_vals(&mut rng, n, -2.0, 2.0);
            let b = rand_vals(&mut rng, n, 0.5, 2.0);
            GradCase {
                inputs: vec![(shape.clone(), a), (shape, b)],
                forward: Box::new(move |t| weighted_sum(&t[0].div(&t[1])?, &w)),
            }
        }
        "neg" => {
            let a = rand_vals(&mut rng, n, -2.0, 2.0);
            GradCase {
                inputs: vec![(shape, a)],
                forward: Box::new(move |t| weighted_sum(&t[0].neg()?, &w)),
            }
        }
        "exp" => {
            let a = rand_vals(&mut rng, n, -2.0, 2.0);
            GradCase {
                inputs: vec![(shape, a)],
                forward: Box::new(move |t| weighted_sum(&t[0].exp()?, &w)),
            }
        }
        "ln_clamped" => {
            let a = rand_vals(&mut rng, n, 0.1, 3.0);
            GradCase {
                inputs: vec![(shape, a)],
                forward: Box::new(move |t| weighted_sum(&t[0].ln_clamped(1e-7)?, &w)),
            }
        }
        "powf" => {
            let a = rand_vals(&mut rng, n, 0.2, 2.0);
            let e = [0.5, 1.7, 2.0, 3.0][(instance % 4) as usize];
            GradCase {
                inputs: vec![(shape, a)],
                forward: Box::new(move |t| weighted_sum(&t[0].powf(e)?, &w)),
            }
        }
        "sigmoid" => {
            let a = rand_vals(&mut rng, n, -4.0, 4.0);
            GradCase {
                inputs: vec![(shape, a)],
                forward: Box::new(move |t| weighted_sum(&t[0].sigmoid()?, &w)),
            }
        }
        "relu" => {
            let a = rand_vals_off_zero(&mut rng, n, 0.05, 2.0);
            GradCase {
                inputs: vec![(shape, a)],
                forward: Box::new(move |t| weighted_sum(&t[0].relu()?, &w)),
            }
        }
        "scalar_ops" => {
            let a = rand_vals(&mut rng, n, -2.0, 2.0);
            let s = rng.gen_range(0.5..2.0);
            GradCase {
                inputs: vec![(shape, a)],
                forward: Box::new(move |t| {
                    let out = t[0]
                        .add_scalar(s)?
                        .mul_scalar(1.7)?
                        .sub_scalar(0.3)?
                        .rsub_scalar(2.0)?
                        .div_scalar(1.3)?;
                    weighted_sum(&out, &w)
                }),
            }
        }
        "sum" => {
            let a = rand_vals(&mut rng, n, -2.0, 2.0);
            GradCase {
                inputs: vec![(shape, a)],
                forward: Box::new(|t| t[0].sum()),
            }
        }
        "mean" => {
            let a = rand_vals(&mut rng, n, -2.0, 2.0);
            GradCase {
                inputs: vec![(shape, a)],
                forward: Box::new(|t| t[0].mean()),
            }
        }
        "concat" => {
            let a = rand_vals(&mut rng, 6, -2.0, 2.0);
            let b = rand_vals(&mut rng, 9, -2.0, 2.0);
            let w = rand_vals(&mut rng, 15, -1.0, 1.0);
            GradCase {
                inputs: vec![(vec![3, 2], a), (vec![3, 3], b)],
                forward: Box::new(move |t| {
                    weighted_sum(&Tensor::concat(&[t[0].clone(), t[1].clone()], 1)?, &w)
                }),
            }
        }
        "narrow" => {
            let a = rand_vals(&mut rng, n, -2.0, 2.0);
            let w = rand_vals(&mut rng, 6, -1.0, 1.0);
            GradCase {
                inputs: vec![(shape, a)],
                forward: Box::new(move |t| weighted_sum(&t[0].narrow(1, 1, 2)?, &w)),
            }
        }
        "conv2d" | "conv2d_stride2" => {
            let stride = if op == "conv2d" { 1 } else { 2 };
            let input = rand_vals(&mut rng, 2 * 3 * 8 * 8, -1.0, 1.0);
            let weight = rand_vals(&mut rng, 2 * 3 * 9, -0.5, 0.5);
            let bias = rand_vals(&mut rng, 2, -0.5, 0.5);
            let out_hw = if stride == 1 { 8 } else { 4 };
            let w = rand_vals(&mut rng, 2 * 2 * out_hw * out_hw, -1.0, 1.0);
            GradCase {
                inputs: vec![
                    (vec![2, 3, 8, 8], input),
                    (vec![2, 3, 3, 3], weight),
                    (vec![2], bias),
                ],
                forward: Box::new(move |t| {
                    weighted_sum(&t[0].conv2d(&t[1], &t[2], stride, 1)?, &w)
                }),
            }
        }
        "maxpool2x" => {
            // distinct values so the argmax is stable under +-h
            let mut a = rand_vals(&mut rng, 2 * 16, -2.0, 2.0);
            for (i, v) in a.iter_mut().enumerate() {
                *v += i as f64 * 1e-3;
            }
            let w = rand_vals(&mut rng, 2 * 4, -1.0, 1.0);
            GradCase {
                inputs: vec![(vec![1, 2, 4, 4], a)],
                forward: Box::new(move |t| weighted_sum(&t[0].maxpool2x()?, &w)),
            }
        }
        "upsample2x" => {
            let a = rand_vals(&mut rng, 2 * 9, -2.0, 2.0);
            let w = rand_vals(&mut rng, 2 * 36, -1.0, 1.0);
            GradCase {
                inputs: vec![(vec![1, 2, 3, 3], a)],
                forward: Box::new(move |t| weighted_sum(&t[0].upsample2x_nearest()?, &w)),
            }
        }
        "ce_loss" => {
            let p = rand_vals(&mut rng, n, 0.05, 0.95);
            let y: Vec<f64> = (0..n).map(|_| f64::from(rng.gen::<bool>())).collect();
            GradCase {
                inputs: vec![(shape.clone(), p)],
                forward: Box::new(move |t| {
                    let target = Tensor::from_vec(y.clone(), &t[0].shape())?;
                    ce_loss(&t[0], &target)
                }),
            }
        }
        "dice_loss" => {
            let p = rand_vals(&mut rng, 2 * 16, 0.05, 0.95);
            let y: Vec<f64> = (0..2 * 16).map(|_| f64::from(rng.gen::<bool>())).collect();
            GradCase {
                inputs: vec![(vec![2, 1, 4, 4], p)],
                forward: Box::new(move |t| {
                    let target = Tensor::from_vec(y.clone(), &t[0].shape())?;
                    dice_loss(&t[0], &target)
                }),
            }
        }
        "mse" => {
            let a = rand_vals(&mut rng, n, 0.0, 1.0);
            let b = rand_vals(&mut rng, n, 0.0, 1.0);
            GradCase {
                inputs: vec![(shape.clone(), a)],
                forward: Box::new(move |t| {
                    let fixed = Tensor::from_vec(b.clone(), &t[0].shape())?;
                    mse(&t[0], &fixed)
                }),
            }
        }
        "unsup_loss" => {
            let p = rand_vals(&mut rng, n, 0.05, 0.95);
            let peer = rand_vals(&mut rng, n, 0.05, 0.95);
            GradCase {
                inputs: vec![(shape.clone(), p)],
                forward: Box::new(move |t| {
                    let peer = Tensor::from_vec(peer.clone(), &t[0].shape())?;
                    unsup_loss(&t[0], &peer, 0.5)
                }),
            }
        }
        "dda_align_loss" => {
            let p = rand_vals(&mut rng, n, 0.05, 0.95);
            let y: Vec<f64> = (0..n).map(|_| f64::from(rng.gen::<bool>())).collect();
            let m: Vec<f64> = (0..n).map(|i| f64::from(i % 3 != 0)).collect();
            GradCase {
                inputs: vec![(shape.clone(), p)],
                forward: Box::new(move |t| {
                    let gt = Tensor::from_vec(y.clone(), &t[0].shape())?;
                    let mask = Tensor::from_vec(m.clone(), &t[0].shape())?;
                    dda_align_loss(&t[0], &gt, &mask)
                }),
            }
        }
        other => unreachable!("unknown gradcheck op {other}"),
    }
}

fn hash_op(op: &str) -> u64 {
    op.bytes().fold(0u64, |acc, b| acc.wrapping_mul(131).wrapping_add(b as u64))
}

pub const GRADCHECK_OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "ln_clamped",
    "powf",
    "sigmoid",
    "relu",
    "scalar_ops",
    "sum",
    "mean",
    "concat",
    "narrow",
    "conv2d",
    "conv2d_stride2",
    "maxpool2x",
    "upsample2x",
    "ce_loss",
    "dice_loss",
    "mse",
    "unsup_loss",
    "dda_align_loss",
];

/// Per-op finite-difference checks: 20 random instances each, max relative
/// error < 1e-4.
pub fn gradient_suite() -> Vec<Check> {
    let mut out = Vec::new();
    for &op in GRADCHECK_OPS {
        let mut worst = 0.0f64;
        let mut failure = None;
        for instance in 0..20 {
            match gradcheck(&op_cases(op, instance)) {
                Ok(rel) => worst = worst.max(rel),
                Err(e) => {
                    failure = Some(format!("instance {instance}: {e}"));
                    break;
                }
            }
        }
        let check = match failure {
            Some(msg) => Check::new(format!("grad/{op}"), false, msg),
            None => Check::new(
                format!("grad/{op}"),
                worst < PER_OP_TOL,
                format!("max rel err {worst:.3e} (tol {PER_OP_TOL:.0e})"),
            ),
        };
        out.push(check);
    }
    out.push(composite_gradcheck());
    out
}

/// Full network + Dice loss gradient w.r.t. every parameter, against finite
/// differences, at `1e-3`.
fn composite_gradcheck() -> Check {
    let cfg = SegNetConfig {
        base_filters: 2,
        depth: 1,
        ..Default::default()
    };
    let net = SegNet::new(cfg).expect("valid tiny config");
    let mut worst = 0.0f64;
    for instance in 0..20 {
        let params = net.init_params::<f64>(1000 + instance);
        let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
        let inputs: Vec<(Vec<usize>, Vec<f64>)> = params
            .iter()
            .map(|(_, t)| (t.shape(), t.to_vec()))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive(0xFACE, instance, 0));
        let x_vals = rand_vals(&mut rng, 64, -1.5, 1.5);
        let y_vals: Vec<f64> = (0..64).map(|_| f64::from(rng.gen::<bool>())).collect();
        let net2 = net.clone();
        let case = GradCase {
            inputs,
            forward: Box::new(move |tensors| {
                let mut p = crate::gradcore::ParamSet::new();
                for (name, t) in names.iter().zip(tensors) {
                    p.push(name.clone(), t.clone())?;
                }
                let x = Tensor::from_vec(x_vals.clone(), &[1, 1, 8, 8])?;
                let y = Tensor::from_vec(y_vals.clone(), &[1, 1, 8, 8])?;
                let pred = net2.forward(&p, &x)?;
                dice_loss(&pred, &y)
            }),
        };
        match gradcheck(&case) {
            Ok(rel) => worst = worst.max(rel),
            Err(e) => {
                return Check::new("grad/composite_net_dice", false, format!("{e}"));
            }
        }
    }
    Check::new(
        "grad/composite_net_dice",
        worst < COMPOSITE_TOL,
        format!("max rel err {worst:.3e} (tol {COMPOSITE_TOL:.0e})"),
    )
}

// ── schedule invariants ─────────────────────────────────────────────

/// No-op-training scheduler simulation capturing gap history, consumption
/// order, and the buffer's peak window.
pub fn simulate_schedule(
    n: usize,
    lead: usize,
    t_max: usize,
) -> (Vec<Vec<usize>>, Vec<Vec<usize>>, usize) {
    let mut sched = GapScheduler::new(n, lead);
    let mut buffer = BatchBuffer::new();
    let mut consumed = vec![Vec::new(); n];
    let mut gaps = Vec::new();
    while let Some(phase) = sched.begin_phase(t_max) {
        loop {
            let idx = sched.iters()[phase.model];
            if idx == buffer.head() {
                buffer.push_fresh(Batch {
                    labeled: vec![],
                    unlabeled: vec![],
                    stream_index: idx,
                });
            }
            buffer.get(idx).expect("buffer holds the cursor window");
            consumed[phase.model].push(idx);
            if sched.advance() {
                break;
            }
        }
        buffer.trim_to(sched.min_iter());
        gaps.push(sched.order_stat_gaps());
    }
    (consumed, gaps, buffer.peak_len())
}

/// End-of-round gap, contiguous consumption, and buffer bound checks for
/// the configurations `(n=2, B in {4, 20})` and `(n=3, B=6)`.
pub fn schedule_suite() -> Vec<Check> {
    let mut out = Vec::new();
    for (n, buffer_len) in [(2usize, 4usize), (2, 20), (3, 6)] {
        let lead = buffer_len / (n - 1);
        let t_max = lead * 30;
        let (consumed, gaps, peak) = simulate_schedule(n, lead, t_max);
        // steady rounds exclude burn-in and the capped wind-down
        let steady: Vec<&Vec<usize>> = gaps
            .iter()
            .enumerate()
            .filter(|(i, _)| *i >= n - 1 && *i < gaps.len() - n)
            .map(|(_, g)| g)
            .collect();
        let enough_rounds = steady.len() >= 10;
        let gaps_ok = steady.iter().all(|g| g.iter().all(|&v| v == lead));
        let contiguous = consumed
            .iter()
            .all(|c| c.iter().enumerate().all(|(want, &got)| want == got));
        let complete = consumed.iter().all(|c| c.len() == t_max);
        let capacity_ok = n != 2 || peak <= 2 * lead;
        out.push(Check::new(
            format!("schedule/n{n}_B{buffer_len}"),
            enough_rounds && gaps_ok && contiguous && complete && capacity_ok,
            format!(
                "{} steady rounds, gap {lead}, peak window {peak}",
                steady.len()
            ),
        ));
    }
    out
}

// ── closed forms ────────────────────────────────────────────────────

pub fn closed_form_suite() -> Vec<Check> {
    let mut out = Vec::new();

    let w0 = warmup(0, 2000, 20.0).expect("valid warmup");
    let expect0 = 20.0 * (-5.0f64).exp();
    out.push(Check::new(
        "closed_form/warmup_t0",
        (w0 - expect0).abs() < 1e-6,
        format!("warmup(0) = {w0:.8} vs 20*e^-5 = {expect0:.8}"),
    ));
    let plateau_half = warmup(1000, 2000, 20.0).expect("valid warmup");
    let plateau_end = warmup(2000, 2000, 20.0).expect("valid warmup");
    out.push(Check::new(
        "closed_form/warmup_plateau",
        plateau_half == 20.0 && plateau_end == 20.0,
        format!("warmup(t_max/2) = {plateau_half}, warmup(t_max) = {plateau_end}"),
    ));

    let sharp = sharpen(&Tensor::<f64>::scalar(0.8), 0.5)
        .and_then(|t| t.item())
        .expect("sharpen valid");
    out.push(Check::new(
        "closed_form/sharpen_0.8_T0.5",
        (sharp - 0.94117647).abs() < 1e-8,
        format!("sharpen = {sharp:.10}"),
    ));

    // EMA k-step closed form on a tiny f64 pair
    let net = SegNet::new(SegNetConfig {
        base_filters: 2,
        depth: 1,
        ..Default::default()
    })
    .expect("valid config");
    let pair = crate::segnet::ModelPair::<f64>::init(&net, 77, 0.9, 0);
    pair.teacher
        .iter()
        .for_each(|(_, t)| t.with_data_mut(|d| d.fill(1.5)));
    pair.student
        .iter()
        .for_each(|(_, t)| t.with_data_mut(|d| d.fill(-0.5)));
    let k = 25;
    for _ in 0..k {
        pair.ema_update().expect("ema");
    }
    let expect = 0.9f64.powi(k) * 1.5 + (1.0 - 0.9f64.powi(k)) * (-0.5);
    let mut max_err = 0.0f64;
    for (_, t) in pair.teacher.iter() {
        t.with_data(|d| {
            for &v in d {
                max_err = max_err.max((v - expect).abs());
            }
        });
    }
    out.push(Check::new(
        "closed_form/ema_k_step",
        max_err < 1e-6,
        format!("max |teacher - closed form| = {max_err:.3e} after {k} steps"),
    ));

    // DDA hand examples
    let t = |v: &[f64]| Tensor::<f64>::from_vec(v.to_vec(), &[v.len()]).expect("finite");
    let m1 = dda_mask(&[t(&[0.9, 0.9, 0.1]), t(&[0.9, 0.1, 0.1])], 0.5)
        .expect("mask")
        .to_vec();
    let m2 = dda_mask(&[t(&[0.9, 0.1]), t(&[0.1, 0.9])], 0.5)
        .expect("mask")
        .to_vec();
    let m3 = dda_mask(&[t(&[0.9, 0.1]), t(&[0.9, 0.1])], 0.5)
        .expect("mask")
        .to_vec();
    let aln = dda_align_loss(
        &t(&[0.9, 0.6, 0.1, 0.2]),
        &t(&[1.0, 1.0, 0.0, 0.0]),
        &t(&[0.0, 1.0, 0.0, 0.0]),
    )
    .and_then(|v| v.item())
    .expect("align");
    let aln_expect = (0.6f64 - 1.0) * (0.6f64 - 1.0);
    out.push(Check::new(
        "closed_form/dda_hand_examples",
        m1 == vec![0.0, 1.0, 0.0]
            && m2 == vec![1.0, 1.0]
            && m3 == vec![0.0, 0.0]
            && aln == aln_expect
            && (aln - 0.16).abs() < 1e-12,
        format!("masks {m1:?} {m2:?} {m3:?}, align {aln:.10}"),
    ));

    out
}

// ── metric oracle ───────────────────────────────────────────────────

/// Fast HD95/ASD vs the all-pairs oracle on `count` random mask pairs.
pub fn metric_oracle_suite() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive(0x0D15, 0, 0));
    let mut worst = 0.0f64;
    let mut dice_exact = true;
    let mut compared = 0;
    while compared < 50 {
        let mut a = vec![0u8; 256];
        let mut b = vec![0u8; 256];
        for i in 0..256 {
            a[i] = u8::from(rng.gen::<f64>() < 0.3);
            b[i] = u8::from(rng.gen::<f64>() < 0.3);
        }
        if a.iter().all(|&v| v == 0) || b.iter().all(|&v| v == 0) {
            continue;
        }
        compared += 1;
        let fast = hd95_asd(&a, &b, 16, 16).expect("nonempty masks");
        let brute = hd95_asd_bruteforce(&a, &b, 16, 16).expect("nonempty masks");
        worst = worst.max((fast.0 - brute.0).abs()).max((fast.1 - brute.1).abs());

        // counting formulas, recomputed inline
        let inter = a.iter().zip(&b).filter(|(&x, &y)| x == 1 && y == 1).count() as f64;
        let na = a.iter().filter(|&&v| v == 1).count() as f64;
        let nb = b.iter().filter(|&&v| v == 1).count() as f64;
        let (d, j) = dice_jaccard(&a, &b).expect("same size");
        dice_exact &= d == 2.0 * inter / (na + nb) && j == inter / (na + nb - inter);
    }
    vec![Check::new(
        "metrics/oracle_equivalence",
        worst < 1e-9 && dice_exact,
        format!("{compared} pairs, max |fast - brute| = {worst:.2e}, overlap formulas exact: {dice_exact}"),
    )]
}

// ── gating soundness ────────────────────────────────────────────────

/// Runs a short but complete training run and checks that every logged
/// iteration with a closed gate contributes exactly zero through the
/// lambda1 and beta terms.
pub fn gating_suite() -> Vec<Check> {
    let data_cfg = DataGenConfig {
        count: 30,
        height: 16,
        width: 16,
        ..Default::default()
    };
    let samples = generate(&data_cfg).expect("synthetic data generates");
    let sp = split(samples.len(), 0.25, 5).expect("valid split");
    let (tset, _) = TrainingSet::from_split(&samples, &sp);
    let cfg = TrainerConfig {
        total_iters: 60,
        buffer_len: 4,
        seed: 5,
        mode: Mode::Pmt,
        ..Default::default()
    };
    let net_cfg = SegNetConfig {
        base_filters: 2,
        depth: 1,
        ..Default::default()
    };
    let mut state = TrainerState::init(cfg, net_cfg, LossWeights::default())
        .expect("valid trainer config");
    state.run(&tset).expect("training completes");

    let mut gated = 0usize;
    let mut sound = true;
    for r in &state.history {
        let b = &r.loss;
        if b.plf_pass == 0 {
            gated += 1;
            let expect = (b.l_ce + b.l_dice) + b.lambda2_t * b.l_t;
            sound &= b.l_total == expect && b.l_aln == 0.0 && b.l_u == 0.0;
        }
    }
    vec![Check::new(
        "gating/plf_zero_contributes_zero",
        sound && gated > 0,
        format!(
            "{} of {} iterations gated, all with exactly zero lambda1/beta contribution",
            gated,
            state.history.len()
        ),
    )]
}

/// The full battery, in the order the acceptance criteria cite them.
pub fn run_all() -> Vec<Check> {
    let mut out = Vec::new();
    out.extend(gradient_suite());
    out.extend(schedule_suite());
    out.extend(closed_form_suite());
    out.extend(metric_oracle_suite());
    out.extend(gating_suite());
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradcheck_catches_a_wrong_gradient() {
        // sanity: a deliberately broken forward (value from mul, gradient
        // path through add) must show a large error
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_vals(&mut rng, 4, 0.5, 1.5);
        let case = GradCase {
            inputs: vec![(vec![4], a)],
            forward: Box::new(|t| {
                // f(x) = sum(x^3) has gradient 3x^2; compare against sum(x^2)'s
                t[0].mul(&t[0])?.sum()
            }),
        };
        let rel = gradcheck(&case).unwrap();
        assert!(rel < PER_OP_TOL, "correct op must pass, got {rel}");
        let broken = GradCase {
            inputs: vec![(vec![4], rand_vals(&mut rng, 4, 0.5, 1.5))],
            forward: Box::new(|t| {
                // value x^2 but cut the graph for half the elements
                let d = t[0].detach();
                t[0].mul(&d)?.sum()
            }),
        };
        let rel = gradcheck(&broken).unwrap();
        assert!(rel > PER_OP_TOL, "broken gradient must fail, got {rel}");
    }

    #[test]
    fn fast_suites_pass() {
        for check in schedule_suite()
            .into_iter()
            .chain(closed_form_suite())
            .chain(metric_oracle_suite())
        {
            assert!(check.passed, "{}: {}", check.name, check.detail);
        }
    }
}
