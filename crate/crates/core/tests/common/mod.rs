//! Checks shared by the engine and acceptance targets.

#![allow(dead_code)]

use dualdist::dtrans::{exact_signed, Converter};
use dualdist::engine::{Ablation, BatchSampler, RunConfig, Trainer};
use dualdist::losses::checks::unpack_heads;
use dualdist::losses::{
    confidence_mask, con_cross, con_intra, pse_loss, pseudo_label, sup_cross, sup_intra, Heads, LossReport, LossWeights,
    Parts,
};
use dualdist::net::{DualNet, DualOutput};
use dualdist::synth::Dataset;
use dualdist::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A run small enough to step in milliseconds.
pub fn tiny_run() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.dataset.size = 24;
    cfg.dataset.n_labeled = 2;
    cfg.dataset.n_unlabeled = 2;
    cfg.dataset.n_test = 1;
    cfg.net.widths = vec![2, 4];
    cfg.net.dropout = 0.0;
    cfg.train.patch_size = 16;
    cfg.train.stride = 8;
    cfg.train.labeled_per_batch = 1;
    cfg.train.unlabeled_per_batch = 1;
    cfg.train.max_iterations = 40;
    cfg
}

/// Every part of the objective on packed head outputs `x` (one sample),
/// with labels taken from the thresholded first segmentation head.
pub fn all_parts(t: &mut Tape<f64>, x: &Tensor<f64>, conv: &Converter) -> (Parts, DualOutput) {
    let w = LossWeights::default();
    let v = t.constant(x.clone());
    let out = unpack_heads(t, v, 1, conv.cfg.steepness).unwrap();
    let y = t.value(out.y_phi).threshold(0.5);
    let r = exact_signed(&y.clone().reshape(&t.shape(out.y_phi)[2..]).unwrap()).unwrap();
    let yv = t.constant(y.to_float::<f64>());
    let rv = t.constant(r.reshape(t.shape(out.y_phi)).unwrap());
    let yb = pseudo_label(t, &out, false).unwrap();
    let m = confidence_mask(t, &out, Heads::Both);
    let parts = Parts {
        sup_it: sup_intra(t, &out, yv, rv, &w, Heads::Both).unwrap().total,
        sup_ct: sup_cross(t, &out, yv, rv, conv, &w).unwrap().total,
        con_it: con_intra(t, &out, Heads::Both).unwrap().total,
        con_ct: con_cross(t, &out, conv).unwrap().total,
        pse: pse_loss(t, &out, yb, &m).unwrap(),
    };
    (parts, out)
}

pub struct FlagOutcome {
    pub flag: &'static str,
    pub ok: bool,
    pub detail: String,
}

fn part(r: &LossReport, name: &str) -> f64 {
    match name {
        "sup_it" => r.sup_it,
        "sup_ct" => r.sup_ct,
        "con_it" => r.con_it,
        "con_ct" => r.con_ct,
        "pse" => r.pse,
        _ => unreachable!(),
    }
}

const PARTS: [&str; 5] = ["sup_it", "sup_ct", "con_it", "con_ct", "pse"];

fn max_abs_diff(a: &[Tensor<f32>], b: &[Tensor<f32>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.data().iter().zip(y.data()).map(|(p, q)| (*p as f64 - *q as f64).abs()))
        .fold(0.0, f64::max)
}

fn max_abs(a: &[Tensor<f32>]) -> f64 {
    a.iter().flat_map(|x| x.data().iter().map(|v| (*v as f64).abs())).fold(0.0, f64::max)
}

/// Builds the step graph for `flags` on `net` at iteration `t` and returns
/// the report with the gradient of the total.
fn probe(
    run: &RunConfig,
    net: &DualNet,
    flags: Ablation,
    t: usize,
    batch: &dualdist::engine::TrainBatch,
) -> (LossReport, Vec<Tensor<f32>>, Trainer) {
    let mut cfg = run.clone();
    cfg.train.flags = flags;
    let mut tr = Trainer::new(net.clone(), &cfg, ChaCha8Rng::seed_from_u64(0)).unwrap();
    tr.opt.iteration = t;
    let mut tape = Tape::new();
    let g = tr.loss_graph(&mut tape, batch).unwrap();
    let rep = tr.report(&tape, &g).unwrap();
    let grads = tr.param_grads(&mut tape, &g.bound, g.total).unwrap();
    (rep, grads, tr)
}

/// Gradient of `coef * Σ parts` under the full flags.
fn removed_grad(run: &RunConfig, net: &DualNet, t: usize, batch: &dualdist::engine::TrainBatch, names: &[&str]) -> Vec<Tensor<f32>> {
    let mut tr = Trainer::new(net.clone(), run, ChaCha8Rng::seed_from_u64(0)).unwrap();
    tr.opt.iteration = t;
    let mut tape = Tape::new();
    let g = tr.loss_graph(&mut tape, batch).unwrap();
    let mut acc = tape.scalar(0.0);
    for &n in names {
        let (v, coef) = match n {
            "sup_it" => (g.parts.sup_it, g.lambda),
            "sup_ct" => (g.parts.sup_ct, g.lambda),
            "con_it" => (g.parts.con_it, g.lambda),
            "con_ct" => (g.parts.con_ct, g.lambda),
            "pse" => (g.parts.pse, g.beta),
            _ => unreachable!(),
        };
        let s = tape.mul_scalar(v, coef as f32).unwrap();
        acc = tape.add(acc, s).unwrap();
    }
    tr.param_grads(&mut tape, &g.bound, acc).unwrap()
}

/// For every ablation flag: its terms are exactly zero, every other term is
/// unchanged, and the gradient loses exactly the removed terms' gradient.
/// Turning off the regression task must leave the regression heads without
/// gradient.
pub fn ablation_nullity() -> Vec<FlagOutcome> {
    let run = tiny_run();
    let data = Dataset::generate(&run.dataset).unwrap();
    let mut sampler = BatchSampler::new(&data, &run.train, &run.transform, ChaCha8Rng::seed_from_u64(3)).unwrap();
    // a few steps so no head is still at its zero initialization
    let mut tr = Trainer::new(DualNet::new(run.net.clone()).unwrap(), &run, ChaCha8Rng::seed_from_u64(1)).unwrap();
    for _ in 0..3 {
        let b = sampler.next_batch().unwrap();
        tr.step(&b).unwrap();
    }
    let net = tr.net.clone();
    let batch = sampler.next_batch().unwrap();
    let t = 30;
    let (full, g_full, _) = probe(&run, &net, Ablation::default(), t, &batch);

    let cases: [(&str, fn(&mut Ablation), &[&str]); 6] = [
        ("pse_sup", |f| f.pse_sup = false, &["pse"]),
        ("ct_sup", |f| f.ct_sup = false, &["sup_ct"]),
        ("all_con", |f| f.all_con = false, &["con_it", "con_ct"]),
        ("ct_con", |f| f.ct_con = false, &["con_ct"]),
        ("it_con", |f| f.it_con = false, &["con_it"]),
        ("reg_task", |f| f.reg_task = false, &["sup_ct", "con_ct"]),
    ];
    let scale = max_abs(&g_full).max(1e-12);
    let mut out = Vec::new();
    for (flag, set, removed) in cases {
        let mut flags = Ablation::default();
        set(&mut flags);
        let (rep, g_off, tr_off) = probe(&run, &net, flags, t, &batch);
        let mut problems = Vec::new();
        for name in PARTS {
            let (a, b) = (part(&full, name), part(&rep, name));
            if removed.contains(&name) {
                if b != 0.0 {
                    problems.push(format!("{name} = {b}, want 0"));
                }
            } else if flag != "reg_task" && a != b {
                problems.push(format!("{name} changed {a} -> {b}"));
            }
        }
        if flag == "reg_task" {
            for (name, _) in rep.terms.iter().filter(|(n, _)| n.contains("mse_") || n.as_str() == "con_it.reg") {
                problems.push(format!("{name} still present"));
            }
            for (p, g) in tr_off.net.params().iter().zip(&g_off) {
                if p.name.contains("reg_head") && g.data().iter().any(|&v| v != 0.0) {
                    problems.push(format!("{} has gradient", p.name));
                }
            }
            let heads_moved = net
                .params()
                .iter()
                .zip(&g_full)
                .any(|(p, g)| p.name.contains("reg_head") && g.data().iter().any(|&v| v != 0.0));
            if !heads_moved {
                problems.push("regression heads have no gradient under full flags".into());
            }
        } else {
            let g_rem = removed_grad(&run, &net, t, &batch, removed);
            let diff: Vec<Tensor<f32>> = g_full
                .iter()
                .zip(&g_off)
                .map(|(a, b)| Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect()).unwrap())
                .collect();
            let err = max_abs_diff(&diff, &g_rem) / scale;
            if err > 1e-4 {
                problems.push(format!("gradient pathway mismatch {err:.2e}"));
            }
            if max_abs(&g_rem) == 0.0 {
                problems.push("removed term has no gradient".into());
            }
        }
        out.push(FlagOutcome {
            flag,
            ok: problems.is_empty(),
            detail: if problems.is_empty() { "ok".into() } else { problems.join("; ") },
        });
    }
    out
}
