#![allow(dead_code)]

use std::collections::BTreeMap;

use finlora::lora::{Binding, Mode};
use finlora::model::{build_model, ArchConfig, Example, LoraConfig, ToyModel};
use finlora::numerics::{Graph, Rng, Tensor};
use finlora::quant::QuantConfig;

/// Small random architecture with grouped k/v heads.
pub fn random_arch(rng: &mut Rng) -> ArchConfig {
    let head_dim = [2, 4][rng.below(2)];
    let n_kv = 1 + rng.below(2);
    let n_heads = n_kv * (1 + rng.below(2));
    ArchConfig {
        n_layers: 1 + rng.below(2),
        d_model: n_heads * head_dim,
        d_kv: n_kv * head_dim,
        n_heads,
        vocab_size: 8 + rng.below(9),
        max_seq: 8,
        d_ff: 4 + rng.below(9),
        preset_id: None,
    }
}

pub fn random_example(rng: &mut Rng, arch: &ArchConfig) -> Example {
    let len = 2 + rng.below(arch.max_seq - 1);
    let tokens: Vec<usize> = (0..len).map(|_| rng.below(arch.vocab_size)).collect();
    let targets = (0..len)
        .map(|_| (rng.uniform() < 0.7).then(|| rng.below(arch.vocab_size)))
        .collect::<Vec<_>>();
    let mut targets = targets;
    targets[len - 1] = Some(rng.below(arch.vocab_size));
    Example { tokens, targets }
}

/// Random toy model whose adapters all have non-zero `B`.
pub fn random_model(rng: &mut Rng, arch: &ArchConfig, quant: Option<QuantConfig>) -> ToyModel {
    let max_r = arch.d_kv.min(arch.d_model);
    let cfg = LoraConfig {
        rank: 1 + rng.below(max_r.min(3)),
        alpha: 1.0 + rng.uniform() * 31.0,
        dropout: [0.0, 0.1, 0.3][rng.below(3)],
    };
    let mut m = build_model(arch, quant, cfg, rng.next_u64()).expect("valid random arch");
    let mut p = m.params();
    for t in p.values_mut() {
        *t = rng.normal_tensor(t.shape(), 0.3);
    }
    m.set_params(&p).unwrap();
    m
}

/// Loss recomputed from scratch with a fresh dropout stream, so every call
/// sees the same mask.
pub fn loss_at(model: &ToyModel, ex: &Example, mode: Mode, seed: u64) -> f64 {
    let mut g = Graph::new();
    let logits = model
        .forward_graph(
            &mut g,
            &ex.tokens,
            Binding::Constant,
            mode,
            &mut Rng::derived(seed, 0),
        )
        .unwrap();
    let l = g.cross_entropy(logits, &ex.targets).unwrap();
    g.value(l).data()[0]
}

/// Fourth-order central differences of `loss_at` for every adapter element,
/// `D(h) = (−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`, with one
/// Richardson step `D(h/2) + (D(h/2) − D(h)) / 15`.
pub fn finite_difference(
    model: &ToyModel,
    ex: &Example,
    mode: Mode,
    seed: u64,
    h: f64,
) -> BTreeMap<String, Tensor> {
    let base = model.params();
    let mut out = BTreeMap::new();
    let mut m = model.clone();
    for (name, t) in &base {
        let mut g = Tensor::zeros(t.shape());
        for i in 0..t.numel() {
            let mut at = |offset: f64| {
                let mut p = base.clone();
                p.get_mut(name).unwrap().data_mut()[i] += offset;
                m.set_params(&p).unwrap();
                loss_at(&m, ex, mode, seed)
            };
            let mut stencil = |h: f64| {
                let (p2, p1, m1, m2) = (at(2.0 * h), at(h), at(-h), at(-2.0 * h));
                (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h)
            };
            let (coarse, fine) = (stencil(h), stencil(h / 2.0));
            g.data_mut()[i] = fine + (fine - coarse) / 15.0;
        }
        out.insert(name.clone(), g);
    }
    out
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)` over all tensors; 0 when both vanish.
pub fn rel_err(a: &BTreeMap<String, Tensor>, b: &BTreeMap<String, Tensor>) -> f64 {
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (k, x) in a {
        let y = &b[k];
        for (u, v) in x.data().iter().zip(y.data()) {
            diff += (u - v) * (u - v);
            na += u * u;
            nb += v * v;
        }
    }
    let denom = na.max(nb).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        diff.sqrt() / denom
    }
}

/// Accuracy and weighted F1 from an explicit confusion matrix, written
/// independently of the library's metric code. Labels are exact strings
/// here; predictions outside `classes` count as "no class".
pub fn confusion_oracle(preds: &[String], golds: &[String], classes: &[String]) -> (f64, f64) {
    let n = golds.len();
    let k = classes.len();
    // rows: gold class, cols: predicted class or k for none
    let mut cm = vec![vec![0usize; k + 1]; k];
    let mut correct = 0;
    for (p, g) in preds.iter().zip(golds) {
        if p.contains(g.as_str()) {
            correct += 1;
        }
        let gi = classes.iter().position(|c| c == g).unwrap();
        let pi = classes
            .iter()
            .position(|c| p.contains(c.as_str()))
            .unwrap_or(k);
        cm[gi][pi] += 1;
    }
    let mut wf1 = 0.0;
    for c in 0..k {
        let tp = cm[c][c] as f64;
        let predicted: f64 = (0..k).map(|r| cm[r][c] as f64).sum();
        let actual: f64 = cm[c].iter().sum::<usize>() as f64;
        let p = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let r = if actual > 0.0 { tp / actual } else { 0.0 };
        let f = if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        };
        wf1 += f * actual / n as f64;
    }
    (correct as f64 / n as f64, wf1)
}

/// Batch of `n` indexed examples drawn from a byte-level toy model's vocab.
pub fn toy_batch(
    rng: &mut Rng,
    arch: &ArchConfig,
    n: usize,
    first_index: u64,
) -> Vec<(u64, Example)> {
    (0..n)
        .map(|i| {
            let len = 4 + rng.below(6);
            let tokens: Vec<usize> = (0..len).map(|_| rng.below(arch.vocab_size)).collect();
            let targets = (0..len).map(|_| Some(rng.below(arch.vocab_size))).collect();
            (first_index + i as u64, Example { tokens, targets })
        })
        .collect()
}
