#![allow(dead_code)]

use emoview::corpus::{synth_generate, Corpus, GeneratorSpec};
use emoview::views::{ViewConfig, ViewKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values in `[-1, 1]`.
pub fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect()
}

/// A small 5-session, 2-speaker corpus.
pub fn small_corpus(per_speaker: usize, alpha: f64, seed: u64) -> Corpus {
    let spec = GeneratorSpec {
        utterances_per_speaker: per_speaker,
        alpha,
        ..GeneratorSpec::default()
    };
    synth_generate(&spec, seed).expect("valid spec")
}

/// Narrow view settings that keep tests fast.
pub fn tiny_config(kind: ViewKind, corpus: &Corpus, hidden: usize) -> ViewConfig {
    let mut c = ViewConfig::new(
        kind,
        corpus.frame_dim().unwrap_or(0),
        corpus.word_dim().unwrap_or(0),
    );
    c.hidden_dim = hidden;
    c.num_layers = 1;
    c.dropout_p = 0.0;
    c
}

use emoview::autodiff::{Graph, Tensor};
use emoview::corpus::Batch;
use emoview::layers::Ctx;
use emoview::losses::{cosine_distance_vec, LossWeights, PROB_FLOOR};
use emoview::trainer::{
    build_losses, multiview_train_step, AdamStates, Mode, PairedBatch, TrainPlan, ADAM_BETA1, ADAM_BETA2,
    ADAM_EPS,
};
use emoview::views::View;

/// Four utterances, one per class when available, plus one negative each.
pub struct Toy {
    pub corpus: Corpus,
    pub pos: Batch,
    pub neg: Batch,
}

pub fn toy(seed: u64) -> Toy {
    let corpus = small_corpus(2, 0.5, seed);
    let mut picked = Vec::new();
    for c in 0..4 {
        if let Some(r) = corpus.records.iter().find(|r| r.label.index() == c) {
            picked.push(r.clone());
        }
    }
    while picked.len() < 4 {
        picked.push(corpus.records[picked.len()].clone());
    }
    let neg: Vec<_> = picked
        .iter()
        .map(|p| corpus.records.iter().rev().find(|r| r.label != p.label).unwrap().clone())
        .collect();
    Toy {
        pos: Batch::new(picked).unwrap(),
        neg: Batch::new(neg).unwrap(),
        corpus,
    }
}

pub fn toy_views(toy: &Toy, mode: Mode, seed: u64) -> (View, View) {
    let primary = View::new(tiny_config(ViewKind::BAco1, &toy.corpus, 3), &mut rng(seed)).unwrap();
    let mut second = View::new(tiny_config(ViewKind::HMm4, &toy.corpus, 3), &mut rng(seed + 1)).unwrap();
    if mode.is_frozen() {
        second.store.set_frozen(true);
    }
    (primary, second)
}

pub fn toy_plan(mode: Mode) -> TrainPlan {
    TrainPlan {
        mode,
        lr: 0.01,
        clip_tau: 0.5,
        l2: 1e-3,
        weights: LossWeights {
            beta_a: 1.0,
            beta_m: 0.3,
            margin: 0.5,
            rho: None,
        },
        ..TrainPlan::default()
    }
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn hinge(x: &[Vec<f64>], pos: &[Vec<f64>], neg: &[Vec<f64>], margin: f64) -> f64 {
    let n = x.len() as f64;
    let mut s = 0.0;
    for i in 0..x.len() {
        let d = margin + cosine_distance_vec(&x[i], &pos[i]).unwrap() - cosine_distance_vec(&x[i], &neg[i]).unwrap();
        s += d.max(0.0);
    }
    s / (2.0 * n)
}

fn ce(y: &[Vec<f64>], labels: &[usize], beta: f64) -> f64 {
    let s: f64 = y.iter().zip(labels).map(|(r, &l)| r[l].max(PROB_FLOOR).ln()).sum();
    -beta * s / y.len() as f64
}

fn kl(t: &[Vec<f64>], s: &[Vec<f64>]) -> f64 {
    let mut acc = 0.0;
    for (tr, sr) in t.iter().zip(s) {
        for (&p, &q) in tr.iter().zip(sr) {
            if p > 0.0 {
                acc += p * (p / q.max(PROB_FLOOR)).ln();
            }
        }
    }
    acc / t.len() as f64
}

/// Deviations of one library step from a plain-arithmetic recomputation.
#[derive(Debug)]
pub struct StepCheck {
    pub loss: f64,
    pub clip: f64,
    pub params: f64,
}

impl StepCheck {
    pub fn worst(&self) -> f64 {
        self.loss.max(self.clip).max(self.params)
    }
}

pub fn step_oracle(mode: Mode, seed: u64) -> StepCheck {
    let t = toy(seed);
    let plan = toy_plan(mode);
    let (p0, s0) = toy_views(&t, mode, seed);
    let pos = PairedBatch {
        primary: t.pos.clone(),
        second: Some(t.pos.clone()),
    };
    let neg = PairedBatch {
        primary: t.neg.clone(),
        second: Some(t.neg.clone()),
    };

    let (mut pa, mut sa) = (p0.clone(), s0.clone());
    let mut states = AdamStates::new(&pa, Some(&sa));
    let report = multiview_train_step(
        &pos,
        Some(&neg),
        &mut pa,
        Some(&mut sa),
        &plan,
        0,
        &mut states,
        &mut Ctx::train(rng(seed + 7)),
    )
    .unwrap();

    // Losses from forward values in the same order as the step.
    let (mut qa, mut qs) = (p0.clone(), s0.clone());
    let mut ctx = Ctx::train(rng(seed + 7));
    let mut teacher_ctx = Ctx::eval();
    let frozen = mode.is_frozen();
    let mut g = Graph::new();
    let ha_neg = qa.forward(&mut g, &t.neg, &mut ctx).unwrap().h;
    let ha_neg = rows(g.value(ha_neg));
    let hs_neg = {
        let c = if frozen { &mut teacher_ctx } else { &mut ctx };
        qs.forward(&mut g, &t.neg, c).unwrap().h
    };
    let hs_neg = rows(g.value(hs_neg));
    let oa = qa.forward(&mut g, &t.pos, &mut ctx).unwrap();
    let os = {
        let c = if frozen { &mut teacher_ctx } else { &mut ctx };
        qs.forward(&mut g, &t.pos, c).unwrap()
    };
    let (ha, ya) = (rows(g.value(oa.h)), rows(g.value(oa.y_hat)));
    let (hs, ys) = (rows(g.value(os.h)), rows(g.value(os.y_hat)));
    let labels = t.pos.labels.clone();
    let w = &plan.weights;
    let l_c = hinge(&ha, &hs, &hs_neg, w.margin) + hinge(&hs, &ha, &ha_neg, w.margin);
    let total = match mode {
        Mode::JointMultiview => l_c + ce(&ya, &labels, w.beta_a) + ce(&ys, &labels, w.beta_m),
        Mode::FrozenTeacherCe => l_c + ce(&ya, &labels, w.beta_a),
        Mode::FrozenTeacherKl => l_c + kl(&ys, &ya),
        Mode::SingleView => unreachable!(),
    };

    // Tape gradients, then clipping and Adam by hand.
    let (mut ga, mut gs) = (p0.clone(), s0.clone());
    let mut g2 = Graph::new();
    let terms = build_losses(&mut g2, &pos, Some(&neg), &mut ga, Some(&mut gs), &plan, 0, &mut Ctx::train(rng(seed + 7)))
        .unwrap();
    g2.backward(terms.total).unwrap();
    let mut grads: Vec<Vec<f64>> = ga.store.gradients(&g2).iter().map(|t| t.data().to_vec()).collect();
    let mut thetas: Vec<Vec<f64>> = p0.store.iter().map(|(_, t)| t.data().to_vec()).collect();
    let mut after: Vec<Vec<f64>> = pa.store.iter().map(|(_, t)| t.data().to_vec()).collect();
    if mode == Mode::JointMultiview {
        grads.extend(gs.store.gradients(&g2).iter().map(|t| t.data().to_vec()));
        thetas.extend(s0.store.iter().map(|(_, t)| t.data().to_vec()));
        after.extend(sa.store.iter().map(|(_, t)| t.data().to_vec()));
    } else {
        assert_eq!(sa.store.checksum(), s0.store.checksum());
    }
    let norm = grads.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
    let scale = if norm > plan.clip_tau { plan.clip_tau / norm } else { 1.0 };
    let mut params: f64 = 0.0;
    for ((gr, th), af) in grads.iter().zip(&thetas).zip(&after) {
        for k in 0..gr.len() {
            let gk = gr[k] * scale + plan.l2 * th[k];
            let m = (1.0 - ADAM_BETA1) * gk / (1.0 - ADAM_BETA1);
            let v = (1.0 - ADAM_BETA2) * gk * gk / (1.0 - ADAM_BETA2);
            let want = th[k] - plan.lr * m / (v.sqrt() + ADAM_EPS);
            params = params.max((af[k] - want).abs());
        }
    }
    StepCheck {
        loss: (report.total - total).abs(),
        clip: (report.clip - scale).abs(),
        params,
    }
}
