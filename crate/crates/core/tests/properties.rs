mod common;

use std::collections::BTreeSet;

use common::{rng, small_corpus, tiny_config};
use emoview::autodiff::{Graph, ParamStore, Tensor, Var};
use emoview::corpus::{make_folds, synth_generate, Batch, FoldScheme, GeneratorSpec};
use emoview::fusion::{context_attention, gmu_forward, AttnParams, GmuParams};
use emoview::layers::{bilstm, mean_pool, LstmParams, SeqBatch, SeqVar};
use emoview::losses::{contrastive_loss, kl_distill_loss, ContrastiveInputs};
use emoview::metrics::{unweighted_accuracy, AttentionReport};
use emoview::trainer::clip_gradients;
use emoview::views::{View, ViewKind};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-3.0..3.0f64, cols), rows)
}

/// `count` items of `feat`-wide steps with lengths in `1..=max_len`.
fn sequences(count: usize, max_len: usize, feat: usize) -> impl Strategy<Value = Vec<Vec<Vec<f64>>>> {
    prop::collection::vec(
        (1..=max_len).prop_flat_map(move |len| matrix(len, feat)),
        count,
    )
}

fn distribution(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0..1.0f64, n).prop_map(|v| {
        let v: Vec<f64> = v.into_iter().map(|x| x + 1e-3).collect();
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn masked_softmax_is_a_distribution_over_valid_positions(
        logits in matrix(3, 5),
        raw_mask in prop::collection::vec(any::<bool>(), 15),
    ) {
        let mut mask = raw_mask;
        for i in 0..3 {
            mask[i * 5] = true;
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&logits).unwrap());
        let p = g.masked_softmax(x, &mask).unwrap();
        let t = g.value(p);
        for i in 0..3 {
            let mut s = 0.0;
            for j in 0..5 {
                let v = t.at(i, j);
                if mask[i * 5 + j] {
                    prop_assert!(v >= 0.0);
                    s += v;
                } else {
                    prop_assert_eq!(v, 0.0);
                }
            }
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_is_a_convex_order_free_pooling(items in sequences(3, 5, 4), seed in 0u64..1000) {
        let mut store = ParamStore::new();
        let p = AttnParams::new(&mut store, "attn", 4, 3, &mut rng(seed)).unwrap();
        let run = |items: &[Vec<Vec<f64>>]| {
            let batch = SeqBatch::from_items(items).unwrap();
            let mut g = Graph::new();
            let seq = SeqVar::from_batch(&mut g, &batch);
            let bound = p.bind(&mut g, &store);
            let (z, a) = context_attention(&mut g, &seq, &bound).unwrap();
            (g.value(z).clone(), g.value(a).clone())
        };
        let (z, a) = run(&items);
        for (i, item) in items.iter().enumerate() {
            let len = item.len();
            let s: f64 = (0..len).map(|t| a.at(i, t)).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            let valid = (0..len).all(|t| a.at(i, t) >= 0.0);
            let padded = (len..a.cols()).all(|t| a.at(i, t) == 0.0);
            prop_assert!(valid && padded);
            for d in 0..4 {
                let lo = item.iter().map(|h| h[d]).fold(f64::INFINITY, f64::min);
                let hi = item.iter().map(|h| h[d]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(z.at(i, d) >= lo - 1e-12 && z.at(i, d) <= hi + 1e-12);
            }
        }
        // Reverse the valid steps of every item.
        let flipped: Vec<Vec<Vec<f64>>> = items.iter().map(|it| it.iter().rev().cloned().collect()).collect();
        let (z2, a2) = run(&flipped);
        for (i, item) in items.iter().enumerate() {
            let len = item.len();
            for t in 0..len {
                prop_assert!((a.at(i, t) - a2.at(i, len - 1 - t)).abs() < 1e-12);
            }
            for d in 0..4 {
                prop_assert!((z.at(i, d) - z2.at(i, d)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gmu_output_lies_between_its_branches(xa in matrix(4, 3), xl in matrix(4, 2), seed in 0u64..1000) {
        let mut store = ParamStore::new();
        let p = GmuParams::new(&mut store, "gmu", 3, 2, 5, &mut rng(seed)).unwrap();
        let mut g = Graph::new();
        let (va, vl) = (g.constant(Tensor::from_rows(&xa).unwrap()), g.constant(Tensor::from_rows(&xl).unwrap()));
        let bound = p.bind(&mut g, &store);
        let (h, z) = gmu_forward(&mut g, va, vl, &bound).unwrap();
        let branch = |x: &[f64], w: &Tensor, b: &Tensor, j: usize| {
            (b.data()[j] + x.iter().enumerate().map(|(r, v)| v * w.at(r, j)).sum::<f64>()).tanh()
        };
        for i in 0..4 {
            for j in 0..5 {
                let zv = g.value(z).at(i, j);
                prop_assert!(zv > 0.0 && zv < 1.0);
                let ha = branch(&xa[i], store.get(p.w_a), store.get(p.b_a), j);
                let hl = branch(&xl[i], store.get(p.w_l), store.get(p.b_l), j);
                let hv = g.value(h).at(i, j);
                prop_assert!(hv >= ha.min(hl) - 1e-12 && hv <= ha.max(hl) + 1e-12);
            }
        }
    }

    #[test]
    fn contrastive_hinge_is_monotone(
        vs in prop::collection::vec(matrix(3, 4), 6),
        row in 0usize..3,
        margin in 0.0..2.0f64,
    ) {
        prop_assume!(vs.iter().all(|m| m.iter().all(|r| r.iter().any(|&x| x != 0.0))));
        let loss = |vs: &[Vec<Vec<f64>>]| {
            let mut g = Graph::new();
            let v: Vec<Var> = vs.iter().map(|m| g.constant(Tensor::from_rows(m).unwrap())).collect();
            let e = ContrastiveInputs { a: v[0], m_pos: v[1], m_neg: v[2], m: v[3], a_pos: v[4], a_neg: v[5] };
            let l = contrastive_loss(&mut g, e, margin).unwrap();
            g.value(l).item()
        };
        let base = loss(&vs);
        prop_assert!(base >= 0.0);
        for (target, anchor, pull) in [(1, 0, true), (4, 3, true), (2, 0, false), (5, 3, false)] {
            // Positives move onto the anchor (distance 0), negatives to its antipode (distance 2).
            let mut moved = vs.clone();
            let sign = if pull { 1.0 } else { -1.0 };
            moved[target][row] = vs[anchor][row].iter().map(|x| sign * x).collect();
            prop_assert!(loss(&moved) <= base + 1e-12);
        }
    }

    #[test]
    fn ua_ignores_class_relabeling(
        pairs in prop::collection::vec((0usize..4, 0usize..4), 1..60),
        perm in Just([0usize, 1, 2, 3]).prop_shuffle(),
    ) {
        let (labels, preds): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let r = unweighted_accuracy(&labels, &preds).unwrap();
        let pl: Vec<usize> = labels.iter().map(|&c| perm[c]).collect();
        let pp: Vec<usize> = preds.iter().map(|&c| perm[c]).collect();
        let q = unweighted_accuracy(&pl, &pp).unwrap();
        prop_assert!((r.ua - q.ua).abs() < 1e-15);
        prop_assert_eq!(r.accuracy, q.accuracy);
    }

    #[test]
    fn padding_does_not_change_mean_pool(item in matrix(3, 2), extra in 1usize..6) {
        let pool = |items: &[Vec<Vec<f64>>]| {
            let batch = SeqBatch::from_items(items).unwrap();
            let mut g = Graph::new();
            let seq = SeqVar::from_batch(&mut g, &batch);
            let p = mean_pool(&mut g, &seq).unwrap();
            g.value(p).row(0).to_vec()
        };
        let alone = pool(std::slice::from_ref(&item));
        let padded = pool(&[item, vec![vec![1.0, 1.0]; 3 + extra]]);
        prop_assert_eq!(alone, padded);
    }

    #[test]
    fn clipped_norm_never_exceeds_tau(
        gs in prop::collection::vec(prop::collection::vec(-1e3..1e3f64, 1..20), 1..5),
        tau in 1e-3..10.0f64,
    ) {
        let mut named: Vec<(String, Tensor)> = gs.into_iter().enumerate().map(|(i, v)| (format!("p{i}"), Tensor::vector(v))).collect();
        clip_gradients(&mut named, tau).unwrap();
        let n = named.iter().map(|(_, t)| t.norm_l2().powi(2)).sum::<f64>().sqrt();
        prop_assert!(n <= tau + 1e-9);
    }

    #[test]
    fn padded_bilstm_steps_are_inert(items in sequences(2, 4, 2), seed in 0u64..1000) {
        let mut store = ParamStore::new();
        let mut r = rng(seed);
        let f = LstmParams::new(&mut store, "f", 2, 3, &mut r).unwrap();
        let b = LstmParams::new(&mut store, "b", 2, 3, &mut r).unwrap();
        let batch = SeqBatch::from_items(&items).unwrap();
        let mut g = Graph::new();
        let steps: Vec<Var> = (0..batch.max_steps()).map(|t| g.variable(batch.step(t))).collect();
        let seq = SeqVar { steps: steps.clone(), lengths: items.iter().map(Vec::len).collect() };
        let (fb, bb) = (f.bind(&mut g, &store).unwrap(), b.bind(&mut g, &store).unwrap());
        let out = bilstm(&mut g, &seq, &fb, &bb).unwrap();
        let pooled = mean_pool(&mut g, &out).unwrap();
        let sq = g.mul(pooled, pooled).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        for (t, &s) in steps.iter().enumerate() {
            let grad = g.grad(s).unwrap_or_else(|| Tensor::zeros(g.value(s).shape()));
            for (i, item) in items.iter().enumerate() {
                if t >= item.len() {
                    prop_assert!(g.value(out.steps[t]).row(i).iter().all(|&v| v == 0.0));
                    prop_assert!(grad.row(i).iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn folds_partition_every_corpus(sessions in 2u32..6, speakers in 2usize..4, per in 1usize..3) {
        let spec = GeneratorSpec {
            sessions,
            speakers_per_session: speakers,
            utterances_per_speaker: per,
            ..GeneratorSpec::default()
        };
        let c = synth_generate(&spec, 3).unwrap();
        for fold in make_folds(&c, FoldScheme::default()).unwrap() {
            let part = fold.partition(&c);
            let mut all: Vec<usize> = part.train.iter().chain(&part.validation).chain(&part.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..c.len()).collect::<Vec<_>>());
            let speakers_of = |ix: &[usize]| ix.iter().map(|&i| c.records[i].speaker.clone()).collect::<BTreeSet<_>>();
            let train = speakers_of(&part.train);
            prop_assert!(train.is_disjoint(&speakers_of(&part.validation)));
            prop_assert!(train.is_disjoint(&speakers_of(&part.test)));
            prop_assert!(speakers_of(&part.validation).is_disjoint(&speakers_of(&part.test)));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 1000, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn kl_is_non_negative(pt in distribution(4), ps in distribution(4)) {
        let mut g = Graph::new();
        let s = g.constant(Tensor::from_rows(std::slice::from_ref(&ps)).unwrap());
        let kl = kl_distill_loss(&mut g, &Tensor::from_rows(std::slice::from_ref(&pt)).unwrap(), s).unwrap();
        prop_assert!(g.value(kl).item() >= -1e-15);
        let same = g.constant(Tensor::from_rows(std::slice::from_ref(&pt)).unwrap());
        let zero = kl_distill_loss(&mut g, &Tensor::from_rows(&[pt]).unwrap(), same).unwrap();
        prop_assert!(g.value(zero).item().abs() < 1e-15);
    }
}

#[test]
fn report_attention_sums_to_one() {
    let c = small_corpus(2, 0.5, 4);
    for seed in 0..4 {
        let mut view = View::new(tiny_config(ViewKind::HMm4, &c, 3), &mut rng(seed)).unwrap();
        let batch = Batch::new(c.records.clone()).unwrap();
        for (u, p) in c.records.iter().zip(view.predict(&batch).unwrap()) {
            let r = AttentionReport::new(u, ViewKind::HMm4, &p).unwrap();
            let s: f64 = r.words.iter().map(|w| w.attention.unwrap()).sum();
            assert!((s - 1.0).abs() < 1e-9, "{}: {s}", u.id);
            assert!(r.words.iter().all(|w| w.acoustic.is_some_and(|z| z > 0.0 && z < 1.0)));
        }
    }
}
