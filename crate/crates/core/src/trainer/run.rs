use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::negatives::{get_neg_samples, NegIndex};
use super::plan::{Mode, TrainPlan};
use super::step::{check_views, multiview_train_step, AdamStates, PairedBatch};
use crate::corpus::{Batch, Corpus, FeatureStats, Limits, Partition, UtteranceRecord};
use crate::error::{Error, Result};
use crate::layers::Ctx;
use crate::metrics::{unweighted_accuracy, EvalResult};
use crate::views::{Checkpoint, Prediction, View, ViewConfig};

const STREAM_INIT_PRIMARY: u64 = 0;
const STREAM_INIT_SECOND: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_NEGATIVES: u64 = 3;
const STREAM_DROPOUT: u64 = 4;

/// Independent random stream `stream` of the run seeded by `seed`.
pub fn seeded_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// The view paired with the one being trained.
#[derive(Clone, Debug)]
pub enum SecondView {
    /// Built from scratch and trained alongside.
    Joint(ViewConfig),
    /// An already trained model whose parameters stay fixed.
    Teacher(View),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub l_c: Option<f64>,
    pub l_a: Option<f64>,
    pub l_m: Option<f64>,
    pub l_kl: Option<f64>,
    pub total: f64,
    pub clip_mean: f64,
    pub val_ua: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best-validation state of the trained view.
    pub primary: Checkpoint,
    /// The second view at the same epoch (joint) or the teacher as given.
    pub second: Option<Checkpoint>,
    pub log: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub best_validation_ua: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub result: EvalResult,
    pub predictions: Vec<Prediction>,
}

/// Evaluation-mode predictions for `records`, after the view's own frame
/// standardization.
pub fn predict_records(
    view: &mut View,
    records: &[&UtteranceRecord],
    limits: Limits,
    batch_size: usize,
) -> Result<Vec<Prediction>> {
    let mut predictions = Vec::with_capacity(records.len());
    for chunk in records.chunks(batch_size.max(1)) {
        let mut batch = Batch::from_refs(chunk, limits)?;
        if let Some(stats) = &view.norm {
            for r in &mut batch.records {
                stats.apply(r)?;
            }
        }
        predictions.extend(view.predict(&batch)?);
    }
    Ok(predictions)
}

/// Predictions and scores on `corpus` records `indices`.
pub fn evaluate(
    view: &mut View,
    corpus: &Corpus,
    indices: &[usize],
    limits: Limits,
    batch_size: usize,
) -> Result<Evaluation> {
    if indices.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty split".into()));
    }
    let predictions = predict_records(view, &corpus.subset(indices), limits, batch_size)?;
    let labels: Vec<usize> = predictions.iter().map(|p| p.label).collect();
    let predicted: Vec<usize> = predictions.iter().map(|p| p.predicted).collect();
    Ok(Evaluation {
        result: unweighted_accuracy(&labels, &predicted)?,
        predictions,
    })
}

#[derive(Default)]
struct Totals {
    steps: usize,
    l_c: Option<f64>,
    l_a: Option<f64>,
    l_m: Option<f64>,
    l_kl: Option<f64>,
    total: f64,
    clip: f64,
}

fn add_opt(acc: &mut Option<f64>, v: Option<f64>) {
    if let Some(v) = v {
        *acc = Some(acc.unwrap_or(0.0) + v);
    }
}

fn checkpoint(view: &View, plan: &TrainPlan, epoch: usize) -> Checkpoint {
    let mut c = Checkpoint::new(view.clone());
    c.meta.insert("mode".into(), plan.mode.to_string());
    c.meta.insert("seed".into(), plan.seed.to_string());
    c.meta.insert("epoch".into(), epoch.to_string());
    c
}

/// Runs the fixed epoch budget and keeps the epoch with the best
/// validation UA of the primary view.
pub fn train(
    corpus: &Corpus,
    part: &Partition,
    primary_cfg: &ViewConfig,
    second: Option<SecondView>,
    plan: &TrainPlan,
) -> Result<TrainOutcome> {
    plan.validate()?;
    if part.train.is_empty() {
        return Err(Error::Contract("training split is empty".into()));
    }
    if part.validation.is_empty() {
        return Err(Error::Contract("validation split is empty".into()));
    }
    let stats = FeatureStats::fit(part.train.iter().map(|&i| &corpus.records[i]))?;
    let mut primary = View::new(primary_cfg.clone(), &mut seeded_stream(plan.seed, STREAM_INIT_PRIMARY))?;
    primary.norm = Some(stats.clone());
    let mut second = match second {
        None => None,
        Some(SecondView::Joint(cfg)) => {
            let mut v = View::new(cfg, &mut seeded_stream(plan.seed, STREAM_INIT_SECOND))?;
            v.norm = Some(stats);
            Some(v)
        }
        Some(SecondView::Teacher(mut v)) => {
            if !plan.mode.is_frozen() {
                return Err(Error::Config(format!(
                    "a teacher checkpoint only applies to frozen modes, not {}",
                    plan.mode
                )));
            }
            v.store.set_frozen(true);
            Some(v)
        }
    };
    if plan.mode.is_frozen() && !second.as_ref().is_some_and(|s| s.store.is_frozen()) {
        return Err(Error::Config(format!("mode {} needs a teacher checkpoint", plan.mode)));
    }
    check_views(plan.mode, &primary, second.as_ref())?;

    let mut outcome = TrainOutcome {
        primary: checkpoint(&primary, plan, 0),
        second: second.as_ref().map(|s| checkpoint(s, plan, 0)),
        log: Vec::new(),
        best_epoch: None,
        best_validation_ua: None,
    };
    if plan.epochs == 0 {
        return Ok(outcome);
    }

    let corpus_a = primary.prepare_corpus(corpus)?;
    let corpus_m = match &second {
        Some(s) => Some(s.prepare_corpus(corpus)?),
        None => None,
    };
    let train_a: Vec<&UtteranceRecord> = corpus_a.subset(&part.train);
    let train_m: Option<Vec<&UtteranceRecord>> = corpus_m.as_ref().map(|c| c.subset(&part.train));
    let index = NegIndex::new(&train_a);
    let paired = |pos: &[usize]| -> Result<PairedBatch> {
        let a: Vec<&UtteranceRecord> = pos.iter().map(|&i| train_a[i]).collect();
        let second = match &train_m {
            Some(tm) => {
                let m: Vec<&UtteranceRecord> = pos.iter().map(|&i| tm[i]).collect();
                Some(Batch::from_refs(&m, plan.limits)?)
            }
            None => None,
        };
        Ok(PairedBatch {
            primary: Batch::from_refs(&a, plan.limits)?,
            second,
        })
    };

    let mut shuffle_rng = seeded_stream(plan.seed, STREAM_SHUFFLE);
    let mut neg_rng = seeded_stream(plan.seed, STREAM_NEGATIVES);
    let mut ctx = Ctx::train(seeded_stream(plan.seed, STREAM_DROPOUT));
    let mut states = AdamStates::new(&primary, second.as_ref());
    let mut best = f64::NEG_INFINITY;

    for epoch in 0..plan.epochs {
        let mut order: Vec<usize> = (0..train_a.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut t = Totals::default();
        for (s, chunk) in order.chunks(plan.batch_size).enumerate() {
            let pos = paired(chunk)?;
            let neg = if plan.mode == Mode::SingleView {
                None
            } else {
                let idx = get_neg_samples(pos.labels(), &index, plan.neg_strategy, &mut neg_rng)?;
                Some(paired(&idx)?)
            };
            let r = multiview_train_step(
                &pos,
                neg.as_ref(),
                &mut primary,
                second.as_mut(),
                plan,
                epoch,
                &mut states,
                &mut ctx,
            )
            .map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("epoch {}, step {}: {m}", epoch + 1, s + 1)),
                other => other,
            })?;
            t.steps += 1;
            add_opt(&mut t.l_c, r.l_c);
            add_opt(&mut t.l_a, r.l_a);
            add_opt(&mut t.l_m, r.l_m);
            add_opt(&mut t.l_kl, r.l_kl);
            t.total += r.total;
            t.clip += r.clip;
        }
        let val = evaluate(&mut primary, corpus, &part.validation, plan.limits, plan.batch_size)?;
        let n = t.steps as f64;
        let entry = EpochLog {
            epoch: epoch + 1,
            steps: t.steps,
            l_c: t.l_c.map(|v| v / n),
            l_a: t.l_a.map(|v| v / n),
            l_m: t.l_m.map(|v| v / n),
            l_kl: t.l_kl.map(|v| v / n),
            total: t.total / n,
            clip_mean: t.clip / n,
            val_ua: val.result.ua,
            val_accuracy: val.result.accuracy,
        };
        log::info!("{}", serde_json::to_string(&entry).expect("plain record"));
        if val.result.ua > best {
            best = val.result.ua;
            outcome.primary = checkpoint(&primary, plan, epoch + 1);
            if plan.mode == Mode::JointMultiview {
                outcome.second = second.as_ref().map(|s| checkpoint(s, plan, epoch + 1));
            }
            outcome.best_epoch = Some(epoch + 1);
            outcome.best_validation_ua = Some(best);
        }
        outcome.log.push(entry);
    }
    Ok(outcome)
}
