use serde::{Deserialize, Serialize};

use super::optim::{adam_step, clip_gradients, AdamState};
use super::plan::{Mode, TrainPlan};
use crate::autodiff::{Graph, Tensor, Var};
use crate::corpus::Batch;
use crate::error::{Error, Result};
use crate::layers::Ctx;
use crate::losses::{contrastive_loss, cross_entropy, kl_distill_loss, ContrastiveInputs};
use crate::views::View;

/// The same utterances prepared for each view (views may carry different
/// frame standardization).
#[derive(Clone, Debug)]
pub struct PairedBatch {
    pub primary: Batch,
    pub second: Option<Batch>,
}

impl PairedBatch {
    pub fn single(batch: Batch) -> Self {
        PairedBatch {
            primary: batch,
            second: None,
        }
    }

    pub fn labels(&self) -> &[usize] {
        &self.primary.labels
    }

    fn second(&self) -> Result<&Batch> {
        self.second
            .as_ref()
            .ok_or_else(|| Error::Contract("second-view inputs missing from batch".into()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamStates {
    pub primary: AdamState,
    pub second: Option<AdamState>,
}

impl AdamStates {
    pub fn new(primary: &View, second: Option<&View>) -> Self {
        AdamStates {
            primary: AdamState::new(&primary.store),
            second: second.map(|v| AdamState::new(&v.store)),
        }
    }
}

/// Loss graph nodes of one step; absent terms are `None`.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub l_c: Option<Var>,
    pub l_a: Option<Var>,
    pub l_m: Option<Var>,
    pub l_kl: Option<Var>,
    pub total: Var,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub l_c: Option<f64>,
    pub l_a: Option<f64>,
    pub l_m: Option<f64>,
    pub l_kl: Option<f64>,
    pub total: f64,
    pub clip: f64,
}

/// Checks that the views on hand fit `mode`.
pub fn check_views(mode: Mode, primary: &View, second: Option<&View>) -> Result<()> {
    match (mode.needs_second_view(), second) {
        (false, Some(_)) => Err(Error::Config(format!("mode {mode} takes a single view"))),
        (true, None) => Err(Error::Config(format!("mode {mode} needs a second view"))),
        (false, None) => Ok(()),
        (true, Some(s)) => {
            if mode.is_frozen() && !s.store.is_frozen() {
                return Err(Error::Config(format!(
                    "mode {mode} needs the teacher's parameters marked non-trainable"
                )));
            }
            if mode == Mode::JointMultiview && s.store.is_frozen() {
                return Err(Error::Config("joint-multiview needs a trainable second view".into()));
            }
            if primary.embedding_dim() != s.embedding_dim() {
                return Err(Error::Config(format!(
                    "views {} and {} have embeddings of width {} and {}; the contrastive loss needs equal widths",
                    primary.kind(),
                    s.kind(),
                    primary.embedding_dim(),
                    s.embedding_dim()
                )));
            }
            Ok(())
        }
    }
}

/// Forward passes and loss composition for one batch.
///
/// Negatives go through both views first, then the positives. A frozen
/// second view runs in evaluation mode.
#[allow(clippy::too_many_arguments)]
pub fn build_losses(
    g: &mut Graph,
    pos: &PairedBatch,
    neg: Option<&PairedBatch>,
    primary: &mut View,
    second: Option<&mut View>,
    plan: &TrainPlan,
    epoch: usize,
    ctx: &mut Ctx,
) -> Result<LossTerms> {
    check_views(plan.mode, primary, second.as_deref())?;
    let (beta_a, beta_m) = plan.weights.at_epoch(epoch);
    let labels = pos.labels().to_vec();
    let Some(second) = second else {
        let out = primary.forward(g, &pos.primary, ctx)?;
        let l_a = cross_entropy(g, out.y_hat, &labels, beta_a)?;
        return Ok(LossTerms {
            l_c: None,
            l_a: Some(l_a),
            l_m: None,
            l_kl: None,
            total: l_a,
        });
    };
    let neg = neg.ok_or_else(|| Error::Contract(format!("mode {} needs negatives", plan.mode)))?;
    if neg.primary.len() != pos.primary.len() {
        return Err(Error::Dimension {
            op: "multiview_train_step",
            lhs: vec![neg.primary.len()],
            rhs: vec![pos.primary.len()],
        });
    }
    let frozen = plan.mode.is_frozen();
    let mut teacher_ctx = Ctx::eval();
    let h_a_neg = primary.forward(g, &neg.primary, ctx)?.h;
    let h_m_neg = {
        let c = if frozen { &mut teacher_ctx } else { &mut *ctx };
        second.forward(g, neg.second()?, c)?.h
    };
    let out_a = primary.forward(g, &pos.primary, ctx)?;
    let out_m = {
        let c = if frozen { &mut teacher_ctx } else { &mut *ctx };
        second.forward(g, pos.second()?, c)?
    };
    let l_c = contrastive_loss(
        g,
        ContrastiveInputs {
            a: out_a.h,
            m_pos: out_m.h,
            m_neg: h_m_neg,
            m: out_m.h,
            a_pos: out_a.h,
            a_neg: h_a_neg,
        },
        plan.weights.margin,
    )?;
    let mut terms = LossTerms {
        l_c: Some(l_c),
        l_a: None,
        l_m: None,
        l_kl: None,
        total: l_c,
    };
    match plan.mode {
        Mode::JointMultiview => {
            let l_a = cross_entropy(g, out_a.y_hat, &labels, beta_a)?;
            let l_m = cross_entropy(g, out_m.y_hat, &labels, beta_m)?;
            terms.l_a = Some(l_a);
            terms.l_m = Some(l_m);
            terms.total = g.add_all(&[l_c, l_a, l_m])?;
        }
        Mode::FrozenTeacherCe => {
            let l_a = cross_entropy(g, out_a.y_hat, &labels, beta_a)?;
            terms.l_a = Some(l_a);
            terms.total = g.add(l_c, l_a)?;
        }
        Mode::FrozenTeacherKl => {
            let soft: Tensor = g.value(out_m.y_hat).clone();
            let l_kl = kl_distill_loss(g, &soft, out_a.y_hat)?;
            terms.l_kl = Some(l_kl);
            terms.total = g.add(l_c, l_kl)?;
        }
        Mode::SingleView => unreachable!("handled above"),
    }
    Ok(terms)
}

/// One update: losses, backward, global clipping, Adam on trainable views.
#[allow(clippy::too_many_arguments)]
pub fn multiview_train_step(
    pos: &PairedBatch,
    neg: Option<&PairedBatch>,
    primary: &mut View,
    mut second: Option<&mut View>,
    plan: &TrainPlan,
    epoch: usize,
    states: &mut AdamStates,
    ctx: &mut Ctx,
) -> Result<StepReport> {
    let mut g = Graph::new();
    let terms = build_losses(&mut g, pos, neg, primary, second.as_deref_mut(), plan, epoch, ctx)?;
    let val = |v: Option<Var>| v.map(|v| g.value(v).item());
    let total = g.value(terms.total).item();
    if !total.is_finite() {
        return Err(Error::Numeric(format!("loss is {total}")));
    }
    let mut report = StepReport {
        l_c: val(terms.l_c),
        l_a: val(terms.l_a),
        l_m: val(terms.l_m),
        l_kl: val(terms.l_kl),
        total,
        clip: 1.0,
    };
    g.backward(terms.total)?;

    let train_second = plan.mode == Mode::JointMultiview;
    let mut named: Vec<(String, Tensor)> = primary
        .store
        .ids()
        .map(|id| primary.store.name(id).to_string())
        .zip(primary.store.gradients(&g))
        .collect();
    let n_primary = named.len();
    if train_second {
        let s = second.as_deref().expect("checked by build_losses");
        named.extend(
            s.store
                .ids()
                .map(|id| format!("second/{}", s.store.name(id)))
                .zip(s.store.gradients(&g)),
        );
    }
    report.clip = clip_gradients(&mut named, plan.clip_tau)?;
    let mut grads: Vec<Tensor> = named.into_iter().map(|(_, t)| t).collect();
    let second_grads = grads.split_off(n_primary);
    adam_step(&mut primary.store, &grads, &mut states.primary, plan.lr, plan.l2)?;
    if train_second {
        let s = second.expect("checked by build_losses");
        let st = states
            .second
            .as_mut()
            .ok_or_else(|| Error::Contract("second view has no optimizer state".into()))?;
        adam_step(&mut s.store, &second_grads, st, plan.lr, plan.l2)?;
    }
    Ok(report)
}
