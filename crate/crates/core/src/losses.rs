//! Training objectives: weighted cross-entropy, the cross-view contrastive
//! hinge, and teacher-student KL distillation.
//!
//! Probabilities are clamped at [`PROB_FLOOR`] before taking logarithms;
//! every clamp that actually fires is logged as a warning.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

pub const PROB_FLOOR: f64 = 1e-12;

/// Loss weights and the optional per-epoch decay of both betas.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub beta_a: f64,
    pub beta_m: f64,
    pub margin: f64,
    /// Decay rate; the configured betas act as the initial values.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            beta_a: 1.0,
            beta_m: 0.3,
            margin: 0.5,
            rho: None,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("beta_a", self.beta_a),
            ("beta_m", self.beta_m),
            ("margin", self.margin),
            ("rho", self.rho.unwrap_or(0.0)),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        Ok(())
    }

    /// `(beta_a, beta_m)` in effect at `epoch` (0-based).
    pub fn at_epoch(&self, epoch: usize) -> (f64, f64) {
        match self.rho {
            Some(rho) => (
                beta_schedule(self.beta_a, rho, epoch),
                beta_schedule(self.beta_m, rho, epoch),
            ),
            None => (self.beta_a, self.beta_m),
        }
    }
}

/// `beta_0 / (1 + rho * epoch)`.
pub fn beta_schedule(beta_0: f64, rho: f64, epoch: usize) -> f64 {
    beta_0 / (1.0 + rho * epoch as f64)
}

fn check_probs(g: &Graph, p: Var, what: &'static str) -> Result<(usize, usize)> {
    let s = g.value(p).shape();
    if s.len() != 2 {
        return Err(Error::Dimension {
            op: what,
            lhs: s.to_vec(),
            rhs: vec![],
        });
    }
    Ok((s[0], s[1]))
}

fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &c) in labels.iter().enumerate() {
        if c >= classes {
            return Err(Error::Contract(format!(
                "label {c} out of range for {classes} classes"
            )));
        }
        t.data_mut()[i * classes + c] = 1.0;
    }
    Ok(t)
}

/// `-(beta / N) * sum_i log y_hat[i, labels[i]]` for probabilities `y_hat[N, C]`.
pub fn cross_entropy(g: &mut Graph, y_hat: Var, labels: &[usize], beta: f64) -> Result<Var> {
    let (n, c) = check_probs(g, y_hat, "cross_entropy")?;
    if labels.len() != n {
        return Err(Error::Dimension {
            op: "cross_entropy",
            lhs: vec![n, c],
            rhs: vec![labels.len()],
        });
    }
    let y = one_hot(labels, c)?;
    let vals = g.value(y_hat);
    let clamped = labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| vals.at(i, l) < PROB_FLOOR)
        .count();
    if clamped > 0 {
        log::warn!("cross_entropy: {clamped} true-class probabilities clamped at {PROB_FLOOR}");
    }
    let p = g.clamp_min(y_hat, PROB_FLOOR);
    let lp = g.log(p)?;
    let yv = g.constant(y);
    let picked = g.mul(lp, yv)?;
    let s = g.sum(picked);
    Ok(g.scale(s, -beta / n as f64))
}

/// Row-wise `1 - cos(v_i, w_i)` for `v, w` of shape `[N, d]`; shape `[N]`.
pub fn cosine_distance(g: &mut Graph, v: Var, w: Var) -> Result<Var> {
    let vs = g.value(v).shape().to_vec();
    let ws = g.value(w).shape().to_vec();
    if vs != ws || vs.len() != 2 {
        return Err(Error::Dimension {
            op: "cosine_distance",
            lhs: vs,
            rhs: ws,
        });
    }
    for (name, x) in [("first", v), ("second", w)] {
        let t = g.value(x);
        if let Some(i) = (0..t.rows()).find(|&i| t.row(i).iter().all(|&a| a == 0.0)) {
            return Err(Error::Domain {
                op: "cosine_distance",
                detail: format!("{name} argument row {i} has zero norm"),
            });
        }
    }
    let dot = g.row_dot(v, w)?;
    let vv = g.row_dot(v, v)?;
    let ww = g.row_dot(w, w)?;
    let nv = g.sqrt(vv)?;
    let nw = g.sqrt(ww)?;
    let den = g.mul(nv, nw)?;
    let cos = g.div(dot, den)?;
    Ok(g.one_minus(cos))
}

/// Plain-number cosine distance.
pub fn cosine_distance_vec(v: &[f64], w: &[f64]) -> Result<f64> {
    if v.len() != w.len() {
        return Err(Error::Dimension {
            op: "cosine_distance",
            lhs: vec![v.len()],
            rhs: vec![w.len()],
        });
    }
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nw = w.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nv == 0.0 || nw == 0.0 {
        return Err(Error::Domain {
            op: "cosine_distance",
            detail: "zero-norm vector".into(),
        });
    }
    let dot: f64 = v.iter().zip(w).map(|(a, b)| a * b).sum();
    Ok(1.0 - dot / (nv * nw))
}

/// One direction of the hinge: `(1/2N) sum_i max(0, m + dis(x_i, pos_i) - dis(x_i, neg_i))`.
fn hinge_term(g: &mut Graph, x: Var, pos: Var, neg: Var, margin: f64) -> Result<Var> {
    let n = g.value(x).shape()[0];
    let dp = cosine_distance(g, x, pos)?;
    let dn = cosine_distance(g, x, neg)?;
    let diff = g.sub(dp, dn)?;
    let slack = g.offset(diff, margin);
    let h = g.relu(slack);
    let s = g.sum(h);
    Ok(g.scale(s, 1.0 / (2 * n) as f64))
}

/// Embeddings for the two directions of the cross-view contrastive loss.
///
/// `a_*` are acoustic-view embeddings, `m_*` multimodal-view embeddings.
/// The positive partner of `a` is `m_pos` (same utterance, other view) and
/// the negative is `m_neg`; symmetrically for `m`.
#[derive(Clone, Copy, Debug)]
pub struct ContrastiveInputs {
    pub a: Var,
    pub m_pos: Var,
    pub m_neg: Var,
    pub m: Var,
    pub a_pos: Var,
    pub a_neg: Var,
}

pub fn contrastive_loss(g: &mut Graph, e: ContrastiveInputs, margin: f64) -> Result<Var> {
    if !(margin.is_finite() && margin >= 0.0) {
        return Err(Error::Config(format!("margin must be non-negative, got {margin}")));
    }
    let la = hinge_term(g, e.a, e.m_pos, e.m_neg, margin)?;
    let lm = hinge_term(g, e.m, e.a_pos, e.a_neg, margin)?;
    g.add(la, lm)
}

/// `(1/N) sum_i sum_c p_t log(p_t / p_s)` with the teacher held constant.
pub fn kl_distill_loss(g: &mut Graph, teacher: &Tensor, student: Var) -> Result<Var> {
    let (n, c) = check_probs(g, student, "kl_distill_loss")?;
    if teacher.shape() != [n, c] {
        return Err(Error::Dimension {
            op: "kl_distill_loss",
            lhs: teacher.shape().to_vec(),
            rhs: vec![n, c],
        });
    }
    let sv = g.value(student);
    let clamped = teacher
        .data()
        .iter()
        .zip(sv.data())
        .filter(|&(&pt, &ps)| pt > 0.0 && ps < PROB_FLOOR)
        .count();
    if clamped > 0 {
        log::warn!("kl_distill_loss: {clamped} student probabilities clamped at {PROB_FLOOR}");
    }
    let neg_entropy: f64 = teacher
        .data()
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum();
    let ps = g.clamp_min(student, PROB_FLOOR);
    let lps = g.log(ps)?;
    let pt = g.constant(teacher.clone());
    let cross = g.mul(lps, pt)?;
    let s = g.sum(cross);
    let ns = g.neg(s);
    let kl = g.offset(ns, neg_entropy);
    Ok(g.scale(kl, 1.0 / n as f64))
}
