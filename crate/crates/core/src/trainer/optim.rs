use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Moment estimates for every parameter of one store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// Global L2 norm of all gradients; if it exceeds `tau`, every gradient is
/// scaled by `tau / norm`. Returns the factor applied.
pub fn clip_gradients(grads: &mut [(String, Tensor)], tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("clip threshold must be positive, got {tau}")));
    }
    let mut sq = 0.0;
    for (name, g) in grads.iter() {
        if !g.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient in parameter {name}")));
        }
        sq += g.data().iter().map(|x| x * x).sum::<f64>();
    }
    let norm = sq.sqrt();
    if !norm.is_finite() {
        return Err(Error::Numeric(format!("gradient norm overflowed ({norm})")));
    }
    if norm > tau {
        let s = tau / norm;
        for (_, g) in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
        Ok(s)
    } else {
        Ok(1.0)
    }
}

/// One bias-corrected Adam update; `l2 * θ` is added to each gradient first.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    l2: f64,
) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::Dimension {
            op: "adam_step",
            lhs: vec![grads.len(), state.m.len()],
            rhs: vec![store.len()],
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    let ids: Vec<_> = store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let p = store.get_mut(id);
        if grads[k].shape() != p.shape() || state.m[k].shape() != p.shape() {
            return Err(Error::Dimension {
                op: "adam_step",
                lhs: grads[k].shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        let (m, v) = (state.m[k].data_mut(), state.v[k].data_mut());
        for (i, theta) in p.data_mut().iter_mut().enumerate() {
            let g = grads[k].data()[i] + l2 * *theta;
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            *theta -= lr * mh / (vh.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn named(vals: &[&[f64]]) -> Vec<(String, Tensor)> {
        vals.iter()
            .enumerate()
            .map(|(i, v)| (format!("p{i}"), Tensor::vector(v.to_vec())))
            .collect()
    }

    fn norm(g: &[(String, Tensor)]) -> f64 {
        g.iter().map(|(_, t)| t.norm_l2().powi(2)).sum::<f64>().sqrt()
    }

    #[test]
    fn below_threshold_is_untouched() {
        let mut g = named(&[&[3.0], &[0.0]]);
        assert_eq!(clip_gradients(&mut g, 5.0).unwrap(), 1.0);
        assert_eq!(g[0].1.data(), &[3.0]);
    }

    #[test]
    fn norm_ten_halves() {
        let mut g = named(&[&[6.0], &[8.0]]);
        let s = clip_gradients(&mut g, 5.0).unwrap();
        assert!((s - 0.5).abs() < 1e-15);
        assert!((norm(&g) - 5.0).abs() < 1e-9);
    }

    #[test]
    fn exactly_at_threshold_is_not_clipped() {
        let mut g = named(&[&[3.0, 4.0]]);
        assert_eq!(clip_gradients(&mut g, 5.0).unwrap(), 1.0);
        assert_eq!(g[0].1.data(), &[3.0, 4.0]);
    }

    #[test]
    fn nan_names_the_parameter() {
        let mut g = named(&[&[1.0], &[f64::NAN]]);
        match clip_gradients(&mut g, 5.0) {
            Err(Error::Numeric(m)) => assert!(m.contains("p1")),
            other => panic!("{other:?}"),
        }
    }

    fn one_param(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::vector(vec![v])).unwrap();
        s
    }

    #[test]
    fn zero_gradient_only_decays() {
        let mut s = one_param(2.0);
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &[Tensor::vector(vec![0.0])], &mut st, 0.1, 0.0).unwrap();
        assert_eq!(s.iter().next().unwrap().1.data(), &[2.0]);
        adam_step(&mut s, &[Tensor::vector(vec![0.0])], &mut st, 0.1, 0.5).unwrap();
        assert!(s.iter().next().unwrap().1.data()[0] < 2.0);
    }

    #[test]
    fn first_step_by_hand() {
        // m = 0.1 g, v = 0.001 g^2; corrected m/sqrt(v) = g/|g| up to eps.
        let (theta, g, lr) = (0.7, -0.3, 0.01);
        let mut s = one_param(theta);
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &[Tensor::vector(vec![g])], &mut st, lr, 0.0).unwrap();
        let mh = (0.1 * g) / 0.1;
        let vh = (0.001 * g * g) / (1.0 - 0.999);
        let want = theta - lr * mh / (vh.sqrt() + 1e-8);
        assert!((s.iter().next().unwrap().1.data()[0] - want).abs() < 1e-15);
        assert!((want - (theta + lr)).abs() < 1e-7);
    }

    #[test]
    fn repeated_runs_are_bitwise_equal() {
        let run = || {
            let mut s = one_param(0.5);
            let mut st = AdamState::new(&s);
            for k in 0..10 {
                let g = Tensor::vector(vec![(k as f64 * 0.37).sin()]);
                adam_step(&mut s, &[g], &mut st, 1e-3, 1e-5).unwrap();
            }
            let bits = s.iter().next().unwrap().1.data()[0].to_bits();
            bits
        };
        assert_eq!(run(), run());
    }
}
