//! Modality gate (GMU) and context-based utterance attention.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::{affine, uniform_init, SeqVar};

/// Bimodal gated multimodal unit.
///
/// `h_a = tanh(x_a W_a + b_a)`, `h_l = tanh(x_l W_l + b_l)`,
/// `z = sigmoid([x_a, x_l] W_z + b_z)`, `h = z * h_a + (1 - z) * h_l`.
#[derive(Clone, Debug)]
pub struct GmuParams {
    pub acoustic_dim: usize,
    pub lexical_dim: usize,
    pub hidden_dim: usize,
    pub w_a: ParamId,
    pub b_a: ParamId,
    pub w_l: ParamId,
    pub b_l: ParamId,
    pub w_z: ParamId,
    pub b_z: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundGmu {
    pub w_a: Var,
    pub b_a: Var,
    pub w_l: Var,
    pub b_l: Var,
    pub w_z: Var,
    pub b_z: Var,
}

impl GmuParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        acoustic_dim: usize,
        lexical_dim: usize,
        hidden_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let both = acoustic_dim + lexical_dim;
        let mut add = |suffix: &str, shape: &[usize], fan_in: usize| {
            store.add(format!("{name}.{suffix}"), uniform_init(rng, shape, fan_in))
        };
        Ok(GmuParams {
            acoustic_dim,
            lexical_dim,
            hidden_dim,
            w_a: add("w_a", &[acoustic_dim, hidden_dim], acoustic_dim)?,
            b_a: add("b_a", &[hidden_dim], acoustic_dim)?,
            w_l: add("w_l", &[lexical_dim, hidden_dim], lexical_dim)?,
            b_l: add("b_l", &[hidden_dim], lexical_dim)?,
            w_z: add("w_z", &[both, hidden_dim], both)?,
            b_z: add("b_z", &[hidden_dim], both)?,
        })
    }

    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> BoundGmu {
        BoundGmu {
            w_a: store.bind(g, self.w_a),
            b_a: store.bind(g, self.b_a),
            w_l: store.bind(g, self.w_l),
            b_l: store.bind(g, self.b_l),
            w_z: store.bind(g, self.w_z),
            b_z: store.bind(g, self.b_z),
        }
    }
}

/// Returns `(h, z)`; `z` is kept for the per-word gate visualization.
pub fn gmu_forward(g: &mut Graph, x_a: Var, x_l: Var, p: &BoundGmu) -> Result<(Var, Var)> {
    let (sa, sl) = (g.value(x_a).shape().to_vec(), g.value(x_l).shape().to_vec());
    if sa.len() != 2 || sl.len() != 2 || sa[0] != sl[0] {
        return Err(Error::Dimension {
            op: "gmu_forward",
            lhs: sa,
            rhs: sl,
        });
    }
    let pa = affine(g, x_a, p.w_a, p.b_a)?;
    let h_a = g.tanh(pa);
    let pl = affine(g, x_l, p.w_l, p.b_l)?;
    let h_l = g.tanh(pl);
    let both = g.concat(&[x_a, x_l])?;
    let pz = affine(g, both, p.w_z, p.b_z)?;
    let z = g.sigmoid(pz);
    let za = g.mul(z, h_a)?;
    let inv = g.one_minus(z);
    let zl = g.mul(inv, h_l)?;
    let h = g.add(za, zl)?;
    Ok((h, z))
}

/// Mean of `z` over hidden units, per batch row: the acoustic share of a
/// word.
pub fn gate_average(z: &Tensor) -> Vec<f64> {
    (0..z.rows())
        .map(|i| z.row(i).iter().sum::<f64>() / z.cols() as f64)
        .collect()
}

/// Additive attention: `e_i = v . tanh(h_i W_h + b_h)`, `a = softmax(e)`
/// over valid steps, `z = sum_i a_i h_i`.
///
/// `b_h` lives in the attention space (extent `attn_dim`), the only
/// reading under which the bias can be added to `h_i W_h`.
#[derive(Clone, Debug)]
pub struct AttnParams {
    pub hidden_dim: usize,
    pub attn_dim: usize,
    pub w_h: ParamId,
    pub b_h: ParamId,
    pub v: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundAttn {
    pub w_h: Var,
    pub b_h: Var,
    pub v: Var,
}

impl AttnParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        hidden_dim: usize,
        attn_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(AttnParams {
            hidden_dim,
            attn_dim,
            w_h: store.add(
                format!("{name}.w_h"),
                uniform_init(rng, &[hidden_dim, attn_dim], hidden_dim),
            )?,
            b_h: store.add(
                format!("{name}.b_h"),
                uniform_init(rng, &[attn_dim], hidden_dim),
            )?,
            v: store.add(format!("{name}.v"), uniform_init(rng, &[attn_dim], attn_dim))?,
        })
    }

    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> BoundAttn {
        BoundAttn {
            w_h: store.bind(g, self.w_h),
            b_h: store.bind(g, self.b_h),
            v: store.bind(g, self.v),
        }
    }
}

/// Returns `(z_utt [batch, d_h], a [batch, max_steps])`.
pub fn context_attention(g: &mut Graph, seq: &SeqVar, p: &BoundAttn) -> Result<(Var, Var)> {
    seq.check_nonempty("context_attention")?;
    let da = g.value(p.v).len();
    let v = g.reshape(p.v, vec![da, 1])?;
    let mut scores = Vec::with_capacity(seq.max_steps());
    for &h in &seq.steps {
        let proj = affine(g, h, p.w_h, p.b_h)?;
        let t = g.tanh(proj);
        scores.push(g.matmul(t, v)?);
    }
    let e = g.concat(&scores)?;
    let a = g.masked_softmax(e, &seq.flat_mask())?;
    let z = g.weighted_steps(&seq.steps, a)?;
    Ok((z, a))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::SeqBatch;

    fn c(g: &mut Graph, rows: usize, cols: usize, data: &[f64]) -> Var {
        g.constant(Tensor::matrix(rows, cols, data.to_vec()).unwrap())
    }

    fn gmu_consts(g: &mut Graph, wa: &[f64], wl: &[f64], wz: &[f64], bz: f64) -> BoundGmu {
        // 2-dim inputs, 2 hidden units
        BoundGmu {
            w_a: c(g, 2, 2, wa),
            b_a: g.constant(Tensor::vector(vec![0.1, -0.2])),
            w_l: c(g, 2, 2, wl),
            b_l: g.constant(Tensor::vector(vec![0.1, -0.2])),
            w_z: c(g, 4, 2, wz),
            b_z: g.constant(Tensor::vector(vec![bz, bz])),
        }
    }

    #[test]
    fn zero_gate_mixes_evenly() {
        let mut g = Graph::new();
        let p = gmu_consts(&mut g, &[1.0, 0.5, -0.3, 0.2], &[0.2, 0.1, 0.7, -1.0], &[0.0; 8], 0.0);
        let xa = c(&mut g, 1, 2, &[0.4, -1.2]);
        let xl = c(&mut g, 1, 2, &[1.5, 0.3]);
        let (h, z) = gmu_forward(&mut g, xa, xl, &p).unwrap();
        assert!(g.value(z).data().iter().all(|&v| v == 0.5));
        let pa = affine(&mut g, xa, p.w_a, p.b_a).unwrap();
        let ha = g.tanh(pa);
        let pl = affine(&mut g, xl, p.w_l, p.b_l).unwrap();
        let hl = g.tanh(pl);
        for j in 0..2 {
            let expect = 0.5 * g.value(ha).data()[j] + 0.5 * g.value(hl).data()[j];
            assert!((g.value(h).data()[j] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn equal_branches_give_branch_output() {
        let mut g = Graph::new();
        let w = [0.3, -0.7, 1.1, 0.4];
        let p = gmu_consts(&mut g, &w, &w, &[0.5, -0.1, 0.2, 0.9, -1.0, 0.3, 0.05, 0.6], 0.3);
        let x = c(&mut g, 1, 2, &[0.8, -0.25]);
        let (h, _) = gmu_forward(&mut g, x, x, &p).unwrap();
        let pa = affine(&mut g, x, p.w_a, p.b_a).unwrap();
        let ha = g.tanh(pa);
        for (a, b) in g.value(h).data().iter().zip(g.value(ha).data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn saturated_gate_selects_acoustic_branch() {
        let mut g = Graph::new();
        let p = gmu_consts(&mut g, &[1.0, 0.5, -0.3, 0.2], &[0.2, 0.1, 0.7, -1.0], &[0.0; 8], 20.0);
        let xa = c(&mut g, 1, 2, &[0.4, -1.2]);
        let xl = c(&mut g, 1, 2, &[1.5, 0.3]);
        let (h, z) = gmu_forward(&mut g, xa, xl, &p).unwrap();
        assert!(g.value(z).data().iter().all(|&v| v > 0.9999));
        let pa = affine(&mut g, xa, p.w_a, p.b_a).unwrap();
        let ha = g.tanh(pa);
        for (a, b) in g.value(h).data().iter().zip(g.value(ha).data()) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn gmu_rejects_mismatched_batches() {
        let mut g = Graph::new();
        let p = gmu_consts(&mut g, &[0.0; 4], &[0.0; 4], &[0.0; 8], 0.0);
        let xa = c(&mut g, 1, 2, &[0.0, 0.0]);
        let xl = c(&mut g, 2, 2, &[0.0; 4]);
        assert!(gmu_forward(&mut g, xa, xl, &p).is_err());
    }

    fn attn_consts(g: &mut Graph, w: &[f64], b: &[f64], v: &[f64]) -> BoundAttn {
        BoundAttn {
            w_h: c(g, 2, 2, w),
            b_h: g.constant(Tensor::vector(b.to_vec())),
            v: g.constant(Tensor::vector(v.to_vec())),
        }
    }

    #[test]
    fn single_step_attends_fully() {
        let mut g = Graph::new();
        let p = attn_consts(&mut g, &[0.3, 0.1, -0.2, 0.5], &[0.0, 0.1], &[1.0, -1.0]);
        let seq = SeqBatch::from_items(&[vec![vec![0.7, -0.4]]]).unwrap();
        let sv = SeqVar::from_batch(&mut g, &seq);
        let (z, a) = context_attention(&mut g, &sv, &p).unwrap();
        assert_eq!(g.value(a).data(), &[1.0]);
        assert_eq!(g.value(z).data(), &[0.7, -0.4]);
    }

    #[test]
    fn zero_attention_vector_is_mean_pool() {
        let mut g = Graph::new();
        let p = attn_consts(&mut g, &[0.3, 0.1, -0.2, 0.5], &[0.0, 0.1], &[0.0, 0.0]);
        let seq = SeqBatch::from_items(&[
            vec![vec![1.0, 2.0], vec![3.0, -2.0], vec![-1.0, 0.0]],
            vec![vec![4.0, 4.0]],
        ])
        .unwrap();
        let sv = SeqVar::from_batch(&mut g, &seq);
        let (z, a) = context_attention(&mut g, &sv, &p).unwrap();
        let av = g.value(a);
        for t in 0..3 {
            assert!((av.at(0, t) - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(av.row(1), &[1.0, 0.0, 0.0]);
        let zv = g.value(z);
        assert!((zv.at(0, 0) - 1.0).abs() < 1e-15);
        assert!(zv.at(0, 1).abs() < 1e-15);
        assert_eq!(zv.row(1), &[4.0, 4.0]);
    }

    #[test]
    fn hand_evaluated_three_steps() {
        let w = [0.5, -0.3, 0.2, 0.8];
        let b = [0.1, -0.1];
        let v = [1.5, -0.7];
        let hs = [[0.2, -0.4], [1.0, 0.3], [-0.6, 0.9]];
        let mut g = Graph::new();
        let p = attn_consts(&mut g, &w, &b, &v);
        let seq = SeqBatch::from_items(&[hs.iter().map(|h| h.to_vec()).collect()]).unwrap();
        let sv = SeqVar::from_batch(&mut g, &seq);
        let (z, a) = context_attention(&mut g, &sv, &p).unwrap();

        // scalar-by-scalar evaluation
        let e: Vec<f64> = hs
            .iter()
            .map(|h| {
                (0..2)
                    .map(|k| {
                        let pre = h[0] * w[k] + h[1] * w[2 + k] + b[k];
                        v[k] * pre.tanh()
                    })
                    .sum()
            })
            .collect();
        let zsum: f64 = e.iter().map(|x| x.exp()).sum();
        let expect_a: Vec<f64> = e.iter().map(|x| x.exp() / zsum).collect();
        for t in 0..3 {
            assert!((g.value(a).data()[t] - expect_a[t]).abs() < 1e-12);
        }
        for j in 0..2 {
            let expect: f64 = (0..3).map(|t| expect_a[t] * hs[t][j]).sum();
            assert!((g.value(z).data()[j] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn gate_average_over_hidden_units() {
        let z = Tensor::matrix(2, 2, vec![0.2, 0.4, 1.0, 0.0]).unwrap();
        let avg = gate_average(&z);
        assert!((avg[0] - 0.3).abs() < 1e-15);
        assert_eq!(avg[1], 0.5);
    }
}
