//! Neural building blocks shared by every view.
//!
//! Sequences live in two forms: [`SeqBatch`] holds padded input data
//! (`[batch, max_steps, feat]` plus lengths), and [`SeqVar`] is the
//! graph-side form with one `[batch, feat]` node per time step. Padding is
//! always on the right; `mask(i, t)` is `t < lengths[i]`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Forward-pass mode and the randomness dropout draws from.
pub struct Ctx {
    pub training: bool,
    pub rng: ChaCha8Rng,
}

impl Ctx {
    pub fn train(rng: ChaCha8Rng) -> Self {
        Ctx { training: true, rng }
    }

    pub fn eval() -> Self {
        use rand::SeedableRng;
        Ctx {
            training: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }
}

/// Uniform initialization in `[-k, k]` with `k = 1/sqrt(fan_in)`.
pub fn uniform_init(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let k = 1.0 / (fan_in.max(1) as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.random_range(-k..=k);
    }
    t
}

// ── padded sequence data ─────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct SeqBatch {
    /// Shape `[batch, max_steps, feat]`, zero beyond each item's length.
    pub values: Tensor,
    pub lengths: Vec<usize>,
}

impl SeqBatch {
    /// Pads variable-length items (each a list of equal-width vectors).
    pub fn from_items(items: &[Vec<Vec<f64>>]) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Contract("sequence batch with no items".into()));
        }
        if let Some(i) = items.iter().position(Vec::is_empty) {
            return Err(Error::Contract(format!(
                "sequence item {i} has zero length"
            )));
        }
        let feat = items[0][0].len();
        let max_steps = items.iter().map(Vec::len).max().unwrap_or(0);
        let mut data = vec![0.0; items.len() * max_steps * feat];
        for (i, item) in items.iter().enumerate() {
            for (t, v) in item.iter().enumerate() {
                if v.len() != feat {
                    return Err(Error::Dimension {
                        op: "seq_batch",
                        lhs: vec![feat],
                        rhs: vec![v.len()],
                    });
                }
                let off = (i * max_steps + t) * feat;
                data[off..off + feat].copy_from_slice(v);
            }
        }
        Ok(SeqBatch {
            values: Tensor::new(vec![items.len(), max_steps, feat], data)?,
            lengths: items.iter().map(Vec::len).collect(),
        })
    }

    pub fn batch(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn max_steps(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn feat(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn mask(&self, i: usize, t: usize) -> bool {
        t < self.lengths[i]
    }

    /// The `[batch, feat]` slice at step `t`.
    pub fn step(&self, t: usize) -> Tensor {
        let (b, steps, f) = (self.batch(), self.max_steps(), self.feat());
        let mut out = Vec::with_capacity(b * f);
        for i in 0..b {
            let off = (i * steps + t) * f;
            out.extend_from_slice(&self.values.data()[off..off + f]);
        }
        Tensor::from_parts(vec![b, f], out)
    }

    /// Valid step vectors of item `i`.
    pub fn item(&self, i: usize) -> Vec<Vec<f64>> {
        let (steps, f) = (self.max_steps(), self.feat());
        (0..self.lengths[i])
            .map(|t| {
                let off = (i * steps + t) * f;
                self.values.data()[off..off + f].to_vec()
            })
            .collect()
    }
}

/// Graph-side sequence: one `[batch, feat]` node per step.
#[derive(Clone, Debug)]
pub struct SeqVar {
    pub steps: Vec<Var>,
    pub lengths: Vec<usize>,
}

impl SeqVar {
    pub fn from_batch(g: &mut Graph, seq: &SeqBatch) -> Self {
        SeqVar {
            steps: (0..seq.max_steps()).map(|t| g.constant(seq.step(t))).collect(),
            lengths: seq.lengths.clone(),
        }
    }

    pub fn batch(&self) -> usize {
        self.lengths.len()
    }

    pub fn max_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn mask(&self, i: usize, t: usize) -> bool {
        t < self.lengths[i]
    }

    fn step_mask(&self, t: usize) -> (Tensor, bool) {
        let m: Vec<f64> = self
            .lengths
            .iter()
            .map(|&l| if t < l { 1.0 } else { 0.0 })
            .collect();
        let all = m.iter().all(|&v| v == 1.0);
        (Tensor::vector(m), all)
    }

    /// Flattened `[batch * max_steps]` validity mask, row-major by item.
    pub fn flat_mask(&self) -> Vec<bool> {
        let t = self.max_steps();
        let mut out = Vec::with_capacity(self.batch() * t);
        for &l in &self.lengths {
            out.extend((0..t).map(|s| s < l));
        }
        out
    }

    pub fn check_nonempty(&self, what: &str) -> Result<()> {
        if let Some(i) = self.lengths.iter().position(|&l| l == 0) {
            return Err(Error::Contract(format!("{what}: item {i} is fully masked")));
        }
        if self.steps.is_empty() {
            return Err(Error::Contract(format!("{what}: sequence has no steps")));
        }
        Ok(())
    }
}

// ── affine ───────────────────────────────────────────────────────────

/// `x W + b` for `x[batch, in]`, `W[in, out]`, `b[out]`.
pub fn affine(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = g.matmul(x, w)?;
    g.add_row(xw, b)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let w = store.add(
            format!("{name}.w"),
            uniform_init(rng, &[input, output], input),
        )?;
        let b = store.add(format!("{name}.b"), uniform_init(rng, &[output], input))?;
        Ok(Linear { w, b })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = store.bind(g, self.w);
        let b = store.bind(g, self.b);
        affine(g, x, w, b)
    }
}

// ── LSTM ─────────────────────────────────────────────────────────────

/// Gate order used throughout: input, forget, output, candidate.
pub const GATES: [&str; 4] = ["i", "f", "o", "g"];

/// Per-gate weights `[input_dim + hidden_dim, hidden_dim]` applied to the
/// concatenation `[x_t, h_prev]`, plus per-gate biases.
#[derive(Clone, Debug)]
pub struct LstmParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w: [ParamId; 4],
    pub b: [ParamId; 4],
}

/// Gate parameters fused into single nodes for one graph.
#[derive(Clone, Copy, Debug)]
pub struct BoundLstm {
    pub w: Var,
    pub b: Var,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl LstmParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let fan_in = input_dim + hidden_dim;
        let mut w = Vec::with_capacity(4);
        let mut b = Vec::with_capacity(4);
        for gate in GATES {
            w.push(store.add(
                format!("{name}.w_{gate}"),
                uniform_init(rng, &[fan_in, hidden_dim], fan_in),
            )?);
            b.push(store.add(
                format!("{name}.b_{gate}"),
                uniform_init(rng, &[hidden_dim], fan_in),
            )?);
        }
        Ok(LstmParams {
            input_dim,
            hidden_dim,
            w: [w[0], w[1], w[2], w[3]],
            b: [b[0], b[1], b[2], b[3]],
        })
    }

    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> Result<BoundLstm> {
        let ws: Vec<Var> = self.w.iter().map(|&p| store.bind(g, p)).collect();
        let bs: Vec<Var> = self.b.iter().map(|&p| store.bind(g, p)).collect();
        Ok(BoundLstm {
            w: g.concat(&ws)?,
            b: g.concat(&bs)?,
            input_dim: self.input_dim,
            hidden_dim: self.hidden_dim,
        })
    }
}

/// One LSTM recurrence step; returns `(h_t, c_t)`.
pub fn lstm_cell_step(
    g: &mut Graph,
    x_t: Var,
    h_prev: Var,
    c_prev: Var,
    cell: &BoundLstm,
) -> Result<(Var, Var)> {
    let h = cell.hidden_dim;
    let xs = g.value(x_t).shape().to_vec();
    if xs.len() != 2 || xs[1] != cell.input_dim {
        return Err(Error::Dimension {
            op: "lstm_cell_step",
            lhs: xs,
            rhs: vec![cell.input_dim, h],
        });
    }
    let xh = g.concat(&[x_t, h_prev])?;
    let pre = affine(g, xh, cell.w, cell.b)?;
    let pi = g.slice_cols(pre, 0, h)?;
    let pf = g.slice_cols(pre, h, 2 * h)?;
    let po = g.slice_cols(pre, 2 * h, 3 * h)?;
    let pg = g.slice_cols(pre, 3 * h, 4 * h)?;
    let i = g.sigmoid(pi);
    let f = g.sigmoid(pf);
    let o = g.sigmoid(po);
    let cand = g.tanh(pg);
    let keep = g.mul(f, c_prev)?;
    let write = g.mul(i, cand)?;
    let c = g.add(keep, write)?;
    let tc = g.tanh(c);
    let h_t = g.mul(o, tc)?;
    Ok((h_t, c))
}

/// Runs one direction over the valid steps of every item. Outputs at
/// padded steps are exactly zero.
fn run_direction(g: &mut Graph, seq: &SeqVar, cell: &BoundLstm, reverse: bool) -> Result<Vec<Var>> {
    let b = seq.batch();
    let hd = cell.hidden_dim;
    let mut h = g.constant(Tensor::zeros(&[b, hd]));
    let mut c = g.constant(Tensor::zeros(&[b, hd]));
    let steps = seq.max_steps();
    let mut out = vec![h; steps];
    let order: Vec<usize> = if reverse {
        (0..steps).rev().collect()
    } else {
        (0..steps).collect()
    };
    for t in order {
        let (h_new, c_new) = lstm_cell_step(g, seq.steps[t], h, c, cell)?;
        let (m, all_valid) = seq.step_mask(t);
        if all_valid {
            h = h_new;
            c = c_new;
            out[t] = h;
        } else {
            // Padded rows keep their previous state; in the reverse pass
            // that state is still the zero initial state.
            let inv: Vec<f64> = m.data().iter().map(|v| 1.0 - v).collect();
            let mv = g.constant(m);
            let iv = g.constant(Tensor::vector(inv));
            let hk = g.scale_rows(h_new, mv)?;
            let hp = g.scale_rows(h, iv)?;
            h = g.add(hk, hp)?;
            let ck = g.scale_rows(c_new, mv)?;
            let cp = g.scale_rows(c, iv)?;
            c = g.add(ck, cp)?;
            out[t] = if reverse { h } else { g.scale_rows(h, mv)? };
        }
    }
    Ok(out)
}

/// Bidirectional LSTM: per-step output `[h_fwd; h_bwd]` of width
/// `2 * hidden`.
pub fn bilstm(g: &mut Graph, seq: &SeqVar, fwd: &BoundLstm, bwd: &BoundLstm) -> Result<SeqVar> {
    seq.check_nonempty("bilstm")?;
    let f = run_direction(g, seq, fwd, false)?;
    let r = run_direction(g, seq, bwd, true)?;
    let steps = f
        .into_iter()
        .zip(r)
        .map(|(a, b)| g.concat(&[a, b]))
        .collect::<Result<Vec<_>>>()?;
    Ok(SeqVar {
        steps,
        lengths: seq.lengths.clone(),
    })
}

/// `N` stacked bidirectional layers; layer `k` feeds layer `k + 1`.
#[derive(Clone, Debug)]
pub struct BiLstmStack {
    pub layers: Vec<(LstmParams, LstmParams)>,
}

impl BiLstmStack {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        num_layers: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if num_layers == 0 {
            return Err(Error::Config("a BLSTM stack needs at least one layer".into()));
        }
        let mut layers = Vec::with_capacity(num_layers);
        let mut d = input_dim;
        for k in 0..num_layers {
            let f = LstmParams::new(store, &format!("{name}.l{k}.fwd"), d, hidden_dim, rng)?;
            let b = LstmParams::new(store, &format!("{name}.l{k}.bwd"), d, hidden_dim, rng)?;
            layers.push((f, b));
            d = 2 * hidden_dim;
        }
        Ok(BiLstmStack { layers })
    }

    pub fn output_dim(&self) -> usize {
        2 * self.layers[0].0.hidden_dim
    }

    /// Dropout of probability `dropout_p` is applied between layers.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        seq: &SeqVar,
        ctx: &mut Ctx,
        dropout_p: f64,
    ) -> Result<SeqVar> {
        let mut cur = seq.clone();
        for (k, (f, b)) in self.layers.iter().enumerate() {
            if k > 0 {
                cur = dropout_seq(g, &cur, dropout_p, ctx)?;
            }
            let fb = f.bind(g, store)?;
            let bb = b.bind(g, store)?;
            cur = bilstm(g, &cur, &fb, &bb)?;
        }
        Ok(cur)
    }
}

// ── batch normalization ──────────────────────────────────────────────

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Batch normalization over the feature axis with learned scale/shift
/// and running statistics for evaluation.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(BatchNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]))?,
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
        })
    }

    pub fn dim(&self) -> usize {
        self.running_mean.len()
    }

    /// Normalizes `x[batch, feat]`.
    pub fn forward(
        &mut self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        training: bool,
    ) -> Result<Var> {
        let b = g.value(x).shape()[0];
        let seq = SeqVar {
            steps: vec![x],
            lengths: vec![1; b],
        };
        Ok(self.forward_seq(g, store, &seq, training)?.steps[0])
    }

    /// Normalizes every step of a masked sequence. Statistics pool all
    /// valid `(item, step)` positions; padded rows do not contribute.
    pub fn forward_seq(
        &mut self,
        g: &mut Graph,
        store: &ParamStore,
        seq: &SeqVar,
        training: bool,
    ) -> Result<SeqVar> {
        let dim = self.dim();
        for &s in &seq.steps {
            let sh = g.value(s).shape();
            if sh.len() != 2 || sh[1] != dim {
                return Err(Error::Dimension {
                    op: "batch_norm",
                    lhs: sh.to_vec(),
                    rhs: vec![dim],
                });
            }
        }
        let gamma = store.bind(g, self.gamma);
        let beta = store.bind(g, self.beta);
        let (mean, inv_std) = if training {
            let count: usize = seq.lengths.iter().map(|&l| l.min(seq.max_steps())).sum();
            if count < 2 {
                return Err(Error::Contract(format!(
                    "batch_norm in training mode needs at least 2 samples, got {count}"
                )));
            }
            let valid_rows = |g: &mut Graph, t: usize, v: Var| -> Result<Var> {
                let (m, all) = seq.step_mask(t);
                if all {
                    Ok(v)
                } else {
                    let mv = g.constant(m);
                    g.scale_rows(v, mv)
                }
            };
            let mut sums = Vec::with_capacity(seq.max_steps());
            for (t, &s) in seq.steps.iter().enumerate() {
                let v = valid_rows(g, t, s)?;
                sums.push(g.sum_rows(v)?);
            }
            let total = g.add_all(&sums)?;
            let mean = g.scale(total, 1.0 / count as f64);
            let neg_mean = g.neg(mean);
            let mut sq = Vec::with_capacity(seq.max_steps());
            for (t, &s) in seq.steps.iter().enumerate() {
                let c = g.add_row(s, neg_mean)?;
                let c2 = g.mul(c, c)?;
                let v = valid_rows(g, t, c2)?;
                sq.push(g.sum_rows(v)?);
            }
            let total_sq = g.add_all(&sq)?;
            let var = g.scale(total_sq, 1.0 / count as f64);

            let mv = g.value(mean).data().to_vec();
            let vv = g.value(var).data().to_vec();
            for j in 0..dim {
                self.running_mean[j] =
                    BN_MOMENTUM * self.running_mean[j] + (1.0 - BN_MOMENTUM) * mv[j];
                self.running_var[j] =
                    BN_MOMENTUM * self.running_var[j] + (1.0 - BN_MOMENTUM) * vv[j];
            }

            let ve = g.offset(var, BN_EPS);
            let sd = g.sqrt(ve)?;
            let ones = g.constant(Tensor::full(&[dim], 1.0));
            let inv = g.div(ones, sd)?;
            (neg_mean, inv)
        } else {
            let neg: Vec<f64> = self.running_mean.iter().map(|m| -m).collect();
            let inv: Vec<f64> = self
                .running_var
                .iter()
                .map(|v| 1.0 / (v + BN_EPS).sqrt())
                .collect();
            (
                g.constant(Tensor::vector(neg)),
                g.constant(Tensor::vector(inv)),
            )
        };
        let steps = seq
            .steps
            .iter()
            .map(|&s| {
                let c = g.add_row(s, mean)?;
                let n = g.mul_row(c, inv_std)?;
                let sc = g.mul_row(n, gamma)?;
                g.add_row(sc, beta)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SeqVar {
            steps,
            lengths: seq.lengths.clone(),
        })
    }
}

// ── dropout and pooling ──────────────────────────────────────────────

/// Inverted dropout: survivors are scaled by `1 / (1 - p)`; identity in
/// evaluation mode or when `p == 0`.
pub fn dropout(g: &mut Graph, x: Var, p: f64, training: bool, rng: &mut ChaCha8Rng) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("dropout probability {p} not in [0, 1)")));
    }
    if !training || p == 0.0 {
        return Ok(x);
    }
    let shape = g.value(x).shape().to_vec();
    let keep = 1.0 / (1.0 - p);
    let mut mask = Tensor::zeros(&shape);
    for m in mask.data_mut() {
        if rng.random::<f64>() >= p {
            *m = keep;
        }
    }
    let mv = g.constant(mask);
    g.mul(x, mv)
}

fn dropout_seq(g: &mut Graph, seq: &SeqVar, p: f64, ctx: &mut Ctx) -> Result<SeqVar> {
    if !ctx.training || p == 0.0 {
        return Ok(seq.clone());
    }
    let steps = seq
        .steps
        .iter()
        .map(|&s| dropout(g, s, p, true, &mut ctx.rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(SeqVar {
        steps,
        lengths: seq.lengths.clone(),
    })
}

/// Uniform `1/len` weights over valid steps, `[batch, max_steps]`.
pub fn mean_weights(seq: &SeqVar) -> Tensor {
    let t = seq.max_steps();
    let mut w = vec![0.0; seq.batch() * t];
    for (i, &l) in seq.lengths.iter().enumerate() {
        for s in 0..l.min(t) {
            w[i * t + s] = 1.0 / l as f64;
        }
    }
    Tensor::from_parts(vec![seq.batch(), t], w)
}

/// Per-item mean of the valid step vectors.
pub fn mean_pool(g: &mut Graph, seq: &SeqVar) -> Result<Var> {
    seq.check_nonempty("mean_pool")?;
    let w = g.constant(mean_weights(seq));
    g.weighted_steps(&seq.steps, w)
}
