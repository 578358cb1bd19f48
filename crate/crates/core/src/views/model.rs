use rand_chacha::ChaCha8Rng;

use super::config::{Readout, ViewConfig, ViewKind};
use crate::autodiff::{Graph, ParamStore, RowPick, Tensor, Var};
use crate::corpus::{check_spans, Batch, Corpus, FeatureStats, Span, UtteranceRecord};
use crate::error::{Error, Result};
use crate::fusion::{context_attention, gate_average, gmu_forward, AttnParams, GmuParams};
use crate::layers::{dropout, mean_pool, BatchNorm, BiLstmStack, Ctx, Linear, SeqBatch, SeqVar};

/// The target speaker's frames, in order.
pub fn filtered_frames(u: &UtteranceRecord) -> Result<Vec<Vec<f64>>> {
    let kept: Vec<Vec<f64>> = u
        .frames
        .iter()
        .zip(&u.speaker_flags)
        .filter(|(_, &f)| f)
        .map(|(v, _)| v.clone())
        .collect();
    if kept.is_empty() {
        return Err(Error::Data {
            id: u.id.clone(),
            detail: "no frames are flagged as the speaker's".into(),
        });
    }
    Ok(kept)
}

/// Single-item batch of the speaker-flagged frames.
pub fn speaker_frame_filter(u: &UtteranceRecord) -> Result<SeqBatch> {
    SeqBatch::from_items(&[filtered_frames(u)?])
}

/// The alignment re-expressed in speaker-filtered frame positions.
pub fn filtered_spans(u: &UtteranceRecord) -> Result<Vec<Span>> {
    let spans = u.alignment.as_ref().ok_or_else(|| Error::Data {
        id: u.id.clone(),
        detail: "word alignment is absent".into(),
    })?;
    check_spans(&u.id, spans, u.frames.len())?;
    let mut before = Vec::with_capacity(u.frames.len() + 1);
    let mut n = 0;
    for &f in &u.speaker_flags {
        before.push(n);
        n += usize::from(f);
    }
    before.push(n);
    spans
        .iter()
        .map(|s| {
            if (s.start()..s.end()).any(|t| !u.speaker_flags[t]) {
                return Err(Error::Alignment(format!(
                    "{}: span {s:?} covers non-speaker frames",
                    u.id
                )));
            }
            Ok(Span(before[s.start()], before[s.start()] + s.len()))
        })
        .collect()
}

/// Per-word vectors read from frame-level BLSTM outputs `enc` (`[b, 2H]` per step).
pub fn read_acoustic_words(
    g: &mut Graph,
    enc: &SeqVar,
    spans: &[Vec<Span>],
    readout: Readout,
) -> Result<SeqVar> {
    if spans.len() != enc.batch() {
        return Err(Error::Dimension {
            op: "acoustic_word_encode",
            lhs: vec![spans.len()],
            rhs: vec![enc.batch()],
        });
    }
    for (i, s) in spans.iter().enumerate() {
        check_spans(&format!("item {i}"), s, enc.lengths[i])?;
        if s.is_empty() {
            return Err(Error::Alignment(format!("item {i} has no words")));
        }
    }
    let words = spans.iter().map(Vec::len).max().unwrap_or(0);
    let width = g.value(enc.steps[0]).cols();
    let half = width / 2;
    let pick = |rows: &dyn Fn(usize, Span) -> Vec<RowPick>, k: usize| -> Vec<Vec<RowPick>> {
        spans
            .iter()
            .enumerate()
            .map(|(i, s)| s.get(k).map(|&sp| rows(i, sp)).unwrap_or_default())
            .collect()
    };
    let mut steps = Vec::with_capacity(words);
    match readout {
        Readout::Endpoints => {
            let fwd: Vec<Var> = enc
                .steps
                .iter()
                .map(|&s| g.slice_cols(s, 0, half))
                .collect::<Result<_>>()?;
            let bwd: Vec<Var> = enc
                .steps
                .iter()
                .map(|&s| g.slice_cols(s, half, width))
                .collect::<Result<_>>()?;
            for k in 0..words {
                let last = pick(&|i, s| vec![RowPick { src: s.end() - 1, row: i, weight: 1.0 }], k);
                let first = pick(&|i, s| vec![RowPick { src: s.start(), row: i, weight: 1.0 }], k);
                let f = g.combine_rows(&fwd, last)?;
                let b = g.combine_rows(&bwd, first)?;
                steps.push(g.concat(&[f, b])?);
            }
        }
        Readout::SpanMean => {
            for k in 0..words {
                let rows = pick(
                    &|i, s| {
                        let w = 1.0 / s.len() as f64;
                        (s.start()..s.end()).map(|t| RowPick { src: t, row: i, weight: w }).collect()
                    },
                    k,
                );
                steps.push(g.combine_rows(&enc.steps, rows)?);
            }
        }
    }
    Ok(SeqVar {
        steps,
        lengths: spans.iter().map(Vec::len).collect(),
    })
}

/// Runs the frame BLSTM stack over `frames`, then reads one vector per word.
#[allow(clippy::too_many_arguments)]
pub fn acoustic_word_encode(
    g: &mut Graph,
    store: &ParamStore,
    enc: &BiLstmStack,
    frames: &SeqVar,
    spans: &[Vec<Span>],
    readout: Readout,
    ctx: &mut Ctx,
    dropout_p: f64,
) -> Result<SeqVar> {
    let out = enc.forward(g, store, frames, ctx, dropout_p)?;
    read_acoustic_words(g, &out, spans, readout)
}

/// Padded inputs for one view, holding only the modalities it reads.
#[derive(Clone, Debug)]
pub struct ViewInputs {
    pub frames: Option<SeqBatch>,
    pub words: Option<SeqBatch>,
    pub spans: Option<Vec<Vec<Span>>>,
}

fn missing(kind: ViewKind, what: &str, id: &str) -> Error {
    Error::Config(format!("view {kind} needs {what}, which utterance {id} lacks"))
}

impl ViewInputs {
    pub fn prepare(cfg: &ViewConfig, records: &[UtteranceRecord]) -> Result<Self> {
        let kind = cfg.kind;
        let mut out = ViewInputs {
            frames: None,
            words: None,
            spans: None,
        };
        if kind.reads_frames() {
            let items = records
                .iter()
                .map(|r| {
                    if r.frame_dim() != cfg.frame_feat_dim {
                        return Err(Error::Data {
                            id: r.id.clone(),
                            detail: format!(
                                "frame width {} but the view expects {}",
                                r.frame_dim(),
                                cfg.frame_feat_dim
                            ),
                        });
                    }
                    if kind.filters_frames() {
                        filtered_frames(r)
                    } else {
                        Ok(r.frames.clone())
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            out.frames = Some(SeqBatch::from_items(&items)?);
        }
        if kind.uses_acoustic_words() {
            let spans = records
                .iter()
                .map(|r| {
                    if r.alignment.is_none() {
                        return Err(missing(kind, "word alignments", &r.id));
                    }
                    filtered_spans(r)
                })
                .collect::<Result<Vec<_>>>()?;
            out.spans = Some(spans);
        }
        if kind.reads_word_vectors() {
            let items = records
                .iter()
                .map(|r| {
                    let w = r
                        .word_vecs
                        .as_ref()
                        .ok_or_else(|| missing(kind, "word vectors", &r.id))?;
                    if kind.uses_acoustic_words() {
                        let n = r.alignment.as_ref().map_or(0, Vec::len);
                        if n != w.len() {
                            return Err(Error::Data {
                                id: r.id.clone(),
                                detail: format!("{n} aligned words but {} word vectors", w.len()),
                            });
                        }
                    }
                    if w.first().map(Vec::len) != Some(cfg.word_vec_dim) {
                        return Err(Error::Data {
                            id: r.id.clone(),
                            detail: format!("word vectors are not {}-dimensional", cfg.word_vec_dim),
                        });
                    }
                    Ok(w.clone())
                })
                .collect::<Result<Vec<_>>>()?;
            out.words = Some(SeqBatch::from_items(&items)?);
        }
        Ok(out)
    }
}

/// Graph nodes produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ViewOutput {
    /// Utterance embedding: attention output, or the pooled vector.
    pub h: Var,
    pub y_hat: Var,
    /// `[batch, steps]` attention weights over words or frames.
    pub attn: Option<Var>,
    /// GMU gate `z` per word step, each `[batch, gmu_hidden]`.
    pub gate: Option<Vec<Var>>,
    /// Valid steps per item for `attn` and `gate`.
    pub step_lengths: Vec<usize>,
}

/// Plain-number results for one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub label: usize,
    pub predicted: usize,
    pub probs: Vec<f64>,
    pub h: Vec<f64>,
    pub attention: Option<Vec<f64>>,
    /// Acoustic share of each word (mean of `z` over hidden units).
    pub gate: Option<Vec<f64>>,
}

impl ViewOutput {
    pub fn predictions(&self, g: &Graph, batch: &Batch) -> Vec<Prediction> {
        let y = g.value(self.y_hat);
        let h = g.value(self.h);
        let attn = self.attn.map(|a| g.value(a).clone());
        let gates: Option<Vec<Vec<f64>>> = self
            .gate
            .as_ref()
            .map(|zs| zs.iter().map(|&z| gate_average(g.value(z))).collect());
        batch
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let probs = y.row(i).to_vec();
                let predicted = argmax(&probs);
                let len = self.step_lengths[i];
                Prediction {
                    id: r.id.clone(),
                    label: batch.labels[i],
                    predicted,
                    probs,
                    h: h.row(i).to_vec(),
                    attention: attn.as_ref().map(|a| a.row(i)[..len].to_vec()),
                    gate: gates.as_ref().map(|gs| gs[..len].iter().map(|w| w[i]).collect()),
                }
            })
            .collect()
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (k, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = k;
        }
    }
    best
}

/// One configured network with its parameters.
#[derive(Clone, Debug)]
pub struct View {
    pub config: ViewConfig,
    pub store: ParamStore,
    /// Frame standardization fitted on the training split, if any.
    pub norm: Option<FeatureStats>,
    pub(crate) acoustic: Option<BiLstmStack>,
    pub(crate) lexical: Option<BiLstmStack>,
    pub(crate) words: Option<BiLstmStack>,
    pub(crate) bn_a: Option<BatchNorm>,
    pub(crate) bn_l: Option<BatchNorm>,
    pub(crate) gmu: Option<GmuParams>,
    pub(crate) attn: Option<AttnParams>,
    pub(crate) out: Linear,
}

impl View {
    pub fn new(config: ViewConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let kind = config.kind;
        let hd = config.hidden_dim;
        let nl = config.num_layers;
        let mut store = ParamStore::new();
        let acoustic = if kind.reads_frames() {
            Some(BiLstmStack::new(&mut store, "aco", config.frame_feat_dim, hd, nl, rng)?)
        } else {
            None
        };
        let lexical = if matches!(kind, ViewKind::BLex | ViewKind::BMm1 | ViewKind::BMm2) {
            Some(BiLstmStack::new(&mut store, "lex", config.word_vec_dim, hd, nl, rng)?)
        } else {
            None
        };
        let aw = 2 * hd;
        let (mut bn_a, mut bn_l, mut gmu) = (None, None, None);
        let words = match kind {
            ViewKind::HMm1 | ViewKind::HMm3 => Some(BiLstmStack::new(
                &mut store,
                "word",
                aw + config.word_vec_dim,
                hd,
                nl,
                rng,
            )?),
            ViewKind::HMm2 | ViewKind::HMm4 => {
                bn_a = Some(BatchNorm::new(&mut store, "bn_a", aw)?);
                bn_l = Some(BatchNorm::new(&mut store, "bn_l", config.word_vec_dim)?);
                gmu = Some(GmuParams::new(&mut store, "gmu", aw, config.word_vec_dim, hd, rng)?);
                Some(BiLstmStack::new(&mut store, "word", hd, hd, nl, rng)?)
            }
            _ => None,
        };
        let h_dim = match kind {
            ViewKind::BMm1 | ViewKind::BMm2 => 4 * hd,
            _ => 2 * hd,
        };
        let attn = if config.use_attention {
            let da = if config.attn_dim == 0 { h_dim } else { config.attn_dim };
            Some(AttnParams::new(&mut store, "attn", h_dim, da, rng)?)
        } else {
            None
        };
        let out = Linear::new(&mut store, "out", h_dim, config.num_classes, rng)?;
        Ok(View {
            config,
            store,
            norm: None,
            acoustic,
            lexical,
            words,
            bn_a,
            bn_l,
            gmu,
            attn,
            out,
        })
    }

    pub fn kind(&self) -> ViewKind {
        self.config.kind
    }

    /// Width of `h`.
    pub fn embedding_dim(&self) -> usize {
        match self.kind() {
            ViewKind::BMm1 | ViewKind::BMm2 => 4 * self.config.hidden_dim,
            _ => 2 * self.config.hidden_dim,
        }
    }

    pub fn batch_norms(&self) -> Vec<(&'static str, &BatchNorm)> {
        let mut v = Vec::new();
        if let Some(b) = &self.bn_a {
            v.push(("bn_a", b));
        }
        if let Some(b) = &self.bn_l {
            v.push(("bn_l", b));
        }
        v
    }

    pub(crate) fn batch_norm_mut(&mut self, name: &str) -> Option<&mut BatchNorm> {
        match name {
            "bn_a" => self.bn_a.as_mut(),
            "bn_l" => self.bn_l.as_mut(),
            _ => None,
        }
    }

    /// Applies the stored frame standardization to a copy of `corpus`.
    pub fn prepare_corpus(&self, corpus: &Corpus) -> Result<Corpus> {
        let mut c = corpus.clone();
        if let Some(stats) = &self.norm {
            for r in &mut c.records {
                stats.apply(r)?;
            }
        }
        Ok(c)
    }

    pub fn forward(&mut self, g: &mut Graph, batch: &Batch, ctx: &mut Ctx) -> Result<ViewOutput> {
        let inputs = ViewInputs::prepare(&self.config, &batch.records)?;
        self.forward_inputs(g, &inputs, ctx)
    }

    pub fn forward_inputs(&mut self, g: &mut Graph, inputs: &ViewInputs, ctx: &mut Ctx) -> Result<ViewOutput> {
        let kind = self.config.kind;
        let p = self.config.dropout_p;
        let store = &self.store;
        let frames = inputs.frames.as_ref().map(|f| SeqVar::from_batch(g, f));
        let words = inputs.words.as_ref().map(|w| SeqVar::from_batch(g, w));
        let need = |v: Option<SeqVar>, what: &str| {
            v.ok_or_else(|| Error::Config(format!("view {kind} is missing its {what} input")))
        };

        let mut attn = None;
        let mut gate = None;
        let (h, step_lengths) = match kind {
            ViewKind::BAco1 | ViewKind::BAco2 | ViewKind::BAco1Attention => {
                let f = need(frames, "frame")?;
                let enc = self.acoustic.as_ref().expect("acoustic stack").forward(g, store, &f, ctx, p)?;
                let lens = enc.lengths.clone();
                let h = match &self.attn {
                    Some(ap) => {
                        let b = ap.bind(g, store);
                        let (z, a) = context_attention(g, &enc, &b)?;
                        attn = Some(a);
                        z
                    }
                    None => mean_pool(g, &enc)?,
                };
                (h, lens)
            }
            ViewKind::BLex => {
                let w = need(words, "word vector")?;
                let enc = self.lexical.as_ref().expect("lexical stack").forward(g, store, &w, ctx, p)?;
                let lens = enc.lengths.clone();
                (mean_pool(g, &enc)?, lens)
            }
            ViewKind::BMm1 | ViewKind::BMm2 => {
                let f = need(frames, "frame")?;
                let w = need(words, "word vector")?;
                let ea = self.acoustic.as_ref().expect("acoustic stack").forward(g, store, &f, ctx, p)?;
                let el = self.lexical.as_ref().expect("lexical stack").forward(g, store, &w, ctx, p)?;
                let pa = mean_pool(g, &ea)?;
                let pl = mean_pool(g, &el)?;
                (g.concat(&[pa, pl])?, el.lengths.clone())
            }
            ViewKind::HAco1 | ViewKind::HMm1 | ViewKind::HMm2 | ViewKind::HMm3 | ViewKind::HMm4 => {
                let f = need(frames, "frame")?;
                let spans = inputs
                    .spans
                    .as_ref()
                    .ok_or_else(|| Error::Config(format!("view {kind} is missing its alignment input")))?;
                let aco = acoustic_word_encode(
                    g,
                    store,
                    self.acoustic.as_ref().expect("acoustic stack"),
                    &f,
                    spans,
                    self.config.readout,
                    ctx,
                    p,
                )?;
                let lens = aco.lengths.clone();
                if kind == ViewKind::HAco1 {
                    (mean_pool(g, &aco)?, lens)
                } else {
                    let w = need(words, "word vector")?;
                    if w.max_steps() != aco.max_steps() || w.lengths != aco.lengths {
                        return Err(Error::Data {
                            id: "batch".into(),
                            detail: "word vector counts differ from aligned word counts".into(),
                        });
                    }
                    let fused = if let Some(gp) = &self.gmu {
                        let bn_a = self.bn_a.as_mut().expect("bn_a");
                        let xa = bn_a.forward_seq(g, store, &aco, ctx.training)?;
                        let bn_l = self.bn_l.as_mut().expect("bn_l");
                        let xl = bn_l.forward_seq(g, store, &w, ctx.training)?;
                        let bound = gp.bind(g, store);
                        let mut hs = Vec::with_capacity(xa.max_steps());
                        let mut zs = Vec::with_capacity(xa.max_steps());
                        for (&a, &l) in xa.steps.iter().zip(&xl.steps) {
                            let (h, z) = gmu_forward(g, a, l, &bound)?;
                            hs.push(h);
                            zs.push(z);
                        }
                        gate = Some(zs);
                        SeqVar {
                            steps: hs,
                            lengths: lens.clone(),
                        }
                    } else {
                        let steps = aco
                            .steps
                            .iter()
                            .zip(&w.steps)
                            .map(|(&a, &l)| g.concat(&[a, l]))
                            .collect::<Result<Vec<_>>>()?;
                        SeqVar {
                            steps,
                            lengths: lens.clone(),
                        }
                    };
                    let enc = self.words.as_ref().expect("word stack").forward(g, store, &fused, ctx, p)?;
                    let h = match &self.attn {
                        Some(ap) => {
                            let b = ap.bind(g, store);
                            let (z, a) = context_attention(g, &enc, &b)?;
                            attn = Some(a);
                            z
                        }
                        None => mean_pool(g, &enc)?,
                    };
                    (h, lens)
                }
            }
        };
        let hd = dropout(g, h, p, ctx.training, &mut ctx.rng)?;
        let logits = self.out.forward(g, store, hd)?;
        let y_hat = g.softmax(logits)?;
        Ok(ViewOutput {
            h,
            y_hat,
            attn,
            gate,
            step_lengths,
        })
    }

    /// Evaluation-mode predictions for a batch.
    pub fn predict(&mut self, batch: &Batch) -> Result<Vec<Prediction>> {
        let mut g = Graph::new();
        let mut ctx = Ctx::eval();
        let out = self.forward(&mut g, batch, &mut ctx)?;
        Ok(out.predictions(&g, batch))
    }

    /// Parameter and batch-norm state, in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut v: Vec<(String, Tensor)> = self
            .store
            .iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        for (name, bn) in self.batch_norms() {
            v.push((format!("{name}.running_mean"), Tensor::vector(bn.running_mean.clone())));
            v.push((format!("{name}.running_var"), Tensor::vector(bn.running_var.clone())));
        }
        if let Some(n) = &self.norm {
            v.push(("norm.mean".into(), Tensor::vector(n.mean.clone())));
            v.push(("norm.std".into(), Tensor::vector(n.std.clone())));
        }
        v
    }
}
