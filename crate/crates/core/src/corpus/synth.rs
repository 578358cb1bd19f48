//! Deterministic synthetic corpora with controllable channel informativeness.
//!
//! Each class is a pair of bits: arousal (anger and happiness high) and
//! valence (happiness and neutral positive). The acoustically similar pairs
//! therefore differ only in valence. `alpha` moves the two bits between the
//! channels:
//!
//! | alpha | acoustic frames      | cue word vector      |
//! |-------|----------------------|----------------------|
//! | 1     | arousal + valence    | nothing              |
//! | 0.5   | arousal              | valence              |
//! | 0     | nothing              | arousal + valence    |
//!
//! Intermediate values interpolate linearly between those rows.

use std::fs;
use std::path::Path;

use rand::distr::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::record::{Corpus, Emotion, Span, UtteranceRecord, NUM_CLASSES};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSpec {
    pub sessions: u32,
    pub speakers_per_session: usize,
    pub utterances_per_speaker: usize,
    /// Relative class frequencies in [`Emotion::ALL`] order.
    pub class_proportions: [f64; NUM_CLASSES],
    pub frame_feat_dim: usize,
    pub word_vec_dim: usize,
    pub words_per_utterance: [usize; 2],
    pub frames_per_word: [usize; 2],
    /// Non-speaker frames before each word and after the last one.
    pub gap_frames: [usize; 2],
    pub max_frames: usize,
    pub alpha: f64,
    pub acoustic_separation: f64,
    pub acoustic_noise: f64,
    /// Valence strength carried by the frames regardless of `alpha`.
    pub acoustic_valence_leak: f64,
    pub speaker_offset_std: f64,
    /// Probability that a gap frame is another speaker's speech, not silence.
    pub other_speaker_prob: f64,
    pub silence_std: f64,
    pub lexical_separation: f64,
    pub lexical_noise: f64,
    /// Strength of the direction shared by all cue words.
    pub cue_marker: f64,
    pub vocab_size: usize,
    /// Probability that the recorded label is redrawn uniformly at random.
    pub label_noise: f64,
    pub scripted_fraction: f64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            sessions: 5,
            speakers_per_session: 2,
            utterances_per_speaker: 80,
            class_proportions: [1103.0, 1632.0, 1703.0, 1082.0],
            frame_feat_dim: 8,
            word_vec_dim: 8,
            words_per_utterance: [4, 8],
            frames_per_word: [2, 4],
            gap_frames: [0, 3],
            max_frames: 700,
            alpha: 0.5,
            acoustic_separation: 1.0,
            acoustic_noise: 1.0,
            acoustic_valence_leak: 0.0,
            speaker_offset_std: 0.3,
            other_speaker_prob: 0.5,
            silence_std: 0.1,
            lexical_separation: 2.0,
            lexical_noise: 0.5,
            cue_marker: 1.0,
            vocab_size: 50,
            label_noise: 0.0,
            scripted_fraction: 0.0,
        }
    }
}

fn spec_err(msg: impl Into<String>) -> Error {
    Error::Spec(msg.into())
}

impl GeneratorSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: GeneratorSpec = toml::from_str(text).map_err(|e| spec_err(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("generator spec serializes")
    }

    /// Channel weights `(acoustic arousal, acoustic valence, lexical arousal, lexical valence)`.
    pub fn channel_weights(&self) -> (f64, f64, f64, f64) {
        let a = self.alpha;
        let a_ar = (2.0 * a).clamp(0.0, 1.0);
        let a_va = (2.0 * a - 1.0).clamp(0.0, 1.0).max(self.acoustic_valence_leak);
        let l_ar = (1.0 - 2.0 * a).clamp(0.0, 1.0);
        let l_va = (2.0 - 2.0 * a).clamp(0.0, 1.0);
        (a_ar, a_va, l_ar, l_va)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sessions == 0 || self.speakers_per_session == 0 || self.utterances_per_speaker == 0 {
            return Err(spec_err("sessions, speakers and utterances must all be positive"));
        }
        if self.frame_feat_dim == 0 || self.word_vec_dim == 0 {
            return Err(spec_err("feature dimensions must be positive"));
        }
        if self.class_proportions.iter().any(|p| !(p.is_finite() && *p >= 0.0))
            || self.class_proportions.iter().sum::<f64>() <= 0.0
        {
            return Err(spec_err("class proportions must be non-negative with a positive sum"));
        }
        for (name, [lo, hi], min) in [
            ("words_per_utterance", self.words_per_utterance, 1),
            ("frames_per_word", self.frames_per_word, 1),
            ("gap_frames", self.gap_frames, 0),
        ] {
            if lo > hi || lo < min {
                return Err(spec_err(format!("{name} range [{lo}, {hi}] is invalid")));
            }
        }
        if self.vocab_size == 0 {
            return Err(spec_err("vocab_size must be positive"));
        }
        let [_, wmax] = self.words_per_utterance;
        let longest = wmax * self.frames_per_word[1] + (wmax + 1) * self.gap_frames[1];
        if longest > self.max_frames {
            return Err(spec_err(format!(
                "utterances may reach {longest} frames, above max_frames {}",
                self.max_frames
            )));
        }
        for (name, p) in [
            ("alpha", self.alpha),
            ("other_speaker_prob", self.other_speaker_prob),
            ("label_noise", self.label_noise),
            ("scripted_fraction", self.scripted_fraction),
            ("acoustic_valence_leak", self.acoustic_valence_leak),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(spec_err(format!("{name} = {p} outside [0, 1]")));
            }
        }
        for (name, v) in [
            ("acoustic_separation", self.acoustic_separation),
            ("acoustic_noise", self.acoustic_noise),
            ("speaker_offset_std", self.speaker_offset_std),
            ("silence_std", self.silence_std),
            ("lexical_separation", self.lexical_separation),
            ("lexical_noise", self.lexical_noise),
            ("cue_marker", self.cue_marker),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(spec_err(format!("{name} = {v} must be non-negative")));
            }
        }
        Ok(())
    }

    pub fn total_utterances(&self) -> usize {
        self.sessions as usize * self.speakers_per_session * self.utterances_per_speaker
    }
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize, std: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v = gaussian(rng, dim, 1.0);
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / n).collect()
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn sign(b: bool) -> f64 {
    if b {
        1.0
    } else {
        -1.0
    }
}

/// Counts per class by largest remainder, so totals track the proportions.
fn class_quota(props: &[f64; NUM_CLASSES], n: usize) -> [usize; NUM_CLASSES] {
    let total: f64 = props.iter().sum();
    let exact: Vec<f64> = props.iter().map(|p| p / total * n as f64).collect();
    let mut counts = [0usize; NUM_CLASSES];
    for (c, e) in counts.iter_mut().zip(&exact) {
        *c = e.floor() as usize;
    }
    let mut order: Vec<usize> = (0..NUM_CLASSES).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let missing = n - counts.iter().sum::<usize>();
    for &c in order.iter().take(missing) {
        counts[c] += 1;
    }
    counts
}

fn speaker_names(session: u32, n: usize) -> Vec<String> {
    (0..n)
        .map(|k| {
            let sex = if k % 2 == 0 { 'F' } else { 'M' };
            if n <= 2 {
                format!("{sex}{session}")
            } else {
                format!("{sex}{session}{}", (b'a' + (k / 2) as u8) as char)
            }
        })
        .collect()
}

struct Directions {
    arousal: Vec<f64>,
    valence: Vec<f64>,
    lex_arousal: Vec<f64>,
    lex_valence: Vec<f64>,
    marker: Vec<f64>,
    vocab: Vec<Vec<f64>>,
}

/// Generates the corpus described by `spec`; identical for identical seeds.
pub fn synth_generate(spec: &GeneratorSpec, seed: u64) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fd = spec.frame_feat_dim;
    let wd = spec.word_vec_dim;
    let dirs = Directions {
        arousal: unit(&mut rng, fd),
        valence: unit(&mut rng, fd),
        lex_arousal: unit(&mut rng, wd),
        lex_valence: unit(&mut rng, wd),
        marker: unit(&mut rng, wd),
        vocab: (0..spec.vocab_size)
            .map(|_| gaussian(&mut rng, wd, spec.lexical_separation / (wd as f64).sqrt()))
            .collect(),
    };

    let n = spec.total_utterances();
    let quota = class_quota(&spec.class_proportions, n);
    let mut labels: Vec<Emotion> = Emotion::ALL
        .iter()
        .zip(quota)
        .flat_map(|(&e, q)| std::iter::repeat_n(e, q))
        .collect();
    labels.shuffle(&mut rng);

    let weights = spec.channel_weights();
    let mut records = Vec::with_capacity(n);
    let mut next = 0;
    for session in 1..=spec.sessions {
        for speaker in speaker_names(session, spec.speakers_per_session) {
            let offset = gaussian(&mut rng, fd, spec.speaker_offset_std);
            for k in 0..spec.utterances_per_speaker {
                let truth = labels[next];
                next += 1;
                let id = format!("Ses{session:02}_{speaker}_{k:03}");
                records.push(utterance(spec, &dirs, weights, &offset, id, session, &speaker, truth, &mut rng));
            }
        }
    }
    Corpus::new(records)
}

#[allow(clippy::too_many_arguments)]
fn utterance(
    spec: &GeneratorSpec,
    dirs: &Directions,
    (a_ar, a_va, l_ar, l_va): (f64, f64, f64, f64),
    offset: &[f64],
    id: String,
    session: u32,
    speaker: &str,
    truth: Emotion,
    rng: &mut ChaCha8Rng,
) -> UtteranceRecord {
    let fd = spec.frame_feat_dim;
    let range = |[lo, hi]: [usize; 2]| Uniform::new_inclusive(lo, hi).expect("validated range");
    let words = range(spec.words_per_utterance).sample(rng);
    let cue = rng.random_range(0..words);

    let acoustic_mean = |e: Emotion| {
        let mut m = vec![0.0; fd];
        axpy(&mut m, spec.acoustic_separation * a_ar * sign(e.high_arousal()), &dirs.arousal);
        axpy(&mut m, spec.acoustic_separation * a_va * sign(e.positive_valence()), &dirs.valence);
        m
    };
    let target_mean = acoustic_mean(truth);

    let mut frames = Vec::new();
    let mut flags = Vec::new();
    let mut spans = Vec::with_capacity(words);
    let gap = |frames: &mut Vec<Vec<f64>>, flags: &mut Vec<bool>, rng: &mut ChaCha8Rng| {
        let len = range(spec.gap_frames).sample(rng);
        if len == 0 {
            return;
        }
        let other = if rng.random::<f64>() < spec.other_speaker_prob {
            let e = Emotion::ALL[rng.random_range(0..NUM_CLASSES)];
            Some(acoustic_mean(e))
        } else {
            None
        };
        for _ in 0..len {
            let f = match &other {
                Some(m) => {
                    let mut f = gaussian(rng, fd, spec.acoustic_noise);
                    axpy(&mut f, 1.0, m);
                    f
                }
                None => gaussian(rng, fd, spec.silence_std),
            };
            frames.push(f);
            flags.push(false);
        }
    };
    for _ in 0..words {
        gap(&mut frames, &mut flags, rng);
        let len = range(spec.frames_per_word).sample(rng);
        let start = frames.len();
        for _ in 0..len {
            let mut f = gaussian(rng, fd, spec.acoustic_noise);
            axpy(&mut f, 1.0, &target_mean);
            axpy(&mut f, 1.0, offset);
            frames.push(f);
            flags.push(true);
        }
        spans.push(Span(start, frames.len()));
    }
    gap(&mut frames, &mut flags, rng);

    let mut tokens = Vec::with_capacity(words);
    let mut vecs = Vec::with_capacity(words);
    for w in 0..words {
        let mut v = gaussian(rng, spec.word_vec_dim, spec.lexical_noise);
        if w == cue {
            let s = spec.lexical_separation;
            axpy(&mut v, s * l_ar * sign(truth.high_arousal()), &dirs.lex_arousal);
            axpy(&mut v, s * l_va * sign(truth.positive_valence()), &dirs.lex_valence);
            axpy(&mut v, s * spec.cue_marker, &dirs.marker);
            tokens.push(format!("cue_{}", truth.name()));
        } else {
            let t = rng.random_range(0..spec.vocab_size);
            axpy(&mut v, 1.0, &dirs.vocab[t]);
            tokens.push(format!("w{t:03}"));
        }
        vecs.push(v);
    }

    let label = if rng.random::<f64>() < spec.label_noise {
        Emotion::ALL[rng.random_range(0..NUM_CLASSES)]
    } else {
        truth
    };
    let scripted = (spec.scripted_fraction > 0.0).then(|| rng.random::<f64>() < spec.scripted_fraction);

    UtteranceRecord {
        id,
        session,
        speaker: speaker.to_string(),
        label,
        frames,
        speaker_flags: flags,
        tokens: Some(tokens),
        word_vecs: Some(vecs),
        alignment: Some(spans),
        cue_word: Some(cue),
        scripted,
    }
}
