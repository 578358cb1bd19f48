use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::Limits;
use crate::error::{Error, Result};
use crate::losses::LossWeights;

/// Which views are updated and which losses are summed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// One view, `L_a` only.
    SingleView,
    /// Both views trained: `L_c + β_a L_a + β_m L_m`.
    JointMultiview,
    /// Second view frozen: `L_c + β_a L_a`.
    FrozenTeacherCe,
    /// Second view frozen: `L_c + L_KL` against its soft labels.
    FrozenTeacherKl,
}

impl Mode {
    pub const ALL: [Mode; 4] = [
        Mode::SingleView,
        Mode::JointMultiview,
        Mode::FrozenTeacherCe,
        Mode::FrozenTeacherKl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::SingleView => "single-view",
            Mode::JointMultiview => "joint-multiview",
            Mode::FrozenTeacherCe => "frozen-teacher-ce",
            Mode::FrozenTeacherKl => "frozen-teacher-kl",
        }
    }

    pub fn is_frozen(self) -> bool {
        matches!(self, Mode::FrozenTeacherCe | Mode::FrozenTeacherKl)
    }

    pub fn needs_second_view(self) -> bool {
        self != Mode::SingleView
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase().replace('_', "-"))
            .ok_or_else(|| Error::Config(format!("unknown training mode {s:?}")))
    }
}

/// How contrastive negatives are drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegStrategy {
    /// Any utterance whose label differs.
    #[default]
    RandomDiffClass,
    /// An utterance of the paired class (anger with happiness, neutral with sadness).
    AcousticallySimilar,
}

impl NegStrategy {
    pub fn name(self) -> &'static str {
        match self {
            NegStrategy::RandomDiffClass => "random-diff-class",
            NegStrategy::AcousticallySimilar => "acoustically-similar",
        }
    }
}

impl fmt::Display for NegStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NegStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "random-diff-class" => Ok(NegStrategy::RandomDiffClass),
            "acoustically-similar" => Ok(NegStrategy::AcousticallySimilar),
            _ => Err(Error::Config(format!("unknown negative strategy {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainPlan {
    pub mode: Mode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_tau: f64,
    pub l2: f64,
    pub weights: LossWeights,
    pub neg_strategy: NegStrategy,
    pub seed: u64,
    pub limits: Limits,
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan {
            mode: Mode::SingleView,
            epochs: 30,
            batch_size: 64,
            lr: 1e-4,
            clip_tau: 5.0,
            l2: 1e-5,
            weights: LossWeights::default(),
            neg_strategy: NegStrategy::default(),
            seed: 0,
            limits: Limits::default(),
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.clip_tau.is_finite() && self.clip_tau > 0.0) {
            return Err(Error::Config(format!("clip_tau must be positive, got {}", self.clip_tau)));
        }
        if !(self.l2.is_finite() && self.l2 >= 0.0) {
            return Err(Error::Config(format!("l2 must be non-negative, got {}", self.l2)));
        }
        if self.limits.max_frames == 0 || self.limits.max_words == 0 {
            return Err(Error::Config("length limits must be positive".into()));
        }
        self.weights.validate()
    }
}
