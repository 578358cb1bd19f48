use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The experimental model families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ViewKind {
    BAco1,
    BAco2,
    BLex,
    BMm1,
    BMm2,
    HAco1,
    HMm1,
    HMm2,
    HMm3,
    HMm4,
    BAco1Attention,
}

impl ViewKind {
    pub const ALL: [ViewKind; 11] = [
        ViewKind::BAco1,
        ViewKind::BAco2,
        ViewKind::BLex,
        ViewKind::BMm1,
        ViewKind::BMm2,
        ViewKind::HAco1,
        ViewKind::HMm1,
        ViewKind::HMm2,
        ViewKind::HMm3,
        ViewKind::HMm4,
        ViewKind::BAco1Attention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ViewKind::BAco1 => "B-ACO-1",
            ViewKind::BAco2 => "B-ACO-2",
            ViewKind::BLex => "B-LEX",
            ViewKind::BMm1 => "B-MM-1",
            ViewKind::BMm2 => "B-MM-2",
            ViewKind::HAco1 => "H-ACO-1",
            ViewKind::HMm1 => "H-MM-1",
            ViewKind::HMm2 => "H-MM-2",
            ViewKind::HMm3 => "H-MM-3",
            ViewKind::HMm4 => "H-MM-4",
            ViewKind::BAco1Attention => "B-ACO-1+Attention",
        }
    }

    pub fn uses_gmu(self) -> bool {
        matches!(self, ViewKind::HMm2 | ViewKind::HMm4)
    }

    pub fn uses_attention(self) -> bool {
        matches!(self, ViewKind::HMm3 | ViewKind::HMm4 | ViewKind::BAco1Attention)
    }

    /// Reads frames through the speaker-frame filter.
    pub fn filters_frames(self) -> bool {
        matches!(
            self,
            ViewKind::BAco2
                | ViewKind::BMm2
                | ViewKind::HAco1
                | ViewKind::HMm1
                | ViewKind::HMm2
                | ViewKind::HMm3
                | ViewKind::HMm4
        )
    }

    pub fn reads_frames(self) -> bool {
        self != ViewKind::BLex
    }

    pub fn reads_word_vectors(self) -> bool {
        matches!(
            self,
            ViewKind::BLex
                | ViewKind::BMm1
                | ViewKind::BMm2
                | ViewKind::HMm1
                | ViewKind::HMm2
                | ViewKind::HMm3
                | ViewKind::HMm4
        )
    }

    /// Builds word-level acoustic vectors from the alignment.
    pub fn uses_acoustic_words(self) -> bool {
        matches!(
            self,
            ViewKind::HAco1 | ViewKind::HMm1 | ViewKind::HMm2 | ViewKind::HMm3 | ViewKind::HMm4
        )
    }

    pub fn is_multimodal(self) -> bool {
        self.reads_frames() && self.reads_word_vectors()
    }

    /// Needs nothing beyond frames and speaker flags.
    pub fn is_acoustic_only(self) -> bool {
        !self.reads_word_vectors() && !self.uses_acoustic_words()
    }
}

impl fmt::Display for ViewKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ViewKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('_', "-");
        ViewKind::ALL
            .into_iter()
            .find(|k| k.name().to_ascii_uppercase() == norm)
            .ok_or_else(|| {
                let names: Vec<&str> = ViewKind::ALL.iter().map(|k| k.name()).collect();
                Error::Config(format!("unknown view kind {s:?}; expected one of {names:?}"))
            })
    }
}

impl TryFrom<String> for ViewKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ViewKind> for String {
    fn from(k: ViewKind) -> String {
        k.name().to_string()
    }
}

/// How one acoustic-word vector is read from the frame BLSTM outputs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Readout {
    /// Forward state at the span's last frame, backward state at its first.
    #[default]
    Endpoints,
    /// Mean of the outputs over the span.
    SpanMean,
}

impl Readout {
    fn name(self) -> &'static str {
        match self {
            Readout::Endpoints => "endpoints",
            Readout::SpanMean => "span-mean",
        }
    }
}

impl FromStr for Readout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "endpoints" => Ok(Readout::Endpoints),
            "span-mean" => Ok(Readout::SpanMean),
            _ => Err(Error::Config(format!("unknown readout {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewConfig {
    pub kind: ViewKind,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub word_vec_dim: usize,
    pub frame_feat_dim: usize,
    pub num_classes: usize,
    pub dropout_p: f64,
    pub use_gmu: bool,
    pub use_attention: bool,
    /// Attention space extent; 0 means the attended vector's own width.
    pub attn_dim: usize,
    pub readout: Readout,
}

impl ViewConfig {
    pub fn new(kind: ViewKind, frame_feat_dim: usize, word_vec_dim: usize) -> Self {
        ViewConfig {
            kind,
            hidden_dim: 256,
            num_layers: 2,
            word_vec_dim,
            frame_feat_dim,
            num_classes: 4,
            dropout_p: 0.4,
            use_gmu: kind.uses_gmu(),
            use_attention: kind.uses_attention(),
            attn_dim: 0,
            readout: Readout::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.use_gmu != self.kind.uses_gmu() || self.use_attention != self.kind.uses_attention() {
            return Err(Error::Config(format!(
                "{} implies use_gmu={} and use_attention={}",
                self.kind,
                self.kind.uses_gmu(),
                self.kind.uses_attention()
            )));
        }
        if self.hidden_dim == 0 || self.num_layers == 0 || self.num_classes < 2 {
            return Err(Error::Config(
                "hidden_dim and num_layers must be positive and num_classes at least 2".into(),
            ));
        }
        if self.kind.reads_frames() && self.frame_feat_dim == 0 {
            return Err(Error::Config(format!("{} needs frame_feat_dim > 0", self.kind)));
        }
        if self.kind.reads_word_vectors() && self.word_vec_dim == 0 {
            return Err(Error::Config(format!("{} needs word_vec_dim > 0", self.kind)));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout_p {} not in [0, 1)", self.dropout_p)));
        }
        Ok(())
    }

    /// `key=value` lines, one per field, in a fixed order.
    pub fn to_kv(&self) -> String {
        format!(
            "kind={}\nhidden_dim={}\nnum_layers={}\nword_vec_dim={}\nframe_feat_dim={}\n\
             num_classes={}\ndropout_p={:e}\nuse_gmu={}\nuse_attention={}\nattn_dim={}\nreadout={}\n",
            self.kind,
            self.hidden_dim,
            self.num_layers,
            self.word_vec_dim,
            self.frame_feat_dim,
            self.num_classes,
            self.dropout_p,
            self.use_gmu,
            self.use_attention,
            self.attn_dim,
            self.readout.name(),
        )
    }

    pub fn from_kv(map: &BTreeMap<String, String>) -> Result<Self> {
        fn get<'a>(map: &'a BTreeMap<String, String>, k: &str) -> Result<&'a str> {
            map.get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::Checkpoint(format!("header lacks {k}")))
        }
        fn num<T: FromStr>(map: &BTreeMap<String, String>, k: &str) -> Result<T> {
            let v = get(map, k)?;
            v.parse()
                .map_err(|_| Error::Checkpoint(format!("bad value {v:?} for {k}")))
        }
        let cfg = ViewConfig {
            kind: get(map, "kind")?.parse()?,
            hidden_dim: num(map, "hidden_dim")?,
            num_layers: num(map, "num_layers")?,
            word_vec_dim: num(map, "word_vec_dim")?,
            frame_feat_dim: num(map, "frame_feat_dim")?,
            num_classes: num(map, "num_classes")?,
            dropout_p: num(map, "dropout_p")?,
            use_gmu: num(map, "use_gmu")?,
            use_attention: num(map, "use_attention")?,
            attn_dim: num(map, "attn_dim")?,
            readout: get(map, "readout")?.parse()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("header line {line:?} is not key=value")))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for k in ViewKind::ALL {
            assert_eq!(k.name().parse::<ViewKind>().unwrap(), k);
        }
        assert_eq!("h-mm-4".parse::<ViewKind>().unwrap(), ViewKind::HMm4);
        assert!("H-MM-9".parse::<ViewKind>().is_err());
    }

    #[test]
    fn kind_fixes_the_ablation_flags() {
        let c = ViewConfig::new(ViewKind::HMm4, 8, 8);
        assert!(c.use_gmu && c.use_attention);
        let mut bad = ViewConfig::new(ViewKind::HMm1, 8, 8);
        bad.use_gmu = true;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn acoustic_views_need_no_lexical_fields() {
        let acoustic: Vec<ViewKind> = ViewKind::ALL.into_iter().filter(|k| k.is_acoustic_only()).collect();
        assert_eq!(acoustic, vec![ViewKind::BAco1, ViewKind::BAco2, ViewKind::BAco1Attention]);
    }

    #[test]
    fn kv_round_trip() {
        let mut c = ViewConfig::new(ViewKind::HMm2, 7, 5);
        c.dropout_p = 0.1 + 0.2;
        c.readout = Readout::SpanMean;
        let back = ViewConfig::from_kv(&parse_kv(&c.to_kv()).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
