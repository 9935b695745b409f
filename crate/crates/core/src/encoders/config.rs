use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

macro_rules! knob_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::Parse(format!(
                        concat!("unknown ", stringify!($name), " '{}'"), other
                    ))),
                }
            }
        }
    };
}

knob_enum!(
    /// Encoder family.
    Variant { Gru => "gru", BiGru => "bigru", Transformer => "transformer", Gat => "gat" }
);
knob_enum!(
    /// How recurrent hidden states become the question vector.
    Aggregation { LastHidden => "last", SumPool => "sum" }
);
knob_enum!(
    /// Word-order mechanism for the Transformer family.
    PosEncMode { Learned => "learned", None => "none", Conv1d => "conv1d" }
);
knob_enum!(
    /// `Copy`: every head sees the full-width feature, head outputs averaged.
    /// `Split`: width partitioned across heads, head outputs concatenated.
    MhaMode { Copy => "copy", Split => "split" }
);
knob_enum!(
    /// Attention score for the graph encoder.
    ScoreMode { Concat => "concat", ScaledDot => "sdpa" }
);

/// Every architectural knob of a question encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub variant: Variant,
    pub aggregation: Aggregation,
    pub pos_enc: PosEncMode,
    pub layers: usize,
    pub heads: usize,
    pub window: usize,
    pub mha_mode: MhaMode,
    pub score_mode: ScoreMode,
    pub d_w: usize,
    pub d_a: usize,
    pub d_q: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub leaky_slope: f64,
    /// Transformer feed-forward inner width as a multiple of `d_q`.
    pub ffn_mult: usize,
}

impl EncoderConfig {
    /// Full-size settings: `K = 2`, `s = 3`, `d_q = d_a = 512`.
    pub fn full_scale(variant: Variant) -> Self {
        Self {
            d_w: 300,
            d_a: 512,
            d_q: 512,
            vocab_size: 20_000,
            max_len: 32,
            ..Self::desk(variant)
        }
    }

    /// Small settings used for tests and the synthetic benchmark.
    pub fn desk(variant: Variant) -> Self {
        let (aggregation, mha_mode) = match variant {
            Variant::Gru | Variant::BiGru => (Aggregation::LastHidden, MhaMode::Copy),
            Variant::Transformer => (Aggregation::SumPool, MhaMode::Split),
            Variant::Gat => (Aggregation::SumPool, MhaMode::Copy),
        };
        Self {
            variant,
            aggregation,
            pos_enc: PosEncMode::Learned,
            layers: 1,
            heads: 2,
            window: 3,
            mha_mode,
            score_mode: ScoreMode::Concat,
            d_w: 32,
            d_a: 32,
            d_q: 32,
            vocab_size: 64,
            max_len: 16,
            leaky_slope: 0.2,
            ffn_mult: 4,
        }
    }

    pub fn with_dims(mut self, d: usize) -> Self {
        self.d_w = d;
        self.d_a = d;
        self.d_q = d;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.d_w == 0 || self.d_a == 0 || self.d_q == 0 {
            return bad("dimensions must be positive".into());
        }
        if self.heads == 0 {
            return bad("heads must be >= 1".into());
        }
        if self.window == 0 {
            return bad("window must be >= 1".into());
        }
        if self.layers == 0 {
            return bad("layers must be >= 1".into());
        }
        if self.vocab_size < 2 || self.max_len == 0 {
            return bad("vocabulary needs a padding id and at least one word".into());
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return bad(format!("leaky slope {} not in (0,1)", self.leaky_slope));
        }
        if self.variant == Variant::BiGru && self.d_q % 2 != 0 {
            return bad(format!("bigru needs an even d_q, got {}", self.d_q));
        }
        let attends = matches!(self.variant, Variant::Transformer | Variant::Gat);
        if attends && self.mha_mode == MhaMode::Split {
            if self.d_q % self.heads != 0 {
                return bad(format!("split heads: d_q={} not divisible by K={}", self.d_q, self.heads));
            }
            if self.variant == Variant::Gat && self.d_a % self.heads != 0 {
                return bad(format!("split heads: d_a={} not divisible by K={}", self.d_a, self.heads));
            }
        }
        Ok(())
    }

    /// Per-head widths `(attention, output)`.
    pub fn head_dims(&self) -> (usize, usize) {
        match self.mha_mode {
            MhaMode::Copy => (self.d_a, self.d_q),
            MhaMode::Split => (self.d_a / self.heads, self.d_q / self.heads),
        }
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("encoder.variant".into(), self.variant.to_string());
        m.insert("encoder.aggregation".into(), self.aggregation.to_string());
        m.insert("encoder.pos_enc".into(), self.pos_enc.to_string());
        m.insert("encoder.layers".into(), self.layers.to_string());
        m.insert("encoder.heads".into(), self.heads.to_string());
        m.insert("encoder.window".into(), self.window.to_string());
        m.insert("encoder.mha_mode".into(), self.mha_mode.to_string());
        m.insert("encoder.score_mode".into(), self.score_mode.to_string());
        m.insert("encoder.d_w".into(), self.d_w.to_string());
        m.insert("encoder.d_a".into(), self.d_a.to_string());
        m.insert("encoder.d_q".into(), self.d_q.to_string());
        m.insert("encoder.vocab_size".into(), self.vocab_size.to_string());
        m.insert("encoder.max_len".into(), self.max_len.to_string());
        m.insert("encoder.leaky_slope".into(), self.leaky_slope.to_string());
        m.insert("encoder.ffn_mult".into(), self.ffn_mult.to_string());
        m
    }

    /// Applies `encoder.*` keys from a key=value map onto `self`.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<T: FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Parse(format!("bad value '{v}' for {k}")))
        }
        match key {
            "encoder.variant" => self.variant = value.parse()?,
            "encoder.aggregation" => self.aggregation = value.parse()?,
            "encoder.pos_enc" => self.pos_enc = value.parse()?,
            "encoder.layers" => self.layers = num(key, value)?,
            "encoder.heads" => self.heads = num(key, value)?,
            "encoder.window" => self.window = num(key, value)?,
            "encoder.mha_mode" => self.mha_mode = value.parse()?,
            "encoder.score_mode" => self.score_mode = value.parse()?,
            "encoder.d_w" => self.d_w = num(key, value)?,
            "encoder.d_a" => self.d_a = num(key, value)?,
            "encoder.d_q" => self.d_q = num(key, value)?,
            "encoder.vocab_size" => self.vocab_size = num(key, value)?,
            "encoder.max_len" => self.max_len = num(key, value)?,
            "encoder.leaky_slope" => self.leaky_slope = num(key, value)?,
            "encoder.ffn_mult" => self.ffn_mult = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Canonical `key=value` pairs, sorted by key, joined with `;`.
    pub fn digest(&self) -> String {
        canonical(&self.to_map())
    }

    /// Short label such as `transformer/learned/split/L1/K2`.
    pub fn label(&self) -> String {
        match self.variant {
            Variant::Gru | Variant::BiGru => format!("{}/{}", self.variant, self.aggregation),
            Variant::Transformer => format!(
                "transformer/{}/{}/L{}/K{}",
                self.pos_enc, self.mha_mode, self.layers, self.heads
            ),
            Variant::Gat => format!(
                "gat/{}/{}/K{}/s{}",
                self.score_mode, self.mha_mode, self.heads, self.window
            ),
        }
    }
}

pub(crate) fn canonical(map: &BTreeMap<String, String>) -> String {
    map.iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(";")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_defaults() {
        let c = EncoderConfig::full_scale(Variant::Gat);
        assert_eq!((c.heads, c.window, c.d_q, c.d_a), (2, 3, 512, 512));
        assert_eq!(c.leaky_slope, 0.2);
        c.validate().unwrap();
    }

    #[test]
    fn split_mode_needs_divisible_width() {
        let mut c = EncoderConfig::desk(Variant::Transformer);
        c.heads = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.mha_mode = MhaMode::Copy;
        c.validate().unwrap();
    }

    #[test]
    fn bigru_needs_even_width() {
        let mut c = EncoderConfig::desk(Variant::BiGru);
        c.d_q = 7;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn digest_is_sorted_and_round_trips() {
        let c = EncoderConfig::desk(Variant::Transformer);
        let d = c.digest();
        let keys: Vec<&str> = d.split(';').map(|kv| kv.split('=').next().unwrap()).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);

        let mut other = EncoderConfig::desk(Variant::Gru);
        for kv in d.split(';') {
            let (k, v) = kv.split_once('=').unwrap();
            assert!(other.apply(k, v).unwrap());
        }
        assert_eq!(other, c);
    }

    #[test]
    fn knob_parsing() {
        assert_eq!("sdpa".parse::<ScoreMode>().unwrap(), ScoreMode::ScaledDot);
        assert!("banana".parse::<Variant>().is_err());
    }
}
