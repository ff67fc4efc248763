use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kv::KeyValues;

/// How position information enters the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Position embeddings are added to the word embeddings once, before the
    /// first layer.
    Baseline,
    /// Position-infused attention: position embeddings are added to queries
    /// and keys at every layer and never to values.
    Pia,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Baseline => "baseline",
            Variant::Pia => "pia",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "baseline" => Ok(Variant::Baseline),
            "pia" => Ok(Variant::Pia),
            _ => Err(Error::config(format!("unknown variant {s:?} (expected baseline or pia)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NormPlacement {
    /// `x + f(LN(x))`, with a final layer norm before the output projection.
    Pre,
    /// `LN(x + f(x))`.
    Post,
}

impl fmt::Display for NormPlacement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormPlacement::Pre => "pre",
            NormPlacement::Post => "post",
        })
    }
}

impl FromStr for NormPlacement {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pre" => Ok(NormPlacement::Pre),
            "post" => Ok(NormPlacement::Post),
            _ => Err(Error::config(format!("unknown norm placement {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    /// tanh approximation
    Gelu,
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            _ => Err(Error::config(format!("unknown activation {s:?}"))),
        }
    }
}

/// Architecture of a transformer language model.
///
/// `seq_len` is the subsequence length `L` processed per forward pass and
/// `cache_len` the number of previous-subsequence representations (`L′`)
/// kept when `use_cache` is set.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub cache_len: usize,
    pub variant: Variant,
    pub use_cache: bool,
    pub tie_embeddings: bool,
    pub dropout: f32,
    pub norm: NormPlacement,
    pub activation: Activation,
    pub layer_norm_eps: f64,
}

/// Vocabulary size used by the full-scale presets when none is given.
pub const PRESET_VOCAB: usize = 267_735;

impl ModelConfig {
    /// Small character-level model used for desk-scale runs.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            vocab_size,
            seq_len: 64,
            cache_len: 0,
            variant: Variant::Baseline,
            use_cache: false,
            tie_embeddings: true,
            dropout: 0.0,
            norm: NormPlacement::Pre,
            activation: Activation::Relu,
            layer_norm_eps: 1e-5,
        }
    }

    /// Full-scale baseline: 16 layers of width 1024, 8 heads,
    /// feedforward width 4096, subsequences of 3072 tokens.
    pub fn long_context(vocab_size: usize) -> Self {
        Self {
            n_layers: 16,
            d_model: 1024,
            n_heads: 8,
            d_ff: 4096,
            seq_len: 3072,
            ..Self::desk(vocab_size)
        }
    }

    /// Baseline dimensions with position-infused attention, caching and
    /// `L = L′ = 512`.
    pub fn short_cached(vocab_size: usize) -> Self {
        Self {
            seq_len: 512,
            cache_len: 512,
            variant: Variant::Pia,
            use_cache: true,
            ..Self::long_context(vocab_size)
        }
    }

    pub fn preset(name: &str, vocab_size: usize) -> Option<Self> {
        match name {
            "long-context" => Some(Self::long_context(vocab_size)),
            "short-cached" => Some(Self::short_cached(vocab_size)),
            "desk" => Some(Self::desk(vocab_size)),
            _ => None,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Number of cache rows actually used: `L′` when caching, else zero.
    pub fn effective_cache_len(&self) -> usize {
        if self.use_cache {
            self.cache_len
        } else {
            0
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return fail("layer count and widths must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.vocab_size == 0 {
            return fail("vocab_size must be positive".into());
        }
        if self.seq_len == 0 {
            return fail("L must be positive".into());
        }
        if self.use_cache && self.cache_len == 0 {
            return fail("use_cache requires L_cache >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.layer_norm_eps <= 0.0 {
            return fail("layer norm eps must be positive".into());
        }
        Ok(())
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.insert("variant", self.variant);
        kv.insert("n_layers", self.n_layers);
        kv.insert("d_model", self.d_model);
        kv.insert("n_heads", self.n_heads);
        kv.insert("d_ff", self.d_ff);
        kv.insert("vocab_size", self.vocab_size);
        kv.insert("L", self.seq_len);
        kv.insert("L_cache", self.cache_len);
        kv.insert("use_cache", self.use_cache);
        kv.insert("tie_embeddings", self.tie_embeddings);
        kv.insert("dropout", self.dropout);
        kv.insert("norm", self.norm);
        kv.insert("activation", self.activation);
        kv.insert("ln_eps", self.layer_norm_eps);
        kv
    }

    /// Reads model keys from `kv`, falling back to `base` for absent ones.
    /// When caching is requested without an explicit `L_cache`, `L′ = L`.
    pub fn from_key_values(kv: &KeyValues, base: &ModelConfig) -> Result<Self> {
        let seq_len = kv.get_or("L", base.seq_len)?;
        let use_cache = kv.get_bool("use_cache")?.unwrap_or(base.use_cache);
        let default_cache = if use_cache && base.cache_len == 0 { seq_len } else { base.cache_len };
        let cfg = Self {
            n_layers: kv.get_or("n_layers", base.n_layers)?,
            d_model: kv.get_or("d_model", base.d_model)?,
            n_heads: kv.get_or("n_heads", base.n_heads)?,
            d_ff: kv.get_or("d_ff", base.d_ff)?,
            vocab_size: kv.get_or("vocab_size", base.vocab_size)?,
            seq_len,
            cache_len: kv.get_or("L_cache", default_cache)?,
            variant: kv.get_or("variant", base.variant)?,
            use_cache,
            tie_embeddings: kv.get_bool("tie_embeddings")?.unwrap_or(base.tie_embeddings),
            dropout: kv.get_or("dropout", base.dropout)?,
            norm: kv.get_or("norm", base.norm)?,
            activation: kv.get_or("activation", base.activation)?,
            layer_norm_eps: kv.get_or("ln_eps", base.layer_norm_eps)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_preset_dimensions() {
        let ba = ModelConfig::preset("long-context", PRESET_VOCAB).unwrap();
        assert_eq!((ba.n_layers, ba.d_model, ba.n_heads, ba.d_ff, ba.seq_len), (16, 1024, 8, 4096, 3072));
        assert_eq!(ba.variant, Variant::Baseline);
        assert!(!ba.use_cache);
        let sf = ModelConfig::short_cached(PRESET_VOCAB);
        assert_eq!((sf.seq_len, sf.cache_len, sf.variant, sf.use_cache), (512, 512, Variant::Pia, true));
        assert!(ModelConfig::preset("nope", 10).is_none());
    }

    #[test]
    fn validation() {
        let mut c = ModelConfig::desk(10);
        assert!(c.validate().is_ok());
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk(10);
        c.use_cache = true;
        assert!(c.validate().is_err());
    }

    #[test]
    fn key_value_round_trip_and_cache_default() {
        let mut c = ModelConfig::desk(77);
        c.variant = Variant::Pia;
        c.norm = NormPlacement::Post;
        c.activation = Activation::Gelu;
        let back = ModelConfig::from_key_values(&c.to_key_values(), &ModelConfig::desk(1)).unwrap();
        assert_eq!(back, c);

        let kv = KeyValues::parse("use_cache = true\nL = 32\nvariant = pia").unwrap();
        let c = ModelConfig::from_key_values(&kv, &ModelConfig::desk(5)).unwrap();
        assert_eq!(c.cache_len, 32);
    }
}
