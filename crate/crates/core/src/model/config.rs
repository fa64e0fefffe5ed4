use std::fmt;
use std::str::FromStr;

use crate::encodings::{CHORD_VOCAB, MELODY_VOCAB_WITH_MASK};
use crate::error::{Error, Result};

/// Which adversary (if any) the model carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DiscriminatorKind {
    /// No adversary (the Non-DAT baseline).
    None,
    /// Relative-position self-attention denoiser over `[z ; c*]`.
    Transformer,
    /// Recurrent predictor of `c` from `z` alone (the Non-CR baseline).
    Recurrent,
}

impl fmt::Display for DiscriminatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DiscriminatorKind::None => "none",
            DiscriminatorKind::Transformer => "transformer",
            DiscriminatorKind::Recurrent => "recurrent",
        })
    }
}

impl FromStr for DiscriminatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "transformer" => Ok(Self::Transformer),
            "recurrent" => Ok(Self::Recurrent),
            other => Err(Error::Config(format!("unknown discriminator '{other}'"))),
        }
    }
}

/// Architecture dimensions. [`ModelConfig::default`] is the full-size model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_emb: usize,
    pub d_z: usize,
    pub d_p_enc: usize,
    pub d_t_enc: usize,
    pub d_t_dec: usize,
    pub d_p_dec: usize,
    pub disc_layers: usize,
    pub disc_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub dropout: f64,
    /// KL weight.
    pub alpha: f64,
    pub chord_vocab: usize,
    pub melody_vocab: usize,
    /// Relative distances are clipped to ±`rel_clip`.
    pub rel_clip: usize,
    pub discriminator: DiscriminatorKind,
    pub gru_disc_hidden: usize,
    pub gru_disc_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_emb: 128,
            d_z: 128,
            d_p_enc: 256,
            d_t_enc: 512,
            d_t_dec: 1024,
            d_p_dec: 512,
            disc_layers: 4,
            disc_heads: 4,
            d_model: 256,
            d_ff: 1024,
            dropout: 0.10,
            alpha: 0.1,
            chord_vocab: CHORD_VOCAB,
            melody_vocab: MELODY_VOCAB_WITH_MASK,
            rel_clip: 32,
            discriminator: DiscriminatorKind::Transformer,
            gru_disc_hidden: 512,
            gru_disc_layers: 2,
        }
    }
}

impl ModelConfig {
    pub fn paper() -> Self {
        Self::default()
    }

    /// Desk-scale dimensions for CPU experiments and tests.
    pub fn tiny() -> Self {
        Self {
            d_emb: 16,
            d_z: 16,
            d_p_enc: 16,
            d_t_enc: 32,
            d_t_dec: 32,
            d_p_dec: 32,
            disc_layers: 2,
            disc_heads: 2,
            d_model: 32,
            d_ff: 64,
            dropout: 0.1,
            gru_disc_hidden: 32,
            ..Self::default()
        }
    }

    pub fn with_discriminator(mut self, kind: DiscriminatorKind) -> Self {
        self.discriminator = kind;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_emb", self.d_emb),
            ("d_z", self.d_z),
            ("d_p_enc", self.d_p_enc),
            ("d_t_enc", self.d_t_enc),
            ("d_t_dec", self.d_t_dec),
            ("d_p_dec", self.d_p_dec),
            ("disc_layers", self.disc_layers),
            ("disc_heads", self.disc_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("gru_disc_hidden", self.gru_disc_hidden),
            ("gru_disc_layers", self.gru_disc_layers),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.d_model % self.disc_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by disc_heads {}",
                self.d_model, self.disc_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!("alpha {} must be > 0", self.alpha)));
        }
        if self.chord_vocab != CHORD_VOCAB || self.melody_vocab != MELODY_VOCAB_WITH_MASK {
            return Err(Error::Config("vocabulary sizes are fixed by the encodings".into()));
        }
        Ok(())
    }

    /// `key=value` view used by checkpoints and run configs.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("d_emb", self.d_emb.to_string()),
            ("d_z", self.d_z.to_string()),
            ("d_p_enc", self.d_p_enc.to_string()),
            ("d_t_enc", self.d_t_enc.to_string()),
            ("d_t_dec", self.d_t_dec.to_string()),
            ("d_p_dec", self.d_p_dec.to_string()),
            ("disc_layers", self.disc_layers.to_string()),
            ("disc_heads", self.disc_heads.to_string()),
            ("d_model", self.d_model.to_string()),
            ("d_ff", self.d_ff.to_string()),
            ("dropout", self.dropout.to_string()),
            ("alpha", self.alpha.to_string()),
            ("chord_vocab", self.chord_vocab.to_string()),
            ("melody_vocab", self.melody_vocab.to_string()),
            ("rel_clip", self.rel_clip.to_string()),
            ("discriminator", self.discriminator.to_string()),
            ("gru_disc_hidden", self.gru_disc_hidden.to_string()),
            ("gru_disc_layers", self.gru_disc_layers.to_string()),
        ]
    }

    /// Sets one field by key. Returns `Ok(false)` for keys this struct does
    /// not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("invalid value '{v}' for {key}")))
        }
        match key {
            "d_emb" => self.d_emb = num(key, value)?,
            "d_z" => self.d_z = num(key, value)?,
            "d_p_enc" => self.d_p_enc = num(key, value)?,
            "d_t_enc" => self.d_t_enc = num(key, value)?,
            "d_t_dec" => self.d_t_dec = num(key, value)?,
            "d_p_dec" => self.d_p_dec = num(key, value)?,
            "disc_layers" => self.disc_layers = num(key, value)?,
            "disc_heads" => self.disc_heads = num(key, value)?,
            "d_model" => self.d_model = num(key, value)?,
            "d_ff" => self.d_ff = num(key, value)?,
            "dropout" => self.dropout = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            "chord_vocab" => self.chord_vocab = num(key, value)?,
            "melody_vocab" => self.melody_vocab = num(key, value)?,
            "rel_clip" => self.rel_clip = num(key, value)?,
            "discriminator" => self.discriminator = value.parse()?,
            "gru_disc_hidden" => self.gru_disc_hidden = num(key, value)?,
            "gru_disc_layers" => self.gru_disc_layers = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad config line '{line}'")))?;
            if !cfg.set(k.trim(), v.trim())? {
                return Err(Error::Format(format!("unknown config key '{k}'")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
