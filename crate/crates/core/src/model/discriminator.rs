//! Adversaries that try to recover the clean melody from the latent code.
//!
//! The main discriminator is a post-norm self-attention encoder with
//! clipped relative-position key embeddings. `z` is projected to `d_model` and
//! prepended as position 0; positions 1..=128 carry the corrupted melody.
//! The recurrent variant predicts the melody from `z` alone.

use candle_core::{Tensor, Var};
use rand_chacha::ChaCha8Rng;

use super::config::{DiscriminatorKind, ModelConfig};
use super::ops::relative_to_absolute;
use super::layers::{dropout, Builder, Gru, LayerNorm, Linear};
use super::params::{live, Init, ParamGroup, ParamStore};
use crate::encodings::{MELODY_VOCAB, MELODY_VOCAB_WITH_MASK, STEPS};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
struct AttentionLayer {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    rel: Var,
    ln1: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    ln2: LayerNorm,
}

#[derive(Debug, Clone)]
pub(crate) struct TransformerDisc {
    z_proj: Linear,
    melody_embed: Var,
    in_proj: Linear,
    ln_in: LayerNorm,
    layers: Vec<AttentionLayer>,
    out: Linear,
    heads: usize,
    rel_clip: usize,
    dropout: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct RecurrentDisc {
    start: Var,
    z_init: Vec<Linear>,
    grus: Vec<Gru>,
    out: Linear,
}

#[derive(Debug, Clone)]
pub(crate) enum Discriminator {
    Transformer(TransformerDisc),
    Recurrent(RecurrentDisc),
}

impl Discriminator {
    pub fn new(
        cfg: &ModelConfig,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Option<Self>> {
        let mut b = Builder {
            store,
            rng,
            group: ParamGroup::Discriminator,
        };
        Ok(match cfg.discriminator {
            DiscriminatorKind::None => None,
            DiscriminatorKind::Transformer => Some(Self::Transformer(TransformerDisc::new(cfg, &mut b)?)),
            DiscriminatorKind::Recurrent => Some(Self::Recurrent(RecurrentDisc::new(cfg, &mut b)?)),
        })
    }

    /// `z`: `[batch, d_z]`; `corrupted`: `[batch, 128]` u32 (may contain MASK).
    /// Returns `[batch, 128, 122]` logits.
    pub fn forward(
        &self,
        z: &Tensor,
        corrupted: &Tensor,
        rng: Option<&mut ChaCha8Rng>,
        frozen: bool,
    ) -> Result<Tensor> {
        let (batch, len) = corrupted.dims2()?;
        if len != STEPS {
            return Err(Error::Contract(format!(
                "discriminator expects {STEPS} melody steps, got {len}"
            )));
        }
        if z.dim(0)? != batch {
            return Err(Error::Contract("latent and melody batch sizes differ".into()));
        }
        match self {
            Self::Transformer(d) => d.forward(z, corrupted, rng, frozen),
            Self::Recurrent(d) => d.forward(z, frozen),
        }
    }

    /// Zeroes the latent projection so outputs cannot depend on `z`.
    pub fn zero_latent_path(&self) -> Result<()> {
        let zero = |v: &Var| v.set(&v.zeros_like()?);
        match self {
            Self::Transformer(d) => {
                zero(&d.z_proj.w)?;
                zero(&d.z_proj.b)?;
            }
            Self::Recurrent(d) => {
                for l in &d.z_init {
                    zero(&l.w)?;
                    zero(&l.b)?;
                }
            }
        }
        Ok(())
    }
}

impl TransformerDisc {
    fn new(cfg: &ModelConfig, b: &mut Builder<'_>) -> Result<Self> {
        let d = cfg.d_model;
        let d_head = d / cfg.disc_heads;
        let mut layers = Vec::with_capacity(cfg.disc_layers);
        for l in 0..cfg.disc_layers {
            let p = format!("dis.layers.{l}");
            layers.push(AttentionLayer {
                q: b.linear(&format!("{p}.q"), d, d)?,
                k: b.linear(&format!("{p}.k"), d, d)?,
                v: b.linear(&format!("{p}.v"), d, d)?,
                o: b.linear(&format!("{p}.o"), d, d)?,
                rel: b.param(
                    &format!("{p}.rel_key"),
                    &[2 * cfg.rel_clip + 1, d_head],
                    Init::FanIn(d_head),
                )?,
                ln1: b.layer_norm(&format!("{p}.ln1"), d)?,
                ff1: b.linear(&format!("{p}.ff1"), d, cfg.d_ff)?,
                ff2: b.linear(&format!("{p}.ff2"), cfg.d_ff, d)?,
                ln2: b.layer_norm(&format!("{p}.ln2"), d)?,
            });
        }
        Ok(Self {
            z_proj: b.linear("dis.z_proj", cfg.d_z, d)?,
            melody_embed: b.embedding("dis.melody_embed", MELODY_VOCAB_WITH_MASK, cfg.d_emb)?,
            in_proj: b.linear("dis.in_proj", cfg.d_emb, d)?,
            ln_in: b.layer_norm("dis.ln_in", d)?,
            layers,
            out: b.linear("dis.out", d, MELODY_VOCAB)?,
            heads: cfg.disc_heads,
            rel_clip: cfg.rel_clip,
            dropout: cfg.dropout,
        })
    }

    fn forward(
        &self,
        z: &Tensor,
        corrupted: &Tensor,
        mut rng: Option<&mut ChaCha8Rng>,
        frozen: bool,
    ) -> Result<Tensor> {
        let (batch, steps) = corrupted.dims2()?;
        let table = live(&self.melody_embed, frozen);
        let tokens = table
            .index_select(&corrupted.flatten_all()?, 0)?
            .reshape((batch, steps, ()))?;
        let tokens = self.in_proj.forward(&tokens, frozen)?;
        let head = self.z_proj.forward(z, frozen)?.unsqueeze(1)?;
        let mut x = Tensor::cat(&[&head, &tokens], 1)?;
        x = self.ln_in.forward(&x, frozen)?;
        x = dropout(&x, self.dropout, rng.as_deref_mut())?;

        for layer in &self.layers {
            let attn = self.attention(layer, &x, rng.as_deref_mut(), frozen)?;
            let attn = dropout(&attn, self.dropout, rng.as_deref_mut())?;
            x = layer.ln1.forward(&(x + attn)?, frozen)?;
            let ff = layer
                .ff2
                .forward(&layer.ff1.forward(&x, frozen)?.gelu()?, frozen)?;
            let ff = dropout(&ff, self.dropout, rng.as_deref_mut())?;
            x = layer.ln2.forward(&(x + ff)?, frozen)?;
        }
        self.out.forward(&x.narrow(1, 1, steps)?, frozen)
    }

    fn attention(
        &self,
        layer: &AttentionLayer,
        x: &Tensor,
        rng: Option<&mut ChaCha8Rng>,
        frozen: bool,
    ) -> Result<Tensor> {
        let (batch, len, d) = x.dims3()?;
        let d_head = d / self.heads;
        let split = |t: Tensor| -> Result<Tensor> {
            Ok(t.reshape((batch, len, self.heads, d_head))?
                .transpose(1, 2)?
                .contiguous()?)
        };
        let q = (split(layer.q.forward(x, frozen)?)? / (d_head as f64).sqrt())?;
        let k = split(layer.k.forward(x, frozen)?)?;
        let v = split(layer.v.forward(x, frozen)?)?;
        let content = q.matmul(&k.transpose(2, 3)?.contiguous()?)?;
        let rel = live(&layer.rel, frozen);
        let n_rel = rel.dim(0)?;
        let bh = batch * self.heads;
        // Scores against each clipped distance, then routed to keys per query.
        let position = q
            .reshape((bh * len, d_head))?
            .matmul(&rel.t()?)?
            .reshape((bh, len, n_rel))?;
        let position = relative_to_absolute(&position, self.rel_clip)?.reshape((batch, self.heads, len, len))?;
        let probs = super::ops::softmax_last(&(content + position)?)?;
        let probs = dropout(&probs, self.dropout, rng)?;
        let ctx = probs
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((batch, len, d))?;
        layer.o.forward(&ctx, frozen)
    }
}

impl RecurrentDisc {
    fn new(cfg: &ModelConfig, b: &mut Builder<'_>) -> Result<Self> {
        let h = cfg.gru_disc_hidden;
        let mut z_init = Vec::new();
        let mut grus = Vec::new();
        for l in 0..cfg.gru_disc_layers {
            z_init.push(b.linear(&format!("dis.z_init.{l}"), cfg.d_z, h)?);
            let d_in = if l == 0 { cfg.d_emb } else { h };
            grus.push(b.gru(&format!("dis.gru.{l}"), d_in, h)?);
        }
        Ok(Self {
            start: b.embedding("dis.start_tokens", STEPS, cfg.d_emb)?,
            z_init,
            grus,
            out: b.linear("dis.out", h, MELODY_VOCAB)?,
        })
    }

    fn forward(&self, z: &Tensor, frozen: bool) -> Result<Tensor> {
        let batch = z.dim(0)?;
        let start = live(&self.start, frozen);
        let mut xs = start.unsqueeze(0)?.broadcast_as((batch, STEPS, start.dim(1)?))?.contiguous()?;
        for (gru, init) in self.grus.iter().zip(&self.z_init) {
            let h0 = init.forward(z, frozen)?.tanh()?;
            let (outs, _) = gru.run(&xs, Some(&h0), false, frozen)?;
            xs = Tensor::stack(&outs, 1)?;
        }
        self.out.forward(&xs, frozen)
    }
}
