//! Hierarchical chord encoder: a bidirectional pitch-axis GRU summarizes each
//! beat, then a bidirectional time-axis GRU over `[beat summary ; condition]`
//! produces the posterior.

use candle_core::{Tensor, Var};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::layers::{index_tensor, Builder, Gru, Linear};
use super::params::{live, ParamGroup, ParamStore};
use crate::encodings::{BEATS, CHORD_VOCAB, HOLD, MELODY_VOCAB_WITH_MASK, OCTAVES, SLOTS};
use crate::error::Result;

#[derive(Debug, Clone)]
pub(crate) struct Encoder {
    /// Pitch-class embedding shared by chord slots and melody onsets.
    pub pitch_embed: Var,
    octave_embed: Var,
    /// Hold, rest, mask.
    state_embed: Var,
    pitch_fwd: Gru,
    pitch_bwd: Gru,
    time_fwd: Gru,
    time_bwd: Gru,
    mean: Linear,
    log_var: Linear,
}

impl Encoder {
    pub fn new(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut b = Builder {
            store,
            rng,
            group: ParamGroup::Encoder,
        };
        let time_in = 2 * cfg.d_p_enc + cfg.d_emb;
        Ok(Self {
            pitch_embed: b.embedding("enc.pitch_embed", CHORD_VOCAB, cfg.d_emb)?,
            octave_embed: b.embedding("enc.octave_embed", OCTAVES, cfg.d_emb)?,
            state_embed: b.embedding("enc.state_embed", 3, cfg.d_emb)?,
            pitch_fwd: b.gru("enc.pitch_gru.fwd", cfg.d_emb, cfg.d_p_enc)?,
            pitch_bwd: b.gru("enc.pitch_gru.bwd", cfg.d_emb, cfg.d_p_enc)?,
            time_fwd: b.gru("enc.time_gru.fwd", time_in, cfg.d_t_enc)?,
            time_bwd: b.gru("enc.time_gru.bwd", time_in, cfg.d_t_enc)?,
            mean: b.linear("enc.mean", 2 * cfg.d_t_enc, cfg.d_z)?,
            log_var: b.linear("enc.log_var", 2 * cfg.d_t_enc, cfg.d_z)?,
        })
    }

    /// Embedding table for the 123-token melody vocabulary: onsets are the
    /// sum of the shared pitch-class row and an octave row.
    pub fn melody_table(&self, frozen: bool) -> Result<Tensor> {
        let pitch = live(&self.pitch_embed, frozen);
        let octave = live(&self.octave_embed, frozen);
        let state = live(&self.state_embed, frozen);
        let dev = pitch.device();
        let n = HOLD as usize;
        let pc_idx = index_tensor((0..n as u32).map(|i| i % 12).collect(), &[n], dev)?;
        let oct_idx = index_tensor((0..n as u32).map(|i| i / 12).collect(), &[n], dev)?;
        let onsets = (pitch.index_select(&pc_idx, 0)? + octave.index_select(&oct_idx, 0)?)?;
        let table = Tensor::cat(&[&onsets, &state], 0)?;
        debug_assert_eq!(table.dim(0)?, MELODY_VOCAB_WITH_MASK);
        Ok(table)
    }

    /// `chords`: `[batch, 32, 4]` u32; `cond`: `[batch, 32, d_emb]`.
    pub fn forward(&self, chords: &Tensor, cond: &Tensor, frozen: bool) -> Result<(Tensor, Tensor)> {
        let (batch, _, _) = chords.dims3()?;
        let table = live(&self.pitch_embed, frozen);
        let d_emb = table.dim(1)?;
        let emb = table
            .index_select(&chords.flatten_all()?, 0)?
            .reshape((batch * BEATS, SLOTS, d_emb))?;
        let (_, fwd) = self.pitch_fwd.run(&emb, None, false, frozen)?;
        let (_, bwd) = self.pitch_bwd.run(&emb, None, true, frozen)?;
        let beat = Tensor::cat(&[&fwd, &bwd], 1)?.reshape((batch, BEATS, ()))?;
        let time_in = Tensor::cat(&[&beat, cond], 2)?;
        let (_, fwd) = self.time_fwd.run(&time_in, None, false, frozen)?;
        let (_, bwd) = self.time_bwd.run(&time_in, None, true, frozen)?;
        let summary = Tensor::cat(&[&fwd, &bwd], 1)?;
        Ok((
            self.mean.forward(&summary, frozen)?,
            self.log_var.forward(&summary, frozen)?,
        ))
    }
}
