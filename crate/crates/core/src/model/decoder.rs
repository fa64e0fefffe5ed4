//! Mirrored hierarchical decoder: a time-axis GRU driven by `[z ; condition_t]`
//! seeds, per beat, an autoregressive pitch-axis GRU over the four slots.

use candle_core::{Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::layers::{index_tensor, Builder, Gru, Linear};
use super::params::{live, ParamGroup, ParamStore};
use crate::encodings::{BEATS, CHORD_VOCAB, SLOTS};
use crate::error::{Error, Result};

/// Index of the start-of-chord token in the decoder's input embedding.
pub(crate) const START: u32 = CHORD_VOCAB as u32;

/// Ground-truth slot tokens (`batch·32·4`, row-major) and the probability of
/// feeding them instead of the model's own argmax.
#[derive(Debug, Clone, Copy)]
pub struct Teacher<'a> {
    pub targets: &'a [u32],
    pub rate: f64,
}

#[derive(Debug, Clone)]
pub struct DecodeOutput {
    /// `[batch, 32, 4, 13]`.
    pub logits: Tensor,
    /// Token fed into the pitch recurrence at each slot (`START` at slot 0).
    pub fed: Vec<u32>,
}

#[derive(Debug, Clone)]
pub(crate) struct Decoder {
    z_to_time: Linear,
    time_gru: Gru,
    time_to_pitch: Linear,
    token_embed: Var,
    pitch_gru: Gru,
    out: Linear,
    d_emb: usize,
    d_t: usize,
}

impl Decoder {
    pub fn new(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut b = Builder {
            store,
            rng,
            group: ParamGroup::Decoder,
        };
        Ok(Self {
            z_to_time: b.linear("dec.z_to_time", cfg.d_z, cfg.d_t_dec)?,
            time_gru: b.gru("dec.time_gru", cfg.d_z + cfg.d_emb, cfg.d_t_dec)?,
            time_to_pitch: b.linear("dec.time_to_pitch", cfg.d_t_dec, cfg.d_p_dec)?,
            token_embed: b.embedding("dec.token_embed", CHORD_VOCAB + 1, cfg.d_emb)?,
            pitch_gru: b.gru("dec.pitch_gru", cfg.d_emb + cfg.d_t_dec, cfg.d_p_dec)?,
            out: b.linear("dec.out", cfg.d_p_dec, CHORD_VOCAB)?,
            d_emb: cfg.d_emb,
            d_t: cfg.d_t_dec,
        })
    }

    pub fn forward(
        &self,
        z: &Tensor,
        cond: &Tensor,
        teacher: Option<Teacher<'_>>,
        mut rng: Option<&mut ChaCha8Rng>,
        frozen: bool,
    ) -> Result<DecodeOutput> {
        let (batch, d_z) = z.dims2()?;
        let (cb, beats, _) = cond.dims3()?;
        if cb != batch || beats != BEATS {
            return Err(Error::Contract(format!(
                "condition shape {:?} does not match batch {batch}",
                cond.dims()
            )));
        }
        let n = batch * BEATS;
        if let Some(t) = &teacher {
            if t.targets.len() != n * SLOTS {
                return Err(Error::Contract(format!(
                    "teacher has {} tokens, expected {}",
                    t.targets.len(),
                    n * SLOTS
                )));
            }
            if t.rate > 0.0 && t.rate < 1.0 && rng.is_none() {
                return Err(Error::Contract(
                    "partial teacher forcing needs an rng".into(),
                ));
            }
        }

        let h0 = self.z_to_time.forward(z, frozen)?.tanh()?;
        let z_rep = z.unsqueeze(1)?.broadcast_as((batch, BEATS, d_z))?;
        let time_in = Tensor::cat(&[&z_rep, cond], 2)?;
        let (outs, _) = self.time_gru.run(&time_in, Some(&h0), false, frozen)?;
        let beat_states = Tensor::stack(&outs, 1)?.reshape((n, self.d_t))?;

        let mut h = self.time_to_pitch.forward(&beat_states, frozen)?.tanh()?;
        let w_ih = live(&self.pitch_gru.w_ih, frozen);
        let b_ih = live(&self.pitch_gru.b_ih, frozen);
        let beat_part = beat_states
            .matmul(&w_ih.narrow(0, self.d_emb, self.d_t)?)?
            .broadcast_add(&b_ih)?;
        let w_tok = w_ih.narrow(0, 0, self.d_emb)?;
        let table = live(&self.token_embed, frozen);
        let dev = z.device();

        let mut prev: Vec<u32> = vec![START; n];
        let mut fed = vec![0u32; n * SLOTS];
        let mut slot_logits = Vec::with_capacity(SLOTS);
        for p in 0..SLOTS {
            for (i, &tok) in prev.iter().enumerate() {
                fed[i * SLOTS + p] = tok;
            }
            let emb = table.index_select(&index_tensor(prev.clone(), &[n], dev)?, 0)?;
            let xi = (emb.matmul(&w_tok)? + &beat_part)?;
            h = self.pitch_gru.step(&xi, &h, frozen)?;
            let logits = self.out.forward(&h, frozen)?;
            if p + 1 < SLOTS {
                let greedy: Vec<u32> = logits.argmax(1)?.to_vec1::<u32>()?;
                prev = match &teacher {
                    Some(t) if t.rate >= 1.0 => (0..n).map(|i| t.targets[i * SLOTS + p]).collect(),
                    Some(t) if t.rate > 0.0 => {
                        let rng = rng.as_deref_mut().unwrap();
                        (0..n)
                            .map(|i| {
                                if rng.random_bool(t.rate) {
                                    t.targets[i * SLOTS + p]
                                } else {
                                    greedy[i]
                                }
                            })
                            .collect()
                    }
                    _ => greedy,
                };
            }
            slot_logits.push(logits);
        }
        let logits = Tensor::stack(&slot_logits, 1)?.reshape((batch, BEATS, SLOTS, CHORD_VOCAB))?;
        Ok(DecodeOutput { logits, fed })
    }
}
