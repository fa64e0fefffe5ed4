//! Neural components: hierarchical chord encoder `Q`, mirrored decoder `P` and
//! the melody discriminator `R`, over three disjoint parameter groups.

mod checkpoint;
mod config;
mod decoder;
mod discriminator;
mod encoder;
mod layers;
mod ops;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use config::{DiscriminatorKind, ModelConfig};
pub use decoder::{DecodeOutput, Teacher};
pub use ops::{log_softmax_last, softmax_last};
pub use params::{ParamEntry, ParamGroup, ParamStore};

use candle_core::{DType, Device, Tensor};
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

use crate::encodings::{
    beat_pool_condition, normalize_pad_suffix, ChordGrid, CorruptedMelody, MelodyGrid, BEATS,
    CHORD_VOCAB, SLOTS, STEPS,
};
use crate::error::{Error, Result};
use decoder::Decoder;
use discriminator::Discriminator;
use encoder::Encoder;

/// Lower bound applied to log-variances before exponentiation.
pub const LOG_VAR_FLOOR: f64 = -20.0;

/// Parameter groups whose tensors are detached for a forward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Frozen {
    pub encoder: bool,
    pub decoder: bool,
    pub discriminator: bool,
}

impl Frozen {
    pub const NONE: Frozen = Frozen {
        encoder: false,
        decoder: false,
        discriminator: false,
    };
    pub const ALL: Frozen = Frozen {
        encoder: true,
        decoder: true,
        discriminator: true,
    };
}

/// Diagonal Gaussian posterior for a single sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub mean: Vec<f64>,
    pub log_variance: Vec<f64>,
}

impl Posterior {
    pub fn variance(&self) -> Vec<f64> {
        self.log_variance.iter().map(|lv| lv.exp()).collect()
    }
}

/// Batched posterior parameters, `[batch, d_z]` each.
#[derive(Debug, Clone)]
pub struct PosteriorTensors {
    pub mean: Tensor,
    pub log_var: Tensor,
}

impl PosteriorTensors {
    pub fn from_posterior(p: &Posterior, dtype: DType) -> Result<Self> {
        let d = p.mean.len();
        if p.log_variance.len() != d {
            return Err(Error::Contract("mean and log-variance lengths differ".into()));
        }
        Ok(Self {
            mean: Tensor::from_vec(p.mean.clone(), (1, d), &Device::Cpu)?.to_dtype(dtype)?,
            log_var: Tensor::from_vec(p.log_variance.clone(), (1, d), &Device::Cpu)?
                .to_dtype(dtype)?,
        })
    }

    pub fn row(&self, i: usize) -> Result<Posterior> {
        Ok(Posterior {
            mean: self.mean.get(i)?.to_dtype(DType::F64)?.to_vec1()?,
            log_variance: self.log_var.get(i)?.to_dtype(DType::F64)?.to_vec1()?,
        })
    }
}

/// A latent code `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub z: Vec<f64>,
}

impl LatentCode {
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.z.clone(), (1, self.z.len()), &Device::Cpu)?.to_dtype(dtype)?)
    }
}

/// Samples `z = mean + exp(log_var / 2) * eps` with `eps` drawn from `rng`;
/// `None` returns the mean. Log-variances are floored at [`LOG_VAR_FLOOR`].
pub fn reparameterize(post: &PosteriorTensors, rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
    let Some(rng) = rng else {
        return Ok(post.mean.clone());
    };
    let n = post.mean.elem_count();
    let eps: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    let eps = Tensor::from_vec(eps, post.mean.shape(), post.mean.device())?.to_dtype(post.mean.dtype())?;
    let std = (post.log_var.maximum(LOG_VAR_FLOOR)? * 0.5)?.exp()?;
    Ok((&post.mean + (std * eps)?)?)
}

/// Token tensors for a batch of (chord, melody) pairs.
#[derive(Debug, Clone)]
pub struct GridBatch {
    /// `[batch, 32, 4]` u32.
    pub chords: Tensor,
    /// `[batch, 128]` u32.
    pub melodies: Tensor,
    pub chord_tokens: Vec<u32>,
    pub melody_tokens: Vec<u32>,
    pub melody_grids: Vec<MelodyGrid>,
}

impl GridBatch {
    pub fn new<'a, I>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a ChordGrid, &'a MelodyGrid)>,
    {
        let mut chord_tokens = Vec::new();
        let mut melody_tokens = Vec::new();
        let mut melody_grids = Vec::new();
        for (c, m) in pairs {
            chord_tokens.extend(c.tokens().into_iter().map(u32::from));
            melody_tokens.extend(m.tokens().into_iter().map(u32::from));
            melody_grids.push(m.clone());
        }
        let batch = melody_grids.len();
        if batch == 0 {
            return Err(Error::Empty("batch has no samples".into()));
        }
        Ok(Self {
            chords: Tensor::from_vec(chord_tokens.clone(), (batch, BEATS, SLOTS), &Device::Cpu)?,
            melodies: Tensor::from_vec(melody_tokens.clone(), (batch, STEPS), &Device::Cpu)?,
            chord_tokens,
            melody_tokens,
            melody_grids,
        })
    }

    pub fn len(&self) -> usize {
        self.melody_grids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.melody_grids.is_empty()
    }
}

/// Token tensor `[batch, 128]` for corrupted melodies.
pub fn corrupted_tensor(items: &[CorruptedMelody]) -> Result<Tensor> {
    let mut toks = Vec::with_capacity(items.len() * STEPS);
    for c in items {
        if c.len() != STEPS {
            return Err(Error::Contract(format!(
                "corrupted melody has {} steps, expected {STEPS}",
                c.len()
            )));
        }
        toks.extend(c.tokens().iter().map(|&t| t as u32));
    }
    Ok(Tensor::from_vec(toks, (items.len(), STEPS), &Device::Cpu)?)
}

/// The full model: encoder, decoder and optional discriminator.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
    discriminator: Option<Discriminator>,
}

impl Model {
    /// Builds a freshly initialized f32 model.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::with_dtype(config, seed, DType::F32)
    }

    pub fn with_dtype(config: ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(dtype, Device::Cpu);
        let encoder = Encoder::new(&config, &mut store, &mut rng)?;
        let decoder = Decoder::new(&config, &mut store, &mut rng)?;
        let discriminator = Discriminator::new(&config, &mut store, &mut rng)?;
        Ok(Self {
            config,
            store,
            encoder,
            decoder,
            discriminator,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn has_discriminator(&self) -> bool {
        self.discriminator.is_some()
    }

    /// Trainable scalar counts: (encoder + decoder, discriminator).
    pub fn param_count(&self) -> (usize, usize) {
        (
            self.store.count(ParamGroup::Encoder) + self.store.count(ParamGroup::Decoder),
            self.store.count(ParamGroup::Discriminator),
        )
    }

    /// Beat-pooled melody condition `[batch, 32, d_emb]`, built from the
    /// encoder-owned embeddings.
    pub fn condition(&self, melodies: &Tensor, frozen: Frozen) -> Result<Tensor> {
        let table = self.encoder.melody_table(frozen.encoder)?;
        beat_pool_condition(melodies, &table)
    }

    pub fn encode_batch(&self, chords: &Tensor, cond: &Tensor, frozen: Frozen) -> Result<PosteriorTensors> {
        let (mean, log_var) = self.encoder.forward(chords, cond, frozen.encoder)?;
        Ok(PosteriorTensors { mean, log_var })
    }

    pub fn decode_batch(
        &self,
        z: &Tensor,
        cond: &Tensor,
        teacher: Option<Teacher<'_>>,
        rng: Option<&mut ChaCha8Rng>,
        frozen: Frozen,
    ) -> Result<DecodeOutput> {
        self.check_latent(z)?;
        self.decoder.forward(z, cond, teacher, rng, frozen.decoder)
    }

    pub fn discriminate_batch(
        &self,
        z: &Tensor,
        corrupted: &Tensor,
        rng: Option<&mut ChaCha8Rng>,
        frozen: Frozen,
    ) -> Result<Tensor> {
        self.check_latent(z)?;
        let disc = self
            .discriminator
            .as_ref()
            .ok_or_else(|| Error::Contract("model has no discriminator".into()))?;
        disc.forward(z, corrupted, rng, frozen.discriminator)
    }

    fn check_latent(&self, z: &Tensor) -> Result<()> {
        let (_, d) = z.dims2()?;
        if d != self.config.d_z {
            return Err(Error::Contract(format!(
                "latent width {d}, model expects {}",
                self.config.d_z
            )));
        }
        Ok(())
    }

    /// Posterior of one (chord, melody) pair, eval mode.
    pub fn encode(&self, chord: &ChordGrid, melody: &MelodyGrid) -> Result<Posterior> {
        let batch = GridBatch::new([(chord, melody)])?;
        self.encode_grids(&batch)?.row(0)
    }

    /// Batched posterior, eval mode.
    pub fn encode_grids(&self, batch: &GridBatch) -> Result<PosteriorTensors> {
        let cond = self.condition(&batch.melodies, Frozen::ALL)?;
        self.encode_batch(&batch.chords, &cond, Frozen::ALL)
    }

    /// Chord logits `[32, 4, 13]` for one latent code and melody.
    pub fn decode(
        &self,
        z: &LatentCode,
        melody: &MelodyGrid,
        teacher: Option<(&ChordGrid, f64)>,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor> {
        let mel = GridBatch::new([(&ChordGrid::all_pad(), melody)])?;
        let cond = self.condition(&mel.melodies, Frozen::ALL)?;
        let targets: Vec<u32>;
        let teacher = match teacher {
            Some((grid, rate)) => {
                targets = grid.tokens().into_iter().map(u32::from).collect();
                Some(Teacher {
                    targets: &targets,
                    rate,
                })
            }
            None => None,
        };
        let out = self.decode_batch(&z.to_tensor(self.dtype())?, &cond, teacher, rng, Frozen::ALL)?;
        Ok(out.logits.squeeze(0)?)
    }

    /// Greedy decode of a batch of latents under their melodies, normalized
    /// to valid grids.
    pub fn greedy_grids(&self, z: &Tensor, melodies: &Tensor) -> Result<Vec<ChordGrid>> {
        let cond = self.condition(melodies, Frozen::ALL)?;
        let out = self.decode_batch(z, &cond, None, None, Frozen::ALL)?;
        logits_to_grids(&out.logits)
    }

    /// Melody logits `[128, 122]` for one latent code and corrupted melody, eval mode.
    pub fn discriminate(&self, z: &LatentCode, corrupted: &CorruptedMelody) -> Result<Tensor> {
        let toks = corrupted_tensor(std::slice::from_ref(corrupted))?;
        Ok(self
            .discriminate_batch(&z.to_tensor(self.dtype())?, &toks, None, Frozen::ALL)?
            .squeeze(0)?)
    }

    /// Zeroes the discriminator's latent projection.
    pub fn zero_discriminator_latent_path(&self) -> Result<()> {
        self.discriminator
            .as_ref()
            .ok_or_else(|| Error::Contract("model has no discriminator".into()))?
            .zero_latent_path()
    }
}

/// Slot-wise argmax followed by PAD-suffix normalization.
pub fn logits_to_grids(logits: &Tensor) -> Result<Vec<ChordGrid>> {
    let (batch, beats, slots, vocab) = logits.dims4()?;
    if beats != BEATS || slots != SLOTS || vocab != CHORD_VOCAB {
        return Err(Error::Contract(format!("unexpected logits shape {:?}", logits.dims())));
    }
    let idx = logits.argmax(3)?.flatten_all()?.to_vec1::<u32>()?;
    (0..batch)
        .map(|b| {
            let mut rows = [[0u8; SLOTS]; BEATS];
            for (t, row) in rows.iter_mut().enumerate() {
                for (p, tok) in row.iter_mut().enumerate() {
                    *tok = idx[(b * BEATS + t) * SLOTS + p] as u8;
                }
                normalize_pad_suffix(row);
            }
            ChordGrid::new(rows)
        })
        .collect()
}
