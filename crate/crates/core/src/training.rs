//! Alternating adversarial training: `i` VAE steps, then `j` blocks of `k`
//! discriminator steps and `l` encoder-adversarial steps, repeated over a
//! shuffled batch stream.

use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{CorpusFile, Sample, Split};
use crate::encodings::{corrupt, CorruptedMelody, CorruptionMethod, CorruptionSpec, DEFAULT_MASK_RATE};
use crate::error::{Error, Result};
use crate::model::{
    corrupted_tensor, reparameterize, save_checkpoint, DiscriminatorKind, Frozen, GridBatch, Model,
    ModelConfig, ParamGroup, Teacher,
};
use crate::objectives::{
    confusion_objective, disc_objective, vae_objective, ConfusionTarget, LossConfig, LossReport,
};

/// Training variant: the main model and its three baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Dat,
    NonDat,
    MaskCr,
    NonCr,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Dat, Variant::NonDat, Variant::MaskCr, Variant::NonCr];

    pub fn discriminator(self) -> DiscriminatorKind {
        match self {
            Variant::Dat | Variant::MaskCr => DiscriminatorKind::Transformer,
            Variant::NonDat => DiscriminatorKind::None,
            Variant::NonCr => DiscriminatorKind::Recurrent,
        }
    }

    pub fn corruption(self) -> Option<CorruptionMethod> {
        match self {
            Variant::Dat => Some(CorruptionMethod::Transpose),
            Variant::MaskCr => Some(CorruptionMethod::Mask),
            Variant::NonCr => Some(CorruptionMethod::None),
            Variant::NonDat => None,
        }
    }

    pub fn is_adversarial(self) -> bool {
        self != Variant::NonDat
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Dat => "dat",
            Variant::NonDat => "non-dat",
            Variant::MaskCr => "mask-cr",
            Variant::NonCr => "non-cr",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dat" => Ok(Self::Dat),
            "non-dat" => Ok(Self::NonDat),
            "mask-cr" => Ok(Self::MaskCr),
            "non-cr" => Ok(Self::NonCr),
            other => Err(Error::Config(format!("unknown variant '{other}'"))),
        }
    }
}

/// What one epoch counts: every augmented training sample, or one copy of
/// each untransposed sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpochBasis {
    Augmented,
    Raw,
}

impl fmt::Display for EpochBasis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EpochBasis::Augmented => "augmented",
            EpochBasis::Raw => "raw",
        })
    }
}

impl FromStr for EpochBasis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "augmented" => Ok(Self::Augmented),
            "raw" => Ok(Self::Raw),
            other => Err(Error::Config(format!("unknown epoch basis '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSchedule {
    /// VAE steps per outer cycle.
    pub i: usize,
    /// Adversarial blocks per outer cycle.
    pub j: usize,
    /// Discriminator steps per block.
    pub k: usize,
    /// Encoder-adversarial steps per block.
    pub l: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub tf_start: f64,
    pub tf_end: f64,
    pub seed: u64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
    /// Adversarial phases reuse the cycle's VAE batches instead of drawing.
    pub reuse_batches: bool,
    pub epoch_basis: EpochBasis,
    pub mask_rate: f64,
    pub confusion: ConfusionTarget,
    /// Verify parameter-group routing every this many steps; `0` disables.
    pub routing_check_every: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            i: 10,
            j: 1,
            k: 5,
            l: 5,
            batch_size: 256,
            epochs: 20,
            lr_start: 1e-3,
            lr_end: 1e-5,
            tf_start: 0.8,
            tf_end: 0.0,
            seed: 0,
            grad_clip: 5.0,
            reuse_batches: false,
            epoch_basis: EpochBasis::Augmented,
            mask_rate: DEFAULT_MASK_RATE,
            confusion: ConfusionTarget::Complement,
            routing_check_every: 100,
        }
    }
}

/// Teacher-forcing rate reached at the last epoch before the final clamp.
const TF_FLOOR: f64 = 0.01;

impl TrainSchedule {
    pub fn paper() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 2 {
            return Err(Error::Schedule(format!("epochs {} < 2", self.epochs)));
        }
        if self.batch_size == 0 {
            return Err(Error::Schedule("batch_size must be ≥ 1".into()));
        }
        if self.i + self.j * (self.k + self.l) == 0 {
            return Err(Error::Schedule("cycle has no steps".into()));
        }
        if !(self.lr_end > 0.0 && self.lr_end <= self.lr_start) {
            return Err(Error::Schedule(format!(
                "need 0 < lr_end ≤ lr_start, got {} and {}",
                self.lr_end, self.lr_start
            )));
        }
        if !(0.0 <= self.tf_end && self.tf_end <= self.tf_start && self.tf_start <= 1.0) {
            return Err(Error::Schedule(format!(
                "need 0 ≤ tf_end ≤ tf_start ≤ 1, got {} and {}",
                self.tf_end, self.tf_start
            )));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::Schedule("grad_clip must be ≥ 0".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_rate) {
            return Err(Error::Schedule("mask_rate outside [0, 1]".into()));
        }
        Ok(())
    }

    fn check_epoch(&self, epoch: usize) -> Result<()> {
        if self.epochs < 2 {
            return Err(Error::Schedule(format!("epochs {} < 2", self.epochs)));
        }
        if epoch >= self.epochs {
            return Err(Error::Schedule(format!("epoch {epoch} ≥ {}", self.epochs)));
        }
        Ok(())
    }

    /// Exponentially decayed learning rate hitting `lr_end` at the last epoch.
    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        self.check_epoch(epoch)?;
        let last = (self.epochs - 1) as f64;
        Ok(self.lr_start * (self.lr_end / self.lr_start).powf(epoch as f64 / last))
    }

    /// Exponentially decayed teacher-forcing rate, clamped to `tf_end` at the
    /// last epoch.
    pub fn tf_at(&self, epoch: usize) -> Result<f64> {
        self.check_epoch(epoch)?;
        if epoch == self.epochs - 1 || self.tf_start == 0.0 {
            return Ok(self.tf_end);
        }
        let floor = TF_FLOOR.min(self.tf_start).max(self.tf_end);
        let last = (self.epochs - 1) as f64;
        Ok(self.tf_start * (floor / self.tf_start).powf(epoch as f64 / last))
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("i", self.i.to_string()),
            ("j", self.j.to_string()),
            ("k", self.k.to_string()),
            ("l", self.l.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("lr_start", self.lr_start.to_string()),
            ("lr_end", self.lr_end.to_string()),
            ("tf_start", self.tf_start.to_string()),
            ("tf_end", self.tf_end.to_string()),
            ("seed", self.seed.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
            ("reuse_batches", self.reuse_batches.to_string()),
            ("epoch_basis", self.epoch_basis.to_string()),
            ("mask_rate", self.mask_rate.to_string()),
            ("confusion", self.confusion.to_string()),
            ("routing_check_every", self.routing_check_every.to_string()),
        ]
    }

    /// Sets one field by key. Returns `Ok(false)` for keys this struct does
    /// not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("invalid value '{v}' for {key}")))
        }
        match key {
            "i" => self.i = parse(key, value)?,
            "j" => self.j = parse(key, value)?,
            "k" => self.k = parse(key, value)?,
            "l" => self.l = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "lr_start" => self.lr_start = parse(key, value)?,
            "lr_end" => self.lr_end = parse(key, value)?,
            "tf_start" => self.tf_start = parse(key, value)?,
            "tf_end" => self.tf_end = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "grad_clip" => self.grad_clip = parse(key, value)?,
            "reuse_batches" => self.reuse_batches = parse(key, value)?,
            "epoch_basis" => self.epoch_basis = value.parse()?,
            "mask_rate" => self.mask_rate = parse(key, value)?,
            "confusion" => self.confusion = value.parse()?,
            "routing_check_every" => self.routing_check_every = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Optimization phase of one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    Vae,
    Disc,
    EncAdv,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Vae => "vae",
            Phase::Disc => "disc",
            Phase::EncAdv => "enc_adv",
        })
    }
}

impl Phase {
    /// Groups the phase may modify.
    pub fn updates(self) -> &'static [ParamGroup] {
        match self {
            Phase::Vae => &[ParamGroup::Encoder, ParamGroup::Decoder],
            Phase::Disc => &[ParamGroup::Discriminator],
            Phase::EncAdv => &[ParamGroup::Encoder],
        }
    }
}

/// Phase sequence of one outer cycle.
pub fn cycle_phases(sched: &TrainSchedule, variant: Variant) -> Vec<Phase> {
    let mut out = vec![Phase::Vae; sched.i];
    if variant.is_adversarial() {
        for _ in 0..sched.j {
            out.extend(std::iter::repeat_n(Phase::Disc, sched.k));
            out.extend(std::iter::repeat_n(Phase::EncAdv, sched.l));
        }
    }
    out
}

/// Adam with optional global-norm clipping.
#[derive(Debug, Clone)]
pub struct Adam {
    vars: Vec<Var>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(vars: Vec<Var>) -> Result<Self> {
        let m = vars.iter().map(|v| v.zeros_like()).collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self {
            v: m.clone(),
            m,
            vars,
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        })
    }

    /// Applies one update and returns the pre-clip global gradient norm.
    pub fn step(&mut self, grads: &GradStore, lr: f64, clip: f64) -> Result<f64> {
        let gs: Vec<Option<&Tensor>> = self.vars.iter().map(|v| grads.get(v.as_tensor())).collect();
        let mut sq = 0.0;
        for g in gs.iter().flatten() {
            sq += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm {norm}")));
        }
        let scale = if clip > 0.0 && norm > clip { clip / norm } else { 1.0 };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (idx, g) in gs.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let g = (g.detach() * scale)?;
            self.m[idx] = ((&self.m[idx] * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            self.v[idx] = ((&self.v[idx] * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let m_hat = (&self.m[idx] / bc1)?;
            let v_hat = (&self.v[idx] / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + self.eps)?)?;
            let var = &self.vars[idx];
            var.set(&(var.as_tensor() - (update * lr)?)?)?;
        }
        Ok(norm)
    }
}

/// One record of the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub enum MetricsRecord {
    Step {
        step: u64,
        epoch: usize,
        phase: Phase,
        lr: f64,
        tf: f64,
        report: LossReport,
    },
    Epoch {
        epoch: usize,
        val_recon: f64,
        val_kl: f64,
        val_disc: Option<f64>,
    },
}

impl fmt::Display for MetricsRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricsRecord::Step {
                step,
                epoch,
                phase,
                lr,
                tf,
                report,
            } => write!(
                f,
                "step={step} epoch={epoch} phase={phase} lr={lr} tf={tf} {}",
                report.to_fields()
            ),
            MetricsRecord::Epoch {
                epoch,
                val_recon,
                val_kl,
                val_disc,
            } => {
                write!(f, "epoch={epoch} phase=val recon_chord={val_recon} kl={val_kl}")?;
                if let Some(d) = val_disc {
                    write!(f, " recon_melody={d}")?;
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub records: Vec<MetricsRecord>,
}

impl MetricsLog {
    pub fn steps(&self) -> impl Iterator<Item = (u64, Phase, &LossReport)> {
        self.records.iter().filter_map(|r| match r {
            MetricsRecord::Step {
                step, phase, report, ..
            } => Some((*step, *phase, report)),
            _ => None,
        })
    }

    /// Totals of every step in `phase`, in order.
    pub fn phase_totals(&self, phase: Phase) -> Vec<f64> {
        self.steps()
            .filter(|(_, p, _)| *p == phase)
            .map(|(_, _, r)| r.total)
            .collect()
    }

    pub fn to_text(&self) -> String {
        self.records.iter().map(|r| format!("{r}\n")).collect()
    }
}

/// Owns the model, the three optimizer states and the training rng.
pub struct Trainer {
    model: Model,
    variant: Variant,
    sched: TrainSchedule,
    loss: LossConfig,
    opt_vae: Adam,
    opt_dis: Option<Adam>,
    opt_enc: Adam,
    rng: ChaCha8Rng,
    step: u64,
    routing_checks: usize,
}

impl Trainer {
    /// Builds a fresh model for `variant` seeded from `sched.seed`.
    pub fn new(config: ModelConfig, sched: TrainSchedule, variant: Variant) -> Result<Self> {
        sched.validate()?;
        let config = config.with_discriminator(variant.discriminator());
        let model = Model::new(config, sched.seed)?;
        Self::from_model(model, sched, variant)
    }

    pub fn from_model(model: Model, sched: TrainSchedule, variant: Variant) -> Result<Self> {
        if model.config().discriminator != variant.discriminator() {
            return Err(Error::Config(format!(
                "variant {variant} needs discriminator '{}', model has '{}'",
                variant.discriminator(),
                model.config().discriminator
            )));
        }
        let params = model.params();
        let mut vae_vars = params.vars(ParamGroup::Encoder);
        vae_vars.extend(params.vars(ParamGroup::Decoder));
        let opt_vae = Adam::new(vae_vars)?;
        let opt_enc = Adam::new(params.vars(ParamGroup::Encoder))?;
        let opt_dis = if model.has_discriminator() {
            Some(Adam::new(params.vars(ParamGroup::Discriminator))?)
        } else {
            None
        };
        let mut rng = ChaCha8Rng::seed_from_u64(sched.seed);
        rng.set_stream(1);
        let loss = LossConfig {
            alpha: model.config().alpha,
            confusion: sched.confusion,
        };
        Ok(Self {
            model,
            variant,
            sched,
            loss,
            opt_vae,
            opt_dis,
            opt_enc,
            rng,
            step: 0,
            routing_checks: 0,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn schedule(&self) -> &TrainSchedule {
        &self.sched
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Number of parameter-group routing checks performed so far.
    pub fn routing_checks(&self) -> usize {
        self.routing_checks
    }

    /// The corruption applied in adversarial phases.
    pub fn corruption_spec(&self) -> Result<CorruptionSpec> {
        let method = self
            .variant
            .corruption()
            .ok_or_else(|| Error::Contract("non-dat run has no discriminator".into()))?;
        Ok(match method {
            CorruptionMethod::Transpose => CorruptionSpec::transpose(self.sched.seed),
            CorruptionMethod::Mask => CorruptionSpec::mask(self.sched.mask_rate, self.sched.seed),
            CorruptionMethod::None => CorruptionSpec::none(),
        })
    }

    fn routed<F>(&mut self, phase: Phase, f: F) -> Result<LossReport>
    where
        F: FnOnce(&mut Self) -> Result<LossReport>,
    {
        let every = self.sched.routing_check_every;
        let check = every > 0 && self.step % every as u64 == 0;
        let before = if check {
            Some(
                ParamGroup::ALL
                    .iter()
                    .map(|&g| self.model.params().group_hash(g))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        let step = self.step;
        let report = f(self).map_err(|e| match e {
            Error::NonFinite(msg) => {
                Error::NonFinite(format!("step {step} phase {phase}: {msg}"))
            }
            other => other,
        })?;
        if let Some(before) = before {
            self.routing_checks += 1;
            for (idx, &g) in ParamGroup::ALL.iter().enumerate() {
                if phase.updates().contains(&g) {
                    continue;
                }
                if self.model.params().group_hash(g)? != before[idx] {
                    return Err(Error::Contract(format!(
                        "step {step} phase {phase} modified frozen group {g}"
                    )));
                }
            }
        }
        self.step += 1;
        Ok(report)
    }

    /// One VAE update of the encoder and decoder.
    pub fn train_step_vae(&mut self, batch: &GridBatch, lr: f64, tf: f64) -> Result<LossReport> {
        self.routed(Phase::Vae, |t| {
            let frozen = Frozen {
                discriminator: true,
                ..Frozen::NONE
            };
            let cond = t.model.condition(&batch.melodies, frozen)?;
            let post = t.model.encode_batch(&batch.chords, &cond, frozen)?;
            let z = reparameterize(&post, Some(&mut t.rng))?;
            let teacher = Teacher {
                targets: &batch.chord_tokens,
                rate: tf,
            };
            let out = t
                .model
                .decode_batch(&z, &cond, Some(teacher), Some(&mut t.rng), frozen)?;
            let (loss, report) = vae_objective(&out.logits, &batch.chord_tokens, &post, &t.loss)?;
            let grads = loss.backward()?;
            t.opt_vae.step(&grads, lr, t.sched.grad_clip)?;
            Ok(report)
        })
    }

    fn corrupted_batch(&mut self, batch: &GridBatch) -> Result<Tensor> {
        let spec = self.corruption_spec()?;
        let items = batch
            .melody_grids
            .iter()
            .map(|m| corrupt(m, &spec, &mut self.rng).map(|(c, _)| c))
            .collect::<Result<Vec<CorruptedMelody>>>()?;
        corrupted_tensor(&items)
    }

    /// One discriminator update with the encoder held fixed.
    pub fn train_step_disc(&mut self, batch: &GridBatch, lr: f64) -> Result<LossReport> {
        if !self.variant.is_adversarial() {
            return Err(Error::Contract("non-dat run has no discriminator".into()));
        }
        self.routed(Phase::Disc, |t| {
            let frozen = Frozen {
                encoder: true,
                decoder: true,
                discriminator: false,
            };
            let cond = t.model.condition(&batch.melodies, frozen)?;
            let post = t.model.encode_batch(&batch.chords, &cond, frozen)?;
            let z = reparameterize(&post, Some(&mut t.rng))?.detach();
            let corrupted = t.corrupted_batch(batch)?;
            let logits = t
                .model
                .discriminate_batch(&z, &corrupted, Some(&mut t.rng), frozen)?;
            let (loss, report) = disc_objective(&logits, &batch.melody_tokens)?;
            let grads = loss.backward()?;
            t.opt_dis
                .as_mut()
                .expect("adversarial variant has a discriminator")
                .step(&grads, lr, t.sched.grad_clip)?;
            Ok(report)
        })
    }

    /// One confusion update of the encoder alone.
    pub fn train_step_enc_adv(&mut self, batch: &GridBatch, lr: f64) -> Result<LossReport> {
        if !self.variant.is_adversarial() {
            return Err(Error::Contract("non-dat run has no discriminator".into()));
        }
        self.routed(Phase::EncAdv, |t| {
            let frozen = Frozen {
                encoder: false,
                decoder: true,
                discriminator: true,
            };
            let cond = t.model.condition(&batch.melodies, frozen)?;
            let post = t.model.encode_batch(&batch.chords, &cond, frozen)?;
            let z = reparameterize(&post, Some(&mut t.rng))?;
            let corrupted = t.corrupted_batch(batch)?;
            let logits = t
                .model
                .discriminate_batch(&z, &corrupted, Some(&mut t.rng), frozen)?;
            let (loss, report) = confusion_objective(&logits, &batch.melody_tokens, &post, &t.loss)?;
            let grads = loss.backward()?;
            t.opt_enc.step(&grads, lr, t.sched.grad_clip)?;
            Ok(report)
        })
    }

    /// Validation losses in eval mode: posterior means, greedy decoding and a
    /// fixed corruption stream.
    pub fn validate(&self, samples: &[&Sample], epoch: usize) -> Result<Option<(f64, f64, Option<f64>)>> {
        if samples.is_empty() {
            return Ok(None);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.sched.seed);
        rng.set_stream(3 + epoch as u64);
        let (mut recon, mut kl, mut disc, mut n) = (0.0, 0.0, 0.0, 0usize);
        for chunk in samples.chunks(self.sched.batch_size.max(1)) {
            let batch = GridBatch::new(chunk.iter().map(|s| (&s.chord, &s.melody)))?;
            let cond = self.model.condition(&batch.melodies, Frozen::ALL)?;
            let post = self.model.encode_batch(&batch.chords, &cond, Frozen::ALL)?;
            let out = self
                .model
                .decode_batch(&post.mean, &cond, None, None, Frozen::ALL)?;
            let (_, r) = vae_objective(&out.logits, &batch.chord_tokens, &post, &self.loss)?;
            let w = chunk.len() as f64;
            recon += r.recon_chord.unwrap_or(0.0) * w;
            kl += r.kl.unwrap_or(0.0) * w;
            if self.variant.is_adversarial() {
                let spec = self.corruption_spec()?;
                let items = batch
                    .melody_grids
                    .iter()
                    .map(|m| corrupt(m, &spec, &mut rng).map(|(c, _)| c))
                    .collect::<Result<Vec<_>>>()?;
                let logits = self.model.discriminate_batch(
                    &post.mean,
                    &corrupted_tensor(&items)?,
                    None,
                    Frozen::ALL,
                )?;
                disc += disc_objective(&logits, &batch.melody_tokens)?.1.total * w;
            }
            n += chunk.len();
        }
        let n = n as f64;
        let disc = self.variant.is_adversarial().then_some(disc / n);
        Ok(Some((recon / n, kl / n, disc)))
    }
}

/// Shuffled, endlessly reshuffled stream of training-batch indices.
struct BatchStream {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
    batch: usize,
}

impl BatchStream {
    fn new(n: usize, batch: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self {
            order,
            pos: 0,
            rng,
            batch: batch.min(n),
        }
    }

    fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Result of a full training run.
pub struct TrainOutcome {
    pub model: Model,
    pub log: MetricsLog,
    pub checkpoints: Vec<PathBuf>,
    pub routing_checks: usize,
}

/// Batches drawn per epoch.
pub fn batches_per_epoch(corpus: &CorpusFile, sched: &TrainSchedule) -> usize {
    let train: Vec<&Sample> = corpus.samples(Split::Train).collect();
    let basis = match sched.epoch_basis {
        EpochBasis::Augmented => train.len(),
        EpochBasis::Raw => train.iter().filter(|s| s.transposition_tag == 0).count(),
    };
    let batch = sched.batch_size.min(train.len()).max(1);
    basis.div_ceil(batch).max(1)
}

/// Runs the full alternating schedule. With `out_dir`, writes
/// `metrics.log` as it goes and `epoch-NNN.ckpt` after every epoch.
pub fn train(
    corpus: &CorpusFile,
    config: ModelConfig,
    sched: &TrainSchedule,
    variant: Variant,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    train_epochs(corpus, config, sched, variant, out_dir, sched.epochs)
}

/// Like [`train`] but stops after the first `run` epochs of the schedule.
/// Learning-rate and teacher-forcing decay still follow the full schedule.
pub fn train_epochs(
    corpus: &CorpusFile,
    config: ModelConfig,
    sched: &TrainSchedule,
    variant: Variant,
    out_dir: Option<&Path>,
    run: usize,
) -> Result<TrainOutcome> {
    sched.validate()?;
    if run == 0 || run > sched.epochs {
        return Err(Error::Schedule(format!("cannot run {run} of {} epochs", sched.epochs)));
    }
    let train_set: Vec<&Sample> = corpus.samples(Split::Train).collect();
    let val_set: Vec<&Sample> = corpus.samples(Split::Val).collect();
    if train_set.is_empty() {
        return Err(Error::Empty("corpus has no training samples".into()));
    }
    if val_set.is_empty() {
        return Err(Error::Empty("corpus has no validation samples".into()));
    }
    let mut log_file: Option<File> = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("metrics.log");
            Some(
                OpenOptions::new()
                    .create(true)
                    .write(true)
                    .truncate(true)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?,
            )
        }
        None => None,
    };
    let mut log = MetricsLog::default();
    let mut push = |rec: MetricsRecord, log: &mut MetricsLog| -> Result<()> {
        if let (Some(f), Some(dir)) = (log_file.as_mut(), out_dir) {
            writeln!(f, "{rec}").map_err(|e| Error::io(dir.join("metrics.log"), e))?;
        }
        log.records.push(rec);
        Ok(())
    };

    let mut trainer = Trainer::new(config, sched.clone(), variant)?;
    let mut stream = BatchStream::new(train_set.len(), sched.batch_size, sched.seed);
    let make_batch = |idx: &[usize]| GridBatch::new(idx.iter().map(|&i| (&train_set[i].chord, &train_set[i].melody)));
    let phases = cycle_phases(sched, variant);
    let per_epoch = batches_per_epoch(corpus, sched);
    let mut cursor = 0usize;
    let mut recent_vae: Vec<Vec<usize>> = Vec::new();
    let mut reuse_pos = 0usize;
    let mut checkpoints = Vec::new();

    for epoch in 0..run {
        let lr = sched.lr_at(epoch)?;
        let tf = sched.tf_at(epoch)?;
        let mut drawn = 0usize;
        while drawn < per_epoch {
            let phase = phases[cursor % phases.len()];
            if cursor % phases.len() == 0 {
                recent_vae.clear();
                reuse_pos = 0;
            }
            cursor += 1;
            let idx = if phase != Phase::Vae && sched.reuse_batches && !recent_vae.is_empty() {
                let b = recent_vae[reuse_pos % recent_vae.len()].clone();
                reuse_pos += 1;
                b
            } else {
                drawn += 1;
                let b = stream.next_batch();
                if phase == Phase::Vae {
                    recent_vae.push(b.clone());
                }
                b
            };
            let batch = make_batch(&idx)?;
            let step = trainer.steps_taken();
            let report = match phase {
                Phase::Vae => trainer.train_step_vae(&batch, lr, tf)?,
                Phase::Disc => trainer.train_step_disc(&batch, lr)?,
                Phase::EncAdv => trainer.train_step_enc_adv(&batch, lr)?,
            };
            log::debug!("step {step} {phase} {}", report.to_fields());
            push(
                MetricsRecord::Step {
                    step,
                    epoch,
                    phase,
                    lr,
                    tf,
                    report,
                },
                &mut log,
            )?;
        }
        if let Some((val_recon, val_kl, val_disc)) = trainer.validate(&val_set, epoch)? {
            push(
                MetricsRecord::Epoch {
                    epoch,
                    val_recon,
                    val_kl,
                    val_disc,
                },
                &mut log,
            )?;
        }
        if let Some(dir) = out_dir {
            let path = dir.join(format!("epoch-{epoch:03}.ckpt"));
            save_checkpoint(trainer.model(), trainer.steps_taken(), &path)?;
            checkpoints.push(path);
        }
        log::info!("{variant} epoch {}/{} done", epoch + 1, sched.epochs);
    }
    let routing_checks = trainer.routing_checks();
    Ok(TrainOutcome {
        model: trainer.into_model(),
        log,
        checkpoints,
        routing_checks,
    })
}

/// Centered moving average with a window of `w` samples (truncated at the ends).
pub fn smooth(values: &[f64], w: usize) -> Vec<f64> {
    let half = w / 2;
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(values.len());
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{slice_snippets, split_songs, synth_corpus};

    fn tiny_corpus(songs: usize) -> CorpusFile {
        let sheets = synth_corpus(songs, 8, 3).unwrap();
        let samples: Vec<Sample> = sheets.iter().flat_map(|s| slice_snippets(s).unwrap()).collect();
        split_songs(&samples, 0.2, 1).unwrap()
    }

    fn tiny_sched() -> TrainSchedule {
        TrainSchedule {
            batch_size: 8,
            epochs: 2,
            routing_check_every: 1,
            ..TrainSchedule::default()
        }
    }

    fn batch_of(corpus: &CorpusFile, n: usize) -> GridBatch {
        GridBatch::new(corpus.samples(Split::Train).take(n).map(|s| (&s.chord, &s.melody))).unwrap()
    }

    #[test]
    fn schedule_endpoints() {
        let s = TrainSchedule::paper();
        assert!((s.lr_at(0).unwrap() - 1e-3).abs() < 1e-15);
        assert!((s.lr_at(19).unwrap() - 1e-5).abs() < 1e-15);
        let expect = 1e-3 * (1e-2f64).powf(9.0 / 19.0);
        assert!((s.lr_at(9).unwrap() - expect).abs() < 1e-12);
        assert!((s.lr_at(9).unwrap() - 1.128e-4).abs() < 1e-7);
        assert_eq!(s.tf_at(0).unwrap(), 0.8);
        assert!(s.tf_at(18).unwrap() < 0.02);
        assert_eq!(s.tf_at(19).unwrap(), 0.0);
        assert!(s.lr_at(20).is_err());
        let short = TrainSchedule {
            epochs: 1,
            ..TrainSchedule::paper()
        };
        assert!(matches!(short.lr_at(0), Err(Error::Schedule(_))));
    }

    #[test]
    fn decays_are_monotone() {
        let s = TrainSchedule::paper();
        for e in 1..s.epochs {
            assert!(s.lr_at(e).unwrap() < s.lr_at(e - 1).unwrap());
            assert!(s.tf_at(e).unwrap() < s.tf_at(e - 1).unwrap());
        }
    }

    #[test]
    fn paper_cycle() {
        let phases = cycle_phases(&TrainSchedule::paper(), Variant::Dat);
        let mut expect = vec![Phase::Vae; 10];
        expect.extend([Phase::Disc; 5]);
        expect.extend([Phase::EncAdv; 5]);
        assert_eq!(phases, expect);
        assert_eq!(cycle_phases(&TrainSchedule::paper(), Variant::NonDat), vec![Phase::Vae; 10]);
    }

    #[test]
    fn schedule_keys_round_trip() {
        let mut s = TrainSchedule::default();
        let mut t = TrainSchedule {
            i: 3,
            epoch_basis: EpochBasis::Raw,
            confusion: ConfusionTarget::Uniform,
            reuse_batches: true,
            ..TrainSchedule::default()
        };
        for (k, v) in t.entries() {
            assert!(s.set(k, &v).unwrap());
        }
        assert_eq!(s, t);
        assert!(!t.set("nope", "1").unwrap());
        assert!(t.set("i", "x").is_err());
    }

    #[test]
    fn step_routing_and_zero_lr() {
        let corpus = tiny_corpus(6);
        let batch = batch_of(&corpus, 4);
        let mut t = Trainer::new(ModelConfig::tiny(), tiny_sched(), Variant::Dat).unwrap();
        let hashes = |t: &Trainer| {
            ParamGroup::ALL
                .map(|g| t.model().params().group_hash(g).unwrap())
        };
        let h0 = hashes(&t);
        t.train_step_vae(&batch, 0.0, 1.0).unwrap();
        assert_eq!(hashes(&t), h0);
        t.train_step_vae(&batch, 1e-3, 1.0).unwrap();
        let h1 = hashes(&t);
        assert_ne!(h1[0], h0[0]);
        assert_ne!(h1[1], h0[1]);
        assert_eq!(h1[2], h0[2]);
        t.train_step_disc(&batch, 1e-3).unwrap();
        let h2 = hashes(&t);
        assert_eq!(h2[..2], h1[..2]);
        assert_ne!(h2[2], h1[2]);
        let r = t.train_step_enc_adv(&batch, 1e-3).unwrap();
        let h3 = hashes(&t);
        assert_ne!(h3[0], h2[0]);
        assert_eq!(h3[1..], h2[1..]);
        assert!(r.kl.is_some() && r.confusion.is_some());
        assert_eq!(t.routing_checks(), 4);
    }

    #[test]
    fn non_dat_rejects_adversarial_steps() {
        let corpus = tiny_corpus(6);
        let batch = batch_of(&corpus, 2);
        let mut t = Trainer::new(ModelConfig::tiny(), tiny_sched(), Variant::NonDat).unwrap();
        assert!(matches!(t.train_step_disc(&batch, 1e-3), Err(Error::Contract(_))));
        assert!(matches!(t.train_step_enc_adv(&batch, 1e-3), Err(Error::Contract(_))));
    }

    #[test]
    fn overfits_one_batch() {
        let corpus = tiny_corpus(6);
        let batch = batch_of(&corpus, 8);
        let mut t = Trainer::new(ModelConfig::tiny(), tiny_sched(), Variant::NonDat).unwrap();
        let first = t.train_step_vae(&batch, 3e-3, 1.0).unwrap().recon_chord.unwrap();
        let mut last = first;
        for _ in 0..49 {
            last = t.train_step_vae(&batch, 3e-3, 1.0).unwrap().recon_chord.unwrap();
        }
        assert!(last < first * 0.7, "{first} -> {last}");
    }

    #[test]
    fn train_is_deterministic_and_logs_phases() {
        let corpus = tiny_corpus(6);
        let sched = TrainSchedule {
            i: 2,
            k: 1,
            l: 1,
            ..tiny_sched()
        };
        let a = train(&corpus, ModelConfig::tiny(), &sched, Variant::Dat, None).unwrap();
        let b = train(&corpus, ModelConfig::tiny(), &sched, Variant::Dat, None).unwrap();
        assert_eq!(a.log.to_text(), b.log.to_text());
        let phases: Vec<Phase> = a.log.steps().map(|(_, p, _)| p).collect();
        assert_eq!(&phases[..4], &[Phase::Vae, Phase::Vae, Phase::Disc, Phase::EncAdv]);
        let steps: Vec<u64> = a.log.steps().map(|(s, _, _)| s).collect();
        assert!(steps.windows(2).all(|w| w[1] > w[0]));
        let n = train(&corpus, ModelConfig::tiny(), &sched, Variant::NonDat, None).unwrap();
        assert!(n.log.steps().all(|(_, p, _)| p == Phase::Vae));
    }

    #[test]
    fn smoothing_window() {
        assert_eq!(smooth(&[1.0, 2.0, 3.0], 3), vec![1.5, 2.0, 2.5]);
    }
}
