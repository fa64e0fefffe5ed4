//! Training losses: the VAE objective, the discriminator's denoising loss and
//! the encoder's confusion loss, plus the closed-form Gaussian KL.
//!
//! Each loss has a batched tensor form used by training (differentiable,
//! returns a scalar tensor with its [`LossReport`]) and a single-sample form
//! over the domain types.

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Tensor, D};

use crate::encodings::{ChordGrid, MelodyGrid, CHORD_VOCAB, MELODY_VOCAB, SLOTS, STEPS};
use crate::error::{Error, Result};
use crate::model::{log_softmax_last, ModelConfig, Posterior, PosteriorTensors};

/// Target distribution for the encoder's confusion loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConfusionTarget {
    /// Uniform over every token except the true one.
    #[default]
    Complement,
    /// Uniform over the whole vocabulary (entropy maximization).
    Uniform,
}

impl fmt::Display for ConfusionTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConfusionTarget::Complement => "complement",
            ConfusionTarget::Uniform => "uniform",
        })
    }
}

impl FromStr for ConfusionTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "complement" => Ok(Self::Complement),
            "uniform" => Ok(Self::Uniform),
            other => Err(Error::Config(format!("unknown confusion target '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// KL weight.
    pub alpha: f64,
    pub confusion: ConfusionTarget,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            confusion: ConfusionTarget::Complement,
        }
    }
}

impl LossConfig {
    pub fn from_model(cfg: &ModelConfig) -> Self {
        Self {
            alpha: cfg.alpha,
            ..Self::default()
        }
    }
}

/// Scalar values of one loss evaluation. Absent components are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub total: f64,
    pub recon_chord: Option<f64>,
    pub kl: Option<f64>,
    pub recon_melody: Option<f64>,
    pub confusion: Option<f64>,
    /// Token positions averaged over.
    pub n_tokens: usize,
}

impl LossReport {
    pub fn components(&self) -> Vec<(&'static str, f64)> {
        [
            ("recon_chord", self.recon_chord),
            ("kl", self.kl),
            ("recon_melody", self.recon_melody),
            ("confusion", self.confusion),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.map(|v| (k, v)))
        .collect()
    }

    /// `total=… recon_chord=… … n_tokens=…` with shortest round-trip floats.
    pub fn to_fields(&self) -> String {
        let mut s = format!("total={}", self.total);
        for (k, v) in self.components() {
            s.push_str(&format!(" {k}={v}"));
        }
        s.push_str(&format!(" n_tokens={}", self.n_tokens));
        s
    }

    fn check_finite(self) -> Result<Self> {
        let bad = std::iter::once(("total", self.total))
            .chain(self.components())
            .find(|(_, v)| !v.is_finite());
        match bad {
            Some((k, v)) => Err(Error::NonFinite(format!("{k} = {v}"))),
            None => Ok(self),
        }
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn targets_tensor(targets: &[u32], dev: &candle_core::Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(targets.to_vec(), (targets.len(), 1), dev)?)
}

/// Batch-mean of `0.5 · Σ_d (μ² + σ² − 1 − log σ²)`.
pub fn kl_tensor(post: &PosteriorTensors) -> Result<Tensor> {
    let per = ((post.mean.sqr()? + post.log_var.exp()?)? - 1.0)?
        .sub(&post.log_var)?
        .sum(D::Minus1)?;
    Ok((per.mean_all()? * 0.5)?)
}

/// Mean cross-entropy of `logits` `[n, vocab]` against `targets`.
pub fn cross_entropy(logits: &Tensor, targets: &[u32]) -> Result<Tensor> {
    let logp = log_softmax_last(logits)?;
    let picked = logp.gather(&targets_tensor(targets, logits.device())?, 1)?;
    Ok(picked.mean_all()?.neg()?)
}

/// Mean cross-entropy against the normalized complement of the one-hot
/// target, or against the uniform distribution.
pub fn confusion_cross_entropy(logits: &Tensor, targets: &[u32], kind: ConfusionTarget) -> Result<Tensor> {
    let vocab = logits.dim(D::Minus1)?;
    let logp = log_softmax_last(logits)?;
    let all = logp.sum(D::Minus1)?;
    let per = match kind {
        ConfusionTarget::Complement => {
            let truth = logp
                .gather(&targets_tensor(targets, logits.device())?, 1)?
                .squeeze(1)?;
            ((all - truth)? / (vocab - 1) as f64)?
        }
        ConfusionTarget::Uniform => (all / vocab as f64)?,
    };
    Ok(per.mean_all()?.neg()?)
}

fn check_targets(targets: &[u32], expected: usize, vocab: usize, what: &str) -> Result<()> {
    if targets.len() != expected {
        return Err(Error::Contract(format!(
            "{what}: {} targets, expected {expected}",
            targets.len()
        )));
    }
    if let Some(t) = targets.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::Contract(format!("{what}: target token {t} outside vocabulary {vocab}")));
    }
    Ok(())
}

/// Batched VAE objective over logits `[batch, 32, 4, 13]`.
pub fn vae_objective(
    logits: &Tensor,
    targets: &[u32],
    post: &PosteriorTensors,
    cfg: &LossConfig,
) -> Result<(Tensor, LossReport)> {
    let (batch, beats, slots, vocab) = logits.dims4()?;
    if slots != SLOTS || vocab != CHORD_VOCAB {
        return Err(Error::Contract(format!("chord logits shape {:?}", logits.dims())));
    }
    let n = batch * beats * slots;
    check_targets(targets, n, CHORD_VOCAB, "vae_loss")?;
    let recon = cross_entropy(&logits.reshape((n, vocab))?, targets)?;
    let kl = kl_tensor(post)?;
    let total = (&recon + (&kl * cfg.alpha)?)?;
    let report = LossReport {
        total: scalar(&total)?,
        recon_chord: Some(scalar(&recon)?),
        kl: Some(scalar(&kl)?),
        n_tokens: n,
        ..Default::default()
    }
    .check_finite()?;
    Ok((total, report))
}

/// Batched discriminator loss over logits `[batch, 128, 122]` against clean
/// melody tokens.
pub fn disc_objective(logits: &Tensor, targets: &[u32]) -> Result<(Tensor, LossReport)> {
    let (batch, steps, vocab) = logits.dims3()?;
    if vocab != MELODY_VOCAB {
        return Err(Error::Contract(format!("melody logits shape {:?}", logits.dims())));
    }
    let n = batch * steps;
    check_targets(targets, n, MELODY_VOCAB, "disc_loss")?;
    let recon = cross_entropy(&logits.reshape((n, vocab))?, targets)?;
    let v = scalar(&recon)?;
    let report = LossReport {
        total: v,
        recon_melody: Some(v),
        n_tokens: n,
        ..Default::default()
    }
    .check_finite()?;
    Ok((recon, report))
}

/// Batched encoder confusion loss: confusion cross-entropy plus `α·KL`.
pub fn confusion_objective(
    logits: &Tensor,
    targets: &[u32],
    post: &PosteriorTensors,
    cfg: &LossConfig,
) -> Result<(Tensor, LossReport)> {
    let (batch, steps, vocab) = logits.dims3()?;
    if vocab != MELODY_VOCAB {
        return Err(Error::Contract(format!("melody logits shape {:?}", logits.dims())));
    }
    let n = batch * steps;
    check_targets(targets, n, MELODY_VOCAB, "confusion_loss")?;
    let conf = confusion_cross_entropy(&logits.reshape((n, vocab))?, targets, cfg.confusion)?;
    let kl = kl_tensor(post)?;
    let total = (&conf + (&kl * cfg.alpha)?)?;
    let report = LossReport {
        total: scalar(&total)?,
        confusion: Some(scalar(&conf)?),
        kl: Some(scalar(&kl)?),
        n_tokens: n,
        ..Default::default()
    }
    .check_finite()?;
    Ok((total, report))
}

fn posterior_tensors(post: &Posterior, dtype: DType) -> Result<PosteriorTensors> {
    if post
        .mean
        .iter()
        .chain(&post.log_variance)
        .any(|v| !v.is_finite())
    {
        return Err(Error::NonFinite("posterior contains a non-finite value".into()));
    }
    PosteriorTensors::from_posterior(post, dtype)
}

/// `0.5 · Σ_d (μ_d² + σ_d² − 1 − log σ_d²)`.
pub fn kl_std_normal(post: &Posterior) -> Result<f64> {
    let pt = posterior_tensors(post, DType::F64)?;
    scalar(&kl_tensor(&pt)?)
}

fn batched(logits: &Tensor, dims: &[usize]) -> Result<Tensor> {
    if logits.dims() != dims {
        return Err(Error::Contract(format!(
            "logits shape {:?}, expected {dims:?}",
            logits.dims()
        )));
    }
    Ok(logits.unsqueeze(0)?)
}

/// VAE loss for one sample: logits `[32, 4, 13]`.
pub fn vae_loss(chord_logits: &Tensor, target: &ChordGrid, post: &Posterior, cfg: &LossConfig) -> Result<LossReport> {
    let logits = batched(chord_logits, &[crate::encodings::BEATS, SLOTS, CHORD_VOCAB])?;
    let targets: Vec<u32> = target.tokens().into_iter().map(u32::from).collect();
    let pt = posterior_tensors(post, logits.dtype())?;
    Ok(vae_objective(&logits, &targets, &pt, cfg)?.1)
}

/// Discriminator loss for one sample: logits `[128, 122]`.
pub fn disc_loss(melody_logits: &Tensor, target: &MelodyGrid) -> Result<LossReport> {
    let logits = batched(melody_logits, &[STEPS, MELODY_VOCAB])?;
    let targets: Vec<u32> = target.tokens().into_iter().map(u32::from).collect();
    Ok(disc_objective(&logits, &targets)?.1)
}

/// Encoder confusion loss for one sample: logits `[128, 122]`.
pub fn confusion_loss(
    melody_logits: &Tensor,
    target: &MelodyGrid,
    post: &Posterior,
    cfg: &LossConfig,
) -> Result<LossReport> {
    let logits = batched(melody_logits, &[STEPS, MELODY_VOCAB])?;
    let targets: Vec<u32> = target.tokens().into_iter().map(u32::from).collect();
    let pt = posterior_tensors(post, logits.dtype())?;
    Ok(confusion_objective(&logits, &targets, &pt, cfg)?.1)
}
