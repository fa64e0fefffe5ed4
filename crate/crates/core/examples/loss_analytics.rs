//! Evaluates the three training losses and the Gaussian KL at inputs with
//! known closed-form values.
//!
//! ```text
//! cargo run --example loss_analytics
//! ```

use candle_core::{DType, Device, Tensor};
use harmonia::encodings::{ChordGrid, MelodyGrid, BEATS, CHORD_VOCAB, MELODY_VOCAB, SLOTS, STEPS};
use harmonia::model::Posterior;
use harmonia::objectives::{confusion_loss, disc_loss, kl_std_normal, vae_loss, ConfusionTarget, LossConfig};

fn main() -> harmonia::Result<()> {
    let dev = Device::Cpu;
    let chord = ChordGrid::all_pad();
    let melody = MelodyGrid::all_rest();
    let prior = Posterior {
        mean: vec![0.0; 128],
        log_variance: vec![0.0; 128],
    };
    let cfg = LossConfig::default();

    let chord_logits = Tensor::zeros((BEATS, SLOTS, CHORD_VOCAB), DType::F64, &dev)?;
    let melody_logits = Tensor::zeros((STEPS, MELODY_VOCAB), DType::F64, &dev)?;
    println!("uniform chord logits:  {}", vae_loss(&chord_logits, &chord, &prior, &cfg)?.to_fields());
    println!("uniform melody logits: {}", disc_loss(&melody_logits, &melody)?.to_fields());
    println!("ln 13 = {:.6}, ln 122 = {:.6}", 13f64.ln(), 122f64.ln());

    for confusion in [ConfusionTarget::Complement, ConfusionTarget::Uniform] {
        let cfg = LossConfig { confusion, ..cfg };
        let r = confusion_loss(&melody_logits, &melody, &prior, &cfg)?;
        println!("{confusion} confusion at uniform logits: {}", r.to_fields());
    }

    for (mean, log_var) in [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)] {
        let post = Posterior {
            mean: vec![mean; 128],
            log_variance: vec![log_var; 128],
        };
        println!("KL(mean={mean}, log_var={log_var}) = {:.6}", kl_std_normal(&post)?);
    }
    Ok(())
}
