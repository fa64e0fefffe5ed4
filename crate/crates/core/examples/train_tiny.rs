//! Trains a small model of any variant on a synthetic corpus, writing
//! per-epoch checkpoints and `metrics.log` to a run directory.
//!
//! ```text
//! cargo run --release --example train_tiny -- [variant] [run-dir]
//! ```

use std::path::PathBuf;

use harmonia::corpus::{slice_snippets, split_songs, synth_corpus};
use harmonia::model::ModelConfig;
use harmonia::training::{train, EpochBasis, Phase, TrainSchedule, Variant};

fn main() -> harmonia::Result<()> {
    let mut args = std::env::args().skip(1);
    let variant: Variant = args.next().as_deref().unwrap_or("dat").parse()?;
    let dir: PathBuf = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join(format!("harmonia-{variant}")));

    let mut samples = Vec::new();
    for sheet in synth_corpus(30, 16, 1)? {
        samples.extend(slice_snippets(&sheet)?);
    }
    let corpus = split_songs(&samples, 0.1, 1)?;
    let sched = TrainSchedule {
        batch_size: 32,
        epochs: 2,
        epoch_basis: EpochBasis::Raw,
        seed: 1,
        ..TrainSchedule::default()
    };
    let out = train(&corpus, ModelConfig::tiny(), &sched, variant, Some(&dir))?;

    for phase in [Phase::Vae, Phase::Disc, Phase::EncAdv] {
        let totals = out.log.phase_totals(phase);
        if let (Some(first), Some(last)) = (totals.first(), totals.last()) {
            println!("{phase:8} {:3} steps, loss {first:.4} -> {last:.4}", totals.len());
        }
    }
    println!("routing checks passed: {}", out.routing_checks);
    for ckpt in &out.checkpoints {
        println!("checkpoint {}", ckpt.display());
    }
    println!("metrics log {}", dir.join("metrics.log").display());
    Ok(())
}
