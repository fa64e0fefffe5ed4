//! Times individual training phases on the desk-scale configuration.

use std::time::Instant;

use harmonia::corpus::{slice_snippets, split_songs, synth_corpus, Sample, Split};
use harmonia::model::{GridBatch, ModelConfig};
use harmonia::training::{TrainSchedule, Trainer, Variant};

fn main() -> harmonia::Result<()> {
    let batch_size: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(64);
    let samples: Vec<Sample> = synth_corpus(40, 16, 1)?
        .iter()
        .flat_map(|s| slice_snippets(s).unwrap())
        .collect();
    let corpus = split_songs(&samples, 0.1, 1)?;
    let batch = GridBatch::new(
        corpus
            .samples(Split::Train)
            .take(batch_size)
            .map(|s| (&s.chord, &s.melody)),
    )?;
    let sched = TrainSchedule {
        routing_check_every: 0,
        ..TrainSchedule::default()
    };
    let mut t = Trainer::new(ModelConfig::tiny(), sched, Variant::Dat)?;
    let n = 10;
    let t0 = Instant::now();
    for _ in 0..n {
        t.train_step_vae(&batch, 1e-3, 0.5)?;
    }
    let vae = t0.elapsed().as_secs_f64() / n as f64;
    let t0 = Instant::now();
    for _ in 0..n {
        t.train_step_disc(&batch, 1e-3)?;
    }
    let disc = t0.elapsed().as_secs_f64() / n as f64;
    let t0 = Instant::now();
    for _ in 0..n {
        t.train_step_enc_adv(&batch, 1e-3)?;
    }
    let enc = t0.elapsed().as_secs_f64() / n as f64;
    println!("batch {batch_size}: vae {vae:.3}s disc {disc:.3}s enc_adv {enc:.3}s");
    Ok(())
}
