//! Re-harmonizes the melody of one song in the harmonic style of another:
//! encodes chords of A under melody A, then decodes under melody B.
//!
//! ```text
//! cargo run --release --example swap_harmonize -- [checkpoint]
//! ```
//! Without a checkpoint a small DAT model is trained first.

use harmonia::corpus::{slice_snippets, split_songs, synth_corpus, Sample, Split};
use harmonia::encodings::decode_chord_grid;
use harmonia::evaluation::{harmony_histogram, swap_harmonize, Bucket};
use harmonia::model::{load_checkpoint, Model, ModelConfig};
use harmonia::training::{train, EpochBasis, TrainSchedule, Variant};

fn spans(label: &str, grid: &harmonia::encodings::ChordGrid) {
    let text: Vec<String> = decode_chord_grid(grid)
        .iter()
        .map(|s| format!("{}:{:?}", s.onset_beat, s.pitch_classes))
        .collect();
    println!("{label:10} {}", text.join(" "));
}

fn main() -> harmonia::Result<()> {
    let mut samples = Vec::new();
    for sheet in synth_corpus(30, 16, 2)? {
        samples.extend(slice_snippets(&sheet)?);
    }
    let corpus = split_songs(&samples, 0.2, 2)?;
    let model: Model = match std::env::args().nth(1) {
        Some(path) => load_checkpoint(path.as_ref(), None)?.0,
        None => {
            let sched = TrainSchedule {
                batch_size: 32,
                epochs: 2,
                epoch_basis: EpochBasis::Raw,
                seed: 2,
                ..TrainSchedule::default()
            };
            train(&corpus, ModelConfig::tiny(), &sched, Variant::Dat, None)?.model
        }
    };

    let val: Vec<&Sample> = corpus.samples(Split::Val).collect();
    let (a, b) = (val[0], val[val.len() - 1]);
    let generated = swap_harmonize(&model, a, &b.melody)?;
    spans("style A", &a.chord);
    spans("original B", &b.chord);
    spans("generated", &generated);

    let h = harmony_histogram([(&b.melody, &generated)]);
    let gt = harmony_histogram([(&b.melody, &b.chord)]);
    for bucket in Bucket::ALL {
        println!(
            "{:8} generated {:.3} original {:.3}",
            bucket.name(),
            h.fraction(bucket),
            gt.fraction(bucket)
        );
    }
    Ok(())
}
