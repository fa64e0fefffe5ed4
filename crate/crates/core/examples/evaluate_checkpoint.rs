//! Runs the transposition-similarity probe and the swap-harmonization
//! histograms for a checkpoint and writes the text/CSV reports.
//!
//! ```text
//! cargo run --release --example evaluate_checkpoint -- [checkpoint] [report-dir]
//! ```
//! Without a checkpoint an untrained model is probed, which is useful as a
//! reference profile.

use std::path::PathBuf;

use harmonia::corpus::{slice_snippets, split_songs, synth_corpus, Sample, Split};
use harmonia::evaluation::{evaluate, write_reports};
use harmonia::model::{load_checkpoint, Model, ModelConfig};

fn main() -> harmonia::Result<()> {
    let mut args = std::env::args().skip(1);
    let model = match args.next() {
        Some(path) if path != "-" => load_checkpoint(path.as_ref(), None)?.0,
        _ => Model::new(ModelConfig::tiny(), 0)?,
    };
    let dir: PathBuf = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("harmonia-eval"));

    let mut samples = Vec::new();
    for sheet in synth_corpus(40, 16, 3)? {
        samples.extend(slice_snippets(&sheet)?);
    }
    let corpus = split_songs(&samples, 0.25, 3)?;
    let eval: Vec<&Sample> = corpus.samples(Split::Val).collect();
    let report = evaluate(&model, &eval, 0)?;

    print!("{}", report.similarity.to_text());
    println!(
        "mean over i=1..11: {:.4}, least similar shift: {}",
        report.similarity.mean_nontrivial(),
        report.similarity.argmin_nontrivial()
    );
    println!("swapped-melody harmony histogram ({} pairs):", report.controllability.pairs);
    print!("{}", report.controllability.generated.to_text());
    println!("ground truth:");
    print!("{}", report.controllability.ground_truth.to_text());
    for path in write_reports(&report, &dir)? {
        println!("wrote {}", path.display());
    }
    Ok(())
}
