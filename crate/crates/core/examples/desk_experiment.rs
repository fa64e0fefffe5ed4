//! Trains the DAT model and its baselines on a synthetic corpus and compares
//! transposition similarity, swap-harmonization histograms and the
//! discriminator loss trend.
//!
//! ```text
//! cargo run --release --example desk_experiment -- [songs] [epochs] [variants...]
//! ```

use std::time::Instant;

use harmonia::corpus::{slice_snippets, split_songs, synth_corpus, Sample, Split};
use harmonia::evaluation::{evaluate, Bucket};
use harmonia::model::ModelConfig;
use harmonia::training::{smooth, train, EpochBasis, Phase, TrainSchedule, Variant};

fn main() -> harmonia::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let songs: usize = args.first().and_then(|s| s.parse().ok()).unwrap_or(200);
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(4);
    let variants: Vec<Variant> = if args.len() > 2 {
        args[2..].iter().map(|s| s.parse()).collect::<harmonia::Result<_>>()?
    } else {
        vec![Variant::Dat, Variant::NonDat, Variant::NonCr]
    };

    let sheets = synth_corpus(songs, 16, 7)?;
    let samples: Vec<Sample> = sheets
        .iter()
        .map(slice_snippets)
        .collect::<harmonia::Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let corpus = split_songs(&samples, 0.1, 7)?;
    let eval: Vec<&Sample> = corpus.samples(Split::Val).collect();
    println!(
        "train samples {} val samples {}",
        corpus.header.train_count, corpus.header.val_count
    );

    let mut sched = TrainSchedule {
        batch_size: 64,
        epochs,
        epoch_basis: EpochBasis::Augmented,
        seed: 1,
        ..TrainSchedule::default()
    };
    // Extra schedule keys, e.g. DESK_SCHEDULE="l=10 lr_end=1e-4".
    if let Ok(extra) = std::env::var("DESK_SCHEDULE") {
        for kv in extra.split_whitespace() {
            let (k, v) = kv.split_once('=').expect("key=value");
            sched.set(k, v)?;
        }
    }
    for v in variants {
        let t0 = Instant::now();
        let out = train(&corpus, ModelConfig::tiny(), &sched, v, None)?;
        let report = evaluate(&out.model, &eval, 3)?;
        let disc = out.log.phase_totals(Phase::Disc);
        let trend = if disc.is_empty() {
            String::from("-")
        } else {
            let s = smooth(&disc, (disc.len() / 10).max(1));
            let argmin = s
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap();
            format!("min at {argmin}/{} ({:.3} -> {:.3})", s.len(), s[0], s[s.len() - 1])
        };
        println!(
            "{v:8} {:6.1}s steps {:5} sim_mean {:.4} sim6 {:.4} argmin {} others {:.4} gt_others {:.4} disc {trend}",
            t0.elapsed().as_secs_f64(),
            out.log.steps().count(),
            report.similarity.mean_nontrivial(),
            report.similarity.at(6),
            report.similarity.argmin_nontrivial(),
            report.controllability.generated.fraction(Bucket::Others),
            report.controllability.ground_truth.fraction(Bucket::Others),
        );
        println!("         profile {:?}", report.similarity.values.map(|v| (v * 1000.0).round() / 1000.0));
    }
    Ok(())
}
