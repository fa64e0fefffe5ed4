//! Generates synthetic lead sheets, slices them into 8-bar snippets, splits
//! by song, augments the training split to 12 keys and round-trips the
//! corpus file.
//!
//! ```text
//! cargo run --example synth_corpus -- [songs] [out.hdat]
//! ```

use std::path::PathBuf;

use harmonia::corpus::{read_corpus, slice_snippets, split_songs, synth_corpus, write_corpus, Split};

fn main() -> harmonia::Result<()> {
    let mut args = std::env::args().skip(1);
    let songs: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(50);
    let out: PathBuf = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("synth.hdat"));

    let sheets = synth_corpus(songs, 16, 7)?;
    println!("first song as interchange text:\n{}", sheets[0].to_interchange());
    let mut samples = Vec::new();
    for sheet in &sheets {
        samples.extend(slice_snippets(sheet)?);
    }
    let corpus = split_songs(&samples, 0.1, 7)?;
    println!(
        "{} snippets -> {} train (x12 keys) / {} val, {} train songs / {} val songs",
        samples.len(),
        corpus.header.train_count,
        corpus.header.val_count,
        corpus.song_ids(Split::Train).len(),
        corpus.song_ids(Split::Val).len(),
    );

    write_corpus(&corpus, &out)?;
    let back = read_corpus(&out)?;
    println!("wrote {} and read it back: identical = {}", out.display(), back == corpus);
    Ok(())
}
