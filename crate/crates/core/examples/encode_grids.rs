//! Encodes a two-bar lead sheet fragment into the chord and melody grids,
//! transposes it and decodes the chord grid back into spans.
//!
//! ```text
//! cargo run --example encode_grids
//! ```

use harmonia::encodings::{
    decode_chord_grid, encode_chord_grid, encode_melody_grid, transpose_chord, transpose_melody,
    ChordEvent, MelodyNote, MelodyToken,
};

fn main() -> harmonia::Result<()> {
    // C major for a bar, then G7 (voiced G B D F).
    let chords = encode_chord_grid(&[
        ChordEvent::new(0, vec![48, 52, 55]),
        ChordEvent::new(4, vec![55, 59, 62, 65]),
    ])?;
    // Quarter notes E4 G4, then a half-note D5, in sixteenths.
    let melody = encode_melody_grid(&[
        MelodyNote::new(0, 4, 64),
        MelodyNote::new(4, 4, 67),
        MelodyNote::new(16, 8, 74),
    ])?;

    println!("beats 0..8 of the chord grid:");
    for beat in 0..8 {
        println!("  beat {beat}: {:?}", chords.row(beat));
    }
    let tokens: Vec<u8> = melody.steps()[..24]
        .iter()
        .map(|&s| MelodyToken::from(s).index())
        .collect();
    println!("first 24 melody tokens: {tokens:?}");

    let up = transpose_chord(&chords, 3);
    println!("up a minor third, beat 4: {:?}", up.row(4));
    println!("T_12 is the identity: {}", transpose_chord(&chords, 12) == chords);
    println!(
        "melody transposed by 3, first onset: {:?}",
        transpose_melody(&melody, 3).step(0)
    );

    for span in decode_chord_grid(&chords) {
        println!("span from beat {}: {:?}", span.onset_beat, span.pitch_classes);
    }
    Ok(())
}
