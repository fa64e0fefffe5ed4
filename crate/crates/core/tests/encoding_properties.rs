//! Randomized invariants of the grid encodings.

mod common;

use common::{chord_grid, encoding_case, melody_grid};
use harmonia::encodings::{MelodyStep, MelodyToken};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn encoding_algebra(c in chord_grid(), m in melody_grid(), a in 0i32..12, b in 0i32..12, index in 0u8..122) {
        encoding_case(&c, &m, a, b, index)?;
    }
}

#[test]
fn mask_token_has_no_step() {
    assert!(MelodyStep::try_from(MelodyToken::MASK).is_err());
    assert!(MelodyToken::new(123).is_err());
}
