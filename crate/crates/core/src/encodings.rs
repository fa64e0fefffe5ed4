//! Grid data model for chord progressions and lead melodies.
//!
//! A chord progression is a 32 × 4 grid of pitch-class tokens (one row per
//! beat, slots ordered from lowest to highest sounding pitch, `PAD` = 12).
//! A melody is 128 sixteenth-note steps, each an onset, a hold or a rest.
//! Melody steps also have a flat categorical view ([`MelodyToken`]) used as
//! discriminator input and target.

use std::collections::BTreeSet;
use std::fmt;

use candle_core::Tensor;
use rand::Rng;

use crate::error::{Error, Result};

/// Beat steps per chord grid.
pub const BEATS: usize = 32;
/// Chord slots per beat.
pub const SLOTS: usize = 4;
/// Sixteenth-note steps per melody grid.
pub const STEPS: usize = 4 * BEATS;
pub const PITCH_CLASSES: usize = 12;
pub const OCTAVES: usize = 10;
/// Padding token of the chord vocabulary.
pub const PAD: u8 = 12;
pub const CHORD_VOCAB: usize = 13;
pub const HOLD: u8 = 120;
pub const REST: u8 = 121;
/// Only ever produced by masking corruption; never a prediction target.
pub const MASK: u8 = 122;
/// Size of the clean melody vocabulary (120 onsets + hold + rest).
pub const MELODY_VOCAB: usize = 122;
pub const MELODY_VOCAB_WITH_MASK: usize = 123;

/// Default masking rate for the masking baseline.
pub const DEFAULT_MASK_RATE: f64 = 0.15;

/// A chord onset with the MIDI pitches sounding from that beat on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChordEvent {
    pub onset_beat: u32,
    pub pitches: Vec<u8>,
}

impl ChordEvent {
    pub fn new(onset_beat: u32, pitches: Vec<u8>) -> Self {
        Self {
            onset_beat,
            pitches,
        }
    }

    /// Builds an event from pitch classes listed bottom to top. Each class is
    /// stacked above the previous one starting from octave 4, so the slot
    /// order of the encoded row equals the listed order.
    pub fn from_pitch_classes(onset_beat: u32, classes: &[u8]) -> Self {
        let mut pitches = Vec::with_capacity(classes.len());
        let mut prev: Option<u8> = None;
        for &pc in classes {
            let pc = pc % 12;
            let pitch = match prev {
                None => 48 + pc,
                Some(p) => {
                    let mut cand = (p / 12) * 12 + pc;
                    while cand <= p {
                        cand += 12;
                    }
                    cand
                }
            };
            pitches.push(pitch);
            prev = Some(pitch);
        }
        Self {
            onset_beat,
            pitches,
        }
    }
}

/// A monophonic melody note in sixteenth-note units.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MelodyNote {
    pub onset: u32,
    pub duration: u32,
    pub pitch: u8,
}

impl MelodyNote {
    pub fn new(onset: u32, duration: u32, pitch: u8) -> Self {
        Self {
            onset,
            duration,
            pitch,
        }
    }

    pub fn end(&self) -> u32 {
        self.onset + self.duration
    }
}

/// Surface structure of an 8-bar chord progression.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct ChordGrid {
    slots: [[u8; SLOTS]; BEATS],
}

impl fmt::Debug for ChordGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.slots.iter()).finish()
    }
}

impl Default for ChordGrid {
    fn default() -> Self {
        Self::all_pad()
    }
}

impl ChordGrid {
    pub fn all_pad() -> Self {
        Self {
            slots: [[PAD; SLOTS]; BEATS],
        }
    }

    /// Validates token range and the PAD-suffix rule.
    pub fn new(slots: [[u8; SLOTS]; BEATS]) -> Result<Self> {
        for (t, row) in slots.iter().enumerate() {
            validate_row(row).map_err(|m| Error::Validation(format!("beat {t}: {m}")))?;
        }
        Ok(Self { slots })
    }

    pub fn from_tokens(tokens: &[u8]) -> Result<Self> {
        if tokens.len() != BEATS * SLOTS {
            return Err(Error::Validation(format!(
                "chord grid needs {} tokens, got {}",
                BEATS * SLOTS,
                tokens.len()
            )));
        }
        let mut slots = [[PAD; SLOTS]; BEATS];
        for (t, row) in slots.iter_mut().enumerate() {
            row.copy_from_slice(&tokens[t * SLOTS..(t + 1) * SLOTS]);
        }
        Self::new(slots)
    }

    pub fn rows(&self) -> &[[u8; SLOTS]; BEATS] {
        &self.slots
    }

    pub fn row(&self, beat: usize) -> &[u8; SLOTS] {
        &self.slots[beat]
    }

    /// Row-major token view (beat-major, slot-minor).
    pub fn tokens(&self) -> Vec<u8> {
        self.slots.iter().flatten().copied().collect()
    }

    pub fn is_pad_row(&self, beat: usize) -> bool {
        self.slots[beat].iter().all(|&t| t == PAD)
    }
}

fn validate_row(row: &[u8; SLOTS]) -> std::result::Result<(), String> {
    let mut seen_pad = false;
    for &tok in row {
        if tok > PAD {
            return Err(format!("token {tok} outside 0..=12"));
        }
        if tok == PAD {
            seen_pad = true;
        } else if seen_pad {
            return Err("pitch after PAD".into());
        }
    }
    Ok(())
}

/// Forces a row into PAD-suffix form: everything after the first PAD becomes PAD.
pub fn normalize_pad_suffix(row: &mut [u8; SLOTS]) {
    if let Some(first) = row.iter().position(|&t| t >= PAD) {
        for tok in &mut row[first..] {
            *tok = PAD;
        }
    }
}

/// One melody step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MelodyStep {
    Onset { pitch_class: u8, octave: u8 },
    Hold,
    Rest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StepKind {
    Onset,
    Hold,
    Rest,
}

impl MelodyStep {
    pub fn onset(midi_pitch: u8) -> Self {
        MelodyStep::Onset {
            pitch_class: midi_pitch % 12,
            octave: (midi_pitch / 12).min(OCTAVES as u8 - 1),
        }
    }

    pub fn kind(&self) -> StepKind {
        match self {
            MelodyStep::Onset { .. } => StepKind::Onset,
            MelodyStep::Hold => StepKind::Hold,
            MelodyStep::Rest => StepKind::Rest,
        }
    }

    pub fn pitch_class(&self) -> Option<u8> {
        match *self {
            MelodyStep::Onset { pitch_class, .. } => Some(pitch_class),
            _ => None,
        }
    }

    /// Absolute pitch (octave · 12 + pitch class) of an onset.
    pub fn midi_pitch(&self) -> Option<u8> {
        match *self {
            MelodyStep::Onset {
                pitch_class,
                octave,
            } => Some(octave * 12 + pitch_class),
            _ => None,
        }
    }
}

/// Flat categorical view of a [`MelodyStep`]: `octave * 12 + pitch_class` for
/// onsets, then [`HOLD`], [`REST`] and (corruption only) [`MASK`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MelodyToken(u8);

impl MelodyToken {
    pub const HOLD: MelodyToken = MelodyToken(HOLD);
    pub const REST: MelodyToken = MelodyToken(REST);
    pub const MASK: MelodyToken = MelodyToken(MASK);

    pub fn new(index: u8) -> Result<Self> {
        if (index as usize) < MELODY_VOCAB_WITH_MASK {
            Ok(Self(index))
        } else {
            Err(Error::Range(format!("melody token {index} outside 0..=122")))
        }
    }

    pub fn index(self) -> u8 {
        self.0
    }

    pub fn is_mask(self) -> bool {
        self.0 == MASK
    }
}

impl From<MelodyStep> for MelodyToken {
    fn from(step: MelodyStep) -> Self {
        match step {
            MelodyStep::Onset {
                pitch_class,
                octave,
            } => MelodyToken(octave * 12 + pitch_class),
            MelodyStep::Hold => MelodyToken(HOLD),
            MelodyStep::Rest => MelodyToken(REST),
        }
    }
}

impl TryFrom<MelodyToken> for MelodyStep {
    type Error = Error;

    fn try_from(token: MelodyToken) -> Result<Self> {
        match token.0 {
            i if i < HOLD => Ok(MelodyStep::Onset {
                pitch_class: i % 12,
                octave: i / 12,
            }),
            HOLD => Ok(MelodyStep::Hold),
            REST => Ok(MelodyStep::Rest),
            other => Err(Error::Contract(format!(
                "token {other} has no melody step (MASK is corruption-only)"
            ))),
        }
    }
}

/// The melody condition: 128 sixteenth-note steps.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct MelodyGrid {
    steps: Vec<MelodyStep>,
}

impl fmt::Debug for MelodyGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "MelodyGrid{:?}", self.tokens())
    }
}

impl Default for MelodyGrid {
    fn default() -> Self {
        Self::all_rest()
    }
}

impl MelodyGrid {
    pub fn all_rest() -> Self {
        Self {
            steps: vec![MelodyStep::Rest; STEPS],
        }
    }

    pub fn new(steps: Vec<MelodyStep>) -> Result<Self> {
        if steps.len() != STEPS {
            return Err(Error::Validation(format!(
                "melody grid needs {STEPS} steps, got {}",
                steps.len()
            )));
        }
        let mut sounding = false;
        for (s, step) in steps.iter().enumerate() {
            match step {
                MelodyStep::Onset {
                    pitch_class,
                    octave,
                } => {
                    if *pitch_class >= 12 || *octave as usize >= OCTAVES {
                        return Err(Error::Validation(format!(
                            "step {s}: onset ({pitch_class}, {octave}) out of range"
                        )));
                    }
                    sounding = true;
                }
                MelodyStep::Hold if !sounding => {
                    return Err(Error::Validation(format!(
                        "step {s}: hold does not continue an onset"
                    )));
                }
                MelodyStep::Hold => {}
                MelodyStep::Rest => sounding = false,
            }
        }
        Ok(Self { steps })
    }

    pub fn from_tokens(tokens: &[u8]) -> Result<Self> {
        let steps = tokens
            .iter()
            .map(|&t| MelodyStep::try_from(MelodyToken::new(t)?))
            .collect::<Result<Vec<_>>>()?;
        Self::new(steps)
    }

    pub fn steps(&self) -> &[MelodyStep] {
        &self.steps
    }

    pub fn step(&self, s: usize) -> MelodyStep {
        self.steps[s]
    }

    pub fn tokens(&self) -> Vec<u8> {
        self.steps
            .iter()
            .map(|&s| MelodyToken::from(s).index())
            .collect()
    }

    pub fn kinds(&self) -> Vec<StepKind> {
        self.steps.iter().map(MelodyStep::kind).collect()
    }

    /// Recovers the note list (onset, duration, pitch).
    pub fn notes(&self) -> Vec<MelodyNote> {
        let mut notes: Vec<MelodyNote> = Vec::new();
        let mut open = false;
        for (s, step) in self.steps.iter().enumerate() {
            match step {
                MelodyStep::Onset { .. } => {
                    notes.push(MelodyNote::new(s as u32, 1, step.midi_pitch().unwrap()));
                    open = true;
                }
                MelodyStep::Hold if open => notes.last_mut().unwrap().duration += 1,
                _ => open = false,
            }
        }
        notes
    }
}

/// A melody token sequence that may contain [`MASK`].
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CorruptedMelody {
    tokens: Vec<u8>,
}

impl CorruptedMelody {
    pub fn new(tokens: Vec<u8>) -> Result<Self> {
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= MELODY_VOCAB_WITH_MASK) {
            return Err(Error::Range(format!("melody token {bad} outside 0..=122")));
        }
        Ok(Self { tokens })
    }

    pub fn tokens(&self) -> &[u8] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

impl From<&MelodyGrid> for CorruptedMelody {
    fn from(m: &MelodyGrid) -> Self {
        Self { tokens: m.tokens() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CorruptionMethod {
    Transpose,
    Mask,
    None,
}

impl fmt::Display for CorruptionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CorruptionMethod::Transpose => "transpose",
            CorruptionMethod::Mask => "mask",
            CorruptionMethod::None => "none",
        })
    }
}

impl std::str::FromStr for CorruptionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transpose" => Ok(Self::Transpose),
            "mask" => Ok(Self::Mask),
            "none" => Ok(Self::None),
            other => Err(Error::Config(format!("unknown corruption method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorruptionSpec {
    pub method: CorruptionMethod,
    pub mask_rate: Option<f64>,
    pub rng_seed: u64,
}

impl CorruptionSpec {
    pub fn transpose(rng_seed: u64) -> Self {
        Self {
            method: CorruptionMethod::Transpose,
            mask_rate: None,
            rng_seed,
        }
    }

    pub fn mask(mask_rate: f64, rng_seed: u64) -> Self {
        Self {
            method: CorruptionMethod::Mask,
            mask_rate: Some(mask_rate),
            rng_seed,
        }
    }

    pub fn none() -> Self {
        Self {
            method: CorruptionMethod::None,
            mask_rate: None,
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.method, self.mask_rate) {
            (CorruptionMethod::Mask, None) => {
                Err(Error::Config("masking corruption requires mask_rate".into()))
            }
            (_, Some(r)) if !(0.0..=1.0).contains(&r) => {
                Err(Error::Config(format!("mask_rate {r} outside [0, 1]")))
            }
            _ => Ok(()),
        }
    }
}

/// Quantizes chord onsets (beats within the grid) into a [`ChordGrid`].
///
/// Each chord sustains until the next onset or the end of the grid. Pitches
/// are ordered by absolute MIDI pitch, truncated to the four lowest and then
/// reduced to pitch classes.
pub fn encode_chord_grid(events: &[ChordEvent]) -> Result<ChordGrid> {
    let mut grid = ChordGrid::all_pad();
    for (i, ev) in events.iter().enumerate() {
        if ev.onset_beat as usize >= BEATS {
            return Err(Error::Range(format!(
                "chord onset beat {} outside 0..=31",
                ev.onset_beat
            )));
        }
        if ev.pitches.is_empty() {
            return Err(Error::Validation(format!(
                "chord at beat {} has no pitches",
                ev.onset_beat
            )));
        }
        if i > 0 && ev.onset_beat <= events[i - 1].onset_beat {
            return Err(Error::Validation(format!(
                "chord onsets not strictly increasing at beat {}",
                ev.onset_beat
            )));
        }
    }
    for (i, ev) in events.iter().enumerate() {
        let row = chord_row(&ev.pitches);
        let end = events
            .get(i + 1)
            .map_or(BEATS, |next| next.onset_beat as usize);
        for beat in ev.onset_beat as usize..end {
            grid.slots[beat] = row;
        }
    }
    Ok(grid)
}

pub(crate) fn chord_row(pitches: &[u8]) -> [u8; SLOTS] {
    let mut sorted = pitches.to_vec();
    sorted.sort_unstable();
    let mut row = [PAD; SLOTS];
    for (slot, &p) in row.iter_mut().zip(sorted.iter()) {
        *slot = p % 12;
    }
    row
}

/// One merged chord span recovered from a grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChordSpan {
    pub onset_beat: u32,
    /// Pitch classes in slot order (lowest first).
    pub pitch_classes: Vec<u8>,
}

impl ChordSpan {
    pub fn pitch_class_set(&self) -> BTreeSet<u8> {
        self.pitch_classes.iter().copied().collect()
    }
}

/// Inverse view of [`encode_chord_grid`]: merges consecutive identical rows
/// and drops all-PAD rows.
pub fn decode_chord_grid(grid: &ChordGrid) -> Vec<ChordSpan> {
    let mut spans = Vec::new();
    let mut prev: Option<&[u8; SLOTS]> = None;
    for (beat, row) in grid.slots.iter().enumerate() {
        if prev != Some(row) && row[0] != PAD {
            spans.push(ChordSpan {
                onset_beat: beat as u32,
                pitch_classes: row.iter().copied().filter(|&t| t != PAD).collect(),
            });
        }
        prev = Some(row);
    }
    spans
}

/// Quantizes a monophonic melody (sixteenth-note units, grid-relative) into a
/// [`MelodyGrid`]. Notes running past the grid end are truncated.
pub fn encode_melody_grid(notes: &[MelodyNote]) -> Result<MelodyGrid> {
    let mut steps = vec![MelodyStep::Rest; STEPS];
    for (i, note) in notes.iter().enumerate() {
        if note.onset as usize >= STEPS {
            return Err(Error::Range(format!(
                "melody onset {} outside 0..=127",
                note.onset
            )));
        }
        if note.duration == 0 {
            return Err(Error::Validation(format!(
                "melody note at {} has zero duration",
                note.onset
            )));
        }
        if let Some(prev) = i.checked_sub(1).map(|j| &notes[j]) {
            if note.onset <= prev.onset {
                return Err(Error::Validation(format!(
                    "melody onsets not strictly increasing at step {}",
                    note.onset
                )));
            }
            if note.onset < prev.end() {
                return Err(Error::Validation(format!(
                    "overlapping melody notes at step {}",
                    note.onset
                )));
            }
        }
        let start = note.onset as usize;
        let mut end = note.end() as usize;
        if end > STEPS {
            log::debug!(
                "truncating melody note at step {start} from {} to {} steps",
                note.duration,
                STEPS - start
            );
            end = STEPS;
        }
        steps[start] = MelodyStep::onset(note.pitch);
        for step in &mut steps[start + 1..end] {
            *step = MelodyStep::Hold;
        }
    }
    MelodyGrid::new(steps)
}

/// Shifts every pitch class by `semitones` (mod 12). PAD is untouched.
pub fn transpose_chord(grid: &ChordGrid, semitones: i32) -> ChordGrid {
    let shift = semitones.rem_euclid(12) as u8;
    let mut out = grid.clone();
    for row in out.slots.iter_mut() {
        for tok in row.iter_mut().filter(|t| **t != PAD) {
            *tok = (*tok + shift) % 12;
        }
    }
    out
}

/// Shifts every onset by `semitones`, carrying into the octave and clamping
/// the octave to 0..=9. Holds and rests are untouched.
pub fn transpose_melody(grid: &MelodyGrid, semitones: i32) -> MelodyGrid {
    let steps = grid
        .steps
        .iter()
        .map(|&step| match step {
            MelodyStep::Onset {
                pitch_class,
                octave,
            } => {
                let abs = octave as i32 * 12 + pitch_class as i32 + semitones;
                let pc = abs.rem_euclid(12) as u8;
                let oct = abs.div_euclid(12).clamp(0, OCTAVES as i32 - 1) as u8;
                MelodyStep::Onset {
                    pitch_class: pc,
                    octave: oct,
                }
            }
            other => other,
        })
        .collect();
    MelodyGrid { steps }
}

/// Applies a condition corruption. Returns the corrupted token sequence and,
/// for transposition, the drawn shift.
pub fn corrupt<R: Rng + ?Sized>(
    melody: &MelodyGrid,
    spec: &CorruptionSpec,
    rng: &mut R,
) -> Result<(CorruptedMelody, Option<u8>)> {
    spec.validate()?;
    match spec.method {
        CorruptionMethod::Transpose => {
            let shift: u8 = rng.random_range(0..12);
            let shifted = transpose_melody(melody, shift as i32);
            Ok((CorruptedMelody::from(&shifted), Some(shift)))
        }
        CorruptionMethod::Mask => {
            let rate = spec.mask_rate.unwrap();
            let tokens = melody
                .tokens()
                .into_iter()
                .map(|t| if rng.random_bool(rate) { MASK } else { t })
                .collect();
            Ok((CorruptedMelody { tokens }, None))
        }
        CorruptionMethod::None => Ok((CorruptedMelody::from(melody), None)),
    }
}

/// Sums the embeddings of every four consecutive melody steps.
///
/// `tokens` is a `[batch, 128]` integer tensor and `table` a
/// `[vocab, d_emb]` embedding table; the result is `[batch, 32, d_emb]`.
pub fn beat_pool_condition(tokens: &Tensor, table: &Tensor) -> Result<Tensor> {
    let (batch, steps) = tokens.dims2()?;
    if steps != STEPS {
        return Err(Error::Contract(format!(
            "melody sequence length {steps}, expected {STEPS}"
        )));
    }
    let d = table.dim(1)?;
    let emb = table.index_select(&tokens.flatten_all()?, 0)?;
    Ok(emb.reshape((batch, BEATS, 4, d))?.sum(2)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn row_grid(row: [u8; 4]) -> ChordGrid {
        ChordGrid::new([row; BEATS]).unwrap()
    }

    #[test]
    fn sustained_triad_fills_every_row() {
        let g = encode_chord_grid(&[ChordEvent::new(0, vec![48, 52, 55])]).unwrap();
        assert!(g.rows().iter().all(|r| *r == [0, 4, 7, PAD]));
    }

    #[test]
    fn five_note_chord_keeps_four_lowest() {
        let g = encode_chord_grid(&[ChordEvent::new(0, vec![62, 48, 55, 52, 59])]).unwrap();
        assert_eq!(*g.row(0), [0, 4, 7, 11]);
    }

    #[test]
    fn empty_events_give_all_pad() {
        assert_eq!(encode_chord_grid(&[]).unwrap(), ChordGrid::all_pad());
    }

    #[test]
    fn beats_before_first_event_are_pad() {
        let g = encode_chord_grid(&[ChordEvent::new(4, vec![60, 64, 67])]).unwrap();
        assert!((0..4).all(|t| g.is_pad_row(t)));
        assert_eq!(*g.row(4), [0, 4, 7, PAD]);
    }

    #[test]
    fn chord_onset_out_of_range() {
        let err = encode_chord_grid(&[ChordEvent::new(32, vec![60])]).unwrap_err();
        assert!(matches!(err, Error::Range(_)));
    }

    #[test]
    fn chord_onsets_must_increase() {
        let ev = [ChordEvent::new(4, vec![60]), ChordEvent::new(4, vec![62])];
        assert!(matches!(
            encode_chord_grid(&ev),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn pitch_class_stacking_preserves_listed_order() {
        let ev = ChordEvent::from_pitch_classes(0, &[7, 11, 2, 5]);
        assert_eq!(ev.pitches, vec![55, 59, 62, 65]);
        assert_eq!(chord_row(&ev.pitches), [7, 11, 2, 5]);
    }

    #[test]
    fn pad_before_pitch_is_rejected() {
        let mut rows = [[0, 4, 7, PAD]; BEATS];
        rows[3] = [0, PAD, 7, PAD];
        assert!(ChordGrid::new(rows).is_err());
        rows[3] = [0, 13, 7, PAD];
        assert!(ChordGrid::new(rows).is_err());
    }

    #[test]
    fn decode_merges_identical_rows() {
        let spans = decode_chord_grid(&row_grid([0, 4, 7, PAD]));
        assert_eq!(spans.len(), 1);
        assert_eq!(spans[0].onset_beat, 0);
        assert_eq!(spans[0].pitch_class_set(), BTreeSet::from([0, 4, 7]));

        let mut rows = [[0, 4, 7, PAD]; BEATS];
        for r in rows.iter_mut().skip(16) {
            *r = [7, 11, 2, PAD];
        }
        let spans = decode_chord_grid(&ChordGrid::new(rows).unwrap());
        assert_eq!(spans.len(), 2);
        assert_eq!(spans[1].onset_beat, 16);
        assert_eq!(spans[1].pitch_class_set(), BTreeSet::from([7, 11, 2]));

        assert!(decode_chord_grid(&ChordGrid::all_pad()).is_empty());
    }

    #[test]
    fn melody_single_note() {
        let m = encode_melody_grid(&[MelodyNote::new(0, 4, 60)]).unwrap();
        assert_eq!(
            m.step(0),
            MelodyStep::Onset {
                pitch_class: 0,
                octave: 5
            }
        );
        assert!((1..4).all(|s| m.step(s) == MelodyStep::Hold));
        assert!((4..STEPS).all(|s| m.step(s) == MelodyStep::Rest));
    }

    #[test]
    fn melody_empty_and_truncated() {
        assert_eq!(encode_melody_grid(&[]).unwrap(), MelodyGrid::all_rest());
        let m = encode_melody_grid(&[MelodyNote::new(126, 8, 64)]).unwrap();
        assert_eq!(
            m.step(126),
            MelodyStep::Onset {
                pitch_class: 4,
                octave: 5
            }
        );
        assert_eq!(m.step(127), MelodyStep::Hold);
    }

    #[test]
    fn melody_overlap_is_rejected() {
        let notes = [MelodyNote::new(0, 4, 60), MelodyNote::new(2, 2, 62)];
        assert!(matches!(
            encode_melody_grid(&notes),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn leading_hold_is_invalid() {
        let mut steps = vec![MelodyStep::Rest; STEPS];
        steps[0] = MelodyStep::Hold;
        assert!(MelodyGrid::new(steps.clone()).is_err());
        steps[0] = MelodyStep::Rest;
        steps[1] = MelodyStep::Hold;
        assert!(MelodyGrid::new(steps).is_err());
    }

    #[test]
    fn transpose_chord_examples() {
        let g = row_grid([0, 4, 7, PAD]);
        assert_eq!(*transpose_chord(&g, 2).row(0), [2, 6, 9, PAD]);
        assert_eq!(transpose_chord(&g, 12), g);
        assert_eq!(transpose_chord(&g, -1), transpose_chord(&g, 11));
    }

    #[test]
    fn transpose_melody_carry_and_clamp() {
        let m = encode_melody_grid(&[MelodyNote::new(0, 1, 71)]).unwrap();
        assert_eq!(
            transpose_melody(&m, 1).step(0),
            MelodyStep::Onset {
                pitch_class: 0,
                octave: 6
            }
        );
        assert_eq!(transpose_melody(&m, 0), m);
        let top = encode_melody_grid(&[MelodyNote::new(0, 1, 119)]).unwrap();
        assert_eq!(
            transpose_melody(&top, 1).step(0),
            MelodyStep::Onset {
                pitch_class: 0,
                octave: 9
            }
        );
    }

    #[test]
    fn token_round_trip_covers_vocab() {
        for i in 0..MELODY_VOCAB as u8 {
            let tok = MelodyToken::new(i).unwrap();
            let step = MelodyStep::try_from(tok).unwrap();
            assert_eq!(MelodyToken::from(step), tok);
        }
        assert!(MelodyStep::try_from(MelodyToken::MASK).is_err());
        assert!(MelodyToken::new(123).is_err());
    }

    #[test]
    fn corrupt_transpose_uniform_shift_counts() {
        let m = encode_melody_grid(&[MelodyNote::new(0, 4, 60)]).unwrap();
        let spec = CorruptionSpec::transpose(11);
        let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
        let mut counts = [0usize; 12];
        for _ in 0..12_000 {
            let (_, shift) = corrupt(&m, &spec, &mut rng).unwrap();
            counts[shift.unwrap() as usize] += 1;
        }
        assert!(counts.iter().all(|&c| (850..=1150).contains(&c)), "{counts:?}");
    }

    #[test]
    fn corrupt_shift_zero_is_identity() {
        let m = encode_melody_grid(&[MelodyNote::new(0, 4, 60), MelodyNote::new(8, 2, 67)]).unwrap();
        let spec = CorruptionSpec::transpose(3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut seen_zero = false;
        for _ in 0..200 {
            let (c, shift) = corrupt(&m, &spec, &mut rng).unwrap();
            let shift = shift.unwrap();
            assert_eq!(c, CorruptedMelody::from(&transpose_melody(&m, shift as i32)));
            if shift == 0 {
                assert_eq!(c.tokens(), m.tokens().as_slice());
                seen_zero = true;
            }
        }
        assert!(seen_zero);
    }

    #[test]
    fn corrupt_mask_full_rate_and_config_error() {
        let m = encode_melody_grid(&[MelodyNote::new(0, 4, 60)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (c, shift) = corrupt(&m, &CorruptionSpec::mask(1.0, 0), &mut rng).unwrap();
        assert!(shift.is_none());
        assert!(c.tokens().iter().all(|&t| t == MASK));
        let bad = CorruptionSpec {
            method: CorruptionMethod::Mask,
            mask_rate: None,
            rng_seed: 0,
        };
        assert!(matches!(corrupt(&m, &bad, &mut rng), Err(Error::Config(_))));
        let (c, _) = corrupt(&m, &CorruptionSpec::none(), &mut rng).unwrap();
        assert_eq!(c.tokens(), m.tokens().as_slice());
    }

    #[test]
    fn beat_pool_on_constant_melody() {
        let dev = Device::Cpu;
        let table = Tensor::randn(0f32, 1.0, (MELODY_VOCAB_WITH_MASK, 128), &dev).unwrap();
        let toks = Tensor::from_vec(
            MelodyGrid::all_rest()
                .tokens()
                .iter()
                .map(|&t| t as u32)
                .collect::<Vec<_>>(),
            (1, STEPS),
            &dev,
        )
        .unwrap();
        let pooled = beat_pool_condition(&toks, &table).unwrap();
        assert_eq!(pooled.dims(), &[1, BEATS, 128]);
        let rest = (table.get(REST as usize).unwrap() * 4.0).unwrap();
        for b in 0..BEATS {
            let diff = (pooled.get(0).unwrap().get(b).unwrap() - &rest)
                .unwrap()
                .abs()
                .unwrap()
                .max(0)
                .unwrap()
                .to_dtype(DType::F32)
                .unwrap()
                .to_scalar::<f32>()
                .unwrap();
            assert!(diff < 1e-5);
        }
    }
}
