//! Lead-sheet ingestion, snippet slicing, key augmentation, song-level
//! splitting, the synthetic corpus generator and the binary corpus file.
//!
//! Interchange format (text, one record per line, `#` starts a comment):
//!
//! ```text
//! SONG <id> METER <2/4|4/4>
//! N <onset_sixteenth> <duration_sixteenths> <midi_pitch>
//! C <onset_beat> <pitch>[,<pitch>...]
//! ```
//!
//! Chord lines whose values are all in 0..=11 are read as pitch classes
//! listed bottom to top; otherwise they are MIDI pitches.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encodings::{
    encode_chord_grid, encode_melody_grid, transpose_chord, transpose_melody, ChordEvent,
    ChordGrid, MelodyGrid, MelodyNote, BEATS, SLOTS, STEPS,
};
use crate::error::{Error, Result};

/// Beats between consecutive snippet starts.
pub const HOP_BEATS: u32 = 8;
pub const DEFAULT_VAL_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Meter {
    TwoFour,
    FourFour,
}

impl Meter {
    pub fn beats_per_bar(self) -> u32 {
        match self {
            Meter::TwoFour => 2,
            Meter::FourFour => 4,
        }
    }
}

impl fmt::Display for Meter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Meter::TwoFour => "2/4",
            Meter::FourFour => "4/4",
        })
    }
}

/// A whole song: melody in sixteenths and chord onsets in beats.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LeadSheet {
    pub song_id: String,
    pub meter: Meter,
    pub melody_notes: Vec<MelodyNote>,
    pub chord_events: Vec<ChordEvent>,
}

impl LeadSheet {
    /// Song length in beats: the later of the melody end (rounded up to a
    /// beat) and one beat past the last chord onset.
    pub fn span_beats(&self) -> u32 {
        let melody_end = self
            .melody_notes
            .iter()
            .map(|n| n.end().div_ceil(4))
            .max()
            .unwrap_or(0);
        let chord_end = self
            .chord_events
            .last()
            .map_or(0, |c| c.onset_beat + 1);
        melody_end.max(chord_end)
    }

    /// Renders the sheet in the interchange format.
    pub fn to_interchange(&self) -> String {
        let mut out = format!("SONG {} METER {}\n", self.song_id, self.meter);
        for n in &self.melody_notes {
            out.push_str(&format!("N {} {} {}\n", n.onset, n.duration, n.pitch));
        }
        for c in &self.chord_events {
            let pitches: Vec<String> = c.pitches.iter().map(u8::to_string).collect();
            out.push_str(&format!("C {} {}\n", c.onset_beat, pitches.join(",")));
        }
        out
    }

    fn validate(&self) -> Result<()> {
        for w in self.melody_notes.windows(2) {
            if w[1].onset <= w[0].onset || w[1].onset < w[0].end() {
                return Err(Error::Validation(format!(
                    "{}: overlapping or unordered melody notes at {}",
                    self.song_id, w[1].onset
                )));
            }
        }
        for w in self.chord_events.windows(2) {
            if w[1].onset_beat <= w[0].onset_beat {
                return Err(Error::Validation(format!(
                    "{}: chord onsets not strictly increasing at {}",
                    self.song_id, w[1].onset_beat
                )));
            }
        }
        Ok(())
    }
}

/// Parses one lead sheet from interchange text.
pub fn parse_leadsheet(text: &str) -> Result<LeadSheet> {
    let mut header: Option<(String, Meter)> = None;
    let mut melody: Vec<MelodyNote> = Vec::new();
    let mut chords: Vec<ChordEvent> = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            line: line_no,
            message,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields[0] {
            "SONG" => {
                if header.is_some() {
                    return Err(parse_err("second SONG record in one file".into()));
                }
                if fields.len() != 4 || fields[2] != "METER" {
                    return Err(parse_err("expected 'SONG <id> METER <meter>'".into()));
                }
                let meter = match fields[3] {
                    "2/4" => Meter::TwoFour,
                    "4/4" => Meter::FourFour,
                    other if is_meter_literal(other) => {
                        return Err(Error::MeterRejected {
                            song_id: fields[1].to_string(),
                            meter: other.to_string(),
                        })
                    }
                    other => return Err(parse_err(format!("malformed meter '{other}'"))),
                };
                header = Some((fields[1].to_string(), meter));
            }
            "N" => {
                if header.is_none() {
                    return Err(parse_err("note before SONG header".into()));
                }
                if fields.len() != 4 {
                    return Err(parse_err("expected 'N <onset> <duration> <pitch>'".into()));
                }
                let onset: u32 = parse_num(fields[1], line_no)?;
                let duration: u32 = parse_num(fields[2], line_no)?;
                let pitch: u8 = parse_num(fields[3], line_no)?;
                if duration == 0 {
                    return Err(parse_err("zero-length note".into()));
                }
                if pitch > 127 {
                    return Err(parse_err(format!("pitch {pitch} outside MIDI range")));
                }
                let note = MelodyNote::new(onset, duration, pitch);
                if let Some(prev) = melody.last() {
                    if note.onset <= prev.onset || note.onset < prev.end() {
                        return Err(parse_err(format!(
                            "melody note at {} overlaps the previous note (monophony required)",
                            note.onset
                        )));
                    }
                }
                melody.push(note);
            }
            "C" => {
                if header.is_none() {
                    return Err(parse_err("chord before SONG header".into()));
                }
                if fields.len() != 3 {
                    return Err(parse_err("expected 'C <onset_beat> <p>[,<p>...]'".into()));
                }
                let onset: u32 = parse_num(fields[1], line_no)?;
                let values = fields[2]
                    .split(',')
                    .map(|p| parse_num::<u8>(p, line_no))
                    .collect::<Result<Vec<_>>>()?;
                if values.iter().any(|&p| p > 127) {
                    return Err(parse_err("chord pitch outside MIDI range".into()));
                }
                if let Some(prev) = chords.last() {
                    if onset <= prev.onset_beat {
                        return Err(parse_err(format!(
                            "chord onset {onset} not after previous onset {}",
                            prev.onset_beat
                        )));
                    }
                }
                let event = if values.iter().all(|&p| p < 12) {
                    ChordEvent::from_pitch_classes(onset, &values)
                } else {
                    ChordEvent::new(onset, values)
                };
                chords.push(event);
            }
            other => return Err(parse_err(format!("unknown record type '{other}'"))),
        }
    }

    let (song_id, meter) = header.ok_or(Error::Parse {
        line: 0,
        message: "missing SONG header".into(),
    })?;
    Ok(LeadSheet {
        song_id,
        meter,
        melody_notes: melody,
        chord_events: chords,
    })
}

fn is_meter_literal(s: &str) -> bool {
    let mut parts = s.split('/');
    matches!(
        (parts.next(), parts.next(), parts.next()),
        (Some(a), Some(b), None) if a.parse::<u32>().is_ok() && b.parse::<u32>().is_ok()
    )
}

fn parse_num<T: std::str::FromStr>(s: &str, line: usize) -> Result<T> {
    s.parse().map_err(|_| Error::Parse {
        line,
        message: format!("invalid number '{s}'"),
    })
}

/// Reads and parses an interchange file.
pub fn ingest_leadsheet(path: &Path) -> Result<LeadSheet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_leadsheet(&text)
}

/// A 32-beat training snippet.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Sample {
    pub song_id: String,
    pub start_beat: u32,
    pub chord: ChordGrid,
    pub melody: MelodyGrid,
    pub transposition_tag: u8,
}

impl Sample {
    pub fn transposed(&self, k: u8) -> Sample {
        Sample {
            song_id: self.song_id.clone(),
            start_beat: self.start_beat,
            chord: transpose_chord(&self.chord, k as i32),
            melody: transpose_melody(&self.melody, k as i32),
            transposition_tag: (self.transposition_tag + k) % 12,
        }
    }
}

/// Number of snippets a song of `beats` beats yields.
pub fn snippet_count(beats: u32) -> usize {
    if beats < BEATS as u32 {
        0
    } else {
        ((beats - BEATS as u32) / HOP_BEATS + 1) as usize
    }
}

/// Slices a song into 32-beat windows at an 8-beat hop.
///
/// The chord active at a window start is re-anchored at beat 0. Melody notes
/// that start before the window are dropped; notes running past its end are
/// truncated.
pub fn slice_snippets(sheet: &LeadSheet) -> Result<Vec<Sample>> {
    sheet.validate()?;
    let span = sheet.span_beats();
    let window = BEATS as u32;
    let mut out = Vec::with_capacity(snippet_count(span));
    let mut start = 0;
    while start + window <= span {
        let end = start + window;
        let mut events = Vec::new();
        if let Some(active) = sheet
            .chord_events
            .iter()
            .filter(|c| c.onset_beat <= start)
            .next_back()
        {
            events.push(ChordEvent::new(0, active.pitches.clone()));
        }
        events.extend(
            sheet
                .chord_events
                .iter()
                .filter(|c| c.onset_beat > start && c.onset_beat < end)
                .map(|c| ChordEvent::new(c.onset_beat - start, c.pitches.clone())),
        );
        let lo = start * 4;
        let hi = lo + STEPS as u32;
        let notes: Vec<MelodyNote> = sheet
            .melody_notes
            .iter()
            .filter(|n| n.onset >= lo && n.onset < hi)
            .map(|n| MelodyNote::new(n.onset - lo, n.duration, n.pitch))
            .collect();
        out.push(Sample {
            song_id: sheet.song_id.clone(),
            start_beat: start,
            chord: encode_chord_grid(&events)?,
            melody: encode_melody_grid(&notes)?,
            transposition_tag: 0,
        });
        start += HOP_BEATS;
    }
    Ok(out)
}

/// Transposes every sample to all 12 keys (tag = shift).
pub fn augment_transpositions(samples: &[Sample]) -> Result<Vec<Sample>> {
    if let Some(s) = samples.iter().find(|s| s.transposition_tag != 0) {
        return Err(Error::Validation(format!(
            "sample {}@{} already augmented (tag {})",
            s.song_id, s.start_beat, s.transposition_tag
        )));
    }
    Ok(samples
        .iter()
        .flat_map(|s| (0..12u8).map(move |k| s.transposed(k)))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusHeader {
    pub version: u32,
    pub split_seed: u64,
    pub val_fraction: f64,
    pub train_count: usize,
    pub val_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusRecord {
    pub split: Split,
    pub sample: Sample,
}

/// A persisted, split corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusFile {
    pub header: CorpusHeader,
    pub records: Vec<CorpusRecord>,
}

pub const CORPUS_MAGIC: &[u8; 5] = b"HDAT1";
pub const CORPUS_VERSION: u32 = 1;

impl CorpusFile {
    pub fn samples(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.records
            .iter()
            .filter(move |r| r.split == split)
            .map(|r| &r.sample)
    }

    pub fn song_ids(&self, split: Split) -> BTreeSet<&str> {
        self.samples(split).map(|s| s.song_id.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CORPUS_MAGIC);
        buf.extend_from_slice(&self.header.version.to_le_bytes());
        buf.extend_from_slice(&self.header.split_seed.to_le_bytes());
        buf.extend_from_slice(&self.header.val_fraction.to_le_bytes());
        buf.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.header.train_count as u32).to_le_bytes());
        buf.extend_from_slice(&(self.header.val_count as u32).to_le_bytes());
        for rec in &self.records {
            let s = &rec.sample;
            let mut payload = Vec::with_capacity(8 + s.song_id.len() + BEATS * SLOTS + STEPS);
            payload.push(match rec.split {
                Split::Train => 0,
                Split::Val => 1,
            });
            payload.extend_from_slice(&(s.song_id.len() as u16).to_le_bytes());
            payload.extend_from_slice(s.song_id.as_bytes());
            payload.extend_from_slice(&s.start_beat.to_le_bytes());
            payload.push(s.transposition_tag);
            payload.extend_from_slice(&s.chord.tokens());
            payload.extend_from_slice(&s.melody.tokens());
            buf.extend_from_slice(&(payload.len() as u32).to_le_bytes());
            buf.extend_from_slice(&payload);
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        let magic = r
            .take(CORPUS_MAGIC.len())
            .ok_or_else(|| Error::Format("file shorter than magic".into()))?;
        if magic != CORPUS_MAGIC {
            return Err(Error::Format("missing HDAT1 magic".into()));
        }
        let short = || Error::Format("truncated header".into());
        let version = r.u32().ok_or_else(short)?;
        if version != CORPUS_VERSION {
            return Err(Error::VersionMismatch {
                expected: CORPUS_VERSION,
                found: version,
            });
        }
        let split_seed = r.u64().ok_or_else(short)?;
        let val_fraction = f64::from_le_bytes(r.take(8).ok_or_else(short)?.try_into().unwrap());
        let count = r.u32().ok_or_else(short)? as usize;
        let train_count = r.u32().ok_or_else(short)? as usize;
        let val_count = r.u32().ok_or_else(short)? as usize;

        let mut records = Vec::with_capacity(count.min(1 << 20));
        for found in 0..count {
            let payload = r
                .u32()
                .and_then(|len| r.take(len as usize))
                .ok_or(Error::CountMismatch {
                    expected: count,
                    found,
                })?;
            records.push(decode_record(payload)?);
        }
        let body_len = r.pos;
        let stored = r
            .u32()
            .ok_or_else(|| Error::Format("missing checksum trailer".into()))?;
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checksum".into()));
        }
        let computed = crc32fast::hash(&bytes[..body_len]);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let n_train = records.iter().filter(|r| r.split == Split::Train).count();
        if n_train != train_count || count - n_train != val_count {
            return Err(Error::CountMismatch {
                expected: train_count + val_count,
                found: count,
            });
        }
        Ok(CorpusFile {
            header: CorpusHeader {
                version,
                split_seed,
                val_fraction,
                train_count,
                val_count,
            },
            records,
        })
    }
}

fn decode_record(p: &[u8]) -> Result<CorpusRecord> {
    let bad = || Error::Format("malformed corpus record".into());
    let mut r = ByteReader { bytes: p, pos: 0 };
    let split = match r.take(1).ok_or_else(bad)?[0] {
        0 => Split::Train,
        1 => Split::Val,
        _ => return Err(bad()),
    };
    let id_len = u16::from_le_bytes(r.take(2).ok_or_else(bad)?.try_into().unwrap()) as usize;
    let song_id = String::from_utf8(r.take(id_len).ok_or_else(bad)?.to_vec()).map_err(|_| bad())?;
    let start_beat = r.u32().ok_or_else(bad)?;
    let tag = r.take(1).ok_or_else(bad)?[0];
    let chord = ChordGrid::from_tokens(r.take(BEATS * SLOTS).ok_or_else(bad)?)?;
    let melody = MelodyGrid::from_tokens(r.take(STEPS).ok_or_else(bad)?)?;
    if r.pos != p.len() || tag > 11 {
        return Err(bad());
    }
    Ok(CorpusRecord {
        split,
        sample: Sample {
            song_id,
            start_beat,
            chord,
            melody,
            transposition_tag: tag,
        },
    })
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn write_corpus(corpus: &CorpusFile, path: &Path) -> Result<()> {
    fs::write(path, corpus.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_corpus(path: &Path) -> Result<CorpusFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    CorpusFile::from_bytes(&bytes)
}

/// Partitions songs (not snippets) into train/val by a seeded shuffle, then
/// augments the train split to all 12 keys. Validation stays unaugmented.
pub fn split_songs(samples: &[Sample], val_fraction: f64, seed: u64) -> Result<CorpusFile> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Split(format!(
            "val_fraction {val_fraction} outside [0, 1)"
        )));
    }
    let mut songs: Vec<&str> = Vec::new();
    let mut seen = HashSet::new();
    for s in samples {
        if seen.insert(s.song_id.as_str()) {
            songs.push(&s.song_id);
        }
    }
    if songs.len() < 2 {
        return Err(Error::Split(format!(
            "need at least 2 songs to split, got {}",
            songs.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = songs.clone();
    shuffled.shuffle(&mut rng);
    let n_val = ((songs.len() as f64 * val_fraction).round() as usize).clamp(1, songs.len() - 1);
    let val_songs: HashSet<&str> = shuffled[..n_val].iter().copied().collect();

    let (val, train): (Vec<Sample>, Vec<Sample>) = samples
        .iter()
        .cloned()
        .partition(|s| val_songs.contains(s.song_id.as_str()));
    let train = augment_transpositions(&train)?;
    let mut records: Vec<CorpusRecord> = train
        .into_iter()
        .map(|sample| CorpusRecord {
            split: Split::Train,
            sample,
        })
        .collect();
    let train_count = records.len();
    records.extend(val.into_iter().map(|sample| CorpusRecord {
        split: Split::Val,
        sample,
    }));
    Ok(CorpusFile {
        header: CorpusHeader {
            version: CORPUS_VERSION,
            split_seed: seed,
            val_fraction,
            train_count,
            val_count: records.len() - train_count,
        },
        records,
    })
}

const MAJOR_SCALE: [u8; 7] = [0, 2, 4, 5, 7, 9, 11];
/// Scale degrees available to the generator: I, ii, iii, IV, V, vi.
const DEGREES: [usize; 6] = [0, 1, 2, 3, 4, 5];
const SEVENTH_PROB: f64 = 0.25;
const CHORD_TONE_PROB: f64 = 0.7;

/// The diatonic (major) scale of `key` as pitch classes.
pub fn major_scale(key: u8) -> [u8; 7] {
    MAJOR_SCALE.map(|d| (key + d) % 12)
}

/// Generates a deterministic corpus of simple 4/4 major-key songs: one
/// diatonic triad or seventh chord per bar and a quarter/eighth-note melody
/// that favours chord tones.
pub fn synth_corpus(n_songs: usize, bars_per_song: u32, seed: u64) -> Result<Vec<LeadSheet>> {
    if n_songs == 0 {
        return Err(Error::Validation("n_songs must be >= 1".into()));
    }
    if bars_per_song < 8 {
        return Err(Error::Validation("bars_per_song must be >= 8".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n_songs)
        .map(|i| synth_song(format!("synth-{seed}-{i:05}"), bars_per_song, &mut rng))
        .collect())
}

fn synth_song(song_id: String, bars: u32, rng: &mut ChaCha8Rng) -> LeadSheet {
    let key: u8 = rng.random_range(0..12);
    let scale = major_scale(key);
    let mut chords = Vec::with_capacity(bars as usize);
    let mut melody = Vec::new();
    let mut prev_pitch: i32 = 66;
    for bar in 0..bars {
        let degree = DEGREES[rng.random_range(0..DEGREES.len())];
        let size = if rng.random_bool(SEVENTH_PROB) { 4 } else { 3 };
        let classes: Vec<u8> = (0..size).map(|j| scale[(degree + 2 * j) % 7]).collect();
        chords.push(ChordEvent::from_pitch_classes(bar * 4, &classes));
        let others: Vec<u8> = scale
            .iter()
            .copied()
            .filter(|pc| !classes.contains(pc))
            .collect();

        let mut pos = 0u32;
        while pos < 16 {
            let mut dur = if rng.random_bool(0.5) { 4 } else { 2 };
            dur = dur.min(16 - pos);
            let pc = if rng.random_bool(CHORD_TONE_PROB) {
                classes[rng.random_range(0..classes.len())]
            } else {
                others[rng.random_range(0..others.len())]
            };
            let pitch = (4..=6)
                .map(|oct| oct * 12 + pc as i32)
                .filter(|p| (55..=79).contains(p))
                .min_by_key(|p| (p - prev_pitch).abs())
                .unwrap();
            prev_pitch = pitch;
            melody.push(MelodyNote::new(bar * 16 + pos, dur, pitch as u8));
            pos += dur;
        }
    }
    LeadSheet {
        song_id,
        meter: Meter::FourFour,
        melody_notes: melody,
        chord_events: chords,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encodings::{MelodyStep, PAD};

    fn sheet_with_span(beats: u32) -> LeadSheet {
        let chords = (0..beats.div_ceil(4))
            .map(|b| ChordEvent::from_pitch_classes(b * 4, &[0, 4, 7]))
            .collect();
        let melody = (0..beats).map(|b| MelodyNote::new(b * 4, 4, 60)).collect();
        LeadSheet {
            song_id: format!("s{beats}"),
            meter: Meter::FourFour,
            melody_notes: melody,
            chord_events: chords,
        }
    }

    #[test]
    fn snippet_counts_follow_hop() {
        assert_eq!(slice_snippets(&sheet_with_span(48)).unwrap().len(), 3);
        let starts: Vec<u32> = slice_snippets(&sheet_with_span(48))
            .unwrap()
            .iter()
            .map(|s| s.start_beat)
            .collect();
        assert_eq!(starts, vec![0, 8, 16]);
        assert_eq!(slice_snippets(&sheet_with_span(32)).unwrap().len(), 1);
        assert_eq!(slice_snippets(&sheet_with_span(31)).unwrap().len(), 0);
        for b in 0..200 {
            assert_eq!(snippet_count(b), slice_snippets(&sheet_with_span(b)).unwrap().len());
        }
    }

    #[test]
    fn window_start_reanchors_active_chord() {
        let sheet = LeadSheet {
            song_id: "x".into(),
            meter: Meter::FourFour,
            melody_notes: vec![MelodyNote::new(30, 6, 64), MelodyNote::new(40, 4, 67)],
            chord_events: vec![
                ChordEvent::from_pitch_classes(0, &[0, 4, 7]),
                ChordEvent::from_pitch_classes(12, &[7, 11, 2]),
                ChordEvent::from_pitch_classes(40, &[5, 9, 0]),
            ],
        };
        let snippets = slice_snippets(&sheet).unwrap();
        assert_eq!(snippets.len(), 2);
        let second = &snippets[1];
        assert_eq!(second.start_beat, 8);
        assert_eq!(*second.chord.row(0), [0, 4, 7, PAD]);
        assert_eq!(*second.chord.row(4), [7, 11, 2, PAD]);
        assert_eq!(*second.chord.row(31), [7, 11, 2, PAD]);
        // note at 30 starts before the window (32) and is dropped
        assert_eq!(second.melody.step(0), MelodyStep::Rest);
        assert_eq!(second.melody.step(8), MelodyStep::onset(67));
    }

    #[test]
    fn parse_and_reject_meter() {
        let text = "# demo\nSONG a METER 4/4\nN 0 4 60\nN 4 4 62 # comment\nC 0 48,52,55\nC 4 7,11,2\n";
        let sheet = parse_leadsheet(text).unwrap();
        assert_eq!(sheet.melody_notes.len(), 2);
        assert_eq!(sheet.chord_events[1].pitches, vec![55, 59, 62]);
        assert_eq!(parse_leadsheet(&sheet.to_interchange()).unwrap(), sheet);

        let err = parse_leadsheet("SONG b METER 3/4\nN 0 4 60\n").unwrap_err();
        assert!(matches!(err, Error::MeterRejected { ref meter, .. } if meter == "3/4"));
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = parse_leadsheet("SONG a METER 4/4\nN 0 4 60\nN 2 4 62\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }));
        let err = parse_leadsheet("SONG a METER 4/4\nN 0 x 60\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        let err = parse_leadsheet("SONG a METER 4/4\nQ 1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        assert!(matches!(
            parse_leadsheet("N 0 1 60\n"),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn augmentation_multiplies_by_twelve() {
        let samples: Vec<Sample> = slice_snippets(&sheet_with_span(64)).unwrap();
        assert_eq!(samples.len(), 5);
        let aug = augment_transpositions(&samples).unwrap();
        assert_eq!(aug.len(), 60);
        let originals: Vec<Sample> = aug
            .iter()
            .filter(|s| s.transposition_tag == 0)
            .cloned()
            .collect();
        assert_eq!(originals, samples);
        for s in &aug {
            let base = samples
                .iter()
                .find(|o| o.start_beat == s.start_beat)
                .unwrap();
            let k = s.transposition_tag as i32;
            assert_eq!(s.chord, transpose_chord(&base.chord, k));
            assert_eq!(s.melody, transpose_melody(&base.melody, k));
        }
        assert!(matches!(
            augment_transpositions(&aug),
            Err(Error::Validation(_))
        ));
    }

    fn one_sample_per_song(n: usize) -> Vec<Sample> {
        (0..n)
            .map(|i| Sample {
                song_id: format!("song{i:03}"),
                start_beat: 0,
                chord: ChordGrid::all_pad(),
                melody: MelodyGrid::all_rest(),
                transposition_tag: 0,
            })
            .collect()
    }

    #[test]
    fn split_sizes_and_determinism() {
        let samples = one_sample_per_song(100);
        let corpus = split_songs(&samples, 0.05, 9).unwrap();
        assert_eq!(corpus.song_ids(Split::Val).len(), 5);
        assert_eq!(corpus.song_ids(Split::Train).len(), 95);
        assert_eq!(corpus.header.train_count, 95 * 12);
        assert_eq!(corpus.header.val_count, 5);
        assert!(corpus.samples(Split::Val).all(|s| s.transposition_tag == 0));
        let again = split_songs(&samples, 0.05, 9).unwrap();
        assert_eq!(corpus.to_bytes(), again.to_bytes());
        assert!(matches!(
            split_songs(&samples[..1], 0.05, 9),
            Err(Error::Split(_))
        ));
    }

    #[test]
    fn splits_never_share_songs() {
        let sheets = synth_corpus(20, 12, 1).unwrap();
        let samples: Vec<Sample> = sheets
            .iter()
            .flat_map(|s| slice_snippets(s).unwrap())
            .collect();
        for seed in 0..1000 {
            let corpus = split_songs(&samples, 0.2, seed).unwrap();
            let train = corpus.song_ids(Split::Train);
            assert!(corpus.song_ids(Split::Val).is_disjoint(&train));
        }
    }

    #[test]
    fn corpus_round_trip_and_corruption() {
        let sheets = synth_corpus(4, 10, 3).unwrap();
        let samples: Vec<Sample> = sheets
            .iter()
            .flat_map(|s| slice_snippets(s).unwrap())
            .collect();
        let corpus = split_songs(&samples, 0.25, 5).unwrap();
        let bytes = corpus.to_bytes();
        assert_eq!(CorpusFile::from_bytes(&bytes).unwrap(), corpus);

        let truncated = &bytes[..bytes.len() / 2];
        assert!(matches!(
            CorpusFile::from_bytes(truncated),
            Err(Error::CountMismatch { .. })
        ));

        let mut flipped = bytes.clone();
        let idx = bytes.len() - 10;
        flipped[idx] ^= 0x01;
        assert!(matches!(
            CorpusFile::from_bytes(&flipped),
            Err(Error::Checksum { .. }) | Err(Error::Validation(_)) | Err(Error::Range(_))
        ));

        let mut versioned = bytes.clone();
        versioned[5] = 9;
        assert!(matches!(
            CorpusFile::from_bytes(&versioned),
            Err(Error::VersionMismatch { found: 9, .. })
        ));
    }

    #[test]
    fn empty_corpus_round_trips() {
        let empty = CorpusFile {
            header: CorpusHeader {
                version: CORPUS_VERSION,
                split_seed: 0,
                val_fraction: 0.05,
                train_count: 0,
                val_count: 0,
            },
            records: vec![],
        };
        assert_eq!(CorpusFile::from_bytes(&empty.to_bytes()).unwrap(), empty);
    }

    #[test]
    fn synth_melody_is_in_key_and_chords_diatonic() {
        for seed in 0..20 {
            let sheets = synth_corpus(1, 8, seed).unwrap();
            let sheet = &sheets[0];
            let pcs: BTreeSet<u8> = sheet.melody_notes.iter().map(|n| n.pitch % 12).collect();
            let key = (0..12u8)
                .find(|&k| {
                    let scale: BTreeSet<u8> = major_scale(k).into_iter().collect();
                    pcs.is_subset(&scale)
                        && sheet
                            .chord_events
                            .iter()
                            .all(|c| c.pitches.iter().all(|p| scale.contains(&(p % 12))))
                })
                .is_some();
            assert!(key, "seed {seed}: no major key contains the song");
            assert_eq!(sheet.span_beats(), 32);
        }
    }

    #[test]
    fn synth_chord_tone_fraction() {
        let sheets = synth_corpus(120, 16, 42).unwrap();
        let mut total = 0usize;
        let mut chord_tones = 0usize;
        for sheet in &sheets {
            for note in &sheet.melody_notes {
                let beat = note.onset / 4;
                let chord = sheet
                    .chord_events
                    .iter()
                    .filter(|c| c.onset_beat <= beat)
                    .next_back()
                    .unwrap();
                total += 1;
                if chord.pitches.iter().any(|p| p % 12 == note.pitch % 12) {
                    chord_tones += 1;
                }
            }
        }
        assert!(total >= 10_000, "only {total} notes");
        let frac = chord_tones as f64 / total as f64;
        assert!((0.65..=0.75).contains(&frac), "chord-tone fraction {frac}");
    }

    #[test]
    fn synth_is_deterministic() {
        assert_eq!(synth_corpus(5, 8, 7).unwrap(), synth_corpus(5, 8, 7).unwrap());
        assert_ne!(synth_corpus(5, 8, 7).unwrap(), synth_corpus(5, 8, 8).unwrap());
        assert!(synth_corpus(0, 8, 1).is_err());
        assert!(synth_corpus(1, 7, 1).is_err());
    }
}
