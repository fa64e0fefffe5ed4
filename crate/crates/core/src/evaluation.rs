//! Objective metrics: the transposition-similarity probe, the harmony
//! histogram, swap-condition harmonization and report emission.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::Sample;
use crate::encodings::{
    transpose_chord, transpose_melody, ChordGrid, MelodyGrid, MelodyStep, PAD, SLOTS, STEPS,
};
use crate::error::{Error, Result};
use crate::model::{GridBatch, Model};

/// Samples encoded per forward pass.
const EVAL_CHUNK: usize = 64;

/// Cosine similarity; zero if either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Mean cosine similarity between latent codes of a sample and its
/// transposition by `i` semitones, for `i = 1..=12`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityProfile {
    pub values: [f64; 12],
}

impl SimilarityProfile {
    /// Value for shift `i ∈ 1..=12`.
    pub fn at(&self, i: usize) -> f64 {
        self.values[i - 1]
    }

    /// Mean over the non-identity shifts `1..=11`.
    pub fn mean_nontrivial(&self) -> f64 {
        self.values[..11].iter().sum::<f64>() / 11.0
    }

    /// Shift in `1..=11` with the lowest similarity.
    pub fn argmin_nontrivial(&self) -> usize {
        (1..=11)
            .min_by(|&a, &b| self.at(a).total_cmp(&self.at(b)))
            .unwrap()
    }

    pub fn to_text(&self) -> String {
        self.values
            .iter()
            .enumerate()
            .map(|(i, v)| format!("i={} similarity={v}\n", i + 1))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("i,similarity\n");
        for (i, v) in self.values.iter().enumerate() {
            let _ = writeln!(s, "{},{v}", i + 1);
        }
        s
    }
}

/// The probe transposes chord and melody jointly by `i mod 12` semitones.
pub fn probe_shift(i: usize) -> i32 {
    (i % 12) as i32
}

fn encode_means(model: &Model, pairs: &[(ChordGrid, MelodyGrid)]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(EVAL_CHUNK) {
        let batch = GridBatch::new(chunk.iter().map(|(c, m)| (c, m)))?;
        let post = model.encode_grids(&batch)?;
        let means: Vec<Vec<f64>> = post.mean.to_dtype(candle_core::DType::F64)?.to_vec2()?;
        out.extend(means);
    }
    Ok(out)
}

/// Similarity profile from posterior means over untransposed samples.
pub fn transposition_similarity(model: &Model, samples: &[&Sample]) -> Result<SimilarityProfile> {
    if samples.is_empty() {
        return Err(Error::Empty("similarity probe needs evaluation samples".into()));
    }
    if let Some(s) = samples.iter().find(|s| s.transposition_tag != 0) {
        return Err(Error::Contract(format!(
            "probe sample from '{}' is already transposed",
            s.song_id
        )));
    }
    let base: Vec<(ChordGrid, MelodyGrid)> = samples
        .iter()
        .map(|s| (s.chord.clone(), s.melody.clone()))
        .collect();
    let z0 = encode_means(model, &base)?;
    let mut values = [0.0; 12];
    for (i, slot) in values.iter_mut().enumerate() {
        let shift = probe_shift(i + 1);
        let moved: Vec<(ChordGrid, MelodyGrid)> = base
            .iter()
            .map(|(c, m)| (transpose_chord(c, shift), transpose_melody(m, shift)))
            .collect();
        let zi = if shift == 0 { z0.clone() } else { encode_means(model, &moved)? };
        *slot = z0.iter().zip(&zi).map(|(a, b)| cosine(a, b)).sum::<f64>() / z0.len() as f64;
    }
    Ok(SimilarityProfile { values })
}

/// Position of a melody note within its concurrent chord.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bucket {
    Root,
    Third,
    Fifth,
    Seventh,
    Others,
}

impl Bucket {
    pub const ALL: [Bucket; 5] = [
        Bucket::Root,
        Bucket::Third,
        Bucket::Fifth,
        Bucket::Seventh,
        Bucket::Others,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Bucket::Root => "root",
            Bucket::Third => "third",
            Bucket::Fifth => "fifth",
            Bucket::Seventh => "seventh",
            Bucket::Others => "others",
        }
    }

    fn from_slot(p: usize) -> Self {
        [Bucket::Root, Bucket::Third, Bucket::Fifth, Bucket::Seventh][p]
    }
}

/// Onset counts per chord position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct HarmonyHistogram {
    pub counts: [usize; 5],
}

impl HarmonyHistogram {
    pub fn counted_notes(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn count(&self, b: Bucket) -> usize {
        self.counts[b as usize]
    }

    /// Fraction of counted onsets in `b`; zero when nothing was counted.
    pub fn fraction(&self, b: Bucket) -> f64 {
        let n = self.counted_notes();
        if n == 0 {
            0.0
        } else {
            self.count(b) as f64 / n as f64
        }
    }

    pub fn fractions(&self) -> [f64; 5] {
        Bucket::ALL.map(|b| self.fraction(b))
    }

    pub fn merge(&mut self, other: &HarmonyHistogram) {
        for (a, b) in self.counts.iter_mut().zip(other.counts) {
            *a += b;
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for b in Bucket::ALL {
            let _ = writeln!(s, "bucket={} fraction={} count={}", b.name(), self.fraction(b), self.count(b));
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bucket,fraction,count\n");
        for b in Bucket::ALL {
            let _ = writeln!(s, "{},{},{}", b.name(), self.fraction(b), self.count(b));
        }
        s
    }
}

/// Classifies one onset pitch class against a chord row, or `None` for an
/// all-PAD row.
pub fn classify(pitch_class: u8, row: &[u8; SLOTS]) -> Option<Bucket> {
    if row[0] == PAD {
        return None;
    }
    Some(
        row.iter()
            .position(|&t| t == pitch_class)
            .map(Bucket::from_slot)
            .unwrap_or(Bucket::Others),
    )
}

/// Counts melody onsets by their position in the concurrent chord.
pub fn harmony_histogram<'a, I>(pairs: I) -> HarmonyHistogram
where
    I: IntoIterator<Item = (&'a MelodyGrid, &'a ChordGrid)>,
{
    let mut h = HarmonyHistogram::default();
    for (melody, chord) in pairs {
        for s in 0..STEPS {
            if let MelodyStep::Onset { pitch_class, .. } = melody.step(s) {
                if let Some(b) = classify(pitch_class, chord.row(s / 4)) {
                    h.counts[b as usize] += 1;
                }
            }
        }
    }
    h
}

/// Greedy chord grids for style sources `a` under melodies `b`, pairwise.
pub fn swap_harmonize_batch(model: &Model, sources: &[&Sample], melodies: &[&MelodyGrid]) -> Result<Vec<ChordGrid>> {
    if sources.len() != melodies.len() {
        return Err(Error::Contract("sources and melodies differ in length".into()));
    }
    let mut out = Vec::with_capacity(sources.len());
    for (src, mel) in sources.chunks(EVAL_CHUNK).zip(melodies.chunks(EVAL_CHUNK)) {
        let style = GridBatch::new(src.iter().map(|s| (&s.chord, &s.melody)))?;
        let post = model.encode_grids(&style)?;
        let toks: Vec<u32> = mel
            .iter()
            .flat_map(|m| m.tokens().into_iter().map(u32::from))
            .collect();
        let melodies = Tensor::from_vec(toks, (mel.len(), STEPS), &candle_core::Device::Cpu)?;
        out.extend(model.greedy_grids(&post.mean, &melodies)?);
    }
    Ok(out)
}

/// Harmonizes `melody_b` in the style of `source_a`: posterior mean of A,
/// greedily decoded under B.
pub fn swap_harmonize(model: &Model, source_a: &Sample, melody_b: &MelodyGrid) -> Result<ChordGrid> {
    Ok(swap_harmonize_batch(model, &[source_a], &[melody_b])?.remove(0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllabilityReport {
    /// Histogram over (melody B, generated chords) pairs.
    pub generated: HarmonyHistogram,
    /// Histogram of the unswapped evaluation set.
    pub ground_truth: HarmonyHistogram,
    pub pairs: usize,
}

/// Swaps melodies along a seeded cyclic pairing: after shuffling, sample
/// `k` supplies the style for the melody of sample `k + 1` (wrapping).
pub fn evaluate_controllability(model: &Model, samples: &[&Sample], seed: u64) -> Result<ControllabilityReport> {
    if samples.len() < 2 {
        return Err(Error::Empty("controllability needs at least two samples".into()));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = order.len();
    let sources: Vec<&Sample> = order.iter().map(|&i| samples[i]).collect();
    let melodies: Vec<&MelodyGrid> = (0..n).map(|k| &samples[order[(k + 1) % n]].melody).collect();
    let generated = swap_harmonize_batch(model, &sources, &melodies)?;
    Ok(ControllabilityReport {
        generated: harmony_histogram(melodies.iter().copied().zip(generated.iter())),
        ground_truth: harmony_histogram(samples.iter().map(|s| (&s.melody, &s.chord))),
        pairs: n,
    })
}

/// Everything `eval` reports for one checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub similarity: SimilarityProfile,
    pub controllability: ControllabilityReport,
}

pub fn evaluate(model: &Model, samples: &[&Sample], seed: u64) -> Result<EvalReport> {
    Ok(EvalReport {
        similarity: transposition_similarity(model, samples)?,
        controllability: evaluate_controllability(model, samples, seed)?,
    })
}

/// Writes one file per metric (text and CSV) into `dir`.
pub fn write_reports(report: &EvalReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = [
        ("similarity.txt", report.similarity.to_text()),
        ("similarity.csv", report.similarity.to_csv()),
        ("harmony.txt", report.controllability.generated.to_text()),
        ("harmony.csv", report.controllability.generated.to_csv()),
        ("harmony_ground_truth.txt", report.controllability.ground_truth.to_text()),
        ("harmony_ground_truth.csv", report.controllability.ground_truth.to_csv()),
    ];
    let mut written = Vec::new();
    for (name, body) in files {
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

/// Side-by-side table: one row per metric, one column per named report.
pub fn compare_table(named: &[(String, EvalReport)]) -> String {
    let mut s = String::from("metric");
    for (name, _) in named {
        let _ = write!(s, ",{name}");
    }
    s.push('\n');
    for i in 1..=12 {
        let _ = write!(s, "similarity_{i}");
        for (_, r) in named {
            let _ = write!(s, ",{}", r.similarity.at(i));
        }
        s.push('\n');
    }
    s.push_str("similarity_mean_1_11");
    for (_, r) in named {
        let _ = write!(s, ",{}", r.similarity.mean_nontrivial());
    }
    s.push('\n');
    for b in Bucket::ALL {
        let _ = write!(s, "harmony_{}", b.name());
        for (_, r) in named {
            let _ = write!(s, ",{}", r.controllability.generated.fraction(b));
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{slice_snippets, synth_corpus};
    use crate::model::ModelConfig;

    fn samples() -> Vec<Sample> {
        synth_corpus(3, 8, 9)
            .unwrap()
            .iter()
            .flat_map(|s| slice_snippets(s).unwrap())
            .collect()
    }

    #[test]
    fn cosine_basics() {
        assert!((cosine(&[1.0, 2.0], &[1.0, 2.0]) - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert!((cosine(&[1.0, 0.0], &[-2.0, 0.0]) + 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[0.0], &[1.0]), 0.0);
    }

    #[test]
    fn classify_examples() {
        assert_eq!(classify(4, &[0, 4, 7, 12]), Some(Bucket::Third));
        assert_eq!(classify(2, &[0, 4, 7, 12]), Some(Bucket::Others));
        assert_eq!(classify(0, &[0, 4, 0, 12]), Some(Bucket::Root));
        assert_eq!(classify(0, &[12; 4]), None);
    }

    #[test]
    fn untrained_probe_structure() {
        let model = Model::new(ModelConfig::tiny(), 0).unwrap();
        let s = samples();
        let refs: Vec<&Sample> = s.iter().collect();
        let p = transposition_similarity(&model, &refs).unwrap();
        assert!((p.at(12) - 1.0).abs() < 1e-6);
        assert!(p.values.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(p.to_csv().lines().count(), 13);
        let shifted = s[0].transposed(3);
        assert!(matches!(
            transposition_similarity(&model, &[&shifted]),
            Err(Error::Contract(_))
        ));
        assert!(transposition_similarity(&model, &[]).is_err());
    }

    #[test]
    fn self_swap_is_reconstruction_and_valid() {
        let model = Model::new(ModelConfig::tiny(), 1).unwrap();
        let s = samples();
        let out = swap_harmonize(&model, &s[0], &s[0].melody).unwrap();
        let z = model.encode(&s[0].chord, &s[0].melody).unwrap().mean;
        let batch = GridBatch::new([(&s[0].chord, &s[0].melody)]).unwrap();
        let zt = Tensor::from_vec(z.clone(), (1, z.len()), &candle_core::Device::Cpu)
            .unwrap()
            .to_dtype(model.dtype())
            .unwrap();
        assert_eq!(model.greedy_grids(&zt, &batch.melodies).unwrap()[0], out);
        assert_eq!(ChordGrid::new(*out.rows()).unwrap(), out);
    }

    #[test]
    fn controllability_counts_every_sample() {
        let model = Model::new(ModelConfig::tiny(), 2).unwrap();
        let s = samples();
        let refs: Vec<&Sample> = s.iter().collect();
        let a = evaluate_controllability(&model, &refs, 5).unwrap();
        let b = evaluate_controllability(&model, &refs, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.pairs, refs.len());
        let f: f64 = a.ground_truth.fractions().iter().sum();
        assert!((f - 1.0).abs() < 1e-9);
        assert!(evaluate_controllability(&model, &refs[..1], 5).is_err());
    }

    #[test]
    fn compare_table_columns() {
        let model = Model::new(ModelConfig::tiny(), 2).unwrap();
        let s = samples();
        let refs: Vec<&Sample> = s.iter().collect();
        let r = evaluate(&model, &refs, 0).unwrap();
        let t = compare_table(&[("dat".into(), r.clone()), ("non-dat".into(), r)]);
        assert!(t.lines().all(|l| l.split(',').count() == 3));
        assert_eq!(t.lines().count(), 1 + 12 + 1 + 5);
    }
}
