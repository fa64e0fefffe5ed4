//! Oracles and fixtures shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use candle_core::{DType, Tensor};
use harmonia::corpus::{slice_snippets, synth_corpus, Sample};
use harmonia::encodings::{
    corrupt, decode_chord_grid, encode_chord_grid, encode_melody_grid, transpose_chord, transpose_melody,
    ChordEvent, ChordGrid, CorruptionSpec, MelodyGrid, MelodyNote, MelodyStep, MelodyToken, BEATS, PAD,
    SLOTS, STEPS,
};
use harmonia::evaluation::HarmonyHistogram;
use harmonia::model::{
    corrupted_tensor, reparameterize, Frozen, GridBatch, Model, ModelConfig, ParamGroup, Teacher,
};
use harmonia::objectives::{confusion_objective, disc_objective, vae_objective, LossConfig};
use harmonia::training::{cycle_phases, Phase, TrainSchedule, Trainer, Variant};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn synth_samples(songs: usize, seed: u64) -> Vec<Sample> {
    synth_corpus(songs, 16, seed)
        .unwrap()
        .iter()
        .flat_map(|s| slice_snippets(s).unwrap())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Vae,
    Disc,
    Confusion,
}

/// Deterministic loss of a 64-bit model on a fixed two-sample batch.
fn loss_value(model: &Model, batch: &GridBatch, corrupted: &Tensor, kind: LossKind) -> Tensor {
    let cfg = LossConfig::from_model(model.config());
    let cond = model.condition(&batch.melodies, Frozen::NONE).unwrap();
    let post = model.encode_batch(&batch.chords, &cond, Frozen::NONE).unwrap();
    let z = reparameterize(&post, None).unwrap();
    match kind {
        LossKind::Vae => {
            let teacher = Teacher {
                targets: &batch.chord_tokens,
                rate: 1.0,
            };
            let out = model.decode_batch(&z, &cond, Some(teacher), None, Frozen::NONE).unwrap();
            vae_objective(&out.logits, &batch.chord_tokens, &post, &cfg).unwrap().0
        }
        LossKind::Disc => {
            let logits = model.discriminate_batch(&z, corrupted, None, Frozen::NONE).unwrap();
            disc_objective(&logits, &batch.melody_tokens).unwrap().0
        }
        LossKind::Confusion => {
            let logits = model.discriminate_batch(&z, corrupted, None, Frozen::NONE).unwrap();
            confusion_objective(&logits, &batch.melody_tokens, &post, &cfg).unwrap().0
        }
    }
}

/// Relative errors between backprop and central differences at `coords`
/// random parameter coordinates with a non-vanishing gradient.
pub fn gradient_check(kind: LossKind, coords: usize, seed: u64) -> Vec<f64> {
    let model = Model::with_dtype(ModelConfig::tiny(), seed, DType::F64).unwrap();
    let samples = synth_samples(2, seed);
    let batch = GridBatch::new(samples.iter().take(2).map(|s| (&s.chord, &s.melody))).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items: Vec<_> = batch
        .melody_grids
        .iter()
        .map(|m| corrupt(m, &CorruptionSpec::transpose(seed), &mut rng).unwrap().0)
        .collect();
    let corrupted = corrupted_tensor(&items).unwrap();

    let groups: &[ParamGroup] = match kind {
        LossKind::Vae => &[ParamGroup::Encoder, ParamGroup::Decoder],
        LossKind::Disc => &[ParamGroup::Discriminator],
        LossKind::Confusion => &[ParamGroup::Encoder, ParamGroup::Discriminator],
    };
    let loss = loss_value(&model, &batch, &corrupted, kind);
    let grads = loss.backward().unwrap();
    let mut candidates = Vec::new();
    for e in model.params().entries().iter().filter(|e| groups.contains(&e.group)) {
        let g = grads.get(e.var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (i, &v) in g.iter().enumerate() {
            if v.abs() > 1e-5 {
                candidates.push((e.var.clone(), i, v));
            }
        }
    }
    assert!(candidates.len() >= coords, "only {} live coordinates", candidates.len());

    let eps = 1e-5;
    (0..coords)
        .map(|_| {
            let (var, i, analytic) = candidates[rng.random_range(0..candidates.len())].clone();
            let shape = var.shape().clone();
            let base = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let eval = |delta: f64| {
                let mut v = base.clone();
                v[i] += delta;
                var.set(&Tensor::from_vec(v, shape.clone(), var.device()).unwrap()).unwrap();
                loss_value(&model, &batch, &corrupted, kind).to_scalar::<f64>().unwrap()
            };
            let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
            eval(0.0);
            (analytic - numeric).abs() / analytic.abs().max(numeric.abs())
        })
        .collect()
}

#[derive(Debug, Default)]
pub struct RoutingRun {
    pub steps: usize,
    pub violations: Vec<String>,
    /// Steps where an updated group did not change at all.
    pub stalled: usize,
}

/// Runs `steps` alternating updates and checks every step's group hashes.
pub fn routing_run(steps: usize) -> RoutingRun {
    let sched = TrainSchedule {
        i: 2,
        j: 1,
        k: 2,
        l: 2,
        batch_size: 4,
        routing_check_every: 0,
        ..TrainSchedule::default()
    };
    let samples = synth_samples(4, 3);
    let mut trainer = Trainer::new(ModelConfig::tiny(), sched.clone(), Variant::Dat).unwrap();
    let phases = cycle_phases(&sched, Variant::Dat);
    let hashes = |t: &Trainer| -> Vec<u64> {
        ParamGroup::ALL.iter().map(|&g| t.model().params().group_hash(g).unwrap()).collect()
    };
    let mut run = RoutingRun::default();
    for step in 0..steps {
        let chunk = samples.iter().cycle().skip(step * 4).take(4);
        let batch = GridBatch::new(chunk.map(|s| (&s.chord, &s.melody))).unwrap();
        let phase = phases[step % phases.len()];
        let before = hashes(&trainer);
        match phase {
            Phase::Vae => trainer.train_step_vae(&batch, 1e-3, 0.5).map(|_| ()),
            Phase::Disc => trainer.train_step_disc(&batch, 1e-3).map(|_| ()),
            Phase::EncAdv => trainer.train_step_enc_adv(&batch, 1e-3).map(|_| ()),
        }
        .unwrap();
        let after = hashes(&trainer);
        for (idx, g) in ParamGroup::ALL.iter().enumerate() {
            let changed = before[idx] != after[idx];
            let allowed = match phase {
                Phase::Vae => *g != ParamGroup::Discriminator,
                Phase::Disc => *g == ParamGroup::Discriminator,
                Phase::EncAdv => *g == ParamGroup::Encoder,
            };
            if changed && !allowed {
                run.violations.push(format!("step {step} {phase} touched {g}"));
            }
            if !changed && allowed {
                run.stalled += 1;
            }
        }
        run.steps += 1;
    }
    run
}

/// Naive recount: every step against every slot of its beat's chord.
pub fn brute_force_histogram(pairs: &[(MelodyGrid, ChordGrid)]) -> [usize; 5] {
    let mut counts = [0usize; 5];
    for (melody, chord) in pairs {
        let m = melody.tokens();
        let c = chord.tokens();
        for step in 0..STEPS {
            let tok = m[step];
            if tok >= 120 {
                continue;
            }
            let pc = tok % 12;
            let beat = step / 4;
            if c[beat * SLOTS] == PAD {
                continue;
            }
            let mut bucket = 4;
            for slot in (0..SLOTS).rev() {
                if c[beat * SLOTS + slot] == pc {
                    bucket = slot;
                }
            }
            counts[bucket] += 1;
        }
    }
    counts
}

/// Random pieces: synthetic songs mixed with arbitrary grids that include
/// all-PAD beats and repeated pitch classes.
pub fn random_pieces(n: usize, seed: u64) -> Vec<(MelodyGrid, ChordGrid)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let synth = synth_samples(n, seed);
    (0..n)
        .map(|i| {
            if i % 2 == 0 {
                let s = &synth[rng.random_range(0..synth.len())];
                return (s.melody.clone(), s.chord.clone());
            }
            let mut slots = [[PAD; SLOTS]; BEATS];
            for row in slots.iter_mut() {
                let k = rng.random_range(0..=SLOTS);
                for t in row.iter_mut().take(k) {
                    *t = rng.random_range(0..12);
                }
            }
            let mut sounding = false;
            let melody: Vec<u8> = (0..STEPS)
                .map(|_| {
                    let mut t = rng.random_range(0..122u8);
                    if t == 120 && !sounding {
                        t = 121;
                    }
                    sounding = t != 121;
                    t
                })
                .collect();
            (
                MelodyGrid::from_tokens(&melody).unwrap(),
                ChordGrid::new(slots).unwrap(),
            )
        })
        .collect()
}

pub fn histogram_matches_oracle(pieces: &[(MelodyGrid, ChordGrid)]) -> bool {
    let h: HarmonyHistogram = harmonia::evaluation::harmony_histogram(pieces.iter().map(|(m, c)| (m, c)));
    h.counts == brute_force_histogram(pieces)
}

/// A grid made of an optional all-PAD prefix followed by chord spans.
pub fn chord_grid() -> impl Strategy<Value = ChordGrid> {
    let span = (1usize..=8, prop::collection::vec(0u8..12, 1..=SLOTS));
    (0usize..4, prop::collection::vec(span, 1..10)).prop_map(|(lead, spans)| {
        let mut slots = [[PAD; SLOTS]; BEATS];
        let mut beat = lead;
        for (len, pcs) in spans {
            for row in slots.iter_mut().skip(beat).take(len) {
                row[..pcs.len()].copy_from_slice(&pcs);
            }
            beat += len;
        }
        // Carry the last chord to the end of the grid.
        if let Some(last) = slots[..beat.min(BEATS)].last().copied() {
            for row in slots.iter_mut().skip(beat) {
                *row = last;
            }
        }
        ChordGrid::new(slots).unwrap()
    })
}

/// Melodies kept below octave 8 so two transpositions never clamp.
pub fn melody_grid() -> impl Strategy<Value = MelodyGrid> {
    prop::collection::vec((0u32..3, 1u32..8, 0u8..96), 0..40).prop_map(|raw| {
        let mut notes = Vec::new();
        let mut t = 0;
        for (gap, dur, pitch) in raw {
            let onset = t + gap;
            if onset as usize >= STEPS {
                break;
            }
            notes.push(MelodyNote::new(onset, dur, pitch));
            t = onset + dur;
        }
        encode_melody_grid(&notes).unwrap()
    })
}

fn pitch_classes(m: &MelodyGrid) -> Vec<Option<u8>> {
    m.steps().iter().map(|s| s.pitch_class()).collect()
}

/// One randomized case of the encoding algebra: transposition composition,
/// the T_12 identity, chord-grid round-trip and the melody-token bijection.
pub fn encoding_case(c: &ChordGrid, m: &MelodyGrid, a: i32, b: i32, index: u8) -> Result<(), TestCaseError> {
    prop_assert_eq!(transpose_chord(&transpose_chord(c, a), b), transpose_chord(c, a + b));
    prop_assert_eq!(transpose_melody(&transpose_melody(m, a), b), transpose_melody(m, a + b));
    prop_assert_eq!(&transpose_chord(&transpose_chord(c, a), -a), c);
    prop_assert_eq!(&transpose_chord(c, 12), c);
    prop_assert_eq!(pitch_classes(&transpose_melody(m, 12)), pitch_classes(m));

    let events: Vec<ChordEvent> = decode_chord_grid(c)
        .iter()
        .map(|s| ChordEvent::from_pitch_classes(s.onset_beat, &s.pitch_classes))
        .collect();
    prop_assert_eq!(&encode_chord_grid(&events).unwrap(), c);
    prop_assert_eq!(&ChordGrid::from_tokens(&c.tokens()).unwrap(), c);

    prop_assert_eq!(&MelodyGrid::from_tokens(&m.tokens()).unwrap(), m);
    prop_assert_eq!(&encode_melody_grid(&m.notes()).unwrap(), m);
    let token = MelodyToken::new(index).unwrap();
    let step = MelodyStep::try_from(token).unwrap();
    prop_assert_eq!(MelodyToken::from(step), token);
    Ok(())
}

