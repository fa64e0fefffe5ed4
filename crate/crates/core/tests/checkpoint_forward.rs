//! A reloaded checkpoint reproduces the saved model's forward passes bit for bit.

mod common;

use candle_core::{DType, Tensor};
use harmonia::model::{load_checkpoint, save_checkpoint, Frozen, GridBatch, ModelConfig};
use harmonia::training::{TrainSchedule, Trainer, Variant};

fn bits(t: &Tensor) -> Vec<u32> {
    t.to_dtype(DType::F32)
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_vec1::<f32>()
        .unwrap()
        .into_iter()
        .map(f32::to_bits)
        .collect()
}

#[test]
fn reloaded_model_forward_is_bitwise_identical() {
    let samples = common::synth_samples(3, 9);
    let batch = GridBatch::new(samples.iter().take(8).map(|s| (&s.chord, &s.melody))).unwrap();
    let sched = TrainSchedule {
        batch_size: 8,
        ..TrainSchedule::default()
    };
    let mut t = Trainer::new(ModelConfig::tiny(), sched, Variant::Dat).unwrap();
    t.train_step_vae(&batch, 1e-3, 0.5).unwrap();
    t.train_step_disc(&batch, 1e-3).unwrap();
    t.train_step_enc_adv(&batch, 1e-3).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(t.model(), 3, &path).unwrap();
    let (loaded, step) = load_checkpoint(&path, Some(t.model().config())).unwrap();
    assert_eq!(step, 3);

    let forward = |m: &harmonia::model::Model| {
        let post = m.encode_grids(&batch).unwrap();
        let grids = m.greedy_grids(&post.mean, &batch.melodies).unwrap();
        let disc = m
            .discriminate_batch(&post.mean, &batch.melodies, None, Frozen::ALL)
            .unwrap();
        (bits(&post.mean), bits(&post.log_var), grids, bits(&disc))
    };
    assert_eq!(forward(t.model()), forward(&loaded));
}
