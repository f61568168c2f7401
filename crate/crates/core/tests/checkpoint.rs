mod common;

use common::Fixture;
use xdlm::model::{
    build_model, load_checkpoint, save_checkpoint, sidecar_path, CheckpointMeta, ForwardMode, ModelInput, Segment,
    SequenceInput,
};
use xdlm::schedule::{make_schedule, ScheduleKind};
use xdlm::Error;

fn meta(fx: &Fixture) -> CheckpointMeta {
    CheckpointMeta {
        config: fx.model.clone(),
        vocab_hash: fx.vocab.content_hash(),
        schedule: make_schedule(ScheduleKind::LinearMask, fx.train.diffusion_steps).unwrap().descriptor(),
        noise: "absorbing".into(),
        step: 7,
        dtype: String::new(),
        param_hash: String::new(),
    }
}

fn input() -> ModelInput {
    ModelInput::from_sequences(&[
        SequenceInput {
            encoder: Segment::monolingual(vec![6, 7, 8], 0),
            decoder: Segment::monolingual(vec![3, 9, 3, 3], 1),
            timestep: 5,
        },
        SequenceInput {
            encoder: Segment::monolingual(vec![10], 0),
            decoder: Segment::monolingual(vec![3, 3], 1),
            timestep: 1,
        },
    ])
    .unwrap()
}

#[test]
fn round_trip_is_bit_identical() {
    let fx = Fixture::copy(32);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.safetensors");
    let model = build_model(&fx.model, 9).unwrap();
    let written = save_checkpoint(&model, &path, &meta(&fx)).unwrap();
    assert!(sidecar_path(&path).exists());
    let (loaded, read) = load_checkpoint(&path, Some(&fx.vocab.content_hash())).unwrap();
    assert_eq!(read, written);
    assert_eq!(read.step, 7);
    assert_eq!(loaded.param_hash().unwrap(), model.param_hash().unwrap());
    for id in 0..fx.vocab.len() as u32 {
        assert_eq!(loaded.token_embedding_row(id).unwrap(), model.token_embedding_row(id).unwrap());
    }
    let a = model.forward(&input(), ForwardMode::Eval).unwrap();
    let b = loaded.forward(&input(), ForwardMode::Eval).unwrap();
    let bits = |v: Vec<Vec<Vec<f64>>>| v.into_iter().flatten().flatten().map(f64::to_bits).collect::<Vec<_>>();
    assert_eq!(bits(a.token_log_probs().unwrap()), bits(b.token_log_probs().unwrap()));
    assert_eq!(a.length_scores().unwrap(), b.length_scores().unwrap());
}

#[test]
fn vocabulary_mismatch_is_refused() {
    let fx = Fixture::copy(32);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.safetensors");
    save_checkpoint(&build_model(&fx.model, 1).unwrap(), &path, &meta(&fx)).unwrap();
    let err = load_checkpoint(&path, Some("not-the-hash")).err().unwrap();
    assert!(matches!(err, Error::Checkpoint(_)), "{err}");
    assert!(load_checkpoint(&path, None).is_ok());
}

#[test]
fn tampered_weights_are_detected() {
    let fx = Fixture::copy(32);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.safetensors");
    save_checkpoint(&build_model(&fx.model, 1).unwrap(), &path, &meta(&fx)).unwrap();
    let other = dir.path().join("b.safetensors");
    save_checkpoint(&build_model(&fx.model, 2).unwrap(), &other, &meta(&fx)).unwrap();
    std::fs::copy(&other, &path).unwrap();
    assert!(load_checkpoint(&path, None).is_err());
}

#[test]
fn missing_checkpoint_names_the_path() {
    let err = load_checkpoint(std::path::Path::new("/nonexistent/x.safetensors"), None).err().unwrap();
    assert!(err.to_string().contains("/nonexistent/x"), "{err}");
}
