use std::path::PathBuf;

use lrgan_core::eval::{make_synthetic_dataset, DatasetKind, SyntheticDatasetSpec};
use lrgan_core::model::{Model, ModelConfig};
use lrgan_core::trainer::{checkpoint, train, Dataset, Observer, TrainConfig, TrainState};
use lrgan_core::Error;

fn setup(epochs: usize) -> (TrainConfig, Model, Dataset<f64>, TrainState<f64>) {
    let mc = ModelConfig {
        resolutions: vec![8, 16],
        channels: vec![4, 4, 4],
        lrm_resolution: 8,
        metadata_dim: 4,
        ..ModelConfig::tiny()
    };
    let tc = TrainConfig {
        epochs,
        batch: 4,
        seed: 21,
        eval_samples: 6,
        eval_every: 2,
        ..Default::default()
    };
    let (model, state) = TrainState::<f64>::init(&mc, &tc).unwrap();
    let imgs =
        make_synthetic_dataset(&SyntheticDatasetSpec::new(DatasetKind::Mirror, 10, 16, 3)).unwrap();
    let data = Dataset::prepare(imgs, &mc, None).unwrap();
    (tc, model, data, state)
}

/// Saves a checkpoint after epoch `at`, then aborts the run.
struct Interrupt {
    at: usize,
    path: PathBuf,
}

impl Observer<f64> for Interrupt {
    fn on_epoch(&mut self, _: &Model, state: &TrainState<f64>) -> lrgan_core::Result<()> {
        if state.epoch == self.at {
            state.save(&self.path)?;
            return Err(Error::Usage("interrupted".into()));
        }
        Ok(())
    }
}

#[test]
fn resume_from_epoch_three_matches_an_uninterrupted_run() {
    let (tc, model, data, mut straight) = setup(5);
    train(&tc, &model, &data, &mut straight, &mut ()).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("epoch3.ckpt");
    let (_, _, _, mut first) = setup(5);
    let stopped = train(
        &tc,
        &model,
        &data,
        &mut first,
        &mut Interrupt {
            at: 3,
            path: path.clone(),
        },
    );
    assert!(matches!(stopped, Err(Error::Usage(_))));
    drop(first);

    let mut resumed = TrainState::<f64>::load(&path, &model, &tc).unwrap();
    assert_eq!(resumed.epoch, 3);
    train(&tc, &model, &data, &mut resumed, &mut ()).unwrap();

    assert_eq!(resumed.history, straight.history);
    assert_eq!(resumed.to_bytes().unwrap(), straight.to_bytes().unwrap());
}

#[test]
fn saved_state_reloads_bit_exactly() {
    let (tc, model, data, mut state) = setup(2);
    train(&tc, &model, &data, &mut state, &mut ()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.ckpt");
    state.save(&path).unwrap();
    let back = TrainState::<f64>::load(&path, &model, &tc).unwrap();
    assert_eq!(back.to_bytes().unwrap(), state.to_bytes().unwrap());
    assert_eq!(std::fs::read(&path).unwrap(), state.to_bytes().unwrap());
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let (tc, model, _, state) = setup(1);
    let bytes = state.to_bytes().unwrap();
    let dir = tempfile::tempdir().unwrap();

    let cut = dir.path().join("cut.ckpt");
    std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(
        TrainState::<f64>::load(&cut, &model, &tc),
        Err(Error::Format { .. })
    ));

    let mut v2 = bytes.clone();
    v2[4..8].copy_from_slice(&2u32.to_le_bytes());
    let v2_path = dir.path().join("v2.ckpt");
    std::fs::write(&v2_path, &v2).unwrap();
    assert!(matches!(
        TrainState::<f64>::load(&v2_path, &model, &tc),
        Err(Error::UnsupportedVersion(2))
    ));

    assert!(checkpoint::decode(b"").is_err());
}
