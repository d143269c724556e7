use std::collections::BTreeMap;

use candle_core::DType;
use qmaxvit::checkpoint::{self, CheckpointMeta};
use qmaxvit::data::{load_dataset, synth_shapes_dataset, write_dataset, LoadOptions};
use qmaxvit::model::{ModelConfig, QMaxVitUnet};
use qmaxvit::train::{fit, predict, History, TrainConfig};
use qmaxvit::Error;

fn opts(size: usize) -> LoadOptions {
    LoadOptions {
        size,
        num_classes: 4,
        channels: 1,
        edge_supervision: true,
    }
}

#[test]
fn dataset_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let mut samples = synth_shapes_dataset(6, 32, 4, 21).unwrap();
    samples[2].spacing = (0.8, 1.25);
    write_dataset(dir.path(), &samples).unwrap();
    let back = load_dataset(dir.path(), &opts(32)).unwrap();
    assert_eq!(back.len(), samples.len());
    for (a, b) in samples.iter().zip(&back) {
        assert_eq!((&a.id, &a.patient, a.spacing), (&b.id, &b.patient, b.spacing));
        assert_eq!(a.scribble, b.scribble);
        assert_eq!(a.dense_gt, b.dense_gt);
        let err = a.image.iter().zip(b.image.iter()).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
        assert!(err <= 0.5 / 255.0 + 1e-6, "image error {err}");
    }
}

#[test]
fn loading_resamples_to_the_requested_size() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &synth_shapes_dataset(2, 48, 4, 22).unwrap()).unwrap();
    let back = load_dataset(dir.path(), &opts(32)).unwrap();
    for s in &back {
        assert_eq!(s.size(), (32, 32));
        s.validate().unwrap();
    }
}

#[test]
fn missing_scribble_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &synth_shapes_dataset(3, 32, 4, 23).unwrap()).unwrap();
    std::fs::remove_file(dir.path().join("scribbles/case0001.png")).unwrap();
    let err = load_dataset(dir.path(), &opts(32)).unwrap_err();
    assert!(matches!(err, Error::Io { .. } | Error::Data(_)), "{err:?}");
}

#[test]
fn checkpoint_round_trip_preserves_weights_and_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.safetensors");
    let model = QMaxVitUnet::new(&ModelConfig::desk(4, 32), DType::F32, 5).unwrap();
    let mut meta = CheckpointMeta::default();
    meta.extra.insert("note".into(), "hello".into());
    checkpoint::save(&path, &model, &meta).unwrap();

    let (cfg, tensors, meta_back) = checkpoint::read(&path).unwrap();
    assert_eq!(&cfg, model.config());
    assert_eq!(meta_back.extra.get("note").map(String::as_str), Some("hello"));
    let original: BTreeMap<_, _> = model.store().snapshot().unwrap();
    assert_eq!(tensors.len(), original.len());
    for (name, t) in &original {
        let a = t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = tensors[name].flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()), "{name}");
    }
    let count: usize = original.values().map(|t| t.elem_count()).sum();
    assert_eq!(checkpoint::parameter_count(&path).unwrap(), count);

    let (loaded, _) = checkpoint::load(&path, DType::F32).unwrap();
    let data = synth_shapes_dataset(3, 32, 4, 24).unwrap();
    assert_eq!(predict(&model, &data, 2).unwrap(), predict(&loaded, &data, 2).unwrap());
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.safetensors");
    std::fs::write(&path, b"not a checkpoint").unwrap();
    assert!(checkpoint::load(&path, DType::F32).is_err());
}

#[test]
fn one_epoch_fit_records_history_and_saves() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_shapes_dataset(10, 32, 4, 25).unwrap();
    let mut cfg = TrainConfig::new(ModelConfig::desk(4, 32));
    cfg.epochs = 1;
    let mut seen = 0;
    let r = fit(&cfg, &data[..8], Some(&data[8..]), |_| seen += 1).unwrap();
    assert_eq!(seen, 1);
    assert_eq!(r.history.len(), 1);
    assert_eq!(r.best_epoch, 1);
    let rec = r.history.records[0];
    assert_eq!(rec.epoch, 1);
    assert_eq!(rec.lr, cfg.lr);
    assert!(rec.val_dsc.is_finite() && rec.loss_total.is_finite());

    let hist = dir.path().join("history.csv");
    r.history.write_csv(&hist).unwrap();
    assert_eq!(History::read_csv(&hist).unwrap(), r.history);

    let ckpt = dir.path().join("m.safetensors");
    checkpoint::save(&ckpt, &r.trainer.model, &CheckpointMeta::default()).unwrap();
    let (m, _) = checkpoint::load(&ckpt, DType::F32).unwrap();
    assert_eq!(m.config(), r.trainer.model.config());
}

#[test]
fn training_loss_decreases() {
    let data = synth_shapes_dataset(16, 32, 4, 26).unwrap();
    let mut cfg = TrainConfig::new(ModelConfig::desk(4, 32));
    cfg.epochs = 10;
    let r = fit(&cfg, &data, None, |_| {}).unwrap();
    let first = r.history.records[0].loss_total;
    let last = r.history.records[9].loss_total;
    assert!(last < first, "loss went from {first} to {last}");
    assert_eq!(r.best_epoch, 10);
}
