//! Train briefly, save a checkpoint, reload it and confirm identical predictions.

use bagforge::aggregators::AggregatorKind;
use bagforge::datastore::{class_names, synthesize_bags, Checkpoint, CheckpointHeader, SynthConfig};
use bagforge::model::{ClassWeights, ModelConfig};
use bagforge::optim::{predict_all, train_on_bags, TrainConfig};

fn main() -> bagforge::Result<()> {
    let cfg = SynthConfig {
        bags_per_class: 10,
        d: 16,
        ..SynthConfig::default()
    };
    let (val, train): (Vec<_>, Vec<_>) = synthesize_bags(&cfg)?
        .into_iter()
        .enumerate()
        .partition(|(i, _)| i % 4 == 0);
    let train: Vec<_> = train.into_iter().map(|(_, b)| b).collect();
    let val: Vec<_> = val.into_iter().map(|(_, b)| b).collect();

    let mut tc = TrainConfig::new(ModelConfig::new(AggregatorKind::MilAtt, cfg.d, cfg.k));
    tc.epochs = 5;
    tc.optimizer.lr = 5e-3;
    let outcome = train_on_bags(&train, &val, &ClassWeights::uniform(cfg.k), &tc)?;

    let header = CheckpointHeader {
        config_hash: "example".into(),
        epoch: outcome.best_epoch,
        val_macro_f1: outcome.best_val_f1,
        model: tc.model.clone(),
        class_names: class_names(cfg.k),
    };
    let path = std::env::temp_dir().join("bagforge-example.ckpt");
    Checkpoint::from_model(&outcome.best, header).save(&path)?;

    let restored = Checkpoint::load(&path)?;
    let model = restored.to_model()?;
    let before = predict_all(&outcome.best, &val)?;
    let after = predict_all(&model, &val)?;
    assert_eq!(before, after);
    println!(
        "{}: epoch {}, val F1 {:.3}, {} tensors, predictions identical",
        path.display(),
        restored.header.epoch,
        restored.header.val_macro_f1,
        restored.tensors.len()
    );
    Ok(())
}
