//! Train each aggregator on a small synthetic problem and compare held-out
//! accuracy. Runs in a few seconds in release mode.

use bagforge::aggregators::{AggregatorKind, TransMilConfig};
use bagforge::datastore::{synthesize_bags, SynthConfig};
use bagforge::metrics::macro_metrics;
use bagforge::model::{class_weights, ModelConfig};
use bagforge::optim::{evaluate, train_on_bags, TrainConfig};
use bagforge::Bag;

fn main() -> bagforge::Result<()> {
    let cfg = SynthConfig {
        bags_per_class: 20,
        d: 32,
        separation: 4.0,
        ..SynthConfig::default()
    };
    let bags = synthesize_bags(&cfg)?;
    let (mut train, mut val, mut test) = (Vec::<Bag>::new(), Vec::new(), Vec::new());
    for (i, b) in bags.into_iter().enumerate() {
        match i % 5 {
            0 => val.push(b),
            1 => test.push(b),
            _ => train.push(b),
        }
    }
    let mut counts = vec![0; cfg.k];
    for b in &train {
        counts[b.label as usize] += 1;
    }
    let weights = class_weights(&counts)?;
    println!("train {} / val {} / test {}", train.len(), val.len(), test.len());

    for kind in AggregatorKind::ALL {
        let mut model = ModelConfig::new(kind, cfg.d, cfg.k);
        model.transmil = TransMilConfig {
            d_model: 32,
            heads: 4,
            ..TransMilConfig::default()
        };
        let mut tc = TrainConfig::new(model);
        tc.epochs = 15;
        tc.patience = 5;
        tc.optimizer.lr = if kind == AggregatorKind::TransMil { 1e-3 } else { 5e-3 };
        let outcome = train_on_bags(&train, &val, &weights, &tc)?;
        let report = macro_metrics(&evaluate(&outcome.best, &test)?)?;
        println!(
            "{kind:<9} best epoch {:>2}  val F1 {:.3}  test acc {:.3}  test F1 {:.3}",
            outcome.best_epoch, outcome.best_val_f1, report.acc, report.f1
        );
    }
    Ok(())
}
