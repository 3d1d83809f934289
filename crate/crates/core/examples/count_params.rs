//! Trainable parameter counts for every aggregator at the default widths.

use bagforge::aggregators::AggregatorKind;
use bagforge::model::{Model, ModelConfig};

fn main() -> bagforge::Result<()> {
    let (d, k) = (512, 4);
    for kind in AggregatorKind::ALL {
        let model = Model::new(ModelConfig::new(kind, d, k), 0)?;
        let breakdown = model.count_params();
        println!("{kind:<9} {:>10}", breakdown.total);
        if kind == AggregatorKind::MilAtt {
            for (name, n) in &breakdown.entries {
                println!("    {name:<24} {n:>8}");
            }
        }
    }
    Ok(())
}
