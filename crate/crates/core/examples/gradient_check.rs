//! Central-difference check of the analytic gradients, in f64, for each
//! aggregator feeding the weighted cross-entropy.

use bagforge::aggregators::{AggregatorKind, TransMilConfig};
use bagforge::model::{weighted_ce, ClassWeights, ModelConfig, ModelParams, OneHot};
use bagforge::numcore::{finite_diff_check, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn main() -> bagforge::Result<()> {
    let (n, d, k) = (5, 6, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let data: Vec<f64> = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
    let bag = Tensor::from_vec(n, d, data)?;
    let target = OneHot::new(1, k)?;
    let weights = ClassWeights::from_values(vec![0.5, 2.0, 1.25])?;

    for kind in AggregatorKind::ALL {
        let mut config = ModelConfig::new(kind, d, k);
        config.attn_hidden = 4;
        config.transmil = TransMilConfig {
            d_model: 8,
            heads: 2,
            ..TransMilConfig::default()
        };
        let mut store = ParamStore::<f64>::new();
        let params = ModelParams::init(&config, &mut store, &mut rng)?;
        let report = finite_diff_check(
            |tape, s| {
                let x = tape.constant(bag.clone())?;
                let f = params.forward_classify(tape, s, x)?;
                weighted_ce(tape, f.scores, target, &weights)
            },
            &mut store,
            1e-6,
        )?;
        println!(
            "{kind:<9} {:>5} coordinates, max relative error {:.2e}",
            report.coordinates, report.max_rel_error
        );
    }
    Ok(())
}
