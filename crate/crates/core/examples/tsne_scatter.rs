//! Embed bag means in 2-D with t-SNE and write a labelled scatter plot.

use bagforge::datastore::{class_names, synthesize_bags, SynthConfig};
use bagforge::tsne::{centroid_accuracy_2d, emit_scatter, run_tsne, EmbeddingSet, TsneConfig};

fn main() -> bagforge::Result<()> {
    let cfg = SynthConfig {
        bags_per_class: 25,
        d: 48,
        ..SynthConfig::default()
    };
    let set = EmbeddingSet::from_bags(&synthesize_bags(&cfg)?)?;
    let result = run_tsne(
        &set,
        &TsneConfig {
            iterations: 500,
            ..TsneConfig::default()
        },
    )?;
    println!(
        "{} points, KL {:.3} -> {:.3}, 2-D centroid accuracy {:.3}",
        set.len(),
        result.initial_kl,
        result.final_kl,
        centroid_accuracy_2d(&result.coords, &set.labels)
    );
    let path = std::env::temp_dir().join("bagforge-tsne.svg");
    emit_scatter(&result.coords, &set.labels, &class_names(cfg.k), &path)?;
    println!("wrote {}", path.display());
    Ok(())
}
