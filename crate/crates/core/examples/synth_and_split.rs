//! Generate a synthetic bag dataset on disk and assign stratified splits.
//!
//! `cargo run --example synth_and_split [out_dir]`

use std::path::PathBuf;

use bagforge::datastore::{stratified_split, synthesize_dataset, Grouping, Split, SplitSpec, SynthConfig};

fn main() -> bagforge::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("bagforge-synth"));

    let cfg = SynthConfig {
        bags_per_class: 40,
        d: 64,
        ..SynthConfig::default()
    };
    let report = synthesize_dataset(&cfg, &out)?;
    println!(
        "wrote {} bags to {} (centroid probe accuracy {:.3})",
        report.manifest.entries.len(),
        out.display(),
        report.probe_accuracy
    );

    for grouping in [Grouping::Core, Grouping::Tma] {
        let spec = SplitSpec {
            grouping,
            force: true,
            ..SplitSpec::default()
        };
        let split = stratified_split(&report.manifest, &spec)?;
        println!("{grouping:?} grouping:");
        for s in [Split::Train, Split::Val, Split::Test] {
            println!("  {:<5} {:?}", format!("{s:?}"), split.class_counts(Some(s)));
        }
    }
    Ok(())
}
