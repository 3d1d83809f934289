//! Macro and weighted summaries of a confusion matrix, plus the report files.

use bagforge::datastore::class_names;
use bagforge::metrics::{emit_report, summarize, Average, ConfusionMatrix};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cm = ConfusionMatrix::from_rows(&[
        vec![18, 1, 1, 0],
        vec![2, 9, 0, 1],
        vec![0, 0, 6, 0],
        vec![1, 0, 3, 0],
    ])?;
    for average in [Average::Macro, Average::Weighted] {
        let r = summarize(&cm, average)?;
        println!(
            "{average:?}: sen {:.3} prec {:.3} f1 {:.3} acc {:.3}",
            r.sen, r.prec, r.f1, r.acc
        );
        if average == Average::Macro {
            for (i, c) in r.per_class.iter().enumerate() {
                println!(
                    "  class {i}: support {:>2} sen {:.3} prec {:.3} f1 {:.3}",
                    c.support, c.sensitivity, c.precision, c.f1
                );
            }
        }
    }

    let out = std::env::temp_dir().join("bagforge-metrics");
    std::fs::create_dir_all(&out)?;
    let report = summarize(&cm, Average::Macro)?;
    let paths = emit_report(&cm, &report, &class_names(4), &out, "example")?;
    println!("wrote {}, {}, {}", paths.json.display(), paths.csv.display(), paths.svg.display());
    Ok(())
}
