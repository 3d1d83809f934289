//! Confusion matrices and SEN/PREC/ACC/F1 summaries, plus report files
//! (`<run-id>.metrics.json`, `.cm.csv`, `.cm.svg`).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datastore::write_atomic;
use crate::error::{domain_err, Error, Result};

/// `K×K` counts, rows = true class, columns = predicted class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(domain_err!("confusion matrix must be square"));
        }
        Ok(ConfusionMatrix {
            k,
            counts: rows.concat(),
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn record(&mut self, truth: usize, pred: usize) -> Result<()> {
        if truth >= self.k || pred >= self.k {
            return Err(domain_err!("label pair ({truth}, {pred}) out of range for K={}", self.k));
        }
        self.counts[truth * self.k + pred] += 1;
        Ok(())
    }

    /// Adds another shard's counts.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(domain_err!("cannot merge K={} into K={}", other.k, self.k));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.get(i, i)).sum()
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        (0..self.k).map(|j| self.get(truth, j)).sum()
    }

    pub fn col_sum(&self, pred: usize) -> u64 {
        (0..self.k).map(|i| self.get(i, pred)).sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.k.max(1)).map(<[u64]>::to_vec).collect()
    }
}

pub fn confusion_matrix(truth: &[usize], predicted: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if truth.len() != predicted.len() {
        return Err(domain_err!(
            "{} true labels but {} predictions",
            truth.len(),
            predicted.len()
        ));
    }
    let mut cm = ConfusionMatrix::new(k);
    for (&t, &p) in truth.iter().zip(predicted) {
        cm.record(t, p)?;
    }
    Ok(cm)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Average {
    /// Unweighted mean over classes.
    #[default]
    Macro,
    /// Support-weighted mean over classes.
    Weighted,
}

impl std::str::FromStr for Average {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "macro" => Ok(Average::Macro),
            "weighted" => Ok(Average::Weighted),
            _ => Err(Error::Config(format!("unknown averaging mode {s:?} (macro|weighted)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub support: u64,
    pub predicted: u64,
    pub sensitivity: f64,
    pub precision: f64,
    pub f1: f64,
    /// No true instances of this class: sensitivity set to 0.
    pub zero_support: bool,
    /// Never predicted: precision set to 0.
    pub zero_predicted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub average: Average,
    pub sen: f64,
    pub prec: f64,
    pub acc: f64,
    pub f1: f64,
    pub total: u64,
    pub per_class: Vec<ClassMetrics>,
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

pub fn summarize(cm: &ConfusionMatrix, average: Average) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(domain_err!("metrics undefined for an empty confusion matrix"));
    }
    let per_class: Vec<ClassMetrics> = (0..cm.k())
        .map(|c| {
            let tp = cm.get(c, c);
            let support = cm.row_sum(c);
            let predicted = cm.col_sum(c);
            let (sensitivity, zero_support) = ratio(tp, support);
            let (precision, zero_predicted) = ratio(tp, predicted);
            let f1 = if sensitivity + precision > 0.0 {
                2.0 * sensitivity * precision / (sensitivity + precision)
            } else {
                0.0
            };
            ClassMetrics {
                support,
                predicted,
                sensitivity,
                precision,
                f1,
                zero_support,
                zero_predicted,
            }
        })
        .collect();
    let k = cm.k() as f64;
    let avg = |f: fn(&ClassMetrics) -> f64| match average {
        Average::Macro => per_class.iter().map(f).sum::<f64>() / k,
        Average::Weighted => per_class
            .iter()
            .map(|m| m.support as f64 / total as f64 * f(m))
            .sum::<f64>(),
    };
    Ok(MetricsReport {
        average,
        sen: avg(|m| m.sensitivity),
        prec: avg(|m| m.precision),
        acc: cm.trace() as f64 / total as f64,
        f1: avg(|m| m.f1),
        total,
        per_class,
    })
}

pub fn macro_metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    summarize(cm, Average::Macro)
}

#[derive(Clone, Debug)]
pub struct ReportPaths {
    pub json: PathBuf,
    pub csv: PathBuf,
    pub svg: PathBuf,
}

pub fn confusion_csv(cm: &ConfusionMatrix, class_names: &[String]) -> String {
    let mut out = String::from("true\\predicted");
    for n in class_names {
        out.push(',');
        out.push_str(n);
    }
    out.push('\n');
    for (i, n) in class_names.iter().enumerate() {
        out.push_str(n);
        for j in 0..cm.k() {
            let _ = write!(out, ",{}", cm.get(i, j));
        }
        out.push('\n');
    }
    out
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Heatmap with one `rect.cell` per matrix entry, shaded by row-normalized count.
pub fn confusion_svg(cm: &ConfusionMatrix, class_names: &[String]) -> String {
    let k = cm.k();
    let cell = 64;
    let margin = 120;
    let size = margin + k * cell + 20;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<text x="{}" y="16" text-anchor="middle">predicted</text>"#, margin + k * cell / 2);
    for (j, name) in class_names.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            margin + j * cell + cell / 2,
            margin - 8,
            xml_escape(name)
        );
    }
    for i in 0..k {
        let name = class_names.get(i).map_or_else(|| i.to_string(), |n| xml_escape(n));
        let row_total = cm.row_sum(i);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            margin - 8,
            margin + i * cell + cell / 2 + 4,
            name
        );
        for j in 0..k {
            let count = cm.get(i, j);
            let shade = if row_total == 0 { 0.0 } else { count as f64 / row_total as f64 };
            let _ = writeln!(
                s,
                r##"<rect class="cell" x="{}" y="{}" width="{cell}" height="{cell}" fill="#1f4e99" fill-opacity="{:.4}" stroke="#888"/>"##,
                margin + j * cell,
                margin + i * cell,
                shade
            );
            let color = if shade > 0.5 { "#fff" } else { "#000" };
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="middle" fill="{color}">{count}</text>"#,
                margin + j * cell + cell / 2,
                margin + i * cell + cell / 2 + 4
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Writes the metrics JSON, confusion CSV and heatmap SVG for one run.
pub fn emit_report(
    cm: &ConfusionMatrix,
    report: &MetricsReport,
    class_names: &[String],
    out_dir: &Path,
    run_id: &str,
) -> Result<ReportPaths> {
    if class_names.len() != cm.k() {
        return Err(domain_err!("{} class names for K={}", class_names.len(), cm.k()));
    }
    #[derive(Serialize)]
    struct Doc<'a> {
        run_id: &'a str,
        class_names: &'a [String],
        confusion_matrix: Vec<Vec<u64>>,
        metrics: &'a MetricsReport,
    }
    let paths = ReportPaths {
        json: out_dir.join(format!("{run_id}.metrics.json")),
        csv: out_dir.join(format!("{run_id}.cm.csv")),
        svg: out_dir.join(format!("{run_id}.cm.svg")),
    };
    let doc = Doc {
        run_id,
        class_names,
        confusion_matrix: cm.rows(),
        metrics: report,
    };
    let mut json = serde_json::to_string_pretty(&doc).map_err(|e| Error::Domain(e.to_string()))?;
    json.push('\n');
    write_atomic(&paths.json, json.as_bytes())?;
    write_atomic(&paths.csv, confusion_csv(cm, class_names).as_bytes())?;
    write_atomic(&paths.svg, confusion_svg(cm, class_names).as_bytes())?;
    Ok(paths)
}

/// Reads back the `metrics` object of a metrics JSON file.
pub fn read_report(path: &Path) -> Result<MetricsReport> {
    #[derive(Deserialize)]
    struct Doc {
        metrics: MetricsReport,
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: Doc = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        offset: 0,
        message: e.to_string(),
    })?;
    Ok(doc.metrics)
}
