//! Exact t-SNE over core-level embeddings.
//!
//! A core's embedding is the mean of its patch embeddings. Affinities use a
//! per-point Gaussian bandwidth found by bisection on the precision so that
//! each conditional distribution hits the target perplexity; the layout is
//! optimized with momentum gradient descent on `KL(P‖Q)` with a Student-t
//! kernel, early exaggeration and per-coordinate adaptive gains.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bag::Bag;
use crate::datastore::write_atomic;
use crate::error::{config_err, domain_err, Error, Result};
use crate::rng::{stream_rng, Stream};

/// Relative tolerance on each row's achieved perplexity.
pub const PERPLEXITY_TOL: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    /// Iteration at which momentum switches and exaggeration ends.
    pub switch_iteration: usize,
    pub exaggeration: f64,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            switch_iteration: 250,
            exaggeration: 12.0,
            init_std: 1e-4,
            seed: 0,
        }
    }
}

impl TsneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.perplexity >= 2.0) {
            return Err(config_err!("perplexity must be at least 2, got {}", self.perplexity));
        }
        if self.iterations == 0 {
            return Err(config_err!("t-SNE needs at least one iteration"));
        }
        if !(self.learning_rate > 0.0) || !(self.exaggeration >= 1.0) || !(self.init_std > 0.0) {
            return Err(config_err!("invalid t-SNE optimizer settings"));
        }
        Ok(())
    }
}

/// Perplexity actually used for `m` points: at most `(m−1)/3`.
pub fn effective_perplexity(requested: f64, m: usize) -> f64 {
    requested.min((m as f64 - 1.0) / 3.0)
}

/// Core-level embeddings with their labels and ids.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub points: Vec<Vec<f64>>,
    pub labels: Vec<u32>,
    pub core_ids: Vec<String>,
}

impl EmbeddingSet {
    pub fn from_bags(bags: &[Bag]) -> Result<Self> {
        let set = EmbeddingSet {
            points: bags.iter().map(Bag::mean_embedding).collect(),
            labels: bags.iter().map(|b| b.label).collect(),
            core_ids: bags.iter().map(|b| b.core_id.clone()).collect(),
        };
        set.validate()?;
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.len() < 3 {
            return Err(domain_err!("t-SNE needs at least 3 points, got {}", self.points.len()));
        }
        let d = self.points[0].len();
        if self.points.iter().any(|p| p.len() != d) {
            return Err(domain_err!("embeddings have inconsistent dimensions"));
        }
        if self.labels.len() != self.points.len() || self.core_ids.len() != self.points.len() {
            return Err(domain_err!("labels/core_ids do not match the number of points"));
        }
        Ok(())
    }
}

/// Symmetric joint affinities `P` (row-major `M×M`).
#[derive(Clone, Debug)]
pub struct Affinities {
    pub m: usize,
    pub p: Vec<f64>,
    /// Perplexity actually reached by each conditional row.
    pub row_perplexity: Vec<f64>,
    pub target_perplexity: f64,
}

impl Affinities {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.p[i * self.m + j]
    }
}

fn squared_distances(points: &[Vec<f64>]) -> Vec<f64> {
    let m = points.len();
    let mut d = vec![0.0; m * m];
    for i in 0..m {
        for j in i + 1..m {
            let s: f64 = points[i].iter().zip(&points[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            d[i * m + j] = s;
            d[j * m + i] = s;
        }
    }
    d
}

/// Conditional row for precision `beta`; returns (probabilities, perplexity).
fn conditional_row(dist: &[f64], i: usize, beta: f64, out: &mut [f64]) -> f64 {
    let dmin = dist
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, &v)| v)
        .fold(f64::INFINITY, f64::min);
    let mut total = 0.0;
    for (j, o) in out.iter_mut().enumerate() {
        *o = if j == i { 0.0 } else { (-beta * (dist[j] - dmin)).exp() };
        total += *o;
    }
    let mut entropy = 0.0;
    for o in out.iter_mut() {
        *o /= total;
        if *o > 0.0 {
            entropy -= *o * o.ln();
        }
    }
    entropy.exp()
}

/// Gaussian affinities at the effective perplexity.
pub fn affinities(points: &[Vec<f64>], perplexity: f64) -> Result<Affinities> {
    let m = points.len();
    if m < 3 {
        return Err(domain_err!("t-SNE needs at least 3 points, got {m}"));
    }
    let target = effective_perplexity(perplexity, m);
    let dist = squared_distances(points);
    let mut cond = vec![0.0; m * m];
    let mut row_perplexity = vec![0.0; m];
    for i in 0..m {
        let row = &dist[i * m..(i + 1) * m];
        let others = || row.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &v)| v);
        let dmax = others().fold(0.0, f64::max);
        let dmin = others().fold(f64::INFINITY, f64::min);
        if dmax == 0.0 {
            let j = if i == 0 { 1 } else { 0 };
            return Err(domain_err!(
                "points {i} and {j} coincide and every distance from point {i} is zero"
            ));
        }
        let out = &mut cond[i * m..(i + 1) * m];
        if dmax - dmin <= 1e-12 * dmax {
            // equidistant neighbours: every bandwidth gives the uniform row
            row_perplexity[i] = conditional_row(row, i, 0.0, out);
            continue;
        }
        let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
        let mut beta = 1.0 / (dmax - dmin);
        let mut perp = conditional_row(row, i, beta, out);
        for _ in 0..200 {
            if ((perp - target) / target).abs() < PERPLEXITY_TOL {
                break;
            }
            if perp > target {
                lo = beta;
                beta = if hi.is_finite() { 0.5 * (beta + hi) } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = 0.5 * (beta + lo);
            }
            perp = conditional_row(row, i, beta, out);
        }
        row_perplexity[i] = perp;
    }
    let mut p = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            p[i * m + j] = (cond[i * m + j] + cond[j * m + i]) / (2.0 * m as f64);
        }
    }
    Ok(Affinities {
        m,
        p,
        row_perplexity,
        target_perplexity: target,
    })
}

/// `KL(P‖Q)` and its gradient with respect to the 2-D coordinates, with the
/// affinities scaled by `exaggeration`.
pub fn kl_and_gradient(p: &Affinities, y: &[[f64; 2]], exaggeration: f64) -> (f64, Vec<[f64; 2]>) {
    let m = p.m;
    let mut num = vec![0.0; m * m];
    let mut z = 0.0;
    for i in 0..m {
        for j in i + 1..m {
            let dx = y[i][0] - y[j][0];
            let dy = y[i][1] - y[j][1];
            let v = 1.0 / (1.0 + dx * dx + dy * dy);
            num[i * m + j] = v;
            num[j * m + i] = v;
            z += 2.0 * v;
        }
    }
    let mut grad = vec![[0.0; 2]; m];
    let mut kl = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i == j {
                continue;
            }
            let pij = exaggeration * p.get(i, j);
            let qij = num[i * m + j] / z;
            if pij > 0.0 {
                kl += pij * (pij / qij.max(f64::MIN_POSITIVE)).ln();
            }
            let f = 4.0 * (pij - qij) * num[i * m + j];
            grad[i][0] += f * (y[i][0] - y[j][0]);
            grad[i][1] += f * (y[i][1] - y[j][1]);
        }
    }
    (kl, grad)
}

#[derive(Clone, Debug)]
pub struct TsneResult {
    pub coords: Vec<[f64; 2]>,
    pub initial_kl: f64,
    pub final_kl: f64,
}

/// Momentum gradient descent on `KL(P‖Q)` from a seeded Gaussian start.
pub fn tsne_optimize(p: &Affinities, config: &TsneConfig) -> Result<TsneResult> {
    config.validate()?;
    let m = p.m;
    let mut rng = stream_rng(config.seed, Stream::Tsne);
    let mut y: Vec<[f64; 2]> = (0..m)
        .map(|_| {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            [a * config.init_std, b * config.init_std]
        })
        .collect();
    let initial_kl = kl_and_gradient(p, &y, 1.0).0;
    let mut velocity = vec![[0.0; 2]; m];
    let mut gains = vec![[1.0f64; 2]; m];
    for it in 0..config.iterations {
        let early = it < config.switch_iteration;
        let exaggeration = if early { config.exaggeration } else { 1.0 };
        let momentum = if early { config.initial_momentum } else { config.final_momentum };
        let (_, grad) = kl_and_gradient(p, &y, exaggeration);
        for i in 0..m {
            for c in 0..2 {
                let g = grad[i][c];
                gains[i][c] = if (g > 0.0) != (velocity[i][c] > 0.0) {
                    gains[i][c] + 0.2
                } else {
                    (gains[i][c] * 0.8).max(0.01)
                };
                velocity[i][c] = momentum * velocity[i][c] - config.learning_rate * gains[i][c] * g;
                y[i][c] += velocity[i][c];
            }
        }
        let mean = y.iter().fold([0.0; 2], |a, v| [a[0] + v[0], a[1] + v[1]]);
        for v in &mut y {
            v[0] -= mean[0] / m as f64;
            v[1] -= mean[1] / m as f64;
        }
        if y.iter().any(|v| !(v[0].is_finite() && v[1].is_finite())) {
            return Err(Error::Numeric(format!("t-SNE coordinates became non-finite at iteration {it}")));
        }
    }
    let final_kl = kl_and_gradient(p, &y, 1.0).0;
    Ok(TsneResult {
        coords: y,
        initial_kl,
        final_kl,
    })
}

/// Runs the full pipeline. Points are processed in core-id order so the
/// seeded initialization does not depend on input order; coordinates are
/// returned in input order.
pub fn run_tsne(set: &EmbeddingSet, config: &TsneConfig) -> Result<TsneResult> {
    set.validate()?;
    config.validate()?;
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by(|&a, &b| set.core_ids[a].cmp(&set.core_ids[b]));
    let sorted: Vec<Vec<f64>> = order.iter().map(|&i| set.points[i].clone()).collect();
    let p = affinities(&sorted, config.perplexity)?;
    let result = tsne_optimize(&p, config)?;
    let mut coords = vec![[0.0; 2]; set.len()];
    for (k, &i) in order.iter().enumerate() {
        coords[i] = result.coords[k];
    }
    Ok(TsneResult { coords, ..result })
}

pub fn tsne_csv(set: &EmbeddingSet, coords: &[[f64; 2]]) -> String {
    let mut s = String::from("core_id,x,y,label\n");
    for ((id, c), l) in set.core_ids.iter().zip(coords).zip(&set.labels) {
        let _ = writeln!(s, "{id},{},{},{l}", c[0], c[1]);
    }
    s
}

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

/// Scatter plot with one `circle.point` per core, colored by class, and a
/// legend listing only the classes that occur.
pub fn scatter_svg(coords: &[[f64; 2]], labels: &[u32], class_names: &[String]) -> String {
    let (w, plot, pad) = (760.0, 560.0, 20.0);
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for c in coords {
        x0 = x0.min(c[0]);
        x1 = x1.max(c[0]);
        y0 = y0.min(c[1]);
        y1 = y1.max(c[1]);
    }
    let span = |a: f64, b: f64| if b > a { b - a } else { 1.0 };
    let (sx, sy) = (plot / span(x0, x1), plot / span(y0, y1));
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{}" font-family="sans-serif" font-size="12">"#,
        plot + 2.0 * pad
    );
    for (c, &l) in coords.iter().zip(labels) {
        let _ = writeln!(
            s,
            r#"<circle class="point" cx="{:.3}" cy="{:.3}" r="3" fill="{}"/>"#,
            pad + (c[0] - x0) * sx,
            pad + (y1 - c[1]) * sy,
            PALETTE[l as usize % PALETTE.len()]
        );
    }
    let present: BTreeSet<u32> = labels.iter().copied().collect();
    let _ = writeln!(s, r#"<g class="legend">"#);
    for (row, &l) in present.iter().enumerate() {
        let y = pad + 10.0 + row as f64 * 18.0;
        let name = class_names.get(l as usize).cloned().unwrap_or_else(|| l.to_string());
        let _ = writeln!(
            s,
            r#"<circle class="swatch" cx="{}" cy="{y}" r="5" fill="{}"/><text x="{}" y="{}">{}</text>"#,
            plot + 2.0 * pad + 10.0,
            PALETTE[l as usize % PALETTE.len()],
            plot + 2.0 * pad + 22.0,
            y + 4.0,
            name.replace('&', "&amp;").replace('<', "&lt;")
        );
    }
    s.push_str("</g>\n</svg>\n");
    s
}

pub fn emit_scatter(coords: &[[f64; 2]], labels: &[u32], class_names: &[String], path: &Path) -> Result<()> {
    write_atomic(path, scatter_svg(coords, labels, class_names).as_bytes())
}

/// Nearest-centroid accuracy of labelled 2-D points (centroids from the
/// same points).
pub fn centroid_accuracy_2d(coords: &[[f64; 2]], labels: &[u32]) -> f64 {
    let k = labels.iter().copied().max().map_or(0, |m| m as usize + 1);
    let mut sums = vec![[0.0; 2]; k];
    let mut counts = vec![0usize; k];
    for (c, &l) in coords.iter().zip(labels) {
        sums[l as usize][0] += c[0];
        sums[l as usize][1] += c[1];
        counts[l as usize] += 1;
    }
    let cents: Vec<Option<[f64; 2]>> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &n)| (n > 0).then(|| [s[0] / n as f64, s[1] / n as f64]))
        .collect();
    let correct = coords
        .iter()
        .zip(labels)
        .filter(|(c, &l)| {
            let best = cents
                .iter()
                .enumerate()
                .filter_map(|(k, ce)| ce.map(|ce| (k, (ce[0] - c[0]).powi(2) + (ce[1] - c[1]).powi(2))))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(k, _)| k);
            best == Some(l as usize)
        })
        .count();
    correct as f64 / coords.len().max(1) as f64
}
