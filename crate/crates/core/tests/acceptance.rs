use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use bagforge::aggregators::{attention_pool, bgap, bgmp, AggregatorKind, AttentionParams, TransMilConfig};
use bagforge::cli::dispatch;
use bagforge::datastore::{
    decode_bag, encode_bag, stratified_split, synthesize_bags, Checkpoint, CheckpointHeader, Manifest, ManifestEntry,
    Split, SplitSpec, SynthConfig,
};
use bagforge::metrics::{confusion_matrix, macro_metrics, read_report, ConfusionMatrix};
use bagforge::model::{weighted_ce, ClassWeights, Model, ModelConfig, ModelParams, OneHot};
use bagforge::numcore::{finite_diff_check, ParamStore, Tape, Tensor};
use bagforge::optim::{train_on_bags, TrainConfig};
use bagforge::rng::{stream_rng, Stream};
use bagforge::tsne::{affinities, centroid_accuracy_2d, run_tsne, EmbeddingSet, TsneConfig};
use bagforge::{Bag, Error};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Learning rates used for the convergence run. The pooling heads are plain
/// linear classifiers on 512 unit-variance features and need a larger step
/// than the transformer to reach a clean margin within 20 epochs.
const POOLING_LR: f64 = 5e-3;
const TRANSMIL_LR: f64 = 5e-5;
const OVERFIT_LR: f64 = 5e-5;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn run_cli(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let argv: Vec<&str> = std::iter::once("bagforge").chain(args.iter().copied()).collect();
    let code = dispatch(argv, &mut out, &mut err);
    (
        code,
        String::from_utf8_lossy(&out).into_owned(),
        String::from_utf8_lossy(&err).into_owned(),
    )
}

fn transmil_param_oracle(d: usize, dm: usize, k: usize, layers: usize, kernels: &[usize]) -> usize {
    let input = d * dm + dm;
    let cls = dm;
    let layer = 2 * dm + dm * 3 * dm + dm * dm + dm;
    let pos: usize = kernels.iter().map(|&s| dm * s * s + dm).sum();
    let norm = 2 * dm;
    let head = dm * k + k;
    input + cls + layers * layer + pos + norm + head
}

fn param_budget() -> Outcome {
    let (code, out, err) = run_cli(&["count-params", "--aggregator", "transmil", "--d", "512", "--k", "4"]);
    if code != 0 {
        return outcome(false, format!("exit {code}: {err}"));
    }
    let total: usize = out
        .lines()
        .find_map(|l| l.strip_prefix("total").map(|r| r.trim().parse().unwrap_or(0)))
        .unwrap_or(0);
    let cfg = TransMilConfig::default();
    let oracle = transmil_param_oracle(512, cfg.d_model, 4, cfg.layers, &cfg.kernels);
    let pass = (2_300_000..=2_900_000).contains(&total) && total == oracle;
    outcome(pass, format!("total {total} (architecture oracle {oracle}; bracket [2.3M, 2.9M])"))
}

fn random_bag_f64(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor<f64> {
    let data = (0..n * d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::from_vec(n, d, data).unwrap()
}

fn gradient_check() -> Outcome {
    let mut worst = (0.0f64, String::new());
    let mut checks = 0;
    for seed in 0..20u64 {
        for kind in AggregatorKind::ALL {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let n = rng.random_range(1..=6);
            let d = rng.random_range(2..=16);
            let k = rng.random_range(2..=4);
            let mut config = ModelConfig::new(kind, d, k);
            config.attn_hidden = 6;
            config.transmil = TransMilConfig {
                d_model: 8,
                heads: 2,
                layers: 2,
                ..TransMilConfig::default()
            };
            let mut store = ParamStore::<f64>::new();
            let params = ModelParams::init(&config, &mut store, &mut rng).unwrap();
            let bag = random_bag_f64(&mut rng, n, d);
            let target = OneHot::new(rng.random_range(0..k), k).unwrap();
            let weights = ClassWeights::from_values((0..k).map(|_| rng.random_range(0.2..3.0)).collect()).unwrap();
            let report = finite_diff_check(
                |tape, s| {
                    let x = tape.constant(bag.clone())?;
                    let f = params.forward_classify(tape, s, x)?;
                    weighted_ce(tape, f.scores, target, &weights)
                },
                &mut store,
                1e-6,
            )
            .unwrap();
            checks += 1;
            if report.max_rel_error >= worst.0 {
                worst = (
                    report.max_rel_error,
                    format!("{kind} seed {seed} N={n} d={d} at {:?}", report.worst),
                );
            }
        }
    }
    outcome(
        worst.0 < 1e-2,
        format!("{checks} composites, max relative error {:.2e} ({})", worst.0, worst.1),
    )
}

fn permutation_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (n, d) = (9, 12);
    let data: Vec<f32> = (0..n * d).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    let bag = Bag::new("p", 0, Tensor::from_vec(n, d, data).unwrap()).unwrap();
    let mut store = ParamStore::<f32>::new();
    let att = AttentionParams::init(&mut store, d, 8, &mut rng).unwrap();

    let pool = |b: &Bag| -> [(Vec<f32>, Option<Vec<f32>>); 3] {
        let mut tape = Tape::new();
        let x = tape.constant(b.instances.clone()).unwrap();
        let e = [
            bgap(&mut tape, x).unwrap(),
            bgmp(&mut tape, x).unwrap(),
            attention_pool(&mut tape, &store, &att, x).unwrap(),
        ];
        e.map(|e| {
            (
                tape.value(e.vector).data().to_vec(),
                e.attention.map(|a| tape.value(a).data().to_vec()),
            )
        })
    };
    let reference = pool(&bag);
    let mut max_diff = 0.0f32;
    let mut prob_ok = true;
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..100 {
        order.shuffle(&mut rng);
        let got = pool(&bag.permuted(&order));
        for (r, g) in reference.iter().zip(&got) {
            for (a, b) in r.0.iter().zip(&g.0) {
                max_diff = max_diff.max((a - b).abs());
            }
            if let Some(w) = &g.1 {
                let sum: f32 = w.iter().sum();
                prob_ok &= w.iter().all(|&v| v >= 0.0) && (sum - 1.0).abs() < 1e-6;
            }
        }
    }
    outcome(
        max_diff <= 1e-5 && prob_ok,
        format!("100 permutations, max pooled difference {max_diff:.2e}, attention is a probability vector: {prob_ok}"),
    )
}

fn loss_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut max_err = 0.0f64;
    for _ in 0..1000 {
        let k = rng.random_range(2..=8);
        let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-6.0..6.0)).collect();
        let m = logits.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let s: Vec<f64> = e.iter().map(|v| v / z).collect();
        let y = rng.random_range(0..k);
        let w: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..5.0)).collect();
        let expected = -(1.0 / k as f64) * w[y] * s[y].ln();

        let mut tape = Tape::<f64>::new();
        let sv = tape.constant(Tensor::row_vector(s.clone())).unwrap();
        let l = weighted_ce(&mut tape, sv, OneHot::new(y, k).unwrap(), &ClassWeights::from_values(w).unwrap()).unwrap();
        max_err = max_err.max((tape.value(l).data()[0] - expected).abs());
    }
    let mut tape = Tape::<f64>::new();
    let sv = tape.constant(Tensor::row_vector(vec![0.25; 4])).unwrap();
    let l = weighted_ce(&mut tape, sv, OneHot::new(2, 4).unwrap(), &ClassWeights::uniform(4)).unwrap();
    let uniform = tape.value(l).data()[0];
    let ln4_4 = 4f64.ln() / 4.0;
    outcome(
        max_err <= 1e-6 && (uniform - ln4_4).abs() <= 1e-6 && (uniform - 0.34657).abs() < 1e-5,
        format!("1000 draws, max |diff| {max_err:.2e}; uniform K=4 loss {uniform:.6}"),
    )
}

fn end_to_end(dir: &Path) -> Outcome {
    let data = dir.join("data");
    let data_s = data.to_str().unwrap();
    let (c, _, e) = run_cli(&["synth", "--k", "4", "--bags", "200", "--d", "512", "--sep", "6", "--seed", "7", "--out", data_s]);
    if c != 0 {
        return outcome(false, format!("synth exit {c}: {e}"));
    }
    let (c, _, e) = run_cli(&["split", "--train", "0.6", "--val", "0.15", "--test", "0.25", "--out", data_s]);
    if c != 0 {
        return outcome(false, format!("split exit {c}: {e}"));
    }
    let mut pass = true;
    let mut parts = Vec::new();
    for kind in AggregatorKind::ALL {
        let lr = if kind == AggregatorKind::TransMil { TRANSMIL_LR } else { POOLING_LR };
        let lr_s = lr.to_string();
        let mut runs = Vec::new();
        for rep in ["a", "b"] {
            let run_id = format!("{kind}-{rep}");
            let start = Instant::now();
            let (c, _, e) = run_cli(&[
                "train", "--aggregator", kind.as_str(), "--lr", &lr_s, "--epochs", "20", "--patience", "5", "--seed", "1",
                "--data", data_s, "--out", dir.to_str().unwrap(), "--run-id", &run_id,
            ]);
            let secs = start.elapsed().as_secs_f64();
            if c != 0 {
                return outcome(false, format!("train {run_id} exit {c}: {e}"));
            }
            let report = read_report(&dir.join(format!("{run_id}.metrics.json"))).unwrap();
            let log = std::fs::read(dir.join(format!("{run_id}.log.jsonl"))).unwrap();
            let ckpt = Checkpoint::load(&dir.join(format!("{run_id}.ckpt"))).unwrap();
            runs.push((report.acc, secs, log, ckpt.tensors));
        }
        let (acc, secs, log_a, w_a) = &runs[0];
        let (_, _, log_b, w_b) = &runs[1];
        let epochs = log_a.iter().filter(|&&b| b == b'\n').count();
        let same = log_a == log_b && w_a == w_b;
        pass &= *acc >= 0.95 && *secs < 300.0 && same && epochs <= 20;
        parts.push(format!("{kind} acc {acc:.4} in {epochs} ep {secs:.0}s rerun-identical {same}"));
    }
    outcome(pass, parts.join("; "))
}

fn overfit() -> Outcome {
    let cfg = SynthConfig {
        k: 4,
        bags_per_class: 1,
        d: 512,
        seed: 3,
        ..SynthConfig::default()
    };
    let bag = synthesize_bags(&cfg).unwrap().swap_remove(2);
    let mut pass = true;
    let mut parts = Vec::new();
    for kind in [AggregatorKind::MilAtt, AggregatorKind::TransMil] {
        let mut tc = TrainConfig::new(ModelConfig::new(kind, 512, 4));
        tc.optimizer.lr = OVERFIT_LR;
        tc.epochs = 200;
        tc.patience = 0;
        let out = train_on_bags(std::slice::from_ref(&bag), std::slice::from_ref(&bag), &ClassWeights::uniform(4), &tc).unwrap();
        let last = out.log.last().unwrap().train_loss;
        let final_loss = out.final_model.loss(&bag, &ClassWeights::uniform(4)).unwrap() as f64;
        let first_below = out.log.iter().find(|e| e.train_loss < 1e-2).map(|e| e.epoch);
        pass &= final_loss < 1e-2 && last < 1e-2;
        parts.push(format!("{kind} loss {final_loss:.2e} after 200 steps (first < 1e-2 at step {first_below:?})"));
    }
    outcome(pass, parts.join("; "))
}

fn split_arithmetic() -> Outcome {
    let counts = [1198usize, 405, 97, 20];
    let mut entries = Vec::new();
    for (c, &n) in counts.iter().enumerate() {
        for i in 0..n {
            entries.push(ManifestEntry {
                core_id: format!("c{c}-{i:04}"),
                path: format!("bags/c{c}-{i:04}.bag"),
                label: c as u32,
                split: Split::Unassigned,
                tma_id: format!("t{}", i % 5),
            });
        }
    }
    let manifest = Manifest {
        dataset_id: "split".into(),
        d: 4,
        k: counts.len() as u32,
        class_names: (0..counts.len()).map(|c| format!("c{c}")).collect(),
        entries,
    };
    let spec = SplitSpec {
        seed: 9,
        ..SplitSpec::default()
    };
    let split = stratified_split(&manifest, &spec).unwrap();
    let mut pass = split.entries.len() == manifest.entries.len();
    let mut seen: BTreeMap<&str, (u32, Split)> = BTreeMap::new();
    for e in &split.entries {
        pass &= seen.insert(&e.core_id, (e.label, e.split)).is_none() && e.split != Split::Unassigned;
    }
    for e in &manifest.entries {
        pass &= seen.get(e.core_id.as_str()).map(|v| v.0) == Some(e.label);
    }
    let mut ewing = (0, 0, 0);
    for (c, &n) in counts.iter().enumerate() {
        let count = |s: Split| split.entries.iter().filter(|e| e.label == c as u32 && e.split == s).count();
        let got = (count(Split::Train), count(Split::Val), count(Split::Test));
        let tr = (0.6 * n as f64 + 1e-9).floor() as usize;
        let va = (0.15 * n as f64 + 1e-9).floor() as usize;
        pass &= got == (tr, va, n - tr - va);
        if c == 0 {
            ewing = got;
        }
    }
    pass &= ewing == (718, 179, 301);
    outcome(pass, format!("1198 cores -> {}/{}/{}; every class exact, each core once", ewing.0, ewing.1, ewing.2))
}

fn metrics_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let k = rng.random_range(2..=6);
        let n = rng.random_range(1..=60);
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let cm = confusion_matrix(&truth, &pred, k).unwrap();
        let r = macro_metrics(&cm).unwrap();
        let (mut sen, mut prec, mut f1) = (0.0, 0.0, 0.0);
        for c in 0..k {
            let tp = (0..n).filter(|&i| truth[i] == c && pred[i] == c).count() as f64;
            let fn_ = (0..n).filter(|&i| truth[i] == c && pred[i] != c).count() as f64;
            let fp = (0..n).filter(|&i| truth[i] != c && pred[i] == c).count() as f64;
            let s = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
            let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            sen += s;
            prec += p;
            f1 += if s + p > 0.0 { 2.0 * s * p / (s + p) } else { 0.0 };
        }
        let acc = (0..n).filter(|&i| truth[i] == pred[i]).count() as f64 / n as f64;
        let expected = (sen / k as f64, prec / k as f64, acc, f1 / k as f64);
        if (r.sen, r.prec, r.acc, r.f1) != expected {
            mismatches += 1;
        }
    }
    let w = macro_metrics(&ConfusionMatrix::from_rows(&[vec![1, 1], vec![0, 2]]).unwrap()).unwrap();
    let worked = [(w.sen, 0.75), (w.prec, 0.8333), (w.acc, 0.75), (w.f1, 0.7333)]
        .iter()
        .all(|(a, b)| (a - b).abs() < 1e-4);
    outcome(
        mismatches == 0 && worked,
        format!(
            "1000 matrices, {mismatches} mismatches; [[1,1],[0,2]] -> ({:.4}, {:.4}, {:.4}, {:.4})",
            w.sen, w.prec, w.acc, w.f1
        ),
    )
}

fn tsne() -> Outcome {
    let start = Instant::now();
    let cfg = SynthConfig {
        k: 4,
        bags_per_class: 100,
        d: 512,
        separation: 6.0,
        seed: 13,
        ..SynthConfig::default()
    };
    let bags = synthesize_bags(&cfg).unwrap();
    let set = EmbeddingSet::from_bags(&bags).unwrap();
    let p = affinities(&set.points, 30.0).unwrap();
    let perp_err = p
        .row_perplexity
        .iter()
        .map(|v| ((v - p.target_perplexity) / p.target_perplexity).abs())
        .fold(0.0, f64::max);
    let tc = TsneConfig {
        seed: 2,
        ..TsneConfig::default()
    };
    let result = run_tsne(&set, &tc).unwrap();
    let acc = centroid_accuracy_2d(&result.coords, &set.labels);
    let secs = start.elapsed().as_secs_f64();
    outcome(
        perp_err <= 1e-4 && acc >= 0.9 && result.final_kl < result.initial_kl && secs < 120.0,
        format!(
            "M=400, max perplexity error {perp_err:.1e}, 2-D centroid accuracy {acc:.3}, KL {:.3} -> {:.3}, {secs:.1}s",
            result.initial_kl, result.final_kl
        ),
    )
}

fn persistence(dir: &Path) -> Outcome {
    let mut rng = stream_rng(17, Stream::Synth);
    let mut values: Vec<f32> = (0..7 * 5).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    values[0] = -0.0;
    values[1] = f32::MIN_POSITIVE / 8.0;
    values[2] = f32::MAX;
    let bag = Bag::new("core-Ω", 2, Tensor::from_vec(7, 5, values).unwrap()).unwrap();
    let bytes = encode_bag(&bag, 4).unwrap();
    let (_, back) = decode_bag(&bytes, Path::new("mem")).unwrap();
    let bits = |b: &Bag| b.instances.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let bag_ok = bits(&back) == bits(&bag) && back == bag && encode_bag(&back, 4).unwrap() == bytes;

    let mut config = ModelConfig::new(AggregatorKind::TransMil, 6, 3);
    config.transmil = TransMilConfig {
        d_model: 8,
        heads: 2,
        layers: 2,
        ..TransMilConfig::default()
    };
    let model = Model::new(config.clone(), 8).unwrap();
    let ckpt = Checkpoint::from_model(
        &model,
        CheckpointHeader {
            config_hash: "h".into(),
            epoch: 1,
            val_macro_f1: 0.5,
            model: config,
            class_names: vec!["a".into(), "b".into(), "c".into()],
        },
    );
    let cbytes = ckpt.encode().unwrap();
    let cback = Checkpoint::decode(&cbytes, Path::new("mem")).unwrap();
    let restored = cback.to_model().unwrap();
    let ckpt_ok = cback == ckpt
        && cback.encode().unwrap() == cbytes
        && restored
            .store
            .iter()
            .zip(model.store.iter())
            .all(|(a, b)| a.value.data().iter().map(|v| v.to_bits()).eq(b.value.data().iter().map(|v| v.to_bits())));

    let mut diagnostics = Vec::new();
    let mut positioned = |bytes: &[u8], decode: &dyn Fn(&[u8]) -> Result<(), Error>| match decode(bytes) {
        Err(Error::Format { offset, .. }) => {
            diagnostics.push(offset);
            true
        }
        _ => false,
    };
    let bag_decode = |b: &[u8]| decode_bag(b, Path::new("mem")).map(|_| ());
    let ckpt_decode = |b: &[u8]| Checkpoint::decode(b, Path::new("mem")).map(|_| ());
    let mut bad_magic = bytes.clone();
    bad_magic[1] ^= 0xff;
    let mut corrupt_ok = positioned(&bad_magic, &bag_decode);
    corrupt_ok &= positioned(&bytes[..bytes.len() - 5], &bag_decode);
    corrupt_ok &= positioned(&[bytes.as_slice(), &[0u8]].concat(), &bag_decode);
    corrupt_ok &= positioned(&cbytes[..cbytes.len() / 2], &ckpt_decode);
    let mut bad_ckpt = cbytes.clone();
    bad_ckpt[0] = b'X';
    corrupt_ok &= positioned(&bad_ckpt, &ckpt_decode);

    let bad_path = dir.join("bad.bag");
    std::fs::write(&bad_path, &bytes[..bytes.len() - 5]).unwrap();
    let (code, _, err) = run_cli(&["inspect", bad_path.to_str().unwrap()]);
    let cli_ok = code == 2 && err.contains("offset");
    outcome(
        bag_ok && ckpt_ok && corrupt_ok && cli_ok,
        format!(
            "bag bitwise {bag_ok}, checkpoint bitwise {ckpt_ok}, corruption offsets {diagnostics:?}, inspect corrupt bag exit {code}"
        ),
    )
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let filter = args.iter().skip(1).find(|a| !a.starts_with('-')).cloned();
    let dir = tempfile::tempdir().unwrap();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("parameter budget", Box::new(param_budget)),
        ("gradient correctness", Box::new(gradient_check)),
        ("permutation invariance", Box::new(permutation_invariance)),
        ("loss oracle", Box::new(loss_oracle)),
        ("end-to-end convergence", Box::new(|| end_to_end(dir.path()))),
        ("overfit sanity", Box::new(overfit)),
        ("split arithmetic", Box::new(split_arithmetic)),
        ("metrics oracle", Box::new(metrics_oracle)),
        ("t-SNE", Box::new(tsne)),
        ("persistence", Box::new(|| persistence(dir.path()))),
    ];
    let mut failed = 0;
    for (name, check) in &criteria {
        if filter.as_deref().is_some_and(|f| !name.contains(f)) {
            continue;
        }
        let start = Instant::now();
        let o = check();
        let status = if o.pass { "PASS" } else { "FAIL" };
        println!("{status} {name}: {} [{:.1}s]", o.detail, start.elapsed().as_secs_f64());
        if !o.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
