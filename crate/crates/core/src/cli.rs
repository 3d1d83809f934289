//! Command-line workflow: synthesize, split, train, evaluate, visualize.
//!
//! Every subcommand resolves one flat [`RunConfig`] from (lowest to highest
//! precedence) built-in defaults, `BAGFORGE_SEED`, a TOML `--config` file and
//! explicit flags. Commands that write outputs also write the resolved config
//! next to them, so `--config <that file>` reruns the step exactly.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregators::{AggregatorKind, TransMilConfig};
use crate::datastore::{
    decode_bag, manifest_path, read_file, stratified_split, synthesize_dataset, write_atomic, Checkpoint,
    CheckpointHeader, Grouping, Manifest, Split, SplitSpec, SynthConfig, CHECKPOINT_MAGIC, MANIFEST_FILE,
};
use crate::error::{config_err, domain_err, Error, Result};
use crate::metrics::{emit_report, summarize, Average};
use crate::model::{Model, ModelConfig};
use crate::optim::{evaluate, train, AdamWConfig, TrainConfig, WeightsFrom};
use crate::tsne::{emit_scatter, run_tsne, tsne_csv, EmbeddingSet, TsneConfig};

pub const SEED_ENV: &str = "BAGFORGE_SEED";

/// Everything a run depends on. Unknown keys in a config file are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: String,
    pub out: PathBuf,
    /// Dataset directory or manifest file; defaults to `out`.
    pub data: Option<PathBuf>,
    pub seed: u64,
    pub aggregator: AggregatorKind,
    pub average: Average,

    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub patience: usize,
    pub class_weighting: bool,
    pub weights_from: WeightsFrom,
    pub attn_hidden: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,

    pub d: usize,
    pub k: usize,
    pub bags: usize,
    pub n_min: usize,
    pub n_max: usize,
    pub sep: f64,

    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub grouping: Grouping,
    pub force: bool,

    pub checkpoint: Option<PathBuf>,
    pub split: Option<Split>,
    pub perplexity: f64,
    pub iterations: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let adam = AdamWConfig::default();
        let tm = TransMilConfig::default();
        let synth = SynthConfig::default();
        let split = SplitSpec::default();
        let tsne = TsneConfig::default();
        RunConfig {
            run_id: "run".into(),
            out: PathBuf::from("."),
            data: None,
            seed: 0,
            aggregator: AggregatorKind::TransMil,
            average: Average::Macro,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            weight_decay: adam.weight_decay,
            epochs: 50,
            patience: 10,
            class_weighting: true,
            weights_from: WeightsFrom::Train,
            attn_hidden: 128,
            d_model: tm.d_model,
            heads: tm.heads,
            layers: tm.layers,
            d: synth.d,
            k: synth.k,
            bags: synth.k * synth.bags_per_class,
            n_min: synth.n_min,
            n_max: synth.n_max,
            sep: synth.separation,
            train: split.train,
            val: split.val,
            test: split.test,
            grouping: split.grouping,
            force: false,
            checkpoint: None,
            split: None,
            perplexity: tsne.perplexity,
            iterations: tsne.iterations,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| config_err!("{}: {e}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config_err!("cannot serialize run config: {e}"))
    }

    /// SHA-256 of the resolved TOML, hex encoded.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        }))
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data.clone().unwrap_or_else(|| self.out.clone())
    }

    pub fn model_config(&self, d: usize, k: usize) -> ModelConfig {
        ModelConfig {
            aggregator: self.aggregator,
            d,
            k,
            attn_hidden: self.attn_hidden,
            transmil: TransMilConfig {
                d_model: self.d_model,
                heads: self.heads,
                layers: self.layers,
                ..TransMilConfig::default()
            },
        }
    }

    pub fn train_config(&self, d: usize, k: usize) -> TrainConfig {
        TrainConfig {
            model: self.model_config(d, k),
            optimizer: AdamWConfig {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
                weight_decay: self.weight_decay,
            },
            epochs: self.epochs,
            patience: self.patience,
            seed: self.seed,
            class_weighting: self.class_weighting,
            weights_from: self.weights_from,
        }
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            train: self.train,
            val: self.val,
            test: self.test,
            seed: self.seed,
            grouping: self.grouping,
            force: self.force,
        }
    }

    pub fn synth_config(&self) -> Result<SynthConfig> {
        if self.k == 0 || !self.bags.is_multiple_of(self.k) {
            return Err(config_err!("--bags {} must be a positive multiple of --k {}", self.bags, self.k));
        }
        Ok(SynthConfig {
            k: self.k,
            bags_per_class: self.bags / self.k,
            n_min: self.n_min,
            n_max: self.n_max,
            d: self.d,
            separation: self.sep,
            seed: self.seed,
        })
    }

    pub fn tsne_config(&self) -> TsneConfig {
        TsneConfig {
            perplexity: self.perplexity,
            iterations: self.iterations,
            seed: self.seed,
            ..TsneConfig::default()
        }
    }

    fn write_resolved(&self, command: &str) -> Result<PathBuf> {
        let path = self.out.join(format!("{}.{command}.config.toml", self.run_id));
        write_atomic(&path, self.to_toml()?.as_bytes())?;
        Ok(path)
    }
}

fn parse_enum<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn parse_aggregator(s: &str) -> std::result::Result<AggregatorKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_average(s: &str) -> std::result::Result<Average, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "bagforge", version, about = "Multiple instance learning on TMA core embeddings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default)]
pub struct Common {
    /// Seed for every random stream (falls back to BAGFORGE_SEED, then 0).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Name used as prefix of every output file.
    #[arg(long, global = true)]
    pub run_id: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic Gaussian bag dataset.
    Synth(SynthArgs),
    /// Assign cores to train/val/test, stratified by class.
    Split(SplitArgs),
    /// Train a model and evaluate it on the test split.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Two-dimensional t-SNE map of core embeddings.
    Tsne(TsneArgs),
    /// Print trainable parameters per tensor.
    CountParams(CountArgs),
    /// Describe a bag file, checkpoint or manifest.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub k: Option<usize>,
    /// Total number of bags, split evenly across classes.
    #[arg(long)]
    pub bags: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    /// Distance of class means from the origin.
    #[arg(long)]
    pub sep: Option<f64>,
    #[arg(long)]
    pub n_min: Option<usize>,
    #[arg(long)]
    pub n_max: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub train: Option<f64>,
    #[arg(long)]
    pub val: Option<f64>,
    #[arg(long)]
    pub test: Option<f64>,
    /// core | tma
    #[arg(long, value_parser = parse_enum::<Grouping>)]
    pub grouping: Option<Grouping>,
    /// Allow empty splits and classes with fewer than three units.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// bgap | bgmp | milatt | transmil
    #[arg(long, value_parser = parse_aggregator)]
    pub aggregator: Option<AggregatorKind>,
    #[arg(long)]
    pub attn_hidden: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Epochs without validation improvement before stopping; 0 disables.
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Train with uniform class weights.
    #[arg(long)]
    pub no_class_weighting: bool,
    /// train | all
    #[arg(long, value_parser = parse_enum::<WeightsFrom>)]
    pub weights_from: Option<WeightsFrom>,
    /// macro | weighted
    #[arg(long, value_parser = parse_average)]
    pub average: Option<Average>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Defaults to `<out>/<run-id>.ckpt`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// train | val | test
    #[arg(long, value_parser = parse_enum::<Split>)]
    pub split: Option<Split>,
    /// macro | weighted
    #[arg(long, value_parser = parse_average)]
    pub average: Option<Average>,
}

#[derive(Debug, Args)]
pub struct TsneArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Restrict to one split; all cores by default.
    #[arg(long, value_parser = parse_enum::<Split>)]
    pub split: Option<Split>,
    #[arg(long)]
    pub perplexity: Option<f64>,
    #[arg(long)]
    pub iterations: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CountArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[command(flatten)]
    pub common: Common,
    /// Bag file, checkpoint, manifest file or dataset directory.
    pub path: PathBuf,
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

/// Defaults, then the seed environment variable, then the config file, then
/// the common flags.
pub fn resolve_common(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Ok(s) = std::env::var(SEED_ENV) {
        cfg.seed = s
            .trim()
            .parse()
            .map_err(|_| config_err!("{SEED_ENV}={s:?} is not an unsigned integer"))?;
    }
    if let Some(path) = &common.config {
        let text = String::from_utf8(read_file(path)?).map_err(|_| config_err!("{}: not UTF-8", path.display()))?;
        let env_seed = cfg.seed;
        let table: toml::Table = toml::from_str(&text).map_err(|e| config_err!("{}: {e}", path.display()))?;
        cfg = RunConfig::from_toml(&text, path)?;
        if !table.contains_key("seed") {
            cfg.seed = env_seed;
        }
    }
    set(&mut cfg.seed, common.seed);
    set(&mut cfg.out, common.out.clone());
    set(&mut cfg.run_id, common.run_id.clone());
    if cfg.run_id.is_empty() || cfg.run_id.contains(['/', '\\']) {
        return Err(config_err!("invalid run id {:?}", cfg.run_id));
    }
    Ok(cfg)
}

fn apply_model(cfg: &mut RunConfig, m: &ModelArgs) {
    set(&mut cfg.aggregator, m.aggregator);
    set(&mut cfg.attn_hidden, m.attn_hidden);
    set(&mut cfg.d_model, m.d_model);
    set(&mut cfg.heads, m.heads);
    set(&mut cfg.layers, m.layers);
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code. Usage errors print to `err` and return 1.
pub fn dispatch<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{}", e.render());
                    0
                }
                _ => {
                    let _ = write!(err, "{}", e.render());
                    1
                }
            };
        }
    };
    match run(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a, out),
        Command::Split(a) => split(a, out),
        Command::Train(a) => train_cmd(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Tsne(a) => tsne(a, out),
        Command::CountParams(a) => count_params(a, out),
        Command::Inspect(a) => inspect(a, out),
    }
}

fn say(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))
}

fn synth(a: SynthArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = resolve_common(&a.common)?;
    set(&mut cfg.k, a.k);
    set(&mut cfg.bags, a.bags);
    set(&mut cfg.d, a.d);
    set(&mut cfg.sep, a.sep);
    set(&mut cfg.n_min, a.n_min);
    set(&mut cfg.n_max, a.n_max);
    let report = synthesize_dataset(&cfg.synth_config()?, &cfg.out)?;
    cfg.write_resolved("synth")?;
    say(
        out,
        &format!(
            "wrote {} bags (d={}, K={}) to {}\ncentroid probe accuracy {:.4}\n",
            report.manifest.entries.len(),
            report.manifest.d,
            report.manifest.k,
            cfg.out.join(MANIFEST_FILE).display(),
            report.probe_accuracy
        ),
    )
}

fn split(a: SplitArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = resolve_common(&a.common)?;
    set(&mut cfg.data, a.data.map(Some));
    set(&mut cfg.train, a.train);
    set(&mut cfg.val, a.val);
    set(&mut cfg.test, a.test);
    set(&mut cfg.grouping, a.grouping);
    cfg.force |= a.force;
    let src = manifest_path(&cfg.data_dir());
    let manifest = Manifest::load(&src)?;
    let mut split = stratified_split(&manifest, &cfg.split_spec())?;
    let dst = cfg.out.join(MANIFEST_FILE);
    let src_base = src.parent().unwrap_or(Path::new("."));
    if !same_dir(src_base, &cfg.out) {
        for e in &mut split.entries {
            e.path = absolute(&Manifest::resolve(src_base, e))?.to_string_lossy().into_owned();
        }
    }
    split.save(&dst)?;
    cfg.write_resolved("split")?;
    let mut text = String::new();
    for s in [Split::Train, Split::Val, Split::Test] {
        let _ = writeln!(text, "{s:<5} {:>6} {:?}", split.entries_in(s).count(), split.class_counts(Some(s)));
    }
    let _ = writeln!(text, "wrote {}", dst.display());
    say(out, &text)
}

fn absolute(p: &Path) -> Result<PathBuf> {
    std::path::absolute(p).map_err(|e| Error::io(p, e))
}

fn same_dir(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    }
}

fn dataset(cfg: &RunConfig) -> Result<(Manifest, PathBuf)> {
    let path = manifest_path(&cfg.data_dir());
    let manifest = Manifest::load(&path)?;
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    Ok((manifest, base))
}

fn train_cmd(a: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = resolve_common(&a.common)?;
    apply_model(&mut cfg, &a.model);
    set(&mut cfg.data, a.data.map(Some));
    set(&mut cfg.lr, a.lr);
    set(&mut cfg.epochs, a.epochs);
    set(&mut cfg.patience, a.patience);
    set(&mut cfg.weight_decay, a.weight_decay);
    set(&mut cfg.weights_from, a.weights_from);
    set(&mut cfg.average, a.average);
    if a.no_class_weighting {
        cfg.class_weighting = false;
    }
    let (manifest, base) = dataset(&cfg)?;
    let (d, k) = (manifest.d as usize, manifest.k as usize);
    let tc = cfg.train_config(d, k);
    tc.validate()?;
    let test_bags = manifest.load_bags(&base, Split::Test)?;
    if manifest.entries_in(Split::Train).next().is_none() {
        return Err(domain_err!("no training cores in {}; run `split` first", base.display()));
    }
    let hash = cfg.hash()?;
    cfg.write_resolved("train")?;

    let outcome = train(&manifest, &base, &tc)?;
    let ckpt_path = cfg.out.join(format!("{}.ckpt", cfg.run_id));
    Checkpoint::from_model(
        &outcome.best,
        CheckpointHeader {
            config_hash: hash,
            epoch: outcome.best_epoch,
            val_macro_f1: outcome.best_val_f1,
            model: outcome.best.config.clone(),
            class_names: manifest.class_names.clone(),
        },
    )
    .save(&ckpt_path)?;
    write_atomic(
        &cfg.out.join(format!("{}.log.jsonl", cfg.run_id)),
        outcome.log_jsonl().as_bytes(),
    )?;

    let mut text = String::new();
    for e in &outcome.log {
        let _ = writeln!(
            text,
            "epoch {:>3}  loss {:.6}  val macro-F1 {:.4}  val acc {:.4}",
            e.epoch, e.train_loss, e.val_macro_f1, e.val_acc
        );
    }
    let _ = writeln!(
        text,
        "best epoch {} (val macro-F1 {:.4}); checkpoint {}",
        outcome.best_epoch,
        outcome.best_val_f1,
        ckpt_path.display()
    );
    if test_bags.is_empty() {
        let _ = writeln!(text, "test split is empty; no test metrics written");
    } else {
        let cm = evaluate(&outcome.best, &test_bags)?;
        let report = summarize(&cm, cfg.average)?;
        let paths = emit_report(&cm, &report, &manifest.class_names, &cfg.out, &cfg.run_id)?;
        let _ = writeln!(
            text,
            "test ({:?}) SEN {:.4} PREC {:.4} ACC {:.4} F1 {:.4}; metrics {}",
            cfg.average,
            report.sen,
            report.prec,
            report.acc,
            report.f1,
            paths.json.display()
        );
    }
    say(out, &text)
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = resolve_common(&a.common)?;
    set(&mut cfg.data, a.data.map(Some));
    set(&mut cfg.checkpoint, a.checkpoint.map(Some));
    set(&mut cfg.split, a.split.map(Some));
    set(&mut cfg.average, a.average);
    let ckpt_path = cfg
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.out.join(format!("{}.ckpt", cfg.run_id)));
    let ckpt = Checkpoint::load(&ckpt_path)?;
    let model: Model = ckpt.to_model()?;
    let (manifest, base) = dataset(&cfg)?;
    if manifest.d as usize != model.config.d || manifest.k as usize != model.config.k {
        return Err(domain_err!(
            "checkpoint expects d={} K={}, dataset has d={} K={}",
            model.config.d,
            model.config.k,
            manifest.d,
            manifest.k
        ));
    }
    let which = cfg.split.unwrap_or(Split::Test);
    let bags = manifest.load_bags(&base, which)?;
    if bags.is_empty() {
        return Err(domain_err!("split {which} has no cores"));
    }
    let cm = evaluate(&model, &bags)?;
    let report = summarize(&cm, cfg.average)?;
    let run_id = format!("{}.eval-{which}", cfg.run_id);
    let paths = emit_report(&cm, &report, &manifest.class_names, &cfg.out, &run_id)?;
    cfg.write_resolved("eval")?;
    say(
        out,
        &format!(
            "{which} ({} cores, {:?}) SEN {:.4} PREC {:.4} ACC {:.4} F1 {:.4}\nmetrics {}\n",
            bags.len(),
            cfg.average,
            report.sen,
            report.prec,
            report.acc,
            report.f1,
            paths.json.display()
        ),
    )
}

fn tsne(a: TsneArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = resolve_common(&a.common)?;
    set(&mut cfg.data, a.data.map(Some));
    set(&mut cfg.split, a.split.map(Some));
    set(&mut cfg.perplexity, a.perplexity);
    set(&mut cfg.iterations, a.iterations);
    let (manifest, base) = dataset(&cfg)?;
    let mut bags = Vec::new();
    match cfg.split {
        Some(s) => bags.extend(manifest.load_bags(&base, s)?),
        None => {
            for s in [Split::Train, Split::Val, Split::Test, Split::Unassigned] {
                bags.extend(manifest.load_bags(&base, s)?);
            }
        }
    }
    let set = EmbeddingSet::from_bags(&bags)?;
    let result = run_tsne(&set, &cfg.tsne_config())?;
    let csv = cfg.out.join(format!("{}.tsne.csv", cfg.run_id));
    let svg = cfg.out.join(format!("{}.tsne.svg", cfg.run_id));
    write_atomic(&csv, tsne_csv(&set, &result.coords).as_bytes())?;
    emit_scatter(&result.coords, &set.labels, &manifest.class_names, &svg)?;
    cfg.write_resolved("tsne")?;
    say(
        out,
        &format!(
            "{} cores; KL {:.4} -> {:.4}\nwrote {} and {}\n",
            set.len(),
            result.initial_kl,
            result.final_kl,
            csv.display(),
            svg.display()
        ),
    )
}

fn count_params(a: CountArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = resolve_common(&a.common)?;
    apply_model(&mut cfg, &a.model);
    set(&mut cfg.d, a.d);
    set(&mut cfg.k, a.k);
    let model = Model::new(cfg.model_config(cfg.d, cfg.k), cfg.seed)?;
    let breakdown = model.count_params();
    let width = breakdown.entries.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(5);
    let mut text = format!("{:<width$}  {:>10}\n", "tensor", "count");
    for (name, n) in &breakdown.entries {
        let _ = writeln!(text, "{name:<width$}  {n:>10}");
    }
    let _ = writeln!(text, "{:<width$}  {:>10}", "total", breakdown.total);
    say(out, &text)
}

fn inspect(a: InspectArgs, out: &mut dyn Write) -> Result<()> {
    let path = &a.path;
    let mut text = String::new();
    if path.is_dir() || path.extension().is_some_and(|e| e == "json") {
        let mpath = manifest_path(path);
        let m = Manifest::load(&mpath)?;
        let _ = writeln!(text, "manifest {}", mpath.display());
        let _ = writeln!(text, "dataset  {}", m.dataset_id);
        let _ = writeln!(text, "d={} K={} cores={}", m.d, m.k, m.entries.len());
        let _ = writeln!(text, "classes  {}", m.class_names.join(", "));
        for s in [Split::Train, Split::Val, Split::Test, Split::Unassigned] {
            let n = m.entries_in(s).count();
            if n > 0 {
                let _ = writeln!(text, "{s:<10} {n:>6} per class {:?}", m.class_counts(Some(s)));
            }
        }
        m.check_paths(mpath.parent().unwrap_or(Path::new(".")))?;
        let _ = writeln!(text, "all bag files present");
        return say(out, &text);
    }
    let bytes = read_file(path)?;
    if bytes.starts_with(CHECKPOINT_MAGIC) {
        let c = Checkpoint::decode(&bytes, path)?;
        let scalars: usize = c.tensors.iter().map(|(_, t)| t.len()).sum();
        let _ = writeln!(text, "checkpoint {}", path.display());
        let _ = writeln!(text, "aggregator {} d={} K={}", c.header.model.aggregator, c.header.model.d, c.header.model.k);
        let _ = writeln!(text, "epoch {} val macro-F1 {:.4}", c.header.epoch, c.header.val_macro_f1);
        let _ = writeln!(text, "config hash {}", c.header.config_hash);
        let _ = writeln!(text, "{} tensors, {scalars} parameters", c.tensors.len());
    } else {
        let (h, bag) = decode_bag(&bytes, path)?;
        let norm = bag.mean_embedding().iter().map(|v| v * v).sum::<f64>().sqrt();
        let _ = writeln!(text, "bag {}", path.display());
        let _ = writeln!(text, "version {}", h.version);
        let _ = writeln!(text, "core_id {}", h.core_id);
        let _ = writeln!(text, "label {} of K={}", h.label, h.k);
        let _ = writeln!(text, "instances {} x d={}", h.n, h.d);
        let _ = writeln!(text, "mean embedding norm {norm:.4}");
    }
    say(out, &text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_roundtrip_and_unknown_keys() {
        let cfg = RunConfig {
            aggregator: AggregatorKind::MilAtt,
            data: Some("x".into()),
            ..Default::default()
        };
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text, Path::new("c")).unwrap(), cfg);
        assert_eq!(cfg.hash().unwrap().len(), 64);
        let err = RunConfig::from_toml("bogus = 1\n", Path::new("c")).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let partial = RunConfig::from_toml("lr = 0.001\naggregator = \"bgmp\"\n", Path::new("c")).unwrap();
        assert_eq!(partial.lr, 0.001);
        assert_eq!(partial.aggregator, AggregatorKind::Bgmp);
        assert_eq!(partial.epochs, 50);
    }

    #[test]
    fn usage_errors_exit_one() {
        let (mut o, mut e) = (Vec::new(), Vec::new());
        assert_eq!(dispatch(["bagforge", "frobnicate"], &mut o, &mut e), 1);
        assert!(String::from_utf8_lossy(&e).contains("Usage"));
        let (mut o, mut e) = (Vec::new(), Vec::new());
        assert_eq!(dispatch(["bagforge", "train", "--bogus"], &mut o, &mut e), 1);
        let (mut o, mut e) = (Vec::new(), Vec::new());
        assert_eq!(dispatch(["bagforge", "train", "--aggregator", "gru"], &mut o, &mut e), 1);
        let (mut o, mut e) = (Vec::new(), Vec::new());
        assert_eq!(dispatch(["bagforge", "--help"], &mut o, &mut e), 0);
        assert!(String::from_utf8_lossy(&o).contains("count-params"));
    }

    #[test]
    fn synth_requires_divisible_bags() {
        let cfg = RunConfig {
            k: 4,
            bags: 10,
            ..Default::default()
        };
        assert!(cfg.synth_config().is_err());
    }
}
