//! Command-line front end: run configuration, the six subcommands, metrics
//! and ablation tables.
//!
//! Every command writes its human-readable output to the supplied writer and
//! its artifacts under the output directory.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::contrastive::{LossVariant, LossWeights};
use crate::data::{self, io as dio};
use crate::error::{Error, Result};
use crate::gradcheck::{self, GradcheckConfig};
use crate::model::checkpoint;
use crate::trainer::{self, Dataset, EpochReport, TrainConfig};

pub const REAL_MANIFEST: &str = "real.jsonl";
pub const TEST_MANIFEST: &str = "test.jsonl";
pub const SYNTHETIC_MANIFEST: &str = "synthetic.jsonl";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "model.json";
pub const ABLATION_FILE: &str = "ablation.csv";

/// Metrics columns, in file order.
pub const METRICS_HEADER: [&str; 10] = [
    "epoch", "lr", "loss_mixup", "loss_cutmix", "loss_sc", "noise_count", "test_top1", "many", "med", "few",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Directory holding `real.jsonl`, `test.jsonl` and `synthetic.jsonl`;
    /// when absent, `train` and `ablate` build the data in memory.
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_dir: None,
            out_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Mode {
    /// Loss variants compared by `ablate`.
    pub variants: Vec<LossVariant>,
    /// Whether `ablate` also runs the component grid.
    pub components: bool,
}

impl Default for Mode {
    fn default() -> Self {
        Self {
            variants: LossVariant::ALL.to_vec(),
            components: true,
        }
    }
}

/// Everything a command needs; read from TOML.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub paths: Paths,
    pub mode: Mode,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse {
            path: PathBuf::from("<config>"),
            message: e.message().to_string(),
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.message().to_string(),
        })
    }

    /// Applies the common flags. A seed drives the class model, the split and
    /// training alike.
    pub fn with_common(mut self, common: &Common) -> Result<Self> {
        if let Some(seed) = common.seed {
            self.train.seed = seed;
            self.train.lt.seed = seed;
            self.train.gen.seed = seed;
        }
        if let Some(out) = &common.out {
            self.paths.out_dir = out.clone();
        }
        Ok(self)
    }

    pub fn out_dir(&self) -> Result<&Path> {
        let dir = &self.paths.out_dir;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(dir)
    }

    pub fn data_dir(&self) -> Result<Option<&Path>> {
        match &self.paths.data_dir {
            Some(d) if !d.is_dir() => Err(Error::InvalidConfig(format!("data dir {} does not exist", d.display()))),
            Some(d) => Ok(Some(d)),
            None => Ok(None),
        }
    }

    fn set_epochs(&mut self, epochs: Option<usize>) {
        if let Some(e) = epochs {
            self.train.epochs = e;
            self.train.optim.total_epochs = e;
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Parser)]
#[command(name = "sau", version, about = "Long-tailed training over real and synthetic data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the long-tailed real split and a balanced test set.
    MakeData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        n0: Option<usize>,
        /// Imbalance factor.
        #[arg(long = "if")]
        imbalance: Option<f64>,
        #[arg(long)]
        test_per_class: Option<usize>,
    },
    /// Generate the quality-filtered synthetic complement of a real split.
    GenSynth {
        #[command(flatten)]
        common: Common,
        /// Real manifest (default: `<out>/real.jsonl`).
        #[arg(long)]
        real: Option<PathBuf>,
        /// Per-class total after complementing.
        #[arg(long)]
        target: Option<usize>,
        #[arg(long)]
        noise_rate: Option<f64>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Train, writing per-epoch metrics and a final checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
        /// Directory with manifests from `make-data` / `gen-synth`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        variant: Option<LossVariant>,
    },
    /// Compare loss variants and loss components on one dataset.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Finite-difference check of every analytic gradient.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        instances: Option<usize>,
        #[arg(long)]
        tolerance: Option<f64>,
    },
    /// Evaluate a checkpoint on a test manifest.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint manifest (default: `<out>/model.json`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Test manifest (default: `<data or out>/test.jsonl`).
        #[arg(long)]
        test: Option<PathBuf>,
        /// Real training manifest used for group membership.
        #[arg(long)]
        real: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

impl Command {
    pub fn common(&self) -> &Common {
        match self {
            Command::MakeData { common, .. }
            | Command::GenSynth { common, .. }
            | Command::Train { common, .. }
            | Command::Ablate { common, .. }
            | Command::Gradcheck { common, .. }
            | Command::Eval { common, .. } => common,
        }
    }
}

impl std::str::FromStr for RunConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::from_toml(s)
    }
}

/// Loads the configuration named by `--config` (or the defaults) and applies
/// the common flags.
pub fn resolve_config(common: &Common) -> Result<RunConfig> {
    let base = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    base.with_common(common)
}

/// Dispatches one parsed command.
pub fn run(cmd: &Command, out: &mut dyn Write) -> Result<()> {
    let mut cfg = resolve_config(cmd.common())?;
    match cmd {
        Command::MakeData {
            classes,
            n0,
            imbalance,
            test_per_class,
            ..
        } => {
            if let Some(n) = classes {
                cfg.train.lt.n_classes = *n;
                cfg.train.gen.n_classes = *n;
                cfg.train.arch.n_classes = *n;
            }
            if let Some(n) = n0 {
                cfg.train.lt.n0 = *n;
            }
            if let Some(f) = imbalance {
                cfg.train.lt.imbalance_factor = *f;
            }
            if let Some(t) = test_per_class {
                cfg.train.test_per_class = *t;
            }
            cmd_make_data(&cfg, out)
        }
        Command::GenSynth {
            real,
            target,
            noise_rate,
            threshold,
            ..
        } => {
            if let Some(t) = target {
                cfg.train.balance_target = Some(*t);
            }
            if let Some(r) = noise_rate {
                cfg.train.gen.noise_rate = *r;
            }
            if let Some(t) = threshold {
                cfg.train.gen.quality_threshold = *t;
            }
            cmd_gen_synth(&cfg, real.as_deref(), out)
        }
        Command::Train {
            epochs, data, variant, ..
        } => {
            cfg.set_epochs(*epochs);
            if data.is_some() {
                cfg.paths.data_dir = data.clone();
            }
            if let Some(v) = variant {
                cfg.train.variant = *v;
            }
            cmd_train(&cfg, out)
        }
        Command::Ablate { epochs, data, .. } => {
            cfg.set_epochs(*epochs);
            if data.is_some() {
                cfg.paths.data_dir = data.clone();
            }
            cmd_ablate(&cfg, out).map(|_| ())
        }
        Command::Gradcheck {
            instances, tolerance, ..
        } => {
            let mut g = GradcheckConfig {
                seed: cfg.train.seed,
                ..GradcheckConfig::default()
            };
            if let Some(n) = instances {
                g.instances = *n;
            }
            if let Some(t) = tolerance {
                g.tolerance = *t;
            }
            cmd_gradcheck(&g, out)
        }
        Command::Eval {
            checkpoint,
            test,
            real,
            data,
            ..
        } => {
            if data.is_some() {
                cfg.paths.data_dir = data.clone();
            }
            cmd_eval(&cfg, checkpoint.as_deref(), test.as_deref(), real.as_deref(), out).map(|_| ())
        }
    }
}

fn emit(out: &mut dyn Write, line: impl std::fmt::Display) -> Result<()> {
    writeln!(out, "{line}").map_err(|e| Error::io("<stdout>", e))
}

/// Writes `real.jsonl` and `test.jsonl` under the output directory.
pub fn cmd_make_data(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let dir = cfg.out_dir()?;
    let (_, real, test) = trainer::build_real(&cfg.train)?;
    dio::write_dataset(&dir.join(REAL_MANIFEST), &real)?;
    dio::write_dataset(&dir.join(TEST_MANIFEST), &test)?;
    let counts = data::class_counts(&real, cfg.train.lt.n_classes)?;
    emit(out, format!("counts {counts:?}"))?;
    emit(out, format!("real {} test {}", real.len(), test.len()))
}

/// Writes `synthetic.jsonl`: per-class complements up to the balance target.
pub fn cmd_gen_synth(cfg: &RunConfig, real_manifest: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let dir = cfg.out_dir()?;
    let default_real = cfg.data_dir()?.unwrap_or(dir).join(REAL_MANIFEST);
    let real_path = real_manifest.unwrap_or(&default_real);
    let real = dio::read_dataset(real_path)?;
    let t = &cfg.train;
    let counts = data::class_counts(&real, t.lt.n_classes)?;
    let model = t.gen.resolve()?;
    let first_id = real
        .iter()
        .map(|s| s.id + 1)
        .max()
        .unwrap_or(0)
        .max(trainer::synthetic_first_id(t));
    let synthetic = trainer::build_synthetic(t, &model, &counts, first_id)?;
    dio::write_dataset(&dir.join(SYNTHETIC_MANIFEST), &synthetic)?;
    let syn_counts = data::class_counts(&synthetic, t.lt.n_classes)?;
    let totals: Vec<usize> = counts.iter().zip(&syn_counts).map(|(a, b)| a + b).collect();
    emit(out, format!("synthetic {syn_counts:?}"))?;
    emit(out, format!("totals {totals:?}"))
}

/// Dataset from the data directory when one is configured, otherwise built
/// in memory.
pub fn load_or_build(cfg: &RunConfig) -> Result<Dataset> {
    let Some(dir) = cfg.data_dir()? else {
        return trainer::prepare_dataset(&cfg.train);
    };
    let real = dio::read_dataset(&dir.join(REAL_MANIFEST))?;
    let test = dio::read_dataset(&dir.join(TEST_MANIFEST))?;
    let syn_path = dir.join(SYNTHETIC_MANIFEST);
    let synthetic = if syn_path.exists() {
        dio::read_dataset(&syn_path)?
    } else {
        Vec::new()
    };
    Dataset::new(real, synthetic, test, cfg.train.lt.n_classes)
}

#[derive(Debug, Serialize, Deserialize)]
struct MetricsRow {
    epoch: usize,
    lr: f64,
    loss_mixup: f64,
    loss_cutmix: f64,
    loss_sc: f64,
    noise_count: usize,
    test_top1: f64,
    many: Option<f64>,
    med: Option<f64>,
    few: Option<f64>,
}

impl From<&EpochReport> for MetricsRow {
    fn from(r: &EpochReport) -> Self {
        Self {
            epoch: r.epoch,
            lr: r.lr,
            loss_mixup: r.loss_mixup,
            loss_cutmix: r.loss_cutmix,
            loss_sc: r.loss_sc,
            noise_count: r.noise_count,
            test_top1: r.test_top1,
            many: r.many,
            med: r.medium,
            few: r.few,
        }
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Reads a metrics file back into reports.
pub fn read_metrics(path: &Path) -> Result<Vec<EpochReport>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    rdr.deserialize::<MetricsRow>()
        .map(|row| {
            let r = row.map_err(|e| csv_err(path, e))?;
            Ok(EpochReport {
                epoch: r.epoch,
                lr: r.lr,
                loss_mixup: r.loss_mixup,
                loss_cutmix: r.loss_cutmix,
                loss_sc: r.loss_sc,
                noise_count: r.noise_count,
                test_top1: r.test_top1,
                many: r.many,
                medium: r.med,
                few: r.few,
            })
        })
        .collect()
}

fn fmt_acc(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| v.to_string())
}

/// Trains, streaming `metrics.csv` and writing `model.json` at the end.
pub fn cmd_train(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let dir = cfg.out_dir()?.to_path_buf();
    let ds = load_or_build(cfg)?;
    let metrics = dir.join(METRICS_FILE);
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(&metrics)
        .map_err(|e| csv_err(&metrics, e))?;
    w.write_record(METRICS_HEADER).map_err(|e| csv_err(&metrics, e))?;
    w.flush().map_err(|e| Error::io(&metrics, e))?;
    let mut write_err = None;
    let fit = trainer::fit_on(&cfg.train, &ds, |r| {
        let res = w
            .serialize(MetricsRow::from(r))
            .and_then(|_| w.flush().map_err(csv::Error::from));
        if let Err(e) = res {
            write_err.get_or_insert(csv_err(&metrics, e));
        }
        let _ = writeln!(
            out,
            "epoch {} lr {} top1 {} many {} med {} few {} noise {}",
            r.epoch,
            r.lr,
            r.test_top1,
            fmt_acc(r.many),
            fmt_acc(r.medium),
            fmt_acc(r.few),
            r.noise_count
        );
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    checkpoint::save(&fit.model, &dir.join(CHECKPOINT_FILE))?;
    emit(out, format!("pipeline {:016x}", fit.pipeline_hash))
}

/// Accuracy breakdown of a saved model, in the metrics file's number format.
pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint_path: Option<&Path>,
    test: Option<&Path>,
    real: Option<&Path>,
    out: &mut dyn Write,
) -> Result<trainer::Accuracy> {
    let out_dir = cfg.paths.out_dir.clone();
    let data_dir = cfg.data_dir()?.map(Path::to_path_buf).unwrap_or_else(|| out_dir.clone());
    let ckpt = checkpoint_path.map(Path::to_path_buf).unwrap_or_else(|| out_dir.join(CHECKPOINT_FILE));
    let test_path = test.map(Path::to_path_buf).unwrap_or_else(|| data_dir.join(TEST_MANIFEST));
    let state = checkpoint::load(&ckpt)?;
    let n_classes = state.arch().n_classes;
    let test = dio::read_dataset(&test_path)?;
    let real_path = real.map(Path::to_path_buf).unwrap_or_else(|| data_dir.join(REAL_MANIFEST));
    // without a real manifest, fall back to the configured long-tailed profile
    let counts = if real_path.exists() {
        data::class_counts(&dio::read_dataset(&real_path)?, n_classes)?
    } else {
        data::long_tailed_counts(&cfg.train.lt)
    };
    if counts.len() != n_classes {
        return Err(Error::ArchMismatch(format!(
            "checkpoint has {n_classes} classes, data has {}",
            counts.len()
        )));
    }
    let acc = trainer::evaluate(&state, &test, &counts, &cfg.train.thresholds)?;
    emit(out, format!("top1 {}", acc.overall))?;
    emit(out, format!("many {}", fmt_acc(acc.many)))?;
    emit(out, format!("med {}", fmt_acc(acc.medium)))?;
    emit(out, format!("few {}", fmt_acc(acc.few)))?;
    Ok(acc)
}

/// Prints one line per check; any failure is an error.
pub fn cmd_gradcheck(cfg: &GradcheckConfig, out: &mut dyn Write) -> Result<()> {
    let reports = gradcheck::run_suite(cfg)?;
    let mut failed = Vec::new();
    for r in &reports {
        emit(
            out,
            format!(
                "{:<10} {} max_rel_err {:.3e} over {} coordinates",
                r.name,
                if r.passed { "PASS" } else { "FAIL" },
                r.max_rel_err,
                r.coordinates
            ),
        )?;
        if !r.passed {
            failed.push(r.name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "gradient check failed for {} (tolerance {})",
            failed.join(", "),
            cfg.tolerance
        )))
    }
}

/// One row of the ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// `variants` or `components`.
    pub table: String,
    pub name: String,
    pub variant: LossVariant,
    pub ce: bool,
    pub mixup: bool,
    pub cutmix: bool,
    pub sc: bool,
    pub test_top1: f64,
    pub many: Option<f64>,
    pub med: Option<f64>,
    pub few: Option<f64>,
    pub final_noise_count: usize,
    /// Fingerprint of batch order and mixing draws; equal across rows that
    /// train on the same data with the same seed.
    pub pipeline: String,
}

/// Runs of the ablation: (table, name, config).
pub fn ablation_plan(cfg: &RunConfig) -> Vec<(&'static str, String, TrainConfig)> {
    let base = &cfg.train;
    let mut plan = Vec::new();
    for &v in &cfg.mode.variants {
        let mut c = base.clone();
        c.variant = v;
        c.weights = LossWeights::default();
        plan.push(("variants", v.to_string().to_uppercase(), c));
    }
    if cfg.mode.components {
        let rows: [(&str, [bool; 4]); 7] = [
            ("ce", [true, false, false, false]),
            ("mixup", [false, true, false, false]),
            ("cutmix", [false, false, true, false]),
            ("mixup+cutmix", [false, true, true, false]),
            ("mixup+sc", [false, true, false, true]),
            ("cutmix+sc", [false, false, true, true]),
            ("mixup+cutmix+sc", [false, true, true, true]),
        ];
        for (name, [ce, mixup, cutmix, sc]) in rows {
            let mut c = base.clone();
            c.variant = LossVariant::L2;
            let on = |b: bool| if b { 1.0 } else { 0.0 };
            c.weights = LossWeights {
                mixup: on(mixup),
                cutmix: on(cutmix),
                contrastive: on(sc),
                plain_ce: on(ce),
            };
            plan.push(("components", name.to_string(), c));
        }
    }
    plan
}

/// Runs the plan on one shared dataset and writes `ablation.csv`. Identical
/// configurations are trained once.
pub fn cmd_ablate(cfg: &RunConfig, out: &mut dyn Write) -> Result<Vec<AblationRow>> {
    let dir = cfg.out_dir()?.to_path_buf();
    let ds = load_or_build(cfg)?;
    let mut done: Vec<(TrainConfig, trainer::FitOutput)> = Vec::new();
    let mut rows = Vec::new();
    for (table, name, c) in ablation_plan(cfg) {
        let idx = match done.iter().position(|(k, _)| *k == c) {
            Some(i) => i,
            None => {
                let fit = trainer::fit_on(&c, &ds, |_| {})?;
                done.push((c.clone(), fit));
                done.len() - 1
            }
        };
        let fit = &done[idx].1;
        let last = fit.reports.last();
        let w = c.weights;
        let row = AblationRow {
            table: table.to_string(),
            name,
            variant: c.variant,
            ce: w.plain_ce > 0.0,
            mixup: w.mixup > 0.0,
            cutmix: w.cutmix > 0.0,
            sc: w.contrastive > 0.0,
            test_top1: last.map_or(0.0, |r| r.test_top1),
            many: last.and_then(|r| r.many),
            med: last.and_then(|r| r.medium),
            few: last.and_then(|r| r.few),
            final_noise_count: last.map_or(0, |r| r.noise_count),
            pipeline: format!("{:016x}", fit.pipeline_hash),
        };
        emit(
            out,
            format!(
                "{:<10} {:<16} top1 {:.4} many {} med {} few {} pipeline {}",
                row.table,
                row.name,
                row.test_top1,
                row.many.map_or("-".into(), |v| format!("{v:.4}")),
                row.med.map_or("-".into(), |v| format!("{v:.4}")),
                row.few.map_or("-".into(), |v| format!("{v:.4}")),
                row.pipeline
            ),
        )?;
        rows.push(row);
    }
    let path = dir.join(ABLATION_FILE);
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    for r in &rows {
        w.serialize(r).map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

/// Parses an ablation table written by [`cmd_ablate`].
pub fn read_ablation(path: &Path) -> Result<Vec<AblationRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    rdr.deserialize()
        .map(|r| r.map_err(|e| csv_err(path, e)))
        .collect()
}
