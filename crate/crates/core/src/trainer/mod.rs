//! The epoch loop: prototype refresh, batch pairs, one objective per step,
//! cosine learning rate and per-epoch evaluation.

pub mod step;

use std::hash::{DefaultHasher, Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::contrastive::{LossVariant, LossWeights};
use crate::data::{self, make_batch_pairs, LtSpec, Sample};
use crate::error::{Error, Result};
use crate::model::{cosine_lr, ArchConfig, ModelState, OptimConfig};
use crate::rng::Purpose;
use crate::syngen::{self, ClassModel, GenSpec, MeansSpec};
use crate::tensor::Matrix;

pub use step::{
    batch_hash, build_objective, refresh_prototypes, train_step, KnnReference, Objective, Prototypes, StepDraws,
    StepLosses,
};

/// Real-count boundaries of the evaluation groups: many `> high`, medium in
/// `(low, high]`, few `<= low`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    pub low: usize,
    pub high: usize,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { low: 20, high: 100 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    Many,
    Medium,
    Few,
}

impl Thresholds {
    pub fn group(&self, real_count: usize) -> Group {
        if real_count > self.high {
            Group::Many
        } else if real_count > self.low {
            Group::Medium
        } else {
            Group::Few
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Seed of every training-time stream (shuffles, views, mixing, init).
    pub seed: u64,
    pub epochs: usize,
    pub lt: LtSpec,
    pub gen: GenSpec,
    pub arch: ArchConfig,
    pub optim: OptimConfig,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub tau: f64,
    pub k: usize,
    pub variant: LossVariant,
    pub thresholds: Thresholds,
    /// Beta parameter of both mixing ratios.
    pub alpha: f64,
    /// Per-class total after complementing; `n0` when absent.
    pub balance_target: Option<usize>,
    /// Train on real samples only when false.
    pub use_synthetic: bool,
    pub test_per_class: usize,
    pub knn_reference: KnnReference,
    pub max_gen_attempts: usize,
}

impl Default for TrainConfig {
    /// Ten Gaussian classes in 16 dimensions with a 100:1 long tail.
    fn default() -> Self {
        let n_classes = 10;
        let dim = 16;
        let mut arch = ArchConfig::vector(dim, n_classes);
        arch.encoder_hidden = vec![64];
        arch.projection_hidden = vec![64];
        arch.projection_dim = 32;
        // batch statistics would differ between the refresh pass and the
        // training batches, shifting embeddings the neighbour vote compares
        arch.projection_norm = false;
        Self {
            seed: 0,
            epochs: 50,
            lt: LtSpec {
                n_classes,
                n0: 500,
                imbalance_factor: 100.0,
                seed: 0,
            },
            gen: GenSpec {
                n_classes,
                means: MeansSpec::Sphere { dim, radius: 2.0 },
                spread: 1.0,
                noise_rate: 0.2,
                quality_threshold: 0.5,
                seed: 0,
            },
            arch,
            optim: OptimConfig {
                lr0: 0.05,
                total_epochs: 50,
                ..OptimConfig::default()
            },
            batch_size: 128,
            weights: LossWeights::default(),
            tau: 0.1,
            k: 5,
            variant: LossVariant::L2,
            thresholds: Thresholds::default(),
            alpha: 1.0,
            balance_target: None,
            use_synthetic: true,
            test_per_class: 200,
            knn_reference: KnnReference::Bank,
            max_gen_attempts: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.lt.validate()?;
        self.gen.validate()?;
        self.arch.validate()?;
        self.optim.validate()?;
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.lt.n_classes != self.gen.n_classes || self.lt.n_classes != self.arch.n_classes {
            return bad(format!(
                "class counts disagree: lt {}, gen {}, arch {}",
                self.lt.n_classes, self.gen.n_classes, self.arch.n_classes
            ));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if self.thresholds.low >= self.thresholds.high {
            return bad(format!("thresholds need low < high, got {:?}", self.thresholds));
        }
        if !(self.tau > 0.0) || self.k == 0 || !(self.alpha > 0.0) {
            return bad(format!("need tau > 0, k >= 1, alpha > 0 (tau {}, k {}, alpha {})", self.tau, self.k, self.alpha));
        }
        let w = self.weights;
        if [w.mixup, w.cutmix, w.contrastive, w.plain_ce].iter().any(|v| !(*v >= 0.0)) {
            return bad(format!("loss weights must be non-negative: {w:?}"));
        }
        if self.test_per_class == 0 {
            return bad("test_per_class must be positive".into());
        }
        Ok(())
    }

    /// The cross-entropy baseline: real long-tailed data, plain CE only.
    pub fn baseline(&self) -> Self {
        Self {
            weights: LossWeights {
                mixup: 0.0,
                cutmix: 0.0,
                contrastive: 0.0,
                plain_ce: 1.0,
            },
            use_synthetic: false,
            ..self.clone()
        }
    }

    pub fn balance_target(&self) -> usize {
        self.balance_target.unwrap_or(self.lt.n0)
    }
}

/// Everything `fit` trains and evaluates on.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Long-tailed real split.
    pub real: Vec<Sample>,
    /// Quality-filtered synthetic complement.
    pub synthetic: Vec<Sample>,
    /// Balanced held-out real samples.
    pub test: Vec<Sample>,
    pub real_counts: Vec<usize>,
}

impl Dataset {
    pub fn new(real: Vec<Sample>, synthetic: Vec<Sample>, test: Vec<Sample>, n_classes: usize) -> Result<Self> {
        for s in real.iter().chain(&synthetic).chain(&test) {
            s.validate(n_classes)?;
        }
        let real_counts = data::class_counts(&real, n_classes)?;
        Ok(Self {
            real,
            synthetic,
            test,
            real_counts,
        })
    }

    /// Training set: reals followed by synthetics when enabled.
    pub fn train(&self, use_synthetic: bool) -> Vec<Sample> {
        let mut out = self.real.clone();
        if use_synthetic {
            out.extend(self.synthetic.iter().cloned());
        }
        out
    }
}

/// Long-tailed real split and balanced test set drawn from the configured
/// class model.
pub fn build_real(cfg: &TrainConfig) -> Result<(ClassModel, Vec<Sample>, Vec<Sample>)> {
    cfg.validate()?;
    let model = cfg.gen.resolve()?;
    let pool = model.real_samples(cfg.lt.n0, 0, cfg.gen.seed, Purpose::RealSamples);
    let counts = data::long_tailed_counts(&cfg.lt);
    let real = data::build_lt_split(&pool, &counts, cfg.lt.seed)?;
    let test = model.real_samples(cfg.test_per_class, test_first_id(cfg), cfg.gen.seed, Purpose::TestSamples);
    Ok((model, real, test))
}

fn test_first_id(cfg: &TrainConfig) -> u64 {
    (cfg.lt.n_classes * cfg.lt.n0) as u64
}

/// First id handed to synthetic samples, past every real and test id.
pub fn synthetic_first_id(cfg: &TrainConfig) -> u64 {
    test_first_id(cfg) + (cfg.lt.n_classes * cfg.test_per_class) as u64
}

/// Synthetic samples bringing every class of `real_counts` up to the
/// balance target.
pub fn build_synthetic(cfg: &TrainConfig, model: &ClassModel, real_counts: &[usize], first_id: u64) -> Result<Vec<Sample>> {
    let needed = data::complement_counts(real_counts, cfg.balance_target())?;
    syngen::complement_dataset(model, &cfg.gen, &needed, first_id, cfg.max_gen_attempts)
}

/// Real split, synthetic complement and test set, all in memory.
pub fn prepare_dataset(cfg: &TrainConfig) -> Result<Dataset> {
    let (model, real, test) = build_real(cfg)?;
    let counts = data::class_counts(&real, cfg.lt.n_classes)?;
    let synthetic = build_synthetic(cfg, &model, &counts, synthetic_first_id(cfg))?;
    Ok(Dataset {
        real,
        synthetic,
        test,
        real_counts: counts,
    })
}

/// Balanced top-1 and its per-group breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub overall: f64,
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
    pub per_class: Vec<f64>,
}

/// Classifier-head accuracy: per-class top-1 averaged over classes, and over
/// the classes of each group (grouped by real training count).
pub fn evaluate(state: &ModelState, test: &[Sample], real_counts: &[usize], thresholds: &Thresholds) -> Result<Accuracy> {
    if test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let x = Matrix::from_tensors(test.iter().map(|s| &s.features))?;
    let pred = state.predict(&x)?;
    let labels: Vec<usize> = test.iter().map(|s| s.label).collect();
    Ok(accuracy_from_predictions(&pred, &labels, real_counts, thresholds))
}

pub fn accuracy_from_predictions(pred: &[usize], labels: &[usize], real_counts: &[usize], thresholds: &Thresholds) -> Accuracy {
    let n = real_counts.len();
    let mut hit = vec![0usize; n];
    let mut seen = vec![0usize; n];
    for (&p, &y) in pred.iter().zip(labels) {
        seen[y] += 1;
        hit[y] += usize::from(p == y);
    }
    let per_class: Vec<f64> = (0..n)
        .map(|c| if seen[c] == 0 { 0.0 } else { hit[c] as f64 / seen[c] as f64 })
        .collect();
    let present: Vec<usize> = (0..n).filter(|&c| seen[c] > 0).collect();
    let mean = |classes: Vec<usize>| -> Option<f64> {
        (!classes.is_empty()).then(|| classes.iter().map(|&c| per_class[c]).sum::<f64>() / classes.len() as f64)
    };
    let in_group = |g: Group| present.iter().copied().filter(|&c| thresholds.group(real_counts[c]) == g).collect();
    Accuracy {
        overall: mean(present.clone()).unwrap_or(0.0),
        many: mean(in_group(Group::Many)),
        medium: mean(in_group(Group::Medium)),
        few: mean(in_group(Group::Few)),
        per_class,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub lr: f64,
    pub loss_mixup: f64,
    pub loss_cutmix: f64,
    pub loss_sc: f64,
    pub noise_count: usize,
    pub test_top1: f64,
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FitOutput {
    pub model: ModelState,
    pub reports: Vec<EpochReport>,
    /// Fingerprint of every batch order and mixing draw consumed.
    pub pipeline_hash: u64,
}

/// Builds the dataset and trains on it.
pub fn fit(cfg: &TrainConfig) -> Result<FitOutput> {
    let ds = prepare_dataset(cfg)?;
    fit_on(cfg, &ds, |_| {})
}

/// Trains on a prepared dataset; `on_epoch` sees each report as it lands.
pub fn fit_on(cfg: &TrainConfig, ds: &Dataset, mut on_epoch: impl FnMut(&EpochReport)) -> Result<FitOutput> {
    cfg.validate()?;
    let mut state = ModelState::init(&cfg.arch, cfg.seed)?;
    let train = ds.train(cfg.use_synthetic);
    let batch_size = cfg.batch_size.min(train.len());
    let needs_protos = cfg.weights.contrastive != 0.0;
    let mut reports = Vec::with_capacity(cfg.epochs);
    let mut pipeline = DefaultHasher::new();
    for epoch in 0..cfg.epochs {
        let e = epoch as u64;
        state.epoch = e;
        let lr = cosine_lr(epoch, cfg.optim.total_epochs.max(cfg.epochs), cfg.optim.lr0);
        let protos = if needs_protos {
            refresh_prototypes(&state, &ds.real, cfg.seed, e)?
        } else {
            empty_prototypes(&cfg.arch)
        };
        let pairs = make_batch_pairs(&train, batch_size, e, cfg.seed)?;
        let steps = pairs.steps() as f64;
        let mut sums = StepLosses::default();
        let mut noise = 0;
        for (s, pair) in pairs.enumerate() {
            let like = &pair.batch1[0].views.v1;
            batch_hash(&pair, &StepDraws::sample(cfg, like, e, s as u64)?).hash(&mut pipeline);
            let l = train_step(&mut state, &pair, &protos, cfg, e, s as u64, lr)?;
            sums.mixup += l.mixup;
            sums.cutmix += l.cutmix;
            sums.sc += l.sc;
            noise += l.noise_count;
        }
        let acc = evaluate(&state, &ds.test, &ds.real_counts, &cfg.thresholds)?;
        let report = EpochReport {
            epoch,
            lr,
            loss_mixup: sums.mixup / steps,
            loss_cutmix: sums.cutmix / steps,
            loss_sc: sums.sc / steps,
            noise_count: noise,
            test_top1: acc.overall,
            many: acc.many,
            medium: acc.medium,
            few: acc.few,
        };
        on_epoch(&report);
        reports.push(report);
    }
    state.epoch = cfg.epochs as u64;
    Ok(FitOutput {
        model: state,
        reports,
        pipeline_hash: pipeline.finish(),
    })
}

fn empty_prototypes(arch: &ArchConfig) -> Prototypes {
    let set = crate::contrastive::PrototypeSet {
        rows: Matrix::zeros(arch.n_classes, arch.projection_dim),
        valid: vec![false; arch.n_classes],
    };
    Prototypes {
        view2: set.clone(),
        view3: set,
        bank2: Matrix::zeros(0, arch.projection_dim),
        bank3: Matrix::zeros(0, arch.projection_dim),
        bank_labels: Vec::new(),
    }
}
