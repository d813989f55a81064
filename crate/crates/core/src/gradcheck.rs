//! Central finite-difference checks of every analytic gradient.
//!
//! Contrastive losses are checked with respect to the un-normalised rows `U`
//! (`z = U / |U|`), the mixed cross-entropy with respect to logits, and the
//! composite step objective with respect to every model parameter with the
//! neighbour-vote labels frozen.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::contrastive::{contrast_value_and_grad, ContrastRule, LossVariant};
use crate::data::{make_batch_pairs, Sample};
use crate::error::{Error, Result};
use crate::mixer::{batch_mixed_ce, SoftTarget};
use crate::model::{self, ArchConfig, ModelState, Tape};
use crate::rng::{self, Purpose};
use crate::syngen::MeansSpec;
use crate::tensor::{Matrix, Tensor};
use crate::trainer::{build_objective, refresh_prototypes, StepDraws, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub instances: usize,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 20,
            step: 1e-4,
            tolerance: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub name: &'static str,
    pub instances: usize,
    pub coordinates: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Largest relative error between `analytic` and central differences of `f`
/// around `x`.
pub fn compare(x: &Matrix, analytic: &Matrix, step: f64, mut f: impl FnMut(&Matrix) -> Result<f64>) -> Result<f64> {
    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.data().len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        worst = worst.max(rel_err(analytic.data()[i], (up - down) / (2.0 * step)));
    }
    Ok(worst)
}

fn normal_matrix<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Matrix::new(rows, cols, data).expect("sized")
}

fn normalize(u: &Matrix) -> Matrix {
    let mut z = u.clone();
    for r in 0..z.rows() {
        let row = z.row_mut(r);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    z
}

/// A contrastive batch: two views per sample plus two prototype rows per
/// class. `noisy` marks some samples with per-sample negative labels.
struct ContrastInstance {
    u: Matrix,
    labels: Vec<i64>,
    tau: f64,
}

fn contrast_instance<R: Rng>(rng: &mut R, noisy: bool) -> ContrastInstance {
    let n = rng.random_range(2..=4);
    let classes = rng.random_range(2..=3);
    let d = rng.random_range(2..=16);
    let mut per_sample: Vec<i64> = (0..n).map(|_| rng.random_range(0..classes) as i64).collect();
    if noisy {
        for (i, y) in per_sample.iter_mut().enumerate() {
            if rng.random_bool(0.4) {
                *y = -(i as i64) - 1;
            }
        }
    }
    let protos = (0..classes as i64).chain(0..classes as i64);
    let labels: Vec<i64> = per_sample.iter().chain(&per_sample).copied().chain(protos).collect();
    ContrastInstance {
        u: normal_matrix(labels.len(), d, rng),
        labels,
        tau: rng.random_range(0.1..1.0),
    }
}

fn check_contrast(name: &'static str, variant: Option<LossVariant>, cfg: &GradcheckConfig) -> Result<CheckReport> {
    let mut worst: f64 = 0.0;
    let mut coordinates = 0;
    for inst in 0..cfg.instances {
        let mut rng = rng::stream(cfg.seed, Purpose::GradCheck, inst as u64, variant.map_or(0, |v| v as u64 + 1), 0);
        let c = contrast_instance(&mut rng, variant.is_some());
        let rule = match variant {
            Some(v) => ContrastRule::for_variant(v, &c.labels),
            None => ContrastRule::supcon(c.labels.len()),
        };
        let mut tape = Tape::new();
        let u = tape.param(0, c.u.clone())?;
        let z = tape.l2_rows(u)?;
        let (value, g) = contrast_value_and_grad(tape.value(z), &c.labels, &rule, c.tau)?;
        let loss = tape.scalar_loss(name, z, value, g)?;
        let analytic = tape.backward(loss)?.get(0).cloned().unwrap_or_else(|| Matrix::zeros(c.u.rows(), c.u.cols()));
        let err = compare(&c.u, &analytic, cfg.step, |p| {
            Ok(contrast_value_and_grad(&normalize(p), &c.labels, &rule, c.tau)?.0)
        })?;
        worst = worst.max(err);
        coordinates += c.u.data().len();
    }
    Ok(report(name, cfg, coordinates, worst))
}

fn check_mixed_ce(cfg: &GradcheckConfig) -> Result<CheckReport> {
    let mut worst: f64 = 0.0;
    let mut coordinates = 0;
    for inst in 0..cfg.instances {
        let mut rng = rng::stream(cfg.seed, Purpose::GradCheck, inst as u64, 10, 0);
        let b = rng.random_range(1..=8);
        let c = rng.random_range(2..=16);
        let logits = normal_matrix(b, c, &mut rng).scale(2.0);
        let targets: Vec<SoftTarget> = (0..b)
            .map(|_| SoftTarget {
                y_i: rng.random_range(0..c),
                y_j: rng.random_range(0..c),
                lam: rng.random(),
            })
            .collect();
        let (_, g) = batch_mixed_ce(&logits, &targets)?;
        worst = worst.max(compare(&logits, &g, cfg.step, |p| Ok(batch_mixed_ce(p, &targets)?.0))?);
        coordinates += logits.data().len();
    }
    Ok(report("mixed_ce", cfg, coordinates, worst))
}

/// Small end-to-end setting: three classes, a mix of real and synthetic
/// samples, every loss term switched on.
fn composite_config(variant: LossVariant, seed: u64, dim: usize) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.seed = seed;
    c.lt.n_classes = 3;
    c.gen.n_classes = 3;
    c.gen.means = MeansSpec::Sphere { dim, radius: 2.0 };
    c.arch = ArchConfig {
        input_shape: vec![dim],
        conv_channels: Vec::new(),
        encoder_hidden: vec![5],
        projection_hidden: vec![4],
        projection_dim: 3,
        projection_norm: true,
        n_classes: 3,
    };
    c.variant = variant;
    c.k = 3;
    c.tau = 0.5;
    c.weights.plain_ce = 0.5;
    c
}

fn composite_batch<R: Rng>(rng: &mut R, dim: usize) -> Vec<Sample> {
    let n = rng.random_range(6..=8);
    (0..n)
        .map(|i| {
            let label = i % 3;
            let features = Tensor::from_vec((0..dim).map(|_| StandardNormal.sample(rng)).collect());
            Sample {
                id: i as u64,
                label,
                // first three are real so every class has a prototype
                is_synthetic: i >= 3 && rng.random_bool(0.5),
                quality: 1.0,
                features,
            }
        })
        .collect()
}

/// Relative error of the composite objective gradient on one instance, or
/// `None` when a rectifier input sits too close to its kink.
fn composite_instance(cfg: &GradcheckConfig, inst: u64, attempt: u64) -> Result<Option<(f64, usize)>> {
    let mut rng = rng::stream(cfg.seed, Purpose::GradCheck, inst, 20, attempt);
    let variant = LossVariant::ALL[rng.random_range(0..3)];
    let dim = rng.random_range(2..=6);
    let tc = composite_config(variant, cfg.seed ^ inst, dim);
    let samples = composite_batch(&mut rng, dim);
    let reals: Vec<Sample> = samples.iter().filter(|s| !s.is_synthetic).cloned().collect();
    let state = ModelState::init(&tc.arch, rng.random())?;
    let pair = make_batch_pairs(&samples, samples.len(), 0, tc.seed)?.next().ok_or(Error::Empty("batch"))?;
    // a row whose projection is all zeros has no direction; redraw
    let protos = match refresh_prototypes(&state, &reals, tc.seed, 0) {
        Err(Error::DegenerateEmbedding { .. }) => return Ok(None),
        other => other?,
    };
    let draws = StepDraws::sample(&tc, &pair.batch1[0].views.v1, 0, 0)?;
    let obj = match build_objective(&state, &pair, &protos, &draws, &tc, None) {
        Err(Error::DegenerateEmbedding { .. }) => return Ok(None),
        other => other?,
    };
    if obj.tape.relu_margin() < 1e-3 {
        return Ok(None);
    }
    let labels = obj.labels.clone();
    let grads = model::grad(&state, &obj.tape, obj.total)?;
    let mut worst: f64 = 0.0;
    let mut coordinates = 0;
    let mut probe = state.clone();
    for (idx, g) in grads.iter().enumerate() {
        let base = state.params()[idx].clone();
        let err = compare(&base, g, cfg.step, |p| {
            *probe.param_mut(idx) = p.clone();
            let o = build_objective(&probe, &pair, &protos, &draws, &tc, Some(&labels))?;
            Ok(o.losses.total)
        })?;
        *probe.param_mut(idx) = base;
        worst = worst.max(err);
        coordinates += g.data().len();
    }
    Ok(Some((worst, coordinates)))
}

fn check_composite(cfg: &GradcheckConfig) -> Result<CheckReport> {
    let mut worst: f64 = 0.0;
    let mut coordinates = 0;
    for inst in 0..cfg.instances as u64 {
        let mut done = false;
        for attempt in 0..50 {
            if let Some((e, n)) = composite_instance(cfg, inst, attempt)? {
                worst = worst.max(e);
                coordinates += n;
                done = true;
                break;
            }
        }
        if !done {
            return Err(Error::InvalidConfig(format!("instance {inst}: no kink-free draw in 50 attempts")));
        }
    }
    Ok(report("composite", cfg, coordinates, worst))
}

/// A loss that ignores the parameters: its gradient must be exactly zero.
fn check_constant(cfg: &GradcheckConfig) -> Result<CheckReport> {
    let state = ModelState::init(&ArchConfig::vector(4, 3), cfg.seed)?;
    let mut tape = Tape::new();
    state.bind(&mut tape)?;
    let c = tape.constant(Matrix::scalar(1.5))?;
    let loss = tape.weighted_sum(&[(c, 2.0)])?;
    let grads = model::grad(&state, &tape, loss)?;
    let worst = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let coordinates = grads.iter().map(|g| g.data().len()).sum();
    Ok(CheckReport {
        name: "constant",
        instances: 1,
        coordinates,
        max_rel_err: worst,
        passed: worst == 0.0,
    })
}

fn report(name: &'static str, cfg: &GradcheckConfig, coordinates: usize, worst: f64) -> CheckReport {
    CheckReport {
        name,
        instances: cfg.instances,
        coordinates,
        max_rel_err: worst,
        passed: worst < cfg.tolerance,
    }
}

/// Runs every check once, in a fixed order.
pub fn run_suite(cfg: &GradcheckConfig) -> Result<Vec<CheckReport>> {
    Ok(vec![
        check_mixed_ce(cfg)?,
        check_contrast("supcon", None, cfg)?,
        check_contrast("l1", Some(LossVariant::L1), cfg)?,
        check_contrast("l2", Some(LossVariant::L2), cfg)?,
        check_contrast("l3", Some(LossVariant::L3), cfg)?,
        check_composite(cfg)?,
        check_constant(cfg)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_err_floor() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert!((rel_err(1e-9, 0.0) - 1e-3).abs() < 1e-15);
        assert!((rel_err(2.0, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn compare_on_quadratic() {
        let x = Matrix::new(1, 3, vec![0.5, -1.0, 2.0]).unwrap();
        let g = x.scale(2.0);
        let e = compare(&x, &g, 1e-4, |p| Ok(p.frobenius_sq())).unwrap();
        assert!(e < 1e-8);
    }

    #[test]
    fn small_suite_passes() {
        let cfg = GradcheckConfig { instances: 3, ..Default::default() };
        let reports = run_suite(&cfg).unwrap();
        let names: Vec<_> = reports.iter().map(|r| r.name).collect();
        assert_eq!(names, ["mixed_ce", "supcon", "l1", "l2", "l3", "composite", "constant"]);
        for r in reports {
            assert!(r.passed, "{r:?}");
        }
    }
}
