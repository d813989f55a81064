//! Procedural stand-in for a text-to-image generator.
//!
//! Every class is an isotropic Gaussian around a class mean. Synthetic
//! samples follow the same law except for a `noise_rate` fraction of
//! low-quality generations: half are drawn from a different class (still
//! labelled with the requested class), half from a widened distribution.
//! Quality is the posterior probability of the labelled class under the
//! equal-prior class mixture, which plays the role of a text-image relevance
//! score.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{self, Sample};
use crate::error::{Error, Result};
use crate::rng::{self, Purpose};
use crate::tensor::Tensor;

/// Spread multiplier for widened low-quality draws.
pub const WIDEN_FACTOR: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MeansSpec {
    Explicit { means: Vec<Vec<f64>> },
    /// Means drawn uniformly on a sphere of `radius` in `dim` dimensions.
    Sphere { dim: usize, radius: f64 },
    /// Separable cosine patterns on `(channels, height, width)` images.
    Patterns {
        channels: usize,
        height: usize,
        width: usize,
        amplitude: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenSpec {
    pub n_classes: usize,
    pub means: MeansSpec,
    pub spread: f64,
    pub noise_rate: f64,
    pub quality_threshold: f64,
    pub seed: u64,
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 {
            return Err(Error::InvalidConfig("n_classes must be positive".into()));
        }
        if !(self.spread > 0.0) || !self.spread.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "spread must be positive, got {}",
                self.spread
            )));
        }
        for (name, v) in [
            ("noise_rate", self.noise_rate),
            ("quality_threshold", self.quality_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("{name} {v} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Materialises the class means.
    pub fn resolve(&self) -> Result<ClassModel> {
        self.validate()?;
        let mut rng = rng::stream(self.seed, Purpose::ClassMeans, 0, 0, 0);
        let (shape, means) = match &self.means {
            MeansSpec::Explicit { means } => {
                if means.len() != self.n_classes {
                    return Err(Error::InvalidConfig(format!(
                        "{} explicit means for {} classes",
                        means.len(),
                        self.n_classes
                    )));
                }
                let dim = means.first().map_or(0, Vec::len);
                if dim == 0 || means.iter().any(|m| m.len() != dim) {
                    return Err(Error::InvalidConfig("ragged or empty class means".into()));
                }
                (vec![dim], means.clone())
            }
            MeansSpec::Sphere { dim, radius } => {
                if *dim == 0 {
                    return Err(Error::InvalidConfig("dim must be positive".into()));
                }
                let means = (0..self.n_classes)
                    .map(|_| {
                        let v: Vec<f64> =
                            (0..*dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                        v.into_iter().map(|x| x * radius / n).collect()
                    })
                    .collect();
                (vec![*dim], means)
            }
            MeansSpec::Patterns {
                channels,
                height,
                width,
                amplitude,
            } => {
                let (c, h, w) = (*channels, *height, *width);
                if c == 0 || h == 0 || w == 0 {
                    return Err(Error::InvalidConfig("image dims must be positive".into()));
                }
                let freqs: Vec<(usize, usize)> = (0..4)
                    .flat_map(|fy| (0..4).map(move |fx| (fx, fy)))
                    .filter(|&f| f != (0, 0))
                    .collect();
                let means = (0..self.n_classes)
                    .map(|class| {
                        let (fx, fy) = freqs[class % freqs.len()];
                        let gains: Vec<f64> =
                            (0..c).map(|_| rng.random_range(-1.0..=1.0)).collect();
                        let mut m = Vec::with_capacity(c * h * w);
                        for gain in &gains {
                            for y in 0..h {
                                for x in 0..w {
                                    // symmetric in x, so horizontal flips keep the class
                                    let px = (std::f64::consts::TAU * fx as f64 * (x as f64 + 0.5)
                                        / w as f64)
                                        .cos();
                                    let py = (std::f64::consts::TAU * fy as f64 * (y as f64 + 0.5)
                                        / h as f64)
                                        .cos();
                                    m.push(amplitude * (0.5 + 0.5 * gain) * px * py);
                                }
                            }
                        }
                        m
                    })
                    .collect();
                (vec![c, h, w], means)
            }
        };
        Ok(ClassModel {
            shape,
            means,
            spread: self.spread,
        })
    }
}

/// Resolved class-conditional distributions shared by real and synthetic
/// data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassModel {
    pub shape: Vec<usize>,
    pub means: Vec<Vec<f64>>,
    pub spread: f64,
}

impl ClassModel {
    pub fn n_classes(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn draw<R: Rng + ?Sized>(&self, class: usize, spread: f64, rng: &mut R) -> Tensor {
        let data = self.means[class]
            .iter()
            .map(|&m| {
                let n: f64 = StandardNormal.sample(rng);
                (m + spread * n) as f32
            })
            .collect();
        Tensor::new(self.shape.clone(), data).expect("mean matches shape")
    }

    /// Posterior of `class` given `x` under equal priors, in `[0, 1]`.
    pub fn quality(&self, x: &Tensor, class: usize) -> f64 {
        let scale = 2.0 * self.spread * self.spread;
        let logits: Vec<f64> = self
            .means
            .iter()
            .map(|m| {
                let d2: f64 = m
                    .iter()
                    .zip(x.data())
                    .map(|(a, &b)| (a - f64::from(b)).powi(2))
                    .sum();
                -d2 / scale
            })
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        ((logits[class] - max).exp() / total).clamp(0.0, 1.0)
    }

    /// Smallest distance between two class means in units of the typical
    /// within-class radius `spread * sqrt(dim)`.
    ///
    /// At ratio 4 or more, two draws of different classes are essentially
    /// never closer than two draws of the same class, so the classes count
    /// as separated.
    pub fn separation_ratio(&self) -> f64 {
        let mut min = f64::INFINITY;
        for (i, a) in self.means.iter().enumerate() {
            for b in &self.means[i + 1..] {
                let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                min = min.min(d.sqrt());
            }
        }
        min / (self.spread * (self.dim() as f64).sqrt())
    }

    /// `per_class` clean real samples of every class, ids from `first_id`.
    pub fn real_samples(&self, per_class: usize, first_id: u64, seed: u64, purpose: Purpose) -> Vec<Sample> {
        let mut out = Vec::with_capacity(per_class * self.n_classes());
        let mut id = first_id;
        for class in 0..self.n_classes() {
            let mut rng = rng::stream(seed, purpose, 0, 0, class as u64);
            for _ in 0..per_class {
                out.push(Sample::real(id, class, self.draw(class, self.spread, &mut rng)));
                id += 1;
            }
        }
        out
    }
}

/// Draws `count` synthetic samples labelled `class_id`.
pub fn generate_class_samples<R: Rng + ?Sized>(
    model: &ClassModel,
    noise_rate: f64,
    class_id: usize,
    count: usize,
    first_id: u64,
    rng: &mut R,
) -> Vec<Sample> {
    let n = model.n_classes();
    (0..count)
        .map(|i| {
            let features = if rng.random_bool(noise_rate) {
                if n > 1 && rng.random_bool(0.5) {
                    let other = (class_id + rng.random_range(1..n)) % n;
                    model.draw(other, model.spread, rng)
                } else {
                    model.draw(class_id, model.spread * WIDEN_FACTOR, rng)
                }
            } else {
                model.draw(class_id, model.spread, rng)
            };
            Sample {
                id: first_id + i as u64,
                label: class_id,
                is_synthetic: true,
                quality: model.quality(&features, class_id),
                features,
            }
        })
        .collect()
}

/// Keeps the samples whose quality reaches `threshold`, in order.
pub fn filter_by_quality(samples: Vec<Sample>, threshold: f64) -> Vec<Sample> {
    samples.into_iter().filter(|s| s.quality >= threshold).collect()
}

/// Loads externally generated samples from a manifest and its blob.
pub fn load_external(manifest: &Path) -> Result<Vec<Sample>> {
    data::io::read_dataset(manifest)
}

/// Generate-and-filter until every class reaches its requested count.
///
/// Each attempt draws the outstanding count; after `max_attempts` rounds an
/// unmet class is an error.
pub fn complement_dataset(
    model: &ClassModel,
    spec: &GenSpec,
    needed: &[usize],
    first_id: u64,
    max_attempts: usize,
) -> Result<Vec<Sample>> {
    let mut out = Vec::with_capacity(needed.iter().sum());
    let mut next_id = first_id;
    for (class, &wanted) in needed.iter().enumerate() {
        let mut accepted = Vec::with_capacity(wanted);
        let mut attempts = 0;
        while accepted.len() < wanted {
            if attempts == max_attempts {
                return Err(Error::UnmeetableTarget {
                    class,
                    wanted,
                    accepted: accepted.len(),
                    attempts,
                });
            }
            let missing = wanted - accepted.len();
            let mut rng = rng::stream(spec.seed, Purpose::Synthetic, attempts as u64, 0, class as u64);
            let batch = generate_class_samples(model, spec.noise_rate, class, missing, next_id, &mut rng);
            next_id += missing as u64;
            accepted.extend(filter_by_quality(batch, spec.quality_threshold));
            attempts += 1;
        }
        // ids stay unique even though rejected draws consumed some
        out.extend(accepted);
    }
    Ok(out)
}
