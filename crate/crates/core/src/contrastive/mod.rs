//! Synthetic-aware branch: supervised contrastive losses with noise handling,
//! nearest-neighbour label correction and class prototypes.
//!
//! All four losses share one form. For every anchor `i`,
//!
//! ```text
//! l_i = -1/|P(i)| * sum_{j in P(i)} [ z_i.z_j / tau - log sum_{k in D(i)} exp(z_i.z_k / tau) ]
//! ```
//!
//! and the loss is the sum of `l_i` over anchors. The variants differ only in
//! which rows may be anchors, positives (`P`) and denominator terms (`D`).
//! Noise is marked by a negative label.

pub mod knn;
pub mod prototypes;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixer::log_sum_exp;
use crate::tensor::{dot, Matrix};

pub use knn::{knn_correct, relabel, CorrectionResult};
pub use prototypes::{compute_prototypes, PrototypeSet};

/// Contrastive batch: unit rows with (possibly noise) labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub z: Matrix,
    pub labels: Vec<i64>,
    pub is_synthetic: Vec<bool>,
    pub is_prototype: Vec<bool>,
    pub tau: f64,
}

impl Embeddings {
    pub fn new(z: Matrix, labels: Vec<i64>, tau: f64) -> Result<Self> {
        let n = z.rows();
        let e = Self {
            z,
            labels,
            is_synthetic: vec![false; n],
            is_prototype: vec![false; n],
            tau,
        };
        e.validate()?;
        Ok(e)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.z.rows();
        if self.labels.len() != n || self.is_synthetic.len() != n || self.is_prototype.len() != n {
            return Err(Error::ShapeMismatch {
                left: vec![n],
                right: vec![self.labels.len(), self.is_synthetic.len(), self.is_prototype.len()],
            });
        }
        if !(self.tau > 0.0) {
            return Err(Error::InvalidConfig(format!("temperature must be positive, got {}", self.tau)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.z.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.z.rows() == 0
    }

    pub fn noise_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l < 0).count()
    }

    /// Appends the valid rows of `protos` as real, labelled prototype rows.
    pub fn with_prototypes(mut self, protos: &PrototypeSet) -> Result<Self> {
        let (rows, labels) = protos.valid_rows();
        self.z = Matrix::vstack(&[&self.z, &rows])?;
        self.is_synthetic.extend(std::iter::repeat_n(false, labels.len()));
        self.is_prototype.extend(std::iter::repeat_n(true, labels.len()));
        self.labels.extend(labels);
        Ok(self)
    }
}

/// How detected noise enters the contrastive loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossVariant {
    /// Noise is removed entirely.
    L1,
    /// Noise rows form singleton classes, positive only with their other view.
    L2,
    /// Noise rows stay as negatives only.
    L3,
}

impl LossVariant {
    pub const ALL: [LossVariant; 3] = [LossVariant::L1, LossVariant::L2, LossVariant::L3];
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossVariant::L1 => "l1",
            LossVariant::L2 => "l2",
            LossVariant::L3 => "l3",
        })
    }
}

impl FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(LossVariant::L1),
            "l2" => Ok(LossVariant::L2),
            "l3" => Ok(LossVariant::L3),
            other => Err(Error::UnknownVariant(other.to_string())),
        }
    }
}

/// Membership masks selecting anchors, positive candidates and denominator
/// candidates. Positives of `i` are the positive candidates `j != i` with
/// `labels[j] == labels[i]`; the denominator of `i` is every denominator
/// candidate `k != i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastRule {
    pub anchor: Vec<bool>,
    pub positive: Vec<bool>,
    pub denominator: Vec<bool>,
}

impl ContrastRule {
    pub fn supcon(n: usize) -> Self {
        Self {
            anchor: vec![true; n],
            positive: vec![true; n],
            denominator: vec![true; n],
        }
    }

    pub fn for_variant(variant: LossVariant, labels: &[i64]) -> Self {
        let clean: Vec<bool> = labels.iter().map(|&l| l >= 0).collect();
        let all = vec![true; labels.len()];
        match variant {
            LossVariant::L1 => Self {
                anchor: clean.clone(),
                positive: clean.clone(),
                denominator: clean,
            },
            LossVariant::L2 => Self::supcon(labels.len()),
            LossVariant::L3 => Self {
                anchor: clean.clone(),
                positive: clean,
                denominator: all,
            },
        }
    }
}

/// Loss value and `d loss / d z` for the shared contrastive form.
pub fn contrast_value_and_grad(z: &Matrix, labels: &[i64], rule: &ContrastRule, tau: f64) -> Result<(f64, Matrix)> {
    let n = z.rows();
    let sim = z.matmul_t(z)?;
    let mut coef = Matrix::zeros(n, n);
    let mut total = 0.0;
    let mut logits = Vec::with_capacity(n);
    let mut members = Vec::with_capacity(n);
    for i in 0..n {
        if !rule.anchor[i] {
            continue;
        }
        let positives: Vec<usize> = (0..n)
            .filter(|&j| j != i && rule.positive[j] && labels[j] == labels[i])
            .collect();
        if positives.is_empty() {
            return Err(Error::EmptyPositives { anchor: i });
        }
        logits.clear();
        members.clear();
        for k in (0..n).filter(|&k| k != i && rule.denominator[k]) {
            members.push(k);
            logits.push(sim.get(i, k) / tau);
        }
        let lse = log_sum_exp(&logits);
        let inv_p = 1.0 / positives.len() as f64;
        let mut term = 0.0;
        for &j in &positives {
            term += sim.get(i, j) / tau - lse;
        }
        total -= inv_p * term;
        // d l_i / d s_ik = (softmax_ik [k in D] - [k in P] / |P|) / tau
        for (&k, &lg) in members.iter().zip(logits.iter()) {
            let v = coef.get(i, k) + (lg - lse).exp() / tau;
            coef.set(i, k, v);
        }
        for &j in &positives {
            let v = coef.get(i, j) - inv_p / tau;
            coef.set(i, j, v);
        }
    }
    // s_ik = z_i . z_k, so dz_i += c_ik z_k and dz_k += c_ik z_i
    let sym = {
        let mut s = coef.clone();
        s.add_assign(&coef.transpose());
        s
    };
    let grad = sym.matmul(z)?;
    Ok((total, grad))
}

fn contrast_value(emb: &Embeddings, rule: &ContrastRule) -> Result<f64> {
    emb.validate()?;
    Ok(contrast_value_and_grad(&emb.z, &emb.labels, rule, emb.tau)?.0)
}

/// Supervised contrastive loss over every row, labels taken literally.
pub fn supcon_loss(emb: &Embeddings) -> Result<f64> {
    contrast_value(emb, &ContrastRule::supcon(emb.len()))
}

/// Noise rows removed from anchors, positives and denominators.
pub fn loss_l1(emb: &Embeddings) -> Result<f64> {
    contrast_value(emb, &ContrastRule::for_variant(LossVariant::L1, &emb.labels))
}

/// Noise rows kept, each noise label its own class.
pub fn loss_l2(emb: &Embeddings) -> Result<f64> {
    contrast_value(emb, &ContrastRule::for_variant(LossVariant::L2, &emb.labels))
}

/// Noise rows kept as negatives only.
pub fn loss_l3(emb: &Embeddings) -> Result<f64> {
    contrast_value(emb, &ContrastRule::for_variant(LossVariant::L3, &emb.labels))
}

pub fn variant_loss(variant: LossVariant, emb: &Embeddings) -> Result<f64> {
    match variant {
        LossVariant::L1 => loss_l1(emb),
        LossVariant::L2 => loss_l2(emb),
        LossVariant::L3 => loss_l3(emb),
    }
}

/// Weights of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub mixup: f64,
    pub cutmix: f64,
    pub contrastive: f64,
    /// Plain cross-entropy on un-mixed classification views; only baselines
    /// set this.
    #[serde(default)]
    pub plain_ce: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mixup: 1.0,
            cutmix: 1.0,
            contrastive: 1.0,
            plain_ce: 0.0,
        }
    }
}

/// `w_mixup * l_mixup + w_cutmix * l_cutmix + w_sc * l_sc`.
pub fn overall_loss(l_mixup: f64, l_cutmix: f64, l_sc: f64, weights: &LossWeights) -> f64 {
    weights.mixup * l_mixup + weights.cutmix * l_cutmix + weights.contrastive * l_sc
}

/// Sum of `z_i . z_j` used by tests and diagnostics.
pub fn similarity(z: &Matrix, i: usize, j: usize) -> f64 {
    dot(z.row(i), z.row(j))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(rows: &[&[f64]], labels: &[i64], tau: f64) -> Embeddings {
        let z = Matrix::from_rows(rows[0].len(), rows.iter().copied()).unwrap();
        Embeddings::new(z, labels.to_vec(), tau).unwrap()
    }

    #[test]
    fn supcon_two_pairs_hand_value() {
        // anchor 0: positive 1 (sim 1), negatives 2, 3 (sim 0):
        // -log(e / (e + 2)), identical for all four anchors
        let emb = e(&[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], &[0.0, 1.0]], &[0, 0, 1, 1], 1.0);
        let expected = 4.0 * ((std::f64::consts::E + 2.0) / std::f64::consts::E).ln();
        let got = supcon_loss(&emb).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 2.2055).abs() < 5e-4);
    }

    #[test]
    fn empty_positive_set_errors() {
        let emb = e(&[&[1.0, 0.0], &[0.0, 1.0], &[0.0, 1.0]], &[0, 1, 1], 0.5);
        assert!(matches!(supcon_loss(&emb), Err(Error::EmptyPositives { anchor: 0 })));
    }

    #[test]
    fn variants_reduce_without_noise() {
        let emb = e(&[&[1.0, 0.0], &[0.6, 0.8], &[0.0, 1.0], &[-0.6, 0.8]], &[0, 0, 1, 1], 0.3);
        let base = supcon_loss(&emb).unwrap();
        for v in LossVariant::ALL {
            assert!((variant_loss(v, &emb).unwrap() - base).abs() < 1e-12);
        }
    }

    #[test]
    fn noise_as_negative_increases_loss() {
        let clean = e(&[&[1.0, 0.0], &[0.6, 0.8], &[0.0, 1.0], &[-0.6, 0.8], &[0.8, 0.6]], &[0, 0, 1, 1, -1], 0.5);
        assert!(loss_l3(&clean).unwrap() > loss_l1(&clean).unwrap());
    }

    #[test]
    fn variant_parse_round_trip() {
        for v in LossVariant::ALL {
            assert_eq!(v.to_string().parse::<LossVariant>().unwrap(), v);
        }
        assert!("l4".parse::<LossVariant>().is_err());
    }

    #[test]
    fn overall_examples() {
        let w = |a, b, c| LossWeights { mixup: a, cutmix: b, contrastive: c, plain_ce: 0.0 };
        assert_eq!(overall_loss(0.5, 0.25, 2.0, &w(1.0, 0.0, 0.0)), 0.5);
        assert_eq!(overall_loss(0.5, 0.25, 2.0, &w(0.0, 0.0, 0.0)), 0.0);
        assert_eq!(overall_loss(0.5, 0.25, 2.0, &w(1.0, 1.0, 1.0)), 2.75);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let z = Matrix::new(4, 2, vec![1.0, 0.1, 0.3, 0.9, -0.5, 0.5, 0.7, -0.2]).unwrap();
        let labels = [0, 0, 1, 1];
        let rule = ContrastRule::supcon(4);
        let (_, g) = contrast_value_and_grad(&z, &labels, &rule, 0.4).unwrap();
        let h = 1e-6;
        for idx in 0..z.data().len() {
            let mut p = z.clone();
            p.data_mut()[idx] += h;
            let mut m = z.clone();
            m.data_mut()[idx] -= h;
            let fp = contrast_value_and_grad(&p, &labels, &rule, 0.4).unwrap().0;
            let fm = contrast_value_and_grad(&m, &labels, &rule, 0.4).unwrap().0;
            assert!(((fp - fm) / (2.0 * h) - g.data()[idx]).abs() < 1e-6);
        }
    }
}
