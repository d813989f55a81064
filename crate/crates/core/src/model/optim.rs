//! SGD with momentum, coupled weight decay and per-epoch cosine annealing.

use serde::{Deserialize, Serialize};

use super::ModelState;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub total_epochs: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr0: 0.01,
            momentum: 0.9,
            weight_decay: 5e-3,
            total_epochs: 200,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "need lr0 > 0, momentum in [0, 1), weight_decay >= 0; got {self:?}"
            )));
        }
        Ok(())
    }
}

/// `lr0 * (1 + cos(pi * epoch / total)) / 2`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr0: f64) -> f64 {
    if total_epochs == 0 {
        return lr0;
    }
    let t = epoch.min(total_epochs) as f64 / total_epochs as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// `buf <- momentum * buf + grad + wd * param; param <- param - lr * buf`.
///
/// The state is left untouched when any updated value would be non-finite.
pub fn sgd_step(state: &mut ModelState, grads: &[Matrix], lr: f64, cfg: &OptimConfig) -> Result<()> {
    let (params, momentum) = state.params_and_momentum_mut();
    if grads.len() != params.len() {
        return Err(Error::ShapeMismatch {
            left: vec![params.len()],
            right: vec![grads.len()],
        });
    }
    let mut next = Vec::with_capacity(params.len());
    for ((p, buf), g) in params.iter().zip(momentum.iter()).zip(grads) {
        if g.shape() != p.shape() {
            return Err(Error::ShapeMismatch {
                left: vec![p.rows(), p.cols()],
                right: vec![g.rows(), g.cols()],
            });
        }
        let mut new_buf = buf.clone();
        let mut new_p = p.clone();
        for ((b, w), gv) in new_buf.data_mut().iter_mut().zip(new_p.data_mut()).zip(g.data()) {
            *b = cfg.momentum * *b + gv + cfg.weight_decay * *w;
            *w -= lr * *b;
        }
        if !new_buf.is_finite() || !new_p.is_finite() {
            return Err(Error::NonFinite {
                op: "sgd_step",
                pass: "update",
            });
        }
        next.push((new_p, new_buf));
    }
    for ((p, buf), (np, nb)) in params.iter_mut().zip(momentum.iter_mut()).zip(next) {
        *p = np;
        *buf = nb;
    }
    state.step += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{grad, ArchConfig, Tape};

    fn scalar_state(w: f64) -> ModelState {
        let arch = ArchConfig {
            input_shape: vec![1],
            conv_channels: vec![],
            encoder_hidden: vec![1],
            projection_hidden: vec![],
            projection_dim: 1,
            projection_norm: false,
            n_classes: 1,
        };
        let mut s = ModelState::init(&arch, 0).unwrap();
        let i = s.param_index("enc0.w").unwrap();
        *s.param_mut(i) = Matrix::scalar(w);
        s
    }

    fn zero_grads(s: &ModelState) -> Vec<Matrix> {
        s.params().iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect()
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_lr(0, 10, 0.01), 0.01);
        assert!(cosine_lr(10, 10, 0.01).abs() < 1e-18);
        assert!((cosine_lr(5, 10, 0.01) - 0.005).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_zero_decay_is_noop() {
        let mut s = scalar_state(0.7);
        let before = s.params().to_vec();
        let cfg = OptimConfig { weight_decay: 0.0, ..Default::default() };
        let g = zero_grads(&s);
        sgd_step(&mut s, &g, 0.1, &cfg).unwrap();
        assert_eq!(s.params(), before.as_slice());
        assert_eq!(s.step, 1);
    }

    #[test]
    fn plain_descent_without_momentum() {
        let mut s = scalar_state(1.0);
        let i = s.param_index("enc0.w").unwrap();
        let mut g = zero_grads(&s);
        g[i] = Matrix::scalar(0.5);
        let cfg = OptimConfig { momentum: 0.0, weight_decay: 0.0, ..Default::default() };
        sgd_step(&mut s, &g, 0.2, &cfg).unwrap();
        assert!((s.params()[i].data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn two_steps_match_hand_recursion() {
        // w0 = 1, g = 0.5 both steps, mu = 0.9, wd = 0.1, lr = 0.1
        // b1 = 0.5 + 0.1 = 0.6, w1 = 0.94
        // b2 = 0.54 + 0.5 + 0.094 = 1.134, w2 = 0.8266
        let mut s = scalar_state(1.0);
        let i = s.param_index("enc0.w").unwrap();
        let mut g = zero_grads(&s);
        g[i] = Matrix::scalar(0.5);
        let cfg = OptimConfig { momentum: 0.9, weight_decay: 0.1, ..Default::default() };
        sgd_step(&mut s, &g, 0.1, &cfg).unwrap();
        assert!((s.params()[i].data()[0] - 0.94).abs() < 1e-12);
        sgd_step(&mut s, &g, 0.1, &cfg).unwrap();
        assert!((s.params()[i].data()[0] - 0.8266).abs() < 1e-12);
        assert!((s.momentum()[i].data()[0] - 1.134).abs() < 1e-12);
    }

    #[test]
    fn descent_on_quadratic() {
        let mut s = scalar_state(2.0);
        let objective = |s: &ModelState| 0.5 * s.params().iter().map(Matrix::frobenius_sq).sum::<f64>();
        let before = objective(&s);
        let mut tape = Tape::new();
        let bound = s.bind(&mut tape).unwrap();
        let terms: Vec<_> = (0..s.params().len())
            .map(|i| (tape.half_sum_squares(bound.vars[i]).unwrap(), 1.0))
            .collect();
        let obj = tape.weighted_sum(&terms).unwrap();
        let g = grad(&s, &tape, obj).unwrap();
        sgd_step(&mut s, &g, 0.1, &OptimConfig::default()).unwrap();
        assert!(objective(&s) < before);
    }

    #[test]
    fn non_finite_update_rejected() {
        let mut s = scalar_state(1.0);
        let before = s.clone();
        let mut g = zero_grads(&s);
        g[0] = Matrix::new(g[0].rows(), g[0].cols(), vec![f64::INFINITY; g[0].data().len()]).unwrap();
        assert!(sgd_step(&mut s, &g, 0.1, &OptimConfig::default()).is_err());
        assert_eq!(s, before);
    }
}
