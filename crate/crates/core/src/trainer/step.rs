//! One optimisation step and the per-epoch prototype refresh.

use std::hash::{DefaultHasher, Hash, Hasher};

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::contrastive::{
    compute_prototypes, contrast_value_and_grad, knn_correct, relabel, ContrastRule, PrototypeSet,
};
use crate::data::{augment, BatchPair, Policy, Sample};
use crate::error::{Error, Result};
use crate::mixer::{self, batch_mixed_ce, SoftTarget};
use crate::model::{self, sgd_step, ModelState, Tape, Var};
use crate::rng::{self, Purpose};
use crate::tensor::{Matrix, Tensor};

/// Which real embeddings vote when correcting synthetic labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KnnReference {
    /// Real rows of the current batch plus the valid prototypes.
    Batch,
    /// Every real training embedding from the last prototype refresh plus the
    /// valid prototypes.
    Bank,
}

/// Prototypes of both contrastive views plus the real embeddings they were
/// averaged from.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes {
    pub view2: PrototypeSet,
    pub view3: PrototypeSet,
    pub bank2: Matrix,
    pub bank3: Matrix,
    pub bank_labels: Vec<i64>,
}

fn stack_views<'a>(views: impl IntoIterator<Item = &'a Tensor>) -> Result<Matrix> {
    Matrix::from_tensors(views)
}

fn embed(state: &ModelState, x: &Matrix) -> Result<Matrix> {
    let h = state.encode(x)?;
    state.project(&h)
}

/// Embeds every real sample under both contrastive augmentations with the
/// current weights and averages per class.
pub fn refresh_prototypes(state: &ModelState, real: &[Sample], seed: u64, epoch: u64) -> Result<Prototypes> {
    let reals: Vec<&Sample> = real.iter().filter(|s| !s.is_synthetic).collect();
    if reals.is_empty() {
        return Err(Error::Empty("real training samples"));
    }
    let n_classes = state.arch().n_classes;
    let view = |purpose| -> Result<Matrix> {
        let views: Vec<Tensor> = reals
            .iter()
            .map(|s| augment(&s.features, Policy::Contrastive, &mut rng::stream(seed, purpose, epoch, 0, s.id)))
            .collect();
        stack_views(&views)
    };
    let labels: Vec<usize> = reals.iter().map(|s| s.label).collect();
    let bank2 = embed(state, &view(Purpose::PrototypeViewA)?)?;
    let bank3 = embed(state, &view(Purpose::PrototypeViewB)?)?;
    Ok(Prototypes {
        view2: compute_prototypes(&bank2, &labels, n_classes)?,
        view3: compute_prototypes(&bank3, &labels, n_classes)?,
        bank2,
        bank3,
        bank_labels: labels.iter().map(|&l| l as i64).collect(),
    })
}

/// Per-step loss components (unweighted) and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepLosses {
    pub mixup: f64,
    pub cutmix: f64,
    pub sc: f64,
    pub ce: f64,
    pub total: f64,
    pub noise_count: usize,
}

/// Mixing draws shared by every evaluation of one step's objective.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDraws {
    pub mix_lambda: f64,
    pub cut_lambda: f64,
    pub cut: mixer::CutBox,
}

impl StepDraws {
    pub fn sample(cfg: &TrainConfig, like: &Tensor, epoch: u64, step: u64) -> Result<Self> {
        let seed = cfg.seed;
        let mix_lambda = mixer::sample_mix_ratio(cfg.alpha, &mut rng::stream(seed, Purpose::MixupRatio, epoch, step, 0))?;
        let cut_lambda = mixer::sample_mix_ratio(cfg.alpha, &mut rng::stream(seed, Purpose::CutmixRatio, epoch, step, 0))?;
        let cut = mixer::sample_box_for(like, cut_lambda, &mut rng::stream(seed, Purpose::CutmixBox, epoch, step, 0));
        Ok(Self {
            mix_lambda,
            cut_lambda,
            cut,
        })
    }
}

/// One step's objective recorded on a tape.
pub struct Objective {
    pub tape: Tape,
    pub total: Var,
    pub losses: StepLosses,
    /// Contrastive label of every batch-1 sample after correction.
    pub labels: Vec<i64>,
}

/// Stable fingerprint of what one step consumed: sample order of both
/// batches and the mixing draws.
pub fn batch_hash(pair: &BatchPair, draws: &StepDraws) -> u64 {
    let mut h = DefaultHasher::new();
    for it in &pair.batch1 {
        it.id.hash(&mut h);
    }
    for it in &pair.batch2 {
        it.id.hash(&mut h);
    }
    draws.mix_lambda.to_bits().hash(&mut h);
    draws.cut_lambda.to_bits().hash(&mut h);
    (draws.cut.x0, draws.cut.x1, draws.cut.y0, draws.cut.y1).hash(&mut h);
    h.finish()
}

/// Classification logits of `x` and their mixed CE, recorded as one loss
/// node.
fn ce_term(state: &ModelState, tape: &mut Tape, bound: &model::Bound, x: Matrix, targets: &[SoftTarget], name: &'static str) -> Result<(Var, f64)> {
    let x = tape.constant(x)?;
    let h = state.encode_on(tape, bound, x)?;
    let logits = state.classify_on(tape, bound, h)?;
    let (value, grad) = batch_mixed_ce(tape.value(logits), targets)?;
    Ok((tape.scalar_loss(name, logits, value, grad)?, value))
}

/// Records the full step objective. With `frozen_labels` the nearest-neighbour
/// correction is skipped and those contrastive labels are used instead.
pub fn build_objective(
    state: &ModelState,
    pair: &BatchPair,
    protos: &Prototypes,
    draws: &StepDraws,
    cfg: &TrainConfig,
    frozen_labels: Option<&[i64]>,
) -> Result<Objective> {
    if pair.batch1.len() < 2 || pair.batch2.len() != pair.batch1.len() {
        return Err(Error::InvalidConfig(format!(
            "batch pair sizes {} / {} (need equal and >= 2)",
            pair.batch1.len(),
            pair.batch2.len()
        )));
    }
    let w = cfg.weights;
    let mut tape = Tape::new();
    let bound = state.bind(&mut tape)?;
    let mut terms = Vec::new();
    let mut losses = StepLosses::default();

    if w.mixup != 0.0 || w.cutmix != 0.0 {
        let mut mix_x = Vec::with_capacity(pair.len());
        let mut mix_t = Vec::with_capacity(pair.len());
        let mut cut_x = Vec::with_capacity(pair.len());
        let mut cut_t = Vec::with_capacity(pair.len());
        for (a, b) in pair.batch1.iter().zip(&pair.batch2) {
            let m = mixer::mixup(&a.views.v1, a.label, &b.view, b.label, draws.mix_lambda)?;
            mix_t.push(m.target());
            mix_x.push(m.x_tilde);
            let c = mixer::cutmix(&a.views.v1, a.label, &b.view, b.label, &draws.cut)?;
            cut_t.push(c.target());
            cut_x.push(c.x_tilde);
        }
        if w.mixup != 0.0 {
            let (v, value) = ce_term(state, &mut tape, &bound, stack_views(&mix_x)?, &mix_t, "mixup_ce")?;
            losses.mixup = value;
            terms.push((v, w.mixup));
        }
        if w.cutmix != 0.0 {
            let (v, value) = ce_term(state, &mut tape, &bound, stack_views(&cut_x)?, &cut_t, "cutmix_ce")?;
            losses.cutmix = value;
            terms.push((v, w.cutmix));
        }
    }

    if w.plain_ce != 0.0 {
        let x = stack_views(pair.batch1.iter().map(|it| &it.views.v1))?;
        let t: Vec<SoftTarget> = pair.batch1.iter().map(|it| SoftTarget::hard(it.label)).collect();
        let (v, value) = ce_term(state, &mut tape, &bound, x, &t, "plain_ce")?;
        losses.ce = value;
        terms.push((v, w.plain_ce));
    }

    let mut labels: Vec<i64> = pair.batch1.iter().map(|it| it.label as i64).collect();
    if w.contrastive != 0.0 {
        let x2 = tape.constant(stack_views(pair.batch1.iter().map(|it| &it.views.v2))?)?;
        let x3 = tape.constant(stack_views(pair.batch1.iter().map(|it| &it.views.v3))?)?;
        let h2 = state.encode_on(&mut tape, &bound, x2)?;
        let z2 = state.project_on(&mut tape, &bound, h2)?;
        let h3 = state.encode_on(&mut tape, &bound, x3)?;
        let z3 = state.project_on(&mut tape, &bound, h3)?;

        match frozen_labels {
            Some(frozen) => {
                if frozen.len() != labels.len() {
                    return Err(Error::ShapeMismatch {
                        left: vec![labels.len()],
                        right: vec![frozen.len()],
                    });
                }
                labels = frozen.to_vec();
                losses.noise_count = labels.iter().filter(|&&l| l < 0).count();
            }
            None => {
                let syn: Vec<usize> = (0..pair.len()).filter(|&i| pair.batch1[i].is_synthetic).collect();
                if !syn.is_empty() {
                    let real: Vec<usize> = (0..pair.len()).filter(|&i| !pair.batch1[i].is_synthetic).collect();
                    let vote = |z: Var, set: &PrototypeSet, bank: &Matrix| -> Result<Vec<Option<i64>>> {
                        let zv = tape.value(z);
                        let (p_rows, p_labels) = set.valid_rows();
                        let (reference, y_ref) = match cfg.knn_reference {
                            KnnReference::Batch => {
                                let rows = zv.select_rows(&real);
                                let y = real.iter().map(|&i| labels[i]);
                                (Matrix::vstack(&[&rows, &p_rows])?, y.chain(p_labels).collect::<Vec<_>>())
                            }
                            KnnReference::Bank => {
                                let y = protos.bank_labels.iter().copied();
                                (Matrix::vstack(&[bank, &p_rows])?, y.chain(p_labels).collect())
                            }
                        };
                        knn_correct(&zv.select_rows(&syn), &reference, &y_ref, cfg.k)
                    };
                    let c2 = vote(z2, &protos.view2, &protos.bank2)?;
                    let c3 = vote(z3, &protos.view3, &protos.bank3)?;
                    let y_org: Vec<i64> = syn.iter().map(|&i| labels[i]).collect();
                    let res = relabel(&y_org, &c2, &c3, -1)?;
                    for (&i, &y) in syn.iter().zip(&res.y_new) {
                        labels[i] = y;
                    }
                    losses.noise_count = res.noise_count;
                }
            }
        }

        // rows: batch view 2, batch view 3, prototypes of view 2, of view 3
        let (p2, l2) = protos.view2.valid_rows();
        let (p3, l3) = protos.view3.valid_rows();
        let b = pair.len();
        let all_z = Matrix::vstack(&[tape.value(z2), tape.value(z3), &p2, &p3])?;
        let all_y: Vec<i64> = labels.iter().chain(&labels).copied().chain(l2).chain(l3).collect();
        let rule = ContrastRule::for_variant(cfg.variant, &all_y);
        let n_anchors = rule.anchor.iter().filter(|&&a| a).count().max(1) as f64;
        let (sum, grad) = contrast_value_and_grad(&all_z, &all_y, &rule, cfg.tau)?;
        let value = sum / n_anchors;
        let g = grad.scale(1.0 / n_anchors);
        let g2 = g.select_rows(&(0..b).collect::<Vec<_>>());
        let g3 = g.select_rows(&(b..2 * b).collect::<Vec<_>>());
        // the prototype rows are constants, so their gradient is dropped and
        // the value is split evenly between the two recorded nodes
        let s2 = tape.scalar_loss("supcon_view2", z2, value / 2.0, g2)?;
        let s3 = tape.scalar_loss("supcon_view3", z3, value / 2.0, g3)?;
        let sc = tape.weighted_sum(&[(s2, 1.0), (s3, 1.0)])?;
        losses.sc = value;
        terms.push((sc, w.contrastive));
    }

    let total = tape.weighted_sum(&terms)?;
    losses.total = tape.scalar(total);
    Ok(Objective {
        tape,
        total,
        losses,
        labels,
    })
}

/// Builds the objective, differentiates it once and applies one SGD update.
pub fn train_step(
    state: &mut ModelState,
    pair: &BatchPair,
    protos: &Prototypes,
    cfg: &TrainConfig,
    epoch: u64,
    step: u64,
    lr: f64,
) -> Result<StepLosses> {
    let like = &pair
        .batch1
        .first()
        .ok_or(Error::Empty("batch"))?
        .views
        .v1;
    let draws = StepDraws::sample(cfg, like, epoch, step)?;
    let diverged = |e: Error| Error::Diverged {
        epoch: epoch as usize,
        step: step as usize,
        detail: e.to_string(),
    };
    let obj = build_objective(state, pair, protos, &draws, cfg, None).map_err(|e| match e {
        Error::NonFinite { .. } => diverged(e),
        other => other,
    })?;
    if !obj.losses.total.is_finite() {
        return Err(diverged(Error::NonFinite {
            op: "objective",
            pass: "forward",
        }));
    }
    let grads = model::grad(state, &obj.tape, obj.total).map_err(diverged)?;
    sgd_step(state, &grads, lr, &cfg.optim).map_err(diverged)?;
    Ok(obj.losses)
}
