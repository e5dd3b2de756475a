//! Joint supervised and self-supervised training on labeled source data.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Binder, BnMode, GroupSet, ParamGroup};
use crate::losses::{self, LossSet, LossWeights, TrainTerms};
use crate::math::{self, Float};
use crate::model::ModelBundle;
use crate::optim::{OptimizerKind, OptimizerState};
use crate::rng;
use crate::synth::Dataset;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: Float,
    /// Fraction of the epochs after which the learning rate decays.
    pub decay_at: Float,
    pub decay_factor: Float,
    pub optimizer: OptimizerKind,
    pub losses: LossSet,
    pub weights: LossWeights,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            lr: 0.005,
            decay_at: 2.0 / 3.0,
            decay_factor: 0.1,
            optimizer: OptimizerKind::Adam,
            losses: LossSet::ALL,
            weights: LossWeights::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> Float {
        let boundary = math::floor(self.decay_at * math::from_usize(self.epochs)) as usize;
        if epoch >= boundary.max(1) {
            self.lr * self.decay_factor
        } else {
            self.lr
        }
    }
}

/// Mean loss terms over the steps of one epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub lr: Float,
    pub id: Float,
    pub pos: Float,
    pub mat: Float,
    pub triplet: Float,
    pub total: Float,
}

/// Groups the source optimizer updates; running statistics move through
/// the Train-mode averages instead.
fn trainable_groups() -> GroupSet {
    let mut g = GroupSet::all();
    g.remove(ParamGroup::BnMu);
    g.remove(ParamGroup::BnSigma2);
    g
}

fn batches(order: &[usize], size: usize) -> impl Iterator<Item = &[usize]> {
    // A trailing batch of one sample cannot form batch statistics.
    order.chunks(size).filter(|c| c.len() >= 2)
}

pub fn train_source(model: &mut ModelBundle, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<EpochLog>> {
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if cfg.batch_size < 2 || cfg.batch_size > data.len() {
        return Err(Error::Config(format!(
            "batch size {} must lie in 2..={} (the dataset size)",
            cfg.batch_size,
            data.len()
        )));
    }
    if cfg.losses.is_empty() && !cfg.weights.use_fsl_triplet {
        return Err(Error::Config("no training loss selected".into()));
    }
    if data.num_ids > model.config().num_ids || data.labels.iter().any(|&l| l >= model.config().num_ids) {
        return Err(Error::Config(format!(
            "dataset has {} identities but the identity head has {}",
            data.num_ids,
            model.config().num_ids
        )));
    }
    cfg.weights.validate()?;
    let mut opt = OptimizerState::new(cfg.optimizer, cfg.lr)?;
    let mut shuffle = rng::stream(cfg.seed, "shuffle");
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        opt.lr = cfg.lr_at(epoch);
        order.shuffle(&mut shuffle);
        let mut log = EpochLog {
            epoch,
            lr: opt.lr,
            ..EpochLog::default()
        };
        for idx in batches(&order, cfg.batch_size) {
            let images: Vec<&Tensor> = idx.iter().map(|&i| &data.images[i]).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let mut tape = Tape::new();
            let mut binder = Binder::new(trainable_groups());
            let x = tape.constant(Tensor::stack(&images)?);
            let out = model.forward(&mut tape, &mut binder, x, BnMode::Train)?;
            let mut terms = TrainTerms::default();
            if cfg.losses.id {
                terms.id = Some(losses::loss_id(&mut tape, out.logits_id, &labels)?);
            }
            if cfg.losses.pos {
                terms.pos = Some(losses::loss_pos(&mut tape, out.logits_pos)?);
            }
            if cfg.losses.mat {
                terms.mat = Some(losses::loss_mat_train(&mut tape, out.logits_mat, &labels)?);
            }
            if cfg.weights.use_fsl_triplet {
                terms.triplet = Some(losses::loss_triplet_fsl(&mut tape, out.global, &labels, cfg.weights.phi_tri)?);
            }
            let total = losses::loss_train_total(&mut tape, &terms, &cfg.weights)?;
            let value = |v: Option<crate::tape::Var>| v.map_or(0.0, |v| tape.value(v).data()[0]);
            log.id += value(terms.id);
            log.pos += value(terms.pos);
            log.mat += value(terms.mat);
            log.triplet += value(terms.triplet);
            log.total += tape.value(total).data()[0];
            log.steps += 1;
            if tape.requires_grad(total) {
                tape.backward(total)?;
                model.absorb_grads(&tape, &binder)?;
                opt.step(model.params_mut())?;
                model.zero_grads();
            }
        }
        let n = math::from_usize(log.steps.max(1));
        for v in [&mut log.id, &mut log.pos, &mut log.mat, &mut log.triplet, &mut log.total] {
            *v /= n;
        }
        log::info!(
            "epoch {epoch}: lr {:.2e} total {:.4} (id {:.4} pos {:.4} mat {:.4})",
            log.lr,
            log.total,
            log.id,
            log.pos,
            log.mat
        );
        logs.push(log);
    }
    model.set_bn_mode(BnMode::Eval);
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn schedule_decays_at_two_thirds() {
        let cfg = TrainConfig {
            epochs: 60,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_at(39), 0.005);
        assert!((cfg.lr_at(40) - 0.0005).abs() < 1e-15);
    }

    #[test]
    fn trailing_singleton_batch_dropped() {
        let order: Vec<usize> = (0..9).collect();
        let sizes: Vec<usize> = batches(&order, 4).map(<[usize]>::len).collect();
        assert_eq!(sizes, vec![4, 4]);
    }
}
