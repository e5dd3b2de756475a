//! Test-time adaptation of batch-norm layers on unlabeled target images.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Binder, BnMode, GroupSet, Param, ParamGroup, StatsSelection};
use crate::losses::{self, BatchPair, LossWeights};
use crate::math::{self, Float};
use crate::model::ModelBundle;
use crate::optim::{OptimizerKind, OptimizerState};
use crate::pairing::{self, AdaptationSet};
use crate::rng;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TtaConfig {
    /// Subset of `bn_gamma, bn_beta, bn_mu, bn_sigma2, conv, in`.
    pub groups: GroupSet,
    pub epochs: usize,
    pub pairs_per_batch: usize,
    pub lr: Float,
    pub optimizer: OptimizerKind,
    pub lambda3: Float,
    pub phi: Float,
    pub use_pos: bool,
    pub use_mat: bool,
    /// Pairs to select; `None` means `min(128, N / 2)`.
    pub pairs: Option<usize>,
    /// Both pair members act as hinge anchors.
    pub symmetric_anchors: bool,
    /// Replace running statistics by the average of the adaptation batch
    /// statistics instead of blending them in with the layer momentum.
    pub reset_stats: bool,
    /// Momentum of the running-statistic blend; `None` keeps each layer's own.
    pub stats_momentum: Option<Float>,
    /// Treat selected running statistics as gradient-trained leaves instead
    /// of re-estimating them.
    pub stats_by_gradient: bool,
    /// Images per batch when extracting embeddings for pairing.
    pub extract_batch: usize,
    pub seed: u64,
}

impl Default for TtaConfig {
    fn default() -> Self {
        TtaConfig {
            groups: GroupSet::all_bn(),
            epochs: 1,
            pairs_per_batch: 32,
            lr: 5e-4,
            optimizer: OptimizerKind::Adam,
            lambda3: 1.0,
            phi: 0.3,
            use_pos: true,
            use_mat: true,
            pairs: None,
            symmetric_anchors: true,
            reset_stats: false,
            stats_momentum: None,
            stats_by_gradient: false,
            extract_batch: 64,
            seed: 0,
        }
    }
}

impl TtaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.groups.contains(ParamGroup::FcHeads) {
            return Err(Error::Config(
                "adaptation may only update bn_gamma, bn_beta, bn_mu, bn_sigma2, conv and in".into(),
            ));
        }
        if self.pairs_per_batch < 2 || self.epochs == 0 || self.extract_batch == 0 {
            return Err(Error::Config("pairs_per_batch must be >= 2, epochs and extract_batch >= 1".into()));
        }
        if !(self.lr >= 0.0) || !(self.phi >= 0.0) || !(self.lambda3 >= 0.0) {
            return Err(Error::Config("lr, phi and lambda3 must be non-negative".into()));
        }
        if let Some(m) = self.stats_momentum {
            if !(0.0..=1.0).contains(&m) {
                return Err(Error::Config(format!("stats momentum {m} outside [0, 1]")));
            }
        }
        Ok(())
    }

    fn weights(&self) -> LossWeights {
        LossWeights {
            lambda3: self.lambda3,
            phi: self.phi,
            ..LossWeights::default()
        }
    }
}

/// Eval-mode features of a set of images.
#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    /// `[N, C]` pooled global features.
    pub global: Tensor,
    /// `[N, H, C_l]` matching-head embeddings.
    pub parts: Tensor,
}

pub fn extract(model: &ModelBundle, images: &[Tensor], batch: usize) -> Result<Embeddings> {
    if images.is_empty() || batch == 0 {
        return Err(Error::contract("extract", "need at least one image and a positive batch size"));
    }
    let cfg = model.config();
    let (c, _, _) = cfg.feature_shape()?;
    let mut global = Vec::with_capacity(images.len() * c);
    let mut parts = Vec::with_capacity(images.len() * cfg.stripes * cfg.part_dim);
    for chunk in images.chunks(batch) {
        let refs: Vec<&Tensor> = chunk.iter().collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::stack(&refs)?);
        let out = model.forward_eval(&mut tape, &mut Binder::frozen(), x)?;
        global.extend_from_slice(tape.value(out.global).data());
        parts.extend_from_slice(tape.value(out.part_embeddings).data());
    }
    Ok(Embeddings {
        global: Tensor::new(&[images.len(), c], global)?,
        parts: Tensor::new(&[images.len(), cfg.stripes, cfg.part_dim], parts)?,
    })
}

/// Mean relative change of one tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChangeRate {
    pub param: String,
    pub group: ParamGroup,
    /// Index in [`ModelBundle::bn_layers`] order, for BN tensors.
    pub bn_layer: Option<usize>,
    pub rate: Float,
}

/// Loss values of one adaptation step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TtaStep {
    pub epoch: usize,
    pub step: usize,
    pub pairs: usize,
    pub pos: Float,
    pub mat: Float,
    pub total: Float,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptReport {
    pub pairs: AdaptationSet,
    pub steps: Vec<TtaStep>,
    pub change_rates: Vec<ChangeRate>,
    /// True when nothing was selected for updating.
    pub noop: bool,
}

/// `|after − before| / (|before| + 1e-12)` averaged over elements.
pub fn change_rate(before: &Tensor, after: &Tensor) -> Float {
    let n = before.numel().max(1);
    let sum: Float = before
        .data()
        .iter()
        .zip(after.data())
        .map(|(b, a)| (a - b).abs() / (b.abs() + 1e-12))
        .sum();
    sum / math::from_usize(n)
}

fn change_rates(model: &ModelBundle, before: &[Param]) -> Vec<ChangeRate> {
    let bn_index = |name: &str| {
        model
            .bn_layers()
            .iter()
            .position(|bn| bn.params().any(|p| p.name == name))
    };
    model
        .params()
        .into_iter()
        .zip(before)
        .filter(|(p, _)| p.group != ParamGroup::FcHeads)
        .map(|(after, before)| ChangeRate {
            param: after.name.clone(),
            group: after.group,
            bn_layer: bn_index(&after.name),
            rate: change_rate(&before.value, &after.value),
        })
        .collect()
}

/// Shuffle pairs into batches of `size`; a final lone pair joins the
/// batch before it.
fn pair_batches(n: usize, size: usize, r: &mut rng::StreamRng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(r);
    let mut out: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().unwrap_or_default();
        if let Some(prev) = out.last_mut() {
            prev.extend(last);
        }
    }
    out
}

/// Pair the gallery by part nearest neighbors, then update the selected
/// groups on the matching and positioning losses. Parameters outside the
/// selection are left untouched.
pub fn adapt_bn(model: &mut ModelBundle, gallery: &[Tensor], cfg: &TtaConfig) -> Result<AdaptReport> {
    cfg.validate()?;
    if gallery.len() < 4 {
        return Err(Error::contract(
            "adapt_bn",
            format!("need at least 4 gallery images, got {}", gallery.len()),
        ));
    }
    let emb = extract(model, gallery, cfg.extract_batch)?;
    let workspace = pairing::compute_part_distances(&emb.parts)?;
    let k = cfg.pairs.unwrap_or_else(|| pairing::default_k(gallery.len()));
    let set = pairing::select_pairs(&workspace, k)?;
    let before: Vec<Param> = model.params().into_iter().cloned().collect();

    if cfg.groups.is_empty() {
        log::warn!("adaptation: no parameter group selected, model left unchanged");
        let change_rates = change_rates(model, &before);
        return Ok(AdaptReport {
            pairs: set,
            steps: Vec::new(),
            change_rates,
            noop: true,
        });
    }
    if set.len() < 2 {
        return Err(Error::contract("adapt_bn", "fewer than two pairs could be formed"));
    }

    let stats = StatsSelection {
        mean: cfg.groups.contains(ParamGroup::BnMu),
        var: cfg.groups.contains(ParamGroup::BnSigma2),
    };
    let (mode, trainable) = if cfg.stats_by_gradient {
        (BnMode::Eval, cfg.groups)
    } else {
        let mut g = cfg.groups;
        g.remove(ParamGroup::BnMu);
        g.remove(ParamGroup::BnSigma2);
        (if stats.any() { BnMode::TtaStats } else { BnMode::Eval }, g)
    };
    let reestimate = mode == BnMode::TtaStats;
    let momenta: Vec<Float> = model.bn_layers().iter().map(|bn| bn.state.momentum).collect();
    model.set_tta_update(stats);
    if reestimate && cfg.reset_stats {
        for bn in model.bn_layers_mut() {
            if stats.mean {
                bn.state.running_mu.value.data_mut().fill(0.0);
            }
            if stats.var {
                bn.state.running_var.value.data_mut().fill(1.0);
            }
        }
    }

    let weights = cfg.weights();
    let mut opt = OptimizerState::new(cfg.optimizer, cfg.lr)?;
    let mut shuffle = rng::stream(cfg.seed, "tta");
    let mut steps = Vec::new();
    let mut seen = 0usize;
    for epoch in 0..cfg.epochs {
        for (step, batch) in pair_batches(set.len(), cfg.pairs_per_batch, &mut shuffle).into_iter().enumerate() {
            let mut images: Vec<&Tensor> = Vec::with_capacity(2 * batch.len());
            let mut local = Vec::with_capacity(batch.len());
            for (slot, &p) in batch.iter().enumerate() {
                let pair = set.pairs[p];
                images.push(&gallery[pair.i]);
                images.push(&gallery[pair.j]);
                local.push(BatchPair {
                    a: 2 * slot,
                    b: 2 * slot + 1,
                    part: pair.part,
                });
            }
            if reestimate {
                // A reset turns the blend into a running average of batch statistics.
                let average = 1.0 / math::from_usize(seen + 1);
                for (bn, &own) in model.bn_layers_mut().into_iter().zip(&momenta) {
                    bn.state.momentum = if cfg.reset_stats { average } else { cfg.stats_momentum.unwrap_or(own) };
                }
            }
            seen += 1;
            let mut tape = Tape::new();
            let mut binder = Binder::new(trainable);
            let x = tape.constant(Tensor::stack(&images)?);
            let out = model.forward(&mut tape, &mut binder, x, mode)?;
            let pos = if cfg.use_pos {
                Some(losses::loss_pos(&mut tape, out.logits_pos)?)
            } else {
                None
            };
            let mat = if cfg.use_mat {
                Some(losses::loss_mat_tta(
                    &mut tape,
                    out.part_embeddings,
                    &local,
                    cfg.phi,
                    cfg.symmetric_anchors,
                )?)
            } else {
                None
            };
            let total = losses::loss_tta_total(&mut tape, pos, mat, &weights)?;
            let value = |v: Option<crate::tape::Var>| v.map_or(0.0, |v| tape.value(v).data()[0]);
            steps.push(TtaStep {
                epoch,
                step,
                pairs: batch.len(),
                pos: value(pos),
                mat: value(mat),
                total: tape.value(total).data()[0],
            });
            if tape.requires_grad(total) {
                tape.backward(total)?;
                model.absorb_grads(&tape, &binder)?;
                opt.step(model.params_mut().into_iter().filter(|p| trainable.contains(p.group)))?;
                model.zero_grads();
            }
        }
    }
    for (bn, own) in model.bn_layers_mut().into_iter().zip(momenta) {
        bn.state.momentum = own;
    }
    model.set_tta_update(StatsSelection::BOTH);
    model.set_bn_mode(BnMode::Eval);
    let change_rates = change_rates(model, &before);
    Ok(AdaptReport {
        pairs: set,
        steps,
        change_rates,
        noop: false,
    })
}
