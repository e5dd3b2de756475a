//! Train, adapt and evaluate steps shared by the command-line tool, the
//! ablation sweep and the acceptance run.

use std::collections::BTreeSet;

use bnta_core::adapt::{self, AdaptReport, TtaConfig};
use bnta_core::layers::GroupSet;
use bnta_core::metrics::{self, average_over_splits, BnProbe, Retrieval, RunMetrics, SplitSummary};
use bnta_core::model::ModelBundle;
use bnta_core::synth::{Dataset, TestPool, TestSplit};
use bnta_core::train::{train_source, EpochLog};
use bnta_core::{rng, Float, Tensor};
use serde::Serialize;

use crate::checkpoint;
use crate::config::{EvalConfig, RunConfig};
use crate::error::{Error, Result};

/// Initialize from the `init` stream and train on `data`. The identity
/// head and the input size follow the dataset.
pub fn train(run: &RunConfig, data: &Dataset) -> Result<(ModelBundle, Vec<EpochLog>)> {
    let mut cfg = run.model.clone();
    cfg.num_ids = data.num_ids;
    if let Some(&[_, h, w]) = data.images.first().map(Tensor::shape) {
        cfg.image_height = h;
        cfg.image_width = w;
    }
    let mut model = ModelBundle::new(cfg, &mut rng::stream(run.seed, "init"))?;
    let log = train_source(&mut model, data, &run.train)?;
    Ok((model, log))
}

pub fn retrieval(model: &ModelBundle, pool: &TestPool, split: &TestSplit, eval: &EvalConfig) -> Result<Retrieval> {
    let probe = adapt::extract(model, &pool.images_at(&split.probe), eval.batch)?;
    let gallery = adapt::extract(model, &pool.images_at(&split.gallery), eval.batch)?;
    Ok(metrics::cmc_map(
        &probe.global,
        &gallery.global,
        &pool.labels_at(&split.probe),
        &pool.labels_at(&split.gallery),
        eval.normalize,
    )?)
}

/// Adapt a copy of `model` on the split's gallery images.
pub fn adapt_on_split(
    model: &ModelBundle,
    pool: &TestPool,
    split: &TestSplit,
    tta: &TtaConfig,
) -> Result<(ModelBundle, AdaptReport)> {
    let mut adapted = model.clone();
    let report = adapt::adapt_bn(&mut adapted, &pool.images_at(&split.gallery), tta)?;
    Ok((adapted, report))
}

/// Names of tensors that changed although their group was not selected.
pub fn unselected_changes(before: &ModelBundle, after: &ModelBundle, groups: GroupSet) -> Result<Vec<String>> {
    Ok(checkpoint::diff(before, after)?
        .into_iter()
        .filter(|c| !groups.contains(c.group))
        .map(|c| c.name)
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SplitRecord {
    pub split: usize,
    pub frozen: RunMetrics,
    pub adapted: Option<RunMetrics>,
}

/// Frozen and (optionally) adapted retrieval over every split.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub splits: usize,
    pub normalize: bool,
    pub frozen: SplitSummary,
    pub adapted: Option<SplitSummary>,
    pub per_split: Vec<SplitRecord>,
    /// Full ranking record of split 0.
    pub first_split_frozen: Retrieval,
    pub first_split_adapted: Option<Retrieval>,
    /// Tensors outside the adapted groups that changed on any split.
    pub unselected_changes: Vec<String>,
}

/// Evaluate `model` on `run.eval.splits` splits. With `tta`, a fresh copy
/// is adapted on every split's gallery before it is scored as well.
pub fn evaluate(model: &ModelBundle, pool: &TestPool, run: &RunConfig, tta: Option<&TtaConfig>) -> Result<Evaluation> {
    let mut per_split = Vec::with_capacity(run.eval.splits);
    let mut first = None;
    let mut first_adapted = None;
    let mut changes = BTreeSet::new();
    for index in 0..run.eval.splits {
        let s = pool.split(index, run.seed);
        let frozen = retrieval(model, pool, &s, &run.eval)?;
        let adapted = match tta {
            Some(cfg) => {
                let (m, _) = adapt_on_split(model, pool, &s, cfg)?;
                changes.extend(unselected_changes(model, &m, cfg.groups)?);
                Some(retrieval(&m, pool, &s, &run.eval)?)
            }
            None => None,
        };
        per_split.push(SplitRecord {
            split: index,
            frozen: RunMetrics::from(&frozen),
            adapted: adapted.as_ref().map(RunMetrics::from),
        });
        if index == 0 {
            first = Some(frozen);
            first_adapted = adapted;
        }
    }
    let frozen_runs: Vec<RunMetrics> = per_split.iter().map(|r| r.frozen).collect();
    let adapted_runs: Option<Vec<RunMetrics>> = per_split.iter().map(|r| r.adapted).collect();
    Ok(Evaluation {
        splits: run.eval.splits,
        normalize: run.eval.normalize,
        frozen: average_over_splits(&frozen_runs, run.eval.splits)?,
        adapted: adapted_runs
            .map(|r| average_over_splits(&r, run.eval.splits))
            .transpose()?,
        per_split,
        first_split_frozen: first.ok_or_else(|| Error::Config("no splits evaluated".into()))?,
        first_split_adapted: first_adapted,
        unselected_changes: changes.into_iter().collect(),
    })
}

/// `count` contiguous, nearly equal batches.
fn batches(images: &[Tensor], count: usize) -> Vec<Vec<Tensor>> {
    let n = images.len();
    (0..count).map(|i| images[i * n / count..(i + 1) * n / count].to_vec()).collect()
}

/// Source and target images cut into the same number of batches.
pub fn paired_batches(source: &[Tensor], target: &[Tensor], batch: usize) -> Result<(Vec<Vec<Tensor>>, Vec<Vec<Tensor>>)> {
    let smallest = source.len().min(target.len());
    if smallest == 0 || batch == 0 {
        return Err(Error::Config("the shift probe needs images from both domains".into()));
    }
    let count = source.len().max(target.len()).div_ceil(batch).min(smallest);
    Ok((batches(source, count), batches(target, count)))
}

/// Output shift of one BN layer before and after adaptation. The source
/// reference always comes from the frozen model.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ShiftComparison {
    pub layer: usize,
    pub layer_name: Option<String>,
    pub frozen: BnProbe,
    pub adapted: Option<BnProbe>,
}

impl ShiftComparison {
    /// Moment-gap score of the adapted model minus the frozen one.
    pub fn change(&self) -> Option<Float> {
        self.adapted
            .as_ref()
            .map(|a| a.shift.moment_gap - self.frozen.shift.moment_gap)
    }
}

pub fn shift_comparison(
    frozen: &ModelBundle,
    adapted: Option<&ModelBundle>,
    layer: usize,
    source: &[Tensor],
    target: &[Tensor],
    batch: usize,
) -> Result<ShiftComparison> {
    let (s, t) = paired_batches(source, target, batch)?;
    let reference = metrics::bn_shift_probe(frozen, layer, &s, &t)?;
    let adapted = adapted
        .map(|m| -> Result<BnProbe> {
            let moved = metrics::probe_moments(m, layer, &t)?;
            Ok(BnProbe {
                layer,
                source: reference.source,
                target: moved,
                shift: metrics::shift_score(&reference.source, &moved),
            })
        })
        .transpose()?;
    Ok(ShiftComparison {
        layer,
        layer_name: frozen.bn_layer_name(layer),
        frozen: reference,
        adapted,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HistogramRow {
    pub bin_lo: Float,
    pub bin_hi: Float,
    pub source: usize,
    pub target_frozen: usize,
    pub target_adapted: Option<usize>,
}

/// Histogram of the layer's outputs per domain over a shared range.
pub fn bn_histogram(
    frozen: &ModelBundle,
    adapted: Option<&ModelBundle>,
    layer: usize,
    source: &[Tensor],
    target: &[Tensor],
    batch: usize,
    bins: usize,
) -> Result<Vec<HistogramRow>> {
    let outputs = |m: &ModelBundle, images: &[Tensor]| -> Result<Vec<Float>> {
        let mut all = Vec::new();
        for chunk in images.chunks(batch.max(1)) {
            all.extend(metrics::bn_layer_output(m, layer, chunk)?);
        }
        Ok(all)
    };
    let src = outputs(frozen, source)?;
    let tgt = outputs(frozen, target)?;
    let ada = adapted.map(|m| outputs(m, target)).transpose()?;
    let all = src.iter().chain(&tgt).chain(ada.iter().flatten());
    let (lo, hi) = all.fold((Float::INFINITY, Float::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        return Err(Error::Config(format!("BN layer {layer} outputs are constant; nothing to histogram")));
    }
    // Widen slightly so the maximum lands inside the last bin.
    let hi = hi + (hi - lo) * 1e-9;
    let width = (hi - lo) / bins as Float;
    let s = metrics::histogram(&src, lo, hi, bins);
    let t = metrics::histogram(&tgt, lo, hi, bins);
    let a = ada.map(|v| metrics::histogram(&v, lo, hi, bins));
    Ok((0..bins)
        .map(|k| HistogramRow {
            bin_lo: lo + width * k as Float,
            bin_hi: lo + width * (k + 1) as Float,
            source: s[k],
            target_frozen: t[k],
            target_adapted: a.as_ref().map(|a| a[k]),
        })
        .collect())
}
