//! Retrieval metrics and the batch-norm output shift probe.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Binder;
use crate::math::{self, Float};
use crate::model::ModelBundle;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Ranking quality of one probe set against one gallery.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Retrieval {
    /// `cmc[k]`: fraction of probes whose first match is within rank `k + 1`.
    pub cmc: Vec<Float>,
    pub map: Float,
    /// 1-based rank of the first correct match per probe.
    pub ranks: Vec<usize>,
    pub average_precision: Vec<Float>,
}

impl Retrieval {
    /// CMC at rank `k` (1-based), saturating at the gallery size.
    pub fn rank(&self, k: usize) -> Float {
        match self.cmc.len() {
            0 => 0.0,
            n => self.cmc[k.clamp(1, n) - 1],
        }
    }
}

fn l2_normalized(rows: &[Float], dim: usize) -> Vec<Float> {
    rows.chunks(dim)
        .flat_map(|r| {
            let norm = math::sqrt(r.iter().map(|v| v * v).sum::<Float>());
            let scale = if norm > 0.0 { 1.0 / norm } else { 0.0 };
            r.iter().map(move |v| v * scale)
        })
        .collect()
}

/// Rank the gallery by Euclidean distance for every probe (ties go to the
/// lower gallery index) and score CMC and mean average precision.
pub fn cmc_map(
    probe: &Tensor,
    gallery: &Tensor,
    probe_labels: &[usize],
    gallery_labels: &[usize],
    normalize: bool,
) -> Result<Retrieval> {
    let (&[p, d], &[g, d2]) = (probe.shape(), gallery.shape()) else {
        return Err(Error::shape("cmc_map", probe.shape(), gallery.shape()));
    };
    if d != d2 || p != probe_labels.len() || g != gallery_labels.len() {
        return Err(Error::shape("cmc_map", probe.shape(), gallery.shape()));
    }
    let present: BTreeSet<usize> = gallery_labels.iter().copied().collect();
    let missing: BTreeSet<usize> = probe_labels.iter().filter(|l| !present.contains(l)).copied().collect();
    if !missing.is_empty() {
        return Err(Error::Protocol(format!(
            "probe identities absent from the gallery: {:?}",
            missing.into_iter().collect::<Vec<_>>()
        )));
    }
    let (pd, gd) = if normalize {
        (l2_normalized(probe.data(), d), l2_normalized(gallery.data(), d))
    } else {
        (probe.data().to_vec(), gallery.data().to_vec())
    };
    let mut hits = alloc::vec![0usize; g];
    let mut ranks = Vec::with_capacity(p);
    let mut aps = Vec::with_capacity(p);
    for (q, &label) in pd.chunks(d).zip(probe_labels) {
        let mut order: Vec<(Float, usize)> = gd
            .chunks(d)
            .enumerate()
            .map(|(j, row)| {
                let sq: Float = q.iter().zip(row).map(|(a, b)| (a - b) * (a - b)).sum();
                (math::sqrt(sq), j)
            })
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut found = 0usize;
        let mut precision_sum = 0.0;
        let mut first = None;
        for (pos, &(_, j)) in order.iter().enumerate() {
            if gallery_labels[j] == label {
                found += 1;
                precision_sum += math::from_usize(found) / math::from_usize(pos + 1);
                first.get_or_insert(pos);
            }
        }
        let first = first.unwrap_or(g - 1);
        hits[first] += 1;
        ranks.push(first + 1);
        aps.push(precision_sum / math::from_usize(found.max(1)));
    }
    let mut cmc = Vec::with_capacity(g);
    let mut acc = 0usize;
    for h in hits {
        acc += h;
        cmc.push(math::from_usize(acc) / math::from_usize(p.max(1)));
    }
    let map = aps.iter().sum::<Float>() / math::from_usize(p.max(1));
    Ok(Retrieval {
        cmc,
        map,
        ranks,
        average_precision: aps,
    })
}

/// Count, mean and biased variance of a stream of values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub count: usize,
    pub mean: Float,
    pub var: Float,
}

impl Moments {
    pub fn of(values: &[Float]) -> Self {
        let mut m = Moments::default();
        m.extend(values);
        m
    }

    /// Merge values in (Chan et al. pairwise update).
    pub fn extend(&mut self, values: &[Float]) {
        if values.is_empty() {
            return;
        }
        let n = math::from_usize(values.len());
        let mean = values.iter().sum::<Float>() / n;
        let m2 = values.iter().map(|v| (v - mean) * (v - mean)).sum::<Float>();
        let other = Moments {
            count: values.len(),
            mean,
            var: m2 / n,
        };
        *self = self.merge(&other);
    }

    pub fn merge(&self, other: &Moments) -> Moments {
        if self.count == 0 {
            return *other;
        }
        if other.count == 0 {
            return *self;
        }
        let (na, nb) = (math::from_usize(self.count), math::from_usize(other.count));
        let n = na + nb;
        let delta = other.mean - self.mean;
        let m2 = self.var * na + other.var * nb + delta * delta * na * nb / n;
        Moments {
            count: self.count + other.count,
            mean: self.mean + delta * nb / n,
            var: (m2 / n).max(0.0),
        }
    }
}

/// Distance between two one-dimensional Gaussian summaries.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftScore {
    /// `|var_t / var_s − 1| + |mean_t − mean_s|`.
    pub moment_gap: Float,
    pub kl_source_target: Float,
    pub kl_target_source: Float,
    pub symmetric_kl: Float,
}

fn gaussian_kl(p: &Moments, q: &Moments) -> Float {
    let floor = 1e-12;
    let (vp, vq) = (p.var.max(floor), q.var.max(floor));
    0.5 * (math::ln(vq / vp) + (vp + (p.mean - q.mean) * (p.mean - q.mean)) / vq - 1.0)
}

pub fn shift_score(source: &Moments, target: &Moments) -> ShiftScore {
    let ratio = if source.var > 0.0 { target.var / source.var } else { 1.0 };
    let st = gaussian_kl(source, target);
    let ts = gaussian_kl(target, source);
    ShiftScore {
        moment_gap: (ratio - 1.0).abs() + (target.mean - source.mean).abs(),
        kl_source_target: st,
        kl_target_source: ts,
        symmetric_kl: st + ts,
    }
}

/// Post-affine output distribution of one BN layer on two domains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnProbe {
    pub layer: usize,
    pub source: Moments,
    pub target: Moments,
    pub shift: ShiftScore,
}

/// Eval-mode outputs of BN layer `layer` for one batch, flattened.
pub fn bn_layer_output(model: &ModelBundle, layer: usize, batch: &[Tensor]) -> Result<Vec<Float>> {
    let layers = model.bn_layers().len();
    if layer >= layers {
        return Err(Error::Config(format!("unknown BN layer {layer}: the model has {layers} (0-based)")));
    }
    let refs: Vec<&Tensor> = batch.iter().collect();
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::stack(&refs)?);
    let out = model.forward_eval(&mut tape, &mut Binder::frozen(), x)?;
    Ok(tape.value(out.bn_outputs[layer]).data().to_vec())
}

pub fn probe_moments(model: &ModelBundle, layer: usize, batches: &[Vec<Tensor>]) -> Result<Moments> {
    let mut m = Moments::default();
    for b in batches {
        m.extend(&bn_layer_output(model, layer, b)?);
    }
    Ok(m)
}

/// Compare the layer's output distribution on source and target batches.
pub fn bn_shift_probe(
    model: &ModelBundle,
    layer: usize,
    source: &[Vec<Tensor>],
    target: &[Vec<Tensor>],
) -> Result<BnProbe> {
    if source.len() != target.len() || source.is_empty() {
        return Err(Error::contract(
            "bn_shift_probe",
            format!("need the same non-zero batch count per domain (got {} and {})", source.len(), target.len()),
        ));
    }
    let s = probe_moments(model, layer, source)?;
    let t = probe_moments(model, layer, target)?;
    Ok(BnProbe {
        layer,
        source: s,
        target: t,
        shift: shift_score(&s, &t),
    })
}

/// Fixed-bin histogram of values over `[lo, hi)`; values outside are
/// clamped into the edge bins.
pub fn histogram(values: &[Float], lo: Float, hi: Float, bins: usize) -> Vec<usize> {
    let mut counts = alloc::vec![0usize; bins];
    if bins == 0 || !(hi > lo) {
        return counts;
    }
    let width = (hi - lo) / math::from_usize(bins);
    for v in values {
        let k = math::floor((v - lo) / width);
        let k = if k < 0.0 { 0 } else { (k as usize).min(bins - 1) };
        counts[k] += 1;
    }
    counts
}

/// Headline numbers of one evaluation run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub rank1: Float,
    pub rank5: Float,
    pub rank10: Float,
    pub map: Float,
}

impl From<&Retrieval> for RunMetrics {
    fn from(r: &Retrieval) -> Self {
        RunMetrics {
            rank1: r.rank(1),
            rank5: r.rank(5),
            rank10: r.rank(10),
            map: r.map,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: Float,
    /// Population standard deviation.
    pub std: Float,
}

impl MeanStd {
    pub fn of(values: &[Float]) -> Self {
        let m = Moments::of(values);
        MeanStd {
            mean: m.mean,
            std: math::sqrt(m.var),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub splits: usize,
    pub rank1: MeanStd,
    pub rank5: MeanStd,
    pub rank10: MeanStd,
    pub map: MeanStd,
}

pub fn average_over_splits(runs: &[RunMetrics], splits: usize) -> Result<SplitSummary> {
    if runs.len() != splits || splits == 0 {
        return Err(Error::contract(
            "average_over_splits",
            format!("expected {splits} split results, got {}", runs.len()),
        ));
    }
    let col = |f: fn(&RunMetrics) -> Float| MeanStd::of(&runs.iter().map(f).collect::<Vec<_>>());
    Ok(SplitSummary {
        splits,
        rank1: col(|r| r.rank1),
        rank5: col(|r| r.rank5),
        rank10: col(|r| r.rank10),
        map: col(|r| r.map),
    })
}
