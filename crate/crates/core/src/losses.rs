//! Training and adaptation losses.
//!
//! Cross-entropy terms are averaged over the batch; the per-stripe terms sum
//! over stripes first. Hinge terms are averaged over anchors.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, Float};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Loss weights and margins.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the positioning loss during training.
    pub lambda1: Float,
    /// Weight of the training matching loss.
    pub lambda2: Float,
    /// Weight of the adaptation matching loss.
    pub lambda3: Float,
    /// Margin of the adaptation matching hinge.
    pub phi: Float,
    /// Margin of the identity triplet hinge.
    pub phi_tri: Float,
    pub use_fsl_triplet: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 0.1,
            lambda2: 0.1,
            lambda3: 1.0,
            phi: 0.3,
            phi_tri: 0.3,
            use_fsl_triplet: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.lambda3, self.phi, self.phi_tri];
        if all.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config(format!(
                "loss weights and margins must be finite and non-negative: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Mean over rows of `-log softmax(logits)[label]`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::shape("cross_entropy", &shape, &[labels.len()]));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= shape[1]) {
        return Err(Error::contract(
            "cross_entropy",
            format!("label {bad} out of range for {} classes", shape[1]),
        ));
    }
    let logp = tape.log_softmax(logits, 1)?;
    let picked = tape.pick(logp, labels)?;
    let mean = tape.mean_all(picked)?;
    Ok(tape.neg(mean))
}

/// Identity classification loss on `[B, M]` logits.
pub fn loss_id(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    cross_entropy(tape, logits, labels)
}

/// Positioning loss on `[(B·H), H]` logits whose rows are ordered
/// sample-major, stripe-minor. Summed over stripes, averaged over samples.
pub fn loss_pos(tape: &mut Tape, logits_pos: Var) -> Result<Var> {
    let shape = tape.shape(logits_pos).to_vec();
    let [rows, stripes] = shape[..] else {
        return Err(Error::contract("loss_pos", "expected [(B*H), H] logits"));
    };
    if stripes == 0 || rows % stripes != 0 {
        return Err(Error::shape("loss_pos", &shape, &[stripes]));
    }
    let labels: Vec<usize> = (0..rows).map(|r| r % stripes).collect();
    let ce = cross_entropy(tape, logits_pos, &labels)?;
    Ok(tape.scalar_mul(ce, math::from_usize(stripes)))
}

/// Training matching loss on `[B, H, M]` per-stripe logits: every stripe
/// predicts the identity of its image.
pub fn loss_mat_train(tape: &mut Tape, logits_mat: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits_mat).to_vec();
    let [b, h, m] = shape[..] else {
        return Err(Error::contract("loss_mat_train", "expected [B, H, M] logits"));
    };
    if b != labels.len() {
        return Err(Error::shape("loss_mat_train", &shape, &[labels.len()]));
    }
    let flat = tape.reshape(logits_mat, &[b * h, m])?;
    let rows: Vec<usize> = labels.iter().flat_map(|&l| core::iter::repeat_n(l, h)).collect();
    let ce = cross_entropy(tape, flat, &rows)?;
    Ok(tape.scalar_mul(ce, math::from_usize(h)))
}

const MASK: Float = 1.0e6;

fn zero(tape: &mut Tape) -> Var {
    tape.constant(Tensor::scalar(0.0))
}

/// Batch-hard triplet loss on `[B, C]` features: for every anchor with at
/// least one positive and one negative, hinge on its farthest positive and
/// closest negative. Averaged over those anchors; zero (with a warning) when
/// the batch has none.
pub fn loss_triplet_fsl(tape: &mut Tape, features: Var, labels: &[usize], margin: Float) -> Result<Var> {
    let shape = tape.shape(features).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::shape("loss_triplet_fsl", &shape, &[labels.len()]));
    }
    let b = labels.len();
    let valid: Vec<usize> = (0..b)
        .filter(|&i| {
            let pos = (0..b).any(|j| j != i && labels[j] == labels[i]);
            let neg = labels.iter().any(|&l| l != labels[i]);
            pos && neg
        })
        .collect();
    if valid.is_empty() {
        log::warn!("triplet loss: batch holds no valid triplet, contributing zero");
        return Ok(zero(tape));
    }
    let left: Vec<usize> = valid.iter().flat_map(|&i| core::iter::repeat_n(i, b)).collect();
    let right: Vec<usize> = valid.iter().flat_map(|_| 0..b).collect();
    let a = tape.index_select(features, &left)?;
    let o = tape.index_select(features, &right)?;
    let d = tape.euclidean_distance(a, o)?;
    let d = tape.reshape(d, &[valid.len(), b])?;

    let mut pos_mask = Vec::with_capacity(valid.len() * b);
    let mut neg_mask = Vec::with_capacity(valid.len() * b);
    for &i in &valid {
        for j in 0..b {
            let positive = j != i && labels[j] == labels[i];
            pos_mask.push(if positive { 0.0 } else { -MASK });
            neg_mask.push(if labels[j] != labels[i] { 0.0 } else { MASK });
        }
    }
    let pm = tape.constant(Tensor::new(&[valid.len(), b], pos_mask)?);
    let nm = tape.constant(Tensor::new(&[valid.len(), b], neg_mask)?);
    let dp = tape.add(d, pm)?;
    let hardest_pos = tape.max(dp, 1)?;
    let dn = tape.add(d, nm)?;
    let hardest_neg = tape.min(dn, 1)?;
    hinge_mean(tape, hardest_pos, hardest_neg, margin)
}

fn hinge_mean(tape: &mut Tape, pos: Var, neg: Var, margin: Float) -> Result<Var> {
    let gap = tape.sub(pos, neg)?;
    let shifted = tape.add_scalar(gap, margin);
    let h = tape.relu(shifted);
    tape.mean_all(h)
}

/// One adaptation pair inside a mini-batch: image indices `a`, `b` and the
/// stripe `part` whose embeddings are matched.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchPair {
    pub a: usize,
    pub b: usize,
    pub part: usize,
}

/// Adaptation matching loss on `[B, H, C_l]` part embeddings. For every
/// pair the partner's part-`n` embedding is the positive and the closest
/// part-`n` embedding among all other images of the batch is the negative.
/// With `symmetric`, both pair members act as anchors.
pub fn loss_mat_tta(
    tape: &mut Tape,
    embeddings: Var,
    pairs: &[BatchPair],
    margin: Float,
    symmetric: bool,
) -> Result<Var> {
    let shape = tape.shape(embeddings).to_vec();
    let [b, h, cl] = shape[..] else {
        return Err(Error::contract("loss_mat_tta", "expected [B, H, C_l] embeddings"));
    };
    if pairs.len() < 2 {
        return Err(Error::contract(
            "loss_mat_tta",
            format!("need at least two pairs to have negatives, got {}", pairs.len()),
        ));
    }
    for p in pairs {
        if p.a >= b || p.b >= b || p.part >= h || p.a == p.b {
            return Err(Error::contract("loss_mat_tta", format!("invalid pair {p:?}")));
        }
    }
    let mut anchors = Vec::new();
    for p in pairs {
        anchors.push((p.a, p.b, p.part));
        if symmetric {
            anchors.push((p.b, p.a, p.part));
        }
    }
    let negatives = b - 2;
    if negatives == 0 {
        return Err(Error::contract("loss_mat_tta", "batch has no negative images"));
    }
    let flat = tape.reshape(embeddings, &[b * h, cl])?;
    let row = |img: usize, part: usize| img * h + part;
    let anchor_rows: Vec<usize> = anchors.iter().map(|&(a, _, n)| row(a, n)).collect();
    let pos_rows: Vec<usize> = anchors.iter().map(|&(_, p, n)| row(p, n)).collect();
    let mut rep_rows = Vec::with_capacity(anchors.len() * negatives);
    let mut neg_rows = Vec::with_capacity(anchors.len() * negatives);
    for &(a, p, n) in &anchors {
        for j in (0..b).filter(|&j| j != a && j != p) {
            rep_rows.push(row(a, n));
            neg_rows.push(row(j, n));
        }
    }
    let fa = tape.index_select(flat, &anchor_rows)?;
    let fp = tape.index_select(flat, &pos_rows)?;
    let dpos = tape.euclidean_distance(fa, fp)?;
    let fr = tape.index_select(flat, &rep_rows)?;
    let fn_ = tape.index_select(flat, &neg_rows)?;
    let dneg = tape.euclidean_distance(fr, fn_)?;
    let dneg = tape.reshape(dneg, &[anchors.len(), negatives])?;
    let hardest = tape.min(dneg, 1)?;
    hinge_mean(tape, dpos, hardest, margin)
}

/// Which terms enter the training objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSet {
    pub id: bool,
    pub pos: bool,
    pub mat: bool,
}

impl LossSet {
    pub const ALL: LossSet = LossSet {
        id: true,
        pos: true,
        mat: true,
    };
    pub const FSL_ONLY: LossSet = LossSet {
        id: true,
        pos: false,
        mat: false,
    };

    pub fn is_empty(&self) -> bool {
        !(self.id || self.pos || self.mat)
    }

    pub fn label(&self) -> alloc::string::String {
        let mut parts = Vec::new();
        if self.id {
            parts.push("id");
        }
        if self.pos {
            parts.push("pos");
        }
        if self.mat {
            parts.push("mat");
        }
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }
}

impl Default for LossSet {
    fn default() -> Self {
        Self::ALL
    }
}

/// Individual training terms of one step; absent terms are skipped.
#[derive(Clone, Copy, Debug, Default)]
pub struct TrainTerms {
    pub id: Option<Var>,
    pub pos: Option<Var>,
    pub mat: Option<Var>,
    pub triplet: Option<Var>,
}

fn weighted_sum(tape: &mut Tape, terms: &[(Option<Var>, Float)]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &(term, w) in terms {
        let Some(t) = term else { continue };
        let scaled = if w == 1.0 { t } else { tape.scalar_mul(t, w) };
        total = Some(match total {
            Some(acc) => tape.add(acc, scaled)?,
            None => scaled,
        });
    }
    Ok(total.unwrap_or_else(|| zero(tape)))
}

/// `L_id + λ1·L_pos + λ2·L_mat`, plus the triplet term when enabled.
pub fn loss_train_total(tape: &mut Tape, terms: &TrainTerms, w: &LossWeights) -> Result<Var> {
    let triplet = if w.use_fsl_triplet { terms.triplet } else { None };
    weighted_sum(
        tape,
        &[
            (terms.id, 1.0),
            (terms.pos, w.lambda1),
            (terms.mat, w.lambda2),
            (triplet, 1.0),
        ],
    )
}

/// `L_pos + λ3·L_mat^tta`.
pub fn loss_tta_total(tape: &mut Tape, pos: Option<Var>, mat: Option<Var>, w: &LossWeights) -> Result<Var> {
    weighted_sum(tape, &[(pos, 1.0), (mat, w.lambda3)])
}
