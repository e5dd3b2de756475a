use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{Binder, Param, ParamGroup};
use crate::error::{Error, Result};
use crate::math::{self, Float};
use crate::tape::{Backward, Tape, Var};
use crate::tensor::Tensor;

/// How a batch-norm layer treats statistics on the forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    /// Batch statistics, differentiated through; running statistics updated.
    Train,
    /// Running statistics only; nothing is mutated.
    #[default]
    Eval,
    /// Batch statistics treated as constants; running statistics updated.
    TtaStats,
}

/// Which running statistics a [`BnMode::TtaStats`] pass re-estimates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsSelection {
    pub mean: bool,
    pub var: bool,
}

impl StatsSelection {
    pub const BOTH: StatsSelection = StatsSelection {
        mean: true,
        var: true,
    };
    pub const NONE: StatsSelection = StatsSelection {
        mean: false,
        var: false,
    };

    pub fn any(self) -> bool {
        self.mean || self.var
    }
}

impl Default for StatsSelection {
    fn default() -> Self {
        Self::BOTH
    }
}

/// Per-channel batch mean and biased variance.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<Float>,
    pub var: Vec<Float>,
}

/// `(batch, channels, spatial)` of a `[B, C]` or `[B, C, H, W]` input.
fn layout(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [b, c] => Ok((*b, *c, 1)),
        [b, c, h, w] => Ok((*b, *c, h * w)),
        _ => Err(Error::contract(
            op,
            format!("expected a [B, C] or [B, C, H, W] input, got {shape:?}"),
        )),
    }
}

/// Mean and biased variance of every channel over batch and spatial positions.
pub fn channel_stats(x: &Tensor) -> Result<BatchStats> {
    let (b, c, s) = layout("channel_stats", x.shape())?;
    let n = math::from_usize(b * s);
    let d = x.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut sum = 0.0;
        for bi in 0..b {
            sum += d[(bi * c + ch) * s..][..s].iter().sum::<Float>();
        }
        let m = sum / n;
        let mut acc = 0.0;
        for bi in 0..b {
            acc += d[(bi * c + ch) * s..][..s]
                .iter()
                .map(|v| (v - m) * (v - m))
                .sum::<Float>();
        }
        mean[ch] = m;
        var[ch] = acc / n;
    }
    Ok(BatchStats { mean, var })
}

/// Backward of `y = gamma * (x - m) * inv + beta` for normalization groups
/// whose statistics were computed from the group itself.
fn normalized_input_grad<'a>(g: &'a [Float], xhat: &'a [Float], gamma: Float, inv: Float) -> impl Iterator<Item = Float> + 'a {
    let n = math::from_usize(g.len());
    let sum_g: Float = g.iter().sum();
    let sum_gx: Float = g.iter().zip(xhat).map(|(a, b)| a * b).sum();
    g.iter()
        .zip(xhat)
        .map(move |(gi, xi)| gamma * inv / n * (n * gi - sum_g - xi * sum_gx))
}

struct BnTrainRule {
    xhat: Vec<Float>,
    inv: Vec<Float>,
    dims: (usize, usize, usize),
}

impl Backward for BnTrainRule {
    fn backward(
        &self,
        g: &[Float],
        inputs: &[&Tensor],
        _output: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Vec<Float>>> {
        let (b, c, s) = self.dims;
        let gamma = inputs[1].data();
        let mut gx = needs[0].then(|| vec![0.0; g.len()]);
        let mut gg = vec![0.0; c];
        let mut gb = vec![0.0; c];
        let mut gch = Vec::with_capacity(b * s);
        let mut xch = Vec::with_capacity(b * s);
        for ch in 0..c {
            gch.clear();
            xch.clear();
            for bi in 0..b {
                let at = (bi * c + ch) * s;
                gch.extend_from_slice(&g[at..at + s]);
                xch.extend_from_slice(&self.xhat[at..at + s]);
            }
            gg[ch] = gch.iter().zip(&xch).map(|(a, b)| a * b).sum();
            gb[ch] = gch.iter().sum();
            if let Some(gx) = gx.as_mut() {
                let mut it = normalized_input_grad(&gch, &xch, gamma[ch], self.inv[ch]);
                for bi in 0..b {
                    let at = (bi * c + ch) * s;
                    for v in &mut gx[at..at + s] {
                        *v = it.next().unwrap_or(0.0);
                    }
                }
            }
        }
        vec![gx, needs[1].then_some(gg), needs[2].then_some(gb)]
    }
}

/// Batch normalization with statistics of the batch itself; the backward
/// pass differentiates through the batch mean and variance.
pub fn batch_norm_train(tape: &mut Tape, x: Var, gamma: Var, beta: Var, eps: Float) -> Result<(Var, BatchStats)> {
    let shape = tape.shape(x).to_vec();
    let (b, c, s) = layout("batch_norm", &shape)?;
    if b * s < 2 {
        return Err(Error::contract(
            "batch_norm",
            "batch statistics need at least two values per channel",
        ));
    }
    check_affine(tape, gamma, beta, c)?;
    let stats = channel_stats(tape.value(x))?;
    let inv: Vec<Float> = stats.var.iter().map(|v| 1.0 / math::sqrt(v + eps)).collect();
    let (xd, gd, bd) = (tape.value(x).data(), tape.value(gamma).data(), tape.value(beta).data());
    let mut xhat = vec![0.0; xd.len()];
    let mut y = vec![0.0; xd.len()];
    for bi in 0..b {
        for ch in 0..c {
            let at = (bi * c + ch) * s;
            for i in at..at + s {
                xhat[i] = (xd[i] - stats.mean[ch]) * inv[ch];
                y[i] = gd[ch] * xhat[i] + bd[ch];
            }
        }
    }
    let value = Tensor::from_parts(shape, y);
    let rule = BnTrainRule {
        xhat,
        inv,
        dims: (b, c, s),
    };
    Ok((tape.push(&[x, gamma, beta], value, Box::new(rule)), stats))
}

fn check_affine(tape: &Tape, gamma: Var, beta: Var, c: usize) -> Result<()> {
    for v in [gamma, beta] {
        if tape.shape(v) != [c] {
            return Err(Error::shape("batch_norm affine", tape.shape(v), &[c]));
        }
    }
    Ok(())
}

struct BnFixedRule {
    dims: (usize, usize, usize),
    eps: Float,
}

impl Backward for BnFixedRule {
    fn backward(
        &self,
        g: &[Float],
        inputs: &[&Tensor],
        _output: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Vec<Float>>> {
        let (b, c, s) = self.dims;
        let (x, gamma) = (inputs[0].data(), inputs[1].data());
        let (mean, var) = (inputs[3].data(), inputs[4].data());
        let inv: Vec<Float> = var.iter().map(|v| 1.0 / math::sqrt(v + self.eps)).collect();
        let mut gx = needs[0].then(|| vec![0.0; g.len()]);
        let mut gg = vec![0.0; c];
        let mut gb = vec![0.0; c];
        let mut gm = vec![0.0; c];
        let mut gv = vec![0.0; c];
        for bi in 0..b {
            for ch in 0..c {
                let at = (bi * c + ch) * s;
                for i in at..at + s {
                    let centered = x[i] - mean[ch];
                    gg[ch] += g[i] * centered * inv[ch];
                    gb[ch] += g[i];
                    gm[ch] -= g[i] * gamma[ch] * inv[ch];
                    gv[ch] -= 0.5 * g[i] * gamma[ch] * centered * inv[ch] * inv[ch] * inv[ch];
                    if let Some(gx) = gx.as_mut() {
                        gx[i] = g[i] * gamma[ch] * inv[ch];
                    }
                }
            }
        }
        vec![
            gx,
            needs[1].then_some(gg),
            needs[2].then_some(gb),
            needs[3].then_some(gm),
            needs[4].then_some(gv),
        ]
    }
}

/// Batch normalization with externally supplied statistics. The statistics
/// are ordinary inputs: constants in evaluation and statistics-re-estimation
/// passes, gradient-tracked leaves when they are optimized directly.
pub fn batch_norm_with_stats(
    tape: &mut Tape,
    x: Var,
    gamma: Var,
    beta: Var,
    mean: Var,
    var: Var,
    eps: Float,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let (b, c, s) = layout("batch_norm", &shape)?;
    check_affine(tape, gamma, beta, c)?;
    check_affine(tape, mean, var, c)?;
    let (xd, gd, bd) = (tape.value(x).data(), tape.value(gamma).data(), tape.value(beta).data());
    let (md, vd) = (tape.value(mean).data(), tape.value(var).data());
    if let Some(v) = vd.iter().find(|v| **v + eps <= 0.0) {
        return Err(Error::domain("batch_norm", format!("variance {v} plus eps is not positive")));
    }
    let mut y = vec![0.0; xd.len()];
    for bi in 0..b {
        for ch in 0..c {
            let inv = 1.0 / math::sqrt(vd[ch] + eps);
            let at = (bi * c + ch) * s;
            for i in at..at + s {
                y[i] = gd[ch] * (xd[i] - md[ch]) * inv + bd[ch];
            }
        }
    }
    let value = Tensor::from_parts(shape, y);
    let rule = BnFixedRule {
        dims: (b, c, s),
        eps,
    };
    Ok(tape.push(&[x, gamma, beta, mean, var], value, Box::new(rule)))
}

/// Everything a batch-norm layer owns.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub running_mu: Param,
    pub running_var: Param,
    pub gamma: Param,
    pub beta: Param,
    pub eps: Float,
    pub momentum: Float,
    pub mode: BnMode,
    /// Statistics re-estimated in [`BnMode::TtaStats`].
    pub tta_update: StatsSelection,
}

/// Batch normalization over channel axis 1.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm2d {
    pub state: BatchNormState,
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize, eps: Float, momentum: Float) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) || eps < 0.0 {
            return Err(Error::Config(format!(
                "{name}: momentum must lie in [0, 1] and eps must be non-negative"
            )));
        }
        Ok(BatchNorm2d {
            state: BatchNormState {
                running_mu: Param::new(format!("{name}.running_mu"), ParamGroup::BnMu, Tensor::zeros(&[channels])),
                running_var: Param::new(format!("{name}.running_var"), ParamGroup::BnSigma2, Tensor::ones(&[channels])),
                gamma: Param::new(format!("{name}.gamma"), ParamGroup::BnGamma, Tensor::ones(&[channels])),
                beta: Param::new(format!("{name}.beta"), ParamGroup::BnBeta, Tensor::zeros(&[channels])),
                eps,
                momentum,
                mode: BnMode::Eval,
                tta_update: StatsSelection::BOTH,
            },
        })
    }

    pub fn channels(&self) -> usize {
        self.state.gamma.value.numel()
    }

    /// Forward pass in the layer's current mode. Returns the statistics the
    /// running averages should absorb, if the mode updates them; nothing is
    /// mutated here (see [`BatchNorm2d::commit`]).
    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, x: Var) -> Result<(Var, Option<BatchStats>)> {
        self.forward_in(self.state.mode, tape, binder, x)
    }

    /// Forward pass in an explicit mode, ignoring the stored one.
    pub fn forward_in(
        &self,
        mode: BnMode,
        tape: &mut Tape,
        binder: &mut Binder,
        x: Var,
    ) -> Result<(Var, Option<BatchStats>)> {
        let st = &self.state;
        let gamma = binder.bind(tape, &st.gamma);
        let beta = binder.bind(tape, &st.beta);
        match mode {
            BnMode::Train => {
                let (y, stats) = batch_norm_train(tape, x, gamma, beta, st.eps)?;
                Ok((y, Some(stats)))
            }
            BnMode::TtaStats => {
                let (b, _, s) = layout("batch_norm", tape.shape(x))?;
                if b * s < 2 {
                    return Err(Error::contract(
                        "batch_norm",
                        "batch statistics need at least two values per channel",
                    ));
                }
                let stats = channel_stats(tape.value(x))?;
                let sel = st.tta_update;
                let pick = |on: bool, batch: &[Float], running: &Param| {
                    if on {
                        Tensor::from_parts(running.value.shape().to_vec(), batch.to_vec())
                    } else {
                        running.value.clone()
                    }
                };
                let mean = tape.constant(pick(sel.mean, &stats.mean, &st.running_mu));
                let var = tape.constant(pick(sel.var, &stats.var, &st.running_var));
                let y = batch_norm_with_stats(tape, x, gamma, beta, mean, var, st.eps)?;
                Ok((y, Some(stats)))
            }
            BnMode::Eval => {
                let mean = binder.bind(tape, &st.running_mu);
                let var = binder.bind(tape, &st.running_var);
                Ok((batch_norm_with_stats(tape, x, gamma, beta, mean, var, st.eps)?, None))
            }
        }
    }

    /// Blend batch statistics into the running averages:
    /// `running <- (1 - momentum) * running + momentum * batch`.
    pub fn commit(&mut self, stats: &BatchStats) {
        let st = &mut self.state;
        let (upd_mean, upd_var) = match st.mode {
            BnMode::Train => (true, true),
            BnMode::TtaStats => (st.tta_update.mean, st.tta_update.var),
            BnMode::Eval => (false, false),
        };
        let m = st.momentum;
        if upd_mean {
            for (r, b) in st.running_mu.value.data_mut().iter_mut().zip(&stats.mean) {
                *r = (1.0 - m) * *r + m * b;
            }
        }
        if upd_var {
            for (r, b) in st.running_var.value.data_mut().iter_mut().zip(&stats.var) {
                *r = ((1.0 - m) * *r + m * b).max(0.0);
            }
        }
    }

    pub fn params(&self) -> impl Iterator<Item = &Param> {
        let st = &self.state;
        [&st.gamma, &st.beta, &st.running_mu, &st.running_var].into_iter()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        let st = &mut self.state;
        [&mut st.gamma, &mut st.beta, &mut st.running_mu, &mut st.running_var].into_iter()
    }
}

struct InRule {
    xhat: Vec<Float>,
    inv: Vec<Float>,
    dims: (usize, usize, usize),
    affine: bool,
}

impl Backward for InRule {
    fn backward(
        &self,
        g: &[Float],
        inputs: &[&Tensor],
        _output: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Vec<Float>>> {
        let (b, c, s) = self.dims;
        let gamma = if self.affine { Some(inputs[1].data()) } else { None };
        let mut gx = needs[0].then(|| vec![0.0; g.len()]);
        let mut gg = vec![0.0; c];
        let mut gb = vec![0.0; c];
        for bi in 0..b {
            for ch in 0..c {
                let at = (bi * c + ch) * s;
                let (gs, xs) = (&g[at..at + s], &self.xhat[at..at + s]);
                gg[ch] += gs.iter().zip(xs).map(|(a, b)| a * b).sum::<Float>();
                gb[ch] += gs.iter().sum::<Float>();
                if let Some(gx) = gx.as_mut() {
                    let scale = gamma.map_or(1.0, |gm| gm[ch]);
                    let group = bi * c + ch;
                    for (dst, v) in gx[at..at + s]
                        .iter_mut()
                        .zip(normalized_input_grad(gs, xs, scale, self.inv[group]))
                    {
                        *dst = v;
                    }
                }
            }
        }
        let mut out = vec![gx];
        if self.affine {
            out.push(needs[1].then_some(gg));
            out.push(needs[2].then_some(gb));
        }
        out
    }
}

/// Per-sample, per-channel normalization over the spatial positions.
pub fn instance_norm(tape: &mut Tape, x: Var, affine: Option<(Var, Var)>, eps: Float) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let [b, c, h, w] = shape[..] else {
        return Err(Error::contract("instance_norm", format!("expected [B, C, H, W], got {shape:?}")));
    };
    let s = h * w;
    if s < 2 {
        return Err(Error::contract(
            "instance_norm",
            "instance statistics need at least two spatial positions",
        ));
    }
    if let Some((g, bt)) = affine {
        check_affine(tape, g, bt, c)?;
    }
    let xd = tape.value(x).data();
    let n = math::from_usize(s);
    let mut xhat = vec![0.0; xd.len()];
    let mut inv = vec![0.0; b * c];
    for group in 0..b * c {
        let xs = &xd[group * s..][..s];
        let m = xs.iter().sum::<Float>() / n;
        let v = xs.iter().map(|v| (v - m) * (v - m)).sum::<Float>() / n;
        inv[group] = 1.0 / math::sqrt(v + eps);
        for (dst, xv) in xhat[group * s..][..s].iter_mut().zip(xs) {
            *dst = (xv - m) * inv[group];
        }
    }
    let mut y = xhat.clone();
    if let Some((g, bt)) = affine {
        let (gd, bd) = (tape.value(g).data(), tape.value(bt).data());
        for group in 0..b * c {
            let ch = group % c;
            y[group * s..][..s].iter_mut().for_each(|v| *v = gd[ch] * *v + bd[ch]);
        }
    }
    let value = Tensor::from_parts(shape, y);
    let rule = InRule {
        xhat,
        inv,
        dims: (b, c, s),
        affine: affine.is_some(),
    };
    let inputs: Vec<Var> = match affine {
        Some((g, bt)) => vec![x, g, bt],
        None => vec![x],
    };
    Ok(tape.push(&inputs, value, Box::new(rule)))
}

/// Instance normalization settings and optional affine parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceNormState {
    pub eps: Float,
    pub gamma: Option<Param>,
    pub beta: Option<Param>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceNorm2d {
    pub state: InstanceNormState,
}

impl InstanceNorm2d {
    pub fn new(name: &str, channels: usize, eps: Float, affine: bool) -> Self {
        InstanceNorm2d {
            state: InstanceNormState {
                eps,
                gamma: affine.then(|| Param::new(format!("{name}.gamma"), ParamGroup::In, Tensor::ones(&[channels]))),
                beta: affine.then(|| Param::new(format!("{name}.beta"), ParamGroup::In, Tensor::zeros(&[channels]))),
            },
        }
    }

    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, x: Var) -> Result<Var> {
        let affine = match (&self.state.gamma, &self.state.beta) {
            (Some(g), Some(b)) => Some((binder.bind(tape, g), binder.bind(tape, b))),
            _ => None,
        };
        instance_norm(tape, x, affine, self.state.eps)
    }

    pub fn params(&self) -> impl Iterator<Item = &Param> {
        self.state.gamma.iter().chain(self.state.beta.iter())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.state.gamma.iter_mut().chain(self.state.beta.iter_mut())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bn_on(values: &[Float], shape: &[usize], gamma: Float, beta: Float, eps: Float, mode: BnMode) -> (Vec<Float>, BatchNorm2d) {
        let c = shape[1];
        let mut layer = BatchNorm2d::new("bn", c, eps, 0.1).unwrap();
        layer.state.gamma.value = Tensor::full(&[c], gamma);
        layer.state.beta.value = Tensor::full(&[c], beta);
        layer.state.mode = mode;
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(shape, values.to_vec()).unwrap());
        let (y, stats) = layer.forward(&mut tape, &mut Binder::frozen(), x).unwrap();
        let out = tape.value(y).data().to_vec();
        if let Some(s) = stats {
            layer.commit(&s);
        }
        (out, layer)
    }

    #[test]
    fn constant_batch_maps_to_beta() {
        let (y, _) = bn_on(&[3.0; 8], &[2, 1, 2, 2], 2.0, 0.5, 1e-5, BnMode::Train);
        assert!(y.iter().all(|v| (*v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn hand_evaluated_normalization() {
        let (y, layer) = bn_on(&[1.0, 2.0, 3.0, 4.0], &[4, 1, 1, 1], 1.0, 0.0, 0.0, BnMode::Train);
        let sd = math::sqrt(1.25);
        for (v, x) in y.iter().zip([1.0, 2.0, 3.0, 4.0]) {
            assert!((v - (x - 2.5) / sd).abs() < 1e-12);
        }
        // running <- 0.9 * init + 0.1 * batch
        assert!((layer.state.running_mu.value.data()[0] - 0.25).abs() < 1e-12);
        assert!((layer.state.running_var.value.data()[0] - (0.9 + 0.125)).abs() < 1e-12);
    }

    #[test]
    fn eval_with_unit_stats_is_identity_and_pure() {
        let xs = [0.3, -1.2, 4.0, 2.5];
        let (y, layer) = bn_on(&xs, &[4, 1, 1, 1], 1.0, 0.0, 0.0, BnMode::Eval);
        assert_eq!(y, xs);
        let fresh = BatchNorm2d::new("bn", 1, 0.0, 0.1).unwrap();
        assert_eq!(layer.state.running_mu, fresh.state.running_mu);
        assert_eq!(layer.state.running_var, fresh.state.running_var);
    }

    #[test]
    fn single_value_batch_is_rejected() {
        let mut layer = BatchNorm2d::new("bn", 1, 1e-5, 0.1).unwrap();
        for mode in [BnMode::Train, BnMode::TtaStats] {
            layer.state.mode = mode;
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::ones(&[1, 1, 1, 1]));
            assert!(matches!(
                layer.forward(&mut tape, &mut Binder::frozen(), x),
                Err(Error::Contract { .. })
            ));
        }
    }

    #[test]
    fn tta_stats_partial_selection_only_touches_selected_stat() {
        let mut layer = BatchNorm2d::new("bn", 1, 1e-5, 0.5).unwrap();
        layer.state.mode = BnMode::TtaStats;
        layer.state.tta_update = StatsSelection { mean: true, var: false };
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[4, 1], [1.0, 3.0, 5.0, 7.0].to_vec()).unwrap());
        let (_, stats) = layer.forward(&mut tape, &mut Binder::frozen(), x).unwrap();
        layer.commit(&stats.unwrap());
        assert_eq!(layer.state.running_mu.value.data(), &[2.0]);
        assert_eq!(layer.state.running_var.value.data(), &[1.0]);
    }

    #[test]
    fn instance_norm_two_values() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 1, 1, 2], [1.0, 3.0].to_vec()).unwrap());
        let y = instance_norm(&mut tape, x, None, 1e-5).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] + 1.0).abs() < 1e-4 && (d[1] - 1.0).abs() < 1e-4);
        let x0 = tape.constant(Tensor::new(&[1, 1, 1, 2], [1.0, 3.0].to_vec()).unwrap());
        let y0 = instance_norm(&mut tape, x0, None, 0.0).unwrap();
        assert_eq!(tape.value(y0).data(), &[-1.0, 1.0]);
    }

    #[test]
    fn instance_norm_constant_map_and_small_maps() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 2, 2, 2], 4.0));
        let g = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::full(&[2], 0.25));
        let y = instance_norm(&mut tape, x, Some((g, b)), 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|v| *v == 0.25));
        let tiny = tape.constant(Tensor::ones(&[1, 1, 1, 1]));
        assert!(matches!(instance_norm(&mut tape, tiny, None, 1e-5), Err(Error::Contract { .. })));
    }
}
