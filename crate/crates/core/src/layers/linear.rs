use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Binder, Param, ParamGroup};
use crate::error::{Error, Result};
use crate::linalg::gemm;
use crate::math::{self, Float};
use crate::tape::{Backward, Tape, Var};
use crate::tensor::Tensor;

struct LinearRule {
    batch: usize,
    inp: usize,
    out: usize,
}

impl Backward for LinearRule {
    fn backward(
        &self,
        g: &[Float],
        inputs: &[&Tensor],
        _output: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Vec<Float>>> {
        let (b, d, o) = (self.batch, self.inp, self.out);
        let (x, w) = (inputs[0].data(), inputs[1].data());
        let gx = needs[0].then(|| {
            let mut gx = vec![0.0; b * d];
            gemm(b, o, d, g, false, w, false, &mut gx, false);
            gx
        });
        let gw = needs[1].then(|| {
            let mut gw = vec![0.0; o * d];
            gemm(o, b, d, g, true, x, false, &mut gw, false);
            gw
        });
        let gb = needs[2].then(|| {
            let mut gb = vec![0.0; o];
            for row in g.chunks(o) {
                gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
            }
            gb
        });
        vec![gx, gw, gb]
    }
}

/// `y = x · weightᵀ + bias` with `x: [B, D]`, `weight: [D', D]`, `bias: [D']`.
pub fn linear(tape: &mut Tape, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let (xs, ws, bs) = (tape.shape(x), tape.shape(weight), tape.shape(bias));
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bs != [ws[0]] {
        return Err(Error::shape("linear", xs, ws));
    }
    let (b, d, o) = (xs[0], xs[1], ws[0]);
    let mut y = vec![0.0; b * o];
    gemm(b, d, o, tape.value(x).data(), false, tape.value(weight).data(), true, &mut y, false);
    let bd = tape.value(bias).data();
    for row in y.chunks_mut(o) {
        row.iter_mut().zip(bd).for_each(|(v, bias)| *v += bias);
    }
    let value = Tensor::from_parts(vec![b, o], y);
    Ok(tape.push(&[x, weight, bias], value, Box::new(LinearRule { batch: b, inp: d, out: o })))
}

/// Fully-connected layer. The softmax belongs to the loss.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        group: ParamGroup,
        inputs: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let std = math::sqrt(1.0 / math::from_usize(inputs.max(1)));
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(format!("{e}")))?;
        let data: Vec<Float> = (0..inputs * outputs).map(|_| normal.sample(rng)).collect();
        Ok(Linear {
            weight: Param::new(format!("{name}.weight"), group, Tensor::new(&[outputs, inputs], data)?),
            bias: Param::new(format!("{name}.bias"), group, Tensor::zeros(&[outputs])),
        })
    }

    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, x: Var) -> Result<Var> {
        let w = binder.bind(tape, &self.weight);
        let b = binder.bind(tape, &self.bias);
        linear(tape, x, w, b)
    }

    pub fn params(&self) -> impl Iterator<Item = &Param> {
        [&self.weight, &self.bias].into_iter()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        [&mut self.weight, &mut self.bias].into_iter()
    }
}
