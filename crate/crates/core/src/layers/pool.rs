use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math::{self, Float};
use crate::tape::{Backward, Tape, Var};
use crate::tensor::Tensor;

/// Mean over all spatial positions: `[B, C, H, W] -> [B, C]`.
pub fn avg_pool_global(tape: &mut Tape, x: Var) -> Result<Var> {
    if tape.shape(x).len() != 4 {
        return Err(Error::contract("avg_pool_global", "expected a [B, C, H, W] input"));
    }
    tape.mean(x, &[2, 3])
}

struct StripeRule {
    dims: [usize; 4],
    stripes: usize,
}

impl Backward for StripeRule {
    fn backward(
        &self,
        g: &[Float],
        _inputs: &[&Tensor],
        _output: &Tensor,
        _needs: &[bool],
    ) -> Vec<Option<Vec<Float>>> {
        let [b, c, h, w] = self.dims;
        let rows = h / self.stripes;
        let scale = 1.0 / math::from_usize(rows * w);
        let mut gx = vec![0.0; b * c * h * w];
        for bi in 0..b {
            for ch in 0..c {
                for y in 0..h {
                    let gi = g[(bi * self.stripes + y / rows) * c + ch] * scale;
                    gx[((bi * c + ch) * h + y) * w..][..w].iter_mut().for_each(|v| *v = gi);
                }
            }
        }
        vec![Some(gx)]
    }
}

/// Split the map into `stripes` equal horizontal bands and average each:
/// `[B, C, H, W] -> [B, stripes, C]`, stripes ordered top to bottom.
pub fn avg_pool_striped(tape: &mut Tape, x: Var, stripes: usize) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let [b, c, h, w] = shape[..] else {
        return Err(Error::contract("avg_pool_striped", "expected a [B, C, H, W] input"));
    };
    if stripes == 0 || h % stripes != 0 {
        return Err(Error::Config(format!(
            "feature-map height {h} is not divisible into {stripes} stripes"
        )));
    }
    let rows = h / stripes;
    let scale = 1.0 / math::from_usize(rows * w);
    let xd = tape.value(x).data();
    let mut out = vec![0.0; b * stripes * c];
    for bi in 0..b {
        for ch in 0..c {
            for y in 0..h {
                let row_sum: Float = xd[((bi * c + ch) * h + y) * w..][..w].iter().sum();
                out[(bi * stripes + y / rows) * c + ch] += row_sum * scale;
            }
        }
    }
    let value = Tensor::from_parts(vec![b, stripes, c], out);
    Ok(tape.push(&[x], value, Box::new(StripeRule { dims: [b, c, h, w], stripes })))
}
