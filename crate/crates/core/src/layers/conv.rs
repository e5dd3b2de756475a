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

/// Output length of a convolution along one axis. The division must be exact.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let span = input + 2 * padding;
    if stride == 0 || kernel == 0 || span < kernel {
        return Err(Error::Config(format!(
            "convolution does not fit: input {input}, kernel {kernel}, stride {stride}, padding {padding}"
        )));
    }
    if (span - kernel) % stride != 0 {
        return Err(Error::shape(
            "conv2d",
            &[input, kernel],
            &[stride, padding],
        ));
    }
    Ok((span - kernel) / stride + 1)
}

#[derive(Clone, Copy)]
struct Geometry {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    /// Unfold sample `b` of `x` into a `patch × positions` matrix.
    fn im2col(&self, x: &[Float], b: usize, cols: &mut [Float]) {
        let p = self.positions();
        for c in 0..self.cin {
            let plane = &x[(b * self.cin + c) * self.h * self.w..][..self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = &mut cols[((c * self.kh + i) * self.kw + j) * p..][..p];
                    for oy in 0..self.ho {
                        let y = (oy * self.stride + i) as isize - self.pad as isize;
                        let dst = &mut row[oy * self.wo..][..self.wo];
                        if y < 0 || y >= self.h as isize {
                            dst.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let src = &plane[y as usize * self.w..][..self.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let xx = (ox * self.stride + j) as isize - self.pad as isize;
                            *d = if xx < 0 || xx >= self.w as isize {
                                0.0
                            } else {
                                src[xx as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[Float], b: usize, gx: &mut [Float]) {
        let p = self.positions();
        for c in 0..self.cin {
            let plane = &mut gx[(b * self.cin + c) * self.h * self.w..][..self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = &cols[((c * self.kh + i) * self.kw + j) * p..][..p];
                    for oy in 0..self.ho {
                        let y = (oy * self.stride + i) as isize - self.pad as isize;
                        if y < 0 || y >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let xx = (ox * self.stride + j) as isize - self.pad as isize;
                            if xx >= 0 && xx < self.w as isize {
                                plane[y as usize * self.w + xx as usize] += row[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

struct ConvRule {
    geo: Geometry,
    cols: Vec<Float>,
}

impl Backward for ConvRule {
    fn backward(
        &self,
        g: &[Float],
        inputs: &[&Tensor],
        _output: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Vec<Float>>> {
        let geo = self.geo;
        let (k, p) = (geo.patch(), geo.positions());
        let w = inputs[1].data();
        let mut gx = needs[0].then(|| vec![0.0; inputs[0].numel()]);
        let mut gw = needs[1].then(|| vec![0.0; w.len()]);
        let mut gcols = vec![0.0; k * p];
        for b in 0..geo.batch {
            let gb = &g[b * geo.cout * p..][..geo.cout * p];
            if let Some(gw) = gw.as_mut() {
                gemm(geo.cout, p, k, gb, false, &self.cols[b * k * p..][..k * p], true, gw, true);
            }
            if let Some(gx) = gx.as_mut() {
                gemm(k, geo.cout, p, w, true, gb, false, &mut gcols, false);
                geo.col2im(&gcols, b, gx);
            }
        }
        let mut out = vec![gx, gw];
        if inputs.len() == 3 {
            out.push(needs[2].then(|| {
                let mut gbias = vec![0.0; geo.cout];
                for b in 0..geo.batch {
                    for (c, acc) in gbias.iter_mut().enumerate() {
                        *acc += g[(b * geo.cout + c) * p..][..p].iter().sum::<Float>();
                    }
                }
                gbias
            }));
        }
        out
    }
}

/// 2-D cross-correlation of `x: [B, Cin, H, W]` with `weight: [Cout, Cin, kh, kw]`.
pub fn conv2d(
    tape: &mut Tape,
    x: Var,
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
) -> Result<Var> {
    let (xs, ws) = (tape.shape(x).to_vec(), tape.shape(weight).to_vec());
    if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
        return Err(Error::shape("conv2d", &xs, &ws));
    }
    if let Some(b) = bias {
        if tape.shape(b) != [ws[0]] {
            return Err(Error::shape("conv2d bias", tape.shape(b), &[ws[0]]));
        }
    }
    let geo = Geometry {
        batch: xs[0],
        cin: xs[1],
        h: xs[2],
        w: xs[3],
        cout: ws[0],
        kh: ws[2],
        kw: ws[3],
        ho: conv_output_size(xs[2], ws[2], stride, padding)?,
        wo: conv_output_size(xs[3], ws[3], stride, padding)?,
        stride,
        pad: padding,
    };
    let (k, p) = (geo.patch(), geo.positions());
    let mut cols = vec![0.0; geo.batch * k * p];
    let mut out = vec![0.0; geo.batch * geo.cout * p];
    {
        let xd = tape.value(x).data();
        let wd = tape.value(weight).data();
        for b in 0..geo.batch {
            let cb = &mut cols[b * k * p..][..k * p];
            geo.im2col(xd, b, cb);
            gemm(geo.cout, k, p, wd, false, cb, false, &mut out[b * geo.cout * p..][..geo.cout * p], false);
        }
        if let Some(bv) = bias {
            let bd = tape.value(bv).data();
            for b in 0..geo.batch {
                for (c, bias) in bd.iter().enumerate() {
                    out[(b * geo.cout + c) * p..][..p].iter_mut().for_each(|v| *v += bias);
                }
            }
        }
    }
    let value = Tensor::from_parts(vec![geo.batch, geo.cout, geo.ho, geo.wo], out);
    let mut inputs = vec![x, weight];
    inputs.extend(bias);
    Ok(tape.push(&inputs, value, Box::new(ConvRule { geo, cols })))
}

/// Convolution layer with He-normal initialized weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if kernel == 0 || stride == 0 || padding >= kernel {
            return Err(Error::Config(format!(
                "{name}: need kernel >= 1, stride >= 1 and padding < kernel (got {kernel}, {stride}, {padding})"
            )));
        }
        let fan_in = in_channels * kernel * kernel;
        let std = math::sqrt(2.0 / math::from_usize(fan_in));
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(format!("{e}")))?;
        let n = out_channels * fan_in;
        let data: Vec<Float> = (0..n).map(|_| normal.sample(rng)).collect();
        let weight = Tensor::new(&[out_channels, in_channels, kernel, kernel], data)?;
        Ok(Conv2d {
            weight: Param::new(format!("{name}.weight"), ParamGroup::Conv, weight),
            bias: bias.then(|| {
                Param::new(format!("{name}.bias"), ParamGroup::Conv, Tensor::zeros(&[out_channels]))
            }),
            stride,
            padding,
        })
    }

    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, x: Var) -> Result<Var> {
        let w = binder.bind(tape, &self.weight);
        let b = self.bias.as_ref().map(|b| binder.bind(tape, b));
        conv2d(tape, x, w, b, self.stride, self.padding)
    }

    pub fn params(&self) -> impl Iterator<Item = &Param> {
        core::iter::once(&self.weight).chain(self.bias.as_ref())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        core::iter::once(&mut self.weight).chain(self.bias.as_mut())
    }
}
