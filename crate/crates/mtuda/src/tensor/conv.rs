//! Direct 2-D convolution with zero padding.

use super::Tensor;
use crate::error::{Error, Result};

/// Output indices o in [start, end) satisfy 0 <= o*stride + k_off - pad < n_in.
#[inline]
fn valid_range(k_off: usize, pad: usize, stride: usize, n_in: usize, n_out: usize) -> (usize, usize) {
    let start = if k_off >= pad {
        0
    } else {
        (pad - k_off).div_ceil(stride)
    };
    let end = if n_in + pad > k_off {
        ((n_in - 1 + pad - k_off) / stride + 1).min(n_out)
    } else {
        0
    };
    (start.min(end), end)
}

struct ConvDims {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

fn forward(x: &[f64], wt: &[f64], b: &[f64], d: &ConvDims) -> Vec<f64> {
    let mut out = vec![0.0; d.n * d.cout * d.oh * d.ow];
    for n in 0..d.n {
        for co in 0..d.cout {
            let obase = (n * d.cout + co) * d.oh * d.ow;
            out[obase..obase + d.oh * d.ow].fill(b[co]);
            for ci in 0..d.cin {
                let ibase = (n * d.cin + ci) * d.h * d.w;
                for ki in 0..d.kh {
                    let (oh0, oh1) = valid_range(ki, d.pad, d.stride, d.h, d.oh);
                    for kj in 0..d.kw {
                        let wv = wt[((co * d.cin + ci) * d.kh + ki) * d.kw + kj];
                        let (ow0, ow1) = valid_range(kj, d.pad, d.stride, d.w, d.ow);
                        for oh in oh0..oh1 {
                            let ih = oh * d.stride + ki - d.pad;
                            let irow = ibase + ih * d.w;
                            let orow = obase + oh * d.ow;
                            if d.stride == 1 {
                                let off = (ow0 + kj) - d.pad;
                                let src = &x[irow + off..irow + off + (ow1 - ow0)];
                                let dst = &mut out[orow + ow0..orow + ow1];
                                for (o, s) in dst.iter_mut().zip(src) {
                                    *o += wv * s;
                                }
                            } else {
                                for ow in ow0..ow1 {
                                    let iw = ow * d.stride + kj - d.pad;
                                    out[orow + ow] += wv * x[irow + iw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn backward(x: &[f64], wt: &[f64], g: &[f64], d: &ConvDims) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; d.n * d.cin * d.h * d.w];
    let mut gw = vec![0.0; d.cout * d.cin * d.kh * d.kw];
    let mut gb = vec![0.0; d.cout];
    for n in 0..d.n {
        for co in 0..d.cout {
            let obase = (n * d.cout + co) * d.oh * d.ow;
            let mut bsum = 0.0;
            for v in &g[obase..obase + d.oh * d.ow] {
                bsum += v;
            }
            gb[co] += bsum;
            for ci in 0..d.cin {
                let ibase = (n * d.cin + ci) * d.h * d.w;
                for ki in 0..d.kh {
                    let (oh0, oh1) = valid_range(ki, d.pad, d.stride, d.h, d.oh);
                    for kj in 0..d.kw {
                        let widx = ((co * d.cin + ci) * d.kh + ki) * d.kw + kj;
                        let wv = wt[widx];
                        let (ow0, ow1) = valid_range(kj, d.pad, d.stride, d.w, d.ow);
                        let mut wacc = 0.0;
                        for oh in oh0..oh1 {
                            let ih = oh * d.stride + ki - d.pad;
                            let irow = ibase + ih * d.w;
                            let orow = obase + oh * d.ow;
                            if d.stride == 1 {
                                let off = (ow0 + kj) - d.pad;
                                let grow = &g[orow + ow0..orow + ow1];
                                let xin = &x[irow + off..irow + off + (ow1 - ow0)];
                                let gin = &mut gx[irow + off..irow + off + (ow1 - ow0)];
                                for ((gi, xi), go) in gin.iter_mut().zip(xin).zip(grow) {
                                    *gi += wv * go;
                                    wacc += xi * go;
                                }
                            } else {
                                for ow in ow0..ow1 {
                                    let iw = ow * d.stride + kj - d.pad;
                                    let go = g[orow + ow];
                                    gx[irow + iw] += wv * go;
                                    wacc += x[irow + iw] * go;
                                }
                            }
                        }
                        gw[widx] += wacc;
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

/// 2-D convolution: input [N,Cin,H,W], weight [Cout,Cin,kh,kw], bias [Cout].
/// Zero padding; output size floor((H + 2*pad - kh)/stride) + 1.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let is = input.shape();
    let ws = weight.shape();
    if is.len() != 4 || ws.len() != 4 {
        return Err(Error::Dimension(format!(
            "conv2d expects 4-D input and weight, got {is:?} and {ws:?}"
        )));
    }
    let (n, cin, h, w) = (is[0], is[1], is[2], is[3]);
    let (cout, wcin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    if wcin != cin {
        return Err(Error::Dimension(format!(
            "conv2d: input has {cin} channels, weight expects {wcin}"
        )));
    }
    if bias.shape() != [cout] {
        return Err(Error::Dimension(format!(
            "conv2d: bias shape {:?} does not match {cout} output channels",
            bias.shape()
        )));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::Dimension(format!("conv2d: kernel {kh}x{kw} must be odd")));
    }
    if stride == 0 {
        return Err(Error::Dimension("conv2d: stride must be >= 1".into()));
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::Dimension(format!(
            "conv2d: kernel {kh}x{kw} larger than padded input {h}x{w} (pad {padding})"
        )));
    }
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    let dims = ConvDims { n, cin, h, w, cout, kh, kw, stride, pad: padding, oh, ow };

    let xv = input.values_vec();
    let wv = weight.values_vec();
    let bv = bias.values_vec();
    let out = forward(&xv, &wv, &bv, &dims);

    Ok(Tensor::from_op(
        vec![n, cout, oh, ow],
        out,
        vec![input.clone(), weight.clone(), bias.clone()],
        Box::new(move |g| {
            let (gx, gw, gb) = backward(&xv, &wv, g, &dims);
            vec![gx, gw, gb]
        }),
    ))
}
