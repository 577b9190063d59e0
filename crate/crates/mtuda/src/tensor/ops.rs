//! Differentiable primitives other than convolution.

use super::Tensor;
use crate::labels::{LabelMap, IGNORE};

/// Probability floor used inside logarithms. Fp64 underflow guard, below any
/// test tolerance.
pub const PROB_FLOOR: f64 = 1e-12;

fn assert_same_shape(a: &Tensor, b: &Tensor, op: &str) {
    assert_eq!(a.shape(), b.shape(), "{op}: shape mismatch");
}

pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    assert_same_shape(a, b, "add");
    let out: Vec<f64> = a.values().iter().zip(b.values().iter()).map(|(x, y)| x + y).collect();
    Tensor::from_op(
        a.shape().to_vec(),
        out,
        vec![a.clone(), b.clone()],
        Box::new(|g| vec![g.to_vec(), g.to_vec()]),
    )
}

pub fn sub(a: &Tensor, b: &Tensor) -> Tensor {
    assert_same_shape(a, b, "sub");
    let out: Vec<f64> = a.values().iter().zip(b.values().iter()).map(|(x, y)| x - y).collect();
    Tensor::from_op(
        a.shape().to_vec(),
        out,
        vec![a.clone(), b.clone()],
        Box::new(|g| vec![g.to_vec(), g.iter().map(|x| -x).collect()]),
    )
}

pub fn mul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_same_shape(a, b, "mul");
    let av = a.values_vec();
    let bv = b.values_vec();
    let out: Vec<f64> = av.iter().zip(&bv).map(|(x, y)| x * y).collect();
    Tensor::from_op(
        a.shape().to_vec(),
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            vec![
                g.iter().zip(&bv).map(|(gi, y)| gi * y).collect(),
                g.iter().zip(&av).map(|(gi, x)| gi * x).collect(),
            ]
        }),
    )
}

pub fn scale(a: &Tensor, c: f64) -> Tensor {
    let out: Vec<f64> = a.values().iter().map(|x| x * c).collect();
    Tensor::from_op(
        a.shape().to_vec(),
        out,
        vec![a.clone()],
        Box::new(move |g| vec![g.iter().map(|gi| gi * c).collect()]),
    )
}

pub fn sum(a: &Tensor) -> Tensor {
    let n = a.numel();
    let total: f64 = a.values().iter().sum();
    Tensor::from_op(
        vec![1],
        vec![total],
        vec![a.clone()],
        Box::new(move |g| vec![vec![g[0]; n]]),
    )
}

pub fn mean(a: &Tensor) -> Tensor {
    let n = a.numel();
    let total: f64 = a.values().iter().sum();
    Tensor::from_op(
        vec![1],
        vec![total / n as f64],
        vec![a.clone()],
        Box::new(move |g| vec![vec![g[0] / n as f64; n]]),
    )
}

/// Elementwise max(x, slope*x).
pub fn leaky_relu(a: &Tensor, slope: f64) -> Tensor {
    assert!((0.0..1.0).contains(&slope), "leaky_relu slope must be in [0,1)");
    let av = a.values_vec();
    let out: Vec<f64> = av.iter().map(|&x| if x >= 0.0 { x } else { slope * x }).collect();
    Tensor::from_op(
        a.shape().to_vec(),
        out,
        vec![a.clone()],
        Box::new(move |g| {
            vec![g
                .iter()
                .zip(&av)
                .map(|(gi, &x)| if x >= 0.0 { *gi } else { slope * gi })
                .collect()]
        }),
    )
}

/// Per-axis interpolation table for align-corners=false bilinear resizing.
fn bilinear_axis(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            if src <= 0.0 {
                (0, 0, 0.0)
            } else {
                let i0 = src.floor() as usize;
                if i0 >= n_in - 1 {
                    (n_in - 1, n_in - 1, 0.0)
                } else {
                    (i0, i0 + 1, src - i0 as f64)
                }
            }
        })
        .collect()
}

/// Bilinear upsampling of an NCHW tensor, align-corners=false convention.
pub fn bilinear_upsample(a: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let s = a.shape();
    assert_eq!(s.len(), 4, "bilinear_upsample expects NCHW");
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    assert!(out_h >= h && out_w >= w, "bilinear_upsample only enlarges");
    let rows = bilinear_axis(h, out_h);
    let cols = bilinear_axis(w, out_w);
    let av = a.values_vec();
    let mut out = vec![0.0; n * c * out_h * out_w];
    for plane in 0..n * c {
        let ibase = plane * h * w;
        let obase = plane * out_h * out_w;
        for (oh, &(r0, r1, fh)) in rows.iter().enumerate() {
            for (ow, &(c0, c1, fw)) in cols.iter().enumerate() {
                let v00 = av[ibase + r0 * w + c0];
                let v01 = av[ibase + r0 * w + c1];
                let v10 = av[ibase + r1 * w + c0];
                let v11 = av[ibase + r1 * w + c1];
                let top = v00 + fw * (v01 - v00);
                let bot = v10 + fw * (v11 - v10);
                out[obase + oh * out_w + ow] = top + fh * (bot - top);
            }
        }
    }
    let (rows_b, cols_b) = (rows, cols);
    Tensor::from_op(
        vec![n, c, out_h, out_w],
        out,
        vec![a.clone()],
        Box::new(move |g| {
            let mut gin = vec![0.0; n * c * h * w];
            for plane in 0..n * c {
                let ibase = plane * h * w;
                let obase = plane * out_h * out_w;
                for (oh, &(r0, r1, fh)) in rows_b.iter().enumerate() {
                    for (ow, &(c0, c1, fw)) in cols_b.iter().enumerate() {
                        let go = g[obase + oh * out_w + ow];
                        gin[ibase + r0 * w + c0] += go * (1.0 - fh) * (1.0 - fw);
                        gin[ibase + r0 * w + c1] += go * (1.0 - fh) * fw;
                        gin[ibase + r1 * w + c0] += go * fh * (1.0 - fw);
                        gin[ibase + r1 * w + c1] += go * fh * fw;
                    }
                }
            }
            vec![gin]
        }),
    )
}

/// Per-pixel softmax over the channel axis of an NCHW tensor, computed with
/// max-subtraction for stability.
pub fn softmax_channel(a: &Tensor) -> Tensor {
    let s = a.shape();
    assert_eq!(s.len(), 4, "softmax_channel expects NCHW");
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let hw = h * w;
    let av = a.values();
    let mut out = vec![0.0; n * c * hw];
    for i in 0..n {
        let base = i * c * hw;
        for p in 0..hw {
            let mut mx = f64::NEG_INFINITY;
            for k in 0..c {
                mx = mx.max(av[base + k * hw + p]);
            }
            let mut z = 0.0;
            for k in 0..c {
                let e = (av[base + k * hw + p] - mx).exp();
                out[base + k * hw + p] = e;
                z += e;
            }
            for k in 0..c {
                out[base + k * hw + p] /= z;
            }
        }
    }
    drop(av);
    let saved = out.clone();
    Tensor::from_op(
        vec![n, c, h, w],
        out,
        vec![a.clone()],
        Box::new(move |g| {
            let mut gin = vec![0.0; n * c * hw];
            for i in 0..n {
                let base = i * c * hw;
                for p in 0..hw {
                    let mut dot = 0.0;
                    for k in 0..c {
                        let idx = base + k * hw + p;
                        dot += g[idx] * saved[idx];
                    }
                    for k in 0..c {
                        let idx = base + k * hw + p;
                        gin[idx] = saved[idx] * (g[idx] - dot);
                    }
                }
            }
            vec![gin]
        }),
    )
}

/// Entry-wise weighted self-information, -p*ln(p), with 0*ln(0) := 0.
pub fn neg_p_log_p(a: &Tensor) -> Tensor {
    let av = a.values_vec();
    let out: Vec<f64> = av
        .iter()
        .map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 })
        .collect();
    Tensor::from_op(
        a.shape().to_vec(),
        out,
        vec![a.clone()],
        Box::new(move |g| {
            vec![g
                .iter()
                .zip(&av)
                .map(|(gi, &p)| {
                    if p > PROB_FLOOR {
                        -gi * (p.ln() + 1.0)
                    } else {
                        0.0
                    }
                })
                .collect()]
        }),
    )
}

/// Mean over non-ignored pixels of -ln p(true class). Returns the scalar loss
/// and the number of counted pixels (0 means everything was ignored and the
/// loss is a constant 0).
pub fn cross_entropy_masked(probs: &Tensor, labels: &LabelMap) -> (Tensor, usize) {
    let s = probs.shape();
    assert_eq!(s.len(), 4, "cross_entropy_masked expects NCHW probs");
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    assert_eq!(
        (labels.n, labels.h, labels.w),
        (n, h, w),
        "cross_entropy_masked: label shape mismatch"
    );
    let hw = h * w;
    let pv = probs.values_vec();
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..n {
        for p in 0..hw {
            let y = labels.data[i * hw + p];
            if y == IGNORE {
                continue;
            }
            assert!((y as usize) < c, "label {y} out of range for C={c}");
            let prob = pv[i * c * hw + (y as usize) * hw + p];
            total += -prob.max(PROB_FLOOR).ln();
            count += 1;
        }
    }
    if count == 0 {
        return (Tensor::scalar(0.0), 0);
    }
    let label_data = labels.data.clone();
    let loss = total / count as f64;
    let t = Tensor::from_op(
        vec![1],
        vec![loss],
        vec![probs.clone()],
        Box::new(move |g| {
            let mut gin = vec![0.0; n * c * hw];
            for i in 0..n {
                for p in 0..hw {
                    let y = label_data[i * hw + p];
                    if y == IGNORE {
                        continue;
                    }
                    let idx = i * c * hw + (y as usize) * hw + p;
                    if pv[idx] > PROB_FLOOR {
                        gin[idx] = -g[0] / (count as f64 * pv[idx]);
                    }
                }
            }
            vec![gin]
        }),
    );
    (t, count)
}

/// Elementwise binary cross-entropy on logits against a constant label,
/// in the softplus-stabilized form max(x,0) - t*x + ln(1+exp(-|x|)).
pub fn bce_logits_elem(logits: &Tensor, target: f64) -> Tensor {
    let lv = logits.values_vec();
    let out: Vec<f64> = lv
        .iter()
        .map(|&x| x.max(0.0) - target * x + (-x.abs()).exp().ln_1p())
        .collect();
    Tensor::from_op(
        logits.shape().to_vec(),
        out,
        vec![logits.clone()],
        Box::new(move |g| {
            vec![g
                .iter()
                .zip(&lv)
                .map(|(gi, &x)| {
                    let sig = if x >= 0.0 {
                        1.0 / (1.0 + (-x).exp())
                    } else {
                        let e = x.exp();
                        e / (1.0 + e)
                    };
                    gi * (sig - target)
                })
                .collect()]
        }),
    )
}

/// KL divergence sum_k t*ln(t/s) over channels and pixels per image, averaged
/// over the batch. The teacher is treated as a constant (its current values
/// are captured; no gradient flows to it). An optional per-pixel mask (shape
/// [N,H,W], entries 0 or 1) zeroes individual pixel terms.
pub fn kl_div_const_teacher(teacher: &Tensor, student: &Tensor, mask: Option<&[f64]>) -> Tensor {
    assert_eq!(teacher.shape(), student.shape(), "kl: shape mismatch");
    let s = student.shape();
    assert_eq!(s.len(), 4, "kl expects NCHW");
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let hw = h * w;
    if let Some(m) = mask {
        assert_eq!(m.len(), n * hw, "kl: mask shape mismatch");
    }
    let tv = teacher.values_vec();
    let sv = student.values_vec();
    let mut total = 0.0;
    for i in 0..n {
        for p in 0..hw {
            let m = mask.map_or(1.0, |m| m[i * hw + p]);
            if m == 0.0 {
                continue;
            }
            for k in 0..c {
                let idx = i * c * hw + k * hw + p;
                let t = tv[idx];
                if t > 0.0 {
                    total += m * t * (t.max(PROB_FLOOR).ln() - sv[idx].max(PROB_FLOOR).ln());
                }
            }
        }
    }
    let mask_copy = mask.map(|m| m.to_vec());
    Tensor::from_op(
        vec![1],
        vec![total / n as f64],
        vec![student.clone()],
        Box::new(move |g| {
            let mut gin = vec![0.0; n * c * hw];
            for i in 0..n {
                for p in 0..hw {
                    let m = mask_copy.as_ref().map_or(1.0, |m| m[i * hw + p]);
                    if m == 0.0 {
                        continue;
                    }
                    for k in 0..c {
                        let idx = i * c * hw + k * hw + p;
                        let t = tv[idx];
                        if t > 0.0 && sv[idx] > PROB_FLOOR {
                            gin[idx] = -g[0] * m * t / (sv[idx] * n as f64);
                        }
                    }
                }
            }
            vec![gin]
        }),
    )
}
