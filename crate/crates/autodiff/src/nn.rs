//! Differentiable layer functions built from tape primitives.
//!
//! Activations are laid out NHWC. Every function here is composed of
//! primitives whose backward rules are recorded, so all of them support
//! repeated differentiation.

use std::rc::Rc;

use crate::tape::{IndexMap, Var, SKIP};
use crate::tensor::Tensor;

fn map(v: Vec<u32>) -> IndexMap {
    Rc::from(v)
}

/// `[C]` -> `[rows, C]`.
pub fn broadcast_rows<'t>(v: Var<'t>, rows: usize) -> Var<'t> {
    let c = v.value().len();
    let m = map((0..rows * c).map(|i| (i % c) as u32).collect());
    v.gather(m, &[rows, c])
}

/// `[R]` -> `[R, cols]`.
pub fn broadcast_cols<'t>(v: Var<'t>, cols: usize) -> Var<'t> {
    let r = v.value().len();
    let m = map((0..r * cols).map(|i| (i / cols) as u32).collect());
    v.gather(m, &[r, cols])
}

/// `[R, C]` -> `[C]`.
pub fn sum_rows(x: Var<'_>) -> Var<'_> {
    let shape = x.shape();
    let (r, c) = (shape[0], shape[1]);
    let m = map((0..r * c).map(|i| (i % c) as u32).collect());
    x.scatter_add(m, &[c])
}

/// `[R, C]` -> `[R]`.
pub fn sum_cols(x: Var<'_>) -> Var<'_> {
    let shape = x.shape();
    let (r, c) = (shape[0], shape[1]);
    let m = map((0..r * c).map(|i| (i / c) as u32).collect());
    x.scatter_add(m, &[r])
}

/// Rows of `x` (first axis) in the given order.
/// Stacks equally sized vars as the rows of a `[k, n]` matrix.
pub fn stack_rows<'t>(rows: &[Var<'t>]) -> Var<'t> {
    assert!(!rows.is_empty(), "stack_rows needs at least one row");
    let n = rows[0].value().len();
    let k = rows.len();
    rows.iter()
        .enumerate()
        .map(|(r, v)| {
            assert_eq!(
                v.value().len(),
                n,
                "stack_rows: row {r} has a different length"
            );
            v.scatter_add(
                map((r * n..(r + 1) * n).map(|i| i as u32).collect()),
                &[k, n],
            )
        })
        .reduce(|a, b| a + b)
        .unwrap()
}

pub fn select_rows<'t>(x: Var<'t>, rows: &[usize]) -> Var<'t> {
    let shape = x.shape();
    let inner: usize = shape[1..].iter().product();
    let mut idx = Vec::with_capacity(rows.len() * inner);
    for &r in rows {
        assert!(r < shape[0], "row {r} out of range {}", shape[0]);
        idx.extend((r * inner..(r + 1) * inner).map(|i| i as u32));
    }
    let mut out_shape = shape.clone();
    out_shape[0] = rows.len();
    x.gather(map(idx), &out_shape)
}

/// Elements of a 1-d var.
pub fn select<'t>(x: Var<'t>, idx: &[usize]) -> Var<'t> {
    let m = map(idx.iter().map(|&i| i as u32).collect());
    x.gather(m, &[idx.len()])
}

pub fn conv_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Patches of an NHWC input as rows `[N*OH*OW, k*k*C]`, patch layout (ky, kx, c).
pub fn im2col<'t>(x: Var<'t>, kernel: usize, stride: usize, pad: usize) -> Var<'t> {
    let shape = x.shape();
    let [n, h, w, c] = <[usize; 4]>::try_from(shape.as_slice()).expect("im2col expects NHWC");
    let oh = conv_output_size(h, kernel, stride, pad);
    let ow = conv_output_size(w, kernel, stride, pad);
    let cols = kernel * kernel * c;
    let mut idx = Vec::with_capacity(n * oh * ow * cols);
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        let inside = iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w;
                        for ch in 0..c {
                            idx.push(if inside {
                                (((b * h + iy as usize) * w + ix as usize) * c + ch) as u32
                            } else {
                                SKIP
                            });
                        }
                    }
                }
            }
        }
    }
    x.gather(map(idx), &[n * oh * ow, cols])
}

/// 2-d convolution. `weight` is `[Cout, k, k, Cin]`, `bias` is `[Cout]`.
pub fn conv2d<'t>(
    x: Var<'t>,
    weight: Var<'t>,
    bias: Option<Var<'t>>,
    stride: usize,
    pad: usize,
) -> Var<'t> {
    let xs = x.shape();
    let ws = weight.shape();
    assert_eq!(ws.len(), 4, "conv weight must be [Cout, k, k, Cin]");
    assert_eq!(ws[1], ws[2], "square kernels only");
    assert_eq!(ws[3], xs[3], "conv input channels mismatch");
    let (cout, k) = (ws[0], ws[1]);
    let oh = conv_output_size(xs[1], k, stride, pad);
    let ow = conv_output_size(xs[2], k, stride, pad);
    let cols = im2col(x, k, stride, pad);
    let w2 = weight.reshape(&[cout, k * k * ws[3]]);
    let mut y = cols.matmul_t(w2);
    if let Some(b) = bias {
        y = y + broadcast_rows(b, xs[0] * oh * ow);
    }
    y.reshape(&[xs[0], oh, ow, cout])
}

/// Batch normalization over every axis but the last, using the statistics
/// of the batch itself (biased variance).
pub fn batch_norm<'t>(x: Var<'t>, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Var<'t> {
    let shape = x.shape();
    let c = *shape.last().expect("batch_norm on 0-d tensor");
    let rows = x.value().len() / c;
    let flat = x.reshape(&[rows, c]);
    let inv_n = 1.0 / rows as f64;
    let mean = sum_rows(flat).scale(inv_n);
    let centered = flat - broadcast_rows(mean, rows);
    let var = sum_rows(centered.square()).scale(inv_n);
    let std = var.offset(eps).sqrt();
    let normed = centered / broadcast_rows(std, rows);
    let out = normed * broadcast_rows(gamma, rows) + broadcast_rows(beta, rows);
    out.reshape(&shape)
}

/// Non-overlapping `k x k` average pooling on NHWC.
pub fn avg_pool<'t>(x: Var<'t>, k: usize) -> Var<'t> {
    let shape = x.shape();
    let [n, h, w, c] = <[usize; 4]>::try_from(shape.as_slice()).expect("avg_pool expects NHWC");
    let (oh, ow) = (h / k, w / k);
    let mut idx = Vec::with_capacity(n * h * w * c);
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                for ch in 0..c {
                    let (py, px) = (y / k, xx / k);
                    idx.push(if py < oh && px < ow {
                        (((b * oh + py) * ow + px) * c + ch) as u32
                    } else {
                        SKIP
                    });
                }
            }
        }
    }
    x.scatter_add(map(idx), &[n, oh, ow, c])
        .scale(1.0 / (k * k) as f64)
}

/// `x @ weight^T + bias` with `weight` shaped `[out, in]`.
pub fn dense<'t>(x: Var<'t>, weight: Var<'t>, bias: Option<Var<'t>>) -> Var<'t> {
    let rows = x.shape()[0];
    let y = x.matmul_t(weight);
    match bias {
        Some(b) => y + broadcast_rows(b, rows),
        None => y,
    }
}

/// Row-wise log-softmax of `[N, K]` logits.
pub fn log_softmax(logits: Var<'_>) -> Var<'_> {
    let shape = logits.shape();
    let (n, k) = (shape[0], shape[1]);
    let v = logits.value();
    // Shift by the (constant) row max for stability; the shift cancels in
    // both the value and every derivative.
    let maxes: Vec<f64> = (0..n)
        .map(|r| {
            v.data()[r * k..(r + 1) * k]
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let shift = logits.tape().constant(Tensor::new(vec![n], maxes));
    let shifted = logits - broadcast_cols(shift, k);
    let lse = sum_cols(shifted.exp()).ln();
    shifted - broadcast_cols(lse, k)
}

/// Per-example cross-entropy `[N]` for integer labels.
pub fn cross_entropy<'t>(logits: Var<'t>, labels: &[usize]) -> Var<'t> {
    let shape = logits.shape();
    let (n, k) = (shape[0], shape[1]);
    assert_eq!(labels.len(), n, "one label per row");
    let logp = log_softmax(logits);
    let idx = labels
        .iter()
        .enumerate()
        .map(|(r, &y)| {
            assert!(y < k, "label {y} out of range for {k} classes");
            (r * k + y) as u32
        })
        .collect();
    -logp.gather(map(idx), &[n])
}

/// Per-example squared error `[N]` between `[N, D]` predictions and targets.
pub fn squared_error<'t>(pred: Var<'t>, target: Var<'t>) -> Var<'t> {
    let d = pred - target;
    if d.shape().len() == 1 {
        return d.square();
    }
    sum_cols(d.square().reshape(&{
        let s = d.shape();
        [s[0], s[1..].iter().product()]
    }))
}
