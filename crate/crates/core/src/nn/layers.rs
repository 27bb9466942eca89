//! Forward and backward passes of the individual layers.
//!
//! Every function works on a whole batch. Reductions over the batch run in a
//! fixed order, so a batch gives bit-identical results on every run.

use rand::Rng;

use super::tensor::{matmul, Mat, Scalar, Tensor4};
use super::NnError;

pub const KERNEL: usize = 3;
pub const POOL: usize = 2;

/// Training or inference behaviour for stochastic layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn shape_err(what: &str, expected: String, actual: String) -> NnError {
    NnError::Shape(format!("{what}: expected {expected}, got {actual}"))
}

/// Patch matrix of a 3x3 same-padded convolution input: one row per output
/// pixel, columns ordered `(dy, dx, channel)`.
#[derive(Debug, Clone)]
pub struct ConvCache<S> {
    pub cols: Vec<S>,
    pub in_shape: [usize; 4],
}

fn im2col<S: Scalar>(input: &Tensor4<S>) -> Vec<S> {
    let (n, h, w, c) = (input.n, input.h, input.w, input.c);
    let row = KERNEL * KERNEL * c;
    let mut cols = vec![S::zero(); n * h * w * row];
    for b in 0..n {
        let src = input.sample(b);
        for y in 0..h {
            for x in 0..w {
                let base = ((b * h + y) * w + x) * row;
                for dy in 0..KERNEL {
                    let sy = y as isize + dy as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for dx in 0..KERNEL {
                        let sx = x as isize + dx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let from = (sy as usize * w + sx as usize) * c;
                        let to = base + (dy * KERNEL + dx) * c;
                        cols[to..to + c].copy_from_slice(&src[from..from + c]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im<S: Scalar>(cols: &[S], shape: [usize; 4]) -> Tensor4<S> {
    let [n, h, w, c] = shape;
    let row = KERNEL * KERNEL * c;
    let mut out = Tensor4::zeros(n, h, w, c);
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let base = ((b * h + y) * w + x) * row;
                for dy in 0..KERNEL {
                    let sy = y as isize + dy as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for dx in 0..KERNEL {
                        let sx = x as isize + dx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let to = ((b * h + sy as usize) * w + sx as usize) * c;
                        let from = base + (dy * KERNEL + dx) * c;
                        for i in 0..c {
                            out.data[to + i] += cols[from + i];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Same-padded 3x3 convolution. `weights` is laid out `[dy][dx][cin][cout]`:
/// `out[y, x, o] = bias[o] + sum input[y + dy - 1, x + dx - 1, i] * w[dy, dx, i, o]`.
pub fn conv2d_forward<S: Scalar>(
    input: &Tensor4<S>,
    weights: &[S],
    bias: &[S],
) -> Result<(Tensor4<S>, ConvCache<S>), NnError> {
    let cout = bias.len();
    let k = KERNEL * KERNEL * input.c;
    if weights.len() != k * cout {
        return Err(shape_err(
            "conv2d weights",
            format!("3x3x{}x{} ({} values)", input.c, cout, k * cout),
            format!("{} values for input {:?}", weights.len(), input.shape()),
        ));
    }
    let cols = im2col(input);
    let rows = input.n * input.h * input.w;
    let mut out = Tensor4::zeros(input.n, input.h, input.w, cout);
    for px in out.data.chunks_exact_mut(cout) {
        px.copy_from_slice(bias);
    }
    matmul(Mat::new(&cols, rows, k), Mat::new(weights, k, cout), &mut out.data, true);
    Ok((
        out,
        ConvCache {
            cols,
            in_shape: input.shape(),
        },
    ))
}

#[derive(Debug, Clone)]
pub struct ParamGrads<S> {
    pub weights: Vec<S>,
    pub bias: Vec<S>,
}

/// Gradients of [`conv2d_forward`]. The input gradient is skipped when
/// `need_input_grad` is false (first layer).
pub fn conv2d_backward<S: Scalar>(
    grad_out: &Tensor4<S>,
    cache: &ConvCache<S>,
    weights: &[S],
    need_input_grad: bool,
) -> Result<(Option<Tensor4<S>>, ParamGrads<S>), NnError> {
    let [n, h, w, cin] = cache.in_shape;
    let cout = grad_out.c;
    let k = KERNEL * KERNEL * cin;
    if grad_out.shape() != [n, h, w, cout] || weights.len() != k * cout {
        return Err(shape_err(
            "conv2d backward",
            format!("grad {:?} with {} weights", [n, h, w, cout], k * cout),
            format!("grad {:?} with {} weights", grad_out.shape(), weights.len()),
        ));
    }
    let rows = n * h * w;
    let mut gw = vec![S::zero(); k * cout];
    matmul(Mat::new(&cache.cols, rows, k).t(), Mat::new(&grad_out.data, rows, cout), &mut gw, false);
    let gb = column_sums(&grad_out.data, cout);
    let gin = if need_input_grad {
        let mut gcols = vec![S::zero(); rows * k];
        matmul(Mat::new(&grad_out.data, rows, cout), Mat::new(weights, k, cout).t(), &mut gcols, false);
        Some(col2im(&gcols, cache.in_shape))
    } else {
        None
    };
    Ok((gin, ParamGrads { weights: gw, bias: gb }))
}

fn column_sums<S: Scalar>(data: &[S], cols: usize) -> Vec<S> {
    let mut sums = vec![S::zero(); cols];
    for row in data.chunks_exact(cols) {
        for (s, &v) in sums.iter_mut().zip(row) {
            *s += v;
        }
    }
    sums
}

/// Index of the winning input element for every pooled output.
#[derive(Debug, Clone)]
pub struct PoolCache {
    pub argmax: Vec<usize>,
    pub in_shape: [usize; 4],
}

/// 2x2 max pooling with stride 2. Ties go to the first element in row-major
/// window order.
pub fn maxpool_forward<S: Scalar>(input: &Tensor4<S>) -> Result<(Tensor4<S>, PoolCache), NnError> {
    let (n, h, w, c) = (input.n, input.h, input.w, input.c);
    if h % POOL != 0 || w % POOL != 0 {
        return Err(shape_err("maxpool input", "even height and width".into(), format!("{h}x{w}")));
    }
    let (oh, ow) = (h / POOL, w / POOL);
    let mut out = Tensor4::zeros(n, oh, ow, c);
    let mut argmax = vec![0usize; n * oh * ow * c];
    for b in 0..n {
        for y in 0..oh {
            for x in 0..ow {
                for ch in 0..c {
                    let mut best = usize::MAX;
                    let mut best_v = S::neg_infinity();
                    for dy in 0..POOL {
                        for dx in 0..POOL {
                            let idx = ((b * h + y * POOL + dy) * w + x * POOL + dx) * c + ch;
                            let v = input.data[idx];
                            if best == usize::MAX || v > best_v {
                                best = idx;
                                best_v = v;
                            }
                        }
                    }
                    let o = ((b * oh + y) * ow + x) * c + ch;
                    out.data[o] = best_v;
                    argmax[o] = best;
                }
            }
        }
    }
    Ok((
        out,
        PoolCache {
            argmax,
            in_shape: input.shape(),
        },
    ))
}

pub fn maxpool_backward<S: Scalar>(grad_out: &Tensor4<S>, cache: &PoolCache) -> Result<Tensor4<S>, NnError> {
    if grad_out.data.len() != cache.argmax.len() {
        return Err(shape_err(
            "maxpool backward",
            format!("{} gradients", cache.argmax.len()),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let [n, h, w, c] = cache.in_shape;
    let mut gin = Tensor4::zeros(n, h, w, c);
    for (&g, &i) in grad_out.data.iter().zip(&cache.argmax) {
        gin.data[i] += g;
    }
    Ok(gin)
}

pub fn relu_forward<S: Scalar>(input: &Tensor4<S>) -> (Tensor4<S>, Vec<bool>) {
    let mask: Vec<bool> = input.data.iter().map(|&v| v > S::zero()).collect();
    let data = input
        .data
        .iter()
        .zip(&mask)
        .map(|(&v, &m)| if m { v } else { S::zero() })
        .collect();
    (Tensor4::from_vec(input.n, input.h, input.w, input.c, data), mask)
}

pub fn relu_backward<S: Scalar>(grad_out: &Tensor4<S>, mask: &[bool]) -> Tensor4<S> {
    let data = grad_out
        .data
        .iter()
        .zip(mask)
        .map(|(&g, &m)| if m { g } else { S::zero() })
        .collect();
    Tensor4::from_vec(grad_out.n, grad_out.h, grad_out.w, grad_out.c, data)
}

/// Inverted dropout. In eval mode the input is returned unchanged and no
/// mask is produced. In train mode each unit is zeroed with probability
/// `rate` and survivors are scaled by `1 / (1 - rate)`; the returned mask
/// holds the per-unit multiplier.
pub fn dropout_forward<S: Scalar, R: Rng + ?Sized>(
    input: &Tensor4<S>,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> (Tensor4<S>, Option<Vec<S>>) {
    if mode == Mode::Eval {
        return (input.clone(), None);
    }
    let keep = S::of(1.0 / (1.0 - rate));
    let mask: Vec<S> = (0..input.data.len())
        .map(|_| if rng.gen::<f64>() < rate { S::zero() } else { keep })
        .collect();
    let data = input.data.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
    (Tensor4::from_vec(input.n, input.h, input.w, input.c, data), Some(mask))
}

pub fn dropout_backward<S: Scalar>(grad_out: &Tensor4<S>, mask: Option<&[S]>) -> Tensor4<S> {
    match mask {
        None => grad_out.clone(),
        Some(mask) => {
            let data = grad_out.data.iter().zip(mask).map(|(&g, &m)| g * m).collect();
            Tensor4::from_vec(grad_out.n, grad_out.h, grad_out.w, grad_out.c, data)
        }
    }
}

/// Fully connected layer over flattened samples: `out = x W + b` with `W`
/// stored `[inputs][units]`.
pub fn dense_forward<S: Scalar>(input: &Tensor4<S>, weights: &[S], bias: &[S]) -> Result<Tensor4<S>, NnError> {
    let (n, inputs, units) = (input.n, input.sample_len(), bias.len());
    if weights.len() != inputs * units {
        return Err(shape_err(
            "dense weights",
            format!("{inputs}x{units} ({} values)", inputs * units),
            format!("{} values for input {:?}", weights.len(), input.shape()),
        ));
    }
    let mut out = Tensor4::zeros(n, 1, 1, units);
    for row in out.data.chunks_exact_mut(units) {
        row.copy_from_slice(bias);
    }
    matmul(Mat::new(&input.data, n, inputs), Mat::new(weights, inputs, units), &mut out.data, true);
    Ok(out)
}

pub fn dense_backward<S: Scalar>(
    grad_out: &Tensor4<S>,
    input: &Tensor4<S>,
    weights: &[S],
    need_input_grad: bool,
) -> Result<(Option<Tensor4<S>>, ParamGrads<S>), NnError> {
    let (n, inputs, units) = (input.n, input.sample_len(), grad_out.sample_len());
    if grad_out.n != n || weights.len() != inputs * units {
        return Err(shape_err(
            "dense backward",
            format!("{n} rows and {} weights", inputs * units),
            format!("{} rows and {} weights", grad_out.n, weights.len()),
        ));
    }
    let mut gw = vec![S::zero(); inputs * units];
    matmul(Mat::new(&input.data, n, inputs).t(), Mat::new(&grad_out.data, n, units), &mut gw, false);
    let gb = column_sums(&grad_out.data, units);
    let gin = need_input_grad.then(|| {
        let mut g = Tensor4::zeros(input.n, input.h, input.w, input.c);
        matmul(Mat::new(&grad_out.data, n, units), Mat::new(weights, inputs, units).t(), &mut g.data, false);
        g
    });
    Ok((gin, ParamGrads { weights: gw, bias: gb }))
}

/// Row-wise softmax with max subtraction.
pub fn softmax<S: Scalar>(logits: &[S]) -> Vec<S> {
    let max = logits.iter().copied().fold(S::neg_infinity(), S::max);
    let exps: Vec<S> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: S = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub const PROB_FLOOR: f64 = 1e-12;

/// `-ln(max(p[label], 1e-12))`.
pub fn cross_entropy<S: Scalar>(probs: &[S], label: usize) -> f64 {
    -probs[label].as_f64().max(PROB_FLOOR).ln()
}

/// Mean cross-entropy of a batch of probability rows.
pub fn batch_loss<S: Scalar>(probs: &Tensor4<S>, labels: &[usize]) -> f64 {
    let k = probs.sample_len();
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| cross_entropy(&probs.data[i * k..(i + 1) * k], l))
        .sum();
    total / labels.len() as f64
}

/// Gradient of the mean softmax cross-entropy with respect to the logits:
/// `(p - onehot) / n`.
pub fn softmax_cross_entropy_grad<S: Scalar>(probs: &Tensor4<S>, labels: &[usize]) -> Tensor4<S> {
    let k = probs.sample_len();
    let scale = S::of(1.0 / labels.len() as f64);
    let mut g = probs.clone();
    for (i, &l) in labels.iter().enumerate() {
        g.data[i * k + l] -= S::one();
    }
    for v in &mut g.data {
        *v *= scale;
    }
    g
}
