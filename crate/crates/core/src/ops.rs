//! Forward-pass compute kernels. All accumulation is in f32.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Output extent of a conv/pool window: (extent + 2*padding - kernel)/stride + 1.
/// Errors unless the division is exact and the result positive.
pub fn out_extent(extent: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = extent + 2 * padding;
    if padded < kernel || stride == 0 {
        return Err(Error::Graph(format!(
            "window {kernel} does not fit extent {extent} with padding {padding}"
        )));
    }
    let span = padded - kernel;
    if !span.is_multiple_of(stride) {
        return Err(Error::Graph(format!(
            "non-integral output extent: ({extent} + 2*{padding} - {kernel}) / {stride}"
        )));
    }
    Ok(span / stride + 1)
}

/// Cross-correlation on flat buffers; one sample, CHW layout.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_chw(
    input: &[f32],
    (ci, h, w): (usize, usize, usize),
    weight: &[f32],
    (co, kh, kw): (usize, usize, usize),
    bias: Option<&[f32]>,
    stride: usize,
    padding: usize,
    out: &mut [f32],
    (oh, ow): (usize, usize),
) {
    for k in 0..co {
        let b = bias.map_or(0.0, |b| b[k]);
        out[k * oh * ow..(k + 1) * oh * ow].fill(b);
    }
    // range of outputs where i = o*stride + d - padding stays inside [0, extent)
    let valid = |extent: usize, d: usize, limit: usize| -> Option<(usize, usize)> {
        let lo = padding.saturating_sub(d).div_ceil(stride);
        let hi = extent as i64 + padding as i64 - d as i64 - 1;
        if hi < 0 {
            return None;
        }
        let hi = (hi as usize / stride).min(limit - 1);
        if lo > hi {
            None
        } else {
            Some((lo, hi))
        }
    };
    for k in 0..co {
        let out_k = k * oh * ow;
        for c in 0..ci {
            let in_c = c * h * w;
            let w_kc = (k * ci + c) * kh * kw;
            for dy in 0..kh {
                let Some((y_min, y_max)) = valid(h, dy, oh) else { continue };
                for dx in 0..kw {
                    let wv = weight[w_kc + dy * kw + dx];
                    let Some((x_min, x_max)) = valid(w, dx, ow) else { continue };
                    for y in y_min..=y_max {
                        let iy = y * stride + dy - padding;
                        let in_row = in_c + iy * w;
                        let out_row = out_k + y * ow;
                        for x in x_min..=x_max {
                            let ix = x * stride + dx - padding;
                            out[out_row + x] += wv * input[in_row + ix];
                        }
                    }
                }
            }
        }
    }
}

/// 2D cross-correlation over NCHW input with KCkhkw weights.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let ishape = input.shape();
    let wshape = weight.shape();
    if ishape.len() != 4 || wshape.len() != 4 {
        return Err(Error::Graph(format!(
            "conv2d expects NCHW input and KCkhkw weight, got {ishape:?} / {wshape:?}"
        )));
    }
    let (n, ci, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
    let (co, wc, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
    if ci != wc {
        return Err(Error::Graph(format!(
            "conv2d channel mismatch: input {ci}, weight {wc}"
        )));
    }
    let oh = out_extent(h, kh, stride, padding)?;
    let ow = out_extent(w, kw, stride, padding)?;
    let idata = input.as_f32()?;
    let wdata = weight.as_f32()?;
    let bdata = bias.map(|b| b.as_f32()).transpose()?;
    let mut out = vec![0.0f32; n * co * oh * ow];
    for s in 0..n {
        conv2d_chw(
            &idata[s * ci * h * w..(s + 1) * ci * h * w],
            (ci, h, w),
            wdata,
            (co, kh, kw),
            bdata,
            stride,
            padding,
            &mut out[s * co * oh * ow..(s + 1) * co * oh * ow],
            (oh, ow),
        );
    }
    Tensor::from_f32(vec![n, co, oh, ow], out)
}

pub(crate) fn linear(input: &[f32], weight: &[f32], bias: Option<&[f32]>, out_features: usize) -> Vec<f32> {
    let in_features = input.len();
    (0..out_features)
        .map(|o| {
            let row = &weight[o * in_features..(o + 1) * in_features];
            let acc: f32 = row.iter().zip(input).map(|(a, b)| a * b).sum();
            acc + bias.map_or(0.0, |b| b[o])
        })
        .collect()
}

pub(crate) fn relu(data: &mut [f32]) {
    for v in data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

pub(crate) fn pool_chw(
    input: &[f32],
    (c, h, w): (usize, usize, usize),
    kernel: usize,
    stride: usize,
    max: bool,
    out: &mut [f32],
    (oh, ow): (usize, usize),
) {
    for ch in 0..c {
        let in_c = ch * h * w;
        let out_c = ch * oh * ow;
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = if max { f32::NEG_INFINITY } else { 0.0 };
                for dy in 0..kernel {
                    for dx in 0..kernel {
                        let v = input[in_c + (y * stride + dy) * w + x * stride + dx];
                        if max {
                            // NaN in the window is kept visible, unlike f32::max
                            if v.is_nan() || v > acc {
                                acc = v;
                            }
                        } else {
                            acc += v;
                        }
                    }
                }
                out[out_c + y * ow + x] = if max {
                    acc
                } else {
                    acc / (kernel * kernel) as f32
                };
            }
        }
    }
}

/// Numerically stable softmax over the last axis.
pub(crate) fn softmax(data: &mut [f32], last: usize) {
    for chunk in data.chunks_mut(last) {
        let m = chunk.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for v in chunk.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in chunk.iter_mut() {
            *v /= sum;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fault::rng::Stream;

    /// Textbook six-loop reference, kept independent of the production path.
    fn conv2d_naive(
        input: &[f32],
        (ci, h, w): (usize, usize, usize),
        weight: &[f32],
        (co, kh, kw): (usize, usize, usize),
        bias: Option<&[f32]>,
        stride: usize,
        padding: usize,
    ) -> (Vec<f32>, (usize, usize)) {
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let mut out = vec![0.0f32; co * oh * ow];
        for k in 0..co {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = bias.map_or(0.0, |b| b[k]);
                    for c in 0..ci {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = (y * stride + dy) as i64 - padding as i64;
                                let ix = (x * stride + dx) as i64 - padding as i64;
                                if iy >= 0 && iy < h as i64 && ix >= 0 && ix < w as i64 {
                                    acc += input[c * h * w + iy as usize * w + ix as usize]
                                        * weight[((k * ci + c) * kh + dy) * kw + dx];
                                }
                            }
                        }
                    }
                    out[(k * oh + y) * ow + x] = acc;
                }
            }
        }
        (out, (oh, ow))
    }

    #[test]
    fn out_extent_rejects_non_integral() {
        assert_eq!(out_extent(4, 2, 2, 0).unwrap(), 2);
        assert_eq!(out_extent(28, 5, 1, 2).unwrap(), 28);
        assert!(out_extent(4, 2, 3, 0).is_err());
        assert!(out_extent(2, 5, 1, 0).is_err());
    }

    #[test]
    fn conv_all_zero_weights_gives_bias() {
        let input = Tensor::from_f32(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let weight = Tensor::from_f32(vec![2, 1, 3, 3], vec![0.0; 18]).unwrap();
        let bias = Tensor::from_f32(vec![2], vec![0.5, -1.5]).unwrap();
        let out = conv2d(&input, &weight, Some(&bias), 1, 0).unwrap();
        assert_eq!(out.shape(), &[1, 2, 1, 1]);
        assert_eq!(out.as_f32().unwrap(), &[0.5, -1.5]);
    }

    #[test]
    fn conv_ones_window_sums() {
        let input = Tensor::from_f32(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let weight = Tensor::from_f32(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let out = conv2d(&input, &weight, None, 1, 0).unwrap();
        assert_eq!(out.as_f32().unwrap(), &[9.0]);

        let input = Tensor::from_f32(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let weight = Tensor::from_f32(vec![1, 1, 2, 2], vec![1.0; 4]).unwrap();
        let out = conv2d(&input, &weight, None, 1, 0).unwrap();
        assert_eq!(out.as_f32().unwrap(), &[10.0]);
    }

    #[test]
    fn conv_matches_naive_reference() {
        let mut rng = Stream::from_seed(31);
        for (ci, h, w, co, kh, kw, stride, padding) in [
            (1, 4, 4, 2, 2, 2, 1, 0),
            (3, 6, 5, 4, 3, 3, 1, 1),
            (2, 9, 9, 3, 3, 3, 2, 1),
            (2, 7, 7, 1, 5, 5, 1, 2),
        ] {
            let input: Vec<f32> = (0..ci * h * w)
                .map(|_| (rng.next_f64() * 2.0 - 1.0) as f32)
                .collect();
            let weight: Vec<f32> = (0..co * ci * kh * kw)
                .map(|_| (rng.next_f64() * 2.0 - 1.0) as f32)
                .collect();
            let bias: Vec<f32> = (0..co).map(|_| (rng.next_f64() * 2.0 - 1.0) as f32).collect();
            let (expect, (oh, ow)) = conv2d_naive(
                &input,
                (ci, h, w),
                &weight,
                (co, kh, kw),
                Some(&bias),
                stride,
                padding,
            );
            let out = conv2d(
                &Tensor::from_f32(vec![1, ci, h, w], input).unwrap(),
                &Tensor::from_f32(vec![co, ci, kh, kw], weight).unwrap(),
                Some(&Tensor::from_f32(vec![co], bias).unwrap()),
                stride,
                padding,
            )
            .unwrap();
            assert_eq!(out.shape(), &[1, co, oh, ow]);
            for (a, b) in out.as_f32().unwrap().iter().zip(&expect) {
                assert!((a - b).abs() < 1e-6, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn linear_identity_matrix() {
        let out = linear(&[3.0, 5.0], &[1.0, 0.0, 0.0, 1.0], None, 2);
        assert_eq!(out, vec![3.0, 5.0]);
    }

    #[test]
    fn pools_basic() {
        // 1x4x4 ramp
        let input: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let mut out = vec![0.0; 4];
        pool_chw(&input, (1, 4, 4), 2, 2, true, &mut out, (2, 2));
        assert_eq!(out, vec![5.0, 7.0, 13.0, 15.0]);
        pool_chw(&input, (1, 4, 4), 2, 2, false, &mut out, (2, 2));
        assert_eq!(out, vec![2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut data = vec![1.0, 2.0, 3.0, 1000.0, 1001.0, 1002.0];
        softmax(&mut data, 3);
        let s1: f32 = data[..3].iter().sum();
        let s2: f32 = data[3..].iter().sum();
        assert!((s1 - 1.0).abs() < 1e-6);
        assert!((s2 - 1.0).abs() < 1e-6);
        // overflow-safe: the two rows are shifted copies
        for i in 0..3 {
            assert!((data[i] - data[i + 3]).abs() < 1e-6);
        }
    }
}
