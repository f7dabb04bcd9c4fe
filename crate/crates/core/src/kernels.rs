//! Layer kernels generic over the sample type, shared by the float, fake-quant
//! and integer engines. Each output element accumulates in a fixed order
//! (input channel, then kernel row, then kernel column), so results do not
//! depend on how output channels are spread over worker threads.

use std::ops::{AddAssign, Mul};

use rayon::prelude::*;

pub trait Sample: Copy + Send + Sync + PartialOrd + AddAssign + Mul<Output = Self> {}

impl<T: Copy + Send + Sync + PartialOrd + AddAssign + Mul<Output = T>> Sample for T {}

/// Stride-1 convolution with `(k−1)/2` padding filled by `pad`.
///
/// `input` is `[c, h, w]`, `weight` is `[o, c, k, k]`; the result is `[o, h, w]`
/// with every element starting from `bias[o]`.
#[allow(clippy::too_many_arguments)]
pub fn conv_same<T: Sample>(
    input: &[T],
    (c, h, w): (usize, usize, usize),
    weight: &[T],
    bias: &[T],
    k: usize,
    pad: T,
) -> Vec<T> {
    let o = bias.len();
    debug_assert_eq!(input.len(), c * h * w);
    debug_assert_eq!(weight.len(), o * c * k * k);
    let p = (k - 1) / 2;
    let (ph, pw) = (h + 2 * p, w + 2 * p);
    let padded: Vec<T> = if p == 0 {
        input.to_vec()
    } else {
        let mut buf = vec![pad; c * ph * pw];
        for ch in 0..c {
            for y in 0..h {
                let src = &input[(ch * h + y) * w..][..w];
                buf[(ch * ph + y + p) * pw + p..][..w].copy_from_slice(src);
            }
        }
        buf
    };
    let planes: Vec<Vec<T>> = (0..o)
        .into_par_iter()
        .map(|oc| {
            let mut out = vec![bias[oc]; h * w];
            for ch in 0..c {
                let plane = &padded[ch * ph * pw..][..ph * pw];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = weight[((oc * c + ch) * k + ky) * k + kx];
                        for y in 0..h {
                            let src = &plane[(y + ky) * pw + kx..][..w];
                            let dst = &mut out[y * w..][..w];
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
            out
        })
        .collect();
    planes.concat()
}

/// 2×2 stride-2 transposed convolution; `weight` is `[o, c, 2, 2]` and the
/// result is `[o, 2h, 2w]`.
pub fn transposed_conv2x2<T: Sample>(
    input: &[T],
    (c, h, w): (usize, usize, usize),
    weight: &[T],
    bias: &[T],
) -> Vec<T> {
    let o = bias.len();
    let (oh, ow) = (2 * h, 2 * w);
    let planes: Vec<Vec<T>> = (0..o)
        .into_par_iter()
        .map(|oc| {
            let mut out = vec![bias[oc]; oh * ow];
            for ch in 0..c {
                let plane = &input[ch * h * w..][..h * w];
                for dy in 0..2 {
                    for dx in 0..2 {
                        let wv = weight[((oc * c + ch) * 2 + dy) * 2 + dx];
                        for y in 0..h {
                            let row = &mut out[(2 * y + dy) * ow..][..ow];
                            for x in 0..w {
                                row[2 * x + dx] += wv * plane[y * w + x];
                            }
                        }
                    }
                }
            }
            out
        })
        .collect();
    planes.concat()
}

pub fn maxpool2x2<T: Sample>(input: &[T], (c, h, w): (usize, usize, usize)) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let plane = &input[ch * h * w..][..h * w];
        for y in 0..oh {
            for x in 0..ow {
                let a = plane[2 * y * w + 2 * x];
                let b = plane[2 * y * w + 2 * x + 1];
                let cc = plane[(2 * y + 1) * w + 2 * x];
                let d = plane[(2 * y + 1) * w + 2 * x + 1];
                let m1 = if b > a { b } else { a };
                let m2 = if d > cc { d } else { cc };
                out.push(if m2 > m1 { m2 } else { m1 });
            }
        }
    }
    out
}

/// Per-pixel index of the largest of `c` planes; ties go to the lowest index.
pub fn argmax_planes<T: PartialOrd + Copy>(data: &[T], c: usize, pixels: usize) -> Vec<u8> {
    (0..pixels)
        .map(|p| {
            let mut best = 0;
            for k in 1..c {
                if data[k * pixels + p] > data[best * pixels + p] {
                    best = k;
                }
            }
            best as u8
        })
        .collect()
}
