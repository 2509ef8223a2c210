//! Raw NCHW kernels behind the tape ops. Everything here works on flat slices.

use super::tensor::{Scalar, Tensor};

fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize, pad: usize, out: &mut [T]) {
    let ho = h + 2 * pad + 1 - k;
    let wo = w + 2 * pad + 1 - k;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * ho * wo;
                for oy in 0..ho {
                    let dst = &mut out[row + oy * wo..row + (oy + 1) * wo];
                    let sy = oy as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let shift = kx as isize - pad as isize;
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let sx = ox as isize + shift;
                        *d = if sx < 0 || sx >= w as isize {
                            T::zero()
                        } else {
                            src[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], c: usize, h: usize, w: usize, k: usize, pad: usize, dx: &mut [T]) {
    let ho = h + 2 * pad + 1 - k;
    let wo = w + 2 * pad + 1 - k;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * ho * wo;
                for oy in 0..ho {
                    let sy = oy as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &col[row + oy * wo..row + (oy + 1) * wo];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let shift = kx as isize - pad as isize;
                    for (ox, &g) in src.iter().enumerate() {
                        let sx = ox as isize + shift;
                        if sx >= 0 && sx < w as isize {
                            dst[sx as usize] += g;
                        }
                    }
                }
            }
        }
    }
}

/// Stride-1 cross-correlation, `x: [N, Cin, H, W]`, `w: [Cout, Cin, k, k]`.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, wt: &Tensor<T>, pad: usize) -> Tensor<T> {
    let (n, c, h, w) = dims4(x.shape());
    let (co, ci, k, k2) = dims4(wt.shape());
    assert_eq!(ci, c, "conv2d channel mismatch");
    assert_eq!(k, k2, "conv2d expects square kernels");
    let ho = h + 2 * pad + 1 - k;
    let wo = w + 2 * pad + 1 - k;
    let ckk = c * k * k;
    let direct = k == 1 && pad == 0;
    let mut col = if direct { Vec::new() } else { vec![T::zero(); ckk * ho * wo] };
    let mut out = vec![T::zero(); n * co * ho * wo];
    for b in 0..n {
        let xb = &x.data()[b * c * h * w..(b + 1) * c * h * w];
        let cols: &[T] = if direct {
            xb
        } else {
            im2col(xb, c, h, w, k, pad, &mut col);
            &col
        };
        T::gemm(
            co,
            ckk,
            ho * wo,
            T::one(),
            wt.data(),
            ckk as isize,
            1,
            cols,
            (ho * wo) as isize,
            1,
            T::zero(),
            &mut out[b * co * ho * wo..(b + 1) * co * ho * wo],
            (ho * wo) as isize,
            1,
        );
    }
    Tensor::new(&[n, co, ho, wo], out)
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    wt: &Tensor<T>,
    pad: usize,
    dy: &Tensor<T>,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (n, c, h, w) = dims4(x.shape());
    let (co, _, k, _) = dims4(wt.shape());
    let ho = h + 2 * pad + 1 - k;
    let wo = w + 2 * pad + 1 - k;
    let ckk = c * k * k;
    let hw = ho * wo;
    let direct = k == 1 && pad == 0;
    let mut col = if direct { Vec::new() } else { vec![T::zero(); ckk * hw] };
    let mut dcol = vec![T::zero(); ckk * hw];
    let mut dw = want_dw.then(|| vec![T::zero(); co * ckk]);
    let mut dx = want_dx.then(|| vec![T::zero(); x.len()]);
    for b in 0..n {
        let dyb = &dy.data()[b * co * hw..(b + 1) * co * hw];
        if let Some(dw) = dw.as_mut() {
            let xb = &x.data()[b * c * h * w..(b + 1) * c * h * w];
            let cols: &[T] = if direct {
                xb
            } else {
                im2col(xb, c, h, w, k, pad, &mut col);
                &col
            };
            // dW += dY [co, hw] * col^T [hw, ckk]
            T::gemm(
                co,
                hw,
                ckk,
                T::one(),
                dyb,
                hw as isize,
                1,
                cols,
                1,
                hw as isize,
                T::one(),
                dw,
                ckk as isize,
                1,
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * c * h * w..(b + 1) * c * h * w];
            // dcol = W^T [ckk, co] * dY [co, hw]
            let target: &mut [T] = if direct { dxb } else { &mut dcol };
            T::gemm(
                ckk,
                co,
                hw,
                T::one(),
                wt.data(),
                1,
                ckk as isize,
                dyb,
                hw as isize,
                1,
                T::zero(),
                target,
                hw as isize,
                1,
            );
            if !direct {
                col2im(&dcol, c, h, w, k, pad, dxb);
            }
        }
    }
    (
        dx.map(|d| Tensor::new(x.shape(), d)),
        dw.map(|d| Tensor::new(wt.shape(), d)),
    )
}

pub fn avg_pool2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = dims4(x.shape());
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let mut out = vec![T::zero(); n * c * ho * wo];
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for y in 0..ho {
            for xx in 0..wo {
                let i = 2 * y * w + 2 * xx;
                dst[y * wo + xx] = (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * quarter;
            }
        }
    }
    Tensor::new(&[n, c, ho, wo], out)
}

pub fn avg_pool2_backward<T: Scalar>(in_shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = dims4(in_shape);
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let mut dx = vec![T::zero(); n * c * h * w];
    for p in 0..n * c {
        let g = &dy.data()[p * ho * wo..(p + 1) * ho * wo];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..ho {
            for xx in 0..wo {
                let v = g[y * wo + xx] * quarter;
                let i = 2 * y * w + 2 * xx;
                dst[i] = v;
                dst[i + 1] = v;
                dst[i + w] = v;
                dst[i + w + 1] = v;
            }
        }
    }
    Tensor::new(in_shape, dx)
}

pub fn upsample2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = dims4(x.shape());
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); n * c * ho * wo];
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for y in 0..ho {
            for xx in 0..wo {
                dst[y * wo + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    Tensor::new(&[n, c, ho, wo], out)
}

pub fn upsample2_backward<T: Scalar>(in_shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = dims4(in_shape);
    let (ho, wo) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); n * c * h * w];
    for p in 0..n * c {
        let g = &dy.data()[p * ho * wo..(p + 1) * ho * wo];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..ho {
            for xx in 0..wo {
                dst[(y / 2) * w + xx / 2] += g[y * wo + xx];
            }
        }
    }
    Tensor::new(in_shape, dx)
}

/// Valid-mode `k x k` mean filter over the last two axes.
pub fn box_filter<T: Scalar>(x: &Tensor<T>, k: usize) -> Tensor<T> {
    let (lead, h, w) = split_last2(x.shape());
    assert!(k <= h && k <= w, "box filter larger than image");
    let (ho, wo) = (h + 1 - k, w + 1 - k);
    let norm = T::one() / T::of((k * k) as f64);
    let mut rows = vec![T::zero(); h * wo];
    let mut out = vec![T::zero(); lead * ho * wo];
    for p in 0..lead {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            let r = &src[y * w..(y + 1) * w];
            let mut acc: T = r[..k].iter().copied().sum();
            rows[y * wo] = acc;
            for xx in 1..wo {
                acc += r[xx + k - 1] - r[xx - 1];
                rows[y * wo + xx] = acc;
            }
        }
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for xx in 0..wo {
            for y in 0..ho {
                let mut s = T::zero();
                for a in 0..k {
                    s += rows[(y + a) * wo + xx];
                }
                dst[y * wo + xx] = s * norm;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    let nd = shape.len();
    shape[nd - 2] = ho;
    shape[nd - 1] = wo;
    Tensor::new(&shape, out)
}

pub fn box_filter_backward<T: Scalar>(in_shape: &[usize], k: usize, dy: &Tensor<T>) -> Tensor<T> {
    let (lead, h, w) = split_last2(in_shape);
    let (ho, wo) = (h + 1 - k, w + 1 - k);
    let norm = T::one() / T::of((k * k) as f64);
    let mut cols = vec![T::zero(); h * wo];
    let mut dx = vec![T::zero(); lead * h * w];
    for p in 0..lead {
        let g = &dy.data()[p * ho * wo..(p + 1) * ho * wo];
        cols.iter_mut().for_each(|v| *v = T::zero());
        for y in 0..ho {
            for a in 0..k {
                for xx in 0..wo {
                    cols[(y + a) * wo + xx] += g[y * wo + xx];
                }
            }
        }
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for xx in 0..wo {
                let v = cols[y * wo + xx] * norm;
                for b in 0..k {
                    dst[y * w + xx + b] += v;
                }
            }
        }
    }
    Tensor::new(in_shape, dx)
}

/// `y[s] = m * x[s]` for every trailing `[R, W]` slice, `m: [Ro, R]`.
pub fn mat_left<T: Scalar>(m: &Tensor<T>, x: &Tensor<T>, transpose_m: bool) -> Tensor<T> {
    let (lead, r, w) = split_last2(x.shape());
    let (mr, mc) = (m.shape()[0], m.shape()[1]);
    let (ro, inner, rs, cs) = if transpose_m {
        (mc, mr, 1, mc as isize)
    } else {
        (mr, mc, mc as isize, 1)
    };
    assert_eq!(inner, r, "mat_left inner dimension mismatch");
    let mut out = vec![T::zero(); lead * ro * w];
    for p in 0..lead {
        T::gemm(
            ro,
            r,
            w,
            T::one(),
            m.data(),
            rs,
            cs,
            &x.data()[p * r * w..(p + 1) * r * w],
            w as isize,
            1,
            T::zero(),
            &mut out[p * ro * w..(p + 1) * ro * w],
            w as isize,
            1,
        );
    }
    let mut shape = x.shape().to_vec();
    let nd = shape.len();
    shape[nd - 2] = ro;
    Tensor::new(&shape, out)
}

/// `y[s] = x[s] * m` for every trailing `[H, C]` slice, `m: [C, Co]`.
pub fn mat_right<T: Scalar>(x: &Tensor<T>, m: &Tensor<T>, transpose_m: bool) -> Tensor<T> {
    let (lead, h, c) = split_last2(x.shape());
    let (mr, mc) = (m.shape()[0], m.shape()[1]);
    let (inner, co, rs, cs) = if transpose_m {
        (mc, mr, 1, mc as isize)
    } else {
        (mr, mc, mc as isize, 1)
    };
    assert_eq!(inner, c, "mat_right inner dimension mismatch");
    let mut out = vec![T::zero(); lead * h * co];
    for p in 0..lead {
        T::gemm(
            h,
            c,
            co,
            T::one(),
            &x.data()[p * h * c..(p + 1) * h * c],
            c as isize,
            1,
            m.data(),
            rs,
            cs,
            T::zero(),
            &mut out[p * h * co..(p + 1) * h * co],
            co as isize,
            1,
        );
    }
    let mut shape = x.shape().to_vec();
    let nd = shape.len();
    shape[nd - 1] = co;
    Tensor::new(&shape, out)
}

pub(crate) fn dims4(s: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(s.len(), 4, "expected a rank-4 tensor, got shape {s:?}");
    (s[0], s[1], s[2], s[3])
}

pub(crate) fn split_last2(s: &[usize]) -> (usize, usize, usize) {
    assert!(s.len() >= 2, "expected rank >= 2, got shape {s:?}");
    let nd = s.len();
    (s[..nd - 2].iter().product(), s[nd - 2], s[nd - 1])
}
