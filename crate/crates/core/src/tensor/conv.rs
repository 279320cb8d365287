use super::Real;
use crate::error::{shape_err, Result};

/// Output extent of a strided, zero-padded cross-correlation.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return shape_err("stride must be at least 1");
    }
    if kernel == 0 || kernel > input + 2 * pad {
        return shape_err(format!(
            "kernel {kernel} does not fit input {input} with padding {pad}"
        ));
    }
    Ok((input + 2 * pad - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

fn geometry(x_shape: &[usize], w_shape: &[usize], stride: usize, pad: usize) -> Result<Geometry> {
    if x_shape.len() != 4 || w_shape.len() != 4 {
        return shape_err(format!(
            "conv2d expects [N,C,H,W] input and [Co,Ci,k,k] weight, got {x_shape:?} and {w_shape:?}"
        ));
    }
    let (n, c_in, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (c_out, wc_in, kh, kw) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
    if wc_in != c_in {
        return shape_err(format!(
            "conv2d channel mismatch: input has {c_in} channels, weight expects {wc_in}"
        ));
    }
    if kh != kw {
        return shape_err(format!("conv2d expects square kernels, got {kh}x{kw}"));
    }
    let oh = conv_out_extent(h, kh, stride, pad)?;
    let ow = conv_out_extent(w, kw, stride, pad)?;
    Ok(Geometry {
        n,
        c_in,
        h,
        w,
        c_out,
        k: kh,
        stride,
        pad,
        oh,
        ow,
    })
}

/// Range of output positions `o` for which `o*stride + tap - pad` lands inside `[0, extent)`.
#[inline]
fn valid_range(out: usize, extent: usize, tap: usize, stride: usize, pad: usize) -> (usize, usize) {
    // o*stride + tap >= pad  and  o*stride + tap - pad < extent
    let lo = if tap >= pad {
        0
    } else {
        (pad - tap).div_ceil(stride)
    };
    let limit = extent + pad; // o*stride + tap < limit
    let hi = if limit <= tap {
        0
    } else {
        ((limit - tap - 1) / stride + 1).min(out)
    };
    (lo.min(hi), hi)
}

/// Direct cross-correlation; returns the output and its shape `[N, Co, H', W']`.
pub fn conv2d_forward<T: Real>(
    x: &[T],
    x_shape: &[usize],
    weight: &[T],
    w_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Result<(Vec<T>, Vec<usize>)> {
    let g = geometry(x_shape, w_shape, stride, pad)?;
    let mut out = vec![T::zero(); g.n * g.c_out * g.oh * g.ow];
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    for n in 0..g.n {
        for co in 0..g.c_out {
            let o_base = (n * g.c_out + co) * plane_out;
            for ci in 0..g.c_in {
                let x_base = (n * g.c_in + ci) * plane_in;
                for kh in 0..g.k {
                    let (oh_lo, oh_hi) = valid_range(g.oh, g.h, kh, g.stride, g.pad);
                    for kw in 0..g.k {
                        let wv = weight[((co * g.c_in + ci) * g.k + kh) * g.k + kw];
                        if wv == T::zero() {
                            continue;
                        }
                        let (ow_lo, ow_hi) = valid_range(g.ow, g.w, kw, g.stride, g.pad);
                        for oh in oh_lo..oh_hi {
                            let ih = oh * g.stride + kh - g.pad;
                            let orow = &mut out[o_base + oh * g.ow..o_base + (oh + 1) * g.ow];
                            let xrow = &x[x_base + ih * g.w..x_base + (ih + 1) * g.w];
                            for ow in ow_lo..ow_hi {
                                let iw = ow * g.stride + kw - g.pad;
                                orow[ow] = orow[ow] + wv * xrow[iw];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((out, vec![g.n, g.c_out, g.oh, g.ow]))
}

/// Gradients of a cross-correlation w.r.t. its input and weight.
pub fn conv2d_backward<T: Real>(
    x: &[T],
    x_shape: &[usize],
    weight: &[T],
    w_shape: &[usize],
    stride: usize,
    pad: usize,
    upstream: &[T],
) -> Result<(Vec<T>, Vec<T>)> {
    let g = geometry(x_shape, w_shape, stride, pad)?;
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); weight.len()];
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    for n in 0..g.n {
        for co in 0..g.c_out {
            let o_base = (n * g.c_out + co) * plane_out;
            for ci in 0..g.c_in {
                let x_base = (n * g.c_in + ci) * plane_in;
                for kh in 0..g.k {
                    let (oh_lo, oh_hi) = valid_range(g.oh, g.h, kh, g.stride, g.pad);
                    for kw in 0..g.k {
                        let w_idx = ((co * g.c_in + ci) * g.k + kh) * g.k + kw;
                        let wv = weight[w_idx];
                        let (ow_lo, ow_hi) = valid_range(g.ow, g.w, kw, g.stride, g.pad);
                        let mut acc = T::zero();
                        for oh in oh_lo..oh_hi {
                            let ih = oh * g.stride + kh - g.pad;
                            let urow = &upstream[o_base + oh * g.ow..o_base + (oh + 1) * g.ow];
                            let row_start = x_base + ih * g.w;
                            for ow in ow_lo..ow_hi {
                                let iw = ow * g.stride + kw - g.pad;
                                let u = urow[ow];
                                acc = acc + u * x[row_start + iw];
                                dx[row_start + iw] = dx[row_start + iw] + wv * u;
                            }
                        }
                        dw[w_idx] = dw[w_idx] + acc;
                    }
                }
            }
        }
    }
    Ok((dx, dw))
}
