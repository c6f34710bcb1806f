//! im2col convolution and resampling kernels behind the tape ops.

use super::{slot, Node, Scalar};
use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayD, ArrayViewD, ArrayViewMutD, Axis, IxDyn};

/// Output spatial dims of a 2-d convolution with square stride/pad.
pub fn conv2d_out_shape(
    in_hw: (usize, usize),
    k_hw: (usize, usize),
    stride: usize,
    pad: usize,
) -> (usize, usize) {
    assert!(stride > 0, "conv2d: zero stride");
    let (h, w) = in_hw;
    let (kh, kw) = k_hw;
    assert!(
        h + 2 * pad >= kh && w + 2 * pad >= kw,
        "conv2d: kernel larger than padded input"
    );
    ((h + 2 * pad - kh) / stride + 1, (w + 2 * pad - kw) / stride + 1)
}

/// Output spatial dims of a 3-d convolution with per-axis stride/pad.
pub fn conv3d_out_shape(
    in_dhw: (usize, usize, usize),
    k_dhw: (usize, usize, usize),
    stride: [usize; 3],
    pad: [usize; 3],
) -> (usize, usize, usize) {
    let dims = [in_dhw.0, in_dhw.1, in_dhw.2];
    let ks = [k_dhw.0, k_dhw.1, k_dhw.2];
    let mut out = [0usize; 3];
    for a in 0..3 {
        assert!(stride[a] > 0, "conv3d: zero stride");
        assert!(
            dims[a] + 2 * pad[a] >= ks[a],
            "conv3d: kernel larger than padded input"
        );
        out[a] = (dims[a] + 2 * pad[a] - ks[a]) / stride[a] + 1;
    }
    (out[0], out[1], out[2])
}

/// Unfold one (C,H,W) sample into (C·kh·kw, ho·wo) patch columns.
fn im2col2d<T: Scalar>(
    x: &ArrayViewD<T>,
    k: (usize, usize),
    stride: usize,
    pad: usize,
    out: (usize, usize),
) -> Array2<T> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw) = k;
    let (ho, wo) = out;
    let mut col = Array2::<T>::zeros((c * kh * kw, ho * wo));
    for ci in 0..c {
        for i in 0..kh {
            for j in 0..kw {
                let r = (ci * kh + i) * kw + j;
                for oh in 0..ho {
                    let ih = oh * stride + i;
                    if ih < pad || ih >= h + pad {
                        continue;
                    }
                    let ih = ih - pad;
                    for ow in 0..wo {
                        let iw = ow * stride + j;
                        if iw < pad || iw >= w + pad {
                            continue;
                        }
                        col[(r, oh * wo + ow)] = x[[ci, ih, iw - pad]];
                    }
                }
            }
        }
    }
    col
}

/// Fold patch-column gradients back onto one (C,H,W) sample, accumulating.
fn col2im2d<T: Scalar>(
    col: &Array2<T>,
    dx: &mut ArrayViewMutD<T>,
    k: (usize, usize),
    stride: usize,
    pad: usize,
    out: (usize, usize),
) {
    let (c, h, w) = (dx.shape()[0], dx.shape()[1], dx.shape()[2]);
    let (kh, kw) = k;
    let (ho, wo) = out;
    for ci in 0..c {
        for i in 0..kh {
            for j in 0..kw {
                let r = (ci * kh + i) * kw + j;
                for oh in 0..ho {
                    let ih = oh * stride + i;
                    if ih < pad || ih >= h + pad {
                        continue;
                    }
                    let ih = ih - pad;
                    for ow in 0..wo {
                        let iw = ow * stride + j;
                        if iw < pad || iw >= w + pad {
                            continue;
                        }
                        let iw = iw - pad;
                        dx[[ci, ih, iw]] = dx[[ci, ih, iw]] + col[(r, oh * wo + ow)];
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    x: &ArrayD<T>,
    w: &ArrayD<T>,
    b: Option<&ArrayD<T>>,
    stride: usize,
    pad: usize,
) -> ArrayD<T> {
    assert_eq!(x.ndim(), 4, "conv2d: x must be (N,C,H,W)");
    assert_eq!(w.ndim(), 4, "conv2d: w must be (O,C,kh,kw)");
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, cw, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(c, cw, "conv2d: channel mismatch");
    if let Some(bias) = b {
        assert_eq!(bias.len(), o, "conv2d: bias dim mismatch");
    }
    let (ho, wo) = conv2d_out_shape((h, wd), (kh, kw), stride, pad);
    let wstd = w.as_standard_layout();
    let wmat = wstd
        .view()
        .into_shape_with_order((o, c * kh * kw))
        .unwrap();
    let mut y = ArrayD::<T>::zeros(IxDyn(&[n, o, ho, wo]));
    for ni in 0..n {
        let col = im2col2d(&x.index_axis(Axis(0), ni), (kh, kw), stride, pad, (ho, wo));
        let mut yn = Array2::<T>::zeros((o, ho * wo));
        general_mat_mul(T::one(), &wmat, &col.view(), T::zero(), &mut yn);
        if let Some(bias) = b {
            for oi in 0..o {
                let bv = bias[IxDyn(&[oi])];
                yn.row_mut(oi).mapv_inplace(|v| v + bv);
            }
        }
        y.index_axis_mut(Axis(0), ni)
            .assign(&yn.into_shape_with_order((o, ho, wo)).unwrap());
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Scalar>(
    nodes: &[Node<T>],
    _id: usize,
    g: &ArrayD<T>,
    grads: &mut [Option<ArrayD<T>>],
    x: usize,
    w: usize,
    b: Option<usize>,
    stride: usize,
    pad: usize,
) {
    let need_x = nodes[x].needs_grad;
    let need_w = nodes[w].needs_grad;
    let need_b = b.map(|bi| nodes[bi].needs_grad).unwrap_or(false);
    if !(need_x || need_w || need_b) {
        return;
    }
    let xv = &nodes[x].value;
    let wv = &nodes[w].value;
    let (n, c) = (xv.shape()[0], xv.shape()[1]);
    let (o, kh, kw) = (wv.shape()[0], wv.shape()[2], wv.shape()[3]);
    let (ho, wo) = (g.shape()[2], g.shape()[3]);
    let wstd = wv.as_standard_layout();
    let wmat = wstd
        .view()
        .into_shape_with_order((o, c * kh * kw))
        .unwrap();
    let mut dwmat = Array2::<T>::zeros((o, c * kh * kw));
    let mut dx_local = if need_x {
        Some(ArrayD::<T>::zeros(IxDyn(xv.shape())))
    } else {
        None
    };
    for ni in 0..n {
        let gn_view = g.index_axis(Axis(0), ni);
        let gn_std = gn_view.as_standard_layout();
        let gn = gn_std.view().into_shape_with_order((o, ho * wo)).unwrap();
        if need_w {
            let col = im2col2d(&xv.index_axis(Axis(0), ni), (kh, kw), stride, pad, (ho, wo));
            general_mat_mul(T::one(), &gn, &col.t(), T::one(), &mut dwmat);
        }
        if let Some(dx) = dx_local.as_mut() {
            let mut dcol = Array2::<T>::zeros((c * kh * kw, ho * wo));
            general_mat_mul(T::one(), &wmat.t(), &gn, T::zero(), &mut dcol);
            let mut dxn = dx.index_axis_mut(Axis(0), ni);
            col2im2d(&dcol, &mut dxn, (kh, kw), stride, pad, (ho, wo));
        }
    }
    if need_w {
        let dw = dwmat
            .into_shape_with_order((o, c, kh, kw))
            .unwrap()
            .into_dyn();
        *slot(grads, w, wv.shape()) += &dw;
    }
    if let Some(dx) = dx_local {
        *slot(grads, x, xv.shape()) += &dx;
    }
    if need_b {
        let bi = b.unwrap();
        let db = slot(grads, bi, nodes[bi].value.shape());
        for oi in 0..o {
            let gsum = g.index_axis(Axis(1), oi).sum();
            db[IxDyn(&[oi])] = db[IxDyn(&[oi])] + gsum;
        }
    }
}

/// Unfold one (C,D,H,W) sample into (C·kd·kh·kw, do·ho·wo) patch columns.
fn im2col3d<T: Scalar>(
    x: &ArrayViewD<T>,
    k: (usize, usize, usize),
    stride: [usize; 3],
    pad: [usize; 3],
    out: (usize, usize, usize),
) -> Array2<T> {
    let (c, d, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (kd, kh, kw) = k;
    let (dd, ho, wo) = out;
    let mut col = Array2::<T>::zeros((c * kd * kh * kw, dd * ho * wo));
    for ci in 0..c {
        for di in 0..kd {
            for i in 0..kh {
                for j in 0..kw {
                    let r = ((ci * kd + di) * kh + i) * kw + j;
                    for od in 0..dd {
                        let idd = od * stride[0] + di;
                        if idd < pad[0] || idd >= d + pad[0] {
                            continue;
                        }
                        let idd = idd - pad[0];
                        for oh in 0..ho {
                            let ih = oh * stride[1] + i;
                            if ih < pad[1] || ih >= h + pad[1] {
                                continue;
                            }
                            let ih = ih - pad[1];
                            for ow in 0..wo {
                                let iw = ow * stride[2] + j;
                                if iw < pad[2] || iw >= w + pad[2] {
                                    continue;
                                }
                                let iw = iw - pad[2];
                                col[(r, (od * ho + oh) * wo + ow)] = x[[ci, idd, ih, iw]];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im3d<T: Scalar>(
    col: &Array2<T>,
    dx: &mut ArrayViewMutD<T>,
    k: (usize, usize, usize),
    stride: [usize; 3],
    pad: [usize; 3],
    out: (usize, usize, usize),
) {
    let (c, d, h, w) = (dx.shape()[0], dx.shape()[1], dx.shape()[2], dx.shape()[3]);
    let (kd, kh, kw) = k;
    let (dd, ho, wo) = out;
    for ci in 0..c {
        for di in 0..kd {
            for i in 0..kh {
                for j in 0..kw {
                    let r = ((ci * kd + di) * kh + i) * kw + j;
                    for od in 0..dd {
                        let idd = od * stride[0] + di;
                        if idd < pad[0] || idd >= d + pad[0] {
                            continue;
                        }
                        let idd = idd - pad[0];
                        for oh in 0..ho {
                            let ih = oh * stride[1] + i;
                            if ih < pad[1] || ih >= h + pad[1] {
                                continue;
                            }
                            let ih = ih - pad[1];
                            for ow in 0..wo {
                                let iw = ow * stride[2] + j;
                                if iw < pad[2] || iw >= w + pad[2] {
                                    continue;
                                }
                                let iw = iw - pad[2];
                                dx[[ci, idd, ih, iw]] =
                                    dx[[ci, idd, ih, iw]] + col[(r, (od * ho + oh) * wo + ow)];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv3d_forward<T: Scalar>(
    x: &ArrayD<T>,
    w: &ArrayD<T>,
    b: Option<&ArrayD<T>>,
    stride: [usize; 3],
    pad: [usize; 3],
) -> ArrayD<T> {
    assert_eq!(x.ndim(), 5, "conv3d: x must be (N,C,D,H,W)");
    assert_eq!(w.ndim(), 5, "conv3d: w must be (O,C,kd,kh,kw)");
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let (d, h, wd) = (x.shape()[2], x.shape()[3], x.shape()[4]);
    let (o, cw) = (w.shape()[0], w.shape()[1]);
    let (kd, kh, kw) = (w.shape()[2], w.shape()[3], w.shape()[4]);
    assert_eq!(c, cw, "conv3d: channel mismatch");
    if let Some(bias) = b {
        assert_eq!(bias.len(), o, "conv3d: bias dim mismatch");
    }
    let (dd, ho, wo) = conv3d_out_shape((d, h, wd), (kd, kh, kw), stride, pad);
    let wstd = w.as_standard_layout();
    let wmat = wstd
        .view()
        .into_shape_with_order((o, c * kd * kh * kw))
        .unwrap();
    let mut y = ArrayD::<T>::zeros(IxDyn(&[n, o, dd, ho, wo]));
    for ni in 0..n {
        let col = im2col3d(
            &x.index_axis(Axis(0), ni),
            (kd, kh, kw),
            stride,
            pad,
            (dd, ho, wo),
        );
        let mut yn = Array2::<T>::zeros((o, dd * ho * wo));
        general_mat_mul(T::one(), &wmat, &col.view(), T::zero(), &mut yn);
        if let Some(bias) = b {
            for oi in 0..o {
                let bv = bias[IxDyn(&[oi])];
                yn.row_mut(oi).mapv_inplace(|v| v + bv);
            }
        }
        y.index_axis_mut(Axis(0), ni)
            .assign(&yn.into_shape_with_order((o, dd, ho, wo)).unwrap());
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3d_backward<T: Scalar>(
    nodes: &[Node<T>],
    _id: usize,
    g: &ArrayD<T>,
    grads: &mut [Option<ArrayD<T>>],
    x: usize,
    w: usize,
    b: Option<usize>,
    stride: [usize; 3],
    pad: [usize; 3],
) {
    let need_x = nodes[x].needs_grad;
    let need_w = nodes[w].needs_grad;
    let need_b = b.map(|bi| nodes[bi].needs_grad).unwrap_or(false);
    if !(need_x || need_w || need_b) {
        return;
    }
    let xv = &nodes[x].value;
    let wv = &nodes[w].value;
    let (n, c) = (xv.shape()[0], xv.shape()[1]);
    let (o, kd, kh, kw) = (wv.shape()[0], wv.shape()[2], wv.shape()[3], wv.shape()[4]);
    let (dd, ho, wo) = (g.shape()[2], g.shape()[3], g.shape()[4]);
    let wstd = wv.as_standard_layout();
    let wmat = wstd
        .view()
        .into_shape_with_order((o, c * kd * kh * kw))
        .unwrap();
    let mut dwmat = Array2::<T>::zeros((o, c * kd * kh * kw));
    let mut dx_local = if need_x {
        Some(ArrayD::<T>::zeros(IxDyn(xv.shape())))
    } else {
        None
    };
    for ni in 0..n {
        let gn_view = g.index_axis(Axis(0), ni);
        let gn_std = gn_view.as_standard_layout();
        let gn = gn_std
            .view()
            .into_shape_with_order((o, dd * ho * wo))
            .unwrap();
        if need_w {
            let col = im2col3d(
                &xv.index_axis(Axis(0), ni),
                (kd, kh, kw),
                stride,
                pad,
                (dd, ho, wo),
            );
            general_mat_mul(T::one(), &gn, &col.t(), T::one(), &mut dwmat);
        }
        if let Some(dx) = dx_local.as_mut() {
            let mut dcol = Array2::<T>::zeros((c * kd * kh * kw, dd * ho * wo));
            general_mat_mul(T::one(), &wmat.t(), &gn, T::zero(), &mut dcol);
            let mut dxn = dx.index_axis_mut(Axis(0), ni);
            col2im3d(&dcol, &mut dxn, (kd, kh, kw), stride, pad, (dd, ho, wo));
        }
    }
    if need_w {
        let dw = dwmat
            .into_shape_with_order((o, c, kd, kh, kw))
            .unwrap()
            .into_dyn();
        *slot(grads, w, wv.shape()) += &dw;
    }
    if let Some(dx) = dx_local {
        *slot(grads, x, xv.shape()) += &dx;
    }
    if need_b {
        let bi = b.unwrap();
        let db = slot(grads, bi, nodes[bi].value.shape());
        for oi in 0..o {
            let gsum = g.index_axis(Axis(1), oi).sum();
            db[IxDyn(&[oi])] = db[IxDyn(&[oi])] + gsum;
        }
    }
}

pub(crate) fn upsample2x_forward<T: Scalar>(x: &ArrayD<T>) -> ArrayD<T> {
    assert_eq!(x.ndim(), 4, "upsample2x: x must be (N,C,H,W)");
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut y = ArrayD::<T>::zeros(IxDyn(&[n, c, 2 * h, 2 * w]));
    for ni in 0..n {
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    let v = x[[ni, ci, hi, wi]];
                    y[[ni, ci, 2 * hi, 2 * wi]] = v;
                    y[[ni, ci, 2 * hi, 2 * wi + 1]] = v;
                    y[[ni, ci, 2 * hi + 1, 2 * wi]] = v;
                    y[[ni, ci, 2 * hi + 1, 2 * wi + 1]] = v;
                }
            }
        }
    }
    y
}

pub(crate) fn upsample2x_backward<T: Scalar>(g: &ArrayD<T>) -> ArrayD<T> {
    let (n, c, h2, w2) = (g.shape()[0], g.shape()[1], g.shape()[2], g.shape()[3]);
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = ArrayD::<T>::zeros(IxDyn(&[n, c, h, w]));
    for ni in 0..n {
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    dx[[ni, ci, hi, wi]] = g[[ni, ci, 2 * hi, 2 * wi]]
                        + g[[ni, ci, 2 * hi, 2 * wi + 1]]
                        + g[[ni, ci, 2 * hi + 1, 2 * wi]]
                        + g[[ni, ci, 2 * hi + 1, 2 * wi + 1]];
                }
            }
        }
    }
    dx
}
