//! Raw numeric kernels behind the tape ops. All take and return owned
//! `ndarray` arrays in NCHW layout. Matrix products go through `ndarray::dot`
//! (matrixmultiply), everything else is explicit loops.

use ndarray::{Array1, Array2, Array4, ArrayView2, ArrayView4, Axis};

/// Output spatial size of a strided convolution.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Output spatial size of a transposed convolution.
pub fn conv_transpose_out_size(
    input: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> usize {
    (input - 1) * stride + kernel + out_pad - 2 * pad
}

/// Gather patches of `x` (C,H,W view flattened into `x_c`) into a
/// (C*kh*kw, oh*ow) matrix. `oh`/`ow` define the output grid explicitly so
/// the same routine serves both conv forward and transposed-conv backward.
fn im2col(
    x: &ArrayView2<f32>, // (C, H*W)
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<f32> {
    let mut col = Array2::<f32>::zeros((c * kh * kw, oh * ow));
    for ci in 0..c {
        let xrow = x.row(ci);
        let xs = xrow.as_slice().expect("contiguous row");
        for ky in 0..kh {
            for kx in 0..kw {
                let r = (ci * kh + ky) * kw + kx;
                let mut crow = col.row_mut(r);
                let cs = crow.as_slice_mut().expect("contiguous row");
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base_in = iy as usize * w;
                    let base_out = oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            cs[base_out + ox] = xs[base_in + ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add the inverse of [`im2col`]: accumulate a (C*kh*kw, gh*gw)
/// matrix of patch values back into a (C, H*W) image.
fn col2im(
    col: &ArrayView2<f32>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    gh: usize,
    gw: usize,
) -> Array2<f32> {
    let mut x = Array2::<f32>::zeros((c, h * w));
    for ci in 0..c {
        let mut xrow = x.row_mut(ci);
        let xs = xrow.as_slice_mut().expect("contiguous row");
        for ky in 0..kh {
            for kx in 0..kw {
                let r = (ci * kh + ky) * kw + kx;
                let crow = col.row(r);
                let cs = crow.as_slice().expect("contiguous row");
                for gy in 0..gh {
                    let iy = (gy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base_out = iy as usize * w;
                    let base_in = gy * gw;
                    for gx in 0..gw {
                        let ix = (gx * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            xs[base_out + ix as usize] += cs[base_in + gx];
                        }
                    }
                }
            }
        }
    }
    x
}

fn as_mat(x: &ArrayView4<f32>, n: usize) -> Array2<f32> {
    let (_, c, h, w) = dims4(x);
    x.index_axis(Axis(0), n)
        .to_owned()
        .into_shape_with_order((c, h * w))
        .expect("reshape")
}

fn dims4(x: &ArrayView4<f32>) -> (usize, usize, usize, usize) {
    let d = x.dim();
    (d.0, d.1, d.2, d.3)
}

/// Strided 2-D convolution, weight layout (Cout, Cin, kh, kw).
pub fn conv2d(
    x: &ArrayView4<f32>,
    w: &ArrayView4<f32>,
    bias: Option<&Array1<f32>>,
    stride: usize,
    pad: usize,
) -> Array4<f32> {
    let (n, cin, h, wd) = dims4(x);
    let (cout, cin_w, kh, kw) = dims4(w);
    assert_eq!(cin, cin_w, "conv2d channel mismatch");
    let oh = conv_out_size(h, kh, stride, pad);
    let ow = conv_out_size(wd, kw, stride, pad);
    let w_mat = w
        .to_owned()
        .into_shape_with_order((cout, cin * kh * kw))
        .expect("reshape");
    let mut y = Array4::<f32>::zeros((n, cout, oh, ow));
    for ni in 0..n {
        let x_mat = as_mat(x, ni);
        let col = im2col(&x_mat.view(), cin, h, wd, kh, kw, stride, pad, oh, ow);
        let mut y_mat = w_mat.dot(&col);
        if let Some(b) = bias {
            for co in 0..cout {
                y_mat.row_mut(co).mapv_inplace(|v| v + b[co]);
            }
        }
        y.index_axis_mut(Axis(0), ni).assign(
            &y_mat
                .into_shape_with_order((cout, oh, ow))
                .expect("reshape"),
        );
    }
    y
}

/// Gradients of [`conv2d`] w.r.t. input, weight, and bias.
pub fn conv2d_backward(
    x: &ArrayView4<f32>,
    w: &ArrayView4<f32>,
    dy: &ArrayView4<f32>,
    stride: usize,
    pad: usize,
) -> (Array4<f32>, Array4<f32>, Array1<f32>) {
    let (n, cin, h, wd) = dims4(x);
    let (cout, _, kh, kw) = dims4(w);
    let (_, _, oh, ow) = dims4(dy);
    let w_mat = w
        .to_owned()
        .into_shape_with_order((cout, cin * kh * kw))
        .expect("reshape");
    let mut dx = Array4::<f32>::zeros((n, cin, h, wd));
    let mut dw_mat = Array2::<f32>::zeros((cout, cin * kh * kw));
    let mut db = Array1::<f32>::zeros(cout);
    for ni in 0..n {
        let x_mat = as_mat(x, ni);
        let dy_mat = as_mat(dy, ni); // (cout, oh*ow)
        let col = im2col(&x_mat.view(), cin, h, wd, kh, kw, stride, pad, oh, ow);
        dw_mat = dw_mat + dy_mat.dot(&col.t());
        let dcol = w_mat.t().dot(&dy_mat); // (cin*kh*kw, oh*ow)
        let dx_mat = col2im(&dcol.view(), cin, h, wd, kh, kw, stride, pad, oh, ow);
        dx.index_axis_mut(Axis(0), ni).assign(
            &dx_mat
                .into_shape_with_order((cin, h, wd))
                .expect("reshape"),
        );
        for co in 0..cout {
            db[co] += dy_mat.row(co).sum();
        }
    }
    let dw = dw_mat
        .into_shape_with_order((cout, cin, kh, kw))
        .expect("reshape");
    (dx, dw, db)
}

/// Transposed 2-D convolution, weight layout (Cin, Cout, kh, kw).
pub fn conv_transpose2d(
    x: &ArrayView4<f32>,
    w: &ArrayView4<f32>,
    bias: Option<&Array1<f32>>,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Array4<f32> {
    let (n, cin, ih, iw) = dims4(x);
    let (cin_w, cout, kh, kw) = dims4(w);
    assert_eq!(cin, cin_w, "conv_transpose2d channel mismatch");
    let oh = conv_transpose_out_size(ih, kh, stride, pad, out_pad);
    let ow = conv_transpose_out_size(iw, kw, stride, pad, out_pad);
    let w_mat = w
        .to_owned()
        .into_shape_with_order((cin, cout * kh * kw))
        .expect("reshape");
    let mut y = Array4::<f32>::zeros((n, cout, oh, ow));
    for ni in 0..n {
        let x_mat = as_mat(x, ni); // (cin, ih*iw)
        let tmp = w_mat.t().dot(&x_mat); // (cout*kh*kw, ih*iw)
        let y_mat = col2im(&tmp.view(), cout, oh, ow, kh, kw, stride, pad, ih, iw);
        let mut y_img = y_mat
            .into_shape_with_order((cout, oh, ow))
            .expect("reshape");
        if let Some(b) = bias {
            for co in 0..cout {
                y_img.index_axis_mut(Axis(0), co).mapv_inplace(|v| v + b[co]);
            }
        }
        y.index_axis_mut(Axis(0), ni).assign(&y_img);
    }
    y
}

/// Gradients of [`conv_transpose2d`] w.r.t. input, weight, and bias.
pub fn conv_transpose2d_backward(
    x: &ArrayView4<f32>,
    w: &ArrayView4<f32>,
    dy: &ArrayView4<f32>,
    stride: usize,
    pad: usize,
) -> (Array4<f32>, Array4<f32>, Array1<f32>) {
    let (n, cin, ih, iw) = dims4(x);
    let (_, cout, kh, kw) = dims4(w);
    let (_, _, oh, ow) = dims4(dy);
    let w_mat = w
        .to_owned()
        .into_shape_with_order((cin, cout * kh * kw))
        .expect("reshape");
    let mut dx = Array4::<f32>::zeros((n, cin, ih, iw));
    let mut dw_mat = Array2::<f32>::zeros((cin, cout * kh * kw));
    let mut db = Array1::<f32>::zeros(cout);
    for ni in 0..n {
        let x_mat = as_mat(x, ni);
        let dy_mat = as_mat(dy, ni); // (cout, oh*ow)
        // dtmp[(co,ky,kx),(iy,ix)] = dy[co, iy*s+ky-p, ix*s+kx-p]
        let dtmp = im2col(&dy_mat.view(), cout, oh, ow, kh, kw, stride, pad, ih, iw);
        let dx_mat = w_mat.dot(&dtmp); // (cin, ih*iw)
        dx.index_axis_mut(Axis(0), ni).assign(
            &dx_mat
                .into_shape_with_order((cin, ih, iw))
                .expect("reshape"),
        );
        dw_mat = dw_mat + x_mat.dot(&dtmp.t());
        for co in 0..cout {
            db[co] += dy_mat.row(co).sum();
        }
    }
    let dw = dw_mat
        .into_shape_with_order((cin, cout, kh, kw))
        .expect("reshape");
    (dx, dw, db)
}

/// Nearest-neighbor upsampling by an integer factor.
pub fn upsample_nearest(x: &ArrayView4<f32>, factor: usize) -> Array4<f32> {
    let (n, c, h, w) = dims4(x);
    let mut y = Array4::<f32>::zeros((n, c, h * factor, w * factor));
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..h * factor {
                for ox in 0..w * factor {
                    y[[ni, ci, oy, ox]] = x[[ni, ci, oy / factor, ox / factor]];
                }
            }
        }
    }
    y
}

/// Backward of nearest upsampling: block-sum the output gradient.
pub fn upsample_nearest_backward(dy: &ArrayView4<f32>, factor: usize) -> Array4<f32> {
    let (n, c, oh, ow) = dims4(dy);
    let (h, w) = (oh / factor, ow / factor);
    let mut dx = Array4::<f32>::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    dx[[ni, ci, oy / factor, ox / factor]] += dy[[ni, ci, oy, ox]];
                }
            }
        }
    }
    dx
}

/// Source taps for 1-D bilinear resampling (half-pixel-center convention).
fn bilinear_taps(out: usize, factor: usize, in_size: usize) -> Vec<(usize, usize, f32)> {
    (0..out)
        .map(|o| {
            let src = (o as f32 + 0.5) / factor as f32 - 0.5;
            let s0 = src.floor();
            let t = src - s0;
            let i0 = (s0 as isize).clamp(0, in_size as isize - 1) as usize;
            let i1 = (s0 as isize + 1).clamp(0, in_size as isize - 1) as usize;
            (i0, i1, t)
        })
        .collect()
}

/// Bilinear upsampling by an integer factor.
pub fn upsample_bilinear(x: &ArrayView4<f32>, factor: usize) -> Array4<f32> {
    let (n, c, h, w) = dims4(x);
    let (oh, ow) = (h * factor, w * factor);
    let ty = bilinear_taps(oh, factor, h);
    let tx = bilinear_taps(ow, factor, w);
    let mut y = Array4::<f32>::zeros((n, c, oh, ow));
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                let (y0, y1, wy) = ty[oy];
                for ox in 0..ow {
                    let (x0, x1, wx) = tx[ox];
                    y[[ni, ci, oy, ox]] = (1.0 - wy) * (1.0 - wx) * x[[ni, ci, y0, x0]]
                        + (1.0 - wy) * wx * x[[ni, ci, y0, x1]]
                        + wy * (1.0 - wx) * x[[ni, ci, y1, x0]]
                        + wy * wx * x[[ni, ci, y1, x1]];
                }
            }
        }
    }
    y
}

/// Backward of bilinear upsampling: scatter with the same taps.
pub fn upsample_bilinear_backward(
    dy: &ArrayView4<f32>,
    factor: usize,
    h: usize,
    w: usize,
) -> Array4<f32> {
    let (n, c, oh, ow) = dims4(dy);
    let ty = bilinear_taps(oh, factor, h);
    let tx = bilinear_taps(ow, factor, w);
    let mut dx = Array4::<f32>::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                let (y0, y1, wy) = ty[oy];
                for ox in 0..ow {
                    let (x0, x1, wx) = tx[ox];
                    let g = dy[[ni, ci, oy, ox]];
                    dx[[ni, ci, y0, x0]] += (1.0 - wy) * (1.0 - wx) * g;
                    dx[[ni, ci, y0, x1]] += (1.0 - wy) * wx * g;
                    dx[[ni, ci, y1, x0]] += wy * (1.0 - wx) * g;
                    dx[[ni, ci, y1, x1]] += wy * wx * g;
                }
            }
        }
    }
    dx
}

/// 2x2 average pooling with stride 2.
pub fn avg_pool2(x: &ArrayView4<f32>) -> Array4<f32> {
    let (n, c, h, w) = dims4(x);
    assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even spatial dims");
    let mut y = Array4::<f32>::zeros((n, c, h / 2, w / 2));
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..h / 2 {
                for ox in 0..w / 2 {
                    y[[ni, ci, oy, ox]] = 0.25
                        * (x[[ni, ci, 2 * oy, 2 * ox]]
                            + x[[ni, ci, 2 * oy, 2 * ox + 1]]
                            + x[[ni, ci, 2 * oy + 1, 2 * ox]]
                            + x[[ni, ci, 2 * oy + 1, 2 * ox + 1]]);
                }
            }
        }
    }
    y
}

pub fn avg_pool2_backward(dy: &ArrayView4<f32>) -> Array4<f32> {
    let (n, c, oh, ow) = dims4(dy);
    let mut dx = Array4::<f32>::zeros((n, c, oh * 2, ow * 2));
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = 0.25 * dy[[ni, ci, oy, ox]];
                    dx[[ni, ci, 2 * oy, 2 * ox]] += g;
                    dx[[ni, ci, 2 * oy, 2 * ox + 1]] += g;
                    dx[[ni, ci, 2 * oy + 1, 2 * ox]] += g;
                    dx[[ni, ci, 2 * oy + 1, 2 * ox + 1]] += g;
                }
            }
        }
    }
    dx
}

/// Backward bilinear warp: `out(y,x) = frame(y - v, x - u)` with border clamp,
/// where flow channel 0 is the horizontal displacement `u` and channel 1 the
/// vertical displacement `v`. The sign convention makes a frame translated by
/// (+dx, +dy) recoverable from its source with flow exactly (dx, dy).
pub fn warp(frame: &ArrayView4<f32>, flow: &ArrayView4<f32>) -> Array4<f32> {
    let (n, c, h, w) = dims4(frame);
    let mut out = Array4::<f32>::zeros((n, c, h, w));
    for ni in 0..n {
        for y in 0..h {
            for x in 0..w {
                let u = flow[[ni, 0, y, x]];
                let v = flow[[ni, 1, y, x]];
                let sx = x as f32 - u;
                let sy = y as f32 - v;
                let (x0, x1, wx) = clamp_taps(sx, w);
                let (y0, y1, wy) = clamp_taps(sy, h);
                for ci in 0..c {
                    out[[ni, ci, y, x]] = (1.0 - wy) * (1.0 - wx) * frame[[ni, ci, y0, x0]]
                        + (1.0 - wy) * wx * frame[[ni, ci, y0, x1]]
                        + wy * (1.0 - wx) * frame[[ni, ci, y1, x0]]
                        + wy * wx * frame[[ni, ci, y1, x1]];
                }
            }
        }
    }
    out
}

fn clamp_taps(s: f32, size: usize) -> (usize, usize, f32) {
    let s0 = s.floor();
    let t = s - s0;
    let i0 = (s0 as isize).clamp(0, size as isize - 1) as usize;
    let i1 = (s0 as isize + 1).clamp(0, size as isize - 1) as usize;
    (i0, i1, t)
}

/// Gradients of [`warp`] w.r.t. the frame and the flow field. Positions
/// clamped at the border get zero positional gradient.
pub fn warp_backward(
    frame: &ArrayView4<f32>,
    flow: &ArrayView4<f32>,
    dy: &ArrayView4<f32>,
) -> (Array4<f32>, Array4<f32>) {
    let (n, c, h, w) = dims4(frame);
    let mut dframe = Array4::<f32>::zeros((n, c, h, w));
    let mut dflow = Array4::<f32>::zeros((n, 2, h, w));
    for ni in 0..n {
        for y in 0..h {
            for x in 0..w {
                let u = flow[[ni, 0, y, x]];
                let v = flow[[ni, 1, y, x]];
                let sx = x as f32 - u;
                let sy = y as f32 - v;
                let (x0, x1, wx) = clamp_taps(sx, w);
                let (y0, y1, wy) = clamp_taps(sy, h);
                let in_x = sx > 0.0 && sx < (w - 1) as f32;
                let in_y = sy > 0.0 && sy < (h - 1) as f32;
                let mut gu = 0.0f32;
                let mut gv = 0.0f32;
                for ci in 0..c {
                    let g = dy[[ni, ci, y, x]];
                    if g == 0.0 {
                        continue;
                    }
                    let f00 = frame[[ni, ci, y0, x0]];
                    let f01 = frame[[ni, ci, y0, x1]];
                    let f10 = frame[[ni, ci, y1, x0]];
                    let f11 = frame[[ni, ci, y1, x1]];
                    dframe[[ni, ci, y0, x0]] += (1.0 - wy) * (1.0 - wx) * g;
                    dframe[[ni, ci, y0, x1]] += (1.0 - wy) * wx * g;
                    dframe[[ni, ci, y1, x0]] += wy * (1.0 - wx) * g;
                    dframe[[ni, ci, y1, x1]] += wy * wx * g;
                    if in_x {
                        // d out / d sx, and sx = x - u so d/d u = -d/d sx
                        let dsx = (1.0 - wy) * (f01 - f00) + wy * (f11 - f10);
                        gu -= dsx * g;
                    }
                    if in_y {
                        let dsy = (1.0 - wx) * (f10 - f00) + wx * (f11 - f01);
                        gv -= dsy * g;
                    }
                }
                dflow[[ni, 0, y, x]] += gu;
                dflow[[ni, 1, y, x]] += gv;
            }
        }
    }
    (dframe, dflow)
}
