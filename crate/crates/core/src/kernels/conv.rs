//! Per-frame 2D convolution (forward + backward) and the 3D convolution used
//! by the parameter/runtime comparison build.

use crate::error::{Error, Result};
use crate::parallel::for_each_chunk_mut;
use crate::tensor::{Scalar, TensorData};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pad {
    /// Zero padding chosen so the output extent is `ceil(in / stride)`; when
    /// the total pad is odd the extra column/row goes at the end.
    Same,
    /// Symmetric zero padding of the given height/width amounts.
    Explicit { h: usize, w: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dCfg {
    pub stride: (usize, usize),
    pub dilation: (usize, usize),
    pub padding: Pad,
}

impl Default for Conv2dCfg {
    fn default() -> Self {
        Conv2dCfg { stride: (1, 1), dilation: (1, 1), padding: Pad::Same }
    }
}

impl Conv2dCfg {
    pub fn same(stride: usize) -> Self {
        Conv2dCfg { stride: (stride, stride), ..Default::default() }
    }

    pub fn dilated(dilation: usize) -> Self {
        Conv2dCfg { dilation: (dilation, dilation), ..Default::default() }
    }
}

/// Resolved geometry for one spatial axis.
#[derive(Debug, Clone, Copy)]
struct Axis {
    len_out: usize,
    stride: usize,
    dilation: usize,
    pad0: isize,
}

fn resolve_axis(len_in: usize, k: usize, stride: usize, dilation: usize, pad: Pad) -> Result<Axis> {
    if stride == 0 || dilation == 0 {
        return Err(Error::shape("stride and dilation must be positive"));
    }
    let span = (k - 1) * dilation + 1;
    let (len_out, pad0) = match pad {
        Pad::Same => {
            let len_out = len_in.div_ceil(stride);
            let total = ((len_out - 1) * stride + span).saturating_sub(len_in);
            (len_out, (total / 2) as isize)
        }
        Pad::Explicit { h, w: _ } => {
            // caller passes the per-axis amount through `h`
            let padded = len_in + 2 * h;
            if padded < span {
                return Err(Error::shape(format!(
                    "zero-size spatial output: input {len_in} + pad {h} too small for kernel span {span}"
                )));
            }
            ((padded - span) / stride + 1, h as isize)
        }
    };
    if len_out == 0 {
        return Err(Error::shape("zero-size spatial output"));
    }
    Ok(Axis { len_out, stride, dilation, pad0 })
}

fn resolve<T: Scalar>(
    x: &TensorData<T>,
    w: &TensorData<T>,
    bias: Option<&TensorData<T>>,
    cfg: &Conv2dCfg,
) -> Result<([usize; 5], [usize; 4], Axis, Axis)> {
    let xd = x.shape().dims5()?;
    let wd = w.shape().dims4()?;
    let [_, cin, _, h, w_in] = xd;
    let [cout, w_cin, kh, kw] = wd;
    if w_cin != cin {
        return Err(Error::shape(format!(
            "conv2d channel mismatch: input has {cin}, weight expects {w_cin}"
        )));
    }
    if let Some(b) = bias {
        if b.numel() != cout {
            return Err(Error::shape(format!(
                "conv2d bias length {} does not match {cout} output channels",
                b.numel()
            )));
        }
    }
    let (ph, pw) = match cfg.padding {
        Pad::Same => (Pad::Same, Pad::Same),
        Pad::Explicit { h, w } => (Pad::Explicit { h, w: 0 }, Pad::Explicit { h: w, w: 0 }),
    };
    let ay = resolve_axis(h, kh, cfg.stride.0, cfg.dilation.0, ph)?;
    let ax = resolve_axis(w_in, kw, cfg.stride.1, cfg.dilation.1, pw)?;
    Ok((xd, wd, ay, ax))
}

/// acc[ow] += wv * xrow[ow*sw + iw0] over the valid output range.
#[inline]
fn saxpy_row<T: Scalar>(acc: &mut [T], xrow: &[T], wv: T, sw: usize, iw0: isize) {
    let len_in = xrow.len() as isize;
    let ow_lo = if iw0 < 0 { ((-iw0) as usize).div_ceil(sw) } else { 0 };
    if sw == 1 {
        let ow_hi = (len_in - iw0).clamp(0, acc.len() as isize) as usize;
        if ow_lo >= ow_hi {
            return;
        }
        let src = &xrow[(iw0 + ow_lo as isize) as usize..(iw0 + ow_hi as isize) as usize];
        for (a, &xv) in acc[ow_lo..ow_hi].iter_mut().zip(src) {
            *a += wv * xv;
        }
    } else {
        for ow in ow_lo..acc.len() {
            let iw = ow as isize * sw as isize + iw0;
            if iw < 0 || iw >= len_in {
                continue;
            }
            acc[ow] += wv * xrow[iw as usize];
        }
    }
}

/// dot of grow with xrow at the same alignment as `saxpy_row`.
#[inline]
fn dot_row<T: Scalar>(grow: &[T], xrow: &[T], sw: usize, iw0: isize) -> T {
    let len_in = xrow.len() as isize;
    let ow_lo = if iw0 < 0 { ((-iw0) as usize).div_ceil(sw) } else { 0 };
    let mut acc = T::zero();
    if sw == 1 {
        let ow_hi = (len_in - iw0).clamp(0, grow.len() as isize) as usize;
        if ow_lo < ow_hi {
            let src = &xrow[(iw0 + ow_lo as isize) as usize..(iw0 + ow_hi as isize) as usize];
            for (&g, &xv) in grow[ow_lo..ow_hi].iter().zip(src) {
                acc += g * xv;
            }
        }
    } else {
        for ow in ow_lo..grow.len() {
            let iw = ow as isize * sw as isize + iw0;
            if iw < 0 || iw >= len_in {
                continue;
            }
            acc += grow[ow] * xrow[iw as usize];
        }
    }
    acc
}

/// Frames are convolved independently: `out[b, co, t] = bias[co] + sum w * x[b, :, t]`.
pub fn conv2d_forward<T: Scalar>(
    x: &TensorData<T>,
    w: &TensorData<T>,
    bias: Option<&TensorData<T>>,
    cfg: &Conv2dCfg,
) -> Result<TensorData<T>> {
    let (xd, wd, ay, ax) = resolve(x, w, bias, cfg)?;
    let [b, cin, l, h, w_in] = xd;
    let [cout, _, kh, kw] = wd;
    let (oh, ow) = (ay.len_out, ax.len_out);

    let mut out = TensorData::zeros([b, cout, l, oh, ow]);
    let xs = x.data();
    let ws = w.data();
    let plane = oh * ow;
    for_each_chunk_mut(out.data_mut(), plane, |pi, acc_plane| {
        let t = pi % l;
        let co = (pi / l) % cout;
        let bi = pi / (l * cout);
        let bias_v = bias.map(|bv| bv.data()[co]).unwrap_or_else(T::zero);
        if !bias_v.is_zero() {
            acc_plane.iter_mut().for_each(|v| *v = bias_v);
        }
        for ci in 0..cin {
            let x_plane = &xs[((bi * cin + ci) * l + t) * h * w_in..][..h * w_in];
            let w_base = ((co * cin + ci) * kh) * kw;
            for ohr in 0..oh {
                let acc = &mut acc_plane[ohr * ow..][..ow];
                for khi in 0..kh {
                    let ih = (ohr * ay.stride + khi * ay.dilation) as isize - ay.pad0;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let xrow = &x_plane[ih as usize * w_in..][..w_in];
                    let wrow = &ws[w_base + khi * kw..][..kw];
                    for (kwi, &wv) in wrow.iter().enumerate() {
                        let iw0 = (kwi * ax.dilation) as isize - ax.pad0;
                        saxpy_row(acc, xrow, wv, ax.stride, iw0);
                    }
                }
            }
        }
    });
    Ok(out)
}

/// Gradients w.r.t. input, weight and bias. `None` request slots are skipped.
pub fn conv2d_backward<T: Scalar>(
    x: &TensorData<T>,
    w: &TensorData<T>,
    gout: &TensorData<T>,
    cfg: &Conv2dCfg,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> Result<(Option<TensorData<T>>, Option<TensorData<T>>, Option<TensorData<T>>)> {
    let (xd, wd, ay, ax) = resolve(x, w, None, cfg)?;
    let [b, cin, l, h, w_in] = xd;
    let [cout, _, kh, kw] = wd;
    let (oh, ow) = (ay.len_out, ax.len_out);
    let gd = gout.shape().dims5()?;
    if gd != [b, cout, l, oh, ow] {
        return Err(Error::shape(format!(
            "conv2d backward: output grad shape {} does not match [{b}, {cout}, {l}, {oh}, {ow}]",
            gout.shape()
        )));
    }
    let gs = gout.data();
    let xs = x.data();
    let ws = w.data();

    let dx = if need_dx {
        let mut dx = TensorData::zeros([b, cin, l, h, w_in]);
        let plane = h * w_in;
        for_each_chunk_mut(dx.data_mut(), plane, |pi, dx_plane| {
            let t = pi % l;
            let ci = (pi / l) % cin;
            let bi = pi / (l * cin);
            for co in 0..cout {
                let g_plane = &gs[((bi * cout + co) * l + t) * oh * ow..][..oh * ow];
                let w_base = ((co * cin + ci) * kh) * kw;
                for ohr in 0..oh {
                    let grow = &g_plane[ohr * ow..][..ow];
                    for khi in 0..kh {
                        let ih = (ohr * ay.stride + khi * ay.dilation) as isize - ay.pad0;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let dxrow = &mut dx_plane[ih as usize * w_in..][..w_in];
                        for kwi in 0..kw {
                            let wv = ws[w_base + khi * kw + kwi];
                            let iw0 = (kwi * ax.dilation) as isize - ax.pad0;
                            // transpose of saxpy_row: scatter grad into dx
                            scatter_row(dxrow, grow, wv, ax.stride, iw0);
                        }
                    }
                }
            }
        });
        Some(dx)
    } else {
        None
    };

    let dw = if need_dw {
        let mut dw = TensorData::zeros([cout, cin, kh, kw]);
        let per_co = cin * kh * kw;
        for_each_chunk_mut(dw.data_mut(), per_co, |co, dw_co| {
            for bi in 0..b {
                for t in 0..l {
                    let g_plane = &gs[((bi * cout + co) * l + t) * oh * ow..][..oh * ow];
                    for ci in 0..cin {
                        let x_plane = &xs[((bi * cin + ci) * l + t) * h * w_in..][..h * w_in];
                        for khi in 0..kh {
                            for ohr in 0..oh {
                                let ih =
                                    (ohr * ay.stride + khi * ay.dilation) as isize - ay.pad0;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                let grow = &g_plane[ohr * ow..][..ow];
                                let xrow = &x_plane[ih as usize * w_in..][..w_in];
                                for kwi in 0..kw {
                                    let iw0 = (kwi * ax.dilation) as isize - ax.pad0;
                                    dw_co[(ci * kh + khi) * kw + kwi] +=
                                        dot_row(grow, xrow, ax.stride, iw0);
                                }
                            }
                        }
                    }
                }
            }
        });
        Some(dw)
    } else {
        None
    };

    let db = if need_db {
        let mut db = TensorData::zeros([cout]);
        let dbs = db.data_mut();
        for bi in 0..b {
            for co in 0..cout {
                let base = ((bi * cout + co) * l) * oh * ow;
                let mut acc = T::zero();
                for &g in &gs[base..base + l * oh * ow] {
                    acc += g;
                }
                dbs[co] += acc;
            }
        }
        Some(db)
    } else {
        None
    };

    Ok((dx, dw, db))
}

/// dxrow[ow*sw + iw0] += wv * grow[ow] over the valid range.
#[inline]
fn scatter_row<T: Scalar>(dxrow: &mut [T], grow: &[T], wv: T, sw: usize, iw0: isize) {
    let len_in = dxrow.len() as isize;
    let ow_lo = if iw0 < 0 { ((-iw0) as usize).div_ceil(sw) } else { 0 };
    if sw == 1 {
        let ow_hi = (len_in - iw0).clamp(0, grow.len() as isize) as usize;
        if ow_lo >= ow_hi {
            return;
        }
        let dst = &mut dxrow[(iw0 + ow_lo as isize) as usize..(iw0 + ow_hi as isize) as usize];
        for (d, &g) in dst.iter_mut().zip(&grow[ow_lo..ow_hi]) {
            *d += wv * g;
        }
    } else {
        for ow in ow_lo..grow.len() {
            let iw = ow as isize * sw as isize + iw0;
            if iw < 0 || iw >= len_in {
                continue;
            }
            dxrow[iw as usize] += wv * grow[ow];
        }
    }
}

/// Gated-3D comparison build: spatio-temporal convolution with temporal
/// kernel extent `kt` and zero temporal padding of `(kt-1)/2`. Forward only;
/// the 3D variant is never trained.
pub fn conv3d_forward<T: Scalar>(
    x: &TensorData<T>,
    w: &TensorData<T>,
    bias: Option<&TensorData<T>>,
    cfg: &Conv2dCfg,
) -> Result<TensorData<T>> {
    let xd = x.shape().dims5()?;
    let [b, cin, l, h, w_in] = xd;
    let wd = w.shape().dims();
    let &[cout, w_cin, kt, kh, kw] = wd else {
        return Err(Error::shape(format!("conv3d weight must be rank 5, got {}", w.shape())));
    };
    if w_cin != cin {
        return Err(Error::shape(format!(
            "conv3d channel mismatch: input has {cin}, weight expects {w_cin}"
        )));
    }
    if kt % 2 == 0 {
        return Err(Error::shape("conv3d temporal kernel extent must be odd"));
    }
    let (ph, pw) = match cfg.padding {
        Pad::Same => (Pad::Same, Pad::Same),
        Pad::Explicit { h, w } => (Pad::Explicit { h, w: 0 }, Pad::Explicit { h: w, w: 0 }),
    };
    let ay = resolve_axis(h, kh, cfg.stride.0, cfg.dilation.0, ph)?;
    let ax = resolve_axis(w_in, kw, cfg.stride.1, cfg.dilation.1, pw)?;
    let (oh, ow) = (ay.len_out, ax.len_out);
    let t0 = (kt - 1) / 2;

    let mut out = TensorData::zeros([b, cout, l, oh, ow]);
    let xs = x.data();
    let ws = w.data();
    let plane = oh * ow;
    for_each_chunk_mut(out.data_mut(), plane, |pi, acc_plane| {
        let t = pi % l;
        let co = (pi / l) % cout;
        let bi = pi / (l * cout);
        let bias_v = bias.map(|bv| bv.data()[co]).unwrap_or_else(T::zero);
        if !bias_v.is_zero() {
            acc_plane.iter_mut().for_each(|v| *v = bias_v);
        }
        for kti in 0..kt {
            let tin = t as isize + kti as isize - t0 as isize;
            if tin < 0 || tin >= l as isize {
                continue;
            }
            for ci in 0..cin {
                let x_plane = &xs[((bi * cin + ci) * l + tin as usize) * h * w_in..][..h * w_in];
                let w_base = (((co * cin + ci) * kt + kti) * kh) * kw;
                for ohr in 0..oh {
                    let acc = &mut acc_plane[ohr * ow..][..ow];
                    for khi in 0..kh {
                        let ih = (ohr * ay.stride + khi * ay.dilation) as isize - ay.pad0;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let xrow = &x_plane[ih as usize * w_in..][..w_in];
                        let wrow = &ws[w_base + khi * kw..][..kw];
                        for (kwi, &wv) in wrow.iter().enumerate() {
                            let iw0 = (kwi * ax.dilation) as isize - ax.pad0;
                            saxpy_row(acc, xrow, wv, ax.stride, iw0);
                        }
                    }
                }
            }
        }
    });
    Ok(out)
}
