//! Per-frame bilinear resampling with half-pixel centers (align-corners off).

use crate::error::{Error, Result};
use crate::parallel::for_each_chunk_mut;
use crate::tensor::{Scalar, TensorData};

/// Source taps for one output coordinate: lower index, upper index, blend.
fn axis_taps<T: Scalar>(len_in: usize, len_out: usize) -> Vec<(usize, usize, T)> {
    let scale = len_in as f64 / len_out as f64;
    (0..len_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(len_in - 1);
            let hi = (lo + 1).min(len_in - 1);
            let frac = if hi > lo { src - lo as f64 } else { 0.0 };
            (lo, hi, T::from_f64(frac))
        })
        .collect()
}

pub fn resize_forward<T: Scalar>(
    x: &TensorData<T>,
    h2: usize,
    w2: usize,
) -> Result<TensorData<T>> {
    let [b, c, l, h, w] = x.shape().dims5()?;
    if h2 == 0 || w2 == 0 {
        return Err(Error::shape("resize target must be at least 1x1"));
    }
    let ys = axis_taps::<T>(h, h2);
    let xs_taps = axis_taps::<T>(w, w2);
    let mut out = TensorData::zeros([b, c, l, h2, w2]);
    let xs = x.data();
    let plane_in = h * w;
    let plane_out = h2 * w2;
    let one = T::one();
    for_each_chunk_mut(out.data_mut(), plane_out, |pi, dst| {
        let src = &xs[pi * plane_in..][..plane_in];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            let row0 = &src[y0 * w..][..w];
            let row1 = &src[y1 * w..][..w];
            let drow = &mut dst[oy * w2..][..w2];
            for (ox, &(x0, x1, fx)) in xs_taps.iter().enumerate() {
                let top = row0[x0] * (one - fx) + row0[x1] * fx;
                let bot = row1[x0] * (one - fx) + row1[x1] * fx;
                drow[ox] = top * (one - fy) + bot * fy;
            }
        }
    });
    Ok(out)
}

pub fn resize_backward<T: Scalar>(
    gout: &TensorData<T>,
    h: usize,
    w: usize,
) -> Result<TensorData<T>> {
    let [b, c, l, h2, w2] = gout.shape().dims5()?;
    let ys = axis_taps::<T>(h, h2);
    let xs_taps = axis_taps::<T>(w, w2);
    let mut dx = TensorData::zeros([b, c, l, h, w]);
    let gs = gout.data();
    let plane_in = h * w;
    let plane_out = h2 * w2;
    let one = T::one();
    for_each_chunk_mut(dx.data_mut(), plane_in, |pi, dst| {
        let g_plane = &gs[pi * plane_out..][..plane_out];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            let grow = &g_plane[oy * w2..][..w2];
            for (ox, &(x0, x1, fx)) in xs_taps.iter().enumerate() {
                let g = grow[ox];
                dst[y0 * w + x0] += g * (one - fy) * (one - fx);
                dst[y0 * w + x1] += g * (one - fy) * fx;
                dst[y1 * w + x0] += g * fy * (one - fx);
                dst[y1 * w + x1] += g * fy * fx;
            }
        }
    });
    Ok(dx)
}
