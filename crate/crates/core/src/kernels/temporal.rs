//! Temporal primitives: the fixed channel shift and its learnable
//! generalization, a depthwise 1-D convolution along the frame axis.

use crate::error::{Error, Result};
use crate::parallel::for_each_chunk_mut;
use crate::tensor::{Scalar, TensorData};

/// Channel partition for the fixed shift: `[0, fwd)` shift forward in time
/// (frame t reads t-1), `[fwd, fwd+bwd)` shift backward (t reads t+1), the
/// rest stay put. In causal mode the backward group is copied unshifted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupSplit {
    pub fwd: usize,
    pub bwd: usize,
    pub causal: bool,
}

pub fn shift_fixed_forward<T: Scalar>(
    x: &TensorData<T>,
    split: GroupSplit,
) -> Result<TensorData<T>> {
    let [b, c, l, h, w] = x.shape().dims5()?;
    if split.fwd + split.bwd > c {
        return Err(Error::shape(format!(
            "shift groups {}+{} exceed {c} channels",
            split.fwd, split.bwd
        )));
    }
    let mut out = TensorData::zeros([b, c, l, h, w]);
    let xs = x.data();
    let plane = h * w;
    for_each_chunk_mut(out.data_mut(), plane, |pi, dst| {
        let t = pi % l;
        let ci = (pi / l) % c;
        let bi = pi / (l * c);
        let src_t = if ci < split.fwd {
            if t == 0 {
                return; // zero fill before the first frame
            }
            t - 1
        } else if ci < split.fwd + split.bwd {
            if split.causal {
                t
            } else if t + 1 < l {
                t + 1
            } else {
                return; // zero fill after the last frame
            }
        } else {
            t
        };
        let src = &xs[((bi * c + ci) * l + src_t) * plane..][..plane];
        dst.copy_from_slice(src);
    });
    Ok(out)
}

pub fn shift_fixed_backward<T: Scalar>(
    gout: &TensorData<T>,
    split: GroupSplit,
) -> Result<TensorData<T>> {
    // The shift is a permutation with zero fill, so its transpose is the
    // opposite shift.
    let [b, c, l, h, w] = gout.shape().dims5()?;
    let mut dx = TensorData::zeros([b, c, l, h, w]);
    let gs = gout.data();
    let plane = h * w;
    for_each_chunk_mut(dx.data_mut(), plane, |pi, dst| {
        let t = pi % l;
        let ci = (pi / l) % c;
        let bi = pi / (l * c);
        let src_t = if ci < split.fwd {
            // out[t] = x[t-1]  =>  dx[t] = gout[t+1]
            if t + 1 < l {
                t + 1
            } else {
                return;
            }
        } else if ci < split.fwd + split.bwd {
            if split.causal {
                t
            } else if t == 0 {
                return;
            } else {
                t - 1
            }
        } else {
            t
        };
        let src = &gs[((bi * c + ci) * l + src_t) * plane..][..plane];
        dst.copy_from_slice(src);
    });
    Ok(dx)
}

fn check_kernel<T: Scalar>(x: &TensorData<T>, k: &TensorData<T>) -> Result<([usize; 5], usize)> {
    let xd = x.shape().dims5()?;
    let [kc, kk] = k.shape().dims2()?;
    let [_, c, l, _, _] = xd;
    if kc != c {
        return Err(Error::shape(format!(
            "temporal kernel count {kc} does not match {c} channels"
        )));
    }
    if kk % 2 == 0 {
        return Err(Error::shape(format!("temporal kernel size {kk} must be odd")));
    }
    if kk > 2 * l - 1 {
        return Err(Error::shape(format!(
            "temporal kernel size {kk} exceeds 2L-1 = {} for L = {l}",
            2 * l - 1
        )));
    }
    Ok((xd, kk))
}

/// out[b,c,t] = sum_j k[c,j] * x[b,c,t+j-(K-1)/2], frames outside [0,L) are
/// zero. Causal mode skips taps that would read frames after t.
pub fn temporal_conv_forward<T: Scalar>(
    x: &TensorData<T>,
    k: &TensorData<T>,
    causal: bool,
) -> Result<TensorData<T>> {
    let ([b, c, l, h, w], kk) = check_kernel(x, k)?;
    let center = (kk - 1) / 2;
    let mut out = TensorData::zeros([b, c, l, h, w]);
    let xs = x.data();
    let ks = k.data();
    let plane = h * w;
    for_each_chunk_mut(out.data_mut(), plane, |pi, acc| {
        let t = pi % l;
        let ci = (pi / l) % c;
        let bi = pi / (l * c);
        let j_max = if causal { center } else { kk - 1 };
        for j in 0..=j_max {
            let tin = t as isize + j as isize - center as isize;
            if tin < 0 || tin >= l as isize {
                continue;
            }
            let kv = ks[ci * kk + j];
            let src = &xs[((bi * c + ci) * l + tin as usize) * plane..][..plane];
            for (a, &xv) in acc.iter_mut().zip(src) {
                *a += kv * xv;
            }
        }
    });
    Ok(out)
}

pub fn temporal_conv_backward<T: Scalar>(
    x: &TensorData<T>,
    k: &TensorData<T>,
    gout: &TensorData<T>,
    causal: bool,
    need_dx: bool,
    need_dk: bool,
) -> Result<(Option<TensorData<T>>, Option<TensorData<T>>)> {
    let ([b, c, l, h, w], kk) = check_kernel(x, k)?;
    let center = (kk - 1) / 2;
    let gs = gout.data();
    let xs = x.data();
    let ks = k.data();
    let plane = h * w;
    let j_max = if causal { center } else { kk - 1 };

    let dx = if need_dx {
        let mut dx = TensorData::zeros([b, c, l, h, w]);
        for_each_chunk_mut(dx.data_mut(), plane, |pi, acc| {
            let t = pi % l;
            let ci = (pi / l) % c;
            let bi = pi / (l * c);
            // x[t'] feeds out[t' - j + center] with weight k[j]
            for j in 0..=j_max {
                let tout = t as isize - j as isize + center as isize;
                if tout < 0 || tout >= l as isize {
                    continue;
                }
                let kv = ks[ci * kk + j];
                let src = &gs[((bi * c + ci) * l + tout as usize) * plane..][..plane];
                for (a, &gv) in acc.iter_mut().zip(src) {
                    *a += kv * gv;
                }
            }
        });
        Some(dx)
    } else {
        None
    };

    let dk = if need_dk {
        let mut dk = TensorData::zeros([c, kk]);
        for_each_chunk_mut(dk.data_mut(), kk, |ci, dk_row| {
            for j in 0..=j_max {
                let mut acc = T::zero();
                for bi in 0..b {
                    for t in 0..l {
                        let tin = t as isize + j as isize - center as isize;
                        if tin < 0 || tin >= l as isize {
                            continue;
                        }
                        let g_plane = &gs[((bi * c + ci) * l + t) * plane..][..plane];
                        let x_plane =
                            &xs[((bi * c + ci) * l + tin as usize) * plane..][..plane];
                        for (&g, &xv) in g_plane.iter().zip(x_plane) {
                            acc += g * xv;
                        }
                    }
                }
                dk_row[j] = acc;
            }
        });
        Some(dk)
    } else {
        None
    };

    Ok((dx, dk))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_frames(b: usize, c: usize, l: usize, h: usize, w: usize) -> TensorData<f64> {
        // x[b,c,t,:,:] = t
        let mut x = TensorData::zeros([b, c, l, h, w]);
        let plane = h * w;
        for i in 0..x.numel() {
            let t = (i / plane) % l;
            x.data_mut()[i] = t as f64;
        }
        x
    }

    #[test]
    fn fixed_shift_pattern() {
        // C=4 with half the channels shifted: ch0 forward, ch1 backward.
        let x = ramp_frames(1, 4, 3, 1, 1);
        let out = shift_fixed_forward(&x, GroupSplit { fwd: 1, bwd: 1, causal: false }).unwrap();
        assert_eq!(&out.data()[0..3], &[0.0, 0.0, 1.0]);
        assert_eq!(&out.data()[3..6], &[1.0, 2.0, 0.0]);
        assert_eq!(&out.data()[6..9], &[0.0, 1.0, 2.0]);
        assert_eq!(&out.data()[9..12], &[0.0, 1.0, 2.0]);
    }

    #[test]
    fn zero_fraction_is_identity() {
        let x = ramp_frames(2, 3, 4, 2, 2);
        let out = shift_fixed_forward(&x, GroupSplit { fwd: 0, bwd: 0, causal: false }).unwrap();
        assert_eq!(out.max_abs_diff(&x), 0.0);
    }

    #[test]
    fn centered_delta_kernel_is_identity() {
        let x = ramp_frames(1, 2, 3, 2, 2);
        let k = TensorData::from_vec([2, 3], vec![0.0, 1.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let out = temporal_conv_forward(&x, &k, false).unwrap();
        assert_eq!(out.max_abs_diff(&x), 0.0);
    }

    #[test]
    fn forward_shift_kernel_reads_previous_frame() {
        let x = ramp_frames(1, 1, 3, 1, 1);
        let k = TensorData::from_vec([1, 3], vec![1.0, 0.0, 0.0]).unwrap();
        let out = temporal_conv_forward(&x, &k, false).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn even_or_oversized_kernels_rejected() {
        let x = TensorData::<f64>::zeros([1, 1, 3, 2, 2]);
        let k_even = TensorData::<f64>::zeros([1, 2]);
        assert!(temporal_conv_forward(&x, &k_even, false).is_err());
        let k_big = TensorData::<f64>::zeros([1, 7]);
        assert!(temporal_conv_forward(&x, &k_big, false).is_err());
    }

    #[test]
    fn causal_ignores_future_taps() {
        let x = ramp_frames(1, 1, 4, 1, 1);
        // backward-shift kernel reads the future; causal mode must zero it
        let k = TensorData::from_vec([1, 3], vec![0.0, 0.0, 1.0]).unwrap();
        let out = temporal_conv_forward(&x, &k, true).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }
}
