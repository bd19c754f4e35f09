//! Per-frame channel correlation (Gram) matrices.

use crate::error::Result;
use crate::parallel::for_each_chunk_mut;
use crate::tensor::{Scalar, TensorData};

/// G[b,t,i,j] = sum_{h,w} f[b,i,t,h,w] * f[b,j,t,h,w] / (C*H*W).
pub fn gram_forward<T: Scalar>(f: &TensorData<T>) -> Result<TensorData<T>> {
    let [b, c, l, h, w] = f.shape().dims5()?;
    let plane = h * w;
    let norm = T::from_f64(1.0 / (c * h * w) as f64);
    let mut out = TensorData::zeros([b, l, c, c]);
    let fs = f.data();
    for_each_chunk_mut(out.data_mut(), c * c, |pi, g| {
        let t = pi % l;
        let bi = pi / l;
        for i in 0..c {
            let fi = &fs[((bi * c + i) * l + t) * plane..][..plane];
            for j in i..c {
                let fj = &fs[((bi * c + j) * l + t) * plane..][..plane];
                let mut acc = T::zero();
                for (&a, &bb) in fi.iter().zip(fj) {
                    acc += a * bb;
                }
                let v = acc * norm;
                g[i * c + j] = v;
                g[j * c + i] = v;
            }
        }
    });
    Ok(out)
}

pub fn gram_backward<T: Scalar>(
    f: &TensorData<T>,
    gout: &TensorData<T>,
) -> Result<TensorData<T>> {
    let [b, c, l, h, w] = f.shape().dims5()?;
    let plane = h * w;
    let norm = T::from_f64(1.0 / (c * h * w) as f64);
    let mut df = TensorData::zeros([b, c, l, h, w]);
    let fs = f.data();
    let gs = gout.data();
    for_each_chunk_mut(df.data_mut(), plane, |pi, dst| {
        let t = pi % l;
        let i = (pi / l) % c;
        let bi = pi / (l * c);
        let g_mat = &gs[(bi * l + t) * c * c..][..c * c];
        for j in 0..c {
            // both G[i,j] and G[j,i] touch f[i]
            let coeff = (g_mat[i * c + j] + g_mat[j * c + i]) * norm;
            let fj = &fs[((bi * c + j) * l + t) * plane..][..plane];
            for (a, &v) in dst.iter_mut().zip(fj) {
                *a += coeff * v;
            }
        }
    });
    Ok(df)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ones_channel_normalizes_to_one() {
        let f = TensorData::full([1, 1, 1, 2, 2], 1.0f64);
        let g = gram_forward(&f).unwrap();
        assert_eq!(g.shape().dims(), &[1, 1, 1, 1]);
        assert_eq!(g.data()[0], 1.0);
    }

    #[test]
    fn orthogonal_channels_have_zero_cross_terms() {
        // two one-hot channels on disjoint pixels
        let mut f = TensorData::<f64>::zeros([1, 2, 1, 2, 2]);
        f.data_mut()[0] = 1.0; // channel 0, pixel 0
        f.data_mut()[5] = 1.0; // channel 1, pixel 1
        let g = gram_forward(&f).unwrap();
        let d = g.data();
        assert!(d[1] == 0.0 && d[2] == 0.0);
        assert!(d[0] > 0.0 && d[3] > 0.0);
    }

    #[test]
    fn output_is_symmetric() {
        let data: Vec<f64> = (0..48).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
        let f = TensorData::from_vec([1, 3, 1, 4, 4], data).unwrap();
        let g = gram_forward(&f).unwrap();
        let d = g.data();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(d[i * 3 + j], d[j * 3 + i]);
            }
        }
    }
}
