//! Training objectives: reconstruction l1, perceptual and style losses over
//! a fixed feature extractor, and the hinge adversarial pair.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels::Conv2dCfg;
use crate::params::init_conv_weight;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, TensorData};

/// Weights of the four terms in the overall objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub l1: f64,
    pub perc: f64,
    pub style: f64,
    pub adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        // chosen so all terms start within two orders of magnitude on
        // synthetic data; every value is configurable
        LossWeights { l1: 1.0, perc: 0.1, style: 10.0, adv: 0.01 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.l1, self.perc, self.style, self.adv];
        if all.iter().any(|&w| w < 0.0) {
            return Err(Error::config("loss weights must be nonnegative"));
        }
        if all.iter().all(|&w| w == 0.0) {
            return Err(Error::config("at least one loss weight must be positive"));
        }
        Ok(())
    }
}

/// Hinge sign convention for the discriminator objective. `Standard` is
/// ReLU(1 - D(real)) + ReLU(1 + D(fake)); `Paper` mirrors the margins.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HingeSign {
    Standard,
    Paper,
}

impl HingeSign {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(HingeSign::Standard),
            "paper" => Ok(HingeSign::Paper),
            other => Err(Error::config(format!(
                "unknown hinge_sign {other}; use standard|paper"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            HingeSign::Standard => "standard",
            HingeSign::Paper => "paper",
        }
    }
}

const FX_MAGIC: &[u8; 8] = b"LGTSMFX1";

/// Fixed (non-trainable) conv stack standing in for a pretrained feature
/// network. Three stride-2 stages with leaky-relu; deterministic for a seed,
/// or loadable from a weights file.
#[derive(Clone)]
pub struct FeatureExtractor<T: Scalar> {
    stages: Vec<TensorData<T>>,
    stride: usize,
    slope: f64,
}

impl<T: Scalar> FeatureExtractor<T> {
    pub fn seeded(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = [(16, 3), (32, 16), (64, 32)];
        let stages = dims
            .iter()
            .map(|&(cout, cin)| init_conv_weight([cout, cin, 3, 3], cin * 9, &mut rng))
            .collect();
        FeatureExtractor { stages, stride: 2, slope: 0.2 }
    }

    /// Standard shape: at least two stride-2 stages, so spatial size
    /// strictly decreases per stage.
    pub fn from_stages(stages: Vec<TensorData<T>>) -> Result<Self> {
        if stages.len() < 2 {
            return Err(Error::config("feature extractor needs at least 2 stages"));
        }
        Ok(FeatureExtractor { stages, stride: 2, slope: 0.2 })
    }

    /// Arbitrary stage geometry, used by experiments and tests.
    pub fn custom(stages: Vec<TensorData<T>>, stride: usize) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::config("feature extractor needs at least 1 stage"));
        }
        Ok(FeatureExtractor { stages, stride, slope: 0.2 })
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// Stage activations for `x`; spatial size shrinks by `stride` per stage.
    pub fn features(&self, tape: &mut Tape<T>, x: Var) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(self.stages.len());
        let mut cur = x;
        for w in &self.stages {
            let wv = tape.leaf(w.clone());
            let conv = tape.conv2d(cur, wv, None, &Conv2dCfg::same(self.stride))?;
            cur = tape.leaky_relu(conv, self.slope)?;
            out.push(cur);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(FX_MAGIC);
        for w in &self.stages {
            let [cout, cin, kh, kw] = w.shape().dims4()?;
            for d in [cout, cin, kh, kw] {
                bytes.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in w.data() {
                bytes.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
            }
        }
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 8 || &bytes[..8] != FX_MAGIC {
            return Err(Error::format(format!(
                "{} is not a feature-extractor weights file (bad magic)",
                path.display()
            )));
        }
        let mut stages = Vec::new();
        let mut pos = 8;
        while pos < bytes.len() {
            if pos + 16 > bytes.len() {
                return Err(Error::format("truncated stage header"));
            }
            let mut dims = [0usize; 4];
            for d in dims.iter_mut() {
                *d = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
                pos += 4;
            }
            let n: usize = dims.iter().product();
            if pos + 4 * n > bytes.len() {
                return Err(Error::format(format!(
                    "truncated stage payload: need {} bytes, have {}",
                    4 * n,
                    bytes.len() - pos
                )));
            }
            let data: Vec<T> = bytes[pos..pos + 4 * n]
                .chunks_exact(4)
                .map(|c| T::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect();
            pos += 4 * n;
            stages.push(TensorData::from_vec(dims, data)?);
        }
        Self::from_stages(stages)
    }
}

/// Mean absolute difference over every element (all frames and pixels).
pub fn l1_loss<T: Scalar>(tape: &mut Tape<T>, o: Var, v: Var) -> Result<Var> {
    let d = tape.sub(o, v)?;
    let a = tape.abs(d)?;
    tape.mean(a)
}

/// Per-stage mean absolute feature difference, summed over frames and
/// stages, averaged over the batch.
pub fn perceptual_loss<T: Scalar>(
    tape: &mut Tape<T>,
    o: Var,
    v: Var,
    fx: &FeatureExtractor<T>,
) -> Result<Var> {
    let fo = fx.features(tape, o)?;
    let fv = fx.features(tape, v)?;
    let mut total: Option<Var> = None;
    for (&so, &sv) in fo.iter().zip(&fv) {
        let [b, c, _, h, w] = tape.val(so).shape().dims5()?;
        let d = tape.sub(so, sv)?;
        let a = tape.abs(d)?;
        let s = tape.sum(a)?;
        // per-frame element count; the frame sum stays a sum
        let term = tape.affine(s, 1.0 / (b * c * h * w) as f64, 0.0)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::config("feature extractor produced no stages"))
}

/// Gram-matrix distance per stage: |G(feat_o) - G(feat_v)| summed, scaled by
/// 1/C^2 (the C*H*W factor lives inside the Gram matrix itself).
pub fn style_loss<T: Scalar>(
    tape: &mut Tape<T>,
    o: Var,
    v: Var,
    fx: &FeatureExtractor<T>,
) -> Result<Var> {
    let fo = fx.features(tape, o)?;
    let fv = fx.features(tape, v)?;
    let mut total: Option<Var> = None;
    for (&so, &sv) in fo.iter().zip(&fv) {
        let [b, c, _, _, _] = tape.val(so).shape().dims5()?;
        let go = tape.gram(so)?;
        let gv = tape.gram(sv)?;
        let d = tape.sub(go, gv)?;
        let a = tape.abs(d)?;
        let s = tape.sum(a)?;
        let term = tape.affine(s, 1.0 / (b * c * c) as f64, 0.0)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::config("feature extractor produced no stages"))
}

/// Discriminator hinge objective over real/fake score maps.
pub fn d_hinge_loss<T: Scalar>(
    tape: &mut Tape<T>,
    scores_real: Var,
    scores_fake: Var,
    sign: HingeSign,
) -> Result<Var> {
    let (real_scale, fake_scale) = match sign {
        HingeSign::Standard => (-1.0, 1.0), // ReLU(1 - real) + ReLU(1 + fake)
        HingeSign::Paper => (1.0, -1.0),    // ReLU(1 + real) + ReLU(1 - fake)
    };
    let r = tape.affine(scores_real, real_scale, 1.0)?;
    let r = tape.relu(r)?;
    let r = tape.mean(r)?;
    let f = tape.affine(scores_fake, fake_scale, 1.0)?;
    let f = tape.relu(f)?;
    let f = tape.mean(f)?;
    tape.add(r, f)
}

/// Generator adversarial term: negative mean fake score.
pub fn g_adv_loss<T: Scalar>(tape: &mut Tape<T>, scores_fake: Var) -> Result<Var> {
    let m = tape.mean(scores_fake)?;
    tape.affine(m, -1.0, 0.0)
}

/// Scalar loss vars to be combined; absent terms are skipped.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossTerms {
    pub l1: Option<Var>,
    pub perc: Option<Var>,
    pub style: Option<Var>,
    pub adv: Option<Var>,
}

/// Weighted sum of the present terms.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    terms: &LossTerms,
    w: &LossWeights,
) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (term, weight) in [
        (terms.l1, w.l1),
        (terms.perc, w.perc),
        (terms.style, w.style),
        (terms.adv, w.adv),
    ] {
        let Some(t) = term else { continue };
        let scaled = tape.affine(t, weight, 0.0)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, scaled)?,
            None => scaled,
        });
    }
    acc.ok_or_else(|| Error::config("total_loss needs at least one term"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_clip(seed: u64, shape: [usize; 5]) -> TensorData<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        TensorData::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn l1_identities() {
        let mut tape = Tape::<f64>::new();
        let v = rand_clip(1, [1, 3, 2, 4, 4]);
        let a = tape.leaf(v.clone());
        let b = tape.leaf(v.clone());
        let loss = l1_loss(&mut tape, a, b).unwrap();
        assert_eq!(tape.scalar_value(loss).unwrap(), 0.0);

        let zeros = tape.leaf(TensorData::zeros([1, 3, 2, 4, 4]));
        let ones = tape.leaf(TensorData::full([1, 3, 2, 4, 4], 1.0));
        let loss = l1_loss(&mut tape, zeros, ones).unwrap();
        assert_eq!(tape.scalar_value(loss).unwrap(), 1.0);
    }

    #[test]
    fn l1_matches_brute_force() {
        let o = rand_clip(2, [2, 3, 2, 4, 4]);
        let v = rand_clip(3, [2, 3, 2, 4, 4]);
        let mut tape = Tape::<f64>::new();
        let ov = tape.leaf(o.clone());
        let vv = tape.leaf(v.clone());
        let loss = l1_loss(&mut tape, ov, vv).unwrap();
        let brute: f64 = o
            .data()
            .iter()
            .zip(v.data())
            .map(|(&a, &b)| (a - b).abs())
            .sum::<f64>()
            / o.numel() as f64;
        assert_eq!(tape.scalar_value(loss).unwrap(), brute);
    }

    #[test]
    fn perceptual_and_style_zero_at_identity() {
        let fx = FeatureExtractor::<f64>::seeded(5);
        let v = rand_clip(4, [1, 3, 2, 8, 8]);
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(v.clone());
        let b = tape.leaf(v.clone());
        let p = perceptual_loss(&mut tape, a, b, &fx).unwrap();
        let s = style_loss(&mut tape, a, b, &fx).unwrap();
        assert_eq!(tape.scalar_value(p).unwrap(), 0.0);
        assert_eq!(tape.scalar_value(s).unwrap(), 0.0);
    }

    #[test]
    fn style_is_invariant_to_spatial_permutation_with_1x1_stage() {
        // a single stride-1 1x1-conv stage makes features pointwise, so the
        // Gram matrix cannot see pixel order
        let w = TensorData::from_vec([2, 3, 1, 1], vec![0.3, -0.7, 0.2, 0.9, 0.1, -0.4]).unwrap();
        let fx = FeatureExtractor::custom(vec![w], 1).unwrap();
        let v = rand_clip(6, [1, 3, 1, 4, 4]);
        // reverse pixel order per channel
        let mut perm = v.clone();
        for c in 0..3 {
            let plane: Vec<f64> = v.data()[c * 16..(c + 1) * 16].to_vec();
            for (i, &val) in plane.iter().rev().enumerate() {
                perm.data_mut()[c * 16 + i] = val;
            }
        }
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(v);
        let b = tape.leaf(perm);
        let s = style_loss(&mut tape, a, b, &fx).unwrap();
        assert!(tape.scalar_value(s).unwrap().abs() < 1e-12);
    }

    #[test]
    fn style_matches_brute_force_gram_difference() {
        let fx = FeatureExtractor::<f64>::seeded(9);
        let o = rand_clip(7, [1, 3, 2, 8, 8]);
        let v = rand_clip(8, [1, 3, 2, 8, 8]);
        let mut tape = Tape::<f64>::new();
        let ov = tape.leaf(o.clone());
        let vv = tape.leaf(v.clone());
        let s = style_loss(&mut tape, ov, vv, &fx).unwrap();
        let got = tape.scalar_value(s).unwrap();

        // independent route: evaluate stage activations and gram by hand
        let mut expected = 0.0;
        let mut tape2 = Tape::<f64>::new();
        let ov2 = tape2.leaf(o);
        let vv2 = tape2.leaf(v);
        let fo = fx.features(&mut tape2, ov2).unwrap();
        let fv = fx.features(&mut tape2, vv2).unwrap();
        for (&so, &sv) in fo.iter().zip(&fv) {
            let a = tape2.val(so).clone();
            let b = tape2.val(sv).clone();
            let [bsz, c, l, h, w] = a.shape().dims5().unwrap();
            let denom = (c * h * w) as f64;
            let mut stage_sum = 0.0;
            for bi in 0..bsz {
                for t in 0..l {
                    for i in 0..c {
                        for j in 0..c {
                            let mut ga = 0.0;
                            let mut gb = 0.0;
                            for p in 0..h * w {
                                let ai = a.data()[((bi * c + i) * l + t) * h * w + p];
                                let aj = a.data()[((bi * c + j) * l + t) * h * w + p];
                                let bi_ = b.data()[((bi * c + i) * l + t) * h * w + p];
                                let bj = b.data()[((bi * c + j) * l + t) * h * w + p];
                                ga += ai * aj;
                                gb += bi_ * bj;
                            }
                            stage_sum += (ga / denom - gb / denom).abs();
                        }
                    }
                }
            }
            expected += stage_sum / (bsz * c * c) as f64;
        }
        let rel = (got - expected).abs() / expected.abs().max(1e-12);
        assert!(rel < 1e-10, "style mismatch: {got} vs {expected}");
    }

    #[test]
    fn hinge_identities() {
        let mut tape = Tape::<f64>::new();
        let plus = tape.leaf(TensorData::full([1, 1, 2, 2, 2], 1.0));
        let minus = tape.leaf(TensorData::full([1, 1, 2, 2, 2], -1.0));
        let zeros = tape.leaf(TensorData::zeros([1, 1, 2, 2, 2]));

        // perfectly separated scores under the standard convention
        let l = d_hinge_loss(&mut tape, plus, minus, HingeSign::Standard).unwrap();
        assert_eq!(tape.scalar_value(l).unwrap(), 0.0);

        // zero scores give 1 + 1 under both conventions
        for sign in [HingeSign::Standard, HingeSign::Paper] {
            let l = d_hinge_loss(&mut tape, zeros, zeros, sign).unwrap();
            assert_eq!(tape.scalar_value(l).unwrap(), 2.0);
        }
    }

    #[test]
    fn g_adv_is_negative_mean() {
        let mut tape = Tape::<f64>::new();
        let zeros = tape.leaf(TensorData::zeros([1, 1, 1, 2, 2]));
        let c = tape.leaf(TensorData::full([1, 1, 1, 2, 2], 0.75));
        let l0 = g_adv_loss(&mut tape, zeros).unwrap();
        let lc = g_adv_loss(&mut tape, c).unwrap();
        assert_eq!(tape.scalar_value(l0).unwrap(), 0.0);
        assert_eq!(tape.scalar_value(lc).unwrap(), -0.75);
    }

    #[test]
    fn total_loss_weighting() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(TensorData::scalar(2.0));
        let b = tape.leaf(TensorData::scalar(3.0));
        let terms = LossTerms { l1: Some(a), perc: Some(b), style: None, adv: None };
        let w = LossWeights { l1: 1.0, perc: 0.0, style: 0.0, adv: 0.0 };
        let t = total_loss(&mut tape, &terms, &w).unwrap();
        assert_eq!(tape.scalar_value(t).unwrap(), 2.0);

        let w2 = LossWeights { l1: 2.0, perc: 4.0, style: 0.0, adv: 0.0 };
        let t2 = total_loss(&mut tape, &terms, &w2).unwrap();
        assert_eq!(tape.scalar_value(t2).unwrap(), 2.0 * 2.0 + 4.0 * 3.0);
    }

    #[test]
    fn reconstruction_losses_minimized_at_zero_offset() {
        let fx = FeatureExtractor::<f64>::seeded(11);
        let v = rand_clip(12, [1, 3, 1, 8, 8]);
        let noise = rand_clip(13, [1, 3, 1, 8, 8]);
        let losses_at = |alpha: f64| {
            let o = TensorData::from_vec(
                [1, 3, 1, 8, 8],
                v.data()
                    .iter()
                    .zip(noise.data())
                    .map(|(&a, &n)| a + alpha * n)
                    .collect::<Vec<_>>(),
            )
            .unwrap();
            let mut tape = Tape::<f64>::new();
            let ov = tape.leaf(o);
            let vv = tape.leaf(v.clone());
            let l1 = l1_loss(&mut tape, ov, vv).unwrap();
            let p = perceptual_loss(&mut tape, ov, vv, &fx).unwrap();
            let s = style_loss(&mut tape, ov, vv, &fx).unwrap();
            [
                tape.scalar_value(l1).unwrap(),
                tape.scalar_value(p).unwrap(),
                tape.scalar_value(s).unwrap(),
            ]
        };
        let at_zero = losses_at(0.0);
        for alpha in [-0.2, -0.1, 0.1, 0.2] {
            let vals = losses_at(alpha);
            for (i, (&z, &v)) in at_zero.iter().zip(&vals).enumerate() {
                assert!(z <= v, "loss {i} not minimized at 0: {z} vs {v} at alpha={alpha}");
            }
        }
    }

    #[test]
    fn extractor_roundtrips_through_file() {
        let fx = FeatureExtractor::<f32>::seeded(21);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fx.bin");
        fx.save(&path).unwrap();
        let loaded = FeatureExtractor::<f32>::load(&path).unwrap();
        assert_eq!(loaded.num_stages(), fx.num_stages());
        for (a, b) in fx.stages.iter().zip(&loaded.stages) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn nonnegativity_on_random_pairs() {
        let fx = FeatureExtractor::<f64>::seeded(31);
        for seed in 0..5 {
            let o = rand_clip(100 + seed, [1, 3, 2, 8, 8]);
            let v = rand_clip(200 + seed, [1, 3, 2, 8, 8]);
            let mut tape = Tape::<f64>::new();
            let ov = tape.leaf(o);
            let vv = tape.leaf(v);
            let l1 = l1_loss(&mut tape, ov, vv).unwrap();
            let p = perceptual_loss(&mut tape, ov, vv, &fx).unwrap();
            let s = style_loss(&mut tape, ov, vv, &fx).unwrap();
            let d = d_hinge_loss(&mut tape, ov, vv, HingeSign::Standard).unwrap();
            for loss in [l1, p, s, d] {
                assert!(tape.scalar_value(loss).unwrap() >= 0.0);
            }
        }
    }
}
