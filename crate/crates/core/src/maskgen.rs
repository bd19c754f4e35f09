//! Free-form video mask synthesis with controllable mask-to-frame ratio.
//!
//! A mask is drawn once on a frame-0 canvas (brush strokes, one box, or
//! dilated blobs), then translated rigidly across frames by a bounded random
//! walk. Strokes are added or the canvas eroded until the whole-volume ratio
//! lands in the requested range, up to 100 attempts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, TensorData};

/// Binary occlusion volume `[1, 1, L, H, W]`; 1 = masked (to inpaint).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskVideo {
    l: usize,
    h: usize,
    w: usize,
    bits: Vec<u8>,
}

impl MaskVideo {
    pub fn from_bits(l: usize, h: usize, w: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != l * h * w {
            return Err(Error::shape(format!(
                "mask volume {l}x{h}x{w} needs {} bits, got {}",
                l * h * w,
                bits.len()
            )));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::shape("mask bits must be 0 or 1"));
        }
        Ok(MaskVideo { l, h, w, bits })
    }

    pub fn frames(&self) -> usize {
        self.l
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn frame_bits(&self, t: usize) -> &[u8] {
        &self.bits[t * self.h * self.w..][..self.h * self.w]
    }

    /// Exact fraction of masked pixels over the whole volume.
    pub fn ratio(&self) -> f64 {
        let ones: usize = self.bits.iter().map(|&b| b as usize).sum();
        ones as f64 / (self.l * self.h * self.w) as f64
    }

    /// `[1, 1, L, H, W]` tensor with 1.0 on masked pixels.
    pub fn to_tensor<T: Scalar>(&self) -> TensorData<T> {
        let data = self
            .bits
            .iter()
            .map(|&b| if b != 0 { T::one() } else { T::zero() })
            .collect();
        TensorData::from_vec([1, 1, self.l, self.h, self.w], data).expect("sized")
    }

    /// Intersection-over-union of two consecutive frames.
    pub fn frame_iou(&self, t0: usize, t1: usize) -> f64 {
        let a = self.frame_bits(t0);
        let b = self.frame_bits(t1);
        let mut inter = 0usize;
        let mut union = 0usize;
        for (&x, &y) in a.iter().zip(b) {
            inter += (x & y) as usize;
            union += (x | y) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    Stroke,
    Bbox,
    ObjectLike,
}

impl MaskKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "stroke" => Ok(MaskKind::Stroke),
            "bbox" => Ok(MaskKind::Bbox),
            "object" | "object_like" => Ok(MaskKind::ObjectLike),
            other => Err(Error::config(format!(
                "unknown mask kind {other}; use stroke|bbox|object"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskSpec {
    pub kind: MaskKind,
    /// Half-open target range for the volume mask-to-frame ratio.
    pub ratio_range: (f64, f64),
    /// Max per-frame translation in pixels (per axis).
    pub motion: u32,
    pub seed: u64,
}

impl MaskSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.ratio_range;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo >= hi {
            return Err(Error::config(format!(
                "ratio range [{lo}, {hi}) must satisfy 0 <= lo < hi <= 1"
            )));
        }
        Ok(())
    }
}

struct Canvas {
    h: usize,
    w: usize,
    bits: Vec<u8>,
}

impl Canvas {
    fn new(h: usize, w: usize) -> Self {
        Canvas { h, w, bits: vec![0; h * w] }
    }

    fn stamp_disk(&mut self, cy: f64, cx: f64, r: f64) {
        let r2 = r * r;
        let y0 = (cy - r).floor().max(0.0) as usize;
        let y1 = ((cy + r).ceil() as usize).min(self.h.saturating_sub(1));
        let x0 = (cx - r).floor().max(0.0) as usize;
        let x1 = ((cx + r).ceil() as usize).min(self.w.saturating_sub(1));
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dy = y as f64 - cy;
                let dx = x as f64 - cx;
                if dy * dy + dx * dx <= r2 {
                    self.bits[y * self.w + x] = 1;
                }
            }
        }
    }

    fn fill_ellipse(&mut self, cy: f64, cx: f64, ry: f64, rx: f64, phi: f64) {
        let (sin, cos) = phi.sin_cos();
        for y in 0..self.h {
            for x in 0..self.w {
                let dy = y as f64 - cy;
                let dx = x as f64 - cx;
                let u = (dx * cos + dy * sin) / rx;
                let v = (-dx * sin + dy * cos) / ry;
                if u * u + v * v <= 1.0 {
                    self.bits[y * self.w + x] = 1;
                }
            }
        }
    }

    /// 4-neighborhood erosion; out-of-frame counts as empty.
    fn erode(&mut self) {
        let mut out = vec![0u8; self.bits.len()];
        for y in 0..self.h {
            for x in 0..self.w {
                let i = y * self.w + x;
                if self.bits[i] == 0 {
                    continue;
                }
                let up = y > 0 && self.bits[i - self.w] != 0;
                let down = y + 1 < self.h && self.bits[i + self.w] != 0;
                let left = x > 0 && self.bits[i - 1] != 0;
                let right = x + 1 < self.w && self.bits[i + 1] != 0;
                if up && down && left && right {
                    out[i] = 1;
                }
            }
        }
        self.bits = out;
    }

    fn dilate(&mut self) {
        let mut out = self.bits.clone();
        for y in 0..self.h {
            for x in 0..self.w {
                if self.bits[y * self.w + x] == 0 {
                    continue;
                }
                if y > 0 {
                    out[(y - 1) * self.w + x] = 1;
                }
                if y + 1 < self.h {
                    out[(y + 1) * self.w + x] = 1;
                }
                if x > 0 {
                    out[y * self.w + x - 1] = 1;
                }
                if x + 1 < self.w {
                    out[y * self.w + x + 1] = 1;
                }
            }
        }
        self.bits = out;
    }
}

/// Per-frame translation offsets: a random walk with steps bounded by
/// `motion` per axis, clamped so the drift stays within a quarter frame.
fn make_offsets(l: usize, h: usize, w: usize, motion: u32, rng: &mut ChaCha8Rng) -> Vec<(i64, i64)> {
    let m = motion as i64;
    let max_dy = (h / 4) as i64;
    let max_dx = (w / 4) as i64;
    let mut offsets = Vec::with_capacity(l);
    let (mut dy, mut dx) = (0i64, 0i64);
    for t in 0..l {
        if t > 0 && m > 0 {
            dy = (dy + rng.gen_range(-m..=m)).clamp(-max_dy, max_dy);
            dx = (dx + rng.gen_range(-m..=m)).clamp(-max_dx, max_dx);
        }
        offsets.push((dy, dx));
    }
    offsets
}

fn render_volume(canvas: &Canvas, offsets: &[(i64, i64)]) -> Vec<u8> {
    let (h, w) = (canvas.h, canvas.w);
    let mut bits = vec![0u8; offsets.len() * h * w];
    for (t, &(dy, dx)) in offsets.iter().enumerate() {
        let frame = &mut bits[t * h * w..][..h * w];
        for y in 0..h {
            let sy = y as i64 - dy;
            if sy < 0 || sy >= h as i64 {
                continue;
            }
            for x in 0..w {
                let sx = x as i64 - dx;
                if sx < 0 || sx >= w as i64 {
                    continue;
                }
                frame[y * w + x] = canvas.bits[sy as usize * w + sx as usize];
            }
        }
    }
    bits
}

fn volume_ratio(bits: &[u8]) -> f64 {
    bits.iter().map(|&b| b as usize).sum::<usize>() as f64 / bits.len() as f64
}

fn draw_stroke(canvas: &mut Canvas, radius: f64, rng: &mut ChaCha8Rng) {
    let (h, w) = (canvas.h as f64, canvas.w as f64);
    let mut y = rng.gen_range(0.0..h);
    let mut x = rng.gen_range(0.0..w);
    let mut angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let steps = rng.gen_range(8..=20);
    canvas.stamp_disk(y, x, radius);
    for _ in 0..steps {
        angle += rng.gen_range(-1.0..1.0);
        let len = rng.gen_range(radius..2.5 * radius);
        let ny = (y + len * angle.sin()).clamp(0.0, h - 1.0);
        let nx = (x + len * angle.cos()).clamp(0.0, w - 1.0);
        // stamp along the segment so the stroke stays solid
        let dist = ((ny - y).powi(2) + (nx - x).powi(2)).sqrt();
        let stamps = (dist / (radius * 0.5)).ceil().max(1.0) as usize;
        for s in 1..=stamps {
            let f = s as f64 / stamps as f64;
            canvas.stamp_disk(y + (ny - y) * f, x + (nx - x) * f, radius);
        }
        y = ny;
        x = nx;
    }
}

fn track_best(best: &mut f64, ratio: f64, range: (f64, f64)) {
    let dist = |r: f64| {
        if r < range.0 {
            range.0 - r
        } else if r >= range.1 {
            r - range.1
        } else {
            0.0
        }
    };
    if dist(ratio) < dist(*best) {
        *best = ratio;
    }
}

/// Grow-then-erode search shared by stroke and object masks.
fn fit_canvas_to_range(
    mut grow: impl FnMut(&mut Canvas, f64, &mut ChaCha8Rng),
    max_growths: usize,
    l: usize,
    h: usize,
    w: usize,
    range: (f64, f64),
    motion: u32,
    rng: &mut ChaCha8Rng,
    best: &mut f64,
) -> Option<Vec<u8>> {
    let (lo, hi) = range;
    let offsets = make_offsets(l, h, w, motion, rng);
    let mut canvas = Canvas::new(h, w);
    for _ in 0..max_growths {
        let current = volume_ratio(&render_volume(&canvas, &offsets));
        let gap = (lo + hi) / 2.0 - current;
        if gap <= 0.0 {
            break;
        }
        grow(&mut canvas, gap, rng);
        let bits = render_volume(&canvas, &offsets);
        let ratio = volume_ratio(&bits);
        track_best(best, ratio, range);
        if ratio >= lo && ratio < hi {
            return Some(bits);
        }
        if ratio >= hi {
            // overshoot: erode back down toward the range
            for _ in 0..64 {
                canvas.erode();
                let bits = render_volume(&canvas, &offsets);
                let ratio = volume_ratio(&bits);
                track_best(best, ratio, range);
                if ratio < lo || ratio == 0.0 {
                    return None; // eroded past the range or away entirely
                }
                if ratio < hi {
                    return Some(bits);
                }
            }
            return None;
        }
    }
    None
}

/// Synthesize a mask whose volume ratio lands inside `spec.ratio_range`.
/// Same spec and seed reproduce the mask bit for bit.
pub fn generate_mask(spec: &MaskSpec, l: usize, h: usize, w: usize) -> Result<MaskVideo> {
    spec.validate()?;
    if h < 16 || w < 16 {
        return Err(Error::shape(format!("mask frames must be at least 16x16, got {h}x{w}")));
    }
    if l == 0 {
        return Err(Error::shape("mask needs at least one frame"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let area = (h * w) as f64;
    let mut best = f64::INFINITY;

    for _attempt in 0..100 {
        let bits = match spec.kind {
            MaskKind::Stroke => {
                let max_r = (h as f64 / 8.0).max(3.0);
                fit_canvas_to_range(
                    |canvas, gap, rng| {
                        // brush size scales with the remaining coverage gap
                        let base = (gap * area).sqrt() * 0.28;
                        let r = rng.gen_range(0.8..1.2) * base;
                        draw_stroke(canvas, r.clamp(3.0, max_r), rng);
                    },
                    8,
                    l,
                    h,
                    w,
                    spec.ratio_range,
                    spec.motion,
                    &mut rng,
                    &mut best,
                )
            }
            MaskKind::ObjectLike => fit_canvas_to_range(
                |canvas, gap, rng| {
                    let scale = (gap * area / std::f64::consts::PI).sqrt();
                    let ry = rng.gen_range(0.7..1.3) * scale;
                    let rx = rng.gen_range(0.7..1.3) * scale;
                    let cy = rng.gen_range(0.0..h as f64);
                    let cx = rng.gen_range(0.0..w as f64);
                    let phi = rng.gen_range(0.0..std::f64::consts::PI);
                    canvas.fill_ellipse(cy, cx, ry.max(2.0), rx.max(2.0), phi);
                    for _ in 0..rng.gen_range(1..=2) {
                        canvas.dilate();
                    }
                },
                3,
                l,
                h,
                w,
                spec.ratio_range,
                spec.motion,
                &mut rng,
                &mut best,
            ),
            MaskKind::Bbox => {
                let offsets = make_offsets(l, h, w, spec.motion, &mut rng);
                bbox_attempt(l, h, w, spec.ratio_range, &offsets, &mut rng, &mut best)
            }
        };
        if let Some(bits) = bits {
            return MaskVideo::from_bits(l, h, w, bits);
        }
    }
    Err(Error::MaskRatio { requested: spec.ratio_range, best })
}

fn bbox_attempt(
    l: usize,
    h: usize,
    w: usize,
    range: (f64, f64),
    offsets: &[(i64, i64)],
    rng: &mut ChaCha8Rng,
    best: &mut f64,
) -> Option<Vec<u8>> {
    let (lo, hi) = range;
    let area = (h * w) as f64;
    let target = rng.gen_range(lo + 0.05 * (hi - lo)..hi - 0.05 * (hi - lo));
    let aspect = rng.gen_range(0.6..1.6);
    let mut rw = ((target * area * aspect).sqrt().round() as usize).clamp(1, w);
    let mut rh = ((target * area / rw as f64).round() as usize).clamp(1, h);
    // nudge the box until its exact area ratio is inside the range
    for _ in 0..8 {
        let ratio = (rw * rh) as f64 / area;
        if ratio >= lo && ratio < hi {
            break;
        }
        if ratio < lo {
            if rw < w {
                rw += 1;
            } else if rh < h {
                rh += 1;
            } else {
                break;
            }
        } else if rh > 1 {
            rh -= 1;
        } else if rw > 1 {
            rw -= 1;
        } else {
            break;
        }
    }
    let ratio = (rw * rh) as f64 / area;
    track_best(best, ratio, range);
    if ratio < lo || ratio >= hi {
        return None;
    }
    let y0 = rng.gen_range(0..=(h - rh)) as i64;
    let x0 = rng.gen_range(0..=(w - rw)) as i64;
    // clamp each frame's offset so the box stays fully in frame: the
    // per-frame ratio is then exactly rw*rh/(h*w)
    let mut bits = vec![0u8; l * h * w];
    for (t, &(dy, dx)) in offsets.iter().enumerate() {
        let ty = (y0 + dy).clamp(0, (h - rh) as i64) as usize;
        let tx = (x0 + dx).clamp(0, (w - rw) as i64) as usize;
        let frame = &mut bits[t * h * w..][..h * w];
        for y in ty..ty + rh {
            for x in tx..tx + rw {
                frame[y * w + x] = 1;
            }
        }
    }
    Some(bits)
}

/// Zero out masked pixels: returns video * (1 - mask), one mask per batch
/// entry.
pub fn apply_mask<T: Scalar>(
    video: &TensorData<T>,
    masks: &[MaskVideo],
) -> Result<TensorData<T>> {
    let [b, c, l, h, w] = video.shape().dims5()?;
    if masks.len() != b {
        return Err(Error::shape(format!("need {b} masks for batch, got {}", masks.len())));
    }
    let mut out = video.clone();
    let plane = l * h * w;
    for (bi, mask) in masks.iter().enumerate() {
        if mask.frames() != l || mask.height() != h || mask.width() != w {
            return Err(Error::shape("mask volume does not match video dims"));
        }
        for ci in 0..c {
            let base = (bi * c + ci) * plane;
            let dst = &mut out.data_mut()[base..base + plane];
            for (d, &bit) in dst.iter_mut().zip(mask.bits()) {
                if bit != 0 {
                    *d = T::zero();
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    impl Canvas {
        fn fill_rect(&mut self, y0: usize, x0: usize, rh: usize, rw: usize) {
            for y in y0..(y0 + rh).min(self.h) {
                for x in x0..(x0 + rw).min(self.w) {
                    self.bits[y * self.w + x] = 1;
                }
            }
        }
    }

    #[test]
    fn ratio_of_degenerate_masks() {
        let zero = MaskVideo::from_bits(2, 4, 4, vec![0; 32]).unwrap();
        assert_eq!(zero.ratio(), 0.0);
        let one = MaskVideo::from_bits(2, 4, 4, vec![1; 32]).unwrap();
        assert_eq!(one.ratio(), 1.0);
        let half: Vec<u8> = (0..32).map(|i| ((i % 4) < 2) as u8).collect();
        let split = MaskVideo::from_bits(2, 4, 4, half).unwrap();
        assert_eq!(split.ratio(), 0.5);
    }

    #[test]
    fn full_frame_box_has_ratio_one() {
        let mut canvas = Canvas::new(16, 16);
        canvas.fill_rect(0, 0, 16, 16);
        let bits = render_volume(&canvas, &[(0, 0), (0, 0)]);
        let mask = MaskVideo::from_bits(2, 16, 16, bits).unwrap();
        assert_eq!(mask.ratio(), 1.0);
    }

    #[test]
    fn static_bbox_ratio_is_exact_every_frame() {
        let spec = MaskSpec {
            kind: MaskKind::Bbox,
            ratio_range: (0.06, 0.07),
            motion: 0,
            seed: 11,
        };
        let mask = generate_mask(&spec, 4, 64, 64).unwrap();
        // 16x16 box on 64x64 = 0.0625; any box in range has a fixed count
        let per_frame: Vec<usize> = (0..4)
            .map(|t| mask.frame_bits(t).iter().map(|&b| b as usize).sum())
            .collect();
        assert!(per_frame.windows(2).all(|p| p[0] == p[1]));
        let r = per_frame[0] as f64 / (64.0 * 64.0);
        assert!((0.06..0.07).contains(&r), "ratio {r}");
    }

    #[test]
    fn sixteen_square_on_64_is_0625() {
        let mut canvas = Canvas::new(64, 64);
        canvas.fill_rect(10, 20, 16, 16);
        let bits = render_volume(&canvas, &[(0, 0); 3]);
        let mask = MaskVideo::from_bits(3, 64, 64, bits).unwrap();
        assert_eq!(mask.ratio(), 0.0625);
    }

    #[test]
    fn same_seed_reproduces_bit_for_bit() {
        let spec = MaskSpec {
            kind: MaskKind::Stroke,
            ratio_range: (0.1, 0.2),
            motion: 2,
            seed: 99,
        };
        let a = generate_mask(&spec, 6, 64, 64).unwrap();
        let b = generate_mask(&spec, 6, 64, 64).unwrap();
        assert_eq!(a.bits(), b.bits());
    }

    #[test]
    fn ratio_lands_in_requested_range() {
        for (kind, seed) in [
            (MaskKind::Stroke, 5u64),
            (MaskKind::Bbox, 6),
            (MaskKind::ObjectLike, 7),
        ] {
            let spec = MaskSpec { kind, ratio_range: (0.1, 0.2), motion: 1, seed };
            let mask = generate_mask(&spec, 8, 64, 64).unwrap();
            let r = mask.ratio();
            assert!((0.1..0.2).contains(&r), "{kind:?} ratio {r}");
        }
    }

    #[test]
    fn unreachable_range_reports_best_ratio() {
        // a stroke brush cannot paint under 0.01% of a 64x64 frame
        let spec = MaskSpec {
            kind: MaskKind::Stroke,
            ratio_range: (0.0, 0.0001),
            motion: 0,
            seed: 1,
        };
        let err = generate_mask(&spec, 2, 64, 64).unwrap_err();
        match err {
            Error::MaskRatio { best, .. } => assert!(best.is_finite()),
            other => panic!("expected MaskRatio error, got {other}"),
        }
    }

    #[test]
    fn temporal_coherence_iou() {
        for motion in [0u32, 1, 2] {
            for (kind, seed) in [(MaskKind::Stroke, 21u64), (MaskKind::Bbox, 22)] {
                let spec = MaskSpec { kind, ratio_range: (0.15, 0.3), motion, seed };
                let mask = generate_mask(&spec, 8, 64, 64).unwrap();
                for t in 0..7 {
                    let iou = mask.frame_iou(t, t + 1);
                    assert!(
                        iou >= 0.5,
                        "{kind:?} motion {motion}: IoU({t},{}) = {iou}",
                        t + 1
                    );
                }
            }
        }
    }

    #[test]
    fn apply_mask_zeroes_masked_pixels_and_is_idempotent() {
        let video = crate::tape::tensor_from_fn([1, 3, 2, 16, 16], |i| (i as f64 * 0.01).sin());
        let spec = MaskSpec {
            kind: MaskKind::Bbox,
            ratio_range: (0.2, 0.3),
            motion: 0,
            seed: 3,
        };
        let mask = generate_mask(&spec, 2, 16, 16).unwrap();
        let masked = apply_mask(&video, std::slice::from_ref(&mask)).unwrap();
        for ci in 0..3 {
            for (i, &bit) in mask.bits().iter().enumerate() {
                let v = masked.data()[ci * 512 + i];
                if bit != 0 {
                    assert_eq!(v, 0.0);
                } else {
                    assert_eq!(v, video.data()[ci * 512 + i]);
                }
            }
        }
        let twice = apply_mask(&masked, std::slice::from_ref(&mask)).unwrap();
        assert_eq!(twice.max_abs_diff(&masked), 0.0);

        let empty = MaskVideo::from_bits(2, 16, 16, vec![0; 512]).unwrap();
        let untouched = apply_mask(&video, std::slice::from_ref(&empty)).unwrap();
        assert_eq!(untouched.max_abs_diff(&video), 0.0);
        let full = MaskVideo::from_bits(2, 16, 16, vec![1; 512]).unwrap();
        let zeroed = apply_mask(&video, std::slice::from_ref(&full)).unwrap();
        assert!(zeroed.data().iter().all(|&v| v == 0.0));
    }
}
