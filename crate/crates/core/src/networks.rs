//! The inpainting generator, the score-map discriminator, and a gated-3D
//! twin of the generator used only for parameter/runtime comparisons.

use std::collections::BTreeMap;
use std::time::Instant;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels::{self, Conv2dCfg};
use crate::maskgen::MaskVideo;
use crate::modules::{
    init_tsm_equivalent, lgtsm_layer_forward, spectral_normalize, Activation, Fraction,
    GatedLayerParams, Resample, ShiftMode, ShiftSpec, SpectralNormState,
};
use crate::parallel::map_slice;
use crate::params::{init_conv_weight, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, TensorData};

pub type SnStates<T> = BTreeMap<String, SpectralNormState<T>>;
pub type VarMap = BTreeMap<String, Var>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorConfig {
    /// Width of the first layer; doubles after each downsampling stage.
    pub base_channels: usize,
    /// Spatial kernel extent for every conv.
    pub kernel_size: usize,
    /// Temporal kernel extent of the learnable shift.
    pub temporal_kernel: usize,
    pub shift_mode: ShiftMode,
    pub shift_fraction: Fraction,
    pub causal: bool,
    pub leaky_slope: f64,
    pub spectral_norm: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            base_channels: 32,
            kernel_size: 5,
            temporal_kernel: 3,
            shift_mode: ShiftMode::Learnable,
            shift_fraction: Fraction::QUARTER,
            causal: false,
            leaky_slope: 0.2,
            spectral_norm: true,
        }
    }
}

impl GeneratorConfig {
    pub fn shift_spec(&self) -> ShiftSpec {
        ShiftSpec { fraction: self.shift_fraction, causal: self.causal, mode: self.shift_mode }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub index: usize,
    pub cin: usize,
    pub cout: usize,
    pub resample: Resample,
    pub dilation: usize,
    /// Gated layers carry a shift module; the output head does not.
    pub gated: bool,
}

/// Eleven layers, no skip connections: conv, two bilinear-then-conv
/// downsamplings, dilated middle, two bilinear-then-conv upsamplings, and a
/// plain tanh output head.
pub fn generator_layer_table(base: usize) -> Vec<LayerSpec> {
    let c = base;
    let table = [
        (4, c, Resample::None, 1, true),
        (c, 2 * c, Resample::Down2, 1, true),
        (2 * c, 2 * c, Resample::None, 1, true),
        (2 * c, 4 * c, Resample::Down2, 1, true),
        (4 * c, 4 * c, Resample::None, 1, true),
        (4 * c, 4 * c, Resample::None, 2, true),
        (4 * c, 4 * c, Resample::None, 4, true),
        (4 * c, 4 * c, Resample::None, 1, true),
        (4 * c, 2 * c, Resample::Up2, 1, true),
        (2 * c, c, Resample::Up2, 1, true),
        (c, 3, Resample::None, 1, false),
    ];
    table
        .iter()
        .enumerate()
        .map(|(i, &(cin, cout, resample, dilation, gated))| LayerSpec {
            index: i + 1,
            cin,
            cout,
            resample,
            dilation,
            gated,
        })
        .collect()
}

fn layer_name(prefix: &str, index: usize, part: &str) -> String {
    format!("{prefix}.layer{index:02}.{part}")
}

pub struct Generator {
    pub cfg: GeneratorConfig,
    layers: Vec<LayerSpec>,
}

impl Generator {
    pub fn new(cfg: GeneratorConfig) -> Self {
        Generator { cfg, layers: generator_layer_table(cfg.base_channels) }
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Parameters and spectral-norm states under the "generator." prefix.
    pub fn init_params<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        sn: &mut SnStates<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let k = self.cfg.kernel_size;
        let spec = self.cfg.shift_spec();
        for layer in &self.layers {
            let fan_in = layer.cin * k * k;
            if layer.gated {
                for part in ["wf", "wg"] {
                    let name = layer_name("generator", layer.index, part);
                    store.insert(
                        &name,
                        init_conv_weight([layer.cout, layer.cin, k, k], fan_in, rng),
                    )?;
                    if self.cfg.spectral_norm {
                        sn.insert(name, SpectralNormState::new(layer.cout, rng));
                    }
                }
                store.insert(
                    layer_name("generator", layer.index, "bias_f"),
                    TensorData::zeros([layer.cout]),
                )?;
                // gates start mostly open (sigmoid(2) ~ 0.88) so activations
                // survive the 10-layer gated stack at init
                store.insert(
                    layer_name("generator", layer.index, "bias_g"),
                    TensorData::full([layer.cout], T::from_f64(2.0)),
                )?;
                if self.cfg.shift_mode == ShiftMode::Learnable {
                    store.insert(
                        layer_name("generator", layer.index, "shift"),
                        init_tsm_equivalent(layer.cin, self.cfg.temporal_kernel, &spec)?,
                    )?;
                }
            } else {
                let name = layer_name("generator", layer.index, "w");
                store.insert(
                    &name,
                    init_conv_weight([layer.cout, layer.cin, k, k], fan_in, rng),
                )?;
                if self.cfg.spectral_norm {
                    sn.insert(name, SpectralNormState::new(layer.cout, rng));
                }
                store.insert(
                    layer_name("generator", layer.index, "bias"),
                    TensorData::zeros([layer.cout]),
                )?;
            }
        }
        Ok(())
    }

    fn check_input<T: Scalar>(&self, input: &TensorData<T>) -> Result<()> {
        let [_, c, _, h, w] = input.shape().dims5()?;
        if c != 4 {
            return Err(Error::shape(format!(
                "generator input must have 4 channels (rgb + mask), got {c}"
            )));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::shape(format!(
                "spatial dims must be a multiple of 4 (two downsamplings), got {h}x{w}"
            )));
        }
        Ok(())
    }

    fn weight_var<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        vars: &VarMap,
        sn: &mut SnStates<T>,
        update_sn: bool,
        name: &str,
    ) -> Result<Var> {
        let raw = *vars
            .get(name)
            .ok_or_else(|| Error::config(format!("missing bound parameter {name}")))?;
        if self.cfg.spectral_norm {
            let state = sn
                .get_mut(name)
                .ok_or_else(|| Error::config(format!("missing spectral state for {name}")))?;
            spectral_normalize(tape, raw, state, update_sn)
        } else {
            Ok(raw)
        }
    }

    /// Tape forward over a pre-assembled `[B, 4, L, H, W]` input.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        vars: &VarMap,
        sn: &mut SnStates<T>,
        update_sn: bool,
        input: Var,
    ) -> Result<Var> {
        self.check_input(tape.val(input))?;
        let spec = self.cfg.shift_spec();
        let mut cur = input;
        for layer in &self.layers {
            let conv = Conv2dCfg {
                dilation: (layer.dilation, layer.dilation),
                ..Default::default()
            };
            if layer.gated {
                let wf =
                    self.weight_var(tape, vars, sn, update_sn, &layer_name("generator", layer.index, "wf"))?;
                let wg =
                    self.weight_var(tape, vars, sn, update_sn, &layer_name("generator", layer.index, "wg"))?;
                let bias_f = vars[&layer_name("generator", layer.index, "bias_f")];
                let bias_g = vars[&layer_name("generator", layer.index, "bias_g")];
                let shift_kernels = if self.cfg.shift_mode == ShiftMode::Learnable {
                    Some(vars[&layer_name("generator", layer.index, "shift")])
                } else {
                    None
                };
                let p = GatedLayerParams {
                    wf,
                    wg,
                    bias_f,
                    bias_g,
                    shift: Some(spec),
                    shift_kernels,
                    activation: Activation::LeakyRelu(self.cfg.leaky_slope),
                    conv,
                    resample: layer.resample,
                };
                cur = lgtsm_layer_forward(tape, cur, &p)?;
            } else {
                let w =
                    self.weight_var(tape, vars, sn, update_sn, &layer_name("generator", layer.index, "w"))?;
                let bias = vars[&layer_name("generator", layer.index, "bias")];
                let raw = tape.conv2d(cur, w, Some(bias), &conv)?;
                cur = tape.tanh(raw)?;
            }
        }
        Ok(cur)
    }

    /// Inference forward without a tape: same arithmetic, no gradient
    /// bookkeeping. Spectral-norm sigma uses the stored u vectors unchanged.
    pub fn forward_raw<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        sn: &mut SnStates<T>,
        input: &TensorData<T>,
    ) -> Result<TensorData<T>> {
        self.check_input(input)?;
        let spec = self.cfg.shift_spec();
        let mut cur = input.clone();
        for layer in &self.layers {
            let conv = Conv2dCfg {
                dilation: (layer.dilation, layer.dilation),
                ..Default::default()
            };
            cur = match layer.resample {
                Resample::None => cur,
                Resample::Down2 => {
                    let [_, _, _, h, w] = cur.shape().dims5()?;
                    kernels::resize_forward(&cur, h / 2, w / 2)?
                }
                Resample::Up2 => {
                    let [_, _, _, h, w] = cur.shape().dims5()?;
                    kernels::resize_forward(&cur, h * 2, w * 2)?
                }
            };
            if layer.gated {
                let wf = self.raw_weight(store, sn, &layer_name("generator", layer.index, "wf"))?;
                let wg = self.raw_weight(store, sn, &layer_name("generator", layer.index, "wg"))?;
                let bias_f = store.get(&layer_name("generator", layer.index, "bias_f"))?;
                let bias_g = store.get(&layer_name("generator", layer.index, "bias_g"))?;
                let shifted = match self.cfg.shift_mode {
                    ShiftMode::FixedTsm => {
                        let [_, c, _, _, _] = cur.shape().dims5()?;
                        kernels::shift_fixed_forward(&cur, spec.split(c))?
                    }
                    ShiftMode::Learnable => {
                        let k = store.get(&layer_name("generator", layer.index, "shift"))?;
                        kernels::temporal_conv_forward(&cur, k, spec.causal)?
                    }
                };
                let gating = kernels::conv2d_forward(&cur, &wg, Some(bias_g), &conv)?;
                let feature = kernels::conv2d_forward(&shifted, &wf, Some(bias_f), &conv)?;
                cur = gate_combine(&gating, &feature, self.cfg.leaky_slope);
            } else {
                let w = self.raw_weight(store, sn, &layer_name("generator", layer.index, "w"))?;
                let bias = store.get(&layer_name("generator", layer.index, "bias"))?;
                let raw = kernels::conv2d_forward(&cur, &w, Some(bias), &conv)?;
                cur = tanh_raw(&raw);
            }
        }
        Ok(cur)
    }

    fn raw_weight<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        sn: &mut SnStates<T>,
        name: &str,
    ) -> Result<TensorData<T>> {
        let w = store.get(name)?;
        if self.cfg.spectral_norm {
            let state = sn
                .get_mut(name)
                .ok_or_else(|| Error::config(format!("missing spectral state for {name}")))?;
            let sigma = crate::modules::estimate_sigma(w, state, false)?;
            Ok(w.map(|v| v * T::from_f64(1.0 / sigma)))
        } else {
            Ok(w.clone())
        }
    }
}

/// sigmoid(gating) * leaky_relu(feature)
fn gate_combine<T: Scalar>(
    gating: &TensorData<T>,
    feature: &TensorData<T>,
    slope: f64,
) -> TensorData<T> {
    let one = T::one();
    let s = T::from_f64(slope);
    let data: Vec<T> = gating
        .data()
        .iter()
        .zip(feature.data())
        .map(|(&g, &f)| {
            let gate = one / (one + (-g).exp());
            let act = if f > T::zero() { f } else { f * s };
            gate * act
        })
        .collect();
    TensorData::from_vec(gating.shape().clone(), data).expect("same shape")
}

fn tanh_raw<T: Scalar>(x: &TensorData<T>) -> TensorData<T> {
    let data = map_slice(x.data(), |&v| v.tanh());
    TensorData::from_vec(x.shape().clone(), data).expect("same shape")
}

/// Stack masked RGB and the mask into the 4-channel generator input, one
/// mask per batch entry.
pub fn assemble_input<T: Scalar>(
    masked_video: &TensorData<T>,
    masks: &[MaskVideo],
) -> Result<TensorData<T>> {
    let [b, c, l, h, w] = masked_video.shape().dims5()?;
    if c != 3 {
        return Err(Error::shape(format!("masked video must have 3 channels, got {c}")));
    }
    if masks.len() != b {
        return Err(Error::shape(format!("need {b} masks for batch, got {}", masks.len())));
    }
    let mut out = TensorData::zeros([b, 4, l, h, w]);
    let plane = l * h * w;
    let src = masked_video.data();
    {
        let dst = out.data_mut();
        for (bi, mask) in masks.iter().enumerate() {
            if mask.frames() != l || mask.height() != h || mask.width() != w {
                return Err(Error::shape("mask volume does not match video dims"));
            }
            for ci in 0..3 {
                let s = &src[(bi * 3 + ci) * plane..][..plane];
                dst[(bi * 4 + ci) * plane..][..plane].copy_from_slice(s);
            }
            let m = &mut dst[(bi * 4 + 3) * plane..][..plane];
            for (d, &bit) in m.iter_mut().zip(mask.bits()) {
                *d = if bit != 0 { T::one() } else { T::zero() };
            }
        }
    }
    Ok(out)
}

/// mask * generated + (1 - mask) * original; delivery only, never a loss input.
pub fn composite_output<T: Scalar>(
    generated: &TensorData<T>,
    original: &TensorData<T>,
    masks: &[MaskVideo],
) -> Result<TensorData<T>> {
    let [b, c, l, h, w] = generated.shape().dims5()?;
    if original.shape() != generated.shape() {
        return Err(Error::shape(format!(
            "composite shapes differ: {} vs {}",
            generated.shape(),
            original.shape()
        )));
    }
    if masks.len() != b {
        return Err(Error::shape(format!("need {b} masks for batch, got {}", masks.len())));
    }
    let mut out = original.clone();
    let plane = l * h * w;
    let gen = generated.data();
    let dst = out.data_mut();
    for (bi, mask) in masks.iter().enumerate() {
        if mask.frames() != l || mask.height() != h || mask.width() != w {
            return Err(Error::shape("mask volume does not match video dims"));
        }
        for ci in 0..c {
            let base = (bi * c + ci) * plane;
            for (i, &bit) in mask.bits().iter().enumerate() {
                if bit != 0 {
                    dst[base + i] = gen[base + i];
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscriminatorConfig {
    pub base_channels: usize,
    pub kernel_size: usize,
    pub shift_fraction: Fraction,
    pub leaky_slope: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            base_channels: 32,
            kernel_size: 5,
            shift_fraction: Fraction::QUARTER,
            leaky_slope: 0.2,
        }
    }
}

/// Six stride-2 convolutions with a fixed temporal shift before each one,
/// spectral normalization on every weight, and a raw 1-channel score map.
pub struct Discriminator {
    pub cfg: DiscriminatorConfig,
    channels: Vec<(usize, usize)>,
}

impl Discriminator {
    pub fn new(cfg: DiscriminatorConfig) -> Self {
        let d = cfg.base_channels;
        let channels = vec![
            (3, d),
            (d, 2 * d),
            (2 * d, 4 * d),
            (4 * d, 4 * d),
            (4 * d, 4 * d),
            (4 * d, 1),
        ];
        Discriminator { cfg, channels }
    }

    pub fn num_layers(&self) -> usize {
        self.channels.len()
    }

    pub fn init_params<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        sn: &mut SnStates<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let k = self.cfg.kernel_size;
        for (i, &(cin, cout)) in self.channels.iter().enumerate() {
            let name = layer_name("discriminator", i + 1, "w");
            store.insert(&name, init_conv_weight([cout, cin, k, k], cin * k * k, rng))?;
            sn.insert(name, SpectralNormState::new(cout, rng));
            store.insert(layer_name("discriminator", i + 1, "bias"), TensorData::zeros([cout]))?;
        }
        Ok(())
    }

    /// Per spatial-temporal point scores, `[B, 1, L, H/64, W/64]` for 5x5
    /// stride-2 layers on a 64-pixel input.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        vars: &VarMap,
        sn: &mut SnStates<T>,
        update_sn: bool,
        video: Var,
    ) -> Result<Var> {
        let [_, c, _, _, _] = tape.val(video).shape().dims5()?;
        if c != 3 {
            return Err(Error::shape(format!("discriminator input must have 3 channels, got {c}")));
        }
        let mut cur = video;
        let n = self.channels.len();
        for (i, &(cin, _)) in self.channels.iter().enumerate() {
            let spec = ShiftSpec {
                fraction: self.cfg.shift_fraction,
                causal: false,
                mode: ShiftMode::FixedTsm,
            };
            cur = tape.shift_fixed(cur, spec.split(cin))?;
            let name = layer_name("discriminator", i + 1, "w");
            let raw = *vars
                .get(&name)
                .ok_or_else(|| Error::config(format!("missing bound parameter {name}")))?;
            let state = sn
                .get_mut(&name)
                .ok_or_else(|| Error::config(format!("missing spectral state for {name}")))?;
            let w = spectral_normalize(tape, raw, state, update_sn)?;
            let bias = vars[&layer_name("discriminator", i + 1, "bias")];
            cur = tape.conv2d(cur, w, Some(bias), &Conv2dCfg::same(2))?;
            if i + 1 < n {
                cur = tape.leaky_relu(cur, self.cfg.leaky_slope)?;
            }
        }
        Ok(cur)
    }
}

/// Structural twin of the generator with gated 3D convolutions (temporal
/// extent 3) instead of shift-plus-2D. Used for parameter counts and forward
/// timing only; it is never trained, so there is no tape path.
pub struct Conv3dGenerator {
    pub cfg: GeneratorConfig,
    layers: Vec<LayerSpec>,
}

impl Conv3dGenerator {
    pub fn new(cfg: GeneratorConfig) -> Self {
        Conv3dGenerator { cfg, layers: generator_layer_table(cfg.base_channels) }
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn init_params<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let k = self.cfg.kernel_size;
        for layer in &self.layers {
            if layer.gated {
                let fan_in = layer.cin * 3 * k * k;
                for part in ["wf", "wg"] {
                    store.insert(
                        layer_name("gen3d", layer.index, part),
                        init_conv_weight([layer.cout, layer.cin, 3, k, k], fan_in, rng),
                    )?;
                }
                store.insert(
                    layer_name("gen3d", layer.index, "bias_f"),
                    TensorData::zeros([layer.cout]),
                )?;
                store.insert(
                    layer_name("gen3d", layer.index, "bias_g"),
                    TensorData::zeros([layer.cout]),
                )?;
            } else {
                // output head stays a per-frame conv in both builds
                store.insert(
                    layer_name("gen3d", layer.index, "w"),
                    init_conv_weight([layer.cout, layer.cin, k, k], layer.cin * k * k, rng),
                )?;
                store.insert(
                    layer_name("gen3d", layer.index, "bias"),
                    TensorData::zeros([layer.cout]),
                )?;
            }
        }
        Ok(())
    }

    pub fn forward_raw<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        input: &TensorData<T>,
    ) -> Result<TensorData<T>> {
        let mut cur = input.clone();
        for layer in &self.layers {
            let conv = Conv2dCfg {
                dilation: (layer.dilation, layer.dilation),
                ..Default::default()
            };
            cur = match layer.resample {
                Resample::None => cur,
                Resample::Down2 => {
                    let [_, _, _, h, w] = cur.shape().dims5()?;
                    kernels::resize_forward(&cur, h / 2, w / 2)?
                }
                Resample::Up2 => {
                    let [_, _, _, h, w] = cur.shape().dims5()?;
                    kernels::resize_forward(&cur, h * 2, w * 2)?
                }
            };
            if layer.gated {
                let wf = store.get(&layer_name("gen3d", layer.index, "wf"))?;
                let wg = store.get(&layer_name("gen3d", layer.index, "wg"))?;
                let bias_f = store.get(&layer_name("gen3d", layer.index, "bias_f"))?;
                let bias_g = store.get(&layer_name("gen3d", layer.index, "bias_g"))?;
                let gating = kernels::conv3d_forward(&cur, wg, Some(bias_g), &conv)?;
                let feature = kernels::conv3d_forward(&cur, wf, Some(bias_f), &conv)?;
                cur = gate_combine(&gating, &feature, self.cfg.leaky_slope);
            } else {
                let w = store.get(&layer_name("gen3d", layer.index, "w"))?;
                let bias = store.get(&layer_name("gen3d", layer.index, "bias"))?;
                let raw = kernels::conv2d_forward(&cur, w, Some(bias), &conv)?;
                cur = tanh_raw(&raw);
            }
        }
        Ok(cur)
    }
}

/// Median wall-clock seconds over `runs` calls.
pub fn median_seconds(mut f: impl FnMut() -> Result<()>, runs: usize) -> Result<f64> {
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs {
        let start = Instant::now();
        f()?;
        times.push(start.elapsed().as_secs_f64());
    }
    times.sort_by(|a, b| a.partial_cmp(b).expect("no NaN timings"));
    Ok(times[times.len() / 2])
}
