//! Two-stage training (generator pretrain, adversarial finetune),
//! evaluation over the seven mask-ratio buckets, inference, and the
//! parameter/runtime report.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adam::{adam_step, AdamParams, AdamState};
use crate::checkpoint::{Checkpoint, RngState, Stage};
use crate::data::{self, Dataset, EpochSampler};
use crate::error::{Error, Result};
use crate::losses::{self, FeatureExtractor, HingeSign, LossTerms, LossWeights};
use crate::maskgen::{self, MaskKind, MaskSpec, MaskVideo};
use crate::modules::{Fraction, ShiftMode};
use crate::networks::{
    assemble_input, composite_output, Conv3dGenerator, Discriminator, DiscriminatorConfig,
    Generator, GeneratorConfig, SnStates,
};
use crate::params::ParamStore;
use crate::tape::Tape;
use crate::tensor::{Scalar, TensorData};

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    Synthetic { clips: usize, val_clips: usize, seed: u64 },
    Manifest(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: u64,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weights: LossWeights,
    pub batch_size: usize,
    pub clip_len: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub causal: bool,
    pub shift_mode: ShiftMode,
    pub shift_fraction: Fraction,
    pub base_channels: usize,
    pub disc_channels: usize,
    pub kernel_size: usize,
    pub temporal_kernel: usize,
    pub spectral_norm_generator: bool,
    pub hinge_sign: HingeSign,
    pub eval_every: u64,
    pub checkpoint_every: u64,
    pub mask_kind: MaskKind,
    pub mask_ratio: (f64, f64),
    pub mask_motion: u32,
    pub dataset: DatasetSource,
    pub fx_seed: u64,
    pub fx_weights: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Pretrain stops early when validation l1 improves by less than
    /// `plateau_min_improvement` over `plateau_evals` consecutive evals.
    pub plateau_evals: usize,
    pub plateau_min_improvement: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: Stage::Pretrain,
            steps: 300,
            lr_g: 1e-4,
            lr_d: 1e-4,
            beta1: 0.5,
            beta2: 0.9,
            weights: LossWeights::default(),
            batch_size: 2,
            clip_len: 8,
            height: 64,
            width: 64,
            seed: 0,
            causal: false,
            shift_mode: ShiftMode::Learnable,
            shift_fraction: Fraction::QUARTER,
            base_channels: 32,
            disc_channels: 32,
            kernel_size: 5,
            temporal_kernel: 3,
            spectral_norm_generator: true,
            hinge_sign: HingeSign::Standard,
            eval_every: 50,
            checkpoint_every: 100,
            mask_kind: MaskKind::Stroke,
            mask_ratio: (0.1, 0.2),
            mask_motion: 2,
            dataset: DatasetSource::Synthetic { clips: 16, val_clips: 4, seed: 1000 },
            fx_seed: 7,
            fx_weights: None,
            out_dir: PathBuf::from("runs/default"),
            plateau_evals: 3,
            plateau_min_improvement: 0.01,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(format!("{key}: expected bool, got {v}"))),
    }
}

fn parse_num<N: std::str::FromStr>(key: &str, v: &str) -> Result<N> {
    v.parse()
        .map_err(|_| Error::config(format!("{key}: could not parse {v}")))
}

fn parse_fraction(v: &str) -> Result<Fraction> {
    let (num, den) = v
        .split_once('/')
        .ok_or_else(|| Error::config(format!("shift_fraction must look like 1/4, got {v}")))?;
    Fraction::new(parse_num("shift_fraction", num.trim())?, parse_num("shift_fraction", den.trim())?)
}

impl TrainConfig {
    /// Line-based `key = value` file; unknown keys are errors.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (line_no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected key = value, got {line}", line_no + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    /// Apply one `key = value` override (CLI flags beat file values).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "stage" => self.stage = Stage::parse(value)?,
            "steps" => self.steps = parse_num(key, value)?,
            "lr_g" => self.lr_g = parse_num(key, value)?,
            "lr_d" => self.lr_d = parse_num(key, value)?,
            "beta1" => self.beta1 = parse_num(key, value)?,
            "beta2" => self.beta2 = parse_num(key, value)?,
            "lambda_l1" => self.weights.l1 = parse_num(key, value)?,
            "lambda_perc" => self.weights.perc = parse_num(key, value)?,
            "lambda_style" => self.weights.style = parse_num(key, value)?,
            "lambda_g" => self.weights.adv = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "clip_len" => self.clip_len = parse_num(key, value)?,
            "height" => self.height = parse_num(key, value)?,
            "width" => self.width = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "causal" => self.causal = parse_bool(key, value)?,
            "shift_mode" => {
                self.shift_mode = match value {
                    "fixed_tsm" => ShiftMode::FixedTsm,
                    "learnable" => ShiftMode::Learnable,
                    other => {
                        return Err(Error::config(format!(
                            "shift_mode {other} unknown; use fixed_tsm|learnable"
                        )))
                    }
                }
            }
            "shift_fraction" => self.shift_fraction = parse_fraction(value)?,
            "base_channels" => self.base_channels = parse_num(key, value)?,
            "disc_channels" => self.disc_channels = parse_num(key, value)?,
            "kernel_size" => self.kernel_size = parse_num(key, value)?,
            "temporal_kernel" => self.temporal_kernel = parse_num(key, value)?,
            "spectral_norm_generator" => self.spectral_norm_generator = parse_bool(key, value)?,
            "hinge_sign" => self.hinge_sign = HingeSign::parse(value)?,
            "eval_every" => self.eval_every = parse_num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(key, value)?,
            "mask_kind" => self.mask_kind = MaskKind::parse(value)?,
            "mask_ratio_lo" => self.mask_ratio.0 = parse_num(key, value)?,
            "mask_ratio_hi" => self.mask_ratio.1 = parse_num(key, value)?,
            "mask_motion" => self.mask_motion = parse_num(key, value)?,
            "dataset" => {
                self.dataset = if value == "synthetic" {
                    match self.dataset {
                        DatasetSource::Synthetic { .. } => self.dataset.clone(),
                        _ => DatasetSource::Synthetic { clips: 16, val_clips: 4, seed: 1000 },
                    }
                } else if let Some(path) = value.strip_prefix("manifest:") {
                    DatasetSource::Manifest(PathBuf::from(path))
                } else {
                    return Err(Error::config(format!(
                        "dataset must be `synthetic` or `manifest:PATH`, got {value}"
                    )));
                }
            }
            "train_clips" => {
                if let DatasetSource::Synthetic { ref mut clips, .. } = self.dataset {
                    *clips = parse_num(key, value)?;
                } else {
                    return Err(Error::config("train_clips only applies to dataset = synthetic"));
                }
            }
            "val_clips" => {
                if let DatasetSource::Synthetic { ref mut val_clips, .. } = self.dataset {
                    *val_clips = parse_num(key, value)?;
                } else {
                    return Err(Error::config("val_clips only applies to dataset = synthetic"));
                }
            }
            "data_seed" => {
                if let DatasetSource::Synthetic { ref mut seed, .. } = self.dataset {
                    *seed = parse_num(key, value)?;
                } else {
                    return Err(Error::config("data_seed only applies to dataset = synthetic"));
                }
            }
            "fx_seed" => self.fx_seed = parse_num(key, value)?,
            "fx_weights" => self.fx_weights = Some(PathBuf::from(value)),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "plateau_evals" => self.plateau_evals = parse_num(key, value)?,
            "plateau_min_improvement" => self.plateau_min_improvement = parse_num(key, value)?,
            other => return Err(Error::config(format!("unknown config key {other}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 && self.stage == Stage::Finetune {
            // zero pretrain steps is a valid "checkpoint equals init" run
        }
        if self.lr_g <= 0.0 || self.lr_d <= 0.0 {
            return Err(Error::config("learning rates must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        self.weights.validate()?;
        let (lo, hi) = self.mask_ratio;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo >= hi {
            return Err(Error::config("mask ratio range must satisfy 0 <= lo < hi <= 1"));
        }
        Ok(())
    }

    /// Lossless textual form: `parse_str(to_config_string(c)) == c`.
    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let mut push = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
        push("stage", self.stage.as_str().into());
        push("steps", self.steps.to_string());
        push("lr_g", format!("{:e}", self.lr_g));
        push("lr_d", format!("{:e}", self.lr_d));
        push("beta1", self.beta1.to_string());
        push("beta2", self.beta2.to_string());
        push("lambda_l1", self.weights.l1.to_string());
        push("lambda_perc", self.weights.perc.to_string());
        push("lambda_style", self.weights.style.to_string());
        push("lambda_g", self.weights.adv.to_string());
        push("batch_size", self.batch_size.to_string());
        push("clip_len", self.clip_len.to_string());
        push("height", self.height.to_string());
        push("width", self.width.to_string());
        push("seed", self.seed.to_string());
        push("causal", self.causal.to_string());
        push(
            "shift_mode",
            match self.shift_mode {
                ShiftMode::FixedTsm => "fixed_tsm".into(),
                ShiftMode::Learnable => "learnable".into(),
            },
        );
        push(
            "shift_fraction",
            format!("{}/{}", self.shift_fraction.num, self.shift_fraction.den),
        );
        push("base_channels", self.base_channels.to_string());
        push("disc_channels", self.disc_channels.to_string());
        push("kernel_size", self.kernel_size.to_string());
        push("temporal_kernel", self.temporal_kernel.to_string());
        push("spectral_norm_generator", self.spectral_norm_generator.to_string());
        push("hinge_sign", self.hinge_sign.as_str().into());
        push("eval_every", self.eval_every.to_string());
        push("checkpoint_every", self.checkpoint_every.to_string());
        push(
            "mask_kind",
            match self.mask_kind {
                MaskKind::Stroke => "stroke".into(),
                MaskKind::Bbox => "bbox".into(),
                MaskKind::ObjectLike => "object".into(),
            },
        );
        push("mask_ratio_lo", self.mask_ratio.0.to_string());
        push("mask_ratio_hi", self.mask_ratio.1.to_string());
        push("mask_motion", self.mask_motion.to_string());
        match &self.dataset {
            DatasetSource::Synthetic { clips, val_clips, seed } => {
                push("dataset", "synthetic".into());
                push("train_clips", clips.to_string());
                push("val_clips", val_clips.to_string());
                push("data_seed", seed.to_string());
            }
            DatasetSource::Manifest(path) => {
                push("dataset", format!("manifest:{}", path.display()));
            }
        }
        push("fx_seed", self.fx_seed.to_string());
        if let Some(p) = &self.fx_weights {
            push("fx_weights", p.display().to_string());
        }
        push("out_dir", self.out_dir.display().to_string());
        push("plateau_evals", self.plateau_evals.to_string());
        push("plateau_min_improvement", self.plateau_min_improvement.to_string());
        s
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            base_channels: self.base_channels,
            kernel_size: self.kernel_size,
            temporal_kernel: self.temporal_kernel,
            shift_mode: self.shift_mode,
            shift_fraction: self.shift_fraction,
            causal: self.causal,
            leaky_slope: 0.2,
            spectral_norm: self.spectral_norm_generator,
        }
    }

    pub fn discriminator_config(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            base_channels: self.disc_channels,
            kernel_size: self.kernel_size,
            shift_fraction: self.shift_fraction,
            leaky_slope: 0.2,
        }
    }
}

/// One training step's loss components. Finetune steps carry every weighted
/// term of the overall objective plus the discriminator loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub stage: Stage,
    pub l1: f64,
    pub perc: f64,
    pub style: f64,
    pub adv: Option<f64>,
    pub d_loss: Option<f64>,
    pub total: f64,
}

impl StepLog {
    pub fn render(&self) -> String {
        let mut s = format!(
            "step {:>6} [{}] l1 {:.5} perc {:.5} style {:.5}",
            self.step,
            self.stage.as_str(),
            self.l1,
            self.perc,
            self.style
        );
        if let Some(adv) = self.adv {
            s.push_str(&format!(" adv {adv:.5}"));
        }
        if let Some(d) = self.d_loss {
            s.push_str(&format!(" d {d:.5}"));
        }
        s.push_str(&format!(" total {:.5}", self.total));
        s
    }
}

pub struct TrainOutcome {
    pub logs: Vec<StepLog>,
    pub val_history: Vec<(u64, f64)>,
    pub final_checkpoint: PathBuf,
    pub stopped_early: bool,
}

/// Everything the loop owns. Built fresh from a config or restored from a
/// checkpoint.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub gen: Generator,
    pub disc: Discriminator,
    pub params: ParamStore<f32>,
    pub sn: SnStates<f32>,
    pub adam_g: AdamState<f32>,
    pub adam_d: AdamState<f32>,
    pub fx: FeatureExtractor<f32>,
    pub rng: ChaCha8Rng,
    pub step: u64,
    train_set: Dataset<f32>,
    val_set: Dataset<f32>,
    sampler: EpochSampler,
    sampler_rng: ChaCha8Rng,
}

fn load_datasets(cfg: &TrainConfig) -> Result<(Dataset<f32>, Dataset<f32>)> {
    match &cfg.dataset {
        DatasetSource::Synthetic { clips, val_clips, seed } => {
            let train = Dataset::synthetic(*clips, *seed, cfg.clip_len, cfg.height, cfg.width)?;
            let val = Dataset::synthetic(
                *val_clips,
                seed.wrapping_add(0x10_000),
                cfg.clip_len,
                cfg.height,
                cfg.width,
            )?;
            Ok((train, val))
        }
        DatasetSource::Manifest(path) => {
            let all = Dataset::from_manifest(path)?;
            if all.len() < 2 {
                return Err(Error::config("manifest needs at least 2 clips (train + val)"));
            }
            let n_val = (all.len() / 5).max(1);
            let mut clips = all.clips;
            let val = Dataset { clips: clips.split_off(clips.len() - n_val) };
            Ok((Dataset { clips }, val))
        }
    }
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let (train_set, val_set) = load_datasets(&cfg)?;
        if train_set.is_empty() {
            return Err(Error::config("training dataset is empty"));
        }
        let gen = Generator::new(cfg.generator_config());
        let disc = Discriminator::new(cfg.discriminator_config());
        let mut params = ParamStore::new();
        let mut sn = SnStates::new();
        let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        gen.init_params(&mut params, &mut sn, &mut init_rng)?;
        disc.init_params(&mut params, &mut sn, &mut init_rng)?;
        let fx = match &cfg.fx_weights {
            Some(path) => FeatureExtractor::load(path)?,
            None => FeatureExtractor::seeded(cfg.fx_seed),
        };
        let n = train_set.len();
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0xbeef));
        let sampler_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5a5a));
        Ok(Trainer {
            cfg,
            gen,
            disc,
            params,
            sn,
            adam_g: AdamState::new(),
            adam_d: AdamState::new(),
            fx,
            rng,
            step: 0,
            train_set,
            val_set,
            sampler: EpochSampler::new(n),
            sampler_rng,
        })
    }

    pub fn resume(cfg: TrainConfig, ckpt_path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::<f32>::load(ckpt_path)?;
        if ckpt.stage != cfg.stage {
            return Err(Error::config(format!(
                "checkpoint stage {} does not match config stage {}",
                ckpt.stage.as_str(),
                cfg.stage.as_str()
            )));
        }
        let mut trainer = Self::new(cfg)?;
        trainer.params = ckpt.params;
        trainer.adam_g = ckpt.adam_g;
        trainer.adam_d = ckpt.adam_d;
        for (name, u) in ckpt.sn_u {
            if let Some(state) = trainer.sn.get_mut(&name) {
                state.u = u;
            }
        }
        trainer.rng = ckpt.rng.restore();
        trainer.step = ckpt.step;
        // the sampler has its own stream, so its exact state at `step` is
        // reproduced by replaying the draws made so far
        let mut replay = EpochSampler::new(trainer.train_set.len());
        let mut replay_rng = ChaCha8Rng::seed_from_u64(trainer.cfg.seed.wrapping_add(0x5a5a));
        for _ in 0..(ckpt.step as usize * trainer.cfg.batch_size) {
            replay.next(&mut replay_rng);
        }
        trainer.sampler = replay;
        trainer.sampler_rng = replay_rng;
        Ok(trainer)
    }

    pub fn checkpoint(&self) -> Checkpoint<f32> {
        Checkpoint {
            stage: self.cfg.stage,
            step: self.step,
            params: self.params.clone(),
            adam_g: self.adam_g.clone(),
            adam_d: self.adam_d.clone(),
            sn_u: self.sn.iter().map(|(k, v)| (k.clone(), v.u.clone())).collect(),
            rng: RngState::capture(&self.rng),
        }
    }

    /// Mean full-frame l1 between raw generator output and ground truth over
    /// the validation set, with deterministic per-clip masks.
    pub fn validation_l1(&mut self) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        let [_, _, l, h, w] = self.val_set.clip_dims()?;
        for (i, clip) in self.val_set.clips.iter().enumerate() {
            let spec = MaskSpec {
                kind: self.cfg.mask_kind,
                ratio_range: self.cfg.mask_ratio,
                motion: self.cfg.mask_motion,
                seed: 0x7a1e ^ (i as u64),
            };
            let mask = maskgen::generate_mask(&spec, l, h, w)?;
            let masks = std::slice::from_ref(&mask);
            let masked = maskgen::apply_mask(clip, masks)?;
            let input = assemble_input(&masked, masks)?;
            let out = self.gen.forward_raw(&self.params, &mut self.sn, &input)?;
            let diff: f64 = out
                .data()
                .iter()
                .zip(clip.data())
                .map(|(&a, &b)| (a - b).abs() as f64)
                .sum();
            total += diff / out.numel() as f64;
            count += 1;
        }
        Ok(total / count.max(1) as f64)
    }

    fn pretrain_step(&mut self) -> Result<StepLog> {
        let batch = data::make_batch(
            &self.train_set,
            &mut self.sampler,
            &mut self.sampler_rng,
            &MaskSpec {
                kind: self.cfg.mask_kind,
                ratio_range: self.cfg.mask_ratio,
                motion: self.cfg.mask_motion,
                seed: 0,
            },
            self.cfg.batch_size,
            &mut self.rng,
        )?;
        let input_data = assemble_input(&batch.masked, &batch.masks)?;

        let mut tape = Tape::<f32>::new();
        let vars = self.params.bind(&mut tape, |name| name.starts_with("generator."));
        let input = tape.leaf(input_data);
        let target = tape.leaf(batch.video);
        let out = self.gen.forward(&mut tape, &vars, &mut self.sn, true, input)?;

        let l1 = losses::l1_loss(&mut tape, out, target)?;
        let perc = losses::perceptual_loss(&mut tape, out, target, &self.fx)?;
        let style = losses::style_loss(&mut tape, out, target, &self.fx)?;
        let terms = LossTerms { l1: Some(l1), perc: Some(perc), style: Some(style), adv: None };
        let total = losses::total_loss(&mut tape, &terms, &self.cfg.weights)?;

        let log = StepLog {
            step: self.step,
            stage: Stage::Pretrain,
            l1: tape.scalar_value(l1)?.to_f64(),
            perc: tape.scalar_value(perc)?.to_f64(),
            style: tape.scalar_value(style)?.to_f64(),
            adv: None,
            d_loss: None,
            total: tape.scalar_value(total)?.to_f64(),
        };
        tape.backward(total)?;
        self.apply_grads(&mut tape, &vars, "generator.")?;
        Ok(log)
    }

    fn finetune_step(&mut self) -> Result<StepLog> {
        let batch = data::make_batch(
            &self.train_set,
            &mut self.sampler,
            &mut self.sampler_rng,
            &MaskSpec {
                kind: self.cfg.mask_kind,
                ratio_range: self.cfg.mask_ratio,
                motion: self.cfg.mask_motion,
                seed: 0,
            },
            self.cfg.batch_size,
            &mut self.rng,
        )?;
        let input_data = assemble_input(&batch.masked, &batch.masks)?;

        // discriminator step: generator output is detached (computed with
        // no gradient tracking at all)
        let fake = self.gen.forward_raw(&self.params, &mut self.sn, &input_data)?;
        let d_loss_value;
        {
            let mut tape = Tape::<f32>::new();
            let vars = self.params.bind(&mut tape, |name| name.starts_with("discriminator."));
            let real_v = tape.leaf(batch.video.clone());
            let fake_v = tape.leaf(fake);
            let score_real = self.disc.forward(&mut tape, &vars, &mut self.sn, true, real_v)?;
            let score_fake = self.disc.forward(&mut tape, &vars, &mut self.sn, false, fake_v)?;
            let d_loss =
                losses::d_hinge_loss(&mut tape, score_real, score_fake, self.cfg.hinge_sign)?;
            d_loss_value = tape.scalar_value(d_loss)?.to_f64();
            tape.backward(d_loss)?;
            self.apply_grads_d(&mut tape, &vars)?;
        }

        // generator step: discriminator frozen; gradient flows through it
        let mut tape = Tape::<f32>::new();
        let vars = self.params.bind(&mut tape, |name| name.starts_with("generator."));
        let input = tape.leaf(input_data);
        let target = tape.leaf(batch.video);
        let out = self.gen.forward(&mut tape, &vars, &mut self.sn, true, input)?;
        let score_fake = self.disc.forward(&mut tape, &vars, &mut self.sn, false, out)?;

        let l1 = losses::l1_loss(&mut tape, out, target)?;
        let perc = losses::perceptual_loss(&mut tape, out, target, &self.fx)?;
        let style = losses::style_loss(&mut tape, out, target, &self.fx)?;
        let adv = losses::g_adv_loss(&mut tape, score_fake)?;
        let terms =
            LossTerms { l1: Some(l1), perc: Some(perc), style: Some(style), adv: Some(adv) };
        let total = losses::total_loss(&mut tape, &terms, &self.cfg.weights)?;

        let log = StepLog {
            step: self.step,
            stage: Stage::Finetune,
            l1: tape.scalar_value(l1)?.to_f64(),
            perc: tape.scalar_value(perc)?.to_f64(),
            style: tape.scalar_value(style)?.to_f64(),
            adv: Some(tape.scalar_value(adv)?.to_f64()),
            d_loss: Some(d_loss_value),
            total: tape.scalar_value(total)?.to_f64(),
        };
        tape.backward(total)?;
        self.apply_grads(&mut tape, &vars, "generator.")?;
        Ok(log)
    }

    fn apply_grads(
        &mut self,
        tape: &mut Tape<f32>,
        vars: &BTreeMap<String, crate::tape::Var>,
        prefix: &str,
    ) -> Result<()> {
        let mut grads = BTreeMap::new();
        for (name, &var) in vars {
            if !name.starts_with(prefix) {
                continue;
            }
            if let Some(g) = tape.take_grad(var) {
                grads.insert(name.clone(), g);
            }
        }
        let hp = AdamParams {
            lr: self.cfg.lr_g,
            beta1: self.cfg.beta1,
            beta2: self.cfg.beta2,
            epsilon: 1e-8,
        };
        adam_step(&mut self.params, &grads, &mut self.adam_g, &hp);
        Ok(())
    }

    fn apply_grads_d(
        &mut self,
        tape: &mut Tape<f32>,
        vars: &BTreeMap<String, crate::tape::Var>,
    ) -> Result<()> {
        let mut grads = BTreeMap::new();
        for (name, &var) in vars {
            if !name.starts_with("discriminator.") {
                continue;
            }
            if let Some(g) = tape.take_grad(var) {
                grads.insert(name.clone(), g);
            }
        }
        let hp = AdamParams {
            lr: self.cfg.lr_d,
            beta1: self.cfg.beta1,
            beta2: self.cfg.beta2,
            epsilon: 1e-8,
        };
        adam_step(&mut self.params, &grads, &mut self.adam_d, &hp);
        Ok(())
    }

    /// Run the configured stage to completion (or plateau), checkpointing
    /// and logging along the way.
    pub fn run(&mut self, mut on_log: impl FnMut(&StepLog)) -> Result<TrainOutcome> {
        fs::create_dir_all(&self.cfg.out_dir).map_err(|e| Error::io(&self.cfg.out_dir, e))?;
        let mut logs = Vec::new();
        let mut val_history = Vec::new();
        let mut last_ckpt = self.cfg.out_dir.join(format!("step-{:06}.ckpt", self.step));
        self.checkpoint().save(&last_ckpt)?;
        let mut stopped_early = false;

        let v0 = self.validation_l1()?;
        val_history.push((self.step, v0));

        while self.step < self.cfg.steps {
            let log = match self.cfg.stage {
                Stage::Pretrain => self.pretrain_step()?,
                Stage::Finetune => self.finetune_step()?,
            };
            if !log.total.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite loss at step {}; last good checkpoint: {}",
                    self.step,
                    last_ckpt.display()
                )));
            }
            self.step += 1;
            on_log(&log);
            logs.push(log);

            if self.cfg.eval_every > 0 && self.step % self.cfg.eval_every == 0 {
                let v = self.validation_l1()?;
                val_history.push((self.step, v));
                if self.cfg.stage == Stage::Pretrain && self.plateaued(&val_history) {
                    stopped_early = true;
                }
            }
            if (self.cfg.checkpoint_every > 0 && self.step % self.cfg.checkpoint_every == 0)
                || self.step == self.cfg.steps
                || stopped_early
            {
                last_ckpt = self.cfg.out_dir.join(format!("step-{:06}.ckpt", self.step));
                self.checkpoint().save(&last_ckpt)?;
            }
            if stopped_early {
                break;
            }
        }
        if val_history.last().map(|&(s, _)| s) != Some(self.step) {
            let v = self.validation_l1()?;
            val_history.push((self.step, v));
        }
        // make sure the final state is on disk even off the cadence
        last_ckpt = self.cfg.out_dir.join(format!("step-{:06}.ckpt", self.step));
        self.checkpoint().save(&last_ckpt)?;
        Ok(TrainOutcome { logs, val_history, final_checkpoint: last_ckpt, stopped_early })
    }

    fn plateaued(&self, history: &[(u64, f64)]) -> bool {
        let k = self.plateau_window();
        if history.len() < k + 1 {
            return false;
        }
        let recent = &history[history.len() - (k + 1)..];
        let base = recent[0].1;
        let best = recent[1..].iter().map(|&(_, v)| v).fold(f64::INFINITY, f64::min);
        base.is_finite() && best > base * (1.0 - self.cfg.plateau_min_improvement)
    }

    fn plateau_window(&self) -> usize {
        self.cfg.plateau_evals.max(1)
    }
}

// ---- evaluation ------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct BucketReport {
    pub label: String,
    pub range: (f64, f64),
    /// Full-frame MSE of the composited output, [0, 1] pixel scale.
    pub mse: f64,
    /// MSE restricted to masked pixels, [0, 1] pixel scale.
    pub masked_mse: f64,
    /// Perceptual distance under the fixed extractor (PROXY, not LPIPS).
    pub proxy_feature_distance: f64,
    pub samples: usize,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub buckets: Vec<BucketReport>,
}

impl EvalReport {
    pub fn render(&self) -> String {
        let mut s = String::from("bucket     samples  mse        masked-mse  proxy-dist (PROXY)\n");
        for b in &self.buckets {
            s.push_str(&format!(
                "{:<9}  {:>7}  {:<9.6}  {:<10.6}  {:.6}\n",
                b.label, b.samples, b.mse, b.masked_mse, b.proxy_feature_distance
            ));
        }
        s
    }
}

pub fn bucket_ranges(n: usize) -> Vec<(f64, f64)> {
    (0..n).map(|i| (i as f64 * 0.1, (i + 1) as f64 * 0.1)).collect()
}

pub fn bucket_label(range: (f64, f64)) -> String {
    format!("{}-{}%", (range.0 * 100.0).round() as u32, (range.1 * 100.0).round() as u32)
}

/// Evaluate a model over `n_buckets` mask-ratio ranges. The model maps
/// (clip index, masked video, masks) to the raw generator output; MSE is
/// computed on the composited result in [0, 1] pixel scale.
pub fn evaluate_with<T: Scalar>(
    model: &mut dyn FnMut(usize, &TensorData<T>, &[MaskVideo]) -> Result<TensorData<T>>,
    dataset: &Dataset<T>,
    fx: &FeatureExtractor<T>,
    mask_kind: MaskKind,
    mask_motion: u32,
    n_buckets: usize,
    seed: u64,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::config("evaluation dataset is empty"));
    }
    let [_, _, l, h, w] = dataset.clip_dims()?;
    let mut buckets = Vec::new();
    for (bi, range) in bucket_ranges(n_buckets).into_iter().enumerate() {
        let mut mse_sum = 0.0;
        let mut masked_sum = 0.0;
        let mut proxy_sum = 0.0;
        let mut samples = 0usize;
        for (ci, clip) in dataset.clips.iter().enumerate() {
            let spec = MaskSpec {
                kind: mask_kind,
                ratio_range: range,
                motion: mask_motion,
                seed: seed ^ ((bi as u64) << 32) ^ ci as u64,
            };
            let mask = maskgen::generate_mask(&spec, l, h, w)?;
            let masks = std::slice::from_ref(&mask);
            let masked = maskgen::apply_mask(clip, masks)?;
            let out = model(ci, &masked, masks)?;
            let composited = composite_output(&out, clip, masks)?;

            // [-1,1] -> [0,1] halves every difference
            let mut se = 0.0f64;
            for (&a, &b) in composited.data().iter().zip(clip.data()) {
                let d = (a.to_f64() - b.to_f64()) / 2.0;
                se += d * d;
            }
            mse_sum += se / composited.numel() as f64;

            let mut masked_se = 0.0f64;
            let mut masked_n = 0usize;
            let plane = l * h * w;
            for c in 0..3 {
                for (i, &bit) in mask.bits().iter().enumerate() {
                    if bit != 0 {
                        let idx = c * plane + i;
                        let d = (composited.data()[idx].to_f64() - clip.data()[idx].to_f64()) / 2.0;
                        masked_se += d * d;
                        masked_n += 1;
                    }
                }
            }
            masked_sum += if masked_n > 0 { masked_se / masked_n as f64 } else { 0.0 };

            let mut tape = Tape::<T>::new();
            let a = tape.leaf(composited);
            let b = tape.leaf(clip.clone());
            let proxy = losses::perceptual_loss(&mut tape, a, b, fx)?;
            proxy_sum += tape.scalar_value(proxy)?.to_f64();
            samples += 1;
        }
        buckets.push(BucketReport {
            label: bucket_label(range),
            range,
            mse: mse_sum / samples as f64,
            masked_mse: masked_sum / samples as f64,
            proxy_feature_distance: proxy_sum / samples as f64,
            samples,
        });
    }
    Ok(EvalReport { buckets })
}

/// Evaluate a trained checkpoint with the generator inferred from it.
pub fn evaluate_checkpoint(
    ckpt_path: &Path,
    dataset: &Dataset<f32>,
    n_buckets: usize,
    seed: u64,
) -> Result<EvalReport> {
    let ckpt = Checkpoint::<f32>::load(ckpt_path)?;
    let (gen, params, mut sn) = generator_from_checkpoint(&ckpt, false)?;
    let fx = FeatureExtractor::seeded(7);
    evaluate_with(
        &mut |_, masked, masks| {
            let input = assemble_input(masked, masks)?;
            gen.forward_raw(&params, &mut sn, &input)
        },
        dataset,
        &fx,
        MaskKind::Stroke,
        2,
        n_buckets,
        seed,
    )
}

/// Rebuild the generator architecture from checkpoint tensor shapes. The
/// shift fraction and activation slope are not stored; defaults apply.
pub fn generator_from_checkpoint(
    ckpt: &Checkpoint<f32>,
    causal: bool,
) -> Result<(Generator, ParamStore<f32>, SnStates<f32>)> {
    let wf1 = ckpt.params.get("generator.layer01.wf")?;
    let [base, _, k, _] = wf1.shape().dims4()?;
    let shift_mode = if ckpt.params.get("generator.layer01.shift").is_ok() {
        ShiftMode::Learnable
    } else {
        ShiftMode::FixedTsm
    };
    let temporal_kernel = match ckpt.params.get("generator.layer01.shift") {
        Ok(t) => t.shape().dims2()?[1],
        Err(_) => 3,
    };
    let spectral_norm = ckpt.sn_u.keys().any(|k| k.starts_with("generator."));
    let cfg = GeneratorConfig {
        base_channels: base,
        kernel_size: k,
        temporal_kernel,
        shift_mode,
        shift_fraction: Fraction::QUARTER,
        causal,
        leaky_slope: 0.2,
        spectral_norm,
    };
    let gen = Generator::new(cfg);
    let mut sn = SnStates::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    // shapes come from the checkpoint; u vectors overwrite the fresh ones
    let mut fresh = ParamStore::<f32>::new();
    gen.init_params(&mut fresh, &mut sn, &mut rng)?;
    for (name, u) in &ckpt.sn_u {
        if let Some(state) = sn.get_mut(name) {
            state.u = u.clone();
        }
    }
    let mut params = ParamStore::new();
    for (name, _) in fresh.iter() {
        params.insert(name.clone(), ckpt.params.get(name)?.clone())?;
    }
    Ok((gen, params, sn))
}

// ---- inference --------------------------------------------------------

/// Fill masked regions of a frame directory and write composited PPM frames.
pub fn inpaint(
    ckpt_path: &Path,
    frames_dir: &Path,
    masks_dir: &Path,
    out_dir: &Path,
    causal: bool,
) -> Result<()> {
    let ckpt = Checkpoint::<f32>::load(ckpt_path)?;
    let (gen, params, mut sn) = generator_from_checkpoint(&ckpt, causal)?;

    let seq = data::read_frame_dir(frames_dir)?;
    let video: TensorData<f32> = data::video_to_tensor(&seq)?;
    let mask = data::read_mask_dir(masks_dir)?;
    let masks = std::slice::from_ref(&mask);
    let masked = maskgen::apply_mask(&video, masks)?;
    let input = assemble_input(&masked, masks)?;
    let out = gen.forward_raw(&params, &mut sn, &input)?;
    let composited = composite_output(&out, &video, masks)?;
    let frames = data::tensor_to_frames(&composited)?;
    data::write_frame_dir(out_dir, &frames)?;
    Ok(())
}

// ---- parameter / runtime report -----------------------------------------

#[derive(Debug, Clone)]
pub struct ParamRatioReport {
    pub generator_params: usize,
    pub conv3d_params: usize,
    pub discriminator_params: usize,
    pub param_ratio: f64,
    pub lgtsm_seconds: f64,
    pub conv3d_seconds: f64,
    pub time_ratio: f64,
    pub shape: [usize; 4],
    pub runs: usize,
}

impl ParamRatioReport {
    pub fn render(&self) -> String {
        format!(
            "generator params        {}\n\
             gated-3d variant params {}\n\
             discriminator params    {}\n\
             param ratio (2d/3d)     {:.4}\n\
             forward median (lgtsm)  {:.4} s\n\
             forward median (3d)     {:.4} s\n\
             time ratio (3d/lgtsm)   {:.2}x\n\
             shape BxLxHxW           {}x{}x{}x{} ({} runs)\n",
            self.generator_params,
            self.conv3d_params,
            self.discriminator_params,
            self.param_ratio,
            self.lgtsm_seconds,
            self.conv3d_seconds,
            self.time_ratio,
            self.shape[0],
            self.shape[1],
            self.shape[2],
            self.shape[3],
            self.runs
        )
    }
}

/// Count both generator builds and time their forward passes at the given
/// shape (batch, frames, height, width).
pub fn param_report(
    count_cfg: GeneratorConfig,
    timing_cfg: GeneratorConfig,
    disc_cfg: DiscriminatorConfig,
    shape: [usize; 4],
    runs: usize,
) -> Result<ParamRatioReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xabc);

    // counts at the counting config
    let gen = Generator::new(count_cfg);
    let mut store = ParamStore::<f32>::new();
    let mut sn = SnStates::new();
    gen.init_params(&mut store, &mut sn, &mut rng)?;
    let v3 = Conv3dGenerator::new(count_cfg);
    let mut store3 = ParamStore::<f32>::new();
    v3.init_params(&mut store3, &mut rng)?;
    let disc = Discriminator::new(disc_cfg);
    let mut dstore = ParamStore::<f32>::new();
    let mut dsn = SnStates::new();
    disc.init_params(&mut dstore, &mut dsn, &mut rng)?;

    let generator_params = store.count_scalars("generator.");
    let conv3d_params = store3.count_scalars("gen3d.");
    let discriminator_params = dstore.count_scalars("discriminator.");

    // timing at the timing config
    let tgen = Generator::new(timing_cfg);
    let mut tstore = ParamStore::<f32>::new();
    let mut tsn = SnStates::new();
    tgen.init_params(&mut tstore, &mut tsn, &mut rng)?;
    let tv3 = Conv3dGenerator::new(timing_cfg);
    let mut tstore3 = ParamStore::<f32>::new();
    tv3.init_params(&mut tstore3, &mut rng)?;

    let [b, l, h, w] = shape;
    let mut input = TensorData::<f32>::zeros([b, 4, l, h, w]);
    for (i, v) in input.data_mut().iter_mut().enumerate() {
        *v = ((i % 255) as f32 / 127.5) - 1.0;
    }

    let lgtsm_seconds = crate::networks::median_seconds(
        || tgen.forward_raw(&tstore, &mut tsn, &input).map(|_| ()),
        runs,
    )?;
    let conv3d_seconds =
        crate::networks::median_seconds(|| tv3.forward_raw(&tstore3, &input).map(|_| ()), runs)?;

    Ok(ParamRatioReport {
        generator_params,
        conv3d_params,
        discriminator_params,
        param_ratio: generator_params as f64 / conv3d_params as f64,
        lgtsm_seconds,
        conv3d_seconds,
        time_ratio: conv3d_seconds / lgtsm_seconds,
        shape,
        runs,
    })
}
