//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line with the measured value. Run with `--nocapture` to see
//! the lines; the asserts carry the same information either way.

use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lgtsm_core::checkpoint::{Checkpoint, Stage};
use lgtsm_core::data::Dataset;
use lgtsm_core::gradcheck;
use lgtsm_core::kernels;
use lgtsm_core::losses::{self, FeatureExtractor, HingeSign};
use lgtsm_core::maskgen::{self, generate_mask, MaskKind, MaskSpec};
use lgtsm_core::modules::{
    init_tsm_equivalent, spectral_warmup, ShiftSpec, SpectralNormState,
};
use lgtsm_core::networks::{
    assemble_input, composite_output, Conv3dGenerator, Discriminator, DiscriminatorConfig,
    Generator, GeneratorConfig, SnStates,
};
use lgtsm_core::params::ParamStore;
use lgtsm_core::tape::Tape;
use lgtsm_core::tensor::TensorData;
use lgtsm_core::train::{self, DatasetSource, TrainConfig, Trainer};

/// Serializes the heavy tests so wall-clock measurements and training runs
/// do not fight each other for the two cores.
static HEAVY: Mutex<()> = Mutex::new(());

fn heavy_guard() -> std::sync::MutexGuard<'static, ()> {
    HEAVY.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

fn random_tensor(shape: [usize; 5], rng: &mut ChaCha8Rng) -> TensorData<f64> {
    let n: usize = shape.iter().product();
    TensorData::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// A1: the learnable-shift generator carries one third of the parameters of
/// the structurally identical gated-3D build (ratio in [0.333, 0.35]).
#[test]
fn a1_parameter_ratio() {
    let cfg = GeneratorConfig::default();
    let gen = Generator::new(cfg);
    let mut store = ParamStore::<f32>::new();
    let mut sn = SnStates::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    gen.init_params(&mut store, &mut sn, &mut rng).unwrap();
    let v3 = Conv3dGenerator::new(cfg);
    let mut store3 = ParamStore::<f32>::new();
    v3.init_params(&mut store3, &mut rng).unwrap();

    let p2 = store.count_scalars("generator.");
    let p3 = store3.count_scalars("gen3d.");
    let ratio = p2 as f64 / p3 as f64;
    let pass = (0.333..=0.35).contains(&ratio);
    println!("A1 parameter-ratio: {} (2d {p2} / 3d {p3} = {ratio:.4})", ok(pass));
    assert!(pass, "parameter ratio {ratio} outside [0.333, 0.35]");
}

/// A2: median forward wall time of the 3D build is at least twice the
/// LGTSM build at shape (1, 3, 8, 64, 64), same thread count.
#[test]
fn a2_inference_time_ratio() {
    let _guard = heavy_guard();
    // desk-scale timing width; the MAC ratio between the two builds does
    // not depend on it
    let timing_cfg = GeneratorConfig {
        base_channels: 16,
        kernel_size: 3,
        ..Default::default()
    };
    let report = train::param_report(
        GeneratorConfig::default(),
        timing_cfg,
        DiscriminatorConfig::default(),
        [1, 8, 64, 64],
        5,
    )
    .unwrap();
    let pass = report.time_ratio >= 2.0;
    println!(
        "A2 inference-time-ratio: {} (3d {:.3}s / lgtsm {:.3}s = {:.2}x, need >= 2x)",
        ok(pass),
        report.conv3d_seconds,
        report.lgtsm_seconds,
        report.time_ratio
    );
    assert!(pass, "time ratio {:.2} below 2x", report.time_ratio);
}

/// A3: after TSM-equivalent initialization the learnable shift reproduces
/// the fixed shift exactly (max abs diff == 0) on 100 random f64 tensors.
#[test]
fn a3_tsm_equivalence_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let c = [4, 8, 12, 16][i % 4];
        let l = 2 + (i % 5);
        let k = if i % 3 == 0 { 5 } else { 3 };
        let spec = ShiftSpec::fixed(false);
        let x = random_tensor([1, c, l, 4, 4], &mut rng);
        let kernels_bank: TensorData<f64> = init_tsm_equivalent(c, k, &spec).unwrap();
        let fixed = kernels::shift_fixed_forward(&x, spec.split(c)).unwrap();
        let learned = kernels::temporal_conv_forward(&x, &kernels_bank, false).unwrap();
        worst = worst.max(fixed.max_abs_diff(&learned));
    }
    let pass = worst == 0.0;
    println!("A3 tsm-equivalence: {} (max abs diff over 100 tensors = {worst:e})", ok(pass));
    assert!(pass, "learnable shift deviates from fixed TSM by {worst}");
}

/// A4: every backward rule, one full gated layer, the loss stacks, and a
/// 3-layer mini generator pass f64 central finite differences at 1e-4.
#[test]
fn a4_gradient_suite() {
    let _guard = heavy_guard();
    let report = gradcheck::run_all().unwrap();
    let worst = report
        .entries
        .iter()
        .map(|e| e.max_rel_err)
        .fold(0.0f64, f64::max);
    let pass = report.passed();
    println!(
        "A4 gradient-suite: {} ({} checks, worst rel err {worst:.3e}, tol {:.0e})",
        ok(pass),
        report.entries.len(),
        gradcheck::TOLERANCE
    );
    if !pass {
        println!("{}", report.render());
    }
    assert!(pass, "gradient checks failed:\n{}", report.render());
}

/// A5: 300 pretrain steps on the synthetic moving-shapes set halve the
/// validation l1, and the composited masked-region MSE beats the
/// zero-fill baseline by at least 30%.
#[test]
fn a5_training_smoke() {
    let _guard = heavy_guard();
    let mut cfg = TrainConfig {
        stage: Stage::Pretrain,
        steps: 300,
        lr_g: 1e-3,
        base_channels: 8,
        kernel_size: 3,
        batch_size: 2,
        clip_len: 8,
        height: 64,
        width: 64,
        seed: 7,
        eval_every: 50,
        checkpoint_every: 10_000,
        mask_kind: MaskKind::Stroke,
        mask_ratio: (0.1, 0.2),
        // generator spectral norm off: at desk scale the sigma division
        // starves the 11-layer stack and 300 steps cannot converge
        spectral_norm_generator: false,
        dataset: DatasetSource::Synthetic { clips: 16, val_clips: 4, seed: 1000 },
        out_dir: std::env::temp_dir().join("lgtsm-acceptance-a5"),
        ..Default::default()
    };
    // emphasize the pixel loss for the short smoke budget
    cfg.weights.style = 1.0;

    // snapshot of the untrained generator for the ordering check below
    let fresh = Trainer::new(cfg.clone()).unwrap();
    let untrained_params = fresh.params.clone();
    drop(fresh);

    let mut trainer = Trainer::new(cfg.clone()).unwrap();
    let outcome = trainer.run(|_| {}).unwrap();
    let v0 = outcome.val_history.first().unwrap().1;
    let v_final = outcome.val_history.last().unwrap().1;
    let halved = v_final < 0.5 * v0;
    println!(
        "A5 training-smoke (l1): {} (val l1 {v0:.4} -> {v_final:.4}, ratio {:.3}, need < 0.5)",
        ok(halved),
        v_final / v0
    );

    // masked-region MSE vs the zero-fill baseline on the validation clips
    let val = Dataset::<f32>::synthetic(4, 1000 + 0x10_000, 8, 64, 64).unwrap();
    let (model_mse, baseline_mse) = masked_mse_vs_zero_fill(&mut trainer, &val);
    let improved = model_mse <= 0.7 * baseline_mse;
    println!(
        "A5 training-smoke (masked mse): {} (model {model_mse:.5} vs zero-fill {baseline_mse:.5}, need <= 0.7x)",
        ok(improved)
    );

    // sanity ordering: the trained model beats the untrained one on
    // reconstruction with an all-zero mask
    let clip = &val.clips[0];
    let empty = maskgen::MaskVideo::from_bits(8, 64, 64, vec![0; 8 * 64 * 64]).unwrap();
    let masks = std::slice::from_ref(&empty);
    let input = assemble_input(clip, masks).unwrap();
    let trained_out = trainer
        .gen
        .forward_raw(&trainer.params, &mut trainer.sn, &input)
        .unwrap();
    let gen = Generator::new(cfg.generator_config());
    let mut sn0 = SnStates::new();
    let untrained_out = gen.forward_raw(&untrained_params, &mut sn0, &input).unwrap();
    let mse = |o: &TensorData<f32>| {
        o.data()
            .iter()
            .zip(clip.data())
            .map(|(&a, &b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            / o.numel() as f64
    };
    let ordering = mse(&trained_out) < mse(&untrained_out);
    println!(
        "A5 training-smoke (ordering): {} (trained {:.5} < untrained {:.5})",
        ok(ordering),
        mse(&trained_out),
        mse(&untrained_out)
    );

    assert!(halved, "validation l1 ratio {:.3} not below 0.5", v_final / v0);
    assert!(
        improved,
        "masked mse {model_mse:.5} not 30% below zero-fill {baseline_mse:.5}"
    );
    assert!(ordering, "trained model does not beat untrained on zero-mask MSE");
}

/// Masked-region MSE ([0,1] scale) of the trained composite vs composing
/// with a zero (mid-gray) fill, over fixed seeded masks.
fn masked_mse_vs_zero_fill(trainer: &mut Trainer, val: &Dataset<f32>) -> (f64, f64) {
    let mut model_sum = 0.0;
    let mut base_sum = 0.0;
    let mut n = 0usize;
    for (i, clip) in val.clips.iter().enumerate() {
        let spec = MaskSpec {
            kind: MaskKind::Stroke,
            ratio_range: (0.1, 0.2),
            motion: 2,
            seed: 0xa5 + i as u64,
        };
        let mask = generate_mask(&spec, 8, 64, 64).unwrap();
        let masks = std::slice::from_ref(&mask);
        let masked = maskgen::apply_mask(clip, masks).unwrap();
        let input = assemble_input(&masked, masks).unwrap();
        let out = trainer
            .gen
            .forward_raw(&trainer.params, &mut trainer.sn, &input)
            .unwrap();
        let model_comp = composite_output(&out, clip, masks).unwrap();
        let zero = TensorData::<f32>::zeros(clip.shape().clone());
        let base_comp = composite_output(&zero, clip, masks).unwrap();
        let masked_mse = |c: &TensorData<f32>| {
            let plane = 8 * 64 * 64;
            let mut se = 0.0f64;
            let mut count = 0usize;
            for ch in 0..3 {
                for (j, &bit) in mask.bits().iter().enumerate() {
                    if bit != 0 {
                        let idx = ch * plane + j;
                        let d = ((c.data()[idx] - clip.data()[idx]) / 2.0) as f64;
                        se += d * d;
                        count += 1;
                    }
                }
            }
            se / count as f64
        };
        model_sum += masked_mse(&model_comp);
        base_sum += masked_mse(&base_comp);
        n += 1;
    }
    (model_sum / n as f64, base_sum / n as f64)
}

/// A6: in causal mode, perturbing input frames after t leaves generator
/// output frames up to t exactly unchanged (f64).
#[test]
fn a6_causality_exact() {
    let cfg = GeneratorConfig {
        base_channels: 8,
        kernel_size: 3,
        causal: true,
        spectral_norm: false,
        ..Default::default()
    };
    let gen = Generator::new(cfg);
    let mut store = ParamStore::<f64>::new();
    let mut sn = SnStates::new();
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    gen.init_params(&mut store, &mut sn, &mut rng).unwrap();

    let l = 6;
    let base = random_tensor([1, 4, l, 16, 16], &mut rng);
    let out_base = gen.forward_raw(&store, &mut sn, &base).unwrap();

    let mut worst = 0.0f64;
    for t in 0..l - 1 {
        // perturb every frame strictly after t
        let mut perturbed = base.clone();
        let plane = 16 * 16;
        for c in 0..4 {
            for tt in (t + 1)..l {
                for p in 0..plane {
                    let idx = (c * l + tt) * plane + p;
                    perturbed.data_mut()[idx] += rng.gen_range(-1.0..1.0);
                }
            }
        }
        let out = gen.forward_raw(&store, &mut sn, &perturbed).unwrap();
        // frames 0..=t must be bit-identical
        let out_plane = 16 * 16;
        for c in 0..3 {
            for tt in 0..=t {
                for p in 0..out_plane {
                    let idx = (c * l + tt) * out_plane + p;
                    worst = worst.max((out.data()[idx] - out_base.data()[idx]).abs());
                }
            }
        }
    }
    let pass = worst == 0.0;
    println!("A6 causality: {} (max abs diff on past frames = {worst:e})", ok(pass));
    assert!(pass, "causal generator leaked future information: {worst}");
}

/// A7: exact loss identities.
#[test]
fn a7_loss_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let fx = FeatureExtractor::<f64>::seeded(7);
    let v = random_tensor([1, 3, 2, 8, 8], &mut rng);

    let mut tape = Tape::<f64>::new();
    let a = tape.leaf(v.clone());
    let b = tape.leaf(v);
    let l1 = losses::l1_loss(&mut tape, a, b).unwrap();
    let perc = losses::perceptual_loss(&mut tape, a, b, &fx).unwrap();
    let style = losses::style_loss(&mut tape, a, b, &fx).unwrap();
    let zero_losses = [
        tape.scalar_value(l1).unwrap(),
        tape.scalar_value(perc).unwrap(),
        tape.scalar_value(style).unwrap(),
    ];

    let zeros = tape.leaf(TensorData::zeros([1, 1, 2, 4, 4]));
    let mut hinge = Vec::new();
    for sign in [HingeSign::Standard, HingeSign::Paper] {
        let d = losses::d_hinge_loss(&mut tape, zeros, zeros, sign).unwrap();
        hinge.push(tape.scalar_value(d).unwrap());
    }
    let c = tape.leaf(TensorData::full([1, 1, 2, 4, 4], 0.375));
    let g = losses::g_adv_loss(&mut tape, c).unwrap();
    let g_val = tape.scalar_value(g).unwrap();

    let pass = zero_losses == [0.0, 0.0, 0.0] && hinge == [2.0, 2.0] && g_val == -0.375;
    println!(
        "A7 loss-identities: {} (zero-at-identity {zero_losses:?}, hinge(0)={hinge:?}, g_adv(c)={g_val})",
        ok(pass)
    );
    assert_eq!(zero_losses, [0.0, 0.0, 0.0]);
    assert_eq!(hinge, [2.0, 2.0]);
    assert_eq!(g_val, -0.375);
}

/// A8: spectral normalization drives top singular values to 1, checked
/// against an SVD oracle (nalgebra) on every discriminator weight.
#[test]
fn a8_spectral_normalization() {
    // scaled identity: sigma estimate within 1e-3 of 3 after 20 iterations
    let mut w = TensorData::<f64>::zeros([5, 5]);
    for i in 0..5 {
        w.data_mut()[i * 5 + i] = 3.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let mut state = SpectralNormState::new(5, &mut rng);
    let sigma = spectral_warmup(&w, &mut state, 20).unwrap();
    let scaled_ok = (sigma - 3.0).abs() < 1e-3;

    // every discriminator weight after warmup: top singular value of the
    // normalized matrix <= 1 + 1e-2 per the SVD oracle
    let disc = Discriminator::new(DiscriminatorConfig::default());
    let mut store = ParamStore::<f64>::new();
    let mut sn = SnStates::new();
    disc.init_params(&mut store, &mut sn, &mut rng).unwrap();
    let mut worst = 0.0f64;
    for (name, state) in sn.iter_mut() {
        let w = store.get(name).unwrap();
        let sigma = spectral_warmup(w, state, 100).unwrap();
        let dims = w.shape().dims();
        let rows = dims[0];
        let cols: usize = dims[1..].iter().product();
        let mat = nalgebra::DMatrix::from_row_slice(
            rows,
            cols,
            &w.data().iter().map(|&v| v / sigma).collect::<Vec<_>>(),
        );
        let top = mat.svd(false, false).singular_values[0];
        worst = worst.max(top);
    }
    let disc_ok = worst <= 1.0 + 1e-2;
    let pass = scaled_ok && disc_ok;
    println!(
        "A8 spectral-normalization: {} (3I sigma {sigma:.5}, worst normalized sv {worst:.5})",
        ok(pass)
    );
    assert!(scaled_ok, "sigma estimate {sigma} not within 1e-3 of 3");
    assert!(disc_ok, "normalized singular value {worst} above 1 + 1e-2");
}

/// A9: 1000 stroke masks per ratio bucket across the seven ranges land
/// in-bucket at least 95% of the time; identical seeds reproduce bits.
#[test]
fn a9_mask_ratio_buckets() {
    let _guard = heavy_guard();
    let ranges = train::bucket_ranges(7);
    let mut all_ok = true;
    for (bi, range) in ranges.iter().enumerate() {
        let mut hits = 0usize;
        for s in 0..1000u64 {
            let spec = MaskSpec {
                kind: MaskKind::Stroke,
                ratio_range: *range,
                motion: 2,
                seed: (bi as u64) << 32 | s,
            };
            if let Ok(mask) = generate_mask(&spec, 8, 64, 64) {
                let r = mask.ratio();
                if r >= range.0 && r < range.1 {
                    hits += 1;
                }
            }
        }
        let rate = hits as f64 / 1000.0;
        let pass = rate >= 0.95;
        all_ok &= pass;
        println!(
            "A9 mask-bucket {}: {} ({} of 1000 in range)",
            train::bucket_label(*range),
            ok(pass),
            hits
        );
    }
    // bit-identical reproduction
    let spec = MaskSpec {
        kind: MaskKind::Stroke,
        ratio_range: (0.3, 0.4),
        motion: 2,
        seed: 4242,
    };
    let a = generate_mask(&spec, 8, 64, 64).unwrap();
    let b = generate_mask(&spec, 8, 64, 64).unwrap();
    let repro = a.bits() == b.bits();
    println!("A9 mask-reproducibility: {}", ok(repro));
    assert!(all_ok, "a mask bucket fell below the 95% in-range rate");
    assert!(repro, "same seed produced different masks");
}

/// A10: byte-exact file round trips and bit-exact deterministic resume.
#[test]
fn a10_roundtrips_and_resume() {
    let _guard = heavy_guard();
    let dir = std::env::temp_dir().join("lgtsm-acceptance-a10");
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();

    // ppm/pbm round trips
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let img = lgtsm_core::data::Image {
        width: 17,
        height: 9,
        rgb: (0..17 * 9 * 3).map(|_| rng.gen()).collect(),
    };
    let ppm = dir.join("x.ppm");
    lgtsm_core::data::write_ppm(&ppm, &img).unwrap();
    let bytes1 = std::fs::read(&ppm).unwrap();
    let back = lgtsm_core::data::read_ppm(&ppm).unwrap();
    lgtsm_core::data::write_ppm(&ppm, &back).unwrap();
    let ppm_ok = bytes1 == std::fs::read(&ppm).unwrap();

    let bits: Vec<u8> = (0..29 * 7).map(|_| rng.gen_range(0..=1)).collect();
    let pbm = dir.join("x.pbm");
    lgtsm_core::data::write_pbm(&pbm, 29, 7, &bits).unwrap();
    let pb1 = std::fs::read(&pbm).unwrap();
    let (_, _, rbits) = lgtsm_core::data::read_pbm(&pbm).unwrap();
    lgtsm_core::data::write_pbm(&pbm, 29, 7, &rbits).unwrap();
    let pbm_ok = pb1 == std::fs::read(&pbm).unwrap();

    // a short training run, checkpointed halfway
    let cfg = TrainConfig {
        stage: Stage::Pretrain,
        steps: 10,
        base_channels: 4,
        kernel_size: 3,
        batch_size: 1,
        clip_len: 4,
        height: 16,
        width: 16,
        seed: 3,
        eval_every: 0,
        checkpoint_every: 5,
        spectral_norm_generator: false,
        dataset: DatasetSource::Synthetic { clips: 3, val_clips: 1, seed: 99 },
        out_dir: dir.join("run-full"),
        ..Default::default()
    };
    let mut full = Trainer::new(cfg.clone()).unwrap();
    let full_out = full.run(|_| {}).unwrap();
    let full_ckpt_bytes = full.checkpoint().to_bytes();

    // checkpoint save -> load -> save byte identity
    let ck_path = dir.join("run-full").join("step-000005.ckpt");
    let loaded = Checkpoint::<f32>::load(&ck_path).unwrap();
    let ck_ok = loaded.to_bytes() == std::fs::read(&ck_path).unwrap()[..].to_vec();

    // resume from step 5 and compare the step 6..10 loss trace exactly
    let mut resumed = Trainer::resume(
        TrainConfig { out_dir: dir.join("run-resumed"), ..cfg.clone() },
        &ck_path,
    )
    .unwrap();
    let resumed_out = resumed.run(|_| {}).unwrap();
    let tail: Vec<_> = full_out.logs.iter().filter(|l| l.step >= 5).collect();
    let resumed_logs: Vec<_> = resumed_out.logs.iter().collect();
    let trace_ok = tail.len() == resumed_logs.len()
        && tail
            .iter()
            .zip(&resumed_logs)
            .all(|(a, b)| a.total == b.total && a.l1 == b.l1 && a.step == b.step);
    let state_ok = resumed.checkpoint().to_bytes() == full_ckpt_bytes;

    let pass = ppm_ok && pbm_ok && ck_ok && trace_ok && state_ok;
    println!(
        "A10 roundtrips-and-resume: {} (ppm {} pbm {} ckpt {} trace {} state {})",
        ok(pass),
        ok(ppm_ok),
        ok(pbm_ok),
        ok(ck_ok),
        ok(trace_ok),
        ok(state_ok)
    );
    assert!(ppm_ok, "ppm round trip not byte-identical");
    assert!(pbm_ok, "pbm round trip not byte-identical");
    assert!(ck_ok, "checkpoint save/load/save not byte-identical");
    assert!(trace_ok, "resumed loss trace differs from uninterrupted trace");
    assert!(state_ok, "resumed final state differs from uninterrupted state");
}

fn ok(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}
