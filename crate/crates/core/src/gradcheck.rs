//! Central finite-difference verification of every backward rule.
//!
//! The numeric side re-evaluates the forward function at perturbed inputs
//! and never touches the tape's backward pass, so it stays an independent
//! oracle for the analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels::Conv2dCfg;
use crate::losses::{self, FeatureExtractor, HingeSign};
use crate::modules::{
    lgtsm_layer_forward, Activation, GatedLayerParams, Resample, ShiftMode, ShiftSpec,
};
use crate::tape::{Tape, Var};
use crate::tensor::TensorData;

/// Relative tolerance every check must meet.
pub const TOLERANCE: f64 = 1e-4;

const FD_STEP: f64 = 1e-6;
/// Guard for near-zero gradients; below this scale absolute error decides.
const REL_FLOOR: f64 = 1e-3;

pub type LossFn<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub elements: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

#[derive(Debug, Clone, Default)]
pub struct Report {
    pub entries: Vec<CheckResult>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(CheckResult::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.entries.iter().filter(|e| !e.passed())
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let status = if e.passed() { "ok" } else { "FAIL" };
            out.push_str(&format!(
                "{status:4}  {:<38} max rel err {:.3e}  ({} elements)\n",
                e.name, e.max_rel_err, e.elements
            ));
        }
        out
    }
}

/// Analytic gradients of a scalar function of the given inputs.
pub fn analytic_gradients(
    inputs: &[TensorData<f64>],
    f: &LossFn,
) -> Result<Vec<TensorData<f64>>> {
    let mut tape = Tape::verifying();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    vars.iter()
        .zip(inputs)
        .map(|(&v, input)| {
            Ok(tape
                .take_grad(v)
                .unwrap_or_else(|| TensorData::zeros(input.shape().clone())))
        })
        .collect()
}

fn eval(inputs: &[TensorData<f64>], f: &LossFn) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.scalar_value(loss)
}

/// Central differences, h scaled by element magnitude.
pub fn numeric_gradients(
    inputs: &[TensorData<f64>],
    f: &LossFn,
) -> Result<Vec<TensorData<f64>>> {
    let mut work: Vec<TensorData<f64>> = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = TensorData::zeros(inputs[i].shape().clone());
        for e in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[e];
            let h = FD_STEP * x0.abs().max(1.0);
            work[i].data_mut()[e] = x0 + h;
            let lp = eval(&work, f)?;
            work[i].data_mut()[e] = x0 - h;
            let lm = eval(&work, f)?;
            work[i].data_mut()[e] = x0;
            g.data_mut()[e] = (lp - lm) / (2.0 * h);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Worst guarded relative error over all elements of all inputs.
pub fn compare_gradients(
    name: &str,
    analytic: &[TensorData<f64>],
    numeric: &[TensorData<f64>],
) -> CheckResult {
    let mut max_rel = 0.0f64;
    let mut elements = 0;
    for (a, n) in analytic.iter().zip(numeric) {
        for (&av, &nv) in a.data().iter().zip(n.data()) {
            let denom = av.abs().max(nv.abs()).max(REL_FLOOR);
            max_rel = max_rel.max((av - nv).abs() / denom);
            elements += 1;
        }
    }
    CheckResult { name: name.to_string(), max_rel_err: max_rel, elements }
}

/// Full check of one scalar function: analytic vs central differences.
pub fn check_gradients(
    name: &str,
    inputs: &[TensorData<f64>],
    f: &LossFn,
) -> Result<CheckResult> {
    let analytic = analytic_gradients(inputs, f)?;
    let numeric = numeric_gradients(inputs, f)?;
    Ok(compare_gradients(name, &analytic, &numeric))
}

/// Random tensor with entries kept away from activation kinks.
fn sample(shape: impl Into<crate::tensor::Shape>, rng: &mut ChaCha8Rng) -> TensorData<f64> {
    let shape = shape.into();
    let n = shape.numel();
    let data = (0..n)
        .map(|_| {
            let mag = rng.gen_range(0.2..1.0);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    TensorData::from_vec(shape, data).expect("sized by shape")
}

/// Smooth scalar readout: mean((x - target)^2) keeps FD away from kinks in
/// the aggregation itself.
fn mse_readout(tape: &mut Tape<f64>, x: Var, target: &TensorData<f64>) -> Result<Var> {
    let t = tape.leaf(target.clone());
    let d = tape.sub(x, t)?;
    let sq = tape.mul(d, d)?;
    tape.mean(sq)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Ops,
    Layer,
    Generator,
    Losses,
}

impl Component {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ops" => Ok(Component::Ops),
            "layer" => Ok(Component::Layer),
            "generator" => Ok(Component::Generator),
            "losses" => Ok(Component::Losses),
            other => Err(Error::config(format!(
                "unknown gradcheck component {other}; use ops|layer|generator|losses"
            ))),
        }
    }
}

pub fn run_component(component: Component) -> Result<Report> {
    match component {
        Component::Ops => ops_suite(),
        Component::Layer => layer_suite(),
        Component::Generator => generator_suite(),
        Component::Losses => losses_suite(),
    }
}

pub fn run_all() -> Result<Report> {
    let mut report = Report::default();
    for c in [Component::Ops, Component::Layer, Component::Generator, Component::Losses] {
        report.entries.extend(run_component(c)?.entries);
    }
    Ok(report)
}

fn ops_suite() -> Result<Report> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut report = Report::default();

    // conv2d: x, w, bias all differentiated, stride/dilation variants
    let x = sample([1, 2, 2, 5, 5], &mut rng);
    let w = sample([3, 2, 3, 3], &mut rng);
    let b = sample([3], &mut rng);
    let target = sample([1, 3, 2, 5, 5], &mut rng);
    report.entries.push(check_gradients(
        "conv2d(same, stride 1)",
        &[x.clone(), w.clone(), b.clone()],
        &|tape, vars| {
            let out = tape.conv2d(vars[0], vars[1], Some(vars[2]), &Conv2dCfg::default())?;
            mse_readout(tape, out, &target)
        },
    )?);

    let target2 = sample([1, 3, 2, 3, 3], &mut rng);
    report.entries.push(check_gradients(
        "conv2d(same, stride 2)",
        &[x.clone(), w.clone(), b.clone()],
        &|tape, vars| {
            let out = tape.conv2d(vars[0], vars[1], Some(vars[2]), &Conv2dCfg::same(2))?;
            mse_readout(tape, out, &target2)
        },
    )?);

    let target3 = sample([1, 3, 2, 5, 5], &mut rng);
    report.entries.push(check_gradients(
        "conv2d(dilation 2)",
        &[x.clone(), w, b],
        &|tape, vars| {
            let out = tape.conv2d(vars[0], vars[1], Some(vars[2]), &Conv2dCfg::dilated(2))?;
            mse_readout(tape, out, &target3)
        },
    )?);

    // temporal depthwise conv, plain and causal
    let xt = sample([2, 3, 4, 3, 3], &mut rng);
    let k = sample([3, 3], &mut rng);
    let target_t = sample([2, 3, 4, 3, 3], &mut rng);
    for (name, causal) in [("temporal_conv", false), ("temporal_conv(causal)", true)] {
        let target_t = target_t.clone();
        report.entries.push(check_gradients(
            name,
            &[xt.clone(), k.clone()],
            &move |tape, vars| {
                let out = tape.temporal_conv(vars[0], vars[1], causal)?;
                mse_readout(tape, out, &target_t)
            },
        )?);
    }

    // fixed shift
    let spec = ShiftSpec::fixed(false);
    let xs = sample([1, 4, 3, 2, 2], &mut rng);
    let target_s = sample([1, 4, 3, 2, 2], &mut rng);
    report.entries.push(check_gradients("temporal_shift_fixed", &[xs], &|tape, vars| {
        let out = crate::modules::temporal_shift_fixed(tape, vars[0], &spec)?;
        mse_readout(tape, out, &target_s)
    })?);

    // bilinear resize up and down
    let xr = sample([1, 2, 2, 4, 4], &mut rng);
    let target_up = sample([1, 2, 2, 8, 8], &mut rng);
    report.entries.push(check_gradients("bilinear_resize(up2)", &[xr.clone()], &|tape, vars| {
        let out = tape.resize_bilinear(vars[0], 8, 8)?;
        mse_readout(tape, out, &target_up)
    })?);
    let target_dn = sample([1, 2, 2, 2, 2], &mut rng);
    report.entries.push(check_gradients("bilinear_resize(down2)", &[xr], &|tape, vars| {
        let out = tape.resize_bilinear(vars[0], 2, 2)?;
        mse_readout(tape, out, &target_dn)
    })?);

    // elementwise suite
    let xe = sample([2, 3, 2, 2, 2], &mut rng);
    let ye = sample([2, 3, 2, 2, 2], &mut rng);
    let target_e = sample([2, 3, 2, 2, 2], &mut rng);
    let unary_cases: Vec<(&str, Box<dyn Fn(&mut Tape<f64>, Var) -> Result<Var>>)> = vec![
        ("sigmoid", Box::new(|t: &mut Tape<f64>, v| t.sigmoid(v))),
        ("tanh", Box::new(|t: &mut Tape<f64>, v| t.tanh(v))),
        ("relu", Box::new(|t: &mut Tape<f64>, v| t.relu(v))),
        ("leaky_relu(0.2)", Box::new(|t: &mut Tape<f64>, v| t.leaky_relu(v, 0.2))),
        ("abs", Box::new(|t: &mut Tape<f64>, v| t.abs(v))),
        ("affine(1.7, -0.3)", Box::new(|t: &mut Tape<f64>, v| t.affine(v, 1.7, -0.3))),
    ];
    for (name, op) in &unary_cases {
        let target_e = target_e.clone();
        report.entries.push(check_gradients(name, &[xe.clone()], &move |tape, vars| {
            let out = op(tape, vars[0])?;
            mse_readout(tape, out, &target_e)
        })?);
    }
    for (name, which) in [("add", 0), ("sub", 1), ("mul", 2)] {
        let target_e = target_e.clone();
        report.entries.push(check_gradients(
            name,
            &[xe.clone(), ye.clone()],
            &move |tape, vars| {
                let out = match which {
                    0 => tape.add(vars[0], vars[1])?,
                    1 => tape.sub(vars[0], vars[1])?,
                    _ => tape.mul(vars[0], vars[1])?,
                };
                mse_readout(tape, out, &target_e)
            },
        )?);
    }
    report.entries.push(check_gradients("sum", &[xe.clone()], &|tape, vars| {
        tape.sum(vars[0])
    })?);
    report.entries.push(check_gradients("mean", &[xe.clone()], &|tape, vars| {
        tape.mean(vars[0])
    })?);

    // gram
    let xg = sample([1, 3, 2, 3, 3], &mut rng);
    let target_g = sample([1, 2, 3, 3], &mut rng);
    report.entries.push(check_gradients("gram_matrix", &[xg], &|tape, vars| {
        let out = tape.gram(vars[0])?;
        mse_readout(tape, out, &target_g)
    })?);

    Ok(report)
}

fn layer_case(
    name: &str,
    mode: ShiftMode,
    resample: Resample,
    causal: bool,
    rng: &mut ChaCha8Rng,
) -> Result<CheckResult> {
    let (cin, cout, k) = (4, 3, 3);
    let x = sample([1, cin, 3, 4, 4], rng);
    let wf = sample([cout, cin, k, k], rng);
    let wg = sample([cout, cin, k, k], rng);
    let bf = sample([cout], rng);
    let bg = sample([cout], rng);
    let spec = ShiftSpec { fraction: crate::modules::Fraction::QUARTER, causal, mode };
    let kernels = sample([cin, 3], rng);
    let out_hw = match resample {
        Resample::None => 4,
        Resample::Down2 => 2,
        Resample::Up2 => 8,
    };
    let target = sample([1, cout, 3, out_hw, out_hw], rng);
    let inputs = vec![x, wf, wg, bf, bg, kernels];
    check_gradients(name, &inputs, &move |tape, vars| {
        let p = GatedLayerParams {
            wf: vars[1],
            wg: vars[2],
            bias_f: vars[3],
            bias_g: vars[4],
            shift: Some(spec),
            shift_kernels: Some(vars[5]),
            activation: Activation::LeakyRelu(0.2),
            conv: Conv2dCfg::default(),
            resample,
        };
        let out = lgtsm_layer_forward(tape, vars[0], &p)?;
        mse_readout(tape, out, &target)
    })
}

fn layer_suite() -> Result<Report> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xfacade);
    let mut report = Report::default();
    report.entries.push(layer_case(
        "lgtsm_layer(fixed shift)",
        ShiftMode::FixedTsm,
        Resample::None,
        false,
        &mut rng,
    )?);
    report.entries.push(layer_case(
        "lgtsm_layer(learnable shift)",
        ShiftMode::Learnable,
        Resample::None,
        false,
        &mut rng,
    )?);
    report.entries.push(layer_case(
        "lgtsm_layer(learnable, causal)",
        ShiftMode::Learnable,
        Resample::None,
        true,
        &mut rng,
    )?);
    report.entries.push(layer_case(
        "lgtsm_layer(down2)",
        ShiftMode::Learnable,
        Resample::Down2,
        false,
        &mut rng,
    )?);
    report.entries.push(layer_case(
        "lgtsm_layer(up2)",
        ShiftMode::Learnable,
        Resample::Up2,
        false,
        &mut rng,
    )?);
    Ok(report)
}

/// Three-layer miniature of the full generator: gated stride-1, gated down2,
/// plain up2 output head with tanh.
fn generator_suite() -> Result<Report> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xbead);
    let c = 3;
    let x = sample([1, 4, 3, 4, 4], &mut rng);
    let wf1 = sample([c, 4, 3, 3], &mut rng);
    let wg1 = sample([c, 4, 3, 3], &mut rng);
    let b1f = sample([c], &mut rng);
    let b1g = sample([c], &mut rng);
    let k1 = sample([4, 3], &mut rng);
    let wf2 = sample([c, c, 3, 3], &mut rng);
    let wg2 = sample([c, c, 3, 3], &mut rng);
    let b2f = sample([c], &mut rng);
    let b2g = sample([c], &mut rng);
    let k2 = sample([c, 3], &mut rng);
    let w3 = sample([3, c, 3, 3], &mut rng);
    let b3 = sample([3], &mut rng);
    let target = sample([1, 3, 3, 4, 4], &mut rng);

    let inputs = vec![x, wf1, wg1, b1f, b1g, k1, wf2, wg2, b2f, b2g, k2, w3, b3];
    let spec = ShiftSpec::learnable(false);
    let result = check_gradients("mini_generator(3 layers)", &inputs, &move |tape, vars| {
        let l1 = GatedLayerParams {
            wf: vars[1],
            wg: vars[2],
            bias_f: vars[3],
            bias_g: vars[4],
            shift: Some(spec),
            shift_kernels: Some(vars[5]),
            activation: Activation::LeakyRelu(0.2),
            conv: Conv2dCfg::default(),
            resample: Resample::None,
        };
        let h1 = lgtsm_layer_forward(tape, vars[0], &l1)?;
        let l2 = GatedLayerParams {
            wf: vars[6],
            wg: vars[7],
            bias_f: vars[8],
            bias_g: vars[9],
            shift: Some(spec),
            shift_kernels: Some(vars[10]),
            activation: Activation::LeakyRelu(0.2),
            conv: Conv2dCfg::default(),
            resample: Resample::Down2,
        };
        let h2 = lgtsm_layer_forward(tape, h1, &l2)?;
        let up = {
            let [_, _, _, h, w] = tape.val(h2).shape().dims5()?;
            tape.resize_bilinear(h2, h * 2, w * 2)?
        };
        let raw = tape.conv2d(up, vars[11], Some(vars[12]), &Conv2dCfg::default())?;
        let out = tape.tanh(raw)?;
        mse_readout(tape, out, &target)
    })?;
    Ok(Report { entries: vec![result] })
}

fn losses_suite() -> Result<Report> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x105e5);
    let mut report = Report::default();

    // reconstruction stack on a small clip; |O - V| stays away from zero
    let v = sample([1, 3, 2, 8, 8], &mut rng);
    let o = v.map(|x| x * 0.5 + 0.4);
    let fx = FeatureExtractor::<f64>::seeded(77);

    report.entries.push(check_gradients("l1_loss", &[o.clone()], &{
        let v = v.clone();
        move |tape, vars| {
            let vv = tape.leaf(v.clone());
            losses::l1_loss(tape, vars[0], vv)
        }
    })?);

    report.entries.push(check_gradients("perceptual_loss", &[o.clone()], &{
        let v = v.clone();
        let fx = fx.clone();
        move |tape, vars| {
            let vv = tape.leaf(v.clone());
            losses::perceptual_loss(tape, vars[0], vv, &fx)
        }
    })?);

    report.entries.push(check_gradients("style_loss", &[o.clone()], &{
        let v = v.clone();
        let fx = fx.clone();
        move |tape, vars| {
            let vv = tape.leaf(v.clone());
            losses::style_loss(tape, vars[0], vv, &fx)
        }
    })?);

    // hinge terms on raw score maps; keep |1 +- s| away from the kink
    let real = sample([1, 1, 2, 3, 3], &mut rng).map(|x| x * 0.6);
    let fake = sample([1, 1, 2, 3, 3], &mut rng).map(|x| x * 0.6);
    for sign in [HingeSign::Standard, HingeSign::Paper] {
        let name = match sign {
            HingeSign::Standard => "d_hinge_loss(standard)",
            HingeSign::Paper => "d_hinge_loss(paper)",
        };
        report.entries.push(check_gradients(name, &[real.clone(), fake.clone()], &{
            move |tape, vars| losses::d_hinge_loss(tape, vars[0], vars[1], sign)
        })?);
    }
    report.entries.push(check_gradients("g_adv_loss", &[fake.clone()], &|tape, vars| {
        losses::g_adv_loss(tape, vars[0])
    })?);

    // weighted total through the whole reconstruction stack
    report.entries.push(check_gradients("total_loss(l1+perc+style+adv)", &[o], &{
        let v = v.clone();
        let fx = fx.clone();
        move |tape, vars| {
            let vv = tape.leaf(v.clone());
            let l1 = losses::l1_loss(tape, vars[0], vv)?;
            let perc = losses::perceptual_loss(tape, vars[0], vv, &fx)?;
            let style = losses::style_loss(tape, vars[0], vv, &fx)?;
            // adv term depends on vars[0] only through a stand-in projection
            let proj = tape.mean(vars[0])?;
            let terms = losses::LossTerms {
                l1: Some(l1),
                perc: Some(perc),
                style: Some(style),
                adv: Some(proj),
            };
            losses::total_loss(tape, &terms, &losses::LossWeights::default())
        }
    })?);

    Ok(report)
}
