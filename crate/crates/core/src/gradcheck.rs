//! Central finite-difference checks of the tape gradients.
//!
//! The relative error of one entry is `|a - n| / max(|a|, |n|, 1e-6)` for
//! analytic gradient `a` and numeric gradient `n` with step `1e-5`.

use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::config::Variant;
use crate::error::Result;
use crate::losses::{adversarial_losses, CenterTable, LossWeights};
use crate::models::{ArchSpec, Group, MlpSpec, ModelParams};
use crate::rng::{derive_seed, SeededRng};
use crate::tensor::Tensor2;
use crate::trainer::{encoder_classifier_objective, BatchInputs};

pub const STEP: f64 = 1e-5;
pub const FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseResult {
    pub name: &'static str,
    pub draws: usize,
    pub entries: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub cases: Vec<CaseResult>,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

/// Max relative error over every entry of every input of a scalar function
/// recorded by `build` on leaves holding `inputs`.
pub fn check_function<F>(inputs: &[Tensor2], build: F) -> Result<(f64, usize)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor2]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok(tape.scalar_value(out))
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = build(&mut tape, &vars)?;
    tape.backward(out)?;
    let mut worst = 0.0f64;
    let mut entries = 0;
    let mut probe = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = tape.grad(v).map_or_else(|| vec![0.0; inputs[i].len()], <[f64]>::to_vec);
        for (j, &a) in analytic.iter().enumerate() {
            let orig = inputs[i].values()[j];
            probe[i].values_mut()[j] = orig + STEP;
            let up = eval(&probe)?;
            probe[i].values_mut()[j] = orig - STEP;
            let down = eval(&probe)?;
            probe[i].values_mut()[j] = orig;
            worst = worst.max(relative_error(a, (up - down) / (2.0 * STEP)));
            entries += 1;
        }
    }
    Ok((worst, entries))
}

/// Same as [`check_function`] over the parameters of `groups`.
pub fn check_params<F>(params: &ModelParams, groups: &[Group], build: F) -> Result<(f64, usize)>
where
    F: Fn(&mut Tape, &ModelParams) -> Result<(Var, crate::models::ParamVars)>,
{
    let value = |p: &ModelParams| -> Result<f64> {
        let mut tape = Tape::new();
        let (out, _) = build(&mut tape, p)?;
        Ok(tape.scalar_value(out))
    };
    let mut tape = Tape::new();
    let (out, vars) = build(&mut tape, params)?;
    tape.backward(out)?;
    let mut analytic_params = params.clone();
    analytic_params.collect_grads(&tape, &vars, groups)?;
    let analytic: Vec<Vec<f64>> =
        analytic_params.named_tensors_mut(groups).into_iter().map(|(_, t)| t.take_grad().unwrap_or_default()).collect();

    let mut worst = 0.0f64;
    let mut entries = 0;
    let mut probe = params.clone();
    for (t, grads) in analytic.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let orig = probe.named_tensors_mut(groups)[t].1.values()[j];
            probe.named_tensors_mut(groups)[t].1.values_mut()[j] = orig + STEP;
            let up = value(&probe)?;
            probe.named_tensors_mut(groups)[t].1.values_mut()[j] = orig - STEP;
            let down = value(&probe)?;
            probe.named_tensors_mut(groups)[t].1.values_mut()[j] = orig;
            worst = worst.max(relative_error(a, (up - down) / (2.0 * STEP)));
            entries += 1;
        }
    }
    Ok((worst, entries))
}

fn random(rng: &mut SeededRng, rows: usize, cols: usize) -> Tensor2 {
    Tensor2::new(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).expect("non-empty shape")
}

fn dims(rng: &mut SeededRng) -> (usize, usize, usize) {
    (2 + rng.index(4), 1 + rng.index(4), 1 + rng.index(4))
}

type Case = (&'static str, fn(&mut SeededRng) -> Result<(f64, usize)>);

fn op_matmul(rng: &mut SeededRng) -> Result<(f64, usize)> {
    let (n, a, b) = dims(rng);
    check_function(&[random(rng, n, a), random(rng, a, b)], |t, v| {
        let m = t.matmul(v[0], v[1])?;
        t.squared_distance(m, &(0..n).collect::<Vec<_>>(), &Tensor2::zeros(n, b)?)
    })
}

/// Reduces an `n x c` value to a scalar with a fixed random projection so
/// every entry gets a distinct gradient.
fn project(t: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let (rows, cols) = t.value(x).shape();
    let mut rng = SeededRng::new(seed);
    let w = t.constant(random(&mut rng, cols, 1));
    let col = t.matmul(x, w)?;
    let ones = t.constant(Tensor2::new(1, rows, vec![1.0; rows])?);
    t.matmul(ones, col)
}

fn op_add_bias(rng: &mut SeededRng) -> Result<(f64, usize)> {
    let (n, c, _) = dims(rng);
    let s = rng.next_u64();
    check_function(&[random(rng, n, c), random(rng, 1, c)], move |t, v| {
        let y = t.add_bias(v[0], v[1])?;
        project(t, y, s)
    })
}

fn op_relu(rng: &mut SeededRng) -> Result<(f64, usize)> {
    let (n, c, _) = dims(rng);
    let s = rng.next_u64();
    // keep entries away from the kink so the step never crosses it
    let x = random(rng, n, c).map(|v| if v.abs() < 0.05 { v + 0.1f64.copysign(v) } else { v });
    check_function(&[x], move |t, v| {
        let y = t.relu(v[0]);
        project(t, y, s)
    })
}

fn op_add(rng: &mut SeededRng) -> Result<(f64, usize)> {
    let (n, c, _) = dims(rng);
    let s = rng.next_u64();
    check_function(&[random(rng, n, c), random(rng, n, c)], move |t, v| {
        let y = t.add(v[0], v[1])?;
        project(t, y, s)
    })
}

fn op_scale(rng: &mut SeededRng) -> Result<(f64, usize)> {
    let (n, c, _) = dims(rng);
    let (s, k) = (rng.next_u64(), rng.normal());
    check_function(&[random(rng, n, c)], move |t, v| {
        let y = t.scale(v[0], k);
        project(t, y, s)
    })
}

fn op_concat(rng: &mut SeededRng) -> Result<(f64, usize)> {
    let (n, c, m) = dims(rng);
    let s = rng.next_u64();
    check_function(&[random(rng, n, c), random(rng, m, c)], move |t, v| {
        let y = t.concat_rows(v[0], v[1])?;
        project(t, y, s)
    })
}

fn op_softmax_ce(rng: &mut SeededRng) -> Result<(f64, usize)> {
    let (n, _, _) = dims(rng);
    let k = 2 + rng.index(4);
    let labels: Vec<usize> = (0..n).map(|_| rng.index(k)).collect();
    check_function(&[random(rng, n, k).map(|v| 2.0 * v)], move |t, v| Ok(t.softmax_cross_entropy(v[0], &labels)?.0))
}

fn op_bce(rng: &mut SeededRng) -> Result<(f64, usize)> {
    let (n, _, _) = dims(rng);
    let targets: Vec<f64> = (0..n).map(|_| rng.index(2) as f64).collect();
    check_function(&[random(rng, n, 1).map(|v| 3.0 * v)], move |t, v| t.bce_with_logits(v[0], &targets))
}

fn op_squared_distance(rng: &mut SeededRng) -> Result<(f64, usize)> {
    let (n, d, _) = dims(rng);
    let keep: Vec<usize> = (0..n).filter(|_| rng.uniform() < 0.7).collect();
    let rows = if keep.is_empty() { vec![0] } else { keep };
    let anchors = random(rng, rows.len(), d);
    check_function(&[random(rng, n, d)], move |t, v| t.squared_distance(v[0], &rows, &anchors))
}

fn small_model(rng: &mut SeededRng) -> Result<(ModelParams, Tensor2, Vec<usize>, Tensor2)> {
    let (input, d, k) = (2 + rng.index(3), 2 + rng.index(3), 2 + rng.index(3));
    let arch = ArchSpec {
        encoder: MlpSpec::new([input, 5, d]),
        classifier: MlpSpec::new([d, k]),
        discriminator: Some(MlpSpec::new([d, 4, 4, 1])),
    };
    let mut params = ModelParams::init(&arch, rng.next_u64())?;
    // zero biases put dead-row pre-activations exactly on the ReLU kink
    for (name, t) in params.named_tensors_mut(&[Group::Encoder, Group::Classifier, Group::Discriminator]) {
        if name.ends_with("bias") {
            t.values_mut().iter_mut().for_each(|b| *b = 0.5 * rng.normal());
        }
    }
    let n = 3 + rng.index(4);
    let xs = random(rng, n, input);
    let ys = (0..n).map(|_| rng.index(k)).collect();
    let xt = random(rng, n, input).map(|v| v + 0.5);
    Ok((params, xs, ys, xt))
}

fn composite_encoder_classifier(rng: &mut SeededRng) -> Result<(f64, usize)> {
    let (params, xs, ys, xt) = small_model(rng)?;
    let centers = CenterTable::from_parts(random(rng, params.num_classes(), params.feature_dim()), 0.5, true);
    let weights = LossWeights { alpha: 10.0, beta1: 0.3, beta2: 0.2, threshold: 0.34 };
    let groups = [Group::Encoder, Group::Classifier];
    check_params(&params, &groups, |tape, p| {
        let vars = p.bind(tape, &groups);
        let inputs = BatchInputs { source_x: &xs, source_y: &ys, target_x: &xt };
        let rec = encoder_classifier_objective(tape, &vars, inputs, &centers, &weights, Variant::Full)?;
        Ok((rec.total, vars))
    })
}

fn composite_discriminator(rng: &mut SeededRng) -> Result<(f64, usize)> {
    let (params, xs, _, xt) = small_model(rng)?;
    let groups = [Group::Discriminator];
    check_params(&params, &groups, |tape, p| {
        let vars = p.bind(tape, &groups);
        let s = tape.constant(xs.clone());
        let t = tape.constant(xt.clone());
        let fs = vars.encode(tape, s)?;
        let ft = vars.encode(tape, t)?;
        let ds = vars.discriminate(tape, fs)?;
        let dt = vars.discriminate(tape, ft)?;
        Ok((adversarial_losses(tape, ds, dt)?.discriminator, vars))
    })
}

pub const CASES: [Case; 11] = [
    ("matmul", op_matmul),
    ("add_bias", op_add_bias),
    ("relu", op_relu),
    ("add", op_add),
    ("scale", op_scale),
    ("concat_rows", op_concat),
    ("softmax_cross_entropy", op_softmax_ce),
    ("bce_with_logits", op_bce),
    ("squared_distance", op_squared_distance),
    ("encoder_classifier_objective", composite_encoder_classifier),
    ("discriminator_objective", composite_discriminator),
];

/// Runs every case `draws` times with independent random inputs.
pub fn run_suite(draws: usize, seed: u64) -> Result<GradCheckReport> {
    let mut cases = Vec::new();
    for (i, (name, case)) in CASES.iter().enumerate() {
        let mut rng = SeededRng::new(derive_seed(seed, i as u64));
        let mut worst = 0.0f64;
        let mut entries = 0;
        for _ in 0..draws {
            let (w, e) = case(&mut rng)?;
            worst = worst.max(w);
            entries += e;
        }
        cases.push(CaseResult { name, draws, entries, max_rel_err: worst });
    }
    let max_rel_err = cases.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport { cases, max_rel_err })
}
