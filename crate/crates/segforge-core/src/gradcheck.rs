//! Finite-difference gradient checking, always at f64.
//!
//! Central differences with h = h_base * max(1, |x_i|). h_base defaults to a
//! power of two so x + h is usually exact and simple cases report an error of
//! exactly zero. The relative-error denominator is max(|a|, |n|, 1e-8), which
//! keeps near-zero gradients from exploding the ratio.
//!
//! The checked function is evaluated twice at the base point first; if the two
//! values differ bitwise the function is not a fixed input-output map and no
//! finite-difference statement about it is meaningful, so that is an error.

use crate::blocks::{
    Aspp, AttentionBlock, DecoderBlock, DoubleConv, EncoderBlock, SqueezeExcite, Stem,
};
use crate::error::TensorError;
use crate::kernels::Conv2dCfg;
use crate::model::{Arch, Model, ModelConfig};
use crate::params::{ForwardCx, Registry};
use crate::rng::SeedStream;
use crate::tape::{BnState, Mode, Tape, Var};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone)]
pub struct CheckPlan {
    /// Base step; scaled per coordinate by max(1, |x_i|).
    pub h_base: f64,
    /// Cap on coordinates checked per tensor. None sweeps everything; Some(k)
    /// keeps both ends plus a seeded interior sample (big-model checks would
    /// otherwise take hours).
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for CheckPlan {
    fn default() -> Self {
        CheckPlan {
            h_base: 2f64.powi(-13), // ~1.22e-4
            max_coords: None,
            seed: 7,
        }
    }
}

impl CheckPlan {
    /// Plan for whole-model checks. The step must sit below the kink spacing:
    /// a deep stack of relu/maxpool units puts the nearest derivative
    /// discontinuity within ~1e-4 of the base point along some weight axes,
    /// so steps around 1e-3..1e-4 straddle kinks and the quotient stops
    /// meaning anything. 2^-19 is comfortably below that and still far above
    /// the f64 roundoff floor. Coordinates are sampled per tensor; full
    /// sweeps over every weight of even a toy network take hours.
    pub fn model() -> CheckPlan {
        CheckPlan {
            h_base: 2f64.powi(-19),
            max_coords: Some(6),
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err <= tolerance
    }
}

/// Coordinates to probe: full sweep when it fits the cap, otherwise both ends
/// plus a seeded interior sample (deterministic for a fixed plan).
pub fn coords_for(numel: usize, plan: &CheckPlan) -> Vec<usize> {
    match plan.max_coords {
        None => (0..numel).collect(),
        Some(k) if numel <= k => (0..numel).collect(),
        Some(k) => {
            let mut interior: Vec<usize> = (1..numel.saturating_sub(1)).collect();
            let mut stream =
                SeedStream::derived(plan.seed, "gradcheck.coords", &[numel as u64, k as u64]);
            stream.shuffle(&mut interior);
            let mut out = vec![0];
            out.extend(interior.into_iter().take(k.saturating_sub(2)));
            if numel > 1 {
                out.push(numel - 1);
            }
            out.sort_unstable();
            out.dedup();
            out
        }
    }
}

/// Compare `analytic` against central differences of `f` around `x`.
pub fn numeric_grad_check<F>(
    name: &str,
    x: &Tensor<f64>,
    analytic: &Tensor<f64>,
    mut f: F,
    plan: &CheckPlan,
) -> Result<GradCheckReport, TensorError>
where
    F: FnMut(&Tensor<f64>) -> Result<f64, TensorError>,
{
    if analytic.shape() != x.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "numeric_grad_check",
            a: x.shape().to_string(),
            b: analytic.shape().to_string(),
        });
    }
    let base = f(x)?;
    let again = f(x)?;
    if base.to_bits() != again.to_bits() {
        return Err(TensorError::NonDeterministicFn { index: 0 });
    }
    if !base.is_finite() {
        return Err(TensorError::NonFiniteCheckValue { value: base });
    }

    let mut report = GradCheckReport {
        name: name.to_string(),
        coords_checked: 0,
        max_rel_err: 0.0,
        worst_index: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
    };
    for i in coords_for(x.numel(), plan) {
        let h = plan.h_base * x.data()[i].abs().max(1.0);
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        // The realized step can differ from h by rounding; divide by what was
        // actually applied.
        let span = xp.data()[i] - xm.data()[i];
        let fp = f(&xp)?;
        let fm = f(&xm)?;
        for v in [fp, fm] {
            if !v.is_finite() {
                return Err(TensorError::NonFiniteCheckValue { value: v });
            }
        }
        let numeric = (fp - fm) / span;
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        report.coords_checked += 1;
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_index = i;
            report.analytic_at_worst = a;
            report.numeric_at_worst = numeric;
        }
    }
    Ok(report)
}

/// Check one input of a tape-built scalar function. All `inputs` become
/// leaves; `build` must end in a scalar var. The analytic gradient comes from
/// one backward pass, the numeric one from re-running `build` with input
/// `wrt` perturbed.
pub fn check_tape_fn<F>(
    name: &str,
    inputs: &[Tensor<f64>],
    wrt: usize,
    plan: &CheckPlan,
    build: F,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let mut grads = tape.backward(out)?;
    let analytic = grads
        .take(vars[wrt])
        .unwrap_or_else(|| Tensor::zeros(inputs[wrt].shape().clone()));

    let f = |x: &Tensor<f64>| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(j, t)| tape.constant(if j == wrt { x.clone() } else { t.clone() }))
            .collect();
        let out = build(&mut tape, &vars)?;
        if tape.value(out).numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                got: tape.value(out).shape().to_string(),
            });
        }
        Ok(tape.value(out).scalar_value())
    };
    numeric_grad_check(name, &inputs[wrt], &analytic, f, plan)
}

/// Reduce a tensor-valued var to a scalar through a fixed random projection.
/// Plain sums let sign-symmetric or permuted-gradient bugs cancel; weighting
/// every element by a distinct value in [0.5, 1.5) keeps them observable.
pub fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var, TensorError> {
    let shape = tape.value(y).shape().clone();
    let mut stream = SeedStream::derived(seed, "gradcheck.projection", &[shape.numel() as u64]);
    let w = Tensor::from_fn(shape, |_| 0.5 + stream.uniform());
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum_all(p))
}

/// Check every parameter of a registry-built function, plus each input.
/// `build` maps input vars to one output var; a fixed random projection makes
/// it scalar. Runs in Train mode: batch-norm output then depends only on
/// parameters and inputs, so repeated evaluations are bitwise identical even
/// though running stats accumulate garbage. The registry's parameter values
/// are restored afterwards; its batch-norm state is scratch.
pub fn check_registry_fn<F>(
    name: &str,
    reg: &mut Registry<f64>,
    inputs: &[Tensor<f64>],
    plan: &CheckPlan,
    build: F,
) -> Result<Vec<GradCheckReport>, TensorError>
where
    F: Fn(&mut ForwardCx<'_, f64>, &[Var]) -> Result<Var, TensorError>,
{
    let input_grads: Vec<Tensor<f64>> = {
        let mut cx = ForwardCx::new(reg, Mode::Train);
        let vars: Vec<Var> = inputs.iter().map(|t| cx.tape.leaf(t.clone())).collect();
        let out = build(&mut cx, &vars)?;
        let loss = project(&mut cx.tape, out, plan.seed)?;
        let (tape, bound) = cx.into_parts();
        let mut grads = tape.backward(loss)?;
        let ig = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| {
                grads
                    .take(v)
                    .unwrap_or_else(|| Tensor::zeros(t.shape().clone()))
            })
            .collect();
        reg.store_grads(&bound, &mut grads);
        ig
    };

    // One scalar evaluation with whatever the registry currently holds,
    // optionally overriding input `swap` with a candidate tensor.
    let eval = |reg: &mut Registry<f64>,
                swap: Option<(usize, &Tensor<f64>)>|
     -> Result<f64, TensorError> {
        let mut cx = ForwardCx::new(reg, Mode::Train);
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(j, t)| {
                let v = match swap {
                    Some((i, cand)) if i == j => cand.clone(),
                    _ => t.clone(),
                };
                cx.tape.constant(v)
            })
            .collect();
        let out = build(&mut cx, &vars)?;
        let loss = project(&mut cx.tape, out, plan.seed)?;
        Ok(cx.tape.value(loss).scalar_value())
    };

    let mut reports = Vec::new();
    let ids: Vec<_> = reg.param_ids().collect();
    for id in ids {
        let pname = reg.param(id).name.clone();
        let saved = reg.param(id).value.clone();
        let analytic = reg
            .param(id)
            .grad
            .clone()
            .unwrap_or_else(|| Tensor::zeros(saved.shape().clone()));
        let report = numeric_grad_check(
            &format!("{name}/{pname}"),
            &saved,
            &analytic,
            |cand| {
                reg.param_mut(id).value = cand.clone();
                eval(reg, None)
            },
            plan,
        );
        reg.param_mut(id).value = saved;
        reports.push(report?);
    }
    for (i, (x0, analytic)) in inputs.iter().zip(&input_grads).enumerate() {
        let label = if inputs.len() == 1 {
            format!("{name}/input")
        } else {
            format!("{name}/input{i}")
        };
        reports.push(numeric_grad_check(
            &label,
            x0,
            analytic,
            |cand| eval(reg, Some((i, cand))),
            plan,
        )?);
    }
    Ok(reports)
}

// ---- named check suite (shared by the CLI gradcheck command and tests) ----

/// Deterministic distinct values with gaps well above the FD step, for ops
/// with kinks or argmax ties (relu, maxpool).
fn wiggle(shape: Shape, lo: f64, step: f64) -> Tensor<f64> {
    assert!(shape.numel() <= 101, "wiggle values repeat past 101 elements");
    Tensor::from_fn(shape, |i| lo + ((i * 37) % 101) as f64 * step)
}

fn randn(shape: Shape, label: &str) -> Tensor<f64> {
    let mut stream = SeedStream::derived(11, label, &[shape.numel() as u64]);
    Tensor::randn(shape, &mut stream)
}

fn binary_mask(shape: Shape) -> Tensor<f64> {
    Tensor::from_fn(shape, |i| if (i * 29) % 7 < 3 { 1.0 } else { 0.0 })
}

/// Every op-level check, in display order. Composite-block and full-model
/// checks are appended by the model layer's suite below.
pub fn op_checks() -> Vec<&'static str> {
    vec![
        "conv2d/x",
        "conv2d/w",
        "conv2d/b",
        "conv2d_strided/x",
        "conv2d_strided/w",
        "conv2d_dilated/x",
        "conv2d_dilated/w",
        "batchnorm_train/x",
        "batchnorm_train/gamma",
        "batchnorm_train/beta",
        "batchnorm_infer/x",
        "batchnorm_infer/gamma",
        "batchnorm_infer/beta",
        "relu/x",
        "sigmoid/x",
        "clamp_unit/x",
        "add/a",
        "add/b",
        "mul/a",
        "mul/b",
        "mul_channel/x",
        "mul_channel/s",
        "concat_channels/a",
        "concat_channels/b",
        "global_avg_pool/x",
        "upsample_nearest/x",
        "maxpool2d/x",
        "dice_loss/pred",
        "bce_loss/pred",
        "mse_loss/pred",
    ]
}

pub fn run_op_check(name: &str, plan: &CheckPlan) -> Result<GradCheckReport, TensorError> {
    let seed = plan.seed;
    match name {
        "conv2d/x" | "conv2d/w" | "conv2d/b" => {
            let x = randn(Shape::nchw(1, 2, 5, 4), "gc.conv.x");
            let w = randn(Shape::new(vec![3, 2, 3, 3]).unwrap(), "gc.conv.w");
            let b = randn(Shape::new(vec![3]).unwrap(), "gc.conv.b");
            let wrt = match name {
                "conv2d/x" => 0,
                "conv2d/w" => 1,
                _ => 2,
            };
            check_tape_fn(name, &[x, w, b], wrt, plan, |tape, v| {
                let cfg = Conv2dCfg {
                    stride: 1,
                    dilation: 1,
                    padding: 1,
                };
                let y = tape.conv2d(v[0], v[1], v[2], cfg)?;
                project(tape, y, seed)
            })
        }
        "conv2d_strided/x" | "conv2d_strided/w" => {
            let x = randn(Shape::nchw(1, 2, 6, 6), "gc.convs.x");
            let w = randn(Shape::new(vec![2, 2, 3, 3]).unwrap(), "gc.convs.w");
            let b = Tensor::zeros(Shape::new(vec![2]).unwrap());
            let wrt = if name.ends_with("/x") { 0 } else { 1 };
            check_tape_fn(name, &[x, w, b], wrt, plan, |tape, v| {
                let cfg = Conv2dCfg {
                    stride: 2,
                    dilation: 1,
                    padding: 1,
                };
                let y = tape.conv2d(v[0], v[1], v[2], cfg)?;
                project(tape, y, seed)
            })
        }
        "conv2d_dilated/x" | "conv2d_dilated/w" => {
            let x = randn(Shape::nchw(1, 2, 7, 7), "gc.convd.x");
            let w = randn(Shape::new(vec![2, 2, 3, 3]).unwrap(), "gc.convd.w");
            let b = Tensor::zeros(Shape::new(vec![2]).unwrap());
            let wrt = if name.ends_with("/x") { 0 } else { 1 };
            check_tape_fn(name, &[x, w, b], wrt, plan, |tape, v| {
                let cfg = Conv2dCfg {
                    stride: 1,
                    dilation: 2,
                    padding: 2,
                };
                let y = tape.conv2d(v[0], v[1], v[2], cfg)?;
                project(tape, y, seed)
            })
        }
        "batchnorm_train/x" | "batchnorm_train/gamma" | "batchnorm_train/beta" => {
            let x = randn(Shape::nchw(2, 3, 4, 4), "gc.bnt.x");
            let gamma = wiggle(Shape::new(vec![3]).unwrap(), 0.7, 0.01);
            let beta = wiggle(Shape::new(vec![3]).unwrap(), -0.2, 0.01);
            let wrt = match name {
                "batchnorm_train/x" => 0,
                "batchnorm_train/gamma" => 1,
                _ => 2,
            };
            check_tape_fn(name, &[x, gamma, beta], wrt, plan, |tape, v| {
                let mut state = BnState::new(3);
                let y = tape.batchnorm2d(v[0], v[1], v[2], &mut state, Mode::Train, 0.1, 1e-5)?;
                project(tape, y, seed)
            })
        }
        "batchnorm_infer/x" | "batchnorm_infer/gamma" | "batchnorm_infer/beta" => {
            let x = randn(Shape::nchw(2, 3, 4, 4), "gc.bni.x");
            let gamma = wiggle(Shape::new(vec![3]).unwrap(), 0.7, 0.01);
            let beta = wiggle(Shape::new(vec![3]).unwrap(), -0.2, 0.01);
            let wrt = match name {
                "batchnorm_infer/x" => 0,
                "batchnorm_infer/gamma" => 1,
                _ => 2,
            };
            check_tape_fn(name, &[x, gamma, beta], wrt, plan, |tape, v| {
                let mut state = BnState::new(3);
                state.running_mean = vec![0.3, -0.1, 0.2];
                state.running_var = vec![1.4, 0.8, 1.0];
                state.initialized = true;
                let y = tape.batchnorm2d(v[0], v[1], v[2], &mut state, Mode::Infer, 0.1, 1e-5)?;
                project(tape, y, seed)
            })
        }
        "relu/x" => {
            // Values keep a margin around the kink at 0 wider than the step.
            let x = wiggle(Shape::nchw(1, 2, 5, 5), -0.33, 0.013);
            check_tape_fn(name, &[x], 0, plan, |tape, v| {
                let y = tape.relu(v[0]);
                project(tape, y, seed)
            })
        }
        "sigmoid/x" => {
            let x = randn(Shape::nchw(1, 2, 4, 4), "gc.sig.x");
            check_tape_fn(name, &[x], 0, plan, |tape, v| {
                let y = tape.sigmoid(v[0]);
                project(tape, y, seed)
            })
        }
        "clamp_unit/x" => {
            // Strictly inside (eps, 1-eps) so the clamp is a local identity.
            let x = wiggle(Shape::nchw(1, 2, 5, 5), 0.1, 0.0079);
            check_tape_fn(name, &[x], 0, plan, |tape, v| {
                let y = tape.clamp_unit(v[0], 1e-6)?;
                project(tape, y, seed)
            })
        }
        "add/a" | "add/b" => {
            let a = randn(Shape::nchw(1, 3, 4, 4), "gc.add.a");
            let b = randn(Shape::nchw(1, 3, 4, 4), "gc.add.b");
            let wrt = if name.ends_with("/a") { 0 } else { 1 };
            check_tape_fn(name, &[a, b], wrt, plan, |tape, v| {
                let y = tape.add(v[0], v[1])?;
                project(tape, y, seed)
            })
        }
        "mul/a" | "mul/b" => {
            let a = randn(Shape::nchw(1, 3, 4, 4), "gc.mul.a");
            let b = randn(Shape::nchw(1, 3, 4, 4), "gc.mul.b");
            let wrt = if name.ends_with("/a") { 0 } else { 1 };
            check_tape_fn(name, &[a, b], wrt, plan, |tape, v| {
                let y = tape.mul(v[0], v[1])?;
                project(tape, y, seed)
            })
        }
        "mul_channel/x" | "mul_channel/s" => {
            let x = randn(Shape::nchw(2, 3, 4, 4), "gc.mc.x");
            let s = randn(Shape::nchw(2, 3, 1, 1), "gc.mc.s");
            let wrt = if name.ends_with("/x") { 0 } else { 1 };
            check_tape_fn(name, &[x, s], wrt, plan, |tape, v| {
                let y = tape.mul_channel(v[0], v[1])?;
                project(tape, y, seed)
            })
        }
        "concat_channels/a" | "concat_channels/b" => {
            let a = randn(Shape::nchw(1, 2, 4, 4), "gc.cat.a");
            let b = randn(Shape::nchw(1, 3, 4, 4), "gc.cat.b");
            let wrt = if name.ends_with("/a") { 0 } else { 1 };
            check_tape_fn(name, &[a, b], wrt, plan, |tape, v| {
                let y = tape.concat_channels(v[0], v[1])?;
                project(tape, y, seed)
            })
        }
        "global_avg_pool/x" => {
            let x = randn(Shape::nchw(2, 3, 4, 4), "gc.gap.x");
            check_tape_fn(name, &[x], 0, plan, |tape, v| {
                let y = tape.global_avg_pool(v[0])?;
                project(tape, y, seed)
            })
        }
        "upsample_nearest/x" => {
            let x = randn(Shape::nchw(1, 2, 3, 3), "gc.up.x");
            check_tape_fn(name, &[x], 0, plan, |tape, v| {
                let y = tape.upsample_nearest(v[0], 2)?;
                project(tape, y, seed)
            })
        }
        "maxpool2d/x" => {
            // Distinct values with wide margins: no argmax flip inside ±h.
            let x = wiggle(Shape::nchw(1, 2, 6, 6), -0.4, 0.013);
            check_tape_fn(name, &[x], 0, plan, |tape, v| {
                let y = tape.maxpool2d(v[0], 2, 2)?;
                project(tape, y, seed)
            })
        }
        "dice_loss/pred" => {
            let pred = wiggle(Shape::nchw(1, 1, 5, 5), 0.1, 0.0079);
            let target = binary_mask(Shape::nchw(1, 1, 5, 5));
            check_tape_fn(name, &[pred], 0, plan, move |tape, v| {
                tape.dice_loss(v[0], &target, 1.0)
            })
        }
        "bce_loss/pred" => {
            // Inside (0.1, 0.9): far from the probability clamp.
            let pred = wiggle(Shape::nchw(1, 1, 5, 5), 0.1, 0.0079);
            let target = binary_mask(Shape::nchw(1, 1, 5, 5));
            check_tape_fn(name, &[pred], 0, plan, move |tape, v| {
                tape.bce_loss(v[0], &target)
            })
        }
        "mse_loss/pred" => {
            let pred = wiggle(Shape::nchw(1, 1, 5, 5), 0.1, 0.0079);
            let target = binary_mask(Shape::nchw(1, 1, 5, 5));
            check_tape_fn(name, &[pred], 0, plan, move |tape, v| {
                tape.mse_loss(v[0], &target)
            })
        }
        other => Err(TensorError::Contract {
            op: "gradcheck",
            message: format!("unknown check '{other}'"),
        }),
    }
}

/// Composite blocks, checked over every parameter and the block input.
pub fn block_checks() -> Vec<&'static str> {
    vec![
        "stem",
        "encoder",
        "squeeze_excite",
        "aspp",
        "attention",
        "decoder",
        "double_conv",
    ]
}

pub fn run_block_check(name: &str, plan: &CheckPlan) -> Result<Vec<GradCheckReport>, TensorError> {
    let mut reg = Registry::new();
    let mut stream = SeedStream::derived(3, "gradcheck.block", &[]);
    match name {
        "stem" => {
            let block = Stem::new(&mut reg, "stem", 2, 4, 2, &mut stream);
            let x = randn(Shape::nchw(1, 2, 8, 8), "gc.block.stem");
            check_registry_fn(name, &mut reg, &[x], plan, move |cx, v| {
                block.forward(cx, v[0])
            })
        }
        "encoder" => {
            let block = EncoderBlock::new(&mut reg, "enc", 4, 4, 2, &mut stream);
            let x = randn(Shape::nchw(1, 4, 8, 8), "gc.block.enc");
            check_registry_fn(name, &mut reg, &[x], plan, move |cx, v| {
                block.forward(cx, v[0])
            })
        }
        "squeeze_excite" => {
            let block = SqueezeExcite::new(&mut reg, "se", 4, 2, &mut stream);
            let x = randn(Shape::nchw(2, 4, 4, 4), "gc.block.se");
            check_registry_fn(name, &mut reg, &[x], plan, move |cx, v| {
                block.forward(cx, v[0])
            })
        }
        "aspp" => {
            let block = Aspp::new(&mut reg, "aspp", 3, 4, &[1, 2], 8, &mut stream);
            let x = randn(Shape::nchw(1, 3, 8, 8), "gc.block.aspp");
            check_registry_fn(name, &mut reg, &[x], plan, move |cx, v| {
                block.forward(cx, v[0])
            })
        }
        "attention" => {
            let block = AttentionBlock::new(&mut reg, "att", 3, 4, &mut stream);
            let e = randn(Shape::nchw(1, 3, 8, 8), "gc.block.att.e");
            let d = randn(Shape::nchw(1, 4, 4, 4), "gc.block.att.d");
            check_registry_fn(name, &mut reg, &[e, d], plan, move |cx, v| {
                block.forward(cx, v[0], v[1])
            })
        }
        "decoder" => {
            let block = DecoderBlock::new(&mut reg, "dec", 3, 4, 4, &mut stream);
            let e = randn(Shape::nchw(1, 3, 8, 8), "gc.block.dec.e");
            let d = randn(Shape::nchw(1, 4, 4, 4), "gc.block.dec.d");
            check_registry_fn(name, &mut reg, &[e, d], plan, move |cx, v| {
                block.forward(cx, v[0], v[1])
            })
        }
        "double_conv" => {
            let block = DoubleConv::new(&mut reg, "dc", 2, 3, &mut stream);
            let x = randn(Shape::nchw(1, 2, 6, 6), "gc.block.dc");
            check_registry_fn(name, &mut reg, &[x], plan, move |cx, v| {
                block.forward(cx, v[0])
            })
        }
        other => Err(TensorError::Contract {
            op: "gradcheck",
            message: format!("unknown block check '{other}'"),
        }),
    }
}

/// Whole networks at toy size, scalarized by the dice loss against a fixed
/// binary mask, checked through the head clamp. Use `CheckPlan::model()`
/// unless a full sweep is really wanted.
pub fn model_checks() -> Vec<&'static str> {
    vec!["model/resunetpp", "model/unet_baseline"]
}

pub fn run_model_check(name: &str, plan: &CheckPlan) -> Result<Vec<GradCheckReport>, TensorError> {
    let arch = match name {
        "model/resunetpp" => Arch::Resunetpp,
        "model/unet_baseline" => Arch::UnetBaseline,
        other => {
            return Err(TensorError::Contract {
                op: "gradcheck",
                message: format!("unknown model check '{other}'"),
            })
        }
    };
    let cfg = ModelConfig {
        arch,
        ..ModelConfig::toy(16)
    };
    let mut model = Model::<f64>::build(cfg, 21).expect("toy config is valid");
    let mut stream = SeedStream::derived(plan.seed, "gradcheck.model.input", &[]);
    let x = Tensor::randn(Shape::nchw(1, 3, 16, 16), &mut stream);
    let target = binary_mask(Shape::nchw(1, 1, 16, 16));
    let (reg, fwd) = model.split_forward();
    check_registry_fn(name, reg, &[x], plan, move |cx, v| {
        let y = fwd(cx, v[0])?;
        cx.tape.dice_loss(y, &target, 1.0)
    })
}
