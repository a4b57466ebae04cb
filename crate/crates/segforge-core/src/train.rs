//! Adam, the cosine warm-restart schedule, and the epoch loop with metric
//! and checkpoint persistence.
//!
//! Everything here is deterministic given (config, seed): batch order and
//! augmentation draws come from per-(seed, epoch, sample) streams, the
//! schedule advances on integer step counters, and wall-clock time is the
//! only nondeterministic output, which is why the CSV can zero it.

use std::fs::{self, File};
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::data::{augmented, collate, epoch_order, AugmentationSpec, Sample};
use crate::data::augment::{resize_bilinear, resize_nearest};
use crate::element::Element;
use crate::error::{TensorError, TrainError};
use crate::loss::LossKind;
use crate::metrics::{aggregate, evaluate_pair, MetricReport, SampleMetrics};
use crate::model::Model;
use crate::params::Registry;
use crate::tape::{Mode, Tape, Var};
use crate::tensor::Tensor;

/// Cosine annealing with warm restarts. `t0` is the first cycle length in
/// epochs; each restart multiplies the cycle length by `t_mult`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdrConfig {
    pub enabled: bool,
    pub t0: f64,
    pub t_mult: f64,
    pub lr_min: f64,
}

impl Default for SgdrConfig {
    fn default() -> Self {
        SgdrConfig {
            enabled: true,
            t0: 10.0,
            t_mult: 2.0,
            lr_min: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub loss: LossKind,
    pub dice_smooth: f64,
    /// Binarization threshold for validation metrics and model selection.
    pub threshold: f64,
    pub sgdr: SgdrConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_max: 1e-4,
            batch_size: 16,
            epochs: 120,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            loss: LossKind::Dice,
            dice_smooth: 1.0,
            threshold: 0.5,
            sgdr: SgdrConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.sgdr.lr_min >= 0.0 && self.lr_max > self.sgdr.lr_min) {
            return Err(format!(
                "need lr_max > lr_min >= 0, got lr_max {} lr_min {}",
                self.lr_max, self.sgdr.lr_min
            ));
        }
        if self.epochs < 1 {
            return Err("epochs must be at least 1".into());
        }
        if self.batch_size < 1 {
            return Err("batch_size must be at least 1".into());
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) {
            return Err(format!("eps must be positive, got {}", self.eps));
        }
        if self.sgdr.t0 <= 0.0 {
            return Err(format!("sgdr.t0 must be positive, got {}", self.sgdr.t0));
        }
        if self.sgdr.t_mult < 1.0 {
            return Err(format!(
                "sgdr.t_mult must be at least 1, got {}",
                self.sgdr.t_mult
            ));
        }
        if self.dice_smooth < 0.0 {
            return Err(format!(
                "dice_smooth must be nonnegative, got {}",
                self.dice_smooth
            ));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(format!(
                "threshold must lie in [0, 1], got {}",
                self.threshold
            ));
        }
        Ok(())
    }
}

/// lr at position `t` (epochs) within a cycle of length `t_i` epochs:
/// lr_min + (lr_max - lr_min) * (1 + cos(pi * t / t_i)) / 2.
pub fn sgdr_lr(t: f64, t_i: f64, lr_min: f64, lr_max: f64) -> f64 {
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * t / t_i).cos())
}

/// Per-step lr emitter. Position within the cycle is kept as an integer step
/// count and divided by steps-per-epoch on use, so long runs accumulate no
/// floating-point drift against the closed form.
#[derive(Debug, Clone)]
pub struct Schedule {
    lr_max: f64,
    sgdr: SgdrConfig,
    steps_per_epoch: usize,
    step_in_cycle: usize,
    t_i: f64,
}

impl Schedule {
    pub fn new(lr_max: f64, sgdr: SgdrConfig, steps_per_epoch: usize) -> Schedule {
        assert!(steps_per_epoch >= 1, "schedule needs at least one step per epoch");
        assert!(!sgdr.enabled || sgdr.t0 > 0.0, "cycle length must be positive");
        let t_i = sgdr.t0;
        Schedule {
            lr_max,
            sgdr,
            steps_per_epoch,
            step_in_cycle: 0,
            t_i,
        }
    }

    /// lr for the upcoming optimizer step; advances the clock by one step.
    /// The restart replaces the cycle endpoint, so the emitted sequence jumps
    /// from near lr_min back to exactly lr_max.
    pub fn next_lr(&mut self) -> f64 {
        if !self.sgdr.enabled {
            return self.lr_max;
        }
        let t = self.step_in_cycle as f64 / self.steps_per_epoch as f64;
        let lr = sgdr_lr(t, self.t_i, self.sgdr.lr_min, self.lr_max);
        self.step_in_cycle += 1;
        if self.step_in_cycle as f64 / self.steps_per_epoch as f64 >= self.t_i {
            self.step_in_cycle = 0;
            self.t_i *= self.sgdr.t_mult;
        }
        lr
    }
}

/// One Adam update over every parameter in the registry. `step` is the
/// 1-based global step count used for bias correction and error reports.
/// Parameters without a stored gradient are treated as gradient zero (their
/// moments still decay). New values are staged and committed only after the
/// whole step validates, so on a non-finite gradient or update the parameter
/// values still hold the last good state (checkpoints persist values, not
/// moment buffers, which may have advanced).
pub fn adam_step<T: Element>(
    reg: &mut Registry<T>,
    lr: f64,
    step: usize,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    debug_assert!(step >= 1, "bias correction needs a 1-based step count");
    for (_, p) in reg.iter_params() {
        if let Some(g) = &p.grad {
            if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(TrainError::NonFiniteGrad {
                    name: format!("{}[{i}]", p.name),
                    step,
                });
            }
        }
    }

    let b1 = T::from_f64(cfg.beta1);
    let b2 = T::from_f64(cfg.beta2);
    let c1 = T::from_f64(1.0 - cfg.beta1);
    let c2 = T::from_f64(1.0 - cfg.beta2);
    // Bias corrections in f64: beta^t underflows gracefully there while f32
    // powers lose digits within a few hundred steps.
    let bc1 = T::from_f64(1.0 - cfg.beta1.powi(step as i32));
    let bc2 = T::from_f64(1.0 - cfg.beta2.powi(step as i32));
    let eps = T::from_f64(cfg.eps);
    let lr_t = T::from_f64(lr);
    let apply = lr != 0.0;

    let ids: Vec<_> = reg.param_ids().collect();
    let mut staged: Vec<Option<Vec<T>>> = Vec::with_capacity(ids.len());
    for &id in &ids {
        let p = reg.param_mut(id);
        let grad = p.grad.take();
        let name = &p.name;
        let w = p.value.data();
        let m = p.m.data_mut();
        let mut next = if apply {
            Some(Vec::with_capacity(w.len()))
        } else {
            None
        };
        for i in 0..w.len() {
            let g = grad.as_ref().map_or(T::ZERO, |g| g.data()[i]);
            m[i] = b1 * m[i] + c1 * g;
        }
        let v = p.v.data_mut();
        for i in 0..w.len() {
            let g = grad.as_ref().map_or(T::ZERO, |g| g.data()[i]);
            v[i] = b2 * v[i] + c2 * g * g;
        }
        if let Some(next) = &mut next {
            let m = p.m.data();
            let v = p.v.data();
            for i in 0..w.len() {
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                let x = w[i] - lr_t * m_hat / (v_hat.sqrt() + eps);
                if !x.is_finite() {
                    return Err(TrainError::NonFiniteUpdate {
                        name: format!("{name}[{i}]"),
                        step,
                    });
                }
                next.push(x);
            }
        }
        staged.push(next);
    }
    for (&id, next) in ids.iter().zip(staged) {
        if let Some(next) = next {
            reg.param_mut(id).value.data_mut().copy_from_slice(&next);
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    /// lr of the epoch's first optimizer step.
    pub lr: f64,
    /// Mean of the per-batch loss scalars.
    pub train_loss: f64,
    pub val: MetricReport,
    pub seconds: f64,
}

pub const METRICS_HEADER: &str =
    "epoch,lr,train_loss,val_dice,val_miou,val_recall,val_precision,seconds";

/// Six significant digits, the CSV float format.
pub fn sig6(v: f64) -> String {
    format!("{v:.5e}")
}

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            sig6(self.lr),
            sig6(self.train_loss),
            sig6(self.val.dice),
            sig6(self.val.miou),
            sig6(self.val.recall),
            sig6(self.val.precision),
            sig6(self.seconds),
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    /// First record achieving the maximum validation dice; the one best.ckpt
    /// holds, since later ties do not overwrite it.
    pub fn best(&self) -> Option<&EpochRecord> {
        let mut best: Option<&EpochRecord> = None;
        for r in &self.epochs {
            if best.map_or(true, |b| r.val.dice > b.val.dice) {
                best = Some(r);
            }
        }
        best
    }

    pub fn csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for r in &self.epochs {
            out.push_str(&r.csv_row());
            out.push('\n');
        }
        out
    }
}

/// Everything one training run needs. `out_dir: None` keeps the run purely
/// in memory (no CSV, no checkpoints). `wall_clock: false` writes zero in the
/// seconds column, the bitwise-reproducible reference mode.
pub struct TrainPlan<'a, T: Element> {
    pub model: &'a mut Model<T>,
    pub train_set: &'a [Sample<T>],
    pub val_set: &'a [Sample<T>],
    pub cfg: &'a TrainConfig,
    pub aug: &'a AugmentationSpec,
    pub seed: u64,
    pub out_dir: Option<&'a Path>,
    pub wall_clock: bool,
}

fn contract(message: String) -> TrainError {
    TrainError::Tensor(TensorError::Contract {
        op: "train",
        message,
    })
}

fn out_err(path: &Path, source: std::io::Error) -> TrainError {
    TrainError::Output {
        path: path.display().to_string(),
        source,
    }
}

fn attach_loss<T: Element>(
    tape: &mut Tape<T>,
    pred: Var,
    target: &Tensor<T>,
    kind: LossKind,
    smooth: f64,
) -> Result<Var, TensorError> {
    match kind {
        LossKind::Dice => tape.dice_loss(pred, target, smooth),
        LossKind::Bce => tape.bce_loss(pred, target),
        LossKind::BceDice => {
            let b = tape.bce_loss(pred, target)?;
            let d = tape.dice_loss(pred, target, smooth)?;
            tape.add(b, d)
        }
        LossKind::Mse => tape.mse_loss(pred, target),
    }
}

/// Best-effort persistence of the current (still finite) parameters before
/// surfacing a numeric abort.
fn persist_last_good<T: Element>(model: &Model<T>, out_dir: Option<&Path>) {
    if let Some(dir) = out_dir {
        let path = dir.join("last.ckpt");
        if let Err(e) = save_checkpoint(model, &path) {
            log::warn!("could not persist last-good checkpoint to {}: {e}", path.display());
        }
    }
}

/// The epoch loop: augmented train batches, one Adam step per batch at the
/// scheduled lr, then a full validation pass. Appends to metrics.csv and
/// refreshes last.ckpt every epoch; best.ckpt whenever validation dice
/// strictly improves. A non-finite loss, gradient, or update aborts the run
/// with the last good parameters persisted.
pub fn train<T: Element>(plan: TrainPlan<'_, T>) -> Result<History, TrainError> {
    let TrainPlan {
        model,
        train_set,
        val_set,
        cfg,
        aug,
        seed,
        out_dir,
        wall_clock,
    } = plan;
    cfg.validate().map_err(contract)?;
    aug.validate().map_err(contract)?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    if aug.target_size != model.config.input_size {
        return Err(contract(format!(
            "augmentation target_size {} must match model input_size {}",
            aug.target_size, model.config.input_size
        )));
    }

    let mut csv = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| out_err(dir, e))?;
            let path = dir.join("metrics.csv");
            let mut f = File::create(&path).map_err(|e| out_err(&path, e))?;
            writeln!(f, "{METRICS_HEADER}").map_err(|e| out_err(&path, e))?;
            Some((f, path))
        }
        None => None,
    };

    let n = train_set.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let mut schedule = Schedule::new(cfg.lr_max, cfg.sgdr.clone(), steps_per_epoch);
    let mut history = History::default();
    let mut best_dice = f64::NEG_INFINITY;
    let mut step = 0usize;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let order = epoch_order(n, seed, epoch);
        let mut loss_sum = 0.0;
        let mut epoch_lr = None;

        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Sample<T>> = chunk
                .iter()
                .map(|&i| augmented(&train_set[i], aug, seed, epoch))
                .collect();
            let (x, y) = collate(&batch);
            let traced = model.trace(&x, Mode::Train)?;
            let mut cx = traced.cx;
            let loss_var = attach_loss(&mut cx.tape, traced.out, &y, cfg.loss, cfg.dice_smooth)?;
            let loss = cx.tape.value(loss_var).scalar_value().to_f64();
            step += 1;
            if !loss.is_finite() {
                drop(cx);
                persist_last_good(model, out_dir);
                return Err(TrainError::NonFiniteLoss { step });
            }
            let (tape, bound) = cx.into_parts();
            let mut grads = tape.backward(loss_var)?;
            model.reg.store_grads(&bound, &mut grads);
            let lr = schedule.next_lr();
            epoch_lr.get_or_insert(lr);
            if let Err(e) = adam_step(&mut model.reg, lr, step, cfg) {
                persist_last_good(model, out_dir);
                return Err(e);
            }
            loss_sum += loss;
        }

        let val = evaluate(model, val_set, cfg.threshold)?;
        let seconds = if wall_clock {
            started.elapsed().as_secs_f64()
        } else {
            0.0
        };
        let record = EpochRecord {
            epoch,
            lr: epoch_lr.expect("nonempty train set yields at least one step"),
            train_loss: loss_sum / steps_per_epoch as f64,
            val,
            seconds,
        };
        log::info!(
            "epoch {}/{} loss {} val_dice {} lr {}",
            epoch,
            cfg.epochs,
            sig6(record.train_loss),
            sig6(record.val.dice),
            sig6(record.lr),
        );
        if let Some((f, path)) = &mut csv {
            writeln!(f, "{}", record.csv_row()).map_err(|e| out_err(path, e))?;
            f.flush().map_err(|e| out_err(path, e))?;
        }
        if let Some(dir) = out_dir {
            save_checkpoint(&*model, dir.join("last.ckpt"))?;
            if record.val.dice > best_dice {
                save_checkpoint(&*model, dir.join("best.ckpt"))?;
            }
        }
        best_dice = best_dice.max(record.val.dice);
        history.epochs.push(record);
    }
    Ok(history)
}

fn fit<T: Element>(s: &Sample<T>, size: usize) -> Sample<T> {
    Sample {
        id: s.id.clone(),
        image: resize_bilinear(&s.image, size, size),
        mask: resize_nearest(&s.mask, size, size),
    }
}

/// Per-sample inference metrics: resize to the model input (no other
/// augmentation), forward in infer mode, confusion counts at `threshold`.
pub fn evaluate_samples<T: Element>(
    model: &mut Model<T>,
    samples: &[Sample<T>],
    threshold: f64,
) -> Result<Vec<SampleMetrics>, TrainError> {
    let size = model.config.input_size;
    let mut per = Vec::with_capacity(samples.len());
    for s in samples {
        let fitted = fit(s, size);
        let (x, y) = collate(std::slice::from_ref(&fitted));
        let pred = model.forward(&x, Mode::Infer)?;
        per.push(evaluate_pair(&pred, &y, threshold)?);
    }
    Ok(per)
}

pub fn evaluate<T: Element>(
    model: &mut Model<T>,
    samples: &[Sample<T>],
    threshold: f64,
) -> Result<MetricReport, TrainError> {
    let per = evaluate_samples(model, samples, threshold)?;
    Ok(aggregate(&per, threshold)?)
}
