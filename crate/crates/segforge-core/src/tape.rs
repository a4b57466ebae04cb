//! Reverse-mode autodiff on a dynamically recorded tape.
//!
//! Ops append nodes in execution order, so the node list is already a
//! topological order; `backward` walks it once in reverse, accumulating
//! gradients additively (fan-out just works). `backward` consumes the tape:
//! the graph exists for exactly one forward/backward cycle, which is what
//! makes dynamic batch shapes trivial and leaks impossible. Tapes are plain
//! owned values and never shared across threads.

use crate::element::Element;
use crate::error::TensorError;
use crate::kernels::{self, BnCtx, Conv2dCfg, ConvDims};
use crate::loss::{self, DiceCtx};
use crate::tensor::{check_finite, Tensor};

/// Forward-pass mode; decides which statistics batchnorm uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Handle to a tape node. Only meaningful for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Batchnorm running statistics (model state, not a parameter).
#[derive(Debug, Clone, PartialEq)]
pub struct BnState<T: Element> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    /// False until the first training-mode update; inference before that is
    /// an error rather than a silent pass through the (0, 1) init.
    pub initialized: bool,
}

impl<T: Element> BnState<T> {
    pub fn new(channels: usize) -> BnState<T> {
        BnState {
            running_mean: vec![T::ZERO; channels],
            running_var: vec![T::ONE; channels],
            initialized: false,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

enum Op<T: Element> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        dims: ConvDims,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        ctx: BnCtx<T>,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    ClampUnit {
        x: Var,
        eps: f64,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    MulChannel {
        x: Var,
        s: Var,
    },
    ConcatChannels {
        a: Var,
        b: Var,
        ca: usize,
        cb: usize,
    },
    GlobalAvgPool {
        x: Var,
    },
    UpsampleNearest {
        x: Var,
        factor: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    SumAll {
        x: Var,
    },
    DiceLoss {
        pred: Var,
        target: Tensor<T>,
        smooth: f64,
        ctx: DiceCtx<T>,
    },
    BceLoss {
        pred: Var,
        target: Tensor<T>,
    },
    MseLoss {
        pred: Var,
        target: Tensor<T>,
    },
}

struct Node<T: Element> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Gradient buffers produced by `backward`, indexed by the `Var`s of the
/// consumed tape.
#[derive(Debug)]
pub struct Gradients<T: Element> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// None means the loss did not depend on this node (gradient zero).
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub struct Tape<T: Element> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Tape::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Tape<T> {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Tracked input: gradients will be available for it after backward.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Untracked input (data batches, constants).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        op_name: &'static str,
        value: Tensor<T>,
        requires_grad: bool,
        op: Op<T>,
    ) -> Result<Var, TensorError> {
        check_finite(op_name, &value)?;
        Ok(self.push(value, requires_grad, op))
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---- ops ----

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        cfg: Conv2dCfg,
    ) -> Result<Var, TensorError> {
        let dims = kernels::conv_dims(self.value(x), self.value(w), self.value(b), cfg)?;
        let y = kernels::conv2d_forward(self.value(x), self.value(w), self.value(b), &dims);
        let rg = self.needs(&[x, w, b]);
        self.push_checked("conv2d", y, rg, Op::Conv2d { x, w, b, dims })
    }

    /// Batchnorm over (N, H, W) per channel. Train mode normalizes with
    /// batch statistics and folds them into `state` via EMA
    /// (new = (1-momentum)*old + momentum*batch, unbiased variance);
    /// infer mode requires initialized running statistics.
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BnState<T>,
        mode: Mode,
        momentum: f64,
        eps: f64,
    ) -> Result<Var, TensorError> {
        let rg = self.needs(&[x, gamma, beta]);
        match mode {
            Mode::Train => {
                let out = kernels::bn_train_forward(
                    self.value(x),
                    self.value(gamma),
                    self.value(beta),
                    eps,
                )?;
                // Commit the running-stat update only after the batch stats
                // proved finite, so a poisoned batch cannot corrupt state.
                let mom = T::from_f64(momentum);
                let keep = T::ONE - mom;
                for c in 0..state.channels() {
                    state.running_mean[c] = keep * state.running_mean[c] + mom * out.ctx.mean[c];
                    state.running_var[c] =
                        keep * state.running_var[c] + mom * out.batch_var_unbiased[c];
                }
                state.initialized = true;
                self.push_checked(
                    "batchnorm2d",
                    out.y,
                    rg,
                    Op::BatchNorm {
                        x,
                        gamma,
                        beta,
                        ctx: out.ctx,
                    },
                )
            }
            Mode::Infer => {
                if !state.initialized {
                    return Err(TensorError::UninitializedStats);
                }
                let (y, ctx) = kernels::bn_infer_forward(
                    self.value(x),
                    self.value(gamma),
                    self.value(beta),
                    &state.running_mean,
                    &state.running_var,
                    eps,
                )?;
                self.push_checked("batchnorm2d", y, rg, Op::BatchNorm { x, gamma, beta, ctx })
            }
        }
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = kernels::relu(self.value(x));
        let rg = self.needs(&[x]);
        self.push(y, rg, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = kernels::sigmoid(self.value(x));
        let rg = self.needs(&[x]);
        self.push(y, rg, Op::Sigmoid { x })
    }

    /// Clamp into [eps, 1-eps]. The model head uses this after its sigmoid so
    /// the advertised open-interval (0, 1) output survives float rounding
    /// (plain sigmoid reaches exactly 1.0 for large finite logits). Gradient
    /// is identity strictly inside the band, zero where clamped.
    pub fn clamp_unit(&mut self, x: Var, eps: f64) -> Result<Var, TensorError> {
        if !(eps > 0.0 && eps < 0.5) {
            return Err(TensorError::Contract {
                op: "clamp_unit",
                message: format!("eps must lie in (0, 0.5), got {eps}"),
            });
        }
        let lo = T::from_f64(eps);
        let hi = T::ONE - lo;
        let y = self.value(x).map(|v| v.maximum(lo).minimum(hi));
        let rg = self.needs(&[x]);
        self.push_checked("clamp_unit", y, rg, Op::ClampUnit { x, eps })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                a: self.value(a).shape().to_string(),
                b: self.value(b).shape().to_string(),
            });
        }
        let mut y = self.value(a).clone();
        for (yv, &bv) in y.data_mut().iter_mut().zip(self.value(b).data()) {
            *yv += bv;
        }
        let rg = self.needs(&[a, b]);
        self.push_checked("add", y, rg, Op::Add { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                a: self.value(a).shape().to_string(),
                b: self.value(b).shape().to_string(),
            });
        }
        let mut y = self.value(a).clone();
        for (yv, &bv) in y.data_mut().iter_mut().zip(self.value(b).data()) {
            *yv *= bv;
        }
        let rg = self.needs(&[a, b]);
        self.push_checked("mul", y, rg, Op::Mul { a, b })
    }

    /// x[n,c,h,w] * s[n,c,1,1]; the squeeze-excite gating primitive.
    pub fn mul_channel(&mut self, x: Var, s: Var) -> Result<Var, TensorError> {
        let y = kernels::mul_channel(self.value(x), self.value(s))?;
        let rg = self.needs(&[x, s]);
        self.push_checked("mul_channel", y, rg, Op::MulChannel { x, s })
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let y = kernels::concat_channels(self.value(a), self.value(b))?;
        let ca = self.value(a).shape()[1];
        let cb = self.value(b).shape()[1];
        let rg = self.needs(&[a, b]);
        self.push_checked("concat_channels", y, rg, Op::ConcatChannels { a, b, ca, cb })
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, TensorError> {
        let y = kernels::global_avg_pool(self.value(x))?;
        let rg = self.needs(&[x]);
        self.push_checked("global_avg_pool", y, rg, Op::GlobalAvgPool { x })
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var, TensorError> {
        let y = kernels::upsample_nearest(self.value(x), factor)?;
        let rg = self.needs(&[x]);
        self.push_checked("upsample_nearest", y, rg, Op::UpsampleNearest { x, factor })
    }

    pub fn maxpool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var, TensorError> {
        let out = kernels::maxpool2d(self.value(x), k, stride)?;
        let rg = self.needs(&[x]);
        self.push_checked(
            "maxpool2d",
            out.y,
            rg,
            Op::MaxPool {
                x,
                argmax: out.argmax,
            },
        )
    }

    /// Scalar sum of all elements (shape []).
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = kernels::sum_all(self.value(x));
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(s), rg, Op::SumAll { x })
    }

    pub fn dice_loss(
        &mut self,
        pred: Var,
        target: &Tensor<T>,
        smooth: f64,
    ) -> Result<Var, TensorError> {
        let (l, ctx) = loss::dice_forward(self.value(pred), target, smooth)?;
        let rg = self.needs(&[pred]);
        self.push_checked(
            "dice_loss",
            Tensor::scalar(l),
            rg,
            Op::DiceLoss {
                pred,
                target: target.clone(),
                smooth,
                ctx,
            },
        )
    }

    pub fn bce_loss(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var, TensorError> {
        let l = loss::bce_forward(self.value(pred), target)?;
        let rg = self.needs(&[pred]);
        self.push_checked(
            "bce_loss",
            Tensor::scalar(l),
            rg,
            Op::BceLoss {
                pred,
                target: target.clone(),
            },
        )
    }

    pub fn mse_loss(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var, TensorError> {
        let l = loss::mse_forward(self.value(pred), target)?;
        let rg = self.needs(&[pred]);
        self.push_checked(
            "mse_loss",
            Tensor::scalar(l),
            rg,
            Op::MseLoss {
                pred,
                target: target.clone(),
            },
        )
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss. Consumes the tape (the graph is
    /// single-use); returns per-node gradients for every node the loss
    /// depends on.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>, TensorError> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                got: self.nodes[loss.0].value.shape().to_string(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::full(
            self.nodes[loss.0].value.shape().clone(),
            T::ONE,
        ));

        for i in (0..=loss.0).rev() {
            if grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let g = grads[i].take().expect("checked above");
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Conv2d { x, w, b, dims } => {
                    if self.nodes[x.0].requires_grad {
                        let dx = kernels::conv2d_grad_input(&g, self.val(*w), dims);
                        accumulate(&mut grads, *x, dx);
                    }
                    if self.nodes[w.0].requires_grad || self.nodes[b.0].requires_grad {
                        let (dw, db) = kernels::conv2d_grad_weight(self.val(*x), &g, dims);
                        if self.nodes[w.0].requires_grad {
                            accumulate(&mut grads, *w, dw);
                        }
                        if self.nodes[b.0].requires_grad {
                            accumulate(&mut grads, *b, db);
                        }
                    }
                }
                Op::BatchNorm { x, gamma, beta, ctx } => {
                    let (dx, dgamma, dbeta) =
                        kernels::bn_backward(self.val(*x), self.val(*gamma), &g, ctx);
                    if self.nodes[x.0].requires_grad {
                        accumulate(&mut grads, *x, dx);
                    }
                    if self.nodes[gamma.0].requires_grad {
                        accumulate(&mut grads, *gamma, dgamma);
                    }
                    if self.nodes[beta.0].requires_grad {
                        accumulate(&mut grads, *beta, dbeta);
                    }
                }
                Op::Relu { x } => {
                    if self.nodes[x.0].requires_grad {
                        let dx = kernels::relu_backward(self.val(*x), &g);
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::Sigmoid { x } => {
                    if self.nodes[x.0].requires_grad {
                        let dx = kernels::sigmoid_backward(&self.nodes[i].value, &g);
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::ClampUnit { x, eps } => {
                    if self.nodes[x.0].requires_grad {
                        let lo = T::from_f64(*eps);
                        let hi = T::ONE - lo;
                        let mut dx = g.clone();
                        for (dv, &v) in dx.data_mut().iter_mut().zip(self.val(*x).data()) {
                            if !(v > lo && v < hi) {
                                *dv = T::ZERO;
                            }
                        }
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::Add { a, b } => {
                    if self.nodes[a.0].requires_grad {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.nodes[b.0].requires_grad {
                        accumulate(&mut grads, *b, g.clone());
                    }
                }
                Op::Mul { a, b } => {
                    if self.nodes[a.0].requires_grad {
                        let mut da = g.clone();
                        for (dv, &bv) in da.data_mut().iter_mut().zip(self.val(*b).data()) {
                            *dv *= bv;
                        }
                        accumulate(&mut grads, *a, da);
                    }
                    if self.nodes[b.0].requires_grad {
                        let mut db = g.clone();
                        for (dv, &av) in db.data_mut().iter_mut().zip(self.val(*a).data()) {
                            *dv *= av;
                        }
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::MulChannel { x, s } => {
                    let (dx, ds) =
                        kernels::mul_channel_backward(self.val(*x), self.val(*s), &g);
                    if self.nodes[x.0].requires_grad {
                        accumulate(&mut grads, *x, dx);
                    }
                    if self.nodes[s.0].requires_grad {
                        accumulate(&mut grads, *s, ds);
                    }
                }
                Op::ConcatChannels { a, b, ca, cb } => {
                    let (da, db) = kernels::concat_channels_backward(&g, *ca, *cb);
                    if self.nodes[a.0].requires_grad {
                        accumulate(&mut grads, *a, da);
                    }
                    if self.nodes[b.0].requires_grad {
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::GlobalAvgPool { x } => {
                    if self.nodes[x.0].requires_grad {
                        let dx =
                            kernels::global_avg_pool_backward(&g, self.val(*x).shape());
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::UpsampleNearest { x, factor } => {
                    if self.nodes[x.0].requires_grad {
                        let dx = kernels::upsample_nearest_backward(
                            &g,
                            *factor,
                            self.val(*x).shape(),
                        );
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::MaxPool { x, argmax } => {
                    if self.nodes[x.0].requires_grad {
                        let dx =
                            kernels::maxpool2d_backward(&g, argmax, self.val(*x).shape());
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::SumAll { x } => {
                    if self.nodes[x.0].requires_grad {
                        let dx =
                            Tensor::full(self.val(*x).shape().clone(), g.scalar_value());
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::DiceLoss {
                    pred,
                    target,
                    smooth,
                    ctx,
                } => {
                    if self.nodes[pred.0].requires_grad {
                        let dp = loss::dice_backward(target, ctx, *smooth, g.scalar_value());
                        accumulate(&mut grads, *pred, dp);
                    }
                }
                Op::BceLoss { pred, target } => {
                    if self.nodes[pred.0].requires_grad {
                        let dp = loss::bce_backward(self.val(*pred), target, g.scalar_value());
                        accumulate(&mut grads, *pred, dp);
                    }
                }
                Op::MseLoss { pred, target } => {
                    if self.nodes[pred.0].requires_grad {
                        let dp = loss::mse_backward(self.val(*pred), target, g.scalar_value());
                        accumulate(&mut grads, *pred, dp);
                    }
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    #[inline]
    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }
}

fn accumulate<T: Element>(grads: &mut [Option<Tensor<T>>], v: Var, delta: Tensor<T>) {
    match &mut grads[v.0] {
        Some(t) => {
            debug_assert_eq!(t.shape(), delta.shape());
            for (a, &b) in t.data_mut().iter_mut().zip(delta.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn sum_backward_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(Shape::nchw(1, 1, 2, 3), |i| i as f64));
        let loss = tape.sum_all(x);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn elementwise_square_backward_is_two_x() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(Shape::nchw(1, 1, 2, 2), |i| i as f64 - 1.5));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss).unwrap();
        let expect: Vec<f64> = (0..4).map(|i| 2.0 * (i as f64 - 1.5)).collect();
        assert_eq!(grads.get(x).unwrap().data(), &expect[..]);
    }

    #[test]
    fn fan_out_accumulates_both_paths() {
        // loss = sum(x) + sum(x*x) => grad = 1 + 2x
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(Shape::nchw(1, 1, 1, 3), |i| i as f64));
        let s1 = tape.sum_all(x);
        let sq = tape.mul(x, x).unwrap();
        let s2 = tape.sum_all(sq);
        let loss = tape.add(s1, s2).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 3.0, 5.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::zeros(Shape::nchw(1, 1, 2, 2)));
        let y = tape.relu(x);
        let err = tape.backward(y).unwrap_err();
        assert!(matches!(err, TensorError::NonScalarLoss { .. }));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(Shape::nchw(1, 1, 1, 2), 2.0f64));
        let c = tape.constant(Tensor::full(Shape::nchw(1, 1, 1, 2), 3.0f64));
        let prod = tape.mul(x, c).unwrap();
        let loss = tape.sum_all(prod);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 3.0]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn add_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::<f64>::zeros(Shape::nchw(1, 2, 4, 4)));
        let b = tape.leaf(Tensor::<f64>::zeros(Shape::nchw(1, 3, 4, 4)));
        let msg = tape.add(a, b).unwrap_err().to_string();
        assert!(msg.contains("[1, 2, 4, 4]") && msg.contains("[1, 3, 4, 4]"), "{msg}");
    }

    #[test]
    fn add_zeros_is_identity_and_grads_flow_to_both() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(Shape::nchw(1, 1, 2, 2), |i| i as f64));
        let z = tape.leaf(Tensor::<f64>::zeros(Shape::nchw(1, 1, 2, 2)));
        let y = tape.add(x, z).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 1.0, 2.0, 3.0]);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 4]);
        assert_eq!(grads.get(z).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn mul_channel_example_gradients() {
        // s = 0.5 on one channel: dx = 0.5*g, ds = sum(x*g) over the plane.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(Shape::nchw(1, 1, 2, 2), |i| i as f64 + 1.0));
        let s = tape.leaf(Tensor::full(Shape::nchw(1, 1, 1, 1), 0.5f64));
        let y = tape.mul_channel(x, s).unwrap();
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.5; 4]);
        assert_eq!(grads.get(s).unwrap().data(), &[10.0]); // 1+2+3+4
    }

    #[test]
    fn clamp_unit_pins_range_and_masks_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(
            Tensor::new(Shape::nchw(1, 1, 1, 4), vec![-2.0, 0.3, 0.9, 7.0]).unwrap(),
        );
        let y = tape.clamp_unit(x, 1e-3).unwrap();
        assert_eq!(tape.value(y).data(), &[1e-3, 0.3, 0.9, 1.0 - 1e-3]);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn bn_uninitialized_infer_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::zeros(Shape::nchw(2, 3, 4, 4)));
        let gamma = tape.leaf(Tensor::full(Shape::new(vec![3]).unwrap(), 1.0));
        let beta = tape.leaf(Tensor::zeros(Shape::new(vec![3]).unwrap()));
        let mut state = BnState::new(3);
        let err = tape
            .batchnorm2d(x, gamma, beta, &mut state, Mode::Infer, 0.1, 1e-5)
            .unwrap_err();
        assert!(matches!(err, TensorError::UninitializedStats));
    }

    #[test]
    fn bn_running_stats_follow_ema() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(Shape::nchw(1, 1, 2, 2), 4.0f64));
        let gamma = tape.leaf(Tensor::full(Shape::new(vec![1]).unwrap(), 1.0));
        let beta = tape.leaf(Tensor::zeros(Shape::new(vec![1]).unwrap()));
        let mut state = BnState::new(1);
        tape.batchnorm2d(x, gamma, beta, &mut state, Mode::Train, 0.1, 1e-5)
            .unwrap();
        assert!(state.initialized);
        // mean: 0.9*0 + 0.1*4; var: 0.9*1 + 0.1*0 (constant batch)
        assert!((state.running_mean[0] - 0.4).abs() < 1e-12);
        assert!((state.running_var[0] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn losses_are_scalar_nodes_and_combine() {
        let mut tape = Tape::new();
        let pred = tape.leaf(Tensor::full(Shape::nchw(1, 1, 2, 2), 0.5f64));
        let target = Tensor::new(
            Shape::nchw(1, 1, 2, 2),
            vec![1.0, 0.0, 1.0, 0.0],
        )
        .unwrap();
        let d = tape.dice_loss(pred, &target, 1.0).unwrap();
        let b = tape.bce_loss(pred, &target).unwrap();
        let combined = tape.add(d, b).unwrap();
        let dv = tape.value(d).scalar_value();
        let bv = tape.value(b).scalar_value();
        assert_eq!(tape.value(combined).scalar_value(), dv + bv);
        let grads = tape.backward(combined).unwrap();
        assert!(grads.get(pred).is_some());
    }

    #[test]
    fn infer_forward_is_pure_and_repeatable() {
        let mut rng = crate::rng::SeedStream::new(33);
        let x_val = Tensor::<f64>::randn(Shape::nchw(2, 3, 6, 6), &mut rng);
        let gamma_val = Tensor::full(Shape::new(vec![3]).unwrap(), 1.3);
        let beta_val = Tensor::full(Shape::new(vec![3]).unwrap(), -0.2);
        let mut state = BnState::new(3);
        state.running_mean = vec![0.1, -0.4, 0.3];
        state.running_var = vec![1.1, 0.9, 2.0];
        state.initialized = true;
        let run = |state: &mut BnState<f64>| {
            let mut tape = Tape::new();
            let x = tape.constant(x_val.clone());
            let gamma = tape.constant(gamma_val.clone());
            let beta = tape.constant(beta_val.clone());
            let y = tape
                .batchnorm2d(x, gamma, beta, state, Mode::Infer, 0.1, 1e-5)
                .unwrap();
            tape.value(y).clone()
        };
        let a = run(&mut state);
        let state_snapshot = state.clone();
        let b = run(&mut state);
        assert_eq!(a, b, "infer passes must be bitwise identical");
        assert_eq!(state, state_snapshot, "infer must not touch running stats");
    }
}
