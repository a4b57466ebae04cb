//! Loss kernels. Each returns a scalar plus whatever the analytic backward
//! pass needs; the tape wires them into the graph. Targets are constants
//! (never differentiated) and must be exactly binary.

use crate::element::Element;
use crate::error::TensorError;
use crate::kernels::sum_all;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Training loss selector, also the JSON config vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Dice,
    Bce,
    BceDice,
    Mse,
}

fn check_pair<T: Element>(
    op: &'static str,
    pred: &Tensor<T>,
    target: &Tensor<T>,
) -> Result<(), TensorError> {
    if pred.shape() != target.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            a: pred.shape().to_string(),
            b: target.shape().to_string(),
        });
    }
    if let Some(i) = target
        .data()
        .iter()
        .position(|&v| v != T::ZERO && v != T::ONE)
    {
        return Err(TensorError::Contract {
            op,
            message: format!(
                "target must be binary, found {} at flat index {i}",
                target.data()[i]
            ),
        });
    }
    Ok(())
}

/// Intersection and mass sums saved for the dice backward pass.
#[derive(Clone, Copy, Debug)]
pub struct DiceCtx<T: Element> {
    pub inter: T,
    pub psum: T,
    pub gsum: T,
}

/// Soft dice loss over the whole batch:
/// loss = 1 - (2*sum(p*g) + smooth) / (sum(p) + sum(g) + smooth)
pub fn dice_forward<T: Element>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    smooth: f64,
) -> Result<(T, DiceCtx<T>), TensorError> {
    check_pair("dice_loss", pred, target)?;
    // target is binary, so p*g sums p over the foreground; keep the general
    // product form anyway, it is what the gradient differentiates.
    let prod = Tensor::new(
        pred.shape().clone(),
        pred.data()
            .iter()
            .zip(target.data())
            .map(|(&p, &g)| p * g)
            .collect(),
    )
    .expect("same shape");
    let ctx = DiceCtx {
        inter: sum_all(&prod),
        psum: sum_all(pred),
        gsum: sum_all(target),
    };
    let s = T::from_f64(smooth);
    let two = T::from_f64(2.0);
    let loss = T::ONE - (two * ctx.inter + s) / (ctx.psum + ctx.gsum + s);
    Ok((loss, ctx))
}

/// dL/dp_i = (2I+s)/(S+G+s)^2 - 2*g_i/(S+G+s), scaled by the upstream
/// scalar gradient.
pub fn dice_backward<T: Element>(
    target: &Tensor<T>,
    ctx: &DiceCtx<T>,
    smooth: f64,
    upstream: T,
) -> Tensor<T> {
    let s = T::from_f64(smooth);
    let two = T::from_f64(2.0);
    let denom = ctx.psum + ctx.gsum + s;
    let a = (two * ctx.inter + s) / (denom * denom);
    let b = two / denom;
    Tensor::new(
        target.shape().clone(),
        target
            .data()
            .iter()
            .map(|&g| upstream * (a - b * g))
            .collect(),
    )
    .expect("same shape")
}

/// Probabilities are clamped into [CLAMP, 1-CLAMP] before the logs so a
/// saturated prediction cannot produce log(0).
pub const BCE_CLAMP: f64 = 1e-7;

/// Mean binary cross-entropy:
/// loss = -mean(g*ln(p) + (1-g)*ln(1-p)) with p clamped.
pub fn bce_forward<T: Element>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T, TensorError> {
    check_pair("bce_loss", pred, target)?;
    let lo = T::from_f64(BCE_CLAMP);
    let hi = T::ONE - lo;
    let mut acc = 0.0f64;
    for (&p, &g) in pred.data().iter().zip(target.data()) {
        let pc = p.maximum(lo).minimum(hi).to_f64();
        let g = g.to_f64();
        acc += g * pc.ln() + (1.0 - g) * (1.0 - pc).ln();
    }
    Ok(T::from_f64(-acc / pred.numel() as f64))
}

/// Zero gradient where the clamp was active (matches the clamped forward
/// exactly), else (p-g) / (p*(1-p)*M).
pub fn bce_backward<T: Element>(pred: &Tensor<T>, target: &Tensor<T>, upstream: T) -> Tensor<T> {
    let lo = T::from_f64(BCE_CLAMP);
    let hi = T::ONE - lo;
    let minv = T::from_f64(1.0 / pred.numel() as f64);
    Tensor::new(
        pred.shape().clone(),
        pred.data()
            .iter()
            .zip(target.data())
            .map(|(&p, &g)| {
                if p < lo || p > hi {
                    T::ZERO
                } else {
                    upstream * minv * (p - g) / (p * (T::ONE - p))
                }
            })
            .collect(),
    )
    .expect("same shape")
}

/// Mean squared error; the sanity-check baseline.
pub fn mse_forward<T: Element>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T, TensorError> {
    check_pair("mse_loss", pred, target)?;
    let mut acc = T::ZERO;
    for (&p, &g) in pred.data().iter().zip(target.data()) {
        let d = p - g;
        acc += d * d;
    }
    Ok(acc * T::from_f64(1.0 / pred.numel() as f64))
}

pub fn mse_backward<T: Element>(pred: &Tensor<T>, target: &Tensor<T>, upstream: T) -> Tensor<T> {
    let scale = upstream * T::from_f64(2.0 / pred.numel() as f64);
    Tensor::new(
        pred.shape().clone(),
        pred.data()
            .iter()
            .zip(target.data())
            .map(|(&p, &g)| scale * (p - g))
            .collect(),
    )
    .expect("same shape")
}
